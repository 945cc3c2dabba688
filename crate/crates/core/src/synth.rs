//! Template grammar for a synthetic rated corpus.
//!
//! Sentences are built from templates such as `the NOUN is ADV ADJ .` where
//! only adjectives carry valence, so the lexicon scorer gives every generated
//! sentence an exact rating. The text format is line based:
//!
//! ```text
//! template the NOUN is ADV ADJ .
//! noun food
//! adv really
//! adj great 0.75
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::Rng;

use crate::corpus::{rate_all, LexiconScorer, RatedSentence, Sentence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Slot {
    Word(String),
    Noun,
    Adv,
    Adj,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    templates: Vec<Vec<Slot>>,
    nouns: Vec<String>,
    adverbs: Vec<String>,
    adjectives: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Negative,
    Neutral,
    Positive,
}

impl Polarity {
    fn admits(self, valence: f64) -> bool {
        match self {
            Polarity::Negative => valence < 0.0,
            Polarity::Neutral => valence == 0.0,
            Polarity::Positive => valence > 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub size: usize,
    /// Share of positive sentences among the polar ones.
    pub positive_ratio: f64,
    /// Share of sentences built only from zero-valence adjectives.
    pub neutral_ratio: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            size: 2000,
            positive_ratio: 0.55,
            neutral_ratio: 0.1,
        }
    }
}

const DEFAULT_GRAMMAR: &str = "\
template the NOUN is ADJ .
template the NOUN is ADV ADJ .
template the NOUN was ADV ADJ .
template our NOUN was ADJ and ADJ .
template i think the NOUN is ADV ADJ .
template the NOUN here is ADJ !
noun food
noun service
noun staff
noun pizza
noun burger
noun coffee
noun waiter
noun menu
noun place
noun salad
noun soup
noun steak
noun decor
noun music
noun price
noun dessert
noun bread
noun patio
noun owner
noun sushi
adv really
adv very
adv pretty
adv quite
adj terrible -1
adj awful -1
adj horrible -1
adj bad -0.5
adj bland -0.5
adj poor -0.5
adj mediocre -0.25
adj ok 0
adj average 0
adj fine 0
adj decent 0.25
adj good 0.5
adj nice 0.5
adj tasty 0.5
adj great 0.75
adj lovely 0.75
adj amazing 1
adj excellent 1
adj fantastic 1
";

fn grammar_error(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Grammar(format!("line {line}: {msg}"))
}

impl Grammar {
    pub fn parse(text: &str) -> Result<Self> {
        let mut g = Grammar {
            templates: Vec::new(),
            nouns: Vec::new(),
            adverbs: Vec::new(),
            adjectives: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let kind = parts.next().expect("non-empty line");
            let rest: Vec<&str> = parts.collect();
            match kind {
                "template" => {
                    let slots: Vec<Slot> = rest
                        .iter()
                        .map(|w| match *w {
                            "NOUN" => Slot::Noun,
                            "ADV" => Slot::Adv,
                            "ADJ" => Slot::Adj,
                            w => Slot::Word(w.to_lowercase()),
                        })
                        .collect();
                    if !slots.contains(&Slot::Adj) {
                        return Err(grammar_error(i + 1, "template has no ADJ slot"));
                    }
                    g.templates.push(slots);
                }
                "noun" | "adv" => {
                    let [word] = rest[..] else {
                        return Err(grammar_error(i + 1, format!("expected `{kind} WORD`")));
                    };
                    let list = if kind == "noun" { &mut g.nouns } else { &mut g.adverbs };
                    list.push(word.to_lowercase());
                }
                "adj" => {
                    let [word, valence] = rest[..] else {
                        return Err(grammar_error(i + 1, "expected `adj WORD VALENCE`"));
                    };
                    let v: f64 = valence
                        .parse()
                        .map_err(|_| grammar_error(i + 1, format!("bad valence {valence:?}")))?;
                    if !(-1.0..=1.0).contains(&v) {
                        return Err(grammar_error(i + 1, format!("valence {v} outside [-1, 1]")));
                    }
                    g.adjectives.push((word.to_lowercase(), v));
                }
                other => return Err(grammar_error(i + 1, format!("unknown entry kind {other:?}"))),
            }
        }
        g.check()?;
        Ok(g)
    }

    fn check(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Grammar("no templates".into()));
        }
        if self.adjectives.is_empty() {
            return Err(Error::Grammar("no adjectives".into()));
        }
        let uses = |s: &Slot| self.templates.iter().any(|t| t.contains(s));
        if uses(&Slot::Noun) && self.nouns.is_empty() {
            return Err(Error::Grammar("templates use NOUN but no nouns are listed".into()));
        }
        if uses(&Slot::Adv) && self.adverbs.is_empty() {
            return Err(Error::Grammar("templates use ADV but no adverbs are listed".into()));
        }
        let mut seen = HashSet::new();
        for (w, _) in &self.adjectives {
            if !seen.insert(w.as_str()) {
                return Err(Error::Grammar(format!("adjective {w:?} listed twice")));
            }
        }
        let fixed = self.templates.iter().flatten().filter_map(|s| match s {
            Slot::Word(w) => Some(w),
            _ => None,
        });
        for w in self.nouns.iter().chain(&self.adverbs).chain(fixed) {
            if seen.contains(w.as_str()) {
                return Err(Error::Grammar(format!("{w:?} is both an adjective and a neutral word")));
            }
        }
        Ok(())
    }

    /// Scorer whose entries are exactly the adjectives.
    pub fn lexicon(&self) -> LexiconScorer {
        let map: HashMap<String, f64> = self.adjectives.iter().cloned().collect();
        LexiconScorer::new(map).expect("grammar validated")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.templates {
            let words: Vec<&str> = t
                .iter()
                .map(|s| match s {
                    Slot::Word(w) => w.as_str(),
                    Slot::Noun => "NOUN",
                    Slot::Adv => "ADV",
                    Slot::Adj => "ADJ",
                })
                .collect();
            writeln!(out, "template {}", words.join(" ")).expect("string write");
        }
        for n in &self.nouns {
            writeln!(out, "noun {n}").expect("string write");
        }
        for a in &self.adverbs {
            writeln!(out, "adv {a}").expect("string write");
        }
        for (a, v) in &self.adjectives {
            writeln!(out, "adj {a} {v}").expect("string write");
        }
        out
    }

    fn adjectives_of(&self, polarity: Polarity) -> Vec<&str> {
        self.adjectives
            .iter()
            .filter(|(_, v)| polarity.admits(*v))
            .map(|(w, _)| w.as_str())
            .collect()
    }

    /// One sentence whose adjectives all have the given polarity.
    pub fn sample<R: Rng + ?Sized>(&self, polarity: Polarity, rng: &mut R) -> Result<Sentence> {
        let adjs = self.adjectives_of(polarity);
        if adjs.is_empty() {
            return Err(Error::Grammar(format!("no adjectives with {polarity:?} valence")));
        }
        let template = &self.templates[rng.random_range(0..self.templates.len())];
        let pick = |list: &[String], rng: &mut R| list[rng.random_range(0..list.len())].clone();
        let mut tokens = Vec::with_capacity(template.len());
        for slot in template {
            tokens.push(match slot {
                Slot::Word(w) => w.clone(),
                Slot::Noun => pick(&self.nouns, rng),
                Slot::Adv => pick(&self.adverbs, rng),
                Slot::Adj => adjs[rng.random_range(0..adjs.len())].to_string(),
            });
        }
        Sentence::from_tokens(tokens)
    }

    /// A rated corpus; every rating is the lexicon score of its sentence.
    pub fn generate<R: Rng + ?Sized>(&self, params: &SynthParams, rng: &mut R) -> Result<Vec<RatedSentence>> {
        let ratio_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !ratio_ok(params.positive_ratio) || !ratio_ok(params.neutral_ratio) {
            return Err(Error::Config("synth ratios must lie in [0, 1]".into()));
        }
        let mut sentences = Vec::with_capacity(params.size);
        for _ in 0..params.size {
            let polarity = if rng.random_bool(params.neutral_ratio) {
                Polarity::Neutral
            } else if rng.random_bool(params.positive_ratio) {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            sentences.push(self.sample(polarity, rng)?);
        }
        rate_all(&self.lexicon(), sentences)
    }
}

impl Default for Grammar {
    fn default() -> Self {
        Self::parse(DEFAULT_GRAMMAR).expect("built-in grammar is valid")
    }
}
