//! Sentences, vocabulary, rated datasets and automatic rating scorers.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactHeader;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

pub const MIN_RATING: f64 = 1.0;
pub const MAX_RATING: f64 = 5.0;
pub const NEUTRAL_RATING: f64 = 3.0;

/// A tokenized sentence. Token ids are obtained through [`Vocabulary::encode`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    tokens: Vec<String>,
}

impl Sentence {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

fn is_split_punct(c: char) -> bool {
    c.is_ascii_punctuation() && c != '\'' && c != '<' && c != '>'
}

/// Lowercases, splits on whitespace and breaks punctuation out into its own tokens.
pub fn tokenize(text: &str) -> Result<Sentence> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if is_split_punct(c) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            } else {
                current.extend(c.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    Sentence::from_tokens(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            id_to_token,
            token_to_id,
        }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.id_to_token
    }
}

impl Vocabulary {
    /// Builds a vocabulary; tokens seen fewer than `min_freq` times are left to map to UNK.
    /// Ids are assigned by descending frequency, ties broken lexicographically.
    pub fn build(corpus: &[Sentence], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let min_freq = min_freq.max(1);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in corpus {
            for t in s.tokens() {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq && !RESERVED_TOKENS.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|t| t.to_string()).collect();
        id_to_token.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Ok(Self::from(id_to_token))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn encode(&self, s: &Sentence) -> Vec<usize> {
        s.tokens().iter().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to a sentence, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> Result<Sentence> {
        let mut tokens = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == EOS {
                break;
            }
            if id == PAD || id == BOS {
                continue;
            }
            let tok = self.token(id).ok_or(Error::UnknownId {
                id,
                size: self.len(),
            })?;
            tokens.push(tok.to_string());
        }
        Sentence::from_tokens(tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedSentence {
    pub sentence: Sentence,
    pub rating: f64,
}

impl RatedSentence {
    pub fn new(sentence: Sentence, rating: f64) -> Result<Self> {
        if !(MIN_RATING..=MAX_RATING).contains(&rating) {
            return Err(Error::Config(format!("rating {rating} outside [1, 5]")));
        }
        Ok(Self { sentence, rating })
    }
}

/// Probability over the five rating classes 1..=5.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingDistribution {
    probs: [f64; 5],
}

impl RatingDistribution {
    pub fn new(probs: [f64; 5]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Scorer(format!("negative or non-finite probability in {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Scorer(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Distribution concentrated on the two integer classes adjacent to `rating`.
    pub fn interpolated(rating: f64) -> Self {
        let r = rating.clamp(MIN_RATING, MAX_RATING);
        let lower = (r.floor() as usize).clamp(1, 4);
        let frac = r - lower as f64;
        let mut probs = [0.0; 5];
        probs[lower - 1] = 1.0 - frac;
        probs[lower] += frac;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64; 5] {
        &self.probs
    }

    /// Probability of rating class `k` (1-based).
    pub fn prob(&self, k: usize) -> f64 {
        self.probs[k - 1]
    }

    pub fn expected_rating(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| (i + 1) as f64 * p)
            .sum()
    }
}

pub trait RatingScorer {
    fn distribution(&self, s: &Sentence) -> Result<RatingDistribution>;
}

/// Sum of probability-weighted rating classes.
pub fn score_sentence(scorer: &dyn RatingScorer, s: &Sentence) -> Result<f64> {
    Ok(scorer.distribution(s)?.expected_rating())
}

/// Valence lexicon scorer: mean valence `v` of known tokens, rating `3 + 2v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LexiconScorer {
    valences: HashMap<String, f64>,
}

impl LexiconScorer {
    pub fn new(valences: HashMap<String, f64>) -> Result<Self> {
        if valences.is_empty() {
            return Err(Error::Config("lexicon is empty".into()));
        }
        if let Some((t, v)) = valences.iter().find(|(_, v)| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("valence {v} for {t:?} outside [-1, 1]")));
        }
        Ok(Self { valences })
    }

    pub fn valence(&self, token: &str) -> Option<f64> {
        self.valences.get(token).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, f64)> {
        self.valences.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn mean_valence(&self, s: &Sentence) -> f64 {
        let (sum, n) = s
            .tokens()
            .iter()
            .filter_map(|t| self.valence(t))
            .fold((0.0, 0usize), |(sum, n), v| (sum + v, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut valences = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (tok, val) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected token<TAB>valence".into()))?;
            let v: f64 = val
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad valence {val:?}")))?;
            if !(-1.0..=1.0).contains(&v) {
                return Err(parse_err(format!("valence {v} outside [-1, 1]")));
            }
            valences.insert(tok.to_string(), v);
        }
        Self::new(valences)
    }

    pub fn save(&self, path: &Path, header: &ArtifactHeader) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut entries: Vec<_> = self.entries().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let io = |e| Error::io(path, e);
        header.write_to(&mut w).map_err(io)?;
        for (t, v) in entries {
            writeln!(w, "{t}\t{v}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

impl RatingScorer for LexiconScorer {
    fn distribution(&self, s: &Sentence) -> Result<RatingDistribution> {
        Ok(RatingDistribution::interpolated(
            NEUTRAL_RATING + 2.0 * self.mean_valence(s),
        ))
    }
}

/// Shortest decimal rendering with at least six fractional digits that parses back exactly.
pub(crate) fn format_real(x: f64) -> String {
    for precision in 6..=17 {
        let s = format!("{x:.precision$}");
        if s.parse::<f64>().ok() == Some(x) {
            return s;
        }
    }
    format!("{x:e}")
}

pub fn write_dataset<W: Write>(w: &mut W, data: &[RatedSentence]) -> std::io::Result<()> {
    for r in data {
        writeln!(w, "{}\t{}", format_real(r.rating), r.sentence)?;
    }
    Ok(())
}

pub fn save_dataset(path: &Path, data: &[RatedSentence], header: &ArtifactHeader) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    header.write_to(&mut w).map_err(io)?;
    write_dataset(&mut w, data).map_err(io)?;
    w.flush().map_err(io)
}

/// Parses `rating<TAB>tokens` records; `#` lines and blank lines are skipped.
pub fn read_dataset<R: BufRead>(reader: R, path: &Path) -> Result<Vec<RatedSentence>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (rating, text) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected rating<TAB>tokens".into()))?;
        let rating: f64 = rating
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad rating {rating:?}")))?;
        if !(MIN_RATING..=MAX_RATING).contains(&rating) {
            return Err(parse_err(format!("rating {rating} outside [1, 5]")));
        }
        let sentence = Sentence::from_tokens(text.split(' ').filter(|t| !t.is_empty()))
            .map_err(|_| parse_err("record has no tokens".into()))?;
        out.push(RatedSentence { sentence, rating });
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<RatedSentence>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), path)
}

/// Reads raw text, one sentence per line, tokenizing each non-blank line.
pub fn load_raw_sentences(path: &Path) -> Result<Vec<Sentence>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(tokenize(&line)?);
    }
    Ok(out)
}

/// Scores every sentence with `scorer`.
pub fn rate_all(scorer: &dyn RatingScorer, sentences: Vec<Sentence>) -> Result<Vec<RatedSentence>> {
    sentences
        .into_iter()
        .map(|s| {
            let rating = score_sentence(scorer, &s)?;
            Ok(RatedSentence { sentence: s, rating })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sent(s: &str) -> Sentence {
        Sentence::from_tokens(s.split(' ')).unwrap()
    }

    fn toks(s: &Sentence) -> Vec<&str> {
        s.tokens().iter().map(String::as_str).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(toks(&tokenize("The food is terrible").unwrap()), ["the", "food", "is", "terrible"]);
        assert_eq!(toks(&tokenize("horrible food !").unwrap()), ["horrible", "food", "!"]);
        assert_eq!(toks(&tokenize("a").unwrap()), ["a"]);
        assert_eq!(
            toks(&tokenize("Great,  really GOOD!").unwrap()),
            ["great", ",", "really", "good", "!"]
        );
    }

    #[test]
    fn tokenize_rejects_blank() {
        assert!(matches!(tokenize("   \t "), Err(Error::EmptyInput)));
        assert!(matches!(tokenize(""), Err(Error::EmptyInput)));
    }

    #[test]
    fn vocab_min_freq() {
        let corpus = vec![sent("a b"), sent("a")];
        let v = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);

        let v = Vocabulary::build(&corpus, 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(UNK), Some("<unk>"));

        assert!(matches!(Vocabulary::build(&[], 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn vocab_serde_round_trip() {
        let v = Vocabulary::build(&[sent("the food is good"), sent("the food")], 1).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("food"), v.id("food"));
    }

    #[test]
    fn expected_rating_of_distributions() {
        let d = RatingDistribution::new([1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(d.expected_rating(), 1.0);
        let d = RatingDistribution::new([0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(d.expected_rating(), 5.0);
        let d = RatingDistribution::new([0.2; 5]).unwrap();
        assert!((d.expected_rating() - 3.0).abs() < 1e-12);
        assert!(RatingDistribution::new([0.5, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(RatingDistribution::new([-0.5, 1.5, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn lexicon_scorer_examples() {
        let lex = LexiconScorer::new(HashMap::from([
            ("great".to_string(), 1.0),
            ("food".to_string(), 0.0),
        ]))
        .unwrap();
        let d = lex.distribution(&sent("the place")).unwrap();
        assert_eq!(d.prob(3), 1.0);
        assert_eq!(d.expected_rating(), 3.0);
        assert_eq!(score_sentence(&lex, &sent("great")).unwrap(), 5.0);
        let d = lex.distribution(&sent("great food")).unwrap();
        assert_eq!(d.prob(4), 1.0);
        assert_eq!(d.expected_rating(), 4.0);

        assert!(LexiconScorer::new(HashMap::new()).is_err());
    }

    #[test]
    fn dataset_parse_errors() {
        let p = Path::new("mem.tsv");
        let err = read_dataset("3.0\tthe food\nabc\tthe food\n".as_bytes(), p).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_dataset("".as_bytes(), p).unwrap().is_empty());
        assert!(read_dataset("7.0\tx\n".as_bytes(), p).is_err());
        assert!(read_dataset("2.0\n".as_bytes(), p).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        let data = vec![
            RatedSentence::new(sent("the food is good ."), 4.0).unwrap(),
            RatedSentence::new(sent("meh"), 2.718281828459045).unwrap(),
        ];
        save_dataset(&path, &data, &ArtifactHeader::new().with("seed", 1)).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), data);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("4.000000\tthe food is good ."));
    }

    fn word() -> impl Strategy<Value = String> {
        "[a-zA-Z]{1,6}[,.!?]?"
    }

    proptest! {
        #[test]
        fn tokenize_is_a_fixed_point(words in prop::collection::vec(word(), 1..8)) {
            let once = tokenize(&words.join(" ")).unwrap();
            let twice = tokenize(&once.to_string()).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn expected_rating_is_convex(raw in prop::collection::vec(0.0f64..1.0, 5)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-3);
            let mut probs = [0.0; 5];
            for (p, r) in probs.iter_mut().zip(&raw) { *p = r / total; }
            let d = RatingDistribution::new(probs).unwrap();
            let lo = probs.iter().position(|p| *p > 0.0).unwrap() + 1;
            let hi = probs.iter().rposition(|p| *p > 0.0).unwrap() + 1;
            let r = d.expected_rating();
            prop_assert!(r >= lo as f64 - 1e-9 && r <= hi as f64 + 1e-9);
        }

        #[test]
        fn dataset_text_round_trip(
            rows in prop::collection::vec((1.0f64..=5.0, prop::collection::vec("[a-z]{1,5}", 1..6)), 0..10)
        ) {
            let data: Vec<RatedSentence> = rows.into_iter()
                .map(|(r, t)| RatedSentence::new(Sentence::from_tokens(t).unwrap(), r).unwrap())
                .collect();
            let mut buf = Vec::new();
            write_dataset(&mut buf, &data).unwrap();
            let back = read_dataset(buf.as_slice(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, data);
        }
    }
}
