//! Pseudo-parallel pair mining and word deltas.
//!
//! Two rated sentences form a pseudo-parallel pair when their token sets
//! overlap strongly (Jaccard index at least `ji_min`) while their ratings
//! differ by at least `gap_min`. The wording difference of such a pair is
//! taken to be outcome-related.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactHeader;
use crate::corpus::{format_real, RatedSentence, Sentence};
use crate::error::{Error, Result};

pub const DEFAULT_JI_MIN: f64 = 0.5;
pub const DEFAULT_GAP_MIN: f64 = 2.0;

/// Slack applied to both mining thresholds so values like `4.1 - 2.1` still pass a gap of 2.
pub const THRESHOLD_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoPair {
    /// Lower-rated member.
    pub x: RatedSentence,
    pub x_prime: RatedSentence,
    pub jaccard: f64,
    pub rating_gap: f64,
    /// Record indices of `x` and `x_prime` in the mined dataset.
    pub x_index: usize,
    pub x_prime_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordDelta {
    /// Tokens of `x'` absent from `x`.
    pub inc: BTreeSet<String>,
    /// Tokens of `x` absent from `x'`.
    pub dec: BTreeSet<String>,
}

/// A single sentence coupled with a pair and one sampled delta token per side.
/// `None` stands for the NULL token of an empty side.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPoint {
    pub single: RatedSentence,
    pub pair: PseudoPair,
    pub sampled_inc: Option<String>,
    pub sampled_dec: Option<String>,
}

fn token_set(s: &Sentence) -> BTreeSet<&str> {
    s.tokens().iter().map(String::as_str).collect()
}

pub fn jaccard(x: &Sentence, x_prime: &Sentence) -> f64 {
    let a = token_set(x);
    let b = token_set(x_prime);
    let inter = a.intersection(&b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// True when a Jaccard index and rating gap pass the mining thresholds.
pub fn passes_thresholds(ji: f64, gap: f64, ji_min: f64, gap_min: f64) -> bool {
    ji < 1.0 && ji >= ji_min - THRESHOLD_SLACK && gap >= gap_min - THRESHOLD_SLACK
}

fn make_pair(corpus: &[RatedSentence], i: usize, j: usize, ji: f64) -> PseudoPair {
    let (lo, hi) = if corpus[i].rating <= corpus[j].rating {
        (i, j)
    } else {
        (j, i)
    };
    PseudoPair {
        x: corpus[lo].clone(),
        x_prime: corpus[hi].clone(),
        jaccard: ji,
        rating_gap: (corpus[hi].rating - corpus[lo].rating).abs(),
        x_index: lo,
        x_prime_index: hi,
    }
}

/// Exact all-pairs mining, pruned through a token inverted index.
///
/// Output is sorted by `(min index, max index)` of the two members.
pub fn mine_pairs(corpus: &[RatedSentence], ji_min: f64, gap_min: f64) -> Vec<PseudoPair> {
    let mut interner: HashMap<&str, u32> = HashMap::new();
    let sets: Vec<Vec<u32>> = corpus
        .iter()
        .map(|r| {
            let mut ids: Vec<u32> = r
                .sentence
                .tokens()
                .iter()
                .map(|t| {
                    let next = interner.len() as u32;
                    *interner.entry(t.as_str()).or_insert(next)
                })
                .collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        })
        .collect();

    let mut postings: Vec<Vec<usize>> = vec![Vec::new(); interner.len()];
    for (i, set) in sets.iter().enumerate() {
        for &t in set {
            postings[t as usize].push(i);
        }
    }

    let mut out = Vec::new();
    let mut shared = vec![0usize; corpus.len()];
    let mut touched = Vec::new();
    for (i, set) in sets.iter().enumerate() {
        for &t in set {
            for &j in &postings[t as usize] {
                if j > i {
                    if shared[j] == 0 {
                        touched.push(j);
                    }
                    shared[j] += 1;
                }
            }
        }
        touched.sort_unstable();
        for &j in &touched {
            let inter = shared[j];
            let union = set.len() + sets[j].len() - inter;
            let ji = inter as f64 / union as f64;
            let gap = (corpus[i].rating - corpus[j].rating).abs();
            if passes_thresholds(ji, gap, ji_min, gap_min) {
                out.push(make_pair(corpus, i, j, ji));
            }
            shared[j] = 0;
        }
        touched.clear();
    }
    out
}

pub fn word_delta(pair: &PseudoPair) -> Result<WordDelta> {
    let a = token_set(&pair.x.sentence);
    let b = token_set(&pair.x_prime.sentence);
    let inc: BTreeSet<String> = b.difference(&a).map(|t| t.to_string()).collect();
    let dec: BTreeSet<String> = a.difference(&b).map(|t| t.to_string()).collect();
    if inc.is_empty() && dec.is_empty() {
        return Err(Error::InvalidPair(format!(
            "identical token sets: {:?}",
            pair.x.sentence.to_string()
        )));
    }
    Ok(WordDelta { inc, dec })
}

fn draw<R: Rng + ?Sized>(side: &BTreeSet<String>, rng: &mut R) -> Option<String> {
    let items: Vec<&String> = side.iter().collect();
    items.choose(rng).map(|s| s.to_string())
}

/// Uniform draw from each side; `None` for an empty side.
pub fn sample_delta<R: Rng + ?Sized>(
    delta: &WordDelta,
    rng: &mut R,
) -> (Option<String>, Option<String>) {
    let inc = draw(&delta.inc, rng);
    let dec = draw(&delta.dec, rng);
    (inc, dec)
}

/// One point per pair, each coupled with a single sentence drawn with replacement.
pub fn compose_datapoints<R: Rng + ?Sized>(
    singles: &[RatedSentence],
    pairs: &[PseudoPair],
    rng: &mut R,
) -> Result<Vec<TrainingPoint>> {
    if singles.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    pairs
        .iter()
        .map(|pair| {
            let single = singles[rng.random_range(0..singles.len())].clone();
            let delta = word_delta(pair)?;
            let (sampled_inc, sampled_dec) = sample_delta(&delta, rng);
            Ok(TrainingPoint {
                single,
                pair: pair.clone(),
                sampled_inc,
                sampled_dec,
            })
        })
        .collect()
}

pub fn save_pairs(path: &Path, pairs: &[PseudoPair], header: &ArtifactHeader) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    header.write_to(&mut w).map_err(io)?;
    for p in pairs {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            p.x_index,
            p.x_prime_index,
            format_real(p.jaccard),
            format_real(p.rating_gap)
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a pair file whose indices refer to records of `dataset`.
pub fn load_pairs(path: &Path, dataset: &[RatedSentence]) -> Result<Vec<PseudoPair>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
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
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, got {}", fields.len())));
        }
        let index = |s: &str| -> Result<usize> {
            let idx: usize = s.parse().map_err(|_| parse_err(format!("bad index {s:?}")))?;
            if idx >= dataset.len() {
                return Err(parse_err(format!("index {idx} beyond dataset of {}", dataset.len())));
            }
            Ok(idx)
        };
        let real = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| parse_err(format!("bad number {s:?}")))
        };
        let (xi, xpi) = (index(fields[0])?, index(fields[1])?);
        out.push(PseudoPair {
            x: dataset[xi].clone(),
            x_prime: dataset[xpi].clone(),
            jaccard: real(fields[2])?,
            rating_gap: real(fields[3])?,
            x_index: xi,
            x_prime_index: xpi,
        });
    }
    Ok(out)
}
