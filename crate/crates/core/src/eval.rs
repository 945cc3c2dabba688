//! Metrics over edited sentences and the loss-ablation runner.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{score_sentence, RatedSentence, RatingScorer, Sentence, NEUTRAL_RATING};
use crate::editing::{edit_batch, EditRequest, EditResult, Target, DEFAULT_LOG_TAU};
use crate::error::{Error, Result};
use crate::model::{LossWeights, QuaseModel};
use crate::seed::substream_seed;
use crate::training::{train, TrainConfig, TrainData};

/// Mean absolute error of `ratings` against a single target.
pub fn mae(ratings: &[f64], target: f64) -> Result<f64> {
    if ratings.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(ratings.iter().map(|r| (r - target).abs()).sum::<f64>() / ratings.len() as f64)
}

/// Token-level Levenshtein distance.
pub fn edit_distance(a: &Sentence, b: &Sentence) -> usize {
    let (a, b) = (a.tokens(), b.tokens());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ta) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, tb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ta != tb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    NegToPos,
    PosToNeg,
}

/// Share of edited ratings that land strictly on the target side of neutral.
pub fn polarity_accuracy(edited: &[f64], direction: Direction) -> Result<f64> {
    if edited.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = edited
        .iter()
        .filter(|&&r| match direction {
            Direction::NegToPos => r > NEUTRAL_RATING,
            Direction::PosToNeg => r < NEUTRAL_RATING,
        })
        .count();
    Ok(hits as f64 / edited.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub targets: Vec<f64>,
    pub log_tau: f64,
    pub beam: usize,
    /// Evaluate at most this many test sentences.
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            targets: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            log_tau: DEFAULT_LOG_TAU,
            beam: 1,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub target: f64,
    pub mae: f64,
    /// MAE of the unedited test ratings against the same target.
    pub original_mae: f64,
    pub mean_edit_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarityRow {
    pub direction: Direction,
    /// Target the sources were edited toward.
    pub target: f64,
    pub sources: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub rows: Vec<TargetRow>,
    pub polarity: Vec<PolarityRow>,
}

impl EvalReport {
    pub fn row(&self, target: f64) -> Option<&TargetRow> {
        self.rows.iter().find(|r| r.target == target)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "samples\t{}", self.samples).expect("string write");
        writeln!(out, "target\tmae\toriginal_mae\tedit_distance").expect("string write");
        for r in &self.rows {
            writeln!(out, "{}\t{:.4}\t{:.4}\t{:.4}", r.target, r.mae, r.original_mae, r.mean_edit_distance).expect("string write");
        }
        writeln!(out, "direction\ttarget\tsources\taccuracy").expect("string write");
        for p in &self.polarity {
            let acc = p.accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
            writeln!(out, "{:?}\t{}\t{}\t{acc}", p.direction, p.target, p.sources).expect("string write");
        }
        out
    }
}

/// Edits every test sentence toward each target, rating the results with `scorer`.
pub fn edit_all(model: &QuaseModel, sentences: &[Sentence], target: Target, cfg: &EvalConfig) -> Result<Vec<EditResult>> {
    let reqs: Vec<EditRequest> = sentences
        .iter()
        .map(|s| EditRequest {
            log_tau: cfg.log_tau,
            beam: cfg.beam,
            ..EditRequest::new(s.clone(), target)
        })
        .collect();
    edit_batch(model, &reqs)
}

/// MAE and edit distance per target, plus polarity transfer accuracy.
///
/// Negative sources (rating below 3) are judged on their edits toward the
/// largest target, positive sources on their edits toward the smallest.
pub fn evaluate(model: &QuaseModel, test: &[RatedSentence], scorer: &dyn RatingScorer, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.targets.is_empty() {
        return Err(Error::Config("no evaluation targets".into()));
    }
    let test = &test[..cfg.limit.unwrap_or(test.len()).min(test.len())];
    if test.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sentences: Vec<Sentence> = test.iter().map(|r| r.sentence.clone()).collect();
    let originals: Vec<f64> = test.iter().map(|r| r.rating).collect();
    let mut rows = Vec::new();
    let mut edited_by_target = Vec::new();
    for &t in &cfg.targets {
        let results = edit_all(model, &sentences, Target::Value(t), cfg)?;
        let ratings = results
            .iter()
            .map(|r| score_sentence(scorer, &r.x_star))
            .collect::<Result<Vec<f64>>>()?;
        let dist: usize = results.iter().zip(&sentences).map(|(r, s)| edit_distance(s, &r.x_star)).sum();
        rows.push(TargetRow {
            target: t,
            mae: mae(&ratings, t)?,
            original_mae: mae(&originals, t)?,
            mean_edit_distance: dist as f64 / sentences.len() as f64,
        });
        edited_by_target.push(ratings);
    }
    let argext = |better: fn(f64, f64) -> bool| {
        (0..cfg.targets.len())
            .reduce(|a, b| if better(cfg.targets[b], cfg.targets[a]) { b } else { a })
            .expect("targets non-empty")
    };
    let hi = argext(|a, b| a > b);
    let lo = argext(|a, b| a < b);
    let polarity = [(Direction::NegToPos, hi), (Direction::PosToNeg, lo)]
        .into_iter()
        .map(|(direction, k)| {
            let picked: Vec<f64> = originals
                .iter()
                .zip(&edited_by_target[k])
                .filter(|(o, _)| match direction {
                    Direction::NegToPos => **o < NEUTRAL_RATING,
                    Direction::PosToNeg => **o > NEUTRAL_RATING,
                })
                .map(|(_, e)| *e)
                .collect();
            PolarityRow {
                direction,
                target: cfg.targets[k],
                sources: picked.len(),
                accuracy: polarity_accuracy(&picked, direction).ok(),
            }
        })
        .collect();
    Ok(EvalReport {
        samples: test.len(),
        rows,
        polarity,
    })
}

/// Which of the three pair losses an ablation cell keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSubset {
    pub sim: bool,
    pub diff: bool,
    pub d_rec: bool,
}

impl LossSubset {
    /// All eight subsets, from none of the pair losses to all of them.
    pub fn power_set() -> Vec<LossSubset> {
        let s = |sim, diff, d_rec| LossSubset { sim, diff, d_rec };
        vec![
            s(false, false, false),
            s(true, false, false),
            s(false, true, false),
            s(false, false, true),
            s(true, true, false),
            s(true, false, true),
            s(false, true, true),
            s(true, true, true),
        ]
    }

    pub fn name(&self) -> String {
        let parts: Vec<&str> = [(self.sim, "L_sim"), (self.diff, "L_diff"), (self.d_rec, "L_d-rec")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        match parts.len() {
            0 => "None".into(),
            3 => "ALL".into(),
            _ => parts.join("+"),
        }
    }

    /// `base` with the excluded pair losses forced to zero.
    pub fn apply(&self, base: &LossWeights) -> LossWeights {
        LossWeights {
            lambda_sim: if self.sim { base.lambda_sim } else { 0.0 },
            lambda_diff: if self.diff { base.lambda_diff } else { 0.0 },
            lambda_d_rec: if self.d_rec { base.lambda_d_rec } else { 0.0 },
            ..*base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub subset: LossSubset,
    pub seed: u64,
    pub weights: LossWeights,
    /// MAE per target, aligned with `AblationReport::targets`.
    pub mae: Option<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub targets: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// MAE of a row at a target, if that cell trained successfully.
    pub fn cell(&self, name: &str, target: f64) -> Option<f64> {
        let k = self.targets.iter().position(|&t| t == target)?;
        self.row(name)?.mae.as_ref().map(|m| m[k])
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("losses");
        for t in &self.targets {
            write!(out, "\tT={t}").expect("string write");
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.name);
            match (&r.mae, &r.error) {
                (Some(m), _) => {
                    for v in m {
                        write!(out, "\t{v:.4}").expect("string write");
                    }
                }
                (None, e) => {
                    write!(out, "\tfailed: {}", e.as_deref().unwrap_or("unknown")).expect("string write");
                }
            }
            out.push('\n');
        }
        out
    }
}

pub struct AblationSetup<'a> {
    pub data: TrainData<'a>,
    pub test: &'a [RatedSentence],
    pub scorer: &'a dyn RatingScorer,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Builds a freshly initialised model from a cell seed.
    pub init: &'a dyn Fn(u64) -> Result<QuaseModel>,
}

/// Trains and evaluates one model per pair-loss subset.
///
/// Each cell gets its own seed derived from the training seed and the cell
/// name. A failing cell is recorded and the remaining cells still run.
pub fn run_ablation(setup: &AblationSetup, subsets: &[LossSubset]) -> AblationReport {
    let rows = subsets
        .iter()
        .map(|subset| {
            let name = subset.name();
            let seed = substream_seed(setup.train.seed, &format!("ablation/{name}"));
            let mut cfg = setup.train.clone();
            cfg.seed = seed;
            cfg.schedule.targets = subset.apply(&cfg.schedule.targets);
            let run = || -> Result<Vec<f64>> {
                let model = (setup.init)(seed)?;
                let out = train(model, &setup.data, setup.scorer, &cfg)?;
                let report = evaluate(&out.best, setup.test, setup.scorer, &setup.eval)?;
                Ok(report.rows.iter().map(|r| r.mae).collect())
            };
            let (mae, error) = match run() {
                Ok(m) => (Some(m), None),
                Err(e) => (None, Some(e.to_string())),
            };
            log::info!("ablation cell {name} done: {mae:?}");
            AblationRow {
                name,
                subset: *subset,
                seed,
                weights: cfg.schedule.targets,
                mae,
                error,
            }
        })
        .collect();
    AblationReport {
        targets: setup.eval.targets.clone(),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use proptest::prelude::*;

    fn s(t: &str) -> Sentence {
        tokenize(t).unwrap()
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[3.0, 3.0], 3.0).unwrap(), 0.0);
        assert_eq!(mae(&[2.0, 4.0], 3.0).unwrap(), 1.0);
        assert!(mae(&[], 3.0).is_err());
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&s("a b c"), &s("a b c")), 0);
        assert_eq!(edit_distance(&s("a b c"), &s("a x c")), 1);
        assert_eq!(edit_distance(&s("a b c"), &s("b c")), 1);
        assert_eq!(edit_distance(&s("a"), &s("x y z")), 3);
    }

    #[test]
    fn polarity_examples() {
        assert_eq!(polarity_accuracy(&[4.2, 4.2], Direction::NegToPos).unwrap(), 1.0);
        assert_eq!(polarity_accuracy(&[2.5, 3.5], Direction::NegToPos).unwrap(), 0.5);
        assert_eq!(polarity_accuracy(&[3.0], Direction::NegToPos).unwrap(), 0.0);
        assert_eq!(polarity_accuracy(&[3.0], Direction::PosToNeg).unwrap(), 0.0);
    }

    #[test]
    fn ablation_rows() {
        let subsets = LossSubset::power_set();
        assert_eq!(subsets.len(), 8);
        let names: Vec<String> = subsets.iter().map(|s| s.name()).collect();
        assert_eq!(names[0], "None");
        assert_eq!(names[7], "ALL");
        assert_eq!(names[3], "L_d-rec");
        let none = subsets[0].apply(&LossWeights::DEFAULT);
        assert_eq!((none.lambda_sim, none.lambda_diff, none.lambda_d_rec), (0.0, 0.0, 0.0));
        assert_eq!(none.lambda_kl, LossWeights::DEFAULT.lambda_kl);
        assert_eq!(subsets[7].apply(&LossWeights::DEFAULT), LossWeights::DEFAULT);
    }

    fn tokens() -> impl Strategy<Value = Sentence> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 1..7).prop_map(|t| Sentence::from_tokens(t).unwrap())
    }

    proptest! {
        #[test]
        fn mae_translation(ratings in prop::collection::vec(1.0f64..5.0, 1..20), t in 1.0f64..5.0, c in -3.0f64..3.0) {
            let shifted: Vec<f64> = ratings.iter().map(|r| r + c).collect();
            prop_assert!((mae(&shifted, t + c).unwrap() - mae(&ratings, t).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn edit_distance_is_a_metric(a in tokens(), b in tokens(), c in tokens()) {
            let d = edit_distance;
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert_eq!(d(&a, &b) == 0, a == b);
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        }
    }
}
