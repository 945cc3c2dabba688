//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each operation is a plain Rust function returning a serializable view, so
//! it can be tested natively; the `#[wasm_bindgen]` wrappers only convert
//! arguments and render the views as JSON strings.

use quase_core::corpus::{score_sentence, tokenize, RatedSentence};
use quase_core::editing::{edit, feasible_radius_sq, search_latent, EditRequest, SearchParams, Target};
use quase_core::eval::edit_distance;
use quase_core::model::{AffineOutcome, Checkpoint, QuaseModel};
use quase_core::pairing::{mine_pairs, word_delta};
use quase_core::seed::substream;
use quase_core::synth::{Grammar, SynthParams};
use quase_core::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredLine {
    pub line: usize,
    pub text: String,
    pub rating: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairView {
    pub low: usize,
    pub high: usize,
    pub jaccard: f64,
    pub gap: f64,
    pub inc: Vec<String>,
    pub dec: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairReport {
    pub sentences: Vec<ScoredLine>,
    pub pairs: Vec<PairView>,
}

/// Sentences from the built-in grammar, one per element.
pub fn sample_sentences(seed: u64, size: usize) -> Result<Vec<String>> {
    let params = SynthParams {
        size,
        ..SynthParams::default()
    };
    let data = Grammar::default().generate(&params, &mut substream(seed, "demo"))?;
    Ok(data.iter().map(|r| r.sentence.to_string()).collect())
}

/// Rates every non-blank line with the built-in lexicon and mines pairs among them.
///
/// Pair endpoints index into `sentences`, not into the input lines.
pub fn inspect_pairs(text: &str, ji_min: f64, gap_min: f64) -> Result<PairReport> {
    let lexicon = Grammar::default().lexicon();
    let mut sentences = Vec::new();
    let mut rated = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s = tokenize(line)?;
        let rating = score_sentence(&lexicon, &s)?;
        sentences.push(ScoredLine {
            line: i + 1,
            text: s.to_string(),
            rating,
        });
        rated.push(RatedSentence::new(s, rating)?);
    }
    let pairs = mine_pairs(&rated, ji_min, gap_min)
        .iter()
        .map(|p| {
            let d = word_delta(p)?;
            Ok(PairView {
                low: p.x_index,
                high: p.x_prime_index,
                jaccard: p.jaccard,
                gap: p.rating_gap,
                inc: d.inc.into_iter().collect(),
                dec: d.dec.into_iter().collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(PairReport { sentences, pairs })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchTrace {
    /// Mahalanobis radius of the feasible set; `None` when it is empty.
    pub radius: Option<f64>,
    pub path: Vec<[f64; 2]>,
    pub outcomes: Vec<f64>,
    pub feasible: bool,
}

/// Latent search in two dimensions under `F(y) = w·y + b`, recording every iterate.
pub fn trace_search(
    weights: [f64; 2],
    bias: f64,
    y0: [f64; 2],
    sigma: [f64; 2],
    target: Target,
    log_tau: f64,
    step_size: f64,
) -> Result<SearchTrace> {
    let f = AffineOutcome {
        weights: weights.to_vec(),
        bias,
    };
    let run = |max_iterations| {
        let params = SearchParams {
            step_size,
            max_iterations,
            ..SearchParams::default()
        };
        search_latent(&f, &y0, target, log_tau, &sigma, &params)
    };
    let full = run(SearchParams::default().max_iterations)?;
    let mut path = Vec::with_capacity(full.iterations + 1);
    for k in 0..=full.iterations {
        let y = if k == full.iterations { full.y_star.clone() } else { run(k)?.y_star };
        path.push([y[0], y[1]]);
    }
    let outcomes = path.iter().map(|y| f.predict(y)).collect();
    let r2 = feasible_radius_sq(log_tau, &sigma);
    Ok(SearchTrace {
        radius: (r2 >= 0.0).then(|| r2.sqrt()),
        path,
        outcomes,
        feasible: full.feasible,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditView {
    pub x_star: String,
    pub predicted_outcome: f64,
    pub edit_distance: usize,
    pub iterations: usize,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelInfo {
    pub vocab_size: usize,
    pub d_y: usize,
    pub d_z: usize,
}

/// A trained model loaded from checkpoint JSON.
#[wasm_bindgen]
pub struct Editor {
    model: QuaseModel,
}

impl Editor {
    pub fn from_json(text: &str) -> Result<Self> {
        let model = QuaseModel::from_checkpoint(&Checkpoint::from_json(text)?)?;
        Ok(Self { model })
    }

    pub fn info(&self) -> ModelInfo {
        let c = self.model.config();
        ModelInfo {
            vocab_size: c.vocab_size,
            d_y: c.d_y,
            d_z: c.d_z,
        }
    }

    pub fn edit_sentence(&self, sentence: &str, target: Target, log_tau: f64) -> Result<EditView> {
        let x0 = tokenize(sentence)?;
        let mut req = EditRequest::new(x0.clone(), target);
        req.log_tau = log_tau;
        let out = edit(&self.model, &req)?;
        Ok(EditView {
            edit_distance: edit_distance(&x0, &out.x_star),
            x_star: out.x_star.to_string(),
            predicted_outcome: out.predicted_outcome,
            iterations: out.iterations,
            feasible: out.feasible,
        })
    }
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> std::result::Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

fn parse_target(mode: &str, value: f64) -> std::result::Result<Target, JsError> {
    match mode {
        "value" => Ok(Target::Value(value)),
        "max" => Ok(Target::Max),
        "min" => Ok(Target::Min),
        other => Err(JsError::new(&format!("unknown target mode {other:?}"))),
    }
}

#[wasm_bindgen(js_name = sampleSentences)]
pub fn sample_sentences_js(seed: u32, size: usize) -> std::result::Result<String, JsError> {
    Ok(sample_sentences(seed.into(), size).map_err(js_err)?.join("\n"))
}

#[wasm_bindgen(js_name = inspectPairs)]
pub fn inspect_pairs_js(text: &str, ji_min: f64, gap_min: f64) -> std::result::Result<String, JsError> {
    to_json(&inspect_pairs(text, ji_min, gap_min).map_err(js_err)?)
}

#[wasm_bindgen(js_name = traceSearch)]
#[allow(clippy::too_many_arguments)]
pub fn trace_search_js(
    w1: f64,
    w2: f64,
    bias: f64,
    sigma1: f64,
    sigma2: f64,
    mode: &str,
    target: f64,
    log_tau: f64,
) -> std::result::Result<String, JsError> {
    let target = parse_target(mode, target)?;
    let trace = trace_search([w1, w2], bias, [0.0, 0.0], [sigma1, sigma2], target, log_tau, 0.1).map_err(js_err)?;
    to_json(&trace)
}

#[wasm_bindgen]
impl Editor {
    #[wasm_bindgen(constructor)]
    pub fn new(checkpoint_json: &str) -> std::result::Result<Editor, JsError> {
        Self::from_json(checkpoint_json).map_err(js_err)
    }

    #[wasm_bindgen(js_name = info)]
    pub fn info_js(&self) -> std::result::Result<String, JsError> {
        to_json(&self.info())
    }

    #[wasm_bindgen(js_name = edit)]
    pub fn edit_js(&self, sentence: &str, mode: &str, target: f64, log_tau: f64) -> std::result::Result<String, JsError> {
        let target = parse_target(mode, target)?;
        to_json(&self.edit_sentence(sentence, target, log_tau).map_err(js_err)?)
    }
}
