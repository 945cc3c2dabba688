//! Test-time revision toward an outcome target.
//!
//! The input is encoded to `(Y0, Z0)`. A new outcome factor `Y*` is searched
//! inside the feasible set `C = { Y : log G(Y | Y0, sigma) >= log tau }` by
//! gradient descent on `(F(Y) - R*)^2`, and the revision is decoded from
//! `(Y*, Z0)`. The threshold is handled in log space; a `log tau` of
//! `-100000` leaves `C` effectively unbounded.

use std::f64::consts::PI;

use crate::corpus::{Sentence, MAX_RATING, MIN_RATING, UNK};
use crate::error::{Error, Result};
use crate::model::{AffineOutcome, QuaseModel};

pub const DEFAULT_LOG_TAU: f64 = -100_000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Value(f64),
    /// Push the outcome as high as the feasible set allows.
    Max,
    /// Push the outcome as low as the feasible set allows.
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchParams {
    pub step_size: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            tolerance: 0.01,
            max_iterations: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub x0: Sentence,
    pub target: Target,
    pub log_tau: f64,
    /// Per-dimension scale of the test-time Gaussian; `None` means all ones.
    pub sigma_test: Option<Vec<f64>>,
    pub search: SearchParams,
    /// Beam width for decoding; 1 is greedy.
    pub beam: usize,
}

impl EditRequest {
    pub fn new(x0: Sentence, target: Target) -> Self {
        Self {
            x0,
            target,
            log_tau: DEFAULT_LOG_TAU,
            sigma_test: None,
            search: SearchParams::default(),
            beam: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Target::Value(r) = self.target {
            if !(MIN_RATING..=MAX_RATING).contains(&r) {
                return Err(Error::Config(format!("target {r} outside [1, 5]")));
            }
        }
        if !self.log_tau.is_finite() {
            return Err(Error::Config("log tau must be finite".into()));
        }
        if let Some(s) = &self.sigma_test {
            if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Config("sigma_test must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub x_star: Sentence,
    pub y_star: Vec<f64>,
    /// Content factor handed to the decoder, `E2(x0).mu`.
    pub z0: Vec<f64>,
    pub predicted_outcome: f64,
    pub iterations: usize,
    pub feasible: bool,
    /// Decoding hit the length cap without emitting EOS.
    pub truncated: bool,
}

/// Outcome predictor with a gradient, searched over by [`search_latent`].
pub trait OutcomeFunction {
    fn value(&self, y: &[f64]) -> f64;
    fn gradient(&self, y: &[f64]) -> Vec<f64>;
}

impl OutcomeFunction for AffineOutcome {
    fn value(&self, y: &[f64]) -> f64 {
        self.predict(y)
    }

    fn gradient(&self, _y: &[f64]) -> Vec<f64> {
        self.weights.clone()
    }
}

/// Log density of a diagonal Gaussian.
pub fn log_density(y: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    let d = y.len() as f64;
    let quad: f64 = y
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((y, m), s)| ((y - m) / s).powi(2))
        .sum();
    let log_det: f64 = sigma.iter().map(|s| s.ln()).sum();
    -0.5 * quad - log_det - 0.5 * d * (2.0 * PI).ln()
}

fn mahalanobis_sq(y: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((y, m), s)| ((y - m) / s).powi(2))
        .sum()
}

/// Squared Mahalanobis radius of `{y : log N(y; mu, sigma) >= log_tau}`;
/// negative when the threshold exceeds the density peak.
pub fn feasible_radius_sq(log_tau: f64, sigma: &[f64]) -> f64 {
    let log_det: f64 = sigma.iter().map(|s| s.ln()).sum();
    let peak = -log_det - 0.5 * sigma.len() as f64 * (2.0 * PI).ln();
    2.0 * (peak - log_tau)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub y_star: Vec<f64>,
    pub iterations: usize,
    pub feasible: bool,
}

/// Minimizes the target objective over the feasible set around `y0`.
///
/// Steps that leave `C` are pulled back radially onto its boundary; steps
/// that do not lower the objective are retried at half the step size, so the
/// objective never increases.
pub fn search_latent(
    f: &dyn OutcomeFunction,
    y0: &[f64],
    target: Target,
    log_tau: f64,
    sigma: &[f64],
    params: &SearchParams,
) -> Result<SearchOutcome> {
    if sigma.len() != y0.len() {
        return Err(Error::DimensionMismatch {
            expected: y0.len(),
            actual: sigma.len(),
        });
    }
    let peak = log_density(y0, y0, sigma);
    let radius_sq = feasible_radius_sq(log_tau, sigma);
    let objective = |y: &[f64]| match target {
        Target::Value(r) => (f.value(y) - r).powi(2),
        Target::Max => -f.value(y),
        Target::Min => f.value(y),
    };
    let done = |y: &[f64]| match target {
        Target::Value(r) => (f.value(y) - r).abs() < params.tolerance,
        Target::Max => f.value(y) >= MAX_RATING,
        Target::Min => f.value(y) <= MIN_RATING,
    };
    let fixed = |feasible| SearchOutcome {
        y_star: y0.to_vec(),
        iterations: 0,
        feasible,
    };
    if radius_sq < 0.0 {
        return Ok(fixed(false));
    }
    if done(y0) || radius_sq <= f64::EPSILON * peak.abs().max(1.0) {
        return Ok(fixed(true));
    }
    let radius = radius_sq.sqrt();

    let mut y = y0.to_vec();
    let mut current = objective(&y);
    let mut step = params.step_size;
    let mut iterations = 0;
    while iterations < params.max_iterations && !done(&y) {
        iterations += 1;
        let fy = f.value(&y);
        let grad_f = f.gradient(&y);
        let scale = match target {
            Target::Value(r) => 2.0 * (fy - r),
            Target::Max => -1.0,
            Target::Min => 1.0,
        };
        if !scale.is_finite() || grad_f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { iteration: iterations });
        }
        let mut candidate: Vec<f64> = y.iter().zip(&grad_f).map(|(v, g)| v - step * scale * g).collect();
        let m = mahalanobis_sq(&candidate, y0, sigma).sqrt();
        if m > radius {
            let shrink = radius / m;
            for (c, o) in candidate.iter_mut().zip(y0) {
                *c = o + (*c - o) * shrink;
            }
        }
        let next = objective(&candidate);
        if next < current {
            y = candidate;
            current = next;
        } else {
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
    }
    let feasible = log_density(&y, y0, sigma) >= log_tau - 1e-9 * log_tau.abs().max(1.0);
    Ok(SearchOutcome {
        y_star: y,
        iterations,
        feasible,
    })
}

fn search_for(model: &QuaseModel, req: &EditRequest, y0: &[f64]) -> Result<SearchOutcome> {
    req.validate()?;
    let ones;
    let sigma = match &req.sigma_test {
        Some(s) => s.as_slice(),
        None => {
            ones = vec![1.0; y0.len()];
            ones.as_slice()
        }
    };
    search_latent(&model.outcome_head(), y0, req.target, req.log_tau, sigma, &req.search)
}

fn to_sentence(model: &QuaseModel, ids: &[usize]) -> Result<Sentence> {
    match model.vocab().decode(ids) {
        Ok(s) => Ok(s),
        Err(Error::EmptyInput) => model.vocab().decode(&[UNK]),
        Err(e) => Err(e),
    }
}

/// Revises `req.x0` toward its target.
pub fn edit(model: &QuaseModel, req: &EditRequest) -> Result<EditResult> {
    Ok(edit_batch(model, std::slice::from_ref(req))?.remove(0))
}

/// Edits many requests; greedy requests are decoded together in one batch.
pub fn edit_batch(model: &QuaseModel, reqs: &[EditRequest]) -> Result<Vec<EditResult>> {
    let sentences: Vec<Sentence> = reqs.iter().map(|r| r.x0.clone()).collect();
    let latents = model.encode_means(&sentences);
    let mut searched = Vec::with_capacity(reqs.len());
    for (req, lat) in reqs.iter().zip(&latents) {
        searched.push(search_for(model, req, &lat.y)?);
    }

    let greedy: Vec<usize> = (0..reqs.len()).filter(|&i| reqs[i].beam <= 1).collect();
    let greedy_inputs: Vec<(Vec<f64>, Vec<f64>)> = greedy
        .iter()
        .map(|&i| (searched[i].y_star.clone(), latents[i].z.clone()))
        .collect();
    let mut decoded: Vec<Option<(Vec<usize>, bool)>> = vec![None; reqs.len()];
    for (&i, out) in greedy.iter().zip(model.greedy_decode_batch(&greedy_inputs)?) {
        decoded[i] = Some(out);
    }
    for (i, req) in reqs.iter().enumerate() {
        if req.beam > 1 {
            decoded[i] = Some(model.beam_decode(&searched[i].y_star, &latents[i].z, req.beam)?);
        }
    }

    let head = model.outcome_head();
    searched
        .into_iter()
        .zip(latents)
        .zip(decoded)
        .map(|((s, lat), d)| {
            let (ids, eos) = d.expect("every request decoded");
            Ok(EditResult {
                x_star: to_sentence(model, &ids)?,
                predicted_outcome: head.predict(&s.y_star),
                y_star: s.y_star,
                z0: lat.z,
                iterations: s.iterations,
                feasible: s.feasible,
                truncated: !eos,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Vocabulary};
    use crate::model::ModelConfig;
    use crate::seed::substream;
    use proptest::prelude::*;

    fn affine(weights: Vec<f64>, bias: f64) -> AffineOutcome {
        AffineOutcome { weights, bias }
    }

    #[test]
    fn log_density_closed_forms() {
        let d = 5;
        let mu = vec![0.3; d];
        let v = log_density(&mu, &mu, &vec![1.0; d]);
        assert!((v - (-(d as f64) / 2.0 * (2.0 * PI).ln())).abs() < 1e-12);

        let v = log_density(&[1.0, 1.0], &[0.0, 0.0], &[1.0, 1.0]);
        assert!((v - (-(2.0 * PI).ln() - 1.0)).abs() < 1e-12);

        let near = log_density(&[0.5, 0.0], &[0.0, 0.0], &[1.0, 1.0]);
        let far = log_density(&[1.5, 0.0], &[0.0, 0.0], &[1.0, 1.0]);
        assert!(near > far);
    }

    #[test]
    fn feasible_radius_bounds_the_level_set() {
        let sigma = [0.5, 2.0];
        let mu = [0.1, -0.4];
        let log_tau = -4.0;
        let r = feasible_radius_sq(log_tau, &sigma).sqrt();
        let edge = [mu[0] + r * sigma[0], mu[1]];
        assert!((log_density(&edge, &mu, &sigma) - log_tau).abs() < 1e-12);
        assert!(feasible_radius_sq(10.0, &sigma) < 0.0);
    }

    #[test]
    fn search_fixed_point() {
        let f = affine(vec![1.0, -0.5], 3.0);
        let out = search_latent(&f, &[0.0, 0.0], Target::Value(3.0), DEFAULT_LOG_TAU, &[1.0, 1.0], &SearchParams::default()).unwrap();
        assert_eq!(out.y_star, vec![0.0, 0.0]);
        assert_eq!(out.iterations, 0);
        assert!(out.feasible);
    }

    #[test]
    fn unconstrained_search_finds_closed_form() {
        let f = affine(vec![0.8, -0.3, 0.5], 2.0);
        let y0 = [0.2, 0.1, -0.4];
        let target = 4.5;
        let params = SearchParams {
            tolerance: 1e-8,
            ..SearchParams::default()
        };
        let out = search_latent(&f, &y0, Target::Value(target), DEFAULT_LOG_TAU, &[1.0; 3], &params).unwrap();
        let w2: f64 = f.weights.iter().map(|w| w * w).sum();
        let alpha = (target - f.predict(&y0)) / w2;
        for ((y, y0), w) in out.y_star.iter().zip(&y0).zip(&f.weights) {
            assert!((y - (y0 + alpha * w)).abs() < 1e-6);
        }
        assert!((f.predict(&out.y_star) - target).abs() < 1e-8);
        assert!(out.feasible);

        let default = search_latent(&f, &y0, Target::Value(target), DEFAULT_LOG_TAU, &[1.0; 3], &SearchParams::default()).unwrap();
        assert!((f.predict(&default.y_star) - target).abs() < 0.01);
    }

    #[test]
    fn tight_tau_pins_the_search() {
        let f = affine(vec![1.0, 1.0], 3.0);
        let y0 = [0.0, 0.0];
        let sigma = [1.0, 1.0];
        let peak = log_density(&y0, &y0, &sigma);
        let out = search_latent(&f, &y0, Target::Value(5.0), peak, &sigma, &SearchParams::default()).unwrap();
        assert_eq!(out.y_star, y0.to_vec());
        assert!(out.feasible);

        let out = search_latent(&f, &y0, Target::Value(5.0), peak + 1.0, &sigma, &SearchParams::default()).unwrap();
        assert_eq!(out.y_star, y0.to_vec());
        assert!(!out.feasible);
    }

    #[test]
    fn bounded_search_stays_on_the_boundary() {
        let f = affine(vec![1.0, 0.0], 3.0);
        let y0 = [0.0, 0.0];
        let sigma = [1.0, 1.0];
        // a Mahalanobis radius of 1 around y0
        let log_tau = log_density(&y0, &y0, &sigma) - 0.5;
        let out = search_latent(&f, &y0, Target::Value(5.0), log_tau, &sigma, &SearchParams::default()).unwrap();
        assert!(out.feasible);
        assert!((out.y_star[0] - 1.0).abs() < 1e-6, "{:?}", out.y_star);
        assert!(log_density(&out.y_star, &y0, &sigma) >= log_tau - 1e-9);
    }

    #[test]
    fn extrema_targets() {
        let f = affine(vec![1.0, 0.0], 3.0);
        let y0 = [0.0, 0.0];
        let up = search_latent(&f, &y0, Target::Max, DEFAULT_LOG_TAU, &[1.0; 2], &SearchParams::default()).unwrap();
        assert!(f.predict(&up.y_star) >= MAX_RATING);
        let down = search_latent(&f, &y0, Target::Min, DEFAULT_LOG_TAU, &[1.0; 2], &SearchParams::default()).unwrap();
        assert!(f.predict(&down.y_star) <= MIN_RATING);
    }

    struct Broken;
    impl OutcomeFunction for Broken {
        fn value(&self, _: &[f64]) -> f64 {
            1.0
        }
        fn gradient(&self, y: &[f64]) -> Vec<f64> {
            vec![f64::NAN; y.len()]
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let err = search_latent(&Broken, &[0.0], Target::Value(4.0), DEFAULT_LOG_TAU, &[1.0], &SearchParams::default());
        assert!(matches!(err, Err(Error::NonFiniteGradient { iteration: 1 })));
    }

    fn tiny_model() -> QuaseModel {
        let corpus: Vec<_> = ["the food is good", "the food is bad"].iter().map(|t| tokenize(t).unwrap()).collect();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let cfg = ModelConfig {
            d_y: 3,
            d_z: 3,
            embed_dim: 4,
            hidden_dim: 5,
            align_hidden_dim: 3,
            vocab_size: vocab.len(),
            max_decode_len: 6,
        };
        QuaseModel::new(cfg, vocab, &mut substream(2, "init")).unwrap()
    }

    #[test]
    fn edit_passes_content_through() {
        let m = tiny_model();
        let x0 = tokenize("the food is bad").unwrap();
        let z = m.encode_content(&x0).unwrap().mu;
        let y = m.encode_outcome(&x0).unwrap().mu;
        let res = edit(&m, &EditRequest::new(x0.clone(), Target::Value(4.0))).unwrap();
        assert_eq!(res.z0, z);
        assert!((res.predicted_outcome - 4.0).abs() < 0.01);
        assert!(res.feasible);

        // zero-move search decodes the input's own latents
        let current = m.predict_outcome(&y).unwrap();
        let res = edit(&m, &EditRequest::new(x0.clone(), Target::Value(current.clamp(1.0, 5.0)))).unwrap();
        if (1.0..=5.0).contains(&current) {
            assert_eq!(res.y_star, y);
            let (ids, eos) = m.decode(&y, &z).unwrap();
            assert_eq!(res.truncated, !eos);
            if !ids.is_empty() {
                assert_eq!(res.x_star, m.vocab().decode(&ids).unwrap());
            }
        }
        let again = edit(&m, &EditRequest::new(x0, Target::Value(4.0))).unwrap();
        assert_eq!(again, edit(&m, &EditRequest::new(tokenize("the food is bad").unwrap(), Target::Value(4.0))).unwrap());
    }

    #[test]
    fn request_validation() {
        let x0 = tokenize("a").unwrap();
        assert!(EditRequest::new(x0.clone(), Target::Value(6.0)).validate().is_err());
        let mut r = EditRequest::new(x0, Target::Max);
        r.sigma_test = Some(vec![0.0]);
        assert!(r.validate().is_err());
    }

    proptest! {
        #[test]
        fn search_never_worsens_and_respects_feasibility(
            w in prop::collection::vec(-2.0f64..2.0, 4),
            y0 in prop::collection::vec(-2.0f64..2.0, 4),
            bias in 1.0f64..5.0,
            target in 1.0f64..5.0,
            slack in 0.0f64..3.0,
        ) {
            let f = affine(w, bias);
            let sigma = [1.0; 4];
            let log_tau = log_density(&y0, &y0, &sigma) - slack;
            let out = search_latent(&f, &y0, Target::Value(target), log_tau, &sigma, &SearchParams::default()).unwrap();
            prop_assert!((f.predict(&out.y_star) - target).abs() <= (f.predict(&y0) - target).abs() + 1e-12);
            if out.feasible {
                prop_assert!(log_density(&out.y_star, &y0, &sigma) >= log_tau - 1e-6);
            }
        }
    }
}
