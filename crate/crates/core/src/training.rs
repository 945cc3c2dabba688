//! Joint optimization in two steps.
//!
//! Stage 1 trains reconstruction and outcome prediction only, with
//! `lambda_rec + lambda_mse = 1`. Stage 2 keeps those fixed and ramps the KL,
//! alignment, similarity and dual-reconstruction weights up along sigmoid
//! curves. A ramp stops for good once the smoothed validation reconstruction
//! or outcome loss keeps getting worse.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactHeader;
use crate::corpus::{score_sentence, RatedSentence, RatingScorer, Sentence};
use crate::editing::{edit_batch, EditRequest, Target};
use crate::error::{Error, Result};
use crate::model::{LossBundle, LossSelection, LossWeights, Noise, PointBatch, QuaseModel};
use crate::pairing::{compose_datapoints, PseudoPair, TrainingPoint};
use crate::seed::substream;
use crate::tape::{Gradients, Matrix, ParamStore};

/// The four weights raised during stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealedLoss {
    Kl,
    Diff,
    Sim,
    DRec,
}

impl AnnealedLoss {
    pub const ALL: [AnnealedLoss; 4] = [Self::Kl, Self::Diff, Self::Sim, Self::DRec];

    fn index(self) -> usize {
        match self {
            Self::Kl => 0,
            Self::Diff => 1,
            Self::Sim => 2,
            Self::DRec => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Kl => "kl",
            Self::Diff => "diff",
            Self::Sim => "sim",
            Self::DRec => "d_rec",
        }
    }

    fn get(self, w: &LossWeights) -> f64 {
        match self {
            Self::Kl => w.lambda_kl,
            Self::Diff => w.lambda_diff,
            Self::Sim => w.lambda_sim,
            Self::DRec => w.lambda_d_rec,
        }
    }

    fn set(self, w: &mut LossWeights, v: f64) {
        match self {
            Self::Kl => w.lambda_kl = v,
            Self::Diff => w.lambda_diff = v,
            Self::Sim => w.lambda_sim = v,
            Self::DRec => w.lambda_d_rec = v,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSchedule {
    /// Stage-2 step at which the first group reaches half its target.
    pub midpoint: f64,
    pub steepness: f64,
    /// Extra delay between successive activation groups, in steps.
    pub spacing: f64,
    /// Activation groups; losses within a group ramp together. A loss that
    /// appears in no group stays at zero.
    pub order: Vec<Vec<AnnealedLoss>>,
    /// Final weights the ramps approach. Only the four annealed fields are read.
    pub targets: LossWeights,
    /// Relative rise above the running minimum that counts as degradation.
    pub degradation_tolerance: f64,
    /// Consecutive degraded evaluations before the active ramps freeze.
    pub patience: usize,
    /// Exponential smoothing factor for validation losses, in (0, 1].
    pub smoothing: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            midpoint: 300.0,
            steepness: 0.01,
            spacing: 0.0,
            order: vec![AnnealedLoss::ALL.to_vec()],
            targets: LossWeights::DEFAULT,
            degradation_tolerance: 0.02,
            patience: 3,
            smoothing: 0.5,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        self.targets.validate()?;
        if !(self.steepness > 0.0 && self.steepness.is_finite()) {
            return Err(Error::Config("anneal steepness must be positive".into()));
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::Config("anneal smoothing must lie in (0, 1]".into()));
        }
        if self.degradation_tolerance.is_nan() || self.degradation_tolerance < 0.0 {
            return Err(Error::Config("degradation tolerance must be non-negative".into()));
        }
        let mut seen = Vec::new();
        for loss in self.order.iter().flatten() {
            if seen.contains(loss) {
                return Err(Error::Config(format!("{} listed twice in anneal order", loss.name())));
            }
            seen.push(*loss);
        }
        Ok(())
    }

    fn group_of(&self, loss: AnnealedLoss) -> Option<usize> {
        self.order.iter().position(|g| g.contains(&loss))
    }

    /// Ramp factor in (0, 1) for `loss` at a stage-2 step; 0 if never activated.
    pub fn factor(&self, loss: AnnealedLoss, step: f64) -> f64 {
        match self.group_of(loss) {
            Some(group) => sigmoid(self.steepness * (step - self.midpoint - group as f64 * self.spacing)),
            None => 0.0,
        }
    }

    /// Weights at a stage-2 step; frozen losses keep their frozen value.
    pub fn weights_at(&self, base: &LossWeights, step: f64, frozen: &[Option<f64>; 4]) -> LossWeights {
        let mut w = *base;
        for loss in AnnealedLoss::ALL {
            let v = frozen[loss.index()].unwrap_or_else(|| loss.get(&self.targets) * self.factor(loss, step));
            loss.set(&mut w, v);
        }
        w
    }

    /// Unfrozen weight trajectory over `steps` stage-2 steps.
    pub fn trajectory(&self, base: &LossWeights, steps: usize) -> Vec<LossWeights> {
        (0..steps).map(|s| self.weights_at(base, s as f64, &[None; 4])).collect()
    }
}

/// Tracks smoothed validation losses and reports sustained degradation.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationMonitor {
    smoothing: f64,
    tolerance: f64,
    patience: usize,
    smoothed: Option<(f64, f64)>,
    minimum: (f64, f64),
    streak: usize,
}

impl DegradationMonitor {
    pub fn new(smoothing: f64, tolerance: f64, patience: usize) -> Self {
        Self {
            smoothing,
            tolerance,
            patience,
            smoothed: None,
            minimum: (f64::INFINITY, f64::INFINITY),
            streak: 0,
        }
    }

    pub fn smoothed(&self) -> Option<(f64, f64)> {
        self.smoothed
    }

    /// Feeds one evaluation; true once degradation persisted `patience` times.
    pub fn observe(&mut self, rec: f64, mse: f64) -> bool {
        let a = self.smoothing;
        let (sr, sm) = match self.smoothed {
            Some((r, m)) => (a * rec + (1.0 - a) * r, a * mse + (1.0 - a) * m),
            None => (rec, mse),
        };
        self.smoothed = Some((sr, sm));
        let worse = |v: f64, min: f64| min.is_finite() && v > min * (1.0 + self.tolerance);
        if worse(sr, self.minimum.0) || worse(sm, self.minimum.1) {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.minimum = (self.minimum.0.min(sr), self.minimum.1.min(sm));
        self.streak >= self.patience
    }
}

/// Adam with global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64, clip_norm: f64) -> Self {
        let zeros: Vec<Matrix> = store.ids().map(|id| Matrix::zeros(store.get(id).raw_dim())).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, mut grads: Gradients) -> f64 {
        let norm = grads.global_norm();
        if norm > self.clip_norm {
            grads.scale(self.clip_norm / norm);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (id, g) in grads.iter() {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
        norm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Root of the noise, sampling and batching substreams.
    #[serde(skip)]
    pub seed: u64,
    pub epochs: usize,
    /// Epochs of stage 1 before the stage-2 ramps start counting.
    pub stage1_epochs: usize,
    /// Hard cap on optimizer steps across both stages.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// Training points per epoch, drawn from a fresh sample of pairs each
    /// epoch; `None` uses every pair once.
    pub points_per_epoch: Option<usize>,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub lambda_rec: f64,
    pub schedule: AnnealSchedule,
    /// Validation cadence in optimizer steps; 0 validates once per epoch only.
    pub eval_every: usize,
    /// Number of validation sentences edited toward each probe target.
    pub probe_size: usize,
    pub probe_targets: Vec<f64>,
    /// Checkpoints whose validation MAE is within this distance of the lowest
    /// seen so far compete on validation reconstruction loss instead.
    pub selection_tolerance: f64,
    /// Training pairs re-evaluated at every validation for the pair losses.
    pub monitor_pairs: usize,
    pub sample_latents: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            stage1_epochs: 10,
            max_steps: None,
            batch_size: 32,
            points_per_epoch: None,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            lambda_rec: 0.75,
            schedule: AnnealSchedule::default(),
            eval_every: 50,
            probe_size: 60,
            probe_targets: vec![1.0, 3.0, 5.0],
            selection_tolerance: 0.05,
            monitor_pairs: 128,
            sample_latents: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_rec) {
            return Err(Error::Config("lambda_rec must lie in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("learning_rate and clip_norm must be positive".into()));
        }
        if !(self.selection_tolerance >= 0.0 && self.selection_tolerance.is_finite()) {
            return Err(Error::Config("selection_tolerance must be finite and non-negative".into()));
        }
        self.schedule.validate()
    }

    pub fn stage1_weights(&self) -> LossWeights {
        LossWeights::stage1(self.lambda_rec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    /// Optimizer steps taken since stage 2 began, if it has.
    pub stage2_step: Option<usize>,
    pub weights: LossWeights,
    /// Validation MAE of the retained checkpoint.
    pub best_validation_mae: Option<f64>,
    pub lowest_validation_mae: Option<f64>,
    /// Frozen value of each annealed loss, in `AnnealedLoss::ALL` order.
    pub frozen: [Option<f64>; 4],
}

impl TrainState {
    pub fn is_frozen(&self, loss: AnnealedLoss) -> bool {
        self.frozen[loss.index()].is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub name: String,
    pub value: f64,
}

/// Writes `step<TAB>name<TAB>value` lines after the header.
pub fn write_log<W: Write>(w: &mut W, records: &[LogRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}\t{}\t{}", r.step, r.name, crate::corpus::format_real(r.value))?;
    }
    Ok(())
}

pub fn save_log(path: &Path, records: &[LogRecord], header: &ArtifactHeader) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    header
        .write_to(&mut w)
        .and_then(|_| write_log(&mut w, records))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub struct TrainData<'a> {
    pub train: &'a [RatedSentence],
    pub pairs: &'a [PseudoPair],
    pub valid: &'a [RatedSentence],
}

pub struct TrainOutcome {
    /// Model with the lowest validation reconstruction loss among those whose
    /// validation MAE came within `selection_tolerance` of the lowest; the
    /// final model when there is no validation set.
    pub best: QuaseModel,
    pub last: QuaseModel,
    pub state: TrainState,
    pub log: Vec<LogRecord>,
}

/// Mean absolute gap between scorer ratings of edits and their targets,
/// averaged over `targets`.
pub fn probe_mae(model: &QuaseModel, probe: &[Sentence], scorer: &dyn RatingScorer, targets: &[f64]) -> Result<f64> {
    if probe.is_empty() || targets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    for &t in targets {
        let reqs: Vec<EditRequest> = probe.iter().map(|s| EditRequest::new(s.clone(), Target::Value(t))).collect();
        for res in edit_batch(model, &reqs)? {
            total += (score_sentence(scorer, &res.x_star)? - t).abs();
        }
    }
    Ok(total / (probe.len() * targets.len()) as f64)
}

/// Training points for one epoch. Without pairs, each sentence stands in as
/// its own pair so that single-sentence terms still train.
fn epoch_points(data: &TrainData, limit: Option<usize>, seed: u64, epoch: usize) -> Result<Vec<TrainingPoint>> {
    let mut rng = substream(seed, &format!("sampling/{epoch}"));
    let mut points = if data.pairs.is_empty() {
        data.train
            .iter()
            .map(|s| TrainingPoint {
                single: s.clone(),
                pair: PseudoPair {
                    x: s.clone(),
                    x_prime: s.clone(),
                    jaccard: 1.0,
                    rating_gap: 0.0,
                    x_index: 0,
                    x_prime_index: 0,
                },
                sampled_inc: None,
                sampled_dec: None,
            })
            .collect()
    } else {
        match limit {
            Some(n) if n < data.pairs.len() => {
                let mut picked = rand::seq::index::sample(&mut rng, data.pairs.len(), n).into_vec();
                picked.sort_unstable();
                let subset: Vec<PseudoPair> = picked.into_iter().map(|i| data.pairs[i].clone()).collect();
                compose_datapoints(data.train, &subset, &mut rng)?
            }
            _ => compose_datapoints(data.train, data.pairs, &mut rng)?,
        }
    };
    points.shuffle(&mut substream(seed, &format!("batching/{epoch}")));
    Ok(points)
}

fn monitor_batch(model: &QuaseModel, data: &TrainData, limit: usize, seed: u64) -> Option<PointBatch> {
    if data.valid.is_empty() {
        return None;
    }
    let mut points = epoch_points(
        &TrainData {
            train: data.valid,
            pairs: data.pairs,
            valid: data.valid,
        },
        Some(limit.max(1)),
        seed,
        usize::MAX,
    )
    .ok()?;
    points.truncate(limit.max(1));
    Some(model.point_batch(&points))
}

/// Online choice of the checkpoint to keep from a stream of validation scores.
///
/// A candidate is admissible while its MAE is within `tolerance` of the lowest
/// MAE seen so far; the kept checkpoint is replaced when it stops being
/// admissible or when an admissible candidate reconstructs better.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSelector {
    tolerance: f64,
    lowest: Option<f64>,
    kept: Option<(f64, f64)>,
}

impl CheckpointSelector {
    pub fn new(tolerance: f64) -> Self {
        Self {
            tolerance,
            lowest: None,
            kept: None,
        }
    }

    /// Returns true when the candidate with these scores should be kept.
    pub fn consider(&mut self, mae: f64, rec: f64) -> bool {
        let lowest = self.lowest.map_or(mae, |l| l.min(mae));
        self.lowest = Some(lowest);
        let slack = lowest + self.tolerance;
        let take = match self.kept {
            None => true,
            Some((kept_mae, kept_rec)) => kept_mae > slack || (mae <= slack && rec < kept_rec),
        };
        if take {
            self.kept = Some((mae, rec));
        }
        take
    }

    pub fn kept_mae(&self) -> Option<f64> {
        self.kept.map(|k| k.0)
    }

    pub fn lowest_mae(&self) -> Option<f64> {
        self.lowest
    }
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    scorer: &'a dyn RatingScorer,
    model: QuaseModel,
    best: Option<QuaseModel>,
    selector: CheckpointSelector,
    adam: Adam,
    state: TrainState,
    monitor: DegradationMonitor,
    log: Vec<LogRecord>,
    probe: Vec<Sentence>,
    monitor_batch: Option<PointBatch>,
    noise: crate::seed::Rng,
    has_pairs: bool,
}

impl Trainer<'_> {
    fn record(&mut self, name: &str, value: f64) {
        self.log.push(LogRecord {
            step: self.state.step,
            name: name.to_string(),
            value,
        });
    }

    fn current_weights(&self) -> LossWeights {
        let base = self.config.stage1_weights();
        let mut w = match self.state.stage2_step {
            None => base,
            Some(s) => self.config.schedule.weights_at(&base, s as f64, &self.state.frozen),
        };
        if !self.has_pairs {
            w.lambda_diff = 0.0;
            w.lambda_sim = 0.0;
            w.lambda_d_rec = 0.0;
        }
        w
    }

    fn train_step(&mut self, points: &[TrainingPoint]) -> Result<()> {
        let weights = self.current_weights();
        self.state.weights = weights;
        let batch = self.model.point_batch(points);
        let (grads, bundle, total) = {
            let mut g = crate::tape::Graph::new(self.model.store());
            let mut noise = if self.config.sample_latents {
                Noise::Sample(&mut self.noise)
            } else {
                Noise::Mean
            };
            let (total, vars) = self.model.joint_loss(&mut g, &batch, &weights, &mut noise);
            let bundle = vars.bundle(&g);
            let value = g.scalar(total);
            if !value.is_finite() || !bundle.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.state.step,
                    detail: format!("joint={value} terms={:?} weights={weights:?}", bundle.terms()),
                });
            }
            (g.backward(total), bundle, value)
        };
        let norm = self.adam.step(self.model.store_mut(), grads);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.state.step,
                detail: format!("gradient norm {norm}"),
            });
        }
        self.state.step += 1;
        if let Some(s) = self.state.stage2_step.as_mut() {
            *s += 1;
        }
        self.record("train_joint", total);
        for (name, v) in bundle.terms() {
            self.record(&format!("train_{name}"), v);
        }
        Ok(())
    }

    fn validate(&mut self) -> Result<()> {
        let w = self.current_weights();
        for (name, v) in ["rec", "kl", "mse", "diff", "sim", "d_rec"].iter().zip(w.values()) {
            self.record(&format!("lambda_{name}"), v);
        }
        let Some(batch) = self.monitor_batch.as_ref() else {
            return Ok(());
        };
        let bundle: LossBundle = self.model.evaluate_losses(batch, LossSelection::ALL);
        for (name, v) in bundle.terms() {
            self.record(&format!("valid_{name}"), v);
        }
        if self.state.stage2_step.is_some() {
            let degraded = self.monitor.observe(bundle.rec, bundle.mse);
            if degraded {
                let w = self.current_weights();
                for loss in AnnealedLoss::ALL {
                    let i = loss.index();
                    if self.state.frozen[i].is_none() {
                        self.state.frozen[i] = Some(loss.get(&w));
                        self.record(&format!("freeze_{}", loss.name()), loss.get(&w));
                    }
                }
            }
        } else {
            self.monitor = DegradationMonitor::new(
                self.config.schedule.smoothing,
                self.config.schedule.degradation_tolerance,
                self.config.schedule.patience,
            );
            self.monitor.observe(bundle.rec, bundle.mse);
        }
        if !self.probe.is_empty() {
            let mae = probe_mae(&self.model, &self.probe, self.scorer, &self.config.probe_targets)?;
            self.record("valid_mae", mae);
            if self.selector.consider(mae, bundle.rec) {
                self.best = Some(self.model.clone());
            }
            self.state.best_validation_mae = self.selector.kept_mae();
            self.state.lowest_validation_mae = self.selector.lowest_mae();
        }
        log::info!(
            "step {} epoch {} valid rec {:.4} mse {:.4} best mae {:?}",
            self.state.step,
            self.state.epoch,
            bundle.rec,
            bundle.mse,
            self.state.best_validation_mae
        );
        Ok(())
    }
}

/// Trains `model` and returns the best and final versions together with the log.
pub fn train(model: QuaseModel, data: &TrainData, scorer: &dyn RatingScorer, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let probe: Vec<Sentence> = data.valid.iter().take(config.probe_size).map(|r| r.sentence.clone()).collect();
    let monitor_batch = monitor_batch(&model, data, config.monitor_pairs, config.seed);
    let s = &config.schedule;
    let mut t = Trainer {
        config,
        scorer,
        adam: Adam::new(model.store(), config.learning_rate, config.clip_norm),
        best: None,
        selector: CheckpointSelector::new(config.selection_tolerance),
        state: TrainState {
            epoch: 0,
            step: 0,
            stage2_step: None,
            weights: config.stage1_weights(),
            best_validation_mae: None,
            lowest_validation_mae: None,
            frozen: [None; 4],
        },
        monitor: DegradationMonitor::new(s.smoothing, s.degradation_tolerance, s.patience),
        log: Vec::new(),
        probe,
        monitor_batch,
        noise: substream(config.seed, "noise"),
        has_pairs: !data.pairs.is_empty(),
        model,
    };
    let cap = config.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..config.epochs {
        t.state.epoch = epoch;
        if epoch == config.stage1_epochs && t.state.stage2_step.is_none() {
            t.state.stage2_step = Some(0);
        }
        let points = epoch_points(data, config.points_per_epoch, config.seed, epoch)?;
        for chunk in points.chunks(config.batch_size) {
            if t.state.step >= cap {
                break 'epochs;
            }
            t.train_step(chunk)?;
            if config.eval_every > 0 && t.state.step % config.eval_every == 0 {
                t.validate()?;
            }
        }
        if config.eval_every == 0 {
            t.validate()?;
        }
    }
    t.state.weights = t.current_weights();
    let last = t.model;
    Ok(TrainOutcome {
        best: t.best.unwrap_or_else(|| last.clone()),
        last,
        state: t.state,
        log: t.log,
    })
}

/// Stage-1 grid search over `lambda_rec`, scored by validation MAE.
///
/// Each grid point trains a copy of `model` for `config.stage1_epochs`
/// epochs with only the reconstruction and outcome losses active.
pub fn stage1_tune(
    model: &QuaseModel,
    data: &TrainData,
    scorer: &dyn RatingScorer,
    config: &TrainConfig,
    grid: &[f64],
) -> Result<(LossWeights, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if data.valid.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda_rec in grid {
        let cfg = TrainConfig {
            lambda_rec,
            epochs: config.stage1_epochs,
            stage1_epochs: usize::MAX,
            ..config.clone()
        };
        let out = train(model.clone(), data, scorer, &cfg)?;
        let probe: Vec<Sentence> = data.valid.iter().take(config.probe_size).map(|r| r.sentence.clone()).collect();
        let mae = probe_mae(&out.last, &probe, scorer, &config.probe_targets)?;
        scores.push((lambda_rec, mae));
    }
    let best = scores
        .iter()
        .copied()
        .fold(None, |acc: Option<(f64, f64)>, cur| match acc {
            Some(a) if a.1 <= cur.1 => Some(a),
            _ => Some(cur),
        })
        .expect("non-empty grid");
    Ok((LossWeights::stage1(best.0), scores))
}
