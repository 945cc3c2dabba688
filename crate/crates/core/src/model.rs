//! The differentiable components and their losses.
//!
//! * `E1` / `E2`: GRU encoders producing diagonal Gaussian posteriors over the
//!   outcome factor `y` and the content factor `z`.
//! * `D`: GRU decoder whose initial state is an affine map of `[y, z]`.
//! * `F`: affine outcome predictor on `y`.
//! * `U`: one tanh hidden layer mapping sampled delta-word embeddings to a
//!   predicted outcome-factor difference.
//!
//! Token embeddings are shared by all of them. One extra embedding row past
//! the vocabulary is the NULL token used for empty delta sides.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::pairing::TrainingPoint;
use crate::seed::Rng as SeededRng;
use crate::tape::{Graph, Matrix, NamedTensor, ParamId, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_y: usize,
    pub d_z: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub align_hidden_dim: usize,
    pub vocab_size: usize,
    pub max_decode_len: usize,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab_size: usize, max_decode_len: usize) -> Self {
        Self {
            d_y: 16,
            d_z: 16,
            embed_dim: 32,
            hidden_dim: 64,
            align_hidden_dim: 32,
            vocab_size,
            max_decode_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_y,
            self.d_z,
            self.embed_dim,
            self.hidden_dim,
            self.align_hidden_dim,
            self.vocab_size,
            self.max_decode_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn null_id(&self) -> usize {
        self.vocab_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGaussian {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PosteriorGaussian {
    /// `KL(q || N(0, I))`.
    pub fn kl_to_standard_normal(&self) -> f64 {
        self.mu
            .iter()
            .zip(&self.sigma)
            .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFactors {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

/// Batch means of the six loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub rec: f64,
    pub kl: f64,
    pub mse: f64,
    pub diff: f64,
    pub sim: f64,
    pub d_rec: f64,
}

impl LossBundle {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("rec", self.rec),
            ("kl", self.kl),
            ("mse", self.mse),
            ("diff", self.diff),
            ("sim", self.sim),
            ("d_rec", self.d_rec),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.is_finite())
    }
}

/// Relative weights of the six loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_kl: f64,
    pub lambda_mse: f64,
    pub lambda_diff: f64,
    pub lambda_sim: f64,
    pub lambda_d_rec: f64,
}

impl LossWeights {
    /// Tuned values reported for the full model.
    pub const DEFAULT: LossWeights = LossWeights {
        lambda_rec: 0.75,
        lambda_kl: 0.6,
        lambda_mse: 0.25,
        lambda_diff: 0.2,
        lambda_sim: 0.2,
        lambda_d_rec: 0.1,
    };

    pub const ZERO: LossWeights = LossWeights {
        lambda_rec: 0.0,
        lambda_kl: 0.0,
        lambda_mse: 0.0,
        lambda_diff: 0.0,
        lambda_sim: 0.0,
        lambda_d_rec: 0.0,
    };

    /// Stage-one weights: reconstruction and outcome only, summing to one.
    pub fn stage1(lambda_rec: f64) -> Self {
        Self {
            lambda_rec,
            lambda_mse: 1.0 - lambda_rec,
            ..Self::ZERO
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [
            self.lambda_rec,
            self.lambda_kl,
            self.lambda_mse,
            self.lambda_diff,
            self.lambda_sim,
            self.lambda_d_rec,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Which loss terms a forward pass has to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSelection {
    pub rec: bool,
    pub kl: bool,
    pub mse: bool,
    pub diff: bool,
    pub sim: bool,
    pub d_rec: bool,
}

impl LossSelection {
    pub const ALL: LossSelection = LossSelection {
        rec: true,
        kl: true,
        mse: true,
        diff: true,
        sim: true,
        d_rec: true,
    };

    pub fn from_weights(w: &LossWeights) -> Self {
        Self {
            rec: w.lambda_rec > 0.0,
            kl: w.lambda_kl > 0.0,
            mse: w.lambda_mse > 0.0,
            diff: w.lambda_diff > 0.0,
            sim: w.lambda_sim > 0.0,
            d_rec: w.lambda_d_rec > 0.0,
        }
    }

    fn needs_pairs(&self) -> bool {
        self.diff || self.sim || self.d_rec
    }

    fn needs_single_decode(&self) -> bool {
        self.rec
    }
}

/// Posterior means, or reparameterized samples drawn from `rng`.
pub enum Noise<'a> {
    Mean,
    Sample(&'a mut SeededRng),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct GruParams {
    wx: ParamId,
    bx: ParamId,
    wh: ParamId,
    bh: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct EncoderParams {
    gru: GruParams,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Params {
    embedding: ParamId,
    enc_y: EncoderParams,
    enc_z: EncoderParams,
    dec: GruParams,
    dec_init_w: ParamId,
    dec_init_b: ParamId,
    dec_out_w: ParamId,
    dec_out_b: ParamId,
    f_w: ParamId,
    f_b: ParamId,
    u_hidden_w: ParamId,
    u_hidden_b: ParamId,
    u_out_w: ParamId,
    u_out_b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Outcome,
    Content,
}

/// Affine outcome head `F(y) = w . y + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineOutcome {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl AffineOutcome {
    pub fn predict(&self, y: &[f64]) -> f64 {
        self.weights.iter().zip(y).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

/// Right-padded id sequences fed through a recurrent net in lockstep.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    seqs: Vec<Vec<usize>>,
    max_len: usize,
}

impl SeqBatch {
    pub fn new(seqs: Vec<Vec<usize>>) -> Self {
        let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        Self { seqs, max_len }
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    /// Ids at step `t` for all rows, PAD past each row's end; time-major.
    fn time_major_ids(&self, steps: usize, shift_bos: bool) -> Vec<usize> {
        let mut ids = Vec::with_capacity(steps * self.seqs.len());
        for t in 0..steps {
            for s in &self.seqs {
                let id = if shift_bos {
                    if t == 0 {
                        BOS
                    } else {
                        s.get(t - 1).copied().unwrap_or(PAD)
                    }
                } else {
                    s.get(t).copied().unwrap_or(PAD)
                };
                ids.push(id);
            }
        }
        ids
    }
}

/// Index-level representation of a batch of training points.
#[derive(Debug, Clone)]
pub struct PointBatch {
    pub singles: Vec<Vec<usize>>,
    pub ratings: Vec<f64>,
    pub xs: Vec<Vec<usize>>,
    pub x_primes: Vec<Vec<usize>>,
    pub inc: Vec<usize>,
    pub dec: Vec<usize>,
}

impl PointBatch {
    pub fn len(&self) -> usize {
        self.singles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.singles.is_empty()
    }
}

/// Per-example loss columns (`batch x 1`); absent terms were not requested.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossVars {
    pub rec: Option<Var>,
    pub kl: Option<Var>,
    pub mse: Option<Var>,
    pub diff: Option<Var>,
    pub sim: Option<Var>,
    pub d_rec: Option<Var>,
}

impl LossVars {
    fn pairs(&self) -> [(Option<Var>, usize); 6] {
        [
            (self.rec, 0),
            (self.kl, 1),
            (self.mse, 2),
            (self.diff, 3),
            (self.sim, 4),
            (self.d_rec, 5),
        ]
    }

    /// Batch mean of each term as a `1 x 1` node.
    pub fn means(&self, g: &mut Graph) -> [Option<Var>; 6] {
        let mut out = [None; 6];
        for (v, i) in self.pairs() {
            out[i] = v.map(|v| g.mean(v));
        }
        out
    }

    pub fn bundle(&self, g: &Graph) -> LossBundle {
        let mean = |v: Option<Var>| {
            v.map_or(0.0, |v| {
                let m = g.value(v);
                m.sum() / m.len().max(1) as f64
            })
        };
        LossBundle {
            rec: mean(self.rec),
            kl: mean(self.kl),
            mse: mean(self.mse),
            diff: mean(self.diff),
            sim: mean(self.sim),
            d_rec: mean(self.d_rec),
        }
    }
}

pub struct QuaseModel {
    config: ModelConfig,
    vocab: Vocabulary,
    store: ParamStore,
    params: Params,
}

impl Clone for QuaseModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            store: self.store.clone(),
            params: self.params,
        }
    }
}

fn uniform_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Matrix {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

fn fan_in_init<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    uniform_init(rng, rows, cols, 1.0 / (rows as f64).sqrt())
}

impl QuaseModel {
    pub fn new<R: Rng>(config: ModelConfig, vocab: Vocabulary, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::DimensionMismatch {
                expected: config.vocab_size,
                actual: vocab.len(),
            });
        }
        let c = &config;
        let mut store = ParamStore::new();
        let h3 = 3 * c.hidden_dim;
        let embedding = store.add("embedding", uniform_init(rng, c.vocab_size + 1, c.embed_dim, 0.1));

        let gru = |store: &mut ParamStore, prefix: &str, rng: &mut R| GruParams {
            wx: store.add(&format!("{prefix}.wx"), fan_in_init(rng, c.embed_dim, h3)),
            bx: store.add(&format!("{prefix}.bx"), Matrix::zeros((1, h3))),
            wh: store.add(&format!("{prefix}.wh"), fan_in_init(rng, c.hidden_dim, h3)),
            bh: store.add(&format!("{prefix}.bh"), Matrix::zeros((1, h3))),
        };
        let enc_y_gru = gru(&mut store, "enc_y.gru", rng);
        let enc_y = EncoderParams {
            gru: enc_y_gru,
            head_w: store.add("enc_y.head_w", fan_in_init(rng, c.hidden_dim, 2 * c.d_y)),
            head_b: store.add("enc_y.head_b", Matrix::zeros((1, 2 * c.d_y))),
        };
        let enc_z_gru = gru(&mut store, "enc_z.gru", rng);
        let enc_z = EncoderParams {
            gru: enc_z_gru,
            head_w: store.add("enc_z.head_w", fan_in_init(rng, c.hidden_dim, 2 * c.d_z)),
            head_b: store.add("enc_z.head_b", Matrix::zeros((1, 2 * c.d_z))),
        };
        let dec = gru(&mut store, "dec.gru", rng);
        let params = Params {
            embedding,
            enc_y,
            enc_z,
            dec,
            dec_init_w: store.add("dec.init_w", fan_in_init(rng, c.d_y + c.d_z, c.hidden_dim)),
            dec_init_b: store.add("dec.init_b", Matrix::zeros((1, c.hidden_dim))),
            dec_out_w: store.add("dec.out_w", fan_in_init(rng, c.hidden_dim, c.vocab_size)),
            dec_out_b: store.add("dec.out_b", Matrix::zeros((1, c.vocab_size))),
            f_w: store.add("f.w", fan_in_init(rng, c.d_y, 1)),
            f_b: store.add("f.b", Matrix::from_elem((1, 1), 3.0)),
            u_hidden_w: store.add("u.hidden_w", fan_in_init(rng, 2 * c.embed_dim, c.align_hidden_dim)),
            u_hidden_b: store.add("u.hidden_b", Matrix::zeros((1, c.align_hidden_dim))),
            u_out_w: store.add("u.out_w", fan_in_init(rng, c.align_hidden_dim, c.d_y)),
            u_out_b: store.add("u.out_b", Matrix::zeros((1, c.d_y))),
        };
        Ok(Self {
            config,
            vocab,
            store,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn outcome_head(&self) -> AffineOutcome {
        AffineOutcome {
            weights: self.store.get(self.params.f_w).column(0).to_vec(),
            bias: self.store.get(self.params.f_b)[[0, 0]],
        }
    }

    pub fn encode_ids(&self, s: &Sentence) -> Vec<usize> {
        self.vocab.encode(s)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.config.vocab_size) {
            Some(&id) => Err(Error::UnknownId {
                id,
                size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Id of a delta token; `None` and out-of-vocabulary map to NULL.
    pub fn delta_id(&self, token: Option<&str>) -> usize {
        match token {
            Some(t) if self.vocab.contains(t) => self.vocab.id(t),
            _ => self.config.null_id(),
        }
    }

    // ----- graph building blocks -------------------------------------------------

    fn gru_step(&self, g: &mut Graph, p: &GruParams, gx: Var, h: Var) -> Var {
        let hd = self.config.hidden_dim;
        let gh = g.affine(h, p.wh, p.bh);
        let gx_ru = g.slice_cols(gx, 0, 2 * hd);
        let gh_ru = g.slice_cols(gh, 0, 2 * hd);
        let ru_pre = g.add(gx_ru, gh_ru);
        let ru = g.sigmoid(ru_pre);
        let r = g.slice_cols(ru, 0, hd);
        let u = g.slice_cols(ru, hd, 2 * hd);
        let gx_n = g.slice_cols(gx, 2 * hd, 3 * hd);
        let gh_n = g.slice_cols(gh, 2 * hd, 3 * hd);
        let rgh = g.mul(r, gh_n);
        let n_pre = g.add(gx_n, rgh);
        let n = g.tanh(n_pre);
        let h_minus_n = g.sub(h, n);
        let gated = g.mul(u, h_minus_n);
        g.add(n, gated)
    }

    fn embed(&self, g: &mut Graph, ids: Vec<usize>) -> Var {
        let table = g.param(self.params.embedding);
        g.gather(table, ids)
    }

    /// Posterior `(mu, log_sigma)` for every row of `batch`.
    pub fn encode_batch(&self, g: &mut Graph, kind: EncoderKind, batch: &SeqBatch) -> (Var, Var) {
        let (enc, dim) = match kind {
            EncoderKind::Outcome => (&self.params.enc_y, self.config.d_y),
            EncoderKind::Content => (&self.params.enc_z, self.config.d_z),
        };
        let n = batch.len();
        let steps = batch.max_len;
        let emb = self.embed(g, batch.time_major_ids(steps, false));
        let gx_all = g.affine(emb, enc.gru.wx, enc.gru.bx);
        let mut h = g.constant(Matrix::zeros((n, self.config.hidden_dim)));
        for t in 0..steps {
            let gx = g.slice_rows(gx_all, t * n, (t + 1) * n);
            let next = self.gru_step(g, &enc.gru, gx, h);
            let mask: Vec<f64> = batch
                .seqs
                .iter()
                .map(|s| if t < s.len() { 1.0 } else { 0.0 })
                .collect();
            h = if mask.iter().all(|&m| m == 1.0) {
                next
            } else {
                g.blend(next, h, mask)
            };
        }
        let head = g.affine(h, enc.head_w, enc.head_b);
        let mu = g.slice_cols(head, 0, dim);
        let log_sigma = g.slice_cols(head, dim, 2 * dim);
        (mu, log_sigma)
    }

    fn latent(&self, g: &mut Graph, mu: Var, log_sigma: Var, noise: &mut Noise) -> Var {
        match noise {
            Noise::Mean => mu,
            Noise::Sample(rng) => {
                let shape = g.value(mu).dim();
                let eps = Array2::from_shape_simple_fn(shape, || StandardNormal.sample(&mut **rng));
                let eps = g.constant(eps);
                let sigma = g.exp(log_sigma);
                let scaled = g.mul(sigma, eps);
                g.add(mu, scaled)
            }
        }
    }

    fn decoder_init(&self, g: &mut Graph, y: Var, z: Var) -> Var {
        let yz = g.concat_cols(&[y, z]);
        g.affine(yz, self.params.dec_init_w, self.params.dec_init_b)
    }

    fn decoder_logits(&self, g: &mut Graph, h: Var) -> Var {
        g.affine(h, self.params.dec_out_w, self.params.dec_out_b)
    }

    /// Teacher-forced pass; returns the `(steps * n) x vocab` logits, time-major,
    /// with `steps = max_len + 1` (the final step predicts EOS for the longest row).
    pub fn decode_teacher_forced(&self, g: &mut Graph, y: Var, z: Var, targets: &SeqBatch) -> Var {
        let n = targets.len();
        let steps = targets.max_len + 1;
        let emb = self.embed(g, targets.time_major_ids(steps, true));
        let gx_all = g.affine(emb, self.params.dec.wx, self.params.dec.bx);
        let mut h = self.decoder_init(g, y, z);
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let gx = g.slice_rows(gx_all, t * n, (t + 1) * n);
            h = self.gru_step(g, &self.params.dec, gx, h);
            states.push(h);
        }
        let all = g.concat_rows(&states);
        self.decoder_logits(g, all)
    }

    /// Summed token cross entropy of each row of `targets` (including its EOS).
    pub fn reconstruction_loss(&self, g: &mut Graph, y: Var, z: Var, targets: &SeqBatch) -> Var {
        let n = targets.len();
        let steps = targets.max_len + 1;
        let logits = self.decode_teacher_forced(g, y, z, targets);
        let mut ids = Vec::with_capacity(steps * n);
        let mut weights = Vec::with_capacity(steps * n);
        for t in 0..steps {
            for s in &targets.seqs {
                match t.cmp(&s.len()) {
                    std::cmp::Ordering::Less => {
                        ids.push(s[t]);
                        weights.push(1.0);
                    }
                    std::cmp::Ordering::Equal => {
                        ids.push(EOS);
                        weights.push(1.0);
                    }
                    std::cmp::Ordering::Greater => {
                        ids.push(PAD);
                        weights.push(0.0);
                    }
                }
            }
        }
        g.cross_entropy(logits, ids, weights, n)
    }

    /// Closed-form `KL(q || N(0, I))` per row.
    pub fn kl_loss(&self, g: &mut Graph, mu: Var, log_sigma: Var) -> Var {
        let dim = g.value(mu).ncols() as f64;
        let mu2 = g.square(mu);
        let two_ls = g.scale(log_sigma, 2.0);
        let var = g.exp(two_ls);
        let a = g.add(mu2, var);
        let b = g.sub(a, two_ls);
        let s = g.sum_cols(b);
        let half = g.scale(s, 0.5);
        g.add_scalar(half, -0.5 * dim)
    }

    pub fn predict_outcome_var(&self, g: &mut Graph, y: Var) -> Var {
        g.affine(y, self.params.f_w, self.params.f_b)
    }

    pub fn align_delta_var(&self, g: &mut Graph, inc: Vec<usize>, dec: Vec<usize>) -> Var {
        let a = self.embed(g, inc);
        let b = self.embed(g, dec);
        let cat = g.concat_cols(&[a, b]);
        let pre = g.affine(cat, self.params.u_hidden_w, self.params.u_hidden_b);
        let hidden = g.tanh(pre);
        g.affine(hidden, self.params.u_out_w, self.params.u_out_b)
    }

    fn squared_distance(g: &mut Graph, a: Var, b: Var) -> Var {
        let d = g.sub(a, b);
        let sq = g.square(d);
        g.sum_cols(sq)
    }

    /// Builds the requested per-example loss terms for a batch of training points.
    ///
    /// Single-sentence terms use `batch.singles`; pair terms use `xs`/`x_primes`.
    pub fn forward_losses(
        &self,
        g: &mut Graph,
        batch: &PointBatch,
        select: LossSelection,
        noise: &mut Noise,
    ) -> LossVars {
        let b = batch.len();
        let use_pairs = select.needs_pairs();
        let mut seqs = batch.singles.clone();
        if use_pairs {
            seqs.extend(batch.xs.iter().cloned());
            seqs.extend(batch.x_primes.iter().cloned());
        }
        let all = SeqBatch::new(seqs);
        let (mu_y, ls_y) = self.encode_batch(g, EncoderKind::Outcome, &all);
        let need_z = select.rec || select.kl || select.sim || select.d_rec;
        let (mu_z, ls_z) = if need_z {
            let (m, l) = self.encode_batch(g, EncoderKind::Content, &all);
            (Some(m), Some(l))
        } else {
            (None, None)
        };
        let y = self.latent(g, mu_y, ls_y, noise);
        let z = match (mu_z, ls_z) {
            (Some(m), Some(l)) => Some(self.latent(g, m, l, noise)),
            _ => None,
        };

        let rows = |g: &mut Graph, v: Var, k: usize| g.slice_rows(v, k * b, (k + 1) * b);
        let mut out = LossVars::default();

        if select.kl {
            let (mz, lz) = (mu_z.expect("content encoded"), ls_z.expect("content encoded"));
            let (my_s, ly_s) = (rows(g, mu_y, 0), rows(g, ls_y, 0));
            let (mz_s, lz_s) = (rows(g, mz, 0), rows(g, lz, 0));
            let kl_y = self.kl_loss(g, my_s, ly_s);
            let kl_z = self.kl_loss(g, mz_s, lz_s);
            out.kl = Some(g.add(kl_y, kl_z));
        }
        if select.mse {
            let y_s = rows(g, y, 0);
            let pred = self.predict_outcome_var(g, y_s);
            let r = g.constant(Matrix::from_shape_vec((b, 1), batch.ratings.clone()).expect("b ratings"));
            let d = g.sub(pred, r);
            out.mse = Some(g.square(d));
        }
        if select.diff {
            let mx = rows(g, mu_y, 1);
            let mxp = rows(g, mu_y, 2);
            let h = g.sub(mx, mxp);
            let u = self.align_delta_var(g, batch.inc.clone(), batch.dec.clone());
            out.diff = Some(Self::squared_distance(g, h, u));
        }
        if select.sim {
            let mz = mu_z.expect("content encoded");
            let zx = rows(g, mz, 1);
            let zxp = rows(g, mz, 2);
            out.sim = Some(Self::squared_distance(g, zx, zxp));
        }

        let z = z.unwrap_or_else(|| g.constant(Matrix::zeros((all.len(), self.config.d_z))));
        if select.needs_single_decode() || select.d_rec {
            let mut ys = Vec::new();
            let mut zs = Vec::new();
            let mut targets = Vec::new();
            if select.rec {
                ys.push(rows(g, y, 0));
                zs.push(rows(g, z, 0));
                targets.extend(batch.singles.iter().cloned());
            }
            if select.d_rec {
                // x' from (y', z) and x from (y, z')
                ys.push(rows(g, y, 2));
                zs.push(rows(g, z, 1));
                targets.extend(batch.x_primes.iter().cloned());
                ys.push(rows(g, y, 1));
                zs.push(rows(g, z, 2));
                targets.extend(batch.xs.iter().cloned());
            }
            let yy = if ys.len() == 1 { ys[0] } else { g.concat_rows(&ys) };
            let zz = if zs.len() == 1 { zs[0] } else { g.concat_rows(&zs) };
            let ce = self.reconstruction_loss(g, yy, zz, &SeqBatch::new(targets));
            let mut block = 0;
            if select.rec {
                out.rec = Some(rows(g, ce, block));
                block += 1;
            }
            if select.d_rec {
                let a = rows(g, ce, block);
                let c = rows(g, ce, block + 1);
                out.d_rec = Some(g.add(a, c));
            }
        }
        out
    }

    /// Weighted joint loss, as a `1 x 1` node, plus the loss columns it was built from.
    pub fn joint_loss(
        &self,
        g: &mut Graph,
        batch: &PointBatch,
        weights: &LossWeights,
        noise: &mut Noise,
    ) -> (Var, LossVars) {
        let vars = self.forward_losses(g, batch, LossSelection::from_weights(weights), noise);
        let means = vars.means(g);
        let terms: Vec<(f64, Var)> = weights
            .values()
            .iter()
            .zip(means)
            .filter_map(|(&w, m)| m.filter(|_| w > 0.0).map(|m| (w, m)))
            .collect();
        let total = g.weighted_sum(&terms);
        (total, vars)
    }

    /// Converts training points to index form against this model's vocabulary.
    pub fn point_batch(&self, points: &[TrainingPoint]) -> PointBatch {
        PointBatch {
            singles: points.iter().map(|p| self.encode_ids(&p.single.sentence)).collect(),
            ratings: points.iter().map(|p| p.single.rating).collect(),
            xs: points.iter().map(|p| self.encode_ids(&p.pair.x.sentence)).collect(),
            x_primes: points.iter().map(|p| self.encode_ids(&p.pair.x_prime.sentence)).collect(),
            inc: points.iter().map(|p| self.delta_id(p.sampled_inc.as_deref())).collect(),
            dec: points.iter().map(|p| self.delta_id(p.sampled_dec.as_deref())).collect(),
        }
    }

    // ----- evaluation-mode operations ---------------------------------------------

    pub fn encode_posterior_ids(&self, kind: EncoderKind, ids: &[usize]) -> Result<PosteriorGaussian> {
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        self.check_ids(ids)?;
        let mut g = Graph::new(&self.store);
        let (mu, ls) = self.encode_batch(&mut g, kind, &SeqBatch::new(vec![ids.to_vec()]));
        Ok(PosteriorGaussian {
            mu: g.value(mu).row(0).to_vec(),
            sigma: g.value(ls).row(0).mapv(f64::exp).to_vec(),
        })
    }

    /// `E1`: posterior over the outcome factor.
    pub fn encode_outcome(&self, s: &Sentence) -> Result<PosteriorGaussian> {
        self.encode_posterior_ids(EncoderKind::Outcome, &self.encode_ids(s))
    }

    /// `E2`: posterior over the content factor.
    pub fn encode_content(&self, s: &Sentence) -> Result<PosteriorGaussian> {
        self.encode_posterior_ids(EncoderKind::Content, &self.encode_ids(s))
    }

    /// Posterior means `(y, z)` for many sentences at once.
    pub fn encode_means(&self, sentences: &[Sentence]) -> Vec<LatentFactors> {
        if sentences.is_empty() {
            return Vec::new();
        }
        let batch = SeqBatch::new(sentences.iter().map(|s| self.encode_ids(s)).collect());
        let mut g = Graph::new(&self.store);
        let (my, _) = self.encode_batch(&mut g, EncoderKind::Outcome, &batch);
        let (mz, _) = self.encode_batch(&mut g, EncoderKind::Content, &batch);
        let (my, mz) = (g.value(my), g.value(mz));
        (0..sentences.len())
            .map(|i| LatentFactors {
                y: my.row(i).to_vec(),
                z: mz.row(i).to_vec(),
            })
            .collect()
    }

    /// `F(y)`.
    pub fn predict_outcome(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.config.d_y {
            return Err(Error::DimensionMismatch {
                expected: self.config.d_y,
                actual: y.len(),
            });
        }
        Ok(self.outcome_head().predict(y))
    }

    /// `U[inc, dec]`; `None` tokens are NULL.
    pub fn align_delta(&self, inc: Option<&str>, dec: Option<&str>) -> Vec<f64> {
        let mut g = Graph::new(&self.store);
        let v = self.align_delta_var(&mut g, vec![self.delta_id(inc)], vec![self.delta_id(dec)]);
        g.value(v).row(0).to_vec()
    }

    fn check_latents(&self, y: &[f64], z: &[f64]) -> Result<()> {
        if y.len() != self.config.d_y {
            return Err(Error::DimensionMismatch {
                expected: self.config.d_y,
                actual: y.len(),
            });
        }
        if z.len() != self.config.d_z {
            return Err(Error::DimensionMismatch {
                expected: self.config.d_z,
                actual: z.len(),
            });
        }
        Ok(())
    }

    /// Teacher-forced per-step softmax distributions for `target` given `(y, z)`;
    /// one distribution per target token plus the final EOS step.
    pub fn decode_distributions(&self, y: &[f64], z: &[f64], target: &Sentence) -> Result<Vec<Vec<f64>>> {
        self.check_latents(y, z)?;
        let mut g = Graph::new(&self.store);
        let yv = g.constant(Matrix::from_shape_vec((1, y.len()), y.to_vec()).expect("row"));
        let zv = g.constant(Matrix::from_shape_vec((1, z.len()), z.to_vec()).expect("row"));
        let logits = self.decode_teacher_forced(&mut g, yv, zv, &SeqBatch::new(vec![self.encode_ids(target)]));
        Ok(g.value(logits).outer_iter().map(|row| softmax(row.as_slice().expect("contiguous"))).collect())
    }

    /// Greedy decoding of many latent pairs in lockstep. Returns ids (without EOS)
    /// and whether each row stopped at EOS.
    pub fn greedy_decode_batch(&self, latents: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<(Vec<usize>, bool)>> {
        let n = latents.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        for (y, z) in latents {
            self.check_latents(y, z)?;
        }
        let mut g = Graph::new(&self.store);
        let ys = Matrix::from_shape_fn((n, self.config.d_y), |(i, j)| latents[i].0[j]);
        let zs = Matrix::from_shape_fn((n, self.config.d_z), |(i, j)| latents[i].1[j]);
        let (yv, zv) = (g.constant(ys), g.constant(zs));
        let mut h = self.decoder_init(&mut g, yv, zv);
        let mut prev = vec![BOS; n];
        let mut out: Vec<(Vec<usize>, bool)> = vec![(Vec::new(), false); n];
        let mut stopped = vec![false; n];
        for _ in 0..self.config.max_decode_len + 1 {
            if stopped.iter().all(|&s| s) {
                break;
            }
            let emb = self.embed(&mut g, prev.clone());
            let gx = g.affine(emb, self.params.dec.wx, self.params.dec.bx);
            h = self.gru_step(&mut g, &self.params.dec, gx, h);
            let logits = self.decoder_logits(&mut g, h);
            for (i, row) in g.value(logits).outer_iter().enumerate() {
                if stopped[i] {
                    continue;
                }
                let best = argmax(row.as_slice().expect("contiguous"));
                if best == EOS {
                    out[i].1 = true;
                    stopped[i] = true;
                } else if out[i].0.len() < self.config.max_decode_len {
                    out[i].0.push(best);
                } else {
                    stopped[i] = true;
                }
                prev[i] = best;
            }
        }
        Ok(out)
    }

    /// Beam search for one latent pair; `beam` of 1 reduces to greedy search.
    pub fn beam_decode(&self, y: &[f64], z: &[f64], beam: usize) -> Result<(Vec<usize>, bool)> {
        self.check_latents(y, z)?;
        let beam = beam.max(1);
        let mut g = Graph::new(&self.store);
        let yv = g.constant(Matrix::from_shape_vec((1, y.len()), y.to_vec()).expect("row"));
        let zv = g.constant(Matrix::from_shape_vec((1, z.len()), z.to_vec()).expect("row"));
        let h0 = self.decoder_init(&mut g, yv, zv);
        let h0 = g.value(h0).clone();

        struct Hyp {
            ids: Vec<usize>,
            score: f64,
            h: Vec<f64>,
        }
        let mut live = vec![Hyp {
            ids: Vec::new(),
            score: 0.0,
            h: h0.row(0).to_vec(),
        }];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        let hd = self.config.hidden_dim;
        for _ in 0..self.config.max_decode_len + 1 {
            if live.is_empty() {
                break;
            }
            let k = live.len();
            let hm = Matrix::from_shape_fn((k, hd), |(i, j)| live[i].h[j]);
            let prev: Vec<usize> = live.iter().map(|hy| *hy.ids.last().unwrap_or(&BOS)).collect();
            let hv = g.constant(hm);
            let emb = self.embed(&mut g, prev);
            let gx = g.affine(emb, self.params.dec.wx, self.params.dec.bx);
            let hn = self.gru_step(&mut g, &self.params.dec, gx, hv);
            let logits = self.decoder_logits(&mut g, hn);
            let hn = g.value(hn).clone();
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (i, row) in g.value(logits).outer_iter().enumerate() {
                let row = row.as_slice().expect("contiguous");
                let lp = log_softmax(row);
                for (tok, &l) in lp.iter().enumerate() {
                    if tok == PAD || tok == BOS {
                        continue;
                    }
                    cands.push((live[i].score + l, i, tok));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::new();
            for (score, i, tok) in cands {
                if next.len() + finished.len() >= beam * 2 || next.len() >= beam {
                    break;
                }
                if tok == EOS {
                    finished.push((live[i].ids.clone(), score));
                    continue;
                }
                let mut ids = live[i].ids.clone();
                ids.push(tok);
                if ids.len() > self.config.max_decode_len {
                    continue;
                }
                next.push(Hyp {
                    ids,
                    score,
                    h: hn.row(i).to_vec(),
                });
            }
            if finished.len() >= beam {
                break;
            }
            live = next;
        }
        if let Some((ids, _)) = finished.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
            return Ok((ids.clone(), true));
        }
        let best = live
            .into_iter()
            .max_by(|a, b| a.score.total_cmp(&b.score))
            .map(|h| h.ids)
            .unwrap_or_default();
        Ok((best, false))
    }

    /// Greedy decode of a single latent pair.
    pub fn decode(&self, y: &[f64], z: &[f64]) -> Result<(Vec<usize>, bool)> {
        Ok(self
            .greedy_decode_batch(&[(y.to_vec(), z.to_vec())])?
            .pop()
            .expect("one row"))
    }

    /// Loss bundle of a batch in evaluation mode (posterior means).
    pub fn evaluate_losses(&self, batch: &PointBatch, select: LossSelection) -> LossBundle {
        let mut g = Graph::new(&self.store);
        let vars = self.forward_losses(&mut g, batch, select, &mut Noise::Mean);
        vars.bundle(&g)
    }

    /// Single-point batch; the pair slot repeats `pair` and the single slot holds `single`.
    fn one_point(&self, single: (&Sentence, f64), pair: (&Sentence, &Sentence), delta: (Option<&str>, Option<&str>)) -> PointBatch {
        PointBatch {
            singles: vec![self.encode_ids(single.0)],
            ratings: vec![single.1],
            xs: vec![self.encode_ids(pair.0)],
            x_primes: vec![self.encode_ids(pair.1)],
            inc: vec![self.delta_id(delta.0)],
            dec: vec![self.delta_id(delta.1)],
        }
    }

    fn only(select: fn(&mut LossSelection)) -> LossSelection {
        let mut s = LossSelection {
            rec: false,
            kl: false,
            mse: false,
            diff: false,
            sim: false,
            d_rec: false,
        };
        select(&mut s);
        s
    }

    /// Token-level cross entropy reconstructing `x` from its posterior means.
    pub fn loss_rec(&self, x: &Sentence) -> f64 {
        let b = self.one_point((x, 3.0), (x, x), (None, None));
        self.evaluate_losses(&b, Self::only(|s| s.rec = true)).rec
    }

    pub fn loss_kl(&self, x: &Sentence) -> f64 {
        let b = self.one_point((x, 3.0), (x, x), (None, None));
        self.evaluate_losses(&b, Self::only(|s| s.kl = true)).kl
    }

    pub fn loss_mse(&self, x: &Sentence, rating: f64) -> f64 {
        let b = self.one_point((x, rating), (x, x), (None, None));
        self.evaluate_losses(&b, Self::only(|s| s.mse = true)).mse
    }

    pub fn loss_diff(&self, x: &Sentence, x_prime: &Sentence, inc: Option<&str>, dec: Option<&str>) -> f64 {
        let b = self.one_point((x, 3.0), (x, x_prime), (inc, dec));
        self.evaluate_losses(&b, Self::only(|s| s.diff = true)).diff
    }

    pub fn loss_sim(&self, x: &Sentence, x_prime: &Sentence) -> f64 {
        let b = self.one_point((x, 3.0), (x, x_prime), (None, None));
        self.evaluate_losses(&b, Self::only(|s| s.sim = true)).sim
    }

    pub fn loss_dual(&self, x: &Sentence, x_prime: &Sentence) -> f64 {
        let b = self.one_point((x, 3.0), (x, x_prime), (None, None));
        self.evaluate_losses(&b, Self::only(|s| s.d_rec = true)).d_rec
    }

    /// Evaluation-mode joint loss of one training point.
    pub fn loss_joint(&self, point: &TrainingPoint, weights: &LossWeights) -> f64 {
        let batch = self.point_batch(std::slice::from_ref(point));
        let mut g = Graph::new(&self.store);
        let (total, _) = self.joint_loss(&mut g, &batch, weights, &mut Noise::Mean);
        g.scalar(total)
    }

    // ----- checkpoints --------------------------------------------------------------

    pub fn to_checkpoint(&self, meta: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            meta,
            params: self.store.to_named(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: ck.version.into(),
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut rng = crate::seed::substream(0, "checkpoint-shell");
        let mut model = Self::new(ck.config.clone(), ck.vocab.clone(), &mut rng)?;
        model.store.load_named(&ck.params)?;
        Ok(model)
    }
}

pub const CHECKPOINT_FORMAT: &str = "quase-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing model container: configuration, vocabulary and named tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub meta: BTreeMap<String, String>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        match raw.get("version").and_then(|v| v.as_u64()) {
            None => return Err(Error::Checkpoint("missing version field".into())),
            Some(v) if v != CHECKPOINT_VERSION as u64 => {
                return Err(Error::CheckpointVersion {
                    found: v,
                    expected: CHECKPOINT_VERSION,
                })
            }
            Some(_) => {}
        }
        serde_json::from_value(raw).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x - lse).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, RatedSentence};
    use crate::pairing::PseudoPair;
    use crate::seed::substream;

    fn sentences() -> Vec<Sentence> {
        [
            "the food is great .",
            "the food is terrible .",
            "the staff was really nice !",
            "our waiter was rude",
            "i will never come back .",
            "i will definitely come back , recommend !",
        ]
        .iter()
        .map(|t| tokenize(t).unwrap())
        .collect()
    }

    fn model() -> QuaseModel {
        let corpus = sentences();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let cfg = ModelConfig {
            d_y: 4,
            d_z: 3,
            embed_dim: 5,
            hidden_dim: 6,
            align_hidden_dim: 4,
            vocab_size: vocab.len(),
            max_decode_len: 12,
        };
        QuaseModel::new(cfg, vocab, &mut substream(11, "init")).unwrap()
    }

    fn point(m: &QuaseModel, single: &Sentence, x: &Sentence, xp: &Sentence) -> TrainingPoint {
        let _ = m;
        TrainingPoint {
            single: RatedSentence::new(single.clone(), 4.0).unwrap(),
            pair: PseudoPair {
                x: RatedSentence::new(x.clone(), 1.0).unwrap(),
                x_prime: RatedSentence::new(xp.clone(), 5.0).unwrap(),
                jaccard: 0.6,
                rating_gap: 4.0,
                x_index: 0,
                x_prime_index: 1,
            },
            sampled_inc: Some("great".into()),
            sampled_dec: Some("terrible".into()),
        }
    }

    #[test]
    fn posteriors_are_positive_finite_and_deterministic() {
        let m = model();
        for s in sentences() {
            for p in [m.encode_outcome(&s).unwrap(), m.encode_content(&s).unwrap()] {
                assert!(p.sigma.iter().all(|&v| v > 0.0));
                assert!(p.mu.iter().all(|v| v.is_finite()));
            }
            assert_eq!(m.encode_outcome(&s).unwrap(), m.encode_outcome(&s).unwrap());
        }
        assert_eq!(m.encode_outcome(&sentences()[0]).unwrap().mu.len(), 4);
        assert_eq!(m.encode_content(&sentences()[0]).unwrap().mu.len(), 3);
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let m = model();
        let size = m.config().vocab_size;
        assert!(matches!(
            m.encode_posterior_ids(EncoderKind::Outcome, &[4, size]),
            Err(Error::UnknownId { id, .. }) if id == size
        ));
    }

    #[test]
    fn batched_encoding_matches_single() {
        let m = model();
        let s = sentences();
        let means = m.encode_means(&s);
        for (f, x) in means.iter().zip(&s) {
            let y = m.encode_outcome(x).unwrap().mu;
            for (a, b) in f.y.iter().zip(&y) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_distributions_normalize_and_greedy_terminates() {
        let m = model();
        let s = &sentences()[2];
        let y = m.encode_outcome(s).unwrap().mu;
        let z = m.encode_content(s).unwrap().mu;
        let dists = m.decode_distributions(&y, &z, s).unwrap();
        assert_eq!(dists.len(), s.len() + 1);
        for d in &dists {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        let (ids, _) = m.decode(&y, &z).unwrap();
        assert!(ids.len() <= m.config().max_decode_len);
        let (ids, _) = m.beam_decode(&y, &z, 3).unwrap();
        assert!(ids.len() <= m.config().max_decode_len);
        assert!(matches!(m.decode(&y[..2], &z), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn outcome_head_is_affine() {
        let m = model();
        let b = m.outcome_head().bias;
        assert_eq!(m.predict_outcome(&[0.0; 4]).unwrap(), b);
        let y = [0.3, -1.2, 0.5, 2.0];
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let lhs = m.predict_outcome(&y2).unwrap() - b;
        let rhs = 2.0 * (m.predict_outcome(&y).unwrap() - b);
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(m.predict_outcome(&[0.0; 3]).is_err());
    }

    #[test]
    fn align_delta_shape_and_determinism() {
        let m = model();
        let a = m.align_delta(Some("great"), None);
        assert_eq!(a.len(), 4);
        assert_eq!(a, m.align_delta(Some("great"), None));
        assert_ne!(a, m.align_delta(Some("terrible"), None));
    }

    #[test]
    fn reconstruction_loss_properties() {
        let mut m = model();
        for s in sentences() {
            assert!(m.loss_rec(&s) >= 0.0);
        }
        // zero output layer gives uniform distributions over the vocabulary
        let (w, b) = (m.params.dec_out_w, m.params.dec_out_b);
        m.store_mut().get_mut(w).fill(0.0);
        m.store_mut().get_mut(b).fill(0.0);
        let s = &sentences()[0];
        let steps = (s.len() + 1) as f64;
        let expected = steps * (m.config().vocab_size as f64).ln();
        assert!((m.loss_rec(s) - expected).abs() < 1e-9);
    }

    #[test]
    fn kl_closed_form_examples() {
        let m = model();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let mu = g.constant(Matrix::zeros((1, 4)));
        let ls = g.constant(Matrix::zeros((1, 4)));
        let kl = m.kl_loss(&mut g, mu, ls);
        assert_eq!(g.scalar(kl), 0.0);
        let mu = g.constant(ndarray::array![[1.0, 0.0, 0.0, 0.0]]);
        let kl = m.kl_loss(&mut g, mu, ls);
        assert!((g.scalar(kl) - 0.5).abs() < 1e-15);
        for s in sentences() {
            assert!(m.loss_kl(&s) >= 0.0);
        }
    }

    #[test]
    fn mse_examples() {
        let m = model();
        let s = &sentences()[0];
        let y = m.encode_outcome(s).unwrap().mu;
        let pred = m.predict_outcome(&y).unwrap();
        assert!(m.loss_mse(s, pred).abs() < 1e-20);
        assert!((m.loss_mse(s, pred + 2.0) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn pair_loss_identities() {
        let m = model();
        let s = sentences();
        let (x, xp) = (&s[0], &s[1]);
        // x = x': h = 0 so L_diff = |U[f]|^2
        let u = m.align_delta(Some("great"), Some("terrible"));
        let norm2: f64 = u.iter().map(|v| v * v).sum();
        assert!((m.loss_diff(x, x, Some("great"), Some("terrible")) - norm2).abs() < 1e-12);

        assert_eq!(m.loss_sim(x, x), 0.0);
        assert!((m.loss_sim(x, xp) - m.loss_sim(xp, x)).abs() < 1e-12);
        assert!(m.loss_sim(x, xp) >= 0.0);

        assert!((m.loss_dual(x, x) - 2.0 * m.loss_rec(x)).abs() < 1e-9);
        assert!(m.loss_dual(x, xp) >= 0.0);
    }

    #[test]
    fn diff_is_zero_when_alignment_matches() {
        let mut m = model();
        let s = sentences();
        let (x, xp) = (&s[0], &s[1]);
        let h: Vec<f64> = m
            .encode_outcome(x)
            .unwrap()
            .mu
            .iter()
            .zip(&m.encode_outcome(xp).unwrap().mu)
            .map(|(a, b)| a - b)
            .collect();
        let (w, b) = (m.params.u_out_w, m.params.u_out_b);
        m.store_mut().get_mut(w).fill(0.0);
        *m.store_mut().get_mut(b) = Matrix::from_shape_vec((1, h.len()), h).unwrap();
        assert!(m.loss_diff(x, xp, Some("great"), None).abs() < 1e-20);
    }

    #[test]
    fn joint_loss_is_linear_in_weights() {
        let m = model();
        let s = sentences();
        let p = point(&m, &s[2], &s[1], &s[0]);
        assert_eq!(m.loss_joint(&p, &LossWeights::ZERO), 0.0);
        let full = m.loss_joint(&p, &LossWeights::DEFAULT);
        assert!(full.is_finite());

        let batch = m.point_batch(std::slice::from_ref(&p));
        let b = m.evaluate_losses(&batch, LossSelection::ALL);
        let w = LossWeights::DEFAULT.values();
        let by_hand: f64 = b.terms().iter().zip(w).map(|((_, v), w)| v * w).sum();
        assert!((full - by_hand).abs() < 1e-9);

        let mut doubled = LossWeights::DEFAULT;
        doubled.lambda_sim *= 2.0;
        let delta = m.loss_joint(&p, &doubled) - full;
        assert!((delta - LossWeights::DEFAULT.lambda_sim * b.sim).abs() < 1e-9);
    }

    #[test]
    fn rec_and_dual_read_the_same_parameters() {
        let m = model();
        let s = sentences();
        let p = point(&m, &s[2], &s[1], &s[0]);
        let batch = m.point_batch(std::slice::from_ref(&p));
        let used = |sel: LossSelection| {
            let mut g = Graph::new(m.store());
            m.forward_losses(&mut g, &batch, sel, &mut Noise::Mean);
            g.used_params()
        };
        let none = LossSelection {
            rec: false,
            kl: false,
            mse: false,
            diff: false,
            sim: false,
            d_rec: false,
        };
        let rec = used(LossSelection { rec: true, ..none });
        let dual = used(LossSelection { d_rec: true, ..none });
        assert_eq!(rec, dual);
        let names: Vec<&str> = rec.iter().map(|&id| m.store().name(id)).collect();
        assert!(names.contains(&"enc_y.gru.wx") && names.contains(&"enc_z.gru.wx") && names.contains(&"dec.gru.wx"));
    }

    #[test]
    fn checkpoint_round_trip_preserves_losses() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        m.to_checkpoint(BTreeMap::from([("seed".to_string(), "11".to_string())]))
            .save(&path)
            .unwrap();
        let back = QuaseModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back.store(), m.store());
        let s = &sentences()[3];
        assert_eq!(back.loss_rec(s).to_bits(), m.loss_rec(s).to_bits());

        let text = std::fs::read_to_string(&path).unwrap().replace("\"version\":1", "\"version\":99");
        assert!(matches!(
            Checkpoint::from_json(&text),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
        assert!(Checkpoint::from_json("{\"format\":\"quase-checkpoint\"}").is_err());
    }
}
