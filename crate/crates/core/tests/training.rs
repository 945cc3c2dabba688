use quase_core::corpus::{RatedSentence, Sentence, Vocabulary};
use quase_core::model::{LossWeights, ModelConfig, QuaseModel};
use quase_core::pairing::{compose_datapoints, mine_pairs, PseudoPair};
use quase_core::seed::substream;
use quase_core::synth::{Grammar, SynthParams};
use quase_core::training::{
    probe_mae, sigmoid, stage1_tune, train, AnnealSchedule, AnnealedLoss, CheckpointSelector, DegradationMonitor, LogRecord, TrainConfig, TrainData,
};
use quase_core::Error;

struct Fixture {
    train: Vec<RatedSentence>,
    valid: Vec<RatedSentence>,
    pairs: Vec<PseudoPair>,
}

fn fixture(size: usize) -> Fixture {
    let g = Grammar::default();
    let params = SynthParams {
        size,
        ..SynthParams::default()
    };
    let data = g.generate(&params, &mut substream(21, "synth")).unwrap();
    let cut = size * 4 / 5;
    let train = data[..cut].to_vec();
    let valid = data[cut..].to_vec();
    let pairs = mine_pairs(&train, 0.5, 2.0);
    Fixture { train, valid, pairs }
}

fn small_model(data: &[RatedSentence], seed: u64) -> QuaseModel {
    let sents: Vec<Sentence> = data.iter().map(|r| r.sentence.clone()).collect();
    let vocab = Vocabulary::build(&sents, 1).unwrap();
    let cfg = ModelConfig {
        d_y: 4,
        d_z: 4,
        embed_dim: 8,
        hidden_dim: 16,
        align_hidden_dim: 8,
        vocab_size: vocab.len(),
        max_decode_len: 10,
    };
    QuaseModel::new(cfg, vocab, &mut substream(seed, "init")).unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        seed: 5,
        epochs: 4,
        stage1_epochs: 2,
        batch_size: 16,
        points_per_epoch: Some(64),
        eval_every: 2,
        probe_size: 8,
        schedule: AnnealSchedule {
            midpoint: 3.0,
            steepness: 0.5,
            ..AnnealSchedule::default()
        },
        ..TrainConfig::default()
    }
}

fn values<'a>(log: &'a [LogRecord], name: &'a str) -> impl Iterator<Item = &'a LogRecord> + 'a {
    log.iter().filter(move |r| r.name == name)
}

#[test]
fn schedule_shape() {
    let s = AnnealSchedule::default();
    let base = LossWeights::stage1(0.75);
    let traj = s.trajectory(&base, 4000);
    for w in &traj {
        assert!(w.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(w.lambda_rec + w.lambda_mse, 1.0);
    }
    for pair in traj.windows(2) {
        assert!(pair[1].lambda_kl >= pair[0].lambda_kl);
    }
    let mid = s.weights_at(&base, s.midpoint, &[None; 4]);
    assert!((mid.lambda_kl - 0.5 * s.targets.lambda_kl).abs() < 1e-12);
    assert!((mid.lambda_d_rec - 0.5 * s.targets.lambda_d_rec).abs() < 1e-12);
    let end = traj.last().unwrap();
    assert!((end.lambda_sim - s.targets.lambda_sim).abs() < 1e-6);
    assert_eq!(sigmoid(0.0), 0.5);
    assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
}

#[test]
fn staggered_order_and_unlisted_losses() {
    let s = AnnealSchedule {
        spacing: 100.0,
        order: vec![vec![AnnealedLoss::Kl], vec![AnnealedLoss::Sim]],
        ..AnnealSchedule::default()
    };
    assert!(s.factor(AnnealedLoss::Kl, s.midpoint) > s.factor(AnnealedLoss::Sim, s.midpoint));
    assert_eq!(s.factor(AnnealedLoss::Sim, s.midpoint + 100.0), 0.5);
    assert_eq!(s.factor(AnnealedLoss::DRec, 1e6), 0.0);
    let dup = AnnealSchedule {
        order: vec![vec![AnnealedLoss::Kl, AnnealedLoss::Kl]],
        ..AnnealSchedule::default()
    };
    assert!(dup.validate().is_err());
}

#[test]
fn degradation_monitor() {
    let mut never = DegradationMonitor::new(0.5, f64::INFINITY, 3);
    for i in 0..20 {
        assert!(!never.observe(1.0 + i as f64, 1.0 + i as f64));
    }
    let mut m = DegradationMonitor::new(1.0, 0.02, 3);
    assert!(!m.observe(1.0, 1.0));
    assert!(!m.observe(1.1, 1.0));
    assert!(!m.observe(1.0, 1.0)); // streak broken
    assert!(!m.observe(1.1, 1.0));
    assert!(!m.observe(1.1, 1.0));
    assert!(m.observe(1.0, 1.2));
    let mut flat = DegradationMonitor::new(1.0, 0.02, 1);
    assert!(!flat.observe(1.0, 1.0));
    assert!(!flat.observe(1.019, 1.0));
}

#[test]
fn stage_one_constraint_and_frozen_weights() {
    let f = fixture(300);
    let data = TrainData {
        train: &f.train,
        pairs: &f.pairs,
        valid: &f.valid,
    };
    let lex = Grammar::default().lexicon();
    let mut cfg = quick_config();
    // any rise freezes immediately
    cfg.schedule.degradation_tolerance = 0.0;
    cfg.schedule.patience = 1;
    cfg.schedule.smoothing = 1.0;
    cfg.schedule.midpoint = 6.0;
    cfg.schedule.targets.lambda_kl = 1.0;
    cfg.eval_every = 1;
    cfg.epochs = 10;
    cfg.learning_rate = 0.05;
    let out = train(small_model(&f.train, 1), &data, &lex, &cfg).unwrap();
    let rec: Vec<&LogRecord> = values(&out.log, "lambda_rec").collect();
    let mse: Vec<&LogRecord> = values(&out.log, "lambda_mse").collect();
    let kl: Vec<&LogRecord> = values(&out.log, "lambda_kl").collect();
    let stage2_start = 2 * 64 / 16;
    for ((r, m), k) in rec.iter().zip(&mse).zip(&kl) {
        assert_eq!(r.value + m.value, 1.0);
        if r.step <= stage2_start {
            assert_eq!(k.value, 0.0);
        }
    }
    let freeze = values(&out.log, "freeze_kl").next().expect("zero tolerance freezes");
    for w in kl.iter().filter(|w| w.step > freeze.step) {
        assert_eq!(w.value, freeze.value);
    }
    assert_eq!(out.state.weights.lambda_kl, freeze.value);
    assert!(out.state.is_frozen(AnnealedLoss::Kl));
    let maes: Vec<f64> = values(&out.log, "valid_mae").map(|r| r.value).collect();
    let best = maes.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(out.state.lowest_validation_mae, Some(best));
    let kept = out.state.best_validation_mae.unwrap();
    assert!(maes.contains(&kept));
    assert!(kept <= best + cfg.selection_tolerance);
}

#[test]
fn no_freeze_reaches_targets() {
    let f = fixture(200);
    let data = TrainData {
        train: &f.train,
        pairs: &f.pairs,
        valid: &f.valid,
    };
    let lex = Grammar::default().lexicon();
    let mut cfg = quick_config();
    cfg.schedule.degradation_tolerance = f64::INFINITY;
    cfg.schedule.midpoint = 1.0;
    cfg.schedule.steepness = 2.0;
    cfg.probe_size = 0;
    let out = train(small_model(&f.train, 1), &data, &lex, &cfg).unwrap();
    let w = out.state.weights;
    let t = cfg.schedule.targets;
    assert!(out.state.frozen.iter().all(Option::is_none));
    assert!((w.lambda_kl - t.lambda_kl).abs() < 1e-3);
    assert!((w.lambda_diff - t.lambda_diff).abs() < 1e-3);
    assert!((w.lambda_sim - t.lambda_sim).abs() < 1e-3);
    assert!((w.lambda_d_rec - t.lambda_d_rec).abs() < 1e-3);
}

#[test]
fn fixed_seed_reproduces_the_trajectory() {
    let f = fixture(200);
    let data = TrainData {
        train: &f.train,
        pairs: &f.pairs,
        valid: &f.valid,
    };
    let lex = Grammar::default().lexicon();
    let cfg = quick_config();
    let a = train(small_model(&f.train, 2), &data, &lex, &cfg).unwrap();
    let b = train(small_model(&f.train, 2), &data, &lex, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.last.store().to_named(), b.last.store().to_named());
    let mut other = cfg.clone();
    other.seed = 6;
    let c = train(small_model(&f.train, 2), &data, &lex, &other).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn checkpoint_reload_preserves_loss() {
    let f = fixture(200);
    let data = TrainData {
        train: &f.train,
        pairs: &f.pairs,
        valid: &f.valid,
    };
    let lex = Grammar::default().lexicon();
    let out = train(small_model(&f.train, 2), &data, &lex, &quick_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    out.best.to_checkpoint(Default::default()).save(&path).unwrap();
    let back = QuaseModel::from_checkpoint(&quase_core::model::Checkpoint::load(&path).unwrap()).unwrap();
    let points = compose_datapoints(&f.train, &f.pairs[..4], &mut substream(0, "p")).unwrap();
    for p in &points {
        assert_eq!(out.best.loss_joint(p, &LossWeights::DEFAULT), back.loss_joint(p, &LossWeights::DEFAULT));
    }
}

#[test]
fn non_finite_loss_aborts() {
    let f = fixture(100);
    let data = TrainData {
        train: &f.train,
        pairs: &f.pairs,
        valid: &[],
    };
    let lex = Grammar::default().lexicon();
    let mut model = small_model(&f.train, 2);
    let id = model.store().id_of("f.b").unwrap();
    model.store_mut().get_mut(id)[[0, 0]] = f64::NAN;
    let err = train(model, &data, &lex, &quick_config()).err().unwrap();
    match err {
        Error::NonFiniteLoss { step, detail } => {
            assert_eq!(step, 0);
            assert!(detail.contains("mse"), "{detail}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn stage_one_grid_search() {
    let f = fixture(200);
    let data = TrainData {
        train: &f.train,
        pairs: &f.pairs,
        valid: &f.valid,
    };
    let lex = Grammar::default().lexicon();
    let cfg = quick_config();
    let model = small_model(&f.train, 4);

    let (w, _) = stage1_tune(&model, &data, &lex, &cfg, &[0.75]).unwrap();
    assert_eq!((w.lambda_rec, w.lambda_mse), (0.75, 0.25));
    assert_eq!(w.lambda_kl + w.lambda_diff + w.lambda_sim + w.lambda_d_rec, 0.0);
    let (w, _) = stage1_tune(&model, &data, &lex, &cfg, &[1.0]).unwrap();
    assert_eq!(w.lambda_mse, 0.0);
    assert!(matches!(stage1_tune(&model, &data, &lex, &cfg, &[]), Err(Error::EmptyGrid)));

    // oracle: train each grid point separately and take the argmin
    let grid = [0.25, 0.5, 0.75];
    let probe: Vec<Sentence> = f.valid.iter().take(cfg.probe_size).map(|r| r.sentence.clone()).collect();
    let measured: Vec<f64> = grid
        .iter()
        .map(|&lambda_rec| {
            let c = TrainConfig {
                lambda_rec,
                epochs: cfg.stage1_epochs,
                stage1_epochs: usize::MAX,
                ..cfg.clone()
            };
            let out = train(model.clone(), &data, &lex, &c).unwrap();
            probe_mae(&out.last, &probe, &lex, &cfg.probe_targets).unwrap()
        })
        .collect();
    let mut best = 0;
    for k in 1..grid.len() {
        if measured[k] < measured[best] {
            best = k;
        }
    }
    let (w, scores) = stage1_tune(&model, &data, &lex, &cfg, &grid).unwrap();
    assert_eq!(scores.iter().map(|s| s.1).collect::<Vec<_>>(), measured);
    assert_eq!(w.lambda_rec, grid[best]);
}

#[test]
fn checkpoint_selection_trades_mae_slack_for_reconstruction() {
    let mut s = CheckpointSelector::new(0.05);
    assert!(s.consider(0.5, 9.0));
    assert!(s.consider(0.2, 9.5), "an inadmissible keeper is always replaced");
    assert!(!s.consider(0.3, 1.0), "outside the slack");
    assert!(s.consider(0.24, 8.0));
    assert!(!s.consider(0.21, 8.5), "admissible but reconstructs worse");
    assert!(s.consider(0.0, 12.0), "the new lowest evicts 0.24");
    assert!(s.consider(0.04, 3.0));
    assert_eq!((s.kept_mae(), s.lowest_mae()), (Some(0.04), Some(0.0)));

    let mut strict = CheckpointSelector::new(0.0);
    assert!(strict.consider(0.3, 5.0));
    assert!(!strict.consider(0.4, 1.0));
    assert!(strict.consider(0.3, 4.0));
    assert!(strict.consider(0.1, 9.0));
}
