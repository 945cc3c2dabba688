//! The pipeline stages. Each stage reads the files of the stage before it,
//! checks that they were produced by the current configuration, and writes
//! its own artifacts stamped with its config hash and the root seed.

use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use quase_core::artifact::{read_header, ArtifactHeader};
use quase_core::corpus::{load_dataset, load_raw_sentences, rate_all, save_dataset, tokenize, LexiconScorer, RatedSentence, Sentence, Vocabulary};
use quase_core::editing::{edit_batch, EditRequest, Target};
use quase_core::eval::{evaluate, run_ablation, AblationSetup, EvalConfig, LossSubset};
use quase_core::model::{Checkpoint, QuaseModel};
use quase_core::pairing::{load_pairs, mine_pairs, save_pairs};
use quase_core::seed::substream;
use quase_core::synth::Grammar;
use quase_core::training::{save_log, stage1_tune, train, TrainConfig, TrainData};
use quase_core::Error;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::{file_digest, fingerprint, json, Loaded};
use crate::error::{CliError, CliResult};

pub const RAW: &str = "raw.txt";
pub const LEXICON: &str = "lexicon.tsv";
pub const GRAMMAR: &str = "grammar.txt";
pub const SYNTH_DATASET: &str = "synth_dataset.tsv";
pub const SYNTH_PAIRS: &str = "synth_pairs.tsv";
pub const TRAIN: &str = "train.tsv";
pub const VALID: &str = "valid.tsv";
pub const TEST: &str = "test.tsv";
pub const PAIRS: &str = "pairs.tsv";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.json";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const NAN_DUMP: &str = "nan_dump.txt";

fn header(ctx: &Loaded, stage: &str, hash: &str) -> ArtifactHeader {
    ArtifactHeader::new()
        .with("stage", stage)
        .with("config_hash", hash)
        .with("seed", ctx.config.seed)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))
}

fn expect_hash(path: &Path, expected: &str) -> CliResult<()> {
    let h = read_header(path)?;
    match h.get("config_hash") {
        Some(found) if found == expected => Ok(()),
        found => Err(CliError::mismatch(path, expected, found)),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn grammar(ctx: &Loaded) -> CliResult<Grammar> {
    match &ctx.config.paths.grammar {
        Some(p) => {
            let p = ctx.resolve(p);
            let text = fs::read_to_string(&p).map_err(|e| CliError::missing(&p, e))?;
            Ok(Grammar::parse(&text)?)
        }
        None => Ok(Grammar::default()),
    }
}

fn raw_path(ctx: &Loaded) -> PathBuf {
    ctx.config.paths.raw.as_deref().map_or_else(|| ctx.work(RAW), |p| ctx.resolve(p))
}

fn lexicon_path(ctx: &Loaded) -> PathBuf {
    ctx.config.paths.lexicon.as_deref().map_or_else(|| ctx.work(LEXICON), |p| ctx.resolve(p))
}

pub fn synth_hash(ctx: &Loaded, g: &Grammar) -> String {
    fingerprint(&[
        ("stage", json(&"synth")),
        ("seed", json(&ctx.config.seed)),
        ("synth", json(&ctx.config.synth)),
        ("grammar", json(&g.to_text())),
    ])
}

pub fn prepare_hash(ctx: &Loaded) -> CliResult<String> {
    Ok(fingerprint(&[
        ("stage", json(&"prepare")),
        ("seed", json(&ctx.config.seed)),
        ("prepare", json(&ctx.config.prepare)),
        ("raw", json(&file_digest(&raw_path(ctx))?)),
        ("lexicon", json(&file_digest(&lexicon_path(ctx))?)),
    ]))
}

pub fn mine_hash(ctx: &Loaded) -> CliResult<String> {
    Ok(fingerprint(&[
        ("stage", json(&"mine")),
        ("mining", json(&ctx.config.mining)),
        ("upstream", json(&prepare_hash(ctx)?)),
    ]))
}

pub fn train_hash(ctx: &Loaded) -> CliResult<String> {
    Ok(fingerprint(&[
        ("stage", json(&"train")),
        ("seed", json(&ctx.config.seed)),
        ("model", json(&ctx.config.model)),
        ("train", json(&ctx.config.train)),
        ("tune", json(&ctx.config.tune)),
        ("upstream", json(&mine_hash(ctx)?)),
    ]))
}

pub fn eval_hash(ctx: &Loaded) -> CliResult<String> {
    Ok(fingerprint(&[
        ("stage", json(&"eval")),
        ("eval", json(&ctx.config.eval)),
        ("upstream", json(&train_hash(ctx)?)),
    ]))
}

pub fn ablate_hash(ctx: &Loaded) -> CliResult<String> {
    Ok(fingerprint(&[
        ("stage", json(&"ablate")),
        ("seed", json(&ctx.config.seed)),
        ("ablation", json(&ctx.config.ablation)),
        ("eval", json(&ctx.config.eval)),
        ("model", json(&ctx.config.model)),
        ("train", json(&ctx.config.train)),
        ("upstream", json(&mine_hash(ctx)?)),
    ]))
}

fn save_raw(path: &Path, sentences: &[Sentence], header: &ArtifactHeader) -> CliResult<()> {
    let file = fs::File::create(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| CliError::new("io", format!("{}: {e}", path.display()));
    header.write_to(&mut w).map_err(io)?;
    for s in sentences {
        writeln!(w, "{s}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Generates a rated synthetic corpus with its lexicon, grammar and mined pairs.
pub fn cmd_synth(ctx: &Loaded) -> CliResult<String> {
    let g = grammar(ctx)?;
    let hash = synth_hash(ctx, &g);
    let h = header(ctx, "synth", &hash);
    let data = g.generate(&ctx.config.synth.params(), &mut substream(ctx.config.seed, "synth"))?;
    ensure_dir(&ctx.work(""))?;
    let sentences: Vec<Sentence> = data.iter().map(|r| r.sentence.clone()).collect();
    save_raw(&ctx.work(RAW), &sentences, &h)?;
    g.lexicon().save(&ctx.work(LEXICON), &h)?;
    write_text(&ctx.work(GRAMMAR), &g.to_text())?;
    save_dataset(&ctx.work(SYNTH_DATASET), &data, &h)?;
    let m = &ctx.config.mining;
    let pairs = mine_pairs(&data, m.ji_min, m.gap_min);
    save_pairs(&ctx.work(SYNTH_PAIRS), &pairs, &h)?;
    Ok(format!("synth\tsentences={}\tpairs={}\thash={hash}", data.len(), pairs.len()))
}

/// Rates the raw corpus with the lexicon and splits it into train/valid/test.
pub fn cmd_prepare(ctx: &Loaded) -> CliResult<String> {
    let hash = prepare_hash(ctx)?;
    let lexicon = LexiconScorer::load(&lexicon_path(ctx))?;
    let sentences = load_raw_sentences(&raw_path(ctx))?;
    let mut rated = rate_all(&lexicon, sentences)?;
    let p = &ctx.config.prepare;
    let frac_ok = |f: f64| (0.0..1.0).contains(&f);
    if !frac_ok(p.valid_fraction) || !frac_ok(p.test_fraction) || p.valid_fraction + p.test_fraction >= 1.0 {
        return Err(CliError::config("valid_fraction + test_fraction must lie in [0, 1)"));
    }
    rated.shuffle(&mut substream(ctx.config.seed, "split"));
    let n = rated.len();
    let n_valid = (n as f64 * p.valid_fraction).round() as usize;
    let n_test = (n as f64 * p.test_fraction).round() as usize;
    if n_valid + n_test >= n {
        return Err(CliError::new("invalid-input", format!("corpus of {n} sentences is too small to split")));
    }
    let test = rated.split_off(n - n_test);
    let valid = rated.split_off(n - n_test - n_valid);
    let h = header(ctx, "prepare", &hash);
    ensure_dir(&ctx.work(""))?;
    save_dataset(&ctx.work(TRAIN), &rated, &h)?;
    save_dataset(&ctx.work(VALID), &valid, &h)?;
    save_dataset(&ctx.work(TEST), &test, &h)?;
    Ok(format!(
        "prepare\ttrain={}\tvalid={}\ttest={}\thash={hash}",
        rated.len(),
        valid.len(),
        test.len()
    ))
}

fn load_split(ctx: &Loaded, name: &str) -> CliResult<Vec<RatedSentence>> {
    let path = ctx.work(name);
    expect_hash(&path, &prepare_hash(ctx)?)?;
    Ok(load_dataset(&path)?)
}

/// Mines pseudo-parallel pairs from the training split.
pub fn cmd_mine(ctx: &Loaded) -> CliResult<String> {
    let train = load_split(ctx, TRAIN)?;
    let hash = mine_hash(ctx)?;
    let m = &ctx.config.mining;
    let pairs = mine_pairs(&train, m.ji_min, m.gap_min);
    save_pairs(&ctx.work(PAIRS), &pairs, &header(ctx, "mine", &hash))?;
    Ok(format!("mine\tpairs={}\thash={hash}", pairs.len()))
}

struct Inputs {
    train: Vec<RatedSentence>,
    valid: Vec<RatedSentence>,
    pairs: Vec<quase_core::pairing::PseudoPair>,
    lexicon: LexiconScorer,
    vocab: Vocabulary,
}

fn training_inputs(ctx: &Loaded) -> CliResult<Inputs> {
    let train = load_split(ctx, TRAIN)?;
    let valid = load_split(ctx, VALID)?;
    let pairs_path = ctx.work(PAIRS);
    expect_hash(&pairs_path, &mine_hash(ctx)?)?;
    let pairs = load_pairs(&pairs_path, &train)?;
    let lexicon = LexiconScorer::load(&lexicon_path(ctx))?;
    let sentences: Vec<Sentence> = train.iter().map(|r| r.sentence.clone()).collect();
    let vocab = Vocabulary::build(&sentences, ctx.config.model.min_token_freq)?;
    Ok(Inputs {
        train,
        valid,
        pairs,
        lexicon,
        vocab,
    })
}

/// Runs the optional stage-1 grid search, then the full two-stage training.
pub fn cmd_train(ctx: &Loaded) -> CliResult<String> {
    let inputs = training_inputs(ctx)?;
    let hash = train_hash(ctx)?;
    let seed = ctx.config.seed;
    let model_cfg = ctx.config.model.config(inputs.vocab.len());
    let model = QuaseModel::new(model_cfg, inputs.vocab.clone(), &mut substream(seed, "init"))?;
    let data = TrainData {
        train: &inputs.train,
        pairs: &inputs.pairs,
        valid: &inputs.valid,
    };
    let mut train_cfg = ctx.config.train.clone();
    let mut summary = String::from("train");
    if !ctx.config.tune.grid.is_empty() {
        let (w, scores) = stage1_tune(&model, &data, &inputs.lexicon, &train_cfg, &ctx.config.tune.grid)?;
        train_cfg.lambda_rec = w.lambda_rec;
        for (l, mae) in scores {
            summary.push_str(&format!("\ttune[{l}]={mae:.4}"));
        }
    }
    let out = match train(model, &data, &inputs.lexicon, &train_cfg) {
        Ok(out) => out,
        Err(Error::NonFiniteLoss { step, detail }) => {
            let dump = ctx.work(NAN_DUMP);
            write_text(&dump, &format!("step\t{step}\ndetail\t{detail}\nconfig_hash\t{hash}\nseed\t{seed}\n"))?;
            return Err(CliError::new(
                "non-finite",
                format!("non-finite loss at step {step}; diagnostics in {}", dump.display()),
            ));
        }
        Err(e) => return Err(e.into()),
    };
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("config_hash".to_string(), hash.clone());
    meta.insert("seed".to_string(), seed.to_string());
    meta.insert("stage".to_string(), "train".to_string());
    meta.insert("lambda_rec".to_string(), train_cfg.lambda_rec.to_string());
    if let Some(m) = out.state.best_validation_mae {
        meta.insert("best_validation_mae".to_string(), m.to_string());
    }
    out.best.to_checkpoint(meta.clone()).save(&ctx.work(CHECKPOINT))?;
    meta.insert("stage".to_string(), "train-last".to_string());
    out.last.to_checkpoint(meta).save(&ctx.work(LAST_CHECKPOINT))?;
    save_log(&ctx.work(TRAIN_LOG), &out.log, &header(ctx, "train", &hash))?;
    summary.push_str(&format!(
        "\tsteps={}\tbest_validation_mae={}\thash={hash}",
        out.state.step,
        out.state.best_validation_mae.map_or("-".into(), |m| format!("{m:.4}"))
    ));
    Ok(summary)
}

fn load_trained(ctx: &Loaded, expected: &str) -> CliResult<QuaseModel> {
    let path = ctx.work(CHECKPOINT);
    let ck = Checkpoint::load(&path)?;
    let found = ck.meta.get("config_hash").map(String::as_str);
    if found != Some(expected) {
        return Err(CliError::mismatch(&path, expected, found));
    }
    Ok(QuaseModel::from_checkpoint(&ck)?)
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    config_hash: &'a str,
    seed: u64,
    report: &'a T,
}

fn write_report<T: Serialize>(ctx: &Loaded, hash: &str, stem: &str, table: &str, report: &T) -> CliResult<PathBuf> {
    let dir = ctx.results_root().join(hash);
    ensure_dir(&dir)?;
    let stamp = format!("# config_hash={hash}\n# seed={}\n", ctx.config.seed);
    write_text(&dir.join(format!("{stem}.txt")), &format!("{stamp}{table}"))?;
    let body = serde_json::to_string_pretty(&Stamped {
        config_hash: hash,
        seed: ctx.config.seed,
        report,
    })
    .expect("report serializes");
    write_text(&dir.join(format!("{stem}.json")), &format!("{body}\n"))?;
    Ok(dir)
}

/// Edits the test split toward every target and writes the metric report.
pub fn cmd_eval(ctx: &Loaded) -> CliResult<String> {
    let model = load_trained(ctx, &train_hash(ctx)?)?;
    let test = load_split(ctx, TEST)?;
    let lexicon = LexiconScorer::load(&lexicon_path(ctx))?;
    let report = evaluate(&model, &test, &lexicon, &ctx.config.eval)?;
    let hash = eval_hash(ctx)?;
    let table = report.to_table();
    let dir = write_report(ctx, &hash, "eval", &table, &report)?;
    Ok(format!("{table}report\t{}", dir.display()))
}

/// Trains one model per pair-loss subset and tabulates MAE by target.
pub fn cmd_ablate(ctx: &Loaded) -> CliResult<String> {
    let inputs = training_inputs(ctx)?;
    let test = load_split(ctx, TEST)?;
    let model_cfg = ctx.config.model.config(inputs.vocab.len());
    let init = |seed: u64| QuaseModel::new(model_cfg.clone(), inputs.vocab.clone(), &mut substream(seed, "init"));
    let setup = AblationSetup {
        data: TrainData {
            train: &inputs.train,
            pairs: &inputs.pairs,
            valid: &inputs.valid,
        },
        test: &test,
        scorer: &inputs.lexicon,
        train: TrainConfig {
            points_per_epoch: ctx.config.ablation.points_per_epoch.or(ctx.config.train.points_per_epoch),
            ..ctx.config.train.clone()
        },
        eval: EvalConfig {
            targets: ctx.config.ablation.targets.clone(),
            limit: ctx.config.ablation.limit,
            ..ctx.config.eval.clone()
        },
        init: &init,
    };
    let report = run_ablation(&setup, &LossSubset::power_set());
    let hash = ablate_hash(ctx)?;
    let table = report.to_table();
    let dir = write_report(ctx, &hash, "ablation", &table, &report)?;
    Ok(format!("{table}report\t{}", dir.display()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOptions {
    pub checkpoint: Option<PathBuf>,
    pub target: Target,
    pub log_tau: Option<f64>,
    pub beam: Option<usize>,
}

/// Reads one sentence per input line and writes `x_star<TAB>predicted_outcome`.
pub fn cmd_edit<R: BufRead, W: Write>(ctx: &Loaded, opts: &EditOptions, input: R, mut output: W) -> CliResult<usize> {
    let path = opts.checkpoint.clone().unwrap_or_else(|| ctx.work(CHECKPOINT));
    let model = QuaseModel::from_checkpoint(&Checkpoint::load(&path)?)?;
    let e = &ctx.config.edit;
    let mut lines = Vec::new();
    for line in input.lines() {
        lines.push(line.map_err(|err| CliError::new("io", format!("stdin: {err}")))?);
    }
    let reqs: Vec<(usize, EditRequest)> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut req = EditRequest::new(tokenize(l)?, opts.target);
            req.log_tau = opts.log_tau.unwrap_or(e.log_tau);
            req.beam = opts.beam.unwrap_or(e.beam);
            req.search = e.search();
            Ok((i, req))
        })
        .collect::<Result<_, Error>>()?;
    let only: Vec<EditRequest> = reqs.iter().map(|(_, r)| r.clone()).collect();
    let results = edit_batch(&model, &only)?;
    let mut by_line: Vec<Option<String>> = vec![None; lines.len()];
    for ((i, _), r) in reqs.iter().zip(&results) {
        by_line[*i] = Some(format!("{}\t{}", r.x_star, r.predicted_outcome));
    }
    let io = |err: std::io::Error| CliError::new("io", format!("stdout: {err}"));
    for l in &by_line {
        writeln!(output, "{}", l.as_deref().unwrap_or("")).map_err(io)?;
    }
    output.flush().map_err(io)?;
    Ok(results.len())
}
