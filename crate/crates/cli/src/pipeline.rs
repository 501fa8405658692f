//! Pipeline stages over a run directory:
//! train -> collect -> prune -> finetune -> eval, each reading the previous
//! stage's artifacts from disk.
//!
//! ```text
//! run/config.toml        effective config
//! run/normalizer.json    input normalization fitted on the training split
//! run/train/             trained checkpoint (+ log.jsonl)
//! run/scores.txt         finalized channel scores
//! run/pruned/            pruned checkpoint (+ plan.json, costs.json)
//! run/finetuned/         fine-tuned checkpoint (+ log.jsonl)
//! run/summary.json       evaluated costs and accuracies
//! ```

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use cpsca_core::baselines::{score, Scorer};
use cpsca_core::checkpoint::{self, sha256_hex, Manifest};
use cpsca_core::data::{Dataset, Normalizer};
use cpsca_core::metrics::{count_flops, count_params, CostReport, FlopRates};
use cpsca_core::model::{remove_attention, ModelGraph};
use cpsca_core::pruner::{apply_plan, plan_pruning, validate_plan};
use cpsca_core::stats::ScoreTable;
use cpsca_core::train::{evaluate, train, TrainConfig, TrainOutcome};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const NORMALIZER_FILE: &str = "normalizer.json";
pub const TRAIN_DIR: &str = "train";
pub const SCORES_FILE: &str = "scores.txt";
pub const PRUNED_DIR: &str = "pruned";
pub const FINETUNED_DIR: &str = "finetuned";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LOG_FILE: &str = "log.jsonl";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn require(run: &Path, rel: &str, stage: &'static str) -> Result<PathBuf> {
    let p = run.join(rel);
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::MissingStage { stage, run: run.to_path_buf() })
    }
}

/// Effective config stored in a run directory.
pub fn run_config(run: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::read(&require(run, CONFIG_FILE, "train")?)
}

fn save_config(run: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write(&run.join(CONFIG_FILE), &cfg.to_toml()?)
}

fn normalizer(run: &Path) -> Result<Normalizer> {
    Ok(serde_json::from_str(&read(&require(run, NORMALIZER_FILE, "train")?)?)?)
}

/// Parameter and FLOP totals at the 32x32 CIFAR input.
pub fn costs(model: &ModelGraph) -> Result<CostReport> {
    let mut c = count_flops(model, model.meta.input_shape, &FlopRates::default())?;
    c.params = count_params(model).params;
    Ok(c)
}

fn train_with_log(model: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig, dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(LOG_FILE);
    let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut log = BufWriter::new(file);
    let out = train(model, data, cfg, Some(&mut log))?;
    std::io::Write::flush(&mut log).map_err(|e| CliError::io(&path, e))?;
    Ok(out)
}

fn manifest(
    cfg: &ExperimentConfig,
    epoch: usize,
    seed: u64,
    out: &TrainOutcome,
    model: &ModelGraph,
) -> Result<Manifest> {
    let mut m = Manifest::new(cfg.dataset.name.to_string(), epoch, seed, cfg.hash()?);
    if let Some(last) = out.history.iter().rev().find(|r| r.split == "train") {
        m.metrics.insert("train_loss".into(), last.loss);
        m.metrics.insert("train_accuracy".into(), last.accuracy);
    }
    if let Some(acc) = out.final_test_acc {
        m.metrics.insert("test_accuracy".into(), acc);
    }
    let c = costs(model)?;
    m.metrics.insert("params".into(), c.params as f64);
    m.metrics.insert("flops".into(), c.flops as f64);
    Ok(m)
}

/// Digest of a manifest's metrics: equal across reruns with the same seed.
pub fn metrics_digest(m: &Manifest) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(&m.metrics)?.as_bytes()))
}

/// Builds the model (with any configured attention), trains it and writes
/// the run directory. Returns the run directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let run = cfg.out_dir.clone();
    fs::create_dir_all(&run).map_err(|e| CliError::io(&run, e))?;
    save_config(&run, cfg)?;
    let data = cfg.dataset.load()?;
    let mut model = cfg.model.build(cfg.seed)?;
    let dir = run.join(TRAIN_DIR);
    let out = train_with_log(&mut model, &data, &cfg.train, &dir)?;
    write(&run.join(NORMALIZER_FILE), &serde_json::to_string_pretty(&out.normalizer)?)?;
    let m = manifest(cfg, cfg.train.epochs, cfg.train.seed, &out, &model)?;
    checkpoint::save(&dir, &model, &m)?;
    Ok(run)
}

/// Scores every prunable layer of the trained model with the configured
/// scorer and persists the finalized table.
pub fn cmd_collect(run: &Path, scorer: Option<Scorer>) -> Result<ScoreTable> {
    let mut cfg = run_config(run)?;
    if let Some(s) = scorer {
        let p = cfg.prune.get_or_insert_with(|| crate::config::PruneConfig::new(s, 0.0));
        p.scorer = s;
        cfg.validate()?;
        save_config(run, &cfg)?;
    }
    let p = cfg.prune.clone().ok_or_else(|| CliError::Usage("no [prune] section and no --scorer given".into()))?;
    let (mut model, _) = checkpoint::load(&require(run, TRAIN_DIR, "train")?)?;
    let norm = normalizer(run)?;
    let table = if p.scorer.needs_attention() {
        let data = cfg.dataset.load()?;
        let split = match p.stats_images {
            Some(n) => data.subset(n, None)?.train,
            None => data.train,
        };
        score(p.scorer, &mut model, &split, &norm, p.stats_batch_size)?
    } else {
        score(p.scorer, &mut model, &Default::default(), &norm, p.stats_batch_size)?
    };
    write(&run.join(SCORES_FILE), &table.to_text())?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneCosts {
    /// Trained model with its attention blocks removed.
    pub before: CostReport,
    pub after: CostReport,
}

/// Removes attention, plans with the stored scores and the configured
/// ratios, validates, applies and saves the pruned model.
pub fn cmd_prune(run: &Path, ratios: Option<cpsca_core::pruner::Ratios>) -> Result<PruneCosts> {
    let mut cfg = run_config(run)?;
    if let Some(r) = ratios {
        let p = cfg.prune.as_mut().ok_or_else(|| CliError::Usage("no [prune] section in the run config".into()))?;
        p.ratio = r.uniform;
        p.overrides = r.overrides;
        cfg.validate()?;
        save_config(run, &cfg)?;
    }
    let p = cfg.prune.clone().ok_or_else(|| CliError::Usage("no [prune] section in the run config".into()))?;
    let table = ScoreTable::from_text(&read(&require(run, SCORES_FILE, "collect")?)?)?;
    if table.scorer != p.scorer.name() {
        return Err(CliError::Usage(format!(
            "{SCORES_FILE} was collected with {}, config asks for {}; rerun `cpsca collect`",
            table.scorer, p.scorer
        )));
    }
    let (model, trained) = checkpoint::load(&require(run, TRAIN_DIR, "train")?)?;
    let model = remove_attention(model);
    let before = costs(&model)?;
    let plan = plan_pruning(&table, &p.ratios())?;
    let report = validate_plan(&model, &plan);
    if !report.is_legal() {
        let lines: Vec<String> =
            report.violations.iter().map(|v| format!("{}: {} ({})", v.layer, v.kind.label(), v.detail)).collect();
        return Err(CliError::Core(cpsca_core::Error::Plan(lines.join("; "))));
    }
    let pruned = apply_plan(model, &plan)?;
    let after = costs(&pruned)?;
    let dir = run.join(PRUNED_DIR);
    let mut m = Manifest::new(trained.dataset.clone(), trained.epoch, trained.seed, cfg.hash()?);
    m.metrics.insert("params".into(), after.params as f64);
    m.metrics.insert("flops".into(), after.flops as f64);
    checkpoint::save(&dir, &pruned, &m)?;
    write(&dir.join("plan.json"), &plan.to_json()?)?;
    let c = PruneCosts { before, after };
    write(&dir.join("costs.json"), &serde_json::to_string_pretty(&c)?)?;
    Ok(c)
}

/// Fine-tunes the pruned model with the `finetune` settings.
pub fn cmd_finetune(run: &Path) -> Result<Manifest> {
    let cfg = run_config(run)?;
    let (mut model, _) = checkpoint::load(&require(run, PRUNED_DIR, "prune")?)?;
    let data = cfg.dataset.load()?;
    let dir = run.join(FINETUNED_DIR);
    let out = train_with_log(&mut model, &data, &cfg.finetune, &dir)?;
    let m = manifest(&cfg, cfg.finetune.epochs, cfg.finetune.seed, &out, &model)?;
    Ok(checkpoint::save(&dir, &model, &m)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub params: u64,
    pub flops: u64,
    pub accuracy: f64,
    pub loss: f64,
}

/// Everything the report needs from one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub arch: String,
    pub dataset: String,
    pub attention: String,
    pub scorer: Option<String>,
    pub ratio: Option<f64>,
    /// Model as trained, attention included.
    pub trained: StageSummary,
    /// Trained model with attention removed: the reference for pruned fractions.
    pub backbone_params: u64,
    pub backbone_flops: u64,
    /// Final pruned model: fine-tuned if that stage ran, otherwise as pruned.
    pub pruned: Option<StageSummary>,
    pub finetuned: bool,
}

fn stage(model: &mut ModelGraph, data: &Dataset, norm: &Normalizer, bs: usize) -> Result<StageSummary> {
    let (loss, accuracy) = evaluate(model, &data.test, norm, bs)?;
    let c = costs(model)?;
    Ok(StageSummary { params: c.params, flops: c.flops, accuracy, loss })
}

/// Evaluates every available stage on the test split and writes `summary.json`.
pub fn cmd_eval(run: &Path) -> Result<RunSummary> {
    let cfg = run_config(run)?;
    let norm = normalizer(run)?;
    let data = cfg.dataset.load()?;
    let bs = cfg.train.eval_batch_size;
    let (mut model, _) = checkpoint::load(&require(run, TRAIN_DIR, "train")?)?;
    let trained = stage(&mut model, &data, &norm, bs)?;
    let backbone = costs(&remove_attention(model))?;
    let (pruned, finetuned) = if run.join(FINETUNED_DIR).exists() {
        let (mut m, _) = checkpoint::load(&run.join(FINETUNED_DIR))?;
        (Some(stage(&mut m, &data, &norm, bs)?), true)
    } else if run.join(PRUNED_DIR).exists() {
        let (mut m, _) = checkpoint::load(&run.join(PRUNED_DIR))?;
        (Some(stage(&mut m, &data, &norm, bs)?), false)
    } else {
        (None, false)
    };
    let s = RunSummary {
        name: cfg.name.clone(),
        arch: cfg.model.name(),
        dataset: cfg.dataset.name.to_string(),
        attention: cfg.model.attention.label().into(),
        scorer: pruned.as_ref().and(cfg.prune.as_ref()).map(|p| p.scorer.name().to_string()),
        ratio: pruned.as_ref().and(cfg.prune.as_ref()).map(|p| p.ratio),
        trained,
        backbone_params: backbone.params,
        backbone_flops: backbone.flops,
        pruned,
        finetuned,
    };
    write(&run.join(SUMMARY_FILE), &serde_json::to_string_pretty(&s)?)?;
    Ok(s)
}

pub fn read_summary(run: &Path) -> Result<RunSummary> {
    Ok(serde_json::from_str(&read(&require(run, SUMMARY_FILE, "eval")?)?)?)
}

/// Every stage in order; pruning stages are skipped for baseline-only configs.
pub fn cmd_pipeline(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let run = cmd_train(cfg)?;
    if cfg.prune.is_some() {
        cmd_collect(&run, None)?;
        cmd_prune(&run, None)?;
        cmd_finetune(&run)?;
    }
    cmd_eval(&run)
}
