//! The four subcommands. Each takes a validated [`RunConfig`], writes its
//! artifacts under `output_dir`, and returns what it wrote.
//!
//! Artifacts:
//!
//! ```text
//! pretrain   pretrain.ckpt, pretrain_log.jsonl, pretrain_summary.json
//! finetune   finetune_<task>.ckpt, finetune_<task>_log.jsonl, finetune_summary.json
//! analyze    analysis_report.txt
//! ```
//!
//! Log files hold one JSON record per line and no timing fields, so equal
//! configs and seeds give byte-identical logs. Wall-clock time only appears
//! in the summaries.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use scalefusion::analysis::{error_metrics, redundancy_report, RedundancyReport};
use scalefusion::data::{Sample, Target};
use scalefusion::heads::{evaluate, finetune, EpochRecord, Task, TaskMetrics};
use scalefusion::model::{
    encode_all, evaluate_pretrain, pretrain, Checkpoint, LossValues, ModelConfig, ModelParams,
    PretrainRecord,
};
use scalefusion::numerics::{stream_rng, Matrix, INIT_STREAM};
use scalefusion::patching::{length_interval, schedule};
use scalefusion::Error;

use crate::config::RunConfig;
use crate::datasets::{classify_splits, evaluation_samples, forecast_splits, load_source, pretrain_inputs, Source, Splits};
use crate::error::{CliError, CliResult};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.jsonl";
pub const PRETRAIN_SUMMARY: &str = "pretrain_summary.json";
pub const FINETUNE_SUMMARY: &str = "finetune_summary.json";
pub const ANALYSIS_REPORT: &str = "analysis_report.txt";

/// Git-style content hash: SHA-256 of `"blob <len>\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::output(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Line-delimited JSON writer.
struct JsonLines {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl JsonLines {
    fn create(path: PathBuf) -> CliResult<Self> {
        let file = fs::File::create(&path).map_err(|e| CliError::output(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    fn write(&mut self, value: &impl Serialize) -> CliResult<()> {
        let line = serde_json::to_string(value).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|e| CliError::output(&self.path, e))
    }

    fn finish(mut self) -> CliResult<()> {
        self.out.flush().map_err(|e| CliError::output(&self.path, e))
    }
}

fn save_checkpoint(path: &Path, params: &ModelParams, meta: BTreeMap<String, String>) -> CliResult<String> {
    let bytes = Checkpoint::from_params(params, meta).to_bytes()?;
    write_file(path, &bytes)?;
    Ok(content_hash(&bytes))
}

/// Loads a checkpoint and checks it was built with `model`.
fn load_backbone(path: &Path, model: &ModelConfig) -> CliResult<ModelParams> {
    let ck = Checkpoint::load(path)?;
    if &ck.config != model {
        return Err(Error::config(
            "model",
            format!("checkpoint {} was built with a different model section", path.display()),
        )
        .into());
    }
    Ok(ck.into_params()?)
}

fn fresh_backbone(cfg: &RunConfig) -> CliResult<ModelParams> {
    Ok(ModelParams::new(cfg.model.clone(), &mut stream_rng(cfg.train.seed, INIT_STREAM))?)
}

#[derive(Clone, Debug, Serialize)]
pub struct LossSummary {
    pub recon: f64,
    pub indep: f64,
    pub total: f64,
}

impl From<LossValues> for LossSummary {
    fn from(v: LossValues) -> Self {
        Self {
            recon: v.recon,
            indep: v.indep,
            total: v.total,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainSummary {
    pub command: &'static str,
    pub seed: u64,
    pub config: RunConfig,
    pub samples: usize,
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    /// Mean losses over every training input before the first step.
    pub initial: LossSummary,
    /// Mean losses over every training input after the last step.
    pub final_loss: LossSummary,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub summary: PretrainSummary,
    pub records: Vec<PretrainRecord>,
}

/// Self-supervised pretraining on the train split.
pub fn cmd_pretrain(cfg: &RunConfig) -> CliResult<PretrainOutput> {
    let started = Instant::now();
    create_dir(&cfg.output_dir)?;
    let source = load_source(&cfg.data)?;
    let inputs = pretrain_inputs(&cfg.data, &source, cfg.train.seed)?;
    log::info!("pretraining on {} inputs for {} steps", inputs.len(), cfg.train.steps);
    let mut params = fresh_backbone(cfg)?;
    let initial = evaluate_pretrain(&params, &inputs)?;
    let mut log = JsonLines::create(cfg.output_dir.join(PRETRAIN_LOG))?;
    let mut write_err = None;
    let report_every = (cfg.train.steps / 10).max(1);
    let records = pretrain(&mut params, &inputs, &cfg.train.pretrain(), |r| {
        if r.step % report_every == 0 || r.step == 1 {
            log::info!("step {} total {:.6} recon {:.6} indep {:.6}", r.step, r.total, r.recon, r.indep);
        }
        if write_err.is_none() {
            write_err = log.write(r).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    log.finish()?;
    let final_loss = evaluate_pretrain(&params, &inputs)?;
    let checkpoint = cfg.output_dir.join(PRETRAIN_CHECKPOINT);
    let meta = BTreeMap::from([
        ("stage".to_string(), "pretrain".to_string()),
        ("seed".to_string(), cfg.train.seed.to_string()),
        ("steps".to_string(), cfg.train.steps.to_string()),
    ]);
    let checkpoint_hash = save_checkpoint(&checkpoint, &params, meta)?;
    let summary = PretrainSummary {
        command: "pretrain",
        seed: cfg.train.seed,
        config: cfg.clone(),
        samples: inputs.len(),
        checkpoint,
        checkpoint_hash,
        initial: initial.into(),
        final_loss: final_loss.into(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&cfg.output_dir.join(PRETRAIN_SUMMARY), &summary)?;
    Ok(PretrainOutput { summary, records })
}

/// Error metrics of repeating each context's last value over the horizon.
pub fn repeat_last_baseline(samples: &[Sample]) -> CliResult<(f64, f64)> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for s in samples {
        if let Target::Forecast(y) = &s.target {
            let last = *s.values.last().ok_or_else(|| Error::EmptyDataset("empty context".into()))?;
            pred.extend(std::iter::repeat(last).take(y.len()));
            truth.extend_from_slice(y);
        }
    }
    Ok(error_metrics(&pred, &truth)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct BaselineMetrics {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneRun {
    pub task: Task,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub best_epoch: usize,
    pub steps: usize,
    pub test: TaskMetrics,
    /// Repeat-last-value forecast on the same test windows.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineMetrics>,
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneSummary {
    pub command: &'static str,
    pub seed: u64,
    pub config: RunConfig,
    /// Checkpoint the backbone came from; `None` for a fresh backbone.
    pub backbone: Option<PathBuf>,
    pub runs: Vec<FinetuneRun>,
    pub wall_clock_secs: f64,
}

fn task_label(task: Task) -> String {
    match task {
        Task::Forecast { horizon } => format!("h{horizon}"),
        Task::Classify { classes } => format!("c{classes}"),
    }
}

fn epoch_line(r: &EpochRecord) -> serde_json::Value {
    let mut v = serde_json::to_value(r).expect("record serializes");
    if let Some(map) = v.as_object_mut() {
        map.remove("wall_time");
    }
    v
}

fn finetune_one(cfg: &RunConfig, backbone: &ModelParams, task: Task, splits: Splits) -> CliResult<FinetuneRun> {
    let started = Instant::now();
    if splits.test.is_empty() {
        return Err(Error::EmptyDataset("fine-tuning test split".into()).into());
    }
    let label = task_label(task);
    log::info!(
        "fine-tuning {label}: {} train, {} val, {} test samples",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    let mut log = JsonLines::create(cfg.output_dir.join(format!("finetune_{label}_log.jsonl")))?;
    let mut write_err = None;
    let outcome = finetune(backbone.clone(), &splits.train, &splits.val, &cfg.train.finetune(task), |r| {
        log::info!("epoch {} {} loss {:.6}", r.epoch, r.split, r.loss);
        if write_err.is_none() {
            write_err = log.write(&epoch_line(r)).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    log.finish()?;
    let test = evaluate(&outcome.params, &outcome.heads, &splits.test)?;
    let baseline = match task {
        Task::Forecast { .. } => {
            let (mse, mae) = repeat_last_baseline(&splits.test)?;
            Some(BaselineMetrics { mse, mae })
        }
        Task::Classify { .. } => None,
    };
    let checkpoint = cfg.output_dir.join(format!("finetune_{label}.ckpt"));
    let meta = BTreeMap::from([
        ("stage".to_string(), "finetune".to_string()),
        ("task".to_string(), label),
        ("seed".to_string(), cfg.train.seed.to_string()),
        ("best_epoch".to_string(), outcome.best_epoch.to_string()),
    ]);
    let checkpoint_hash = save_checkpoint(&checkpoint, &outcome.params, meta)?;
    Ok(FinetuneRun {
        task,
        train_samples: splits.train.len(),
        val_samples: splits.val.len(),
        test_samples: splits.test.len(),
        best_epoch: outcome.best_epoch,
        steps: outcome.steps,
        test,
        baseline,
        checkpoint,
        checkpoint_hash,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Replaces the decoders with task heads and fine-tunes: one run per
/// horizon for forecasting data, one run for classification data.
///
/// `checkpoint` defaults to the pretraining checkpoint in `output_dir`. If
/// it does not exist the heads are trained on a fresh backbone and a
/// warning is logged.
pub fn cmd_finetune(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<FinetuneSummary> {
    let started = Instant::now();
    create_dir(&cfg.output_dir)?;
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(PRETRAIN_CHECKPOINT));
    let (backbone, used) = if path.exists() {
        (load_backbone(&path, &cfg.model)?, Some(path))
    } else {
        log::warn!("checkpoint {} not found; fine-tuning a fresh backbone", path.display());
        (fresh_backbone(cfg)?, None)
    };
    let source = load_source(&cfg.data)?;
    let mut runs = Vec::new();
    match &source {
        Source::Series(series) => {
            for &h in &cfg.data.horizons {
                let splits = forecast_splits(&cfg.data, series, h, cfg.train.seed)?;
                runs.push(finetune_one(cfg, &backbone, Task::Forecast { horizon: h }, splits)?);
            }
        }
        Source::Records(records) => {
            let splits = classify_splits(&cfg.data, records, cfg.train.seed)?;
            let task = Task::Classify {
                classes: records.classes,
            };
            runs.push(finetune_one(cfg, &backbone, task, splits)?);
        }
    }
    let summary = FinetuneSummary {
        command: "finetune",
        seed: cfg.train.seed,
        config: cfg.clone(),
        backbone: used,
        runs,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&cfg.output_dir.join(FINETUNE_SUMMARY), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct AnalyzeOutput {
    pub report: RedundancyReport,
    /// Pyramid depth whose feature vectors were analyzed.
    pub layer: usize,
    /// Evaluation samples before grouping by depth.
    pub samples_total: usize,
    pub text: String,
    pub path: PathBuf,
}

/// Feature-redundancy report on the deepest-layer features of the test
/// split. Samples of different lengths can end at different depths with
/// different feature sizes, so only the most common depth is analyzed
/// (the deeper one on ties).
pub fn cmd_analyze(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<AnalyzeOutput> {
    create_dir(&cfg.output_dir)?;
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(PRETRAIN_CHECKPOINT));
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let hash = content_hash(&bytes);
    let ck = Checkpoint::from_bytes(&bytes)?;
    if ck.config != cfg.model {
        return Err(Error::config("model", "checkpoint was built with a different model section").into());
    }
    let params = ck.into_params()?;
    let source = load_source(&cfg.data)?;
    let samples = evaluation_samples(&cfg.data, &source, cfg.train.seed)?;
    let inputs: Vec<Vec<f64>> = samples.iter().map(Sample::normalized).collect();
    let features = encode_all(&params, &inputs)?;
    let mut by_layer: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
    for (layer, f) in &features {
        by_layer.entry(*layer).or_default().push(f);
    }
    let (layer, rows) = by_layer
        .iter()
        .max_by_key(|(layer, rows)| (rows.len(), **layer))
        .map(|(l, r)| (*l, r.clone()))
        .unwrap_or((0, Vec::new()));
    if rows.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 evaluation samples at one depth, got {}",
            rows.len()
        ))
        .into());
    }
    let rep = Matrix::from_rows(&rows)?;
    let mut settings = cfg.analysis;
    settings.pairs.seed = cfg.train.seed;
    let report = redundancy_report(&rep, &settings)?;
    let mut text = format!(
        "checkpoint_hash={hash}\nlayer={layer}\nsamples_total={}\nsamples_used={}\n",
        samples.len(),
        rows.len()
    );
    text.push_str(&report.to_text());
    let out = cfg.output_dir.join(ANALYSIS_REPORT);
    write_file(&out, text.as_bytes())?;
    Ok(AnalyzeOutput {
        report,
        layer,
        samples_total: samples.len(),
        text,
        path: out,
    })
}

/// Human-readable pyramid schedule for one input length.
pub fn cmd_schedule(model: &ModelConfig, len: usize) -> CliResult<String> {
    model.validate()?;
    let cfg = model.patch();
    let s = schedule(len, &cfg)?;
    let mut out = format!(
        "length {len}: {} patches, {} activated layers\n",
        s.patch_count, s.activated_layers
    );
    if s.activated_layers > 0 {
        let (lo, hi) = length_interval(s.activated_layers, &cfg)?;
        out.push_str(&format!("lengths with the same depth: [{lo}, {hi}]\n"));
    }
    out.push_str("layer  channels  patches  pad\n");
    for (l, shape) in s.layers.iter().enumerate() {
        out.push_str(&format!(
            "{l:>5}  {:>8}  {:>7}  {:>3}\n",
            shape.channels, shape.patches, shape.pad_patches
        ));
    }
    Ok(out)
}
