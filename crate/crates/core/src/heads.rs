//! Task heads on top of the deepest activated layer, and fine-tuning.
//!
//! A model with `L_max` layers carries one head per layer (per forecast
//! horizon). Each sample only uses the head attached to the deepest layer its
//! length activates, where a single patch feature remains.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{classification_metrics, error_metrics};
use crate::data::{Sample, Target};
use crate::encoder::init_bound;
use crate::error::{Error, Result};
use crate::model::{forward_pyramid, FeatureMap, ModelParams};
use crate::numerics::{
    stream_rng, INIT_STREAM, SHUFFLE_STREAM,
    softmax_vec, AdamW, Gradients, Matrix, ParamGroup, ParamId, ParamStore, Tape, Var,
};
use crate::patching::PyramidSchedule;

/// Heads that are attached to one pyramid level.
pub trait LayerHead {
    fn layer(&self) -> usize;
}

/// `horizon x d^l` affine map from the final patch feature to a forecast.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForecastHead {
    pub layer: usize,
    pub horizon: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// `classes x d^l` affine map from the final patch feature to logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifyHead {
    pub layer: usize,
    pub classes: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LayerHead for ForecastHead {
    fn layer(&self) -> usize {
        self.layer
    }
}

impl LayerHead for ClassifyHead {
    fn layer(&self) -> usize {
        self.layer
    }
}

fn register_affine<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let weight = store.insert_uniform(
        format!("{prefix}.weight"),
        ParamGroup::Head,
        rows,
        cols,
        init_bound(cols),
        rng,
    )?;
    let bias = store.insert(format!("{prefix}.bias"), ParamGroup::Head, Matrix::zeros(rows, 1))?;
    Ok((weight, bias))
}

/// One forecast head per layer `1..=L_max` for `horizon`. Heads already in
/// the store (for example from a checkpoint) are reused.
pub fn register_forecast_heads<R: Rng + ?Sized>(
    params: &mut ModelParams,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<ForecastHead>> {
    if horizon == 0 {
        return Err(Error::config("horizon", "must be positive"));
    }
    let patch = params.config.patch();
    (1..=params.max_layers())
        .map(|l| {
            let prefix = format!("head.forecast.h{horizon}.l{l}");
            let (weight, bias) = register_affine(&mut params.store, &prefix, horizon, patch.channels(l), rng)?;
            Ok(ForecastHead {
                layer: l,
                horizon,
                weight,
                bias,
            })
        })
        .collect()
}

/// One classification head per layer `1..=L_max`.
pub fn register_classify_heads<R: Rng + ?Sized>(
    params: &mut ModelParams,
    classes: usize,
    rng: &mut R,
) -> Result<Vec<ClassifyHead>> {
    if classes < 2 {
        return Err(Error::config("num_classes", "must be at least 2"));
    }
    let patch = params.config.patch();
    (1..=params.max_layers())
        .map(|l| {
            let prefix = format!("head.classify.c{classes}.l{l}");
            let (weight, bias) = register_affine(&mut params.store, &prefix, classes, patch.channels(l), rng)?;
            Ok(ClassifyHead {
                layer: l,
                classes,
                weight,
                bias,
            })
        })
        .collect()
}

/// The head for the deepest activated layer of `sched`.
pub fn select_head<'a, H: LayerHead>(sched: &PyramidSchedule, heads: &'a [H]) -> Result<&'a H> {
    let l = sched.activated_layers;
    if l == 0 {
        return Err(Error::UnsupportedLength {
            len: sched.input_len,
        });
    }
    heads.iter().find(|h| h.layer() == l).ok_or(Error::Index {
        what: "head layer",
        index: l,
        min: 1,
        max: heads.len(),
    })
}

fn head_input(tape: &Tape, features: &FeatureMap, layer: usize) -> Result<()> {
    if features.layer != layer {
        return Err(Error::Index {
            what: "head layer",
            index: features.layer,
            min: layer,
            max: layer,
        });
    }
    let shape = features.shape(tape);
    if shape.1 != 1 {
        return Err(Error::Shape {
            op: "head input",
            left: shape,
            right: (shape.0, 1),
        });
    }
    Ok(())
}

fn affine(tape: &mut Tape, store: &ParamStore, weight: ParamId, bias: ParamId, x: Var) -> Result<Var> {
    let w = tape.param(store, weight);
    let b = tape.param(store, bias);
    let y = tape.matmul(w, x)?;
    tape.add_col_bias(y, b)
}

/// `W h + b` on the single final patch feature, in normalized units.
pub fn forecast(tape: &mut Tape, store: &ParamStore, features: &FeatureMap, head: &ForecastHead) -> Result<Var> {
    head_input(tape, features, head.layer)?;
    affine(tape, store, head.weight, head.bias, features.values)
}

/// Class logits `W h + b`. See [`class_probabilities`].
pub fn classify(tape: &mut Tape, store: &ParamStore, features: &FeatureMap, head: &ClassifyHead) -> Result<Var> {
    head_input(tape, features, head.layer)?;
    affine(tape, store, head.weight, head.bias, features.values)
}

/// Softmax of a logit column.
pub fn class_probabilities(logits: &Matrix) -> Vec<f64> {
    softmax_vec(logits.data())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Task {
    Forecast { horizon: usize },
    Classify { classes: usize },
}

/// Heads for one task, indexed by layer `1..=L_max`.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskHeads {
    Forecast(Vec<ForecastHead>),
    Classify(Vec<ClassifyHead>),
}

impl TaskHeads {
    pub fn register<R: Rng + ?Sized>(params: &mut ModelParams, task: Task, rng: &mut R) -> Result<Self> {
        Ok(match task {
            Task::Forecast { horizon } => Self::Forecast(register_forecast_heads(params, horizon, rng)?),
            Task::Classify { classes } => Self::Classify(register_classify_heads(params, classes, rng)?),
        })
    }

    /// Parameter ids of the head a `sched` routes to.
    pub fn selected(&self, sched: &PyramidSchedule) -> Result<(ParamId, ParamId)> {
        Ok(match self {
            Self::Forecast(h) => {
                let h = select_head(sched, h)?;
                (h.weight, h.bias)
            }
            Self::Classify(h) => {
                let h = select_head(sched, h)?;
                (h.weight, h.bias)
            }
        })
    }

    /// Every head parameter id, shallow layers first.
    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            Self::Forecast(h) => h.iter().flat_map(|h| [h.weight, h.bias]).collect(),
            Self::Classify(h) => h.iter().flat_map(|h| [h.weight, h.bias]).collect(),
        }
    }
}

/// What one sample's forward pass produced.
#[derive(Clone, Debug, PartialEq)]
pub enum Output {
    /// Forecast in normalized units.
    Forecast(Vec<f64>),
    /// Class probabilities.
    Classify(Vec<f64>),
}

/// Records the task loss of one sample: L1 against the normalized forecast
/// target, or cross-entropy against the class label. Returns the loss node,
/// the raw head output node, and the head's layer.
pub fn task_loss(tape: &mut Tape, params: &ModelParams, heads: &TaskHeads, sample: &Sample) -> Result<(Var, Var, usize)> {
    let x = sample.normalized();
    let pyramid = forward_pyramid(tape, params, &x)?;
    let sched = &pyramid.schedule;
    let features = pyramid.deepest().ok_or(Error::UnsupportedLength { len: x.len() })?;
    match (heads, &sample.target) {
        (TaskHeads::Forecast(hs), Target::Forecast(_)) => {
            let head = select_head(sched, hs)?;
            let y = sample.normalized_target().expect("forecast target");
            if y.len() != head.horizon {
                return Err(Error::Length {
                    what: "forecast target",
                    len: y.len(),
                    min: head.horizon,
                    max: head.horizon,
                });
            }
            let pred = forecast(tape, &params.store, features, head)?;
            let loss = tape.l1_mean(pred, &Matrix::column(y))?;
            Ok((loss, pred, head.layer))
        }
        (TaskHeads::Classify(hs), Target::Class(label)) => {
            let head = select_head(sched, hs)?;
            let logits = classify(tape, &params.store, features, head)?;
            let loss = tape.cross_entropy(logits, *label)?;
            Ok((loss, logits, head.layer))
        }
        _ => Err(Error::Degenerate(format!(
            "sample from `{}` has no target for this task",
            sample.source
        ))),
    }
}

fn output_of(heads: &TaskHeads, m: &Matrix) -> Output {
    match heads {
        TaskHeads::Forecast(_) => Output::Forecast(m.data().to_vec()),
        TaskHeads::Classify(_) => Output::Classify(class_probabilities(m)),
    }
}

/// Per-sample gradient trace used by fine-tuning.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub loss: f64,
    pub output: Output,
    pub layer: usize,
    pub grads: Gradients,
}

/// Task loss and gradients for one sample. Reconstruction decoders are never
/// on the tape; the backbone is treated as constant when `freeze_backbone`.
pub fn sample_task_grad(
    params: &ModelParams,
    heads: &TaskHeads,
    sample: &Sample,
    freeze_backbone: bool,
) -> Result<SampleGrad> {
    let mut tape = Tape::new();
    tape.freeze(ParamGroup::Reconstruction);
    if freeze_backbone {
        tape.freeze(ParamGroup::Backbone);
    }
    let (loss, out, layer) = task_loss(&mut tape, params, heads, sample)?;
    let grads = tape.backward(loss)?;
    Ok(SampleGrad {
        loss: tape.value(loss).item(),
        output: output_of(heads, tape.value(out)),
        layer,
        grads,
    })
}

/// Loss and head output of one sample, without gradients.
pub fn predict(params: &ModelParams, heads: &TaskHeads, sample: &Sample) -> Result<(f64, Output)> {
    let mut tape = Tape::new();
    let (loss, out, _) = task_loss(&mut tape, params, heads, sample)?;
    Ok((tape.value(loss).item(), output_of(heads, tape.value(out))))
}

/// Forecast for `sample` in raw units.
pub fn predict_forecast(params: &ModelParams, heads: &TaskHeads, sample: &Sample) -> Result<Vec<f64>> {
    match predict(params, heads, sample)?.1 {
        Output::Forecast(z) => Ok(sample.norm.denormalize(&z)),
        Output::Classify(_) => Err(Error::Degenerate("not a forecasting model".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub task: Task,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub freeze_backbone: bool,
    #[serde(default)]
    pub weight_decay: f64,
}

impl FinetuneConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            lr: 1e-4,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            freeze_backbone: false,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.task {
            Task::Forecast { horizon: 0 } => return Err(Error::config("horizon", "must be positive")),
            Task::Classify { classes } if classes < 2 => {
                return Err(Error::config("num_classes", "must be at least 2"))
            }
            _ => {}
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Metrics of one split after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    /// Seconds since fine-tuning started.
    pub wall_time: f64,
}

/// Task metrics over a set of samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TaskMetrics {
    pub loss: f64,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
}

impl TaskMetrics {
    fn record(&self, epoch: usize, split: &str, wall_time: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            split: split.to_string(),
            loss: self.loss,
            mse: self.mse,
            mae: self.mae,
            accuracy: self.accuracy,
            macro_f1: self.macro_f1,
            wall_time,
        }
    }

    /// Smaller is better: MSE for forecasting, error rate then loss for
    /// classification.
    fn score(&self) -> (f64, f64) {
        match (self.mse, self.accuracy) {
            (Some(mse), _) => (mse, self.loss),
            (None, Some(acc)) => (1.0 - acc, self.loss),
            _ => (self.loss, 0.0),
        }
    }
}

/// Metrics from per-sample losses and outputs. MSE and MAE are taken over
/// every forecast point in raw units.
pub fn metrics_from_outputs(samples: &[Sample], losses: &[f64], outputs: &[Output]) -> Result<TaskMetrics> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("metrics".into()));
    }
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    match &outputs[0] {
        Output::Forecast(_) => {
            let mut pred = Vec::new();
            let mut truth = Vec::new();
            for (s, o) in samples.iter().zip(outputs) {
                if let (Output::Forecast(z), Target::Forecast(y)) = (o, &s.target) {
                    pred.extend(s.norm.denormalize(z));
                    truth.extend_from_slice(y);
                }
            }
            let (mse, mae) = error_metrics(&pred, &truth)?;
            Ok(TaskMetrics {
                loss,
                mse: Some(mse),
                mae: Some(mae),
                ..TaskMetrics::default()
            })
        }
        Output::Classify(p) => {
            let classes = p.len();
            let mut pred = Vec::new();
            let mut truth = Vec::new();
            for (s, o) in samples.iter().zip(outputs) {
                if let (Output::Classify(p), Some(label)) = (o, s.label()) {
                    pred.push(argmax(p));
                    truth.push(label);
                }
            }
            let (acc, f1) = classification_metrics(&pred, &truth, classes)?;
            Ok(TaskMetrics {
                loss,
                accuracy: Some(acc),
                macro_f1: Some(f1),
                ..TaskMetrics::default()
            })
        }
    }
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Evaluates `samples` in parallel with results in sample order.
pub fn evaluate(params: &ModelParams, heads: &TaskHeads, samples: &[Sample]) -> Result<TaskMetrics> {
    let results: Vec<(f64, Output)> = samples
        .par_iter()
        .map(|s| predict(params, heads, s))
        .collect::<Result<_>>()?;
    let (losses, outputs): (Vec<f64>, Vec<Output>) = results.into_iter().unzip();
    metrics_from_outputs(samples, &losses, &outputs)
}

/// Result of [`finetune`].
#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Parameters from the epoch with the best validation score.
    pub params: ModelParams,
    pub heads: TaskHeads,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Replaces the reconstruction decoders with task heads and trains on
/// `train`. Only the head of each sample's deepest activated layer is on
/// that sample's tape, so it is the only head that receives gradient.
///
/// After every epoch the train metrics (from the pre-update forward passes)
/// and validation metrics are passed to `on_record`. The parameters of the
/// best validation epoch are returned; with no validation samples the train
/// metrics decide.
pub fn finetune(
    mut params: ModelParams,
    train: &[Sample],
    val: &[Sample],
    cfg: &FinetuneConfig,
    mut on_record: impl FnMut(&EpochRecord),
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("fine-tuning train split".into()));
    }
    let patch = params.config.patch();
    for s in train.iter().chain(val) {
        if crate::patching::schedule(s.len(), &patch)?.activated_layers == 0 {
            return Err(Error::UnsupportedLength { len: s.len() });
        }
    }
    let heads = TaskHeads::register(&mut params, cfg.task, &mut stream_rng(cfg.seed, INIT_STREAM))?;
    let mut rng = stream_rng(cfg.seed, SHUFFLE_STREAM);
    let mut opt = AdamW::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let started = Instant::now();
    let mut trace = Vec::new();
    let mut best: Option<((f64, f64), usize, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = vec![0.0; train.len()];
        let mut outputs: Vec<Option<Output>> = vec![None; train.len()];
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<SampleGrad> = batch
                .par_iter()
                .map(|&i| sample_task_grad(&params, &heads, &train[i], cfg.freeze_backbone))
                .collect::<Result<_>>()?;
            let mut grads = Gradients::default();
            for (&i, r) in batch.iter().zip(&results) {
                if !r.loss.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("fine-tuning loss at epoch {epoch}"),
                    });
                }
                grads.accumulate(&r.grads);
                losses[i] = r.loss;
                outputs[i] = Some(r.output.clone());
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut params.store, &grads);
            steps += 1;
        }
        let outputs: Vec<Output> = outputs.into_iter().map(|o| o.expect("every sample visited")).collect();
        let train_metrics = metrics_from_outputs(train, &losses, &outputs)?;
        let rec = train_metrics.record(epoch, "train", started.elapsed().as_secs_f64());
        on_record(&rec);
        trace.push(rec);
        let decisive = if val.is_empty() {
            train_metrics
        } else {
            let m = evaluate(&params, &heads, val)?;
            let rec = m.record(epoch, "val", started.elapsed().as_secs_f64());
            on_record(&rec);
            trace.push(rec);
            m
        };
        let score = decisive.score();
        if best.as_ref().map_or(true, |(b, _, _)| score < *b) {
            best = Some((score, epoch, params.store.clone()));
        }
    }
    if !params.store.all_finite() {
        return Err(Error::NonFinite {
            what: "parameters after fine-tuning".into(),
        });
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    params.store = store;
    Ok(FinetuneOutcome {
        params,
        heads,
        trace,
        best_epoch,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::grad_check;
    use crate::patching::schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            patch_len: 4,
            stride: 4,
            repatch_len: 2,
            base_dim: 4,
            max_len: 64,
            heads: 2,
            d_ff: 8,
            encoder_depth: 1,
            alpha: 1e-4,
        }
    }

    fn model(cfg: ModelConfig, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::new(cfg, &mut rng).unwrap()
    }

    #[test]
    fn default_config_head_selection() {
        let cfg = ModelConfig::default();
        let patch = cfg.patch();
        for (t, layer) in [(2048, 7), (512, 5), (47, 1)] {
            let sched = schedule(t, &patch).unwrap();
            assert_eq!(sched.activated_layers, layer);
            assert_eq!(sched.final_shape().patches, 1);
            assert_eq!(patch.channels(layer), [0, 32, 64, 128, 256, 512, 1024, 2048][layer]);
        }
    }

    #[test]
    fn select_head_routes_to_deepest_layer() {
        let mut p = model(small_config(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let heads = register_forecast_heads(&mut p, 3, &mut rng).unwrap();
        let sched = schedule(40, &p.config.patch()).unwrap();
        assert_eq!(select_head(&sched, &heads).unwrap().layer, sched.activated_layers);
        let short = schedule(4, &p.config.patch()).unwrap();
        assert!(matches!(select_head(&short, &heads), Err(Error::UnsupportedLength { len: 4 })));
    }

    #[test]
    fn zero_head_predicts_zero_and_uniform() {
        let mut p = model(small_config(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fh = register_forecast_heads(&mut p, 5, &mut rng).unwrap();
        let ch = register_classify_heads(&mut p, 4, &mut rng).unwrap();
        for h in &fh {
            p.store.set(h.weight, Matrix::zeros(5, p.config.patch().channels(h.layer))).unwrap();
        }
        for h in &ch {
            p.store.set(h.weight, Matrix::zeros(4, p.config.patch().channels(h.layer))).unwrap();
        }
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut tape = Tape::new();
        let pyr = forward_pyramid(&mut tape, &p, &x).unwrap();
        let top = pyr.deepest().unwrap();
        let head = select_head(&pyr.schedule, &fh).unwrap();
        let y = forecast(&mut tape, &p.store, top, head).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let logits = classify(&mut tape, &p.store, top, select_head(&pyr.schedule, &ch).unwrap()).unwrap();
        let probs = class_probabilities(tape.value(logits));
        assert_eq!(probs, vec![0.25; 4]);
        let ce = tape.cross_entropy(logits, 2).unwrap();
        assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn head_layer_mismatch() {
        let mut p = model(small_config(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fh = register_forecast_heads(&mut p, 2, &mut rng).unwrap();
        let x = vec![0.5; 32];
        let mut tape = Tape::new();
        let pyr = forward_pyramid(&mut tape, &p, &x).unwrap();
        let wrong = fh.iter().find(|h| h.layer != pyr.schedule.activated_layers).unwrap();
        assert!(forecast(&mut tape, &p.store, pyr.deepest().unwrap(), wrong).is_err());
    }

    /// Toy head on a fixed 8-dim feature, so the check isolates the head.
    fn toy_feature(tape: &mut Tape, d: usize) -> FeatureMap {
        let v = tape.constant(Matrix::from_fn(d, 1, |r, _| ((r * 7 + 3) % 5) as f64 * 0.4 - 0.7));
        FeatureMap {
            layer: 1,
            values: v,
            mask: crate::encoder::AttentionMask::none(1),
        }
    }

    #[test]
    fn forecast_l1_gradient_check() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w, b) = register_affine(&mut store, "toy", 3, 8, &mut rng).unwrap();
        let head = ForecastHead {
            layer: 1,
            horizon: 3,
            weight: w,
            bias: b,
        };
        // Offsets keep every residual far from the L1 kink.
        let target = Matrix::column(vec![0.37, -1.91, 2.63]);
        let report = grad_check(&store, &[], |tape, store| {
            let f = toy_feature(tape, 8);
            let y = forecast(tape, store, &f, &head)?;
            tape.l1_mean(y, &target)
        })
        .unwrap();
        assert!(report.passes(1e-6), "{:?}", report.worst);
    }

    #[test]
    fn classify_ce_gradient_check() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, b) = register_affine(&mut store, "toy", 3, 8, &mut rng).unwrap();
        let head = ClassifyHead {
            layer: 1,
            classes: 3,
            weight: w,
            bias: b,
        };
        let report = grad_check(&store, &[], |tape, store| {
            let f = toy_feature(tape, 8);
            let z = classify(tape, store, &f, &head)?;
            tape.cross_entropy(z, 1)
        })
        .unwrap();
        assert!(report.passes(1e-6), "{:?}", report.worst);
    }

    #[test]
    fn one_head_touched_per_sample() {
        let mut p = model(small_config(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let heads = TaskHeads::register(&mut p, Task::Forecast { horizon: 4 }, &mut rng).unwrap();
        let head_ids = heads.ids();
        for len in [8usize, 13, 20, 33, 60] {
            let mut series: Vec<f64> = (0..len + 4).map(|i| (i as f64 * 0.7).cos()).collect();
            series[0] += 0.1;
            let s = Sample::new(series[..len].to_vec(), Target::Forecast(series[len..].to_vec()), "t", 0);
            let g = sample_task_grad(&p, &heads, &s, false).unwrap();
            let touched: Vec<ParamId> = g.grads.touched().filter(|id| head_ids.contains(id)).collect();
            let sched = schedule(len, &p.config.patch()).unwrap();
            let (w, b) = heads.selected(&sched).unwrap();
            assert_eq!(g.layer, sched.activated_layers);
            assert!(touched.iter().all(|id| *id == w || *id == b));
            assert!(touched.contains(&w));
        }
    }

    fn sine_sample(len: usize, horizon: usize) -> Sample {
        let s: Vec<f64> = (0..len + horizon).map(|t| (t as f64 * 0.39).sin() + 0.3 * (t as f64 * 0.11).cos()).collect();
        Sample::new(s[..len].to_vec(), Target::Forecast(s[len..].to_vec()), "sine", 0)
    }

    #[test]
    fn single_sample_overfit() {
        let p = model(small_config(), 7);
        let train = vec![sine_sample(48, 8)];
        let cfg = FinetuneConfig {
            lr: 1e-2,
            epochs: 300,
            batch_size: 1,
            ..FinetuneConfig::new(Task::Forecast { horizon: 8 })
        };
        let out = finetune(p, &train, &[], &cfg, |_| {}).unwrap();
        let first = out.trace.first().unwrap().loss;
        let last = out.trace.last().unwrap().loss;
        assert_eq!(out.steps, 300);
        assert!(last < 0.05 * first, "first {first}, last {last}");
    }

    #[test]
    fn frozen_backbone_is_bit_identical() {
        let p = model(small_config(), 8);
        let before = p.clone();
        let train = vec![sine_sample(40, 4), sine_sample(24, 4)];
        let cfg = FinetuneConfig {
            lr: 1e-2,
            epochs: 5,
            batch_size: 2,
            freeze_backbone: true,
            ..FinetuneConfig::new(Task::Forecast { horizon: 4 })
        };
        let out = finetune(p, &train, &[], &cfg, |_| {}).unwrap();
        for (id, param) in before.store.iter() {
            assert_eq!(out.params.store.value(id), param.value.as_ref(), "{}", param.name);
        }
        let changed = out
            .heads
            .ids()
            .iter()
            .any(|&id| out.params.store.value(id).data().iter().any(|&v| v != 0.0));
        assert!(changed);
    }

    #[test]
    fn trace_has_train_and_val_records() {
        let p = model(small_config(), 9);
        let train = vec![sine_sample(40, 4)];
        let val = vec![sine_sample(32, 4)];
        let cfg = FinetuneConfig {
            epochs: 3,
            ..FinetuneConfig::new(Task::Forecast { horizon: 4 })
        };
        let mut seen = Vec::new();
        let out = finetune(p, &train, &val, &cfg, |r| seen.push(r.split.clone())).unwrap();
        assert_eq!(seen, ["train", "val", "train", "val", "train", "val"]);
        assert!(out.trace.iter().all(|r| r.mse.is_some() && r.accuracy.is_none()));
        assert!((1..=3).contains(&out.best_epoch));
    }

    #[test]
    fn empty_and_short_datasets() {
        let cfg = FinetuneConfig::new(Task::Forecast { horizon: 4 });
        assert!(matches!(
            finetune(model(small_config(), 0), &[], &[], &cfg, |_| {}),
            Err(Error::EmptyDataset(_))
        ));
        let s = sine_sample(4, 4);
        assert!(matches!(
            finetune(model(small_config(), 0), &[s], &[], &cfg, |_| {}),
            Err(Error::UnsupportedLength { len: 4 })
        ));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let z = Matrix::column(vec![3.0, -20.0, 0.5, 11.0]);
        let p = class_probabilities(&z);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_eq!(argmax(&p), 3);
    }
}
