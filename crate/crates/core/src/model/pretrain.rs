use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{forward_pyramid, pretrain_loss, LossValues, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::{stream_rng, AdamW, Gradients, ParamGroup, Tape, SHUFFLE_STREAM};
use crate::patching::schedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Batch-mean losses recorded for one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub epoch: usize,
    pub recon: f64,
    pub indep: f64,
    pub total: f64,
}

/// Loss terms and gradients for one series. Task heads never appear on the
/// tape, so they receive no gradient.
pub fn sample_loss_and_grad(
    params: &ModelParams,
    x: &[f64],
    alpha: f64,
) -> Result<(LossValues, Gradients)> {
    let mut tape = Tape::new();
    tape.freeze(ParamGroup::Head);
    let pyramid = forward_pyramid(&mut tape, params, x)?;
    let terms = pretrain_loss(&mut tape, params, &pyramid, alpha)?;
    let grads = tape.backward(terms.total)?;
    Ok((terms.values(&tape), grads))
}

/// Mean loss terms over `samples`, without gradients.
pub fn evaluate_pretrain(params: &ModelParams, samples: &[Vec<f64>]) -> Result<LossValues> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("pretraining evaluation".into()));
    }
    let alpha = params.config.alpha;
    let per: Vec<LossValues> = samples
        .par_iter()
        .map(|x| {
            let mut tape = Tape::new();
            let pyramid = forward_pyramid(&mut tape, params, x)?;
            Ok(pretrain_loss(&mut tape, params, &pyramid, alpha)?.values(&tape))
        })
        .collect::<Result<_>>()?;
    Ok(mean_losses(&per))
}

fn mean_losses(per: &[LossValues]) -> LossValues {
    let n = per.len() as f64;
    let mut acc = LossValues::default();
    for v in per {
        acc.recon += v.recon;
        acc.indep += v.indep;
        acc.total += v.total;
    }
    LossValues {
        recon: acc.recon / n,
        indep: acc.indep / n,
        total: acc.total / n,
    }
}

/// Runs `cfg.steps` optimizer steps of self-reconstruction pretraining.
///
/// Each step draws the next `batch_size` series from a seeded permutation,
/// computes per-sample gradients in parallel, and merges them in batch order
/// so results do not depend on thread scheduling.
pub fn pretrain(
    params: &mut ModelParams,
    samples: &[Vec<f64>],
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(&PretrainRecord),
) -> Result<Vec<PretrainRecord>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset("pretraining".into()));
    }
    let patch = params.config.patch();
    for x in samples {
        if schedule(x.len(), &patch)?.activated_layers == 0 {
            return Err(Error::UnsupportedLength { len: x.len() });
        }
    }
    let alpha = params.config.alpha;
    let mut rng = stream_rng(cfg.seed, SHUFFLE_STREAM);
    let mut opt = AdamW::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut epoch = 0;
    let mut records = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(samples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
                epoch += 1;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let results: Vec<(LossValues, Gradients)> = batch
            .par_iter()
            .map(|&i| sample_loss_and_grad(params, &samples[i], alpha))
            .collect::<Result<_>>()?;
        let mut grads = Gradients::default();
        let mut losses = Vec::with_capacity(results.len());
        for (loss, g) in &results {
            grads.accumulate(g);
            losses.push(*loss);
        }
        grads.scale(1.0 / results.len() as f64);
        let mean = mean_losses(&losses);
        if !mean.total.is_finite() {
            return Err(Error::NonFinite {
                what: format!("pretraining loss at step {step}"),
            });
        }
        opt.step(&mut params.store, &grads);
        let record = PretrainRecord {
            step,
            epoch,
            recon: mean.recon,
            indep: mean.indep,
            total: mean.total,
        };
        on_step(&record);
        records.push(record);
    }
    if !params.store.all_finite() {
        return Err(Error::NonFinite {
            what: "parameters after pretraining".into(),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(alpha: f64) -> ModelParams {
        let cfg = ModelConfig {
            patch_len: 4,
            stride: 4,
            base_dim: 4,
            max_len: 64,
            heads: 2,
            d_ff: 8,
            alpha,
            ..ModelConfig::default()
        };
        ModelParams::new(cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap()
    }

    fn samples() -> Vec<Vec<f64>> {
        (0..6)
            .map(|i| {
                let len = 24 + 7 * i;
                (0..len).map(|t| ((t + i) as f64 * 0.4).sin()).collect()
            })
            .collect()
    }

    fn cfg(steps: usize) -> PretrainConfig {
        PretrainConfig {
            steps,
            batch_size: 3,
            lr: 3e-3,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases() {
        let mut p = toy(1e-4);
        let data = samples();
        let before = evaluate_pretrain(&p, &data).unwrap().total;
        pretrain(&mut p, &data, &cfg(60), |_| {}).unwrap();
        let after = evaluate_pretrain(&p, &data).unwrap().total;
        assert!(after < 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn same_seed_same_run() {
        let data = samples();
        let (mut a, mut b) = (toy(1e-4), toy(1e-4));
        let ra = pretrain(&mut a, &data, &cfg(10), |_| {}).unwrap();
        let rb = pretrain(&mut b, &data, &cfg(10), |_| {}).unwrap();
        assert_eq!(ra, rb);
        for (id, p) in a.store.iter() {
            assert_eq!(p.value.as_ref(), b.store.value(id));
        }
    }

    #[test]
    fn epochs_advance_after_full_pass() {
        let mut p = toy(1e-4);
        let recs = pretrain(&mut p, &samples(), &cfg(5), |_| {}).unwrap();
        let epochs: Vec<usize> = recs.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 0, 1, 1, 2]);
    }

    #[test]
    fn zero_alpha_optimizes_recon_only() {
        let mut p = toy(0.0);
        let recs = pretrain(&mut p, &samples(), &cfg(3), |_| {}).unwrap();
        for r in &recs {
            assert!(r.indep > 0.0);
            assert_eq!(r.total, r.recon);
        }
    }

    #[test]
    fn heads_and_unused_layers_get_no_gradient() {
        let p = toy(1e-4);
        let x: Vec<f64> = (0..20).map(|t| t as f64).collect();
        let (_, grads) = sample_loss_and_grad(&p, &x, 1e-4).unwrap();
        let deepest = schedule(20, &p.config.patch()).unwrap().activated_layers;
        assert!(deepest < p.max_layers());
        let unused = p.layer(deepest + 1).unwrap();
        assert!(grads.param(unused.repatch).is_none());
        assert!(grads.param(unused.recon.weight).is_none());
        assert!(grads.param(p.layer(deepest).unwrap().recon.weight).is_some());
    }

    #[test]
    fn rejects_inputs_without_layers() {
        let mut p = toy(1e-4);
        let err = pretrain(&mut p, &[vec![0.0; 4]], &cfg(1), |_| {}).unwrap_err();
        assert!(matches!(err, Error::UnsupportedLength { len: 4 }));
        assert!(pretrain(&mut p, &[], &cfg(1), |_| {}).is_err());
    }

    #[test]
    fn invalid_config() {
        assert!(PretrainConfig { batch_size: 0, ..cfg(1) }.validate().is_err());
        assert!(PretrainConfig { lr: 0.0, ..cfg(1) }.validate().is_err());
    }
}
