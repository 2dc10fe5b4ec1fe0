use super::{FeatureMap, ModelParams, Pyramid};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::patching::{pad_patches, PyramidSchedule};

/// Reconstruction of one level: predictions are recorded on the tape,
/// targets and the real-entry weights are constants.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub layer: usize,
    /// `(l_rp^l * l_p) x P^l`, one column per patch.
    pub prediction: Var,
    /// Flattened original segments, same shape as `prediction`.
    pub target: Matrix,
    /// 1 where the target entry comes from a real patch, 0 where it is padding.
    pub weight: Matrix,
}

/// Targets for `layer`: column `p` is the flattened run of original patches
/// `[span * p, span * (p + 1))` of the zero-padded patch matrix.
pub fn reconstruction_targets(
    patches: &Matrix,
    layer: usize,
    sched: &PyramidSchedule,
) -> Result<(Matrix, Matrix)> {
    if layer == 0 || layer > sched.activated_layers {
        return Err(Error::Index {
            what: "layer",
            index: layer,
            min: 1,
            max: sched.activated_layers,
        });
    }
    let real = patches.cols();
    if real != sched.patch_count {
        return Err(Error::Shape {
            op: "reconstruction_targets",
            left: patches.shape(),
            right: (patches.rows(), sched.patch_count),
        });
    }
    let span = sched.repatch_len.pow(layer as u32);
    let count = sched.layers[layer].patches;
    let padded = pad_patches(patches, span * count);
    let lp = patches.rows();
    let mut target = Matrix::zeros(span * lp, count);
    let mut weight = Matrix::zeros(span * lp, count);
    for p in 0..count {
        for j in 0..span {
            let src = p * span + j;
            let w = if src < real { 1.0 } else { 0.0 };
            for r in 0..lp {
                target.set(j * lp + r, p, padded.get(r, src));
                weight.set(j * lp + r, p, w);
            }
        }
    }
    Ok((target, weight))
}

/// `x_hat^{l,p} = W_recon h^p_l + b_recon` for every patch of `map`.
pub fn reconstruct_layer(
    tape: &mut Tape,
    params: &ModelParams,
    map: &FeatureMap,
    patches: &Matrix,
    sched: &PyramidSchedule,
) -> Result<Reconstruction> {
    let recon = params.layer(map.layer)?.recon;
    let (target, weight) = reconstruction_targets(patches, map.layer, sched)?;
    let w = tape.param(&params.store, recon.weight);
    let b = tape.param(&params.store, recon.bias);
    let pred = tape.matmul(w, map.values)?;
    let pred = tape.add_col_bias(pred, b)?;
    if tape.shape(pred) != target.shape() {
        return Err(Error::Shape {
            op: "reconstruct_layer",
            left: tape.shape(pred),
            right: target.shape(),
        });
    }
    Ok(Reconstruction {
        layer: map.layer,
        prediction: pred,
        target,
        weight,
    })
}

/// Loss terms recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub recon: Var,
    pub indep: Var,
    pub total: Var,
}

/// Plain values of [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub recon: f64,
    pub indep: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            recon: tape.value(self.recon).item(),
            indep: tape.value(self.indep).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// `L_recon + alpha * L_indep` summed over the activated layers, where
/// `L_recon` is the squared error over real (non-padding) target entries and
/// `L_indep` is the squared norm of every patch feature.
pub fn pretrain_loss(
    tape: &mut Tape,
    params: &ModelParams,
    pyramid: &Pyramid,
    alpha: f64,
) -> Result<LossTerms> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::config("alpha", "must be finite and non-negative"));
    }
    if pyramid.layers.is_empty() {
        return Err(Error::UnsupportedLength {
            len: pyramid.schedule.input_len,
        });
    }
    let mut recon_terms = Vec::with_capacity(pyramid.layers.len());
    let mut indep_terms = Vec::with_capacity(pyramid.layers.len());
    for map in &pyramid.layers {
        let rec = reconstruct_layer(tape, params, map, &pyramid.patches, &pyramid.schedule)?;
        recon_terms.push(tape.weighted_sse(rec.prediction, &rec.target, Some(&rec.weight))?);
        indep_terms.push(tape.sum_squares(map.values));
    }
    let recon = tape.add_all(&recon_terms)?;
    let indep = tape.add_all(&indep_terms)?;
    let total = if alpha == 0.0 {
        recon
    } else {
        let scaled = tape.scale(indep, alpha);
        tape.add(recon, scaled)?
    };
    if !tape.value(total).is_finite() {
        return Err(Error::NonFinite {
            what: "pretraining loss".into(),
        });
    }
    Ok(LossTerms {
        recon,
        indep,
        total,
    })
}
