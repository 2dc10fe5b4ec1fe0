use rayon::prelude::*;

use super::{CrossScaleParams, ModelParams};
use crate::encoder::{check_heads, encoder_layer, multi_head_attention, AttentionMask};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore, Tape, Var};
use crate::patching::{patch_series, schedule, PyramidSchedule};

/// A `d^l x P^l` feature map recorded on a tape.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub layer: usize,
    pub values: Var,
    pub mask: AttentionMask,
}

impl FeatureMap {
    pub fn matrix<'t>(&self, tape: &'t Tape) -> &'t Matrix {
        tape.value(self.values)
    }

    pub fn shape(&self, tape: &Tape) -> (usize, usize) {
        tape.shape(self.values)
    }
}

/// Output of [`forward_pyramid`].
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub schedule: PyramidSchedule,
    /// Original `patch_len x P^0` patch matrix.
    pub patches: Matrix,
    pub initial: FeatureMap,
    /// Fused maps `H_1 ..= H_L`.
    pub layers: Vec<FeatureMap>,
}

impl Pyramid {
    /// Deepest fused map, if any layer was activated.
    pub fn deepest(&self) -> Option<&FeatureMap> {
        self.layers.last()
    }
}

/// `H_0 = Encoder(LayerNorm(W_emb X_patch + b + pos))`.
pub fn embed_initial(tape: &mut Tape, params: &ModelParams, patches: &Matrix) -> Result<FeatureMap> {
    let store = &params.store;
    let e = &params.embed;
    let count = patches.cols();
    let max = store.value(e.position).cols();
    if count == 0 || count > max {
        return Err(Error::Length {
            what: "patch count",
            len: count,
            min: 1,
            max,
        });
    }
    let x = tape.constant(patches.clone());
    let w = tape.param(store, e.weight);
    let b = tape.param(store, e.bias);
    let emb = tape.matmul(w, x)?;
    let emb = tape.add_col_bias(emb, b)?;
    let pos = tape.param(store, e.position);
    let pos = if count == max {
        pos
    } else {
        tape.slice_cols(pos, 0, count)?
    };
    let emb = tape.add(emb, pos)?;
    let (g, nb) = (tape.param(store, e.norm_gain), tape.param(store, e.norm_bias));
    let mut h = tape.layer_norm(emb, g, nb)?;
    let mask = AttentionMask::none(count);
    for enc in &e.encoders {
        h = encoder_layer(tape, store, h, enc, &mask)?;
    }
    Ok(FeatureMap {
        layer: 0,
        values: h,
        mask,
    })
}

/// One conv-like transformer layer, producing the pre-fusion map `H*_l`:
/// re-patch, `d^l x d^l` projection, instance norm, encoder(s), layer norm.
pub fn ctl_forward(tape: &mut Tape, params: &ModelParams, prev: &FeatureMap) -> Result<FeatureMap> {
    let layer = prev.layer + 1;
    let ctl = params.layer(layer)?;
    let store = &params.store;
    let group = params.config.repatch_len;
    let expected = params.config.patch().channels(prev.layer);
    if prev.shape(tape).0 != expected {
        return Err(Error::Shape {
            op: "ctl_forward",
            left: prev.shape(tape),
            right: (expected, 0),
        });
    }
    let grouped = tape.repatch(prev.values, group)?;
    let w = tape.param(store, ctl.repatch);
    let projected = tape.matmul(w, grouped)?;
    let mut h = tape.instance_norm(projected)?;
    let mask = prev.mask.regroup(group);
    for enc in &ctl.encoders {
        h = encoder_layer(tape, store, h, enc, &mask)?;
    }
    let (g, b) = (tape.param(store, ctl.norm_gain), tape.param(store, ctl.norm_bias));
    let h = tape.layer_norm(h, g, b)?;
    Ok(FeatureMap {
        layer,
        values: h,
        mask,
    })
}

/// Fuses `H*_l` with the previous level:
/// `H_l = LayerNorm(H*_l + W_O concat_h(V_h softmax(K_h^T Q_h / sqrt(d_csa))))`
/// with queries from `H*_l` and keys/values from `H_{l-1}`.
pub fn cross_scale_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    h_star: &FeatureMap,
    h_prev: &FeatureMap,
    params: &CrossScaleParams,
) -> Result<FeatureMap> {
    if h_star.layer != h_prev.layer + 1 {
        return Err(Error::Index {
            what: "cross-scale layer pair",
            index: h_star.layer,
            min: h_prev.layer + 1,
            max: h_prev.layer + 1,
        });
    }
    check_heads(h_star.shape(tape).0, params.heads)?;
    let fused = multi_head_attention(
        tape,
        store,
        h_star.values,
        h_prev.values,
        &params.q,
        &params.k,
        &params.v,
        params.out,
        &h_prev.mask,
    )?;
    let sum = tape.add(h_star.values, fused)?;
    let (g, b) = (tape.param(store, params.norm_gain), tape.param(store, params.norm_bias));
    let h = tape.layer_norm(sum, g, b)?;
    Ok(FeatureMap {
        layer: h_star.layer,
        values: h,
        mask: h_star.mask.clone(),
    })
}

/// Runs the whole encoder on one series and returns `H_1 ..= H_L`, where `L`
/// is the activated depth for the series length. Each fused `H_l` feeds the
/// next layer.
pub fn forward_pyramid(tape: &mut Tape, params: &ModelParams, x: &[f64]) -> Result<Pyramid> {
    let cfg = params.config.patch();
    let sched = schedule(x.len(), &cfg)?;
    let patches = patch_series(x, &cfg)?;
    let initial = embed_initial(tape, params, &patches)?;
    let mut layers: Vec<FeatureMap> = Vec::with_capacity(sched.activated_layers);
    for l in 1..=sched.activated_layers {
        let prev = layers.last().unwrap_or(&initial);
        let star = ctl_forward(tape, params, prev)?;
        let fused = cross_scale_fuse(tape, &params.store, &star, prev, &params.layer(l)?.cross)?;
        layers.push(fused);
    }
    Ok(Pyramid {
        schedule: sched,
        patches,
        initial,
        layers,
    })
}

/// Deepest-layer feature vector `h^1_L` of one series and its layer index.
pub fn encode(params: &ModelParams, x: &[f64]) -> Result<(usize, Vec<f64>)> {
    let mut tape = Tape::new();
    let pyramid = forward_pyramid(&mut tape, params, x)?;
    let deepest = pyramid.deepest().ok_or(Error::UnsupportedLength { len: x.len() })?;
    Ok((deepest.layer, deepest.matrix(&tape).data().to_vec()))
}

/// [`encode`] over many series in parallel, results in input order.
pub fn encode_all(params: &ModelParams, xs: &[Vec<f64>]) -> Result<Vec<(usize, Vec<f64>)>> {
    xs.par_iter().map(|x| encode(params, x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelParams {
        let cfg = ModelConfig {
            patch_len: 4,
            stride: 4,
            repatch_len: 2,
            base_dim: 4,
            max_len: 128,
            heads: 2,
            d_ff: 8,
            encoder_depth: 1,
            alpha: 1e-4,
        };
        ModelParams::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn series(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn shapes_follow_schedule() {
        let params = small();
        for len in 8..=128 {
            let mut tape = Tape::new();
            let pyr = forward_pyramid(&mut tape, &params, &series(len, len as u64)).unwrap();
            assert_eq!(pyr.layers.len(), pyr.schedule.activated_layers);
            let s = &pyr.schedule.layers[0];
            assert_eq!(pyr.initial.shape(&tape), (s.channels, s.patches));
            for map in &pyr.layers {
                let s = &pyr.schedule.layers[map.layer];
                assert_eq!(map.shape(&tape), (s.channels, s.patches), "T={len} l={}", map.layer);
            }
            assert_eq!(pyr.deepest().unwrap().shape(&tape).1, 1);
        }
    }

    #[test]
    fn too_short_input_has_no_layers() {
        let params = small();
        let mut tape = Tape::new();
        let pyr = forward_pyramid(&mut tape, &params, &series(4, 0)).unwrap();
        assert!(pyr.layers.is_empty());
        assert!(encode(&params, &series(4, 0)).is_err());
    }

    #[test]
    fn zero_cross_output_leaves_normed_ctl_output() {
        let mut params = small();
        for l in 1..=params.max_layers() {
            let out = params.layer(l).unwrap().cross.out;
            let shape = params.store.value(out).shape();
            params.store.set(out, Matrix::zeros(shape.0, shape.1)).unwrap();
        }
        let x = series(100, 9);
        let mut tape = Tape::new();
        let patches = patch_series(&x, &params.config.patch()).unwrap();
        let mut prev = embed_initial(&mut tape, &params, &patches).unwrap();
        for l in 1..=schedule(x.len(), &params.config.patch()).unwrap().activated_layers {
            let star = ctl_forward(&mut tape, &params, &prev).unwrap();
            let cross = &params.layer(l).unwrap().cross;
            let fused = cross_scale_fuse(&mut tape, &params.store, &star, &prev, cross).unwrap();
            let g = tape.param(&params.store, cross.norm_gain);
            let b = tape.param(&params.store, cross.norm_bias);
            let normed = tape.layer_norm(star.values, g, b).unwrap();
            assert_eq!(fused.matrix(&tape), tape.value(normed));
            prev = fused;
        }
    }

    #[test]
    fn zero_encoder_outputs_reduce_ctl_to_norms() {
        let mut params = small();
        for l in 1..=params.max_layers() {
            let enc = params.layer(l).unwrap().encoders.clone();
            for e in enc {
                for id in [e.out, e.ff_out, e.ff_out_bias] {
                    let (r, c) = params.store.value(id).shape();
                    params.store.set(id, Matrix::zeros(r, c)).unwrap();
                }
            }
        }
        let x = series(64, 3);
        let mut tape = Tape::new();
        let patches = patch_series(&x, &params.config.patch()).unwrap();
        let h0 = embed_initial(&mut tape, &params, &patches).unwrap();
        let star = ctl_forward(&mut tape, &params, &h0).unwrap();
        let ctl = params.layer(1).unwrap();
        let grouped = tape.repatch(h0.values, params.config.repatch_len).unwrap();
        let w = tape.param(&params.store, ctl.repatch);
        let projected = tape.matmul(w, grouped).unwrap();
        let normed = tape.instance_norm(projected).unwrap();
        let g = tape.param(&params.store, ctl.norm_gain);
        let b = tape.param(&params.store, ctl.norm_bias);
        let expect = tape.layer_norm(normed, g, b).unwrap();
        assert_eq!(star.matrix(&tape), tape.value(expect));
    }

    #[test]
    fn same_interval_same_final_dimension() {
        let params = small();
        let cfg = params.config.patch();
        for layers in 1..=cfg.max_layers() {
            let (lo, hi) = crate::patching::length_interval(layers, &cfg).unwrap();
            let a = encode(&params, &series(lo, 1)).unwrap();
            let b = encode(&params, &series(hi, 2)).unwrap();
            assert_eq!(a.0, layers);
            assert_eq!(a.0, b.0);
            assert_eq!(a.1.len(), b.1.len());
            assert_eq!(a.1.len(), cfg.channels(layers));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let params = small();
        let x = series(90, 4);
        assert_eq!(encode(&params, &x).unwrap(), encode(&params, &x).unwrap());
    }
}
