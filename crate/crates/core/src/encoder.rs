//! Pre-norm transformer encoder layer over `d x P` feature maps.
//!
//! Feature maps keep channels on rows and patches on columns, so every
//! projection is a left multiplication `W * H` and attention scores are
//! `K^T Q` with one column per query.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamGroup, ParamId, ParamStore, Tape, Var};

/// Per-patch padding flags; `true` marks a patch that attention ignores.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask(Vec<bool>);

impl AttentionMask {
    /// All patches real.
    pub fn none(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.0[patch]
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|m| *m)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    /// Mask after grouping `group` consecutive patches: a group is real when
    /// it contains at least one real patch.
    pub fn regroup(&self, group: usize) -> Self {
        Self(
            self.0
                .chunks(group)
                .map(|chunk| chunk.iter().all(|m| *m))
                .collect(),
        )
    }
}

/// Learnable weights of one encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub dim: usize,
    pub heads: usize,
    pub q: Vec<ParamId>,
    pub k: Vec<ParamId>,
    pub v: Vec<ParamId>,
    pub out: ParamId,
    pub ff_in: ParamId,
    pub ff_in_bias: ParamId,
    pub ff_out: ParamId,
    pub ff_out_bias: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

pub(crate) fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

pub(crate) fn check_heads(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::config(
            "heads",
            format!("channel dimension {dim} is not divisible by {heads} heads"),
        ));
    }
    Ok(dim / heads)
}

/// Registers a LayerNorm gain (ones) and bias (zeros).
pub(crate) fn register_norm(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
) -> Result<(ParamId, ParamId)> {
    let gain = store.insert(
        format!("{prefix}.gain"),
        ParamGroup::Backbone,
        Matrix::filled(dim, 1, 1.0),
    )?;
    let bias = store.insert(
        format!("{prefix}.bias"),
        ParamGroup::Backbone,
        Matrix::zeros(dim, 1),
    )?;
    Ok((gain, bias))
}

impl EncoderLayerParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let head_dim = check_heads(dim, heads)?;
        let bb = ParamGroup::Backbone;
        let proj = |name: &str, store: &mut ParamStore, rng: &mut R| -> Result<Vec<ParamId>> {
            (0..heads)
                .map(|h| {
                    store.insert_uniform(
                        format!("{prefix}.attn.{name}.{h}"),
                        bb,
                        head_dim,
                        dim,
                        init_bound(dim),
                        rng,
                    )
                })
                .collect()
        };
        let q = proj("q", store, rng)?;
        let k = proj("k", store, rng)?;
        let v = proj("v", store, rng)?;
        let out = store.insert_uniform(
            format!("{prefix}.attn.out"),
            bb,
            dim,
            dim,
            init_bound(dim),
            rng,
        )?;
        let ff_in =
            store.insert_uniform(format!("{prefix}.ff.in"), bb, d_ff, dim, init_bound(dim), rng)?;
        let ff_in_bias = store.insert(format!("{prefix}.ff.in_bias"), bb, Matrix::zeros(d_ff, 1))?;
        let ff_out =
            store.insert_uniform(format!("{prefix}.ff.out"), bb, dim, d_ff, init_bound(d_ff), rng)?;
        let ff_out_bias = store.insert(format!("{prefix}.ff.out_bias"), bb, Matrix::zeros(dim, 1))?;
        let (norm1_gain, norm1_bias) = register_norm(store, &format!("{prefix}.norm1"), dim)?;
        let (norm2_gain, norm2_bias) = register_norm(store, &format!("{prefix}.norm2"), dim)?;
        Ok(Self {
            dim,
            heads,
            q,
            k,
            v,
            out,
            ff_in,
            ff_in_bias,
            ff_out,
            ff_out_bias,
            norm1_gain,
            norm1_bias,
            norm2_gain,
            norm2_bias,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Multi-head attention with queries from `query_src` and keys/values from
/// `kv_src`. Per head: `O_h = V_h softmax(K_h^T Q_h / sqrt(d_head))`; heads
/// are stacked and passed through `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    query_src: Var,
    kv_src: Var,
    q: &[ParamId],
    k: &[ParamId],
    v: &[ParamId],
    out: ParamId,
    key_mask: &AttentionMask,
) -> Result<Var> {
    let keys = tape.shape(kv_src).1;
    if key_mask.len() != keys {
        return Err(Error::Shape {
            op: "attention mask",
            left: tape.shape(kv_src),
            right: (key_mask.len(), 1),
        });
    }
    let mask = key_mask.any().then(|| key_mask.as_slice());
    let mut heads = Vec::with_capacity(q.len());
    for h in 0..q.len() {
        let (wq, wk, wv) = (
            tape.param(store, q[h]),
            tape.param(store, k[h]),
            tape.param(store, v[h]),
        );
        let head_dim = tape.shape(wq).0;
        let qh = tape.matmul(wq, query_src)?;
        let kh = tape.matmul(wk, kv_src)?;
        let vh = tape.matmul(wv, kv_src)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(kt, qh)?;
        let weights = tape.softmax_columns(scores, (head_dim as f64).sqrt(), mask)?;
        heads.push(tape.matmul(vh, weights)?);
    }
    let stacked = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_rows(&heads)?
    };
    let wo = tape.param(store, out);
    tape.matmul(wo, stacked)
}

/// Multi-head self-attention; output has the input's shape.
pub fn self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    params: &EncoderLayerParams,
    mask: &AttentionMask,
) -> Result<Var> {
    let dim = tape.shape(h).0;
    check_heads(dim, params.heads)?;
    if dim != params.dim {
        return Err(Error::Shape {
            op: "self_attention",
            left: tape.shape(h),
            right: (params.dim, 0),
        });
    }
    multi_head_attention(
        tape, store, h, h, &params.q, &params.k, &params.v, params.out, mask,
    )
}

/// `x = h + MHA(LN1(h))`, then `x + FFN(LN2(x))` with a GELU feed-forward.
pub fn encoder_layer(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    params: &EncoderLayerParams,
    mask: &AttentionMask,
) -> Result<Var> {
    let (g1, b1) = (
        tape.param(store, params.norm1_gain),
        tape.param(store, params.norm1_bias),
    );
    let normed = tape.layer_norm(h, g1, b1)?;
    let attn = self_attention(tape, store, normed, params, mask)?;
    let x = tape.add(h, attn)?;

    let (g2, b2) = (
        tape.param(store, params.norm2_gain),
        tape.param(store, params.norm2_bias),
    );
    let normed = tape.layer_norm(x, g2, b2)?;
    let w1 = tape.param(store, params.ff_in);
    let bias1 = tape.param(store, params.ff_in_bias);
    let hidden = tape.matmul(w1, normed)?;
    let hidden = tape.add_col_bias(hidden, bias1)?;
    let hidden = tape.gelu(hidden);
    let w2 = tape.param(store, params.ff_out);
    let bias2 = tape.param(store, params.ff_out_bias);
    let ff = tape.matmul(w2, hidden)?;
    let ff = tape.add_col_bias(ff, bias2)?;
    tape.add(x, ff)
}
