use rand::Rng;

use super::ModelConfig;
use crate::encoder::{check_heads, init_bound, register_norm, EncoderLayerParams};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamGroup, ParamId, ParamStore};

const POS_INIT: f64 = 0.02;

/// Patch embedding, positional table, and the initial encoder stack.
#[derive(Clone, Debug)]
pub struct EmbedParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub position: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub encoders: Vec<EncoderLayerParams>,
}

/// Cross-attention from level `l` (queries) onto level `l - 1` (keys/values).
#[derive(Clone, Debug)]
pub struct CrossScaleParams {
    pub heads: usize,
    pub q: Vec<ParamId>,
    pub k: Vec<ParamId>,
    pub v: Vec<ParamId>,
    pub out: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
}

/// Linear decoder from a level-`l` patch feature to its original segment.
#[derive(Clone, Copy, Debug)]
pub struct ReconParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Everything owned by one conv-like transformer layer.
#[derive(Clone, Debug)]
pub struct CtlParams {
    pub layer: usize,
    pub repatch: ParamId,
    pub encoders: Vec<EncoderLayerParams>,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub cross: CrossScaleParams,
    pub recon: ReconParams,
}

/// The backbone: configuration, parameter storage, and typed handles.
/// Task heads register into the same store.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed: EmbedParams,
    /// `layers[l - 1]` holds CTL `l`.
    pub layers: Vec<CtlParams>,
}

impl ModelParams {
    /// Fresh parameters. Projections draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    /// biases start at zero and norm gains at one.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, ParamStore::new(), rng)
    }

    /// Binds an existing store (e.g. from a checkpoint). Every backbone
    /// parameter must already be present with the right shape.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let before = store.len();
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let built = Self::build(config, store, &mut rng)?;
        if built.store.len() != before {
            let missing = built
                .store
                .iter()
                .skip(before)
                .map(|(_, p)| p.name.clone())
                .next()
                .unwrap_or_default();
            return Err(Error::MissingParameter(missing));
        }
        Ok(built)
    }

    fn build<R: Rng + ?Sized>(config: ModelConfig, mut store: ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let patch = config.patch();
        let d0 = config.base_dim;
        let bb = ParamGroup::Backbone;

        let weight = store.insert_uniform(
            "embed.weight",
            bb,
            d0,
            config.patch_len,
            init_bound(config.patch_len),
            rng,
        )?;
        let bias = store.insert("embed.bias", bb, Matrix::zeros(d0, 1))?;
        let position = store.insert_uniform(
            "embed.position",
            bb,
            d0,
            patch.max_patch_count(),
            POS_INIT,
            rng,
        )?;
        let (norm_gain, norm_bias) = register_norm(&mut store, "embed.norm", d0)?;
        let encoders = (0..config.encoder_depth)
            .map(|i| {
                EncoderLayerParams::register(
                    &mut store,
                    &format!("embed.encoder.{i}"),
                    d0,
                    config.heads,
                    config.d_ff,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let embed = EmbedParams {
            weight,
            bias,
            position,
            norm_gain,
            norm_bias,
            encoders,
        };

        let mut layers = Vec::new();
        for l in 1..=config.max_layers() {
            let (d_prev, d) = (patch.channels(l - 1), patch.channels(l));
            let p = format!("ctl.{l}");
            let repatch =
                store.insert_uniform(format!("{p}.repatch"), bb, d, d, init_bound(d), rng)?;
            let encoders = (0..config.encoder_depth)
                .map(|i| {
                    EncoderLayerParams::register(
                        &mut store,
                        &format!("{p}.encoder.{i}"),
                        d,
                        config.heads,
                        config.d_ff,
                        rng,
                    )
                })
                .collect::<Result<_>>()?;
            let (norm_gain, norm_bias) = register_norm(&mut store, &format!("{p}.norm"), d)?;

            let d_csa = check_heads(d, config.heads)?;
            let mut heads_of = |name: &str, fan_in: usize, store: &mut ParamStore| -> Result<Vec<ParamId>> {
                (0..config.heads)
                    .map(|h| {
                        store.insert_uniform(
                            format!("{p}.cross.{name}.{h}"),
                            bb,
                            d_csa,
                            fan_in,
                            init_bound(fan_in),
                            rng,
                        )
                    })
                    .collect()
            };
            let q = heads_of("q", d, &mut store)?;
            let k = heads_of("k", d_prev, &mut store)?;
            let v = heads_of("v", d_prev, &mut store)?;
            let out = store.insert_uniform(format!("{p}.cross.out"), bb, d, d, init_bound(d), rng)?;
            let (cg, cb) = register_norm(&mut store, &format!("{p}.cross.norm"), d)?;
            let cross = CrossScaleParams {
                heads: config.heads,
                q,
                k,
                v,
                out,
                norm_gain: cg,
                norm_bias: cb,
            };

            let seg_len = patch.span(l) * config.patch_len;
            let recon = ReconParams {
                weight: store.insert_uniform(
                    format!("{p}.recon.weight"),
                    ParamGroup::Reconstruction,
                    seg_len,
                    d,
                    init_bound(d),
                    rng,
                )?,
                bias: store.insert(
                    format!("{p}.recon.bias"),
                    ParamGroup::Reconstruction,
                    Matrix::zeros(seg_len, 1),
                )?,
            };
            layers.push(CtlParams {
                layer: l,
                repatch,
                encoders,
                norm_gain,
                norm_bias,
                cross,
                recon,
            });
        }
        Ok(Self {
            config,
            store,
            embed,
            layers,
        })
    }

    pub fn max_layers(&self) -> usize {
        self.layers.len()
    }

    /// Handles for CTL `layer` (1-based).
    pub fn layer(&self, layer: usize) -> Result<&CtlParams> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::Index {
                what: "layer",
                index: layer,
                min: 1,
                max: self.layers.len(),
            });
        }
        Ok(&self.layers[layer - 1])
    }

    /// Every backbone parameter id (excludes reconstruction and heads).
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Backbone)
            .map(|(id, _)| id)
            .collect()
    }
}
