//! Length and shape arithmetic for the patch pyramid.
//!
//! A series of length `T` is cut into `P^0 = floor((T - l_p) / s_p) + 1`
//! patches. Each pyramid level groups `l_rp` consecutive patches into one
//! (zero-padding the tail), so `P^l = ceil(P^{l-1} / l_rp)` while the channel
//! dimension grows as `d^l = l_rp * d^{l-1}`. Levels are added until a single
//! patch remains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub repatch_len: usize,
    pub base_dim: usize,
    pub max_len: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_len: 16,
            stride: 16,
            repatch_len: 2,
            base_dim: 16,
            max_len: 2048,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 {
            return Err(Error::config("patch_len", "must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride", "must be at least 1"));
        }
        if self.repatch_len < 2 {
            return Err(Error::config("repatch_len", "must be at least 2"));
        }
        if self.base_dim == 0 {
            return Err(Error::config("base_dim", "must be at least 1"));
        }
        if self.max_len < self.patch_len {
            return Err(Error::config("max_len", "must be at least patch_len"));
        }
        Ok(())
    }

    /// Number of patches for a series of length `len` (`len >= patch_len`).
    pub fn patch_count(&self, len: usize) -> usize {
        (len - self.patch_len) / self.stride + 1
    }

    /// Patch count of the longest accepted series.
    pub fn max_patch_count(&self) -> usize {
        self.patch_count(self.max_len)
    }

    /// Pyramid depth of the longest accepted series.
    pub fn max_layers(&self) -> usize {
        layers_for(self.max_patch_count(), self.repatch_len)
    }

    /// Channel dimension at `layer`.
    pub fn channels(&self, layer: usize) -> usize {
        self.base_dim * self.repatch_len.pow(layer as u32)
    }

    /// Number of original patches covered by one patch at `layer`.
    pub fn span(&self, layer: usize) -> usize {
        self.repatch_len.pow(layer as u32)
    }
}

/// Smallest `L` with `group^L >= patches`, i.e. `ceil(log_group(patches))`.
pub fn layers_for(patches: usize, group: usize) -> usize {
    let mut layers = 0;
    let mut reach = 1usize;
    while reach < patches {
        reach = reach.saturating_mul(group);
        layers += 1;
    }
    layers
}

/// Shape of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    pub patches: usize,
    pub channels: usize,
    /// Zero patches appended to the previous level before grouping.
    pub pad_patches: usize,
}

/// Per-level shapes for one input length. `layers[0]` is the initial
/// embedding; `layers[l]` for `1 <= l <= activated_layers` are the CTL outputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PyramidSchedule {
    pub input_len: usize,
    pub patch_count: usize,
    pub activated_layers: usize,
    pub repatch_len: usize,
    pub layers: Vec<LayerShape>,
}

impl PyramidSchedule {
    pub fn layer(&self, l: usize) -> &LayerShape {
        &self.layers[l]
    }

    pub fn final_shape(&self) -> &LayerShape {
        &self.layers[self.activated_layers]
    }

    /// Length of the zero-padded original patch sequence seen by `layer`.
    pub fn padded_patches(&self, layer: usize) -> usize {
        self.repatch_len.pow(layer as u32) * self.layers[layer].patches
    }
}

/// Cuts `x` into a `patch_len x P^0` matrix; column `p` is
/// `x[p * stride .. p * stride + patch_len]`.
pub fn patch_series(x: &[f64], cfg: &PatchConfig) -> Result<Matrix> {
    if x.len() < cfg.patch_len {
        return Err(Error::Length {
            what: "series",
            len: x.len(),
            min: cfg.patch_len,
            max: usize::MAX,
        });
    }
    let count = cfg.patch_count(x.len());
    Ok(Matrix::from_fn(cfg.patch_len, count, |r, c| {
        x[c * cfg.stride + r]
    }))
}

/// Builds the pyramid schedule for a series of length `len`.
pub fn schedule(len: usize, cfg: &PatchConfig) -> Result<PyramidSchedule> {
    if len < cfg.patch_len || len > cfg.max_len {
        return Err(Error::Length {
            what: "input length",
            len,
            min: cfg.patch_len,
            max: cfg.max_len,
        });
    }
    let p0 = cfg.patch_count(len);
    let depth = layers_for(p0, cfg.repatch_len);
    let mut layers = Vec::with_capacity(depth + 1);
    layers.push(LayerShape {
        patches: p0,
        channels: cfg.base_dim,
        pad_patches: 0,
    });
    let mut prev = p0;
    for l in 1..=depth {
        let patches = prev.div_ceil(cfg.repatch_len);
        layers.push(LayerShape {
            patches,
            channels: cfg.channels(l),
            pad_patches: patches * cfg.repatch_len - prev,
        });
        prev = patches;
    }
    Ok(PyramidSchedule {
        input_len: len,
        patch_count: p0,
        activated_layers: depth,
        repatch_len: cfg.repatch_len,
        layers,
    })
}

/// Closed interval of input lengths that activate exactly `layers` levels,
/// clipped to `max_len`.
pub fn length_interval(layers: usize, cfg: &PatchConfig) -> Result<(usize, usize)> {
    let max_layers = cfg.max_layers();
    if layers == 0 || layers > max_layers {
        return Err(Error::Index {
            what: "layer count",
            index: layers,
            min: 1,
            max: max_layers,
        });
    }
    let lo = cfg.span(layers - 1) * cfg.stride + cfg.patch_len;
    let hi = cfg.span(layers) * cfg.stride + cfg.patch_len - 1;
    Ok((lo, hi.min(cfg.max_len)))
}

/// Concatenates each group of `group` consecutive columns of `h` into one
/// column, appending zero columns first when the count is not a multiple of
/// `group`. Output is `(group * d) x ceil(P / group)`.
pub fn repatch(h: &Matrix, group: usize) -> Result<Matrix> {
    let (d, p) = h.shape();
    if p == 0 || group == 0 {
        return Err(Error::Shape {
            op: "repatch",
            left: (d, p),
            right: (group, 1),
        });
    }
    let out_cols = p.div_ceil(group);
    let mut out = Matrix::zeros(group * d, out_cols);
    for q in 0..out_cols {
        for j in 0..group {
            let src = q * group + j;
            if src >= p {
                break;
            }
            for c in 0..d {
                out.set(j * d + c, q, h.get(c, src));
            }
        }
    }
    Ok(out)
}

/// Original-patch range reconstructed by one patch of one level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentMap {
    pub layer: usize,
    pub patch: usize,
    /// First original patch index (inclusive).
    pub start: usize,
    /// One past the last original patch index, within the padded sequence.
    pub end: usize,
}

/// Range of original patches `[span * patch, span * (patch + 1))` for the
/// zero-based `patch` at `layer`, where `span = l_rp^layer`.
pub fn segment_of(layer: usize, patch: usize, sched: &PyramidSchedule) -> Result<SegmentMap> {
    if layer == 0 || layer > sched.activated_layers {
        return Err(Error::Index {
            what: "layer",
            index: layer,
            min: 1,
            max: sched.activated_layers,
        });
    }
    let count = sched.layers[layer].patches;
    if patch >= count {
        return Err(Error::Index {
            what: "patch",
            index: patch,
            min: 0,
            max: count - 1,
        });
    }
    let span = sched.repatch_len.pow(layer as u32);
    Ok(SegmentMap {
        layer,
        patch,
        start: span * patch,
        end: span * (patch + 1),
    })
}

/// Zero-pads the patch matrix with extra columns up to `total` patches.
pub fn pad_patches(patches: &Matrix, total: usize) -> Matrix {
    let (rows, cols) = patches.shape();
    Matrix::from_fn(rows, total.max(cols), |r, c| {
        if c < cols {
            patches.get(r, c)
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn defaults() -> PatchConfig {
        PatchConfig::default()
    }

    /// Counts valid window starts directly.
    fn enumerate_windows(len: usize, cfg: &PatchConfig) -> usize {
        (0..len).filter(|s| s % cfg.stride == 0 && s + cfg.patch_len <= len).count()
    }

    #[test]
    fn single_window_series() {
        let x: Vec<f64> = (0..16).map(f64::from).collect();
        let p = patch_series(&x, &defaults()).unwrap();
        assert_eq!(p.shape(), (16, 1));
        assert_eq!(p.col(0), x);
    }

    #[test]
    fn patch_counts_match_enumeration() {
        let cfg = defaults();
        for len in [2048, 512] {
            let x = vec![0.0; len];
            let p = patch_series(&x, &cfg).unwrap();
            assert_eq!(p.cols(), enumerate_windows(len, &cfg));
        }
        assert_eq!(enumerate_windows(2048, &cfg), 128);
        assert_eq!(enumerate_windows(512, &cfg), 32);
    }

    #[test]
    fn patch_columns_hold_windows() {
        let cfg = PatchConfig {
            patch_len: 4,
            stride: 3,
            ..defaults()
        };
        let x: Vec<f64> = (0..11).map(f64::from).collect();
        let p = patch_series(&x, &cfg).unwrap();
        assert_eq!(p.cols(), 3);
        assert_eq!(p.col(2), vec![6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn short_series_is_length_error() {
        assert!(matches!(
            patch_series(&[0.0; 15], &defaults()),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn schedule_at_max_len() {
        let s = schedule(2048, &defaults()).unwrap();
        assert_eq!(s.patch_count, 128);
        assert_eq!(s.activated_layers, 7);
        assert_eq!(s.final_shape().channels, 2048);
        assert_eq!(s.final_shape().patches, 1);
        let patches: Vec<usize> = s.layers.iter().map(|l| l.patches).collect();
        assert_eq!(patches, vec![128, 64, 32, 16, 8, 4, 2, 1]);
    }

    #[test]
    fn schedule_single_patch_has_no_layers() {
        let s = schedule(16, &defaults()).unwrap();
        assert_eq!(s.patch_count, 1);
        assert_eq!(s.activated_layers, 0);
    }

    #[test]
    fn schedule_interval_boundary() {
        let a = schedule(527, &defaults()).unwrap();
        assert_eq!((a.patch_count, a.activated_layers), (32, 5));
        let b = schedule(528, &defaults()).unwrap();
        assert_eq!((b.patch_count, b.activated_layers), (33, 6));
        // 33 -> 17 -> 9 -> 5 -> 3 -> 2 -> 1
        let pads: Vec<usize> = b.layers.iter().map(|l| l.pad_patches).collect();
        assert_eq!(pads, vec![0, 1, 1, 1, 1, 1, 0]);
    }

    #[test]
    fn schedule_rejects_out_of_range() {
        assert!(schedule(15, &defaults()).is_err());
        assert!(schedule(2049, &defaults()).is_err());
    }

    #[test]
    fn repatch_exact_division() {
        let h = Matrix::from_fn(3, 4, |r, c| (10 * c + r) as f64);
        let out = repatch(&h, 2).unwrap();
        assert_eq!(out.shape(), (6, 2));
        assert_eq!(out.col(0), vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(out.col(1), vec![20.0, 21.0, 22.0, 30.0, 31.0, 32.0]);
    }

    #[test]
    fn repatch_pads_tail() {
        let h = Matrix::from_fn(2, 5, |r, c| (1 + 10 * c + r) as f64);
        let out = repatch(&h, 2).unwrap();
        assert_eq!(out.shape(), (4, 3));
        assert_eq!(out.col(2), vec![41.0, 42.0, 0.0, 0.0]);
        let single = repatch(&Matrix::filled(3, 1, 1.0), 2).unwrap();
        assert_eq!(single.shape(), (6, 1));
        assert_eq!(single.col(0), vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn interval_values() {
        let cfg = defaults();
        assert_eq!(length_interval(5, &cfg).unwrap(), (272, 527));
        assert_eq!(length_interval(7, &cfg).unwrap(), (1040, 2048));
        assert_eq!(length_interval(1, &cfg).unwrap(), (32, 47));
        assert!(length_interval(0, &cfg).is_err());
        assert!(length_interval(8, &cfg).is_err());
    }

    #[test]
    fn interval_matches_schedule_exhaustively() {
        let cfg = defaults();
        for len in cfg.patch_len..=cfg.max_len {
            let l = schedule(len, &cfg).unwrap().activated_layers;
            for cand in 1..=cfg.max_layers() {
                let (lo, hi) = length_interval(cand, &cfg).unwrap();
                assert_eq!(l == cand, (lo..=hi).contains(&len), "len {len} cand {cand}");
            }
        }
    }

    #[test]
    fn segments() {
        let s = schedule(2048, &defaults()).unwrap();
        let a = segment_of(1, 0, &s).unwrap();
        assert_eq!((a.start, a.end), (0, 2));
        let b = segment_of(3, 1, &s).unwrap();
        assert_eq!((b.start, b.end), (8, 16));
        let root = segment_of(7, 0, &s).unwrap();
        assert_eq!((root.start, root.end), (0, s.padded_patches(7)));
        assert!(segment_of(0, 0, &s).is_err());
        assert!(segment_of(8, 0, &s).is_err());
        assert!(segment_of(7, 1, &s).is_err());
    }

    proptest! {
        #[test]
        fn ceil_division_reaches_one(p0 in 1usize..=4096, group in 2usize..=4) {
            let depth = layers_for(p0, group);
            let mut p = p0;
            for _ in 0..depth {
                p = p.div_ceil(group);
            }
            prop_assert_eq!(p, 1);
            if depth > 0 {
                // one fewer level leaves more than one patch
                prop_assert!(p0.div_ceil(group.pow(depth as u32 - 1)) > 1);
            }
        }

        #[test]
        fn repatch_preserves_entries(d in 1usize..5, p in 1usize..12, group in 2usize..4) {
            let h = Matrix::from_fn(d, p, |r, c| (1 + r + d * c) as f64);
            let out = repatch(&h, group).unwrap();
            let mut seen: Vec<f64> = out.data().iter().copied().filter(|v| *v != 0.0).collect();
            seen.sort_by(f64::total_cmp);
            let mut expected = h.data().to_vec();
            expected.sort_by(f64::total_cmp);
            prop_assert_eq!(seen, expected);
            let zeros = out.data().iter().filter(|v| **v == 0.0).count();
            prop_assert_eq!(zeros, (out.cols() * group - p) * d);
        }

        #[test]
        fn segments_partition_padded_range(len in 16usize..=2048) {
            let s = schedule(len, &defaults()).unwrap();
            for l in 1..=s.activated_layers {
                let mut next = 0;
                for p in 0..s.layers[l].patches {
                    let seg = segment_of(l, p, &s).unwrap();
                    prop_assert_eq!(seg.start, next);
                    next = seg.end;
                }
                prop_assert_eq!(next, s.padded_patches(l));
            }
        }

        #[test]
        fn feature_volume_never_shrinks(len in 16usize..=2048) {
            let s = schedule(len, &defaults()).unwrap();
            let base = s.layers[0].channels * s.layers[0].patches;
            let mut exact = true;
            for l in 1..=s.activated_layers {
                exact &= s.layers[l].pad_patches == 0;
                let vol = s.layers[l].channels * s.layers[l].patches;
                prop_assert!(vol >= base);
                if exact {
                    prop_assert_eq!(vol, base);
                }
            }
        }
    }
}
