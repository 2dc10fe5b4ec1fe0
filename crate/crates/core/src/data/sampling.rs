use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, Target};
use crate::error::{Error, Result};

/// Train/validation/test fractions of a series, applied in time order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("split.train", self.train), ("split.val", self.val), ("split.test", self.test)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(name, "must be a non-negative fraction"));
            }
        }
        if !(self.train > 0.0) {
            return Err(Error::config("split.train", "must be positive"));
        }
        let total = self.train + self.val + self.test;
        if total > 1.0 + 1e-9 {
            return Err(Error::config("split", format!("fractions sum to {total} > 1")));
        }
        Ok(())
    }
}

/// Contiguous, ordered, disjoint index ranges `[train, val, test]` covering
/// the leading `train + val + test` fraction of `len` points.
pub fn chronological_split(len: usize, spec: &SplitSpec) -> Result<[Range<usize>; 3]> {
    spec.validate()?;
    let a = (len as f64 * spec.train).floor() as usize;
    let b = (len as f64 * (spec.train + spec.val)).floor() as usize;
    let c = ((len as f64 * (spec.train + spec.val + spec.test)).floor() as usize).min(len);
    Ok([0..a, a..b, b..c])
}

/// Uniform integer length in `[min, max]`.
pub fn draw_length<R: Rng + ?Sized>(rng: &mut R, min: usize, max: usize) -> usize {
    rng.gen_range(min..=max)
}

/// Variable-length forecasting windows over `series[range]`.
///
/// Anchors `t` start at `range.start + max` and advance by `stride` while the
/// horizon still fits, where `max = min(max_len, range.len() - horizon)`.
/// Each anchor gets a context length drawn uniformly from `[min_len, max]`,
/// so every length is feasible at every anchor. Context and target never
/// leave `range`. A zero horizon gives unlabeled windows for pretraining.
pub fn sliding_window_varlen<R: Rng + ?Sized>(
    series: &[f64],
    range: Range<usize>,
    min_len: usize,
    max_len: usize,
    horizon: usize,
    stride: usize,
    source: &str,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    if min_len == 0 || min_len > max_len {
        return Err(Error::config("min_len", "must satisfy 1 <= min_len <= max_len"));
    }
    if stride == 0 {
        return Err(Error::config("stride", "must be positive"));
    }
    if range.end > series.len() || range.start > range.end {
        return Err(Error::Index {
            what: "window range end",
            index: range.end,
            min: range.start,
            max: series.len(),
        });
    }
    let span = range.len();
    if span < min_len + horizon {
        return Err(Error::Length {
            what: "series range",
            len: span,
            min: min_len + horizon,
            max: usize::MAX,
        });
    }
    let max = max_len.min(span - horizon);
    let mut out = Vec::new();
    let mut t = range.start + max;
    while t + horizon <= range.end {
        let len = draw_length(rng, min_len, max);
        let start = t - len;
        let target = if horizon == 0 {
            Target::None
        } else {
            Target::Forecast(series[t..t + horizon].to_vec())
        };
        out.push(Sample::new(
            series[start..t].to_vec(),
            target,
            source,
            start,
        ));
        t += stride;
    }
    Ok(out)
}

/// How a shorter view of a long classification record is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsampleMode {
    /// Random indices without replacement, kept in time order.
    #[default]
    Index,
    /// One random contiguous crop.
    Crop,
}

/// Draws a length uniformly from `[min_len, min(len, max_len)]` and takes
/// that many points of `values` by `mode`. The label is kept.
pub fn subsample_ucr<R: Rng + ?Sized>(
    values: &[f64],
    label: usize,
    min_len: usize,
    max_len: usize,
    mode: SubsampleMode,
    source: &str,
    rng: &mut R,
) -> Result<Sample> {
    let n = values.len();
    if n < min_len {
        return Err(Error::Length {
            what: "classification record",
            len: n,
            min: min_len,
            max: usize::MAX,
        });
    }
    let hi = n.min(max_len);
    if hi < min_len {
        return Err(Error::config("max_len", "is below min_len"));
    }
    let len = draw_length(rng, min_len, hi);
    let (picked, start) = if len == n {
        (values.to_vec(), 0)
    } else {
        match mode {
            SubsampleMode::Index => {
                let mut idx = rand::seq::index::sample(rng, n, len).into_vec();
                idx.sort_unstable();
                let start = idx[0];
                (idx.into_iter().map(|i| values[i]).collect(), start)
            }
            SubsampleMode::Crop => {
                let start = rng.gen_range(0..=n - len);
                (values[start..start + len].to_vec(), start)
            }
        }
    };
    Ok(Sample::new(picked, Target::Class(label), source, start))
}

/// Indices picked by [`SubsampleMode::Index`], exposed for inspection.
pub fn subsample_indices<R: Rng + ?Sized>(rng: &mut R, n: usize, len: usize) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, len).into_vec();
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_is_ordered_and_disjoint() {
        let [a, b, c] = chronological_split(17420, &SplitSpec::default()).unwrap();
        assert_eq!(a, 0..10452);
        assert_eq!(b.start, a.end);
        assert_eq!(c.start, b.end);
        assert_eq!(c.end, 17420);
    }

    #[test]
    fn bad_split_is_rejected() {
        let spec = SplitSpec {
            train: 0.8,
            val: 0.2,
            test: 0.2,
        };
        assert!(matches!(spec.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn length_draws_fill_four_bins_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (lo, hi) = (512usize, 2048usize);
        let width = (hi - lo + 1) as f64 / 4.0;
        let mut bins = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            let t = draw_length(&mut rng, lo, hi);
            let b = (((t - lo) as f64) / width).floor() as usize;
            bins[b.min(3)] += 1;
        }
        for b in bins {
            let share = b as f64 / n as f64;
            assert!((share - 0.25).abs() <= 0.02, "bin share {share}");
        }
    }

    #[test]
    fn windows_cover_every_length_and_stay_in_range() {
        let series: Vec<f64> = (0..2048 + 96).map(|i| i as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = sliding_window_varlen(&series, 0..series.len(), 512, 2048, 96, 1, "s", &mut rng).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].len() >= 512 && w[0].len() <= 2048);
        assert_eq!(w[0].start + w[0].len(), 2048);
        match &w[0].target {
            Target::Forecast(y) => assert_eq!(y[0], 2048.0),
            _ => panic!(),
        }
    }

    #[test]
    fn windows_are_seed_deterministic() {
        let series: Vec<f64> = (0..5000).map(|i| (i as f64).sin()).collect();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sliding_window_varlen(&series, 100..4900, 64, 512, 24, 50, "s", &mut rng).unwrap()
        };
        assert_eq!(run(3), run(3));
        for s in run(3) {
            assert!(s.start >= 100 && s.start + s.len() + 24 <= 4900);
        }
    }

    #[test]
    fn short_range_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = sliding_window_varlen(&[0.0; 100], 0..100, 64, 128, 40, 1, "s", &mut rng);
        assert!(matches!(r, Err(Error::Length { .. })));
    }

    #[test]
    fn full_length_subsample_is_identity() {
        let v: Vec<f64> = (0..512).map(|i| i as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = subsample_ucr(&v, 2, 512, 2048, SubsampleMode::Index, "r", &mut rng).unwrap();
        assert_eq!(s.values, v);
        assert_eq!(s.label(), Some(2));
    }

    #[test]
    fn index_subsample_is_increasing_and_contained() {
        let v: Vec<f64> = (0..1024).map(|i| i as f64 * 0.5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let idx = subsample_indices(&mut rng, 1024, 512);
        assert_eq!(idx.len(), 512);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(idx.iter().all(|&i| i < 1024));
        for _ in 0..20 {
            let s = subsample_ucr(&v, 4, 512, 2048, SubsampleMode::Index, "r", &mut rng).unwrap();
            assert!(s.len() >= 512 && s.len() <= 1024);
            assert!(s.values.windows(2).all(|w| w[0] < w[1]));
            assert!(s.values.iter().all(|x| v.contains(x)));
            assert_eq!(s.label(), Some(4));
        }
    }

    #[test]
    fn crop_is_contiguous() {
        let v: Vec<f64> = (0..1024).map(|i| i as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = subsample_ucr(&v, 0, 512, 2048, SubsampleMode::Crop, "r", &mut rng).unwrap();
        assert!(s.values.windows(2).all(|w| w[1] - w[0] == 1.0));
        assert_eq!(s.values[0], s.start as f64);
    }

    #[test]
    fn short_record_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = subsample_ucr(&[0.0; 100], 0, 512, 2048, SubsampleMode::Index, "r", &mut rng);
        assert!(matches!(r, Err(Error::Length { .. })));
    }
}
