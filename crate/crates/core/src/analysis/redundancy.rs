use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{stream_rng, Matrix, PAIRS_STREAM};

/// Which column pairs the pairwise metrics visit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSpec {
    /// Every pair is visited when the usable dimension is at most this.
    pub all_pairs_max_dim: usize,
    /// Number of random pairs otherwise.
    pub sampled_pairs: usize,
    pub seed: u64,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self {
            all_pairs_max_dim: 256,
            sampled_pairs: 10_000,
            seed: 0,
        }
    }
}

/// Column pairs `(i, j)`, `i < j`, over `d` columns.
pub fn column_pairs(d: usize, spec: &PairSpec) -> Vec<(usize, usize)> {
    if d < 2 {
        return Vec::new();
    }
    if d <= spec.all_pairs_max_dim {
        let mut out = Vec::with_capacity(d * (d - 1) / 2);
        for i in 0..d {
            for j in i + 1..d {
                out.push((i, j));
            }
        }
        return out;
    }
    let mut rng = stream_rng(spec.seed, PAIRS_STREAM);
    (0..spec.sampled_pairs)
        .map(|_| {
            let i = rng.gen_range(0..d);
            let mut j = rng.gen_range(0..d - 1);
            if j >= i {
                j += 1;
            }
            (i.min(j), i.max(j))
        })
        .collect()
}

fn columns(rep: &Matrix) -> Vec<Vec<f64>> {
    (0..rep.cols()).map(|c| rep.col(c)).collect()
}

/// Columns whose values are not all equal. Dropped columns are logged.
fn usable_columns(rep: &Matrix, what: &str) -> Result<Vec<Vec<f64>>> {
    if rep.rows() < 2 {
        return Err(Error::Length {
            what: "representation rows",
            len: rep.rows(),
            min: 2,
            max: usize::MAX,
        });
    }
    if !rep.is_finite() {
        return Err(Error::NonFinite {
            what: "representation matrix".into(),
        });
    }
    let all = columns(rep);
    let total = all.len();
    let kept: Vec<Vec<f64>> = all
        .into_iter()
        .filter(|c| c.iter().any(|&v| v != c[0]))
        .collect();
    if kept.len() < total {
        log::warn!("{what}: dropped {} constant column(s) of {total}", total - kept.len());
    }
    if kept.len() < 2 {
        return Err(Error::InsufficientFeatures { got: kept.len() });
    }
    Ok(kept)
}

fn standardize(c: &[f64]) -> Vec<f64> {
    let n = c.len() as f64;
    let mean = c.iter().sum::<f64>() / n;
    let ss = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    let norm = ss.sqrt();
    c.iter().map(|v| (v - mean) / norm).collect()
}

fn mean_abs_corr(cols: &[Vec<f64>], spec: &PairSpec) -> f64 {
    let z: Vec<Vec<f64>> = cols.iter().map(|c| standardize(c)).collect();
    let pairs = column_pairs(z.len(), spec);
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let r: f64 = z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum();
            r.clamp(-1.0, 1.0).abs()
        })
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Pearson correlation of two equal-length slices.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (zx, zy) = (standardize(x), standardize(y));
    zx.iter().zip(&zy).map(|(a, b)| a * b).sum()
}

/// Mean `|r|` over column pairs of `rep` (rows are samples).
pub fn pearson_abs(rep: &Matrix, pairs: &PairSpec) -> Result<f64> {
    let cols = usable_columns(rep, "pearson_abs")?;
    Ok(mean_abs_corr(&cols, pairs))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mean `|rho|` of Spearman rank correlation over column pairs.
pub fn spearman_abs(rep: &Matrix, pairs: &PairSpec) -> Result<f64> {
    let cols = usable_columns(rep, "spearman_abs")?;
    let ranked: Vec<Vec<f64>> = cols.par_iter().map(|c| average_ranks(c)).collect();
    Ok(mean_abs_corr(&ranked, pairs))
}

fn bin_column(c: &[f64], bins: usize) -> Vec<usize> {
    let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = hi - lo;
    c.iter()
        .map(|&v| {
            if width <= 0.0 {
                0
            } else {
                (((v - lo) / width * bins as f64).floor() as usize).min(bins - 1)
            }
        })
        .collect()
}

fn mi_binned(bx: &[usize], by: &[usize], bins: usize) -> f64 {
    let n = bx.len() as f64;
    let mut joint = vec![0usize; bins * bins];
    let mut px = vec![0usize; bins];
    let mut py = vec![0usize; bins];
    for (&a, &b) in bx.iter().zip(by) {
        joint[a * bins + b] += 1;
        px[a] += 1;
        py[b] += 1;
    }
    let mut mi = 0.0;
    for a in 0..bins {
        for b in 0..bins {
            let c = joint[a * bins + b];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            mi += pxy * (pxy * n * n / (px[a] as f64 * py[b] as f64)).ln();
        }
    }
    mi.max(0.0)
}

/// Histogram estimate of the mutual information of two columns, in nats,
/// using `bins` equal-width bins over each column's range.
pub fn mutual_information_pair(x: &[f64], y: &[f64], bins: usize) -> f64 {
    mi_binned(&bin_column(x, bins), &bin_column(y, bins), bins)
}

/// Sum of pairwise mutual information over all column pairs. When pairs are
/// sampled, the sample sum is scaled up to the full pair count.
pub fn mutual_information(rep: &Matrix, bins: usize, pairs: &PairSpec) -> Result<f64> {
    if bins < 2 {
        return Err(Error::config("bins", "must be at least 2"));
    }
    let cols = usable_columns(rep, "mutual_information")?;
    if rep.rows() < 4 * bins {
        log::warn!(
            "mutual_information: {} samples for {bins} bins; estimate is biased upward",
            rep.rows()
        );
    }
    let binned: Vec<Vec<usize>> = cols.par_iter().map(|c| bin_column(c, bins)).collect();
    let d = binned.len();
    let list = column_pairs(d, pairs);
    let vals: Vec<f64> = list
        .par_iter()
        .map(|&(i, j)| mi_binned(&binned[i], &binned[j], bins))
        .collect();
    let total_pairs = (d * (d - 1) / 2) as f64;
    Ok(vals.iter().sum::<f64>() * total_pairs / list.len() as f64)
}

/// Tolerance on the explained-variance comparison, so that analytically
/// exact fractions are not lost to rounding.
const VARIANCE_TOL: f64 = 1e-9;

/// Smallest fraction `k / d` of principal components whose eigenvalues
/// explain at least `target` of the total sample variance.
pub fn pca_proportion(rep: &Matrix, target: f64) -> Result<f64> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::config("variance_target", "must lie in (0, 1]"));
    }
    let (n, d) = rep.shape();
    if n < 2 || d == 0 {
        return Err(Error::Degenerate(format!("{n}x{d} representation")));
    }
    if !rep.is_finite() {
        return Err(Error::NonFinite {
            what: "representation matrix".into(),
        });
    }
    if n <= d {
        log::warn!("pca_proportion: {n} samples for {d} features; covariance is rank deficient");
    }
    let mut centered = DMatrix::from_row_slice(n, d, rep.data());
    for mut col in centered.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut vals: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = vals.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("representation has zero variance".into()));
    }
    let mut acc = 0.0;
    for (k, v) in vals.iter().enumerate() {
        acc += v;
        if acc / total >= target - VARIANCE_TOL {
            return Ok((k + 1) as f64 / d as f64);
        }
    }
    Ok(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RedundancySettings {
    pub bins: usize,
    pub variance_target: f64,
    pub pairs: PairSpec,
}

impl Default for RedundancySettings {
    fn default() -> Self {
        Self {
            bins: 16,
            variance_target: 0.8,
            pairs: PairSpec::default(),
        }
    }
}

/// The four redundancy metrics with the settings that produced them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RedundancyReport {
    pub n: usize,
    pub d: usize,
    pub pearson_abs: f64,
    pub spearman_abs: f64,
    pub mutual_info: f64,
    pub pca_proportion: f64,
    pub settings: RedundancySettings,
}

impl RedundancyReport {
    /// Flat `key=value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let s = &self.settings;
        let mut out = String::new();
        let pairs_mode = if self.d <= s.pairs.all_pairs_max_dim {
            "all"
        } else {
            "sampled"
        };
        let lines: [(&str, String); 12] = [
            ("n", self.n.to_string()),
            ("d", self.d.to_string()),
            ("pearson_abs", format!("{:.17e}", self.pearson_abs)),
            ("spearman_abs", format!("{:.17e}", self.spearman_abs)),
            ("mutual_info", format!("{:.17e}", self.mutual_info)),
            ("pca_proportion", format!("{:.17e}", self.pca_proportion)),
            ("mi_estimator", "histogram-equal-width".into()),
            ("mi_bins", s.bins.to_string()),
            ("mi_log_base", "e".into()),
            ("pairs_mode", pairs_mode.into()),
            ("pairs_sampled", s.pairs.sampled_pairs.to_string()),
            ("pairs_seed", s.pairs.seed.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(out, "{k}={v}");
        }
        let _ = writeln!(out, "pca_variance_target={}", s.variance_target);
        out
    }
}

/// Runs every redundancy metric on `rep` (rows are samples).
pub fn redundancy_report(rep: &Matrix, settings: &RedundancySettings) -> Result<RedundancyReport> {
    Ok(RedundancyReport {
        n: rep.rows(),
        d: rep.cols(),
        pearson_abs: pearson_abs(rep, &settings.pairs)?,
        spearman_abs: spearman_abs(rep, &settings.pairs)?,
        mutual_info: mutual_information(rep, settings.bins, &settings.pairs)?,
        pca_proportion: pca_proportion(rep, settings.variance_target)?,
        settings: *settings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn from_cols(cols: &[Vec<f64>]) -> Matrix {
        let n = cols[0].len();
        Matrix::from_fn(n, cols.len(), |r, c| cols[c][r])
    }

    fn all() -> PairSpec {
        PairSpec::default()
    }

    #[test]
    fn identical_columns() {
        let m = from_cols(&[vec![1.0, 5.0, 2.0], vec![1.0, 5.0, 2.0]]);
        assert!((pearson_abs(&m, &all()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn anticorrelated_columns() {
        let m = from_cols(&[vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 3.0, 2.0, 1.0]]);
        assert!((pearson_abs(&m, &all()).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman_abs(&m, &all()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_matches_covariance_formula() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, -1.0, 1.0, -2.0];
        let (mx, my) = (2.5, -0.25);
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        let want = (cov / (vx * vy).sqrt()).abs();
        let m = from_cols(&[x.to_vec(), y.to_vec()]);
        assert!((pearson_abs(&m, &all()).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn average_ranks_with_tie() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 20.0, 5.0, 30.0, 1.0]),
            vec![3.0, 4.5, 4.5, 2.0, 6.0, 1.0]
        );
    }

    #[test]
    fn spearman_hand_ranked() {
        let x = vec![10.0, 20.0, 20.0, 5.0, 30.0, 1.0];
        let y = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let rx = [3.0, 4.5, 4.5, 2.0, 6.0, 1.0];
        let ry = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mean = 3.5;
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mean) * (a - mean)).sum();
        let vy: f64 = ry.iter().map(|b| (b - mean) * (b - mean)).sum();
        let want = (cov / (vx * vy).sqrt()).abs();
        let m = from_cols(&[x, y]);
        assert!((spearman_abs(&m, &all()).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn monotone_transform_has_unit_spearman() {
        let x: Vec<f64> = (0..50).map(|i| ((i * 37) % 50) as f64 / 7.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v.exp() * 3.0 - 1.0).collect();
        let m = from_cols(&[x, y]);
        assert!((spearman_abs(&m, &all()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_columns_dropped() {
        let m = from_cols(&[vec![1.0, 2.0, 3.0], vec![7.0; 3], vec![3.0, 2.0, 1.0]]);
        assert!((pearson_abs(&m, &all()).unwrap() - 1.0).abs() < 1e-15);
        let m = from_cols(&[vec![1.0, 2.0, 3.0], vec![7.0; 3]]);
        assert!(matches!(
            pearson_abs(&m, &all()),
            Err(Error::InsufficientFeatures { got: 1 })
        ));
    }

    #[test]
    fn identity_pair_mi_is_binned_entropy() {
        let x: Vec<f64> = (0..1600).map(|i| i as f64 / 1600.0).collect();
        let mi = mutual_information_pair(&x, &x, 16);
        assert!((mi - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn self_information_matches_marginal_entropy() {
        let x: Vec<f64> = (0..1000).map(|i| ((i * i) % 97) as f64).collect();
        let b = bin_column(&x, 16);
        let mut counts = [0usize; 16];
        for &k in &b {
            counts[k] += 1;
        }
        let h: f64 = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / 1000.0;
                -p * p.ln()
            })
            .sum();
        assert!((mutual_information_pair(&x, &x, 16) - h).abs() < 1e-12);
        assert!(h <= 16f64.ln());
    }

    #[test]
    fn mi_sum_scales_to_pair_count() {
        let x: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let m = from_cols(&[x.clone(), x.clone(), x.clone()]);
        let one = mutual_information_pair(&x, &x, 16);
        let total = mutual_information(&m, 16, &all()).unwrap();
        assert!((total - 3.0 * one).abs() < 1e-12);
        let sampled = PairSpec {
            all_pairs_max_dim: 1,
            sampled_pairs: 5,
            seed: 1,
        };
        let total = mutual_information(&m, 16, &sampled).unwrap();
        assert!((total - 3.0 * one).abs() < 1e-12);
    }

    #[test]
    fn sampled_pairs_are_valid_and_seeded() {
        let spec = PairSpec {
            all_pairs_max_dim: 10,
            sampled_pairs: 500,
            seed: 9,
        };
        let a = column_pairs(2048, &spec);
        assert_eq!(a.len(), 500);
        assert!(a.iter().all(|&(i, j)| i < j && j < 2048));
        assert_eq!(a, column_pairs(2048, &spec));
        assert_eq!(column_pairs(4, &spec).len(), 6);
    }

    /// Rows `+e_i` and `-e_i`: zero mean and identity-proportional covariance.
    fn isotropic(d: usize) -> Matrix {
        Matrix::from_fn(2 * d, d, |r, c| {
            if r % d == c {
                if r < d {
                    1.0
                } else {
                    -1.0
                }
            } else {
                0.0
            }
        })
    }

    #[test]
    fn pca_isotropic() {
        assert_eq!(pca_proportion(&isotropic(10), 0.8).unwrap(), 0.8);
    }

    #[test]
    fn pca_one_dominant_direction() {
        // Axis 0 carries variance 100, the other nine carry 1 each: 100/109 > 0.8.
        let mut m = isotropic(10);
        for r in 0..20 {
            let v = m.get(r, 0);
            m.set(r, 0, v * 10.0);
        }
        assert_eq!(pca_proportion(&m, 0.8).unwrap(), 0.1);
    }

    #[test]
    fn pca_single_feature() {
        let m = Matrix::from_rows(&[[1.0], [2.0], [4.0]]).unwrap();
        assert_eq!(pca_proportion(&m, 0.8).unwrap(), 1.0);
    }

    #[test]
    fn pca_zero_variance() {
        let m = Matrix::filled(5, 3, 2.0);
        assert!(matches!(pca_proportion(&m, 0.8), Err(Error::Degenerate(_))));
    }

    #[test]
    fn report_text_is_flat() {
        let m = Matrix::from_fn(40, 3, |r, c| ((r * (c + 3)) % 11) as f64 + c as f64 * 0.1 * r as f64);
        let rep = redundancy_report(&m, &RedundancySettings::default()).unwrap();
        let text = rep.to_text();
        assert!(text.lines().all(|l| l.split_once('=').is_some()));
        assert!(text.contains("mi_bins=16\n"));
        assert_eq!(text, redundancy_report(&m, &RedundancySettings::default()).unwrap().to_text());
    }

    proptest! {
        #[test]
        fn correlations_invariant_under_positive_affine_maps(
            rows in prop::collection::vec(prop::collection::vec(-10f64..10.0, 3), 6..20),
            scale in 0.1f64..10.0,
            shift in -5f64..5.0,
        ) {
            let m = Matrix::from_fn(rows.len(), 3, |r, c| rows[r][c]);
            let t = m.map(|v| v * scale + shift);
            if let (Ok(a), Ok(b)) = (pearson_abs(&m, &all()), pearson_abs(&t, &all())) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let cubed = m.map(|v| v * v * v);
            if let (Ok(a), Ok(b)) = (spearman_abs(&m, &all()), spearman_abs(&cubed, &all())) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn pca_invariant_under_rotation(
            rows in prop::collection::vec(prop::collection::vec(-10f64..10.0, 2), 8..30),
            angle in 0f64..6.28,
        ) {
            let m = Matrix::from_fn(rows.len(), 2, |r, c| rows[r][c] * if c == 0 { 3.0 } else { 1.0 });
            let (s, co) = angle.sin_cos();
            let rot = Matrix::from_rows(&[[co, -s], [s, co]]).unwrap();
            let r = m.matmul(&rot).unwrap();
            if let (Ok(a), Ok(b)) = (pca_proportion(&m, 0.8), pca_proportion(&r, 0.8)) {
                // Skip spectra sitting on the 0.8 boundary, where rounding can flip k.
                let ev = |x: &Matrix| {
                    let d = DMatrix::from_row_slice(x.rows(), 2, x.data());
                    let mut c = d.clone();
                    for mut col in c.column_iter_mut() { let mu = col.mean(); col.add_scalar_mut(-mu); }
                    let cov = c.transpose() * &c;
                    let e = SymmetricEigen::new(cov).eigenvalues;
                    e.max() / e.sum()
                };
                if (ev(&m) - 0.8).abs() > 1e-6 {
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}
