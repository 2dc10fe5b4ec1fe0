use serde::{Deserialize, Serialize};

/// Standard deviations below this are treated as a constant window.
pub const CONSTANT_STD: f64 = 1e-12;

/// Per-sample standardization fitted on the context window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    /// Divisor used by [`normalize`](Self::normalize); 1 when `constant`.
    pub std: f64,
    pub constant: bool,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
            constant: false,
        }
    }

    /// Population mean and standard deviation of `x`. An empty or constant
    /// window only subtracts the mean.
    pub fn fit(x: &[f64]) -> Self {
        if x.is_empty() {
            return Self::identity();
        }
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < CONSTANT_STD {
            Self {
                mean,
                std: 1.0,
                constant: true,
            }
        } else {
            Self {
                mean,
                std,
                constant: false,
            }
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| (v - self.mean) / self.std).collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| v * self.std + self.mean).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Target {
    None,
    Forecast(Vec<f64>),
    Class(usize),
}

/// One model input in raw units, plus what it should predict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub values: Vec<f64>,
    pub target: Target,
    pub norm: Normalization,
    /// Series or record the sample was cut from.
    pub source: String,
    /// Offset of the first context point inside the source.
    pub start: usize,
}

impl Sample {
    /// Builds a sample and fits its normalization on `values`.
    pub fn new(values: Vec<f64>, target: Target, source: impl Into<String>, start: usize) -> Self {
        let norm = Normalization::fit(&values);
        Self {
            values,
            target,
            norm,
            source: source.into(),
            start,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.norm.normalize(&self.values)
    }

    /// Forecast target in the context's normalized units.
    pub fn normalized_target(&self) -> Option<Vec<f64>> {
        match &self.target {
            Target::Forecast(y) => Some(self.norm.normalize(y)),
            _ => None,
        }
    }

    pub fn label(&self) -> Option<usize> {
        match self.target {
            Target::Class(c) => Some(c),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fit_matches_hand_values() {
        let n = Normalization::fit(&[1.0, 3.0]);
        assert_eq!(n.mean, 2.0);
        assert_eq!(n.std, 1.0);
        assert!(!n.constant);
    }

    #[test]
    fn constant_window_is_flagged() {
        let n = Normalization::fit(&[5.0; 10]);
        assert!(n.constant);
        assert_eq!(n.normalize(&[5.0, 6.0]), vec![0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn round_trip(x in prop::collection::vec(-1e3f64..1e3, 1..64)) {
            let n = Normalization::fit(&x);
            let back = n.denormalize(&n.normalize(&x));
            for (a, b) in x.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
