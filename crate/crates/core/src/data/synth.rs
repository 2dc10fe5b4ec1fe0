use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Sum of the first three harmonics of `period`, random amplitudes and phases.
    Sine,
    /// `x[t] = coefficient * x[t-1] + noise * e[t]`, standard normal `e`.
    Ar1,
    /// One sinusoidal template per class; class `k` has period `period / (k + 1)`.
    Classes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub length: usize,
    pub count: usize,
    /// Standard deviation of additive (sine, classes) or innovation (ar1) noise.
    pub noise: f64,
    pub seed: u64,
    pub period: usize,
    pub coefficient: f64,
    pub classes: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SynthKind::Sine,
            length: 2048,
            count: 64,
            noise: 0.0,
            seed: 0,
            period: 64,
            coefficient: 0.9,
            classes: 3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::config("synthetic.length", "must be positive"));
        }
        if self.count == 0 {
            return Err(Error::config("synthetic.count", "must be positive"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::config("synthetic.noise", "must be finite and non-negative"));
        }
        match self.kind {
            SynthKind::Sine | SynthKind::Classes if self.period == 0 => {
                Err(Error::config("synthetic.period", "must be positive"))
            }
            SynthKind::Ar1 if !(self.coefficient.abs() < 1.0) => Err(Error::config(
                "synthetic.coefficient",
                "must lie in (-1, 1) for a stationary process",
            )),
            SynthKind::Classes if self.classes < 2 => {
                Err(Error::config("synthetic.classes", "must be at least 2"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub series: Vec<Vec<f64>>,
    /// Class of each series for the `classes` kind.
    pub labels: Option<Vec<usize>>,
}

const AR_BURN_IN: usize = 200;

/// Generates `spec.count` series of `spec.length` points.
pub fn synth_generate<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<SynthDataset> {
    spec.validate()?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = |rng: &mut R| {
        if spec.noise > 0.0 {
            spec.noise * normal.sample(rng)
        } else {
            0.0
        }
    };
    let mut series = Vec::with_capacity(spec.count);
    let mut labels = Vec::new();
    for i in 0..spec.count {
        let x: Vec<f64> = match spec.kind {
            SynthKind::Sine => {
                let comps: Vec<(f64, f64, f64)> = (1..=3)
                    .map(|k| {
                        let amp = rng.gen_range(0.5..1.5) / k as f64;
                        let phase = rng.gen_range(0.0..2.0 * PI);
                        (k as f64, amp, phase)
                    })
                    .collect();
                let p = spec.period;
                (0..spec.length)
                    .map(|t| {
                        let u = (t % p) as f64 / p as f64;
                        let clean: f64 = comps
                            .iter()
                            .map(|&(k, a, ph)| a * (2.0 * PI * k * u + ph).sin())
                            .sum();
                        clean + noise(rng)
                    })
                    .collect()
            }
            SynthKind::Ar1 => {
                let mut x = 0.0;
                for _ in 0..AR_BURN_IN {
                    x = spec.coefficient * x + noise(rng);
                }
                (0..spec.length)
                    .map(|_| {
                        x = spec.coefficient * x + noise(rng);
                        x
                    })
                    .collect()
            }
            SynthKind::Classes => {
                let class = i % spec.classes;
                labels.push(class);
                let freq = (class + 1) as f64 / spec.period as f64;
                let amp = rng.gen_range(0.8..1.2);
                let phase = rng.gen_range(0.0..PI / 4.0);
                (0..spec.length)
                    .map(|t| {
                        amp * (2.0 * PI * freq * t as f64 + phase).sin() + noise(rng)
                    })
                    .collect()
            }
        };
        series.push(x);
    }
    Ok(SynthDataset {
        series,
        labels: (spec.kind == SynthKind::Classes).then_some(labels),
    })
}
