//! Turns the `[data]` section into samples for each command.
//!
//! Forecasting data is split chronologically per series and cut into
//! variable-length windows inside each split. Classification records are
//! split by a seeded shuffle (or taken from a separate test file) and
//! subsampled to variable lengths. Every random choice draws from the
//! sampler stream of the root seed.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scalefusion::data::{
    chronological_split, label_index, label_set, load_ett_csv, load_ucr, sliding_window_varlen,
    subsample_ucr, synth_generate, DataFormat, Sample, Series, SplitSpec,
};
use scalefusion::numerics::{stream_rng, SAMPLER_STREAM};
use scalefusion::Error;

use crate::config::DataConfig;
use crate::error::CliResult;

/// Train, validation and test samples.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Labeled classification records with labels mapped to `0..classes`.
#[derive(Clone, Debug)]
pub struct Records {
    pub train: Vec<(Vec<f64>, usize)>,
    /// Present when the dataset ships a separate test file.
    pub test: Option<Vec<(Vec<f64>, usize)>>,
    pub classes: usize,
}

/// Loaded dataset before any splitting.
#[derive(Clone, Debug)]
pub enum Source {
    Series(Vec<Series>),
    Records(Records),
}

pub fn load_source(cfg: &DataConfig) -> CliResult<Source> {
    let m = &cfg.manifest;
    match m.format {
        DataFormat::EttCsv => Ok(Source::Series(load_ett_csv(&m.path, m)?)),
        DataFormat::Ucr => {
            let train = load_ucr(&m.path)?;
            let test = m.test_path.as_deref().map(load_ucr).transpose()?;
            let labels = label_set(train.iter().chain(test.iter().flatten()));
            let classes = m.num_classes.unwrap_or(labels.len());
            if labels.len() > classes {
                return Err(Error::Degenerate(format!(
                    "{} distinct labels but num_classes = {classes}",
                    labels.len()
                ))
                .into());
            }
            let map = |rs: Vec<scalefusion::data::UcrRecord>| -> CliResult<Vec<(Vec<f64>, usize)>> {
                rs.into_iter()
                    .map(|r| Ok((r.values, label_index(&labels, &r.label)?)))
                    .collect()
            };
            let train = map(train)?;
            let test = test.map(map).transpose()?;
            Ok(Source::Records(Records {
                train,
                test,
                classes,
            }))
        }
        DataFormat::Synthetic => {
            let spec = &cfg.synthetic;
            let data = synth_generate(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))?;
            match data.labels {
                Some(labels) => Ok(Source::Records(Records {
                    train: data.series.into_iter().zip(labels).collect(),
                    test: None,
                    classes: spec.classes,
                })),
                None => Ok(Source::Series(
                    data.series
                        .into_iter()
                        .enumerate()
                        .map(|(i, values)| Series {
                            name: format!("synthetic.{i}"),
                            values,
                        })
                        .collect(),
                )),
            }
        }
    }
}

fn windows(
    cfg: &DataConfig,
    series: &Series,
    range: Range<usize>,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> CliResult<Vec<Sample>> {
    if range.is_empty() {
        return Ok(Vec::new());
    }
    Ok(sliding_window_varlen(
        &series.values,
        range,
        cfg.min_len,
        cfg.max_len,
        horizon,
        cfg.stride,
        &series.name,
        rng,
    )?)
}

/// Forecasting windows with `horizon`-step targets (unlabeled when zero).
pub fn forecast_splits(cfg: &DataConfig, series: &[Series], horizon: usize, seed: u64) -> CliResult<Splits> {
    let mut rng = stream_rng(seed, SAMPLER_STREAM);
    let mut out = Splits::default();
    for s in series {
        let [train, val, test] = chronological_split(s.values.len(), &cfg.split)?;
        out.train.extend(windows(cfg, s, train, horizon, &mut rng)?);
        out.val.extend(windows(cfg, s, val, horizon, &mut rng)?);
        out.test.extend(windows(cfg, s, test, horizon, &mut rng)?);
    }
    Ok(out)
}

fn subsample_all(
    cfg: &DataConfig,
    records: &[(Vec<f64>, usize)],
    indices: &[usize],
    split: &str,
    rng: &mut ChaCha8Rng,
) -> CliResult<Vec<Sample>> {
    indices
        .iter()
        .map(|&i| {
            let (values, label) = &records[i];
            let source = format!("{split}.{i}");
            Ok(subsample_ucr(values, *label, cfg.min_len, cfg.max_len, cfg.subsample, &source, rng)?)
        })
        .collect()
}

/// Classification samples. Without a test file the records are shuffled
/// once and cut by the split fractions; with one, the train file is cut
/// into train and validation in the ratio `train : val`.
pub fn classify_splits(cfg: &DataConfig, records: &Records, seed: u64) -> CliResult<Splits> {
    let mut rng = stream_rng(seed, SAMPLER_STREAM);
    let mut order: Vec<usize> = (0..records.train.len()).collect();
    order.shuffle(&mut rng);
    let fractions = match records.test {
        Some(_) => {
            let total = cfg.split.train + cfg.split.val;
            SplitSpec {
                train: cfg.split.train / total,
                val: cfg.split.val / total,
                test: 0.0,
            }
        }
        None => cfg.split,
    };
    let [a, b, c] = chronological_split(order.len(), &fractions)?;
    let train = subsample_all(cfg, &records.train, &order[a], "train", &mut rng)?;
    let val = subsample_all(cfg, &records.train, &order[b], "val", &mut rng)?;
    let test = match &records.test {
        Some(test) => {
            let all: Vec<usize> = (0..test.len()).collect();
            subsample_all(cfg, test, &all, "test", &mut rng)?
        }
        None => subsample_all(cfg, &records.train, &order[c], "test", &mut rng)?,
    };
    Ok(Splits { train, val, test })
}

/// Train and test samples without task targets for one source.
fn unlabeled_splits(cfg: &DataConfig, source: &Source, seed: u64) -> CliResult<Splits> {
    match source {
        Source::Series(series) => forecast_splits(cfg, series, 0, seed),
        Source::Records(records) => classify_splits(cfg, records, seed),
    }
}

/// Normalized training inputs for self-supervised pretraining.
pub fn pretrain_inputs(cfg: &DataConfig, source: &Source, seed: u64) -> CliResult<Vec<Vec<f64>>> {
    let train = unlabeled_splits(cfg, source, seed)?.train;
    if train.is_empty() {
        return Err(Error::EmptyDataset("pretraining train split".into()).into());
    }
    Ok(train.iter().map(Sample::normalized).collect())
}

/// Held-out samples whose representations are analyzed.
pub fn evaluation_samples(cfg: &DataConfig, source: &Source, seed: u64) -> CliResult<Vec<Sample>> {
    Ok(unlabeled_splits(cfg, source, seed)?.test)
}
