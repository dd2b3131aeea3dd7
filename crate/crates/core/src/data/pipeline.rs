use serde::{Deserialize, Serialize};

use super::series::{impute_missing, NormStats, RawSeries, StatsSource};
use super::windows::{
    inject_noise, resample_anomaly_ratio, slice_windows, split_train_test, WindowSet,
};
use crate::error::{Error, Result};

/// Preprocessing settings from raw series to train/test windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub window_len: usize,
    pub stride: usize,
    pub train_ratio: f64,
    pub split_seed: u64,
    /// Gaussian noise added to both splits, in units of training std.
    pub noise_sigma: f64,
    /// Positive-window share to resample both splits to.
    pub anomaly_ratio: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            window_len: 60,
            stride: 1,
            train_ratio: 0.8,
            split_seed: 0,
            noise_sigma: 0.0,
            anomaly_ratio: None,
        }
    }
}

/// What a checkpoint needs to reproduce the preprocessing of its training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSnapshot {
    pub data: DataConfig,
    pub feature_names: Vec<String>,
    pub norm: NormStats,
}

/// Which part of a prepared dataset to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Test,
    All,
}

impl std::str::FromStr for SplitPart {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitPart::Train),
            "test" => Ok(SplitPart::Test),
            "all" => Ok(SplitPart::All),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (train, test, all)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: WindowSet,
    pub test: WindowSet,
    pub snapshot: PipelineSnapshot,
}

// distinct streams for the per-split transforms
const NOISE_STREAM: u64 = 0x006e_6f69_7365;
const RATIO_STREAM: u64 = 0x0072_6174_696f;

fn normalize(windows: &mut WindowSet, norm: &NormStats) {
    norm.apply_rows(&mut windows.data);
}

fn split_windows(
    series: &RawSeries,
    config: &DataConfig,
) -> Result<(RawSeries, WindowSet, WindowSet)> {
    let series = impute_missing(series)?;
    let windows = slice_windows(&series, config.window_len, config.stride)?;
    let (train, test) = split_train_test(&windows, config.train_ratio, config.split_seed)?;
    Ok((series, train, test))
}

/// Normalizes both splits, then applies the optional ratio resampling and
/// noise injection.
fn finish(
    mut train: WindowSet,
    mut test: WindowSet,
    norm: &NormStats,
    config: &DataConfig,
) -> Result<(WindowSet, WindowSet)> {
    normalize(&mut train, norm);
    normalize(&mut test, norm);
    if let Some(ratio) = config.anomaly_ratio {
        train = resample_anomaly_ratio(&train, ratio, config.split_seed ^ RATIO_STREAM)?;
        test = resample_anomaly_ratio(&test, ratio, config.split_seed ^ RATIO_STREAM ^ 1)?;
    }
    if config.noise_sigma > 0.0 {
        let std = train.feature_std();
        train = inject_noise(
            &train,
            config.noise_sigma,
            &std,
            config.split_seed ^ NOISE_STREAM,
        )?;
        test = inject_noise(
            &test,
            config.noise_sigma,
            &std,
            config.split_seed ^ NOISE_STREAM ^ 1,
        )?;
    }
    Ok((train, test))
}

/// Imputes, windows and splits the series, then normalizes both splits with
/// statistics fitted on the rows the training windows cover.
pub fn prepare(series: &RawSeries, config: &DataConfig) -> Result<PreparedData> {
    let (series, train, test) = split_windows(series, config)?;
    let norm = NormStats::fit(&series, &train.covered_rows(), StatsSource::TrainSplit)?;
    let (train, test) = finish(train, test, &norm, config)?;
    Ok(PreparedData {
        train,
        test,
        snapshot: PipelineSnapshot {
            data: config.clone(),
            feature_names: series.feature_names.clone(),
            norm,
        },
    })
}

impl PipelineSnapshot {
    /// Windows of `series` preprocessed as at training time, with the stored
    /// normalization statistics.
    pub fn windows(&self, series: &RawSeries, part: SplitPart) -> Result<WindowSet> {
        if series.feature_dim() != self.feature_names.len() {
            return Err(Error::shape(
                "feature columns",
                &[self.feature_names.len()],
                &[series.feature_dim()],
            ));
        }
        if part == SplitPart::All {
            let series = impute_missing(series)?;
            let mut w = slice_windows(&series, self.data.window_len, self.data.stride)?;
            normalize(&mut w, &self.norm);
            return Ok(w);
        }
        let (_, train, test) = split_windows(series, &self.data)?;
        let (train, test) = finish(train, test, &self.norm, &self.data)?;
        Ok(if part == SplitPart::Train {
            train
        } else {
            test
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, SyntheticSpec};

    fn series() -> RawSeries {
        generate_synthetic(&SyntheticSpec {
            length: 1500,
            seed: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn stats_come_from_training_rows_only() {
        let s = series();
        let p = prepare(&s, &DataConfig::default()).unwrap();
        assert_eq!(p.snapshot.norm.source, StatsSource::TrainSplit);
        let rows = p.train.covered_rows();
        let manual = NormStats::fit(&s, &rows, StatsSource::TrainSplit).unwrap();
        assert_eq!(manual, p.snapshot.norm);
        assert_eq!(p.train.len() + p.test.len(), s.len() - 59);
    }

    #[test]
    fn snapshot_reproduces_splits() {
        let s = series();
        let cfg = DataConfig {
            split_seed: 9,
            ..Default::default()
        };
        let p = prepare(&s, &cfg).unwrap();
        assert_eq!(p.snapshot.windows(&s, SplitPart::Test).unwrap(), p.test);
        assert_eq!(p.snapshot.windows(&s, SplitPart::Train).unwrap(), p.train);
        assert_eq!(
            p.snapshot.windows(&s, SplitPart::All).unwrap().len(),
            s.len() - 59
        );
    }

    #[test]
    fn transforms_are_applied_per_split() {
        let s = series();
        let cfg = DataConfig {
            noise_sigma: 0.1,
            anomaly_ratio: Some(0.05),
            ..Default::default()
        };
        let p = prepare(&s, &cfg).unwrap();
        for w in [&p.train, &p.test] {
            assert!((w.anomaly_ratio() - 0.05).abs() <= 1.0 / w.len() as f64);
        }
        assert_eq!(prepare(&s, &cfg).unwrap().train, p.train);
    }
}
