use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::evaluate::evaluate;
use super::metrics::{MetricsReport, DEFAULT_THRESHOLD};
use crate::autodiff::Activation;
use crate::data::{prepare, DataConfig, PreparedData, RawSeries};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::training::{train, TrainConfig, TrainLog};

/// Full configuration of one experiment: preprocessing, model and training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.window_len != self.model.window_len {
            return Err(Error::Config(format!(
                "data window length {} differs from model window length {}",
                self.data.window_len, self.model.window_len
            )));
        }
        Ok(())
    }

    /// Builds a configuration from flat `key: value` settings over the
    /// defaults.
    ///
    /// A key may belong to several sections (`window_len` sets both the window
    /// slicer and the model). Setting `model_dim` without `ffn_dim` keeps the
    /// feed-forward width at four times the model width.
    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        fn section<T: Serialize>(value: &T) -> Map<String, Value> {
            match serde_json::to_value(value) {
                Ok(Value::Object(m)) => m,
                _ => unreachable!("config sections serialize to objects"),
            }
        }
        fn finish<T: DeserializeOwned>(name: &str, map: Map<String, Value>) -> Result<T> {
            serde_json::from_value(Value::Object(map))
                .map_err(|e| Error::Config(format!("{name} settings: {e}")))
        }
        let base = ExperimentConfig::default();
        let mut data = section(&base.data);
        let mut model = section(&base.model);
        let mut train = section(&base.train);
        for (key, value) in flat {
            let mut hit = false;
            for sec in [&mut data, &mut model, &mut train] {
                if sec.contains_key(key) {
                    sec.insert(key.clone(), value.clone());
                    hit = true;
                }
            }
            if !hit {
                return Err(Error::Config(format!("unknown configuration key `{key}`")));
            }
        }
        if flat.contains_key("model_dim") && !flat.contains_key("ffn_dim") {
            let d = model["model_dim"]
                .as_u64()
                .ok_or_else(|| Error::Config("model_dim must be an integer".into()))?;
            model.insert("ffn_dim".into(), Value::from(4 * d));
        }
        let config = ExperimentConfig {
            data: finish("data", data)?,
            model: finish("model", model)?,
            train: finish("training", train)?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Same configuration with both init and training driven by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }
}

/// Outcome of one seeded train-and-evaluate run.
#[derive(Clone, Debug)]
pub struct Trial {
    pub seed: u64,
    pub params: ModelParams,
    pub log: TrainLog,
    pub report: MetricsReport,
}

/// Initializes from `seed`, trains on `data.train` and evaluates on `data.test`.
pub fn run_trial(data: &PreparedData, config: &ExperimentConfig, seed: u64) -> Result<Trial> {
    let config = config.with_seed(seed);
    config.validate()?;
    let mut model = config.model.clone();
    model.feature_dim = data.train.feature_dim;
    let init = ModelParams::init(&model, seed)?;
    let (params, log) = train(&init, &data.train, &config.train)?;
    let report = evaluate(&params, &data.test, DEFAULT_THRESHOLD)?.report;
    Ok(Trial {
        seed,
        params,
        log,
        report,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    LearningRate,
    Optimizer,
    Activation,
    Noise,
    AnomalyRatio,
    AblationScales,
}

impl SweepKind {
    pub const ALL: [SweepKind; 6] = [
        SweepKind::LearningRate,
        SweepKind::Optimizer,
        SweepKind::Activation,
        SweepKind::Noise,
        SweepKind::AnomalyRatio,
        SweepKind::AblationScales,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepKind::LearningRate => "learning_rate",
            SweepKind::Optimizer => "optimizer",
            SweepKind::Activation => "activation",
            SweepKind::Noise => "noise",
            SweepKind::AnomalyRatio => "anomaly_ratio",
            SweepKind::AblationScales => "ablation_scales",
        }
    }

    pub fn default_grid(self) -> Vec<String> {
        let g: &[&str] = match self {
            SweepKind::LearningRate => &["1e-3", "3e-4", "2e-4", "1e-4"],
            SweepKind::Optimizer => &["adagrad", "sgd", "adam", "adamw"],
            SweepKind::Activation => &["relu", "leaky_relu", "elu", "gelu"],
            SweepKind::Noise => &["0", "0.05", "0.1", "0.25", "0.5"],
            SweepKind::AnomalyRatio => &["0.01", "0.05", "0.10", "0.20"],
            SweepKind::AblationScales => &["1", "2", "3"],
        };
        g.iter().map(|s| s.to_string()).collect()
    }

    /// Applies one grid value to a copy of `base`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        let number = || -> Result<f64> {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::Config(format!("{} value `{value}` is not a number", self.name()))
                })
        };
        match self {
            SweepKind::LearningRate => {
                c.train.initial_lr = number()?;
                c.train.lr_min = c.train.lr_min.min(c.train.initial_lr);
            }
            SweepKind::Optimizer => c.train.optimizer = value.parse()?,
            SweepKind::Activation => c.model.activation = value.parse::<Activation>()?,
            SweepKind::Noise => c.data.noise_sigma = number()?,
            SweepKind::AnomalyRatio => c.data.anomaly_ratio = Some(number()?),
            SweepKind::AblationScales => {
                let s: usize =
                    value.parse().ok().filter(|&s| s >= 1).ok_or_else(|| {
                        Error::Config(format!("scale count `{value}` must be ≥ 1"))
                    })?;
                c.model.scale_factors = ModelConfig::geometric_factors(s);
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown sweep kind `{s}` ({})", names.join(", ")))
            })
    }
}

/// Per-seed result inside a sweep row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
    pub epochs: usize,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub precision: f64,
    pub recall: f64,
    pub auc: f64,
    pub f1: f64,
    /// Seeds whose trial succeeded.
    pub n_seeds: usize,
    pub status: String,
    pub outcomes: Vec<SeedOutcome>,
}

impl SweepRow {
    fn aggregate(value: String, outcomes: Vec<SeedOutcome>) -> Self {
        let ok: Vec<&MetricsReport> = outcomes.iter().filter_map(|o| o.report.as_ref()).collect();
        let mean = |f: fn(&MetricsReport) -> f64| {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
            }
        };
        let first_error = outcomes.iter().find_map(|o| o.error.clone());
        let status = match (ok.len(), first_error) {
            (_, None) => "ok".to_string(),
            (0, Some(e)) => format!("failed: {e}"),
            (k, Some(e)) => format!("partial {k}/{}: {e}", outcomes.len()),
        };
        SweepRow {
            value,
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            auc: mean(|r| r.auc),
            f1: mean(|r| r.f1),
            n_seeds: ok.len(),
            status,
            outcomes,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.n_seeds > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub parameter: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn any_succeeded(&self) -> bool {
        self.rows.iter().any(SweepRow::succeeded)
    }
}

/// Trains and evaluates every `(value, seed)` pair, at most `jobs` at a time,
/// and reports seed-mean metrics per grid value in grid order. Failures are
/// recorded in their row rather than aborting the sweep.
pub fn run_sweep(
    kind: SweepKind,
    grid: &[String],
    base: &ExperimentConfig,
    series: &RawSeries,
    seeds: &[u64],
    jobs: usize,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let configs: Vec<Result<ExperimentConfig>> = grid.iter().map(|v| kind.apply(base, v)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    // datasets differ only where the swept value touches preprocessing
    let mut datasets: HashMap<String, Result<PreparedData>> = HashMap::new();
    for c in configs.iter().flatten() {
        let key = serde_json::to_string(&c.data)?;
        datasets
            .entry(key)
            .or_insert_with(|| prepare(series, &c.data));
    }

    let tasks: Vec<(usize, u64)> = (0..grid.len())
        .flat_map(|g| seeds.iter().map(move |&s| (g, s)))
        .collect();
    let outcomes: Vec<SeedOutcome> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(g, seed)| {
                let result = configs[g]
                    .as_ref()
                    .map_err(|e| e.to_string())
                    .and_then(|c| {
                        let key = serde_json::to_string(&c.data).map_err(|e| e.to_string())?;
                        let data = datasets[&key].as_ref().map_err(|e| e.to_string())?;
                        run_trial(data, c, seed).map_err(|e| e.to_string())
                    });
                match result {
                    Ok(t) => SeedOutcome {
                        seed,
                        epochs: t.log.epochs.len(),
                        best_epoch: t.log.best_epoch,
                        report: Some(t.report),
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("{kind}={} seed {seed} failed: {e}", grid[g]);
                        SeedOutcome {
                            seed,
                            report: None,
                            error: Some(e),
                            epochs: 0,
                            best_epoch: 0,
                        }
                    }
                }
            })
            .collect()
    });

    let mut per_value = outcomes.chunks(seeds.len());
    let rows = grid
        .iter()
        .map(|v| SweepRow::aggregate(v.clone(), per_value.next().unwrap().to_vec()))
        .collect();
    Ok(SweepResult {
        parameter: kind.name().into(),
        seeds: seeds.to_vec(),
        rows,
    })
}
