//! Telemetry ingestion and preprocessing: CSV series, imputation,
//! normalization, windowing, stratified splits and a synthetic generator.

mod pipeline;
mod series;
mod synth;
mod windows;

pub use pipeline::{prepare, DataConfig, PipelineSnapshot, PreparedData, SplitPart};
pub use series::{
    impute_missing, load_csv, read_csv, save_csv, write_csv, z_normalize, NormStats, RawSeries,
    StatsSource, LABEL_COLUMN, MIN_STD,
};
pub use synth::{
    generate_synthetic, generate_synthetic_with_events, AnomalyEvent, AnomalyKind, AnomalyMix,
    ChannelSpec, SyntheticSpec,
};
pub use windows::{
    inject_noise, resample_anomaly_ratio, slice_windows, split_train_test, stratified_split,
    WindowSet,
};
