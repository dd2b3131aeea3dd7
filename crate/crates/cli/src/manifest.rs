//! Run manifests: what was run, on which inputs, producing which outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use msad_core::data::{SplitPart, SyntheticSpec};
use msad_core::evaluation::{ExperimentConfig, ReportFormat};

use crate::exit::io_error;

pub const MANIFEST_FORMAT: &str = "msad-manifest";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> anyhow::Result<Self> {
        let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

/// A command with every setting resolved, so it can be replayed without
/// the config files or flags it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Invocation {
    Synth {
        spec: SyntheticSpec,
        out: PathBuf,
    },
    Train {
        data: PathBuf,
        config: ExperimentConfig,
        out: PathBuf,
    },
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        split: SplitPart,
        threshold: f64,
        format: ReportFormat,
        out: PathBuf,
    },
    Sweep {
        kind: String,
        grid: Vec<String>,
        seeds: Vec<u64>,
        data: PathBuf,
        config: ExperimentConfig,
        jobs: usize,
        format: ReportFormat,
        out: PathBuf,
    },
    Report {
        input: PathBuf,
        format: ReportFormat,
        threshold: f64,
        roc: Option<PathBuf>,
        out: PathBuf,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Synth { .. } => "synth",
            Invocation::Train { .. } => "train",
            Invocation::Eval { .. } => "eval",
            Invocation::Sweep { .. } => "sweep",
            Invocation::Report { .. } => "report",
        }
    }

    pub fn out(&self) -> &Path {
        match self {
            Invocation::Synth { out, .. }
            | Invocation::Train { out, .. }
            | Invocation::Eval { out, .. }
            | Invocation::Sweep { out, .. }
            | Invocation::Report { out, .. } => out,
        }
    }

    pub fn with_out(mut self, new: PathBuf) -> Self {
        match &mut self {
            Invocation::Synth { out, .. }
            | Invocation::Train { out, .. }
            | Invocation::Eval { out, .. }
            | Invocation::Sweep { out, .. }
            | Invocation::Report { out, .. } => *out = new,
        }
        self
    }

    /// Experiment settings, where the command has them.
    pub fn config(&self) -> Option<&ExperimentConfig> {
        match self {
            Invocation::Train { config, .. } | Invocation::Sweep { config, .. } => Some(config),
            _ => None,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        match self {
            Invocation::Synth { spec, .. } => vec![spec.seed],
            Invocation::Train { config, .. } => vec![config.train.seed],
            Invocation::Sweep { seeds, .. } => seeds.clone(),
            _ => Vec::new(),
        }
    }

    /// Where a command writing to `out` puts its manifest.
    pub fn manifest_path(&self) -> PathBuf {
        manifest_path_for(self.name(), self.out())
    }
}

/// Directory-producing commands keep the manifest inside the directory;
/// file-producing ones put it next to the file.
pub fn manifest_path_for(command: &str, out: &Path) -> PathBuf {
    match command {
        "train" | "eval" | "sweep" => out.join("manifest.json"),
        _ => {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            out.with_file_name(name)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub invocation: Invocation,
    /// Experiment settings snapshot; duplicated from the invocation for readers.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<ExperimentConfig>,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn new(
        invocation: Invocation,
        inputs: Vec<FileDigest>,
        outputs: Vec<FileDigest>,
        started_at: String,
    ) -> Self {
        RunManifest {
            format: MANIFEST_FORMAT.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: invocation.config().cloned(),
            seeds: invocation.seeds(),
            invocation,
            inputs,
            outputs,
            started_at,
            finished_at: now(),
        }
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| io_error(path, e))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| crate::exit::config_error(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(crate::exit::config_error(format!(
                "{}: not a run manifest",
                path.display()
            )));
        }
        Ok(m)
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
