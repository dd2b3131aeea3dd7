//! Process exit codes and the mapping from errors onto them.

use std::fmt;
use std::path::Path;

use msad_core::Error;

pub const OK: i32 = 0;
pub const CONFIG: i32 = 2;
pub const NUMERIC: i32 = 3;
pub const IO: i32 = 4;
pub const SWEEP_FAILED: i32 = 5;

/// An error raised by the front end itself, tagged with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub fn config_error(message: impl Into<String>) -> anyhow::Error {
    CliError {
        code: CONFIG,
        message: message.into(),
    }
    .into()
}

pub fn io_error(path: &Path, e: std::io::Error) -> anyhow::Error {
    anyhow::Error::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn code_of(err: &Error) -> i32 {
    match err {
        Error::Numeric { .. } => NUMERIC,
        Error::Io { .. } => IO,
        Error::Shape { .. }
        | Error::Config(_)
        | Error::Contract(_)
        | Error::Data(_)
        | Error::Parse { .. }
        | Error::UndefinedMetric(_)
        | Error::Split(_)
        | Error::Serde(_) => CONFIG,
    }
}

/// First recognizable cause in the chain decides; anything else is a
/// configuration problem.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(c) = cause.downcast_ref::<CliError>() {
            return c.code;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return code_of(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return IO;
        }
    }
    CONFIG
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes() {
        assert_eq!(exit_code(&config_error("x")), CONFIG);
        assert_eq!(
            exit_code(&Error::Numeric { stage: "s".into() }.into()),
            NUMERIC
        );
        let io = io_error(Path::new("/nope"), std::io::ErrorKind::NotFound.into());
        assert_eq!(exit_code(&io.context("loading")), IO);
        let shape = Error::Shape {
            op: "eval",
            lhs: vec![60, 4],
            rhs: vec![60, 3],
        };
        assert_eq!(exit_code(&shape.into()), CONFIG);
    }
}
