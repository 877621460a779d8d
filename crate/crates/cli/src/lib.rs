//! Command implementations behind the `tabtoken` binary.

pub mod config;
pub mod evaluate;
pub mod finetune;
pub mod grad_check;
pub mod heatmaps;
pub mod pretrain;

use std::io::Write;
use std::path::Path;

use anyhow::Result;
use serde::Serialize;
use tabtoken_core::Error;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// Maps a failure to the process exit code: 1 usage/config, 2 data,
/// 3 numeric.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config { .. } => EXIT_USAGE,
                Error::Numeric(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_USAGE
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let cfg: anyhow::Error = Error::Config { field: "lr".into(), msg: "bad".into() }.into();
        assert_eq!(exit_code(&cfg), EXIT_USAGE);
        let num: anyhow::Error = Error::Numeric("nan".into()).into();
        assert_eq!(exit_code(&num.context("while training")), EXIT_NUMERIC);
        let parse: anyhow::Error = Error::Parse { line: Some(3), msg: "ragged".into() }.into();
        assert_eq!(exit_code(&parse), EXIT_DATA);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), EXIT_USAGE);
    }
}
