//! Per-epoch CSV training log.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// NaN when there is no validation set.
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_seconds: f64,
}

impl EpochRecord {
    /// Shortest round-tripping decimal form of each value.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.train_acc,
            self.val_loss,
            self.val_acc,
            self.wall_seconds
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        let bad = |reason: String| Error::MalformedRow { line: 0, reason };
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 fields, got {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| bad(format!("bad number {:?}", fields[i])))
        };
        Ok(EpochRecord {
            epoch: fields[0]
                .parse()
                .map_err(|_| bad(format!("bad epoch {:?}", fields[0])))?,
            train_loss: num(1)?,
            train_acc: num(2)?,
            val_loss: num(3)?,
            val_acc: num(4)?,
            wall_seconds: num(5)?,
        })
    }
}

/// Writes the header if `path` is missing or empty.
pub fn ensure_header(path: &Path) -> Result<()> {
    let fresh = std::fs::metadata(path)
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    if fresh {
        std::fs::write(path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::file(path, e))?;
    }
    Ok(())
}

/// Appends one row, creating the file (with header) if needed.
pub fn log_metrics(record: &EpochRecord, path: &Path) -> Result<()> {
    ensure_header(path)?;
    let mut f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::file(path, e))?;
    writeln!(f, "{}", record.to_csv_row()).map_err(|e| Error::file(path, e))
}

/// Reads a metrics log back (header checked, rows parsed).
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(Error::MalformedRow {
            line: 1,
            reason: "missing metrics header".into(),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            EpochRecord::parse_csv_row(l).map_err(|e| match e {
                Error::MalformedRow { reason, .. } => Error::MalformedRow {
                    line: i + 2,
                    reason,
                },
                other => other,
            })
        })
        .collect()
}
