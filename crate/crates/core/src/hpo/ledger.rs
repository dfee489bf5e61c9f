use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HyperParams;

pub const LEDGER_HEADER: &str = "trial,loss,B,OP,R,F,T,N,D,BN,state,seed,wall_time_s";

/// Loss recorded for a trial whose objective failed.
pub const FAILED_LOSS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TrialState {
    Complete,
    Failed,
}

impl TrialState {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialState::Complete => "COMPLETE",
            TrialState::Failed => "FAILED",
        }
    }
}

impl fmt::Display for TrialState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrialState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "COMPLETE" => Ok(TrialState::Complete),
            "FAILED" => Ok(TrialState::Failed),
            other => Err(Error::invalid(format!("unknown trial state {other:?}"))),
        }
    }
}

/// One row of a study ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u32,
    /// Test Dice loss, rounded to 4 decimals; [`FAILED_LOSS`] for failures.
    pub loss: f64,
    pub hp: HyperParams,
    pub state: TrialState,
    pub seed: u64,
    /// Seconds, rounded to milliseconds.
    pub wall_time_s: f64,
}

pub(crate) fn round_to(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (v * s).round() / s
}

impl TrialRecord {
    /// Rounds loss and wall time to their ledger precision so that a parsed
    /// ledger compares equal to the in-memory one.
    pub fn new(trial: u32, loss: f64, hp: HyperParams, state: TrialState, seed: u64, wall_time_s: f64) -> Self {
        Self {
            trial,
            loss: round_to(loss, 4),
            hp,
            state,
            seed,
            wall_time_s: round_to(wall_time_s, 3),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.state == TrialState::Complete
    }

    pub fn to_csv_row(&self) -> String {
        let h = &self.hp;
        format!(
            "{},{:.4},{},{},{:.3},{},{},{},{:.3},{},{},{},{:.3}",
            self.trial,
            self.loss,
            h.batch_size,
            h.optimizer,
            h.learning_rate,
            h.base_features,
            h.doublings,
            h.pool_levels,
            h.dropout,
            h.batch_norm,
            self.state,
            self.seed,
            self.wall_time_s
        )
    }
}

/// Header plus one line per record.
pub fn ledger_to_string(records: &[TrialRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(LEDGER_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

fn parse_field<T: FromStr>(row: &csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<T> {
    let raw = row.get(idx).unwrap_or("").trim();
    raw.parse().map_err(|_| Error::Ledger {
        line,
        message: format!("bad {name} value {raw:?}"),
    })
}

/// Parses ledger text, checking the header, hyperparameter validity and that
/// trial numbers run 1, 2, 3, ... without gaps.
pub fn parse_ledger(text: &str) -> Result<Vec<TrialRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers()?.iter().map(str::trim).collect::<Vec<_>>().join(",");
    if header != LEDGER_HEADER {
        return Err(Error::Ledger {
            line: 1,
            message: format!("expected header {LEDGER_HEADER:?}, found {header:?}"),
        });
    }
    let mut out: Vec<TrialRecord> = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        if row.len() != 13 {
            return Err(Error::Ledger {
                line,
                message: format!("expected 13 fields, found {}", row.len()),
            });
        }
        let hp = HyperParams {
            batch_size: parse_field(&row, 2, "B", line)?,
            optimizer: parse_field(&row, 3, "OP", line)?,
            learning_rate: parse_field(&row, 4, "R", line)?,
            base_features: parse_field(&row, 5, "F", line)?,
            doublings: parse_field(&row, 6, "T", line)?,
            pool_levels: parse_field(&row, 7, "N", line)?,
            dropout: parse_field(&row, 8, "D", line)?,
            batch_norm: parse_field(&row, 9, "BN", line)?,
        };
        if let Err(e) = hp.validate() {
            return Err(Error::Ledger {
                line,
                message: e.to_string(),
            });
        }
        let record = TrialRecord::new(
            parse_field(&row, 0, "trial", line)?,
            parse_field(&row, 1, "loss", line)?,
            hp,
            parse_field(&row, 10, "state", line)?,
            parse_field(&row, 11, "seed", line)?,
            parse_field(&row, 12, "wall_time_s", line)?,
        );
        let expected = out.len() as u32 + 1;
        if record.trial != expected {
            return Err(Error::Ledger {
                line,
                message: format!("trial {} out of sequence, expected {expected}", record.trial),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn read_ledger(path: &Path) -> Result<Vec<TrialRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ledger(&text)
}

pub fn write_ledger(path: &Path, records: &[TrialRecord]) -> Result<()> {
    fs::write(path, ledger_to_string(records)).map_err(|e| Error::io(path, e))
}

/// Append-only ledger file, flushed after every row.
#[derive(Debug)]
pub struct LedgerWriter {
    file: fs::File,
    path: std::path::PathBuf,
}

impl LedgerWriter {
    /// Starts a new ledger containing only the header.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{LEDGER_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_owned(),
        })
    }

    /// Reopens an existing ledger for appending; returns its parsed rows.
    pub fn resume(path: &Path) -> Result<(Self, Vec<TrialRecord>)> {
        let records = read_ledger(path)?;
        let file = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok((
            Self {
                file,
                path: path.to_owned(),
            },
            records,
        ))
    }

    pub fn append(&mut self, record: &TrialRecord) -> Result<()> {
        writeln!(self.file, "{}", record.to_csv_row()).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Minimum-loss COMPLETE trial; ties go to the earlier trial.
pub fn best_trial(records: &[TrialRecord]) -> Option<&TrialRecord> {
    records
        .iter()
        .filter(|r| r.is_complete())
        .min_by(|a, b| a.loss.total_cmp(&b.loss).then(a.trial.cmp(&b.trial)))
}
