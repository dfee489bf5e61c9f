use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SourceDb;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_THRESHOLD;
use crate::hpo::TpeConfig;
use crate::training::{CheckpointPolicy, DEFAULT_EPOCHS};

/// Overrides the output root from the config file (but not `--out`).
pub const OUT_ENV: &str = "LUNGSEG_OUT";

/// Name of the resolved-config copy written into every output directory.
pub const RUN_CONFIG_FILE: &str = "run_config.toml";

pub const DEFAULT_INPUT_SIZE: usize = 256;
pub const DEFAULT_N_TRIALS: usize = 100;

/// One dataset directory, optionally re-tagged with a source database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataRoot {
    pub root: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceDb>,
}

impl FromStr for DataRoot {
    type Err = Error;

    /// `PATH` or `SOURCE=PATH`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('=') {
            Some((src, path)) if !path.is_empty() => Ok(Self {
                root: PathBuf::from(path),
                source: Some(src.parse()?),
            }),
            Some(_) => Err(Error::invalid(format!("empty path in data root {s:?}"))),
            None => Ok(Self {
                root: PathBuf::from(s),
                source: None,
            }),
        }
    }
}

impl fmt::Display for DataRoot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.source {
            Some(src) => write!(f, "{src}={}", self.root.display()),
            None => write!(f, "{}", self.root.display()),
        }
    }
}

/// Settings shared by every subcommand.
///
/// Resolution order is command-line flags, then the config file, then these
/// defaults. [`OUT_ENV`] sits between flags and the file for `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub input_size: usize,
    pub epochs: usize,
    pub n_trials: usize,
    pub augment: bool,
    pub checkpoint_policy: CheckpointPolicy,
    pub threshold: f64,
    /// Database the test split is drawn from. Unset means OWN when the data
    /// holds OWN samples and the whole pool otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_source: Option<SourceDb>,
    pub out_dir: PathBuf,
    pub data: Vec<DataRoot>,
    pub tpe: TpeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            input_size: DEFAULT_INPUT_SIZE,
            epochs: DEFAULT_EPOCHS,
            n_trials: DEFAULT_N_TRIALS,
            augment: true,
            checkpoint_policy: CheckpointPolicy::BestValidation,
            threshold: DEFAULT_THRESHOLD,
            test_source: None,
            out_dir: PathBuf::from("runs"),
            data: Vec::new(),
            tpe: TpeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(toml::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.n_trials == 0 {
            return Err(Error::invalid("n_trials must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid(format!(
                "threshold {} is outside [0, 1]",
                self.threshold
            )));
        }
        self.tpe.validate()
    }

    /// Every data root must exist before any work starts.
    pub fn require_data(&self) -> Result<()> {
        if self.data.is_empty() {
            return Err(Error::invalid(
                "no data roots given (use --data or `data` in the config file)",
            ));
        }
        match self.data.iter().find(|d| !d.root.is_dir()) {
            Some(d) => Err(Error::invalid(format!("data root {} does not exist", d.root.display()))),
            None => Ok(()),
        }
    }
}

/// The file written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct ResolvedRun<'a, A: Serialize> {
    pub command: &'a str,
    pub config: &'a RunConfig,
    pub args: &'a A,
}

pub fn write_run_config<A: Serialize>(dir: &Path, command: &str, config: &RunConfig, args: &A) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = toml::to_string_pretty(&ResolvedRun { command, config, args })?;
    let path = dir.join(RUN_CONFIG_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("epochs = 5\n[tpe]\nn_startup = 3\n").unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.tpe.n_startup, 3);
        assert_eq!(cfg.tpe.gamma, TpeConfig::default().gamma);
        assert_eq!(cfg.n_trials, 100);
        assert_eq!(cfg.input_size, 256);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("epoch = 5\n").is_err());
    }

    #[test]
    fn data_roots_parse_with_and_without_source() {
        let d: DataRoot = "jsrt=/data/jsrt".parse().unwrap();
        assert_eq!(d.source, Some(SourceDb::Jsrt));
        assert_eq!(d.root, PathBuf::from("/data/jsrt"));
        let d: DataRoot = "/data/x".parse().unwrap();
        assert_eq!(d.source, None);
        assert!("bogus=/x".parse::<DataRoot>().is_err());
        assert!("OWN=".parse::<DataRoot>().is_err());
    }

    #[test]
    fn data_roots_in_toml() {
        let cfg: RunConfig =
            toml::from_str("[[data]]\nroot = \"a\"\nsource = \"JSRT\"\n[[data]]\nroot = \"b\"\n").unwrap();
        assert_eq!(cfg.data.len(), 2);
        assert_eq!(cfg.data[0].source, Some(SourceDb::Jsrt));
    }

    #[test]
    fn bad_values_fail_validation() {
        let mut cfg = RunConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.epochs = 1;
        cfg.threshold = 1.5;
        assert!(cfg.validate().is_err());
    }
}
