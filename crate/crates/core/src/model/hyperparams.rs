use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BATCH_SIZES: [u32; 6] = [4, 6, 8, 10, 12, 14];
/// Learning rates are multiples of 0.001 in this range.
pub const LEARNING_RATE_MILLIS: std::ops::RangeInclusive<u32> = 1..=10;
pub const OPTIMIZER_CODES: [u8; 3] = [1, 2, 3];
pub const POOL_LEVELS: [u32; 4] = [3, 4, 5, 6];
pub const BASE_FEATURES: [u32; 10] = [4, 8, 12, 16, 20, 24, 28, 32, 36, 40];
/// Dropout rates are multiples of 0.001 in this range.
pub const DROPOUT_MILLIS: std::ops::RangeInclusive<u32> = 0..=20;
pub const BATCH_NORM_FLAGS: [u8; 2] = [0, 1];

const GRID_TOL: f64 = 1e-9;

/// The eight searched hyperparameters of one trial.
///
/// Serialized with the short symbols `B, R, OP, N, T, F, D, BN`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    #[serde(rename = "B")]
    pub batch_size: u32,
    #[serde(rename = "R")]
    pub learning_rate: f64,
    /// 1 = Adam, 2 = Nadam, 3 = RMSprop.
    #[serde(rename = "OP")]
    pub optimizer: u8,
    /// Number of max-pooling levels.
    #[serde(rename = "N")]
    pub pool_levels: u32,
    /// How many times the feature count doubles going down the encoder.
    #[serde(rename = "T")]
    pub doublings: u32,
    /// Feature maps in the first convolution layer.
    #[serde(rename = "F")]
    pub base_features: u32,
    #[serde(rename = "D")]
    pub dropout: f64,
    #[serde(rename = "BN")]
    pub batch_norm: u8,
}

/// One field outside its allowed set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub value: String,
    pub allowed: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {} not in {}", self.field, self.value, self.allowed)
    }
}

fn on_milli_grid(v: f64, range: &std::ops::RangeInclusive<u32>) -> bool {
    if !v.is_finite() || v < 0.0 {
        return false;
    }
    let k = (v * 1000.0).round();
    (v - k / 1000.0).abs() < GRID_TOL && range.contains(&(k as u32))
}

impl HyperParams {
    /// Original U-net: four poolings, 32 first-layer features doubled at
    /// every level, no batch normalization, no dropout.
    pub fn baseline() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 0.001,
            optimizer: 1,
            pool_levels: 4,
            doublings: 4,
            base_features: 32,
            dropout: 0.0,
            batch_norm: 0,
        }
    }

    /// Best configuration found by the 100-trial search.
    pub fn optimized() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 0.001,
            optimizer: 2,
            pool_levels: 4,
            doublings: 4,
            base_features: 40,
            dropout: 0.016,
            batch_norm: 1,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "baseline" => Some(Self::baseline()),
            "optimized" => Some(Self::optimized()),
            _ => None,
        }
    }

    pub fn uses_batch_norm(&self) -> bool {
        self.batch_norm == 1
    }

    /// Every field checked against its enumerated set, plus `T ≤ N`.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |field, value: String, allowed: &str| {
            out.push(Violation {
                field,
                value,
                allowed: allowed.to_owned(),
            })
        };
        if !BATCH_SIZES.contains(&self.batch_size) {
            push("B", self.batch_size.to_string(), "{4, 6, 8, 10, 12, 14}");
        }
        if !on_milli_grid(self.learning_rate, &LEARNING_RATE_MILLIS) {
            push("R", self.learning_rate.to_string(), "{0.001, 0.002, ..., 0.010}");
        }
        if !OPTIMIZER_CODES.contains(&self.optimizer) {
            push("OP", self.optimizer.to_string(), "{1, 2, 3}");
        }
        if !POOL_LEVELS.contains(&self.pool_levels) {
            push("N", self.pool_levels.to_string(), "{3, 4, 5, 6}");
        }
        if self.doublings > self.pool_levels {
            push(
                "T",
                self.doublings.to_string(),
                &format!("{{0..N}} with N = {}", self.pool_levels),
            );
        }
        if !BASE_FEATURES.contains(&self.base_features) {
            push("F", self.base_features.to_string(), "{4, 8, ..., 40}");
        }
        if !on_milli_grid(self.dropout, &DROPOUT_MILLIS) {
            push("D", self.dropout.to_string(), "{0, 0.001, ..., 0.020}");
        }
        if !BATCH_NORM_FLAGS.contains(&self.batch_norm) {
            push("BN", self.batch_norm.to_string(), "{0, 1}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidHyperParams(v))
        }
    }
}

/// Table-style rendering: `B = 4, OP = 2, R = 0.001, F = 40, T = 4, N = 4, D = 0.016, BN = 1`.
impl fmt::Display for HyperParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "B = {}, OP = {}, R = {:.3}, F = {}, T = {}, N = {}, D = {:.3}, BN = {}",
            self.batch_size,
            self.optimizer,
            self.learning_rate,
            self.base_features,
            self.doublings,
            self.pool_levels,
            self.dropout,
            self.batch_norm
        )
    }
}

/// Parses `KEY=VALUE` pairs separated by commas; all eight keys are required.
/// The result is not validated.
impl FromStr for HyperParams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut slots: [Option<&str>; 8] = [None; 8];
        const KEYS: [&str; 8] = ["B", "R", "OP", "N", "T", "F", "D", "BN"];
        for pair in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected KEY=VALUE, got {pair:?}")))?;
            let k = k.trim().to_ascii_uppercase();
            let idx = KEYS
                .iter()
                .position(|&key| key == k)
                .ok_or_else(|| Error::invalid(format!("unknown hyperparameter {k:?}")))?;
            slots[idx] = Some(v.trim());
        }
        let get = |i: usize| slots[i].ok_or_else(|| Error::invalid(format!("missing hyperparameter {}", KEYS[i])));
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::invalid(format!("{key}: cannot parse {v:?}")))
        }
        Ok(Self {
            batch_size: num("B", get(0)?)?,
            learning_rate: num("R", get(1)?)?,
            optimizer: num("OP", get(2)?)?,
            pool_levels: num("N", get(3)?)?,
            doublings: num("T", get(4)?)?,
            base_features: num("F", get(5)?)?,
            dropout: num("D", get(6)?)?,
            batch_norm: num("BN", get(7)?)?,
        })
    }
}
