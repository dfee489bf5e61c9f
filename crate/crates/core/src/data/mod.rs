//! Image/mask datasets: ingestion, preprocessing, splitting, synthetic
//! phantoms and training-time augmentation.

mod augment;
mod io;
mod phantom;
mod preprocess;
mod split;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, sample_augment_params, AugmentParams};
pub use io::{load_dataset, write_dataset};
pub use phantom::generate_phantom_dataset;
pub use preprocess::{equalize_histogram, prepare_dataset, preprocess, resize_bilinear, resize_nearest};
pub use split::{split_dataset, split_sizes, SplitDataset};

/// Database a sample was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SourceDb {
    Jsrt,
    Montgomery,
    Own,
    Phantom,
}

impl SourceDb {
    pub const ALL: [SourceDb; 4] = [SourceDb::Jsrt, SourceDb::Montgomery, SourceDb::Own, SourceDb::Phantom];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceDb::Jsrt => "JSRT",
            SourceDb::Montgomery => "MONTGOMERY",
            SourceDb::Own => "OWN",
            SourceDb::Phantom => "PHANTOM",
        }
    }
}

impl fmt::Display for SourceDb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceDb {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SourceDb::ALL
            .into_iter()
            .find(|db| db.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown source database {s:?}")))
    }
}

/// Radiographic severity of the abnormal findings in a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Severity {
    Normal,
    Mild,
    Severe,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Normal => "NORMAL",
            Severity::Mild => "MILD",
            Severity::Severe => "SEVERE",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Severity::Normal, Severity::Mild, Severity::Severe]
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown severity {s:?}")))
    }
}

/// One grayscale image with its binary lung mask.
///
/// Image intensities live in `[0, 1]`; mask values are 0 (background) or 1 (lung).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image: Array2<f32>,
    pub mask: Array2<u8>,
    pub source_db: SourceDb,
    pub severity: Severity,
}

impl SampleRecord {
    pub fn new(
        id: impl Into<String>,
        image: Array2<f32>,
        mask: Array2<u8>,
        source_db: SourceDb,
        severity: Severity,
    ) -> Result<Self> {
        let id = id.into();
        if image.dim() != mask.dim() {
            return Err(Error::DimensionMismatch {
                id,
                image: image.dim(),
                mask: mask.dim(),
            });
        }
        if let Some(&v) = mask.iter().find(|&&v| v > 1) {
            return Err(Error::NonBinary { value: v as f64 });
        }
        Ok(Self {
            id,
            image,
            mask,
            source_db,
            severity,
        })
    }

    pub fn lung_pixels(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }
}

/// An ordered, id-unique collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    /// Builds a dataset, rejecting duplicate ids.
    pub fn new(name: impl Into<String>, samples: Vec<SampleRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            samples,
        })
    }

    /// Concatenates several datasets into one; ids must stay unique.
    pub fn merge(name: impl Into<String>, parts: impl IntoIterator<Item = Dataset>) -> Result<Self> {
        let samples = parts.into_iter().flat_map(|d| d.samples).collect();
        Self::new(name, samples)
    }

    /// Re-tags every sample with `source` and prefixes its id.
    pub fn retag(mut self, source: SourceDb, id_prefix: &str) -> Self {
        for s in &mut self.samples {
            s.source_db = source;
            if !id_prefix.is_empty() {
                s.id = format!("{id_prefix}{}", s.id);
            }
        }
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn count_source(&self, source: SourceDb) -> usize {
        self.samples.iter().filter(|s| s.source_db == source).count()
    }

    /// Distinct source databases in sample order.
    pub fn sources(&self) -> Vec<SourceDb> {
        let mut out: Vec<SourceDb> = Vec::new();
        for s in &self.samples {
            if !out.contains(&s.source_db) {
                out.push(s.source_db);
            }
        }
        out
    }
}
