use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, SampleRecord, SourceDb};
use crate::error::{Error, Result};

/// Train/validation/test partition of one source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub seed: u64,
}

/// Part sizes for an 80/10/10 split of `n` samples: `(train, validation, test)`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let tenth = (n as f64 * 0.1).round() as usize;
    let test = tenth.min(n);
    let validation = tenth.min(n - test);
    (n - test - validation, validation, test)
}

/// Deterministic 80/10/10 split.
///
/// With `test_source`, the test part is drawn only from samples of that
/// database; its remaining samples go to the train/validation pool.
pub fn split_dataset(dataset: &Dataset, seed: u64, test_source: Option<SourceDb>) -> Result<SplitDataset> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    let (_, n_val, n_test) = split_sizes(dataset.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let indices: Vec<usize> = (0..dataset.len()).collect();
    let (mut test_pool, mut rest): (Vec<usize>, Vec<usize>) = match test_source {
        Some(src) => indices.into_iter().partition(|&i| dataset.samples[i].source_db == src),
        None => (indices, Vec::new()),
    };
    if let Some(src) = test_source {
        if test_pool.len() < n_test {
            return Err(Error::InsufficientSource {
                source_db: src.to_string(),
                required: n_test,
                available: test_pool.len(),
            });
        }
    }
    test_pool.shuffle(&mut rng);
    let test_idx: Vec<usize> = test_pool.drain(..n_test).collect();
    rest.extend(test_pool);
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    let val_idx: Vec<usize> = rest.drain(..n_val).collect();

    let part = |suffix: &str, idx: &[usize]| -> Result<Dataset> {
        let mut samples: Vec<SampleRecord> = idx.iter().map(|&i| dataset.samples[i].clone()).collect();
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        Dataset::new(format!("{}/{suffix}", dataset.name), samples)
    };
    Ok(SplitDataset {
        train: part("train", &rest)?,
        validation: part("validation", &val_idx)?,
        test: part("test", &test_idx)?,
        seed,
    })
}
