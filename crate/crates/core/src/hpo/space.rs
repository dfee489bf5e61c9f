use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{
    HyperParams, BASE_FEATURES, BATCH_NORM_FLAGS, BATCH_SIZES, DROPOUT_MILLIS, LEARNING_RATE_MILLIS, OPTIMIZER_CODES,
    POOL_LEVELS,
};

/// Dimension order used for encodings and for every random draw.
pub const DIMENSIONS: [&str; 8] = ["B", "R", "OP", "N", "T", "F", "D", "BN"];
pub(crate) const DIM_N: usize = 3;
pub(crate) const DIM_T: usize = 4;

/// A configuration as one value index per dimension, in [`DIMENSIONS`] order.
/// The `T` entry is the doubling count itself.
pub type Encoded = [usize; 8];

/// Enumerated values of each searched dimension. `T` is conditional:
/// its domain is `0..=N` for the drawn `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub batch_sizes: Vec<u32>,
    pub learning_rates: Vec<f64>,
    pub optimizers: Vec<u8>,
    pub pool_levels: Vec<u32>,
    pub base_features: Vec<u32>,
    pub dropouts: Vec<f64>,
    pub batch_norm: Vec<u8>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            batch_sizes: BATCH_SIZES.to_vec(),
            learning_rates: LEARNING_RATE_MILLIS.map(|m| m as f64 / 1000.0).collect(),
            optimizers: OPTIMIZER_CODES.to_vec(),
            pool_levels: POOL_LEVELS.to_vec(),
            base_features: BASE_FEATURES.to_vec(),
            dropouts: DROPOUT_MILLIS.map(|m| m as f64 / 1000.0).collect(),
            batch_norm: BATCH_NORM_FLAGS.to_vec(),
        }
    }
}

fn position_f64(values: &[f64], v: f64) -> Option<usize> {
    values.iter().position(|&x| (x - v).abs() < 1e-9)
}

impl SearchSpace {
    /// Every dimension non-empty and every value accepted by the validator.
    pub fn validate(&self) -> Result<()> {
        let lens = [
            self.batch_sizes.len(),
            self.learning_rates.len(),
            self.optimizers.len(),
            self.pool_levels.len(),
            self.base_features.len(),
            self.dropouts.len(),
            self.batch_norm.len(),
        ];
        if lens.contains(&0) {
            return Err(Error::invalid("search space has an empty dimension"));
        }
        let max_n = *self.pool_levels.iter().max().expect("non-empty");
        let extremes = HyperParams {
            batch_size: self.batch_sizes[0],
            learning_rate: self.learning_rates[0],
            optimizer: self.optimizers[0],
            pool_levels: max_n,
            doublings: 0,
            base_features: self.base_features[0],
            dropout: self.dropouts[0],
            batch_norm: self.batch_norm[0],
        };
        let all_valid = self.batch_sizes.iter().all(|&b| {
            HyperParams {
                batch_size: b,
                ..extremes
            }
            .validate()
            .is_ok()
        }) && self.learning_rates.iter().all(|&r| {
            HyperParams {
                learning_rate: r,
                ..extremes
            }
            .validate()
            .is_ok()
        }) && self.optimizers.iter().all(|&o| {
            HyperParams {
                optimizer: o,
                ..extremes
            }
            .validate()
            .is_ok()
        }) && self.pool_levels.iter().all(|&n| {
            HyperParams {
                pool_levels: n,
                ..extremes
            }
            .validate()
            .is_ok()
        }) && self.base_features.iter().all(|&f| {
            HyperParams {
                base_features: f,
                ..extremes
            }
            .validate()
            .is_ok()
        }) && self
            .dropouts
            .iter()
            .all(|&d| HyperParams { dropout: d, ..extremes }.validate().is_ok())
            && self.batch_norm.iter().all(|&b| {
                HyperParams {
                    batch_norm: b,
                    ..extremes
                }
                .validate()
                .is_ok()
            });
        if !all_valid {
            return Err(Error::invalid("search space contains values the validator rejects"));
        }
        Ok(())
    }

    /// Number of values of `dim`; for `T` this depends on the `N` index.
    pub fn arity(&self, dim: usize, n_index: usize) -> usize {
        match dim {
            0 => self.batch_sizes.len(),
            1 => self.learning_rates.len(),
            2 => self.optimizers.len(),
            DIM_N => self.pool_levels.len(),
            DIM_T => self.pool_levels[n_index] as usize + 1,
            5 => self.base_features.len(),
            6 => self.dropouts.len(),
            7 => self.batch_norm.len(),
            _ => panic!("dimension index {dim} out of range"),
        }
    }

    /// Distinct configurations, counting `T ∈ 0..=N` per `N`.
    pub fn cardinality(&self) -> u64 {
        let unconditional = [0, 1, 2, 5, 6, 7]
            .iter()
            .map(|&d| self.arity(d, 0) as u64)
            .product::<u64>();
        let joint_nt: u64 = self.pool_levels.iter().map(|&n| n as u64 + 1).sum();
        unconditional * joint_nt
    }

    pub fn encode(&self, hp: &HyperParams) -> Option<Encoded> {
        let n = self.pool_levels.iter().position(|&v| v == hp.pool_levels)?;
        if hp.doublings > hp.pool_levels {
            return None;
        }
        Some([
            self.batch_sizes.iter().position(|&v| v == hp.batch_size)?,
            position_f64(&self.learning_rates, hp.learning_rate)?,
            self.optimizers.iter().position(|&v| v == hp.optimizer)?,
            n,
            hp.doublings as usize,
            self.base_features.iter().position(|&v| v == hp.base_features)?,
            position_f64(&self.dropouts, hp.dropout)?,
            self.batch_norm.iter().position(|&v| v == hp.batch_norm)?,
        ])
    }

    pub fn decode(&self, e: &Encoded) -> HyperParams {
        HyperParams {
            batch_size: self.batch_sizes[e[0]],
            learning_rate: self.learning_rates[e[1]],
            optimizer: self.optimizers[e[2]],
            pool_levels: self.pool_levels[e[3]],
            doublings: e[4] as u32,
            base_features: self.base_features[e[5]],
            dropout: self.dropouts[e[6]],
            batch_norm: self.batch_norm[e[7]],
        }
    }

    /// Uniform draw per dimension in [`DIMENSIONS`] order; `T` uniform over `0..=N`.
    pub fn sample_random<R: Rng + ?Sized>(&self, rng: &mut R) -> HyperParams {
        let mut e = [0usize; 8];
        for d in 0..8 {
            e[d] = rng.random_range(0..self.arity(d, e[DIM_N]));
        }
        self.decode(&e)
    }
}

/// Free-function form of [`SearchSpace::sample_random`].
pub fn sample_random<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> HyperParams {
    space.sample_random(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_space_cardinality() {
        // 6·10·3·10·21·2 unconditional combinations times (4+5+6+7) (N, T) pairs.
        assert_eq!(SearchSpace::default().cardinality(), 6 * 10 * 3 * 10 * 21 * 2 * 22);
        assert_eq!(SearchSpace::default().cardinality(), 1_663_200);
    }

    #[test]
    fn default_space_is_valid() {
        SearchSpace::default().validate().unwrap();
    }

    #[test]
    fn foreign_values_are_rejected() {
        let mut s = SearchSpace::default();
        s.batch_sizes.push(5);
        assert!(s.validate().is_err());
        s.batch_sizes.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn random_draws_are_valid_and_uniform_in_b() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 6];
        for _ in 0..10_000 {
            let hp = space.sample_random(&mut rng);
            assert!(hp.violations().is_empty(), "{hp}");
            counts[space.batch_sizes.iter().position(|&b| b == hp.batch_size).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 1.0 / 6.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn seeded_draws_repeat() {
        let space = SearchSpace::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| space.sample_random(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn t_never_exceeds_n_and_covers_its_range() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..5_000 {
            let hp = space.sample_random(&mut rng);
            assert!(hp.doublings <= hp.pool_levels);
            seen.insert((hp.pool_levels, hp.doublings));
        }
        assert_eq!(seen.len(), 22);
    }

    proptest! {
        #[test]
        fn encode_inverts_decode(seed in any::<u64>()) {
            let space = SearchSpace::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hp = space.sample_random(&mut rng);
            let e = space.encode(&hp).unwrap();
            prop_assert_eq!(space.decode(&e), hp);
        }
    }
}
