use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ledger::TrialRecord;
use super::space::{Encoded, SearchSpace, DIM_N, DIM_T};
use crate::error::{Error, Result};
use crate::model::HyperParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpeConfig {
    /// COMPLETE trials required before density estimation replaces random draws.
    pub n_startup: usize,
    /// Fraction of trials treated as good.
    pub gamma: f64,
    pub n_candidates: usize,
    /// Uniform pseudo-count mass added to every categorical estimator.
    pub prior_weight: f64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            n_startup: 10,
            gamma: 0.25,
            n_candidates: 24,
            prior_weight: 1.0,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_startup == 0 {
            return Err(Error::invalid("n_startup must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!("gamma {} not in (0, 1)", self.gamma)));
        }
        if self.n_candidates == 0 {
            return Err(Error::invalid("n_candidates must be at least 1"));
        }
        if !(self.prior_weight > 0.0 && self.prior_weight.is_finite()) {
            return Err(Error::invalid(format!(
                "prior_weight {} must be positive",
                self.prior_weight
            )));
        }
        Ok(())
    }
}

/// Number of good trials among `n` for quantile `gamma`: `ceil(gamma · n)`.
pub fn n_good(n: usize, gamma: f64) -> usize {
    // The epsilon keeps products like 0.25 · 8 from rounding up past 2.
    ((gamma * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Splits trials into the `ceil(gamma · n)` lowest losses and the rest.
/// Equal losses are ordered by trial number.
pub fn split_good_bad(history: &[TrialRecord], gamma: f64) -> Result<(Vec<&TrialRecord>, Vec<&TrialRecord>)> {
    if history.is_empty() {
        return Err(Error::invalid("cannot split an empty trial history"));
    }
    let mut sorted: Vec<&TrialRecord> = history.iter().collect();
    sorted.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.trial.cmp(&b.trial)));
    let bad = sorted.split_off(n_good(history.len(), gamma));
    Ok((sorted, bad))
}

/// Smoothed categorical probabilities `(count(v) + w/K) / (n + w)`.
fn parzen<'a>(values: impl Iterator<Item = &'a usize>, arity: usize, prior_weight: f64) -> Vec<f64> {
    let mut counts = vec![0.0; arity];
    let mut n = 0.0;
    for &v in values {
        counts[v] += 1.0;
        n += 1.0;
    }
    let prior = prior_weight / arity as f64;
    counts.iter().map(|c| (c + prior) / (n + prior_weight)).collect()
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Good (`l`) and bad (`g`) estimators for every dimension; `T` has one pair
/// per `N` value, fitted on same-`N` trials only.
struct Estimators {
    l: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    l_t: Vec<Vec<f64>>,
    g_t: Vec<Vec<f64>>,
}

impl Estimators {
    fn fit(space: &SearchSpace, good: &[Encoded], bad: &[Encoded], w: f64) -> Self {
        let mut l = vec![Vec::new(); 8];
        let mut g = vec![Vec::new(); 8];
        for d in (0..8).filter(|&d| d != DIM_T) {
            let k = space.arity(d, 0);
            l[d] = parzen(good.iter().map(|e| &e[d]), k, w);
            g[d] = parzen(bad.iter().map(|e| &e[d]), k, w);
        }
        let per_n = |set: &[Encoded], n: usize| {
            parzen(
                set.iter().filter(|e| e[DIM_N] == n).map(|e| &e[DIM_T]),
                space.arity(DIM_T, n),
                w,
            )
        };
        let levels = space.pool_levels.len();
        Self {
            l,
            g,
            l_t: (0..levels).map(|n| per_n(good, n)).collect(),
            g_t: (0..levels).map(|n| per_n(bad, n)).collect(),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Encoded {
        let mut e = [0usize; 8];
        for d in 0..8 {
            e[d] = if d == DIM_T {
                draw(&self.l_t[e[DIM_N]], rng)
            } else {
                draw(&self.l[d], rng)
            };
        }
        e
    }

    fn score(&self, e: &Encoded) -> f64 {
        (0..8)
            .map(|d| {
                if d == DIM_T {
                    self.l_t[e[DIM_N]][e[d]] / self.g_t[e[DIM_N]][e[d]]
                } else {
                    self.l[d][e[d]] / self.g[d][e[d]]
                }
            })
            .product()
    }
}

/// Candidate pool drawn from the good-trial estimators, with the product of
/// per-dimension `l/g` ratios for each candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct TpeProposal {
    pub candidates: Vec<HyperParams>,
    pub scores: Vec<f64>,
    /// Index of the first candidate with the highest score.
    pub chosen: usize,
}

impl TpeProposal {
    pub fn best(&self) -> HyperParams {
        self.candidates[self.chosen]
    }
}

fn usable<'a>(history: &'a [TrialRecord], space: &SearchSpace) -> Vec<(&'a TrialRecord, Encoded)> {
    history
        .iter()
        .filter(|r| r.is_complete())
        .filter_map(|r| space.encode(&r.hp).map(|e| (r, e)))
        .collect()
}

/// Builds the TPE candidate pool, or `None` while fewer than `n_startup`
/// COMPLETE trials inside `space` exist.
pub fn tpe_propose<R: Rng + ?Sized>(
    history: &[TrialRecord],
    space: &SearchSpace,
    cfg: &TpeConfig,
    rng: &mut R,
) -> Result<Option<TpeProposal>> {
    cfg.validate()?;
    let complete = usable(history, space);
    if complete.len() < cfg.n_startup {
        return Ok(None);
    }
    let records: Vec<TrialRecord> = complete.iter().map(|(r, _)| (*r).clone()).collect();
    let (good, bad) = split_good_bad(&records, cfg.gamma)?;
    let encode = |set: Vec<&TrialRecord>| -> Vec<Encoded> {
        set.iter()
            .map(|r| space.encode(&r.hp).expect("filtered to the space"))
            .collect()
    };
    let est = Estimators::fit(space, &encode(good), &encode(bad), cfg.prior_weight);

    let encoded: Vec<Encoded> = (0..cfg.n_candidates).map(|_| est.sample(rng)).collect();
    let scores: Vec<f64> = encoded.iter().map(|e| est.score(e)).collect();
    let mut chosen = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[chosen] {
            chosen = i;
        }
    }
    Ok(Some(TpeProposal {
        candidates: encoded.iter().map(|e| space.decode(e)).collect(),
        scores,
        chosen,
    }))
}

/// Next configuration to try: the best-scoring TPE candidate, or a uniform
/// random draw during startup. FAILED trials are ignored.
pub fn tpe_suggest<R: Rng + ?Sized>(
    history: &[TrialRecord],
    space: &SearchSpace,
    cfg: &TpeConfig,
    rng: &mut R,
) -> Result<HyperParams> {
    Ok(match tpe_propose(history, space, cfg, rng)? {
        Some(p) => p.best(),
        None => space.sample_random(rng),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hpo::{TrialState, FAILED_LOSS};
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(trial: u32, loss: f64, hp: HyperParams) -> TrialRecord {
        TrialRecord::new(trial, loss, hp, TrialState::Complete, 0, 0.0)
    }

    fn losses(ls: &[f64]) -> Vec<TrialRecord> {
        ls.iter()
            .enumerate()
            .map(|(i, &l)| record(i as u32 + 1, l, HyperParams::baseline()))
            .collect()
    }

    #[test]
    fn eight_trials_quarter_split() {
        let h = losses(&[0.8, 0.1, 0.7, 0.2, 0.6, 0.3, 0.5, 0.4]);
        let (good, bad) = split_good_bad(&h, 0.25).unwrap();
        assert_eq!(good.iter().map(|r| r.trial).collect::<Vec<_>>(), [2, 4]);
        assert_eq!(bad.len(), 6);
    }

    #[test]
    fn single_trial_is_good() {
        let h = losses(&[0.5]);
        let (good, bad) = split_good_bad(&h, 0.25).unwrap();
        assert_eq!((good.len(), bad.len()), (1, 0));
    }

    #[test]
    fn boundary_tie_goes_to_earlier_trial() {
        let h = losses(&[0.9, 0.3, 0.1, 0.3, 0.9, 0.9, 0.9, 0.9]);
        let (good, _) = split_good_bad(&h, 0.25).unwrap();
        assert_eq!(good.iter().map(|r| r.trial).collect::<Vec<_>>(), [3, 2]);
    }

    #[test]
    fn empty_history_is_an_error() {
        assert!(split_good_bad(&[], 0.25).is_err());
    }

    #[test]
    fn good_count_is_ceiling() {
        for n in 1..=200usize {
            let h = losses(&vec![0.5; n]);
            let (good, bad) = split_good_bad(&h, 0.25).unwrap();
            assert_eq!(good.len(), n.div_ceil(4), "n = {n}");
            assert_eq!(good.len() + bad.len(), n);
        }
    }

    #[test]
    fn smoothing_matches_hand_counts() {
        // 3 of 4 observations on value 0, K = 2, w = 1: (3 + 0.5) / 5 and (1 + 0.5) / 5.
        let p = parzen([0usize, 0, 0, 1].iter(), 2, 1.0);
        assert_eq!(p, [0.7, 0.3]);
        let empty = parzen([].iter(), 4, 1.0);
        assert_eq!(empty, [0.25; 4]);
    }

    #[test]
    fn startup_falls_back_to_random_draw() {
        let space = SearchSpace::default();
        let h = losses(&[0.2, 0.4, 0.6]);
        let cfg = TpeConfig::default();
        let a = tpe_suggest(&h, &space, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = space.sample_random(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn failed_trials_do_not_count_toward_startup() {
        let space = SearchSpace::default();
        let cfg = TpeConfig {
            n_startup: 2,
            ..TpeConfig::default()
        };
        let mut h = losses(&[0.2, 0.4]);
        h[1].state = TrialState::Failed;
        h[1].loss = FAILED_LOSS;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(tpe_propose(&h, &space, &cfg, &mut rng).unwrap().is_none());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cfg in [
            TpeConfig {
                gamma: 1.0,
                ..TpeConfig::default()
            },
            TpeConfig {
                n_startup: 0,
                ..TpeConfig::default()
            },
            TpeConfig {
                n_candidates: 0,
                ..TpeConfig::default()
            },
            TpeConfig {
                prior_weight: 0.0,
                ..TpeConfig::default()
            },
        ] {
            assert!(tpe_suggest(&[], &space, &cfg, &mut rng).is_err());
        }
    }

    #[test]
    fn prefers_batch_norm_when_it_separates_good_from_bad() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut history = Vec::new();
        for t in 1..=48u32 {
            let mut hp = space.sample_random(&mut rng);
            let good = t % 4 == 0;
            hp.batch_norm = u8::from(good);
            history.push(record(t, if good { 0.1 } else { 0.8 }, hp));
        }
        // 12 good trials, all BN = 1; 36 bad, all BN = 0. l(1)/g(1) = (12.5/13)/(0.5/37) ≈ 71.
        let cfg = TpeConfig::default();
        let picks = (0..1000)
            .filter(|&s| {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                tpe_suggest(&history, &space, &cfg, &mut r).unwrap().batch_norm == 1
            })
            .count();
        assert!(picks > 900, "{picks}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn suggestions_are_always_valid(seed in any::<u64>(), n in 0usize..40) {
            let space = SearchSpace::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h: Vec<TrialRecord> = (1..=n as u32)
                .map(|t| record(t, rng.random(), space.sample_random(&mut rng)))
                .collect();
            let cfg = TpeConfig { n_startup: 3, ..TpeConfig::default() };
            let hp = tpe_suggest(&h, &space, &cfg, &mut rng).unwrap();
            prop_assert!(hp.violations().is_empty());
        }
    }
}
