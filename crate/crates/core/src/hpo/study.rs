use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ledger::{best_trial, LedgerWriter, TrialRecord, TrialState, FAILED_LOSS};
use super::space::SearchSpace;
use super::tpe::{tpe_suggest, TpeConfig};
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::model::{build_architecture, HyperParams, UNet};
use crate::training::{dataset_dice_loss, train, CheckpointPolicy, TrainConfig, TrainResult, DEFAULT_EPOCHS};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one trial's model initialization and training, derived from the
/// study seed and trial number alone so a trial can be replayed in isolation.
pub fn trial_seed(study_seed: u64, trial: u32) -> u64 {
    splitmix64(study_seed ^ splitmix64(u64::from(trial)))
}

fn suggestion_rng(study_seed: u64, trial: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(trial_seed(study_seed, trial) ^ 0x5EED_7BE5_0000_0000))
}

/// Identifies the trial an objective call belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialContext {
    pub trial: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutcome {
    pub best: TrialRecord,
    pub ledger: Vec<TrialRecord>,
}

/// Sequential TPE study with an optional on-disk ledger.
#[derive(Debug)]
pub struct Study {
    space: SearchSpace,
    cfg: TpeConfig,
    seed: u64,
    records: Vec<TrialRecord>,
    writer: Option<LedgerWriter>,
}

impl Study {
    pub fn new(space: SearchSpace, cfg: TpeConfig, seed: u64) -> Result<Self> {
        space.validate()?;
        cfg.validate()?;
        Ok(Self {
            space,
            cfg,
            seed,
            records: Vec::new(),
            writer: None,
        })
    }

    /// Starts a fresh ledger file at `path`.
    pub fn with_ledger(mut self, path: &Path) -> Result<Self> {
        if !self.records.is_empty() {
            return Err(Error::invalid("a study with trials cannot switch to a new ledger"));
        }
        self.writer = Some(LedgerWriter::create(path)?);
        Ok(self)
    }

    /// Continues the study recorded in `path`. Every row's seed must match
    /// this study's seed derivation.
    pub fn resume(space: SearchSpace, cfg: TpeConfig, seed: u64, path: &Path) -> Result<Self> {
        let mut study = Self::new(space, cfg, seed)?;
        let (writer, records) = LedgerWriter::resume(path)?;
        if let Some(r) = records.iter().find(|r| r.seed != trial_seed(seed, r.trial)) {
            return Err(Error::Ledger {
                line: r.trial as usize + 1,
                message: format!("trial {} was not produced with study seed {seed}", r.trial),
            });
        }
        info!("resuming study at trial {}", records.len() + 1);
        study.records = records;
        study.writer = Some(writer);
        Ok(study)
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_trial(&self) -> u32 {
        self.records.len() as u32 + 1
    }

    /// Suggests, evaluates and records one trial. Objective errors and
    /// non-finite losses are recorded as FAILED with loss 1.0.
    pub fn run_trial<F>(&mut self, objective: &mut F) -> Result<TrialRecord>
    where
        F: FnMut(&HyperParams, &TrialContext) -> Result<f64>,
    {
        let trial = self.next_trial();
        let ctx = TrialContext {
            trial,
            seed: trial_seed(self.seed, trial),
        };
        let hp = tpe_suggest(
            &self.records,
            &self.space,
            &self.cfg,
            &mut suggestion_rng(self.seed, trial),
        )?;
        let start = Instant::now();
        let outcome = objective(&hp, &ctx);
        let elapsed = start.elapsed().as_secs_f64();
        let (loss, state) = match outcome {
            Ok(l) if l.is_finite() => (l, TrialState::Complete),
            Ok(l) => {
                warn!("trial {trial} ({hp}) returned non-finite loss {l}");
                (FAILED_LOSS, TrialState::Failed)
            }
            Err(e) => {
                warn!("trial {trial} ({hp}) failed: {e}");
                (FAILED_LOSS, TrialState::Failed)
            }
        };
        let record = TrialRecord::new(trial, loss, hp, state, ctx.seed, elapsed);
        if let Some(w) = &mut self.writer {
            w.append(&record)?;
        }
        info!("trial {trial}: loss {:.4} {} [{hp}]", record.loss, record.state);
        self.records.push(record.clone());
        Ok(record)
    }

    /// Runs trials until the ledger holds `n_trials` rows.
    pub fn run<F>(&mut self, mut objective: F, n_trials: usize) -> Result<StudyOutcome>
    where
        F: FnMut(&HyperParams, &TrialContext) -> Result<f64>,
    {
        if n_trials == 0 {
            return Err(Error::invalid("n_trials must be at least 1"));
        }
        while self.records.len() < n_trials {
            self.run_trial(&mut objective)?;
        }
        self.outcome()
    }

    pub fn outcome(&self) -> Result<StudyOutcome> {
        let best = best_trial(&self.records).ok_or(Error::AllTrialsFailed)?.clone();
        Ok(StudyOutcome {
            best,
            ledger: self.records.clone(),
        })
    }
}

/// In-memory study of `n_trials` sequential trials.
pub fn optimize<F>(
    objective: F,
    space: &SearchSpace,
    n_trials: usize,
    cfg: &TpeConfig,
    seed: u64,
) -> Result<StudyOutcome>
where
    F: FnMut(&HyperParams, &TrialContext) -> Result<f64>,
{
    Study::new(space.clone(), *cfg, seed)?.run(objective, n_trials)
}

/// Training settings shared by every trial of a study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub epochs: usize,
    pub augment: bool,
    pub checkpoint_policy: CheckpointPolicy,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            augment: true,
            checkpoint_policy: CheckpointPolicy::BestValidation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialOutput {
    pub result: TrainResult,
    pub test_loss: f64,
}

fn split_input_size(split: &SplitDataset) -> Result<usize> {
    let first = split
        .train
        .samples
        .first()
        .ok_or_else(|| Error::invalid("training set is empty"))?;
    let (h, w) = first.image.dim();
    if h != w {
        return Err(Error::invalid(format!("samples must be square, found {h}×{w}")));
    }
    Ok(h)
}

/// Builds, trains and scores one configuration on the test split.
pub fn run_trial(hp: &HyperParams, split: &SplitDataset, cfg: &ObjectiveConfig, seed: u64) -> Result<TrialOutput> {
    if split.test.is_empty() {
        return Err(Error::invalid("test split is empty"));
    }
    let spec = build_architecture(hp, split_input_size(split)?)?;
    let model = UNet::new(&spec, seed)?;
    let mut train_cfg = TrainConfig::from_hyperparams(hp, seed)?;
    train_cfg.epochs = cfg.epochs;
    train_cfg.augment = cfg.augment;
    train_cfg.checkpoint_policy = cfg.checkpoint_policy;
    let mut result = train(model, split, &train_cfg)?;
    let test_loss = dataset_dice_loss(&mut result.model, &split.test)?;
    Ok(TrialOutput { result, test_loss })
}

/// Test-set Dice loss of `hp` trained on `split`.
pub fn study_objective(hp: &HyperParams, split: &SplitDataset, cfg: &ObjectiveConfig, seed: u64) -> Result<f64> {
    run_trial(hp, split, cfg, seed).map(|o| o.test_loss)
}
