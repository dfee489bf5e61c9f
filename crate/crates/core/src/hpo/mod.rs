//! Search space, trial ledger and Tree-structured Parzen Estimator study loop.

mod ledger;
mod space;
mod study;
mod tpe;

pub use ledger::{
    best_trial, ledger_to_string, parse_ledger, read_ledger, write_ledger, LedgerWriter, TrialRecord, TrialState,
    FAILED_LOSS, LEDGER_HEADER,
};
pub use space::{sample_random, Encoded, SearchSpace, DIMENSIONS};
pub use study::{
    optimize, run_trial, study_objective, trial_seed, ObjectiveConfig, Study, StudyOutcome, TrialContext, TrialOutput,
};
pub use tpe::{n_good, split_good_bad, tpe_propose, tpe_suggest, TpeConfig, TpeProposal};
