use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;
use serde::{Deserialize, Serialize};

use super::config::{write_run_config, RunConfig, OUT_ENV};
use super::{CommonArgs, EvalArgs, OptimizeArgs, PhantomArgs, PrepareArgs, ReportArgs, TrainArgs};
use crate::data::{
    generate_phantom_dataset, load_dataset, prepare_dataset, split_dataset, write_dataset, Dataset, SourceDb,
    SplitDataset,
};
use crate::eval::{evaluate_model, render_report, DatasetEvaluation, MeanMetrics, NamedEvaluation};
use crate::hpo::{best_trial, read_ledger, run_trial, ObjectiveConfig, SearchSpace, Study, TrialContext, TrialState};
use crate::model::{build_architecture, HyperParams, UNet};
use crate::training::{dataset_dice_loss, train, write_history, TrainConfig};

/// Marker left by `prepare`; its dataset is used as-is at the recorded size.
pub const PREPARED_FILE: &str = "prepared.toml";
pub const HISTORY_FILE: &str = "history.csv";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LEDGER_FILE: &str = "ledger.csv";
const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct PreparedMarker {
    input_size: usize,
}

/// Config file (or defaults) overlaid with `OUT_ENV` and then the flags.
fn resolve(config: Option<&Path>, flags: &CommonArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(out) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        cfg.out_dir = PathBuf::from(out);
    }
    if !flags.data.is_empty() {
        cfg.data = flags.data.clone();
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.input_size {
        cfg.input_size = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = &flags.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = flags.threshold {
        cfg.threshold = v;
    }
    if flags.test_source.is_some() {
        cfg.test_source = flags.test_source;
    }
    if flags.no_augment {
        cfg.augment = false;
    }
    if let Some(p) = flags.keep {
        cfg.checkpoint_policy = p.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fresh_dir(dir: &Path, force: bool) -> anyhow::Result<()> {
    if !force && dir.is_dir() && fs::read_dir(dir)?.next().is_some() {
        bail!(
            "output directory {} is not empty (use --force to overwrite)",
            dir.display()
        );
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Loads every data root, applies source tags and brings each to
/// `input_size` unless `prepare` already did.
pub fn load_data(cfg: &RunConfig, input_size: usize) -> anyhow::Result<Dataset> {
    cfg.require_data()?;
    let mut parts = Vec::with_capacity(cfg.data.len());
    for d in &cfg.data {
        let mut ds = load_dataset(&d.root, None).with_context(|| format!("loading {}", d.root.display()))?;
        if let Some(src) = d.source {
            ds = ds.retag(src, "");
        }
        let marker = d.root.join(PREPARED_FILE);
        let prepared = match fs::read_to_string(&marker) {
            Ok(text) => toml::from_str::<PreparedMarker>(&text)?.input_size == input_size,
            Err(_) => false,
        };
        if !prepared {
            ds = prepare_dataset(&ds, input_size)?;
        }
        info!("loaded {} samples from {}", ds.len(), d.root.display());
        parts.push(ds);
    }
    Ok(Dataset::merge("data", parts)?)
}

/// The configured test source, or OWN when present, or the whole pool.
pub fn split_for(cfg: &RunConfig, data: &Dataset) -> anyhow::Result<SplitDataset> {
    let source = cfg
        .test_source
        .or_else(|| (data.count_source(SourceDb::Own) > 0).then_some(SourceDb::Own));
    Ok(split_dataset(data, cfg.seed, source)?)
}

#[derive(Debug, Serialize)]
struct SplitIds<'a> {
    seed: u64,
    train: Vec<&'a str>,
    validation: Vec<&'a str>,
    test: Vec<&'a str>,
}

fn write_split(dir: &Path, split: &SplitDataset) -> anyhow::Result<()> {
    write_json(
        &dir.join("split.json"),
        &SplitIds {
            seed: split.seed,
            train: split.train.ids().collect(),
            validation: split.validation.ids().collect(),
            test: split.test.ids().collect(),
        },
    )
}

pub fn cmd_phantom(config: Option<&Path>, args: &PhantomArgs) -> anyhow::Result<()> {
    let cfg = resolve(config, &CommonArgs::default())?;
    let mut ds = generate_phantom_dataset(args.n, args.size, args.severe, args.seed)?;
    if let Some(tag) = args.tag {
        ds = ds.retag(tag, &format!("{}_", tag.as_str().to_ascii_lowercase()));
    }
    write_dataset(&ds, &args.out, args.force)?;
    write_run_config(&args.out, "phantom", &cfg, args)?;
    println!("wrote {} phantom samples to {}", ds.len(), args.out.display());
    Ok(())
}

pub fn cmd_prepare(config: Option<&Path>, args: &PrepareArgs) -> anyhow::Result<PathBuf> {
    let cfg = resolve(config, &args.common)?;
    let ds = load_data(&cfg, cfg.input_size)?;
    let dest = args
        .dest
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(format!("prepared_{}", cfg.input_size)));
    write_dataset(&ds, &dest, args.force)?;
    let marker = toml::to_string(&PreparedMarker {
        input_size: cfg.input_size,
    })?;
    fs::write(dest.join(PREPARED_FILE), marker)?;
    write_run_config(&dest, "prepare", &cfg, args)?;
    println!(
        "prepared {} samples at {s}×{s} in {}",
        ds.len(),
        dest.display(),
        s = cfg.input_size
    );
    Ok(dest)
}

/// What `train` and each study trial record next to their checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub hyperparams: HyperParams,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub final_validation_loss: Option<f64>,
    pub test_loss: f64,
    pub test_mean: MeanMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial: Option<u32>,
}

fn hyperparams_from(args: &TrainArgs) -> anyhow::Result<(HyperParams, String)> {
    match (&args.preset, &args.hp) {
        (Some(name), None) => {
            let hp = HyperParams::preset(name)
                .with_context(|| format!("unknown preset {name:?} (use baseline or optimized)"))?;
            Ok((hp, name.to_ascii_lowercase()))
        }
        (None, Some(text)) => {
            let hp: HyperParams = text.parse()?;
            hp.validate()?;
            Ok((hp, "custom".to_owned()))
        }
        _ => bail!("give exactly one of --preset and --hp"),
    }
}

pub fn cmd_train(config: Option<&Path>, args: &TrainArgs) -> anyhow::Result<PathBuf> {
    let cfg = resolve(config, &args.common)?;
    let (hp, label) = hyperparams_from(args)?;
    let spec = build_architecture(&hp, cfg.input_size)?;
    let data = load_data(&cfg, cfg.input_size)?;
    let split = split_for(&cfg, &data)?;

    let name = args
        .name
        .clone()
        .unwrap_or_else(|| format!("train_{label}_seed{}", cfg.seed));
    let dir = cfg.out_dir.join(name);
    fresh_dir(&dir, args.force)?;
    write_run_config(&dir, "train", &cfg, args)?;
    write_split(&dir, &split)?;

    let mut train_cfg = TrainConfig::from_hyperparams(&hp, cfg.seed)?;
    train_cfg.epochs = cfg.epochs;
    train_cfg.augment = cfg.augment;
    train_cfg.checkpoint_policy = cfg.checkpoint_policy;
    info!(
        "training {hp} for {} epochs on {} samples",
        cfg.epochs,
        split.train.len()
    );
    let mut result = train(UNet::new(&spec, cfg.seed)?, &split, &train_cfg)?;
    write_history(&dir.join(HISTORY_FILE), &result.history)?;
    result.model.save_checkpoint(&dir.join(CHECKPOINT_DIR))?;

    let test_loss = dataset_dice_loss(&mut result.model, &split.test)?;
    let eval = evaluate_model(&mut result.model, &split.test, cfg.threshold)?;
    write_json(&dir.join(EVALUATION_FILE), &eval)?;
    write_json(
        &dir.join(SUMMARY_FILE),
        &RunSummary {
            hyperparams: hp,
            seed: cfg.seed,
            epochs: result.history.len(),
            best_epoch: result.best_epoch,
            final_validation_loss: result.final_validation_loss,
            test_loss,
            test_mean: eval.mean,
            trial: None,
        },
    )?;
    println!(
        "test loss {test_loss:.4}, DSC {:.3}, JI {:.3}, SE {:.3}, SP {:.3} -> {}",
        eval.mean.dsc,
        eval.mean.ji,
        eval.mean.se,
        eval.mean.sp,
        dir.display()
    );
    Ok(dir)
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

pub fn cmd_optimize(config: Option<&Path>, args: &OptimizeArgs) -> anyhow::Result<PathBuf> {
    let mut cfg = resolve(config, &args.common)?;
    if let Some(n) = args.n_trials {
        cfg.n_trials = n;
    }
    cfg.validate()?;
    let data = load_data(&cfg, cfg.input_size)?;
    let split = split_for(&cfg, &data)?;
    let space = SearchSpace::default();

    let (dir, mut study) = match &args.resume {
        Some(ledger) => {
            let dir = ledger.parent().map(Path::to_path_buf).unwrap_or_default();
            let study = Study::resume(space, cfg.tpe, cfg.seed, ledger)
                .with_context(|| format!("resuming from {}", ledger.display()))?;
            (dir, study)
        }
        None => {
            let name = args.name.clone().unwrap_or_else(|| format!("study_seed{}", cfg.seed));
            let dir = cfg.out_dir.join(name);
            fresh_dir(&dir, args.force)?;
            let study = Study::new(space, cfg.tpe, cfg.seed)?.with_ledger(&dir.join(LEDGER_FILE))?;
            (dir, study)
        }
    };
    if study.records().len() >= cfg.n_trials {
        bail!(
            "ledger already holds {} trials; raise --n-trials to continue",
            study.records().len()
        );
    }
    write_run_config(&dir, "optimize", &cfg, args)?;
    write_split(&dir, &split)?;

    let objective_cfg = ObjectiveConfig {
        epochs: cfg.epochs,
        augment: cfg.augment,
        checkpoint_policy: cfg.checkpoint_policy,
    };
    let trials_dir = dir.join("trials");
    let best_dir = dir.join("best");
    let mut best_loss = best_trial(study.records()).map(|r| r.loss);
    let fatal: RefCell<Option<anyhow::Error>> = RefCell::new(None);

    let mut objective = |hp: &HyperParams, ctx: &TrialContext| -> crate::Result<f64> {
        let mut out = run_trial(hp, &split, &objective_cfg, ctx.seed)?;
        let eval = evaluate_model(&mut out.result.model, &split.test, cfg.threshold)?;
        let summary = RunSummary {
            hyperparams: *hp,
            seed: ctx.seed,
            epochs: out.result.history.len(),
            best_epoch: out.result.best_epoch,
            final_validation_loss: out.result.final_validation_loss,
            test_loss: out.test_loss,
            test_mean: eval.mean,
            trial: Some(ctx.trial),
        };
        let trial_dir = trials_dir.join(format!("trial_{:04}_seed{}", ctx.trial, ctx.seed));
        let saved = (|| -> anyhow::Result<()> {
            fs::create_dir_all(&trial_dir)?;
            write_json(&trial_dir.join(SUMMARY_FILE), &summary)?;
            write_history(&trial_dir.join(HISTORY_FILE), &out.result.history)?;
            let loss = round4(out.test_loss);
            if out.test_loss.is_finite() && best_loss.is_none_or(|b| loss < b) {
                best_loss = Some(loss);
                if best_dir.exists() {
                    fs::remove_dir_all(&best_dir)?;
                }
                out.result.model.save_checkpoint(&best_dir.join(CHECKPOINT_DIR))?;
                write_json(&best_dir.join(SUMMARY_FILE), &summary)?;
                write_json(&best_dir.join(EVALUATION_FILE), &eval)?;
            }
            Ok(())
        })();
        if let Err(e) = saved {
            *fatal.borrow_mut() = Some(e.context(format!("saving trial {}", ctx.trial)));
            return Err(crate::Error::InvalidArgument("trial outputs could not be saved".into()));
        }
        Ok(out.test_loss)
    };

    while study.records().len() < cfg.n_trials {
        let record = study.run_trial(&mut objective)?;
        if let Some(e) = fatal.borrow_mut().take() {
            return Err(e);
        }
        let state = if record.state == TrialState::Complete {
            ""
        } else {
            " (failed)"
        };
        println!(
            "trial {:>3}: loss {:.4}{state}  {}",
            record.trial, record.loss, record.hp
        );
    }
    let outcome = study.outcome()?;
    render_report(&[], Some(&outcome.ledger), &dir, "study")?;
    println!(
        "best trial {} loss {:.4} [{}] -> {}",
        outcome.best.trial,
        outcome.best.loss,
        outcome.best.hp,
        dir.display()
    );
    Ok(dir)
}

pub fn cmd_eval(config: Option<&Path>, args: &EvalArgs) -> anyhow::Result<PathBuf> {
    let cfg = resolve(config, &args.common)?;
    let ckpt = if args.checkpoint.join(crate::model::WEIGHTS_FILE).is_file() {
        args.checkpoint.clone()
    } else {
        args.checkpoint.join(CHECKPOINT_DIR)
    };
    let mut model = UNet::load_checkpoint(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let data = load_data(&cfg, model.input_size())?;
    let target = if args.all { data } else { split_for(&cfg, &data)?.test };

    let run_name = args.name.clone().unwrap_or_else(|| {
        let run = ckpt
            .parent()
            .filter(|_| ckpt.ends_with(CHECKPOINT_DIR))
            .unwrap_or(&ckpt);
        format!("eval_{}", run.file_name().and_then(|s| s.to_str()).unwrap_or("model"))
    });
    let dir = cfg.out_dir.join(&run_name);
    fs::create_dir_all(&dir)?;
    write_run_config(&dir, "eval", &cfg, args)?;
    let eval = evaluate_model(&mut model, &target, cfg.threshold)?;
    write_json(&dir.join(EVALUATION_FILE), &eval)?;
    let rows = named_rows(&run_name, &eval);
    print!("{}", crate::eval::format_metrics_table(&rows));
    Ok(dir)
}

/// One row per source database in the evaluation.
fn named_rows(model: &str, eval: &DatasetEvaluation) -> Vec<NamedEvaluation> {
    let mut sources: Vec<SourceDb> = eval.per_image.iter().map(|e| e.source_db).collect();
    sources.sort();
    sources.dedup();
    sources
        .into_iter()
        .map(|src| NamedEvaluation {
            model: model.to_owned(),
            database: src.to_string(),
            mean: eval.mean_for(src).expect("source present"),
            images: eval.per_image.iter().filter(|e| e.source_db == src).count(),
            threshold: eval.threshold,
        })
        .collect()
}

pub fn cmd_report(config: Option<&Path>, args: &ReportArgs) -> anyhow::Result<PathBuf> {
    let flags = CommonArgs {
        out: args.out.clone(),
        ..Default::default()
    };
    let cfg = resolve(config, &flags)?;
    if args.evals.is_empty() && args.ledger.is_none() {
        bail!("nothing to report (give --eval and/or --ledger)");
    }
    let mut rows = Vec::new();
    for item in &args.evals {
        let (model, path) = match item.split_once('=') {
            Some((m, p)) => (m.to_owned(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(item);
                let model = p
                    .parent()
                    .and_then(Path::file_name)
                    .and_then(|s| s.to_str())
                    .unwrap_or("model")
                    .to_owned();
                (model, p)
            }
        };
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let eval: DatasetEvaluation =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        rows.extend(named_rows(&model, &eval));
    }
    let ledger = match &args.ledger {
        Some(p) => Some(read_ledger(p).with_context(|| format!("reading ledger {}", p.display()))?),
        None => None,
    };
    let dir = cfg.out_dir.join(format!("report_{}", args.name));
    write_run_config(&dir, "report", &cfg, args)?;
    let files = render_report(&rows, ledger.as_deref(), &dir, &args.name)?;
    for f in files.all() {
        println!("{}", f.display());
    }
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "seed = 3\nepochs = 7\nout_dir = \"from_file\"\n").unwrap();
        let flags = CommonArgs {
            epochs: Some(2),
            ..Default::default()
        };
        let cfg = resolve(Some(&path), &flags).unwrap();
        assert_eq!((cfg.seed, cfg.epochs), (3, 2));
        assert_eq!(cfg.n_trials, 100);
    }

    #[test]
    fn missing_data_root_is_reported() {
        let cfg = RunConfig {
            data: vec!["/definitely/not/here".parse().unwrap()],
            ..Default::default()
        };
        let err = load_data(&cfg, 64).unwrap_err();
        assert!(err.to_string().contains("does not exist"), "{err}");
    }

    #[test]
    fn auto_test_source_prefers_own() {
        let own = generate_phantom_dataset(10, 16, 0.0, 1)
            .unwrap()
            .retag(SourceDb::Own, "o");
        let other = generate_phantom_dataset(30, 16, 0.0, 2).unwrap();
        let data = Dataset::merge("m", [own, other]).unwrap();
        let split = split_for(&RunConfig::default(), &data).unwrap();
        assert!(split.test.samples.iter().all(|s| s.source_db == SourceDb::Own));
        let pooled = split_for(
            &RunConfig::default(),
            &generate_phantom_dataset(20, 16, 0.0, 3).unwrap(),
        )
        .unwrap();
        assert_eq!(pooled.test.len(), 2);
    }
}
