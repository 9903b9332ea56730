//! The pipeline steps behind the command-line subcommands.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/{train,val,test}.csv
//! checkpoints/{ground_truth,phase1,generator,discriminator,deeplf,baseline-*}.json
//! logs/<phase>.jsonl
//! reports/t<start>-<T>/{<model>.json,<model>.csv,comparison.json}
//! ```

use std::path::{Path, PathBuf};

use super::checkpoint::{Checkpoint, Lineage};
use super::config::ExperimentConfig;
use super::write_atomic;
use crate::error::{Error, Result};
use crate::evaluation::{
    advance_cohort, compare_models, evaluate_model, write_per_step_csv, write_report_json, ComparisonTable, Dynamics,
    EvalSetting, FairnessReport,
};
use crate::models::MlpClassifier;
use crate::seeds::{SeedTree, Stream};
use crate::simulator::{
    generate_initial_cohort, load_dataset_csv, load_initial_cohort_csv, roll_out_truth, write_dataset_csv, Cohort,
    GroundTruthModel, TimeSeriesDataset,
};
use crate::training::{
    split_dataset, train_baseline, train_deeplf, train_phase1, train_rcgan, BaselineKind, LogRecord, TrainConfig,
};

/// Simulated data after the train / validation / test split.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub ground_truth: GroundTruthModel,
    pub train: TimeSeriesDataset,
    pub val: TimeSeriesDataset,
    pub test: TimeSeriesDataset,
}

/// Fits the ground-truth classifier on the first-step labels, simulates the
/// observational process and splits it.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let tree = SeedTree::new(cfg.seed);
    let ds = &cfg.dataset;
    let cohort = match &ds.csv {
        Some(path) => load_initial_cohort_csv(path)?,
        None => generate_initial_cohort(ds.n, ds.d, ds.cluster_separation, tree.seed(Stream::Data, 0))?,
    };
    let labels = cohort
        .y1()
        .ok_or_else(|| Error::invalid("dataset.csv", "the initial cohort needs a label for every row"))?;
    let first = TimeSeriesDataset::new(
        cohort.d(),
        1,
        cohort.s().to_vec(),
        cohort.x1().to_vec(),
        labels.to_vec(),
    )?;
    let gt_cfg = TrainConfig {
        epochs: ds.ground_truth_epochs,
        seed: tree.seed(Stream::Init, 0),
        ..cfg.training.clone()
    };
    let fitted = train_phase1(&first, None, &cfg.classifier_config(cohort.d()), &gt_cfg)?;
    let ground_truth = GroundTruthModel::new(fitted.model, ds.epsilon)?;
    let unlabeled = Cohort::new(cohort.d(), cohort.s().to_vec(), cohort.x1().to_vec(), None)?;
    let full = roll_out_truth(
        &ground_truth,
        &unlabeled,
        None,
        ds.horizon,
        &mut tree.rng(Stream::Simulation),
    )?;
    let (train, val, test) = split_dataset(&full, cfg.training.split_ratios, tree.seed(Stream::Split, 0))?;
    Ok(GeneratedData {
        ground_truth,
        train,
        val,
        test,
    })
}

fn data_path(out: &Path, name: &str) -> PathBuf {
    out.join("data").join(format!("{name}.csv"))
}

fn checkpoint_path(out: &Path, name: &str) -> PathBuf {
    out.join("checkpoints").join(format!("{name}.json"))
}

fn mkdirs(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Prerequisite(format!("{} ({hint})", path.display())))
    }
}

fn lineage(cfg: &ExperimentConfig, phase: &str, parents: &[&Checkpoint]) -> Lineage {
    Lineage {
        master_seed: cfg.seed,
        phase: phase.into(),
        parents: parents.iter().map(|c| c.param_fingerprint()).collect(),
    }
}

/// Writes the split datasets and the ground-truth checkpoint; returns the written paths.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let data = generate_data(cfg)?;
    mkdirs(&out.join("data"))?;
    mkdirs(&out.join("checkpoints"))?;
    let mut written = Vec::new();
    for (name, ds) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let p = data_path(out, name);
        write_dataset_csv(&p, ds)?;
        written.push(p);
    }
    let p = checkpoint_path(out, "ground_truth");
    Checkpoint::ground_truth(&data.ground_truth, &cfg.fingerprint(), lineage(cfg, "generate", &[])).save(&p)?;
    written.push(p);
    Ok(written)
}

/// What `train` fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    Phase1,
    Rcgan,
    Deeplf,
    Baseline(BaselineKind),
}

impl TrainPhase {
    pub fn name(self) -> &'static str {
        match self {
            TrainPhase::Phase1 => "phase1",
            TrainPhase::Rcgan => "rcgan",
            TrainPhase::Deeplf => "deeplf",
            TrainPhase::Baseline(BaselineKind::Plain) => "baseline-plain",
            TrainPhase::Baseline(BaselineKind::Dp) => "baseline-dp",
            TrainPhase::Baseline(BaselineKind::Eo) => "baseline-eo",
        }
    }
}

impl std::str::FromStr for TrainPhase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phase1" => Ok(TrainPhase::Phase1),
            "rcgan" => Ok(TrainPhase::Rcgan),
            "deeplf" => Ok(TrainPhase::Deeplf),
            other => match other.strip_prefix("baseline-") {
                Some(kind) => Ok(TrainPhase::Baseline(kind.parse()?)),
                None => Err(Error::invalid(
                    "phase",
                    format!("expected phase1, rcgan, deeplf or baseline-{{plain,dp,eo}}, got `{other}`"),
                )),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoints: Vec<PathBuf>,
    pub log: PathBuf,
    /// Early stop of repeated gradient descent, or the Sinkhorn flag of the last round.
    pub converged: bool,
    pub history: Vec<LogRecord>,
}

fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in records {
        serde_json::to_writer(&mut bytes, r)?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)
}

pub fn cmd_train(cfg: &ExperimentConfig, phase: TrainPhase, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let train_csv = data_path(out, "train");
    let val_csv = data_path(out, "val");
    let phase1_ck = checkpoint_path(out, "phase1");
    let gen_ck = checkpoint_path(out, "generator");
    require(&train_csv, "run `fairlong generate` first")?;
    match phase {
        TrainPhase::Rcgan => require(&phase1_ck, "train phase1 first")?,
        TrainPhase::Deeplf => {
            require(&gen_ck, "train rcgan first")?;
            require(&phase1_ck, "train phase1 first")?;
        }
        _ => require(&val_csv, "run `fairlong generate` first")?,
    }

    let train = load_dataset_csv(&train_csv)?;
    let tcfg = cfg.train_config();
    let arch = cfg.classifier_config(train.d());
    let fp = cfg.fingerprint();
    mkdirs(&out.join("checkpoints"))?;
    mkdirs(&out.join("logs"))?;
    let mut checkpoints = Vec::new();
    let (history, converged) = match phase {
        TrainPhase::Phase1 | TrainPhase::Baseline(_) => {
            let val = load_dataset_csv(&val_csv)?;
            let run = match phase {
                TrainPhase::Baseline(kind) => {
                    train_baseline(&train, Some(&val), &arch, kind, tcfg.penalty_weight, &tcfg)?
                }
                _ => train_phase1(&train, Some(&val), &arch, &tcfg)?,
            };
            let p = checkpoint_path(out, phase.name());
            Checkpoint::classifier(&run.model, &fp, lineage(cfg, phase.name(), &[])).save(&p)?;
            checkpoints.push(p);
            (run.history, true)
        }
        TrainPhase::Rcgan => {
            let h_ck = Checkpoint::load(&phase1_ck)?;
            let h = h_ck.to_classifier()?;
            let run = train_rcgan(&train, &h, &cfg.generator_config(train.d()), &tcfg)?;
            let lin = lineage(cfg, "rcgan", &[&h_ck]);
            let p = checkpoint_path(out, "generator");
            Checkpoint::generator(&run.generator, &fp, lin.clone()).save(&p)?;
            checkpoints.push(p);
            let p = checkpoint_path(out, "discriminator");
            Checkpoint::discriminator(&run.discriminator, &fp, lin).save(&p)?;
            checkpoints.push(p);
            (run.history, true)
        }
        TrainPhase::Deeplf => {
            let g_ck = Checkpoint::load(&gen_ck)?;
            let h_ck = Checkpoint::load(&phase1_ck)?;
            let (gen, h) = (g_ck.to_generator()?, h_ck.to_classifier()?);
            let run = train_deeplf(&gen, &h, &train.cohort(), train.horizon(), &tcfg, &cfg.sinkhorn)?;
            let p = checkpoint_path(out, "deeplf");
            Checkpoint::classifier(&run.model, &fp, lineage(cfg, "deeplf", &[&g_ck, &h_ck])).save(&p)?;
            checkpoints.push(p);
            (run.history, run.converged)
        }
    };
    let log = out.join("logs").join(format!("{}.jsonl", phase.name()));
    write_log(&log, &history)?;
    Ok(TrainSummary {
        checkpoints,
        log,
        converged,
        history,
    })
}

/// Display name of a classifier checkpoint, from its file stem.
pub fn model_name(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match stem.as_str() {
        "phase1" | "baseline-plain" => "MLP".into(),
        "baseline-dp" => "MLP-DP".into(),
        "baseline-eo" => "MLP-EO".into(),
        "deeplf" => "DeepLF".into(),
        _ => stem,
    }
}

fn report_dir(out: &Path, setting: &EvalSetting) -> PathBuf {
    out.join("reports")
        .join(format!("t{}-{}", setting.start_step, setting.target_t()))
}

/// Cohort the evaluation starts from: test-set first steps, advanced to
/// `start_step` by the observational classifier under the generator when needed.
pub fn evaluation_cohort(
    cfg: &ExperimentConfig,
    test: &TimeSeriesDataset,
    gen: &crate::models::Generator,
    observational: &MlpClassifier,
    setting: &EvalSetting,
) -> Result<Cohort> {
    let cohort = test.cohort();
    if setting.start_step == 1 {
        return Ok(cohort);
    }
    let seed = SeedTree::new(cfg.seed).seed(Stream::Eval, u64::MAX);
    advance_cohort(
        Dynamics::Generator(gen),
        observational,
        &cohort,
        setting.start_step,
        seed,
    )
}

/// Evaluates every model under one setting with shared seeds; writes reports and the comparison table.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    out: &Path,
    setting: &EvalSetting,
    models: &[PathBuf],
) -> Result<(Vec<FairnessReport>, ComparisonTable)> {
    cfg.validate()?;
    setting.validate()?;
    let gt_ck = checkpoint_path(out, "ground_truth");
    let gen_ck = checkpoint_path(out, "generator");
    let h_ck = checkpoint_path(out, "phase1");
    let test_csv = data_path(out, "test");
    require(&gt_ck, "run `fairlong generate` first")?;
    require(&test_csv, "run `fairlong generate` first")?;
    require(&h_ck, "train phase1 first")?;
    require(&gen_ck, "train rcgan first")?;
    let models: Vec<PathBuf> = if models.is_empty() {
        ["phase1", "baseline-dp", "baseline-eo", "deeplf"]
            .iter()
            .map(|n| checkpoint_path(out, n))
            .filter(|p| p.is_file())
            .collect()
    } else {
        models.to_vec()
    };
    for m in &models {
        require(m, "model checkpoint")?;
    }

    let gt = Checkpoint::load(&gt_ck)?.to_ground_truth()?;
    let gen = Checkpoint::load(&gen_ck)?.to_generator()?;
    let h = Checkpoint::load(&h_ck)?.to_classifier()?;
    let test = load_dataset_csv(&test_csv)?;
    let cohort = evaluation_cohort(cfg, &test, &gen, &h, setting)?;
    let seeds = SeedTree::new(cfg.seed).child(Stream::Eval, 0);
    let dir = report_dir(out, setting);
    mkdirs(&dir)?;
    let mut reports = Vec::new();
    for m in &models {
        let policy = Checkpoint::load(m)?.to_classifier()?;
        let name = model_name(m);
        let report = evaluate_model(
            &name,
            &policy,
            Dynamics::Generator(&gen),
            gt.classifier(),
            &cohort,
            setting,
            &cfg.sinkhorn,
            &seeds,
        )?;
        write_report_json(dir.join(format!("{name}.json")), &report)?;
        write_per_step_csv(dir.join(format!("{name}.csv")), &report)?;
        reports.push(report);
    }
    let table = compare_models(&reports)?;
    let mut bytes = serde_json::to_vec_pretty(&table)?;
    bytes.push(b'\n');
    write_atomic(&dir.join("comparison.json"), &bytes)?;
    Ok((reports, table))
}

/// Markdown summary of every comparison table under `out/reports`.
pub fn cmd_report(out: &Path) -> Result<String> {
    let root = out.join("reports");
    if !root.is_dir() {
        return Err(Error::Prerequisite(format!(
            "{} (run `fairlong evaluate` first)",
            root.display()
        )));
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("comparison.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Prerequisite(format!("{}/*/comparison.json", root.display())));
    }
    let mut text = String::new();
    for dir in dirs {
        let path = dir.join("comparison.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let table: ComparisonTable = serde_json::from_slice(&bytes)?;
        text.push_str(&format!("## Steps {}..={}\n\n", table.range[0], table.range[1]));
        text.push_str("| model | accuracy | local unfairness | long-term unfairness |\n|---|---|---|---|\n");
        for r in &table.rows {
            text.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} |\n",
                r.model, r.mean_accuracy, r.mean_local_unfairness, r.long_term_j1
            ));
        }
        text.push('\n');
    }
    write_atomic(&root.join("summary.md"), text.as_bytes())?;
    Ok(text)
}
