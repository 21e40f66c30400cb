//! Run directories, fold jobs, worker processes and report finalization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use sscdl_core::checkpoint;
use sscdl_core::dataset::{load_tudataset_with, make_split_plan, DatasetManifest, SplitPlan};
use sscdl_core::eval::{
    aggregate, run_fold, Dataset, ExperimentOutcome, FoldFailure, FoldReport, FoldRun, RunContext, Variant,
};
use sscdl_core::model::ModelParams;
use sscdl_core::report::{self, FoldRecord};
use sscdl_core::train::{self, Audit, EpochLoss, LossTerm, PretrainObjective, TrainConfig};
use sscdl_core::{Error, ErrorKind, Result};

use crate::config::RunConfig;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Paths inside `runs/<fingerprint>/`.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }
    pub fn reports(&self) -> PathBuf {
        self.dir.join("reports")
    }
    pub fn folds(&self) -> PathBuf {
        self.dir.join("folds")
    }
}

/// One `(variant, label ratio, fold)` cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Job {
    pub variant: Variant,
    pub ratio: f64,
    pub fold: usize,
}

impl Job {
    pub fn stem(&self) -> String {
        format!("{}-{}-{}", self.variant.name(), self.ratio, self.fold)
    }

    fn encode(&self) -> String {
        format!("{}@{}@{}", self.variant.name(), self.ratio, self.fold)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split('@').collect();
        let bad = || Error::Config(format!("malformed job {text:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        Ok(Self {
            variant: parts[0].parse()?,
            ratio: parts[1].parse().map_err(|_| bad())?,
            fold: parts[2].parse().map_err(|_| bad())?,
        })
    }

    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        text.split(',').filter(|s| !s.is_empty()).map(Self::parse).collect()
    }
}

pub fn jobs(cfg: &RunConfig) -> Vec<Job> {
    let spec = &cfg.experiment;
    let mut out = Vec::new();
    for &variant in &spec.variants {
        for &ratio in &spec.label_ratios {
            for fold in spec.fold_ids() {
                out.push(Job { variant, ratio, fold });
            }
        }
    }
    out
}

/// Everything recorded about one finished fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldArtifact {
    pub run: FoldRun,
    pub train_config: TrainConfig,
    pub split_plan: SplitPlan,
    pub loss_history: Vec<EpochLoss>,
    pub audit: Audit,
    pub checkpoints: Vec<String>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let (manifest, graphs) = load_tudataset_with(&cfg.dataset_dir(), &cfg.experiment.dataset, &cfg.data.load)?;
    Ok(Dataset { manifest, graphs })
}

pub fn dataset_fingerprint(ds: &Dataset) -> Result<String> {
    let view: Vec<_> = ds
        .graphs
        .iter()
        .map(|g| (g.graph_id(), g.label(), g.edges(), g.features().iter().copied().collect::<Vec<f64>>()))
        .collect();
    report::fingerprint(&view)
}

/// Creates the run directory and writes the merged configuration.
pub fn prepare(cfg: &RunConfig) -> Result<RunLayout> {
    cfg.validate()?;
    let layout = RunLayout { dir: cfg.run_dir()? };
    for d in [layout.checkpoints(), layout.reports(), layout.folds()] {
        fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
    }
    write(&layout.config(), cfg.to_toml()?)?;
    Ok(layout)
}

fn checkpoint_name(job: &Job, stage: &str) -> String {
    format!("{}.{stage}.ckpt", job.stem())
}

/// Runs `jobs` in this process, writing fold artifacts and checkpoints.
/// Returns the failures.
pub fn execute_jobs(cfg: &RunConfig, ds: &Dataset, jobs: &[Job], layout: &RunLayout) -> Result<Vec<FoldFailure>> {
    let fingerprint = cfg.fingerprint()?;
    let ctx = RunContext {
        dataset: ds,
        model: &cfg.model,
        train: &cfg.train,
        spec: &cfg.experiment,
    };
    let mut failures = Vec::new();
    for job in jobs {
        let stem = job.stem();
        let done = layout.folds().join(format!("{stem}.json"));
        let failed = layout.folds().join(format!("{stem}.error.json"));
        let _ = fs::remove_file(&done);
        let _ = fs::remove_file(&failed);
        let result = run_fold(&ctx, job.variant, job.ratio, job.fold).and_then(|out| {
            let mut checkpoints = Vec::new();
            if let Some(p) = &out.pretrained_params {
                let name = checkpoint_name(job, "pretrain");
                checkpoint::save(&layout.checkpoints().join(&name), p, &fingerprint)?;
                checkpoints.push(name);
            }
            let name = checkpoint_name(job, "finetune");
            checkpoint::save(&layout.checkpoints().join(&name), &out.state.params, &fingerprint)?;
            checkpoints.push(name);
            let artifact = FoldArtifact {
                run: out.run,
                train_config: out.train_config,
                split_plan: out.plan,
                loss_history: out.state.loss_history,
                audit: out.state.audit,
                checkpoints,
            };
            write(&done, report::to_json(&artifact)?)
        });
        if let Err(e) = result {
            log::error!("{stem} failed: {e}");
            let failure = FoldFailure {
                variant: job.variant,
                label_ratio: job.ratio,
                fold: job.fold,
                kind: e.kind(),
                error: e.to_string(),
            };
            write(&failed, report::to_json(&failure)?)?;
            failures.push(failure);
        }
    }
    Ok(failures)
}

/// Splits `jobs` round-robin over `workers` child processes of this
/// executable and waits for all of them.
fn execute_parallel(layout: &RunLayout, jobs: &[Job], workers: usize) -> Result<()> {
    let exe = std::env::current_exe().map_err(|e| Error::Config(format!("cannot locate executable: {e}")))?;
    let mut groups: Vec<Vec<String>> = vec![Vec::new(); workers.min(jobs.len()).max(1)];
    let n_groups = groups.len();
    for (i, job) in jobs.iter().enumerate() {
        groups[i % n_groups].push(job.encode());
    }
    let mut children = Vec::new();
    for group in groups {
        let child = Command::new(&exe)
            .arg("run")
            .arg("--config")
            .arg(layout.config())
            .arg("--jobs")
            .arg(group.join(","))
            .spawn()
            .map_err(|e| Error::Config(format!("cannot spawn worker: {e}")))?;
        children.push(child);
    }
    for mut child in children {
        let status = child.wait().map_err(|e| Error::Config(format!("worker wait failed: {e}")))?;
        if !status.success() {
            log::warn!("worker exited with {status}");
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub variant: Variant,
    pub pretrain: bool,
    pub pretrain_objective: Option<PretrainObjective>,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub loss_mask: Vec<LossTerm>,
}

impl StagePlan {
    fn new(variant: Variant, base: &TrainConfig) -> Self {
        let cfg = variant.train_config(base);
        let pretrain = cfg.epochs_pretrain > 0;
        Self {
            variant,
            pretrain,
            pretrain_objective: pretrain.then_some(cfg.pretrain_objective),
            epochs_pretrain: cfg.epochs_pretrain,
            epochs_finetune: cfg.epochs_finetune,
            loss_mask: cfg.loss_mask.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEntry {
    pub job: String,
    pub pretrained: bool,
    pub accuracy: f64,
    pub checkpoints: Vec<String>,
}

/// Replay record of a run. Free of timings, so identical configurations
/// give identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fingerprint: String,
    pub tool_version: String,
    pub dataset: DatasetManifest,
    pub dataset_fingerprint: String,
    pub config: RunConfig,
    pub weak_ratio: f64,
    pub strong_ratio: f64,
    pub stage_plans: Vec<StagePlan>,
    pub folds: Vec<FoldEntry>,
    pub failures: Vec<FoldFailure>,
    pub report_checksums: BTreeMap<String, String>,
}

pub const CSV_REPORT: &str = "folds.csv";
pub const TABLE_REPORT: &str = "table.txt";
pub const SUMMARY_REPORT: &str = "summary.json";

/// Collects fold artifacts of `jobs`, writes reports and the manifest.
pub fn finalize(cfg: &RunConfig, ds: &Dataset, jobs: &[Job], layout: &RunLayout) -> Result<ExperimentOutcome> {
    let fingerprint = cfg.fingerprint()?;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut entries = Vec::new();
    for job in jobs {
        let stem = job.stem();
        let done = layout.folds().join(format!("{stem}.json"));
        let failed = layout.folds().join(format!("{stem}.error.json"));
        if done.is_file() {
            let artifact: FoldArtifact = report::from_json(&read(&done)?)?;
            entries.push(FoldEntry {
                job: stem,
                pretrained: artifact.run.pretrained,
                accuracy: artifact.run.accuracy,
                checkpoints: artifact.checkpoints,
            });
            runs.push(artifact.run);
        } else if failed.is_file() {
            failures.push(report::from_json(&read(&failed)?)?);
        } else {
            failures.push(FoldFailure {
                variant: job.variant,
                label_ratio: job.ratio,
                fold: job.fold,
                kind: ErrorKind::Data,
                error: "no result was produced".into(),
            });
        }
    }
    let outcome = ExperimentOutcome {
        reports: aggregate(&runs)?,
        runs,
        failures,
    };

    let records: Vec<FoldRecord> = outcome.runs.iter().map(|r| FoldRecord::from_run(r, &fingerprint)).collect();
    let csv = report::to_csv(&records)?;
    let table = report::render_table(&outcome.reports);
    write(&layout.reports().join(CSV_REPORT), &csv)?;
    write(&layout.reports().join(TABLE_REPORT), &table)?;
    write(&layout.reports().join(SUMMARY_REPORT), report::to_json(&outcome)?)?;

    let mut checksums = BTreeMap::new();
    checksums.insert(CSV_REPORT.to_string(), report::fingerprint(&csv)?);
    checksums.insert(TABLE_REPORT.to_string(), report::fingerprint(&table)?);
    let manifest = Manifest {
        fingerprint,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        dataset: ds.manifest.clone(),
        dataset_fingerprint: dataset_fingerprint(ds)?,
        config: cfg.clone(),
        weak_ratio: cfg.train.augment.weak_ratio,
        strong_ratio: cfg.train.augment.strong_ratio(),
        stage_plans: cfg.experiment.variants.iter().map(|&v| StagePlan::new(v, &cfg.train)).collect(),
        folds: entries,
        failures: outcome.failures.clone(),
        report_checksums: checksums,
    };
    write(&layout.manifest(), report::to_json(&manifest)?)?;
    Ok(outcome)
}

#[derive(Debug)]
pub struct RunSummary {
    pub layout: RunLayout,
    pub outcome: ExperimentOutcome,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        self.outcome.failures.first().map_or(0, |f| f.kind.exit_code())
    }
}

/// Full experiment: prepare the run directory, run every job (in worker
/// processes when `parallel > 1`) and finalize reports.
pub fn run(cfg: &RunConfig, parallel: usize) -> Result<RunSummary> {
    let layout = prepare(cfg)?;
    let ds = load_dataset(cfg)?;
    let all = jobs(cfg);
    if parallel > 1 {
        for job in &all {
            for suffix in ["json", "error.json"] {
                let _ = fs::remove_file(layout.folds().join(format!("{}.{suffix}", job.stem())));
            }
        }
        execute_parallel(&layout, &all, parallel)?;
    } else {
        execute_jobs(cfg, &ds, &all, &layout)?;
    }
    let outcome = finalize(cfg, &ds, &all, &layout)?;
    Ok(RunSummary { layout, outcome })
}

/// Worker entry: runs the listed jobs of an already prepared run.
pub fn run_worker(cfg: &RunConfig, jobs: &[Job]) -> Result<i32> {
    cfg.validate()?;
    let layout = RunLayout { dir: cfg.run_dir()? };
    let ds = load_dataset(cfg)?;
    let failures = execute_jobs(cfg, &ds, jobs, &layout)?;
    Ok(failures.first().map_or(0, |f| f.kind.exit_code()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReEvaluation {
    pub job: String,
    pub recorded: f64,
    pub recomputed: f64,
}

/// Reloads final checkpoints of a finished run and recomputes test-fold
/// accuracy from scratch.
pub fn evaluate(run_dir: &Path) -> Result<Vec<ReEvaluation>> {
    let layout = RunLayout {
        dir: run_dir.to_path_buf(),
    };
    let cfg = RunConfig::load(&layout.config())?;
    let fingerprint = cfg.fingerprint()?;
    let manifest: Manifest = report::from_json(&read(&layout.manifest())?)?;
    if manifest.fingerprint != fingerprint {
        return Err(Error::Integrity("config fingerprint differs from the manifest".into()));
    }
    let ds = load_dataset(&cfg)?;
    if dataset_fingerprint(&ds)? != manifest.dataset_fingerprint {
        return Err(Error::Integrity("dataset differs from the one the run used".into()));
    }
    let labels = ds.labels()?;
    let mut out = Vec::new();
    for entry in &manifest.folds {
        let artifact: FoldArtifact = report::from_json(&read(&layout.folds().join(format!("{}.json", entry.job)))?)?;
        let r = &artifact.run;
        let plan = make_split_plan(&ds.manifest, &labels, r.fold, cfg.experiment.fold_count, r.label_ratio, cfg.experiment.base_seed)?;
        if plan != artifact.split_plan {
            return Err(Error::Integrity(format!("{}: split plan does not replay", entry.job)));
        }
        let mut params = ModelParams::init(&cfg.model, ds.manifest.feature_dim, ds.manifest.n_classes, 0)?;
        let ckpt = entry
            .checkpoints
            .iter()
            .find(|c| c.ends_with(".finetune.ckpt"))
            .ok_or_else(|| Error::Checkpoint(format!("{}: no final checkpoint", entry.job)))?;
        checkpoint::load(&layout.checkpoints().join(ckpt), &mut params, &fingerprint)?;
        let test: Vec<_> = plan.test_indices().iter().map(|&i| ds.graphs[i].clone()).collect();
        let recomputed = train::accuracy(&train::predict(&params, &test)?, &test);
        out.push(ReEvaluation {
            job: entry.job.clone(),
            recorded: r.accuracy,
            recomputed,
        });
    }
    Ok(out)
}

pub fn load_outcome(run_dir: &Path) -> Result<ExperimentOutcome> {
    report::from_json(&read(&run_dir.join("reports").join(SUMMARY_REPORT))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub weak_ratio: f64,
    pub strong_ratio: f64,
    pub alpha: f64,
    pub beta: f64,
    pub run_dir: PathBuf,
    pub reports: Vec<FoldReport>,
    pub failures: usize,
}

fn sweep_row(cfg: &RunConfig, summary: &RunSummary) -> SweepRow {
    SweepRow {
        weak_ratio: cfg.train.augment.weak_ratio,
        strong_ratio: cfg.train.augment.strong_ratio(),
        alpha: cfg.train.weights.alpha,
        beta: cfg.train.weights.beta,
        run_dir: summary.layout.dir.clone(),
        reports: summary.outcome.reports.clone(),
        failures: summary.outcome.failures.len(),
    }
}

fn sweep_dir(base: &RunConfig, kind: &str, values: &[f64]) -> Result<PathBuf> {
    let fp = report::fingerprint(&(base.fingerprint()?, kind, values))?;
    Ok(base.output.dir.join("sweeps").join(format!("{kind}-{}", &fp[..16])))
}

fn cell(r: &FoldReport) -> String {
    report::format_mean_std(r.mean, r.std)
}

/// One run per weak masking ratio.
pub fn sweep_masking(base: &RunConfig, ratios: &[f64], parallel: usize) -> Result<(PathBuf, Vec<SweepRow>)> {
    let mut rows = Vec::new();
    for &r in ratios {
        let mut cfg = base.clone();
        cfg.train.augment.weak_ratio = r;
        let summary = run(&cfg, parallel)?;
        rows.push(sweep_row(&cfg, &summary));
    }
    let mut text = String::from("weak  strong  variant  label_ratio  accuracy\n");
    for row in &rows {
        for r in &row.reports {
            writeln!(text, "{}  {}  {}  {}  {}", row.weak_ratio, row.strong_ratio, r.variant, r.label_ratio, cell(r)).unwrap();
        }
    }
    let dir = sweep_dir(base, "mask", ratios)?;
    write(&dir.join("summary.json"), report::to_json(&rows)?)?;
    write(&dir.join("table.txt"), &text)?;
    Ok((dir, rows))
}

/// One run per `(α, β)` in `grid × grid`; text output is one α-by-β
/// matrix per variant and label ratio.
pub fn sweep_alpha_beta(base: &RunConfig, grid: &[f64], parallel: usize) -> Result<(PathBuf, Vec<SweepRow>)> {
    let mut rows = Vec::new();
    for &alpha in grid {
        for &beta in grid {
            let mut cfg = base.clone();
            cfg.train.weights.alpha = alpha;
            cfg.train.weights.beta = beta;
            let summary = run(&cfg, parallel)?;
            rows.push(sweep_row(&cfg, &summary));
        }
    }
    let mut text = String::new();
    for &variant in &base.experiment.variants {
        for &ratio in &base.experiment.label_ratios {
            writeln!(text, "{variant} label_ratio {ratio} (rows alpha, columns beta)").unwrap();
            let header: Vec<String> = grid.iter().map(|b| b.to_string()).collect();
            writeln!(text, "alpha\\beta  {}", header.join("  ")).unwrap();
            for &alpha in grid {
                let cells: Vec<String> = grid
                    .iter()
                    .map(|&beta| {
                        rows.iter()
                            .find(|row| row.alpha == alpha && row.beta == beta)
                            .and_then(|row| row.reports.iter().find(|r| r.variant == variant && r.label_ratio == ratio))
                            .map_or_else(|| "-".into(), cell)
                    })
                    .collect();
                writeln!(text, "{alpha}  {}", cells.join("  ")).unwrap();
            }
            text.push('\n');
        }
    }
    let dir = sweep_dir(base, "alpha-beta", grid)?;
    write(&dir.join("summary.json"), report::to_json(&rows)?)?;
    write(&dir.join("table.txt"), &text)?;
    Ok((dir, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_encoding_round_trips() {
        let j = Job {
            variant: Variant::SscdlFt,
            ratio: 0.35,
            fold: 7,
        };
        assert_eq!(Job::parse(&j.encode()).unwrap(), j);
        assert_eq!(Job::parse_list(&format!("{},{}", j.encode(), j.encode())).unwrap(), vec![j, j]);
        assert!(Job::parse("SSCDL@x@1").is_err());
        assert_eq!(j.stem(), "SSCDL_ft-0.35-7");
    }

    #[test]
    fn jobs_follow_spec_order() {
        let mut cfg = RunConfig::default();
        cfg.experiment.variants = vec![Variant::Sscdl, Variant::SscdlCl];
        cfg.experiment.label_ratios = vec![0.3, 0.5];
        cfg.experiment.folds = vec![1, 2];
        let js = jobs(&cfg);
        assert_eq!(js.len(), 8);
        assert_eq!(js[0].stem(), "SSCDL-0.3-1");
        assert_eq!(js[7].stem(), "SSCDL_cl-0.5-2");
    }
}
