//! Cross-validation driver: variants, folds, label ratios and sweeps.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{make_split_plan, DatasetManifest, SplitPlan};
use crate::error::{Error, ErrorKind, Result};
use crate::graph::Graph;
use crate::losses::LossWeights;
use crate::model::{ModelConfig, ModelParams};
use crate::seed;
use crate::train::{self, Audit, LossTerm, PretrainObjective, TrainConfig, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "SSCDL")]
    Sscdl,
    #[serde(rename = "SSCDL_cl")]
    SscdlCl,
    #[serde(rename = "SSCDL_ft")]
    SscdlFt,
    #[serde(rename = "GCN_supervised")]
    GcnSupervised,
    #[serde(rename = "GraphCL_ntxent")]
    GraphclNtxent,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Sscdl,
        Variant::SscdlCl,
        Variant::SscdlFt,
        Variant::GcnSupervised,
        Variant::GraphclNtxent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sscdl => "SSCDL",
            Variant::SscdlCl => "SSCDL_cl",
            Variant::SscdlFt => "SSCDL_ft",
            Variant::GcnSupervised => "GCN_supervised",
            Variant::GraphclNtxent => "GraphCL_ntxent",
        }
    }

    /// Whether the variant has a self-supervised stage.
    pub fn pretrains(self) -> bool {
        matches!(self, Variant::Sscdl | Variant::GraphclNtxent)
    }

    /// The concrete training configuration of this variant derived from
    /// `base`. `SSCDL` keeps `base.loss_mask`, so other readings of the
    /// ablations stay runnable through the mask.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let mask = |terms: &[LossTerm]| terms.iter().copied().collect();
        let mut cfg = base.clone();
        match self {
            Variant::Sscdl => {
                cfg.pretrain_objective = PretrainObjective::Similarity;
            }
            Variant::SscdlCl | Variant::GcnSupervised => {
                cfg.epochs_pretrain = 0;
                cfg.loss_mask = mask(&[LossTerm::Classification]);
            }
            Variant::SscdlFt => {
                cfg.epochs_pretrain = 0;
                cfg.loss_mask = mask(&[LossTerm::Classification, LossTerm::Similarity]);
            }
            Variant::GraphclNtxent => {
                cfg.pretrain_objective = PretrainObjective::NtXent;
                cfg.loss_mask = mask(&[LossTerm::Classification]);
            }
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: String,
    pub label_ratios: Vec<f64>,
    pub fold_count: usize,
    /// Subset of folds to run; empty runs all of them.
    pub folds: Vec<usize>,
    pub variants: Vec<Variant>,
    pub base_seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            dataset: "MUTAG".into(),
            label_ratios: vec![0.3],
            fold_count: 10,
            folds: Vec::new(),
            variants: vec![Variant::Sscdl],
            base_seed: 0,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant is required".into()));
        }
        if self.label_ratios.is_empty() {
            return Err(Error::Config("at least one label ratio is required".into()));
        }
        if let Some(r) = self.label_ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::Config(format!("label ratio {r} not in (0, 1]")));
        }
        if self.fold_count < 2 {
            return Err(Error::Config("fold_count must be at least 2".into()));
        }
        if let Some(f) = self.folds.iter().find(|&&f| f >= self.fold_count) {
            return Err(Error::Config(format!("fold {f} not in [0, {})", self.fold_count)));
        }
        Ok(())
    }

    pub fn fold_ids(&self) -> Vec<usize> {
        if self.folds.is_empty() {
            (0..self.fold_count).collect()
        } else {
            self.folds.clone()
        }
    }

    /// Training seed of fold `fold`. Every variant and label ratio of one
    /// fold shares it, so variant comparisons are paired.
    pub fn fold_seed(&self, fold: usize) -> u64 {
        seed::derive(self.base_seed, &[fold as u64])
    }
}

/// A loaded dataset with its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub graphs: Vec<Graph>,
}

impl Dataset {
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.graphs
            .iter()
            .map(|g| {
                g.label()
                    .ok_or_else(|| Error::Integrity(format!("graph {} has no label", g.graph_id())))
            })
            .collect()
    }
}

/// Everything a fold run depends on besides the fold coordinates.
#[derive(Debug, Clone)]
pub struct RunContext<'a> {
    pub dataset: &'a Dataset,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub spec: &'a ExperimentSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRun {
    pub dataset: String,
    pub variant: Variant,
    pub label_ratio: f64,
    pub fold: usize,
    pub accuracy: f64,
    pub seed: u64,
    pub pretrained: bool,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FoldOutput {
    pub run: FoldRun,
    pub plan: SplitPlan,
    /// Parameters after the self-supervised stage, if it ran.
    pub pretrained_params: Option<ModelParams>,
    pub state: TrainState,
    pub train_config: TrainConfig,
}

fn pick(graphs: &[Graph], idx: &[usize]) -> Vec<Graph> {
    idx.iter().map(|&i| graphs[i].clone()).collect()
}

/// Fails if any graph outside the training partition reached a gradient
/// computation.
pub fn check_isolation(audit: &Audit, plan: &SplitPlan, graphs: &[Graph]) -> Result<()> {
    let position = |id: usize| graphs.iter().position(|g| g.graph_id() == id);
    for &id in audit.pretrain_ids.iter().chain(&audit.finetune_label_ids) {
        match position(id) {
            Some(i) if plan.is_train(i) => {}
            _ => return Err(Error::Integrity(format!("graph {id} outside the training partition was trained on"))),
        }
    }
    for &id in &audit.finetune_label_ids {
        let i = position(id).unwrap();
        if !plan.labeled_mask[i] {
            return Err(Error::Integrity(format!("label of unlabeled graph {id} was read")));
        }
    }
    if let Some(id) = audit.pretrain_ids.iter().find(|&&id| plan.labeled_mask[position(id).unwrap()]) {
        return Err(Error::Integrity(format!("labeled graph {id} used in pretraining")));
    }
    Ok(())
}

/// Trains and evaluates one `(variant, label_ratio, fold)` cell.
pub fn run_fold(ctx: &RunContext<'_>, variant: Variant, label_ratio: f64, fold: usize) -> Result<FoldOutput> {
    let start = Instant::now();
    let ds = ctx.dataset;
    let plan = make_split_plan(
        &ds.manifest,
        &ds.labels()?,
        fold,
        ctx.spec.fold_count,
        label_ratio,
        ctx.spec.base_seed,
    )?;
    let labeled = pick(&ds.graphs, &plan.labeled_indices());
    let unlabeled: Vec<Graph> = pick(&ds.graphs, &plan.unlabeled_train_indices())
        .iter()
        .map(Graph::unlabeled)
        .collect();
    let validation = pick(&ds.graphs, &plan.validation_indices());
    let test = pick(&ds.graphs, &plan.test_indices());

    let seed = ctx.spec.fold_seed(fold);
    let mut cfg = variant.train_config(ctx.train);
    cfg.seed = seed;
    if cfg.epochs_pretrain > 0 && unlabeled.len() < 2 {
        log::warn!(
            "{} fold {fold} ratio {label_ratio}: {} unlabeled graphs, pretraining skipped",
            variant,
            unlabeled.len()
        );
        cfg.epochs_pretrain = 0;
    }
    let pretrained = cfg.epochs_pretrain > 0;

    let state = TrainState::init(ctx.model, ds.manifest.feature_dim, ds.manifest.n_classes, seed)?;
    let state = train::pretrain(&unlabeled, state, &cfg)?;
    let pretrained_params = pretrained.then(|| state.params.clone());
    let state = train::finetune_with_validation(&labeled, &validation, state, &cfg)?;
    check_isolation(&state.audit, &plan, &ds.graphs)?;
    let accuracy = train::accuracy(&train::predict(&state.params, &test)?, &test);
    log::info!("{} {variant} ratio {label_ratio} fold {fold}: accuracy {accuracy:.4}", ds.manifest.name);
    Ok(FoldOutput {
        run: FoldRun {
            dataset: ds.manifest.name.clone(),
            variant,
            label_ratio,
            fold,
            accuracy,
            seed,
            pretrained,
            n_labeled: labeled.len(),
            n_unlabeled: unlabeled.len(),
            n_test: test.len(),
            wall_time_seconds: start.elapsed().as_secs_f64(),
        },
        plan,
        pretrained_params,
        state,
        train_config: cfg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub dataset: String,
    pub variant: Variant,
    pub label_ratio: f64,
    pub folds: Vec<usize>,
    pub per_fold_accuracy: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// `"sample"` (n − 1 denominator).
    pub std_kind: String,
    pub wall_time_seconds: f64,
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

impl FoldReport {
    pub fn from_runs(runs: &[FoldRun]) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::EmptyInput("no fold runs to aggregate".into()))?;
        let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        Ok(Self {
            dataset: first.dataset.clone(),
            variant: first.variant,
            label_ratio: first.label_ratio,
            folds: runs.iter().map(|r| r.fold).collect(),
            mean: mean(&acc),
            std: sample_std(&acc),
            per_fold_accuracy: acc,
            std_kind: "sample".into(),
            wall_time_seconds: runs.iter().map(|r| r.wall_time_seconds).sum(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub variant: Variant,
    pub label_ratio: f64,
    pub fold: usize,
    pub kind: ErrorKind,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub reports: Vec<FoldReport>,
    pub runs: Vec<FoldRun>,
    pub failures: Vec<FoldFailure>,
}

impl ExperimentOutcome {
    pub fn failed(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Groups fold runs by `(variant, label_ratio)` in first-seen order.
pub fn aggregate(runs: &[FoldRun]) -> Result<Vec<FoldReport>> {
    let mut keys: Vec<(Variant, u64)> = Vec::new();
    for r in runs {
        let k = (r.variant, r.label_ratio.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(v, ratio)| {
            let group: Vec<FoldRun> = runs
                .iter()
                .filter(|r| r.variant == v && r.label_ratio.to_bits() == ratio)
                .cloned()
                .collect();
            FoldReport::from_runs(&group)
        })
        .collect()
}

/// Runs every `(variant, label_ratio, fold)` cell. A failing fold is
/// recorded and the remaining folds still run.
pub fn run_experiment(ctx: &RunContext<'_>) -> Result<ExperimentOutcome> {
    run_experiment_with(ctx, |_| {})
}

/// As [`run_experiment`], calling `on_fold` after every finished fold.
pub fn run_experiment_with(ctx: &RunContext<'_>, mut on_fold: impl FnMut(&FoldOutput)) -> Result<ExperimentOutcome> {
    ctx.spec.validate()?;
    ctx.train.validate()?;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for &variant in &ctx.spec.variants {
        for &ratio in &ctx.spec.label_ratios {
            for fold in ctx.spec.fold_ids() {
                match run_fold(ctx, variant, ratio, fold) {
                    Ok(out) => {
                        on_fold(&out);
                        runs.push(out.run);
                    }
                    Err(e) => {
                        log::error!("{variant} ratio {ratio} fold {fold} failed: {e}");
                        failures.push(FoldFailure {
                            variant,
                            label_ratio: ratio,
                            fold,
                            kind: e.kind(),
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
    }
    Ok(ExperimentOutcome {
        reports: aggregate(&runs)?,
        runs,
        failures,
    })
}

pub const MASKING_RATIOS: [f64; 4] = [0.1, 0.2, 0.3, 0.35];
pub const WEIGHT_GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingRow {
    pub weak_ratio: f64,
    pub strong_ratio: f64,
    pub outcome: ExperimentOutcome,
}

/// One experiment per weak masking ratio, strong ratio following the
/// configured multiplier.
pub fn sweep_masking(ctx: &RunContext<'_>, ratios: &[f64]) -> Result<Vec<MaskingRow>> {
    ratios
        .iter()
        .map(|&r| {
            let mut train = ctx.train.clone();
            train.augment.weak_ratio = r;
            train.augment.validate()?;
            let sub = RunContext { train: &train, ..ctx.clone() };
            Ok(MaskingRow {
                weak_ratio: r,
                strong_ratio: train.augment.strong_ratio(),
                outcome: run_experiment(&sub)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub alpha: f64,
    pub beta: f64,
    pub outcome: ExperimentOutcome,
}

/// One experiment per `(α, β)` pair of `grid × grid`, α-major.
pub fn sweep_alpha_beta(ctx: &RunContext<'_>, grid: &[f64]) -> Result<Vec<GridCell>> {
    let mut cells = Vec::with_capacity(grid.len() * grid.len());
    for &alpha in grid {
        for &beta in grid {
            let train = TrainConfig {
                weights: LossWeights { alpha, beta },
                ..ctx.train.clone()
            };
            let sub = RunContext { train: &train, ..ctx.clone() };
            cells.push(GridCell {
                alpha,
                beta,
                outcome: run_experiment(&sub)?,
            });
        }
    }
    Ok(cells)
}

/// Fraction of rows whose arg-max (lowest index on ties) equals the label.
pub fn accuracy(class_probs: &ndarray::Array2<f64>, labels: &[usize]) -> Result<f64> {
    if class_probs.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "accuracy".into(),
            expected: class_probs.nrows(),
            found: labels.len(),
        });
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = train::argmax_rows(class_probs)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
