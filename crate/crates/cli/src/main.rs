mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sscdl_core::dataset::{load_tudataset_with, LoadOptions};
use sscdl_core::eval::{Variant, MASKING_RATIOS, WEIGHT_GRID};
use sscdl_core::losses::theorem1_check;
use sscdl_core::report::{self, FoldRecord};
use sscdl_core::{Error, Result};

use crate::config::{dataset_dir, RunConfig, DATA_ROOT_ENV};

#[derive(Parser)]
#[command(name = "sscdl", version, about = "Semi-supervised contrastive learning with conditional distributions for graph classification")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args, Clone, Default)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dataset directory root (overrides the environment and the file).
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Dataset name.
    #[arg(long)]
    dataset: Option<String>,
    /// Variants to run, comma separated.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
    /// Labeled ratios, comma separated.
    #[arg(long, value_delimiter = ',')]
    label_ratios: Vec<f64>,
    /// Fold subset, comma separated.
    #[arg(long, value_delimiter = ',')]
    folds: Vec<usize>,
    #[arg(long)]
    fold_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs_pretrain: Option<usize>,
    #[arg(long)]
    epochs_finetune: Option<usize>,
    /// Output directory for run directories.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Number of worker processes sharing the folds.
    #[arg(long, default_value_t = 1)]
    parallel_folds: usize,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(root) = &self.data_root {
            cfg.data.root = root.clone();
        } else if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            cfg.data.root = root.into();
        }
        if let Some(d) = &self.dataset {
            cfg.experiment.dataset = d.clone();
        }
        if !self.variants.is_empty() {
            cfg.experiment.variants = self.variants.clone();
        }
        if !self.label_ratios.is_empty() {
            cfg.experiment.label_ratios = self.label_ratios.clone();
        }
        if !self.folds.is_empty() {
            cfg.experiment.folds = self.folds.clone();
        }
        if let Some(n) = self.fold_count {
            cfg.experiment.fold_count = n;
        }
        if let Some(s) = self.seed {
            cfg.experiment.base_seed = s;
        }
        if let Some(e) = self.epochs_pretrain {
            cfg.train.epochs_pretrain = e;
        }
        if let Some(e) = self.epochs_finetune {
            cfg.train.epochs_finetune = e;
        }
        if let Some(o) = &self.out {
            cfg.output.dir = o.clone();
        }
        if self.parallel_folds == 0 {
            return Err(Error::Config("--parallel-folds must be at least 1".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse and validate a TUDataset directory.
    Ingest {
        /// Directory containing `<NAME>_A.txt` and friends (or their parent).
        path: PathBuf,
        /// Dataset name; defaults to the directory name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Run an experiment.
    Run {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long, hide = true)]
        jobs: Option<String>,
    },
    /// Recompute test accuracy from the saved checkpoints of a run.
    Evaluate { run_dir: PathBuf },
    /// Run once per weak masking ratio.
    SweepMask {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
    },
    /// Run once per (alpha, beta) pair of the grid.
    SweepAb {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Monte-Carlo check of the conditional-contrastive lower bound.
    BoundCheck {
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the reports of a finished run.
    Report {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

fn ingest(path: &Path, name: Option<String>) -> Result<i32> {
    let name = match name {
        Some(n) => n,
        None => path
            .file_name()
            .and_then(|n| n.to_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Config(format!("cannot infer a dataset name from {}", path.display())))?,
    };
    let dir = dataset_dir(path, &name);
    let (m, graphs) = load_tudataset_with(&dir, &name, &LoadOptions::default())?;
    let nodes: usize = graphs.iter().map(|g| g.n_nodes()).sum();
    let edges: usize = graphs.iter().map(|g| g.edges().len()).sum();
    println!("{}: {} graphs, {} classes", m.name, m.n_graphs, m.n_classes);
    println!("nodes {nodes}, undirected edges {edges}, feature dim {}", m.feature_dim);
    let counts: Vec<String> = m
        .class_labels
        .iter()
        .zip(&m.class_counts)
        .map(|(l, c)| format!("{l}: {c}"))
        .collect();
    println!("class counts {{{}}}", counts.join(", "));
    println!("{}", report::to_json(&m)?);
    Ok(0)
}

fn execute(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Ingest { path, name } => ingest(&path, name),
        Cmd::Run { args, jobs: Some(jobs) } => {
            let cfg = args.resolve()?;
            run::run_worker(&cfg, &run::Job::parse_list(&jobs)?)
        }
        Cmd::Run { args, jobs: None } => {
            let cfg = args.resolve()?;
            let summary = run::run(&cfg, args.parallel_folds)?;
            print!("{}", report::render_table(&summary.outcome.reports));
            for f in &summary.outcome.failures {
                eprintln!("failed: {} ratio {} fold {}: {}", f.variant, f.label_ratio, f.fold, f.error);
            }
            println!("run directory {}", summary.layout.dir.display());
            Ok(summary.exit_code())
        }
        Cmd::Evaluate { run_dir } => {
            let mut code = 0;
            for r in run::evaluate(&run_dir)? {
                let ok = (r.recorded - r.recomputed).abs() <= 1e-12;
                println!(
                    "{} recorded {:.6} recomputed {:.6} {}",
                    r.job,
                    r.recorded,
                    r.recomputed,
                    if ok { "ok" } else { "MISMATCH" }
                );
                if !ok {
                    code = Error::Integrity(String::new()).kind().exit_code();
                }
            }
            Ok(code)
        }
        Cmd::SweepMask { args, ratios } => {
            let cfg = args.resolve()?;
            let ratios = if ratios.is_empty() { MASKING_RATIOS.to_vec() } else { ratios };
            let (dir, rows) = run::sweep_masking(&cfg, &ratios, args.parallel_folds)?;
            print!("{}", std::fs::read_to_string(dir.join("table.txt")).unwrap_or_default());
            println!("sweep directory {}", dir.display());
            Ok(if rows.iter().any(|r| r.failures > 0) { 3 } else { 0 })
        }
        Cmd::SweepAb { args, grid } => {
            let cfg = args.resolve()?;
            let grid = if grid.is_empty() { WEIGHT_GRID.to_vec() } else { grid };
            let (dir, rows) = run::sweep_alpha_beta(&cfg, &grid, args.parallel_folds)?;
            print!("{}", std::fs::read_to_string(dir.join("table.txt")).unwrap_or_default());
            println!("sweep directory {}", dir.display());
            Ok(if rows.iter().any(|r| r.failures > 0) { 3 } else { 0 })
        }
        Cmd::BoundCheck { tau, k, trials, seed } => {
            let r = theorem1_check(tau, k, trials, seed)?;
            println!("tau {} K {} trials {} seed {}", r.temperature, r.negatives, r.trials, r.seed);
            println!("threshold e^(1/tau)-1 = {:.6}", r.threshold);
            println!("bound log(K+1)-1/tau = {:.6}", r.bound);
            println!("min margin {:.6e}", r.min_margin);
            println!("scalar-pair value {:.6} ({})", r.scalar_pair_value, if r.scalar_pair_holds { "above bound" } else { "below bound" });
            println!("bound {}", if r.holds { "holds" } else { "VIOLATED" });
            Ok(if r.holds { 0 } else { 3 })
        }
        Cmd::Report { run_dir, format } => {
            let outcome = run::load_outcome(&run_dir)?;
            match format {
                Format::Text => print!("{}", report::render_table(&outcome.reports)),
                Format::Csv => {
                    let cfg = RunConfig::load(&run_dir.join("config.toml"))?;
                    let fp = cfg.fingerprint()?;
                    let records: Vec<FoldRecord> = outcome.runs.iter().map(|r| FoldRecord::from_run(r, &fp)).collect();
                    print!("{}", report::to_csv(&records)?);
                }
                Format::Json => println!("{}", report::to_json(&outcome)?),
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}
