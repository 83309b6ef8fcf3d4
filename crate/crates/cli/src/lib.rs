//! Commands behind the `fedsurg` binary: single runs, suites and ablations.

pub mod output;
pub mod suite_file;

use std::fs;
use std::path::{Path, PathBuf};

use fedsurg_core::simulator::{run, RunOptions};
use fedsurg_core::suite::{run_ablation, run_suite, AblationKind, SuiteMember, SuiteTable};
use fedsurg_core::{Error, ExperimentConfig, Method};
use thiserror::Error as ThisError;

pub use output::{manifest_hash, RunManifest, RunResult, CODE_VERSION};
pub use suite_file::SuiteFile;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{failed} of {total} suite members failed")]
    MembersFailed { failed: usize, total: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for invalid configuration, 1 for anything that failed at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Config(_)) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Command-line settings shared by every command.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overrides {
    /// Replaces scenario and training seeds.
    pub seed: Option<u64>,
    pub parallel_clients: usize,
}

impl Overrides {
    fn options(&self) -> RunOptions {
        RunOptions {
            parallel_clients: self.parallel_clients,
        }
    }

    fn apply(&self, config: ExperimentConfig) -> ExperimentConfig {
        match self.seed {
            Some(s) => config.with_seed(s),
            None => config,
        }
    }
}

/// Summary of a finished single run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub mean_auroc: Option<f64>,
    pub best_round: usize,
}

/// Runs one experiment and writes `rounds.csv`, `result.json` and
/// checkpoints into `out_dir`.
pub fn cmd_run(config_path: &Path, out_dir: &Path, overrides: &Overrides) -> Result<RunSummary, CliError> {
    let config = overrides.apply(ExperimentConfig::from_path(config_path)?);
    let outcome = run(&config, overrides.options())?;
    let manifest = output::write_run(out_dir, &outcome)?;
    Ok(RunSummary {
        manifest,
        mean_auroc: outcome.evaluation.global.as_ref().and_then(|g| g.mean_auroc),
        best_round: outcome.evaluation.best_round,
    })
}

fn hashes(members: &[SuiteMember]) -> Result<Vec<String>, CliError> {
    members.iter().map(|m| manifest_hash(&m.config)).collect()
}

fn finish_table(table: &SuiteTable) -> Result<(), CliError> {
    let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        return Err(CliError::MembersFailed {
            failed,
            total: table.rows.len(),
        });
    }
    Ok(())
}

/// Runs a suite file and writes `comparison.csv` and `suite.json`.
///
/// Every member runs even if another fails; any failure gives exit 1.
pub fn cmd_suite(suite_path: &Path, out_dir: &Path, overrides: &Overrides) -> Result<SuiteTable, CliError> {
    let suite = SuiteFile::from_path(suite_path)?;
    let members: Vec<SuiteMember> = suite
        .members
        .into_iter()
        .map(|m| SuiteMember {
            name: m.name,
            config: overrides.apply(m.config),
        })
        .collect();
    let table = run_suite(&members, &suite.comparison, overrides.options())?;
    fs::create_dir_all(out_dir)?;
    output::write_comparison_csv(&out_dir.join("comparison.csv"), &table, &hashes(&members)?)?;
    fs::write(out_dir.join("suite.json"), serde_json::to_string_pretty(&table)?)?;
    finish_table(&table)?;
    Ok(table)
}

/// Settings of an ablation run.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationArgs {
    pub kind: AblationKind,
    pub repeats: usize,
    /// Hyperparameters; the scenario and method are replaced per rung.
    pub template: Option<PathBuf>,
    pub total_epochs: Option<usize>,
    pub lr: Option<f64>,
}

/// Walks an ablation ladder, writing one comparison CSV per rung and
/// `summary.csv`.
pub fn cmd_ablation(args: &AblationArgs, out_dir: &Path, overrides: &Overrides) -> Result<Vec<fedsurg_core::suite::AblationRung>, CliError> {
    if args.repeats == 0 {
        return Err(CliError::Usage("--repeats must be >= 1".into()));
    }
    let mut template = match &args.template {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::new(Method::Surgical, args.kind.scenarios(0).remove(0)),
    };
    if let Some(t) = args.total_epochs {
        template.total_epochs = t;
    }
    if let Some(lr) = args.lr {
        template.lr = lr;
        template.warmup_lr = lr;
    }
    template.validate()?;
    let seed = overrides.seed.unwrap_or(template.scenario.seed);
    let rungs = run_ablation(args.kind, &template, seed, args.repeats, overrides.options())?;
    fs::create_dir_all(out_dir)?;
    let mut all_hashes = Vec::new();
    for rung in &rungs {
        let h = hashes(&rung.members)?;
        let path = out_dir.join(format!("rung_{}_{}.csv", args.kind.name(), rung.x));
        output::write_comparison_csv(&path, &rung.table, &h)?;
        all_hashes.push(h);
    }
    output::write_ablation_summary(&out_dir.join("summary.csv"), args.kind.name(), &rungs, &all_hashes)?;
    for rung in &rungs {
        finish_table(&rung.table)?;
    }
    Ok(rungs)
}
