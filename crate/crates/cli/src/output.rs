//! Report writers and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use fedsurg_core::simulator::{RoundReport, RunEvaluation, RunOutcome};
use fedsurg_core::suite::{AblationRung, SuiteTable};
use fedsurg_core::data::ScenarioStats;
use fedsurg_core::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Version string recorded in every manifest.
pub const CODE_VERSION: &str = concat!("fedsurg ", env!("CARGO_PKG_VERSION"));

/// Float cell with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Float cell, or `NA` when undefined.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_f64)
}

/// Short hash identifying a configuration under this code version.
pub fn manifest_hash(config: &ExperimentConfig) -> Result<String, CliError> {
    let mut h = Sha256::new();
    h.update(CODE_VERSION.as_bytes());
    h.update(b"\n");
    h.update(config.to_toml_string()?.as_bytes());
    Ok(hex::encode(h.finalize())[..16].to_string())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub scenario: u64,
    pub init: u64,
    pub shuffle: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputPaths {
    pub rounds_csv: PathBuf,
    pub result_json: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Everything needed to re-run a single experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_hash: String,
    pub code_version: String,
    pub config: ExperimentConfig,
    pub seeds: SeedRecord,
    pub scenario_stats: ScenarioStats,
    pub outputs: OutputPaths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub manifest: RunManifest,
    pub class_names: Vec<String>,
    pub evaluation: RunEvaluation,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    Ok(csv::WriterBuilder::new().from_path(path)?)
}

/// One row per round. Wall time is left out so reruns compare byte for byte.
pub fn write_rounds_csv(
    path: &Path,
    reports: &[RoundReport],
    class_names: &[String],
    clients: usize,
    hash: &str,
) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["manifest_hash".to_string(), "round".to_string()];
    header.extend((0..clients).map(|k| format!("train_loss_{k}")));
    header.extend((0..clients).map(|k| format!("val_loss_{k}")));
    header.push("mean_val_loss".into());
    header.extend(class_names.iter().map(|c| format!("auroc_{c}")));
    header.push("mean_auroc".into());
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![hash.to_string(), r.round.to_string()];
        row.extend(r.train_loss.iter().map(|&v| fmt_f64(v)));
        row.extend(r.val_loss.iter().map(|&v| fmt_f64(v)));
        row.push(fmt_f64(r.mean_val_loss));
        row.extend(r.per_class_auroc.iter().map(|&v| fmt_opt(v)));
        row.push(fmt_opt(r.mean_auroc));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes rounds, result and checkpoints for one run into `dir`.
pub fn write_run(dir: &Path, outcome: &RunOutcome) -> Result<RunManifest, CliError> {
    fs::create_dir_all(dir)?;
    let hash = manifest_hash(&outcome.config)?;
    let class_names = outcome.registry.class_names().to_vec();
    let outputs = OutputPaths {
        rounds_csv: dir.join("rounds.csv"),
        result_json: dir.join("result.json"),
        checkpoints: match &outcome.global {
            Some(_) => vec![dir.join("checkpoint.bin")],
            None => (0..outcome.client_models.len())
                .map(|k| dir.join(format!("checkpoint_client{k}.bin")))
                .collect(),
        },
    };
    write_rounds_csv(
        &outputs.rounds_csv,
        &outcome.reports,
        &class_names,
        outcome.reports.first().map_or(0, |r| r.train_loss.len()),
        &hash,
    )?;
    match &outcome.global {
        Some(g) => fedsurg_core::model::save_checkpoint(&g.params, &outputs.checkpoints[0])?,
        None => {
            for (p, path) in outcome.client_models.iter().zip(&outputs.checkpoints) {
                fedsurg_core::model::save_checkpoint(p, path)?;
            }
        }
    }
    let cfg = &outcome.config;
    let manifest = RunManifest {
        manifest_hash: hash,
        code_version: CODE_VERSION.to_string(),
        config: cfg.clone(),
        seeds: SeedRecord {
            scenario: cfg.scenario.seed,
            init: cfg.seeds.init,
            shuffle: cfg.seeds.shuffle,
        },
        scenario_stats: outcome.scenario_stats.clone(),
        outputs,
    };
    let result = RunResult {
        manifest: manifest.clone(),
        class_names,
        evaluation: outcome.evaluation.clone(),
    };
    fs::write(&manifest.outputs.result_json, serde_json::to_string_pretty(&result)?)?;
    Ok(manifest)
}

/// Comparison table: one row per member, four columns per group.
pub fn write_comparison_csv(path: &Path, table: &SuiteTable, hashes: &[String]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["manifest_hash", "name", "method", "status"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    for g in &table.groups {
        for suffix in ["mean", "sd", "p", "sig"] {
            header.push(format!("{g}_{suffix}"));
        }
    }
    w.write_record(&header)?;
    for (row, hash) in table.rows.iter().zip(hashes) {
        let mut rec = vec![
            hash.clone(),
            row.name.clone(),
            row.method.name().to_string(),
            if row.error.is_some() { "failed" } else { "ok" }.to_string(),
        ];
        if row.error.is_some() {
            rec.extend(std::iter::repeat_n("NA".to_string(), 4 * table.groups.len()));
        } else {
            for cell in &row.cells {
                rec.push(fmt_opt(cell.mean));
                rec.push(fmt_opt(cell.sd));
                rec.push(if cell.is_reference {
                    "ref".to_string()
                } else {
                    fmt_opt(cell.test.map(|t| t.p))
                });
                rec.push(cell.significance().to_string());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Summary curve: one row per (rung, method) with the overall mean AUROC.
pub fn write_ablation_summary(path: &Path, kind: &str, rungs: &[AblationRung], hashes: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["manifest_hash", "kind", "x", "method", "status", "mean_auroc", "sd", "p", "sig"])?;
    for (rung, rung_hashes) in rungs.iter().zip(hashes) {
        for (row, hash) in rung.table.rows.iter().zip(rung_hashes) {
            let all = row.cells.iter().find(|c| c.group == "all");
            w.write_record([
                hash.clone(),
                kind.to_string(),
                rung.x.to_string(),
                row.method.name().to_string(),
                if row.error.is_some() { "failed" } else { "ok" }.to_string(),
                fmt_opt(all.and_then(|c| c.mean)),
                fmt_opt(all.and_then(|c| c.sd)),
                match all {
                    Some(c) if c.is_reference => "ref".to_string(),
                    Some(c) => fmt_opt(c.test.map(|t| t.p)),
                    None => "NA".to_string(),
                },
                all.map_or("NA", |c| c.significance()).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_cells() {
        assert_eq!(fmt_f64(0.5), "5.0000000000000000e-1");
        assert_eq!(fmt_f64(0.1).parse::<f64>().unwrap(), 0.1);
        assert_eq!(fmt_opt(None), "NA");
    }

    #[test]
    fn hash_tracks_config() {
        let spec = fedsurg_core::data::ScenarioSpec::generated(2, 1, 0, 2, 0);
        let a = ExperimentConfig::new(fedsurg_core::Method::Surgical, spec);
        let mut b = a.clone();
        assert_eq!(manifest_hash(&a).unwrap(), manifest_hash(&b).unwrap());
        b.lr = 0.5;
        assert_ne!(manifest_hash(&a).unwrap(), manifest_hash(&b).unwrap());
        assert_eq!(manifest_hash(&a).unwrap().len(), 16);
    }
}
