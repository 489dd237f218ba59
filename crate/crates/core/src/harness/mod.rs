//! Experiment configuration, cached stage execution and reporting.

pub mod config;
pub mod pipeline;
mod plot;
pub mod report;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::ExperimentConfig;
pub use pipeline::{
    derive_seed, revalidate, run_experiment, Pipeline, Stage, StageRecord, TOOL_VERSION,
};
pub use plot::write_plot_bundle;
pub use report::{emit_report, EvalReport, ModelEval, ReportFormat, ReportRow};

use crate::error::{Error, Result};
use crate::util;

/// One invocation, complete enough to re-execute it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub subcommand: String,
    pub tool_version: String,
    pub config_hash: Option<String>,
    /// Effective config after overrides.
    pub config: Option<ExperimentConfig>,
    pub overrides: Vec<String>,
    pub force: bool,
    pub stage_key: Option<String>,
    pub report_inputs: Vec<PathBuf>,
    pub report_format: Option<ReportFormat>,
    pub report_out: Option<PathBuf>,
    pub error: Option<String>,
    pub unix_time_ns: u128,
}

impl Provenance {
    pub fn stage(
        cfg: &ExperimentConfig,
        stage: Stage,
        overrides: &[String],
        force: bool,
    ) -> Result<Self> {
        Ok(Provenance {
            subcommand: stage.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config_hash: Some(cfg.config_hash()?),
            config: Some(cfg.clone()),
            overrides: overrides.to_vec(),
            force,
            stage_key: None,
            report_inputs: Vec::new(),
            report_format: None,
            report_out: None,
            error: None,
            unix_time_ns: now_ns(),
        })
    }

    pub fn report(inputs: &[PathBuf], format: ReportFormat, out: &Path) -> Self {
        Provenance {
            subcommand: "report".into(),
            tool_version: TOOL_VERSION.to_string(),
            config_hash: None,
            config: None,
            overrides: Vec::new(),
            force: false,
            stage_key: None,
            report_inputs: inputs.to_vec(),
            report_format: Some(format),
            report_out: Some(out.to_path_buf()),
            error: None,
            unix_time_ns: now_ns(),
        }
    }

    /// Writes the record under `out_dir/provenance/`.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = provenance_dir(out_dir).join(format!(
            "{:020}-{}.json",
            self.unix_time_ns, self.subcommand
        ));
        util::write_json_atomic(&path, self)?;
        Ok(path)
    }
}

fn now_ns() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0)
}

pub fn provenance_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("provenance")
}

/// Loads the reports named by `inputs`: `report.json` files or eval stage directories.
pub fn load_reports(inputs: &[PathBuf]) -> Result<Vec<EvalReport>> {
    inputs
        .iter()
        .map(|p| {
            let file = if p.is_dir() {
                p.join("report.json")
            } else {
                p.clone()
            };
            util::read_json(&file)
        })
        .collect()
}

/// Re-executes every successful invocation recorded in `dir`, oldest first,
/// and checks that each stage resolves to the key it had originally.
pub fn replay(dir: &Path) -> Result<Vec<Provenance>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut done = Vec::new();
    for f in files {
        let rec: Provenance = util::read_json(&f)?;
        if rec.error.is_some() {
            continue;
        }
        if rec.subcommand == "report" {
            let format = rec.report_format.ok_or_else(|| {
                Error::Validation(format!("{}: report record lacks a format", f.display()))
            })?;
            let out = rec.report_out.clone().unwrap_or_else(|| PathBuf::from("."));
            emit_report(&load_reports(&rec.report_inputs)?, format, &out)?;
        } else {
            let stage: Stage = rec.subcommand.parse()?;
            let cfg = rec.config.clone().ok_or_else(|| {
                Error::Validation(format!("{}: stage record lacks its config", f.display()))
            })?;
            let got = Pipeline::new(cfg, false).run_stage(stage, rec.force)?;
            if rec.stage_key.as_deref().is_some_and(|k| k != got.key) {
                return Err(Error::Validation(format!(
                    "{}: replayed {stage} resolved to a different stage key",
                    f.display()
                )));
            }
        }
        done.push(rec);
    }
    Ok(done)
}
