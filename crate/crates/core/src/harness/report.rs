use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::WrapperKind;
use super::plot;
use crate::data::DatasetId;
use crate::error::{Error, Result};
use crate::metrics::BinaryMetrics;
use crate::model::{ArchId, EpochRecord};
use crate::util;
use crate::watermarking::TriggerType;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub test_accuracy: f64,
    pub watermark_accuracy: f64,
    pub verification_bit: u8,
}

/// Outcome of one experiment. Top-level accuracies describe the wrapped model
/// (the marked model itself when the wrapper kind is `none`); `baseline` is
/// always the unwrapped marked model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub task: DatasetId,
    pub trigger_type: TriggerType,
    pub wrapper: WrapperKind,
    pub wrapper_arch: Option<ArchId>,
    pub threshold: f64,
    pub test_accuracy: f64,
    pub watermark_accuracy: f64,
    pub verification_bit: u8,
    pub baseline: ModelEval,
    pub detector: Option<BinaryMetrics>,
    pub purifier_mse: Option<f64>,
    pub raw_perturbation_mse: Option<f64>,
    pub cv_accuracy: Option<f64>,
    pub cv_std: Option<f64>,
    pub pca_components: Option<usize>,
    pub config_hash: String,
    /// Stage name → cache key.
    pub stage_hashes: BTreeMap<String, String>,
    /// Artifact name → content hash.
    pub checkpoint_hashes: BTreeMap<String, String>,
    /// Training histories by model role.
    pub histories: BTreeMap<String, Vec<EpochRecord>>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        for (what, v) in [
            ("test_accuracy", self.test_accuracy),
            ("watermark_accuracy", self.watermark_accuracy),
            ("baseline.test_accuracy", self.baseline.test_accuracy),
            (
                "baseline.watermark_accuracy",
                self.baseline.watermark_accuracy,
            ),
        ] {
            if !in_unit(v) {
                return Err(Error::Validation(format!("{what} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn row_label(&self) -> String {
        match (self.wrapper, self.wrapper_arch) {
            (WrapperKind::None, _) => format!("{} (watermarked)", self.name),
            (w, Some(a)) => format!("{} ({} wrapper, {})", self.name, w.as_str(), a),
            (w, None) => format!("{} ({} wrapper)", self.name, w.as_str()),
        }
    }
}

/// Flat CSV record; every scalar report field at full precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub task: DatasetId,
    pub trigger_type: TriggerType,
    pub wrapper: WrapperKind,
    pub wrapper_arch: Option<ArchId>,
    pub threshold: f64,
    pub test_accuracy: f64,
    pub watermark_accuracy: f64,
    pub verification_bit: u8,
    pub baseline_test_accuracy: f64,
    pub baseline_watermark_accuracy: f64,
    pub baseline_verification_bit: u8,
    pub detector_precision: Option<f64>,
    pub detector_recall: Option<f64>,
    pub detector_f1: Option<f64>,
    pub purifier_mse: Option<f64>,
    pub raw_perturbation_mse: Option<f64>,
    pub cv_accuracy: Option<f64>,
    pub cv_std: Option<f64>,
    pub pca_components: Option<usize>,
    pub config_hash: String,
    /// `stage=key` pairs joined by `;`.
    pub stage_hashes: String,
    pub checkpoint_hashes: String,
}

fn join_map(m: &BTreeMap<String, String>) -> String {
    m.iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn split_map(s: &str) -> Result<BTreeMap<String, String>> {
    if s.is_empty() {
        return Ok(BTreeMap::new());
    }
    s.split(';')
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Validation(format!("malformed hash entry `{kv}`")))
        })
        .collect()
}

impl From<&EvalReport> for ReportRow {
    fn from(r: &EvalReport) -> Self {
        ReportRow {
            name: r.name.clone(),
            task: r.task,
            trigger_type: r.trigger_type,
            wrapper: r.wrapper,
            wrapper_arch: r.wrapper_arch,
            threshold: r.threshold,
            test_accuracy: r.test_accuracy,
            watermark_accuracy: r.watermark_accuracy,
            verification_bit: r.verification_bit,
            baseline_test_accuracy: r.baseline.test_accuracy,
            baseline_watermark_accuracy: r.baseline.watermark_accuracy,
            baseline_verification_bit: r.baseline.verification_bit,
            detector_precision: r.detector.map(|d| d.precision),
            detector_recall: r.detector.map(|d| d.recall),
            detector_f1: r.detector.map(|d| d.f1),
            purifier_mse: r.purifier_mse,
            raw_perturbation_mse: r.raw_perturbation_mse,
            cv_accuracy: r.cv_accuracy,
            cv_std: r.cv_std,
            pca_components: r.pca_components,
            config_hash: r.config_hash.clone(),
            stage_hashes: join_map(&r.stage_hashes),
            checkpoint_hashes: join_map(&r.checkpoint_hashes),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    TableText,
    Csv,
    PlotBundle,
}

fn check_reports(reports: &[EvalReport]) -> Result<()> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Validation("no reports to emit".into()))?;
    if let Some(other) = reports.iter().find(|r| r.task != first.task) {
        return Err(Error::Validation(format!(
            "reports mix task datasets ({} and {}) in one table",
            first.task, other.task
        )));
    }
    reports.iter().try_for_each(EvalReport::validate)
}

/// Two-column (test accuracy, watermark accuracy) table, one row per report,
/// percentages rounded to 2 decimals.
pub fn table_text(reports: &[EvalReport]) -> Result<String> {
    check_reports(reports)?;
    let labels: Vec<String> = reports.iter().map(EvalReport::row_label).collect();
    let w = labels.iter().map(String::len).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "Task: {}", reports[0].task);
    let _ = writeln!(
        out,
        "{:<w$}  {:>17}  {:>22}",
        "Model", "Test Accuracy (%)", "Watermark Accuracy (%)"
    );
    let _ = writeln!(out, "{}", "-".repeat(w + 43));
    for (label, r) in labels.iter().zip(reports) {
        let _ = writeln!(
            out,
            "{:<w$}  {:>17.2}  {:>22.2}",
            label,
            r.test_accuracy * 100.0,
            r.watermark_accuracy * 100.0
        );
    }
    Ok(out)
}

pub fn write_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    check_reports(reports)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(ReportRow::from(r))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(e.to_string()))?;
    util::write_bytes_atomic(path, &bytes)
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Writes `reports` in `format` under `dir`; returns the files written.
pub fn emit_report(
    reports: &[EvalReport],
    format: ReportFormat,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    check_reports(reports)?;
    match format {
        ReportFormat::TableText => {
            let path = dir.join("table.txt");
            util::write_bytes_atomic(&path, table_text(reports)?.as_bytes())?;
            Ok(vec![path])
        }
        ReportFormat::Csv => {
            let path = dir.join("reports.csv");
            write_csv(reports, &path)?;
            Ok(vec![path])
        }
        ReportFormat::PlotBundle => plot::write_plot_bundle(reports, &dir.join("plots")),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sample(name: &str, acc: f64) -> EvalReport {
        EvalReport {
            name: name.into(),
            task: DatasetId::Cifar10,
            trigger_type: TriggerType::Adversarial,
            wrapper: WrapperKind::Adversarial,
            wrapper_arch: Some(ArchId::Resnet18),
            threshold: 0.9,
            test_accuracy: acc,
            watermark_accuracy: 0.12,
            verification_bit: 0,
            baseline: ModelEval {
                test_accuracy: 0.8487,
                watermark_accuracy: 1.0,
                verification_bit: 1,
            },
            detector: Some(BinaryMetrics::from_counts(8, 2, 2, 8)),
            purifier_mse: Some(1.0 / 3.0),
            raw_perturbation_mse: None,
            cv_accuracy: None,
            cv_std: None,
            pca_components: None,
            config_hash: "abc".into(),
            stage_hashes: [
                ("mark".to_string(), "k1".to_string()),
                ("eval".to_string(), "k2".to_string()),
            ]
            .into_iter()
            .collect(),
            checkpoint_hashes: BTreeMap::new(),
            histories: BTreeMap::new(),
        }
    }

    #[test]
    fn three_reports_three_rows() {
        let reports = vec![sample("a", 0.8475), sample("b", 0.1), sample("c", 0.7)];
        let t = table_text(&reports).unwrap();
        assert_eq!(t.lines().count(), 3 + 3);
        assert!(t.contains("84.75"));
        assert!(t.contains("12.00"));
    }

    #[test]
    fn empty_list_rejected() {
        assert!(table_text(&[]).is_err());
    }

    #[test]
    fn mixed_tasks_rejected() {
        let mut b = sample("b", 0.5);
        b.task = DatasetId::Cinic10;
        assert!(matches!(
            table_text(&[sample("a", 0.5), b]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let reports = vec![sample("a", 0.8475), sample("b", 0.123456789012345)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_csv(&reports, &path).unwrap();
        let rows = read_csv(&path).unwrap();
        let want: Vec<ReportRow> = reports.iter().map(ReportRow::from).collect();
        assert_eq!(rows, want);
        assert_eq!(
            split_map(&rows[0].stage_hashes).unwrap(),
            reports[0].stage_hashes
        );
    }
}
