//! Run artifacts: metrics JSON, per-epoch CSV, relabel audit (JSON lines),
//! test predictions and Kaplan-Meier curve data.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::pipeline::{AuditEntry, EpochLog, PredictionRow, RunMetrics, RunOutcome};
use crate::survstat::{kaplan_meier, logrank_test, GroupSplit, RiskScores, SurvivalRecord};
use crate::{Error, Result};

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::invalid(format!("csv encoding: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv encoding: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

fn json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::invalid(format!("json encoding: {e}")))
}

/// Writes `{folds, mean_cindex, std_cindex, relabel_audit}` as pretty JSON.
pub fn write_metrics(metrics: &RunMetrics, path: &Path) -> Result<()> {
    if metrics.folds.is_empty() {
        return Err(Error::invalid("refusing to write metrics without folds"));
    }
    write_file(path, &(json_string(metrics)? + "\n"))
}

pub fn write_epoch_log(epochs: &[EpochLog], path: &Path) -> Result<()> {
    write_file(path, &csv_string(epochs)?)
}

/// One JSON object per line.
pub fn write_relabel_audit(entries: &[AuditEntry], path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        let line = serde_json::to_string(e).map_err(|e| Error::invalid(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn read_relabel_audit(path: &Path) -> Result<Vec<AuditEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::parse(path, format!("line {}", i + 1), e.to_string()))
        })
        .collect()
}

pub fn write_predictions(rows: &[PredictionRow], path: &Path) -> Result<()> {
    write_file(path, &csv_string(rows)?)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| {
            let row: PredictionRow =
                row.map_err(|e| Error::parse(path, format!("line {}", i + 2), e.to_string()))?;
            if !row.risk.is_finite() || !(row.time > 0.0) {
                return Err(Error::parse(path, format!("line {}", i + 2), "non-finite risk or non-positive time"));
            }
            Ok(row)
        })
        .collect()
}

/// Saves a whole run under `dir`: `config.json`, `epochs.csv`,
/// `metrics.json`, `relabel_audit.jsonl` and `predictions.csv`.
pub fn write_run(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.json"), &(json_string(&outcome.config)? + "\n"))?;
    let epochs: Vec<EpochLog> = outcome.folds.iter().flat_map(|f| f.epochs.clone()).collect();
    write_epoch_log(&epochs, &dir.join("epochs.csv"))?;
    write_metrics(&outcome.metrics, &dir.join("metrics.json"))?;
    let audit: Vec<AuditEntry> = outcome.folds.iter().flat_map(|f| f.audit.clone()).collect();
    write_relabel_audit(&audit, &dir.join("relabel_audit.jsonl"))?;
    let preds: Vec<PredictionRow> = outcome.folds.iter().flat_map(|f| f.predictions.clone()).collect();
    write_predictions(&preds, &dir.join("predictions.csv"))
}

/// Median-risk split of `scores`, then [`write_km_csv`].
pub fn emit_km_csv(records: &[SurvivalRecord], scores: &RiskScores, path: &Path) -> Result<()> {
    if records.len() < 2 {
        return Err(Error::invalid("Kaplan-Meier export needs at least two patients"));
    }
    write_km_csv(records, &GroupSplit::by_median(scores), path)
}

/// Rows `group,time,survival_prob` for the high- and low-risk curves (each
/// starting at time 0 with probability 1), followed by a comment row with the
/// logrank statistic, or `NA` when the test is undefined.
pub fn write_km_csv(records: &[SurvivalRecord], split: &GroupSplit, path: &Path) -> Result<()> {
    let mut out = String::from("group,time,survival_prob\n");
    for (name, ids) in [("high", &split.high_risk), ("low", &split.low_risk)] {
        let group: Vec<SurvivalRecord> = records
            .iter()
            .filter(|r| ids.contains(&r.patient_id))
            .cloned()
            .collect();
        if group.is_empty() {
            continue;
        }
        let _ = writeln!(out, "{name},0,1");
        for p in kaplan_meier(&group)? {
            let _ = writeln!(out, "{name},{},{}", p.time, p.survival);
        }
    }
    match logrank_test(records, split) {
        Ok(r) => {
            let _ = writeln!(out, "# logrank chi2={} p={}", r.chi_square, r.p_value);
        }
        Err(Error::LogrankUndefined(_)) => out.push_str("# logrank chi2=NA p=NA\n"),
        Err(e) => return Err(e),
    }
    write_file(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{FoldMetrics, RelabelAudit};

    fn rec(id: &str, t: f64, e: bool) -> SurvivalRecord {
        SurvivalRecord::new(id, t, e).unwrap()
    }

    #[test]
    fn metrics_json_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = RunMetrics::from_folds(
            vec![
                FoldMetrics { cindex: 0.6, logrank_p: Some(0.01) },
                FoldMetrics { cindex: 0.8, logrank_p: None },
            ],
            RelabelAudit::default(),
        )
        .unwrap();
        write_metrics(&m, &path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["folds"][0]["logrank_p"], 0.01);
        assert!(v["folds"][1]["logrank_p"].is_null());
        assert!((v["mean_cindex"].as_f64().unwrap() - 0.7).abs() < 1e-12);
        assert!((v["std_cindex"].as_f64().unwrap() - 0.1).abs() < 1e-12);
        assert!(v["relabel_audit"].is_object());

        let empty = RunMetrics {
            folds: vec![],
            mean_cindex: 0.0,
            std_cindex: 0.0,
            relabel_audit: RelabelAudit::default(),
        };
        assert!(write_metrics(&empty, &path).is_err());
    }

    #[test]
    fn metrics_io_error_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let m = RunMetrics::from_folds(
            vec![FoldMetrics { cindex: 0.5, logrank_p: None }],
            RelabelAudit::default(),
        )
        .unwrap();
        let err = write_metrics(&m, &blocker.join("m.json")).unwrap_err();
        assert!(err.is_io());
    }

    #[test]
    fn km_single_event_per_group() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("km.csv");
        let records = vec![rec("a", 2.0, true), rec("b", 5.0, true)];
        let scores = RiskScores::from_pairs([("a", 2.0), ("b", 1.0)]).unwrap();
        emit_km_csv(&records, &scores, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let high = text.lines().filter(|l| l.starts_with("high,")).count();
        let low = text.lines().filter(|l| l.starts_with("low,")).count();
        assert_eq!((high, low), (2, 2));
        assert!(text.lines().last().unwrap().starts_with("# logrank chi2="));
    }

    #[test]
    fn km_mirrored_groups_have_unit_p() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("km.csv");
        let records = vec![
            rec("h1", 1.0, true),
            rec("h2", 3.0, false),
            rec("l1", 1.0, true),
            rec("l2", 3.0, false),
        ];
        let split = GroupSplit {
            high_risk: ["h1", "h2"].map(String::from).into(),
            low_risk: ["l1", "l2"].map(String::from).into(),
        };
        write_km_csv(&records, &split, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let high: Vec<&str> = text.lines().filter_map(|l| l.strip_prefix("high,")).collect();
        let low: Vec<&str> = text.lines().filter_map(|l| l.strip_prefix("low,")).collect();
        assert_eq!(high, low);
        assert!(text.ends_with("p=1\n"));
    }

    #[test]
    fn km_undefined_logrank_writes_na() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("km.csv");
        let records = vec![rec("a", 2.0, true), rec("b", 5.0, true)];
        let split = GroupSplit {
            high_risk: ["a", "b"].map(String::from).into(),
            low_risk: Default::default(),
        };
        write_km_csv(&records, &split, &path).unwrap();
        assert!(fs::read_to_string(&path).unwrap().ends_with("p=NA\n"));
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let rows = vec![
            PredictionRow { fold: 0, patient_id: "a".into(), risk: -0.125, time: 3.5, event: true },
            PredictionRow { fold: 1, patient_id: "b".into(), risk: 0.1 + 0.2, time: 1e-3, event: false },
        ];
        write_predictions(&rows, &path).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), rows);
    }
}
