//! On-disk dataset layout:
//!
//! ```text
//! DIR/manifest.json          schema version, availability, relative file paths
//! DIR/labels.csv             patient_id,time_months,event
//! DIR/ground_truth.csv       patient_id,true_time_months   (synthetic only)
//! DIR/payloads/<id>_<kind>.csv
//! ```
//!
//! Pathology payloads hold one patch per row (row-major grid order), genomic
//! payloads five rows, and clinical payloads a single row of level indices.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Cohort, Patient};
use crate::bipartite::Availability;
use crate::modality::{ModalityKind, RawPayload, GENOMIC_NODES};
use crate::survstat::SurvivalRecord;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientFiles {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pathology: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genomic: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clinical: Option<PathBuf>,
}

impl PatientFiles {
    fn path(&self, kind: ModalityKind) -> Option<&PathBuf> {
        match kind {
            ModalityKind::Pathology => self.pathology.as_ref(),
            ModalityKind::Genomic => self.genomic.as_ref(),
            ModalityKind::Clinical => self.clinical.as_ref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub cohort: String,
    pub grid_size: usize,
    pub clinical_cardinalities: Vec<usize>,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    /// Row per patient in `patients` order, columns pathology/genomic/clinical.
    pub availability: Vec<Availability>,
    pub patients: Vec<PatientFiles>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_text(header: Option<&[&str]>, rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::invalid(format!("csv encoding: {e}"));
    if let Some(h) = header {
        w.write_record(h).map_err(to_err)?;
    }
    for r in rows {
        w.write_record(&r).map_err(to_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv encoding: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

fn numbers<T: ToString>(v: &[T]) -> Vec<String> {
    v.iter().map(ToString::to_string).collect()
}

/// Writes `cohort` under `dir` and returns the manifest that was saved.
pub fn save_dataset(cohort: &Cohort, dir: &Path) -> Result<DatasetManifest> {
    cohort.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let labels = PathBuf::from("labels.csv");
    let rows = cohort.patients.iter().map(|p| {
        vec![
            p.id().to_string(),
            p.record.time.to_string(),
            u8::from(p.record.event).to_string(),
        ]
    });
    write_file(
        &dir.join(&labels),
        &csv_text(Some(&["patient_id", "time_months", "event"]), rows)?,
    )?;

    let ground_truth = if cohort.patients.iter().all(|p| p.true_time.is_some()) {
        let path = PathBuf::from("ground_truth.csv");
        let rows = cohort.patients.iter().map(|p| {
            vec![
                p.id().to_string(),
                p.true_time.expect("checked").to_string(),
            ]
        });
        write_file(
            &dir.join(&path),
            &csv_text(Some(&["patient_id", "true_time_months"]), rows)?,
        )?;
        Some(path)
    } else {
        None
    };

    let mut patients = Vec::with_capacity(cohort.len());
    for p in &cohort.patients {
        let mut files = PatientFiles {
            id: p.id().to_string(),
            pathology: None,
            genomic: None,
            clinical: None,
        };
        for (kind, payload) in &p.payloads {
            let rel = PathBuf::from("payloads").join(format!("{}_{}.csv", p.id(), kind.name()));
            let text = match payload {
                RawPayload::Pathology { patches, .. } => {
                    csv_text(None, patches.iter().map(|r| numbers(r)))?
                }
                RawPayload::Genomic { embeddings } => {
                    csv_text(None, embeddings.iter().map(|r| numbers(r)))?
                }
                RawPayload::Clinical { levels, .. } => csv_text(None, [numbers(levels)])?,
            };
            write_file(&dir.join(&rel), &text)?;
            match kind {
                ModalityKind::Pathology => files.pathology = Some(rel),
                ModalityKind::Genomic => files.genomic = Some(rel),
                ModalityKind::Clinical => files.clinical = Some(rel),
            }
        }
        patients.push(files);
    }

    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        cohort: cohort.name.clone(),
        grid_size: cohort.grid_size,
        clinical_cardinalities: cohort.clinical_cardinalities.clone(),
        labels,
        ground_truth,
        availability: cohort.availability(),
        patients,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::invalid(format!("manifest encoding: {e}")))?;
    write_file(&dir.join(MANIFEST), &json)?;
    Ok(manifest)
}

fn read_rows(path: &Path, has_header: bool) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1 + usize::from(has_header);
        let rec = rec.map_err(|e| Error::parse(path, format!("line {line}"), e.to_string()))?;
        out.push(rec.iter().map(str::to_string).collect());
    }
    Ok(out)
}

fn parse_f64(path: &Path, line: usize, field: &str, s: &str) -> Result<f64> {
    let v: f64 = s.parse().map_err(|_| {
        Error::parse(path, format!("line {line}, field {field}"), format!("not a number: {s:?}"))
    })?;
    if !v.is_finite() {
        return Err(Error::parse(path, format!("line {line}, field {field}"), "non-finite value"));
    }
    Ok(v)
}

fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let rows = read_rows(path, false)?;
    let width = rows.first().map_or(0, Vec::len);
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() != width {
                return Err(Error::parse(
                    path,
                    format!("line {}", i + 1),
                    format!("expected {width} columns, got {}", r.len()),
                ));
            }
            r.iter()
                .enumerate()
                .map(|(j, s)| parse_f64(path, i + 1, &format!("column {}", j + 1), s))
                .collect()
        })
        .collect()
}

/// Loads and validates a dataset from a manifest file or its directory.
pub fn load_dataset(path: &Path) -> Result<Cohort> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    };
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| {
        Error::parse(
            &manifest_path,
            format!("line {}, column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::parse(
            &manifest_path,
            "schema_version",
            format!("unsupported version {}", manifest.schema_version),
        ));
    }
    if manifest.availability.len() != manifest.patients.len() {
        return Err(Error::parse(
            &manifest_path,
            "availability",
            format!(
                "{} rows for {} patients",
                manifest.availability.len(),
                manifest.patients.len()
            ),
        ));
    }

    let labels_path = root.join(&manifest.labels);
    let mut labels = BTreeMap::new();
    for (i, row) in read_rows(&labels_path, true)?.iter().enumerate() {
        let line = i + 2;
        if row.len() != 3 {
            return Err(Error::parse(&labels_path, format!("line {line}"), "expected 3 fields"));
        }
        let time = parse_f64(&labels_path, line, "time_months", &row[1])?;
        let event = match row[2].as_str() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(Error::parse(
                    &labels_path,
                    format!("line {line}, field event"),
                    format!("expected 0/1, got {other:?}"),
                ))
            }
        };
        let rec = SurvivalRecord::new(row[0].clone(), time, event)
            .map_err(|e| Error::parse(&labels_path, format!("line {line}, field time_months"), e.to_string()))?;
        if labels.insert(row[0].clone(), rec).is_some() {
            return Err(Error::parse(
                &labels_path,
                format!("line {line}, field patient_id"),
                format!("duplicate patient {}", row[0]),
            ));
        }
    }

    let mut truth = BTreeMap::new();
    if let Some(gt) = &manifest.ground_truth {
        let gt_path = root.join(gt);
        for (i, row) in read_rows(&gt_path, true)?.iter().enumerate() {
            if row.len() != 2 {
                return Err(Error::parse(&gt_path, format!("line {}", i + 2), "expected 2 fields"));
            }
            truth.insert(row[0].clone(), parse_f64(&gt_path, i + 2, "true_time_months", &row[1])?);
        }
    }

    let mut patients = Vec::with_capacity(manifest.patients.len());
    for (files, avail) in manifest.patients.iter().zip(&manifest.availability) {
        let at = |field: &str| format!("patients[{}].{field}", files.id);
        if !avail.iter().any(|a| *a) {
            return Err(Error::parse(&manifest_path, at("availability"), "no available modality"));
        }
        let record = labels
            .remove(&files.id)
            .ok_or_else(|| Error::parse(&labels_path, "patient_id", format!("no label for {}", files.id)))?;
        let mut payloads = BTreeMap::new();
        for kind in ModalityKind::ALL {
            let rel = files.path(kind);
            match (avail[kind.index()], rel) {
                (true, None) => {
                    return Err(Error::parse(
                        &manifest_path,
                        at(kind.name()),
                        format!("{kind} marked available but no payload file given"),
                    ))
                }
                (false, Some(_)) => {
                    return Err(Error::parse(
                        &manifest_path,
                        at(kind.name()),
                        format!("payload given for unavailable {kind}"),
                    ))
                }
                (false, None) => continue,
                (true, Some(rel)) => {
                    let p = root.join(rel);
                    let payload = read_payload(&p, kind, &manifest)?;
                    payloads.insert(kind, payload);
                }
            }
        }
        patients.push(Patient {
            true_time: truth.get(&files.id).copied(),
            record,
            payloads,
        });
    }
    if let Some(extra) = labels.keys().next() {
        return Err(Error::parse(
            &labels_path,
            "patient_id",
            format!("label for unknown patient {extra}"),
        ));
    }
    let cohort = Cohort {
        name: manifest.cohort.clone(),
        grid_size: manifest.grid_size,
        clinical_cardinalities: manifest.clinical_cardinalities.clone(),
        patients,
    };
    cohort.validate()?;
    Ok(cohort)
}

fn read_payload(path: &Path, kind: ModalityKind, manifest: &DatasetManifest) -> Result<RawPayload> {
    let rows = read_matrix(path)?;
    match kind {
        ModalityKind::Pathology => {
            let g = manifest.grid_size;
            if rows.len() != g * g {
                return Err(Error::parse(
                    path,
                    "rows",
                    format!("expected {} patches for a {g}x{g} grid, got {}", g * g, rows.len()),
                ));
            }
            Ok(RawPayload::Pathology {
                grid: g,
                patches: rows,
            })
        }
        ModalityKind::Genomic => {
            if rows.len() != GENOMIC_NODES {
                return Err(Error::parse(
                    path,
                    "rows",
                    format!("expected {GENOMIC_NODES} embeddings, got {}", rows.len()),
                ));
            }
            Ok(RawPayload::Genomic { embeddings: rows })
        }
        ModalityKind::Clinical => {
            let cards = &manifest.clinical_cardinalities;
            let row = match rows.as_slice() {
                [row] if row.len() == cards.len() => row,
                _ => {
                    return Err(Error::parse(
                        path,
                        "line 1",
                        format!("expected one row of {} levels", cards.len()),
                    ))
                }
            };
            let mut levels = Vec::with_capacity(row.len());
            for (j, (v, card)) in row.iter().zip(cards).enumerate() {
                if v.fract() != 0.0 || *v < 0.0 || *v as usize >= *card {
                    return Err(Error::parse(
                        path,
                        format!("line 1, column {}", j + 1),
                        format!("level {v} outside 0..{card}"),
                    ));
                }
                levels.push(*v as usize);
            }
            Ok(RawPayload::Clinical {
                levels,
                cardinalities: cards.clone(),
            })
        }
    }
}
