//! Cohorts: synthetic generation, on-disk datasets and result export.

mod export;
mod files;
mod synthetic;

use std::collections::BTreeMap;

use crate::bipartite::Availability;
use crate::modality::{ModalityKind, RawPayload};
use crate::survstat::SurvivalRecord;
use crate::{Error, Result};

pub use export::{
    emit_km_csv, read_predictions, read_relabel_audit, write_epoch_log, write_km_csv,
    write_metrics, write_predictions, write_relabel_audit, write_run,
};
pub use files::{load_dataset, save_dataset, DatasetManifest, PatientFiles, SCHEMA_VERSION};
pub use synthetic::{generate_synthetic, SyntheticConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Patient {
    pub record: SurvivalRecord,
    /// Present modalities only.
    pub payloads: BTreeMap<ModalityKind, RawPayload>,
    /// Uncensored survival time, known only for synthetic cohorts.
    pub true_time: Option<f64>,
}

impl Patient {
    pub fn id(&self) -> &str {
        &self.record.patient_id
    }

    pub fn availability(&self) -> Availability {
        let mut a = [false; ModalityKind::COUNT];
        for k in self.payloads.keys() {
            a[k.index()] = true;
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub name: String,
    pub grid_size: usize,
    pub clinical_cardinalities: Vec<usize>,
    pub patients: Vec<Patient>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn records(&self) -> Vec<SurvivalRecord> {
        self.patients.iter().map(|p| p.record.clone()).collect()
    }

    pub fn availability(&self) -> Vec<Availability> {
        self.patients.iter().map(Patient::availability).collect()
    }

    pub fn censored_fraction(&self) -> f64 {
        let c = self.patients.iter().filter(|p| p.record.is_censored()).count();
        c as f64 / self.len().max(1) as f64
    }

    /// Checks ids are unique and every patient has at least one modality.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.patients {
            if !seen.insert(p.id()) {
                return Err(Error::invalid(format!("duplicate patient id {}", p.id())));
            }
            if p.payloads.is_empty() {
                return Err(Error::invalid(format!("patient {} has no modality", p.id())));
            }
            for (k, payload) in &p.payloads {
                if payload.kind() != *k {
                    return Err(Error::invalid(format!(
                        "patient {}: {} payload stored under {k}",
                        p.id(),
                        payload.kind()
                    )));
                }
            }
        }
        Ok(())
    }
}
