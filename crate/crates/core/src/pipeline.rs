//! Training and evaluation: the combined loss, the two-stage schedule with
//! censored-record relabelling, k-fold cross-validation with validation-based
//! model selection, ablations and missing-modality evaluation.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bipartite::{
    alignment_loss, build_bipartite, dropout_mask, edge_dropout, encode_patients, predict_risk,
    siamese_encode, to_risk_scores, Availability, FusionParams, RiskHeadParams,
};
use crate::dataio::Cohort;
use crate::diffcore::{adam_step, AdamState, ParamStore, Tape, Tensor, Var};
use crate::ecmc::{
    apply_relabels, dmac_update, rank_by_risk, relabel_all, select_random, select_reliable,
    ConfidenceTracker, EcmcConfig,
};
use crate::modality::{build_modality_graph, ModalityEncoder, ModalityGraph, ModalityKind, RawPayload};
use crate::survstat::{concordance_index, logrank_test, GroupSplit, RiskScores, SurvivalRecord};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the Cox term.
    pub alpha: f64,
    /// Weight of the complete/incomplete alignment term.
    pub beta: f64,
    /// Momentum of the rank-stability confidence.
    pub lambda: f64,
    /// Alignment temperature.
    pub phi: f64,
    pub learning_rate: f64,
    pub preheat_epochs: usize,
    pub total_epochs: usize,
    /// Patients per optimisation step; `None` trains on the whole training split.
    pub batch_size: Option<usize>,
    pub k: usize,
    pub select_fraction: f64,
    /// Edge dropout rate for the incomplete view.
    pub dropout_rate: f64,
    pub d_model: usize,
    pub d_z: usize,
    pub sage_layers: usize,
    pub seed: u64,
    pub use_ecmc: bool,
    pub use_bpmg: bool,
    pub use_dmac: bool,
    pub folds: usize,
    /// Share of the non-test patients held out for model selection.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 1.0,
            lambda: 0.4,
            phi: 0.1,
            learning_rate: 3e-5,
            preheat_epochs: 60,
            total_epochs: 120,
            batch_size: None,
            k: 5,
            select_fraction: 0.25,
            dropout_rate: 0.3,
            d_model: 32,
            d_z: 16,
            sage_layers: 2,
            seed: 0,
            use_ecmc: true,
            use_bpmg: true,
            use_dmac: true,
            folds: 5,
            val_fraction: 0.25,
        }
    }
}

impl TrainConfig {
    /// Short schedule for small synthetic cohorts: 15 preheat epochs out of 30
    /// and a learning rate large enough to converge in that budget.
    pub fn desk() -> Self {
        Self {
            learning_rate: 3e-3,
            preheat_epochs: 15,
            total_epochs: 30,
            ..Self::default()
        }
    }

    pub fn ecmc(&self) -> EcmcConfig {
        EcmcConfig {
            k: self.k,
            select_fraction: self.select_fraction,
            lambda: self.lambda,
            preheat_epochs: self.preheat_epochs,
            total_epochs: self.total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if !(self.phi > 0.0) {
            return Err(Error::invalid(format!("temperature must be > 0, got {}", self.phi)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.d_model == 0 || self.d_z == 0 || self.sage_layers == 0 {
            return Err(Error::invalid("model dimensions and layer count must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.folds < 2 {
            return Err(Error::invalid(format!("need at least 2 folds, got {}", self.folds)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        self.ecmc().validate()
    }
}

/// `alpha * cox + beta * cia`.
pub fn total_loss(tape: &mut Tape, cox: Var, cia: Var, config: &TrainConfig) -> Result<Var> {
    let a = tape.scale(cox, config.alpha);
    let b = tape.scale(cia, config.beta);
    tape.add(a, b)
}

/// Deterministic child seed; every part is mixed in with splitmix64.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, p| mix(acc ^ mix(*p)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl FoldSplit {
    /// Errors unless the three sets are disjoint and together equal `all_ids`.
    pub fn check_partition(&self, all_ids: &[String]) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for id in self.train_ids.iter().chain(&self.val_ids).chain(&self.test_ids) {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!(
                    "fold {}: patient {id} appears in two splits",
                    self.fold_index
                )));
            }
        }
        let all: std::collections::BTreeSet<&str> = all_ids.iter().map(String::as_str).collect();
        if seen != all {
            return Err(Error::invalid(format!(
                "fold {}: splits do not cover the cohort",
                self.fold_index
            )));
        }
        Ok(())
    }
}

/// Shuffles `ids` with `seed` and cuts it into `folds` test chunks. The rest of
/// each fold is split into validation (first `val_fraction`, rounded) and train.
pub fn make_folds(ids: &[String], folds: usize, val_fraction: f64, seed: u64) -> Result<Vec<FoldSplit>> {
    let n = ids.len();
    if folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {folds}")));
    }
    if n < 10 || n < 3 * folds {
        return Err(Error::invalid(format!(
            "cohort of {n} patients is too small for {folds} folds"
        )));
    }
    let mut order: Vec<String> = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xf01d])));
    let mut splits = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let size = n / folds + usize::from(f < n % folds);
        let test_ids = order[start..start + size].to_vec();
        let rest: Vec<String> = order[..start]
            .iter()
            .chain(&order[start + size..])
            .cloned()
            .collect();
        let n_val = ((rest.len() as f64 * val_fraction).round() as usize).clamp(1, rest.len() - 1);
        splits.push(FoldSplit {
            fold_index: f,
            val_ids: rest[..n_val].to_vec(),
            train_ids: rest[n_val..].to_vec(),
            test_ids,
        });
        start += size;
    }
    for s in &splits {
        s.check_partition(ids)?;
    }
    Ok(splits)
}

/// Cohort with every payload already turned into a padded modality graph.
#[derive(Clone, Debug)]
pub struct PreparedCohort {
    pub ids: Vec<String>,
    pub records: Vec<SurvivalRecord>,
    pub availability: Vec<Availability>,
    pub true_times: Vec<Option<f64>>,
    pub graphs: Vec<BTreeMap<ModalityKind, ModalityGraph>>,
    pub input_dim: usize,
    index: BTreeMap<String, usize>,
}

fn payload_dim(p: &RawPayload) -> usize {
    match p {
        RawPayload::Pathology { patches, .. } => patches.first().map_or(0, Vec::len),
        RawPayload::Genomic { embeddings } => embeddings.first().map_or(0, Vec::len),
        RawPayload::Clinical { cardinalities, .. } => cardinalities.iter().sum(),
    }
}

impl PreparedCohort {
    pub fn new(cohort: &Cohort) -> Result<Self> {
        cohort.validate()?;
        let input_dim = cohort
            .patients
            .iter()
            .flat_map(|p| p.payloads.values().map(payload_dim))
            .max()
            .unwrap_or(0);
        if input_dim == 0 {
            return Err(Error::invalid("cohort has no modality features"));
        }
        let graphs = cohort
            .patients
            .iter()
            .map(|p| {
                p.payloads
                    .iter()
                    .map(|(k, payload)| Ok((*k, build_modality_graph(p.id(), payload, input_dim)?)))
                    .collect::<Result<BTreeMap<_, _>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<String> = cohort.patients.iter().map(|p| p.id().to_string()).collect();
        Ok(Self {
            index: ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect(),
            ids,
            records: cohort.records(),
            availability: cohort.availability(),
            true_times: cohort.patients.iter().map(|p| p.true_time).collect(),
            graphs,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn indices(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("unknown patient {id}")))
            })
            .collect()
    }
}

/// Modality encoders, optional bipartite fusion and the risk head.
#[derive(Clone, Debug)]
pub struct SurvivalModel {
    pub store: ParamStore,
    encoders: Vec<ModalityEncoder>,
    fusion: Option<FusionParams>,
    head: RiskHeadParams,
}

struct Forward {
    risks: Var,
    cia: Option<Var>,
}

impl SurvivalModel {
    pub fn new(config: &TrainConfig, input_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoders = ModalityKind::ALL
            .iter()
            .map(|k| {
                ModalityEncoder::register(&mut store, *k, input_dim, config.d_model, config.sage_layers, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = if config.use_bpmg {
            Some(FusionParams::register(&mut store, config.d_model, config.d_z, 2, &mut rng)?)
        } else {
            None
        };
        let d_in = if config.use_bpmg { config.d_z } else { config.d_model };
        let head = RiskHeadParams::register(&mut store, d_in, (d_in / 2).max(1), &mut rng)?;
        Ok(Self {
            store,
            encoders,
            fusion,
            head,
        })
    }

    /// `dropout` = (rate, seed, temperature) requests the alignment term.
    fn forward(
        &self,
        tape: &mut Tape,
        data: &PreparedCohort,
        idx: &[usize],
        avail: &[Availability],
        dropout: Option<(f64, u64, f64)>,
    ) -> Result<Forward> {
        let mut per_patient: Vec<BTreeMap<ModalityKind, Var>> = vec![BTreeMap::new(); idx.len()];
        for enc in &self.encoders {
            let kind = enc.kind;
            let (rows, graphs): (Vec<usize>, Vec<&ModalityGraph>) = idx
                .iter()
                .enumerate()
                .filter(|(row, _)| avail[*row][kind.index()])
                .map(|(row, &p)| {
                    data.graphs[p]
                        .get(&kind)
                        .map(|g| (row, g))
                        .ok_or_else(|| {
                            Error::invalid(format!("patient {} has no {kind} payload", data.ids[p]))
                        })
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            if graphs.is_empty() {
                continue;
            }
            let bound = enc.bind(tape, &self.store);
            for (row, v) in rows.into_iter().zip(bound.encode_batch(tape, &graphs)?) {
                per_patient[row].insert(kind, v);
            }
        }

        let (z, cia) = match &self.fusion {
            Some(fusion) => {
                let ids: Vec<String> = idx.iter().map(|&p| data.ids[p].clone()).collect();
                let graph = build_bipartite(&ids, &per_patient, avail)?;
                let w = fusion.bind(tape, &self.store);
                match dropout {
                    Some((rate, seed, temperature)) => {
                        let incomplete = edge_dropout(&graph, rate, seed)?;
                        let pair = siamese_encode(tape, &graph, &incomplete, &w)?;
                        let cia = alignment_loss(tape, pair, temperature)?;
                        (pair.complete, Some(cia))
                    }
                    None => (encode_patients(tape, &graph, &w)?, None),
                }
            }
            None => {
                let mut rows = Vec::new();
                let mut groups = Vec::with_capacity(idx.len());
                for embs in &per_patient {
                    let start = rows.len();
                    rows.extend(embs.values().copied());
                    groups.push((start..rows.len()).collect::<Vec<_>>());
                }
                let stacked = tape.concat(&rows, 0)?;
                (tape.segment_mean(stacked, &groups)?, None)
            }
        };
        let w = self.head.bind(tape, &self.store);
        Ok(Forward {
            risks: predict_risk(tape, z, &w)?,
            cia,
        })
    }

    /// Risk scores for `idx` under the given availability rows.
    pub fn predict(&self, data: &PreparedCohort, idx: &[usize], avail: &[Availability]) -> Result<RiskScores> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, data, idx, avail, None)?;
        let ids: Vec<String> = idx.iter().map(|&p| data.ids[p].clone()).collect();
        to_risk_scores(&tape, out.risks, &ids)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub cox: f64,
    pub cia: f64,
    pub val_cindex: f64,
    pub relabel_count: usize,
}

/// One applied relabel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub fold: usize,
    pub epoch: usize,
    pub patient_id: String,
    pub old_time: f64,
    pub new_time: f64,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub cindex: f64,
    /// `None` when the median split leaves the logrank test undefined.
    pub logrank_p: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelabelAudit {
    /// Relabels applied in the last training epoch, summed over folds.
    pub count: usize,
    /// Mean |new time - true time| over those relabels with known truth.
    pub mae_updated: Option<f64>,
    /// Mean |censoring time - true time| over the same patients.
    pub mae_original: Option<f64>,
}

impl RelabelAudit {
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = &'a AuditEntry>) -> Self {
        let mut count = 0;
        let (mut upd, mut orig, mut known) = (0.0, 0.0, 0usize);
        for e in entries {
            count += 1;
            if let Some(t) = e.true_time {
                upd += (e.new_time - t).abs();
                orig += (e.old_time - t).abs();
                known += 1;
            }
        }
        let mean = |s: f64| (known > 0).then(|| s / known as f64);
        Self {
            count,
            mae_updated: mean(upd),
            mae_original: mean(orig),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub folds: Vec<FoldMetrics>,
    pub mean_cindex: f64,
    /// Population standard deviation over folds.
    pub std_cindex: f64,
    pub relabel_audit: RelabelAudit,
}

impl RunMetrics {
    pub fn from_folds(folds: Vec<FoldMetrics>, relabel_audit: RelabelAudit) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::invalid("no fold metrics"));
        }
        let n = folds.len() as f64;
        let mean = folds.iter().map(|f| f.cindex).sum::<f64>() / n;
        let var = folds.iter().map(|f| (f.cindex - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            folds,
            mean_cindex: mean,
            std_cindex: var.sqrt(),
            relabel_audit,
        })
    }
}

/// Test C-index (0.5 when no pair is comparable) and median-split logrank p.
pub fn fold_metrics(records: &[SurvivalRecord], scores: &RiskScores) -> Result<FoldMetrics> {
    let cindex = match concordance_index(records, scores) {
        Ok(c) => c,
        Err(Error::UndefinedConcordance) => 0.5,
        Err(e) => return Err(e),
    };
    let logrank_p = match logrank_test(records, &GroupSplit::by_median(scores)) {
        Ok(r) => Some(r.p_value),
        Err(Error::LogrankUndefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(FoldMetrics { cindex, logrank_p })
}

/// Rebuilds run metrics from saved test predictions and the relabel log.
/// The audit covers relabels from `last_epoch` only.
pub fn metrics_from_predictions(
    rows: &[PredictionRow],
    audit: &[AuditEntry],
    last_epoch: Option<usize>,
) -> Result<RunMetrics> {
    let mut by_fold: BTreeMap<usize, (Vec<SurvivalRecord>, RiskScores)> = BTreeMap::new();
    for r in rows {
        let (records, scores) = by_fold.entry(r.fold).or_default();
        records.push(SurvivalRecord::new(r.patient_id.clone(), r.time, r.event)?);
        scores.insert(r.patient_id.clone(), r.risk)?;
    }
    let folds = by_fold
        .values()
        .map(|(records, scores)| fold_metrics(records, scores))
        .collect::<Result<Vec<_>>>()?;
    let audit = RelabelAudit::from_entries(audit.iter().filter(|e| Some(e.epoch) == last_epoch));
    RunMetrics::from_folds(folds, audit)
}

/// Test-set prediction of one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub fold: usize,
    pub patient_id: String,
    pub risk: f64,
    pub time: f64,
    pub event: bool,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub split: FoldSplit,
    pub metrics: FoldMetrics,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    pub audit: Vec<AuditEntry>,
    pub predictions: Vec<PredictionRow>,
    pub model: SurvivalModel,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: TrainConfig,
    pub metrics: RunMetrics,
    pub folds: Vec<FoldOutcome>,
}

fn records_at(data: &PreparedCohort, idx: &[usize]) -> Vec<SurvivalRecord> {
    idx.iter().map(|&i| data.records[i].clone()).collect()
}

fn avail_at(data: &PreparedCohort, idx: &[usize]) -> Vec<Availability> {
    idx.iter().map(|&i| data.availability[i]).collect()
}

/// Trains one fold and returns the best-validation model's predictions on
/// the test split.
///
/// The first `preheat_epochs` epochs use the original labels. After that,
/// when ECMC is on, each epoch relabels the most confident censored training
/// patients (based on the previous epoch's scores) and trains on that copy.
/// Validation C-index always uses the original labels.
pub fn train_fold(split: &FoldSplit, data: &PreparedCohort, config: &TrainConfig) -> Result<FoldOutcome> {
    train_fold_masked(split, data, config, None)
}

fn train_fold_masked(
    split: &FoldSplit,
    data: &PreparedCohort,
    config: &TrainConfig,
    test_mask: Option<&[Availability]>,
) -> Result<FoldOutcome> {
    config.validate()?;
    if split.train_ids.is_empty() {
        return Err(Error::invalid(format!("fold {} has an empty training split", split.fold_index)));
    }
    split.check_partition(&data.ids)?;
    let fold = split.fold_index as u64;
    let train_idx = data.indices(&split.train_ids)?;
    let val_idx = data.indices(&split.val_ids)?;
    let test_idx = data.indices(&split.test_ids)?;
    let train_records = records_at(data, &train_idx);
    let val_records = records_at(data, &val_idx);
    let train_avail = avail_at(data, &train_idx);
    let val_avail = avail_at(data, &val_idx);
    let true_time: BTreeMap<&str, Option<f64>> = train_idx
        .iter()
        .map(|&i| (data.ids[i].as_str(), data.true_times[i]))
        .collect();

    let mut model = SurvivalModel::new(config, data.input_dim, derive_seed(config.seed, &[fold, 1]))?;
    let mut adam = AdamState::new(&model.store);
    let ecmc = config.ecmc();
    let mut tracker = ConfidenceTracker::new(split.train_ids.iter().cloned(), config.lambda)?;
    let mut scores = model.predict(data, &train_idx, &train_avail)?;
    tracker.set_initial_ranks(&rank_by_risk(&scores));
    let mut select_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[fold, 2]));
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[fold, 3]));

    let mut epochs = Vec::with_capacity(config.total_epochs);
    let mut audit = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..config.total_epochs {
        let mut labels = train_records.clone();
        let mut relabel_count = 0;
        if config.use_ecmc && epoch >= config.preheat_epochs {
            let chosen = if config.use_dmac {
                select_reliable(&tracker, &train_records, &ecmc)?
            } else {
                select_random(&train_records, &ecmc, &mut select_rng)
            };
            let decisions = relabel_all(&chosen, &train_records, &scores, &ecmc)?;
            labels = apply_relabels(&train_records, &decisions)?;
            for d in decisions.iter().filter(|d| d.applied) {
                if !(d.new_time > d.old_time) {
                    return Err(Error::invalid(format!(
                        "relabel of {} does not extend its time ({} -> {})",
                        d.patient_id, d.old_time, d.new_time
                    )));
                }
                relabel_count += 1;
                audit.push(AuditEntry {
                    fold: split.fold_index,
                    epoch,
                    patient_id: d.patient_id.clone(),
                    old_time: d.old_time,
                    new_time: d.new_time,
                    tau: tracker.tau(&d.patient_id).unwrap_or(0.0),
                    true_time: true_time.get(d.patient_id.as_str()).copied().flatten(),
                });
            }
            let censored_before = train_records.iter().filter(|r| r.is_censored()).count();
            let censored_after = labels.iter().filter(|r| r.is_censored()).count();
            if censored_after + relabel_count != censored_before {
                return Err(Error::invalid("relabelled copy has inconsistent censoring"));
            }
        }

        let batches: Vec<Vec<usize>> = match config.batch_size {
            Some(b) if b < train_idx.len() => {
                let mut order: Vec<usize> = (0..train_idx.len()).collect();
                order.shuffle(&mut batch_rng);
                order.chunks(b).map(<[usize]>::to_vec).collect()
            }
            _ => vec![(0..train_idx.len()).collect()],
        };
        let (mut loss_sum, mut cox_sum, mut cia_sum) = (0.0, 0.0, 0.0);
        for (b, rows) in batches.iter().enumerate() {
            let idx: Vec<usize> = rows.iter().map(|&r| train_idx[r]).collect();
            let avail: Vec<Availability> = rows.iter().map(|&r| train_avail[r]).collect();
            let batch_labels: Vec<SurvivalRecord> = rows.iter().map(|&r| labels[r].clone()).collect();
            let mut tape = Tape::new();
            let dropout = (config.use_bpmg && config.beta > 0.0).then(|| {
                (
                    config.dropout_rate,
                    derive_seed(config.seed, &[fold, 4, epoch as u64, b as u64]),
                    config.phi,
                )
            });
            let out = model.forward(&mut tape, data, &idx, &avail, dropout)?;
            let cox = crate::survstat::cox_loss(&mut tape, out.risks, &batch_labels)?;
            let cia = match out.cia {
                Some(v) => v,
                None => tape.constant(Tensor::scalar(0.0)),
            };
            let loss = total_loss(&mut tape, cox, cia, config)?;
            loss_sum += tape.value(loss).item();
            cox_sum += tape.value(cox).item();
            cia_sum += tape.value(cia).item();
            let grads = tape.backward(loss)?.params(&tape);
            adam_step(&mut model.store, &grads, &mut adam, config.learning_rate)?;
        }

        scores = model.predict(data, &train_idx, &train_avail)?;
        dmac_update(&mut tracker, &rank_by_risk(&scores))?;
        if let Some((id, tau)) = tracker.taus().iter().find(|(_, t)| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(format!("confidence of {id} left [0, 1]: {tau}")));
        }

        let val_cindex = if val_idx.is_empty() {
            0.5
        } else {
            let val_scores = model.predict(data, &val_idx, &val_avail)?;
            concordance_index(&val_records, &val_scores).unwrap_or(0.5)
        };
        if best.as_ref().is_none_or(|(c, _, _)| val_cindex > *c) {
            best = Some((val_cindex, epoch, model.store.clone()));
        }
        epochs.push(EpochLog {
            fold: split.fold_index,
            epoch,
            train_loss: loss_sum,
            cox: cox_sum,
            cia: cia_sum,
            val_cindex,
            relabel_count,
        });
    }

    let best_epoch = match best {
        Some((_, e, store)) => {
            model.store = store;
            e
        }
        None => 0,
    };
    let test_records = records_at(data, &test_idx);
    let test_avail = match test_mask {
        Some(m) => m.to_vec(),
        None => avail_at(data, &test_idx),
    };
    let test_scores = model.predict(data, &test_idx, &test_avail)?;
    let predictions = test_records
        .iter()
        .map(|r| PredictionRow {
            fold: split.fold_index,
            patient_id: r.patient_id.clone(),
            risk: test_scores.get(&r.patient_id).unwrap_or(f64::NAN),
            time: r.time,
            event: r.event,
        })
        .collect();
    Ok(FoldOutcome {
        split: split.clone(),
        metrics: fold_metrics(&test_records, &test_scores)?,
        best_epoch,
        epochs,
        audit,
        predictions,
        model,
    })
}

fn run_folds(
    data: &PreparedCohort,
    config: &TrainConfig,
    test_masks: Option<&[Vec<Availability>]>,
) -> Result<RunOutcome> {
    config.validate()?;
    let splits = make_folds(&data.ids, config.folds, config.val_fraction, config.seed)?;
    let folds = splits
        .par_iter()
        .map(|s| train_fold_masked(s, data, config, test_masks.map(|m| m[s.fold_index].as_slice())))
        .collect::<Result<Vec<_>>>()?;
    let last = config.total_epochs.checked_sub(1);
    let audit = RelabelAudit::from_entries(
        folds
            .iter()
            .flat_map(|f| &f.audit)
            .filter(|e| Some(e.epoch) == last),
    );
    let metrics = RunMetrics::from_folds(folds.iter().map(|f| f.metrics.clone()).collect(), audit)?;
    Ok(RunOutcome {
        config: config.clone(),
        metrics,
        folds,
    })
}

/// K-fold cross-validation; folds train in parallel and deterministically.
pub fn cross_validate(cohort: &Cohort, config: &TrainConfig) -> Result<RunOutcome> {
    run_folds(&PreparedCohort::new(cohort)?, config, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Ecmc,
    Bpmg,
    Dmac,
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ecmc" => Ok(Self::Ecmc),
            "bpmg" => Ok(Self::Bpmg),
            "dmac" => Ok(Self::Dmac),
            _ => Err(Error::invalid(format!(
                "unknown component {s:?} (expected ecmc, bpmg or dmac)"
            ))),
        }
    }
}

impl Component {
    /// `config` with this component switched off. Without the bipartite graph
    /// there is no alignment term, so `beta` becomes 0.
    pub fn disable(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        match self {
            Self::Ecmc => c.use_ecmc = false,
            Self::Bpmg => {
                c.use_bpmg = false;
                c.beta = 0.0;
            }
            Self::Dmac => c.use_dmac = false,
        }
        c
    }
}

pub fn ablation_run(cohort: &Cohort, config: &TrainConfig, component: Component) -> Result<RunOutcome> {
    cross_validate(cohort, &component.disable(config))
}

/// Test-time availability for every fold: each present modality is dropped
/// with probability `rate`, keeping at least one per patient.
fn missing_masks(
    data: &PreparedCohort,
    config: &TrainConfig,
    rate: f64,
) -> Result<Vec<Vec<Availability>>> {
    let splits = make_folds(&data.ids, config.folds, config.val_fraction, config.seed)?;
    splits
        .iter()
        .map(|s| {
            let idx = data.indices(&s.test_ids)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                config.seed,
                &[s.fold_index as u64, 5, rate.to_bits()],
            ));
            Ok(dropout_mask(&avail_at(data, &idx), rate, &mut rng)?.availability)
        })
        .collect()
}

/// Cross-validation where test patients lose modalities at random.
pub fn missing_scenario_run(cohort: &Cohort, config: &TrainConfig, missing_rate: f64) -> Result<RunOutcome> {
    let data = PreparedCohort::new(cohort)?;
    let masks = missing_masks(&data, config, missing_rate)?;
    run_folds(&data, config, Some(&masks))
}

/// Metrics and test predictions under one missing-modality rate.
#[derive(Clone, Debug, PartialEq)]
pub struct MissingRun {
    pub rate: f64,
    pub metrics: RunMetrics,
    pub predictions: Vec<PredictionRow>,
}

/// [`missing_scenario_run`] for several rates, training each fold once.
/// Also returns the unperturbed run the rates were evaluated against.
pub fn missing_sweep(cohort: &Cohort, config: &TrainConfig, rates: &[f64]) -> Result<(RunOutcome, Vec<MissingRun>)> {
    let data = PreparedCohort::new(cohort)?;
    let masks = rates
        .iter()
        .map(|&r| missing_masks(&data, config, r))
        .collect::<Result<Vec<_>>>()?;
    let base = run_folds(&data, config, None)?;
    let runs = rates
        .iter()
        .zip(&masks)
        .map(|(&rate, fold_masks)| {
            let mut predictions = Vec::new();
            let mut folds = Vec::with_capacity(base.folds.len());
            for f in &base.folds {
                let test_idx = data.indices(&f.split.test_ids)?;
                let records = records_at(&data, &test_idx);
                let scores = f.model.predict(&data, &test_idx, &fold_masks[f.split.fold_index])?;
                folds.push(fold_metrics(&records, &scores)?);
                for r in &records {
                    predictions.push(PredictionRow {
                        fold: f.split.fold_index,
                        patient_id: r.patient_id.clone(),
                        risk: scores.get(&r.patient_id).unwrap_or(f64::NAN),
                        time: r.time,
                        event: r.event,
                    });
                }
            }
            Ok(MissingRun {
                rate,
                metrics: RunMetrics::from_folds(folds, base.metrics.relabel_audit.clone())?,
                predictions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((base, runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticConfig};

    fn small_cohort(n: usize, seed: u64) -> Cohort {
        generate_synthetic(&SyntheticConfig {
            num_patients: n,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            preheat_epochs: 2,
            total_epochs: 4,
            d_model: 8,
            d_z: 4,
            folds: 2,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn total_loss_weights() {
        let mut t = Tape::new();
        let cox = t.leaf(Tensor::scalar(0.2));
        let cia = t.leaf(Tensor::scalar(0.1));
        let l = total_loss(&mut t, cox, cia, &TrainConfig::default()).unwrap();
        assert!((t.value(l).item() - 1.1).abs() < 1e-12);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(&t, cox).item(), 5.0);
        assert_eq!(g.wrt(&t, cia).item(), 1.0);

        let no_align = TrainConfig {
            beta: 0.0,
            ..TrainConfig::default()
        };
        let l = total_loss(&mut t, cox, cia, &no_align).unwrap();
        assert!((t.value(l).item() - 1.0).abs() < 1e-12);

        let zero = t.leaf(Tensor::scalar(0.0));
        let l = total_loss(&mut t, zero, zero, &TrainConfig::default()).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn fold_sizes_for_hundred_patients() {
        let ids: Vec<String> = (0..100).map(|i| format!("p{i}")).collect();
        let folds = make_folds(&ids, 5, 0.25, 1).unwrap();
        for f in &folds {
            assert_eq!((f.test_ids.len(), f.val_ids.len(), f.train_ids.len()), (20, 20, 60));
        }
        let tests: std::collections::BTreeSet<&String> =
            folds.iter().flat_map(|f| &f.test_ids).collect();
        assert_eq!(tests.len(), 100);
        let other = make_folds(&ids, 5, 0.25, 2).unwrap();
        assert_ne!(folds, other);
        assert!(make_folds(&ids[..9], 5, 0.25, 1).is_err());
    }

    #[test]
    fn seeds_are_distinct() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(7, &[3]), derive_seed(7, &[3]));
    }

    #[test]
    fn component_names() {
        assert_eq!("ecmc".parse::<Component>().unwrap(), Component::Ecmc);
        assert_eq!("BPMG".parse::<Component>().unwrap(), Component::Bpmg);
        assert!("dropout".parse::<Component>().is_err());
        let c = Component::Bpmg.disable(&TrainConfig::default());
        assert!(!c.use_bpmg && c.beta == 0.0);
    }

    #[test]
    fn population_std() {
        let f = |c| FoldMetrics {
            cindex: c,
            logrank_p: None,
        };
        let m = RunMetrics::from_folds(vec![f(0.6), f(0.8)], RelabelAudit::default()).unwrap();
        assert!((m.mean_cindex - 0.7).abs() < 1e-12);
        assert!((m.std_cindex - 0.1).abs() < 1e-12);
        let m = RunMetrics::from_folds(vec![f(0.7); 5], RelabelAudit::default()).unwrap();
        assert!((m.mean_cindex - 0.7).abs() < 1e-12 && m.std_cindex < 1e-12);
        assert!(RunMetrics::from_folds(vec![], RelabelAudit::default()).is_err());
    }

    #[test]
    fn no_ecmc_means_no_relabels() {
        let cohort = small_cohort(40, 3);
        let config = TrainConfig {
            use_ecmc: false,
            ..tiny_config()
        };
        let run = cross_validate(&cohort, &config).unwrap();
        assert!(run.folds.iter().all(|f| f.audit.is_empty()));
        assert!(run.folds.iter().flat_map(|f| &f.epochs).all(|e| e.relabel_count == 0));
    }

    #[test]
    fn full_preheat_disables_relabelling() {
        let cohort = small_cohort(40, 3);
        let config = TrainConfig {
            preheat_epochs: 4,
            ..tiny_config()
        };
        let run = cross_validate(&cohort, &config).unwrap();
        assert!(run.folds.iter().all(|f| f.audit.is_empty()));
    }

    #[test]
    fn ecmc_relabels_after_preheat() {
        let cohort = small_cohort(60, 4);
        let run = cross_validate(&cohort, &tiny_config()).unwrap();
        let audit: Vec<&AuditEntry> = run.folds.iter().flat_map(|f| &f.audit).collect();
        assert!(!audit.is_empty());
        assert!(audit.iter().all(|e| e.epoch >= 2 && e.new_time > e.old_time));
        assert!(audit.iter().all(|e| (0.0..=1.0).contains(&e.tau)));
    }

    #[test]
    fn deterministic_runs() {
        let cohort = small_cohort(40, 5);
        let a = cross_validate(&cohort, &tiny_config()).unwrap();
        let b = cross_validate(&cohort, &tiny_config()).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.folds[0].epochs, b.folds[0].epochs);
        let preds: Vec<PredictionRow> = a.folds.iter().flat_map(|f| f.predictions.clone()).collect();
        let audit: Vec<AuditEntry> = a.folds.iter().flat_map(|f| f.audit.clone()).collect();
        let rebuilt = metrics_from_predictions(&preds, &audit, Some(3)).unwrap();
        assert_eq!(rebuilt, a.metrics);
    }

    #[test]
    fn bpmg_ablation_has_no_alignment_term() {
        let cohort = small_cohort(40, 6);
        let run = ablation_run(&cohort, &tiny_config(), Component::Bpmg).unwrap();
        assert!(run.folds.iter().flat_map(|f| &f.epochs).all(|e| e.cia == 0.0));
        assert!(run.folds.iter().flat_map(|f| &f.epochs).all(|e| e.train_loss == 5.0 * e.cox));
    }

    #[test]
    fn missing_rate_zero_matches_cross_validation() {
        let cohort = small_cohort(40, 7);
        let cv = cross_validate(&cohort, &tiny_config()).unwrap();
        let miss = missing_scenario_run(&cohort, &tiny_config(), 0.0).unwrap();
        assert_eq!(cv.metrics, miss.metrics);
        let (base, sweep) = missing_sweep(&cohort, &tiny_config(), &[0.0, 0.9]).unwrap();
        assert_eq!(base.metrics, cv.metrics);
        assert_eq!(sweep[0].metrics.folds, cv.metrics.folds);
        assert_eq!(sweep[1].predictions.len(), 40);
        assert!(sweep[1].predictions.iter().all(|p| p.risk.is_finite()));
    }
}
