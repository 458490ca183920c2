//! Patient-modality bipartite graph.
//!
//! Patients link to the modalities they have; each edge carries that
//! modality's pooled embedding. Missing modalities are simply absent edges,
//! so the same encoder handles complete and incomplete patients. Training
//! pairs the complete graph with an edge-dropped copy and aligns the two
//! encodings contrastively.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::modality::ModalityKind;
use crate::survstat::RiskScores;
use crate::{Error, Result};

/// Per-patient availability of each [`ModalityKind`], indexed by `kind.index()`.
pub type Availability = [bool; ModalityKind::COUNT];

#[derive(Clone, Debug)]
pub struct BipartiteGraph {
    patient_ids: Vec<String>,
    availability: Vec<Availability>,
    edges: BTreeMap<(usize, ModalityKind), Var>,
}

/// Builds the graph from per-patient modality embeddings (`[1 x d]` or `[d]` vars).
///
/// `embeddings[p]` must hold exactly the modalities flagged in `availability[p]`.
pub fn build_bipartite(
    patient_ids: &[String],
    embeddings: &[BTreeMap<ModalityKind, Var>],
    availability: &[Availability],
) -> Result<BipartiteGraph> {
    if patient_ids.len() != embeddings.len() || patient_ids.len() != availability.len() {
        return Err(Error::invalid(format!(
            "{} patients, {} embedding maps, {} availability rows",
            patient_ids.len(),
            embeddings.len(),
            availability.len()
        )));
    }
    let mut edges = BTreeMap::new();
    for (p, (embs, avail)) in embeddings.iter().zip(availability).enumerate() {
        if !avail.iter().any(|a| *a) {
            return Err(Error::invalid(format!(
                "patient {} has no available modality",
                patient_ids[p]
            )));
        }
        for kind in ModalityKind::ALL {
            match (avail[kind.index()], embs.get(&kind)) {
                (true, Some(v)) => {
                    edges.insert((p, kind), *v);
                }
                (true, None) => {
                    return Err(Error::invalid(format!(
                        "patient {}: {kind} marked available but no embedding given",
                        patient_ids[p]
                    )))
                }
                (false, Some(_)) => {
                    return Err(Error::invalid(format!(
                        "patient {}: embedding given for unavailable {kind}",
                        patient_ids[p]
                    )))
                }
                (false, None) => {}
            }
        }
    }
    Ok(BipartiteGraph {
        patient_ids: patient_ids.to_vec(),
        availability: availability.to_vec(),
        edges,
    })
}

impl BipartiteGraph {
    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    pub fn availability(&self) -> &[Availability] {
        &self.availability
    }

    pub fn num_patients(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge(&self, patient: usize, kind: ModalityKind) -> Option<Var> {
        self.edges.get(&(patient, kind)).copied()
    }

    /// Edges in (patient, kind) order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, ModalityKind, Var)> + '_ {
        self.edges.iter().map(|(&(p, k), &v)| (p, k, v))
    }

    /// Same patients with a reduced availability mask; every kept edge must already exist.
    pub fn restricted(&self, mask: &[Availability]) -> Result<BipartiteGraph> {
        if mask.len() != self.availability.len() {
            return Err(Error::invalid("mask size does not match patient count"));
        }
        let mut edges = BTreeMap::new();
        for (p, row) in mask.iter().enumerate() {
            if !row.iter().any(|a| *a) {
                return Err(Error::invalid(format!(
                    "patient {} would lose every modality",
                    self.patient_ids[p]
                )));
            }
            for kind in ModalityKind::ALL {
                if row[kind.index()] {
                    let v = self.edge(p, kind).ok_or_else(|| {
                        Error::invalid(format!(
                            "patient {}: cannot add {kind} edge by masking",
                            self.patient_ids[p]
                        ))
                    })?;
                    edges.insert((p, kind), v);
                }
            }
        }
        Ok(BipartiteGraph {
            patient_ids: self.patient_ids.clone(),
            availability: mask.to_vec(),
            edges,
        })
    }
}

/// Outcome of [`dropout_mask`].
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub availability: Vec<Availability>,
    /// Edges dropped by the Bernoulli draws, before the retention guard.
    pub raw_dropped: usize,
    /// Edges restored by the retention guard.
    pub restored: usize,
}

/// Drops each available edge with probability `rate`. A patient whose every
/// edge drops keeps one of its original edges, chosen uniformly.
pub fn dropout_mask<R: Rng + ?Sized>(
    availability: &[Availability],
    rate: f64,
    rng: &mut R,
) -> Result<DropoutMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    let mut out = Vec::with_capacity(availability.len());
    let (mut raw_dropped, mut restored) = (0, 0);
    for row in availability {
        let mut kept = *row;
        for k in 0..ModalityKind::COUNT {
            if row[k] && rng.random::<f64>() < rate {
                kept[k] = false;
                raw_dropped += 1;
            }
        }
        if !kept.iter().any(|a| *a) {
            let original: Vec<usize> = (0..ModalityKind::COUNT).filter(|k| row[*k]).collect();
            if !original.is_empty() {
                kept[original[rng.random_range(0..original.len())]] = true;
                restored += 1;
            }
        }
        out.push(kept);
    }
    Ok(DropoutMask {
        availability: out,
        raw_dropped,
        restored,
    })
}

/// Incomplete view of `graph` by seeded random edge dropout.
pub fn edge_dropout(graph: &BipartiteGraph, rate: f64, seed: u64) -> Result<BipartiteGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = dropout_mask(graph.availability(), rate, &mut rng)?;
    graph.restricted(&mask.availability)
}

/// Temperature and training-time edge dropout for the alignment objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentConfig {
    pub temperature: f64,
    pub dropout_rate: f64,
}

impl AlignmentConfig {
    pub fn new(temperature: f64, dropout_rate: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        Ok(Self {
            temperature,
            dropout_rate,
        })
    }
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            dropout_rate: 0.3,
        }
    }
}

/// Weights of the patient-node encoder shared by both siamese branches.
#[derive(Clone, Debug)]
pub struct FusionParams {
    /// One row per modality kind, added to every edge of that kind.
    pub kind_embedding: ParamId,
    pub layers: Vec<(ParamId, ParamId)>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub kind_embedding: Var,
    pub layers: Vec<(Var, Var)>,
    pub proj_w: Var,
    pub proj_b: Var,
}

impl FusionParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d_model: usize,
        d_z: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let kind_embedding = store.register(
            "fusion.kind_embedding",
            Tensor::zeros(&[ModalityKind::COUNT, d_model]),
        )?;
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let w = store.register_glorot(format!("fusion.layer{l}.w"), 2 * d_model, d_model, rng)?;
            let b = store.register(format!("fusion.layer{l}.b"), Tensor::zeros(&[d_model]))?;
            layers.push((w, b));
        }
        Ok(Self {
            kind_embedding,
            layers,
            proj_w: store.register_glorot("fusion.proj.w", d_model, d_z, rng)?,
            proj_b: store.register("fusion.proj.b", Tensor::zeros(&[d_z]))?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> FusionWeights {
        FusionWeights {
            kind_embedding: tape.param(store, self.kind_embedding),
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (tape.param(store, *w), tape.param(store, *b)))
                .collect(),
            proj_w: tape.param(store, self.proj_w),
            proj_b: tape.param(store, self.proj_b),
        }
    }
}

/// Patient representations `[P x d_z]`, rows in `patient_ids` order.
pub fn encode_patients(tape: &mut Tape, graph: &BipartiteGraph, w: &FusionWeights) -> Result<Var> {
    let mut rows = Vec::with_capacity(graph.num_edges());
    let mut kinds = Vec::with_capacity(graph.num_edges());
    let mut groups = vec![Vec::new(); graph.num_patients()];
    for (e, (p, kind, v)) in graph.edges().enumerate() {
        let v = match tape.shape(v).len() {
            1 => {
                let d = tape.shape(v)[0];
                tape.reshape(v, &[1, d])?
            }
            _ => v,
        };
        rows.push(v);
        kinds.push(kind.index());
        groups[p].push(e);
    }
    let stacked = tape.concat(&rows, 0)?;
    let kind_rows = tape.index_select(w.kind_embedding, &kinds)?;
    let edge_x = tape.add(stacked, kind_rows)?;
    let agg = tape.segment_mean(edge_x, &groups)?;

    let mut h = agg;
    for &(wl, bl) in &w.layers {
        let joined = tape.concat(&[h, agg], 1)?;
        let z = tape.matmul(joined, wl)?;
        let z = tape.add(z, bl)?;
        h = tape.relu(z);
    }
    let z = tape.matmul(h, w.proj_w)?;
    tape.add(z, w.proj_b)
}

/// Complete (`Z`) and incomplete (`Z'`) encodings of the same patients.
#[derive(Clone, Copy, Debug)]
pub struct PatientEmbeddingPair {
    pub complete: Var,
    pub incomplete: Var,
}

/// Encodes both views with the same weights.
pub fn siamese_encode(
    tape: &mut Tape,
    complete: &BipartiteGraph,
    incomplete: &BipartiteGraph,
    w: &FusionWeights,
) -> Result<PatientEmbeddingPair> {
    if complete.patient_ids() != incomplete.patient_ids() {
        return Err(Error::invalid("siamese views must share patient order"));
    }
    Ok(PatientEmbeddingPair {
        complete: encode_patients(tape, complete, w)?,
        incomplete: encode_patients(tape, incomplete, w)?,
    })
}

/// InfoNCE over cosine similarities: each `z_p` should match `z'_p` against
/// every other patient's `z'_q` in the batch.
pub fn alignment_loss(
    tape: &mut Tape,
    pair: PatientEmbeddingPair,
    temperature: f64,
) -> Result<Var> {
    let (sz, szp) = (tape.shape(pair.complete).to_vec(), tape.shape(pair.incomplete).to_vec());
    if sz != szp || sz.len() != 2 || sz[0] == 0 {
        return Err(Error::Shape {
            op: "alignment_loss",
            shapes: vec![sz, szp],
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    let n = sz[0];
    let z = tape.normalize_rows(pair.complete)?;
    let zp = tape.normalize_rows(pair.incomplete)?;
    let zpt = tape.transpose(zp)?;
    let sim = tape.matmul(z, zpt)?;
    let logits = tape.scale(sim, 1.0 / temperature);
    let lse = tape.log_sum_exp(logits, 1)?;
    let lse_total = tape.sum(lse);
    let mut eye = vec![0.0; n * n];
    (0..n).for_each(|i| eye[i * n + i] = 1.0);
    let eye = tape.constant(Tensor::matrix(n, n, eye)?);
    let diag = tape.mul(logits, eye)?;
    let positives = tape.sum(diag);
    tape.sub(lse_total, positives)
}

/// Two-layer perceptron mapping each patient representation to a scalar risk.
#[derive(Clone, Debug)]
pub struct RiskHeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct RiskHeadWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl RiskHeadParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w1: store.register_glorot("head.w1", d_in, hidden, rng)?,
            b1: store.register("head.b1", Tensor::zeros(&[hidden]))?,
            w2: store.register_glorot("head.w2", hidden, 1, rng)?,
            b2: store.register("head.b2", Tensor::zeros(&[1]))?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> RiskHeadWeights {
        RiskHeadWeights {
            w1: tape.param(store, self.w1),
            b1: tape.param(store, self.b1),
            w2: tape.param(store, self.w2),
            b2: tape.param(store, self.b2),
        }
    }
}

/// Risk per row of `embeddings`, as a rank-1 var of length P.
pub fn predict_risk(tape: &mut Tape, embeddings: Var, w: &RiskHeadWeights) -> Result<Var> {
    let h = tape.matmul(embeddings, w.w1)?;
    let h = tape.add(h, w.b1)?;
    let h = tape.relu(h);
    let r = tape.matmul(h, w.w2)?;
    let r = tape.add(r, w.b2)?;
    let p = tape.shape(r)[0];
    tape.reshape(r, &[p])
}

/// Reads a rank-1 risk var into a [`RiskScores`] keyed by `patient_ids`.
pub fn to_risk_scores(tape: &Tape, risks: Var, patient_ids: &[String]) -> Result<RiskScores> {
    let values = tape.value(risks).data();
    if values.len() != patient_ids.len() {
        return Err(Error::invalid("risk vector length does not match patients"));
    }
    RiskScores::from_pairs(patient_ids.iter().cloned().zip(values.iter().copied()))
}
