//! Per-modality graphs and their encoders.
//!
//! Pathology slides become 8-connected patch grids, genomic profiles a
//! complete graph over five embeddings, and clinical records a single one-hot
//! node. Each kind has its own GraphSAGE-style stack followed by attention
//! pooling down to one vector.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Number of genomic embedding nodes per patient.
pub const GENOMIC_NODES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Pathology,
    Genomic,
    Clinical,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 3] = [Self::Pathology, Self::Genomic, Self::Clinical];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            Self::Pathology => 0,
            Self::Genomic => 1,
            Self::Clinical => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Pathology => "pathology",
            Self::Genomic => "genomic",
            Self::Clinical => "clinical",
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Unprocessed features for one modality of one patient.
#[derive(Clone, Debug, PartialEq)]
pub enum RawPayload {
    /// `grid x grid` patch feature vectors in row-major order.
    Pathology { grid: usize, patches: Vec<Vec<f64>> },
    Genomic { embeddings: Vec<Vec<f64>> },
    /// Level index per categorical feature.
    Clinical {
        levels: Vec<usize>,
        cardinalities: Vec<usize>,
    },
}

impl RawPayload {
    pub fn kind(&self) -> ModalityKind {
        match self {
            Self::Pathology { .. } => ModalityKind::Pathology,
            Self::Genomic { .. } => ModalityKind::Genomic,
            Self::Clinical { .. } => ModalityKind::Clinical,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityGraph {
    pub kind: ModalityKind,
    pub patient_id: String,
    node_features: Tensor,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl ModalityGraph {
    /// `edges` are undirected, each stored once.
    pub fn new(
        kind: ModalityKind,
        patient_id: impl Into<String>,
        node_features: Tensor,
        edges: Vec<(usize, usize)>,
    ) -> Result<Self> {
        if node_features.rank() != 2 {
            return Err(Error::invalid(format!(
                "node features must be [N x d], got {:?}",
                node_features.shape()
            )));
        }
        let n = node_features.rows();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &edges {
            if a >= n || b >= n || a == b {
                return Err(Error::invalid(format!("bad edge ({a}, {b}) for {n} nodes")));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        Ok(Self {
            kind,
            patient_id: patient_id.into(),
            node_features,
            edges,
            neighbors,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }
}

/// Undirected 8-neighbourhood edges of a `g x g` grid, row-major node order.
pub fn grid_edges(g: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for r in 0..g {
        for c in 0..g {
            let a = r * g + c;
            // forward half of the neighbourhood so each edge appears once
            for (dr, dc) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr >= 0 && nc >= 0 && (nr as usize) < g && (nc as usize) < g {
                    edges.push((a, nr as usize * g + nc as usize));
                }
            }
        }
    }
    edges
}

pub fn complete_edges(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .collect()
}

pub fn one_hot(levels: &[usize], cardinalities: &[usize]) -> Result<Vec<f64>> {
    if levels.len() != cardinalities.len() {
        return Err(Error::invalid(format!(
            "clinical record has {} features, expected {}",
            levels.len(),
            cardinalities.len()
        )));
    }
    let mut out = Vec::with_capacity(cardinalities.iter().sum());
    for (i, (&lvl, &card)) in levels.iter().zip(cardinalities).enumerate() {
        if lvl >= card {
            return Err(Error::invalid(format!(
                "clinical feature {i}: level {lvl} outside 0..{card}"
            )));
        }
        out.extend((0..card).map(|k| if k == lvl { 1.0 } else { 0.0 }));
    }
    Ok(out)
}

/// Builds the graph for `payload` and zero-pads node features to `target_dim`.
pub fn build_modality_graph(
    patient_id: &str,
    payload: &RawPayload,
    target_dim: usize,
) -> Result<ModalityGraph> {
    let (features, edges) = match payload {
        RawPayload::Pathology { grid, patches } => {
            if *grid == 0 || patches.len() != grid * grid {
                return Err(Error::invalid(format!(
                    "patient {patient_id}: pathology grid {grid}x{grid} needs {} patches, got {}",
                    grid * grid,
                    patches.len()
                )));
            }
            (Tensor::from_rows(patches)?, grid_edges(*grid))
        }
        RawPayload::Genomic { embeddings } => {
            if embeddings.len() != GENOMIC_NODES {
                return Err(Error::invalid(format!(
                    "patient {patient_id}: expected {GENOMIC_NODES} genomic embeddings, got {}",
                    embeddings.len()
                )));
            }
            (Tensor::from_rows(embeddings)?, complete_edges(GENOMIC_NODES))
        }
        RawPayload::Clinical {
            levels,
            cardinalities,
        } => (
            Tensor::from_rows(&[one_hot(levels, cardinalities)?])?,
            Vec::new(),
        ),
    };
    let graph = ModalityGraph::new(payload.kind(), patient_id, features, edges)?;
    pad_features(graph, target_dim)
}

/// Appends zero columns up to `target_dim`. Never truncates.
pub fn pad_features(graph: ModalityGraph, target_dim: usize) -> Result<ModalityGraph> {
    if graph.feature_dim() == target_dim {
        return Ok(graph);
    }
    if graph.feature_dim() > target_dim {
        return Err(Error::invalid(format!(
            "{} features of patient {} have dim {} > target {target_dim}",
            graph.kind,
            graph.patient_id,
            graph.feature_dim()
        )));
    }
    let node_features = graph.node_features.pad_cols(target_dim)?;
    Ok(ModalityGraph {
        node_features,
        ..graph
    })
}

/// Weight matrices of a GraphSAGE-style stack; layer `l` is `[2*d_l x d_model]`.
#[derive(Clone, Debug)]
pub struct SageParams {
    pub layers: Vec<ParamId>,
}

impl SageParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        d_model: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(num_layers);
        let mut d = in_dim;
        for l in 0..num_layers {
            layers.push(store.register_glorot(format!("{prefix}.sage{l}.w"), 2 * d, d_model, rng)?);
            d = d_model;
        }
        Ok(Self { layers })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Vec<Var> {
        self.layers.iter().map(|id| tape.param(store, *id)).collect()
    }
}

/// `h <- relu([h, mean_{u in N(v)} h_u] W)` for every layer weight in `layers`.
/// Isolated nodes see a zero neighbour mean.
pub fn sage_forward(
    tape: &mut Tape,
    features: Var,
    neighbors: &[Vec<usize>],
    layers: &[Var],
) -> Result<Var> {
    let mut h = features;
    for &w in layers {
        let rows = tape.shape(h).first().copied().unwrap_or(0);
        if rows != neighbors.len() {
            return Err(Error::Shape {
                op: "sage_forward",
                shapes: vec![tape.shape(h).to_vec(), vec![neighbors.len()]],
            });
        }
        let agg = tape.segment_mean(h, neighbors)?;
        let joined = tape.concat(&[h, agg], 1)?;
        let z = tape.matmul(joined, w)?;
        h = tape.relu(z);
    }
    Ok(h)
}

/// Node scorer for attention pooling: `d_model -> d_model/2 -> 1` with relu.
#[derive(Clone, Debug)]
pub struct PoolParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct PoolWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl PoolParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = (d_model / 2).max(1);
        Ok(Self {
            w1: store.register_glorot(format!("{prefix}.pool.w1"), d_model, hidden, rng)?,
            b1: store.register(format!("{prefix}.pool.b1"), Tensor::zeros(&[hidden]))?,
            w2: store.register_glorot(format!("{prefix}.pool.w2"), hidden, 1, rng)?,
            b2: store.register(format!("{prefix}.pool.b2"), Tensor::zeros(&[1]))?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> PoolWeights {
        PoolWeights {
            w1: tape.param(store, self.w1),
            b1: tape.param(store, self.b1),
            w2: tape.param(store, self.w2),
            b2: tape.param(store, self.b2),
        }
    }
}

/// `sum_n softmax_n(MLP(v_n)) * v_n` over the rows of `nodes`, as a `[1 x d]` row.
pub fn attention_pool(tape: &mut Tape, nodes: Var, w: &PoolWeights) -> Result<Var> {
    let shape = tape.shape(nodes).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Op {
            op: "attention_pool",
            msg: format!("need at least one node, got shape {shape:?}"),
        });
    }
    let h = tape.matmul(nodes, w.w1)?;
    let h = tape.add(h, w.b1)?;
    let h = tape.relu(h);
    let s = tape.matmul(h, w.w2)?;
    let scores = tape.add(s, w.b2)?;
    weighted_readout(tape, scores, nodes)
}

/// Softmax over per-node scores `[N x 1]`, then the weighted sum of node rows.
pub fn weighted_readout(tape: &mut Tape, scores: Var, nodes: Var) -> Result<Var> {
    let weights = tape.softmax(scores, 0)?;
    let weights = tape.transpose(weights)?;
    tape.matmul(weights, nodes)
}

/// Pooled representation of one modality of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityEmbedding {
    pub kind: ModalityKind,
    pub vector: Tensor,
}

/// Independent GraphSAGE stack plus pooling head for one modality kind.
#[derive(Clone, Debug)]
pub struct ModalityEncoder {
    pub kind: ModalityKind,
    pub sage: SageParams,
    pub pool: PoolParams,
}

/// Encoder weights copied onto one tape.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub kind: ModalityKind,
    pub sage: Vec<Var>,
    pub pool: PoolWeights,
}

impl ModalityEncoder {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        kind: ModalityKind,
        in_dim: usize,
        d_model: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let prefix = kind.name();
        Ok(Self {
            kind,
            sage: SageParams::register(store, prefix, in_dim, d_model, num_layers, rng)?,
            pool: PoolParams::register(store, prefix, d_model, rng)?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundEncoder {
        BoundEncoder {
            kind: self.kind,
            sage: self.sage.bind(tape, store),
            pool: self.pool.bind(tape, store),
        }
    }
}

impl BoundEncoder {
    /// Message passing then pooling; returns a `[1 x d_model]` var.
    pub fn encode(&self, tape: &mut Tape, graph: &ModalityGraph) -> Result<Var> {
        if graph.kind != self.kind {
            return Err(Error::invalid(format!(
                "{} encoder given a {} graph",
                self.kind, graph.kind
            )));
        }
        let x = tape.constant(graph.node_features().clone());
        let h = sage_forward(tape, x, graph.neighbors(), &self.sage)?;
        attention_pool(tape, h, &self.pool)
    }

    /// Same result as calling [`encode`](Self::encode) on each graph, but runs
    /// message passing and node scoring once over the disjoint union.
    pub fn encode_batch(&self, tape: &mut Tape, graphs: &[&ModalityGraph]) -> Result<Vec<Var>> {
        if graphs.is_empty() {
            return Ok(Vec::new());
        }
        let dim = graphs[0].feature_dim();
        let mut data = Vec::new();
        let mut neighbors = Vec::new();
        let mut spans = Vec::with_capacity(graphs.len());
        for g in graphs {
            if g.kind != self.kind {
                return Err(Error::invalid(format!("{} encoder given a {} graph", self.kind, g.kind)));
            }
            if g.feature_dim() != dim {
                return Err(Error::Shape {
                    op: "encode_batch",
                    shapes: vec![vec![dim], vec![g.feature_dim()]],
                });
            }
            let offset = neighbors.len();
            data.extend_from_slice(g.node_features().data());
            neighbors.extend(
                g.neighbors()
                    .iter()
                    .map(|ns| ns.iter().map(|n| n + offset).collect::<Vec<_>>()),
            );
            spans.push((offset..offset + g.num_nodes()).collect::<Vec<_>>());
        }
        let x = tape.constant(Tensor::matrix(neighbors.len(), dim, data)?);
        let h = sage_forward(tape, x, &neighbors, &self.sage)?;
        let a = tape.matmul(h, self.pool.w1)?;
        let a = tape.add(a, self.pool.b1)?;
        let a = tape.relu(a);
        let s = tape.matmul(a, self.pool.w2)?;
        let scores = tape.add(s, self.pool.b2)?;
        spans
            .iter()
            .map(|rows| {
                let sc = tape.index_select(scores, rows)?;
                let nodes = tape.index_select(h, rows)?;
                weighted_readout(tape, sc, nodes)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_grid_is_complete() {
        let g = build_modality_graph(
            "p",
            &RawPayload::Pathology {
                grid: 2,
                patches: vec![vec![1.0]; 4],
            },
            4,
        )
        .unwrap();
        assert_eq!(g.num_nodes(), 4);
        assert_eq!(g.edges().len(), 6);
        assert!((0..4).all(|v| g.degree(v) == 3));
    }

    #[test]
    fn grid_degrees() {
        let g = ModalityGraph::new(
            ModalityKind::Pathology,
            "p",
            Tensor::zeros(&[25, 1]),
            grid_edges(5),
        )
        .unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let border = [r == 0 || r == 4, c == 0 || c == 4];
                let expected = match border {
                    [true, true] => 3,
                    [true, false] | [false, true] => 5,
                    [false, false] => 8,
                };
                assert_eq!(g.degree(r * 5 + c), expected, "node ({r},{c})");
            }
        }
    }

    #[test]
    fn genomic_is_k5() {
        let g = build_modality_graph(
            "p",
            &RawPayload::Genomic {
                embeddings: vec![vec![0.5, 1.0]; 5],
            },
            8,
        )
        .unwrap();
        assert_eq!(g.num_nodes(), 5);
        assert_eq!(g.edges().len(), 10);
        let bad = RawPayload::Genomic {
            embeddings: vec![vec![0.5]; 4],
        };
        assert!(build_modality_graph("p", &bad, 8).is_err());
    }

    #[test]
    fn clinical_one_hot_single_node() {
        let payload = RawPayload::Clinical {
            levels: vec![2, 0],
            cardinalities: vec![3, 2],
        };
        let g = build_modality_graph("p", &payload, 5).unwrap();
        assert_eq!(g.num_nodes(), 1);
        assert!(g.edges().is_empty());
        assert_eq!(g.node_features().data(), &[0.0, 0.0, 1.0, 1.0, 0.0]);
        let padded = build_modality_graph("p", &payload, 8).unwrap();
        assert_eq!(padded.feature_dim(), 8);
        let bad = RawPayload::Clinical {
            levels: vec![3, 0],
            cardinalities: vec![3, 2],
        };
        assert!(build_modality_graph("p", &bad, 8).is_err());
    }

    #[test]
    fn padding_rules() {
        let feats = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0, 5.0]]).unwrap();
        let g = ModalityGraph::new(ModalityKind::Clinical, "p", feats, vec![]).unwrap();
        let p = pad_features(g.clone(), 8).unwrap();
        assert_eq!(p.node_features().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 0.0, 0.0, 0.0]);
        assert_eq!(pad_features(g.clone(), 5).unwrap(), g);
        assert!(pad_features(g, 4).is_err());

        let wide = ModalityGraph::new(
            ModalityKind::Genomic,
            "p",
            Tensor::zeros(&[5, 1024]),
            complete_edges(5),
        )
        .unwrap();
        assert_eq!(pad_features(wide.clone(), 1024).unwrap(), wide);
    }

    #[test]
    fn isolated_node_sees_zero_mean() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
        // W = [I; 5I]: the neighbour half must contribute nothing.
        let w = t.constant(
            Tensor::from_rows(&[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![5.0, 0.0],
                vec![0.0, 5.0],
            ])
            .unwrap(),
        );
        let h = sage_forward(&mut t, x, &[vec![]], &[w]).unwrap();
        assert_eq!(t.value(h).data(), &[1.0, 0.0]);
    }

    #[test]
    fn k5_one_hot_neighbour_means() {
        // Identity-block W picks out the neighbour mean: each node sees the
        // average of the other four one-hots, i.e. 0.25 off its own slot.
        let feats: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..5).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        let mut wdata = vec![0.0; 10 * 5];
        for j in 0..5 {
            wdata[(5 + j) * 5 + j] = 1.0;
        }
        let g = ModalityGraph::new(
            ModalityKind::Genomic,
            "p",
            Tensor::from_rows(&feats).unwrap(),
            complete_edges(5),
        )
        .unwrap();
        let mut t = Tape::new();
        let x = t.constant(g.node_features().clone());
        let w = t.constant(Tensor::matrix(10, 5, wdata).unwrap());
        let h = sage_forward(&mut t, x, g.neighbors(), &[w]).unwrap();
        let out = t.value(h);
        for i in 0..5 {
            for j in 0..5 {
                let expected = if i == j { 0.0 } else { 0.25 };
                assert_eq!(out.get(i, j), expected);
            }
        }
    }

    #[test]
    fn path_graph_symmetry() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let sage = SageParams::register(&mut store, "g", 3, 4, 2, &mut rng).unwrap();
        let mut t = Tape::new();
        let ws = sage.bind(&mut t, &store);
        let x = t.constant(Tensor::from_rows(&vec![vec![0.3, -1.0, 2.0]; 2]).unwrap());
        let h = sage_forward(&mut t, x, &[vec![1], vec![0]], &ws).unwrap();
        let out = t.value(h);
        assert_eq!(out.row(0), out.row(1));
    }

    use rand::SeedableRng;

    fn pool_weights(t: &mut Tape, score_scale: f64) -> PoolWeights {
        // d_model = 2, hidden = 1: score(v) = score_scale * relu(v[0]).
        PoolWeights {
            w1: t.constant(Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap()),
            b1: t.constant(Tensor::vector(vec![0.0])),
            w2: t.constant(Tensor::matrix(1, 1, vec![score_scale]).unwrap()),
            b2: t.constant(Tensor::vector(vec![0.0])),
        }
    }

    #[test]
    fn pool_two_nodes_known_weights() {
        let mut t = Tape::new();
        let w = pool_weights(&mut t, 3f64.ln());
        let v = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let out = attention_pool(&mut t, v, &w).unwrap();
        let d = t.value(out).data();
        assert!((d[0] - 0.75).abs() < 1e-15 && (d[1] - 0.25).abs() < 1e-15, "{d:?}");
    }

    #[test]
    fn pool_singleton_and_identical() {
        let mut t = Tape::new();
        let w = pool_weights(&mut t, 2.0);
        let v = t.constant(Tensor::from_rows(&[vec![0.4, -3.0]]).unwrap());
        let out = attention_pool(&mut t, v, &w).unwrap();
        assert_eq!(t.value(out).data(), &[0.4, -3.0]);

        let v = t.constant(Tensor::from_rows(&vec![vec![0.5, 1.5]; 4]).unwrap());
        let out = attention_pool(&mut t, v, &w).unwrap();
        for (a, b) in t.value(out).data().iter().zip([0.5, 1.5]) {
            assert!((a - b).abs() < 1e-15);
        }

        let empty = t.constant(Tensor::zeros(&[0, 2]));
        assert!(attention_pool(&mut t, empty, &w).is_err());
    }

    #[test]
    fn sage_rejects_bad_weights() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 3]));
        let w = t.constant(Tensor::zeros(&[5, 4]));
        assert!(sage_forward(&mut t, x, &[vec![1], vec![0]], &[w]).is_err());
    }

    #[test]
    fn batch_encoding_matches_single() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let enc = ModalityEncoder::register(&mut store, ModalityKind::Genomic, 3, 4, 2, &mut rng)
            .unwrap();
        let graphs: Vec<ModalityGraph> = (0..3)
            .map(|p| {
                let emb = (0..GENOMIC_NODES)
                    .map(|i| (0..3).map(|j| ((p * 7 + i * 3 + j) as f64).sin()).collect())
                    .collect();
                build_modality_graph("p", &RawPayload::Genomic { embeddings: emb }, 3).unwrap()
            })
            .collect();
        let mut t = Tape::new();
        let bound = enc.bind(&mut t, &store);
        let refs: Vec<&ModalityGraph> = graphs.iter().collect();
        let batch = bound.encode_batch(&mut t, &refs).unwrap();
        for (g, b) in graphs.iter().zip(batch) {
            let single = bound.encode(&mut t, g).unwrap();
            for (x, y) in t.value(single).data().iter().zip(t.value(b).data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
