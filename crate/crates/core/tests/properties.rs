use std::collections::BTreeMap;

use censurv::bipartite::{alignment_loss, PatientEmbeddingPair};
use censurv::diffcore::{Tape, Tensor};
use censurv::ecmc::{dmac_update, rank_by_risk, relabel, ConfidenceTracker, EcmcConfig};
use censurv::modality::{attention_pool, sage_forward, PoolWeights};
use censurv::pipeline::{total_loss, TrainConfig};
use censurv::survstat::{concordance_index, cox_loss_value, kaplan_meier, RiskScores, SurvivalRecord};
use proptest::prelude::*;

fn cohort(max: usize) -> impl Strategy<Value = Vec<SurvivalRecord>> {
    prop::collection::vec((1u32..40, any::<bool>()), 2..max).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (t, e))| SurvivalRecord::new(format!("p{i:03}"), f64::from(t) * 0.5, e).unwrap())
            .collect()
    })
}

fn scores(records: &[SurvivalRecord], risk: impl Fn(usize) -> f64) -> RiskScores {
    RiskScores::from_pairs(records.iter().enumerate().map(|(i, r)| (r.patient_id.clone(), risk(i)))).unwrap()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn cindex_ignores_monotone_transforms(
        recs in cohort(30),
        raw in prop::collection::vec(-3.0f64..3.0, 30),
        scale in 0.1f64..5.0,
        shift in -10.0f64..10.0,
    ) {
        let base = scores(&recs, |i| raw[i]);
        let moved = scores(&recs, |i| (scale * raw[i] + shift).exp());
        match (concordance_index(&recs, &base), concordance_index(&recs, &moved)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "{other:?}"),
        }
    }

    #[test]
    fn negated_scores_complement_without_ties(
        recs in cohort(30),
        perm in Just((0..30).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let risk = |i: usize| perm[i] as f64;
        let up = scores(&recs, risk);
        let down = scores(&recs, |i| -risk(i));
        if let (Ok(a), Ok(b)) = (concordance_index(&recs, &up), concordance_index(&recs, &down)) {
            prop_assert!((a + b - 1.0).abs() < 1e-12, "{a} + {b}");
        }
    }

    #[test]
    fn cox_loss_is_shift_invariant(
        recs in cohort(20),
        raw in prop::collection::vec(-3.0f64..3.0, 20),
        shift in -20.0f64..20.0,
    ) {
        let a = cox_loss_value(&recs, &scores(&recs, |i| raw[i])).unwrap();
        let b = cox_loss_value(&recs, &scores(&recs, |i| raw[i] + shift)).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn kaplan_meier_is_monotone_in_unit_interval(recs in cohort(40)) {
        let curve = kaplan_meier(&recs).unwrap();
        let mut prev = (0.0, 1.0);
        for p in curve {
            prop_assert!(p.time > prev.0);
            prop_assert!(p.survival <= prev.1 && p.survival >= 0.0);
            prev = (p.time, p.survival);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(x in matrix(4, 6)) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v, 1).unwrap();
        for r in 0..4 {
            let row = tape.value(s).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p > 0.0));
        }
    }

    #[test]
    fn attention_pool_is_convex_combination(
        nodes in matrix(5, 3),
        w1 in matrix(3, 2),
        b1 in prop::collection::vec(-1.0f64..1.0, 2),
        w2 in matrix(2, 1),
    ) {
        let mut tape = Tape::new();
        let n = tape.constant(nodes.clone());
        let w = PoolWeights {
            w1: tape.constant(w1),
            b1: tape.constant(Tensor::vector(b1)),
            w2: tape.constant(w2),
            b2: tape.constant(Tensor::vector(vec![0.3])),
        };
        let out = attention_pool(&mut tape, n, &w).unwrap();
        prop_assert_eq!(tape.shape(out), &[1, 3]);
        for c in 0..3 {
            let col: Vec<f64> = (0..5).map(|r| nodes.get(r, c)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = tape.value(out).get(0, c);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn sage_is_permutation_equivariant(
        feats in matrix(5, 2),
        w0 in matrix(4, 3),
        w1 in matrix(6, 3),
        edges in prop::collection::vec((0usize..5, 0usize..5), 0..10),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let mut nbrs = vec![Vec::new(); 5];
        for (a, b) in edges {
            if a != b && !nbrs[a].contains(&b) {
                nbrs[a].push(b);
                nbrs[b].push(a);
            }
        }
        // row i of the permuted graph is node perm[i] of the original
        let mut inv = [0; 5];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let pnbrs: Vec<Vec<usize>> = perm.iter().map(|&p| nbrs[p].iter().map(|&u| inv[u]).collect()).collect();
        let prows: Vec<Vec<f64>> = perm.iter().map(|&p| feats.row(p).to_vec()).collect();

        let mut tape = Tape::new();
        let layers = [tape.constant(w0), tape.constant(w1)];
        let x = tape.constant(feats);
        let px = tape.constant(Tensor::from_rows(&prows).unwrap());
        let a = sage_forward(&mut tape, x, &nbrs, &layers).unwrap();
        let b = sage_forward(&mut tape, px, &pnbrs, &layers).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (u, v) in tape.value(b).row(i).iter().zip(tape.value(a).row(p)) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn total_loss_gradient_is_linear(alpha in 0.0f64..10.0, beta in 0.0f64..10.0, c in -5.0f64..5.0, d in -5.0f64..5.0) {
        let config = TrainConfig { alpha, beta, ..TrainConfig::default() };
        let mut tape = Tape::new();
        let cox = tape.leaf(Tensor::scalar(c));
        let cia = tape.leaf(Tensor::scalar(d));
        let l = total_loss(&mut tape, cox, cia, &config).unwrap();
        prop_assert!((tape.value(l).item() - (alpha * c + beta * d)).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        prop_assert!((g.wrt(&tape, cox).item() - alpha).abs() < 1e-12);
        prop_assert!((g.wrt(&tape, cia).item() - beta).abs() < 1e-12);
    }

    #[test]
    fn aligned_views_minimise_alignment_loss(
        z in matrix(5, 4),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        phi in 0.05f64..2.0,
    ) {
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&p| z.row(p).to_vec()).collect();
        let mut tape = Tape::new();
        let a = tape.constant(z.clone());
        let b = tape.constant(z);
        let s = tape.constant(Tensor::from_rows(&shuffled).unwrap());
        let same = alignment_loss(&mut tape, PatientEmbeddingPair { complete: a, incomplete: b }, phi).unwrap();
        let mixed = alignment_loss(&mut tape, PatientEmbeddingPair { complete: a, incomplete: s }, phi).unwrap();
        prop_assert!(tape.value(same).item() <= tape.value(mixed).item() + 1e-9);
    }

    #[test]
    fn confidence_stays_in_unit_interval(
        epochs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 8), 1..12),
        lambda in 0.0f64..1.0,
    ) {
        let ids: Vec<String> = (0..8).map(|i| format!("p{i}")).collect();
        let mut tracker = ConfidenceTracker::new(ids.iter().cloned(), lambda).unwrap();
        for risks in epochs {
            let s = RiskScores::from_pairs(ids.iter().cloned().zip(risks)).unwrap();
            dmac_update(&mut tracker, &rank_by_risk(&s)).unwrap();
            for tau in tracker.taus().values() {
                prop_assert!((0.0..=1.0).contains(tau));
            }
        }
    }

    #[test]
    fn relabel_only_extends_censored_times(
        recs in cohort(25),
        raw in prop::collection::vec(-3.0f64..3.0, 25),
        k in 1usize..6,
    ) {
        let s = scores(&recs, |i| raw[i]);
        let config = EcmcConfig { k, ..EcmcConfig::default() };
        let before = concordance_index(&recs, &s).ok();
        for r in recs.iter().filter(|r| r.is_censored()) {
            let d = relabel(&r.patient_id, &recs, &s, &config).unwrap();
            prop_assert_eq!(d.old_time, r.time);
            if d.applied {
                prop_assert!(d.new_time > d.old_time);
                prop_assert!(recs.iter().any(|o| o.time == d.new_time));
            } else {
                prop_assert_eq!(d.new_time, d.old_time);
            }
        }
        prop_assert_eq!(concordance_index(&recs, &s).ok(), before);
    }
}

#[test]
fn backward_is_linear_in_the_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(2, 3, vec![0.3, -1.2, 0.7, 2.0, -0.4, 0.1]).unwrap());
    let y = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 0.5, -0.3, 0.8, 0.2, -1.1]).unwrap());
    let m = tape.matmul(x, y).unwrap();
    let f = tape.log_sum_exp(m, 1).unwrap();
    let f = tape.sum(f);
    let s = tape.softmax(m, 0).unwrap();
    let g = tape.mul(s, m).unwrap();
    let g = tape.sum(g);
    let fa = tape.scale(f, 2.5);
    let gb = tape.scale(g, -0.75);
    let h = tape.add(fa, gb).unwrap();

    let grads: BTreeMap<&str, _> = [("f", f), ("g", g), ("h", h)]
        .into_iter()
        .map(|(k, v)| (k, tape.backward(v).unwrap()))
        .collect();
    for leaf in [x, y] {
        let gf = grads["f"].wrt(&tape, leaf);
        let gg = grads["g"].wrt(&tape, leaf);
        let gh = grads["h"].wrt(&tape, leaf);
        for ((a, b), c) in gf.data().iter().zip(gg.data()).zip(gh.data()) {
            assert!((2.5 * a - 0.75 * b - c).abs() < 1e-12);
        }
    }
}
