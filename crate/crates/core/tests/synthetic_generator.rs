use censurv::dataio::{generate_synthetic, SyntheticConfig};
use censurv::modality::{ModalityKind, RawPayload};

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0;
        for k in &idx[i..=j] {
            out[*k] = mid;
        }
        i = j + 1;
    }
    out
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn higher_risk_means_shorter_survival() {
    // with one latent factor and no feature noise the clinical level is a
    // monotone function of the latent risk
    for shape in [1.0, 3.0] {
        let cohort = generate_synthetic(&SyntheticConfig {
            num_patients: 2000,
            hazard_weights: vec![1.0],
            feature_noise: 0.0,
            clinical_cardinalities: vec![1000],
            time_shape: shape,
            seed: 17,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let (mut level, mut truth) = (Vec::new(), Vec::new());
        for p in &cohort.patients {
            let Some(RawPayload::Clinical { levels, .. }) = p.payloads.get(&ModalityKind::Clinical) else {
                panic!("clinical payload missing");
            };
            level.push(levels[0] as f64);
            truth.push(p.true_time.unwrap());
        }
        let rho = spearman(&level, &truth);
        assert!(rho < -0.3, "shape {shape}: rank correlation {rho}");
    }
}

#[test]
fn censored_times_precede_truth() {
    for seed in 0..5 {
        let cohort = generate_synthetic(&SyntheticConfig {
            num_patients: 400,
            censor_rate: 0.6,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap();
        for p in &cohort.patients {
            let truth = p.true_time.unwrap();
            if p.record.event {
                assert_eq!(p.record.time, truth);
            } else {
                assert!(p.record.time > 0.0 && p.record.time < truth);
            }
        }
    }
}
