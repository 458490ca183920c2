//! Event-conditional modelling of censoring.
//!
//! Each epoch, every training patient's position in the predicted-risk order
//! is compared with the previous epoch. Stable positions build up a momentum
//! confidence `tau`. Censored patients with the highest `tau` are then given a
//! surrogate event time: the neighbouring observed time (within `k` positions
//! in risk order) that maximises the training C-index.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::survstat::{pair_counts, PairCounts, RiskScores, SurvivalRecord};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcmcConfig {
    /// Half-width of the candidate window in risk order.
    pub k: usize,
    /// Fraction of censored training patients relabelled per update epoch.
    pub select_fraction: f64,
    pub lambda: f64,
    pub preheat_epochs: usize,
    pub total_epochs: usize,
}

impl Default for EcmcConfig {
    fn default() -> Self {
        Self {
            k: 5,
            select_fraction: 0.25,
            lambda: 0.4,
            preheat_epochs: 60,
            total_epochs: 120,
        }
    }
}

impl EcmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("ECMC window k must be positive"));
        }
        if !(self.select_fraction > 0.0 && self.select_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "select_fraction {} outside (0, 1]",
                self.select_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.preheat_epochs > self.total_epochs {
            return Err(Error::invalid(format!(
                "preheat epochs {} exceed total epochs {}",
                self.preheat_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Per-patient momentum confidence from rank stability across epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceTracker {
    tau: BTreeMap<String, f64>,
    previous_rank: BTreeMap<String, usize>,
    lambda: f64,
    epoch: usize,
}

impl ConfidenceTracker {
    pub fn new<I, S>(patient_ids: I, lambda: f64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(Self {
            tau: patient_ids.into_iter().map(|id| (id.into(), 0.0)).collect(),
            previous_rank: BTreeMap::new(),
            lambda,
            epoch: 0,
        })
    }

    /// Records the epoch-0 ordering that the first update is compared against.
    pub fn set_initial_ranks(&mut self, ranks: &BTreeMap<String, usize>) {
        for id in self.tau.keys() {
            if let Some(r) = ranks.get(id) {
                self.previous_rank.insert(id.clone(), *r);
            }
        }
    }

    pub fn tau(&self, patient_id: &str) -> Option<f64> {
        self.tau.get(patient_id).copied()
    }

    pub fn taus(&self) -> &BTreeMap<String, f64> {
        &self.tau
    }

    pub fn previous_rank(&self, patient_id: &str) -> Option<usize> {
        self.previous_rank.get(patient_id).copied()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

/// 0-based positions in descending risk order; equal risks go by patient id.
pub fn rank_by_risk(scores: &RiskScores) -> BTreeMap<String, usize> {
    let mut order: Vec<(&str, f64)> = scores.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    order
        .into_iter()
        .enumerate()
        .map(|(rank, (id, _))| (id.to_string(), rank))
        .collect()
}

/// `tau <- lambda * tau + (1 - lambda) / (1 + |rank - previous_rank|)`.
///
/// A patient without a previous rank is compared against its current rank.
pub fn dmac_update(
    tracker: &mut ConfidenceTracker,
    current_ranks: &BTreeMap<String, usize>,
) -> Result<()> {
    if let Some(missing) = tracker.tau.keys().find(|id| !current_ranks.contains_key(*id)) {
        return Err(Error::invalid(format!("no rank for tracked patient {missing}")));
    }
    let lambda = tracker.lambda;
    for (id, tau) in tracker.tau.iter_mut() {
        let now = current_ranks[id];
        let before = tracker.previous_rank.get(id).copied().unwrap_or(now);
        let p = 1.0 / (1.0 + now.abs_diff(before) as f64);
        *tau = lambda * *tau + (1.0 - lambda) * p;
        tracker.previous_rank.insert(id.clone(), now);
    }
    tracker.epoch += 1;
    Ok(())
}

/// Censored patients with the highest confidence, best first.
pub fn select_reliable(
    tracker: &ConfidenceTracker,
    records: &[SurvivalRecord],
    config: &EcmcConfig,
) -> Result<Vec<String>> {
    if tracker.epoch < 1 {
        return Err(Error::invalid("confidence tracker has not been updated yet"));
    }
    let mut censored: Vec<(&str, f64)> = records
        .iter()
        .filter(|r| r.is_censored())
        .map(|r| {
            tracker
                .tau(&r.patient_id)
                .map(|t| (r.patient_id.as_str(), t))
                .ok_or_else(|| Error::invalid(format!("patient {} is not tracked", r.patient_id)))
        })
        .collect::<Result<_>>()?;
    censored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let take = selection_size(censored.len(), config.select_fraction);
    Ok(censored
        .into_iter()
        .take(take)
        .map(|(id, _)| id.to_string())
        .collect())
}

/// Same number of censored patients as [`select_reliable`], drawn uniformly.
pub fn select_random<R: Rng + ?Sized>(
    records: &[SurvivalRecord],
    config: &EcmcConfig,
    rng: &mut R,
) -> Vec<String> {
    let mut censored: Vec<String> = records
        .iter()
        .filter(|r| r.is_censored())
        .map(|r| r.patient_id.clone())
        .collect();
    let take = selection_size(censored.len(), config.select_fraction);
    censored.shuffle(rng);
    censored.truncate(take);
    censored
}

fn selection_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).min(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelabelDecision {
    pub patient_id: String,
    pub old_time: f64,
    pub new_time: f64,
    pub applied: bool,
}

/// Shared pair counts for evaluating many relabels against one snapshot.
struct Snapshot<'a> {
    records: &'a [SurvivalRecord],
    risks: Vec<f64>,
    /// Positions in descending risk order (ties by id).
    order: Vec<usize>,
    position: Vec<usize>,
    totals: PairCounts,
}

impl<'a> Snapshot<'a> {
    fn new(records: &'a [SurvivalRecord], scores: &RiskScores) -> Result<Self> {
        let risks = scores.aligned(records)?;
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by(|&a, &b| {
            risks[b]
                .total_cmp(&risks[a])
                .then_with(|| records[a].patient_id.cmp(&records[b].patient_id))
        });
        let mut position = vec![0; records.len()];
        for (pos, &i) in order.iter().enumerate() {
            position[i] = pos;
        }
        let rows: Vec<(f64, bool, f64)> = records
            .iter()
            .zip(&risks)
            .map(|(r, s)| (r.time, r.event, *s))
            .collect();
        let totals = crate::survstat::concordance_counts(&rows);
        Ok(Self {
            records,
            risks,
            order,
            position,
            totals,
        })
    }

    /// Counts over pairs that involve `idx` when it carries (`time`, `event`).
    fn involving(&self, idx: usize, time: f64, event: bool) -> PairCounts {
        let ri = self.risks[idx];
        self.records
            .iter()
            .zip(&self.risks)
            .enumerate()
            .filter(|(j, _)| *j != idx)
            .fold(PairCounts::default(), |acc, (_, (r, rj))| {
                acc.add(pair_counts(time, event, ri, r.time, r.event, *rj))
            })
    }

    fn relabel(&self, patient: &str, k: usize) -> Result<RelabelDecision> {
        let idx = self
            .records
            .iter()
            .position(|r| r.patient_id == patient)
            .ok_or_else(|| Error::invalid(format!("patient {patient} not in training set")))?;
        let rec = &self.records[idx];
        if !rec.is_censored() {
            return Err(Error::invalid(format!("patient {patient} is not censored")));
        }
        let pos = self.position[idx];
        let lo = pos.saturating_sub(k);
        let hi = (pos + k).min(self.order.len() - 1);
        let mut candidates: Vec<f64> = (lo..=hi)
            .filter(|p| *p != pos)
            .map(|p| self.records[self.order[p]].time)
            .filter(|t| *t > rec.time)
            .collect();
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();

        let rest = self.totals.sub(self.involving(idx, rec.time, rec.event));
        let mut best: Option<(f64, PairCounts)> = None;
        for t in candidates {
            let counts = rest.add(self.involving(idx, t, true));
            let better = match best {
                None => counts.comparable > 0,
                Some((_, b)) => counts.cmp_cindex(b) == Some(std::cmp::Ordering::Greater),
            };
            if better {
                best = Some((t, counts));
            }
        }
        Ok(match best {
            Some((t, _)) => RelabelDecision {
                patient_id: patient.to_string(),
                old_time: rec.time,
                new_time: t,
                applied: true,
            },
            None => RelabelDecision {
                patient_id: patient.to_string(),
                old_time: rec.time,
                new_time: rec.time,
                applied: false,
            },
        })
    }
}

/// Surrogate event time for one censored patient.
///
/// Candidates are the observed times of the patients within `config.k`
/// positions on either side in descending-risk order, restricted to times
/// beyond the censoring time. The candidate giving the highest C-index over
/// `records` wins; ties go to the earliest time.
pub fn relabel(
    patient: &str,
    records: &[SurvivalRecord],
    scores: &RiskScores,
    config: &EcmcConfig,
) -> Result<RelabelDecision> {
    Snapshot::new(records, scores)?.relabel(patient, config.k)
}

/// [`relabel`] for several patients against the same labels and scores.
pub fn relabel_all(
    patients: &[String],
    records: &[SurvivalRecord],
    scores: &RiskScores,
    config: &EcmcConfig,
) -> Result<Vec<RelabelDecision>> {
    let snap = Snapshot::new(records, scores)?;
    patients.iter().map(|p| snap.relabel(p, config.k)).collect()
}

/// Copy of `records` with every applied decision turned into an event.
pub fn apply_relabels(
    records: &[SurvivalRecord],
    decisions: &[RelabelDecision],
) -> Result<Vec<SurvivalRecord>> {
    let mut out = records.to_vec();
    let index: BTreeMap<&str, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.patient_id.as_str(), i))
        .collect();
    let mut seen = BTreeSet::new();
    for d in decisions.iter().filter(|d| d.applied) {
        let &i = index
            .get(d.patient_id.as_str())
            .ok_or_else(|| Error::invalid(format!("relabel targets unknown patient {}", d.patient_id)))?;
        if !records[i].is_censored() {
            return Err(Error::invalid(format!(
                "relabel targets uncensored patient {}",
                d.patient_id
            )));
        }
        if !seen.insert(i) {
            return Err(Error::invalid(format!("patient {} relabelled twice", d.patient_id)));
        }
        if !(d.new_time > records[i].time) {
            return Err(Error::invalid(format!(
                "relabel of {} does not extend its censored time",
                d.patient_id
            )));
        }
        out[i].time = d.new_time;
        out[i].event = true;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survstat::concordance_index;

    fn recs(rows: &[(f64, bool)]) -> Vec<SurvivalRecord> {
        rows.iter()
            .enumerate()
            .map(|(i, (t, e))| SurvivalRecord::new(format!("p{i}"), *t, *e).unwrap())
            .collect()
    }

    fn scores(risks: &[f64]) -> RiskScores {
        RiskScores::from_pairs(risks.iter().enumerate().map(|(i, r)| (format!("p{i}"), *r))).unwrap()
    }

    fn ranks(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn dmac_single_step() {
        let mut t = ConfidenceTracker::new(["a", "b"], 0.4).unwrap();
        t.set_initial_ranks(&ranks(&[("a", 0), ("b", 1)]));
        dmac_update(&mut t, &ranks(&[("a", 1), ("b", 0)])).unwrap();
        assert!((t.tau("a").unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(t.epoch(), 1);
    }

    #[test]
    fn dmac_stable_ranks_geometric() {
        let mut t = ConfidenceTracker::new(["a"], 0.4).unwrap();
        let r = ranks(&[("a", 0)]);
        dmac_update(&mut t, &r).unwrap();
        assert!((t.tau("a").unwrap() - 0.6).abs() < 1e-15);
        dmac_update(&mut t, &r).unwrap();
        assert!((t.tau("a").unwrap() - 0.84).abs() < 1e-15);
        for _ in 0..60 {
            dmac_update(&mut t, &r).unwrap();
        }
        assert!((t.tau("a").unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dmac_lambda_one_freezes() {
        let mut t = ConfidenceTracker::new(["a"], 1.0).unwrap();
        for e in 0..5 {
            dmac_update(&mut t, &ranks(&[("a", e)])).unwrap();
        }
        assert_eq!(t.tau("a").unwrap(), 0.0);
    }

    #[test]
    fn dmac_missing_rank_errors() {
        let mut t = ConfidenceTracker::new(["a", "b"], 0.4).unwrap();
        assert!(dmac_update(&mut t, &ranks(&[("a", 0)])).is_err());
        assert_eq!(t.epoch(), 0);
    }

    #[test]
    fn ranks_break_ties_by_id() {
        let s = RiskScores::from_pairs([("b", 1.0), ("a", 1.0), ("c", 2.0)]).unwrap();
        let r = rank_by_risk(&s);
        assert_eq!(r["c"], 0);
        assert_eq!(r["a"], 1);
        assert_eq!(r["b"], 2);
    }

    fn tracker_with(taus: &[(&str, f64)]) -> ConfidenceTracker {
        let mut t = ConfidenceTracker::new(taus.iter().map(|(k, _)| *k), 0.4).unwrap();
        for (k, v) in taus {
            t.tau.insert(k.to_string(), *v);
        }
        t.epoch = 1;
        t
    }

    #[test]
    fn selection_top_fraction() {
        let r = recs(&[(1.0, false), (2.0, false), (3.0, false), (4.0, false), (5.0, true)]);
        let t = tracker_with(&[("p0", 0.9), ("p1", 0.1), ("p2", 0.8), ("p3", 0.2), ("p4", 1.0)]);
        let cfg = EcmcConfig {
            select_fraction: 0.5,
            ..EcmcConfig::default()
        };
        assert_eq!(select_reliable(&t, &r, &cfg).unwrap(), vec!["p0", "p2"]);
        let cfg = EcmcConfig {
            select_fraction: 1.0,
            ..EcmcConfig::default()
        };
        assert_eq!(select_reliable(&t, &r, &cfg).unwrap(), vec!["p0", "p2", "p3", "p1"]);

        let all_events = recs(&[(1.0, true), (2.0, true)]);
        let t = tracker_with(&[("p0", 0.5), ("p1", 0.5)]);
        assert!(select_reliable(&t, &all_events, &cfg).unwrap().is_empty());

        let fresh = ConfidenceTracker::new(["p0"], 0.4).unwrap();
        assert!(select_reliable(&fresh, &all_events, &cfg).is_err());
    }

    #[test]
    fn relabel_without_valid_candidate() {
        // Censored at 10, every neighbour dies earlier.
        let r = recs(&[(10.0, false), (2.0, true), (3.0, true), (4.0, true)]);
        let s = scores(&[0.5, 0.4, 0.6, 0.3]);
        let d = relabel("p0", &r, &s, &EcmcConfig::default()).unwrap();
        assert!(!d.applied);
        assert_eq!(apply_relabels(&r, &[d]).unwrap(), r);
    }

    #[test]
    fn relabel_forced_choice() {
        let r = recs(&[(5.0, false), (2.0, true), (9.0, true), (4.0, true)]);
        let s = scores(&[0.5, 0.9, 0.1, 0.7]);
        let d = relabel("p0", &r, &s, &EcmcConfig::default()).unwrap();
        assert!(d.applied);
        assert_eq!(d.new_time, 9.0);
        assert!(d.new_time > d.old_time);
    }

    #[test]
    fn relabel_rejects_uncensored() {
        let r = recs(&[(5.0, true), (2.0, true)]);
        assert!(relabel("p0", &r, &scores(&[0.1, 0.2]), &EcmcConfig::default()).is_err());
    }

    #[test]
    fn relabel_matches_brute_force_six_patients() {
        let r = recs(&[
            (3.0, false),
            (8.0, true),
            (5.0, true),
            (12.0, false),
            (7.0, true),
            (15.0, true),
        ]);
        let s = scores(&[0.2, 0.1, 0.9, 0.3, 0.25, -0.5]);
        let cfg = EcmcConfig {
            k: 2,
            ..EcmcConfig::default()
        };
        let d = relabel("p0", &r, &s, &cfg).unwrap();

        // Risk order: p2, p3, p4, p0, p1, p5 -> window {p3, p4, p1, p5}.
        let mut best: Option<(f64, f64)> = None;
        for t in [12.0, 7.0, 8.0, 15.0] {
            let mut trial = r.clone();
            trial[0].time = t;
            trial[0].event = true;
            let c = concordance_index(&trial, &s).unwrap();
            if best.is_none_or(|(bc, bt)| c > bc || (c == bc && t < bt)) {
                best = Some((c, t));
            }
        }
        assert!(d.applied);
        assert_eq!(d.new_time, best.unwrap().1);
    }

    #[test]
    fn apply_rewrites_only_targets() {
        let r = recs(&[(10.0, false), (3.0, true), (6.0, false)]);
        assert_eq!(apply_relabels(&r, &[]).unwrap(), r);
        let d = vec![
            RelabelDecision {
                patient_id: "p0".into(),
                old_time: 10.0,
                new_time: 14.0,
                applied: true,
            },
            RelabelDecision {
                patient_id: "p2".into(),
                old_time: 6.0,
                new_time: 7.0,
                applied: true,
            },
        ];
        let out = apply_relabels(&r, &d).unwrap();
        assert_eq!((out[0].time, out[0].event), (14.0, true));
        assert_eq!((out[2].time, out[2].event), (7.0, true));
        assert_eq!(out[1], r[1]);

        let bad = RelabelDecision {
            patient_id: "p1".into(),
            old_time: 3.0,
            new_time: 5.0,
            applied: true,
        };
        assert!(apply_relabels(&r, &[bad]).is_err());
    }
}
