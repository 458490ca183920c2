//! Survival statistics: Harrell's C-index, Cox partial-likelihood loss,
//! Kaplan-Meier curves and the two-group logrank test.
//!
//! Event convention: `event == true` means death was observed (uncensored).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub patient_id: String,
    /// Months; strictly positive.
    pub time: f64,
    /// True when death was observed.
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(patient_id: impl Into<String>, time: f64, event: bool) -> Result<Self> {
        let patient_id = patient_id.into();
        if !(time.is_finite() && time > 0.0) {
            return Err(Error::invalid(format!(
                "patient {patient_id}: survival time must be positive, got {time}"
            )));
        }
        Ok(Self {
            patient_id,
            time,
            event,
        })
    }

    pub fn is_censored(&self) -> bool {
        !self.event
    }
}

/// Predicted risk per patient; higher means worse prognosis.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RiskScores(BTreeMap<String, f64>);

impl RiskScores {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, patient_id: impl Into<String>, risk: f64) -> Result<()> {
        let id = patient_id.into();
        if !risk.is_finite() {
            return Err(Error::invalid(format!("patient {id}: non-finite risk {risk}")));
        }
        self.0.insert(id, risk);
        Ok(())
    }

    pub fn from_pairs<I, S>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut out = Self::new();
        for (id, r) in pairs {
            out.insert(id, r)?;
        }
        Ok(out)
    }

    pub fn get(&self, patient_id: &str) -> Option<f64> {
        self.0.get(patient_id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Risk for every record, in record order.
    pub fn aligned(&self, records: &[SurvivalRecord]) -> Result<Vec<f64>> {
        records
            .iter()
            .map(|r| {
                self.get(&r.patient_id)
                    .ok_or_else(|| Error::invalid(format!("no risk score for patient {}", r.patient_id)))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSplit {
    pub high_risk: BTreeSet<String>,
    pub low_risk: BTreeSet<String>,
}

impl GroupSplit {
    /// High risk = strictly above the median score; the rest are low risk.
    pub fn by_median(scores: &RiskScores) -> Self {
        let mut vals: Vec<f64> = scores.iter().map(|(_, r)| r).collect();
        vals.sort_by(f64::total_cmp);
        let n = vals.len();
        let median = if n == 0 {
            0.0
        } else if n % 2 == 1 {
            vals[n / 2]
        } else {
            0.5 * (vals[n / 2 - 1] + vals[n / 2])
        };
        let (high, low): (Vec<_>, Vec<_>) = scores.iter().partition(|(_, r)| *r > median);
        Self {
            high_risk: high.into_iter().map(|(id, _)| id.to_string()).collect(),
            low_risk: low.into_iter().map(|(id, _)| id.to_string()).collect(),
        }
    }
}

/// Harrell's concordance counted in half-units so ties compare exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairCounts {
    /// Twice the concordant weight (concordant = 2, tied risk = 1).
    pub concordant2: u64,
    pub comparable: u64,
}

impl PairCounts {
    pub fn cindex(self) -> Result<f64> {
        if self.comparable == 0 {
            return Err(Error::UndefinedConcordance);
        }
        Ok(self.concordant2 as f64 / (2 * self.comparable) as f64)
    }

    pub fn add(self, other: PairCounts) -> PairCounts {
        PairCounts {
            concordant2: self.concordant2 + other.concordant2,
            comparable: self.comparable + other.comparable,
        }
    }

    pub fn sub(self, other: PairCounts) -> PairCounts {
        PairCounts {
            concordant2: self.concordant2 - other.concordant2,
            comparable: self.comparable - other.comparable,
        }
    }

    /// Exact ordering of the two C-indices. `None` if either is undefined.
    pub fn cmp_cindex(self, other: PairCounts) -> Option<std::cmp::Ordering> {
        if self.comparable == 0 || other.comparable == 0 {
            return None;
        }
        let lhs = self.concordant2 as u128 * other.comparable as u128;
        let rhs = other.concordant2 as u128 * self.comparable as u128;
        Some(lhs.cmp(&rhs))
    }
}

/// Contribution of the ordered pair (earlier, later) to Harrell's C.
#[inline]
pub(crate) fn pair_counts(ti: f64, ei: bool, ri: f64, tj: f64, ej: bool, rj: f64) -> PairCounts {
    let (t_a, e_a, r_a, t_b, r_b) = if ti < tj {
        (ti, ei, ri, tj, rj)
    } else {
        (tj, ej, rj, ti, ri)
    };
    if !(t_a < t_b && e_a) {
        return PairCounts::default();
    }
    let concordant2 = if r_a > r_b {
        2
    } else if r_a == r_b {
        1
    } else {
        0
    };
    PairCounts {
        concordant2,
        comparable: 1,
    }
}

/// Pair counts over all unordered pairs of `(time, event, risk)` triples.
pub fn concordance_counts(rows: &[(f64, bool, f64)]) -> PairCounts {
    let mut acc = PairCounts::default();
    for i in 0..rows.len() {
        let (ti, ei, ri) = rows[i];
        for &(tj, ej, rj) in &rows[i + 1..] {
            acc = acc.add(pair_counts(ti, ei, ri, tj, ej, rj));
        }
    }
    acc
}

/// Harrell's C-index. A pair is comparable when the shorter time is an event;
/// tied risks earn half credit and tied times are never comparable.
pub fn concordance_index(records: &[SurvivalRecord], scores: &RiskScores) -> Result<f64> {
    let risks = scores.aligned(records)?;
    let rows: Vec<(f64, bool, f64)> = records
        .iter()
        .zip(&risks)
        .map(|(r, s)| (r.time, r.event, *s))
        .collect();
    concordance_counts(&rows).cindex()
}

/// Cox negative log partial likelihood (Breslow ties) on the tape.
///
/// `risks` is a rank-1 var aligned with `records`. A batch without events
/// returns an exact zero that carries no gradient.
pub fn cox_loss(tape: &mut Tape, risks: Var, records: &[SurvivalRecord]) -> Result<Var> {
    let shape = tape.shape(risks).to_vec();
    if records.is_empty() {
        return Err(Error::invalid("cox_loss on an empty batch"));
    }
    if shape != [records.len()] {
        return Err(Error::Shape {
            op: "cox_loss",
            shapes: vec![shape, vec![records.len()]],
        });
    }
    let mut total: Option<Var> = None;
    for (i, rec) in records.iter().enumerate().filter(|(_, r)| r.event) {
        let risk_set: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.time >= rec.time)
            .map(|(j, _)| j)
            .collect();
        let members = tape.index_select(risks, &risk_set)?;
        let lse = tape.log_sum_exp(members, 0)?;
        let own = tape.index_select(risks, &[i])?;
        let term = tape.sub(lse, own)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(v) => tape.reshape(v, &[])?,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

/// Value-only Cox loss for scored records.
pub fn cox_loss_value(records: &[SurvivalRecord], scores: &RiskScores) -> Result<f64> {
    let risks = scores.aligned(records)?;
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::vector(risks));
    let l = cox_loss(&mut tape, r, records)?;
    Ok(tape.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmPoint {
    pub time: f64,
    pub survival: f64,
}

/// Product-limit estimate with one point per distinct observed time.
pub fn kaplan_meier(records: &[SurvivalRecord]) -> Result<Vec<KmPoint>> {
    if records.is_empty() {
        return Err(Error::invalid("kaplan_meier on empty input"));
    }
    let mut sorted: Vec<&SurvivalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut at_risk = sorted.len();
    let mut surv = 1.0;
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time;
        let mut deaths = 0;
        let mut leaving = 0;
        while i < sorted.len() && sorted[i].time == t {
            deaths += usize::from(sorted[i].event);
            leaving += 1;
            i += 1;
        }
        if deaths > 0 {
            surv *= 1.0 - deaths as f64 / at_risk as f64;
        }
        out.push(KmPoint { time: t, survival: surv });
        at_risk -= leaving;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogrankResult {
    pub chi_square: f64,
    pub p_value: f64,
}

/// Upper tail of chi-square with one degree of freedom.
pub fn chi2_1df_sf(chi_square: f64) -> f64 {
    statrs::function::erf::erfc((chi_square / 2.0).sqrt())
}

/// Two-group logrank test (1 df).
pub fn logrank_test(records: &[SurvivalRecord], split: &GroupSplit) -> Result<LogrankResult> {
    if split.high_risk.is_empty() || split.low_risk.is_empty() {
        return Err(Error::LogrankUndefined("empty group".into()));
    }
    if !split.high_risk.is_disjoint(&split.low_risk) {
        return Err(Error::invalid("logrank groups overlap"));
    }
    let mut rows: Vec<(f64, bool, bool)> = Vec::new();
    for r in records {
        let in_high = split.high_risk.contains(&r.patient_id);
        if in_high || split.low_risk.contains(&r.patient_id) {
            rows.push((r.time, r.event, in_high));
        }
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut n = rows.len() as f64;
    let mut n1 = rows.iter().filter(|r| r.2).count() as f64;
    let (mut o_minus_e, mut var) = (0.0, 0.0);
    let mut i = 0;
    while i < rows.len() {
        let t = rows[i].0;
        let (mut d, mut d1, mut leave, mut leave1) = (0.0, 0.0, 0.0, 0.0);
        while i < rows.len() && rows[i].0 == t {
            let (_, ev, hi) = rows[i];
            if ev {
                d += 1.0;
                if hi {
                    d1 += 1.0;
                }
            }
            leave += 1.0;
            if hi {
                leave1 += 1.0;
            }
            i += 1;
        }
        if d > 0.0 {
            o_minus_e += d1 - d * n1 / n;
            if n > 1.0 {
                var += d * (n1 / n) * (1.0 - n1 / n) * (n - d) / (n - 1.0);
            }
        }
        n -= leave;
        n1 -= leave1;
    }
    if var <= 0.0 {
        return Err(Error::LogrankUndefined("zero variance".into()));
    }
    let chi_square = o_minus_e * o_minus_e / var;
    Ok(LogrankResult {
        chi_square,
        p_value: chi2_1df_sf(chi_square),
    })
}
