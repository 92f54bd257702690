//! Evaluation and diagnostic analyses: group accuracies, risk-coverage
//! curves, entropy-quartile accuracy, and the entropy/PLPD quadrant split.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// One evaluated sample. `confidence` is metric-dependent (higher means
/// more confident): negated entropy for the entropy metric, PLPD itself
/// for the PLPD metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub confidence: f64,
    pub correct: bool,
    pub entropy: f64,
    pub plpd: f64,
    pub group_id: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GroupAccuracies {
    /// Accuracy per populated group.
    pub per_group: BTreeMap<usize, f64>,
    pub counts: BTreeMap<usize, usize>,
    /// Overall sample accuracy.
    pub average: f64,
    /// Minimum accuracy over the populated groups.
    pub worst_group: f64,
    pub worst_group_id: usize,
}

/// Accuracy per (group, correct) pair; empty input is an error.
pub fn group_accuracies(
    records: impl IntoIterator<Item = (usize, bool)>,
) -> Result<GroupAccuracies> {
    let mut correct: BTreeMap<usize, usize> = BTreeMap::new();
    let mut total: BTreeMap<usize, usize> = BTreeMap::new();
    let mut all = 0usize;
    let mut all_correct = 0usize;
    for (group, ok) in records {
        *total.entry(group).or_default() += 1;
        if ok {
            *correct.entry(group).or_default() += 1;
        }
        all += 1;
        all_correct += ok as usize;
    }
    if all == 0 {
        return Err(Error::EmptyInput("group_accuracies"));
    }
    let per_group: BTreeMap<usize, f64> = total
        .iter()
        .map(|(&g, &n)| (g, correct.get(&g).copied().unwrap_or(0) as f64 / n as f64))
        .collect();
    let (&worst_group_id, &worst_group) = per_group
        .iter()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(a.0.cmp(b.0)))
        .unwrap();
    Ok(GroupAccuracies {
        per_group,
        counts: total,
        average: all_correct as f64 / all as f64,
        worst_group,
        worst_group_id,
    })
}

/// Risk-coverage curve: records sorted by descending confidence (stable on
/// ties), `risk(k)` is the error rate among the top `k`, and the area is
/// the unweighted mean of the prefix risks.
#[derive(Debug, Clone, PartialEq)]
pub struct RCCurve {
    /// `k / N` for `k = 1..N`, strictly increasing to 1.
    pub coverage: Vec<f64>,
    pub risk: Vec<f64>,
    pub aurc: f64,
}

pub fn rc_curve(records: &[EvalRecord]) -> Result<RCCurve> {
    if records.is_empty() {
        return Err(Error::EmptyInput("rc_curve"));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps input order on equal confidence.
    order.sort_by(|&a, &b| {
        records[b]
            .confidence
            .partial_cmp(&records[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut coverage = Vec::with_capacity(n);
    let mut risk = Vec::with_capacity(n);
    let mut errors = 0usize;
    for (k, &i) in order.iter().enumerate() {
        errors += (!records[i].correct) as usize;
        coverage.push((k + 1) as f64 / n as f64);
        risk.push(errors as f64 / (k + 1) as f64);
    }
    let aurc = risk.iter().sum::<f64>() / n as f64;
    Ok(RCCurve {
        coverage,
        risk,
        aurc,
    })
}

/// Accuracy inside the four entropy-quartile bins
/// `[0,Q1) [Q1,Q2) [Q2,Q3) [Q3,inf)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct QuartileAccuracy {
    /// Q1, Q2, Q3 by linear interpolation.
    pub boundaries: [f64; 3],
    /// `None` for empty bins.
    pub accuracy: [Option<f64>; 4],
    pub counts: [usize; 4],
    /// Set when the quartiles collapse (identical entropies), leaving a
    /// single populated bin.
    pub degenerate: bool,
}

/// Linear-interpolation quantile of sorted data at probability `p`.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn entropy_quartile_accuracy(records: &[EvalRecord]) -> Result<QuartileAccuracy> {
    if records.len() < 4 {
        return Err(Error::Config(format!(
            "quartile analysis needs at least 4 records, got {}",
            records.len()
        )));
    }
    let mut entropies: Vec<f64> = records.iter().map(|r| r.entropy).collect();
    entropies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let boundaries = [
        quantile_sorted(&entropies, 0.25),
        quantile_sorted(&entropies, 0.50),
        quantile_sorted(&entropies, 0.75),
    ];
    let mut counts = [0usize; 4];
    let mut hits = [0usize; 4];
    for r in records {
        let bin = boundaries.iter().filter(|&&q| r.entropy >= q).count();
        counts[bin] += 1;
        hits[bin] += r.correct as usize;
    }
    let accuracy = std::array::from_fn(|i| {
        (counts[i] > 0).then(|| hits[i] as f64 / counts[i] as f64)
    });
    Ok(QuartileAccuracy {
        boundaries,
        accuracy,
        counts,
        degenerate: boundaries[0] == boundaries[2],
    })
}

/// Entropy/PLPD quadrant in {1,2,3,4}: low entropy means `< tau_ent`, high
/// PLPD means `> tau_plpd`. Area 1 is high-entropy/low-PLPD, area 2
/// high/high, area 3 low/low, area 4 low/high (the selected region).
pub fn area_of(entropy: f64, plpd: f64, tau_ent: f64, tau_plpd: f64) -> u8 {
    match (entropy < tau_ent, plpd > tau_plpd) {
        (false, false) => 1,
        (false, true) => 2,
        (true, false) => 3,
        (true, true) => 4,
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AreaPartition {
    /// Accuracy per area 1-4; `None` for empty areas.
    pub accuracy: [Option<f64>; 4],
    /// Fraction of records per area; sums to 1.
    pub share: [f64; 4],
    pub counts: [usize; 4],
}

pub fn area_partition(records: &[EvalRecord], tau_ent: f64, tau_plpd: f64) -> Result<AreaPartition> {
    if records.is_empty() {
        return Err(Error::EmptyInput("area_partition"));
    }
    let mut counts = [0usize; 4];
    let mut hits = [0usize; 4];
    for r in records {
        let a = area_of(r.entropy, r.plpd, tau_ent, tau_plpd) as usize - 1;
        counts[a] += 1;
        hits[a] += r.correct as usize;
    }
    let n = records.len() as f64;
    Ok(AreaPartition {
        accuracy: std::array::from_fn(|i| (counts[i] > 0).then(|| hits[i] as f64 / counts[i] as f64)),
        share: std::array::from_fn(|i| counts[i] as f64 / n),
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(confidence: f64, correct: bool) -> EvalRecord {
        EvalRecord {
            confidence,
            correct,
            entropy: 0.0,
            plpd: 0.0,
            group_id: 0,
        }
    }

    #[test]
    fn all_correct_groups_are_perfect() {
        let g = group_accuracies([(0, true), (1, true), (1, true)]).unwrap();
        assert_eq!(g.average, 1.0);
        assert_eq!(g.worst_group, 1.0);
        assert!(g.per_group.values().all(|&a| a == 1.0));
    }

    #[test]
    fn group_accuracy_counting_example() {
        // Group A: 3/4 correct, group B: 1/2 correct.
        let g = group_accuracies([
            (0, true),
            (0, true),
            (0, true),
            (0, false),
            (1, true),
            (1, false),
        ])
        .unwrap();
        assert_eq!(g.worst_group, 0.5);
        assert_eq!(g.worst_group_id, 1);
        assert!((g.average - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn single_group_worst_equals_average() {
        let g = group_accuracies([(2, true), (2, false), (2, true)]).unwrap();
        assert_eq!(g.worst_group, g.average);
    }

    #[test]
    fn worst_group_never_exceeds_average() {
        let mut rng = crate::numerics::Rng::new(50);
        for _ in 0..100 {
            let records: Vec<(usize, bool)> = (0..50)
                .map(|_| (rng.below(4), rng.bernoulli(0.7)))
                .collect();
            let g = group_accuracies(records).unwrap();
            assert!(g.worst_group <= g.average + 1e-15);
        }
    }

    #[test]
    fn rc_curve_extremes() {
        let all_right: Vec<EvalRecord> = (0..5).map(|i| rec(i as f64, true)).collect();
        assert_eq!(rc_curve(&all_right).unwrap().aurc, 0.0);
        let all_wrong: Vec<EvalRecord> = (0..5).map(|i| rec(i as f64, false)).collect();
        assert_eq!(rc_curve(&all_wrong).unwrap().aurc, 1.0);
    }

    #[test]
    fn rc_curve_hand_enumeration() {
        // Descending confidence: correct, wrong, correct.
        let records = vec![rec(3.0, true), rec(2.0, false), rec(1.0, true)];
        let curve = rc_curve(&records).unwrap();
        assert_eq!(curve.risk, vec![0.0, 0.5, 1.0 / 3.0]);
        assert!((curve.aurc - 5.0 / 18.0).abs() < 1e-15);
        assert_eq!(curve.coverage, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn rc_full_coverage_risk_is_error_rate() {
        let records = vec![
            rec(0.3, true),
            rec(0.9, false),
            rec(0.1, true),
            rec(0.5, false),
        ];
        let curve = rc_curve(&records).unwrap();
        assert_eq!(*curve.risk.last().unwrap(), 0.5);
        assert_eq!(*curve.coverage.last().unwrap(), 1.0);
    }

    #[test]
    fn aurc_invariant_under_monotone_confidence_transform() {
        let mut rng = crate::numerics::Rng::new(51);
        let records: Vec<EvalRecord> = (0..60)
            .map(|_| rec(rng.uniform(-2.0, 2.0), rng.bernoulli(0.6)))
            .collect();
        let base = rc_curve(&records).unwrap().aurc;
        let transformed: Vec<EvalRecord> = records
            .iter()
            .map(|r| EvalRecord {
                confidence: (r.confidence * 0.7).exp() + 3.0,
                ..*r
            })
            .collect();
        assert_eq!(rc_curve(&transformed).unwrap().aurc, base);
    }

    fn rec_ent(entropy: f64, correct: bool) -> EvalRecord {
        EvalRecord {
            confidence: -entropy,
            correct,
            entropy,
            plpd: 0.0,
            group_id: 0,
        }
    }

    #[test]
    fn quartile_boundaries_interpolate() {
        let records = vec![
            rec_ent(1.0, true),
            rec_ent(2.0, true),
            rec_ent(3.0, true),
            rec_ent(4.0, true),
        ];
        let q = entropy_quartile_accuracy(&records).unwrap();
        assert_eq!(q.boundaries, [1.75, 2.5, 3.25]);
        assert!(!q.degenerate);
    }

    #[test]
    fn identical_entropies_flag_degenerate() {
        let records = vec![rec_ent(0.5, true); 8];
        let q = entropy_quartile_accuracy(&records).unwrap();
        assert!(q.degenerate);
        assert_eq!(q.counts.iter().sum::<usize>(), 8);
        // Everything lands in the top bin (entropy >= all boundaries).
        assert_eq!(q.counts[3], 8);
    }

    #[test]
    fn lowest_quartile_can_be_worst() {
        // The confident quarter is all wrong, everything else all right.
        let mut records = Vec::new();
        for i in 0..4 {
            records.push(rec_ent(0.1 + i as f64 * 0.01, false));
        }
        for i in 0..12 {
            records.push(rec_ent(1.0 + i as f64 * 0.1, true));
        }
        let q = entropy_quartile_accuracy(&records).unwrap();
        assert_eq!(q.accuracy[0], Some(0.0));
        for bin in 1..4 {
            if let Some(acc) = q.accuracy[bin] {
                assert!(acc > 0.9);
            }
        }
    }

    fn rec_full(entropy: f64, plpd: f64, correct: bool) -> EvalRecord {
        EvalRecord {
            confidence: -entropy,
            correct,
            entropy,
            plpd,
            group_id: 0,
        }
    }

    #[test]
    fn area_assignment_matches_hand_labels() {
        let tau_ent = 0.5;
        let tau_plpd = 0.2;
        assert_eq!(area_of(0.9, 0.0, tau_ent, tau_plpd), 1);
        assert_eq!(area_of(0.9, 0.9, tau_ent, tau_plpd), 2);
        assert_eq!(area_of(0.1, 0.0, tau_ent, tau_plpd), 3);
        assert_eq!(area_of(0.1, 0.9, tau_ent, tau_plpd), 4);
        let records = vec![
            rec_full(0.9, 0.0, false),
            rec_full(0.9, 0.9, true),
            rec_full(0.1, 0.0, false),
            rec_full(0.1, 0.9, true),
        ];
        let p = area_partition(&records, tau_ent, tau_plpd).unwrap();
        assert_eq!(p.counts, [1, 1, 1, 1]);
        assert_eq!(p.accuracy[3], Some(1.0));
        assert_eq!(p.accuracy[0], Some(0.0));
    }

    #[test]
    fn impossible_plpd_threshold_empties_odd_areas() {
        // PLPD >= -1 always, so a threshold of -2 sends everything to the
        // high-PLPD areas 2 and 4.
        let records = vec![
            rec_full(0.9, -1.0, true),
            rec_full(0.1, 0.3, false),
            rec_full(0.7, 0.0, true),
        ];
        let p = area_partition(&records, 0.5, -2.0).unwrap();
        assert_eq!(p.counts[0], 0);
        assert_eq!(p.counts[2], 0);
        assert_eq!(p.counts[1] + p.counts[3], 3);
    }

    #[test]
    fn area_shares_sum_to_one() {
        let mut rng = crate::numerics::Rng::new(52);
        let records: Vec<EvalRecord> = (0..37)
            .map(|_| rec_full(rng.uniform(0.0, 0.7), rng.uniform(-1.0, 1.0), rng.bernoulli(0.5)))
            .collect();
        let p = area_partition(&records, 0.35, 0.2).unwrap();
        assert!((p.share.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
