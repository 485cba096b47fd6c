//! ROC analysis, calibrated decision thresholds and stratified bootstrap
//! intervals.
//!
//! Decision rule everywhere: a sample is predicted positive iff
//! `score >= threshold`. The candidate thresholds are the observed scores
//! plus [`SENTINEL`] (`+inf`), at which nothing is predicted positive.

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::rng;

/// Threshold above every finite score.
pub const SENTINEL: f64 = f64::INFINITY;

pub const DEFAULT_REPLICATES: usize = 2000;

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Parameter(format!("non-finite score at index {i}")));
    }
    Ok(())
}

/// Returns (positives, negatives); both must be non-zero.
fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels(format!(
            "need both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted ½.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // twice the number of concordant pairs, ties contributing 1
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        let (mut p_tie, mut n_tie) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == s {
            if labels[order[j]] {
                p_tie += 1;
            } else {
                n_tie += 1;
            }
            j += 1;
        }
        twice_u += p_tie * (2 * neg_below + n_tie);
        neg_below += n_tie;
        i = j;
    }
    Ok((twice_u as f64 / 2.0) / (pos as f64 * neg as f64))
}

/// Confusion counts at each candidate threshold, from the sentinel down to
/// the smallest observed score.
#[derive(Debug, Clone, Copy)]
struct SweepPoint {
    threshold: f64,
    tp: usize,
    fp: usize,
}

fn sweep(scores: &[f64], labels: &[bool]) -> Vec<SweepPoint> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![SweepPoint {
        threshold: SENTINEL,
        tp: 0,
        fp: 0,
    }];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(SweepPoint {
            threshold: s,
            tp,
            fp,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    /// (FPR, TPR) pairs from (0, 0) to (1, 1).
    pub points: Vec<(f64, f64)>,
    /// Threshold producing each point; the first is [`SENTINEL`].
    pub thresholds: Vec<f64>,
}

impl RocCurve {
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
            .sum()
    }
}

/// One point per distinct score plus the (0, 0) sentinel point.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (pos, neg) = check_binary(scores, labels)?;
    let pts = sweep(scores, labels);
    Ok(RocCurve {
        points: pts
            .iter()
            .map(|p| (p.fp as f64 / neg as f64, p.tp as f64 / pos as f64))
            .collect(),
        thresholds: pts.iter().map(|p| p.threshold).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rates {
    pub tpr: f64,
    pub fpr: f64,
    pub j: f64,
}

pub fn rates_at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Rates> {
    check_binary(scores, labels)?;
    let (tpr, fpr) = partial_rates(scores, labels, threshold);
    let (tpr, fpr) = (tpr.unwrap(), fpr.unwrap());
    Ok(Rates {
        tpr,
        fpr,
        j: tpr - fpr,
    })
}

/// TPR and FPR, each absent when its class is empty.
fn partial_rates(scores: &[f64], labels: &[bool], threshold: f64) -> (Option<f64>, Option<f64>) {
    let (mut tp, mut pos, mut fp, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let hit = s >= threshold;
        if l {
            pos += 1;
            tp += usize::from(hit);
        } else {
            neg += 1;
            fp += usize::from(hit);
        }
    }
    (
        (pos > 0).then(|| tp as f64 / pos as f64),
        (neg > 0).then(|| fp as f64 / neg as f64),
    )
}

/// Threshold whose FPR is nearest to `target_fpr`; ties go to the lower
/// FPR, then to the larger threshold.
pub fn calibrate_threshold_fpr(scores: &[f64], labels: &[bool], target_fpr: f64) -> Result<f64> {
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::Parameter(format!(
            "target FPR {target_fpr} outside (0, 1)"
        )));
    }
    let (_, neg) = check_binary(scores, labels)?;
    let mut best: Option<(f64, f64)> = None;
    // sweep order: FPR non-decreasing, threshold decreasing
    for p in sweep(scores, labels) {
        let dist = (p.fp as f64 / neg as f64 - target_fpr).abs();
        if best.is_none_or(|(d, _)| dist < d) {
            best = Some((dist, p.threshold));
        }
    }
    Ok(best.expect("sweep is never empty").1)
}

/// Threshold maximising Youden's J; ties go to the larger threshold.
pub fn calibrate_threshold_max_j(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut best: Option<(f64, f64)> = None;
    for p in sweep(scores, labels) {
        let j = p.tp as f64 / pos as f64 - p.fp as f64 / neg as f64;
        if best.is_none_or(|(b, _)| j > b) {
            best = Some((j, p.threshold));
        }
    }
    Ok(best.expect("sweep is never empty").1)
}

/// Estimators available to [`bootstrap_ci`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Statistic {
    Auc,
    Tpr(f64),
    Fpr(f64),
    YoudenJ(f64),
}

impl Statistic {
    pub fn evaluate(&self, scores: &[f64], labels: &[bool]) -> Result<f64> {
        match *self {
            Statistic::Auc => auc(scores, labels),
            Statistic::Tpr(t) => rates_at_threshold(scores, labels, t).map(|r| r.tpr),
            Statistic::Fpr(t) => rates_at_threshold(scores, labels, t).map(|r| r.fpr),
            Statistic::YoudenJ(t) => rates_at_threshold(scores, labels, t).map(|r| r.j),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// Linear-interpolation percentile of sorted data (`q` in [0, 1]).
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for one statistic, resampling positives
/// and negatives separately so class counts are preserved.
pub fn bootstrap_ci(
    statistic: &Statistic,
    scores: &[f64],
    labels: &[bool],
    replicates: usize,
    seed: u64,
) -> Result<Interval> {
    let s = *statistic;
    let out = bootstrap_intervals(
        |sc, lb| s.evaluate(sc, lb).map(|v| vec![v]),
        scores,
        labels,
        replicates,
        seed,
        0.95,
    )?;
    Ok(out[0])
}

/// Stratified percentile bootstrap for a vector-valued statistic. Replicate
/// `r` draws from RNG stream `r` of `seed`, so the result is independent of
/// scheduling.
pub fn bootstrap_intervals<F>(
    statistic: F,
    scores: &[f64],
    labels: &[bool],
    replicates: usize,
    seed: u64,
    level: f64,
) -> Result<Vec<Interval>>
where
    F: Fn(&[f64], &[bool]) -> Result<Vec<f64>> + Sync,
{
    check_lengths(scores, labels)?;
    if replicates < 2 {
        return Err(Error::Parameter(
            "need at least 2 bootstrap replicates".into(),
        ));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("bootstrap on empty sample".into()));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();

    let draws: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, r as u64);
            let mut sc = Vec::with_capacity(scores.len());
            let mut lb = Vec::with_capacity(scores.len());
            for stratum in [&pos, &neg] {
                for _ in 0..stratum.len() {
                    let k = stratum[rng.random_range(0..stratum.len())];
                    sc.push(scores[k]);
                    lb.push(labels[k]);
                }
            }
            statistic(&sc, &lb).map_err(|e| Error::Replicate {
                index: r,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let k = draws[0].len();
    let alpha = (1.0 - level) / 2.0;
    Ok((0..k)
        .map(|s| {
            let mut col: Vec<f64> = draws.iter().map(|d| d[s]).collect();
            col.sort_by(f64::total_cmp);
            Interval {
                lo: percentile_sorted(&col, alpha),
                hi: percentile_sorted(&col, 1.0 - alpha),
            }
        })
        .collect())
}

/// A point estimate with its bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Estimate {
    /// Percentile intervals can exclude the point estimate on skewed
    /// statistics; the reported interval is widened to contain it.
    fn new(value: f64, iv: Interval) -> Self {
        Estimate {
            value,
            lo: iv.lo.min(value),
            hi: iv.hi.max(value),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    TargetFpr,
    MaxYoudenJ,
}

/// Metrics for one subgroup. Cells whose denominator class is absent are
/// `None` (AUC needs both classes, TPR positives, FPR negatives).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgroupMetrics {
    pub attribute: String,
    pub group: String,
    pub n: usize,
    pub positives: usize,
    pub auc: Option<Estimate>,
    pub tpr: Option<Estimate>,
    pub fpr: Option<Estimate>,
    pub j: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    /// Condition (or target class) the scores predict.
    pub target: String,
    pub threshold: f64,
    pub threshold_rule: ThresholdRule,
    pub target_fpr: Option<f64>,
    pub overall: SubgroupMetrics,
    pub subgroups: Vec<SubgroupMetrics>,
    pub replicates: usize,
    pub seed: u64,
    pub interval_method: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct ReportConfig {
    pub target_fpr: f64,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            target_fpr: 0.20,
            replicates: DEFAULT_REPLICATES,
            seed: 0,
        }
    }
}

/// Point estimates and bootstrap intervals of AUC, TPR, FPR and J for one
/// set of scores at a fixed threshold.
pub fn evaluate_cell(
    attribute: &str,
    group: &str,
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
    replicates: usize,
    seed: u64,
) -> Result<SubgroupMetrics> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    let both = positives > 0 && positives < labels.len();
    let mut cell = SubgroupMetrics {
        attribute: attribute.to_string(),
        group: group.to_string(),
        n: labels.len(),
        positives,
        auc: None,
        tpr: None,
        fpr: None,
        j: None,
    };
    if labels.is_empty() {
        return Ok(cell);
    }
    let (tpr, fpr) = partial_rates(scores, labels, threshold);
    let auc_value = if both {
        Some(auc(scores, labels)?)
    } else {
        None
    };

    let ivs = bootstrap_intervals(
        |sc, lb| {
            let (t, f) = partial_rates(sc, lb, threshold);
            let a = if both { auc(sc, lb)? } else { f64::NAN };
            let t = t.unwrap_or(f64::NAN);
            let f = f.unwrap_or(f64::NAN);
            Ok(vec![a, t, f, t - f])
        },
        scores,
        labels,
        replicates,
        seed,
        0.95,
    )?;
    cell.auc = auc_value.map(|v| Estimate::new(v, ivs[0]));
    cell.tpr = tpr.map(|v| Estimate::new(v, ivs[1]));
    cell.fpr = fpr.map(|v| Estimate::new(v, ivs[2]));
    if let (Some(t), Some(f)) = (tpr, fpr) {
        cell.j = Some(Estimate::new(t - f, ivs[3]));
    }
    Ok(cell)
}

/// Row index groups used by [`report_at_threshold`]: (attribute, value, rows).
pub type Grouping = (String, String, Vec<usize>);

/// Evaluates every subgroup at one shared threshold. Each cell gets its own
/// bootstrap seed derived from `seed` and the cell position.
pub fn report_at_threshold(
    target: &str,
    scores: &[f64],
    labels: &[bool],
    groups: &[Grouping],
    threshold: f64,
    rule: ThresholdRule,
    target_fpr: Option<f64>,
    replicates: usize,
    seed: u64,
) -> Result<MetricReport> {
    let overall = evaluate_cell(
        "all",
        "All",
        scores,
        labels,
        threshold,
        replicates,
        rng::derive_seed(seed, 0),
    )?;
    let subgroups = groups
        .iter()
        .enumerate()
        .map(|(gi, (attr, value, rows))| {
            let sc: Vec<f64> = rows.iter().map(|&r| scores[r]).collect();
            let lb: Vec<bool> = rows.iter().map(|&r| labels[r]).collect();
            evaluate_cell(
                attr,
                value,
                &sc,
                &lb,
                threshold,
                replicates,
                rng::derive_seed(seed, gi as u64 + 1),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        target: target.to_string(),
        threshold,
        threshold_rule: rule,
        target_fpr,
        overall,
        subgroups,
        replicates,
        seed,
        interval_method: "percentile",
    })
}

/// Calibrates one threshold on the whole cohort for the target FPR, then
/// reports each non-empty subgroup of every grouping attribute.
pub fn subgroup_report(
    cohort: &Cohort,
    condition: &str,
    groupings: &[&str],
    config: &ReportConfig,
) -> Result<MetricReport> {
    subgroup_report_with_rule(
        cohort,
        condition,
        groupings,
        ThresholdRule::TargetFpr,
        config,
    )
}

/// [`subgroup_report`] with the threshold chosen by `rule`; `target_fpr` is
/// ignored under [`ThresholdRule::MaxYoudenJ`].
pub fn subgroup_report_with_rule(
    cohort: &Cohort,
    condition: &str,
    groupings: &[&str],
    rule: ThresholdRule,
    config: &ReportConfig,
) -> Result<MetricReport> {
    let scores = cohort.logits(condition)?;
    let labels = cohort.labels(condition)?;
    let (threshold, target_fpr) = match rule {
        ThresholdRule::TargetFpr => (
            calibrate_threshold_fpr(&scores, &labels, config.target_fpr)?,
            Some(config.target_fpr),
        ),
        ThresholdRule::MaxYoudenJ => (calibrate_threshold_max_j(&scores, &labels)?, None),
    };
    let mut groups = Vec::new();
    for attr in groupings {
        for (value, rows) in cohort.group_rows(attr)? {
            if !rows.is_empty() {
                groups.push((attr.to_string(), value, rows));
            }
        }
    }
    report_at_threshold(
        condition,
        &scores,
        &labels,
        &groups,
        threshold,
        rule,
        target_fpr,
        config.replicates,
        config.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for k in 0..scores.len() {
                if labels[i] && !labels[k] {
                    den += 1.0;
                    if scores[i] > scores[k] {
                        num += 1.0;
                    } else if scores[i] == scores[k] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        let labels = [false, false, true, true];
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &labels).unwrap(), 0.75);
        assert_eq!(pairwise_auc(&[0.1, 0.4, 0.35, 0.8], &labels), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_is_degenerate() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(Error::DegenerateLabels(_))
        ));
        assert!(matches!(
            auc(&[0.1], &[true, false]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            auc(&[f64::NAN, 0.1], &[true, false]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn roc_examples() {
        let r = roc_points(&[0.2, 0.9], &[false, true]).unwrap();
        assert_eq!(r.points, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        let r = roc_points(&[0.3, 0.3, 0.3], &[false, true, false]).unwrap();
        assert_eq!(r.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(r.trapezoid_area(), 0.5);
    }

    #[test]
    fn fpr_calibration_example() {
        let s = [0.9, 0.8, 0.7, 0.6, 0.5];
        let l = [true, true, false, false, false];
        let t = calibrate_threshold_fpr(&s, &l, 1.0 / 3.0).unwrap();
        assert_eq!(t, 0.7);
        assert_eq!(rates_at_threshold(&s, &l, t).unwrap().fpr, 1.0 / 3.0);
        // smallest positive FPR is 1/3; target 0.01 is nearer to 0
        assert_eq!(calibrate_threshold_fpr(&s, &l, 0.01).unwrap(), SENTINEL);
    }

    #[test]
    fn max_j_examples() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [false, false, true, true];
        let t = calibrate_threshold_max_j(&s, &l).unwrap();
        assert_eq!(rates_at_threshold(&s, &l, t).unwrap().j, 1.0);
        assert_eq!(t, 0.8);
        let t = calibrate_threshold_max_j(&[0.5; 4], &l).unwrap();
        assert_eq!(t, SENTINEL);
        assert_eq!(rates_at_threshold(&[0.5; 4], &l, t).unwrap().j, 0.0);
    }

    #[test]
    fn rates_at_extremes() {
        let s = [0.1, 0.5, 0.7];
        let l = [false, true, false];
        let r = rates_at_threshold(&s, &l, f64::NEG_INFINITY).unwrap();
        assert_eq!((r.tpr, r.fpr, r.j), (1.0, 1.0, 0.0));
        let r = rates_at_threshold(&s, &l, SENTINEL).unwrap();
        assert_eq!((r.tpr, r.fpr, r.j), (0.0, 0.0, 0.0));
        let j = 0.79 - 0.20;
        assert!((j - 0.59f64).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_constant_and_deterministic() {
        let s: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let l: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let iv = bootstrap_intervals(|_, _| Ok(vec![0.42]), &s, &l, 50, 1, 0.95).unwrap();
        assert_eq!(iv[0], Interval { lo: 0.42, hi: 0.42 });
        let a = bootstrap_ci(&Statistic::Auc, &s, &l, 200, 7).unwrap();
        let b = bootstrap_ci(&Statistic::Auc, &s, &l, 200, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.lo <= a.hi);
        assert!(bootstrap_ci(&Statistic::Auc, &s, &l, 1, 7).is_err());
    }

    #[test]
    fn bootstrap_error_carries_replicate_index() {
        let s = [0.1, 0.2, 0.3, 0.4];
        let l = [true, false, true, false];
        let err = bootstrap_intervals(
            |_, _| Err(Error::Parameter("boom".into())),
            &s,
            &l,
            5,
            0,
            0.95,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Replicate { index: 0, .. }));
    }

    #[test]
    fn single_class_cell_keeps_fpr() {
        let cell = evaluate_cell("race", "X", &[0.1, 0.9, 0.5], &[false; 3], 0.5, 20, 3).unwrap();
        assert!(cell.auc.is_none());
        assert!(cell.tpr.is_none());
        assert!(cell.j.is_none());
        assert_eq!(cell.fpr.unwrap().value, 2.0 / 3.0);
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile_sorted(&v, 0.5), 3.0);
        assert_eq!(percentile_sorted(&v, 0.25), 2.0);
        assert!((percentile_sorted(&v, 0.1) - 1.4).abs() < 1e-12);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..60)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec((0i32..12).prop_map(|v| f64::from(v) / 4.0), n),
                    proptest::collection::vec(any::<bool>(), n),
                )
            })
            .prop_filter("both classes", |(_, l)| {
                l.iter().any(|&x| x) && l.iter().any(|&x| !x)
            })
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise((s, l) in instance()) {
            prop_assert_eq!(auc(&s, &l).unwrap(), pairwise_auc(&s, &l));
        }

        #[test]
        fn roc_area_and_shape((s, l) in instance()) {
            let r = roc_points(&s, &l).unwrap();
            prop_assert_eq!(r.points[0], (0.0, 0.0));
            prop_assert_eq!(*r.points.last().unwrap(), (1.0, 1.0));
            for w in r.points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
            prop_assert!((r.trapezoid_area() - auc(&s, &l).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn raising_threshold_never_raises_rates((s, l) in instance(), a in -1.0f64..4.0, b in -1.0f64..4.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let rl = rates_at_threshold(&s, &l, lo).unwrap();
            let rh = rates_at_threshold(&s, &l, hi).unwrap();
            prop_assert!(rh.tpr <= rl.tpr && rh.fpr <= rl.fpr);
        }
    }
}
