//! Linear probes on frozen features (SPLIT) and the random-projection
//! baseline backbone.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{check_subject_disjoint, Cohort, FeatureMatrix};
use crate::error::{Error, Result};
use crate::metrics::{
    calibrate_threshold_max_j, evaluate_cell, SubgroupMetrics, ThresholdRule, SENTINEL,
};
use crate::rng;

/// Categorical targets as indices into `classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub classes: Vec<String>,
    pub labels: Vec<usize>,
}

impl Targets {
    pub fn new(classes: Vec<String>, labels: Vec<usize>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Parameter("no target classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::Parameter(format!(
                "label {bad} out of range for {} classes",
                classes.len()
            )));
        }
        Ok(Targets { classes, labels })
    }

    /// Classes are the sorted distinct values.
    pub fn from_values<S: AsRef<str>>(values: &[S]) -> Self {
        let mut classes: Vec<String> = values.iter().map(|v| v.as_ref().to_string()).collect();
        classes.sort();
        classes.dedup();
        let labels = values
            .iter()
            .map(|v| {
                classes
                    .binary_search_by(|c| c.as_str().cmp(v.as_ref()))
                    .unwrap()
            })
            .collect();
        Targets { classes, labels }
    }

    /// Classes "0" and "1".
    pub fn binary(labels: &[bool]) -> Self {
        Targets {
            classes: vec!["0".into(), "1".into()],
            labels: labels.iter().map(|&l| usize::from(l)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn select(&self, rows: &[usize]) -> Targets {
        Targets {
            classes: self.classes.clone(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    pub(crate) fn distinct(&self) -> usize {
        self.labels.iter().collect::<HashSet<_>>().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "{} feature columns, standardization fitted on {}",
                x.ncols(),
                self.mean.len()
            )));
        }
        let mean = ArrayView1::from(&self.mean);
        let scale = ArrayView1::from(&self.scale);
        Ok((&x - &mean) / scale)
    }
}

/// Zero mean and unit (population) standard deviation on `fit_rows`.
/// Constant columns keep scale 1 and so map to zero.
pub fn standardize(
    features: &FeatureMatrix,
    fit_rows: &[usize],
) -> Result<(Array2<f64>, Standardization)> {
    let fit = features.select_rows(fit_rows);
    let params = fit_standardization(fit.values().view())?;
    Ok((params.apply(features.values().view())?, params))
}

fn fit_standardization(x: ArrayView2<f64>) -> Result<Standardization> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("no rows to fit standardization".into()));
    }
    let mean = x.mean_axis(Axis(0)).unwrap();
    let var = x.var_axis(Axis(0), 0.0);
    let scale = var
        .iter()
        .zip(mean.iter())
        .map(|(&v, &m)| {
            let sd = v.sqrt();
            if sd > 1e-12 * m.abs().max(1.0) {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Ok(Standardization {
        mean: mean.to_vec(),
        scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    /// Candidate strengths tried when validation rows are given; `l2` alone
    /// is used when empty.
    pub l2_grid: Vec<f64>,
    pub max_epochs: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1e-3,
            l2_grid: Vec::new(),
            max_epochs: 2000,
            tol: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Training objective after each accepted step; entry 0 is the initial loss.
    pub loss_trace: Vec<f64>,
    /// Validation cross-entropy after each step, when validation rows exist.
    pub validation_trace: Vec<f64>,
    pub epochs: usize,
    pub l2: f64,
    pub selected_epoch: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub task: String,
    pub classes: Vec<String>,
    /// m features x k classes, acting on standardized features.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub standardization: Standardization,
    pub meta: TrainingMeta,
}

impl ProbeModel {
    /// Class probabilities for raw (unstandardized) feature rows.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let z = self.standardization.apply(x)?;
        let mut logits = z.dot(&self.weights) + &self.bias;
        for mut row in logits.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let s = row.sum();
            row /= s;
        }
        Ok(logits)
    }

    /// Unit direction in raw feature space along which class `class`
    /// gains log-odds against the class average. For two classes this is
    /// the decision normal.
    pub fn input_direction(&self, class: usize) -> Array1<f64> {
        let avg = self.weights.mean_axis(Axis(1)).unwrap();
        let w = &self.weights.column(class) - &avg;
        let scale = ArrayView1::from(&self.standardization.scale);
        unit(w / scale)
    }

    /// Unit direction in standardized feature space, per class as above.
    pub fn direction(&self, class: usize) -> Array1<f64> {
        let avg = self.weights.mean_axis(Axis(1)).unwrap();
        unit(&self.weights.column(class) - &avg)
    }
}

pub(crate) fn unit(v: Array1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        v / norm
    } else {
        v
    }
}

/// Mean softmax cross-entropy of `logits` (n x k) against `y`, and the
/// residual `softmax - onehot` divided by n.
pub(crate) fn softmax_ce(
    logits: &Array2<f64>,
    y: &[usize],
    want_residual: bool,
) -> (f64, Option<Array2<f64>>) {
    let n = logits.nrows() as f64;
    let mut loss = 0.0;
    let mut resid = want_residual.then(|| Array2::zeros(logits.raw_dim()));
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y[i]];
        if let Some(r) = resid.as_mut() {
            for (j, &v) in row.iter().enumerate() {
                r[[i, j]] = (v - lse).exp() / n;
            }
            r[[i, y[i]]] -= 1.0 / n;
        }
    }
    (loss / n, resid)
}

/// Mean cross-entropy without the penalty.
pub fn probe_cross_entropy(
    x: ArrayView2<f64>,
    y: &[usize],
    w: ArrayView2<f64>,
    b: ArrayView1<f64>,
) -> f64 {
    softmax_ce(&(x.dot(&w) + b), y, false).0
}

/// Training objective `mean CE + (l2/2)·|W|²` and its gradient with
/// respect to the weights and bias.
pub fn probe_objective(
    x: ArrayView2<f64>,
    y: &[usize],
    w: ArrayView2<f64>,
    b: ArrayView1<f64>,
    l2: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let logits = x.dot(&w) + b;
    let (ce, resid) = softmax_ce(&logits, y, true);
    let resid = resid.unwrap();
    let gw = x.t().dot(&resid) + &(&w * l2);
    let gb = resid.sum_axis(Axis(0));
    (ce + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>(), gw, gb)
}

fn probe_loss(x: ArrayView2<f64>, y: &[usize], w: &Array2<f64>, b: &Array1<f64>, l2: f64) -> f64 {
    probe_cross_entropy(x, y, w.view(), b.view()) + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;

struct Fit {
    w: Array2<f64>,
    b: Array1<f64>,
    meta: TrainingMeta,
    best_val: f64,
}

fn fit_one(
    x: ArrayView2<f64>,
    y: &[usize],
    k: usize,
    validation: Option<(ArrayView2<f64>, &[usize])>,
    l2: f64,
    config: &ProbeConfig,
) -> Result<Fit> {
    let m = x.ncols();
    let mut rng = rng::seeded(config.seed);
    let init = Normal::new(0.0, 0.01).unwrap();
    let mut w = Array2::from_shape_fn((m, k), |_| init.sample(&mut rng));
    let mut b = Array1::zeros(k);
    let (mut loss, mut gw, mut gb) = probe_objective(x, y, w.view(), b.view(), l2);
    if !loss.is_finite() {
        return Err(Error::Optimization {
            message: "non-finite initial loss".into(),
            trace: vec![loss],
        });
    }
    let mut trace = vec![loss];
    let mut val_trace = Vec::new();
    let val_ce = |w: &Array2<f64>, b: &Array1<f64>| {
        validation.map(|(vx, vy)| probe_cross_entropy(vx, vy, w.view(), b.view()))
    };
    let mut best = (
        w.clone(),
        b.clone(),
        0usize,
        val_ce(&w, &b).unwrap_or(f64::INFINITY),
    );
    if validation.is_some() {
        val_trace.push(best.3);
    }
    let mut step = 1.0;
    let mut converged = false;
    let mut epochs = 0;
    while epochs < config.max_epochs {
        let g2 = gw.iter().chain(gb.iter()).map(|v| v * v).sum::<f64>();
        if g2 == 0.0 {
            converged = true;
            break;
        }
        let (nw, nb, nloss) = loop {
            let cw = &w - &(&gw * step);
            let cb = &b - &(&gb * step);
            let cl = probe_loss(x, y, &cw, &cb, l2);
            if cl.is_finite() && cl <= loss - ARMIJO * step * g2 {
                break (cw, cb, cl);
            }
            step *= 0.5;
            if step < MIN_STEP {
                if !cl.is_finite() {
                    let tail = trace[trace.len().saturating_sub(10)..].to_vec();
                    return Err(Error::Optimization {
                        message: "loss diverged".into(),
                        trace: tail,
                    });
                }
                break (w.clone(), b.clone(), loss);
            }
        };
        if step < MIN_STEP {
            converged = true;
            break;
        }
        epochs += 1;
        let improvement = loss - nloss;
        w = nw;
        b = nb;
        let (l, g1, g2) = probe_objective(x, y, w.view(), b.view(), l2);
        loss = l;
        gw = g1;
        gb = g2;
        trace.push(loss);
        if let Some(v) = val_ce(&w, &b) {
            val_trace.push(v);
            if v < best.3 {
                best = (w.clone(), b.clone(), epochs, v);
            }
        }
        step *= 2.0;
        if improvement < config.tol {
            converged = true;
            break;
        }
    }
    let (w, b, selected, best_val) = if validation.is_some() {
        best
    } else {
        (w, b, epochs, f64::INFINITY)
    };
    Ok(Fit {
        w,
        b,
        best_val,
        meta: TrainingMeta {
            loss_trace: trace,
            validation_trace: val_trace,
            epochs,
            l2,
            selected_epoch: selected,
            converged,
        },
    })
}

/// Fits a softmax probe by full-batch gradient descent with backtracking.
/// Standardization is fitted on the training rows. With validation rows
/// the checkpoint (epoch and `l2` from the grid) with the lowest
/// validation cross-entropy is returned.
pub fn train_probe(
    task: &str,
    features: ArrayView2<f64>,
    targets: &Targets,
    validation: Option<(ArrayView2<f64>, &Targets)>,
    config: &ProbeConfig,
) -> Result<ProbeModel> {
    if features.nrows() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows for {} targets",
            features.nrows(),
            targets.len()
        )));
    }
    if targets.distinct() < 2 {
        return Err(Error::DegenerateLabels(format!(
            "`{task}` has fewer than two classes in training rows"
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("non-finite feature value".into()));
    }
    if !(config.l2 >= 0.0) || config.l2_grid.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::Parameter("l2 must be non-negative".into()));
    }
    let standardization = fit_standardization(features)?;
    let x = standardization.apply(features)?;
    let val = match validation {
        Some((vx, vt)) => {
            if vt.classes != targets.classes || vx.nrows() != vt.len() {
                return Err(Error::Dimension(
                    "validation targets do not match training".into(),
                ));
            }
            Some((standardization.apply(vx)?, vt.labels.as_slice()))
        }
        None => None,
    };
    let grid = if config.l2_grid.is_empty() || val.is_none() {
        vec![config.l2]
    } else {
        config.l2_grid.clone()
    };
    let k = targets.n_classes();
    let mut best: Option<Fit> = None;
    for l2 in grid {
        let fit = fit_one(
            x.view(),
            &targets.labels,
            k,
            val.as_ref().map(|(vx, vy)| (vx.view(), *vy)),
            l2,
            config,
        )?;
        if best.as_ref().is_none_or(|b| fit.best_val < b.best_val) {
            best = Some(fit);
        }
    }
    let fit = best.unwrap();
    Ok(ProbeModel {
        task: task.to_string(),
        classes: targets.classes.clone(),
        weights: fit.w,
        bias: fit.b,
        standardization,
        meta: fit.meta,
    })
}

/// Train, validation and test rows of one SPLIT run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRows {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitRows {
    fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, rows) in [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ] {
            for &r in rows {
                if !seen.insert(r) {
                    return Err(Error::Leakage(format!(
                        "row {r} appears twice (again in {name})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Assigns whole subjects to train/validation/test with the given
/// fractions, so no subject spans two sets.
pub fn subject_split(cohort: &Cohort, fractions: (f64, f64), seed: u64) -> Result<SplitRows> {
    let (ft, fv) = fractions;
    if !(ft > 0.0 && fv >= 0.0 && ft + fv < 1.0) {
        return Err(Error::Parameter(
            "split fractions must leave a test share".into(),
        ));
    }
    let mut subjects: Vec<&str> = cohort
        .records()
        .iter()
        .map(|r| r.subject_id.as_str())
        .collect();
    subjects.sort_unstable();
    subjects.dedup();
    subjects.shuffle(&mut rng::seeded(seed));
    let n = subjects.len() as f64;
    let n_train = (n * ft).round() as usize;
    let n_val = (n * fv).round() as usize;
    let which: std::collections::HashMap<&str, usize> = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            (
                *s,
                usize::from(i >= n_train) + usize::from(i >= n_train + n_val),
            )
        })
        .collect();
    let mut rows = SplitRows {
        train: vec![],
        validation: vec![],
        test: vec![],
    };
    for (i, r) in cohort.records().iter().enumerate() {
        match which[r.subject_id.as_str()] {
            0 => rows.train.push(i),
            1 => rows.validation.push(i),
            _ => rows.test.push(i),
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub probe: ProbeConfig,
    pub replicates: usize,
    pub seed: u64,
    /// Free-form tag of the feature source, e.g. "random" or "disease".
    pub backbone: String,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            probe: ProbeConfig::default(),
            replicates: crate::metrics::DEFAULT_REPLICATES,
            seed: 0,
            backbone: "external".into(),
        }
    }
}

/// One target class scored one-vs-rest on the test rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassBlock {
    pub class: String,
    pub threshold: f64,
    pub metrics: SubgroupMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub attribute: String,
    pub backbone: String,
    pub threshold_rule: ThresholdRule,
    /// k blocks for k >= 3 classes, otherwise one block for the second class.
    pub classes: Vec<ClassBlock>,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub l2: f64,
    pub selected_epoch: usize,
    pub replicates: usize,
    pub seed: u64,
}

/// SPLIT on a bare feature matrix. Fitting sees only train and validation
/// rows; the test rows are scored afterwards.
pub fn split_probe(
    attribute: &str,
    features: ArrayView2<f64>,
    targets: &Targets,
    rows: &SplitRows,
    config: &SplitConfig,
) -> Result<(ProbeModel, SplitReport)> {
    if features.nrows() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows for {} targets",
            features.nrows(),
            targets.len()
        )));
    }
    rows.check_disjoint()?;
    if let Some(&r) = rows
        .train
        .iter()
        .chain(&rows.validation)
        .chain(&rows.test)
        .find(|&&r| r >= targets.len())
    {
        return Err(Error::Dimension(format!("row {r} out of range")));
    }
    if rows.test.is_empty() {
        return Err(Error::EmptyInput("no test rows".into()));
    }
    let take = |r: &[usize]| features.select(Axis(0), r);
    let train_x = take(&rows.train);
    let train_t = targets.select(&rows.train);
    let val_x = take(&rows.validation);
    let val_t = targets.select(&rows.validation);
    let validation = (!rows.validation.is_empty()).then(|| (val_x.view(), &val_t));
    let model = train_probe(
        attribute,
        train_x.view(),
        &train_t,
        validation,
        &config.probe,
    )?;

    let proba = model.predict_proba(take(&rows.test).view())?;
    let test_t = targets.select(&rows.test);
    let k = targets.n_classes();
    let blocks: Vec<usize> = if k <= 2 {
        vec![k - 1]
    } else {
        (0..k).collect()
    };
    let classes = blocks
        .into_iter()
        .map(|c| {
            let scores = proba.column(c).to_vec();
            let labels: Vec<bool> = test_t.labels.iter().map(|&l| l == c).collect();
            let threshold = calibrate_threshold_max_j(&scores, &labels).unwrap_or(SENTINEL);
            let metrics = evaluate_cell(
                attribute,
                &targets.classes[c],
                &scores,
                &labels,
                threshold,
                config.replicates,
                rng::derive_seed(config.seed, c as u64),
            )?;
            Ok(ClassBlock {
                class: targets.classes[c].clone(),
                threshold,
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = SplitReport {
        attribute: attribute.to_string(),
        backbone: config.backbone.clone(),
        threshold_rule: ThresholdRule::MaxYoudenJ,
        classes,
        n_train: rows.train.len(),
        n_validation: rows.validation.len(),
        n_test: rows.test.len(),
        l2: model.meta.l2,
        selected_epoch: model.meta.selected_epoch,
        replicates: config.replicates,
        seed: config.seed,
    };
    Ok((model, report))
}

/// SPLIT for a cohort attribute. `backbone_features` rows follow the
/// cohort's record order. Classes are the attribute values present in the
/// cohort, in schema order. Rows and subjects must not overlap between sets.
pub fn split_test(
    backbone_features: &FeatureMatrix,
    attribute: &str,
    cohort: &Cohort,
    rows: &SplitRows,
    config: &SplitConfig,
) -> Result<(ProbeModel, SplitReport)> {
    if backbone_features.n_rows() != cohort.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows for a cohort of {}",
            backbone_features.n_rows(),
            cohort.len()
        )));
    }
    rows.check_disjoint()?;
    let parts: Vec<Cohort> = [&rows.train, &rows.validation, &rows.test]
        .iter()
        .map(|r| cohort.subset(r))
        .collect::<Result<_>>()?;
    check_subject_disjoint(&parts.iter().collect::<Vec<_>>())?;

    let groups = cohort.group_rows(attribute)?;
    let present: Vec<&(String, Vec<usize>)> =
        groups.iter().filter(|(_, r)| !r.is_empty()).collect();
    let mut labels = vec![usize::MAX; cohort.len()];
    for (ci, (_, r)) in present.iter().enumerate() {
        for &i in r {
            labels[i] = ci;
        }
    }
    if let Some(i) = labels.iter().position(|&l| l == usize::MAX) {
        return Err(Error::Lookup(format!(
            "scan `{}` has no `{attribute}` value",
            cohort.records()[i].scan_id
        )));
    }
    let targets = Targets::new(present.iter().map(|(v, _)| v.clone()).collect(), labels)?;
    split_probe(
        attribute,
        backbone_features.values().view(),
        &targets,
        rows,
        config,
    )
}

/// Fixed bias-free Gaussian map followed by `max(0, ·)`. Weights have
/// variance `2 / out_dim`, which preserves squared norms in expectation.
pub fn random_projection(
    inputs: ArrayView2<f64>,
    out_dim: usize,
    seed: u64,
) -> Result<FeatureMatrix> {
    if out_dim == 0 || inputs.ncols() == 0 {
        return Err(Error::Dimension(
            "random projection needs non-empty input and output".into(),
        ));
    }
    let normal = Normal::new(0.0, (2.0 / out_dim as f64).sqrt()).unwrap();
    let mut rng = rng::seeded(seed);
    let w = Array2::from_shape_fn((inputs.ncols(), out_dim), |_| normal.sample(&mut rng));
    FeatureMatrix::new(inputs.dot(&w).mapv(|v| v.max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn blobs(n: usize, seed: u64, sep: f64) -> (Array2<f64>, Vec<bool>) {
        let mut rng = rng::seeded(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| {
            let shift = if j == 0 && labels[i] { sep } else { 0.0 };
            shift + normal.sample(&mut rng)
        });
        (x, labels)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let f =
            FeatureMatrix::from_rows(&[vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 6.0]]).unwrap();
        let (z, p) = standardize(&f, &[0, 1, 2]).unwrap();
        assert!(z.column(0).iter().all(|&v| v == 0.0));
        assert_eq!(p.scale[0], 1.0);
        assert!(z.column(1).sum().abs() < 1e-12);
        let (z, _) = standardize(&f, &[0, 1]).unwrap();
        assert!(z.column(1).sum().abs() > 1.0);
        assert!(matches!(standardize(&f, &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn huge_penalty_gives_uniform_prediction() {
        let (x, y) = blobs(60, 1, 3.0);
        let cfg = ProbeConfig {
            l2: 1e6,
            ..Default::default()
        };
        let m = train_probe("t", x.view(), &Targets::binary(&y), None, &cfg).unwrap();
        assert!(m.weights.iter().all(|w| w.abs() < 1e-4));
        let final_loss = *m.meta.loss_trace.last().unwrap();
        assert!((final_loss - 2f64.ln()).abs() < 1e-4, "{final_loss}");
    }

    #[test]
    fn loss_trace_monotone_and_separable_blobs_learned() {
        let (x, y) = blobs(200, 2, 4.0);
        let t = Targets::binary(&y);
        let m = train_probe("t", x.view(), &t, None, &ProbeConfig::default()).unwrap();
        for w in m.meta.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        let p = m.predict_proba(x.view()).unwrap();
        let auc = crate::metrics::auc(&p.column(1).to_vec(), &y).unwrap();
        assert!(auc > 0.97, "{auc}");
        let d = m.input_direction(1);
        assert!(d[0] > 0.95);
    }

    #[test]
    fn single_class_rejected() {
        let x = Array2::zeros((4, 2));
        let t = Targets::binary(&[true; 4]);
        assert!(matches!(
            train_probe("t", x.view(), &t, None, &ProbeConfig::default()),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn validation_checkpoint_is_best_seen() {
        let (x, y) = blobs(120, 3, 1.0);
        let t = Targets::binary(&y);
        let (tr, va): (Vec<usize>, Vec<usize>) = (0..120).partition(|i| i % 3 != 0);
        let cfg = ProbeConfig {
            l2: 0.0,
            ..Default::default()
        };
        let m = train_probe(
            "t",
            x.select(Axis(0), &tr).view(),
            &t.select(&tr),
            Some((x.select(Axis(0), &va).view(), &t.select(&va))),
            &cfg,
        )
        .unwrap();
        let vt = &m.meta.validation_trace;
        let min = vt.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(vt[m.meta.selected_epoch], min);
    }

    #[test]
    fn split_rejects_overlap_and_reports_blocks() {
        let (x, _) = blobs(90, 4, 0.0);
        let classes: Vec<&str> = (0..90).map(|i| ["a", "b", "c"][i % 3]).collect();
        let t = Targets::from_values(&classes);
        let rows = SplitRows {
            train: (0..50).collect(),
            validation: (50..60).collect(),
            test: (59..90).collect(),
        };
        let cfg = SplitConfig {
            replicates: 20,
            ..Default::default()
        };
        assert!(matches!(
            split_probe("g", x.view(), &t, &rows, &cfg),
            Err(Error::Leakage(_))
        ));
        let rows = SplitRows {
            test: (60..90).collect(),
            ..rows
        };
        let (_, rep) = split_probe("g", x.view(), &t, &rows, &cfg).unwrap();
        assert_eq!(rep.classes.len(), 3);
        let bin = Targets::binary(&(0..90).map(|i| i % 2 == 0).collect::<Vec<_>>());
        let (_, rep) = split_probe("g", x.view(), &bin, &rows, &cfg).unwrap();
        assert_eq!(rep.classes.len(), 1);
        assert_eq!(rep.classes[0].class, "1");
    }

    #[test]
    fn xor_is_not_linearly_probeable() {
        let mut rng = rng::seeded(9);
        let n = 400;
        let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let y: Vec<bool> = x
            .rows()
            .into_iter()
            .map(|r| (r[0] > 0.0) != (r[1] > 0.0))
            .collect();
        let rows = SplitRows {
            train: (0..200).collect(),
            validation: vec![],
            test: (200..400).collect(),
        };
        let cfg = SplitConfig {
            replicates: 10,
            ..Default::default()
        };
        let (_, rep) = split_probe("xor", x.view(), &Targets::binary(&y), &rows, &cfg).unwrap();
        assert!(rep.classes[0].metrics.auc.unwrap().value <= 0.60);
    }

    #[test]
    fn projection_is_deterministic_and_bias_free() {
        let x = array![[0.0, 0.0, 0.0], [1.0, -2.0, 0.5]];
        let a = random_projection(x.view(), 16, 3).unwrap();
        let b = random_projection(x.view(), 16, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.row(0).iter().all(|&v| v == 0.0));
        assert!(a.values().iter().all(|&v| v >= 0.0));
        assert!(random_projection(x.view(), 0, 3).is_err());
    }

    #[test]
    fn projection_keeps_distance_ranks() {
        let mut rng = rng::seeded(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x = Array2::from_shape_fn((40, 10), |_| normal.sample(&mut rng));
        let y = random_projection(x.view(), 2000, 12).unwrap();
        let mut dx = vec![];
        let mut dy = vec![];
        for i in 0..40 {
            for j in i + 1..40 {
                let d = &x.row(i) - &x.row(j);
                dx.push(d.dot(&d));
                let d = &y.row(i) - &y.row(j);
                dy.push(d.dot(&d));
            }
        }
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            let mut r = vec![0.0; v.len()];
            for (k, &i) in idx.iter().enumerate() {
                r[i] = k as f64;
            }
            r
        };
        let (rx, ry) = (rank(&dx), rank(&dy));
        let n = rx.len() as f64;
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        let rho = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        assert!(rho >= 0.8, "{rho}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn gradient_matches_central_differences(seed in 0u64..10_000, m in 1usize..=10, n in 2usize..=50, k in 2usize..=3) {
            let mut rng = rng::seeded(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let x = Array2::from_shape_fn((n, m), |_| normal.sample(&mut rng));
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let w = Array2::from_shape_fn((m, k), |_| normal.sample(&mut rng));
            let b = Array1::from_shape_fn(k, |_| normal.sample(&mut rng));
            let l2 = 0.1;
            let (_, gw, gb) = probe_objective(x.view(), &y, w.view(), b.view(), l2);
            let h = 1e-5;
            let f = |w: &Array2<f64>, b: &Array1<f64>| probe_objective(x.view(), &y, w.view(), b.view(), l2).0;
            let mut num_w = Array2::zeros((m, k));
            for idx in ndarray::indices((m, k)) {
                let mut wp = w.clone();
                wp[idx] += h;
                let mut wm = w.clone();
                wm[idx] -= h;
                num_w[idx] = (f(&wp, &b) - f(&wm, &b)) / (2.0 * h);
            }
            let mut num_b = Array1::zeros(k);
            for j in 0..k {
                let mut bp = b.clone();
                bp[j] += h;
                let mut bm = b.clone();
                bm[j] -= h;
                num_b[j] = (f(&w, &bp) - f(&w, &bm)) / (2.0 * h);
            }
            let diff = (&gw - &num_w).mapv(|v| v * v).sum() + (&gb - &num_b).mapv(|v| v * v).sum();
            let norm = gw.mapv(|v| v * v).sum() + gb.mapv(|v| v * v).sum();
            let num_norm = num_w.mapv(|v| v * v).sum() + num_b.mapv(|v| v * v).sum();
            prop_assert!(rel_err(norm.sqrt(), num_norm.sqrt()) < 1e-4);
            prop_assert!(diff.sqrt() / norm.sqrt().max(num_norm.sqrt()).max(1e-8) <= 1e-4);
        }
    }
}
