use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{softmax_ce, unit, ProbeModel, Targets};
use crate::rng;

/// Named categorical labels for one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTargets {
    pub name: String,
    pub targets: Targets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultitaskConfig {
    pub hidden: usize,
    /// One weight per task; empty means all ones.
    pub loss_weights: Vec<f64>,
    pub l2: f64,
    pub epochs: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for MultitaskConfig {
    fn default() -> Self {
        MultitaskConfig {
            hidden: 16,
            loss_weights: Vec::new(),
            l2: 1e-4,
            epochs: 2000,
            tol: 1e-9,
            seed: 0,
        }
    }
}

/// Offsets of the flat parameter vector: shared weights (d x h) and bias,
/// then each head's weights (h x k) and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskLayout {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: Vec<usize>,
}

struct Params<'a> {
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    heads: Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)>,
}

impl MultitaskLayout {
    pub fn len(&self) -> usize {
        let (d, h) = (self.input_dim, self.hidden);
        d * h + h + self.classes.iter().map(|k| h * k + k).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn unpack<'a>(&self, theta: &'a [f64]) -> Params<'a> {
        let (d, h) = (self.input_dim, self.hidden);
        let mut at = 0;
        let mut take = |len: usize| {
            let piece = &theta[at..at + len];
            at += len;
            piece
        };
        let w1 = ArrayView2::from_shape((d, h), take(d * h)).unwrap();
        let b1 = ArrayView1::from(take(h));
        let heads = self
            .classes
            .iter()
            .map(|&k| {
                let w = ArrayView2::from_shape((h, k), take(h * k)).unwrap();
                (w, ArrayView1::from(take(k)))
            })
            .collect();
        Params { w1, b1, heads }
    }
}

fn sum_sq<'a>(it: impl IntoIterator<Item = &'a f64>) -> f64 {
    it.into_iter().map(|v| v * v).sum()
}

/// Weighted sum of per-head mean cross-entropies plus
/// `(l2/2)·(|W1|² + Σ|V_t|²)`, with its gradient in the flat layout.
pub fn multitask_objective(
    x: ArrayView2<f64>,
    labels: &[&[usize]],
    layout: &MultitaskLayout,
    loss_weights: &[f64],
    l2: f64,
    theta: &[f64],
) -> (f64, Vec<f64>) {
    let p = layout.unpack(theta);
    let pre = x.dot(&p.w1) + p.b1;
    let hid = pre.mapv(|v| v.max(0.0));
    let mut loss = 0.5 * l2 * sum_sq(p.w1.iter());
    let mut d_hid = Array2::<f64>::zeros(hid.raw_dim());
    let mut head_grads = Vec::with_capacity(p.heads.len());
    for (t, (w, b)) in p.heads.iter().enumerate() {
        let lam = loss_weights[t];
        let logits = hid.dot(w) + b;
        let (ce, resid) = softmax_ce(&logits, labels[t], true);
        let resid = resid.unwrap() * lam;
        loss += lam * ce + 0.5 * l2 * sum_sq(w.iter());
        let gw = hid.t().dot(&resid) + &(w * l2);
        let gb = resid.sum_axis(Axis(0));
        d_hid += &resid.dot(&w.t());
        head_grads.push((gw, gb));
    }
    let d_pre = d_hid * pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let gw1 = x.t().dot(&d_pre) + &(&p.w1 * l2);
    let gb1 = d_pre.sum_axis(Axis(0));

    let mut grad = Vec::with_capacity(theta.len());
    grad.extend(gw1.iter());
    grad.extend(gb1.iter());
    for (gw, gb) in &head_grads {
        grad.extend(gw.iter());
        grad.extend(gb.iter());
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub task: String,
    pub classes: Vec<String>,
    /// hidden x k
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultitaskMeta {
    pub loss_trace: Vec<f64>,
    pub epochs: usize,
    pub converged: bool,
}

/// One shared ReLU layer feeding a softmax head per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultitaskModel {
    /// input_dim x hidden
    pub shared_weights: Array2<f64>,
    pub shared_bias: Array1<f64>,
    pub heads: Vec<TaskHead>,
    pub loss_weights: Vec<f64>,
    pub l2: f64,
    pub meta: MultitaskMeta,
}

impl MultitaskModel {
    pub fn hidden(&self) -> usize {
        self.shared_bias.len()
    }

    /// The shared representation `max(0, x·W1 + b1)`.
    pub fn represent(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.shared_weights.nrows() {
            return Err(Error::Dimension(format!(
                "{} input columns, model expects {}",
                x.ncols(),
                self.shared_weights.nrows()
            )));
        }
        Ok((x.dot(&self.shared_weights) + &self.shared_bias).mapv(|v| v.max(0.0)))
    }

    pub fn head(&self, task: &str) -> Result<&TaskHead> {
        self.heads
            .iter()
            .find(|h| h.task == task)
            .ok_or_else(|| Error::Lookup(format!("no head for task `{task}`")))
    }

    /// Class probabilities of one head.
    pub fn predict_proba(&self, task: &str, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let head = self.head(task)?;
        let mut z = self.represent(x)?.dot(&head.weights) + &head.bias;
        for mut row in z.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let s = row.sum();
            row /= s;
        }
        Ok(z)
    }
}

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;

/// Full-batch gradient descent with backtracking on the multitask
/// objective. Heads start near zero so that heads trained on identical
/// labels stay aligned.
pub fn train_multitask(
    inputs: ArrayView2<f64>,
    tasks: &[TaskTargets],
    config: &MultitaskConfig,
) -> Result<MultitaskModel> {
    if tasks.is_empty() {
        return Err(Error::Parameter(
            "multitask training needs at least one task".into(),
        ));
    }
    if config.hidden == 0 || inputs.ncols() == 0 {
        return Err(Error::Dimension("empty input or hidden layer".into()));
    }
    for t in tasks {
        if t.targets.len() != inputs.nrows() {
            return Err(Error::Dimension(format!(
                "task `{}` has {} labels for {} inputs",
                t.name,
                t.targets.len(),
                inputs.nrows()
            )));
        }
        if t.targets.distinct() < 2 {
            return Err(Error::DegenerateLabels(format!(
                "task `{}` has fewer than two classes",
                t.name
            )));
        }
    }
    let loss_weights = if config.loss_weights.is_empty() {
        vec![1.0; tasks.len()]
    } else if config.loss_weights.len() == tasks.len()
        && config.loss_weights.iter().all(|w| *w >= 0.0)
    {
        config.loss_weights.clone()
    } else {
        return Err(Error::Parameter(
            "need one non-negative loss weight per task".into(),
        ));
    };
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("non-finite input value".into()));
    }

    let layout = MultitaskLayout {
        input_dim: inputs.ncols(),
        hidden: config.hidden,
        classes: tasks.iter().map(|t| t.targets.n_classes()).collect(),
    };
    let labels: Vec<&[usize]> = tasks.iter().map(|t| t.targets.labels.as_slice()).collect();
    let mut rng = rng::seeded(config.seed);
    let he = Normal::new(0.0, (2.0 / layout.input_dim as f64).sqrt()).unwrap();
    let small = Normal::new(0.0, 0.01).unwrap();
    let n_shared = layout.input_dim * layout.hidden;
    let mut theta: Vec<f64> = (0..layout.len())
        .map(|i| {
            if i < n_shared {
                he.sample(&mut rng)
            } else if i < n_shared + layout.hidden {
                0.1
            } else {
                small.sample(&mut rng)
            }
        })
        .collect();

    let objective =
        |th: &[f64]| multitask_objective(inputs, &labels, &layout, &loss_weights, config.l2, th);
    let (mut loss, mut grad) = objective(&theta);
    if !loss.is_finite() {
        return Err(Error::Optimization {
            message: "non-finite initial loss".into(),
            trace: vec![loss],
        });
    }
    let mut trace = vec![loss];
    let mut step = 1.0;
    let mut converged = false;
    let mut epochs = 0;
    while epochs < config.epochs {
        let g2 = sum_sq(grad.iter());
        if g2 == 0.0 {
            converged = true;
            break;
        }
        let accepted = loop {
            let cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
            let (cl, cg) = objective(&cand);
            if cl.is_finite() && cl <= loss - ARMIJO * step * g2 {
                break Some((cand, cl, cg));
            }
            step *= 0.5;
            if step < MIN_STEP {
                if !cl.is_finite() {
                    return Err(Error::Optimization {
                        message: "loss diverged".into(),
                        trace: trace[trace.len().saturating_sub(10)..].to_vec(),
                    });
                }
                break None;
            }
        };
        let Some((cand, cl, cg)) = accepted else {
            converged = true;
            break;
        };
        epochs += 1;
        let improvement = loss - cl;
        theta = cand;
        loss = cl;
        grad = cg;
        trace.push(loss);
        step *= 2.0;
        if improvement < config.tol {
            converged = true;
            break;
        }
    }

    let p = layout.unpack(&theta);
    let heads = tasks
        .iter()
        .zip(&p.heads)
        .map(|(t, (w, b))| TaskHead {
            task: t.name.clone(),
            classes: t.targets.classes.clone(),
            weights: w.to_owned(),
            bias: b.to_owned(),
        })
        .collect();
    Ok(MultitaskModel {
        shared_weights: p.w1.to_owned(),
        shared_bias: p.b1.to_owned(),
        heads,
        loss_weights,
        l2: config.l2,
        meta: MultitaskMeta {
            loss_trace: trace,
            epochs,
            converged,
        },
    })
}

/// Anything with per-task linear heads over a shared representation.
pub trait TaskHeads {
    /// Head weights (representation dim x classes) for `task`.
    fn head_weights(&self, task: &str) -> Result<Array2<f64>>;
}

impl TaskHeads for MultitaskModel {
    fn head_weights(&self, task: &str) -> Result<Array2<f64>> {
        Ok(self.head(task)?.weights.clone())
    }
}

/// A probe's weights mapped back to raw feature units.
impl TaskHeads for ProbeModel {
    fn head_weights(&self, task: &str) -> Result<Array2<f64>> {
        if task != self.task {
            return Err(Error::Lookup(format!(
                "probe was trained for `{}`, not `{task}`",
                self.task
            )));
        }
        let scale = ArrayView1::from(&self.standardization.scale).insert_axis(Axis(1));
        Ok(&self.weights / &scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TaskDirection {
    /// Unit normal of a two-class head, pointing towards the second class.
    Binary(Array1<f64>),
    /// Per-class unit directions relative to the class-average weights.
    PerClass(Vec<Array1<f64>>),
}

impl TaskDirection {
    pub fn binary(&self) -> Option<&Array1<f64>> {
        match self {
            TaskDirection::Binary(v) => Some(v),
            TaskDirection::PerClass(_) => None,
        }
    }
}

pub fn task_direction<M: TaskHeads + ?Sized>(model: &M, task: &str) -> Result<TaskDirection> {
    let w = model.head_weights(task)?;
    if w.ncols() == 2 {
        return Ok(TaskDirection::Binary(unit(&w.column(1) - &w.column(0))));
    }
    let avg = w.mean_axis(Axis(1)).unwrap();
    Ok(TaskDirection::PerClass(
        (0..w.ncols()).map(|c| unit(&w.column(c) - &avg)).collect(),
    ))
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(b) / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::auc;
    use crate::scenario::{generate_scenario, ScenarioKind};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn scenario_tasks(kind: ScenarioKind, n: usize, seed: u64) -> (Array2<f64>, Vec<TaskTargets>) {
        let d = generate_scenario(kind, n, 4.0, seed).unwrap();
        let tasks = vec![
            TaskTargets {
                name: "color".into(),
                targets: Targets::binary(&d.color),
            },
            TaskTargets {
                name: "shape".into(),
                targets: Targets::binary(&d.shape),
            },
        ];
        (d.points, tasks)
    }

    fn head_auc(m: &MultitaskModel, task: &str, x: &Array2<f64>, y: &[usize]) -> f64 {
        let p = m.predict_proba(task, x.view()).unwrap();
        let labels: Vec<bool> = y.iter().map(|&l| l == 1).collect();
        auc(&p.column(1).to_vec(), &labels).unwrap()
    }

    fn accuracy(m: &MultitaskModel, task: &str, x: &Array2<f64>, y: &[usize]) -> f64 {
        let p = m.predict_proba(task, x.view()).unwrap();
        let hits = p
            .rows()
            .into_iter()
            .zip(y)
            .filter(|(r, &l)| usize::from(r[1] > r[0]) == l)
            .count();
        hits as f64 / y.len() as f64
    }

    #[test]
    fn loss_trace_monotone_and_c_learned() {
        let (x, tasks) = scenario_tasks(ScenarioKind::C, 400, 1);
        let m = train_multitask(x.view(), &tasks[..1], &MultitaskConfig::default()).unwrap();
        for w in m.meta.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        let (xt, tt) = scenario_tasks(ScenarioKind::C, 400, 2);
        assert!(head_auc(&m, "color", &xt, &tt[0].targets.labels) >= 0.95);
    }

    #[test]
    fn two_heads_on_b_match_single_task() {
        let (x, tasks) = scenario_tasks(ScenarioKind::B, 400, 3);
        let (xt, tt) = scenario_tasks(ScenarioKind::B, 400, 4);
        let cfg = MultitaskConfig::default();
        let joint = train_multitask(x.view(), &tasks, &cfg).unwrap();
        for (i, t) in tasks.iter().enumerate() {
            let single = train_multitask(x.view(), std::slice::from_ref(t), &cfg).unwrap();
            let y = &tt[i].targets.labels;
            assert!(head_auc(&joint, &t.name, &xt, y) >= 0.95);
            let gap = accuracy(&joint, &t.name, &xt, y) - accuracy(&single, &t.name, &xt, y);
            assert!(gap.abs() <= 0.05, "{gap}");
        }
    }

    #[test]
    fn zero_weight_head_does_not_touch_shared_layer() {
        let (x, mut tasks) = scenario_tasks(ScenarioKind::A, 60, 5);
        let layout = MultitaskLayout {
            input_dim: 2,
            hidden: 4,
            classes: vec![2, 2],
        };
        let mut rng = rng::seeded(1);
        let theta: Vec<f64> = (0..layout.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let grad_for = |tasks: &[TaskTargets]| {
            let labels: Vec<&[usize]> = tasks.iter().map(|t| t.targets.labels.as_slice()).collect();
            multitask_objective(x.view(), &labels, &layout, &[1.0, 0.0], 0.0, &theta).1
        };
        let before = grad_for(&tasks);
        tasks[1].targets.labels.iter_mut().for_each(|l| *l = 1 - *l);
        let after = grad_for(&tasks);
        let shared = 2 * 4 + 4;
        assert_eq!(before[..shared], after[..shared]);
    }

    #[test]
    fn degenerate_task_named() {
        let x = Array2::zeros((4, 2));
        let tasks = vec![TaskTargets {
            name: "sex".into(),
            targets: Targets::binary(&[false; 4]),
        }];
        match train_multitask(x.view(), &tasks, &MultitaskConfig::default()) {
            Err(Error::DegenerateLabels(m)) => assert!(m.contains("sex")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicated_labels_give_aligned_heads() {
        let (x, tasks) = scenario_tasks(ScenarioKind::B, 400, 6);
        let dup = vec![
            tasks[0].clone(),
            TaskTargets {
                name: "copy".into(),
                targets: tasks[0].targets.clone(),
            },
        ];
        let m = train_multitask(x.view(), &dup, &MultitaskConfig::default()).unwrap();
        let a = task_direction(&m, "color").unwrap();
        let b = task_direction(&m, "copy").unwrap();
        let cos = cosine(a.binary().unwrap(), b.binary().unwrap());
        assert!(cos.abs() >= 0.99, "{cos}");
    }

    #[test]
    fn multiclass_head_gives_per_class_directions() {
        let mut rng = rng::seeded(2);
        let x = Array2::from_shape_fn((90, 3), |_| rng.random_range(-1.0..1.0));
        let tasks = vec![TaskTargets {
            name: "g".into(),
            targets: Targets::new(
                vec!["a".into(), "b".into(), "c".into()],
                (0..90).map(|i| i % 3).collect(),
            )
            .unwrap(),
        }];
        let cfg = MultitaskConfig {
            epochs: 20,
            ..Default::default()
        };
        let m = train_multitask(x.view(), &tasks, &cfg).unwrap();
        match task_direction(&m, "g").unwrap() {
            TaskDirection::PerClass(v) => assert_eq!(v.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn gradient_matches_central_differences(seed in 0u64..10_000, d in 1usize..=6, n in 2usize..=40, h in 1usize..=6, k2 in 2usize..=3) {
            let mut rng = rng::seeded(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let x = Array2::from_shape_fn((n, d), |_| normal.sample(&mut rng));
            let y1: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let y2: Vec<usize> = (0..n).map(|_| rng.random_range(0..k2)).collect();
            let layout = MultitaskLayout { input_dim: d, hidden: h, classes: vec![2, k2] };
            let theta: Vec<f64> = (0..layout.len()).map(|_| normal.sample(&mut rng)).collect();
            let labels: Vec<&[usize]> = vec![&y1, &y2];
            let weights = [1.0, 0.7];
            let (_, g) = multitask_objective(x.view(), &labels, &layout, &weights, 0.05, &theta);
            let step = 1e-5;
            let num: Vec<f64> = (0..theta.len()).map(|i| {
                let mut tp = theta.clone();
                tp[i] += step;
                let mut tm = theta.clone();
                tm[i] -= step;
                let fp = multitask_objective(x.view(), &labels, &layout, &weights, 0.05, &tp).0;
                let fm = multitask_objective(x.view(), &labels, &layout, &weights, 0.05, &tm).0;
                (fp - fm) / (2.0 * step)
            }).collect();
            let diff = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = sum_sq(g.iter()).sqrt().max(sum_sq(num.iter()).sqrt()).max(1e-8);
            prop_assert!(diff / scale <= 1e-4, "relative error {}", diff / scale);
        }
    }
}
