//! Ground-truth temporal SCM: `S -> X^t -> Y^t -> X^{t+1}` with time-invariant mechanisms.
//!
//! Decisions are Bernoulli draws from a frozen classifier, and features move along
//! the gradient of that classifier's log-likelihood of a positive decision:
//!
//! ```text
//! X^{t+1} = X^t - eps * (2 Y^t - 1) * d/dX^t [ -log h*(S, X^t) ]
//! ```

mod csv_io;

pub use csv_io::{load_dataset_csv, load_initial_cohort_csv, write_cohort_csv, write_dataset_csv};

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{batch_inputs, Bind, Decision, MlpClassifier, Parameterized};
use crate::seeds::Rng;

/// Individuals at the first time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    d: usize,
    s: Vec<u8>,
    x1: Vec<f64>,
    y1: Option<Vec<u8>>,
}

impl Cohort {
    pub fn new(d: usize, s: Vec<u8>, x1: Vec<f64>, y1: Option<Vec<u8>>) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("d", "feature dimension must be at least 1"));
        }
        if x1.len() != s.len() * d {
            return Err(Error::shape(
                "cohort",
                format!("{} individuals but {} feature values at width {d}", s.len(), x1.len()),
            ));
        }
        if let Some(i) = s.iter().position(|&v| v > 1) {
            return Err(Error::invalid(
                "s",
                format!("row {i}: sensitive attribute must be 0 or 1"),
            ));
        }
        if let Some(y) = &y1 {
            if y.len() != s.len() {
                return Err(Error::shape("cohort", "y1 length differs from s"));
            }
            if let Some(i) = y.iter().position(|&v| v > 1) {
                return Err(Error::invalid("y", format!("row {i}: decision must be 0 or 1")));
            }
        }
        if x1.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "cohort features".into(),
            });
        }
        Ok(Cohort { d, s, x1, y1 })
    }

    pub fn n(&self) -> usize {
        self.s.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn s(&self) -> &[u8] {
        &self.s
    }

    pub fn x1(&self) -> &[f64] {
        &self.x1
    }

    pub fn y1(&self) -> Option<&[u8]> {
        self.y1.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x1[i * self.d..(i + 1) * self.d]
    }

    pub fn subset(&self, idx: &[usize]) -> Cohort {
        Cohort {
            d: self.d,
            s: idx.iter().map(|&i| self.s[i]).collect(),
            x1: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            y1: self.y1.as_ref().map(|y| idx.iter().map(|&i| y[i]).collect()),
        }
    }
}

/// Per-individual trajectories `(S, X^t, Y^t)` for `t = 1..=horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    d: usize,
    horizon: usize,
    s: Vec<u8>,
    /// `n x horizon x d`, row-major.
    x: Vec<f64>,
    /// `n x horizon`.
    y: Vec<u8>,
}

impl TimeSeriesDataset {
    pub fn new(d: usize, horizon: usize, s: Vec<u8>, x: Vec<f64>, y: Vec<u8>) -> Result<Self> {
        let n = s.len();
        if d == 0 || horizon == 0 {
            return Err(Error::invalid("dataset", "d and horizon must be at least 1"));
        }
        if x.len() != n * horizon * d || y.len() != n * horizon {
            return Err(Error::shape(
                "dataset",
                format!(
                    "n={n}, horizon={horizon}, d={d} vs {} features and {} decisions",
                    x.len(),
                    y.len()
                ),
            ));
        }
        if s.iter().chain(&y).any(|&v| v > 1) {
            return Err(Error::invalid("dataset", "s and y must be binary"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "dataset features".into(),
            });
        }
        Ok(TimeSeriesDataset { d, horizon, s, x, y })
    }

    pub fn n(&self) -> usize {
        self.s.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn s(&self) -> &[u8] {
        &self.s
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    /// Features of individual `i` at zero-based step `k`.
    pub fn features(&self, i: usize, k: usize) -> &[f64] {
        let off = (i * self.horizon + k) * self.d;
        &self.x[off..off + self.d]
    }

    pub fn decision(&self, i: usize, k: usize) -> u8 {
        self.y[i * self.horizon + k]
    }

    /// Whole trajectory of individual `i` (`horizon x d`).
    pub fn trajectory(&self, i: usize) -> &[f64] {
        &self.x[i * self.horizon * self.d..(i + 1) * self.horizon * self.d]
    }

    /// All individuals' features at zero-based step `k`, `n x d`.
    pub fn step_features(&self, k: usize) -> Vec<f64> {
        (0..self.n())
            .flat_map(|i| self.features(i, k).iter().copied())
            .collect()
    }

    pub fn step_decisions(&self, k: usize) -> Vec<u8> {
        (0..self.n()).map(|i| self.decision(i, k)).collect()
    }

    /// Every `(s, x^t, y^t)` triple, individual-major.
    pub fn flat_rows(&self) -> (Vec<u8>, Vec<f64>, Vec<u8>) {
        let s = self
            .s
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, self.horizon))
            .collect();
        (s, self.x.clone(), self.y.clone())
    }

    /// First-step view.
    pub fn cohort(&self) -> Cohort {
        Cohort {
            d: self.d,
            s: self.s.clone(),
            x1: self.step_features(0),
            y1: Some(self.step_decisions(0)),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> TimeSeriesDataset {
        TimeSeriesDataset {
            d: self.d,
            horizon: self.horizon,
            s: idx.iter().map(|&i| self.s[i]).collect(),
            x: idx.iter().flat_map(|&i| self.trajectory(i).iter().copied()).collect(),
            y: idx
                .iter()
                .flat_map(|&i| self.y[i * self.horizon..(i + 1) * self.horizon].iter().copied())
                .collect(),
        }
    }
}

/// Frozen classifier `h*` and the feature-update magnitude `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthModel {
    classifier: MlpClassifier,
    epsilon: f64,
}

pub const DEFAULT_EPSILON: f64 = 0.05;

impl GroundTruthModel {
    pub fn new(mut classifier: MlpClassifier, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid("epsilon", "must be a finite non-negative number"));
        }
        classifier.set_trainable(false);
        Ok(GroundTruthModel { classifier, epsilon })
    }

    pub fn classifier(&self) -> &MlpClassifier {
        &self.classifier
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.feature_dim()
    }
}

/// Two-cluster Gaussian cohort.
///
/// Features are `N(+-(sep/2) u, I)` with `u = (1, .., 1)/sqrt(d)`; `S` is the
/// component (balanced). `Y^1` thresholds a random linear score at its median.
pub fn generate_initial_cohort(n: usize, d: usize, cluster_separation: f64, seed: u64) -> Result<Cohort> {
    if n < 2 {
        return Err(Error::invalid("n", "need at least two individuals"));
    }
    if d == 0 {
        return Err(Error::invalid("d", "feature dimension must be at least 1"));
    }
    if !cluster_separation.is_finite() {
        return Err(Error::invalid("cluster_separation", "must be finite"));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut s: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    s.shuffle(&mut rng);

    let shift = 0.5 * cluster_separation / (d as f64).sqrt();
    let mut x1 = Vec::with_capacity(n * d);
    for &g in &s {
        let sign = if g == 1 { 1.0 } else { -1.0 };
        for _ in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            x1.push(sign * shift + z);
        }
    }

    let w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let scores: Vec<f64> = x1
        .chunks(d)
        .map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum())
        .collect();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n.is_multiple_of(2) {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    } else {
        sorted[n / 2]
    };
    let y1 = scores.iter().map(|&v| u8::from(v > median)).collect();
    Cohort::new(d, s, x1, Some(y1))
}

/// Bernoulli draw from the ground-truth decision probability.
pub fn sample_decision(gt: &GroundTruthModel, s: u8, x: &[f64], rng: &mut Rng) -> Result<u8> {
    let p = gt.classifier.predict(s, x)?;
    Ok(u8::from(rng.random::<f64>() < p))
}

/// Gradient of `-log h*(s, x)` w.r.t. each row of `x` (`n x d`).
pub fn positive_loss_gradient(gt: &GroundTruthModel, s: &[u8], x: &[f64]) -> Result<Vec<f64>> {
    let d = gt.feature_dim();
    let mut tape = Tape::new();
    let net = gt.classifier.bind_frozen(&mut tape);
    let (sv, _) = batch_inputs(&mut tape, s, x, d)?;
    let xv = tape.leaf(&Tensor::param(vec![s.len(), d], x.to_vec())?);
    let logits = net.logits(&mut tape, sv, xv)?;
    // -log sigmoid(z) = softplus(-z); rows are independent so the sum separates.
    let neg = tape.neg(logits)?;
    let losses = tape.softplus(neg)?;
    let total = tape.sum(losses)?;
    tape.backward(total)?;
    Ok(tape.grad_or_zeros(xv))
}

/// One feature update for a batch of individuals.
pub fn step_features_batch(gt: &GroundTruthModel, s: &[u8], x: &[f64], y: &[u8]) -> Result<Vec<f64>> {
    let d = gt.feature_dim();
    if y.len() != s.len() {
        return Err(Error::shape("step_features", "y length differs from s"));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::invalid("y", "decision must be 0 or 1"));
    }
    let grad = positive_loss_gradient(gt, s, x)?;
    let eps = gt.epsilon;
    let next: Vec<f64> = x
        .iter()
        .zip(&grad)
        .enumerate()
        .map(|(k, (xi, gi))| {
            let sign = 2.0 * f64::from(y[k / d]) - 1.0;
            xi - eps * sign * gi
        })
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "step_features".into(),
        });
    }
    Ok(next)
}

/// `X^{t+1}` for one individual.
pub fn step_features(gt: &GroundTruthModel, s: u8, x: &[f64], y: u8) -> Result<Vec<f64>> {
    step_features_batch(gt, &[s], x, &[y])
}

/// Simulates `horizon` steps of the true dynamics from `cohort`.
///
/// With `policy = None` decisions come from `h*` (observational process);
/// otherwise `policy` replaces the decision mechanism (soft intervention).
/// Features always evolve under `h*`. Uniform draws are consumed in
/// individual order at each step.
pub fn roll_out_truth(
    gt: &GroundTruthModel,
    cohort: &Cohort,
    policy: Option<&MlpClassifier>,
    horizon: usize,
    rng: &mut Rng,
) -> Result<TimeSeriesDataset> {
    if horizon == 0 {
        return Err(Error::invalid("horizon", "must be at least 1"));
    }
    let d = cohort.d();
    if d != gt.feature_dim() {
        return Err(Error::shape(
            "roll_out_truth",
            "cohort width differs from the ground-truth model",
        ));
    }
    let decider = policy.unwrap_or(&gt.classifier);
    if decider.feature_dim() != d {
        return Err(Error::shape("roll_out_truth", "policy width differs from the cohort"));
    }
    let n = cohort.n();
    let mut steps_x: Vec<Vec<f64>> = vec![cohort.x1().to_vec()];
    let mut steps_y: Vec<Vec<u8>> = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let x = &steps_x[k];
        let p = {
            let mut tape = Tape::new();
            let net = decider.bind_frozen(&mut tape);
            let (sv, xv) = batch_inputs(&mut tape, cohort.s(), x, d)?;
            let p = net.prob(&mut tape, sv, xv)?;
            tape.value(p).to_vec()
        };
        let y: Vec<u8> = p.iter().map(|&q| u8::from(rng.random::<f64>() < q)).collect();
        if k + 1 < horizon {
            let next = step_features_batch(gt, cohort.s(), x, &y)?;
            steps_x.push(next);
        }
        steps_y.push(y);
    }
    let mut xs = Vec::with_capacity(n * horizon * d);
    let mut ys = Vec::with_capacity(n * horizon);
    for i in 0..n {
        for k in 0..horizon {
            xs.extend_from_slice(&steps_x[k][i * d..(i + 1) * d]);
            ys.push(steps_y[k][i]);
        }
    }
    TimeSeriesDataset::new(d, horizon, cohort.s().to_vec(), xs, ys)
}

/// Mean ground-truth probability per step over the individuals with `Y^t = 1`,
/// at `t` and at `t + 1`.
pub fn positive_group_drift(gt: &GroundTruthModel, ds: &TimeSeriesDataset) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for k in 0..ds.horizon().saturating_sub(1) {
        let y = ds.step_decisions(k);
        let idx: Vec<usize> = (0..ds.n()).filter(|&i| y[i] == 1).collect();
        if idx.is_empty() {
            continue;
        }
        let s: Vec<u8> = idx.iter().map(|&i| ds.s()[i]).collect();
        let now: Vec<f64> = idx.iter().flat_map(|&i| ds.features(i, k).iter().copied()).collect();
        let next: Vec<f64> = idx
            .iter()
            .flat_map(|&i| ds.features(i, k + 1).iter().copied())
            .collect();
        let p_now = gt.classifier.predict_batch(&s, &now)?;
        let p_next = gt.classifier.predict_batch(&s, &next)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        out.push((mean(&p_now), mean(&p_next)));
    }
    Ok(out)
}
