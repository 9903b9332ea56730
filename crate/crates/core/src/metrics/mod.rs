//! Fairness and distribution-distance metrics.

mod transport;

pub use transport::{
    sinkhorn_divergence, sinkhorn_divergence_tape, wasserstein1_exact_1d, SinkhornConfig, SinkhornOutput,
    WeightedSample,
};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{Decision, MlpClassifier, Rollout};
use crate::seeds::Rng;

// ---------------------------------------------------------------------------
// Maximum mean discrepancy

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance over the pooled sample.
    Median,
}

fn median_bandwidth(a: &[f64], b: &[f64], d: usize) -> f64 {
    let pooled: Vec<&[f64]> = a.chunks_exact(d).chain(b.chunks_exact(d)).collect();
    let mut dists = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            let sq: f64 = pooled[i].iter().zip(pooled[j]).map(|(x, y)| (x - y) * (x - y)).sum();
            dists.push(sq.sqrt());
        }
    }
    let m = transport::median(&dists);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Biased (V-statistic) squared MMD with a Gaussian kernel `exp(-|x-y|^2 / (2 sigma^2))`.
pub fn mmd_rbf_tape(tape: &mut Tape, a: Var, b: Var, bandwidth: Bandwidth) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::shape("mmd_rbf", format!("{sa:?} vs {sb:?}")));
    }
    if sa[0] == 0 || sb[0] == 0 {
        return Err(Error::invalid("mmd_rbf", "empty sample"));
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => s,
        Bandwidth::Fixed(s) => return Err(Error::invalid("bandwidth", format!("{s} is not positive"))),
        Bandwidth::Median => median_bandwidth(tape.value(a), tape.value(b), sa[1]),
    };
    let scale = -1.0 / (2.0 * sigma * sigma);
    let mut kernel_mean = |x: Var, y: Var| -> Result<Var> {
        let sq = tape.pairwise_sq_dist(x, y)?;
        let scaled = tape.scale(sq, scale)?;
        let k = tape.exp(scaled)?;
        tape.mean(k)
    };
    let kaa = kernel_mean(a, a)?;
    let kbb = kernel_mean(b, b)?;
    let kab = kernel_mean(a, b)?;
    let same = tape.add(kaa, kbb)?;
    let cross = tape.scale(kab, 2.0)?;
    tape.sub(same, cross)
}

/// Off-tape form of [`mmd_rbf_tape`] over row-major `m x d` and `n x d` matrices.
pub fn mmd_rbf(a: &[f64], b: &[f64], d: usize, bandwidth: Bandwidth) -> Result<f64> {
    if d == 0 || !a.len().is_multiple_of(d) || !b.len().is_multiple_of(d) {
        return Err(Error::shape(
            "mmd_rbf",
            format!("{} and {} values with d = {d}", a.len(), b.len()),
        ));
    }
    let mut tape = Tape::new();
    let av = tape.constant(vec![a.len() / d, d], a.to_vec())?;
    let bv = tape.constant(vec![b.len() / d, d], b.to_vec())?;
    let v = mmd_rbf_tape(&mut tape, av, bv, bandwidth)?;
    Ok(tape.item(v))
}

// ---------------------------------------------------------------------------
// Group fairness

/// Batch scoring interface for decision functions: `P(Y = 1 | s, x)` per row.
pub trait Scorer {
    fn score(&self, s: &[u8], x: &[f64]) -> Result<Vec<f64>>;
}

impl Scorer for MlpClassifier {
    fn score(&self, s: &[u8], x: &[f64]) -> Result<Vec<f64>> {
        self.predict_batch(s, x)
    }
}

/// Adapts a per-row closure `(s, x) -> probability`.
pub struct RowScorer<F>(pub F, pub usize);

impl<F: Fn(u8, &[f64]) -> f64> Scorer for RowScorer<F> {
    fn score(&self, s: &[u8], x: &[f64]) -> Result<Vec<f64>> {
        let d = self.1;
        if d == 0 || x.len() != s.len() * d {
            return Err(Error::shape(
                "score",
                format!("{} rows, {} values, d = {d}", s.len(), x.len()),
            ));
        }
        Ok(s.iter()
            .zip(x.chunks_exact(d))
            .map(|(&si, xi)| (self.0)(si, xi))
            .collect())
    }
}

fn group_mean(values: &[f64], keep: impl Fn(usize) -> bool, cell: &str) -> Result<f64> {
    let (sum, count) = values
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .fold((0.0, 0usize), |(s, c), (_, v)| (s + v, c + 1));
    if count == 0 {
        return Err(Error::EmptyGroup(cell.into()));
    }
    Ok(sum / count as f64)
}

/// `|E[f | S=1] - E[f | S=0]|`.
pub fn demographic_parity(f: &dyn Scorer, s: &[u8], x: &[f64]) -> Result<f64> {
    let p = f.score(s, x)?;
    let m1 = group_mean(&p, |i| s[i] == 1, "S=1")?;
    let m0 = group_mean(&p, |i| s[i] == 0, "S=0")?;
    Ok((m1 - m0).abs())
}

/// `|E[f | Y=1, S=1] - E[f | Y=1, S=0]|`.
pub fn equal_opportunity(f: &dyn Scorer, s: &[u8], x: &[f64], y: &[u8]) -> Result<f64> {
    if y.len() != s.len() {
        return Err(Error::shape(
            "equal_opportunity",
            format!("{} labels for {} rows", y.len(), s.len()),
        ));
    }
    let p = f.score(s, x)?;
    let m1 = group_mean(&p, |i| y[i] == 1 && s[i] == 1, "Y=1, S=1")?;
    let m0 = group_mean(&p, |i| y[i] == 1 && s[i] == 0, "Y=1, S=0")?;
    Ok((m1 - m0).abs())
}

/// `|E[f(1, X)] - E[f(0, X)]|` over the rows `x_minus` of the `S = 0` group.
pub fn direct_discrimination(f: &dyn Scorer, x_minus: &[f64], d: usize) -> Result<f64> {
    if d == 0 || !x_minus.len().is_multiple_of(d) {
        return Err(Error::shape(
            "direct_discrimination",
            format!("{} values, d = {d}", x_minus.len()),
        ));
    }
    let n = x_minus.len() / d;
    if n == 0 {
        return Err(Error::EmptyGroup("S=0".into()));
    }
    let up = f.score(&vec![1; n], x_minus)?;
    let down = f.score(&vec![0; n], x_minus)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    Ok((mean(&up) - mean(&down)).abs())
}

/// Differentiable direct discrimination; `x_minus` is `[n x d]`.
pub fn direct_discrimination_tape(tape: &mut Tape, f: &dyn Decision, x_minus: Var) -> Result<Var> {
    let n = tape.shape(x_minus)[0];
    if n == 0 {
        return Err(Error::EmptyGroup("S=0".into()));
    }
    let ones = tape.constant(vec![n, 1], vec![1.0; n])?;
    let zeros = tape.constant(vec![n, 1], vec![0.0; n])?;
    let up = f.prob(tape, ones, x_minus)?;
    let down = f.prob(tape, zeros, x_minus)?;
    let mu = tape.mean(up)?;
    let md = tape.mean(down)?;
    let diff = tape.sub(mu, md)?;
    tape.abs(diff)
}

/// `|mean(p[rows_a]) - mean(p[rows_b])|` on the tape, for soft fairness gaps.
pub fn soft_gap_tape(tape: &mut Tape, p: Var, rows_a: &[usize], rows_b: &[usize]) -> Result<Var> {
    if rows_a.is_empty() || rows_b.is_empty() {
        return Err(Error::EmptyGroup("soft gap".into()));
    }
    let pa = tape.select_rows(p, rows_a)?;
    let pb = tape.select_rows(p, rows_b)?;
    let ma = tape.mean(pa)?;
    let mb = tape.mean(pb)?;
    let diff = tape.sub(ma, mb)?;
    tape.abs(diff)
}

pub(crate) fn group_rows(s: &[u8]) -> (Vec<usize>, Vec<usize>) {
    let plus = (0..s.len()).filter(|&i| s[i] == 1).collect();
    let minus = (0..s.len()).filter(|&i| s[i] == 0).collect();
    (plus, minus)
}

// ---------------------------------------------------------------------------
// Long-term unfairness

/// Sinkhorn divergence between the `S=1` and `S=0` feature clouds at step `target_t` of a rollout.
pub fn long_term_unfairness(
    tape: &mut Tape,
    rollout: &Rollout,
    s: &[u8],
    target_t: usize,
    cfg: &SinkhornConfig,
) -> Result<(Var, SinkhornOutput)> {
    if target_t == 0 || target_t > rollout.horizon() {
        return Err(Error::invalid(
            "target_T",
            format!("{target_t} outside the rollout horizon 1..={}", rollout.horizon()),
        ));
    }
    let x = rollout.xs[target_t - 1];
    group_divergence_tape(tape, x, s, cfg)
}

/// Sinkhorn divergence between the two S-groups of the rows of `x`.
pub fn group_divergence_tape(tape: &mut Tape, x: Var, s: &[u8], cfg: &SinkhornConfig) -> Result<(Var, SinkhornOutput)> {
    if tape.shape(x).first() != Some(&s.len()) {
        return Err(Error::shape(
            "long_term_unfairness",
            format!("{:?} for {} rows", tape.shape(x), s.len()),
        ));
    }
    let (plus, minus) = group_rows(s);
    if plus.is_empty() || minus.is_empty() {
        return Err(Error::EmptyGroup(if plus.is_empty() { "S=1" } else { "S=0" }.into()));
    }
    let xp = tape.select_rows(x, &plus)?;
    let xm = tape.select_rows(x, &minus)?;
    let wp = vec![1.0 / plus.len() as f64; plus.len()];
    let wm = vec![1.0 / minus.len() as f64; minus.len()];
    sinkhorn_divergence_tape(tape, xp, &wp, xm, &wm, cfg)
}

/// Off-tape group divergence of row-major features `x` (`n x d`).
pub fn group_divergence(x: &[f64], s: &[u8], d: usize, cfg: &SinkhornConfig) -> Result<SinkhornOutput> {
    let mut tape = Tape::new();
    let xv = tape.constant(vec![s.len(), d], x.to_vec())?;
    Ok(group_divergence_tape(&mut tape, xv, s, cfg)?.1)
}

// ---------------------------------------------------------------------------
// DP / EO bounds from the group transport distance

/// `sigmoid(w . x + b)`, an S-unaware model with Lipschitz constant `|w| / 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmoidAffine {
    pub w: Vec<f64>,
    pub b: f64,
}

impl SigmoidAffine {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let z: f64 = self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b;
        crate::autodiff::stable_sigmoid(z)
    }

    pub fn lipschitz(&self) -> f64 {
        self.w.iter().map(|w| w * w).sum::<f64>().sqrt() / 4.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub distance: f64,
    pub dp: f64,
    pub dp_bound: f64,
    pub dp_slack: f64,
    pub eo: f64,
    pub eo_bound: f64,
    pub eo_slack: f64,
    pub holds: bool,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var)
}

/// Checks `DP(f) <= l_f d` and `EO(f) <= (l_f + l_g) / P(y) d` empirically.
///
/// Labels are drawn from `g`. The transport distance `d` is exact in one
/// dimension and a Sinkhorn divergence otherwise. Each inequality gets a slack
/// of `1e-6` plus three standard errors of the estimated gap.
pub fn verify_dp_eo_bounds(
    f: &SigmoidAffine,
    g: &SigmoidAffine,
    plus: &WeightedSample,
    minus: &WeightedSample,
    base_rate: f64,
    rng: &mut Rng,
) -> Result<BoundCheck> {
    let d = plus.d();
    if minus.d() != d || f.w.len() != d || g.w.len() != d {
        return Err(Error::shape(
            "verify_dp_eo_bounds",
            "model and sample dimensions differ",
        ));
    }
    if !(base_rate > 0.0 && base_rate <= 1.0) {
        return Err(Error::invalid("base_rate", "must lie in (0, 1]"));
    }
    let distance = if d == 1 && plus.len() == minus.len() {
        wasserstein1_exact_1d(plus.points(), minus.points())?
    } else {
        sinkhorn_divergence(plus, minus, &SinkhornConfig::default())?
            .value
            .max(0.0)
    };

    let mut dp_parts = Vec::new();
    let mut eo_parts = Vec::new();
    for (i, group) in [plus, minus].into_iter().enumerate() {
        let fx: Vec<f64> = group.points().chunks_exact(d).map(|x| f.eval(x)).collect();
        let positives: Vec<f64> = group
            .points()
            .chunks_exact(d)
            .zip(&fx)
            .filter(|(x, _)| rng.random::<f64>() < g.eval(x))
            .map(|(_, v)| *v)
            .collect();
        if positives.is_empty() {
            return Err(Error::EmptyGroup(format!("Y=1, S={}", 1 - i)));
        }
        dp_parts.push((mean_var(&fx), fx.len() as f64));
        eo_parts.push((mean_var(&positives), positives.len() as f64));
    }
    let gap = |parts: &[((f64, f64), f64)]| {
        let diff = (parts[0].0 .0 - parts[1].0 .0).abs();
        let se = parts.iter().map(|((_, var), n)| var / n).sum::<f64>().sqrt();
        (diff, 1e-6 + 3.0 * se)
    };
    let (dp, dp_slack) = gap(&dp_parts);
    let (eo, eo_slack) = gap(&eo_parts);
    let dp_bound = f.lipschitz() * distance;
    let eo_bound = (f.lipschitz() + g.lipschitz()) / base_rate * distance;
    Ok(BoundCheck {
        distance,
        dp,
        dp_bound,
        dp_slack,
        eo,
        eo_bound,
        eo_slack,
        holds: dp <= dp_bound + dp_slack && eo <= eo_bound + eo_slack,
    })
}
