//! Optimal transport between point clouds: the exact 1-D distance and the
//! (debiased) entropic Sinkhorn divergence with Euclidean ground cost.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Points (`m x d`, row-major) with probability weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    points: Vec<f64>,
    weights: Vec<f64>,
    d: usize,
}

impl WeightedSample {
    pub fn uniform(points: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 || points.is_empty() || !points.len().is_multiple_of(d) {
            return Err(Error::shape(
                "weighted_sample",
                format!("{} values cannot form rows of width {d}", points.len()),
            ));
        }
        let m = points.len() / d;
        Self::new(points, d, vec![1.0 / m as f64; m])
    }

    pub fn new(points: Vec<f64>, d: usize, weights: Vec<f64>) -> Result<Self> {
        if d == 0 || weights.is_empty() || points.len() != weights.len() * d {
            return Err(Error::shape(
                "weighted_sample",
                format!("{} values, {} weights, d = {d}", points.len(), weights.len()),
            ));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("points", "must be finite"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("weights", "must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("weights", format!("sum to {total}, not 1")));
        }
        Ok(WeightedSample { points, weights, d })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    /// Entropic regularization; multiplied by the median cross cost when `relative_reg` is set.
    pub reg: f64,
    pub relative_reg: bool,
    pub max_iter: usize,
    /// Stop once the L1 marginal violation falls below this.
    pub tol: f64,
    pub debias: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            reg: 0.05,
            relative_reg: true,
            max_iter: 500,
            tol: 1e-6,
            debias: true,
        }
    }
}

impl SinkhornConfig {
    pub fn absolute(reg: f64) -> Self {
        SinkhornConfig {
            reg,
            relative_reg: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reg > 0.0) || !self.reg.is_finite() {
            return Err(Error::invalid("sinkhorn.reg", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("sinkhorn.max_iter", "must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("sinkhorn.tol", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOutput {
    pub value: f64,
    pub converged: bool,
    /// Regularization actually used.
    pub eps: f64,
    /// Largest iteration count over the solved problems.
    pub iterations: usize,
}

/// Mean absolute difference of the sorted samples (equal sizes only).
pub fn wasserstein1_exact_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(
            "wasserstein1_exact_1d",
            format!("sizes {} and {}; equal nonzero sizes required", a.len(), b.len()),
        ));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

fn cost_matrix(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut c = Vec::with_capacity(a.len() / d * b.len() / d);
    for ai in a.chunks_exact(d) {
        for bj in b.chunks_exact(d) {
            c.push(ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
    }
    c
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    let mid = v.len() / 2;
    let (_, hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *hi;
    if v.len() % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Where the regularization strength came from; relative strengths are
/// differentiated through the cost entries they were computed from.
#[derive(Debug, Clone, Copy, PartialEq)]
enum RegSource {
    Fixed,
    Median,
    Mean,
}

fn regularization(cfg: &SinkhornConfig, cross_cost: &[f64]) -> (f64, RegSource) {
    if !cfg.relative_reg {
        return (cfg.reg, RegSource::Fixed);
    }
    let m = median(cross_cost);
    if m > 0.0 {
        return (cfg.reg * m, RegSource::Median);
    }
    let mean = cross_cost.iter().sum::<f64>() / cross_cost.len().max(1) as f64;
    if mean > 0.0 {
        return (cfg.reg * mean, RegSource::Mean);
    }
    (cfg.reg, RegSource::Fixed)
}

/// Positions of the entries whose average is the median.
fn median_positions(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mid = idx.len() / 2;
    if idx.len() % 2 == 1 {
        vec![idx[mid]]
    } else {
        vec![idx[mid - 1], idx[mid]]
    }
}

struct Solution {
    value: f64,
    plan: Vec<f64>,
    /// Derivative of the dual value with respect to `eps` at the returned potentials.
    eps_slope: f64,
    converged: bool,
    iterations: usize,
}

/// `-eps * log sum_j w_j exp((pot_j - cost_j) / eps)` over one row or column.
fn soft_min(eps: f64, log_w: &[f64], pot: &[f64], cost: impl Fn(usize) -> f64) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for j in 0..pot.len() {
        max = max.max(log_w[j] + (pot[j] - cost(j)) / eps);
    }
    if max == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = (0..pot.len())
        .map(|j| (log_w[j] + (pot[j] - cost(j)) / eps - max).exp())
        .sum();
    -eps * (max + s.ln())
}

fn log_weights(w: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|&x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY })
        .collect()
}

/// Log-domain Sinkhorn with geometric annealing of the regularization down
/// to `eps`; `max_iter` counts iterations at the target regularization.
///
/// Symmetric problems (same weights, symmetric cost) use the averaged update
/// `f <- (f + T(f)) / 2` with `g = f`, which avoids the oscillation of plain
/// alternation. An `A`-versus-`A` cross term therefore runs exactly the same
/// computation as the matching self term.
fn entropic_ot(a: &[f64], b: &[f64], cost: &[f64], eps: f64, max_iter: usize, tol: f64) -> Solution {
    let (m, n) = (a.len(), b.len());
    let (la, lb) = (log_weights(a), log_weights(b));
    let symmetric = a == b && (0..m).all(|i| (0..i).all(|j| cost[i * n + j] == cost[j * n + i]));
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let c_max = cost.iter().copied().fold(0.0, f64::max);
    let mut cur = c_max.max(eps);
    let plan = |f: &[f64], g: &[f64]| -> Vec<f64> {
        let mut p = vec![0.0; m * n];
        for i in (0..m).filter(|&i| a[i] > 0.0) {
            for j in (0..n).filter(|&j| b[j] > 0.0) {
                p[i * n + j] = a[i] * b[j] * ((f[i] + g[j] - cost[i * n + j]) / eps).exp();
            }
        }
        p
    };

    let mut converged = false;
    let mut iterations = 0;
    loop {
        if symmetric {
            let t: Vec<f64> = (0..m).map(|i| soft_min(cur, &la, &f, |j| cost[i * n + j])).collect();
            for (fi, ti) in f.iter_mut().zip(t) {
                *fi = 0.5 * (*fi + ti);
            }
            g.copy_from_slice(&f);
        } else {
            for i in 0..m {
                f[i] = soft_min(cur, &lb, &g, |j| cost[i * n + j]);
            }
            for j in 0..n {
                g[j] = soft_min(cur, &la, &f, |i| cost[i * n + j]);
            }
        }
        if cur > eps {
            cur = (cur * 0.5).max(eps);
            continue;
        }
        iterations += 1;
        let p = plan(&f, &g);
        let rows: f64 = (0..m)
            .map(|i| (p[i * n..(i + 1) * n].iter().sum::<f64>() - a[i]).abs())
            .sum();
        let cols: f64 = (0..n)
            .map(|j| ((0..m).map(|i| p[i * n + j]).sum::<f64>() - b[j]).abs())
            .sum();
        if rows + cols < tol {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }
    }

    let p = plan(&f, &g);
    let dot = |w: &[f64], v: &[f64]| -> f64 { w.iter().zip(v).filter(|(w, _)| **w > 0.0).map(|(w, v)| w * v).sum() };
    // Full dual objective: stationary in (f, g) and with derivative `p` in the cost.
    let mass: f64 = p.iter().sum();
    let value = dot(a, &f) + dot(b, &g) - eps * (mass - 1.0);
    let mut gap = 0.0;
    for i in 0..m {
        for j in 0..n {
            if p[i * n + j] > 0.0 {
                gap += p[i * n + j] * (f[i] + g[j] - cost[i * n + j]);
            }
        }
    }
    let eps_slope = 1.0 - mass + gap / eps;
    Solution {
        value,
        plan: p,
        eps_slope,
        converged,
        iterations,
    }
}

struct Divergence {
    terms: Vec<(f64, Solution)>,
    reg_source: RegSource,
    out: SinkhornOutput,
}

fn divergence(pa: &[f64], wa: &[f64], pb: &[f64], wb: &[f64], d: usize, cfg: &SinkhornConfig) -> Result<Divergence> {
    cfg.validate()?;
    let cab = cost_matrix(pa, pb, d);
    let (eps, reg_source) = regularization(cfg, &cab);
    let mut terms = vec![(1.0, entropic_ot(wa, wb, &cab, eps, cfg.max_iter, cfg.tol))];
    if cfg.debias {
        let caa = cost_matrix(pa, pa, d);
        let cbb = cost_matrix(pb, pb, d);
        terms.push((-0.5, entropic_ot(wa, wa, &caa, eps, cfg.max_iter, cfg.tol)));
        terms.push((-0.5, entropic_ot(wb, wb, &cbb, eps, cfg.max_iter, cfg.tol)));
    }
    let value: f64 = terms.iter().map(|(c, s)| c * s.value).sum();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "sinkhorn_divergence".into(),
        });
    }
    let out = SinkhornOutput {
        value,
        converged: terms.iter().all(|(_, s)| s.converged),
        eps,
        iterations: terms.iter().map(|(_, s)| s.iterations).max().unwrap_or(0),
    };
    Ok(Divergence { terms, reg_source, out })
}

/// Entropic OT cost between two samples, debiased when `cfg.debias` is set.
pub fn sinkhorn_divergence(a: &WeightedSample, b: &WeightedSample, cfg: &SinkhornConfig) -> Result<SinkhornOutput> {
    if a.d != b.d {
        return Err(Error::shape(
            "sinkhorn_divergence",
            format!("d = {} vs d = {}", a.d, b.d),
        ));
    }
    Ok(divergence(&a.points, &a.weights, &b.points, &b.weights, a.d, cfg)?.out)
}

/// Differentiable form over tape matrices `a` (`m x d`) and `b` (`n x d`).
///
/// Transport plans are solved off-tape and enter as constant weights on the
/// recorded cost matrices, so the gradient is that of the converged dual. A
/// relative `eps` contributes through the cost entries it was derived from.
pub fn sinkhorn_divergence_tape(
    tape: &mut Tape,
    a: Var,
    wa: &[f64],
    b: Var,
    wb: &[f64],
    cfg: &SinkhornConfig,
) -> Result<(Var, SinkhornOutput)> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] || sa[0] != wa.len() || sb[0] != wb.len() {
        return Err(Error::shape(
            "sinkhorn_divergence",
            format!("points {sa:?} / {sb:?}, weights {} / {}", wa.len(), wb.len()),
        ));
    }
    // Validates the weights.
    let sample_a = WeightedSample::new(tape.value(a).to_vec(), sa[1], wa.to_vec())?;
    let sample_b = WeightedSample::new(tape.value(b).to_vec(), sb[1], wb.to_vec())?;
    let div = divergence(&sample_a.points, wa, &sample_b.points, wb, sa[1], cfg)?;

    let pairs = if cfg.debias {
        vec![(a, b), (a, a), (b, b)]
    } else {
        vec![(a, b)]
    };
    let mut total: Option<Var> = None;
    let mut offset = div.out.value;
    for ((coef, sol), (x, y)) in div.terms.iter().zip(pairs) {
        let c = tape.pairwise_dist(x, y)?;
        let shape = tape.shape(c).to_vec();
        let linear: f64 = tape.value(c).iter().zip(&sol.plan).map(|(c, p)| c * p).sum();
        offset -= coef * linear;
        let p = tape.constant(shape, sol.plan.iter().map(|p| coef * p).collect())?;
        let weighted = tape.mul(c, p)?;
        let term = tape.sum(weighted)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    let mut total = total.expect("at least one term");
    if div.reg_source != RegSource::Fixed {
        // eps = reg * statistic(C_ab); the value depends on it through the slope.
        let slope: f64 = div.terms.iter().map(|(coef, sol)| coef * sol.eps_slope).sum();
        let cab = tape.pairwise_dist(a, b)?;
        let stat = match div.reg_source {
            RegSource::Median => {
                let pos = median_positions(tape.value(cab));
                let flat = tape.reshape(cab, vec![sa[0] * sb[0], 1])?;
                let picked = tape.select_rows(flat, &pos)?;
                tape.mean(picked)?
            }
            _ => tape.mean(cab)?,
        };
        let eps_var = tape.scale(stat, cfg.reg * slope)?;
        offset -= tape.item(eps_var);
        total = tape.add(total, eps_var)?;
    }
    let out = tape.add_scalar(total, offset)?;
    Ok((out, div.out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check_many, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(rng: &mut ChaCha8Rng, n: usize, shift: f64, scale: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                shift + scale * z
            })
            .collect()
    }

    fn brute_force_assignment(a: &[f64], b: &[f64]) -> f64 {
        fn permute(k: usize, perm: &mut Vec<usize>, a: &[f64], b: &[f64], best: &mut f64) {
            if k == perm.len() {
                let cost: f64 = perm.iter().enumerate().map(|(i, &j)| (a[i] - b[j]).abs()).sum();
                *best = best.min(cost / a.len() as f64);
                return;
            }
            for i in k..perm.len() {
                perm.swap(k, i);
                permute(k + 1, perm, a, b, best);
                perm.swap(k, i);
            }
        }
        let mut best = f64::INFINITY;
        permute(0, &mut (0..a.len()).collect(), a, b, &mut best);
        best
    }

    #[test]
    fn exact_w1_basics() {
        assert_eq!(
            wasserstein1_exact_1d(&[0.3, -1.0, 2.0], &[2.0, 0.3, -1.0]).unwrap(),
            0.0
        );
        assert_eq!(wasserstein1_exact_1d(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(wasserstein1_exact_1d(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn exact_w1_matches_exhaustive_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = normals(&mut rng, 16, 0.0, 1.0);
        let b = normals(&mut rng, 16, 0.7, 1.5);
        for start in [0, 5, 10] {
            let (sa, sb) = (&a[start..start + 6], &b[start..start + 6]);
            let exact = wasserstein1_exact_1d(sa, sb).unwrap();
            assert!((exact - brute_force_assignment(sa, sb)).abs() < 1e-12);
        }
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(WeightedSample::new(vec![0.0, 1.0], 1, vec![0.5, 0.6]).is_err());
        assert!(WeightedSample::new(vec![0.0, 1.0], 1, vec![0.5, 0.5]).is_ok());
        assert!(WeightedSample::uniform(vec![0.0, 1.0, 2.0], 2).is_err());
    }

    #[test]
    fn self_divergence_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = WeightedSample::uniform(normals(&mut rng, 40, 0.0, 1.0), 2).unwrap();
        let out = sinkhorn_divergence(&a, &a, &SinkhornConfig::default()).unwrap();
        assert!(out.value.abs() < 1e-8, "{}", out.value);
    }

    #[test]
    fn close_to_exact_in_one_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = normals(&mut rng, 32, 0.0, 1.0);
        let y = normals(&mut rng, 32, 1.0, 0.5);
        let exact = wasserstein1_exact_1d(&x, &y).unwrap();
        let cfg = SinkhornConfig {
            max_iter: 50_000,
            ..SinkhornConfig::absolute(0.01)
        };
        let a = WeightedSample::uniform(x, 1).unwrap();
        let b = WeightedSample::uniform(y, 1).unwrap();
        let out = sinkhorn_divergence(&a, &b, &cfg).unwrap();
        assert!(out.converged);
        assert!(
            (out.value - exact).abs() <= (0.05 * exact).max(1e-2),
            "{} vs {exact}",
            out.value
        );
    }

    #[test]
    fn translation_invariant_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pa = normals(&mut rng, 20, 0.0, 1.0);
        let pb = normals(&mut rng, 24, 0.5, 1.0);
        let cfg = SinkhornConfig {
            tol: 1e-12,
            max_iter: 5000,
            ..Default::default()
        };
        let base = sinkhorn_divergence(
            &WeightedSample::uniform(pa.clone(), 2).unwrap(),
            &WeightedSample::uniform(pb.clone(), 2).unwrap(),
            &cfg,
        )
        .unwrap();
        let shift = |p: &[f64]| p.chunks(2).flat_map(|r| [r[0] + 3.0, r[1] - 1.5]).collect::<Vec<_>>();
        let moved = sinkhorn_divergence(
            &WeightedSample::uniform(shift(&pa), 2).unwrap(),
            &WeightedSample::uniform(shift(&pb), 2).unwrap(),
            &cfg,
        )
        .unwrap();
        assert!((base.value - moved.value).abs() < 1e-8);
        let swapped = sinkhorn_divergence(
            &WeightedSample::uniform(pb, 2).unwrap(),
            &WeightedSample::uniform(pa, 2).unwrap(),
            &cfg,
        )
        .unwrap();
        assert!((base.value - swapped.value).abs() < 1e-10);
        assert!(base.value > -1e-10);
    }

    #[test]
    fn iteration_cap_sets_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = WeightedSample::uniform(normals(&mut rng, 30, 0.0, 1.0), 1).unwrap();
        let b = WeightedSample::uniform(normals(&mut rng, 30, 2.0, 1.0), 1).unwrap();
        let cfg = SinkhornConfig {
            max_iter: 1,
            ..SinkhornConfig::absolute(1e-3)
        };
        let out = sinkhorn_divergence(&a, &b, &cfg).unwrap();
        assert!(!out.converged);
        assert!(out.value.is_finite());
    }

    #[test]
    fn tape_value_matches_plain_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pa = normals(&mut rng, 16, 0.0, 1.0);
        let pb = normals(&mut rng, 12, 1.0, 1.0);
        let cfg = SinkhornConfig::default();
        let plain = sinkhorn_divergence(
            &WeightedSample::uniform(pa.clone(), 2).unwrap(),
            &WeightedSample::uniform(pb.clone(), 2).unwrap(),
            &cfg,
        )
        .unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(vec![8, 2], pa).unwrap();
        let b = tape.constant(vec![6, 2], pb).unwrap();
        let (v, out) = sinkhorn_divergence_tape(&mut tape, a, &[0.125; 8], b, &[1.0 / 6.0; 6], &cfg).unwrap();
        assert!((tape.item(v) - plain.value).abs() < 1e-12);
        assert_eq!(out.value, plain.value);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let absolute = SinkhornConfig {
            tol: 1e-13,
            max_iter: 20_000,
            ..SinkhornConfig::absolute(0.1)
        };
        // Relative strength: eps moves with the median cross distance.
        let relative = SinkhornConfig {
            reg: 0.2,
            relative_reg: true,
            ..absolute
        };
        for (seed, cfg) in [(6, absolute), (7, relative)] {
            check_gradient(seed, &cfg);
        }
    }

    fn check_gradient(seed: u64, cfg: &SinkhornConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pa = Tensor::new(vec![8, 2], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let pb = Tensor::new(vec![8, 2], (0..16).map(|_| rng.random_range(-0.5..1.5)).collect()).unwrap();
        let w = vec![0.125; 8];
        let err = finite_difference_check_many(
            |tape, v| Ok(sinkhorn_divergence_tape(tape, v[0], &w, v[1], &w, cfg)?.0),
            &[pa, pb],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
