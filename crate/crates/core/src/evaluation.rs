//! Evaluation protocols: deploy a decision model through a dynamics model,
//! score per-step accuracy and direct discrimination, and measure the group
//! feature divergence at the final step.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{direct_discrimination, group_divergence, group_rows, SinkhornConfig};
use crate::models::{batch_inputs, Bind, DecisionMode, Generator, MlpClassifier};
use crate::seeds::{Rng, SeedTree, Stream};
use crate::simulator::{roll_out_truth, Cohort, GroundTruthModel};

/// Threshold for turning probabilities into decisions when scoring accuracy.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSetting {
    /// Time index of the cohort's features (1, or 10 for the extrapolation setting).
    pub start_step: usize,
    /// Steps rolled out, including the starting one.
    pub horizon: usize,
    /// Individuals per repeat (capped at the cohort size).
    pub n_eval: usize,
    pub n_repeats: usize,
}

impl Default for EvalSetting {
    fn default() -> Self {
        EvalSetting::setting1()
    }
}

impl EvalSetting {
    /// Steps `1..=10`.
    pub fn setting1() -> Self {
        EvalSetting {
            start_step: 1,
            horizon: 10,
            n_eval: 1000,
            n_repeats: 5,
        }
    }

    /// Steps `10..=19`, starting from step-10 features.
    pub fn setting2() -> Self {
        EvalSetting {
            start_step: 10,
            ..EvalSetting::setting1()
        }
    }

    pub fn target_t(&self) -> usize {
        self.start_step + self.horizon - 1
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("start_step", self.start_step),
            ("horizon", self.horizon),
            ("n_eval", self.n_eval),
            ("n_repeats", self.n_repeats),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// The dynamics a decision model is deployed into.
#[derive(Debug, Clone, Copy)]
pub enum Dynamics<'a> {
    /// The learned recurrent generator.
    Generator(&'a Generator),
    /// The true simulator.
    Truth(&'a GroundTruthModel),
}

/// Features at each of `horizon` steps (row-major `n x d` each) after deploying
/// `policy` with sampled decisions from the cohort's features.
pub fn interventional_features(
    dynamics: Dynamics<'_>,
    policy: &MlpClassifier,
    cohort: &Cohort,
    horizon: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    if horizon == 0 {
        return Err(Error::invalid("horizon", "must be at least 1"));
    }
    match dynamics {
        Dynamics::Truth(gt) => {
            let ds = roll_out_truth(gt, cohort, Some(policy), horizon, rng)?;
            Ok((0..horizon).map(|k| ds.step_features(k)).collect())
        }
        Dynamics::Generator(gen) => {
            let cfg = gen.config();
            if cfg.feature_dim != cohort.d() || policy.feature_dim() != cohort.d() {
                return Err(Error::shape("evaluate", "generator, policy and cohort widths differ"));
            }
            let n = cohort.n();
            let mut tape = Tape::new();
            let g = gen.bind_frozen(&mut tape);
            let h = policy.bind_frozen(&mut tape);
            let (sv, xv) = batch_inputs(&mut tape, cohort.s(), cohort.x1(), cohort.d())?;
            let mut noise = Vec::with_capacity(horizon - 1);
            for _ in 1..horizon {
                let z: Vec<f64> = (0..n * cfg.noise_dim)
                    .map(|_| StandardNormal.sample(&mut *rng))
                    .collect();
                noise.push(tape.constant(vec![n, cfg.noise_dim], z)?);
            }
            let roll = g.rollout(&mut tape, &h, sv, xv, &noise, DecisionMode::Sampled, Some(rng))?;
            Ok(roll.xs.iter().map(|&x| tape.value(x).to_vec()).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub t: usize,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub local_unfairness: f64,
    pub local_unfairness_std: f64,
}

/// Outcome of one evaluation repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub seed: u64,
    pub accuracy: Vec<f64>,
    pub local_unfairness: Vec<f64>,
    pub long_term_j1: f64,
    pub sinkhorn_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub model_name: String,
    pub setting: EvalSetting,
    /// Inclusive step range `[start_step, target_T]`.
    pub range: [usize; 2],
    pub per_step: Vec<StepMetrics>,
    pub long_term_j1: f64,
    pub long_term_j1_std: f64,
    pub seeds_used: Vec<u64>,
    pub converged: bool,
    pub repeats: Vec<RepeatResult>,
}

impl FairnessReport {
    pub fn mean_accuracy(&self) -> f64 {
        mean(&self.per_step.iter().map(|s| s.accuracy).collect::<Vec<_>>())
    }

    pub fn mean_local_unfairness(&self) -> f64 {
        mean(&self.per_step.iter().map(|s| s.local_unfairness).collect::<Vec<_>>())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
fn std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Deploys `policy` for `setting.horizon` steps `setting.n_repeats` times.
///
/// Accuracy is agreement of thresholded decisions with `oracle` (normally the
/// ground-truth classifier) at the realised features; local unfairness is the
/// direct discrimination over `S=0` individuals; the long-term term is the group
/// divergence at the last step. Repeat `r` uses seed `seeds.seed(Eval, r)`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    model_name: &str,
    policy: &MlpClassifier,
    dynamics: Dynamics<'_>,
    oracle: &MlpClassifier,
    cohort: &Cohort,
    setting: &EvalSetting,
    sinkhorn: &SinkhornConfig,
    seeds: &SeedTree,
) -> Result<FairnessReport> {
    setting.validate()?;
    sinkhorn.validate()?;
    let (plus, minus) = group_rows(cohort.s());
    if plus.is_empty() || minus.is_empty() {
        return Err(Error::EmptyGroup(format!(
            "evaluation cohort has no {} individuals",
            if plus.is_empty() { "S=1" } else { "S=0" }
        )));
    }
    let d = cohort.d();
    let mut repeats = Vec::with_capacity(setting.n_repeats);
    for r in 0..setting.n_repeats {
        let seed = seeds.seed(Stream::Eval, r as u64);
        let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(seed);
        let sub = if setting.n_eval < cohort.n() {
            let mut idx = rand::seq::index::sample(&mut rng, cohort.n(), setting.n_eval).into_vec();
            idx.sort_unstable();
            cohort.subset(&idx)
        } else {
            cohort.clone()
        };
        let (sub_plus, sub_minus) = group_rows(sub.s());
        if sub_plus.is_empty() || sub_minus.is_empty() {
            return Err(Error::EmptyGroup(format!("repeat {r} drew a single-group sample")));
        }
        let steps = interventional_features(dynamics, policy, &sub, setting.horizon, &mut rng)?;
        let mut accuracy = Vec::with_capacity(steps.len());
        let mut local = Vec::with_capacity(steps.len());
        for x in &steps {
            let p = policy.predict_batch(sub.s(), x)?;
            let q = oracle.predict_batch(sub.s(), x)?;
            let agree = p
                .iter()
                .zip(&q)
                .filter(|(a, b)| (**a > DECISION_THRESHOLD) == (**b > DECISION_THRESHOLD))
                .count();
            accuracy.push(agree as f64 / p.len() as f64);
            let x_minus: Vec<f64> = sub_minus
                .iter()
                .flat_map(|&i| x[i * d..(i + 1) * d].iter().copied())
                .collect();
            local.push(direct_discrimination(policy, &x_minus, d)?);
        }
        let j1 = group_divergence(steps.last().expect("horizon >= 1"), sub.s(), d, sinkhorn)?;
        if !j1.value.is_finite() || accuracy.iter().chain(&local).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("evaluation of {model_name}"),
            });
        }
        repeats.push(RepeatResult {
            seed,
            accuracy,
            local_unfairness: local,
            long_term_j1: j1.value,
            sinkhorn_converged: j1.converged,
        });
    }

    let per_step = (0..setting.horizon)
        .map(|k| {
            let acc: Vec<f64> = repeats.iter().map(|r| r.accuracy[k]).collect();
            let loc: Vec<f64> = repeats.iter().map(|r| r.local_unfairness[k]).collect();
            StepMetrics {
                t: setting.start_step + k,
                accuracy: mean(&acc),
                accuracy_std: std(&acc),
                local_unfairness: mean(&loc),
                local_unfairness_std: std(&loc),
            }
        })
        .collect();
    let j1: Vec<f64> = repeats.iter().map(|r| r.long_term_j1).collect();
    Ok(FairnessReport {
        model_name: model_name.into(),
        setting: setting.clone(),
        range: [setting.start_step, setting.target_t()],
        per_step,
        long_term_j1: mean(&j1),
        long_term_j1_std: std(&j1),
        seeds_used: repeats.iter().map(|r| r.seed).collect(),
        converged: repeats.iter().all(|r| r.sinkhorn_converged),
        repeats,
    })
}

/// Features at step `start_step` after rolling `policy` through `dynamics` from
/// step 1, used as the starting cohort of the extrapolation setting.
pub fn advance_cohort(
    dynamics: Dynamics<'_>,
    policy: &MlpClassifier,
    cohort: &Cohort,
    start_step: usize,
    seed: u64,
) -> Result<Cohort> {
    if start_step == 0 {
        return Err(Error::invalid("start_step", "must be at least 1"));
    }
    let mut rng = SeedTree::new(seed).rng(Stream::Eval);
    let steps = interventional_features(dynamics, policy, cohort, start_step, &mut rng)?;
    Cohort::new(
        cohort.d(),
        cohort.s().to_vec(),
        steps.last().expect("start_step >= 1").clone(),
        None,
    )
}

// ---------------------------------------------------------------------------
// Comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub mean_accuracy: f64,
    pub mean_local_unfairness: f64,
    pub long_term_j1: f64,
    /// 1-based ranks: accuracy descending, both unfairness columns ascending.
    pub rank_accuracy: usize,
    pub rank_local: usize,
    pub rank_long_term: usize,
}

/// `(t, accuracy, local_unfairness)` per step.
pub type StepSeries = Vec<(usize, f64, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub range: [usize; 2],
    pub rows: Vec<ComparisonRow>,
    /// Per-model `(t, accuracy, local_unfairness)` series.
    pub series: Vec<(String, StepSeries)>,
}

fn ranks(values: &[f64], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let o = values[a].total_cmp(&values[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    let mut out = vec![0; values.len()];
    for (rank, i) in idx.into_iter().enumerate() {
        out[i] = rank + 1;
    }
    out
}

pub fn compare_models(reports: &[FairnessReport]) -> Result<ComparisonTable> {
    if reports.len() < 2 {
        return Err(Error::invalid("reports", "need at least two reports to compare"));
    }
    let first = &reports[0];
    if let Some(r) = reports.iter().find(|r| r.setting != first.setting) {
        return Err(Error::invalid(
            "setting",
            format!(
                "{} was evaluated under a different setting than {}",
                r.model_name, first.model_name
            ),
        ));
    }
    let acc: Vec<f64> = reports.iter().map(FairnessReport::mean_accuracy).collect();
    let loc: Vec<f64> = reports.iter().map(FairnessReport::mean_local_unfairness).collect();
    let long: Vec<f64> = reports.iter().map(|r| r.long_term_j1).collect();
    let (ra, rl, rj) = (ranks(&acc, true), ranks(&loc, false), ranks(&long, false));
    let rows = reports
        .iter()
        .enumerate()
        .map(|(i, r)| ComparisonRow {
            model: r.model_name.clone(),
            mean_accuracy: acc[i],
            mean_local_unfairness: loc[i],
            long_term_j1: long[i],
            rank_accuracy: ra[i],
            rank_local: rl[i],
            rank_long_term: rj[i],
        })
        .collect();
    let series = reports
        .iter()
        .map(|r| {
            let pts = r
                .per_step
                .iter()
                .map(|s| (s.t, s.accuracy, s.local_unfairness))
                .collect();
            (r.model_name.clone(), pts)
        })
        .collect();
    Ok(ComparisonTable {
        range: first.range,
        rows,
        series,
    })
}

// ---------------------------------------------------------------------------
// Files

pub fn write_report_json(path: impl AsRef<Path>, report: &FairnessReport) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    write_atomic(path.as_ref(), &bytes)
}

/// `t,accuracy,local_unfairness` per evaluated step.
pub fn write_per_step_csv(path: impl AsRef<Path>, report: &FairnessReport) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "accuracy", "local_unfairness"])?;
    for s in &report.per_step {
        w.write_record([s.t.to_string(), s.accuracy.to_string(), s.local_unfairness.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Writes `group,x0..x{d-1}` rows for external 2-D embedding.
pub fn emit_projection_data(path: impl AsRef<Path>, s: &[u8], x: &[f64], d: usize) -> Result<()> {
    let path = path.as_ref();
    if s.is_empty() {
        return Err(Error::invalid("cloud", "no rows to write"));
    }
    if d == 0 || x.len() != s.len() * d {
        return Err(Error::shape(
            "emit_projection_data",
            format!("{} groups, {} values, d = {d}", s.len(), x.len()),
        ));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["group".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for (g, row) in s.iter().zip(x.chunks_exact(d)) {
        let mut rec = vec![g.to_string()];
        rec.extend(row.iter().map(|v| format!("{v:.16e}")));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Reads back a file written by [`emit_projection_data`]: `(groups, rows, d)`.
pub fn read_projection_data(path: impl AsRef<Path>) -> Result<(Vec<u8>, Vec<f64>, usize)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let d = rdr.headers()?.len().saturating_sub(1);
    let mut s = Vec::new();
    let mut x = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        s.push(
            rec[0]
                .parse::<u8>()
                .map_err(|_| bad(format!("bad group `{}`", &rec[0])))?,
        );
        for v in rec.iter().skip(1) {
            x.push(v.parse::<f64>().map_err(|_| bad(format!("bad number `{v}`")))?);
        }
    }
    Ok((s, x, d))
}
