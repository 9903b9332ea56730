//! Learning phases: classifier fitting (plain and penalised), adversarial
//! training of the recurrent generator, and repeated gradient descent on the
//! long-term objective.

use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::{direct_discrimination_tape, group_rows, long_term_unfairness, mmd_rbf_tape, soft_gap_tape};
use crate::metrics::{Bandwidth, SinkhornConfig, SinkhornOutput};
use crate::models::{
    batch_inputs, Bind, Bound, BoundMlp, ClassifierConfig, DecisionMode, Discriminator, Generator, GeneratorConfig,
    MlpClassifier, Parameterized,
};
use crate::seeds::{Rng, SeedTree, Stream};
use crate::simulator::{Cohort, TimeSeriesDataset};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the long-term term J1.
    pub lambda_long: f64,
    /// Weight of the utility term J2.
    pub lambda_util: f64,
    /// Weight of the averaged local term J3.
    pub lambda_local: f64,
    pub gamma_mmd: f64,
    /// Fixed MMD kernel width; `None` uses the median heuristic per batch.
    pub mmd_bandwidth: Option<f64>,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Passes over the data for classifier fitting.
    pub epochs: usize,
    /// Alternating discriminator/generator updates.
    pub gan_rounds: usize,
    pub rgd_rounds: usize,
    /// Individuals drawn per repeated-gradient round.
    pub rgd_batch: usize,
    /// Adam steps per regenerated batch.
    pub inner_steps: usize,
    #[serde(rename = "target_T")]
    pub target_t: usize,
    /// Weight of the DP/EO penalty for the baselines.
    pub penalty_weight: f64,
    pub seed: u64,
    pub split_ratios: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_long: 128.4,
            lambda_util: 1.0,
            lambda_local: 2.1,
            gamma_mmd: 100.0,
            mmd_bandwidth: None,
            learning_rate: 1e-3,
            batch_size: 512,
            epochs: 20,
            gan_rounds: 300,
            rgd_rounds: 50,
            rgd_batch: 256,
            inner_steps: 1,
            target_t: 10,
            penalty_weight: 10.0,
            seed: 0,
            split_ratios: [0.7, 0.1, 0.2],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_long", self.lambda_long),
            ("lambda_util", self.lambda_util),
            ("lambda_local", self.lambda_local),
            ("gamma_mmd", self.gamma_mmd),
            ("penalty_weight", self.penalty_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if let Some(b) = self.mmd_bandwidth {
            if !(b > 0.0) || !b.is_finite() {
                return Err(Error::invalid("mmd_bandwidth", "must be positive"));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("rgd_batch", self.rgd_batch),
            ("inner_steps", self.inner_steps),
            ("target_T", self.target_t),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        validate_ratios(self.split_ratios)
    }

    fn bandwidth(&self) -> Bandwidth {
        self.mmd_bandwidth.map_or(Bandwidth::Median, Bandwidth::Fixed)
    }
}

pub fn validate_ratios(r: [f64; 3]) -> Result<()> {
    if r.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid(
            "split_ratios",
            format!("every ratio must be positive, got {r:?}"),
        ));
    }
    let sum: f64 = r.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split_ratios", format!("ratios sum to {sum}, not 1")));
    }
    Ok(())
}

/// Seed subtrees per phase so that the phases draw independent randomness.
#[derive(Debug, Clone, Copy)]
enum Phase {
    Classifier = 1,
    Rcgan = 2,
    Deeplf = 3,
}

fn phase_tree(seed: u64, phase: Phase) -> SeedTree {
    SeedTree::new(seed).child(Stream::Init, phase as u64)
}

// ---------------------------------------------------------------------------
// Logging

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub round: usize,
    pub loss: f64,
    pub j1: Option<f64>,
    pub j2: Option<f64>,
    pub j3_mean: Option<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disc_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd: Option<f64>,
    /// Parameter hash of the decision model used for the round's rollouts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<u64>,
}

impl LogRecord {
    fn new(phase: &str, round: usize, loss: f64, seed: u64) -> Self {
        LogRecord {
            phase: phase.into(),
            round,
            loss,
            j1: None,
            j2: None,
            j3_mean: None,
            seed,
            val_loss: None,
            disc_loss: None,
            mmd: None,
            fingerprint: None,
        }
    }
}

fn check_finite(phase: &str, round: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            phase: phase.into(),
            round,
            detail: format!("{what} is {v}"),
        })
    }
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            shapes: params.iter().map(|t| t.shape().to_vec()).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_model(model: &impl Parameterized) -> Self {
        AdamState::new(&model.tensors())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Tensor], grads: &[&[f64]], lr: f64) -> Result<()> {
    if params.len() != state.shapes.len() || grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} tensors, {} gradients, state for {}",
                params.len(),
                grads.len(),
                state.shapes.len()
            ),
        ));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != state.shapes[k].as_slice() || g.len() != p.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "tensor {k}: {:?} with {} gradients, state {:?}",
                    p.shape(),
                    g.len(),
                    state.shapes[k]
                ),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, w) in p.values_mut().iter_mut().enumerate() {
            let g = grads[k][i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Pulls the tape gradients of `bound` into `model` and takes one Adam step.
fn descend<M: Bind>(model: &mut M, state: &mut AdamState, tape: &Tape, bound: &Bound<M::Bound>, lr: f64) -> Result<()> {
    model.zero_grad();
    model.accumulate_grads(tape, bound)?;
    let grads: Vec<Vec<f64>> = model.tensors().iter().map(|t| t.grad().to_vec()).collect();
    let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    adam_step(state, &mut model.tensors_mut(), &grad_refs, lr)
}

// ---------------------------------------------------------------------------
// Data splitting

/// Individual-level shuffled split into train / validation / test.
pub fn split_dataset(
    ds: &TimeSeriesDataset,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset, TimeSeriesDataset)> {
    validate_ratios(ratios)?;
    let n = ds.n();
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_val = (ratios[1] * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::invalid(
            "split_ratios",
            format!("{ratios:?} leaves an empty split for {n} individuals"),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut SeedTree::new(seed).rng(Stream::Split));
    let (train, rest) = idx.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((ds.subset(train), ds.subset(val), ds.subset(test)))
}

// ---------------------------------------------------------------------------
// Classifier fitting

/// Which group-fairness penalty a baseline adds to cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Plain,
    Dp,
    Eo,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(BaselineKind::Plain),
            "dp" => Ok(BaselineKind::Dp),
            "eo" => Ok(BaselineKind::Eo),
            other => Err(Error::invalid(
                "kind",
                format!("expected plain, dp or eo, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierRun {
    pub model: MlpClassifier,
    pub history: Vec<LogRecord>,
    /// Batches whose fairness penalty was skipped for lack of a group.
    pub skipped_batches: usize,
}

/// Mean binary cross-entropy of logits `z` (`[n x 1]`) against targets in `[0, 1]`.
fn bce_with_logits(tape: &mut Tape, z: Var, targets: &[f64]) -> Result<Var> {
    let y = tape.constant(vec![targets.len(), 1], targets.to_vec())?;
    let sp = tape.softplus(z)?;
    let yz = tape.mul(y, z)?;
    let per_row = tape.sub(sp, yz)?;
    tape.mean(per_row)
}

/// Mean cross-entropy of a classifier over every (individual, step) row.
pub fn classifier_loss(model: &MlpClassifier, ds: &TimeSeriesDataset) -> Result<f64> {
    let (s, x, y) = ds.flat_rows();
    let targets: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let mut tape = Tape::new();
    let net = model.bind_frozen(&mut tape);
    let (sv, xv) = batch_inputs(&mut tape, &s, &x, ds.d())?;
    let z = net.logits(&mut tape, sv, xv)?;
    let loss = bce_with_logits(&mut tape, z, &targets)?;
    Ok(tape.item(loss))
}

fn penalty_groups(kind: BaselineKind, s: &[u8], y: &[f64]) -> Option<(Vec<usize>, Vec<usize>)> {
    let (plus, minus) = match kind {
        BaselineKind::Plain => return None,
        BaselineKind::Dp => group_rows(s),
        BaselineKind::Eo => {
            let pos = |g: u8| (0..s.len()).filter(|&i| s[i] == g && y[i] == 1.0).collect::<Vec<_>>();
            (pos(1), pos(0))
        }
    };
    (!plus.is_empty() && !minus.is_empty()).then_some((plus, minus))
}

fn fit_classifier(
    train: &TimeSeriesDataset,
    val: Option<&TimeSeriesDataset>,
    arch: &ClassifierConfig,
    kind: BaselineKind,
    penalty_weight: f64,
    cfg: &TrainConfig,
) -> Result<ClassifierRun> {
    cfg.validate()?;
    if train.n() == 0 {
        return Err(Error::invalid("train", "dataset is empty"));
    }
    if arch.feature_dim != train.d() {
        return Err(Error::shape(
            "train_classifier",
            format!("model width {} vs data width {}", arch.feature_dim, train.d()),
        ));
    }
    let phase = match kind {
        BaselineKind::Plain => "phase1",
        BaselineKind::Dp => "baseline-dp",
        BaselineKind::Eo => "baseline-eo",
    };
    let tree = phase_tree(cfg.seed, Phase::Classifier);
    let mut model = MlpClassifier::new(arch, &mut tree.rng(Stream::Init));
    let mut adam = AdamState::for_model(&model);
    let mut order_rng = tree.rng(Stream::BatchOrder);
    let (s, x, y) = train.flat_rows();
    let d = train.d();
    let mut order: Vec<usize> = (0..s.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut skipped = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let bs: Vec<u8> = batch.iter().map(|&i| s[i]).collect();
            let bx: Vec<f64> = batch
                .iter()
                .flat_map(|&i| x[i * d..(i + 1) * d].iter().copied())
                .collect();
            let by: Vec<f64> = batch.iter().map(|&i| f64::from(y[i])).collect();

            let mut tape = Tape::new();
            let net = model.bind(&mut tape);
            let (sv, xv) = batch_inputs(&mut tape, &bs, &bx, d)?;
            let z = net.logits(&mut tape, sv, xv)?;
            let mut loss = bce_with_logits(&mut tape, z, &by)?;
            if kind != BaselineKind::Plain && penalty_weight != 0.0 {
                match penalty_groups(kind, &bs, &by) {
                    Some((a, b)) => {
                        let p = tape.sigmoid(z)?;
                        let gap = soft_gap_tape(&mut tape, p, &a, &b)?;
                        let weighted = tape.scale(gap, penalty_weight)?;
                        loss = tape.add(loss, weighted)?;
                    }
                    None => skipped += 1,
                }
            }
            let value = tape.item(loss);
            check_finite(phase, epoch, "training loss", value)?;
            tape.backward(loss)?;
            descend(&mut model, &mut adam, &tape, &net, cfg.learning_rate)?;
            total += value * batch.len() as f64;
        }
        let mut rec = LogRecord::new(phase, epoch, total / s.len() as f64, cfg.seed);
        if let Some(v) = val {
            let vl = classifier_loss(&model, v)?;
            check_finite(phase, epoch, "validation loss", vl)?;
            rec.val_loss = Some(vl);
        }
        history.push(rec);
    }
    Ok(ClassifierRun {
        model,
        history,
        skipped_batches: skipped,
    })
}

/// Cross-entropy fit of `h(S, X^t) -> Y^t` over all steps with Adam mini-batches.
pub fn train_phase1(
    train: &TimeSeriesDataset,
    val: Option<&TimeSeriesDataset>,
    arch: &ClassifierConfig,
    cfg: &TrainConfig,
) -> Result<ClassifierRun> {
    fit_classifier(train, val, arch, BaselineKind::Plain, 0.0, cfg)
}

/// Cross-entropy plus `penalty_weight` times a per-batch soft DP or EO gap.
pub fn train_baseline(
    train: &TimeSeriesDataset,
    val: Option<&TimeSeriesDataset>,
    arch: &ClassifierConfig,
    kind: BaselineKind,
    penalty_weight: f64,
    cfg: &TrainConfig,
) -> Result<ClassifierRun> {
    if !(penalty_weight >= 0.0) || !penalty_weight.is_finite() {
        return Err(Error::invalid("penalty_weight", "must be finite and >= 0"));
    }
    fit_classifier(train, val, arch, kind, penalty_weight, cfg)
}

// ---------------------------------------------------------------------------
// Adversarial generator training

#[derive(Debug, Clone)]
pub struct RcganRun {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub history: Vec<LogRecord>,
}

fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()
}

fn steps_on_tape(tape: &mut Tape, steps: &[Vec<f64>], n: usize, d: usize) -> Result<Vec<Var>> {
    steps.iter().map(|v| tape.constant(vec![n, d], v.clone())).collect()
}

/// `sum_t mean(softplus(sign * logit_t)) / T`.
fn mean_softplus(tape: &mut Tape, logits: &[Var], sign: f64) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &l in logits {
        let arg = tape.scale(l, sign)?;
        let sp = tape.softplus(arg)?;
        let m = tape.mean(sp)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, m)?,
            None => m,
        });
    }
    let acc = acc.ok_or_else(|| Error::shape("rcgan", "empty series"))?;
    tape.scale(acc, 1.0 / logits.len() as f64)
}

/// Alternating discriminator / generator updates with an MMD penalty on the generated steps.
///
/// Fake series start from the real `X^1` of each sampled individual and feed back
/// soft decisions of the frozen `classifier`.
pub fn train_rcgan(
    train: &TimeSeriesDataset,
    classifier: &MlpClassifier,
    gen_cfg: &GeneratorConfig,
    cfg: &TrainConfig,
) -> Result<RcganRun> {
    cfg.validate()?;
    let (n, d, horizon) = (train.n(), train.d(), train.horizon());
    if n == 0 {
        return Err(Error::invalid("train", "dataset is empty"));
    }
    if horizon < 2 {
        return Err(Error::invalid(
            "horizon",
            "adversarial training needs at least two steps",
        ));
    }
    if gen_cfg.feature_dim != d || classifier.feature_dim() != d {
        return Err(Error::shape(
            "train_rcgan",
            "generator, classifier and data widths differ",
        ));
    }
    let tree = phase_tree(cfg.seed, Phase::Rcgan);
    let mut init_rng = tree.rng(Stream::Init);
    let mut generator = Generator::new(gen_cfg, &mut init_rng);
    let mut disc = Discriminator::new(d, gen_cfg.hidden, &mut init_rng);
    let mut adam_g = AdamState::for_model(&generator);
    let mut adam_d = AdamState::for_model(&disc);
    let mut batch_rng = tree.rng(Stream::BatchOrder);
    let mut noise_rng = tree.rng(Stream::Noise);
    let m = cfg.batch_size.min(n);
    let nz = gen_cfg.noise_dim;
    let mut history = Vec::with_capacity(cfg.gan_rounds);

    for round in 0..cfg.gan_rounds {
        let mut idx = index::sample(&mut batch_rng, n, m).into_vec();
        idx.sort_unstable();
        let batch = train.subset(&idx);
        let real: Vec<Vec<f64>> = (0..horizon).map(|k| batch.step_features(k)).collect();
        let s_vals: Vec<f64> = batch.s().iter().map(|&v| f64::from(v)).collect();

        // Discriminator step.
        let noise: Vec<Vec<f64>> = (1..horizon).map(|_| normal_matrix(&mut noise_rng, m, nz)).collect();
        let mut tape = Tape::new();
        let g = generator.bind_frozen(&mut tape);
        let h = classifier.bind_frozen(&mut tape);
        let dnet = disc.bind(&mut tape);
        let sv = tape.constant(vec![m, 1], s_vals.clone())?;
        let real_vars = steps_on_tape(&mut tape, &real, m, d)?;
        let zs = steps_on_tape(&mut tape, &noise, m, nz)?;
        let fake = g.rollout(&mut tape, &h, sv, real_vars[0], &zs, DecisionMode::Soft, None)?;
        let lr = dnet.logits(&mut tape, &real_vars)?;
        let lf = dnet.logits(&mut tape, &fake.xs)?;
        let real_term = mean_softplus(&mut tape, &lr, -1.0)?;
        let fake_term = mean_softplus(&mut tape, &lf, 1.0)?;
        let loss_d = tape.add(real_term, fake_term)?;
        let d_value = tape.item(loss_d);
        check_finite("rcgan", round, "discriminator loss", d_value)?;
        tape.backward(loss_d)?;
        descend(&mut disc, &mut adam_d, &tape, &dnet, cfg.learning_rate)?;

        // Generator step.
        let noise: Vec<Vec<f64>> = (1..horizon).map(|_| normal_matrix(&mut noise_rng, m, nz)).collect();
        let mut tape = Tape::new();
        let g = generator.bind(&mut tape);
        let h = classifier.bind_frozen(&mut tape);
        let dnet = disc.bind_frozen(&mut tape);
        let sv = tape.constant(vec![m, 1], s_vals)?;
        let real_vars = steps_on_tape(&mut tape, &real, m, d)?;
        let zs = steps_on_tape(&mut tape, &noise, m, nz)?;
        let fake = g.rollout(&mut tape, &h, sv, real_vars[0], &zs, DecisionMode::Soft, None)?;
        let lf = dnet.logits(&mut tape, &fake.xs)?;
        // log(1 - D) = -softplus(logit)
        let sat = mean_softplus(&mut tape, &lf, 1.0)?;
        let adv = tape.neg(sat)?;
        let real_flat = tape.concat_cols(&real_vars[1..])?;
        let fake_flat = tape.concat_cols(&fake.xs[1..])?;
        let mmd = mmd_rbf_tape(&mut tape, real_flat, fake_flat, cfg.bandwidth())?;
        let penalty = tape.scale(mmd, cfg.gamma_mmd)?;
        let loss_g = tape.add(adv, penalty)?;
        let g_value = tape.item(loss_g);
        check_finite("rcgan", round, "generator loss", g_value)?;
        tape.backward(loss_g)?;
        descend(&mut generator, &mut adam_g, &tape, &g, cfg.learning_rate)?;

        let mut rec = LogRecord::new("rcgan", round, g_value, cfg.seed);
        rec.disc_loss = Some(d_value);
        rec.mmd = Some(tape.item(mmd));
        history.push(rec);
    }
    Ok(RcganRun {
        generator,
        discriminator: disc,
        history,
    })
}

// ---------------------------------------------------------------------------
// Long-term objective

/// Individuals and noise for one evaluation of the long-term objective.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBatch {
    pub s: Vec<u8>,
    /// Row-major `n x d` first-step features.
    pub x1: Vec<f64>,
    pub d: usize,
    /// `obs_horizon - 1` noise matrices for the observational rollout.
    pub obs_noise: Vec<Vec<f64>>,
    /// `target_T - 1` noise matrices for the interventional rollout.
    pub int_noise: Vec<Vec<f64>>,
    pub noise_dim: usize,
}

impl EvalBatch {
    /// Draws `size` distinct individuals of `cohort` and fresh standard-normal noise.
    pub fn sample(
        cohort: &Cohort,
        size: usize,
        obs_horizon: usize,
        target_t: usize,
        noise_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if obs_horizon == 0 || target_t == 0 {
            return Err(Error::invalid("horizon", "must be at least 1"));
        }
        let m = size.min(cohort.n());
        let mut idx = index::sample(rng, cohort.n(), m).into_vec();
        idx.sort_unstable();
        let sub = cohort.subset(&idx);
        let obs_noise = (1..obs_horizon).map(|_| normal_matrix(rng, m, noise_dim)).collect();
        let int_noise = (1..target_t).map(|_| normal_matrix(rng, m, noise_dim)).collect();
        Ok(EvalBatch {
            s: sub.s().to_vec(),
            x1: sub.x1().to_vec(),
            d: cohort.d(),
            obs_noise,
            int_noise,
            noise_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// The weighted objective together with its parts.
#[derive(Debug, Clone)]
pub struct ObjectiveTerms {
    pub total: Var,
    pub j1: f64,
    pub j2: f64,
    /// Direct discrimination at steps `1..=target_T`.
    pub j3: Vec<f64>,
    pub sinkhorn: SinkhornOutput,
}

/// `lambda_long * J1 + lambda_util * J2 + lambda_local / T * sum_t J3^t`.
///
/// J2 is the cross-entropy of `theta` against the soft decisions of
/// `obs_classifier` along an observational rollout; J1 and J3 come from the
/// rollout in which `theta` replaces the decision mechanism. Only `theta`
/// should be bound trainable.
pub fn total_objective(
    tape: &mut Tape,
    theta: &Bound<BoundMlp>,
    gen: &Generator,
    obs_classifier: &MlpClassifier,
    batch: &EvalBatch,
    cfg: &TrainConfig,
    sinkhorn: &SinkhornConfig,
) -> Result<ObjectiveTerms> {
    let (m, d) = (batch.len(), batch.d);
    if m == 0 {
        return Err(Error::invalid("eval_batch", "no individuals"));
    }
    let target_t = batch.int_noise.len() + 1;
    if cfg.target_t != target_t {
        return Err(Error::invalid(
            "target_T",
            format!("batch was drawn for T = {target_t}, config asks for {}", cfg.target_t),
        ));
    }
    let g = gen.bind_frozen(tape);
    let (sv, x1) = batch_inputs(tape, &batch.s, &batch.x1, d)?;

    // Utility on the observational process.
    let h = obs_classifier.bind_frozen(tape);
    let zs = steps_on_tape(tape, &batch.obs_noise, m, batch.noise_dim)?;
    let obs = g.rollout(tape, &h, sv, x1, &zs, DecisionMode::Soft, None)?;
    let mut j2: Option<Var> = None;
    for (&x, &y) in obs.xs.iter().zip(&obs.ys) {
        let targets = tape.value(y).to_vec();
        let xc = tape.constant(vec![m, d], tape.value(x).to_vec())?;
        let z = theta.logits(tape, sv, xc)?;
        let l = bce_with_logits(tape, z, &targets)?;
        j2 = Some(match j2 {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    let j2 = tape.scale(j2.expect("at least one step"), 1.0 / obs.horizon() as f64)?;

    // Long-term and local terms under the intervention.
    let zs = steps_on_tape(tape, &batch.int_noise, m, batch.noise_dim)?;
    let int = g.rollout(tape, theta, sv, x1, &zs, DecisionMode::Soft, None)?;
    let (j1, sinkhorn_out) = long_term_unfairness(tape, &int, &batch.s, target_t, sinkhorn)?;
    let (_, minus) = group_rows(&batch.s);
    let mut j3_vars = Vec::with_capacity(target_t);
    for &x in &int.xs {
        let xm = tape.select_rows(x, &minus)?;
        j3_vars.push(direct_discrimination_tape(tape, theta, xm)?);
    }

    let a = tape.scale(j1, cfg.lambda_long)?;
    let b = tape.scale(j2, cfg.lambda_util)?;
    let mut j3_sum = j3_vars[0];
    for &v in &j3_vars[1..] {
        j3_sum = tape.add(j3_sum, v)?;
    }
    let c = tape.scale(j3_sum, cfg.lambda_local / target_t as f64)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(ObjectiveTerms {
        total,
        j1: tape.item(j1),
        j2: tape.item(j2),
        j3: j3_vars.iter().map(|&v| tape.item(v)).collect(),
        sinkhorn: sinkhorn_out,
    })
}

#[derive(Debug, Clone)]
pub struct DeeplfRun {
    pub model: MlpClassifier,
    pub history: Vec<LogRecord>,
    /// Stopped early because the parameters moved by less than the threshold.
    pub converged: bool,
}

/// Parameter-change threshold (Euclidean norm per round) for early stopping.
pub const RGD_TOLERANCE: f64 = 1e-6;

/// Repeated gradient descent on [`total_objective`] starting from `classifier_init`.
///
/// Every round draws fresh individuals from `cohort` and fresh noise, so the
/// interventional data always reflects the current parameters. `obs_horizon`
/// is the length of the observational rollouts used for J2.
pub fn train_deeplf(
    gen: &Generator,
    classifier_init: &MlpClassifier,
    cohort: &Cohort,
    obs_horizon: usize,
    cfg: &TrainConfig,
    sinkhorn: &SinkhornConfig,
) -> Result<DeeplfRun> {
    cfg.validate()?;
    sinkhorn.validate()?;
    if gen.config().feature_dim != cohort.d() || classifier_init.feature_dim() != cohort.d() {
        return Err(Error::shape(
            "train_deeplf",
            "generator, classifier and cohort widths differ",
        ));
    }
    let tree = phase_tree(cfg.seed, Phase::Deeplf);
    let mut rng = tree.rng(Stream::Noise);
    let mut theta = classifier_init.clone();
    theta.set_trainable(true);
    let mut adam = AdamState::for_model(&theta);
    let mut history = Vec::with_capacity(cfg.rgd_rounds);
    let mut converged = false;

    for round in 0..cfg.rgd_rounds {
        let batch = EvalBatch::sample(
            cohort,
            cfg.rgd_batch,
            obs_horizon,
            cfg.target_t,
            gen.config().noise_dim,
            &mut rng,
        )?;
        let before = theta.flat_values();
        let mut rec = LogRecord::new("deeplf", round, f64::NAN, cfg.seed);
        rec.fingerprint = Some(theta.fingerprint());
        for inner in 0..cfg.inner_steps {
            let mut tape = Tape::new();
            let bound = theta.bind(&mut tape);
            let terms = total_objective(&mut tape, &bound, gen, classifier_init, &batch, cfg, sinkhorn)?;
            let value = tape.item(terms.total);
            check_finite("deeplf", round, "objective", value)?;
            if inner == 0 {
                rec.loss = value;
                rec.j1 = Some(terms.j1);
                rec.j2 = Some(terms.j2);
                rec.j3_mean = Some(terms.j3.iter().sum::<f64>() / terms.j3.len() as f64);
            }
            tape.backward(terms.total)?;
            descend(&mut theta, &mut adam, &tape, &bound, cfg.learning_rate)?;
        }
        history.push(rec);
        let change = theta
            .flat_values()
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if change < RGD_TOLERANCE {
            converged = true;
            break;
        }
    }
    Ok(DeeplfRun {
        model: theta,
        history,
        converged,
    })
}
