//! Network architectures: the MLP decision classifier, the GRU cell, and the
//! recurrent generator / discriminator pair.

use std::hash::{Hash, Hasher};

use rand::Rng as _;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeds::Rng;

/// Anything that owns a fixed, ordered list of parameter tensors.
pub trait Parameterized {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flat_values(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.values().iter().copied()).collect()
    }

    fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(
                "set_flat_values",
                format!("expected {} values, got {}", self.param_count(), flat.len()),
            ));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::zero_grad);
    }

    fn set_trainable(&mut self, flag: bool) {
        self.tensors_mut().into_iter().for_each(|t| t.set_requires_grad(flag));
    }

    /// Hash of the exact parameter bits.
    fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for t in self.tensors() {
            t.shape().hash(&mut h);
            for v in t.values() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// A model whose parameters can be placed on a tape.
pub trait Bind: Parameterized {
    type Bound;

    /// Builds the bound network from tape variables given in `tensors()` order.
    fn bind_vars(&self, vars: &mut std::slice::Iter<'_, Var>) -> Self::Bound;

    /// Binds parameters honouring each tensor's `requires_grad` flag.
    fn bind(&self, tape: &mut Tape) -> Bound<Self::Bound> {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| tape.leaf(t)).collect();
        let net = self.bind_vars(&mut vars.iter());
        Bound { net, vars }
    }

    /// Binds parameters as constants.
    fn bind_frozen(&self, tape: &mut Tape) -> Bound<Self::Bound> {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                let mut c = t.clone();
                c.set_requires_grad(false);
                tape.leaf(&c)
            })
            .collect();
        let net = self.bind_vars(&mut vars.iter());
        Bound { net, vars }
    }

    /// Adds the tape gradients of a previous [`bind`](Self::bind) into the parameter tensors.
    fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound<Self::Bound>) -> Result<()> {
        for (t, &v) in self.tensors_mut().into_iter().zip(&bound.vars) {
            tape.accumulate_grad(v, t)?;
        }
        Ok(())
    }
}

/// A network bound to a tape together with the leaf variables backing it.
#[derive(Debug, Clone)]
pub struct Bound<B> {
    pub net: B,
    pub vars: Vec<Var>,
}

impl<B> std::ops::Deref for Bound<B> {
    type Target = B;
    fn deref(&self) -> &B {
        &self.net
    }
}

fn uniform(rng: &mut Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::param(shape, values).expect("finite init")
}

fn zeros_param(shape: Vec<usize>) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.set_requires_grad(true);
    t
}

fn next_var(vars: &mut std::slice::Iter<'_, Var>) -> Var {
    *vars.next().expect("bind_vars: too few variables")
}

// ---------------------------------------------------------------------------
// Affine layer

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: uniform(rng, vec![input, output], input),
            bias: uniform(rng, vec![output], input),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: zeros_param(vec![input, output]),
            bias: zeros_param(vec![output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add_row(xw, self.bias)
    }
}

impl Parameterized for Linear {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl Bind for Linear {
    type Bound = BoundLinear;
    fn bind_vars(&self, vars: &mut std::slice::Iter<'_, Var>) -> BoundLinear {
        BoundLinear {
            weight: next_var(vars),
            bias: next_var(vars),
        }
    }
}

// ---------------------------------------------------------------------------
// Decision classifier

/// Layer widths of the decision classifier.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClassifierConfig {
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
}

impl ClassifierConfig {
    /// FC(d+1 -> 32) -> FC(32 -> 64) -> FC(64 -> 1).
    pub fn simloan(feature_dim: usize) -> Self {
        ClassifierConfig {
            feature_dim,
            hidden: vec![32, 64],
        }
    }
}

/// MLP over the concatenated input `[X, S]`, ReLU hidden layers, sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    layers: Vec<Linear>,
}

impl MlpClassifier {
    pub fn new(cfg: &ClassifierConfig, rng: &mut Rng) -> Self {
        let mut dims = vec![cfg.feature_dim + 1];
        dims.extend(&cfg.hidden);
        dims.push(1);
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        MlpClassifier { layers }
    }

    /// Every weight and bias zero: outputs 0.5 everywhere.
    pub fn zeros(cfg: &ClassifierConfig) -> Self {
        let mut dims = vec![cfg.feature_dim + 1];
        dims.extend(&cfg.hidden);
        dims.push(1);
        let layers = dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        MlpClassifier { layers }
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("mlp", "no layers"));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::shape(
                    "mlp",
                    format!(
                        "layer widths {} -> {} do not chain",
                        w[0].output_dim(),
                        w[1].input_dim()
                    ),
                ));
            }
        }
        if layers.last().map(Linear::output_dim) != Some(1) {
            return Err(Error::shape("mlp", "final layer must have one output"));
        }
        Ok(MlpClassifier { layers })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[0].input_dim() - 1
    }

    pub fn config(&self) -> ClassifierConfig {
        ClassifierConfig {
            feature_dim: self.feature_dim(),
            hidden: self.layers[..self.layers.len() - 1]
                .iter()
                .map(Linear::output_dim)
                .collect(),
        }
    }

    /// `P(Y = 1 | s, x)` for one individual.
    pub fn predict(&self, s: u8, x: &[f64]) -> Result<f64> {
        Ok(self.predict_batch(&[s], x)?[0])
    }

    /// Probabilities for a batch; `x` is row-major `n x d`.
    pub fn predict_batch(&self, s: &[u8], x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let net = self.bind_frozen(&mut tape);
        let (sv, xv) = batch_inputs(&mut tape, s, x, self.feature_dim())?;
        let p = net.prob(&mut tape, sv, xv)?;
        Ok(tape.value(p).to_vec())
    }
}

/// Places a batch of `(s, x)` rows on the tape as `[n x 1]` and `[n x d]` constants.
pub fn batch_inputs(tape: &mut Tape, s: &[u8], x: &[f64], d: usize) -> Result<(Var, Var)> {
    if s.len() * d != x.len() {
        return Err(Error::shape(
            "batch_inputs",
            format!("{} sensitive values vs {} features of width {d}", s.len(), x.len()),
        ));
    }
    if let Some(bad) = s.iter().find(|&&v| v > 1) {
        return Err(Error::invalid(
            "s",
            format!("sensitive attribute must be 0 or 1, got {bad}"),
        ));
    }
    let sv = tape.constant(vec![s.len(), 1], s.iter().map(|&v| f64::from(v)).collect())?;
    let xv = tape.constant(vec![s.len(), d], x.to_vec())?;
    Ok((sv, xv))
}

#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<BoundLinear>,
    feature_dim: usize,
}

impl BoundMlp {
    /// Pre-sigmoid scores, shape `[n x 1]`.
    pub fn logits(&self, tape: &mut Tape, s: Var, x: Var) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.len() != 2 || xs[1] != self.feature_dim {
            return Err(Error::shape(
                "mlp_forward",
                format!("expected [n, {}] features, got {:?}", self.feature_dim, xs),
            ));
        }
        let mut h = tape.concat_cols(&[x, s])?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

impl Parameterized for MlpClassifier {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Linear::tensors).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Linear::tensors_mut).collect()
    }
}

impl Bind for MlpClassifier {
    type Bound = BoundMlp;
    fn bind_vars(&self, vars: &mut std::slice::Iter<'_, Var>) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind_vars(vars)).collect(),
            feature_dim: self.feature_dim(),
        }
    }
}

/// A decision mechanism `(s, x) -> P(Y = 1)` evaluated on a tape.
///
/// `s` is `[n x 1]` with entries in {0, 1}; `x` is `[n x d]`; the result is `[n x 1]`.
pub trait Decision {
    fn prob(&self, tape: &mut Tape, s: Var, x: Var) -> Result<Var>;
}

impl Decision for BoundMlp {
    fn prob(&self, tape: &mut Tape, s: Var, x: Var) -> Result<Var> {
        let z = self.logits(tape, s, x)?;
        tape.sigmoid(z)
    }
}

impl<B: Decision> Decision for Bound<B> {
    fn prob(&self, tape: &mut Tape, s: Var, x: Var) -> Result<Var> {
        self.net.prob(tape, s, x)
    }
}

/// Adapts a closure into a [`Decision`].
pub struct FnDecision<F>(pub F);

impl<F> Decision for FnDecision<F>
where
    F: Fn(&mut Tape, Var, Var) -> Result<Var>,
{
    fn prob(&self, tape: &mut Tape, s: Var, x: Var) -> Result<Var> {
        (self.0)(tape, s, x)
    }
}

// ---------------------------------------------------------------------------
// GRU

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(x Wz + h Uz + bz)
/// r  = sigmoid(x Wr + h Ur + br)
/// n  = tanh(x Wn + (r * h) Un + bn)
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_n: Tensor,
    pub u_n: Tensor,
    pub b_n: Tensor,
}

impl GruCell {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        GruCell {
            w_z: uniform(rng, vec![input, hidden], input),
            u_z: uniform(rng, vec![hidden, hidden], hidden),
            b_z: uniform(rng, vec![hidden], input),
            w_r: uniform(rng, vec![input, hidden], input),
            u_r: uniform(rng, vec![hidden, hidden], hidden),
            b_r: uniform(rng, vec![hidden], input),
            w_n: uniform(rng, vec![input, hidden], input),
            u_n: uniform(rng, vec![hidden, hidden], hidden),
            b_n: uniform(rng, vec![hidden], input),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruCell {
            w_z: zeros_param(vec![input, hidden]),
            u_z: zeros_param(vec![hidden, hidden]),
            b_z: zeros_param(vec![hidden]),
            w_r: zeros_param(vec![input, hidden]),
            u_r: zeros_param(vec![hidden, hidden]),
            b_r: zeros_param(vec![hidden]),
            w_n: zeros_param(vec![input, hidden]),
            u_n: zeros_param(vec![hidden, hidden]),
            b_n: zeros_param(vec![hidden]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.shape()[1]
    }

    /// Single-row convenience wrapper around the bound cell.
    pub fn step(&self, input: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let cell = self.bind_frozen(&mut tape);
        let x = tape.constant(vec![1, input.len()], input.to_vec())?;
        let h = tape.constant(vec![1, h_prev.len()], h_prev.to_vec())?;
        let out = cell.forward(&mut tape, x, h)?;
        Ok(tape.value(out).to_vec())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGru {
    w_z: Var,
    u_z: Var,
    b_z: Var,
    w_r: Var,
    u_r: Var,
    b_r: Var,
    w_n: Var,
    u_n: Var,
    b_n: Var,
    input: usize,
    hidden: usize,
}

impl BoundGru {
    fn gate(&self, tape: &mut Tape, x: Var, h: Var, w: Var, u: Var, b: Var) -> Result<Var> {
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h, u)?;
        let s = tape.add(xw, hu)?;
        tape.add_row(s, b)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let (xs, hs) = (tape.shape(x).to_vec(), tape.shape(h).to_vec());
        if xs.len() != 2 || hs.len() != 2 || xs[1] != self.input || hs[1] != self.hidden || xs[0] != hs[0] {
            return Err(Error::shape(
                "gru_cell",
                format!(
                    "input {xs:?} / hidden {hs:?} for a cell with input {} and hidden {}",
                    self.input, self.hidden
                ),
            ));
        }
        let z_pre = self.gate(tape, x, h, self.w_z, self.u_z, self.b_z)?;
        let z = tape.sigmoid(z_pre)?;
        let r_pre = self.gate(tape, x, h, self.w_r, self.u_r, self.b_r)?;
        let r = tape.sigmoid(r_pre)?;
        let rh = tape.mul(r, h)?;
        let n_pre = self.gate(tape, x, rh, self.w_n, self.u_n, self.b_n)?;
        let n = tape.tanh(n_pre)?;
        let h_minus_n = tape.sub(h, n)?;
        let gated = tape.mul(z, h_minus_n)?;
        tape.add(n, gated)
    }
}

impl Parameterized for GruCell {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_n, &self.u_n, &self.b_n,
        ]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_n,
            &mut self.u_n,
            &mut self.b_n,
        ]
    }
}

impl Bind for GruCell {
    type Bound = BoundGru;
    fn bind_vars(&self, vars: &mut std::slice::Iter<'_, Var>) -> BoundGru {
        BoundGru {
            w_z: next_var(vars),
            u_z: next_var(vars),
            b_z: next_var(vars),
            w_r: next_var(vars),
            u_r: next_var(vars),
            b_r: next_var(vars),
            w_n: next_var(vars),
            u_n: next_var(vars),
            b_n: next_var(vars),
            input: self.input_dim(),
            hidden: self.hidden_dim(),
        }
    }
}

// ---------------------------------------------------------------------------
// Recurrent generator

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorConfig {
    pub feature_dim: usize,
    pub noise_dim: usize,
    pub hidden: [usize; 2],
}

impl GeneratorConfig {
    pub fn simloan(feature_dim: usize) -> Self {
        GeneratorConfig {
            feature_dim,
            noise_dim: feature_dim,
            hidden: [64, 64],
        }
    }
}

/// Generator: `h^1 = tanh(A X^1 + c)`, then per step
/// `h^t = GRU2(GRU1([Y^{t-1}, S, Z^{t-1}], .), .)` and `X^{t+1} = out(h^t)`.
///
/// The affine initializer emits both stacked hidden states at once.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub init: Linear,
    pub gru1: GruCell,
    pub gru2: GruCell,
    pub out: Linear,
    cfg: GeneratorConfig,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, rng: &mut Rng) -> Self {
        let [h1, h2] = cfg.hidden;
        Generator {
            init: Linear::new(cfg.feature_dim, h1 + h2, rng),
            gru1: GruCell::new(cfg.noise_dim + 2, h1, rng),
            gru2: GruCell::new(h1, h2, rng),
            out: Linear::new(h2, cfg.feature_dim, rng),
            cfg: cfg.clone(),
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Rebuilds a generator of the given shape from flat parameters.
    pub fn from_flat(cfg: &GeneratorConfig, flat: &[f64]) -> Result<Self> {
        let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut g = Generator::new(cfg, &mut rng);
        g.set_flat_values(flat)?;
        Ok(g)
    }
}

#[derive(Debug, Clone)]
pub struct BoundGenerator {
    init: BoundLinear,
    gru1: BoundGru,
    gru2: BoundGru,
    out: BoundLinear,
    cfg: GeneratorConfig,
}

impl Parameterized for Generator {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.init.tensors();
        v.extend(self.gru1.tensors());
        v.extend(self.gru2.tensors());
        v.extend(self.out.tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.init.tensors_mut();
        v.extend(self.gru1.tensors_mut());
        v.extend(self.gru2.tensors_mut());
        v.extend(self.out.tensors_mut());
        v
    }
}

impl Bind for Generator {
    type Bound = BoundGenerator;
    fn bind_vars(&self, vars: &mut std::slice::Iter<'_, Var>) -> BoundGenerator {
        BoundGenerator {
            init: self.init.bind_vars(vars),
            gru1: self.gru1.bind_vars(vars),
            gru2: self.gru2.bind_vars(vars),
            out: self.out.bind_vars(vars),
            cfg: self.cfg.clone(),
        }
    }
}

/// How the generator turns decision probabilities into the `Y` it feeds back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionMode {
    /// Feed the probability itself; differentiable.
    Soft,
    /// Feed a Bernoulli draw; requires an rng.
    Sampled,
}

/// Per-step features (`[n x d]`) and decisions (`[n x 1]`) of a rollout, steps `1..=horizon`.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub xs: Vec<Var>,
    pub ys: Vec<Var>,
}

impl Rollout {
    pub fn horizon(&self) -> usize {
        self.xs.len()
    }
}

fn decide(
    tape: &mut Tape,
    decision: &dyn Decision,
    s: Var,
    x: Var,
    mode: DecisionMode,
    rng: &mut Option<&mut Rng>,
) -> Result<Var> {
    let p = decision.prob(tape, s, x)?;
    match mode {
        DecisionMode::Soft => Ok(p),
        DecisionMode::Sampled => {
            let rng = rng
                .as_deref_mut()
                .ok_or_else(|| Error::invalid("rng", "sampled decision mode needs an rng"))?;
            let draws = tape
                .value(p)
                .iter()
                .map(|&q| if rng.random::<f64>() < q { 1.0 } else { 0.0 })
                .collect();
            let shape = tape.shape(p).to_vec();
            tape.constant(shape, draws)
        }
    }
}

impl BoundGenerator {
    /// Generates features for steps `1..=noise.len()+1`, starting from the supplied `x1`.
    ///
    /// `s` is `[n x 1]`, `x1` is `[n x d]`, each `noise[t]` is `[n x noise_dim]`.
    /// Swapping `decision` realises a soft intervention on the decision mechanism.
    pub fn rollout(
        &self,
        tape: &mut Tape,
        decision: &dyn Decision,
        s: Var,
        x1: Var,
        noise: &[Var],
        mode: DecisionMode,
        mut rng: Option<&mut Rng>,
    ) -> Result<Rollout> {
        if mode == DecisionMode::Sampled && rng.is_none() {
            return Err(Error::invalid("rng", "sampled decision mode needs an rng"));
        }
        let xs0 = tape.shape(x1).to_vec();
        if xs0.len() != 2 || xs0[1] != self.cfg.feature_dim || tape.shape(s) != [xs0[0], 1] {
            return Err(Error::shape(
                "generator_rollout",
                format!(
                    "x1 {:?}, s {:?}, feature dim {}",
                    xs0,
                    tape.shape(s),
                    self.cfg.feature_dim
                ),
            ));
        }
        let n = xs0[0];
        for z in noise {
            if tape.shape(*z) != [n, self.cfg.noise_dim] {
                return Err(Error::shape(
                    "generator_rollout",
                    format!("noise {:?}, expected [{n}, {}]", tape.shape(*z), self.cfg.noise_dim),
                ));
            }
        }

        let mut xs = vec![x1];
        let mut ys = Vec::with_capacity(noise.len() + 1);
        if !noise.is_empty() {
            let [h1_dim, h2_dim] = self.cfg.hidden;
            let pre = self.init.forward(tape, x1)?;
            let h0 = tape.tanh(pre)?;
            let mut h1 = tape.slice_cols(h0, 0, h1_dim)?;
            let mut h2 = tape.slice_cols(h0, h1_dim, h1_dim + h2_dim)?;
            for z in noise {
                let x = *xs.last().unwrap();
                let y = decide(tape, decision, s, x, mode, &mut rng)?;
                ys.push(y);
                let input = tape.concat_cols(&[y, s, *z])?;
                h1 = self.gru1.forward(tape, input, h1)?;
                h2 = self.gru2.forward(tape, h1, h2)?;
                xs.push(self.out.forward(tape, h2)?);
            }
        }
        let last = *xs.last().unwrap();
        ys.push(decide(tape, decision, s, last, mode, &mut rng)?);
        Ok(Rollout { xs, ys })
    }
}

// ---------------------------------------------------------------------------
// Recurrent discriminator

/// Two stacked GRUs over the feature series and a per-step logit head.
/// The head starts at zero, so an untrained discriminator outputs 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub gru1: GruCell,
    pub gru2: GruCell,
    pub out: Linear,
}

impl Discriminator {
    pub fn new(feature_dim: usize, hidden: [usize; 2], rng: &mut Rng) -> Self {
        Discriminator {
            gru1: GruCell::new(feature_dim, hidden[0], rng),
            gru2: GruCell::new(hidden[0], hidden[1], rng),
            out: Linear::zeros(hidden[1], 1),
        }
    }

    pub fn zeros(feature_dim: usize, hidden: [usize; 2]) -> Self {
        Discriminator {
            gru1: GruCell::zeros(feature_dim, hidden[0]),
            gru2: GruCell::zeros(hidden[0], hidden[1]),
            out: Linear::zeros(hidden[1], 1),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.gru1.input_dim()
    }

    pub fn hidden(&self) -> [usize; 2] {
        [self.gru1.hidden_dim(), self.gru2.hidden_dim()]
    }

    /// Per-step probabilities for one series given as `horizon` rows of width `d`.
    pub fn probabilities(&self, series: &[f64]) -> Result<Vec<f64>> {
        let d = self.feature_dim();
        if series.is_empty() || !series.len().is_multiple_of(d) {
            return Err(Error::shape(
                "discriminator_forward",
                format!("{} values is not a positive multiple of {d}", series.len()),
            ));
        }
        let mut tape = Tape::new();
        let disc = self.bind_frozen(&mut tape);
        let steps = series
            .chunks(d)
            .map(|row| tape.constant(vec![1, d], row.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let logits = disc.logits(&mut tape, &steps)?;
        logits
            .into_iter()
            .map(|l| {
                let p = tape.sigmoid(l)?;
                Ok(tape.item(p))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct BoundDiscriminator {
    gru1: BoundGru,
    gru2: BoundGru,
    out: BoundLinear,
}

impl BoundDiscriminator {
    /// Per-step logits `[n x 1]` for a series of `[n x d]` steps.
    pub fn logits(&self, tape: &mut Tape, series: &[Var]) -> Result<Vec<Var>> {
        let first = *series
            .first()
            .ok_or_else(|| Error::shape("discriminator_forward", "empty series"))?;
        let n = tape.shape(first)[0];
        let mut h1 = tape.constant(vec![n, self.gru1.hidden], vec![0.0; n * self.gru1.hidden])?;
        let mut h2 = tape.constant(vec![n, self.gru2.hidden], vec![0.0; n * self.gru2.hidden])?;
        let mut out = Vec::with_capacity(series.len());
        for &x in series {
            h1 = self.gru1.forward(tape, x, h1)?;
            h2 = self.gru2.forward(tape, h1, h2)?;
            out.push(self.out.forward(tape, h2)?);
        }
        Ok(out)
    }
}

impl Parameterized for Discriminator {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.gru1.tensors();
        v.extend(self.gru2.tensors());
        v.extend(self.out.tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.gru1.tensors_mut();
        v.extend(self.gru2.tensors_mut());
        v.extend(self.out.tensors_mut());
        v
    }
}

impl Bind for Discriminator {
    type Bound = BoundDiscriminator;
    fn bind_vars(&self, vars: &mut std::slice::Iter<'_, Var>) -> BoundDiscriminator {
        BoundDiscriminator {
            gru1: self.gru1.bind_vars(vars),
            gru2: self.gru2.bind_vars(vars),
            out: self.out.bind_vars(vars),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check_many;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn random_rows(rng: &mut Rng, n: usize, d: usize, scale: f64) -> Vec<f64> {
        (0..n * d).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn zero_classifier_outputs_half() {
        let mlp = MlpClassifier::zeros(&ClassifierConfig::simloan(6));
        let mut r = rng(1);
        for _ in 0..10 {
            let x = random_rows(&mut r, 1, 6, 5.0);
            assert_eq!(mlp.predict(r.random_range(0..2), &x).unwrap(), 0.5);
        }
    }

    #[test]
    fn classifier_outputs_in_open_unit_interval() {
        let mut r = rng(2);
        let mlp = MlpClassifier::new(&ClassifierConfig::simloan(6), &mut r);
        let s: Vec<u8> = (0..1000).map(|_| r.random_range(0..2)).collect();
        let x = random_rows(&mut r, 1000, 6, 3.0);
        for p in mlp.predict_batch(&s, &x).unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn classifier_rejects_wrong_width() {
        let mlp = MlpClassifier::zeros(&ClassifierConfig::simloan(6));
        assert!(mlp.predict(0, &[0.0; 5]).is_err());
        assert!(mlp.predict(2, &[0.0; 6]).is_err());
    }

    #[test]
    fn classifier_input_gradient_matches_finite_differences() {
        let mut r = rng(3);
        let mlp = MlpClassifier::new(&ClassifierConfig::simloan(4), &mut r);
        let x = Tensor::new(vec![3, 4], random_rows(&mut r, 3, 4, 1.0)).unwrap();
        let err = crate::autodiff::finite_difference_check(
            |tape, x| {
                let net = mlp.bind_frozen(tape);
                let s = tape.constant(vec![3, 1], vec![0.0, 1.0, 1.0])?;
                let p = net.prob(tape, s, x)?;
                tape.sum(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gru_zero_everything_is_zero() {
        let cell = GruCell::zeros(3, 4);
        assert_eq!(cell.step(&[0.0; 3], &[0.0; 4]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn saturated_update_gate_copies_state() {
        let mut r = rng(4);
        let mut cell = GruCell::new(3, 4, &mut r);
        cell.b_z.values_mut().iter_mut().for_each(|b| *b = 40.0);
        let h = [0.3, -0.2, 0.7, -0.9];
        let out = cell.step(&[0.5, -1.0, 2.0], &h).unwrap();
        for (a, b) in out.iter().zip(h) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gru_keeps_state_bounded() {
        let mut r = rng(5);
        let cell = GruCell::new(3, 8, &mut r);
        for _ in 0..100 {
            let x = random_rows(&mut r, 1, 3, 10.0);
            let h = random_rows(&mut r, 1, 8, 0.999);
            assert!(cell.step(&x, &h).unwrap().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn gru_rejects_bad_dims() {
        let cell = GruCell::zeros(3, 4);
        assert!(cell.step(&[0.0; 2], &[0.0; 4]).is_err());
    }

    #[test]
    fn gru_gradient_matches_finite_differences() {
        let mut r = rng(6);
        let cell = GruCell::new(3, 5, &mut r);
        let x = Tensor::new(vec![2, 3], random_rows(&mut r, 2, 3, 1.0)).unwrap();
        let h = Tensor::new(vec![2, 5], random_rows(&mut r, 2, 5, 0.9)).unwrap();
        let mut points: Vec<Tensor> = cell.tensors().into_iter().cloned().collect();
        points.push(x);
        points.push(h);
        let err = finite_difference_check_many(
            |tape, vars| {
                let bound = cell.bind_vars(&mut vars[..9].iter());
                let out = bound.forward(tape, vars[9], vars[10])?;
                tape.sum(out)
            },
            &points,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn small_gen(seed: u64) -> Generator {
        let cfg = GeneratorConfig {
            feature_dim: 3,
            noise_dim: 2,
            hidden: [5, 4],
        };
        Generator::new(&cfg, &mut rng(seed))
    }

    fn rollout_values(
        gen: &Generator,
        clf: &MlpClassifier,
        horizon: usize,
        mode: DecisionMode,
        seed: u64,
    ) -> Vec<Vec<f64>> {
        let mut r = rng(seed);
        let n = 4;
        let mut tape = Tape::new();
        let g = gen.bind_frozen(&mut tape);
        let c = clf.bind_frozen(&mut tape);
        let s = tape.constant(vec![n, 1], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let x1 = tape.constant(vec![n, 3], random_rows(&mut r, n, 3, 1.0)).unwrap();
        let noise: Vec<Var> = (0..horizon - 1)
            .map(|_| tape.constant(vec![n, 2], random_rows(&mut r, n, 2, 1.0)).unwrap())
            .collect();
        let ro = g.rollout(&mut tape, &c, s, x1, &noise, mode, Some(&mut r)).unwrap();
        ro.xs.iter().chain(&ro.ys).map(|&v| tape.value(v).to_vec()).collect()
    }

    #[test]
    fn horizon_one_rollout_has_no_recurrence() {
        let gen = small_gen(7);
        let clf = MlpClassifier::new(&ClassifierConfig::simloan(3), &mut rng(8));
        let mut tape = Tape::new();
        let g = gen.bind_frozen(&mut tape);
        let c = clf.bind_frozen(&mut tape);
        let s = tape.constant(vec![1, 1], vec![1.0]).unwrap();
        let x1 = tape.constant(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let before = tape.len();
        let ro = g.rollout(&mut tape, &c, s, x1, &[], DecisionMode::Soft, None).unwrap();
        assert_eq!(ro.xs, vec![x1]);
        assert_eq!(ro.ys.len(), 1);
        assert_eq!(tape.item(ro.ys[0]), clf.predict(1, &[0.1, 0.2, 0.3]).unwrap());
        // only the classifier ran: concat + 3 affine + 2 relu + sigmoid
        assert!(tape.len() - before < 15);
    }

    #[test]
    fn rollouts_are_deterministic_and_intervention_identity_holds() {
        let gen = small_gen(9);
        let clf = MlpClassifier::new(&ClassifierConfig::simloan(3), &mut rng(10));
        let copy = clf.clone();
        for mode in [DecisionMode::Soft, DecisionMode::Sampled] {
            let a = rollout_values(&gen, &clf, 6, mode, 11);
            let b = rollout_values(&gen, &clf, 6, mode, 11);
            let c = rollout_values(&gen, &copy, 6, mode, 11);
            assert_eq!(a, b);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn sampled_mode_requires_rng() {
        let gen = small_gen(12);
        let clf = MlpClassifier::zeros(&ClassifierConfig::simloan(3));
        let mut tape = Tape::new();
        let g = gen.bind_frozen(&mut tape);
        let c = clf.bind_frozen(&mut tape);
        let s = tape.constant(vec![1, 1], vec![1.0]).unwrap();
        let x1 = tape.constant(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let err = g.rollout(&mut tape, &c, s, x1, &[], DecisionMode::Sampled, None);
        assert!(err.is_err());
    }

    #[test]
    fn zero_discriminator_is_indifferent() {
        let disc = Discriminator::zeros(3, [4, 4]);
        for horizon in 1..=10 {
            let series = vec![0.7; horizon * 3];
            let p = disc.probabilities(&series).unwrap();
            assert_eq!(p, vec![0.5; horizon]);
        }
        assert!(disc.probabilities(&[0.0; 4]).is_err());
    }

    #[test]
    fn fresh_discriminator_outputs_half() {
        let disc = Discriminator::new(3, [6, 6], &mut rng(13));
        let p = disc.probabilities(&[0.3, -0.4, 1.0, 0.2, 0.1, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn bind_order_matches_tensor_order() {
        let gen = small_gen(14);
        let mut tape = Tape::new();
        let b = gen.bind(&mut tape);
        assert_eq!(b.vars.len(), gen.tensors().len());
        for (v, t) in b.vars.iter().zip(gen.tensors()) {
            assert_eq!(tape.value(*v), t.values());
        }
        let flat = gen.flat_values();
        let rebuilt = Generator::from_flat(gen.config(), &flat).unwrap();
        assert_eq!(rebuilt.flat_values(), flat);
        assert_eq!(rebuilt.fingerprint(), gen.fingerprint());
    }
}
