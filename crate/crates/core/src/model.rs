//! Message-passing pooling model.
//!
//! Frames become graph vertices. One attention layer builds the adjacency
//! from the projected frames; `T` rounds of message passing then update the
//! vertex states, and a gated readout produces the utterance embedding:
//!
//! ```text
//! x        = sum_i w_i x_i / sum_i w_i            (optional layer weighting)
//! H_0      = X W^T,  A = softmax_row(beta * cos(H_0))
//! H_t      = act(LN_t(MLP_t(A H_{t-1})))          t = 1..T
//! G        = MLP_theta(H_T) * sigmoid(MLP_phi(H_T))   (thin: MLP_theta(H_T))
//! h        = sum_t mean_v(H_t) + max_v(G)
//! ```
//!
//! States are stored vertices-as-rows (`N x F'`) throughout. The adjacency
//! is computed once and reused in every round.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionParams};
use crate::dataio::{FeatureStack, NamedTensor};
use crate::diffcore::{lit, Mat, Real, Tape, Var};
use crate::error::{Error, Result};

/// Smallest `|sum w_i|` accepted by layer weighting.
pub const LAYER_WEIGHT_SUM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Usage(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Projected dimension; `None` keeps `feature_dim`.
    pub projected_dim: Option<usize>,
    pub rounds: usize,
    pub mlp_hidden: usize,
    pub activation: Activation,
    pub use_layer_weighting: bool,
    pub thin: bool,
    pub layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 768,
            projected_dim: None,
            rounds: 2,
            mlp_hidden: 1024,
            activation: Activation::Relu,
            use_layer_weighting: true,
            thin: false,
            layers: 13,
        }
    }
}

impl ModelConfig {
    pub fn projected(&self) -> usize {
        self.projected_dim.unwrap_or(self.feature_dim)
    }

    /// Layer count expected in input stacks.
    pub fn input_layers(&self) -> usize {
        if self.use_layer_weighting {
            self.layers
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Usage("rounds must be at least 1".into()));
        }
        if self.mlp_hidden == 0 || self.feature_dim == 0 || self.projected() == 0 {
            return Err(Error::Usage("dimensions must be positive".into()));
        }
        if self.use_layer_weighting && self.layers == 0 {
            return Err(Error::Usage("layer weighting needs at least one layer".into()));
        }
        Ok(())
    }

    /// Trainable parameter count of the pooling stack.
    pub fn param_count(&self) -> usize {
        let (f, p, h) = (self.feature_dim, self.projected(), self.mlp_hidden);
        let mlp = p * h + h + h * p + p;
        let attention = p * f + 1;
        let update = self.rounds * (mlp + 2 * p);
        let readout = if self.thin { mlp } else { 2 * mlp };
        let weights = if self.use_layer_weighting { self.layers } else { 0 };
        attention + update + readout + weights
    }
}

/// `in -> hidden -> out` perceptron with biases; vertices are rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Real> {
    pub w1: Mat<T>,
    pub b1: Mat<T>,
    pub w2: Mat<T>,
    pub b2: Mat<T>,
}

impl<T: Real> Mlp<T> {
    pub fn init<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut uniform = |r: usize, c: usize| {
            let bound = 1.0 / (r as f64).sqrt();
            Mat::from_shape_fn((r, c), |_| lit(rng.random_range(-bound..bound)))
        };
        let w1 = uniform(input, hidden);
        let w2 = uniform(hidden, output);
        Mlp {
            w1,
            b1: Mat::zeros((1, hidden)),
            w2,
            b2: Mat::zeros((1, output)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, act: Activation) -> Result<Var> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add(h, self.b1)?;
        let h = act.apply(tape, h)?;
        let o = tape.matmul(h, self.w2)?;
        tape.add(o, self.b2)
    }
}

/// Per-round update: MLP followed by layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateParams<T: Real> {
    pub mlp: Mlp<T>,
    pub norm_gain: Mat<T>,
    pub norm_bias: Mat<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real> {
    pub attention: AttentionParams<T>,
    pub updates: Vec<UpdateParams<T>>,
    pub readout_theta: Mlp<T>,
    pub readout_phi: Option<Mlp<T>>,
    /// 1 x L, present when layer weighting is on.
    pub layer_weights: Option<Mat<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, p, h) = (config.feature_dim, config.projected(), config.mlp_hidden);
        let attention = AttentionParams::init(f, p, &mut rng);
        let updates = (0..config.rounds)
            .map(|_| UpdateParams {
                mlp: Mlp::init(p, h, p, &mut rng),
                norm_gain: Mat::ones((1, p)),
                norm_bias: Mat::zeros((1, p)),
            })
            .collect();
        let readout_theta = Mlp::init(p, h, p, &mut rng);
        let readout_phi = (!config.thin).then(|| Mlp::init(p, h, p, &mut rng));
        let layer_weights = config
            .use_layer_weighting
            .then(|| Mat::ones((1, config.layers)));
        Ok(ModelParams {
            attention,
            updates,
            readout_theta,
            readout_phi,
            layer_weights,
        })
    }

    /// Parameter tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, Mat<T>)> {
        let mut out = vec![
            ("attention.projection".to_string(), self.attention.projection.clone()),
            ("attention.beta".to_string(), Mat::from_elem((1, 1), self.attention.beta)),
        ];
        let push_mlp = |out: &mut Vec<(String, Mat<T>)>, prefix: &str, m: &Mlp<T>| {
            for (k, t) in [("w1", &m.w1), ("b1", &m.b1), ("w2", &m.w2), ("b2", &m.b2)] {
                out.push((format!("{prefix}.{k}"), t.clone()));
            }
        };
        for (t, u) in self.updates.iter().enumerate() {
            push_mlp(&mut out, &format!("update.{}.mlp", t + 1), &u.mlp);
            out.push((format!("update.{}.norm.gain", t + 1), u.norm_gain.clone()));
            out.push((format!("update.{}.norm.bias", t + 1), u.norm_bias.clone()));
        }
        push_mlp(&mut out, "readout.theta", &self.readout_theta);
        if let Some(phi) = &self.readout_phi {
            push_mlp(&mut out, "readout.phi", phi);
        }
        if let Some(w) = &self.layer_weights {
            out.push(("layer_weights".to_string(), w.clone()));
        }
        out
    }

    /// Mutable references in the same order as [`ModelParams::named`]. The
    /// temperature is passed as a 1x1 matrix.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Mat<T>)) {
        let mut beta = Mat::from_elem((1, 1), self.attention.beta);
        f("attention.projection", &mut self.attention.projection);
        f("attention.beta", &mut beta);
        self.attention.beta = beta[[0, 0]];
        for (t, u) in self.updates.iter_mut().enumerate() {
            let p = format!("update.{}", t + 1);
            visit_mlp(&format!("{p}.mlp"), &mut u.mlp, &mut f);
            f(&format!("{p}.norm.gain"), &mut u.norm_gain);
            f(&format!("{p}.norm.bias"), &mut u.norm_bias);
        }
        visit_mlp("readout.theta", &mut self.readout_theta, &mut f);
        if let Some(phi) = &mut self.readout_phi {
            visit_mlp("readout.phi", phi, &mut f);
        }
        if let Some(w) = &mut self.layer_weights {
            f("layer_weights", w);
        }
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        self.named()
            .iter()
            .map(|(n, t)| NamedTensor::from_matrix(format!("{prefix}{n}"), t))
            .collect()
    }

    /// Rebuild from checkpoint tensors written by [`ModelParams::to_tensors`].
    pub fn from_tensors(config: &ModelConfig, tensors: &[NamedTensor], prefix: &str) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        let lookup = |name: &str| -> Result<Mat<T>> {
            let full = format!("{prefix}{name}");
            tensors
                .iter()
                .find(|t| t.name == full)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{full}`")))?
                .to_matrix()
        };
        let mut failure = None;
        params.visit_mut(|name, slot| {
            if failure.is_some() {
                return;
            }
            match lookup(name) {
                Ok(m) if m.dim() == slot.dim() => *slot = m,
                Ok(m) => {
                    failure = Some(Error::Format(format!(
                        "tensor `{name}` is {:?}, config expects {:?}",
                        m.dim(),
                        slot.dim()
                    )))
                }
                Err(e) => failure = Some(e),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(params),
        }
    }

    /// Layer weights divided by their sum.
    pub fn normalized_layer_weights(&self) -> Option<Vec<f64>> {
        self.layer_weights.as_ref().map(|w| {
            let s: f64 = w.iter().map(|v| v.as_f64()).sum();
            w.iter().map(|v| v.as_f64() / s).collect()
        })
    }
}

fn visit_mlp<T: Real>(prefix: &str, m: &mut Mlp<T>, f: &mut impl FnMut(&str, &mut Mat<T>)) {
    f(&format!("{prefix}.w1"), &mut m.w1);
    f(&format!("{prefix}.b1"), &mut m.b1);
    f(&format!("{prefix}.w2"), &mut m.w2);
    f(&format!("{prefix}.b2"), &mut m.b2);
}

#[derive(Clone, Copy, Debug)]
pub struct UpdateVars {
    pub mlp: MlpVars,
    pub gain: Var,
    pub bias: Var,
}

/// Tape leaves for every parameter, in [`ModelParams::named`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub projection: Var,
    pub beta: Var,
    pub updates: Vec<UpdateVars>,
    pub theta: MlpVars,
    pub phi: Option<MlpVars>,
    pub layer_weights: Option<Var>,
}

impl ParamVars {
    /// Record every parameter on the tape; `trainable` decides whether they
    /// receive gradients.
    pub fn record<T: Real>(tape: &mut Tape<T>, params: &ModelParams<T>, trainable: bool) -> Result<Self> {
        let leaves = params
            .named()
            .into_iter()
            .map(|(_, m)| if trainable { tape.param(m) } else { tape.constant(m) })
            .collect::<Result<Vec<_>>>()?;
        Self::from_leaves(
            &leaves,
            params.updates.len(),
            params.readout_phi.is_some(),
            params.layer_weights.is_some(),
        )
    }

    /// Assign existing leaves, given in [`ModelParams::named`] order.
    pub fn from_leaves(leaves: &[Var], rounds: usize, gated: bool, weighted: bool) -> Result<Self> {
        let expected = 2 + rounds * 6 + 4 + if gated { 4 } else { 0 } + usize::from(weighted);
        if leaves.len() != expected {
            return Err(Error::Usage(format!(
                "{} leaves given, layout needs {expected}",
                leaves.len()
            )));
        }
        let mut it = leaves.iter().copied();
        let mut take = move || it.next().expect("length checked");
        let projection = take();
        let beta = take();
        let mut updates = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let mlp = MlpVars { w1: take(), b1: take(), w2: take(), b2: take() };
            updates.push(UpdateVars { mlp, gain: take(), bias: take() });
        }
        let theta = MlpVars { w1: take(), b1: take(), w2: take(), b2: take() };
        let phi = gated.then(|| MlpVars { w1: take(), b1: take(), w2: take(), b2: take() });
        let layer_weights = weighted.then(&mut take);
        Ok(ParamVars {
            projection,
            beta,
            updates,
            theta,
            phi,
            layer_weights,
        })
    }

    /// All leaves in [`ModelParams::named`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.projection, self.beta];
        let mlp = |out: &mut Vec<Var>, m: &MlpVars| out.extend([m.w1, m.b1, m.w2, m.b2]);
        for u in &self.updates {
            mlp(&mut out, &u.mlp);
            out.extend([u.gain, u.bias]);
        }
        mlp(&mut out, &self.theta);
        if let Some(phi) = &self.phi {
            mlp(&mut out, phi);
        }
        out.extend(self.layer_weights);
        out
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub embedding: Var,
    pub adjacency: Var,
    /// `H_0 .. H_T`.
    pub history: Vec<Var>,
    pub gated: Var,
}

/// Stack the layers of `stack` as an `L x (N*F)` matrix.
fn layer_matrix<T: Real>(stack: &FeatureStack) -> Mat<T> {
    let width = stack.frames() * stack.dim();
    Mat::from_shape_fn((stack.layers(), width), |(l, k)| {
        T::cast(stack.values()[l * width + k] as f64)
    })
}

/// `sum_i w_i x_i / sum_i w_i` over the layers of `stack`; `weights` is 1 x L.
pub fn weight_layers<T: Real>(tape: &mut Tape<T>, stack: &FeatureStack, weights: Var) -> Result<Var> {
    let (_, l) = tape.shape(weights);
    if l != stack.layers() {
        return Err(Error::shape(
            "weight_layers",
            format!("{l} weights for {} layers", stack.layers()),
        ));
    }
    let total = tape.sum(weights)?;
    let s = tape.scalar(total).as_f64();
    if s.abs() < LAYER_WEIGHT_SUM_FLOOR {
        return Err(Error::DegenerateWeights(s));
    }
    let layers = tape.constant(layer_matrix(stack))?;
    let mixed = tape.matmul(weights, layers)?;
    let mixed = tape.reshape(mixed, stack.frames(), stack.dim())?;
    let inv = tape.reciprocal(total)?;
    tape.scale_by(mixed, inv)
}

/// `M = A H`.
pub fn message<T: Real>(tape: &mut Tape<T>, adjacency: Var, states: Var) -> Result<Var> {
    tape.matmul(adjacency, states)
}

/// `H_t = act(LN(MLP_t(M)))`; `round` is 1-based.
pub fn update<T: Real>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    msg: Var,
    round: usize,
    act: Activation,
) -> Result<Var> {
    let u = round
        .checked_sub(1)
        .and_then(|i| vars.updates.get(i))
        .ok_or_else(|| {
            Error::Usage(format!(
                "round {round} outside 1..={}",
                vars.updates.len()
            ))
        })?;
    let z = u.mlp.forward(tape, msg, act)?;
    let z = tape.layer_norm(z, u.gain, u.bias)?;
    act.apply(tape, z)
}

/// Gated readout over the state history. Returns `(embedding, gated)`.
pub fn readout<T: Real>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    history: &[Var],
    act: Activation,
) -> Result<(Var, Var)> {
    let last = *history
        .last()
        .ok_or_else(|| Error::Usage("empty state history".into()))?;
    let theta = vars.theta.forward(tape, last, act)?;
    let gated = match &vars.phi {
        Some(phi) => {
            let g = phi.forward(tape, last, act)?;
            let g = tape.sigmoid(g)?;
            tape.mul(theta, g)?
        }
        None => theta,
    };
    let mut acc = tape.max_over_rows(gated)?;
    for &h in history {
        let m = tape.mean_over_rows(h)?;
        acc = tape.add(acc, m)?;
    }
    Ok((acc, gated))
}

/// Full forward pass for one utterance.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    config: &ModelConfig,
    stack: &FeatureStack,
) -> Result<ForwardVars> {
    if stack.layers() != config.input_layers() || stack.dim() != config.feature_dim {
        return Err(Error::shape(
            "forward",
            format!(
                "stack is {}x{}x{}, model expects {} layers of dim {}",
                stack.layers(),
                stack.frames(),
                stack.dim(),
                config.input_layers(),
                config.feature_dim
            ),
        ));
    }
    let frames = match vars.layer_weights {
        Some(w) => weight_layers(tape, stack, w)?,
        None => tape.constant(stack.layer_as(0))?,
    };
    let h0 = attention::project(tape, frames, vars.projection)?;
    let adjacency = attention::build_adjacency(tape, h0, vars.beta)?;
    let mut history = vec![h0];
    for round in 1..=config.rounds {
        let msg = message(tape, adjacency, *history.last().expect("nonempty"))?;
        history.push(update(tape, vars, msg, round, config.activation)?);
    }
    let (embedding, gated) = readout(tape, vars, &history, config.activation)?;
    Ok(ForwardVars {
        embedding,
        adjacency,
        history,
        gated,
    })
}

/// Gradient-free model wrapper for extraction and inspection.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Embedding of one utterance (length `F'`).
    pub fn embed(&self, stack: &FeatureStack) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let vars = ParamVars::record(&mut tape, &self.params, false)?;
        let out = forward(&mut tape, &vars, &self.config, stack)?;
        Ok(tape.value(out.embedding).iter().copied().collect())
    }

    /// Attention adjacency for one utterance.
    pub fn adjacency(&self, stack: &FeatureStack) -> Result<Mat<T>> {
        let mut tape = Tape::new();
        let vars = ParamVars::record(&mut tape, &self.params, false)?;
        let out = forward(&mut tape, &vars, &self.config, stack)?;
        Ok(tape.value(out.adjacency).clone())
    }
}

#[cfg(test)]
mod tests;
