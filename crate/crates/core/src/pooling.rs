//! Classical pooling baselines and their graph-shift forms.
//!
//! Frames are stored as an `N x F` matrix (one vertex per row). A shift
//! matrix `A` is `N x N`, and shifting computes `A * frames`; every row of a
//! mean or selection shift is identical, so any output row is the pooled
//! vector.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Mat, Tape};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolingKind {
    Mean,
    Max,
    MeanStd,
    Quantile,
    First,
    Middle,
    Last,
    Random { seed: u64 },
}

impl PoolingKind {
    pub const QUARTILES: [f64; 3] = [0.25, 0.5, 0.75];

    /// Length of the pooled vector for `dim`-dimensional frames.
    pub fn output_dim(self, dim: usize) -> usize {
        match self {
            PoolingKind::MeanStd => 2 * dim,
            PoolingKind::Quantile => 3 * dim,
            _ => dim,
        }
    }

    /// Whether the kind has an exact linear shift-matrix form.
    pub fn is_linear(self) -> bool {
        !matches!(
            self,
            PoolingKind::Max | PoolingKind::MeanStd | PoolingKind::Quantile
        )
    }
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PoolingKind::Mean => "mean",
            PoolingKind::Max => "max",
            PoolingKind::MeanStd => "mean_std",
            PoolingKind::Quantile => "quantile",
            PoolingKind::First => "first",
            PoolingKind::Middle => "middle",
            PoolingKind::Last => "last",
            PoolingKind::Random { .. } => "random",
        };
        f.write_str(s)
    }
}

impl FromStr for PoolingKind {
    type Err = Error;

    /// Parses a kind name; `random` gets seed 0 and is usually followed by
    /// [`PoolingKind::with_seed`].
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mean" => PoolingKind::Mean,
            "max" => PoolingKind::Max,
            "mean_std" | "mean&std" => PoolingKind::MeanStd,
            "quantile" => PoolingKind::Quantile,
            "first" => PoolingKind::First,
            "middle" => PoolingKind::Middle,
            "last" => PoolingKind::Last,
            "random" => PoolingKind::Random { seed: 0 },
            other => return Err(Error::Usage(format!("unknown pooling kind `{other}`"))),
        })
    }
}

impl PoolingKind {
    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            PoolingKind::Random { .. } => PoolingKind::Random { seed },
            k => k,
        }
    }
}

/// `N x N` graph shift operator.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftMatrix(Array2<f64>);

impl ShiftMatrix {
    pub fn new(a: Array2<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || a.is_empty() {
            return Err(Error::shape("shift", format!("{:?} is not square", a.dim())));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("shift matrix has non-finite entries".into()));
        }
        Ok(ShiftMatrix(a))
    }

    pub fn identity(n: usize) -> Self {
        ShiftMatrix(Array2::eye(n))
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// 0-based frame chosen by a selection kind: first is vertex 1, middle is
/// vertex floor(N/2) (at least 1), last is vertex N, random is seeded uniform.
pub fn selection_index(kind: PoolingKind, n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::Domain("no frames to select from".into()));
    }
    match kind {
        PoolingKind::First => Ok(0),
        PoolingKind::Middle => Ok((n / 2).max(1) - 1),
        PoolingKind::Last => Ok(n - 1),
        PoolingKind::Random { seed } => Ok(ChaCha8Rng::seed_from_u64(seed).random_range(0..n)),
        other => Err(Error::Usage(format!("{other} pooling does not select a frame"))),
    }
}

pub fn make_shift(kind: PoolingKind, n: usize) -> Result<ShiftMatrix> {
    if n == 0 {
        return Err(Error::Domain("shift matrix needs N >= 1".into()));
    }
    let a = match kind {
        PoolingKind::Mean => Array2::from_elem((n, n), 1.0 / n as f64),
        PoolingKind::First | PoolingKind::Middle | PoolingKind::Last | PoolingKind::Random { .. } => {
            let col = selection_index(kind, n)?;
            let mut a = Array2::zeros((n, n));
            a.column_mut(col).fill(1.0);
            a
        }
        other => {
            return Err(Error::Usage(format!(
                "{other} pooling has no shift-matrix form"
            )))
        }
    };
    Ok(ShiftMatrix(a))
}

/// `A * frames`, i.e. the shift applied to the `N x F` frame matrix.
pub fn shift(a: &ShiftMatrix, frames: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if a.len() != frames.nrows() {
        return Err(Error::shape(
            "shift",
            format!("{}x{} shift on {} frames", a.len(), a.len(), frames.nrows()),
        ));
    }
    Ok(a.0.dot(&frames))
}

/// Linearly interpolated quantile of an ascending slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Pool an `N x F` frame matrix into one vector.
pub fn pool(kind: PoolingKind, frames: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let (n, _) = frames.dim();
    if n == 0 {
        return Err(Error::shape("pool", "no frames"));
    }
    let out = match kind {
        PoolingKind::Mean => frames.mean_axis(Axis(0)).expect("nonempty").to_vec(),
        PoolingKind::Max => frames
            .columns()
            .into_iter()
            .map(|c| c.fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
            .collect(),
        PoolingKind::MeanStd => {
            let mean = frames.mean_axis(Axis(0)).expect("nonempty");
            let std = frames.std_axis(Axis(0), 0.0);
            mean.iter().chain(std.iter()).copied().collect()
        }
        PoolingKind::Quantile => {
            let mut per_q = vec![Vec::new(); 3];
            for col in frames.columns() {
                let mut sorted = col.to_vec();
                sorted.sort_by(f64::total_cmp);
                for (acc, q) in per_q.iter_mut().zip(PoolingKind::QUARTILES) {
                    acc.push(quantile_sorted(&sorted, q));
                }
            }
            per_q.concat()
        }
        PoolingKind::First | PoolingKind::Middle | PoolingKind::Last | PoolingKind::Random { .. } => {
            frames.row(selection_index(kind, n)?).to_vec()
        }
    };
    Ok(out)
}

/// One-hidden-layer perceptron applied to a shifted frame matrix,
/// `MLP(A * frames)`: the shifted `N x F` matrix is flattened row-major into
/// the input, and the output has `F` entries.
///
/// This is the learned stand-in for max pooling; it only makes sense once
/// weights have been fitted or set explicitly.
#[derive(Clone, Debug)]
pub struct ShiftMlp {
    shift: ShiftMatrix,
    dim: usize,
    w1: Mat<f64>,
    b1: Mat<f64>,
    w2: Mat<f64>,
    b2: Mat<f64>,
    ready: bool,
}

impl ShiftMlp {
    /// Randomly initialized, not yet usable.
    pub fn new(shift: ShiftMatrix, dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = shift.len() * dim;
        let mut init = |r: usize, c: usize| {
            let bound = 1.0 / (r as f64).sqrt();
            Mat::from_shape_fn((r, c), |_| rng.random_range(-bound..bound))
        };
        let (w1, w2) = (init(inputs, hidden), init(hidden, dim));
        ShiftMlp {
            shift,
            dim,
            w1,
            b1: Mat::zeros((1, hidden)),
            w2,
            b2: Mat::zeros((1, dim)),
            ready: false,
        }
    }

    /// Explicit weights: `w1` is `(N*F) x H`, `w2` is `H x F`.
    pub fn from_weights(
        shift: ShiftMatrix,
        w1: Mat<f64>,
        b1: Mat<f64>,
        w2: Mat<f64>,
        b2: Mat<f64>,
    ) -> Result<Self> {
        let dim = w2.ncols();
        let h = w1.ncols();
        if w1.nrows() != shift.len() * dim || b1.dim() != (1, h) || w2.nrows() != h || b2.dim() != (1, dim) {
            return Err(Error::shape("shift_mlp", "inconsistent weight shapes"));
        }
        Ok(ShiftMlp {
            shift,
            dim,
            w1,
            b1,
            w2,
            b2,
            ready: true,
        })
    }

    fn inputs(&self, samples: &[Array2<f64>]) -> Result<Mat<f64>> {
        let width = self.shift.len() * self.dim;
        let mut x = Mat::zeros((samples.len(), width));
        for (mut row, s) in x.rows_mut().into_iter().zip(samples) {
            if s.ncols() != self.dim {
                return Err(Error::shape("shift_mlp", "frame dim mismatch"));
            }
            let y = shift(&self.shift, s.view())?;
            row.assign(&ndarray::ArrayView1::from(y.as_slice().expect("owned")));
        }
        Ok(x)
    }

    fn record(&self, tape: &mut Tape<f64>, x: Mat<f64>, params: [crate::diffcore::Var; 4]) -> Result<crate::diffcore::Var> {
        let [w1, b1, w2, b2] = params;
        let x = tape.constant(x)?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, w2)?;
        tape.add(o, b2)
    }

    /// Fit to exact max pooling on `samples` (each `N x F`) by full-batch
    /// Adam on mean squared error. Returns the final training loss.
    pub fn fit_max(&mut self, samples: &[Array2<f64>], steps: usize, lr: f64) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Usage("no samples to fit".into()));
        }
        let x = self.inputs(samples)?;
        let mut target = Mat::zeros((samples.len(), self.dim));
        for (mut row, s) in target.rows_mut().into_iter().zip(samples) {
            row.assign(&ndarray::Array1::from(pool(PoolingKind::Max, s.view())?));
        }
        let neg_target = -target;
        let scale = 1.0 / samples.len() as f64;
        let mut adam = Adam::new(AdamConfig::default());
        let mut loss = f64::NAN;
        for _ in 0..steps {
            let mut tape = Tape::new();
            let w1 = tape.param(self.w1.clone())?;
            let b1 = tape.param(self.b1.clone())?;
            let w2 = tape.param(self.w2.clone())?;
            let b2 = tape.param(self.b2.clone())?;
            let out = self.record(&mut tape, x.clone(), [w1, b1, w2, b2])?;
            let t = tape.constant(neg_target.clone())?;
            let diff = tape.add(out, t)?;
            let sq = tape.mul(diff, diff)?;
            let total = tape.sum(sq)?;
            let l = tape.scale(total, scale)?;
            loss = tape.scalar(l);
            tape.backward(l)?;
            let grads = [w1, b1, w2, b2].map(|v| tape.grad_or_zeros(v));
            let mut params = [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2];
            adam.step(&mut params, &grads, lr);
        }
        self.ready = true;
        Ok(loss)
    }

    /// `MLP(A * frames)` for one `N x F` frame matrix.
    pub fn apply(&self, frames: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if !self.ready {
            return Err(Error::Usage(
                "shift MLP has neither fitted nor explicit weights".into(),
            ));
        }
        let x = self.inputs(&[frames.to_owned()])?;
        let h = (x.dot(&self.w1) + &self.b1).mapv(|v| v.max(0.0));
        Ok((h.dot(&self.w2) + &self.b2).row(0).to_vec())
    }
}
