use ndarray::{Array2, Axis};

use super::real::{lit, Real};
use crate::error::{Error, Result};

pub type Mat<T> = Array2<T>;

/// Denominator floor for row norms in cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;
/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation with a hand-written vector-Jacobian product, for fused
/// computations that sit outside the built-in primitive set.
pub trait CustomOp<T: Real>: Send {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input, in input order. `None` means
    /// no contribution.
    fn backward(&self, inputs: &[&Mat<T>], output: &Mat<T>, grad: &Mat<T>) -> Vec<Option<Mat<T>>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    RowSoftmax(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Mat<T>,
        inv_std: Vec<T>,
    },
    CosineSimilarity {
        x: Var,
        unit: Mat<T>,
        norms: Vec<T>,
    },
    MeanRows(Var),
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatRows(Var, Var),
    SumAll(Var),
    Reciprocal(Var),
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::RowSoftmax(_) => "row_softmax",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CosineSimilarity { .. } => "cosine_similarity_matrix",
            Op::MeanRows(_) => "mean_over_rows",
            Op::MaxRows { .. } => "max_over_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SumAll(_) => "sum",
            Op::Reciprocal(_) => "reciprocal",
            Op::Reshape(_) => "reshape",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Real> {
    value: Mat<T>,
    grad: Option<Mat<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Record of executed primitives in execution (hence topological) order.
///
/// A tape is owned by one worker. Values are created as leaves
/// ([`Tape::param`], [`Tape::constant`]) and combined through the primitive
/// methods; [`Tape::backward`] then accumulates gradients into every node
/// that depends on a parameter.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, m: &Mat<T>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { op })
    }
}

fn shape_str<T>(m: &Mat<T>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes so the tape can be reused for a new forward.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Mat<T>, requires_grad: bool, op: Op<T>) -> Result<Var> {
        check_finite(op.name(), &value)?;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar held by a 1x1 value.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Accumulated gradient, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&Mat<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn grad_or_zeros(&self, v: Var) -> Mat<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(self.shape(v)))
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Mat<T>) -> Result<Var> {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Mat<T>) -> Result<Var> {
        self.push(value, false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::shape(
                "matmul",
                format!("{} times {}", shape_str(va), shape_str(vb)),
            ));
        }
        let out = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).t().as_standard_layout().into_owned();
        let rg = self.rg(a);
        self.push(out, rg, Op::Transpose(a))
    }

    /// Sum of `a` and `b`, where `b` may be a 1xC row vector, an Rx1 column
    /// vector or a 1x1 scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (r, c) = va.dim();
        let out = match vb.dim() {
            d if d == (r, c) => va + vb,
            (1, bc) if bc == c => va + vb,
            (br, 1) if br == r => va + vb,
            (1, 1) => va + vb[[0, 0]],
            _ => {
                return Err(Error::shape(
                    "add",
                    format!("{} plus {}", shape_str(va), shape_str(vb)),
                ))
            }
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::Add(a, b))
    }

    /// Elementwise product of equally shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::shape(
                "mul",
                format!("{} times {}", shape_str(va), shape_str(vb)),
            ));
        }
        let out = va * vb;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::Mul(a, b))
    }

    /// Multiply by a fixed constant.
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a) * c;
        let rg = self.rg(a);
        self.push(out, rg, Op::Scale(a, c))
    }

    /// Multiply by a 1x1 value that may itself carry gradients.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::shape(
                "scale_by",
                format!("scalar operand is {}", shape_str(self.value(s))),
            ));
        }
        let out = self.value(a) * self.scalar(s);
        let rg = self.rg(a) || self.rg(s);
        self.push(out, rg, Op::ScaleBy(a, s))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let mx = row.fold(T::neg_infinity(), |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - mx).exp());
            let s: T = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let rg = self.rg(a);
        self.push(out, rg, Op::RowSoftmax(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(out, rg, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(a);
        self.push(out, rg, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(|x| gelu_parts(x).0);
        let rg = self.rg(a);
        self.push(out, rg, Op::Gelu(a))
    }

    /// Normalizes each row over its columns, then applies `gain` and `bias`
    /// (both 1xC).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.ncols();
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {} with gain {} and bias {}",
                    shape_str(vx),
                    shape_str(self.value(gain)),
                    shape_str(self.value(bias))
                ),
            ));
        }
        let n = lit::<T>(c as f64);
        let eps = lit::<T>(LAYER_NORM_EPS);
        let mut normed = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let out = &normed * self.value(gain) + self.value(bias);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        )
    }

    /// Pairwise cosine similarity between rows: an RxR symmetric matrix.
    pub fn cosine_similarity_matrix(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let eps = lit::<T>(COSINE_EPS);
        let mut unit = vx.clone();
        let mut norms = Vec::with_capacity(vx.nrows());
        for mut row in unit.rows_mut() {
            let nrm = row.dot(&row).sqrt().max(eps);
            row.mapv_inplace(|v| v / nrm);
            norms.push(nrm);
        }
        let r = unit.nrows();
        let mut out = Mat::zeros((r, r));
        for i in 0..r {
            let ui = unit.row(i);
            for j in i..r {
                let s = ui.dot(&unit.row(j));
                out[[i, j]] = s;
                out[[j, i]] = s;
            }
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::CosineSimilarity { x, unit, norms })
    }

    /// Column-wise mean over rows: 1xC.
    pub fn mean_over_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.nrows() == 0 {
            return Err(Error::shape("mean_over_rows", "no rows"));
        }
        let out = va
            .mean_axis(Axis(0))
            .expect("nonempty")
            .insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(out, rg, Op::MeanRows(a))
    }

    /// Column-wise max over rows: 1xC. Gradient flows to the first row
    /// holding the max.
    pub fn max_over_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.nrows() == 0 {
            return Err(Error::shape("max_over_rows", "no rows"));
        }
        let mut argmax = Vec::with_capacity(va.ncols());
        let mut out = Mat::zeros((1, va.ncols()));
        for (j, col) in va.columns().into_iter().enumerate() {
            let mut best = 0;
            for (i, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = i;
                }
            }
            argmax.push(best);
            out[[0, j]] = col[best];
        }
        let rg = self.rg(a);
        self.push(out, rg, Op::MaxRows { x: a, argmax })
    }

    /// Stack `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(Error::shape(
                "concat_rows",
                format!("{} over {}", shape_str(va), shape_str(vb)),
            ));
        }
        let out = ndarray::concatenate(Axis(0), &[va.view(), vb.view()]).expect("checked");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::ConcatRows(a, b))
    }

    /// Sum of all entries: 1x1.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Mat::from_elem((1, 1), s), rg, Op::SumAll(a))
    }

    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(|v| T::one() / v);
        let rg = self.rg(a);
        self.push(out, rg, Op::Reciprocal(a))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let va = self.value(a);
        if va.len() != rows * cols {
            return Err(Error::shape(
                "reshape",
                format!("{} into {}x{}", shape_str(va), rows, cols),
            ));
        }
        let flat: Vec<T> = va.iter().copied().collect();
        let out = Mat::from_shape_vec((rows, cols), flat).expect("checked");
        let rg = self.rg(a);
        self.push(out, rg, Op::Reshape(a))
    }

    /// Record a value computed outside the primitive set, with its own
    /// backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Mat<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    fn accumulate(&mut self, v: Var, g: Mat<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from `root`, seeded with ones. Runs at most once per
    /// forward; call [`Tape::reset`] before recording the next one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; reset before reuse".into(),
            ));
        }
        self.backward_done = true;
        let seed = Mat::from_elem(self.shape(root), T::one());
        self.accumulate(root, seed);

        for idx in (0..=root.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &op, &g);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, op: &Op<T>, g: &Mat<T>) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(a) {
                    let ga = g.dot(&self.value(b).t());
                    self.accumulate(a, ga);
                }
                if self.rg(b) {
                    let gb = self.value(a).t().dot(g);
                    self.accumulate(b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(a, g.t().as_standard_layout().into_owned()),
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                if self.rg(b) {
                    let gb = reduce_to(g, self.shape(b));
                    self.accumulate(b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let ga = g * self.value(b);
                    self.accumulate(a, ga);
                }
                if self.rg(b) {
                    let gb = g * self.value(a);
                    self.accumulate(b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(a, g * c),
            Op::ScaleBy(a, s) => {
                if self.rg(a) {
                    let ga = g * self.scalar(s);
                    self.accumulate(a, ga);
                }
                if self.rg(s) {
                    let gs = (g * self.value(a)).sum();
                    self.accumulate(s, Mat::from_elem((1, 1), gs));
                }
            }
            Op::RowSoftmax(a) => {
                let y = &self.nodes[idx].value;
                let mut ga = g * y;
                for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let s = row.sum();
                    row.zip_mut_with(&yrow, |v, &yv| *v -= yv * s);
                }
                self.accumulate(a, ga);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let ga = g * &y.mapv(|v| v * (T::one() - v));
                self.accumulate(a, ga);
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                ga.zip_mut_with(self.value(a), |v, &x| {
                    if x <= T::zero() {
                        *v = T::zero()
                    }
                });
                self.accumulate(a, ga);
            }
            Op::Gelu(a) => {
                let mut ga = g.clone();
                ga.zip_mut_with(self.value(a), |v, &x| *v *= gelu_parts(x).1);
                self.accumulate(a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                ref normed,
                ref inv_std,
            } => {
                if self.rg(gain) {
                    let gg = (g * normed).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(gain, gg);
                }
                if self.rg(bias) {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(bias, gb);
                }
                if self.rg(x) {
                    let n = lit::<T>(normed.ncols() as f64);
                    let mut dn = g * self.value(gain);
                    for ((mut row, nrow), &inv) in
                        dn.rows_mut().into_iter().zip(normed.rows()).zip(inv_std)
                    {
                        let s1 = row.sum();
                        let s2 = row.dot(&nrow);
                        row.zip_mut_with(&nrow, |d, &nv| {
                            *d = inv / n * (n * *d - s1 - nv * s2);
                        });
                    }
                    self.accumulate(x, dn);
                }
            }
            Op::CosineSimilarity {
                x,
                ref unit,
                ref norms,
            } => {
                let sym = g + &g.t();
                let mut du = sym.dot(unit);
                let eps = lit::<T>(COSINE_EPS);
                for ((mut row, urow), &nrm) in du.rows_mut().into_iter().zip(unit.rows()).zip(norms)
                {
                    // A clamped norm means the row was (near) zero; the
                    // normalization is then a plain division by the floor.
                    if nrm > eps {
                        let proj = row.dot(&urow);
                        row.zip_mut_with(&urow, |d, &u| *d = (*d - u * proj) / nrm);
                    } else {
                        row.mapv_inplace(|d| d / nrm);
                    }
                }
                self.accumulate(x, du);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(a);
                let scale = T::one() / lit::<T>(r as f64);
                let ga = g.broadcast((r, c)).expect("1xC").mapv(|v| v * scale);
                self.accumulate(a, ga);
            }
            Op::MaxRows { x, ref argmax } => {
                let mut ga = Mat::zeros(self.shape(x));
                for (j, &i) in argmax.iter().enumerate() {
                    ga[[i, j]] = g[[0, j]];
                }
                self.accumulate(x, ga);
            }
            Op::ConcatRows(a, b) => {
                let ra = self.shape(a).0;
                let ga = g.slice(ndarray::s![..ra, ..]).to_owned();
                let gb = g.slice(ndarray::s![ra.., ..]).to_owned();
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::SumAll(a) => {
                let ga = Mat::from_elem(self.shape(a), g[[0, 0]]);
                self.accumulate(a, ga);
            }
            Op::Reciprocal(a) => {
                let mut ga = g.clone();
                ga.zip_mut_with(self.value(a), |v, &x| *v = -*v / (x * x));
                self.accumulate(a, ga);
            }
            Op::Reshape(a) => {
                let flat: Vec<T> = g.iter().copied().collect();
                let ga = Mat::from_shape_vec(self.shape(a), flat).expect("same size");
                self.accumulate(a, ga);
            }
            Op::Custom {
                ref inputs,
                ref op,
            } => {
                let grads = {
                    let ins: Vec<&Mat<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                    op.backward(&ins, &self.nodes[idx].value, g)
                };
                for (&v, gv) in inputs.iter().zip(grads) {
                    if let Some(gv) = gv {
                        self.accumulate(v, gv);
                    }
                }
            }
        }
    }
}

/// Sum a gradient down to the shape of a broadcast operand.
fn reduce_to<T: Real>(g: &Mat<T>, shape: (usize, usize)) -> Mat<T> {
    if g.dim() == shape {
        return g.clone();
    }
    match shape {
        (1, 1) => Mat::from_elem((1, 1), g.sum()),
        (1, _) => g.sum_axis(Axis(0)).insert_axis(Axis(0)),
        _ => g.sum_axis(Axis(1)).insert_axis(Axis(1)),
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let k = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
    let c = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let three = lit::<T>(3.0);
    let u = k * (x + c * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + three * c * x * x);
    (y, dy)
}
