//! Cosine attention adjacency over frame vertices.
//!
//! Each vertex is projected by a learnable matrix, then
//! `a(i, j) = softmax_j(beta * cos(b_i, b_j))`, with the self-loop kept.
//! Rows sum to one; the matrix is generally not symmetric.

use rand::Rng;

use crate::diffcore::{lit, Mat, Real, Tape, Var};
use crate::error::{Error, Result};

/// Projection `W` (`F' x F`) and temperature `beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T: Real> {
    pub projection: Mat<T>,
    pub beta: T,
}

impl<T: Real> AttentionParams<T> {
    /// Uniform `+-1/sqrt(F)` projection and `beta = 1`.
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        AttentionParams {
            projection: Mat::from_shape_fn((out_dim, in_dim), |_| {
                lit(rng.random_range(-bound..bound))
            }),
            beta: T::one(),
        }
    }

    /// `W = I`, with the given temperature.
    pub fn identity(dim: usize, beta: T) -> Self {
        AttentionParams {
            projection: Mat::eye(dim),
            beta,
        }
    }

    pub fn param_count(&self) -> usize {
        self.projection.len() + 1
    }
}

/// Row-stochastic `N x N` attention matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency<T: Real>(Mat<T>);

impl<T: Real> Adjacency<T> {
    pub fn matrix(&self) -> &Mat<T> {
        &self.0
    }

    pub fn into_matrix(self) -> Mat<T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest deviation of a row sum from one.
    pub fn row_sum_error(&self) -> T {
        self.0
            .rows()
            .into_iter()
            .map(|r| (r.sum() - T::one()).abs())
            .fold(T::zero(), T::max)
    }
}

/// `B = X W^T`: row `i` of the result is `W x_i`.
pub fn project<T: Real>(tape: &mut Tape<T>, frames: Var, projection: Var) -> Result<Var> {
    let (_, f) = tape.shape(frames);
    let (_, pf) = tape.shape(projection);
    if f != pf {
        return Err(Error::shape(
            "project",
            format!("frames have dim {f}, projection expects {pf}"),
        ));
    }
    let wt = tape.transpose(projection)?;
    tape.matmul(frames, wt)
}

/// Attention adjacency from projected vertices `B` (`N x F'`) and a 1x1
/// temperature.
pub fn build_adjacency<T: Real>(tape: &mut Tape<T>, projected: Var, beta: Var) -> Result<Var> {
    if tape.shape(projected).0 == 0 {
        return Err(Error::shape("build_adjacency", "graph has no vertices"));
    }
    let cos = tape.cosine_similarity_matrix(projected)?;
    let logits = tape.scale_by(cos, beta)?;
    tape.row_softmax(logits)
}

/// Gradient-free evaluation of [`project`] and [`build_adjacency`].
pub fn adjacency_of<T: Real>(frames: &Mat<T>, params: &AttentionParams<T>) -> Result<(Mat<T>, Adjacency<T>)> {
    let mut tape = Tape::new();
    let x = tape.constant(frames.clone())?;
    let w = tape.constant(params.projection.clone())?;
    let beta = tape.constant(Mat::from_elem((1, 1), params.beta))?;
    let b = project(&mut tape, x, w)?;
    let a = build_adjacency(&mut tape, b, beta)?;
    Ok((tape.value(b).clone(), Adjacency(tape.value(a).clone())))
}
