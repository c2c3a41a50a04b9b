//! Central finite-difference check of tape gradients.

use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error per parameter, in parameter order.
    pub per_param: Vec<f64>,
    /// Largest relative error over all entries.
    pub max_rel_error: f64,
    /// Position of the worst entry as (parameter, flat index).
    pub worst: (usize, usize),
    pub tol: f64,
    pub passed: bool,
}

/// Relative error between analytic and numeric derivatives, with a unit
/// floor on the denominator so near-zero derivatives are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn eval<F>(f: &F, params: &[Mat<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if tape.shape(out) != (1, 1) {
        return Err(Error::shape("grad_check", "function must return a 1x1 value"));
    }
    Ok(tape.scalar(out))
}

/// Compare the reverse-mode gradient of the scalar function `f` against
/// central differences at every entry of every parameter.
///
/// `f` records its computation on the supplied tape, reading parameters from
/// the given leaves, and returns a 1x1 value.
pub fn grad_check<F>(f: F, params: &[Mat<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Usage(format!("eps {eps:e} outside [1e-7, 1e-3]")));
    }
    if params.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Usage("parameters must be finite".into()));
    }

    let first = eval(&f, params)?;
    let second = eval(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism(format!("{first:e} vs {second:e}")));
    }

    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Mat<f64>> = vars
        .iter()
        .map(|&v| tape.grad_or_zeros(v).as_standard_layout().into_owned())
        .collect();

    let mut work: Vec<Mat<f64>> = params
        .iter()
        .map(|p| p.as_standard_layout().into_owned())
        .collect();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for p in 0..params.len() {
        let mut local = 0.0f64;
        for k in 0..params[p].len() {
            let orig = work[p].as_slice().expect("standard layout")[k];
            work[p].as_slice_mut().expect("standard layout")[k] = orig + eps;
            let plus = eval(&f, &work)?;
            work[p].as_slice_mut().expect("standard layout")[k] = orig - eps;
            let minus = eval(&f, &work)?;
            work[p].as_slice_mut().expect("standard layout")[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p].as_slice().expect("standard layout")[k];
            let err = relative_error(a, numeric);
            if err > local {
                local = err;
            }
            if err > max_rel_error {
                max_rel_error = err;
                worst = (p, k);
            }
        }
        per_param.push(local);
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        worst,
        tol,
        passed: max_rel_error <= tol,
    })
}
