//! Additive angular margin softmax head.
//!
//! Embeddings and class rows are L2-normalized; the target logit becomes
//! `s * cos(theta_y + m)` and the others `s * cos(theta_j)`. The loss is the
//! batch mean of the cross-entropy over these logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{lit, CustomOp, Mat, Real, Tape, Var};
use crate::error::{Error, Result};

/// Clamp applied to the target cosine before `acos`.
pub const ACOS_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AamConfig {
    /// Additive angular margin in radians.
    pub margin: f64,
    pub scale: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        AamConfig {
            margin: 0.2,
            scale: 30.0,
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Usage(format!("margin {} outside [0, pi/2)", self.margin)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Usage(format!("scale {} must be positive", self.scale)));
        }
        Ok(())
    }
}

/// Learnable class centers, `C x F'`.
#[derive(Clone, Debug, PartialEq)]
pub struct AamHead<T: Real> {
    pub class_weights: Mat<T>,
    pub config: AamConfig,
}

impl<T: Real> AamHead<T> {
    pub fn init<R: Rng>(classes: usize, dim: usize, config: AamConfig, rng: &mut R) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Data(format!("{classes} classes; need at least 2")));
        }
        config.validate()?;
        let bound = (6.0 / (classes + dim) as f64).sqrt();
        Ok(AamHead {
            class_weights: Mat::from_shape_fn((classes, dim), |_| lit(rng.random_range(-bound..bound))),
            config,
        })
    }

    pub fn classes(&self) -> usize {
        self.class_weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.class_weights.len()
    }

    /// Loss of a single embedding, without gradients.
    pub fn loss(&self, embedding: &[T], label: usize) -> Result<T> {
        let mut tape = Tape::new();
        let e = tape.constant(Mat::from_shape_vec((1, embedding.len()), embedding.to_vec()).map_err(
            |e| Error::shape("aam_loss", e.to_string()),
        )?)?;
        let w = tape.constant(self.class_weights.clone())?;
        let l = aam_loss(&mut tape, e, w, &[label], self.config)?;
        Ok(tape.scalar(l))
    }
}

/// Parameter count of a head with `classes` rows of width `dim`.
pub fn head_param_count(classes: usize, dim: usize) -> usize {
    classes * dim
}

struct AamOp<T: Real> {
    labels: Vec<usize>,
    scale: T,
    unit_e: Mat<T>,
    norm_e: Vec<T>,
    unit_w: Mat<T>,
    norm_w: Vec<T>,
    probs: Mat<T>,
    /// `d z_y / d c_y / s` per row; zero where the clamp is active.
    target_slope: Vec<T>,
}

fn normalize_rows<T: Real>(m: &Mat<T>, what: &'static str) -> Result<(Mat<T>, Vec<T>)> {
    let mut unit = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in unit.rows_mut() {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !n.is_finite() || n <= T::zero() {
            return Err(Error::Numeric { op: what });
        }
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    Ok((unit, norms))
}

/// `(d - u (u . d)) / |x|` for each row.
fn normalization_vjp<T: Real>(unit: &Mat<T>, norms: &[T], d: &Mat<T>) -> Mat<T> {
    let mut out = d.clone();
    for ((mut o, u), &n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        let dot = o.dot(&u);
        o.zip_mut_with(&u, |g, &uv| *g = (*g - uv * dot) / n);
    }
    out
}

impl<T: Real> CustomOp<T> for AamOp<T> {
    fn name(&self) -> &'static str {
        "aam_loss"
    }

    fn backward(&self, _inputs: &[&Mat<T>], _output: &Mat<T>, grad: &Mat<T>) -> Vec<Option<Mat<T>>> {
        let b = T::cast(self.labels.len() as f64);
        let g = grad[[0, 0]] / b;
        // dL/dc: s * (p - onehot), with the target column scaled by the
        // margin slope.
        let mut dc = self.probs.clone();
        for (i, &y) in self.labels.iter().enumerate() {
            dc[[i, y]] -= T::one();
            for j in 0..dc.ncols() {
                let slope = if j == y { self.target_slope[i] } else { T::one() };
                dc[[i, j]] *= self.scale * slope * g;
            }
        }
        let du = dc.dot(&self.unit_w);
        let dv = dc.t().dot(&self.unit_e);
        vec![
            Some(normalization_vjp(&self.unit_e, &self.norm_e, &du)),
            Some(normalization_vjp(&self.unit_w, &self.norm_w, &dv)),
        ]
    }
}

/// Mean AAM cross-entropy of `embeddings` (`B x F'`) against class rows
/// `weights` (`C x F'`).
pub fn aam_loss<T: Real>(
    tape: &mut Tape<T>,
    embeddings: Var,
    weights: Var,
    labels: &[usize],
    config: AamConfig,
) -> Result<Var> {
    config.validate()?;
    let e = tape.value(embeddings);
    let w = tape.value(weights);
    if e.ncols() != w.ncols() {
        return Err(Error::shape(
            "aam_loss",
            format!("embedding dim {} vs class dim {}", e.ncols(), w.ncols()),
        ));
    }
    if e.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "aam_loss",
            format!("{} embeddings for {} labels", e.nrows(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= w.nrows()) {
        return Err(Error::Usage(format!("label {bad} outside {} classes", w.nrows())));
    }
    let (unit_e, norm_e) = normalize_rows(e, "aam_loss")?;
    let (unit_w, norm_w) = normalize_rows(w, "aam_loss")?;
    let cos = unit_e.dot(&unit_w.t());

    let s: T = lit(config.scale);
    let m: T = lit(config.margin);
    let lo: T = lit(-1.0 + ACOS_CLAMP);
    let hi: T = lit(1.0 - ACOS_CLAMP);
    let mut logits = cos.mapv(|c| s * c);
    let mut target_slope = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let c = cos[[i, y]];
        let clamped = c.max(lo).min(hi);
        let theta = clamped.acos();
        logits[[i, y]] = s * (theta + m).cos();
        target_slope.push(if c > lo && c < hi {
            (theta + m).sin() / (T::one() - c * c).sqrt()
        } else {
            T::zero()
        });
    }

    let mut total = T::zero();
    let mut probs = Mat::zeros(logits.dim());
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let zy = row[y];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let shifted: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let denom: T = shifted.iter().copied().sum();
        for (j, &v) in shifted.iter().enumerate() {
            probs[[i, j]] = v / denom;
        }
        total += if zy >= max {
            // Target dominates: keep the tiny remainder instead of
            // rounding it away.
            let rest: T = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &z)| (z - zy).exp())
                .sum();
            rest.ln_1p()
        } else {
            max + denom.ln() - zy
        };
    }
    let value = Mat::from_elem((1, 1), total / T::cast(labels.len() as f64));
    let op = AamOp {
        labels: labels.to_vec(),
        scale: s,
        unit_e,
        norm_e,
        unit_w,
        norm_w,
        probs,
        target_slope,
    };
    tape.custom(&[embeddings, weights], value, Box::new(op))
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::grad_check;

    fn loss(e: Mat<f64>, w: Mat<f64>, labels: &[usize], margin: f64, scale: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let ev = tape.param(e)?;
        let wv = tape.param(w)?;
        let l = aam_loss(&mut tape, ev, wv, labels, AamConfig { margin, scale })?;
        Ok(tape.scalar(l))
    }

    fn softmax_ce(z: &[f64], y: usize) -> f64 {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        lse - z[y]
    }

    #[test]
    fn zero_margin_unit_scale_is_cosine_softmax() {
        let e: Mat<f64> = array![[0.3, -1.2, 0.5]];
        let w: Mat<f64> = array![[1.0, 0.0, 0.0], [0.2, 0.9, -0.1], [-0.5, 0.5, 2.0]];
        let en = (0.09f64 + 1.44 + 0.25_f64).sqrt();
        let cos: Vec<f64> = w
            .rows()
            .into_iter()
            .map(|r| r.dot(&e.row(0)) / (en * r.dot(&r).sqrt()))
            .collect();
        for y in 0..3 {
            let got = loss(e.clone(), w.clone(), &[y], 0.0, 1.0).unwrap();
            assert!((got - softmax_ce(&cos, y)).abs() < 1e-14);
        }
    }

    #[test]
    fn aligned_two_class_closed_form() {
        let got = loss(array![[2.0, 0.0]], array![[1.0, 0.0], [0.0, 1.0]], &[0], 0.2, 30.0).unwrap();
        let expect = (-30.0f64 * 0.2f64.cos()).exp().ln_1p();
        assert!(got > 0.0);
        // The acos clamp shifts the target angle by about 4.5e-4 rad.
        assert!((got / expect - 1.0).abs() < 1e-2, "{got:e} vs {expect:e}");
        assert!((got - 1.7e-13).abs() < 0.1e-13);
    }

    #[test]
    fn equidistant_margin_exceeds_ln2() {
        let e = array![[1.0, 1.0]];
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let base = loss(e.clone(), w.clone(), &[0], 0.0, 30.0).unwrap();
        assert!((base - 2f64.ln()).abs() < 1e-12);
        assert!(loss(e, w, &[0], 0.2, 30.0).unwrap() > 2f64.ln());
    }

    #[test]
    fn errors() {
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(
            loss(array![[0.0, 0.0]], w.clone(), &[0], 0.2, 30.0),
            Err(Error::Numeric { op: "aam_loss" })
        ));
        assert!(matches!(
            loss(array![[1.0, 0.0]], w.clone(), &[2], 0.2, 30.0),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            loss(array![[1.0, 0.0]], w.clone(), &[0], 2.0, 30.0),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            loss(array![[1.0, 0.0, 0.0]], w, &[0], 0.2, 30.0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn head_counts() {
        assert_eq!(head_param_count(5994, 768), 4_603_392);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = AamHead::<f32>::init(5994, 768, AamConfig::default(), &mut rng).unwrap();
        assert_eq!(h.param_count(), 4_603_392);
        assert!(AamHead::<f64>::init(1, 4, AamConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = Mat::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let w = Mat::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let report = grad_check(
            |tape, p| aam_loss(tape, p[0], p[1], &[0, 3, 3], AamConfig { margin: 0.3, scale: 4.0 }),
            &[e, w],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn gradient_in_clamp_region() {
        // The embedding sits exactly on its class row, so the clamp is active.
        let e = array![[0.6, 0.8, 0.0]];
        let w = array![[0.6, 0.8, 0.0], [0.1, -0.4, 0.9]];
        let report = grad_check(
            |tape, p| aam_loss(tape, p[0], p[1], &[0], AamConfig { margin: 0.2, scale: 2.0 }),
            &[e, w],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn single_embedding_helper() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = AamHead::<f64>::init(3, 2, AamConfig::default(), &mut rng).unwrap();
        let a = h.loss(&[0.5, -0.1], 1).unwrap();
        let b = loss(array![[0.5, -0.1]], h.class_weights.clone(), &[1], 0.2, 30.0).unwrap();
        assert_eq!(a, b);
    }

    fn case() -> impl Strategy<Value = (Mat<f64>, Mat<f64>, usize)> {
        (2usize..6, 2usize..5).prop_flat_map(|(c, f)| {
            (
                proptest::collection::vec(-1.0f64..1.0, f),
                proptest::collection::vec(-1.0f64..1.0, c * f),
                0..c,
            )
                .prop_map(move |(e, w, y)| {
                    (
                        Mat::from_shape_vec((1, f), e).unwrap(),
                        Mat::from_shape_vec((c, f), w).unwrap(),
                        y,
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn scale_invariant((e, w, y) in case(), k in 0.01f64..100.0) {
            prop_assume!(e.iter().any(|v| v.abs() > 1e-3));
            prop_assume!(w.rows().into_iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
            let a = loss(e.clone(), w.clone(), &[y], 0.2, 30.0).unwrap();
            let b = loss(&e * k, w, &[y], 0.2, 30.0).unwrap();
            prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        }

        #[test]
        fn nondecreasing_in_margin((e, w, y) in case(), m1 in 0.0f64..1.5, dm in 0.0f64..0.07) {
            prop_assume!(e.iter().any(|v| v.abs() > 1e-3));
            prop_assume!(w.rows().into_iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
            let en = e.row(0).dot(&e.row(0)).sqrt();
            let wy = w.row(y);
            let c = e.row(0).dot(&wy) / (en * wy.dot(&wy).sqrt());
            // cos(theta + m) is decreasing only while theta + m stays below pi.
            prop_assume!(c.clamp(-1.0, 1.0).acos() + m1 + dm <= std::f64::consts::PI);
            let a = loss(e.clone(), w.clone(), &[y], m1, 30.0).unwrap();
            let b = loss(e, w, &[y], m1 + dm, 30.0).unwrap();
            prop_assert!(b >= a - 1e-12 * a.abs().max(1.0));
        }
    }
}
