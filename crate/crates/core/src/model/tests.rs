use ndarray::{array, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::grad_check;

fn small(thin: bool, weighting: bool) -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        projected_dim: None,
        rounds: 2,
        mlp_hidden: 6,
        activation: Activation::Relu,
        use_layer_weighting: weighting,
        thin,
        layers: 3,
    }
}

fn random_stack(layers: usize, frames: usize, dim: usize, seed: u64) -> FeatureStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..layers * frames * dim)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    FeatureStack::new(layers, frames, dim, values).unwrap()
}

fn weighted(stack: &FeatureStack, w: Mat<f64>) -> Result<Mat<f64>> {
    let mut tape = Tape::new();
    let w = tape.param(w)?;
    let x = weight_layers(&mut tape, stack, w)?;
    Ok(tape.value(x).clone())
}

#[test]
fn default_parameter_counts() {
    let full = ModelConfig::default();
    let thin = ModelConfig {
        thin: true,
        ..ModelConfig::default()
    };
    assert_eq!(full.param_count(), 6_891_534);
    assert_eq!(thin.param_count(), 5_316_878);
    assert_eq!(full.param_count() - thin.param_count(), 1_574_656);
    let params = ModelParams::<f32>::init(&full, 0).unwrap();
    assert_eq!(params.param_count(), full.param_count());
}

#[test]
fn small_counts_match_tensors() {
    for thin in [false, true] {
        for weighting in [false, true] {
            let c = small(thin, weighting);
            let p = ModelParams::<f64>::init(&c, 1).unwrap();
            assert_eq!(p.param_count(), c.param_count());
        }
    }
}

#[test]
fn rejects_zero_rounds() {
    let c = ModelConfig {
        rounds: 0,
        ..small(false, true)
    };
    assert!(matches!(ModelParams::<f64>::init(&c, 0), Err(Error::Usage(_))));
}

#[test]
fn layer_weighting_examples() {
    let s = random_stack(3, 5, 4, 2);
    let ones = weighted(&s, Mat::ones((1, 3))).unwrap();
    let avg = (s.layer_as::<f64>(0) + s.layer_as::<f64>(1) + s.layer_as::<f64>(2)) / 3.0;
    assert!(ones.iter().zip(avg.iter()).all(|(a, b)| (a - b).abs() < 1e-12));

    let first = weighted(&s, array![[1.0, 0.0, 0.0]]).unwrap();
    assert_eq!(first, s.layer_as::<f64>(0));

    let twos = weighted(&s, Mat::from_elem((1, 3), 2.0)).unwrap();
    assert!(twos.iter().zip(ones.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn degenerate_layer_weights() {
    let s = random_stack(3, 2, 2, 3);
    assert!(matches!(
        weighted(&s, array![[1.0, -1.0, 0.0]]),
        Err(Error::DegenerateWeights(_))
    ));
    assert!(matches!(
        weighted(&s, array![[1.0, 1.0]]),
        Err(Error::Shape { op: "weight_layers", .. })
    ));
}

#[test]
fn message_examples() {
    let mut tape = Tape::<f64>::new();
    let h = tape.constant(array![[2.0], [4.0]]).unwrap();
    let a = tape.constant(array![[1.0, 0.0], [0.5, 0.5]]).unwrap();
    let m = message(&mut tape, a, h).unwrap();
    assert_eq!(tape.value(m), &array![[2.0], [3.0]]);

    let eye = tape.constant(Mat::eye(2)).unwrap();
    let m = message(&mut tape, eye, h).unwrap();
    assert_eq!(tape.value(m), &array![[2.0], [4.0]]);

    let bad = tape.constant(Mat::eye(3)).unwrap();
    assert!(matches!(message(&mut tape, bad, h), Err(Error::Shape { .. })));
}

/// With `W = I` and `beta = 0` the message step is exactly mean pooling.
#[test]
fn message_reduces_to_mean_pooling() {
    let x = random_stack(1, 7, 3, 4).layer_as::<f64>(0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let w = tape.constant(Mat::eye(3)).unwrap();
    let beta = tape.constant(Mat::zeros((1, 1))).unwrap();
    let b = attention::project(&mut tape, xv, w).unwrap();
    let a = attention::build_adjacency(&mut tape, b, beta).unwrap();
    let m = message(&mut tape, a, b).unwrap();
    let mean = x.mean_axis(Axis(0)).unwrap();
    for row in tape.value(m).rows() {
        for (u, v) in row.iter().zip(mean.iter()) {
            assert!((u - v).abs() < 1e-15);
        }
    }
}

fn zero_bias(params: &mut ModelParams<f64>) {
    for u in &mut params.updates {
        u.mlp.b1.fill(0.0);
        u.mlp.b2.fill(0.0);
    }
}

#[test]
fn update_examples() {
    let c = small(false, false);
    let mut params = ModelParams::<f64>::init(&c, 5).unwrap();
    zero_bias(&mut params);
    let mut tape = Tape::new();
    let vars = ParamVars::record(&mut tape, &params, false).unwrap();

    let zero = tape.constant(Mat::zeros((3, 4))).unwrap();
    let h = update(&mut tape, &vars, zero, 1, Activation::Relu).unwrap();
    assert!(tape.value(h).iter().all(|&v| v == 0.0));

    let m = tape
        .constant(array![[0.3, -1.0, 2.0, 0.5], [0.3, -1.0, 2.0, 0.5], [1.0, 0.0, 0.0, 0.0]])
        .unwrap();
    let h = update(&mut tape, &vars, m, 2, Activation::Relu).unwrap();
    let v = tape.value(h);
    assert_eq!(v.row(0), v.row(1));

    for bad in [0, 3] {
        assert!(matches!(
            update(&mut tape, &vars, m, bad, Activation::Relu),
            Err(Error::Usage(_))
        ));
    }
}

#[test]
fn update_gradient_matches_differences() {
    let c = small(false, false);
    let params = ModelParams::<f64>::init(&c, 6).unwrap();
    let m = random_stack(1, 4, 4, 7).layer_as::<f64>(0);
    let u = &params.updates[0];
    let inputs = [
        u.mlp.w1.clone(),
        u.mlp.b1.clone() + 0.1,
        u.mlp.w2.clone(),
        u.mlp.b2.clone(),
        u.norm_gain.clone(),
        u.norm_bias.clone(),
    ];
    let report = grad_check(
        |tape, leaves| {
            let vars = ParamVars {
                projection: leaves[0],
                beta: leaves[0],
                updates: vec![UpdateVars {
                    mlp: MlpVars {
                        w1: leaves[0],
                        b1: leaves[1],
                        w2: leaves[2],
                        b2: leaves[3],
                    },
                    gain: leaves[4],
                    bias: leaves[5],
                }],
                theta: MlpVars {
                    w1: leaves[0],
                    b1: leaves[1],
                    w2: leaves[2],
                    b2: leaves[3],
                },
                phi: None,
                layer_weights: None,
            };
            let mv = tape.constant(m.clone())?;
            let h = update(tape, &vars, mv, 1, Activation::Gelu)?;
            tape.sum(h)
        },
        &inputs,
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn readout_single_vertex() {
    let c = small(false, false);
    let params = ModelParams::<f64>::init(&c, 8).unwrap();
    let s = random_stack(1, 1, 4, 9);
    let mut tape = Tape::new();
    let vars = ParamVars::record(&mut tape, &params, false).unwrap();
    let out = forward(&mut tape, &vars, &c, &s).unwrap();
    let mut expect = tape.value(out.gated).clone();
    for &h in &out.history {
        expect += tape.value(h);
    }
    let e = tape.value(out.embedding);
    assert!(e.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    assert_eq!(tape.value(out.adjacency), &array![[1.0]]);
}

#[test]
fn readout_zero_gate_halves_theta() {
    let c = small(false, false);
    let mut params = ModelParams::<f64>::init(&c, 10).unwrap();
    let phi = params.readout_phi.as_mut().unwrap();
    phi.w2.fill(0.0);
    phi.b2.fill(0.0);
    let s = random_stack(1, 5, 4, 11);
    let mut tape = Tape::new();
    let vars = ParamVars::record(&mut tape, &params, false).unwrap();
    let out = forward(&mut tape, &vars, &c, &s).unwrap();
    let last = *out.history.last().unwrap();
    let theta = vars.theta.forward(&mut tape, last, c.activation).unwrap();
    let half = tape.value(theta) * 0.5;
    assert!(tape
        .value(out.gated)
        .iter()
        .zip(half.iter())
        .all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn history_has_all_rounds() {
    let c = ModelConfig {
        rounds: 3,
        ..small(true, true)
    };
    let params = ModelParams::<f64>::init(&c, 12).unwrap();
    let mut tape = Tape::new();
    let vars = ParamVars::record(&mut tape, &params, false).unwrap();
    let out = forward(&mut tape, &vars, &c, &random_stack(3, 6, 4, 13)).unwrap();
    assert_eq!(out.history.len(), 4);
    for &h in &out.history {
        assert_eq!(tape.shape(h), (6, 4));
    }
}

#[test]
fn forward_rejects_wrong_layers() {
    let model = Model::<f64>::new(small(false, true), 0).unwrap();
    assert!(matches!(
        model.embed(&random_stack(1, 4, 4, 0)),
        Err(Error::Shape { op: "forward", .. })
    ));
}

#[test]
fn embedding_is_deterministic_finite_nonzero() {
    let model = Model::<f64>::new(small(false, true), 14).unwrap();
    let s = random_stack(3, 9, 4, 15);
    let a = model.embed(&s).unwrap();
    let b = model.embed(&s).unwrap();
    assert_eq!(a, b);
    let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm.is_finite() && norm > 0.0);
}

#[test]
fn every_parameter_gets_gradient() {
    for thin in [false, true] {
        let c = small(thin, true);
        let params = ModelParams::<f64>::init(&c, 16).unwrap();
        let mut tape = Tape::new();
        let vars = ParamVars::record(&mut tape, &params, true).unwrap();
        let out = forward(&mut tape, &vars, &c, &random_stack(3, 6, 4, 17)).unwrap();
        let loss = tape.mul(out.embedding, out.embedding).unwrap();
        let loss = tape.sum(loss).unwrap();
        tape.backward(loss).unwrap();
        for ((name, _), v) in params.named().iter().zip(vars.all()) {
            let g = tape.grad_or_zeros(v);
            assert!(g.iter().any(|&x| x != 0.0), "{name} has zero gradient");
        }
    }
}

#[test]
fn full_model_gradient_check() {
    let c = ModelConfig {
        activation: Activation::Gelu,
        ..small(false, true)
    };
    let mut params = ModelParams::<f64>::init(&c, 18).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    params.visit_mut(|_, m| m.mapv_inplace(|v| v + rng.random_range(-0.1..0.1)));
    let stack = random_stack(3, 5, 4, 20);
    let inputs: Vec<Mat<f64>> = params.named().into_iter().map(|(_, m)| m).collect();
    let report = grad_check(
        |tape, leaves| {
            let vars = ParamVars::from_leaves(leaves, c.rounds, true, true)?;
            let out = forward(tape, &vars, &c, &stack)?;
            let sq = tape.mul(out.embedding, out.embedding)?;
            tape.sum(sq)
        },
        &inputs,
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn tensors_round_trip() {
    let c = small(false, true);
    let p = ModelParams::<f64>::init(&c, 21).unwrap();
    let t = p.to_tensors("model.");
    assert_eq!(ModelParams::from_tensors(&c, &t, "model.").unwrap(), p);
    assert!(matches!(
        ModelParams::<f64>::from_tensors(&small(true, false), &t, "x."),
        Err(Error::Format(_))
    ));
    let wider = ModelConfig {
        mlp_hidden: 7,
        ..c
    };
    assert!(ModelParams::<f64>::from_tensors(&wider, &t, "model.").is_err());
}

#[test]
fn normalized_weights_sum_to_one() {
    let mut p = ModelParams::<f64>::init(&small(false, true), 0).unwrap();
    p.layer_weights = Some(array![[1.0, 2.0, 5.0]]);
    assert_eq!(p.normalized_layer_weights().unwrap(), vec![0.125, 0.25, 0.625]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn frame_permutation_invariance(seed in any::<u64>(), n in 2usize..10, thin in any::<bool>()) {
        let model = Model::<f64>::new(small(thin, true), seed).unwrap();
        let s = random_stack(3, n, 4, seed ^ 0x5eed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = model.embed(&s).unwrap();
        let b = model.embed(&s.permute_frames(&order).unwrap()).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }
}
