//! Browser demo over the graphpool library.
//!
//! The plain functions hold the logic and are tested natively; the
//! `wasm_bindgen` wrappers only convert errors for JavaScript.

use std::collections::BTreeMap;

use graphpool::attention::{adjacency_of, AttentionParams};
use graphpool::dataio::FeatureSource;
use graphpool::diffcore::Mat;
use graphpool::encoder::{Encoder, EncoderKind};
use graphpool::eval::{compute_eer, score_trials};
use graphpool::model::{Model, ModelConfig};
use graphpool::optim::OneCycle;
use graphpool::pooling::PoolingKind;
use graphpool::synthetic::{SyntheticCorpus, SyntheticSpec};
use graphpool::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Frames drawn around `segments` random centers, one center per
/// contiguous run of frames.
pub fn segmented_frames(frames: usize, dim: usize, segments: usize, noise: f64, seed: u64) -> Result<Mat<f64>> {
    if frames == 0 || dim == 0 || segments == 0 || segments > frames {
        return Err(Error::Usage(format!(
            "need 1 <= segments <= frames and dim > 0, got {segments} segments, {frames} frames, dim {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = Mat::from_shape_fn((segments, dim), |_| rng.random_range(-1.0..1.0));
    Ok(Mat::from_shape_fn((frames, dim), |(i, j)| {
        centers[[i * segments / frames, j]] + noise * rng.random_range(-1.0..1.0)
    }))
}

/// Row-major `frames x frames` attention adjacency of segmented frames
/// under the identity projection.
pub fn adjacency_heatmap(
    frames: usize,
    dim: usize,
    segments: usize,
    noise: f64,
    beta: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let x = segmented_frames(frames, dim, segments, noise, seed)?;
    let (_, a) = adjacency_of(&x, &AttentionParams::identity(dim, beta))?;
    Ok(a.into_matrix().into_iter().collect())
}

/// Learning rate at every step of a one-cycle schedule.
pub fn lr_curve(
    total_steps: usize,
    max_lr: f64,
    div_factor: f64,
    final_div: f64,
    warmup_fraction: f64,
) -> Result<Vec<f64>> {
    let schedule = OneCycle {
        max_lr,
        div_factor,
        final_div,
        warmup_fraction,
    };
    schedule.validate()?;
    (0..total_steps).map(|s| schedule.lr_at(s, total_steps)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoolingScore {
    pub kind: String,
    pub eer: f64,
}

/// EER of every untrained encoder over the six held-out utterances per
/// speaker of a small synthetic corpus. The graph encoder keeps its random
/// initial weights.
pub fn pooling_comparison(speakers: usize, frames: usize, dim: usize, noise: f64, seed: u64) -> Result<Vec<PoolingScore>> {
    let corpus = SyntheticCorpus::new(SyntheticSpec {
        speakers,
        utterances_per_speaker: 7,
        train_per_speaker: 1,
        frames,
        dim,
        layers: 1,
        noise,
        seed,
        ..SyntheticSpec::default()
    })?;
    let manifest = corpus.heldout_manifest();
    let trials = corpus.heldout_trials();
    let graph = ModelConfig {
        feature_dim: dim,
        mlp_hidden: 2 * dim,
        layers: 1,
        use_layer_weighting: false,
        ..ModelConfig::default()
    };
    let mut encoders: Vec<Encoder<f64>> = [
        PoolingKind::Mean,
        PoolingKind::Max,
        PoolingKind::MeanStd,
        PoolingKind::Quantile,
        PoolingKind::First,
        PoolingKind::Middle,
        PoolingKind::Last,
        PoolingKind::Random { seed },
    ]
    .into_iter()
    .map(Encoder::Pooling)
    .collect();
    encoders.push(Encoder::Graph(Model::new(graph, seed)?));

    encoders
        .iter()
        .map(|encoder| {
            let mut embeddings = BTreeMap::new();
            for entry in manifest.entries() {
                let stack = corpus.load(entry)?;
                embeddings.insert(entry.utt.clone(), encoder.embed(&stack)?);
            }
            let eer = compute_eer(&score_trials(&embeddings, &trials)?)?.eer;
            let kind = match encoder.kind() {
                EncoderKind::Graph => "gnn (untrained)".to_string(),
                k => k.to_string(),
            };
            Ok(PoolingScore { kind, eer })
        })
        .collect()
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = adjacencyHeatmap)]
pub fn adjacency_heatmap_js(
    frames: usize,
    dim: usize,
    segments: usize,
    noise: f64,
    beta: f64,
    seed: u32,
) -> std::result::Result<Vec<f64>, JsError> {
    adjacency_heatmap(frames, dim, segments, noise, beta, seed.into()).map_err(js)
}

#[wasm_bindgen(js_name = lrCurve)]
pub fn lr_curve_js(
    total_steps: usize,
    max_lr: f64,
    div_factor: f64,
    final_div: f64,
    warmup_fraction: f64,
) -> std::result::Result<Vec<f64>, JsError> {
    lr_curve(total_steps, max_lr, div_factor, final_div, warmup_fraction).map_err(js)
}

/// JSON array of `{kind, eer}` objects.
#[wasm_bindgen(js_name = poolingComparison)]
pub fn pooling_comparison_js(
    speakers: usize,
    frames: usize,
    dim: usize,
    noise: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    let scores = pooling_comparison(speakers, frames, dim, noise, seed.into()).map_err(js)?;
    serde_json::to_string(&scores).map_err(|e| JsError::new(&e.to_string()))
}
