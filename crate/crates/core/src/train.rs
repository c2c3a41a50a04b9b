//! Mini-batch training of an encoder with the AAM head.
//!
//! Every step draws its batch from an RNG derived from `(seed, step)`, so a
//! run resumed from a checkpoint replays exactly the batches an
//! uninterrupted run would see. The batch is split into fixed-size micro
//! batches whose gradients are computed in parallel and summed in order;
//! results therefore do not depend on the number of workers.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aam::{aam_loss, AamHead};
use crate::config::RunConfig;
use crate::dataio::{read_checkpoint, write_checkpoint, FeatureSource, Manifest, NamedTensor};
use crate::diffcore::{Mat, Real, Tape, Var};
use crate::encoder::{self, fit_layers, Encoder, EncoderKind};
use crate::error::{Error, Result};
use crate::eval::thread_pool;
use crate::model::{self, Model, ModelParams, ParamVars};
use crate::optim::Adam;
use crate::pooling;

const MODEL_PREFIX: &str = "model.";
const HEAD_NAME: &str = "head.class_weights";

/// Stream reserved for the head initialization; step `k` uses stream
/// `k + 1` and the model initialization stream 0.
const HEAD_STREAM: u64 = u64::MAX;

/// Saved training state: configuration, parameters, optimizer moments and
/// schedule position. The batch RNG is a function of seed and step, so the
/// step is its state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub total_steps: usize,
    /// Speaker labels in class order.
    pub speakers: Vec<String>,
    /// `model.*` and `head.class_weights`.
    pub params: Vec<NamedTensor>,
    pub adam_steps: u64,
    pub adam_m: Vec<NamedTensor>,
    pub adam_v: Vec<NamedTensor>,
}

fn bytes_tensor(name: &str, bytes: &[u8]) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        dims: vec![bytes.len()],
        data: bytes.iter().map(|&b| b as f64).collect(),
    }
}

fn tensor_bytes(t: &NamedTensor) -> Result<Vec<u8>> {
    t.data
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Format(format!("tensor `{}` is not a byte string", t.name)))
            }
        })
        .collect()
}

fn find<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a NamedTensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))
}

fn scalar(tensors: &[NamedTensor], name: &str) -> Result<f64> {
    match find(tensors, name)?.data[..] {
        [v] => Ok(v),
        _ => Err(Error::Format(format!("`{name}` is not a scalar"))),
    }
}

impl Checkpoint {
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = vec![
            // Text metadata is stored one byte per entry.
            bytes_tensor("meta.config", self.config.to_json().as_bytes()),
            bytes_tensor("meta.speakers", self.speakers.join("\n").as_bytes()),
            NamedTensor::scalar("meta.step", self.step as f64),
            NamedTensor::scalar("meta.total_steps", self.total_steps as f64),
            NamedTensor::scalar("adam.steps", self.adam_steps as f64),
        ];
        out.extend(self.params.iter().cloned());
        for (prefix, list) in [("adam.m.", &self.adam_m), ("adam.v.", &self.adam_v)] {
            out.extend(list.iter().map(|t| NamedTensor {
                name: format!("{prefix}{}", t.name),
                ..t.clone()
            }));
        }
        out
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let text = String::from_utf8(tensor_bytes(find(tensors, "meta.config")?)?)
            .map_err(|e| Error::Format(format!("meta.config: {e}")))?;
        let config = RunConfig::from_json(&text)
            .map_err(|e| Error::Format(format!("stored config invalid: {e}")))?;
        let speakers = String::from_utf8(tensor_bytes(find(tensors, "meta.speakers")?)?)
            .map_err(|e| Error::Format(format!("meta.speakers: {e}")))?
            .split('\n')
            .map(str::to_string)
            .collect();
        let strip = |prefix: &str| -> Vec<NamedTensor> {
            tensors
                .iter()
                .filter_map(|t| {
                    t.name.strip_prefix(prefix).map(|n| NamedTensor {
                        name: n.to_string(),
                        ..t.clone()
                    })
                })
                .collect()
        };
        let params = tensors
            .iter()
            .filter(|t| t.name.starts_with(MODEL_PREFIX) || t.name == HEAD_NAME)
            .cloned()
            .collect();
        Ok(Checkpoint {
            config,
            step: scalar(tensors, "meta.step")? as usize,
            total_steps: scalar(tensors, "meta.total_steps")? as usize,
            speakers,
            params,
            adam_steps: scalar(tensors, "adam.steps")? as u64,
            adam_m: strip("adam.m."),
            adam_v: strip("adam.v."),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(&self.to_tensors(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensors(&read_checkpoint(path)?)
    }

    /// Encoder with the stored parameters, at working precision `T`.
    pub fn encoder<T: Real>(&self) -> Result<Encoder<T>> {
        match self.config.encoder_kind() {
            EncoderKind::Graph => {
                let params = ModelParams::from_tensors(&self.config.model, &self.params, MODEL_PREFIX)?;
                Ok(Encoder::Graph(Model {
                    config: self.config.model.clone(),
                    params,
                }))
            }
            EncoderKind::Pooling(k) => Ok(Encoder::Pooling(k)),
        }
    }

    pub fn head<T: Real>(&self) -> Result<AamHead<T>> {
        Ok(AamHead {
            class_weights: find(&self.params, HEAD_NAME)?.to_matrix()?,
            config: self.config.aam,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,lr,loss,grad_norm";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.lr, self.loss, self.grad_norm)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints and `metrics.csv`; nothing is written
    /// when absent.
    pub out: Option<PathBuf>,
    pub workers: usize,
    /// Continue from this state; its configuration replaces the given one.
    pub resume: Option<Checkpoint>,
    /// Stop once this many optimizer steps have been taken in total.
    pub stop_at: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Rows for the steps taken by this call.
    pub metrics: Vec<MetricRow>,
    pub last: Checkpoint,
}

/// Steps per epoch: one pass over the manifest at the configured batch size.
pub fn steps_per_epoch(config: &RunConfig, utterances: usize) -> usize {
    utterances.div_ceil(config.train.batch_size).max(1)
}

pub fn total_steps(config: &RunConfig, utterances: usize) -> usize {
    config
        .train
        .steps
        .unwrap_or(config.train.epochs * steps_per_epoch(config, utterances))
}

/// Learning rate at `step` under the run's one-cycle schedule.
pub fn lr_at(config: &RunConfig, step: usize, total_steps: usize) -> Result<f64> {
    config.schedule.lr_at(step, total_steps)
}

pub fn train(
    manifest: &Manifest,
    source: &dyn FeatureSource,
    config: &RunConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let config = options.resume.as_ref().map_or(config, |c| &c.config);
    config.validate()?;
    match config.train.precision {
        32 => Trainer::<f32>::new(manifest, source, config, options)?.run(options),
        _ => Trainer::<f64>::new(manifest, source, config, options)?.run(options),
    }
}

struct Sample<'a> {
    entry: &'a crate::dataio::ManifestEntry,
    label: usize,
    start: usize,
}

struct Trainer<'a, T: Real> {
    manifest: &'a Manifest,
    source: &'a dyn FeatureSource,
    config: RunConfig,
    kind: EncoderKind,
    by_class: Vec<Vec<usize>>,
    names: Vec<String>,
    params: Vec<Mat<T>>,
    adam: Adam<T>,
    step: usize,
    total: usize,
    per_epoch: usize,
}

impl<'a, T: Real> Trainer<'a, T> {
    fn new(
        manifest: &'a Manifest,
        source: &'a dyn FeatureSource,
        config: &RunConfig,
        options: &TrainOptions,
    ) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Data("manifest is empty".into()));
        }
        let speakers = manifest.speakers();
        if speakers.len() < 2 {
            return Err(Error::Data(format!("{} speaker(s); need at least 2", speakers.len())));
        }
        let mut by_class = vec![Vec::new(); speakers.len()];
        for (i, e) in manifest.entries().iter().enumerate() {
            by_class[manifest.class_of(&e.speaker).expect("speaker listed")].push(i);
        }
        let kind = config.encoder_kind();
        let per_epoch = steps_per_epoch(config, manifest.len());
        let total = total_steps(config, manifest.len());

        let (names, params, adam, step) = match &options.resume {
            Some(ck) => {
                if ck.speakers != speakers {
                    return Err(Error::Data("checkpoint speakers differ from manifest".into()));
                }
                let names: Vec<String> = ck.params.iter().map(|t| t.name.clone()).collect();
                let params = ck.params.iter().map(|t| t.to_matrix()).collect::<Result<Vec<_>>>()?;
                let mut adam = Adam::new(config.adam);
                if ck.adam_steps > 0 {
                    let moments = |list: &[NamedTensor]| -> Result<Vec<Mat<T>>> {
                        names
                            .iter()
                            .map(|n| find(list, n)?.to_matrix())
                            .collect()
                    };
                    adam.m = moments(&ck.adam_m)?;
                    adam.v = moments(&ck.adam_v)?;
                    adam.steps = ck.adam_steps;
                }
                (names, params, adam, ck.step)
            }
            None => {
                let mut named: Vec<(String, Mat<T>)> = match kind {
                    EncoderKind::Graph => ModelParams::<T>::init(&config.model, config.train.seed)?
                        .named()
                        .into_iter()
                        .map(|(n, m)| (format!("{MODEL_PREFIX}{n}"), m))
                        .collect(),
                    EncoderKind::Pooling(_) => Vec::new(),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
                rng.set_stream(HEAD_STREAM);
                let dim = encoder::output_dim(kind, &config.model);
                let head = AamHead::<T>::init(speakers.len(), dim, config.aam, &mut rng)?;
                named.push((HEAD_NAME.to_string(), head.class_weights));
                let (names, params) = named.into_iter().unzip();
                (names, params, Adam::new(config.adam), 0)
            }
        };
        Ok(Trainer {
            manifest,
            source,
            config: config.clone(),
            kind,
            by_class,
            names,
            params,
            adam,
            step,
            total,
            per_epoch,
        })
    }

    fn checkpoint(&self) -> Checkpoint {
        let tensors = |ms: &[Mat<T>]| -> Vec<NamedTensor> {
            self.names
                .iter()
                .zip(ms)
                .map(|(n, m)| NamedTensor::from_matrix(n.clone(), m))
                .collect()
        };
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            total_steps: self.total,
            speakers: self.manifest.speakers().to_vec(),
            params: tensors(&self.params),
            adam_steps: self.adam.steps,
            adam_m: tensors(&self.adam.m),
            adam_v: tensors(&self.adam.v),
        }
    }

    fn sample_batch(&self, step: usize) -> Vec<Sample<'a>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed);
        rng.set_stream(step as u64 + 1);
        let crop = self.config.train.crop_frames;
        (0..self.config.train.batch_size)
            .map(|_| {
                let label = rng.random_range(0..self.by_class.len());
                let pool = &self.by_class[label];
                let entry = &self.manifest.entries()[pool[rng.random_range(0..pool.len())]];
                let start = if entry.frames > crop {
                    rng.random_range(0..=entry.frames - crop)
                } else {
                    0
                };
                Sample { entry, label, start }
            })
            .collect()
    }

    fn embedding(&self, tape: &mut Tape<T>, vars: Option<&ParamVars>, sample: &Sample) -> Result<Var> {
        let stack = self
            .source
            .load(sample.entry)?
            .crop(sample.start, self.config.train.crop_frames);
        match (self.kind, vars) {
            (EncoderKind::Graph, Some(vars)) => {
                let stack = fit_layers(&stack, self.config.model.input_layers())?;
                Ok(model::forward(tape, vars, &self.config.model, &stack)?.embedding)
            }
            (EncoderKind::Pooling(k), _) => {
                let stack = stack.average_layers();
                let v = pooling::pool(k, stack.layer_as::<f64>(0).view())?;
                tape.constant(Mat::from_shape_fn((1, v.len()), |(_, j)| T::cast(v[j])))
            }
            (EncoderKind::Graph, None) => unreachable!("graph encoder records its parameters"),
        }
    }

    /// Loss share and gradients of one micro batch.
    fn micro_batch(&self, samples: &[Sample]) -> Result<(f64, Vec<Mat<T>>)> {
        let mut tape = Tape::new();
        let leaves = self
            .params
            .iter()
            .map(|p| tape.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let (model_leaves, head) = leaves.split_at(leaves.len() - 1);
        let vars = match self.kind {
            EncoderKind::Graph => Some(ParamVars::from_leaves(
                model_leaves,
                self.config.model.rounds,
                !self.config.model.thin,
                self.config.model.use_layer_weighting,
            )?),
            EncoderKind::Pooling(_) => None,
        };
        let mut batch = None;
        for s in samples {
            let e = self.embedding(&mut tape, vars.as_ref(), s)?;
            batch = Some(match batch {
                None => e,
                Some(b) => tape.concat_rows(b, e)?,
            });
        }
        let batch = batch.expect("micro batches are nonempty");
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let loss = aam_loss(&mut tape, batch, head[0], &labels, self.config.aam)?;
        let share = samples.len() as f64 / self.config.train.batch_size as f64;
        let loss = tape.scale(loss, T::cast(share))?;
        tape.backward(loss)?;
        let grads = leaves.iter().map(|&v| tape.grad_or_zeros(v)).collect();
        Ok((tape.scalar(loss).as_f64(), grads))
    }

    fn one_step(&mut self, pool: &rayon::ThreadPool) -> Result<MetricRow> {
        let step = self.step;
        let samples = self.sample_batch(step);
        let diverged = |source: Error| Error::Diverged {
            step,
            utterances: samples.iter().map(|s| s.entry.utt.clone()).collect(),
            source: Box::new(source),
        };
        let chunks: Vec<&[Sample]> = samples.chunks(self.config.train.micro_batch).collect();
        let parts = pool
            .install(|| {
                chunks
                    .par_iter()
                    .map(|c| self.micro_batch(c))
                    .collect::<Vec<_>>()
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                e @ (Error::Numeric { .. } | Error::DegenerateWeights(_)) => diverged(e),
                e => e,
            })?;

        let mut loss = 0.0;
        let mut grads: Vec<Mat<T>> = Vec::new();
        for (l, g) in parts {
            loss += l;
            if grads.is_empty() {
                grads = g;
            } else {
                for (acc, g) in grads.iter_mut().zip(&g) {
                    *acc += g;
                }
            }
        }
        if !loss.is_finite() {
            return Err(diverged(Error::Numeric { op: "loss" }));
        }
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        let lr = lr_at(&self.config, step, self.total)?;
        let mut refs: Vec<&mut Mat<T>> = self.params.iter_mut().collect();
        self.adam.step(&mut refs, &grads, lr);
        if let Some(i) = self.names.iter().position(|n| n == "model.layer_weights") {
            let s: f64 = self.params[i].iter().map(|v| v.as_f64()).sum();
            if s.abs() < model::LAYER_WEIGHT_SUM_FLOOR {
                return Err(diverged(Error::DegenerateWeights(s)));
            }
        }
        self.step += 1;
        Ok(MetricRow {
            step,
            lr,
            loss,
            grad_norm,
        })
    }

    fn run(mut self, options: &TrainOptions) -> Result<TrainOutcome> {
        let pool = thread_pool(options.workers.max(1))?;
        let stop = options.stop_at.unwrap_or(self.total).min(self.total);
        let mut log = match &options.out {
            Some(dir) => Some(MetricsLog::open(dir, options.resume.is_some())?),
            None => None,
        };
        let mut best = f64::INFINITY;
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        let mut metrics = Vec::new();
        while self.step < stop {
            let row = self.one_step(&pool)?;
            if let Some(log) = &mut log {
                log.push(&row)?;
            }
            epoch_loss += row.loss;
            epoch_steps += 1;
            metrics.push(row);
            let epoch_end = self.step.is_multiple_of(self.per_epoch) || self.step == self.total;
            if let (true, Some(dir)) = (epoch_end, &options.out) {
                log.as_mut().expect("opened with out").flush()?;
                let ck = self.checkpoint();
                let epoch = self.step.div_ceil(self.per_epoch);
                ck.save(dir.join(format!("epoch-{epoch:03}")))?;
                ck.save(dir.join("last"))?;
                let mean = epoch_loss / epoch_steps as f64;
                if mean < best {
                    best = mean;
                    ck.save(dir.join("best"))?;
                }
            }
            if epoch_end {
                epoch_loss = 0.0;
                epoch_steps = 0;
            }
        }
        if let Some(log) = &mut log {
            log.flush()?;
        }
        Ok(TrainOutcome {
            metrics,
            last: self.checkpoint(),
        })
    }
}

struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        let exists = path.exists();
        let file = if append {
            OpenOptions::new().append(true).create(true).open(&path)
        } else {
            File::create(&path)
        }
        .map_err(|e| Error::io(&path, e))?;
        let mut log = MetricsLog {
            out: BufWriter::new(file),
            path,
        };
        if !(append && exists) {
            log.line(METRICS_HEADER)?;
        }
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    fn push(&mut self, row: &MetricRow) -> Result<()> {
        self.line(&row.csv())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests;
