//! On-disk formats: feature stacks, manifests, trial lists and checkpoints.
//!
//! Feature file (`W2VF`), all integers little-endian:
//!
//! ```text
//! "W2VF" | version u8 = 1 | dtype u8 = 0 (f32) | reserved u16 = 0
//! layers u32 | frames u32 | dim u32
//! layers * frames * dim f32 values, layer-major, frame-major within a layer
//! ```
//!
//! Checkpoint (`GPCK`): magic, u32 tensor count, then per tensor a u16 name
//! length, the UTF-8 name, u32 rank, rank u32 dims and an f64 payload.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::diffcore::Real;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"W2VF";
pub const FEATURE_VERSION: u8 = 1;
pub const FEATURE_HEADER_BYTES: usize = 20;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GPCK";

/// Per-frame features of one utterance: `layers` matrices of
/// `frames x dim`, stored frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    layers: usize,
    frames: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureStack {
    pub fn new(layers: usize, frames: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if layers == 0 || frames == 0 || dim == 0 {
            return Err(Error::Data(format!(
                "empty feature stack ({layers} layers, {frames} frames, dim {dim})"
            )));
        }
        if values.len() != layers * frames * dim {
            return Err(Error::Data(format!(
                "{} values for {layers}x{frames}x{dim}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite feature value at index {pos}")));
        }
        Ok(FeatureStack {
            layers,
            frames,
            dim,
            values,
        })
    }

    /// Single-layer stack from a `frames x dim` matrix.
    pub fn from_frames<T: Real>(frames: ArrayView2<'_, T>) -> Result<Self> {
        let (n, f) = frames.dim();
        let values = frames.iter().map(|v| v.as_f64() as f32).collect();
        Self::new(1, n, f, values)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Frame-major view of one layer.
    pub fn layer(&self, l: usize) -> ArrayView2<'_, f32> {
        let sz = self.frames * self.dim;
        ArrayView2::from_shape((self.frames, self.dim), &self.values[l * sz..(l + 1) * sz])
            .expect("layout checked at construction")
    }

    /// One layer widened to working precision.
    pub fn layer_as<T: Real>(&self, l: usize) -> Array2<T> {
        self.layer(l).mapv(|v| T::cast(v as f64))
    }

    /// Contiguous window of `len` frames starting at `start`, over all
    /// layers. Windows running past the end wrap around to the start, so
    /// short utterances are repeat-padded.
    pub fn crop(&self, start: usize, len: usize) -> FeatureStack {
        let mut values = Vec::with_capacity(self.layers * len * self.dim);
        for l in 0..self.layers {
            let layer = self.layer(l);
            for k in 0..len {
                let row = layer.row((start + k) % self.frames);
                values.extend(row.iter());
            }
        }
        FeatureStack {
            layers: self.layers,
            frames: len,
            dim: self.dim,
            values,
        }
    }

    /// Single-layer stack holding the frame-wise mean of all layers.
    pub fn average_layers(&self) -> FeatureStack {
        if self.layers == 1 {
            return self.clone();
        }
        let sz = self.frames * self.dim;
        let mut acc = vec![0.0f64; sz];
        for l in 0..self.layers {
            for (a, &v) in acc.iter_mut().zip(&self.values[l * sz..(l + 1) * sz]) {
                *a += v as f64;
            }
        }
        let n = self.layers as f64;
        FeatureStack {
            layers: 1,
            frames: self.frames,
            dim: self.dim,
            values: acc.into_iter().map(|v| (v / n) as f32).collect(),
        }
    }

    /// Reorder frames: output frame `k` is input frame `order[k]`.
    pub fn permute_frames(&self, order: &[usize]) -> Result<FeatureStack> {
        let mut seen = vec![false; self.frames];
        if order.len() != self.frames || !order.iter().all(|&i| i < self.frames && !std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Usage("frame order is not a permutation".into()));
        }
        let mut values = Vec::with_capacity(self.values.len());
        for l in 0..self.layers {
            let layer = self.layer(l);
            for &i in order {
                values.extend(layer.row(i).iter());
            }
        }
        Ok(FeatureStack { values, ..*self })
    }

    /// Size of the serialized file.
    pub fn encoded_len(&self) -> usize {
        FEATURE_HEADER_BYTES + 4 * self.values.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.push(FEATURE_VERSION);
        out.push(0);
        out.extend_from_slice(&0u16.to_le_bytes());
        for v in [self.layers, self.frames, self.dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::Format("missing W2VF magic".into()));
        }
        if bytes.len() < FEATURE_HEADER_BYTES {
            return Err(Error::Corruption(format!(
                "header truncated at {} bytes",
                bytes.len()
            )));
        }
        if bytes[4] != FEATURE_VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        if bytes[5] != 0 {
            return Err(Error::Format(format!("unsupported dtype {}", bytes[5])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (layers, frames, dim) = (u32_at(8), u32_at(12), u32_at(16));
        let count = layers
            .checked_mul(frames)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| Error::Corruption("declared size overflows".into()))?;
        let payload = &bytes[FEATURE_HEADER_BYTES..];
        if payload.len() != 4 * count {
            return Err(Error::Corruption(format!(
                "declared {layers}x{frames}x{dim} needs {} payload bytes, found {}",
                4 * count,
                payload.len()
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(layers, frames, dim, values)
    }
}

pub fn read_feature_stack(path: impl AsRef<Path>) -> Result<FeatureStack> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureStack::decode(&bytes)
}

/// Write a stack and return the number of bytes written.
pub fn write_feature_stack(stack: &FeatureStack, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let bytes = stack.encode();
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

/// Where the features of a manifest entry come from.
pub trait FeatureSource: Sync {
    fn load(&self, entry: &ManifestEntry) -> Result<FeatureStack>;
}

/// Reads each entry's feature file from disk.
#[derive(Clone, Copy, Debug, Default)]
pub struct FileSource;

impl FeatureSource for FileSource {
    fn load(&self, entry: &ManifestEntry) -> Result<FeatureStack> {
        read_feature_stack(&entry.path).map_err(|e| Error::for_utterance(&entry.utt, e))
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub utt: String,
    pub speaker: String,
    pub path: PathBuf,
    pub frames: usize,
}

/// Utterances with speaker labels. Speaker labels map to class indices in
/// sorted label order.
#[derive(Clone, Debug, Default)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
    speakers: Vec<String>,
    by_id: HashMap<String, usize>,
}

impl Manifest {
    /// Build from entries whose paths are already resolved.
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if by_id.insert(e.utt.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate utterance id `{}`", e.utt)));
            }
        }
        let speakers: BTreeSet<&str> = entries.iter().map(|e| e.speaker.as_str()).collect();
        let speakers = speakers.into_iter().map(String::from).collect();
        Ok(Manifest {
            entries,
            speakers,
            by_id,
        })
    }

    /// Parse a JSON-lines manifest. Relative paths resolve against the
    /// manifest's directory and must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry = serde_json::from_str(&line).map_err(|err| Error::Parse {
                line: i + 1,
                msg: err.to_string(),
            })?;
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            if !e.path.is_file() {
                return Err(Error::Data(format!(
                    "line {}: feature file {} for `{}` not found",
                    i + 1,
                    e.path.display(),
                    e.utt
                )));
            }
            entries.push(e);
        }
        Self::from_entries(entries)
    }

    /// Write as JSON lines.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("plain struct"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, utt: &str) -> Option<&ManifestEntry> {
        self.by_id.get(utt).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, utt: &str) -> bool {
        self.by_id.contains_key(utt)
    }

    /// Speaker labels in class-index order.
    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn class_of(&self, speaker: &str) -> Option<usize> {
        self.speakers.binary_search_by(|s| s.as_str().cmp(speaker)).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

pub type TrialList = Vec<Trial>;

/// Parse `<0|1> <enroll> <test>` lines, checking ids against the manifest.
pub fn parse_trials(text: &str, manifest: &Manifest) -> Result<TrialList> {
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [label, enroll, test] = fields[..] else {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 fields, found {}", fields.len()),
            });
        };
        let target = match label {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("label `{other}` is not 0 or 1"),
                })
            }
        };
        for id in [enroll, test] {
            if !manifest.contains(id) {
                return Err(Error::Reference {
                    line: line_no,
                    id: id.to_string(),
                });
            }
        }
        trials.push(Trial {
            target,
            enroll: enroll.to_string(),
            test: test.to_string(),
        });
    }
    Ok(trials)
}

/// Inverse of [`parse_trials`].
pub fn format_trials(trials: &[Trial]) -> String {
    trials
        .iter()
        .map(|t| format!("{} {} {}\n", u8::from(t.target), t.enroll, t.test))
        .collect()
}

pub fn load_trials(path: impl AsRef<Path>, manifest: &Manifest) -> Result<TrialList> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trials(&text, manifest)
}

/// Named dense tensor as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn scalar(name: impl Into<String>, v: f64) -> Self {
        NamedTensor {
            name: name.into(),
            dims: vec![],
            data: vec![v],
        }
    }

    pub fn from_matrix<T: Real>(name: impl Into<String>, m: &Array2<T>) -> Self {
        NamedTensor {
            name: name.into(),
            dims: vec![m.nrows(), m.ncols()],
            data: m.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn to_matrix<T: Real>(&self) -> Result<Array2<T>> {
        let (r, c) = match self.dims[..] {
            [r, c] => (r, c),
            [n] => (1, n),
            [] => (1, 1),
            _ => {
                return Err(Error::Format(format!(
                    "tensor `{}` has rank {}",
                    self.name,
                    self.dims.len()
                )))
            }
        };
        Array2::from_shape_vec((r, c), self.data.iter().map(|&v| T::cast(v)).collect())
            .map_err(|e| Error::Format(format!("tensor `{}`: {e}", self.name)))
    }
}

pub fn encode_checkpoint(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let expected: usize = t.dims.iter().product();
        if expected != t.data.len() {
            return Err(Error::Data(format!(
                "tensor `{}` declares {expected} values, holds {}",
                t.name,
                t.data.len()
            )));
        }
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Data(format!("tensor name `{}` too long", t.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corruption(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing GPCK magic".into()));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let dims = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let payload = cur.take(n.checked_mul(8).ok_or_else(|| {
            Error::Corruption(format!("tensor `{name}` size overflows"))
        })?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - cur.pos
        )));
    }
    Ok(tensors)
}

pub fn write_checkpoint(tensors: &[NamedTensor], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(tensors)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
