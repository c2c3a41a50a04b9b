//! Seeded synthetic speaker corpus.
//!
//! Each speaker has a mean vector; every frame of every utterance is that
//! mean plus a shared offset plus isotropic Gaussian noise. Utterances are
//! generated on demand from their index, so nothing is stored.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataio::{
    format_trials, write_feature_stack, FeatureSource, FeatureStack, Manifest, ManifestEntry, Trial,
    TrialList,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    /// Leading utterances of each speaker used for training; the rest are
    /// held out for trials.
    pub train_per_speaker: usize,
    pub frames: usize,
    pub dim: usize,
    pub layers: usize,
    /// Standard deviation of the speaker means around the shared offset.
    pub speaker_spread: f64,
    /// Length of the offset shared by every speaker.
    pub shared_offset: f64,
    /// Per-frame noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            speakers: 20,
            utterances_per_speaker: 30,
            train_per_speaker: 20,
            frames: 149,
            dim: 768,
            layers: 1,
            speaker_spread: 1.0,
            shared_offset: 0.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    spec: SyntheticSpec,
    means: Vec<Vec<f64>>,
    index: HashMap<String, (usize, usize)>,
}

fn speaker_id(s: usize) -> String {
    format!("spk{s:03}")
}

fn utt_id(s: usize, k: usize) -> String {
    format!("spk{s:03}-utt{k:03}")
}

impl SyntheticCorpus {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        if spec.speakers < 2 {
            return Err(Error::Usage("need at least 2 speakers".into()));
        }
        if spec.train_per_speaker == 0 || spec.train_per_speaker > spec.utterances_per_speaker {
            return Err(Error::Usage(format!(
                "train split {} outside 1..={}",
                spec.train_per_speaker, spec.utterances_per_speaker
            )));
        }
        if spec.frames == 0 || spec.dim == 0 || spec.layers == 0 {
            return Err(Error::Usage("frames, dim and layers must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        let offset: Vec<f64> = {
            let raw: Vec<f64> = (0..spec.dim).map(|_| normal()).collect();
            let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            raw.iter().map(|v| v / n * spec.shared_offset).collect()
        };
        let means = (0..spec.speakers)
            .map(|_| {
                offset
                    .iter()
                    .map(|o| o + spec.speaker_spread * normal())
                    .collect()
            })
            .collect();
        let mut index = HashMap::new();
        for s in 0..spec.speakers {
            for k in 0..spec.utterances_per_speaker {
                index.insert(utt_id(s, k), (s, k));
            }
        }
        Ok(SyntheticCorpus { spec, means, index })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// Features of utterance `k` of speaker `s`.
    pub fn utterance(&self, s: usize, k: usize) -> FeatureStack {
        let sp = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(sp.seed);
        rng.set_stream(1 + (s * sp.utterances_per_speaker + k) as u64);
        let mean = &self.means[s];
        let mut values = Vec::with_capacity(sp.layers * sp.frames * sp.dim);
        for _ in 0..sp.layers * sp.frames {
            for m in mean {
                let z: f64 = rng.sample(StandardNormal);
                values.push((m + sp.noise * z) as f32);
            }
        }
        FeatureStack::new(sp.layers, sp.frames, sp.dim, values).expect("finite by construction")
    }

    fn manifest_for(&self, ks: std::ops::Range<usize>, root: &Path) -> Manifest {
        let mut entries = Vec::new();
        for s in 0..self.spec.speakers {
            for k in ks.clone() {
                let utt = utt_id(s, k);
                entries.push(ManifestEntry {
                    path: root.join(format!("{utt}.w2vf")),
                    utt,
                    speaker: speaker_id(s),
                    frames: self.spec.frames,
                });
            }
        }
        Manifest::from_entries(entries).expect("ids are unique")
    }

    pub fn train_manifest(&self) -> Manifest {
        self.manifest_for(0..self.spec.train_per_speaker, Path::new("synthetic"))
    }

    pub fn heldout_manifest(&self) -> Manifest {
        self.manifest_for(
            self.spec.train_per_speaker..self.spec.utterances_per_speaker,
            Path::new("synthetic"),
        )
    }

    /// Every unordered pair of held-out utterances.
    pub fn heldout_trials(&self) -> TrialList {
        let ids: Vec<(usize, String)> = (0..self.spec.speakers)
            .flat_map(|s| {
                (self.spec.train_per_speaker..self.spec.utterances_per_speaker)
                    .map(move |k| (s, utt_id(s, k)))
            })
            .collect();
        let mut trials = Vec::new();
        for (i, (sa, a)) in ids.iter().enumerate() {
            for (sb, b) in &ids[i + 1..] {
                trials.push(Trial {
                    target: sa == sb,
                    enroll: a.clone(),
                    test: b.clone(),
                });
            }
        }
        trials
    }

    /// Write every utterance, `train.jsonl`, `heldout.jsonl` and
    /// `trials.txt` under `dir`.
    pub fn materialize(&self, dir: impl AsRef<Path>) -> Result<MaterializedCorpus> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let sp = &self.spec;
        for s in 0..sp.speakers {
            for k in 0..sp.utterances_per_speaker {
                write_feature_stack(&self.utterance(s, k), dir.join(format!("{}.w2vf", utt_id(s, k))))?;
            }
        }
        let train = self.manifest_for(0..sp.train_per_speaker, dir);
        let heldout = self.manifest_for(sp.train_per_speaker..sp.utterances_per_speaker, dir);
        let out = MaterializedCorpus {
            train: dir.join("train.jsonl"),
            heldout: dir.join("heldout.jsonl"),
            trials: dir.join("trials.txt"),
        };
        train.save(&out.train)?;
        heldout.save(&out.heldout)?;
        fs::write(&out.trials, format_trials(&self.heldout_trials()))
            .map_err(|e| Error::io(&out.trials, e))?;
        Ok(out)
    }
}

/// Paths written by [`SyntheticCorpus::materialize`].
#[derive(Clone, Debug)]
pub struct MaterializedCorpus {
    pub train: PathBuf,
    pub heldout: PathBuf,
    pub trials: PathBuf,
}

impl FeatureSource for SyntheticCorpus {
    fn load(&self, entry: &ManifestEntry) -> Result<FeatureStack> {
        let &(s, k) = self
            .index
            .get(&entry.utt)
            .ok_or_else(|| Error::for_utterance(&entry.utt, Error::Data("not in synthetic corpus".into())))?;
        Ok(self.utterance(s, k))
    }
}
