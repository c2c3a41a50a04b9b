//! Embedding extraction, cosine trial scoring and equal error rate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataio::{FeatureSource, Manifest, Trial};
use crate::diffcore::Real;
use crate::encoder::Encoder;
use crate::error::{Error, Result};

pub type Embeddings = BTreeMap<String, Vec<f64>>;

/// One embedding per manifest entry, over full-length utterances.
/// `workers` sets the thread count; results do not depend on it.
pub fn embed_all<T: Real>(
    manifest: &Manifest,
    source: &dyn FeatureSource,
    encoder: &Encoder<T>,
    workers: usize,
) -> Result<Embeddings> {
    let run = || {
        manifest
            .entries()
            .par_iter()
            .map(|entry| {
                let stack = source.load(entry)?;
                let e = encoder
                    .embed(&stack)
                    .map_err(|e| Error::for_utterance(&entry.utt, e))?;
                Ok((entry.utt.clone(), e))
            })
            .collect::<Result<Vec<_>>>()
    };
    let pairs = thread_pool(workers)?.install(run)?;
    Ok(pairs.into_iter().collect())
}

pub(crate) fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(Error::Usage("workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {workers} workers: {e}")))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", format!("{} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) || !(na.is_finite() && nb.is_finite()) {
        return Err(Error::Numeric { op: "cosine" });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

pub fn score_trials(embeddings: &Embeddings, trials: &[Trial]) -> Result<Vec<ScoredTrial>> {
    let get = |id: &str| {
        embeddings
            .get(id)
            .ok_or_else(|| Error::Data(format!("no embedding for `{id}`")))
    };
    trials
        .iter()
        .map(|t| {
            Ok(ScoredTrial {
                target: t.target,
                enroll: t.enroll.clone(),
                test: t.test.clone(),
                score: cosine(get(&t.enroll)?, get(&t.test)?)?,
            })
        })
        .collect()
}

/// Equal error rate and the threshold where it occurs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

impl std::fmt::Display for Eer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "eer={} threshold={}", self.eer, self.threshold)
    }
}

pub fn compute_eer(scored: &[ScoredTrial]) -> Result<Eer> {
    let (t, n): (Vec<_>, Vec<_>) = scored.iter().partition(|s| s.target);
    let t: Vec<f64> = t.iter().map(|s| s.score).collect();
    let n: Vec<f64> = n.iter().map(|s| s.score).collect();
    eer_from_scores(&t, &n)
}

/// EER from target and non-target scores. A trial is accepted when its
/// score is at least the threshold.
///
/// The ROC is traced at thresholds `-inf`, every distinct score and `+inf`.
/// At the first point where the false-reject rate reaches the false-accept
/// rate, the two rates are interpolated linearly against the previous
/// point; the threshold is interpolated the same way.
pub fn eer_from_scores(targets: &[f64], nontargets: &[f64]) -> Result<Eer> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::Domain(format!(
            "need both classes, got {} target and {} non-target trials",
            targets.len(),
            nontargets.len()
        )));
    }
    if targets.iter().chain(nontargets).any(|s| !s.is_finite()) {
        return Err(Error::Domain("scores must be finite".into()));
    }
    let mut t = targets.to_vec();
    let mut n = nontargets.to_vec();
    t.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = t.iter().chain(&n).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);

    let (nt, nn) = (t.len() as f64, n.len() as f64);
    // FRR counts targets strictly below the threshold; FAR counts
    // non-targets at or above it.
    let rates = |th: f64| {
        let frr = t.partition_point(|&s| s < th) as f64 / nt;
        let far = (n.len() - n.partition_point(|&s| s < th)) as f64 / nn;
        (frr, far)
    };

    let mut prev = (f64::NEG_INFINITY, 0.0, 1.0);
    for &th in &thresholds {
        let (frr, far) = rates(th);
        if frr >= far {
            let (pth, pfrr, pfar) = prev;
            if th == f64::NEG_INFINITY || frr == far {
                return Ok(Eer { eer: frr, threshold: th });
            }
            let gap_prev = pfar - pfrr;
            let gap = frr - far;
            let a = gap_prev / (gap_prev + gap);
            let eer = pfrr + a * (frr - pfrr);
            let threshold = match (pth.is_finite(), th.is_finite()) {
                (true, true) => pth + a * (th - pth),
                (true, false) => pth,
                _ => th,
            };
            return Ok(Eer { eer, threshold });
        }
        prev = (th, frr, far);
    }
    unreachable!("FRR reaches 1 and FAR reaches 0 at +inf")
}

/// `label,enroll,test,score` rows with a header; label is 1 for target.
pub fn scores_csv(scored: &[ScoredTrial]) -> String {
    let mut out = String::from("label,enroll,test,score\n");
    for s in scored {
        let _ = writeln!(out, "{},{},{},{}", u8::from(s.target), s.enroll, s.test, s.score);
    }
    out
}

pub fn write_scores(scored: &[ScoredTrial], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scores_csv(scored)).map_err(|e| Error::io(path, e))
}
