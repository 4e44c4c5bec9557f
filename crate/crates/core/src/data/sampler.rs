//! P x K batch sampling for batch-all triplet training.

use super::{DatasetIndex, SilhouetteSequence};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    /// Subjects per batch.
    pub p: usize,
    /// Sequences per subject.
    pub k: usize,
    /// Frames per sequence in the batch window.
    pub t: usize,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::config(
                "triplet feasibility requires P >= 2 and K >= 2",
            ));
        }
        if self.t == 0 {
            return Err(Error::config("frames per sequence must be positive"));
        }
        Ok(())
    }
}

/// A dataset with every sequence normalized and resident in memory,
/// grouped by subject for sampling.
#[derive(Debug, Clone)]
pub struct InMemoryDataset {
    pub sequences: Vec<SilhouetteSequence>,
    by_subject: BTreeMap<u32, Vec<usize>>,
    /// Sequences dropped because no frame survived normalization.
    pub dropped: usize,
}

impl InMemoryDataset {
    /// Load and normalize every sequence of an index.
    pub fn load(index: &DatasetIndex) -> Result<InMemoryDataset> {
        let mut sequences = Vec::with_capacity(index.len());
        let mut dropped = 0;
        for entry in &index.sequences {
            match entry.load_normalized()? {
                Some(seq) => sequences.push(seq),
                None => dropped += 1,
            }
        }
        let mut by_subject: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, seq) in sequences.iter().enumerate() {
            by_subject.entry(seq.key.subject).or_default().push(i);
        }
        Ok(InMemoryDataset {
            sequences,
            by_subject,
            dropped,
        })
    }

    pub fn subjects(&self) -> Vec<u32> {
        self.by_subject.keys().copied().collect()
    }
}

/// Extract a T-frame window: a random contiguous window when the sequence
/// is long enough, else the whole sequence repeated cyclically from frame 0.
fn cut_window(seq: &SilhouetteSequence, t: usize, rng: &mut impl Rng) -> SilhouetteSequence {
    let frames = &seq.frames;
    let plane = frames.h * frames.w;
    let start = if frames.t > t {
        rng.random_range(0..=frames.t - t)
    } else {
        0
    };
    let mut data = Vec::with_capacity(t * plane);
    for i in 0..t {
        let src = (start + i) % frames.t;
        data.extend_from_slice(frames.frame(src));
    }
    SilhouetteSequence {
        key: seq.key,
        frames: super::FrameStack {
            t,
            h: frames.h,
            w: frames.w,
            data,
        },
    }
}

/// Draw a P x K batch: P distinct subjects uniformly, K sequences each
/// (with replacement only when a subject has fewer than K), every sequence
/// cut to T frames. Reproducible given the rng state.
pub fn pk_sample(
    dataset: &InMemoryDataset,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<SilhouetteSequence>> {
    cfg.validate()?;
    let subjects = dataset.subjects();
    if subjects.len() < cfg.p {
        return Err(Error::Sampler(format!(
            "need {} subjects with sequences, found {}",
            cfg.p,
            subjects.len()
        )));
    }
    let mut chosen = subjects;
    chosen.shuffle(rng);
    chosen.truncate(cfg.p);

    let mut batch = Vec::with_capacity(cfg.p * cfg.k);
    for subject in chosen {
        let pool = &dataset.by_subject[&subject];
        let picks: Vec<usize> = if pool.len() >= cfg.k {
            let mut shuffled = pool.clone();
            shuffled.shuffle(rng);
            shuffled.truncate(cfg.k);
            shuffled
        } else {
            (0..cfg.k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        };
        for i in picks {
            batch.push(cut_window(&dataset.sequences[i], cfg.t, rng));
        }
    }
    Ok(batch)
}
