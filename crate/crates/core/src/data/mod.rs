//! Silhouette ingestion, normalization, synthesis, and batch sampling.
//!
//! On-disk datasets follow the CASIA-B directory convention
//! `root/<subject>/<condition>-<index>/<view>/<frame>.png` with 8-bit
//! grayscale PNGs; synthetic datasets export to the same convention so both
//! paths share one ingestion code path.

mod normalize;
mod sampler;
mod synth;

pub use normalize::{normalize_frames, NORM_H, NORM_W};
pub use sampler::{pk_sample, InMemoryDataset, SamplerConfig};
pub use synth::{synth_generate, SynthConfig};

use crate::error::{Error, Result};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// CASIA-B walking conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    Nm,
    Bg,
    Cl,
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Nm => "nm",
            Condition::Bg => "bg",
            Condition::Cl => "cl",
        }
    }

    pub fn parse(s: &str) -> Option<Condition> {
        match s.to_ascii_lowercase().as_str() {
            "nm" => Some(Condition::Nm),
            "bg" => Some(Condition::Bg),
            "cl" => Some(Condition::Cl),
            _ => None,
        }
    }

    /// Stable numeric tag used in binary exports.
    pub fn tag(&self) -> u32 {
        match self {
            Condition::Nm => 0,
            Condition::Bg => 1,
            Condition::Cl => 2,
        }
    }
}

/// Identity of one recording: subject, condition with its index, and view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SeqKey {
    pub subject: u32,
    pub condition: Condition,
    pub cond_index: u32,
    pub view: u32,
}

/// A stack of same-sized frames with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Row-major `t * h * w`.
    pub data: Vec<f32>,
}

impl FrameStack {
    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.h * self.w..(i + 1) * self.h * self.w]
    }
}

/// One subject/condition/view recording with its frames loaded.
#[derive(Debug, Clone)]
pub struct SilhouetteSequence {
    pub key: SeqKey,
    pub frames: FrameStack,
}

#[derive(Debug, Clone)]
enum SeqSource {
    Disk { files: Vec<PathBuf> },
    Memory { frames: Arc<FrameStack> },
}

/// An indexed sequence; frames are lazily loadable for disk-backed entries.
#[derive(Debug, Clone)]
pub struct SequenceEntry {
    pub key: SeqKey,
    pub frame_count: usize,
    source: SeqSource,
}

impl SequenceEntry {
    pub fn in_memory(key: SeqKey, frames: FrameStack) -> SequenceEntry {
        SequenceEntry {
            key,
            frame_count: frames.t,
            source: SeqSource::Memory {
                frames: Arc::new(frames),
            },
        }
    }

    /// Load the raw (unnormalized) frames.
    pub fn load_raw(&self) -> Result<FrameStack> {
        match &self.source {
            SeqSource::Memory { frames } => Ok((**frames).clone()),
            SeqSource::Disk { files } => {
                let mut frames: Option<FrameStack> = None;
                for path in files {
                    let img = image::open(path)
                        .map_err(|e| {
                            Error::Format(format!("unreadable PNG {}: {e}", path.display()))
                        })?
                        .to_luma8();
                    let (w, h) = (img.width() as usize, img.height() as usize);
                    // Binary threshold at 0.5 of full scale.
                    let bits: Vec<f32> = img
                        .as_raw()
                        .iter()
                        .map(|&p| if p >= 128 { 1.0 } else { 0.0 })
                        .collect();
                    match &mut frames {
                        None => {
                            frames = Some(FrameStack {
                                t: 1,
                                h,
                                w,
                                data: bits,
                            })
                        }
                        Some(st) => {
                            if st.h != h || st.w != w {
                                return Err(Error::Format(format!(
                                    "frame size {w}x{h} differs within {}",
                                    path.display()
                                )));
                            }
                            st.t += 1;
                            st.data.extend_from_slice(&bits);
                        }
                    }
                }
                frames.ok_or_else(|| Error::Format("sequence with no frames".into()))
            }
        }
    }

    /// Load frames normalized to 64 x 44; frames without foreground are
    /// dropped. Returns None when nothing survives.
    pub fn load_normalized(&self) -> Result<Option<SilhouetteSequence>> {
        let raw = self.load_raw()?;
        let normalized = normalize_frames(&raw);
        if normalized.t == 0 {
            return Ok(None);
        }
        Ok(Some(SilhouetteSequence {
            key: self.key,
            frames: normalized,
        }))
    }
}

/// Index over a dataset's sequences plus ingestion warning count.
#[derive(Debug, Clone, Default)]
pub struct DatasetIndex {
    pub sequences: Vec<SequenceEntry>,
    pub warnings: usize,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<u32> {
        self.sequences.iter().map(|s| s.key.subject).collect()
    }

    /// CASIA-B protocol split: subjects 1-74 train, 75-124 test.
    pub fn casia_split(&self) -> (DatasetIndex, DatasetIndex) {
        let (train, test): (Vec<_>, Vec<_>) = self
            .sequences
            .iter()
            .cloned()
            .partition(|s| s.key.subject <= 74);
        (
            DatasetIndex {
                sequences: train,
                warnings: 0,
            },
            DatasetIndex {
                sequences: test,
                warnings: 0,
            },
        )
    }

    /// Keep only sequences passing the predicate.
    pub fn filter(&self, pred: impl Fn(&SeqKey) -> bool) -> DatasetIndex {
        DatasetIndex {
            sequences: self
                .sequences
                .iter()
                .filter(|s| pred(&s.key))
                .cloned()
                .collect(),
            warnings: 0,
        }
    }

    /// CASIA gallery/probe split: the first four NM sequences of each
    /// subject are gallery, everything else probe. Errors when a subject
    /// has no eligible gallery sequence.
    pub fn casia_gallery_probe(&self) -> Result<(DatasetIndex, DatasetIndex)> {
        let gallery = self.filter(|k| k.condition == Condition::Nm && k.cond_index <= 4);
        let probe = self.filter(|k| !(k.condition == Condition::Nm && k.cond_index <= 4));
        let gallery_subjects = gallery.subjects();
        for subject in self.subjects() {
            if !gallery_subjects.contains(&subject) {
                return Err(Error::Protocol(format!(
                    "subject {subject} has no NM sequence with index <= 4 to serve as gallery"
                )));
            }
        }
        Ok((gallery, probe))
    }
}

/// Scan a CASIA-B-layout directory tree into an index.
///
/// Malformed entry names and empty sequence directories are counted as
/// warnings and skipped, never fatal. An empty root yields an empty index.
pub fn load_casia_layout(root: &Path) -> Result<DatasetIndex> {
    let mut index = DatasetIndex::default();
    let mut subject_dirs = read_dir_sorted(root)?;
    subject_dirs.retain(|p| p.is_dir());
    for subject_dir in subject_dirs {
        let Some(subject) = dir_name(&subject_dir).and_then(|n| n.parse::<u32>().ok()) else {
            index.warnings += 1;
            continue;
        };
        for cond_dir in read_dir_sorted(&subject_dir)?.into_iter().filter(|p| p.is_dir()) {
            let parsed = dir_name(&cond_dir).and_then(|n| {
                let (c, i) = n.split_once('-')?;
                Some((Condition::parse(c)?, i.parse::<u32>().ok()?))
            });
            let Some((condition, cond_index)) = parsed else {
                index.warnings += 1;
                continue;
            };
            for view_dir in read_dir_sorted(&cond_dir)?.into_iter().filter(|p| p.is_dir()) {
                let Some(view) = dir_name(&view_dir).and_then(|n| n.parse::<u32>().ok()) else {
                    index.warnings += 1;
                    continue;
                };
                let files: Vec<PathBuf> = read_dir_sorted(&view_dir)?
                    .into_iter()
                    .filter(|p| {
                        p.extension().and_then(|e| e.to_str()) == Some("png") && p.is_file()
                    })
                    .collect();
                if files.is_empty() {
                    index.warnings += 1;
                    continue;
                }
                index.sequences.push(SequenceEntry {
                    key: SeqKey {
                        subject,
                        condition,
                        cond_index,
                        view,
                    },
                    frame_count: files.len(),
                    source: SeqSource::Disk { files },
                });
            }
        }
    }
    Ok(index)
}

fn read_dir_sorted(path: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

fn dir_name(path: &Path) -> Option<&str> {
    path.file_name().and_then(|n| n.to_str())
}

/// Write a frame stack as PNG frames under
/// `root/<subject>/<cond>-<idx>/<view>/NNNN.png`.
pub fn write_sequence_pngs(root: &Path, key: &SeqKey, frames: &FrameStack) -> Result<()> {
    let dir = root
        .join(format!("{:03}", key.subject))
        .join(format!("{}-{:02}", key.condition.as_str(), key.cond_index))
        .join(format!("{:03}", key.view));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for t in 0..frames.t {
        let frame = frames.frame(t);
        let buf: Vec<u8> = frame
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(frames.w as u32, frames.h as u32, buf)
            .expect("frame buffer matches dimensions");
        let path = dir.join(format!("{t:04}.png"));
        img.save(&path)
            .map_err(|e| Error::Format(format!("PNG write {}: {e}", path.display())))?;
    }
    Ok(())
}
