//! Procedural silhouette walker for desk-scale experiments.
//!
//! Each subject gets latent body proportions and stride dynamics drawn from
//! a seeded stream; sequences of the same subject share those latents and
//! differ only in phase and small amplitude jitter. Views apply a
//! horizontal scale plus shear, BG attaches a lateral blob, CL widens the
//! torso outline.

use super::{Condition, DatasetIndex, FrameStack, SeqKey, SequenceEntry};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

pub const RENDER_H: usize = 128;
pub const RENDER_W: usize = 88;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub subjects: u32,
    /// Sequences per (subject, condition, view) combination.
    pub seqs_per_combo: u32,
    pub views: Vec<u32>,
    pub conditions: Vec<Condition>,
    pub frames: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 {
            return Err(Error::config("synthesis needs at least one subject"));
        }
        if self.seqs_per_combo == 0 {
            return Err(Error::config("synthesis needs at least one sequence per combination"));
        }
        if self.views.is_empty() || self.conditions.is_empty() {
            return Err(Error::config("synthesis needs at least one view and condition"));
        }
        if self.frames < 8 {
            return Err(Error::config(format!(
                "{} frames cannot cover a gait cycle; need at least 8",
                self.frames
            )));
        }
        Ok(())
    }
}

/// Latent body parameters, fixed per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkerLatents {
    pub cycle_frames: f64,
    pub torso_w: f64,
    pub torso_h: f64,
    pub head_r: f64,
    pub leg_len: f64,
    pub leg_w: f64,
    pub arm_len: f64,
    pub arm_w: f64,
    pub leg_amp: f64,
    pub arm_amp: f64,
    pub lean: f64,
    pub bob: f64,
}

fn mix(seed: u64, tags: &[u64]) -> u64 {
    // splitmix64 chaining for independent sub-streams.
    let mut z = seed;
    for &t in tags {
        z = z.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(t);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
    }
    z
}

/// Subject latents are a pure function of (seed, subject).
pub fn subject_latents(seed: u64, subject: u32) -> WalkerLatents {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[1, subject as u64]));
    WalkerLatents {
        cycle_frames: rng.random_range(8.0..12.0),
        torso_w: rng.random_range(0.10..0.17),
        torso_h: rng.random_range(0.24..0.32),
        head_r: rng.random_range(0.050..0.075),
        leg_len: rng.random_range(0.30..0.38),
        leg_w: rng.random_range(0.030..0.050),
        arm_len: rng.random_range(0.20..0.27),
        arm_w: rng.random_range(0.020..0.032),
        leg_amp: rng.random_range(0.35..0.60),
        arm_amp: rng.random_range(0.20..0.45),
        lean: rng.random_range(-0.06..0.06),
        bob: rng.random_range(0.005..0.020),
    }
}

struct Capsule {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    r: f64,
}

impl Capsule {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (self.x1 - self.x0, self.y1 - self.y0);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((x - self.x0) * dx + (y - self.y0) * dy) / len2).clamp(0.0, 1.0)
        };
        let (px, py) = (self.x0 + t * dx, self.y0 + t * dy);
        (x - px) * (x - px) + (y - py) * (y - py) <= self.r * self.r
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        dx * dx + dy * dy <= 1.0
    }
}

/// Render one frame of a walker at phase `phi` (in cycles).
pub fn render_frame(
    latents: &WalkerLatents,
    phi: f64,
    view_deg: u32,
    condition: Condition,
    amp_jitter: f64,
) -> Vec<f32> {
    let h = RENDER_H as f64;
    let w = RENDER_W as f64;
    let cx = w / 2.0;
    let bob = latents.bob * h * (4.0 * PI * phi).sin();
    let head_cy = 0.14 * h + bob;
    let shoulder_y = 0.24 * h + bob;
    let torso_cy = 0.36 * h + bob;
    let hip_y = 0.52 * h + bob;

    let (torso_rx, torso_ry, leg_w) = match condition {
        Condition::Cl => (
            latents.torso_w * w * 1.30,
            latents.torso_h * h * 0.5 * 1.15,
            latents.leg_w * w * 1.35,
        ),
        _ => (
            latents.torso_w * w,
            latents.torso_h * h * 0.5,
            latents.leg_w * w,
        ),
    };

    let leg_amp = latents.leg_amp * amp_jitter;
    let arm_amp = latents.arm_amp * amp_jitter;
    let leg_len = latents.leg_len * h;
    let arm_len = latents.arm_len * h;

    let mut capsules = Vec::with_capacity(5);
    for (i, phase) in [(0usize, 0.0), (1usize, PI)] {
        let theta = leg_amp * (2.0 * PI * phi + phase).sin();
        capsules.push(Capsule {
            x0: cx,
            y0: hip_y,
            x1: cx + leg_len * theta.sin(),
            y1: hip_y + leg_len * theta.cos(),
            r: leg_w,
        });
        // Arm swings opposite its leg.
        let theta = arm_amp * (2.0 * PI * phi + phase + PI).sin();
        capsules.push(Capsule {
            x0: cx,
            y0: shoulder_y,
            x1: cx + arm_len * theta.sin(),
            y1: shoulder_y + arm_len * theta.cos(),
            r: latents.arm_w * w,
        });
        let _ = i;
    }
    // Neck keeps the head attached at every lean.
    capsules.push(Capsule {
        x0: cx + latents.lean * (head_cy - torso_cy),
        y0: head_cy,
        x1: cx,
        y1: torso_cy,
        r: latents.head_r * w * 0.6,
    });

    let mut ellipses = vec![
        Ellipse {
            cx: cx + latents.lean * (torso_cy - hip_y).abs() * 0.5,
            cy: torso_cy,
            rx: torso_rx,
            ry: torso_ry,
        },
        Ellipse {
            cx: cx + latents.lean * (head_cy - torso_cy),
            cy: head_cy,
            rx: latents.head_r * w,
            ry: latents.head_r * w * 1.15,
        },
    ];
    if condition == Condition::Bg {
        // Carried bag: lateral blob at hand height.
        ellipses.push(Ellipse {
            cx: cx + 0.16 * w,
            cy: 0.50 * h + bob,
            rx: 0.075 * w,
            ry: 0.055 * h,
        });
    }

    // View: inverse-map each pixel into body space before the inside test.
    let view = view_deg as f64 * PI / 180.0;
    let scale = 0.55 + 0.45 * view.cos().abs();
    let shear = 0.25 * view.sin();
    let y_mid = 0.5 * h;

    let mut frame = vec![0.0f32; RENDER_H * RENDER_W];
    for yi in 0..RENDER_H {
        let y = yi as f64 + 0.5;
        for xi in 0..RENDER_W {
            let x_out = xi as f64 + 0.5;
            let x = cx + ((x_out - cx) - shear * (y - y_mid)) / scale;
            let inside = ellipses.iter().any(|e| e.contains(x, y))
                || capsules.iter().any(|c| c.contains(x, y));
            if inside {
                frame[yi * RENDER_W + xi] = 1.0;
            }
        }
    }
    frame
}

/// Render a full sequence of `frames` frames.
pub fn render_sequence(
    latents: &WalkerLatents,
    frames: usize,
    view: u32,
    condition: Condition,
    phase0: f64,
    amp_jitter: f64,
) -> FrameStack {
    let mut data = Vec::with_capacity(frames * RENDER_H * RENDER_W);
    for f in 0..frames {
        let phi = phase0 + f as f64 / latents.cycle_frames;
        data.extend_from_slice(&render_frame(latents, phi, view, condition, amp_jitter));
    }
    FrameStack {
        t: frames,
        h: RENDER_H,
        w: RENDER_W,
        data,
    }
}

/// Generate a deterministic synthetic dataset held in memory.
pub fn synth_generate(cfg: &SynthConfig) -> Result<DatasetIndex> {
    cfg.validate()?;
    let mut index = DatasetIndex::default();
    for subject in 1..=cfg.subjects {
        let latents = subject_latents(cfg.seed, subject);
        for &condition in &cfg.conditions {
            for idx in 1..=cfg.seqs_per_combo {
                for &view in &cfg.views {
                    // Phase and jitter vary per sequence; latents do not.
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(
                        cfg.seed,
                        &[2, subject as u64, condition.tag() as u64, idx as u64, view as u64],
                    ));
                    let phase0 = rng.random_range(0.0..1.0);
                    let amp_jitter = rng.random_range(0.97..1.03);
                    let frames =
                        render_sequence(&latents, cfg.frames, view, condition, phase0, amp_jitter);
                    index.sequences.push(SequenceEntry::in_memory(
                        SeqKey {
                            subject,
                            condition,
                            cond_index: idx,
                            view,
                        },
                        frames,
                    ));
                }
            }
        }
    }
    Ok(index)
}
