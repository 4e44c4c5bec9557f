//! Silhouette normalization to 64 x 44.
//!
//! Per frame: crop to the vertical span of the foreground, center
//! horizontally on the foreground centroid (window origin rounded to a
//! whole pixel so integer translations cancel exactly), pad or crop the
//! width to preserve aspect, and resample bilinearly. Frames without
//! foreground are dropped.

use super::FrameStack;

pub const NORM_H: usize = 64;
pub const NORM_W: usize = 44;

const FG: f32 = 0.5;

/// Normalize every frame of a stack; empty frames are dropped, so the
/// output may hold fewer frames (possibly zero).
pub fn normalize_frames(raw: &FrameStack) -> FrameStack {
    let mut out = FrameStack {
        t: 0,
        h: NORM_H,
        w: NORM_W,
        data: Vec::new(),
    };
    for t in 0..raw.t {
        if let Some(frame) = normalize_frame(raw.frame(t), raw.h, raw.w) {
            out.t += 1;
            out.data.extend_from_slice(&frame);
        }
    }
    out
}

/// Normalize a single `h x w` frame, or None when it has no foreground.
pub fn normalize_frame(frame: &[f32], h: usize, w: usize) -> Option<Vec<f32>> {
    debug_assert_eq!(frame.len(), h * w);
    let mut r0 = None;
    let mut r1 = 0usize;
    let mut cx_sum = 0.0f64;
    let mut count = 0usize;
    for y in 0..h {
        let row = &frame[y * w..(y + 1) * w];
        let mut any = false;
        for (x, &v) in row.iter().enumerate() {
            if v >= FG {
                any = true;
                cx_sum += x as f64;
                count += 1;
            }
        }
        if any {
            if r0.is_none() {
                r0 = Some(y);
            }
            r1 = y;
        }
    }
    let r0 = r0?;
    let hc = (r1 - r0 + 1) as f64;
    let cx = cx_sum / count as f64;
    // Source window width preserving the 64:44 aspect, origin on a whole
    // pixel so that integer shifts of the input translate the window
    // exactly.
    let wc = hc * NORM_W as f64 / NORM_H as f64;
    // Ties-to-even keeps symmetric silhouettes (centroid on a half-pixel)
    // from drifting a full pixel between passes.
    let origin = (cx - wc / 2.0).round_ties_even();

    let mut out = vec![0.0f32; NORM_H * NORM_W];
    for i in 0..NORM_H {
        let sy = r0 as f64 + (i as f64 + 0.5) * hc / NORM_H as f64 - 0.5;
        for j in 0..NORM_W {
            let sx = origin + (j as f64 + 0.5) * wc / NORM_W as f64 - 0.5;
            out[i * NORM_W + j] = bilinear(frame, h, w, sy, sx);
        }
    }
    Some(out)
}

/// Bilinear sample with zero padding outside the frame.
fn bilinear(frame: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = (y - y0) as f32;
    let fx = (x - x0) as f32;
    let sample = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 {
            return 0.0;
        }
        let (yy, xx) = (yy as usize, xx as usize);
        if yy >= h || xx >= w {
            0.0
        } else {
            frame[yy * w + xx]
        }
    };
    let v00 = sample(y0, x0);
    let v01 = sample(y0, x0 + 1.0);
    let v10 = sample(y0 + 1.0, x0);
    let v11 = sample(y0 + 1.0, x0 + 1.0);
    v00 * (1.0 - fy) * (1.0 - fx)
        + v01 * (1.0 - fy) * fx
        + v10 * fy * (1.0 - fx)
        + v11 * fy * fx
}
