//! Procedural deformable-shadow videos.
//!
//! A clip is a textured static background, a few dark rigid decoys that
//! slide slowly, and star-shaped shadow blobs whose centers drift and whose
//! radii are re-drawn every frame. Shadows darken whatever is under them
//! multiplicatively, so texture survives inside them; decoys replace it.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{stream_rng, DataError, Result, ShadowClip};
use crate::tensor::Tensor;

const CONTROL_POINTS: usize = 8;
const WAVES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub blobs: usize,
    /// 0 keeps every blob rigid and still; 1 is the strongest deformation.
    pub deform: f64,
    /// Fraction of light removed inside a shadow, in (0, 1).
    pub darkness: f64,
    /// Typical texture wavelength in pixels.
    pub texture_scale: f64,
    pub decoys: usize,
    /// Amplitude of independent per-pixel, per-frame noise.
    pub noise: f64,
}

impl SynthSpec {
    /// 64x64, 4 frames, two shadows and two decoys.
    pub fn desk(seed: u64) -> Self {
        SynthSpec {
            seed,
            t: 4,
            h: 64,
            w: 64,
            blobs: 2,
            deform: 0.6,
            darkness: 0.45,
            texture_scale: 10.0,
            decoys: 2,
            noise: 0.08,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DataError::Spec(msg));
        if self.t == 0 || self.h < 4 || self.w < 4 {
            return bad(format!(
                "degenerate dims t={} h={} w={}",
                self.t, self.h, self.w
            ));
        }
        if !(0.0..=1.0).contains(&self.deform) {
            return bad(format!("deform {} outside [0, 1]", self.deform));
        }
        if !(self.darkness > 0.0 && self.darkness < 1.0) {
            return bad(format!("darkness {} outside (0, 1)", self.darkness));
        }
        if !(self.texture_scale > 0.0 && self.texture_scale.is_finite()) {
            return bad(format!(
                "texture scale {} must be positive",
                self.texture_scale
            ));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 0.5]", self.noise));
        }
        Ok(())
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    vy: f64,
    vx: f64,
    radius: f64,
    factors: [f64; CONTROL_POINTS],
}

impl Blob {
    fn sample(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Blob {
        let side = h.min(w) as f64;
        let mut factors = [0.0; CONTROL_POINTS];
        for f in &mut factors {
            *f = rng.gen_range(0.75..1.25);
        }
        Blob {
            cy: rng.gen_range(0.2..0.8) * h as f64,
            cx: rng.gen_range(0.2..0.8) * w as f64,
            vy: rng.gen_range(-1.0..1.0) * 0.05 * side,
            vx: rng.gen_range(-1.0..1.0) * 0.05 * side,
            radius: rng.gen_range(0.1..0.2) * side,
            factors,
        }
    }

    /// Outline at frame `f`, as (center, per-control-point radius).
    fn at_frame(
        &self,
        f: usize,
        deform: f64,
        rng: &mut ChaCha8Rng,
    ) -> (f64, f64, [f64; CONTROL_POINTS]) {
        let mut radii = [0.0; CONTROL_POINTS];
        for (r, base) in radii.iter_mut().zip(&self.factors) {
            let jitter: f64 = rng.gen_range(-1.0..1.0);
            *r = self.radius * base * (1.0 + 0.45 * deform * jitter);
        }
        let step = f as f64 * deform;
        (self.cy + self.vy * step, self.cx + self.vx * step, radii)
    }
}

fn star_contains(cy: f64, cx: f64, radii: &[f64; CONTROL_POINTS], y: f64, x: f64) -> bool {
    let (dy, dx) = (y - cy, x - cx);
    let r = dy.hypot(dx);
    let u = (dx.atan2(dy) / (2.0 * PI)).rem_euclid(1.0) * CONTROL_POINTS as f64;
    let k = u.floor() as usize % CONTROL_POINTS;
    let frac = u - u.floor();
    let blend = 0.5 - 0.5 * (PI * frac).cos();
    let edge = radii[k] * (1.0 - blend) + radii[(k + 1) % CONTROL_POINTS] * blend;
    r <= edge
}

struct Decoy {
    cy: f64,
    cx: f64,
    vy: f64,
    vx: f64,
    half_h: f64,
    half_w: f64,
    level: f64,
}

fn background(spec: &SynthSpec) -> Vec<f64> {
    let mut rng = stream_rng(spec.seed, 0);
    let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            let angle = rng.gen_range(0.0..PI);
            let wavelength = spec.texture_scale * rng.gen_range(0.6..1.6);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = rng.gen_range(0.5..1.0);
            (angle, wavelength, phase, amp)
        })
        .collect();
    let base = rng.gen_range(0.55..0.7);
    let mut out = vec![0.0; spec.h * spec.w];
    for y in 0..spec.h {
        for x in 0..spec.w {
            let mut v = 0.0;
            for &(a, l, p, amp) in &waves {
                let proj = (x as f64) * a.cos() + (y as f64) * a.sin();
                v += amp * (2.0 * PI * proj / l + p).sin();
            }
            out[y * spec.w + x] = (base + 0.18 * v / WAVES as f64).clamp(0.15, 0.95);
        }
    }
    out
}

/// `(clip, unshadowed)`: the clip plus the same frames rendered without the
/// shadow layer (identical noise and decoys).
pub fn generate_layers(spec: &SynthSpec, clip_id: &str) -> Result<(ShadowClip, Tensor)> {
    spec.validate()?;
    let (t, h, w) = (spec.t, spec.h, spec.w);
    let bg = background(spec);

    let mut shape_rng = stream_rng(spec.seed, 1);
    let blobs: Vec<Blob> = (0..spec.blobs)
        .map(|_| Blob::sample(&mut shape_rng, h, w))
        .collect();

    let mut decoy_rng = stream_rng(spec.seed, 2);
    let side = h.min(w) as f64;
    let decoys: Vec<Decoy> = (0..spec.decoys)
        .map(|_| Decoy {
            cy: decoy_rng.gen_range(0.15..0.85) * h as f64,
            cx: decoy_rng.gen_range(0.15..0.85) * w as f64,
            vy: decoy_rng.gen_range(-1.0..1.0) * 0.02 * side,
            vx: decoy_rng.gen_range(-1.0..1.0) * 0.02 * side,
            half_h: decoy_rng.gen_range(0.05..0.12) * side,
            half_w: decoy_rng.gen_range(0.05..0.12) * side,
            level: decoy_rng.gen_range(0.25..0.4),
        })
        .collect();

    let mut deform_rng = stream_rng(spec.seed, 3);
    let mut noise_rng = stream_rng(spec.seed, 4);
    let mut frames = Vec::with_capacity(t * h * w);
    let mut lit_all = Vec::with_capacity(t * h * w);
    let mut masks = Vec::with_capacity(t * h * w);
    for f in 0..t {
        let outlines: Vec<_> = blobs
            .iter()
            .map(|b| b.at_frame(f, spec.deform, &mut deform_rng))
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut lit = bg[y * w + x];
                for d in &decoys {
                    let (cy, cx) = (d.cy + d.vy * f as f64, d.cx + d.vx * f as f64);
                    if (py - cy).abs() <= d.half_h && (px - cx).abs() <= d.half_w {
                        lit = d.level;
                    }
                }
                if spec.noise > 0.0 {
                    lit += noise_rng.gen_range(-spec.noise..spec.noise);
                }
                let lit = lit.clamp(0.02, 1.0);
                let inside = outlines
                    .iter()
                    .any(|(cy, cx, radii)| star_contains(*cy, *cx, radii, py, px));
                let value = if inside {
                    lit * (1.0 - spec.darkness)
                } else {
                    lit
                };
                // stored as f32 on disk; round here so files round-trip exactly
                frames.push(value as f32 as f64);
                lit_all.push(lit as f32 as f64);
                masks.push(inside as u8 as f64);
            }
        }
    }
    let shape = [t, h, w];
    let clip = ShadowClip::new(
        Tensor::new(shape, frames).expect("sized"),
        Tensor::new(shape, masks).expect("sized"),
        clip_id,
    )?;
    Ok((clip, Tensor::new(shape, lit_all).expect("sized")))
}

pub fn generate_clip(spec: &SynthSpec, clip_id: &str) -> Result<ShadowClip> {
    Ok(generate_layers(spec, clip_id)?.0)
}
