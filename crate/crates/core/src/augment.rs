//! Stochastic observation transformations applied independently per view:
//! a 1-D random crop-and-resample over rays and brightness/contrast jitter
//! over the color channels. The depth channel is cropped (geometry) but
//! never jittered (not a color).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sim::Observation;

pub const COLOR_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub crop_min_scale: f64,
    pub jitter_strength: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            crop_min_scale: 0.8,
            jitter_strength: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..AugmentConfig::default()
        }
    }
}

/// Crop a contiguous window of width `round(s * W)` with `s ~ U[min_scale, 1]`
/// and linearly resample it back to width W. The same window applies to all
/// channels of the strip.
///
/// `strip` is a flat `channels x width` slice (channel-major).
pub fn random_crop_strip(
    strip: &[f32],
    channels: usize,
    width: usize,
    min_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    debug_assert!(width >= 4, "crop needs at least 4 rays");
    let scale = rng.gen_range(min_scale..=1.0);
    let crop_w = ((scale * width as f64).round() as usize).clamp(1, width);
    // draw the offset unconditionally to keep stream alignment across scales
    let offset = rng.gen_range(0..=(width - crop_w));
    if crop_w == width {
        return strip.to_vec();
    }
    let mut out = vec![0.0f32; channels * width];
    let ratio = crop_w as f64 / width as f64;
    for ch in 0..channels {
        let src = &strip[ch * width..(ch + 1) * width];
        let dst = &mut out[ch * width..(ch + 1) * width];
        for (j, value) in dst.iter_mut().enumerate() {
            // align-corners=false sampling position inside the window
            let p = offset as f64 + (j as f64 + 0.5) * ratio - 0.5;
            let p = p.clamp(offset as f64, (offset + crop_w - 1) as f64);
            let lo = p.floor() as usize;
            let hi = (lo + 1).min(offset + crop_w - 1);
            let frac = (p - lo as f64) as f32;
            *value = src[lo] * (1.0 - frac) + src[hi] * frac;
        }
    }
    out
}

/// Brightness then contrast about the post-brightness mean, color channels
/// only, clamped to [0, 1]. Factors drawn from `U[1-strength, 1+strength]`.
pub fn color_jitter_strip(
    strip: &[f32],
    channels: usize,
    width: usize,
    strength: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let brightness = rng.gen_range(1.0 - strength..=1.0 + strength) as f32;
    let contrast = rng.gen_range(1.0 - strength..=1.0 + strength) as f32;
    let mut out = strip.to_vec();
    let color = channels.min(COLOR_CHANNELS);
    let n = (color * width) as f32;
    let mut mean = 0.0f32;
    for ch in 0..color {
        for j in 0..width {
            let v = strip[ch * width + j] * brightness;
            out[ch * width + j] = v;
            mean += v;
        }
    }
    mean /= n;
    for ch in 0..color {
        for j in 0..width {
            let v = &mut out[ch * width + j];
            *v = (contrast * (*v - mean) + mean).clamp(0.0, 1.0);
        }
    }
    out
}

/// Apply crop then jitter to each view with independently sampled
/// parameters. A disabled config returns the input unchanged.
pub fn augment_observation(
    obs: &Observation,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Observation {
    if !cfg.enabled {
        return obs.clone();
    }
    let mut out = obs.clone();
    for k in 0..obs.views {
        let cropped = random_crop_strip(
            obs.view_strip(k),
            obs.channels,
            obs.rays,
            cfg.crop_min_scale,
            rng,
        );
        let jittered =
            color_jitter_strip(&cropped, obs.channels, obs.rays, cfg.jitter_strength, rng);
        out.view_strip_mut(k).copy_from_slice(&jittered);
    }
    out
}
