use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::frame::{DepthFrame, MaskFrame};

/// Corruption applied to ground-truth depth inside the transparent mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Constant offset, meters.
    pub bias: f64,
    /// Pointwise standard deviation of the noise field, meters.
    pub sigma: f64,
    /// Gaussian smoothing std of the field, pixels. Zero gives white noise.
    pub smooth_radius: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            bias: 0.01,
            sigma: 0.04,
            smooth_radius: 8.0,
            dropout_rate: 0.0,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            bias: 0.0,
            sigma: 0.0,
            smooth_radius: 0.0,
            dropout_rate: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.sigma >= 0.0) || !self.bias.is_finite() {
            return Err(SynthError::InvalidNoise(format!("sigma {} bias {}", self.sigma, self.bias)));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(SynthError::InvalidNoise(format!("dropout_rate {}", self.dropout_rate)));
        }
        if !(self.smooth_radius >= 0.0) {
            return Err(SynthError::InvalidNoise(format!("smooth_radius {}", self.smooth_radius)));
        }
        Ok(())
    }
}

/// Zero-mean Gaussian field with pointwise std `sigma`.
fn noise_field(width: usize, height: usize, sigma: f64, radius: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if radius <= 0.0 {
        return (0..width * height)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
    }
    let half = (3.0 * radius).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let x = i as f64 - half as f64;
            (-0.5 * x * x / (radius * radius)).exp()
        })
        .collect();
    // White noise of unit variance filtered by a separable kernel k has
    // variance (Σ k²)²; rescale so the result has std `sigma`.
    let gain = sigma / kernel.iter().map(|k| k * k).sum::<f64>();

    let (pw, ph) = (width + 2 * half, height + 2 * half);
    let white: Vec<f64> = (0..pw * ph).map(|_| rng.sample(StandardNormal)).collect();
    let mut rows = vec![0.0; width * ph];
    for y in 0..ph {
        for x in 0..width {
            rows[y * width + x] = kernel.iter().enumerate().map(|(i, k)| k * white[y * pw + x + i]).sum();
        }
    }
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let s: f64 = kernel.iter().enumerate().map(|(i, k)| k * rows[(y + i) * width + x]).sum();
            out[y * width + x] = gain * s;
        }
    }
    out
}

/// Stand-in for a learned depth prediction: inside the mask, ground truth
/// plus bias and a correlated Gaussian field, with random dropout. Pixels
/// outside the mask are returned unchanged. Non-positive results become
/// invalid.
pub fn corrupt_depth(gt: &DepthFrame, mask: &MaskFrame, cfg: &NoiseConfig) -> Result<DepthFrame, SynthError> {
    cfg.validate()?;
    if (gt.width, gt.height) != (mask.width, mask.height) {
        return Err(SynthError::InvalidNoise(format!(
            "depth {}x{} and mask {}x{} differ",
            gt.width, gt.height, mask.width, mask.height
        )));
    }
    let (w, h) = (gt.width as usize, gt.height as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let field = if cfg.sigma > 0.0 {
        noise_field(w, h, cfg.sigma, cfg.smooth_radius, &mut rng)
    } else {
        vec![0.0; w * h]
    };
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_f42d_4c95_7f2d);

    let mut out = gt.clone();
    for (i, &noise) in field.iter().enumerate() {
        let dropped = cfg.dropout_rate > 0.0 && drop_rng.random_bool(cfg.dropout_rate);
        if !mask.data[i] || !gt.valid[i] {
            continue;
        }
        let d = gt.depth[i] + cfg.bias + noise;
        if dropped || !(d > 0.0) {
            out.depth[i] = 0.0;
            out.valid[i] = false;
        } else {
            out.depth[i] = d;
        }
    }
    Ok(out)
}
