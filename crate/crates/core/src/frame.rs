//! Per-view raster data: depth, transparency masks and grayscale images.
//!
//! All rasters are row-major with index `v * width + u`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("buffer length {len} does not match {width}x{height}")]
    LengthMismatch { width: u32, height: u32, len: usize },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("intensity {0} at index {1} outside [0, 1]")]
    IntensityRange(f64, usize),
}

fn check_len(width: u32, height: u32, len: usize) -> Result<(), FrameError> {
    if len != width as usize * height as usize {
        return Err(FrameError::LengthMismatch { width, height, len });
    }
    Ok(())
}

/// Metric z-depth with a validity flag per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthFrame {
    pub fn new(width: u32, height: u32, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self, FrameError> {
        check_len(width, height, depth.len())?;
        check_len(width, height, valid.len())?;
        let mut f = Self {
            width,
            height,
            depth,
            valid,
        };
        f.normalize();
        Ok(f)
    }

    pub fn invalid(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            depth: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    /// Builds a frame where every positive finite value is valid.
    pub fn from_depths(width: u32, height: u32, depth: Vec<f64>) -> Result<Self, FrameError> {
        let valid = depth.iter().map(|d| *d > 0.0 && d.is_finite()).collect();
        Self::new(width, height, depth, valid)
    }

    /// Invalid pixels and non-positive depths are forced to `(0, false)`.
    fn normalize(&mut self) {
        for (d, ok) in self.depth.iter_mut().zip(self.valid.iter_mut()) {
            if !*ok || !(*d > 0.0) || !d.is_finite() {
                *ok = false;
                *d = 0.0;
            }
        }
    }

    #[inline]
    pub fn index(&self, u: u32, v: u32) -> usize {
        v as usize * self.width as usize + u as usize
    }

    /// Depth at an integer pixel, `None` when invalid or out of bounds.
    pub fn get(&self, u: i64, v: i64) -> Option<f64> {
        if u < 0 || v < 0 || u >= self.width as i64 || v >= self.height as i64 {
            return None;
        }
        let i = self.index(u as u32, v as u32);
        self.valid[i].then_some(self.depth[i])
    }

    /// Depth at the pixel nearest to a continuous position.
    pub fn get_nearest(&self, u: f64, v: f64) -> Option<f64> {
        self.get(u.round() as i64, v.round() as i64)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Binary transparency mask (`true` = transparent).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskFrame {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl MaskFrame {
    pub fn new(width: u32, height: u32, data: Vec<bool>) -> Result<Self, FrameError> {
        check_len(width, height, data.len())?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![true; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> bool {
        self.data[v as usize * self.width as usize + u as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, value: bool) {
        self.data[v as usize * self.width as usize + u as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub intensity: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, intensity: Vec<f32>) -> Result<Self, FrameError> {
        check_len(width, height, intensity.len())?;
        if let Some((i, v)) = intensity
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0 && **v <= 1.0))
        {
            return Err(FrameError::IntensityRange(*v as f64, i));
        }
        Ok(Self {
            width,
            height,
            intensity,
        })
    }

    /// Luminance conversion from interleaved 8-bit RGB.
    pub fn from_rgb8(width: u32, height: u32, rgb: &[u8]) -> Result<Self, FrameError> {
        check_len(width, height, rgb.len() / 3)?;
        let intensity = rgb
            .chunks_exact(3)
            .map(|c| {
                let y = 0.299 * c[0] as f32 + 0.587 * c[1] as f32 + 0.114 * c[2] as f32;
                (y / 255.0).clamp(0.0, 1.0)
            })
            .collect();
        Ok(Self {
            width,
            height,
            intensity,
        })
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> f32 {
        self.intensity[v as usize * self.width as usize + u as usize]
    }

    pub fn same_size(&self, other: &GrayImage) -> Result<(), FrameError> {
        if self.width != other.width || self.height != other.height {
            return Err(FrameError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }
}
