//! Coarse-to-fine dense flow from local quadratic polynomial expansion.
//!
//! Each neighbourhood is approximated by `f(x) ≈ xᵀAx + bᵀx + c` using a
//! Gaussian-weighted least-squares fit. A displacement `d` between two
//! signals changes the linear term by `-2Ad`, so `d` is recovered by a
//! windowed least-squares solve of `A d = -½ Δb`.

use nalgebra::{SMatrix, SVector, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FlowError, FlowField};
use crate::frame::GrayImage;

/// Regularizer added to the 2x2 determinant (intensities scaled to 0..255).
const DET_EPS: f64 = 1e-3;
/// Levels smaller than this on either side are skipped.
const MIN_LEVEL_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub levels: usize,
    /// Downsampling factor between consecutive pyramid levels.
    pub scale: f64,
    /// Side of the averaging window, pixels.
    pub window: usize,
    pub iterations: usize,
    /// Half-size of the polynomial-expansion neighbourhood.
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            levels: 4,
            scale: 0.5,
            window: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FlowParams {
    fn validate(&self) -> Result<(), FlowError> {
        if self.levels == 0
            || !(self.scale > 0.0 && self.scale < 1.0)
            || self.window == 0
            || self.iterations == 0
            || self.poly_n == 0
            || !(self.poly_sigma > 0.0)
        {
            return Err(FlowError::Params(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.data[y * self.w + x]
    }
}

/// Polynomial coefficients at one pixel: `b = (bx, by)`,
/// `A = [[axx, axy], [axy, ayy]]`.
#[derive(Clone, Copy, Default)]
struct Poly {
    bx: f32,
    by: f32,
    axx: f32,
    ayy: f32,
    axy: f32,
}

/// Estimates the flow carrying pixels of `a` onto `b`. All output vectors
/// are marked valid.
pub fn estimate_flow(a: &GrayImage, b: &GrayImage, params: &FlowParams) -> Result<FlowField, FlowError> {
    a.same_size(b)?;
    params.validate()?;
    let (w, h) = (a.width as usize, a.height as usize);
    let to_plane = |img: &GrayImage| Plane {
        w,
        h,
        data: img.intensity.iter().map(|v| v * 255.0).collect(),
    };
    let (pa, pb) = (to_plane(a), to_plane(b));
    let expansion = PolyExpansion::new(params.poly_n, params.poly_sigma);

    let mut level_sizes = Vec::new();
    for level in 0..params.levels {
        let s = params.scale.powi(level as i32);
        let lw = (w as f64 * s).round() as usize;
        let lh = (h as f64 * s).round() as usize;
        if level > 0 && (lw < MIN_LEVEL_SIZE || lh < MIN_LEVEL_SIZE) {
            break;
        }
        level_sizes.push((level, lw, lh));
    }

    let mut flow: Option<(usize, usize, Vec<Vector2<f32>>)> = None;
    for &(level, lw, lh) in level_sizes.iter().rev() {
        let s = params.scale.powi(level as i32);
        let (la, lb) = if level == 0 {
            (pa.clone(), pb.clone())
        } else {
            let sigma = (1.0 / s - 1.0) * 0.5;
            (
                resize(&gaussian_blur(&pa, sigma), lw, lh),
                resize(&gaussian_blur(&pb, sigma), lw, lh),
            )
        };
        let mut current = match flow.take() {
            None => vec![Vector2::zeros(); lw * lh],
            Some((pw, ph, prev)) => upsample_flow(&prev, pw, ph, lw, lh, (1.0 / params.scale) as f32),
        };
        let ra = expansion.apply(&la);
        let rb = expansion.apply(&lb);
        for _ in 0..params.iterations {
            let moments = update_matrices(&ra, &rb, &current, lw, lh);
            let smoothed = box_filter5(&moments, lw, lh, params.window);
            current = smoothed
                .par_iter()
                .map(|m| {
                    let [g11, g12, g22, h1, h2] = m.map(|v| v as f64);
                    let idet = 1.0 / (g11 * g22 - g12 * g12 + DET_EPS);
                    Vector2::new(
                        ((g22 * h1 - g12 * h2) * idet) as f32,
                        ((g11 * h2 - g12 * h1) * idet) as f32,
                    )
                })
                .collect();
        }
        flow = Some((lw, lh, current));
    }

    let (_, _, vectors) = flow.expect("at least one pyramid level");
    FlowField::new(
        a.width,
        a.height,
        vectors.into_iter().map(|v| v.cast::<f64>()).collect(),
        vec![true; w * h],
    )
}

struct PolyExpansion {
    n: isize,
    kernel: Vec<f64>,
    inverse: SMatrix<f64, 6, 6>,
}

impl PolyExpansion {
    fn new(n: usize, sigma: f64) -> Self {
        let n = n as isize;
        let mut kernel: Vec<f64> = (-n..=n)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|g| *g /= total);

        // Normal equations of the weighted fit over [1, x, y, x², y², xy].
        let mut normal = SMatrix::<f64, 6, 6>::zeros();
        for y in -n..=n {
            for x in -n..=n {
                let wgt = kernel[(x + n) as usize] * kernel[(y + n) as usize];
                let (xf, yf) = (x as f64, y as f64);
                let basis = SVector::<f64, 6>::from([1.0, xf, yf, xf * xf, yf * yf, xf * yf]);
                normal += basis * basis.transpose() * wgt;
            }
        }
        let inverse = normal.try_inverse().expect("polynomial basis is well conditioned");
        Self { n, kernel, inverse }
    }

    fn apply(&self, img: &Plane) -> Vec<Poly> {
        let (w, h, n) = (img.w, img.h, self.n);
        // Horizontal pass: Σ g(i) f, Σ g(i) i f, Σ g(i) i² f.
        let rows: Vec<[f64; 3]> = (0..h)
            .into_par_iter()
            .flat_map_iter(|y| {
                (0..w).map(move |x| {
                    let mut m = [0.0f64; 3];
                    for i in -n..=n {
                        let g = self.kernel[(i + n) as usize];
                        let f = img.at(x as isize + i, y as isize) as f64;
                        let fi = i as f64;
                        m[0] += g * f;
                        m[1] += g * fi * f;
                        m[2] += g * fi * fi * f;
                    }
                    m
                })
            })
            .collect();
        (0..h)
            .into_par_iter()
            .flat_map_iter(|y| {
                let rows = &rows;
                (0..w).map(move |x| {
                    let mut m = SVector::<f64, 6>::zeros();
                    for j in -n..=n {
                        let g = self.kernel[(j + n) as usize];
                        let yy = (y as isize + j).clamp(0, h as isize - 1) as usize;
                        let r = rows[yy * w + x];
                        let fj = j as f64;
                        m[0] += g * r[0];
                        m[1] += g * r[1];
                        m[2] += g * fj * r[0];
                        m[3] += g * r[2];
                        m[4] += g * fj * fj * r[0];
                        m[5] += g * fj * r[1];
                    }
                    let c = self.inverse * m;
                    Poly {
                        bx: c[1] as f32,
                        by: c[2] as f32,
                        axx: c[3] as f32,
                        ayy: c[4] as f32,
                        axy: (c[5] * 0.5) as f32,
                    }
                })
            })
            .collect()
    }
}

fn sample_poly(r: &[Poly], w: usize, h: usize, x: f32, y: f32) -> Option<Poly> {
    if !(x >= 0.0 && y >= 0.0 && x < (w - 1) as f32 && y < (h - 1) as f32) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f32, y - y0 as f32);
    let p00 = r[y0 * w + x0];
    let p10 = r[y0 * w + x0 + 1];
    let p01 = r[(y0 + 1) * w + x0];
    let p11 = r[(y0 + 1) * w + x0 + 1];
    let (w00, w10, w01, w11) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy);
    let mix = |f: fn(&Poly) -> f32| w00 * f(&p00) + w10 * f(&p10) + w01 * f(&p01) + w11 * f(&p11);
    Some(Poly {
        bx: mix(|p| p.bx),
        by: mix(|p| p.by),
        axx: mix(|p| p.axx),
        ayy: mix(|p| p.ayy),
        axy: mix(|p| p.axy),
    })
}

/// Per-pixel normal-equation terms `[G11, G12, G22, h1, h2]` of `A d = Δb`.
fn update_matrices(ra: &[Poly], rb: &[Poly], flow: &[Vector2<f32>], w: usize, h: usize) -> Vec<[f32; 5]> {
    (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).map(move |x| {
                let i = y * w + x;
                let p1 = ra[i];
                let d = flow[i];
                let (axx, ayy, axy, dbx, dby);
                match sample_poly(rb, w, h, x as f32 + d.x, y as f32 + d.y) {
                    Some(p2) => {
                        axx = 0.5 * (p1.axx + p2.axx);
                        ayy = 0.5 * (p1.ayy + p2.ayy);
                        axy = 0.5 * (p1.axy + p2.axy);
                        dbx = -0.5 * (p2.bx - p1.bx) + axx * d.x + axy * d.y;
                        dby = -0.5 * (p2.by - p1.by) + axy * d.x + ayy * d.y;
                    }
                    None => {
                        // Target left the image: keep the current estimate.
                        axx = p1.axx;
                        ayy = p1.ayy;
                        axy = p1.axy;
                        dbx = axx * d.x + axy * d.y;
                        dby = axy * d.x + ayy * d.y;
                    }
                }
                [
                    axx * axx + axy * axy,
                    axy * (axx + ayy),
                    axy * axy + ayy * ayy,
                    axx * dbx + axy * dby,
                    axy * dbx + ayy * dby,
                ]
            })
        })
        .collect()
}

/// Normalized box filter with replicated borders, applied per channel.
fn box_filter5(src: &[[f32; 5]], w: usize, h: usize, size: usize) -> Vec<[f32; 5]> {
    let r = (size / 2) as isize;
    let norm = 1.0 / (2 * r + 1) as f64;
    let horizontal: Vec<[f64; 5]> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let row = &src[y * w..(y + 1) * w];
            let mut acc = [0.0f64; 5];
            for i in -r..=r {
                let v = row[i.clamp(0, w as isize - 1) as usize];
                (0..5).for_each(|c| acc[c] += v[c] as f64);
            }
            let mut out = Vec::with_capacity(w);
            for x in 0..w as isize {
                out.push(acc.map(|a| a * norm));
                let add = row[(x + r + 1).clamp(0, w as isize - 1) as usize];
                let sub = row[(x - r).clamp(0, w as isize - 1) as usize];
                (0..5).for_each(|c| acc[c] += add[c] as f64 - sub[c] as f64);
            }
            out
        })
        .collect();
    let mut out = vec![[0.0f32; 5]; w * h];
    let columns: Vec<Vec<[f32; 5]>> = (0..w)
        .into_par_iter()
        .map(|x| {
            let at = |y: isize| horizontal[y.clamp(0, h as isize - 1) as usize * w + x];
            let mut acc = [0.0f64; 5];
            for j in -r..=r {
                let v = at(j);
                (0..5).for_each(|c| acc[c] += v[c]);
            }
            let mut col = Vec::with_capacity(h);
            for y in 0..h as isize {
                col.push(acc.map(|a| (a * norm) as f32));
                let add = at(y + r + 1);
                let sub = at(y - r);
                (0..5).for_each(|c| acc[c] += add[c] - sub[c]);
            }
            col
        })
        .collect();
    for (x, col) in columns.into_iter().enumerate() {
        for (y, v) in col.into_iter().enumerate() {
            out[y * w + x] = v;
        }
    }
    out
}

fn gaussian_blur(img: &Plane, sigma: f64) -> Plane {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let (w, h) = (img.w, img.h);
    let tmp: Vec<f32> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let k = &k;
            (0..w).map(move |x| {
                (-r..=r)
                    .map(|i| k[(i + r) as usize] * img.at(x as isize + i, y as isize) as f64)
                    .sum::<f64>() as f32
            })
        })
        .collect();
    let tmp = Plane { w, h, data: tmp };
    let data = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let (k, tmp) = (&k, &tmp);
            (0..w).map(move |x| {
                (-r..=r)
                    .map(|j| k[(j + r) as usize] * tmp.at(x as isize, y as isize + j) as f64)
                    .sum::<f64>() as f32
            })
        })
        .collect();
    Plane { w, h, data }
}

/// Bilinear resampling with pixel-center alignment.
fn resize(img: &Plane, nw: usize, nh: usize) -> Plane {
    let sx = img.w as f32 / nw as f32;
    let sy = img.h as f32 / nh as f32;
    let data = (0..nh)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..nw).map(move |x| {
                let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
                let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
                let (x0, y0) = (fx.floor() as isize, fy.floor() as isize);
                let (ax, ay) = (fx - x0 as f32, fy - y0 as f32);
                (1.0 - ax) * (1.0 - ay) * img.at(x0, y0)
                    + ax * (1.0 - ay) * img.at(x0 + 1, y0)
                    + (1.0 - ax) * ay * img.at(x0, y0 + 1)
                    + ax * ay * img.at(x0 + 1, y0 + 1)
            })
        })
        .collect();
    Plane { w: nw, h: nh, data }
}

fn upsample_flow(
    flow: &[Vector2<f32>],
    w: usize,
    h: usize,
    nw: usize,
    nh: usize,
    gain: f32,
) -> Vec<Vector2<f32>> {
    let channel = |c: usize| Plane {
        w,
        h,
        data: flow.iter().map(|v| v[c]).collect(),
    };
    let (fx, fy) = (resize(&channel(0), nw, nh), resize(&channel(1), nw, nh));
    fx.data
        .iter()
        .zip(&fy.data)
        .map(|(x, y)| Vector2::new(x * gain, y * gain))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Smooth random texture of size `w x h`.
    fn texture(w: usize, h: usize, seed: u64) -> Plane {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let noise = Plane {
            w,
            h,
            data: (0..w * h).map(|_| rng.random::<f32>()).collect(),
        };
        let blurred = gaussian_blur(&noise, 1.5);
        let (lo, hi) = blurred
            .data
            .iter()
            .fold((f32::MAX, f32::MIN), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        Plane {
            w,
            h,
            data: blurred.data.iter().map(|v| (v - lo) / (hi - lo)).collect(),
        }
    }

    fn crop(p: &Plane, x0: usize, y0: usize, w: usize, h: usize) -> GrayImage {
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            data.extend_from_slice(&p.data[(y0 + y) * p.w + x0..(y0 + y) * p.w + x0 + w]);
        }
        GrayImage::new(w as u32, h as u32, data).unwrap()
    }

    /// Mean flow error over pixels at least `margin` from the border.
    fn interior_error(f: &FlowField, truth: Vector2<f64>, margin: u32) -> f64 {
        let mut sum = 0.0;
        let mut n = 0;
        for v in margin..f.height - margin {
            for u in margin..f.width - margin {
                sum += (f.vectors[f.index(u, v)] - truth).norm();
                n += 1;
            }
        }
        sum / n as f64
    }

    #[test]
    fn zero_motion() {
        let t = texture(160, 120, 1);
        let a = crop(&t, 0, 0, 160, 120);
        let f = estimate_flow(&a, &a, &FlowParams::default()).unwrap();
        let max = f.vectors.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(max < 0.1, "max |flow| = {max}");
        assert_eq!(f.valid_count(), 160 * 120);
    }

    #[test]
    fn horizontal_shift() {
        let t = texture(200, 140, 2);
        // Content at x in `a` appears at x + 5 in `b`.
        let a = crop(&t, 10, 10, 160, 120);
        let b = crop(&t, 5, 10, 160, 120);
        let f = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
        let err = interior_error(&f, Vector2::new(5.0, 0.0), 20);
        assert!(err < 0.5, "mean endpoint error {err}");
    }

    #[test]
    fn vertical_shift() {
        let t = texture(200, 140, 3);
        let a = crop(&t, 10, 10, 160, 120);
        let b = crop(&t, 10, 7, 160, 120);
        let f = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
        let err = interior_error(&f, Vector2::new(0.0, 3.0), 20);
        assert!(err < 0.5, "mean endpoint error {err}");
    }

    #[test]
    fn dimension_mismatch() {
        let a = GrayImage::new(4, 4, vec![0.0; 16]).unwrap();
        let b = GrayImage::new(4, 5, vec![0.0; 20]).unwrap();
        assert!(estimate_flow(&a, &b, &FlowParams::default()).is_err());
    }

    #[test]
    fn polynomial_expansion_recovers_quadratic() {
        let (w, h) = (40, 30);
        let f = |x: f64, y: f64| 3.0 + 0.5 * x - 0.25 * y + 0.02 * x * x + 0.01 * y * y - 0.03 * x * y;
        let img = Plane {
            w,
            h,
            data: (0..w * h)
                .map(|i| f((i % w) as f64, (i / w) as f64) as f32)
                .collect(),
        };
        let r = PolyExpansion::new(5, 1.1).apply(&img);
        let (x, y) = (20usize, 15usize);
        let p = r[y * w + x];
        // Local coordinates are centered at (x, y).
        let (xf, yf) = (x as f64, y as f64);
        assert!((p.axx as f64 - 0.02).abs() < 1e-4);
        assert!((p.ayy as f64 - 0.01).abs() < 1e-4);
        assert!((p.axy as f64 + 0.015).abs() < 1e-4);
        assert!((p.bx as f64 - (0.5 + 0.04 * xf - 0.03 * yf)).abs() < 1e-3);
        assert!((p.by as f64 - (-0.25 + 0.02 * yf - 0.03 * xf)).abs() < 1e-3);
    }
}
