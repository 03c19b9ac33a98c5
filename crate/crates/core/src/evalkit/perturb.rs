//! Test-time degradations: Gaussian blur and quantization-only JPEG.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Perturbation {
    Identity,
    Blur { sigma: f64 },
    Jpeg { quality: u8 },
}

impl Perturbation {
    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        match *self {
            Perturbation::Identity => Ok(img.clone()),
            Perturbation::Blur { sigma } => gaussian_blur(img, sigma),
            Perturbation::Jpeg { quality } => jpeg_compress(img, quality),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Perturbation::Identity)
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::Identity => f.write_str("none"),
            Perturbation::Blur { sigma } => write!(f, "blur{sigma}"),
            Perturbation::Jpeg { quality } => write!(f, "jpeg{quality}"),
        }
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    /// Accepts `none`, `blur<sigma>` and `jpeg<quality>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("unknown perturbation {s:?}"));
        if s == "none" || s == "identity" {
            Ok(Perturbation::Identity)
        } else if let Some(v) = s.strip_prefix("blur") {
            let sigma: f64 = v.parse().map_err(|_| bad())?;
            ensure!(sigma >= 0.0, "blur sigma must be >= 0");
            Ok(Perturbation::Blur { sigma })
        } else if let Some(v) = s.strip_prefix("jpeg") {
            let quality: u8 = v.parse().map_err(|_| bad())?;
            ensure!((1..=100).contains(&quality), "jpeg quality must be in [1, 100]");
            Ok(Perturbation::Jpeg { quality })
        } else {
            Err(bad())
        }
    }
}

/// Normalized discrete Gaussian with radius ⌈3σ⌉.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Mirror index into [0, n): … 1 0 | 0 1 … n−1 | n−1 n−2 …
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

fn convolve_line(src: &[f64], kernel: &[f64], dst: &mut [f64]) {
    let r = (kernel.len() / 2) as i64;
    for (i, out) in dst.iter_mut().enumerate() {
        *out = kernel
            .iter()
            .enumerate()
            .map(|(k, w)| w * src[reflect(i as i64 + k as i64 - r, src.len())])
            .sum();
    }
}

/// Separable Gaussian blur with symmetric reflection at the borders.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    ensure!(
        sigma >= 0.0 && sigma.is_finite(),
        "blur sigma must be >= 0, got {sigma}"
    );
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for c in 0..img.channels() {
        let plane: Vec<f64> = img.plane(c).iter().map(|&v| v as f64).collect();
        let mut rows = vec![0.0; h * w];
        for y in 0..h {
            convolve_line(&plane[y * w..(y + 1) * w], &kernel, &mut rows[y * w..(y + 1) * w]);
        }
        let mut col = vec![0.0; h];
        let mut col_out = vec![0.0; h];
        let dst = out.plane_mut(c);
        for x in 0..w {
            for y in 0..h {
                col[y] = rows[y * w + x];
            }
            convolve_line(&col, &kernel, &mut col_out);
            for y in 0..h {
                dst[y * w + x] = col_out[y] as f32;
            }
        }
    }
    Ok(out)
}

/// Standard JPEG luminance quantization table (row-major, 8×8).
pub const LUMINANCE_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance table scaled for `quality` in [1, 100].
pub fn quantization_table(quality: u8) -> Result<[u16; 64]> {
    ensure!(
        (1..=100).contains(&quality),
        "jpeg quality must be in [1, 100], got {quality}"
    );
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    Ok(LUMINANCE_TABLE.map(|base| ((base as u32 * scale + 50) / 100).clamp(1, 255) as u16))
}

/// Orthonormal 8-point DCT-II basis: basis[u][x].
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let cu = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / 16.0).cos();
        }
    }
    b
}

fn to_byte(v: f64) -> f64 {
    v.round().clamp(0.0, 255.0)
}

/// Quantization-only JPEG round trip, applied to each channel independently.
///
/// Pixels map from [−1, 1] to 8-bit levels, pass through a level-shifted 8×8
/// DCT, quantization with the scaled luminance table, dequantization and the
/// inverse DCT, and are rounded back to 8-bit levels. Partial edge blocks are
/// padded by replicating the last row/column.
pub fn jpeg_compress(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let table = quantization_table(quality)?;
    let basis = dct_basis();
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for c in 0..img.channels() {
        let src = img.plane(c);
        let level = |y: usize, x: usize| to_byte((src[y.min(h - 1) * w + x.min(w - 1)] as f64 + 1.0) * 127.5);
        let dst = out.plane_mut(c);
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [[0.0f64; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = level(by + y, bx + x) - 128.0;
                    }
                }
                let mut coef = [[0.0f64; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for y in 0..8 {
                            for x in 0..8 {
                                s += basis[u][y] * basis[v][x] * block[y][x];
                            }
                        }
                        let q = table[u * 8 + v] as f64;
                        coef[u][v] = (s / q).round() * q;
                    }
                }
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        let mut s = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                s += basis[u][y] * basis[v][x] * coef[u][v];
                            }
                        }
                        dst[(by + y) * w + bx + x] = (to_byte(s + 128.0) / 127.5 - 1.0) as f32;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageShape;

    fn textured() -> ImageTensor {
        ImageTensor::from_fn(ImageShape::new(2, 19, 21), |c, y, x| {
            let (y, x) = (y as f32, x as f32);
            (0.6 * (0.9 * x + 0.4 * c as f32).sin() * (0.5 * y).cos() + 0.3 * ((x * y) * 0.37).sin()).clamp(-1.0, 1.0)
        })
    }

    #[test]
    fn blur_constant_and_zero_sigma() {
        let c = ImageTensor::filled(ImageShape::square(1, 9), 0.37);
        assert!(gaussian_blur(&c, 2.0).unwrap().max_abs_diff(&c) < 1e-6);
        let t = textured();
        assert_eq!(gaussian_blur(&t, 0.0).unwrap(), t);
        assert!(gaussian_blur(&t, -1.0).is_err());
    }

    #[test]
    fn blur_impulse_center_matches_kernel_oracle() {
        let sigma = 1.0f64;
        // Independent oracle: weights exp(-k²/2) over k = -3..=3, normalized.
        let w: Vec<f64> = (-3i32..=3).map(|k| (-(k * k) as f64 / 2.0).exp()).collect();
        let center_1d = w[3] / w.iter().sum::<f64>();
        let mut img = ImageTensor::zeros(ImageShape::square(1, 15));
        img.set(0, 7, 7, 1.0);
        let out = gaussian_blur(&img, sigma).unwrap();
        assert!((out.get(0, 7, 7) as f64 - center_1d * center_1d).abs() < 1e-6);
        assert_eq!(gaussian_kernel(1.0).len(), 7);
    }

    #[test]
    fn blur_preserves_mean() {
        let t = textured();
        for sigma in [0.5, 1.0, 2.0, 3.0, 8.0] {
            let b = gaussian_blur(&t, sigma).unwrap();
            assert!((b.mean() - t.mean()).abs() < 1e-6, "sigma {sigma}");
        }
    }

    #[test]
    fn quality_50_is_base_table() {
        assert_eq!(quantization_table(50).unwrap(), LUMINANCE_TABLE);
        assert!(quantization_table(100).unwrap().iter().all(|&v| v == 1));
        assert_eq!(quantization_table(1).unwrap()[0], 255);
        // q = 25: scale 200, 16 → ⌊(3200 + 50)/100⌋ = 32.
        assert_eq!(quantization_table(25).unwrap()[0], 32);
        assert!(quantization_table(0).is_err());
        assert!(quantization_table(101).is_err());
    }

    #[test]
    fn dct_is_orthonormal() {
        let b = dct_basis();
        for u in 0..8 {
            for v in 0..8 {
                let dot: f64 = (0..8).map(|x| b[u][x] * b[v][x]).sum();
                assert!((dot - if u == v { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mid_gray_round_trips_within_one_level() {
        // 0 maps to 127.5, which rounds to level 128; a flat block has only a
        // zero DC term after the level shift, so 128 survives exactly.
        let g = ImageTensor::zeros(ImageShape::new(1, 13, 10));
        for q in [1, 30, 65, 100] {
            let out = jpeg_compress(&g, q).unwrap();
            assert!(out.max_abs_diff(&g) as f64 <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn distortion_is_monotone_and_settles() {
        let t = textured();
        let mse = |q| jpeg_compress(&t, q).unwrap().mse(&t);
        assert!(mse(30) >= mse(65));
        assert!(mse(65) >= mse(95));
        for q in [30, 65] {
            let once = jpeg_compress(&t, q).unwrap();
            let twice = jpeg_compress(&once, q).unwrap();
            assert!(twice.mse(&once) <= once.mse(&t));
        }
        assert!(jpeg_compress(&t, 0).is_err());
    }

    #[test]
    fn perturbation_names_round_trip() {
        for p in [
            Perturbation::Identity,
            Perturbation::Blur { sigma: 1.0 },
            Perturbation::Blur { sigma: 2.5 },
            Perturbation::Jpeg { quality: 65 },
        ] {
            assert_eq!(p.to_string().parse::<Perturbation>().unwrap(), p);
        }
        assert!("jpeg0".parse::<Perturbation>().is_err());
        assert!("sharpen".parse::<Perturbation>().is_err());
    }
}
