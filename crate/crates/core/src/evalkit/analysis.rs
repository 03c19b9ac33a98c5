//! Frequency and noise-residual views of images.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::image::{ImageShape, ImageTensor};

/// Complex 2-D DFT of a single plane, row-major.
pub fn dft2(plane: &[f32], height: usize, width: usize) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(width);
    for row in buf.chunks_mut(width) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(height);
    let mut col = vec![Complex::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            col[y] = buf[y * width + x];
        }
        col_fft.process(&mut col);
        for y in 0..height {
            buf[y * width + x] = col[y];
        }
    }
    buf
}

/// log(1 + |F|) of the channel-averaged image, with DC moved to the center.
pub fn fft_spectrum(img: &ImageTensor) -> ImageTensor {
    let gray = img.to_gray();
    let (h, w) = (gray.height(), gray.width());
    let f = dft2(gray.data(), h, w);
    ImageTensor::from_fn(ImageShape::new(1, h, w), |_, y, x| {
        let sy = (y + h - h / 2) % h;
        let sx = (x + w - w / 2) % w;
        f[sy * w + sx].norm().ln_1p() as f32
    })
}

fn median9(mut v: [f32; 9]) -> f32 {
    v.sort_by(f32::total_cmp);
    v[4]
}

/// High-pass residual img − median3×3(img), per channel, replicate borders.
pub fn noise_pattern(img: &ImageTensor) -> ImageTensor {
    let (h, w) = (img.height() as i64, img.width() as i64);
    let mut out = img.clone();
    for c in 0..img.channels() {
        let src = img.plane(c);
        let at = |y: i64, x: i64| src[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut win = [0.0f32; 9];
                for (k, v) in win.iter_mut().enumerate() {
                    *v = at(y + k as i64 / 3 - 1, x + k as i64 % 3 - 1);
                }
                dst[(y * w + x) as usize] = at(y, x) - median9(win);
            }
        }
    }
    out
}

/// Affine map of the value range onto [−1, 1] for display; flat images map to 0.
pub fn normalize_for_export(img: &ImageTensor) -> ImageTensor {
    let (lo, hi) = (img.min(), img.max());
    if hi - lo <= f32::EPSILON {
        return ImageTensor::zeros(img.shape());
    }
    img.map(|v| 2.0 * (v - lo) / (hi - lo) - 1.0)
}
