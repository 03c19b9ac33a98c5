//! Tensor files (`DTF1`) and 8-bit PGM/PNG export.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::image::{ImageShape, ImageTensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"DTF1";

/// magic | rank u32 | dims u32… | f32 LE data; images are stored as [C, H, W].
pub fn encode_tensor(img: &ImageTensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(20 + 4 * img.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&3u32.to_le_bytes());
    for d in img.shape().dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in img.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<ImageTensor, String> {
    let u32_at = |i: usize| -> std::result::Result<usize, String> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| "truncated header".to_string())
    };
    if bytes.get(..4) != Some(TENSOR_MAGIC.as_slice()) {
        return Err("bad magic, expected DTF1".into());
    }
    let rank = u32_at(4)?;
    if rank != 3 {
        return Err(format!("expected a rank-3 image tensor, got rank {rank}"));
    }
    let shape = ImageShape::new(u32_at(8)?, u32_at(12)?, u32_at(16)?);
    let body = &bytes[20..];
    if body.len() != 4 * shape.numel() {
        return Err(format!(
            "expected {} data bytes, found {}",
            4 * shape.numel(),
            body.len()
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ImageTensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: &Path, img: &ImageTensor) -> Result<()> {
    write_atomic(path, &encode_tensor(img))
}

pub fn read_tensor(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|m| Error::format(path, m))
}

/// Affine map of [lo, hi] onto 0..=255 (clamped), one byte per value.
pub fn to_bytes(img: &ImageTensor, lo: f32, hi: f32) -> Vec<u8> {
    img.data()
        .iter()
        .map(|&v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Channels laid side by side as one grayscale strip.
fn gray_strip(img: &ImageTensor, lo: f32, hi: f32) -> (usize, usize, Vec<u8>) {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let bytes = to_bytes(img, lo, hi);
    let mut out = vec![0u8; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let src = &bytes[(ch * h + y) * w..(ch * h + y + 1) * w];
            out[y * c * w + ch * w..y * c * w + (ch + 1) * w].copy_from_slice(src);
        }
    }
    (c * w, h, out)
}

/// Binary PGM (P5); multi-channel images are tiled horizontally.
pub fn write_pgm(path: &Path, img: &ImageTensor, lo: f32, hi: f32) -> Result<()> {
    let (w, h, pixels) = gray_strip(img, lo, hi);
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(&pixels);
    write_atomic(path, &buf)
}

/// 8-bit grayscale PNG; 3-channel images are written as RGB.
pub fn write_png(path: &Path, img: &ImageTensor, lo: f32, hi: f32) -> Result<()> {
    let (width, height, pixels, color) = if img.channels() == 3 {
        let bytes = to_bytes(img, lo, hi);
        let n = img.height() * img.width();
        let rgb = (0..n)
            .flat_map(|i| [bytes[i], bytes[n + i], bytes[2 * n + i]])
            .collect();
        (img.width(), img.height(), rgb, png::ColorType::Rgb)
    } else {
        let (w, h, p) = gray_strip(img, lo, hi);
        (w, h, p, png::ColorType::Grayscale)
    };
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut buf), width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    write_atomic(path, &buf)
}
