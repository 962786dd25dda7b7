use std::path::Path;

use super::{DataError, Result};
use crate::tensor::Tensor;

const RAW_MAGIC: &[u8; 4] = b"PLMF";

fn check_rgb(img: &Tensor) -> Result<(usize, usize)> {
    match *img.shape() {
        [3, h, w] => Ok((h, w)),
        ref s => Err(DataError::ShapeMismatch(format!(
            "expected a [3, H, W] image, got {s:?}"
        ))),
    }
}

/// Decodes an 8-bit PNG (any color type) into `[3, H, W]` in `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| DataError::Image(e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    }))
}

/// Quantizes to 8 bits per channel (values clamped to `[0, 1]`).
pub fn encode_png(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = check_rgb(img)?;
    let d = img.data();
    let mut raw = vec![0u8; 3 * h * w];
    for (p, px) in raw.chunks_exact_mut(3).enumerate() {
        for (c, v) in px.iter_mut().enumerate() {
            *v = (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let buf =
        image::RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| DataError::Image("buffer size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| DataError::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Lossless float image: magic, `C, H, W` as `u32`, then `f32` values, all
/// little-endian.
pub fn encode_raw(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = check_rgb(img)?;
    let mut out = Vec::with_capacity(16 + 4 * img.numel());
    out.extend_from_slice(RAW_MAGIC);
    for d in [3, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in img.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(DataError::Image("not a raw float image".into()));
    }
    let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let shape = [dim(4), dim(8), dim(12)];
    let n = shape.iter().product::<usize>();
    if bytes.len() != 16 + 4 * n {
        return Err(DataError::TruncatedFile(format!(
            "raw image {shape:?} needs {} bytes, found {}",
            16 + 4 * n,
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let t = Tensor::new(shape.to_vec(), data).map_err(|e| DataError::ShapeMismatch(e.to_string()))?;
    check_rgb(&t)?;
    Ok(t)
}

/// Reads `.png` or raw float (any other extension) images.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        decode_png(&bytes)
    } else {
        decode_raw(&bytes)
    }
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        encode_png(img)?
    } else {
        encode_raw(img)?
    };
    std::fs::write(path, bytes)?;
    Ok(())
}
