//! 16-bit grayscale PNG with the linear map `[-1, 1] → [0, 65535]`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use taugen_core::{Image2D, Modality};

use crate::error::{AppError, AppResult};

pub fn to_u16(v: f32) -> u16 {
    (((v.clamp(-1.0, 1.0) as f64 + 1.0) / 2.0 * 65535.0).round()) as u16
}

pub fn from_u16(v: u16) -> f32 {
    (v as f64 / 65535.0 * 2.0 - 1.0) as f32
}

/// Encodes a row-major `width × height` grid of `[-1, 1]` values.
pub fn encode(width: usize, height: usize, pixels: &[f32]) -> AppResult<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(Cursor::new(&mut out), width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header().map_err(|e| AppError::Png(e.to_string()))?;
        let bytes: Vec<u8> = pixels.iter().flat_map(|&v| to_u16(v).to_be_bytes()).collect();
        writer.write_image_data(&bytes).map_err(|e| AppError::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], modality: Modality) -> AppResult<Image2D> {
    let dec = png::Decoder::new(Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| AppError::Png(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(AppError::Png("expected a 16-bit grayscale image".into()));
    }
    if info.width != info.height {
        return Err(AppError::Png(format!("expected a square image, got {}x{}", info.width, info.height)));
    }
    let size = info.width as usize;
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| AppError::Png(e.to_string()))?;
    let pixels = buf[..frame.buffer_size()]
        .chunks_exact(2)
        .map(|b| from_u16(u16::from_be_bytes([b[0], b[1]])))
        .collect();
    Ok(Image2D::new(size, pixels, modality)?)
}

pub fn write_image(path: &Path, img: &Image2D) -> AppResult<()> {
    let bytes = encode(img.size(), img.size(), img.pixels())?;
    crate::fsutil::write_atomic(path, &bytes)
}

pub fn read_image(path: &Path, modality: Modality) -> AppResult<Image2D> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(&bytes, modality)
}

/// Tiles equally sized images left to right.
pub fn write_row(path: &Path, panels: &[Image2D]) -> AppResult<()> {
    let s = panels.first().map(Image2D::size).ok_or_else(|| AppError::Config("empty panel list".into()))?;
    if panels.iter().any(|p| p.size() != s) {
        return Err(AppError::Config("grid panels differ in size".into()));
    }
    let w = s * panels.len();
    let mut pixels = vec![0.0f32; w * s];
    for (k, p) in panels.iter().enumerate() {
        for r in 0..s {
            pixels[r * w + k * s..r * w + (k + 1) * s].copy_from_slice(&p.pixels()[r * s..(r + 1) * s]);
        }
    }
    crate::fsutil::write_atomic(path, &encode(w, s, &pixels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_round_trip() {
        assert_eq!(to_u16(-1.0), 0);
        assert_eq!(to_u16(1.0), 65535);
        assert_eq!(from_u16(0), -1.0);
        assert_eq!(from_u16(65535), 1.0);
        for k in [0u16, 1, 12345, 32767, 32768, 65534] {
            assert_eq!(to_u16(from_u16(k)), k);
        }
    }

    #[test]
    fn image_round_trip_within_quantization() {
        let px: Vec<f32> = (0..64).map(|i| (i as f32 / 31.5) - 1.0).collect();
        let img = Image2D::new(8, px, Modality::Tau).unwrap();
        let back = decode(&encode(8, 8, img.pixels()).unwrap(), Modality::Tau).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 1.0 / 65535.0 + 1e-7);
        }
        let again = decode(&encode(8, 8, back.pixels()).unwrap(), Modality::Tau).unwrap();
        assert_eq!(again.pixels(), back.pixels());
    }
}
