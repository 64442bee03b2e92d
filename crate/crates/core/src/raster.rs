//! PNG reading and writing for RGB images and 1-bit masks.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Writes interleaved 8-bit RGB pixels.
pub fn write_rgb_png(path: &Path, size: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * size * size {
        return Err(Error::Shape(format!("RGB buffer of side {size} needs {} bytes", 3 * size * size)));
    }
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, size as u32, size as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(rgb).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))?;
    Ok(())
}

/// Writes a binary mask as a 1-bit grayscale PNG (set pixels white).
pub fn write_mask_png(path: &Path, size: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != size * size {
        return Err(Error::Shape(format!("mask of side {size} needs {} pixels", size * size)));
    }
    let stride = size.div_ceil(8);
    let mut packed = vec![0u8; stride * size];
    for y in 0..size {
        for x in 0..size {
            if mask[y * size + x] {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, size as u32, size as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(&packed).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))?;
    Ok(())
}

fn read_png_8bit(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

/// Reads a square RGB image; returns `(side, interleaved RGB bytes)`.
pub fn read_rgb_png(path: &Path) -> Result<(usize, Vec<u8>)> {
    let (w, h, color, buf) = read_png_8bit(path)?;
    if w != h {
        return Err(png_err(path, format!("expected a square image, got {w}x{h}")));
    }
    let rgb = match color {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        other => return Err(png_err(path, format!("unsupported color type {other:?}"))),
    };
    Ok((w, rgb))
}

/// Reads a square mask; any non-zero gray level counts as set.
pub fn read_mask_png(path: &Path) -> Result<(usize, Vec<bool>)> {
    let (w, h, color, buf) = read_png_8bit(path)?;
    if w != h {
        return Err(png_err(path, format!("expected a square mask, got {w}x{h}")));
    }
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(png_err(path, format!("unsupported color type {other:?}"))),
    };
    Ok((w, buf.chunks(channels).map(|p| p[0] != 0).collect()))
}
