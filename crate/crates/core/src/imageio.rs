//! PNG encoding for simulator frames (16-bit, lossless) and plots (8-bit RGB).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim::LEVELS;

fn color_type(channels: usize) -> Result<png::ColorType> {
    match channels {
        1 => Ok(png::ColorType::Grayscale),
        3 => Ok(png::ColorType::Rgb),
        other => Err(Error::Usage(format!("cannot encode {other}-channel image as PNG"))),
    }
}

/// Writes a planar `[channels × h × w]` image with values in `[0, 1]` as a
/// 16-bit PNG. Values on the `k / 65535` grid round-trip exactly.
pub fn write_png16(path: &Path, channels: usize, h: usize, w: usize, planar: &[f64]) -> Result<()> {
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color_type(channels)?);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut bytes = Vec::with_capacity(channels * h * w * 2);
    for i in 0..h * w {
        for c in 0..channels {
            let v = (planar[c * h * w + i].clamp(0.0, 1.0) * LEVELS).round() as u16;
            bytes.extend_from_slice(&v.to_be_bytes());
        }
    }
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(())
}

/// Reads a 16-bit PNG back into planar layout; returns `(channels, h, w, data)`.
pub fn read_png16(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let file = File::open(path)?;
    let dec = png::Decoder::new(BufReader::new(file));
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::format(path, "expected a 16-bit PNG"));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut planar = vec![0.0; channels * h * w];
    for i in 0..h * w {
        for c in 0..channels {
            let off = 2 * (i * channels + c);
            let v = u16::from_be_bytes([buf[off], buf[off + 1]]);
            planar[c * h * w + i] = f64::from(v) / LEVELS;
        }
    }
    Ok((channels, h, w, planar))
}

/// 8-bit RGB raster used for plots.
#[derive(Clone, Debug)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Rgb8 {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Rgb8 {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = color;
        }
    }

    /// Bresenham line, `thickness` pixels wide (square brush).
    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3], thickness: i64) {
        let (mut x0, mut y0) = (a.0.round() as i64, a.1.round() as i64);
        let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        let r = thickness / 2;
        loop {
            for oy in -r..=r {
                for ox in -r..=r {
                    self.put(x0 + ox, y0 + oy, color);
                }
            }
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::format(path, e.to_string()))?;
        writer.finish().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(())
    }
}
