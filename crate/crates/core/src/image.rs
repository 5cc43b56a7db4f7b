//! HDR images, PFM serialization and 8-bit PNG previews.
//!
//! PFM layout: `PF\n{w} {h}\n-1.0\n` followed by little-endian `f32` RGB
//! triplets, scanlines stored bottom-up.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::brdf::Rgb;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage {
    pub width: usize,
    pub height: usize,
    /// Row-major from the top-left pixel.
    pub pixels: Vec<Rgb>,
}

impl HdrImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![Rgb::ZERO; width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::LengthMismatch { expected: width * height, got: pixels.len() });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        self.pixels[y * self.width + x] = c;
    }

    pub fn to_pfm_bytes(&self) -> Vec<u8> {
        let mut out = format!("PF\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        out.reserve(self.width * self.height * 12);
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for c in self.get(x, y).to_array() {
                    out.extend_from_slice(&(c as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_pfm_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format { format: "PFM", message: m.to_string() };
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        // Magic, width, height and scale are whitespace separated; a single
        // whitespace byte precedes the raster.
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
        }
        pos += 1;
        if fields[0] != "PF" {
            return Err(bad("expected PF magic (3-channel)"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(bad("scale must be nonzero"));
        }
        let little = scale < 0.0;
        let need = width * height * 12;
        let raster = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
        if raster.len() < need {
            return Err(bad("raster shorter than declared size"));
        }
        let mut img = HdrImage::new(width, height);
        let mut chunks = raster[..need].chunks_exact(4).map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            (if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
        });
        for y in (0..height).rev() {
            for x in 0..width {
                let (r, g, b) = (chunks.next().unwrap(), chunks.next().unwrap(), chunks.next().unwrap());
                img.set(x, y, Rgb::new(r, g, b));
            }
        }
        Ok(img)
    }

    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_pfm_bytes())
    }

    pub fn read_pfm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pfm_bytes(&bytes)
    }

    /// 8-bit sRGB-ish preview: `clamp(linear, 0, 1)^(1/2.2)`.
    pub fn tonemap_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.to_array().map(tonemap_channel))
            .collect()
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let buf = self.tonemap_rgb8();
        image::save_buffer(path, &buf, self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Format { format: "PNG", message: other.to_string() },
            })
    }
}

pub fn tonemap_channel(v: f64) -> u8 {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    (v.powf(1.0 / 2.2) * 255.0).round() as u8
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
