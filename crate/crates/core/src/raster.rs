//! RGB images and scalar depth maps with pixel-center bilinear sampling, plus
//! PNG and PFM file I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{FrugalError, Result};

/// Interleaved RGB, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn get_f64(&self, x: usize, y: usize) -> [f64; 3] {
        self.get(x, y).map(|c| c as f64)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample where integer coordinates are pixel centers. Returns
    /// `None` outside `[0, width - 1] x [0, height - 1]`.
    #[inline]
    pub fn bilinear(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        let (x0, y0, fx, fy) = bilinear_cell(self.width, self.height, u, v)?;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let a = self.get_f64(x0, y0);
        let b = self.get_f64(x1, y0);
        let c = self.get_f64(x0, y1);
        let d = self.get_f64(x1, y1);
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] + (b[k] - a[k]) * fx;
            let bottom = c[k] + (d[k] - c[k]) * fx;
            out[k] = top + (bottom - top) * fy;
        }
        Some(out)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| FrugalError::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.into_rgb32f();
        Ok(Self {
            width: rgb.width() as usize,
            height: rgb.height() as usize,
            data: rgb.into_raw(),
        })
    }

    /// 16-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u16> = self
            .data
            .iter()
            .map(|c| (c.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let buf = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(
            self.width as u32,
            self.height as u32,
            raw,
        )
        .ok_or_else(|| FrugalError::Data("image buffer size mismatch".into()))?;
        buf.save(path).map_err(|source| FrugalError::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// 8-bit PNG for previews.
    pub fn save_png8(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| FrugalError::Data("image buffer size mismatch".into()))?
            .save(path)
            .map_err(|source| FrugalError::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

#[inline]
fn bilinear_cell(width: usize, height: usize, u: f64, v: f64) -> Option<(usize, usize, f64, f64)> {
    let max_u = (width - 1) as f64;
    let max_v = (height - 1) as f64;
    if !(u >= 0.0 && v >= 0.0 && u <= max_u && v <= max_v) {
        return None;
    }
    let x0 = (u.floor() as usize).min(width.saturating_sub(2));
    let y0 = (v.floor() as usize).min(height.saturating_sub(2));
    Some((x0, y0, u - x0 as f64, v - y0 as f64))
}

/// Row-major scalar map (top row first). Non-finite entries mark missing data.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.data[y * self.width + x] = value;
    }

    pub fn bilinear(&self, u: f64, v: f64) -> Option<f64> {
        let (x0, y0, fx, fy) = bilinear_cell(self.width, self.height, u, v)?;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let a = self.get(x0, y0) as f64;
        let b = self.get(x1, y0) as f64;
        let c = self.get(x0, y1) as f64;
        let d = self.get(x1, y1) as f64;
        let top = a + (b - a) * fx;
        let bottom = c + (d - c) * fx;
        Some(top + (bottom - top) * fy)
    }

    /// Bilinear resampling to `width x height`, aligning pixel centers of the
    /// two grids (`x_src = (x + 0.5) * w_src / w - 0.5`, clamped to the border).
    pub fn resample(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let max_u = (self.width - 1) as f64;
        let max_v = (self.height - 1) as f64;
        Self::from_fn(width, height, |x, y| {
            let u = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_u);
            let v = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_v);
            self.bilinear(u, v).unwrap_or(f64::NAN) as f32
        })
    }

    /// Little-endian single-channel PFM (`Pf`). PFM stores the bottom row first.
    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.data.len() * 4 + 32);
        write!(out, "Pf\n{} {}\n-1.0\n", self.width, self.height).expect("write to vec");
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                out.extend_from_slice(&self.get(x, y).to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| FrugalError::io(path, e))
    }

    pub fn load_pfm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| FrugalError::io(path, e))?;
        Self::parse_pfm(&bytes).map_err(|msg| FrugalError::Data(format!("{}: {msg}", path.display())))
    }

    pub fn parse_pfm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let mut token = || -> std::result::Result<String, String> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PFM header".into());
            }
            let tok = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
            Ok(tok)
        };
        let magic = token()?;
        let channels = match magic.as_str() {
            "Pf" => 1,
            "PF" => 3,
            other => return Err(format!("bad PFM magic `{other}`")),
        };
        let width: usize = token()?.parse().map_err(|_| "bad PFM width")?;
        let height: usize = token()?.parse().map_err(|_| "bad PFM height")?;
        let scale: f64 = token()?.parse().map_err(|_| "bad PFM scale")?;
        // exactly one whitespace byte separates the header from the raster
        let data_start = pos + 1;
        let count = width * height * channels;
        if bytes.len() < data_start + count * 4 {
            return Err("truncated PFM raster".into());
        }
        let little = scale < 0.0;
        let mut data = vec![0.0f32; width * height];
        for row in 0..height {
            let y = height - 1 - row;
            for x in 0..width {
                let off = data_start + ((row * width + x) * channels) * 4;
                let b = [bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]];
                data[y * width + x] = if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
            }
        }
        Ok(Self { width, height, data })
    }
}
