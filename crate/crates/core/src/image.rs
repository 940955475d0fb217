//! Channels-last RGB images in the canonical `[-1, 1]` range, plus binary
//! PPM (P6) export and import.
//!
//! Export maps `v ∈ [-1, 1]` to `round((v + 1) / 2 · 255)` after clamping;
//! import maps a byte `b` back to `b / 255 · 2 − 1`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const CHANNELS: usize = 3;

/// Largest side accepted when decoding, to keep hostile headers from
/// triggering huge allocations.
const MAX_DECODE_SIDE: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("empty image"));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::InvalidShape {
                shape: vec![height, width, CHANNELS],
                reason: format!("got {} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image".into()));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * CHANNELS;
        self.data[o..o + CHANNELS].copy_from_slice(&rgb);
    }

    pub fn clamped(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        }
    }

    /// Pixels as a `[h·w, 3]` matrix.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height * self.width, CHANNELS], |i| T::lit(self.data[i] as f64))
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>, height: usize, width: usize) -> Result<Self> {
        Image::new(height, width, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    /// Sub-image `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::invalid(format!(
                "crop {h}×{w} at ({y0},{x0}) outside {}×{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * CHANNELS);
        for y in y0..y0 + h {
            let o = (y * self.width + x0) * CHANNELS;
            data.extend_from_slice(&self.data[o..o + w * CHANNELS]);
        }
        Ok(Image { height: h, width: w, data })
    }

    /// Bilinear resize with half-pixel centres. Returns an exact copy when
    /// the size already matches.
    pub fn resize(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize to empty image"));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sample = |src: usize, dst: usize, i: usize| -> (usize, usize, f32) {
            let pos = ((i as f32 + 0.5) * src as f32 / dst as f32 - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f32)
        };
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            let (y0, y1, fy) = sample(self.height, height, y);
            for x in 0..width {
                let (x0, x1, fx) = sample(self.width, width, x);
                let (a, b) = (self.pixel(y0, x0), self.pixel(y0, x1));
                let (c, d) = (self.pixel(y1, x0), self.pixel(y1, x1));
                for ch in 0..CHANNELS {
                    let top = a[ch] + (b[ch] - a[ch]) * fx;
                    let bottom = c[ch] + (d[ch] - c[ch]) * fx;
                    data.push(top + (bottom - top) * fy);
                }
            }
        }
        Ok(Image { height, width, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_byte(v)).collect()
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
        let mut pos = 0;
        let magic = ppm_token(bytes, &mut pos)?;
        if magic != b"P6" {
            return Err(Error::format("ppm", "expected P6 magic"));
        }
        let width = ppm_number(bytes, &mut pos)?;
        let height = ppm_number(bytes, &mut pos)?;
        let maxval = ppm_number(bytes, &mut pos)?;
        if maxval != 255 {
            return Err(Error::format("ppm", format!("unsupported maxval {maxval}")));
        }
        if width == 0 || height == 0 || width > MAX_DECODE_SIDE || height > MAX_DECODE_SIDE {
            return Err(Error::format("ppm", format!("unsupported size {width}×{height}")));
        }
        // exactly one whitespace byte separates the header from the raster
        if bytes.get(pos).is_none_or(|b| !b.is_ascii_whitespace()) {
            return Err(Error::format("ppm", "missing raster separator"));
        }
        pos += 1;
        let raster = &bytes[pos..];
        let expected = width * height * CHANNELS;
        if raster.len() != expected {
            return Err(Error::format(
                "ppm",
                format!("raster has {} bytes, expected {expected}", raster.len()),
            ));
        }
        let data = raster.iter().map(|&b| from_byte(b)).collect();
        Image::new(height, width, data)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode_ppm(&bytes)
    }

    /// Tiles equally sized images into a grid with `cols` columns and a
    /// one-pixel mid-grey gutter.
    pub fn grid(images: &[Image], cols: usize) -> Result<Image> {
        let first = images.first().ok_or_else(|| Error::invalid("empty image grid"))?;
        let (h, w) = (first.height, first.width);
        if images.iter().any(|im| im.height != h || im.width != w) {
            return Err(Error::invalid("grid images differ in size"));
        }
        let cols = cols.clamp(1, images.len());
        let rows = images.len().div_ceil(cols);
        let (gh, gw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
        let mut out = Image::filled(gh, gw, [0.0; 3]);
        for (i, im) in images.iter().enumerate() {
            let (oy, ox) = ((i / cols) * (h + 1), (i % cols) * (w + 1));
            for y in 0..h {
                for x in 0..w {
                    out.set_pixel(oy + y, ox + x, im.pixel(y, x));
                }
            }
        }
        Ok(out)
    }
}

pub fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

fn skip_ws_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        if bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        } else if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    skip_ws_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("ppm", "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn ppm_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = ppm_token(bytes, pos)?;
    if tok.len() > 6 || !tok.iter().all(u8::is_ascii_digit) {
        return Err(Error::format("ppm", "bad header number"));
    }
    Ok(std::str::from_utf8(tok).unwrap().parse().unwrap())
}
