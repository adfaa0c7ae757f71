//! Image containers and file I/O.
//!
//! Three pixel containers are used throughout the crate:
//!
//! * [`ImageRgb`] — H×W×3 interleaved `f64` data. When it represents a
//!   displayable image the values live in `[0, 1]`, but the type is also used
//!   as a plain container for per-pixel RGB gradients, so the range is not
//!   enforced by construction.
//! * [`ScalarMap`] — H×W `f64` data (depth maps, transmittance, per-pixel
//!   scalar gradients).
//! * [`Mask`] — H×W boolean map. The meaning of `true` (foreground vs.
//!   background) is documented at each use site.
//!
//! File formats: 8-bit PNG for color images and masks, PFM (32-bit float,
//! little-endian, bottom-up) for depth maps and float-precision reference
//! images. The PFM round-trip is bit-exact at `f32` precision.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// H×W×3 interleaved RGB image with `f64` components.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageRgb {
    /// All-zero (black) image.
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    /// Builds an image from a per-pixel function returning `[r, g, b]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "rgb buffer has {} values, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    #[inline]
    pub fn add(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] += rgb[0];
        self.data[i + 1] += rgb[1];
        self.data[i + 2] += rgb[2];
    }

    /// Raw interleaved data, row-major, RGB order.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Grayscale conversion by channel mean.
    pub fn to_gray(&self) -> ScalarMap {
        let mut g = ScalarMap::zeros(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let [r, gr, b] = self.get(x, y);
                g.set(x, y, (r + gr + b) / 3.0);
            }
        }
        g
    }

    /// Per-component multiplication by a mask (masked-out pixels become 0).
    pub fn masked(&self, mask: &Mask) -> ImageRgb {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                if !mask.get(x, y) {
                    out.set(x, y, [0.0, 0.0, 0.0]);
                }
            }
        }
        out
    }

    /// Mean squared error against another image of the same shape.
    pub fn mse(&self, other: &Self) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let n = self.data.len() as f64;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / n)
    }

    /// Quantizes to 8 bits and writes a PNG file.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(self.width * self.height * 3);
        for v in &self.data {
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer size matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Loads an 8-bit PNG and normalizes components to `[0, 1]`.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Self::from_data(w, h, data)
    }

    /// Writes a 3-channel PFM file (`PF`, little-endian, bottom-up).
    pub fn save_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pfm(path, self.width, self.height, 3, &self.data)
    }

    /// Reads a 3-channel PFM file.
    pub fn load_pfm(path: impl AsRef<Path>) -> Result<Self> {
        let (w, h, channels, data) = read_pfm(path)?;
        if channels != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 3-channel PFM, got {channels} channels"
            )));
        }
        Self::from_data(w, h, data)
    }

    /// Rounds every component to `f32` precision (the precision of PFM
    /// storage), so freshly rendered images can be compared bit-for-bit
    /// against float references loaded from disk.
    pub fn quantize_f32(&self) -> ImageRgb {
        let data = self.data.iter().map(|&v| v as f32 as f64).collect();
        Self { width: self.width, height: self.height, data }
    }
}

/// H×W scalar field with `f64` components.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScalarMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                m.set(x, y, f(x, y));
            }
        }
        m
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "scalar buffer has {} values, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn add(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] += v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarMap {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Writes a grayscale PFM file (`Pf`, little-endian, bottom-up).
    pub fn save_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pfm(path, self.width, self.height, 1, &self.data)
    }

    /// Reads a grayscale PFM file.
    pub fn load_pfm(path: impl AsRef<Path>) -> Result<Self> {
        let (w, h, channels, data) = read_pfm(path)?;
        if channels != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected 1-channel PFM, got {channels} channels"
            )));
        }
        Self::from_data(w, h, data)
    }

    /// Rounds every value to `f32` precision (the precision of PFM storage).
    pub fn quantize_f32(&self) -> ScalarMap {
        self.map(|v| v as f32 as f64)
    }
}

/// H×W boolean map.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::filled(width, height, false);
        for y in 0..height {
            for x in 0..width {
                m.set(x, y, f(x, y));
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Logical complement.
    pub fn invert(&self) -> Mask {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    /// True iff every set pixel of `self` is also set in `other`.
    pub fn subset_of(&self, other: &Mask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.data.iter().zip(&other.data).all(|(a, b)| !a || *b)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Writes an 8-bit grayscale PNG (255 for `true`, 0 for `false`).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf: Vec<u8> = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer size matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Loads a grayscale PNG; values above 127 map to `true`.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.into_raw().iter().map(|&v| v > 127).collect();
        Ok(Self { width: w, height: h, data })
    }
}

/// Writes a PFM file: `PF`/`Pf` header, `width height`, scale `-1.0`
/// (little-endian), then rows bottom-up as `f32`.
fn write_pfm(path: impl AsRef<Path>, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<()> {
    debug_assert!(channels == 1 || channels == 3);
    let mut out = Vec::with_capacity(32 + data.len() * 4);
    let magic = if channels == 3 { "PF" } else { "Pf" };
    out.extend_from_slice(format!("{magic}\n{width} {height}\n-1.0\n").as_bytes());
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                let v = data[(y * width + x) * channels + c] as f32;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reads a PFM file; returns (width, height, channels, row-major top-down data).
fn read_pfm(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Other(format!("{}: truncated PFM header", path.display())));
        }
        // Consume exactly one whitespace byte after the token.
        pos += 1;
        Ok(String::from_utf8_lossy(&bytes[start..pos - 1]).into_owned())
    };
    let magic = token(&bytes)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::Other(format!("{}: bad PFM magic {other:?}", path.display()))),
    };
    let width: usize = token(&bytes)?
        .parse()
        .map_err(|e| Error::Other(format!("{}: bad PFM width: {e}", path.display())))?;
    let height: usize = token(&bytes)?
        .parse()
        .map_err(|e| Error::Other(format!("{}: bad PFM height: {e}", path.display())))?;
    let scale: f64 = token(&bytes)?
        .parse()
        .map_err(|e| Error::Other(format!("{}: bad PFM scale: {e}", path.display())))?;
    let little_endian = scale < 0.0;
    let n = width * height * channels;
    if bytes.len() < pos + n * 4 {
        return Err(Error::Other(format!("{}: truncated PFM payload", path.display())));
    }
    let mut data = vec![0.0f64; n];
    for y in 0..height {
        // PFM stores rows bottom-up; flip to top-down.
        let src_row = height - 1 - y;
        for x in 0..width {
            for c in 0..channels {
                let idx = pos + (src_row * width + x) * channels * 4 + c * 4;
                let raw: [u8; 4] = bytes[idx..idx + 4].try_into().unwrap();
                let v = if little_endian {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                data[(y * width + x) * channels + c] = v as f64;
            }
        }
    }
    Ok((width, height, channels, data))
}
