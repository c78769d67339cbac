//! Images and the low-level statistics the objectness cues are built from.
//!
//! Frames are stored as 8-bit binary PGM (`P5`) or PPM (`P6`). All derived
//! quantities (gradients, integral tables, histograms) are computed in `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Luminance weights for RGB to gray conversion.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// An 8-bit raster with one (gray) or three (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "buffer holds {} samples, expected {}",
                pixels.len(),
                width * height * channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Per-pixel luminance as reals (identity for gray images).
    pub fn luma_plane(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.pixels.iter().map(|&v| f64::from(v)).collect();
        }
        self.pixels
            .chunks_exact(3)
            .map(|p| {
                LUMA_WEIGHTS[0] * f64::from(p[0])
                    + LUMA_WEIGHTS[1] * f64::from(p[1])
                    + LUMA_WEIGHTS[2] * f64::from(p[2])
            })
            .collect()
    }

    /// Single-channel copy; RGB is converted by luminance and rounded.
    pub fn to_luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let pixels = self
            .luma_plane()
            .into_iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels,
        }
    }

    /// Bilinear sample of channel `c` at continuous coordinates, where pixel
    /// `(i, j)` covers `[i, i+1) x [j, j+1)`. Out-of-frame reads clamp to the edge.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = fx - x0 as f64;
        let ay = fy - y0 as f64;
        let p = |xx, yy| f64::from(self.get(xx, yy, c));
        let top = p(x0, y0) * (1.0 - ax) + p(x1, y0) * ax;
        let bottom = p(x0, y1) * (1.0 - ax) + p(x1, y1) * ax;
        top * (1.0 - ay) + bottom * ay
    }
}

fn pnm_magic(channels: usize) -> &'static str {
    if channels == 1 {
        "P5"
    } else {
        "P6"
    }
}

/// Encode as binary PGM/PPM with a single-space-delimited header.
pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let mut out = format!(
        "{}\n{} {}\n255\n",
        pnm_magic(img.channels),
        img.width,
        img.height
    )
    .into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Decode a binary PGM/PPM buffer. `path` is only used for error context.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
    let magic: String = bytes.iter().take(2).map(|&b| b as char).collect();
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                magic,
            })
        }
    };
    let bad_header = |reason: &str| Error::BadHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad_header("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad_header("expected a decimal number"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad_header("not ascii"))?;
        *field = text.parse().map_err(|_| bad_header("number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad_header("missing whitespace after max value")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::BadMaxValue {
            path: path.to_path_buf(),
            found: maxval,
        });
    }
    if width == 0 || height == 0 {
        return Err(bad_header("zero dimension"));
    }
    let expected = width as usize * height as usize * channels;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    Image::new(
        width as usize,
        height as usize,
        channels,
        payload[..expected].to_vec(),
    )
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

/// Real-valued raster in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct RealGrid {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl RealGrid {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("grid must be non-empty, got {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "grid {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Index of the largest value; ties resolve to the earliest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Half-open integer rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }
}

/// Summed-area table with one row and column of zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegralGrid {
    width: usize,
    height: usize,
    table: Vec<f64>,
}

impl IntegralGrid {
    pub fn from_values(width: usize, height: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), width * height, "integral source size");
        let stride = width + 1;
        let mut table = vec![0.0; stride * (height + 1)];
        for y in 0..height {
            let mut row = 0.0;
            for x in 0..width {
                row += values[y * width + x];
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
            }
        }
        Self {
            width,
            height,
            table,
        }
    }

    pub fn from_grid(grid: &RealGrid) -> Self {
        Self::from_values(grid.width, grid.height, &grid.values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Cumulative sum of all source cells with `x' < x` and `y' < y`.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.table[y * (self.width + 1) + x]
    }

    /// Sum over a rectangle via the four-corner formula.
    #[inline]
    pub fn rect_sum(&self, r: Rect) -> f64 {
        if r.is_empty() {
            return 0.0;
        }
        self.at(r.x1, r.y1) - self.at(r.x0, r.y1) - self.at(r.x1, r.y0) + self.at(r.x0, r.y0)
    }
}

pub fn integral_image(img: &Image) -> Result<IntegralGrid> {
    if img.channels != 1 {
        return Err(Error::InvalidImage(format!(
            "integral image needs one channel, got {}",
            img.channels
        )));
    }
    let values: Vec<f64> = img.pixels.iter().map(|&v| f64::from(v)).collect();
    Ok(IntegralGrid::from_values(img.width, img.height, &values))
}

/// Sobel gradient magnitude of a real plane with clamp-to-edge borders.
pub fn sobel_magnitude(plane: &[f64], width: usize, height: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, width as isize - 1) as usize;
        let yc = y.clamp(0, height as isize - 1) as usize;
        plane[yc * width + xc]
    };
    let mut out = vec![0.0; width * height];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            out[y as usize * width + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Sobel gradient magnitude of the image luminance.
pub fn gradient_magnitude(img: &Image) -> RealGrid {
    let plane = img.luma_plane();
    RealGrid {
        width: img.width,
        height: img.height,
        values: sobel_magnitude(&plane, img.width, img.height),
    }
}

/// 2x box-average downsampling of a real plane; odd trailing rows/columns
/// are dropped. Returns the plane with its new dimensions.
pub fn downsample2(plane: &[f64], width: usize, height: usize) -> (Vec<f64>, usize, usize) {
    let (w2, h2) = ((width / 2).max(1), (height / 2).max(1));
    if width < 2 || height < 2 {
        return (plane.to_vec(), width, height);
    }
    let mut out = vec![0.0; w2 * h2];
    for y in 0..h2 {
        for x in 0..w2 {
            let s = plane[2 * y * width + 2 * x]
                + plane[2 * y * width + 2 * x + 1]
                + plane[(2 * y + 1) * width + 2 * x]
                + plane[(2 * y + 1) * width + 2 * x + 1];
            out[y * w2 + x] = 0.25 * s;
        }
    }
    (out, w2, h2)
}

/// Normalized histogram; `mass` concatenates per-channel bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bins: usize,
    pub mass: Vec<f64>,
}

impl Histogram {
    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }
}

#[inline]
pub fn bin_of(value: u8, bins: usize) -> usize {
    (usize::from(value) * bins) / 256
}

/// Per-channel uniform-bin histogram of `rect`, normalized to unit mass.
pub fn region_histogram(img: &Image, rect: Rect, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    if rect.is_empty() {
        return Err(Error::Degenerate("zero-area histogram region".into()));
    }
    if !rect.fits(img.width, img.height) {
        return Err(Error::InvalidArgument(format!(
            "rect {rect:?} outside {}x{} image",
            img.width, img.height
        )));
    }
    let c = img.channels;
    let mut mass = vec![0.0; bins * c];
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            for ch in 0..c {
                mass[ch * bins + bin_of(img.get(x, y, ch), bins)] += 1.0;
            }
        }
    }
    let total = (rect.area() * c) as f64;
    mass.iter_mut().for_each(|m| *m /= total);
    Ok(Histogram { bins, mass })
}

/// Symmetric chi-square distance `0.5 * sum (a-b)^2 / (a+b)`; lies in
/// `[0, 1]` for unit-mass histograms.
pub fn chi_square(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    0.5 * a
        .iter()
        .zip(b)
        .filter(|(x, y)| **x + **y > 0.0)
        .map(|(x, y)| (x - y) * (x - y) / (x + y))
        .sum::<f64>()
}

/// Crop a square-or-rectangular region centered at `(cx, cy)` and resample it
/// bilinearly to `out_w x out_h`, returning channel-major samples mapped to
/// `[-1, 1]`. Gray images are replicated to `out_channels` channels.
pub fn crop_normalized(
    img: &Image,
    cx: f64,
    cy: f64,
    region_w: f64,
    region_h: f64,
    out_w: usize,
    out_h: usize,
    out_channels: usize,
) -> Vec<f64> {
    let sx = region_w / out_w as f64;
    let sy = region_h / out_h as f64;
    let x0 = cx - 0.5 * region_w;
    let y0 = cy - 0.5 * region_h;
    let mut out = vec![0.0; out_channels * out_w * out_h];
    for c in 0..out_channels {
        let src_c = if img.channels == 1 { 0 } else { c.min(img.channels - 1) };
        for v in 0..out_h {
            let y = y0 + (v as f64 + 0.5) * sy;
            for u in 0..out_w {
                let x = x0 + (u as f64 + 0.5) * sx;
                let s = img.sample_bilinear(x, y, src_c);
                out[(c * out_h + v) * out_w + u] = (s - 127.5) / 127.5;
            }
        }
    }
    out
}
