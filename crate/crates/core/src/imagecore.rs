//! Raster, mask and box primitives plus PNG I/O and resampling.
//!
//! Resampling uses half-pixel centres with edge clamping: output pixel `i`
//! samples the source at `(i + 0.5) * in / out - 0.5`. Every sample type in
//! this module lives in `[0, 1]`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// Colour-space tag carried by a [`RasterImage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColorSpace {
    Srgb,
    MultiChannel,
    Gray,
}

/// Floating point raster, row-major and channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    space: ColorSpace,
}

impl RasterImage {
    pub const MAX_CHANNELS: usize = 8;

    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
        space: ColorSpace,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidRaster(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if channels == 0 || channels > Self::MAX_CHANNELS {
            return Err(Error::InvalidRaster(format!(
                "channel count {channels} outside 1..=8"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidRaster(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidRaster(format!("sample {bad} outside [0, 1]")));
        }
        match space {
            ColorSpace::Srgb if channels != 3 => {
                return Err(Error::InvalidRaster("sRGB images need 3 channels".into()))
            }
            ColorSpace::Gray if channels != 1 => {
                return Err(Error::InvalidRaster("gray images need 1 channel".into()))
            }
            _ => {}
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            space,
        })
    }

    /// Builds an image by evaluating `f(x, y, channel)`; values are clamped to `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        space: ColorSpace,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(width, height, channels, data, space)
    }

    pub fn filled(
        width: usize,
        height: usize,
        channels: usize,
        space: ColorSpace,
        value: f32,
    ) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
            space,
        )
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

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Copies one channel out as a row-major plane.
    pub fn plane(&self, c: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Gray images are replicated to three channels; sRGB images are returned as is.
    pub fn to_srgb(&self) -> Result<RasterImage> {
        match self.space {
            ColorSpace::Srgb => Ok(self.clone()),
            ColorSpace::Gray => {
                let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
                RasterImage::new(self.width, self.height, 3, data, ColorSpace::Srgb)
            }
            ColorSpace::MultiChannel if self.channels == 3 => RasterImage::new(
                self.width,
                self.height,
                3,
                self.data.clone(),
                ColorSpace::Srgb,
            ),
            ColorSpace::MultiChannel => Err(Error::InvalidRaster(format!(
                "cannot interpret {}-channel image as sRGB",
                self.channels
            ))),
        }
    }
}

/// Boolean lesion mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidRaster(format!(
                "mask must be at least 1x1, got {width}x{height}"
            )));
        }
        if bits.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "mask length {} != {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tight box around all true pixels, `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let (mut x0, mut y0) = (usize::MAX, usize::MAX);
        let (mut x1, mut y1) = (0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BoundingBox {
            x0: x0 as i64,
            y0: y0 as i64,
            x1: x1 as i64,
            y1: y1 as i64,
        })
    }

    pub fn to_probability(&self) -> ProbabilityMap {
        ProbabilityMap {
            width: self.width,
            height: self.height,
            values: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Per-pixel lesion probability, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidRaster(format!(
                "probability map must be at least 1x1, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "probability map length {} != {width}x{height}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidRaster(format!(
                "probability {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// `p >= threshold` becomes true.
    pub fn threshold(&self, threshold: f32) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.values.iter().map(|&v| v >= threshold).collect(),
        }
    }
}

/// Axis-aligned pixel rectangle: `x0, y0` inclusive, `x1, y1` exclusive.
///
/// Coordinates are signed so that expanded boxes may temporarily leave the
/// image; [`BoundingBox::clamp`] brings them back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct BoundingBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl BoundingBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidArgument(format!(
                "degenerate box ({x0},{y0})-({x1},{y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width as i64,
            y1: height as i64,
        }
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> i64 {
        self.width().max(0) * self.height().max(0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Intersects the box with `[0, width) x [0, height)`; `None` when nothing is left.
    pub fn clamp(&self, width: usize, height: usize) -> Option<BoundingBox> {
        let b = BoundingBox {
            x0: self.x0.clamp(0, width as i64),
            y0: self.y0.clamp(0, height as i64),
            x1: self.x1.clamp(0, width as i64),
            y1: self.y1.clamp(0, height as i64),
        };
        (b.x0 < b.x1 && b.y0 < b.y1).then_some(b)
    }

    /// Scales width and height about the centre by `sx`, `sy`, rounding to whole pixels.
    /// The result keeps at least one pixel per axis and is not clamped.
    pub fn scaled(&self, sx: f64, sy: f64) -> BoundingBox {
        let (cx, cy) = self.center();
        let w = ((self.width() as f64 * sx).round() as i64).max(1);
        let h = ((self.height() as f64 * sy).round() as i64).max(1);
        let x0 = (cx - w as f64 / 2.0).round() as i64;
        let y0 = (cy - h as f64 / 2.0).round() as i64;
        BoundingBox {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        }
    }

    fn as_tuple(&self) -> (i64, i64, i64, i64) {
        (self.x0, self.y0, self.x1, self.y1)
    }
}

/// Result of [`load_png`]: binary grayscale files become masks.
#[derive(Debug, Clone, PartialEq)]
pub enum Loaded {
    Image(RasterImage),
    Mask(BinaryMask),
}

impl Loaded {
    pub fn into_image(self) -> RasterImage {
        match self {
            Loaded::Image(img) => img,
            Loaded::Mask(mask) => {
                let data = mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                RasterImage {
                    width: mask.width,
                    height: mask.height,
                    channels: 1,
                    data,
                    space: ColorSpace::Gray,
                }
            }
        }
    }
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Loaded> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

/// Decodes an 8- or 16-bit grayscale/RGB PNG (alpha channels are dropped).
pub fn decode_png(bytes: &[u8]) -> Result<Loaded> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::CorruptPng(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::CorruptPng("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::CorruptPng(e.to_string()))?;
    let (width, height) = (info.width as usize, info.height as usize);

    let (stored, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(Error::UnsupportedFormat("palette PNGs are not supported".into()))
        }
    };
    let (raw, max): (Vec<u16>, u16) = match info.bit_depth {
        png::BitDepth::Eight => (buf[..info.buffer_size()].iter().map(|&b| b as u16).collect(), 255),
        png::BitDepth::Sixteen => (
            buf[..info.buffer_size()]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect(),
            u16::MAX,
        ),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "bit depth {other:?}; only 8 and 16 are supported"
            )))
        }
    };
    let expected = width * height * stored;
    if raw.len() < expected {
        return Err(Error::CorruptPng("short pixel buffer".into()));
    }
    let samples: Vec<u16> = raw[..expected]
        .chunks_exact(stored)
        .flat_map(|px| px[..keep].iter().copied())
        .collect();

    if keep == 1 && samples.iter().all(|&s| s == 0 || s == max) {
        let bits = samples.iter().map(|&s| s == max).collect();
        return Ok(Loaded::Mask(BinaryMask::new(width, height, bits)?));
    }
    let scale = 1.0 / max as f64;
    let data = samples.iter().map(|&s| (s as f64 * scale) as f32).collect();
    let space = if keep == 1 {
        ColorSpace::Gray
    } else {
        ColorSpace::Srgb
    };
    Ok(Loaded::Image(RasterImage::new(width, height, keep, data, space)?))
}

/// Loads a dataset image: PNG through [`load_png`], anything else (JPEG)
/// through the `image` crate. The result is always 3-channel sRGB.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        return load_png(path)?.into_image().to_srgb();
    }
    let decoded = image::open(path)
        .map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = decoded.dimensions();
    let data = decoded.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    RasterImage::new(w as usize, h as usize, 3, data, ColorSpace::Srgb)
}

/// Loads a ground-truth mask. Non-binary grayscale files are thresholded at one half.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    match load_png(path.as_ref())? {
        Loaded::Mask(m) => Ok(m),
        Loaded::Image(img) if img.channels() == 1 => {
            BinaryMask::new(img.width, img.height, img.data.iter().map(|&v| v >= 0.5).collect())
        }
        Loaded::Image(_) => Err(Error::UnsupportedFormat(format!(
            "{}: masks must be grayscale",
            path.as_ref().display()
        ))),
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Writes an 8-bit grayscale PNG with values exactly 0 and 255.
pub fn save_mask_png(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png(path.as_ref(), mask.width, mask.height, png::ColorType::Grayscale, &bytes)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a single `[0, 1]` plane as 8-bit grayscale.
pub fn save_plane_png(plane: &[f32], width: usize, height: usize, path: impl AsRef<Path>) -> Result<()> {
    if plane.len() != width * height {
        return Err(Error::InvalidRaster("plane length does not match dimensions".into()));
    }
    let bytes: Vec<u8> = plane.iter().map(|&v| quantize(v)).collect();
    write_png(path.as_ref(), width, height, png::ColorType::Grayscale, &bytes)
}

/// Writes 1-channel images as grayscale and 3-channel images as RGB, 8 bits per sample.
pub fn save_image_png(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => {
            return Err(Error::UnsupportedFormat(format!(
                "cannot write {n}-channel image as PNG"
            )))
        }
    };
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    write_png(path.as_ref(), img.width, img.height, color, &bytes)
}

/// Interpolation taps along one axis: `(lower index, upper index, upper weight)`.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    let last = (input - 1) as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = src.floor();
            let frac = src - lo;
            let lo = lo as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resampling of a channel-interleaved buffer.
pub(crate) fn resample_bilinear(
    data: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<f32> {
    if width == out_w && height == out_h {
        return data.to_vec();
    }
    let xs = bilinear_taps(width, out_w);
    let ys = bilinear_taps(height, out_h);
    let mut out = Vec::with_capacity(out_w * out_h * channels);
    for &(y0, y1, fy) in &ys {
        let row0 = &data[y0 * width * channels..(y0 + 1) * width * channels];
        let row1 = &data[y1 * width * channels..(y1 + 1) * width * channels];
        for &(x0, x1, fx) in &xs {
            for c in 0..channels {
                let a = row0[x0 * channels + c] as f64;
                let b = row0[x1 * channels + c] as f64;
                let top = a + (b - a) * fx;
                let a = row1[x0 * channels + c] as f64;
                let b = row1[x1 * channels + c] as f64;
                let bottom = a + (b - a) * fx;
                out.push((top + (bottom - top) * fy).clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

/// Types that can be resampled bilinearly.
pub trait Bilinear: Sized {
    fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Result<Self>;
}

impl Bilinear for RasterImage {
    fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Result<Self> {
        check_output_size(out_w, out_h)?;
        let data = resample_bilinear(&self.data, self.width, self.height, self.channels, out_w, out_h);
        Ok(RasterImage {
            width: out_w,
            height: out_h,
            channels: self.channels,
            data,
            space: self.space,
        })
    }
}

impl Bilinear for ProbabilityMap {
    fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Result<Self> {
        check_output_size(out_w, out_h)?;
        let values = resample_bilinear(&self.values, self.width, self.height, 1, out_w, out_h);
        Ok(ProbabilityMap {
            width: out_w,
            height: out_h,
            values,
        })
    }
}

fn check_output_size(out_w: usize, out_h: usize) -> Result<()> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "output size must be at least 1x1, got {out_w}x{out_h}"
        )));
    }
    Ok(())
}

pub fn resize_bilinear<T: Bilinear>(src: &T, out_w: usize, out_h: usize) -> Result<T> {
    src.resize_bilinear(out_w, out_h)
}

fn nearest_index(i: usize, input: usize, output: usize) -> usize {
    (((2 * i + 1) * input) / (2 * output)).min(input - 1)
}

/// Nearest-neighbour resize with half-pixel centres.
pub fn resize_nearest(mask: &BinaryMask, out_w: usize, out_h: usize) -> Result<BinaryMask> {
    check_output_size(out_w, out_h)?;
    if (out_w, out_h) == mask.dims() {
        return Ok(mask.clone());
    }
    let xs: Vec<usize> = (0..out_w).map(|i| nearest_index(i, mask.width, out_w)).collect();
    let mut bits = Vec::with_capacity(out_w * out_h);
    for j in 0..out_h {
        let sy = nearest_index(j, mask.height, out_h);
        bits.extend(xs.iter().map(|&sx| mask.get(sx, sy)));
    }
    BinaryMask::new(out_w, out_h, bits)
}

fn clamp_box(bbox: &BoundingBox, width: usize, height: usize) -> Result<BoundingBox> {
    bbox.clamp(width, height)
        .ok_or(Error::EmptyBox(bbox.as_tuple()))
}

/// Crops `img` to `bbox`, clamping the box to the image first.
pub fn crop(img: &RasterImage, bbox: &BoundingBox) -> Result<RasterImage> {
    let b = clamp_box(bbox, img.width, img.height)?;
    let (w, h) = (b.width() as usize, b.height() as usize);
    let c = img.channels;
    let mut data = Vec::with_capacity(w * h * c);
    for y in b.y0 as usize..b.y1 as usize {
        let start = (y * img.width + b.x0 as usize) * c;
        data.extend_from_slice(&img.data[start..start + w * c]);
    }
    Ok(RasterImage {
        width: w,
        height: h,
        channels: c,
        data,
        space: img.space,
    })
}

pub fn crop_mask(mask: &BinaryMask, bbox: &BoundingBox) -> Result<BinaryMask> {
    let b = clamp_box(bbox, mask.width, mask.height)?;
    let w = b.width() as usize;
    let mut bits = Vec::with_capacity(w * b.height() as usize);
    for y in b.y0 as usize..b.y1 as usize {
        let start = y * mask.width + b.x0 as usize;
        bits.extend_from_slice(&mask.bits[start..start + w]);
    }
    BinaryMask::new(w, b.height() as usize, bits)
}

/// Resizes `prob` to the clamped box and writes it into a zeroed
/// `full_w x full_h` canvas at the box position.
pub fn paste_back(
    prob: &ProbabilityMap,
    bbox: &BoundingBox,
    full_w: usize,
    full_h: usize,
) -> Result<ProbabilityMap> {
    let b = clamp_box(bbox, full_w, full_h)?;
    let (w, h) = (b.width() as usize, b.height() as usize);
    let resized = prob.resize_bilinear(w, h)?;
    let mut values = vec![0.0f32; full_w * full_h];
    for (row, src) in resized.values.chunks_exact(w).enumerate() {
        let start = (b.y0 as usize + row) * full_w + b.x0 as usize;
        values[start..start + w].copy_from_slice(src);
    }
    ProbabilityMap::new(full_w, full_h, values)
}
