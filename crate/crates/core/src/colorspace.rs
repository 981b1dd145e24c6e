//! sRGB to HSV and CIELAB conversion and assembly of the 8-channel
//! segmenter input `[R, G, B, S, V, L, a, b]`.
//!
//! Conversions run in `f64`; stacks are stored as `f32`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imagecore::{ColorSpace, RasterImage};

/// Linear sRGB to XYZ, D65 white, 2 degree observer.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_390_799_265_959_4, 0.357_584_339_383_878, 0.180_480_788_401_834_3],
    [0.212_639_005_871_510_3, 0.715_168_678_767_755_9, 0.072_192_315_360_733_71],
    [0.019_330_818_715_591_825, 0.119_194_779_795_625_96, 0.950_532_152_249_660_7],
];

/// D65 reference white (Y = 1).
pub const D65_WHITE: [f64; 3] = [0.950_455_927_051_671_6, 1.0, 1.089_057_750_759_878_4];

const LAB_DELTA: f64 = 6.0 / 29.0;

/// Hexcone HSV of one pixel; hue is returned in `[0, 1)` (degrees / 360).
pub fn hsv_pixel(r: f64, g: f64, b: f64) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let s = if max > 0.0 { chroma / max } else { 0.0 };
    let h = if chroma == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    [h / 6.0, s, max]
}

/// Inverse of [`hsv_pixel`].
pub fn hsv_to_rgb_pixel(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h * 6.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    if t > LAB_DELTA * LAB_DELTA * LAB_DELTA {
        t.cbrt()
    } else {
        t / (3.0 * LAB_DELTA * LAB_DELTA) + 4.0 / 29.0
    }
}

/// CIELAB of one sRGB pixel: `L` in `[0, 100]`, `a`/`b` roughly `[-128, 127]`.
pub fn lab_pixel(r: f64, g: f64, b: f64) -> [f64; 3] {
    let lin = [srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b)];
    let xyz = RGB_TO_XYZ.map(|row| row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]);
    let fx = lab_f(xyz[0] / D65_WHITE[0]);
    let fy = lab_f(xyz[1] / D65_WHITE[1]);
    let fz = lab_f(xyz[2] / D65_WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn require_srgb(img: &RasterImage) -> Result<()> {
    if img.space() != ColorSpace::Srgb || img.channels() != 3 {
        return Err(Error::InvalidArgument(format!(
            "expected a 3-channel sRGB image, got {:?} with {} channels",
            img.space(),
            img.channels()
        )));
    }
    Ok(())
}

/// Per-pixel HSV with hue scaled to `[0, 1]`, as a 3-channel multichannel image.
pub fn srgb_to_hsv(img: &RasterImage) -> Result<RasterImage> {
    require_srgb(img)?;
    let data = img
        .data()
        .par_chunks_exact(3)
        .flat_map_iter(|px| hsv_pixel(px[0] as f64, px[1] as f64, px[2] as f64).map(|v| v as f32))
        .collect();
    RasterImage::new(img.width(), img.height(), 3, data, ColorSpace::MultiChannel)
}

/// Unscaled CIELAB image. Kept in double precision because `L` spans `[0, 100]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub width: usize,
    pub height: usize,
    /// Row-major `[L, a, b]` triples.
    pub data: Vec<[f64; 3]>,
}

pub fn srgb_to_lab(img: &RasterImage) -> Result<LabImage> {
    require_srgb(img)?;
    let data = img
        .data()
        .par_chunks_exact(3)
        .map(|px| lab_pixel(px[0] as f64, px[1] as f64, px[2] as f64))
        .collect();
    Ok(LabImage {
        width: img.width(),
        height: img.height(),
        data,
    })
}

/// Affine map `(value + offset) / divisor` applied to one stack channel, then clamped.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ChannelScaling {
    pub name: &'static str,
    pub offset: f64,
    pub divisor: f64,
}

impl ChannelScaling {
    const fn new(name: &'static str, offset: f64, divisor: f64) -> Self {
        Self {
            name,
            offset,
            divisor,
        }
    }

    pub fn apply(&self, value: f64) -> f32 {
        ((value + self.offset) / self.divisor).clamp(0.0, 1.0) as f32
    }
}

pub const STACK_CHANNELS: usize = 8;

/// Scaling of each stack channel, in stack order.
pub const STACK_SCALING: [ChannelScaling; STACK_CHANNELS] = [
    ChannelScaling::new("R", 0.0, 1.0),
    ChannelScaling::new("G", 0.0, 1.0),
    ChannelScaling::new("B", 0.0, 1.0),
    ChannelScaling::new("S", 0.0, 1.0),
    ChannelScaling::new("V", 0.0, 1.0),
    ChannelScaling::new("L", 0.0, 100.0),
    ChannelScaling::new("a", 128.0, 255.0),
    ChannelScaling::new("b", 128.0, 255.0),
];

/// Index of the lightness plane.
pub const L_CHANNEL: usize = 5;

/// Eight `[0, 1]` planes, stored channel-first (`C x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    width: usize,
    height: usize,
    planes: Vec<f32>,
}

impl ChannelStack {
    pub fn from_planes(width: usize, height: usize, planes: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidRaster("stack must be at least 1x1".into()));
        }
        if planes.len() != STACK_CHANNELS * width * height {
            return Err(Error::InvalidRaster(format!(
                "stack length {} != 8x{height}x{width}",
                planes.len()
            )));
        }
        if let Some(bad) = planes.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidRaster(format!("stack sample {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            planes,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        STACK_CHANNELS
    }

    pub fn provenance(&self) -> &'static [ChannelScaling; STACK_CHANNELS] {
        &STACK_SCALING
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.planes[c * n..(c + 1) * n]
    }

    /// All planes, channel-first.
    pub fn planes(&self) -> &[f32] {
        &self.planes
    }

    pub fn into_planes(self) -> Vec<f32> {
        self.planes
    }
}

/// Builds the `[R, G, B, S, V, L/100, (a+128)/255, (b+128)/255]` stack.
/// Hue is computed along the way but not kept.
pub fn assemble_channels(img: &RasterImage) -> Result<ChannelStack> {
    require_srgb(img)?;
    let n = img.width() * img.height();
    let pixels: Vec<[f32; STACK_CHANNELS]> = img
        .data()
        .par_chunks_exact(3)
        .map(|px| {
            let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
            let [_, s, v] = hsv_pixel(r, g, b);
            let [l, la, lb] = lab_pixel(r, g, b);
            let raw = [r, g, b, s, v, l, la, lb];
            std::array::from_fn(|c| STACK_SCALING[c].apply(raw[c]))
        })
        .collect();
    let mut planes = vec![0.0f32; STACK_CHANNELS * n];
    for (i, px) in pixels.iter().enumerate() {
        for (c, &v) in px.iter().enumerate() {
            planes[c * n + i] = v;
        }
    }
    ChannelStack::from_planes(img.width(), img.height(), planes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(r: f32, g: f32, b: f32) -> RasterImage {
        RasterImage::from_fn(3, 2, 3, ColorSpace::Srgb, |_, _, c| [r, g, b][c]).unwrap()
    }

    #[test]
    fn hsv_reference_colours() {
        assert_eq!(hsv_pixel(1.0, 0.0, 0.0), [0.0, 1.0, 1.0]);
        assert_eq!(hsv_pixel(0.0, 1.0, 0.0), [120.0 / 360.0, 1.0, 1.0]);
        for g in [0.0, 0.3, 1.0] {
            let [_, s, v] = hsv_pixel(g, g, g);
            assert_eq!((s, v), (0.0, g));
        }
        let hsv = srgb_to_hsv(&solid(0.0, 1.0, 0.0)).unwrap();
        assert_eq!(hsv.pixel(2, 1), &[120.0f32 / 360.0, 1.0, 1.0]);
    }

    #[test]
    fn hsv_inverse_round_trip() {
        for &(r, g, b) in &[(0.2, 0.4, 0.9), (0.9, 0.1, 0.5), (0.33, 0.33, 0.1), (0.0, 0.0, 0.0)] {
            let [h, s, v] = hsv_pixel(r, g, b);
            let back = hsv_to_rgb_pixel(h, s, v);
            for (x, y) in back.iter().zip([r, g, b]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lab_reference_colours() {
        let [l, a, b] = lab_pixel(1.0, 1.0, 1.0);
        assert!((l - 100.0).abs() < 1e-9 && a.abs() <= 1e-6 && b.abs() <= 1e-6);
        assert_eq!(lab_pixel(0.0, 0.0, 0.0), [0.0, 0.0, 0.0]);
        let red = lab_pixel(1.0, 0.0, 0.0);
        for (got, want) in red.iter().zip([53.24, 80.09, 67.20]) {
            assert!((got - want).abs() <= 0.05, "{red:?}");
        }
    }

    #[test]
    fn lab_lightness_increases_on_grays() {
        let ls: Vec<f64> = (0..=255).map(|i| lab_pixel(i as f64 / 255.0, i as f64 / 255.0, i as f64 / 255.0)[0]).collect();
        assert!(ls.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn stack_for_white_and_black() {
        let mid = 128.0f32 / 255.0;
        let white = assemble_channels(&solid(1.0, 1.0, 1.0)).unwrap();
        let black = assemble_channels(&solid(0.0, 0.0, 0.0)).unwrap();
        assert_eq!((white.width(), white.height()), (3, 2));
        let expect_white = [1.0, 1.0, 1.0, 0.0, 1.0, 1.0, mid, mid];
        let expect_black = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, mid, mid];
        for c in 0..STACK_CHANNELS {
            for (&w, &b) in white.channel(c).iter().zip(black.channel(c)) {
                assert!((w - expect_white[c]).abs() < 1e-6, "white channel {c}: {w}");
                assert!((b - expect_black[c]).abs() < 1e-6, "black channel {c}: {b}");
            }
        }
    }

    #[test]
    fn rejects_non_srgb() {
        let gray = RasterImage::filled(2, 2, 1, ColorSpace::Gray, 0.5).unwrap();
        assert!(srgb_to_hsv(&gray).is_err());
        assert!(srgb_to_lab(&gray).is_err());
        assert!(assemble_channels(&gray).is_err());
    }
}
