//! Synthetic dermoscopy-like images: a dark filled ellipse on a bright,
//! mildly textured skin-coloured canvas, with the exact ground-truth mask.

use crate::augment::SeededRng;
use crate::error::Result;
use crate::imagecore::{BinaryMask, ColorSpace, RasterImage};

const SKIN: [f32; 3] = [0.86, 0.72, 0.64];

/// Geometry and appearance of one synthetic lesion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseLesion {
    pub width: usize,
    pub height: usize,
    pub cx: f64,
    pub cy: f64,
    /// Full axis lengths in pixels.
    pub major: f64,
    pub minor: f64,
    pub angle_deg: f64,
    /// Drop in HSV value between skin and lesion.
    pub contrast: f32,
    /// Peak amplitude of the multiplicative texture.
    pub texture: f32,
}

impl EllipseLesion {
    /// Draws a lesion that fits entirely inside a random canvas.
    pub fn random(
        rng: &mut SeededRng,
        canvas: (usize, usize),
        axis: (f64, f64),
        contrast: (f32, f32),
    ) -> Self {
        let width = rng.uniform(canvas.0 as f64, canvas.1 as f64).round() as usize;
        let height = rng.uniform(canvas.0 as f64, canvas.1 as f64).round() as usize;
        let limit = (width.min(height) as f64 - 8.0).max(axis.0);
        let major = rng.uniform(axis.0, axis.1.min(limit));
        let minor = rng.uniform(axis.0, major);
        let angle_deg = rng.uniform(0.0, 180.0);
        let r = major / 2.0 + 2.0;
        let cx = rng.uniform(r, width as f64 - r);
        let cy = rng.uniform(r, height as f64 - r);
        let contrast = rng.uniform(contrast.0 as f64, contrast.1 as f64) as f32;
        Self {
            width,
            height,
            cx,
            cy,
            major,
            minor,
            angle_deg,
            contrast,
            texture: 0.04,
        }
    }

    /// Pixel centres inside the ellipse.
    pub fn mask(&self) -> BinaryMask {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (a, b) = (self.major / 2.0, self.minor / 2.0);
        BinaryMask::from_fn(self.width, self.height, |x, y| {
            let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        })
        .expect("lesion canvas is non-empty")
    }

    /// Renders the image; texture noise comes from `seed` so rendering is reproducible.
    pub fn render(&self, seed: u64) -> Result<(RasterImage, BinaryMask)> {
        let mask = self.mask();
        let mut rng = SeededRng::new(seed);
        let lesion_scale = (SKIN[0] - self.contrast).max(0.0) / SKIN[0];
        let mut data = Vec::with_capacity(self.width * self.height * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                let shade = 1.0
                    + 0.5 * self.texture * ((x as f32 * 0.031).sin() * (y as f32 * 0.027).cos());
                let noise = 1.0 + self.texture * (2.0 * rng.unit() as f32 - 1.0);
                let scale = if mask.get(x, y) { lesion_scale } else { 1.0 };
                for ch in SKIN {
                    data.push((ch * scale * shade * noise).clamp(0.0, 1.0));
                }
            }
        }
        let img = RasterImage::new(self.width, self.height, 3, data, ColorSpace::Srgb)?;
        Ok((img, mask))
    }
}

/// Filled axis-aligned or rotated ellipse mask on a blank canvas.
pub fn ellipse_mask(width: usize, height: usize, cx: f64, cy: f64, major: f64, minor: f64, angle_deg: f64) -> BinaryMask {
    EllipseLesion {
        width,
        height,
        cx,
        cy,
        major,
        minor,
        angle_deg,
        contrast: 0.0,
        texture: 0.0,
    }
    .mask()
}
