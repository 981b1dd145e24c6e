//! Training-time augmentation of image/mask pairs and the randomized
//! bounding-box expansion used to cut segmenter training crops.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::colorspace::{hsv_pixel, hsv_to_rgb_pixel};
use crate::error::{Error, Result};
use crate::imagecore::{BinaryMask, BoundingBox, ColorSpace, RasterImage};

/// Deterministic, splittable random stream backed by ChaCha20.
///
/// The same `(seed, stream)` always yields the same draws on every platform.
/// [`SeededRng::split`] derives an independent stream per work item so that
/// parallel batches stay reproducible.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream for work item `index`; does not advance `self`.
    pub fn split(&self, index: u64) -> SeededRng {
        let stream = splitmix64(self.stream ^ splitmix64(index.wrapping_add(1)));
        Self::with_stream(self.seed, stream)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi]`; returns `lo` exactly when the range is collapsed.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.unit();
        if lo == hi {
            lo
        } else {
            lo + (hi - lo) * u
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Closed interval of a sampled parameter.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::InvalidArgument(format!(
                "{name} range [{}, {}] is invalid",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Parameter ranges for [`augment_pair`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentSpec {
    pub rotation_deg: ParamRange,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub shear_deg: ParamRange,
    /// Multiplier on HSV value.
    pub jitter_brightness: ParamRange,
    /// Multiplier on HSV saturation.
    pub jitter_saturation: ParamRange,
    /// Fraction of the image area retained by the random crop.
    pub crop_fraction: ParamRange,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rotation_deg: ParamRange::new(-45.0, 45.0),
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            shear_deg: ParamRange::new(-10.0, 10.0),
            jitter_brightness: ParamRange::new(0.8, 1.2),
            jitter_saturation: ParamRange::new(0.8, 1.2),
            crop_fraction: ParamRange::new(0.8, 1.0),
        }
    }
}

impl AugmentSpec {
    /// Every parameter collapsed to the identity transform.
    pub fn identity() -> Self {
        Self {
            rotation_deg: ParamRange::fixed(0.0),
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            shear_deg: ParamRange::fixed(0.0),
            jitter_brightness: ParamRange::fixed(1.0),
            jitter_saturation: ParamRange::fixed(1.0),
            crop_fraction: ParamRange::fixed(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rotation_deg.check("rotation")?;
        self.shear_deg.check("shear")?;
        self.jitter_brightness.check("brightness")?;
        self.jitter_saturation.check("saturation")?;
        self.crop_fraction.check("crop fraction")?;
        for (name, p) in [("hflip", self.hflip_prob), ("vflip", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        if self.jitter_brightness.lo < 0.0 || self.jitter_saturation.lo < 0.0 {
            return Err(Error::InvalidArgument("jitter factors must be non-negative".into()));
        }
        if self.crop_fraction.lo <= 0.0 || self.crop_fraction.hi > 1.0 {
            return Err(Error::InvalidArgument("crop fraction must lie in (0, 1]".into()));
        }
        if self.shear_deg.lo <= -90.0 || self.shear_deg.hi >= 90.0 {
            return Err(Error::InvalidArgument("shear must lie strictly inside (-90, 90)".into()));
        }
        Ok(())
    }
}

/// One concrete draw from an [`AugmentSpec`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub crop_fraction: f64,
    /// Crop window position in `[0, 1)` per axis.
    pub crop_offset: (f64, f64),
    pub brightness: f64,
    pub saturation: f64,
}

impl AugmentParams {
    /// Draws every parameter in a fixed order, regardless of which ones are degenerate.
    pub fn sample(spec: &AugmentSpec, rng: &mut SeededRng) -> Self {
        let hflip = rng.bernoulli(spec.hflip_prob);
        let vflip = rng.bernoulli(spec.vflip_prob);
        let rotation_deg = rng.uniform(spec.rotation_deg.lo, spec.rotation_deg.hi);
        let shear_deg = rng.uniform(spec.shear_deg.lo, spec.shear_deg.hi);
        let crop_fraction = rng.uniform(spec.crop_fraction.lo, spec.crop_fraction.hi);
        let crop_offset = (rng.unit(), rng.unit());
        let brightness = rng.uniform(spec.jitter_brightness.lo, spec.jitter_brightness.hi);
        let saturation = rng.uniform(spec.jitter_saturation.lo, spec.jitter_saturation.hi);
        Self {
            hflip,
            vflip,
            rotation_deg,
            shear_deg,
            crop_fraction,
            crop_offset,
            brightness,
            saturation,
        }
    }

    fn is_geometric_identity(&self) -> bool {
        !self.hflip
            && !self.vflip
            && self.rotation_deg == 0.0
            && self.shear_deg == 0.0
            && self.crop_fraction == 1.0
    }
}

/// `(sin, cos)` that is exact for multiples of 90 degrees.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    if deg % 90.0 == 0.0 {
        match (deg / 90.0).rem_euclid(4.0) as u8 {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

/// Maps output pixel centres back to source pixel coordinates.
///
/// Forward chain on centred coordinates: flip, then shear `x += tan(shear) * y`,
/// then rotation, then a crop window of relative side `sqrt(crop_fraction)`
/// stretched back to the full frame.
struct InverseWarp {
    centre: (f64, f64),
    scale: f64,
    offset: (f64, f64),
    sin: f64,
    cos: f64,
    tan_shear: f64,
    flip: (f64, f64),
}

impl InverseWarp {
    fn new(params: &AugmentParams, width: usize, height: usize) -> Self {
        let scale = params.crop_fraction.sqrt();
        let slack_x = (1.0 - scale) * width as f64 / 2.0;
        let slack_y = (1.0 - scale) * height as f64 / 2.0;
        let (sin, cos) = sin_cos_deg(params.rotation_deg);
        let tan_shear = if params.shear_deg == 0.0 {
            0.0
        } else {
            params.shear_deg.to_radians().tan()
        };
        Self {
            centre: ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
            scale,
            offset: (
                (2.0 * params.crop_offset.0 - 1.0) * slack_x,
                (2.0 * params.crop_offset.1 - 1.0) * slack_y,
            ),
            sin,
            cos,
            tan_shear,
            flip: (
                if params.hflip { -1.0 } else { 1.0 },
                if params.vflip { -1.0 } else { 1.0 },
            ),
        }
    }

    fn source(&self, i: usize, j: usize) -> (f64, f64) {
        let qx = (i as f64 - self.centre.0) * self.scale + self.offset.0;
        let qy = (j as f64 - self.centre.1) * self.scale + self.offset.1;
        // undo rotation
        let rx = self.cos * qx + self.sin * qy;
        let ry = -self.sin * qx + self.cos * qy;
        // undo shear
        let sx = rx - self.tan_shear * ry;
        let sy = ry;
        (
            self.flip.0 * sx + self.centre.0,
            self.flip.1 * sy + self.centre.1,
        )
    }
}

fn warp_image(img: &RasterImage, warp: &InverseWarp) -> Result<RasterImage> {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let data = img.data();
    let mut out = vec![0.0f32; w * h * c];
    let mut acc = vec![0.0f64; c];
    for j in 0..h {
        for i in 0..w {
            let (sx, sy) = warp.source(i, j);
            let (fx0, fy0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - fx0, sy - fy0);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                    let weight = wx * wy;
                    let (x, y) = (fx0 as i64 + dx, fy0 as i64 + dy);
                    if weight == 0.0 || x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    let base = (y as usize * w + x as usize) * c;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += weight * data[base + ch] as f64;
                    }
                }
            }
            let base = (j * w + i) * c;
            for (ch, a) in acc.iter().enumerate() {
                out[base + ch] = a.clamp(0.0, 1.0) as f32;
            }
        }
    }
    RasterImage::new(w, h, c, out, img.space())
}

fn warp_mask(mask: &BinaryMask, warp: &InverseWarp) -> Result<BinaryMask> {
    let (w, h) = mask.dims();
    BinaryMask::from_fn(w, h, |i, j| {
        let (sx, sy) = warp.source(i, j);
        let (x, y) = ((sx + 0.5).floor(), (sy + 0.5).floor());
        x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64 && mask.get(x as usize, y as usize)
    })
}

fn jitter(img: &RasterImage, brightness: f64, saturation: f64) -> Result<RasterImage> {
    let data: Vec<f32> = if img.space() == ColorSpace::Srgb {
        img.data()
            .chunks_exact(3)
            .flat_map(|px| {
                let [h, s, v] = hsv_pixel(px[0] as f64, px[1] as f64, px[2] as f64);
                let s = (s * saturation).clamp(0.0, 1.0);
                let v = (v * brightness).clamp(0.0, 1.0);
                hsv_to_rgb_pixel(h, s, v).map(|x| x.clamp(0.0, 1.0) as f32)
            })
            .collect()
    } else {
        img.data()
            .iter()
            .map(|&x| (x as f64 * brightness).clamp(0.0, 1.0) as f32)
            .collect()
    };
    RasterImage::new(img.width(), img.height(), img.channels(), data, img.space())
}

/// Applies one sampled geometric transform to both image (bilinear, zero
/// fill) and mask (nearest, false fill), then colour jitter to the image.
pub fn augment_pair(
    img: &RasterImage,
    mask: &BinaryMask,
    spec: &AugmentSpec,
    rng: &mut SeededRng,
) -> Result<(RasterImage, BinaryMask)> {
    spec.validate()?;
    let params = AugmentParams::sample(spec, rng);
    apply_params(img, mask, &params)
}

/// Deterministic part of [`augment_pair`] for an explicit parameter draw.
pub fn apply_params(
    img: &RasterImage,
    mask: &BinaryMask,
    params: &AugmentParams,
) -> Result<(RasterImage, BinaryMask)> {
    if (img.width(), img.height()) != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: (img.width(), img.height()),
            actual: mask.dims(),
        });
    }
    let (mut out_img, out_mask) = if params.is_geometric_identity() {
        (img.clone(), mask.clone())
    } else {
        let warp = InverseWarp::new(params, img.width(), img.height());
        (warp_image(img, &warp)?, warp_mask(mask, &warp)?)
    };
    if params.brightness != 1.0 || params.saturation != 1.0 {
        out_img = jitter(&out_img, params.brightness, params.saturation)?;
    }
    Ok((out_img, out_mask))
}

/// Per-axis linear scale bounds for box expansion.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExpansionRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for ExpansionRange {
    /// `[0.9, 1.1]` per axis, i.e. 81% to 121% of the box area.
    fn default() -> Self {
        Self { lo: 0.9, hi: 1.1 }
    }
}

impl ExpansionRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidArgument(format!(
                "expansion range [{lo}, {hi}] must satisfy 0 < lo <= hi"
            )));
        }
        Ok(Self { lo, hi })
    }

    /// Parses `lo:hi`.
    pub fn parse(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("expected lo:hi, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad number {v:?} in range {s:?}")))
        };
        Self::new(parse(lo)?, parse(hi)?)
    }

    /// Draws `(sx, sy)`, x first.
    pub fn sample(&self, rng: &mut SeededRng) -> (f64, f64) {
        let sx = rng.uniform(self.lo, self.hi);
        let sy = rng.uniform(self.lo, self.hi);
        (sx, sy)
    }
}

/// Rescales `bbox` about its centre by independent per-axis factors drawn
/// from `range`, rounds to whole pixels and clamps to the image.
pub fn expand_bbox(
    bbox: &BoundingBox,
    range: &ExpansionRange,
    rng: &mut SeededRng,
    img_w: usize,
    img_h: usize,
) -> BoundingBox {
    let (sx, sy) = range.sample(rng);
    let scaled = bbox.scaled(sx, sy);
    scaled
        .clamp(img_w, img_h)
        .or_else(|| bbox.clamp(img_w, img_h))
        .unwrap_or_else(|| {
            // Box entirely off-canvas: fall back to the nearest single pixel.
            let x = bbox.x0.clamp(0, img_w as i64 - 1);
            let y = bbox.y0.clamp(0, img_h as i64 - 1);
            BoundingBox {
                x0: x,
                y0: y,
                x1: x + 1,
                y1: y + 1,
            }
        })
}

/// Summary of sampler draws.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SamplerSummary {
    pub n: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Extremes of `sx * sy` over the `n` pairs.
    pub area_min: f64,
    pub area_max: f64,
}

/// Draws `n` `(sx, sy)` pairs exactly as [`expand_bbox`] does and summarizes
/// all `2n` factors and the `n` area ratios.
pub fn sample_statistics(range: &ExpansionRange, n: usize, rng: &mut SeededRng) -> Result<SamplerSummary> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let mut s = SamplerSummary {
        n,
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
        mean: 0.0,
        area_min: f64::INFINITY,
        area_max: f64::NEG_INFINITY,
    };
    let mut sum = 0.0;
    for _ in 0..n {
        let (sx, sy) = range.sample(rng);
        for f in [sx, sy] {
            s.min = s.min.min(f);
            s.max = s.max.max(f);
            sum += f;
        }
        s.area_min = s.area_min.min(sx * sy);
        s.area_max = s.area_max.max(sx * sy);
    }
    s.mean = sum / (2 * n) as f64;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(w: usize, h: usize) -> (RasterImage, BinaryMask) {
        let mask = BinaryMask::from_fn(w, h, |x, y| {
            let (dx, dy) = (x as f64 - w as f64 * 0.45, y as f64 - h as f64 * 0.55);
            dx * dx / 36.0 + dy * dy / 16.0 < 1.0
        })
        .unwrap();
        let img = RasterImage::from_fn(w, h, 3, ColorSpace::Srgb, |x, y, c| {
            if c == 0 {
                if mask.get(x, y) { 0.9 } else { 0.1 }
            } else {
                ((x * 5 + y * 3 + c) % 11) as f32 / 10.0
            }
        })
        .unwrap();
        (img, mask)
    }

    #[test]
    fn rng_is_reproducible_and_splittable() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        let xs: Vec<u64> = (0..5).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..5).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        let mut c1 = a.split(3);
        let mut c2 = a.split(3);
        let mut c3 = a.split(4);
        let v1 = c1.next_u64();
        assert_eq!(v1, c2.next_u64());
        assert_ne!(v1, c3.next_u64());
        assert_eq!(SeededRng::new(1).uniform(2.5, 2.5), 2.5);
    }

    #[test]
    fn identity_spec_is_bit_exact() {
        let (img, mask) = pair(20, 14);
        let (a, m) = augment_pair(&img, &mask, &AugmentSpec::identity(), &mut SeededRng::new(1)).unwrap();
        assert_eq!(a, img);
        assert_eq!(m, mask);
    }

    #[test]
    fn hflip_is_an_involution() {
        let (img, mask) = pair(21, 14);
        let spec = AugmentSpec {
            hflip_prob: 1.0,
            ..AugmentSpec::identity()
        };
        let (a, m) = augment_pair(&img, &mask, &spec, &mut SeededRng::new(1)).unwrap();
        assert_ne!(m, mask);
        assert_eq!(a.pixel(0, 3), img.pixel(20, 3));
        let (a2, m2) = augment_pair(&a, &m, &spec, &mut SeededRng::new(2)).unwrap();
        assert_eq!(a2, img);
        assert_eq!(m2, mask);
    }

    #[test]
    fn quarter_turn_preserves_mask_area() {
        let (img, mask) = pair(24, 24);
        for angle in [90.0, 180.0, -90.0, 270.0] {
            let spec = AugmentSpec {
                rotation_deg: ParamRange::fixed(angle),
                ..AugmentSpec::identity()
            };
            let (_, m) = augment_pair(&img, &mask, &spec, &mut SeededRng::new(5)).unwrap();
            assert_eq!(m.count_true(), mask.count_true(), "angle {angle}");
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (img, _) = pair(8, 8);
        let mask = BinaryMask::empty(8, 9).unwrap();
        assert!(matches!(
            augment_pair(&img, &mask, &AugmentSpec::default(), &mut SeededRng::new(0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn jitter_leaves_mask_alone() {
        let (img, mask) = pair(16, 16);
        let spec = AugmentSpec {
            jitter_brightness: ParamRange::fixed(0.5),
            jitter_saturation: ParamRange::fixed(0.0),
            ..AugmentSpec::identity()
        };
        let (a, m) = augment_pair(&img, &mask, &spec, &mut SeededRng::new(0)).unwrap();
        assert_eq!(m, mask);
        for (px, orig) in a.data().chunks(3).zip(img.data().chunks(3)) {
            let v = orig.iter().cloned().fold(0.0f32, f32::max) * 0.5;
            assert!(px.iter().all(|&c| (c - v).abs() < 1e-6));
        }
    }

    #[test]
    fn expand_examples() {
        let b = BoundingBox::new(100, 100, 200, 200).unwrap();
        let mut rng = SeededRng::new(0);
        let unit = ExpansionRange::new(1.0, 1.0).unwrap();
        assert_eq!(expand_bbox(&b, &unit, &mut rng, 1000, 1000), b);
        let forced = ExpansionRange::new(1.1, 1.1).unwrap();
        assert_eq!(
            expand_bbox(&b, &forced, &mut rng, 1000, 1000),
            BoundingBox::new(95, 95, 205, 205).unwrap()
        );
        let corner = BoundingBox::new(0, 0, 50, 40).unwrap();
        let big = ExpansionRange::new(1.21, 1.21).unwrap();
        let e = expand_bbox(&corner, &big, &mut rng, 1000, 1000);
        assert_eq!((e.x0, e.y0), (0, 0));
        assert_eq!((e.x1, e.y1), (55, 44));
    }

    #[test]
    fn expansion_range_parsing() {
        assert_eq!(ExpansionRange::parse("0.9:1.1").unwrap(), ExpansionRange::default());
        assert!(ExpansionRange::parse("1.1:0.9").is_err());
        assert!(ExpansionRange::parse("0:1").is_err());
        assert!(ExpansionRange::parse("abc").is_err());
    }

    #[test]
    fn collapsed_range_draws_exactly_one() {
        let s = sample_statistics(&ExpansionRange::new(1.0, 1.0).unwrap(), 500, &mut SeededRng::new(3)).unwrap();
        assert_eq!((s.min, s.max, s.mean), (1.0, 1.0, 1.0));
        assert!(sample_statistics(&ExpansionRange::default(), 0, &mut SeededRng::new(3)).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(AugmentSpec::default().validate().is_ok());
        let bad = AugmentSpec {
            hflip_prob: 1.5,
            ..AugmentSpec::default()
        };
        assert!(bad.validate().is_err());
        let inverted = AugmentSpec {
            rotation_deg: ParamRange::new(10.0, -10.0),
            ..AugmentSpec::default()
        };
        assert!(inverted.validate().is_err());
    }
}
