//! Test-time augmentation: identity, quarter turn, half turn and horizontal
//! flip of a square stack, each segmented separately, mapped back to the
//! original orientation and averaged as probabilities.
//!
//! Rotation convention: a quarter turn is counter-clockwise and moves pixel
//! `(x, y)` to `(y, N - 1 - x)`.

use crate::backend::{BackendError, Segmenter};
use crate::colorspace::{ChannelStack, STACK_CHANNELS};
use crate::error::{Error, Result};
use crate::imagecore::ProbabilityMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TtaKind {
    Identity,
    Rot90,
    Rot180,
    HFlip,
}

impl TtaKind {
    /// Variant order used everywhere, including the merge.
    pub const ALL: [TtaKind; 4] = [TtaKind::Identity, TtaKind::Rot90, TtaKind::Rot180, TtaKind::HFlip];

    /// Where the forward transform sends pixel `(x, y)` on an `n x n` grid.
    pub fn destination(self, n: usize, x: usize, y: usize) -> (usize, usize) {
        match self {
            TtaKind::Identity => (x, y),
            TtaKind::Rot90 => (y, n - 1 - x),
            TtaKind::Rot180 => (n - 1 - x, n - 1 - y),
            TtaKind::HFlip => (n - 1 - x, y),
        }
    }
}

/// A TTA transform together with its pixel permutation on a fixed grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TtaVariant {
    pub kind: TtaKind,
    size: usize,
    /// `forward[src] = dst` in row-major indices.
    forward: Vec<usize>,
}

impl TtaVariant {
    pub fn new(kind: TtaKind, size: usize) -> Self {
        let mut forward = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = kind.destination(size, x, y);
                forward.push(dy * size + dx);
            }
        }
        Self { kind, size, forward }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn forward_permutation(&self) -> &[usize] {
        &self.forward
    }

    /// `inverse[dst] = src`.
    pub fn inverse_permutation(&self) -> Vec<usize> {
        let mut inv = vec![0; self.forward.len()];
        for (src, &dst) in self.forward.iter().enumerate() {
            inv[dst] = src;
        }
        inv
    }

    pub fn apply<T: Copy + Default>(&self, plane: &[T]) -> Vec<T> {
        assert_eq!(plane.len(), self.forward.len(), "plane does not match variant grid");
        let mut out = vec![T::default(); plane.len()];
        for (src, &dst) in self.forward.iter().enumerate() {
            out[dst] = plane[src];
        }
        out
    }

    pub fn invert<T: Copy + Default>(&self, plane: &[T]) -> Vec<T> {
        assert_eq!(plane.len(), self.forward.len(), "plane does not match variant grid");
        self.forward.iter().map(|&dst| plane[dst]).collect()
    }

    pub fn apply_stack(&self, stack: &ChannelStack) -> ChannelStack {
        let planes = (0..STACK_CHANNELS).flat_map(|c| self.apply(stack.channel(c))).collect();
        ChannelStack::from_planes(stack.width(), stack.height(), planes)
            .expect("a permutation keeps the stack valid")
    }

    pub fn invert_map(&self, map: &ProbabilityMap) -> ProbabilityMap {
        ProbabilityMap::new(map.width(), map.height(), self.invert(map.values()))
            .expect("a permutation keeps the map valid")
    }
}

fn square_side(width: usize, height: usize) -> Result<usize> {
    if width != height {
        return Err(Error::InvalidArgument(format!(
            "TTA needs a square input, got {width}x{height}"
        )));
    }
    Ok(width)
}

pub fn variants_for(size: usize) -> [TtaVariant; 4] {
    TtaKind::ALL.map(|k| TtaVariant::new(k, size))
}

/// `[identity, rot90, rot180, hflip]` of `stack`.
pub fn make_variants(stack: &ChannelStack) -> Result<Vec<ChannelStack>> {
    let n = square_side(stack.width(), stack.height())?;
    Ok(variants_for(n).iter().map(|v| v.apply_stack(stack)).collect())
}

/// Pixelwise mean of exactly four maps, summed in the given order.
pub fn merge(outputs: &[ProbabilityMap]) -> Result<ProbabilityMap> {
    if outputs.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "merge expects 4 maps, got {}",
            outputs.len()
        )));
    }
    let dims = outputs[0].dims();
    if let Some(bad) = outputs.iter().find(|m| m.dims() != dims) {
        return Err(Error::DimensionMismatch {
            expected: dims,
            actual: bad.dims(),
        });
    }
    let values = (0..dims.0 * dims.1)
        .map(|i| {
            let sum: f64 = outputs.iter().map(|m| m.values()[i] as f64).sum();
            (sum / 4.0).clamp(0.0, 1.0) as f32
        })
        .collect();
    ProbabilityMap::new(dims.0, dims.1, values)
}

fn checked_segment(segmenter: &mut dyn Segmenter, stack: &ChannelStack) -> std::result::Result<ProbabilityMap, BackendError> {
    let map = segmenter.segment(stack)?;
    if map.dims() != (stack.width(), stack.height()) {
        return Err(BackendError::InvalidOutput(format!(
            "segmenter returned {:?} for a {}x{} stack",
            map.dims(),
            stack.width(),
            stack.height()
        )));
    }
    Ok(map)
}

/// Segments `stack` through all four variants and averages the
/// back-transformed outputs; with `enabled == false` runs the segmenter once.
pub fn tta_segment(stack: &ChannelStack, segmenter: &mut dyn Segmenter, enabled: bool) -> Result<ProbabilityMap> {
    if !enabled {
        return checked_segment(segmenter, stack).map_err(|e| Error::backend("segmentation", e));
    }
    let n = square_side(stack.width(), stack.height())?;
    let mut outputs = Vec::with_capacity(4);
    for (index, variant) in variants_for(n).iter().enumerate() {
        let map = checked_segment(segmenter, &variant.apply_stack(stack)).map_err(|e| {
            Error::backend(
                "segmentation",
                BackendError::Variant {
                    index,
                    source: Box::new(e),
                },
            )
        })?;
        outputs.push(variant.invert_map(&map));
    }
    merge(&outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::BaselineSegmenter;

    #[test]
    fn hot_pixel_follows_convention() {
        let n = 5;
        let mut plane = vec![0.0f32; n * n];
        plane[0] = 1.0;
        let planes: Vec<f32> = (0..STACK_CHANNELS).flat_map(|_| plane.clone()).collect();
        let stack = ChannelStack::from_planes(n, n, planes).unwrap();
        let vars = make_variants(&stack).unwrap();
        let hot = |s: &ChannelStack| s.channel(0).iter().position(|&v| v == 1.0).unwrap();
        assert_eq!(hot(&vars[0]), 0);
        assert_eq!(hot(&vars[1]), (n - 1) * n); // (0, N-1)
        assert_eq!(hot(&vars[2]), n * n - 1);
        assert_eq!(hot(&vars[3]), n - 1);
    }

    #[test]
    fn constant_stack_variants_are_constant() {
        let stack = ChannelStack::from_planes(3, 3, vec![0.25; 72]).unwrap();
        for v in make_variants(&stack).unwrap() {
            assert_eq!(v, stack);
        }
    }

    #[test]
    fn non_square_rejected() {
        let stack = ChannelStack::from_planes(3, 2, vec![0.0; 48]).unwrap();
        assert!(make_variants(&stack).is_err());
        let mut seg = BaselineSegmenter::default();
        assert!(tta_segment(&stack, &mut seg, true).is_err());
        assert!(tta_segment(&stack, &mut seg, false).is_ok());
    }

    #[test]
    fn merge_rules() {
        let m = |v: f32| ProbabilityMap::filled(2, 2, v).unwrap();
        assert_eq!(merge(&[m(0.3), m(0.3), m(0.3), m(0.3)]).unwrap().values()[0], 0.3);
        assert_eq!(merge(&[m(0.0), m(0.0), m(1.0), m(1.0)]).unwrap().values()[0], 0.5);
        assert_eq!(
            merge(&[m(1.0), m(0.0), m(1.0), m(0.0)]).unwrap(),
            merge(&[m(0.0), m(1.0), m(0.0), m(1.0)]).unwrap()
        );
        assert!(merge(&[m(0.0), m(0.0), m(0.0)]).is_err());
        let odd = ProbabilityMap::filled(3, 2, 0.0).unwrap();
        assert!(matches!(
            merge(&[m(0.0), m(0.0), m(0.0), odd]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    struct Constant(f32);

    impl Segmenter for Constant {
        fn segment(&mut self, stack: &ChannelStack) -> std::result::Result<ProbabilityMap, BackendError> {
            Ok(ProbabilityMap::filled(stack.width(), stack.height(), self.0).unwrap())
        }
    }

    struct FailsOn(usize, usize);

    impl Segmenter for FailsOn {
        fn segment(&mut self, stack: &ChannelStack) -> std::result::Result<ProbabilityMap, BackendError> {
            self.1 += 1;
            if self.1 - 1 == self.0 {
                return Err(BackendError::Exit { code: Some(9), stderr: String::new() });
            }
            Ok(ProbabilityMap::filled(stack.width(), stack.height(), 0.0).unwrap())
        }
    }

    #[test]
    fn constant_segmenter_and_failures() {
        let stack = ChannelStack::from_planes(4, 4, (0..128).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let out = tta_segment(&stack, &mut Constant(0.37), true).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.37));

        let err = tta_segment(&stack, &mut FailsOn(2, 0), true).unwrap_err();
        match err {
            Error::Backend { source: BackendError::Variant { index, .. }, .. } => assert_eq!(index, 2),
            other => panic!("unexpected {other}"),
        }
    }
}
