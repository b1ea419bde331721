//! Symmetric zero padding to a multiple of the network's coarsening factor.

use crate::error::{Error, Result};
use crate::fusion::SegMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    /// Padding that brings `h x w` up to multiples of `m`; odd totals put the
    /// extra pixel at the bottom or right.
    pub fn to_multiple(h: usize, w: usize, m: usize) -> Self {
        let extra = |n: usize| n.div_ceil(m) * m - n;
        let (eh, ew) = (extra(h), extra(w));
        Self { top: eh / 2, bottom: eh - eh / 2, left: ew / 2, right: ew - ew / 2 }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }
}

/// Pads every plane of a rank-2 or rank-3 tensor.
pub fn pad(t: &Tensor, p: Padding) -> Result<Tensor> {
    let (h, w) = t.hw();
    let (ho, wo) = (h + p.top + p.bottom, w + p.left + p.right);
    let planes = t.planes();
    let mut out = vec![0.0; planes * ho * wo];
    for c in 0..planes {
        let src = t.plane(c);
        for i in 0..h {
            let dst = (c * ho + i + p.top) * wo + p.left;
            out[dst..dst + w].copy_from_slice(&src[i * w..(i + 1) * w]);
        }
    }
    let mut shape = t.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = ho;
    shape[n - 1] = wo;
    Tensor::from_vec(&shape, out)
}

pub fn crop_mask(m: &SegMask, p: Padding) -> Result<SegMask> {
    let (h, w) = (m.height(), m.width());
    if p.top + p.bottom >= h || p.left + p.right >= w {
        return Err(Error::Size(format!("padding {p:?} removes the whole {h}x{w} mask")));
    }
    let (ho, wo) = (h - p.top - p.bottom, w - p.left - p.right);
    let mut labels = Vec::with_capacity(ho * wo);
    for i in p.top..p.top + ho {
        labels.extend_from_slice(&m.labels()[i * w + p.left..i * w + p.left + wo]);
    }
    SegMask::new(ho, wo, m.classes(), labels)
}

pub fn pad_mask(m: &SegMask, p: Padding) -> Result<SegMask> {
    let t = Tensor::from_vec(&[m.height(), m.width()], m.labels().iter().map(|&l| l as f64).collect())?;
    let padded = pad(&t, p)?;
    let (h, w) = padded.hw();
    SegMask::new(h, w, m.classes(), padded.data().iter().map(|&v| v as u32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn amounts() {
        assert_eq!(Padding::to_multiple(8, 8, 4), Padding::default());
        assert_eq!(Padding::to_multiple(13, 6, 4), Padding { top: 1, bottom: 2, left: 1, right: 1 });
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let m = SegMask::new(3, 5, 3, (0..15).map(|i| i % 3).collect()).unwrap();
        let p = Padding::to_multiple(3, 5, 4);
        let padded = pad_mask(&m, p).unwrap();
        assert_eq!((padded.height(), padded.width()), (4, 8));
        assert_eq!(crop_mask(&padded, p).unwrap(), m);

        let t = Tensor::random_normal(&[2, 3, 5], 1, 1.0).unwrap();
        let pt = pad(&t, p).unwrap();
        assert_eq!(pt.shape(), &[2, 4, 8]);
        assert_eq!(pt.sum(), t.sum());
        assert_eq!(pt.data()[0], 0.0);
    }
}
