//! Raw 2D cross-correlation kernels on `N x C x H x W` buffers.
//!
//! Three primitives cover both the strided convolution and its transpose:
//! `forward` (x, w -> y), `backward_input` (dy, w -> dx, the exact adjoint of
//! `forward` in x) and `backward_weight` (x, dy -> dw).

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

    #[allow(clippy::too_many_arguments)]
impl ConvGeom {
    pub fn new(n: usize, cin: usize, cout: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(Self {
            n,
            cin,
            cout,
            h,
            w,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
            k,
            stride,
            pad,
        })
    }

    pub fn in_len(&self) -> usize {
        self.n * self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.n * self.cout * self.ho * self.wo
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    /// Output index window `[lo, hi)` along one axis for kernel tap `t`, and
    /// the input index of `lo`.
    fn window(&self, t: usize, extent_in: usize, extent_out: usize) -> Option<(usize, usize, usize)> {
        let s = self.stride as isize;
        let off = t as isize - self.pad as isize;
        // input = out * s + off must lie in [0, extent_in)
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi_incl = (extent_in as isize - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).min(extent_out as isize);
        if hi <= lo {
            return None;
        }
        Some((lo as usize, hi as usize, (lo * s + off) as usize))
    }

    /// Calls `f(oy, iy, ox_lo, ox_hi, ix_lo)` for every row pairing of tap
    /// `(ky, kx)`.
    #[inline]
    fn for_rows(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let Some((oy_lo, oy_hi, iy_lo)) = self.window(ky, self.h, self.ho) else {
            return;
        };
        let Some((ox_lo, ox_hi, ix_lo)) = self.window(kx, self.w, self.wo) else {
            return;
        };
        for (t, oy) in (oy_lo..oy_hi).enumerate() {
            f(oy, iy_lo + t * self.stride, ox_lo, ox_hi, ix_lo);
        }
    }
}

pub(crate) fn forward(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (hw, ohw, k) = (g.h * g.w, g.ho * g.wo, g.k);
    let mut y = vec![0.0; g.out_len()];
    for n in 0..g.n {
        for co in 0..g.cout {
            let out = &mut y[(n * g.cout + co) * ohw..][..ohw];
            for ci in 0..g.cin {
                let inp = &x[(n * g.cin + ci) * hw..][..hw];
                let taps = &wt[(co * g.cin + ci) * k * k..][..k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = taps[ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        g.for_rows(ky, kx, |oy, iy, lo, hi, ix| {
                            let orow = &mut out[oy * g.wo + lo..oy * g.wo + hi];
                            let irow = &inp[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                for (o, i) in orow.iter_mut().zip(&irow[ix..]) {
                                    *o += wv * i;
                                }
                            } else {
                                for (o, i) in orow.iter_mut().zip(irow[ix..].iter().step_by(g.stride)) {
                                    *o += wv * i;
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn backward_input(dy: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (hw, ohw, k) = (g.h * g.w, g.ho * g.wo, g.k);
    let mut dx = vec![0.0; g.in_len()];
    for n in 0..g.n {
        for ci in 0..g.cin {
            let din = &mut dx[(n * g.cin + ci) * hw..][..hw];
            for co in 0..g.cout {
                let dout = &dy[(n * g.cout + co) * ohw..][..ohw];
                let taps = &wt[(co * g.cin + ci) * k * k..][..k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = taps[ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        g.for_rows(ky, kx, |oy, iy, lo, hi, ix| {
                            let orow = &dout[oy * g.wo + lo..oy * g.wo + hi];
                            let irow = &mut din[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                for (i, o) in irow[ix..].iter_mut().zip(orow) {
                                    *i += wv * o;
                                }
                            } else {
                                for (i, o) in irow[ix..].iter_mut().step_by(g.stride).zip(orow) {
                                    *i += wv * o;
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn backward_weight(x: &[f64], dy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (hw, ohw, k) = (g.h * g.w, g.ho * g.wo, g.k);
    let mut dw = vec![0.0; g.weight_len()];
    for n in 0..g.n {
        for co in 0..g.cout {
            let dout = &dy[(n * g.cout + co) * ohw..][..ohw];
            for ci in 0..g.cin {
                let inp = &x[(n * g.cin + ci) * hw..][..hw];
                let taps = &mut dw[(co * g.cin + ci) * k * k..][..k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        g.for_rows(ky, kx, |oy, iy, lo, hi, ix| {
                            let orow = &dout[oy * g.wo + lo..oy * g.wo + hi];
                            let irow = &inp[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                acc += orow.iter().zip(&irow[ix..]).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                acc += orow
                                    .iter()
                                    .zip(irow[ix..].iter().step_by(g.stride))
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                        });
                        taps[ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    dw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn rand(n: usize, seed: u64) -> Vec<f64> {
        Tensor::random_normal(&[n], seed, 1.0).unwrap().into_data()
    }

    /// Direct loop definition with zero padding.
    fn oracle(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut y = vec![0.0; g.out_len()];
        for n in 0..g.n {
            for co in 0..g.cout {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += wt[((co * g.cin + ci) * g.k + ky) * g.k + kx]
                                        * x[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                        y[((n * g.cout + co) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_loops() {
        for &(h, w, stride) in &[(5, 7, 1), (6, 6, 2), (7, 5, 2), (2, 3, 1), (1, 1, 1)] {
            let g = ConvGeom::new(2, 3, 2, h, w, 3, stride, 1).unwrap();
            let x = rand(g.in_len(), 1);
            let wt = rand(g.weight_len(), 2);
            let a = forward(&x, &wt, &g);
            let b = oracle(&x, &wt, &g);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_halves_with_ceiling() {
        let g = ConvGeom::new(1, 1, 1, 7, 8, 3, 2, 1).unwrap();
        assert_eq!((g.ho, g.wo), (4, 4));
    }

    #[test]
    fn adjoint_and_weight_gradient() {
        for &(h, w, stride) in &[(6, 5, 1), (8, 8, 2), (7, 9, 2)] {
            let g = ConvGeom::new(2, 2, 3, h, w, 3, stride, 1).unwrap();
            let x = rand(g.in_len(), 3);
            let wt = rand(g.weight_len(), 4);
            let dy = rand(g.out_len(), 5);
            let y = forward(&x, &wt, &g);
            let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
            let dx = backward_input(&dy, &wt, &g);
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
            // <y, dy> is linear in w too
            let dw = backward_weight(&x, &dy, &g);
            let rhs_w: f64 = wt.iter().zip(&dw).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_w).abs() < 1e-10);
        }
    }
}
