//! Minimal tensor-level reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward rule. Node indices are a topological order, so the
//! reverse sweep is a single pass from the seed node down to 0.

use crate::error::{Error, Result};
use crate::net::conv::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with stored running statistics.
    Running,
}

pub const BN_EPS: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, geom: ConvGeom },
    /// Transpose of the convolution `geom` (input of this op is the conv's output side).
    Deconv { x: Var, w: Var, geom: ConvGeom },
    Relu { x: Var },
    BatchNorm { x: Var, scale: Var, shift: Var, xhat: Tensor, inv_std: Vec<f64>, mode: BnMode },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Softmax { x: Var },
    CrossEntropy { s: Var, target: Tensor },
    DotConst { x: Var, c: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a batch-mode normalization.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    relu_signature: u64,
}

/// Gradients indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn nchw(t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::invalid(format!("expected N x C x H x W, got {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Hash of every ReLU sign pattern recorded so far. Two passes with equal
    /// signatures took the same linear pieces.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let [n, cin, h, wd] = nchw(self.value(x))?;
        let [cout, wcin, k, k2] = nchw(self.value(w))?;
        if wcin != cin || k != k2 {
            return Err(Error::invalid(format!(
                "kernel {:?} does not fit input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        ConvGeom::new(n, cin, cout, h, wd, k, stride, pad)
            .ok_or_else(|| Error::Size(format!("kernel {k} too large for {h}x{wd} input")))
    }

    /// Cross-correlation with zero padding. Kernel is `Cout x Cin x k x k`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(x, w, stride, pad)?;
        let y = conv::forward(self.value(x).data(), self.value(w).data(), &geom);
        let value = Tensor::from_vec(&[geom.n, geom.cout, geom.ho, geom.wo], y)?;
        Ok(self.push(value, Op::Conv { x, w, geom }))
    }

    /// Transposed convolution: the exact adjoint of `conv2d(., w, stride, pad)`
    /// acting on an `out_h x out_w` input.
    pub fn deconv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, wd] = nchw(self.value(x))?;
        let [cout, cin, k, k2] = nchw(self.value(w))?;
        if cout != c || k != k2 {
            return Err(Error::invalid(format!(
                "kernel {:?} does not fit transposed input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        let geom = ConvGeom::new(n, cin, cout, out_h, out_w, k, stride, pad)
            .ok_or_else(|| Error::Size(format!("kernel {k} too large for {out_h}x{out_w}")))?;
        if (geom.ho, geom.wo) != (h, wd) {
            return Err(Error::Size(format!(
                "{out_h}x{out_w} target does not convolve down to {h}x{wd}"
            )));
        }
        let z = conv::backward_input(self.value(x).data(), self.value(w).data(), &geom);
        let value = Tensor::from_vec(&[n, cin, out_h, out_w], z)?;
        Ok(self.push(value, Op::Deconv { x, w, geom }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        // FNV-1a over the sign bits
        let mut hsh = self.relu_signature ^ 0xcbf2_9ce4_8422_2325;
        for &a in self.value(x).data() {
            hsh ^= (a > 0.0) as u64;
            hsh = hsh.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.relu_signature = hsh;
        self.push(v, Op::Relu { x })
    }

    /// Per-channel normalization over batch and space followed by the affine
    /// map `scale * xhat + shift`. In [`BnMode::Running`] the supplied running
    /// statistics are used and no statistics are returned.
    pub fn batchnorm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mode: BnMode,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BnStats>)> {
        let [n, c, h, w] = nchw(self.value(x))?;
        if self.value(scale).len() != c || self.value(shift).len() != c {
            return Err(Error::invalid(format!("batchnorm affine must have {c} entries")));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xs = self.value(x).data();
        let (mean, var, stats) = match mode {
            BnMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xs[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut q = 0.0;
                    for b in 0..n {
                        q += xs[(b * c + ch) * hw..][..hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / m;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
                    .collect();
                let stats = BnStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            BnMode::Running => {
                let (rm, rv) = running.ok_or_else(|| Error::invalid("running statistics required"))?;
                if rm.len() != c || rv.len() != c {
                    return Err(Error::invalid(format!("running statistics must have {c} entries")));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut y = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for k in off..off + hw {
                    let z = (xs[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = z;
                    y[k] = gamma[ch] * z + beta[ch];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let xhat = Tensor::from_vec(&shape, xhat)?;
        let var_out = self.push(
            Tensor::from_vec(&shape, y)?,
            Op::BatchNorm { x, scale, shift, xhat, inv_std, mode },
        );
        Ok((var_out, stats))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub { a, b }))
    }

    /// Softmax across the channel axis of `N x C x H x W`.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self.value(x))?;
        let hw = h * w;
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for px in 0..hw {
                let at = |ch: usize| (b * c + ch) * hw + px;
                let mx = (0..c).map(|ch| xs[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (xs[at(ch)] - mx).exp();
                    out[at(ch)] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[at(ch)] /= z;
                }
            }
        }
        let value = Tensor::from_vec(self.value(x).shape(), out)?;
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// `-mean over samples and pixels of sum_c [t log s + (1 - t) log(1 - s)]`
    /// with `s` clamped to `[1e-12, 1 - 1e-12]`.
    pub fn cross_entropy(&mut self, s: Var, target: &Tensor) -> Result<Var> {
        let [n, _, h, w] = nchw(self.value(s))?;
        target.expect_shape(self.value(s).shape())?;
        let pixels = (n * h * w) as f64;
        let mut total = 0.0;
        for (&p, &t) in self.value(s).data().iter().zip(target.data()) {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total += t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        let value = Tensor::from_vec(&[1], vec![-total / pixels])?;
        Ok(self.push(value, Op::CrossEntropy { s, target: target.clone() }))
    }

    /// `<x, c>` for a constant `c`.
    pub fn dot_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let v = self.value(x).dot(c)?;
        let value = Tensor::from_vec(&[1], vec![v])?;
        Ok(self.push(value, Op::DotConst { x, c: c.clone() }))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid("backward needs a scalar root"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(&[1], 1.0)?);

        fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
            match &mut grads[v.0] {
                Some(acc) => acc.axpy(1.0, &g),
                slot => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Conv { x, w, geom } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let dx = conv::backward_input(gy.data(), wv.data(), geom);
                    let dw = conv::backward_weight(xv.data(), gy.data(), geom);
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), dx)?)?;
                    accumulate(&mut grads, *w, Tensor::from_vec(wv.shape(), dw)?)?;
                }
                Op::Deconv { x, w, geom } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let dx = conv::forward(gy.data(), wv.data(), geom);
                    let dw = conv::backward_weight(gy.data(), xv.data(), geom);
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), dx)?)?;
                    accumulate(&mut grads, *w, Tensor::from_vec(wv.shape(), dw)?)?;
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let mut dx = gy;
                    for (g, &a) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::BatchNorm { x, scale, shift, xhat, inv_std, mode } => {
                    let [n, c, h, w] = nchw(&gy)?;
                    let hw = h * w;
                    let m = (n * hw) as f64;
                    let gamma = self.value(*scale).data();
                    let dyv = gy.data();
                    let xh = xhat.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for k in off..off + hw {
                                dgamma[ch] += dyv[k] * xh[k];
                                dbeta[ch] += dyv[k];
                            }
                        }
                    }
                    let mut dx = vec![0.0; dyv.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let a = gamma[ch] * inv_std[ch];
                            match mode {
                                BnMode::Running => {
                                    for k in off..off + hw {
                                        dx[k] = a * dyv[k];
                                    }
                                }
                                BnMode::Batch => {
                                    let (sg, sgx) = (dbeta[ch] / m, dgamma[ch] / m);
                                    for k in off..off + hw {
                                        dx[k] = a * (dyv[k] - sg - xh[k] * sgx);
                                    }
                                }
                            }
                        }
                    }
                    let sshape = self.value(*scale).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::from_vec(gy.shape(), dx)?)?;
                    accumulate(&mut grads, *scale, Tensor::from_vec(&sshape, dgamma)?)?;
                    accumulate(&mut grads, *shift, Tensor::from_vec(&sshape, dbeta)?)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, gy.clone())?;
                    accumulate(&mut grads, *b, gy)?;
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, *b, gy.scale(-1.0))?;
                    accumulate(&mut grads, *a, gy)?;
                }
                Op::Softmax { x } => {
                    let [n, c, h, w] = nchw(&node.value)?;
                    let hw = h * w;
                    let s = node.value.data();
                    let ds = gy.data();
                    let mut dx = vec![0.0; s.len()];
                    for b in 0..n {
                        for px in 0..hw {
                            let at = |ch: usize| (b * c + ch) * hw + px;
                            let inner: f64 = (0..c).map(|ch| s[at(ch)] * ds[at(ch)]).sum();
                            for ch in 0..c {
                                dx[at(ch)] = s[at(ch)] * (ds[at(ch)] - inner);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(node.value.shape(), dx)?)?;
                }
                Op::CrossEntropy { s, target } => {
                    let sv = self.value(*s);
                    let [n, _, h, w] = nchw(sv)?;
                    let scale = -gy.data()[0] / (n * h * w) as f64;
                    let ds: Vec<f64> = sv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| {
                            if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                                0.0
                            } else {
                                scale * (t / p - (1.0 - t) / (1.0 - p))
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *s, Tensor::from_vec(sv.shape(), ds)?)?;
                }
                Op::DotConst { x, c } => {
                    accumulate(&mut grads, *x, c.scale(gy.data()[0]))?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::random_normal(shape, seed, 1.0).unwrap()
    }

    /// Central-difference check of `d <root, probe> / d leaf` for one leaf.
    fn fd_check(
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        leaves: &[Tensor],
        which: usize,
    ) -> f64 {
        let run = |vals: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone())).collect();
            let r = build(&mut t, &vs);
            (t.value(r).data()[0], t, vs, r)
        };
        let (_, tape, vs, r) = run(leaves);
        let g = tape.backward(r).unwrap();
        let analytic = g.get(vs[which]).cloned().unwrap_or(Tensor::zeros(leaves[which].shape()).unwrap());
        let step = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..leaves[which].len() {
            let mut up = leaves.to_vec();
            up[which].data_mut()[k] += step;
            let mut dn = leaves.to_vec();
            dn[which].data_mut()[k] -= step;
            let fd = (run(&up).0 - run(&dn).0) / (2.0 * step);
            let a = analytic.data()[k];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
        worst
    }

    #[test]
    fn conv_gradients() {
        let x = rand(&[2, 2, 5, 6], 1);
        let w = rand(&[3, 2, 3, 3], 2);
        let probe = rand(&[2, 3, 5, 6], 3);
        let build = |t: &mut Tape, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], 1, 1).unwrap();
            t.dot_const(y, &probe).unwrap()
        };
        assert!(fd_check(build, &[x.clone(), w.clone()], 0) <= 1e-4);
        assert!(fd_check(build, &[x, w], 1) <= 1e-4);
    }

    #[test]
    fn conv_identity_and_counting() {
        let mut t = Tape::new();
        let x = rand(&[1, 2, 4, 4], 4);
        let mut eye = Tensor::zeros(&[2, 2, 1, 1]).unwrap();
        eye.data_mut()[0] = 1.0;
        eye.data_mut()[3] = 1.0;
        let xv = t.leaf(x.clone());
        let wv = t.leaf(eye);
        let y = t.conv2d(xv, wv, 1, 0).unwrap();
        assert_eq!(t.value(y), &x);

        let ones = t.leaf(Tensor::full(&[1, 1, 5, 5], 1.0).unwrap());
        let k = t.leaf(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
        let y = t.conv2d(ones, k, 1, 1).unwrap();
        let v = t.value(y);
        assert_eq!(v.data()[6], 9.0);
        assert_eq!(v.data()[0], 4.0);
        assert_eq!(v.data()[2], 6.0);
    }

    #[test]
    fn deconv_is_adjoint_and_differentiable() {
        for t in 0..10 {
            let w = rand(&[3, 2, 3, 3], 10 + t);
            let x = rand(&[1, 2, 8, 6], 20 + t);
            let y = rand(&[1, 3, 4, 3], 30 + t);
            let mut tape = Tape::new();
            let (xv, wv, yv) = (tape.leaf(x.clone()), tape.leaf(w), tape.leaf(y.clone()));
            let cx = tape.conv2d(xv, wv, 2, 1).unwrap();
            let dy = tape.deconv2d(yv, wv, 2, 1, 8, 6).unwrap();
            let lhs = tape.value(cx).dot(&y).unwrap();
            let rhs = x.dot(tape.value(dy)).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10);
        }
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, 3, 4, 4]).unwrap());
        let w = tape.leaf(rand(&[3, 2, 3, 3], 1));
        let d = tape.deconv2d(z, w, 2, 1, 8, 8).unwrap();
        assert_eq!(tape.value(d).max_abs(), 0.0);

        let probe = rand(&[1, 2, 7, 8], 5);
        let build = |t: &mut Tape, v: &[Var]| {
            let d = t.deconv2d(v[0], v[1], 2, 1, 7, 8).unwrap();
            t.dot_const(d, &probe).unwrap()
        };
        let leaves = [rand(&[1, 3, 4, 4], 6), rand(&[3, 2, 3, 3], 7)];
        assert!(fd_check(build, &leaves, 0) <= 1e-4);
        assert!(fd_check(build, &leaves, 1) <= 1e-4);
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap());
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);

        // keep pre-activations away from the kink
        let x = rand(&[1, 1, 4, 4], 8).map(|v| if v.abs() < 1e-2 { 0.5 } else { v });
        let probe = rand(&[1, 1, 4, 4], 9);
        let build = |t: &mut Tape, v: &[Var]| {
            let y = t.relu(v[0]);
            t.dot_const(y, &probe).unwrap()
        };
        assert!(fd_check(build, &[x], 0) <= 1e-4);
    }

    #[test]
    fn batchnorm_normalizes_and_differentiates() {
        let mut t = Tape::new();
        let x = t.leaf(rand(&[3, 2, 4, 4], 11).map(|v| 3.0 * v + 1.0));
        let g = t.leaf(Tensor::full(&[2], 1.0).unwrap());
        let b = t.leaf(Tensor::zeros(&[2]).unwrap());
        let (y, stats) = t.batchnorm(x, g, b, BnMode::Batch, None).unwrap();
        assert!(stats.is_some());
        let v = t.value(y);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| v.plane(n * 2 + ch).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() <= 1e-6);
            // the variance floor shifts the result by about eps / var
            assert!((var - 1.0).abs() <= 1e-4);
        }

        let probe = rand(&[2, 2, 3, 3], 12);
        for mode in [BnMode::Batch, BnMode::Running] {
            let build = |t: &mut Tape, v: &[Var]| {
                let rm = [0.3, -0.2];
                let rv = [1.5, 0.7];
                let (y, _) = t.batchnorm(v[0], v[1], v[2], mode, Some((&rm, &rv))).unwrap();
                t.dot_const(y, &probe).unwrap()
            };
            let leaves = [rand(&[2, 2, 3, 3], 13), rand(&[2], 14), rand(&[2], 15)];
            for which in 0..3 {
                assert!(fd_check(build, &leaves, which) <= 1e-4, "{mode:?} leaf {which}");
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_and_differentiates() {
        let mut t = Tape::new();
        let x = t.leaf(rand(&[2, 3, 4, 5], 16).scale(5.0));
        let s = t.softmax_channels(x).unwrap();
        let v = t.value(s);
        for b in 0..2 {
            for px in 0..20 {
                let sum: f64 = (0..3).map(|c| v.data()[(b * 3 + c) * 20 + px]).sum();
                assert!((sum - 1.0).abs() <= 1e-10);
            }
        }
        let probe = rand(&[1, 3, 2, 2], 17);
        let build = |t: &mut Tape, v: &[Var]| {
            let s = t.softmax_channels(v[0]).unwrap();
            t.dot_const(s, &probe).unwrap()
        };
        assert!(fd_check(build, &[rand(&[1, 3, 2, 2], 18)], 0) <= 1e-4);
    }

    #[test]
    fn cross_entropy_values() {
        let target = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut t = Tape::new();
        let s = t.leaf(target.clone());
        let l = t.cross_entropy(s, &target).unwrap();
        assert!(t.value(l).data()[0] <= 1e-10);

        let half = t.leaf(Tensor::full(&[1, 2, 1, 2], 0.5).unwrap());
        let l = t.cross_entropy(half, &target).unwrap();
        assert!((t.value(l).data()[0] - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let target = Tensor::from_vec(&[1, 3, 2, 2], {
            let mut v = vec![0.0; 12];
            v[0] = 1.0;
            v[5] = 1.0;
            v[10] = 1.0;
            v[3] = 1.0;
            v
        })
        .unwrap();
        let build = |t: &mut Tape, v: &[Var]| {
            let s = t.softmax_channels(v[0]).unwrap();
            t.cross_entropy(s, &target).unwrap()
        };
        assert!(fd_check(build, &[rand(&[1, 3, 2, 2], 19)], 0) <= 1e-4);
    }

    #[test]
    fn shared_leaf_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[1], vec![3.0]).unwrap());
        let y = t.add(x, x).unwrap();
        let z = t.sub(y, x).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);
    }
}
