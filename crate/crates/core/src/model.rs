//! Convex multi-phase Mumford–Shah model.
//!
//! Energy over a `d`-channel feature field `u` and a single-channel image `f`:
//!
//! ```text
//! E(u) = sum (f - A u)^2 + mu * sum_c sum_px ( nu |grad u_c|^2 + sqrt(|grad u_c|^2 + eps^2) - eps )
//! ```
//!
//! and the nonlinear system operator `F(u) = A^T A u - mu div(phi'(grad u))`
//! with `phi'(g) = 2 nu g + g / sqrt(|g|^2 + eps^2)`.
//!
//! `F(u) - A^T f` is the exact gradient of [`system_energy`]
//! (`1/2 sum (f - A u)^2 + mu * R(u)`); with `mu = 0` that is half the gradient of
//! [`eval_energy`].

use crate::error::{Error, Result};
use crate::tensor::{div_backward, grad_forward, GradField, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum BlurKind {
    Identity,
    Gaussian { sigma: f64, radius: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlurSpec {
    pub kind: BlurKind,
    /// Nonnegative weights mapping the `d` feature channels to one image channel.
    pub channel_mix: Vec<f64>,
}

impl BlurSpec {
    pub fn identity(channels: usize) -> Self {
        Self {
            kind: BlurKind::Identity,
            channel_mix: vec![1.0 / channels as f64; channels],
        }
    }

    pub fn gaussian(channels: usize, sigma: f64, radius: usize) -> Self {
        Self {
            kind: BlurKind::Gaussian { sigma, radius },
            channel_mix: vec![1.0 / channels as f64; channels],
        }
    }

    /// Normalized `(2r+1) x (2r+1)` kernel, or `None` for the identity.
    pub fn kernel(&self) -> Option<(usize, Vec<f64>)> {
        match self.kind {
            BlurKind::Identity => None,
            BlurKind::Gaussian { sigma, radius } => {
                let r = radius as isize;
                let n = 2 * radius + 1;
                let mut k = Vec::with_capacity(n * n);
                for a in -r..=r {
                    for b in -r..=r {
                        let d2 = (a * a + b * b) as f64;
                        k.push((-d2 / (2.0 * sigma * sigma)).exp());
                    }
                }
                let s: f64 = k.iter().sum();
                k.iter_mut().for_each(|v| *v /= s);
                Some((radius, k))
            }
        }
    }

    fn validate(&self, channels: usize) -> Result<()> {
        if self.channel_mix.len() != channels {
            return Err(Error::invalid(format!(
                "channel_mix has {} weights for {channels} channels",
                self.channel_mix.len()
            )));
        }
        if self.channel_mix.iter().any(|&w| w.is_nan() || w < 0.0) {
            return Err(Error::invalid("channel_mix weights must be nonnegative"));
        }
        let s: f64 = self.channel_mix.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("channel_mix sums to {s}, expected 1")));
        }
        if let BlurKind::Gaussian { sigma, .. } = self.kind {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::invalid(format!("gaussian sigma must be positive, got {sigma}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub mu: f64,
    pub nu: f64,
    pub eps_tv: f64,
    pub blur: BlurSpec,
    pub channels: usize,
    /// `false` drops the TV term, leaving the linear quadratic model.
    pub tv_enabled: bool,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            mu: 1.0,
            nu: 0.0,
            eps_tv: 1e-3,
            blur: BlurSpec::identity(1),
            channels: 1,
            tv_enabled: true,
        }
    }
}

impl ModelParams {
    pub fn new(mu: f64, nu: f64, eps_tv: f64) -> Result<Self> {
        let p = Self {
            mu,
            nu,
            eps_tv,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn linear(mu: f64, nu: f64) -> Result<Self> {
        let p = Self {
            mu,
            nu,
            tv_enabled: false,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::invalid(format!("mu must be >= 0, got {}", self.mu)));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::invalid(format!("nu must be >= 0, got {}", self.nu)));
        }
        if !(self.eps_tv > 0.0 && self.eps_tv.is_finite()) {
            return Err(Error::invalid(format!("eps_tv must be > 0, got {}", self.eps_tv)));
        }
        if self.channels == 0 {
            return Err(Error::invalid("channels must be >= 1"));
        }
        self.blur.validate(self.channels)
    }

    /// Upper bound on `||A^T A||`: the square of the larger of the maximum
    /// row and column sums of the (nonnegative) blur matrix at these extents.
    pub fn blur_norm_sq(&self, h: usize, w: usize) -> Result<f64> {
        let ones = Tensor::full(&[h, w], 1.0)?;
        let col = apply_at(&ones, self)?.max_abs();
        let ones_u = Tensor::full(&[self.channels, h, w], 1.0)?;
        let row = apply_a(&ones_u, self)?.max_abs();
        let n = col.max(row);
        Ok(n * n)
    }

    /// Default smoothing step `1 / (||A||^2 + mu (8 nu + 4/eps))`; the TV term
    /// drops out in linear mode.
    pub fn auto_step(&self, h: usize, w: usize) -> Result<f64> {
        let tv = if self.tv_enabled { 4.0 / self.eps_tv } else { 0.0 };
        Ok(1.0 / (self.blur_norm_sq(h, w)? + self.mu * (8.0 * self.nu + tv)))
    }
}

/// Views `u` as `d x H x W`, accepting a bare `H x W` field when `d = 1`.
fn feature_dims(u: &Tensor, p: &ModelParams) -> Result<(usize, usize)> {
    match u.shape() {
        [h, w] if p.channels == 1 => Ok((*h, *w)),
        [d, h, w] if *d == p.channels => Ok((*h, *w)),
        s => Err(Error::invalid(format!(
            "expected {} x H x W features, got {s:?}",
            p.channels
        ))),
    }
}

fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Channel mix followed by 2D convolution with the blur kernel (replicate
/// padding). Returns `H x W`.
pub fn apply_a(u: &Tensor, p: &ModelParams) -> Result<Tensor> {
    let (h, w) = feature_dims(u, p)?;
    let mut mixed = vec![0.0; h * w];
    for (c, &wc) in p.blur.channel_mix.iter().enumerate() {
        for (m, &v) in mixed.iter_mut().zip(u.plane(c)) {
            *m += wc * v;
        }
    }
    let Some((r, k)) = p.blur.kernel() else {
        return Tensor::from_vec(&[h, w], mixed);
    };
    let n = 2 * r + 1;
    let r = r as isize;
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for a in -r..=r {
                let ii = clamp(i as isize + a, h);
                for b in -r..=r {
                    let jj = clamp(j as isize + b, w);
                    acc += k[(a + r) as usize * n + (b + r) as usize] * mixed[ii * w + jj];
                }
            }
            out[i * w + j] = acc;
        }
    }
    Tensor::from_vec(&[h, w], out)
}

/// Exact adjoint of [`apply_a`]: scatter through the replicate padding, then
/// broadcast to the channels scaled by `channel_mix`. Returns `d x H x W`.
pub fn apply_at(r_img: &Tensor, p: &ModelParams) -> Result<Tensor> {
    if r_img.rank() != 2 {
        return Err(Error::invalid(format!("apply_at needs H x W, got {:?}", r_img.shape())));
    }
    let (h, w) = r_img.hw();
    let spread = match p.blur.kernel() {
        None => r_img.data().to_vec(),
        Some((r, k)) => {
            let n = 2 * r + 1;
            let r = r as isize;
            let src = r_img.data();
            let mut out = vec![0.0; h * w];
            for i in 0..h {
                for j in 0..w {
                    let v = src[i * w + j];
                    for a in -r..=r {
                        let ii = clamp(i as isize + a, h);
                        for b in -r..=r {
                            let jj = clamp(j as isize + b, w);
                            out[ii * w + jj] += k[(a + r) as usize * n + (b + r) as usize] * v;
                        }
                    }
                }
            }
            out
        }
    };
    let mut data = Vec::with_capacity(p.channels * h * w);
    for &wc in &p.blur.channel_mix {
        data.extend(spread.iter().map(|v| wc * v));
    }
    Tensor::from_vec(&[p.channels, h, w], data)
}

/// `phi'(g) = 2 nu g + g / sqrt(|g|^2 + eps^2)` per pixel; the second term is
/// dropped in linear mode.
pub fn phi_prime(g: &GradField, p: &ModelParams) -> Result<GradField> {
    g.gy.expect_shape(g.gx.shape())?;
    let two_nu = 2.0 * p.nu;
    let eps2 = p.eps_tv * p.eps_tv;
    let mut gx = g.gx.clone();
    let mut gy = g.gy.clone();
    for (x, y) in gx.data_mut().iter_mut().zip(gy.data_mut().iter_mut()) {
        let mut s = two_nu;
        if p.tv_enabled {
            s += 1.0 / (*x * *x + *y * *y + eps2).sqrt();
        }
        *x *= s;
        *y *= s;
    }
    GradField::new(gx, gy)
}

fn regularizer(u: &Tensor, p: &ModelParams) -> Result<f64> {
    let (h, w) = feature_dims(u, p)?;
    let mut total = 0.0;
    for c in 0..p.channels {
        let plane = Tensor::from_vec(&[h, w], u.plane(c).to_vec())?;
        let g = grad_forward(&plane)?;
        for (x, y) in g.gx.data().iter().zip(g.gy.data()) {
            let m2 = x * x + y * y;
            total += p.nu * m2;
            if p.tv_enabled {
                total += (m2 + p.eps_tv * p.eps_tv).sqrt() - p.eps_tv;
            }
        }
    }
    Ok(total)
}

fn data_misfit(u: &Tensor, f: &Tensor, p: &ModelParams) -> Result<f64> {
    let au = apply_a(u, p)?;
    let d = f.sub(&au)?;
    d.dot(&d)
}

/// The model energy `sum (f - A u)^2 + mu R(u)`.
pub fn eval_energy(u: &Tensor, f: &Tensor, p: &ModelParams) -> Result<f64> {
    Ok(data_misfit(u, f, p)? + p.mu * regularizer(u, p)?)
}

/// `1/2 sum (f - A u)^2 + mu R(u)`, the functional whose gradient is
/// `F(u) - A^T f`. Smoothing iterations descend this quantity.
pub fn system_energy(u: &Tensor, f: &Tensor, p: &ModelParams) -> Result<f64> {
    Ok(0.5 * data_misfit(u, f, p)? + p.mu * regularizer(u, p)?)
}

/// `F(u) = A^T A u - mu div(phi'(grad u_c))` per channel. Output has the
/// shape of `u`.
pub fn apply_f(u: &Tensor, p: &ModelParams) -> Result<Tensor> {
    let (h, w) = feature_dims(u, p)?;
    let mut out = apply_at(&apply_a(u, p)?, p)?;
    if p.mu != 0.0 {
        for c in 0..p.channels {
            let plane = Tensor::from_vec(&[h, w], u.plane(c).to_vec())?;
            let flux = phi_prime(&grad_forward(&plane)?, p)?;
            let div = div_backward(&flux)?;
            for (o, d) in out.plane_mut(c).iter_mut().zip(div.data()) {
                *o -= p.mu * d;
            }
        }
    }
    out.reshape(u.shape())
}

/// `b - F(u)`.
pub fn residual(u: &Tensor, b: &Tensor, p: &ModelParams) -> Result<Tensor> {
    b.expect_shape(u.shape())?;
    b.sub(&apply_f(u, p)?)
}
