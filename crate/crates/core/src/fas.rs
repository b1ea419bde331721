//! Classical FAS nonlinear multigrid for `F(u) = b`.
//!
//! Smoothing is damped Richardson `u <- u + tau (b - F(u))`. Grid transfer is
//! full weighting anchored at even pixels and the matching bilinear
//! interpolation; coarse extents are `ceil(n / 2)`. The coarse operator reuses
//! the fine model parameters unscaled (unit grid spacing on every level).

use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    /// `1 / (||A||^2 + mu (8 nu + 4 / eps))`, evaluated per level.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FasConfig {
    pub levels: usize,
    pub pre_smooth: usize,
    pub coarse_smooth: usize,
    pub post_smooth: usize,
    pub cycles: usize,
    pub tau: StepSize,
    pub min_coarse_extent: usize,
}

impl Default for FasConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            pre_smooth: 3,
            coarse_smooth: 7,
            post_smooth: 4,
            cycles: 10,
            tau: StepSize::Auto,
            min_coarse_extent: 4,
        }
    }
}

impl FasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("levels must be >= 1"));
        }
        if self.cycles == 0 {
            return Err(Error::invalid("cycles must be >= 1"));
        }
        if self.levels > 1 && self.coarse_smooth == 0 {
            return Err(Error::invalid("coarse_smooth must be >= 1 when levels > 1"));
        }
        if self.min_coarse_extent == 0 {
            return Err(Error::invalid("min_coarse_extent must be >= 1"));
        }
        if let StepSize::Fixed(t) = self.tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("tau must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// Per-level extents and model parameters; level index 0 is the input grid.
#[derive(Debug, Clone)]
pub struct GridHierarchy {
    pub extents: Vec<(usize, usize)>,
    pub params: Vec<ModelParams>,
}

impl GridHierarchy {
    pub fn build(h: usize, w: usize, p: &ModelParams, cfg: &FasConfig) -> Result<Self> {
        cfg.validate()?;
        p.validate()?;
        let mut extents = vec![(h, w)];
        for _ in 1..cfg.levels {
            let (ph, pw) = *extents.last().unwrap();
            extents.push((ph.div_ceil(2), pw.div_ceil(2)));
        }
        let (ch, cw) = *extents.last().unwrap();
        if cfg.levels > 1 && (ch < cfg.min_coarse_extent || cw < cfg.min_coarse_extent) {
            return Err(Error::Size(format!(
                "{} levels on {h}x{w} leave a {ch}x{cw} coarsest grid (< {})",
                cfg.levels, cfg.min_coarse_extent
            )));
        }
        Ok(Self {
            params: vec![p.clone(); cfg.levels],
            extents,
        })
    }

    pub fn levels(&self) -> usize {
        self.extents.len()
    }

    fn step(&self, level: usize, cfg: &FasConfig) -> Result<f64> {
        match cfg.tau {
            StepSize::Fixed(t) => Ok(t),
            StepSize::Auto => {
                let (h, w) = self.extents[level];
                self.params[level].auto_step(h, w)
            }
        }
    }
}

/// `steps` damped Richardson iterations `u <- u + tau (b - F(u))`.
pub fn smooth(u: &Tensor, b: &Tensor, p: &ModelParams, steps: usize, tau: f64) -> Result<Tensor> {
    let mut u = u.clone();
    for step in 0..steps {
        let r = model::residual(&u, b, p)?;
        u.axpy(tau, &r)?;
        if !u.is_finite() {
            return Err(Error::Divergence {
                step: step + 1,
                what: "non-finite smoothing iterate".into(),
            });
        }
    }
    Ok(u)
}

const FULL_WEIGHT: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];

/// Full weighting `1/16 [1 2 1; 2 4 2; 1 2 1]` centred at even pixels, with
/// replicate boundary. `H x W -> ceil(H/2) x ceil(W/2)`.
pub fn restrict(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::invalid(format!("restrict needs H x W, got {:?}", x.shape())));
    }
    let (h, w) = x.hw();
    if h < 2 || w < 2 {
        return Err(Error::Size(format!("cannot restrict a {h}x{w} grid")));
    }
    let (ch, cw) = (h.div_ceil(2), w.div_ceil(2));
    let src = x.data();
    let mut out = vec![0.0; ch * cw];
    for i in 0..ch {
        for j in 0..cw {
            let mut acc = 0.0;
            for (a, row) in FULL_WEIGHT.iter().enumerate() {
                let ii = (2 * i + a).saturating_sub(1).min(h - 1);
                for (b, &wt) in row.iter().enumerate() {
                    let jj = (2 * j + b).saturating_sub(1).min(w - 1);
                    acc += wt * src[ii * w + jj];
                }
            }
            out[i * cw + j] = acc / 16.0;
        }
    }
    Tensor::from_vec(&[ch, cw], out)
}

/// Bilinear interpolation onto the `H x W` grid whose even pixels coincide
/// with the coarse nodes. Fine pixels past the last coarse node replicate it.
pub fn prolong(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::invalid(format!("prolong needs h x w, got {:?}", x.shape())));
    }
    let (ch, cw) = x.hw();
    if ch != h.div_ceil(2) || cw != w.div_ceil(2) {
        return Err(Error::Size(format!(
            "coarse grid {ch}x{cw} does not match fine target {h}x{w}"
        )));
    }
    let src = x.data();
    let at = |i: usize, j: usize| src[i.min(ch - 1) * cw + j.min(cw - 1)];
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let (i0, fi) = (i / 2, i % 2 == 1);
        for j in 0..w {
            let (j0, fj) = (j / 2, j % 2 == 1);
            out[i * w + j] = match (fi, fj) {
                (false, false) => at(i0, j0),
                (false, true) => 0.5 * (at(i0, j0) + at(i0, j0 + 1)),
                (true, false) => 0.5 * (at(i0, j0) + at(i0 + 1, j0)),
                (true, true) => {
                    0.25 * (at(i0, j0) + at(i0, j0 + 1) + at(i0 + 1, j0) + at(i0 + 1, j0 + 1))
                }
            };
        }
    }
    Tensor::from_vec(&[h, w], out)
}

fn per_channel(x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let planes = (0..x.planes())
        .map(|c| f(&x.plane_tensor(c)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&planes)
}

/// One V-cycle starting at `level` (1-based; `L` is the coarsest).
pub fn fas_vcycle(
    u: &Tensor,
    b: &Tensor,
    level: usize,
    hierarchy: &GridHierarchy,
    cfg: &FasConfig,
) -> Result<Tensor> {
    let levels = hierarchy.levels();
    if level == 0 || level > levels {
        return Err(Error::invalid(format!("level {level} outside 1..={levels}")));
    }
    let idx = level - 1;
    let p = &hierarchy.params[idx];
    let tau = hierarchy.step(idx, cfg)?;
    if level == levels {
        return smooth(u, b, p, cfg.coarse_smooth, tau);
    }

    let u_bar = smooth(u, b, p, cfg.pre_smooth, tau)?;
    let r = model::residual(&u_bar, b, p)?;

    let coarse_p = &hierarchy.params[idx + 1];
    let u_bar_c = per_channel(&u_bar, restrict)?;
    let mut b_c = per_channel(&r, restrict)?;
    b_c.axpy(1.0, &model::apply_f(&u_bar_c, coarse_p)?)?;

    let u_c = fas_vcycle(&u_bar_c, &b_c, level + 1, hierarchy, cfg)?;

    let (h, w) = hierarchy.extents[idx];
    let correction = per_channel(&u_c.sub(&u_bar_c)?, |e| prolong(e, h, w))?;
    let corrected = u_bar.add(&correction)?;

    smooth(&corrected, b, p, cfg.post_smooth, tau)
}

#[derive(Debug, Clone)]
pub struct SolveTrace {
    /// `||b - F(u)||_2` before the first cycle and after each cycle.
    pub residual_norms: Vec<f64>,
    /// [`model::eval_energy`] at the same points.
    pub energies: Vec<f64>,
    /// [`model::system_energy`] at the same points.
    pub system_energies: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SolveOutput {
    /// `d x H x W` feature field.
    pub u: Tensor,
    pub trace: SolveTrace,
}

/// Stage one of the classical pipeline: `b = A^T f`, `u0 = b`, then
/// `cfg.cycles` V-cycles.
pub fn solve(f: &Tensor, p: &ModelParams, cfg: &FasConfig) -> Result<SolveOutput> {
    if f.rank() != 2 {
        return Err(Error::invalid(format!("solve needs an H x W image, got {:?}", f.shape())));
    }
    if !f.is_finite() {
        return Err(Error::invalid("image contains non-finite values"));
    }
    let (h, w) = f.hw();
    let hierarchy = GridHierarchy::build(h, w, p, cfg)?;
    let b = model::apply_at(f, p)?;
    let mut u = b.clone();
    let mut trace = SolveTrace {
        residual_norms: Vec::with_capacity(cfg.cycles + 1),
        energies: Vec::with_capacity(cfg.cycles + 1),
        system_energies: Vec::with_capacity(cfg.cycles + 1),
    };
    let record = |u: &Tensor, trace: &mut SolveTrace| -> Result<()> {
        trace.residual_norms.push(model::residual(u, &b, p)?.norm2());
        trace.energies.push(model::eval_energy(u, f, p)?);
        trace.system_energies.push(model::system_energy(u, f, p)?);
        Ok(())
    };
    record(&u, &mut trace)?;
    for cycle in 0..cfg.cycles {
        u = fas_vcycle(&u, &b, 1, &hierarchy, cfg).map_err(|e| match e {
            Error::Divergence { step, what } => Error::Divergence {
                step,
                what: format!("{what} in cycle {}", cycle + 1),
            },
            other => other,
        })?;
        record(&u, &mut trace)?;
    }
    Ok(SolveOutput { u, trace })
}
