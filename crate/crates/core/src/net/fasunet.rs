//! The unrolled FAS-Unet: smoothing blocks, the coarse-grid transfer blocks
//! and the V-shaped forward pass.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::fusion::{argmax_channels, SegMask};
use crate::net::params::{names, InitMode, Mode, NetConfig, ParamStore, PHASE_COARSE, PHASE_POST, PHASE_PRE};
use crate::net::tape::{BnMode, BnStats, Tape, Var};
use crate::tensor::Tensor;

/// Running-statistics momentum of batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;
const RANDOM_INIT_SEED: u64 = 0x5eed_f00d;

/// One recorded forward pass over a frozen parameter store.
pub struct Pass<'a> {
    tape: Tape,
    store: &'a ParamStore,
    cfg: &'a NetConfig,
    mode: Mode,
    vars: IndexMap<String, Var>,
    stats: Vec<(String, BnStats)>,
}

/// Smoothing phase of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pre,
    Coarse,
    Post,
}

impl Phase {
    fn tag(self) -> &'static str {
        match self {
            Phase::Pre => PHASE_PRE,
            Phase::Coarse => PHASE_COARSE,
            Phase::Post => PHASE_POST,
        }
    }
}

impl<'a> Pass<'a> {
    pub fn new(store: &'a ParamStore, cfg: &'a NetConfig, mode: Mode) -> Self {
        Self { tape: Tape::new(), store, cfg, mode, vars: IndexMap::new(), stats: Vec::new() }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.leaf(t)
    }

    /// Leaf for a stored parameter; repeated requests return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = self.tape.leaf(self.store.get(name)?.value.clone());
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters that took part in the pass, in first-use order.
    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Batch statistics collected by train-mode normalization, per site.
    pub fn bn_stats(&self) -> &[(String, BnStats)] {
        &self.stats
    }

    fn conv(&mut self, x: Var, kernel: &str, stride: usize) -> Result<Var> {
        let w = self.param(kernel)?;
        let pad = (self.cfg.kernel - 1) / 2;
        self.tape.conv2d(x, w, stride, pad)
    }

    fn bn(&mut self, x: Var, site: &str) -> Result<Var> {
        let scale = self.param(&format!("{site}.scale"))?;
        let shift = self.param(&format!("{site}.shift"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batchnorm(x, scale, shift, BnMode::Batch, None)?;
                if let Some(s) = stats {
                    self.stats.push((site.to_string(), s));
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = &self.store.get(&format!("{site}.mean"))?.value;
                let var = &self.store.get(&format!("{site}.var"))?.value;
                let (y, _) =
                    self.tape.batchnorm(x, scale, shift, BnMode::Running, Some((mean.data(), var.data())))?;
                Ok(y)
            }
        }
    }

    /// `bn(relu(K x))`.
    fn block_op(&mut self, x: Var, kernel: &str, site: &str) -> Result<Var> {
        let y = self.conv(x, kernel, 1)?;
        let y = self.tape.relu(y);
        self.bn(y, site)
    }

    /// Kernel of the nonlinear operator at a level: the dedicated operator
    /// kernel on fine levels and the coarse smoothing kernel at the bottom.
    fn operator_kernel(&self, level: usize) -> String {
        if level < self.cfg.levels {
            names::op(level)
        } else {
            format!("{}.K", names::phase(level, PHASE_COARSE))
        }
    }
}

fn check_level(cfg: &NetConfig, level: usize, phase: Option<Phase>) -> Result<()> {
    let ok = match phase {
        Some(Phase::Coarse) => level == cfg.levels,
        Some(_) | None => level >= 1 && level < cfg.levels,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("level {level} out of range for {} levels", cfg.levels)))
    }
}

/// Unrolled residual-feedback smoothing: `k_q` iterations of
/// `u <- u + bn(relu(K'_j (b - bn(relu(K u)))))`.
pub fn smoothing_block(pass: &mut Pass, u: Var, b: Var, level: usize, phase: Phase) -> Result<Var> {
    check_level(pass.cfg, level, Some(phase))?;
    if pass.value(u).shape() != pass.value(b).shape() {
        return Err(Error::shape(pass.value(u).shape(), pass.value(b).shape()));
    }
    let steps = match phase {
        Phase::Pre => pass.cfg.pre_smooth,
        Phase::Coarse => pass.cfg.coarse_smooth,
        Phase::Post => pass.cfg.post_smooth,
    };
    let base = names::phase(level, phase.tag());
    let op_kernel = format!("{base}.K");
    let mut u = u;
    for j in 1..=steps {
        let fu = pass.block_op(u, &op_kernel, &format!("{base}.bn{j}"))?;
        let r = pass.tape.sub(b, fu)?;
        let corr_kernel = if pass.cfg.weight_share_inner { format!("{base}.Kc") } else { format!("{base}.Kc{j}") };
        let c = pass.block_op(r, &corr_kernel, &format!("{base}.bnc{j}"))?;
        u = pass.tape.add(u, c)?;
    }
    Ok(u)
}

/// Coarse right-hand side `K_down (b - F_l(u)) + F_{l+1}(K_down u)` together
/// with the restricted iterate `K_down u`.
pub fn fdb(pass: &mut Pass, b: Var, u_bar: Var, level: usize) -> Result<(Var, Var)> {
    check_level(pass.cfg, level, None)?;
    let down = names::down(level);
    let fine_op = pass.operator_kernel(level);
    let coarse_op = pass.operator_kernel(level + 1);
    let fu = pass.block_op(u_bar, &fine_op, &names::fdb_bn(level, "bn_fine"))?;
    let r = pass.tape.sub(b, fu)?;
    let r_c = pass.conv(r, &down, 2)?;
    let u_c = pass.conv(u_bar, &down, 2)?;
    let fu_c = pass.block_op(u_c, &coarse_op, &names::fdb_bn(level, "bn_coarse"))?;
    let b_c = pass.tape.add(r_c, fu_c)?;
    Ok((b_c, u_c))
}

/// Coarse-grid correction `u + K_up^T (u_c - u_c_init)`.
pub fn fcb(pass: &mut Pass, u_bar: Var, u_c: Var, u_c_init: Var, level: usize) -> Result<Var> {
    check_level(pass.cfg, level, None)?;
    let [_, _, h, w] = *pass.value(u_bar).shape() else {
        return Err(Error::invalid("expected N x C x H x W features"));
    };
    let e = pass.tape.sub(u_c, u_c_init)?;
    let k = pass.param(&names::up(level))?;
    let pad = (pass.cfg.kernel - 1) / 2;
    let corr = pass.tape.deconv2d(e, k, 2, pad, h, w)?;
    pass.tape.add(u_bar, corr)
}

/// Feature network without the fusion head: returns the finest-level `u`.
pub fn features(pass: &mut Pass, f: Var) -> Result<Var> {
    let cfg = pass.cfg;
    let shape = pass.value(f).shape().to_vec();
    let [n, cin, h, w] = shape[..] else {
        return Err(Error::invalid(format!("expected N x C x H x W input, got {shape:?}")));
    };
    if cin != cfg.in_channels {
        return Err(Error::shape(&[n, cfg.in_channels, h, w], &shape));
    }
    let m = cfg.extent_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::Size(format!("input extents {h}x{w} are not multiples of {m}")));
    }
    let k0 = pass.conv(f, names::K0, 1)?;
    let b1 = pass.bn(k0, names::INIT_BN)?;
    let u1 = match cfg.init_mode {
        InitMode::LearnedConv => b1,
        InitMode::Zero => pass.input(Tensor::zeros(&[n, cfg.channels, h, w])?),
        InitMode::Random => {
            let one = Tensor::random_normal(&[cfg.channels * h * w], RANDOM_INIT_SEED, 1.0)?;
            let mut data = Vec::with_capacity(n * one.len());
            for _ in 0..n {
                data.extend_from_slice(one.data());
            }
            pass.input(Tensor::from_vec(&[n, cfg.channels, h, w], data)?)
        }
    };

    let l = cfg.levels;
    let mut b = b1;
    let mut u = u1;
    let mut stack = Vec::with_capacity(l - 1);
    for level in 1..l {
        let u_bar = smoothing_block(pass, u, b, level, Phase::Pre)?;
        let (b_c, u_c) = fdb(pass, b, u_bar, level)?;
        stack.push((u_bar, u_c, b));
        b = b_c;
        u = u_c;
    }
    u = smoothing_block(pass, u, b, l, Phase::Coarse)?;
    for level in (1..l).rev() {
        let (u_bar, u_c_init, b_fine) = stack.pop().expect("one entry per level");
        let corrected = fcb(pass, u_bar, u, u_c_init, level)?;
        u = smoothing_block(pass, corrected, b_fine, level, Phase::Post)?;
    }
    Ok(u)
}

/// Full network: probabilities `softmax(K_p u)` of shape `N x c x H x W`.
pub fn forward(pass: &mut Pass, f: Var) -> Result<Var> {
    let u = features(pass, f)?;
    let kp = pass.param(names::HEAD)?;
    let z = pass.tape.conv2d(u, kp, 1, 0)?;
    pass.tape.softmax_channels(z)
}

/// Convenience wrapper: probabilities for a batch without keeping the tape.
pub fn infer(store: &ParamStore, cfg: &NetConfig, f: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut pass = Pass::new(store, cfg, mode);
    let x = pass.input(f.clone());
    let s = forward(&mut pass, x)?;
    Ok(pass.value(s).clone())
}

/// Per-sample argmax masks of an `N x c x H x W` probability batch.
pub fn predict(s: &Tensor) -> Result<Vec<SegMask>> {
    let [n, c, h, w] = *s.shape() else {
        return Err(Error::invalid(format!("expected N x c x H x W probabilities, got {:?}", s.shape())));
    };
    let plane = c * h * w;
    (0..n)
        .map(|i| argmax_channels(&Tensor::from_vec(&[c, h, w], s.data()[i * plane..(i + 1) * plane].to_vec())?))
        .collect()
}

/// Folds train-mode batch statistics into the running estimates.
pub fn update_running_stats(store: &mut ParamStore, stats: &[(String, BnStats)]) -> Result<()> {
    for (site, s) in stats {
        for (suffix, batch) in [("mean", &s.mean), ("var", &s.var)] {
            let p = store.get_mut(&format!("{site}.{suffix}"))?;
            for (r, b) in p.value.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
    Ok(())
}
