//! Central finite-difference checks of recorded gradients.
//!
//! A probe perturbs one scalar by `±step`. If either perturbed pass flips a
//! ReLU sign relative to the unperturbed pass, the loss is not smooth across
//! the stencil and the probe is redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::fasunet::{forward, Pass};
use crate::net::params::{Mode, NetConfig, ParamStore};
use crate::net::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;
const MAX_REDRAWS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub probes: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { probes: 50, step: DEFAULT_STEP, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub probes: Vec<ProbeResult>,
    /// Probes discarded because they straddled a ReLU kink.
    pub redrawn: usize,
    pub max_rel_error: f64,
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

impl GradCheckReport {
    fn push(&mut self, p: ProbeResult) {
        self.max_rel_error = self.max_rel_error.max(p.rel_error);
        self.probes.push(p);
    }
}

fn validate(gc: &GradCheckConfig) -> Result<()> {
    if !(gc.step > 0.0 && gc.step.is_finite()) || gc.probes == 0 {
        return Err(Error::invalid("gradient check needs a positive step and at least one probe"));
    }
    Ok(())
}

/// Shared probing loop. `eval` returns the loss and ReLU signature for a
/// perturbation `(tensor, entry, delta)`.
fn probe_loop(
    sizes: &[(String, usize)],
    analytic: impl Fn(usize, usize) -> f64,
    eval: impl Fn(usize, usize, f64) -> Result<(f64, u64)>,
    base_signature: u64,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport> {
    validate(gc)?;
    let candidates: Vec<usize> = (0..sizes.len()).filter(|&i| sizes[i].1 > 0).collect();
    if candidates.is_empty() {
        return Err(Error::invalid("nothing to probe"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let mut report = GradCheckReport::default();
    while report.probes.len() < gc.probes {
        let t = candidates[rng.random_range(0..candidates.len())];
        let k = rng.random_range(0..sizes[t].1);
        let (up, sig_up) = eval(t, k, gc.step)?;
        let (dn, sig_dn) = eval(t, k, -gc.step)?;
        if sig_up != base_signature || sig_dn != base_signature {
            report.redrawn += 1;
            if report.redrawn > MAX_REDRAWS * gc.probes {
                return Err(Error::invalid("could not find probes away from ReLU kinks"));
            }
            continue;
        }
        let numeric = (up - dn) / (2.0 * gc.step);
        let a = analytic(t, k);
        report.push(ProbeResult {
            name: sizes[t].0.clone(),
            index: k,
            analytic: a,
            numeric,
            rel_error: rel_error(a, numeric),
        });
    }
    Ok(report)
}

/// Checks `d root / d leaves` for an arbitrary scalar tape program.
pub fn check_gradients<F>(leaves: &[Tensor], build: F, gc: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |vals: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let root = build(&mut tape, &vars)?;
        Ok((tape, vars, root))
    };
    let (tape, vars, root) = run(leaves)?;
    let mut grads = tape.backward(root)?;
    let analytic: Vec<Option<Tensor>> = vars.iter().map(|&v| grads.take(v)).collect();
    let sizes: Vec<(String, usize)> = leaves.iter().enumerate().map(|(i, t)| (format!("leaf{i}"), t.len())).collect();
    probe_loop(
        &sizes,
        |t, k| analytic[t].as_ref().map_or(0.0, |g| g.data()[k]),
        |t, k, d| {
            let mut vals = leaves.to_vec();
            vals[t].data_mut()[k] += d;
            let (tape, _, root) = run(&vals)?;
            Ok((tape.value(root).data()[0], tape.relu_signature()))
        },
        tape.relu_signature(),
        gc,
    )
}

fn network_loss(store: &ParamStore, cfg: &NetConfig, x: &Tensor, target: &Tensor, mode: Mode) -> Result<(f64, u64)> {
    let mut pass = Pass::new(store, cfg, mode);
    let xv = pass.input(x.clone());
    let s = forward(&mut pass, xv)?;
    let l = pass.tape_mut().cross_entropy(s, target)?;
    Ok((pass.value(l).data()[0], pass.tape().relu_signature()))
}

/// Checks the loss gradient of a network with respect to randomly chosen
/// trainable scalars. The store is not modified.
pub fn gradient_check(
    store: &ParamStore,
    cfg: &NetConfig,
    x: &Tensor,
    target: &Tensor,
    mode: Mode,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut pass = Pass::new(store, cfg, mode);
    let xv = pass.input(x.clone());
    let s = forward(&mut pass, xv)?;
    let l = pass.tape_mut().cross_entropy(s, target)?;
    let base_signature = pass.tape().relu_signature();
    let mut grads = pass.tape().backward(l)?;
    let mut sizes = Vec::new();
    let mut analytic = Vec::new();
    for (name, p) in store.iter() {
        if !p.kind.trainable() {
            continue;
        }
        sizes.push((name.to_string(), p.value.len()));
        let var = pass.param_vars().find(|(n, _)| *n == name).map(|(_, v)| v);
        analytic.push(var.and_then(|v| grads.take(v)));
    }
    probe_loop(
        &sizes,
        |t, k| analytic[t].as_ref().map_or(0.0, |g| g.data()[k]),
        |t, k, d| {
            let mut perturbed = store.clone();
            perturbed.get_mut(&sizes[t].0)?.value.data_mut()[k] += d;
            network_loss(&perturbed, cfg, x, target, mode)
        },
        base_signature,
        gc,
    )
}
