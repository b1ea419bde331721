//! SGD with momentum, poly learning-rate decay and the mini-batch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{one_hot, SegMask};
use crate::metrics::dsc;
use crate::net::fasunet::{forward, predict, update_running_stats, Pass};
use crate::net::params::{Mode, NetConfig, ParamStore};
use crate::net::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub poly_power: f64,
    pub seed: u64,
    /// Stop once the epoch loss is at most this value (and the DSC target, if
    /// any, is met).
    pub target_loss: Option<f64>,
    pub target_dsc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.99,
            weight_decay: 1e-4,
            batch_size: 1,
            max_epochs: 100,
            poly_power: 0.9,
            seed: 0,
            target_loss: None,
            target_dsc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be non-negative, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("weight_decay >= 0, batch_size >= 1 and max_epochs >= 1 required".into()));
        }
        Ok(())
    }

    /// Learning rate of epoch `t` (0-based); reaches zero at `max_epochs`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let frac = 1.0 - (t as f64 / self.max_epochs as f64).min(1.0);
        self.lr0 * frac.powf(self.poly_power)
    }
}

/// One training image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `c_in x H x W`.
    pub image: Tensor,
    pub labels: SegMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean of the mini-batch losses.
    pub loss: f64,
    /// Mean foreground DSC of the train-mode predictions.
    pub a_dsc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub epochs: Vec<EpochStats>,
    pub reached_targets: bool,
}

/// `v <- m v + g + wd w` (decay on kernels only), `w <- w - lr_t v`.
pub fn sgd_step(store: &mut ParamStore, t: usize, cfg: &TrainConfig) {
    let lr = cfg.lr_at(t);
    for (_, p) in store.iter_mut() {
        if !p.kind.trainable() {
            continue;
        }
        let wd = if p.kind.decays() { cfg.weight_decay } else { 0.0 };
        let w = p.value.data_mut();
        let v = p.momentum.data_mut();
        for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(p.grad.data()) {
            *v = cfg.momentum * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
}

/// Builds the `N x c_in x H x W` image batch and `N x c x H x W` one-hot target.
pub fn batch_tensors(samples: &[&Sample], classes: usize) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let ishape = first.image.shape().to_vec();
    let [cin, h, w] = ishape[..] else {
        return Err(Error::invalid(format!("expected c_in x H x W images, got {ishape:?}")));
    };
    let mut x = Vec::with_capacity(samples.len() * first.image.len());
    let mut y = Vec::with_capacity(samples.len() * classes * h * w);
    for s in samples {
        s.image.expect_shape(&ishape)?;
        if (s.labels.height(), s.labels.width()) != (h, w) {
            return Err(Error::shape(&[h, w], &[s.labels.height(), s.labels.width()]));
        }
        x.extend_from_slice(s.image.data());
        y.extend_from_slice(one_hot(&s.labels, classes)?.data());
    }
    let n = samples.len();
    Ok((Tensor::from_vec(&[n, cin, h, w], x)?, Tensor::from_vec(&[n, classes, h, w], y)?))
}

/// Result of one forward/backward pass.
pub struct StepOutcome {
    pub loss: f64,
    pub probs: Tensor,
}

/// Forward, loss and backward for one batch. Gradients are written into the
/// store's gradient buffers (overwritten) and, in train mode, the running
/// statistics are updated.
pub fn loss_and_grad(store: &mut ParamStore, cfg: &NetConfig, x: &Tensor, target: &Tensor, mode: Mode) -> Result<StepOutcome> {
    let (loss, probs, grads, stats) = {
        let mut pass = Pass::new(store, cfg, mode);
        let xv = pass.input(x.clone());
        let s = forward(&mut pass, xv)?;
        let l = pass.tape_mut().cross_entropy(s, target)?;
        let mut g = pass.tape().backward(l)?;
        let vars: Vec<(String, Var)> = pass.param_vars().map(|(n, v)| (n.to_string(), v)).collect();
        let grads: Vec<(String, Tensor)> =
            vars.into_iter().filter_map(|(n, v)| g.take(v).map(|t| (n, t))).collect();
        (pass.value(l).data()[0], pass.value(s).clone(), grads, pass.bn_stats().to_vec())
    };
    store.zero_grads();
    for (name, g) in grads {
        store.get_mut(&name)?.grad = g;
    }
    if mode == Mode::Train {
        update_running_stats(store, &stats)?;
    }
    Ok(StepOutcome { loss, probs })
}

/// Mean foreground DSC of predictions against labels.
pub fn mean_foreground_dsc(probs: &Tensor, labels: &[&SegMask], classes: usize) -> Result<f64> {
    let preds = predict(probs)?;
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(labels) {
        let mut per = 0.0;
        for c in 1..classes as u32 {
            per += dsc(p, g, c)?;
        }
        total += per / (classes - 1) as f64;
    }
    Ok(total / preds.len() as f64)
}

/// Trains `store` in place on `data`.
pub fn train_store(store: &mut ParamStore, data: &[Sample], cfg: &NetConfig, tcfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = TrainTrace::default();
    for epoch in 0..tcfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut dsc_sum) = (0.0, 0.0);
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (x, target) = batch_tensors(&batch, cfg.classes)?;
            let out = loss_and_grad(store, cfg, &x, &target, Mode::Train)?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence { step: epoch, what: "non-finite training loss".into() });
            }
            let labels: Vec<&SegMask> = batch.iter().map(|s| &s.labels).collect();
            loss_sum += out.loss * batch.len() as f64;
            dsc_sum += mean_foreground_dsc(&out.probs, &labels, cfg.classes)? * batch.len() as f64;
            sgd_step(store, epoch, tcfg);
        }
        let n = data.len() as f64;
        let stats = EpochStats { epoch, lr: tcfg.lr_at(epoch), loss: loss_sum / n, a_dsc: dsc_sum / n };
        let has_target = tcfg.target_loss.is_some() || tcfg.target_dsc.is_some();
        let done = has_target
            && tcfg.target_loss.is_none_or(|t| stats.loss <= t)
            && tcfg.target_dsc.is_none_or(|t| stats.a_dsc >= t);
        trace.epochs.push(stats);
        if done {
            trace.reached_targets = true;
            break;
        }
    }
    Ok(trace)
}

/// Initializes a network from `tcfg.seed` and trains it.
pub fn train(data: &[Sample], cfg: &NetConfig, tcfg: &TrainConfig) -> Result<(ParamStore, TrainTrace)> {
    let mut store = ParamStore::init(cfg, tcfg.seed)?;
    let trace = train_store(&mut store, data, cfg, tcfg)?;
    Ok((store, trace))
}
