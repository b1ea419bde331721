//! Flat `key=value` configuration text. `#` starts a comment; blank lines are
//! ignored. Every key must be consumed, so typos are reported.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fas::{FasConfig, StepSize};
use crate::model::{BlurSpec, ModelParams};
use crate::net::{InitMode, NetConfig, TrainConfig};

#[derive(Debug, Clone)]
pub struct KeyValues {
    entries: Vec<Entry>,
}

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    line: usize,
    used: bool,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            entries.push(Entry { key: key.to_string(), value: v.trim().to_string(), line: i + 1, used: false });
        }
        Ok(Self { entries })
    }

    /// Takes the single value of `key`, if present.
    pub fn take(&mut self, key: &str) -> Result<Option<(String, usize)>> {
        let mut found = None;
        for e in self.entries.iter_mut().filter(|e| e.key == key) {
            if found.is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", e.line)));
            }
            e.used = true;
            found = Some((e.value.clone(), e.line));
        }
        Ok(found)
    }

    pub fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key)? {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: cannot parse {key}={v}"))),
        }
    }

    pub fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.take(key)? {
            None => Ok(None),
            Some((v, line)) => match v.as_str() {
                "true" | "yes" | "1" => Ok(Some(true)),
                "false" | "no" | "0" => Ok(Some(false)),
                _ => Err(Error::Config(format!("line {line}: {key} must be true or false, got {v}"))),
            },
        }
    }

    /// Comma-separated floats.
    pub fn take_list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.take(key)? {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("line {line}: bad number in {key}={v}"))))
                .collect::<Result<Vec<f64>>>()
                .map(Some),
        }
    }

    /// All entries whose key is one of `keys`, in file order (repeatable keys).
    pub fn take_ordered(&mut self, keys: &[&str]) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for e in self.entries.iter_mut().filter(|e| keys.contains(&e.key.as_str())) {
            e.used = true;
            out.push((e.key.clone(), e.value.clone()));
        }
        out
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(&self) -> Result<()> {
        match self.entries.iter().find(|e| !e.used) {
            Some(e) => Err(Error::Config(format!("line {}: unknown key {}", e.line, e.key))),
            None => Ok(()),
        }
    }
}

macro_rules! set {
    ($kv:expr, $target:expr, $key:literal) => {
        if let Some(v) = $kv.take_parsed($key)? {
            $target = v;
        }
    };
}

/// Network keys: `levels channels kl km kr classes in_channels kernel
/// weight_share_inner init_mode spatial_dims ratio`.
pub fn net_from_kv(kv: &mut KeyValues, mut c: NetConfig) -> Result<NetConfig> {
    set!(kv, c.levels, "levels");
    set!(kv, c.channels, "channels");
    set!(kv, c.pre_smooth, "kl");
    set!(kv, c.coarse_smooth, "km");
    set!(kv, c.post_smooth, "kr");
    set!(kv, c.classes, "classes");
    set!(kv, c.in_channels, "in_channels");
    set!(kv, c.kernel, "kernel");
    set!(kv, c.spatial_dims, "spatial_dims");
    set!(kv, c.ratio, "ratio");
    if let Some(b) = kv.take_bool("weight_share_inner")? {
        c.weight_share_inner = b;
    }
    if let Some((v, _)) = kv.take("init_mode")? {
        c.init_mode = InitMode::parse(&v)?;
    }
    Ok(c)
}

/// Training keys: `lr0 momentum weight_decay batch_size epochs poly_power seed
/// target_loss target_dsc`.
pub fn train_from_kv(kv: &mut KeyValues, mut t: TrainConfig) -> Result<TrainConfig> {
    set!(kv, t.lr0, "lr0");
    set!(kv, t.momentum, "momentum");
    set!(kv, t.weight_decay, "weight_decay");
    set!(kv, t.batch_size, "batch_size");
    set!(kv, t.max_epochs, "epochs");
    set!(kv, t.poly_power, "poly_power");
    set!(kv, t.seed, "seed");
    if let Some(v) = kv.take_parsed("target_loss")? {
        t.target_loss = Some(v);
    }
    if let Some(v) = kv.take_parsed("target_dsc")? {
        t.target_dsc = Some(v);
    }
    Ok(t)
}

/// Solver keys: `mu nu eps tv blur_sigma blur_radius levels kl km kr cycles tau
/// min_coarse`. `tau` is `auto` or a positive number.
pub fn solver_from_kv(kv: &mut KeyValues, mut p: ModelParams, mut f: FasConfig) -> Result<(ModelParams, FasConfig)> {
    set!(kv, p.mu, "mu");
    set!(kv, p.nu, "nu");
    set!(kv, p.eps_tv, "eps");
    if let Some(b) = kv.take_bool("tv")? {
        p.tv_enabled = b;
    }
    let sigma: Option<f64> = kv.take_parsed("blur_sigma")?;
    let radius: Option<usize> = kv.take_parsed("blur_radius")?;
    if let Some(s) = sigma.filter(|&s| s > 0.0) {
        p.blur = BlurSpec::gaussian(p.channels, s, radius.unwrap_or((3.0 * s).ceil() as usize));
    }
    set!(kv, f.levels, "levels");
    set!(kv, f.pre_smooth, "kl");
    set!(kv, f.coarse_smooth, "km");
    set!(kv, f.post_smooth, "kr");
    set!(kv, f.cycles, "cycles");
    set!(kv, f.min_coarse_extent, "min_coarse");
    if let Some((v, line)) = kv.take("tau")? {
        f.tau = parse_tau(&v).map_err(|_| Error::Config(format!("line {line}: bad tau {v}")))?;
    }
    p.validate()?;
    f.validate()?;
    Ok((p, f))
}

pub fn parse_tau(v: &str) -> Result<StepSize> {
    if v == "auto" {
        return Ok(StepSize::Auto);
    }
    v.parse().map(StepSize::Fixed).map_err(|_| Error::Config(format!("tau must be auto or a number, got {v}")))
}

/// Network and training settings from one file.
pub fn parse_training_config(text: &str) -> Result<(NetConfig, TrainConfig)> {
    let mut kv = KeyValues::parse(text)?;
    let net = net_from_kv(&mut kv, NetConfig::default())?;
    let train = train_from_kv(&mut kv, TrainConfig::default())?;
    kv.finish()?;
    net.validate()?;
    train.validate()?;
    Ok((net, train))
}

pub fn parse_solver_config(text: &str) -> Result<(ModelParams, FasConfig)> {
    let mut kv = KeyValues::parse(text)?;
    let out = solver_from_kv(&mut kv, ModelParams::default(), FasConfig::default())?;
    kv.finish()?;
    Ok(out)
}

pub fn net_to_text(c: &NetConfig) -> String {
    format!(
        "levels={}\nchannels={}\nkl={}\nkm={}\nkr={}\nclasses={}\nin_channels={}\nkernel={}\nweight_share_inner={}\ninit_mode={}\nspatial_dims={}\nratio={}\n",
        c.levels,
        c.channels,
        c.pre_smooth,
        c.coarse_smooth,
        c.post_smooth,
        c.classes,
        c.in_channels,
        c.kernel,
        c.weight_share_inner,
        c.init_mode.name(),
        c.spatial_dims,
        c.ratio
    )
}

pub fn train_to_text(t: &TrainConfig) -> String {
    let mut s = format!(
        "lr0={:?}\nmomentum={:?}\nweight_decay={:?}\nbatch_size={}\nepochs={}\npoly_power={:?}\nseed={}\n",
        t.lr0, t.momentum, t.weight_decay, t.batch_size, t.max_epochs, t.poly_power, t.seed
    );
    if let Some(v) = t.target_loss {
        s += &format!("target_loss={v:?}\n");
    }
    if let Some(v) = t.target_dsc {
        s += &format!("target_dsc={v:?}\n");
    }
    s
}
