//! Network configuration and the named parameter store.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the finest-level feature `u` is seeded before the first smoothing block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Zero,
    /// A fixed-seed Gaussian field, identical for every sample and call.
    Random,
    /// `u = b = bn(K0 f)`.
    LearnedConv,
}

impl InitMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "random" => Ok(Self::Random),
            "learned_conv" => Ok(Self::LearnedConv),
            other => Err(Error::Config(format!("unknown init mode {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::Random => "random",
            Self::LearnedConv => "learned_conv",
        }
    }
}

/// Batch-norm behaviour of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated afterwards.
    Train,
    /// Running statistics only.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub levels: usize,
    pub channels: usize,
    pub pre_smooth: usize,
    pub coarse_smooth: usize,
    pub post_smooth: usize,
    pub classes: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub weight_share_inner: bool,
    pub init_mode: InitMode,
    pub spatial_dims: usize,
    /// Channel ratio of 3D kernels; only used when counting parameters.
    pub ratio: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            channels: 64,
            pre_smooth: 3,
            coarse_smooth: 7,
            post_smooth: 4,
            classes: 2,
            in_channels: 1,
            kernel: 3,
            weight_share_inner: false,
            init_mode: InitMode::LearnedConv,
            spatial_dims: 2,
            ratio: 1,
        }
    }
}

impl NetConfig {
    /// Checks the fields needed for counting parameters.
    pub fn validate_shape(&self) -> Result<()> {
        if self.levels < 1 || self.channels < 1 || self.classes < 1 || self.in_channels < 1 {
            return Err(Error::Config("levels, channels, classes and in_channels must be positive".into()));
        }
        if self.ratio < 1 {
            return Err(Error::Config("ratio must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel extent {} must be odd", self.kernel)));
        }
        if !matches!(self.spatial_dims, 2 | 3) {
            return Err(Error::Config(format!("spatial_dims must be 2 or 3, got {}", self.spatial_dims)));
        }
        Ok(())
    }

    /// Checks that the configuration describes a runnable 2D network.
    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if self.levels < 2 {
            return Err(Error::Config("the network needs at least 2 levels".into()));
        }
        if self.spatial_dims != 2 {
            return Err(Error::Config("only 2D networks can be instantiated".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("at least 2 classes are required".into()));
        }
        Ok(())
    }

    /// Required divisor of the input extents.
    pub fn extent_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Role of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution weights of the feature network.
    Kernel,
    /// The 1x1 fusion head.
    Head,
    BnScale,
    BnShift,
    BnMean,
    BnVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, Self::BnMean | Self::BnVar)
    }

    pub fn decays(self) -> bool {
        matches!(self, Self::Kernel | Self::Head)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Kernel => "kernel",
            Self::Head => "head",
            Self::BnScale => "bn_scale",
            Self::BnShift => "bn_shift",
            Self::BnMean => "bn_mean",
            Self::BnVar => "bn_var",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "kernel" => Self::Kernel,
            "head" => Self::Head,
            "bn_scale" => Self::BnScale,
            "bn_shift" => Self::BnShift,
            "bn_mean" => Self::BnMean,
            "bn_var" => Self::BnVar,
            other => return Err(Error::Config(format!("unknown parameter kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
}

impl Param {
    pub fn new(kind: ParamKind, value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape()).expect("shape already validated");
        Self { kind, value, grad: zeros.clone(), momentum: zeros }
    }
}

/// Ordered name -> parameter map.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

/// Names used by the forward pass. Level indices are 1-based.
pub(crate) mod names {
    pub const K0: &str = "init.K0";
    pub const INIT_BN: &str = "init.bn";
    pub const HEAD: &str = "head.Kp";

    pub fn phase(level: usize, phase: &str) -> String {
        format!("L{level}.{phase}")
    }
    pub fn op(level: usize) -> String {
        format!("L{level}.op.K")
    }
    pub fn down(level: usize) -> String {
        format!("L{level}.down.K")
    }
    pub fn up(level: usize) -> String {
        format!("L{level}.up.K")
    }
    pub fn fdb_bn(level: usize, which: &str) -> String {
        format!("L{level}.fdb.{which}")
    }
}

pub const PHASE_PRE: &str = "pre";
pub const PHASE_COARSE: &str = "coarse";
pub const PHASE_POST: &str = "post";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds every parameter of `cfg` with Kaiming fan-in normal weights,
    /// unit batch-norm scale and zero shift.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = Self::new();
        let (p, k) = (cfg.channels, cfg.kernel);
        let mut counter = 0u64;
        let mut kernel = |store: &mut Self, name: String, kind: ParamKind, shape: [usize; 4]| -> Result<()> {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            // splitmix-style decorrelation of per-tensor streams
            counter += 1;
            let sub = seed ^ counter.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let value = Tensor::random_normal(&shape, sub, (2.0 / fan_in).sqrt())?;
            store.insert(name, Param::new(kind, value))
        };

        kernel(&mut store, names::K0.into(), ParamKind::Kernel, [p, cfg.in_channels, k, k])?;
        store.add_bn(names::INIT_BN, p)?;
        let l = cfg.levels;
        for level in 1..=l {
            let phases: &[(&str, usize)] = if level < l {
                &[(PHASE_PRE, cfg.pre_smooth), (PHASE_POST, cfg.post_smooth)]
            } else {
                &[(PHASE_COARSE, cfg.coarse_smooth)]
            };
            for &(phase, steps) in phases {
                let base = names::phase(level, phase);
                kernel(&mut store, format!("{base}.K"), ParamKind::Kernel, [p, p, k, k])?;
                if cfg.weight_share_inner && steps > 0 {
                    kernel(&mut store, format!("{base}.Kc"), ParamKind::Kernel, [p, p, k, k])?;
                }
                for j in 1..=steps {
                    if !cfg.weight_share_inner {
                        kernel(&mut store, format!("{base}.Kc{j}"), ParamKind::Kernel, [p, p, k, k])?;
                    }
                    store.add_bn(&format!("{base}.bn{j}"), p)?;
                    store.add_bn(&format!("{base}.bnc{j}"), p)?;
                }
            }
            if level < l {
                kernel(&mut store, names::op(level), ParamKind::Kernel, [p, p, k, k])?;
                kernel(&mut store, names::down(level), ParamKind::Kernel, [p, p, k, k])?;
                kernel(&mut store, names::up(level), ParamKind::Kernel, [p, p, k, k])?;
                store.add_bn(&names::fdb_bn(level, "bn_fine"), p)?;
                store.add_bn(&names::fdb_bn(level, "bn_coarse"), p)?;
            }
        }
        kernel(&mut store, names::HEAD.into(), ParamKind::Head, [cfg.classes, p, 1, 1])?;
        Ok(store)
    }

    fn add_bn(&mut self, site: &str, p: usize) -> Result<()> {
        self.insert(format!("{site}.scale"), Param::new(ParamKind::BnScale, Tensor::full(&[p], 1.0)?))?;
        self.insert(format!("{site}.shift"), Param::new(ParamKind::BnShift, Tensor::zeros(&[p])?))?;
        self.insert(format!("{site}.mean"), Param::new(ParamKind::BnMean, Tensor::zeros(&[p])?))?;
        self.insert(format!("{site}.var"), Param::new(ParamKind::BnVar, Tensor::full(&[p], 1.0)?))
    }

    pub fn insert(&mut self, name: String, param: Param) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries.get(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries.get_mut(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Number of scalar entries that are trained (kernels, head, batch-norm affine).
    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|p| p.kind.trainable()).map(|p| p.value.len()).sum()
    }

    /// Number of scalar entries of the given kind.
    pub fn count_kind(&self, kind: ParamKind) -> usize {
        self.entries.values().filter(|p| p.kind == kind).map(|p| p.value.len()).sum()
    }
}
