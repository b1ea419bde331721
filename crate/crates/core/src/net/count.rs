//! Closed-form and enumerated parameter counts.

use crate::error::Result;
use crate::net::params::{NetConfig, ParamKind, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// Entries of one `p x p` feature kernel (2D) or `rp x rp` kernel (3D).
    pub kernel_params: usize,
    /// `(k_m + 1) + (L - 1)(k_l + k_r + 5)`.
    pub multiplier: usize,
    /// `multiplier * kernel_params`.
    pub multiplier_term: usize,
    /// `c_in p k_c^2 + multiplier_term`.
    pub formula_count: usize,
    /// Trainable entries of an instantiated 2D network (kernels, fusion head
    /// and batch-norm affine); `None` for 3D.
    pub instantiated_count: Option<usize>,
}

pub fn param_count(cfg: &NetConfig) -> Result<ParamCount> {
    cfg.validate_shape()?;
    let (p, k) = (cfg.channels, cfg.kernel);
    let kernel_params = if cfg.spatial_dims == 3 {
        cfg.ratio * cfg.ratio * p * p * k * k * k
    } else {
        p * p * k * k
    };
    let multiplier = (cfg.coarse_smooth + 1) + (cfg.levels - 1) * (cfg.pre_smooth + cfg.post_smooth + 5);
    let multiplier_term = multiplier * kernel_params;
    let formula_count = cfg.in_channels * p * k * k + multiplier_term;
    let instantiated_count = if cfg.spatial_dims == 2 && cfg.validate().is_ok() {
        Some(ParamStore::init(cfg, 0)?.trainable_count())
    } else {
        None
    };
    Ok(ParamCount { kernel_params, multiplier, multiplier_term, formula_count, instantiated_count })
}

/// Entries of the feature-network kernels in a store (excludes the fusion head
/// and batch norm).
pub fn feature_kernel_entries(store: &ParamStore) -> usize {
    store.count_kind(ParamKind::Kernel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_matches_enumeration() {
        for (levels, kl, km, kr, p) in [(2, 1, 1, 1, 2), (3, 2, 3, 2, 4), (4, 0, 2, 3, 3)] {
            let cfg = NetConfig {
                levels,
                pre_smooth: kl,
                coarse_smooth: km,
                post_smooth: kr,
                channels: p,
                classes: 3,
                in_channels: 2,
                ..NetConfig::default()
            };
            let c = param_count(&cfg).unwrap();
            let store = ParamStore::init(&cfg, 0).unwrap();
            assert_eq!(c.formula_count, feature_kernel_entries(&store));
        }
    }

    #[test]
    fn shared_inner_kernels_reduce_the_instantiated_count() {
        let base = NetConfig { levels: 3, channels: 4, classes: 2, ..NetConfig::default() };
        let shared = NetConfig { weight_share_inner: true, ..base.clone() };
        let a = param_count(&base).unwrap();
        let b = param_count(&shared).unwrap();
        assert_eq!(a.formula_count, b.formula_count);
        assert!(b.instantiated_count.unwrap() < a.instantiated_count.unwrap());
    }
}
