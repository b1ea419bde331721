//! Differentiable FAS-Unet: tape autodiff, blocks, training and counting.

pub(crate) mod conv;
pub mod count;
pub mod fasunet;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod train;

pub use count::{param_count, ParamCount};
pub use fasunet::{fcb, fdb, features, forward, infer, predict, smoothing_block, Pass, Phase};
pub use gradcheck::{check_gradients, gradient_check, GradCheckConfig, GradCheckReport};
pub use params::{InitMode, Mode, NetConfig, Param, ParamKind, ParamStore};
pub use tape::{BnMode, Tape, Var};
pub use train::{sgd_step, train, train_store, EpochStats, Sample, TrainConfig, TrainTrace};
