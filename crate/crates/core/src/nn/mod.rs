//! Parameter storage, forward context and the standard backbone layers.

mod ctx;
pub mod layers;
mod params;

pub use ctx::{BnUpdate, Ctx, Mode};
pub use layers::{
    apply_bn_update, BatchNorm, BnStats, Conv, DenseLayer, DtdnnLayer, TdnnLayer, Temporal,
    TransitionLayer, BN_EPS, BN_MOMENTUM,
};
pub use params::{Init, ParamEntry, ParamId, ParamKind, ParamStore};
