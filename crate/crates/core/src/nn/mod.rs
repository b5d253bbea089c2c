//! Parameters, forward-pass context and shared layers.

pub mod attention;
pub mod ctx;
pub mod layers;
pub mod params;

pub use ctx::{BnUpdate, Ctx};
pub use params::{count_trainable, Init, ParamBuilder, ParamId, ParamKind, ParamSpec, ParamStore};
