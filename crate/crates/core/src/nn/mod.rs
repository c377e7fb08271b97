//! Transformer building blocks, prediction heads and the momentum (EMA) rule.

mod gradcheck;
mod layers;
mod params;

pub use gradcheck::param_gradcheck;
pub use layers::{
    scaled_dot_attention, AttentionOutput, AttentionParams, FeedForward, HeadRole, LayerNorm, LayerTrace, Linear,
    MlpHead, TransformerLayerParams,
};
pub use params::{ema_update, Graph, ParamId, ParamStore, INIT_STD};
