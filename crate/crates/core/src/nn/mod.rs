//! Encoder + projection-head models and their flat parameter views.

mod model;
mod params;
mod spec;

pub use model::{
    bottleneck_forward, encoder_forward, init_params, param_count, param_layout, ModelState, Mode,
    RunningStats, Trace, BN_EPS, BN_MOMENTUM, HEAD_STD,
};
pub use params::{Layout, ParamVector, Segment, SegmentTag};
pub use spec::{EncoderKind, ModelSpec, NormKind, ProjectorSpec};
