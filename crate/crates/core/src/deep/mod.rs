//! End-to-end path: framewise encoder, pyramid aggregation with learnable
//! simplex weights, batch-norm + linear + softmax heads, two-stream fusion,
//! SGD training with the periodic frame schedule, and finite-difference
//! verification of every hand-derived backward.

pub mod layers;
pub mod model;
pub mod stream;
pub mod train;

pub use layers::{Activation, BatchNorm, Dense};
pub use model::{
    build_multi_pyramid_head, AggVariant, DeepModel, Encoder, EncoderKind, ModelConfig,
    ParamGroup, ReductionPlan, StreamMode, StreamModel,
};
pub use stream::{
    assemble_param_gradient, backward_stream, forward_stream_eval, forward_stream_train,
    BatchVideo, ModelGrad, StreamGrad,
};
pub use train::{
    batch_gradient, batch_loss, cross_entropy, evaluate, fuse_probs, gradcheck_deep,
    parallel_map, train, EpochRecord, EvalReport, Sgd, TrainConfig, TrainOutcome, VideoPair,
};
