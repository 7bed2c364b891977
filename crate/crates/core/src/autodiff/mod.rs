//! Small reverse-mode differentiation engine, sized for the EdgeFormer network.

mod gradcheck;
mod kernels;
mod nn;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{
    analytic_gradients, compare, grad_check, numeric_gradients, relative_error, GradCheckReport,
    DEFAULT_STEP,
};
pub use kernels::{gemm_nn, gemm_nt, gemm_tn, inverse_axes, permute};
pub use nn::{encoder_layer, multi_head_attention, AttentionVars, EncoderLayerVars};
pub use optim::{adam_step, lr_at_epoch, AdamState, LrSchedule, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{
    BatchStats, Gradients, Mode, Tape, Var, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM, LAYER_NORM_EPS,
};
pub use tensor::{Real, Tensor};
