//! Optimizer, schedule, single-stage trainer and the incremental protocol.

mod optim;
mod protocol;
mod stage;

pub use optim::{poly_lr, AdamConfig, AdamState};
pub use protocol::{
    run_protocol, stage_tag, train_first_stage, ProtocolConfig, StageOutcome, UPPER_BOUND_TAG,
};
pub use stage::{train_stage, trainable_names, Method, MethodSpec, StageConfig, TrainReport, METHOD_NAMES};
