//! Convolutional networks with hand-written gradients: a single-stream
//! baseline and a two-stream (primary + contra-lateral) symmetry model that
//! share one classifier head topology.

pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use network::{
    backward, baseline_forward, forward, glorot_head, glorot_init, glorot_limit, predict,
    symmetry_forward, ForwardPass, Layer, Mode, ModelKind, NetworkSpec, Parameters,
    FULL_SCALE_INPUT_PX,
};
pub use tensor::{Scalar, Tensor};
