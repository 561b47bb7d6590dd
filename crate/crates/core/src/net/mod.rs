//! Dense-tensor autodiff engine and the ordinal height network.

pub mod checkpoint;
pub mod graph;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, NodeId};
pub use model::{ForwardPass, HeadKind, NetConfig, OrdinalNet, OUTPUT_STRIDE};
pub use ops::ConvGeom;
pub use params::{Param, ParamGrads, ParamGroup, ParamId, ParamSet};
pub use tensor::{Real, Tensor};
