pub mod adapters;
pub mod crossmodal;
pub mod error;
pub mod harness;
pub mod netmodel;
pub mod numkernel;
pub mod seqmodel;
pub mod training;

pub use adapters::{Adapter, AdapterSpec, CrossMode, Variant};
pub use error::{Error, Result};
pub use netmodel::{NetDims, ToyNetwork};
pub use numkernel::{Matrix, Precision, RngStream, Scalar, Tape, Var};
pub use seqmodel::{ModalityId, RoutingMask, SegmentedSequence};
