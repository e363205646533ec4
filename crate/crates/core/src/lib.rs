pub mod bilevel;
pub mod controller;
pub mod data;
pub mod error;
pub mod head;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod search_space;
pub mod snas;
pub mod stem;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{Bound, Buffers, ParamGroup, ParamId, ParamStore};
pub use search_space::{AdaptiveBlock, AlphaTable, OpKind, OpSet};
pub use tensor::{Gradients, Tape, Tensor, Var};
