pub mod autograd;
pub mod bottleneck;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod unlearning;

pub use autograd::{AttentionLayout, Graph, Var};
pub use bottleneck::{CodebookState, SaeParams};
pub use error::{Error, Result};
pub use model::{ModelConfig, Seq2Seq, SequenceBatch};
pub use tensor::Tensor;
