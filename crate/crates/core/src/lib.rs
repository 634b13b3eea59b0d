//! Equation generation for math word problems with a shared encoder and two
//! Transformer decoders reading the equation left-to-right and right-to-left.

pub mod corpus;
pub mod decoding;
pub mod equations;
pub mod model;
pub mod numbering;
pub mod numerics;
pub mod rational;
pub mod training;

pub use corpus::{Encoded, Problem, Report, Vocabulary};
pub use decoding::{BeamConfig, Decoded, Hypothesis, Vote};
pub use equations::{SolutionSet, Value, Variable};
pub use model::{Checkpoint, Direction, ModelConfig, ModelError, ModelParams};
pub use numbering::{EquationTemplate, NumberMapping};
pub use numerics::Tensor;
pub use training::{TrainConfig, TrainError};
