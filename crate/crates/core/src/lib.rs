//! Multi-task sentence classification where every task reads the same
//! BiLSTM representation and differs only in how it attends over it.

pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod evalviz;
pub mod gradcheck;
pub mod mtl;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use tape::Tape;
pub use tensor::{Tensor, TensorError, Var};
