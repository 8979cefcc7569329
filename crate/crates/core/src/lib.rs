//! Desk-scale RNN-transducer speech recognition with text-only adaptation
//! of the prediction network.

pub mod adaptation;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
