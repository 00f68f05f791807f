//! Block floating point K-cache quantization with norm-sorted key channels.
//!
//! Sorting the output channels of the key projection by row norm, and
//! reordering the query projection and rotary tables the same way, leaves
//! every attention logit unchanged while grouping outlier channels into the
//! same shared-exponent blocks of the cached keys.

pub mod bfp;
pub mod error;
pub mod experiment;
pub mod ksort;
pub mod report;
pub mod rope;
pub mod sim;
pub mod tensor;
pub mod tensorio;

pub use error::{Error, Result};
