//! Expert-parallel dispatch and combine for mixture-of-experts layers,
//! executed over a simulated multi-rank fabric with one-sided put/signal
//! semantics.

pub mod api;
pub mod config;
pub mod error;
pub mod fabric;
pub mod ht;
pub mod layout;
pub mod ll;
pub mod mem;
pub mod oracle;
pub mod quant;
pub mod sim;
pub mod stats;
pub mod tensor;
pub mod world;

pub use config::{Algorithm, EpConfig, HtCombinePath, LlLayout};
pub use error::{EpError, ErrorCode, Result};
pub use tensor::{tensor_create, Dtype, NDTensor, TensorBuffer, TensorTag};
