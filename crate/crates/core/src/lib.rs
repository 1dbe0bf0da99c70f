//! Spatio-temporal graph mask-passing attention for multi-point vibrotactile
//! perceptual importance prediction.
//!
//! The crate covers the full pipeline: conditioning raw tri-axial
//! acceleration into wavelet-packet tensors ([`preprocess`]), the interaction
//! graph ([`graph`]), the temporal-spectral mask-passing and global spatial
//! attention layers ([`attention`]), the two-branch network ([`network`]),
//! losses ([`objectives`]), joint training with gradient surgery
//! ([`training`]), a synthetic masking-oracle dataset ([`synthdata`]) and
//! evaluation ([`evalkit`]).

pub mod attention;
pub mod autodiff;
pub mod baseline;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod formats;
pub mod graph;
pub mod params;
pub mod network;
pub mod objectives;
pub mod preprocess;
pub mod selftest;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Mat;
