//! Speech synthesis from rendered text.
//!
//! Text is drawn into fixed-width glyph cells ([`textimg`]), cut into one
//! window per character ([`slicer`]), encoded by a small CNN ([`features`])
//! and turned into a mel spectrogram by a non-autoregressive acoustic model
//! ([`acoustic`]). [`data`], [`train`] and [`eval`] cover corpora, training
//! and the evaluation protocols; [`audio`] and [`tensorfile`] handle I/O.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`).

pub mod acoustic;
pub mod audio;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod mat;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod slicer;
pub mod tensorfile;
pub mod textimg;
pub mod train;

pub use error::{Error, Result};
pub use mat::Mat;
pub use scalar::Scalar;

pub type Mat32 = Mat<f32>;
pub type Mat64 = Mat<f64>;
pub type Model32 = acoustic::AcousticModel<f32>;
pub type Model64 = acoustic::AcousticModel<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
