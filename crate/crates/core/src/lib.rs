//! Streaming multichannel speech enhancement with a dual-process design.
//!
//! A low-latency front end estimates time-frequency masks with a
//! direction-aware recurrent network and feeds them to an MVDR
//! beamformer. A high-latency back end runs FastMNMF blind source
//! separation on long blocks, keeps the separated image that matches the
//! target direction, and periodically fine-tunes the front-end network on
//! those images.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root pin the `f64` instantiation used by the tools.

mod error;
pub mod beamform;
pub mod fastmnmf;
pub mod gate;
pub mod linalg;
pub mod masknet;
pub mod metrics;
pub mod orchestrator;
mod scalar;
pub mod scenario;
pub mod signal;
pub mod wpe;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TimeSignal = signal::TimeSignal<f64>;
pub type TimeSignal32 = signal::TimeSignal<f32>;
pub type Spectrogram = signal::MultichannelSpectrogram<f64>;
pub type Spectrogram32 = signal::MultichannelSpectrogram<f32>;
