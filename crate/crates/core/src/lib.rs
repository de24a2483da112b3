//! Simple pooling front-ends (SimPFs) for log-mel spectrograms.
//!
//! The crate is organised as a pipeline:
//!
//! * [`audio`] decodes WAV files into mono [`audio::AudioClip`]s.
//! * [`features`] turns a clip into a natural-log mel spectrogram.
//! * [`simpf`] compresses the time axis of a spectrogram with one of five
//!   non-parametric pooling operators (max, average, average+max, spectral,
//!   uniform sampling).
//! * [`flops`] counts the forward-pass cost of a CNN for a given input length,
//!   which is how the compute savings of a front-end are measured.
//! * [`nn`] is a small CNN with hand-written gradients plus a synthetic
//!   dataset, used to show the accuracy cost of compression at desk scale.
//!
//! ```
//! use simpf::audio::AudioClip;
//! use simpf::features::{log_mel, SpectrogramConfig};
//! use simpf::simpf::{compress, CompressionSpec};
//!
//! let clip = AudioClip::new(vec![0.0; 16_000], 16_000).unwrap();
//! let mel = log_mel(&clip, &SpectrogramConfig::default()).unwrap();
//! assert_eq!((mel.n_mels(), mel.n_frames()), (64, 51));
//!
//! let spec: CompressionSpec = "avg:2".parse().unwrap();
//! let pooled = compress(&mel, spec).unwrap();
//! assert_eq!(pooled.n_frames(), 25);
//! ```

pub mod audio;
pub mod container;
mod error;
pub mod features;
pub mod flops;
pub mod nn;
pub mod render;
pub mod simpf;

pub use error::{Error, Result};
