//! Multi-stage multi-codebook (MSMC) product quantization of acoustic
//! feature sequences, with EMA-trained codebooks, speaker-similarity data
//! selection, warm-start fine-tuning, and objective reconstruction metrics.
//!
//! The pipeline runs audio → log-Mel features ([`dsp`]) → a hierarchy of
//! product quantizers at decreasing frame rates ([`model`], [`vq`]) trained
//! by [`trainer`], evaluated with [`metrics`]. Corpora are selected with
//! [`selection`]; all persistence lives in [`io`].

pub mod corpus;
pub mod dsp;
pub mod error;
pub mod features;
pub mod io;
pub mod metrics;
pub mod model;
pub mod par;
pub mod selection;
pub mod synth;
pub mod trainer;
pub mod vq;

pub use corpus::{Corpus, Utterance};
pub use dsp::{DspConfig, F0Track, Pcm};
pub use error::{Error, Result};
pub use features::FeatureSequence;
pub use model::{Coupling, LossReport, LossWeights, MsmcModel, Msmcr, StageConfig};
pub use par::Executor;
pub use trainer::{train, TrainConfig};
pub use vq::{Codebook, EmaConfig};
