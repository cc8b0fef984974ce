//! Multi-label semantic annotation of multispectral photoacoustic (PA)
//! and ultrasound (US) images: synthetic phantom generation, sequence
//! preprocessing, a small deterministic autograd engine, U-Net and
//! per-pixel FCNN models, training, and evaluation reporting.
//!
//! Everything seeded is driven by explicit `u64` seeds through
//! ChaCha8-based generators, so runs reproduce bit-identically on any
//! platform.

pub mod config;
pub mod error;
pub mod evalreport;
pub mod manifest;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod seeding;
pub mod spectra;
pub mod split;
pub mod tensorfile;
pub mod trainer;
pub mod types;

pub use error::{CoreError, Result};
pub use models::{Architecture, Fcnn, FcnnSpec, InputMode, Model, UNet, UNetSpec};
pub use types::{
    LabelMap, Sample, SampleId, SampleMeta, Side, Site, SpectralCube, TissueClass, UsImage,
    WavelengthAxis,
};
