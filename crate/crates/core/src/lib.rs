//! Simulation, registration, fusion and stitching for Lissajous-scanned
//! confocal laser endomicroscopy.

pub mod dataset;
pub mod error;
pub mod fft;
pub mod frame;
pub mod fusion;
pub mod imageio;
pub mod lissajous;
pub mod matching;
pub mod metrics;
pub mod mosaic;
pub mod registration;
pub mod texture;

pub use error::{Error, Result};
pub use frame::{shift_frame, DenseFrame, Displacement, FrameSequence, Grid, Rect, SparseFrame};
