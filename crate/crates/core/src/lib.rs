//! Simulation of coherent MZI-mesh photonic neural networks under hardware
//! imperfections: phase and splitting-ratio uncertainty, insertion loss and
//! low-precision phase encoding.

pub mod device;
pub mod error;
pub mod experiments;
pub mod imperfect;
pub mod linalg;
pub mod mesh;
pub mod network;

pub use error::{Error, Result};
pub use linalg::ComplexMatrix;
