//! Maps artificial and spiking neural networks onto simulated non-ideal
//! memristive crossbars, and trains and evaluates the networks whose
//! robustness is being measured.
//!
//! The pipeline: a [`crossbar`] tile is solved exactly as a resistive
//! network, [`mapping`] folds the resulting non-ideal conductances back into
//! layer weights, [`snn`] runs the spiking (or ReLU) forward pass, and
//! [`training`] provides surrogate-gradient, conversion, time-indexed batch
//! norm and noise-aware adaptation. [`harness`] ties these into experiments,
//! reports and the command-line tool.

pub mod crossbar;
pub mod error;
pub mod harness;
pub mod mapping;
pub mod numerics;
pub mod snn;
pub mod training;

pub use error::{Error, Result};
