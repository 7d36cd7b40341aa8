//! A laboratory for frequency probability in the sense of von Mises.
//!
//! Probabilities here are limits of relative frequencies in label sequences
//! ("collectives"). The crate provides exact counting and a finite-N
//! stabilization proxy ([`collective`]), the calculus of combining
//! collectives ([`combining`]), constructive counterexamples ([`gallery`]),
//! a contextual hidden-variable EPR-Bohm testbed ([`epr`]), an exact
//! joint-distribution existence checker for three ±1 observables
//! ([`fine_rastall`]) and a time-average trajectory model ([`trajectory`]).
//!
//! Every random quantity is drawn from the counter-based generator in
//! [`rng`], so each experiment is a pure function of its seed and
//! parameters.

pub mod collective;
pub mod combining;
pub mod epr;
mod error;
pub mod fine_rastall;
pub mod fmt;
pub mod gallery;
pub mod rng;
pub mod trajectory;

pub use collective::{
    detect_stabilization, event_frequency, frequency_trace, Checkpoints, FrequencyTrace, Label,
    LabelSource, LabelVec, StabilizationParams, StabilizationStatus, StabilizationVerdict,
};
pub use combining::{assess_combinability, conditional_trace, pair, transmit_bits, PairedSequence};
pub use error::{Error, Result};
pub use rng::Stream;
