//! Chorale modelling with interleaved chord and voice tokens.
//!
//! The pipeline: [`corpus`] loads the interchange file, [`encoder`] turns
//! each piece into a chord-then-voices token stream with repetition counts,
//! [`augment`] transposes the training split, [`model`] is a three-layer GRU
//! built on the [`autodiff`] engine, [`train`] runs 1cycle SGD, [`eval`]
//! reports full and no-chord losses, and [`sample`] generates new pieces and
//! writes them as MIDI.

pub mod augment;
pub mod cli;
pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod harmony;
pub mod model;
pub mod sample;
pub mod stats;
pub mod synthetic;
pub mod train;
pub mod vocab;
