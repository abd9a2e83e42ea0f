//! Minimal reverse-mode differentiation over dense tensors.

pub mod kernels;
mod tape;

pub use tape::{KlDirection, Tape, Var};
