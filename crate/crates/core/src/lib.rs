//! Core kernels for refining one- or two-person body poses from
//! language-level contact descriptions.
//!
//! Everything here is `no_std` (with `alloc`): the articulated body model,
//! region vocabulary, response parser, geometry, losses, the two-stage
//! optimizer and the evaluation metrics. File formats, networking and the
//! command line live in the `contactfit` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod body_model;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod optimizer;
pub mod parser;
pub mod regions;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Whether constraints relate two people or one person with themself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TwoPerson,
    OnePerson,
}

impl Mode {
    pub fn num_persons(self) -> usize {
        match self {
            Mode::TwoPerson => 2,
            Mode::OnePerson => 1,
        }
    }
}
