// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic table QA, a small rotary transformer trained on it, and the
//! tooling used to take it apart.

pub mod binding;
pub mod coords;
pub mod error;
pub mod geometry;
pub mod model;
pub mod multicell;
pub mod patchkit;
pub mod pipeline;
pub mod plot;
pub mod prompt;
pub mod tablegen;

pub use error::{LabError, Result};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/tables.md")]
    pub mod tables {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    pub mod prompts {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/patching.md")]
    pub mod patching {}
    #[doc = include_str!("../../../book/src/binding.md")]
    pub mod binding {}
    #[doc = include_str!("../../../book/src/coordinates.md")]
    pub mod coordinates {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    pub mod geometry {}
    #[doc = include_str!("../../../book/src/multicell.md")]
    pub mod multicell {}
    #[doc = include_str!("../../../book/src/runs.md")]
    pub mod runs {}
}
