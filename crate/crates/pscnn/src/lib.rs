//! Bit-exact functional and cycle-level simulator of a programmable
//! SRAM compute-in-memory processor for binary 1-D CNN inference, plus the
//! compiler that maps models onto its instruction set.
//!
//! The simulated machine is a single 1 Mb SRAM macro (1024 wordlines x
//! 1024 bitlines, 128 sense amplifiers) with ternary weight mapping, a
//! four-bank ping-pong feature SRAM, a 512 Kb weight SRAM for model
//! overflow, a 1024-bit line buffer and a pooling-write block, all driven
//! by a 32-bit four-instruction ISA.
//!
//! Start with [`model`] to describe a network, [`compiler::map_model`] to
//! place it, [`controller::System`] to execute it, and [`oracle`] /
//! [`compare`] to check every output bit against a brute-force reference.

pub mod bits;
pub mod cim;
pub mod compare;
pub mod compiler;
pub mod container;
pub mod controller;
pub mod isa;
pub mod mem;
pub mod model;
pub mod oracle;
pub mod pwb;

// The guide's code blocks double as doc-tests: each chapter is included
// here so `cargo test --doc` keeps the book in sync with the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/isa.md")]
    mod isa {}
    #[doc = include_str!("../../../book/src/macro.md")]
    mod cim_macro {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
    #[doc = include_str!("../../../book/src/pooling.md")]
    mod pooling {}
    #[doc = include_str!("../../../book/src/compiler.md")]
    mod compiler {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/variation.md")]
    mod variation {}
}
