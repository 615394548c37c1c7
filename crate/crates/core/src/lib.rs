//! Typed causal primitives, dual-channel routing, causal execution graphs,
//! synthetic causal worlds and constrained meta-evolution.

pub mod numerics;
pub mod types;
pub mod primitives;
pub mod algebra;
pub mod worlds;
pub mod routing;
pub mod ceg;
pub mod meta;
pub mod acceptance;
