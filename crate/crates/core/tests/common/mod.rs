//! Oracle implementations shared between the targeted oracle tests and the
//! acceptance harness. Not a test target itself.
#![allow(dead_code)]

pub mod exact_alloc;
pub mod stats_oracles;
