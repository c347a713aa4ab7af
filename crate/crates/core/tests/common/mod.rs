//! Helpers shared by several test targets. Each target uses a subset.
#![allow(dead_code)]

pub mod grad;
pub mod wire_cases;
