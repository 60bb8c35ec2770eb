//! Shared helpers for integration tests.
#![allow(dead_code)]

pub mod oracle;
pub mod grad_cases;
pub mod tiny;
