//! Data loading, optimisation, training and diagnostics.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod diagnose;
pub mod image;
pub mod optim;
pub mod selftest;
pub mod synthetic;
pub mod train;
