//! Benchmarking, training, evaluation, ablation sweeps and checkpoint
//! persistence for product-key memory models.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod records;
