//! Product-key memory: exact top-k search over a Cartesian product of two
//! sub-key codebooks, sparse weighted value reads, multi-head aggregation and
//! row-sparse value updates.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file name the common instantiations.

pub mod error;
pub mod memory;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pk_index;
pub mod scalar;
pub mod tensor;

pub use error::{PkmError, Result};
pub use memory::{
    init_memory, BatchNorm, HeadRecord, KeyKind, KeyStore, MemoryConfig, MemoryForwardRecord, MemoryGrads,
    MemoryHead, MemoryLayer, QueryNetwork,
};
pub use metrics::{perplexity, AccessAccumulator};
pub use optim::{sparse_value_update, Adam, AdamConfig, SparseRows, ValueTable};
pub use params::{Mode, Named, NamedMut, Parameters};
pub use pk_index::{
    flat_search, flat_search_batch, flat_search_instrumented, product_search, product_search_batch,
    product_search_instrumented, top_k, OpCounter, ProductKeyIndex, SubKeyCodebook, TopKSelection,
};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type ProductKeyIndexF32 = ProductKeyIndex<f32>;
pub type ProductKeyIndexF64 = ProductKeyIndex<f64>;
pub type MemoryLayerF32 = MemoryLayer<f32>;
pub type MemoryLayerF64 = MemoryLayer<f64>;
pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
