//! Query networks, the memory layer and its initialization.

pub mod layer;
pub mod query;

pub use layer::{
    init_memory, HeadRecord, KeyKind, KeyStore, MemoryConfig, MemoryForwardRecord, MemoryGrads, MemoryHead,
    MemoryLayer,
};
pub use query::{BatchNorm, BatchNormCache, QueryCache, QueryNetwork};
