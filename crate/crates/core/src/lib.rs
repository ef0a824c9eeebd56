//! Chunk-adaptive mixed-precision KV-cache quantization.
//!
//! Context chunks are scored against the query by an embedding encoder and
//! assigned to INT2, INT4 or FP16 storage. The cache keeps each tier's chunks
//! contiguous so decode attention runs as one dense pass per tier, and a
//! seeded toy model plus a run harness measure memory and output drift.

pub mod attention;
pub mod error;
pub mod harness;
pub mod kv_store;
pub mod quantizer;
pub mod retrieval;
pub mod tensor;
pub mod toy_model;

pub use attention::{
    mixed_decode_attention, prefill_attention, reference_attention, AttentionInstance,
};
pub use error::{Error, Result};
pub use harness::{
    Harness, ReportDocument, ReportFormat, RunConfig, RunReport, SweepSpec, Workload,
};
pub use kv_store::{build_cache, ChunkedKVCache, MemoryReport, QuantMode};
pub use quantizer::{dequantize, fqm, quantize, Bitwidth, QuantizedBlock};
pub use retrieval::{
    quantization_search, segment_context, ChunkSet, Encoder, SimilarityReport, Tier,
};
pub use tensor::Matrix;
pub use toy_model::{ToyModel, ToyModelConfig};
