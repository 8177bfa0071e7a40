//! Streaming inference with one semantic carrier token per frame.
//!
//! Each incoming frame is prefilled together with a trailing carrier token
//! whose embedding is the mean of the frame's visual tokens. Only the
//! carrier's keys and values stay in the cache; the frame tokens are
//! discarded. A capacity-`M` memory bank evicts the older carrier of the
//! most similar pair once full, so visual memory and per-frame cost stay
//! bounded however long the stream runs.
//!
//! The crate is generic over the floating-point type. Inference runs at
//! `f32`; gradient checks and oracles use the same code at `f64`.

pub mod config;
pub mod engine;
pub mod error;
pub mod frames;
pub mod instrument;
pub mod masking;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod training;

pub use config::{RunConfig, RunPaths};
pub use engine::{
    argmax, oracle_full_forward, oracle_full_forward_probed, open_session, GenerationOutput, IngestReport, KvFootprint,
    OracleOutput, ReplaySchedule, StreamSession,
};
pub use error::{Error, Result};
pub use frames::{load_frames, read_frames, save_frames, write_frames, FrameHeader};
pub use instrument::{
    attention_csv, averaged_generated_attention, averaged_generated_attention_per_head, bench_serving, forward_flops,
    AttentionRow, AttentionTrace, AveragedAttention, BenchReport, BenchSchedule, BenchSummary, CaptureFilter,
};
pub use masking::{
    build_semantic_mask, build_semantic_mask_with, build_streaming_mask, CarrierVisibility, EntryMeta, Layout, MaskSpec,
    NewSegment, SegmentTag, TagSet,
};
pub use memory::{bank_snapshot, build_carrier_embedding, memory_insert, CarrierRecord, EvictionEvent, FrameTokens, MemoryBank};
pub use model::{
    attention_forward, embed_positions, forward_step, forward_step_probed, init_model, CarrierKvMode, CarrierMode,
    EvictionRule, KvCache, ModelConfig, Weights,
};
pub use numerics::{cosine_similarity, layer_norm, matmul, softmax_rows, Matrix};
pub use scalar::Scalar;
pub use training::{
    build_sequence, evaluate, gen_synthetic_stream, grad_check, train_stage1, train_stage2, GradCheckReport, Optimizer,
    Recall, StepMetrics, SyntheticStream, TaskSpec, TrainConfig, TrainOutcome, TrainSequence, TrainableSet,
};

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Weights32 = Weights<f32>;
pub type Weights64 = Weights<f64>;
pub type KvCache32 = KvCache<f32>;
pub type FrameTokens32 = FrameTokens<f32>;
pub type StreamSession32 = StreamSession<f32>;
pub type StreamSession64 = StreamSession<f64>;
