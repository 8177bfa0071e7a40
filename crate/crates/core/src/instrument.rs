//! Attention capture, averaged attention export, flop model and the serving
//! benchmark.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::StreamSession;
use crate::error::{Error, Result};
use crate::masking::{SegmentTag, TagSet};
use crate::memory::FrameTokens;
use crate::model::{ModelConfig, Weights};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Which softmax rows to keep.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureFilter {
    /// `None` keeps every layer.
    pub layers: Option<Vec<usize>>,
    pub heads: Option<Vec<usize>>,
    pub query_tags: TagSet,
    /// Also store the query and key vectors of each row.
    pub dump_qk: bool,
}

impl Default for CaptureFilter {
    fn default() -> Self {
        CaptureFilter {
            layers: None,
            heads: None,
            query_tags: TagSet::ALL,
            dump_qk: false,
        }
    }
}

/// One softmax row: a query's weights over every key of the step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow<S> {
    pub layer: usize,
    pub head: usize,
    pub query_position: usize,
    pub query_tag: SegmentTag,
    /// Set when this row's logits produced a generated token.
    pub generating: bool,
    pub key_positions: Vec<usize>,
    pub key_tags: Vec<SegmentTag>,
    pub weights: Vec<S>,
    pub query: Option<Vec<S>>,
    pub keys: Option<Vec<Vec<S>>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionTrace<S> {
    pub filter: CaptureFilter,
    pub rows: Vec<AttentionRow<S>>,
}

impl<S: Scalar> AttentionTrace<S> {
    pub fn new(filter: CaptureFilter) -> Self {
        AttentionTrace { filter, rows: Vec::new() }
    }

    pub fn wants(&self, layer: usize, head: usize, tag: SegmentTag) -> bool {
        self.filter.layers.as_ref().is_none_or(|l| l.contains(&layer))
            && self.filter.heads.as_ref().is_none_or(|h| h.contains(&head))
            && self.filter.query_tags.contains(tag)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.weights.iter().map(|w| w.as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Mean attention of one layer (and optionally one head) over key positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedAttention {
    pub layer: usize,
    /// `None` for the mean over heads.
    pub head: Option<usize>,
    pub key_positions: Vec<usize>,
    pub key_tags: Vec<SegmentTag>,
    pub scores: Vec<f64>,
}

fn average_rows<'a, S: Scalar>(rows: impl Iterator<Item = &'a AttentionRow<S>>) -> Option<(Vec<usize>, Vec<SegmentTag>, Vec<f64>)> {
    // Keys absent from a row (not yet generated) count as zero weight.
    let mut acc: BTreeMap<usize, (SegmentTag, f64)> = BTreeMap::new();
    let mut count = 0usize;
    for r in rows {
        count += 1;
        for ((&p, &t), &w) in r.key_positions.iter().zip(&r.key_tags).zip(&r.weights) {
            acc.entry(p).or_insert((t, 0.0)).1 += w.as_f64();
        }
    }
    if count == 0 {
        return None;
    }
    let positions = acc.keys().copied().collect();
    let tags = acc.values().map(|v| v.0).collect();
    let scores = acc.values().map(|v| v.1 / count as f64).collect();
    Some((positions, tags, scores))
}

fn generated_layers<S: Scalar>(trace: &AttentionTrace<S>) -> Result<Vec<usize>> {
    let mut layers: Vec<usize> = trace.rows.iter().filter(|r| r.generating).map(|r| r.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    if layers.is_empty() {
        return Err(Error::Selection("trace holds no generated-token rows".into()));
    }
    Ok(layers)
}

/// Per layer, the mean over heads and generated-token queries.
pub fn averaged_generated_attention<S: Scalar>(trace: &AttentionTrace<S>) -> Result<Vec<AveragedAttention>> {
    let layers = generated_layers(trace)?;
    Ok(layers
        .into_iter()
        .filter_map(|l| {
            let rows = trace.rows.iter().filter(|r| r.generating && r.layer == l);
            average_rows(rows).map(|(key_positions, key_tags, scores)| AveragedAttention {
                layer: l,
                head: None,
                key_positions,
                key_tags,
                scores,
            })
        })
        .collect())
}

/// Per layer and head, the mean over generated-token queries.
pub fn averaged_generated_attention_per_head<S: Scalar>(trace: &AttentionTrace<S>) -> Result<Vec<AveragedAttention>> {
    let layers = generated_layers(trace)?;
    let mut out = Vec::new();
    for l in layers {
        let mut heads: Vec<usize> = trace.rows.iter().filter(|r| r.generating && r.layer == l).map(|r| r.head).collect();
        heads.sort_unstable();
        heads.dedup();
        for h in heads {
            let rows = trace.rows.iter().filter(|r| r.generating && r.layer == l && r.head == h);
            if let Some((key_positions, key_tags, scores)) = average_rows(rows) {
                out.push(AveragedAttention {
                    layer: l,
                    head: Some(h),
                    key_positions,
                    key_tags,
                    scores,
                });
            }
        }
    }
    Ok(out)
}

/// CSV with columns `layer,head,key_pos,segment,score`; `head` is `mean` for
/// head-averaged rows.
pub fn attention_csv(maps: &[AveragedAttention]) -> String {
    let mut s = String::from("layer,head,key_pos,segment,score\n");
    for m in maps {
        let head = m.head.map_or_else(|| "mean".to_string(), |h| h.to_string());
        for ((p, t), v) in m.key_positions.iter().zip(&m.key_tags).zip(&m.scores) {
            let _ = writeln!(s, "{},{},{},{},{}", m.layer, head, p, t.as_str(), v);
        }
    }
    s
}

/// Closed-form flop count of one forward step over `s` new tokens with
/// `pairs` allowed (query, key) pairs:
///
/// ```text
/// per layer   2·s·d·d·4                  Q, K, V, O projections
///           + 2·s·(d·r + r·d)·4          adapters, when r > 0
///           + 4·d·pairs                  scores and weighted values, all heads
///           + 2·s·d·f·2                  feed-forward
/// once        2·s·d·vocab                unembedding
/// ```
pub fn forward_flops(config: &ModelConfig, s: usize, pairs: usize) -> u64 {
    let (d, r, f) = (config.d_model as u64, config.lora_rank as u64, config.d_ff as u64);
    let s = s as u64;
    let mut layer = 2 * s * d * d * 4 + 4 * d * pairs as u64 + 2 * s * d * f * 2;
    if r > 0 {
        layer += 2 * s * (d * r + r * d) * 4;
    }
    layer * config.layers as u64 + 2 * s * d * config.vocab as u64
}

/// When to pose questions during a benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSchedule {
    pub frames: usize,
    /// Ask after this many frames have been ingested.
    #[serde(default)]
    pub questions: Vec<usize>,
    #[serde(default)]
    pub question: Vec<u32>,
    #[serde(default)]
    pub max_new: usize,
    #[serde(default)]
    pub system: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AskTiming {
    pub after_frames: usize,
    pub prefill_us: f64,
    pub decode_us_per_token: f64,
    pub total_us: f64,
    pub new_tokens: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub memory_capacity: usize,
    pub ingest_us: Vec<f64>,
    pub ingest_flops: Vec<u64>,
    pub kv_bytes: Vec<usize>,
    pub asks: Vec<AskTiming>,
    /// `1 / mean ingest seconds`; `None` without frames.
    pub serving_fps_proxy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    pub frames: usize,
    pub m: usize,
    pub ingest_us: Option<Percentiles>,
    pub ask_us: Option<f64>,
    pub serving_fps_proxy: Option<f64>,
    pub kv_bytes_final: usize,
    pub flops_per_ingest: u64,
}

/// Nearest-rank percentile of `q ∈ [0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl BenchReport {
    pub fn summary(&self) -> BenchSummary {
        let ask: Vec<f64> = self.asks.iter().map(|a| a.total_us).collect();
        BenchSummary {
            frames: self.ingest_us.len(),
            m: self.memory_capacity,
            ingest_us: percentile(&self.ingest_us, 0.5).map(|p50| Percentiles {
                p50,
                p90: percentile(&self.ingest_us, 0.9).unwrap_or(p50),
            }),
            ask_us: (!ask.is_empty()).then(|| ask.iter().sum::<f64>() / ask.len() as f64),
            serving_fps_proxy: self.serving_fps_proxy,
            kv_bytes_final: self.kv_bytes.last().copied().unwrap_or(0),
            flops_per_ingest: self.ingest_flops.last().copied().unwrap_or(0),
        }
    }
}

/// Deterministic Gaussian frames for benchmarking.
pub fn random_frames<S: Scalar>(count: usize, tokens: usize, dim: usize, seed: u64) -> Vec<FrameTokens<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|t| {
            let data = (0..tokens * dim)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    S::lit(v)
                })
                .collect();
            FrameTokens::new(t, Matrix::from_vec(tokens, dim, data).expect("sized"))
        })
        .collect()
}

/// Runs a full session over random frames, asking at the scheduled points.
/// Trace events go to `sink` when given.
pub fn bench_serving<S: Scalar>(
    config: &ModelConfig,
    weights: Arc<Weights<S>>,
    schedule: &BenchSchedule,
    seed: u64,
    sink: Option<Box<dyn Write + Send>>,
) -> Result<BenchReport> {
    let frames = random_frames::<S>(schedule.frames, config.frame_tokens, config.d_model, seed);
    let mut session = StreamSession::open(config, weights, &schedule.system)?;
    if let Some(sink) = sink {
        session.set_trace_sink(sink);
    }
    let mut report = BenchReport {
        memory_capacity: config.memory_capacity,
        ingest_us: Vec::with_capacity(schedule.frames),
        ingest_flops: Vec::with_capacity(schedule.frames),
        kv_bytes: Vec::with_capacity(schedule.frames),
        asks: Vec::new(),
        serving_fps_proxy: None,
    };
    let ask = |session: &mut StreamSession<S>, after: usize, report: &mut BenchReport| -> Result<()> {
        for _ in schedule.questions.iter().filter(|&&q| q == after) {
            let out = session.ask(&schedule.question, schedule.max_new)?;
            report.asks.push(AskTiming {
                after_frames: after,
                prefill_us: out.prefill_us,
                decode_us_per_token: out.decode_us_per_token,
                total_us: out.prefill_us + out.decode_us_per_token * out.tokens.len() as f64,
                new_tokens: out.tokens.len(),
                flops: out.flops,
            });
            session.reset_dialogue();
        }
        Ok(())
    };
    ask(&mut session, 0, &mut report)?;
    for (t, f) in frames.iter().enumerate() {
        let r = session.ingest_frame(f)?;
        report.ingest_us.push(r.latency_us);
        report.ingest_flops.push(r.flops);
        report.kv_bytes.push(r.kv_bytes);
        ask(&mut session, t + 1, &mut report)?;
    }
    session.flush_trace()?;
    if !report.ingest_us.is_empty() {
        let mean_s = report.ingest_us.iter().sum::<f64>() / report.ingest_us.len() as f64 / 1e6;
        report.serving_fps_proxy = Some(1.0 / mean_s);
    }
    Ok(report)
}
