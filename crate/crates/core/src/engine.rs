//! The live streaming session and the full-sequence oracle.
//!
//! A session ingests one frame per call. Each frame is prefilled as
//! `[frame tokens][carrier]` at fresh positions; only the carrier's KV is
//! kept. When the bank is full the victim is evicted before the new frame is
//! prefilled, so a forward pass never sees more than `M − 1` earlier
//! carriers and the cache never holds more than `system + M` visual entries.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use serde_json::json;

use crate::error::{Error, Result};
use crate::instrument::{AttentionTrace, CaptureFilter};
use crate::masking::{build_semantic_mask_with, build_streaming_mask, CarrierVisibility, EntryMeta, Layout, MaskSpec, NewSegment, SegmentTag, TagSet};
use crate::memory::{build_carrier_embedding, BankEntry, CarrierRecord, EvictionEvent, FrameTokens, MemoryBank, Victim};
use crate::model::{forward_step_probed, CarrierKvMode, KvCache, ModelConfig, Probe, StepInput, Weights};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub frame: usize,
    pub evicted: Option<EvictionEvent>,
    pub bank_size: usize,
    pub kv_bytes: usize,
    pub latency_us: f64,
    /// Counted floating-point operations of the prefill.
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput<S> {
    pub tokens: Vec<u32>,
    /// Logits that produced each generated token.
    pub logits: Vec<Vec<S>>,
    pub prefill_us: f64,
    pub decode_us_per_token: f64,
    pub flops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvFootprint {
    pub entries_per_layer: usize,
    pub bytes: usize,
    /// Bytes without dialogue (text) entries.
    pub visual_bytes: usize,
}

/// Evictions fixed in advance: for each incoming frame, the frame whose
/// carrier leaves the bank. Also yields the carrier visibility the oracle
/// needs to reproduce the same stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplaySchedule {
    pub evictions: BTreeMap<usize, usize>,
    pub visibility: CarrierVisibility,
}

impl ReplaySchedule {
    /// Runs the bank over the carrier embeddings of `frames` the way a
    /// session configured by `config` would.
    pub fn simulate<S: Scalar>(config: &ModelConfig, weights: &Weights<S>, frames: &[FrameTokens<S>]) -> Result<Self> {
        if !config.memory_enabled {
            return Err(Error::Config("replay needs the memory bank".into()));
        }
        let mut bank = MemoryBank::<S>::new(config.memory_capacity, config.eviction_rule)?;
        let mut schedule = ReplaySchedule::default();
        for f in frames {
            f.check(config.frame_tokens, config.d_model)?;
            let emb = build_carrier_embedding(&weights.encode_frame(&f.embeddings)?, config.carrier_mode)?;
            if let Some(v) = bank.select_victim(f.index, &emb)? {
                bank.evict(v);
                schedule.evictions.insert(f.index, v.frame);
            }
            schedule.visibility.at_frame.push((f.index, bank.frames().into_iter().collect()));
            bank.push(CarrierRecord {
                frame: f.index,
                embedding: emb,
                kv: Vec::new(),
                position: 0,
                created: f.index,
            })?;
        }
        schedule.visibility.at_text = bank.frames().into_iter().collect();
        Ok(schedule)
    }

    /// Frames evicted before any later frame was prefilled with them in view.
    pub fn unseen_evictions(&self) -> BTreeSet<usize> {
        let seen: BTreeSet<usize> = self.visibility.at_frame.iter().flat_map(|(_, s)| s.iter().copied()).collect();
        self.evictions.values().copied().filter(|f| !seen.contains(f)).collect()
    }
}

pub struct StreamSession<S: Scalar> {
    config: ModelConfig,
    weights: Arc<Weights<S>>,
    cache: KvCache<S>,
    bank: MemoryBank<S>,
    system: Vec<u32>,
    next_position: usize,
    last_frame: Option<usize>,
    /// Encoded frames kept when the bank is disabled.
    buffered: Vec<(usize, Matrix<S>)>,
    replay: Option<ReplaySchedule>,
    trace: Option<Box<dyn Write + Send>>,
    capture: Option<AttentionTrace<S>>,
    closed: bool,
}

impl<S: Scalar> std::fmt::Debug for StreamSession<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StreamSession")
            .field("next_position", &self.next_position)
            .field("cache_len", &self.cache.len())
            .field("bank", &self.bank.frames())
            .field("closed", &self.closed)
            .finish()
    }
}

/// Opens a session and prefills the system prompt. `config` may differ from
/// the weights' config in streaming options but not in shape.
pub fn open_session<S: Scalar>(config: &ModelConfig, weights: Arc<Weights<S>>, system: &[u32]) -> Result<StreamSession<S>> {
    StreamSession::open(config, weights, system)
}

impl<S: Scalar> StreamSession<S> {
    pub fn open(config: &ModelConfig, weights: Arc<Weights<S>>, system: &[u32]) -> Result<Self> {
        config.validate()?;
        if !config.same_architecture(&weights.config) {
            return Err(Error::Config("session config does not match the weights".into()));
        }
        let mut session = StreamSession {
            config: config.clone(),
            cache: KvCache::new(config.layers, config.d_model),
            bank: MemoryBank::new(config.memory_capacity, config.eviction_rule)?,
            weights,
            system: system.to_vec(),
            next_position: 0,
            last_frame: None,
            buffered: Vec::new(),
            replay: None,
            trace: None,
            capture: None,
            closed: false,
        };
        if !system.is_empty() {
            let emb = session.weights.embed_tokens(system)?;
            session.run(NewSegment::System { len: system.len() }, &emb, TagSet::of(&[SegmentTag::System]))?;
        }
        Ok(session)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights<S> {
        &self.weights
    }

    pub fn cache(&self) -> &KvCache<S> {
        &self.cache
    }

    pub fn bank(&self) -> &MemoryBank<S> {
        &self.bank
    }

    pub fn system(&self) -> &[u32] {
        &self.system
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn bank_snapshot(&self) -> Vec<BankEntry<S>> {
        self.bank.snapshot()
    }

    pub fn set_trace_sink(&mut self, sink: Box<dyn Write + Send>) {
        self.trace = Some(sink);
    }

    /// Evict according to `schedule` instead of by similarity.
    pub fn replay(&mut self, schedule: ReplaySchedule) {
        self.replay = Some(schedule);
    }

    pub fn enable_capture(&mut self, filter: CaptureFilter) {
        self.capture = Some(AttentionTrace::new(filter));
    }

    /// Hands over the rows captured so far, leaving capture enabled.
    pub fn take_trace(&mut self) -> Result<AttentionTrace<S>> {
        match self.capture.as_mut() {
            Some(cap) => Ok(AttentionTrace {
                filter: cap.filter.clone(),
                rows: std::mem::take(&mut cap.rows),
            }),
            None => Err(Error::State("attention capture is not enabled".into())),
        }
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    fn ensure_open(&self) -> Result<()> {
        if self.closed {
            return Err(Error::State("session is closed".into()));
        }
        Ok(())
    }

    pub fn kv_footprint(&self) -> KvFootprint {
        KvFootprint {
            entries_per_layer: self.cache.len(),
            bytes: self.cache.bytes(),
            visual_bytes: self.cache.bytes_where(|t| t != SegmentTag::Text),
        }
    }

    /// Drops every text entry. Visual memory is untouched.
    pub fn reset_dialogue(&mut self) {
        self.cache.remove_tag(SegmentTag::Text);
    }

    /// One forward step of `segment` at the next free positions.
    fn run(&mut self, segment: NewSegment, embeddings: &Matrix<S>, retain: TagSet) -> Result<(Matrix<S>, u64)> {
        self.run_at(segment, self.next_position, embeddings, retain)
    }

    fn run_at(&mut self, segment: NewSegment, start: usize, embeddings: &Matrix<S>, retain: TagSet) -> Result<(Matrix<S>, u64)> {
        let mask = build_streaming_mask(self.cache.meta(), segment, start)?;
        let entries = segment.entries(start);
        let out = forward_step_probed(
            &self.weights,
            &mut self.cache,
            &StepInput {
                embeddings,
                entries: &entries,
                mask: &mask,
            },
            retain,
            &mut Probe {
                capture: self.capture.as_mut(),
            },
        )?;
        self.next_position = start + segment.len();
        Ok((out.logits, out.flops))
    }

    /// Prefills `[frame tokens][carrier]` and keeps only the carrier KV.
    fn prefill_encoded(&mut self, frame: usize, encoded: &Matrix<S>, embedding: Vec<S>) -> Result<(CarrierRecord<S>, u64)> {
        let n = self.config.frame_tokens;
        let start = self.next_position;
        let carrier_position = start + n;
        if carrier_position >= self.config.max_positions {
            return Err(Error::Capacity {
                position: carrier_position,
                max: self.config.max_positions,
            });
        }
        let carrier = Matrix::from_vec(1, embedding.len(), embedding.clone())?;
        let retain = TagSet::of(&[SegmentTag::Carrier]);
        let flops = match self.config.carrier_kv_mode {
            CarrierKvMode::Inherited => {
                let rows = encoded.vstack(&carrier)?;
                self.run_at(NewSegment::FrameWithCarrier { frame, tokens: n }, start, &rows, retain)?.1
            }
            CarrierKvMode::EmbeddingOnly => self.run_at(NewSegment::CarrierOnly { frame }, carrier_position, &carrier, retain)?.1,
        };
        let last = self.cache.len() - 1;
        let kv = (0..self.cache.layers())
            .map(|l| (self.cache.key(l, last).to_vec(), self.cache.value(l, last).to_vec()))
            .collect();
        Ok((
            CarrierRecord {
                frame,
                embedding,
                kv,
                position: carrier_position,
                created: frame,
            },
            flops,
        ))
    }

    fn check_frame(&self, frame: &FrameTokens<S>) -> Result<()> {
        self.ensure_open()?;
        frame.check(self.config.frame_tokens, self.config.d_model)?;
        if let Some(newest) = self.last_frame {
            if frame.index <= newest {
                return Err(Error::Ordering {
                    incoming: frame.index,
                    newest,
                });
            }
        }
        Ok(())
    }

    fn choose_victim(&self, frame: usize, embedding: &[S]) -> Result<Option<Victim>> {
        let Some(schedule) = &self.replay else {
            return self.bank.select_victim(frame, embedding);
        };
        let planned = schedule.evictions.get(&frame).copied();
        match planned {
            None if self.bank.len() >= self.bank.capacity() => {
                Err(Error::State(format!("replay schedule has no eviction for frame {frame}")))
            }
            None => Ok(None),
            Some(victim) => {
                let index = self.bank.records().iter().position(|c| c.frame == victim).ok_or_else(|| {
                    Error::State(format!("replayed victim {victim} is not in the bank"))
                })?;
                let score = crate::numerics::cosine_similarity(&self.bank.records()[index].embedding, embedding)?;
                Ok(Some(Victim {
                    index,
                    frame: victim,
                    score: score.as_f64(),
                }))
            }
        }
    }

    /// Builds the carrier, makes room in the bank, prefills the frame and
    /// stores the carrier. Returns the stored record, the eviction it caused
    /// and the counted flops.
    pub fn prefill_frame(&mut self, frame: &FrameTokens<S>) -> Result<(CarrierRecord<S>, Option<EvictionEvent>, u64)> {
        self.check_frame(frame)?;
        if !self.config.memory_enabled {
            return Err(Error::State("memory bank is disabled; frames are buffered".into()));
        }
        let encoded = self.weights.encode_frame(&frame.embeddings)?;
        let embedding = build_carrier_embedding(&encoded, self.config.carrier_mode)?;
        let end = self.next_position + self.config.frame_tokens;
        if end >= self.config.max_positions {
            return Err(Error::Capacity {
                position: end,
                max: self.config.max_positions,
            });
        }
        let evicted = match self.choose_victim(frame.index, &embedding)? {
            Some(v) => {
                let gone = self.bank.evict(v);
                let i = self
                    .cache
                    .find_position(gone.position)
                    .ok_or_else(|| Error::State(format!("carrier {} missing from cache", gone.frame)))?;
                self.cache.remove(i);
                self.bank.log().last().copied()
            }
            None => None,
        };
        let (record, flops) = self.prefill_encoded(frame.index, &encoded, embedding)?;
        self.bank.push(record.clone())?;
        self.last_frame = Some(frame.index);
        Ok((record, evicted, flops))
    }

    pub fn ingest_frame(&mut self, frame: &FrameTokens<S>) -> Result<IngestReport> {
        let t0 = Instant::now();
        let (evicted, flops) = if self.config.memory_enabled {
            let (_, ev, flops) = self.prefill_frame(frame)?;
            (ev, flops)
        } else {
            self.check_frame(frame)?;
            let encoded = self.weights.encode_frame(&frame.embeddings)?;
            self.buffered.push((frame.index, encoded));
            self.last_frame = Some(frame.index);
            (None, 0)
        };
        let latency_us = t0.elapsed().as_secs_f64() * 1e6;
        let report = IngestReport {
            frame: frame.index,
            evicted,
            bank_size: self.bank.len(),
            kv_bytes: self.cache.bytes(),
            latency_us,
            flops,
        };
        self.emit(json!({
            "event": "ingest",
            "frame": report.frame,
            "latency_us": latency_us.round() as u64,
            "bank_size": report.bank_size,
            "kv_bytes": report.kv_bytes,
            "evicted": evicted.map(|e| e.frame_evicted),
        }))?;
        Ok(report)
    }

    /// Without the bank: replaces any earlier carriers by `min(M, T)` evenly
    /// sampled buffered frames, prefilled at fresh positions.
    fn prefill_sampled(&mut self) -> Result<u64> {
        self.cache.remove_tag(SegmentTag::Carrier);
        let t = self.buffered.len();
        let k = t.min(self.config.memory_capacity);
        let mut flops = 0;
        for i in 0..k {
            let (frame, encoded) = self.buffered[i * t / k].clone();
            let embedding = build_carrier_embedding(&encoded, self.config.carrier_mode)?;
            flops += self.prefill_encoded(frame, &encoded, embedding)?.1;
        }
        Ok(flops)
    }

    fn mark_generating(&mut self, from: usize, position: usize) {
        if let Some(cap) = self.capture.as_mut() {
            for row in &mut cap.rows[from..] {
                if row.query_position == position {
                    row.generating = true;
                }
            }
        }
    }

    fn captured(&self) -> usize {
        self.capture.as_ref().map_or(0, |c| c.rows.len())
    }

    /// Prefills the question as text, then greedy-decodes up to `max_new`
    /// tokens or the end-of-sequence token. The final generated token is not
    /// fed back.
    pub fn ask(&mut self, question: &[u32], max_new: usize) -> Result<GenerationOutput<S>> {
        self.ensure_open()?;
        if question.is_empty() && max_new > 0 {
            return Err(Error::Config("cannot decode after an empty question".into()));
        }
        let t0 = Instant::now();
        let mut flops = 0;
        if !self.config.memory_enabled {
            flops += self.prefill_sampled()?;
        }
        let text = TagSet::of(&[SegmentTag::Text]);
        let mut from = self.captured();
        let mut logits = if question.is_empty() {
            Matrix::zeros(0, self.config.vocab)
        } else {
            let emb = self.weights.embed_tokens(question)?;
            let (l, f) = self.run(NewSegment::Text { len: question.len() }, &emb, text)?;
            flops += f;
            l
        };
        let prefill_us = t0.elapsed().as_secs_f64() * 1e6;

        let t1 = Instant::now();
        let mut out = GenerationOutput {
            tokens: Vec::new(),
            logits: Vec::new(),
            prefill_us,
            decode_us_per_token: 0.0,
            flops: 0,
        };
        while out.tokens.len() < max_new {
            let row = logits.row(logits.rows() - 1).to_vec();
            self.mark_generating(from, self.next_position - 1);
            let token = argmax(&row);
            out.tokens.push(token);
            out.logits.push(row);
            if Some(token) == self.config.eos_token || out.tokens.len() == max_new {
                break;
            }
            from = self.captured();
            let emb = self.weights.embed_tokens(&[token])?;
            let (l, f) = self.run(NewSegment::Text { len: 1 }, &emb, text)?;
            flops += f;
            logits = l;
        }
        if !out.tokens.is_empty() {
            out.decode_us_per_token = t1.elapsed().as_secs_f64() * 1e6 / out.tokens.len() as f64;
        }
        out.flops = flops;
        self.emit(json!({
            "event": "ask",
            "prompt_len": question.len(),
            "new_tokens": out.tokens.len(),
            "prefill_us": out.prefill_us.round() as u64,
            "decode_us_per_token": out.decode_us_per_token.round() as u64,
        }))?;
        Ok(out)
    }

    fn emit(&mut self, event: serde_json::Value) -> Result<()> {
        if let Some(sink) = self.trace.as_mut() {
            writeln!(sink, "{event}")?;
        }
        Ok(())
    }

    pub fn flush_trace(&mut self) -> Result<()> {
        if let Some(sink) = self.trace.as_mut() {
            sink.flush()?;
        }
        Ok(())
    }
}

/// Greedy choice; ties resolve to the lowest token id.
pub fn argmax<S: Scalar>(row: &[S]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput<S> {
    /// Logits at every text position, in order.
    pub logits: Matrix<S>,
    pub positions: Vec<usize>,
}

/// Stream positions a session assigns: the system first, then `N + 1` per
/// frame, then the text.
fn stream_layout(system: usize, frames: usize, tokens: usize, text: usize) -> Result<Layout> {
    let mut b = Layout::builder().system(system);
    for _ in 0..frames {
        b = b.frame(tokens);
    }
    b.text(text).build()
}

/// Materialises `[system][f₁ c₁ … f_T c_T][text]` and runs one batched
/// forward under the semantic mask. Without a schedule every carrier stays
/// visible, which matches a session only while `T ≤ M`.
pub fn oracle_full_forward<S: Scalar>(
    config: &ModelConfig,
    weights: &Weights<S>,
    system: &[u32],
    frames: &[FrameTokens<S>],
    text: &[u32],
    schedule: Option<&ReplaySchedule>,
) -> Result<OracleOutput<S>> {
    oracle_full_forward_probed(config, weights, system, frames, text, schedule, &mut Probe::default())
}

pub fn oracle_full_forward_probed<S: Scalar>(
    config: &ModelConfig,
    weights: &Weights<S>,
    system: &[u32],
    frames: &[FrameTokens<S>],
    text: &[u32],
    schedule: Option<&ReplaySchedule>,
    probe: &mut Probe<'_, S>,
) -> Result<OracleOutput<S>> {
    if !config.same_architecture(&weights.config) {
        return Err(Error::Oracle("config does not match the weights".into()));
    }
    if !config.memory_enabled {
        return Err(Error::Oracle("the oracle models the memory bank".into()));
    }
    if frames.len() > config.memory_capacity && schedule.is_none() {
        return Err(Error::Oracle(format!(
            "{} frames exceed capacity {} without a replay schedule",
            frames.len(),
            config.memory_capacity
        )));
    }
    if frames.windows(2).any(|w| w[0].index >= w[1].index) {
        return Err(Error::Oracle("frame indices must increase".into()));
    }
    let n = config.frame_tokens;
    let layout = stream_layout(system.len(), frames.len(), n, text.len())?;
    let total = layout.len();
    if total > config.max_positions {
        return Err(Error::Capacity {
            position: total - 1,
            max: config.max_positions,
        });
    }

    // Layout frame ordinals → stream frame indices.
    let visibility = schedule.map(|s| {
        let ordinal: BTreeMap<usize, usize> = frames.iter().enumerate().map(|(k, f)| (f.index, k)).collect();
        let map = |set: &BTreeSet<usize>| set.iter().filter_map(|f| ordinal.get(f).copied()).collect::<BTreeSet<_>>();
        CarrierVisibility {
            at_frame: s
                .visibility
                .at_frame
                .iter()
                .filter_map(|(f, set)| ordinal.get(f).map(|&k| (k, map(set))))
                .collect(),
            at_text: map(&s.visibility.at_text),
        }
    });
    let mut mask = build_semantic_mask_with(&layout, visibility.as_ref())?;
    if config.carrier_kv_mode == CarrierKvMode::EmbeddingOnly {
        mask = hide_frames_from_carriers(&layout, &mask)?;
    }

    let d = config.d_model;
    let mut rows: Vec<S> = Vec::with_capacity(total * d);
    rows.extend_from_slice(weights.embed_tokens(system)?.data());
    for f in frames {
        f.check(n, d)?;
        let encoded = weights.encode_frame(&f.embeddings)?;
        rows.extend_from_slice(encoded.data());
        rows.extend(build_carrier_embedding(&encoded, config.carrier_mode)?);
    }
    rows.extend_from_slice(weights.embed_tokens(text)?.data());
    let embeddings = Matrix::from_vec(total, d, rows)?;

    let slots = layout.slots();
    let entries: Vec<EntryMeta> = slots
        .iter()
        .enumerate()
        .map(|(p, s)| EntryMeta {
            tag: s.tag,
            position: p,
            frame: s.frame.map(|k| frames[k].index),
        })
        .collect();
    let mut cache = KvCache::new(config.layers, d);
    let out = forward_step_probed(
        weights,
        &mut cache,
        &StepInput {
            embeddings: &embeddings,
            entries: &entries,
            mask: &mask,
        },
        TagSet::EMPTY,
        probe,
    )?;
    let text_rows: Vec<usize> = (total - text.len()..total).collect();
    Ok(OracleOutput {
        logits: out.logits.select_rows(&text_rows),
        positions: text_rows,
    })
}

fn hide_frames_from_carriers(layout: &Layout, mask: &MaskSpec) -> Result<MaskSpec> {
    let slots = layout.slots();
    let n = slots.len();
    let mut allow = Vec::with_capacity(n * n);
    for (i, q) in slots.iter().enumerate() {
        for (j, k) in slots.iter().enumerate() {
            let hidden = q.tag == SegmentTag::Carrier && k.tag == SegmentTag::Frame;
            allow.push(mask.allowed(i, j) && !hidden);
        }
    }
    MaskSpec::with_positions(allow, mask.query_positions().to_vec(), mask.key_positions().to_vec())
}
