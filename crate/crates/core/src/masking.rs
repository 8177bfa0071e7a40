//! Attention masks.
//!
//! Two builders share one rule set. [`build_semantic_mask`] covers a whole
//! materialised sequence `[system][frame₁ carrier₁]…[frame_T carrier_T][text…]`
//! and is used by the full-sequence oracle and by training.
//! [`build_streaming_mask`] covers one incremental step against the entries
//! currently held in a KV cache.
//!
//! Rules, for a query in the sequence:
//!
//! * system tokens see the causal system prefix;
//! * tokens of frame `t` see the system, visible carriers of earlier frames
//!   and the causal prefix of their own frame, never tokens of other frames;
//! * carrier `t` sees the system, visible earlier carriers, all of frame `t`
//!   and itself;
//! * text sees the system, every visible carrier and the causal prefix of its
//!   own turn. Raw frame tokens are never visible to text.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentTag {
    System,
    Frame,
    Carrier,
    Text,
}

impl SegmentTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SegmentTag::System => "system",
            SegmentTag::Frame => "frame",
            SegmentTag::Carrier => "carrier",
            SegmentTag::Text => "text",
        }
    }

    fn bit(self) -> u8 {
        match self {
            SegmentTag::System => 1,
            SegmentTag::Frame => 2,
            SegmentTag::Carrier => 4,
            SegmentTag::Text => 8,
        }
    }
}

/// Set of segment tags; selects which new KV entries a forward step keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TagSet(u8);

impl TagSet {
    pub const EMPTY: TagSet = TagSet(0);
    pub const ALL: TagSet = TagSet(15);

    pub fn of(tags: &[SegmentTag]) -> Self {
        TagSet(tags.iter().fold(0, |acc, t| acc | t.bit()))
    }

    pub fn contains(self, tag: SegmentTag) -> bool {
        self.0 & tag.bit() != 0
    }
}

/// Metadata of one token, either cached or about to be processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub tag: SegmentTag,
    pub position: usize,
    /// Frame the entry belongs to (frame tokens and carriers).
    pub frame: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanKind {
    System,
    /// Raw visual tokens of frame `t`; may be empty (carrier-only layouts).
    Frame(usize),
    /// The single carrier closing frame `t`.
    Carrier(usize),
    /// One text turn. Turns do not see each other.
    Text(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub len: usize,
}

/// One token slot of a materialised layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub tag: SegmentTag,
    pub frame: Option<usize>,
    pub turn: Option<usize>,
}

/// Validated, contiguous segment layout of a full sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    spans: Vec<Span>,
    len: usize,
}

impl Layout {
    /// Validates explicit spans: contiguous from 0, no overlap, system first,
    /// every frame span immediately followed by its carrier, frame indices
    /// strictly increasing, text after all frames.
    pub fn from_spans(spans: Vec<Span>) -> Result<Self> {
        let mut cursor = 0usize;
        let mut last_frame: Option<usize> = None;
        let mut open_frame: Option<usize> = None;
        let mut seen_text = false;
        let mut last_turn: Option<usize> = None;
        for (i, s) in spans.iter().enumerate() {
            if s.start != cursor {
                return Err(Error::Layout(format!(
                    "span {i} starts at {} but previous span ends at {cursor}",
                    s.start
                )));
            }
            match s.kind {
                SpanKind::System => {
                    if i != 0 {
                        return Err(Error::Layout("system span must come first".into()));
                    }
                }
                SpanKind::Frame(t) => {
                    if seen_text || open_frame.is_some() {
                        return Err(Error::Layout(format!("frame {t} span out of order")));
                    }
                    if last_frame.is_some_and(|l| t <= l) {
                        return Err(Error::Layout(format!("frame {t} not after frame {last_frame:?}")));
                    }
                    open_frame = Some(t);
                }
                SpanKind::Carrier(t) => {
                    if s.len != 1 {
                        return Err(Error::Layout(format!("carrier {t} must have length 1")));
                    }
                    if seen_text {
                        return Err(Error::Layout(format!("carrier {t} after text")));
                    }
                    match open_frame.take() {
                        Some(f) if f != t => {
                            return Err(Error::Layout(format!("carrier {t} closes frame {f}")));
                        }
                        _ => {}
                    }
                    if last_frame.is_some_and(|l| t <= l) {
                        return Err(Error::Layout(format!("carrier {t} not after frame {last_frame:?}")));
                    }
                    last_frame = Some(t);
                }
                SpanKind::Text(turn) => {
                    if open_frame.is_some() {
                        return Err(Error::Layout("text inside an open frame".into()));
                    }
                    if last_turn.is_some_and(|l| turn <= l) {
                        return Err(Error::Layout(format!("text turn {turn} out of order")));
                    }
                    last_turn = Some(turn);
                    seen_text = true;
                }
            }
            cursor += s.len;
        }
        if let Some(f) = open_frame {
            return Err(Error::Layout(format!("frame {f} has no carrier")));
        }
        Ok(Self { spans, len: cursor })
    }

    pub fn builder() -> LayoutBuilder {
        LayoutBuilder::default()
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::with_capacity(self.len);
        for s in &self.spans {
            let slot = match s.kind {
                SpanKind::System => Slot { tag: SegmentTag::System, frame: None, turn: None },
                SpanKind::Frame(t) => Slot { tag: SegmentTag::Frame, frame: Some(t), turn: None },
                SpanKind::Carrier(t) => Slot { tag: SegmentTag::Carrier, frame: Some(t), turn: None },
                SpanKind::Text(k) => Slot { tag: SegmentTag::Text, frame: None, turn: Some(k) },
            };
            out.extend(std::iter::repeat_n(slot, s.len));
        }
        out
    }

    /// Index of the slot holding carrier `t`.
    pub fn carrier_slot(&self, t: usize) -> Option<usize> {
        self.spans
            .iter()
            .find(|s| s.kind == SpanKind::Carrier(t))
            .map(|s| s.start)
    }

    /// Frame indices in layout order.
    pub fn frames(&self) -> Vec<usize> {
        self.spans
            .iter()
            .filter_map(|s| match s.kind {
                SpanKind::Carrier(t) => Some(t),
                _ => None,
            })
            .collect()
    }
}

/// Convenience builder producing contiguous spans; frames and turns are
/// numbered in call order.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    spans: Vec<Span>,
    cursor: usize,
    frames: usize,
    turns: usize,
}

impl LayoutBuilder {
    fn push(&mut self, kind: SpanKind, len: usize) {
        self.spans.push(Span { kind, start: self.cursor, len });
        self.cursor += len;
    }

    pub fn system(mut self, len: usize) -> Self {
        if len > 0 {
            self.push(SpanKind::System, len);
        }
        self
    }

    /// A frame of `tokens` raw tokens followed by its carrier. `tokens = 0`
    /// yields a carrier-only frame.
    pub fn frame(mut self, tokens: usize) -> Self {
        let t = self.frames;
        self.frames += 1;
        if tokens > 0 {
            self.push(SpanKind::Frame(t), tokens);
        }
        self.push(SpanKind::Carrier(t), 1);
        self
    }

    pub fn text(mut self, len: usize) -> Self {
        let k = self.turns;
        self.turns += 1;
        if len > 0 {
            self.push(SpanKind::Text(k), len);
        }
        self
    }

    pub fn build(self) -> Result<Layout> {
        Layout::from_spans(self.spans)
    }
}

/// Which earlier carriers each frame, and the text, may see. Without
/// eviction every earlier carrier is visible; a replayed eviction schedule
/// restricts the sets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CarrierVisibility {
    /// `(frame, carriers visible while that frame was prefilled)`.
    pub at_frame: Vec<(usize, BTreeSet<usize>)>,
    /// Carriers visible to text.
    pub at_text: BTreeSet<usize>,
}

impl CarrierVisibility {
    fn for_frame(&self, t: usize) -> Option<&BTreeSet<usize>> {
        self.at_frame.iter().find(|(f, _)| *f == t).map(|(_, s)| s)
    }
}

/// Boolean allow grid over (query, key) pairs with the positions of both.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    queries: usize,
    keys: usize,
    allow: Vec<bool>,
    query_positions: Vec<usize>,
    key_positions: Vec<usize>,
}

impl MaskSpec {
    /// Raw constructor; positions default to indices (queries aligned with
    /// the last `queries` keys).
    pub fn from_allow(queries: usize, keys: usize, allow: Vec<bool>) -> Result<Self> {
        if queries > keys {
            return Err(Error::Shape(format!("{queries} queries but only {keys} keys")));
        }
        let offset = keys - queries;
        Self::with_positions(
            allow,
            (offset..keys).collect(),
            (0..keys).collect(),
        )
    }

    /// Checks shape, causality and that no row is empty.
    pub fn with_positions(allow: Vec<bool>, query_positions: Vec<usize>, key_positions: Vec<usize>) -> Result<Self> {
        let (q, k) = (query_positions.len(), key_positions.len());
        if allow.len() != q * k {
            return Err(Error::Shape(format!("{} mask cells for {q}x{k}", allow.len())));
        }
        for i in 0..q {
            let row = &allow[i * k..(i + 1) * k];
            if !row.iter().any(|&a| a) {
                return Err(Error::DegenerateRow { row: i });
            }
            for (j, &a) in row.iter().enumerate() {
                if a && key_positions[j] > query_positions[i] {
                    return Err(Error::Layout(format!(
                        "query at position {} may not see key at {}",
                        query_positions[i], key_positions[j]
                    )));
                }
            }
        }
        Ok(Self {
            queries: q,
            keys: k,
            allow,
            query_positions,
            key_positions,
        })
    }

    /// Lower-triangular mask over `n` tokens.
    pub fn causal(n: usize) -> Self {
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allow[i * n + j] = true;
            }
        }
        Self {
            queries: n,
            keys: n,
            allow,
            query_positions: (0..n).collect(),
            key_positions: (0..n).collect(),
        }
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.keys + k]
    }

    #[inline]
    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.keys..(q + 1) * self.keys]
    }

    pub fn query_positions(&self) -> &[usize] {
        &self.query_positions
    }

    pub fn key_positions(&self) -> &[usize] {
        &self.key_positions
    }

    pub fn allowed_count(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    /// Positions of the keys visible to query `q`.
    pub fn allowed_positions(&self, q: usize) -> Vec<usize> {
        self.row(q)
            .iter()
            .zip(&self.key_positions)
            .filter_map(|(&a, &p)| a.then_some(p))
            .collect()
    }

    /// Hides key `k` from every query except itself.
    pub fn block_key(&mut self, k: usize) {
        let pos = self.key_positions[k];
        for q in 0..self.queries {
            if self.query_positions[q] != pos {
                self.allow[q * self.keys + k] = false;
            }
        }
    }

    /// Plain-text PBM grid: one row per query, `1` = allowed.
    pub fn to_pbm(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "P1");
        let _ = writeln!(s, "# rows=queries cols=keys 1=allowed");
        let _ = writeln!(s, "{} {}", self.keys, self.queries);
        for q in 0..self.queries {
            let line: Vec<&str> = self.row(q).iter().map(|&a| if a { "1" } else { "0" }).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }
}

/// Full-sequence semantic-aware causal mask; every earlier carrier visible.
pub fn build_semantic_mask(layout: &Layout) -> Result<MaskSpec> {
    build_semantic_mask_with(layout, None)
}

/// Semantic mask with carrier visibility restricted by `visibility`
/// (replayed eviction schedule).
pub fn build_semantic_mask_with(layout: &Layout, visibility: Option<&CarrierVisibility>) -> Result<MaskSpec> {
    let slots = layout.slots();
    let n = slots.len();
    let carrier_visible_to_frame = |t: usize, u: usize| -> bool {
        u < t
            && visibility
                .and_then(|v| v.for_frame(t))
                .is_none_or(|set| set.contains(&u))
    };
    let carrier_visible_to_text = |u: usize| visibility.is_none_or(|v| v.at_text.contains(&u));

    let mut allow = vec![false; n * n];
    for (i, q) in slots.iter().enumerate() {
        for (j, k) in slots.iter().enumerate().take(i + 1) {
            let ok = match (q.tag, k.tag) {
                (_, SegmentTag::System) => true,
                (SegmentTag::System, _) => false,
                (SegmentTag::Frame | SegmentTag::Carrier, SegmentTag::Frame) => q.frame == k.frame,
                (SegmentTag::Frame | SegmentTag::Carrier, SegmentTag::Carrier) => {
                    let (t, u) = (q.frame.unwrap_or(0), k.frame.unwrap_or(0));
                    (t == u && q.tag == SegmentTag::Carrier) || carrier_visible_to_frame(t, u)
                }
                (SegmentTag::Text, SegmentTag::Carrier) => carrier_visible_to_text(k.frame.unwrap_or(0)),
                (SegmentTag::Text, SegmentTag::Text) => q.turn == k.turn,
                (SegmentTag::Text, SegmentTag::Frame) => false,
                (SegmentTag::Frame | SegmentTag::Carrier, SegmentTag::Text) => false,
            };
            allow[i * n + j] = ok;
        }
    }
    MaskSpec::with_positions(allow, (0..n).collect(), (0..n).collect())
}

/// The segment a streaming step processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NewSegment {
    System { len: usize },
    /// `tokens` raw frame tokens followed by the frame's carrier.
    FrameWithCarrier { frame: usize, tokens: usize },
    /// The carrier alone (carrier KV computed without frame context).
    CarrierOnly { frame: usize },
    Text { len: usize },
}

impl NewSegment {
    pub fn len(&self) -> usize {
        match *self {
            NewSegment::System { len } => len,
            NewSegment::FrameWithCarrier { tokens, .. } => tokens + 1,
            NewSegment::CarrierOnly { .. } => 1,
            NewSegment::Text { len } => len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Metadata for the new tokens, starting at `start`.
    pub fn entries(&self, start: usize) -> Vec<EntryMeta> {
        match *self {
            NewSegment::System { len } => (0..len)
                .map(|i| EntryMeta { tag: SegmentTag::System, position: start + i, frame: None })
                .collect(),
            NewSegment::FrameWithCarrier { frame, tokens } => (0..=tokens)
                .map(|i| EntryMeta {
                    tag: if i < tokens { SegmentTag::Frame } else { SegmentTag::Carrier },
                    position: start + i,
                    frame: Some(frame),
                })
                .collect(),
            NewSegment::CarrierOnly { frame } => vec![EntryMeta {
                tag: SegmentTag::Carrier,
                position: start,
                frame: Some(frame),
            }],
            NewSegment::Text { len } => (0..len)
                .map(|i| EntryMeta { tag: SegmentTag::Text, position: start + i, frame: None })
                .collect(),
        }
    }
}

/// Mask for one incremental step: `new` tokens at consecutive positions
/// from `start`, attending to `cache` plus themselves. Keys are ordered
/// cache entries first, then the new tokens.
pub fn build_streaming_mask(cache: &[EntryMeta], new: NewSegment, start: usize) -> Result<MaskSpec> {
    if let Some(bad) = cache.iter().find(|e| e.tag == SegmentTag::Frame) {
        return Err(Error::Layout(format!(
            "cache holds a frame entry at position {}",
            bad.position
        )));
    }
    if let Some(last) = cache.last() {
        if start <= last.position {
            return Err(Error::Layout(format!(
                "new segment at {start} does not follow cached position {}",
                last.position
            )));
        }
    }
    let entries = new.entries(start);
    let c = cache.len();
    let keys = c + entries.len();
    let mut allow = vec![false; entries.len() * keys];
    for (i, q) in entries.iter().enumerate() {
        let row = &mut allow[i * keys..(i + 1) * keys];
        row[..c].iter_mut().for_each(|a| *a = true);
        for (j, k) in entries.iter().enumerate().take(i + 1) {
            row[c + j] = matches!(
                (q.tag, k.tag),
                (SegmentTag::Text, SegmentTag::Text)
                    | (SegmentTag::System, SegmentTag::System)
                    | (SegmentTag::Frame, SegmentTag::Frame)
                    | (SegmentTag::Carrier, SegmentTag::Frame | SegmentTag::Carrier)
            );
        }
    }
    let key_positions = cache
        .iter()
        .map(|e| e.position)
        .chain(entries.iter().map(|e| e.position))
        .collect();
    MaskSpec::with_positions(allow, entries.iter().map(|e| e.position).collect(), key_positions)
}
