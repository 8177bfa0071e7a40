//! Semantic carriers and the fixed-capacity memory bank.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{CarrierMode, EvictionRule};
use crate::numerics::{cosine_similarity, Matrix};
use crate::scalar::Scalar;

/// Visual embeddings of one frame, `N × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTokens<S> {
    pub index: usize,
    pub embeddings: Matrix<S>,
    /// Nominal `(height, width)` of the generator that produced the frame.
    pub source: Option<(u32, u32)>,
}

impl<S: Scalar> FrameTokens<S> {
    pub fn new(index: usize, embeddings: Matrix<S>) -> Self {
        FrameTokens {
            index,
            embeddings,
            source: None,
        }
    }

    pub fn check(&self, tokens: usize, dim: usize) -> Result<()> {
        if self.embeddings.shape() != (tokens, dim) {
            return Err(Error::Shape(format!(
                "frame {} is {}x{}, expected {tokens}x{dim}",
                self.index,
                self.embeddings.rows(),
                self.embeddings.cols()
            )));
        }
        if !self.embeddings.is_finite() {
            return Err(Error::Shape(format!("frame {} holds non-finite values", self.index)));
        }
        Ok(())
    }
}

/// Row-wise mean of the frame tokens, or the last token.
pub fn build_carrier_embedding<S: Scalar>(frame: &Matrix<S>, mode: CarrierMode) -> Result<Vec<S>> {
    let n = frame.rows();
    if n == 0 {
        return Err(Error::Shape("empty frame".into()));
    }
    Ok(match mode {
        CarrierMode::LastToken => frame.row(n - 1).to_vec(),
        CarrierMode::Mean => {
            let mut acc = vec![S::zero(); frame.cols()];
            for row in frame.row_iter() {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            let inv = S::from_usize_lossy(n);
            acc.iter_mut().for_each(|a| *a /= inv);
            acc
        }
    })
}

/// One semantic carrier held in the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct CarrierRecord<S> {
    pub frame: usize,
    pub embedding: Vec<S>,
    /// `(key, value)` per layer.
    pub kv: Vec<(Vec<S>, Vec<S>)>,
    pub position: usize,
    /// Logical creation time: the frame index.
    pub created: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvictionEvent {
    pub frame_evicted: usize,
    pub score: f64,
    pub rule: &'static str,
    /// Bank size once the incoming carrier is stored.
    pub bank_size: usize,
}

/// A chosen victim: its index in the bank and the winning pair score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Victim {
    pub index: usize,
    pub frame: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BankEntry<S> {
    pub frame: usize,
    pub position: usize,
    pub embedding: Vec<S>,
}

/// Ordered carriers, oldest first, at most `capacity` of them.
#[derive(Debug, Clone)]
pub struct MemoryBank<S> {
    capacity: usize,
    rule: EvictionRule,
    carriers: Vec<CarrierRecord<S>>,
    log: Vec<EvictionEvent>,
}

impl<S: Scalar> MemoryBank<S> {
    pub fn new(capacity: usize, rule: EvictionRule) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory capacity must be at least 1".into()));
        }
        Ok(MemoryBank {
            capacity,
            rule,
            carriers: Vec::with_capacity(capacity),
            log: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.carriers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.carriers.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rule(&self) -> EvictionRule {
        self.rule
    }

    pub fn records(&self) -> &[CarrierRecord<S>] {
        &self.carriers
    }

    pub fn log(&self) -> &[EvictionEvent] {
        &self.log
    }

    pub fn frames(&self) -> Vec<usize> {
        self.carriers.iter().map(|c| c.frame).collect()
    }

    fn check_order(&self, incoming: usize) -> Result<()> {
        match self.carriers.last() {
            Some(last) if incoming <= last.frame => Err(Error::Ordering {
                incoming,
                newest: last.frame,
            }),
            _ => Ok(()),
        }
    }

    /// Victim for an incoming carrier, or `None` while the bank has room.
    ///
    /// Every candidate pair is indexed by its older member, so a strict
    /// maximum over ascending indices settles ties toward the oldest.
    pub fn select_victim(&self, incoming_frame: usize, incoming: &[S]) -> Result<Option<Victim>> {
        self.check_order(incoming_frame)?;
        if self.carriers.len() < self.capacity {
            return Ok(None);
        }
        let n = self.carriers.len();
        let mut best: Option<(usize, S)> = None;
        for i in 0..n {
            let partner = match self.rule {
                EvictionRule::AdjacentPairs if i + 1 < n => &self.carriers[i + 1].embedding[..],
                _ => incoming,
            };
            let s = cosine_similarity(&self.carriers[i].embedding, partner)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        Ok(best.map(|(index, s)| Victim {
            index,
            frame: self.carriers[index].frame,
            score: s.as_f64(),
        }))
    }

    /// Removes the carrier at `index` and logs the eviction.
    pub fn evict(&mut self, victim: Victim) -> CarrierRecord<S> {
        let record = self.carriers.remove(victim.index);
        self.log.push(EvictionEvent {
            frame_evicted: record.frame,
            score: victim.score,
            rule: self.rule.as_str(),
            bank_size: self.carriers.len() + 1,
        });
        record
    }

    /// Appends a carrier into a bank that has room.
    pub fn push(&mut self, record: CarrierRecord<S>) -> Result<()> {
        self.check_order(record.frame)?;
        if self.carriers.len() >= self.capacity {
            return Err(Error::State(format!("bank full at {} carriers", self.capacity)));
        }
        self.carriers.push(record);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.carriers.clear();
    }

    pub fn snapshot(&self) -> Vec<BankEntry<S>> {
        self.carriers
            .iter()
            .map(|c| BankEntry {
                frame: c.frame,
                position: c.position,
                embedding: c.embedding.clone(),
            })
            .collect()
    }
}

/// Inserts `incoming`, evicting one carrier first when the bank is full.
pub fn memory_insert<S: Scalar>(bank: &mut MemoryBank<S>, incoming: CarrierRecord<S>) -> Result<Option<EvictionEvent>> {
    let event = match bank.select_victim(incoming.frame, &incoming.embedding)? {
        Some(v) => {
            bank.evict(v);
            bank.log.last().copied()
        }
        None => None,
    };
    bank.push(incoming)?;
    Ok(event)
}

pub fn bank_snapshot<S: Scalar>(bank: &MemoryBank<S>) -> Vec<BankEntry<S>> {
    bank.snapshot()
}
