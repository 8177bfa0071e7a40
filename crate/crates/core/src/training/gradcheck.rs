//! Finite-difference check of the tape gradients.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{sequence_grad, sequence_loss, TrainSequence};
use crate::error::{Error, Result};
use crate::model::{ParamGroup, Weights};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub layer: Option<usize>,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub floor: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel(&self) -> f64 {
        self.entries.iter().map(|e| e.rel).fold(0.0, f64::max)
    }

    pub fn groups(&self) -> usize {
        let mut names: Vec<&str> = self.entries.iter().map(|e| e.param.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names.len()
    }
}

/// `rel = |a − n| / max(|a|, |n|, floor)` with central differences of
/// step `h`, over `per_param` coordinates of every parameter. Embedding and
/// position rows are drawn from those the sequence uses.
pub fn grad_check(
    weights: &Weights<f64>,
    seq: &TrainSequence<f64>,
    per_param: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(h > 0.0 && floor > 0.0) || per_param == 0 {
        return Err(Error::Config("grad check needs h > 0, floor > 0 and coordinates".into()));
    }
    let analytic = sequence_grad(weights, seq, |_| true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used_tokens: Vec<usize> = seq.tokens.iter().map(|&t| t as usize).collect();
    used_tokens.sort_unstable();
    used_tokens.dedup();
    let keys: Vec<_> = weights.params().into_iter().map(|(k, m)| (k, m.rows(), m.cols())).collect();
    let mut entries = Vec::new();
    for (i, (key, rows, cols)) in keys.into_iter().enumerate() {
        let allowed_rows: Vec<usize> = match key.group {
            ParamGroup::TokenEmbedding => used_tokens.clone(),
            ParamGroup::Positions => seq.positions.clone(),
            _ => (0..rows).collect(),
        };
        let grad = analytic.grads[i].as_ref().ok_or_else(|| Error::State(format!("no gradient for {:?}", key.group)))?;
        for _ in 0..per_param {
            let r = *allowed_rows.choose(&mut rng).expect("rows");
            let c = rng.random_range(0..cols);
            let mut plus = weights.clone();
            let mut minus = weights.clone();
            nudge(&mut plus, i, r, c, h);
            nudge(&mut minus, i, r, c, -h);
            let numeric = (sequence_loss(&plus, seq)? - sequence_loss(&minus, seq)?) / (2.0 * h);
            let a = grad.get(r, c);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            entries.push(GradCheckEntry {
                param: format!("{:?}", key.group),
                layer: key.layer,
                row: r,
                col: c,
                analytic: a,
                numeric,
                rel,
            });
        }
    }
    Ok(GradCheckReport { step: h, floor, entries })
}

fn nudge(w: &mut Weights<f64>, index: usize, r: usize, c: usize, by: f64) {
    let mut params = w.params_mut();
    let m = &mut params[index].1;
    let v = m.get(r, c);
    m.set(r, c, v + by);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, tiny_config};
    use crate::training::{build_sequence, gen_synthetic_stream, tiny_task, SyntheticStream};

    #[test]
    fn tape_gradients_match_differences() {
        let cfg = tiny_config();
        let mut w: Weights<f64> = init_model(&cfg, 11).unwrap();
        for lw in &mut w.layers {
            for p in [&mut lw.query, &mut lw.key, &mut lw.value, &mut lw.output] {
                if let Some(ad) = &mut p.adapter {
                    ad.b = ad.a.transpose().scale(0.5);
                }
            }
        }
        let task = tiny_task();
        let s: SyntheticStream<f64> = gen_synthetic_stream(&task, &cfg, 2).unwrap();
        let raw: Vec<_> = s.frames.iter().map(|f| f.embeddings.clone()).collect();
        let seq = build_sequence(&cfg, &task, &raw, &s.dense_questions(&task), 2).unwrap();
        let report = grad_check(&w, &seq, 5, 1e-5, 1e-6, 1).unwrap();
        assert!(report.entries.len() >= 200);
        assert!(report.max_rel() < 1e-5, "{}", report.max_rel());
    }
}
