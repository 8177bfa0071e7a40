//! Synthetic recall task: each frame shows one symbol; the question asks
//! which symbol frame `k` showed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::FrameTokens;
use crate::model::ModelConfig;
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Frames per stream.
    pub frames: usize,
    /// Number of distinct symbols.
    pub alphabet: usize,
    /// Token id of symbol 0; symbols occupy `symbol_base..symbol_base + alphabet`.
    pub symbol_base: u32,
    /// Token id naming frame 0; indices occupy `index_base..index_base + frames`.
    pub index_base: u32,
    /// Tokens preceding the frame index in every question.
    pub question_prefix: Vec<u32>,
    /// System prompt prefilled by every session.
    #[serde(default)]
    pub system: Vec<u32>,
    /// Standard deviation of the per-token jitter.
    pub noise: f64,
    /// Seed of the symbol feature table.
    pub feature_seed: u64,
    pub train_seed: u64,
    /// Seed of the held-out evaluation streams.
    pub eval_seed: u64,
}

/// How many questions a stream carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recall {
    /// One question about a random frame.
    #[default]
    Needle,
    /// One question per frame, each its own turn.
    Dense,
}

impl TaskSpec {
    pub fn question_len(&self) -> usize {
        self.question_prefix.len() + 1
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.frames == 0 || self.alphabet == 0 {
            return fail("frames and alphabet must be positive".into());
        }
        if self.symbol_base as usize + self.alphabet > model.vocab {
            return fail(format!(
                "alphabet overflow: symbols {}..{} exceed vocab {}",
                self.symbol_base,
                self.symbol_base as usize + self.alphabet,
                model.vocab
            ));
        }
        if self.index_base as usize + self.frames > model.vocab {
            return fail(format!("frame index tokens exceed vocab {}", model.vocab));
        }
        if let Some(bad) = self.question_prefix.iter().chain(&self.system).find(|&&t| t as usize >= model.vocab) {
            return fail(format!("token {bad} outside vocab {}", model.vocab));
        }
        if self.frames > model.memory_capacity {
            return fail(format!(
                "{} frames per stream exceed memory capacity {}",
                self.frames, model.memory_capacity
            ));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return fail(format!("noise {} must be finite and non-negative", self.noise));
        }
        let needed = self.system.len() + self.frames * (model.frame_tokens + 1) + self.frames * self.question_len();
        if needed > model.max_positions {
            return fail(format!("a dense stream needs {needed} positions, max is {}", model.max_positions));
        }
        Ok(())
    }

    pub fn question(&self, frame: usize) -> Vec<u32> {
        let mut q = self.question_prefix.clone();
        q.push(self.index_base + frame as u32);
        q
    }

    pub fn answer(&self, symbol: usize) -> u32 {
        self.symbol_base + symbol as u32
    }

    /// Fixed Gaussian feature vector of every symbol, `alphabet × d`.
    pub fn features(&self, dim: usize) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.feature_seed);
        let data = (0..self.alphabet * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Matrix::from_vec(self.alphabet, dim, data).expect("sized")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStream<S> {
    pub frames: Vec<FrameTokens<S>>,
    /// Symbol shown by each frame.
    pub symbols: Vec<usize>,
    /// Frame the needle question asks about.
    pub queried: usize,
    pub question: Vec<u32>,
    pub answer: u32,
}

impl<S> SyntheticStream<S> {
    /// `(question, answer)` for every frame, in frame order.
    pub fn dense_questions(&self, spec: &TaskSpec) -> Vec<(Vec<u32>, u32)> {
        self.symbols
            .iter()
            .enumerate()
            .map(|(k, &s)| (spec.question(k), spec.answer(s)))
            .collect()
    }
}

/// Frame `k` shows symbol `s_k`; each of its `N` tokens is the symbol's
/// feature vector plus Gaussian jitter.
pub fn gen_synthetic_stream<S: Scalar>(spec: &TaskSpec, model: &ModelConfig, seed: u64) -> Result<SyntheticStream<S>> {
    spec.validate(model)?;
    let (n, d) = (model.frame_tokens, model.d_model);
    let features = spec.features(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symbols: Vec<usize> = (0..spec.frames).map(|_| rng.random_range(0..spec.alphabet)).collect();
    let queried = rng.random_range(0..spec.frames);
    let frames = symbols
        .iter()
        .enumerate()
        .map(|(t, &s)| {
            let f = features.row(s);
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                for &v in f {
                    let jitter: f64 = StandardNormal.sample(&mut rng);
                    data.push(S::lit(v + spec.noise * jitter));
                }
            }
            FrameTokens::new(t, Matrix::from_vec(n, d, data).expect("sized"))
        })
        .collect();
    Ok(SyntheticStream {
        frames,
        question: spec.question(queried),
        answer: spec.answer(symbols[queried]),
        symbols,
        queried,
    })
}

#[cfg(test)]
pub(crate) fn tiny_task() -> TaskSpec {
    TaskSpec {
        frames: 3,
        alphabet: 4,
        symbol_base: 0,
        index_base: 4,
        question_prefix: vec![7],
        system: vec![8],
        noise: 0.1,
        feature_seed: 1,
        train_seed: 2,
        eval_seed: 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_config;

    #[test]
    fn noiseless_single_token_frames_are_features() {
        let mut cfg = tiny_config();
        cfg.frame_tokens = 1;
        let mut spec = tiny_task();
        spec.noise = 0.0;
        let s: SyntheticStream<f64> = gen_synthetic_stream(&spec, &cfg, 5).unwrap();
        let feats = spec.features(cfg.d_model);
        for (f, &sym) in s.frames.iter().zip(&s.symbols) {
            assert_eq!(f.embeddings.row(0), feats.row(sym));
        }
        assert_eq!(s.answer, spec.answer(s.symbols[s.queried]));
        assert_eq!(s.question, vec![7, 4 + s.queried as u32]);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = tiny_config();
        let spec = tiny_task();
        let a: SyntheticStream<f32> = gen_synthetic_stream(&spec, &cfg, 9).unwrap();
        let b: SyntheticStream<f32> = gen_synthetic_stream(&spec, &cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn symbol_frequencies_are_uniform() {
        let cfg = tiny_config();
        let spec = tiny_task();
        let mut counts = [0usize; 4];
        let streams = 10_000;
        for seed in 0..streams {
            let s: SyntheticStream<f32> = gen_synthetic_stream(&spec, &cfg, seed).unwrap();
            for &sym in &s.symbols {
                counts[sym] += 1;
            }
        }
        let total = (streams * spec.frames as u64) as f64;
        let p = 0.25;
        let sigma = (total * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - total * p).abs() <= 5.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn overflow_rejected() {
        let cfg = tiny_config();
        let mut spec = tiny_task();
        spec.alphabet = 20;
        assert!(matches!(gen_synthetic_stream::<f32>(&spec, &cfg, 0), Err(Error::Spec(_))));
        let mut spec = tiny_task();
        spec.frames = 5;
        assert!(matches!(spec.validate(&cfg), Err(Error::Spec(_))));
    }
}
