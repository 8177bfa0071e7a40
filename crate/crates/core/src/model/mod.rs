//! Decoder-only transformer backbone.
//!
//! Pre-norm residual blocks, multi-head attention with an explicit
//! incremental KV cache, GELU feed-forward and learned absolute positions.
//! Positions are baked into cached keys and values when an entry is
//! created; entries removed later leave gaps and survivors are never
//! re-positioned.

mod cache;
mod checkpoint;
pub(crate) mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub use cache::{KvCache, RemovedEntry};
pub use checkpoint::{load_weights, read_weights, save_weights, write_weights, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{attention_forward, embed_positions, forward_step, forward_step_probed, Probe, StepInput, StepOutput};

/// Layer-norm epsilon used throughout the backbone.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CarrierMode {
    /// Mean of the frame's token embeddings.
    #[default]
    Mean,
    /// The frame's last token embedding.
    LastToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CarrierKvMode {
    /// Carrier KV computed with the frame tokens in context.
    #[default]
    Inherited,
    /// Carrier KV computed from the carrier embedding alone.
    EmbeddingOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvictionRule {
    /// Score neighbouring bank entries, plus the newest entry vs the incoming one.
    #[default]
    AdjacentPairs,
    /// Score every bank entry against the incoming one.
    VsIncoming,
}

impl EvictionRule {
    pub fn as_str(self) -> &'static str {
        match self {
            EvictionRule::AdjacentPairs => "adjacent_pairs",
            EvictionRule::VsIncoming => "vs_incoming",
        }
    }
}

/// Model dimensions plus the streaming options of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_positions: usize,
    /// Visual tokens per frame.
    pub frame_tokens: usize,
    /// Memory bank capacity.
    pub memory_capacity: usize,
    #[serde(default)]
    pub carrier_mode: CarrierMode,
    #[serde(default)]
    pub carrier_kv_mode: CarrierKvMode,
    #[serde(default)]
    pub eviction_rule: EvictionRule,
    #[serde(default = "yes")]
    pub memory_enabled: bool,
    /// Rank of the attention adapters; 0 disables them.
    #[serde(default)]
    pub lora_rank: usize,
    #[serde(default)]
    pub eos_token: Option<u32>,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.vocab == 0 {
            return fail("layers, heads, d_model, d_ff and vocab must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.frame_tokens == 0 {
            return fail("frame_tokens must be at least 1".into());
        }
        if self.memory_capacity == 0 {
            return fail("memory_capacity must be at least 1".into());
        }
        if self.max_positions == 0 {
            return fail("max_positions must be positive".into());
        }
        if self.lora_rank > self.d_model {
            return fail(format!("lora_rank {} exceeds d_model {}", self.lora_rank, self.d_model));
        }
        if let Some(eos) = self.eos_token {
            if eos as usize >= self.vocab {
                return fail(format!("eos_token {eos} outside vocab {}", self.vocab));
            }
        }
        Ok(())
    }

    /// True when both configs describe weights of identical shape.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.layers == other.layers
            && self.heads == other.heads
            && self.d_model == other.d_model
            && self.d_ff == other.d_ff
            && self.vocab == other.vocab
            && self.max_positions == other.max_positions
            && self.lora_rank == other.lora_rank
    }
}

/// Attention projection slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Proj {
    Query,
    Key,
    Value,
    Output,
}

/// Parameter groups, used for freezing and gradient-check coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    TokenEmbedding,
    Positions,
    Projector,
    ProjectorBias,
    AttnNormGain,
    AttnNormBias,
    Attention(Proj),
    AdapterA(Proj),
    AdapterB(Proj),
    FfnNormGain,
    FfnNormBias,
    FfIn,
    FfOut,
    FinalNormGain,
    FinalNormBias,
    Unembedding,
}

impl ParamGroup {
    /// The frame-embedding stub standing in for a vision encoder.
    pub fn is_stub(self) -> bool {
        matches!(self, ParamGroup::Projector | ParamGroup::ProjectorBias)
    }

    pub fn is_adapter(self) -> bool {
        matches!(self, ParamGroup::AdapterA(_) | ParamGroup::AdapterB(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub group: ParamGroup,
    pub layer: Option<usize>,
}

/// Low-rank adapter: the effective weight is `W + A·B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<S> {
    pub a: Matrix<S>,
    pub b: Matrix<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection<S> {
    pub weight: Matrix<S>,
    pub adapter: Option<Adapter<S>>,
}

impl<S: Scalar> Projection<S> {
    /// `x·W (+ (x·A)·B)`.
    pub fn apply(&self, x: &Matrix<S>) -> Result<Matrix<S>> {
        let mut out = x.matmul(&self.weight)?;
        if let Some(ad) = &self.adapter {
            out.add_assign(&x.matmul(&ad.a)?.matmul(&ad.b)?)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<S> {
    pub gain: Matrix<S>,
    pub bias: Matrix<S>,
}

impl<S: Scalar> Norm<S> {
    pub fn apply_rows(&self, x: &Matrix<S>) -> Matrix<S> {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let eps = S::lit(NORM_EPS);
        for r in 0..x.rows() {
            crate::numerics::layer_norm_into(x.row(r), self.gain.data(), self.bias.data(), eps, out.row_mut(r));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<S> {
    pub attn_norm: Norm<S>,
    pub query: Projection<S>,
    pub key: Projection<S>,
    pub value: Projection<S>,
    pub output: Projection<S>,
    pub ffn_norm: Norm<S>,
    pub ff_in: Matrix<S>,
    pub ff_out: Matrix<S>,
}

impl<S> LayerWeights<S> {
    pub fn projection(&self, p: Proj) -> &Projection<S> {
        match p {
            Proj::Query => &self.query,
            Proj::Key => &self.key,
            Proj::Value => &self.value,
            Proj::Output => &self.output,
        }
    }
}

/// All backbone parameters plus the frame-embedding stub.
///
/// The stub is an affine map applied to every incoming frame token; it is
/// initialised to the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<S> {
    pub config: ModelConfig,
    pub token_embedding: Matrix<S>,
    pub positions: Matrix<S>,
    pub projector: Matrix<S>,
    pub projector_bias: Matrix<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub final_norm: Norm<S>,
    pub unembedding: Matrix<S>,
}

const PROJS: [Proj; 4] = [Proj::Query, Proj::Key, Proj::Value, Proj::Output];

impl<S: Scalar> Weights<S> {
    /// Parameters in declaration order (also the checkpoint order).
    pub fn params(&self) -> Vec<(ParamKey, &Matrix<S>)> {
        let shared = |group| ParamKey { group, layer: None };
        let mut out = vec![
            (shared(ParamGroup::TokenEmbedding), &self.token_embedding),
            (shared(ParamGroup::Positions), &self.positions),
            (shared(ParamGroup::Projector), &self.projector),
            (shared(ParamGroup::ProjectorBias), &self.projector_bias),
        ];
        for (l, lw) in self.layers.iter().enumerate() {
            let key = |group| ParamKey { group, layer: Some(l) };
            out.push((key(ParamGroup::AttnNormGain), &lw.attn_norm.gain));
            out.push((key(ParamGroup::AttnNormBias), &lw.attn_norm.bias));
            for (p, proj) in PROJS.into_iter().zip([&lw.query, &lw.key, &lw.value, &lw.output]) {
                out.push((key(ParamGroup::Attention(p)), &proj.weight));
                if let Some(ad) = &proj.adapter {
                    out.push((key(ParamGroup::AdapterA(p)), &ad.a));
                    out.push((key(ParamGroup::AdapterB(p)), &ad.b));
                }
            }
            out.push((key(ParamGroup::FfnNormGain), &lw.ffn_norm.gain));
            out.push((key(ParamGroup::FfnNormBias), &lw.ffn_norm.bias));
            out.push((key(ParamGroup::FfIn), &lw.ff_in));
            out.push((key(ParamGroup::FfOut), &lw.ff_out));
        }
        out.push((shared(ParamGroup::FinalNormGain), &self.final_norm.gain));
        out.push((shared(ParamGroup::FinalNormBias), &self.final_norm.bias));
        out.push((shared(ParamGroup::Unembedding), &self.unembedding));
        out
    }

    /// Same order as [`Weights::params`].
    pub fn params_mut(&mut self) -> Vec<(ParamKey, &mut Matrix<S>)> {
        let shared = |group| ParamKey { group, layer: None };
        let mut out = vec![
            (shared(ParamGroup::TokenEmbedding), &mut self.token_embedding),
            (shared(ParamGroup::Positions), &mut self.positions),
            (shared(ParamGroup::Projector), &mut self.projector),
            (shared(ParamGroup::ProjectorBias), &mut self.projector_bias),
        ];
        for (l, lw) in self.layers.iter_mut().enumerate() {
            let key = |group| ParamKey { group, layer: Some(l) };
            out.push((key(ParamGroup::AttnNormGain), &mut lw.attn_norm.gain));
            out.push((key(ParamGroup::AttnNormBias), &mut lw.attn_norm.bias));
            for (p, proj) in PROJS
                .into_iter()
                .zip([&mut lw.query, &mut lw.key, &mut lw.value, &mut lw.output])
            {
                out.push((key(ParamGroup::Attention(p)), &mut proj.weight));
                if let Some(ad) = &mut proj.adapter {
                    out.push((key(ParamGroup::AdapterA(p)), &mut ad.a));
                    out.push((key(ParamGroup::AdapterB(p)), &mut ad.b));
                }
            }
            out.push((key(ParamGroup::FfnNormGain), &mut lw.ffn_norm.gain));
            out.push((key(ParamGroup::FfnNormBias), &mut lw.ffn_norm.bias));
            out.push((key(ParamGroup::FfIn), &mut lw.ff_in));
            out.push((key(ParamGroup::FfOut), &mut lw.ff_out));
        }
        out.push((shared(ParamGroup::FinalNormGain), &mut self.final_norm.gain));
        out.push((shared(ParamGroup::FinalNormBias), &mut self.final_norm.bias));
        out.push((shared(ParamGroup::Unembedding), &mut self.unembedding));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Weights<T> {
        let mut out = Weights::<T>::zeros(&self.config);
        for ((_, dst), (_, src)) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        out
    }

    /// All-zero weights with the right shapes (norm gains are zero too).
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let r = config.lora_rank;
        let proj = || Projection {
            weight: Matrix::zeros(d, d),
            adapter: (r > 0).then(|| Adapter {
                a: Matrix::zeros(d, r),
                b: Matrix::zeros(r, d),
            }),
        };
        let norm = || Norm {
            gain: Matrix::zeros(1, d),
            bias: Matrix::zeros(1, d),
        };
        Weights {
            config: config.clone(),
            token_embedding: Matrix::zeros(config.vocab, d),
            positions: Matrix::zeros(config.max_positions, d),
            projector: Matrix::zeros(d, d),
            projector_bias: Matrix::zeros(1, d),
            layers: (0..config.layers)
                .map(|_| LayerWeights {
                    attn_norm: norm(),
                    query: proj(),
                    key: proj(),
                    value: proj(),
                    output: proj(),
                    ffn_norm: norm(),
                    ff_in: Matrix::zeros(d, config.d_ff),
                    ff_out: Matrix::zeros(config.d_ff, d),
                })
                .collect(),
            final_norm: norm(),
            unembedding: Matrix::zeros(d, config.vocab),
        }
    }

    /// Applies the frame-embedding stub to raw frame tokens (`N × d`).
    pub fn encode_frame(&self, raw: &Matrix<S>) -> Result<Matrix<S>> {
        let mut out = raw.matmul(&self.projector)?;
        let bias = self.projector_bias.data();
        for r in 0..out.rows() {
            for (v, &b) in out.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Token-embedding rows for `ids`.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Matrix<S>> {
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::Config(format!("token {bad} outside vocab {}", self.config.vocab)));
        }
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        Ok(self.token_embedding.select_rows(&idx))
    }
}

/// Deterministic initialisation: every matrix uniform in `±1/√d`, norm gains
/// one, biases zero, the frame stub the identity and adapter `B` zero so
/// `A·B = 0`.
pub fn init_model<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<Weights<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (config.d_model as f32).sqrt();
    let mut w = Weights::<S>::zeros(config);
    for (key, m) in w.params_mut() {
        match key.group {
            ParamGroup::AttnNormGain | ParamGroup::FfnNormGain | ParamGroup::FinalNormGain => {
                m.data_mut().iter_mut().for_each(|v| *v = S::one());
            }
            ParamGroup::AttnNormBias
            | ParamGroup::FfnNormBias
            | ParamGroup::FinalNormBias
            | ParamGroup::ProjectorBias
            | ParamGroup::AdapterB(_) => {}
            ParamGroup::Projector => *m = Matrix::identity(config.d_model),
            _ => {
                for v in m.data_mut() {
                    let u: f32 = rng.random_range(-scale..scale);
                    *v = S::lit(u as f64);
                }
            }
        }
    }
    Ok(w)
}

#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab: 12,
        max_positions: 64,
        frame_tokens: 3,
        memory_capacity: 4,
        carrier_mode: CarrierMode::Mean,
        carrier_kv_mode: CarrierKvMode::Inherited,
        eviction_rule: EvictionRule::AdjacentPairs,
        memory_enabled: true,
        lora_rank: 2,
        eos_token: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let c = tiny_config();
        let a: Weights<f32> = init_model(&c, 11).unwrap();
        let b: Weights<f32> = init_model(&c, 11).unwrap();
        assert_eq!(a, b);
        let other: Weights<f32> = init_model(&c, 12).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn adapters_start_neutral() {
        let w: Weights<f64> = init_model(&tiny_config(), 1).unwrap();
        for lw in &w.layers {
            for p in PROJS {
                let ad = lw.projection(p).adapter.as_ref().unwrap();
                let prod = ad.a.matmul(&ad.b).unwrap();
                assert!(prod.data().iter().all(|&v| v == 0.0));
                assert!(ad.a.data().iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn init_population_mean_is_centred() {
        // 10⁴ draws from U(-s, s): σ = s/√3, standard error σ/100
        let mut c = tiny_config();
        c.d_model = 64;
        c.heads = 4;
        c.vocab = 160;
        c.max_positions = 8;
        c.lora_rank = 0;
        let w: Weights<f64> = init_model(&c, 5).unwrap();
        let draws: Vec<f64> = w.token_embedding.data().iter().copied().take(10_000).collect();
        assert_eq!(draws.len(), 10_000);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let sigma = (1.0 / 8.0) / 3f64.sqrt();
        assert!(mean.abs() <= 3.0 * sigma / 100.0, "mean {mean}");
    }

    #[test]
    fn head_divisibility_is_checked() {
        let mut c = tiny_config();
        c.heads = 3;
        assert!(matches!(init_model::<f32>(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn params_cover_every_matrix_once() {
        let w: Weights<f32> = init_model(&tiny_config(), 0).unwrap();
        let keys: Vec<ParamKey> = w.params().into_iter().map(|(k, _)| k).collect();
        let unique: std::collections::HashSet<_> = keys.iter().collect();
        assert_eq!(unique.len(), keys.len());
        // 4 shared + 18 per layer (two norms, 4 projections, 8 adapter factors, 2 ff) + 3 final
        assert_eq!(keys.len(), 4 + 2 * 18 + 3);
    }

    #[test]
    fn cast_round_trip() {
        let w: Weights<f32> = init_model(&tiny_config(), 2).unwrap();
        let back: Weights<f32> = w.cast::<f64>().cast();
        assert_eq!(w, back);
    }
}
