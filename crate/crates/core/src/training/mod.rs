//! Two-stage training on the synthetic recall task.
//!
//! Stage 1 trains on carriers only: `[system][c₁ … c_T][questions]`, each
//! carrier at the position a session would give it. Stage 2 trains on full
//! frames `[system][f₁ c₁ … f_T c_T][questions]` under the semantic mask with
//! the frame stub and adapters frozen. Loss is next-token cross-entropy at
//! the last token of each question only.

mod gradcheck;
pub mod tape;
mod task;

use std::io::Write;
use std::rc::Rc;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::StreamSession;
use crate::error::{Error, Result};
use crate::masking::{build_semantic_mask, Layout, MaskSpec, SegmentTag};
use crate::model::{CarrierMode, ModelConfig, ParamGroup, ParamKey, Weights, NORM_EPS};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Grads, Tape, Var};
pub use task::{gen_synthetic_stream, Recall, SyntheticStream, TaskSpec};

#[cfg(test)]
pub(crate) use task::tiny_task;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    /// Frame stub, adapters and every backbone matrix.
    AdaptersBackbone,
    /// Backbone matrices only; stub and adapters frozen.
    BackboneOnly,
}

impl TrainableSet {
    pub fn includes(self, group: ParamGroup) -> bool {
        match self {
            TrainableSet::AdaptersBackbone => true,
            TrainableSet::BackboneOnly => !group.is_stub() && !group.is_adapter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    pub trainable: TrainableSet,
    pub seed: u64,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub recall: Recall,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stage != 1 && self.stage != 2 {
            return fail(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return fail("steps and batch_size must be positive".into());
        }
        if self.stage == 2 && self.trainable != TrainableSet::BackboneOnly {
            return fail("stage 2 trains the backbone only".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return fail(format!("clip_norm {c} must be positive"));
            }
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return fail("adam needs 0 ≤ β < 1 and ε > 0".into());
            }
        }
        Ok(())
    }
}

/// One materialised training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence<S> {
    pub layout: Layout,
    /// Stream position of every slot.
    pub positions: Vec<usize>,
    pub mask: MaskSpec,
    /// Token ids of the system and text slots, in slot order.
    pub tokens: Vec<u32>,
    /// Raw (pre-stub) frame tokens.
    pub frames: Vec<Matrix<S>>,
    /// Whether frame-token slots are present (stage 2) or only carriers.
    pub with_frame_tokens: bool,
    /// `(slot, token)` pairs scored by the loss.
    pub targets: Vec<(usize, u32)>,
}

/// Builds the training sequence of a stream for `stage` with the given
/// `(question, answer)` turns.
pub fn build_sequence<S: Scalar>(
    model: &ModelConfig,
    task: &TaskSpec,
    frames: &[Matrix<S>],
    turns: &[(Vec<u32>, u32)],
    stage: u8,
) -> Result<TrainSequence<S>> {
    let n = model.frame_tokens;
    let with_frame_tokens = stage == 2;
    let mut b = Layout::builder().system(task.system.len());
    for _ in frames {
        b = b.frame(if with_frame_tokens { n } else { 0 });
    }
    for (q, _) in turns {
        b = b.text(q.len());
    }
    let layout = b.build()?;

    let s = task.system.len();
    let mut positions: Vec<usize> = (0..s).collect();
    for k in 0..frames.len() {
        let start = s + k * (n + 1);
        if with_frame_tokens {
            positions.extend(start..start + n);
        }
        positions.push(start + n);
    }
    let mut next = s + frames.len() * (n + 1);
    let mut tokens = task.system.clone();
    let mut targets = Vec::new();
    for (q, a) in turns {
        positions.extend(next..next + q.len());
        next += q.len();
        tokens.extend_from_slice(q);
        targets.push((positions.len() - 1, *a));
    }
    if let Some(&last) = positions.last() {
        if last >= model.max_positions {
            return Err(Error::Capacity {
                position: last,
                max: model.max_positions,
            });
        }
    }
    let mask = with_positions(&build_semantic_mask(&layout)?, &positions)?;
    Ok(TrainSequence {
        layout,
        positions,
        mask,
        tokens,
        frames: frames.to_vec(),
        with_frame_tokens,
        targets,
    })
}

fn with_positions(mask: &MaskSpec, positions: &[usize]) -> Result<MaskSpec> {
    let allow: Vec<bool> = (0..mask.queries()).flat_map(|i| mask.row(i).to_vec()).collect();
    MaskSpec::with_positions(allow, positions.to_vec(), positions.to_vec())
}

/// Parameter leaves of one tape, in declaration order.
pub struct TapeWeights {
    pub vars: Vec<(ParamKey, Var)>,
}

impl TapeWeights {
    /// Registers every parameter; `trainable` decides leaf versus constant.
    pub fn register<S: Scalar>(tape: &mut Tape<S>, weights: &Weights<S>, trainable: impl Fn(ParamGroup) -> bool) -> Self {
        let vars = weights
            .params()
            .into_iter()
            .map(|(key, m)| {
                let v = if trainable(key.group) {
                    tape.leaf(m.clone())
                } else {
                    tape.constant(m.clone())
                };
                (key, v)
            })
            .collect();
        TapeWeights { vars }
    }

    fn get(&self, group: ParamGroup, layer: Option<usize>) -> Option<Var> {
        self.vars
            .iter()
            .find(|(k, _)| k.group == group && k.layer == layer)
            .map(|(_, v)| *v)
    }

    fn must(&self, group: ParamGroup, layer: Option<usize>) -> Var {
        self.get(group, layer).expect("parameter registered")
    }
}

fn project<S: Scalar>(tape: &mut Tape<S>, tw: &TapeWeights, x: Var, p: crate::model::Proj, l: usize) -> Result<Var> {
    let w = tw.must(ParamGroup::Attention(p), Some(l));
    let mut out = tape.matmul(x, w)?;
    if let (Some(a), Some(b)) = (tw.get(ParamGroup::AdapterA(p), Some(l)), tw.get(ParamGroup::AdapterB(p), Some(l))) {
        let xa = tape.matmul(x, a)?;
        let xab = tape.matmul(xa, b)?;
        out = tape.add(out, xab)?;
    }
    Ok(out)
}

/// Logits of every slot of `seq`. `frame_vars` are the raw frames already
/// on the tape (leaves when their gradient is wanted).
pub fn tape_logits<S: Scalar>(
    tape: &mut Tape<S>,
    tw: &TapeWeights,
    config: &ModelConfig,
    seq: &TrainSequence<S>,
    frame_vars: &[Var],
) -> Result<Var> {
    use crate::model::Proj;
    let slots = seq.layout.slots();
    let tok = tw.must(ParamGroup::TokenEmbedding, None);
    let ids: Vec<usize> = seq.tokens.iter().map(|&t| t as usize).collect();
    if let Some(&bad) = ids.iter().find(|&&t| t >= config.vocab) {
        return Err(Error::Config(format!("token {bad} outside vocab {}", config.vocab)));
    }
    let token_rows = if ids.is_empty() { None } else { Some(tape.gather(tok, ids)?) };
    let proj = tw.must(ParamGroup::Projector, None);
    let proj_b = tw.must(ParamGroup::ProjectorBias, None);
    let mut encoded = Vec::with_capacity(frame_vars.len());
    for &f in frame_vars {
        let e = tape.matmul(f, proj)?;
        let e = tape.add_row(e, proj_b)?;
        let c = match config.carrier_mode {
            CarrierMode::Mean => tape.mean_rows(e)?,
            CarrierMode::LastToken => tape.gather(e, vec![config.frame_tokens - 1])?,
        };
        encoded.push((e, c));
    }
    let mut pieces = Vec::with_capacity(slots.len());
    let mut next_token = 0;
    let mut within = 0;
    let mut ordinal = 0;
    for s in &slots {
        match s.tag {
            SegmentTag::System | SegmentTag::Text => {
                pieces.push((token_rows.expect("token rows"), next_token));
                next_token += 1;
            }
            SegmentTag::Frame => {
                pieces.push((encoded[ordinal].0, within));
                within += 1;
            }
            SegmentTag::Carrier => {
                pieces.push((encoded[ordinal].1, 0));
                ordinal += 1;
                within = 0;
            }
        }
    }
    let x0 = tape.stack(pieces)?;
    let pos = tape.gather(tw.must(ParamGroup::Positions, None), seq.positions.clone())?;
    let mut x = tape.add(x0, pos)?;
    let mask = Rc::new(seq.mask.clone());
    let eps = S::lit(NORM_EPS);
    for l in 0..config.layers {
        let layer = Some(l);
        let h = tape.layer_norm(x, tw.must(ParamGroup::AttnNormGain, layer), tw.must(ParamGroup::AttnNormBias, layer), eps)?;
        let q = project(tape, tw, h, Proj::Query, l)?;
        let k = project(tape, tw, h, Proj::Key, l)?;
        let v = project(tape, tw, h, Proj::Value, l)?;
        let a = tape.attention(q, k, v, mask.clone(), config.heads)?;
        let o = project(tape, tw, a, Proj::Output, l)?;
        x = tape.add(x, o)?;
        let h2 = tape.layer_norm(x, tw.must(ParamGroup::FfnNormGain, layer), tw.must(ParamGroup::FfnNormBias, layer), eps)?;
        let hidden = tape.matmul(h2, tw.must(ParamGroup::FfIn, layer))?;
        let hidden = tape.gelu(hidden);
        let f = tape.matmul(hidden, tw.must(ParamGroup::FfOut, layer))?;
        x = tape.add(x, f)?;
    }
    let hf = tape.layer_norm(x, tw.must(ParamGroup::FinalNormGain, None), tw.must(ParamGroup::FinalNormBias, None), eps)?;
    tape.matmul(hf, tw.must(ParamGroup::Unembedding, None))
}

/// Loss and gradients of one sequence.
pub struct SequenceGrad<S> {
    pub loss: S,
    /// Per parameter in declaration order; `None` for frozen parameters.
    pub grads: Vec<Option<Matrix<S>>>,
    /// Targets predicted correctly by argmax.
    pub correct: usize,
}

pub fn sequence_grad<S: Scalar>(
    weights: &Weights<S>,
    seq: &TrainSequence<S>,
    trainable: impl Fn(ParamGroup) -> bool,
) -> Result<SequenceGrad<S>> {
    let mut tape = Tape::new();
    let tw = TapeWeights::register(&mut tape, weights, trainable);
    let frames: Vec<Var> = seq.frames.iter().map(|f| tape.constant(f.clone())).collect();
    let logits = tape_logits(&mut tape, &tw, &weights.config, seq, &frames)?;
    let targets: Vec<(usize, usize)> = seq.targets.iter().map(|&(r, t)| (r, t as usize)).collect();
    let lv = tape.value(logits);
    let correct = targets
        .iter()
        .filter(|&&(r, t)| crate::engine::argmax(lv.row(r)) as usize == t)
        .count();
    let loss_var = tape.cross_entropy(logits, targets)?;
    let loss = tape.value(loss_var).get(0, 0);
    let g = tape.backward(loss_var)?;
    Ok(SequenceGrad {
        loss,
        grads: tw.vars.iter().map(|(_, v)| g.get(*v).cloned()).collect(),
        correct,
    })
}

/// Loss of one sequence without building gradients.
pub fn sequence_loss<S: Scalar>(weights: &Weights<S>, seq: &TrainSequence<S>) -> Result<S> {
    let mut tape = Tape::new();
    let tw = TapeWeights::register(&mut tape, weights, |_| false);
    let frames: Vec<Var> = seq.frames.iter().map(|f| tape.constant(f.clone())).collect();
    let logits = tape_logits(&mut tape, &tw, &weights.config, seq, &frames)?;
    let targets = seq.targets.iter().map(|&(r, t)| (r, t as usize)).collect();
    let loss = tape.cross_entropy(logits, targets)?;
    Ok(tape.value(loss).get(0, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Fraction of batch targets predicted correctly before the update.
    pub accuracy: f64,
}

pub fn metrics_csv_header() -> &'static str {
    "step,loss,grad_norm,accuracy"
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss, self.grad_norm, self.accuracy)
    }
}

pub fn write_metrics_csv(metrics: &[StepMetrics], mut out: impl Write) -> Result<()> {
    writeln!(out, "{}", metrics_csv_header())?;
    for m in metrics {
        writeln!(out, "{}", m.csv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub weights: Weights<S>,
    pub metrics: Vec<StepMetrics>,
}

struct AdamState<S> {
    m: Vec<Matrix<S>>,
    v: Vec<Matrix<S>>,
    t: i32,
}

fn turns_for<S>(stream: &SyntheticStream<S>, task: &TaskSpec, recall: Recall, rng: &mut ChaCha8Rng) -> Vec<(Vec<u32>, u32)> {
    match recall {
        Recall::Needle => vec![(stream.question.clone(), stream.answer)],
        Recall::Dense => {
            let mut turns = stream.dense_questions(task);
            turns.shuffle(rng);
            turns
        }
    }
}

fn train<S: Scalar>(weights: &Weights<S>, task: &TaskSpec, cfg: &TrainConfig) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    task.validate(&weights.config)?;
    let model = weights.config.clone();
    let mut w = weights.clone();
    let trainable = cfg.trainable;
    let n_params = w.params().len();
    let mut adam = AdamState {
        m: w.params().iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect(),
        v: w.params().iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect(),
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ task.train_seed.rotate_left(17));
    let lr = S::lit(cfg.learning_rate);
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut sum: Vec<Option<Matrix<S>>> = (0..n_params).map(|_| None).collect();
        let mut loss = 0.0;
        let mut correct = 0;
        let mut targets = 0;
        for _ in 0..cfg.batch_size {
            let stream: SyntheticStream<S> = gen_synthetic_stream(task, &model, rng.next_u64())?;
            let turns = turns_for(&stream, task, cfg.recall, &mut rng);
            let raw: Vec<Matrix<S>> = stream.frames.iter().map(|f| f.embeddings.clone()).collect();
            let seq = build_sequence(&model, task, &raw, &turns, cfg.stage)?;
            let g = sequence_grad(&w, &seq, |grp| trainable.includes(grp))?;
            loss += g.loss.as_f64();
            correct += g.correct;
            targets += seq.targets.len();
            for (acc, gi) in sum.iter_mut().zip(g.grads) {
                if let Some(gi) = gi {
                    match acc {
                        Some(a) => a.add_assign(&gi)?,
                        None => *acc = Some(gi),
                    }
                }
            }
        }
        loss /= cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric { step, loss });
        }
        let inv = S::one() / S::from_usize_lossy(cfg.batch_size);
        let mut norm2 = 0.0;
        for g in sum.iter_mut().flatten() {
            *g = g.scale(inv);
            norm2 += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
        let grad_norm = norm2.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Numeric { step, loss: grad_norm });
        }
        let clip = match cfg.clip_norm {
            Some(c) if grad_norm > c => S::lit(c / grad_norm),
            _ => S::one(),
        };
        adam.t += 1;
        for (i, (key, param)) in w.params_mut().into_iter().enumerate() {
            let Some(g) = &sum[i] else { continue };
            if !trainable.includes(key.group) {
                continue;
            }
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (p, &gv) in param.data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * clip * gv;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let (b1, b2) = (S::lit(beta1), S::lit(beta2));
                    let c1 = S::one() - b1.powi(adam.t);
                    let c2 = S::one() - b2.powi(adam.t);
                    let eps = S::lit(eps);
                    let m = adam.m[i].data_mut();
                    let v = adam.v[i].data_mut();
                    for (j, (p, &gv)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gv = gv * clip;
                        m[j] = b1 * m[j] + (S::one() - b1) * gv;
                        v[j] = b2 * v[j] + (S::one() - b2) * gv * gv;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        *p -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        metrics.push(StepMetrics {
            step,
            loss,
            grad_norm,
            accuracy: correct as f64 / targets.max(1) as f64,
        });
    }
    Ok(TrainOutcome { weights: w, metrics })
}

/// Stage 1: carriers only, plain causal flow over `[system, carriers, text]`.
pub fn train_stage1<S: Scalar>(weights: &Weights<S>, task: &TaskSpec, cfg: &TrainConfig) -> Result<TrainOutcome<S>> {
    if cfg.stage != 1 {
        return Err(Error::Config(format!("train_stage1 given a stage {} config", cfg.stage)));
    }
    train(weights, task, cfg)
}

/// Stage 2: full frames under the semantic mask, backbone only.
pub fn train_stage2<S: Scalar>(weights: &Weights<S>, task: &TaskSpec, cfg: &TrainConfig) -> Result<TrainOutcome<S>> {
    if cfg.stage != 2 {
        return Err(Error::Config(format!("train_stage2 given a stage {} config", cfg.stage)));
    }
    train(weights, task, cfg)
}

/// Held-out recall accuracy through streaming sessions. Dense recall asks
/// about every frame, resetting the dialogue between questions.
pub fn evaluate<S: Scalar>(
    weights: Arc<Weights<S>>,
    session: &ModelConfig,
    task: &TaskSpec,
    recall: Recall,
    streams: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..streams {
        let stream: SyntheticStream<S> = gen_synthetic_stream(task, session, task.eval_seed.wrapping_add(i as u64))?;
        let mut s = StreamSession::open(session, weights.clone(), &task.system)?;
        for f in &stream.frames {
            s.ingest_frame(f)?;
        }
        let questions = match recall {
            Recall::Needle => vec![(stream.question.clone(), stream.answer)],
            Recall::Dense => stream.dense_questions(task),
        };
        for (q, a) in questions {
            let out = s.ask(&q, 1)?;
            correct += usize::from(out.tokens.first() == Some(&a));
            total += 1;
            s.reset_dialogue();
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}
