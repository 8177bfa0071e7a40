use crate::error::{Error, Result};
use crate::instrument::{AttentionTrace, AttentionRow};
use crate::masking::{EntryMeta, MaskSpec, SegmentTag, TagSet};
use crate::model::{KvCache, Weights};
use crate::numerics::{dot, gelu, softmax_in_place, Matrix};
use crate::scalar::Scalar;

/// Multi-head scaled dot-product attention. `keys`/`values` hold every
/// key (cached then new) as rows; each head uses its own `d/heads` column
/// slice. Returns the concatenated head outputs, before the output
/// projection.
pub fn attention_forward<S: Scalar>(
    q: &Matrix<S>,
    keys: &Matrix<S>,
    values: &Matrix<S>,
    mask: &MaskSpec,
    heads: usize,
) -> Result<Matrix<S>> {
    attention_kernel(q, keys, values, mask, heads, &mut 0, |_, _, _| {})
}

/// Attention with a callback receiving `(query, head, weights)` for every
/// softmax row, and a counter of executed flops.
pub(crate) fn attention_kernel<S: Scalar>(
    q: &Matrix<S>,
    keys: &Matrix<S>,
    values: &Matrix<S>,
    mask: &MaskSpec,
    heads: usize,
    flops: &mut u64,
    mut observe: impl FnMut(usize, usize, &[S]),
) -> Result<Matrix<S>> {
    let (n, d) = q.shape();
    let nk = keys.rows();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible into {heads} heads")));
    }
    if keys.cols() != d || values.shape() != keys.shape() {
        return Err(Error::Shape(format!(
            "q {n}x{d}, keys {}x{}, values {}x{}",
            nk,
            keys.cols(),
            values.rows(),
            values.cols()
        )));
    }
    if mask.queries() != n || mask.keys() != nk {
        return Err(Error::Shape(format!("mask {}x{} for {n}x{nk} scores", mask.queries(), mask.keys())));
    }
    let dk = d / heads;
    let scale = S::one() / S::from_usize_lossy(dk).sqrt();
    let mut out = Matrix::zeros(n, d);
    let mut scores = vec![S::zero(); nk];
    for i in 0..n {
        let allow = mask.row(i);
        for hd in 0..heads {
            let span = hd * dk..(hd + 1) * dk;
            let qh = &q.row(i)[span.clone()];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = if allow[j] {
                    *flops += 2 * dk as u64;
                    dot(qh, &keys.row(j)[span.clone()]) * scale
                } else {
                    S::zero()
                };
            }
            if !softmax_in_place(&mut scores, Some(allow)) {
                return Err(Error::DegenerateRow { row: i });
            }
            let orow = &mut out.row_mut(i)[span.clone()];
            for (j, &w) in scores.iter().enumerate() {
                if allow[j] {
                    *flops += 2 * dk as u64;
                    for (o, &vv) in orow.iter_mut().zip(&values.row(j)[span.clone()]) {
                        *o += w * vv;
                    }
                }
            }
            observe(i, hd, &scores);
        }
    }
    Ok(out)
}

/// New tokens for one forward step.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a, S> {
    /// Input embeddings without positions, one row per new token.
    pub embeddings: &'a Matrix<S>,
    /// Tag, position and origin of each new token.
    pub entries: &'a [EntryMeta],
    /// Allow grid with keys ordered as `cache entries ++ new tokens`.
    pub mask: &'a MaskSpec,
}

/// Optional observers of a forward step. Neither changes any computed value.
#[derive(Default)]
pub struct Probe<'a, S> {
    pub capture: Option<&'a mut AttentionTrace<S>>,
}

#[derive(Debug, Clone)]
pub struct StepOutput<S> {
    /// Next-token logits, one row per new token.
    pub logits: Matrix<S>,
    /// Floating-point operations executed: two per multiply-accumulate in
    /// every matrix product and attention dot product.
    pub flops: u64,
}

/// Adds the learned position row to each embedding.
pub fn embed_positions<S: Scalar>(embeddings: &Matrix<S>, positions: &[usize], weights: &Weights<S>) -> Result<Matrix<S>> {
    if positions.len() != embeddings.rows() {
        return Err(Error::Shape(format!(
            "{} positions for {} embeddings",
            positions.len(),
            embeddings.rows()
        )));
    }
    if embeddings.rows() > 0 && embeddings.cols() != weights.config.d_model {
        return Err(Error::Shape(format!(
            "embedding width {} vs d_model {}",
            embeddings.cols(),
            weights.config.d_model
        )));
    }
    let max = weights.config.max_positions;
    let mut out = embeddings.clone();
    for (r, &p) in positions.iter().enumerate() {
        if p >= max {
            return Err(Error::Capacity { position: p, max });
        }
        for (v, &e) in out.row_mut(r).iter_mut().zip(weights.positions.row(p)) {
            *v += e;
        }
    }
    Ok(out)
}

/// Runs every layer over the new tokens, attending to `cache` plus the new
/// tokens under `input.mask`. Only new entries whose tag is in `retain` are
/// appended to the cache.
pub fn forward_step<S: Scalar>(
    weights: &Weights<S>,
    cache: &mut KvCache<S>,
    input: &StepInput<'_, S>,
    retain: TagSet,
) -> Result<Matrix<S>> {
    Ok(forward_step_probed(weights, cache, input, retain, &mut Probe::default())?.logits)
}

pub fn forward_step_probed<S: Scalar>(
    weights: &Weights<S>,
    cache: &mut KvCache<S>,
    input: &StepInput<'_, S>,
    retain: TagSet,
    probe: &mut Probe<'_, S>,
) -> Result<StepOutput<S>> {
    let cfg = &weights.config;
    let (d, heads) = (cfg.d_model, cfg.heads);
    let dk = cfg.head_dim();
    let n = input.entries.len();
    let c = cache.len();
    if input.embeddings.rows() != n {
        return Err(Error::Shape(format!("{} embeddings for {n} entries", input.embeddings.rows())));
    }
    if cache.layers() != cfg.layers || cache.dim() != d {
        return Err(Error::Config("cache does not match the model".into()));
    }
    if input.mask.queries() != n || input.mask.keys() != c + n {
        return Err(Error::Shape(format!(
            "mask {}x{} for {n} queries over {} keys",
            input.mask.queries(),
            input.mask.keys(),
            c + n
        )));
    }
    let mut floor = cache.last_position();
    for e in input.entries {
        if floor.is_some_and(|f| e.position <= f) {
            return Err(Error::Layout(format!("position {} does not increase past {floor:?}", e.position)));
        }
        floor = Some(e.position);
    }
    let positions: Vec<usize> = input.entries.iter().map(|e| e.position).collect();

    let mut flops = 0u64;
    let mut mm = |m: usize, k: usize, n: usize| flops += 2 * (m * k * n) as u64;
    let rank = cfg.lora_rank;
    let proj_flops = |mm: &mut dyn FnMut(usize, usize, usize), rows: usize, has_adapter: bool| {
        mm(rows, d, d);
        if has_adapter {
            mm(rows, d, rank);
            mm(rows, rank, d);
        }
    };

    let key_meta: Vec<EntryMeta> = cache.meta().iter().chain(input.entries).copied().collect();
    let mut x = embed_positions(input.embeddings, &positions, weights)?;
    let mut new_kv: Vec<(Matrix<S>, Matrix<S>)> = Vec::with_capacity(cfg.layers);
    let mut attn_flops = 0u64;

    for (l, lw) in weights.layers.iter().enumerate() {
        let h = lw.attn_norm.apply_rows(&x);
        let q = lw.query.apply(&h)?;
        let k = lw.key.apply(&h)?;
        let v = lw.value.apply(&h)?;
        for p in [&lw.query, &lw.key, &lw.value] {
            proj_flops(&mut mm, n, p.adapter.is_some());
        }

        let keys = cache.layer_keys(l).vstack(&k)?;
        let values = cache.layer_values(l).vstack(&v)?;
        let attn = match probe.capture.as_deref_mut() {
            Some(cap) => attention_kernel(&q, &keys, &values, input.mask, heads, &mut attn_flops, |i, hd, w| {
                let qmeta = input.entries[i];
                if !cap.wants(l, hd, qmeta.tag) {
                    return;
                }
                let span = hd * dk..(hd + 1) * dk;
                let dump = cap.filter.dump_qk;
                cap.rows.push(AttentionRow {
                    layer: l,
                    head: hd,
                    query_position: qmeta.position,
                    query_tag: qmeta.tag,
                    generating: false,
                    key_positions: key_meta.iter().map(|m| m.position).collect(),
                    key_tags: key_meta.iter().map(|m| m.tag).collect(),
                    weights: w.to_vec(),
                    query: dump.then(|| q.row(i)[span.clone()].to_vec()),
                    keys: dump.then(|| keys.row_iter().map(|r| r[span.clone()].to_vec()).collect()),
                });
            })?,
            None => attention_kernel(&q, &keys, &values, input.mask, heads, &mut attn_flops, |_, _, _| {})?,
        };

        let o = lw.output.apply(&attn)?;
        proj_flops(&mut mm, n, lw.output.adapter.is_some());
        x.add_assign(&o)?;

        let h2 = lw.ffn_norm.apply_rows(&x);
        let hidden = h2.matmul(&lw.ff_in)?.map(gelu);
        let f = hidden.matmul(&lw.ff_out)?;
        mm(n, d, cfg.d_ff);
        mm(n, cfg.d_ff, d);
        x.add_assign(&f)?;
        new_kv.push((k, v));
    }

    let logits = weights.final_norm.apply_rows(&x).matmul(&weights.unembedding)?;
    mm(n, d, cfg.vocab);

    for (i, e) in input.entries.iter().enumerate() {
        if retain.contains(e.tag) {
            let kv: Vec<(&[S], &[S])> = new_kv.iter().map(|(k, v)| (k.row(i), v.row(i))).collect();
            cache.push(*e, &kv)?;
        }
    }
    debug_assert!(cache.meta().iter().all(|m| m.tag != SegmentTag::Frame) || retain.contains(SegmentTag::Frame));

    Ok(StepOutput {
        logits,
        flops: flops + attn_flops,
    })
}
