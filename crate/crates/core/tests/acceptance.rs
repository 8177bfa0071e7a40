//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Exits non-zero when a criterion fails, except those listed in
//! `KNOWN_FAILURES`, which print FAIL with their measurements.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use streamcarrier::instrument::{median, random_frames};
use streamcarrier::memory::Victim;
use streamcarrier::training::{tape_logits, Tape, TapeWeights};
use streamcarrier::*;

/// Criteria that do not hold for this mechanism; see the README.
const KNOWN_FAILURES: &[&str] = &["eviction-isolation"];

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn model(layers: usize, heads: usize, d: usize, n: usize, vocab: usize, m: usize, max_positions: usize) -> ModelConfig {
    ModelConfig {
        layers,
        heads,
        d_model: d,
        d_ff: 2 * d,
        vocab,
        max_positions,
        frame_tokens: n,
        memory_capacity: m,
        carrier_mode: CarrierMode::Mean,
        carrier_kv_mode: CarrierKvMode::Inherited,
        eviction_rule: EvictionRule::AdjacentPairs,
        memory_enabled: true,
        lora_rank: 4.min(d),
        eos_token: None,
    }
}

/// Initialised weights with nonzero adapters.
fn weights<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Weights<S> {
    let mut w: Weights<S> = init_model(cfg, seed).expect("init");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada);
    for lw in &mut w.layers {
        for p in [&mut lw.query, &mut lw.key, &mut lw.value, &mut lw.output] {
            if let Some(ad) = &mut p.adapter {
                for v in ad.b.data_mut() {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    *v = S::lit(0.1 * x);
                }
            }
        }
    }
    w
}

fn tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

fn discard_soundness() -> Verdict {
    let t0 = Instant::now();
    let cfg = model(2, 2, 32, 8, 64, 64, 128);
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let w64: Weights<f64> = weights(&cfg, seed);
        let w32: Weights<f32> = w64.cast();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let system = tokens(&mut rng, 4, 64);
        let question = tokens(&mut rng, 3, 64);
        let frames64: Vec<FrameTokens<f64>> = random_frames(10, 8, 32, seed + 100);
        let frames32: Vec<FrameTokens<f32>> = frames64
            .iter()
            .map(|f| FrameTokens::new(f.index, f.embeddings.cast()))
            .collect();
        let mut s = StreamSession::open(&cfg, Arc::new(w32), &system).expect("open");
        for f in &frames32 {
            s.ingest_frame(f).expect("ingest");
        }
        let out = s.ask(&question, 1).expect("ask");
        let oracle = oracle_full_forward(&cfg, &w64, &system, &frames64, &question, None).expect("oracle");
        let last = oracle.logits.row(oracle.logits.rows() - 1);
        for (a, b) in out.logits[0].iter().zip(last) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Verdict {
        name: "discard-soundness",
        pass: worst <= 1e-4 && secs < 10.0,
        detail: format!("20 seeds, f32 streaming vs f64 oracle: max |Δ| = {worst:.3e} (≤ 1e-4), {secs:.2} s (< 10 s)"),
    }
}

fn carrier_exactness() -> Verdict {
    let frames: Vec<FrameTokens<f32>> = random_frames(1000, 8, 32, 7);
    let mut worst = 0.0f64;
    let mut last_exact = true;
    for f in &frames {
        let m = &f.embeddings;
        let mean = build_carrier_embedding(m, CarrierMode::Mean).expect("mean");
        for (c, &v) in mean.iter().enumerate() {
            let col: f64 = (0..m.rows()).map(|r| m.get(r, c) as f64).sum::<f64>() / m.rows() as f64;
            worst = worst.max((v as f64 - col).abs());
        }
        let last = build_carrier_embedding(m, CarrierMode::LastToken).expect("last");
        last_exact &= last == m.row(m.rows() - 1);
    }
    Verdict {
        name: "carrier-exactness",
        pass: worst <= 1e-6 && last_exact,
        detail: format!("1000 frames: mean-mode ‖Δ‖∞ = {worst:.3e} (≤ 1e-6); last-token equals row N−1: {last_exact}"),
    }
}

/// One 1000-frame session at M = 64, shared by boundedness and latency.
struct LongRun {
    footprint_64: KvFootprint,
    footprint_1000: KvFootprint,
    reports: Vec<IngestReport>,
    max_bank: usize,
}

fn long_run() -> LongRun {
    let cfg = model(2, 2, 32, 8, 64, 64, 4 + 1000 * 9 + 8);
    let w: Weights<f32> = weights(&cfg, 1);
    let frames: Vec<FrameTokens<f32>> = random_frames(1000, 8, 32, 3);
    let mut s = StreamSession::open(&cfg, Arc::new(w), &[1, 2, 3, 4]).expect("open");
    let mut reports = Vec::with_capacity(1000);
    let mut footprint_64 = None;
    let mut max_bank = 0;
    for f in &frames {
        let r = s.ingest_frame(f).expect("ingest");
        max_bank = max_bank.max(s.bank().len());
        reports.push(r);
        if reports.len() == 64 {
            footprint_64 = Some(s.kv_footprint());
        }
    }
    LongRun {
        footprint_64: footprint_64.expect("64 frames"),
        footprint_1000: s.kv_footprint(),
        reports,
        max_bank,
    }
}

fn memory_boundedness(run: &LongRun) -> Verdict {
    let same_bytes = run.footprint_64.visual_bytes == run.footprint_1000.visual_bytes;
    let (f65, f1000) = (run.reports[64].flops, run.reports[999].flops);
    Verdict {
        name: "memory-boundedness",
        pass: same_bytes && f65 == f1000 && run.max_bank <= 64,
        detail: format!(
            "M=64: visual KV bytes after 64 = {}, after 1000 = {}; flops frame 65 = {f65}, frame 1000 = {f1000}; max bank {}",
            run.footprint_64.visual_bytes, run.footprint_1000.visual_bytes, run.max_bank
        ),
    }
}

fn constant_latency(run: &LongRun) -> Verdict {
    let window = |a: usize, b: usize| median(&run.reports[a..b].iter().map(|r| r.latency_us).collect::<Vec<_>>()).expect("samples");
    let early = window(50, 150);
    let late = window(900, 1000);
    let ratio = late / early;
    Verdict {
        name: "constant-latency",
        pass: ratio <= 1.2,
        detail: format!("median ingest frames 50–150 = {early:.1} µs, 900–1000 = {late:.1} µs, ratio {ratio:.3} (≤ 1.2)"),
    }
}

/// Exhaustive scan: every candidate pair with its older member, highest
/// cosine wins, ties to the oldest.
fn oracle_victim(bank: &[Vec<f64>], incoming: &[f64], rule: EvictionRule) -> usize {
    let mut pairs: Vec<(usize, f64)> = Vec::new();
    match rule {
        EvictionRule::AdjacentPairs => {
            for i in 0..bank.len() {
                let partner = if i + 1 < bank.len() { &bank[i + 1][..] } else { incoming };
                pairs.push((i, cosine_similarity(&bank[i], partner).expect("cos")));
            }
        }
        EvictionRule::VsIncoming => {
            for (i, b) in bank.iter().enumerate() {
                pairs.push((i, cosine_similarity(b, incoming).expect("cos")));
            }
        }
    }
    let best = pairs.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    pairs.iter().find(|p| p.1 == best).expect("pair").0
}

fn eviction_oracle() -> Verdict {
    let mut agree = 0;
    let mut trials = 0;
    let mut max_len = 0;
    for rule in [EvictionRule::AdjacentPairs, EvictionRule::VsIncoming] {
        let m = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bank: MemoryBank<f64> = MemoryBank::new(m, rule).expect("bank");
        let vector = |rng: &mut ChaCha8Rng, bank: &MemoryBank<f64>| -> Vec<f64> {
            // Every fifth vector repeats a bank entry so that ties occur.
            if !bank.is_empty() && rng.random_range(0..5) == 0 {
                let k = rng.random_range(0..bank.len());
                return bank.records()[k].embedding.clone();
            }
            (0..8).map(|_| StandardNormal.sample(&mut *rng)).collect()
        };
        let record = |frame: usize, embedding: Vec<f64>| CarrierRecord {
            frame,
            embedding,
            kv: Vec::new(),
            position: frame,
            created: frame,
        };
        for frame in 0..m + 1000 {
            let e = vector(&mut rng, &bank);
            if bank.len() == m {
                let current: Vec<Vec<f64>> = bank.records().iter().map(|r| r.embedding.clone()).collect();
                let expected = oracle_victim(&current, &e, rule);
                let got: Option<Victim> = bank.select_victim(frame, &e).expect("select");
                trials += 1;
                agree += usize::from(got.map(|v| v.index) == Some(expected));
            }
            memory_insert(&mut bank, record(frame, e)).expect("insert");
            max_len = max_len.max(bank.len());
        }
    }
    Verdict {
        name: "eviction-oracle",
        pass: agree == trials && trials == 2000 && max_len <= 16,
        detail: format!("{agree}/{trials} full-bank insertions match the pair-scan oracle (both rules), max bank {max_len} ≤ M=16"),
    }
}

fn small_task(frames: usize) -> TaskSpec {
    TaskSpec {
        frames,
        alphabet: 4,
        symbol_base: 0,
        index_base: 4,
        question_prefix: vec![10],
        system: vec![11],
        noise: 0.5,
        feature_seed: 1,
        train_seed: 2,
        eval_seed: 3,
    }
}

fn mask_leakage() -> Verdict {
    let mut zero_when_masked = 0;
    let mut nonzero_when_visible = 0;
    let mut max_masked = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = rng.random_range(1..=2);
        let heads = [1, 2][rng.random_range(0..2)];
        let d = [8, 16][rng.random_range(0..2)];
        let n = rng.random_range(2..=4);
        let t = rng.random_range(2..=4);
        let cfg = model(layers, heads, d, n, 32, 4, 64);
        let w: Weights<f64> = weights(&cfg, seed);
        let task = small_task(t);
        let stream: SyntheticStream<f64> = gen_synthetic_stream(&task, &cfg, seed).expect("stream");
        let raw: Vec<Matrix<f64>> = stream.frames.iter().map(|f| f.embeddings.clone()).collect();
        let seq = build_sequence(&cfg, &task, &raw, &stream.dense_questions(&task), 2).expect("seq");
        let target = rng.random_range(0..t);
        for masked in [true, false] {
            let mut seq = seq.clone();
            if masked {
                let slot = seq.layout.carrier_slot(target).expect("carrier");
                seq.mask.block_key(slot);
            }
            let mut tape = Tape::new();
            let tw = TapeWeights::register(&mut tape, &w, |_| false);
            let leaves: Vec<_> = seq.frames.iter().map(|f| tape.leaf(f.clone())).collect();
            let logits = tape_logits(&mut tape, &tw, &cfg, &seq, &leaves).expect("logits");
            let targets = seq.targets.iter().map(|&(r, c)| (r, c as usize)).collect();
            let loss = tape.cross_entropy(logits, targets).expect("loss");
            let grads = tape.backward(loss).expect("backward");
            let g = grads.get(leaves[target]).expect("frame gradient");
            let peak = g.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if masked {
                max_masked = max_masked.max(peak);
                zero_when_masked += usize::from(g.data().iter().all(|&v| v == 0.0));
            } else {
                nonzero_when_visible += usize::from(peak > 0.0);
            }
        }
    }
    Verdict {
        name: "mask-leakage",
        pass: zero_when_masked == 10 && nonzero_when_visible == 10,
        detail: format!(
            "10 configs at f64: carrier masked → gradient exactly 0 in {zero_when_masked}/10 (max |g| {max_masked:e}); visible → nonzero in {nonzero_when_visible}/10"
        ),
    }
}

/// Logits of a replayed run over `frames`.
fn replayed_logits(cfg: &ModelConfig, w: &Arc<Weights<f32>>, schedule: &ReplaySchedule, frames: &[FrameTokens<f32>], q: &[u32]) -> Vec<Vec<f32>> {
    let mut s = StreamSession::open(cfg, w.clone(), &[1]).expect("open");
    s.replay(schedule.clone());
    for f in frames {
        s.ingest_frame(f).expect("ingest");
    }
    s.ask(q, 3).expect("ask").logits
}

fn eviction_isolation() -> Verdict {
    let mut all = (0, 0);
    let mut unseen = (0, 0);
    let mut embedding_only = (0, 0);
    for rule in [EvictionRule::AdjacentPairs, EvictionRule::VsIncoming] {
        for seed in 0..5u64 {
            for kv in [CarrierKvMode::Inherited, CarrierKvMode::EmbeddingOnly] {
                let mut cfg = model(2, 2, 16, 4, 32, 4, 128);
                cfg.eviction_rule = rule;
                cfg.carrier_kv_mode = kv;
                let w = Arc::new(weights::<f32>(&cfg, seed));
                let frames: Vec<FrameTokens<f32>> = random_frames(14, 4, 16, seed + 40);
                let schedule = ReplaySchedule::simulate(&cfg, &w, &frames).expect("schedule");
                let hidden: BTreeSet<usize> = schedule.unseen_evictions();
                let q = [5, 6];
                let base = replayed_logits(&cfg, &w, &schedule, &frames, &q);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for &evicted in schedule.evictions.values() {
                    let mut perturbed = frames.clone();
                    for v in perturbed[evicted].embeddings.data_mut() {
                        *v += if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    }
                    let same = replayed_logits(&cfg, &w, &schedule, &perturbed, &q) == base;
                    let bucket = match kv {
                        CarrierKvMode::EmbeddingOnly => &mut embedding_only,
                        CarrierKvMode::Inherited if hidden.contains(&evicted) => {
                            unseen.0 += usize::from(same);
                            unseen.1 += 1;
                            &mut all
                        }
                        CarrierKvMode::Inherited => &mut all,
                    };
                    bucket.0 += usize::from(same);
                    bucket.1 += 1;
                }
            }
        }
    }
    Verdict {
        name: "eviction-isolation",
        pass: all.0 == all.1 && all.1 > 0,
        detail: format!(
            "{}/{} evicted frames leave logits bit-identical; those evicted before any later frame saw them: {}/{}",
            all.0, all.1, unseen.0, unseen.1
        ),
    }
}

fn gradient_check() -> Verdict {
    let cfg = model(2, 2, 16, 3, 32, 4, 64);
    let w: Weights<f64> = weights(&cfg, 9);
    let task = small_task(3);
    let stream: SyntheticStream<f64> = gen_synthetic_stream(&task, &cfg, 4).expect("stream");
    let raw: Vec<Matrix<f64>> = stream.frames.iter().map(|f| f.embeddings.clone()).collect();
    let seq = build_sequence(&cfg, &task, &raw, &stream.dense_questions(&task), 2).expect("seq");
    let floor = 1e-6;
    let report = grad_check(&w, &seq, 5, 1e-5, floor, 1).expect("grad check");
    let groups: BTreeSet<String> = w.params().iter().map(|(k, _)| format!("{:?}", k.group)).collect();
    let covered = report.groups();
    let smallest = report.entries.iter().map(|e| e.analytic.abs()).fold(f64::INFINITY, f64::min);
    let max_rel = report.max_rel();
    Verdict {
        name: "gradient-check",
        pass: report.entries.len() >= 200 && covered == groups.len() && max_rel <= 1e-5,
        detail: format!(
            "{} coordinates over {covered}/{} parameter groups, h = 1e-5, floor {floor:e}: max relative error {max_rel:.3e} (≤ 1e-5); smallest |grad| {smallest:.1e}",
            report.entries.len(),
            groups.len()
        ),
    }
}

struct SeedResult {
    needle: f64,
    needle_embedding_only: f64,
    needle_last_token: f64,
    dense_two_stage: f64,
    dense_stage1_only: f64,
}

fn toy_training() -> (Verdict, Verdict) {
    let t0 = Instant::now();
    let run = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.json")).expect("toy config");
    let task = run.task.clone().expect("task");
    let stage1 = run.train[0].clone();
    let stage2 = run.train[1].clone();
    assert!(stage1.steps <= 2000 && stage2.steps <= 2000);
    let base = run.model.clone();
    let mut results = Vec::new();
    for seed in 0..5u64 {
        let with_seed = |c: &TrainConfig, k: u64| TrainConfig {
            seed: c.seed.wrapping_add(1000 * seed + k),
            ..c.clone()
        };
        let w0: Weights<f32> = init_model(&base, run.init_seed + seed).expect("init");
        let w1 = train_stage1(&w0, &task, &with_seed(&stage1, 0)).expect("stage 1").weights;
        let two = Arc::new(train_stage2(&w1, &task, &with_seed(&stage2, 0)).expect("stage 2").weights);
        let mut more = with_seed(&stage1, 1);
        more.steps = stage2.steps;
        let one = Arc::new(train_stage1(&w1, &task, &more).expect("stage 1 only").weights);

        let mut last_cfg = base.clone();
        last_cfg.carrier_mode = CarrierMode::LastToken;
        let mut wl: Weights<f32> = init_model(&last_cfg, run.init_seed + seed).expect("init");
        wl.config = last_cfg.clone();
        let wl = train_stage1(&wl, &task, &with_seed(&stage1, 0)).expect("stage 1").weights;
        let wl = Arc::new(train_stage2(&wl, &task, &with_seed(&stage2, 0)).expect("stage 2").weights);

        let mut eo_cfg = base.clone();
        eo_cfg.carrier_kv_mode = CarrierKvMode::EmbeddingOnly;
        let streams = run.eval_streams;
        let r = SeedResult {
            needle: evaluate(two.clone(), &base, &task, Recall::Needle, streams).expect("eval"),
            needle_embedding_only: evaluate(two.clone(), &eo_cfg, &task, Recall::Needle, streams).expect("eval"),
            needle_last_token: evaluate(wl, &last_cfg, &task, Recall::Needle, streams).expect("eval"),
            dense_two_stage: evaluate(two, &base, &task, Recall::Dense, streams).expect("eval"),
            dense_stage1_only: evaluate(one, &base, &task, Recall::Dense, streams).expect("eval"),
        };
        eprintln!(
            "  toy seed {seed}: needle {:.3} | embedding-only {:.3} | last-token {:.3} | dense two-stage {:.4} vs stage-1 only {:.4}",
            r.needle, r.needle_embedding_only, r.needle_last_token, r.dense_two_stage, r.dense_stage1_only
        );
        results.push(r);
    }
    let secs = t0.elapsed().as_secs_f64();
    let mean = |f: fn(&SeedResult) -> f64| results.iter().map(f).sum::<f64>() / results.len() as f64;
    let needle = mean(|r| r.needle);
    let worst = results.iter().map(|r| r.needle).fold(1.0, f64::min);
    let gain = mean(|r| r.dense_two_stage - r.dense_stage1_only);
    let training = Verdict {
        name: "toy-two-stage-training",
        pass: needle >= 0.8 && gain > 0.0 && secs < 900.0,
        detail: format!(
            "{}+{} steps: needle recall mean {needle:.3} (min {worst:.3}) vs 0.0625 chance; dense two-stage − stage-1-only (equal steps) mean {gain:+.4} over 5 paired seeds; {secs:.0} s for all toy runs",
            stage1.steps, stage2.steps
        ),
    };
    let full = needle;
    let eo = mean(|r| r.needle_embedding_only);
    let last = mean(|r| r.needle_last_token);
    let ablation = Verdict {
        name: "ablation-direction",
        pass: full >= eo && full >= last,
        detail: format!("needle recall over 5 seeds: full {full:.3} ≥ embedding-only KV {eo:.3}, ≥ last-token carrier {last:.3}"),
    };
    (training, ablation)
}

fn instrumentation_transparency() -> Verdict {
    let cfg = model(2, 2, 16, 4, 32, 4, 128);
    let w = Arc::new(weights::<f32>(&cfg, 3));
    let frames: Vec<FrameTokens<f32>> = random_frames(8, 4, 16, 9);
    let run = |capture: bool| {
        let mut s = StreamSession::open(&cfg, w.clone(), &[1, 2]).expect("open");
        if capture {
            s.enable_capture(CaptureFilter::default());
        }
        for f in &frames {
            s.ingest_frame(f).expect("ingest");
        }
        let out = s.ask(&[3, 4, 5], 4).expect("ask");
        (out.logits, capture.then(|| s.take_trace().expect("trace")))
    };
    let (plain, _) = run(false);
    let (captured, trace) = run(true);
    let trace = trace.expect("trace");
    let identical = plain == captured;
    let row_err = trace.max_row_sum_error();
    let maps = averaged_generated_attention(&trace).expect("average");
    let per_head = averaged_generated_attention_per_head(&trace).expect("per head");
    let export_err = maps
        .iter()
        .chain(&per_head)
        .map(|m| (m.scores.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Verdict {
        name: "instrumentation-transparency",
        pass: identical && !trace.is_empty() && row_err <= 1e-5 && export_err <= 1e-5,
        detail: format!(
            "logits bit-identical with capture: {identical}; {} captured rows, max |Σ−1| = {row_err:.1e}; exported rows max |Σ−1| = {export_err:.1e}",
            trace.rows.len()
        ),
    }
}

fn main() {
    let started = Instant::now();
    let mut verdicts = vec![discard_soundness(), carrier_exactness()];
    let long = long_run();
    verdicts.push(memory_boundedness(&long));
    verdicts.push(eviction_oracle());
    verdicts.push(mask_leakage());
    verdicts.push(eviction_isolation());
    verdicts.push(gradient_check());
    let (training, ablation) = toy_training();
    verdicts.push(training);
    verdicts.push(ablation);
    verdicts.push(constant_latency(&long));
    verdicts.push(instrumentation_transparency());

    let mut unexpected = 0;
    for v in &verdicts {
        let known = KNOWN_FAILURES.contains(&v.name);
        let status = match (v.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        unexpected += usize::from(!v.pass && !known);
        println!("{status} {}: {}", v.name, v.detail);
    }
    println!("acceptance finished in {:.0} s", started.elapsed().as_secs_f64());
    if unexpected > 0 {
        std::process::exit(1);
    }
}
