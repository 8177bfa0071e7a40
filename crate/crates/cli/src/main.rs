use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use streamcarrier::instrument::random_frames;
use streamcarrier::model::{load_weights, save_weights};
use streamcarrier::training::write_metrics_csv;
use streamcarrier::{
    attention_csv, averaged_generated_attention, averaged_generated_attention_per_head, bench_serving, evaluate,
    gen_synthetic_stream, init_model, load_frames, save_frames, train_stage1, train_stage2, BenchSummary, CaptureFilter,
    CarrierKvMode, CarrierMode, Error, EvictionRule, FrameTokens, ModelConfig, Result, RunConfig,
    StepMetrics, StreamSession, SyntheticStream, Weights,
};

#[derive(Parser)]
#[command(name = "streamcarrier", version, about = "Streaming carrier-token inference, training and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(clap::Args, Clone)]
struct Flags {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Frame file; synthetic frames are generated when absent.
    #[arg(long, global = true)]
    frames: Option<PathBuf>,
    #[arg(long = "memory-size", global = true)]
    memory_size: Option<usize>,
    #[arg(long = "carrier-mode", global = true)]
    carrier_mode: Option<CarrierArg>,
    #[arg(long = "kv-mode", global = true)]
    kv_mode: Option<KvArg>,
    #[arg(long, global = true)]
    eviction: Option<EvictionArg>,
    /// Keep no carrier memory; frames are sampled at question time.
    #[arg(long = "no-memory", global = true)]
    no_memory: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long = "max-new", global = true)]
    max_new: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest frames and write the trace as JSON lines.
    Simulate {
        /// Synthetic frame count when no task is configured.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Ingest frames, pose one question and print the answer.
    Ask {
        /// Question token ids, comma separated.
        #[arg(long, value_delimiter = ',')]
        question: Option<Vec<u32>>,
    },
    /// Run the configured training stages and write a checkpoint.
    Train,
    /// Run the serving benchmark and write the summary JSON.
    Bench {
        /// Independent sessions, seeded seed+i.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Capture attention while answering and write the averaged map as CSV.
    InspectAttn {
        #[arg(long, value_delimiter = ',')]
        question: Option<Vec<u32>>,
        /// Export every head instead of the head mean.
        #[arg(long = "per-head")]
        per_head: bool,
    },
    /// Write a synthetic frame file.
    MakeFrames {
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CarrierArg {
    Mean,
    Last,
}

#[derive(Clone, Copy, ValueEnum)]
enum KvArg {
    Inherited,
    EmbeddingOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvictionArg {
    Adjacent,
    VsIncoming,
}

type FrameSource = (Vec<FrameTokens<f32>>, Option<SyntheticStream<f32>>);

struct Run {
    file: RunConfig,
    /// Model config with the command-line overrides applied.
    model: ModelConfig,
    seed: u64,
    flags: Flags,
}

impl Run {
    fn new(flags: Flags) -> Result<Self> {
        let path = flags
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("--config is required".into()))?;
        let file = RunConfig::load(path)?;
        let mut model = file.model.clone();
        if let Some(m) = flags.memory_size {
            model.memory_capacity = m;
        }
        if let Some(c) = flags.carrier_mode {
            model.carrier_mode = match c {
                CarrierArg::Mean => CarrierMode::Mean,
                CarrierArg::Last => CarrierMode::LastToken,
            };
        }
        if let Some(k) = flags.kv_mode {
            model.carrier_kv_mode = match k {
                KvArg::Inherited => CarrierKvMode::Inherited,
                KvArg::EmbeddingOnly => CarrierKvMode::EmbeddingOnly,
            };
        }
        if let Some(e) = flags.eviction {
            model.eviction_rule = match e {
                EvictionArg::Adjacent => EvictionRule::AdjacentPairs,
                EvictionArg::VsIncoming => EvictionRule::VsIncoming,
            };
        }
        if flags.no_memory {
            model.memory_enabled = false;
        }
        model.validate()?;
        let seed = flags.seed.unwrap_or(file.seed);
        Ok(Run { file, model, seed, flags })
    }

    fn weights(&self) -> Result<Arc<Weights<f32>>> {
        let w = match &self.file.paths.weights {
            Some(p) if p.exists() => load_weights(p)?,
            _ => init_model(&self.file.model, self.file.init_seed)?,
        };
        Ok(Arc::new(w))
    }

    fn session(&self, weights: Arc<Weights<f32>>) -> Result<StreamSession<f32>> {
        StreamSession::open(&self.model, weights, &self.file.session_system())
    }

    /// Frames from `--frames`, the configured file, or the synthetic task.
    fn frames(&self, count: Option<usize>) -> Result<FrameSource> {
        if let Some(p) = self.flags.frames.as_ref().or(self.file.paths.frames.as_ref()) {
            return Ok((load_frames(p, &self.model)?, None));
        }
        match (&self.file.task, count) {
            (Some(task), None) => {
                let s: SyntheticStream<f32> = gen_synthetic_stream(task, &self.file.model, self.seed)?;
                Ok((s.frames.clone(), Some(s)))
            }
            (_, count) => {
                let n = count
                    .or(self.file.bench.as_ref().map(|b| b.frames))
                    .ok_or_else(|| Error::Config("no frame source: give --frames, a task, a bench schedule or --count".into()))?;
                Ok((random_frames(n, self.model.frame_tokens, self.model.d_model, self.seed), None))
            }
        }
    }

    fn question(&self, given: Option<Vec<u32>>, stream: Option<&SyntheticStream<f32>>) -> Result<(Vec<u32>, Option<u32>)> {
        match (given, stream) {
            (Some(q), _) => Ok((q, None)),
            (None, Some(s)) => Ok((s.question.clone(), Some(s.answer))),
            (None, None) => Err(Error::Config("--question is required without a synthetic task".into())),
        }
    }

    fn out_path(&self) -> Result<&Path> {
        self.flags
            .out
            .as_deref()
            .ok_or_else(|| Error::Config("--out is required".into()))
    }
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write + Send>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout()),
    })
}

fn simulate(run: &Run, count: Option<usize>) -> Result<()> {
    let (frames, _) = run.frames(count)?;
    let mut session = run.session(run.weights()?)?;
    let trace = run.flags.out.as_deref().or(run.file.paths.trace.as_deref());
    session.set_trace_sink(sink(trace)?);
    for f in &frames {
        session.ingest_frame(f)?;
    }
    session.flush_trace()
}

#[derive(Serialize)]
struct AskOutput {
    question: Vec<u32>,
    answer: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    expected: Option<u32>,
    frames: usize,
    bank_size: usize,
    prefill_us: f64,
    decode_us_per_token: f64,
}

fn ask(run: &Run, question: Option<Vec<u32>>) -> Result<()> {
    let (frames, stream) = run.frames(None)?;
    let (question, expected) = run.question(question, stream.as_ref())?;
    let mut session = run.session(run.weights()?)?;
    for f in &frames {
        session.ingest_frame(f)?;
    }
    let out = session.ask(&question, run.flags.max_new.unwrap_or(1))?;
    let line = serde_json::to_string(&AskOutput {
        question,
        answer: out.tokens,
        expected,
        frames: frames.len(),
        bank_size: session.bank().len(),
        prefill_us: out.prefill_us,
        decode_us_per_token: out.decode_us_per_token,
    })?;
    match &run.flags.out {
        Some(p) => std::fs::write(p, line + "\n")?,
        None => println!("{line}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct StageResult {
    stage: u8,
    final_loss: f64,
    accuracy: f64,
}

fn train(run: &Run) -> Result<()> {
    let task = run
        .file
        .task
        .as_ref()
        .ok_or_else(|| Error::Config("train needs a task".into()))?;
    if run.file.train.is_empty() {
        return Err(Error::Config("no training stages configured".into()));
    }
    let checkpoint = run
        .flags
        .out
        .as_deref()
        .or(run.file.paths.weights.as_deref())
        .ok_or_else(|| Error::Config("train needs --out or paths.weights".into()))?;
    let mut weights: Weights<f32> = init_model(&run.model, run.file.init_seed)?;
    weights.config = run.model.clone();
    let mut metrics = Vec::new();
    for stage in &run.file.train {
        let mut cfg = stage.clone();
        cfg.seed = cfg.seed.wrapping_add(run.seed);
        let outcome = match cfg.stage {
            1 => train_stage1(&weights, task, &cfg)?,
            _ => train_stage2(&weights, task, &cfg)?,
        };
        weights = outcome.weights;
        let shared = Arc::new(weights.clone());
        let accuracy = evaluate(shared, &run.model, task, cfg.recall, run.file.eval_streams)?;
        let result = StageResult {
            stage: cfg.stage,
            final_loss: outcome.metrics.last().map_or(f64::NAN, |m| m.loss),
            accuracy,
        };
        println!("{}", serde_json::to_string(&result)?);
        let offset = metrics.last().map_or(0, |m: &StepMetrics| m.step + 1);
        metrics.extend(outcome.metrics.into_iter().map(|mut m| {
            m.step += offset;
            m
        }));
    }
    save_weights(&weights, checkpoint)?;
    let metrics_path = run
        .file
        .paths
        .metrics
        .clone()
        .unwrap_or_else(|| checkpoint.with_extension("metrics.csv"));
    write_metrics_csv(&metrics, BufWriter::new(File::create(metrics_path)?))
}

fn bench(run: &Run, parallel: usize) -> Result<()> {
    let schedule = run
        .file
        .bench
        .clone()
        .ok_or_else(|| Error::Config("bench needs a bench schedule in the config".into()))?;
    if parallel == 0 {
        return Err(Error::Config("--parallel must be at least 1".into()));
    }
    let weights = run.weights()?;
    let summaries: Vec<BenchSummary> = if parallel == 1 {
        let trace = run.file.paths.trace.as_deref().map(|p| sink(Some(p))).transpose()?;
        vec![bench_serving(&run.model, weights, &schedule, run.seed, trace)?.summary()]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..parallel)
                .map(|i| {
                    let w = weights.clone();
                    let schedule = &schedule;
                    let model = &run.model;
                    let seed = run.seed.wrapping_add(i as u64);
                    scope.spawn(move || bench_serving(model, w, schedule, seed, None).map(|r| r.summary()))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().map_err(|_| Error::State("bench worker panicked".into()))?)
                .collect::<Result<Vec<_>>>()
        })?
    };
    let text = if parallel == 1 {
        serde_json::to_string_pretty(&summaries[0])?
    } else {
        serde_json::to_string_pretty(&summaries)?
    };
    match &run.flags.out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn inspect_attn(run: &Run, question: Option<Vec<u32>>, per_head: bool) -> Result<()> {
    let (frames, stream) = run.frames(None)?;
    let (question, _) = run.question(question, stream.as_ref())?;
    let mut session = run.session(run.weights()?)?;
    for f in &frames {
        session.ingest_frame(f)?;
    }
    session.enable_capture(CaptureFilter::default());
    session.ask(&question, run.flags.max_new.unwrap_or(1).max(1))?;
    let trace = session.take_trace()?;
    let maps = if per_head {
        averaged_generated_attention_per_head(&trace)?
    } else {
        averaged_generated_attention(&trace)?
    };
    std::fs::write(run.out_path()?, attention_csv(&maps))?;
    Ok(())
}

fn make_frames(run: &Run, count: Option<usize>) -> Result<()> {
    let (frames, _) = run.frames(count)?;
    save_frames(run.out_path()?, &frames)
}

fn execute(cli: Cli) -> Result<()> {
    let run = Run::new(cli.flags)?;
    match cli.command {
        Command::Simulate { count } => simulate(&run, count),
        Command::Ask { question } => ask(&run, question),
        Command::Train => train(&run),
        Command::Bench { parallel } => bench(&run, parallel),
        Command::InspectAttn { question, per_head } => inspect_attn(&run, question, per_head),
        Command::MakeFrames { count } => make_frames(&run, count),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("streamcarrier: {}", e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
