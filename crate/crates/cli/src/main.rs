//! `ave3`: corpus simulation, enhancement, parameter reports, benchmarks,
//! gradient checks and toy training.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 failed check.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use ave3_core::autodiff::Fault;
use ave3_core::io::{self, BenchOptions, RunConfig, SimulateOptions, TrainOptions, WavEncoding};
use ave3_core::model::{build_model, Model, PRESETS};
use ave3_core::sim::Scenario;
use ave3_core::tasks::{self, EnhanceMode, EnhanceReport, ToyScene};
use ave3_core::Error;

const SEED_ENV: &str = "AVE3_SEED";

#[derive(Parser, Debug)]
#[command(name = "ave3", version, about = "Audio-visual speech enhancement toolkit")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a simulated corpus (mixtures, references, ROI files, manifest).
    Simulate {
        /// Run config with a `simulate` section.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long, value_enum)]
        corpus: Option<CorpusArg>,
        /// Clip length in seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Enhance a 16 kHz mono WAV file.
    Enhance {
        /// Preset name or path to a JSON config.
        #[arg(long)]
        config: String,
        /// Checkpoint; random weights from the seed when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        roi: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Offline)]
        mode: ModeArg,
        /// Streaming chunk size in samples.
        #[arg(long, default_value_t = 160)]
        chunk: usize,
        /// Clean reference for an SDR report.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EncodingArg::Float32)]
        encoding: EncodingArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parameter counts per submodule.
    Params {
        /// Preset name or path to a JSON config; all full-size presets when absent.
        config: Option<String>,
    },
    /// Real-time factor of streaming inference on a synthetic clip.
    Bench {
        #[arg(long)]
        config: String,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        /// Clip length in seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Parallel sessions per run.
        #[arg(long)]
        threads: Option<usize>,
        /// Streaming chunk in samples; whole clip when absent.
        #[arg(long)]
        chunk: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of the PLCPA loss through a toy-size model.
    Gradcheck {
        #[arg(long, default_value = "toy-gs")]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 300)]
        samples: usize,
        /// Break a backward rule on purpose (the check should then fail).
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Overfit a small model to one clip.
    TrainToy {
        #[arg(long, default_value = "toy-gs-wide")]
        config: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Noisy clip; a simulated TS2 scene is used when absent.
        #[arg(long, requires = "reference")]
        mixture: Option<PathBuf>,
        #[arg(long, requires = "mixture")]
        reference: Option<PathBuf>,
        #[arg(long, requires = "mixture")]
        roi: Option<PathBuf>,
        /// Where to save the trained weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List preset names.
    Presets,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CorpusArg {
    Ts1,
    Ts2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Offline,
    Streaming,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EncodingArg {
    Pcm16,
    Float32,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    SigmoidGrad,
}

enum Outcome {
    Ok,
    CheckFailed,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult = Result<Outcome, CliError>;

/// Flag, then `AVE3_SEED`, then the config value.
fn resolve_seed(flag: Option<u64>, config: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(config),
    }
}

/// `println!` that exits quietly when stdout is a closed pipe.
macro_rules! out {
    ($($arg:tt)*) => {
        write_line(&format!($($arg)*))
    };
}

fn write_line(line: &str) {
    use std::io::Write;
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = writeln!(stdout, "{line}") {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        panic!("writing to stdout: {e}");
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    out!("{text}");
    Ok(())
}

fn load_model(run: &RunConfig, weights: Option<&PathBuf>, seed: u64) -> Result<Model, CliError> {
    let mut model = build_model(&run.model_config()?, seed)?;
    if let Some(path) = weights.or(run.weights.as_ref()) {
        io::weights_load(path, &mut model.params)?;
    }
    Ok(model)
}

fn simulate(
    json: bool,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    scenes: Option<usize>,
    corpus: Option<CorpusArg>,
    duration: Option<f64>,
    seed: Option<u64>,
) -> CliResult {
    let (mut opts, cfg_seed) = match &config {
        Some(path) => {
            let run = RunConfig::load(path)?;
            let opts = run
                .simulate
                .ok_or_else(|| CliError::Usage(format!("{} has no `simulate` section", path.display())))?;
            (opts, run.seed)
        }
        None => {
            let out = out
                .clone()
                .ok_or_else(|| CliError::Usage("simulate needs --config or --out".into()))?;
            (SimulateOptions::demo(out, Scenario::Ts2, 10), 0)
        }
    };
    if let Some(o) = out {
        opts.output_dir = o;
    }
    if let Some(n) = scenes {
        opts.scenes = n;
    }
    if let Some(c) = corpus {
        opts.corpus = match c {
            CorpusArg::Ts1 => Scenario::Ts1,
            CorpusArg::Ts2 => Scenario::Ts2,
        };
    }
    if let Some(d) = duration {
        opts.duration_s = d;
    }
    let seed = resolve_seed(seed, cfg_seed)?;
    let report = tasks::simulate(&opts, seed)?;
    if json {
        print_json(&report)?;
    } else {
        let ts2 = report.records.iter().filter(|r| r.scenario == Scenario::Ts2).count();
        out!(
            "wrote {} scenes ({} target-only) to {}",
            report.records.len(),
            ts2,
            report.output_dir.display()
        );
        out!("manifest: {}", report.manifest.display());
    }
    Ok(Outcome::Ok)
}

#[allow(clippy::too_many_arguments)]
fn enhance(
    json: bool,
    config: &str,
    weights: Option<PathBuf>,
    input: PathBuf,
    roi: Option<PathBuf>,
    output: PathBuf,
    mode: ModeArg,
    chunk: usize,
    reference: Option<PathBuf>,
    encoding: EncodingArg,
    seed: Option<u64>,
) -> CliResult {
    let run = RunConfig::resolve(config)?;
    let seed = resolve_seed(seed, run.seed)?;
    let model = load_model(&run, weights.as_ref(), seed)?;
    let audio = io::wav_read(&input)?.samples;
    let rois = roi.as_ref().map(io::roi_read).transpose()?;
    let mode = match mode {
        ModeArg::Offline => EnhanceMode::Offline,
        ModeArg::Streaming => EnhanceMode::Streaming,
    };
    let t0 = Instant::now();
    let out = tasks::enhance(&model, &audio, rois.as_deref(), mode, chunk)?;
    let seconds = t0.elapsed().as_secs_f64();
    let encoding = match encoding {
        EncodingArg::Pcm16 => WavEncoding::Pcm16,
        EncodingArg::Float32 => WavEncoding::Float32,
    };
    io::wav_write(&output, &out, encoding)?;
    let (sdr_in, sdr_out) = match &reference {
        Some(path) => {
            let r = io::wav_read(path)?.samples;
            let (a, b) = tasks::sdr_report(&audio, &out, &r)?;
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    let report = EnhanceReport {
        mode,
        samples: out.len(),
        seconds,
        sdr_input_db: sdr_in,
        sdr_output_db: sdr_out,
    };
    if json {
        print_json(&report)?;
    } else {
        out!("enhanced {} samples in {:.3} s -> {}", report.samples, seconds, output.display());
        if let (Some(a), Some(b)) = (sdr_in, sdr_out) {
            out!("SDR noisy {a:.2} dB, enhanced {b:.2} dB ({:+.2} dB)", b - a);
        }
    }
    Ok(Outcome::Ok)
}

fn params(json: bool, config: Option<String>) -> CliResult {
    let names: Vec<String> = match config {
        Some(c) => vec![c],
        None => PRESETS
            .iter()
            .filter(|p| !p.starts_with("toy"))
            .map(|p| p.to_string())
            .collect(),
    };
    let mut reports = Vec::new();
    for name in &names {
        let run = RunConfig::resolve(name)?;
        reports.push((name.clone(), tasks::params(&run.model_config()?)?));
    }
    if json {
        let value: Vec<_> = reports
            .iter()
            .map(|(name, r)| serde_json::json!({ "config": name, "rows": r.rows, "total": r.total }))
            .collect();
        if value.len() == 1 {
            print_json(&value[0])?;
        } else {
            print_json(&value)?;
        }
    } else {
        for (name, r) in &reports {
            out!("{name}");
            for row in &r.rows {
                out!("  {:<26}{:>12}", row.name, row.count);
            }
            out!("  {:<26}{:>12}  ({:.2}M)", "total", r.total, r.total as f64 / 1e6);
        }
    }
    Ok(Outcome::Ok)
}

#[allow(clippy::too_many_arguments)]
fn bench(
    json: bool,
    config: &str,
    weights: Option<PathBuf>,
    runs: Option<usize>,
    warmup: Option<usize>,
    duration: Option<f64>,
    threads: Option<usize>,
    chunk: Option<usize>,
    seed: Option<u64>,
) -> CliResult {
    let run = RunConfig::resolve(config)?;
    let seed = resolve_seed(seed, run.seed)?;
    let model = load_model(&run, weights.as_ref(), seed)?;
    let mut opts = run.bench.clone().unwrap_or_default();
    opts = BenchOptions {
        runs: runs.unwrap_or(opts.runs),
        warmup: warmup.unwrap_or(opts.warmup),
        duration_s: duration.unwrap_or(opts.duration_s),
        threads: threads.unwrap_or(opts.threads),
        chunk: chunk.or(opts.chunk),
    };
    if opts.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let report = tasks::bench(&model, config, &opts, seed)?;
    if json {
        print_json(&report)?;
    } else {
        out!(
            "{}: RTF {:.4} over {} runs of {:.1} s ({} thread(s))",
            report.config, report.rtf, report.runs, report.duration_s, report.threads
        );
        out!(
            "  wall mean {:.4} s, p50 {:.4} s, p95 {:.4} s",
            report.mean_s, report.p50_s, report.p95_s
        );
        let s = &report.stage_rtf;
        out!(
            "  stage RTF: encoder {:.4}, video {:.4}, audio {:.4}, fusion {:.4}, decoder {:.4}",
            s.encoder_s, s.video_s, s.audio_s, s.fusion_s, s.decoder_s
        );
    }
    Ok(Outcome::Ok)
}

fn gradcheck(
    json: bool,
    config: &str,
    seed: Option<u64>,
    tol: f64,
    samples: usize,
    fault: Option<FaultArg>,
) -> CliResult {
    let run = RunConfig::resolve(config)?;
    let seed = resolve_seed(seed, run.seed)?;
    let fault = fault.map(|f| match f {
        FaultArg::SigmoidGrad => Fault::SigmoidGrad,
    });
    let report = tasks::gradcheck(&run.model_config()?, seed, tol, samples, fault)?;
    if json {
        print_json(&report)?;
    } else {
        out!(
            "{}: {} samples, max rel err {:.3e} (tol {:.0e})",
            if report.pass { "PASS" } else { "FAIL" },
            report.samples,
            report.max_rel_err,
            report.tol
        );
        if let Some(w) = &report.worst {
            out!(
                "  worst: {}[{}] analytic {:.6e} numeric {:.6e}",
                w.name, w.index, w.analytic, w.numeric
            );
        }
    }
    Ok(if report.pass { Outcome::Ok } else { Outcome::CheckFailed })
}

#[allow(clippy::too_many_arguments)]
fn train_toy(
    json: bool,
    config: &str,
    steps: Option<usize>,
    lr: Option<f64>,
    mixture: Option<PathBuf>,
    reference: Option<PathBuf>,
    roi: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    seed: Option<u64>,
) -> CliResult {
    let run = RunConfig::resolve(config)?;
    let seed = resolve_seed(seed, run.seed)?;
    let mut opts: TrainOptions = run.train.clone().unwrap_or_default();
    if let Some(s) = steps {
        opts.steps = s;
    }
    if let Some(l) = lr {
        opts.lr = l;
    }
    let mut model = load_model(&run, None, seed)?;
    let scene = match (mixture, reference) {
        (Some(m), Some(r)) => ToyScene {
            mixture: io::wav_read(m)?.samples,
            reference: io::wav_read(r)?.samples,
            rois: roi.map(io::roi_read).transpose()?.unwrap_or_default(),
        },
        _ => tasks::toy_scene(&opts, seed)?,
    };
    let report = tasks::train_toy(&mut model, &scene, &opts, seed)?;
    if let Some(path) = &checkpoint {
        io::weights_save(path, &model.params)?;
    }
    if json {
        print_json(&report)?;
    } else {
        for (i, l) in report.losses.iter().enumerate() {
            if i % 20 == 0 {
                out!("step {i:>4}  loss {l:.5}");
            }
        }
        out!(
            "loss {:.5} -> {:.5} ({:.1}% of initial) in {:.1} s",
            report.initial_loss,
            report.final_loss,
            100.0 * report.final_loss / report.initial_loss,
            report.seconds
        );
        out!(
            "SDR noisy {:.2} dB, before training {:.2} dB, after {:.2} dB",
            report.sdr_input_db, report.sdr_initial_db, report.sdr_final_db
        );
        if let Some(path) = &checkpoint {
            out!("checkpoint: {}", path.display());
        }
    }
    Ok(Outcome::Ok)
}

fn dispatch(cli: Cli) -> CliResult {
    let json = cli.json;
    match cli.command {
        Command::Simulate {
            config,
            out,
            scenes,
            corpus,
            duration,
            seed,
        } => simulate(json, config, out, scenes, corpus, duration, seed),
        Command::Enhance {
            config,
            weights,
            input,
            roi,
            output,
            mode,
            chunk,
            reference,
            encoding,
            seed,
        } => enhance(
            json, &config, weights, input, roi, output, mode, chunk, reference, encoding, seed,
        ),
        Command::Params { config } => params(json, config),
        Command::Bench {
            config,
            weights,
            runs,
            warmup,
            duration,
            threads,
            chunk,
            seed,
        } => bench(json, &config, weights, runs, warmup, duration, threads, chunk, seed),
        Command::Gradcheck {
            config,
            seed,
            tol,
            samples,
            inject_fault,
        } => gradcheck(json, &config, seed, tol, samples, inject_fault),
        Command::TrainToy {
            config,
            steps,
            lr,
            mixture,
            reference,
            roi,
            checkpoint,
            seed,
        } => train_toy(json, &config, steps, lr, mixture, reference, roi, checkpoint, seed),
        Command::Presets => {
            if json {
                print_json(&PRESETS)?;
            } else {
                PRESETS.iter().for_each(|p| out!("{p}"));
            }
            Ok(Outcome::Ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(3),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 3 })
        }
    }
}
