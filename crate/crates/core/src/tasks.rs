//! End-to-end tasks behind the command-line tool: corpus simulation,
//! enhancement, parameter reports, benchmarking, gradient checks and toy
//! training.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, Fault, GradCheckOptions, Tape};
use crate::error::{Error, Result};
use crate::io::{self, BenchOptions, SimulateOptions, TrainOptions, WavEncoding};
use crate::loss::{plcpa_loss, plcpa_loss_var, sdr, PlcpaConfig, StftConfig};
use crate::model::{build_model, param_report, Model, ModelConfig, ParamReport, StageTimes};
use crate::nn::Ctx;
use crate::params::ParamId;
use crate::sim::{
    mix_scene, plan_scenarios, sample_scene, synth_noise, synth_roi, synth_speech, Point, RoiMode, Scenario,
    SceneRanges, SynthRoiSpec, SAMPLE_RATE,
};
use crate::stream::{stream_chunked, Session};
use crate::tensor::Tensor;
use crate::video::{roi_timestamps, RoiFrame, TimedRoi};

/// Length after zero-padding `len` so that frames of `window` with `hop`
/// cover every sample.
pub fn padded_len(len: usize, window: usize, hop: usize) -> usize {
    if len <= window {
        window
    } else {
        window + (len - window).div_ceil(hop) * hop
    }
}

fn padded(x: &[f32], window: usize, hop: usize) -> Vec<f32> {
    let mut v = x.to_vec();
    v.resize(padded_len(x.len(), window, hop), 0.0);
    v
}

fn seconds(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- simulate

/// One line of the corpus manifest. File names are relative to the corpus
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub scenario: Scenario,
    pub mixture: String,
    pub reference: String,
    pub roi: String,
    pub seed: u64,
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sir_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interferer_position: Option<Point>,
    pub target_position: Point,
    pub mic_position: Point,
    pub room: Point,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulateReport {
    pub output_dir: PathBuf,
    pub manifest: PathBuf,
    pub records: Vec<ManifestRecord>,
}

fn tile(x: &[f32], len: usize) -> Vec<f32> {
    if x.is_empty() {
        return vec![0.0; len];
    }
    x.iter().copied().cycle().take(len).collect()
}

fn load_sources(paths: &[PathBuf]) -> Result<Vec<Vec<f32>>> {
    paths.iter().map(|p| io::wav_read(p).map(|w| w.samples)).collect()
}

/// Writes `scene_NNNN_{mix,ref}.wav`, `scene_NNNN.roi` and `manifest.json`
/// into `opts.output_dir`. Identical `(opts, seed)` give identical bytes.
pub fn simulate(opts: &SimulateOptions, seed: u64) -> Result<SimulateReport> {
    if !(opts.duration_s > 0.0) {
        return Err(Error::InvalidConfig(format!("duration_s = {}", opts.duration_s)));
    }
    let len = (opts.duration_s * SAMPLE_RATE as f64).round() as usize;
    let speech = load_sources(&opts.speech)?;
    let noise = load_sources(&opts.noise)?;
    let dir = &opts.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let plan = plan_scenarios(opts.scenes, opts.corpus, opts.target_only_fraction, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(opts.scenes);
    for (i, &scenario) in plan.iter().enumerate() {
        let scene_seed: u64 = rng.random();
        let spec = sample_scene(&opts.ranges, scenario, scene_seed);
        let pick = |pool: &[Vec<f32>], k: usize, fallback: &dyn Fn() -> Vec<f32>| {
            if pool.is_empty() {
                fallback()
            } else {
                tile(&pool[k % pool.len()], len)
            }
        };
        let target = pick(&speech, 2 * i, &|| synth_speech(len, scene_seed ^ 0x7a));
        let interferer = pick(&speech, 2 * i + 1, &|| synth_speech(len, scene_seed ^ 0x1f));
        let noise_sig = pick(&noise, i, &|| synth_noise(len, scene_seed ^ 0x5e));
        let mixed = mix_scene(
            &spec,
            &target,
            (scenario == Scenario::Ts1).then_some(&interferer[..]),
            Some(&noise_sig),
        )?;
        let rois = synth_roi(
            &SynthRoiSpec {
                mode: opts.roi.mode,
                detection_rate: opts.roi.detection_rate,
                seed: scene_seed,
            },
            &target,
        );
        let id = format!("scene_{i:04}");
        let record = ManifestRecord {
            mixture: format!("{id}_mix.wav"),
            reference: format!("{id}_ref.wav"),
            roi: format!("{id}.roi"),
            id,
            scenario,
            seed: scene_seed,
            snr_db: spec.snr_db,
            sir_db: spec.sir_db,
            interferer_position: spec.interferer,
            target_position: spec.target,
            mic_position: spec.mic,
            room: spec.room.dims,
        };
        io::wav_write(dir.join(&record.mixture), &mixed.mixture, WavEncoding::Float32)?;
        io::wav_write(dir.join(&record.reference), &mixed.target, WavEncoding::Float32)?;
        io::roi_write(dir.join(&record.roi), &rois)?;
        records.push(record);
    }
    let manifest = dir.join("manifest.json");
    io::write_atomic(&manifest, serde_json::to_string_pretty(&records)?.as_bytes())?;
    Ok(SimulateReport {
        output_dir: dir.clone(),
        manifest,
        records,
    })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------- enhance

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnhanceMode {
    Offline,
    Streaming,
}

/// Enhances `audio`; the output has the same length as the input. ROI
/// frames are taken at 25 fps from sample 0. Passing ROI frames to an
/// audio-only model is an error, even an empty set.
pub fn enhance(
    model: &Model,
    audio: &[f32],
    rois: Option<&[RoiFrame]>,
    mode: EnhanceMode,
    chunk: usize,
) -> Result<Vec<f32>> {
    if rois.is_some() && !model.cfg().has_video() {
        return Err(Error::InvalidConfig("ROI input given to an audio-only model".into()));
    }
    if audio.is_empty() {
        return Ok(Vec::new());
    }
    let rois = rois.unwrap_or(&[]);
    let mut out = match mode {
        EnhanceMode::Offline => {
            let cfg = model.cfg();
            model.enhance(&padded(audio, cfg.window, cfg.hop), rois)?
        }
        EnhanceMode::Streaming => stream_chunked(model, audio, rois, &[chunk.max(1)])?,
    };
    out.truncate(audio.len());
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct EnhanceReport {
    pub mode: EnhanceMode,
    pub samples: usize,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sdr_input_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sdr_output_db: Option<f64>,
}

/// SDR of the noisy input and of the enhanced output against `reference`.
pub fn sdr_report(noisy: &[f32], enhanced: &[f32], reference: &[f32]) -> Result<(f64, f64)> {
    Ok((sdr(noisy, reference)?, sdr(enhanced, reference)?))
}

// ---------------------------------------------------------------- params

pub fn params(cfg: &ModelConfig) -> Result<ParamReport> {
    param_report(cfg)
}

// ---------------------------------------------------------------- bench

/// Seconds spent per stage, averaged over runs.
#[derive(Clone, Debug, Default, Serialize)]
pub struct StageBreakdown {
    pub encoder_s: f64,
    pub video_s: f64,
    pub audio_s: f64,
    pub fusion_s: f64,
    pub decoder_s: f64,
}

impl StageBreakdown {
    fn from_times(t: &StageTimes, runs: usize) -> Self {
        let r = runs.max(1) as f64;
        StageBreakdown {
            encoder_s: seconds(t.encoder) / r,
            video_s: seconds(t.video) / r,
            audio_s: seconds(t.audio) / r,
            fusion_s: seconds(t.fusion) / r,
            decoder_s: seconds(t.decoder) / r,
        }
    }

    fn scaled(&self, k: f64) -> Self {
        StageBreakdown {
            encoder_s: self.encoder_s * k,
            video_s: self.video_s * k,
            audio_s: self.audio_s * k,
            fusion_s: self.fusion_s * k,
            decoder_s: self.decoder_s * k,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub config: String,
    pub runs: usize,
    pub warmup: usize,
    pub duration_s: f64,
    pub threads: usize,
    pub chunk: Option<usize>,
    pub wall_s: Vec<f64>,
    pub mean_s: f64,
    pub p50_s: f64,
    pub p95_s: f64,
    /// Mean wall time over the input duration.
    pub rtf: f64,
    pub stages_s: StageBreakdown,
    pub stage_rtf: StageBreakdown,
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Synthetic noisy speech with matching ROI frames (for video models).
pub fn bench_input(model: &Model, duration_s: f64, seed: u64) -> (Vec<f32>, Vec<RoiFrame>) {
    let len = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let speech = synth_speech(len, seed);
    let noise = synth_noise(len, seed ^ 1);
    let audio = speech.iter().zip(&noise).map(|(s, n)| s + 0.3 * n).collect();
    let rois = if model.cfg().has_video() {
        synth_roi(&SynthRoiSpec::default(), &speech)
    } else {
        Vec::new()
    };
    (audio, rois)
}

fn stream_once(model: &Model, audio: &[f32], rois: &[TimedRoi], chunk: Option<usize>) -> Result<StageTimes> {
    let mut session = Session::new(model)?;
    let step = chunk.unwrap_or(audio.len()).max(1);
    let mut next = 0;
    for (k, piece) in audio.chunks(step).enumerate() {
        let end = ((k * step + piece.len()) as u64).min(audio.len() as u64);
        let start = next;
        while next < rois.len() && rois[next].timestamp < end {
            next += 1;
        }
        std::hint::black_box(session.push(piece, &rois[start..next])?);
    }
    std::hint::black_box(session.flush()?);
    Ok(*session.stage_times())
}

/// Streams a synthetic clip through a fresh session per run. With
/// `threads > 1` each run streams that many sessions in parallel.
pub fn bench(model: &Model, name: &str, opts: &BenchOptions, seed: u64) -> Result<BenchReport> {
    if opts.runs == 0 {
        return Err(Error::InvalidConfig("bench needs at least one run".into()));
    }
    let threads = opts.threads.max(1);
    let (audio, frames) = bench_input(model, opts.duration_s, seed);
    let rois: Vec<TimedRoi> = roi_timestamps(frames.len())
        .into_iter()
        .zip(frames)
        .map(|(timestamp, frame)| TimedRoi { timestamp, frame })
        .collect();
    let run = || -> Result<StageTimes> {
        if threads == 1 {
            return stream_once(model, &audio, &rois, opts.chunk);
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|_| s.spawn(|| stream_once(model, &audio, &rois, opts.chunk)))
                .collect();
            let mut first = None;
            for h in handles {
                let t = h.join().expect("bench thread panicked")?;
                first.get_or_insert(t);
            }
            Ok(first.unwrap_or_default())
        })
    };
    for _ in 0..opts.warmup {
        run()?;
    }
    let mut wall = Vec::with_capacity(opts.runs);
    let mut stages = StageTimes::default();
    for _ in 0..opts.runs {
        let t0 = Instant::now();
        let t = run()?;
        wall.push(seconds(t0.elapsed()));
        stages.add(&t);
    }
    let mut sorted = wall.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = wall.iter().sum::<f64>() / wall.len() as f64;
    let stages_s = StageBreakdown::from_times(&stages, opts.runs);
    Ok(BenchReport {
        config: name.to_string(),
        runs: opts.runs,
        warmup: opts.warmup,
        duration_s: opts.duration_s,
        threads,
        chunk: opts.chunk,
        mean_s: mean,
        p50_s: percentile(&sorted, 50.0),
        p95_s: percentile(&sorted, 95.0),
        rtf: mean / opts.duration_s,
        stage_rtf: stages_s.scaled(1.0 / opts.duration_s),
        stages_s,
        wall_s: wall,
    })
}

// ---------------------------------------------------------------- gradcheck

#[derive(Clone, Debug, Serialize)]
pub struct GradSampleReport {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tol: f64,
    pub eps: f64,
    pub floor: f64,
    pub samples: usize,
    pub max_rel_err: f64,
    pub pass: bool,
    /// Probed scalars per top-level module.
    pub coverage: BTreeMap<String, usize>,
    /// Distinct parameter tensors probed, out of `tensors_total`.
    pub tensors_probed: usize,
    pub tensors_total: usize,
    pub worst: Option<GradSampleReport>,
}

/// Model used by the gradient check: large configurations are shrunk to
/// the same topology at toy width.
pub fn gradcheck_config(cfg: &ModelConfig) -> ModelConfig {
    if cfg.audio_features > 64 || cfg.hidden > 16 {
        cfg.shrunk()
    } else {
        cfg.clone()
    }
}

fn module_group(name: &str) -> String {
    let head = name.split('.').next().unwrap_or(name);
    head.trim_end_matches(|c: char| c.is_ascii_digit()).to_string()
}

/// Step and relative-error floor of the model-level check. Central
/// differences of the f64 loss carry about 1e-15 of round-off, i.e. ~5e-11
/// of gradient noise at this step; below the floor gradients are compared
/// with absolute accuracy `tol · 1e-6`.
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Finite-difference check of the PLCPA loss through the whole (shrunk)
/// model in f64. ROI frames are textured so that trunk activations do not
/// share ReLU kinks.
pub fn gradcheck(
    cfg: &ModelConfig,
    seed: u64,
    tol: f64,
    samples: usize,
    fault: Option<Fault>,
) -> Result<GradcheckReport> {
    let cfg = gradcheck_config(cfg);
    let model = build_model(&cfg, seed)?;
    let mut params = model.params.cast::<f64>();
    let len = cfg.window + 3 * cfg.hop;
    let target = synth_speech(len, seed ^ 3);
    let noise = synth_noise(len, seed ^ 4);
    let audio: Tensor<f64> = Tensor::from_vec(target.iter().zip(&noise).map(|(s, n)| s + 0.5 * n).collect()).cast();
    let reference: Tensor<f64> = Tensor::from_vec(target.clone()).cast();
    let rois = if cfg.has_video() {
        let spec = SynthRoiSpec {
            mode: RoiMode::Noise,
            detection_rate: 1.0,
            seed,
        };
        synth_roi(&spec, &target)
    } else {
        Vec::new()
    };
    let (scfg, pcfg) = (StftConfig::default(), PlcpaConfig::default());
    let net = &model.net;
    let opts = GradCheckOptions {
        eps: GRADCHECK_EPS,
        tol,
        samples,
        seed,
        floor: GRADCHECK_FLOOR,
        fault,
    };
    let report = grad_check(
        |tape, params| {
            let cx = Ctx::new(tape, params);
            let y = net.forward_utterance(&cx, &tape.constant(audio.clone()), &rois)?;
            plcpa_loss_var(&y, &reference, &scfg, &pcfg)
        },
        &mut params,
        &opts,
    )?;
    let mut coverage = BTreeMap::new();
    for s in &report.samples {
        *coverage.entry(module_group(&s.name)).or_insert(0) += 1;
    }
    Ok(GradcheckReport {
        seed,
        tol,
        eps: opts.eps,
        floor: opts.floor,
        samples: report.samples.len(),
        max_rel_err: report.max_rel_err,
        pass: report.pass,
        coverage,
        tensors_probed: report.samples.iter().map(|s| s.name.as_str()).collect::<BTreeSet<_>>().len(),
        tensors_total: params.len(),
        worst: report.worst().map(|w| GradSampleReport {
            name: w.name.clone(),
            index: w.index,
            analytic: w.analytic,
            numeric: w.numeric,
            rel_err: w.rel_err,
        }),
    })
}

// ---------------------------------------------------------------- train

/// A single training clip.
#[derive(Clone, Debug)]
pub struct ToyScene {
    pub mixture: Vec<f32>,
    pub reference: Vec<f32>,
    pub rois: Vec<RoiFrame>,
}

/// A simulated TS2 scene at `opts.snr_db` lasting `opts.duration_s`.
pub fn toy_scene(opts: &TrainOptions, seed: u64) -> Result<ToyScene> {
    let len = (opts.duration_s * SAMPLE_RATE as f64).round() as usize;
    let target = synth_speech(len, seed);
    let noise = synth_noise(len, seed ^ 0x5e);
    let ranges = SceneRanges {
        snr_db: (opts.snr_db, opts.snr_db),
        ..SceneRanges::demo()
    };
    let spec = sample_scene(&ranges, Scenario::Ts2, seed);
    let mixed = mix_scene(&spec, &target, None, Some(&noise))?;
    Ok(ToyScene {
        mixture: mixed.mixture,
        reference: mixed.target,
        rois: synth_roi(&SynthRoiSpec::default(), &target),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ToyTrainReport {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    /// Loss before each update.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    /// Loss after the last update.
    pub final_loss: f64,
    pub sdr_input_db: f64,
    pub sdr_initial_db: f64,
    pub sdr_final_db: f64,
    pub seconds: f64,
}

/// AdamW with decoupled weight decay.
struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[(ParamId, Tensor<f32>)], lr: f64, o: &TrainOptions) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (o.beta1, o.beta2);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for (k, (id, g)) in grads.iter().enumerate() {
            let p = model.params.get(*id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = p
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(i, (&w, &gi))| {
                    let gi = gi as f64;
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    let update = (m[i] / c1) / ((v[i] / c2).sqrt() + o.eps) + o.weight_decay * w as f64;
                    (w as f64 - lr * update) as f32
                })
                .collect();
            let shape = p.shape().to_vec();
            model.params.set(*id, Tensor::new(shape, data)?)?;
        }
        Ok(())
    }
}

type Grads = Vec<(ParamId, Tensor<f32>)>;

fn loss_and_grads(
    model: &Model,
    audio: &Tensor<f32>,
    reference: &Tensor<f32>,
    rois: &[RoiFrame],
) -> Result<(f64, Grads)> {
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &model.params);
    let y = model.net.forward_utterance(&cx, &tape.constant(audio.clone()), rois)?;
    let loss = plcpa_loss_var(&y, reference, &StftConfig::default(), &PlcpaConfig::default())?;
    let value = loss.value().item() as f64;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let g = tape.backward(&loss)?;
    let grads = model
        .params
        .ids()
        .map(|id| {
            let grad = g.param(id).unwrap_or_else(|| Tensor::zeros(model.params.get(id).shape().to_vec()));
            (id, grad)
        })
        .collect();
    Ok((value, grads))
}

/// Overfits `model` to one clip with the PLCPA loss. The learning rate
/// ramps linearly over the first `warmup_fraction` of the steps.
pub fn train_toy(model: &mut Model, scene: &ToyScene, opts: &TrainOptions, seed: u64) -> Result<ToyTrainReport> {
    let t0 = Instant::now();
    let len = scene.mixture.len();
    if scene.reference.len() != len {
        return Err(Error::LengthMismatch(len, scene.reference.len()));
    }
    let rois: &[RoiFrame] = if model.cfg().has_video() { &scene.rois } else { &[] };
    let (window, hop) = (model.cfg().window, model.cfg().hop);
    let audio = Tensor::from_vec(padded(&scene.mixture, window, hop));
    let reference = Tensor::from_vec(padded(&scene.reference, window, hop));
    let evaluate = |model: &Model| -> Result<(f64, f64)> {
        let y = model.enhance(audio.data(), rois)?;
        let loss = plcpa_loss(&y, reference.data(), &StftConfig::default(), &PlcpaConfig::default())?;
        Ok((loss, sdr(&y[..len], &scene.reference)?))
    };
    let (initial_loss, sdr_initial) = evaluate(model)?;
    let warmup = ((opts.steps as f64 * opts.warmup_fraction).ceil() as usize).max(1);
    let mut adam = AdamW::new(model);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let (loss, grads) = loss_and_grads(model, &audio, &reference, rois)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss });
        }
        losses.push(loss);
        let lr = opts.lr * ((step + 1) as f64 / warmup as f64).min(1.0);
        adam.step(model, &grads, lr, opts)?;
    }
    let (final_loss, sdr_final) = evaluate(model)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: opts.steps,
            value: final_loss,
        });
    }
    Ok(ToyTrainReport {
        seed,
        steps: opts.steps,
        lr: opts.lr,
        losses,
        initial_loss,
        final_loss,
        sdr_input_db: sdr(&scene.mixture, &scene.reference)?,
        sdr_initial_db: sdr_initial,
        sdr_final_db: sdr_final,
        seconds: seconds(t0.elapsed()),
    })
}
