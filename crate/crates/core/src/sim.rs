//! Shoebox room acoustics (image method), scene mixing and synthetic
//! stand-ins for speech, noise and mouth video.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::video::{RoiFrame, ROI_SIZE, SAMPLES_PER_ROI};

pub const SAMPLE_RATE: u32 = 16_000;
pub const SPEED_OF_SOUND: f64 = 340.0;

pub type Point = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    /// `(Lx, Ly, Lz)` in meters.
    pub dims: Point,
    /// Absorption per wall in (0, 1], ordered x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.
    pub absorption: [f64; 6],
    pub max_order: usize,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_fs")]
    pub fs: f64,
}

fn default_c() -> f64 {
    SPEED_OF_SOUND
}

fn default_fs() -> f64 {
    SAMPLE_RATE as f64
}

impl RoomSpec {
    pub fn new(dims: Point, absorption: f64, max_order: usize) -> Self {
        RoomSpec {
            dims,
            absorption: [absorption; 6],
            max_order,
            c: SPEED_OF_SOUND,
            fs: SAMPLE_RATE as f64,
        }
    }

    /// Reflection coefficient of each wall, `sqrt(1 − absorption)`.
    pub fn betas(&self) -> [f64; 6] {
        self.absorption.map(|a| (1.0 - a).max(0.0).sqrt())
    }

    pub fn check_inside(&self, p: &Point) -> Result<()> {
        let inside = p
            .iter()
            .zip(&self.dims)
            .all(|(&v, &l)| v.is_finite() && v > 0.0 && v < l);
        if inside {
            Ok(())
        } else {
            Err(Error::PositionOutOfRoom(*p))
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::InvalidConfig(format!("room dims {:?}", self.dims)));
        }
        if self.absorption.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::InvalidConfig(format!("absorption {:?}", self.absorption)));
        }
        if self.max_order > 10 {
            return Err(Error::InvalidConfig(format!("max_order {} > 10", self.max_order)));
        }
        Ok(())
    }
}

/// A mirrored copy of a source.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSource {
    pub pos: Point,
    /// Number of wall reflections.
    pub order: usize,
    /// Product of the reflection coefficients along its path.
    pub reflection: f64,
}

/// All images with at most `room.max_order` reflections.
pub fn image_sources(room: &RoomSpec, src: &Point) -> Vec<ImageSource> {
    let betas = room.betas();
    let m = room.max_order as i64;
    // per axis: (coordinate, reflections, reflection product) for each (n, q)
    let axis = |a: usize| {
        let mut v = Vec::new();
        for n in -m..=m {
            for q in 0..2i64 {
                let low = (n - q).unsigned_abs() as usize;
                let high = n.unsigned_abs() as usize;
                if low + high > room.max_order {
                    continue;
                }
                let pos = (1 - 2 * q) as f64 * src[a] + 2.0 * n as f64 * room.dims[a];
                let r = betas[2 * a].powi(low as i32) * betas[2 * a + 1].powi(high as i32);
                v.push((pos, low + high, r));
            }
        }
        v
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let mut out = Vec::new();
    for &(x, ox, rx) in &ax {
        for &(y, oy, ry) in &ay {
            if ox + oy > room.max_order {
                continue;
            }
            for &(z, oz, rz) in &az {
                let order = ox + oy + oz;
                if order <= room.max_order {
                    out.push(ImageSource {
                        pos: [x, y, z],
                        order,
                        reflection: rx * ry * rz,
                    });
                }
            }
        }
    }
    out
}

fn distance(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Impulse response from `src` to `mic`: every image contributes
/// `reflection / (4π·d)` at delay `d/c·fs`, split linearly between the two
/// neighbouring samples.
pub fn image_method_rir(room: &RoomSpec, src: &Point, mic: &Point) -> Result<Vec<f32>> {
    room.validate()?;
    room.check_inside(src)?;
    room.check_inside(mic)?;
    let images = image_sources(room, src);
    let max_d = images
        .iter()
        .map(|im| distance(&im.pos, mic))
        .fold(0.0, f64::max);
    let len = (max_d / room.c * room.fs).ceil() as usize + 2;
    let mut h = vec![0.0f64; len];
    for im in &images {
        let d = distance(&im.pos, mic).max(1e-3);
        let g = im.reflection / (4.0 * PI * d);
        if g == 0.0 {
            continue;
        }
        let delay = d / room.c * room.fs;
        let i = delay.floor() as usize;
        let frac = delay - i as f64;
        h[i] += g * (1.0 - frac);
        h[i + 1] += g * frac;
    }
    Ok(h.into_iter().map(|v| v as f32).collect())
}

/// Linear convolution truncated to `out_len` samples.
pub fn convolve(x: &[f32], h: &[f32], out_len: usize) -> Vec<f32> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; out_len];
    }
    let full = x.len() + h.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let (fwd, inv) = (planner.plan_fft_forward(n), planner.plan_fft_inverse(n));
    let lift = |v: &[f32]| {
        let mut b: Vec<Complex<f64>> = v.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
        b.resize(n, Complex::new(0.0, 0.0));
        b
    };
    let (mut a, mut b) = (lift(x), lift(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    (0..out_len)
        .map(|i| if i < full { (a[i].re / n as f64) as f32 } else { 0.0 })
        .collect()
}

pub fn power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Target, interfering speaker and noise.
    #[serde(rename = "TS1")]
    Ts1,
    /// Target and noise only.
    #[serde(rename = "TS2")]
    Ts2,
}

/// Geometry and levels of one simulated mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub scenario: Scenario,
    pub room: RoomSpec,
    pub mic: Point,
    pub target: Point,
    #[serde(default)]
    pub interferer: Option<Point>,
    pub noise: Point,
    /// Target-to-noise ratio; `None` mixes no noise.
    pub snr_db: Option<f64>,
    /// Target-to-interferer ratio (TS1 only).
    #[serde(default)]
    pub sir_db: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedScene {
    pub mixture: Vec<f32>,
    /// Training and evaluation reference.
    pub target: Vec<f32>,
    pub interferer: Vec<f32>,
    pub noise: Vec<f32>,
    pub noise_gain: f64,
    pub interferer_gain: f64,
}

/// Convolves every source with its impulse response, truncates to the
/// target length and scales interferer and noise relative to the
/// reverberant target power.
pub fn mix_scene(
    spec: &SceneSpec,
    target: &[f32],
    interferer: Option<&[f32]>,
    noise: Option<&[f32]>,
) -> Result<MixedScene> {
    let len = target.len();
    if power(target) == 0.0 {
        return Err(Error::SilentSource("target".into()));
    }
    let reverb = |sig: &[f32], pos: &Point| -> Result<Vec<f32>> {
        let h = image_method_rir(&spec.room, pos, &spec.mic)?;
        Ok(convolve(sig, &h, len))
    };
    let t = reverb(target, &spec.target)?;
    let pt = power(&t);
    if pt == 0.0 {
        return Err(Error::SilentSource("target".into()));
    }
    let level = |db: f64| pt / 10f64.powf(db / 10.0);

    let (interferer_sig, interferer_gain) = match (spec.scenario, interferer, spec.interferer, spec.sir_db) {
        (Scenario::Ts2, ..) => (vec![0.0; len], 0.0),
        (Scenario::Ts1, Some(sig), Some(pos), Some(sir)) => {
            let i = reverb(sig, &pos)?;
            let pi = power(&i);
            if pi == 0.0 {
                return Err(Error::SilentSource("interferer".into()));
            }
            let g = (level(sir) / pi).sqrt();
            (i.iter().map(|&v| (v as f64 * g) as f32).collect(), g)
        }
        _ => {
            return Err(Error::InvalidConfig(
                "TS1 scenes need an interferer signal, position and SIR".into(),
            ))
        }
    };

    let (noise_sig, noise_gain) = match (spec.snr_db, noise) {
        (None, _) => (vec![0.0; len], 0.0),
        (Some(snr), Some(sig)) => {
            let n = reverb(sig, &spec.noise)?;
            let pn = power(&n);
            if pn == 0.0 {
                return Err(Error::SilentSource("noise".into()));
            }
            let g = (level(snr) / pn).sqrt();
            (n.iter().map(|&v| (v as f64 * g) as f32).collect(), g)
        }
        (Some(_), None) => return Err(Error::InvalidConfig("SNR given without a noise signal".into())),
    };

    let mixture = (0..len)
        .map(|i| t[i] + interferer_sig[i] + noise_sig[i])
        .collect();
    Ok(MixedScene {
        mixture,
        target: t,
        interferer: interferer_sig,
        noise: noise_sig,
        noise_gain,
        interferer_gain,
    })
}

/// Sampling ranges for random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRanges {
    pub room_min: Point,
    pub room_max: Point,
    pub absorption: (f64, f64),
    pub max_order: usize,
    pub snr_db: (f64, f64),
    pub sir_db: (f64, f64),
}

impl SceneRanges {
    pub fn demo() -> Self {
        SceneRanges {
            room_min: [3.0, 3.0, 2.5],
            room_max: [8.0, 6.0, 3.5],
            absorption: (0.3, 0.8),
            max_order: 6,
            snr_db: (0.0, 20.0),
            sir_db: (-5.0, 10.0),
        }
    }
}

/// Draws a scene; positions are sampled independently of each other.
pub fn sample_scene(ranges: &SceneRanges, scenario: Scenario, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let dims: Point = std::array::from_fn(|a| uniform(ranges.room_min[a], ranges.room_max[a]));
    let absorption = uniform(ranges.absorption.0, ranges.absorption.1);
    let mut point = || -> Point { std::array::from_fn(|a| uniform(0.1 * dims[a], 0.9 * dims[a])) };
    let mic = point();
    let target = point();
    let interferer = point();
    let noise = point();
    let snr = uniform(ranges.snr_db.0, ranges.snr_db.1);
    let sir = uniform(ranges.sir_db.0, ranges.sir_db.1);
    SceneSpec {
        scenario,
        room: RoomSpec::new(dims, absorption, ranges.max_order),
        mic,
        target,
        interferer: (scenario == Scenario::Ts1).then_some(interferer),
        noise,
        snr_db: Some(snr),
        sir_db: (scenario == Scenario::Ts1).then_some(sir),
        seed,
    }
}

/// Scenario of each of `n` scenes: with a TS1 corpus, exactly
/// `round(n·target_only_fraction)` scenes (chosen by a seeded shuffle) are
/// target-only.
pub fn plan_scenarios(n: usize, corpus: Scenario, target_only_fraction: f64, seed: u64) -> Vec<Scenario> {
    if corpus == Scenario::Ts2 {
        return vec![Scenario::Ts2; n];
    }
    let k = ((n as f64) * target_only_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut plan: Vec<Scenario> = (0..n)
        .map(|i| if i < k { Scenario::Ts2 } else { Scenario::Ts1 })
        .collect();
    plan.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    plan
}

/// Speech-like stand-in: a harmonic tone with a drifting pitch under a
/// syllable-rate envelope with pauses.
pub fn synth_speech(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = SAMPLE_RATE as f64;
    let f0_base = rng.random_range(100.0..220.0);
    let syllable = (fs * rng.random_range(0.15..0.25)) as usize;
    let mut env = vec![0.0f64; len];
    let mut start = 0;
    while start < len {
        let on = rng.random_range(0.0..1.0) < 0.8 || start == 0;
        let dur = (syllable as f64 * rng.random_range(0.7..1.3)) as usize;
        let amp = if on { rng.random_range(0.4..1.0) } else { 0.0 };
        for i in 0..dur.min(len - start) {
            env[start + i] = amp * (PI * i as f64 / dur as f64).sin();
        }
        start += dur.max(1);
    }
    let vib_rate = rng.random_range(2.0..5.0);
    let mut phase = 0.0f64;
    (0..len)
        .map(|i| {
            let t = i as f64 / fs;
            let f0 = f0_base * (1.0 + 0.08 * (2.0 * PI * vib_rate * t).sin());
            phase += 2.0 * PI * f0 / fs;
            let s: f64 = (1..=12)
                .filter(|&k| k as f64 * f0 < fs / 2.0)
                .map(|k| (k as f64 * phase).sin() / k as f64)
                .sum();
            (0.3 * env[i] * s) as f32
        })
        .collect()
}

/// Low-passed white noise.
pub fn synth_noise(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = 0.0f64;
    (0..len)
        .map(|_| {
            let x: f64 = rng.random_range(-1.0..1.0);
            y = 0.7 * y + 0.3 * x;
            (0.5 * y) as f32
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiMode {
    /// Mouth opening follows the target's short-term energy.
    EnvelopeDriven,
    Blank,
    /// Uniform random pixels.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRoiSpec {
    pub mode: RoiMode,
    /// Fraction of frames with a detected face.
    pub detection_rate: f64,
    pub seed: u64,
}

impl Default for SynthRoiSpec {
    fn default() -> Self {
        SynthRoiSpec {
            mode: RoiMode::EnvelopeDriven,
            detection_rate: 1.0,
            seed: 0,
        }
    }
}

const ROI_BACKGROUND: f32 = 0.55;
const ROI_MOUTH: f32 = 0.1;
const MIN_APERTURE: f64 = 1.0;
const MAX_APERTURE: f64 = 12.0;

fn render_mouth(aperture: f64) -> RoiFrame {
    let c = (ROI_SIZE as f64 - 1.0) / 2.0;
    let half_width = 15.0;
    let mut px = vec![ROI_BACKGROUND; ROI_SIZE * ROI_SIZE];
    for y in 0..ROI_SIZE {
        for x in 0..ROI_SIZE {
            let dx = (x as f64 - c) / half_width;
            let dy = (y as f64 - c) / aperture;
            if dx * dx + dy * dy <= 1.0 {
                px[y * ROI_SIZE + x] = ROI_MOUTH;
            }
        }
    }
    RoiFrame::new(Tensor::new([1, ROI_SIZE, ROI_SIZE], px).expect("roi shape")).expect("valid roi")
}

/// One 25 fps frame per started 40 ms of `target`.
pub fn synth_roi(spec: &SynthRoiSpec, target: &[f32]) -> Vec<RoiFrame> {
    let per = SAMPLES_PER_ROI as usize;
    let count = target.len().div_ceil(per);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut frames: Vec<RoiFrame> = match spec.mode {
        RoiMode::Blank => vec![RoiFrame::blank(); count],
        RoiMode::Noise => (0..count)
            .map(|_| {
                let px = (0..ROI_SIZE * ROI_SIZE).map(|_| rng.random_range(0.0..1.0)).collect();
                RoiFrame::new(Tensor::new([1, ROI_SIZE, ROI_SIZE], px).expect("roi shape")).expect("valid roi")
            })
            .collect(),
        RoiMode::EnvelopeDriven => {
            let rms: Vec<f64> = target
                .chunks(per)
                .map(|c| power(c).sqrt())
                .collect();
            let peak = rms.iter().copied().fold(0.0, f64::max);
            rms.iter()
                .map(|&r| {
                    let level = if peak > 0.0 { r / peak } else { 0.0 };
                    render_mouth(MIN_APERTURE + (MAX_APERTURE - MIN_APERTURE) * level)
                })
                .collect()
        }
    };
    let rate = spec.detection_rate.clamp(0.0, 1.0);
    if rate < 1.0 {
        for (s, second) in frames.chunks_mut(crate::video::ROI_FPS as usize).enumerate() {
            let n = second.len();
            let blanks = (n as f64 * (1.0 - rate) + 1e-9).floor() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9e37_79b9 + s as u64)));
            for &i in &idx[..blanks] {
                second[i] = RoiFrame::blank();
            }
        }
    }
    frames
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_path_delay() {
        let room = RoomSpec::new([10.0, 10.0, 10.0], 0.5, 0);
        let h = image_method_rir(&room, &[1.0, 5.0, 5.0], &[4.4, 5.0, 5.0]).unwrap();
        let peak = h
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        assert_eq!(peak, 160);
        assert_eq!(h.iter().filter(|v| v.abs() > 1e-6 * h[160]).count(), 1);
    }

    #[test]
    fn full_absorption_leaves_direct_path() {
        let (src, mic) = ([1.0, 1.2, 1.5], [3.0, 2.0, 1.0]);
        let anechoic = image_method_rir(&RoomSpec::new([5.0, 4.0, 3.0], 1.0, 0), &src, &mic).unwrap();
        let full = image_method_rir(&RoomSpec::new([5.0, 4.0, 3.0], 1.0, 5), &src, &mic).unwrap();
        assert_eq!(&full[..anechoic.len()], &anechoic[..]);
        assert!(full[anechoic.len()..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn outside_positions_rejected() {
        let room = RoomSpec::new([2.0, 2.0, 2.0], 0.5, 1);
        assert!(matches!(
            image_method_rir(&room, &[2.5, 1.0, 1.0], &[1.0, 1.0, 1.0]),
            Err(Error::PositionOutOfRoom(_))
        ));
    }

    #[test]
    fn scenario_plan_counts() {
        let plan = plan_scenarios(10, Scenario::Ts1, 0.2, 7);
        assert_eq!(plan.iter().filter(|s| **s == Scenario::Ts2).count(), 2);
        assert_eq!(plan, plan_scenarios(10, Scenario::Ts1, 0.2, 7));
    }

    #[test]
    fn roi_modes() {
        let silent = vec![0.0; 16000];
        let blank = synth_roi(&SynthRoiSpec { mode: RoiMode::Blank, ..Default::default() }, &silent);
        assert_eq!(blank.len(), 25);
        assert!(blank.iter().all(|f| f.is_blank()));
        let closed = synth_roi(&SynthRoiSpec::default(), &silent);
        assert!(closed.iter().all(|f| *f == closed[0] && !f.is_blank()));
        let speech = synth_speech(32000, 1);
        let spec = SynthRoiSpec {
            detection_rate: 0.5,
            seed: 9,
            ..Default::default()
        };
        let a = synth_roi(&spec, &speech);
        for second in a.chunks(25) {
            assert_eq!(second.iter().filter(|f| f.is_blank()).count(), 12);
        }
        assert_eq!(a, synth_roi(&spec, &speech));
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let x = synth_noise(300, 1);
        let h = synth_noise(40, 2);
        let y = convolve(&x, &h, 339);
        for n in [0, 17, 200, 338] {
            let direct: f64 = (0..h.len())
                .filter(|&k| k <= n && n - k < x.len())
                .map(|k| h[k] as f64 * x[n - k] as f64)
                .sum();
            assert!((y[n] as f64 - direct).abs() < 1e-5);
        }
    }
}
