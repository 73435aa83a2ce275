//! File formats: 16 kHz mono WAV, ROI frame streams, weight checkpoints and
//! the JSON run configuration. All binary layouts are little-endian.
//!
//! Weight file:
//! `"AVE3" | version u32 | count u32 | count × entry`, where an entry is
//! `name_len u16 | name utf-8 | rank u8 | dims u32×rank | f32 data`.
//! LSTM matrices store their gate rows in (i, f, g, o) order.
//!
//! ROI file:
//! `"ROI0" | fps u16 | count u32 | width u16 | height u16 | count × frame`,
//! where a frame is a blank-flag byte followed by `width·height` u8 pixels.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::sim::{RoiMode, Scenario, SceneRanges, SAMPLE_RATE};
use crate::tensor::Tensor;
use crate::video::{RoiFrame, ROI_FPS, ROI_SIZE};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"AVE3";
pub const WEIGHTS_VERSION: u32 = 1;
pub const ROI_MAGIC: [u8; 4] = *b"ROI0";

// ---------------------------------------------------------------- WAV

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WavAudio {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

fn hound_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => Error::UnexpectedEof,
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => Error::CorruptHeader(msg.to_string()),
        hound::Error::Unsupported => Error::UnsupportedFormat("codec not supported".into()),
        other => Error::CorruptHeader(other.to_string()),
    }
}

/// Reads a 16 kHz mono PCM16 or float32 file. PCM16 is scaled by 1/32768.
pub fn wav_read(path: impl AsRef<Path>) -> Result<WavAudio> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| hound_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!("{} channels, expected mono", spec.channels)));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>(),
        (hound::SampleFormat::Float, 32) => reader.into_samples::<f32>().collect(),
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!("{bits}-bit {fmt:?}")));
        }
    }
    .map_err(|e| hound_error(path, e))?;
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedSampleRate(spec.sample_rate));
    }
    Ok(WavAudio {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes mono 16 kHz audio. PCM16 rounds and saturates.
pub fn wav_write(path: impl AsRef<Path>, samples: &[f32], encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| hound_error(path, e))?;
    for &s in samples {
        let r = match encoding {
            WavEncoding::Pcm16 => w.write_sample((s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16),
            WavEncoding::Float32 => w.write_sample(s),
        };
        r.map_err(|e| hound_error(path, e))?;
    }
    w.finalize().map_err(|e| hound_error(path, e))
}

// ---------------------------------------------------------------- binary helpers

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::UnexpectedEof)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::UnexpectedEof)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != expected {
            return Err(Error::BadMagic {
                expected,
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling file and a rename, so readers never
/// observe a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

// ---------------------------------------------------------------- ROI

pub fn encode_roi(frames: &[RoiFrame]) -> Vec<u8> {
    let px = ROI_SIZE * ROI_SIZE;
    let mut out = Vec::with_capacity(14 + frames.len() * (px + 1));
    out.extend_from_slice(&ROI_MAGIC);
    out.extend_from_slice(&(ROI_FPS as u16).to_le_bytes());
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ROI_SIZE as u16).to_le_bytes());
    out.extend_from_slice(&(ROI_SIZE as u16).to_le_bytes());
    for f in frames {
        out.push(f.is_blank() as u8);
        out.extend(f.pixels().data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    out
}

pub fn decode_roi(bytes: &[u8]) -> Result<Vec<RoiFrame>> {
    let mut c = Cursor::new(bytes);
    let magic = c.take(4)?;
    if magic != ROI_MAGIC {
        // later revisions of the format bump the trailing digit
        if magic[..3] == ROI_MAGIC[..3] && magic[3].is_ascii_digit() {
            return Err(Error::UnsupportedVersion((magic[3] - b'0') as u32));
        }
        return Err(Error::BadMagic {
            expected: ROI_MAGIC,
            found: magic.to_vec(),
        });
    }
    let fps = c.u16()?;
    if fps as u32 != ROI_FPS {
        return Err(Error::UnsupportedFormat(format!("ROI stream at {fps} fps, expected {ROI_FPS}")));
    }
    let count = c.u32()? as usize;
    let (w, h) = (c.u16()? as usize, c.u16()? as usize);
    if (w, h) != (ROI_SIZE, ROI_SIZE) {
        return Err(Error::BadFrameShape(vec![1, h, w]));
    }
    let mut frames = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let blank = match c.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::CorruptHeader(format!("frame {i}: blank flag {b}"))),
        };
        let px = c.take(w * h)?;
        if blank {
            if px.iter().any(|&p| p != 0) {
                return Err(Error::CorruptHeader(format!("frame {i}: blank frame with nonzero pixels")));
            }
            frames.push(RoiFrame::blank());
        } else {
            let data = px.iter().map(|&p| p as f32 / 255.0).collect();
            frames.push(RoiFrame::new(Tensor::new([1, h, w], data)?)?);
        }
    }
    if !c.done() {
        return Err(Error::CorruptHeader("trailing bytes after last frame".into()));
    }
    Ok(frames)
}

pub fn roi_write(path: impl AsRef<Path>, frames: &[RoiFrame]) -> Result<()> {
    write_atomic(path, &encode_roi(frames))
}

pub fn roi_read(path: impl AsRef<Path>) -> Result<Vec<RoiFrame>> {
    decode_roi(&read_file(path.as_ref())?)
}

// ---------------------------------------------------------------- weights

/// One parsed checkpoint entry.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub tensor: Tensor<f32>,
}

pub fn encode_weights(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * store.numel());
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a whole checkpoint without touching any model.
pub fn decode_weights(bytes: &[u8]) -> Result<Vec<WeightEntry>> {
    let mut c = Cursor::new(bytes);
    c.magic(WEIGHTS_MAGIC)?;
    let version = c.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = c.u32()? as usize;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::CorruptHeader("tensor name is not utf-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateTensor(name));
        }
        let rank = c.u8()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::CorruptHeader(format!("tensor '{name}' is too large")))?;
        let raw = c.take(n.checked_mul(4).ok_or(Error::UnexpectedEof)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.push(WeightEntry {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    if !c.done() {
        return Err(Error::CorruptHeader("trailing bytes after last tensor".into()));
    }
    Ok(entries)
}

fn describe(name: &str, shape: &[usize]) -> String {
    format!("{name} {shape:?}")
}

/// Checks `entries` against `store` in registration order and, only if
/// every tensor fits, copies them in.
pub fn apply_weights(store: &mut ParamStore<f32>, entries: Vec<WeightEntry>) -> Result<()> {
    let expected: Vec<_> = store.iter().map(|(id, name, t)| (id, name.to_string(), t.shape().to_vec())).collect();
    for (i, (_, name, shape)) in expected.iter().enumerate() {
        let Some(e) = entries.get(i) else {
            return Err(Error::MissingTensor(name.clone()));
        };
        if e.name != *name {
            if store.id_of(&e.name).is_none() {
                return Err(Error::UnknownTensor(e.name.clone()));
            }
            return Err(Error::TensorMismatch {
                name: name.clone(),
                expected: describe(name, shape),
                found: describe(&e.name, e.tensor.shape()),
            });
        }
        if e.tensor.shape() != &shape[..] {
            return Err(Error::TensorMismatch {
                name: name.clone(),
                expected: describe(name, shape),
                found: describe(&e.name, e.tensor.shape()),
            });
        }
    }
    if let Some(extra) = entries.get(expected.len()) {
        return Err(Error::UnknownTensor(extra.name.clone()));
    }
    for ((id, ..), e) in expected.into_iter().zip(entries) {
        store.set(id, e.tensor)?;
    }
    Ok(())
}

pub fn weights_save(path: impl AsRef<Path>, store: &ParamStore<f32>) -> Result<()> {
    write_atomic(path, &encode_weights(store))
}

/// Loads a checkpoint; on any error `store` is left untouched.
pub fn weights_load(path: impl AsRef<Path>, store: &mut ParamStore<f32>) -> Result<()> {
    let entries = decode_weights(&read_file(path.as_ref())?)?;
    apply_weights(store, entries)
}

// ---------------------------------------------------------------- run config

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiOptions {
    pub mode: RoiMode,
    pub detection_rate: f64,
}

impl Default for RoiOptions {
    fn default() -> Self {
        RoiOptions {
            mode: RoiMode::EnvelopeDriven,
            detection_rate: 1.0,
        }
    }
}

/// Corpus generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateOptions {
    pub output_dir: PathBuf,
    pub scenes: usize,
    /// `TS1` mixes interferers into all but `target_only_fraction` of the
    /// scenes; `TS2` never does.
    pub corpus: Scenario,
    #[serde(default = "default_target_only")]
    pub target_only_fraction: f64,
    pub duration_s: f64,
    pub ranges: SceneRanges,
    #[serde(default)]
    pub roi: RoiOptions,
    /// Source WAVs; synthetic stand-ins are used when empty.
    #[serde(default)]
    pub speech: Vec<PathBuf>,
    #[serde(default)]
    pub noise: Vec<PathBuf>,
}

fn default_target_only() -> f64 {
    0.2
}

impl SimulateOptions {
    pub fn demo(output_dir: impl Into<PathBuf>, corpus: Scenario, scenes: usize) -> Self {
        SimulateOptions {
            output_dir: output_dir.into(),
            scenes,
            corpus,
            target_only_fraction: default_target_only(),
            duration_s: 1.0,
            ranges: SceneRanges::demo(),
            roi: RoiOptions::default(),
            speech: Vec::new(),
            noise: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Scene used when no mixture is supplied.
    pub snr_db: f64,
    pub duration_s: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 200,
            lr: 1e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            snr_db: 0.0,
            duration_s: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchOptions {
    pub runs: usize,
    pub warmup: usize,
    pub duration_s: f64,
    /// Streaming chunk in samples; `None` pushes the whole clip at once.
    pub chunk: Option<usize>,
    pub threads: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            runs: 100,
            warmup: 3,
            duration_s: 3.0,
            chunk: None,
            threads: 1,
        }
    }
}

/// Top-level JSON document: a model (preset name or explicit config) plus
/// optional task sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchOptions>,
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Result<Self> {
        ModelConfig::preset(name)?;
        Ok(RunConfig {
            preset: Some(name.to_string()),
            model: None,
            seed: 0,
            weights: None,
            simulate: None,
            train: None,
            bench: None,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.model_config()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    /// Either the named preset or the explicit model, never both.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = match (&self.preset, &self.model) {
            (Some(p), None) => ModelConfig::preset(p)?,
            (None, Some(m)) => m.clone(),
            (Some(_), Some(_)) => {
                return Err(Error::InvalidConfig("give either `preset` or `model`, not both".into()))
            }
            (None, None) => return Err(Error::InvalidConfig("missing `preset` or `model`".into())),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// A preset name, a path to a JSON run config, or a path to a bare
    /// model config.
    pub fn resolve(arg: &str) -> Result<Self> {
        if ModelConfig::preset(arg).is_ok() {
            return Self::from_preset(arg);
        }
        let path = Path::new(arg);
        if !path.exists() {
            return Err(Error::InvalidConfig(format!("'{arg}' is neither a preset nor a file")));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match Self::from_json(&text) {
            Ok(c) => Ok(c),
            Err(run_err) => match serde_json::from_str::<ModelConfig>(&text) {
                Ok(m) => {
                    m.validate()?;
                    Ok(RunConfig {
                        model: Some(m),
                        ..Self::from_preset("ao-e3net")?
                    }
                    .without_preset())
                }
                Err(_) => Err(run_err),
            },
        }
    }

    fn without_preset(mut self) -> Self {
        self.preset = None;
        self
    }
}
