//! Causal frame-by-frame execution with per-session state.

use std::collections::VecDeque;
use std::time::Instant;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{Model, NetState, StageTimes};
use crate::nn::Ctx;
use crate::tensor::Tensor;
use crate::video::{RoiFrame, TimedRoi};

/// Sliding-window framer: buffers input and hands out spans that contain
/// whole frames.
#[derive(Clone, Debug)]
pub struct Framer {
    window: usize,
    hop: usize,
    /// Samples from `next_frame · hop` onward.
    pending: Vec<f32>,
    next_frame: u64,
    received: u64,
}

/// Consecutive frames starting at `first_frame`, as one contiguous span of
/// `(frames − 1)·hop + window` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSpan {
    pub first_frame: u64,
    pub frames: usize,
    pub samples: Vec<f32>,
}

impl Framer {
    pub fn new(window: usize, hop: usize) -> Self {
        Framer {
            window,
            hop,
            pending: Vec::with_capacity(window),
            next_frame: 0,
            received: 0,
        }
    }

    pub fn frames_emitted(&self) -> u64 {
        self.next_frame
    }

    pub fn samples_received(&self) -> u64 {
        self.received
    }

    pub fn buffered(&self) -> usize {
        self.pending.len()
    }

    /// Buffers `x`; returns every frame completed by it.
    pub fn push(&mut self, x: &[f32]) -> Option<FrameSpan> {
        self.pending.extend_from_slice(x);
        self.received += x.len() as u64;
        self.take_frames()
    }

    fn take_frames(&mut self) -> Option<FrameSpan> {
        if self.pending.len() < self.window {
            return None;
        }
        let frames = (self.pending.len() - self.window) / self.hop + 1;
        let span = (frames - 1) * self.hop + self.window;
        let samples = self.pending[..span].to_vec();
        self.pending.drain(..frames * self.hop);
        let first_frame = self.next_frame;
        self.next_frame += frames as u64;
        Some(FrameSpan {
            first_frame,
            frames,
            samples,
        })
    }

    /// Zero-pads a final frame if buffered input is not yet covered by any
    /// emitted frame.
    pub fn finish(&mut self) -> Option<FrameSpan> {
        let covered = if self.next_frame == 0 {
            0
        } else {
            self.window - self.hop
        };
        if self.pending.len() <= covered {
            return None;
        }
        self.pending.resize(self.window, 0.0);
        self.take_frames()
    }

    pub fn reset(&mut self) {
        self.pending.clear();
        self.next_frame = 0;
        self.received = 0;
    }
}

/// Streaming inference over one audio-visual stream.
pub struct Session<'m> {
    model: &'m Model,
    framer: Framer,
    state: NetState<f32>,
    /// Overlap-add partial sums for the `window − hop` samples after the
    /// last released one.
    ola: Vec<f32>,
    bias: f32,
    blank: Option<Tensor<f32>>,
    current_video: Option<Tensor<f32>>,
    queued_video: VecDeque<(u64, Tensor<f32>)>,
    last_roi: Option<u64>,
    poisoned: Option<String>,
    finished: bool,
    times: StageTimes,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model) -> Result<Self> {
        let cfg = model.cfg();
        let blank = if cfg.has_video() {
            let tape = Tape::inference();
            let cx = Ctx::new(&tape, &model.params);
            Some(model.net.blank_feature(&cx)?.into_value())
        } else {
            None
        };
        Ok(Session {
            model,
            framer: Framer::new(cfg.window, cfg.hop),
            state: model.net.initial_state(),
            ola: vec![0.0; cfg.window - cfg.hop],
            bias: model.params.get(model.net.decoder.bias).item(),
            current_video: blank.clone(),
            blank,
            queued_video: VecDeque::new(),
            last_roi: None,
            poisoned: None,
            finished: false,
            times: StageTimes::default(),
        })
    }

    /// Restores the initial state; timers are kept.
    pub fn reset(&mut self) {
        let cfg = self.model.cfg();
        self.framer.reset();
        self.state = self.model.net.initial_state();
        self.ola = vec![0.0; cfg.window - cfg.hop];
        self.current_video = self.blank.clone();
        self.queued_video.clear();
        self.last_roi = None;
        self.poisoned = None;
        self.finished = false;
    }

    pub fn stage_times(&self) -> &StageTimes {
        &self.times
    }

    pub fn state(&self) -> &NetState<f32> {
        &self.state
    }

    fn check_usable(&self) -> Result<()> {
        if let Some(msg) = &self.poisoned {
            return Err(Error::SessionPoisoned(msg.clone()));
        }
        if self.finished {
            return Err(Error::AlreadyFinished);
        }
        Ok(())
    }

    /// Feeds audio and any ROI frames whose timestamps (in samples) fall in
    /// this chunk; returns every output sample that is now final.
    pub fn push(&mut self, chunk: &[f32], rois: &[TimedRoi]) -> Result<Vec<f32>> {
        self.check_usable()?;
        self.queue_rois(rois)?;
        let out = match self.framer.push(chunk) {
            Some(span) => self.process(span)?,
            None => Vec::new(),
        };
        Ok(out)
    }

    /// Completes the final frame with zeros if needed and releases the
    /// overlap-add tail. The session accepts no input afterwards.
    pub fn flush(&mut self) -> Result<Vec<f32>> {
        self.check_usable()?;
        self.finished = true;
        if self.framer.samples_received() == 0 {
            return Ok(Vec::new());
        }
        let mut out = match self.framer.finish() {
            Some(span) => self.process(span)?,
            None => Vec::new(),
        };
        out.extend(self.ola.iter().map(|&v| v + self.bias));
        self.ola.iter_mut().for_each(|v| *v = 0.0);
        Ok(out)
    }

    fn queue_rois(&mut self, rois: &[TimedRoi]) -> Result<()> {
        if rois.is_empty() {
            return Ok(());
        }
        if self.blank.is_none() {
            return Err(Error::InvalidConfig(
                "ROI frames supplied to an audio-only model".into(),
            ));
        }
        let mut last = self.last_roi;
        for r in rois {
            if let Some(prev) = last {
                if r.timestamp < prev {
                    return Err(Error::TimestampRegression {
                        last: prev,
                        got: r.timestamp,
                    });
                }
            }
            last = Some(r.timestamp);
        }
        let t0 = Instant::now();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &self.model.params);
        let frames: Vec<&RoiFrame> = rois.iter().map(|r| &r.frame).collect();
        let feats = self.model.net.encode_video(&cx, &frames)?.into_value();
        let d = feats.shape()[1];
        for (i, r) in rois.iter().enumerate() {
            let row = Tensor::new([1, d], feats.data()[i * d..(i + 1) * d].to_vec())?;
            self.queued_video.push_back((r.timestamp, row));
        }
        self.times.video += t0.elapsed();
        self.last_roi = last;
        Ok(())
    }

    fn video_rows(&mut self, first_frame: u64, frames: usize) -> Result<Option<Tensor<f32>>> {
        let Some(current) = self.current_video.as_ref() else {
            return Ok(None);
        };
        let d = current.len();
        let hop = self.model.cfg().hop as u64;
        let mut rows = Vec::with_capacity(frames * d);
        for f in first_frame..first_frame + frames as u64 {
            let t = f * hop;
            while self.queued_video.front().is_some_and(|(ts, _)| *ts <= t) {
                let (_, feat) = self.queued_video.pop_front().expect("front exists");
                self.current_video = Some(feat);
            }
            rows.extend_from_slice(self.current_video.as_ref().expect("set above").data());
        }
        Ok(Some(Tensor::new([frames, d], rows)?))
    }

    fn process(&mut self, span: FrameSpan) -> Result<Vec<f32>> {
        let net = &self.model.net;
        let (window, hop) = (net.cfg.window, net.cfg.hop);
        let video = self.video_rows(span.first_frame, span.frames)?;
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &self.model.params);
        let t0 = Instant::now();
        let audio = cx.constant(Tensor::from_vec(span.samples));
        let enc = net.encode_audio(&cx, &audio)?;
        self.times.encoder += t0.elapsed();
        let video = video.map(|v| cx.constant(v));
        let mask = net.predict_mask(&cx, &enc, video.as_ref(), &mut self.state, &mut self.times)?;
        let t0 = Instant::now();
        let contrib = net.decode_frames(&cx, &enc, &mask)?.into_value();
        let mut out = Vec::with_capacity(span.frames * hop);
        let mut acc = vec![0.0f32; window];
        for row in contrib.data().chunks(window) {
            acc[..window - hop].copy_from_slice(&self.ola);
            acc[window - hop..].fill(0.0);
            for (a, &c) in acc.iter_mut().zip(row) {
                *a += c;
            }
            out.extend(acc[..hop].iter().map(|&v| v + self.bias));
            self.ola.copy_from_slice(&acc[hop..]);
        }
        self.times.decoder += t0.elapsed();
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            let frame = span.first_frame + (i / hop) as u64;
            let msg = format!("non-finite output in frame {frame}");
            self.poisoned = Some(msg.clone());
            return Err(Error::SessionPoisoned(msg));
        }
        Ok(out)
    }
}

/// Streams `audio` through a fresh session in chunks of the given sizes
/// (cycled), delivering 25 fps ROI frames with the chunk containing their
/// timestamp, then flushes.
pub fn stream_chunked(
    model: &Model,
    audio: &[f32],
    rois: &[RoiFrame],
    chunk_sizes: &[usize],
) -> Result<Vec<f32>> {
    let mut session = Session::new(model)?;
    let timed: Vec<TimedRoi> = crate::video::roi_timestamps(rois.len())
        .into_iter()
        .zip(rois)
        .map(|(timestamp, frame)| TimedRoi {
            timestamp,
            frame: frame.clone(),
        })
        .collect();
    let mut out = Vec::with_capacity(audio.len());
    let (mut pos, mut next_roi) = (0usize, 0usize);
    let mut sizes = chunk_sizes.iter().copied().filter(|&s| s > 0).cycle();
    while pos < audio.len() {
        let n = sizes.next().unwrap_or(audio.len()).min(audio.len() - pos);
        let end = (pos + n) as u64;
        let start_roi = next_roi;
        while next_roi < timed.len() && timed[next_roi].timestamp < end {
            next_roi += 1;
        }
        out.extend(session.push(&audio[pos..pos + n], &timed[start_roi..next_roi])?);
        pos += n;
    }
    if next_roi < timed.len() {
        session.queue_rois(&timed[next_roi..])?;
    }
    out.extend(session.flush()?);
    Ok(out)
}

/// Runs the model offline on `base` and on `base` with `delta` added at
/// `perturb_at`; returns the first output index that differs.
pub fn causality_probe(
    model: &Model,
    base: &[f32],
    rois: &[RoiFrame],
    perturb_at: usize,
    delta: f32,
) -> Result<Option<usize>> {
    let mut perturbed = base.to_vec();
    perturbed[perturb_at] += delta;
    let a = model.enhance(base, rois)?;
    let b = model.enhance(&perturbed, rois)?;
    Ok(first_difference(&a, &b))
}

/// Like [`causality_probe`] but replaces ROI frame `index` instead.
pub fn roi_causality_probe(
    model: &Model,
    audio: &[f32],
    rois: &[RoiFrame],
    index: usize,
    replacement: RoiFrame,
) -> Result<Option<usize>> {
    let mut changed = rois.to_vec();
    changed[index] = replacement;
    let a = model.enhance(audio, rois)?;
    let b = model.enhance(audio, &changed)?;
    Ok(first_difference(&a, &b))
}

fn first_difference(a: &[f32], b: &[f32]) -> Option<usize> {
    a.iter().zip(b).position(|(x, y)| x.to_bits() != y.to_bits())
}
