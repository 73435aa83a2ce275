//! The enhancement network: learned conv encoder, masking stack with dense
//! connections and audio-visual fusion, transposed-conv decoder.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    Conv1d, ConvTranspose1d, Ctx, FullyConnected, Init, LayerNorm, LstmLayer, LstmState, Module,
    ProjectionBlock, PRELU_INIT,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::video::{roi_timestamps, upsample_replicate, RoiFrame, TrunkPlan, VideoPath};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Audio only.
    None,
    /// One concatenation block before the first audio LSTM block, fed by
    /// the output of the video LSTM stack.
    SingleConcat,
    /// A concatenation block before every (audio, video) block pair and one
    /// after the last pair.
    MultistageConcat,
    /// Like `MultistageConcat` with gating-and-summation blocks.
    MultistageGs,
}

impl Fusion {
    pub fn is_multistage(self) -> bool {
        matches!(self, Fusion::MultistageConcat | Fusion::MultistageGs)
    }
}

/// Residual scheme of LSTM and fusion blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connection {
    /// `LN(f(x) + x)`
    Skip,
    /// `X ← X + x; LN(f(x) + X)`
    Dense,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub audio_features: usize,
    pub hidden: usize,
    pub fc_hidden: usize,
    pub audio_lstm_blocks: usize,
    pub video_lstm_blocks: usize,
    pub dense: bool,
    pub fusion: Fusion,
    pub window: usize,
    pub hop: usize,
    pub trunk: TrunkPlan,
}

/// Preset names accepted by [`ModelConfig::preset`].
pub const PRESETS: &[&str] = &[
    "ao-e3net",
    "naive-av",
    "naive-av-1v",
    "naive-av-4v",
    "av-dense",
    "av-dense-1v",
    "av-dense-4v",
    "av-multistage-concat",
    "av-gs",
    "toy-ao",
    "toy-naive-av",
    "toy-multistage-concat",
    "toy-gs",
    "toy-gs-wide",
];

impl ModelConfig {
    fn base(fusion: Fusion, dense: bool, video_lstm_blocks: usize) -> Self {
        ModelConfig {
            audio_features: 2048,
            hidden: 512,
            fc_hidden: 1024,
            audio_lstm_blocks: 4,
            video_lstm_blocks,
            dense,
            fusion,
            window: 320,
            hop: 160,
            trunk: TrunkPlan::shufflenet_v2_half(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "ao-e3net" => Self::base(Fusion::None, false, 0),
            "naive-av" => Self::base(Fusion::SingleConcat, false, 0),
            "naive-av-1v" => Self::base(Fusion::SingleConcat, false, 1),
            "naive-av-4v" => Self::base(Fusion::SingleConcat, false, 4),
            "av-dense" => Self::base(Fusion::SingleConcat, true, 0),
            "av-dense-1v" => Self::base(Fusion::SingleConcat, true, 1),
            "av-dense-4v" => Self::base(Fusion::SingleConcat, true, 4),
            "av-multistage-concat" => Self::base(Fusion::MultistageConcat, true, 4),
            "av-gs" => Self::base(Fusion::MultistageGs, true, 4),
            "toy-ao" => Self::base(Fusion::None, false, 0).shrunk(),
            "toy-naive-av" => Self::base(Fusion::SingleConcat, false, 0).shrunk(),
            "toy-multistage-concat" => Self::base(Fusion::MultistageConcat, true, 4).shrunk(),
            "toy-gs" => Self::base(Fusion::MultistageGs, true, 4).shrunk(),
            "toy-gs-wide" => Self::base(Fusion::MultistageGs, true, 4).scaled(512, 32, 64, 2),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown preset '{name}' (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    /// Same topology at gradient-check scale: 16 encoder features, width 8,
    /// at most two blocks per stack, a tiny trunk.
    pub fn shrunk(&self) -> Self {
        self.scaled(16, 8, 16, 2)
    }

    /// Same topology with the given widths and block cap.
    pub fn scaled(&self, audio_features: usize, hidden: usize, fc_hidden: usize, max_blocks: usize) -> Self {
        let audio = self.audio_lstm_blocks.min(max_blocks);
        let video = if self.fusion.is_multistage() {
            audio
        } else {
            self.video_lstm_blocks.min(max_blocks)
        };
        ModelConfig {
            audio_features,
            hidden,
            fc_hidden,
            audio_lstm_blocks: audio,
            video_lstm_blocks: video,
            trunk: TrunkPlan::tiny(2 * hidden),
            ..self.clone()
        }
    }

    pub fn connection(&self) -> Connection {
        if self.dense {
            Connection::Dense
        } else {
            Connection::Skip
        }
    }

    pub fn has_video(&self) -> bool {
        self.fusion != Fusion::None
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.audio_features == 0 || self.hidden == 0 || self.fc_hidden == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.hop == 0 || self.window < self.hop || !self.window.is_multiple_of(self.hop) {
            return bad(format!(
                "window ({}) must be a positive multiple of hop ({})",
                self.window, self.hop
            ));
        }
        if self.fusion.is_multistage() && self.video_lstm_blocks != self.audio_lstm_blocks {
            return bad(format!(
                "multistage fusion pairs audio and video blocks: {} audio vs {} video",
                self.audio_lstm_blocks, self.video_lstm_blocks
            ));
        }
        if self.fusion == Fusion::None && self.video_lstm_blocks != 0 {
            return bad("an audio-only model cannot have video LSTM blocks".into());
        }
        if self.has_video() {
            self.trunk.validate()?;
        }
        Ok(())
    }
}

/// Running dense summation variable (dense sum A or V). Starts empty, i.e.
/// zero, for every frame.
pub struct DenseSum<'t, T: Scalar> {
    value: Option<Var<'t, T>>,
}

impl<T: Scalar> Default for DenseSum<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'t, T: Scalar> DenseSum<'t, T> {
    pub fn new() -> Self {
        DenseSum { value: None }
    }

    /// `X ← X + x`, returning the new `X`.
    pub fn accumulate(&mut self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let next = match &self.value {
            Some(v) => v.add(x)?,
            None => x.clone(),
        };
        self.value = Some(next.clone());
        Ok(next)
    }

    pub fn value(&self) -> Option<&Var<'t, T>> {
        self.value.as_ref()
    }
}

/// Skip: `LN(f + x)`. Dense: `X ← X + x; LN(f + X)`.
pub fn dense_residual<'t, T: Scalar>(
    cx: &Ctx<'t, T>,
    norm: &LayerNorm,
    f_out: &Var<'t, T>,
    x: &Var<'t, T>,
    sum: &mut DenseSum<'t, T>,
    connection: Connection,
) -> Result<Var<'t, T>> {
    let anchor = match connection {
        Connection::Skip => x.clone(),
        Connection::Dense => sum.accumulate(x)?,
    };
    norm.forward(cx, &f_out.add(&anchor)?)
}

/// FC → PReLU → FC → LSTM, followed by the residual and a layer norm.
#[derive(Clone, Debug)]
pub struct LstmBlock {
    pub fc1: FullyConnected,
    pub alpha: ParamId,
    pub fc2: FullyConnected,
    pub lstm: LstmLayer,
    pub norm: LayerNorm,
}

impl LstmBlock {
    pub fn new(init: &mut Init, name: &str, dim: usize, fc_hidden: usize) -> Result<Self> {
        Ok(LstmBlock {
            fc1: FullyConnected::new(init, &format!("{name}.fc1"), dim, fc_hidden)?,
            alpha: init.constant(&format!("{name}.alpha"), &[1], PRELU_INIT)?,
            fc2: FullyConnected::new(init, &format!("{name}.fc2"), fc_hidden, dim)?,
            lstm: LstmLayer::new(init, &format!("{name}.lstm"), dim, dim)?,
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim)?,
        })
    }

    /// The block body without the residual: `[F×d] → [F×d]`. Advances
    /// `state` to the last frame.
    pub fn transform<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        x: &Var<'t, T>,
        state: &mut LstmState<T>,
    ) -> Result<Var<'t, T>> {
        let h = self.fc1.forward(cx, x)?.prelu(&cx.p(self.alpha))?;
        let h = self.fc2.forward(cx, &h)?;
        let (y, hn, cn) = self.lstm.forward_seq(
            cx,
            &h,
            cx.constant(state.h.clone()),
            cx.constant(state.c.clone()),
        )?;
        *state = LstmState {
            h: hn.into_value(),
            c: cn.into_value(),
        };
        Ok(y)
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        x: &Var<'t, T>,
        state: &mut LstmState<T>,
        sum: &mut DenseSum<'t, T>,
        connection: Connection,
    ) -> Result<Var<'t, T>> {
        let f = self.transform(cx, x, state)?;
        dense_residual(cx, &self.norm, &f, x, sum, connection)
    }
}

impl Module for LstmBlock {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.fc1.param_ids();
        v.push(self.alpha);
        v.extend(self.fc2.param_ids());
        v.extend(self.lstm.param_ids());
        v.extend(self.norm.param_ids());
        v
    }
}

/// Concatenation → projection → residual anchored on the audio input.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub proj: ProjectionBlock,
    pub norm: LayerNorm,
}

impl ConcatFusion {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        Ok(ConcatFusion {
            proj: ProjectionBlock::new(init, &format!("{name}.proj"), 2 * dim, dim)?,
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim)?,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        fa: &Var<'t, T>,
        fv: &Var<'t, T>,
        sum: &mut DenseSum<'t, T>,
        connection: Connection,
    ) -> Result<Var<'t, T>> {
        let f = self.proj.forward(cx, &fa.concat_cols(fv)?)?;
        dense_residual(cx, &self.norm, &f, fa, sum, connection)
    }
}

impl Module for ConcatFusion {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.proj.param_ids();
        v.extend(self.norm.param_ids());
        v
    }
}

/// Gating-and-summation fusion.
#[derive(Clone, Debug)]
pub struct GsFusion {
    pub h: FullyConnected,
    pub g: FullyConnected,
    pub proj: ProjectionBlock,
    pub norm: LayerNorm,
}

impl GsFusion {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        Ok(GsFusion {
            h: FullyConnected::new(init, &format!("{name}.h"), 2 * dim, dim)?,
            g: FullyConnected::new(init, &format!("{name}.g"), dim, dim)?,
            proj: ProjectionBlock::new(init, &format!("{name}.proj"), dim, dim)?,
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim)?,
        })
    }

    /// `σ(g(ReLU(h([fa; fv]))))`
    pub fn gate<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, fa: &Var<'t, T>, fv: &Var<'t, T>) -> Result<Var<'t, T>> {
        let hidden = self.h.forward(cx, &fa.concat_cols(fv)?)?.relu();
        Ok(self.g.forward(cx, &hidden)?.sigmoid())
    }

    /// Gate the audio features, then `X_a ← X_a + fa` and
    /// `LN(proj(G⊙fa) + X_a)`. With skip connections the anchor is `fa`.
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        fa: &Var<'t, T>,
        fv: &Var<'t, T>,
        sum: &mut DenseSum<'t, T>,
        connection: Connection,
    ) -> Result<Var<'t, T>> {
        let gated = self.gate(cx, fa, fv)?.mul(fa)?;
        let anchor = match connection {
            Connection::Dense => sum.accumulate(fa)?,
            Connection::Skip => fa.clone(),
        };
        self.norm.forward(cx, &self.proj.forward(cx, &gated)?.add(&anchor)?)
    }
}

impl Module for GsFusion {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.h.param_ids();
        v.extend(self.g.param_ids());
        v.extend(self.proj.param_ids());
        v.extend(self.norm.param_ids());
        v
    }
}

#[derive(Clone, Debug)]
pub enum FusionBlock {
    Concat(ConcatFusion),
    Gs(GsFusion),
}

impl FusionBlock {
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        fa: &Var<'t, T>,
        fv: &Var<'t, T>,
        sum: &mut DenseSum<'t, T>,
        connection: Connection,
    ) -> Result<Var<'t, T>> {
        match self {
            FusionBlock::Concat(b) => b.forward(cx, fa, fv, sum, connection),
            FusionBlock::Gs(b) => b.forward(cx, fa, fv, sum, connection),
        }
    }
}

impl Module for FusionBlock {
    fn param_ids(&self) -> Vec<ParamId> {
        match self {
            FusionBlock::Concat(b) => b.param_ids(),
            FusionBlock::Gs(b) => b.param_ids(),
        }
    }
}

/// Recurrent state carried between calls: one `(h, c)` per LSTM layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NetState<T: Scalar = f32> {
    pub audio: Vec<LstmState<T>>,
    pub video: Vec<LstmState<T>>,
}

/// Accumulated wall time per pipeline stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTimes {
    pub encoder: Duration,
    pub video: Duration,
    pub audio: Duration,
    pub fusion: Duration,
    pub decoder: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.encoder + self.video + self.audio + self.fusion + self.decoder
    }

    pub fn add(&mut self, other: &StageTimes) {
        self.encoder += other.encoder;
        self.video += other.video;
        self.audio += other.audio;
        self.fusion += other.fusion;
        self.decoder += other.decoder;
    }
}

fn timed<R>(slot: &mut Duration, f: impl FnOnce() -> R) -> R {
    let t0 = Instant::now();
    let r = f();
    *slot += t0.elapsed();
    r
}

/// Layer structure of a model; weights live in a separate [`ParamStore`].
/// Parameters are registered encoder first, then audio blocks, fusion
/// blocks, the video path, mask and decoder.
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub encoder: Conv1d,
    pub encoder_norm: LayerNorm,
    pub encoder_proj: ProjectionBlock,
    pub audio_blocks: Vec<LstmBlock>,
    pub video: Option<VideoPath>,
    pub fusion: Vec<FusionBlock>,
    pub mask: FullyConnected,
    pub decoder: ConvTranspose1d,
    /// Test hook: replace the predicted mask with ones.
    pub force_unit_mask: bool,
}

impl Network {
    pub fn new(cfg: &ModelConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let (n, d) = (cfg.audio_features, cfg.hidden);
        let encoder = Conv1d::new(init, "encoder", 1, n, cfg.window, cfg.hop)?;
        let encoder_norm = LayerNorm::new(init, "encoder.norm", n)?;
        let encoder_proj = ProjectionBlock::new(init, "encoder.proj", n, d)?;
        let audio_blocks = (0..cfg.audio_lstm_blocks)
            .map(|i| LstmBlock::new(init, &format!("audio.block{i}"), d, cfg.fc_hidden))
            .collect::<Result<Vec<_>>>()?;
        let n_fusion = match cfg.fusion {
            Fusion::None => 0,
            Fusion::SingleConcat => 1,
            Fusion::MultistageConcat | Fusion::MultistageGs => cfg.audio_lstm_blocks + 1,
        };
        let fusion = (0..n_fusion)
            .map(|i| {
                let name = format!("fusion{i}");
                Ok(match cfg.fusion {
                    Fusion::MultistageGs => FusionBlock::Gs(GsFusion::new(init, &name, d)?),
                    _ => FusionBlock::Concat(ConcatFusion::new(init, &name, d)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let video = if cfg.has_video() {
            Some(VideoPath::new(init, &cfg.trunk, d, cfg.fc_hidden, cfg.video_lstm_blocks)?)
        } else {
            None
        };
        let mask = FullyConnected::new(init, "mask", d, n)?;
        let decoder = ConvTranspose1d::new(init, "decoder", n, 1, cfg.window, cfg.hop)?;
        Ok(Network {
            cfg: cfg.clone(),
            encoder,
            encoder_norm,
            encoder_proj,
            audio_blocks,
            video,
            fusion,
            mask,
            decoder,
            force_unit_mask: false,
        })
    }

    pub fn initial_state<T: Scalar>(&self) -> NetState<T> {
        let d = self.cfg.hidden;
        NetState {
            audio: vec![LstmState::zeros(d); self.audio_blocks.len()],
            video: vec![LstmState::zeros(d); self.cfg.video_lstm_blocks],
        }
    }

    /// Raw (pre-activation) encoder features `[F × audio_features]`.
    pub fn encode_audio<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, audio: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.encoder.forward_frames(cx, audio)
    }

    fn video_path(&self) -> Result<&VideoPath> {
        self.video
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("audio-only model has no video path".into()))
    }

    /// Projected features of ROI frames `[K × hidden]`.
    pub fn encode_video<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, frames: &[&RoiFrame]) -> Result<Var<'t, T>> {
        self.video_path()?.encode(cx, frames)
    }

    /// Projected feature of a blank frame `[1 × hidden]`.
    pub fn blank_feature<'t, T: Scalar>(&self, cx: &Ctx<'t, T>) -> Result<Var<'t, T>> {
        self.encode_video(cx, &[&RoiFrame::blank()])
    }

    /// Masking network: raw encoder features and frame-aligned video
    /// features (projection outputs) to a mask `[F × audio_features]`.
    pub fn predict_mask<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        enc: &Var<'t, T>,
        video: Option<&Var<'t, T>>,
        state: &mut NetState<T>,
        times: &mut StageTimes,
    ) -> Result<Var<'t, T>> {
        let conn = self.cfg.connection();
        let mut a = timed(&mut times.audio, || {
            let x = self.encoder_norm.forward(cx, &enc.relu())?;
            self.encoder_proj.forward(cx, &x)
        })?;
        let mut sum_a = DenseSum::new();
        match self.cfg.fusion {
            Fusion::None => {
                if video.is_some() {
                    return Err(Error::InvalidConfig("audio-only model given video input".into()));
                }
            }
            Fusion::SingleConcat => {
                let v = video.ok_or_else(|| Error::InvalidConfig("video features required".into()))?;
                let path = self.video_path()?;
                let v = timed(&mut times.video, || {
                    path.lstm_forward(cx, v.clone(), &mut state.video, conn)
                })?;
                a = timed(&mut times.fusion, || self.fusion[0].forward(cx, &a, &v, &mut sum_a, conn))?;
            }
            Fusion::MultistageConcat | Fusion::MultistageGs => {
                let mut v = video
                    .ok_or_else(|| Error::InvalidConfig("video features required".into()))?
                    .clone();
                let path = self.video_path()?;
                let mut sum_v = DenseSum::new();
                for n in 0..self.audio_blocks.len() {
                    a = timed(&mut times.fusion, || self.fusion[n].forward(cx, &a, &v, &mut sum_a, conn))?;
                    a = timed(&mut times.audio, || {
                        self.audio_blocks[n].forward(cx, &a, &mut state.audio[n], &mut sum_a, conn)
                    })?;
                    v = timed(&mut times.video, || {
                        path.blocks[n].forward(cx, &v, &mut state.video[n], &mut sum_v, conn)
                    })?;
                }
                let last = self.fusion.len() - 1;
                a = timed(&mut times.fusion, || self.fusion[last].forward(cx, &a, &v, &mut sum_a, conn))?;
                return timed(&mut times.audio, || self.mask_head(cx, &a));
            }
        }
        timed(&mut times.audio, || {
            for (block, st) in self.audio_blocks.iter().zip(state.audio.iter_mut()) {
                a = block.forward(cx, &a, st, &mut sum_a, conn)?;
            }
            self.mask_head(cx, &a)
        })
    }

    fn mask_head<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, a: &Var<'t, T>) -> Result<Var<'t, T>> {
        let m = self.mask.forward(cx, a)?.sigmoid();
        if self.force_unit_mask {
            return Ok(cx.constant(Tensor::full(m.shape().to_vec(), T::one())));
        }
        Ok(m)
    }

    /// Per-frame decoder contributions `[F × window]` of the masked
    /// features, before overlap-add and bias.
    pub fn decode_frames<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        enc: &Var<'t, T>,
        mask: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.decoder.frame_contributions(cx, &mask.mul(enc)?)
    }

    /// Overlap-adds contributions and adds the output bias.
    pub fn synthesize<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, contrib: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = contrib.overlap_add(self.cfg.hop)?;
        let len = y.shape()[0];
        y.reshape([len, 1])?.add_bias(&cx.p(self.decoder.bias))?.reshape([len])
    }

    /// Offline enhancement of a whole utterance from a zero state. ROI
    /// frames are taken at 25 fps starting at sample 0.
    pub fn forward_utterance<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        audio: &Var<'t, T>,
        rois: &[RoiFrame],
    ) -> Result<Var<'t, T>> {
        let times = roi_timestamps(rois.len());
        let frames: Vec<&RoiFrame> = rois.iter().collect();
        self.forward_timed(cx, audio, &frames, &times, &mut StageTimes::default())
    }

    /// Offline enhancement with explicit ROI timestamps (in samples).
    pub fn forward_timed<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        audio: &Var<'t, T>,
        rois: &[&RoiFrame],
        roi_times: &[u64],
        times: &mut StageTimes,
    ) -> Result<Var<'t, T>> {
        if !self.cfg.has_video() && !rois.is_empty() {
            return Err(Error::InvalidConfig(
                "ROI frames supplied to an audio-only model".into(),
            ));
        }
        let enc = timed(&mut times.encoder, || self.encode_audio(cx, audio))?;
        let nf = enc.shape()[0];
        let video = if self.cfg.has_video() {
            let audio_times: Vec<u64> = (0..nf as u64).map(|f| f * self.cfg.hop as u64).collect();
            Some(timed(&mut times.video, || -> Result<_> {
                let blank = self.blank_feature(cx)?;
                let feats = if rois.is_empty() {
                    None
                } else {
                    Some(self.encode_video(cx, rois)?)
                };
                upsample_replicate(feats.as_ref(), roi_times, &audio_times, &blank)
            })?)
        } else {
            None
        };
        let mut state = self.initial_state();
        let mask = self.predict_mask(cx, &enc, video.as_ref(), &mut state, times)?;
        timed(&mut times.decoder, || {
            let contrib = self.decode_frames(cx, &enc, &mask)?;
            self.synthesize(cx, &contrib)
        })
    }
}

impl Module for Network {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.encoder.param_ids();
        v.extend(self.encoder_norm.param_ids());
        v.extend(self.encoder_proj.param_ids());
        v.extend(self.audio_blocks.param_ids());
        v.extend(self.fusion.param_ids());
        v.extend(self.video.param_ids());
        v.extend(self.mask.param_ids());
        v.extend(self.decoder.param_ids());
        v
    }
}

/// A network together with its f32 weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub params: ParamStore<f32>,
}

/// Builds and initializes a model deterministically from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    let mut params = ParamStore::new();
    let net = Network::new(cfg, &mut Init::new(&mut params, seed))?;
    Ok(Model { net, params })
}

impl Model {
    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    /// Offline inference in f32.
    pub fn enhance(&self, audio: &[f32], rois: &[RoiFrame]) -> Result<Vec<f32>> {
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &self.params);
        let x = tape.constant(Tensor::from_vec(audio.to_vec()));
        Ok(self.net.forward_utterance(&cx, &x, rois)?.into_value().to_vec())
    }

    /// Decoder weights that undo the encoder when the mask is one: the
    /// encoder's pseudo-inverse, shaped by a periodic Hann window so that
    /// overlapping frames sum to the input. Also zeroes the encoder and
    /// decoder biases. Exact when `audio_features ≥ window`.
    pub fn init_pseudo_inverse_decoder(&mut self) -> Result<()> {
        let (n, w) = (self.net.cfg.audio_features, self.net.cfg.window);
        let enc = self.params.get(self.net.encoder.weight).cast::<f64>();
        let e = enc.data(); // [n × w]
        // Gram matrix EᵀE [w×w] with a tiny ridge for rank-deficient cases.
        let mut gram = vec![0.0; w * w];
        for r in 0..n {
            let row = &e[r * w..(r + 1) * w];
            for i in 0..w {
                for j in 0..w {
                    gram[i * w + j] += row[i] * row[j];
                }
            }
        }
        let trace: f64 = (0..w).map(|i| gram[i * w + i]).sum::<f64>() / w as f64;
        for i in 0..w {
            gram[i * w + i] += 1e-9 * trace.max(1e-30);
        }
        let chol = cholesky(&gram, w)?;
        let hop = self.net.cfg.hop;
        let overlap = (w / hop) as f64;
        let window: Vec<f64> = (0..w)
            .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / w as f64).cos()) * 2.0 / overlap)
            .collect();
        // decoder[r, :] = (gram⁻¹ Eᵀ)[:, r] ⊙ window
        let mut dec = vec![0.0f32; n * w];
        for r in 0..n {
            let sol = cholesky_solve(&chol, &e[r * w..(r + 1) * w], w);
            for i in 0..w {
                dec[r * w + i] = (sol[i] * window[i]) as f32;
            }
        }
        let dw = self.net.decoder.weight;
        self.params.set(dw, Tensor::new([n, 1, w], dec)?)?;
        self.params.set(self.net.encoder.bias, Tensor::zeros([n]))?;
        self.params.set(self.net.decoder.bias, Tensor::zeros([1]))?;
        Ok(())
    }
}

fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 {
                    return Err(Error::InvalidConfig("encoder weights are singular".into()));
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x
}

/// One row of a parameter report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamRow {
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
    pub total: usize,
}

impl ParamReport {
    pub fn row(&self, name: &str) -> usize {
        self.rows.iter().find(|r| r.name == name).map_or(0, |r| r.count)
    }
}

/// Per-submodule parameter counts of a configuration.
pub fn param_report(cfg: &ModelConfig) -> Result<ParamReport> {
    let model = build_model(cfg, 0)?;
    let (net, store) = (&model.net, &model.params);
    let mut rows = vec![
        ("audio_encoder", net.encoder.param_count(store)),
        (
            "encoder_norm_projection",
            net.encoder_norm.param_count(store) + net.encoder_proj.param_count(store),
        ),
        ("audio_lstm_blocks", net.audio_blocks.param_count(store)),
    ];
    if let Some(v) = &net.video {
        rows.push(("video_trunk", v.trunk.param_count(store)));
        rows.push(("video_projection", v.projection.param_count(store)));
        rows.push(("video_lstm_blocks", v.blocks.param_count(store)));
        rows.push(("fusion_blocks", net.fusion.param_count(store)));
    }
    rows.push(("mask_prediction", net.mask.param_count(store)));
    rows.push(("audio_decoder", net.decoder.param_count(store)));
    let rows: Vec<ParamRow> = rows
        .into_iter()
        .map(|(name, count)| ParamRow {
            name: name.to_string(),
            count,
        })
        .collect();
    let total = rows.iter().map(|r| r.count).sum();
    debug_assert_eq!(total, store.numel());
    Ok(ParamReport { rows, total })
}
