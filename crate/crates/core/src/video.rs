//! Mouth-ROI encoder: a ShuffleNetV2-style trunk over 1×50×50 grayscale
//! frames, a projection to the model width, optional video LSTM blocks and
//! sample-and-hold alignment to the audio frame rate.

use std::f32::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::{Connection, DenseSum, LstmBlock};
use crate::nn::{channel_shuffle, ChannelAffine, Conv2d, Ctx, Init, LstmState, Module, ProjectionBlock};
use crate::params::ParamId;
use crate::tensor::{Scalar, Tensor};

/// Side length of a mouth crop in pixels.
pub const ROI_SIZE: usize = 50;
/// Video frame rate.
pub const ROI_FPS: u32 = 25;
/// Audio samples per video frame at 16 kHz.
pub const SAMPLES_PER_ROI: u64 = 640;

/// One grayscale mouth crop, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RoiFrame {
    pixels: Tensor<f32>,
    is_blank: bool,
}

impl RoiFrame {
    /// Validates the shape and clamps values into [0, 1].
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        let expected = [1, ROI_SIZE, ROI_SIZE];
        let pixels = match pixels.shape() {
            s if s == expected => pixels,
            [h, w] if *h == ROI_SIZE && *w == ROI_SIZE => pixels.reshape(expected)?,
            s => return Err(Error::BadFrameShape(s.to_vec())),
        };
        let pixels = pixels.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        let is_blank = pixels.data().iter().all(|&v| v == 0.0);
        Ok(RoiFrame { pixels, is_blank })
    }

    /// All-zero frame standing in for an undetected face.
    pub fn blank() -> Self {
        RoiFrame {
            pixels: Tensor::zeros([1, ROI_SIZE, ROI_SIZE]),
            is_blank: true,
        }
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn is_blank(&self) -> bool {
        self.is_blank
    }
}

/// An ROI frame with its timestamp in audio samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TimedRoi {
    pub timestamp: u64,
    pub frame: RoiFrame,
}

/// Timestamps of a 25 fps sequence starting at sample 0.
pub fn roi_timestamps(count: usize) -> Vec<u64> {
    (0..count as u64).map(|k| k * SAMPLES_PER_ROI).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub channels: usize,
    pub units: usize,
}

/// Channel plan of the trunk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrunkPlan {
    pub stem: usize,
    pub stages: Vec<StagePlan>,
    pub final_channels: usize,
}

impl TrunkPlan {
    /// ShuffleNetV2 at 0.5x width: stem 24, stages 48/96/192 with 4/8/4
    /// units, 1024 output channels.
    pub fn shufflenet_v2_half() -> Self {
        TrunkPlan {
            stem: 24,
            stages: vec![
                StagePlan { channels: 48, units: 4 },
                StagePlan { channels: 96, units: 8 },
                StagePlan { channels: 192, units: 4 },
            ],
            final_channels: 1024,
        }
    }

    /// Small plan for tests and toy training.
    pub fn tiny(final_channels: usize) -> Self {
        TrunkPlan {
            stem: 4,
            stages: vec![StagePlan { channels: 8, units: 2 }, StagePlan { channels: 16, units: 1 }],
            final_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem == 0 || self.final_channels == 0 || self.stages.is_empty() {
            return Err(Error::InvalidConfig("empty trunk plan".into()));
        }
        for s in &self.stages {
            if s.units == 0 || s.channels == 0 || s.channels % 2 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "trunk stage needs an even channel count and at least one unit, got {s:?}"
                )));
            }
        }
        Ok(())
    }
}

// Without batch statistics the trunk relies on variance-preserving init to
// keep activations from vanishing over its ~50 layers.

/// 1×1 conv → affine → ReLU.
#[derive(Clone, Debug)]
struct Pointwise {
    conv: Conv2d,
    affine: ChannelAffine,
}

impl Pointwise {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Pointwise {
            conv: Conv2d::new(init, &format!("{name}.conv"), cin, cout, 1, 1, 0, 1, SQRT_2)?,
            affine: ChannelAffine::new(init, &format!("{name}.bn"), cout)?,
        })
    }

    fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.affine.forward(cx, &self.conv.forward(cx, x)?)?.relu())
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut v = self.conv.param_ids();
        v.extend(self.affine.param_ids());
        v
    }
}

/// Depthwise 3×3 conv → affine (no activation).
#[derive(Clone, Debug)]
struct Depthwise {
    conv: Conv2d,
    affine: ChannelAffine,
}

impl Depthwise {
    fn new(init: &mut Init, name: &str, ch: usize, stride: usize) -> Result<Self> {
        Ok(Depthwise {
            conv: Conv2d::new(init, &format!("{name}.conv"), ch, ch, 3, stride, 1, ch, 1.0)?,
            affine: ChannelAffine::new(init, &format!("{name}.bn"), ch)?,
        })
    }

    fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.affine.forward(cx, &self.conv.forward(cx, x)?)
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut v = self.conv.param_ids();
        v.extend(self.affine.param_ids());
        v
    }
}

#[derive(Clone, Debug)]
struct ShuffleUnit {
    in_ch: usize,
    out_ch: usize,
    /// Present on stride-2 units: processes the full input instead of
    /// passing half of it through.
    shortcut: Option<(Depthwise, Pointwise)>,
    pw1: Pointwise,
    dw: Depthwise,
    pw2: Pointwise,
}

impl ShuffleUnit {
    fn new(init: &mut Init, name: &str, in_ch: usize, out_ch: usize, downsample: bool) -> Result<Self> {
        let half = out_ch / 2;
        let (shortcut, branch_in, stride) = if downsample {
            let sc = (
                Depthwise::new(init, &format!("{name}.short.dw"), in_ch, 2)?,
                Pointwise::new(init, &format!("{name}.short.pw"), in_ch, half)?,
            );
            (Some(sc), in_ch, 2)
        } else {
            assert_eq!(in_ch, out_ch, "stride-1 unit must keep its width");
            (None, in_ch / 2, 1)
        };
        Ok(ShuffleUnit {
            in_ch,
            out_ch,
            shortcut,
            pw1: Pointwise::new(init, &format!("{name}.pw1"), branch_in, half)?,
            dw: Depthwise::new(init, &format!("{name}.dw"), half, stride)?,
            pw2: Pointwise::new(init, &format!("{name}.pw2"), half, half)?,
        })
    }

    fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let [c, h, w] = x.shape()[..] else {
            return Err(Error::shape("shuffle unit", x.shape(), &[self.in_ch]));
        };
        if c != self.in_ch {
            return Err(Error::shape("shuffle unit", x.shape(), &[self.in_ch]));
        }
        let (keep, branch_in) = match &self.shortcut {
            Some((dw, pw)) => (pw.forward(cx, &dw.forward(cx, x)?)?, x.clone()),
            None => {
                let rows = x.reshape([c, h * w])?;
                let half = c / 2;
                (
                    rows.slice_rows(0, half)?.reshape([half, h, w])?,
                    rows.slice_rows(half, half)?.reshape([half, h, w])?,
                )
            }
        };
        let b = self.pw2.forward(cx, &self.dw.forward(cx, &self.pw1.forward(cx, &branch_in)?)?)?;
        let [bc, bh, bw] = b.shape()[..] else { unreachable!() };
        let joined = Var::concat_rows(&[keep.reshape([bc, bh * bw])?, b.reshape([bc, bh * bw])?])?
            .reshape([2 * bc, bh, bw])?;
        debug_assert_eq!(joined.shape()[0], self.out_ch);
        channel_shuffle(&joined, 2)
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        if let Some((dw, pw)) = &self.shortcut {
            v.extend(dw.ids());
            v.extend(pw.ids());
        }
        v.extend(self.pw1.ids());
        v.extend(self.dw.ids());
        v.extend(self.pw2.ids());
        v
    }
}

/// Frame → feature vector of `plan.final_channels`.
#[derive(Clone, Debug)]
pub struct VideoTrunk {
    pub plan: TrunkPlan,
    stem: Conv2d,
    stem_affine: ChannelAffine,
    units: Vec<ShuffleUnit>,
    head: Pointwise,
}

impl VideoTrunk {
    pub fn new(init: &mut Init, name: &str, plan: &TrunkPlan) -> Result<Self> {
        plan.validate()?;
        let stem = Conv2d::new(init, &format!("{name}.stem.conv"), 1, plan.stem, 3, 2, 1, 1, SQRT_2)?;
        let stem_affine = ChannelAffine::new(init, &format!("{name}.stem.bn"), plan.stem)?;
        let mut units = Vec::new();
        let mut ch = plan.stem;
        for (si, stage) in plan.stages.iter().enumerate() {
            for ui in 0..stage.units {
                let unit = ShuffleUnit::new(
                    init,
                    &format!("{name}.stage{}.unit{ui}", si + 2),
                    ch,
                    stage.channels,
                    ui == 0,
                )?;
                assert_eq!(unit.out_ch, stage.channels, "channel plan violated");
                ch = unit.out_ch;
                units.push(unit);
            }
        }
        let head = Pointwise::new(init, &format!("{name}.head"), ch, plan.final_channels)?;
        Ok(VideoTrunk {
            plan: plan.clone(),
            stem,
            stem_affine,
            units,
            head,
        })
    }

    /// `[1×50×50] → [final_channels]`
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, frame: &Var<'t, T>) -> Result<Var<'t, T>> {
        if frame.shape() != [1, ROI_SIZE, ROI_SIZE] {
            return Err(Error::BadFrameShape(frame.shape().to_vec()));
        }
        let mut x = self
            .stem_affine
            .forward(cx, &self.stem.forward(cx, frame)?)?
            .relu();
        for u in &self.units {
            x = u.forward(cx, &x)?;
        }
        let x = self.head.forward(cx, &x)?;
        let [c, h, w] = x.shape()[..] else { unreachable!() };
        x.reshape([c, h * w])?.row_means()
    }

    /// Output channel count after every unit, in order.
    pub fn unit_channels(&self) -> Vec<usize> {
        self.units.iter().map(|u| u.out_ch).collect()
    }
}

impl Module for VideoTrunk {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.stem.param_ids();
        v.extend(self.stem_affine.param_ids());
        for u in &self.units {
            v.extend(u.ids());
        }
        v.extend(self.head.ids());
        v
    }
}

/// Trunk, projection and the video LSTM stack.
#[derive(Clone, Debug)]
pub struct VideoPath {
    pub trunk: VideoTrunk,
    pub projection: ProjectionBlock,
    pub blocks: Vec<LstmBlock>,
}

impl VideoPath {
    pub fn new(
        init: &mut Init,
        plan: &TrunkPlan,
        hidden: usize,
        fc_hidden: usize,
        blocks: usize,
    ) -> Result<Self> {
        let trunk = VideoTrunk::new(init, "video.trunk", plan)?;
        let projection = ProjectionBlock::new(init, "video.proj", plan.final_channels, hidden)?;
        let blocks = (0..blocks)
            .map(|i| LstmBlock::new(init, &format!("video.block{i}"), hidden, fc_hidden))
            .collect::<Result<_>>()?;
        Ok(VideoPath {
            trunk,
            projection,
            blocks,
        })
    }

    /// Projected features of several frames: `→ [N × hidden]`.
    pub fn encode<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, frames: &[&RoiFrame]) -> Result<Var<'t, T>> {
        let feats = frames
            .iter()
            .map(|f| {
                let px = cx.constant(f.pixels().cast());
                let v = self.trunk.forward(cx, &px)?;
                v.reshape([1, self.trunk.plan.final_channels])
            })
            .collect::<Result<Vec<_>>>()?;
        self.projection.forward(cx, &Var::concat_rows(&feats)?)
    }

    /// Projected feature of one frame: `→ [hidden]`.
    pub fn encode_frame<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, frame: &RoiFrame) -> Result<Var<'t, T>> {
        let y = self.encode(cx, &[frame])?;
        let n = y.shape()[1];
        y.reshape([n])
    }

    /// Runs every video LSTM block in sequence over `v [F×hidden]`.
    pub fn lstm_forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        v: Var<'t, T>,
        states: &mut [LstmState<T>],
        connection: Connection,
    ) -> Result<Var<'t, T>> {
        if states.len() != self.blocks.len() {
            return Err(Error::shape("video lstm state", &[states.len()], &[self.blocks.len()]));
        }
        let mut sum = DenseSum::new();
        let mut v = v;
        for (block, state) in self.blocks.iter().zip(states.iter_mut()) {
            v = block.forward(cx, &v, state, &mut sum, connection)?;
        }
        Ok(v)
    }
}

impl Module for VideoPath {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.trunk.param_ids();
        v.extend(self.projection.param_ids());
        v.extend(self.blocks.param_ids());
        v
    }
}

/// For each audio frame time, index of the latest video frame whose
/// timestamp is ≤ that time, or `None` before the first video frame.
/// `video_times` must be non-decreasing.
pub fn hold_indices(video_times: &[u64], audio_times: &[u64]) -> Vec<Option<usize>> {
    audio_times
        .iter()
        .map(|&t| video_times.partition_point(|&v| v <= t).checked_sub(1))
        .collect()
}

/// Sample-and-hold upsampling: `feats [K×d]` at `video_times` onto
/// `audio_times`, using `blank [1×d]` before the first video frame.
pub fn upsample_replicate<'t, T: Scalar>(
    feats: Option<&Var<'t, T>>,
    video_times: &[u64],
    audio_times: &[u64],
    blank: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let k = video_times.len();
    let table = match feats {
        Some(f) if k > 0 => {
            if f.shape()[0] != k {
                return Err(Error::shape("upsample_replicate", f.shape(), &[k]));
            }
            Var::concat_rows(&[f.clone(), blank.clone()])?
        }
        _ => blank.clone(),
    };
    let rows = table.shape()[0];
    let idx: Vec<usize> = hold_indices(video_times, audio_times)
        .into_iter()
        .map(|i| i.unwrap_or(rows - 1))
        .collect();
    table.gather_rows(&idx)
}
