//! Layers: fully connected, layer norm, 1-D conv / transposed conv, LSTM,
//! 2-D conv, folded batch norm, channel shuffle and the projection block.
//!
//! Layers only hold [`ParamId`]s; the tensors live in a [`ParamStore`] so one
//! structure can run with f32 weights for inference and f64 weights for
//! gradient verification.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// LayerNorm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;
/// Initial PReLU slope.
pub const PRELU_INIT: f32 = 0.25;

/// Forward context: the tape to record on and the weights to read.
pub struct Ctx<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub params: &'t ParamStore<T>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, params: &'t ParamStore<T>) -> Self {
        Ctx { tape, params }
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        self.tape.param(self.params, id)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }
}

/// Anything owning parameters.
pub trait Module {
    fn param_ids(&self) -> Vec<ParamId>;

    fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).len()).sum()
    }
}

impl<M: Module> Module for [M] {
    fn param_ids(&self) -> Vec<ParamId> {
        self.iter().flat_map(Module::param_ids).collect()
    }
}

impl<M: Module> Module for Vec<M> {
    fn param_ids(&self) -> Vec<ParamId> {
        self.as_slice().param_ids()
    }
}

impl<M: Module> Module for Option<M> {
    fn param_ids(&self) -> Vec<ParamId> {
        self.as_ref().map(Module::param_ids).unwrap_or_default()
    }
}

/// Seeded parameter initializer writing into a store.
pub struct Init<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform(−bound, bound).
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f32) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        self.uniform(name, shape, 1.0 / (fan_in.max(1) as f32).sqrt())
    }

    /// Uniform with variance `gain² / fan_in`; gain √2 suits layers
    /// followed by ReLU.
    pub fn variance_scaled(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f32) -> Result<ParamId> {
        self.uniform(name, shape, gain * (3.0 / fan_in.max(1) as f32).sqrt())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape.to_vec(), value))
    }
}

fn as_rows<'t, T: Scalar>(x: &Var<'t, T>) -> Result<(Var<'t, T>, bool)> {
    match x.shape().len() {
        1 => Ok((x.reshape([1, x.shape()[0]])?, true)),
        2 => Ok((x.clone(), false)),
        _ => Err(Error::shape("layer input", x.shape(), &[])),
    }
}

fn restore<'t, T: Scalar>(y: Var<'t, T>, was_vec: bool) -> Result<Var<'t, T>> {
    if was_vec {
        let n = y.shape()[1];
        y.reshape([n])
    } else {
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct FullyConnected {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl FullyConnected {
    pub fn new(init: &mut Init, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(FullyConnected {
            weight: init.fan_in(&format!("{name}.weight"), &[outputs, inputs], inputs)?,
            bias: init.fan_in(&format!("{name}.bias"), &[outputs], inputs)?,
            inputs,
            outputs,
        })
    }

    /// `x·Wᵀ + b` for `x` of shape `[in]` or `[frames×in]`.
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, was_vec) = as_rows(x)?;
        let y = x.matmul_nt(&cx.p(self.weight))?.add_bias(&cx.p(self.bias))?;
        restore(y, was_vec)
    }
}

impl Module for FullyConnected {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0)?,
            eps: LN_EPS,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(&cx.p(self.gamma), &cx.p(self.beta), self.eps)
    }
}

impl Module for LayerNorm {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Strided valid cross-correlation over `[in_ch × T]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    /// `[out_ch × in_ch × kernel]`
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new(
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan = in_ch * kernel;
        Ok(Conv1d {
            weight: init.fan_in(&format!("{name}.weight"), &[out_ch, in_ch, kernel], fan)?,
            bias: init.fan_in(&format!("{name}.bias"), &[out_ch], fan)?,
            in_ch,
            out_ch,
            kernel,
            stride,
        })
    }

    /// Frame-major output `[F × out_ch]`; accepts `[T]` (one channel) or
    /// `[in_ch × T]`.
    pub fn forward_frames<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let frames = x.frames(self.kernel, self.stride)?;
        let w = cx.p(self.weight).reshape([self.out_ch, self.in_ch * self.kernel])?;
        frames.matmul_nt(&w)?.add_bias(&cx.p(self.bias))
    }

    /// Channel-major output `[out_ch × F]`.
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_frames(cx, x)?.transpose()
    }
}

impl Module for Conv1d {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Overlap-add synthesis: the adjoint of [`Conv1d`] (plus bias).
#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    /// `[in_ch × out_ch × kernel]`
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvTranspose1d {
    pub fn new(
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan = in_ch * kernel.div_ceil(stride);
        Ok(ConvTranspose1d {
            weight: init.fan_in(&format!("{name}.weight"), &[in_ch, out_ch, kernel], fan)?,
            bias: init.fan_in(&format!("{name}.bias"), &[out_ch], fan)?,
            in_ch,
            out_ch,
            kernel,
            stride,
        })
    }

    /// Per-frame contributions `[F × out_ch·kernel]` from frame-major input
    /// `[F × in_ch]`, before overlap-add and bias.
    pub fn frame_contributions<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let w = cx.p(self.weight).reshape([self.in_ch, self.out_ch * self.kernel])?;
        x.matmul(&w)
    }

    /// `[in_ch × F] → [out_ch × ((F−1)·stride + kernel)]`
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (ch, nf) = x.value().dims2("conv_transpose1d")?;
        if ch != self.in_ch || nf == 0 {
            return Err(Error::shape("conv_transpose1d", x.shape(), &[self.in_ch]));
        }
        let contrib = self.frame_contributions(cx, &x.transpose()?)?;
        let len = (nf - 1) * self.stride + self.kernel;
        let mut rows = Vec::with_capacity(self.out_ch);
        for o in 0..self.out_ch {
            let ola = contrib
                .slice_cols(o * self.kernel, self.kernel)?
                .overlap_add(self.stride)?;
            rows.push(ola.reshape([1, len])?);
        }
        let y = Var::concat_rows(&rows)?;
        y.transpose()?.add_bias(&cx.p(self.bias))?.transpose()
    }
}

impl Module for ConvTranspose1d {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Recurrent state of one LSTM layer: `(h, c)`, each `[1 × d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T: Scalar = f32> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(d: usize) -> Self {
        LstmState {
            h: Tensor::zeros([1, d]),
            c: Tensor::zeros([1, d]),
        }
    }
}

/// Unidirectional LSTM. Gate blocks are stacked in the order
/// (input, forget, cell, output) along the `4d` dimension.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    /// `[4d × in]`
    pub w_ih: ParamId,
    /// `[4d × d]`
    pub w_hh: ParamId,
    /// `[4d]`
    pub bias: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new(init: &mut Init, name: &str, inputs: usize, hidden: usize) -> Result<Self> {
        Ok(LstmLayer {
            w_ih: init.fan_in(&format!("{name}.w_ih"), &[4 * hidden, inputs], hidden)?,
            w_hh: init.fan_in(&format!("{name}.w_hh"), &[4 * hidden, hidden], hidden)?,
            bias: init.fan_in(&format!("{name}.bias"), &[4 * hidden], hidden)?,
            inputs,
            hidden,
        })
    }

    fn cell<'t, T: Scalar>(
        &self,
        pre: Var<'t, T>,
        c: &Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let d = self.hidden;
        let i = pre.slice_cols(0, d)?.sigmoid();
        let f = pre.slice_cols(d, d)?.sigmoid();
        let g = pre.slice_cols(2 * d, d)?.tanh();
        let o = pre.slice_cols(3 * d, d)?.sigmoid();
        let c2 = f.mul(c)?.add(&i.mul(&g)?)?;
        let h2 = o.mul(&c2.tanh())?;
        Ok((h2, c2))
    }

    /// One time step: `x [1×in]` (or `[in]`), state `(h, c)` each `[1×d]`.
    pub fn step<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        x: &Var<'t, T>,
        h: &Var<'t, T>,
        c: &Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (x, _) = as_rows(x)?;
        if h.shape() != [1, self.hidden] || c.shape() != [1, self.hidden] {
            return Err(Error::shape("lstm_step", h.shape(), &[1, self.hidden]));
        }
        let pre = x
            .matmul_nt(&cx.p(self.w_ih))?
            .add(&h.matmul_nt(&cx.p(self.w_hh))?)?
            .add_bias(&cx.p(self.bias))?;
        self.cell(pre, c)
    }

    /// Runs over `x [F×in]`; returns outputs `[F×d]` and the final state.
    /// The input projection is computed for all frames at once.
    pub fn forward_seq<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        x: &Var<'t, T>,
        h0: Var<'t, T>,
        c0: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        let (nf, _) = x.value().dims2("lstm")?;
        let xw = x.matmul_nt(&cx.p(self.w_ih))?.add_bias(&cx.p(self.bias))?;
        let w_hh = cx.p(self.w_hh);
        let (mut h, mut c) = (h0, c0);
        let mut outs = Vec::with_capacity(nf);
        for t in 0..nf {
            let pre = xw.slice_rows(t, 1)?.add(&h.matmul_nt(&w_hh)?)?;
            let (h2, c2) = self.cell(pre, &c)?;
            outs.push(h2.clone());
            h = h2;
            c = c2;
        }
        Ok((Var::concat_rows(&outs)?, h, c))
    }
}

impl Module for LstmLayer {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_ih, self.w_hh, self.bias]
    }
}

/// FC → PReLU (one shared slope) → LayerNorm.
#[derive(Clone, Debug)]
pub struct ProjectionBlock {
    pub fc: FullyConnected,
    pub alpha: ParamId,
    pub norm: LayerNorm,
}

impl ProjectionBlock {
    pub fn new(init: &mut Init, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(ProjectionBlock {
            fc: FullyConnected::new(init, &format!("{name}.fc"), inputs, outputs)?,
            alpha: init.constant(&format!("{name}.alpha"), &[1], PRELU_INIT)?,
            norm: LayerNorm::new(init, &format!("{name}.norm"), outputs)?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.fc.forward(cx, x)?.prelu(&cx.p(self.alpha))?;
        self.norm.forward(cx, &y)
    }
}

impl Module for ProjectionBlock {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.fc.param_ids();
        v.push(self.alpha);
        v.extend(self.norm.param_ids());
        v
    }
}

/// 2-D convolution without bias over `[C×H×W]`; 1×1 kernels run as a
/// matrix product.
#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `[out × in/groups × k × k]`
    pub weight: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        gain: f32,
    ) -> Result<Self> {
        if !in_ch.is_multiple_of(groups) || !out_ch.is_multiple_of(groups) {
            return Err(Error::NotDivisible {
                what: "conv2d channels",
                value: in_ch,
                by: groups,
            });
        }
        let cg = in_ch / groups;
        Ok(Conv2d {
            weight: init.variance_scaled(
                &format!("{name}.weight"),
                &[out_ch, cg, kernel, kernel],
                cg * kernel * kernel,
                gain,
            )?,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            groups,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let w = cx.p(self.weight);
        if self.kernel == 1 && self.stride == 1 && self.pad == 0 && self.groups == 1 {
            let [c, h, wd] = x.shape()[..] else {
                return Err(Error::shape("conv2d", x.shape(), &[self.in_ch]));
            };
            if c != self.in_ch {
                return Err(Error::shape("conv2d", x.shape(), &[self.in_ch]));
            }
            let y = w
                .reshape([self.out_ch, self.in_ch])?
                .matmul(&x.reshape([c, h * wd])?)?;
            return y.reshape([self.out_ch, h, wd]);
        }
        x.conv2d(&w, self.stride, self.pad, self.groups)
    }
}

impl Module for Conv2d {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight]
    }
}

/// Per-channel scale and shift (inference-form batch normalization).
#[derive(Clone, Debug)]
pub struct ChannelAffine {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl ChannelAffine {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        Ok(ChannelAffine {
            scale: init.constant(&format!("{name}.scale"), &[channels], 1.0)?,
            // folded batch norm (β − γμ/σ) is rarely exactly zero; a small
            // random offset also keeps all-zero frames off the ReLU kinks
            shift: init.uniform(&format!("{name}.shift"), &[channels], 0.1)?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.channel_affine(&cx.p(self.scale), &cx.p(self.shift))
    }
}

impl Module for ChannelAffine {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.scale, self.shift]
    }
}

/// Source channel for each output channel of a shuffle with `groups`
/// groups: view channels as `[groups × per]`, transpose, flatten.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::NotDivisible {
            what: "channel count",
            value: channels,
            by: groups,
        });
    }
    let per = channels / groups;
    Ok((0..channels).map(|j| (j % groups) * per + j / groups).collect())
}

/// Channel shuffle on `[C×H×W]`.
pub fn channel_shuffle<'t, T: Scalar>(x: &Var<'t, T>, groups: usize) -> Result<Var<'t, T>> {
    let shape = x.shape().to_vec();
    let c = *shape.first().ok_or(Error::shape("channel_shuffle", &shape, &[]))?;
    let perm = shuffle_permutation(c, groups)?;
    let plane = x.value().len() / c.max(1);
    x.reshape([c, plane])?.gather_rows(&perm)?.reshape(shape)
}
