//! Spectral helpers, the power-law compressed phase-aware loss and SDR.
//!
//! STFT convention: periodic Hann analysis window of `win` samples,
//! zero-padded to `fft_size`, unnormalized forward DFT, no centering (frame
//! `f` starts at sample `f·hop`). The inverse divides by `fft_size` and uses
//! weighted overlap-add normalized by the summed squared window.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// SDR reported for a residual below `1e-12` of the reference energy.
pub const SDR_CAP_DB: f64 = 100.0;
/// Magnitude guard inside the loss.
pub const MAG_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub win: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: 512,
            win: 320,
            hop: 160,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames(&self, len: usize) -> Result<usize> {
        if len < self.win {
            return Err(Error::InputTooShort {
                needed: self.win,
                got: len,
            });
        }
        Ok((len - self.win) / self.hop + 1)
    }

    fn validate(&self) -> Result<()> {
        if self.win == 0 || self.hop == 0 || self.fft_size < self.win {
            return Err(Error::InvalidConfig(format!("bad STFT config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlcpaConfig {
    /// Compression exponent.
    pub p: f64,
    /// Weight of the complex (phase-aware) term.
    pub alpha: f64,
}

impl Default for PlcpaConfig {
    fn default() -> Self {
        PlcpaConfig { p: 0.3, alpha: 0.5 }
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Complex spectrogram, `[frames × bins]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn at(&self, frame: usize, bin: usize) -> Complex<f64> {
        self.data[frame * self.bins + bin]
    }

    /// Energy per bin summed over frames.
    pub fn bin_energy(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.bins];
        for row in self.data.chunks(self.bins) {
            for (k, c) in row.iter().enumerate() {
                e[k] += c.norm_sqr();
            }
        }
        e
    }
}

pub fn stft(x: &[f32], cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let frames = cfg.frames(x.len())?;
    let window = hann(cfg.win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let bins = cfg.bins();
    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for f in 0..frames {
        buf.fill(Complex::new(0.0, 0.0));
        for (i, b) in buf.iter_mut().take(cfg.win).enumerate() {
            b.re = x[f * cfg.hop + i] as f64 * window[i];
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram { frames, bins, data })
}

/// Inverse of [`stft`] producing `len` samples. Samples not covered by any
/// frame, or covered only where the window vanishes, come out as zero.
pub fn istft(spec: &Spectrogram, cfg: &StftConfig, len: usize) -> Result<Vec<f32>> {
    cfg.validate()?;
    if spec.bins != cfg.bins() {
        return Err(Error::shape("istft", &[spec.frames, spec.bins], &[cfg.bins()]));
    }
    let n = cfg.fft_size;
    let window = hann(cfg.win);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut out = vec![0.0f64; len];
    let mut norm = vec![0.0f64; len];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for f in 0..spec.frames {
        let row = &spec.data[f * spec.bins..(f + 1) * spec.bins];
        buf[..spec.bins].copy_from_slice(row);
        for k in spec.bins..n {
            buf[k] = buf[n - k].conj();
        }
        ifft.process(&mut buf);
        for i in 0..cfg.win {
            let t = f * cfg.hop + i;
            if t >= len {
                break;
            }
            out[t] += buf[i].re / n as f64 * window[i];
            norm[t] += window[i] * window[i];
        }
    }
    Ok(out
        .iter()
        .zip(&norm)
        .map(|(&v, &w)| if w > 1e-10 { (v / w) as f32 } else { 0.0 })
        .collect())
}

/// Windowed real-DFT bases `[win × bins]`: `x·C` gives the real part and
/// `x·S` the imaginary part of each frame's spectrum.
fn dft_bases<T: Scalar>(cfg: &StftConfig) -> (Tensor<T>, Tensor<T>) {
    let (w, b, n) = (cfg.win, cfg.bins(), cfg.fft_size);
    let window = hann(w);
    let mut c = Vec::with_capacity(w * b);
    let mut s = Vec::with_capacity(w * b);
    for (i, wi) in window.iter().enumerate() {
        for k in 0..b {
            // reduce the phase index exactly before converting to an angle
            let ang = 2.0 * PI * ((i * k) % n) as f64 / n as f64;
            c.push(T::from_f64(wi * ang.cos()));
            s.push(T::from_f64(-wi * ang.sin()));
        }
    }
    (
        Tensor::new([w, b], c).expect("basis shape"),
        Tensor::new([w, b], s).expect("basis shape"),
    )
}

struct Compressed<'t, T: Scalar> {
    re: Var<'t, T>,
    im: Var<'t, T>,
    mag: Var<'t, T>,
}

fn compress<'t, T: Scalar>(
    x: &Var<'t, T>,
    bases: &(Var<'t, T>, Var<'t, T>),
    scfg: &StftConfig,
    p: f64,
) -> Result<Compressed<'t, T>> {
    let frames = x.frames(scfg.win, scfg.hop)?;
    let re = frames.matmul(&bases.0)?;
    let im = frames.matmul(&bases.1)?;
    let mag = re.square().add(&im.square())?.add_scalar(T::from_f64(MAG_EPS)).sqrt();
    let gain = mag.powf(T::from_f64(p - 1.0));
    Ok(Compressed {
        re: re.mul(&gain)?,
        im: im.mul(&gain)?,
        mag: mag.powf(T::from_f64(p)),
    })
}

/// PLCPA loss on the tape:
/// `α·mean|Sᶜ − Ŝᶜ|² + (1−α)·mean(|S|ᵖ − |Ŝ|ᵖ)²` where `Sᶜ = |S|ᵖ·e^{jθ}`.
pub fn plcpa_loss_var<'t, T: Scalar>(
    est: &Var<'t, T>,
    reference: &Tensor<T>,
    scfg: &StftConfig,
    cfg: &PlcpaConfig,
) -> Result<Var<'t, T>> {
    scfg.validate()?;
    if est.value().len() != reference.len() {
        return Err(Error::LengthMismatch(est.value().len(), reference.len()));
    }
    let tape: &'t Tape<T> = est.tape();
    let (c, s) = dft_bases::<T>(scfg);
    let bases = (tape.constant(c), tape.constant(s));
    let e = compress(est, &bases, scfg, cfg.p)?;
    let r = compress(&tape.constant(reference.clone()), &bases, scfg, cfg.p)?;
    let complex = e.re.sub(&r.re)?.square().add(&e.im.sub(&r.im)?.square())?.mean();
    let magnitude = e.mag.sub(&r.mag)?.square().mean();
    complex
        .scale(T::from_f64(cfg.alpha))
        .add(&magnitude.scale(T::from_f64(1.0 - cfg.alpha)))
}

/// PLCPA loss of plain signals, evaluated in f64.
pub fn plcpa_loss(est: &[f32], reference: &[f32], scfg: &StftConfig, cfg: &PlcpaConfig) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::LengthMismatch(est.len(), reference.len()));
    }
    let tape = Tape::<f64>::inference();
    let e = tape.constant(Tensor::<f32>::from_vec(est.to_vec()).cast());
    let r = Tensor::<f32>::from_vec(reference.to_vec()).cast();
    Ok(plcpa_loss_var(&e, &r, scfg, cfg)?.value().item())
}

/// Plain signal-to-distortion ratio in dB, capped at [`SDR_CAP_DB`].
pub fn sdr(est: &[f32], reference: &[f32]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::LengthMismatch(est.len(), reference.len()));
    }
    let signal: f64 = reference.iter().map(|&r| (r as f64).powi(2)).sum();
    if signal == 0.0 {
        return Err(Error::ZeroReference);
    }
    let residual: f64 = reference
        .iter()
        .zip(est)
        .map(|(&r, &e)| (r as f64 - e as f64).powi(2))
        .sum();
    if residual < 1e-12 * signal {
        return Ok(SDR_CAP_DB);
    }
    Ok((10.0 * (signal / residual).log10()).min(SDR_CAP_DB))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn zeros_give_zero_spectrum() {
        let s = stft(&[0.0; 800], &StftConfig::default()).unwrap();
        assert!(s.data.iter().all(|c| c.norm() == 0.0));
        assert!(matches!(
            stft(&[0.0; 100], &StftConfig::default()),
            Err(Error::InputTooShort { .. })
        ));
    }

    #[test]
    fn sine_energy_concentrates() {
        let fraction = |cfg: &StftConfig, k: usize, radius: usize| {
            let x: Vec<f32> = (0..3200)
                .map(|i| (2.0 * PI * k as f64 * i as f64 / cfg.fft_size as f64).sin() as f32)
                .collect();
            let e = stft(&x, cfg).unwrap().bin_energy();
            e[k - radius..=k + radius].iter().sum::<f64>() / e.iter().sum::<f64>()
        };
        let native = StftConfig {
            fft_size: 320,
            ..Default::default()
        };
        assert!(fraction(&native, 25, 1) >= 0.99);
        // zero padding to 512 spreads the Hann main lobe over ±3.2 bins
        assert!(fraction(&StftConfig::default(), 40, 2) >= 0.99);
    }

    #[test]
    fn round_trip_interior() {
        let cfg = StftConfig::default();
        let x = noise(4000, 1);
        let y = istft(&stft(&x, &cfg).unwrap(), &cfg, x.len()).unwrap();
        let covered = (cfg.frames(x.len()).unwrap() - 1) * cfg.hop + cfg.win;
        let err = (cfg.win..covered - cfg.win)
            .map(|i| (x[i] - y[i]).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn plcpa_cases() {
        let cfg = StftConfig::default();
        let p = PlcpaConfig::default();
        let x = noise(1600, 2);
        assert_eq!(plcpa_loss(&x, &x, &cfg, &p).unwrap(), 0.0);
        let neg: Vec<f32> = x.iter().map(|v| -v).collect();
        let only_mag = PlcpaConfig { alpha: 0.0, ..p };
        let only_cplx = PlcpaConfig { alpha: 1.0, ..p };
        assert!(plcpa_loss(&neg, &x, &cfg, &only_mag).unwrap() < 1e-12);
        assert!(plcpa_loss(&neg, &x, &cfg, &only_cplx).unwrap() > 0.0);
        assert!(matches!(
            plcpa_loss(&x[..800], &x, &cfg, &p),
            Err(Error::LengthMismatch(..))
        ));
    }

    #[test]
    fn sdr_cases() {
        let x = noise(1000, 3);
        assert_eq!(sdr(&x, &x).unwrap(), SDR_CAP_DB);
        let n = noise(1000, 4);
        let scale = (x.iter().map(|v| v * v).sum::<f32>() / 10.0 / n.iter().map(|v| v * v).sum::<f32>()).sqrt();
        let est: Vec<f32> = x.iter().zip(&n).map(|(a, b)| a + scale * b).collect();
        assert!((sdr(&est, &x).unwrap() - 10.0).abs() < 1e-3);
        assert!(matches!(sdr(&x, &[0.0; 1000]), Err(Error::ZeroReference)));
    }
}
