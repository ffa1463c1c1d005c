//! Short-time Fourier analysis and weighted overlap-add synthesis.
//!
//! Analysis and synthesis both use a square-root periodic Hann window, so
//! the product window is Hann and the synthesis normalizer is the summed
//! squared window envelope. The signal is zero-padded by half a window on
//! both sides; frame `t` starts at padded sample `t * hop`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{num_complex::Complex64, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, RealTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    /// 25 ms window, 25% shift at 16 kHz.
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            win_len: 400,
            hop: 100,
            fft_size: 400,
        }
    }
}

impl StftConfig {
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.win_len != self.fft_size || self.win_len % 2 != 0 || self.hop == 0 {
            return Err(Error::Invalid(format!("unsupported STFT geometry {self:?}")));
        }
        if self.win_len % self.hop != 0 {
            return Err(Error::Invalid("window must be a multiple of the hop".into()));
        }
        Ok(())
    }

    pub fn pad(&self) -> usize {
        self.win_len / 2
    }

    /// Frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        1 + (len + 2 * self.pad() - self.win_len) / self.hop
    }

    /// Samples synthesized from `frames` frames.
    pub fn synth_len(&self, frames: usize) -> usize {
        frames.saturating_sub(1) * self.hop
    }
}

/// STFT engine with cached window and FFT plans.
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.win_len;
        let window = (0..n)
            .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).sqrt())
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    fn envelope(&self, frames: usize) -> Vec<f64> {
        let padded = (frames - 1) * self.cfg.hop + self.cfg.win_len;
        let mut env = vec![0.0; padded];
        for t in 0..frames {
            for (n, w) in self.window.iter().enumerate() {
                env[t * self.cfg.hop + n] += w * w;
            }
        }
        env
    }

    /// One-sided spectrum `[T, F]` as separate real and imaginary buffers.
    pub fn analyze(&self, wave: &[f64]) -> Result<(Vec<f64>, Vec<f64>, usize)> {
        let n = self.cfg.win_len;
        if wave.len() < n {
            return Err(Error::TooShort {
                len: wave.len(),
                min: n,
            });
        }
        let f = self.cfg.n_bins();
        let pad = self.cfg.pad();
        let frames = self.cfg.n_frames(wave.len());
        let mut re = vec![0.0; frames * f];
        let mut im = vec![0.0; frames * f];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            for (k, b) in buf.iter_mut().enumerate() {
                let idx = (t * self.cfg.hop + k) as isize - pad as isize;
                let v = if idx >= 0 && (idx as usize) < wave.len() {
                    wave[idx as usize]
                } else {
                    0.0
                };
                *b = Complex64::new(v * self.window[k], 0.0);
            }
            self.fwd.process(&mut buf);
            for k in 0..f {
                re[t * f + k] = buf[k].re;
                im[t * f + k] = buf[k].im;
            }
        }
        Ok((re, im, frames))
    }

    pub fn stft(&self, wave: &[f64]) -> Result<ComplexTensor> {
        let (re, im, frames) = self.analyze(wave)?;
        let shape = [frames, self.cfg.n_bins()];
        ComplexTensor::new(RealTensor::new(&shape, re)?, RealTensor::new(&shape, im)?)
    }

    /// Weighted overlap-add synthesis of `frames` one-sided spectra.
    pub fn synthesize(&self, re: &[f64], im: &[f64], frames: usize) -> Result<Vec<f64>> {
        let f = self.cfg.n_bins();
        if re.len() != frames * f || im.len() != frames * f || frames == 0 {
            return Err(crate::error::shape_err("istft", &[re.len(), im.len()], &[frames, f]));
        }
        let n = self.cfg.win_len;
        let env = self.envelope(frames);
        let mut acc = vec![0.0; env.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            for k in 0..n {
                buf[k] = if k < f {
                    let mut c = Complex64::new(re[t * f + k], im[t * f + k]);
                    if k == 0 || k == n / 2 {
                        c.im = 0.0;
                    }
                    c
                } else {
                    let m = n - k;
                    Complex64::new(re[t * f + m], -im[t * f + m])
                };
            }
            self.inv.process(&mut buf);
            for k in 0..n {
                acc[t * self.cfg.hop + k] += self.window[k] * buf[k].re / n as f64;
            }
        }
        let pad = self.cfg.pad();
        let out_len = self.cfg.synth_len(frames);
        Ok((0..out_len)
            .map(|i| {
                let e = env[i + pad];
                if e > 1e-10 {
                    acc[i + pad] / e
                } else {
                    0.0
                }
            })
            .collect())
    }

    pub fn istft(&self, spec: &ComplexTensor) -> Result<Vec<f64>> {
        let shape = spec.shape();
        if shape.len() != 2 || shape[1] != self.cfg.n_bins() {
            return Err(crate::error::shape_err("istft", shape, &[0, self.cfg.n_bins()]));
        }
        self.synthesize(spec.re.data(), spec.im.data(), shape[0])
    }

    /// Adjoint of [`Stft::analyze`]: maps a spectrum gradient to a waveform gradient.
    pub fn analyze_adjoint(&self, g_re: &[f64], g_im: &[f64], frames: usize, len: usize) -> Vec<f64> {
        let n = self.cfg.win_len;
        let f = self.cfg.n_bins();
        let pad = self.cfg.pad();
        let mut gx = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = if k < f {
                    Complex64::new(g_re[t * f + k], g_im[t * f + k])
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            self.inv.process(&mut buf);
            for k in 0..n {
                let idx = (t * self.cfg.hop + k) as isize - pad as isize;
                if idx >= 0 && (idx as usize) < len {
                    gx[idx as usize] += self.window[k] * buf[k].re;
                }
            }
        }
        gx
    }

    /// Adjoint of [`Stft::synthesize`]: maps a waveform gradient to spectrum gradients.
    pub fn synthesize_adjoint(&self, g_wave: &[f64], frames: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.cfg.win_len;
        let f = self.cfg.n_bins();
        let pad = self.cfg.pad();
        let env = self.envelope(frames);
        let mut gp = vec![0.0; env.len()];
        for (i, g) in g_wave.iter().enumerate() {
            let e = env[i + pad];
            if e > 1e-10 {
                gp[i + pad] = g / e;
            }
        }
        let mut g_re = vec![0.0; frames * f];
        let mut g_im = vec![0.0; frames * f];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(self.window[k] * gp[t * self.cfg.hop + k], 0.0);
            }
            self.fwd.process(&mut buf);
            for k in 0..f {
                let edge = k == 0 || k == n / 2;
                let c = if edge { 1.0 } else { 2.0 } / n as f64;
                g_re[t * f + k] = c * buf[k].re;
                g_im[t * f + k] = if edge { 0.0 } else { c * buf[k].im };
            }
        }
        (g_re, g_im)
    }
}
