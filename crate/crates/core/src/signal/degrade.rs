//! Synthetic degradations: additive noise at a target SNR, convolutive
//! reverberation, and band limitation by integer-factor resampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DegradationKind {
    #[serde(rename = "DN")]
    Dn,
    #[serde(rename = "DR")]
    Dr,
    #[serde(rename = "BWE")]
    Bwe,
    #[serde(rename = "DN+DR")]
    DnDr,
    #[serde(rename = "DN+DR+BWE")]
    DnDrBwe,
}

impl DegradationKind {
    pub fn noise(&self) -> bool {
        matches!(self, Self::Dn | Self::DnDr | Self::DnDrBwe)
    }

    pub fn reverb(&self) -> bool {
        matches!(self, Self::Dr | Self::DnDr | Self::DnDrBwe)
    }

    pub fn band_limit(&self) -> bool {
        matches!(self, Self::Bwe | Self::DnDrBwe)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Dn => "DN",
            Self::Dr => "DR",
            Self::Bwe => "BWE",
            Self::DnDr => "DN+DR",
            Self::DnDrBwe => "DN+DR+BWE",
        }
    }
}

/// Degradation recipe. A reverberant kind takes `rir` verbatim or
/// synthesizes one from `rir_t60_ms` and `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub cutoff_hz: Option<f64>,
    #[serde(default)]
    pub rir: Option<Vec<f64>>,
    #[serde(default)]
    pub rir_t60_ms: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

pub const RIR_SECONDS: f64 = 0.5;
const RIR_TAIL_GAIN: f64 = 0.2;

impl DegradationSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.kind.noise() {
            match self.snr_db {
                Some(s) if s.is_finite() => {}
                _ => return Err(Error::Invalid("noise degradation needs a finite snr_db".into())),
            }
        }
        if self.kind.reverb() && self.rir.is_none() && self.rir_t60_ms.is_none() {
            return Err(Error::Invalid("reverberation needs rir or rir_t60_ms".into()));
        }
        if self.kind.band_limit() {
            let c = self
                .cutoff_hz
                .ok_or_else(|| Error::Invalid("bandwidth limitation needs cutoff_hz".into()))?;
            resample_factor(c, sample_rate)?;
        }
        Ok(())
    }

    /// The impulse response this spec applies, if any.
    pub fn impulse_response(&self, sample_rate: u32) -> Result<Option<Vec<f64>>> {
        if !self.kind.reverb() {
            return Ok(None);
        }
        if let Some(r) = &self.rir {
            return Ok(Some(r.clone()));
        }
        let t60 = self.rir_t60_ms.unwrap_or_default();
        let len = (RIR_SECONDS * sample_rate as f64) as usize;
        make_rir(t60, len, sample_rate, self.seed).map(Some)
    }
}

fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Adds `noise` (tiled or trimmed to length) scaled to the requested SNR.
pub fn add_noise(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<Vec<f64>> {
    if !snr_db.is_finite() {
        return Err(Error::Invalid(format!("snr_db {snr_db} is not finite")));
    }
    let p_clean = mean_power(clean);
    if p_clean == 0.0 {
        return Err(Error::Silent("clean signal"));
    }
    if noise.is_empty() {
        return Err(Error::Silent("noise signal"));
    }
    let tiled: Vec<f64> = noise.iter().cycle().take(clean.len()).copied().collect();
    let p_noise = mean_power(&tiled);
    if p_noise == 0.0 {
        return Err(Error::Silent("noise signal"));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(clean.iter().zip(&tiled).map(|(c, n)| c + gain * n).collect())
}

/// Causal convolution truncated to the input length.
pub fn reverberate(x: &[f64], rir: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|n| {
            rir.iter()
                .take(n + 1)
                .enumerate()
                .map(|(k, h)| h * x[n - k])
                .sum()
        })
        .collect()
}

/// Unit direct path followed by an exponentially decaying Gaussian tail that
/// falls by 60 dB after `t60_ms`.
pub fn make_rir(t60_ms: f64, length: usize, sample_rate: u32, seed: u64) -> Result<Vec<f64>> {
    if !(t60_ms > 0.0) || length == 0 {
        return Err(Error::Invalid(format!("bad RIR request t60={t60_ms} ms, length={length}")));
    }
    let n60 = t60_ms * 1e-3 * sample_rate as f64;
    let decay = 3.0 * std::f64::consts::LN_10 / n60;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = Vec::with_capacity(length);
    h.push(1.0);
    for n in 1..length {
        let g: f64 = StandardNormal.sample(&mut rng);
        h.push(RIR_TAIL_GAIN * g * (-decay * n as f64).exp());
    }
    Ok(h)
}

/// Seeded unit-variance Gaussian noise.
pub fn white_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn resample_factor(cutoff_hz: f64, sample_rate: u32) -> Result<usize> {
    let nyq = sample_rate as f64 / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyq) {
        return Err(Error::Invalid(format!("cutoff {cutoff_hz} Hz outside (0, {nyq})")));
    }
    let m = sample_rate as f64 / (2.0 * cutoff_hz);
    if (m - m.round()).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "cutoff {cutoff_hz} Hz does not give an integer resampling factor"
        )));
    }
    Ok(m.round() as usize)
}

/// Kaiser-windowed sinc low-pass.
fn lowpass(cutoff: f64, transition: f64, atten_db: f64) -> Vec<f64> {
    let beta = if atten_db > 50.0 {
        0.1102 * (atten_db - 8.7)
    } else {
        0.5842 * (atten_db - 21.0).powf(0.4) + 0.07886 * (atten_db - 21.0)
    };
    let dw = 2.0 * std::f64::consts::PI * transition;
    let mut n = ((atten_db - 8.0) / (2.285 * dw)).ceil() as usize + 1;
    if n % 2 == 0 {
        n += 1;
    }
    let mid = (n / 2) as f64;
    let i0b = bessel_i0(beta);
    (0..n)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * std::f64::consts::PI * cutoff * t).sin() / (std::f64::consts::PI * t)
            };
            let r = t / mid;
            sinc * bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0b
        })
        .collect()
}

fn bessel_i0(x: f64) -> f64 {
    let (mut sum, mut term, mut k) = (1.0, 1.0, 1.0);
    while term > 1e-17 * sum {
        term *= (x / (2.0 * k)).powi(2);
        sum += term;
        k += 1.0;
    }
    sum
}

/// Zero-phase FIR filtering with the output aligned to the input.
fn filter_centered(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mid = h.len() / 2;
    (0..x.len())
        .map(|n| {
            h.iter()
                .enumerate()
                .filter_map(|(k, c)| {
                    let idx = n as isize + mid as isize - k as isize;
                    (idx >= 0 && (idx as usize) < x.len()).then(|| c * x[idx as usize])
                })
                .sum()
        })
        .collect()
}

/// Stop-band attenuation of the resampling filter.
pub const BWE_STOPBAND_DB: f64 = 70.0;

/// Decimates to `2 * cutoff_hz` and interpolates back. The anti-alias and
/// interpolation filters share a pass-band edge 10% below the cutoff.
pub fn band_limit(x: &[f64], cutoff_hz: f64, sample_rate: u32) -> Result<Vec<f64>> {
    let m = resample_factor(cutoff_hz, sample_rate)?;
    let sr = sample_rate as f64;
    let h = lowpass(0.95 * cutoff_hz / sr, 0.1 * cutoff_hz / sr, BWE_STOPBAND_DB);
    let y = filter_centered(x, &h);
    let low: Vec<f64> = y.iter().step_by(m).copied().collect();
    let mut up = vec![0.0; x.len()];
    for (i, v) in low.iter().enumerate() {
        up[i * m] = v * m as f64;
    }
    Ok(filter_centered(&up, &h))
}

/// Applies reverberation, then noise, then band limitation as the kind requires.
/// Returns `(degraded, clean)`.
pub fn degrade(
    clean: &[f64],
    spec: &DegradationSpec,
    noise: Option<&[f64]>,
    sample_rate: u32,
) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.validate(sample_rate)?;
    let mut y = clean.to_vec();
    if let Some(rir) = spec.impulse_response(sample_rate)? {
        y = reverberate(&y, &rir);
    }
    if spec.kind.noise() {
        let noise = noise.ok_or_else(|| Error::Invalid("noise degradation needs a noise signal".into()))?;
        y = add_noise(&y, noise, spec.snr_db.unwrap_or_default())?;
    }
    if spec.kind.band_limit() {
        y = band_limit(&y, spec.cutoff_hz.unwrap_or_default(), sample_rate)?;
    }
    Ok((y, clean.to_vec()))
}
