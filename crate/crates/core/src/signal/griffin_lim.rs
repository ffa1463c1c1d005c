//! Griffin-Lim phase reconstruction from a magnitude spectrogram.

use crate::error::{shape_err, Result};
use crate::signal::Stft;
use crate::tensor::{ComplexTensor, RealTensor};

/// Spectrum with magnitude `mag` and the phase of `like`; cells where `like`
/// vanishes get phase zero.
fn impose_magnitude(mag: &RealTensor, like: &ComplexTensor) -> Result<ComplexTensor> {
    let n = mag.len();
    let (mut re, mut im) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (i, m) in mag.data().iter().enumerate() {
        let (a, b) = like.get(i);
        let r = a.hypot(b);
        if r > 1e-300 {
            re.push(m * a / r);
            im.push(m * b / r);
        } else {
            re.push(*m);
            im.push(0.0);
        }
    }
    ComplexTensor::new(RealTensor::new(mag.shape(), re)?, RealTensor::new(mag.shape(), im)?)
}

/// `|| |STFT(ISTFT(s))| - mag ||`.
pub fn consistency_residual(stft: &Stft, spec: &ComplexTensor, mag: &RealTensor) -> Result<f64> {
    let again = stft.stft(&stft.istft(spec)?)?;
    Ok(again.modulus().sub(mag)?.norm())
}

#[derive(Clone, Debug)]
pub struct GriffinLim {
    /// Estimated phase `[T, F]` in radians.
    pub phase: RealTensor,
    /// Consistency residual of the initial estimate and after each iteration.
    pub residuals: Vec<f64>,
}

/// Zero-phase start, then `iters` rounds of ISTFT/STFT projection with the
/// magnitude reimposed.
pub fn griffin_lim(stft: &Stft, mag: &RealTensor, iters: usize) -> Result<GriffinLim> {
    let s = mag.shape();
    if s.len() != 2 || s[1] != stft.config().n_bins() {
        return Err(shape_err("griffin-lim magnitude", s, &[0, stft.config().n_bins()]));
    }
    let mut spec = ComplexTensor::new(mag.clone(), RealTensor::zeros(s))?;
    let mut residuals = vec![consistency_residual(stft, &spec, mag)?];
    for _ in 0..iters {
        let proj = stft.stft(&stft.istft(&spec)?)?;
        spec = impose_magnitude(mag, &proj)?;
        residuals.push(consistency_residual(stft, &spec, mag)?);
    }
    Ok(GriffinLim {
        phase: spec.angle(),
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::StftConfig;

    #[test]
    fn zero_iterations_give_zero_phase() {
        let stft = Stft::new(StftConfig::default()).unwrap();
        let mag = RealTensor::full(&[5, 201], 1.0);
        let gl = griffin_lim(&stft, &mag, 0).unwrap();
        assert!(gl.phase.data().iter().all(|&p| p == 0.0));
        assert_eq!(gl.residuals.len(), 1);
    }

    #[test]
    fn residual_non_increasing_on_sine() {
        let stft = Stft::new(StftConfig::default()).unwrap();
        let x: Vec<f64> = (0..4000).map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin()).collect();
        let mag = stft.stft(&x).unwrap().modulus();
        let gl = griffin_lim(&stft, &mag, 20).unwrap();
        for w in gl.residuals.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "{:?}", gl.residuals);
        }
        assert!(gl.residuals.last().unwrap() < &gl.residuals[0]);
    }
}
