//! Evaluation metrics: phase distance, weighted omni-directional phase
//! distortion and SI-SDR.

use std::f64::consts::PI;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::losses::{magnitude_weights, weighted_phase_terms};
use crate::tensor::RealTensor;

pub const SI_SDR_CAP_DB: f64 = 120.0;

fn check(a: &RealTensor, b: &RealTensor, w: &RealTensor) -> Result<()> {
    if a.shape() != b.shape() || a.shape() != w.shape() || a.shape().len() != 2 {
        return Err(shape_err("phase metric", a.shape(), b.shape()));
    }
    Ok(())
}

fn weighted_terms(est: &RealTensor, reference: &RealTensor, clean_mag: &RealTensor) -> Result<[Option<f64>; 3]> {
    check(est, reference, clean_mag)?;
    let w = magnitude_weights(clean_mag)?;
    let tape = Tape::inference();
    let terms = weighted_phase_terms(
        &tape,
        &Var::constant(est.clone()),
        &Var::constant(reference.clone()),
        &Var::constant(w),
    )?;
    Ok(terms.map(|t| t.map(|v| v.value().data()[0])))
}

/// Magnitude-weighted circular phase error in degrees.
pub fn pd(est: &RealTensor, reference: &RealTensor, clean_mag: &RealTensor) -> Result<f64> {
    let [ip, _, _] = weighted_terms(est, reference, clean_mag)?;
    Ok(ip.unwrap_or_default().to_degrees())
}

/// Mean over IP, GD and IAF of the weighted circular error, scaled to `[0, 1]`.
/// A direction without differences contributes zero.
pub fn wopd(est: &RealTensor, reference: &RealTensor, clean_mag: &RealTensor) -> Result<f64> {
    let terms = weighted_terms(est, reference, clean_mag)?;
    Ok(terms.iter().map(|t| t.unwrap_or_default() / PI).sum::<f64>() / 3.0)
}

/// Scale-invariant SDR in dB, clamped to `[-120, 120]`.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(shape_err("si-sdr", &[est.len()], &[reference.len()]));
    }
    let rr: f64 = reference.iter().map(|r| r * r).sum();
    if rr == 0.0 {
        return Err(Error::Silent("reference signal"));
    }
    let a = est.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / rr;
    let (mut target, mut noise) = (0.0, 0.0);
    for (e, r) in est.iter().zip(reference) {
        let t = a * r;
        target += t * t;
        noise += (e - t) * (e - t);
    }
    let db = if noise == 0.0 {
        SI_SDR_CAP_DB
    } else if target == 0.0 {
        -SI_SDR_CAP_DB
    } else {
        10.0 * (target / noise).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Compensated (Neumaier) summation.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}
