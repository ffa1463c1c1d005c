//! Training objectives on the tape: magnitude, anti-wrapped phase, complex,
//! consistency and waveform terms, plus the magnitude-weighted omni-directional
//! phase loss.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cvar::CVar;
use crate::error::{shape_err, Error, Result};
use crate::signal::Stft;
use crate::tensor::{ComplexTensor, RealTensor};

/// Floor inside the consistency-term compression.
pub const COMPRESS_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mag: f64,
    pub pha: f64,
    pub com: f64,
    pub metric: f64,
    pub con: f64,
    pub time: f64,
    pub mpd: f64,
    pub pr_omni: f64,
    pub pr_mpd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mag: 0.9,
            pha: 0.3,
            com: 0.2,
            metric: 0.05,
            con: 0.1,
            time: 0.2,
            mpd: 0.05,
            pr_omni: 2e4,
            pr_mpd: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LossKind {
    Dn,
    Use,
    Pr,
}

/// First differences of a `[T, F]` map along `axis`, or `None` if the axis has fewer than two entries.
fn diff(tape: &Tape, x: &Var, axis: usize) -> Result<Option<Var>> {
    let n = x.shape()[axis];
    if n < 2 {
        return Ok(None);
    }
    let hi = tape.slice(x, axis, 1, n - 1)?;
    let lo = tape.slice(x, axis, 0, n - 1)?;
    Ok(Some(tape.sub(&hi, &lo)?))
}

fn check_map(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape().len() != 2 || a.shape() != b.shape() {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Instantaneous phase, group delay and instantaneous angular frequency
/// errors: `(IP, GD, IAF)`, the latter two `None` when degenerate.
fn phase_errors(tape: &Tape, est: &Var, reference: &Var) -> Result<[Option<Var>; 3]> {
    let d = tape.sub(est, reference)?;
    Ok([Some(d.clone()), diff(tape, &d, 1)?, diff(tape, &d, 0)?])
}

pub struct PhaseLoss {
    pub total: Var,
    pub ip: f64,
    pub gd: f64,
    pub iaf: f64,
    /// Set when a difference term was dropped because its axis has fewer than two entries.
    pub degenerate: bool,
}

/// Mean of the anti-wrapped IP, GD and IAF errors between `[T, F]` phase maps.
pub fn phase_loss(tape: &Tape, est: &Var, reference: &Var) -> Result<PhaseLoss> {
    check_map("phase loss", est, reference)?;
    let mut parts = Vec::new();
    let mut values = [0.0; 3];
    let mut degenerate = false;
    for (i, e) in phase_errors(tape, est, reference)?.into_iter().enumerate() {
        match e {
            Some(e) => {
                let m = tape.mean_all(&tape.anti_wrap(&e));
                values[i] = m.value().data()[0];
                parts.push(m);
            }
            None => degenerate = true,
        }
    }
    let mut total = parts[0].clone();
    for p in &parts[1..] {
        total = tape.add(&total, p)?;
    }
    Ok(PhaseLoss {
        total: tape.scale(&total, 1.0 / 3.0),
        ip: values[0],
        gd: values[1],
        iaf: values[2],
        degenerate,
    })
}

/// Slices of the weight map aligned with each error direction.
fn direction_weights(tape: &Tape, w: &Var) -> Result<[Option<Var>; 3]> {
    let (t, f) = (w.shape()[0], w.shape()[1]);
    Ok([
        Some(w.clone()),
        (f >= 2).then(|| tape.slice(w, 1, 1, f - 1)).transpose()?,
        (t >= 2).then(|| tape.slice(w, 0, 1, t - 1)).transpose()?,
    ])
}

/// Per-direction weighted anti-wrapped errors `sum(W * f_AW(delta))`.
pub fn weighted_phase_terms(tape: &Tape, est: &Var, reference: &Var, weights: &Var) -> Result<[Option<Var>; 3]> {
    check_map("weighted phase error", est, reference)?;
    check_map("weighted phase error", est, weights)?;
    let errs = phase_errors(tape, est, reference)?;
    let ws = direction_weights(tape, weights)?;
    let mut out: [Option<Var>; 3] = [None, None, None];
    for (i, (e, w)) in errs.into_iter().zip(ws).enumerate() {
        if let (Some(e), Some(w)) = (e, w) {
            out[i] = Some(tape.sum(&tape.mul(&tape.anti_wrap(&e), &w)?));
        }
    }
    Ok(out)
}

/// Clean magnitude normalized to unit sum.
pub fn magnitude_weights(mag: &RealTensor) -> Result<RealTensor> {
    let s = mag.sum();
    if !(s > 0.0) {
        return Err(Error::Silent("weighting magnitude"));
    }
    Ok(mag.scale(1.0 / s))
}

/// Sum over the three directions of the weighted anti-wrapped error.
pub fn omni_loss(tape: &Tape, est: &Var, reference: &Var, weights: &Var) -> Result<Var> {
    let mut total: Option<Var> = None;
    for t in weighted_phase_terms(tape, est, reference, weights)?.into_iter().flatten() {
        total = Some(match total {
            None => t,
            Some(acc) => tape.add(&acc, &t)?,
        });
    }
    Ok(total.expect("the IP term always exists"))
}

fn mse(tape: &Tape, a: &Var, b: &Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    Ok(tape.mean_all(&tape.mul(&d, &d)?))
}

fn complex_mse(tape: &Tape, a: &CVar, b: &CVar) -> Result<Var> {
    let re = mse(tape, &a.re, &b.re)?;
    let im = mse(tape, &a.im, &b.im)?;
    Ok(tape.scale(&tape.add(&re, &im)?, 0.5))
}

/// `S |S|^(alpha - 1)` with a floor on `|S|^2`.
pub fn compress(tape: &Tape, s: &CVar, alpha: f64) -> Result<CVar> {
    let p = tape.add_scalar(&s.power(tape)?, COMPRESS_EPS);
    s.scale_by(tape, &tape.powf(&p, (alpha - 1.0) / 2.0))
}

/// Clean reference for the composite losses.
#[derive(Clone, Debug)]
pub struct Target {
    /// Uncompressed clean spectrum `[T, F]`.
    pub spec: ComplexTensor,
    /// Clean waveform trimmed or zero-padded to the synthesis length of `spec`.
    pub wave: Vec<f64>,
}

impl Target {
    pub fn from_wave(stft: &Stft, wave: &[f64]) -> Result<Self> {
        let spec = stft.stft(wave)?;
        let mut w = wave.to_vec();
        w.resize(stft.config().synth_len(spec.shape()[0]), 0.0);
        Ok(Self { spec, wave: w })
    }

    pub fn magnitude(&self) -> RealTensor {
        self.spec.modulus()
    }

    pub fn phase(&self) -> RealTensor {
        self.spec.angle()
    }

    pub fn compressed_magnitude(&self, alpha: f64) -> RealTensor {
        self.magnitude().map(|m| m.powf(alpha))
    }
}

pub struct LossBreakdown {
    pub total: Var,
    pub terms: BTreeMap<&'static str, f64>,
    pub degenerate: bool,
}

fn scalar(v: &Var) -> f64 {
    v.value().data()[0]
}

/// Weighted objective for a prediction given as compressed magnitude and a
/// complex phase carrier, both `[T, F]`.
pub fn composite_loss(
    tape: &Tape,
    stft: &Rc<Stft>,
    kind: LossKind,
    pred_mag: &Var,
    pred_pha: &CVar,
    target: &Target,
    weights: &LossWeights,
    alpha: f64,
) -> Result<LossBreakdown> {
    let tshape = target.spec.shape();
    if pred_mag.shape() != tshape || pred_pha.shape() != tshape {
        return Err(shape_err("composite loss", pred_mag.shape(), tshape));
    }
    let mut terms = BTreeMap::new();
    let angle = tape.atan2(&pred_pha.im, &pred_pha.re)?;
    let phase_ref = Var::constant(target.phase());

    if kind == LossKind::Pr {
        let w = Var::constant(magnitude_weights(&target.magnitude())?);
        let omni = omni_loss(tape, &angle, &phase_ref, &w)?;
        terms.insert("omni", scalar(&omni));
        terms.insert("mpd", 0.0);
        let degenerate = tshape[0] < 2 || tshape[1] < 2;
        return Ok(LossBreakdown {
            total: tape.scale(&omni, weights.pr_omni),
            terms,
            degenerate,
        });
    }

    let mag_ref = Var::constant(target.compressed_magnitude(alpha));
    let l_mag = mse(tape, pred_mag, &mag_ref)?;
    let pha = phase_loss(tape, &angle, &phase_ref)?;

    // Predicted compressed spectrum and its reference.
    let pred_c = pred_pha.scale_by(tape, pred_mag)?;
    let ref_c = CVar::constant(ComplexTensor::from_polar(&target.compressed_magnitude(alpha), &target.phase())?);
    let l_com = complex_mse(tape, &pred_c, &ref_c)?;

    // Waveform from the decompressed prediction.
    let raw = pred_pha.scale_by(tape, &tape.powf(pred_mag, 1.0 / alpha))?;
    let (t, f) = (tshape[0], tshape[1]);
    let stacked = tape.reshape(&tape.concat(&[raw.re.clone(), raw.im.clone()], 0)?, &[2, t, f])?;
    let wave = tape.istft(stft, &stacked)?;
    let l_time = tape.mean_all(&tape.abs(&tape.sub(&wave, &Var::constant(RealTensor::new(&[target.wave.len()], target.wave.clone())?))?));

    // Consistency: re-analyze the synthesized waveform.
    let re_spec = tape.stft(stft, &wave)?;
    let re_c = CVar {
        re: tape.reshape(&tape.slice(&re_spec, 0, 0, 1)?, &[t, f])?,
        im: tape.reshape(&tape.slice(&re_spec, 0, 1, 1)?, &[t, f])?,
    };
    let l_con = complex_mse(tape, &pred_c, &compress(tape, &re_c, alpha)?)?;

    let mut total = tape.scale(&l_mag, weights.mag);
    for (w, v) in [
        (weights.pha, &pha.total),
        (weights.com, &l_com),
        (weights.con, &l_con),
        (weights.time, &l_time),
    ] {
        total = tape.add(&total, &tape.scale(v, w))?;
    }
    // Adversarial slots carry their weights but evaluate to zero here.
    terms.insert("mag", scalar(&l_mag));
    terms.insert("pha", scalar(&pha.total));
    terms.insert("com", scalar(&l_com));
    terms.insert("metric", 0.0);
    terms.insert("con", scalar(&l_con));
    terms.insert("time", scalar(&l_time));
    if kind == LossKind::Use {
        terms.insert("mpd", 0.0);
    }
    Ok(LossBreakdown {
        total,
        terms,
        degenerate: pha.degenerate,
    })
}

/// Consistency term alone, for a fixed spectrum.
pub fn consistency_loss(stft: &Rc<Stft>, spec: &ComplexTensor, alpha: f64) -> Result<f64> {
    let tape = Tape::inference();
    let (t, f) = (spec.shape()[0], spec.shape()[1]);
    let s = CVar::constant(spec.clone());
    let pred_c = compress(&tape, &s, alpha)?;
    let stacked = tape.reshape(&tape.concat(&[s.re.clone(), s.im.clone()], 0)?, &[2, t, f])?;
    let wave = tape.istft(stft, &stacked)?;
    let re_spec = tape.stft(stft, &wave)?;
    let re_c = CVar {
        re: tape.reshape(&tape.slice(&re_spec, 0, 0, 1)?, &[t, f])?,
        im: tape.reshape(&tape.slice(&re_spec, 0, 1, 1)?, &[t, f])?,
    };
    Ok(scalar(&complex_mse(&tape, &pred_c, &compress(&tape, &re_c, alpha)?)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::anti_wrap;
    use crate::signal::StftConfig;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn rand_map(t: usize, f: usize, seed: u64, lo: f64, hi: f64) -> RealTensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        RealTensor::new(&[t, f], (0..t * f).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    fn c(x: &RealTensor) -> Var {
        Var::constant(x.clone())
    }

    #[test]
    fn anti_wrap_examples() {
        assert_eq!(anti_wrap(0.0), 0.0);
        assert!(anti_wrap(2.0 * PI).abs() < 1e-15);
        assert!((anti_wrap(PI) - PI).abs() < 1e-15);
        assert!((anti_wrap(-PI) - PI).abs() < 1e-15);
        assert!((anti_wrap(3.0 * PI) - PI).abs() < 1e-12);
        assert!((anti_wrap(0.1 + 4.0 * PI) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn anti_wrap_grid_properties() {
        for i in -2000..=2000 {
            let x = i as f64 * 0.01;
            let v = anti_wrap(x);
            assert!((0.0..=PI).contains(&v));
            assert!((v - anti_wrap(-x)).abs() < 1e-12);
            assert!((v - anti_wrap(x + 2.0 * PI)).abs() < 1e-9);
        }
    }

    #[test]
    fn phase_loss_identical_and_offset() {
        let tape = Tape::inference();
        let p = rand_map(4, 6, 1, -PI, PI);
        let l = phase_loss(&tape, &c(&p), &c(&p)).unwrap();
        assert_eq!(l.total.value().data()[0], 0.0);
        let theta = 2.5;
        let q = p.map(|v| v + theta);
        let l = phase_loss(&tape, &c(&q), &c(&p)).unwrap();
        assert!((l.ip - anti_wrap(theta)).abs() < 1e-12);
        assert!(l.gd.abs() < 1e-12 && l.iaf.abs() < 1e-12);
        assert!(!l.degenerate);
    }

    #[test]
    fn phase_loss_brute_force() {
        let tape = Tape::inference();
        let a = rand_map(4, 4, 2, -PI, PI);
        let b = rand_map(4, 4, 3, -PI, PI);
        let (x, y) = (a.data(), b.data());
        let at = |v: &[f64], t: usize, f: usize| v[t * 4 + f];
        let (mut ip, mut gd, mut iaf) = (0.0, 0.0, 0.0);
        for t in 0..4 {
            for f in 0..4 {
                ip += anti_wrap(at(x, t, f) - at(y, t, f));
                if f > 0 {
                    gd += anti_wrap((at(x, t, f) - at(x, t, f - 1)) - (at(y, t, f) - at(y, t, f - 1)));
                }
                if t > 0 {
                    iaf += anti_wrap((at(x, t, f) - at(x, t - 1, f)) - (at(y, t, f) - at(y, t - 1, f)));
                }
            }
        }
        let want = (ip / 16.0 + gd / 12.0 + iaf / 12.0) / 3.0;
        let got = phase_loss(&tape, &c(&a), &c(&b)).unwrap().total.value().data()[0];
        assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn phase_loss_single_frame_is_flagged() {
        let tape = Tape::inference();
        let a = rand_map(1, 4, 2, -PI, PI);
        let b = rand_map(1, 4, 3, -PI, PI);
        let l = phase_loss(&tape, &c(&a), &c(&b)).unwrap();
        assert!(l.degenerate);
        assert_eq!(l.iaf, 0.0);
    }

    #[test]
    fn omni_examples() {
        let tape = Tape::inference();
        let a = rand_map(3, 3, 4, -PI, PI);
        let b = rand_map(3, 3, 5, -PI, PI);
        let w = magnitude_weights(&rand_map(3, 3, 6, 0.0, 1.0)).unwrap();
        assert_eq!(omni_loss(&tape, &c(&a), &c(&a), &c(&w)).unwrap().value().data()[0], 0.0);

        let mut one_hot = RealTensor::zeros(&[3, 3]);
        one_hot.data_mut()[0] = 1.0;
        let got = omni_loss(&tape, &c(&a), &c(&b), &c(&one_hot)).unwrap().value().data()[0];
        assert!((got - anti_wrap(a.data()[0] - b.data()[0])).abs() < 1e-15);

        let (x, y, wd) = (a.data(), b.data(), w.data());
        let mut want = 0.0;
        for t in 0..3 {
            for f in 0..3 {
                let i = t * 3 + f;
                want += wd[i] * anti_wrap(x[i] - y[i]);
                if f > 0 {
                    want += wd[i] * anti_wrap((x[i] - x[i - 1]) - (y[i] - y[i - 1]));
                }
                if t > 0 {
                    want += wd[i] * anti_wrap((x[i] - x[i - 3]) - (y[i] - y[i - 3]));
                }
            }
        }
        let got = omni_loss(&tape, &c(&a), &c(&b), &c(&w)).unwrap().value().data()[0];
        assert!((got - want).abs() <= 1e-12);
    }

    fn toy_target(stft: &Stft) -> Target {
        let x: Vec<f64> = (0..800)
            .map(|i| (i as f64 * 0.11).sin() + 0.4 * (i as f64 * 0.53).cos() + 0.05)
            .collect();
        Target::from_wave(stft, &x).unwrap()
    }

    #[test]
    fn weights_are_verbatim() {
        let w = LossWeights::default();
        assert_eq!(
            [w.mag, w.pha, w.com, w.metric, w.con, w.time, w.mpd, w.pr_omni, w.pr_mpd],
            [0.9, 0.3, 0.2, 0.05, 0.1, 0.2, 0.05, 2e4, 1.0]
        );
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let stft = Rc::new(Stft::new(StftConfig::default()).unwrap());
        let target = toy_target(&stft);
        let alpha = 0.3;
        let mag = c(&target.compressed_magnitude(alpha));
        let pha = CVar::constant(ComplexTensor::from_polar(&RealTensor::full(target.spec.shape(), 1.0), &target.phase()).unwrap());
        let tape = Tape::inference();
        for kind in [LossKind::Dn, LossKind::Use, LossKind::Pr] {
            let l = composite_loss(&tape, &stft, kind, &mag, &pha, &target, &LossWeights::default(), alpha).unwrap();
            for (name, v) in &l.terms {
                assert!(v.abs() <= 1e-9, "{kind:?} {name} = {v}");
            }
            assert!(l.total.value().data()[0].abs() <= 1e-6);
        }
    }

    #[test]
    fn inconsistent_spectrum_has_positive_consistency_loss() {
        let stft = Rc::new(Stft::new(StftConfig::default()).unwrap());
        let target = toy_target(&stft);
        let s = target.spec.shape().to_vec();
        let random = ComplexTensor::from_polar(&target.magnitude(), &rand_map(s[0], s[1], 8, -PI, PI)).unwrap();
        let before = consistency_loss(&stft, &random, 0.3).unwrap();
        assert!(before > 0.0);
        let projected = stft.stft(&stft.istft(&random).unwrap()).unwrap();
        let after = consistency_loss(&stft, &projected, 0.3).unwrap();
        assert!(after < before, "{after} vs {before}");
    }
}
