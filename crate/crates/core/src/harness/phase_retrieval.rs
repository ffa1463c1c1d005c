//! Single-utterance phase-retrieval overfit from a zero-phase input.

use std::f64::consts::PI;
use std::io::Write;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::layers::{StreamPair, Streams};
use crate::losses::{composite_loss, LossKind, LossWeights, Target};
use crate::metrics::{pd, wopd};
use crate::network::{featurize, ModelConfig, Network};
use crate::params::{Ctx, ParamStore};
use crate::signal::{griffin_lim, Stft};
use crate::tensor::{ComplexTensor, RealTensor};

pub const DEFAULT_STEPS: usize = 500;
pub const DEFAULT_LR: f64 = 1e-3;
pub const GRAD_CLIP: f64 = 5.0;
pub const GRIFFIN_LIM_ITERS: usize = 32;

/// Widths small enough for a few hundred optimizer steps on one core.
pub fn reduced_config() -> ModelConfig {
    ModelConfig {
        c_mag: 8,
        c_pha: 4,
        c_mag_head: 4,
        c_pha_head: 2,
        c_mag_hidden: 8,
        c_pha_hidden: 4,
        n_heads: 2,
        n_dual_path: 2,
        ..ModelConfig::small()
    }
}

/// Three harmonics of 200 Hz with fixed, nonzero starting phases.
pub fn harmonic_tone(len: usize, sample_rate: u32) -> Vec<f64> {
    let partials = [(200.0, 1.0, 0.3), (400.0, 0.6, 1.9), (600.0, 0.35, -2.2)];
    (0..len)
        .map(|n| {
            let t = n as f64 / sample_rate as f64;
            partials.iter().map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PhaseRetrievalOptions {
    pub model: ModelConfig,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub clip: f64,
    /// Target waveform; the harmonic tone when `None`.
    pub wave: Option<Vec<f64>>,
    /// Length of the synthesized tone in samples.
    pub tone_len: usize,
}

impl PhaseRetrievalOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            model: reduced_config(),
            seed,
            steps: DEFAULT_STEPS,
            lr: DEFAULT_LR,
            clip: GRAD_CLIP,
            wave: None,
            tone_len: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub omni: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRetrievalReport {
    pub seed: u64,
    pub model: ModelConfig,
    pub steps: usize,
    pub lr: f64,
    pub clip: f64,
    pub frames: usize,
    pub initial_omni: f64,
    pub final_omni: f64,
    pub omni_ratio: f64,
    pub pd_zero_phase_deg: f64,
    pub pd_initial_deg: f64,
    pub pd_final_deg: f64,
    pub wopd_zero_phase: f64,
    pub wopd_final: f64,
    pub pd_griffin_lim_deg: f64,
    pub griffin_lim_iters: usize,
    /// Final omni loss at most half the initial value.
    pub loss_halved: bool,
    /// Final PD below the zero-phase input PD.
    pub pd_improved: bool,
}

pub struct PhaseRetrievalRun {
    pub report: PhaseRetrievalReport,
    pub curve: Vec<CurvePoint>,
    /// Trained parameters.
    pub params: ParamStore,
}

impl PhaseRetrievalRun {
    pub fn write_curve_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for p in &self.curve {
            out.serialize(p)?;
        }
        out.flush()?;
        Ok(())
    }
}

struct Step {
    loss: f64,
    omni: f64,
    phase: RealTensor,
}

pub fn run(opts: &PhaseRetrievalOptions) -> Result<PhaseRetrievalRun> {
    let stft = Rc::new(Stft::new(Default::default())?);
    let sr = stft.config().sample_rate;
    let wave = match &opts.wave {
        Some(w) => w.clone(),
        None => harmonic_tone(opts.tone_len, sr),
    };
    let target = Target::from_wave(&stft, &wave)?;
    let (t, f) = (target.spec.shape()[0], target.spec.shape()[1]);
    let alpha = opts.model.alpha;

    // Magnitude from the target, phase fixed at 1 + 0j.
    let feats = featurize(&target.spec, alpha)?;
    let input = StreamPair::new(feats.mag, ComplexTensor::new(RealTensor::full(&[1, t, f], 1.0), RealTensor::zeros(&[1, t, f]))?)?;
    let input = Streams::constant(input);

    let mut store = ParamStore::new();
    let net = Network::new(opts.model, &mut store, opts.seed)?;
    let weights = LossWeights::default();
    let clean_mag = target.magnitude();
    let clean_phase = target.phase();

    let forward = |store: &mut ParamStore, step: usize, update: bool| -> Result<(Step, f64)> {
        let tape = if update { Tape::new() } else { Tape::inference() };
        let ctx = Ctx::new(&tape, store);
        let out = net.forward(&ctx, &input)?;
        let mag = tape.reshape(&out.mag, &[t, f])?;
        let pha = out.pha.reshape(&tape, &[t, f])?;
        let b = composite_loss(&tape, &stft, LossKind::Pr, &mag, &pha, &target, &weights, alpha)?;
        let loss = b.total.value().data()[0];
        let phase = pha.value().angle();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {loss}"),
            });
        }
        let stepped = Step {
            loss,
            omni: b.terms["omni"],
            phase,
        };
        if !update {
            return Ok((stepped, 0.0));
        }
        let grads = ctx.param_grads(&tape.backward(&b.total)?);
        drop(ctx);
        let norm = grads.iter().map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("gradient norm {norm}"),
            });
        }
        let scale = opts.lr * if norm > opts.clip { opts.clip / norm } else { 1.0 };
        for (id, g) in grads {
            for (p, g) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                *p -= scale * g;
            }
        }
        Ok((stepped, norm))
    };

    let mut curve = Vec::with_capacity(opts.steps + 1);
    let mut first: Option<Step> = None;
    for step in 0..opts.steps {
        let (s, norm) = forward(&mut store, step, true)?;
        curve.push(CurvePoint {
            step,
            loss: s.loss,
            omni: s.omni,
            grad_norm: norm,
        });
        first.get_or_insert(s);
    }
    let (last, _) = forward(&mut store, opts.steps, false)?;
    curve.push(CurvePoint {
        step: opts.steps,
        loss: last.loss,
        omni: last.omni,
        grad_norm: 0.0,
    });
    let first = match first {
        Some(s) => s,
        None => forward(&mut store, 0, false)?.0,
    };

    let zero = RealTensor::zeros(&[t, f]);
    let pd_zero = pd(&zero, &clean_phase, &clean_mag)?;
    let pd_final = pd(&last.phase, &clean_phase, &clean_mag)?;
    let gl = griffin_lim(&stft, &clean_mag, GRIFFIN_LIM_ITERS)?;
    let report = PhaseRetrievalReport {
        seed: opts.seed,
        model: opts.model,
        steps: opts.steps,
        lr: opts.lr,
        clip: opts.clip,
        frames: t,
        initial_omni: first.omni,
        final_omni: last.omni,
        omni_ratio: last.omni / first.omni,
        pd_zero_phase_deg: pd_zero,
        pd_initial_deg: pd(&first.phase, &clean_phase, &clean_mag)?,
        pd_final_deg: pd_final,
        wopd_zero_phase: wopd(&zero, &clean_phase, &clean_mag)?,
        wopd_final: wopd(&last.phase, &clean_phase, &clean_mag)?,
        pd_griffin_lim_deg: pd(&gl.phase, &clean_phase, &clean_mag)?,
        griffin_lim_iters: GRIFFIN_LIM_ITERS,
        loss_halved: last.omni <= 0.5 * first.omni,
        pd_improved: pd_final < pd_zero,
    };
    Ok(PhaseRetrievalRun {
        report,
        curve,
        params: store,
    })
}
