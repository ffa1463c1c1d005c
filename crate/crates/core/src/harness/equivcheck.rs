//! Global-phase-rotation equivariance sweep over every phase-carrying unit.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use super::{random_complex, random_real, rng};
use crate::autodiff::{anti_wrap, Tape, Var};
use crate::conv::ConvGeom;
use crate::cvar::CVar;
use crate::error::Result;
use crate::hadf::{DualPath, HadfBlock, HybridAttention, PhaFfn};
use crate::layers::{eval, DenseBlock, Mpicm, MpicmMode, StreamPair, Streams, CRMS_EPS};
use crate::network::{ModelConfig, Network, DENSE_DEPTH};
use crate::params::{BreakMode, Ctx, Init, ParamStore};
use crate::tensor::{relative_error, relative_error_real, ComplexTensor, RealTensor};

pub const DEFAULT_THETAS: [f64; 5] = [0.0, 0.41, FRAC_PI_2, 2.0, 2.0 * PI - 1e-3];
pub const LAYER_TOL: f64 = 1e-9;
pub const DUAL_PATH_TOL: f64 = 1e-8;
pub const SCORE_TOL: f64 = 1e-10;
/// Circular phase error of the full network, in radians.
pub const NETWORK_ANGLE_TOL: f64 = 1e-6;
pub const NETWORK_MAG_TOL: f64 = 1e-10;
/// Residual an ablated unit must reach to count as broken.
pub const BREAK_MIN: f64 = 1e-2;
pub const BREAK_MIN_SCORES: f64 = 1e-3;
/// Bound for `theta = 0`, where the rotation is the identity.
pub const IDENTITY_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct EquivcheckOptions {
    pub model: ModelConfig,
    pub seed: u64,
    pub frames: usize,
    /// Batch size for the sequence-level units.
    pub batch: usize,
    pub break_mode: BreakMode,
    pub thetas: Vec<f64>,
}

impl EquivcheckOptions {
    pub fn new(model: ModelConfig, seed: u64, break_mode: BreakMode) -> Self {
        Self {
            model,
            seed,
            frames: 16,
            batch: 4,
            break_mode,
            thetas: DEFAULT_THETAS.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expectation {
    /// Residual must stay at or below the threshold.
    Equivariant,
    /// Residual must reach at least the threshold.
    Broken,
    /// Ablated unit at a rotation too close to the identity to judge.
    Unconstrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivRow {
    pub unit_name: String,
    pub theta: f64,
    pub rel_error: f64,
    pub expect: Expectation,
    pub threshold: f64,
    pub pass: bool,
}

/// Worst residual of one unit over the non-identity rotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitVerdict {
    pub unit_name: String,
    pub max_rel_error: f64,
    pub expect: Expectation,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub break_mode: BreakMode,
    pub seed: u64,
    pub frames: usize,
    pub model: ModelConfig,
    pub thetas: Vec<f64>,
    pub rows: Vec<EquivRow>,
    pub units: Vec<UnitVerdict>,
    pub pass: bool,
}

impl EquivarianceReport {
    pub fn rows_for<'a>(&'a self, unit: &'a str) -> impl Iterator<Item = &'a EquivRow> + 'a {
        self.rows.iter().filter(move |r| r.unit_name == unit)
    }

    pub fn unit(&self, name: &str) -> Option<&UnitVerdict> {
        self.units.iter().find(|u| u.unit_name == name)
    }
}

enum Output {
    Pair { mag: Option<RealTensor>, pha: ComplexTensor },
    Scores(Vec<RealTensor>),
}

#[derive(Clone, Copy)]
enum Measure {
    /// Relative error of both streams against the rotated reference.
    Relative,
    /// Largest absolute change of any score.
    MaxAbs,
    /// Largest circular deviation of the output angle from `angle + theta`.
    Angle,
    /// Relative error of the magnitude stream alone.
    Magnitude,
}

struct Probe {
    name: &'static str,
    measure: Measure,
    tol: f64,
    break_min: f64,
    targeted_by: &'static [BreakMode],
}

type RunFn<'a> = Box<dyn Fn(&Ctx, f64) -> Result<Output> + 'a>;

struct UnitCase<'a> {
    run: RunFn<'a>,
    probes: Vec<Probe>,
}

const MPICM: &[BreakMode] = &[BreakMode::Mpicm];
const ATTN: &[BreakMode] = &[BreakMode::Attn];
const FFN: &[BreakMode] = &[BreakMode::Ffn];
const ATTN_FFN: &[BreakMode] = &[BreakMode::Attn, BreakMode::Ffn];
const ALL: &[BreakMode] = &[BreakMode::Mpicm, BreakMode::Attn, BreakMode::Ffn];
const NONE: &[BreakMode] = &[];

fn probe(name: &'static str, measure: Measure, tol: f64, targeted_by: &'static [BreakMode]) -> Probe {
    let break_min = match measure {
        Measure::MaxAbs => BREAK_MIN_SCORES,
        _ => BREAK_MIN,
    };
    Probe {
        name,
        measure,
        tol,
        break_min,
        targeted_by,
    }
}

fn pair(s: Streams) -> Output {
    let v = s.value();
    Output::Pair {
        mag: Some(v.mag),
        pha: v.pha,
    }
}

fn phase_only(z: CVar) -> Output {
    Output::Pair { mag: None, pha: z.value() }
}

fn residual(measure: Measure, base: &Output, rotated: &Output, theta: f64) -> f64 {
    match (base, rotated) {
        (Output::Pair { mag: m0, pha: p0 }, Output::Pair { mag: m1, pha: p1 }) => {
            let mag = match (m0, m1) {
                (Some(a), Some(b)) => relative_error_real(b, a),
                _ => 0.0,
            };
            match measure {
                Measure::Magnitude => mag,
                Measure::Angle => {
                    let (a0, a1) = (p0.angle(), p1.angle());
                    a0.data()
                        .iter()
                        .zip(a1.data())
                        .map(|(x, y)| anti_wrap(y - x - theta).abs())
                        .fold(0.0, f64::max)
                }
                _ => relative_error(p1, &p0.rotate(theta)).max(mag),
            }
        }
        (Output::Scores(a), Output::Scores(b)) => a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max),
        _ => f64::INFINITY,
    }
}

fn rotate_streams(x: &StreamPair, theta: f64) -> Streams {
    Streams::constant(x.rotate_phase(theta))
}

fn random_streams(rng: &mut rand_chacha::ChaCha8Rng, c: (usize, usize), rest: &[usize]) -> Result<StreamPair> {
    let mut ms = vec![c.0];
    ms.extend_from_slice(rest);
    let mut ps = vec![c.1];
    ps.extend_from_slice(rest);
    StreamPair::new(random_real(rng, &ms, -1.0, 1.0), random_complex(rng, &ps))
}

/// Builds every unit, registering parameters in `store`, with inputs drawn from `seed`.
fn build_units<'a>(opts: &EquivcheckOptions, store: &mut ParamStore) -> Result<Vec<UnitCase<'a>>> {
    let cfg = opts.model;
    let (t, f, b) = (opts.frames, cfg.f, opts.batch);
    let c = (cfg.c_mag, cfg.c_pha);
    let dims = cfg.hadf_dims();
    let fh = MpicmMode::Downsample.out_freq(f)?;
    let mut r = rng(opts.seed ^ 0x5eed);

    let mut init = Init::new(store, opts.seed);
    let gate = Mpicm::new(&mut init, "gate", MpicmMode::Standard { dilation: 1 }, c, c, f)?;
    let mpicm = Mpicm::new(&mut init, "mpicm", MpicmMode::Standard { dilation: 2 }, c, c, f)?;
    let dense = DenseBlock::new(&mut init, "dense", c, f, DENSE_DEPTH)?;
    let attention = HybridAttention::new(&mut init, "attention", dims)?;
    let ffn = PhaFfn::new(&mut init, "pha_ffn", cfg.c_pha, 2 * cfg.c_pha_hidden)?;
    let block = HadfBlock::new(&mut init, "hadf", dims)?;
    let dual = DualPath::new(&mut init, "dual_path", dims, cfg.n_dual_path)?;
    let network = Network::new(cfg, store, opts.seed.wrapping_add(1))?;

    let k = random_complex(&mut r, &[c.1, c.1, 3, 3]);
    let kernel = ComplexTensor::new(k.re.scale(1.0 / 3.0), k.im.scale(1.0 / 3.0))?;
    let conv_in = random_complex(&mut r, &[c.1, t, f]);
    let gamma = random_real(&mut r, &[c.1, 1, f], 0.5, 1.5);
    let norm_in = random_complex(&mut r, &[c.1, t, f]);
    let gate_in = random_streams(&mut r, c, &[t, f])?;
    let mpicm_in = random_streams(&mut r, c, &[t, f])?;
    let dense_in = random_streams(&mut r, c, &[t, f])?;
    // Sequence layout [B', L, C]: channels last, so the pair is not channel-aligned.
    let seq_in = StreamPair {
        mag: random_real(&mut r, &[b, t, c.0], -1.0, 1.0),
        pha: random_complex(&mut r, &[b, t, c.1]),
    };
    let dual_in = random_streams(&mut r, c, &[t, fh])?;
    let net_in = StreamPair::new(
        random_real(&mut r, &[1, t, f], 0.05, 1.0),
        ComplexTensor::from_polar(&RealTensor::full(&[1, t, f], 1.0), &random_real(&mut r, &[1, t, f], -PI, PI))?,
    )?;

    let seq_in2 = seq_in.clone();
    let seq_in3 = seq_in.clone();
    Ok(vec![
        UnitCase {
            run: Box::new(move |_, th| {
                let y = eval::complex_conv2d(&conv_in.rotate(th), &kernel, ConvGeom::same((3, 3), (1, 1)))?;
                Ok(Output::Pair { mag: None, pha: y })
            }),
            probes: vec![probe("complex_conv", Measure::Relative, LAYER_TOL, NONE)],
        },
        UnitCase {
            run: Box::new(move |_, th| {
                let y = eval::crms_norm(&norm_in.rotate(th), &gamma, CRMS_EPS)?;
                Ok(Output::Pair { mag: None, pha: y })
            }),
            probes: vec![probe("crms_norm", Measure::Relative, LAYER_TOL, NONE)],
        },
        UnitCase {
            run: Box::new(move |ctx, th| {
                let m = Var::constant(gate_in.mag.clone());
                let p = CVar::constant(gate_in.pha.rotate(th));
                Ok(pair(gate.interact(ctx, &m, &p)?))
            }),
            probes: vec![probe("gate_interaction", Measure::Relative, LAYER_TOL, MPICM)],
        },
        UnitCase {
            run: Box::new(move |ctx, th| Ok(pair(mpicm.forward(ctx, &rotate_streams(&mpicm_in, th))?))),
            probes: vec![probe("mpicm", Measure::Relative, LAYER_TOL, MPICM)],
        },
        UnitCase {
            run: Box::new(move |ctx, th| Ok(pair(dense.forward(ctx, &rotate_streams(&dense_in, th))?))),
            probes: vec![probe("dense_block", Measure::Relative, LAYER_TOL, MPICM)],
        },
        UnitCase {
            run: Box::new(move |ctx, th| {
                let x = rotate_streams(&seq_in, th);
                let out = attention.forward(ctx, &x.mag, &x.pha, None)?;
                Ok(Output::Scores(out.scores.iter().map(|s| s.value().clone()).collect()))
            }),
            probes: vec![probe("attention_scores", Measure::MaxAbs, SCORE_TOL, ATTN)],
        },
        UnitCase {
            run: Box::new(move |ctx, th| Ok(phase_only(ffn.forward(ctx, &CVar::constant(seq_in2.pha.rotate(th)))?))),
            probes: vec![probe("pha_ffn", Measure::Relative, LAYER_TOL, FFN)],
        },
        UnitCase {
            run: Box::new(move |ctx, th| Ok(pair(block.forward_seq(ctx, &rotate_streams(&seq_in3, th), None)?))),
            probes: vec![probe("hadf_block", Measure::Relative, LAYER_TOL, ATTN_FFN)],
        },
        UnitCase {
            run: Box::new(move |ctx, th| Ok(pair(dual.forward(ctx, &rotate_streams(&dual_in, th))?))),
            probes: vec![probe("dual_path", Measure::Relative, DUAL_PATH_TOL, ATTN_FFN)],
        },
        UnitCase {
            run: Box::new(move |ctx, th| Ok(pair(network.forward(ctx, &rotate_streams(&net_in, th))?))),
            probes: vec![
                probe("network", Measure::Angle, NETWORK_ANGLE_TOL, ALL),
                probe("network_magnitude", Measure::Magnitude, NETWORK_MAG_TOL, ALL),
            ],
        },
    ])
}

/// Row verdict. Ablated units are judged per unit on their worst rotation,
/// so their individual non-identity rows are unconstrained.
fn judge(p: &Probe, mode: BreakMode, theta: f64, residual: f64) -> (Expectation, f64, bool) {
    if theta == 0.0 {
        (Expectation::Equivariant, IDENTITY_TOL, residual <= IDENTITY_TOL)
    } else if p.targeted_by.contains(&mode) {
        (Expectation::Unconstrained, p.break_min, true)
    } else {
        (Expectation::Equivariant, p.tol, residual <= p.tol)
    }
}

/// Runs every unit at every rotation under the configured ablation.
pub fn run(opts: &EquivcheckOptions) -> Result<EquivarianceReport> {
    opts.model.validate()?;
    let mut store = ParamStore::new();
    let units = build_units(opts, &mut store)?;
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    for unit in &units {
        let eval_at = |theta: f64| {
            let tape = Tape::inference();
            let ctx = Ctx::new(&tape, &store).with_break_mode(opts.break_mode);
            (unit.run)(&ctx, theta)
        };
        let base = eval_at(0.0)?;
        let mut worst = vec![0.0f64; unit.probes.len()];
        for &theta in &opts.thetas {
            let rotated = eval_at(theta)?;
            for (p, w) in unit.probes.iter().zip(&mut worst) {
                let res = residual(p.measure, &base, &rotated, theta);
                if theta != 0.0 {
                    *w = w.max(res);
                }
                let (expect, bound, pass) = judge(p, opts.break_mode, theta, res);
                rows.push(EquivRow {
                    unit_name: p.name.to_string(),
                    theta,
                    rel_error: res,
                    expect,
                    threshold: bound,
                    pass,
                });
            }
        }
        for (p, w) in unit.probes.iter().zip(worst) {
            let (expect, bound, pass) = if p.targeted_by.contains(&opts.break_mode) {
                (Expectation::Broken, p.break_min, w >= p.break_min)
            } else {
                (Expectation::Equivariant, p.tol, w <= p.tol)
            };
            verdicts.push(UnitVerdict {
                unit_name: p.name.to_string(),
                max_rel_error: w,
                expect,
                threshold: bound,
                pass,
            });
        }
    }
    let pass = rows.iter().all(|r| r.pass) && verdicts.iter().all(|v| v.pass);
    Ok(EquivarianceReport {
        break_mode: opts.break_mode,
        seed: opts.seed,
        frames: opts.frames,
        model: opts.model,
        thetas: opts.thetas.clone(),
        rows,
        units: verdicts,
        pass,
    })
}
