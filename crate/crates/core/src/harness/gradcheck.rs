//! Central finite-difference checks of every tape primitive, the composite
//! losses and network slices.

use std::rc::Rc;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{random_complex, random_real, rng};
use crate::autodiff::{CustomAdjoint, Tape, Unary, Var};
use crate::conv::ConvGeom;
use crate::cvar::CVar;
use crate::error::Result;
use crate::hadf::gru_cell;
use crate::layers::{crms_norm, gate_psi, rms_norm, MpicmMode, Streams};
use crate::losses::{composite_loss, LossKind, LossWeights, Target};
use crate::network::{ModelConfig, Network};
use crate::params::{Ctx, ParamStore};
use crate::signal::Stft;
use crate::tensor::RealTensor;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Error the deliberately wrong adjoint must produce to count as detected.
pub const FIXTURE_MIN: f64 = 1e-2;
/// Coordinates sampled per input tensor.
pub const MAX_COORDS: usize = 48;
/// Frames used by the loss and network checks (the shortest analyzable signal).
pub const LOSS_FRAMES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub name: String,
    pub coords: usize,
    /// Largest `|analytic - fd| / max(1, |analytic|)`.
    pub max_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradEntry>,
    /// Custom op with a wrong adjoint; `pass` here means the error was detected.
    pub wrong_adjoint_fixture: GradEntry,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn entry(&self, name: &str) -> Option<&GradEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(1.0)
}

fn coords(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}

type Fwd<'a> = dyn Fn(&Tape, &[Var]) -> Result<Var> + 'a;

/// Contracts a non-scalar output with a fixed random tensor.
fn project(tape: &Tape, out: &Var, proj: Option<&RealTensor>) -> Result<Var> {
    match proj {
        None => Ok(out.clone()),
        Some(r) => Ok(tape.sum(&tape.mul(out, &Var::constant(r.clone()))?)),
    }
}

/// Checks `f` with respect to every input.
pub fn check_fn(name: &str, inputs: &[RealTensor], f: &Fwd, seed: u64) -> Result<GradEntry> {
    let mut r = rng(seed);
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &leaves)?;
    let proj = (out.value().len() != 1).then(|| random_real(&mut r, out.shape(), -1.0, 1.0));
    let loss = project(&tape, &out, proj.as_ref())?;
    let grads = tape.backward(&loss)?;

    let eval = |xs: &[RealTensor]| -> Result<f64> {
        let t = Tape::inference();
        let vs: Vec<Var> = xs.iter().map(|x| Var::constant(x.clone())).collect();
        Ok(project(&t, &f(&t, &vs)?, proj.as_ref())?.value().data()[0])
    };
    let (mut n, mut worst) = (0, 0.0f64);
    for (i, leaf) in leaves.iter().enumerate() {
        let g = grads.get(leaf);
        for c in coords(&mut r, inputs[i].len(), MAX_COORDS) {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[c] += FD_STEP;
            let plus = eval(&xs)?;
            xs[i].data_mut()[c] -= 2.0 * FD_STEP;
            let minus = eval(&xs)?;
            worst = worst.max(rel_err(g.data()[c], (plus - minus) / (2.0 * FD_STEP)));
            n += 1;
        }
    }
    Ok(GradEntry {
        name: name.to_string(),
        coords: n,
        max_error: worst,
        pass: worst <= GRAD_TOL,
    })
}

/// Checks a loss built from stored parameters, sampling `per_param` coordinates of each.
pub fn check_params(
    name: &str,
    store: &ParamStore,
    f: &dyn Fn(&Ctx) -> Result<Var>,
    per_param: usize,
    seed: u64,
) -> Result<GradEntry> {
    let mut r = rng(seed);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let loss = f(&ctx)?;
    let grads = ctx.param_grads(&tape.backward(&loss)?);
    let eval = |s: &ParamStore| -> Result<f64> {
        let t = Tape::inference();
        Ok(f(&Ctx::new(&t, s))?.value().data()[0])
    };
    let (mut n, mut worst) = (0, 0.0f64);
    let mut work = store.clone();
    for (id, g) in grads {
        for c in coords(&mut r, g.len(), per_param) {
            let orig = store.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + FD_STEP;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[c] = orig - FD_STEP;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[c] = orig;
            worst = worst.max(rel_err(g.data()[c], (plus - minus) / (2.0 * FD_STEP)));
            n += 1;
        }
    }
    Ok(GradEntry {
        name: name.to_string(),
        coords: n,
        max_error: worst,
        pass: worst <= GRAD_TOL,
    })
}

fn square_op(tape: &Tape, x: &Var, adjoint_scale: f64) -> Var {
    let adjoint: CustomAdjoint = Rc::new(move |g, inputs, _out| {
        vec![g.iter().zip(inputs[0].data()).map(|(g, x)| adjoint_scale * x * g).collect()]
    });
    tape.custom(&[x], |xs| xs[0].map(|v| v * v), adjoint)
}

struct Case {
    name: &'static str,
    shapes: Vec<(Vec<usize>, f64, f64)>,
    f: Box<Fwd<'static>>,
}

fn case(name: &'static str, shapes: &[(&[usize], f64, f64)], f: impl Fn(&Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|(s, lo, hi)| (s.to_vec(), *lo, *hi)).collect(),
        f: Box::new(f),
    }
}

const U: f64 = 2.0;

fn primitive_cases(stft: Rc<Stft>) -> Vec<Case> {
    let s34: &[usize] = &[3, 4];
    let s234: &[usize] = &[2, 3, 4];
    let bins = stft.config().n_bins();
    let stft2 = stft.clone();
    vec![
        case("add", &[(s234, -U, U), (&[1, 1, 4], -U, U)], |t, x| t.add(&x[0], &x[1])),
        case("sub", &[(s234, -U, U), (&[2, 1, 4], -U, U)], |t, x| t.sub(&x[0], &x[1])),
        case("mul", &[(s234, -U, U), (&[2, 3, 1], -U, U)], |t, x| t.mul(&x[0], &x[1])),
        case("scale", &[(s34, -U, U)], |t, x| Ok(t.scale(&x[0], -1.7))),
        case("neg", &[(s34, -U, U)], |t, x| Ok(t.neg(&x[0]))),
        case("add_scalar", &[(s34, -U, U)], |t, x| Ok(t.add_scalar(&x[0], 0.3))),
        case("powf", &[(s34, 0.2, U)], |t, x| Ok(t.powf(&x[0], 1.0 / 0.3))),
        case("powf_negative", &[(s34, 0.2, U)], |t, x| Ok(t.powf(&x[0], -0.5))),
        case("sigmoid", &[(s34, -U, U)], |t, x| Ok(t.sigmoid(&x[0]))),
        case("tanh", &[(s34, -U, U)], |t, x| Ok(t.tanh(&x[0]))),
        case("silu", &[(s34, -U, U)], |t, x| Ok(t.silu(&x[0]))),
        case("relu", &[(s34, -U, U)], |t, x| Ok(t.relu(&x[0]))),
        case("leaky_relu", &[(s34, -U, U)], |t, x| Ok(t.leaky_relu(&x[0], 0.01))),
        case("abs", &[(s34, -U, U)], |t, x| Ok(t.abs(&x[0]))),
        case("exp", &[(s34, -U, U)], |t, x| Ok(t.unary(Unary::Exp, &x[0]))),
        case("anti_wrap", &[(s34, -U, U)], |t, x| Ok(t.anti_wrap(&x[0]))),
        case("anti_wrap_wrapped", &[(s34, 3.3, 6.0)], |t, x| Ok(t.anti_wrap(&x[0]))),
        case("modulus", &[(s34, -U, U), (s34, -U, U)], |t, x| t.modulus(&x[0], &x[1])),
        case("atan2", &[(s34, -U, U), (s34, -U, U)], |t, x| t.atan2(&x[0], &x[1])),
        case("sum", &[(s34, -U, U)], |t, x| Ok(t.sum(&x[0]))),
        case("mean_all", &[(s34, -U, U)], |t, x| Ok(t.mean_all(&x[0]))),
        case("mean_axes", &[(s234, -U, U)], |t, x| t.mean_axes(&x[0], &[0, 2])),
        case("matmul", &[(s234, -U, U), (&[4, 5], -U, U)], |t, x| t.matmul(&x[0], &x[1])),
        case("bmm_nt", &[(s234, -U, U), (&[2, 5, 4], -U, U)], |t, x| t.bmm_nt(&x[0], &x[1])),
        case("bmm", &[(s234, -U, U), (&[2, 4, 5], -U, U)], |t, x| t.bmm(&x[0], &x[1])),
        case("softmax", &[(&[2, 3, 5], -U, U)], |t, x| Ok(t.softmax(&x[0]))),
        case("conv2d", &[(&[2, 5, 6], -U, U), (&[3, 2, 3, 3], -U, U)], |t, x| {
            t.conv2d(&x[0], &x[1], ConvGeom::same((3, 3), (2, 1)))
        }),
        case("conv2d_strided", &[(&[2, 3, 9], -U, U), (&[3, 2, 1, 3], -U, U)], |t, x| {
            t.conv2d(&x[0], &x[1], MpicmMode::Downsample.geom())
        }),
        case("conv_transpose2d", &[(&[2, 3, 4], -U, U), (&[2, 3, 1, 3], -U, U)], |t, x| {
            t.conv_transpose2d(&x[0], &x[1], MpicmMode::Upsample.geom())
        }),
        case("reshape", &[(s234, -U, U)], |t, x| t.reshape(&x[0], &[6, 4])),
        case("permute", &[(s234, -U, U)], |t, x| t.permute(&x[0], &[2, 0, 1])),
        case("concat", &[(s234, -U, U), (&[2, 2, 4], -U, U)], |t, x| t.concat(&[x[0].clone(), x[1].clone()], 1)),
        case("slice", &[(s234, -U, U)], |t, x| t.slice(&x[0], 2, 1, 2)),
        case("stft", &[(&[450], -1.0, 1.0)], move |t, x| t.stft(&stft, &x[0])),
        case("istft", &[(&[2, LOSS_FRAMES, bins], -1.0, 1.0)], move |t, x| t.istft(&stft2, &x[0])),
        case("custom", &[(s34, -U, U)], |t, x| Ok(square_op(t, &x[0], 2.0))),
        case("complex_conv2d", &[(&[2, 4, 5], -U, U), (&[2, 4, 5], -U, U), (&[3, 2, 3, 3], -1.0, 1.0), (&[3, 2, 3, 3], -1.0, 1.0)], |t, x| {
            let z = CVar { re: x[0].clone(), im: x[1].clone() };
            let w = CVar { re: x[2].clone(), im: x[3].clone() };
            let y = z.conv2d(t, &w, ConvGeom::same((3, 3), (1, 1)))?;
            t.add(&y.re, &t.scale(&y.im, 0.7))
        }),
        case("crms_norm", &[(&[2, 3, 4], -U, U), (&[2, 3, 4], -U, U), (&[2, 1, 4], 0.5, 1.5)], |t, x| {
            let y = crms_norm(t, &CVar { re: x[0].clone(), im: x[1].clone() }, &x[2], &[1, 2], 1e-8)?;
            t.add(&y.re, &t.scale(&y.im, -0.4))
        }),
        case("rms_norm", &[(s234, -U, U), (&[2, 1, 1], 0.5, 1.5), (&[2, 1, 1], -1.0, 1.0)], |t, x| {
            rms_norm(t, &x[0], &x[1], Some(&x[2]), &[1, 2], 1e-8)
        }),
        case("gate_psi", &[(s234, -U, U), (&[2, 1, 4], 0.5, 1.5)], |t, x| gate_psi(t, &x[0], &x[1])),
        case("gru_cell", &[(&[3, 12], -1.0, 1.0), (&[3, 4], -1.0, 1.0), (&[4, 12], -1.0, 1.0), (&[1, 12], -1.0, 1.0)], |t, x| {
            gru_cell(t, &x[0], &x[1], &x[2], &x[3])
        }),
    ]
}

fn tone(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| {
            let t = n as f64 / 16_000.0;
            (2.0 * std::f64::consts::PI * 440.0 * t).sin() + 0.3 * (2.0 * std::f64::consts::PI * 1320.0 * t + 0.5).sin()
        })
        .collect()
}

fn loss_cases(stft: &Rc<Stft>, seed: u64) -> Result<Vec<GradEntry>> {
    let cfg = *stft.config();
    let (t, f) = (LOSS_FRAMES, cfg.n_bins());
    let target = Target::from_wave(stft, &tone(cfg.synth_len(t)))?;
    let weights = LossWeights::default();
    let mut r = rng(seed ^ 0x1055);
    let mag = random_real(&mut r, &[t, f], 0.2, 1.2);
    let pha = random_complex(&mut r, &[t, f]);
    let mut out = Vec::new();
    for (name, kind) in [("loss_dn", LossKind::Dn), ("loss_use", LossKind::Use), ("loss_pr", LossKind::Pr)] {
        let stft = stft.clone();
        let target = target.clone();
        let f = move |tape: &Tape, x: &[Var]| -> Result<Var> {
            let p = CVar { re: x[1].clone(), im: x[2].clone() };
            Ok(composite_loss(tape, &stft, kind, &x[0], &p, &target, &weights, 0.3)?.total)
        };
        out.push(check_fn(name, &[mag.clone(), pha.re.clone(), pha.im.clone()], &f, seed)?);
    }
    Ok(out)
}

/// Reduced model used for the network-slice checks.
pub fn slice_config() -> ModelConfig {
    ModelConfig {
        c_mag: 2,
        c_pha: 2,
        c_mag_head: 2,
        c_pha_head: 1,
        c_mag_hidden: 4,
        c_pha_hidden: 2,
        n_heads: 1,
        n_dual_path: 1,
        ..ModelConfig::small()
    }
}

fn network_cases(stft: &Rc<Stft>, seed: u64) -> Result<Vec<GradEntry>> {
    let cfg = slice_config();
    let (t, f) = (LOSS_FRAMES, cfg.f);
    let target = Target::from_wave(stft, &tone(stft.config().synth_len(t)))?;
    let weights = LossWeights::default();
    let mut store = ParamStore::new();
    let net = Network::new(cfg, &mut store, seed)?;
    let mut r = rng(seed ^ 0x4e7);
    let loss = |ctx: &Ctx, out: &Streams| -> Result<Var> {
        let tape = ctx.tape;
        let mag = tape.reshape(&out.mag, &[t, f])?;
        let pha = out.pha.reshape(tape, &[t, f])?;
        Ok(composite_loss(tape, stft, LossKind::Dn, &mag, &pha, &target, &weights, cfg.alpha)?.total)
    };

    // Heads alone on fixed features: no trunk parameters in the slice.
    let features = Streams::constant(crate::layers::StreamPair::new(
        random_real(&mut r, &[cfg.c_mag, t, f], 0.0, 1.0),
        random_complex(&mut r, &[cfg.c_pha, t, f]),
    )?);
    let heads = |ctx: &Ctx| loss(ctx, &net.heads(ctx, &features)?);
    let mut out = vec![check_params("network_heads", &store, &heads, MAX_COORDS, seed)?];

    let input = Streams::constant(crate::layers::StreamPair::new(
        random_real(&mut r, &[1, t, f], 0.1, 1.0),
        crate::tensor::ComplexTensor::from_polar(
            &RealTensor::full(&[1, t, f], 1.0),
            &random_real(&mut r, &[1, t, f], -3.0, 3.0),
        )?,
    )?);
    let full = |ctx: &Ctx| loss(ctx, &net.forward(ctx, &input)?);
    out.push(check_params("network_full", &store, &full, 2, seed)?);
    Ok(out)
}

/// Runs every check; `pass` requires all entries within tolerance and the
/// wrong-adjoint fixture to be caught.
pub fn run(seed: u64) -> Result<GradcheckReport> {
    let stft = Rc::new(Stft::new(Default::default())?);
    let mut entries = Vec::new();
    for (i, c) in primitive_cases(stft.clone()).into_iter().enumerate() {
        let mut r = rng(seed.wrapping_add(i as u64));
        let inputs: Vec<RealTensor> = c.shapes.iter().map(|(s, lo, hi)| random_real(&mut r, s, *lo, *hi)).collect();
        entries.push(check_fn(c.name, &inputs, &*c.f, seed.wrapping_add(i as u64))?);
    }
    entries.extend(loss_cases(&stft, seed)?);
    entries.extend(network_cases(&stft, seed)?);

    let mut r = rng(seed ^ 0xbad);
    let x = random_real(&mut r, &[3, 4], 0.5, U);
    let mut fixture = check_fn("custom_wrong_adjoint", &[x], &|t, x| Ok(square_op(t, &x[0], 3.0)), seed)?;
    fixture.pass = fixture.max_error >= FIXTURE_MIN;

    let pass = entries.iter().all(|e| e.pass) && fixture.pass;
    Ok(GradcheckReport {
        seed,
        step: FD_STEP,
        tolerance: GRAD_TOL,
        entries,
        wrong_adjoint_fixture: fixture,
        pass,
    })
}
