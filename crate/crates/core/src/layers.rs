//! Rotation-equivariant convolutional building blocks.
//!
//! The phase stream only ever sees bias-free complex linear maps and
//! multiplication by real factors computed from rotation-invariant
//! quantities (moduli, the magnitude stream). Anything with a bias or a
//! pointwise nonlinearity lives on the magnitude side or on moduli.

use crate::autodiff::{Tape, Var};
use crate::conv::ConvGeom;
use crate::cvar::CVar;
use crate::error::{shape_err, Error, Result};
use crate::params::{BreakMode, ComplexParam, Ctx, Init, ParamId};
use crate::tensor::{ComplexTensor, RealTensor};

/// Fixed dynamic-range factor of the interactive gate.
pub const GATE_SCALE: f64 = 3.0;
pub const CRMS_EPS: f64 = 1e-8;
pub const RMS_EPS: f64 = 1e-8;

/// Magnitude and phase features with aligned spatial dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamPair {
    pub mag: RealTensor,
    pub pha: ComplexTensor,
}

impl StreamPair {
    pub fn new(mag: RealTensor, pha: ComplexTensor) -> Result<Self> {
        let (m, p) = (mag.shape(), pha.shape());
        if m.len() != p.len() || m.len() < 2 || m[1..] != p[1..] {
            return Err(shape_err("stream pair", m, p));
        }
        Ok(Self { mag, pha })
    }

    pub fn rotate_phase(&self, theta: f64) -> Self {
        Self {
            mag: self.mag.clone(),
            pha: self.pha.rotate(theta),
        }
    }
}

/// Tape-side counterpart of [`StreamPair`].
#[derive(Clone, Debug)]
pub struct Streams {
    pub mag: Var,
    pub pha: CVar,
}

impl Streams {
    pub fn constant(pair: StreamPair) -> Self {
        Self {
            mag: Var::constant(pair.mag),
            pha: CVar::constant(pair.pha),
        }
    }

    pub fn value(&self) -> StreamPair {
        StreamPair {
            mag: self.mag.value().clone(),
            pha: self.pha.value(),
        }
    }

    fn check_aligned(&self) -> Result<()> {
        let (m, p) = (self.mag.shape(), self.pha.shape());
        if m.len() != p.len() || m[1..] != p[1..] {
            return Err(shape_err("stream alignment", m, p));
        }
        Ok(())
    }
}

/// Complex RMS normalization: divides by the root-mean-square modulus over
/// `axes` and applies a real scale. No additive term.
pub fn crms_norm(tape: &Tape, x: &CVar, gamma: &Var, axes: &[usize], eps: f64) -> Result<CVar> {
    let power = x.power(tape)?;
    let ms = tape.mean_axes(&power, axes)?;
    let inv = tape.powf(&tape.add_scalar(&ms, eps), -0.5);
    x.scale_by(tape, &inv)?.scale_by(tape, gamma)
}

/// Real RMS normalization with optional bias.
pub fn rms_norm(
    tape: &Tape,
    x: &Var,
    gamma: &Var,
    beta: Option<&Var>,
    axes: &[usize],
    eps: f64,
) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let ms = tape.mean_axes(&sq, axes)?;
    let inv = tape.powf(&tape.add_scalar(&ms, eps), -0.5);
    let y = tape.mul(&tape.mul(x, &inv)?, gamma)?;
    match beta {
        Some(b) => tape.add(&y, b),
        None => Ok(y),
    }
}

/// Bounded gate `3 * sigmoid(a * x)`.
pub fn gate_psi(tape: &Tape, x: &Var, a: &Var) -> Result<Var> {
    let s = tape.sigmoid(&tape.mul(x, a)?);
    Ok(tape.scale(&s, GATE_SCALE))
}

/// Value-level entry points for the layer primitives.
pub mod eval {
    use super::*;

    pub fn complex_conv2d(x: &ComplexTensor, kernel: &ComplexTensor, geom: ConvGeom) -> Result<ComplexTensor> {
        let tape = Tape::inference();
        Ok(CVar::constant(x.clone())
            .conv2d(&tape, &CVar::constant(kernel.clone()), geom)?
            .value())
    }

    /// cRMS over the spatial axes of a `[C, T, K]` map with `gamma: [C, 1, K]`.
    pub fn crms_norm(x: &ComplexTensor, gamma: &RealTensor, eps: f64) -> Result<ComplexTensor> {
        if eps <= 0.0 {
            return Err(Error::Invalid("eps must be positive".into()));
        }
        let tape = Tape::inference();
        Ok(super::crms_norm(
            &tape,
            &CVar::constant(x.clone()),
            &Var::constant(gamma.clone()),
            &[1, 2],
            eps,
        )?
        .value())
    }

    /// `SiLU(RMS(x) * gamma + beta)` over the spatial axes of `[C, T, K]`.
    pub fn rms_norm_silu(x: &RealTensor, gamma: &RealTensor, beta: &RealTensor, eps: f64) -> Result<RealTensor> {
        if eps <= 0.0 {
            return Err(Error::Invalid("eps must be positive".into()));
        }
        let tape = Tape::inference();
        let y = super::rms_norm(
            &tape,
            &Var::constant(x.clone()),
            &Var::constant(gamma.clone()),
            Some(&Var::constant(beta.clone())),
            &[1, 2],
            eps,
        )?;
        Ok(tape.silu(&y).value().clone())
    }

    pub fn gate_psi(x: &RealTensor, a: &RealTensor) -> Result<RealTensor> {
        let tape = Tape::inference();
        Ok(super::gate_psi(&tape, &Var::constant(x.clone()), &Var::constant(a.clone()))?
            .value()
            .clone())
    }
}

/// Convolution geometry and gating behaviour of an MPICM instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MpicmMode {
    /// Channel expansion from the raw inputs; no cross-stream gating.
    Expand,
    /// 3x3 "same" convolution with time dilation.
    Standard { dilation: usize },
    /// Frequency stride 2, kernel (1, 3), no padding.
    Downsample,
    /// Transposed counterpart of [`MpicmMode::Downsample`].
    Upsample,
}

impl MpicmMode {
    pub fn geom(&self) -> ConvGeom {
        match *self {
            Self::Expand => ConvGeom::same((3, 3), (1, 1)),
            Self::Standard { dilation } => ConvGeom::same((3, 3), (dilation, 1)),
            Self::Downsample | Self::Upsample => ConvGeom {
                kernel: (1, 3),
                stride: (1, 2),
                dilation: (1, 1),
                padding: (0, 0),
            },
        }
    }

    pub fn gated(&self) -> bool {
        !matches!(self, Self::Expand)
    }

    pub fn out_freq(&self, k_in: usize) -> Result<usize> {
        let g = self.geom();
        Ok(match self {
            Self::Upsample => g.transposed_output_size(1, k_in)?.1,
            _ => g.output_size(1, k_in)?.1,
        })
    }
}

struct Gating {
    p2m_w: ParamId,
    p2m_b: ParamId,
    m2p_w: ParamId,
    m2p_b: ParamId,
    a_mag: ParamId,
    a_pha: ParamId,
}

/// Magnitude-phase interactive convolution module.
pub struct Mpicm {
    mode: MpicmMode,
    pha_conv: ComplexParam,
    mag_conv: ParamId,
    mag_bias: ParamId,
    crms_gamma: ParamId,
    rms_gamma: ParamId,
    rms_beta: ParamId,
    gating: Option<Gating>,
    pub c_out: (usize, usize),
    pub k_out: usize,
}

impl Mpicm {
    /// Channels are `(magnitude, phase)` pairs; `k_in` is the input frequency size.
    pub fn new(
        init: &mut Init,
        name: &str,
        mode: MpicmMode,
        c_in: (usize, usize),
        c_out: (usize, usize),
        k_in: usize,
    ) -> Result<Self> {
        let k_out = mode.out_freq(k_in)?;
        let (kh, kw) = mode.geom().kernel;
        let taps = kh * kw;
        init.scope(name, |init| {
            let (mag_shape, pha_shape) = match mode {
                MpicmMode::Upsample => ([c_in.0, c_out.0, kh, kw], [c_in.1, c_out.1, kh, kw]),
                _ => ([c_out.0, c_in.0, kh, kw], [c_out.1, c_in.1, kh, kw]),
            };
            let pha_conv = init.complex_kernel("pha_conv", &pha_shape, c_in.1 * taps);
            let mag_conv = init.real_kernel("mag_conv", &mag_shape, c_in.0 * taps);
            let mag_bias = init.real_kernel("mag_bias", &[c_out.0, 1, 1], c_in.0 * taps);
            let crms_gamma = init.constant("crms_gamma", &[c_out.1, 1, k_out], 1.0);
            let rms_gamma = init.constant("rms_gamma", &[c_out.0, 1, 1], 1.0);
            let rms_beta = init.constant("rms_beta", &[c_out.0, 1, 1], 0.0);
            let gating = mode.gated().then(|| Gating {
                p2m_w: init.real_kernel("p2m_w", &[c_out.0, c_out.1, 1, 1], c_out.1),
                p2m_b: init.real_kernel("p2m_b", &[c_out.0, 1, 1], c_out.1),
                m2p_w: init.real_kernel("m2p_w", &[c_out.1, c_out.0, 1, 1], c_out.0),
                m2p_b: init.real_kernel("m2p_b", &[c_out.1, 1, 1], c_out.0),
                a_mag: init.constant("a_mag", &[c_out.0, 1, k_out], 1.0),
                a_pha: init.constant("a_pha", &[c_out.1, 1, k_out], 1.0),
            });
            Ok(Self {
                mode,
                pha_conv,
                mag_conv,
                mag_bias,
                crms_gamma,
                rms_gamma,
                rms_beta,
                gating,
                c_out,
                k_out,
            })
        })
    }

    pub fn mode(&self) -> MpicmMode {
        self.mode
    }

    /// Parallel stream features `(M~, P~)` before any interaction.
    pub fn features(&self, ctx: &Ctx, x: &Streams) -> Result<(Var, CVar)> {
        x.check_aligned()?;
        let tape = ctx.tape;
        let geom = self.mode.geom();
        let w = ctx.c(self.pha_conv);
        let wm = ctx.p(self.mag_conv);
        let (p_conv, m_conv) = match self.mode {
            MpicmMode::Upsample => (
                x.pha.conv_transpose2d(tape, &w, geom)?,
                tape.conv_transpose2d(&x.mag, &wm, geom)?,
            ),
            _ => (x.pha.conv2d(tape, &w, geom)?, tape.conv2d(&x.mag, &wm, geom)?),
        };
        let p = crms_norm(tape, &p_conv, &ctx.p(self.crms_gamma), &[1, 2], CRMS_EPS)?;
        let m_conv = tape.add(&m_conv, &ctx.p(self.mag_bias))?;
        let m = rms_norm(
            tape,
            &m_conv,
            &ctx.p(self.rms_gamma),
            Some(&ctx.p(self.rms_beta)),
            &[1, 2],
            RMS_EPS,
        )?;
        Ok((tape.silu(&m), p))
    }

    /// Cross-stream gating. The phase-to-magnitude path reads only the
    /// modulus of the phase feature unless the MPICM ablation is active.
    pub fn interact(&self, ctx: &Ctx, m: &Var, p: &CVar) -> Result<Streams> {
        let Some(g) = &self.gating else {
            return Ok(Streams {
                mag: m.clone(),
                pha: p.clone(),
            });
        };
        let tape = ctx.tape;
        let pw = ConvGeom::pointwise();
        let p_src = if ctx.break_mode == BreakMode::Mpicm {
            tape.add(&p.re, &p.im)?
        } else {
            p.modulus(tape)?
        };
        let to_mag = tape.add(&tape.conv2d(&p_src, &ctx.p(g.p2m_w), pw)?, &ctx.p(g.p2m_b))?;
        let gate_m = gate_psi(tape, &to_mag, &ctx.p(g.a_mag))?;
        let to_pha = tape.add(&tape.conv2d(m, &ctx.p(g.m2p_w), pw)?, &ctx.p(g.m2p_b))?;
        let gate_p = gate_psi(tape, &to_pha, &ctx.p(g.a_pha))?;
        Ok(Streams {
            mag: tape.mul(m, &gate_m)?,
            pha: p.scale_by(tape, &gate_p)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Streams) -> Result<Streams> {
        let (m, p) = self.features(ctx, x)?;
        self.interact(ctx, &m, &p)
    }
}

/// Dual-stream dilated dense block with aligned channel concatenation.
pub struct DenseBlock {
    layers: Vec<Mpicm>,
    c: (usize, usize),
}

/// Dense-connection source: `0` is the block input, `s > 0` the output of layer `s - 1`.
pub type ChannelSource = (usize, usize);

impl DenseBlock {
    pub fn new(init: &mut Init, name: &str, c: (usize, usize), k: usize, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Invalid("dense block needs at least one layer".into()));
        }
        init.scope(name, |init| {
            let layers = (0..depth)
                .map(|i| {
                    Mpicm::new(
                        init,
                        &format!("layer{i}"),
                        MpicmMode::Standard { dilation: 1 << i },
                        ((i + 1) * c.0, (i + 1) * c.1),
                        c,
                        k,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Self { layers, c })
        })
    }

    pub fn layers(&self) -> &[Mpicm] {
        &self.layers
    }

    /// Channel sequence entering layer `layer` for a stream of width `width`:
    /// newest output first, block input last.
    pub fn channel_order(layer: usize, width: usize) -> Vec<ChannelSource> {
        (0..=layer)
            .rev()
            .flat_map(|s| (0..width).map(move |c| (s, c)))
            .collect()
    }

    pub fn forward(&self, ctx: &Ctx, x: &Streams) -> Result<Streams> {
        let tape = ctx.tape;
        let mut sources = vec![x.clone()];
        for layer in &self.layers {
            // Both streams are concatenated in the same source order.
            let mags: Vec<Var> = sources.iter().rev().map(|s| s.mag.clone()).collect();
            let phas: Vec<CVar> = sources.iter().rev().map(|s| s.pha.clone()).collect();
            let input = Streams {
                mag: tape.concat(&mags, 0)?,
                pha: CVar::concat(tape, &phas, 0)?,
            };
            debug_assert_eq!(input.mag.shape()[0], sources.len() * self.c.0);
            let out = layer.forward(ctx, &input)?;
            sources.push(out);
        }
        Ok(sources.pop().expect("at least one layer"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::relative_error;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    pub(crate) fn rand_real(shape: &[usize], seed: u64, lo: f64, hi: f64) -> RealTensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        RealTensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    pub(crate) fn rand_complex(shape: &[usize], seed: u64) -> ComplexTensor {
        ComplexTensor::new(rand_real(shape, seed, -1.0, 1.0), rand_real(shape, seed + 1, -1.0, 1.0)).unwrap()
    }

    const GRID: [f64; 5] = [0.0, 0.41, PI / 2.0, 2.0, 2.0 * PI - 1e-3];

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let x = rand_complex(&[1, 4, 5], 1);
        let k = ComplexTensor::new(RealTensor::full(&[1, 1, 1, 1], 1.0), RealTensor::zeros(&[1, 1, 1, 1])).unwrap();
        let y = eval::complex_conv2d(&x, &k, ConvGeom::pointwise()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = ComplexTensor::zeros(&[2, 3, 4]);
        let k = rand_complex(&[3, 2, 3, 3], 5);
        let y = eval::complex_conv2d(&x, &k, ConvGeom::same((3, 3), (1, 1))).unwrap();
        assert!(y.re.data().iter().chain(y.im.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn complex_conv_matches_sliding_window_sum() {
        let x = rand_complex(&[1, 3, 3], 11);
        let k = rand_complex(&[1, 1, 2, 2], 21);
        let geom = ConvGeom {
            kernel: (2, 2),
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
        };
        let y = eval::complex_conv2d(&x, &k, geom).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        for i in 0..2 {
            for j in 0..2 {
                let (mut sr, mut si) = (0.0, 0.0);
                for a in 0..2 {
                    for b in 0..2 {
                        let (xr, xi) = x.get((i + a) * 3 + j + b);
                        let (kr, ki) = k.get(a * 2 + b);
                        sr += kr * xr - ki * xi;
                        si += kr * xi + ki * xr;
                    }
                }
                let (yr, yi) = y.get(i * 2 + j);
                assert!((yr - sr).abs() < 1e-12 && (yi - si).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn crms_of_unit_modulus_is_identity() {
        let angle = rand_real(&[2, 3, 4], 3, -PI, PI);
        let x = ComplexTensor::from_polar(&RealTensor::full(&[2, 3, 4], 1.0), &angle).unwrap();
        let g = RealTensor::full(&[2, 1, 4], 1.0);
        // The residual is exactly 1 - 1/sqrt(1 + eps).
        for eps in [CRMS_EPS, 1e-10] {
            let y = eval::crms_norm(&x, &g, eps).unwrap();
            let bound = 1.0 - 1.0 / (1.0 + eps).sqrt();
            assert!(y.sub(&x).unwrap().norm() / x.norm() <= bound * 1.001 + 1e-15);
        }
        let y = eval::crms_norm(&x, &g, 1e-10).unwrap();
        assert!(y.sub(&x).unwrap().norm() / x.norm() <= 1e-9);
    }

    #[test]
    fn crms_commutes_with_rotation() {
        let x = rand_complex(&[2, 3, 4], 8);
        let g = rand_real(&[2, 1, 4], 9, 0.5, 1.5);
        let a = eval::crms_norm(&x.rotate(1.3), &g, CRMS_EPS).unwrap();
        let b = eval::crms_norm(&x, &g, CRMS_EPS).unwrap().rotate(1.3);
        assert!(relative_error(&a, &b) <= 1e-12);
    }

    #[test]
    fn crms_two_cell_example() {
        let x = ComplexTensor::new(
            RealTensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap(),
            RealTensor::new(&[1, 1, 2], vec![0.0, 3.0]).unwrap(),
        )
        .unwrap();
        let y = eval::crms_norm(&x, &RealTensor::full(&[1, 1, 2], 1.0), CRMS_EPS).unwrap();
        let r = (5.0 + CRMS_EPS).sqrt();
        assert!((y.get(0).0 - 1.0 / r).abs() < 1e-15 && y.get(0).1 == 0.0);
        assert!(y.get(1).0 == 0.0 && (y.get(1).1 - 3.0 / r).abs() < 1e-15);
        assert!((y.get(1).1 - 3.0 / 5f64.sqrt()).abs() < CRMS_EPS);
    }

    #[test]
    fn rms_silu_examples() {
        let ones = RealTensor::full(&[1, 1, 1], 1.0);
        let zero = RealTensor::full(&[1, 1, 1], 0.0);
        let y = eval::rms_norm_silu(&RealTensor::zeros(&[1, 2, 3]), &ones, &zero, RMS_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let y = eval::rms_norm_silu(&RealTensor::full(&[1, 2, 3], 2.5), &ones, &zero, RMS_EPS).unwrap();
        let silu_one = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((silu_one - 0.7311).abs() < 1e-4);
        assert!(y.data().iter().all(|v| (v - silu_one).abs() < 1e-8));

        // 2x2 block of ones: statistic is sqrt(1 + eps).
        let y = eval::rms_norm_silu(&RealTensor::full(&[1, 2, 2], 1.0), &ones, &zero, RMS_EPS).unwrap();
        let z = 1.0 / (1.0 + RMS_EPS).sqrt();
        let want = z / (1.0 + (-z).exp());
        assert!(y.data().iter().all(|v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn gate_examples() {
        let a = RealTensor::full(&[1, 1, 3], 1.0);
        let y = eval::gate_psi(&RealTensor::zeros(&[1, 2, 3]), &a).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5));
        let y = eval::gate_psi(&RealTensor::full(&[1, 2, 3], 3f64.ln()), &a).unwrap();
        assert!(y.data().iter().all(|v| (v - 2.25).abs() < 1e-12));
    }

    fn pair(c: (usize, usize), t: usize, k: usize, seed: u64) -> StreamPair {
        StreamPair::new(rand_real(&[c.0, t, k], seed, 0.0, 1.0), rand_complex(&[c.1, t, k], seed + 7)).unwrap()
    }

    fn run_mpicm(layer: &Mpicm, store: &ParamStore, x: &StreamPair, mode: BreakMode) -> StreamPair {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store).with_break_mode(mode);
        layer.forward(&ctx, &Streams::constant(x.clone())).unwrap().value()
    }

    fn mpicm_residual(layer: &Mpicm, store: &ParamStore, x: &StreamPair, theta: f64, mode: BreakMode) -> f64 {
        let base = run_mpicm(layer, store, x, mode);
        let rot = run_mpicm(layer, store, &x.rotate_phase(theta), mode);
        let pha = relative_error(&rot.pha, &base.pha.rotate(theta));
        let mag = crate::tensor::relative_error_real(&rot.mag, &base.mag);
        pha.max(mag)
    }

    #[test]
    fn mpicm_is_equivariant_and_breaks_under_ablation() {
        let mut store = ParamStore::new();
        let layer = Mpicm::new(
            &mut Init::new(&mut store, 3),
            "m",
            MpicmMode::Standard { dilation: 2 },
            (4, 3),
            (4, 3),
            10,
        )
        .unwrap();
        let x = pair((4, 3), 6, 10, 1);
        assert_eq!(mpicm_residual(&layer, &store, &x, 0.0, BreakMode::None), 0.0);
        for theta in GRID {
            assert!(mpicm_residual(&layer, &store, &x, theta, BreakMode::None) <= 1e-10);
        }
        assert!(mpicm_residual(&layer, &store, &x, PI / 2.0, BreakMode::Mpicm) >= 1e-2);
    }

    #[test]
    fn every_mode_is_equivariant() {
        for (mode, k) in [
            (MpicmMode::Expand, 11),
            (MpicmMode::Downsample, 201),
            (MpicmMode::Upsample, 100),
        ] {
            let mut store = ParamStore::new();
            let layer = Mpicm::new(&mut Init::new(&mut store, 4), "m", mode, (2, 2), (3, 2), k).unwrap();
            let x = pair((2, 2), 3, k, 2);
            let out = run_mpicm(&layer, &store, &x, BreakMode::None);
            assert_eq!(out.mag.shape()[2], layer.k_out);
            for theta in GRID {
                assert!(mpicm_residual(&layer, &store, &x, theta, BreakMode::None) <= 1e-9, "{mode:?}");
            }
        }
    }

    #[test]
    fn resampling_modes_map_201_to_100_and_back() {
        assert_eq!(MpicmMode::Downsample.out_freq(201).unwrap(), 100);
        assert_eq!(MpicmMode::Upsample.out_freq(100).unwrap(), 201);
    }

    #[test]
    fn single_layer_dense_block_equals_mpicm() {
        let mut s1 = ParamStore::new();
        let block = DenseBlock::new(&mut Init::new(&mut s1, 9), "d", (3, 2), 8, 1).unwrap();
        let mut s2 = ParamStore::new();
        let layer = Mpicm::new(
            &mut Init::new(&mut s2, 9),
            "d.layer0",
            MpicmMode::Standard { dilation: 1 },
            (3, 2),
            (3, 2),
            8,
        )
        .unwrap();
        let x = pair((3, 2), 4, 8, 5);
        let tape = Tape::inference();
        let a = block
            .forward(&Ctx::new(&tape, &s1), &Streams::constant(x.clone()))
            .unwrap()
            .value();
        assert_eq!(a, run_mpicm(&layer, &s2, &x, BreakMode::None));
    }

    #[test]
    fn dense_channel_counts_and_order() {
        for i in 0..4 {
            let order = DenseBlock::channel_order(i, 5);
            assert_eq!(order.len(), (i + 1) * 5);
            assert_eq!(order, DenseBlock::channel_order(i, 5));
            assert_eq!(order.last(), Some(&(0, 4)));
        }
        let mut store = ParamStore::new();
        let block = DenseBlock::new(&mut Init::new(&mut store, 1), "d", (3, 2), 8, 4).unwrap();
        for (i, l) in block.layers().iter().enumerate() {
            let w = store.get(l.mag_conv);
            assert_eq!(w.shape()[1], (i + 1) * 3);
            assert_eq!(store.get(l.pha_conv.re).shape()[1], (i + 1) * 2);
        }
    }

    #[test]
    fn dense_block_is_equivariant() {
        let mut store = ParamStore::new();
        let block = DenseBlock::new(&mut Init::new(&mut store, 12), "d", (3, 2), 9, 4).unwrap();
        let x = pair((3, 2), 10, 9, 3);
        let run = |x: &StreamPair| {
            let tape = Tape::inference();
            block
                .forward(&Ctx::new(&tape, &store), &Streams::constant(x.clone()))
                .unwrap()
                .value()
        };
        let base = run(&x);
        for theta in GRID {
            let rot = run(&x.rotate_phase(theta));
            assert!(relative_error(&rot.pha, &base.pha.rotate(theta)) <= 1e-9);
            assert!(crate::tensor::relative_error_real(&rot.mag, &base.mag) <= 1e-12);
        }
    }

    #[test]
    fn misaligned_streams_are_rejected() {
        let mut store = ParamStore::new();
        let layer = Mpicm::new(&mut Init::new(&mut store, 3), "m", MpicmMode::Expand, (1, 1), (2, 2), 6).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let x = Streams {
            mag: Var::constant(RealTensor::zeros(&[1, 3, 6])),
            pha: CVar::constant(ComplexTensor::zeros(&[1, 3, 5])),
        };
        assert!(layer.forward(&ctx, &x).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn gate_stays_in_open_interval(x in -15.0f64..15.0, a in -2.0f64..2.0) {
                let y = eval::gate_psi(&RealTensor::full(&[1, 1, 1], x), &RealTensor::full(&[1, 1, 1], a)).unwrap();
                let v = y.data()[0];
                prop_assert!(v > 0.0 && v < GATE_SCALE);
            }

            #[test]
            fn crms_equivariant_over_angles(seed in 0u64..1000, theta in 0.0f64..(2.0 * PI)) {
                let x = rand_complex(&[2, 3, 4], seed);
                let g = rand_real(&[2, 1, 4], seed + 3, 0.1, 2.0);
                let a = eval::crms_norm(&x.rotate(theta), &g, CRMS_EPS).unwrap();
                let b = eval::crms_norm(&x, &g, CRMS_EPS).unwrap().rotate(theta);
                prop_assert!(relative_error(&a, &b) <= 1e-9);
            }
        }
    }
}
