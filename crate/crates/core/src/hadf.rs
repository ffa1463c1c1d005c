//! Hybrid-attention dual-FFN block and the dual-path time/frequency wrapper.
//!
//! Sequence tensors are laid out `[B', L, C]`; the complex stream uses the
//! same layout on both planes.

use std::io::Write;

use crate::autodiff::{Tape, Var};
use crate::conv::ConvGeom;
use crate::cvar::CVar;
use crate::error::{Error, Result};
use crate::layers::{crms_norm, rms_norm, Streams, CRMS_EPS, RMS_EPS};
use crate::params::{BreakMode, ComplexParam, Ctx, Init, ParamId};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Widths of one HADF block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HadfDims {
    pub c_mag: usize,
    pub c_pha: usize,
    pub n_heads: usize,
    pub mag_head: usize,
    pub pha_head: usize,
    pub mag_hidden: usize,
    pub pha_hidden: usize,
}

impl HadfDims {
    /// Width of the concatenated per-head query/key vector.
    pub fn d_k(&self) -> usize {
        self.mag_head + 2 * self.pha_head
    }

    fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.mag_head + self.pha_head == 0 {
            return Err(Error::Invalid(format!("bad head layout {self:?}")));
        }
        if self.mag_hidden % 2 != 0 {
            return Err(Error::Invalid(format!(
                "magnitude hidden width {} must split across two GRU directions",
                self.mag_hidden
            )));
        }
        Ok(())
    }
}

/// Per-head score maps of one attention call for a single batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMapExport {
    pub len: usize,
    pub heads: Vec<HeadMap>,
}

/// Row-major `L x L` maps. The two components are the magnitude and phase
/// contributions to the scaled logits, so they sum to `logit`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMap {
    pub score: Vec<f64>,
    pub logit: Vec<f64>,
    pub mag_component: Vec<f64>,
    pub pha_component: Vec<f64>,
}

impl AttentionMapExport {
    pub fn max_row_sum_error(&self) -> f64 {
        let l = self.len.max(1);
        self.heads
            .iter()
            .flat_map(|h| h.score.chunks(l).map(|r| (r.iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["head", "row", "col", "score", "mag_component", "pha_component"])?;
        for (h, map) in self.heads.iter().enumerate() {
            for r in 0..self.len {
                for c in 0..self.len {
                    let i = r * self.len + c;
                    out.write_record([
                        h.to_string(),
                        r.to_string(),
                        c.to_string(),
                        format!("{:e}", map.score[i]),
                        format!("{:e}", map.mag_component[i]),
                        format!("{:e}", map.pha_component[i]),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Attention result: projected residuals plus per-head softmaxed scores `[B', L, L]`.
pub struct AttentionOutput {
    pub mag: Var,
    pub pha: CVar,
    pub scores: Vec<Var>,
}

pub struct HybridAttention {
    dims: HadfDims,
    q_mag: ParamId,
    k_mag: ParamId,
    v_mag: ParamId,
    q_pha: ComplexParam,
    k_pha: ComplexParam,
    v_pha: ComplexParam,
    o_mag: ParamId,
    o_mag_bias: ParamId,
    o_pha: ComplexParam,
}

impl HybridAttention {
    pub fn new(init: &mut Init, name: &str, dims: HadfDims) -> Result<Self> {
        dims.validate()?;
        let (h, cm, cp) = (dims.n_heads, dims.c_mag, dims.c_pha);
        let (hm, hp) = (h * dims.mag_head, h * dims.pha_head);
        Ok(init.scope(name, |init| Self {
            dims,
            q_mag: init.real_kernel("q_mag", &[cm, hm], cm),
            k_mag: init.real_kernel("k_mag", &[cm, hm], cm),
            v_mag: init.real_kernel("v_mag", &[cm, hm], cm),
            q_pha: init.complex_kernel("q_pha", &[cp, hp], cp),
            k_pha: init.complex_kernel("k_pha", &[cp, hp], cp),
            v_pha: init.complex_kernel("v_pha", &[cp, hp], cp),
            o_mag: init.real_kernel("o_mag", &[hm, cm], hm),
            o_mag_bias: init.real_kernel("o_mag_bias", &[1, 1, cm], hm),
            o_pha: init.complex_kernel("o_pha", &[hp, cp], hp),
        }))
    }

    /// Output projection parameters, for tests that need to silence the residual.
    pub fn output_params(&self) -> (ParamId, ParamId, ComplexParam) {
        (self.o_mag, self.o_mag_bias, self.o_pha)
    }

    /// `capture` selects a batch item whose maps are stored on the context.
    pub fn forward(&self, ctx: &Ctx, zm: &Var, zp: &CVar, capture: Option<usize>) -> Result<AttentionOutput> {
        let tape = ctx.tape;
        let (sm, sp) = (zm.shape(), zp.shape());
        if sm.len() != 3 || sp.len() != 3 || sm[..2] != sp[..2] {
            return Err(crate::error::shape_err("hybrid attention", sm, sp));
        }
        if sm[1] == 0 {
            return Err(Error::Invalid("attention over an empty sequence".into()));
        }
        let d = self.dims;
        let qm = tape.matmul(zm, &ctx.p(self.q_mag))?;
        let km = tape.matmul(zm, &ctx.p(self.k_mag))?;
        let vm = tape.matmul(zm, &ctx.p(self.v_mag))?;
        let qp = zp.matmul(tape, &ctx.c(self.q_pha))?;
        let kp = zp.matmul(tape, &ctx.c(self.k_pha))?;
        let vp = zp.matmul(tape, &ctx.c(self.v_pha))?;
        let scale = 1.0 / (d.d_k() as f64).sqrt();

        let mut scores = Vec::with_capacity(d.n_heads);
        let mut heads_m = Vec::with_capacity(d.n_heads);
        let mut heads_p = Vec::with_capacity(d.n_heads);
        let mut maps = Vec::new();
        for h in 0..d.n_heads {
            let qm_h = tape.slice(&qm, 2, h * d.mag_head, d.mag_head)?;
            let km_h = tape.slice(&km, 2, h * d.mag_head, d.mag_head)?;
            let qp_h = qp.slice(tape, 2, h * d.pha_head, d.pha_head)?;
            let kp_h = kp.slice(tape, 2, h * d.pha_head, d.pha_head)?;
            let q_re = if ctx.break_mode == BreakMode::Attn {
                tape.neg(&qp_h.re)
            } else {
                qp_h.re.clone()
            };
            let q = tape.concat(&[qm_h.clone(), q_re.clone(), qp_h.im.clone()], 2)?;
            let k = tape.concat(&[km_h.clone(), kp_h.re.clone(), kp_h.im.clone()], 2)?;
            let logits = tape.scale(&tape.bmm_nt(&q, &k)?, scale);
            let s = tape.softmax(&logits);

            if let Some(b) = capture {
                let l = sm[1];
                let mag = batch_item(&tape_free_bmm_nt(qm_h.value(), km_h.value())?, b, l * l, scale)?;
                let pr = tape_free_bmm_nt(q_re.value(), kp_h.re.value())?;
                let pi = tape_free_bmm_nt(qp_h.im.value(), kp_h.im.value())?;
                let pha: Vec<f64> = batch_item(&pr, b, l * l, scale)?
                    .iter()
                    .zip(batch_item(&pi, b, l * l, scale)?)
                    .map(|(a, c)| a + c)
                    .collect();
                maps.push(HeadMap {
                    score: batch_item(s.value().data(), b, l * l, 1.0)?,
                    logit: batch_item(logits.value().data(), b, l * l, 1.0)?,
                    mag_component: mag,
                    pha_component: pha,
                });
            }

            let vm_h = tape.slice(&vm, 2, h * d.mag_head, d.mag_head)?;
            let vp_h = vp.slice(tape, 2, h * d.pha_head, d.pha_head)?;
            heads_m.push(tape.bmm(&s, &vm_h)?);
            heads_p.push(CVar {
                re: tape.bmm(&s, &vp_h.re)?,
                im: tape.bmm(&s, &vp_h.im)?,
            });
            scores.push(s);
        }
        if capture.is_some() {
            ctx.capture(AttentionMapExport { len: sm[1], heads: maps });
        }
        let cat_m = tape.concat(&heads_m, 2)?;
        let cat_p = CVar::concat(tape, &heads_p, 2)?;
        let mag = tape.add(&tape.matmul(&cat_m, &ctx.p(self.o_mag))?, &ctx.p(self.o_mag_bias))?;
        let pha = cat_p.matmul(tape, &ctx.c(self.o_pha))?;
        Ok(AttentionOutput { mag, pha, scores })
    }
}

fn tape_free_bmm_nt(a: &crate::tensor::RealTensor, b: &crate::tensor::RealTensor) -> Result<Vec<f64>> {
    let tape = Tape::inference();
    Ok(tape
        .bmm_nt(&Var::constant(a.clone()), &Var::constant(b.clone()))?
        .value()
        .data()
        .to_vec())
}

fn batch_item(data: &[f64], b: usize, size: usize, scale: f64) -> Result<Vec<f64>> {
    data.get(b * size..(b + 1) * size)
        .map(|s| s.iter().map(|v| v * scale).collect())
        .ok_or_else(|| Error::Invalid(format!("capture index {b} out of range")))
}

struct GruDirection {
    w_i: ParamId,
    w_h: ParamId,
    b_i: ParamId,
    b_h: ParamId,
}

/// One GRU step with gates packed as `[r | z | n]` along the last axis.
///
/// `gi = x W_i + b_i` is supplied precomputed; `h: [B, H]`, `w_h: [H, 3H]`, `b_h: [1, 3H]`.
pub fn gru_cell(tape: &Tape, gi: &Var, h: &Var, w_h: &Var, b_h: &Var) -> Result<Var> {
    let hid = h.shape()[1];
    let gh = tape.add(&tape.matmul(h, w_h)?, b_h)?;
    let part = |v: &Var, k: usize| tape.slice(v, 1, k * hid, hid);
    let r = tape.sigmoid(&tape.add(&part(gi, 0)?, &part(&gh, 0)?)?);
    let z = tape.sigmoid(&tape.add(&part(gi, 1)?, &part(&gh, 1)?)?);
    let n = tape.tanh(&tape.add(&part(gi, 2)?, &tape.mul(&r, &part(&gh, 2)?)?)?);
    // (1 - z) n + z h
    tape.add(&n, &tape.mul(&z, &tape.sub(h, &n)?)?)
}

/// Bidirectional GRU, LeakyReLU, then a linear map back to the stream width.
pub struct MagFfn {
    hidden: usize,
    fwd: GruDirection,
    bwd: GruDirection,
    post_w: ParamId,
    post_b: ParamId,
}

impl MagFfn {
    pub fn new(init: &mut Init, name: &str, c_mag: usize, hidden_total: usize) -> Result<Self> {
        if hidden_total % 2 != 0 || hidden_total == 0 {
            return Err(Error::Invalid(format!("GRU hidden width {hidden_total} must be even")));
        }
        let h = hidden_total / 2;
        Ok(init.scope(name, |init| {
            let mut dir = |n: &str| {
                init.scope(n, |init| GruDirection {
                    w_i: init.real_kernel("w_i", &[c_mag, 3 * h], h),
                    w_h: init.real_kernel("w_h", &[h, 3 * h], h),
                    b_i: init.real_kernel("b_i", &[1, 1, 3 * h], h),
                    b_h: init.real_kernel("b_h", &[1, 3 * h], h),
                })
            };
            let fwd = dir("fwd");
            let bwd = dir("bwd");
            Self {
                hidden: h,
                fwd,
                bwd,
                post_w: init.real_kernel("post_w", &[hidden_total, c_mag], hidden_total),
                post_b: init.real_kernel("post_b", &[1, 1, c_mag], hidden_total),
            }
        }))
    }

    fn run_direction(&self, ctx: &Ctx, x: &Var, dir: &GruDirection, reverse: bool) -> Result<Var> {
        let tape = ctx.tape;
        let (b, l) = (x.shape()[0], x.shape()[1]);
        let hid = self.hidden;
        let gi = tape.add(&tape.matmul(x, &ctx.p(dir.w_i))?, &ctx.p(dir.b_i))?;
        let gi = tape.permute(&gi, &[1, 0, 2])?;
        let (w_h, b_h) = (ctx.p(dir.w_h), ctx.p(dir.b_h));
        let mut h = Var::constant(crate::tensor::RealTensor::zeros(&[b, hid]));
        let mut outs: Vec<Option<Var>> = vec![None; l];
        let order: Vec<usize> = if reverse { (0..l).rev().collect() } else { (0..l).collect() };
        for t in order {
            let g = tape.reshape(&tape.slice(&gi, 0, t, 1)?, &[b, 3 * hid])?;
            h = gru_cell(tape, &g, &h, &w_h, &b_h)?;
            outs[t] = Some(tape.reshape(&h, &[1, b, hid])?);
        }
        let outs: Vec<Var> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
        tape.permute(&tape.concat(&outs, 0)?, &[1, 0, 2])
    }

    /// Concatenated `[forward | backward]` hidden sequence `[B', L, hidden_total]`.
    pub fn hidden_states(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let f = self.run_direction(ctx, x, &self.fwd, false)?;
        let b = self.run_direction(ctx, x, &self.bwd, true)?;
        ctx.tape.concat(&[f, b], 2)
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let tape = ctx.tape;
        let h = tape.leaky_relu(&self.hidden_states(ctx, x)?, LEAKY_SLOPE);
        tape.add(&tape.matmul(&h, &ctx.p(self.post_w))?, &ctx.p(self.post_b))
    }
}

/// Complex conv expansion, modulus-gated GLU, complex conv projection.
pub struct PhaFfn {
    hidden: usize,
    expand: ComplexParam,
    ln_gamma: ParamId,
    ln_beta: ParamId,
    project: ComplexParam,
}

const FFN_KERNEL: usize = 3;

impl PhaFfn {
    /// `expand_width` is the channel count after the first conv; it is split in half.
    pub fn new(init: &mut Init, name: &str, c_pha: usize, expand_width: usize) -> Result<Self> {
        if expand_width % 2 != 0 || expand_width == 0 {
            return Err(Error::Invalid(format!(
                "phase FFN expansion width {expand_width} must be even"
            )));
        }
        let h = expand_width / 2;
        Ok(init.scope(name, |init| Self {
            hidden: h,
            expand: init.complex_kernel("expand", &[expand_width, c_pha, 1, FFN_KERNEL], c_pha * FFN_KERNEL),
            ln_gamma: init.constant("ln_gamma", &[h, 1, 1], 1.0),
            ln_beta: init.constant("ln_beta", &[h, 1, 1], 0.0),
            project: init.complex_kernel("project", &[c_pha, h, 1, FFN_KERNEL], h * FFN_KERNEL),
        }))
    }

    fn geom() -> ConvGeom {
        ConvGeom::same((1, FFN_KERNEL), (1, 1))
    }

    /// Channel-axis layer norm with affine, followed by SiLU.
    fn gate(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let tape = ctx.tape;
        let mean = tape.mean_axes(x, &[0])?;
        let centered = tape.sub(x, &mean)?;
        let var = tape.mean_axes(&tape.mul(&centered, &centered)?, &[0])?;
        let inv = tape.powf(&tape.add_scalar(&var, LAYER_NORM_EPS), -0.5);
        let y = tape.mul(&tape.mul(&centered, &inv)?, &ctx.p(self.ln_gamma))?;
        Ok(tape.silu(&tape.add(&y, &ctx.p(self.ln_beta))?))
    }

    pub fn forward(&self, ctx: &Ctx, z: &CVar) -> Result<CVar> {
        let tape = ctx.tape;
        // [B', L, C] -> [C, B', L] so the sequence axis is the conv width.
        let x = z.permute(tape, &[2, 0, 1])?;
        let e = x.conv2d(tape, &ctx.c(self.expand), Self::geom())?;
        let z1 = e.slice(tape, 0, 0, self.hidden)?;
        let z2 = e.slice(tape, 0, self.hidden, self.hidden)?;
        let gated = if ctx.break_mode == BreakMode::Ffn {
            CVar {
                re: tape.mul(&z1.re, &self.gate(ctx, &z2.re)?)?,
                im: tape.mul(&z1.im, &self.gate(ctx, &z2.im)?)?,
            }
        } else {
            z1.scale_by(tape, &self.gate(ctx, &z2.modulus(tape)?)?)?
        };
        let y = gated.conv2d(tape, &ctx.c(self.project), Self::geom())?;
        y.permute(tape, &[1, 2, 0])
    }
}

/// One HADF block operating on sequences `[B', L, C]`.
pub struct HadfBlock {
    pub attention: HybridAttention,
    pub mag_ffn: MagFfn,
    pub pha_ffn: PhaFfn,
    norms: [(ParamId, ParamId); 3],
}

impl HadfBlock {
    pub fn new(init: &mut Init, name: &str, dims: HadfDims) -> Result<Self> {
        dims.validate()?;
        init.scope(name, |init| {
            let attention = HybridAttention::new(init, "attn", dims)?;
            let mag_ffn = MagFfn::new(init, "mag_ffn", dims.c_mag, dims.mag_hidden)?;
            let pha_ffn = PhaFfn::new(init, "pha_ffn", dims.c_pha, 2 * dims.pha_hidden)?;
            let mut norm = |n: &str| {
                (
                    init.constant(&format!("{n}.mag_gamma"), &[1, 1, dims.c_mag], 1.0),
                    init.constant(&format!("{n}.pha_gamma"), &[1, 1, dims.c_pha], 1.0),
                )
            };
            let norms = [norm("norm_attn"), norm("norm_ffn"), norm("norm_out")];
            Ok(Self {
                attention,
                mag_ffn,
                pha_ffn,
                norms,
            })
        })
    }

    fn norm(&self, ctx: &Ctx, which: usize, m: &Var, p: &CVar) -> Result<(Var, CVar)> {
        let (gm, gp) = self.norms[which];
        Ok((
            rms_norm(ctx.tape, m, &ctx.p(gm), None, &[2], RMS_EPS)?,
            crms_norm(ctx.tape, p, &ctx.p(gp), &[2], CRMS_EPS)?,
        ))
    }

    pub fn forward_seq(&self, ctx: &Ctx, x: &Streams, capture: Option<usize>) -> Result<Streams> {
        let tape = ctx.tape;
        let (nm, np) = self.norm(ctx, 0, &x.mag, &x.pha)?;
        let att = self.attention.forward(ctx, &nm, &np, capture)?;
        let zm = tape.add(&x.mag, &att.mag)?;
        let zp = x.pha.add(tape, &att.pha)?;
        let (nm, np) = self.norm(ctx, 1, &zm, &zp)?;
        let fm = self.mag_ffn.forward(ctx, &nm)?;
        let fp = self.pha_ffn.forward(ctx, &np)?;
        let (om, op) = self.norm(ctx, 2, &tape.add(&zm, &fm)?, &zp.add(tape, &fp)?)?;
        Ok(Streams {
            mag: tape.add(&om, &x.mag)?,
            pha: op.add(tape, &x.pha)?,
        })
    }
}

/// A sequence block usable on either axis of the dual-path wrapper.
pub trait SequenceBlock {
    fn forward_seq(&self, ctx: &Ctx, x: &Streams, capture: Option<usize>) -> Result<Streams>;
}

impl SequenceBlock for HadfBlock {
    fn forward_seq(&self, ctx: &Ctx, x: &Streams, capture: Option<usize>) -> Result<Streams> {
        HadfBlock::forward_seq(self, ctx, x, capture)
    }
}

fn permute_streams(tape: &Tape, x: &Streams, perm: &[usize]) -> Result<Streams> {
    Ok(Streams {
        mag: tape.permute(&x.mag, perm)?,
        pha: x.pha.permute(tape, perm)?,
    })
}

/// Alternating time-axis and frequency-axis blocks over `[C, T, F']` maps.
pub fn dual_path<B: SequenceBlock>(ctx: &Ctx, blocks: &[(B, B)], x: &Streams) -> Result<Streams> {
    let tape = ctx.tape;
    let mut cur = x.clone();
    for (i, (time_block, freq_block)) in blocks.iter().enumerate() {
        // [C, T, F'] -> [F', T, C]: sequences run along time.
        let seq = permute_streams(tape, &cur, &[2, 1, 0])?;
        let seq = time_block.forward_seq(ctx, &seq, None)?;
        // [F', T, C] -> [T, F', C]: sequences run along frequency.
        let seq = permute_streams(tape, &seq, &[1, 0, 2])?;
        let capture = ctx.probe.filter(|p| p.block == i).map(|p| p.frame);
        let seq = freq_block.forward_seq(ctx, &seq, capture)?;
        cur = permute_streams(tape, &seq, &[2, 0, 1])?;
    }
    Ok(cur)
}

/// The bottleneck: `n` (time, frequency) HADF pairs.
pub struct DualPath {
    pub blocks: Vec<(HadfBlock, HadfBlock)>,
}

impl DualPath {
    pub fn new(init: &mut Init, name: &str, dims: HadfDims, n: usize) -> Result<Self> {
        init.scope(name, |init| {
            let blocks = (0..n)
                .map(|i| {
                    Ok((
                        HadfBlock::new(init, &format!("time{i}"), dims)?,
                        HadfBlock::new(init, &format!("freq{i}"), dims)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Self { blocks })
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Streams) -> Result<Streams> {
        dual_path(ctx, &self.blocks, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::StreamPair;
    use crate::params::{AttentionProbe, ParamStore};
    use crate::tensor::{relative_error, relative_error_real, ComplexTensor, RealTensor};
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn rand_real(shape: &[usize], seed: u64) -> RealTensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        RealTensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_complex(shape: &[usize], seed: u64) -> ComplexTensor {
        ComplexTensor::new(rand_real(shape, seed), rand_real(shape, seed + 100)).unwrap()
    }

    const DIMS: HadfDims = HadfDims {
        c_mag: 6,
        c_pha: 4,
        n_heads: 2,
        mag_head: 3,
        pha_head: 2,
        mag_hidden: 8,
        pha_hidden: 5,
    };

    fn seq(b: usize, l: usize, seed: u64) -> StreamPair {
        StreamPair {
            mag: rand_real(&[b, l, DIMS.c_mag], seed),
            pha: rand_complex(&[b, l, DIMS.c_pha], seed + 1),
        }
    }

    fn attention_scores(
        att: &HybridAttention,
        store: &ParamStore,
        x: &StreamPair,
        mode: BreakMode,
    ) -> Vec<RealTensor> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store).with_break_mode(mode);
        att.forward(&ctx, &Var::constant(x.mag.clone()), &CVar::constant(x.pha.clone()), None)
            .unwrap()
            .scores
            .iter()
            .map(|s| s.value().clone())
            .collect()
    }

    #[test]
    fn scores_are_rotation_invariant_and_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let att = HybridAttention::new(&mut Init::new(&mut store, 1), "a", DIMS).unwrap();
        let x = seq(2, 5, 3);
        let base = attention_scores(&att, &store, &x, BreakMode::None);
        for theta in [0.0, 0.41, 0.77, PI / 2.0, 2.0, 2.0 * PI - 1e-3] {
            let rot = attention_scores(&att, &store, &x.rotate_phase(theta), BreakMode::None);
            for (a, b) in base.iter().zip(&rot) {
                assert!(a.max_abs_diff(b) <= 1e-10);
            }
        }
        for s in &base {
            for row in s.data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn attn_break_changes_scores_under_rotation() {
        let mut store = ParamStore::new();
        let att = HybridAttention::new(&mut Init::new(&mut store, 1), "a", DIMS).unwrap();
        let x = seq(2, 5, 3);
        let base = attention_scores(&att, &store, &x, BreakMode::Attn);
        let rot = attention_scores(&att, &store, &x.rotate_phase(1.0), BreakMode::Attn);
        let worst = base.iter().zip(&rot).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
        assert!(worst >= 1e-3, "{worst}");
        assert_eq!(base[0].shape(), rot[0].shape());
    }

    #[test]
    fn hermitian_identity() {
        let q = rand_complex(&[3, 4], 5);
        let k = rand_complex(&[3, 4], 6);
        for i in 0..3 {
            for j in 0..3 {
                let (mut cart, mut herm) = (0.0, 0.0);
                for c in 0..4 {
                    let (qr, qi) = q.get(i * 4 + c);
                    let (kr, ki) = k.get(j * 4 + c);
                    cart += qr * kr + qi * ki;
                    // Re(q * conj(k)) via the complex product rule.
                    herm += qr * kr - qi * (-ki);
                }
                assert!((cart - herm).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut store = ParamStore::new();
        let att = HybridAttention::new(&mut Init::new(&mut store, 2), "a", DIMS).unwrap();
        let x = seq(3, 1, 9);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let out = att
            .forward(&ctx, &Var::constant(x.mag.clone()), &CVar::constant(x.pha.clone()), None)
            .unwrap();
        assert!(out.scores.iter().all(|s| s.value().data().iter().all(|&v| v == 1.0)));
        let (o_mag, o_b, o_pha) = att.output_params();
        let vm = x.mag.matmul(store.get(att.v_mag)).unwrap();
        let want = vm.matmul(store.get(o_mag)).unwrap().add(store.get(o_b)).unwrap();
        assert!(out.mag.value().max_abs_diff(&want) < 1e-12);
        let c = |p: ComplexParam| ComplexTensor::new(store.get(p.re).clone(), store.get(p.im).clone()).unwrap();
        let want = x.pha.matmul(&c(att.v_pha)).unwrap().matmul(&c(o_pha)).unwrap();
        assert!(relative_error(&out.pha.value(), &want) < 1e-12);
    }

    #[test]
    fn empty_sequence_rejected() {
        let mut store = ParamStore::new();
        let att = HybridAttention::new(&mut Init::new(&mut store, 2), "a", DIMS).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let r = att.forward(
            &ctx,
            &Var::constant(RealTensor::zeros(&[1, 0, 6])),
            &CVar::constant(ComplexTensor::zeros(&[1, 0, 4])),
            None,
        );
        assert!(r.is_err());
    }

    #[test]
    fn gru_cell_matches_scalar_equations() {
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let (x, h0) = (0.7, -0.3);
        let (wir, wiz, win) = (0.5, -1.2, 0.9);
        let (whr, whz, whn) = (0.3, 0.8, -0.6);
        let (bir, biz, bin) = (0.1, -0.2, 0.05);
        let (bhr, bhz, bhn) = (-0.15, 0.25, 0.4);
        let r = sig(wir * x + bir + whr * h0 + bhr);
        let z = sig(wiz * x + biz + whz * h0 + bhz);
        let n = (win * x + bin + r * (whn * h0 + bhn)).tanh();
        let want = (1.0 - z) * n + z * h0;

        let tape = Tape::inference();
        let gi = RealTensor::new(&[1, 3], vec![wir * x + bir, wiz * x + biz, win * x + bin]).unwrap();
        let got = gru_cell(
            &tape,
            &Var::constant(gi),
            &Var::constant(RealTensor::new(&[1, 1], vec![h0]).unwrap()),
            &Var::constant(RealTensor::new(&[1, 3], vec![whr, whz, whn]).unwrap()),
            &Var::constant(RealTensor::new(&[1, 3], vec![bhr, bhz, bhn]).unwrap()),
        )
        .unwrap();
        assert!((got.value().data()[0] - want).abs() <= 1e-12);
    }

    fn zeroed_biases(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).contains("b_") || store.name(id).ends_with("post_b") {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
    }

    #[test]
    fn mag_ffn_zero_fixed_point() {
        let mut store = ParamStore::new();
        let ffn = MagFfn::new(&mut Init::new(&mut store, 4), "f", 3, 6).unwrap();
        zeroed_biases(&mut store);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let y = ffn.forward(&ctx, &Var::constant(RealTensor::zeros(&[2, 1, 3]))).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reversing_sequence_swaps_gru_directions() {
        let mut store = ParamStore::new();
        let ffn = MagFfn::new(&mut Init::new(&mut store, 4), "f", 3, 6).unwrap();
        // Share weights across directions so the swap is exact.
        for n in ["w_i", "w_h", "b_i", "b_h"] {
            let a = store.find(&format!("f.fwd.{n}")).unwrap();
            let b = store.find(&format!("f.bwd.{n}")).unwrap();
            let v = store.get(a).clone();
            *store.get_mut(b) = v;
        }
        let x = rand_real(&[2, 5, 3], 12);
        let rev = {
            let d = x.data();
            let mut out = Vec::new();
            for b in 0..2 {
                for t in (0..5).rev() {
                    out.extend_from_slice(&d[(b * 5 + t) * 3..(b * 5 + t + 1) * 3]);
                }
            }
            RealTensor::new(&[2, 5, 3], out).unwrap()
        };
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let h = ffn.hidden_states(&ctx, &Var::constant(x)).unwrap();
        let hr = ffn.hidden_states(&ctx, &Var::constant(rev)).unwrap();
        for b in 0..2 {
            for t in 0..5 {
                let a = &h.value().data()[(b * 5 + t) * 6..(b * 5 + t + 1) * 6];
                let r = &hr.value().data()[(b * 5 + 4 - t) * 6..(b * 5 + 5 - t) * 6];
                assert_eq!(&a[..3], &r[3..]);
                assert_eq!(&a[3..], &r[..3]);
            }
        }
    }

    fn pha_ffn_run(ffn: &PhaFfn, store: &ParamStore, z: &ComplexTensor, mode: BreakMode) -> ComplexTensor {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store).with_break_mode(mode);
        ffn.forward(&ctx, &CVar::constant(z.clone())).unwrap().value()
    }

    #[test]
    fn pha_ffn_equivariance_zero_and_break() {
        let mut store = ParamStore::new();
        let ffn = PhaFfn::new(&mut Init::new(&mut store, 8), "p", 4, 10).unwrap();
        let z = rand_complex(&[3, 6, 4], 2);
        let base = pha_ffn_run(&ffn, &store, &z, BreakMode::None);
        assert_eq!(base.shape(), z.shape());
        let rot = pha_ffn_run(&ffn, &store, &z.rotate(2.1), BreakMode::None);
        assert!(relative_error(&rot, &base.rotate(2.1)) <= 1e-10);
        let zero = pha_ffn_run(&ffn, &store, &ComplexTensor::zeros(&[3, 6, 4]), BreakMode::None);
        assert_eq!(zero.norm(), 0.0);
        let b = pha_ffn_run(&ffn, &store, &z, BreakMode::Ffn);
        let br = pha_ffn_run(&ffn, &store, &z.rotate(2.1), BreakMode::Ffn);
        assert!(relative_error(&br, &b.rotate(2.1)) >= 1e-2);
        assert!(PhaFfn::new(&mut Init::new(&mut store, 8), "q", 4, 9).is_err());
    }

    fn block_run(block: &HadfBlock, store: &ParamStore, x: &StreamPair, mode: BreakMode) -> StreamPair {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store).with_break_mode(mode);
        block.forward_seq(&ctx, &Streams::constant(x.clone()), None).unwrap().value()
    }

    fn block_residual(block: &HadfBlock, store: &ParamStore, x: &StreamPair, theta: f64, mode: BreakMode) -> f64 {
        let a = block_run(block, store, &x.rotate_phase(theta), mode);
        let b = block_run(block, store, x, mode);
        relative_error(&a.pha, &b.pha.rotate(theta)).max(relative_error_real(&a.mag, &b.mag))
    }

    #[test]
    fn hadf_block_equivariance_and_breaks() {
        let mut store = ParamStore::new();
        let block = HadfBlock::new(&mut Init::new(&mut store, 21), "h", DIMS).unwrap();
        let x = seq(3, 5, 31);
        for theta in [0.0, 0.41, PI / 2.0, 2.0, 2.0 * PI - 1e-3] {
            assert!(block_residual(&block, &store, &x, theta, BreakMode::None) <= 1e-9);
        }
        for mode in [BreakMode::Attn, BreakMode::Ffn] {
            assert!(block_residual(&block, &store, &x, 1.0, mode) >= 1e-2, "{mode}");
        }
    }

    #[test]
    fn zero_output_projections_leave_normalized_identity() {
        let mut store = ParamStore::new();
        let block = HadfBlock::new(&mut Init::new(&mut store, 21), "h", DIMS).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let n = store.name(id);
            if n.contains("o_mag") || n.contains("o_pha") || n.contains("post_") || n.contains("project") {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let x = seq(2, 4, 5);
        let y = block_run(&block, &store, &x, BreakMode::None);
        // out = norm(x) + x with unit scales.
        let tape = Tape::inference();
        let ones_m = Var::constant(RealTensor::full(&[1, 1, DIMS.c_mag], 1.0));
        let ones_p = Var::constant(RealTensor::full(&[1, 1, DIMS.c_pha], 1.0));
        let nm = rms_norm(&tape, &Var::constant(x.mag.clone()), &ones_m, None, &[2], RMS_EPS).unwrap();
        let np = crms_norm(&tape, &CVar::constant(x.pha.clone()), &ones_p, &[2], CRMS_EPS).unwrap();
        assert!(y.mag.max_abs_diff(&nm.value().add(&x.mag).unwrap()) < 1e-12);
        assert!(relative_error(&y.pha, &np.value().add(&x.pha).unwrap()) < 1e-12);
    }

    struct Identity;

    impl SequenceBlock for Identity {
        fn forward_seq(&self, _: &Ctx, x: &Streams, _: Option<usize>) -> Result<Streams> {
            Ok(x.clone())
        }
    }

    #[test]
    fn dual_path_with_identity_blocks_is_identity() {
        let store = ParamStore::new();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let x = StreamPair {
            mag: rand_real(&[3, 4, 5], 1),
            pha: rand_complex(&[2, 4, 5], 2),
        };
        let blocks = [(Identity, Identity), (Identity, Identity)];
        let y = dual_path(&ctx, &blocks, &Streams::constant(x.clone())).unwrap().value();
        assert_eq!(y, x);
    }

    #[test]
    fn dual_path_equivariance_single_frame_and_capture() {
        let mut store = ParamStore::new();
        let dp = DualPath::new(&mut Init::new(&mut store, 3), "dp", DIMS, 2).unwrap();
        let run = |x: &StreamPair| {
            let tape = Tape::inference();
            let ctx = Ctx::new(&tape, &store).with_probe(AttentionProbe { block: 1, frame: 0 });
            let y = dp.forward(&ctx, &Streams::constant(x.clone())).unwrap().value();
            (y, ctx.take_capture().unwrap())
        };
        let x = StreamPair {
            mag: rand_real(&[6, 1, 5], 4),
            pha: rand_complex(&[4, 1, 5], 5),
        };
        let (base, cap) = run(&x);
        assert_eq!(base.mag.shape(), &[6, 1, 5]);
        assert_eq!(cap.len, 5);
        assert_eq!(cap.heads.len(), DIMS.n_heads);
        assert!(cap.max_row_sum_error() <= 1e-9);
        for theta in [0.41, PI / 2.0, 2.0] {
            let (rot, cap_rot) = run(&x.rotate_phase(theta));
            assert!(relative_error(&rot.pha, &base.pha.rotate(theta)) <= 1e-8);
            for (a, b) in cap.heads.iter().zip(&cap_rot.heads) {
                for (u, v) in a.score.iter().zip(&b.score) {
                    assert!((u - v).abs() <= 1e-10);
                }
            }
        }
        let mut buf = Vec::new();
        cap.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("head,row,col,score,mag_component,pha_component\n"));
        assert_eq!(text.lines().count(), 1 + DIMS.n_heads * 25);
    }
}
