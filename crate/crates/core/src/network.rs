//! Encoder, dual-path bottleneck and decoder assembled into the full model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::conv::ConvGeom;
use crate::cvar::CVar;
use crate::error::{shape_err, Error, Result};
use crate::hadf::{DualPath, HadfDims};
use crate::layers::{DenseBlock, Mpicm, MpicmMode, StreamPair, Streams};
use crate::params::{BreakMode, ComplexParam, Ctx, Init, ParamId, ParamStore};
use crate::signal::Stft;
use crate::tensor::{ComplexTensor, RealTensor};

/// Depth of each dilated dense block.
pub const DENSE_DEPTH: usize = 4;
/// Cells with modulus below this get the phase `1 + 0j`.
pub const ZERO_MAGNITUDE: f64 = 1e-12;
const PHASE_NORM_EPS: f64 = 1e-30;

fn default_heads() -> usize {
    4
}
fn default_dual_path() -> usize {
    4
}
fn default_bins() -> usize {
    201
}
fn default_alpha() -> f64 {
    0.3
}

/// Channel widths and structural sizes of a model variant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "C_mag")]
    pub c_mag: usize,
    #[serde(rename = "C_pha")]
    pub c_pha: usize,
    #[serde(rename = "C_mag_head")]
    pub c_mag_head: usize,
    #[serde(rename = "C_pha_head")]
    pub c_pha_head: usize,
    #[serde(rename = "C_mag_hidden")]
    pub c_mag_hidden: usize,
    #[serde(rename = "C_pha_hidden")]
    pub c_pha_hidden: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_dual_path")]
    pub n_dual_path: usize,
    #[serde(rename = "F", default = "default_bins")]
    pub f: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl ModelConfig {
    fn table(c: [usize; 6]) -> Self {
        Self {
            c_mag: c[0],
            c_pha: c[1],
            c_mag_head: c[2],
            c_pha_head: c[3],
            c_mag_hidden: c[4],
            c_pha_hidden: c[5],
            n_heads: default_heads(),
            n_dual_path: default_dual_path(),
            f: default_bins(),
            alpha: default_alpha(),
        }
    }

    pub fn small() -> Self {
        Self::table([32, 16, 8, 6, 64, 64])
    }

    pub fn standard() -> Self {
        Self::table([48, 16, 12, 6, 96, 64])
    }

    /// `small`, `standard`, or a path to a JSON document.
    pub fn resolve(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(Self::small()),
            "standard" => Ok(Self::standard()),
            path => Self::from_json_file(Path::new(path)),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Invalid(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if self.f < 3 || self.f % 2 == 0 {
            return Err(Error::Invalid(format!("frequency size {} must be odd and >= 3", self.f)));
        }
        if [self.c_mag, self.c_pha, self.n_heads].contains(&0) {
            return Err(Error::Invalid("channel widths and head count must be positive".into()));
        }
        Ok(())
    }

    pub fn hadf_dims(&self) -> HadfDims {
        HadfDims {
            c_mag: self.c_mag,
            c_pha: self.c_pha,
            n_heads: self.n_heads,
            mag_head: self.c_mag_head,
            pha_head: self.c_pha_head,
            mag_hidden: self.c_mag_hidden,
            pha_hidden: self.c_pha_hidden,
        }
    }
}

/// Network input/output: compressed magnitude and unit phase, each `[1, T, F]`.
pub type SpectrumPair = StreamPair;

/// Splits a `[T, F]` spectrum into compressed magnitude and unit phase.
pub fn featurize(spec: &ComplexTensor, alpha: f64) -> Result<SpectrumPair> {
    let s = spec.shape();
    if s.len() != 2 {
        return Err(shape_err("featurize", s, &[0, 0]));
    }
    let shape = [1, s[0], s[1]];
    let n = spec.len();
    let (mut mag, mut pre, mut pim) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (re, im) = spec.get(i);
        let r = re.hypot(im);
        mag.push(r.powf(alpha));
        if r < ZERO_MAGNITUDE {
            pre.push(1.0);
            pim.push(0.0);
        } else {
            pre.push(re / r);
            pim.push(im / r);
        }
    }
    StreamPair::new(
        RealTensor::new(&shape, mag)?,
        ComplexTensor::new(RealTensor::new(&shape, pre)?, RealTensor::new(&shape, pim)?)?,
    )
}

/// Recombines `[1, T, F]` compressed magnitude and phase into a `[T, F]` spectrum.
pub fn decompress(pair: &SpectrumPair, alpha: f64) -> Result<ComplexTensor> {
    let s = pair.mag.shape();
    let m = pair.mag.map(|v| v.max(0.0).powf(1.0 / alpha)).reshape(&s[1..])?;
    ComplexTensor::new(
        pair.pha.re.reshape(&s[1..])?.mul(&m)?,
        pair.pha.im.reshape(&s[1..])?.mul(&m)?,
    )
}

pub struct Network {
    pub config: ModelConfig,
    expand: Mpicm,
    encoder: DenseBlock,
    down: Mpicm,
    pub bottleneck: DualPath,
    decoder: DenseBlock,
    up: Mpicm,
    mag_head: ParamId,
    mag_head_bias: ParamId,
    pha_head: ComplexParam,
}

impl Network {
    /// Builds the model, registering seeded parameters in `store`.
    pub fn new(config: ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(store, seed);
        let c = (config.c_mag, config.c_pha);
        let f = config.f;
        let expand = Mpicm::new(&mut init, "expand", MpicmMode::Expand, (1, 1), c, f)?;
        let encoder = DenseBlock::new(&mut init, "encoder", c, f, DENSE_DEPTH)?;
        let down = Mpicm::new(&mut init, "down", MpicmMode::Downsample, c, c, f)?;
        let fh = down.k_out;
        let bottleneck = DualPath::new(&mut init, "bottleneck", config.hadf_dims(), config.n_dual_path)?;
        let decoder = DenseBlock::new(&mut init, "decoder", c, fh, DENSE_DEPTH)?;
        let up = Mpicm::new(&mut init, "up", MpicmMode::Upsample, c, c, fh)?;
        if up.k_out != f {
            return Err(Error::Invalid(format!("up-sampling restores {} bins, expected {f}", up.k_out)));
        }
        let (mag_head, mag_head_bias, pha_head) = init.scope("head", |init| {
            (
                init.real_kernel("mag", &[1, c.0, 3, 3], 9 * c.0),
                init.real_kernel("mag_bias", &[1, 1, 1], 9 * c.0),
                init.complex_kernel("pha", &[1, c.1, 3, 3], 9 * c.1),
            )
        });
        Ok(Self {
            config,
            expand,
            encoder,
            down,
            bottleneck,
            decoder,
            up,
            mag_head,
            mag_head_bias,
            pha_head,
        })
    }

    /// Everything before the output heads: `[C, T, F]` features per stream.
    pub fn trunk(&self, ctx: &Ctx, x: &Streams) -> Result<Streams> {
        let s = x.mag.shape();
        if s.len() != 3 || s[0] != 1 || s[2] != self.config.f || x.pha.shape() != s {
            return Err(shape_err("network input", s, &[1, 0, self.config.f]));
        }
        if s[1] == 0 {
            return Err(Error::Invalid("network input has no frames".into()));
        }
        let h = self.expand.forward(ctx, x)?;
        let h = self.encoder.forward(ctx, &h)?;
        let h = self.down.forward(ctx, &h)?;
        let h = self.bottleneck.forward(ctx, &h)?;
        let h = self.decoder.forward(ctx, &h)?;
        self.up.forward(ctx, &h)
    }

    /// Output heads: ReLU magnitude and unit-modulus phase, both `[1, T, F]`.
    pub fn heads(&self, ctx: &Ctx, h: &Streams) -> Result<Streams> {
        let tape = ctx.tape;
        let geom = ConvGeom::same((3, 3), (1, 1));
        let m = tape.conv2d(&h.mag, &ctx.p(self.mag_head), geom)?;
        let m = tape.relu(&tape.add(&m, &ctx.p(self.mag_head_bias))?);
        let z = h.pha.conv2d(tape, &ctx.c(self.pha_head), geom)?;
        let inv = tape.powf(&tape.add_scalar(&z.power(tape)?, PHASE_NORM_EPS), -0.5);
        Ok(Streams {
            mag: m,
            pha: z.scale_by(tape, &inv)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Streams) -> Result<Streams> {
        self.heads(ctx, &self.trunk(ctx, x)?)
    }

    /// Inference-only forward pass.
    pub fn infer(&self, store: &ParamStore, x: &SpectrumPair, mode: BreakMode) -> Result<SpectrumPair> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store).with_break_mode(mode);
        Ok(self.forward(&ctx, &Streams::constant(x.clone()))?.value())
    }

    /// Enhanced `[T, F]` spectrum for an input spectrum.
    pub fn enhance_spectrum(&self, store: &ParamStore, spec: &ComplexTensor) -> Result<ComplexTensor> {
        let alpha = self.config.alpha;
        let out = self.infer(store, &featurize(spec, alpha)?, BreakMode::None)?;
        decompress(&out, alpha)
    }

    pub fn enhance(&self, store: &ParamStore, stft: &Stft, wave: &[f64]) -> Result<Vec<f64>> {
        enhance_with(stft, wave, |spec| self.enhance_spectrum(store, spec))
    }
}

/// STFT, spectral map, ISTFT. The input is zero-padded to whole hops and the
/// output trimmed back to the input length.
pub fn enhance_with(
    stft: &Stft,
    wave: &[f64],
    map: impl FnOnce(&ComplexTensor) -> Result<ComplexTensor>,
) -> Result<Vec<f64>> {
    if wave.is_empty() {
        return Err(Error::Invalid("empty waveform".into()));
    }
    let hop = stft.config().hop;
    let mut padded = wave.to_vec();
    padded.resize(wave.len().div_ceil(hop) * hop, 0.0);
    let spec = stft.stft(&padded)?;
    let out = map(&spec)?;
    if out.shape() != spec.shape() {
        return Err(shape_err("enhanced spectrum", out.shape(), spec.shape()));
    }
    let mut y = stft.istft(&out)?;
    y.resize(wave.len(), 0.0);
    Ok(y)
}

/// Exact scalar parameter count; a complex weight counts twice.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    let mut store = ParamStore::new();
    Network::new(*config, &mut store, 0)?;
    Ok(store.scalar_count())
}

/// Spectrum `[T, F]` on the tape from network outputs, as a complex pair.
pub fn output_spectrum(tape: &Tape, out: &Streams, alpha: f64) -> Result<CVar> {
    let s = out.mag.shape().to_vec();
    let m = tape.powf(&out.mag, 1.0 / alpha);
    let spec = out.pha.scale_by(tape, &m)?;
    spec.reshape(tape, &s[1..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn featurize_examples() {
        let spec = ComplexTensor::new(
            RealTensor::new(&[1, 2], vec![0.0, 8.0 * (PI / 3.0).cos()]).unwrap(),
            RealTensor::new(&[1, 2], vec![0.0, 8.0 * (PI / 3.0).sin()]).unwrap(),
        )
        .unwrap();
        let p = featurize(&spec, 0.3).unwrap();
        assert_eq!(p.mag.data()[0], 0.0);
        assert_eq!(p.pha.get(0), (1.0, 0.0));
        assert!((p.mag.data()[1] - 8f64.powf(0.3)).abs() < 1e-12);
        assert!((p.mag.data()[1] - 1.8661).abs() < 1e-4);
        let (re, im) = p.pha.get(1);
        assert!((re - 0.5).abs() < 1e-12 && (im - 3f64.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn config_json_round_trip_and_unknown_keys() {
        let text = serde_json::to_string(&ModelConfig::standard()).unwrap();
        assert!(text.contains("\"C_mag_hidden\":96"));
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ModelConfig::standard());
        let bad = text.replace("\"alpha\"", "\"beta\"");
        assert!(serde_json::from_str::<ModelConfig>(&bad).is_err());
        let minimal = r#"{"C_mag":32,"C_pha":16,"C_mag_head":8,"C_pha_head":6,"C_mag_hidden":64,"C_pha_hidden":64}"#;
        assert_eq!(serde_json::from_str::<ModelConfig>(minimal).unwrap(), ModelConfig::small());
    }

    #[test]
    fn invalid_alpha_rejected() {
        let mut c = ModelConfig::small();
        c.alpha = 0.0;
        assert!(c.validate().is_err());
    }
}
