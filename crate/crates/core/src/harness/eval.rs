//! Metric evaluation over a manifest of clean/degraded WAV pairs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cvar::CVar;
use crate::error::{Error, Result};
use crate::losses::{composite_loss, LossKind, LossWeights, Target};
use crate::metrics::{neumaier_sum, pd, si_sdr, wopd};
use crate::network::{decompress, featurize, Network};
use crate::params::{BreakMode, ParamStore};
use crate::signal::{read_wav, Stft};
use crate::tensor::ComplexTensor;

/// One manifest line. Only the two paths are required.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub clean_path: String,
    pub degraded_path: String,
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub cutoff_hz: Option<f64>,
}

/// Reads a manifest CSV with a header line.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pd_deg: f64,
    pub wopd: f64,
    pub si_sdr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub utterance: String,
    pub clean_path: String,
    pub degraded_path: String,
    #[serde(flatten)]
    pub metrics: Option<Metrics>,
    /// Metrics of the unprocessed degraded input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_metrics: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_terms: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub pd_deg: f64,
    pub wopd: f64,
    pub si_sdr_db: f64,
    pub input_metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub enhancer: String,
    pub rows: Vec<EvalRow>,
    /// Mean over rows without errors; absent when there are none.
    pub aggregate: Option<Aggregate>,
    pub errors: usize,
}

/// What maps a degraded spectrum to an enhanced one.
pub enum Enhancer<'a> {
    Network { net: &'a Network, store: &'a ParamStore },
    /// Passes the degraded input through unchanged.
    Identity,
}

impl Enhancer<'_> {
    fn name(&self) -> &'static str {
        match self {
            Self::Network { .. } => "network",
            Self::Identity => "identity",
        }
    }

    fn apply(&self, spec: &ComplexTensor) -> Result<ComplexTensor> {
        match self {
            Self::Network { net, store } => {
                let alpha = net.config.alpha;
                decompress(&net.infer(store, &featurize(spec, alpha)?, BreakMode::None)?, alpha)
            }
            Self::Identity => Ok(spec.clone()),
        }
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn pad_to_hop(x: &[f64], hop: usize) -> Vec<f64> {
    let mut v = x.to_vec();
    v.resize(x.len().div_ceil(hop) * hop, 0.0);
    v
}

fn metrics(spec: &ComplexTensor, wave: &[f64], target: &Target, clean: &[f64]) -> Result<Metrics> {
    let mag = target.magnitude();
    let phase = target.phase();
    let est = spec.angle();
    Ok(Metrics {
        pd_deg: pd(&est, &phase, &mag)?,
        wopd: wopd(&est, &phase, &mag)?,
        si_sdr_db: si_sdr(&wave[..clean.len()], clean)?,
    })
}

fn loss_terms(stft: &Rc<Stft>, spec: &ComplexTensor, target: &Target, alpha: f64) -> Result<BTreeMap<String, f64>> {
    let (t, f) = (spec.shape()[0], spec.shape()[1]);
    let pair = featurize(spec, alpha)?;
    let tape = Tape::inference();
    let mag = Var::constant(pair.mag.reshape(&[t, f])?);
    let pha = CVar::constant(ComplexTensor::new(pair.pha.re.reshape(&[t, f])?, pair.pha.im.reshape(&[t, f])?)?);
    let b = composite_loss(&tape, stft, LossKind::Dn, &mag, &pha, target, &LossWeights::default(), alpha)?;
    let mut terms: BTreeMap<String, f64> = b.terms.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    terms.insert("total".into(), b.total.value().data()[0]);
    Ok(terms)
}

fn eval_pair(stft: &Rc<Stft>, enhancer: &Enhancer, clean_path: &Path, degraded_path: &Path, alpha: f64) -> Result<(Metrics, Metrics, BTreeMap<String, f64>)> {
    let clean = read_wav(clean_path)?;
    let degraded = read_wav(degraded_path)?;
    if clean.len() != degraded.len() {
        return Err(Error::Invalid(format!(
            "length mismatch: clean {} vs degraded {} samples",
            clean.len(),
            degraded.len()
        )));
    }
    let hop = stft.config().hop;
    let target = Target::from_wave(stft, &pad_to_hop(&clean, hop))?;
    let noisy = stft.stft(&pad_to_hop(&degraded, hop))?;
    let enhanced = enhancer.apply(&noisy)?;
    let enhanced_wave = stft.istft(&enhanced)?;
    let noisy_wave = stft.istft(&noisy)?;
    Ok((
        metrics(&enhanced, &enhanced_wave, &target, &clean)?,
        metrics(&noisy, &noisy_wave, &target, &clean)?,
        loss_terms(stft, &enhanced, &target, alpha)?,
    ))
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    neumaier_sum(values) / n as f64
}

/// Evaluates every manifest row; relative paths resolve against `base`.
/// Row failures are recorded and skipped.
pub fn run(manifest: &[ManifestRow], base: &Path, enhancer: &Enhancer, alpha: f64) -> Result<EvalReport> {
    let stft = Rc::new(Stft::new(Default::default())?);
    let mut rows = Vec::with_capacity(manifest.len());
    for m in manifest {
        let degraded = resolve(base, &m.degraded_path);
        let utterance = degraded
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| m.degraded_path.clone());
        let mut row = EvalRow {
            utterance,
            clean_path: m.clean_path.clone(),
            degraded_path: m.degraded_path.clone(),
            metrics: None,
            input_metrics: None,
            loss_terms: None,
            error: None,
        };
        match eval_pair(&stft, enhancer, &resolve(base, &m.clean_path), &degraded, alpha) {
            Ok((out, input, terms)) => {
                row.metrics = Some(out);
                row.input_metrics = Some(input);
                row.loss_terms = Some(terms);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        rows.push(row);
    }
    let ok: Vec<(&Metrics, &Metrics)> = rows
        .iter()
        .filter_map(|r| Some((r.metrics.as_ref()?, r.input_metrics.as_ref()?)))
        .collect();
    let n = ok.len();
    let aggregate = (n > 0).then(|| Aggregate {
        count: n,
        pd_deg: mean(ok.iter().map(|m| m.0.pd_deg), n),
        wopd: mean(ok.iter().map(|m| m.0.wopd), n),
        si_sdr_db: mean(ok.iter().map(|m| m.0.si_sdr_db), n),
        input_metrics: Metrics {
            pd_deg: mean(ok.iter().map(|m| m.1.pd_deg), n),
            wopd: mean(ok.iter().map(|m| m.1.wopd), n),
            si_sdr_db: mean(ok.iter().map(|m| m.1.si_sdr_db), n),
        },
    });
    Ok(EvalReport {
        enhancer: enhancer.name().to_string(),
        errors: rows.len() - n,
        rows,
        aggregate,
    })
}
