//! Verification and experiment drivers behind the command-line verbs.

pub mod attn_dump;
pub mod corpus;
pub mod equivcheck;
pub mod eval;
pub mod gradcheck;
pub mod phase_retrieval;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ComplexTensor, RealTensor};

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn random_real(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> RealTensor {
    let n = shape.iter().product();
    RealTensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

pub(crate) fn random_complex(rng: &mut ChaCha8Rng, shape: &[usize]) -> ComplexTensor {
    let re = random_real(rng, shape, -1.0, 1.0);
    let im = random_real(rng, shape, -1.0, 1.0);
    ComplexTensor::new(re, im).expect("matching shapes")
}

/// Serializes `value` as pretty JSON with a trailing newline.
pub fn to_json<T: serde::Serialize>(value: &T) -> crate::Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Builds the network from `seed`, then overwrites parameters from `params` if given.
pub fn load_model(
    config: crate::network::ModelConfig,
    params: Option<&std::path::Path>,
    seed: u64,
) -> crate::Result<(crate::network::Network, crate::params::ParamStore)> {
    let mut store = crate::params::ParamStore::new();
    let net = crate::network::Network::new(config, &mut store, seed)?;
    if let Some(p) = params {
        store.load_json_into(p)?;
    }
    Ok((net, store))
}

/// Published parameter count of the standard configuration.
pub const STANDARD_REFERENCE_PARAMS: f64 = 1.55e6;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamCountReport {
    pub config: crate::network::ModelConfig,
    pub param_count: usize,
    pub small: usize,
    pub standard: usize,
    /// `standard / 1.55e6 - 1`.
    pub standard_deviation_from_reference: f64,
}

pub fn param_count_report(config: crate::network::ModelConfig) -> crate::Result<ParamCountReport> {
    use crate::network::{param_count, ModelConfig};
    let standard = param_count(&ModelConfig::standard())?;
    Ok(ParamCountReport {
        config,
        param_count: param_count(&config)?,
        small: param_count(&ModelConfig::small())?,
        standard,
        standard_deviation_from_reference: standard as f64 / STANDARD_REFERENCE_PARAMS - 1.0,
    })
}
