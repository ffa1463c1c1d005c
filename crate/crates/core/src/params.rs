//! Named parameter storage, seeded initialization and the per-pass binding
//! context that turns stored parameters into tape leaves.

use std::cell::RefCell;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::cvar::CVar;
use crate::error::{Error, Result};
use crate::hadf::AttentionMapExport;
use crate::tensor::RealTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// A complex parameter stored as two real tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComplexParam {
    pub re: ParamId,
    pub im: ParamId,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<RealTensor>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: RealTensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &RealTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut RealTensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(RealTensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let stored: Vec<StoredTensor> = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| StoredTensor {
                name: n.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        std::fs::write(path, serde_json::to_vec(&stored)?)?;
        Ok(())
    }

    /// Loads values into an existing store with identical layout.
    pub fn load_json_into(&mut self, path: &Path) -> Result<()> {
        let stored: Vec<StoredTensor> = serde_json::from_slice(&std::fs::read(path)?)?;
        if stored.len() != self.tensors.len() {
            return Err(Error::Invalid(format!(
                "parameter file holds {} tensors, model expects {}",
                stored.len(),
                self.tensors.len()
            )));
        }
        for (i, s) in stored.into_iter().enumerate() {
            if s.name != self.names[i] || s.shape != self.tensors[i].shape() {
                return Err(Error::Invalid(format!(
                    "parameter {} ({:?}) does not match {} ({:?})",
                    s.name,
                    s.shape,
                    self.names[i],
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = RealTensor::new(&s.shape, s.data)?;
        }
        Ok(())
    }
}

/// Seeded parameter factory.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let r = f(self);
        self.prefix.pop();
        r
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    self.rng.random_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
        let full = self.full_name(name);
        self.store.push(full, RealTensor::from_parts(shape.to_vec(), data))
    }

    /// Real kernel, uniform in `±sqrt(1 / fan_in)`.
    pub fn real_kernel(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        self.uniform(name, shape, (1.0 / fan_in.max(1) as f64).sqrt())
    }

    /// Complex kernel, real and imaginary parts uniform in `±sqrt(1 / (2 fan_in))`.
    pub fn complex_kernel(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ComplexParam {
        let bound = (1.0 / (2 * fan_in.max(1)) as f64).sqrt();
        ComplexParam {
            re: self.uniform(&format!("{name}.re"), shape, bound),
            im: self.uniform(&format!("{name}.im"), shape, bound),
        }
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.push(full, RealTensor::full(shape, value))
    }
}

/// Rotation-equivariance ablations applied to an otherwise unchanged network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BreakMode {
    #[default]
    None,
    /// Interactive gate reads `Re + Im` of the phase feature instead of its modulus.
    Mpicm,
    /// Real part of the phase query is negated before scoring.
    Attn,
    /// Phase FFN gates real and imaginary parts separately.
    Ffn,
}

impl std::str::FromStr for BreakMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "mpicm" => Ok(Self::Mpicm),
            "attn" => Ok(Self::Attn),
            "ffn" => Ok(Self::Ffn),
            other => Err(Error::Invalid(format!("unknown break mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for BreakMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Mpicm => "mpicm",
            Self::Attn => "attn",
            Self::Ffn => "ffn",
        })
    }
}

/// Requests attention capture for one frequency-axis block at one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionProbe {
    pub block: usize,
    pub frame: usize,
}

/// Per-pass binding of stored parameters to tape leaves.
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    store: &'a ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
    pub break_mode: BreakMode,
    pub probe: Option<AttentionProbe>,
    captured: RefCell<Option<AttentionMapExport>>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            break_mode: BreakMode::None,
            probe: None,
            captured: RefCell::new(None),
        }
    }

    pub fn with_break_mode(mut self, mode: BreakMode) -> Self {
        self.break_mode = mode;
        self
    }

    pub fn with_probe(mut self, probe: AttentionProbe) -> Self {
        self.probe = Some(probe);
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The leaf for `id`, created on first use within this pass.
    pub fn p(&self, id: ParamId) -> Var {
        let mut bound = self.bound.borrow_mut();
        bound[id.0]
            .get_or_insert_with(|| self.tape.leaf(self.store.get(id).clone()))
            .clone()
    }

    pub fn c(&self, id: ComplexParam) -> CVar {
        CVar {
            re: self.p(id.re),
            im: self.p(id.im),
        }
    }

    /// Gradients for every parameter touched in this pass, in store order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, RealTensor)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.as_ref().map(|v| (ParamId(i), grads.get(v))))
            .collect()
    }

    pub(crate) fn capture(&self, export: AttentionMapExport) {
        *self.captured.borrow_mut() = Some(export);
    }

    pub fn take_capture(&self) -> Option<AttentionMapExport> {
        self.captured.borrow_mut().take()
    }
}
