//! Attention-map export from one frequency-axis block of the bottleneck.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::hadf::AttentionMapExport;
use crate::layers::Streams;
use crate::network::{featurize, Network};
use crate::params::{AttentionProbe, BreakMode, Ctx, ParamStore};
use crate::signal::Stft;

/// Runs the model on `wave` and captures the frequency-axis attention of
/// `block` at `frame` (the middle frame when `None`).
pub fn run(net: &Network, store: &ParamStore, wave: &[f64], block: usize, frame: Option<usize>) -> Result<AttentionMapExport> {
    let n = net.config.n_dual_path;
    if block >= n {
        return Err(Error::Invalid(format!("block index {block} out of range for {n} dual-path blocks")));
    }
    let stft = Stft::new(Default::default())?;
    let hop = stft.config().hop;
    let mut padded = wave.to_vec();
    padded.resize(wave.len().div_ceil(hop) * hop, 0.0);
    let spec = stft.stft(&padded)?;
    let frames = spec.shape()[0];
    let frame = frame.unwrap_or(frames / 2);
    if frame >= frames {
        return Err(Error::Invalid(format!("frame {frame} out of range for {frames} frames")));
    }
    let x = featurize(&spec, net.config.alpha)?;
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, store)
        .with_break_mode(BreakMode::None)
        .with_probe(AttentionProbe { block, frame });
    net.forward(&ctx, &Streams::constant(x))?;
    ctx.take_capture()
        .ok_or_else(|| Error::Invalid(format!("block {block} produced no attention capture")))
}
