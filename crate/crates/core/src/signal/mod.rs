//! Spectral analysis, degradation synthesis and phase retrieval.

pub mod degrade;
pub mod griffin_lim;
pub mod stft;
pub mod wav;

pub use degrade::{degrade, make_rir, DegradationKind, DegradationSpec};
pub use griffin_lim::griffin_lim;
pub use stft::{Stft, StftConfig};
pub use wav::{read_wav, write_wav};
