//! Quantitative cardiac T2 mapping toolkit.
//!
//! The crate bundles the numerical pieces of a T2 mapping pipeline:
//!
//! * [`relaxometry`] — per-pixel mono-exponential T2 fitting of multi-echo volumes
//! * [`autodiff`] — a small reverse-mode automatic differentiation engine (f64 throughout)
//! * [`sqnet`] — a dual-branch CNN/Transformer network producing a segmentation
//!   and a T2 map in one forward pass
//! * [`losses`] — SSIM quantification loss, multi-scale cross-entropy, and
//!   dynamic weight averaging between the two tasks
//! * [`evaluation`] — Dice, Pearson, Bland-Altman agreement, and the 17-segment
//!   bullseye summary with SVG rendering
//! * [`synth`] — synthetic cardiac phantoms, noise injection, and the 8-way
//!   augmentation set used for training
//! * [`io`] — the on-disk formats (multi-echo volumes, T2 maps, label maps,
//!   checkpoints) shared by the command-line tools
//! * [`train`] — the dual-task training loop

pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod losses;
pub mod relaxometry;
pub mod sqnet;
pub mod synth;
pub mod train;
pub mod types;

pub use autodiff::graph::{Graph, Gradients, NodeId};
pub use autodiff::optim::ParamStore;
pub use autodiff::tensor::Tensor;
pub use error::{Error, Result};
pub use relaxometry::{FitConfig, FitMode, MultiEchoVolume, PixelFit, T2Map};
pub use sqnet::{Ablation, DualOutput, ModelConfig};
pub use types::SegMap;

/// Mixes a base seed with a stream index into a fresh RNG seed.
///
/// Uses the splitmix64 finalizer so that nearby (seed, stream) pairs land far
/// apart. Every place that needs an independent deterministic RNG (noise
/// fields, augmentation variants, dropout masks per step) derives its seed
/// through this function.
pub fn seed_mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
