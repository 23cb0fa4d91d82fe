#![forbid(unsafe_code)]

//! Information-bottleneck attribution for small video classifiers.
//!
//! The crate bundles everything needed to explain the decisions of two toy
//! convolutional models — one reading frames, one reading optical-flow
//! color maps — by injecting a per-sample noise bottleneck into an
//! intermediate layer and measuring, in bits, how much information each
//! spatial location contributes to the prediction.
//!
//! Main pieces:
//!
//! * [`tensor`] — dense f32 tensors with reverse-mode differentiation over
//!   the small op set the models and the bottleneck objective need.
//! * [`nn`] — model specs, initialization, training with early stopping,
//!   activation capture, and the `VWTS` weights format.
//! * [`flow`] — dense Farnebäck optical flow, flow colorization, warping.
//! * [`pipeline`] — frame loading, keyframe extraction, ROI crop/resize,
//!   flow-pair construction, model-input normalization.
//! * [`iba`] — the per-sample bottleneck itself: activation statistics,
//!   noise injection, capacity maps, sequence attribution, overlays.
//! * [`metrics`] — IoU, TCS, RPI, ECE, classification and region-agreement
//!   reports.
//! * [`synth`] — deterministic synthetic datasets with known manipulated
//!   regions.
//! * [`cli`] — the `viba` command-line pipeline.

pub mod cli;
pub mod config;
pub mod flow;
pub mod iba;
pub mod img;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tensor;

/// Mixes a base seed with a stream index into an independent 64-bit seed.
///
/// Used to derive per-frame / per-sample RNG streams that stay stable no
/// matter how work is scheduled across threads.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finalizer, applied twice to decorrelate low bits.
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}
