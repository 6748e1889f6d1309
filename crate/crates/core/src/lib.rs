//! Multi-view reconstruction of transparent objects from noisy depth priors.
//!
//! Landmarks are seeded in a band along each keyframe's transparent-object
//! mask, matched into neighbor frames by optical flow projected onto an
//! epipolar segment bounded by the depth prior, and triangulated with a
//! structure-only bundle adjustment.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ba;
pub mod cloud;
pub mod epipolar;
pub mod flow;
pub mod frame;
pub mod geometry;
pub mod kdtree;
pub mod landmarks;
pub mod metrics;
pub mod synth;
pub mod ply;
pub mod dataset;

/// Independent, reproducible seed for sub-stream `stream` of `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
pub mod pipeline;
