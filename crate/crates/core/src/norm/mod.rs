//! The normalization transforms under comparison.
//!
//! - [`bn`] — per-channel batch normalization with running statistics and an
//!   exact backward pass through the batch moments.
//! - [`group`] — the shared grouped transform every variant specializes:
//!   center and scale within an arbitrary partition of the `(n, l)` positions
//!   of each channel.
//! - [`mn`] — mixture normalization: responsibility-weighted per-component
//!   statistics and aggregation, plus the exact backward pass through the
//!   responsibilities.
//! - [`acn`] — context normalization: learned per-context `(mu, sigma^2)`
//!   tables, the parameter gradients, the embedding-based variant, and the
//!   collective inference rule.

pub mod acn;
pub mod bn;
pub mod group;
pub mod mn;

pub use acn::{
    acn_backward, acn_base_forward, acn_forward, acn_inference_aggregate, per_context_inference,
    AcnBaseCache, AcnBaseNet, AcnCache, AcnGrads, ContextIds, ContextParamTable, DenseEmbed,
};
pub use bn::{bn_backward, bn_forward, BnCache, BnState, Mode};
pub use group::{general_transform, Groups};
pub use mn::{mn_backward, mn_forward, mn_forward_cached, MnCache};

/// Default numerical stabilizer added under every square root.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] on positive inputs: `ln(e^y - 1)`.
#[inline]
pub(crate) fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp()).ln_1p()
}

/// Numerically stable logistic function (the derivative of softplus).
#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
