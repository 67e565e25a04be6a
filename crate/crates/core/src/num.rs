//! Scalar abstraction shared by the numeric modules.
//!
//! Reward arithmetic, tree statistics and the policy/GRPO math are written
//! against [`Scalar`] so they run on either `f32` or `f64`. The crate root
//! exposes `f64` aliases for the common case.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type usable throughout the crate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal. Never fails for the finite values used here.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("representable count")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Arithmetic mean; zero for an empty slice.
pub fn mean<S: Scalar>(xs: &[S]) -> S {
    if xs.is_empty() {
        return S::zero();
    }
    xs.iter().copied().sum::<S>() / S::of_usize(xs.len())
}

/// Numerically stable softmax of `logits` into a fresh vector.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut out: Vec<S> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: S = out.iter().copied().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Log-softmax of `logits`.
pub fn log_softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<S>().ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}
