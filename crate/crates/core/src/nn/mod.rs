//! Minimal CPU tensor engine: layers with explicit forward caches and
//! hand-written backward passes, generic over `f32` (training) and `f64`
//! (gradient verification).

mod adam;
mod conv;
mod dense;
mod norm;
mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::RngCore;

pub use adam::{Adam, AdamState, MomentPair};
pub use conv::Conv2d;
pub use dense::Dense;
pub use norm::{GroupNorm, GroupNormCache};
pub use ops::{
    concat_channels, dropout_mask, max_pool2, max_pool2_backward, relu_backward_inplace, relu_inplace, sigmoid,
    split_channels, upsample2, upsample2_backward, PoolIndex,
};

/// Floating-point element type usable by the engine.
pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` constant into `T`.
#[inline]
pub fn c<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

/// Forward-pass mode. Training mode carries the stream dropout masks are
/// drawn from.
pub enum Pass<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Pass<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Pass::Train(_))
    }
}

/// Named access to every trainable tensor of a module, in a fixed order.
///
/// Paths are stable across runs and are the keys used by checkpoints and the
/// optimizer state.
pub trait ParamSet<T: Real> {
    fn tensors(&self, prefix: &str) -> Vec<(String, &[T])>;
    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut [T])>;

    fn num_params(&self) -> usize {
        self.tensors("").iter().map(|(_, t)| t.len()).sum()
    }

    fn fill_zero(&mut self) {
        for (_, t) in self.tensors_mut("") {
            t.fill(T::zero());
        }
    }

    /// Elementwise `self += other`; both sides must share the topology.
    fn add_assign_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for ((_, dst), (_, src)) in self.tensors_mut("").into_iter().zip(other.tensors("")) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    fn scale(&mut self, k: T) {
        for (_, t) in self.tensors_mut("") {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors("").iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Glorot-uniform bound for a layer with the given fan-in and fan-out.
pub(crate) fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn uniform_fill<T: Real>(data: &mut [T], bound: f64, rng: &mut dyn RngCore) {
    use rand::Rng;
    for v in data {
        let u: f64 = rng.random::<f64>();
        *v = c((2.0 * u - 1.0) * bound);
    }
}
