use std::collections::BTreeMap;

use super::{c, Real};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MomentPair {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Serializable optimizer state; moments are keyed by parameter path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, MomentPair>,
}

/// Adam without weight decay. Moments are kept in `f64` regardless of the
/// parameter type.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            state: AdamState::default(),
        }
    }

    /// One update over the listed tensors. Parameters and gradients must be
    /// listed in the same order; tensors absent from the list are untouched.
    pub fn step<T: Real>(&mut self, params: Vec<(String, &mut [T])>, grads: Vec<(String, &[T])>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient lists differ");
        self.state.step += 1;
        let t = self.state.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((name, p), (gname, g)) in params.into_iter().zip(grads) {
            debug_assert_eq!(name, gname);
            let mp = self.state.moments.entry(name).or_insert_with(|| MomentPair {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            for i in 0..p.len() {
                let gi = g[i].to_f64().unwrap();
                mp.m[i] = self.beta1 * mp.m[i] + (1.0 - self.beta1) * gi;
                mp.v[i] = self.beta2 * mp.v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = mp.m[i] / bc1;
                let vhat = mp.v[i] / bc2;
                let upd = self.lr * mhat / (vhat.sqrt() + self.eps);
                p[i] -= c::<T>(upd);
            }
        }
    }
}
