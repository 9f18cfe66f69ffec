use ndarray::{Array1, Array2, Axis};
use rand::RngCore;

use super::{glorot_bound, join, uniform_fill, ParamSet, Real};

/// Fully connected layer `y = x W^T + b` on row-major batches `[N, in]`.
#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Dense<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut dyn RngCore) -> Self {
        let mut d = Self::zeros(inputs, outputs);
        uniform_fill(d.weight.as_slice_mut().unwrap(), glorot_bound(inputs, outputs), rng);
        d
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl<T: Real> ParamSet<T> for Dense<T> {
    fn tensors(&self, prefix: &str) -> Vec<(String, &[T])> {
        vec![
            (join(prefix, "weight"), self.weight.as_slice().unwrap()),
            (join(prefix, "bias"), self.bias.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut [T])> {
        vec![
            (join(prefix, "weight"), self.weight.as_slice_mut().unwrap()),
            (join(prefix, "bias"), self.bias.as_slice_mut().unwrap()),
        ]
    }
}
