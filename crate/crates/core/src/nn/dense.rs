use ndarray::{Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, Ix2};
use rand::Rng;

use crate::nn::init;
use crate::params::Parameters;

/// Fully connected layer `y = W x + b` with `W` stored as (out, in).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn he<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self::scaled(inputs, outputs, (2.0 / inputs.max(1) as f64).sqrt(), rng)
    }

    pub fn scaled<R: Rng + ?Sized>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        let weight = init::normal(&[outputs, inputs], std, rng)
            .into_dimensionality::<Ix2>()
            .expect("2-d");
        Self {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView1<f64>, dy: ArrayView1<f64>, grad: &mut Dense) -> Array1<f64> {
        self.accumulate(x, dy, grad);
        self.weight.t().dot(&dy)
    }

    /// Parameter gradients only.
    pub fn accumulate(&self, x: ArrayView1<f64>, dy: ArrayView1<f64>, grad: &mut Dense) {
        for (mut row, &d) in grad.weight.rows_mut().into_iter().zip(dy.iter()) {
            if d != 0.0 {
                row.scaled_add(d, &x);
            }
        }
        grad.bias += &dy;
    }
}

impl Parameters for Dense {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("weight".into(), self.weight.view().into_dyn()),
            ("bias".into(), self.bias.view().into_dyn()),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("weight".into(), self.weight.view_mut().into_dyn()),
            ("bias".into(), self.bias.view_mut().into_dyn()),
        ]
    }
}

/// Splits a 1-d output into two halves, e.g. (mu, log_sigma).
pub fn split_halves(v: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
    let half = v.len() / 2;
    (
        v.slice(ndarray::s![..half]).to_owned(),
        v.slice(ndarray::s![half..]).to_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_matches_hand_arithmetic() {
        let layer = Dense {
            weight: array![[1.0, 2.0], [-1.0, 0.5]],
            bias: array![0.5, -1.0],
        };
        let y = layer.forward(array![3.0, -1.0].view());
        assert_eq!(y, array![1.5, -4.5]);
    }

    #[test]
    fn backward_accumulates_outer_product() {
        let layer = Dense {
            weight: array![[1.0, 2.0], [-1.0, 0.5]],
            bias: array![0.0, 0.0],
        };
        let mut grad = Dense::zeros(2, 2);
        let dx = layer.backward(array![3.0, -1.0].view(), array![1.0, 2.0].view(), &mut grad);
        assert_eq!(grad.weight, array![[3.0, -1.0], [6.0, -2.0]]);
        assert_eq!(grad.bias, array![1.0, 2.0]);
        assert_eq!(dx, array![-1.0, 3.0]);
    }
}
