use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use super::{normal_init, Parameterized};
use crate::scalar::Scalar;

/// Dense layer `y = x W + b` on a single vector; `W` is `in x out`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform Glorot-style init scaled by `1/sqrt(in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        let w = normal_init(rng, inputs * outputs, (1.0 / inputs as f64).sqrt());
        Self {
            weight: Array2::from_shape_vec((inputs, outputs), w).unwrap(),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView1<'_, T>) -> Array1<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Adds parameter gradients into `grads` and returns the input gradient.
    pub fn backward(&self, x: ArrayView1<'_, T>, grad_out: ArrayView1<'_, T>, grads: &mut [Vec<T>]) -> Array1<T> {
        let out = self.outputs();
        for i in 0..self.inputs() {
            let xi = x[i];
            let row = &mut grads[0][i * out..(i + 1) * out];
            for (g, &d) in row.iter_mut().zip(grad_out.iter()) {
                *g += xi * d;
            }
        }
        for (g, &d) in grads[1].iter_mut().zip(grad_out.iter()) {
            *g += d;
        }
        self.weight.dot(&grad_out)
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn params(&self) -> Vec<&[T]> {
        vec![self.weight.as_slice().unwrap(), self.bias.as_slice().unwrap()]
    }
    fn params_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.weight.as_slice_mut().unwrap(), self.bias.as_slice_mut().unwrap()]
    }
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.inputs(), self.outputs()], vec![self.outputs()]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut lin = Linear::<f64>::new(&mut rng, 4, 3);
        let x = ndarray::array![0.3, -1.2, 0.8, 2.0];
        let r = ndarray::array![1.0, -0.5, 0.25];
        let mut grads = lin.zero_grads();
        let dx = lin.backward(x.view(), r.view(), &mut grads);
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (lin.forward(xp.view()).dot(&r) - lin.forward(xm.view()).dot(&r)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-8);
        }
        for idx in 0..12 {
            let orig = lin.weight.as_slice().unwrap()[idx];
            lin.weight.as_slice_mut().unwrap()[idx] = orig + h;
            let fp = lin.forward(x.view()).dot(&r);
            lin.weight.as_slice_mut().unwrap()[idx] = orig - h;
            let fm = lin.forward(x.view()).dot(&r);
            lin.weight.as_slice_mut().unwrap()[idx] = orig;
            assert!(((fp - fm) / (2.0 * h) - grads[0][idx]).abs() < 1e-8);
        }
        assert_eq!(grads[1], r.to_vec());
    }
}
