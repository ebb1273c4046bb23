//! Channel-reduction block placed between the backbone and the prototype layer.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{normal_init, Parameterized};
use crate::scalar::Scalar;

/// Two 1x1 convolutions `D_in -> D_mid -> D_out` with a ReLU between and no
/// output nonlinearity. Operates on a `(H*W) x D` patch matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AddOn<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// Saved activations of one [`AddOn::forward`] call.
#[derive(Debug, Clone)]
pub struct AddOnTape<T> {
    input: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Scalar> AddOn<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_mid: usize, d_out: usize) -> Self {
        let w1 = normal_init(rng, d_in * d_mid, (2.0 / d_in as f64).sqrt());
        let w2 = normal_init(rng, d_mid * d_out, (1.0 / d_mid as f64).sqrt());
        Self {
            w1: Array2::from_shape_vec((d_in, d_mid), w1).unwrap(),
            b1: Array1::zeros(d_mid),
            w2: Array2::from_shape_vec((d_mid, d_out), w2).unwrap(),
            b2: Array1::zeros(d_out),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.w1.nrows(), self.w1.ncols(), self.w2.ncols())
    }

    pub fn infer(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut h = x.dot(&self.w1) + &self.b1;
        h.mapv_inplace(|v| v.max(T::zero()));
        h.dot(&self.w2) + &self.b2
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> (Array2<T>, AddOnTape<T>) {
        let mut h = x.dot(&self.w1) + &self.b1;
        h.mapv_inplace(|v| v.max(T::zero()));
        let y = h.dot(&self.w2) + &self.b2;
        (
            y,
            AddOnTape {
                input: x.to_owned(),
                hidden: h,
            },
        )
    }

    /// Adds parameter gradients into `grads` when given, returns the input gradient.
    pub fn backward(&self, tape: &AddOnTape<T>, grad_out: ArrayView2<'_, T>, grads: Option<&mut [Vec<T>]>) -> Array2<T> {
        let mut dh = grad_out.dot(&self.w2.t());
        for (d, &h) in dh.iter_mut().zip(tape.hidden.iter()) {
            if h <= T::zero() {
                *d = T::zero();
            }
        }
        if let Some(grads) = grads {
            let gw2 = tape.hidden.t().dot(&grad_out);
            let gb2 = grad_out.sum_axis(Axis(0));
            let gw1 = tape.input.t().dot(&dh);
            let gb1 = dh.sum_axis(Axis(0));
            let sources: [Vec<T>; 4] = [
                gw1.into_raw_vec_and_offset().0,
                gb1.to_vec(),
                gw2.into_raw_vec_and_offset().0,
                gb2.to_vec(),
            ];
            for (slot, src) in grads.iter_mut().zip(sources) {
                for (a, b) in slot.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        dh.dot(&self.w1.t())
    }
}

impl<T: Scalar> Parameterized<T> for AddOn<T> {
    fn params(&self) -> Vec<&[T]> {
        vec![
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }
    fn params_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (a, b, c) = self.dims();
        vec![vec![a, b], vec![b], vec![b, c], vec![c]]
    }
}
