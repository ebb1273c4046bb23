//! Minimal CPU neural-network toolkit: CHW convolution stacks with explicit
//! backward passes, dense heads, Adam and gradient reversal.
//!
//! Every layer is immutable during `forward`/`backward`; intermediate values
//! live in a per-sample [`Tape`] so samples of a batch can run in parallel
//! against shared parameters.

pub mod addon;
pub mod functional;
pub mod grl;
pub mod layers;
pub mod linear;
pub mod optim;

pub use addon::AddOn;
pub use grl::GradientReversal;
pub use layers::{BasicBlock, ChannelAffine, Conv2d, Layer, MaxPool2d, Relu, Sequential, Tape};
pub use linear::Linear;
pub use optim::Adam;

use crate::scalar::Scalar;

/// Anything owning trainable tensors, exposed as flat slices in a fixed order.
pub trait Parameterized<T: Scalar> {
    fn params(&self) -> Vec<&[T]>;
    fn params_mut(&mut self) -> Vec<&mut [T]>;
    fn param_shapes(&self) -> Vec<Vec<usize>>;

    fn num_param_tensors(&self) -> usize {
        self.param_shapes().len()
    }

    fn zero_grads(&self) -> Vec<Vec<T>> {
        self.param_shapes()
            .iter()
            .map(|s| vec![T::zero(); s.iter().product()])
            .collect()
    }
}

/// Adds `src` into `dst` elementwise, tensor by tensor.
pub fn accumulate<T: Scalar>(dst: &mut [Vec<T>], src: &[Vec<T>]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, &b) in d.iter_mut().zip(s) {
            *a += b;
        }
    }
}

/// Multiplies every gradient entry by `factor`.
pub fn scale<T: Scalar>(grads: &mut [Vec<T>], factor: T) {
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= factor;
        }
    }
}

/// True when every entry of every tensor is finite.
pub fn all_finite<T: Scalar>(grads: &[Vec<T>]) -> bool {
    grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
}

/// Standard normal draw scaled by `std`.
pub(crate) fn normal_init<T: Scalar, R: rand::Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect()
}
