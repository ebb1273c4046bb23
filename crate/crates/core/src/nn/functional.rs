//! Softmax, cross-entropy and argmax over class-score vectors.

use ndarray::{Array1, ArrayView1};

use crate::scalar::Scalar;

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: ArrayView1<'_, T>) -> Array1<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// `log(softmax(logits))[i]`, computed without forming the softmax.
pub fn log_softmax_at<T: Scalar>(logits: ArrayView1<'_, T>, index: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    logits[index] - lse
}

/// Cross-entropy of `logits` against a hard label.
pub fn cross_entropy<T: Scalar>(logits: ArrayView1<'_, T>, label: usize) -> T {
    -log_softmax_at(logits, label)
}

/// Cross-entropy and its gradient with respect to the logits (`softmax - onehot`).
pub fn cross_entropy_with_grad<T: Scalar>(logits: ArrayView1<'_, T>, label: usize) -> (T, Array1<T>) {
    let mut grad = softmax(logits);
    let loss = cross_entropy(logits, label);
    grad[label] -= T::one();
    (loss, grad)
}

/// Pulls a gradient with respect to softmax probabilities back to the logits.
pub fn softmax_backward<T: Scalar>(probs: ArrayView1<'_, T>, grad_probs: ArrayView1<'_, T>) -> Array1<T> {
    let dot = probs.dot(&grad_probs);
    let mut out = Array1::zeros(probs.len());
    for i in 0..probs.len() {
        out[i] = probs[i] * (grad_probs[i] - dot);
    }
    out
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax<T: Scalar>(values: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
