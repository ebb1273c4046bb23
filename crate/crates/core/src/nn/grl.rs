/// Gradient reversal: identity forward, `-lambda * grad` backward.
#[derive(Debug, Clone, Copy)]
pub struct GradientReversal {
    pub lambda: f64,
}

impl GradientReversal {
    pub fn new(lambda: f64) -> Self {
        Self { lambda }
    }

    pub fn forward<T: Clone>(&self, x: &[T]) -> Vec<T> {
        x.to_vec()
    }

    pub fn backward<T: crate::Scalar>(&self, grad: &[T]) -> Vec<T> {
        let k = T::lit(-self.lambda);
        grad.iter().map(|&g| g * k).collect()
    }

    /// Annealed coefficient `max * (2 / (1 + exp(-gamma * progress)) - 1)` for `progress` in [0, 1].
    pub fn scheduled(progress: f64, gamma: f64, max: f64) -> Self {
        let p = progress.clamp(0.0, 1.0);
        Self::new(max * (2.0 / (1.0 + (-gamma * p).exp()) - 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // probe(x) = sum_i w_i * sin(x_i), evaluated downstream of the reversal.
    fn probe(x: &[f64], w: &[f64]) -> f64 {
        x.iter().zip(w).map(|(a, b)| b * a.sin()).sum()
    }

    #[test]
    fn upstream_gradient_is_negated_and_scaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let n = 6;
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let grl = GradientReversal::new(rng.random_range(0.1..1.5));
            let y = grl.forward(&x);
            assert_eq!(y, x);
            let h = 1e-5;
            let downstream: Vec<f64> = (0..n)
                .map(|i| {
                    let mut p = y.clone();
                    p[i] += h;
                    let mut m = y.clone();
                    m[i] -= h;
                    (probe(&p, &w) - probe(&m, &w)) / (2.0 * h)
                })
                .collect();
            let upstream = grl.backward(&downstream);
            for i in 0..n {
                let expected = -grl.lambda * downstream[i];
                let rel = (upstream[i] - expected).abs() / expected.abs().max(1e-12);
                assert!(rel <= 1e-4, "rel err {rel}");
                let analytic = -grl.lambda * w[i] * x[i].cos();
                assert!((upstream[i] - analytic).abs() <= 1e-4 * analytic.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn schedule_ramps_from_zero_to_max() {
        assert_eq!(GradientReversal::scheduled(0.0, 10.0, 1.0).lambda, 0.0);
        let end = GradientReversal::scheduled(1.0, 10.0, 1.0).lambda;
        assert!(end > 0.999 && end < 1.0);
        let mid = GradientReversal::scheduled(0.5, 10.0, 0.5).lambda;
        assert!(mid > 0.0 && mid < 0.5);
    }
}
