//! Prototypical head `h_p` and the two losses tying it to the base classifier:
//! pseudo-label cross-entropy on both domains and an L1 fidelity penalty
//! between the two softmax outputs on the target domain.

use ndarray::{Array1, Array2, ArrayView1};

use crate::base_model::PseudoLabels;
use crate::datasets::Domain;
use crate::error::{Error, Result};
use crate::nn::functional::{cross_entropy_with_grad, softmax, softmax_backward};
use crate::protolayer::PrototypeBank;
use crate::scalar::Scalar;

pub const OWN_CLASS_WEIGHT: f64 = 1.0;
pub const OTHER_CLASS_WEIGHT: f64 = -0.5;

/// Linear map from the `c * K` similarity scores to `c` class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypicalHead<T> {
    /// `(c * K) x c`.
    weights: Array2<T>,
}

impl<T: Scalar> PrototypicalHead<T> {
    pub fn from_weights(weights: Array2<T>) -> Self {
        Self {
            weights: weights.as_standard_layout().into_owned(),
        }
    }

    pub fn weights(&self) -> &Array2<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        self.weights.as_slice_mut().expect("standard layout")
    }

    pub fn n_prototypes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, similarity: ArrayView1<'_, T>) -> Array1<T> {
        self.weights.t().dot(&similarity)
    }

    pub fn probabilities(&self, similarity: ArrayView1<'_, T>) -> Array1<T> {
        softmax(self.logits(similarity).view())
    }

    pub fn l1_norm(&self) -> T {
        self.weights.iter().fold(T::zero(), |a, &w| a + w.abs())
    }
}

/// `1` between each prototype and its own class, `-0.5` elsewhere.
pub fn init_head<T: Scalar>(bank: &PrototypeBank<T>) -> PrototypicalHead<T> {
    let weights = Array2::from_shape_fn((bank.len(), bank.n_classes()), |(j, k)| {
        T::lit(if bank.class_of(j) == k { OWN_CLASS_WEIGHT } else { OTHER_CLASS_WEIGHT })
    });
    PrototypicalHead { weights }
}

/// Similarity vector of one batch member, keyed into the pseudo-label cache.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample<T> {
    pub index: usize,
    pub domain: Domain,
    pub similarity: Array1<T>,
}

/// Loss with gradients for head weights and each sample's similarity vector.
#[derive(Debug, Clone)]
pub struct HeadLossGrad<T> {
    pub value: T,
    pub weights: Array2<T>,
    pub scores: Vec<Array1<T>>,
}

impl<T: Scalar> HeadLossGrad<T> {
    fn zeros(head: &PrototypicalHead<T>, samples: &[&ScoredSample<T>]) -> Self {
        Self {
            value: T::zero(),
            weights: Array2::zeros(head.weights.raw_dim()),
            scores: samples.iter().map(|s| Array1::zeros(s.similarity.len())).collect(),
        }
    }

    /// Backpropagates a logit gradient of sample `i` into weights and scores.
    fn backprop(&mut self, head: &PrototypicalHead<T>, i: usize, s: ArrayView1<'_, T>, d_logits: &Array1<T>) {
        for (j, &sj) in s.iter().enumerate() {
            self.weights.row_mut(j).scaled_add(sj, d_logits);
        }
        self.scores[i] += &head.weights.dot(d_logits);
    }
}

fn check_width<T: Scalar>(head: &PrototypicalHead<T>, s: &ScoredSample<T>) -> Result<()> {
    if s.similarity.len() != head.n_prototypes() {
        return Err(Error::ShapeError(format!(
            "similarity vector of length {} for a head with {} prototypes",
            s.similarity.len(),
            head.n_prototypes()
        )));
    }
    Ok(())
}

/// Mean cross-entropy against pseudo-labels over one domain's batch, scaled by `weight`.
fn domain_ce<T: Scalar>(
    samples: &[ScoredSample<T>],
    domain: Domain,
    head: &PrototypicalHead<T>,
    pseudo: &PseudoLabels<T>,
    weight: T,
) -> Result<HeadLossGrad<T>> {
    let refs: Vec<&ScoredSample<T>> = samples.iter().collect();
    let mut out = HeadLossGrad::zeros(head, &refs);
    if samples.is_empty() {
        return Ok(out);
    }
    let scale = weight / T::lit(samples.len() as f64);
    for (i, s) in samples.iter().enumerate() {
        if s.domain != domain {
            return Err(Error::DomainError(format!(
                "sample {} is {}, expected {}",
                s.index,
                s.domain.as_str(),
                domain.as_str()
            )));
        }
        check_width(head, s)?;
        let label = pseudo.get(domain, s.index)?.label;
        let (loss, g) = cross_entropy_with_grad(head.logits(s.similarity.view()).view(), label);
        out.value += loss * scale;
        out.backprop(head, i, s.similarity.view(), &(g * scale));
    }
    Ok(out)
}

/// `L_Cls` = mean source CE + `target_weight` x mean target CE, both against
/// the base model's hard pseudo-labels.
pub fn calibration_loss_with_grad<T: Scalar>(
    source: &[ScoredSample<T>],
    target: &[ScoredSample<T>],
    head: &PrototypicalHead<T>,
    pseudo: &PseudoLabels<T>,
    target_weight: T,
) -> Result<HeadLossGrad<T>> {
    let mut s = domain_ce(source, Domain::Source, head, pseudo, T::one())?;
    let t = domain_ce(target, Domain::Target, head, pseudo, target_weight)?;
    s.value += t.value;
    s.weights += &t.weights;
    s.scores.extend(t.scores);
    Ok(s)
}

pub fn calibration_loss<T: Scalar>(
    source: &[ScoredSample<T>],
    target: &[ScoredSample<T>],
    head: &PrototypicalHead<T>,
    pseudo: &PseudoLabels<T>,
) -> Result<T> {
    calibration_loss_with_grad(source, target, head, pseudo, T::one()).map(|g| g.value)
}

/// `||a - b||_1` between two probability vectors.
pub fn l1_distance<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    a.iter().zip(b.iter()).fold(T::zero(), |acc, (&x, &y)| acc + (x - y).abs())
}

/// `L_Fid`: mean over target samples of `||softmax(h_p) - softmax(h_f)||_1`.
pub fn fidelity_loss_with_grad<T: Scalar>(
    target: &[ScoredSample<T>],
    head: &PrototypicalHead<T>,
    pseudo: &PseudoLabels<T>,
) -> Result<HeadLossGrad<T>> {
    let refs: Vec<&ScoredSample<T>> = target.iter().collect();
    let mut out = HeadLossGrad::zeros(head, &refs);
    if target.is_empty() {
        return Ok(out);
    }
    let scale = T::one() / T::lit(target.len() as f64);
    for (i, s) in target.iter().enumerate() {
        if s.domain != Domain::Target {
            return Err(Error::DomainError(format!(
                "fidelity is defined on target samples only; got source sample {}",
                s.index
            )));
        }
        check_width(head, s)?;
        let reference = &pseudo.get(Domain::Target, s.index)?.probs;
        let p = head.probabilities(s.similarity.view());
        out.value += l1_distance(p.view(), reference.view()) * scale;
        let sign = Array1::from_shape_fn(p.len(), |k| {
            let d = p[k] - reference[k];
            if d > T::zero() {
                scale
            } else if d < T::zero() {
                -scale
            } else {
                T::zero()
            }
        });
        let d_logits = softmax_backward(p.view(), sign.view());
        out.backprop(head, i, s.similarity.view(), &d_logits);
    }
    Ok(out)
}

pub fn fidelity_loss<T: Scalar>(target: &[ScoredSample<T>], head: &PrototypicalHead<T>, pseudo: &PseudoLabels<T>) -> Result<T> {
    fidelity_loss_with_grad(target, head, pseudo).map(|g| g.value)
}
