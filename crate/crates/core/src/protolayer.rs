//! Prototype bank, patch distances, log-similarity activation, clustering /
//! separation losses and projection of prototypes onto source patches.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_model::FeatureVolume;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default stabilizer of the similarity activation.
pub const SIMILARITY_EPS: f64 = 1e-4;

/// Where a prototype was last projected to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample_index: usize,
    pub sample_id: String,
    pub row: usize,
    pub col: usize,
    /// Squared distance between the prototype and this patch just before the push.
    pub distance: f64,
}

/// `c * K` prototypes of shape `1 x 1 x D`, `K` per category, ordered by class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank<T> {
    vectors: Array2<T>,
    assignment: Vec<usize>,
    n_classes: usize,
    provenance: Vec<Option<Provenance>>,
}

impl<T: Scalar> PrototypeBank<T> {
    /// Uniform `[0, 1)` initialization; prototype `j` belongs to class `j / K`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_classes: usize, per_class: usize, dim: usize) -> Result<Self> {
        if per_class == 0 || n_classes == 0 {
            return Err(Error::AssignmentError("need at least one class and one prototype per class".into()));
        }
        let p = n_classes * per_class;
        let vectors = Array2::from_shape_simple_fn((p, dim), || T::lit(rng.random::<f64>()));
        let assignment = (0..p).map(|j| j / per_class).collect();
        Self::from_parts(vectors, assignment, n_classes)
    }

    /// Checks that every class owns the same, non-zero number of prototypes.
    pub fn from_parts(vectors: Array2<T>, assignment: Vec<usize>, n_classes: usize) -> Result<Self> {
        if assignment.len() != vectors.nrows() {
            return Err(Error::ShapeError(format!(
                "{} assignments for {} prototypes",
                assignment.len(),
                vectors.nrows()
            )));
        }
        let mut counts = vec![0usize; n_classes];
        for &k in &assignment {
            *counts
                .get_mut(k)
                .ok_or_else(|| Error::AssignmentError(format!("class {k} out of range (c = {n_classes})")))? += 1;
        }
        if let Some(k) = counts.iter().position(|&n| n == 0) {
            return Err(Error::AssignmentError(format!("class {k} has no prototypes")));
        }
        if counts.iter().any(|&n| n != counts[0]) {
            return Err(Error::AssignmentError(format!("unequal prototype counts per class: {counts:?}")));
        }
        let provenance = vec![None; assignment.len()];
        Ok(Self {
            vectors,
            assignment,
            n_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn per_class(&self) -> usize {
        self.len() / self.n_classes
    }

    pub fn vectors(&self) -> &Array2<T> {
        &self.vectors
    }

    /// Mutable prototype storage; shape and assignment cannot change.
    pub fn vectors_mut(&mut self) -> &mut [T] {
        self.vectors.as_slice_mut().expect("standard layout")
    }

    pub fn vector(&self, j: usize) -> ArrayView1<'_, T> {
        self.vectors.row(j)
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn class_of(&self, j: usize) -> usize {
        self.assignment[j]
    }

    pub fn prototypes_of(&self, class: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment.iter().enumerate().filter(move |(_, &k)| k == class).map(|(j, _)| j)
    }

    pub fn provenance(&self) -> &[Option<Provenance>] {
        &self.provenance
    }

    pub fn set_provenance(&mut self, provenance: Vec<Option<Provenance>>) -> Result<()> {
        if provenance.len() != self.len() {
            return Err(Error::ShapeError("provenance length differs from bank size".into()));
        }
        self.provenance = provenance;
        Ok(())
    }
}

/// Per-prototype minimum squared distance and the flat patch index attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap<T> {
    pub distances: Array1<T>,
    pub argmin: Vec<usize>,
}

fn squared_distance<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    a.iter().zip(b.iter()).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

/// Minimum distances for a `(H*W) x D` patch matrix. Ties go to the lowest patch index.
pub fn patch_min_distances<T: Scalar>(patches: ArrayView2<'_, T>, bank: &PrototypeBank<T>) -> Result<DistanceMap<T>> {
    if patches.ncols() != bank.dim() {
        return Err(Error::ShapeError(format!(
            "feature depth {} differs from prototype depth {}",
            patches.ncols(),
            bank.dim()
        )));
    }
    if patches.nrows() == 0 {
        return Err(Error::ShapeError("feature volume has no patches".into()));
    }
    let mut distances = Array1::zeros(bank.len());
    let mut argmin = vec![0; bank.len()];
    for (j, p) in bank.vectors.axis_iter(Axis(0)).enumerate() {
        let mut best = T::infinity();
        for (i, z) in patches.axis_iter(Axis(0)).enumerate() {
            let d = squared_distance(z, p);
            if d < best {
                best = d;
                argmin[j] = i;
            }
        }
        distances[j] = best;
    }
    Ok(DistanceMap { distances, argmin })
}

pub fn min_distances<T: Scalar>(volume: &FeatureVolume<T>, bank: &PrototypeBank<T>) -> Result<DistanceMap<T>> {
    patch_min_distances(volume.patches(), bank)
}

/// `ln((d + 1) / (d + eps))`.
pub fn similarity_with_eps<T: Scalar>(dist2: T, eps: T) -> Result<T> {
    if dist2 < T::zero() || dist2.is_nan() {
        return Err(Error::DomainError(format!("squared distance must be non-negative, got {dist2}")));
    }
    Ok(((dist2 + T::one()) / (dist2 + eps)).ln())
}

pub fn similarity<T: Scalar>(dist2: T) -> Result<T> {
    similarity_with_eps(dist2, T::lit(SIMILARITY_EPS))
}

/// Derivative of the similarity with respect to the squared distance.
pub fn similarity_derivative<T: Scalar>(dist2: T, eps: T) -> T {
    T::one() / (dist2 + T::one()) - T::one() / (dist2 + eps)
}

/// Similarity vector `g(f(x))` together with the distances it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityScores<T> {
    pub similarity: Array1<T>,
    pub distances: DistanceMap<T>,
}

pub fn similarity_scores<T: Scalar>(patches: ArrayView2<'_, T>, bank: &PrototypeBank<T>, eps: T) -> Result<SimilarityScores<T>> {
    let distances = patch_min_distances(patches, bank)?;
    let similarity = distances
        .distances
        .iter()
        .map(|&d| similarity_with_eps(d, eps))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityScores {
        similarity: Array1::from(similarity),
        distances,
    })
}

/// Winning prototype of one sample's clustering term: nearest own-class prototype.
pub fn cluster_term<T: Scalar>(dm: &DistanceMap<T>, label: usize, bank: &PrototypeBank<T>) -> Result<(T, usize)> {
    nearest_where(dm, bank, |k| k == label).ok_or(Error::AssignmentError(format!("class {label} has no prototypes")))
}

/// Winning prototype of one sample's separation term: nearest wrong-class prototype.
pub fn separation_term<T: Scalar>(dm: &DistanceMap<T>, label: usize, bank: &PrototypeBank<T>) -> Result<(T, usize)> {
    if bank.n_classes() < 2 {
        return Err(Error::AssignmentError("separation needs at least two classes".into()));
    }
    nearest_where(dm, bank, |k| k != label).ok_or(Error::AssignmentError("no wrong-class prototypes".into()))
}

fn nearest_where<T: Scalar>(dm: &DistanceMap<T>, bank: &PrototypeBank<T>, keep: impl Fn(usize) -> bool) -> Option<(T, usize)> {
    let mut best: Option<(T, usize)> = None;
    for (j, &k) in bank.assignment.iter().enumerate() {
        if keep(k) && best.is_none_or(|(d, _)| dm.distances[j] < d) {
            best = Some((dm.distances[j], j));
        }
    }
    best
}

/// Adds `coeff * d/dθ ||z_i - p_j||^2` into the prototype and patch gradients.
pub fn accumulate_distance_grad<T: Scalar>(
    patches: ArrayView2<'_, T>,
    bank: &PrototypeBank<T>,
    j: usize,
    patch: usize,
    coeff: T,
    grad_prototypes: Option<&mut Array2<T>>,
    grad_patches: Option<&mut Array2<T>>,
) {
    let two = coeff + coeff;
    let z = patches.row(patch);
    let p = bank.vector(j);
    if let Some(gp) = grad_prototypes {
        gp.row_mut(j).zip_mut_with(&(&p - &z), |g, &d| *g += two * d);
    }
    if let Some(gz) = grad_patches {
        gz.row_mut(patch).zip_mut_with(&(&z - &p), |g, &d| *g += two * d);
    }
}

/// Chains a gradient on the similarity vector back through the min-distances
/// into prototypes and patches. Only the arg-min patch of each prototype receives gradient.
pub fn backprop_similarity<T: Scalar>(
    patches: ArrayView2<'_, T>,
    bank: &PrototypeBank<T>,
    scores: &SimilarityScores<T>,
    d_similarity: ArrayView1<'_, T>,
    eps: T,
    grad_prototypes: &mut Array2<T>,
    grad_patches: &mut Array2<T>,
) {
    for (j, &g) in d_similarity.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        let coeff = g * similarity_derivative(scores.distances.distances[j], eps);
        let patch = scores.distances.argmin[j];
        accumulate_distance_grad(patches, bank, j, patch, coeff, Some(&mut *grad_prototypes), Some(&mut *grad_patches));
    }
}

/// Per-prototype `H x W` map of `similarity(||z_hw - p_j||^2)`, shape `(P, H, W)`.
pub fn similarity_maps<T: Scalar>(volume: &FeatureVolume<T>, bank: &PrototypeBank<T>, eps: T) -> Result<ndarray::Array3<T>> {
    if volume.depth() != bank.dim() {
        return Err(Error::ShapeError(format!(
            "feature depth {} differs from prototype depth {}",
            volume.depth(),
            bank.dim()
        )));
    }
    let (h, w) = (volume.height(), volume.width());
    let mut out = ndarray::Array3::zeros((bank.len(), h, w));
    for j in 0..bank.len() {
        for r in 0..h {
            for c in 0..w {
                out[[j, r, c]] = similarity_with_eps(squared_distance(volume.patch(r, c), bank.vector(j)), eps)?;
            }
        }
    }
    Ok(out)
}

/// Loss value with gradients for prototypes and for each `(H*W) x D` patch matrix.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub value: T,
    pub prototypes: Array2<T>,
    pub volumes: Vec<Array2<T>>,
}

fn check_batch<T: Scalar>(volumes: &[FeatureVolume<T>], labels: &[usize], bank: &PrototypeBank<T>) -> Result<()> {
    if volumes.len() != labels.len() {
        return Err(Error::ShapeError(format!("{} volumes but {} labels", volumes.len(), labels.len())));
    }
    if volumes.is_empty() {
        return Err(Error::ShapeError("empty batch".into()));
    }
    if let Some(&k) = labels.iter().find(|&&k| k >= bank.n_classes()) {
        return Err(Error::AssignmentError(format!("label {k} out of range")));
    }
    Ok(())
}

fn term_loss<T: Scalar>(
    volumes: &[FeatureVolume<T>],
    labels: &[usize],
    bank: &PrototypeBank<T>,
    sign: T,
    term: fn(&DistanceMap<T>, usize, &PrototypeBank<T>) -> Result<(T, usize)>,
) -> Result<LossGrad<T>> {
    check_batch(volumes, labels, bank)?;
    let n = T::lit(volumes.len() as f64);
    let coeff = sign / n;
    let mut value = T::zero();
    let mut gp = Array2::zeros(bank.vectors.raw_dim());
    let mut gv = Vec::with_capacity(volumes.len());
    for (v, &y) in volumes.iter().zip(labels) {
        let patches = v.patches();
        let dm = patch_min_distances(patches, bank)?;
        let (d, j) = term(&dm, y, bank)?;
        value += d;
        let mut gz = Array2::zeros(patches.raw_dim());
        accumulate_distance_grad(patches, bank, j, dm.argmin[j], coeff, Some(&mut gp), Some(&mut gz));
        gv.push(gz);
    }
    Ok(LossGrad {
        value: sign * value / n,
        prototypes: gp,
        volumes: gv,
    })
}

/// `L_c`: mean over source samples of the distance to the nearest own-class prototype.
pub fn cluster_loss_with_grad<T: Scalar>(volumes: &[FeatureVolume<T>], labels: &[usize], bank: &PrototypeBank<T>) -> Result<LossGrad<T>> {
    term_loss(volumes, labels, bank, T::one(), cluster_term)
}

/// `L_s`: negated mean over source samples of the distance to the nearest wrong-class prototype.
pub fn separation_loss_with_grad<T: Scalar>(volumes: &[FeatureVolume<T>], labels: &[usize], bank: &PrototypeBank<T>) -> Result<LossGrad<T>> {
    term_loss(volumes, labels, bank, -T::one(), separation_term)
}

pub fn cluster_loss<T: Scalar>(volumes: &[FeatureVolume<T>], labels: &[usize], bank: &PrototypeBank<T>) -> Result<T> {
    cluster_loss_with_grad(volumes, labels, bank).map(|g| g.value)
}

pub fn separation_loss<T: Scalar>(volumes: &[FeatureVolume<T>], labels: &[usize], bank: &PrototypeBank<T>) -> Result<T> {
    separation_loss_with_grad(volumes, labels, bank).map(|g| g.value)
}

/// A source sample offered to projection.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionSource<'a, T> {
    pub index: usize,
    pub id: &'a str,
    pub label: usize,
    pub volume: &'a FeatureVolume<T>,
}

/// Per-prototype Euclidean distance moved by a projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub movement: Vec<f64>,
}

impl ProjectionReport {
    pub fn total_movement(&self) -> f64 {
        self.movement.iter().sum()
    }
}

/// Replaces each prototype by the nearest patch among source samples of its
/// class. Candidates are visited in the given order, patches row-major; the
/// first strict minimum wins.
pub fn project_prototypes<T: Scalar>(bank: &mut PrototypeBank<T>, sources: &[ProjectionSource<'_, T>]) -> Result<ProjectionReport> {
    for k in 0..bank.n_classes() {
        if !sources.iter().any(|s| s.label == k) {
            return Err(Error::EmptyClassError(k));
        }
    }
    if let Some(s) = sources.iter().find(|s| s.volume.depth() != bank.dim()) {
        return Err(Error::ShapeError(format!("sample {} has depth {}, bank {}", s.id, s.volume.depth(), bank.dim())));
    }
    let frozen = &*bank;
    let found: Vec<(T, usize, usize)> = (0..frozen.len())
        .into_par_iter()
        .map(|j| {
            let p = frozen.vector(j);
            let class = frozen.class_of(j);
            let mut best = (T::infinity(), usize::MAX, 0);
            for (si, s) in sources.iter().enumerate().filter(|(_, s)| s.label == class) {
                for (i, z) in s.volume.patches().axis_iter(Axis(0)).enumerate() {
                    let d = squared_distance(z, p);
                    if d < best.0 {
                        best = (d, si, i);
                    }
                }
            }
            best
        })
        .collect();
    let mut movement = Vec::with_capacity(found.len());
    for (j, (d, si, i)) in found.into_iter().enumerate() {
        let s = &sources[si];
        let w = s.volume.width();
        bank.vectors.row_mut(j).assign(&s.volume.patches().row(i));
        bank.provenance[j] = Some(Provenance {
            sample_index: s.index,
            sample_id: s.id.to_string(),
            row: i / w,
            col: i % w,
            distance: d.as_f64(),
        });
        movement.push(d.as_f64().sqrt());
    }
    Ok(ProjectionReport { movement })
}
