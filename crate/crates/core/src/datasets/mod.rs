//! Two-domain image datasets: labeled source, unlabeled target.
//!
//! Pixels are stored as raw RGB bytes; [`Normalization`] maps them to the
//! network input range on access. Target ground truth, when known, is kept
//! behind [`ImageSample::eval_label`] and never returned by
//! [`ImageSample::label`].

mod batching;
mod loader;
mod synthetic;

pub use batching::{batches, BatchConfig, BatchItem, BatchStream, MixedBatch};
pub use loader::{load_directory_pair, IMAGE_EXTENSIONS};
pub use synthetic::{generate_synthetic_pair, ShapeFamily, SyntheticSpec, TargetShift};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Side length of real images after resizing.
pub const REAL_IMAGE_SIDE: usize = 224;
/// Side length of generated images.
pub const SYNTHETIC_IMAGE_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-channel `(value / 255 - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    /// ImageNet statistics.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `S x S x 3` RGB bytes.
    pub pixels: Array3<u8>,
    pub domain: Domain,
    label: Option<usize>,
    /// Foreground mask, `S x S`; only generated data carries one.
    pub mask: Option<Array2<bool>>,
}

impl ImageSample {
    pub fn new(id: String, pixels: Array3<u8>, domain: Domain, label: Option<usize>, mask: Option<Array2<bool>>) -> Self {
        Self {
            id,
            pixels,
            domain,
            label,
            mask,
        }
    }

    /// Training label: present for source samples, always `None` for target samples.
    pub fn label(&self) -> Option<usize> {
        match self.domain {
            Domain::Source => self.label,
            Domain::Target => None,
        }
    }

    /// Ground truth for evaluation only; may expose held-out target labels.
    pub fn eval_label(&self) -> Option<usize> {
        self.label
    }

    pub fn side(&self) -> usize {
        self.pixels.dim().0
    }

    /// Horizontal mirror of the pixel grid.
    pub fn mirrored_pixels(&self) -> Array3<u8> {
        let mut out = self.pixels.clone();
        out.invert_axis(ndarray::Axis(1));
        out.as_standard_layout().into_owned()
    }

    /// Normalized `3 x S x S` network input, optionally mirrored.
    pub fn tensor<T: Scalar>(&self, norm: &Normalization, flip: bool) -> Array3<T> {
        let (h, w, _) = self.pixels.dim();
        let mut out = Array3::<T>::zeros((3, h, w));
        for c in 0..3 {
            let scale = 1.0 / (255.0 * norm.std[c]);
            let offset = norm.mean[c] / norm.std[c];
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x };
                    let v = self.pixels[[y, sx, c]] as f64 * scale - offset;
                    out[[c, y, x]] = T::lit(v);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source: Vec<ImageSample>,
    pub target: Vec<ImageSample>,
    pub categories: Vec<String>,
}

impl DomainPair {
    /// Builds a pair and checks the closed-set invariants.
    pub fn new(source: Vec<ImageSample>, target: Vec<ImageSample>, categories: Vec<String>) -> Result<Self> {
        let pair = Self {
            source,
            target,
            categories,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.categories.len();
        if c == 0 {
            return Err(Error::InvalidDataset("no categories".into()));
        }
        if self.source.is_empty() {
            return Err(Error::EmptyDomain("source"));
        }
        if self.target.is_empty() {
            return Err(Error::EmptyDomain("target"));
        }
        let mut seen = vec![false; c];
        for s in &self.source {
            if s.domain != Domain::Source {
                return Err(Error::InvalidDataset(format!("{} is not a source sample", s.id)));
            }
            match s.label() {
                Some(l) if l < c => seen[l] = true,
                Some(l) => return Err(Error::InvalidDataset(format!("{}: label {l} >= {c}", s.id))),
                None => return Err(Error::InvalidDataset(format!("source sample {} has no label", s.id))),
            }
        }
        for t in &self.target {
            if t.domain != Domain::Target {
                return Err(Error::InvalidDataset(format!("{} is not a target sample", t.id)));
            }
            if let Some(l) = t.eval_label() {
                if l >= c {
                    return Err(Error::InvalidDataset(format!("{}: label {l} >= {c}", t.id)));
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidDataset(format!("category {} has no source sample", self.categories[k])));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn domain(&self, d: Domain) -> &[ImageSample] {
        match d {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    /// Source labels in sample order.
    pub fn source_labels(&self) -> Vec<usize> {
        self.source.iter().map(|s| s.label().expect("validated source label")).collect()
    }

    /// Held-out labels of a domain, if every sample has one.
    pub fn eval_labels(&self, d: Domain) -> Option<Vec<usize>> {
        self.domain(d).iter().map(|s| s.eval_label()).collect()
    }

    /// Source sample indices grouped by category.
    pub fn source_indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes()];
        for (i, s) in self.source.iter().enumerate() {
            out[s.label().unwrap()].push(i);
        }
        out
    }

    /// Image side length (all samples share one).
    pub fn image_side(&self) -> usize {
        self.source[0].side()
    }
}
