//! Base domain-adaptation model: feature extractor `f` (backbone + add-on
//! block), feature classifier `h_f` and an adversarial domain discriminator
//! trained through a gradient-reversal layer.
//!
//! Once trained the model is frozen; the explainer only reads its feature
//! volumes, pseudo-labels and softmax outputs.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Archive, ArchiveWriter, ContentHasher};
use crate::datasets::{BatchConfig, BatchStream, Domain, DomainPair, ImageSample, Normalization};
use crate::error::{Error, Result};
use crate::nn::functional::{argmax, cross_entropy_with_grad, sigmoid, softmax, softplus};
use crate::nn::{
    accumulate, Adam, AddOn, BasicBlock, ChannelAffine, Conv2d, GradientReversal, Layer, Linear, MaxPool2d,
    Parameterized, Relu, Sequential, Tape,
};
use crate::rng::stream;
use crate::scalar::Scalar;

pub const BASE_CHECKPOINT_KIND: &str = "base-model";

/// `H x W x D` activation grid of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume<T> {
    grid: Array3<T>,
}

impl<T: Scalar> FeatureVolume<T> {
    pub fn new(grid: Array3<T>) -> Result<Self> {
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::BackboneShapeError("feature volume has non-finite entries".into()));
        }
        Ok(Self {
            grid: grid.as_standard_layout().into_owned(),
        })
    }

    /// Builds a volume from a `(H*W) x D` patch matrix in row-major spatial order.
    pub fn from_patches(height: usize, width: usize, patches: Array2<T>) -> Result<Self> {
        let d = patches.ncols();
        if patches.nrows() != height * width {
            return Err(Error::ShapeError(format!(
                "{} patches do not fill a {height}x{width} grid",
                patches.nrows()
            )));
        }
        let grid = patches
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((height, width, d))
            .unwrap();
        Self::new(grid)
    }

    pub fn height(&self) -> usize {
        self.grid.dim().0
    }

    pub fn width(&self) -> usize {
        self.grid.dim().1
    }

    pub fn depth(&self) -> usize {
        self.grid.dim().2
    }

    pub fn grid(&self) -> &Array3<T> {
        &self.grid
    }

    /// `(H*W) x D` view; row `r * W + c` is the latent patch at `(r, c)`.
    pub fn patches(&self) -> ArrayView2<'_, T> {
        let (h, w, d) = self.grid.dim();
        self.grid.view().into_shape_with_order((h * w, d)).unwrap()
    }

    pub fn patch(&self, row: usize, col: usize) -> ndarray::ArrayView1<'_, T> {
        self.grid.slice(ndarray::s![row, col, ..])
    }

    /// Spatial mean, shape `D`.
    pub fn pooled(&self) -> Array1<T> {
        self.patches().mean_axis(Axis(0)).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Four 3x3 conv blocks (16, 32, 64, 64 channels), three 2x2 max-pools: 32x32 -> 4x4x64.
    SmallCnn,
    /// ResNet-34 topology (basic blocks 3-4-6-3, per-channel affine in place of batch norm): 224x224 -> 7x7x512.
    Resnet34,
}

impl BackboneKind {
    pub fn out_channels(self) -> usize {
        match self {
            BackboneKind::SmallCnn => 64,
            BackboneKind::Resnet34 => 512,
        }
    }

    pub fn build<T: Scalar, R: rand::Rng + ?Sized>(self, rng: &mut R) -> Sequential<T> {
        let mut net = Sequential::new();
        match self {
            BackboneKind::SmallCnn => {
                let chans = [3, 16, 32, 64, 64];
                for i in 0..4 {
                    net.push(Conv2d::new(rng, chans[i], chans[i + 1], 3, 1, 1));
                    net.push(Relu);
                    if i < 3 {
                        net.push(MaxPool2d::new(2, 2, 0));
                    }
                }
            }
            BackboneKind::Resnet34 => {
                net.push(Conv2d::new(rng, 3, 64, 7, 2, 3))
                    .push(ChannelAffine::new(64))
                    .push(Relu)
                    .push(MaxPool2d::new(3, 2, 1));
                let stages = [(64, 3), (128, 4), (256, 6), (512, 3)];
                let mut in_ch = 64;
                for (si, &(ch, blocks)) in stages.iter().enumerate() {
                    for b in 0..blocks {
                        let stride = if b == 0 && si > 0 { 2 } else { 1 };
                        net.push(BasicBlock::new(rng, in_ch, ch, stride));
                        in_ch = ch;
                    }
                }
            }
        }
        net
    }
}

/// Network shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub backbone: BackboneKind,
    pub image_side: usize,
    pub addon_hidden: usize,
    pub feature_dim: usize,
    pub discriminator_hidden: usize,
}

impl ArchConfig {
    /// Small CNN for 32x32 images, 4x4x32 features.
    pub fn synthetic() -> Self {
        Self {
            backbone: BackboneKind::SmallCnn,
            image_side: 32,
            addon_hidden: 32,
            feature_dim: 32,
            discriminator_hidden: 64,
        }
    }

    /// ResNet-34 topology for 224x224 images, add-on 512 -> 256 -> 128, 7x7x128 features.
    pub fn resnet34() -> Self {
        Self {
            backbone: BackboneKind::Resnet34,
            image_side: 224,
            addon_hidden: 256,
            feature_dim: 128,
            discriminator_hidden: 1024,
        }
    }

    /// `(H, W)` of the feature volume.
    pub fn feature_grid(&self) -> (usize, usize) {
        match self.backbone {
            BackboneKind::SmallCnn => {
                let s = self.image_side / 8;
                (s, s)
            }
            BackboneKind::Resnet34 => resnet_grid(self.image_side),
        }
    }
}

fn resnet_grid(side: usize) -> (usize, usize) {
    let conv = |s: usize, k: usize, st: usize, p: usize| (s + 2 * p - k) / st + 1;
    let mut s = conv(side, 7, 2, 3);
    s = conv(s, 3, 2, 1);
    for _ in 0..3 {
        s = conv(s, 3, 2, 1);
    }
    (s, s)
}

/// Base training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub flip: bool,
    pub batch_mix: f64,
    /// Ceiling of the gradient-reversal coefficient.
    pub reversal_max: f64,
    /// Steepness of the reversal ramp `2 / (1 + exp(-gamma * p)) - 1`.
    pub reversal_gamma: f64,
    /// Weight of the domain-confusion loss.
    pub domain_weight: f64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            flip: true,
            batch_mix: 1.0,
            reversal_max: 0.3,
            reversal_gamma: 10.0,
            domain_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseEpochLog {
    pub epoch: usize,
    pub class_loss: f64,
    pub domain_loss: f64,
    pub reversal: f64,
    pub source_accuracy: f64,
    /// Held-out target accuracy; reported only, never used for training.
    pub target_accuracy: Option<f64>,
}

/// Hard label and softmax output of the base classifier for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub label: usize,
    pub probs: Array1<T>,
}

impl<T: Scalar> Prediction<T> {
    pub fn from_logits(logits: &Array1<T>) -> Self {
        let probs = softmax(logits.view());
        Self {
            label: argmax(probs.view()),
            probs,
        }
    }
}

/// Cached base-model outputs for every sample of a domain pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels<T> {
    pub source: Vec<Prediction<T>>,
    pub target: Vec<Prediction<T>>,
}

impl<T: Scalar> PseudoLabels<T> {
    pub fn get(&self, domain: Domain, index: usize) -> Result<&Prediction<T>> {
        let list = match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        };
        list.get(index).ok_or(Error::CacheMiss {
            domain: domain.as_str(),
            index,
        })
    }

    pub fn labels(&self, domain: Domain) -> Vec<usize> {
        let list = match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        };
        list.iter().map(|p| p.label).collect()
    }
}

#[derive(Debug)]
pub struct BaseModel<T: Scalar> {
    arch: ArchConfig,
    backbone: Sequential<T>,
    addon: AddOn<T>,
    classifier: Linear<T>,
    disc_hidden: Linear<T>,
    disc_out: Linear<T>,
    categories: Vec<String>,
    normalization: Normalization,
    frozen: bool,
    history: Vec<BaseEpochLog>,
    train_config: Option<BaseTrainConfig>,
}

struct SampleTape<T> {
    backbone: Tape<T>,
    backbone_hw: (usize, usize),
    addon: crate::nn::addon::AddOnTape<T>,
}

struct SampleOutcome<T> {
    class_loss: f64,
    domain_loss: f64,
    grads: Vec<Vec<T>>,
}

const INIT_TAG: u64 = 0xBA5E;

impl<T: Scalar> BaseModel<T> {
    /// Randomly initialized, unfrozen model.
    pub fn initialize(arch: ArchConfig, categories: Vec<String>, normalization: Normalization, seed: u64) -> Result<Self> {
        if categories.len() < 2 {
            return Err(Error::InvalidDataset(format!(
                "at least 2 categories required, got {}",
                categories.len()
            )));
        }
        let mut rng = stream(&[seed, INIT_TAG]);
        let backbone = arch.backbone.build(&mut rng);
        let addon = AddOn::new(&mut rng, arch.backbone.out_channels(), arch.addon_hidden, arch.feature_dim);
        let classifier = Linear::new(&mut rng, arch.feature_dim, categories.len());
        let disc_hidden = Linear::new(&mut rng, arch.feature_dim, arch.discriminator_hidden);
        let disc_out = Linear::new(&mut rng, arch.discriminator_hidden, 1);
        Ok(Self {
            arch,
            backbone,
            addon,
            classifier,
            disc_hidden,
            disc_out,
            categories,
            normalization,
            frozen: false,
            history: Vec::new(),
            train_config: None,
        })
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn n_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn history(&self) -> &[BaseEpochLog] {
        &self.history
    }

    pub fn train_config(&self) -> Option<&BaseTrainConfig> {
        self.train_config.as_ref()
    }

    /// The add-on block of the extractor (the explainer starts from a copy).
    pub fn addon(&self) -> &AddOn<T> {
        &self.addon
    }

    fn param_groups(&self) -> [&dyn Parameterized<T>; 5] {
        [&self.backbone, &self.addon, &self.classifier, &self.disc_hidden, &self.disc_out]
    }

    const GROUP_NAMES: [&'static str; 5] = ["backbone", "addon", "classifier", "discriminator.hidden", "discriminator.out"];

    fn all_params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.backbone.params_mut();
        v.extend(self.addon.params_mut());
        v.extend(self.classifier.params_mut());
        v.extend(self.disc_hidden.params_mut());
        v.extend(self.disc_out.params_mut());
        v
    }

    fn zero_grads(&self) -> Vec<Vec<T>> {
        self.param_groups().iter().flat_map(|g| g.zero_grads()).collect()
    }

    /// SHA-256 over every parameter tensor.
    pub fn content_hash(&self) -> String {
        let mut h = ContentHasher::new();
        for (name, group) in Self::GROUP_NAMES.iter().zip(self.param_groups()) {
            for (i, (p, shape)) in group.params().iter().zip(group.param_shapes()).enumerate() {
                h.update(&format!("{name}.{i}"), &shape, p);
            }
        }
        h.finish()
    }

    /// Hash over extractor and feature-classifier tensors only.
    pub fn extractor_classifier_hash(&self) -> String {
        let mut h = ContentHasher::new();
        for (name, group) in Self::GROUP_NAMES.iter().zip(self.param_groups()).take(3) {
            for (i, (p, shape)) in group.params().iter().zip(group.param_shapes()).enumerate() {
                h.update(&format!("{name}.{i}"), &shape, p);
            }
        }
        h.finish()
    }

    fn check_input(&self, image: &ImageSample) -> Result<()> {
        if image.side() != self.arch.image_side || image.pixels.dim().1 != self.arch.image_side {
            return Err(Error::BackboneShapeError(format!(
                "image {} is {:?}, model expects {}x{}",
                image.id,
                image.pixels.dim(),
                self.arch.image_side,
                self.arch.image_side
            )));
        }
        Ok(())
    }

    fn require_frozen(&self) -> Result<()> {
        if !self.frozen {
            return Err(Error::InvalidArgument("base model must be frozen before inference".into()));
        }
        Ok(())
    }

    /// Backbone output as a `(H*W) x C` patch matrix plus its grid size.
    pub fn backbone_patches(&self, image: &ImageSample, flip: bool) -> Result<(Array2<T>, (usize, usize))> {
        self.check_input(image)?;
        let x = image.tensor::<T>(&self.normalization, flip);
        Ok(to_patches(&self.backbone.infer(&x)))
    }

    /// `f(x)`: frozen feature volume of one image.
    pub fn extract_features(&self, image: &ImageSample) -> Result<FeatureVolume<T>> {
        self.require_frozen()?;
        self.volume(image, false)
    }

    fn volume(&self, image: &ImageSample, flip: bool) -> Result<FeatureVolume<T>> {
        let (patches, (h, w)) = self.backbone_patches(image, flip)?;
        FeatureVolume::from_patches(h, w, self.addon.infer(patches.view()))
    }

    /// `h_f` logits for a feature volume.
    pub fn classify(&self, volume: &FeatureVolume<T>) -> Array1<T> {
        self.classifier.forward(volume.pooled().view())
    }

    fn logits_for(&self, samples: &[ImageSample]) -> Result<Vec<Array1<T>>> {
        samples
            .par_iter()
            .map(|s| self.volume(s, false).map(|v| self.classify(&v)))
            .collect()
    }

    /// Hard labels and softmax vectors of `h_f` for every sample of both domains.
    pub fn pseudo_label(&self, pair: &DomainPair) -> Result<PseudoLabels<T>> {
        self.require_frozen()?;
        let to_pred = |logits: Vec<Array1<T>>| logits.iter().map(Prediction::from_logits).collect();
        Ok(PseudoLabels {
            source: to_pred(self.logits_for(&pair.source)?),
            target: to_pred(self.logits_for(&pair.target)?),
        })
    }

    fn accuracy(&self, samples: &[ImageSample]) -> Result<Option<f64>> {
        let labels: Option<Vec<usize>> = samples.iter().map(|s| s.eval_label()).collect();
        let Some(labels) = labels else { return Ok(None) };
        let logits = self.logits_for(samples)?;
        let correct = logits
            .iter()
            .zip(&labels)
            .filter(|(l, &y)| argmax(l.view()) == y)
            .count();
        Ok(Some(correct as f64 / labels.len().max(1) as f64))
    }

    fn forward_train(&self, x: &Array3<T>) -> (FeatureVolume<T>, SampleTape<T>) {
        let (out, backbone) = self.backbone.forward(x);
        let (patches, hw) = to_patches(&out);
        let (feat, addon) = self.addon.forward(patches.view());
        let volume = FeatureVolume::from_patches(hw.0, hw.1, feat).unwrap_or_else(|_| FeatureVolume {
            grid: Array3::from_elem((hw.0, hw.1, self.arch.feature_dim), T::nan()),
        });
        (
            volume,
            SampleTape {
                backbone,
                backbone_hw: hw,
                addon,
            },
        )
    }

    /// Loss and gradients of one sample: scaled source cross-entropy plus the
    /// scaled domain-confusion loss with reversed gradient into the extractor.
    fn sample_step(
        &self,
        image: &ImageSample,
        flip: bool,
        class_scale: T,
        domain_scale: T,
        grl: GradientReversal,
    ) -> SampleOutcome<T> {
        let x = image.tensor::<T>(&self.normalization, flip);
        let (volume, tape) = self.forward_train(&x);
        let mut grads = self.zero_grads();
        let counts: Vec<usize> = self.param_groups().iter().map(|g| g.num_param_tensors()).collect();
        let (g_backbone, rest) = grads.split_at_mut(counts[0]);
        let (g_addon, rest) = rest.split_at_mut(counts[1]);
        let (g_cls, rest) = rest.split_at_mut(counts[2]);
        let (g_dh, g_do) = rest.split_at_mut(counts[3]);

        let pooled = volume.pooled();
        let mut d_pooled = Array1::<T>::zeros(pooled.len());
        let mut class_loss = 0.0;
        if let Some(label) = image.label() {
            let logits = self.classifier.forward(pooled.view());
            let (loss, mut g) = cross_entropy_with_grad(logits.view(), label);
            class_loss = loss.as_f64();
            g.mapv_inplace(|v| v * class_scale);
            d_pooled += &self.classifier.backward(pooled.view(), g.view(), g_cls);
        }

        // Discriminator sees the reversed features; it is trained to tell source (1) from target (0).
        let reversed = Array1::from(grl.forward(pooled.as_slice().unwrap()));
        let pre = self.disc_hidden.forward(reversed.view());
        let hidden = pre.mapv(|v| v.max(T::zero()));
        let logit = self.disc_out.forward(hidden.view())[0];
        let y = if image.domain == Domain::Source { T::one() } else { T::zero() };
        let domain_loss = (softplus(logit) - y * logit).as_f64();
        let d_logit = Array1::from_elem(1, (sigmoid(logit) - y) * domain_scale);
        let mut d_hidden = self.disc_out.backward(hidden.view(), d_logit.view(), g_do);
        for (d, &p) in d_hidden.iter_mut().zip(pre.iter()) {
            if p <= T::zero() {
                *d = T::zero();
            }
        }
        let d_reversed = self.disc_hidden.backward(reversed.view(), d_hidden.view(), g_dh);
        d_pooled += &Array1::from(grl.backward(d_reversed.as_slice().unwrap()));

        let hw = volume.height() * volume.width();
        let inv = T::one() / T::lit(hw as f64);
        let d_volume = Array2::from_shape_fn((hw, volume.depth()), |(_, j)| d_pooled[j] * inv);
        let d_patches = self.addon.backward(&tape.addon, d_volume.view(), Some(g_addon));
        let d_backbone = from_patches(&d_patches, tape.backbone_hw);
        self.backbone.backward(&tape.backbone, &d_backbone, g_backbone);
        SampleOutcome {
            class_loss,
            domain_loss,
            grads,
        }
    }

    /// Saves parameters, shapes, categories and configuration.
    pub fn save(&self, path: &Path) -> Result<String> {
        let meta = serde_json::json!({
            "arch": self.arch,
            "categories": self.categories,
            "normalization": self.normalization,
            "frozen": self.frozen,
            "train_config": self.train_config,
            "history": self.history,
        });
        let mut w = ArchiveWriter::new::<T>(BASE_CHECKPOINT_KIND, meta);
        for (name, group) in Self::GROUP_NAMES.iter().zip(self.param_groups()) {
            for (i, (p, shape)) in group.params().iter().zip(group.param_shapes()).enumerate() {
                w.tensor(&format!("{name}.{i}"), &shape, p)?;
            }
        }
        w.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::read(path)?;
        archive.expect_kind(BASE_CHECKPOINT_KIND)?;
        let meta = archive.meta();
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing meta field {k}")));
        let arch: ArchConfig = serde_json::from_value(field("arch")?)?;
        let categories: Vec<String> = serde_json::from_value(field("categories")?)?;
        let normalization: Normalization = serde_json::from_value(field("normalization")?)?;
        let frozen: bool = serde_json::from_value(field("frozen")?)?;
        let mut model = Self::initialize(arch, categories, normalization, 0)?;
        model.train_config = serde_json::from_value(field("train_config")?)?;
        model.history = serde_json::from_value(field("history")?)?;
        let counts: Vec<usize> = model.param_groups().iter().map(|g| g.num_param_tensors()).collect();
        let names: Vec<String> = Self::GROUP_NAMES
            .iter()
            .zip(&counts)
            .flat_map(|(n, &c)| (0..c).map(move |i| format!("{n}.{i}")))
            .collect();
        for (name, dst) in names.iter().zip(model.all_params_mut()) {
            archive.load_into(name, dst)?;
        }
        model.frozen = frozen;
        Ok(model)
    }
}

fn to_patches<T: Scalar>(chw: &Array3<T>) -> (Array2<T>, (usize, usize)) {
    let (c, h, w) = chw.dim();
    let hwc = chw.view().permuted_axes([1, 2, 0]).as_standard_layout().into_owned();
    (hwc.into_shape_with_order((h * w, c)).unwrap(), (h, w))
}

fn from_patches<T: Scalar>(patches: &Array2<T>, (h, w): (usize, usize)) -> Array3<T> {
    let c = patches.ncols();
    let hwc = patches.view().into_shape_with_order((h, w, c)).unwrap();
    hwc.permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
}

/// Trains the base model with source cross-entropy and adversarial domain
/// confusion, then freezes it.
pub fn train_base<T: Scalar>(pair: &DomainPair, arch: ArchConfig, cfg: &BaseTrainConfig) -> Result<BaseModel<T>> {
    pair.validate()?;
    if pair.n_classes() < 2 {
        return Err(Error::InvalidDataset("at least 2 categories required".into()));
    }
    if pair.image_side() != arch.image_side {
        return Err(Error::BackboneShapeError(format!(
            "dataset images are {}px, architecture expects {}px",
            pair.image_side(),
            arch.image_side
        )));
    }
    let mut model = BaseModel::<T>::initialize(arch, pair.categories.clone(), Normalization::default(), cfg.seed)?;
    model.train_config = Some(*cfg);
    let mut sampler = BatchStream::new(
        pair.source.len(),
        pair.target.len(),
        BatchConfig {
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            flip: cfg.flip,
            batch_mix: cfg.batch_mix,
        },
    )?;
    let per_epoch = sampler.batches_per_epoch();
    let total_steps = (cfg.epochs * per_epoch).max(1);
    let mut opt = Adam::<T>::new(cfg.lr);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let (mut cls_sum, mut dom_sum, mut n_src, mut n_all) = (0.0, 0.0, 0usize, 0usize);
        let mut grl = GradientReversal::new(0.0);
        for _ in 0..per_epoch {
            let batch = sampler.next().expect("endless stream");
            grl = GradientReversal::scheduled(step as f64 / total_steps as f64, cfg.reversal_gamma, cfg.reversal_max);
            let ns = batch.source.len();
            let n = ns + batch.target.len();
            let class_scale = T::lit(1.0 / ns as f64);
            let domain_scale = T::lit(cfg.domain_weight / n as f64);
            let items: Vec<(&ImageSample, bool)> = batch
                .source
                .iter()
                .map(|i| (&pair.source[i.index], i.flip))
                .chain(batch.target.iter().map(|i| (&pair.target[i.index], i.flip)))
                .collect();
            let outcomes: Vec<SampleOutcome<T>> = items
                .par_iter()
                .map(|&(s, flip)| model.sample_step(s, flip, class_scale, domain_scale, grl))
                .collect();
            let mut grads = model.zero_grads();
            let (mut cls, mut dom) = (0.0, 0.0);
            for o in &outcomes {
                accumulate(&mut grads, &o.grads);
                cls += o.class_loss;
                dom += o.domain_loss;
            }
            let loss = cls / ns as f64 + cfg.domain_weight * dom / n as f64;
            if !loss.is_finite() || !crate::nn::all_finite(&grads) {
                return Err(Error::TrainingDiverged { step });
            }
            opt.step(model.all_params_mut(), &grads);
            cls_sum += cls;
            dom_sum += dom;
            n_src += ns;
            n_all += n;
            step += 1;
        }
        let source_accuracy = model.accuracy(&pair.source)?.unwrap_or(f64::NAN);
        let target_accuracy = model.accuracy(&pair.target)?;
        let log = BaseEpochLog {
            epoch: epoch + 1,
            class_loss: cls_sum / n_src.max(1) as f64,
            domain_loss: dom_sum / n_all.max(1) as f64,
            reversal: grl.lambda,
            source_accuracy,
            target_accuracy,
        };
        log::info!(
            "base epoch {}: ce {:.4} dom {:.4} lambda {:.3} src acc {:.3} tgt acc {}",
            log.epoch,
            log.class_loss,
            log.domain_loss,
            log.reversal,
            log.source_accuracy,
            log.target_accuracy.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into())
        );
        model.history.push(log);
    }
    Ok(model.freeze())
}

/// One row per base-training epoch.
pub fn write_history_csv(path: &Path, history: &[BaseEpochLog]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic_pair, SyntheticSpec, TargetShift};
    use ndarray::array;

    fn tiny_pair() -> DomainPair {
        generate_synthetic_pair(&SyntheticSpec {
            n_classes: 2,
            per_class: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn synthetic_volume_shape() {
        let pair = tiny_pair();
        let m = BaseModel::<f32>::initialize(ArchConfig::synthetic(), pair.categories.clone(), Normalization::default(), 1)
            .unwrap()
            .freeze();
        let v = m.extract_features(&pair.source[0]).unwrap();
        assert_eq!((v.height(), v.width(), v.depth()), (4, 4, 32));
        assert_eq!(ArchConfig::synthetic().feature_grid(), (4, 4));
        assert_eq!(m.extract_features(&pair.source[0]).unwrap(), v);
    }

    #[test]
    fn resnet_volume_shape() {
        let m = BaseModel::<f32>::initialize(ArchConfig::resnet34(), vec!["a".into(), "b".into()], Normalization::default(), 1)
            .unwrap()
            .freeze();
        let img = ImageSample::new(
            "x".into(),
            Array3::from_shape_fn((224, 224, 3), |(y, x, c)| ((x * 7 + y * 3 + c * 50) % 256) as u8),
            Domain::Source,
            Some(0),
            None,
        );
        let v = m.extract_features(&img).unwrap();
        assert_eq!((v.height(), v.width(), v.depth()), (7, 7, 128));
        assert_eq!(ArchConfig::resnet34().feature_grid(), (7, 7));
    }

    #[test]
    fn blank_image_mirror_gives_same_volume() {
        let pair = tiny_pair();
        let m = BaseModel::<f64>::initialize(ArchConfig::synthetic(), pair.categories.clone(), Normalization::default(), 3)
            .unwrap()
            .freeze();
        let blank = ImageSample::new("b".into(), Array3::from_elem((32, 32, 3), 90), Domain::Target, None, None);
        let a = m.volume(&blank, false).unwrap();
        let b = m.volume(&blank, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_image_size_is_shape_error() {
        let m = BaseModel::<f32>::initialize(ArchConfig::synthetic(), vec!["a".into(), "b".into()], Normalization::default(), 1)
            .unwrap()
            .freeze();
        let img = ImageSample::new("x".into(), Array3::zeros((16, 16, 3)), Domain::Source, Some(0), None);
        assert!(matches!(m.extract_features(&img), Err(Error::BackboneShapeError(_))));
    }

    #[test]
    fn single_class_rejected() {
        assert!(BaseModel::<f32>::initialize(ArchConfig::synthetic(), vec!["a".into()], Normalization::default(), 1).is_err());
    }

    #[test]
    fn prediction_from_logits() {
        let p = Prediction::from_logits(&array![2.0f64, 0.0]);
        assert_eq!(p.label, 0);
        assert!((p.probs[0] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        let u = Prediction::from_logits(&array![0.5f64, 0.5, 0.5]);
        assert_eq!(u.label, 0);
        assert!(u.probs.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn pseudo_label_cache_miss() {
        let p = PseudoLabels::<f64> {
            source: vec![],
            target: vec![],
        };
        assert!(matches!(p.get(Domain::Target, 3), Err(Error::CacheMiss { index: 3, .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_hash_stable() {
        let pair = tiny_pair();
        let m = BaseModel::<f32>::initialize(ArchConfig::synthetic(), pair.categories.clone(), Normalization::default(), 5)
            .unwrap()
            .freeze();
        let dir = tempfile::tempdir().unwrap();
        let h1 = m.save(&dir.path().join("a.ckpt")).unwrap();
        assert_eq!(h1, m.content_hash());
        let loaded = BaseModel::<f32>::load(&dir.path().join("a.ckpt")).unwrap();
        assert!(loaded.is_frozen());
        assert_eq!(loaded.content_hash(), h1);
        assert_eq!(loaded.extractor_classifier_hash(), m.extractor_classifier_hash());
        let h2 = loaded.save(&dir.path().join("b.ckpt")).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(loaded.extract_features(&pair.target[1]).unwrap(), m.extract_features(&pair.target[1]).unwrap());
    }

    #[test]
    fn short_training_run_is_deterministic_and_frozen() {
        let pair = generate_synthetic_pair(&SyntheticSpec {
            n_classes: 3,
            per_class: 6,
            target_shift: TargetShift::none(),
            ..Default::default()
        })
        .unwrap();
        let cfg = BaseTrainConfig {
            epochs: 2,
            batch_size: 6,
            ..Default::default()
        };
        let a = train_base::<f32>(&pair, ArchConfig::synthetic(), &cfg).unwrap();
        let b = train_base::<f32>(&pair, ArchConfig::synthetic(), &cfg).unwrap();
        assert!(a.is_frozen());
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.history().len(), 2);
        assert!(a.history()[1].target_accuracy.is_some());
        let pl = a.pseudo_label(&pair).unwrap();
        for p in pl.source.iter().chain(&pl.target) {
            assert!((p.probs.sum() - 1.0).abs() < 1e-6);
            assert!(p.probs.iter().all(|&v| v >= 0.0));
            assert_eq!(p.label, argmax(p.probs.view()));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base_log.csv");
        write_history_csv(&path, a.history()).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        let back: Vec<BaseEpochLog> = r.deserialize().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(back, a.history());
    }
}
