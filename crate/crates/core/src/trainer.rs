//! Three-stage training of the interpretive model on top of a frozen base:
//! prototype-layer optimization, prototype projection, last-layer optimization.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_model::{BaseModel, FeatureVolume, PseudoLabels};
use crate::calibration::{
    calibration_loss_with_grad, fidelity_loss_with_grad, init_head, l1_distance, PrototypicalHead, ScoredSample,
};
use crate::checkpoint::{Archive, ArchiveWriter};
use crate::datasets::{BatchConfig, BatchStream, Domain, DomainPair, MixedBatch};
use crate::error::{Error, Result};
use crate::nn::addon::AddOnTape;
use crate::nn::functional::{argmax, sigmoid};
use crate::nn::{accumulate, all_finite, Adam, AddOn, Parameterized};
use crate::protolayer::{
    backprop_similarity, cluster_loss_with_grad, project_prototypes, separation_loss_with_grad, similarity_scores,
    ProjectionReport, ProjectionSource, PrototypeBank, SimilarityScores,
};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;

pub const INTERP_CHECKPOINT_KIND: &str = "interpretive-model";

const BANK_TAG: u64 = 0x9B07;
const SEED_TAG: u64 = 0x5EED;
const PROTO_BATCH_TAG: u64 = 0x57A6E1;
const HEAD_BATCH_TAG: u64 = 0x57A6E3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    #[serde(rename = "synthetic")]
    Synthetic,
    #[serde(rename = "office-home")]
    OfficeHome,
    #[serde(rename = "domainnet-126")]
    DomainNet126,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::Synthetic, Profile::OfficeHome, Profile::DomainNet126];

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Synthetic => "synthetic",
            Profile::OfficeHome => "office-home",
            Profile::DomainNet126 => "domainnet-126",
        }
    }

    pub fn fidelity_weight(self) -> f64 {
        match self {
            Profile::OfficeHome => 100.0,
            Profile::DomainNet126 | Profile::Synthetic => 10.0,
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown profile {s:?} (expected synthetic, office-home or domainnet-126)")))
    }
}

/// Interpretive-model training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Clustering weight.
    pub alpha: f64,
    /// Separation weight.
    pub beta: f64,
    /// Fidelity weight.
    pub gamma: f64,
    /// L1 weight on the head during last-layer optimization.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub push_every: usize,
    pub last_layer_iters: usize,
    /// Prototypes per category.
    #[serde(rename = "K")]
    pub prototypes_per_class: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub batch_mix: f64,
    /// Weight of the target cross-entropy term relative to the source term.
    pub target_weight: f64,
    pub train_addon: bool,
    /// Pass the add-on output through a logistic sigmoid before measuring distances.
    pub squash: bool,
    /// Keep prototypes inside the per-channel range of the source latent patches.
    pub prototype_box: bool,
    pub flip: bool,
    pub similarity_eps: f64,
    pub prototype_init: PrototypeInit,
}

/// Starting point of the prototype vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeInit {
    /// Independent uniform draws in `[0, 1)`.
    Uniform,
    /// Latent patches of randomly chosen same-class source images, taken at the
    /// start of the first prototype stage.
    SourcePatches,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Synthetic)
    }
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            alpha: 0.8,
            beta: 10.0,
            gamma: profile.fidelity_weight(),
            lambda: 1e-4,
            lr: 0.003,
            epochs: 100,
            push_every: 10,
            last_layer_iters: 20,
            prototypes_per_class: 10,
            seed: 0,
            batch_size: 32,
            batch_mix: 1.0,
            target_weight: 1.0,
            train_addon: false,
            squash: true,
            prototype_box: true,
            flip: false,
            similarity_eps: crate::protolayer::SIMILARITY_EPS,
            prototype_init: PrototypeInit::SourcePatches,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("target_weight", self.target_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.similarity_eps > 0.0 && self.similarity_eps < 1.0) {
            return bad(format!("similarity_eps must lie in (0, 1), got {}", self.similarity_eps));
        }
        if self.push_every == 0 {
            return bad("push_every must be positive".into());
        }
        if !self.epochs.is_multiple_of(self.push_every) {
            return bad(format!("push_every ({}) must divide epochs ({})", self.push_every, self.epochs));
        }
        if self.prototypes_per_class == 0 {
            return bad("K must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.batch_mix > 0.0) {
            return bad(format!("batch_mix must be positive, got {}", self.batch_mix));
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.epochs / self.push_every
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prototypes,
    Push,
    LastLayer,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub stage: Stage,
    #[serde(rename = "L_Cls")]
    pub l_cls: Option<f64>,
    #[serde(rename = "L_c")]
    pub l_c: Option<f64>,
    #[serde(rename = "L_s")]
    pub l_s: Option<f64>,
    #[serde(rename = "L_Fid")]
    pub l_fid: Option<f64>,
    pub total: Option<f64>,
    pub agreement: f64,
    pub acc_hp: Option<f64>,
    pub acc_hf: Option<f64>,
}

pub fn write_log_csv(path: &Path, records: &[LogRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log_csv(path: &Path) -> Result<Vec<LogRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Loss components of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_cls: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub l_fid: f64,
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.l_cls += o.l_cls;
        self.l_c += o.l_c;
        self.l_s += o.l_s;
        self.l_fid += o.l_fid;
        self.total += o.total;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.l_cls *= s;
        self.l_c *= s;
        self.l_s *= s;
        self.l_fid *= s;
        self.total *= s;
        self
    }
}

/// Evaluation summary on the target domain (plus source accuracies).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Fraction of target samples where `argmax h_p == argmax h_f`.
    pub agreement: f64,
    pub acc_hp: Option<f64>,
    pub acc_hf: Option<f64>,
    pub source_acc_hp: Option<f64>,
    pub source_acc_hf: Option<f64>,
    /// Mean L1 distance between the two softmax outputs on the target domain.
    pub fidelity: f64,
}

/// Frozen backbone outputs (before the add-on block) of every sample.
#[derive(Debug, Clone)]
pub struct FeatureCache<T> {
    grid: (usize, usize),
    source: Vec<Array2<T>>,
    target: Vec<Array2<T>>,
    source_mirrored: Option<Vec<Array2<T>>>,
    target_mirrored: Option<Vec<Array2<T>>>,
}

impl<T: Scalar> FeatureCache<T> {
    pub fn build(base: &BaseModel<T>, pair: &DomainPair, mirrored: bool) -> Result<Self> {
        let run = |d: Domain, flip: bool| -> Result<Vec<(Array2<T>, (usize, usize))>> {
            pair.domain(d).par_iter().map(|s| base.backbone_patches(s, flip)).collect()
        };
        let split = |v: Vec<(Array2<T>, (usize, usize))>| -> (Vec<Array2<T>>, Option<(usize, usize)>) {
            let g = v.first().map(|x| x.1);
            (v.into_iter().map(|x| x.0).collect(), g)
        };
        let (source, g) = split(run(Domain::Source, false)?);
        let (target, _) = split(run(Domain::Target, false)?);
        let grid = g.ok_or(Error::EmptyDomain("source"))?;
        let (source_mirrored, target_mirrored) = if mirrored {
            (Some(split(run(Domain::Source, true)?).0), Some(split(run(Domain::Target, true)?).0))
        } else {
            (None, None)
        };
        Ok(Self {
            grid,
            source,
            target,
            source_mirrored,
            target_mirrored,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn len(&self, domain: Domain) -> usize {
        match domain {
            Domain::Source => self.source.len(),
            Domain::Target => self.target.len(),
        }
    }

    pub fn get(&self, domain: Domain, index: usize, mirrored: bool) -> Result<&Array2<T>> {
        let list = match (domain, mirrored) {
            (Domain::Source, false) => Some(&self.source),
            (Domain::Target, false) => Some(&self.target),
            (Domain::Source, true) => self.source_mirrored.as_ref(),
            (Domain::Target, true) => self.target_mirrored.as_ref(),
        };
        list.and_then(|l| l.get(index)).ok_or(Error::CacheMiss {
            domain: domain.as_str(),
            index,
        })
    }
}

/// Everything the stages read but never modify.
pub struct TrainingContext<'a, T: Scalar> {
    pub pair: &'a DomainPair,
    pub pseudo: PseudoLabels<T>,
    pub cache: FeatureCache<T>,
}

impl<'a, T: Scalar> TrainingContext<'a, T> {
    pub fn prepare(base: &BaseModel<T>, pair: &'a DomainPair, mirrored: bool) -> Result<Self> {
        pair.validate()?;
        if pair.n_classes() != base.n_classes() {
            return Err(Error::InvalidDataset(format!(
                "dataset has {} categories, base model {}",
                pair.n_classes(),
                base.n_classes()
            )));
        }
        Ok(Self {
            pair,
            pseudo: base.pseudo_label(pair)?,
            cache: FeatureCache::build(base, pair, mirrored)?,
        })
    }
}

/// Base model (shared, frozen) plus the explainer's own add-on copy, prototype bank and head.
#[derive(Debug, Clone)]
pub struct InterpretiveModel<T: Scalar> {
    base: Arc<BaseModel<T>>,
    addon: AddOn<T>,
    bank: PrototypeBank<T>,
    head: PrototypicalHead<T>,
    config: TrainConfig,
    log: Vec<LogRecord>,
    pushes: Vec<ProjectionReport>,
    epochs_done: usize,
    head_epochs_done: usize,
    rounds_done: usize,
    warnings: Vec<String>,
    seeded: bool,
}

/// Gradients of the prototype-stage objective.
#[derive(Debug, Clone)]
pub struct PrototypeGrads<T> {
    pub prototypes: Array2<T>,
    pub addon: Vec<Vec<T>>,
}

struct Forward<T> {
    patches: Array2<T>,
    tape: AddOnTape<T>,
    scores: SimilarityScores<T>,
}

impl<T: Scalar> InterpretiveModel<T> {
    /// Random prototypes, head at the `1 / -0.5` pattern, add-on copied from the base.
    pub fn new(base: Arc<BaseModel<T>>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if !base.is_frozen() {
            return Err(Error::InvalidArgument("base model must be frozen".into()));
        }
        let addon = base.addon().clone();
        let dim = addon.dims().2;
        let mut rng = stream(&[config.seed, BANK_TAG]);
        let bank = PrototypeBank::random(&mut rng, base.n_classes(), config.prototypes_per_class, dim)?;
        let head = init_head(&bank);
        Ok(Self {
            base,
            addon,
            bank,
            head,
            config,
            log: Vec::new(),
            pushes: Vec::new(),
            epochs_done: 0,
            head_epochs_done: 0,
            rounds_done: 0,
            warnings: Vec::new(),
            seeded: false,
        })
    }

    pub fn base(&self) -> &Arc<BaseModel<T>> {
        &self.base
    }

    pub fn addon(&self) -> &AddOn<T> {
        &self.addon
    }

    pub fn bank(&self) -> &PrototypeBank<T> {
        &self.bank
    }

    pub fn head(&self) -> &PrototypicalHead<T> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut PrototypicalHead<T> {
        &mut self.head
    }

    pub fn bank_mut(&mut self) -> &mut PrototypeBank<T> {
        &mut self.bank
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn pushes(&self) -> &[ProjectionReport] {
        &self.pushes
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn rounds_done(&self) -> usize {
        self.rounds_done
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn eps(&self) -> T {
        T::lit(self.config.similarity_eps)
    }

    /// Explainer-side latent patches for a `(H*W) x C` backbone output.
    pub fn latent(&self, backbone: &Array2<T>) -> Array2<T> {
        let mut z = self.addon.infer(backbone.view());
        if self.config.squash {
            z.mapv_inplace(sigmoid);
        }
        z
    }

    /// Latent volume `f(x)` as seen by the explainer (its own add-on copy).
    pub fn volume_from_backbone(&self, backbone: &Array2<T>, grid: (usize, usize)) -> Result<FeatureVolume<T>> {
        FeatureVolume::from_patches(grid.0, grid.1, self.latent(backbone))
    }

    pub fn volume(&self, image: &crate::datasets::ImageSample) -> Result<FeatureVolume<T>> {
        let (bb, grid) = self.base.backbone_patches(image, false)?;
        self.volume_from_backbone(&bb, grid)
    }

    pub fn scores(&self, volume: &FeatureVolume<T>) -> Result<SimilarityScores<T>> {
        similarity_scores(volume.patches(), &self.bank, self.eps())
    }

    /// Similarity scores of every (unmirrored) sample of a domain.
    pub fn domain_scores(&self, ctx: &TrainingContext<'_, T>, domain: Domain) -> Result<Vec<SimilarityScores<T>>> {
        (0..ctx.cache.len(domain))
            .into_par_iter()
            .map(|i| {
                let v = self.latent(ctx.cache.get(domain, i, false)?);
                similarity_scores(v.view(), &self.bank, self.eps())
            })
            .collect()
    }

    fn forward(&self, ctx: &TrainingContext<'_, T>, domain: Domain, index: usize, mirrored: bool) -> Result<Forward<T>> {
        let input = ctx.cache.get(domain, index, mirrored)?;
        let (mut patches, tape) = self.addon.forward(input.view());
        if self.config.squash {
            patches.mapv_inplace(sigmoid);
        }
        let scores = similarity_scores(patches.view(), &self.bank, self.eps())?;
        Ok(Forward { patches, tape, scores })
    }

    /// `L_Cls + alpha L_c + beta L_s + gamma L_Fid` on one batch, with gradients
    /// for prototypes and (if trainable) the add-on block.
    pub fn prototype_objective(&self, ctx: &TrainingContext<'_, T>, batch: &MixedBatch) -> Result<(LossParts, PrototypeGrads<T>)> {
        let cfg = &self.config;
        let items: Vec<(Domain, usize, bool)> = batch
            .source
            .iter()
            .map(|b| (Domain::Source, b.index, b.flip))
            .chain(batch.target.iter().map(|b| (Domain::Target, b.index, b.flip)))
            .collect();
        let fw: Vec<Forward<T>> = items
            .par_iter()
            .map(|&(d, i, m)| self.forward(ctx, d, i, m))
            .collect::<Result<_>>()?;
        let ns = batch.source.len();
        let scored: Vec<ScoredSample<T>> = items
            .iter()
            .zip(&fw)
            .map(|(&(domain, index, _), f)| ScoredSample {
                index,
                domain,
                similarity: f.scores.similarity.clone(),
            })
            .collect();
        let (src, tgt) = scored.split_at(ns);
        let cal = calibration_loss_with_grad(src, tgt, &self.head, &ctx.pseudo, T::lit(cfg.target_weight))?;
        let fid = fidelity_loss_with_grad(tgt, &self.head, &ctx.pseudo)?;

        let (gh, gw) = ctx.cache.grid();
        let src_volumes: Vec<FeatureVolume<T>> = fw[..ns]
            .iter()
            .map(|f| FeatureVolume::from_patches(gh, gw, f.patches.clone()))
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = batch
            .source
            .iter()
            .map(|b| ctx.pair.source[b.index].label().expect("source samples are labeled"))
            .collect();
        let (alpha, beta, gamma) = (T::lit(cfg.alpha), T::lit(cfg.beta), T::lit(cfg.gamma));
        let (clu, sep) = if ns > 0 {
            (
                Some(cluster_loss_with_grad(&src_volumes, &labels, &self.bank)?),
                Some(separation_loss_with_grad(&src_volumes, &labels, &self.bank)?),
            )
        } else {
            (None, None)
        };

        let eps = self.eps();
        let per_sample: Vec<(Array2<T>, Vec<Vec<T>>)> = fw
            .par_iter()
            .enumerate()
            .map(|(i, f)| {
                let mut d_sim = cal.scores[i].clone();
                if i >= ns {
                    d_sim.scaled_add(gamma, &fid.scores[i - ns]);
                }
                let mut g_protos = Array2::zeros(self.bank.vectors().raw_dim());
                let mut g_patches = Array2::zeros(f.patches.raw_dim());
                backprop_similarity(f.patches.view(), &self.bank, &f.scores, d_sim.view(), eps, &mut g_protos, &mut g_patches);
                if i < ns {
                    g_patches.scaled_add(alpha, &clu.as_ref().unwrap().volumes[i]);
                    g_patches.scaled_add(beta, &sep.as_ref().unwrap().volumes[i]);
                }
                let mut g_addon = self.addon.zero_grads();
                if cfg.train_addon {
                    if cfg.squash {
                        g_patches.zip_mut_with(&f.patches, |g, &y| *g *= y * (T::one() - y));
                    }
                    self.addon.backward(&f.tape, g_patches.view(), Some(&mut g_addon));
                }
                (g_protos, g_addon)
            })
            .collect();

        let mut g_protos = Array2::zeros(self.bank.vectors().raw_dim());
        let mut g_addon = self.addon.zero_grads();
        for (gp, ga) in &per_sample {
            g_protos += gp;
            accumulate(&mut g_addon, ga);
        }
        let (l_c, l_s) = match (&clu, &sep) {
            (Some(c), Some(s)) => {
                g_protos.scaled_add(alpha, &c.prototypes);
                g_protos.scaled_add(beta, &s.prototypes);
                (c.value.as_f64(), s.value.as_f64())
            }
            _ => (0.0, 0.0),
        };
        let l_cls = cal.value.as_f64();
        let l_fid = fid.value.as_f64();
        let parts = LossParts {
            l_cls,
            l_c,
            l_s,
            l_fid,
            total: l_cls + cfg.alpha * l_c + cfg.beta * l_s + cfg.gamma * l_fid,
        };
        Ok((
            parts,
            PrototypeGrads {
                prototypes: g_protos,
                addon: g_addon,
            },
        ))
    }

    fn batch_stream(&self, ctx: &TrainingContext<'_, T>, tag: u64) -> Result<BatchStream> {
        BatchStream::new(
            ctx.pair.source.len(),
            ctx.pair.target.len(),
            BatchConfig {
                batch_size: self.config.batch_size,
                seed: derive_seed(&[self.config.seed, tag]),
                flip: self.config.flip,
                batch_mix: self.config.batch_mix,
            },
        )
    }

    /// Per-channel `(min, max)` over every source latent patch.
    fn source_patch_box(&self, ctx: &TrainingContext<'_, T>) -> Result<(Array1<T>, Array1<T>)> {
        let d = self.bank.dim();
        let mut lo = Array1::from_elem(d, T::infinity());
        let mut hi = Array1::from_elem(d, T::neg_infinity());
        for i in 0..ctx.cache.len(Domain::Source) {
            let z = self.latent(ctx.cache.get(Domain::Source, i, false)?);
            for row in z.rows() {
                lo.zip_mut_with(&row, |l, &v| *l = l.min(v));
                hi.zip_mut_with(&row, |h, &v| *h = h.max(v));
            }
        }
        Ok((lo, hi))
    }

    fn clamp_prototypes(&mut self, (lo, hi): &(Array1<T>, Array1<T>)) {
        let d = self.bank.dim();
        for (i, v) in self.bank.vectors_mut().iter_mut().enumerate() {
            *v = v.max(lo[i % d]).min(hi[i % d]);
        }
    }

    /// Replaces every prototype with the latent patch at a random cell of a random
    /// source image of its class.
    pub fn seed_prototypes(&mut self, ctx: &TrainingContext<'_, T>) -> Result<()> {
        let by_class = ctx.pair.source_indices_by_class();
        let mut rng = stream(&[self.config.seed, SEED_TAG]);
        let (h, w) = ctx.cache.grid();
        for j in 0..self.bank.len() {
            let k = self.bank.class_of(j);
            let pool = by_class.get(k).filter(|p| !p.is_empty()).ok_or(Error::EmptyClassError(k))?;
            let i = pool[rng.random_range(0..pool.len())];
            let cell = rng.random_range(0..h * w);
            let z = self.latent(ctx.cache.get(Domain::Source, i, false)?);
            self.bank.vectors_mut()[j * z.ncols()..(j + 1) * z.ncols()].copy_from_slice(&z.row(cell).to_vec());
        }
        self.seeded = true;
        Ok(())
    }

    /// Prototype-layer stage: optimizes prototypes (and the add-on copy) with head and base frozen.
    pub fn stage_prototypes(&mut self, ctx: &TrainingContext<'_, T>, epochs: usize) -> Result<()> {
        if self.config.prototype_init == PrototypeInit::SourcePatches && !self.seeded && self.epochs_done == 0 {
            self.seed_prototypes(ctx)?;
        }
        let sampler = self.batch_stream(ctx, PROTO_BATCH_TAG)?;
        let mut opt = Adam::<T>::new(self.config.lr);
        for _ in 0..epochs {
            let batches = sampler.epoch(self.epochs_done);
            let bounds = if self.config.prototype_box {
                Some(self.source_patch_box(ctx)?)
            } else {
                None
            };
            let mut sum = LossParts::default();
            for (step, batch) in batches.iter().enumerate() {
                let (parts, grads) = self.prototype_objective(ctx, batch)?;
                let mut flat = vec![grads.prototypes.into_raw_vec_and_offset().0];
                if self.config.train_addon {
                    flat.extend(grads.addon);
                }
                if !parts.total.is_finite() || !all_finite(&flat) {
                    return Err(Error::TrainingDiverged {
                        step: self.epochs_done * batches.len() + step,
                    });
                }
                let mut params = vec![self.bank.vectors_mut()];
                if self.config.train_addon {
                    params.extend(self.addon.params_mut());
                }
                opt.step(params, &flat);
                if let Some(b) = &bounds {
                    self.clamp_prototypes(b);
                }
                sum.add(&parts);
            }
            self.epochs_done += 1;
            let mean = sum.scaled(1.0 / batches.len().max(1) as f64);
            let m = self.evaluate(ctx)?;
            log::info!(
                "epoch {}: L_Cls {:.4} L_c {:.4} L_s {:.4} L_Fid {:.4} total {:.4} agreement {:.3}",
                self.epochs_done,
                mean.l_cls,
                mean.l_c,
                mean.l_s,
                mean.l_fid,
                mean.total,
                m.agreement
            );
            self.log.push(LogRecord {
                epoch: self.epochs_done,
                stage: Stage::Prototypes,
                l_cls: Some(mean.l_cls),
                l_c: Some(mean.l_c),
                l_s: Some(mean.l_s),
                l_fid: Some(mean.l_fid),
                total: Some(mean.total),
                agreement: m.agreement,
                acc_hp: m.acc_hp,
                acc_hf: m.acc_hf,
            });
        }
        Ok(())
    }

    /// Projects every prototype onto its nearest same-class source patch.
    pub fn stage_push(&mut self, ctx: &TrainingContext<'_, T>) -> Result<ProjectionReport> {
        let grid = ctx.cache.grid();
        let volumes: Vec<FeatureVolume<T>> = (0..ctx.pair.source.len())
            .into_par_iter()
            .map(|i| self.volume_from_backbone(ctx.cache.get(Domain::Source, i, false)?, grid))
            .collect::<Result<_>>()?;
        let sources: Vec<ProjectionSource<'_, T>> = ctx
            .pair
            .source
            .iter()
            .zip(&volumes)
            .enumerate()
            .map(|(index, (s, volume))| ProjectionSource {
                index,
                id: &s.id,
                label: s.label().expect("source samples are labeled"),
                volume,
            })
            .collect();
        let report = project_prototypes(&mut self.bank, &sources)?;
        log::info!("push: total prototype movement {:.4}", report.total_movement());
        let m = self.evaluate(ctx)?;
        self.log.push(LogRecord {
            epoch: self.epochs_done,
            stage: Stage::Push,
            l_cls: None,
            l_c: None,
            l_s: None,
            l_fid: Some(m.fidelity),
            total: None,
            agreement: m.agreement,
            acc_hp: m.acc_hp,
            acc_hf: m.acc_hf,
        });
        self.pushes.push(report.clone());
        Ok(report)
    }

    /// `L_Cls + lambda ||W||_1` on fixed similarity vectors, with its head gradient.
    pub fn last_layer_objective(
        &self,
        source: &[ScoredSample<T>],
        target: &[ScoredSample<T>],
        pseudo: &PseudoLabels<T>,
    ) -> Result<(f64, f64, Array2<T>)> {
        let cal = calibration_loss_with_grad(source, target, &self.head, pseudo, T::lit(self.config.target_weight))?;
        let lambda = T::lit(self.config.lambda);
        let mut g = cal.weights;
        g.zip_mut_with(self.head.weights(), |g, &w| *g += lambda * w.signum() * T::lit((w != T::zero()) as u8 as f64));
        let l1 = self.head.l1_norm().as_f64();
        Ok((cal.value.as_f64(), cal.value.as_f64() + self.config.lambda * l1, g))
    }

    /// Head-only stage on fixed prototype activations.
    pub fn stage_last_layer(&mut self, ctx: &TrainingContext<'_, T>) -> Result<()> {
        let scored = |d: Domain, m: bool| -> Result<Vec<ScoredSample<T>>> {
            (0..ctx.cache.len(d))
                .into_par_iter()
                .map(|i| {
                    let v = self.latent(ctx.cache.get(d, i, m)?);
                    Ok(ScoredSample {
                        index: i,
                        domain: d,
                        similarity: similarity_scores(v.view(), &self.bank, self.eps())?.similarity,
                    })
                })
                .collect()
        };
        let plain = [scored(Domain::Source, false)?, scored(Domain::Target, false)?];
        let mirrored = if self.config.flip {
            Some([scored(Domain::Source, true)?, scored(Domain::Target, true)?])
        } else {
            None
        };
        let pick = |d: usize, i: usize, m: bool| -> &ScoredSample<T> {
            match (&mirrored, m) {
                (Some(mm), true) => &mm[d][i],
                _ => &plain[d][i],
            }
        };
        let sampler = self.batch_stream(ctx, HEAD_BATCH_TAG)?;
        let mut opt = Adam::<T>::new(self.config.lr);
        let mut last = (0.0, 0.0);
        for _ in 0..self.config.last_layer_iters {
            let batches = sampler.epoch(self.head_epochs_done);
            let (mut ce_sum, mut tot_sum) = (0.0, 0.0);
            for (step, b) in batches.iter().enumerate() {
                let src: Vec<ScoredSample<T>> = b.source.iter().map(|x| pick(0, x.index, x.flip).clone()).collect();
                let tgt: Vec<ScoredSample<T>> = b.target.iter().map(|x| pick(1, x.index, x.flip).clone()).collect();
                let (ce, total, g) = self.last_layer_objective(&src, &tgt, &ctx.pseudo)?;
                let g = g.into_raw_vec_and_offset().0;
                if !total.is_finite() || !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::TrainingDiverged {
                        step: self.head_epochs_done * batches.len() + step,
                    });
                }
                opt.step(vec![self.head.weights_mut()], &[g]);
                ce_sum += ce;
                tot_sum += total;
            }
            self.head_epochs_done += 1;
            let n = batches.len().max(1) as f64;
            last = (ce_sum / n, tot_sum / n);
        }
        let m = self.evaluate(ctx)?;
        log::info!(
            "last layer: L_Cls {:.4} total {:.4} |W|_1 {:.3} agreement {:.3}",
            last.0,
            last.1,
            self.head.l1_norm().as_f64(),
            m.agreement
        );
        self.log.push(LogRecord {
            epoch: self.epochs_done,
            stage: Stage::LastLayer,
            l_cls: Some(last.0),
            l_c: None,
            l_s: None,
            l_fid: Some(m.fidelity),
            total: Some(last.1),
            agreement: m.agreement,
            acc_hp: m.acc_hp,
            acc_hf: m.acc_hf,
        });
        Ok(())
    }

    /// Softmax of `h_p` for every (unmirrored) sample of a domain under `head`.
    pub fn domain_probabilities(
        &self,
        scores: &[SimilarityScores<T>],
        head: &PrototypicalHead<T>,
    ) -> Vec<Array1<T>> {
        scores.iter().map(|s| head.probabilities(s.similarity.view())).collect()
    }

    /// Agreement, accuracies and mean fidelity of the current model.
    pub fn evaluate(&self, ctx: &TrainingContext<'_, T>) -> Result<Metrics> {
        let src = self.domain_scores(ctx, Domain::Source)?;
        let tgt = self.domain_scores(ctx, Domain::Target)?;
        Ok(evaluate_with_head(&self.head, &src, &tgt, ctx))
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "base_hash": self.base.content_hash(),
            "categories": self.base.categories(),
            "assignment": self.bank.assignment(),
            "provenance": self.bank.provenance(),
            "log": self.log,
            "pushes": self.pushes,
            "epochs_done": self.epochs_done,
            "head_epochs_done": self.head_epochs_done,
            "rounds_done": self.rounds_done,
            "warnings": self.warnings,
            "seeded": self.seeded,
        })
    }

    /// Writes bank, head, add-on, config, log and schedule counters.
    pub fn save(&self, path: &Path) -> Result<String> {
        let mut w = ArchiveWriter::new::<T>(INTERP_CHECKPOINT_KIND, self.meta());
        for (i, (p, shape)) in self.addon.params().iter().zip(self.addon.param_shapes()).enumerate() {
            w.tensor(&format!("addon.{i}"), &shape, p)?;
        }
        let v = self.bank.vectors();
        w.tensor("prototypes", &[v.nrows(), v.ncols()], v.as_slice().unwrap())?;
        let h = self.head.weights();
        w.tensor("head", &[h.nrows(), h.ncols()], h.as_slice().unwrap())?;
        w.write(path)
    }

    /// Restores a checkpoint written against `base`; refuses a different base.
    pub fn load(path: &Path, base: Arc<BaseModel<T>>) -> Result<Self> {
        let a = Archive::read(path)?;
        a.expect_kind(INTERP_CHECKPOINT_KIND)?;
        let meta = a.meta().clone();
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing meta field {k}")));
        let base_hash: String = serde_json::from_value(get("base_hash")?)?;
        if base_hash != base.content_hash() {
            return Err(Error::Checkpoint("checkpoint was trained against a different base model".into()));
        }
        let config: TrainConfig = serde_json::from_value(get("config")?)?;
        let mut m = Self::new(base, config)?;
        for (i, dst) in m.addon.params_mut().into_iter().enumerate() {
            a.load_into(&format!("addon.{i}"), dst)?;
        }
        let (shape, protos) = a.tensor::<T>("prototypes")?;
        let assignment: Vec<usize> = serde_json::from_value(get("assignment")?)?;
        let mut bank = PrototypeBank::from_parts(
            Array2::from_shape_vec((shape[0], shape[1]), protos).map_err(|e| Error::Checkpoint(e.to_string()))?,
            assignment,
            m.base.n_classes(),
        )?;
        bank.set_provenance(serde_json::from_value(get("provenance")?)?)?;
        m.bank = bank;
        let (hs, hw) = a.tensor::<T>("head")?;
        m.head = PrototypicalHead::from_weights(
            Array2::from_shape_vec((hs[0], hs[1]), hw).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        m.log = serde_json::from_value(get("log")?)?;
        m.pushes = serde_json::from_value(get("pushes")?)?;
        m.epochs_done = serde_json::from_value(get("epochs_done")?)?;
        m.head_epochs_done = serde_json::from_value(get("head_epochs_done")?)?;
        m.rounds_done = serde_json::from_value(get("rounds_done")?)?;
        m.warnings = serde_json::from_value(get("warnings")?)?;
        m.seeded = serde_json::from_value(get("seeded")?)?;
        Ok(m)
    }
}

/// Metrics for an arbitrary head over precomputed similarity scores.
pub fn evaluate_with_head<T: Scalar>(
    head: &PrototypicalHead<T>,
    source: &[SimilarityScores<T>],
    target: &[SimilarityScores<T>],
    ctx: &TrainingContext<'_, T>,
) -> Metrics {
    let preds = |scores: &[SimilarityScores<T>]| -> Vec<Array1<T>> {
        scores.iter().map(|s| head.probabilities(s.similarity.view())).collect()
    };
    let tp = preds(target);
    let sp = preds(source);
    let hp_t: Vec<usize> = tp.iter().map(|p| argmax(p.view())).collect();
    let hp_s: Vec<usize> = sp.iter().map(|p| argmax(p.view())).collect();
    let hf_t = ctx.pseudo.labels(Domain::Target);
    let hf_s = ctx.pseudo.labels(Domain::Source);
    let n_t = hp_t.len().max(1) as f64;
    let agreement = hp_t.iter().zip(&hf_t).filter(|(a, b)| a == b).count() as f64 / n_t;
    let fidelity = tp
        .iter()
        .zip(&ctx.pseudo.target)
        .map(|(p, q)| l1_distance(p.view(), q.probs.view()).as_f64())
        .sum::<f64>()
        / n_t;
    let acc = |pred: &[usize], d: Domain| {
        ctx.pair
            .eval_labels(d)
            .map(|y| pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len().max(1) as f64)
    };
    Metrics {
        agreement,
        acc_hp: acc(&hp_t, Domain::Target),
        acc_hf: acc(&hf_t, Domain::Target),
        source_acc_hp: acc(&hp_s, Domain::Source),
        source_acc_hf: acc(&hf_s, Domain::Source),
        fidelity,
    }
}

/// Where `run_protocol` writes checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ProtocolOptions {
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub round: usize,
    pub path: PathBuf,
    pub content_hash: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome<T: Scalar> {
    pub model: InterpretiveModel<T>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Round with the highest agreement (earliest on ties).
    pub best: Option<CheckpointRecord>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

/// Runs the remaining rounds of `[prototypes x push_every, push, last layer]`,
/// checkpointing after each round. Passing a partially trained model resumes it.
pub fn run_protocol<T: Scalar>(
    mut model: InterpretiveModel<T>,
    ctx: &TrainingContext<'_, T>,
    opts: &ProtocolOptions,
) -> Result<ProtocolOutcome<T>> {
    let cfg = *model.config();
    cfg.validate()?;
    let mut checkpoints = Vec::new();
    let mut best: Option<CheckpointRecord> = None;
    if cfg.epochs == 0 {
        let msg = "epochs = 0: returning the untrained interpretive model (initialized head, unprojected prototypes)".to_string();
        log::warn!("{msg}");
        model.warnings.push(msg);
        return Ok(ProtocolOutcome {
            model,
            checkpoints,
            best,
        });
    }
    for round in model.rounds_done..cfg.rounds() {
        model.stage_prototypes(ctx, cfg.push_every)?;
        model.stage_push(ctx)?;
        model.stage_last_layer(ctx)?;
        model.rounds_done = round + 1;
        let metrics = model.evaluate(ctx)?;
        if let Some(dir) = &opts.checkpoint_dir {
            let path = dir.join(format!("round_{:03}.ckpt", round + 1));
            let content_hash = model.save(&path)?;
            model.save(&dir.join(LATEST_CHECKPOINT))?;
            let rec = CheckpointRecord {
                round: round + 1,
                path,
                content_hash,
                metrics,
            };
            if best.as_ref().is_none_or(|b| metrics.agreement > b.metrics.agreement) {
                std::fs::copy(&rec.path, dir.join(BEST_CHECKPOINT))?;
                best = Some(rec.clone());
            }
            checkpoints.push(rec);
        }
    }
    Ok(ProtocolOutcome {
        model,
        checkpoints,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_model::{train_base, ArchConfig, BaseTrainConfig};
    use crate::datasets::{generate_synthetic_pair, SyntheticSpec};
    use std::sync::OnceLock;

    fn fixture() -> &'static (DomainPair, Arc<BaseModel<f64>>) {
        static F: OnceLock<(DomainPair, Arc<BaseModel<f64>>)> = OnceLock::new();
        F.get_or_init(|| {
            let pair = generate_synthetic_pair(&SyntheticSpec {
                n_classes: 3,
                per_class: 8,
                seed: 4,
                ..Default::default()
            })
            .unwrap();
            let base = train_base::<f64>(
                &pair,
                ArchConfig::synthetic(),
                &BaseTrainConfig {
                    epochs: 3,
                    batch_size: 8,
                    ..Default::default()
                },
            )
            .unwrap();
            (pair, Arc::new(base))
        })
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            push_every: 2,
            last_layer_iters: 2,
            prototypes_per_class: 2,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn profiles_and_validation() {
        let oh = TrainConfig::for_profile(Profile::OfficeHome);
        assert_eq!((oh.alpha, oh.beta, oh.lambda, oh.lr), (0.8, 10.0, 1e-4, 0.003));
        assert_eq!((oh.prototypes_per_class, oh.epochs, oh.push_every), (10, 100, 10));
        assert_eq!(oh.gamma, 100.0);
        assert_eq!(TrainConfig::for_profile(Profile::DomainNet126).gamma, 10.0);
        assert_eq!(TrainConfig::for_profile(Profile::Synthetic).gamma, 10.0);
        assert_eq!("domainnet-126".parse::<Profile>().unwrap(), Profile::DomainNet126);
        assert!("imagenet".parse::<Profile>().is_err());
        assert!(TrainConfig { push_every: 3, ..oh }.validate().is_err());
        assert!(TrainConfig { alpha: -1.0, ..oh }.validate().is_err());
        assert_eq!(oh.rounds(), 10);
    }

    #[test]
    fn objective_composition_and_degenerate_weights() {
        let (pair, base) = fixture();
        let ctx = TrainingContext::prepare(base, pair, false).unwrap();
        let model = InterpretiveModel::new(base.clone(), small_cfg()).unwrap();
        let batch = model.batch_stream(&ctx, PROTO_BATCH_TAG).unwrap().epoch(0).remove(0);
        let (p, _) = model.prototype_objective(&ctx, &batch).unwrap();
        let recomposed = p.l_cls + 0.8 * p.l_c + 10.0 * p.l_s + 10.0 * p.l_fid;
        assert!((p.total - recomposed).abs() < 1e-9);

        let zero = InterpretiveModel::new(base.clone(), TrainConfig { alpha: 0.0, beta: 0.0, gamma: 0.0, ..small_cfg() }).unwrap();
        let (z, _) = zero.prototype_objective(&ctx, &batch).unwrap();
        assert!((z.total - z.l_cls).abs() < 1e-6);
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        let (pair, base) = fixture();
        let ctx = TrainingContext::prepare(base, pair, false).unwrap();
        let model = InterpretiveModel::new(base.clone(), TrainConfig { train_addon: true, ..small_cfg() }).unwrap();
        let batch = model.batch_stream(&ctx, PROTO_BATCH_TAG).unwrap().epoch(0).remove(0);
        let (_, g) = model.prototype_objective(&ctx, &batch).unwrap();
        assert!(g.addon.iter().flatten().any(|&v| v != 0.0));
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        for idx in (0..model.bank.vectors().len()).step_by(7) {
            let eval = |d: f64| {
                let mut m = model.clone();
                m.bank.vectors_mut()[idx] += d;
                m.prototype_objective(&ctx, &batch).unwrap().0.total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.prototypes.as_slice().unwrap()[idx];
            assert!(rel(fd, an) < 1e-3, "prototype {idx}: fd {fd} analytic {an}");
        }
        for (t, tensor) in g.addon.iter().enumerate() {
            for idx in (0..tensor.len()).step_by(97) {
                let eval = |d: f64| {
                    let mut m = model.clone();
                    m.addon.params_mut()[t][idx] += d;
                    m.prototype_objective(&ctx, &batch).unwrap().0.total
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(rel(fd, tensor[idx]) < 1e-3, "addon {t}/{idx}: fd {fd} analytic {}", tensor[idx]);
            }
        }
    }

    #[test]
    fn stage_isolation_push_and_last_layer() {
        let (pair, base) = fixture();
        let ctx = TrainingContext::prepare(base, pair, false).unwrap();
        let mut m = InterpretiveModel::new(base.clone(), small_cfg()).unwrap();
        let head0 = m.head.clone();
        m.stage_prototypes(&ctx, 1).unwrap();
        assert_eq!(m.head, head0);

        m.stage_push(&ctx).unwrap();
        assert!(m.bank.provenance().iter().all(|p| p.is_some()));
        let grid = ctx.cache.grid();
        for (j, p) in m.bank.provenance().iter().enumerate() {
            let p = p.as_ref().unwrap();
            let v = m.volume_from_backbone(ctx.cache.get(Domain::Source, p.sample_index, false).unwrap(), grid).unwrap();
            let dm = crate::protolayer::min_distances(&v, &m.bank).unwrap();
            assert_eq!(dm.distances[j], 0.0);
        }
        let again = m.stage_push(&ctx).unwrap();
        assert_eq!(again.total_movement(), 0.0);

        let protos = m.bank.clone();
        let addon = m.addon.clone();
        m.stage_last_layer(&ctx).unwrap();
        assert_eq!(m.bank, protos);
        assert_eq!(m.addon, addon);
    }

    #[test]
    fn last_layer_objective_and_l1_shrinkage() {
        let (pair, base) = fixture();
        let ctx = TrainingContext::prepare(base, pair, false).unwrap();
        let mut m = InterpretiveModel::new(base.clone(), TrainConfig { lambda: 1e3, ..small_cfg() }).unwrap();
        let scores = m.domain_scores(&ctx, Domain::Source).unwrap();
        let src: Vec<ScoredSample<f64>> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| ScoredSample {
                index: i,
                domain: Domain::Source,
                similarity: s.similarity.clone(),
            })
            .collect();
        let (ce, total, _) = m.last_layer_objective(&src, &[], &ctx.pseudo).unwrap();
        assert!((total - (ce + 1e3 * m.head.l1_norm())).abs() < 1e-6);
        let before = m.head.l1_norm();
        m.stage_last_layer(&ctx).unwrap();
        assert!(m.head.l1_norm() < before);
    }

    #[test]
    fn protocol_schedule_determinism_and_resume() {
        let (pair, base) = fixture();
        let hash0 = base.content_hash();
        let ctx = TrainingContext::prepare(base, pair, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = ProtocolOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
        };
        let a = run_protocol(InterpretiveModel::new(base.clone(), small_cfg()).unwrap(), &ctx, &opts).unwrap();
        assert_eq!(a.model.pushes().len(), 2);
        assert_eq!(a.model.log().iter().filter(|r| r.stage == Stage::LastLayer).count(), 2);
        assert_eq!(a.model.log().iter().filter(|r| r.stage == Stage::Prototypes).count(), 4);
        assert_eq!(a.model.log().last().unwrap().stage, Stage::LastLayer);
        assert_eq!(a.checkpoints.len(), 2);
        assert!(dir.path().join(BEST_CHECKPOINT).exists());
        assert_eq!(base.content_hash(), hash0);

        let b = run_protocol(InterpretiveModel::new(base.clone(), small_cfg()).unwrap(), &ctx, &ProtocolOptions::default()).unwrap();
        assert_eq!(a.model.log(), b.model.log());
        assert_eq!(a.model.bank(), b.model.bank());

        // resume from the first round's checkpoint
        let partial = InterpretiveModel::load(&a.checkpoints[0].path, base.clone()).unwrap();
        assert_eq!(partial.rounds_done(), 1);
        let c = run_protocol(partial, &ctx, &ProtocolOptions::default()).unwrap();
        assert_eq!(c.model.log(), a.model.log());
        assert_eq!(c.model.head(), a.model.head());

        let csv = dir.path().join("log.csv");
        write_log_csv(&csv, a.model.log()).unwrap();
        let header = std::fs::read_to_string(&csv).unwrap();
        assert!(header.starts_with("epoch,stage,L_Cls,L_c,L_s,L_Fid,total,agreement,acc_hp,acc_hf\n"));
        assert_eq!(read_log_csv(&csv).unwrap(), a.model.log());
    }

    #[test]
    fn zero_epochs_warns_and_keeps_initial_state() {
        let (pair, base) = fixture();
        let ctx = TrainingContext::prepare(base, pair, false).unwrap();
        let cfg = TrainConfig { epochs: 0, ..small_cfg() };
        let m0 = InterpretiveModel::new(base.clone(), cfg).unwrap();
        let out = run_protocol(m0.clone(), &ctx, &ProtocolOptions::default()).unwrap();
        assert_eq!(out.model.warnings().len(), 1);
        assert_eq!(out.model.head(), &init_head(m0.bank()));
        assert!(out.model.bank().provenance().iter().all(|p| p.is_none()));
        assert!(out.model.pushes().is_empty());
    }

    #[test]
    fn target_labels_do_not_influence_training() {
        let (pair, base) = fixture();
        let mut relabelled = pair.clone();
        for s in &mut relabelled.target {
            let y = s.eval_label().unwrap();
            *s = crate::datasets::ImageSample::new(s.id.clone(), s.pixels.clone(), Domain::Target, Some((y + 1) % 3), s.mask.clone());
        }
        let run = |p: &DomainPair| {
            let ctx = TrainingContext::prepare(base, p, false).unwrap();
            let mut m = InterpretiveModel::new(base.clone(), small_cfg()).unwrap();
            m.stage_prototypes(&ctx, 1).unwrap();
            m.stage_last_layer(&ctx).unwrap();
            (m.bank.clone(), m.head.clone(), m.log.iter().map(|r| (r.l_cls, r.total, r.agreement)).collect::<Vec<_>>())
        };
        assert_eq!(run(pair), run(&relabelled));
    }

    #[test]
    fn identical_heads_agree_fully() {
        let (pair, base) = fixture();
        let ctx = TrainingContext::prepare(base, pair, false).unwrap();
        let m = InterpretiveModel::new(base.clone(), small_cfg()).unwrap();
        let src = m.domain_scores(&ctx, Domain::Source).unwrap();
        let tgt = m.domain_scores(&ctx, Domain::Target).unwrap();
        let mut ctx2 = TrainingContext::prepare(base, pair, false).unwrap();
        // make the base outputs equal to h_p's
        for (p, s) in ctx2.pseudo.target.iter_mut().zip(&tgt) {
            *p = crate::base_model::Prediction::from_logits(&m.head.logits(s.similarity.view()));
        }
        let metrics = evaluate_with_head(m.head(), &src, &tgt, &ctx2);
        assert_eq!(metrics.agreement, 1.0);
        assert_eq!(metrics.acc_hp, metrics.acc_hf);
        assert!(metrics.fidelity < 1e-12);
    }
}
