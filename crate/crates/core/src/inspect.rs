//! Prototype ranking, head masking, removal sweeps and rank correlation.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::base_model::BaseModel;
use crate::calibration::PrototypicalHead;
use crate::datasets::Domain;
use crate::error::{Error, Result};
use crate::nn::functional::argmax;
use crate::protolayer::{PrototypeBank, SimilarityScores};
use crate::scalar::Scalar;
use crate::trainer::{run_protocol, InterpretiveModel, Metrics, ProtocolOptions, TrainConfig, TrainingContext};

pub const ZERO_VARIANCE_NOTE: &str = "zero-variance drops";

/// Prototypes of `category` by descending head weight to it; ties by index.
pub fn rank_prototypes<T: Scalar>(head: &PrototypicalHead<T>, bank: &PrototypeBank<T>, category: usize) -> Vec<usize> {
    let w = head.weights();
    let mut ids: Vec<usize> = bank.prototypes_of(category).collect();
    ids.sort_by(|&a, &b| w[[b, category]].as_f64().total_cmp(&w[[a, category]].as_f64()).then(a.cmp(&b)));
    ids
}

/// Non-destructive view of a head with some prototype rows treated as zero.
#[derive(Debug, Clone)]
pub struct MaskedHead<'a, T> {
    head: &'a PrototypicalHead<T>,
    masked: BTreeSet<usize>,
}

impl<'a, T: Scalar> MaskedHead<'a, T> {
    pub fn new(head: &'a PrototypicalHead<T>) -> Self {
        Self {
            head,
            masked: BTreeSet::new(),
        }
    }

    /// Masking an id twice is a no-op.
    pub fn mask(&mut self, j: usize) -> Result<&mut Self> {
        if j >= self.head.n_prototypes() {
            return Err(Error::IndexError {
                index: j,
                len: self.head.n_prototypes(),
            });
        }
        self.masked.insert(j);
        Ok(self)
    }

    pub fn mask_all(&mut self, ids: impl IntoIterator<Item = usize>) -> Result<&mut Self> {
        for j in ids {
            self.mask(j)?;
        }
        Ok(self)
    }

    pub fn masked(&self) -> &BTreeSet<usize> {
        &self.masked
    }

    pub fn logits(&self, similarity: ArrayView1<'_, T>) -> Array1<T> {
        let w = self.head.weights();
        let mut out = Array1::zeros(self.head.n_classes());
        for (j, row) in w.rows().into_iter().enumerate() {
            if !self.masked.contains(&j) {
                out.scaled_add(similarity[j], &row);
            }
        }
        out
    }

    /// Argmax of the logits; ties (including the all-masked limit) go to the lowest class.
    pub fn predict(&self, similarity: ArrayView1<'_, T>) -> usize {
        argmax(self.logits(similarity).view())
    }

    /// Owned head with the masked rows zeroed.
    pub fn materialize(&self) -> PrototypicalHead<T> {
        let mut w = self.head.weights().clone();
        for &j in &self.masked {
            w.row_mut(j).fill(T::zero());
        }
        PrototypicalHead::from_weights(w)
    }
}

/// `s_j * W[j, :]`, the logit contribution of one prototype.
pub fn row_contribution<T: Scalar>(head: &PrototypicalHead<T>, similarity: ArrayView1<'_, T>, j: usize) -> Array1<T> {
    head.weights().row(j).mapv(|w| w * similarity[j])
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut k = i;
        while k + 1 < order.len() && values[order[k + 1]] == values[order[i]] {
            k += 1;
        }
        let r = (i + k) as f64 / 2.0 + 1.0;
        for &o in &order[i..=k] {
            ranks[o] = r;
        }
        i = k + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return f64::NAN;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Spearman's rho. NaN when either sequence is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("sequence lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least two observations".into()));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "category")]
pub enum Scope {
    AllClasses,
    Category(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalStep {
    pub step: usize,
    /// Prototypes masked at this step (several for the all-classes scope).
    pub removed: Vec<usize>,
    pub acc_source: f64,
    pub acc_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalCurve {
    pub scope: Scope,
    pub cumulative: bool,
    /// Step 0 is the unmasked baseline.
    pub steps: Vec<RemovalStep>,
    /// `None` in JSON when undefined.
    #[serde(with = "nan_as_null")]
    pub spearman: f64,
    pub note: Option<String>,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

impl RemovalCurve {
    pub fn drops(&self, domain: Domain) -> Vec<f64> {
        let acc = |s: &RemovalStep| match domain {
            Domain::Source => s.acc_source,
            Domain::Target => s.acc_target,
        };
        self.steps.windows(2).map(|w| acc(&w[0]) - acc(&w[1])).collect()
    }
}

/// Labeled similarity scores of one domain.
#[derive(Debug, Clone, Copy)]
pub struct LabeledScores<'a, T> {
    pub scores: &'a [SimilarityScores<T>],
    pub labels: &'a [usize],
}

fn accuracy<T: Scalar>(view: &MaskedHead<'_, T>, data: &LabeledScores<'_, T>, only: Option<usize>) -> f64 {
    let mut hit = 0usize;
    let mut n = 0usize;
    for (s, &y) in data.scores.iter().zip(data.labels) {
        if only.is_some_and(|k| k != y) {
            continue;
        }
        n += 1;
        if view.predict(s.similarity.view()) == y {
            hit += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Masks ranked prototypes step by step, recording accuracy on both domains.
///
/// A category scope measures accuracy on that category's samples and has `K`
/// removal steps; the all-classes scope removes the rank-`t` prototype of every
/// class at step `t`. Non-cumulative sweeps mask only the current step's ids.
pub fn removal_sweep_scores<T: Scalar>(
    head: &PrototypicalHead<T>,
    bank: &PrototypeBank<T>,
    source: LabeledScores<'_, T>,
    target: LabeledScores<'_, T>,
    scope: Scope,
    cumulative: bool,
) -> Result<RemovalCurve> {
    let (ranked, only): (Vec<Vec<usize>>, Option<usize>) = match scope {
        Scope::Category(k) => {
            if k >= bank.n_classes() {
                return Err(Error::IndexError {
                    index: k,
                    len: bank.n_classes(),
                });
            }
            (rank_prototypes(head, bank, k).into_iter().map(|j| vec![j]).collect(), Some(k))
        }
        Scope::AllClasses => {
            let per_class: Vec<Vec<usize>> = (0..bank.n_classes()).map(|k| rank_prototypes(head, bank, k)).collect();
            let depth = per_class.iter().map(Vec::len).max().unwrap_or(0);
            let steps = (0..depth)
                .map(|t| per_class.iter().filter_map(|r| r.get(t).copied()).collect())
                .collect();
            (steps, None)
        }
    };
    let mut steps = Vec::with_capacity(ranked.len() + 1);
    let base = MaskedHead::new(head);
    steps.push(RemovalStep {
        step: 0,
        removed: Vec::new(),
        acc_source: accuracy(&base, &source, only),
        acc_target: accuracy(&base, &target, only),
    });
    let mut view = MaskedHead::new(head);
    for (t, ids) in ranked.into_iter().enumerate() {
        if !cumulative {
            view = MaskedHead::new(head);
        }
        view.mask_all(ids.iter().copied())?;
        steps.push(RemovalStep {
            step: t + 1,
            removed: ids,
            acc_source: accuracy(&view, &source, only),
            acc_target: accuracy(&view, &target, only),
        });
    }
    let mut curve = RemovalCurve {
        scope,
        cumulative,
        steps,
        spearman: f64::NAN,
        note: None,
    };
    let (ds, dt) = (curve.drops(Domain::Source), curve.drops(Domain::Target));
    if ds.len() < 2 {
        curve.note = Some("fewer than two removal steps".into());
    } else {
        curve.spearman = spearman(&ds, &dt)?;
        if curve.spearman.is_nan() {
            curve.note = Some(ZERO_VARIANCE_NOTE.into());
        }
    }
    Ok(curve)
}

/// Removal sweep of a trained model over the context's pair; needs target ground truth.
pub fn removal_sweep<T: Scalar>(
    model: &InterpretiveModel<T>,
    ctx: &TrainingContext<'_, T>,
    scope: Scope,
    cumulative: bool,
) -> Result<RemovalCurve> {
    let labels = |d: Domain| {
        ctx.pair
            .eval_labels(d)
            .ok_or_else(|| Error::InvalidArgument(format!("removal sweep needs {d} labels")))
    };
    let (ys, yt) = (labels(Domain::Source)?, labels(Domain::Target)?);
    let src = model.domain_scores(ctx, Domain::Source)?;
    let tgt = model.domain_scores(ctx, Domain::Target)?;
    removal_sweep_scores(
        model.head(),
        model.bank(),
        LabeledScores { scores: &src, labels: &ys },
        LabeledScores { scores: &tgt, labels: &yt },
        scope,
        cumulative,
    )
}

/// `step,removed_id,acc_source,acc_target`; several ids in one step are joined by `;`.
pub fn write_curve_csv(path: &Path, curve: &RemovalCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "removed_id", "acc_source", "acc_target"])?;
    for s in &curve.steps {
        let ids: Vec<String> = s.removed.iter().map(|j| j.to_string()).collect();
        w.write_record([s.step.to_string(), ids.join(";"), s.acc_source.to_string(), s.acc_target.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub scope: Scope,
    pub cumulative: bool,
    #[serde(with = "nan_as_null")]
    pub spearman: f64,
    pub note: Option<String>,
    pub steps: usize,
}

pub fn write_curve_summary(path: &Path, curve: &RemovalCurve) -> Result<()> {
    let s = CurveSummary {
        scope: curve.scope,
        cumulative: curve.cumulative,
        spearman: curve.spearman,
        note: curve.note.clone(),
        steps: curve.steps.len() - 1,
    };
    fs::write(path, serde_json::to_string_pretty(&s)?)?;
    Ok(())
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        for (dx, dy) in [(0i64, 0i64), (1, 0), (0, 1), (1, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// Line plot of both accuracy curves: source in blue, target in red, y from 0 to 1.
pub fn render_curve(curve: &RemovalCurve, width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let m = 20.0;
    let (w, h) = (width as f64 - 2.0 * m, height as f64 - 2.0 * m);
    let grey = Rgb([120, 120, 120]);
    line(&mut img, (m, m), (m, m + h), grey);
    line(&mut img, (m, m + h), (m + w, m + h), grey);
    let n = (curve.steps.len().max(2) - 1) as f64;
    let at = |i: usize, acc: f64| (m + w * i as f64 / n, m + h * (1.0 - acc.clamp(0.0, 1.0)));
    for (get, color) in [
        (Box::new(|s: &RemovalStep| s.acc_source) as Box<dyn Fn(&RemovalStep) -> f64>, Rgb([40, 80, 220])),
        (Box::new(|s: &RemovalStep| s.acc_target), Rgb([220, 40, 40])),
    ] {
        for (i, pair) in curve.steps.windows(2).enumerate() {
            line(&mut img, at(i, get(&pair[0])), at(i + 1, get(&pair[1])), color);
        }
    }
    img
}

pub fn write_curve_plot(path: &Path, curve: &RemovalCurve) -> Result<()> {
    render_curve(curve, 480, 320).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// CSV, JSON summary and PNG for one curve under `dir` with the given stem.
pub fn write_curve_artifacts(dir: &Path, stem: &str, curve: &RemovalCurve) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_curve_csv(&dir.join(format!("{stem}.csv")), curve)?;
    write_curve_summary(&dir.join(format!("{stem}.json")), curve)?;
    write_curve_plot(&dir.join(format!("{stem}.png")), curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub gamma: f64,
    pub metrics: Metrics,
    pub curve: RemovalCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub full: AblationArm,
    pub without_fidelity: AblationArm,
}

/// Runs the protocol with `cfg.gamma` and with `gamma = 0` from the same seed.
pub fn fidelity_ablation<T: Scalar>(
    base: Arc<BaseModel<T>>,
    ctx: &TrainingContext<'_, T>,
    cfg: &TrainConfig,
    opts: &ProtocolOptions,
) -> Result<AblationReport> {
    let arm = |gamma: f64, sub: &str| -> Result<AblationArm> {
        let c = TrainConfig { gamma, ..*cfg };
        let o = ProtocolOptions {
            checkpoint_dir: opts.checkpoint_dir.as_ref().map(|d| d.join(sub)),
        };
        if let Some(d) = &o.checkpoint_dir {
            fs::create_dir_all(d)?;
        }
        let out = run_protocol(InterpretiveModel::new(base.clone(), c)?, ctx, &o)?;
        let metrics = out.model.evaluate(ctx)?;
        let curve = removal_sweep(&out.model, ctx, Scope::AllClasses, true)?;
        Ok(AblationArm { gamma, metrics, curve })
    };
    Ok(AblationReport {
        full: arm(cfg.gamma, "full")?,
        without_fidelity: arm(0.0, "no_fidelity")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::init_head;
    use crate::protolayer::DistanceMap;
    use ndarray::{array, Array2};
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};

    fn bank(c: usize, k: usize) -> PrototypeBank<f64> {
        PrototypeBank::from_parts(Array2::zeros((c * k, 2)), (0..c * k).map(|j| j / k).collect(), c).unwrap()
    }

    fn scored(sim: Vec<f64>) -> SimilarityScores<f64> {
        let n = sim.len();
        SimilarityScores {
            similarity: Array1::from(sim),
            distances: DistanceMap {
                distances: Array1::zeros(n),
                argmin: vec![0; n],
            },
        }
    }

    #[test]
    fn ranking_follows_weights_then_index() {
        let b = bank(2, 3);
        assert_eq!(rank_prototypes(&init_head(&b), &b, 1), vec![3, 4, 5]);
        let mut w = init_head(&b).weights().clone();
        w[[0, 0]] = 0.2;
        w[[1, 0]] = 1.4;
        w[[2, 0]] = 0.9;
        let h = PrototypicalHead::from_weights(w);
        let r = rank_prototypes(&h, &b, 0);
        assert_eq!(r, vec![1, 2, 0]);
    }

    #[test]
    fn full_mask_predicts_class_zero_and_double_mask_is_noop() {
        let b = bank(3, 2);
        let h = init_head(&b);
        let s = array![0.1, 0.2, 3.0, 4.0, 0.5, 0.6];
        let mut v = MaskedHead::new(&h);
        assert_eq!(v.predict(s.view()), 1);
        v.mask(2).unwrap();
        let once = v.logits(s.view());
        v.mask(2).unwrap();
        assert_eq!(v.logits(s.view()), once);
        v.mask_all(0..6).unwrap();
        assert!(v.logits(s.view()).iter().all(|&x| x == 0.0));
        assert_eq!(v.predict(s.view()), 0);
        assert!(matches!(v.mask(6), Err(Error::IndexError { index: 6, .. })));
    }

    #[test]
    fn zero_row_mask_changes_nothing() {
        let b = bank(2, 2);
        let mut w = init_head(&b).weights().clone();
        w.row_mut(1).fill(0.0);
        let h = PrototypicalHead::from_weights(w);
        let s = array![0.3, 2.0, 0.1, 0.4];
        let mut v = MaskedHead::new(&h);
        let before = v.logits(s.view());
        v.mask(1).unwrap();
        assert_eq!(v.logits(s.view()), before);
    }

    #[test]
    fn materialized_head_agrees_with_view() {
        let b = bank(3, 2);
        let h = init_head(&b);
        let s = array![0.1, 0.2, 3.0, 4.0, 0.5, 0.6];
        let mut v = MaskedHead::new(&h);
        v.mask_all([1, 4]).unwrap();
        let m = v.materialize();
        for (a, e) in m.logits(s.view()).iter().zip(v.logits(s.view()).iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    fn brute_spearman(a: &[f64], b: &[f64]) -> f64 {
        // rank = 1 + #smaller + (#equal - 1) / 2
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&x| {
                    let less = v.iter().filter(|&&y| y < x).count() as f64;
                    let eq = v.iter().filter(|&&y| y == x).count() as f64;
                    1.0 + less + (eq - 1.0) / 2.0
                })
                .collect()
        };
        let (ra, rb) = (rank(a), rank(b));
        let n = ra.len() as f64;
        let mean = (n + 1.0) / 2.0;
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - mean) * (y - mean)).sum();
        let va: f64 = ra.iter().map(|x| (x - mean).powi(2)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mean).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn spearman_reference_cases() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let r: Vec<f64> = a.iter().rev().copied().collect();
        assert!((spearman(&a, &r).unwrap() + 1.0).abs() < 1e-12);
        let b = [2.0, 1.0, 4.0, 3.0, 5.0];
        // d = (1,1,1,1,0): 1 - 6*4 / (5*24)
        assert!((spearman(&a, &b).unwrap() - 0.8).abs() < 1e-12);
        assert!((spearman(&a, &b).unwrap() - brute_spearman(&a, &b)).abs() < 1e-9);
        assert!(spearman(&a, &[1.0; 5]).unwrap().is_nan());
        assert!(spearman(&a, &a[..4]).is_err());
        assert!(spearman(&a[..1], &a[..1]).is_err());
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    proptest! {
        #[test]
        fn spearman_matches_brute_force(pairs in proptest::collection::vec((0u8..6, 0u8..6), 2..20)) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            let got = spearman(&a, &b).unwrap();
            let want = brute_spearman(&a, &b);
            if want.is_nan() {
                prop_assert!(got.is_nan());
            } else {
                prop_assert!((got - want).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&got));
            }
        }

        #[test]
        fn masking_is_linear(seed in 0u64..1000, mask_bits in 0u32..(1 << 12)) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let w = Array2::from_shape_fn((12, 3), |_| rng.random_range(-2.0f64..2.0));
            let h = PrototypicalHead::from_weights(w);
            let s = Array1::from_shape_fn(12, |_| rng.random_range(0.0f64..9.0));
            let ids: Vec<usize> = (0..12).filter(|j| mask_bits >> j & 1 == 1).collect();
            let mut v = MaskedHead::new(&h);
            v.mask_all(ids.iter().copied()).unwrap();
            let mut want = h.logits(s.view());
            for &j in &ids {
                want -= &row_contribution(&h, s.view(), j);
            }
            let got = v.logits(s.view());
            for (g, e) in got.iter().zip(want.iter()) {
                prop_assert!((g - e).abs() <= 1e-12 * (1.0 + e.abs()));
            }
        }
    }

    #[test]
    fn constant_predictor_gives_flat_curve_and_nan() {
        let b = bank(2, 3);
        let h = PrototypicalHead::from_weights(Array2::zeros((6, 2)));
        let scores: Vec<_> = (0..4).map(|i| scored(vec![i as f64; 6])).collect();
        let labels = [0, 1, 0, 1];
        let data = LabeledScores { scores: &scores, labels: &labels };
        let c = removal_sweep_scores(&h, &b, data, data, Scope::AllClasses, true).unwrap();
        assert_eq!(c.steps.len(), 4);
        assert!(c.steps.iter().all(|s| s.acc_source == 0.5 && s.acc_target == 0.5));
        assert!(c.spearman.is_nan());
        assert_eq!(c.note.as_deref(), Some(ZERO_VARIANCE_NOTE));
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"spearman\":null"));
    }

    #[test]
    fn category_sweep_has_k_steps_and_removes_ranked_ids() {
        let b = bank(2, 4);
        let mut w = init_head(&b).weights().clone();
        w[[6, 1]] = 2.0;
        let h = PrototypicalHead::from_weights(w);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<_> = (0..10).map(|_| scored((0..8).map(|_| rng.random_range(0.0..3.0)).collect())).collect();
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let data = LabeledScores { scores: &scores, labels: &labels };
        let c = removal_sweep_scores(&h, &b, data, data, Scope::Category(1), true).unwrap();
        assert_eq!(c.steps.len() - 1, 4);
        let removed: Vec<usize> = c.steps[1..].iter().flat_map(|s| s.removed.clone()).collect();
        assert_eq!(removed, vec![6, 4, 5, 7]);
        assert!(c.steps.iter().all(|s| (0.0..=1.0).contains(&s.acc_source)));
        // masking every class-1 prototype leaves only negative weight on class 1
        assert_eq!(c.steps.last().unwrap().acc_target, 0.0);
        let again = removal_sweep_scores(&h, &b, data, data, Scope::Category(1), true).unwrap();
        assert_eq!(c, again);

        let single = removal_sweep_scores(&h, &b, data, data, Scope::Category(1), false).unwrap();
        assert_eq!(single.steps[1], c.steps[1]);
    }

    #[test]
    fn curve_artifacts_are_written() {
        let b = bank(2, 2);
        let h = init_head(&b);
        let scores: Vec<_> = (0..4).map(|i| scored(vec![i as f64, 1.0, 2.0, 0.5])).collect();
        let labels = [0, 1, 0, 1];
        let data = LabeledScores { scores: &scores, labels: &labels };
        let c = removal_sweep_scores(&h, &b, data, data, Scope::AllClasses, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_curve_artifacts(dir.path(), "all", &c).unwrap();
        let csv = fs::read_to_string(dir.path().join("all.csv")).unwrap();
        assert!(csv.starts_with("step,removed_id,acc_source,acc_target\n0,,"));
        assert!(csv.contains("\n1,0;2,"));
        let img = image::open(dir.path().join("all.png")).unwrap();
        assert_eq!((img.width(), img.height()), (480, 320));
        let s: CurveSummary = serde_json::from_str(&fs::read_to_string(dir.path().join("all.json")).unwrap()).unwrap();
        assert_eq!(s.steps, 2);
    }
}
