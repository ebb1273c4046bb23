mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protoda::base_model::{FeatureVolume, Prediction, PseudoLabels};
use protoda::calibration::{
    calibration_loss_with_grad, fidelity_loss, fidelity_loss_with_grad, init_head, l1_distance, PrototypicalHead,
    ScoredSample,
};
use protoda::datasets::Domain;
use protoda::explain::{emit_report, heatmap, match_cross_domain, percentile, ExplainConfig, MATCHES_FILE};
use protoda::inspect::{fidelity_ablation, row_contribution, spearman, MaskedHead};
use protoda::protolayer::{
    cluster_loss, cluster_loss_with_grad, min_distances, separation_loss, separation_loss_with_grad,
    similarity_with_eps, PrototypeBank,
};
use protoda::trainer::{ProtocolOptions, TrainConfig};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_bank(rng: &mut ChaCha8Rng, c: usize, k: usize, d: usize) -> PrototypeBank<f64> {
    let v = Array2::from_shape_fn((c * k, d), |_| rng.random_range(-1.0..1.0));
    PrototypeBank::from_parts(v, (0..c * k).map(|j| j / k).collect(), c).unwrap()
}

fn random_volume(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureVolume<f64> {
    FeatureVolume::new(Array3::from_shape_fn((h, w, d), |_| rng.random_range(-1.0..1.0))).unwrap()
}

fn brute_distance(v: &FeatureVolume<f64>, bank: &PrototypeBank<f64>, j: usize, r: usize, c: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..v.depth() {
        let d = v.grid()[[r, c, k]] - bank.vectors()[[j, k]];
        s += d * d;
    }
    s
}

fn brute_min(v: &FeatureVolume<f64>, bank: &PrototypeBank<f64>, j: usize) -> f64 {
    let mut best = f64::INFINITY;
    for r in 0..v.height() {
        for c in 0..v.width() {
            best = best.min(brute_distance(v, bank, j, r, c));
        }
    }
    best
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for inst in 0..50 {
        let (c, k, d) = (rng.random_range(2..5), rng.random_range(1..4), rng.random_range(1..7));
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        let n = rng.random_range(1..6);
        let bank = random_bank(&mut rng, c, k, d);
        let vols: Vec<_> = (0..n).map(|_| random_volume(&mut rng, h, w, d)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let (mut lc, mut ls) = (0.0, 0.0);
        for (v, &y) in vols.iter().zip(&labels) {
            let dm = min_distances(v, &bank).unwrap();
            let mut own = f64::INFINITY;
            let mut other = f64::INFINITY;
            for j in 0..bank.len() {
                let b = brute_min(v, &bank, j);
                worst = worst.max((dm.distances[j] - b).abs());
                if j / k == y {
                    own = own.min(b);
                } else {
                    other = other.min(b);
                }
            }
            lc += own / n as f64;
            ls -= other / n as f64;
        }
        let got_c = cluster_loss(&vols, &labels, &bank).unwrap();
        let got_s = separation_loss(&vols, &labels, &bank).unwrap();
        worst = worst.max((got_c - lc).abs()).max((got_s - ls).abs());
        ensure(worst <= 1e-5, || format!("instance {inst}: deviation {worst:e}"))?;
    }
    Ok(format!("50 instances, max deviation {worst:.1e}"))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn central_diff(x: &mut [f64], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let keep = x[i];
            x[i] = keep + h;
            let up = f(x);
            x[i] = keep - h;
            let down = f(x);
            x[i] = keep;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Distance gap between the best and runner-up candidate of every min taken by the
/// cluster and separation terms; small gaps make the finite difference straddle a kink.
fn min_gap(vols: &[FeatureVolume<f64>], labels: &[usize], bank: &PrototypeBank<f64>, k: usize) -> f64 {
    let mut gap = f64::INFINITY;
    for (v, &y) in vols.iter().zip(labels) {
        for own in [true, false] {
            let mut all = Vec::new();
            for j in (0..bank.len()).filter(|j| (j / k == y) == own) {
                for r in 0..v.height() {
                    for c in 0..v.width() {
                        all.push(brute_distance(v, bank, j, r, c));
                    }
                }
            }
            all.sort_by(f64::total_cmp);
            if all.len() > 1 {
                gap = gap.min(all[1] - all[0]);
            }
        }
    }
    gap
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut points = 0;
    while points < 10 {
        let (c, k, d, h, w, n) = (3, 2, 4, 2, 3, 3);
        let bank = random_bank(&mut rng, c, k, d);
        let vols: Vec<_> = (0..n).map(|_| random_volume(&mut rng, h, w, d)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        if min_gap(&vols, &labels, &bank, k) < 1e-2 {
            continue;
        }
        points += 1;
        for sep in [false, true] {
            let loss = |b: &PrototypeBank<f64>, v: &[FeatureVolume<f64>]| {
                if sep {
                    separation_loss(v, &labels, b).unwrap()
                } else {
                    cluster_loss(v, &labels, b).unwrap()
                }
            };
            let g = if sep {
                separation_loss_with_grad(&vols, &labels, &bank).unwrap()
            } else {
                cluster_loss_with_grad(&vols, &labels, &bank).unwrap()
            };
            let mut x = bank.vectors().iter().copied().collect::<Vec<_>>();
            let num = central_diff(&mut x, &mut |x| {
                let b = PrototypeBank::from_parts(Array2::from_shape_vec((c * k, d), x.to_vec()).unwrap(), bank.assignment().to_vec(), c)
                    .unwrap();
                loss(&b, &vols)
            });
            worst = worst.max(rel_err(g.prototypes.as_slice().unwrap(), &num));
            for i in 0..n {
                let mut x = vols[i].grid().iter().copied().collect::<Vec<_>>();
                let num = central_diff(&mut x, &mut |x| {
                    let mut vs = vols.clone();
                    vs[i] = FeatureVolume::new(Array3::from_shape_vec((h, w, d), x.to_vec()).unwrap()).unwrap();
                    loss(&bank, &vs)
                });
                worst = worst.max(rel_err(g.volumes[i].as_slice().unwrap(), &num));
            }
        }

        // L_Cls and L_Fid with respect to head weights and similarity scores
        let p = c * k;
        let head = PrototypicalHead::from_weights(Array2::from_shape_fn((p, c), |_| rng.random_range(-1.0..1.0)));
        let sample = |rng: &mut ChaCha8Rng, i: usize, domain: Domain| ScoredSample {
            index: i,
            domain,
            similarity: Array1::from_shape_fn(p, |_| rng.random_range(0.0..3.0)),
        };
        let src: Vec<_> = (0..3).map(|i| sample(&mut rng, i, Domain::Source)).collect();
        let tgt: Vec<_> = (0..3).map(|i| sample(&mut rng, i, Domain::Target)).collect();
        let pred = |rng: &mut ChaCha8Rng| Prediction::from_logits(&Array1::from_shape_fn(c, |_| rng.random_range(-2.0..2.0)));
        let pseudo = PseudoLabels {
            source: (0..3).map(|_| pred(&mut rng)).collect(),
            target: (0..3).map(|_| pred(&mut rng)).collect(),
        };
        let with = |x: &[f64], src: &[ScoredSample<f64>], tgt: &[ScoredSample<f64>], fid: bool| {
            let h = PrototypicalHead::from_weights(Array2::from_shape_vec((p, c), x.to_vec()).unwrap());
            if fid {
                fidelity_loss(tgt, &h, &pseudo).unwrap()
            } else {
                calibration_loss_with_grad(src, tgt, &h, &pseudo, 1.0).unwrap().value
            }
        };
        for fid in [false, true] {
            let g = if fid {
                fidelity_loss_with_grad(&tgt, &head, &pseudo).unwrap()
            } else {
                calibration_loss_with_grad(&src, &tgt, &head, &pseudo, 1.0).unwrap()
            };
            let mut x = head.weights().iter().copied().collect::<Vec<_>>();
            let num = central_diff(&mut x, &mut |x| with(x, &src, &tgt, fid));
            worst = worst.max(rel_err(g.weights.as_slice().unwrap(), &num));
            let w0 = head.weights().iter().copied().collect::<Vec<_>>();
            let scored: Vec<(Domain, usize)> = if fid {
                (0..3).map(|i| (Domain::Target, i)).collect()
            } else {
                (0..3).map(|i| (Domain::Source, i)).chain((0..3).map(|i| (Domain::Target, i))).collect()
            };
            for (slot, &(dom, i)) in scored.iter().enumerate() {
                let base = if dom == Domain::Source { &src[i] } else { &tgt[i] };
                let mut x = base.similarity.to_vec();
                let num = central_diff(&mut x, &mut |x| {
                    let (mut s, mut t) = (src.clone(), tgt.clone());
                    let target = if dom == Domain::Source { &mut s[i] } else { &mut t[i] };
                    target.similarity = Array1::from(x.to_vec());
                    with(&w0, &s, &t, fid)
                });
                worst = worst.max(rel_err(g.scores[slot].as_slice().unwrap(), &num));
            }
        }
        ensure(worst <= 1e-3, || format!("point {points}: relative error {worst:e}"))?;
    }
    Ok(format!("10 points, L_c/L_s/L_Cls/L_Fid max relative error {worst:.1e}"))
}

fn criterion_3() -> Check {
    let t = common::trained();
    let m = &t.outcome.model;
    let bank = m.bank();
    let (h, w) = t.ctx.cache.grid();
    for j in 0..bank.len() {
        let prov = bank.provenance()[j].as_ref().ok_or(format!("prototype {j} has no provenance"))?;
        let sample = &common::pair().source[prov.sample_index];
        ensure(sample.label() == Some(bank.class_of(j)), || format!("prototype {j} projected onto another class"))?;
        let z = m.latent(t.ctx.cache.get(Domain::Source, prov.sample_index, false).unwrap());
        ensure(prov.row < h && prov.col < w, || format!("prototype {j}: bad cell"))?;
        let patch = z.row(prov.row * w + prov.col);
        ensure(patch.iter().zip(bank.vector(j).iter()).all(|(a, b)| a.to_bits() == b.to_bits()), || {
            format!("prototype {j} differs from its provenance patch")
        })?;
    }
    let mut again = m.clone();
    let before = again.bank().vectors().clone();
    let report = again.stage_push(&t.ctx).map_err(|e| e.to_string())?;
    ensure(report.total_movement() == 0.0, || format!("second push moved {}", report.total_movement()))?;
    ensure(again.bank().vectors() == &before, || "second push changed the bank".into())?;

    let zero = similarity_with_eps(0.0f32, m.config().similarity_eps as f32).unwrap() as f64;
    for k in 0..common::pair().n_classes() {
        let cm = match_cross_domain(m, &t.ctx, k, &ExplainConfig::default()).map_err(|e| e.to_string())?;
        for mt in &cm.matches {
            let a = mt.anchor.as_ref().ok_or("missing anchor")?;
            ensure(mt.source[0].sample_index == a.sample_index && mt.source[0].score == zero, || {
                format!("prototype {}: top-1 source is not the provenance patch", mt.prototype_id)
            })?;
        }
    }
    Ok(format!("{} prototypes bit-equal to provenance patches; re-push movement 0; top-1 anchors hold", bank.len()))
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut cases = 0;
    for c in 2..9 {
        for k in 1..13 {
            let bank = random_bank(&mut rng, c, k, 3);
            let head = init_head(&bank);
            ensure(head.weights().dim() == (c * k, c), || format!("c={c} K={k}: shape"))?;
            for ((j, cls), &v) in head.weights().indexed_iter() {
                let want = if j / k == cls { 1.0 } else { -0.5 };
                ensure(v == want, || format!("c={c} K={k}: entry ({j},{cls}) = {v}"))?;
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} (c, K) shapes exact"))
}

fn criterion_5() -> Check {
    let mut runner = TestRunner::new(Config {
        cases: 512,
        ..Config::default()
    });
    let strategy = (2usize..8).prop_flat_map(|c| {
        (
            proptest::collection::vec(-6.0f64..6.0, c),
            proptest::collection::vec(-6.0f64..6.0, c),
            0..c,
            0..c,
        )
    });
    runner
        .run(&strategy, |(a, b, i, j)| {
            let p = protoda::nn::functional::softmax(Array1::from(a.clone()).view());
            let q = protoda::nn::functional::softmax(Array1::from(b).view());
            let d = l1_distance(p.view(), q.view());
            prop_assert!((0.0..=2.0).contains(&d));
            prop_assert_eq!(l1_distance(p.view(), p.view()), 0.0);
            if d == 0.0 {
                prop_assert!(p.iter().zip(q.iter()).all(|(x, y)| x == y));
            }
            let c = a.len();
            let hot = |k: usize| Array1::from_shape_fn(c, |m| if m == k { 1.0 } else { 0.0 });
            let e = l1_distance(hot(i).view(), hot(j).view());
            prop_assert_eq!(e, if i == j { 0.0 } else { 2.0 });
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("512 cases: range [0,2], zero iff equal, 2 on disjoint one-hots".into())
}

fn oracle_spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let less = v.iter().filter(|&&y| y < x).count() as f64;
                let eq = v.iter().filter(|&&y| y == x).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let num: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let den = (ra.iter().map(|x| (x - ma).powi(2)).sum::<f64>() * rb.iter().map(|y| (y - mb).powi(2)).sum::<f64>()).sqrt();
    num / den
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst: f64 = 0.0;
    let mut nan = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..21);
        let levels = rng.random_range(2..8);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.25).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 - 1.5).collect();
        let got = spearman(&a, &b).map_err(|e| e.to_string())?;
        let want = oracle_spearman(&a, &b);
        if want.is_nan() {
            ensure(got.is_nan(), || format!("expected NaN for {a:?} / {b:?}"))?;
            nan += 1;
        } else {
            worst = worst.max((got - want).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("deviation {worst:e}"))?;
    Ok(format!("100 sequences ({nan} zero-variance), max deviation {worst:.1e}"))
}

fn criterion_7() -> Check {
    let t = common::trained();
    let metrics = t.outcome.model.evaluate(&t.ctx).map_err(|e| e.to_string())?;
    ensure(metrics.agreement >= 0.9, || format!("final agreement {:.3}", metrics.agreement))?;
    ensure(t.outcome.checkpoints.len() == 10, || format!("{} checkpoints", t.outcome.checkpoints.len()))?;
    for c in &t.outcome.checkpoints {
        let gap = (c.metrics.acc_hp.unwrap() - c.metrics.acc_hf.unwrap()).abs();
        ensure(gap <= 1.0 - c.metrics.agreement + 1e-12, || {
            format!("round {}: |dacc| {gap:.3} > 1 - agreement {:.3}", c.round, 1.0 - c.metrics.agreement)
        })?;
    }
    ensure(t.seconds < 15.0 * 60.0, || format!("protocol took {:.0}s", t.seconds))?;
    Ok(format!(
        "agreement {:.3}, acc(h_p) {:.3}, acc(h_f) {:.3}, bound holds at 10 checkpoints, {:.0}s",
        metrics.agreement,
        metrics.acc_hp.unwrap(),
        metrics.acc_hf.unwrap(),
        t.seconds
    ))
}

fn criterion_8() -> Check {
    let t = common::trained();
    let rep = fidelity_ablation(t.base.clone(), &t.ctx, &TrainConfig::default(), &ProtocolOptions::default())
        .map_err(|e| e.to_string())?;
    let (with, without) = (rep.full.metrics.fidelity, rep.without_fidelity.metrics.fidelity);
    ensure(with <= without, || format!("gamma>0 fidelity {with:.4} > gamma=0 fidelity {without:.4}"))?;
    Ok(format!("mean target L_Fid {with:.4} (gamma={}) <= {without:.4} (gamma=0)", rep.full.gamma))
}

fn criterion_9() -> Check {
    let t = common::trained();
    let m = &t.outcome.model;
    let head = PrototypicalHead::from_weights(m.head().weights().mapv(f64::from));
    let scores = m.domain_scores(&t.ctx, Domain::Target).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst: f64 = 0.0;
    for set in 0..20 {
        let size = rng.random_range(1..=head.n_prototypes());
        let ids: Vec<usize> = (0..size).map(|_| rng.random_range(0..head.n_prototypes())).collect();
        let mut view = MaskedHead::new(&head);
        view.mask_all(ids.iter().copied()).map_err(|e| e.to_string())?;
        let materialized = view.materialize();
        for s in scores.iter().step_by(7) {
            let s = s.similarity.mapv(f64::from);
            let full = head.logits(s.view());
            let mut want = full.clone();
            for &j in view.masked() {
                want -= &row_contribution(&head, s.view(), j);
            }
            let got = view.logits(s.view());
            for k in 0..head.n_classes() {
                let mag: f64 = (0..head.n_prototypes()).map(|j| (s[j] * head.weights()[[j, k]]).abs()).sum();
                let tol = 4.0 * head.n_prototypes() as f64 * f64::EPSILON * mag.max(1.0);
                let err = (got[k] - want[k]).abs();
                worst = worst.max(err / tol);
                ensure(err <= tol, || format!("set {set}: class {k} error {err:e} > {tol:e}"))?;
            }
            ensure(materialized.logits(s.view()) == got, || format!("set {set}: materialized head differs"))?;
        }
    }
    Ok(format!("20 mask sets, worst error {worst:.2} of the rounding bound"))
}

fn criterion_10() -> Check {
    let t = common::trained();
    let m = &t.outcome.model;
    let cfg = ExplainConfig::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = emit_report(m, &t.ctx, a.path(), &cfg).map_err(|e| e.to_string())?;
    emit_report(m, &t.ctx, b.path(), &cfg).map_err(|e| e.to_string())?;
    let c = common::pair().n_classes();
    let k = m.config().prototypes_per_class;
    ensure(ra.cards == c * k, || format!("{} cards", ra.cards))?;
    for e in &ra.metadata.prototypes {
        ensure(a.path().join(&e.files.card).is_file(), || format!("missing card {}", e.files.card.display()))?;
    }
    ensure(ra.panels == c, || format!("{} panels", ra.panels))?;
    let mut boxes = 0;
    for e in &ra.metadata.prototypes {
        let j = e.matched.prototype_id;
        let anchor = e.matched.anchor.as_ref().map(|a| (Domain::Source, a.sample_index, a.patch_box));
        let examples = e
            .matched
            .source
            .iter()
            .map(|x| (Domain::Source, x.sample_index, x.patch_box))
            .chain(e.matched.target.iter().map(|x| (Domain::Target, x.sample_index, x.patch_box)));
        for (domain, i, bx) in anchor.into_iter().chain(examples) {
            let img = &common::pair().domain(domain)[i];
            let heat = heatmap(m, img, j).map_err(|e| e.to_string())?;
            let u = heat.upsampled.mapv(f64::from);
            let thr = percentile(&u.iter().copied().collect::<Vec<_>>(), cfg.percentile);
            let (hh, ww) = u.dim();
            ensure(bx.top <= bx.bottom && bx.left <= bx.right && bx.bottom < hh && bx.right < ww, || {
                format!("prototype {j}: invalid box {bx:?}")
            })?;
            ensure(u.indexed_iter().all(|((y, x), &v)| v < thr || bx.contains(y, x)), || {
                format!("prototype {j}: box misses a percentile pixel")
            })?;
            let row = |y: usize| (bx.left..=bx.right).any(|x| u[[y, x]] >= thr);
            let col = |x: usize| (bx.top..=bx.bottom).any(|y| u[[y, x]] >= thr);
            ensure(row(bx.top) && row(bx.bottom) && col(bx.left) && col(bx.right), || {
                format!("prototype {j}: box {bx:?} is not minimal")
            })?;
            boxes += 1;
        }
    }
    let (ma, mb) = (
        std::fs::read(a.path().join(MATCHES_FILE)).map_err(|e| e.to_string())?,
        std::fs::read(b.path().join(MATCHES_FILE)).map_err(|e| e.to_string())?,
    );
    ensure(ma == mb, || "metadata differs between runs".into())?;
    Ok(format!("{} cards, {} panels, {boxes} minimal boxes, metadata byte-stable", ra.cards, ra.panels))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("loss-oracle equivalence", criterion_1),
        ("gradient checks", criterion_2),
        ("projection invariants", criterion_3),
        ("head initialization", criterion_4),
        ("fidelity-loss range", criterion_5),
        ("spearman oracle", criterion_6),
        ("end-to-end synthetic fidelity", criterion_7),
        ("ablation direction", criterion_8),
        ("masking linearity", criterion_9),
        ("report integrity", criterion_10),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.1}s]", n + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.0}s",
        criteria.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
