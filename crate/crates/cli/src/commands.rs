use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use log::{info, warn};
use protoda::base_model::{train_base, write_history_csv, BaseModel};
use protoda::datasets::{generate_synthetic_pair, load_directory_pair, DomainPair};
use protoda::explain::{category_dir, emit_report};
use protoda::inspect::{fidelity_ablation, removal_sweep, write_curve_artifacts, Scope};
use protoda::trainer::{
    run_protocol, write_log_csv, CheckpointRecord, InterpretiveModel, ProtocolOptions, TrainingContext, BEST_CHECKPOINT,
    LATEST_CHECKPOINT,
};
use protoda::{Error, Scalar};
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::{Artifact, Manifest};

pub const BASE_CHECKPOINT: &str = "base.ckpt";
pub const RECORDS_FILE: &str = "checkpoints.json";
pub const LOG_FILE: &str = "log.csv";
pub const METRICS_FILE: &str = "metrics.json";

/// Directory layout of one run.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn base_dir(&self) -> PathBuf {
        self.root.join("base")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.base_dir().join(BASE_CHECKPOINT)
    }

    pub fn interp_dir(&self) -> PathBuf {
        self.root.join("interp")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn inspect_dir(&self) -> PathBuf {
        self.root.join("inspect")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

pub struct Invocation {
    pub cfg: RunConfig,
    pub layout: Layout,
    pub argv: Vec<String>,
    pub force: bool,
    /// Interpretive checkpoint for the downstream commands; `interp/latest.ckpt` when unset.
    pub checkpoint: Option<PathBuf>,
}

impl Invocation {
    fn manifest(&self, command: &str) -> Manifest {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            argv: self.argv.clone(),
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seconds: 0.0,
            summary: serde_json::Value::Null,
        }
    }

    fn interp_checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.layout.interp_dir().join(LATEST_CHECKPOINT))
    }
}

fn require(path: &Path) -> protoda::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn require_seed(inv: &Invocation, command: &str) -> protoda::Result<()> {
    match inv.cfg.seed {
        Some(_) => Ok(()),
        None => Err(Error::InvalidArgument(format!("--seed is required for {command}"))),
    }
}

pub fn load_data(cfg: &RunConfig) -> protoda::Result<DomainPair> {
    match (&cfg.data.source_dir, &cfg.data.target_dir) {
        (Some(s), Some(t)) => load_directory_pair(s, t, cfg.base.arch.image_side),
        _ => generate_synthetic_pair(&cfg.data.synthetic),
    }
}

fn load_base<T: Scalar>(inv: &Invocation, pair: &DomainPair) -> anyhow::Result<Arc<BaseModel<T>>> {
    let path = inv.layout.base_checkpoint();
    require(&path)?;
    let base = BaseModel::<T>::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if base.categories() != pair.categories.as_slice() {
        return Err(Error::InvalidConfig(format!(
            "base model categories {:?} differ from the dataset's {:?}",
            base.categories(),
            pair.categories
        ))
        .into());
    }
    Ok(Arc::new(base))
}

fn load_interp<T: Scalar>(inv: &Invocation, base: Arc<BaseModel<T>>) -> anyhow::Result<(InterpretiveModel<T>, PathBuf)> {
    let path = inv.interp_checkpoint();
    require(&path)?;
    let m = InterpretiveModel::load(&path, base).with_context(|| format!("loading {}", path.display()))?;
    Ok((m, path))
}

pub fn train_base_cmd<T: Scalar>(inv: &Invocation) -> anyhow::Result<()> {
    require_seed(inv, "train-base")?;
    let started = Instant::now();
    let cfg = &inv.cfg;
    let path = inv.layout.base_checkpoint();
    let mut summary = json!({});
    if path.is_file() && !inv.force {
        let existing = BaseModel::<T>::load(&path)?;
        if existing.train_config() != Some(&cfg.base.train) || existing.arch() != &cfg.base.arch {
            return Err(Error::InvalidConfig(format!(
                "{} was trained with a different configuration; pass --force to retrain",
                path.display()
            ))
            .into());
        }
        info!("{} is up to date", path.display());
        summary["resumed"] = json!(true);
    } else {
        let pair = load_data(cfg)?;
        info!(
            "training base model: {} classes, {} source / {} target images",
            pair.n_classes(),
            pair.source.len(),
            pair.target.len()
        );
        let model = train_base::<T>(&pair, cfg.base.arch, &cfg.base.train)?;
        model.save(&path)?;
        write_history_csv(&inv.layout.base_dir().join(LOG_FILE), model.history())?;
        if let Some(last) = model.history().last() {
            info!(
                "base model: source accuracy {:.3}, target accuracy {}",
                last.source_accuracy,
                last.target_accuracy.map_or("n/a".into(), |a| format!("{a:.3}"))
            );
            summary["final_epoch"] = serde_json::to_value(last)?;
        }
    }
    let mut m = inv.manifest("train-base");
    m.outputs.push(Artifact::checkpoint("base", &path)?);
    m.outputs.push(Artifact::file("log", &inv.layout.base_dir().join(LOG_FILE)));
    m.summary = summary;
    m.seconds = started.elapsed().as_secs_f64();
    m.write(&inv.layout.base_dir())
}

fn read_records(dir: &Path) -> anyhow::Result<Vec<CheckpointRecord>> {
    let path = dir.join(RECORDS_FILE);
    if !path.is_file() {
        return Ok(Vec::new());
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Highest agreement, earliest round on ties.
fn best_record(records: &[CheckpointRecord]) -> Option<&CheckpointRecord> {
    records
        .iter()
        .fold(None, |best: Option<&CheckpointRecord>, r| match best {
            Some(b) if b.metrics.agreement >= r.metrics.agreement => Some(b),
            _ => Some(r),
        })
}

pub fn train_interp_cmd<T: Scalar>(inv: &Invocation) -> anyhow::Result<()> {
    require_seed(inv, "train-interp")?;
    let started = Instant::now();
    let cfg = &inv.cfg;
    let pair = load_data(cfg)?;
    let base = load_base::<T>(inv, &pair)?;
    let dir = inv.layout.interp_dir();
    if inv.force && dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    let latest = dir.join(LATEST_CHECKPOINT);
    let model = if latest.is_file() {
        let m = InterpretiveModel::load(&latest, base.clone())
            .with_context(|| format!("resuming from {} (pass --force to start over)", latest.display()))?;
        if m.config() != &cfg.interp {
            return Err(Error::InvalidConfig(format!(
                "{} was trained with a different configuration; pass --force to start over",
                latest.display()
            ))
            .into());
        }
        info!("resuming after round {} of {}", m.rounds_done(), cfg.interp.rounds());
        m
    } else {
        InterpretiveModel::new(base.clone(), cfg.interp)?
    };
    let done = model.rounds_done();
    let mut records: Vec<CheckpointRecord> = read_records(&dir)?.into_iter().filter(|r| r.round <= done).collect();
    info!("caching backbone features");
    let ctx = TrainingContext::prepare(&base, &pair, cfg.interp.flip)?;
    let outcome = run_protocol(
        model,
        &ctx,
        &ProtocolOptions {
            checkpoint_dir: Some(dir.clone()),
        },
    )?;
    for r in &outcome.checkpoints {
        info!(
            "round {}: agreement {:.3}, fidelity {:.4}",
            r.round, r.metrics.agreement, r.metrics.fidelity
        );
    }
    records.extend(outcome.checkpoints.iter().cloned());
    if records.is_empty() {
        outcome.model.save(&latest)?;
    }
    if let Some(best) = best_record(&records) {
        std::fs::copy(&best.path, dir.join(BEST_CHECKPOINT))?;
    }
    std::fs::write(dir.join(RECORDS_FILE), serde_json::to_string_pretty(&records)? + "\n")?;
    write_log_csv(&dir.join(LOG_FILE), outcome.model.log())?;
    for w in outcome.model.warnings() {
        warn!("{w}");
    }

    let metrics = outcome.model.evaluate(&ctx)?;
    println!("{}", format_metrics(&metrics));
    let mut m = inv.manifest("train-interp");
    m.inputs.push(Artifact::checkpoint("base", &inv.layout.base_checkpoint())?);
    for r in &records {
        m.outputs.push(Artifact {
            role: format!("round {}", r.round),
            path: r.path.clone(),
            content_hash: Some(r.content_hash.clone()),
        });
    }
    m.outputs.push(Artifact::checkpoint("latest", &latest)?);
    if dir.join(BEST_CHECKPOINT).is_file() {
        m.outputs.push(Artifact::checkpoint("best", &dir.join(BEST_CHECKPOINT))?);
    }
    m.outputs.push(Artifact::file("log", &dir.join(LOG_FILE)));
    m.summary = json!({ "resumed_after_round": done, "metrics": metrics, "best_round": best_record(&records).map(|r| r.round) });
    m.seconds = started.elapsed().as_secs_f64();
    m.write(&dir)
}

fn format_metrics(m: &protoda::trainer::Metrics) -> String {
    let f = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    format!(
        "agreement {:.4}  fidelity {:.4}  target acc h_p {}  h_f {}  source acc h_p {}  h_f {}",
        m.agreement,
        m.fidelity,
        f(m.acc_hp),
        f(m.acc_hf),
        f(m.source_acc_hp),
        f(m.source_acc_hf)
    )
}

pub fn explain_cmd<T: Scalar>(inv: &Invocation) -> anyhow::Result<()> {
    let started = Instant::now();
    let pair = load_data(&inv.cfg)?;
    let base = load_base::<T>(inv, &pair)?;
    let (model, ckpt) = load_interp(inv, base.clone())?;
    let ctx = TrainingContext::prepare(&base, &pair, false)?;
    let dir = inv.layout.report_dir();
    let report = emit_report(&model, &ctx, &dir, &inv.cfg.explain)?;
    let flagged: usize = report
        .metadata
        .prototypes
        .iter()
        .flat_map(|e| &e.matched.target)
        .filter(|x| x.mismatch == Some(true))
        .count();
    for w in &report.metadata.warnings {
        warn!("{w}");
    }
    println!(
        "{} prototype cards, {} category panels, {flagged} flagged target matches -> {}",
        report.cards,
        report.panels,
        dir.display()
    );
    let mut m = inv.manifest("explain");
    m.inputs.push(Artifact::checkpoint("base", &inv.layout.base_checkpoint())?);
    m.inputs.push(Artifact::checkpoint("interpretive", &ckpt)?);
    m.outputs = report.files.iter().map(|f| Artifact::file("report", f)).collect();
    m.summary = json!({ "cards": report.cards, "panels": report.panels, "flagged": flagged });
    m.seconds = started.elapsed().as_secs_f64();
    m.write(&dir)
}

/// Category name or index.
fn category_index(categories: &[String], key: &str) -> protoda::Result<usize> {
    if let Some(i) = categories.iter().position(|c| c == key) {
        return Ok(i);
    }
    match key.parse::<usize>() {
        Ok(i) if i < categories.len() => Ok(i),
        _ => Err(Error::InvalidArgument(format!("unknown category {key:?}; expected one of {categories:?}"))),
    }
}

fn curve_stem(scope: Scope, categories: &[String]) -> String {
    match scope {
        Scope::AllClasses => "all_classes".into(),
        Scope::Category(k) => format!("category_{}", category_dir(&categories[k])),
    }
}

pub fn inspect_cmd<T: Scalar>(inv: &Invocation) -> anyhow::Result<()> {
    let started = Instant::now();
    let cfg = &inv.cfg;
    let pair = load_data(cfg)?;
    let base = load_base::<T>(inv, &pair)?;
    let (model, ckpt) = load_interp(inv, base.clone())?;
    let ctx = TrainingContext::prepare(&base, &pair, false)?;
    let dir = inv.layout.inspect_dir();
    let categories = base.categories().to_vec();
    let scopes: Vec<Scope> = if cfg.inspect.categories.is_empty() {
        std::iter::once(Scope::AllClasses)
            .chain((0..categories.len()).map(Scope::Category))
            .collect()
    } else {
        cfg.inspect
            .categories
            .iter()
            .map(|k| category_index(&categories, k).map(Scope::Category))
            .collect::<protoda::Result<_>>()?
    };
    let mut m = inv.manifest("inspect");
    let mut curves = serde_json::Map::new();
    for scope in scopes {
        let curve = removal_sweep(&model, &ctx, scope, cfg.inspect.cumulative)?;
        let stem = curve_stem(scope, &categories);
        write_curve_artifacts(&dir, &stem, &curve)?;
        let rho = if curve.spearman.is_nan() {
            curve.note.clone().unwrap_or_else(|| "undefined".into())
        } else {
            format!("{:.3}", curve.spearman)
        };
        println!("{stem}: {} steps, spearman {rho}", curve.steps.len() - 1);
        for ext in ["csv", "json", "png"] {
            m.outputs.push(Artifact::file("curve", &dir.join(format!("{stem}.{ext}"))));
        }
        curves.insert(stem, serde_json::to_value(&curve)?);
    }
    if cfg.inspect.ablation {
        let sub = dir.join("ablation");
        info!("fidelity ablation: training with gamma = {} and gamma = 0", cfg.interp.gamma);
        let rep = fidelity_ablation(
            base.clone(),
            &ctx,
            &cfg.interp,
            &ProtocolOptions {
                checkpoint_dir: Some(sub.clone()),
            },
        )?;
        write_curve_artifacts(&sub, "full", &rep.full.curve)?;
        write_curve_artifacts(&sub, "no_fidelity", &rep.without_fidelity.curve)?;
        std::fs::write(sub.join("ablation.json"), serde_json::to_string_pretty(&rep)? + "\n")?;
        println!(
            "ablation: fidelity {:.4} (gamma = {}) vs {:.4} (gamma = 0)",
            rep.full.metrics.fidelity, rep.full.gamma, rep.without_fidelity.metrics.fidelity
        );
        m.outputs.push(Artifact::file("ablation", &sub.join("ablation.json")));
    }
    m.inputs.push(Artifact::checkpoint("base", &inv.layout.base_checkpoint())?);
    m.inputs.push(Artifact::checkpoint("interpretive", &ckpt)?);
    m.summary = serde_json::Value::Object(curves);
    m.seconds = started.elapsed().as_secs_f64();
    m.write(&dir)
}

pub fn eval_cmd<T: Scalar>(inv: &Invocation) -> anyhow::Result<()> {
    let started = Instant::now();
    let pair = load_data(&inv.cfg)?;
    let base = load_base::<T>(inv, &pair)?;
    let (model, ckpt) = load_interp(inv, base.clone())?;
    let ctx = TrainingContext::prepare(&base, &pair, false)?;
    let metrics = model.evaluate(&ctx)?;
    println!("{}", format_metrics(&metrics));
    let dir = inv.layout.eval_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)? + "\n")?;
    let mut m = inv.manifest("eval");
    m.inputs.push(Artifact::checkpoint("base", &inv.layout.base_checkpoint())?);
    m.inputs.push(Artifact::checkpoint("interpretive", &ckpt)?);
    m.outputs.push(Artifact::file("metrics", &dir.join(METRICS_FILE)));
    m.summary = serde_json::to_value(metrics)?;
    m.seconds = started.elapsed().as_secs_f64();
    m.write(&dir)
}
