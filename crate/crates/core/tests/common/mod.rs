#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use protoda::base_model::{train_base, ArchConfig, BaseModel, BaseTrainConfig};
use protoda::datasets::{generate_synthetic_pair, DomainPair, SyntheticSpec};
use protoda::trainer::{run_protocol, InterpretiveModel, ProtocolOptions, ProtocolOutcome, TrainConfig, TrainingContext};

pub struct Trained {
    pub base: Arc<BaseModel<f32>>,
    pub base_hash: String,
    pub ctx: TrainingContext<'static, f32>,
    pub outcome: ProtocolOutcome<f32>,
    pub checkpoint_dir: PathBuf,
    pub seconds: f64,
}

pub fn pair() -> &'static DomainPair {
    static PAIR: OnceLock<DomainPair> = OnceLock::new();
    PAIR.get_or_init(|| generate_synthetic_pair(&SyntheticSpec::default()).expect("synthetic pair"))
}

pub fn base() -> &'static Arc<BaseModel<f32>> {
    static BASE: OnceLock<Arc<BaseModel<f32>>> = OnceLock::new();
    BASE.get_or_init(|| {
        Arc::new(train_base::<f32>(pair(), ArchConfig::synthetic(), &BaseTrainConfig::default()).expect("base training"))
    })
}

/// The default synthetic run: 5 classes, K = 10, 100 epochs, push every 10.
pub fn trained() -> &'static Trained {
    static RUN: OnceLock<Trained> = OnceLock::new();
    RUN.get_or_init(|| {
        let base = base().clone();
        let base_hash = base.content_hash();
        let cfg = TrainConfig::default();
        let ctx = TrainingContext::prepare(&base, pair(), cfg.flip).expect("context");
        let dir = tempfile::tempdir().expect("tempdir").keep();
        let start = std::time::Instant::now();
        let outcome = run_protocol(
            InterpretiveModel::new(base.clone(), cfg).expect("model"),
            &ctx,
            &ProtocolOptions {
                checkpoint_dir: Some(dir.clone()),
            },
        )
        .expect("protocol");
        Trained {
            base,
            base_hash,
            ctx,
            outcome,
            checkpoint_dir: dir,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}
