#![allow(dead_code)]

pub mod scenes;

use std::path::{Path, PathBuf};

use selfrecon::dataworld::{
    build_pseudo_real_set, build_synthetic_set, load_eval_set, load_real_set, load_synthetic_set, DataConfig,
    EvalInstance, RealSample, SyntheticSample, TrainingReader,
};
use selfrecon::evalharness::EvalConfig;
use selfrecon::reconstructor::ModelConfig;
use selfrecon::selftrain::{Ablation, OptimizerConfig, TrainConfig};

/// Reduced model and render sizes for single-core CPU runs.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        input_resolution: 32,
        patch_size: 8,
        token_width: 32,
        blocks: 1,
        triplane_res: 16,
        triplane_channels: 8,
        plane_tokens: 4,
        decoder_hidden: vec![32],
    }
}

pub fn desk_data_config() -> DataConfig {
    DataConfig {
        resolution: 32,
        eval_resolution: 32,
        samples_per_ray: 48,
        supervision_views: 4,
        eval_views: 5,
        ..DataConfig::default()
    }
}

pub fn desk_train_config(seed: u64, j_max: usize) -> TrainConfig {
    TrainConfig {
        model: desk_model(),
        optimizer: OptimizerConfig { lr: 2e-3, warmup: 20, ..OptimizerConfig::default() },
        j_max,
        batch_size: 4,
        render_resolution: 16,
        samples_per_ray: 16,
        semantic_views: 2,
        seed,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

pub fn desk_eval_config() -> EvalConfig {
    EvalConfig { render_resolution: 32, samples_per_ray: 32, ..EvalConfig::default() }
}

pub fn variant(seed: u64, j_max: usize, ablation: Option<Ablation>) -> TrainConfig {
    let mut cfg = desk_train_config(seed, j_max);
    if let Some(a) = ablation {
        cfg.apply_ablation(a);
    }
    cfg
}

pub struct DeskData {
    pub root: PathBuf,
    pub synth: Vec<SyntheticSample>,
    pub real: Vec<RealSample>,
    pub eval: Vec<EvalInstance>,
}

pub fn build_desk_data(root: &Path, n_synth: usize, n_real: usize, seed: u64) -> DeskData {
    let cfg = desk_data_config();
    let synth_dir = build_synthetic_set(root, n_synth, seed, &cfg).unwrap();
    let real_dir = build_pseudo_real_set(root, n_real, seed, &cfg).unwrap();
    let reader = TrainingReader::new();
    DeskData {
        root: root.to_path_buf(),
        synth: load_synthetic_set(&synth_dir, &reader).unwrap(),
        real: load_real_set(&real_dir, &reader).unwrap(),
        eval: load_eval_set(&real_dir).unwrap(),
    }
}
