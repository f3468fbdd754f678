#![allow(dead_code)]

use std::path::Path;

use conceptvae::model::ModelConfig;
use conceptvae_cli::ExperimentConfig;

/// 8×8 frames, T=3, 30 subjects: the whole pipeline runs in about a second.
pub fn tiny_experiment(dir: &Path, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.model = ModelConfig::tiny();
    cfg.seed = seed;
    cfg.out_dir = dir.to_path_buf();
    cfg.train.stage_epochs = [2, 1, 1];
    cfg.train.pool_epochs = 1;
    cfg.train.learning_rate = 3e-3;
    cfg.train.batch_size = 4;
    cfg.cohort.n_subjects = 30;
    cfg.pool.n = 6;
    cfg
}

pub const TINY_TOML: &str = r#"schema_version = 1
seed = 5

[model]
slices = 3
frames = 3
height = 8
width = 8
latent_dim = 4
feature_maps = [2, 3]
res_blocks = [1, 1]
embed_dim = 4
hidden = [8, 4]
concepts = [{ name = "SF", start = 0, size = 2 }]

[train]
stage_epochs = [2, 1, 1]
pool_epochs = 1
learning_rate = 3e-3
batch_size = 4

[cohort]
n_subjects = 30

[pool]
n = 6
"#;
