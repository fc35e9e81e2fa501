//! Small model and corpus shared by the integration tests.
#![allow(dead_code)]

use unimlip::datagen::{generate_corpus, CorpusSpec, Sample, Vocabulary};
use unimlip::encoders::ModelConfig;
use unimlip::model::Model;
use unimlip::trainer::{TrainConfig, TrainState};

pub const SIZE: usize = 16;
pub const MAX_LEN: usize = 8;

pub fn model_config() -> ModelConfig {
    ModelConfig {
        image_size: SIZE,
        vision_widths: [4, 4, 8, 8],
        pool_heads: 2,
        embed_dim: 16,
        max_len: MAX_LEN,
        text_width: 16,
        text_heads: 2,
        text_layers: 1,
        text_ffn: 32,
        fusion_width: 16,
        fusion_heads: 2,
        fusion_layers: 1,
        fusion_ffn: 32,
        ..ModelConfig::default()
    }
}

pub fn corpus(n: usize, seed: u64) -> Vec<Sample> {
    let spec = CorpusSpec {
        n_samples: n,
        image_size: SIZE,
        seed,
        ..CorpusSpec::default()
    };
    generate_corpus(&spec, &Vocabulary::build(), MAX_LEN).unwrap()
}

pub fn train_config() -> TrainConfig {
    let mut c = TrainConfig {
        phase1_epochs: 1,
        phase2_epochs: 1,
        batch_size: 4,
        base_lr: 1e-3,
        ..TrainConfig::default()
    };
    // The 16-pixel model ends in a 1x1 feature map.
    c.perturb.dropblock_size = 1;
    c
}

pub fn model(seed: u64) -> Model {
    Model::new(model_config(), Vocabulary::build().len(), seed).unwrap()
}

pub fn state(seed: u64, config: &TrainConfig) -> TrainState {
    TrainState::new(model(seed), config)
}

pub fn refs(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().collect()
}
