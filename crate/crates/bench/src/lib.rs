//! Shared fixtures for the benchmarks.

use vlseg::harness::{Batch, Model};
use vlseg::synthdata::{generate_dataset, Scene, Vocab};
use vlseg::{init_params, ModelConfig, ModelParams};

pub struct Fixture {
    pub model: Model,
    pub params: ModelParams,
    pub scenes: Vec<Scene>,
    pub vocab: Vocab,
}

impl Fixture {
    /// Default config with `n` generated scenes.
    pub fn new(cfg: &ModelConfig, n: usize) -> Self {
        let model = Model::new(cfg).expect("valid config");
        let (params, _) = init_params(cfg, 0).expect("valid config");
        let scenes = generate_dataset(n, 0, cfg.image_size).expect("generation");
        Self { model, params, scenes, vocab: Vocab::standard() }
    }

    pub fn batch(&self) -> Batch {
        let refs: Vec<&Scene> = self.scenes.iter().collect();
        Batch::from_scenes(&refs, &self.vocab, self.model.cfg.max_tokens).expect("batch")
    }
}
