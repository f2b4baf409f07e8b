//! Shared builders for the pipeline benchmarks.

use ndarray::Array3;

use cphead::cp::CPJointDist;
use cphead::model::Model;
use cphead::rng::SplitMix64;

pub fn demo_dist(horizon: usize, rank: usize, vocab: usize, seed: u64) -> CPJointDist {
    let mut rng = SplitMix64::new(seed);
    let weights: Vec<f64> = (0..rank).map(|_| rng.next_range(-1.0, 1.0)).collect();
    let mut factors = Array3::zeros((horizon, rank, vocab));
    for x in factors.iter_mut() {
        *x = rng.next_range(-2.0, 2.0);
    }
    CPJointDist::from_logits(&weights, &factors).expect("valid logits")
}

pub fn demo_model(vocab: usize, embed_dim: usize, horizon: usize, rank: usize) -> Model {
    Model::init_scratch(vocab, embed_dim, horizon, rank, 0.7, 42).expect("valid dims")
}
