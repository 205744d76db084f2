mod support;

use gvp_core::gvp::Variant;
use gvp_core::model::{forward_pair, forward_states, GvpGnnModel, ModelConfig, TaskMode};
use rand_chacha::ChaCha8Rng;
use support::{max_rel_diff, oracle, random_graph, random_tagged_graph};

fn flatten_states(layers: &[Vec<gvp_core::SvTuple>]) -> Vec<f64> {
    layers.iter().flatten().flat_map(|x| x.s.0.iter().copied().chain(x.v.0.iter().flatten().copied())).collect()
}

fn flatten_oracle(layers: &[Vec<oracle::Node>]) -> Vec<f64> {
    layers.iter().flatten().flat_map(|x| x.s.iter().copied().chain(x.v.iter().flatten().copied())).collect()
}

fn check(model: &GvpGnnModel, seed: u64, n: usize) -> f64 {
    let graph = if model.config().task_mode == TaskMode::NodeReadout { random_tagged_graph(seed, n) } else { random_graph(seed, n) };
    let got = forward_states(model, &graph).unwrap();
    let want = oracle::run(model, &graph);
    max_rel_diff(&got.output, &want.output)
        .max(max_rel_diff(&got.pooled, &want.pooled))
        .max(max_rel_diff(&flatten_states(&got.layers), &flatten_oracle(&want.layers)))
}

#[test]
fn default_model_matches_straight_line_evaluation() {
    let model = GvpGnnModel::new(ModelConfig::default(), 11).unwrap();
    for seed in 0..10 {
        let dev = check(&model, seed, 1 + seed as usize % 5);
        assert!(dev <= 1e-12, "seed {seed}: {dev:e}");
    }
}

#[test]
fn original_variant_and_tagged_readout_match() {
    let cfg = ModelConfig { variant: Variant::Original, task_mode: TaskMode::NodeReadout, node_dims: (20, 6), num_layers: 3, ..ModelConfig::default() };
    let model = GvpGnnModel::new(cfg, 4).unwrap();
    for seed in 0..10 {
        let dev = check(&model, 100 + seed, 1 + seed as usize % 5);
        assert!(dev <= 1e-12, "seed {seed}: {dev:e}");
    }
}

#[test]
fn paired_mode_matches() {
    let cfg = ModelConfig { task_mode: TaskMode::Paired, output_dim: 2, ..ModelConfig::default() };
    let model = GvpGnnModel::new(cfg, 8).unwrap();
    for seed in 0..4 {
        let (a, b) = (random_graph(200 + seed, 3), random_graph(300 + seed, 5));
        let got = forward_pair::<ChaCha8Rng>(&model, &a, &b, None).unwrap();
        let dev = max_rel_diff(&got, &oracle::run_pair(&model, &a, &b));
        assert!(dev <= 1e-12, "seed {seed}: {dev:e}");
    }
}

#[test]
fn trained_weights_still_match() {
    // Non-default norm parameters and biases exercise every term.
    let mut model = GvpGnnModel::new(ModelConfig { node_dims: (10, 4), num_layers: 2, ..ModelConfig::default() }, 2).unwrap();
    let mut k = 0.0;
    for (_, t) in model.named_tensors_mut() {
        for x in t.data_mut() {
            k += 1.0;
            *x += 0.05 * (k * 0.7f64).sin();
        }
    }
    for seed in 0..5 {
        let dev = check(&model, 400 + seed, 5);
        assert!(dev <= 1e-12, "seed {seed}: {dev:e}");
    }
}
