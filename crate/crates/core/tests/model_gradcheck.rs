mod common;

use neuroprune_core::autodiff::{accumulate_grads, finite_diff_check, sample_coords, Tape};
use neuroprune_core::data::{collate, gen_retrieval};
use neuroprune_core::model::{Batch, Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        ffn_dim: 16,
        heads: 2,
        layers: 2,
        vocab: 12,
        max_len: 9,
        n_classes: 3,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn batch() -> Batch {
    let ex = gen_retrieval(5, 6, 2, 12, 3).unwrap();
    collate(&ex.iter().collect::<Vec<_>>())
}

fn loss64(m: &Model, b: &Batch) -> f64 {
    let mut tape = Tape::<f64>::new();
    let l = m.task_loss(&mut tape, b).unwrap();
    tape.value(l).item()
}

#[test]
fn task_loss_gradients_match_finite_differences() {
    let mut m = Model::init(&small()).unwrap();
    let b = batch();
    let mut tape = Tape::<f64>::new();
    let l = m.task_loss(&mut tape, &b).unwrap();
    let g = tape.backward(l).unwrap();
    accumulate_grads(&tape, &g, &mut m);
    let coords = sample_coords(&m, 6, &mut ChaCha8Rng::seed_from_u64(1), |_, _, _| false);
    let report = finite_diff_check(&mut m, &coords, 1e-3, |m| loss64(m, &b));
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn attention_matrix_gradient_is_nonzero_and_correct() {
    let mut m = Model::init(&small()).unwrap();
    let b = batch();
    let mut tape = Tape::<f64>::new();
    let l = m.task_loss(&mut tape, &b).unwrap();
    let g = tape.backward(l).unwrap();
    accumulate_grads(&tape, &g, &mut m);
    let a_index = 2;
    assert_eq!(m.blocks[0].attn.a.name, "blocks.0.attn.a");
    let coords: Vec<(usize, usize)> = (0..m.blocks[0].attn.a.value.len()).step_by(7).map(|e| (a_index, e)).collect();
    let report = finite_diff_check(&mut m, &coords, 1e-3, |m| loss64(m, &b));
    assert!(report.passes(1e-4), "{report:?}");
    assert!(m.blocks[0].attn.a.grad.data().iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn regularized_objective_gradients_match_finite_differences() {
    for seed in [3, 4] {
        let report = common::full_objective_gradcheck(seed, 200);
        assert_eq!(report.checked, 200);
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}
