//! Independent reference implementations shared by the integration tests
//! and the acceptance suite.
#![allow(dead_code)]

use neuroprune_core::autodiff::{accumulate_grads, finite_diff_check, sample_coords, FdReport, Tape};
use neuroprune_core::data::{collate, gen_retrieval};
use neuroprune_core::model::{Batch, Model, ModelConfig};
use neuroprune_core::regularizers::{total_regularized_loss, RegConfig};
use neuroprune_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect()
}

/// `Σ_rows (n_row / row_len) · Σ|w|` straight from the definition, for one matrix.
fn weighted_rows(m: &[Vec<f64>], eps: f64, offset: f64) -> f64 {
    let mut total = 0.0;
    for row in m {
        let mut n = offset;
        let mut l1 = 0.0;
        for &w in row {
            if w.abs() < eps {
                n += 1.0;
            }
            l1 += w.abs();
        }
        total += n * l1 / row.len() as f64;
    }
    total
}

pub fn brute_r_mlp(l_in: &Tensor, l_out: &Tensor, eps: f32) -> f64 {
    brute_r_mlp_offset(l_in, l_out, eps, 0.0)
}

pub fn brute_r_mlp_offset(l_in: &Tensor, l_out: &Tensor, eps: f32, offset: f32) -> f64 {
    let (eps, offset) = (eps as f64, offset as f64);
    weighted_rows(&to_rows(l_in), eps, offset) + weighted_rows(&to_rows(l_out), eps, offset)
}

pub fn brute_r_attn(a: &Tensor) -> f64 {
    to_rows(a).iter().map(|row| row.iter().map(|v| v.abs()).sum::<f64>().sqrt()).sum()
}

/// Central difference of `f` at element `e` of `m`, using the f32-rounded step.
pub fn central_diff(m: &Tensor, e: usize, h: f32, f: impl Fn(&Tensor) -> f64) -> f64 {
    let mut p = m.clone();
    let x = m.data()[e];
    p.data_mut()[e] = x + h;
    let fp = f(&p);
    p.data_mut()[e] = x - h;
    let fm = f(&p);
    fd_quotient(fp, fm, x + h, x - h)
}

pub fn fd_quotient(fp: f64, fm: f64, xp: f32, xm: f32) -> f64 {
    (fp - fm) / (xp as f64 - xm as f64)
}

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1e-8)
}

/// Random matrix with a share of exact zeros so near-zero counts are nonzero.
pub fn sparse_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, zero_p: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        if rng.gen_bool(zero_p) {
            0.0
        } else {
            let v: f32 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        }
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every symmetric 0/1 matrix with unit diagonal of size `k`.
pub fn all_similarity_matrices(k: usize) -> Vec<Vec<Vec<u8>>> {
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| ((i + 1)..k).map(move |j| (i, j))).collect();
    (0..(1u32 << pairs.len()))
        .map(|mask| {
            let mut s = vec![vec![0u8; k]; k];
            for (i, row) in s.iter_mut().enumerate() {
                row[i] = 1;
            }
            for (b, &(i, j)) in pairs.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    s[i][j] = 1;
                    s[j][i] = 1;
                }
            }
            s
        })
        .collect()
}

/// Row `a` contains row `b`: every 1 in `b` is a 1 in `a`.
pub fn contains(a: &[u8], b: &[u8]) -> bool {
    a.iter().zip(b).all(|(&x, &y)| x >= y)
}

/// Checks the three dominating-scan properties for one matrix given the
/// `(pruned, dominator)` pairs and kept set. Returns a description of the
/// first violation.
pub fn check_domination(s: &[Vec<u8>], merges: &[(usize, usize)], kept: &[usize]) -> Result<(), String> {
    let k = s.len();
    for &(p, d) in merges {
        let ok = contains(&s[d], &s[p]) && (s[d] != s[p] || d > p);
        if !ok {
            return Err(format!("dominator {d} of {p} violates containment"));
        }
    }
    for v in 0..k {
        if !kept.iter().any(|&u| u == v || s[u][v] == 1) {
            return Err(format!("head {v} neither kept nor adjacent to a kept head"));
        }
    }
    // acyclic: following pruned -> dominator never revisits a head
    for &(start, _) in merges {
        let mut seen = vec![false; k];
        let mut cur = start;
        while let Some(&(_, next)) = merges.iter().find(|&&(p, _)| p == cur) {
            if seen[cur] {
                return Err(format!("merge cycle through {cur}"));
            }
            seen[cur] = true;
            cur = next;
        }
    }
    Ok(())
}

/// Task loss in f64 plus both penalties from the brute-force oracles.
pub fn objective_oracle(m: &Model, batch: &Batch, reg: &RegConfig) -> f64 {
    let mut tape = Tape::<f64>::new();
    let l = m.task_loss(&mut tape, batch).unwrap();
    let mut total = tape.value(l).item();
    for b in &m.blocks {
        total += reg.alpha as f64 * brute_r_attn(&b.attn.a.value);
        total += reg.beta as f64 * brute_r_mlp_offset(&b.mlp.l_in.value, &b.mlp.l_out.value, reg.eps_count, reg.count_offset);
    }
    total
}

/// Full regularized objective on a d=8, two-layer, two-head model: analytic
/// gradients against central differences over `n_coords` coordinates.
pub fn full_objective_gradcheck(seed: u64, n_coords: usize) -> FdReport {
    let cfg = ModelConfig {
        embed_dim: 8,
        ffn_dim: 16,
        heads: 2,
        layers: 2,
        vocab: 12,
        max_len: 9,
        n_classes: 3,
        seed,
        ..ModelConfig::default()
    };
    let mut m = Model::init(&cfg).unwrap();
    // plant exact zeros so the degree counts are not all equal
    let mut r = rng(seed ^ 0x51);
    for b in &mut m.blocks {
        for t in [&mut b.mlp.l_in.value, &mut b.mlp.l_out.value, &mut b.attn.a.value] {
            for v in t.data_mut() {
                if r.gen_bool(0.25) {
                    *v = 0.0;
                }
            }
        }
    }
    let reg = RegConfig {
        alpha: 0.05,
        beta: 0.05,
        eps_count: 1e-4,
        count_offset: 1.0,
        ..RegConfig::default()
    };
    let ex = gen_retrieval(seed, 6, 2, 12, 3).unwrap();
    let batch = collate(&ex.iter().collect::<Vec<_>>());

    m.zero_grads();
    let mut tape = Tape::<f64>::new();
    let l = m.task_loss(&mut tape, &batch).unwrap();
    let task = tape.value(l).item();
    let grads = tape.backward(l).unwrap();
    accumulate_grads(&tape, &grads, &mut m);
    total_regularized_loss(&mut m, task, &reg).unwrap();

    let h = 1e-3f32;
    // stay clear of the kinks of |w| and of the count threshold
    let mut coords = sample_coords(&m, 40, &mut r, |_, _, w| w.abs() < 4.0 * h);
    coords.shuffle(&mut r);
    coords.truncate(n_coords);
    assert_eq!(coords.len(), n_coords, "not enough eligible coordinates");
    finite_diff_check(&mut m, &coords, h, |m| objective_oracle(m, &batch, &reg))
}
