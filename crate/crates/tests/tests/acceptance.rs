//! End-to-end acceptance suite. Prints one line per criterion and exits
//! nonzero if any criterion fails. Run alone with
//! `cargo test --release -p neuroprune-tests --test acceptance`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::*;
use neuroprune_cli::commands::{cmd_train, CHECKPOINT, METRICS};
use neuroprune_cli::RunConfig;
use neuroprune_core::checkpoint;
use neuroprune_core::headprune::{elim_redundant, elim_redundant_model, find_dominating, plan_merges, MergeTarget, SimilarityMatrix};
use neuroprune_core::model::{AttnScale, Model, ModelConfig};
use neuroprune_core::regularizers::{r_attn, r_attn_grad, r_mlp, r_mlp_grad};
use neuroprune_core::tensor::Tensor;
use neuroprune_core::trainer::{train, EpochReport, TrainConfig};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    if took > limit {
        return Err(format!("took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs()));
    }
    Ok(())
}

fn workdir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn config_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn regularizers() -> Outcome {
    let start = Instant::now();
    let eps = 1e-4;
    let (mut worst_value, mut worst_grad) = (0.0f64, 0.0f64);
    let mut r = rng(101);
    for _ in 0..50 {
        let (d, de) = (r.gen_range(2..10), r.gen_range(2..12));
        let l_in = sparse_matrix(&mut r, de, d, 0.3);
        let l_out = sparse_matrix(&mut r, d, de, 0.3);
        let a = sparse_matrix(&mut r, d, 3 * de, 0.2);
        let rel = |got: f64, want: f64| (got - want).abs() / want.abs().max(1e-12);
        worst_value = worst_value.max(rel(r_mlp(&l_in, &l_out, eps).unwrap(), brute_r_mlp(&l_in, &l_out, eps)));
        worst_value = worst_value.max(rel(r_attn(&a), brute_r_attn(&a)));

        let (gi, go) = r_mlp_grad(&l_in, &l_out, eps).unwrap();
        for e in (0..l_in.len()).filter(|&e| l_in.data()[e] != 0.0) {
            let fd = central_diff(&l_in, e, 1e-2, |m| brute_r_mlp(m, &l_out, eps));
            worst_grad = worst_grad.max((gi.data()[e] as f64 - fd).abs() / fd.abs().max(1.0));
        }
        for e in (0..l_out.len()).filter(|&e| l_out.data()[e] != 0.0) {
            let fd = central_diff(&l_out, e, 1e-2, |m| brute_r_mlp(&l_in, m, eps));
            worst_grad = worst_grad.max((go.data()[e] as f64 - fd).abs() / fd.abs().max(1.0));
        }
        let ga = r_attn_grad(&a, 1e-12);
        for e in (0..a.len()).filter(|&e| a.data()[e] != 0.0) {
            let fd = central_diff(&a, e, 1e-3, brute_r_attn);
            worst_grad = worst_grad.max(rel_err(ga.data()[e] as f64, fd));
        }
    }
    within(Duration::from_secs(10), start)?;
    ensure(
        worst_value <= 1e-6 && worst_grad <= 1e-4,
        format!("max value rel err {worst_value:.2e} (tol 1e-6), max grad rel err {worst_grad:.2e} (tol 1e-4)"),
    )
}

fn objective_gradcheck() -> Outcome {
    let start = Instant::now();
    let report = full_objective_gradcheck(7, 200);
    within(Duration::from_secs(60), start)?;
    ensure(
        report.checked == 200 && report.passes(1e-4),
        format!("{} coordinates, max rel err {:.2e} (tol 1e-4)", report.checked, report.max_rel_error),
    )
}

fn dominating_oracle() -> Outcome {
    let start = Instant::now();
    let mut n = 0;
    for k in 1..=5 {
        for rows in all_similarity_matrices(k) {
            let d = find_dominating(&SimilarityMatrix::from_rows(&rows).map_err(|e| e.to_string())?);
            let recorded: Vec<(usize, usize)> = (0..k).filter(|&i| d.dominator(i) != i).map(|i| (i, d.dominator(i))).collect();
            let plan = plan_merges(&d);
            check_domination(&rows, &recorded, &plan.kept).map_err(|e| format!("{rows:?}: {e}"))?;
            check_domination(&rows, &plan.merges, &plan.kept).map_err(|e| format!("{rows:?}: {e}"))?;
            n += 1;
        }
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!("{n} matrices, k <= 5"))
}

fn hand_traces() -> Outcome {
    let cases: [(Vec<Vec<u8>>, Vec<usize>); 3] = [
        (vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]], vec![0, 1, 2]),
        (vec![vec![1, 1, 1]; 3], vec![2]),
        (vec![vec![1, 1, 0], vec![1, 1, 1], vec![0, 1, 1]], vec![1]),
    ];
    let mut kept_all = Vec::new();
    for (rows, want) in cases {
        let kept = plan_merges(&find_dominating(&SimilarityMatrix::from_rows(&rows).unwrap())).kept;
        if kept != want {
            return Err(format!("{rows:?}: kept {kept:?}, expected {want:?}"));
        }
        kept_all.push(kept);
    }
    Ok(format!("kept sets {kept_all:?} (0-based)"))
}

fn merge_exactness() -> Outcome {
    let cfg = ModelConfig {
        embed_dim: 16,
        ffn_dim: 32,
        heads: 4,
        layers: 1,
        vocab: 8,
        max_len: 8,
        n_classes: 2,
        seed: 21,
        ..ModelConfig::default()
    };
    let mut model = Model::init(&cfg).unwrap();
    let block = &mut model.blocks[0];
    let copy = block.attn.head_slice(0).unwrap().a_block();
    block.attn.head_slice_mut(2).unwrap().set_a_block(&copy).unwrap();
    let before = block.attn.clone();
    let report = elim_redundant(&mut block.attn, &mut block.mlp, 0.0, MergeTarget::OutputProjection).unwrap();
    let mut r = rng(22);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let rows = r.gen_range(1..9);
        let x = Tensor::from_fn(rows, 16, |_, _| r.gen_range(-3.0f32..3.0));
        let a = before.forward(&x, AttnScale::PerHeadDim).unwrap();
        let b = block.attn.forward(&x, AttnScale::PerHeadDim).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    ensure(
        worst <= 1e-5 && report.pruned.len() == 1 && block.attn.head_ids == vec![1, 2, 3],
        format!("max abs diff {worst:.2e} over 100 inputs, heads left {:?}", block.attn.head_ids),
    )
}

struct TradeRuns {
    dense: EpochReport,
    sparse: EpochReport,
    seconds: f64,
    dir: PathBuf,
}

fn last_report(dir: &Path) -> EpochReport {
    let text = fs::read_to_string(dir.join(METRICS)).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn trade_runs() -> TradeRuns {
    let dir = workdir("trade");
    let start = Instant::now();
    for name in ["dense", "neuroprune"] {
        let mut cfg = RunConfig::load(&config_file(&format!("{name}.toml"))).unwrap();
        cfg.out = dir.join(name);
        cmd_train(&cfg).unwrap();
    }
    TradeRuns {
        dense: last_report(&dir.join("dense")),
        sparse: last_report(&dir.join("neuroprune")),
        seconds: start.elapsed().as_secs_f64(),
        dir,
    }
}

fn sparsity_trade(runs: &TradeRuns) -> Outcome {
    let (d, s) = (&runs.dense, &runs.sparse);
    let gap = d.eval_accuracy - s.eval_accuracy;
    let detail = format!(
        "dense acc {:.1}%, sparse acc {:.1}% at sparsity {:.1}%, gap {gap:.1} pts, both runs {:.0}s",
        d.eval_accuracy,
        s.eval_accuracy,
        100.0 * s.sparsity,
        runs.seconds
    );
    let mut missed = Vec::new();
    if d.eval_accuracy < 95.0 {
        missed.push("dense baseline below 95%");
    }
    if s.sparsity < 0.5 {
        missed.push("sparsity below 50%");
    }
    if gap > 5.0 {
        missed.push("accuracy gap above 5 points");
    }
    if runs.seconds > 900.0 {
        missed.push("over 15 minutes");
    }
    ensure(missed.is_empty(), if missed.is_empty() { detail } else { format!("{detail}; {}", missed.join(", ")) })
}

fn preferential_attachment(runs: &TradeRuns) -> Outcome {
    let (dense, sparse) = (runs.dense.degree_sd, runs.sparse.degree_sd);
    let ratio = sparse / dense.max(1e-12);
    let record = serde_json::json!({ "dense_degree_sd": dense, "sparse_degree_sd": sparse, "ratio": ratio });
    fs::write(runs.dir.join("degree_sd.json"), serde_json::to_string_pretty(&record).unwrap()).unwrap();
    ensure(
        sparse > dense && ratio >= 3.0,
        format!("degree sd {sparse:.2} vs dense {dense:.2}, ratio {ratio:.1} (target >= 3)"),
    )
}

fn epoch_one_duplicates() -> Outcome {
    let mc = RunConfig::load(&config_file("dense.toml")).unwrap();
    let mut model = Model::init(&mc.model).unwrap();
    let k0 = mc.model.heads;
    for b in &mut model.blocks {
        let src = b.attn.head_slice(0).unwrap();
        let mut dst = b.attn.head_slice_mut(k0 - 1).unwrap();
        dst.set_a_block(&src.a_block()).unwrap();
        dst.set_w_o_rows(&src.w_o).unwrap();
    }
    let data = neuroprune_core::data::Dataset::generate(&mc.data, mc.model.vocab, mc.model.n_classes).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        theta: 0.0,
        prune_heads: true,
        ..mc.train.clone()
    };
    let out = train(&mut model, &data, &cfg).unwrap();
    let removed = out.reports[0].prune.total_pruned();
    let later_kept = model.blocks.iter().all(|b| b.attn.head_ids.contains(&(k0 - 1)) && !b.attn.head_ids.contains(&0));
    ensure(
        removed >= mc.model.layers && later_kept,
        format!("{removed} heads removed in epoch 1 over {} layers, later duplicate kept: {later_kept}", mc.model.layers),
    )
}

fn determinism() -> Outcome {
    let dir = workdir("determinism");
    let config = dir.join("run.toml");
    let mut cfg = RunConfig::load(&config_file("neuroprune.toml")).unwrap();
    cfg.data.n_train = 512;
    cfg.data.n_eval = 128;
    cfg.train.epochs = 2;
    cfg.train.theta = 0.05;
    fs::write(&config, cfg.to_toml().unwrap()).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = RunConfig::load(&config).unwrap();
        cfg.out = dir.join(run);
        cmd_train(&cfg).map_err(|e| format!("{e:#}"))?;
        outputs.push((fs::read(cfg.out.join(METRICS)).unwrap(), fs::read(cfg.out.join(CHECKPOINT)).unwrap()));
    }
    ensure(
        outputs[0] == outputs[1],
        format!("metrics {} bytes, checkpoint {} bytes, identical: {}", outputs[0].0.len(), outputs[0].1.len(), outputs[0] == outputs[1]),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let mc = RunConfig::default().model;
    let mut model = Model::init(&mc).unwrap();
    let identical = |m: &Model| {
        let bytes = checkpoint::to_bytes(m).unwrap();
        checkpoint::to_bytes(&checkpoint::from_bytes(&bytes).unwrap()).unwrap() == bytes
    };
    let fresh = identical(&model);
    for (l, b) in model.blocks.iter_mut().enumerate() {
        for h in 0..l {
            let src = b.attn.head_slice(h).unwrap().a_block();
            b.attn.head_slice_mut(h + 1).unwrap().set_a_block(&src).unwrap();
        }
    }
    elim_redundant_model(&mut model, 0.0, MergeTarget::OutputProjection).unwrap();
    let heads = model.heads_per_layer();
    let ragged = identical(&model);
    let dir = workdir("checkpoint");
    let (p1, p2) = (dir.join("one.nprn"), dir.join("two.nprn"));
    checkpoint::save(&model, &p1).unwrap();
    checkpoint::save(&checkpoint::load(&p1).unwrap(), &p2).unwrap();
    let on_disk = fs::read(&p1).unwrap() == fs::read(&p2).unwrap();
    ensure(
        fresh && ragged && on_disk && heads.windows(2).any(|w| w[0] != w[1]),
        format!("fresh {fresh}, pruned heads {heads:?} {ragged}, via files {on_disk}"),
    )
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("criterion {n:>2} {name:<28} PASS  [{secs:.1}s] {detail}"),
        Err(detail) => println!("criterion {n:>2} {name:<28} FAIL  [{secs:.1}s] {detail}"),
    }
    outcome.is_ok()
}

fn main() {
    let mut results = vec![
        run(1, "regularizer oracle", regularizers),
        run(2, "objective gradient check", objective_gradcheck),
        run(3, "dominating-set oracle", dominating_oracle),
        run(4, "hand traces", hand_traces),
        run(5, "merge exactness", merge_exactness),
    ];
    let runs = catch_unwind(trade_runs);
    match &runs {
        Ok(runs) => {
            results.push(run(6, "sparsity/accuracy trade", || sparsity_trade(runs)));
            results.push(run(7, "preferential attachment", || preferential_attachment(runs)));
        }
        Err(_) => {
            results.push(run(6, "sparsity/accuracy trade", || Err("training runs failed".into())));
            results.push(run(7, "preferential attachment", || Err("training runs failed".into())));
        }
    }
    results.push(run(8, "epoch-one duplicate removal", epoch_one_duplicates));
    results.push(run(9, "determinism", determinism));
    results.push(run(10, "checkpoint round trip", checkpoint_round_trip));
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
