//! The subcommands, callable in-process.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use neuroprune_core::analysis::{
    degree_histogram_csv, degree_summary_csv, head_importance, head_stats_csv, heatmap_dump, nm_score,
    sparsity_csv, sparsity_fraction,
};
use neuroprune_core::autodiff::Tape;
use neuroprune_core::checkpoint;
use neuroprune_core::data::{gen_majority, gen_retrieval, write_examples, Dataset, Task};
use neuroprune_core::headprune::{elim_redundant_model, MergeTarget, PruneReport};
use neuroprune_core::model::{Batch, Model};
use neuroprune_core::tensor::Tensor;
use neuroprune_core::trainer::{sweep, train_with, EpochReport, SweepRow};

use crate::config::RunConfig;

pub const CHECKPOINT: &str = "model.nprn";
pub const METRICS: &str = "metrics.jsonl";
pub const PRUNE_REPORTS: &str = "prune_reports.jsonl";
pub const TIMING: &str = "timing.json";
pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug)]
pub struct TrainSummary {
    pub reports: Vec<EpochReport>,
    pub model: Model,
    pub out: PathBuf,
}

fn json_line(w: &mut impl Write, value: &impl Serialize) -> neuroprune_core::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Trains per `cfg` and writes every artifact into `cfg.out`.
///
/// Wall-clock times go to `timing.json` only, so the metrics and checkpoint
/// are reproducible byte for byte.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;

    let data = Dataset::generate(&cfg.data, cfg.model.vocab, cfg.model.n_classes)?;
    if data.max_len() > cfg.model.max_len {
        bail!("dataset sequences reach length {}, model.max_len is {}", data.max_len(), cfg.model.max_len);
    }
    let mut model = Model::init(&cfg.model)?;
    let mut metrics = BufWriter::new(File::create(out.join(METRICS))?);
    let mut prune_log = BufWriter::new(File::create(out.join(PRUNE_REPORTS))?);
    let mut seconds = Vec::new();
    let outcome = train_with(&mut model, &data, &cfg.train, |report, _| {
        seconds.push(report.seconds);
        json_line(&mut metrics, report)?;
        json_line(
            &mut prune_log,
            &serde_json::json!({ "epoch": report.epoch, "prune": report.prune }),
        )
    })?;

    checkpoint::save(&model, &out.join(CHECKPOINT))?;
    write_analysis(&model, cfg, &out)?;
    fs::write(
        out.join(TIMING),
        serde_json::to_string_pretty(&serde_json::json!({ "epoch_seconds": seconds }))?,
    )?;
    if let Some(d) = outcome.diverged {
        bail!(
            "training diverged at epoch {}, batch {}; artifacts up to the last good epoch are in {}",
            d.epoch,
            d.batch,
            out.display()
        );
    }
    Ok(TrainSummary {
        reports: outcome.reports,
        model,
        out,
    })
}

/// Sparsity, degree, head and N:M tables plus occupancy heatmaps.
pub fn write_analysis(model: &Model, cfg: &RunConfig, dir: &Path) -> Result<()> {
    let eps = cfg.train.reg.eps_count;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("sparsity.csv"), sparsity_csv(&sparsity_fraction(model, eps)?))?;
    fs::write(dir.join("degree_histogram.csv"), degree_histogram_csv(model, eps)?)?;
    fs::write(dir.join("degree_summary.csv"), degree_summary_csv(model, eps)?)?;
    fs::write(dir.join("head_stats.csv"), head_stats_csv(model, model.config.heads))?;

    let mut nm = String::from("layer,matrix,n,m,score\n");
    for (l, b) in model.blocks.iter().enumerate() {
        let mats: [(&str, &Tensor); 4] = [
            ("a", &b.attn.a.value),
            ("w_o", &b.attn.w_o.value),
            ("l_in", &b.mlp.l_in.value),
            ("l_out", &b.mlp.l_out.value),
        ];
        for (name, m) in mats {
            for &[n, mm] in &cfg.analysis.nm {
                writeln!(nm, "{l},{name},{n},{mm},{}", nm_score(m, n, mm, eps)?)?;
            }
        }
    }
    fs::write(dir.join("nm_scores.csv"), nm)?;

    let heat_dir = dir.join("heatmaps");
    fs::create_dir_all(&heat_dir)?;
    for h in heatmap_dump(model, eps) {
        fs::write(heat_dir.join(format!("{}.csv", h.name)), h.to_csv())?;
    }
    Ok(())
}

/// Loads a checkpoint and writes the analysis tables into `out`.
pub fn cmd_analyze(checkpoint_path: &Path, cfg: &RunConfig, out: &Path) -> Result<Model> {
    let model = checkpoint::load(checkpoint_path)
        .with_context(|| format!("loading {}", checkpoint_path.display()))?;
    write_analysis(&model, cfg, out)?;
    let mut imp = String::from("layer,head,importance\n");
    for (l, b) in model.blocks.iter().enumerate() {
        for (id, v) in b.attn.head_ids.iter().zip(head_importance(&b.attn)) {
            writeln!(imp, "{l},{id},{v}")?;
        }
    }
    fs::write(out.join("head_importance.csv"), imp)?;
    Ok(model)
}

#[derive(Debug, Serialize)]
pub struct PruneOutcome {
    pub prune: PruneReport,
    /// Largest logit change over the bundled random inputs.
    pub max_logit_diff: f32,
}

fn random_batch(model: &Model, seed: u64, n: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq_len = model.config.max_len.min(12);
    let tokens = (0..n * seq_len).map(|_| rng.gen_range(0..model.config.vocab)).collect();
    Batch {
        tokens,
        lengths: vec![seq_len; n],
        seq_len,
        labels: vec![0; n],
    }
}

fn logits(model: &Model, batch: &Batch) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let v = model.logits(&mut tape, batch)?;
    Ok(tape.value(v).clone())
}

/// One round of redundant-head elimination on a saved model.
pub fn cmd_prune_heads(input: &Path, theta: f32, target: MergeTarget, output: &Path) -> Result<PruneOutcome> {
    let mut model = checkpoint::load(input).with_context(|| format!("loading {}", input.display()))?;
    let batch = random_batch(&model, 0x5eed, 16);
    let before = logits(&model, &batch)?;
    let prune = elim_redundant_model(&mut model, theta, target)?;
    let after = logits(&model, &batch)?;
    checkpoint::save(&model, output)?;
    let outcome = PruneOutcome {
        prune,
        max_logit_diff: before.max_abs_diff(&after),
    };
    let report_path = output.with_extension("prune.json");
    fs::write(&report_path, serde_json::to_string_pretty(&outcome)?)?;
    Ok(outcome)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,beta,theta,sparsity,accuracy,heads_remaining,r_attn,train_seconds,on_frontier,error\n");
    for r in rows {
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.3},{},{err}",
            r.alpha, r.beta, r.theta, r.sparsity, r.accuracy, r.heads_remaining, r.r_attn, r.train_seconds, r.on_frontier
        );
    }
    out
}

/// Trains one model per grid point and writes `frontier.csv` into `cfg.out`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    let data = Dataset::generate(&cfg.data, cfg.model.vocab, cfg.model.n_classes)?;
    let rows = sweep(&cfg.sweep.grid(), &cfg.model, &cfg.train, &data, cfg.sweep.workers)?;
    fs::write(cfg.out.join("frontier.csv"), sweep_csv(&rows))?;
    Ok(rows)
}

/// Parameters for `gen-data`.
#[derive(Clone, Debug)]
pub struct GenData {
    pub task: String,
    pub seed: u64,
    pub n_examples: usize,
    /// Pairs for retrieval, sequence length for majority.
    pub size: usize,
    pub vocab: usize,
    pub n_classes: usize,
}

pub fn cmd_gen_data(args: &GenData, out: &Path) -> Result<usize> {
    let examples = match args.task.as_str() {
        "retrieval" => gen_retrieval(args.seed, args.n_examples, args.size, args.vocab, args.n_classes)?,
        "majority" => gen_majority(args.seed, args.n_examples, args.size, args.n_classes)?,
        other => bail!("unknown task `{other}`; known tasks: {}", Task::NAMES.join(", ")),
    };
    fs::write(out, write_examples(&examples))?;
    Ok(examples.len())
}
