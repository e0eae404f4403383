//! The epoch loop: minibatch SGD on task loss plus penalties, then
//! magnitude zeroing, then redundant-head elimination.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{mean_degree_sd, removed_head_relative_importance, sparsity_fraction};
use crate::autodiff::{accumulate_grads, sgd_step, Tape};
use crate::data::{batches, sequential_batches, Dataset, Example};
use crate::error::{invalid, Error, Result};
use crate::headprune::{elim_redundant_model, MergeTarget, PruneReport};
use crate::model::{Model, ModelConfig};
use crate::regularizers::{penalty_report, total_regularized_loss, RegConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    #[serde(flatten)]
    pub reg: RegConfig,
    /// `l∞` distance at or below which two heads count as redundant.
    pub theta: f32,
    pub hard_zero: bool,
    pub merge_target: MergeTarget,
    pub prune_heads: bool,
    pub seed: u64,
    /// Extra evaluations every this many batches; 0 evaluates only at epoch end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.05,
            batch_size: 64,
            reg: RegConfig::default(),
            theta: 0.0,
            hard_zero: true,
            merge_target: MergeTarget::OutputProjection,
            prune_heads: true,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if !(self.theta >= 0.0) {
            return Err(invalid("theta", "must be >= 0"));
        }
        self.reg.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_task_loss: f64,
    pub r_attn: f64,
    pub r_mlp: f64,
    /// `alpha·r_attn + beta·r_mlp`
    pub penalty: f64,
    pub sparsity: f64,
    pub layer_sparsity: Vec<f64>,
    pub heads_remaining: Vec<usize>,
    pub zeroed: usize,
    pub prune: PruneReport,
    /// Removed-to-kept head importance ratio for this epoch's pruning.
    pub removed_relative_importance: Option<f64>,
    pub degree_sd: f64,
    pub eval_accuracy: f64,
    /// `(batch, accuracy)` checkpoints inside the epoch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interim_accuracy: Vec<(usize, f64)>,
    /// Wall-clock time; kept out of the metrics stream so it stays reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

/// Training stopped on a non-finite loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub epoch: usize,
    pub batch: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub reports: Vec<EpochReport>,
    pub diverged: Option<Divergence>,
}

/// Sets every `|w| ≤ eps` in `A`, `W_O`, `L_in` and `L_out` to exactly zero.
/// Returns the number of nonzero entries that were cleared.
pub fn hard_zero(model: &mut Model, eps: f32) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(invalid("eps", "must be > 0"));
    }
    let mut count = 0;
    for b in &mut model.blocks {
        for m in [&mut b.attn.a.value, &mut b.attn.w_o.value, &mut b.mlp.l_in.value, &mut b.mlp.l_out.value] {
            for w in m.data_mut() {
                if *w != 0.0 && w.abs() <= eps {
                    *w = 0.0;
                    count += 1;
                }
            }
        }
    }
    Ok(count)
}

/// Classification accuracy on `examples`, in percent.
pub fn evaluate(model: &Model, examples: &[Example], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for batch in sequential_batches(examples, batch_size) {
        let pred = model.predict(&batch)?;
        correct += pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    }
    Ok(100.0 * correct as f64 / examples.len() as f64)
}

/// Seed of the batch permutation for `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One optimizer step on `batch`; returns the task loss.
pub fn train_step(model: &mut Model, batch: &crate::model::Batch, cfg: &TrainConfig) -> Result<f64> {
    model.zero_grads();
    let mut tape = Tape::<f32>::new();
    let loss = model.task_loss(&mut tape, batch)?;
    let task = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    accumulate_grads(&tape, &grads, model);
    if cfg.reg.alpha > 0.0 || cfg.reg.beta > 0.0 {
        total_regularized_loss(model, task, &cfg.reg)?;
    }
    sgd_step(model, cfg.lr)?;
    Ok(task)
}

/// Runs `cfg.epochs` epochs; `on_epoch` sees each report and the model after it.
pub fn train_with(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    let mut reports = Vec::new();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut interim = Vec::new();
        let epoch_batches = batches(&data.train, cfg.batch_size, epoch_seed(cfg.seed, epoch))?;
        let n_batches = epoch_batches.len();
        for (bi, batch) in epoch_batches.iter().enumerate() {
            let snapshot = model.clone();
            let task = train_step(model, batch, cfg)?;
            let finite = task.is_finite() && model.params().iter().all(|p| p.value.all_finite());
            if !finite {
                *model = snapshot;
                return Ok(TrainOutcome {
                    reports,
                    diverged: Some(Divergence { epoch, batch: bi }),
                });
            }
            loss_sum += task;
            if cfg.eval_every > 0 && (bi + 1) % cfg.eval_every == 0 && bi + 1 < n_batches {
                interim.push((bi + 1, evaluate(model, &data.eval, cfg.batch_size)?));
            }
        }
        let zeroed = if cfg.hard_zero { hard_zero(model, cfg.reg.eps_count)? } else { 0 };
        let (prune, removed_relative_importance) = if cfg.prune_heads {
            let before = model.clone();
            let report = elim_redundant_model(model, cfg.theta, cfg.merge_target)?;
            let ratio = removed_head_relative_importance(&before, &report);
            (report, ratio)
        } else {
            (PruneReport::default(), None)
        };
        let reg = penalty_report(model, &cfg.reg)?;
        let sparsity = sparsity_fraction(model, cfg.reg.eps_count)?;
        let report = EpochReport {
            epoch,
            mean_task_loss: loss_sum / n_batches as f64,
            r_attn: reg.total_attn,
            r_mlp: reg.total_mlp,
            penalty: reg.weighted(&cfg.reg),
            sparsity: sparsity.overall,
            layer_sparsity: sparsity
                .layers
                .iter()
                .map(|l| l.small as f64 / l.total.max(1) as f64)
                .collect(),
            heads_remaining: model.heads_per_layer(),
            zeroed,
            prune,
            removed_relative_importance,
            degree_sd: mean_degree_sd(model, cfg.reg.eps_count)?,
            eval_accuracy: evaluate(model, &data.eval, cfg.batch_size)?,
            interim_accuracy: interim,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&report, model)?;
        reports.push(report);
    }
    Ok(TrainOutcome {
        reports,
        diverged: None,
    })
}

pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, cfg, |_, _| Ok(()))
}

/// Cartesian grid over the three NeuroPrune knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub alpha: Vec<f32>,
    pub beta: Vec<f32>,
    pub theta: Vec<f32>,
}

impl SweepGrid {
    /// Points in `alpha`-major, then `beta`, then `theta` order.
    pub fn points(&self) -> Vec<(f32, f32, f32)> {
        let mut out = Vec::new();
        for &a in &self.alpha {
            for &b in &self.beta {
                for &t in &self.theta {
                    out.push((a, b, t));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f32,
    pub beta: f32,
    pub theta: f32,
    pub sparsity: f64,
    pub accuracy: f64,
    pub heads_remaining: usize,
    pub r_attn: f64,
    pub train_seconds: f64,
    /// Not dominated in (sparsity, accuracy) by another successful row.
    pub on_frontier: bool,
    pub error: Option<String>,
}

/// Trains one model per grid point. Point `i` uses seeds `base + i`; the
/// row order follows [`SweepGrid::points`] regardless of `workers`.
pub fn sweep(grid: &SweepGrid, model_cfg: &ModelConfig, train_cfg: &TrainConfig, data: &Dataset, workers: usize) -> Result<Vec<SweepRow>> {
    let points = grid.points();
    if points.is_empty() {
        return Err(invalid("grid", "sweep grid is empty"));
    }
    let run = |(i, &(alpha, beta, theta)): (usize, &(f32, f32, f32))| -> SweepRow {
        let start = Instant::now();
        let mut mc = model_cfg.clone();
        mc.seed = model_cfg.seed.wrapping_add(i as u64);
        let mut tc = train_cfg.clone();
        tc.seed = train_cfg.seed.wrapping_add(i as u64);
        tc.reg.alpha = alpha;
        tc.reg.beta = beta;
        tc.theta = theta;
        let outcome = Model::init(&mc).and_then(|mut m| train(&mut m, data, &tc).map(|o| (o, m)));
        let mut row = SweepRow {
            alpha,
            beta,
            theta,
            sparsity: f64::NAN,
            accuracy: f64::NAN,
            heads_remaining: 0,
            r_attn: f64::NAN,
            train_seconds: 0.0,
            on_frontier: false,
            error: None,
        };
        match outcome {
            Ok((o, m)) => {
                if let Some(last) = o.reports.last() {
                    row.sparsity = last.sparsity;
                    row.accuracy = last.eval_accuracy;
                    row.r_attn = last.r_attn;
                }
                row.heads_remaining = m.heads_per_layer().iter().sum();
                if let Some(d) = o.diverged {
                    row.error = Some(format!("diverged at epoch {}, batch {}", d.epoch, d.batch));
                }
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row.train_seconds = start.elapsed().as_secs_f64();
        row
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| invalid("workers", e.to_string()))?;
    let mut rows: Vec<SweepRow> = pool.install(|| points.par_iter().enumerate().map(run).collect());
    mark_frontier(&mut rows);
    Ok(rows)
}

fn mark_frontier(rows: &mut [SweepRow]) {
    let ok: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| if r.error.is_none() { (r.sparsity, r.accuracy) } else { (f64::NAN, f64::NAN) })
        .collect();
    for (i, row) in rows.iter_mut().enumerate() {
        let (s, a) = ok[i];
        if s.is_nan() {
            continue;
        }
        row.on_frontier = !ok.iter().enumerate().any(|(j, &(s2, a2))| {
            j != i && s2 >= s && a2 >= a && (s2 > s || a2 > a)
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            ffn_dim: 16,
            heads: 2,
            layers: 1,
            vocab: 8,
            max_len: 8,
            n_classes: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn hard_zero_threshold_and_idempotence() {
        let mut m = Model::init(&tiny()).unwrap();
        for b in &mut m.blocks {
            b.attn.a.value.fill(0.5);
            b.attn.w_o.value.fill(0.5);
            b.mlp.l_in.value.fill(0.5);
            b.mlp.l_out.value.fill(0.5);
        }
        let l_out = &mut m.blocks[0].mlp.l_out.value;
        l_out.data_mut()[1] = 1e-5;
        l_out.data_mut()[2] = -1e-4;
        assert_eq!(hard_zero(&mut m, 1e-4).unwrap(), 2);
        assert_eq!(m.blocks[0].mlp.l_out.value.data()[..3], [0.5, 0.0, 0.0]);
        let snapshot = m.clone();
        assert_eq!(hard_zero(&mut m, 1e-4).unwrap(), 0);
        assert_eq!(m, snapshot);
        assert!(hard_zero(&mut m, 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn grid_order_and_frontier() {
        let g = SweepGrid { alpha: vec![0.0, 0.1], beta: vec![0.0], theta: vec![0.1, 0.2] };
        assert_eq!(g.points(), vec![(0.0, 0.0, 0.1), (0.0, 0.0, 0.2), (0.1, 0.0, 0.1), (0.1, 0.0, 0.2)]);
        let row = |s, a| SweepRow {
            alpha: 0.0,
            beta: 0.0,
            theta: 0.0,
            sparsity: s,
            accuracy: a,
            heads_remaining: 1,
            r_attn: 0.0,
            train_seconds: 0.0,
            on_frontier: false,
            error: None,
        };
        let mut rows = vec![row(0.1, 90.0), row(0.5, 80.0), row(0.4, 70.0)];
        mark_frontier(&mut rows);
        assert_eq!(rows.iter().map(|r| r.on_frontier).collect::<Vec<_>>(), vec![true, true, false]);
    }
}
