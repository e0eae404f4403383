//! Read-only topology measurements on a model snapshot.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::headprune::PruneReport;
use crate::model::{AttentionLayer, MlpLayer, Model};
use crate::tensor::Tensor;

fn check_eps(eps: f32) -> Result<()> {
    if !(eps > 0.0) {
        return Err(invalid("eps", "must be > 0"));
    }
    Ok(())
}

fn count_small(m: &Tensor, eps: f32) -> usize {
    m.data().iter().filter(|v| v.abs() <= eps).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub a: f64,
    pub w_o: f64,
    pub l_in: f64,
    pub l_out: f64,
    /// Entries at or below `eps` across the four matrices.
    pub small: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
    /// Pooled over every layer's A, W_O, L_in and L_out.
    pub overall: f64,
}

/// Fraction of entries with `|w| ≤ eps` in each attention and feed-forward matrix.
pub fn sparsity_fraction(model: &Model, eps: f32) -> Result<SparsityReport> {
    check_eps(eps)?;
    let frac = |m: &Tensor| count_small(m, eps) as f64 / m.len().max(1) as f64;
    let layers: Vec<LayerSparsity> = model
        .blocks
        .iter()
        .map(|b| {
            let mats = [&b.attn.a.value, &b.attn.w_o.value, &b.mlp.l_in.value, &b.mlp.l_out.value];
            LayerSparsity {
                a: frac(mats[0]),
                w_o: frac(mats[1]),
                l_in: frac(mats[2]),
                l_out: frac(mats[3]),
                small: mats.iter().map(|m| count_small(m, eps)).sum(),
                total: mats.iter().map(|m| m.len()).sum(),
            }
        })
        .collect();
    let small: usize = layers.iter().map(|l| l.small).sum();
    let total: usize = layers.iter().map(|l| l.total).sum();
    Ok(SparsityReport {
        layers,
        overall: small as f64 / total.max(1) as f64,
    })
}

/// Connectivity of the hidden neurons of one feed-forward layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeDistribution {
    /// Per neuron: fan-in above `eps` in its `L_in` row plus fan-out above
    /// `eps` in its `L_out` column.
    pub degrees: Vec<usize>,
    /// `histogram[k]` neurons have degree `k`, for `k` in `0..=2d`.
    pub histogram: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation of the degrees.
    pub sd: f64,
}

pub fn mlp_degree_distribution(mlp: &MlpLayer, eps: f32) -> Result<DegreeDistribution> {
    check_eps(eps)?;
    let (l_in, l_out) = (&mlp.l_in.value, &mlp.l_out.value);
    let hidden = l_in.rows();
    let mut degrees: Vec<usize> = (0..hidden)
        .map(|i| l_in.row(i).iter().filter(|v| v.abs() > eps).count())
        .collect();
    for r in 0..l_out.rows() {
        for (i, v) in l_out.row(r).iter().enumerate() {
            if v.abs() > eps {
                degrees[i] += 1;
            }
        }
    }
    let mut histogram = vec![0; l_in.cols() + l_out.rows() + 1];
    for &d in &degrees {
        histogram[d] += 1;
    }
    let (mean, sd) = mean_sd(&degrees);
    Ok(DegreeDistribution {
        degrees,
        histogram,
        mean,
        sd,
    })
}

fn mean_sd(values: &[usize]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean over layers of the per-layer degree standard deviation.
pub fn mean_degree_sd(model: &Model, eps: f32) -> Result<f64> {
    let sds = model
        .blocks
        .iter()
        .map(|b| mlp_degree_distribution(&b.mlp, eps).map(|d| d.sd))
        .collect::<Result<Vec<_>>>()?;
    Ok(sds.iter().sum::<f64>() / sds.len().max(1) as f64)
}

/// `Σ |W_O|` over the output-projection rows of each head.
pub fn head_importance(layer: &AttentionLayer) -> Vec<f64> {
    let hd = layer.head_dim;
    let w = &layer.w_o.value;
    (0..layer.num_heads())
        .map(|h| {
            (h * hd..(h + 1) * hd)
                .flat_map(|r| w.row(r).iter())
                .map(|v| v.abs() as f64)
                .sum()
        })
        .collect()
}

/// Mean importance of removed heads over mean importance of the heads that
/// stayed, per layer with removals, averaged over those layers.
///
/// `before` is the snapshot the pruning in `report` was applied to. Returns
/// `None` when no layer lost a head (or every such layer kept only
/// zero-importance heads).
pub fn removed_head_relative_importance(before: &Model, report: &PruneReport) -> Option<f64> {
    let mut ratios = Vec::new();
    for lr in &report.layers {
        if lr.pruned.is_empty() {
            continue;
        }
        let layer = &before.blocks.get(lr.layer)?.attn;
        let imp = head_importance(layer);
        let (mut removed, mut kept) = (Vec::new(), Vec::new());
        for (pos, id) in layer.head_ids.iter().enumerate() {
            if lr.pruned.iter().any(|p| p.pruned == *id) {
                removed.push(imp[pos]);
            } else {
                kept.push(imp[pos]);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let kept_mean = mean(&kept);
        if removed.is_empty() || kept_mean == 0.0 {
            continue;
        }
        ratios.push(mean(&removed) / kept_mean);
    }
    (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRemovalStats {
    pub removed_per_layer: Vec<usize>,
    /// Removals by original head index.
    pub removed_per_position: Vec<usize>,
    /// Fraction of layers in which each original head index survived.
    pub keep_frequency: Vec<f64>,
}

/// Aggregates removals over any number of per-epoch reports.
pub fn head_removal_histogram(reports: &[PruneReport], n_layers: usize, k0: usize) -> HeadRemovalStats {
    let mut removed_per_layer = vec![0; n_layers];
    let mut removed_per_position = vec![0; k0];
    let mut removed = vec![vec![false; k0]; n_layers];
    for lr in reports.iter().flat_map(|r| &r.layers) {
        for p in &lr.pruned {
            if lr.layer < n_layers && p.pruned < k0 && !removed[lr.layer][p.pruned] {
                removed[lr.layer][p.pruned] = true;
                removed_per_layer[lr.layer] += 1;
                removed_per_position[p.pruned] += 1;
            }
        }
    }
    let keep_frequency = (0..k0)
        .map(|h| {
            let kept = removed.iter().filter(|layer| !layer[h]).count();
            kept as f64 / n_layers.max(1) as f64
        })
        .collect();
    HeadRemovalStats {
        removed_per_layer,
        removed_per_position,
        keep_frequency,
    }
}

/// Fraction of contiguous length-`m` row blocks holding at most `n` entries
/// with `|w| > eps`. A short tail block at the end of a row counts as a block.
pub fn nm_score(matrix: &Tensor, n: usize, m: usize, eps: f32) -> Result<f64> {
    if m == 0 {
        return Err(invalid("m", "must be at least 1"));
    }
    if n > m {
        return Err(invalid("n", format!("{n} exceeds block length {m}")));
    }
    let (mut ok, mut total) = (0usize, 0usize);
    for r in 0..matrix.rows() {
        for block in matrix.row(r).chunks(m) {
            total += 1;
            if block.iter().filter(|v| v.abs() > eps).count() <= n {
                ok += 1;
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { ok as f64 / total as f64 })
}

/// 0/1 occupancy (`|w| > eps`) of one matrix panel.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub grid: Vec<u8>,
}

impl Heatmap {
    pub fn of(name: impl Into<String>, m: &Tensor, eps: f32) -> Self {
        Self {
            name: name.into(),
            rows: m.rows(),
            cols: m.cols(),
            grid: m.data().iter().map(|v| (v.abs() > eps) as u8).collect(),
        }
    }

    pub fn zero_rows(&self) -> usize {
        self.grid.chunks(self.cols.max(1)).filter(|r| r.iter().all(|&v| v == 0)).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.grid.len() * 2);
        for row in self.grid.chunks(self.cols.max(1)) {
            let cells: Vec<&str> = row.iter().map(|&v| if v == 1 { "1" } else { "0" }).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Occupancy grids for every layer: `A` split into Q, K, V panels, then `L_in` and `L_out`.
pub fn heatmap_dump(model: &Model, eps: f32) -> Vec<Heatmap> {
    let mut out = Vec::new();
    for (l, b) in model.blocks.iter().enumerate() {
        let a = &b.attn.a.value;
        let w = a.cols() / 3;
        for (seg, name) in ["q", "k", "v"].iter().enumerate() {
            out.push(Heatmap::of(format!("layer{l}_{name}"), &a.slice_cols(seg * w, (seg + 1) * w), eps));
        }
        out.push(Heatmap::of(format!("layer{l}_l_in"), &b.mlp.l_in.value, eps));
        out.push(Heatmap::of(format!("layer{l}_l_out"), &b.mlp.l_out.value, eps));
    }
    out
}

/// Rows of `A` with every entry at or below `eps`, summed over layers.
pub fn zero_attention_rows(model: &Model, eps: f32) -> usize {
    model
        .blocks
        .iter()
        .map(|b| Heatmap::of("a", &b.attn.a.value, eps).zero_rows())
        .sum()
}

pub fn degree_histogram_csv(model: &Model, eps: f32) -> Result<String> {
    let mut out = String::from("layer,degree,count\n");
    for (l, b) in model.blocks.iter().enumerate() {
        let dist = mlp_degree_distribution(&b.mlp, eps)?;
        for (deg, count) in dist.histogram.iter().enumerate() {
            let _ = writeln!(out, "{l},{deg},{count}");
        }
    }
    Ok(out)
}

pub fn degree_summary_csv(model: &Model, eps: f32) -> Result<String> {
    let mut out = String::from("layer,mean_degree,sd_degree\n");
    for (l, b) in model.blocks.iter().enumerate() {
        let dist = mlp_degree_distribution(&b.mlp, eps)?;
        let _ = writeln!(out, "{l},{},{}", dist.mean, dist.sd);
    }
    Ok(out)
}

/// `layer,head,importance,removed`. Heads already gone from `model` are
/// listed with importance 0 and `removed = 1`.
pub fn head_stats_csv(model: &Model, k0: usize) -> String {
    let mut out = String::from("layer,head,importance,removed\n");
    for (l, b) in model.blocks.iter().enumerate() {
        let imp = head_importance(&b.attn);
        for h in 0..k0 {
            match b.attn.head_ids.iter().position(|&id| id == h) {
                Some(pos) => {
                    let _ = writeln!(out, "{l},{h},{},0", imp[pos]);
                }
                None => {
                    let _ = writeln!(out, "{l},{h},0,1");
                }
            }
        }
    }
    out
}

pub fn sparsity_csv(report: &SparsityReport) -> String {
    let mut out = String::from("layer,a,w_o,l_in,l_out,pooled\n");
    for (l, s) in report.layers.iter().enumerate() {
        let pooled = s.small as f64 / s.total.max(1) as f64;
        let _ = writeln!(out, "{l},{},{},{},{},{pooled}", s.a, s.w_o, s.l_in, s.l_out);
    }
    let _ = writeln!(out, "all,,,,,{}", report.overall);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Param;

    fn mlp(l_in: Tensor, l_out: Tensor) -> MlpLayer {
        let (de, d) = (l_in.rows(), l_in.cols());
        MlpLayer {
            l_in: Param::new("l_in", l_in),
            b_in: Param::new("b_in", Tensor::zeros(&[de])),
            l_out: Param::new("l_out", l_out),
            b_out: Param::new("b_out", Tensor::zeros(&[d])),
        }
    }

    #[test]
    fn dense_and_zero_degree() {
        let d = mlp_degree_distribution(&mlp(Tensor::filled(&[6, 4], 0.3), Tensor::filled(&[4, 6], -0.3)), 1e-4).unwrap();
        assert!(d.degrees.iter().all(|&k| k == 8));
        assert_eq!(d.sd, 0.0);
        assert_eq!(d.histogram.iter().sum::<usize>(), 6);
        let z = mlp_degree_distribution(&mlp(Tensor::zeros(&[6, 4]), Tensor::zeros(&[4, 6])), 1e-4).unwrap();
        assert!(z.degrees.iter().all(|&k| k == 0));
        assert_eq!(z.sd, 0.0);
    }

    #[test]
    fn crafted_degrees() {
        // d = 4, d_e = 4; neuron degrees 0, 0, 4 (fan-in only), 8 (fan-in + fan-out)
        let l_in = Tensor::from_fn(4, 4, |r, _| if r >= 2 { 1.0 } else { 0.0 });
        let l_out = Tensor::from_fn(4, 4, |_, c| if c == 3 { 1.0 } else { 0.0 });
        let d = mlp_degree_distribution(&mlp(l_in, l_out), 1e-4).unwrap();
        assert_eq!(d.degrees, vec![0, 0, 4, 8]);
        // population sd of {0, 0, 4, 8}: sqrt(((9 + 9 + 1 + 25) / 4)) = sqrt(11)
        assert!((d.sd - 11f64.sqrt()).abs() < 1e-12, "{}", d.sd);
    }

    #[test]
    fn nm_scores() {
        let z = Tensor::zeros(&[3, 8]);
        assert_eq!(nm_score(&z, 0, 4, 1e-4).unwrap(), 1.0);
        let dense = Tensor::filled(&[3, 8], 1.0);
        assert_eq!(nm_score(&dense, 3, 4, 1e-4).unwrap(), 0.0);
        let two_of_four = Tensor::from_fn(3, 8, |_, c| if c % 4 < 2 { 1.0 } else { 0.0 });
        assert_eq!(nm_score(&two_of_four, 2, 4, 1e-4).unwrap(), 1.0);
        assert_eq!(nm_score(&two_of_four, 1, 4, 1e-4).unwrap(), 0.0);
        assert!(nm_score(&z, 5, 4, 1e-4).is_err());
        // tail block of length 2 per row
        let tail = Tensor::from_fn(1, 6, |_, c| if c < 4 { 1.0 } else { 0.0 });
        assert_eq!(nm_score(&tail, 2, 4, 1e-4).unwrap(), 0.5);
    }

    #[test]
    fn heatmap_shape_and_zero_grid() {
        let h = Heatmap::of("z", &Tensor::zeros(&[3, 5]), 1e-4);
        assert_eq!((h.rows, h.cols), (3, 5));
        assert!(h.grid.iter().all(|&v| v == 0));
        assert_eq!(h.zero_rows(), 3);
        assert_eq!(h.to_csv().lines().count(), 3);
        assert_eq!(h.to_csv().lines().next().unwrap(), "0,0,0,0,0");
    }

    #[test]
    fn eps_must_be_positive() {
        let m = mlp(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2]));
        assert!(mlp_degree_distribution(&m, 0.0).is_err());
    }
}
