//! Topology-driven sparsity penalties and their subgradients.
//!
//! * [`r_mlp`]: a row-weighted L1 term on the feed-forward matrices where
//!   each row's weight is the number of its entries already below `eps`.
//!   Sparse rows are pushed harder than dense ones, so well-connected
//!   neurons keep their connections and weakly connected ones lose them.
//! * [`r_attn`]: `Σ_rows sqrt(Σ_j |A_ij|)` over the concatenated `[Q|K|V]`
//!   matrix, which drives whole input dimensions out of the attention layer.
//!
//! Penalty values are accumulated in `f64`; gradients are `f32` like the
//! parameters they are added to. Near-zero counts are recomputed from the
//! current weights on every call and carry no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    /// Weight of the attention row-group penalty.
    pub alpha: f32,
    /// Weight of the degree-weighted MLP penalty.
    pub beta: f32,
    /// Entries with `|w| < eps_count` count as missing connections.
    pub eps_count: f32,
    /// Rows of `A` whose L1 mass is below this get no gradient.
    pub group_floor: f64,
    /// Added to every near-zero count. Zero reproduces the plain penalty.
    pub count_offset: f32,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            eps_count: 1e-4,
            group_floor: 1e-12,
            count_offset: 0.0,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(invalid("alpha", "must be >= 0"));
        }
        if !(self.beta >= 0.0) {
            return Err(invalid("beta", "must be >= 0"));
        }
        if !(self.eps_count > 0.0) {
            return Err(invalid("eps_count", "must be > 0"));
        }
        if !(self.group_floor > 0.0) {
            return Err(invalid("group_floor", "must be > 0"));
        }
        if !(self.count_offset >= 0.0) {
            return Err(invalid("count_offset", "must be >= 0"));
        }
        Ok(())
    }
}

/// Unweighted penalty values per layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegReport {
    pub r_attn: Vec<f64>,
    pub r_mlp: Vec<f64>,
    pub total_attn: f64,
    pub total_mlp: f64,
}

impl RegReport {
    /// `alpha·Σ r_attn + beta·Σ r_mlp`
    pub fn weighted(&self, cfg: &RegConfig) -> f64 {
        cfg.alpha as f64 * self.total_attn + cfg.beta as f64 * self.total_mlp
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per row, the number of entries with `|m_ij| < eps`.
pub fn count_near_zero(m: &Tensor, eps: f32) -> Vec<usize> {
    (0..m.rows())
        .map(|r| m.row(r).iter().filter(|v| v.abs() < eps).count())
        .collect()
}

fn check_mlp_shapes(l_in: &Tensor, l_out: &Tensor) -> Result<()> {
    if l_in.shape().len() != 2 || l_out.shape().len() != 2 || l_in.shape()[0] != l_out.shape()[1] || l_in.shape()[1] != l_out.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "r_mlp",
            shapes: format!("l_in {:?} vs l_out {:?}", l_in.shape(), l_out.shape()),
        });
    }
    Ok(())
}

/// `Σ_i w_i · Σ_j |m_ij|` with `w_i = (offset + n_i) / row_len`.
fn weighted_l1(m: &Tensor, eps: f32, offset: f32) -> f64 {
    let norm = m.cols() as f64;
    count_near_zero(m, eps)
        .into_iter()
        .enumerate()
        .map(|(r, n)| {
            let l1 = m.row(r).iter().fold(0.0f64, |a, &v| a + v.abs() as f64);
            (offset as f64 + n as f64) / norm * l1
        })
        .sum()
}

fn weighted_l1_grad(m: &Tensor, eps: f32, offset: f32) -> Tensor {
    let norm = m.cols() as f32;
    let mut g = Tensor::zeros(m.shape());
    for (r, n) in count_near_zero(m, eps).into_iter().enumerate() {
        let w = (offset + n as f32) / norm;
        if w == 0.0 {
            continue;
        }
        for (o, &v) in g.row_mut(r).iter_mut().zip(m.row(r)) {
            *o = w * sign(v);
        }
    }
    g
}

/// Degree-weighted L1 penalty of one feed-forward layer.
///
/// `(1/d)·n_inᵀ|L_in|1_d + (1/d_e)·n_outᵀ|L_out|1_{d_e}` where `L_in` is
/// `d_e × d` and `L_out` is `d × d_e`.
pub fn r_mlp(l_in: &Tensor, l_out: &Tensor, eps: f32) -> Result<f64> {
    r_mlp_with_offset(l_in, l_out, eps, 0.0)
}

pub fn r_mlp_with_offset(l_in: &Tensor, l_out: &Tensor, eps: f32, offset: f32) -> Result<f64> {
    check_mlp_shapes(l_in, l_out)?;
    Ok(weighted_l1(l_in, eps, offset) + weighted_l1(l_out, eps, offset))
}

/// Subgradient of [`r_mlp`] with counts held fixed; `sign(0) = 0`.
pub fn r_mlp_grad(l_in: &Tensor, l_out: &Tensor, eps: f32) -> Result<(Tensor, Tensor)> {
    r_mlp_grad_with_offset(l_in, l_out, eps, 0.0)
}

pub fn r_mlp_grad_with_offset(l_in: &Tensor, l_out: &Tensor, eps: f32, offset: f32) -> Result<(Tensor, Tensor)> {
    check_mlp_shapes(l_in, l_out)?;
    Ok((weighted_l1_grad(l_in, eps, offset), weighted_l1_grad(l_out, eps, offset)))
}

/// Row-group `l1^0.5` penalty: `Σ_i sqrt(Σ_j |A_ij|)`.
pub fn r_attn(a: &Tensor) -> f64 {
    (0..a.rows())
        .map(|r| a.row(r).iter().fold(0.0f64, |s, &v| s + v.abs() as f64).sqrt())
        .sum()
}

/// `sign(A_ij) / (2·sqrt(g_i))` with `g_i = Σ_j |A_ij|`; rows with `g_i < floor` get zero.
pub fn r_attn_grad(a: &Tensor, floor: f64) -> Tensor {
    let mut g = Tensor::zeros(a.shape());
    for r in 0..a.rows() {
        let mass = a.row(r).iter().fold(0.0f64, |s, &v| s + v.abs() as f64);
        if mass < floor {
            continue;
        }
        let coef = (0.5 / mass.max(floor).sqrt()) as f32;
        for (o, &v) in g.row_mut(r).iter_mut().zip(a.row(r)) {
            *o = coef * sign(v);
        }
    }
    g
}

/// Evaluates both penalties on every layer and adds `alpha·∇r_attn` and
/// `beta·∇r_mlp` into the matching parameter gradients.
///
/// Returns `task_loss + alpha·Σ r_attn + beta·Σ r_mlp` and the per-layer values.
pub fn total_regularized_loss(model: &mut Model, task_loss: f64, cfg: &RegConfig) -> Result<(f64, RegReport)> {
    let report = penalty_report(model, cfg)?;
    for block in &mut model.blocks {
        if cfg.alpha > 0.0 {
            let g = r_attn_grad(&block.attn.a.value, cfg.group_floor);
            block.attn.a.grad.add_assign(&g.scale(cfg.alpha));
        }
        if cfg.beta > 0.0 {
            let mlp = &mut block.mlp;
            let (gi, go) = r_mlp_grad_with_offset(&mlp.l_in.value, &mlp.l_out.value, cfg.eps_count, cfg.count_offset)?;
            mlp.l_in.grad.add_assign(&gi.scale(cfg.beta));
            mlp.l_out.grad.add_assign(&go.scale(cfg.beta));
        }
    }
    Ok((task_loss + report.weighted(cfg), report))
}

/// Penalty values without touching gradients.
pub fn penalty_report(model: &Model, cfg: &RegConfig) -> Result<RegReport> {
    let mut report = RegReport::default();
    for block in &model.blocks {
        let ra = r_attn(&block.attn.a.value);
        let rm = r_mlp_with_offset(&block.mlp.l_in.value, &block.mlp.l_out.value, cfg.eps_count, cfg.count_offset)?;
        report.r_attn.push(ra);
        report.r_mlp.push(rm);
        report.total_attn += ra;
        report.total_mlp += rm;
    }
    Ok(report)
}
