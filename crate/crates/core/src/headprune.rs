//! Redundant attention head elimination.
//!
//! Heads whose `[Q|K|V]` blocks lie within `θ` of each other in `l∞` are
//! linked in a similarity graph. A quadratic scan picks, for every head, a
//! head whose similarity row contains its own; dominated heads are merged
//! into the surviving head and physically removed. Only pairwise distances
//! are consulted, never how important a head is.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionLayer, MlpLayer, Model};

/// Which parameter block absorbs a pruned head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MergeTarget {
    /// Add the pruned head's `W_O` rows into the dominator's rows.
    #[default]
    #[serde(rename = "wo", alias = "output_projection")]
    OutputProjection,
    /// Add the `L_in` columns belonging to the pruned head into the dominator's.
    #[serde(rename = "lin", alias = "mlp_in_columns")]
    MlpInColumns,
}

impl std::str::FromStr for MergeTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wo" | "output_projection" => Ok(Self::OutputProjection),
            "lin" | "mlp_in_columns" => Ok(Self::MlpInColumns),
            other => Err(crate::error::invalid("merge_target", format!("expected `wo` or `lin`, got `{other}`"))),
        }
    }
}

/// Symmetric 0/1 matrix with unit diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimilarityMatrix {
    k: usize,
    cells: Vec<bool>,
}

impl SimilarityMatrix {
    pub fn identity(k: usize) -> Self {
        let mut cells = vec![false; k * k];
        for i in 0..k {
            cells[i * k + i] = true;
        }
        Self { k, cells }
    }

    /// Builds from 0/1 rows, rejecting asymmetric input or a zero diagonal.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidSimilarity("matrix is not square".into()));
        }
        let cells: Vec<bool> = rows.iter().flatten().map(|&v| v != 0).collect();
        let s = Self { k, cells };
        for i in 0..k {
            if !s.get(i, i) {
                return Err(Error::InvalidSimilarity(format!("diagonal entry {i} is zero")));
            }
            for j in 0..i {
                if s.get(i, j) != s.get(j, i) {
                    return Err(Error::InvalidSimilarity(format!("S[{i},{j}] != S[{j},{i}]")));
                }
            }
        }
        Ok(s)
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.k + j]
    }

    fn set_pair(&mut self, i: usize, j: usize) {
        self.cells[i * self.k + j] = true;
        self.cells[j * self.k + i] = true;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.cells[i * self.k..(i + 1) * self.k]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&v| v).count()
    }

    pub fn has_off_diagonal(&self) -> bool {
        (0..self.k).any(|i| (0..self.k).any(|j| i != j && self.get(i, j)))
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.k).map(|i| self.row(i).iter().map(|&b| b as u8).collect()).collect()
    }
}

/// `D[i,j] = 1` means head `i` can be replaced by head `j`. Every row holds
/// its diagonal plus the single entry chosen by the scan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DominatorMatrix {
    dominator: Vec<usize>,
}

impl DominatorMatrix {
    pub fn size(&self) -> usize {
        self.dominator.len()
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        i == j || self.dominator[i] == j
    }

    /// The head chosen for `i`; equal to `i` when nothing dominates it.
    pub fn dominator(&self, i: usize) -> usize {
        self.dominator[i]
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        let k = self.size();
        (0..k).map(|i| (0..k).map(|j| self.get(i, j) as u8).collect()).collect()
    }
}

/// Quadratic-time dominating-set approximation over the similarity graph.
///
/// For each `i` the candidate starts at `i` and is replaced by `j` when `j`'s
/// similarity row strictly contains the candidate's, or when the rows are
/// equal and `j` comes later.
pub fn find_dominating(s: &SimilarityMatrix) -> DominatorMatrix {
    let k = s.size();
    let dominator = (0..k)
        .map(|i| {
            let mut best = i;
            for j in 0..k {
                // s = S[best,:] - S[j,:]
                let (mut has_plus, mut has_minus) = (false, false);
                for (&a, &b) in s.row(best).iter().zip(s.row(j)) {
                    match (a, b) {
                        (true, false) => has_plus = true,
                        (false, true) => has_minus = true,
                        _ => {}
                    }
                }
                let strictly_contained = !has_plus && has_minus;
                let equal_and_later = !has_plus && !has_minus && best < j;
                if strictly_contained || equal_and_later {
                    best = j;
                }
            }
            best
        })
        .collect();
    DominatorMatrix { dominator }
}

/// Merges derived from a dominator matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergePlan {
    /// `(pruned, absorbing)` positions in increasing `pruned` order.
    pub merges: Vec<(usize, usize)>,
    pub kept: Vec<usize>,
}

/// Follows each head's dominator chain to a head that dominates itself.
///
/// Each step of a chain strictly increases `(row support, index)`, so chains
/// terminate, and the final head's row still contains the starting head.
pub fn plan_merges(d: &DominatorMatrix) -> MergePlan {
    let k = d.size();
    let root = |mut i: usize| {
        for _ in 0..k {
            let next = d.dominator(i);
            if next == i {
                break;
            }
            i = next;
        }
        i
    };
    let merges: Vec<(usize, usize)> = (0..k)
        .filter(|&i| d.dominator(i) != i)
        .map(|i| (i, root(i)))
        .collect();
    let kept = (0..k).filter(|i| !merges.iter().any(|&(p, _)| p == *i)).collect();
    MergePlan { merges, kept }
}

/// `l∞` distance between the `[Q_i|K_i|V_i]` and `[Q_j|K_j|V_j]` blocks.
pub fn head_distance(layer: &AttentionLayer, i: usize, j: usize) -> Result<f32> {
    let k = layer.num_heads();
    for idx in [i, j] {
        if idx >= k {
            return Err(Error::IndexOutOfRange {
                what: "head",
                index: idx,
                len: k,
            });
        }
    }
    let (ci, cj) = (layer.head_columns(i), layer.head_columns(j));
    let a = &layer.a.value;
    let mut max = 0.0f32;
    for r in 0..a.rows() {
        let row = a.row(r);
        for (&x, &y) in ci.iter().zip(&cj) {
            max = max.max((row[x] - row[y]).abs());
        }
    }
    Ok(max)
}

/// Symmetric matrix of all pairwise head distances.
pub fn pairwise_distances(layer: &AttentionLayer) -> Vec<Vec<f32>> {
    let k = layer.num_heads();
    let mut out = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let dist = head_distance(layer, i, j).expect("indices in range");
            out[i][j] = dist;
            out[j][i] = dist;
        }
    }
    out
}

/// `S[i,j] = 1` iff `head_distance(i, j) ≤ theta`, with a unit diagonal.
pub fn build_similarity(layer: &AttentionLayer, theta: f32) -> SimilarityMatrix {
    similarity_from_distances(&pairwise_distances(layer), theta)
}

pub fn similarity_from_distances(dist: &[Vec<f32>], theta: f32) -> SimilarityMatrix {
    let k = dist.len();
    let mut s = SimilarityMatrix::identity(k);
    for i in 0..k {
        for j in (i + 1)..k {
            if dist[i][j] <= theta {
                s.set_pair(i, j);
            }
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunedHead {
    /// Original index of the removed head.
    pub pruned: usize,
    /// Original index of the head that absorbed it.
    pub dominator: usize,
    pub distance: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneReport {
    pub layer: usize,
    pub heads_before: usize,
    pub heads_after: usize,
    pub pruned: Vec<PrunedHead>,
}

impl LayerPruneReport {
    pub fn kept_ids(&self, before_ids: &[usize]) -> Vec<usize> {
        before_ids
            .iter()
            .copied()
            .filter(|id| !self.pruned.iter().any(|p| p.pruned == *id))
            .collect()
    }
}

/// One epoch's head pruning across the model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub layers: Vec<LayerPruneReport>,
}

impl PruneReport {
    pub fn total_pruned(&self) -> usize {
        self.layers.iter().map(|l| l.pruned.len()).sum()
    }
}

/// Merges and removes redundant heads of one layer.
///
/// When no two distinct heads are within `theta` the layer is left as is.
/// Otherwise every dominated head is added into the head at the end of its
/// dominator chain (see [`plan_merges`]) and all dominated heads are removed
/// together after the merges.
pub fn elim_redundant(
    layer: &mut AttentionLayer,
    mlp: &mut MlpLayer,
    theta: f32,
    target: MergeTarget,
) -> Result<LayerPruneReport> {
    if !(theta >= 0.0) {
        return Err(crate::error::invalid("theta", "must be >= 0"));
    }
    let k = layer.num_heads();
    let mut report = LayerPruneReport {
        layer: 0,
        heads_before: k,
        heads_after: k,
        pruned: Vec::new(),
    };
    let dist = pairwise_distances(layer);
    let s = similarity_from_distances(&dist, theta);
    if !s.has_off_diagonal() {
        return Ok(report);
    }
    let plan = plan_merges(&find_dominating(&s));
    let mut merges = plan.merges;
    if plan.kept.is_empty() {
        // unreachable for a valid plan; keep the layer usable regardless
        merges.pop();
    }
    let hd = layer.head_dim;
    for &(i, j) in &merges {
        match target {
            MergeTarget::OutputProjection => {
                let w = &mut layer.w_o.value;
                for r in 0..hd {
                    let src = w.row(i * hd + r).to_vec();
                    for (o, v) in w.row_mut(j * hd + r).iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
            MergeTarget::MlpInColumns => {
                let (ci, cj) = (layer.head_ids[i] * hd, layer.head_ids[j] * hd);
                let l_in = &mut mlp.l_in.value;
                if cj + hd > l_in.cols() || ci + hd > l_in.cols() {
                    return Err(Error::ShapeMismatch {
                        op: "elim_redundant",
                        shapes: format!("head columns beyond l_in {:?}", l_in.shape()),
                    });
                }
                for r in 0..l_in.rows() {
                    let row = l_in.row_mut(r);
                    for c in 0..hd {
                        row[cj + c] += row[ci + c];
                    }
                }
            }
        }
        report.pruned.push(PrunedHead {
            pruned: layer.head_ids[i],
            dominator: layer.head_ids[j],
            distance: dist[i][j],
        });
    }
    let positions: Vec<usize> = merges.iter().map(|&(i, _)| i).collect();
    layer.prune_heads(&positions)?;
    report.heads_after = layer.num_heads();
    Ok(report)
}

/// Runs [`elim_redundant`] on every layer.
pub fn elim_redundant_model(model: &mut Model, theta: f32, target: MergeTarget) -> Result<PruneReport> {
    let mut out = PruneReport::default();
    for (l, block) in model.blocks.iter_mut().enumerate() {
        let mut r = elim_redundant(&mut block.attn, &mut block.mlp, theta, target)?;
        r.layer = l;
        out.layers.push(r);
    }
    Ok(out)
}
