//! Encoder-only transformer with explicit per-head parameter blocks.
//!
//! Each attention layer stores its query, key and value projections side by
//! side in one matrix `A = [Q | K | V]` of shape `d × 3·k·d_h`. Head `i` owns
//! columns `i·d_h .. (i+1)·d_h` of each of the three segments and rows
//! `i·d_h .. (i+1)·d_h` of the output projection `W_O`. Removing a head
//! deletes those columns and rows, so later forwards run on smaller matrices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionGeometry, Param, ParamSet, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const INIT_SCALE: f32 = 0.05;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    /// `1/√d_h`
    #[default]
    PerHeadDim,
    /// `1/√d`
    EmbedDim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub qkv_bias: bool,
    pub attn_scale: AttnScale,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            ffn_dim: 256,
            heads: 8,
            layers: 4,
            vocab: 32,
            max_len: 32,
            n_classes: 4,
            seed: 0,
            qkv_bias: false,
            attn_scale: AttnScale::PerHeadDim,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
            ("n_classes", self.n_classes),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(invalid(
                "heads",
                format!("embed_dim {} is not divisible by {}", self.embed_dim, self.heads),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Multi-head attention parameters plus surviving-head bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    /// `d × 3·k·d_h`, laid out `[Q | K | V]`.
    pub a: Param,
    pub qkv_bias: Option<Param>,
    /// `k·d_h × d`
    pub w_o: Param,
    pub o_bias: Param,
    /// Original indices of the heads still present, strictly increasing.
    pub head_ids: Vec<usize>,
    pub head_dim: usize,
}

/// Feed-forward parameters. Hidden neuron `i` is row `i` of `l_in` and column `i` of `l_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayer {
    /// `d_e × d`
    pub l_in: Param,
    pub b_in: Param,
    /// `d × d_e`
    pub l_out: Param,
    pub b_out: Param,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn: AttentionLayer,
    pub ln1_gain: Param,
    pub ln1_bias: Param,
    pub mlp: MlpLayer,
    pub ln2_gain: Param,
    pub ln2_bias: Param,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_emb: Param,
    pub pos_emb: Param,
    pub blocks: Vec<Block>,
    /// `d × n_classes`, applied to the mean-pooled final states.
    pub cls_w: Param,
    pub cls_b: Param,
}

/// A padded minibatch: `tokens` is `lengths.len() × seq_len`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub lengths: Vec<usize>,
    pub seq_len: usize,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }
}

/// A head's parameter blocks, copied out of its layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSlice {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// `d_h × d`
    pub w_o: Tensor,
}

impl HeadSlice {
    /// `A_{H_i} = [Q_i | K_i | V_i]`, `d × 3·d_h`.
    pub fn a_block(&self) -> Tensor {
        Tensor::concat_cols(&[&self.q, &self.k, &self.v]).expect("blocks share row count")
    }
}

impl AttentionLayer {
    pub fn num_heads(&self) -> usize {
        self.head_ids.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.a.value.rows()
    }

    fn check_head(&self, i: usize) -> Result<()> {
        if i >= self.num_heads() {
            return Err(Error::IndexOutOfRange {
                what: "head",
                index: i,
                len: self.num_heads(),
            });
        }
        Ok(())
    }

    /// Columns of `A` owned by head `i`: its Q, then K, then V columns.
    pub fn head_columns(&self, i: usize) -> Vec<usize> {
        let (k, hd) = (self.num_heads(), self.head_dim);
        (0..3)
            .flat_map(|seg| (seg * k * hd + i * hd)..(seg * k * hd + (i + 1) * hd))
            .collect()
    }

    pub fn head_slice(&self, i: usize) -> Result<HeadSlice> {
        self.check_head(i)?;
        let (k, hd) = (self.num_heads(), self.head_dim);
        let col = |seg: usize| self.a.value.slice_cols(seg * k * hd + i * hd, seg * k * hd + (i + 1) * hd);
        Ok(HeadSlice {
            q: col(0),
            k: col(1),
            v: col(2),
            w_o: self.w_o.value.slice_rows(i * hd, (i + 1) * hd),
        })
    }

    pub fn head_slice_mut(&mut self, i: usize) -> Result<HeadSliceMut<'_>> {
        self.check_head(i)?;
        Ok(HeadSliceMut { layer: self, head: i })
    }

    /// Removes head `i`; the layer must keep at least one head.
    pub fn prune_head(&mut self, i: usize) -> Result<()> {
        self.prune_heads(&[i])
    }

    /// Removes every listed head at once. Positions refer to the current layout.
    pub fn prune_heads(&mut self, heads: &[usize]) -> Result<()> {
        for &i in heads {
            self.check_head(i)?;
        }
        let keep: Vec<usize> = (0..self.num_heads()).filter(|i| !heads.contains(i)).collect();
        if keep.is_empty() {
            return Err(Error::LastHead);
        }
        if keep.len() == self.num_heads() {
            return Ok(());
        }
        let hd = self.head_dim;
        let k = self.num_heads();
        let cols: Vec<usize> = (0..3)
            .flat_map(|seg| keep.iter().flat_map(move |&h| (seg * k * hd + h * hd)..(seg * k * hd + (h + 1) * hd)))
            .collect();
        let rows: Vec<usize> = keep.iter().flat_map(|&h| (h * hd)..((h + 1) * hd)).collect();
        let a = self.a.value.select_cols(&cols);
        self.a.replace(a);
        if let Some(b) = &mut self.qkv_bias {
            let nb = b.value.select_cols(&cols);
            b.replace(Tensor::new(vec![cols.len()], nb.into_data())?);
        }
        let w_o = self.w_o.value.select_rows(&rows);
        self.w_o.replace(w_o);
        self.head_ids = keep.iter().map(|&h| self.head_ids[h]).collect();
        Ok(())
    }

    /// Attention sublayer output for one sequence `x: seq_len × d`.
    pub fn forward(&self, x: &Tensor, scale: AttnScale) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let xv = tape.input(x.clone());
        let leaves = AttnLeaves::record(&mut tape, self, &mut 0);
        let lengths = [x.rows()];
        let out = attention_on_tape(&mut tape, self, &leaves, xv, x.rows(), &lengths, scale)?;
        Ok(tape.value(out).clone())
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.a];
        v.extend(self.qkv_bias.as_ref());
        v.push(&self.w_o);
        v.push(&self.o_bias);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.a];
        v.extend(self.qkv_bias.as_mut());
        v.push(&mut self.w_o);
        v.push(&mut self.o_bias);
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// Mutable access to one head's blocks; writes land in the owning layer.
pub struct HeadSliceMut<'a> {
    layer: &'a mut AttentionLayer,
    head: usize,
}

impl HeadSliceMut<'_> {
    pub fn a_block(&self) -> Tensor {
        self.layer.a.value.select_cols(&self.layer.head_columns(self.head))
    }

    pub fn set_a_block(&mut self, block: &Tensor) -> Result<()> {
        let cols = self.layer.head_columns(self.head);
        let a = &mut self.layer.a.value;
        if block.rows() != a.rows() || block.cols() != cols.len() {
            return Err(Error::ShapeMismatch {
                op: "set_a_block",
                shapes: format!("{:?} into {}×{}", block.shape(), a.rows(), cols.len()),
            });
        }
        for r in 0..a.rows() {
            for (j, &c) in cols.iter().enumerate() {
                a.set(r, c, block.at(r, j));
            }
        }
        Ok(())
    }

    pub fn w_o_rows(&self) -> Tensor {
        let hd = self.layer.head_dim;
        self.layer.w_o.value.slice_rows(self.head * hd, (self.head + 1) * hd)
    }

    pub fn set_w_o_rows(&mut self, rows: &Tensor) -> Result<()> {
        let hd = self.layer.head_dim;
        let w = &mut self.layer.w_o.value;
        if rows.rows() != hd || rows.cols() != w.cols() {
            return Err(Error::ShapeMismatch {
                op: "set_w_o_rows",
                shapes: format!("{:?} into {}×{}", rows.shape(), hd, w.cols()),
            });
        }
        for r in 0..hd {
            w.row_mut(self.head * hd + r).copy_from_slice(rows.row(r));
        }
        Ok(())
    }

    /// Bias entries of this head, in the same order as [`Self::a_block`] columns.
    pub fn qkv_bias(&self) -> Option<Vec<f32>> {
        let cols = self.layer.head_columns(self.head);
        self.layer
            .qkv_bias
            .as_ref()
            .map(|b| cols.iter().map(|&c| b.value.data()[c]).collect())
    }

    pub fn set_qkv_bias(&mut self, values: &[f32]) {
        let cols = self.layer.head_columns(self.head);
        if let Some(b) = &mut self.layer.qkv_bias {
            for (&c, &v) in cols.iter().zip(values) {
                b.value.data_mut()[c] = v;
            }
        }
    }

    /// Makes the head compute the zero function.
    pub fn zero(&mut self) {
        let block = Tensor::zeros(&[self.layer.embed_dim(), 3 * self.layer.head_dim]);
        self.set_a_block(&block).expect("shape from layer");
        let rows = Tensor::zeros(&[self.layer.head_dim, self.layer.w_o.value.cols()]);
        self.set_w_o_rows(&rows).expect("shape from layer");
        let n = 3 * self.layer.head_dim;
        self.set_qkv_bias(&vec![0.0; n]);
    }
}

impl MlpLayer {
    fn params(&self) -> [&Param; 4] {
        [&self.l_in, &self.b_in, &self.l_out, &self.b_out]
    }
}

struct AttnLeaves {
    a: Var,
    bias: Option<Var>,
    w_o: Var,
    o_bias: Var,
}

impl AttnLeaves {
    /// Records the layer's parameters as leaves numbered from `*next`.
    fn record<T: Scalar>(tape: &mut Tape<T>, layer: &AttentionLayer, next: &mut usize) -> Self {
        let a = leaf(tape, &layer.a, next);
        let bias = layer.qkv_bias.as_ref().map(|b| leaf(tape, b, next));
        let w_o = leaf(tape, &layer.w_o, next);
        let o_bias = leaf(tape, &layer.o_bias, next);
        Self { a, bias, w_o, o_bias }
    }
}

fn leaf<T: Scalar>(tape: &mut Tape<T>, p: &Param, next: &mut usize) -> Var {
    let v = tape.param(*next, &p.value);
    *next += 1;
    v
}

fn attention_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    layer: &AttentionLayer,
    leaves: &AttnLeaves,
    x: Var,
    seq_len: usize,
    lengths: &[usize],
    scale: AttnScale,
) -> Result<Var> {
    let mut qkv = tape.matmul(x, leaves.a)?;
    if let Some(b) = leaves.bias {
        qkv = tape.add_row(qkv, b)?;
    }
    let scale_dim = match scale {
        AttnScale::PerHeadDim => layer.head_dim,
        AttnScale::EmbedDim => layer.embed_dim(),
    };
    let geom = AttentionGeometry {
        seq_len,
        lengths: lengths.to_vec(),
        heads: layer.num_heads(),
        head_dim: layer.head_dim,
        scale: T::one() / T::lit(scale_dim as f64).sqrt(),
    };
    let heads = tape.attention(qkv, geom)?;
    let out = tape.matmul(heads, leaves.w_o)?;
    tape.add_row(out, leaves.o_bias)
}

impl Model {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, de, k) = (config.embed_dim, config.ffn_dim, config.heads);
        let hd = config.head_dim();
        let w = |name: String, r: usize, c: usize| Param::new(name, Tensor::zeros(&[r, c]));
        let v = |name: String, n: usize| Param::new(name, Tensor::zeros(&[n]));
        let ones = |name: String, n: usize| Param::new(name, Tensor::filled(&[n], 1.0));
        let blocks = (0..config.layers)
            .map(|l| Block {
                attn: AttentionLayer {
                    a: w(format!("blocks.{l}.attn.a"), d, 3 * k * hd),
                    qkv_bias: config
                        .qkv_bias
                        .then(|| v(format!("blocks.{l}.attn.qkv_bias"), 3 * k * hd)),
                    w_o: w(format!("blocks.{l}.attn.w_o"), k * hd, d),
                    o_bias: v(format!("blocks.{l}.attn.o_bias"), d),
                    head_ids: (0..k).collect(),
                    head_dim: hd,
                },
                ln1_gain: ones(format!("blocks.{l}.ln1.gain"), d),
                ln1_bias: v(format!("blocks.{l}.ln1.bias"), d),
                mlp: MlpLayer {
                    l_in: w(format!("blocks.{l}.mlp.l_in"), de, d),
                    b_in: v(format!("blocks.{l}.mlp.b_in"), de),
                    l_out: w(format!("blocks.{l}.mlp.l_out"), d, de),
                    b_out: v(format!("blocks.{l}.mlp.b_out"), d),
                },
                ln2_gain: ones(format!("blocks.{l}.ln2.gain"), d),
                ln2_bias: v(format!("blocks.{l}.ln2.bias"), d),
            })
            .collect();
        let mut model = Self {
            config: config.clone(),
            tok_emb: w("tok_emb".into(), config.vocab, d),
            pos_emb: w("pos_emb".into(), config.max_len, d),
            blocks,
            cls_w: w("cls.w".into(), d, config.n_classes),
            cls_b: v("cls.b".into(), config.n_classes),
        };
        // Matrices (rank 2) get uniform draws; biases stay 0 and norm gains 1.
        // Each parameter draws from its own stream of the seeded generator.
        for (stream, p) in model.params_mut().into_iter().enumerate() {
            if p.value.shape().len() != 2 {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(stream as u64);
            for x in p.value.data_mut() {
                *x = rng.gen_range(-INIT_SCALE..INIT_SCALE);
            }
        }
        Ok(model)
    }

    /// Every parameter, in the fixed order used by tapes and checkpoints.
    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            v.extend(b.attn.params());
            v.push(&b.ln1_gain);
            v.push(&b.ln1_bias);
            v.extend(b.mlp.params());
            v.push(&b.ln2_gain);
            v.push(&b.ln2_bias);
        }
        v.push(&self.cls_w);
        v.push(&self.cls_b);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            v.extend(b.attn.params_mut());
            v.push(&mut b.ln1_gain);
            v.push(&mut b.ln1_bias);
            let m = &mut b.mlp;
            v.extend([&mut m.l_in, &mut m.b_in, &mut m.l_out, &mut m.b_out]);
            v.push(&mut b.ln2_gain);
            v.push(&mut b.ln2_bias);
        }
        v.push(&mut self.cls_w);
        v.push(&mut self.cls_b);
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn heads_per_layer(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.attn.num_heads()).collect()
    }

    /// Records the forward pass on `tape` and returns the `batch × n_classes` logits.
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, batch: &Batch) -> Result<Var> {
        let t = batch.seq_len;
        if t == 0 || t > self.config.max_len || batch.tokens.len() != batch.size() * t {
            return Err(Error::ShapeMismatch {
                op: "model.logits",
                shapes: format!(
                    "{} tokens for {} sequences of length {} (max_len {})",
                    batch.tokens.len(),
                    batch.size(),
                    t,
                    self.config.max_len
                ),
            });
        }
        let mut idx = 0;
        let tok = leaf(tape, &self.tok_emb, &mut idx);
        let pos = leaf(tape, &self.pos_emb, &mut idx);
        let positions: Vec<usize> = (0..batch.size()).flat_map(|_| 0..t).collect();
        let te = tape.embedding(tok, &batch.tokens)?;
        let pe = tape.embedding(pos, &positions)?;
        let mut x = tape.add(te, pe)?;
        let eps = T::lit(LN_EPS);
        for b in &self.blocks {
            let leaves = AttnLeaves::record(tape, &b.attn, &mut idx);
            let g1 = leaf(tape, &b.ln1_gain, &mut idx);
            let b1 = leaf(tape, &b.ln1_bias, &mut idx);
            let l_in = leaf(tape, &b.mlp.l_in, &mut idx);
            let b_in = leaf(tape, &b.mlp.b_in, &mut idx);
            let l_out = leaf(tape, &b.mlp.l_out, &mut idx);
            let b_out = leaf(tape, &b.mlp.b_out, &mut idx);
            let g2 = leaf(tape, &b.ln2_gain, &mut idx);
            let b2 = leaf(tape, &b.ln2_bias, &mut idx);

            let attn = attention_on_tape(tape, &b.attn, &leaves, x, t, &batch.lengths, self.config.attn_scale)?;
            let r1 = tape.add(x, attn)?;
            let h = tape.layer_norm(r1, g1, b1, eps)?;
            let hidden = tape.matmul_nt(h, l_in)?;
            let hidden = tape.add_row(hidden, b_in)?;
            let hidden = tape.relu(hidden);
            let ff = tape.matmul_nt(hidden, l_out)?;
            let ff = tape.add_row(ff, b_out)?;
            let r2 = tape.add(h, ff)?;
            x = tape.layer_norm(r2, g2, b2, eps)?;
        }
        let cw = leaf(tape, &self.cls_w, &mut idx);
        let cb = leaf(tape, &self.cls_b, &mut idx);
        let pooled = tape.masked_mean_pool(x, t, &batch.lengths)?;
        let logits = tape.matmul(pooled, cw)?;
        tape.add_row(logits, cb)
    }

    /// Mean cross-entropy of the batch, recorded on `tape`.
    pub fn task_loss<T: Scalar>(&self, tape: &mut Tape<T>, batch: &Batch) -> Result<Var> {
        let logits = self.logits(tape, batch)?;
        tape.cross_entropy(logits, &batch.labels)
    }

    /// Predicted class per example.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let mut tape = Tape::<f32>::new();
        let logits = self.logits(&mut tape, batch)?;
        let l = tape.value(logits);
        Ok((0..l.rows())
            .map(|r| {
                let row = l.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }
}

impl ParamSet for Model {
    fn param_count(&self) -> usize {
        self.params().len()
    }
    fn param(&self, index: usize) -> &Param {
        self.params()[index]
    }
    fn param_mut(&mut self, index: usize) -> &mut Param {
        self.params_mut().swap_remove(index)
    }
}
