//! Synthetic sequence-classification tasks.
//!
//! Every example is generated from its own generator keyed by
//! `(seed, split, index)`, so a dataset is a pure function of its
//! parameters and can be produced in any order.

use std::fmt::Write as _;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

pub const PAD: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Task {
    /// `pairs` key/value tokens followed by a query key; the label is the
    /// class of the queried value.
    Retrieval { pairs: usize },
    /// Label is the most frequent token among `len` class tokens.
    Majority { len: usize },
}

impl Task {
    pub const NAMES: [&'static str; 2] = ["retrieval", "majority"];

    pub fn name(&self) -> &'static str {
        match self {
            Task::Retrieval { .. } => "retrieval",
            Task::Majority { .. } => "majority",
        }
    }
}

/// Serialized flat, e.g. `task = "retrieval"`, `pairs = 4`, `n_train = ...`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FlatSpec", into = "FlatSpec")]
pub struct DataSpec {
    pub task: Task,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            task: Task::Retrieval { pairs: 4 },
            n_train: 4000,
            n_eval: 1000,
            seed: 1,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatSpec {
    #[serde(default = "default_task")]
    task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pairs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    len: Option<usize>,
    #[serde(default = "default_n_train")]
    n_train: usize,
    #[serde(default = "default_n_eval")]
    n_eval: usize,
    #[serde(default = "default_seed")]
    seed: u64,
}

fn default_task() -> String {
    "retrieval".into()
}
fn default_n_train() -> usize {
    DataSpec::default().n_train
}
fn default_n_eval() -> usize {
    DataSpec::default().n_eval
}
fn default_seed() -> u64 {
    DataSpec::default().seed
}

impl TryFrom<FlatSpec> for DataSpec {
    type Error = String;

    fn try_from(f: FlatSpec) -> std::result::Result<Self, String> {
        let task = match (f.task.as_str(), f.pairs, f.len) {
            ("retrieval", pairs, None) => Task::Retrieval { pairs: pairs.unwrap_or(4) },
            ("majority", None, Some(len)) => Task::Majority { len },
            ("retrieval", _, Some(_)) => return Err("`len` does not apply to retrieval".into()),
            ("majority", Some(_), _) => return Err("`pairs` does not apply to majority".into()),
            ("majority", None, None) => return Err("majority needs `len`".into()),
            (other, _, _) => {
                return Err(format!("unknown task `{other}`; known tasks: {}", Task::NAMES.join(", ")))
            }
        };
        Ok(Self {
            task,
            n_train: f.n_train,
            n_eval: f.n_eval,
            seed: f.seed,
        })
    }
}

impl From<DataSpec> for FlatSpec {
    fn from(d: DataSpec) -> Self {
        let (pairs, len) = match d.task {
            Task::Retrieval { pairs } => (Some(pairs), None),
            Task::Majority { len } => (None, Some(len)),
        };
        Self {
            task: d.task.name().into(),
            pairs,
            len,
            n_train: d.n_train,
            n_eval: d.n_eval,
            seed: d.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub spec: DataSpec,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

const TRAIN_SPLIT: u64 = 0;
const EVAL_SPLIT: u64 = 1;

fn example_rng(seed: u64, split: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&split.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Token ranges for the retrieval task: keys first, then values.
#[derive(Clone, Copy, Debug)]
pub struct RetrievalVocab {
    pub n_keys: usize,
    pub n_values: usize,
}

impl RetrievalVocab {
    pub fn new(pairs: usize, vocab: usize, n_classes: usize) -> Result<Self> {
        if pairs == 0 {
            return Err(Error::Dataset("retrieval needs at least one pair".into()));
        }
        if n_classes == 0 || vocab < 2 * pairs + n_classes {
            return Err(Error::Dataset(format!(
                "vocab {vocab} too small for {pairs} pairs and {n_classes} classes (need {})",
                2 * pairs + n_classes
            )));
        }
        let n_values = n_classes.max(vocab / 2);
        Ok(Self {
            n_keys: vocab - n_values,
            n_values,
        })
    }

    pub fn value_class(&self, token: usize, n_classes: usize) -> usize {
        (token - self.n_keys) % n_classes
    }
}

fn retrieval_example(rng: &mut ChaCha8Rng, pairs: usize, layout: RetrievalVocab, n_classes: usize) -> Example {
    let keys = rand::seq::index::sample(rng, layout.n_keys, pairs).into_vec();
    // each value's class is drawn independently, so the label is uniform
    let classes: Vec<usize> = (0..pairs).map(|_| rng.gen_range(0..n_classes)).collect();
    let target = rng.gen_range(0..pairs);
    let mut tokens = Vec::with_capacity(2 * pairs + 1);
    for (&key, &class) in keys.iter().zip(&classes) {
        // values of class c are n_keys + c + n_classes·t
        let per_class = (layout.n_values - class).div_ceil(n_classes);
        tokens.push(key);
        tokens.push(layout.n_keys + class + n_classes * rng.gen_range(0..per_class));
    }
    tokens.push(keys[target]);
    Example {
        tokens,
        label: classes[target],
    }
}

fn retrieval_split(seed: u64, split: u64, n: usize, pairs: usize, vocab: usize, n_classes: usize) -> Result<Vec<Example>> {
    let layout = RetrievalVocab::new(pairs, vocab, n_classes)?;
    Ok((0..n)
        .map(|i| retrieval_example(&mut example_rng(seed, split, i as u64), pairs, layout, n_classes))
        .collect())
}

/// Key/value lookup examples.
pub fn gen_retrieval(seed: u64, n_examples: usize, pairs: usize, vocab: usize, n_classes: usize) -> Result<Vec<Example>> {
    retrieval_split(seed, TRAIN_SPLIT, n_examples, pairs, vocab, n_classes)
}

/// Most frequent token; ties go to the smallest class id.
pub fn majority_label(tokens: &[usize], n_classes: usize) -> usize {
    let mut counts = vec![0usize; n_classes];
    for &t in tokens {
        counts[t] += 1;
    }
    (0..n_classes).fold(0, |best, c| if counts[c] > counts[best] { c } else { best })
}

fn majority_split(seed: u64, split: u64, n: usize, len: usize, n_classes: usize) -> Result<Vec<Example>> {
    if len == 0 || n_classes == 0 {
        return Err(Error::Dataset("majority needs len >= 1 and n_classes >= 1".into()));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = example_rng(seed, split, i as u64);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..n_classes)).collect();
            let label = majority_label(&tokens, n_classes);
            Example { tokens, label }
        })
        .collect())
}

/// Majority-vote examples over tokens `0..n_classes`.
pub fn gen_majority(seed: u64, n_examples: usize, len: usize, n_classes: usize) -> Result<Vec<Example>> {
    majority_split(seed, TRAIN_SPLIT, n_examples, len, n_classes)
}

impl Dataset {
    pub fn generate(spec: &DataSpec, vocab: usize, n_classes: usize) -> Result<Self> {
        let (train, eval) = match spec.task {
            Task::Retrieval { pairs } => (
                retrieval_split(spec.seed, TRAIN_SPLIT, spec.n_train, pairs, vocab, n_classes)?,
                retrieval_split(spec.seed, EVAL_SPLIT, spec.n_eval, pairs, vocab, n_classes)?,
            ),
            Task::Majority { len } => {
                if n_classes > vocab {
                    return Err(Error::Dataset(format!("{n_classes} classes exceed vocab {vocab}")));
                }
                (
                    majority_split(spec.seed, TRAIN_SPLIT, spec.n_train, len, n_classes)?,
                    majority_split(spec.seed, EVAL_SPLIT, spec.n_eval, len, n_classes)?,
                )
            }
        };
        if train.is_empty() {
            return Err(Error::Dataset("empty training split".into()));
        }
        Ok(Self {
            name: spec.task.name().to_string(),
            spec: spec.clone(),
            train,
            eval,
        })
    }

    pub fn max_len(&self) -> usize {
        self.train.iter().chain(&self.eval).map(|e| e.tokens.len()).max().unwrap_or(0)
    }
}

/// Pads a run of examples into one [`Batch`].
pub fn collate(examples: &[&Example]) -> Batch {
    let seq_len = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
    let mut tokens = Vec::with_capacity(examples.len() * seq_len);
    for e in examples {
        tokens.extend_from_slice(&e.tokens);
        tokens.extend(std::iter::repeat_n(PAD, seq_len - e.tokens.len()));
    }
    Batch {
        tokens,
        lengths: examples.iter().map(|e| e.tokens.len()).collect(),
        seq_len,
        labels: examples.iter().map(|e| e.label).collect(),
    }
}

/// Seeded permutation cut into batches of `batch_size`; the last may be short.
pub fn batches(examples: &[Example], batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(crate::error::invalid("batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order
        .chunks(batch_size)
        .map(|idx| collate(&idx.iter().map(|&i| &examples[i]).collect::<Vec<_>>()))
        .collect())
}

/// In-order batches, for evaluation.
pub fn sequential_batches(examples: &[Example], batch_size: usize) -> Vec<Batch> {
    examples
        .chunks(batch_size.max(1))
        .map(|c| collate(&c.iter().collect::<Vec<_>>()))
        .collect()
}

/// `tok tok … tok<TAB>label` per line.
pub fn write_examples(examples: &[Example]) -> String {
    let mut out = String::new();
    for e in examples {
        let toks: Vec<String> = e.tokens.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{}\t{}", toks.join(" "), e.label);
    }
    out
}

pub fn read_examples(reader: impl BufRead) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Dataset(format!("line {}: expected `tokens<TAB>label`", n + 1));
        let (toks, label) = line.split_once('\t').ok_or_else(bad)?;
        let tokens = toks
            .split(' ')
            .map(str::parse)
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|_| bad())?;
        let label = label.parse().map_err(|_| bad())?;
        if tokens.is_empty() {
            return Err(bad());
        }
        out.push(Example { tokens, label });
    }
    Ok(out)
}
