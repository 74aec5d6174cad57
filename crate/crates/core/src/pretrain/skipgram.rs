//! Session skip-gram over listing ids with a Huffman-coded hierarchical
//! softmax (or negative sampling).

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::autograd::sigmoid;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::sequences::{Session, Vocabulary};
use crate::tensor::Tensor;

pub const SKIPGRAM_DIM: usize = 64;

/// Binary Huffman code over `n` leaves. Internal nodes are numbered
/// `0..n-1` with the root last; `paths[leaf]` lists the internal nodes from
/// the root down and `codes[leaf]` the branch taken at each (true = right).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTree {
    pub paths: Vec<Vec<usize>>,
    pub codes: Vec<Vec<bool>>,
}

impl HuffmanTree {
    /// Builds the tree from leaf counts. Equal counts merge in order of
    /// creation, so the result is deterministic.
    pub fn build(counts: &[u64]) -> Result<Self> {
        let n = counts.len();
        if n == 0 {
            return Err(Error::EmptyCorpus("Huffman tree over zero leaves".into()));
        }
        // Node ids: leaves 0..n, internal n..2n-1.
        let mut heap: BinaryHeap<Reverse<(u64, usize)>> = counts
            .iter()
            .enumerate()
            .map(|(i, c)| Reverse((*c, i)))
            .collect();
        let mut parent = vec![usize::MAX; 2 * n - 1];
        let mut is_right = vec![false; 2 * n - 1];
        let mut next = n;
        while heap.len() > 1 {
            let Reverse((c1, a)) = heap.pop().expect("two nodes");
            let Reverse((c2, b)) = heap.pop().expect("two nodes");
            parent[a] = next;
            parent[b] = next;
            is_right[b] = true;
            heap.push(Reverse((c1 + c2, next)));
            next += 1;
        }
        let mut paths = Vec::with_capacity(n);
        let mut codes = Vec::with_capacity(n);
        for leaf in 0..n {
            let (mut p, mut c) = (Vec::new(), Vec::new());
            let mut node = leaf;
            while parent[node] != usize::MAX {
                p.push(parent[node] - n);
                c.push(is_right[node]);
                node = parent[node];
            }
            p.reverse();
            c.reverse();
            paths.push(p);
            codes.push(c);
        }
        Ok(Self { paths, codes })
    }

    pub fn num_leaves(&self) -> usize {
        self.paths.len()
    }

    pub fn num_internal(&self) -> usize {
        self.paths.len().saturating_sub(1)
    }

    /// Σ count·code_length / Σ count.
    pub fn expected_code_length(&self, counts: &[u64]) -> f64 {
        let total: u64 = counts.iter().sum();
        counts
            .iter()
            .zip(&self.codes)
            .map(|(c, code)| *c as f64 * code.len() as f64)
            .sum::<f64>()
            / total as f64
    }
}

/// Probability of taking branch `right` at a node with logit `x`.
fn branch_prob(x: f64, right: bool) -> f64 {
    if right {
        sigmoid(-x)
    } else {
        sigmoid(x)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipGramMode {
    HierarchicalSoftmax,
    NegativeSampling { negatives: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Copies of each session that contains a purchase.
    pub purchase_upsample: usize,
    pub mode: SkipGramMode,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: SKIPGRAM_DIM,
            window: 5,
            epochs: 5,
            lr: 0.05,
            purchase_upsample: 5,
            mode: SkipGramMode::HierarchicalSoftmax,
            seed: 0,
        }
    }
}

/// Input vectors for every listing-vocabulary row plus the output side.
/// Leaves of the tree (and rows of `output` in negative-sampling mode) are
/// kept vocabulary entries, i.e. vocabulary index minus `num_oov`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipGramModel {
    pub vocab: Vocabulary,
    pub input: Tensor,
    pub output: Tensor,
    pub tree: Option<HuffmanTree>,
    pub mode: SkipGramMode,
}

impl SkipGramModel {
    fn leaf(&self, id: &str) -> Result<usize> {
        if !self.vocab.contains(id) {
            return Err(Error::UnknownEntity(id.to_string()));
        }
        Ok(self.vocab.index(id) - self.vocab.num_oov())
    }

    fn input_row(&self, leaf: usize) -> &[f64] {
        self.input.row(leaf + self.vocab.num_oov())
    }

    /// `p(other | center)` under the model's output side.
    pub fn prob(&self, center: &str, other: &str) -> Result<f64> {
        let (c, o) = (self.leaf(center)?, self.leaf(other)?);
        Ok(self.prob_leaves(c, o))
    }

    fn prob_leaves(&self, c: usize, o: usize) -> f64 {
        let v = self.input_row(c);
        match &self.tree {
            Some(tree) => tree.paths[o]
                .iter()
                .zip(&tree.codes[o])
                .map(|(n, right)| branch_prob(dot(self.output.row(*n), v), *right))
                .product(),
            None => {
                let scores: Vec<f64> = (0..self.output.rows())
                    .map(|k| dot(self.output.row(k), v))
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                (scores[o] - max).exp() / z
            }
        }
    }

    /// The full conditional distribution over kept listings.
    pub fn distribution(&self, center: &str) -> Result<Vec<f64>> {
        let c = self.leaf(center)?;
        Ok((0..self.vocab.num_kept())
            .map(|o| self.prob_leaves(c, o))
            .collect())
    }

    /// Frozen table aligned with the vocabulary (OOV rows zero).
    pub fn to_table(&self) -> Result<EmbeddingTable> {
        let mut w = self.input.clone();
        for r in 0..self.vocab.num_oov() {
            w.row_mut(r).fill(0.0);
        }
        EmbeddingTable::frozen("skipgram", w)
    }
}

/// Hierarchical-softmax loss `−log p(leaf | v)` for one pair together with
/// its gradients with respect to `v` and to each node vector on the path.
pub fn hs_pair_loss(
    v: &[f64],
    nodes: &Tensor,
    path: &[usize],
    code: &[bool],
) -> (f64, Vec<f64>, Vec<(usize, Vec<f64>)>) {
    let mut loss = 0.0;
    let mut gv = vec![0.0; v.len()];
    let mut gnodes = Vec::with_capacity(path.len());
    for (n, right) in path.iter().zip(code) {
        let w = nodes.row(*n);
        let x = dot(w, v);
        // −log σ(s·x) with s = +1 (left) or −1 (right)
        let s = if *right { -1.0 } else { 1.0 };
        let p = sigmoid(s * x);
        loss -= p.max(f64::MIN_POSITIVE).ln();
        let dx = -s * (1.0 - p);
        for (g, wi) in gv.iter_mut().zip(w) {
            *g += dx * wi;
        }
        gnodes.push((*n, v.iter().map(|vi| dx * vi).collect()));
    }
    (loss, gv, gnodes)
}

/// Negative-sampling loss `−log σ(u_o·v) − Σ_k log σ(−u_k·v)` and gradients.
pub fn ns_pair_loss(
    v: &[f64],
    outputs: &Tensor,
    positive: usize,
    negatives: &[usize],
) -> (f64, Vec<f64>, Vec<(usize, Vec<f64>)>) {
    let mut loss = 0.0;
    let mut gv = vec![0.0; v.len()];
    let mut gout = Vec::with_capacity(1 + negatives.len());
    for (k, label) in std::iter::once((positive, 1.0)).chain(negatives.iter().map(|n| (*n, 0.0))) {
        let u = outputs.row(k);
        let x = dot(u, v);
        let p = sigmoid(x);
        let target_p = if label == 1.0 { p } else { 1.0 - p };
        loss -= target_p.max(f64::MIN_POSITIVE).ln();
        let dx = p - label;
        for (g, ui) in gv.iter_mut().zip(u) {
            *g += dx * ui;
        }
        gout.push((k, v.iter().map(|vi| dx * vi).collect()));
    }
    (loss, gv, gout)
}

/// Sessions after purchase upsampling, as leaf indices (out-of-vocabulary
/// listings dropped).
fn leaf_sessions(sessions: &[Session], vocab: &Vocabulary, upsample: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for s in sessions {
        let leaves: Vec<usize> = s
            .listings
            .iter()
            .filter(|id| vocab.contains(id))
            .map(|id| vocab.index(id) - vocab.num_oov())
            .collect();
        let copies = if s.has_purchase { upsample.max(1) } else { 1 };
        for _ in 0..copies {
            out.push(leaves.clone());
        }
    }
    out
}

fn window_pairs(session: &[usize], window: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..session.len() {
        let lo = i.saturating_sub(window);
        let hi = (i + window + 1).min(session.len());
        for j in lo..hi {
            if j != i {
                pairs.push((session[i], session[j]));
            }
        }
    }
    pairs
}

/// Trains skip-gram vectors over the listing vocabulary. The tree (in
/// hierarchical mode) is built from token counts after upsampling.
pub fn train_skipgram(
    sessions: &[Session],
    vocab: &Vocabulary,
    cfg: &SkipGramConfig,
) -> Result<SkipGramModel> {
    if cfg.dim == 0 || cfg.window == 0 {
        return Err(Error::Config(
            "skip-gram dim and window must be positive".into(),
        ));
    }
    let corpus = leaf_sessions(sessions, vocab, cfg.purchase_upsample);
    let per_session: Vec<Vec<(usize, usize)>> = corpus
        .par_iter()
        .map(|s| window_pairs(s, cfg.window))
        .collect();
    let num_pairs: usize = per_session.iter().map(Vec::len).sum();
    if num_pairs == 0 {
        return Err(Error::EmptyCorpus(
            "no (center, context) pairs: every session has fewer than two known listings".into(),
        ));
    }
    let kept = vocab.num_kept();
    let mut counts = vec![0u64; kept];
    for s in &corpus {
        for l in s {
            counts[*l] += 1;
        }
    }

    let root = Stream::new(cfg.seed).substream("skipgram");
    let mut init = root.substream("init");
    let half = 0.5 / cfg.dim as f64;
    let input = Tensor::uniform(&[vocab.table_rows(), cfg.dim], -half, half, &mut init);
    let (tree, output) = match cfg.mode {
        SkipGramMode::HierarchicalSoftmax => {
            let t = HuffmanTree::build(&counts)?;
            let rows = t.num_internal().max(1);
            (Some(t), Tensor::zeros(&[rows, cfg.dim]))
        }
        SkipGramMode::NegativeSampling { .. } => (None, Tensor::zeros(&[kept, cfg.dim])),
    };
    let mut model = SkipGramModel {
        vocab: vocab.clone(),
        input,
        output,
        tree,
        mode: cfg.mode,
    };
    let noise: Vec<f64> = counts.iter().map(|c| (*c as f64).powf(0.75)).collect();

    let total = (num_pairs * cfg.epochs).max(1) as f64;
    let mut done = 0usize;
    let num_oov = vocab.num_oov();
    let mut rng = root.substream("sgd");
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..per_session.len()).collect();
        root.substream(&format!("epoch{epoch}")).shuffle(&mut order);
        for &si in &order {
            for &(c, o) in &per_session[si] {
                let lr = cfg.lr * (1.0 - done as f64 / total).max(1e-4);
                done += 1;
                let v = model.input.row(c + num_oov).to_vec();
                let (_, gv, gout) = match (&model.tree, cfg.mode) {
                    (Some(t), _) => hs_pair_loss(&v, &model.output, &t.paths[o], &t.codes[o]),
                    (None, SkipGramMode::NegativeSampling { negatives }) => {
                        let negs: Vec<usize> = (0..negatives)
                            .map(|_| rng.categorical(&noise))
                            .filter(|k| *k != o)
                            .collect();
                        ns_pair_loss(&v, &model.output, o, &negs)
                    }
                    (None, SkipGramMode::HierarchicalSoftmax) => {
                        unreachable!("tree exists in HS mode")
                    }
                };
                for (k, g) in gout {
                    for (w, gi) in model.output.row_mut(k).iter_mut().zip(&g) {
                        *w -= lr * gi;
                    }
                }
                for (w, gi) in model.input.row_mut(c + num_oov).iter_mut().zip(&gv) {
                    *w -= lr * gi;
                }
            }
        }
    }
    Ok(model)
}
