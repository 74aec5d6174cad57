//! Weight-shared listing encoder trained on co-clicked pairs with an
//! in-batch softmax over cosine similarities.

use crate::autograd::{Graph, Var};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Stream;
use crate::tensor::Tensor;
use crate::training_eval::{cosine_lr, Adam};

pub const AIR_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct AirConfig {
    /// Hidden width; 0 makes the encoder a single affine map.
    pub hidden: usize,
    pub out_dim: usize,
    pub batch_size: usize,
    /// Sampled in-batch negatives per row; `None` uses all `batch − 1`.
    pub negatives: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    /// Multiplier on cosines before the softmax.
    pub logit_scale: f64,
    pub seed: u64,
}

impl Default for AirConfig {
    fn default() -> Self {
        Self {
            hidden: 0,
            out_dim: AIR_DIM,
            batch_size: 256,
            negatives: None,
            epochs: 5,
            lr: 0.002,
            logit_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AirModel {
    pub input_dim: usize,
    pub out_dim: usize,
    pub store: ParamStore,
    pub layers: Vec<(ParamId, ParamId)>,
}

impl AirModel {
    pub fn new(input_dim: usize, cfg: &AirConfig, rng: &mut Stream) -> Result<Self> {
        if input_dim == 0 || cfg.out_dim == 0 {
            return Err(Error::Config("AIR encoder widths must be positive".into()));
        }
        let mut widths = vec![input_dim];
        if cfg.hidden > 0 {
            widths.push(cfg.hidden);
        }
        widths.push(cfg.out_dim);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        for (l, w) in widths.windows(2).enumerate() {
            let weight = Tensor::randn(&[w[0], w[1]], 1.0 / (w[0] as f64).sqrt(), rng);
            layers.push((
                store.add(format!("air.layer{l}.w"), weight, true)?,
                store.add(format!("air.layer{l}.b"), Tensor::zeros(&[w[1]]), true)?,
            ));
        }
        Ok(Self {
            input_dim,
            out_dim: cfg.out_dim,
            store,
            layers,
        })
    }

    /// Encoder on the tape. Both towers call this with the same store, so
    /// they bind the very same parameter nodes.
    pub fn encode_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.leaky_relu(h, crate::adsformer::LEAKY_SLOPE)?;
            }
            let (w, b) = (g.param(&self.store, *w), g.param(&self.store, *b));
            h = g.matmul(h, w)?;
            h = g.add_row(h, b)?;
        }
        Ok(h)
    }

    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let e = self.encode_var(&mut g, x)?;
        Ok(g.value(e).clone().with_requires_grad(false))
    }

    /// `C[i][j] = cos(enc(src_i), enc(cand_j))`.
    pub fn cosine_matrix(&self, src: &Tensor, cand: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let c = cosine_var(&mut g, self, src, cand)?;
        Ok(g.value(c).clone().with_requires_grad(false))
    }
}

fn cosine_var(g: &mut Graph, model: &AirModel, src: &Tensor, cand: &Tensor) -> Result<Var> {
    let xs = g.constant(src.clone());
    let xc = g.constant(cand.clone());
    let es = model.encode_var(g, xs)?;
    let ec = model.encode_var(g, xc)?;
    let ns = g.l2_normalize(es);
    let nc = g.l2_normalize(ec);
    g.matmul_nt(ns, nc)
}

/// Softmax cross-entropy of each row of `cos[n, n]` against its diagonal,
/// restricted to the diagonal plus `negatives` sampled off-diagonal columns.
pub fn in_batch_softmax_loss(
    g: &mut Graph,
    cos: Var,
    negatives: usize,
    logit_scale: f64,
    rng: &mut Stream,
) -> Result<Var> {
    let n = g.shape(cos)[0];
    if n < 2 {
        return Err(Error::InvalidArgument(
            "in-batch softmax needs at least two pairs".into(),
        ));
    }
    if negatives == 0 || negatives > n - 1 {
        return Err(Error::InvalidArgument(format!(
            "{negatives} negatives requested from a batch of {n}"
        )));
    }
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        allowed[i * n + i] = true;
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        if negatives < n - 1 {
            rng.shuffle(&mut others);
        }
        for &j in &others[..negatives] {
            allowed[i * n + j] = true;
        }
    }
    let logits = g.scale(cos, logit_scale);
    let targets: Vec<usize> = (0..n).collect();
    g.softmax_cross_entropy(logits, &targets, Some(&allowed))
}

/// Mean in-batch loss of one batch of `(source, candidate)` feature rows.
pub fn air_batch_loss(
    g: &mut Graph,
    model: &AirModel,
    src: &Tensor,
    cand: &Tensor,
    negatives: usize,
    logit_scale: f64,
    rng: &mut Stream,
) -> Result<Var> {
    if src.shape() != cand.shape() {
        return Err(Error::shape("air batch", src.shape(), cand.shape()));
    }
    let cos = cosine_var(g, model, src, cand)?;
    in_batch_softmax_loss(g, cos, negatives, logit_scale, rng)
}

fn gather_rows(features: &Tensor, idx: impl Iterator<Item = usize>) -> Result<Tensor> {
    let d = features.cols();
    let mut data = Vec::new();
    let mut n = 0;
    for i in idx {
        data.extend_from_slice(features.row(i));
        n += 1;
    }
    Tensor::new(&[n, d], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AirTraining {
    pub model: AirModel,
    pub losses: Vec<f64>,
}

/// Trains the encoder on index pairs into `features` (one row per
/// listing). Trailing partial batches smaller than two pairs are skipped.
pub fn train_air(
    features: &Tensor,
    pairs: &[(usize, usize)],
    cfg: &AirConfig,
) -> Result<AirTraining> {
    if cfg.batch_size < 2 {
        return Err(Error::Config("AIR batch size must be at least 2".into()));
    }
    if pairs.len() < 2 {
        return Err(Error::EmptyCorpus(
            "AIR needs at least two training pairs".into(),
        ));
    }
    let root = Stream::new(cfg.seed).substream("air");
    let mut model = AirModel::new(features.cols(), cfg, &mut root.substream("init"))?;
    let per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut adam = Adam::new(cfg.lr);
    let mut neg_rng = root.substream("negatives");
    let mut losses = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        root.substream(&format!("epoch{epoch}")).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let src = gather_rows(features, chunk.iter().map(|&i| pairs[i].0))?;
            let cand = gather_rows(features, chunk.iter().map(|&i| pairs[i].1))?;
            let negs = cfg
                .negatives
                .unwrap_or(chunk.len() - 1)
                .min(chunk.len() - 1);
            let mut g = Graph::new();
            let loss = air_batch_loss(
                &mut g,
                &model,
                &src,
                &cand,
                negs,
                cfg.logit_scale,
                &mut neg_rng,
            )?;
            g.backward(loss)?;
            losses.push(g.data(loss)[0]);
            let grads = g.param_grads();
            adam.step(&mut model.store, &grads, cosine_lr(step, total, cfg.lr))?;
            step += 1;
        }
    }
    Ok(AirTraining { model, losses })
}

/// Fraction of rows whose best-scoring candidate within their batch of
/// `batch` consecutive pairs is their own. Incomplete final batches are
/// dropped.
pub fn retrieval_accuracy(
    model: &AirModel,
    features: &Tensor,
    pairs: &[(usize, usize)],
    batch: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in pairs.chunks_exact(batch.max(2)) {
        let src = gather_rows(features, chunk.iter().map(|p| p.0))?;
        let cand = gather_rows(features, chunk.iter().map(|p| p.1))?;
        let c = model.cosine_matrix(&src, &cand)?;
        for i in 0..chunk.len() {
            let row = c.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            hits += usize::from(best == i);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument(
            "not enough pairs for one retrieval batch".into(),
        ));
    }
    Ok(hits as f64 / total as f64)
}

/// Frozen `[rows, out_dim]` table of unit-normalized encodings; rows with
/// `known[r] == false` (out-of-vocabulary buckets) are zero.
pub fn air_table(model: &AirModel, features: &Tensor, known: &[bool]) -> Result<EmbeddingTable> {
    if known.len() != features.rows() {
        return Err(Error::shape("air table", features.shape(), &[known.len()]));
    }
    let mut enc = model.encode(features)?;
    for (r, k) in known.iter().enumerate() {
        let row = enc.row_mut(r);
        if *k {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= n);
        } else {
            row.fill(0.0);
        }
    }
    EmbeddingTable::frozen("air", enc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_way_softmax_example() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::new(&[2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap());
        let l = in_batch_softmax_loss(&mut g, c, 1, 1.0, &mut Stream::new(0)).unwrap();
        let e = std::f64::consts::E;
        assert!((g.data(l)[0] + (e / (e + 1.0 / e)).ln()).abs() < 1e-12);
        assert!((g.data(l)[0] - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn identical_inputs_give_uniform_softmax() {
        let cfg = AirConfig {
            out_dim: 8,
            ..AirConfig::default()
        };
        let m = AirModel::new(5, &cfg, &mut Stream::new(1)).unwrap();
        let x = Tensor::new(&[4, 5], [0.1, -0.4, 0.3, 0.9, 0.2].repeat(4)).unwrap();
        let mut g = Graph::new();
        let l = air_batch_loss(&mut g, &m, &x, &x, 3, 1.0, &mut Stream::new(2)).unwrap();
        assert!((g.data(l)[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let m = AirModel::new(3, &AirConfig::default(), &mut Stream::new(1)).unwrap();
        let x = Tensor::zeros(&[1, 3]);
        let mut g = Graph::new();
        assert!(air_batch_loss(&mut g, &m, &x, &x, 1, 1.0, &mut Stream::new(0)).is_err());
    }
}
