//! Deep-and-cross ranking models over `[context ; u]`, their objective and
//! the checkpoint format.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::adsformer::{adpm_forward, Adpm, AdpmBatch, AdpmConfig, AdpmVocabs, LEAKY_SLOPE};
use crate::autograd::{sigmoid, Graph, Var, PROB_CLAMP};
use crate::embeddings::PretrainedBundle;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Stream;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Ctr,
    Pccvr,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctr" => Ok(Task::Ctr),
            "pccvr" => Ok(Task::Pccvr),
            _ => Err(Error::Config(format!("unknown task `{s}` (ctr|pccvr)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ctr => "ctr",
            Task::Pccvr => "pccvr",
        })
    }
}

/// How the cross and deep stacks are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Topology {
    /// Both stacks read the wide input; their outputs are concatenated.
    #[default]
    Parallel,
    /// The deep stack reads the cross stack's output.
    Serial,
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Topology::Parallel),
            "serial" => Ok(Topology::Serial),
            _ => Err(Error::Config(format!(
                "unknown topology `{s}` (parallel|serial)"
            ))),
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::Parallel => "parallel",
            Topology::Serial => "serial",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingConfig {
    pub task: Task,
    pub num_cross: usize,
    /// Full-scale deep widths; each is divided by `width_divisor`.
    pub deep_widths: Vec<usize>,
    pub width_divisor: usize,
    pub topology: Topology,
}

impl RankingConfig {
    pub fn ctr() -> Self {
        Self {
            task: Task::Ctr,
            num_cross: 4,
            deep_widths: vec![5000, 2500, 250, 500],
            width_divisor: 50,
            topology: Topology::Parallel,
        }
    }

    pub fn pccvr() -> Self {
        Self {
            task: Task::Pccvr,
            num_cross: 2,
            deep_widths: vec![240, 120],
            width_divisor: 4,
            topology: Topology::Parallel,
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Ctr => Self::ctr(),
            Task::Pccvr => Self::pccvr(),
        }
    }

    /// Desk-scale widths, at least 1 each.
    pub fn deep_dims(&self) -> Vec<usize> {
        let d = self.width_divisor.max(1);
        self.deep_widths.iter().map(|w| (w / d).max(1)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_divisor == 0 {
            return Err(Error::Config("width_divisor must be positive".into()));
        }
        if self.num_cross == 0 && self.deep_widths.is_empty() {
            return Err(Error::Config(
                "ranking model needs a cross or a deep layer".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeepParams {
    pub w: ParamId,
    pub b: ParamId,
    pub gain: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingModel {
    pub config: RankingConfig,
    pub context_dim: usize,
    pub adpm: Option<Adpm>,
    pub cross: Vec<CrossParams>,
    pub deep: Vec<DeepParams>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// One minibatch: context features, optional sequence inputs and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingBatch {
    pub context: Tensor,
    pub adpm: Option<AdpmBatch>,
    pub labels: Vec<f64>,
}

impl RankingBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub probs: Var,
    pub u: Option<Var>,
    /// Batch `(mean, variance)` per deep layer (training mode only).
    pub bn_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

fn affine_init(fan_in: usize, fan_out: usize, rng: &mut Stream) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl RankingModel {
    /// Registers the model in `store`. With `adpm` the wide input gains the
    /// personalization vector; without it this is the baseline.
    pub fn new(
        config: &RankingConfig,
        context_dim: usize,
        adpm: Option<(&AdpmConfig, &AdpmVocabs)>,
        store: &mut ParamStore,
        rng: &mut Stream,
    ) -> Result<Self> {
        config.validate()?;
        let adpm = match adpm {
            Some((c, v)) => Some(Adpm::new(c, v, store, &mut rng.substream("adpm"))?),
            None => None,
        };
        let d_in = context_dim + adpm.as_ref().map_or(0, |a| a.config.output_width());
        if d_in == 0 {
            return Err(Error::Config("wide input has zero width".into()));
        }
        let mut r = rng.substream("ranking");
        let mut cross = Vec::new();
        for l in 0..config.num_cross {
            cross.push(CrossParams {
                w: store.add(
                    format!("cross{l}.w"),
                    Tensor::randn(&[d_in, d_in], 0.1 / (d_in as f64).sqrt(), &mut r),
                    true,
                )?,
                b: store.add(format!("cross{l}.b"), Tensor::zeros(&[d_in]), true)?,
            });
        }
        let mut deep = Vec::new();
        let mut prev = d_in;
        for (l, &w) in config.deep_dims().iter().enumerate() {
            deep.push(DeepParams {
                w: store.add(format!("deep{l}.w"), affine_init(prev, w, &mut r), true)?,
                b: store.add(format!("deep{l}.b"), Tensor::zeros(&[w]), true)?,
                gain: store.add(format!("deep{l}.bn_gain"), Tensor::filled(&[w], 1.0), true)?,
                beta: store.add(format!("deep{l}.bn_beta"), Tensor::zeros(&[w]), true)?,
                running_mean: store.add(
                    format!("deep{l}.bn_running_mean"),
                    Tensor::zeros(&[w]),
                    false,
                )?,
                running_var: store.add(
                    format!("deep{l}.bn_running_var"),
                    Tensor::filled(&[w], 1.0),
                    false,
                )?,
            });
            prev = w;
        }
        let deep_out = config.deep_dims().last().copied();
        let head_in = match (config.topology, config.num_cross > 0, deep_out) {
            (_, _, None) => d_in,
            (Topology::Serial, _, Some(w)) => w,
            (Topology::Parallel, true, Some(w)) => d_in + w,
            (Topology::Parallel, false, Some(w)) => w,
        };
        let head_w = store.add("head.w", affine_init(head_in, 1, &mut r), true)?;
        let head_b = store.add("head.b", Tensor::zeros(&[1]), true)?;
        Ok(Self {
            config: config.clone(),
            context_dim,
            adpm,
            cross,
            deep,
            head_w,
            head_b,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.context_dim + self.adpm.as_ref().map_or(0, |a| a.config.output_width())
    }

    /// Moves batch-norm running statistics towards the batch statistics of a
    /// training step.
    pub fn update_running_stats(&self, store: &mut ParamStore, stats: &[(Vec<f64>, Vec<f64>)]) {
        for (layer, (mean, var)) in self.deep.iter().zip(stats) {
            for (id, batch) in [(layer.running_mean, mean), (layer.running_var, var)] {
                let t = &mut store.get_mut(id).tensor;
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
        }
    }
}

/// `x0 ⊙ (x_l·W + b) + x_l` on row-major `[n, d]` inputs.
pub fn cross_layer(g: &mut Graph, x0: Var, xl: Var, w: Var, b: Var) -> Result<Var> {
    if g.shape(x0) != g.shape(xl) {
        return Err(Error::shape("cross_layer", g.shape(x0), g.shape(xl)));
    }
    let h = g.matmul(xl, w)?;
    let h = g.add_row(h, b)?;
    let h = g.mul(x0, h)?;
    g.add(h, xl)
}

pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    model: &RankingModel,
    pretrained: &PretrainedBundle,
    batch: &RankingBatch,
    training: bool,
    rng: &mut Stream,
) -> Result<ForwardOutput> {
    if batch.context.shape() != [batch.len(), model.context_dim] {
        return Err(Error::shape(
            "ranking context",
            batch.context.shape(),
            &[batch.len(), model.context_dim],
        ));
    }
    let ctx = g.constant(batch.context.clone());
    let u = match (&model.adpm, &batch.adpm) {
        (Some(adpm), Some(ab)) => {
            Some(adpm_forward(g, store, adpm, pretrained, ab, training, rng)?.u)
        }
        (None, _) => None,
        (Some(_), None) => {
            return Err(Error::Config(
                "personalized model needs sequence inputs".into(),
            ))
        }
    };
    let x0 = match u {
        Some(u) => g.concat(&[ctx, u])?,
        None => ctx,
    };

    let mut x = x0;
    for c in &model.cross {
        let (w, b) = (g.param(store, c.w), g.param(store, c.b));
        x = cross_layer(g, x0, x, w, b)?;
    }
    let cross_out = x;

    let mut h = match model.config.topology {
        Topology::Parallel => x0,
        Topology::Serial => cross_out,
    };
    let mut bn_stats = Vec::new();
    for d in &model.deep {
        let (w, b) = (g.param(store, d.w), g.param(store, d.b));
        let z = g.matmul(h, w)?;
        let z = g.add_row(z, b)?;
        let (gain, beta) = (g.param(store, d.gain), g.param(store, d.beta));
        let (z, mean, var) = if training {
            g.batch_norm(z, gain, beta, BN_EPS, None)?
        } else {
            let (m, v) = (
                store.tensor(d.running_mean).data(),
                store.tensor(d.running_var).data(),
            );
            g.batch_norm(z, gain, beta, BN_EPS, Some((m, v)))?
        };
        if training {
            bn_stats.push((mean, var));
        }
        h = g.leaky_relu(z, LEAKY_SLOPE)?;
    }

    let head_in = match (
        model.deep.is_empty(),
        model.config.topology,
        model.cross.is_empty(),
    ) {
        (true, _, _) => cross_out,
        (false, Topology::Serial, _) | (false, Topology::Parallel, true) => h,
        (false, Topology::Parallel, false) => g.concat(&[cross_out, h])?,
    };
    let (hw, hb) = (g.param(store, model.head_w), g.param(store, model.head_b));
    let logits = g.matmul(head_in, hw)?;
    let logits = g.add_row(logits, hb)?;
    let logits = g.reshape(logits, &[batch.len()])?;
    let probs = g.sigmoid(logits);
    Ok(ForwardOutput {
        logits,
        probs,
        u,
        bn_stats,
    })
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: &[f64], y: &[f64]) -> f64 {
    let n = p.len().max(1) as f64;
    p.iter()
        .zip(y)
        .map(|(p, y)| {
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
        })
        .sum::<f64>()
        / n
}

/// Logits and probabilities in evaluation mode.
pub fn predict(
    store: &ParamStore,
    model: &RankingModel,
    pretrained: &PretrainedBundle,
    batch: &RankingBatch,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let mut rng = Stream::new(0);
    let out = forward(&mut g, store, model, pretrained, batch, false, &mut rng)?;
    let logits = g.data(out.logits).to_vec();
    let probs = logits.iter().map(|z| sigmoid(*z)).collect();
    Ok((logits, probs))
}

// ----- checkpoints ---------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADPMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes `store` with a free-text manifest. Layout: magic, version,
/// manifest length and bytes, section count, then per section the name,
/// trainable flag, rank, dims (u64) and f64 data, all little endian, and a
/// trailing CRC-32 of everything before it.
pub fn encode_checkpoint(store: &ParamStore, manifest: &str) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(manifest.as_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(u8::from(p.trainable));
        let shape = p.tensor.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in p.tensor.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated: need {n} more bytes"),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            message: "invalid utf-8".into(),
        })
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(String, ParamStore)> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad checkpoint magic".into(),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Format {
            offset: body.len() as u64,
            message: "checksum mismatch".into(),
        });
    }
    let mut r = Reader {
        bytes: body,
        pos: 8,
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 8,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let manifest = r.string()?;
    let n = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = r.string()?;
        let trainable = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| r.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        store.add(name, Tensor::new(&shape, data)?, trainable)?;
    }
    if r.pos != body.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: "trailing bytes after last section".into(),
        });
    }
    Ok((manifest, store))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, manifest: &str) -> Result<()> {
    fs::write(path, encode_checkpoint(store, manifest)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(String, ParamStore)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
