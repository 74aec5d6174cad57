//! The adSformer sequence encoder and the three-component personalization
//! module built around it.
//!
//! Component one runs a transformer block over `[target; recent views]` and
//! pools the result. Component two average-pools frozen pretrained listing
//! tables over every listing sequence. Component three average-pools small
//! trainable tables, one per `(entity, action)` sequence. The user vector
//! `u` concatenates whichever components are enabled, in that order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var, MASK_LOGIT};
use crate::embeddings::{avg_pool_sequence, lookup_var, Flavor, PretrainedBundle};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Stream;
use crate::sequences::{build_vocab, Action, Dataset, EntityKind, PaddedBatch, SeqKey, Vocabulary};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const POSITION_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Max,
    Avg,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "avg" => Ok(Pooling::Avg),
            _ => Err(Error::Config(format!(
                "unknown pooling mode `{s}` (max|avg)"
            ))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Avg => "avg",
        })
    }
}

/// A component-three sequence and the width of its table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LearnedSpec {
    pub key: SeqKey,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdpmConfig {
    pub use_component1: bool,
    pub use_component2: bool,
    pub use_component3: bool,
    pub pooling: Pooling,
    /// Pool over the target position as well as the sequence.
    pub pool_includes_target: bool,
    /// Pretrained flavors, kept in canonical order.
    pub flavors: Vec<Flavor>,
    pub learned: Vec<LearnedSpec>,
    pub encoder_key: SeqKey,
    pub d1: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    /// Sequence length M (the block sees M + 1 positions).
    pub max_len: usize,
    pub dropout: f64,
    pub ffn_mult: usize,
}

fn default_learned() -> Vec<LearnedSpec> {
    let mut v = Vec::new();
    for (entity, dim) in [
        (EntityKind::Listing, 32),
        (EntityKind::Shop, 16),
        (EntityKind::Taxonomy, 8),
    ] {
        for action in [Action::Favorite, Action::CartAdd, Action::Purchase] {
            v.push(LearnedSpec {
                key: SeqKey::new(entity, action),
                dim,
            });
        }
    }
    v
}

impl AdpmConfig {
    /// Deployed CTR setting: three heads, AIR pretrained table.
    pub fn ctr() -> Self {
        Self {
            use_component1: true,
            use_component2: true,
            use_component3: true,
            pooling: Pooling::Max,
            pool_includes_target: true,
            flavors: vec![Flavor::Air],
            learned: default_learned(),
            encoder_key: SeqKey::new(EntityKind::Listing, Action::View),
            d1: 32,
            num_heads: 3,
            num_blocks: 1,
            max_len: crate::sequences::DEFAULT_MAX_LEN,
            dropout: 0.0,
            ffn_mult: 4,
        }
    }

    /// Deployed PCCVR setting: two heads, skip-gram and visual tables.
    pub fn pccvr() -> Self {
        Self {
            num_heads: 2,
            flavors: vec![Flavor::Visual, Flavor::Skipgram],
            ..Self::ctr()
        }
    }

    pub fn with_components(mut self, c1: bool, c2: bool, c3: bool) -> Self {
        self.use_component1 = c1;
        self.use_component2 = c2;
        self.use_component3 = c3;
        self
    }

    /// Width of each attention head: `ceil(d1 / heads)`.
    pub fn head_dim(&self) -> usize {
        self.d1.div_ceil(self.num_heads.max(1))
    }

    pub fn o1_width(&self) -> usize {
        if self.use_component1 {
            self.d1
        } else {
            0
        }
    }

    pub fn o2_width(&self) -> usize {
        if self.use_component2 {
            self.flavors.iter().map(|f| f.dim()).sum()
        } else {
            0
        }
    }

    pub fn o3_width(&self) -> usize {
        if self.use_component3 {
            self.learned.iter().map(|s| s.dim).sum()
        } else {
            0
        }
    }

    pub fn output_width(&self) -> usize {
        self.o1_width() + self.o2_width() + self.o3_width()
    }

    fn normalize(&mut self) {
        self.flavors.sort();
        self.flavors.dedup();
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.use_component1 || self.use_component2 || self.use_component3) {
            return bad("at least one ADPM component must be enabled".into());
        }
        if self.use_component2 && self.flavors.is_empty() {
            return bad("component two is enabled but no pretrained flavor is configured".into());
        }
        if self.use_component3 && self.learned.is_empty() {
            return bad("component three is enabled but no learned sequence is configured".into());
        }
        if let Some(s) = self.learned.iter().find(|s| s.dim == 0) {
            return bad(format!("learned table for {} has zero width", s.key));
        }
        if self.use_component1 {
            if self.encoder_key.entity != EntityKind::Listing {
                return bad(format!(
                    "the sequence encoder needs a listing sequence, got {}",
                    self.encoder_key
                ));
            }
            if self.d1 == 0 || self.num_heads == 0 || self.num_blocks == 0 || self.max_len == 0 {
                return bad("d1, num_heads, num_blocks and max_len must be positive".into());
            }
            if self.ffn_mult == 0 {
                return bad("ffn_mult must be positive".into());
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// One vocabulary per entity kind, shared by every component.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdpmVocabs {
    pub by_entity: BTreeMap<EntityKind, Vocabulary>,
}

impl AdpmVocabs {
    pub fn get(&self, e: EntityKind) -> Result<&Vocabulary> {
        self.by_entity
            .get(&e)
            .ok_or_else(|| Error::Config(format!("no vocabulary for entity `{e}`")))
    }

    pub fn listing(&self) -> Result<&Vocabulary> {
        self.get(EntityKind::Listing)
    }
}

/// Builds the per-entity vocabularies from a training set. The listing
/// corpus includes candidates as well as every listing sequence.
pub fn build_vocabs(
    data: &Dataset,
    k: &BTreeMap<EntityKind, usize>,
    num_oov: usize,
) -> Result<AdpmVocabs> {
    let mut by_entity = BTreeMap::new();
    let mut entities: Vec<EntityKind> = data.keys.iter().map(|k| k.entity).collect();
    entities.push(EntityKind::Listing);
    entities.sort();
    entities.dedup();
    for e in entities {
        let size = *k
            .get(&e)
            .ok_or_else(|| Error::Config(format!("no vocabulary size for entity `{e}`")))?;
        let mut corpus: Vec<&str> = Vec::new();
        if e == EntityKind::Listing {
            corpus.extend(data.rows.iter().map(|r| r.candidate_id.as_str()));
        }
        for (ki, key) in data.keys.iter().enumerate() {
            if key.entity == e {
                for r in &data.rows {
                    corpus.extend(r.sequences[ki].iter().map(|t| t.id.as_str()));
                }
            }
        }
        by_entity.insert(e, build_vocab(corpus, size, num_oov)?);
    }
    Ok(AdpmVocabs { by_entity })
}

/// Index-space inputs of one ADPM batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdpmBatch {
    /// Candidate listing indices.
    pub targets: Vec<usize>,
    /// Encoder sequence, truncated to `max_len` and padded to the longest
    /// row of the batch.
    pub encoder: PaddedBatch,
    /// Every listing sequence of a row, concatenated.
    pub listing_union: PaddedBatch,
    /// One batch per configured learned sequence.
    pub learned: Vec<PaddedBatch>,
}

fn padded(rows: Vec<Vec<usize>>, width: Option<usize>) -> PaddedBatch {
    let w = width.unwrap_or_else(|| rows.iter().map(Vec::len).max().unwrap_or(0).max(1));
    PaddedBatch::from_indices(&rows, w)
}

impl AdpmBatch {
    pub fn from_dataset(
        data: &Dataset,
        rows: &[usize],
        vocabs: &AdpmVocabs,
        config: &AdpmConfig,
    ) -> Result<Self> {
        let lv = vocabs.listing()?;
        let targets = rows
            .iter()
            .map(|&r| lv.index(&data.rows[r].candidate_id))
            .collect();
        let ids_of = |key: SeqKey, vocab: &Vocabulary| -> Vec<Vec<usize>> {
            rows.iter()
                .map(|&r| {
                    data.sequence_ids(r, key)
                        .into_iter()
                        .map(|id| vocab.index(id))
                        .collect()
                })
                .collect()
        };
        let enc_rows = ids_of(config.encoder_key, lv);
        let enc_width = enc_rows
            .iter()
            .map(Vec::len)
            .max()
            .unwrap_or(0)
            .clamp(1, config.max_len.max(1));
        let encoder = padded(enc_rows, Some(enc_width));
        let listing_keys: Vec<SeqKey> = data
            .keys
            .iter()
            .copied()
            .filter(|k| k.entity == EntityKind::Listing)
            .collect();
        let union = rows
            .iter()
            .map(|&r| {
                listing_keys
                    .iter()
                    .flat_map(|k| data.sequence_ids(r, *k))
                    .map(|id| lv.index(id))
                    .collect()
            })
            .collect();
        let mut learned = Vec::with_capacity(config.learned.len());
        for spec in &config.learned {
            learned.push(padded(ids_of(spec.key, vocabs.get(spec.key.entity)?), None));
        }
        Ok(Self {
            targets,
            encoder,
            listing_union: padded(union, None),
            learned,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wh: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

/// Attention projections already on the tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wh: Var,
}

/// Parameter handles of an ADPM instance. Frozen pretrained tables are not
/// parameters; they are passed to [`adpm_forward`] separately.
#[derive(Debug, Clone, PartialEq)]
pub struct Adpm {
    pub config: AdpmConfig,
    pub listing_table: Option<ParamId>,
    pub position_table: Option<ParamId>,
    pub blocks: Vec<BlockParams>,
    pub learned_tables: Vec<ParamId>,
}

fn glorot(rows: usize, cols: usize, rng: &mut Stream) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

impl Adpm {
    /// Registers all trainable tensors under `adpm.*` in `store`.
    pub fn new(
        config: &AdpmConfig,
        vocabs: &AdpmVocabs,
        store: &mut ParamStore,
        rng: &mut Stream,
    ) -> Result<Self> {
        let mut config = config.clone();
        config.normalize();
        config.validate()?;
        let mut adpm = Adpm {
            config: config.clone(),
            listing_table: None,
            position_table: None,
            blocks: Vec::new(),
            learned_tables: Vec::new(),
        };
        if config.use_component1 {
            let d1 = config.d1;
            let rows = vocabs.listing()?.table_rows();
            let emb = Tensor::randn(&[rows, d1], 1.0 / (d1 as f64).sqrt(), rng);
            adpm.listing_table = Some(store.add("adpm.listing_emb", emb, true)?);
            let pos = Tensor::randn(&[config.max_len + 1, d1], POSITION_INIT_STD, rng);
            adpm.position_table = Some(store.add("adpm.position_emb", pos, true)?);
            let inner = config.num_heads * config.head_dim();
            let ffn = config.ffn_mult * d1;
            for b in 0..config.num_blocks {
                let mut add = |n: &str, t: Tensor| store.add(format!("adpm.block{b}.{n}"), t, true);
                adpm.blocks.push(BlockParams {
                    wq: add("wq", glorot(d1, inner, rng))?,
                    wk: add("wk", glorot(d1, inner, rng))?,
                    wv: add("wv", glorot(d1, inner, rng))?,
                    wh: add("wh", glorot(inner, d1, rng))?,
                    ln1_gain: add("ln1_gain", Tensor::filled(&[d1], 1.0))?,
                    ln1_bias: add("ln1_bias", Tensor::zeros(&[d1]))?,
                    ffn_w1: add("ffn_w1", glorot(d1, ffn, rng))?,
                    ffn_b1: add("ffn_b1", Tensor::zeros(&[ffn]))?,
                    ffn_w2: add("ffn_w2", glorot(ffn, d1, rng))?,
                    ffn_b2: add("ffn_b2", Tensor::zeros(&[d1]))?,
                    ln2_gain: add("ln2_gain", Tensor::filled(&[d1], 1.0))?,
                    ln2_bias: add("ln2_bias", Tensor::zeros(&[d1]))?,
                });
            }
        }
        if config.use_component3 {
            for spec in &config.learned {
                let rows = vocabs.get(spec.key.entity)?.table_rows();
                let t = Tensor::randn(&[rows, spec.dim], 1.0 / (spec.dim as f64).sqrt(), rng);
                adpm.learned_tables.push(store.add(
                    format!("adpm.learned.{}", spec.key),
                    t,
                    true,
                )?);
            }
        }
        Ok(adpm)
    }

    /// Checks that every configured flavor has a table covering the listing
    /// vocabulary.
    pub fn check_pretrained(
        &self,
        pretrained: &PretrainedBundle,
        vocabs: &AdpmVocabs,
    ) -> Result<()> {
        if !self.config.use_component2 {
            return Ok(());
        }
        let rows = vocabs.listing()?.table_rows();
        for f in &self.config.flavors {
            let t = pretrained.require(*f)?;
            if t.vocab_size() < rows {
                return Err(Error::Config(format!(
                    "{f} table has {} rows but the listing vocabulary needs {rows}",
                    t.vocab_size()
                )));
            }
        }
        Ok(())
    }
}

/// Additive key mask `[batch·heads, seq, seq]`: 0 for real keys, −1e9 for
/// padding.
fn key_mask_tensor(mask: &[bool], batch: usize, seq: usize, heads: usize) -> Result<Tensor> {
    let mut data = vec![0.0; batch * heads * seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let base = (b * heads + h) * seq * seq;
            for q in 0..seq {
                for k in 0..seq {
                    if !mask[b * seq + k] {
                        data[base + q * seq + k] = MASK_LOGIT;
                    }
                }
            }
        }
    }
    Tensor::new(&[batch * heads, seq, seq], data)
}

/// Multi-head scaled dot-product self-attention over `x[batch, seq, d]`.
/// Padding keys (mask false) get a −1e9 additive logit.
pub fn mhsa(
    g: &mut Graph,
    x: Var,
    mask: &[bool],
    w: &AttentionWeights,
    heads: usize,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || mask.len() != s[0] * s[1] {
        return Err(Error::shape("mhsa", &s, &[mask.len()]));
    }
    let (b, seq, d) = (s[0], s[1], s[2]);
    let inner = g.shape(w.wq)[1];
    if heads == 0 || !inner.is_multiple_of(heads) {
        return Err(Error::shape("mhsa heads", &[inner], &[heads]));
    }
    let head_dim = inner / heads;
    let flat = g.reshape(x, &[b * seq, d])?;
    let project = |g: &mut Graph, wm: Var| -> Result<Var> {
        let p = g.matmul(flat, wm)?;
        let p = g.reshape(p, &[b, seq, inner])?;
        g.split_heads(p, heads)
    };
    let q = project(g, w.wq)?;
    let k = project(g, w.wk)?;
    let v = project(g, w.wv)?;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let m = g.constant(key_mask_tensor(mask, b, seq, heads)?);
    let scores = g.add(scores, m)?;
    let attn = g.softmax(scores);
    let ctx = g.batch_matmul(attn, v, false)?;
    let ctx = g.merge_heads(ctx, heads)?;
    let ctx = g.reshape(ctx, &[b * seq, inner])?;
    let out = g.matmul(ctx, w.wh)?;
    g.reshape(out, &[b, seq, d])
}

/// One block on `x[batch, seq, d1]`: attention sublayer with residual and
/// layer norm, then LeakyReLU → FFN → dropout with residual and layer norm.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    g: &mut Graph,
    store: &ParamStore,
    p: &BlockParams,
    x: Var,
    mask: &[bool],
    config: &AdpmConfig,
    training: bool,
    rng: &mut Stream,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, seq, d) = (s[0], s[1], s[2]);
    let w = AttentionWeights {
        wq: g.param(store, p.wq),
        wk: g.param(store, p.wk),
        wv: g.param(store, p.wv),
        wh: g.param(store, p.wh),
    };
    let attn = mhsa(g, x, mask, &w, config.num_heads)?;
    let attn = g.dropout(attn, config.dropout, training, rng)?;
    let x1 = g.add(x, attn)?;
    let x1 = g.reshape(x1, &[b * seq, d])?;
    let (g1, b1) = (g.param(store, p.ln1_gain), g.param(store, p.ln1_bias));
    let x1 = g.layer_norm(x1, g1, b1, LAYER_NORM_EPS)?;

    let a = g.leaky_relu(x1, LEAKY_SLOPE)?;
    let (w1, c1) = (g.param(store, p.ffn_w1), g.param(store, p.ffn_b1));
    let h = g.matmul(a, w1)?;
    let h = g.add_row(h, c1)?;
    let (w2, c2) = (g.param(store, p.ffn_w2), g.param(store, p.ffn_b2));
    let f = g.matmul(h, w2)?;
    let f = g.add_row(f, c2)?;
    let f = g.dropout(f, config.dropout, training, rng)?;
    let x2 = g.add(x1, f)?;
    let (g2, b2) = (g.param(store, p.ln2_gain), g.param(store, p.ln2_bias));
    let x2 = g.layer_norm(x2, g2, b2, LAYER_NORM_EPS)?;
    g.reshape(x2, &[b, seq, d])
}

/// Component one: embeds `[target; sequence]`, adds positions, runs the
/// blocks and pools to `[batch, d1]`.
pub fn adsformer_encode(
    g: &mut Graph,
    store: &ParamStore,
    adpm: &Adpm,
    targets: &[usize],
    sequence: &PaddedBatch,
    training: bool,
    rng: &mut Stream,
) -> Result<Var> {
    let cfg = &adpm.config;
    let (Some(table), Some(pos)) = (adpm.listing_table, adpm.position_table) else {
        return Err(Error::Config("component one is disabled".into()));
    };
    let full = sequence.with_leading(targets);
    let (b, seq) = (full.batch_size(), full.width());
    let table = g.param(store, table);
    let emb = lookup_var(g, table, &full)?;
    let pos = g.param(store, pos);
    // Slots past M only occur as padding; they reuse the last row.
    let slots: Vec<usize> = (0..b)
        .flat_map(|_| (0..seq).map(|j| j.min(cfg.max_len)))
        .collect();
    let pe = g.gather(pos, &slots, &[b, seq])?;
    let mut x = g.add(emb, pe)?;
    for p in &adpm.blocks {
        x = block_forward(g, store, p, x, full.mask(), cfg, training, rng)?;
    }
    let mut pool_mask = full.mask().to_vec();
    if !cfg.pool_includes_target {
        // The target stays in the pool only for rows with an empty sequence.
        for (r, len) in sequence.lengths().iter().enumerate() {
            if *len > 0 {
                pool_mask[r * seq] = false;
            }
        }
    }
    match cfg.pooling {
        Pooling::Max => g.global_max_pool(x, &pool_mask),
        Pooling::Avg => g.global_avg_pool(x, &pool_mask),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdpmOutput {
    pub o1: Option<Var>,
    pub o2: Option<Var>,
    pub o3: Option<Var>,
    pub u: Var,
}

/// Full module forward. Returns the component outputs and their
/// concatenation `u`.
pub fn adpm_forward(
    g: &mut Graph,
    store: &ParamStore,
    adpm: &Adpm,
    pretrained: &PretrainedBundle,
    batch: &AdpmBatch,
    training: bool,
    rng: &mut Stream,
) -> Result<AdpmOutput> {
    let cfg = &adpm.config;
    let o1 = if cfg.use_component1 {
        Some(adsformer_encode(
            g,
            store,
            adpm,
            &batch.targets,
            &batch.encoder,
            training,
            rng,
        )?)
    } else {
        None
    };
    let o2 = if cfg.use_component2 {
        let mut parts = Vec::with_capacity(cfg.flavors.len());
        for f in &cfg.flavors {
            let pooled = avg_pool_sequence(pretrained.require(*f)?, &batch.listing_union)?;
            parts.push(g.constant(pooled));
        }
        Some(g.concat(&parts)?)
    } else {
        None
    };
    let o3 = if cfg.use_component3 {
        if batch.learned.len() != adpm.learned_tables.len() {
            return Err(Error::Config(format!(
                "batch carries {} learned sequences, module has {} tables",
                batch.learned.len(),
                adpm.learned_tables.len()
            )));
        }
        let mut parts = Vec::with_capacity(batch.learned.len());
        for (id, pb) in adpm.learned_tables.iter().zip(&batch.learned) {
            let t = g.param(store, *id);
            let e = lookup_var(g, t, pb)?;
            parts.push(g.global_avg_pool(e, pb.mask())?);
        }
        Some(g.concat(&parts)?)
    } else {
        None
    };
    let present: Vec<Var> = [o1, o2, o3].into_iter().flatten().collect();
    let u = g.concat(&present)?;
    Ok(AdpmOutput { o1, o2, o3, u })
}
