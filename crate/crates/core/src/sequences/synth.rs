//! Synthetic marketplace with planted personalization signal.
//!
//! Users hold long-term preference vectors; listings hold attribute vectors
//! clustered by taxonomy, an id-level latent that no side feature reveals,
//! and a shop whose latent vector is independent of listing attributes.
//! Each impression draws a short-term intent, simulates recent actions near
//! that intent, and samples a click from
//!
//! ```text
//! sigmoid(bias + alpha·<pref, attr_c> + beta·<mean attr of recent listings, attr_c>
//!         + gamma·<mean latent of recently engaged shops, attr_c>
//!         + delta·<mean id latent of recently viewed listings, id latent_c>)
//! ```
//!
//! so the `beta`, `gamma` and `delta` terms are visible only through the
//! sequences, and each is best exposed by a different kind of sequence
//! encoding.

use rayon::prelude::*;

use super::{
    truncate_window, Action, ActionEvent, Dataset, EntityKind, Impression, SeqKey, TimedEntity,
};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

pub const VISUAL_DIM: usize = 256;
pub const TEXT_DIM: usize = 256;
pub const AIR_SCALAR_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub num_users: usize,
    pub num_listings: usize,
    pub num_shops: usize,
    pub num_taxonomies: usize,
    pub latent_dim: usize,
    pub id_latent_dim: usize,
    /// Spread of listing attributes around their taxonomy centroid.
    pub taxonomy_spread: f64,
    /// Zipf exponent of listing popularity.
    pub popularity_exponent: f64,
    /// Weight of the attribute signal inside the synthetic visual and text
    /// vectors (the rest is per-listing nuisance of unit norm).
    pub visual_signal: f64,
    pub text_signal: f64,
    /// Number of high-variance nuisance directions shared by all listings
    /// (think lighting or photo style) and their per-direction scale.
    pub style_dims: usize,
    pub style_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_users: 1000,
            num_listings: 400,
            num_shops: 60,
            num_taxonomies: 8,
            latent_dim: 8,
            id_latent_dim: 4,
            taxonomy_spread: 0.6,
            popularity_exponent: 0.6,
            visual_signal: 0.3,
            text_signal: 0.3,
            style_dims: 16,
            style_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub seed: u64,
    pub user_prefs: Tensor,
    pub listing_attrs: Tensor,
    pub listing_id_latents: Tensor,
    pub shop_latents: Tensor,
    pub taxonomy_centroids: Tensor,
    pub listing_shop: Vec<usize>,
    pub listing_taxonomy: Vec<usize>,
    pub listing_popularity: Vec<f64>,
    pub listing_price: Vec<f64>,
    pub visual: Tensor,
    pub text: Tensor,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn unit_rows(rows: usize, dim: usize, rng: &mut Stream) -> Tensor {
    let mut t = Tensor::randn(&[rows, dim], 1.0, rng);
    for i in 0..rows {
        normalize(t.row_mut(i));
    }
    t
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `signal·unit(P·x) + style + isotropic noise`, one row per listing. The
/// style part lives in `style_dims` fixed random directions with a fresh
/// draw per listing, so raw cosines between listings are dominated by it.
fn side_vectors(
    sources: &[Vec<f64>],
    dim: usize,
    signal: f64,
    cfg: &WorldConfig,
    rng: &mut Stream,
) -> Tensor {
    let in_dim = sources.first().map_or(0, Vec::len);
    let proj = Tensor::randn(&[dim, in_dim], 1.0, rng);
    let style = unit_rows(cfg.style_dims, dim, rng);
    let mut out = Tensor::zeros(&[sources.len(), dim]);
    let noise_std = 1.0 / (dim as f64).sqrt();
    for (l, src) in sources.iter().enumerate() {
        let mut s: Vec<f64> = (0..dim).map(|j| dot(proj.row(j), src)).collect();
        normalize(&mut s);
        let z: Vec<f64> = (0..cfg.style_dims)
            .map(|_| cfg.style_scale * rng.normal())
            .collect();
        let row = out.row_mut(l);
        for j in 0..dim {
            let st: f64 = (0..cfg.style_dims).map(|k| z[k] * style.get2(k, j)).sum();
            row[j] = signal * s[j] + st + noise_std * rng.normal();
        }
    }
    out
}

pub fn generate_world(config: &WorldConfig, seed: u64) -> SyntheticWorld {
    let root = Stream::new(seed).substream("world");
    let c = config;
    let dz = c.latent_dim;
    let user_prefs = unit_rows(c.num_users, dz, &mut root.substream("users"));
    let taxonomy_centroids = unit_rows(c.num_taxonomies, dz, &mut root.substream("taxonomies"));
    let shop_latents = unit_rows(c.num_shops, dz, &mut root.substream("shops"));
    let listing_id_latents = unit_rows(c.num_listings, c.id_latent_dim, &mut root.substream("ids"));

    let mut rng = root.substream("listings");
    let mut listing_attrs = Tensor::zeros(&[c.num_listings, dz]);
    let mut listing_taxonomy = Vec::with_capacity(c.num_listings);
    let mut listing_shop = Vec::with_capacity(c.num_listings);
    let mut listing_price = Vec::with_capacity(c.num_listings);
    for l in 0..c.num_listings {
        let t = l % c.num_taxonomies;
        listing_taxonomy.push(t);
        listing_shop.push(rng.below(c.num_shops));
        let row = listing_attrs.row_mut(l);
        for j in 0..dz {
            row[j] = taxonomy_centroids.get2(t, j)
                + c.taxonomy_spread * rng.normal() / (dz as f64).sqrt();
        }
        normalize(row);
        listing_price.push(rng.normal());
    }
    // Popularity rank is a random permutation so it is unrelated to taxonomy.
    let mut ranks: Vec<usize> = (0..c.num_listings).collect();
    rng.shuffle(&mut ranks);
    let listing_popularity: Vec<f64> = ranks
        .iter()
        .map(|r| 1.0 / ((r + 1) as f64).powf(c.popularity_exponent))
        .collect();

    let attrs: Vec<Vec<f64>> = (0..c.num_listings)
        .map(|l| listing_attrs.row(l).to_vec())
        .collect();
    let visual = side_vectors(
        &attrs,
        VISUAL_DIM,
        c.visual_signal,
        c,
        &mut root.substream("visual"),
    );
    let text_src: Vec<Vec<f64>> = (0..c.num_listings)
        .map(|l| {
            let mut v = attrs[l].clone();
            v.extend_from_slice(taxonomy_centroids.row(listing_taxonomy[l]));
            v
        })
        .collect();
    let text = side_vectors(
        &text_src,
        TEXT_DIM,
        c.text_signal,
        c,
        &mut root.substream("text"),
    );

    SyntheticWorld {
        config: config.clone(),
        seed,
        user_prefs,
        listing_attrs,
        listing_id_latents,
        shop_latents,
        taxonomy_centroids,
        listing_shop,
        listing_taxonomy,
        listing_popularity,
        listing_price,
        visual,
        text,
    }
}

fn parse_index(id: &str, prefix: char, bound: usize) -> Option<usize> {
    id.strip_prefix(prefix)?.parse().ok().filter(|i| *i < bound)
}

impl SyntheticWorld {
    pub fn num_listings(&self) -> usize {
        self.config.num_listings
    }

    pub fn user_id(u: usize) -> String {
        format!("u{u}")
    }

    pub fn listing_id(l: usize) -> String {
        format!("l{l}")
    }

    pub fn shop_id(s: usize) -> String {
        format!("s{s}")
    }

    pub fn taxonomy_id(t: usize) -> String {
        format!("t{t}")
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        parse_index(id, 'u', self.config.num_users)
    }

    pub fn listing_index(&self, id: &str) -> Option<usize> {
        parse_index(id, 'l', self.config.num_listings)
    }

    pub fn context_dim(&self) -> usize {
        2 * self.config.latent_dim + 1
    }

    /// Non-sequence features of an impression: user preference, candidate
    /// attributes and candidate price. The unit latent vectors are scaled by
    /// `sqrt(latent_dim)` so every feature has roughly unit variance.
    pub fn context_features(&self, user: usize, candidate: usize) -> Vec<f64> {
        let s = (self.config.latent_dim as f64).sqrt();
        let mut v = Vec::with_capacity(self.context_dim());
        v.extend(self.user_prefs.row(user).iter().map(|x| x * s));
        v.extend(self.listing_attrs.row(candidate).iter().map(|x| x * s));
        v.push(self.listing_price[candidate]);
        v
    }

    /// Context features of every row of `data`, `[rows, context_dim]`.
    pub fn context_matrix(&self, data: &Dataset) -> Result<Tensor> {
        let mut out = Vec::with_capacity(data.len() * self.context_dim());
        for r in &data.rows {
            let u = self
                .user_index(&r.user_id)
                .ok_or_else(|| Error::UnknownEntity(r.user_id.clone()))?;
            let c = self
                .listing_index(&r.candidate_id)
                .ok_or_else(|| Error::UnknownEntity(r.candidate_id.clone()))?;
            out.extend(self.context_features(u, c));
        }
        Tensor::new(&[data.len(), self.context_dim()], out)
    }

    pub fn air_feature_dim(&self) -> usize {
        VISUAL_DIM + TEXT_DIM + AIR_SCALAR_FEATURES
    }

    /// Multimodal input of the retrieval encoder: visual, text and a few
    /// normalized scalars.
    pub fn air_features(&self, l: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.air_feature_dim());
        v.extend_from_slice(self.visual.row(l));
        v.extend_from_slice(self.text.row(l));
        v.push(self.listing_price[l]);
        v.push(self.listing_popularity[l].ln() / 5.0);
        v.push(self.listing_shop[l] as f64 / self.config.num_shops as f64 - 0.5);
        v.push(1.0);
        v
    }

    /// Browsing distribution near `intent`, weighted by popularity.
    fn browse_weights(&self, intent: &[f64], temperature: f64) -> Vec<f64> {
        let scores: Vec<f64> = (0..self.num_listings())
            .map(|l| temperature * dot(intent, self.listing_attrs.row(l)))
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        scores
            .iter()
            .zip(&self.listing_popularity)
            .map(|(s, p)| p * (s - max).exp())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpressionConfig {
    pub rows: usize,
    /// Timestamp of the first impression; row `i` happens `10·i` seconds later.
    pub start_time: u64,
    pub max_len: usize,
    pub window_seconds: u64,
    /// Event ages are uniform in `[0, span_seconds]` before windowing.
    pub span_seconds: u64,
    pub max_views: usize,
    pub max_favorites: usize,
    pub max_cart_adds: usize,
    pub max_purchases: usize,
    /// Weight of long-term preference in the short-term intent.
    pub intent_weight: f64,
    pub browse_temperature: f64,
    /// Probability that the candidate is drawn near the intent rather than
    /// by popularity alone.
    pub relevant_candidate_prob: f64,
    pub click_bias: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub purchase_bias: f64,
    pub purchase_alpha: f64,
    pub purchase_beta: f64,
    pub purchase_gamma: f64,
    pub purchase_delta: f64,
}

impl Default for ImpressionConfig {
    fn default() -> Self {
        Self {
            rows: 20_000,
            start_time: 1_000_000_000,
            max_len: super::DEFAULT_MAX_LEN,
            window_seconds: super::DEFAULT_WINDOW_SECONDS,
            span_seconds: 5400,
            max_views: 10,
            max_favorites: 3,
            max_cart_adds: 3,
            max_purchases: 1,
            intent_weight: 0.5,
            browse_temperature: 6.0,
            relevant_candidate_prob: 0.5,
            click_bias: -3.6,
            alpha: 1.5,
            beta: 1.5,
            gamma: 5.0,
            delta: 6.0,
            purchase_bias: -1.0,
            purchase_alpha: 0.5,
            purchase_beta: 1.0,
            purchase_gamma: 2.5,
            purchase_delta: 1.5,
        }
    }
}

impl ImpressionConfig {
    /// Same generator with every sequence-borne term removed.
    pub fn null_signal(&self) -> Self {
        Self {
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
            purchase_beta: 0.0,
            purchase_gamma: 0.0,
            purchase_delta: 0.0,
            ..self.clone()
        }
    }
}

/// Sequence types emitted by [`generate_impressions`], in column order.
pub fn impression_keys() -> Vec<SeqKey> {
    use Action::*;
    use EntityKind::*;
    let mut keys = vec![SeqKey::new(Listing, View)];
    for e in [Listing, Shop, Taxonomy] {
        for a in [Favorite, CartAdd, Purchase] {
            keys.push(SeqKey::new(e, a));
        }
    }
    keys
}

fn mean_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

fn sigmoid(x: f64) -> f64 {
    crate::autograd::sigmoid(x)
}

/// Draws `cfg.rows` impressions. Row `i` uses its own substream of `rng`, so
/// the result is independent of thread scheduling.
pub fn generate_impressions(
    world: &SyntheticWorld,
    cfg: &ImpressionConfig,
    rng: &Stream,
) -> Dataset {
    let keys = impression_keys();
    let rows: Vec<Impression> = (0..cfg.rows)
        .into_par_iter()
        .map(|i| impression(world, cfg, &keys, i, &mut rng.substream(&i.to_string())))
        .collect();
    Dataset { keys, rows }
}

fn impression(
    world: &SyntheticWorld,
    cfg: &ImpressionConfig,
    keys: &[SeqKey],
    row: usize,
    rng: &mut Stream,
) -> Impression {
    let wc = &world.config;
    let dz = wc.latent_dim;
    let user = rng.below(wc.num_users);
    let pref = world.user_prefs.row(user);
    let mut noise: Vec<f64> = (0..dz).map(|_| rng.normal()).collect();
    normalize(&mut noise);
    let rho = cfg.intent_weight;
    let mut intent: Vec<f64> = pref
        .iter()
        .zip(&noise)
        .map(|(p, z)| rho * p + (1.0 - rho * rho).max(0.0).sqrt() * z)
        .collect();
    normalize(&mut intent);
    let weights = world.browse_weights(&intent, cfg.browse_temperature);

    let now = cfg.start_time + row as u64 * 10;
    let mut events: Vec<(ActionEvent, usize)> = Vec::new();
    let counts = [
        (Action::View, cfg.max_views),
        (Action::Favorite, cfg.max_favorites),
        (Action::CartAdd, cfg.max_cart_adds),
        (Action::Purchase, cfg.max_purchases),
    ];
    for (action, max) in counts {
        let n = rng.below(max + 1);
        for _ in 0..n {
            let l = rng.categorical(&weights);
            let ts = now - (rng.uniform() * cfg.span_seconds as f64) as u64;
            events.push((
                ActionEvent {
                    action,
                    entity_kind: EntityKind::Listing,
                    entity_id: SyntheticWorld::listing_id(l),
                    timestamp: ts,
                },
                l,
            ));
            if action != Action::View {
                events.push((
                    ActionEvent {
                        action,
                        entity_kind: EntityKind::Shop,
                        entity_id: SyntheticWorld::shop_id(world.listing_shop[l]),
                        timestamp: ts,
                    },
                    l,
                ));
                events.push((
                    ActionEvent {
                        action,
                        entity_kind: EntityKind::Taxonomy,
                        entity_id: SyntheticWorld::taxonomy_id(world.listing_taxonomy[l]),
                        timestamp: ts,
                    },
                    l,
                ));
            }
        }
    }
    events.sort_by(|a, b| {
        b.0.timestamp
            .cmp(&a.0.timestamp)
            .then(a.0.key().cmp(&b.0.key()))
            .then(a.0.entity_id.cmp(&b.0.entity_id))
    });
    let listing_of: Vec<usize> = events.iter().map(|e| e.1).collect();
    let merged: Vec<ActionEvent> = events.into_iter().map(|e| e.0).collect();
    let windowed = truncate_window(&merged, cfg.window_seconds, usize::MAX);

    let mut sequences: Vec<Vec<TimedEntity>> = vec![Vec::new(); keys.len()];
    let mut seq_listings: Vec<Vec<usize>> = vec![Vec::new(); keys.len()];
    for (e, l) in windowed.events().iter().zip(&listing_of) {
        let k = keys
            .iter()
            .position(|k| *k == e.key())
            .expect("generated key");
        if sequences[k].len() < cfg.max_len {
            sequences[k].push(TimedEntity {
                id: e.entity_id.clone(),
                timestamp: e.timestamp,
            });
            seq_listings[k].push(*l);
        }
    }

    let candidate = if rng.bernoulli(cfg.relevant_candidate_prob) {
        rng.categorical(&weights)
    } else {
        rng.categorical(&world.listing_popularity)
    };
    let attr_c = world.listing_attrs.row(candidate);

    // Planted terms computed on exactly what a model can observe.
    let listing_rows = keys
        .iter()
        .zip(&seq_listings)
        .filter(|(k, _)| k.entity == EntityKind::Listing)
        .flat_map(|(_, ls)| ls.iter().map(|l| world.listing_attrs.row(*l)));
    let seq_attr = mean_rows(listing_rows, dz);
    let shop_rows = keys
        .iter()
        .zip(&seq_listings)
        .filter(|(k, _)| k.entity == EntityKind::Shop)
        .flat_map(|(_, ls)| {
            ls.iter()
                .map(|l| world.shop_latents.row(world.listing_shop[*l]))
        });
    let shop_latent = mean_rows(shop_rows, dz);
    let view_idx = keys
        .iter()
        .position(|k| *k == SeqKey::new(EntityKind::Listing, Action::View))
        .expect("view key");
    let id_latent = mean_rows(
        seq_listings[view_idx]
            .iter()
            .map(|l| world.listing_id_latents.row(*l)),
        wc.id_latent_dim,
    );
    let s_pref = dot(pref, attr_c);
    let s_seq = dot(&seq_attr, attr_c);
    let s_shop = dot(&shop_latent, attr_c);
    let s_id = dot(&id_latent, world.listing_id_latents.row(candidate));

    let click_logit = cfg.click_bias
        + cfg.alpha * s_pref
        + cfg.beta * s_seq
        + cfg.gamma * s_shop
        + cfg.delta * s_id;
    let click = rng.bernoulli(sigmoid(click_logit));
    let purchase_logit = cfg.purchase_bias
        + cfg.purchase_alpha * s_pref
        + cfg.purchase_beta * s_seq
        + cfg.purchase_gamma * s_shop
        + cfg.purchase_delta * s_id;
    let purchase_draw = rng.bernoulli(sigmoid(purchase_logit));

    Impression {
        user_id: SyntheticWorld::user_id(user),
        candidate_id: SyntheticWorld::listing_id(candidate),
        click,
        purchase: click && purchase_draw,
        sequences,
    }
}

/// A browsing session of listing ids in chronological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub listings: Vec<String>,
    pub has_purchase: bool,
}

/// Sessions that stay inside one taxonomy except with probability
/// `cross_prob` per event.
pub fn generate_clustered_sessions(
    world: &SyntheticWorld,
    n: usize,
    session_len: usize,
    cross_prob: f64,
    rng: &Stream,
) -> Vec<Session> {
    let wc = &world.config;
    let mut by_tax: Vec<Vec<usize>> = vec![Vec::new(); wc.num_taxonomies];
    for l in 0..wc.num_listings {
        by_tax[world.listing_taxonomy[l]].push(l);
    }
    (0..n)
        .map(|i| {
            let mut r = rng.substream(&i.to_string());
            let t = r.below(wc.num_taxonomies);
            let len = 2 + r.below(session_len.max(2) - 1);
            let listings = (0..len)
                .map(|_| {
                    let l = if r.bernoulli(cross_prob) {
                        r.below(wc.num_listings)
                    } else {
                        by_tax[t][r.below(by_tax[t].len())]
                    };
                    SyntheticWorld::listing_id(l)
                })
                .collect();
            Session {
                listings,
                has_purchase: r.bernoulli(0.1),
            }
        })
        .collect()
}

/// Co-clicked `(source, candidate)` listing pairs: the candidate shares the
/// source's taxonomy and is drawn near its attributes.
pub fn generate_coclick_pairs(
    world: &SyntheticWorld,
    n: usize,
    temperature: f64,
    rng: &Stream,
) -> Vec<(usize, usize)> {
    let wc = &world.config;
    let mut by_tax: Vec<Vec<usize>> = vec![Vec::new(); wc.num_taxonomies];
    for l in 0..wc.num_listings {
        by_tax[world.listing_taxonomy[l]].push(l);
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.substream(&i.to_string());
            let src = r.categorical(&world.listing_popularity);
            let group = &by_tax[world.listing_taxonomy[src]];
            let a = world.listing_attrs.row(src);
            let w: Vec<f64> = group
                .iter()
                .map(|&l| {
                    if l == src {
                        0.0
                    } else {
                        (temperature * (dot(a, world.listing_attrs.row(l)) - 1.0)).exp()
                    }
                })
                .collect();
            let cand = if w.iter().all(|x| *x == 0.0) {
                src
            } else {
                group[r.categorical(&w)]
            };
            (src, cand)
        })
        .collect()
}
