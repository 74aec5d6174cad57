//! Flat `section.key=value` run configuration.
//!
//! Every key has a default; a config file or `--set` only overrides. The
//! resolved form written next to each output lists every key, so feeding it
//! back reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use adpm_core::adsformer::{AdpmConfig, LearnedSpec, Pooling};
use adpm_core::embeddings::Flavor;
use adpm_core::pretrain::{AirConfig, SkipGramConfig, SkipGramMode};
use adpm_core::ranking::{RankingConfig, Task};
use adpm_core::sequences::{impression_keys, EntityKind, ImpressionConfig, SeqKey, WorldConfig};
use adpm_core::training_eval::{SamplingMode, TrainConfig};

use crate::error::{config_err, CliError, Result};

/// Seconds between the last training impression and the first validation one.
pub const VALID_GAP_SECONDS: u64 = 86_400;

pub const TASK_KEYS: &[&str] = &[
    "adpm",
    "batch_size",
    "calibrate",
    "d1",
    "deep_widths",
    "dropout",
    "encoder",
    "epochs",
    "ffn_mult",
    "flavors",
    "learned",
    "lr_max",
    "max_len",
    "num_blocks",
    "num_cross",
    "num_heads",
    "pool_includes_target",
    "pooling",
    "sampling",
    "topology",
    "width_divisor",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

struct Defaults(BTreeMap<String, String>);

impl Defaults {
    fn put(&mut self, key: &str, value: impl Display) {
        self.0.insert(key.to_string(), value.to_string());
    }
}

fn components_text(c: &AdpmConfig) -> String {
    let on: Vec<&str> = [
        (c.use_component1, "1"),
        (c.use_component2, "2"),
        (c.use_component3, "3"),
    ]
    .iter()
    .filter(|(b, _)| *b)
    .map(|(_, n)| *n)
    .collect();
    on.join(",")
}

fn task_defaults(d: &mut Defaults, task: Task) {
    let p = task.to_string();
    let t = TrainConfig::for_task(task);
    let r = RankingConfig::for_task(task);
    let a = match task {
        Task::Ctr => AdpmConfig::ctr(),
        Task::Pccvr => AdpmConfig::pccvr(),
    };
    let learned: Vec<String> = a
        .learned
        .iter()
        .map(|s| format!("{}:{}", s.key, s.dim))
        .collect();
    for (k, v) in [
        ("epochs", t.epochs.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("lr_max", t.lr_max.to_string()),
        ("sampling", t.sampling.to_string()),
        ("calibrate", "false".into()),
        ("adpm", components_text(&a)),
        ("pooling", a.pooling.to_string()),
        ("pool_includes_target", a.pool_includes_target.to_string()),
        ("flavors", join(&a.flavors)),
        ("learned", learned.join(",")),
        ("encoder", a.encoder_key.to_string()),
        ("d1", a.d1.to_string()),
        ("num_heads", a.num_heads.to_string()),
        ("num_blocks", a.num_blocks.to_string()),
        ("max_len", a.max_len.to_string()),
        ("dropout", a.dropout.to_string()),
        ("ffn_mult", a.ffn_mult.to_string()),
        ("num_cross", r.num_cross.to_string()),
        ("deep_widths", join(&r.deep_widths)),
        ("width_divisor", r.width_divisor.to_string()),
        ("topology", r.topology.to_string()),
    ] {
        d.put(&format!("{p}.{k}"), v);
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut d = Defaults(BTreeMap::new());
        d.put("seed", 0);
        d.put("out_dir", "runs");

        let w = WorldConfig::default();
        d.put("world.num_users", w.num_users);
        d.put("world.num_listings", w.num_listings);
        d.put("world.num_shops", w.num_shops);
        d.put("world.num_taxonomies", w.num_taxonomies);
        d.put("world.latent_dim", w.latent_dim);
        d.put("world.id_latent_dim", w.id_latent_dim);
        d.put("world.taxonomy_spread", w.taxonomy_spread);
        d.put("world.popularity_exponent", w.popularity_exponent);
        d.put("world.visual_signal", w.visual_signal);
        d.put("world.text_signal", w.text_signal);
        d.put("world.style_dims", w.style_dims);
        d.put("world.style_scale", w.style_scale);

        let i = ImpressionConfig::default();
        d.put("data.train_rows", i.rows);
        d.put("data.valid_rows", i.rows / 2);
        d.put("data.start_time", i.start_time);
        d.put("data.max_len", i.max_len);
        d.put("data.window_seconds", i.window_seconds);
        d.put("data.span_seconds", i.span_seconds);
        d.put("data.max_views", i.max_views);
        d.put("data.max_favorites", i.max_favorites);
        d.put("data.max_cart_adds", i.max_cart_adds);
        d.put("data.max_purchases", i.max_purchases);
        d.put("data.intent_weight", i.intent_weight);
        d.put("data.browse_temperature", i.browse_temperature);
        d.put("data.relevant_candidate_prob", i.relevant_candidate_prob);
        d.put("data.click_bias", i.click_bias);
        d.put("data.alpha", i.alpha);
        d.put("data.beta", i.beta);
        d.put("data.gamma", i.gamma);
        d.put("data.delta", i.delta);
        d.put("data.purchase_bias", i.purchase_bias);
        d.put("data.purchase_alpha", i.purchase_alpha);
        d.put("data.purchase_beta", i.purchase_beta);
        d.put("data.purchase_gamma", i.purchase_gamma);
        d.put("data.purchase_delta", i.purchase_delta);

        for e in EntityKind::ALL {
            d.put(&format!("vocab.{e}_k"), 1000);
        }
        d.put("vocab.num_oov", 1);

        let s = SkipGramConfig::default();
        d.put("skipgram.dim", s.dim);
        d.put("skipgram.window", s.window);
        d.put("skipgram.epochs", s.epochs);
        d.put("skipgram.lr", s.lr);
        d.put("skipgram.purchase_upsample", s.purchase_upsample);
        d.put("skipgram.mode", "hierarchical_softmax");
        d.put("skipgram.negatives", 5);

        let a = AirConfig::default();
        d.put("air.hidden", a.hidden);
        d.put("air.out_dim", a.out_dim);
        d.put("air.batch_size", a.batch_size);
        d.put("air.negatives", "all");
        d.put("air.epochs", a.epochs);
        d.put("air.lr", a.lr);
        d.put("air.logit_scale", a.logit_scale);
        d.put("air.pairs", 20_000);
        d.put("air.temperature", 6.0);

        task_defaults(&mut d, Task::Ctr);
        task_defaults(&mut d, Task::Pccvr);

        d.put("ablate.task", Task::Ctr);
        d.put("ablate.seeds", "1,2,3,4,5");
        Self { values: d.0 }
    }
}

/// Parsed per-task settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSetup {
    pub train: TrainConfig,
    pub ranking: RankingConfig,
    /// `None` is the non-personalized baseline.
    pub adpm: Option<AdpmConfig>,
    pub calibrate: bool,
}

impl RunConfig {
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn get_raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| config_err(format!("unknown key `{key}`")))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(config_err(format!("unknown key `{key}`"))),
        }
    }

    /// Applies a `key=value` assignment.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(format!("`{assignment}` is not key=value")))?;
        self.set(k, v)
    }

    /// Defaults overridden by the `key=value` lines of `text`. Blank lines
    /// and `#` comments are skipped; a key may appear only once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |e: CliError| match e {
                CliError::Config(m) => config_err(format!("line {}: {m}", n + 1)),
                other => other,
            };
            let (k, _) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: `{line}` is not key=value", n + 1)))?;
            if let Some(prev) = seen.insert(k.trim().to_string(), n + 1) {
                return Err(config_err(format!(
                    "line {}: key `{}` already set on line {prev}",
                    n + 1,
                    k.trim()
                )));
            }
            cfg.apply(line).map_err(at)?;
        }
        Ok(cfg)
    }

    /// Every key, sorted, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.get_raw(key)?;
        raw.parse()
            .map_err(|e| config_err(format!("`{key}`: cannot parse `{raw}`: {e}")))
    }

    fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let raw = self.get_raw(key)?;
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| config_err(format!("`{key}`: cannot parse `{s}`: {e}")))
            })
            .collect()
    }

    fn positive(&self, key: &str) -> Result<usize> {
        let v: usize = self.get(key)?;
        if v == 0 {
            return Err(config_err(format!("`{key}` must be positive")));
        }
        Ok(v)
    }

    fn finite(&self, key: &str) -> Result<f64> {
        let v: f64 = self.get(key)?;
        if !v.is_finite() {
            return Err(config_err(format!(
                "`{key}` must be a finite number, got {v}"
            )));
        }
        Ok(v)
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn world(&self) -> Result<WorldConfig> {
        let w = WorldConfig {
            num_users: self.positive("world.num_users")?,
            num_listings: self.positive("world.num_listings")?,
            num_shops: self.positive("world.num_shops")?,
            num_taxonomies: self.positive("world.num_taxonomies")?,
            latent_dim: self.positive("world.latent_dim")?,
            id_latent_dim: self.positive("world.id_latent_dim")?,
            taxonomy_spread: self.finite("world.taxonomy_spread")?,
            popularity_exponent: self.finite("world.popularity_exponent")?,
            visual_signal: self.finite("world.visual_signal")?,
            text_signal: self.finite("world.text_signal")?,
            style_dims: self.get("world.style_dims")?,
            style_scale: self.finite("world.style_scale")?,
        };
        if w.num_taxonomies > w.num_listings {
            return Err(config_err(format!(
                "world.num_taxonomies ({}) exceeds world.num_listings ({})",
                w.num_taxonomies, w.num_listings
            )));
        }
        Ok(w)
    }

    /// Generator settings of the training split, or of the validation split
    /// which starts a day after the last training impression.
    pub fn impressions(&self, valid: bool) -> Result<ImpressionConfig> {
        let train_rows = self.positive("data.train_rows")?;
        let start: u64 = self.get("data.start_time")?;
        let c = ImpressionConfig {
            rows: if valid {
                self.positive("data.valid_rows")?
            } else {
                train_rows
            },
            start_time: if valid {
                start + 10 * train_rows as u64 + VALID_GAP_SECONDS
            } else {
                start
            },
            max_len: self.positive("data.max_len")?,
            window_seconds: self.positive("data.window_seconds")? as u64,
            span_seconds: self.get("data.span_seconds")?,
            max_views: self.get("data.max_views")?,
            max_favorites: self.get("data.max_favorites")?,
            max_cart_adds: self.get("data.max_cart_adds")?,
            max_purchases: self.get("data.max_purchases")?,
            intent_weight: self.finite("data.intent_weight")?,
            browse_temperature: self.finite("data.browse_temperature")?,
            relevant_candidate_prob: self.finite("data.relevant_candidate_prob")?,
            click_bias: self.finite("data.click_bias")?,
            alpha: self.finite("data.alpha")?,
            beta: self.finite("data.beta")?,
            gamma: self.finite("data.gamma")?,
            delta: self.finite("data.delta")?,
            purchase_bias: self.finite("data.purchase_bias")?,
            purchase_alpha: self.finite("data.purchase_alpha")?,
            purchase_beta: self.finite("data.purchase_beta")?,
            purchase_gamma: self.finite("data.purchase_gamma")?,
            purchase_delta: self.finite("data.purchase_delta")?,
        };
        if !(0.0..=1.0).contains(&c.relevant_candidate_prob) {
            return Err(config_err(
                "`data.relevant_candidate_prob` must lie in [0, 1]",
            ));
        }
        if !(0.0..=1.0).contains(&c.intent_weight) {
            return Err(config_err("`data.intent_weight` must lie in [0, 1]"));
        }
        Ok(c)
    }

    pub fn vocab_sizes(&self) -> Result<BTreeMap<EntityKind, usize>> {
        EntityKind::ALL
            .iter()
            .map(|e| Ok((*e, self.positive(&format!("vocab.{e}_k"))?)))
            .collect()
    }

    pub fn num_oov(&self) -> Result<usize> {
        self.positive("vocab.num_oov")
    }

    pub fn skipgram(&self) -> Result<SkipGramConfig> {
        let mode = match self.get_raw("skipgram.mode")? {
            "hierarchical_softmax" => SkipGramMode::HierarchicalSoftmax,
            "negative_sampling" => SkipGramMode::NegativeSampling {
                negatives: self.positive("skipgram.negatives")?,
            },
            other => {
                return Err(config_err(format!(
                "`skipgram.mode`: unknown mode `{other}` (hierarchical_softmax|negative_sampling)"
            )))
            }
        };
        let lr = self.finite("skipgram.lr")?;
        if lr <= 0.0 {
            return Err(config_err("`skipgram.lr` must be positive"));
        }
        Ok(SkipGramConfig {
            dim: self.positive("skipgram.dim")?,
            window: self.positive("skipgram.window")?,
            epochs: self.positive("skipgram.epochs")?,
            lr,
            purchase_upsample: self.positive("skipgram.purchase_upsample")?,
            mode,
            seed: self.seed()?,
        })
    }

    pub fn air(&self) -> Result<AirConfig> {
        let batch_size = self.positive("air.batch_size")?;
        if batch_size < 2 {
            return Err(config_err("`air.batch_size` must be at least 2"));
        }
        let negatives = match self.get_raw("air.negatives")? {
            "all" => None,
            _ => {
                let n = self.positive("air.negatives")?;
                if n > batch_size - 1 {
                    return Err(config_err(format!(
                        "`air.negatives` ({n}) exceeds air.batch_size - 1 ({})",
                        batch_size - 1
                    )));
                }
                Some(n)
            }
        };
        let lr = self.finite("air.lr")?;
        if lr <= 0.0 {
            return Err(config_err("`air.lr` must be positive"));
        }
        Ok(AirConfig {
            hidden: self.get("air.hidden")?,
            out_dim: self.positive("air.out_dim")?,
            batch_size,
            negatives,
            epochs: self.positive("air.epochs")?,
            lr,
            logit_scale: self.finite("air.logit_scale")?,
            seed: self.seed()?,
        })
    }

    /// Number of co-click pairs and their sampling temperature.
    pub fn air_pairs(&self) -> Result<(usize, f64)> {
        Ok((self.positive("air.pairs")?, self.finite("air.temperature")?))
    }

    pub fn task(&self, task: Task) -> Result<TaskSetup> {
        let key = |k: &str| format!("{task}.{k}");
        let sampling: SamplingMode = self.get(&key("sampling"))?;
        if task == Task::Pccvr && sampling != SamplingMode::None {
            return Err(config_err(format!(
                "`pccvr.sampling` must be none (PCCVR trains on every clicked row), got {sampling}"
            )));
        }
        let lr_max = self.finite(&key("lr_max"))?;
        if lr_max <= 0.0 {
            return Err(config_err(format!("`{}` must be positive", key("lr_max"))));
        }
        let train = TrainConfig {
            task,
            epochs: self.positive(&key("epochs"))?,
            batch_size: self.positive(&key("batch_size"))?,
            lr_max,
            sampling,
            seed: self.seed()?,
        };
        let ranking = RankingConfig {
            task,
            num_cross: self.get(&key("num_cross"))?,
            deep_widths: self.get_list(&key("deep_widths"))?,
            width_divisor: self.positive(&key("width_divisor"))?,
            topology: self.get(&key("topology"))?,
        };
        ranking.validate()?;
        let adpm = match self.get_raw(&key("adpm"))? {
            "none" => None,
            raw => {
                let comps: Vec<usize> = if raw == "full" {
                    vec![1, 2, 3]
                } else {
                    self.get_list(&key("adpm"))?
                };
                if comps.is_empty() {
                    return Err(config_err(format!(
                        "`{}` lists no component; use `none` for the baseline",
                        key("adpm")
                    )));
                }
                if let Some(c) = comps.iter().find(|c| !(1..=3).contains(*c)) {
                    return Err(config_err(format!(
                        "`{}`: no component {c} (1, 2 or 3)",
                        key("adpm")
                    )));
                }
                if (1..comps.len()).any(|i| comps[..i].contains(&comps[i])) {
                    return Err(config_err(format!("`{}` repeats a component", key("adpm"))));
                }
                Some(self.adpm(task, &comps)?)
            }
        };
        Ok(TaskSetup {
            train,
            ranking,
            adpm,
            calibrate: self.get(&key("calibrate"))?,
        })
    }

    fn adpm(&self, task: Task, comps: &[usize]) -> Result<AdpmConfig> {
        let key = |k: &str| format!("{task}.{k}");
        let learned = self
            .get_list::<String>(&key("learned"))?
            .iter()
            .map(|s| {
                let (k, d) = s.rsplit_once(':').ok_or_else(|| {
                    config_err(format!(
                        "`{}`: `{s}` is not entity:action:dim",
                        key("learned")
                    ))
                })?;
                let dim = d
                    .parse()
                    .map_err(|_| config_err(format!("`{}`: bad width in `{s}`", key("learned"))))?;
                Ok(LearnedSpec {
                    key: k.parse()?,
                    dim,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let generated = impression_keys();
        if let Some(s) = learned.iter().find(|s| !generated.contains(&s.key)) {
            return Err(config_err(format!(
                "`{}`: sequence {} is not produced by the data generator",
                key("learned"),
                s.key
            )));
        }
        let encoder_key: SeqKey = self.get(&key("encoder"))?;
        if !generated.contains(&encoder_key) {
            return Err(config_err(format!(
                "`{}`: sequence {encoder_key} is not produced by the data generator",
                key("encoder")
            )));
        }
        let pooling: Pooling = self.get(&key("pooling"))?;
        let mut flavors: Vec<Flavor> = self.get_list(&key("flavors"))?;
        flavors.sort();
        flavors.dedup();
        let c = AdpmConfig {
            use_component1: comps.contains(&1),
            use_component2: comps.contains(&2),
            use_component3: comps.contains(&3),
            pooling,
            pool_includes_target: self.get(&key("pool_includes_target"))?,
            flavors,
            learned,
            encoder_key,
            d1: self.get(&key("d1"))?,
            num_heads: self.get(&key("num_heads"))?,
            num_blocks: self.get(&key("num_blocks"))?,
            max_len: self.get(&key("max_len"))?,
            dropout: self.finite(&key("dropout"))?,
            ffn_mult: self.get(&key("ffn_mult"))?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn ablate_task(&self) -> Result<Task> {
        self.get("ablate.task")
    }

    pub fn ablate_seeds(&self) -> Result<Vec<u64>> {
        let s: Vec<u64> = self.get_list("ablate.seeds")?;
        if s.is_empty() {
            return Err(config_err("`ablate.seeds` is empty"));
        }
        let mut sorted = s.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != s.len() {
            return Err(config_err("`ablate.seeds` repeats a seed"));
        }
        Ok(s)
    }

    /// Parses every section; the first inconsistency is returned.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.world()?;
        self.impressions(false)?;
        self.impressions(true)?;
        self.vocab_sizes()?;
        self.num_oov()?;
        self.skipgram()?;
        self.air()?;
        self.air_pairs()?;
        self.task(Task::Ctr)?;
        self.task(Task::Pccvr)?;
        self.ablate_task()?;
        self.ablate_seeds()?;
        Ok(())
    }
}

impl FromStr for RunConfig {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}
