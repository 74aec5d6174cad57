//! Variant × seed grids with lifts relative to a non-personalized baseline.

use rayon::prelude::*;

use super::{evaluate, train, MetricReport, TrainConfig, TrainingData};
use crate::adsformer::{AdpmConfig, AdpmVocabs};
use crate::embeddings::PretrainedBundle;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::ranking::{RankingConfig, RankingModel};
use crate::rng::Stream;
use crate::sequences::EntityKind;

pub const BASELINE: &str = "baseline";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub name: String,
    /// `None` trains the ranking model without personalization.
    pub adpm: Option<AdpmConfig>,
    /// Replaces the context's ranking configuration.
    pub ranking: Option<RankingConfig>,
    /// Keeps only the top-K listing ids (and matching pretrained rows).
    pub listing_vocab_k: Option<usize>,
}

impl AblationVariant {
    pub fn baseline() -> Self {
        Self {
            name: BASELINE.into(),
            adpm: None,
            ranking: None,
            listing_vocab_k: None,
        }
    }

    pub fn personalized(name: impl Into<String>, adpm: AdpmConfig) -> Self {
        Self {
            name: name.into(),
            adpm: Some(adpm),
            ranking: None,
            listing_vocab_k: None,
        }
    }
}

/// Everything shared by the runs of one grid.
#[derive(Debug, Clone)]
pub struct AblationContext {
    pub train: TrainingData,
    pub valid: TrainingData,
    pub vocabs: AdpmVocabs,
    pub pretrained: PretrainedBundle,
    pub ranking: RankingConfig,
    pub train_config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRecord {
    pub variant: String,
    pub seed: u64,
    pub metrics: MetricReport,
    /// Percent change of ROC-AUC over the baseline with the same seed.
    pub lift_roc: f64,
    pub lift_pr: f64,
    /// Absolute ROC-AUC difference to that baseline.
    pub delta_roc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub variant: String,
    pub seeds: usize,
    pub median_roc_auc: f64,
    pub median_lift_roc: f64,
    pub min_lift_roc: f64,
    pub max_lift_roc: f64,
    pub median_lift_pr: f64,
    pub min_lift_pr: f64,
    pub max_lift_pr: f64,
    pub median_delta_roc: f64,
}

pub fn lift_percent(value: f64, baseline: f64) -> f64 {
    100.0 * (value - baseline) / baseline
}

/// Runs `runner` for every variant and seed (in parallel) and attaches
/// lifts against the variant named `baseline`. Records come back in grid
/// order regardless of scheduling.
pub fn run_grid<V, F>(
    variants: &[V],
    names: &[String],
    seeds: &[u64],
    runner: F,
) -> Result<Vec<AblationRecord>>
where
    V: Sync,
    F: Fn(&V, u64) -> Result<MetricReport> + Sync,
{
    let base = names
        .iter()
        .position(|n| n == BASELINE)
        .ok_or_else(|| Error::Config("ablation grid needs a `baseline` variant".into()))?;
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |s| (v, *s)))
        .collect();
    let reports: Vec<MetricReport> = jobs
        .par_iter()
        .map(|(v, s)| runner(&variants[*v], *s))
        .collect::<Result<_>>()?;
    let base_of = |seed_idx: usize| reports[base * seeds.len() + seed_idx];
    Ok(jobs
        .iter()
        .zip(&reports)
        .enumerate()
        .map(|(j, ((v, s), m))| {
            let b = base_of(j % seeds.len());
            AblationRecord {
                variant: names[*v].clone(),
                seed: *s,
                metrics: *m,
                lift_roc: lift_percent(m.roc_auc, b.roc_auc),
                lift_pr: lift_percent(m.pr_auc, b.pr_auc),
                delta_roc: m.roc_auc - b.roc_auc,
            }
        })
        .collect())
}

/// Trains and evaluates one variant with one seed.
pub fn run_variant(
    ctx: &AblationContext,
    variant: &AblationVariant,
    seed: u64,
) -> Result<MetricReport> {
    let ranking = variant
        .ranking
        .clone()
        .unwrap_or_else(|| ctx.ranking.clone());
    let (vocabs, pretrained) = match variant.listing_vocab_k {
        Some(k) => {
            let mut v = ctx.vocabs.clone();
            let listing = v.listing()?.truncated(k)?;
            let rows = listing.table_rows();
            v.by_entity.insert(EntityKind::Listing, listing);
            let p = ctx
                .pretrained
                .truncated(rows.min(min_rows(&ctx.pretrained).unwrap_or(rows)))?;
            (v, p)
        }
        None => (ctx.vocabs.clone(), ctx.pretrained.clone()),
    };
    let mut store = ParamStore::new();
    let mut rng = Stream::new(seed).substream("model");
    let model = RankingModel::new(
        &ranking,
        ctx.train.context_dim(),
        variant.adpm.as_ref().map(|c| (c, &vocabs)),
        &mut store,
        &mut rng,
    )?;
    let cfg = TrainConfig {
        seed,
        ..ctx.train_config.clone()
    };
    let v = model.adpm.as_ref().map(|_| &vocabs);
    train(&mut store, &model, &pretrained, v, &ctx.train, &cfg)?;
    evaluate(&store, &model, &pretrained, v, &ctx.valid, cfg.task, None)
}

fn min_rows(p: &PretrainedBundle) -> Option<usize> {
    p.iter().map(|(_, t)| t.vocab_size()).min()
}

/// Full harness: every variant × seed trained on `ctx`.
pub fn run_ablation(
    ctx: &AblationContext,
    variants: &[AblationVariant],
    seeds: &[u64],
) -> Result<Vec<AblationRecord>> {
    let names: Vec<String> = variants.iter().map(|v| v.name.clone()).collect();
    run_grid(variants, &names, seeds, |v, s| run_variant(ctx, v, s))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median and spread over seeds, one row per variant in first-seen order.
pub fn summarize(records: &[AblationRecord]) -> Vec<AblationSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in records {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rs: Vec<&AblationRecord> = records.iter().filter(|r| r.variant == name).collect();
            let col = |f: &dyn Fn(&AblationRecord) -> f64| -> Vec<f64> {
                rs.iter().map(|r| f(r)).collect()
            };
            let mut roc = col(&|r| r.metrics.roc_auc);
            let mut lr = col(&|r| r.lift_roc);
            let mut lp = col(&|r| r.lift_pr);
            let mut dr = col(&|r| r.delta_roc);
            let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            AblationSummary {
                variant: name.to_string(),
                seeds: rs.len(),
                median_roc_auc: median(&mut roc),
                min_lift_roc: min(&lr),
                max_lift_roc: max(&lr),
                median_lift_roc: median(&mut lr),
                min_lift_pr: min(&lp),
                max_lift_pr: max(&lp),
                median_lift_pr: median(&mut lp),
                median_delta_roc: median(&mut dr),
            }
        })
        .collect()
}

/// Line records `variant, seed, roc_auc, pr_auc, ece, nce, lift_roc,
/// lift_pr`, tab separated, full precision.
pub fn records_tsv(records: &[AblationRecord]) -> String {
    let mut s = String::from("variant\tseed\troc_auc\tpr_auc\tece\tnce\tlift_roc\tlift_pr\n");
    for r in records {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.variant,
            r.seed,
            r.metrics.roc_auc,
            r.metrics.pr_auc,
            r.metrics.ece,
            r.metrics.nce,
            r.lift_roc,
            r.lift_pr
        ));
    }
    s
}

pub fn summary_tsv(summary: &[AblationSummary]) -> String {
    let mut s = String::from(
        "variant\tseeds\tmedian_roc_auc\tmedian_lift_roc\tmin_lift_roc\tmax_lift_roc\tmedian_lift_pr\tmin_lift_pr\tmax_lift_pr\n",
    );
    for r in summary {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.variant,
            r.seeds,
            r.median_roc_auc,
            r.median_lift_roc,
            r.min_lift_roc,
            r.max_lift_roc,
            r.median_lift_pr,
            r.min_lift_pr,
            r.max_lift_pr
        ));
    }
    s
}

/// Human-readable aligned table. Lifts are percentages; PR-AUC is average
/// precision.
pub fn summary_table(summary: &[AblationSummary]) -> String {
    let w = summary
        .iter()
        .map(|r| r.variant.len())
        .max()
        .unwrap_or(7)
        .max(7);
    let mut s = format!(
        "{:<w$}  {:>5}  {:>8}  {:>24}  {:>24}\n",
        "variant", "seeds", "roc_auc", "roc lift % med [min,max]", "pr lift % med [min,max]"
    );
    for r in summary {
        let roc = format!(
            "{:+.3} [{:+.3},{:+.3}]",
            r.median_lift_roc, r.min_lift_roc, r.max_lift_roc
        );
        let pr = format!(
            "{:+.3} [{:+.3},{:+.3}]",
            r.median_lift_pr, r.min_lift_pr, r.max_lift_pr
        );
        s.push_str(&format!(
            "{:<w$}  {:>5}  {:>8.5}  {:>24}  {:>24}\n",
            r.variant, r.seeds, r.median_roc_auc, roc, pr
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(auc: f64) -> MetricReport {
        MetricReport {
            roc_auc: auc,
            pr_auc: auc / 2.0,
            ece: 0.0,
            nce: 1.0,
            bce: 0.5,
            n_pos: 1,
            n_neg: 1,
        }
    }

    #[test]
    fn lifts_are_relative_to_same_seed_baseline() {
        let variants = [0.5, 0.6];
        let names = vec![BASELINE.to_string(), "v".to_string()];
        let recs = run_grid(&variants, &names, &[1, 2], |v, s| {
            Ok(report(v + s as f64 * 0.01))
        })
        .unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[0].lift_roc, 0.0);
        assert!((recs[2].lift_roc - 100.0 * 0.1 / 0.51).abs() < 1e-9);
        assert!((recs[3].lift_roc - 100.0 * 0.1 / 0.52).abs() < 1e-9);
        let sum = summarize(&recs);
        assert_eq!(sum.len(), 2);
        assert_eq!(sum[1].seeds, 2);
        assert!(summary_table(&sum).contains("baseline"));
    }

    #[test]
    fn grid_without_baseline_is_rejected() {
        let names = vec!["a".to_string()];
        assert!(run_grid(&[()], &names, &[1], |_, _| Ok(report(0.5))).is_err());
    }
}
