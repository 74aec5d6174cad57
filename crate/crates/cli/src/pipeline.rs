//! The steps behind each subcommand. Every step reads and writes files in a
//! run directory and records its resolved configuration there.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use adpm_core::adsformer::AdpmVocabs;
use adpm_core::embeddings::{
    dump_table, load_flavor, load_table, save_table, EmbeddingTable, Flavor, PretrainedBundle,
};
use adpm_core::pretrain::{air_table, train_air, train_skipgram};
use adpm_core::ranking::{load_checkpoint, save_checkpoint, RankingModel, Task};
use adpm_core::sequences::{
    generate_coclick_pairs, generate_impressions, generate_world, read_dataset, read_vocab,
    write_dataset, write_vocab, Dataset, EntityKind, SyntheticWorld, Vocabulary,
};
use adpm_core::training_eval::{
    fit_platt, records_tsv, run_ablation, score, summarize, summary_table, summary_tsv, train,
    AblationContext, AblationRecord, AblationVariant, CalibrationParams, MetricReport,
    TrainingData, BASELINE,
};
use adpm_core::{ParamStore, Stream, Tensor};

use crate::config::{RunConfig, TaskSetup, TASK_KEYS};
use crate::error::{config_err, CliError, Result};

pub const TRAIN_DATA: &str = "train.tsv";
pub const VALID_DATA: &str = "valid.tsv";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    adpm_core::Error::io(path, e).into()
}

/// Output directory of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Opens (creating if needed) an explicit directory.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        fs::create_dir_all(&path).map_err(|e| io_err(&path, e))?;
        Ok(Self { path })
    }

    /// A fresh `run-<unix seconds>-seed<seed>` directory under `out_dir`.
    pub fn create(out_dir: &Path, seed: u64) -> Result<Self> {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let base = format!("run-{secs}-seed{seed}");
        let mut path = out_dir.join(&base);
        let mut n = 2;
        while path.exists() {
            path = out_dir.join(format!("{base}-{n}"));
            n += 1;
        }
        Self::open(path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| io_err(&p, e))?;
        Ok(p)
    }

    fn read(&self, name: &str) -> Result<String> {
        let p = self.file(name);
        fs::read_to_string(&p).map_err(|e| io_err(&p, e))
    }

    fn require(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.file(name);
        if !p.exists() {
            return Err(config_err(format!(
                "{} is missing; run `adpm {producer}` on this run directory first",
                p.display()
            )));
        }
        Ok(p)
    }

    fn save_config(&self, step: &str, cfg: &RunConfig) -> Result<PathBuf> {
        self.write(&format!("{step}.config.txt"), &cfg.to_text())
    }
}

pub fn vocab_file(entity: EntityKind) -> String {
    format!("vocab.{entity}.tsv")
}

pub fn table_file(flavor: Flavor) -> String {
    format!("{flavor}.embt")
}

pub fn checkpoint_file(task: Task) -> String {
    format!("{task}.ckpt")
}

pub fn metrics_file(task: Task) -> String {
    format!("{task}.metrics.txt")
}

pub fn calibration_file(task: Task) -> String {
    format!("{task}.calibration.txt")
}

fn world(cfg: &RunConfig) -> Result<SyntheticWorld> {
    Ok(generate_world(&cfg.world()?, cfg.seed()?))
}

// ----- gen-data ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub train_rows: usize,
    pub valid_rows: usize,
    pub train_click_rate: f64,
    pub valid_click_rate: f64,
}

pub fn gen_data(cfg: &RunConfig, dir: &RunDir) -> Result<GenSummary> {
    cfg.validate()?;
    let w = world(cfg)?;
    let root = Stream::new(cfg.seed()?).substream("impressions");
    let train = generate_impressions(&w, &cfg.impressions(false)?, &root.substream("train"));
    let valid = generate_impressions(&w, &cfg.impressions(true)?, &root.substream("valid"));
    write_dataset(&dir.file(TRAIN_DATA), &train)?;
    write_dataset(&dir.file(VALID_DATA), &valid)?;
    dir.save_config("gen-data", cfg)?;
    Ok(GenSummary {
        train_rows: train.len(),
        valid_rows: valid.len(),
        train_click_rate: train.click_rate(),
        valid_click_rate: valid.click_rate(),
    })
}

fn load_split(dir: &RunDir, name: &str) -> Result<Dataset> {
    Ok(read_dataset(&dir.require(name, "gen-data")?)?)
}

// ----- build-vocab ---------------------------------------------------------------

pub fn build_vocab(cfg: &RunConfig, dir: &RunDir) -> Result<AdpmVocabs> {
    cfg.validate()?;
    let train = load_split(dir, TRAIN_DATA)?;
    let vocabs = adpm_core::adsformer::build_vocabs(&train, &cfg.vocab_sizes()?, cfg.num_oov()?)?;
    for (e, v) in &vocabs.by_entity {
        write_vocab(&dir.file(&vocab_file(*e)), v)?;
    }
    dir.save_config("build-vocab", cfg)?;
    Ok(vocabs)
}

pub fn load_vocabs(dir: &RunDir) -> Result<AdpmVocabs> {
    let mut by_entity = BTreeMap::new();
    for e in EntityKind::ALL {
        let p = dir.file(&vocab_file(e));
        if p.exists() {
            by_entity.insert(e, read_vocab(&p)?);
        }
    }
    if !by_entity.contains_key(&EntityKind::Listing) {
        dir.require(&vocab_file(EntityKind::Listing), "build-vocab")?;
    }
    Ok(AdpmVocabs { by_entity })
}

// ----- pretrain ------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainKind {
    Skipgram,
    Air,
    Visual,
}

impl PretrainKind {
    pub fn flavor(self) -> Flavor {
        match self {
            PretrainKind::Skipgram => Flavor::Skipgram,
            PretrainKind::Air => Flavor::Air,
            PretrainKind::Visual => Flavor::Visual,
        }
    }
}

impl FromStr for PretrainKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skipgram" => Ok(PretrainKind::Skipgram),
            "air" => Ok(PretrainKind::Air),
            "visual" => Ok(PretrainKind::Visual),
            _ => Err(config_err(format!(
                "unknown pretrain kind `{s}` (skipgram|air|visual)"
            ))),
        }
    }
}

/// Rows of `source` (indexed by world listing) gathered in vocabulary order;
/// OOV rows are zero and flagged unknown.
fn align_to_vocab(
    w: &SyntheticWorld,
    vocab: &Vocabulary,
    dim: usize,
    source: impl Fn(usize) -> Vec<f64>,
) -> Result<(Tensor, Vec<bool>)> {
    let mut t = Tensor::zeros(&[vocab.table_rows(), dim]);
    let mut known = vec![false; vocab.table_rows()];
    for r in vocab.num_oov()..vocab.table_rows() {
        let id = vocab.id_at(r).expect("kept row has an id");
        let l = w
            .listing_index(id)
            .ok_or_else(|| adpm_core::Error::UnknownEntity(id.to_string()))?;
        t.row_mut(r).copy_from_slice(&source(l));
        known[r] = true;
    }
    Ok((t, known))
}

fn losses_text(losses: &[f64]) -> String {
    let mut s = String::from("step\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i}\t{l}");
    }
    s
}

pub fn pretrain(cfg: &RunConfig, dir: &RunDir, kind: PretrainKind) -> Result<EmbeddingTable> {
    cfg.validate()?;
    let vocabs = load_vocabs(dir)?;
    let listing = vocabs.listing()?;
    let table = match kind {
        PretrainKind::Skipgram => {
            let train = load_split(dir, TRAIN_DATA)?;
            let model = train_skipgram(&train.listing_sessions(), listing, &cfg.skipgram()?)?;
            model.to_table()?
        }
        PretrainKind::Air => {
            let w = world(cfg)?;
            let (n, temperature) = cfg.air_pairs()?;
            let pairs = generate_coclick_pairs(
                &w,
                n,
                temperature,
                &Stream::new(cfg.seed()?).substream("coclick"),
            );
            let all: Vec<Vec<f64>> = (0..w.num_listings()).map(|l| w.air_features(l)).collect();
            let trained = train_air(&Tensor::from_rows(&all)?, &pairs, &cfg.air()?)?;
            dir.write("air.losses.tsv", &losses_text(&trained.losses))?;
            let (features, known) =
                align_to_vocab(&w, listing, w.air_feature_dim(), |l| w.air_features(l))?;
            air_table(&trained.model, &features, &known)?
        }
        PretrainKind::Visual => {
            let w = world(cfg)?;
            let (t, _) =
                align_to_vocab(&w, listing, w.visual.cols(), |l| w.visual.row(l).to_vec())?;
            EmbeddingTable::frozen("visual", t)?
        }
    };
    save_table(&table, &dir.file(&table_file(kind.flavor())))?;
    dir.save_config(&format!("pretrain-{}", kind.flavor()), cfg)?;
    Ok(table)
}

/// Frozen tables for `flavors`, each of which must have been pretrained.
pub fn load_pretrained(dir: &RunDir, flavors: &[Flavor]) -> Result<PretrainedBundle> {
    let mut b = PretrainedBundle::new();
    for f in flavors {
        let p = dir.file(&table_file(*f));
        if !p.exists() {
            return Err(config_err(format!(
                "flavor {f} is configured but {} is missing; run `adpm pretrain {f}` first",
                p.display()
            )));
        }
        b.insert(*f, load_flavor(&p, *f)?)?;
    }
    Ok(b)
}

// ----- train / calibrate / evaluate ----------------------------------------------

struct Prepared {
    train: TrainingData,
    valid: TrainingData,
    vocabs: Option<AdpmVocabs>,
    pretrained: PretrainedBundle,
}

fn needed_flavors(setup: &TaskSetup) -> Vec<Flavor> {
    match &setup.adpm {
        Some(a) if a.use_component2 => a.flavors.clone(),
        _ => Vec::new(),
    }
}

fn prepare(cfg: &RunConfig, dir: &RunDir, setups: &[&TaskSetup]) -> Result<Prepared> {
    let personalized = setups.iter().any(|s| s.adpm.is_some());
    let mut flavors: Vec<Flavor> = setups.iter().flat_map(|s| needed_flavors(s)).collect();
    flavors.sort();
    flavors.dedup();
    // Pre-flight: cheap file checks before any data is parsed.
    let vocabs = if personalized {
        Some(load_vocabs(dir)?)
    } else {
        None
    };
    let pretrained = load_pretrained(dir, &flavors)?;
    let w = world(cfg)?;
    let train = load_split(dir, TRAIN_DATA)?;
    let valid = load_split(dir, VALID_DATA)?;
    let tc = w.context_matrix(&train)?;
    let vc = w.context_matrix(&valid)?;
    Ok(Prepared {
        train: TrainingData::new(train, tc)?,
        valid: TrainingData::new(valid, vc)?,
        vocabs,
        pretrained,
    })
}

fn build_model(
    cfg: &RunConfig,
    setup: &TaskSetup,
    context_dim: usize,
    vocabs: Option<&AdpmVocabs>,
    store: &mut ParamStore,
) -> Result<RankingModel> {
    let adpm = match (&setup.adpm, vocabs) {
        (Some(a), Some(v)) => Some((a, v)),
        (Some(_), None) => return Err(config_err("personalized model needs vocabularies")),
        (None, _) => None,
    };
    let mut rng = Stream::new(cfg.seed()?).substream("model");
    Ok(RankingModel::new(
        &setup.ranking,
        context_dim,
        adpm,
        store,
        &mut rng,
    )?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub rows_per_epoch: usize,
    pub final_loss: f64,
    pub report: MetricReport,
    pub calibration: Option<(CalibrationParams, MetricReport)>,
}

fn calibration_text(c: &CalibrationParams) -> String {
    format!("a={}\nb={}\n", c.a, c.b)
}

fn parse_calibration(text: &str) -> Result<CalibrationParams> {
    let mut a = None;
    let mut b = None;
    for line in text.lines() {
        match line.split_once('=') {
            Some(("a", v)) => a = v.trim().parse().ok(),
            Some(("b", v)) => b = v.trim().parse().ok(),
            _ => {}
        }
    }
    match (a, b) {
        (Some(a), Some(b)) => Ok(CalibrationParams { a, b }),
        _ => Err(config_err("calibration file needs `a=` and `b=` lines")),
    }
}

/// Platt fit on validation logits; returns the parameters and the report of
/// the recalibrated probabilities.
fn calibrate_logits(logits: &[f64], labels: &[bool]) -> Result<(CalibrationParams, MetricReport)> {
    let c = fit_platt(logits, labels)?;
    let report = MetricReport::compute(&c.apply_all(logits), labels)?;
    Ok((c, report))
}

pub fn train_task(cfg: &RunConfig, dir: &RunDir, task: Task) -> Result<TrainSummary> {
    cfg.validate()?;
    let setup = cfg.task(task)?;
    let p = prepare(cfg, dir, &[&setup])?;
    let mut store = ParamStore::new();
    let model = build_model(
        cfg,
        &setup,
        p.train.context_dim(),
        p.vocabs.as_ref(),
        &mut store,
    )?;
    let vocabs = model.adpm.as_ref().and(p.vocabs.as_ref());
    let outcome = train(
        &mut store,
        &model,
        &p.pretrained,
        vocabs,
        &p.train,
        &setup.train,
    )?;
    let (logits, labels) = score(&store, &model, &p.pretrained, vocabs, &p.valid, task)?;
    let report = MetricReport::compute(&CalibrationParams::identity().apply_all(&logits), &labels)?;

    save_checkpoint(&dir.file(&checkpoint_file(task)), &store, &cfg.to_text())?;
    dir.write(&format!("{task}.losses.tsv"), &losses_text(&outcome.losses))?;
    dir.write(&metrics_file(task), &report.to_text())?;
    let calibration = if setup.calibrate {
        let (c, r) = calibrate_logits(&logits, &labels)?;
        dir.write(&calibration_file(task), &calibration_text(&c))?;
        dir.write(&format!("{task}.metrics.calibrated.txt"), &r.to_text())?;
        Some((c, r))
    } else {
        None
    };
    dir.save_config(&format!("train-{task}"), cfg)?;
    Ok(TrainSummary {
        steps: outcome.steps,
        rows_per_epoch: outcome.rows_per_epoch,
        final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
        report,
        calibration,
    })
}

/// Model and data restored from a checkpoint; the manifest is the config
/// the model was trained with.
struct Restored {
    cfg: RunConfig,
    store: ParamStore,
    model: RankingModel,
    prepared: Prepared,
}

fn restore(dir: &RunDir, task: Task) -> Result<Restored> {
    let (manifest, saved) =
        load_checkpoint(&dir.require(&checkpoint_file(task), &format!("train {task}"))?)?;
    let cfg = RunConfig::parse(&manifest)?;
    let setup = cfg.task(task)?;
    let prepared = prepare(&cfg, dir, &[&setup])?;
    let mut store = ParamStore::new();
    let model = build_model(
        &cfg,
        &setup,
        prepared.train.context_dim(),
        prepared.vocabs.as_ref(),
        &mut store,
    )?;
    store.load_from(&saved)?;
    Ok(Restored {
        cfg,
        store,
        model,
        prepared,
    })
}

fn restored_scores(r: &Restored, task: Task) -> Result<(Vec<f64>, Vec<bool>)> {
    let vocabs = r.model.adpm.as_ref().and(r.prepared.vocabs.as_ref());
    Ok(score(
        &r.store,
        &r.model,
        &r.prepared.pretrained,
        vocabs,
        &r.prepared.valid,
        task,
    )?)
}

pub fn calibrate(
    dir: &RunDir,
    task: Task,
) -> Result<(CalibrationParams, MetricReport, MetricReport)> {
    let r = restore(dir, task)?;
    let (logits, labels) = restored_scores(&r, task)?;
    let before = MetricReport::compute(&CalibrationParams::identity().apply_all(&logits), &labels)?;
    let (c, after) = calibrate_logits(&logits, &labels)?;
    dir.write(&calibration_file(task), &calibration_text(&c))?;
    dir.write(&format!("{task}.metrics.calibrated.txt"), &after.to_text())?;
    dir.save_config(&format!("calibrate-{task}"), &r.cfg)?;
    Ok((c, before, after))
}

/// Validation metrics of the saved model, recalibrated when a calibration
/// file exists.
pub fn evaluate(dir: &RunDir, task: Task) -> Result<MetricReport> {
    let r = restore(dir, task)?;
    let (logits, labels) = restored_scores(&r, task)?;
    let cal_path = dir.file(&calibration_file(task));
    let cal = if cal_path.exists() {
        parse_calibration(&dir.read(&calibration_file(task))?)?
    } else {
        CalibrationParams::identity()
    };
    let report = MetricReport::compute(&cal.apply_all(&logits), &labels)?;
    dir.write(&format!("{task}.evaluation.txt"), &report.to_text())?;
    dir.save_config(&format!("evaluate-{task}"), &r.cfg)?;
    Ok(report)
}

// ----- ablate --------------------------------------------------------------------

/// One grid line: a variant name and task-key overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridLine {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

const GRID_TRAIN_KEYS: &[&str] = &["epochs", "batch_size", "lr_max", "sampling", "calibrate"];

/// Parses `name key=value ...` lines. Keys are task keys (without the
/// `ctr.`/`pccvr.` prefix) or `listing_k`.
pub fn parse_grid(text: &str) -> Result<Vec<GridLine>> {
    let mut out: Vec<GridLine> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().expect("non-empty line").to_string();
        if out.iter().any(|g| g.name == name) {
            return Err(config_err(format!(
                "grid line {}: variant `{name}` repeated",
                n + 1
            )));
        }
        let mut overrides = Vec::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| {
                config_err(format!("grid line {}: `{p}` is not key=value", n + 1))
            })?;
            if GRID_TRAIN_KEYS.contains(&k) {
                return Err(config_err(format!(
                    "grid line {}: `{k}` is shared by the whole grid; set it in the config instead",
                    n + 1
                )));
            }
            if k != "listing_k" && !TASK_KEYS.contains(&k) {
                return Err(config_err(format!(
                    "grid line {}: unknown key `{k}`",
                    n + 1
                )));
            }
            overrides.push((k.to_string(), v.to_string()));
        }
        out.push(GridLine { name, overrides });
    }
    if !out.iter().any(|g| g.name == BASELINE) {
        return Err(config_err("ablation grid needs a `baseline` line"));
    }
    Ok(out)
}

/// Baseline plus the seven non-empty component subsets.
pub fn default_grid() -> Vec<GridLine> {
    let mut g = vec![GridLine {
        name: BASELINE.into(),
        overrides: vec![("adpm".into(), "none".into())],
    }];
    for (name, comps) in [
        ("adpm_c1", "1"),
        ("adpm_c2", "2"),
        ("adpm_c3", "3"),
        ("adpm_c12", "1,2"),
        ("adpm_c13", "1,3"),
        ("adpm_c23", "2,3"),
        ("adpm_c123", "1,2,3"),
    ] {
        g.push(GridLine {
            name: name.into(),
            overrides: vec![("adpm".into(), comps.into())],
        });
    }
    g
}

pub fn grid_variants(
    cfg: &RunConfig,
    task: Task,
    grid: &[GridLine],
) -> Result<(Vec<AblationVariant>, Vec<TaskSetup>)> {
    let mut variants = Vec::new();
    let mut setups = Vec::new();
    for line in grid {
        let mut c = cfg.clone();
        let mut listing_k = None;
        for (k, v) in &line.overrides {
            if k == "listing_k" {
                listing_k = Some(v.parse::<usize>().ok().filter(|k| *k > 0).ok_or_else(|| {
                    config_err(format!("variant {}: bad listing_k `{v}`", line.name))
                })?);
            } else {
                c.set(&format!("{task}.{k}"), v)?;
            }
        }
        let setup = c
            .task(task)
            .map_err(|e| config_err(format!("variant {}: {e}", line.name)))?;
        variants.push(AblationVariant {
            name: line.name.clone(),
            adpm: setup.adpm.clone(),
            ranking: Some(setup.ranking.clone()),
            listing_vocab_k: listing_k,
        });
        setups.push(setup);
    }
    Ok((variants, setups))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateSummary {
    pub records: Vec<AblationRecord>,
    pub table: String,
}

pub fn ablate(cfg: &RunConfig, dir: &RunDir, grid: &[GridLine]) -> Result<AblateSummary> {
    cfg.validate()?;
    let task = cfg.ablate_task()?;
    let seeds = cfg.ablate_seeds()?;
    let (variants, setups) = grid_variants(cfg, task, grid)?;
    let refs: Vec<&TaskSetup> = setups.iter().collect();
    let p = prepare(cfg, dir, &refs)?;
    let base = cfg.task(task)?;
    let ctx = AblationContext {
        train: p.train,
        valid: p.valid,
        vocabs: p.vocabs.unwrap_or_default(),
        pretrained: p.pretrained,
        ranking: base.ranking,
        train_config: base.train,
    };
    let records = run_ablation(&ctx, &variants, &seeds)?;
    let summary = summarize(&records);
    let table = summary_table(&summary);
    dir.write("ablate.records.tsv", &records_tsv(&records))?;
    dir.write("ablate.summary.tsv", &summary_tsv(&summary))?;
    dir.write("ablate.summary.txt", &table)?;
    dir.save_config("ablate", cfg)?;
    Ok(AblateSummary { records, table })
}

// ----- dump ----------------------------------------------------------------------

/// First `rows` rows of an EMBT file, labelled by `vocab` when given.
pub fn dump(table: &Path, vocab: Option<&Path>, rows: usize) -> Result<String> {
    let t = load_table(table)?;
    let v = vocab.map(read_vocab).transpose()?;
    Ok(dump_table(&t, v.as_ref(), rows))
}
