//! Staged training and evaluation on disk.
//!
//! Stages write their artifacts under the run's output directory and read
//! their inputs from there, so each can run in its own process. Every
//! artifact carries the config fingerprint.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active::{self, ActiveEnv, ActiveError, ActivePolicy, AttributeLinks};
use crate::config::{ConfigError, RunConfig};
use crate::data::{self, DataError, Dataset, DatasetSplit, PairwiseSets, UserItems};
use crate::eval::{self, EvalError, GridRow, MetricsReport, Variant};
use crate::fm::{FmError, FmHyper, FmModel, PreferenceContext};
use crate::graph::{HeteroGraph, NodeId};
use crate::negative::{self, NegEnv, NegPolicy, NegativeError};
use crate::policy::{self, DqnAgent, PolicyError, QNet};
use crate::session::{Components, SessionError, TranscriptLine};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage '{stage}' has not been run: missing {}", path.display())]
    Precondition { stage: &'static str, path: PathBuf },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fm(#[from] FmError),
    #[error(transparent)]
    Active(#[from] ActiveError),
    #[error(transparent)]
    Negative(#[from] NegativeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl PipelineError {
    pub fn is_precondition(&self) -> bool {
        matches!(self, PipelineError::Precondition { .. })
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

/// Where each artifact lives inside the output directory.
#[derive(Clone, Debug)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.output_dir() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }
    pub fn interactions(&self) -> PathBuf {
        self.root.join("data/interactions.tsv")
    }
    pub fn triplets(&self) -> PathBuf {
        self.root.join("data/triplets.tsv")
    }
    pub fn fm(&self) -> PathBuf {
        self.root.join("fm.ckpt")
    }
    pub fn active(&self) -> PathBuf {
        self.root.join("active.ckpt")
    }
    pub fn negative(&self) -> PathBuf {
        self.root.join("negative.ckpt")
    }
    pub fn policy(&self, v: Variant) -> PathBuf {
        self.root.join(format!("policy-{}.ckpt", v.as_str()))
    }
    pub fn log(&self, stage: &str) -> PathBuf {
        self.root.join(format!("logs/{stage}.jsonl"))
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports.jsonl")
    }
    pub fn curves(&self) -> PathBuf {
        self.root.join("curves.tsv")
    }
    pub fn grid(&self) -> PathBuf {
        self.root.join("grid.tsv")
    }
    pub fn transcripts(&self) -> PathBuf {
        self.root.join("transcripts")
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, text).map_err(io(path))
}

fn read_required(path: &Path, stage: &'static str) -> Result<String> {
    if !path.exists() {
        return Err(PipelineError::Precondition { stage, path: path.to_path_buf() });
    }
    fs::read_to_string(path).map_err(io(path))
}

fn check_fingerprint(what: &Path, found: &str, cfg: &RunConfig) {
    let expected = cfg.fingerprint();
    if found != expected {
        log::warn!("{} was produced by config {found}, current config is {expected}", what.display());
    }
}

/// JSON lines with a leading fingerprint comment.
fn write_jsonl<T: Serialize>(path: &Path, fingerprint: &str, rows: &[T]) -> Result<()> {
    let mut out = format!("# fingerprint={fingerprint}\n");
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| PipelineError::Other(e.to_string()))?);
        out.push('\n');
    }
    write_file(path, &out)
}

/// Persist the effective config next to the artifacts.
pub fn save_config(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(cfg);
    write_file(&paths.config(), &format!("# fingerprint={}\n{}", cfg.fingerprint(), cfg.to_text()))
}

/// Stage 0: write the synthetic dataset. A run with explicit dataset paths
/// has nothing to generate.
pub fn gen_data(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    cfg.validate()?;
    if !cfg.data.interactions.is_empty() {
        log::info!("dataset paths given; skipping generation");
        return Ok(None);
    }
    let paths = Paths::new(cfg);
    let files = data::generate_synthetic(&cfg.synthetic_spec())?;
    let header = format!("# fingerprint={}\n", cfg.fingerprint());
    write_file(&paths.interactions(), &(header.clone() + &files.interactions))?;
    write_file(&paths.triplets(), &(header + &files.triplets))?;
    save_config(cfg)?;
    Ok(Some(paths.root.join("data")))
}

/// Everything derived deterministically from the dataset and the seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub split: DatasetSplit,
    /// Knowledge graph with training interactions only.
    pub graph: HeteroGraph,
    pub train_positives: UserItems,
    pub train_sets: PairwiseSets,
    pub valid_sets: PairwiseSets,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let paths = Paths::new(cfg);
    let (inter, trip) = if cfg.data.interactions.is_empty() {
        (paths.interactions(), paths.triplets())
    } else {
        (PathBuf::from(&cfg.data.interactions), PathBuf::from(&cfg.data.triplets))
    };
    let inter_text = read_required(&inter, "gen-data")?;
    let trip_text = read_required(&trip, "gen-data")?;
    let dataset = data::parse_dataset(&inter_text, &trip_text)?;
    let split = data::split_dataset(&dataset.records, cfg.stage_seed(2));
    let graph = dataset.graph_with(&split.train);
    let train_positives = data::positives_by_user(&split.train);
    let train_sets = data::build_pairwise_sets(&split, &graph, cfg.data.neg_per_pos, cfg.stage_seed(7));
    let valid_sets = data::build_validation_sets(&split, &graph, cfg.data.neg_per_pos, cfg.stage_seed(8));
    Ok(Prepared { dataset, split, graph, train_positives, train_sets, valid_sets })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmEpochLog {
    pub epoch: usize,
    pub item_loss: f64,
    pub attr_loss: f64,
    /// Fraction of validation item triples ranked correctly.
    pub valid_item_auc: f64,
    pub valid_attr_auc: f64,
}

fn pair_accuracy(fm: &FmModel, triples: impl Iterator<Item = (NodeId, NodeId, NodeId)>, attr: bool) -> Result<f64> {
    let (mut ok, mut n) = (0.0, 0usize);
    for (u, p, q) in triples {
        let ctx = PreferenceContext::new(u);
        let (a, b) = if attr {
            (fm.score_attribute(&ctx, p)?, fm.score_attribute(&ctx, q)?)
        } else {
            (fm.score_item(&ctx, p)?, fm.score_item(&ctx, q)?)
        };
        ok += if a > b {
            1.0
        } else if a == b {
            0.5
        } else {
            0.0
        };
        n += 1;
    }
    Ok(if n == 0 { 0.5 } else { ok / n as f64 })
}

/// Mini-batch BPR over both offline pairwise sets, one item batch then
/// one attribute batch in turn.
pub fn train_fm(fm: &mut FmModel, train: &PairwiseSets, valid: &PairwiseSets, hyper: &FmHyper, epochs: usize, batch: usize, seed: u64) -> Result<Vec<FmEpochLog>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctxs: BTreeMap<NodeId, PreferenceContext> = BTreeMap::new();
    for u in train.items.iter().map(|t| t.user).chain(train.attrs.iter().map(|t| t.user)) {
        ctxs.entry(u).or_insert_with(|| PreferenceContext::new(u));
    }
    let mut item_order: Vec<usize> = (0..train.items.len()).collect();
    let mut attr_order: Vec<usize> = (0..train.attrs.len()).collect();
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        item_order.shuffle(&mut rng);
        attr_order.shuffle(&mut rng);
        let (mut il, mut al) = (0.0, 0.0);
        let rounds = item_order.len().max(attr_order.len()).div_ceil(batch);
        for r in 0..rounds {
            let ib: Vec<_> = item_order.iter().skip(r * batch).take(batch).map(|&i| (train.items[i], &ctxs[&train.items[i].user])).collect();
            il += fm.bpr_step_items(&ib, hyper)?.loss * ib.len() as f64;
            let ab: Vec<_> = attr_order.iter().skip(r * batch).take(batch).map(|&i| (train.attrs[i], &ctxs[&train.attrs[i].user])).collect();
            al += fm.bpr_step_attrs(&ab, hyper)?.loss * ab.len() as f64;
        }
        let log = FmEpochLog {
            epoch,
            item_loss: il / train.items.len().max(1) as f64,
            attr_loss: al / train.attrs.len().max(1) as f64,
            valid_item_auc: pair_accuracy(fm, valid.items.iter().map(|t| (t.user, t.pos, t.neg)), false)?,
            valid_attr_auc: pair_accuracy(fm, valid.attrs.iter().map(|t| (t.user, t.pos, t.neg)), true)?,
        };
        log::debug!("fm epoch {epoch}: {log:?}");
        logs.push(log);
    }
    Ok(logs)
}

/// Stage 1: recommender pretraining.
pub fn pretrain_fm(cfg: &RunConfig) -> Result<Vec<FmEpochLog>> {
    let prep = prepare(cfg)?;
    let hyper = cfg.fm_hyper();
    let mut fm = FmModel::with_stdev(prep.dataset.id_map.len(), hyper.dim, hyper.seed, cfg.fm.init_stdev);
    let logs = train_fm(&mut fm, &prep.train_sets, &prep.valid_sets, &hyper, cfg.fm.epochs, cfg.fm.batch_size, cfg.stage_seed(9))?;
    let paths = Paths::new(cfg);
    let fp = cfg.fingerprint();
    write_file(&paths.fm(), &fm.to_checkpoint(&hyper, &fp))?;
    write_jsonl(&paths.log("pretrain-fm"), &fp, &logs)?;
    save_config(cfg)?;
    Ok(logs)
}

pub fn load_fm(cfg: &RunConfig) -> Result<FmModel> {
    let path = Paths::new(cfg).fm();
    let (fm, _, fp) = FmModel::from_checkpoint(&read_required(&path, "pretrain-fm")?)?;
    check_fingerprint(&path, &fp, cfg);
    Ok(fm)
}

/// Stage 2a: active sampler pretraining.
pub fn pretrain_active(cfg: &RunConfig) -> Result<Vec<active::ActiveEpisodeLog>> {
    let prep = prepare(cfg)?;
    let fm = load_fm(cfg)?;
    let links = AttributeLinks::from_graph(&prep.graph);
    let hyper = cfg.fm_hyper();
    let env = ActiveEnv { graph: &prep.graph, links: &links, hyper: &hyper, turns: cfg.active.turns };
    let specs = active::episode_specs(&prep.graph, &prep.train_positives, &prep.train_sets.attrs, &prep.valid_sets.attrs);
    let mut policy = ActivePolicy::new(cfg.active_config());
    let logs = active::pretrain(&mut policy, &specs, &fm, &env, cfg.active.episodes)?;
    let paths = Paths::new(cfg);
    let fp = cfg.fingerprint();
    write_file(&paths.active(), &policy.to_checkpoint(&fp))?;
    write_jsonl(&paths.log("pretrain-active"), &fp, &logs)?;
    Ok(logs)
}

/// Stage 2b: negative sampler pretraining.
pub fn pretrain_negative(cfg: &RunConfig) -> Result<Vec<negative::NegEpisodeLog>> {
    let prep = prepare(cfg)?;
    let fm = load_fm(cfg)?;
    let hyper = cfg.fm_hyper();
    let env = NegEnv { graph: &prep.graph, positives: &prep.train_positives, hyper: &hyper };
    let mut policy = NegPolicy::new(cfg.negative_config(), fm.dim());
    let logs = negative::pretrain(&mut policy, &prep.train_sets.items, &fm, &env, cfg.negative.episodes)?;
    let paths = Paths::new(cfg);
    let fp = cfg.fingerprint();
    write_file(&paths.negative(), &policy.to_checkpoint(&fp))?;
    write_jsonl(&paths.log("pretrain-negative"), &fp, &logs)?;
    Ok(logs)
}

/// Session components for one variant from the stage 1 and 2 checkpoints.
pub fn components(cfg: &RunConfig, prep: &Prepared, variant: Variant) -> Result<Components> {
    let paths = Paths::new(cfg);
    let fm = load_fm(cfg)?;
    let (active, fa) = ActivePolicy::from_checkpoint(&read_required(&paths.active(), "pretrain-active")?)?;
    check_fingerprint(&paths.active(), &fa, cfg);
    let (negative, fnn) = NegPolicy::from_checkpoint(&read_required(&paths.negative(), "pretrain-negative")?)?;
    check_fingerprint(&paths.negative(), &fnn, cfg);
    let session = cfg.session_config(variant.strategy())?;
    Ok(Components::new(prep.graph.clone(), fm, active, negative, prep.train_positives.clone(), session))
}

pub fn load_policy(cfg: &RunConfig, variant: Variant) -> Result<Option<QNet>> {
    if !variant.needs_policy() {
        return Ok(None);
    }
    let path = Paths::new(cfg).policy(variant);
    let ck = policy::qnet_from_checkpoint(&read_required(&path, "train-policy")?)?;
    check_fingerprint(&path, &ck.fingerprint, cfg);
    if ck.max_turns != cfg.session.max_turns {
        return Err(PipelineError::Other(format!(
            "{} was trained for {} turns, config asks for {}",
            path.display(),
            ck.max_turns,
            cfg.session.max_turns
        )));
    }
    Ok(Some(ck.net))
}

fn capped<T>(xs: Vec<T>, cap: usize) -> Vec<T> {
    if cap == 0 {
        xs
    } else {
        xs.into_iter().take(cap).collect()
    }
}

/// Stage 3: one Q-network per learned variant, trained on validation
/// targets.
pub fn train_policy(cfg: &RunConfig) -> Result<BTreeMap<Variant, Vec<eval::PolicyLog>>> {
    let prep = prepare(cfg)?;
    let paths = Paths::new(cfg);
    let fp = cfg.fingerprint();
    let mut out = BTreeMap::new();
    for variant in cfg.variants()?.into_iter().filter(|v| v.needs_policy()) {
        let c = components(cfg, &prep, variant)?;
        let users = eval::cohort(&c, &prep.split.valid);
        let mut agent = DqnAgent::new(cfg.q_config(), policy::state_dim(cfg.session.max_turns));
        let logs = eval::train_policy(&c, &mut agent, &users, cfg.policy.train_sessions, cfg.stage_seed(10))?;
        let text = policy::qnet_to_checkpoint(&agent.online, &agent.config, cfg.session.max_turns, &c.config.rewards, &fp);
        write_file(&paths.policy(variant), &text)?;
        write_jsonl(&paths.log(&format!("train-policy-{variant}")), &fp, &logs)?;
        out.insert(variant, logs);
    }
    Ok(out)
}

/// Evaluate every configured variant on the test split. Rows that fail
/// are logged and skipped so the others still report.
pub fn evaluate(cfg: &RunConfig) -> Result<Vec<std::result::Result<MetricsReport, String>>> {
    let prep = prepare(cfg)?;
    load_fm(cfg)?;
    let fp = cfg.fingerprint();
    let mut rows = Vec::new();
    for variant in cfg.variants()? {
        let row = (|| -> Result<MetricsReport> {
            let c = components(cfg, &prep, variant)?;
            let q = load_policy(cfg, variant)?;
            let users = capped(eval::cohort(&c, &prep.split.test), cfg.eval.max_sessions);
            let outcomes = eval::evaluate(&c, q.as_ref(), &users, cfg.stage_seed(11))?;
            Ok(MetricsReport::from_outcomes(variant.as_str(), cfg.run.seed, cfg.session.max_turns, &outcomes, &fp)?)
        })();
        match row {
            Err(e) if e.is_precondition() => return Err(e),
            Err(e) => {
                log::error!("variant {variant}: {e}");
                rows.push(Err(format!("{variant}: {e}")));
            }
            Ok(r) => rows.push(Ok(r)),
        }
    }
    let paths = Paths::new(cfg);
    let ok: Vec<&MetricsReport> = rows.iter().filter_map(|r| r.as_ref().ok()).collect();
    write_jsonl(&paths.reports(), &fp, &ok)?;
    write_file(&paths.curves(), &curves_table(&fp, &ok))?;
    Ok(rows)
}

/// Per-turn SR and rec-ratio columns for each report.
pub fn curves_table(fp: &str, reports: &[&MetricsReport]) -> String {
    let mut out = format!("# fingerprint={fp}\nturn");
    for r in reports {
        out.push_str(&format!("\tsr_{v}_{s}\trec_{v}_{s}", v = r.variant, s = r.seed));
    }
    out.push('\n');
    let turns = reports.iter().map(|r| r.success_rate.len()).max().unwrap_or(0);
    for t in 0..turns {
        out.push_str(&(t + 1).to_string());
        for r in reports {
            let sr = r.success_rate.get(t).map(|x| x.to_string()).unwrap_or_default();
            let rec = r.rec_ratio.get(t).copied().flatten().map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!("\t{sr}\t{rec}"));
        }
        out.push('\n');
    }
    out
}

/// All stages in order.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<std::result::Result<MetricsReport, String>>> {
    gen_data(cfg)?;
    pretrain_fm(cfg)?;
    pretrain_active(cfg)?;
    pretrain_negative(cfg)?;
    train_policy(cfg)?;
    evaluate(cfg)
}

/// Full pipeline for each seed in its own subdirectory, then mean and
/// sample stdev per variant.
pub fn run_grid(cfg: &RunConfig, seeds: &[u64]) -> Result<(Vec<MetricsReport>, Vec<GridRow>)> {
    let mut reports = Vec::new();
    let mut failures: BTreeMap<String, String> = BTreeMap::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.run.seed = seed;
        c.run.output_dir = cfg.output_dir().join(format!("seed-{seed}")).to_string_lossy().into_owned();
        match run_all(&c) {
            Ok(rows) => {
                for r in rows {
                    match r {
                        Ok(r) => reports.push(r),
                        Err(e) => {
                            let (v, msg) = e.split_once(": ").unwrap_or(("?", &e));
                            failures.insert(v.to_string(), format!("seed {seed}: {msg}"));
                        }
                    }
                }
            }
            Err(e) => {
                for v in cfg.variants()? {
                    failures.entry(v.as_str().to_string()).or_insert_with(|| format!("seed {seed}: {e}"));
                }
            }
        }
    }
    let mut rows = Vec::new();
    for v in cfg.variants()? {
        if let Some(e) = failures.get(v.as_str()) {
            rows.push(GridRow::failed(v.as_str(), e.clone()));
            continue;
        }
        let mine: Vec<MetricsReport> = reports.iter().filter(|r| r.variant == v.as_str()).cloned().collect();
        rows.push(GridRow::aggregate(v.as_str(), &mine));
    }
    let paths = Paths::new(cfg);
    write_file(&paths.grid(), &grid_table(&rows))?;
    write_jsonl(&paths.reports(), &cfg.fingerprint(), &reports)?;
    Ok((reports, rows))
}

pub fn grid_table(rows: &[GridRow]) -> String {
    let mut out = String::from("variant\tseeds\tsr_mean\tsr_stdev\tat_mean\tat_stdev\terror\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
            r.variant,
            seeds.join(","),
            r.success_mean,
            r.success_stdev,
            r.turns_mean,
            r.turns_stdev,
            r.error.as_deref().unwrap_or("")
        ));
    }
    out
}

/// One test-split session as transcript lines. `index` picks the test
/// interaction; by default it is drawn from the run seed.
pub fn simulate(cfg: &RunConfig, variant: Variant, index: Option<usize>) -> Result<Vec<TranscriptLine>> {
    let prep = prepare(cfg)?;
    let c = components(cfg, &prep, variant)?;
    let q = load_policy(cfg, variant)?;
    let users = eval::cohort(&c, &prep.split.test);
    if users.is_empty() {
        return Err(PipelineError::Other("the test split has no usable interactions".into()));
    }
    let seed = cfg.stage_seed(12);
    let i = index.unwrap_or((seed % users.len() as u64) as usize);
    let sim = users.get(i).ok_or_else(|| PipelineError::Other(format!("index {i} is outside 0..{}", users.len())))?;
    let s = crate::session::run_session(&c, q.as_ref(), 0.0, sim, format!("simulate-{i}"), crate::session::session_seed(seed, i as u64))?;
    Ok(s.transcript())
}
