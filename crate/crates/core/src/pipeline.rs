//! Run orchestration: combined configuration, the progressive pipeline with its on-disk
//! artifacts, resume, summaries and run manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{gen_synthetic, subset, AugmentConfig, Dataset, Split};
use crate::error::{Error, Result};
use crate::rank::{
    epoch_hook, rank_report, recalibration_batches, run_oracles, select_checkpoint, EpochTrace, EvalConfig, EvalSet,
    OracleConfig, RankReport,
};
use crate::space::{sample_uniform, Architecture, SamplerKind, SearchSpace};
use crate::split::{LrPlan, LrRule};
use crate::supernet::SuperNet;
use crate::tensor::Tensor;
use crate::train::{progressive_run, train_one_shot, EpochSummary, StageHooks, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        num_classes: usize,
        per_class: usize,
        resolution: usize,
        difficulty: f32,
        seed: u64,
    },
    Binary {
        path: PathBuf,
        num_classes: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Items per class moved into the validation split.
    pub val_per_class: usize,
}

impl DataConfig {
    /// Builds or loads the dataset and tags its train/validation splits.
    pub fn load(&self) -> Result<Dataset> {
        let mut ds = match &self.source {
            DataSource::Synthetic {
                num_classes,
                per_class,
                resolution,
                difficulty,
                seed,
            } => gen_synthetic(*num_classes, *per_class, *resolution, *difficulty, *seed)?,
            DataSource::Binary { path, num_classes } => {
                let mut ds = Dataset::load_binary(path)?;
                if let Some(&bad) = ds.labels().iter().find(|&&l| l >= *num_classes) {
                    return Err(Error::Input(format!("label {bad} in {} exceeds {num_classes} classes", path.display())));
                }
                ds.num_classes = *num_classes;
                ds
            }
        };
        ds.assign_splits(self.val_per_class, 0)?;
        Ok(ds)
    }
}

/// Everything a progressive run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub space: SearchSpace,
    pub data: DataConfig,
    pub one_shot: TrainConfig,
    pub few_shot: TrainConfig,
    /// Group counts to train, `1..=g_max`.
    pub schedule: Vec<usize>,
    pub lr_rule: LrRule,
    pub oracle: OracleConfig,
    pub eval: EvalConfig,
    /// Super-net initialization seed.
    pub init_seed: u64,
}

impl RunConfig {
    /// Laptop-CPU configuration on the two-stage desk space and synthetic data.
    pub fn desk() -> Self {
        let augment = AugmentConfig::disabled();
        RunConfig {
            space: SearchSpace::desk_small(),
            data: DataConfig {
                source: DataSource::Synthetic {
                    num_classes: 10,
                    per_class: 500,
                    resolution: 32,
                    difficulty: 1.0,
                    seed: 0,
                },
                val_per_class: 100,
            },
            one_shot: TrainConfig {
                epochs: 8,
                batch_size: 64,
                base_lr: 0.1,
                warmup_epochs: 1,
                dropout_p: 0.1,
                augment: augment.clone(),
                ..TrainConfig::default()
            },
            few_shot: TrainConfig {
                epochs: 4,
                batch_size: 64,
                base_lr: 0.05,
                warmup_epochs: 0,
                dropout_p: 0.1,
                augment: augment.clone(),
                ..TrainConfig::default()
            },
            schedule: vec![1, 2, 3],
            lr_rule: LrRule::default(),
            oracle: OracleConfig {
                epochs: 3,
                batch_size: 32,
                augment,
                ..OracleConfig::default()
            },
            eval: EvalConfig {
                subset_fraction: 0.2,
                recalib_batches: 2,
                ..EvalConfig::default()
            },
            init_seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        self.one_shot.validate()?;
        self.few_shot.validate()?;
        if self.eval.num_archs < 2 {
            return Err(Error::Config("eval.num_archs must be at least 2".into()));
        }
        if !(self.eval.subset_fraction > 0.0 && self.eval.subset_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "eval.subset_fraction {} outside (0, 1]",
                self.eval.subset_fraction
            )));
        }
        if self.eval.recalib_batches == 0 || self.eval.recalib_batch_size == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("eval batch settings must be positive".into()));
        }
        if self.oracle.epochs == 0 || self.oracle.batch_size == 0 {
            return Err(Error::Config("oracle epochs and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?)
}

/// The split pieces of a loaded dataset that the pipeline consumes.
pub struct PreparedData {
    pub full: Dataset,
    pub train: Dataset,
    pub val: Dataset,
    /// Fixed validation subset used by the per-epoch hook.
    pub val_subset: Dataset,
    pub recalib: Vec<Tensor>,
}

impl PreparedData {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let full = cfg.data.load()?;
        if full.num_classes != cfg.space.num_classes {
            return Err(Error::Config(format!(
                "data has {} classes, space expects {}",
                full.num_classes, cfg.space.num_classes
            )));
        }
        let train = full.split(Split::Train);
        let val = full.split(Split::Val);
        let val_subset = subset(&val, cfg.eval.subset_fraction, cfg.eval.subset_seed)?;
        let recalib = recalibration_batches(
            &train,
            cfg.eval.recalib_batches,
            cfg.eval.recalib_batch_size,
            cfg.eval.recalib_seed,
        );
        Ok(PreparedData {
            full,
            train,
            val,
            val_subset,
            recalib,
        })
    }
}

/// What produced a set of oracle accuracies, so that stale ones are never reused.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleProvenance {
    pub oracle_config_hash: String,
    pub data_hash: String,
    pub space_hash: String,
    pub num_archs: usize,
    pub arch_seed: u64,
}

/// Loads the eval set from `dir` when its provenance matches, otherwise trains the oracles.
pub fn ensure_oracles(
    cfg: &RunConfig,
    data: &PreparedData,
    dir: &Path,
    jobs: usize,
    log: &(dyn Fn(&str) + Sync),
) -> Result<EvalSet> {
    let prov = OracleProvenance {
        oracle_config_hash: cfg.oracle.hash(),
        data_hash: data.full.content_hash(),
        space_hash: cfg.space.content_hash(),
        num_archs: cfg.eval.num_archs,
        arch_seed: cfg.eval.arch_seed,
    };
    let set_path = dir.join("eval_set.json");
    let prov_path = dir.join("oracle.json");
    if set_path.exists() && prov_path.exists() {
        let old: OracleProvenance = read_json(&prov_path)?;
        let set: EvalSet = read_json(&set_path)?;
        if old == prov && set.oracle_accuracies().is_ok() {
            log("oracle accuracies reused");
            return Ok(set);
        }
    }
    let mut set = EvalSet::sample(&cfg.space, cfg.eval.num_archs, cfg.eval.arch_seed)?;
    let n = set.entries.len();
    run_oracles(&cfg.space, &mut set, &data.train, &data.val, &cfg.oracle, jobs, &|i, arch, acc| {
        log(&format!("oracle {}/{n} {arch} acc={acc:.4}", i + 1))
    })?;
    write_file(&set_path, serde_json::to_string_pretty(&set)?)?;
    write_file(&prov_path, serde_json::to_string_pretty(&prov)?)?;
    let mut csv = String::from("arch,oracle_acc\n");
    for e in &set.entries {
        let _ = writeln!(csv, "{},{:?}", e.arch, e.oracle_accuracy.unwrap_or(f64::NAN));
    }
    write_file(&dir.join("oracle.csv"), csv)?;
    Ok(set)
}

/// Result of comparing parent and child logits right after a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InheritanceCheck {
    pub archs: usize,
    pub images: usize,
    pub max_abs_diff: f64,
    pub bit_identical: bool,
}

/// Eval-mode logits of `archs` on `images`, parent vs child.
pub fn compare_logits(
    parent: &mut SuperNet,
    child: &mut SuperNet,
    archs: &[Architecture],
    images: &Tensor,
) -> Result<InheritanceCheck> {
    let mut max_abs = 0.0f64;
    let mut identical = true;
    for arch in archs {
        let a = parent.logits(arch, images)?;
        let b = child.logits(arch, images)?;
        for (x, y) in a.data().iter().zip(b.data()) {
            identical &= x.to_bits() == y.to_bits();
            max_abs = max_abs.max((*x as f64 - *y as f64).abs());
        }
    }
    Ok(InheritanceCheck {
        archs: archs.len(),
        images: images.shape()[0],
        max_abs_diff: max_abs,
        bit_identical: identical,
    })
}

pub const INHERITANCE_ARCHS: usize = 20;
const INHERITANCE_IMAGES: usize = 32;
const INHERITANCE_SEED: u64 = 0x5EED_1A7E;

/// Completion record of one stage; its presence makes the stage resumable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub g: usize,
    pub config_hash: String,
    pub epochs: usize,
    pub final_checkpoint: String,
    /// Ranking results; absent when the stage ran without an eval set.
    pub ranking: Option<StageRanking>,
    pub inheritance: Option<InheritanceCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRanking {
    pub selected_epoch: usize,
    pub selected_checkpoint: String,
    pub pearson: f64,
    pub pearson_rank: f64,
    pub kendall_tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub stage: String,
    pub group: usize,
    pub selected_epoch: usize,
    pub pearson: f64,
    pub pearson_rank: f64,
    pub kendall_tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    /// Last few-shot stage minus one-shot; informational.
    pub delta_pearson: Option<f64>,
    pub delta_kendall: Option<f64>,
}

impl Summary {
    pub const CSV_HEADER: &'static str = "stage,group,selected_epoch,pearson,pearson_rank,kendall";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:?},{:?},{:?}",
                r.stage, r.group, r.selected_epoch, r.pearson, r.pearson_rank, r.kendall_tau
            );
        }
        out
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<9} {:>5} {:>6} {:>9} {:>9}\n",
            "stage", "group", "epoch", "pearson", "kendall"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<9} {:>5} {:>6} {:>9.5} {:>9.5}",
                r.stage, r.group, r.selected_epoch, r.pearson, r.kendall_tau
            );
        }
        if let (Some(p), Some(k)) = (self.delta_pearson, self.delta_kendall) {
            let _ = writeln!(out, "few-shot minus one-shot: pearson {p:+.5}, kendall {k:+.5}");
        }
        out
    }
}

pub fn stage_dir(out: &Path, g: usize) -> PathBuf {
    out.join(format!("g{g}"))
}

pub fn epoch_checkpoint(out: &Path, g: usize, epoch: usize) -> PathBuf {
    stage_dir(out, g).join(format!("epoch_{epoch:03}.json"))
}

fn relative(out: &Path, path: &Path) -> String {
    path.strip_prefix(out).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// How [`run_stages`] obtains its first super-net.
pub enum StageStart {
    /// Fresh initialization at g=1, reusing completed stages found on disk.
    Fresh { resume: bool },
    /// A trained super-net whose group count precedes the first scheduled stage, or equals it.
    From(Box<SuperNet>),
}

struct StageHooksImpl<'a> {
    cfg: &'a RunConfig,
    config_hash: String,
    out: &'a Path,
    data: &'a PreparedData,
    set: Option<&'a EvalSet>,
    log: &'a (dyn Fn(&str) + Sync),
    trace: EpochTrace,
    inheritance: Option<InheritanceCheck>,
    /// Once a stage is retrained, later stages on disk are stale.
    resuming: bool,
    start: Option<SuperNet>,
    records: Vec<StageRecord>,
    resumed: Vec<usize>,
}

impl StageHooksImpl<'_> {
    fn checkpoint_meta(&self, g: usize, epoch: usize, summary: Option<&EpochSummary>) -> serde_json::Value {
        serde_json::json!({
            "g": g,
            "epoch": epoch,
            "step": summary.map(|s| s.step),
            "config_hash": self.config_hash,
        })
    }
}

impl StageHooks for StageHooksImpl<'_> {
    fn resume(&mut self, g: usize) -> Result<Option<SuperNet>> {
        if let Some(net) = self.start.take() {
            return Ok(Some(net));
        }
        let path = stage_dir(self.out, g).join("stage.json");
        if !self.resuming || !path.exists() {
            self.resuming = false;
            return Ok(None);
        }
        let rec: StageRecord = read_json(&path)?;
        if rec.config_hash != self.config_hash {
            return Err(Error::State(format!(
                "{} was produced by a different configuration; use a fresh output directory",
                path.display()
            )));
        }
        let (net, _) = SuperNet::load(&self.out.join(&rec.final_checkpoint))?;
        (self.log)(&format!("stage g={g} resumed from {}", rec.final_checkpoint));
        self.records.push(rec);
        self.resumed.push(g);
        Ok(Some(net))
    }

    fn on_epoch(&mut self, g: usize, net: &mut SuperNet, summary: &EpochSummary) -> Result<Option<f64>> {
        let mut line = format!(
            "g={g} epoch {} lr={:.5} ce={:.4} kl={:.4}",
            summary.epoch, summary.lr, summary.loss_ce, summary.loss_kl_mean
        );
        let mut tau = None;
        if let Some(set) = self.set {
            let entry = epoch_hook(
                net,
                set,
                &self.data.val_subset,
                &self.data.recalib,
                self.cfg.eval.batch_size,
                summary.epoch,
            )?;
            let _ = write!(line, " tau={:.4} acc={:.4}", entry.kendall_tau, entry.mean_inherited_acc);
            tau = Some(entry.kendall_tau);
            self.trace.push(entry)?;
        }
        (self.log)(&line);
        let meta = self.checkpoint_meta(g, summary.epoch, Some(summary));
        net.save(&epoch_checkpoint(self.out, g, summary.epoch), meta)?;
        Ok(tau)
    }

    fn after_split(&mut self, g: usize, parent: &mut SuperNet, child: &mut SuperNet) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(INHERITANCE_SEED ^ g as u64);
        let archs: Vec<Architecture> = (0..INHERITANCE_ARCHS)
            .map(|_| sample_uniform(&self.cfg.space, &mut rng))
            .collect();
        let n = INHERITANCE_IMAGES.min(self.data.val.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, _) = self.data.val.batch(&idx);
        let check = compare_logits(parent, child, &archs, &images)?;
        (self.log)(&format!(
            "split to g={g}: {} archs, max |diff| {:e}, bit-identical {}",
            check.archs, check.max_abs_diff, check.bit_identical
        ));
        if !check.bit_identical {
            return Err(Error::State(format!(
                "split to g={g} changed logits by up to {:e}",
                check.max_abs_diff
            )));
        }
        let meta = self.checkpoint_meta(g, 0, None);
        child.save(&stage_dir(self.out, g).join("inherited.json"), meta)?;
        self.inheritance = Some(check);
        Ok(())
    }

    fn on_stage_end(&mut self, g: usize, net: &SuperNet, lr_plan: &LrPlan, summaries: &[EpochSummary]) -> Result<()> {
        debug_assert_eq!(net.plan().g, g);
        let dir = stage_dir(self.out, g);
        let mut metrics = format!("{}\n", EpochSummary::CSV_HEADER);
        for s in summaries {
            metrics.push_str(&s.csv_row());
            metrics.push('\n');
        }
        write_file(&dir.join("metrics.csv"), metrics)?;
        write_file(&dir.join("lr_plan.csv"), lr_plan.to_csv())?;
        let trace = std::mem::take(&mut self.trace);
        let ranking = match self.set {
            None => None,
            Some(set) => {
                write_file(&dir.join("trace.csv"), trace.to_csv())?;
                write_file(&dir.join("trace.json"), serde_json::to_string_pretty(&trace)?)?;
                let selected = select_checkpoint(&trace)?;
                let selected_path = epoch_checkpoint(self.out, g, selected);
                let selected_rel = relative(self.out, &selected_path);
                let (selected_net, _) = SuperNet::load(&selected_path)?;
                let report = rank_report(
                    set,
                    &selected_net,
                    &self.data.val,
                    &self.data.recalib,
                    self.cfg.eval.batch_size,
                    &selected_rel,
                )?;
                write_file(&dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
                write_file(&dir.join("report.csv"), report.to_csv())?;
                (self.log)(&format!(
                    "stage g={g}: selected epoch {selected}, pearson {:.4}, kendall {:.4}",
                    report.pearson, report.kendall_tau
                ));
                Some(StageRanking {
                    selected_epoch: selected,
                    selected_checkpoint: selected_rel,
                    pearson: report.pearson,
                    pearson_rank: report.pearson_rank,
                    kendall_tau: report.kendall_tau,
                })
            }
        };
        let rec = StageRecord {
            g,
            config_hash: self.config_hash.clone(),
            epochs: summaries.len(),
            final_checkpoint: relative(self.out, &epoch_checkpoint(self.out, g, summaries.len())),
            ranking,
            inheritance: self.inheritance.take(),
        };
        write_file(&dir.join("stage.json"), serde_json::to_string_pretty(&rec)?)?;
        self.records.push(rec);
        Ok(())
    }
}

pub fn summarize(records: &[StageRecord]) -> Summary {
    let rows: Vec<SummaryRow> = records
        .iter()
        .filter_map(|r| {
            r.ranking.as_ref().map(|k| SummaryRow {
                stage: if r.g == 1 { "one-shot" } else { "few-shot" }.into(),
                group: r.g,
                selected_epoch: k.selected_epoch,
                pearson: k.pearson,
                pearson_rank: k.pearson_rank,
                kendall_tau: k.kendall_tau,
            })
        })
        .collect();
    let (delta_pearson, delta_kendall) = match (rows.first(), rows.last()) {
        (Some(a), Some(b)) if rows.len() > 1 && a.group == 1 => {
            (Some(b.pearson - a.pearson), Some(b.kendall_tau - a.kendall_tau))
        }
        _ => (None, None),
    };
    Summary {
        rows,
        delta_pearson,
        delta_kendall,
    }
}

#[derive(Clone, Debug)]
pub struct StagesOutcome {
    pub records: Vec<StageRecord>,
    /// Group counts whose stage was loaded from disk instead of trained.
    pub resumed: Vec<usize>,
    pub net: Option<SuperNet>,
}

/// Trains the stages in `schedule`, writing per-epoch checkpoints under `out/g{g}/`.
///
/// With an eval set, every epoch is ranked against the oracle and each stage ends with a
/// report on its selected checkpoint.
pub fn run_stages(
    cfg: &RunConfig,
    data: &PreparedData,
    out: &Path,
    set: Option<&EvalSet>,
    schedule: &[usize],
    start: StageStart,
    log: &(dyn Fn(&str) + Sync),
) -> Result<StagesOutcome> {
    let (resuming, start, schedule) = match start {
        StageStart::Fresh { resume } => (resume, None, schedule.to_vec()),
        StageStart::From(net) => {
            let g0 = net.plan().g;
            if schedule.first().is_some_and(|&g| g != g0 && g != g0 + 1) {
                return Err(Error::Usage(format!(
                    "a g={g0} super-net cannot start a schedule at g={}",
                    schedule[0]
                )));
            }
            // The starting net stands in for its own stage, which is not retrained.
            let mut full = vec![g0];
            full.extend(schedule.iter().copied().filter(|&g| g > g0));
            (false, Some(*net), full)
        }
    };
    let mut hooks = StageHooksImpl {
        cfg,
        config_hash: cfg.hash(),
        out,
        data,
        set,
        log,
        trace: EpochTrace::default(),
        inheritance: None,
        resuming,
        start,
        records: Vec::new(),
        resumed: Vec::new(),
    };
    let mut last = None;
    progressive_run(
        &cfg.space,
        &data.train,
        &cfg.one_shot,
        &cfg.few_shot,
        &schedule,
        &cfg.lr_rule,
        cfg.init_seed,
        &mut StageCapture {
            inner: &mut hooks,
            last: &mut last,
        },
    )?;
    Ok(StagesOutcome {
        records: hooks.records,
        resumed: hooks.resumed,
        net: last,
    })
}

/// Keeps a copy of the most recent stage's super-net.
struct StageCapture<'a, 'b> {
    inner: &'a mut StageHooksImpl<'b>,
    last: &'a mut Option<SuperNet>,
}

impl StageHooks for StageCapture<'_, '_> {
    fn resume(&mut self, g: usize) -> Result<Option<SuperNet>> {
        let net = self.inner.resume(g)?;
        if let Some(n) = &net {
            *self.last = Some(n.clone());
        }
        Ok(net)
    }

    fn on_epoch(&mut self, g: usize, net: &mut SuperNet, summary: &EpochSummary) -> Result<Option<f64>> {
        self.inner.on_epoch(g, net, summary)
    }

    fn after_split(&mut self, g: usize, parent: &mut SuperNet, child: &mut SuperNet) -> Result<()> {
        self.inner.after_split(g, parent, child)
    }

    fn on_stage_end(&mut self, g: usize, net: &SuperNet, lr_plan: &LrPlan, summaries: &[EpochSummary]) -> Result<()> {
        *self.last = Some(net.clone());
        self.inner.on_stage_end(g, net, lr_plan, summaries)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub summary: Summary,
    pub records: Vec<StageRecord>,
    pub resumed: Vec<usize>,
    pub input_hashes: Vec<(String, String)>,
}

/// Checks `out` for a run with another configuration, then records this one.
pub fn claim_out_dir(cfg: &RunConfig, out: &Path) -> Result<()> {
    let config_path = out.join("config.json");
    if config_path.exists() {
        let old: RunConfig = read_json(&config_path)?;
        if old.hash() != cfg.hash() {
            return Err(Error::State(format!(
                "{} holds a run with a different configuration",
                out.display()
            )));
        }
    }
    write_file(&config_path, serde_json::to_string_pretty(cfg)?)
}

pub fn input_hashes(cfg: &RunConfig, data: &PreparedData) -> Vec<(String, String)> {
    vec![
        ("config".into(), cfg.hash()),
        ("data".into(), data.full.content_hash()),
        ("space".into(), cfg.space.content_hash()),
    ]
}

/// Oracles, then one-shot and few-shot stages with per-epoch checkpoints, traces and reports.
///
/// Output files other than the run manifest contain no timestamps, so two runs of the same
/// configuration produce identical bytes. Completed stages found in `out` are resumed.
pub fn run_progressive(
    cfg: &RunConfig,
    out: &Path,
    jobs: usize,
    log: &(dyn Fn(&str) + Sync),
) -> Result<RunOutcome> {
    cfg.validate()?;
    claim_out_dir(cfg, out)?;
    let data = PreparedData::new(cfg)?;
    log(&format!(
        "data: {} train, {} val, {} in the per-epoch subset",
        data.train.len(),
        data.val.len(),
        data.val_subset.len()
    ));
    let set = ensure_oracles(cfg, &data, out, jobs, log)?;
    let staged = run_stages(
        cfg,
        &data,
        out,
        Some(&set),
        &cfg.schedule,
        StageStart::Fresh { resume: true },
        log,
    )?;
    let summary = summarize(&staged.records);
    write_file(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    write_file(&out.join("summary.csv"), summary.to_csv())?;
    Ok(RunOutcome {
        summary,
        records: staged.records,
        resumed: staged.resumed,
        input_hashes: input_hashes(cfg, &data),
    })
}

/// Trains two one-shot super-nets that differ only in their sampler and ranks both.
pub fn sampling_ablation(
    cfg: &RunConfig,
    data: &PreparedData,
    set: &EvalSet,
) -> Result<Vec<(SamplerKind, RankReport)>> {
    [SamplerKind::Uniform, SamplerKind::Fair]
        .into_iter()
        .map(|kind| {
            let tc = TrainConfig {
                sampler: kind,
                ..cfg.one_shot.clone()
            };
            let mut net = SuperNet::build(&cfg.space, &crate::split::GroupPlan::initial(&cfg.space), cfg.init_seed)?;
            net.dropout_p = tc.dropout_p;
            train_one_shot(&mut net, &data.train, &tc, &mut |_, _| Ok(None))?;
            let report = rank_report(
                set,
                &net,
                &data.val,
                &data.recalib,
                cfg.eval.batch_size,
                &format!("{kind:?}").to_lowercase(),
            )?;
            Ok((kind, report))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Provenance record written next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: serde_json::Value,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub deterministic: bool,
    pub jobs: usize,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<ArtifactEntry>,
    /// Free-form facts about the run, such as resumed stages.
    #[serde(default)]
    pub notes: serde_json::Value,
}

pub const MANIFEST_NAME: &str = "run_manifest.json";

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Every file under `dir` except the manifest itself, sorted by path, with digests.
pub fn collect_artifacts(dir: &Path) -> Result<Vec<ArtifactEntry>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<ArtifactEntry>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.file_name().is_some_and(|n| n != MANIFEST_NAME) {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                out.push(ArtifactEntry {
                    path: relative(root, &path),
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                });
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    if dir.exists() {
        walk(dir, dir, &mut out)?;
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

impl RunManifest {
    /// Lists the artifacts in `dir` and writes the manifest there.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.outputs = collect_artifacts(dir)?;
        self.finished_unix = unix_now();
        let path = dir.join(MANIFEST_NAME);
        write_file(&path, serde_json::to_string_pretty(&self)?)?;
        Ok(path)
    }
}
