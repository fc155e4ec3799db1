//! Ranking-correlation evaluation: Pearson and Kendall τ-b, stand-alone oracle training,
//! inherited-weight accuracy, reports, per-epoch traces and checkpoint selection.

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::space::{Architecture, SearchSpace};
use crate::supernet::{SubNet, SuperNet};
use crate::tensor::{BnMode, Tape, Tensor};
use crate::train::{lr_at, Sgd, TrainConfig};

/// Sample Pearson correlation, two-pass in f64.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Input(format!("pearson: lengths {} and {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Degenerate("pearson needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("pearson: a vector has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pair counts behind τ-b: concordant minus discordant, and pairs untied in each vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairCounts {
    pub concordant_minus_discordant: i64,
    /// Pairs not tied in `xs` (C + D + ties only in y).
    pub untied_x: i64,
    /// Pairs not tied in `ys` (C + D + ties only in x).
    pub untied_y: i64,
}

impl PairCounts {
    /// τ-b from the counts; errors when either vector is entirely tied.
    pub fn tau_b(&self) -> Result<f64> {
        if self.untied_x == 0 || self.untied_y == 0 {
            return Err(Error::Degenerate("kendall_tau: a vector is entirely tied".into()));
        }
        Ok(self.concordant_minus_discordant as f64 / ((self.untied_x as f64) * (self.untied_y as f64)).sqrt())
    }
}

fn tied_pairs(sorted_runs: impl Iterator<Item = usize>) -> i64 {
    sorted_runs.map(|r| (r * (r.saturating_sub(1)) / 2) as i64).sum()
}

fn run_lengths<T: PartialEq>(v: &[T]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let mut j = i + 1;
        while j < v.len() && v[j] == v[i] {
            j += 1;
        }
        out.push(j - i);
        i = j;
    }
    out
}

/// Knight's O(n log n) pair counting.
pub fn kendall_counts(xs: &[f64], ys: &[f64]) -> Result<PairCounts> {
    if xs.len() != ys.len() {
        return Err(Error::Input(format!("kendall_tau: lengths {} and {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Degenerate("kendall_tau needs at least two points".into()));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::Input("kendall_tau: NaN input".into()));
    }
    let n = xs.len();
    let total = (n * (n - 1) / 2) as i64;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(ys[a].total_cmp(&ys[b])));
    let sx: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
    let pairs: Vec<(f64, f64)> = idx.iter().map(|&i| (xs[i], ys[i])).collect();
    let tx = tied_pairs(run_lengths(&sx).into_iter());
    let txy = tied_pairs(run_lengths(&pairs).into_iter());
    // Sorting by y with a stable merge sort counts discordant pairs as swaps.
    let mut y: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
    let swaps = merge_count(&mut y);
    let ty = tied_pairs(run_lengths(&y).into_iter());
    // total = C + D + (ties in x only) + (ties in y only) + (ties in both)
    let d = swaps;
    let c = total - tx - ty + txy - d;
    Ok(PairCounts {
        concordant_minus_discordant: c - d,
        untied_x: total - tx,
        untied_y: total - ty,
    })
}

/// Stable merge sort; returns the number of strict inversions.
fn merge_count(v: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            inv += (mid - i) as i64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    inv
}

/// Kendall τ-b.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    kendall_counts(xs, ys)?.tau_b()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub arch: String,
    pub oracle_accuracy: Option<f64>,
}

/// Architectures to rank, with stand-alone accuracies once the oracle has run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub entries: Vec<EvalEntry>,
    /// Hash of the oracle configuration that produced the accuracies.
    pub provenance: Option<String>,
}

impl EvalSet {
    /// `n` distinct architectures drawn uniformly with `seed`, sorted by encoding.
    pub fn sample(space: &SearchSpace, n: usize, seed: u64) -> Result<Self> {
        if let Some(size) = space.space_size() {
            if (n as u128) > size {
                return Err(Error::Config(format!("cannot draw {n} distinct archs from {size}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::BTreeSet::new();
        let mut guard = 0usize;
        while seen.len() < n {
            seen.insert(crate::space::sample_uniform(space, &mut rng).encode(space));
            guard += 1;
            if guard > 1000 * n.max(1) {
                return Err(Error::Config("could not draw enough distinct architectures".into()));
            }
        }
        Ok(EvalSet {
            entries: seen
                .into_iter()
                .map(|arch| EvalEntry {
                    arch,
                    oracle_accuracy: None,
                })
                .collect(),
            provenance: None,
        })
    }

    pub fn archs(&self, space: &SearchSpace) -> Result<Vec<Architecture>> {
        self.entries.iter().map(|e| Architecture::decode(&e.arch, space)).collect()
    }

    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            Architecture::decode(&e.arch, space)?;
            if !seen.insert(&e.arch) {
                return Err(Error::Input(format!("duplicate architecture {}", e.arch)));
            }
            if let Some(a) = e.oracle_accuracy {
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::Input(format!("oracle accuracy {a} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    pub fn oracle_accuracies(&self) -> Result<Vec<f64>> {
        self.entries
            .iter()
            .map(|e| {
                e.oracle_accuracy
                    .ok_or_else(|| Error::State(format!("no oracle accuracy for {}", e.arch)))
            })
            .collect()
    }
}

/// Stand-alone training budget for oracle accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub steps_per_epoch: Option<usize>,
    pub augment: AugmentConfig,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            epochs: 15,
            batch_size: 64,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-5,
            seed: 0,
            steps_per_epoch: None,
            augment: AugmentConfig::default(),
        }
    }
}

impl OracleConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Seed of the stand-alone network for `arch`.
pub fn oracle_seed(arch: &Architecture, seed: u64) -> u64 {
    arch.digest() ^ seed.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Top-1 accuracy of `logits` against `labels`; ties go to the lowest class index.
pub fn top1_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == l
        })
        .count()
}

/// Trains `arch` from scratch with plain cross-entropy SGD and returns its accuracy on `eval`.
pub fn oracle_train(
    space: &SearchSpace,
    arch: &Architecture,
    train: &Dataset,
    eval: &Dataset,
    cfg: &OracleConfig,
) -> Result<f64> {
    let seed = oracle_seed(arch, cfg.seed);
    let mut net = SubNet::fresh(space, arch, seed)?;
    let tcfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        base_lr: cfg.base_lr,
        warmup_epochs: 0,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        dropout_p: 0.0,
        num_random_subnets: 0,
        seed,
        steps_per_epoch: cfg.steps_per_epoch,
        ..Default::default()
    };
    tcfg.validate()?;
    let spe = crate::train::steps_per_epoch(&tcfg, train.len());
    let total = spe * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(cfg.momentum);
    for _ in 0..cfg.epochs {
        let batches = train.shuffled_batches(cfg.batch_size, true, &mut rng);
        for idx in batches.iter().cycle().take(spe) {
            let (x, y) = train.batch(idx);
            let x = augment(&x, &cfg.augment, &mut rng);
            net.store_mut().zero_grad();
            let mut tape = Tape::new();
            let xv = tape.input(x);
            let logits = net.forward(&mut tape, xv, BnMode::Train, None)?;
            let loss = tape.cross_entropy(logits, &y)?;
            tape.backward(loss, net.store_mut())?;
            if cfg.weight_decay != 0.0 {
                for p in net.store_mut().params_mut() {
                    if p.kind == crate::tensor::ParamKind::Weight {
                        for (g, w) in p.grad.iter_mut().zip(p.value.data()) {
                            *g += cfg.weight_decay * w;
                        }
                    }
                }
            }
            let lr = lr_at(opt.step as usize, total, &tcfg, false);
            opt.update(net.store_mut(), |_| lr);
        }
    }
    subnet_accuracy(&mut net, eval, cfg.batch_size)
}

fn subnet_accuracy(net: &mut SubNet, data: &Dataset, batch: usize) -> Result<f64> {
    let mut correct = 0;
    for (x, y) in data.sequential_batches(batch) {
        correct += top1_correct(&net.logits(&x)?, &y);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Fills every missing oracle accuracy, fanning out over up to `jobs` threads.
///
/// Results depend only on the architecture and config, never on scheduling.
pub fn run_oracles(
    space: &SearchSpace,
    set: &mut EvalSet,
    train: &Dataset,
    eval: &Dataset,
    cfg: &OracleConfig,
    jobs: usize,
    progress: &(dyn Fn(usize, &str, f64) + Sync),
) -> Result<()> {
    let todo: Vec<(usize, Architecture)> = set
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.oracle_accuracy.is_none())
        .map(|(i, e)| Architecture::decode(&e.arch, space).map(|a| (i, a)))
        .collect::<Result<_>>()?;
    let run = |(i, arch): &(usize, Architecture)| -> Result<(usize, f64)> {
        let acc = oracle_train(space, arch, train, eval, cfg)?;
        progress(*i, &arch.encode(space), acc);
        Ok((*i, acc))
    };
    let results: Vec<Result<(usize, f64)>> = if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| todo.par_iter().map(run).collect())
    } else {
        todo.iter().map(run).collect()
    };
    for r in results {
        let (i, acc) = r?;
        set.entries[i].oracle_accuracy = Some(acc);
    }
    set.provenance = Some(cfg.hash());
    Ok(())
}

/// Recalibration stream: `batches` batches drawn from `data` with a fixed seed.
pub fn recalibration_batches(data: &Dataset, batches: usize, batch_size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.shuffled_batches(batch_size, false, &mut rng as &mut dyn RngCore)
        .into_iter()
        .take(batches)
        .map(|idx| data.batch(&idx).0)
        .collect()
}

/// Per-architecture accuracy with inherited weights: recalibrate BN, extract, evaluate.
///
/// `net` is left untouched; each architecture is evaluated on its own copy.
pub fn inherited_eval(
    net: &SuperNet,
    archs: &[Architecture],
    eval: &Dataset,
    recalib: &[Tensor],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let space = net.space();
    if eval.num_classes != space.num_classes {
        return Err(Error::Config(format!(
            "data has {} classes, space expects {}",
            eval.num_classes, space.num_classes
        )));
    }
    let batches = eval.sequential_batches(batch_size);
    archs
        .iter()
        .map(|arch| {
            let mut scratch = net.clone();
            scratch.bn_recalibrate(arch, recalib)?;
            let mut sub = scratch.extract_subnet(arch)?;
            let mut correct = 0;
            for (x, y) in &batches {
                correct += top1_correct(&sub.logits(x)?, y);
            }
            Ok(correct as f64 / eval.len().max(1) as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPair {
    pub arch: String,
    pub oracle: f64,
    pub inherited: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub pairs: Vec<RankPair>,
    pub pearson: f64,
    /// Pearson on ranks (average ranks for ties).
    pub pearson_rank: f64,
    pub kendall_tau: f64,
    pub n: usize,
    pub checkpoint: String,
    pub recalib_batches: usize,
}

/// Average ranks, 1-based, ties sharing their mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && xs[idx[j]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            out[k] = r;
        }
        i = j;
    }
    out
}

impl RankReport {
    pub fn from_pairs(pairs: Vec<RankPair>, checkpoint: String, recalib_batches: usize) -> Result<Self> {
        let o: Vec<f64> = pairs.iter().map(|p| p.oracle).collect();
        let h: Vec<f64> = pairs.iter().map(|p| p.inherited).collect();
        Ok(RankReport {
            pearson: pearson(&o, &h)?,
            pearson_rank: pearson(&ranks(&o), &ranks(&h))?,
            kendall_tau: kendall_tau(&o, &h)?,
            n: pairs.len(),
            pairs,
            checkpoint,
            recalib_batches,
        })
    }

    /// Recomputes the statistics from the stored pairs.
    pub fn recompute(&self) -> Result<RankReport> {
        RankReport::from_pairs(self.pairs.clone(), self.checkpoint.clone(), self.recalib_batches)
    }

    pub const CSV_HEADER: &'static str = "arch,oracle_acc,inherited_acc";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for p in &self.pairs {
            let _ = writeln!(out, "{},{:?},{:?}", p.arch, p.oracle, p.inherited);
        }
        out
    }

    /// Parses [`RankReport::to_csv`] output back into pairs.
    pub fn pairs_from_csv(text: &str) -> Result<Vec<RankPair>> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::Parse {
                field: "header".into(),
                msg: format!("expected {}", Self::CSV_HEADER),
            });
        }
        lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let num = |s: &str, field: &str| {
                    s.parse::<f64>().map_err(|e| Error::Parse {
                        field: field.into(),
                        msg: e.to_string(),
                    })
                };
                if f.len() != 3 {
                    return Err(Error::Parse {
                        field: "row".into(),
                        msg: format!("expected 3 fields in {l:?}"),
                    });
                }
                Ok(RankPair {
                    arch: f[0].to_string(),
                    oracle: num(f[1], "oracle_acc")?,
                    inherited: num(f[2], "inherited_acc")?,
                })
            })
            .collect()
    }
}

/// Settings for inherited-weight evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub num_archs: usize,
    pub arch_seed: u64,
    /// Fraction of the validation split used by the per-epoch hook.
    pub subset_fraction: f64,
    pub subset_seed: u64,
    pub recalib_batches: usize,
    pub recalib_batch_size: usize,
    pub recalib_seed: u64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            num_archs: 30,
            arch_seed: 0,
            subset_fraction: 1.0 / 20.0,
            subset_seed: 0,
            recalib_batches: 4,
            recalib_batch_size: 64,
            recalib_seed: 0,
            batch_size: 100,
        }
    }
}

/// Pairs oracle and inherited accuracies for every architecture in `set`.
pub fn rank_report(
    set: &EvalSet,
    net: &SuperNet,
    eval: &Dataset,
    recalib: &[Tensor],
    batch_size: usize,
    checkpoint: &str,
) -> Result<RankReport> {
    let archs = set.archs(net.space())?;
    let oracle = set.oracle_accuracies()?;
    let inherited = inherited_eval(net, &archs, eval, recalib, batch_size)?;
    let pairs = set
        .entries
        .iter()
        .zip(oracle.iter().zip(&inherited))
        .map(|(e, (&o, &h))| RankPair {
            arch: e.arch.clone(),
            oracle: o,
            inherited: h,
        })
        .collect();
    RankReport::from_pairs(pairs, checkpoint.to_string(), recalib.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub epoch: usize,
    pub kendall_tau: f64,
    pub mean_inherited_acc: f64,
}

/// Kendall τ of inherited vs oracle accuracy after every epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub entries: Vec<TraceEntry>,
}

impl EpochTrace {
    pub fn push(&mut self, entry: TraceEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.epoch <= last.epoch {
                return Err(Error::State(format!(
                    "trace epoch {} does not follow {}",
                    entry.epoch, last.epoch
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,kendall\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{:?}", e.epoch, e.kendall_tau);
        }
        out
    }
}

/// Evaluates a super-net snapshot for the trace: τ and mean inherited accuracy.
pub fn epoch_hook(
    net: &SuperNet,
    set: &EvalSet,
    subset: &Dataset,
    recalib: &[Tensor],
    batch_size: usize,
    epoch: usize,
) -> Result<TraceEntry> {
    let archs = set.archs(net.space())?;
    let oracle = set.oracle_accuracies()?;
    let inherited = inherited_eval(net, &archs, subset, recalib, batch_size)?;
    let tau = match kendall_tau(&oracle, &inherited) {
        Ok(t) => t,
        // An untrained net can score every arch identically; that ranks nothing.
        Err(Error::Degenerate(_)) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(TraceEntry {
        epoch,
        kendall_tau: tau,
        mean_inherited_acc: inherited.iter().sum::<f64>() / inherited.len().max(1) as f64,
    })
}

/// Epoch with the largest τ; the latest wins ties.
pub fn select_checkpoint(trace: &EpochTrace) -> Result<usize> {
    let mut best: Option<&TraceEntry> = None;
    for e in &trace.entries {
        if best.is_none_or(|b| e.kendall_tau >= b.kendall_tau) {
            best = Some(e);
        }
    }
    best.map(|e| e.epoch)
        .ok_or_else(|| Error::Input("select_checkpoint on an empty trace".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_landmarks() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-15);
        // direct: mean 2.5 both; sxy = 2.25+0.25+(-0.25)+... computed: 4, sxx = syy = 5
        let r = pearson(&xs, &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert!(matches!(pearson(&xs, &[1.0; 4]), Err(Error::Degenerate(_))));
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn kendall_landmarks() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(kendall_tau(&xs, &xs).unwrap(), 1.0);
        let rev: Vec<f64> = xs.iter().rev().copied().collect();
        assert_eq!(kendall_tau(&xs, &rev).unwrap(), -1.0);
        assert!(matches!(kendall_tau(&xs, &[2.0; 5]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn selection_prefers_later_ties() {
        let trace = EpochTrace {
            entries: [0.2, 0.5, 0.5, 0.4]
                .iter()
                .enumerate()
                .map(|(i, &t)| TraceEntry {
                    epoch: i,
                    kendall_tau: t,
                    mean_inherited_acc: 0.0,
                })
                .collect(),
        };
        assert_eq!(select_checkpoint(&trace).unwrap(), 2);
        assert!(select_checkpoint(&EpochTrace::default()).is_err());
    }

    #[test]
    fn average_ranks() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn csv_round_trip() {
        let pairs = vec![
            RankPair {
                arch: "d1:o4:m4;d1:o8:m8".into(),
                oracle: 0.1 + 0.2,
                inherited: 1.0 / 3.0,
            },
            RankPair {
                arch: "d2:o8:m8-8;d2:o16:m16-16".into(),
                oracle: 0.5,
                inherited: 0.25,
            },
        ];
        let r = RankReport::from_pairs(pairs.clone(), "x".into(), 1).unwrap();
        assert_eq!(RankReport::pairs_from_csv(&r.to_csv()).unwrap(), pairs);
    }
}
