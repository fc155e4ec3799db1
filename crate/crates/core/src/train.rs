//! Sandwich-rule super-net training with in-place distillation, SGD with momentum,
//! warmup-cosine learning rates, per-group multipliers and the progressive driver.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::space::{Architecture, SamplerKind, Sampler, SearchSpace};
use crate::split::{inheritance_map, lr_multipliers, GroupPlan, LrModule, LrPlan, LrRule};
use crate::supernet::{Owner, SuperNet};
use crate::tensor::{BnMode, ParamId, ParamKind, ParamStore, Tape, Tensor};

const STREAM_DATA: u64 = 1;
const STREAM_SAMPLER: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub dropout_p: f32,
    pub num_random_subnets: usize,
    pub sampler: SamplerKind,
    pub seed: u64,
    /// Caps the number of steps per epoch; `None` walks the whole training split.
    pub steps_per_epoch: Option<usize>,
    /// Global gradient-norm clip; off unless set.
    pub grad_clip: Option<f32>,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            base_lr: 0.1,
            warmup_epochs: 5,
            momentum: 0.9,
            weight_decay: 1e-5,
            dropout_p: 0.2,
            num_random_subnets: 2,
            sampler: SamplerKind::Uniform,
            seed: 0,
            steps_per_epoch: None,
            grad_clip: None,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Few-shot stage defaults: 20 epochs and no warmup.
    pub fn few_shot_default() -> Self {
        TrainConfig {
            epochs: 20,
            warmup_epochs: 0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return bad("base_lr must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be below epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be at least 1");
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (total_steps as f64 * self.warmup_epochs as f64 / self.epochs as f64).round() as usize
    }
}

/// Learning rate for update number `step` (0-based) of `total_steps`.
///
/// With warmup: linear from 0 to `base_lr`, then cosine to 0. Without: cosine only.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig, warmup: bool) -> f64 {
    let w = if warmup { cfg.warmup_steps(total_steps) } else { 0 };
    if step < w {
        return cfg.base_lr * step as f64 / w as f64;
    }
    if total_steps <= w {
        return 0.0;
    }
    let t = (step.min(total_steps) - w) as f64 / (total_steps - w) as f64;
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// SGD with heavy-ball momentum: `v ← m·v + g; w ← w − lr·v`.
///
/// Only parameters touched since the last `zero_grad` are updated, so weights and
/// momentum of groups that were never routed stay exactly as they were.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f32,
    buffers: Vec<Option<Vec<f32>>>,
    pub step: u64,
}

impl Sgd {
    pub fn new(momentum: f32) -> Self {
        Sgd {
            momentum,
            buffers: Vec::new(),
            step: 0,
        }
    }

    pub fn buffer(&self, id: ParamId) -> Option<&[f32]> {
        self.buffers.get(id.index()).and_then(|b| b.as_deref())
    }

    /// Applies one update; returns the learning rate used for each updated parameter.
    pub fn update(&mut self, store: &mut ParamStore, lr_of: impl Fn(ParamId) -> f64) -> Vec<(ParamId, f64)> {
        if self.buffers.len() < store.len() {
            self.buffers.resize(store.len(), None);
        }
        let mut applied = Vec::new();
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !p.touched {
                continue;
            }
            let id = ParamId(i);
            let lr = lr_of(id);
            let v = self.buffers[i].get_or_insert_with(|| vec![0.0; p.grad.len()]);
            let lr32 = lr as f32;
            for ((w, g), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *v = self.momentum * *v + g;
                *w -= lr32 * *v;
            }
            applied.push((id, lr));
        }
        self.step += 1;
        applied
    }
}

/// Scales all touched gradients so their global L2 norm is at most `max_norm`.
fn clip_grad_norm(store: &mut ParamStore, max_norm: f32) {
    let sq: f64 = store
        .params()
        .iter()
        .filter(|p| p.touched)
        .flat_map(|p| p.grad.iter())
        .map(|&g| g as f64 * g as f64)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm as f64 {
        let s = (max_norm as f64 / norm) as f32;
        for p in store.params_mut().iter_mut().filter(|p| p.touched) {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PassKind {
    CrossEntropy,
    Distill,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PassRecord {
    pub kind: PassKind,
    pub arch: Architecture,
    pub loss: f64,
    pub dropout_active: bool,
    pub weight_decay_applied: bool,
    /// Parameter slices the pass read, by id and prefix shape.
    pub regions: Vec<(ParamId, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub passes: Vec<PassRecord>,
    pub optimizer_updates: usize,
    /// Effective learning rate applied to each updated parameter.
    pub applied_lr: Vec<(ParamId, f64)>,
}

impl StepReport {
    pub fn loss_ce(&self) -> f64 {
        self.passes
            .iter()
            .filter(|p| p.kind == PassKind::CrossEntropy)
            .map(|p| p.loss)
            .sum()
    }

    pub fn loss_kl_mean(&self) -> f64 {
        let kl: Vec<f64> = self
            .passes
            .iter()
            .filter(|p| p.kind == PassKind::Distill)
            .map(|p| p.loss)
            .collect();
        if kl.is_empty() {
            0.0
        } else {
            kl.iter().sum::<f64>() / kl.len() as f64
        }
    }
}

pub enum PassTarget<'a> {
    Labels(&'a [usize]),
    Teacher(&'a Tensor),
}

/// Output of one forward/backward pass.
pub struct PassOutput {
    pub loss: f64,
    pub logits: Tensor,
    pub regions: Vec<(ParamId, Vec<usize>)>,
}

/// Forward `arch` in training mode and accumulate the loss gradient into the store.
pub fn run_pass(
    net: &mut SuperNet,
    images: &Tensor,
    arch: &Architecture,
    target: PassTarget<'_>,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<PassOutput> {
    let mut tape = Tape::new();
    let x = tape.input(images.clone());
    let logits = net.forward(&mut tape, arch, x, BnMode::Train, dropout_rng)?;
    let loss = match target {
        PassTarget::Labels(l) => tape.cross_entropy(logits, l)?,
        PassTarget::Teacher(t) => tape.kl_distill(logits, t)?,
    };
    tape.backward(loss, net.store_mut())?;
    Ok(PassOutput {
        loss: tape.value(loss).data()[0] as f64,
        logits: tape.value(logits).clone(),
        regions: tape.param_regions(),
    })
}

/// Dropout mask stream for update `step`; a pure function of the seed and step.
pub fn dropout_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.set_stream(STREAM_DROPOUT);
    r
}

/// Learning-rate multiplier of the group owning parameter `id`.
pub fn param_multiplier(net: &SuperNet, lr_plan: &LrPlan, id: ParamId) -> f64 {
    match net.owner(id) {
        Owner::Shared => 1.0,
        Owner::Stage { stage, group } => lr_plan.multiplier(LrModule::Stage, stage, group) as f64,
        Owner::Head { stage, group } => lr_plan.multiplier(LrModule::Classifier, stage, group) as f64,
    }
}

/// One sandwich step: largest with labels, sampled and smallest distilled from the
/// largest's logits, then a single optimizer update from the accumulated gradients.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    net: &mut SuperNet,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    sampler: &mut Sampler,
    sampler_rng: &mut dyn RngCore,
    opt: &mut Sgd,
    lr: f64,
    lr_plan: &LrPlan,
) -> Result<StepReport> {
    if labels.is_empty() {
        return Err(Error::Input("train_step needs a non-empty batch".into()));
    }
    let space = net.space().clone();
    net.dropout_p = cfg.dropout_p;
    net.store_mut().zero_grad();
    let mut passes = Vec::with_capacity(cfg.num_random_subnets + 2);

    let largest = space.largest_arch();
    let mut drng = dropout_rng(cfg.seed, opt.step);
    let out = run_pass(net, images, &largest, PassTarget::Labels(labels), Some(&mut drng))?;
    let decay = cfg.weight_decay != 0.0;
    if decay {
        for (id, region) in &out.regions {
            if net.store().param(*id).kind == ParamKind::Weight {
                net.store_mut().add_weight_decay(*id, region, cfg.weight_decay);
            }
        }
    }
    let teacher = out.logits;
    passes.push(PassRecord {
        kind: PassKind::CrossEntropy,
        arch: largest,
        loss: out.loss,
        dropout_active: cfg.dropout_p > 0.0,
        weight_decay_applied: decay,
        regions: out.regions,
    });

    let mut students: Vec<Architecture> = (0..cfg.num_random_subnets)
        .map(|_| sampler.sample(&space, sampler_rng))
        .collect();
    students.push(space.smallest_arch());
    for arch in students {
        let out = run_pass(net, images, &arch, PassTarget::Teacher(&teacher), None)?;
        passes.push(PassRecord {
            kind: PassKind::Distill,
            arch,
            loss: out.loss,
            dropout_active: false,
            weight_decay_applied: false,
            regions: out.regions,
        });
    }

    if let Some(c) = cfg.grad_clip {
        clip_grad_norm(net.store_mut(), c);
    }
    let step = opt.step;
    let applied_lr = {
        let net_ref = &*net;
        let mults: Vec<f64> = (0..net_ref.store().len())
            .map(|i| param_multiplier(net_ref, lr_plan, ParamId(i)))
            .collect();
        opt.update(net.store_mut(), |id| lr * mults[id.index()])
    };
    Ok(StepReport {
        step,
        lr,
        passes,
        optimizer_updates: 1,
        applied_lr,
    })
}

/// End-of-epoch record; `kendall_proxy` is filled by the epoch hook when it evaluates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    /// 1-based.
    pub epoch: usize,
    /// Updates completed so far in this stage.
    pub step: usize,
    /// Learning rate that the next update would use.
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_kl_mean: f64,
    pub kendall_proxy: Option<f64>,
}

impl EpochSummary {
    pub const CSV_HEADER: &'static str = "epoch,step,lr,loss_ce,loss_kl_mean,kendall_proxy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:.6},{:.6},{}",
            self.epoch,
            self.step,
            self.lr,
            self.loss_ce,
            self.loss_kl_mean,
            self.kendall_proxy.map(|k| format!("{k:.6}")).unwrap_or_default()
        )
    }
}

/// Called after every epoch; may return a Kendall proxy to record.
pub type EpochHook<'a> = dyn FnMut(&mut SuperNet, &EpochSummary) -> Result<Option<f64>> + 'a;

/// Number of updates per epoch for a training split of `n` items.
pub fn steps_per_epoch(cfg: &TrainConfig, n: usize) -> usize {
    let full = (n / cfg.batch_size).max(1);
    cfg.steps_per_epoch.map_or(full, |c| c.min(full))
}

/// Trains for `cfg.epochs` on `train`, invoking `hook` after each epoch.
pub fn train_stage(
    net: &mut SuperNet,
    train: &Dataset,
    cfg: &TrainConfig,
    warmup: bool,
    lr_plan: &LrPlan,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<EpochSummary>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty training split".into()));
    }
    cfg.augment.validate(train.resolution().0)?;
    let spe = steps_per_epoch(cfg, train.len());
    let total = spe * cfg.epochs;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(STREAM_DATA);
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sampler_rng.set_stream(STREAM_SAMPLER);
    let mut sampler = Sampler::new(cfg.sampler, net.space());
    let mut opt = Sgd::new(cfg.momentum);
    let mut summaries = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let batches = train.shuffled_batches(cfg.batch_size, true, &mut data_rng);
        let (mut ce, mut kl) = (0.0, 0.0);
        for idx in batches.iter().cycle().take(spe) {
            let (images, labels) = train.batch(idx);
            let images = augment(&images, &cfg.augment, &mut data_rng);
            let lr = lr_at(opt.step as usize, total, cfg, warmup);
            let rep = train_step(
                net,
                &images,
                &labels,
                cfg,
                &mut sampler,
                &mut sampler_rng,
                &mut opt,
                lr,
                lr_plan,
            )?;
            ce += rep.loss_ce();
            kl += rep.loss_kl_mean();
        }
        let step = opt.step as usize;
        let mut summary = EpochSummary {
            epoch,
            step,
            lr: lr_at(step, total, cfg, warmup),
            loss_ce: ce / spe as f64,
            loss_kl_mean: kl / spe as f64,
            kendall_proxy: None,
        };
        summary.kendall_proxy = hook(net, &summary)?;
        summaries.push(summary);
    }
    Ok(summaries)
}

/// One-shot training of a single-group super-net, with warmup.
pub fn train_one_shot(
    net: &mut SuperNet,
    train: &Dataset,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<EpochSummary>> {
    if net.plan().g != 1 {
        return Err(Error::Usage(format!(
            "one-shot training needs a one-group plan, got g={}",
            net.plan().g
        )));
    }
    let lr_plan = LrPlan::uniform(net.plan());
    train_stage(net, train, cfg, true, &lr_plan, hook)
}

/// Few-shot stage: no warmup, per-group multipliers from `lr_plan`.
pub fn train_few_shot_stage(
    net: &mut SuperNet,
    train: &Dataset,
    cfg: &TrainConfig,
    lr_plan: &LrPlan,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<EpochSummary>> {
    if lr_plan.g != net.plan().g {
        return Err(Error::Usage(format!(
            "LR plan for g={} does not match super-net g={}",
            lr_plan.g,
            net.plan().g
        )));
    }
    train_stage(net, train, cfg, false, lr_plan, hook)
}

/// Splits `net` once and returns the child super-net with inherited weights.
pub fn split_supernet(net: &SuperNet) -> Result<SuperNet> {
    let space = net.space();
    let next = net.plan().next_split(space)?;
    let map = inheritance_map(net.plan(), &next, space)?;
    net.inherit(&next, &map)
}

/// I/O and evaluation callbacks for [`progressive_run`].
pub trait StageHooks {
    /// Final-epoch weights of a completed stage `g`, if present, to skip retraining it.
    fn resume(&mut self, g: usize) -> Result<Option<SuperNet>>;
    fn on_epoch(&mut self, g: usize, net: &mut SuperNet, summary: &EpochSummary) -> Result<Option<f64>>;
    /// Called right after a split, before the child is trained.
    fn after_split(&mut self, g: usize, parent: &mut SuperNet, child: &mut SuperNet) -> Result<()>;
    fn on_stage_end(&mut self, g: usize, net: &SuperNet, lr_plan: &LrPlan, summaries: &[EpochSummary]) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub g: usize,
    pub resumed: bool,
    pub summaries: Vec<EpochSummary>,
}

/// One-shot training at g=1, then split → inherit → train for each later group count.
///
/// A schedule may start above 1 when `hooks.resume` supplies its first stage.
/// Each few-shot stage continues from the previous stage's final-epoch weights; its seed is
/// `cfg_few.seed + g` so that stages draw distinct data orders.
#[allow(clippy::too_many_arguments)]
pub fn progressive_run(
    space: &SearchSpace,
    train: &Dataset,
    cfg_one: &TrainConfig,
    cfg_few: &TrainConfig,
    schedule: &[usize],
    lr_rule: &LrRule,
    init_seed: u64,
    hooks: &mut dyn StageHooks,
) -> Result<Vec<StageOutcome>> {
    let max = GroupPlan::max_groups(space);
    let valid = !schedule.is_empty()
        && schedule[0] >= 1
        && schedule.windows(2).all(|w| w[1] == w[0] + 1)
        && *schedule.last().expect("non-empty") <= max;
    if !valid {
        return Err(Error::Config(format!(
            "schedule {schedule:?} must be consecutive group counts within 1..={max}"
        )));
    }
    let mut outcomes = Vec::new();
    let mut current: Option<SuperNet> = None;
    for &g in schedule {
        if let Some(net) = hooks.resume(g)? {
            if net.plan().g != g {
                return Err(Error::State(format!("resumed checkpoint has g={}, expected {g}", net.plan().g)));
            }
            outcomes.push(StageOutcome {
                g,
                resumed: true,
                summaries: Vec::new(),
            });
            current = Some(net);
            continue;
        }
        let mut net = match current.take() {
            None if g > 1 => {
                return Err(Error::Usage(format!(
                    "stage g={g} needs the g={} super-net to split from",
                    g - 1
                )))
            }
            None => {
                let mut net = SuperNet::build(space, &GroupPlan::initial(space), init_seed)?;
                net.dropout_p = cfg_one.dropout_p;
                net
            }
            Some(mut parent) => {
                let mut child = split_supernet(&parent)?;
                hooks.after_split(g, &mut parent, &mut child)?;
                child
            }
        };
        let (summaries, lr_plan) = if g == 1 {
            let lr_plan = LrPlan::uniform(net.plan());
            let s = train_one_shot(&mut net, train, cfg_one, &mut |n, s| hooks.on_epoch(g, n, s))?;
            (s, lr_plan)
        } else {
            let lr_plan = lr_multipliers(net.plan(), lr_rule, space)?;
            let cfg = TrainConfig {
                seed: cfg_few.seed.wrapping_add(g as u64),
                ..cfg_few.clone()
            };
            let s = train_few_shot_stage(&mut net, train, &cfg, &lr_plan, &mut |n, s| hooks.on_epoch(g, n, s))?;
            (s, lr_plan)
        };
        hooks.on_stage_end(g, &net, &lr_plan, &summaries)?;
        outcomes.push(StageOutcome {
            g,
            resumed: false,
            summaries,
        });
        current = Some(net);
    }
    Ok(outcomes)
}
