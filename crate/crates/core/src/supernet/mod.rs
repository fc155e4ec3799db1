//! Weight-entangled elastic ResNet with per-stage weight groups.
//!
//! Every tensor is named and shaped by [`layout`], which is a pure function of the search
//! space and group plan. Building, checkpointing and split inheritance all go through it.
//!
//! Naming: `stem.conv.weight`, `s{stage}.g{label}.b{block}.conv1.weight`,
//! `head.g{label}.weight`, where `label` is the group's largest out-width candidate and
//! stages are 1-based. Batch-norm layers contribute `.weight`/`.bias` parameters and
//! `.running_mean`/`.running_var` buffers.

mod checkpoint;
mod standalone;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::space::{Architecture, SearchSpace};
use crate::split::{group_label, GroupPlan, InheritanceMap};
use crate::tensor::{copy_prefix, BnMode, ParamId, ParamKind, ParamStore, StatsId, Tape, Tensor, Var};

pub use checkpoint::{CheckpointManifest, TensorEntry, CHECKPOINT_FORMAT};
pub use standalone::SubNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Param(ParamKind),
    RunningMean,
    RunningVar,
}

/// Which weight group a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Owner {
    Shared,
    Stage { stage: usize, group: usize },
    Head { stage: usize, group: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
    pub owner: Owner,
}

/// Shape of one group's tensors in a layout.
struct GroupShape {
    stage: usize,
    group: usize,
    label: usize,
    in_cap: usize,
    out_cap: usize,
    /// Mid-width capacity per block; its length is the number of blocks.
    mids: Vec<usize>,
}

pub(crate) fn group_prefix(stage: usize, label: usize) -> String {
    format!("s{}.g{}", stage + 1, label)
}

fn push_conv_bn(
    out: &mut Vec<TensorSpec>,
    prefix: &str,
    conv: &str,
    bn: &str,
    shape: [usize; 4],
    owner: Owner,
) {
    out.push(TensorSpec {
        name: format!("{prefix}.{conv}.weight"),
        shape: shape.to_vec(),
        role: TensorRole::Param(ParamKind::Weight),
        owner,
    });
    for (suffix, role) in [
        ("weight", TensorRole::Param(ParamKind::Norm)),
        ("bias", TensorRole::Param(ParamKind::Norm)),
        ("running_mean", TensorRole::RunningMean),
        ("running_var", TensorRole::RunningVar),
    ] {
        out.push(TensorSpec {
            name: format!("{prefix}.{bn}.{suffix}"),
            shape: vec![shape[0]],
            role,
            owner,
        });
    }
}

fn emit_layout(space: &SearchSpace, groups: &[GroupShape]) -> Vec<TensorSpec> {
    let mut out = Vec::new();
    push_conv_bn(&mut out, "stem", "conv", "bn", [space.stem_channels, 3, 3, 3], Owner::Shared);
    for g in groups {
        let owner = Owner::Stage {
            stage: g.stage,
            group: g.group,
        };
        let gp = group_prefix(g.stage, g.label);
        for (b, &mid) in g.mids.iter().enumerate() {
            let p = format!("{gp}.b{b}");
            let cin = if b == 0 { g.in_cap } else { g.out_cap };
            push_conv_bn(&mut out, &p, "conv1", "bn1", [mid, cin, 3, 3], owner);
            push_conv_bn(&mut out, &p, "conv2", "bn2", [g.out_cap, mid, 3, 3], owner);
            if b == 0 {
                push_conv_bn(&mut out, &p, "proj", "proj_bn", [g.out_cap, g.in_cap, 1, 1], owner);
            }
        }
    }
    let last = space.stages.len() - 1;
    for g in groups.iter().filter(|g| g.stage == last) {
        let owner = Owner::Head {
            stage: last,
            group: g.group,
        };
        out.push(TensorSpec {
            name: format!("head.g{}.weight", g.label),
            shape: vec![space.num_classes, g.out_cap],
            role: TensorRole::Param(ParamKind::Weight),
            owner,
        });
        out.push(TensorSpec {
            name: format!("head.g{}.bias", g.label),
            shape: vec![space.num_classes],
            role: TensorRole::Param(ParamKind::Bias),
            owner,
        });
    }
    out
}

/// Every tensor of the super-net for `plan`, in canonical (checkpoint) order.
pub fn layout(space: &SearchSpace, plan: &GroupPlan) -> Vec<TensorSpec> {
    let cands = space.all_candidates();
    let mut groups = Vec::new();
    for (s, stage_groups) in plan.stages.iter().enumerate() {
        let in_cap = if s == 0 {
            space.stem_channels
        } else {
            *cands[s - 1].last().expect("non-empty")
        };
        let mid_cap = *cands[s].last().expect("non-empty");
        for (gi, set) in stage_groups.iter().enumerate() {
            groups.push(GroupShape {
                stage: s,
                group: gi,
                label: group_label(set),
                in_cap,
                out_cap: group_label(set),
                mids: vec![mid_cap; space.stages[s].max_depth()],
            });
        }
    }
    emit_layout(space, &groups)
}

/// Exact-width tensors of one architecture, named as in the routed super-net groups.
pub(crate) fn subnet_layout(space: &SearchSpace, plan: &GroupPlan, arch: &Architecture) -> Result<Vec<TensorSpec>> {
    arch.validate(space)?;
    let mut groups = Vec::new();
    let mut cin = space.stem_channels;
    for s in 0..space.stages.len() {
        let out = arch.out_channels(space, s);
        let group = plan
            .route_channel(s, out)
            .ok_or_else(|| Error::Config(format!("stage {}: no group owns {out}", s + 1)))?;
        groups.push(GroupShape {
            stage: s,
            group,
            label: plan.group_label(s, group),
            in_cap: cin,
            out_cap: out,
            mids: arch.mid_channels(space, s),
        });
        cin = out;
    }
    Ok(emit_layout(space, &groups))
}

/// Instantiates a layout into a parameter store.
///
/// Convs are He-normal, BN γ=1/β=0, heads uniform in ±1/√fan_in with zero bias.
fn instantiate(specs: &[TensorSpec], rng: Option<&mut ChaCha8Rng>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut rng = rng;
    for t in specs {
        match t.role {
            TensorRole::Param(kind) => {
                let name = t.name.clone();
                match (kind, rng.as_deref_mut()) {
                    (ParamKind::Weight, Some(r)) if t.shape.len() == 4 => {
                        store.add_he_normal(name, &t.shape, r)?;
                    }
                    (ParamKind::Weight, Some(r)) => {
                        let bound = 1.0 / (t.shape[1] as f32).sqrt();
                        let mut w = Tensor::zeros(&t.shape);
                        for v in w.data_mut() {
                            *v = r.random_range(-bound..bound);
                        }
                        store.add(name, kind, w)?;
                    }
                    (ParamKind::Norm, Some(_)) if t.name.ends_with(".weight") => {
                        store.add(name, kind, Tensor::full(&t.shape, 1.0))?;
                    }
                    _ => {
                        store.add(name, kind, Tensor::zeros(&t.shape))?;
                    }
                }
            }
            TensorRole::RunningMean => {
                let base = t.name.strip_suffix(".running_mean").expect("suffix");
                store.add_stats(base, t.shape[0])?;
            }
            TensorRole::RunningVar => {}
        }
    }
    Ok(store)
}

#[derive(Clone, Debug)]
pub(crate) struct ConvBn {
    conv: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: StatsId,
    kernel: usize,
}

impl ConvBn {
    fn lookup(store: &ParamStore, prefix: &str, conv: &str, bn: &str) -> Result<Self> {
        let p = |n: String| store.id_of(&n).ok_or_else(|| Error::State(format!("missing tensor {n}")));
        let conv = p(format!("{prefix}.{conv}.weight"))?;
        let kernel = store.param(conv).value.dim(2);
        let stats_name = format!("{prefix}.{bn}");
        Ok(ConvBn {
            conv,
            gamma: p(format!("{prefix}.{bn}.weight"))?,
            beta: p(format!("{prefix}.{bn}.bias"))?,
            stats: store
                .stats_id_of(&stats_name)
                .ok_or_else(|| Error::State(format!("missing statistics {stats_name}")))?,
            kernel,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn apply(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: Var,
        cin: usize,
        cout: usize,
        stride: usize,
        mode: BnMode,
    ) -> Result<Var> {
        let k = self.kernel;
        let w = tape.param_prefix(store, self.conv, &[cout, cin, k, k])?;
        let y = tape.conv2d(x, w, stride, k / 2)?;
        let g = tape.param_prefix(store, self.gamma, &[cout])?;
        let b = tape.param_prefix(store, self.beta, &[cout])?;
        tape.batch_norm2d(y, g, b, store.stats_mut(self.stats), mode)
    }

    fn stats_ids(&self) -> StatsId {
        self.stats
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    proj: Option<ConvBn>,
}

impl Block {
    fn lookup(store: &ParamStore, prefix: &str, first: bool) -> Result<Self> {
        Ok(Block {
            conv1: ConvBn::lookup(store, prefix, "conv1", "bn1")?,
            conv2: ConvBn::lookup(store, prefix, "conv2", "bn2")?,
            proj: if first {
                Some(ConvBn::lookup(store, prefix, "proj", "proj_bn")?)
            } else {
                None
            },
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: Var,
        cin: usize,
        mid: usize,
        out: usize,
        stride: usize,
        mode: BnMode,
    ) -> Result<Var> {
        let h = self.conv1.apply(tape, store, x, cin, mid, stride, mode)?;
        let h = tape.relu(h);
        let h = self.conv2.apply(tape, store, h, mid, out, 1, mode)?;
        let shortcut = match &self.proj {
            Some(p) => p.apply(tape, store, x, cin, out, stride, mode)?,
            None => x,
        };
        let y = tape.add(h, shortcut)?;
        Ok(tape.relu(y))
    }

    fn stats(&self) -> impl Iterator<Item = StatsId> + '_ {
        [Some(&self.conv1), Some(&self.conv2), self.proj.as_ref()]
            .into_iter()
            .flatten()
            .map(ConvBn::stats_ids)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Head {
    weight: ParamId,
    bias: ParamId,
}

impl Head {
    fn lookup(store: &ParamStore, label: usize) -> Result<Self> {
        let p = |n: String| store.id_of(&n).ok_or_else(|| Error::State(format!("missing tensor {n}")));
        Ok(Head {
            weight: p(format!("head.g{label}.weight"))?,
            bias: p(format!("head.g{label}.bias"))?,
        })
    }
}

/// One stage's resolved path: the blocks to run and their widths.
pub(crate) struct StagePath<'a> {
    blocks: &'a [Block],
    mids: Vec<usize>,
    out: usize,
    stride: usize,
}

pub(crate) struct PathSpec<'a> {
    stem: &'a ConvBn,
    stem_channels: usize,
    stem_stride: usize,
    stages: Vec<StagePath<'a>>,
    head: &'a Head,
}

/// Runs stem → stages → pool → dropout → head along a resolved path.
pub(crate) fn run_path(
    tape: &mut Tape,
    store: &mut ParamStore,
    path: &PathSpec<'_>,
    images: Var,
    mode: BnMode,
    dropout: Option<(f32, &mut dyn RngCore)>,
) -> Result<Var> {
    let xs = tape.value(images).shape().to_vec();
    if xs.len() != 4 || xs[1] != 3 {
        return Err(Error::Dimension(format!("expected [N,3,H,W] images, got {xs:?}")));
    }
    let mut x = path
        .stem
        .apply(tape, store, images, 3, path.stem_channels, path.stem_stride, mode)?;
    x = tape.relu(x);
    let mut cin = path.stem_channels;
    for stage in &path.stages {
        for (b, &mid) in stage.mids.iter().enumerate() {
            let stride = if b == 0 { stage.stride } else { 1 };
            x = stage.blocks[b].forward(tape, store, x, cin, mid, stage.out, stride, mode)?;
            debug_assert_eq!(tape.value(x).dim(1), stage.out, "stage out-width must be uniform");
            cin = stage.out;
        }
    }
    let mut x = tape.global_avg_pool(x)?;
    if let Some((p, rng)) = dropout {
        x = tape.dropout(x, p, true, rng)?;
    }
    let classes = store.param(path.head.weight).value.dim(0);
    let w = tape.param_prefix(store, path.head.weight, &[classes, cin])?;
    let b = tape.param(store, path.head.bias);
    tape.linear(x, w, b)
}

#[derive(Clone, Debug)]
pub struct StageGroup {
    pub candidates: Vec<usize>,
    blocks: Vec<Block>,
}

/// The elastic super-net: shared stem, per-stage weight groups, one head per last-stage group.
#[derive(Clone, Debug)]
pub struct SuperNet {
    space: SearchSpace,
    plan: GroupPlan,
    store: ParamStore,
    stem: ConvBn,
    stages: Vec<Vec<StageGroup>>,
    heads: Vec<Head>,
    owners: Vec<Owner>,
    pub dropout_p: f32,
}

impl SuperNet {
    /// Builds and initializes a super-net; deterministic in `seed`.
    pub fn build(space: &SearchSpace, plan: &GroupPlan, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build_with(space, plan, Some(&mut rng))
    }

    /// A super-net with zeroed parameters, to be filled by a loader or inheritance.
    pub(crate) fn build_zeroed(space: &SearchSpace, plan: &GroupPlan) -> Result<Self> {
        Self::build_with(space, plan, None)
    }

    fn build_with(space: &SearchSpace, plan: &GroupPlan, rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        space.validate()?;
        plan.validate(space)?;
        let specs = layout(space, plan);
        let store = instantiate(&specs, rng)?;
        let owners = specs
            .iter()
            .filter(|t| matches!(t.role, TensorRole::Param(_)))
            .map(|t| t.owner)
            .collect();
        let stem = ConvBn::lookup(&store, "stem", "conv", "bn")?;
        let mut stages = Vec::new();
        for (s, groups) in plan.stages.iter().enumerate() {
            let mut out = Vec::new();
            for set in groups {
                let gp = group_prefix(s, group_label(set));
                let blocks = (0..space.stages[s].max_depth())
                    .map(|b| Block::lookup(&store, &format!("{gp}.b{b}"), b == 0))
                    .collect::<Result<Vec<_>>>()?;
                out.push(StageGroup {
                    candidates: set.clone(),
                    blocks,
                });
            }
            stages.push(out);
        }
        let last = plan.stages.len() - 1;
        let heads = plan.stages[last]
            .iter()
            .map(|set| Head::lookup(&store, group_label(set)))
            .collect::<Result<Vec<_>>>()?;
        Ok(SuperNet {
            space: space.clone(),
            plan: plan.clone(),
            store,
            stem,
            stages,
            heads,
            owners,
            dropout_p: 0.0,
        })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn plan(&self) -> &GroupPlan {
        &self.plan
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn groups(&self, stage: usize) -> &[StageGroup] {
        &self.stages[stage]
    }

    /// Group that a parameter belongs to, for learning-rate multipliers.
    pub fn owner(&self, id: ParamId) -> Owner {
        self.owners[id.index()]
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    pub fn layout(&self) -> Vec<TensorSpec> {
        layout(&self.space, &self.plan)
    }

    /// Per-stage group index for `arch`.
    pub fn route(&self, arch: &Architecture) -> Result<Vec<usize>> {
        arch.validate(&self.space)?;
        (0..self.space.stages.len())
            .map(|s| {
                let c = arch.out_channels(&self.space, s);
                self.plan
                    .route_channel(s, c)
                    .ok_or_else(|| Error::Config(format!("stage {}: no group owns {c}", s + 1)))
            })
            .collect()
    }

    fn view(&self) -> SuperNetView<'_> {
        SuperNetView {
            space: &self.space,
            plan: &self.plan,
            stem: &self.stem,
            stages: &self.stages,
            heads: &self.heads,
        }
    }

    /// Records the forward pass of `arch` on `tape` and returns the logits.
    ///
    /// Dropout before the head is applied only when `dropout_rng` is given.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        arch: &Architecture,
        images: Var,
        mode: BnMode,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let p = self.dropout_p;
        // Split borrows: the path borrows module ids while the store is mutated.
        let SuperNet {
            space,
            plan,
            store,
            stem,
            stages,
            heads,
            ..
        } = self;
        let view = SuperNetView {
            space,
            plan,
            stem,
            stages,
            heads,
        };
        let path = view.path(arch)?;
        run_path(tape, store, &path, images, mode, dropout_rng.map(|r| (p, r)))
    }

    /// Eval-mode logits without gradient tracking.
    pub fn logits(&mut self, arch: &Architecture, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let x = tape.input(images.clone());
        let y = self.forward(&mut tape, arch, x, BnMode::Eval, None)?;
        Ok(tape.value(y).clone())
    }

    /// Re-estimates BN running statistics along `arch`'s routed path from `batches`.
    pub fn bn_recalibrate(&mut self, arch: &Architecture, batches: &[Tensor]) -> Result<()> {
        if batches.is_empty() {
            return Err(Error::Usage("bn_recalibrate needs at least one batch".into()));
        }
        let ids = self.path_stats(arch)?;
        for id in &ids {
            self.store.stats_mut(*id).reset();
        }
        for batch in batches {
            let mut tape = Tape::no_grad();
            let x = tape.input(batch.clone());
            self.forward(&mut tape, arch, x, BnMode::Recalibrate, None)?;
        }
        Ok(())
    }

    fn path_stats(&self, arch: &Architecture) -> Result<Vec<StatsId>> {
        let path = self.view().path(arch)?;
        let mut ids = vec![path.stem.stats];
        for st in &path.stages {
            for b in &st.blocks[..st.mids.len()] {
                ids.extend(b.stats());
            }
        }
        Ok(ids)
    }

    /// Standalone copy of `arch`'s active weight slices.
    pub fn extract_subnet(&self, arch: &Architecture) -> Result<SubNet> {
        SubNet::extract(self, arch)
    }

    /// Builds the super-net for `new_plan` with every tensor copied per `map`.
    pub fn inherit(&self, new_plan: &GroupPlan, map: &InheritanceMap) -> Result<SuperNet> {
        let mut next = SuperNet::build_zeroed(&self.space, new_plan)?;
        next.dropout_p = self.dropout_p;
        let specs = next.layout();
        if specs.len() != map.records.len() {
            return Err(Error::Usage(format!(
                "inheritance map has {} records for {} tensors",
                map.records.len(),
                specs.len()
            )));
        }
        for (spec, rec) in specs.iter().zip(&map.records) {
            if spec.name != rec.dest || spec.shape != rec.prefix {
                return Err(Error::Usage(format!(
                    "inheritance record {} does not match tensor {}",
                    rec.dest, spec.name
                )));
            }
            let src = self.read_tensor(&rec.source)?;
            let mut dst = vec![0.0f32; spec.shape.iter().product()];
            crate::tensor::check_prefix(src.shape(), &spec.shape)?;
            copy_prefix(src.data(), src.shape(), &mut dst, &spec.shape);
            next.write_tensor(&spec.name, Tensor::new(spec.shape.clone(), dst)?)?;
        }
        Ok(next)
    }

    /// Reads any named tensor in the layout (parameters and running statistics).
    pub fn read_tensor(&self, name: &str) -> Result<Tensor> {
        read_named(&self.store, name)
    }

    pub fn write_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        write_named(&mut self.store, name, value)
    }
}

pub(crate) fn read_named(store: &ParamStore, name: &str) -> Result<Tensor> {
    if let Some(id) = store.id_of(name) {
        return Ok(store.param(id).value.clone());
    }
    for (suffix, is_mean) in [(".running_mean", true), (".running_var", false)] {
        if let Some(base) = name.strip_suffix(suffix) {
            if let Some(id) = store.stats_id_of(base) {
                let st = store.stats(id);
                let v = if is_mean { &st.mean } else { &st.var };
                return Tensor::new(vec![v.len()], v.clone());
            }
        }
    }
    Err(Error::State(format!("no tensor named {name}")))
}

pub(crate) fn write_named(store: &mut ParamStore, name: &str, value: Tensor) -> Result<()> {
    if let Some(id) = store.id_of(name) {
        let p = store.param_mut(id);
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "{name}: shape {:?} vs {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        return Ok(());
    }
    for (suffix, is_mean) in [(".running_mean", true), (".running_var", false)] {
        if let Some(base) = name.strip_suffix(suffix) {
            if let Some(id) = store.stats_id_of(base) {
                let st = store.stats_mut(id);
                let dst = if is_mean { &mut st.mean } else { &mut st.var };
                if dst.len() != value.numel() {
                    return Err(Error::Dimension(format!("{name}: length mismatch")));
                }
                dst.copy_from_slice(value.data());
                return Ok(());
            }
        }
    }
    Err(Error::State(format!("no tensor named {name}")))
}

/// Borrow of everything but the parameter store.
struct SuperNetView<'a> {
    space: &'a SearchSpace,
    plan: &'a GroupPlan,
    stem: &'a ConvBn,
    stages: &'a [Vec<StageGroup>],
    heads: &'a [Head],
}

impl<'a> SuperNetView<'a> {
    fn path(&self, arch: &Architecture) -> Result<PathSpec<'a>> {
        arch.validate(self.space)?;
        let mut stages = Vec::new();
        let mut head_group = 0;
        for s in 0..self.space.stages.len() {
            let out = arch.out_channels(self.space, s);
            let g = self
                .plan
                .route_channel(s, out)
                .ok_or_else(|| Error::Config(format!("stage {}: no group owns {out}", s + 1)))?;
            head_group = g;
            stages.push(StagePath {
                blocks: &self.stages[s][g].blocks,
                mids: arch.mid_channels(self.space, s),
                out,
                stride: self.space.stage_stride(s),
            });
        }
        Ok(PathSpec {
            stem: self.stem,
            stem_channels: self.space.stem_channels,
            stem_stride: self.space.stem_stride,
            stages,
            head: &self.heads[head_group],
        })
    }
}
