//! Fixed-width networks: extracted slices of a super-net, or freshly initialized copies.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    group_prefix, instantiate, read_named, run_path, subnet_layout, write_named, Block, ConvBn, Head, PathSpec,
    StagePath, SuperNet, TensorSpec,
};
use crate::error::Result;
use crate::space::{Architecture, SearchSpace};
use crate::split::GroupPlan;
use crate::tensor::{check_prefix, copy_prefix, BnMode, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
struct SubStage {
    blocks: Vec<Block>,
    mids: Vec<usize>,
    out: usize,
    stride: usize,
}

/// A single architecture with exactly-sized tensors.
///
/// Tensor names match the super-net group the architecture routes to, so extraction is a
/// by-name prefix copy.
#[derive(Clone, Debug)]
pub struct SubNet {
    space: SearchSpace,
    arch: Architecture,
    specs: Vec<TensorSpec>,
    store: ParamStore,
    stem: ConvBn,
    stages: Vec<SubStage>,
    head: Head,
    pub dropout_p: f32,
}

impl SubNet {
    /// Fresh initialization, as used for stand-alone training.
    pub fn fresh(space: &SearchSpace, arch: &Architecture, seed: u64) -> Result<Self> {
        let plan = GroupPlan::initial(space);
        let specs = subnet_layout(space, &plan, arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = instantiate(&specs, Some(&mut rng))?;
        Self::assemble(space, &plan, arch, specs, store)
    }

    pub(crate) fn extract(net: &SuperNet, arch: &Architecture) -> Result<Self> {
        let specs = subnet_layout(net.space(), net.plan(), arch)?;
        let mut store = instantiate(&specs, None)?;
        for spec in &specs {
            let src = read_named(net.store(), &spec.name)?;
            check_prefix(src.shape(), &spec.shape)?;
            let mut dst = vec![0.0f32; spec.shape.iter().product()];
            copy_prefix(src.data(), src.shape(), &mut dst, &spec.shape);
            write_named(&mut store, &spec.name, Tensor::new(spec.shape.clone(), dst)?)?;
        }
        let mut sub = Self::assemble(net.space(), net.plan(), arch, specs, store)?;
        sub.dropout_p = net.dropout_p;
        Ok(sub)
    }

    fn assemble(
        space: &SearchSpace,
        plan: &GroupPlan,
        arch: &Architecture,
        specs: Vec<TensorSpec>,
        store: ParamStore,
    ) -> Result<Self> {
        let stem = ConvBn::lookup(&store, "stem", "conv", "bn")?;
        let mut stages = Vec::new();
        let mut label = 0;
        for s in 0..space.stages.len() {
            let out = arch.out_channels(space, s);
            let g = plan.route_channel(s, out).expect("validated by layout");
            label = plan.group_label(s, g);
            let gp = group_prefix(s, label);
            let mids = arch.mid_channels(space, s);
            let blocks = (0..mids.len())
                .map(|b| Block::lookup(&store, &format!("{gp}.b{b}"), b == 0))
                .collect::<Result<Vec<_>>>()?;
            stages.push(SubStage {
                blocks,
                mids,
                out,
                stride: space.stage_stride(s),
            });
        }
        let head = Head::lookup(&store, label)?;
        Ok(SubNet {
            space: space.clone(),
            arch: arch.clone(),
            specs,
            store,
            stem,
            stages,
            head,
            dropout_p: 0.0,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    pub fn read_tensor(&self, name: &str) -> Result<Tensor> {
        read_named(&self.store, name)
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        images: Var,
        mode: BnMode,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let path = PathSpec {
            stem: &self.stem,
            stem_channels: self.space.stem_channels,
            stem_stride: self.space.stem_stride,
            stages: self
                .stages
                .iter()
                .map(|s| StagePath {
                    blocks: &s.blocks,
                    mids: s.mids.clone(),
                    out: s.out,
                    stride: s.stride,
                })
                .collect(),
            head: &self.head,
        };
        let p = self.dropout_p;
        run_path(tape, &mut self.store, &path, images, mode, dropout_rng.map(|r| (p, r)))
    }

    pub fn logits(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let x = tape.input(images.clone());
        let y = self.forward(&mut tape, x, BnMode::Eval, None)?;
        Ok(tape.value(y).clone())
    }
}
