//! Subnet samplers: independent uniform draws and strict-fairness rounds.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Architecture, SearchSpace, StageChoice};

/// Upper bound on the number of architectures in one fairness round.
pub const MAX_ROUND_LEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Uniform,
    Fair,
}

/// Each depth, out width and active mid width drawn independently and uniformly.
pub fn sample_uniform(space: &SearchSpace, rng: &mut dyn RngCore) -> Architecture {
    Architecture {
        stages: space
            .stages
            .iter()
            .map(|s| {
                let n = s.candidate_channels().len();
                let depth = s.depth_choices[rng.random_range(0..s.depth_choices.len())];
                let out_idx = rng.random_range(0..n);
                let mid_idx = (0..depth).map(|_| rng.random_range(0..n)).collect();
                StageChoice {
                    depth,
                    out_idx,
                    mid_idx,
                }
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Dimension {
    cardinality: usize,
    perm: Vec<usize>,
    cursor: usize,
}

impl Dimension {
    fn new(cardinality: usize) -> Self {
        Dimension {
            cardinality,
            perm: Vec::new(),
            cursor: 0,
        }
    }

    fn next(&mut self, rng: &mut dyn RngCore) -> usize {
        if self.cursor >= self.perm.len() {
            self.perm = (0..self.cardinality).collect();
            self.perm.shuffle(rng);
            self.cursor = 0;
        }
        let v = self.perm[self.cursor];
        self.cursor += 1;
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StageDims {
    depth: Dimension,
    out: Dimension,
    /// One per block position up to the stage's maximum depth.
    mid: Vec<Dimension>,
}

/// Permutation cursors for every decision of the space.
///
/// A mid-width dimension only advances when its block is active, so its fairness is
/// conditioned on the block being present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairSamplerState {
    stages: Vec<StageDims>,
}

impl FairSamplerState {
    pub fn new(space: &SearchSpace) -> Self {
        FairSamplerState {
            stages: space
                .stages
                .iter()
                .map(|s| {
                    let n = s.candidate_channels().len();
                    StageDims {
                        depth: Dimension::new(s.depth_choices.len()),
                        out: Dimension::new(n),
                        mid: (0..s.max_depth()).map(|_| Dimension::new(n)).collect(),
                    }
                })
                .collect(),
        }
    }

    fn draw(&mut self, space: &SearchSpace, rng: &mut dyn RngCore) -> Architecture {
        Architecture {
            stages: self
                .stages
                .iter_mut()
                .zip(&space.stages)
                .map(|(dims, spec)| {
                    let depth = spec.depth_choices[dims.depth.next(rng)];
                    let out_idx = dims.out.next(rng);
                    let mid_idx = dims.mid[..depth].iter_mut().map(|d| d.next(rng)).collect();
                    StageChoice {
                        depth,
                        out_idx,
                        mid_idx,
                    }
                })
                .collect(),
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Smallest round length giving every dimension equal usage, capped at [`MAX_ROUND_LEN`].
///
/// For a mid dimension of block `b` with `n` candidates, the block is active in
/// `L·a_b/|D|` draws of a round (`a_b` = depth choices reaching block `b`), so `L` must be a
/// multiple of `|D|·n/gcd(a_b, n)` as well as of every plain cardinality.
pub fn round_len(space: &SearchSpace) -> usize {
    let mut l = 1usize;
    for s in &space.stages {
        let n = s.candidate_channels().len();
        let nd = s.depth_choices.len();
        l = lcm(l, nd);
        l = lcm(l, n);
        for b in 0..s.max_depth() {
            let active = s.depth_choices.iter().filter(|&&d| d > b).count();
            l = lcm(l, nd * n / gcd(active, n));
        }
        if l > MAX_ROUND_LEN {
            return MAX_ROUND_LEN;
        }
    }
    l
}

/// Emits one fairness round of [`round_len`] architectures.
pub fn sample_fair_round(
    space: &SearchSpace,
    state: &mut FairSamplerState,
    rng: &mut dyn RngCore,
) -> Vec<Architecture> {
    (0..round_len(space)).map(|_| state.draw(space, rng)).collect()
}

/// Stateful sampler used by the trainer; fair rounds refill automatically when exhausted.
#[derive(Clone, Debug)]
pub enum Sampler {
    Uniform,
    Fair {
        state: FairSamplerState,
        pending: VecDeque<Architecture>,
    },
}

impl Sampler {
    pub fn new(kind: SamplerKind, space: &SearchSpace) -> Self {
        match kind {
            SamplerKind::Uniform => Sampler::Uniform,
            SamplerKind::Fair => Sampler::Fair {
                state: FairSamplerState::new(space),
                pending: VecDeque::new(),
            },
        }
    }

    pub fn kind(&self) -> SamplerKind {
        match self {
            Sampler::Uniform => SamplerKind::Uniform,
            Sampler::Fair { .. } => SamplerKind::Fair,
        }
    }

    pub fn sample(&mut self, space: &SearchSpace, rng: &mut dyn RngCore) -> Architecture {
        match self {
            Sampler::Uniform => sample_uniform(space, rng),
            Sampler::Fair { state, pending } => {
                if pending.is_empty() {
                    pending.extend(sample_fair_round(space, state, rng));
                }
                pending.pop_front().expect("round is non-empty")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::StageSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lcm_of_two_and_three() {
        let space = SearchSpace {
            name: None,
            stem_channels: 4,
            stem_stride: 1,
            stages: vec![StageSpec {
                base_channels: 6,
                depth_choices: vec![1, 2],
                ratios: vec![1.0, 2.0 / 3.0, 1.0 / 3.0],
                channel_multiple: 2,
                stride: None,
            }],
            num_classes: 2,
            input_resolution: 8,
        };
        assert_eq!(space.candidates(0), vec![2, 4, 6]);
        assert_eq!(round_len(&space), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = FairSamplerState::new(&space);
        let round = sample_fair_round(&space, &mut state, &mut rng);
        let d1 = round.iter().filter(|a| a.stages[0].depth == 1).count();
        assert_eq!(d1, 3);
        for c in 0..3 {
            assert_eq!(round.iter().filter(|a| a.stages[0].out_idx == c).count(), 2);
        }
    }

    #[test]
    fn reference_space_round_is_capped() {
        assert_eq!(round_len(&SearchSpace::resnet48_track1()), MAX_ROUND_LEN);
    }

    #[test]
    fn fair_prefix_is_a_permutation() {
        let space = SearchSpace::desk_small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut state = FairSamplerState::new(&space);
        let round = sample_fair_round(&space, &mut state, &mut rng);
        let mut first: Vec<usize> = round[..3].iter().map(|a| a.stages[0].out_idx).collect();
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2]);
    }

    #[test]
    fn singleton_choices_yield_the_unique_arch() {
        let mut space = SearchSpace::desk_small();
        for s in &mut space.stages {
            s.depth_choices = vec![1];
            s.ratios = vec![1.0];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_uniform(&space, &mut rng), space.largest_arch());
        }
    }
}
