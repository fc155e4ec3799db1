//! Search-space schema, channel arithmetic and architecture encoding.

mod sampler;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use sampler::{round_len, sample_fair_round, sample_uniform, FairSamplerState, Sampler, SamplerKind};

/// Nearest multiple of `multiple` to `base * ratio`, ties rounding up, never below `multiple`.
pub fn round_channels(base: usize, ratio: f64, multiple: usize) -> usize {
    let multiple = multiple.max(1);
    let units = (base as f64 * ratio / multiple as f64 + 0.5 + 1e-9).floor() as usize;
    units.max(1) * multiple
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub base_channels: usize,
    pub depth_choices: Vec<usize>,
    pub ratios: Vec<f64>,
    pub channel_multiple: usize,
    /// Spatial stride of the stage's first block; defaults to 1 for the first stage, 2 after.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
}

impl StageSpec {
    /// Sorted, deduplicated channel widths reachable from the ratio list.
    pub fn candidate_channels(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self
            .ratios
            .iter()
            .map(|&r| round_channels(self.base_channels, r, self.channel_multiple))
            .collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn max_depth(&self) -> usize {
        *self.depth_choices.iter().max().unwrap_or(&0)
    }

    pub fn min_depth(&self) -> usize {
        *self.depth_choices.iter().min().unwrap_or(&0)
    }

    fn validate(&self, idx: usize) -> Result<()> {
        let ctx = |m: String| Error::Config(format!("stage {}: {m}", idx + 1));
        if self.depth_choices.is_empty() || self.depth_choices.contains(&0) {
            return Err(ctx("depth choices must be non-empty and >= 1".into()));
        }
        if self.depth_choices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ctx("depth choices must be strictly increasing".into()));
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(ctx("ratios must be non-empty and within (0, 1]".into()));
        }
        if self.channel_multiple == 0 || !self.base_channels.is_multiple_of(self.channel_multiple) {
            return Err(ctx(format!(
                "base channels {} not divisible by multiple {}",
                self.base_channels, self.channel_multiple
            )));
        }
        if self.stride == Some(0) {
            return Err(ctx("stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub stem_channels: usize,
    #[serde(default = "one")]
    pub stem_stride: usize,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    pub input_resolution: usize,
}

fn one() -> usize {
    1
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("search space needs at least one stage".into()));
        }
        if self.stem_channels == 0 || self.stem_stride == 0 {
            return Err(Error::Config("stem channels and stride must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate(i)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let space: SearchSpace = serde_json::from_str(text)?;
        space.validate()?;
        Ok(space)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("search space serializes")
    }

    /// The four-stage space built on a ResNet-48 backbone (3×3 stem, basic blocks).
    pub fn resnet48_track1() -> Self {
        let ratios = vec![1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7];
        let stage = |base: usize, depths: Vec<usize>, stride: usize| StageSpec {
            base_channels: base,
            depth_choices: depths,
            ratios: ratios.clone(),
            channel_multiple: 8,
            stride: Some(stride),
        };
        SearchSpace {
            name: Some("resnet48-track1".into()),
            stem_channels: 64,
            stem_stride: 2,
            stages: vec![
                stage(64, vec![2, 3, 4, 5], 1),
                stage(128, vec![2, 3, 4, 5], 2),
                stage(256, vec![2, 3, 4, 5, 6, 7, 8], 2),
                stage(512, vec![2, 3, 4, 5], 2),
            ],
            num_classes: 1000,
            input_resolution: 224,
        }
    }

    /// Two-stage desk-scale space: candidates {4,6,8} and {8,12,16}, depths {1,2}.
    pub fn desk_small() -> Self {
        let stage = |base: usize| StageSpec {
            base_channels: base,
            depth_choices: vec![1, 2],
            ratios: vec![1.0, 0.75, 0.5],
            channel_multiple: 2,
            stride: None,
        };
        SearchSpace {
            name: Some("desk-small".into()),
            stem_channels: 8,
            stem_stride: 2,
            stages: vec![stage(8), stage(16)],
            num_classes: 10,
            input_resolution: 32,
        }
    }

    pub fn stage_stride(&self, stage: usize) -> usize {
        self.stages[stage]
            .stride
            .unwrap_or(if stage == 0 { 1 } else { 2 })
    }

    pub fn candidates(&self, stage: usize) -> Vec<usize> {
        self.stages[stage].candidate_channels()
    }

    pub fn all_candidates(&self) -> Vec<Vec<usize>> {
        self.stages.iter().map(StageSpec::candidate_channels).collect()
    }

    /// Number of distinct architectures, `None` on u128 overflow.
    pub fn space_size(&self) -> Option<u128> {
        let mut total: u128 = 1;
        for s in &self.stages {
            let n = s.candidate_channels().len() as u128;
            let mut per_depth: u128 = 0;
            for &d in &s.depth_choices {
                per_depth = per_depth.checked_add(n.checked_pow(d as u32)?)?;
            }
            total = total.checked_mul(n.checked_mul(per_depth)?)?;
        }
        Some(total)
    }

    pub fn largest_arch(&self) -> Architecture {
        Architecture {
            stages: self
                .stages
                .iter()
                .map(|s| {
                    let top = s.candidate_channels().len() - 1;
                    StageChoice {
                        depth: s.max_depth(),
                        out_idx: top,
                        mid_idx: vec![top; s.max_depth()],
                    }
                })
                .collect(),
        }
    }

    pub fn smallest_arch(&self) -> Architecture {
        Architecture {
            stages: self
                .stages
                .iter()
                .map(|s| StageChoice {
                    depth: s.min_depth(),
                    out_idx: 0,
                    mid_idx: vec![0; s.min_depth()],
                })
                .collect(),
        }
    }

    /// Every architecture in canonical order; fails when the space exceeds `limit`.
    pub fn enumerate(&self, limit: usize) -> Result<Vec<Architecture>> {
        let size = self.space_size().unwrap_or(u128::MAX);
        if size > limit as u128 {
            return Err(Error::Config(format!(
                "space has {size} architectures, more than the enumeration limit {limit}"
            )));
        }
        let per_stage: Vec<Vec<StageChoice>> = self
            .stages
            .iter()
            .map(|s| {
                let n = s.candidate_channels().len();
                let mut out = Vec::new();
                for &d in &s.depth_choices {
                    for o in 0..n {
                        for code in 0..n.pow(d as u32) {
                            let mut mid = Vec::with_capacity(d);
                            let mut c = code;
                            for _ in 0..d {
                                mid.push(c % n);
                                c /= n;
                            }
                            mid.reverse();
                            out.push(StageChoice {
                                depth: d,
                                out_idx: o,
                                mid_idx: mid,
                            });
                        }
                    }
                }
                out
            })
            .collect();
        let mut archs = vec![Architecture { stages: Vec::new() }];
        for choices in &per_stage {
            let mut next = Vec::with_capacity(archs.len() * choices.len());
            for a in &archs {
                for c in choices {
                    let mut stages = a.stages.clone();
                    stages.push(c.clone());
                    next.push(Architecture { stages });
                }
            }
            archs = next;
        }
        Ok(archs)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializes")))
    }
}

/// One stage's choice: depth, the shared second-conv width, and per-block first-conv widths.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StageChoice {
    pub depth: usize,
    pub out_idx: usize,
    pub mid_idx: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Architecture {
    pub stages: Vec<StageChoice>,
}

impl Architecture {
    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        if self.stages.len() != space.stages.len() {
            return Err(Error::Config(format!(
                "architecture has {} stages, space has {}",
                self.stages.len(),
                space.stages.len()
            )));
        }
        for (i, (c, s)) in self.stages.iter().zip(&space.stages).enumerate() {
            let n = s.candidate_channels().len();
            if !s.depth_choices.contains(&c.depth) {
                return Err(Error::Config(format!("stage {}: depth {} not a choice", i + 1, c.depth)));
            }
            if c.mid_idx.len() != c.depth {
                return Err(Error::Config(format!(
                    "stage {}: {} mid widths for depth {}",
                    i + 1,
                    c.mid_idx.len(),
                    c.depth
                )));
            }
            if c.out_idx >= n || c.mid_idx.iter().any(|&m| m >= n) {
                return Err(Error::Config(format!("stage {}: channel index out of range", i + 1)));
            }
        }
        Ok(())
    }

    pub fn out_channels(&self, space: &SearchSpace, stage: usize) -> usize {
        space.candidates(stage)[self.stages[stage].out_idx]
    }

    pub fn mid_channels(&self, space: &SearchSpace, stage: usize) -> Vec<usize> {
        let cands = space.candidates(stage);
        self.stages[stage].mid_idx.iter().map(|&m| cands[m]).collect()
    }

    /// Canonical text form: `d{depth}:o{out}:m{m1,m2,...}` per stage, joined by `;`.
    pub fn encode(&self, space: &SearchSpace) -> String {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let cands = space.candidates(i);
                let mids: Vec<String> = c.mid_idx.iter().map(|&m| cands[m].to_string()).collect();
                format!("d{}:o{}:m{}", c.depth, cands[c.out_idx], mids.join("-"))
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn decode(text: &str, space: &SearchSpace) -> Result<Self> {
        let parts: Vec<&str> = text.trim().split(';').collect();
        if parts.len() != space.stages.len() {
            return Err(Error::Parse {
                field: "architecture".into(),
                msg: format!("{} stages given, space has {}", parts.len(), space.stages.len()),
            });
        }
        let mut stages = Vec::with_capacity(parts.len());
        for (i, (part, spec)) in parts.iter().zip(&space.stages).enumerate() {
            let err = |field: &str, msg: String| Error::Parse {
                field: format!("stage {} {field}", i + 1),
                msg,
            };
            let cands = spec.candidate_channels();
            let fields: Vec<&str> = part.split(':').collect();
            let [d, o, m] = fields[..] else {
                return Err(err("layout", format!("expected d..:o..:m.., got {part:?}")));
            };
            let depth: usize = d
                .strip_prefix('d')
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err("depth", format!("malformed {d:?}")))?;
            if !spec.depth_choices.contains(&depth) {
                return Err(err("depth", format!("{depth} not in {:?}", spec.depth_choices)));
            }
            let index_of = |field: &str, v: &str| -> Result<usize> {
                let ch: usize = v.parse().map_err(|_| err(field, format!("malformed {v:?}")))?;
                cands
                    .iter()
                    .position(|&c| c == ch)
                    .ok_or_else(|| err(field, format!("{ch} not in {cands:?}")))
            };
            let out = o
                .strip_prefix('o')
                .ok_or_else(|| err("out", format!("malformed {o:?}")))?;
            let out_idx = index_of("out", out)?;
            let mids = m
                .strip_prefix('m')
                .ok_or_else(|| err("mid", format!("malformed {m:?}")))?;
            let mid_idx = mids
                .split('-')
                .map(|v| index_of("mid", v))
                .collect::<Result<Vec<_>>>()?;
            if mid_idx.len() != depth {
                return Err(err(
                    "mid",
                    format!("{} widths for depth {depth}", mid_idx.len()),
                ));
            }
            stages.push(StageChoice {
                depth,
                out_idx,
                mid_idx,
            });
        }
        Ok(Architecture { stages })
    }

    /// Stable 64-bit digest of the architecture, used to derive per-architecture seeds.
    pub fn digest(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("serializes");
        let h = Sha256::digest(bytes);
        u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
    }
}

impl fmt::Display for StageChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}:o#{}:m#{:?}", self.depth, self.out_idx, self.mid_idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAPER_RATIOS: [f64; 7] = [1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7];

    #[test]
    fn rounding_reproduces_printed_channels() {
        assert_eq!(round_channels(128, 1.0, 8), 128);
        let mut set: Vec<usize> = PAPER_RATIOS.iter().map(|&r| round_channels(128, r, 8)).collect();
        set.sort_unstable();
        set.dedup();
        assert_eq!(set, vec![88, 96, 104, 112, 120, 128]);
        assert_eq!(round_channels(512, 0.8, 8), 408);
        assert_eq!(round_channels(512, 0.85, 8), 432);
        assert_eq!(round_channels(512, 0.9, 8), 464);
    }

    #[test]
    fn rounding_never_drops_below_multiple() {
        assert_eq!(round_channels(8, 0.1, 8), 8);
    }

    #[test]
    fn candidate_sets() {
        let space = SearchSpace::resnet48_track1();
        assert_eq!(space.candidates(0), vec![48, 56, 64]);
        let s3 = space.candidates(2);
        assert_eq!(s3.len(), 7);
        for c in [192, 208, 216, 232] {
            assert!(s3.contains(&c));
        }
        let desk = SearchSpace::desk_small();
        assert_eq!(desk.candidates(0), vec![4, 6, 8]);
        assert_eq!(desk.candidates(1), vec![8, 12, 16]);
        let counts: Vec<usize> = space.all_candidates().iter().map(Vec::len).collect();
        assert_eq!(counts, vec![3, 6, 7, 7]);
    }

    #[test]
    fn space_sizes() {
        let mut one_stage = SearchSpace::resnet48_track1();
        one_stage.stages.truncate(1);
        assert_eq!(one_stage.space_size(), Some(1080));
        assert_eq!(one_stage.enumerate(2000).unwrap().len(), 1080);
        let desk = SearchSpace::desk_small();
        assert_eq!(desk.space_size(), Some(1296));
        let all = desk.enumerate(10_000).unwrap();
        assert_eq!(all.len(), 1296);
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 1296);
        assert!(SearchSpace::resnet48_track1().space_size().is_some());
    }

    #[test]
    fn singleton_space_has_one_architecture() {
        let space = SearchSpace {
            name: None,
            stem_channels: 4,
            stem_stride: 1,
            stages: vec![StageSpec {
                base_channels: 4,
                depth_choices: vec![1],
                ratios: vec![1.0],
                channel_multiple: 2,
                stride: None,
            }],
            num_classes: 2,
            input_resolution: 8,
        };
        assert_eq!(space.space_size(), Some(1));
    }

    #[test]
    fn extreme_architectures() {
        let space = SearchSpace::resnet48_track1();
        let big = space.largest_arch();
        let depths: Vec<usize> = big.stages.iter().map(|s| s.depth).collect();
        assert_eq!(depths, vec![5, 5, 8, 5]);
        for (i, _) in space.stages.iter().enumerate() {
            assert_eq!(big.out_channels(&space, i), space.stages[i].base_channels);
        }
        let small = space.smallest_arch();
        assert!(small.stages.iter().all(|s| s.depth == 2 && s.out_idx == 0));
        let desk = SearchSpace::desk_small();
        let big = desk.largest_arch();
        assert_eq!((big.stages[0].depth, big.stages[1].depth), (2, 2));
        assert_eq!((big.out_channels(&desk, 0), big.out_channels(&desk, 1)), (8, 16));
    }

    #[test]
    fn encode_smallest_desk() {
        let desk = SearchSpace::desk_small();
        assert_eq!(desk.smallest_arch().encode(&desk), "d1:o4:m4;d1:o8:m8");
    }

    #[test]
    fn decode_errors_name_the_field() {
        let desk = SearchSpace::desk_small();
        match Architecture::decode("d9:o4:m4;d1:o8:m8", &desk) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "stage 1 depth"),
            other => panic!("unexpected {other:?}"),
        }
        match Architecture::decode("d1:o4:m4;d1:o10:m8", &desk) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "stage 2 out"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Architecture::decode("garbage", &desk).is_err());
        assert!(Architecture::decode("d2:o4:m4;d1:o8:m8", &desk).is_err());
    }

    #[test]
    fn validation_rejects_bad_stage() {
        let mut space = SearchSpace::desk_small();
        space.stages[0].ratios.push(1.5);
        assert!(space.validate().is_err());
        let mut space = SearchSpace::desk_small();
        space.stages[0].base_channels = 9;
        assert!(space.validate().is_err());
    }
}
