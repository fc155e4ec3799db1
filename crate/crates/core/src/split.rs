//! Few-shot group planning: partitions of each stage's out-width candidates, the peel step,
//! weight-inheritance copy maps, and per-group learning-rate multipliers.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::SearchSpace;
use crate::supernet::{layout, Owner};

/// Which candidate leaves the entangled group at each split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeelOrder {
    #[default]
    Descending,
    Ascending,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEvent {
    /// Group count after this split.
    pub g: usize,
    /// Zero-based stage index.
    pub stage: usize,
    pub peeled: usize,
    /// Label (largest candidate) of the group that owned `peeled` before the split.
    pub source_group: usize,
}

/// Per-stage partition of out-width candidates into weight groups.
///
/// Within a stage, groups are ordered by descending largest candidate; a group is
/// identified by that largest candidate (its label) in tensor names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPlan {
    pub g: usize,
    pub order: PeelOrder,
    pub stages: Vec<Vec<Vec<usize>>>,
    pub history: Vec<SplitEvent>,
}

impl GroupPlan {
    /// One group per stage holding every candidate.
    pub fn initial(space: &SearchSpace) -> Self {
        Self::initial_with_order(space, PeelOrder::Descending)
    }

    pub fn initial_with_order(space: &SearchSpace, order: PeelOrder) -> Self {
        GroupPlan {
            g: 1,
            order,
            stages: space.all_candidates().into_iter().map(|c| vec![c]).collect(),
            history: Vec::new(),
        }
    }

    /// Largest `g` reachable: the largest per-stage candidate count.
    pub fn max_groups(space: &SearchSpace) -> usize {
        space.all_candidates().iter().map(Vec::len).max().unwrap_or(1)
    }

    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        if self.stages.len() != space.stages.len() {
            return Err(Error::Config(format!(
                "plan has {} stages, space has {}",
                self.stages.len(),
                space.stages.len()
            )));
        }
        for (s, groups) in self.stages.iter().enumerate() {
            let cands = space.candidates(s);
            let mut union: Vec<usize> = groups.iter().flatten().copied().collect();
            union.sort_unstable();
            if groups.iter().any(Vec::is_empty) || union != cands {
                return Err(Error::Config(format!(
                    "stage {}: groups {groups:?} do not partition {cands:?}",
                    s + 1
                )));
            }
            if groups.len() != self.g.min(cands.len()) {
                return Err(Error::Config(format!(
                    "stage {}: {} groups at g={}",
                    s + 1,
                    groups.len(),
                    self.g
                )));
            }
            if groups.windows(2).any(|w| group_label(&w[0]) <= group_label(&w[1])) {
                return Err(Error::Config(format!(
                    "stage {}: groups must be ordered by descending largest candidate",
                    s + 1
                )));
            }
        }
        Ok(())
    }

    /// Peels one candidate out of each stage's entangled group into a singleton.
    pub fn next_split(&self, space: &SearchSpace) -> Result<GroupPlan> {
        let max = Self::max_groups(space);
        if self.g >= max {
            return Err(Error::State(format!("already at the maximum of {max} groups")));
        }
        let mut next = self.clone();
        next.g += 1;
        for (s, groups) in next.stages.iter_mut().enumerate() {
            let Some(pos) = groups.iter().position(|g| g.len() > 1) else {
                continue;
            };
            let source = group_label(&groups[pos]);
            let set = &mut groups[pos];
            let peeled = match self.order {
                PeelOrder::Descending => set.pop().expect("non-empty"),
                PeelOrder::Ascending => set.remove(0),
            };
            groups.push(vec![peeled]);
            groups.sort_by_key(|g| std::cmp::Reverse(group_label(g)));
            next.history.push(SplitEvent {
                g: next.g,
                stage: s,
                peeled,
                source_group: source,
            });
        }
        Ok(next)
    }

    /// Index of the group in `stage` owning out-width `channels`.
    pub fn route_channel(&self, stage: usize, channels: usize) -> Option<usize> {
        self.stages[stage].iter().position(|g| g.contains(&channels))
    }

    pub fn group_label(&self, stage: usize, group: usize) -> usize {
        group_label(&self.stages[stage][group])
    }

    pub fn group_counts(&self) -> Vec<usize> {
        self.stages.iter().map(Vec::len).collect()
    }
}

pub(crate) fn group_label(set: &[usize]) -> usize {
    *set.iter().max().expect("groups are non-empty")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyRecord {
    pub dest: String,
    pub source: String,
    /// Leading extent copied along each axis (equals the destination shape).
    pub prefix: Vec<usize>,
}

/// One copy record per tensor of the post-split super-net.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InheritanceMap {
    pub records: Vec<CopyRecord>,
}

/// How each tensor of `new_plan` is initialized from `old_plan`'s super-net.
///
/// A new group copies from the old group that owned its largest candidate: a freshly
/// peeled singleton copies the prefix of the group it left, and the shrunken entangled
/// group copies the prefix of its former self.
pub fn inheritance_map(old_plan: &GroupPlan, new_plan: &GroupPlan, space: &SearchSpace) -> Result<InheritanceMap> {
    let adjacent = old_plan.next_split(space).map(|p| &p == new_plan).unwrap_or(false);
    if !adjacent {
        return Err(Error::Usage(format!(
            "plans at g={} and g={} are not adjacent splits",
            old_plan.g, new_plan.g
        )));
    }
    let old_names: BTreeMap<String, Vec<usize>> = layout(space, old_plan)
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    let mut records = Vec::new();
    for t in layout(space, new_plan) {
        let source = match t.owner {
            Owner::Shared => t.name.clone(),
            Owner::Stage { stage, group } | Owner::Head { stage, group } => {
                let label = new_plan.group_label(stage, group);
                let src_group = old_plan
                    .route_channel(stage, label)
                    .ok_or_else(|| Error::State(format!("candidate {label} missing from old plan")))?;
                let src_label = old_plan.group_label(stage, src_group);
                relabel(&t.name, label, src_label)
            }
        };
        let src_shape = old_names
            .get(&source)
            .ok_or_else(|| Error::State(format!("source tensor {source} missing")))?;
        if src_shape.len() != t.shape.len() || src_shape.iter().zip(&t.shape).any(|(s, d)| d > s) {
            return Err(Error::State(format!(
                "{} {:?} does not fit in {} {:?}",
                t.name, t.shape, source, src_shape
            )));
        }
        records.push(CopyRecord {
            dest: t.name,
            source,
            prefix: t.shape,
        });
    }
    Ok(InheritanceMap { records })
}

fn relabel(name: &str, from: usize, to: usize) -> String {
    let (head, rest) = name.split_once('.').expect("group tensors are dotted");
    let (group, tail) = rest.split_once('.').expect("group tensors are dotted");
    debug_assert_eq!(group, format!("g{from}"));
    format!("{head}.g{to}.{tail}")
}

/// Module a learning-rate multiplier applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrModule {
    Stage,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrEntry {
    pub module: LrModule,
    /// Zero-based stage index (the last stage for classifier heads).
    pub stage: usize,
    pub group: usize,
    pub channels: Vec<usize>,
    pub multiplier: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrPlan {
    pub g: usize,
    pub entries: Vec<LrEntry>,
}

impl LrPlan {
    pub fn multiplier(&self, module: LrModule, stage: usize, group: usize) -> f32 {
        self.entries
            .iter()
            .find(|e| e.module == module && e.stage == stage && e.group == group)
            .map(|e| e.multiplier)
            .unwrap_or(1.0)
    }

    /// All-ones plan (one-shot training).
    pub fn uniform(plan: &GroupPlan) -> Self {
        build_lr_plan(plan, |_, _| 1.0)
    }

    /// CSV with columns `group,stage,channels,multiplier`; stages are 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,stage,channels,multiplier\n");
        for e in self.entries.iter().filter(|e| e.module == LrModule::Stage) {
            let chans: Vec<String> = e.channels.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{},{},{},{}", self.g, e.stage + 1, chans.join(" "), e.multiplier);
        }
        out
    }
}

/// A row of a preset multiplier table: at group count `g`, the group holding `channels`
/// in (1-based) `stage` trains at `multiplier`× the base LR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetRow {
    pub g: usize,
    pub stage: usize,
    pub channels: usize,
    pub multiplier: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrPreset {
    pub rows: Vec<PresetRow>,
    /// Fail instead of falling back to the inverse-probability rule for unlisted `g`.
    #[serde(default)]
    pub strict: bool,
}

impl LrPreset {
    /// Per-group multiplier table for the four-stage ResNet-48 space.
    pub fn table2() -> Self {
        let rows = [
            (2, 1, 64, 2.0),
            (2, 2, 128, 5.0),
            (2, 3, 256, 6.0),
            (2, 4, 512, 6.0),
            (3, 2, 112, 4.0),
            (3, 3, 232, 5.0),
            (3, 4, 464, 5.0),
            (4, 2, 104, 3.0),
            (4, 3, 216, 4.0),
            (4, 4, 432, 4.0),
            (5, 2, 96, 3.0),
            (5, 3, 208, 4.0),
            (5, 4, 408, 4.0),
            (6, 2, 88, 3.0),
            (6, 3, 192, 4.0),
            (6, 4, 384, 4.0),
        ]
        .into_iter()
        .map(|(g, stage, channels, multiplier)| PresetRow {
            g,
            stage,
            channels,
            multiplier,
        })
        .collect();
        LrPreset { rows, strict: false }
    }

    /// Multiplier listed for (`g`, 1-based `stage`), if any.
    pub fn lookup(&self, g: usize, stage: usize) -> Option<(usize, f32)> {
        self.rows
            .iter()
            .find(|r| r.g == g && r.stage == stage)
            .map(|r| (r.channels, r.multiplier))
    }

    fn covers(&self, g: usize) -> bool {
        self.rows.iter().any(|r| r.g == g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum LrRule {
    InverseProb { cap: f32 },
    Preset(LrPreset),
}

impl Default for LrRule {
    fn default() -> Self {
        LrRule::InverseProb { cap: 8.0 }
    }
}

/// `max(1, round(n/k))` for a group holding `k` of `n` candidates, capped.
pub fn inverse_prob_multiplier(n: usize, k: usize, cap: f32) -> f32 {
    ((n as f32 / k as f32).round()).clamp(1.0, cap.max(1.0))
}

/// Per-group multipliers; classifier heads follow their last-stage group.
pub fn lr_multipliers(plan: &GroupPlan, rule: &LrRule, space: &SearchSpace) -> Result<LrPlan> {
    plan.validate(space)?;
    let inverse = |cap: f32| {
        move |stage: usize, group: usize| {
            let n = plan.stages[stage].iter().map(Vec::len).sum::<usize>();
            inverse_prob_multiplier(n, plan.stages[stage][group].len(), cap)
        }
    };
    match rule {
        LrRule::InverseProb { cap } => Ok(build_lr_plan(plan, inverse(*cap))),
        LrRule::Preset(preset) => {
            if plan.g == 1 {
                return Ok(LrPlan::uniform(plan));
            }
            if !preset.covers(plan.g) {
                if preset.strict {
                    return Err(Error::Config(format!("preset has no rows for g={}", plan.g)));
                }
                return Ok(build_lr_plan(plan, inverse(8.0)));
            }
            Ok(build_lr_plan(plan, |stage, group| {
                match preset.lookup(plan.g, stage + 1) {
                    Some((ch, m)) if plan.stages[stage][group].contains(&ch) => m,
                    _ => 1.0,
                }
            }))
        }
    }
}

fn build_lr_plan(plan: &GroupPlan, mult: impl Fn(usize, usize) -> f32) -> LrPlan {
    let mut entries = Vec::new();
    for (s, groups) in plan.stages.iter().enumerate() {
        for (g, set) in groups.iter().enumerate() {
            entries.push(LrEntry {
                module: LrModule::Stage,
                stage: s,
                group: g,
                channels: set.clone(),
                multiplier: mult(s, g),
            });
        }
    }
    let last = plan.stages.len() - 1;
    for (g, set) in plan.stages[last].iter().enumerate() {
        entries.push(LrEntry {
            module: LrModule::Classifier,
            stage: last,
            group: g,
            channels: set.clone(),
            multiplier: mult(last, g),
        });
    }
    LrPlan { g: plan.g, entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_plans() {
        let space = SearchSpace::resnet48_track1();
        let plan = GroupPlan::initial(&space);
        assert_eq!(plan.group_counts(), vec![1, 1, 1, 1]);
        assert_eq!(plan.stages[1][0].len(), 6);
        assert!(plan.history.is_empty());
        let desk = GroupPlan::initial(&SearchSpace::desk_small());
        assert_eq!(desk.stages, vec![vec![vec![4, 6, 8]], vec![vec![8, 12, 16]]]);
    }

    #[test]
    fn first_split_peels_largest() {
        let space = SearchSpace::resnet48_track1();
        let p2 = GroupPlan::initial(&space).next_split(&space).unwrap();
        assert_eq!(p2.stages[1], vec![vec![128], vec![88, 96, 104, 112, 120]]);
        assert_eq!(p2.route_channel(1, 128), Some(0));
        assert_eq!(p2.route_channel(1, 96), Some(1));
        p2.validate(&space).unwrap();
    }

    #[test]
    fn split_to_the_end() {
        let space = SearchSpace::resnet48_track1();
        let mut plan = GroupPlan::initial(&space);
        let mut counts = vec![plan.group_counts()];
        while plan.g < GroupPlan::max_groups(&space) {
            plan = plan.next_split(&space).unwrap();
            plan.validate(&space).unwrap();
            counts.push(plan.group_counts());
        }
        assert_eq!(plan.g, 7);
        assert_eq!(plan.group_counts(), vec![3, 6, 7, 7]);
        assert_eq!(counts[3][0], 3);
        assert_eq!(counts[2][0], 3);
        assert!(matches!(plan.next_split(&space), Err(Error::State(_))));
        let full = plan.route_channel(1, 104).unwrap();
        assert_eq!(plan.stages[1][full], vec![104]);
    }

    #[test]
    fn ascending_order_peels_smallest() {
        let space = SearchSpace::desk_small();
        let plan = GroupPlan::initial_with_order(&space, PeelOrder::Ascending)
            .next_split(&space)
            .unwrap();
        assert_eq!(plan.stages[0], vec![vec![6, 8], vec![4]]);
    }

    #[test]
    fn table2_preset_lookup() {
        let preset = LrPreset::table2();
        assert_eq!(preset.lookup(3, 2), Some((112, 4.0)));
        assert_eq!(preset.lookup(7, 2), None);
    }

    #[test]
    fn inverse_prob_rule() {
        assert_eq!(inverse_prob_multiplier(6, 1, 8.0), 6.0);
        assert_eq!(inverse_prob_multiplier(6, 5, 8.0), 1.0);
        assert_eq!(inverse_prob_multiplier(20, 1, 8.0), 8.0);
        let space = SearchSpace::desk_small();
        let one = lr_multipliers(&GroupPlan::initial(&space), &LrRule::default(), &space).unwrap();
        assert!(one.entries.iter().all(|e| e.multiplier == 1.0));
    }

    #[test]
    fn preset_rule_on_reference_space() {
        let space = SearchSpace::resnet48_track1();
        let mut plan = GroupPlan::initial(&space);
        for _ in 0..2 {
            plan = plan.next_split(&space).unwrap();
        }
        let lr = lr_multipliers(&plan, &LrRule::Preset(LrPreset::table2()), &space).unwrap();
        let g112 = plan.route_channel(1, 112).unwrap();
        assert_eq!(lr.multiplier(LrModule::Stage, 1, g112), 4.0);
        let g128 = plan.route_channel(1, 128).unwrap();
        assert_eq!(lr.multiplier(LrModule::Stage, 1, g128), 1.0);
        let g464 = plan.route_channel(3, 464).unwrap();
        assert_eq!(lr.multiplier(LrModule::Classifier, 3, g464), 5.0);
        let mut strict = LrPreset::table2();
        strict.strict = true;
        while plan.g < 7 {
            plan = plan.next_split(&space).unwrap();
        }
        assert!(lr_multipliers(&plan, &LrRule::Preset(strict), &space).is_err());
    }
}
