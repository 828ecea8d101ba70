//! Class-balancing generation planner.
//!
//! Builds the class → images map, orders every list by how few classes each
//! image carries, then walks classes in ascending id order and schedules
//! regenerations of real seed images until every class reaches `n_balance`.
//! Only the class being balanced has its tally advanced by a scheduled image.
//! The planner never performs generation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassId, DatasetIndex, Origin};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("n_balance must be at least 1")]
    InvalidBalance,
    #[error("target ratio must be finite and non-negative, got {0}")]
    InvalidRatio(f64),
    #[error("index is empty")]
    EmptyIndex,
    #[error("plan file line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Class → sample ids containing it.
pub type ClassMap = BTreeMap<ClassId, Vec<String>>;

pub fn build_class_map(index: &DatasetIndex) -> ClassMap {
    let mut map = ClassMap::new();
    for sample in &index.samples {
        for &class in &sample.classes {
            map.entry(class).or_default().push(sample.sample_id.clone());
        }
    }
    map
}

/// Orders each list by class-set size, then sample id.
pub fn sort_class_map(mut map: ClassMap, index: &DatasetIndex) -> ClassMap {
    let sizes: HashMap<&str, usize> = index.samples.iter().map(|s| (s.sample_id.as_str(), s.classes.len())).collect();
    for ids in map.values_mut() {
        ids.sort_by(|a, b| {
            let (sa, sb) = (sizes.get(a.as_str()), sizes.get(b.as_str()));
            sa.cmp(&sb).then_with(|| a.cmp(b))
        });
    }
    map
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub output_id: String,
    pub seed_id: String,
    pub target_class: ClassId,
    pub pass_index: u32,
}

/// What a plan was made from; stored next to the entry file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanMeta {
    pub n_balance: u32,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationPlan {
    pub entries: Vec<PlanEntry>,
    pub n_balance: u32,
    pub fingerprint: String,
    /// Deficient classes that had no real image to seed from.
    pub skipped_classes: Vec<ClassId>,
}

impl GenerationPlan {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn meta(&self) -> PlanMeta {
        PlanMeta { n_balance: self.n_balance, fingerprint: self.fingerprint.clone() }
    }

    /// JSON Lines, one entry per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            let _ = writeln!(out, "{}", serde_json::to_string(entry).expect("entry serializes"));
        }
        out
    }

    pub fn from_jsonl(meta: PlanMeta, text: &str) -> Result<Self, PlanError> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| PlanError::Parse { line: i + 1, reason: e.to_string() }))
            .collect::<Result<Vec<PlanEntry>, _>>()?;
        Ok(Self { entries, n_balance: meta.n_balance, fingerprint: meta.fingerprint, skipped_classes: Vec::new() })
    }
}

pub fn output_id(seed_id: &str, sequence: usize) -> String {
    format!("{seed_id}_g{sequence}")
}

pub fn make_plan(index: &DatasetIndex, n_balance: u32) -> Result<GenerationPlan, PlanError> {
    if n_balance < 1 {
        return Err(PlanError::InvalidBalance);
    }
    let map = sort_class_map(build_class_map(index), index);
    let real: HashMap<&str, bool> =
        index.samples.iter().map(|s| (s.sample_id.as_str(), s.origin == Origin::Real)).collect();
    let target = n_balance as usize;

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for class in index.schema.foreground().filter(|c| !map.contains_key(c)) {
        log::info!("class {class} has no images; cannot balance it");
        skipped.push(class);
    }
    for (&class, members) in &map {
        let mut tally = members.len();
        if tally >= target {
            continue;
        }
        let seeds: Vec<&String> = members.iter().filter(|id| real[id.as_str()]).collect();
        if seeds.is_empty() {
            log::warn!("class {class} has no real seed images; skipping");
            skipped.push(class);
            continue;
        }
        let mut pass = 0;
        'balance: while tally < target {
            pass += 1;
            for seed in &seeds {
                entries.push(PlanEntry {
                    output_id: output_id(seed, entries.len() + 1),
                    seed_id: (*seed).clone(),
                    target_class: class,
                    pass_index: pass,
                });
                tally += 1;
                if tally >= target {
                    break 'balance;
                }
            }
        }
    }
    skipped.sort();
    Ok(GenerationPlan { entries, n_balance, fingerprint: index.fingerprint(), skipped_classes: skipped })
}

/// Image counts of the classes that have at least one real seed.
fn seedable_tallies(index: &DatasetIndex) -> Vec<usize> {
    let map = build_class_map(index);
    let real: HashMap<&str, bool> =
        index.samples.iter().map(|s| (s.sample_id.as_str(), s.origin == Origin::Real)).collect();
    map.values().filter(|ids| ids.iter().any(|id| real[id.as_str()])).map(Vec::len).collect()
}

fn size_for(tallies: &[usize], n: usize) -> usize {
    tallies.iter().map(|&t| n.saturating_sub(t)).sum()
}

/// Number of entries `make_plan(index, n)` emits, without building it.
pub fn plan_size(index: &DatasetIndex, n_balance: u32) -> usize {
    size_for(&seedable_tallies(index), n_balance as usize)
}

/// Smallest-error `n_balance` for a plan of about `target_ratio * |index|`
/// entries. Values below the smallest seedable class count all give an empty
/// plan, so the search starts there; ties go to the smaller `n`.
pub fn auto_n_balance(index: &DatasetIndex, target_ratio: f64) -> Result<u32, PlanError> {
    if !(target_ratio.is_finite() && target_ratio >= 0.0) {
        return Err(PlanError::InvalidRatio(target_ratio));
    }
    if index.is_empty() {
        return Err(PlanError::EmptyIndex);
    }
    let tallies = seedable_tallies(index);
    let Some(&min_tally) = tallies.iter().min() else {
        return Ok(1);
    };
    let target = target_ratio * index.len() as f64;
    let lower = min_tally.max(1);
    let error = |n: usize| (size_for(&tallies, n) as f64 - target).abs();

    // plan size is non-decreasing and grows by >= 1 per step once n exceeds
    // every tally, so this terminates.
    let mut n = lower;
    while (size_for(&tallies, n) as f64) < target {
        n += 1;
    }
    if n > lower && error(n - 1) <= error(n) {
        n -= 1;
    }
    Ok(n as u32)
}

/// Per-class tallies after replaying `plan` with the planner's accounting:
/// every entry advances only its target class.
pub fn replay_tallies(plan: &GenerationPlan, index: &DatasetIndex) -> BTreeMap<ClassId, usize> {
    let mut tallies: BTreeMap<ClassId, usize> =
        build_class_map(index).into_iter().map(|(c, ids)| (c, ids.len())).collect();
    for entry in &plan.entries {
        *tallies.entry(entry.target_class).or_default() += 1;
    }
    tallies
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::{ClassDef, LabelMask, LabelSchema, SegSample};
    use std::collections::BTreeSet;
    use std::path::PathBuf;

    pub(crate) fn toy_schema(n: u8) -> LabelSchema {
        let classes = (0..=n)
            .map(|i| ClassDef { id: ClassId(i), name: if i == 0 { "background".into() } else { format!("c{i}") } })
            .collect();
        LabelSchema::new(classes, Default::default()).unwrap()
    }

    pub(crate) fn toy_index(samples: &[(&str, &[u8])], n_classes: u8) -> DatasetIndex {
        let samples = samples
            .iter()
            .map(|(id, classes)| SegSample {
                sample_id: id.to_string(),
                image_path: PathBuf::new(),
                mask_path: PathBuf::new(),
                mask: LabelMask::filled(1, 1, 0).unwrap(),
                classes: classes.iter().map(|&c| ClassId(c)).collect::<BTreeSet<_>>(),
                origin: Origin::Real,
                caption: None,
            })
            .collect();
        DatasetIndex { schema: toy_schema(n_classes), samples, root: PathBuf::new(), split: "train".into() }
    }

    /// I1{A}, I2{A,B}, I3{B,C} with A=1, B=2, C=3.
    pub(crate) fn three_image_index() -> DatasetIndex {
        toy_index(&[("I1", &[1]), ("I2", &[1, 2]), ("I3", &[2, 3])], 3)
    }

    #[test]
    fn class_map_membership() {
        let index = three_image_index();
        let m = build_class_map(&index);
        assert_eq!(m[&ClassId(1)], vec!["I1", "I2"]);
        assert_eq!(m[&ClassId(2)], vec!["I2", "I3"]);
        assert_eq!(m[&ClassId(3)], vec!["I3"]);
    }

    #[test]
    fn empty_sample_appears_nowhere() {
        let index = toy_index(&[("E", &[]), ("I1", &[1])], 1);
        let m = build_class_map(&index);
        assert!(m.values().all(|ids| !ids.contains(&"E".to_string())));
    }

    #[test]
    fn sorting_by_class_count_then_id() {
        let index = toy_index(&[("I2", &[1, 2]), ("I1", &[1]), ("I3", &[1, 3])], 3);
        let m = sort_class_map(build_class_map(&index), &index);
        assert_eq!(m[&ClassId(1)], vec!["I1", "I2", "I3"]);
    }

    #[test]
    fn hand_traced_plan() {
        let plan = make_plan(&three_image_index(), 3).unwrap();
        let got: Vec<(&str, &str, u8, u32)> = plan
            .entries
            .iter()
            .map(|e| (e.output_id.as_str(), e.seed_id.as_str(), e.target_class.0, e.pass_index))
            .collect();
        assert_eq!(
            got,
            vec![("I1_g1", "I1", 1, 1), ("I2_g2", "I2", 2, 1), ("I3_g3", "I3", 3, 1), ("I3_g4", "I3", 3, 2)]
        );
    }

    #[test]
    fn no_deficit_means_empty_plan() {
        let index = three_image_index();
        assert!(make_plan(&index, 1).unwrap().is_empty());
        assert!(matches!(make_plan(&index, 0), Err(PlanError::InvalidBalance)));
    }

    #[test]
    fn class_without_images_is_skipped() {
        let index = toy_index(&[("I1", &[1]), ("I2", &[1])], 2);
        let plan = make_plan(&index, 3).unwrap();
        assert_eq!(plan.len(), 1);
        assert_eq!(plan.skipped_classes, vec![ClassId(2)]);
    }

    #[test]
    fn synthetic_images_count_but_never_seed() {
        let mut index = toy_index(&[("I1", &[1]), ("S1", &[1, 2])], 2);
        index.samples[1].origin = Origin::Synthetic { seed_id: "X".into() };
        let plan = make_plan(&index, 3).unwrap();
        assert!(plan.entries.iter().all(|e| e.seed_id == "I1"));
        assert_eq!(plan.len(), 1);
        assert_eq!(plan.skipped_classes, vec![ClassId(2)]);
    }

    #[test]
    fn plan_file_round_trip() {
        let plan = make_plan(&three_image_index(), 3).unwrap();
        let text = plan.to_jsonl();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("{\"output_id\":\"I1_g1\","));
        let back = GenerationPlan::from_jsonl(plan.meta(), &text).unwrap();
        assert_eq!(back.entries, plan.entries);
        assert_eq!(back.fingerprint, plan.fingerprint);
    }

    #[test]
    fn auto_balance_on_toy() {
        let index = three_image_index();
        // exhaustive scan over n in [1, 9]
        let target = 3.0;
        let mut best = (f64::INFINITY, 0);
        for n in 1..=9u32 {
            let err = (make_plan(&index, n).unwrap().len() as f64 - target).abs();
            if err < best.0 {
                best = (err, n);
            }
        }
        assert_eq!(auto_n_balance(&index, 1.0).unwrap(), best.1);
        assert_eq!(best.1, 3);
    }

    #[test]
    fn zero_ratio_gives_min_tally() {
        let index = toy_index(&[("I1", &[1, 2]), ("I2", &[1, 2]), ("I3", &[1])], 2);
        let n = auto_n_balance(&index, 0.0).unwrap();
        assert_eq!(n, 2);
        assert!(make_plan(&index, n).unwrap().is_empty());
        assert!(auto_n_balance(&index, -1.0).is_err());
    }
}
