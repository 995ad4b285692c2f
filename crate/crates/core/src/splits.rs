//! Subject-level fold planning, slice-level splitting and leakage audits.
//!
//! Every shuffle is a seeded ChaCha stream over a sorted input, so plans are
//! a pure function of `(records, parameters, seed)`.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phantom::largest_remainder;
use crate::types::SubjectRecord;

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("class {class} has {members} subjects, fewer than k = {k}")]
    Stratum { class: String, members: usize, k: usize },
    #[error("fractions must be non-negative and sum to 1, got {0:?}")]
    Fractions(Vec<f64>),
    #[error("validation fraction must lie in [0, 1), got {0}")]
    ValFraction(f64),
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("slice list is empty")]
    EmptySlices,
    #[error("duplicate subject id `{0}`")]
    DuplicateSubject(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratifyOn {
    Binary,
    FineGrained,
}

impl StratifyOn {
    fn class_of(self, r: &SubjectRecord) -> (usize, &'static str) {
        let label = r.label();
        match self {
            StratifyOn::Binary => {
                let v = label.value();
                (v.index(), v.name())
            }
            StratifyOn::FineGrained => {
                let f = label.fine_grained();
                (f.index(), f.name())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub stratify_on: StratifyOn,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Subjects of `records` that appear in no test list, plus test entries
    /// naming subjects outside the cohort.
    pub fn coverage_gaps(&self, records: &[SubjectRecord]) -> (Vec<String>, Vec<String>) {
        let cohort: BTreeSet<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
        let tested: BTreeSet<&str> = self.folds.iter().flat_map(|f| f.test.iter().map(String::as_str)).collect();
        (
            cohort.difference(&tested).map(|s| s.to_string()).collect(),
            tested.difference(&cohort).map(|s| s.to_string()).collect(),
        )
    }
}

/// Group subject ids by stratum, each group sorted by id. Also rejects
/// duplicate ids.
fn strata<'a>(records: &'a [SubjectRecord], on: StratifyOn) -> Result<BTreeMap<(usize, &'static str), Vec<&'a str>>, SplitError> {
    let mut seen = HashSet::new();
    let mut groups: BTreeMap<(usize, &'static str), Vec<&str>> = BTreeMap::new();
    for r in records {
        if !seen.insert(r.subject_id.as_str()) {
            return Err(SplitError::DuplicateSubject(r.subject_id.clone()));
        }
        groups.entry(on.class_of(r)).or_default().push(&r.subject_id);
    }
    for ids in groups.values_mut() {
        ids.sort_unstable();
    }
    Ok(groups)
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn sorted(mut v: Vec<String>) -> Vec<String> {
    v.sort_unstable();
    v
}

/// Stratified K-fold over subjects. Within each class, ids are sorted,
/// shuffled and dealt round-robin starting at fold 0, so remainders land in
/// the lowest-index folds. For fold `i` the other folds' subjects are split
/// into train and validation per class, with `round(val_fraction * n)`
/// validation subjects per class but never fewer than one (and never all of
/// a class with two or more members).
pub fn stratified_subject_kfold(
    records: &[SubjectRecord],
    k: usize,
    seed: u64,
    val_fraction: f64,
    stratify_on: StratifyOn,
) -> Result<FoldPlan, SplitError> {
    if k < 2 {
        return Err(SplitError::InvalidK(k));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(SplitError::ValFraction(val_fraction));
    }
    if records.is_empty() {
        return Err(SplitError::EmptyCohort);
    }
    let groups = strata(records, stratify_on)?;
    for ((_, name), ids) in &groups {
        if ids.len() < k {
            return Err(SplitError::Stratum { class: name.to_string(), members: ids.len(), k });
        }
    }

    let mut deal = rng(seed, 0);
    // per class, the subjects of each fold in dealing order
    let mut dealt: Vec<Vec<Vec<&str>>> = Vec::with_capacity(groups.len());
    for ids in groups.values() {
        let mut ids = ids.clone();
        ids.shuffle(&mut deal);
        let mut per_fold = vec![Vec::new(); k];
        for (j, id) in ids.into_iter().enumerate() {
            per_fold[j % k].push(id);
        }
        dealt.push(per_fold);
    }

    let mut folds = Vec::with_capacity(k);
    for i in 0..k {
        let mut split = rng(seed, 1 + i as u64);
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for per_fold in &dealt {
            test.extend(per_fold[i].iter().map(|s| s.to_string()));
            let mut rest: Vec<&str> = per_fold.iter().enumerate().filter(|&(j, _)| j != i).flat_map(|(_, v)| v.iter().copied()).collect();
            rest.sort_unstable();
            rest.shuffle(&mut split);
            let n = rest.len();
            let mut n_val = ((val_fraction * n as f64).round() as usize).max(1);
            if n >= 2 {
                n_val = n_val.min(n - 1);
            }
            let n_val = n_val.min(n);
            val.extend(rest[..n_val].iter().map(|s| s.to_string()));
            train.extend(rest[n_val..].iter().map(|s| s.to_string()));
        }
        folds.push(Fold { train: sorted(train), val: sorted(val), test: sorted(test) });
    }
    Ok(FoldPlan { k, seed, stratify_on, folds })
}

fn check_fractions(fractions: &[f64; 3]) -> Result<(), SplitError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(SplitError::Fractions(fractions.to_vec()));
    }
    Ok(())
}

/// Single train/val/test split, stratified per class with largest-remainder
/// rounding (ties to the earlier partition). `fractions` is ordered
/// `(train, val, test)`. Returned as a one-fold plan plus warnings for
/// classes of three or more subjects that leave a partition empty.
pub fn subject_level_holdout(
    records: &[SubjectRecord],
    fractions: [f64; 3],
    seed: u64,
    stratify_on: StratifyOn,
) -> Result<(FoldPlan, Vec<String>), SplitError> {
    check_fractions(&fractions)?;
    if records.is_empty() {
        return Err(SplitError::EmptyCohort);
    }
    let groups = strata(records, stratify_on)?;
    let mut shuffle = rng(seed, 0);
    let mut parts: [Vec<String>; 3] = Default::default();
    let mut warnings = Vec::new();
    for ((_, name), ids) in groups {
        let mut ids = ids;
        ids.shuffle(&mut shuffle);
        let counts = largest_remainder(ids.len(), &fractions);
        if ids.len() >= 3 && counts.contains(&0) {
            let msg = format!("class {name}: {} subjects leave a partition empty (counts {counts:?})", ids.len());
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let mut pos = 0;
        for (part, c) in parts.iter_mut().zip(counts) {
            part.extend(ids[pos..pos + c].iter().map(|s| s.to_string()));
            pos += c;
        }
    }
    let [train, val, test] = parts;
    let fold = Fold { train: sorted(train), val: sorted(val), test: sorted(test) };
    Ok((FoldPlan { k: 1, seed, stratify_on, folds: vec![fold] }, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceKey {
    pub subject_id: String,
    /// 0 = x (sagittal), 1 = y (coronal), 2 = z (axial).
    pub axis: u8,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceMode {
    SliceLevel,
    SubjectLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceAssignment {
    pub mode: SliceMode,
    pub slices: Vec<(SliceKey, Partition)>,
}

impl SliceAssignment {
    /// Assign every slice the partition of its subject in `fold`. Slices of
    /// subjects absent from the fold are dropped.
    pub fn from_fold(slices: &[SliceKey], fold: &Fold) -> Self {
        let mut role = BTreeMap::new();
        for (ids, p) in [(&fold.train, Partition::Train), (&fold.val, Partition::Val), (&fold.test, Partition::Test)] {
            for id in ids {
                role.entry(id.as_str()).or_insert(p);
            }
        }
        let slices = slices
            .iter()
            .filter_map(|s| role.get(s.subject_id.as_str()).map(|&p| (s.clone(), p)))
            .collect();
        SliceAssignment { mode: SliceMode::SubjectLevel, slices }
    }

    pub fn partition(&self, p: Partition) -> impl Iterator<Item = &SliceKey> {
        self.slices.iter().filter(move |(_, q)| *q == p).map(|(k, _)| k)
    }
}

/// The leaky protocol: shuffle slices and cut by `fractions` (train, val,
/// test) with largest-remainder rounding, ignoring subject identity.
pub fn slice_level_split(slices: &[SliceKey], fractions: [f64; 3], seed: u64) -> Result<SliceAssignment, SplitError> {
    check_fractions(&fractions)?;
    if slices.is_empty() {
        return Err(SplitError::EmptySlices);
    }
    let mut keys = slices.to_vec();
    keys.sort();
    keys.shuffle(&mut rng(seed, 0));
    let counts = largest_remainder(keys.len(), &fractions);
    let mut out = Vec::with_capacity(keys.len());
    let mut it = keys.into_iter();
    for (p, c) in Partition::ALL.into_iter().zip(counts) {
        out.extend(it.by_ref().take(c).map(|k| (k, p)));
    }
    out.sort();
    Ok(SliceAssignment { mode: SliceMode::SliceLevel, slices: out })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub subject_id: String,
    /// Fold in which roles collide; `None` for collisions across folds or in
    /// a slice assignment.
    pub fold: Option<usize>,
    pub roles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub clean: bool,
    pub violations: Vec<Violation>,
}

impl LeakageReport {
    fn from_violations(mut violations: Vec<Violation>) -> Self {
        violations.sort_by(|a, b| (&a.subject_id, a.fold).cmp(&(&b.subject_id, b.fold)));
        LeakageReport { clean: violations.is_empty(), violations }
    }
}

pub trait Auditable {
    fn audit(&self) -> LeakageReport;
}

impl Auditable for FoldPlan {
    fn audit(&self) -> LeakageReport {
        let mut violations = Vec::new();
        for (i, f) in self.folds.iter().enumerate() {
            let mut roles: BTreeMap<&str, Vec<String>> = BTreeMap::new();
            for (ids, name) in [(&f.train, "train"), (&f.val, "val"), (&f.test, "test")] {
                for id in ids {
                    roles.entry(id).or_default().push(name.to_string());
                }
            }
            for (id, r) in roles {
                if r.len() > 1 {
                    violations.push(Violation { subject_id: id.to_string(), fold: Some(i), roles: r });
                }
            }
        }
        let mut tested: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for (i, f) in self.folds.iter().enumerate() {
            for id in &f.test {
                tested.entry(id).or_default().push(format!("test@{i}"));
            }
        }
        for (id, r) in tested {
            // repeats inside one fold's test list are already reported above
            let folds: BTreeSet<&String> = r.iter().collect();
            if folds.len() > 1 {
                violations.push(Violation { subject_id: id.to_string(), fold: None, roles: folds.into_iter().cloned().collect() });
            }
        }
        LeakageReport::from_violations(violations)
    }
}

impl Auditable for SliceAssignment {
    fn audit(&self) -> LeakageReport {
        let mut parts: BTreeMap<&str, BTreeSet<Partition>> = BTreeMap::new();
        for (k, p) in &self.slices {
            parts.entry(&k.subject_id).or_default().insert(*p);
        }
        let violations = parts
            .into_iter()
            .filter(|(_, p)| p.len() > 1)
            .map(|(id, p)| Violation { subject_id: id.to_string(), fold: None, roles: p.into_iter().map(|p| p.name().to_string()).collect() })
            .collect();
        LeakageReport::from_violations(violations)
    }
}

/// Intersect subject sets across roles within each fold and across fold
/// test sets (plans), or across partitions (slice assignments).
pub fn audit_leakage<A: Auditable + ?Sized>(target: &A) -> LeakageReport {
    target.audit()
}
