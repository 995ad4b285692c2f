use std::collections::BTreeMap;

use proptest::prelude::*;
use voxfuse::splits::{audit_leakage, slice_level_split, stratified_subject_kfold, SliceKey, StratifyOn};
use voxfuse::{BinaryLabel, Cdr, SubjectRecord};

fn cohort(counts: [usize; 4], prefix: &str) -> Vec<SubjectRecord> {
    let mut out = Vec::new();
    for (cdr, &n) in Cdr::ALL.iter().zip(&counts) {
        for _ in 0..n {
            out.push(SubjectRecord::new(format!("{prefix}{:04}", out.len()), *cdr, 70.0).unwrap());
        }
    }
    out
}

fn class_of(records: &[SubjectRecord]) -> BTreeMap<&str, BinaryLabel> {
    records.iter().map(|r| (r.subject_id.as_str(), r.label().value())).collect()
}

#[test]
fn labelled_cohort_folds_hold_27_plus_20() {
    let recs = cohort([135, 70, 28, 2], "OAS1_");
    let plan = stratified_subject_kfold(&recs, 5, 42, 0.1, StratifyOn::Binary).unwrap();
    let labels = class_of(&recs);
    let mut tested = BTreeMap::new();
    for f in &plan.folds {
        let nd = f.test.iter().filter(|s| labels[s.as_str()] == BinaryLabel::NonDemented).count();
        assert_eq!((nd, f.test.len() - nd), (27, 20));
        for s in &f.test {
            *tested.entry(s.clone()).or_insert(0) += 1;
        }
        assert_eq!(f.train.len() + f.val.len() + f.test.len(), 235);
    }
    assert_eq!(tested.len(), 235);
    assert!(tested.values().all(|&c| c == 1));
    assert!(audit_leakage(&plan).clean);
}

#[test]
fn fine_grained_stratification_rejects_two_member_class() {
    let recs = cohort([135, 70, 28, 2], "OAS1_");
    assert!(stratified_subject_kfold(&recs, 5, 42, 0.1, StratifyOn::FineGrained).is_err());
}

#[test]
fn twenty_subjects_by_ten_slices_all_leak() {
    let keys: Vec<SliceKey> = (0..20)
        .flat_map(|s| (0..10).map(move |i| SliceKey { subject_id: format!("s{s:02}"), axis: 2, index: i }))
        .collect();
    let a = slice_level_split(&keys, [0.7, 0.15, 0.15], 3).unwrap();
    let report = audit_leakage(&a);
    // independent recount: subjects whose slices land in more than one partition
    let mut parts: BTreeMap<&str, std::collections::BTreeSet<_>> = BTreeMap::new();
    for (k, p) in &a.slices {
        parts.entry(k.subject_id.as_str()).or_default().insert(*p);
    }
    let leaking = parts.values().filter(|p| p.len() > 1).count();
    assert!(leaking > 0);
    assert_eq!(report.violations.len(), leaking);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kfold_invariants(n_nd in 2usize..120, n_d in 2usize..120, k in 2usize..8, seed in any::<u64>(), vf in 0.0f64..0.5) {
        prop_assume!(n_nd >= k && n_d >= k);
        let recs = cohort([n_nd, n_d, 0, 0], "p");
        let plan = stratified_subject_kfold(&recs, k, seed, vf, StratifyOn::Binary).unwrap();
        prop_assert!(audit_leakage(&plan).clean);
        let (missing, extra) = plan.coverage_gaps(&recs);
        prop_assert!(missing.is_empty() && extra.is_empty());
        let labels = class_of(&recs);
        let total: usize = plan.folds.iter().map(|f| f.test.len()).sum();
        prop_assert_eq!(total, recs.len());
        for (i, f) in plan.folds.iter().enumerate() {
            prop_assert_eq!(f.train.len() + f.val.len() + f.test.len(), recs.len());
            for (class, n) in [(BinaryLabel::NonDemented, n_nd), (BinaryLabel::Demented, n_d)] {
                let got = f.test.iter().filter(|s| labels[s.as_str()] == class).count();
                let lo = n / k;
                prop_assert!(got == lo || got == lo + 1);
                // remainders go to the lowest folds
                prop_assert_eq!(got == lo + 1, i < n % k);
                prop_assert!(f.val.iter().any(|s| labels[s.as_str()] == class));
                if n - got >= 2 {
                    prop_assert!(f.train.iter().any(|s| labels[s.as_str()] == class));
                }
            }
        }
    }

    #[test]
    fn planted_duplicate_always_detected(n in 10usize..80, seed in any::<u64>(), fold in 0usize..5, pick in any::<prop::sample::Index>(), to_val in any::<bool>()) {
        let recs = cohort([n, n, 0, 0], "q");
        let mut plan = stratified_subject_kfold(&recs, 5, seed, 0.1, StratifyOn::Binary).unwrap();
        let victim = plan.folds[fold].test[pick.index(plan.folds[fold].test.len())].clone();
        if to_val {
            plan.folds[fold].val.push(victim.clone());
        } else {
            plan.folds[fold].train.push(victim.clone());
        }
        let report = audit_leakage(&plan);
        prop_assert!(!report.clean);
        prop_assert_eq!(report.violations.len(), 1);
        prop_assert_eq!(&report.violations[0].subject_id, &victim);
    }
}
