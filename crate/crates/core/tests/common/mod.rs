//! Structural properties shared by the property suite and the acceptance
//! harness. Each check takes a generated case and returns a proptest
//! verdict.
#![allow(dead_code)]

use std::collections::BTreeSet;

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use proxyfed::client::{
    build_proxy_pool, collect_prior_stats, triage_confidence, AnchorGroup, CategoryKind,
    CategorySet, Verdict,
};
use proxyfed::datagen::{generate_blobs, partition_dirichlet, AugmentConfig, DatasetSpec};
use proxyfed::linalg::{argmax, Matrix};
use proxyfed::model::{Architecture, ModelParams};
use proxyfed::rng::{stream, Purpose};
use proxyfed::server::aggregate_prior;

pub const CASES: u32 = 100;

#[derive(Debug, Clone)]
pub struct PartitionCase {
    pub classes: usize,
    pub per_class: usize,
    pub clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

pub fn partition_case() -> impl Strategy<Value = PartitionCase> {
    (2usize..6, 10usize..60, 1usize..9, 0.05f64..20.0, any::<u64>()).prop_map(
        |(classes, per_class, clients, alpha, seed)| PartitionCase {
            classes,
            per_class,
            clients,
            alpha,
            seed,
        },
    )
}

pub fn check_partition(case: &PartitionCase) -> Result<(), TestCaseError> {
    let spec = DatasetSpec {
        input_dim: 3,
        num_classes: case.classes,
        samples_per_class: case.per_class,
        class_sphere_radius: 2.0,
        class_noise_std: 0.5,
        labeled_fraction: 0.2,
        test_fraction: 0.2,
        seed: case.seed,
    };
    let (train, _) = generate_blobs(&spec).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let total_labeled = train.iter().filter(|s| s.is_labeled).count();
    let mut rng = stream(case.seed, Purpose::Partition, 0, 0);
    let parts = match partition_dirichlet(&train, case.clients, case.alpha, &mut rng) {
        Ok(p) => p,
        Err(_) => {
            prop_assert!(total_labeled < case.clients, "partition failed with enough labels");
            return Ok(());
        }
    };
    prop_assert_eq!(parts.len(), case.clients);
    let mut seen = BTreeSet::new();
    for client in &parts {
        prop_assert!(!client.labeled.is_empty(), "client without labeled data");
        for s in &client.labeled {
            prop_assert!(s.is_labeled);
            prop_assert!(seen.insert(s.id), "sample {} assigned twice", s.id);
        }
        for s in &client.unlabeled {
            prop_assert!(!s.is_labeled);
            prop_assert!(seen.insert(s.id), "sample {} assigned twice", s.id);
        }
    }
    let all: BTreeSet<usize> = train.iter().map(|s| s.id).collect();
    prop_assert_eq!(seen, all);
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PriorCase {
    pub classes: usize,
    pub labeled: Vec<usize>,
    pub high_conf: Vec<usize>,
    pub clients: Vec<(Vec<usize>, Vec<usize>)>,
}

pub fn prior_case() -> impl Strategy<Value = PriorCase> {
    (2usize..12).prop_flat_map(|c| {
        let labels = || prop::collection::vec(0..c, 0..40);
        (
            Just(c),
            labels(),
            labels(),
            prop::collection::vec((labels(), labels()), 1..6),
        )
            .prop_map(|(classes, labeled, high_conf, clients)| PriorCase {
                classes,
                labeled,
                high_conf,
                clients,
            })
    })
}

fn assert_simplex(p: &[f64], c: usize) -> Result<(), TestCaseError> {
    prop_assert_eq!(p.len(), c);
    prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    let sum: f64 = p.iter().sum();
    prop_assert!((sum - 1.0).abs() < 1e-12, "sum {}", sum);
    Ok(())
}

pub fn check_prior(case: &PriorCase) -> Result<(), TestCaseError> {
    let stats = collect_prior_stats(&case.labeled, &case.high_conf, case.classes);
    prop_assert_eq!(stats.total, stats.counts.iter().sum::<u64>());
    prop_assert_eq!(stats.total as usize, case.labeled.len() + case.high_conf.len());
    let p = stats.normalized();
    assert_simplex(&p, case.classes)?;
    for c in 0..case.classes {
        let n = case.labeled.iter().chain(&case.high_conf).filter(|&&y| y == c).count();
        let expected = if stats.total == 0 {
            1.0 / case.classes as f64
        } else {
            n as f64 / stats.total as f64
        };
        prop_assert!((p[c] - expected).abs() < 1e-15);
    }
    let per_client: Vec<Vec<f64>> = case
        .clients
        .iter()
        .map(|(l, h)| collect_prior_stats(l, h, case.classes).normalized())
        .collect();
    assert_simplex(&aggregate_prior(&per_client).unwrap(), case.classes)
}

#[derive(Debug, Clone)]
pub struct PoolCase {
    pub classes: usize,
    pub sets: Vec<CategorySet>,
    pub probs: Vec<Vec<f64>>,
    pub participates: Vec<bool>,
}

pub fn pool_case() -> impl Strategy<Value = PoolCase> {
    (2usize..8).prop_flat_map(|c| {
        let item = (
            0u8..3,
            0..c,
            prop::collection::btree_set(0..c, 0..=c),
            prop::collection::vec(0.01f64..1.0, c),
            prop::bool::weighted(0.85),
        );
        (Just(c), prop::collection::vec(item, 1..24)).prop_map(|(classes, items)| {
            let mut sets = Vec::new();
            let mut probs = Vec::new();
            let mut participates = Vec::new();
            for (kind, label, xi, raw, part) in items {
                sets.push(match kind {
                    0 => CategorySet::labeled(label),
                    1 => CategorySet {
                        kind: CategoryKind::HighConf,
                        categories: vec![label],
                    },
                    _ => CategorySet {
                        kind: CategoryKind::LowConf,
                        categories: xi.into_iter().collect(),
                    },
                });
                let s: f64 = raw.iter().sum();
                probs.push(raw.iter().map(|x| x / s).collect());
                participates.push(part);
            }
            PoolCase {
                classes,
                sets,
                probs,
                participates,
            }
        })
    })
}

pub fn check_pool(case: &PoolCase) -> Result<(), TestCaseError> {
    let pool = build_proxy_pool(&case.sets, &case.probs, &case.participates);
    let member = |k: usize| case.participates[k] && !case.sets[k].categories.is_empty();
    let proxies = Matrix::from_vec(
        case.classes,
        2,
        (0..2 * case.classes).map(|i| i as f64 * 0.37 - 1.0).collect(),
    );
    let mut anchored = BTreeSet::new();
    for a in &pool.anchors {
        let i = a.feature_index;
        prop_assert!(anchored.insert(i), "duplicate anchor");
        prop_assert!(member(i));
        prop_assert!(case.sets[i].kind != CategoryKind::Labeled);
        for &j in &a.negatives {
            prop_assert!(j != i);
            prop_assert!(member(j));
            let (xi, xj) = (&case.sets[i].categories, &case.sets[j].categories);
            prop_assert!(xi.iter().all(|c| !xj.contains(c)), "overlap {:?} {:?}", xi, xj);
        }
        // every eligible disjoint peer is a negative
        let expected: Vec<usize> = (0..case.sets.len())
            .filter(|&j| j != i && member(j))
            .filter(|&j| case.sets[i].categories.iter().all(|c| !case.sets[j].categories.contains(c)))
            .collect();
        prop_assert_eq!(&a.negatives, &expected);
        match a.group {
            AnchorGroup::HighConf => {
                let row = case.sets[i].categories[0];
                prop_assert_eq!(a.positive_vector(&proxies), proxies.row(row).to_vec());
            }
            AnchorGroup::LowConf => {
                let w: f64 = a.positive.iter().map(|p| p.1).sum();
                prop_assert!((w - 1.0).abs() < 1e-12);
                let classes: Vec<usize> = a.positive.iter().map(|p| p.0).collect();
                prop_assert_eq!(&classes, &case.sets[i].categories);
            }
        }
    }
    // every eligible unlabeled sample is an anchor
    for (k, s) in case.sets.iter().enumerate() {
        if member(k) && s.kind != CategoryKind::Labeled {
            prop_assert!(anchored.contains(&k));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TriageCase {
    pub classes: usize,
    pub batch: usize,
    pub tau: f64,
    pub weight_scale: f64,
    pub seed: u64,
}

pub fn triage_case() -> impl Strategy<Value = TriageCase> {
    (2usize..7, 0usize..30, 0.05f64..0.99, 0.1f64..8.0, any::<u64>()).prop_map(
        |(classes, batch, tau, weight_scale, seed)| TriageCase {
            classes,
            batch,
            tau,
            weight_scale,
            seed,
        },
    )
}

pub fn check_triage(case: &TriageCase) -> Result<(), TestCaseError> {
    let arch = Architecture {
        input_dim: 4,
        hidden: vec![6],
        feature_dim: 3,
        num_classes: case.classes,
    };
    let mut rng = stream(case.seed, Purpose::Init, 0, 0);
    let mut params = ModelParams::init(&arch, &mut rng).unwrap();
    for v in params.values_mut() {
        *v *= case.weight_scale;
    }
    let mut rng = stream(case.seed, Purpose::Data, 0, 0);
    let xs: Vec<Vec<f64>> = (0..case.batch)
        .map(|_| (0..4).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect())
        .collect();
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let mut rng = stream(case.seed, Purpose::LocalTrain, 0, 0);
    let out = triage_confidence(&params, &refs, case.tau, &AugmentConfig::default(), &mut rng).unwrap();
    prop_assert_eq!(out.len(), case.batch);
    let (mut hc, mut lc) = (0, 0);
    for t in &out {
        let max = t.global_probs.iter().cloned().fold(f64::MIN, f64::max);
        match t.verdict {
            Verdict::HighConf { pseudo_label } => {
                hc += 1;
                prop_assert!(max > case.tau);
                prop_assert_eq!(pseudo_label, argmax(&t.global_probs));
            }
            Verdict::LowConf => {
                lc += 1;
                prop_assert!(max <= case.tau);
            }
        }
    }
    prop_assert_eq!(hc + lc, case.batch);
    Ok(())
}
