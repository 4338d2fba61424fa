//! Synthetic classification data, Dirichlet client partitioning and
//! weak/strong input augmentation.
//!
//! Classes are isotropic Gaussian blobs whose means sit on a common sphere.
//! Shrinking the sphere (or raising the noise) makes neighbouring classes
//! overlap, which is what produces genuinely low-confidence samples.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub class_sphere_radius: f64,
    pub class_noise_std: f64,
    pub labeled_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.input_dim < 1 {
            return Err(Error::InvalidArgument("input_dim must be >= 1".into()));
        }
        if self.input_dim == 1 && self.num_classes > 2 {
            return Err(Error::InvalidArgument(
                "a 1-dimensional sphere holds at most 2 distinct class means".into(),
            ));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidArgument("samples_per_class must be >= 1".into()));
        }
        if !(self.class_sphere_radius > 0.0) {
            return Err(Error::InvalidArgument("class_sphere_radius must be > 0".into()));
        }
        if !(self.class_noise_std >= 0.0) {
            return Err(Error::InvalidArgument("class_noise_std must be >= 0".into()));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "labeled_fraction must lie in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Stable identifier, unique within one generated dataset.
    pub id: usize,
    pub features: Vec<f64>,
    pub true_label: usize,
    pub is_labeled: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientDataset {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-class sample counts over both pools.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for s in self.labeled.iter().chain(&self.unlabeled) {
            counts[s.true_label] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub weak_noise_std: f64,
    pub strong_noise_std: f64,
    pub strong_mask_prob: f64,
}

impl AugmentConfig {
    pub fn new(weak_noise_std: f64, strong_noise_std: f64, strong_mask_prob: f64) -> Result<Self> {
        let cfg = Self {
            weak_noise_std,
            strong_noise_std,
            strong_mask_prob,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// No perturbation at all.
    pub fn identity() -> Self {
        Self {
            weak_noise_std: 0.0,
            strong_noise_std: 0.0,
            strong_mask_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weak_noise_std >= 0.0) || !(self.strong_noise_std >= 0.0) {
            return Err(Error::InvalidArgument("augmentation noise must be >= 0".into()));
        }
        if self.strong_noise_std < self.weak_noise_std {
            return Err(Error::InvalidArgument(
                "strong_noise_std must be >= weak_noise_std".into(),
            ));
        }
        if !(self.strong_mask_prob >= 0.0 && self.strong_mask_prob < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "strong_mask_prob must lie in [0, 1), got {}",
                self.strong_mask_prob
            )));
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_noise_std: 0.05,
            strong_noise_std: 0.3,
            strong_mask_prob: 0.2,
        }
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim, 1.0);
        let n = crate::linalg::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws class means uniformly on the sphere of the given radius; all means
/// are pairwise distinct.
pub fn class_means<R: Rng + ?Sized>(rng: &mut R, spec: &DatasetSpec) -> Vec<Vec<f64>> {
    loop {
        let means: Vec<Vec<f64>> = (0..spec.num_classes)
            .map(|_| {
                random_unit(rng, spec.input_dim)
                    .into_iter()
                    .map(|x| x * spec.class_sphere_radius)
                    .collect()
            })
            .collect();
        let distinct = means
            .iter()
            .enumerate()
            .all(|(i, a)| means[..i].iter().all(|b| a != b));
        if distinct {
            return means;
        }
    }
}

/// Generates `(train, test)`. Per class, `round(test_fraction · n)` samples
/// go to test and `round(labeled_fraction · n_train)` train samples are marked
/// labeled.
pub fn generate_blobs(spec: &DatasetSpec) -> Result<(Vec<Sample>, Vec<Sample>)> {
    spec.validate()?;
    let mut rng = crate::rng::stream(spec.seed, crate::rng::Purpose::Data, 0, 0);
    let means = class_means(&mut rng, spec);

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut next_id = 0;
    for (class, mean) in means.iter().enumerate() {
        let mut feats: Vec<Vec<f64>> = (0..spec.samples_per_class)
            .map(|_| {
                let noise = gaussian_vec(&mut rng, spec.input_dim, spec.class_noise_std);
                mean.iter().zip(noise).map(|(m, e)| m + e).collect()
            })
            .collect();
        feats.shuffle(&mut rng);

        let n = feats.len();
        let n_test = ((spec.test_fraction * n as f64).round() as usize).min(n);
        let n_train = n - n_test;
        let n_labeled = ((spec.labeled_fraction * n_train as f64).round() as usize).min(n_train);

        for (k, features) in feats.into_iter().enumerate() {
            let sample = Sample {
                id: next_id,
                features,
                true_label: class,
                is_labeled: false,
            };
            next_id += 1;
            if k < n_test {
                test.push(sample);
            } else {
                let is_labeled = k - n_test < n_labeled;
                train.push(Sample {
                    is_labeled,
                    ..sample
                });
            }
        }
    }
    Ok((train, test))
}

/// Draws one Dirichlet(alpha · 1_k) vector by normalising Gamma variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, k: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    loop {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = g.iter().sum();
        if total > 0.0 && total.is_finite() {
            return g.into_iter().map(|x| x / total).collect();
        }
    }
}

/// Splits `n` items into integer quotas proportional to `props`
/// (largest-remainder rounding; quotas sum to `n`).
pub fn quotas(n: usize, props: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

const MAX_LABELED_REDRAWS: usize = 1000;

/// Partitions `train` over `num_clients` clients with independent per-class
/// Dirichlet draws for the labeled and the unlabeled pool.
///
/// Every client ends up with at least one labeled sample: the labeled
/// allocation is redrawn when some client would be empty, and after
/// `MAX_LABELED_REDRAWS` failed draws the largest holder donates samples.
pub fn partition_dirichlet<R: Rng + ?Sized>(
    train: &[Sample],
    num_clients: usize,
    dirichlet_alpha: f64,
    rng: &mut R,
) -> Result<Vec<ClientDataset>> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument("number of clients must be >= 1".into()));
    }
    if !(dirichlet_alpha > 0.0) || !dirichlet_alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "dirichlet_alpha must be a positive finite number, got {dirichlet_alpha}"
        )));
    }
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let num_classes = train.iter().map(|s| s.true_label).max().unwrap_or(0) + 1;
    let mut labeled_by_class = vec![Vec::new(); num_classes];
    let mut unlabeled_by_class = vec![Vec::new(); num_classes];
    for (i, s) in train.iter().enumerate() {
        if s.is_labeled {
            labeled_by_class[s.true_label].push(i);
        } else {
            unlabeled_by_class[s.true_label].push(i);
        }
    }
    let total_labeled: usize = labeled_by_class.iter().map(Vec::len).sum();
    if total_labeled < num_clients {
        return Err(Error::InvalidArgument(format!(
            "{total_labeled} labeled samples cannot cover {num_clients} clients"
        )));
    }

    let allocate = |rng: &mut R, pools: &[Vec<usize>]| -> Vec<Vec<usize>> {
        let mut owned = vec![Vec::new(); num_clients];
        for pool in pools {
            let mut idx = pool.clone();
            idx.shuffle(rng);
            let props = sample_dirichlet(rng, num_clients, dirichlet_alpha);
            let q = quotas(idx.len(), &props);
            let mut it = idx.into_iter();
            for (client, &count) in q.iter().enumerate() {
                owned[client].extend(it.by_ref().take(count));
            }
        }
        owned
    };

    let mut labeled = allocate(rng, &labeled_by_class);
    let mut redraws = 0;
    while labeled.iter().any(Vec::is_empty) && redraws < MAX_LABELED_REDRAWS {
        labeled = allocate(rng, &labeled_by_class);
        redraws += 1;
    }
    while let Some(empty) = labeled.iter().position(Vec::is_empty) {
        let donor = (0..num_clients)
            .max_by(|&a, &b| labeled[a].len().cmp(&labeled[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = labeled[donor].pop().expect("donor holds samples");
        labeled[empty].push(moved);
    }
    let unlabeled = allocate(rng, &unlabeled_by_class);

    Ok(labeled
        .into_iter()
        .zip(unlabeled)
        .map(|(l, u)| ClientDataset {
            labeled: l.into_iter().map(|i| train[i].clone()).collect(),
            unlabeled: u.into_iter().map(|i| train[i].clone()).collect(),
        })
        .collect())
}

/// Mean total-variation distance between each client's class distribution
/// and the pooled distribution. Clients without samples are skipped.
pub fn mean_tv_distance(clients: &[ClientDataset], num_classes: usize) -> f64 {
    let mut global = vec![0.0; num_classes];
    for c in clients {
        for (g, n) in global.iter_mut().zip(c.class_counts(num_classes)) {
            *g += n as f64;
        }
    }
    let total: f64 = global.iter().sum();
    global.iter_mut().for_each(|g| *g /= total);

    let mut acc = 0.0;
    let mut n = 0;
    for c in clients.iter().filter(|c| !c.is_empty()) {
        let len = c.len() as f64;
        let tv: f64 = c
            .class_counts(num_classes)
            .iter()
            .zip(&global)
            .map(|(&k, g)| (k as f64 / len - g).abs())
            .sum::<f64>()
            / 2.0;
        acc += tv;
        n += 1;
    }
    acc / n as f64
}

/// `x` plus isotropic Gaussian noise of std `weak_noise_std`.
pub fn augment_weak<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    if cfg.weak_noise_std == 0.0 {
        return x.to_vec();
    }
    x.iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(rng);
            v + cfg.weak_noise_std * e
        })
        .collect()
}

/// Gaussian noise of std `strong_noise_std`, then each coordinate zeroed
/// independently with probability `strong_mask_prob`.
pub fn augment_strong<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let mut out = *v;
            if cfg.strong_noise_std > 0.0 {
                let e: f64 = StandardNormal.sample(rng);
                out += cfg.strong_noise_std * e;
            }
            if cfg.strong_mask_prob > 0.0 && rng.random::<f64>() < cfg.strong_mask_prob {
                out = 0.0;
            }
            out
        })
        .collect()
}
