//! Central finite-difference checks for analytic gradients.

use crate::model::{GradientBuffer, ModelParams};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Denominator floor for the relative error. Entries whose analytic and
/// numerical magnitudes are both below this are compared on an absolute
/// scale, where step-size round-off would otherwise dominate.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn check_flat<F>(f: F, x: &[f64], analytic: &[f64], tolerance: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: x.len(),
        tolerance,
    };
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    report
}

/// Checks a model-level loss: `loss` returns the value and its analytic
/// gradient; only the value is used at perturbed points.
pub fn grad_check<F>(loss: F, params: &ModelParams, tolerance: f64) -> GradCheckReport
where
    F: Fn(&ModelParams) -> (f64, GradientBuffer),
{
    let (_, analytic) = loss(params);
    let x: Vec<f64> = params.values().copied().collect();
    check_flat(
        |flat| {
            let mut q = params.clone();
            for (p, v) in q.values_mut().zip(flat) {
                *p = *v;
            }
            loss(&q).0
        },
        &x,
        &analytic.to_vec(),
        tolerance,
    )
}

/// Maximum relative error accepted by the suite.
pub const SUITE_TOLERANCE: f64 = 1e-5;
pub const SUITE_INSTANCES: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Supervised,
    Unsupervised,
    Icpl,
    Gpt,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Supervised,
        LossKind::Unsupervised,
        LossKind::Icpl,
        LossKind::Gpt,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Supervised => "supervised",
            LossKind::Unsupervised => "unsupervised",
            LossKind::Icpl => "icpl",
            LossKind::Gpt => "gpt",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub loss: LossKind,
    pub max_rel_error: f64,
    /// Seed of the instance with the largest error.
    pub worst_seed: u64,
    /// Seeds of failing instances.
    pub failed_seeds: Vec<u64>,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.failed_seeds.is_empty()
    }
}

/// Runs every loss against central differences on [`SUITE_INSTANCES`]
/// random instances. `corrupt` scales the analytic gradient of one loss by
/// 1.01, which the check must catch.
pub fn run_suite(seed: u64, corrupt: Option<LossKind>) -> crate::error::Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    for kind in LossKind::ALL {
        let mut row = SuiteRow {
            loss: kind,
            max_rel_error: 0.0,
            worst_seed: 0,
            failed_seeds: Vec::new(),
        };
        for i in 0..SUITE_INSTANCES {
            let inst = seed.wrapping_mul(1000).wrapping_add(i);
            let factor = if corrupt == Some(kind) { 1.01 } else { 1.0 };
            let report = suite_instance(kind, inst, factor)?;
            if report.max_rel_error > row.max_rel_error || report.max_rel_error.is_nan() {
                row.max_rel_error = report.max_rel_error;
                row.worst_seed = inst;
            }
            if !report.passed() {
                row.failed_seeds.push(inst);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn suite_instance(kind: LossKind, seed: u64, factor: f64) -> crate::error::Result<GradCheckReport> {
    use crate::client::{build_proxy_pool, CategoryKind, CategorySet};
    use crate::linalg::{softmax, Matrix};
    use crate::losses::{loss_gpt, loss_icpl, loss_supervised, loss_unsupervised, DistanceMetric};
    use crate::model::Architecture;
    use crate::rng::{stream, Purpose};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    const D: usize = 5;
    const C: usize = 4;
    const N: usize = 8;
    let mut rng = stream(seed, Purpose::Experiment, 0xfd, 0);
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    if kind == LossKind::Gpt {
        let matrix = |rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| normal(rng)).collect())
        };
        let global = matrix(&mut rng, C, 3);
        let clients: Vec<Matrix> = (0..4).map(|_| matrix(&mut rng, C, 3)).collect();
        let metric = if seed.is_multiple_of(2) {
            DistanceMetric::SquaredEuclidean
        } else {
            DistanceMetric::Cosine
        };
        let (_, grad) = loss_gpt(&global, &clients, metric)?;
        let analytic: Vec<f64> = grad.as_slice().iter().map(|g| g * factor).collect();
        return Ok(check_flat(
            |flat| {
                let g = Matrix::from_vec(C, 3, flat.to_vec());
                loss_gpt(&g, &clients, metric).map(|r| r.0).unwrap_or(f64::NAN)
            },
            global.as_slice(),
            &analytic,
            SUITE_TOLERANCE,
        ));
    }

    let arch = Architecture {
        input_dim: D,
        hidden: vec![6],
        feature_dim: 3,
        num_classes: C,
    };
    let params = ModelParams::init(&arch, &mut rng)?;
    let xs: Vec<Vec<f64>> = (0..N).map(|_| (0..D).map(|_| normal(&mut rng)).collect()).collect();
    let labels: Vec<usize> = (0..N).map(|_| rng.random_range(0..C)).collect();
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let pairs: Vec<(&[f64], usize)> = refs.iter().copied().zip(labels.iter().copied()).collect();

    let pool = if kind == LossKind::Icpl {
        // two labeled, three high-confidence, three low-confidence samples
        let categories: Vec<CategorySet> = (0..N)
            .map(|k| match k {
                0 | 1 => CategorySet::labeled(labels[k]),
                2..=4 => CategorySet {
                    kind: CategoryKind::HighConf,
                    categories: vec![labels[k]],
                },
                _ => {
                    let mut xi: Vec<usize> = (0..C).filter(|_| rng.random_bool(0.4)).collect();
                    if xi.is_empty() {
                        xi.push(labels[k]);
                    }
                    CategorySet {
                        kind: CategoryKind::LowConf,
                        categories: xi,
                    }
                }
            })
            .collect();
        let local: Vec<Vec<f64>> = (0..N)
            .map(|_| softmax(&(0..C).map(|_| normal(&mut rng)).collect::<Vec<_>>()))
            .collect();
        build_proxy_pool(&categories, &local, &[true; N])
    } else {
        Default::default()
    };

    let loss = |p: &ModelParams| -> (f64, GradientBuffer) {
        let out = match kind {
            LossKind::Supervised => loss_supervised(p, &pairs),
            LossKind::Unsupervised => loss_unsupervised(p, &pairs),
            _ => loss_icpl(p, &pool, &refs),
        }
        .expect("suite instance is well formed");
        let mut g = out.grads;
        g.scale(factor);
        (out.value, g)
    };
    Ok(grad_check(loss, &params, SUITE_TOLERANCE))
}
