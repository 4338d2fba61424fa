//! Server duties for one round: client sampling, size-weighted parameter
//! averaging, prior averaging, global proxy tuning and cost accounting.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{loss_gpt, DistanceMetric};
use crate::model::ModelParams;
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    /// Extractor θ_G together with the global proxies Ω_G.
    pub params: ModelParams,
    /// P′_G, a simplex vector of length C.
    pub prior: Vec<f64>,
}

impl GlobalState {
    pub fn new(params: ModelParams) -> Self {
        let c = params.num_classes();
        Self {
            params,
            prior: vec![1.0 / c as f64; c],
        }
    }

    pub fn proxies(&self) -> &Matrix {
        &self.params.proxies
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GptConfig {
    pub lr: f64,
    /// Tuning steps; 0 disables tuning.
    pub steps: usize,
    pub metric: DistanceMetric,
}

impl Default for GptConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            steps: 100,
            metric: DistanceMetric::SquaredEuclidean,
        }
    }
}

/// `M` distinct client ids out of `K`, sorted, uniform without replacement.
pub fn sample_clients(k: usize, m: usize, round: usize, master_seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > k {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {m} of {k} clients"
        )));
    }
    let mut rng = stream(master_seed, Purpose::Sampling, round as u64, 0);
    let mut ids = index::sample(&mut rng, k, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// `γ_m = N_m / Σ N`.
pub fn aggregation_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sizes.iter().sum();
    if sizes.is_empty() || total == 0 {
        return Err(Error::InvalidArgument("aggregation needs a positive total size".into()));
    }
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Size-weighted average of the client models. The proxies in the result
/// are the plain average Ω̄_G.
pub fn aggregate_params(clients: &[&ModelParams], sizes: &[usize]) -> Result<ModelParams> {
    if clients.len() != sizes.len() {
        return Err(Error::Dimension {
            context: "aggregation sizes",
            expected: clients.len(),
            got: sizes.len(),
        });
    }
    let gamma = aggregation_weights(sizes)?;
    let first = clients[0];
    if clients.iter().any(|p| !p.same_shape(first)) {
        return Err(Error::InvalidArgument("client architectures differ".into()));
    }
    let mut out = ModelParams::zeros(&first.architecture());
    for (p, g) in clients.iter().zip(&gamma) {
        for (o, v) in out.values_mut().zip(p.values()) {
            *o += g * v;
        }
    }
    Ok(out)
}

/// Unweighted mean of the clients' normalized prior vectors.
pub fn aggregate_prior(normalized: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = normalized.first().ok_or(Error::Empty("prior statistics"))?;
    let m = normalized.len() as f64;
    let mut out = vec![0.0; first.len()];
    for v in normalized {
        if v.len() != out.len() {
            return Err(Error::Dimension {
                context: "prior",
                expected: out.len(),
                got: v.len(),
            });
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += x / m;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TuningOutcome {
    pub proxies: Matrix,
    /// L_GPT before tuning and after every accepted step.
    pub trace: Vec<f64>,
    pub final_lr: f64,
    pub halvings: usize,
    /// Set when the halving budget ran out; `proxies` is then the best
    /// iterate reached.
    pub exhausted: bool,
}

impl TuningOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.trace.last().copied()
    }
}

pub const MAX_GPT_HALVINGS: usize = 20;

/// Full-batch gradient descent on L_GPT from `init`. A step that would
/// raise the loss is retried with half the learning rate; the reduced rate
/// is kept for later steps.
pub fn tune_global_proxies(
    init: &Matrix,
    clients: &[Matrix],
    cfg: &GptConfig,
) -> Result<TuningOutcome> {
    let mut outcome = TuningOutcome {
        proxies: init.clone(),
        trace: Vec::new(),
        final_lr: cfg.lr,
        halvings: 0,
        exhausted: false,
    };
    if cfg.steps == 0 {
        return Ok(outcome);
    }
    let (mut loss, mut grad) = loss_gpt(init, clients, cfg.metric)?;
    outcome.trace.push(loss);
    'steps: for _ in 0..cfg.steps {
        loop {
            let mut candidate = outcome.proxies.clone();
            candidate.add_scaled(-outcome.final_lr, &grad);
            let (next_loss, next_grad) = loss_gpt(&candidate, clients, cfg.metric)?;
            if next_loss <= loss {
                outcome.proxies = candidate;
                loss = next_loss;
                grad = next_grad;
                outcome.trace.push(loss);
                break;
            }
            if outcome.halvings == MAX_GPT_HALVINGS {
                outcome.exhausted = true;
                break 'steps;
            }
            outcome.final_lr /= 2.0;
            outcome.halvings += 1;
        }
    }
    Ok(outcome)
}

/// Scalars moved per round: `M·(P + C)` up plus `P + C` down.
pub fn comm_cost(param_count: usize, num_classes: usize, clients: usize) -> Result<u64> {
    if param_count == 0 || num_classes == 0 || clients == 0 {
        return Err(Error::InvalidArgument("comm_cost needs P, C, M >= 1".into()));
    }
    let per_model = (param_count + num_classes) as u64;
    Ok(clients as u64 * per_model + per_model)
}

/// Unit-constant operation count `Q·M·C²·d` of one tuning pass.
pub fn gpt_flops_estimate(steps: usize, clients: usize, num_classes: usize, dim: usize) -> u64 {
    steps as u64 * clients as u64 * (num_classes as u64).pow(2) * dim as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    #[test]
    fn sampling() {
        assert_eq!(sample_clients(5, 5, 3, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        let a = sample_clients(20, 8, 4, 99).unwrap();
        assert_eq!(a, sample_clients(20, 8, 4, 99).unwrap());
        assert_eq!(a.len(), 8);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_clients(3, 4, 0, 0).is_err());
        assert!(sample_clients(3, 0, 0, 0).is_err());
    }

    fn scalar_model(v: f64) -> ModelParams {
        let arch = Architecture {
            input_dim: 1,
            hidden: vec![],
            feature_dim: 1,
            num_classes: 1,
        };
        let mut p = ModelParams::zeros(&arch);
        p.values_mut().for_each(|x| *x = v);
        p
    }

    #[test]
    fn weighted_scalar_average() {
        let a = scalar_model(0.0);
        let b = scalar_model(4.0);
        let out = aggregate_params(&[&a, &b], &[1, 3]).unwrap();
        assert!(out.values().all(|v| *v == 3.0));
        let same = aggregate_params(&[&b, &b, &b], &[2, 7, 1]).unwrap();
        assert!(same.values().all(|v| (*v - 4.0).abs() < 1e-15));
        assert!(aggregate_params(&[&a], &[1, 2]).is_err());
    }

    #[test]
    fn prior_average() {
        let out = aggregate_prior(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
        let u = vec![0.25; 4];
        assert_eq!(aggregate_prior(&[u.clone(), u.clone()]).unwrap(), u);
        assert!(aggregate_prior(&[]).is_err());
    }

    #[test]
    fn tuning_disabled_is_identity() {
        let init = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let cfg = GptConfig {
            steps: 0,
            ..GptConfig::default()
        };
        let out = tune_global_proxies(&init, std::slice::from_ref(&init), &cfg).unwrap();
        assert_eq!(out.proxies, init);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn cost_formulas() {
        assert_eq!(comm_cost(1000, 10, 8).unwrap(), 9090);
        assert!(comm_cost(1000, 10, 0).is_err());
        assert_eq!(gpt_flops_estimate(1, 1, 1, 1), 1);
        assert_eq!(gpt_flops_estimate(10, 8, 100, 16), 12_800_000);
        assert_eq!(
            gpt_flops_estimate(20, 8, 100, 16),
            2 * gpt_flops_estimate(10, 8, 100, 16)
        );
    }
}
