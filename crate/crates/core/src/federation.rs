//! End-to-end orchestration of training rounds and per-round metrics.
//!
//! Sampled clients train in parallel on the current rayon pool. Each client
//! draws from its own stream keyed by `(master_seed, round, client id)` and
//! results are merged in ascending id order, so thread count never changes
//! the output.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{local_train, ClientRoundStats, LocalTrainConfig, LocalTrainOutput};
use crate::datagen::{generate_blobs, partition_dirichlet, ClientDataset, DatasetSpec, Sample};
use crate::error::{Error, Result};
use crate::linalg::argmax;
use crate::model::{Architecture, ModelParams};
use crate::rng::{stream, Purpose};
use crate::server::{
    aggregate_params, aggregate_prior, comm_cost, sample_clients, tune_global_proxies, GlobalState,
    GptConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub dirichlet_alpha: f64,
    pub local: LocalTrainConfig,
    pub gpt: GptConfig,
    pub gpt_enabled: bool,
    pub dataset: DatasetSpec,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub master_seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(Error::Config(format!(
                "clients_per_round must lie in [1, num_clients={}], got {}",
                self.num_clients, self.clients_per_round
            )));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(Error::Config("dirichlet_alpha must be > 0".into()));
        }
        if !(self.local.lr > 0.0) {
            return Err(Error::Config("local_lr must be > 0".into()));
        }
        if !(self.local.tau > 0.0 && self.local.tau < 1.0) {
            return Err(Error::Config("confidence_threshold must lie in (0, 1)".into()));
        }
        if let Some(c) = self.local.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip_norm must be > 0 or null".into()));
            }
        }
        if self.local.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.local.weights.alpha >= 0.0 && self.local.weights.beta >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(self.gpt.lr > 0.0) {
            return Err(Error::Config("gpt_lr must be > 0".into()));
        }
        self.local.augment.validate()?;
        self.dataset.validate()?;
        self.architecture().validate()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.dataset.input_dim,
            hidden: self.hidden_dims.clone(),
            feature_dim: self.feature_dim,
            num_classes: self.dataset.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_accuracy: f64,
    /// Absent when no high-confidence sample occurred this round.
    pub pseudo_label_accuracy: Option<f64>,
    pub excluded_count: usize,
    pub loss_s: f64,
    pub loss_u: f64,
    pub loss_icpl: f64,
    /// Final tuning loss; absent when tuning did not run.
    pub loss_gpt: Option<f64>,
    pub comm_cost: u64,
    pub wall_time: f64,
    /// Unlabeled samples visited in the clients' final epoch.
    pub unlabeled_seen: usize,
    pub low_conf_count: usize,
    pub low_conf_top1_correct: usize,
    pub low_conf_xi_hits: usize,
    pub gpt_halvings: usize,
}

#[derive(Debug, Clone)]
pub struct FederationRun {
    pub state: GlobalState,
    pub metrics: Vec<RoundMetrics>,
    pub param_count: usize,
}

/// Everything derived from the config before round 0.
#[derive(Debug, Clone)]
pub struct Setup {
    pub clients: Vec<ClientDataset>,
    pub test: Vec<Sample>,
    pub initial: GlobalState,
}

pub fn setup(cfg: &FederationConfig) -> Result<Setup> {
    cfg.validate()?;
    let (train, test) = generate_blobs(&cfg.dataset)?;
    let mut rng = stream(cfg.master_seed, Purpose::Partition, 0, 0);
    let clients = partition_dirichlet(&train, cfg.num_clients, cfg.dirichlet_alpha, &mut rng)?;
    let mut rng = stream(cfg.master_seed, Purpose::Init, 0, 0);
    let params = ModelParams::init(&cfg.architecture(), &mut rng)?;
    Ok(Setup {
        clients,
        test,
        initial: GlobalState::new(params),
    })
}

pub fn run_federation(cfg: &FederationConfig) -> Result<FederationRun> {
    let s = setup(cfg)?;
    run_from(cfg, &s.clients, &s.test, s.initial)
}

/// Runs `cfg.rounds` rounds from an explicit starting state.
pub fn run_from(
    cfg: &FederationConfig,
    clients: &[ClientDataset],
    test: &[Sample],
    initial: GlobalState,
) -> Result<FederationRun> {
    let mut state = initial;
    let param_count = state.params.num_params();
    let num_classes = state.params.num_classes();
    let mut metrics = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let started = Instant::now();
        let ids = sample_clients(cfg.num_clients, cfg.clients_per_round, round, cfg.master_seed)?;
        let outputs: Vec<LocalTrainOutput> = ids
            .par_iter()
            .map(|&id| {
                let mut rng = stream(cfg.master_seed, Purpose::LocalTrain, round as u64, id as u64);
                local_train(&state.params, &clients[id], &state.prior, &cfg.local, &mut rng)
            })
            .collect::<Result<_>>()?;

        let sizes: Vec<usize> = ids.iter().map(|&id| clients[id].len()).collect();
        let locals: Vec<&ModelParams> = outputs.iter().map(|o| &o.params).collect();
        let mut params = aggregate_params(&locals, &sizes)?;

        let mut loss_gpt = None;
        let mut gpt_halvings = 0;
        if cfg.gpt_enabled && cfg.gpt.steps > 0 {
            let client_proxies: Vec<_> = outputs.iter().map(|o| o.params.proxies.clone()).collect();
            let tuned = tune_global_proxies(&params.proxies, &client_proxies, &cfg.gpt)?;
            loss_gpt = tuned.final_loss();
            gpt_halvings = tuned.halvings;
            params.proxies = tuned.proxies;
        }

        let normalized: Vec<Vec<f64>> = outputs.iter().map(|o| o.prior_stats.normalized()).collect();
        let prior = aggregate_prior(&normalized)?;
        state = GlobalState { params, prior };

        let stats: Vec<&ClientRoundStats> = outputs.iter().map(|o| &o.stats).collect();
        let m = stats.len() as f64;
        metrics.push(RoundMetrics {
            round,
            test_accuracy: evaluate_global(&state.params, test)?,
            pseudo_label_accuracy: pseudo_label_accuracy(&stats),
            excluded_count: stats.iter().map(|s| s.excluded_count).sum(),
            loss_s: stats.iter().map(|s| s.mean_loss.supervised).sum::<f64>() / m,
            loss_u: stats.iter().map(|s| s.mean_loss.unsupervised).sum::<f64>() / m,
            loss_icpl: stats.iter().map(|s| s.mean_loss.icpl).sum::<f64>() / m,
            loss_gpt,
            comm_cost: comm_cost(param_count, num_classes, ids.len())?,
            wall_time: started.elapsed().as_secs_f64(),
            unlabeled_seen: stats.iter().map(|s| s.unlabeled_seen).sum(),
            low_conf_count: stats.iter().map(|s| s.low_conf_count).sum(),
            low_conf_top1_correct: stats.iter().map(|s| s.low_conf_top1_correct).sum(),
            low_conf_xi_hits: stats.iter().map(|s| s.low_conf_xi_hits).sum(),
            gpt_halvings,
        });
    }
    Ok(FederationRun {
        state,
        metrics,
        param_count,
    })
}

/// Fraction of test samples whose argmax class equals the truth.
pub fn evaluate_global(params: &ModelParams, test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut correct = 0usize;
    for s in test {
        correct += usize::from(argmax(&params.predict_probs(&s.features)?) == s.true_label);
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Pooled fraction of correct pseudo-labels; `None` without any
/// high-confidence sample.
pub fn pseudo_label_accuracy(stats: &[&ClientRoundStats]) -> Option<f64> {
    let n: usize = stats.iter().map(|s| s.high_conf_count).sum();
    let ok: usize = stats.iter().map(|s| s.high_conf_correct).sum();
    (n > 0).then(|| ok as f64 / n as f64)
}

/// `(ξ recall, top-1 accuracy)` over the low-confidence samples of the
/// given rounds; `None` when there were none.
pub fn indecisive_recall(metrics: &[RoundMetrics]) -> Option<(f64, f64)> {
    let n: usize = metrics.iter().map(|m| m.low_conf_count).sum();
    let hits: usize = metrics.iter().map(|m| m.low_conf_xi_hits).sum();
    let top1: usize = metrics.iter().map(|m| m.low_conf_top1_correct).sum();
    (n > 0).then(|| (hits as f64 / n as f64, top1 as f64 / n as f64))
}

/// First 1-based round at which test accuracy reaches `target`.
pub fn rounds_to_reach(metrics: &[RoundMetrics], target: f64) -> Option<usize> {
    metrics
        .iter()
        .position(|m| m.test_accuracy >= target)
        .map(|i| i + 1)
}
