//! One client's round: confidence triage against the broadcast model,
//! category-set construction, prior statistics, positive/negative proxy
//! pools and the local SGD loop.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{augment_strong, augment_weak, AugmentConfig, ClientDataset};
use crate::error::{Error, Result};
use crate::linalg::{argmax, Matrix};
use crate::losses::{
    loss_icpl, loss_supervised, loss_unsupervised, LocalLossParts, LossOutput, LossWeights,
};
use crate::model::{GradientBuffer, ModelParams};

/// Confidence threshold τ used by the protocol.
pub const DEFAULT_TAU: f64 = 0.95;
pub const DEFAULT_GRAD_CLIP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    HighConf { pseudo_label: usize },
    LowConf,
}

/// Global-model view of one unlabeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Triage {
    /// The weak-augmented input the global probabilities were computed on.
    pub weak_input: Vec<f64>,
    pub global_probs: Vec<f64>,
    pub verdict: Verdict,
}

/// `HighConf(argmax)` iff `max(probs) > tau`.
pub fn confidence_verdict(global_probs: &[f64], tau: f64) -> Verdict {
    let top = argmax(global_probs);
    if global_probs[top] > tau {
        Verdict::HighConf { pseudo_label: top }
    } else {
        Verdict::LowConf
    }
}

/// Weak-augments each unlabeled input and classifies it with the global model.
pub fn triage_confidence<R: Rng + ?Sized>(
    global: &ModelParams,
    unlabeled: &[&[f64]],
    tau: f64,
    augment: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<Triage>> {
    unlabeled
        .iter()
        .map(|x| {
            let weak_input = augment_weak(x, augment, rng);
            let global_probs = global.predict_probs(&weak_input)?;
            let verdict = confidence_verdict(&global_probs, tau);
            Ok(Triage {
                weak_input,
                global_probs,
                verdict,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CategoryKind {
    Labeled,
    HighConf,
    LowConf,
}

/// Label evidence of one sample: a singleton for labeled and
/// high-confidence samples, the indecisive set ξ otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySet {
    pub kind: CategoryKind,
    /// Sorted, deduplicated.
    pub categories: Vec<usize>,
}

impl CategorySet {
    pub fn labeled(label: usize) -> Self {
        Self {
            kind: CategoryKind::Labeled,
            categories: vec![label],
        }
    }

    pub fn contains(&self, class: usize) -> bool {
        self.categories.binary_search(&class).is_ok()
    }

    pub fn is_disjoint(&self, other: &CategorySet) -> bool {
        let (mut i, mut j) = (0, 0);
        let (a, b) = (&self.categories, &other.categories);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Equal => return false,
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
            }
        }
        true
    }
}

/// How the indecisive set of a low-confidence sample is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum XiRule {
    /// `{c : ȳ(c) > P′_G(c)}`
    #[default]
    Prior,
    Top1,
    Top5,
}

impl XiRule {
    pub fn indecisive_set(&self, global_probs: &[f64], prior: &[f64]) -> Vec<usize> {
        match self {
            XiRule::Prior => global_probs
                .iter()
                .zip(prior)
                .enumerate()
                .filter(|(_, (p, q))| p > q)
                .map(|(c, _)| c)
                .collect(),
            XiRule::Top1 => top_k(global_probs, 1),
            XiRule::Top5 => top_k(global_probs, 5),
        }
    }
}

/// Indices of the `k` largest entries (ties to the lower index), sorted.
fn top_k(xs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx.truncate(k.min(xs.len()));
    idx.sort_unstable();
    idx
}

/// Evidence available for building a category set.
#[derive(Debug, Clone, Copy)]
pub enum Evidence<'a> {
    Labeled { label: usize },
    Unlabeled { verdict: Verdict, global_probs: &'a [f64] },
}

pub fn build_category_set(evidence: Evidence<'_>, prior: &[f64], rule: XiRule) -> CategorySet {
    match evidence {
        Evidence::Labeled { label } => CategorySet::labeled(label),
        Evidence::Unlabeled {
            verdict: Verdict::HighConf { pseudo_label },
            ..
        } => CategorySet {
            kind: CategoryKind::HighConf,
            categories: vec![pseudo_label],
        },
        Evidence::Unlabeled {
            verdict: Verdict::LowConf,
            global_probs,
        } => CategorySet {
            kind: CategoryKind::LowConf,
            categories: rule.indecisive_set(global_probs, prior),
        },
    }
}

/// Per-class counts of labeled ground truths and high-confidence
/// pseudo-labels seen during local training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorStats {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl PriorStats {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![0; num_classes],
            total: 0,
        }
    }

    pub fn record(&mut self, class: usize) {
        self.counts[class] += 1;
        self.total += 1;
    }

    /// `counts / total`, or uniform when nothing was recorded.
    pub fn normalized(&self) -> Vec<f64> {
        let c = self.counts.len();
        if self.total == 0 {
            return vec![1.0 / c as f64; c];
        }
        self.counts
            .iter()
            .map(|&n| n as f64 / self.total as f64)
            .collect()
    }
}

pub fn collect_prior_stats(
    labeled_truths: &[usize],
    high_conf_labels: &[usize],
    num_classes: usize,
) -> PriorStats {
    let mut stats = PriorStats::new(num_classes);
    for &c in labeled_truths.iter().chain(high_conf_labels) {
        stats.record(c);
    }
    stats
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorGroup {
    HighConf,
    LowConf,
}

/// One unlabeled anchor of the contrastive pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    /// Index into the batch feature list.
    pub feature_index: usize,
    pub group: AnchorGroup,
    /// Positive proxy as `(class, weight)` pairs over rows of Ω.
    pub positive: Vec<(usize, f64)>,
    /// Batch feature indices whose category sets are disjoint from the anchor's.
    pub negatives: Vec<usize>,
}

impl Anchor {
    /// Materializes `Σ w_c · ω^c`. A single unit weight returns the row itself.
    pub fn positive_vector(&self, proxies: &Matrix) -> Vec<f64> {
        if let [(c, w)] = self.positive.as_slice() {
            if *w == 1.0 {
                return proxies.row(*c).to_vec();
            }
        }
        let mut out = vec![0.0; proxies.cols()];
        for &(c, w) in &self.positive {
            crate::linalg::axpy(&mut out, w, proxies.row(c));
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProxyPool {
    pub anchors: Vec<Anchor>,
}

/// Builds the pool over a batch whose feature list is indexed like
/// `categories`. `local_probs[k]` is the local model's softmax for sample `k`
/// and is only read for low-confidence anchors. Samples whose `participates`
/// flag is false (and low-confidence samples with an empty ξ) are left out
/// of the pool entirely.
pub fn build_proxy_pool(
    categories: &[CategorySet],
    local_probs: &[Vec<f64>],
    participates: &[bool],
) -> ProxyPool {
    let member = |k: usize| participates[k] && !categories[k].categories.is_empty();
    let mut anchors = Vec::new();
    for (i, set) in categories.iter().enumerate() {
        if !member(i) || set.kind == CategoryKind::Labeled {
            continue;
        }
        let (group, positive) = match set.kind {
            CategoryKind::HighConf => (AnchorGroup::HighConf, vec![(set.categories[0], 1.0)]),
            _ => {
                let probs = &local_probs[i];
                let mass: f64 = set.categories.iter().map(|&c| probs[c]).sum();
                (
                    AnchorGroup::LowConf,
                    set.categories.iter().map(|&c| (c, probs[c] / mass)).collect(),
                )
            }
        };
        let negatives = (0..categories.len())
            .filter(|&j| j != i && member(j) && set.is_disjoint(&categories[j]))
            .collect();
        anchors.push(Anchor {
            feature_index: i,
            group,
            positive,
            negatives,
        });
    }
    ProxyPool { anchors }
}

/// Treatment of low-confidence unlabeled samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LowConfMode {
    /// Excluded from every loss term.
    Discard,
    /// Argmax pseudo-labels fed into the consistency loss.
    Direct,
    /// Indecisive-categories contrastive learning.
    #[default]
    Icpl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub weights: LossWeights,
    pub low_conf_mode: LowConfMode,
    pub xi_rule: XiRule,
    pub augment: AugmentConfig,
    /// Rescales a step's gradient to at most this Euclidean norm.
    pub grad_clip_norm: Option<f64>,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 0.1,
            tau: DEFAULT_TAU,
            weights: LossWeights::default(),
            low_conf_mode: LowConfMode::Icpl,
            xi_rule: XiRule::Prior,
            augment: AugmentConfig::default(),
            grad_clip_norm: Some(DEFAULT_GRAD_CLIP),
        }
    }
}

/// Per-client counters for one round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientRoundStats {
    /// Unlabeled samples that entered no loss term during the final epoch.
    pub excluded_count: usize,
    pub unlabeled_seen: usize,
    pub high_conf_count: usize,
    pub high_conf_correct: usize,
    pub low_conf_count: usize,
    /// Low-confidence samples whose global argmax equals the hidden truth.
    pub low_conf_top1_correct: usize,
    /// Low-confidence samples whose ξ contains the hidden truth.
    pub low_conf_xi_hits: usize,
    pub steps: usize,
    pub mean_loss: LocalLossParts,
}

#[derive(Debug, Clone)]
pub struct LocalTrainOutput {
    pub params: ModelParams,
    pub prior_stats: PriorStats,
    pub stats: ClientRoundStats,
}

/// A mini-batch with everything that depends only on the broadcast model
/// and the random augmentations. Index space: labeled samples first, then
/// unlabeled.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub labeled: Vec<(Vec<f64>, usize)>,
    pub triage: Vec<Triage>,
    /// Hidden truths of the unlabeled part (evaluation only).
    pub unlabeled_truth: Vec<usize>,
    pub categories: Vec<CategorySet>,
    /// Strong-augmented input and pseudo-label for every sample in L_u.
    pub consistency: Vec<(Vec<f64>, usize)>,
    pub participates: Vec<bool>,
}

impl PreparedBatch {
    /// Inputs whose features form the contrastive feature list.
    pub fn feature_inputs(&self) -> Vec<&[f64]> {
        self.labeled
            .iter()
            .map(|(x, _)| x.as_slice())
            .chain(self.triage.iter().map(|t| t.weak_input.as_slice()))
            .collect()
    }
}

/// Triage, category sets and strong augmentations for one batch.
#[allow(clippy::too_many_arguments)]
pub fn prepare_batch<R: Rng + ?Sized>(
    global: &ModelParams,
    labeled: &[(&[f64], usize)],
    unlabeled: &[(&[f64], usize)],
    prior: &[f64],
    cfg: &LocalTrainConfig,
    rng: &mut R,
) -> Result<PreparedBatch> {
    let raw: Vec<&[f64]> = unlabeled.iter().map(|(x, _)| *x).collect();
    let triage = triage_confidence(global, &raw, cfg.tau, &cfg.augment, rng)?;
    let xi_rule = match cfg.low_conf_mode {
        LowConfMode::Direct => XiRule::Top1,
        _ => cfg.xi_rule,
    };
    let mut categories: Vec<CategorySet> = labeled
        .iter()
        .map(|&(_, y)| CategorySet::labeled(y))
        .collect();
    let mut participates = vec![true; labeled.len()];
    let mut consistency = Vec::new();
    for t in &triage {
        let set = build_category_set(
            Evidence::Unlabeled {
                verdict: t.verdict,
                global_probs: &t.global_probs,
            },
            prior,
            xi_rule,
        );
        let pseudo = match (t.verdict, cfg.low_conf_mode) {
            (Verdict::HighConf { pseudo_label }, _) => Some(pseudo_label),
            (Verdict::LowConf, LowConfMode::Direct) => Some(argmax(&t.global_probs)),
            (Verdict::LowConf, _) => None,
        };
        if let Some(label) = pseudo {
            consistency.push((augment_strong(&t.weak_input, &cfg.augment, rng), label));
        }
        participates.push(!(set.kind == CategoryKind::LowConf && cfg.low_conf_mode == LowConfMode::Discard));
        categories.push(set);
    }
    Ok(PreparedBatch {
        labeled: labeled.iter().map(|&(x, y)| (x.to_vec(), y)).collect(),
        triage,
        unlabeled_truth: unlabeled.iter().map(|&(_, y)| y).collect(),
        categories,
        consistency,
        participates,
    })
}

/// Pool for `batch` using the local model's probabilities as mixing weights.
pub fn pool_for(params: &ModelParams, batch: &PreparedBatch) -> Result<ProxyPool> {
    let inputs = batch.feature_inputs();
    let mut local_probs = Vec::with_capacity(inputs.len());
    for (k, x) in inputs.iter().enumerate() {
        if batch.categories[k].kind == CategoryKind::LowConf && batch.participates[k] {
            local_probs.push(params.predict_probs(x)?);
        } else {
            local_probs.push(Vec::new());
        }
    }
    Ok(build_proxy_pool(&batch.categories, &local_probs, &batch.participates))
}

/// `L_s + α·L_u + β·L_ICPL` on a prepared batch with a fixed pool.
pub fn local_objective(
    params: &ModelParams,
    batch: &PreparedBatch,
    pool: &ProxyPool,
    weights: &LossWeights,
) -> Result<(LossOutput, LocalLossParts)> {
    let labeled: Vec<(&[f64], usize)> = batch.labeled.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let supervised = loss_supervised(params, &labeled)?;
    let cons: Vec<(&[f64], usize)> = batch
        .consistency
        .iter()
        .map(|(x, y)| (x.as_slice(), *y))
        .collect();
    let unsupervised = if weights.alpha != 0.0 {
        loss_unsupervised(params, &cons)?
    } else {
        LossOutput::zero(params)
    };
    let icpl = if weights.beta != 0.0 {
        loss_icpl(params, pool, &batch.feature_inputs())?
    } else {
        LossOutput::zero(params)
    };
    Ok(weights.combine(supervised, unsupervised, icpl))
}

/// Samples per step from each pool: `(labeled, unlabeled, steps)`.
fn batch_plan(n_labeled: usize, n_unlabeled: usize, batch_size: usize) -> (usize, usize, usize) {
    let batch_size = batch_size.max(1);
    if n_unlabeled == 0 {
        let b = batch_size.min(n_labeled);
        return (b, 0, n_labeled.div_ceil(b));
    }
    let total = (n_labeled + n_unlabeled) as f64;
    let b_s = ((batch_size as f64 * n_labeled as f64 / total).round() as usize).clamp(1, n_labeled);
    let b_u = batch_size.saturating_sub(b_s).max(1);
    (b_s, b_u, n_unlabeled.div_ceil(b_u))
}

/// Runs `cfg.epochs` epochs of mini-batch SGD starting from the broadcast
/// model. Triage always uses the broadcast model; `prior` is the one
/// broadcast at round start.
pub fn local_train<R: Rng + ?Sized>(
    global: &ModelParams,
    data: &ClientDataset,
    prior: &[f64],
    cfg: &LocalTrainConfig,
    rng: &mut R,
) -> Result<LocalTrainOutput> {
    if data.labeled.is_empty() {
        return Err(Error::InvalidArgument("client holds no labeled samples".into()));
    }
    let c = global.num_classes();
    if prior.len() != c {
        return Err(Error::Dimension {
            context: "prior",
            expected: c,
            got: prior.len(),
        });
    }
    let mut params = global.clone();
    let mut prior_stats = PriorStats::new(c);
    let mut stats = ClientRoundStats::default();
    let (b_s, b_u, steps) = batch_plan(data.labeled.len(), data.unlabeled.len(), cfg.batch_size);

    let mut lab_order: Vec<usize> = (0..data.labeled.len()).collect();
    let mut unl_order: Vec<usize> = (0..data.unlabeled.len()).collect();
    let mut loss_acc = LocalLossParts::default();

    for epoch in 0..cfg.epochs {
        lab_order.shuffle(rng);
        unl_order.shuffle(rng);
        let last_epoch = epoch + 1 == cfg.epochs;
        let mut lab_cursor = 0;
        for step in 0..steps {
            let labeled: Vec<(&[f64], usize)> = (0..b_s)
                .map(|_| {
                    let s = &data.labeled[lab_order[lab_cursor % lab_order.len()]];
                    lab_cursor += 1;
                    (s.features.as_slice(), s.true_label)
                })
                .collect();
            let lo = (step * b_u).min(unl_order.len());
            let hi = ((step + 1) * b_u).min(unl_order.len());
            let unlabeled: Vec<(&[f64], usize)> = unl_order[lo..hi]
                .iter()
                .map(|&i| {
                    let s = &data.unlabeled[i];
                    (s.features.as_slice(), s.true_label)
                })
                .collect();

            let batch = prepare_batch(global, &labeled, &unlabeled, prior, cfg, rng)?;
            let pool = if cfg.weights.beta != 0.0 {
                pool_for(&params, &batch)?
            } else {
                ProxyPool::default()
            };
            record_batch(&batch, &pool, cfg, last_epoch, &mut prior_stats, &mut stats);

            let (mut out, parts) = local_objective(&params, &batch, &pool, &cfg.weights)?;
            if let Some(max) = cfg.grad_clip_norm {
                clip_norm(&mut out.grads, max);
            }
            params.apply_sgd(&out.grads, cfg.lr);
            loss_acc.supervised += parts.supervised;
            loss_acc.unsupervised += parts.unsupervised;
            loss_acc.icpl += parts.icpl;
            stats.steps += 1;
        }
    }
    if stats.steps > 0 {
        let n = stats.steps as f64;
        stats.mean_loss = LocalLossParts {
            supervised: loss_acc.supervised / n,
            unsupervised: loss_acc.unsupervised / n,
            icpl: loss_acc.icpl / n,
        };
    }
    Ok(LocalTrainOutput {
        params,
        prior_stats,
        stats,
    })
}

/// Scales `grads` down to norm `max` if it is longer; returns the
/// original norm.
pub fn clip_norm(grads: &mut GradientBuffer, max: f64) -> f64 {
    let norm = grads.norm_sq().sqrt();
    if norm > max {
        grads.scale(max / norm);
    }
    norm
}

fn record_batch(
    batch: &PreparedBatch,
    pool: &ProxyPool,
    cfg: &LocalTrainConfig,
    last_epoch: bool,
    prior_stats: &mut PriorStats,
    stats: &mut ClientRoundStats,
) {
    let n_lab = batch.labeled.len();
    for (_, y) in &batch.labeled {
        prior_stats.record(*y);
    }
    let in_icpl = |k: usize| {
        pool.anchors
            .iter()
            .any(|a| a.feature_index == k && !a.negatives.is_empty())
    };
    for (u, t) in batch.triage.iter().enumerate() {
        let truth = batch.unlabeled_truth[u];
        let k = n_lab + u;
        match t.verdict {
            Verdict::HighConf { pseudo_label } => {
                prior_stats.record(pseudo_label);
                stats.high_conf_count += 1;
                stats.high_conf_correct += usize::from(pseudo_label == truth);
            }
            Verdict::LowConf => {
                stats.low_conf_count += 1;
                stats.low_conf_top1_correct += usize::from(argmax(&t.global_probs) == truth);
                stats.low_conf_xi_hits += usize::from(batch.categories[k].contains(truth));
                if last_epoch {
                    let used = match cfg.low_conf_mode {
                        LowConfMode::Discard => false,
                        LowConfMode::Direct => cfg.weights.alpha != 0.0,
                        LowConfMode::Icpl => cfg.weights.beta != 0.0 && in_icpl(k),
                    };
                    stats.excluded_count += usize::from(!used);
                }
            }
        }
        if last_epoch {
            stats.unlabeled_seen += 1;
        }
    }
}

/// Full-batch gradient descent on a frozen batch and pool, halving the
/// learning rate whenever a step would raise the loss.
#[derive(Debug, Clone)]
pub struct DescentTrace {
    /// Loss before the first step and after every accepted step.
    pub losses: Vec<f64>,
    pub final_lr: f64,
    pub halvings: usize,
    pub exhausted: bool,
    pub params: ModelParams,
}

pub const MAX_HALVINGS: usize = 20;

pub fn descent_trace(
    start: &ModelParams,
    batch: &PreparedBatch,
    weights: &LossWeights,
    lr: f64,
    steps: usize,
) -> Result<DescentTrace> {
    let pool = pool_for(start, batch)?;
    let mut params = start.clone();
    let (mut current, _) = local_objective(&params, batch, &pool, weights)?;
    let mut trace = DescentTrace {
        losses: vec![current.value],
        final_lr: lr,
        halvings: 0,
        exhausted: false,
        params: params.clone(),
    };
    'outer: for _ in 0..steps {
        loop {
            let candidate = crate::model::sgd_step(&params, &current.grads, trace.final_lr);
            let (next, _) = local_objective(&candidate, batch, &pool, weights)?;
            if next.value <= current.value {
                params = candidate;
                current = next;
                trace.losses.push(current.value);
                break;
            }
            if trace.halvings == MAX_HALVINGS {
                trace.exhausted = true;
                break 'outer;
            }
            trace.final_lr /= 2.0;
            trace.halvings += 1;
        }
    }
    trace.params = params;
    Ok(trace)
}
