//! Loss values and analytic gradients: supervised cross-entropy, the
//! pseudo-label consistency term, the indecisive-categories contrastive term
//! and the server-side global proxy tuning objective.

use serde::{Deserialize, Serialize};

use crate::client::{AnchorGroup, ProxyPool};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{dot, log_sum_exp, norm, softmax, squared_distance, Matrix};
use crate::model::{ForwardTrace, GradientBuffer, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grads: GradientBuffer,
}

impl LossOutput {
    pub fn zero(params: &ModelParams) -> Self {
        Self {
            value: 0.0,
            grads: GradientBuffer::zeros_like(params),
        }
    }
}

/// Per-term values of one local objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LocalLossParts {
    pub supervised: f64,
    pub unsupervised: f64,
    pub icpl: f64,
}

impl LossWeights {
    /// `L_s + α·L_u + β·L_ICPL`
    pub fn combine(
        &self,
        supervised: LossOutput,
        unsupervised: LossOutput,
        icpl: LossOutput,
    ) -> (LossOutput, LocalLossParts) {
        let parts = LocalLossParts {
            supervised: supervised.value,
            unsupervised: unsupervised.value,
            icpl: icpl.value,
        };
        let mut grads = supervised.grads;
        grads.add_scaled(self.alpha, &unsupervised.grads);
        grads.add_scaled(self.beta, &icpl.grads);
        let value = parts.supervised + self.alpha * parts.unsupervised + self.beta * parts.icpl;
        (LossOutput { value, grads }, parts)
    }
}

/// Mean of `−log p[target]` with gradients w.r.t. every parameter.
fn mean_cross_entropy(params: &ModelParams, batch: &[(&[f64], usize)]) -> Result<LossOutput> {
    let c = params.num_classes();
    let n = batch.len() as f64;
    let mut out = LossOutput::zero(params);
    for &(x, target) in batch {
        if target >= c {
            return Err(Error::InvalidArgument(format!(
                "label {target} outside [0, {c})"
            )));
        }
        let trace = params.extract(x)?;
        let (logits, probs) = params.classify(trace.features())?;
        out.value += (log_sum_exp(&logits) - logits[target]) / n;
        let mut d_logits = probs;
        d_logits[target] -= 1.0;
        d_logits.iter_mut().for_each(|v| *v /= n);
        let dz = params.classifier_backward(trace.features(), &d_logits, &mut out.grads);
        trace.backward(&dz, &mut out.grads);
    }
    Ok(out)
}

/// Supervised cross-entropy on raw labeled inputs. An empty batch is an
/// error: the caller must skip the term.
pub fn loss_supervised(params: &ModelParams, batch: &[(&[f64], usize)]) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::Empty("supervised batch"));
    }
    mean_cross_entropy(params, batch)
}

/// Cross-entropy between strong-augmented predictions and fixed one-hot
/// pseudo-labels, i.e. `KL(one-hot ‖ prediction)`. Empty batches contribute 0.
pub fn loss_unsupervised(params: &ModelParams, batch: &[(&[f64], usize)]) -> Result<LossOutput> {
    if batch.is_empty() {
        return Ok(LossOutput::zero(params));
    }
    mean_cross_entropy(params, batch)
}

/// Contrastive loss over a positive-negative proxy pool.
///
/// `inputs[k]` is the input whose feature `z_k` the pool indexes. For each
/// anchor `i` with positive `p_i` and negatives `R_i`:
/// `ℓ_i = −log(e^{z_i·p_i} / (e^{z_i·p_i} + Σ_{j∈R_i} e^{z_i·z_j}))`.
/// The loss is the mean of `ℓ_i` over high-confidence anchors plus the mean
/// over low-confidence anchors. Anchors without negatives carry no contrast
/// and are excluded from both the sum and the count. Mixing weights of a
/// low-confidence positive are constants for differentiation.
pub fn loss_icpl(params: &ModelParams, pool: &ProxyPool, inputs: &[&[f64]]) -> Result<LossOutput> {
    let mut out = LossOutput::zero(params);
    let active: Vec<_> = pool
        .anchors
        .iter()
        .filter(|a| !a.negatives.is_empty())
        .collect();
    if active.is_empty() {
        return Ok(out);
    }
    for a in &active {
        let max_ref = a.negatives.iter().copied().chain([a.feature_index]).max();
        if let Some(m) = max_ref {
            if m >= inputs.len() {
                return Err(Error::InvalidArgument(format!(
                    "pool references feature {m} but only {} inputs were given",
                    inputs.len()
                )));
            }
        }
    }
    let n_hc = active.iter().filter(|a| a.group == AnchorGroup::HighConf).count() as f64;
    let n_lc = active.iter().filter(|a| a.group == AnchorGroup::LowConf).count() as f64;

    let traces: Vec<ForwardTrace<'_>> = inputs
        .iter()
        .map(|x| params.extract(x))
        .collect::<Result<_>>()?;
    let d = params.feature_dim();
    let mut dz = vec![vec![0.0; d]; inputs.len()];

    for a in active {
        let weight = match a.group {
            AnchorGroup::HighConf => 1.0 / n_hc,
            AnchorGroup::LowConf => 1.0 / n_lc,
        };
        let zi = traces[a.feature_index].features();
        let positive = a.positive_vector(&params.proxies);
        ensure_dim("positive proxy", d, positive.len())?;

        let mut scores = Vec::with_capacity(a.negatives.len() + 1);
        scores.push(dot(zi, &positive));
        scores.extend(a.negatives.iter().map(|&j| dot(zi, traces[j].features())));
        out.value += weight * (log_sum_exp(&scores) - scores[0]);

        // ∂ℓ/∂s_k = softmax(s)_k − [k = positive]
        let mut g = softmax(&scores);
        g[0] -= 1.0;
        g.iter_mut().for_each(|v| *v *= weight);

        crate::linalg::axpy(&mut dz[a.feature_index], g[0], &positive);
        for &(class, w) in &a.positive {
            crate::linalg::axpy(out.grads.proxies_mut().row_mut(class), g[0] * w, zi);
        }
        for (k, &j) in a.negatives.iter().enumerate() {
            let zj = traces[j].features().to_vec();
            crate::linalg::axpy(&mut dz[a.feature_index], g[k + 1], &zj);
            let zi_owned = zi.to_vec();
            crate::linalg::axpy(&mut dz[j], g[k + 1], &zi_owned);
        }
    }

    for (trace, d_feat) in traces.into_iter().zip(&dz) {
        if d_feat.iter().any(|v| *v != 0.0) {
            trace.backward(d_feat, &mut out.grads);
        }
    }
    Ok(out)
}

/// Distance `φ` used by global proxy tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    SquaredEuclidean,
    Cosine,
}

impl DistanceMetric {
    pub fn eval(&self, g: &[f64], w: &[f64]) -> f64 {
        match self {
            DistanceMetric::SquaredEuclidean => squared_distance(g, w),
            DistanceMetric::Cosine => {
                let (ng, nw) = (norm(g).max(1e-12), norm(w).max(1e-12));
                1.0 - dot(g, w) / (ng * nw)
            }
        }
    }

    /// `∇_g φ(g, w)` accumulated as `acc += scale · ∇_g φ`.
    fn grad_into(&self, g: &[f64], w: &[f64], scale: f64, acc: &mut [f64]) {
        match self {
            DistanceMetric::SquaredEuclidean => {
                for ((a, gi), wi) in acc.iter_mut().zip(g).zip(w) {
                    *a += scale * 2.0 * (gi - wi);
                }
            }
            DistanceMetric::Cosine => {
                let (ng, nw) = (norm(g).max(1e-12), norm(w).max(1e-12));
                let cos = dot(g, w) / (ng * nw);
                for ((a, gi), wi) in acc.iter_mut().zip(g).zip(w) {
                    // ∇ cos = w/(|g||w|) − cos · g/|g|²
                    *a -= scale * (wi / (ng * nw) - cos * gi / (ng * ng));
                }
            }
        }
    }
}

/// Global proxy tuning loss and its gradient w.r.t. the global proxies:
/// `Σ_c Σ_m −log softmax_c(−φ(Ω_G^c, ω_m^·))`.
pub fn loss_gpt(
    global: &Matrix,
    clients: &[Matrix],
    metric: DistanceMetric,
) -> Result<(f64, Matrix)> {
    let (c, d) = global.shape();
    if c == 0 {
        return Err(Error::InvalidArgument("global proxies have no classes".into()));
    }
    if clients.is_empty() {
        return Err(Error::Empty("client proxies"));
    }
    for m in clients {
        if m.shape() != (c, d) {
            return Err(Error::InvalidArgument(format!(
                "client proxies shaped {:?}, expected {:?}",
                m.shape(),
                (c, d)
            )));
        }
    }
    let mut value = 0.0;
    let mut grad = Matrix::zeros(c, d);
    for class in 0..c {
        let g = global.row(class);
        let mut acc = vec![0.0; d];
        for m in clients {
            let neg_dist: Vec<f64> = (0..c).map(|k| -metric.eval(g, m.row(k))).collect();
            value += log_sum_exp(&neg_dist) - neg_dist[class];
            let mut coef = softmax(&neg_dist);
            coef[class] -= 1.0;
            // a_k = −φ_k, so ∂ℓ/∂g = Σ_k coef_k · (−∇φ_k)
            for (k, &ck) in coef.iter().enumerate() {
                if ck != 0.0 {
                    metric.grad_into(g, m.row(k), -ck, &mut acc);
                }
            }
        }
        grad.row_mut(class).copy_from_slice(&acc);
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::Anchor;
    use crate::gradcheck::{check_flat, grad_check};
    use crate::model::Architecture;
    use crate::rng::{stream, Purpose};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal<R: Rng>(rng: &mut R) -> f64 {
        StandardNormal.sample(rng)
    }

    fn params(seed: u64, d_in: usize, c: usize) -> ModelParams {
        let mut rng = stream(seed, Purpose::Init, 0, 0);
        ModelParams::init(&Architecture::default_for(d_in, c), &mut rng).unwrap()
    }

    fn inputs(seed: u64, n: usize, d_in: usize) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, Purpose::Data, 0, 0);
        (0..n).map(|_| (0..d_in).map(|_| normal(&mut rng)).collect()).collect()
    }

    #[test]
    fn supervised_uniform_model_gives_ln_c() {
        let arch = Architecture::default_for(4, 5);
        let p = ModelParams::zeros(&arch);
        let xs = inputs(1, 3, 4);
        let batch: Vec<(&[f64], usize)> = xs.iter().zip([0, 3, 4]).map(|(x, y)| (x.as_slice(), y)).collect();
        let out = loss_supervised(&p, &batch).unwrap();
        assert!((out.value - 5f64.ln()).abs() < 1e-14);
        assert!(loss_supervised(&p, &[]).is_err());
    }

    #[test]
    fn unsupervised_uniform_and_empty() {
        let p = ModelParams::zeros(&Architecture::default_for(4, 10));
        let xs = inputs(2, 2, 4);
        let batch: Vec<(&[f64], usize)> = xs.iter().map(|x| (x.as_slice(), 7)).collect();
        assert!((loss_unsupervised(&p, &batch).unwrap().value - 10f64.ln()).abs() < 1e-14);
        let empty = loss_unsupervised(&p, &[]).unwrap();
        assert_eq!(empty.value, 0.0);
        assert!(empty.grads.is_zero());
    }

    #[test]
    fn confident_correct_model_has_zero_loss() {
        let arch = Architecture {
            input_dim: 2,
            hidden: vec![],
            feature_dim: 2,
            num_classes: 2,
        };
        let mut p = ModelParams::zeros(&arch);
        p.layers[0].weights = Matrix::identity(2);
        p.proxies = Matrix::from_rows(&[vec![1000.0, 0.0], vec![0.0, 1000.0]]);
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let out = loss_supervised(&p, &[(&a, 0), (&b, 1)]).unwrap();
        assert_eq!(out.value, 0.0);
        let out = loss_unsupervised(&p, &[(&a, 0)]).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn supervised_matches_per_sample_oracle() {
        let p = params(4, 6, 4);
        let xs = inputs(5, 5, 6);
        let labels = [0, 1, 2, 3, 1];
        let batch: Vec<(&[f64], usize)> = xs.iter().zip(labels).map(|(x, y)| (x.as_slice(), y)).collect();
        let got = loss_supervised(&p, &batch).unwrap().value;
        let mut oracle = 0.0;
        for (x, &y) in xs.iter().zip(&labels) {
            let probs = p.predict_probs(x).unwrap();
            oracle -= probs[y].ln();
        }
        oracle /= xs.len() as f64;
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn supervised_and_unsupervised_gradients_pass_fd() {
        for seed in 0..10 {
            let p = params(seed, 5, 4);
            let xs = inputs(seed + 100, 3, 5);
            let batch: Vec<(&[f64], usize)> = xs.iter().zip([0, 2, 3]).map(|(x, y)| (x.as_slice(), y)).collect();
            let r = grad_check(
                |q| {
                    let o = loss_supervised(q, &batch).unwrap();
                    (o.value, o.grads)
                },
                &p,
                1e-5,
            );
            assert!(r.passed(), "L_s seed {seed}: {r:?}");
            let r = grad_check(
                |q| {
                    let o = loss_unsupervised(q, &batch).unwrap();
                    (o.value, o.grads)
                },
                &p,
                1e-5,
            );
            assert!(r.passed(), "L_u seed {seed}: {r:?}");
        }
    }

    fn hc(feature_index: usize, class: usize, negatives: Vec<usize>) -> Anchor {
        Anchor {
            feature_index,
            group: AnchorGroup::HighConf,
            positive: vec![(class, 1.0)],
            negatives,
        }
    }

    #[test]
    fn icpl_anchor_without_negatives_is_excluded() {
        let p = params(1, 4, 3);
        let xs = inputs(1, 1, 4);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let pool = ProxyPool {
            anchors: vec![hc(0, 1, vec![])],
        };
        let out = loss_icpl(&p, &pool, &refs).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grads.is_zero());
    }

    #[test]
    fn icpl_symmetric_pair_gives_ln2() {
        // Identity extractor: z = x. Choose z_i·ω = z_i·z_j.
        let arch = Architecture {
            input_dim: 2,
            hidden: vec![],
            feature_dim: 2,
            num_classes: 2,
        };
        let mut p = ModelParams::zeros(&arch);
        p.layers[0].weights = Matrix::identity(2);
        p.proxies = Matrix::from_rows(&[vec![0.3, 0.7], vec![2.0, -1.0]]);
        let zi = [1.0, 1.0]; // z_i·ω^0 = 1.0
        let zj = [0.5, 0.5]; // z_i·z_j = 1.0
        let pool = ProxyPool {
            anchors: vec![hc(0, 0, vec![1])],
        };
        let out = loss_icpl(&p, &pool, &[&zi, &zj]).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-15);
    }

    /// Six-sample batch: 2 labeled (0, 1), 2 high-confidence (2, 3),
    /// 2 low-confidence (4, 5).
    fn mixed_pool() -> ProxyPool {
        ProxyPool {
            anchors: vec![
                hc(2, 0, vec![1, 3, 5]),
                hc(3, 2, vec![0, 2]),
                Anchor {
                    feature_index: 4,
                    group: AnchorGroup::LowConf,
                    positive: vec![(1, 0.75), (3, 0.25)],
                    negatives: vec![0, 2, 3],
                },
                Anchor {
                    feature_index: 5,
                    group: AnchorGroup::LowConf,
                    positive: vec![(0, 0.4), (2, 0.6)],
                    negatives: vec![1],
                },
            ],
        }
    }

    #[test]
    fn icpl_matches_brute_force_and_fd() {
        for seed in 0..10 {
            let p = params(seed, 5, 4);
            let xs = inputs(seed + 50, 6, 5);
            let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            let pool = mixed_pool();
            let got = loss_icpl(&p, &pool, &refs).unwrap();

            // Direct scalar evaluation of the two-group mean.
            let z: Vec<Vec<f64>> = xs
                .iter()
                .map(|x| p.extract(x).unwrap().features().to_vec())
                .collect();
            let term = |a: &Anchor| {
                let mut pos = vec![0.0; z[0].len()];
                for &(c, w) in &a.positive {
                    for (k, v) in pos.iter_mut().enumerate() {
                        *v += w * p.proxies[(c, k)];
                    }
                }
                let sp: f64 = z[a.feature_index].iter().zip(&pos).map(|(x, y)| x * y).sum();
                let mut denom = sp.exp();
                for &j in &a.negatives {
                    let s: f64 = z[a.feature_index].iter().zip(&z[j]).map(|(x, y)| x * y).sum();
                    denom += s.exp();
                }
                -(sp.exp() / denom).ln()
            };
            let oracle = (term(&pool.anchors[0]) + term(&pool.anchors[1])) / 2.0
                + (term(&pool.anchors[2]) + term(&pool.anchors[3])) / 2.0;
            assert!((got.value - oracle).abs() < 1e-10, "{} vs {oracle}", got.value);

            let r = grad_check(
                |q| {
                    let o = loss_icpl(q, &pool, &refs).unwrap();
                    (o.value, o.grads)
                },
                &p,
                1e-5,
            );
            assert!(r.passed(), "L_ICPL seed {seed}: {r:?}");
        }
    }

    #[test]
    fn icpl_decreases_with_positive_similarity() {
        let arch = Architecture {
            input_dim: 2,
            hidden: vec![],
            feature_dim: 2,
            num_classes: 2,
        };
        let mut p = ModelParams::zeros(&arch);
        p.layers[0].weights = Matrix::identity(2);
        let zi = [1.0, 0.0];
        let zj = [0.2, 0.9];
        let pool = ProxyPool {
            anchors: vec![hc(0, 0, vec![1])],
        };
        let mut last = f64::INFINITY;
        for k in 0..10 {
            p.proxies = Matrix::from_rows(&[vec![k as f64 * 0.5, 0.0], vec![0.0, 1.0]]);
            let v = loss_icpl(&p, &pool, &[&zi, &zj]).unwrap().value;
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn gpt_single_class_is_zero() {
        let g = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let w = Matrix::from_rows(&[vec![-3.0, 0.5]]);
        let (v, grad) = loss_gpt(&g, &[w.clone(), w], DistanceMetric::SquaredEuclidean).unwrap();
        assert_eq!(v, 0.0);
        assert!(grad.as_slice().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn gpt_two_class_closed_form() {
        // φ(ω¹, ω²) = 4 with ω¹ = (0,0), ω² = (2,0).
        let w = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]);
        let (v, _) = loss_gpt(&w, std::slice::from_ref(&w), DistanceMetric::SquaredEuclidean).unwrap();
        let oracle = 2.0 * (1.0 + (-4f64).exp()).ln();
        assert!((v - oracle).abs() < 1e-15);
        assert!((v - 0.036_299_8).abs() < 1e-6);
    }

    #[test]
    fn gpt_rejects_bad_shapes() {
        let g = Matrix::zeros(3, 2);
        assert!(loss_gpt(&g, &[], DistanceMetric::SquaredEuclidean).is_err());
        assert!(loss_gpt(&g, &[Matrix::zeros(2, 2)], DistanceMetric::SquaredEuclidean).is_err());
        assert!(loss_gpt(&Matrix::zeros(0, 2), &[Matrix::zeros(0, 2)], DistanceMetric::Cosine).is_err());
    }

    fn random_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| normal(rng)).collect())
    }

    #[test]
    fn gpt_gradient_passes_fd_for_both_metrics() {
        for metric in [DistanceMetric::SquaredEuclidean, DistanceMetric::Cosine] {
            for seed in 0..10 {
                let mut rng = stream(seed, Purpose::Experiment, 0, 0);
                let g = random_matrix(&mut rng, 4, 8);
                let clients: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 4, 8)).collect();
                let (_, grad) = loss_gpt(&g, &clients, metric).unwrap();
                let r = check_flat(
                    |flat| {
                        let gm = Matrix::from_vec(4, 8, flat.to_vec());
                        loss_gpt(&gm, &clients, metric).unwrap().0
                    },
                    g.as_slice(),
                    grad.as_slice(),
                    1e-5,
                );
                assert!(r.passed(), "{metric:?} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn gpt_is_translation_invariant() {
        let mut rng = stream(4, Purpose::Experiment, 0, 0);
        let g = random_matrix(&mut rng, 3, 5);
        let clients: Vec<Matrix> = (0..4).map(|_| random_matrix(&mut rng, 3, 5)).collect();
        let shift: Vec<f64> = (0..5).map(|_| 10.0 * normal(&mut rng)).collect();
        let moved = |m: &Matrix| {
            let mut out = m.clone();
            for r in 0..m.rows() {
                crate::linalg::axpy(out.row_mut(r), 1.0, &shift);
            }
            out
        };
        let (a, _) = loss_gpt(&g, &clients, DistanceMetric::SquaredEuclidean).unwrap();
        let shifted: Vec<Matrix> = clients.iter().map(moved).collect();
        let (b, _) = loss_gpt(&moved(&g), &shifted, DistanceMetric::SquaredEuclidean).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn combine_weights_terms() {
        let p = params(0, 3, 2);
        let mut s = LossOutput::zero(&p);
        s.value = 1.0;
        let mut u = LossOutput::zero(&p);
        u.value = 2.0;
        let mut i = LossOutput::zero(&p);
        i.value = 4.0;
        let w = LossWeights { alpha: 0.5, beta: 0.25 };
        let (total, parts) = w.combine(s, u, i);
        assert_eq!(total.value, 3.0);
        assert_eq!(parts.icpl, 4.0);
    }
}
