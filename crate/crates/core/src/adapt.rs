//! Test-time twin-domain adaptation.
//!
//! Given a trained network, the K-shot support set of a target task and a
//! small labeled batch of source windows, each epoch
//!
//! 1. embeds source batch and support,
//! 2. forms source prototypes `p^s` from the source batch,
//! 3. estimates one covariance per class from the support embeddings and
//!    draws `K_A` Gaussian feature perturbations per support embedding,
//! 4. forms target prototypes `p^t` from support plus augmented features,
//! 5. minimizes `(L_anc1 + L_ent1) + (L_anc2 + L_ent2)`:
//!    support and augmented features are anchored to `p^s`, source features
//!    to `p^t`, and both directions carry a prediction-entropy penalty.
//!
//! Augmented features are constants of the graph; gradients reach the
//! network through support embeddings, source embeddings and both prototype
//! sets.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::episodic::{argmax_rows, compute_prototypes, log_posteriors, nll};
use crate::model::{forward, Distance, ModelState};
use crate::seed;
use crate::tensor::{adam_step, Graph, Tensor, Var};
use crate::{Error, Result};

/// Covariance of one class's support features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCovariance {
    /// `[w, w]`, symmetric.
    pub sigma: Tensor,
    /// Ridge actually added to the diagonal.
    pub lambda: f64,
}

/// Sample covariance (divisor K-1) plus `lambda I` with `lambda = shrinkage * trace / w`.
/// A single feature gives the identity.
pub fn estimate_covariance(features: &Tensor, shrinkage: f64) -> Result<ClassCovariance> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("covariance expects [K, w], got {s:?}")));
    }
    if !(shrinkage >= 0.0 && shrinkage.is_finite()) {
        return Err(Error::Argument(format!("shrinkage {shrinkage} must be non-negative")));
    }
    let (k, w) = (s[0], s[1]);
    if k == 1 {
        let mut eye = Tensor::zeros(&[w, w]);
        (0..w).for_each(|i| eye.data_mut()[i * w + i] = 1.0);
        return Ok(ClassCovariance { sigma: eye, lambda: 0.0 });
    }
    let x = features.data();
    let mut mean = vec![0.0; w];
    for r in 0..k {
        for (m, v) in mean.iter_mut().zip(&x[r * w..(r + 1) * w]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    let mut cov = vec![0.0; w * w];
    for r in 0..k {
        let row = &x[r * w..(r + 1) * w];
        for i in 0..w {
            let di = row[i] - mean[i];
            for j in i..w {
                cov[i * w + j] += di * (row[j] - mean[j]);
            }
        }
    }
    let denom = (k - 1) as f64;
    for i in 0..w {
        for j in i..w {
            let v = cov[i * w + j] / denom;
            cov[i * w + j] = v;
            cov[j * w + i] = v;
        }
    }
    let trace: f64 = (0..w).map(|i| cov[i * w + i]).sum();
    let lambda = shrinkage * trace / w as f64;
    (0..w).for_each(|i| cov[i * w + i] += lambda);
    Ok(ClassCovariance { sigma: Tensor::new(&[w, w], cov)?, lambda })
}

/// Symmetric PSD square root `A` with `A A = sigma`; slightly negative
/// eigenvalues from round-off are clamped to zero.
pub fn psd_sqrt(sigma: &Tensor) -> Result<Tensor> {
    let w = sigma.shape()[0];
    let m = DMatrix::from_row_slice(w, w, sigma.data());
    let eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(bad) = eig.eigenvalues.iter().find(|&&v| v < -1e-10 * scale) {
        return Err(Error::Numeric(format!("covariance is not positive semi-definite (eigenvalue {bad})")));
    }
    let roots: Vec<f64> = eig.eigenvalues.iter().map(|&v| libm::sqrt(v.max(0.0))).collect();
    let v = &eig.eigenvectors;
    let mut out = vec![0.0; w * w];
    for i in 0..w {
        for j in 0..w {
            out[i * w + j] = (0..w).map(|t| v[(i, t)] * roots[t] * v[(j, t)]).sum();
        }
    }
    Tensor::new(&[w, w], out)
}

/// Gaussian perturbations of support features.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedFeatureSet {
    /// `[S * K_A, w]`, the draws for support row `s` at rows `s*K_A .. (s+1)*K_A`; `None` when `K_A = 0`.
    pub features: Option<Tensor>,
    pub labels: Vec<usize>,
    pub seed: u64,
    pub epoch: usize,
}

impl AugmentedFeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `K_A` draws `z + A xi`, `xi ~ N(0, I)`, per support feature `z` of class `n`, where `A` is the square root of `Sigma_n`.
pub fn augment(
    features: &Tensor,
    labels: &[usize],
    covariances: &[ClassCovariance],
    k_aug: usize,
    seed: u64,
    epoch: usize,
) -> Result<AugmentedFeatureSet> {
    let s = features.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Dimension(format!("{} labels for features {s:?}", labels.len())));
    }
    if k_aug == 0 {
        return Ok(AugmentedFeatureSet { features: None, labels: Vec::new(), seed, epoch });
    }
    let w = s[1];
    let roots: Vec<Tensor> = covariances.iter().map(|c| psd_sqrt(&c.sigma)).collect::<Result<_>>()?;
    let mut rng = seed::rng(seed);
    let mut out = Vec::with_capacity(labels.len() * k_aug * w);
    let mut out_labels = Vec::with_capacity(labels.len() * k_aug);
    let mut xi = vec![0.0; w];
    for (r, &l) in labels.iter().enumerate() {
        let root = roots.get(l).ok_or_else(|| Error::Argument(format!("no covariance for class {l}")))?;
        let z = features.row(r);
        for _ in 0..k_aug {
            xi.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            for i in 0..w {
                let ar = root.row(i);
                out.push(z[i] + ar.iter().zip(&xi).map(|(a, b)| a * b).sum::<f64>());
            }
            out_labels.push(l);
        }
    }
    Ok(AugmentedFeatureSet { features: Some(Tensor::new(&[labels.len() * k_aug, w], out)?), labels: out_labels, seed, epoch })
}

/// Per-class covariances of `features` (rows grouped by `labels`).
pub fn class_covariances(features: &Tensor, labels: &[usize], n: usize, shrinkage: f64) -> Result<Vec<ClassCovariance>> {
    let w = features.shape()[1];
    (0..n)
        .map(|c| {
            let rows: Vec<f64> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == c)
                .flat_map(|(i, _)| features.row(i).to_vec())
                .collect();
            if rows.is_empty() {
                return Err(Error::Argument(format!("class {c} missing from support")));
            }
            estimate_covariance(&Tensor::new(&[rows.len() / w, w], rows)?, shrinkage)
        })
        .collect()
}

/// Target-to-source anchoring: mean NLL of support rows under `p^s` plus mean NLL of augmented rows under `p^s`.
pub fn anchoring_loss_t2s(
    g: &mut Graph,
    support: Var,
    support_labels: &[usize],
    aug: Option<(Var, &[usize])>,
    source_protos: Var,
    distance: Distance,
) -> Result<Var> {
    let lp = log_posteriors(g, support, source_protos, distance)?;
    let first = nll(g, lp, support_labels)?;
    match aug {
        Some((a, labels)) if !labels.is_empty() => {
            let lpa = log_posteriors(g, a, source_protos, distance)?;
            let second = nll(g, lpa, labels)?;
            g.add(first, second)
        }
        _ => Ok(first),
    }
}

/// Source-to-target anchoring: mean NLL of source rows under `p^t`.
pub fn anchoring_loss_s2t(g: &mut Graph, source: Var, source_labels: &[usize], target_protos: Var, distance: Distance) -> Result<Var> {
    let lp = log_posteriors(g, source, target_protos, distance)?;
    nll(g, lp, source_labels)
}

/// Mean Shannon entropy of the distance-softmax posteriors of `features`.
pub fn entropy_reg(g: &mut Graph, features: Var, protos: Var, distance: Distance) -> Result<Var> {
    let lp = log_posteriors(g, features, protos, distance)?;
    let p = g.exp(lp)?;
    let plogp = g.mul(p, lp)?;
    let total = g.sum(plogp)?;
    let rows = g.shape(features)[0];
    g.scale(total, -1.0 / rows as f64)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct AdaptConfig {
    pub epochs: usize,
    /// Augmented features per support feature (`K_A`).
    pub k_aug: usize,
    pub lr: f64,
    pub shrinkage: f64,
    /// Draw augmented features once, at the first epoch, instead of every epoch.
    pub freeze_augmentation: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { epochs: 10, k_aug: 3, lr: 1e-3, shrinkage: 1e-3, freeze_augmentation: false }
    }
}

/// Loss components of one adaptation epoch, evaluated before its update.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLosses {
    pub anc1: f64,
    pub ent1: f64,
    pub anc2: f64,
    pub ent2: f64,
}

impl EpochLosses {
    pub fn total(&self) -> f64 {
        (self.anc1 + self.ent1) + (self.anc2 + self.ent2)
    }
}

/// Handles into one adaptation-loss graph.
#[derive(Debug, Clone, Copy)]
pub struct TtaGraph {
    pub total: Var,
    pub anc1: Var,
    pub ent1: Var,
    pub anc2: Var,
    pub ent2: Var,
    pub support_emb: Var,
    pub source_emb: Var,
    pub aug: Option<Var>,
    pub source_protos: Var,
    pub target_protos: Var,
}

/// Inputs of one test-time adaptation problem.
#[derive(Debug, Clone, Copy)]
pub struct TtaBatch<'a> {
    pub support_x: &'a Tensor,
    pub support_labels: &'a [usize],
    pub source_x: &'a Tensor,
    pub source_labels: &'a [usize],
    pub n_way: usize,
}

/// Builds `L_t` on `g`. With `aug = None` the augmented features are drawn
/// from the current support embeddings with `aug_seed`; pass a set to hold them fixed.
pub fn build_tta_loss(
    g: &mut Graph,
    params: &[Var],
    state: &ModelState,
    batch: &TtaBatch,
    cfg: &AdaptConfig,
    aug: Option<&AugmentedFeatureSet>,
    aug_seed: u64,
    epoch: usize,
) -> Result<(TtaGraph, AugmentedFeatureSet)> {
    let distance = state.config.distance;
    let source_emb = forward(g, params, &state.config, batch.source_x)?;
    let support_emb = forward(g, params, &state.config, batch.support_x)?;
    let source_protos = compute_prototypes(g, source_emb, batch.source_labels, batch.n_way)?;

    let set = match aug {
        Some(set) => set.clone(),
        None => {
            let values = g.value(support_emb).clone();
            let covs = class_covariances(&values, batch.support_labels, batch.n_way, cfg.shrinkage)?;
            augment(&values, batch.support_labels, &covs, cfg.k_aug, aug_seed, epoch)?
        }
    };
    let aug_var = set.features.as_ref().map(|t| g.constant(t.clone()));

    let (pool, pool_labels) = match aug_var {
        Some(a) => {
            let both = g.concat_rows(&[support_emb, a])?;
            let mut labels = batch.support_labels.to_vec();
            labels.extend_from_slice(&set.labels);
            (both, labels)
        }
        None => (support_emb, batch.support_labels.to_vec()),
    };
    let target_protos = compute_prototypes(g, pool, &pool_labels, batch.n_way)?;

    let anc1 = anchoring_loss_t2s(g, support_emb, batch.support_labels, aug_var.map(|a| (a, set.labels.as_slice())), source_protos, distance)?;
    let ent1 = entropy_reg(g, pool, source_protos, distance)?;
    let anc2 = anchoring_loss_s2t(g, source_emb, batch.source_labels, target_protos, distance)?;
    let ent2 = entropy_reg(g, source_emb, target_protos, distance)?;
    let ts = g.add(anc1, ent1)?;
    let st = g.add(anc2, ent2)?;
    let total = g.add(ts, st)?;
    let handles = TtaGraph { total, anc1, ent1, anc2, ent2, support_emb, source_emb, aug: aug_var, source_protos, target_protos };
    Ok((handles, set))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub state: ModelState,
    pub epochs: Vec<EpochLosses>,
}

/// Runs `cfg.epochs` Adam steps on `L_t`, starting from a copy of `state` with fresh optimizer moments.
pub fn adapt(state: &ModelState, batch: &TtaBatch, cfg: &AdaptConfig, seed: u64) -> Result<AdaptOutcome> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("adaptation learning rate {} must be finite and non-negative", cfg.lr)));
    }
    let mut st = state.clone();
    st.reset_optimizer();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut frozen: Option<AugmentedFeatureSet> = None;
    for epoch in 0..cfg.epochs {
        let fail = |e: Error| Error::Adaptation { epoch, reason: format!("{e}") };
        let mut g = Graph::new();
        let params = st.bind(&mut g);
        let aug_seed = seed::derive(seed, &[seed::stream::AUGMENT, epoch as u64]);
        let fixed = if cfg.freeze_augmentation { frozen.as_ref() } else { None };
        let (h, set) = build_tta_loss(&mut g, &params, &st, batch, cfg, fixed, aug_seed, epoch).map_err(fail)?;
        if cfg.freeze_augmentation && frozen.is_none() {
            frozen = Some(set);
        }
        let item = |v: Var| g.value(v).item();
        let losses = EpochLosses { anc1: item(h.anc1)?, ent1: item(h.ent1)?, anc2: item(h.anc2)?, ent2: item(h.ent2)? };
        if !losses.total().is_finite() {
            return Err(Error::Adaptation { epoch, reason: format!("loss is {}", losses.total()) });
        }
        epochs.push(losses);
        g.backward(h.total).map_err(fail)?;
        let grads: Vec<Tensor> = params.iter().map(|&p| g.grad_tensor(p)).collect();
        adam_step(&mut st.params, &grads, &mut st.optimizer, cfg.lr).map_err(fail)?;
    }
    Ok(AdaptOutcome { state: st, epochs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub predictions: Vec<usize>,
    /// `[Q, N]`.
    pub posteriors: Tensor,
    /// `[N, w]`.
    pub target_protos: Tensor,
}

/// Classifies queries by distance to target prototypes built from support
/// embeddings plus `k_aug` augmented features per support row.
/// With `k_aug = 0` this is plain prototype classification.
pub fn infer(
    state: &ModelState,
    support_x: &Tensor,
    support_labels: &[usize],
    query_x: &Tensor,
    n_way: usize,
    k_aug: usize,
    shrinkage: f64,
    seed: u64,
) -> Result<Inference> {
    let es = state.embed(support_x)?;
    let eq = state.embed(query_x)?;
    let set = if k_aug > 0 {
        let covs = class_covariances(&es, support_labels, n_way, shrinkage)?;
        augment(&es, support_labels, &covs, k_aug, seed, usize::MAX)?
    } else {
        AugmentedFeatureSet { features: None, labels: Vec::new(), seed, epoch: usize::MAX }
    };
    let mut g = Graph::inference();
    let s = g.constant(es);
    let (pool, labels) = match set.features {
        Some(a) => {
            let a = g.constant(a);
            let mut labels = support_labels.to_vec();
            labels.extend_from_slice(&set.labels);
            (g.concat_rows(&[s, a])?, labels)
        }
        None => (s, support_labels.to_vec()),
    };
    let protos = compute_prototypes(&mut g, pool, &labels, n_way)?;
    let q = g.constant(eq);
    let lp = log_posteriors(&mut g, q, protos, state.config.distance)?;
    let post = g.exp(lp)?;
    let posteriors = g.value(post).clone();
    Ok(Inference { predictions: argmax_rows(&posteriors), posteriors, target_protos: g.value(protos).clone() })
}

/// Everything recorded about one adapted task.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationReport {
    pub pre_predictions: Vec<usize>,
    pub post_predictions: Vec<usize>,
    pub query_labels: Vec<usize>,
    pub epochs: Vec<EpochLosses>,
    /// `[N, w]` prototypes used for the final predictions.
    pub target_protos: Tensor,
    pub pre_accuracy: f64,
    pub post_accuracy: f64,
    /// Set when adaptation failed and the pre-adaptation predictions were reported instead.
    pub fallback: Option<String>,
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
}

/// Query set of one task, used by [`run_task`].
#[derive(Debug, Clone, Copy)]
pub struct QuerySet<'a> {
    pub x: &'a Tensor,
    pub labels: &'a [usize],
}

/// Pre-adaptation prototype inference, adaptation (if `cfg.epochs > 0`), then final inference.
///
/// A failed adaptation falls back to the pre-adaptation predictions and is
/// flagged in the report rather than returned as an error.
pub fn run_task(state: &ModelState, batch: &TtaBatch, query: &QuerySet, cfg: &AdaptConfig, seed: u64) -> Result<AdaptationReport> {
    let pre = infer(state, batch.support_x, batch.support_labels, query.x, batch.n_way, 0, cfg.shrinkage, 0)?;
    let infer_seed = seed::derive(seed, &[seed::stream::AUGMENT, u64::MAX]);
    let (post, epochs, fallback) = if cfg.epochs == 0 {
        let post = infer(state, batch.support_x, batch.support_labels, query.x, batch.n_way, cfg.k_aug, cfg.shrinkage, infer_seed)?;
        (post, Vec::new(), None)
    } else {
        match adapt(state, batch, cfg, seed) {
            Ok(out) => {
                let post = infer(&out.state, batch.support_x, batch.support_labels, query.x, batch.n_way, cfg.k_aug, cfg.shrinkage, infer_seed)?;
                (post, out.epochs, None)
            }
            Err(e) => (pre.clone(), Vec::new(), Some(format!("{e}"))),
        }
    };
    Ok(AdaptationReport {
        pre_accuracy: accuracy(&pre.predictions, query.labels),
        post_accuracy: accuracy(&post.predictions, query.labels),
        pre_predictions: pre.predictions,
        post_predictions: post.predictions,
        query_labels: query.labels.to_vec(),
        epochs,
        target_protos: post.target_protos,
        fallback,
    })
}
