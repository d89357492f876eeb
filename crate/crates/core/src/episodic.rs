//! Episodic meta-training of the representation network on source windows.
//!
//! An episode is an N-way K-shot task with `M_q` queries per class drawn from
//! the virtual pool. Queries are classified by a softmax over negative
//! distances to the class prototypes (per-class mean support embeddings),
//! and the episode loss is the mean negative log posterior of the true class.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;

use crate::model::{forward, Distance, ModelState};
use crate::seed;
use crate::tensor::{adam_step, Graph, Tensor, Var};
use crate::twinsim::{stack_phases, HealthState, SignalSample};
use crate::{Error, Result};

/// Indices into a sample pool, class-major (all of class 0, then class 1, ...).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeTask {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

/// Draws K + M_q distinct windows per class, uniformly without replacement.
/// Classes are the first `n_way` health states in label order.
pub fn sample_episode(pool: &[SignalSample], n_way: usize, k_shot: usize, m_query: usize, seed: u64) -> Result<EpisodeTask> {
    if n_way == 0 || n_way > HealthState::ALL.len() || k_shot == 0 {
        return Err(Error::Argument(format!("invalid episode shape {n_way}-way {k_shot}-shot")));
    }
    let mut rng = seed::rng(seed);
    let mut task = EpisodeTask {
        n_way,
        k_shot,
        m_query,
        support: Vec::with_capacity(n_way * k_shot),
        support_labels: Vec::with_capacity(n_way * k_shot),
        query: Vec::with_capacity(n_way * m_query),
        query_labels: Vec::with_capacity(n_way * m_query),
    };
    for (c, label) in HealthState::ALL[..n_way].iter().enumerate() {
        let members: Vec<usize> = pool.iter().enumerate().filter(|(_, s)| s.label == *label).map(|(i, _)| i).collect();
        if members.len() < k_shot + m_query {
            return Err(Error::Config(format!(
                "class {label} has {} windows, episode needs {} + {}",
                members.len(),
                k_shot,
                m_query
            )));
        }
        let picks = sample(&mut rng, members.len(), k_shot + m_query).into_vec();
        for (j, p) in picks.into_iter().enumerate() {
            if j < k_shot {
                task.support.push(members[p]);
                task.support_labels.push(c);
            } else {
                task.query.push(members[p]);
                task.query_labels.push(c);
            }
        }
    }
    Ok(task)
}

/// `[N, S]` matrix that averages the rows of each class.
pub fn averaging_matrix(labels: &[usize], n: usize) -> Result<Tensor> {
    let mut counts = vec![0usize; n];
    for &l in labels {
        if l >= n {
            return Err(Error::Argument(format!("label {l} outside {n} classes")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(Error::Argument(format!("class {c} has no support embedding")));
    }
    let mut a = vec![0.0; n * labels.len()];
    for (s, &l) in labels.iter().enumerate() {
        a[l * labels.len() + s] = 1.0 / counts[l] as f64;
    }
    Tensor::new(&[n, labels.len()], a)
}

/// Per-class mean of `emb: [S, w]`, row `n` for class `n`.
pub fn compute_prototypes(g: &mut Graph, emb: Var, labels: &[usize], n: usize) -> Result<Var> {
    if g.shape(emb).len() != 2 || g.shape(emb)[0] != labels.len() {
        return Err(Error::Dimension(format!("{} labels for embeddings {:?}", labels.len(), g.shape(emb))));
    }
    let a = g.constant(averaging_matrix(labels, n)?);
    g.matmul(a, emb)
}

/// `[Q, N]` distances between embeddings and prototypes.
pub fn distances(g: &mut Graph, emb: Var, protos: Var, distance: Distance) -> Result<Var> {
    let d = g.pairwise_sq_dist(emb, protos)?;
    match distance {
        Distance::SquaredEuclidean => Ok(d),
        Distance::Euclidean => {
            let shifted = g.add_scalar(d, 1e-12)?;
            g.sqrt(shifted)
        }
    }
}

/// `log p(y = n | x)` for each row: log-softmax of negative distances.
pub fn log_posteriors(g: &mut Graph, emb: Var, protos: Var, distance: Distance) -> Result<Var> {
    let d = distances(g, emb, protos, distance)?;
    let neg = g.neg(d)?;
    g.log_softmax_rows(neg)
}

pub fn class_posteriors(g: &mut Graph, emb: Var, protos: Var, distance: Distance) -> Result<Var> {
    let lp = log_posteriors(g, emb, protos, distance)?;
    g.exp(lp)
}

/// `[Q, N]` one-hot rows, used to pick the true-class log posterior.
pub fn one_hot(labels: &[usize], n: usize) -> Result<Tensor> {
    let mut t = vec![0.0; labels.len() * n];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n {
            return Err(Error::Argument(format!("label {l} outside {n} classes")));
        }
        t[i * n + l] = 1.0;
    }
    Tensor::new(&[labels.len(), n], t)
}

/// Mean over rows of `-log p(y_true | x)`.
pub fn nll(g: &mut Graph, log_post: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(log_post).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Dimension(format!("{} labels for log posteriors {s:?}", labels.len())));
    }
    let mask = g.constant(one_hot(labels, s[1])?);
    let picked = g.mul(log_post, mask)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / labels.len() as f64)
}

/// Mean over queries of `d(q, p_y) + log Σ_n exp(-d(q, p_n))`.
pub fn episode_loss(g: &mut Graph, query_emb: Var, labels: &[usize], protos: Var, distance: Distance) -> Result<Var> {
    let lp = log_posteriors(g, query_emb, protos, distance)?;
    nll(g, lp, labels)
}

/// Index of the largest entry per row, ties to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let n = t.shape()[1];
    t.data()
        .chunks_exact(n)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct MetaTrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self { iterations: 200, lr: 1e-3, n_way: 4, k_shot: 5, m_query: 15 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: ModelState,
    /// Episode loss before each update.
    pub loss_trace: Vec<f64>,
}

/// One Adam step per sampled episode.
pub fn meta_train(pool: &[SignalSample], init: ModelState, cfg: &MetaTrainConfig, seed: u64) -> Result<TrainOutcome> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {} must be finite and non-negative", cfg.lr)));
    }
    let mut state = init;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let ep_seed = seed::derive(seed, &[seed::stream::EPISODES, it as u64]);
        let task = sample_episode(pool, cfg.n_way, cfg.k_shot, cfg.m_query, ep_seed)?;
        let fail = |e: Error| Error::Training { iteration: it, reason: format!("{e}") };
        let (loss, grads) = episode_gradients(&state, pool, &task).map_err(fail)?;
        if !loss.is_finite() {
            return Err(Error::Training { iteration: it, reason: format!("loss is {loss}") });
        }
        trace.push(loss);
        adam_step(&mut state.params, &grads, &mut state.optimizer, cfg.lr).map_err(fail)?;
    }
    Ok(TrainOutcome { state, loss_trace: trace })
}

/// Episode loss and its gradient with respect to every parameter.
pub fn episode_gradients(state: &ModelState, pool: &[SignalSample], task: &EpisodeTask) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let params = state.bind(&mut g);
    let xs = stack_phases(task.support.iter().map(|&i| &pool[i]))?;
    let xq = stack_phases(task.query.iter().map(|&i| &pool[i]))?;
    let es = forward(&mut g, &params, &state.config, &xs)?;
    let eq = forward(&mut g, &params, &state.config, &xq)?;
    let protos = compute_prototypes(&mut g, es, &task.support_labels, task.n_way)?;
    let loss = episode_loss(&mut g, eq, &task.query_labels, protos, state.config.distance)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    Ok((value, params.iter().map(|&p| g.grad_tensor(p)).collect()))
}
