//! Scenario matrix, ablation variants and the top-k sweep.
//!
//! A scenario is one (condition, shot) pair. For every repeat each distinct
//! network among the requested variants is meta-trained once per condition on
//! the virtual pool, then every variant built on it is scored on the same
//! `tasks_per_scenario` tasks. Task `t` of repeat `r` draws its support,
//! query and source batch from a seed that depends only on
//! `(seed, condition, shot, t, r)`, so all variants see identical splits.

use std::collections::BTreeMap;
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use twinproto_core::adapt::{run_task, AdaptConfig, AdaptationReport, QuerySet, TtaBatch};
use twinproto_core::episodic::{meta_train, sample_episode, TrainOutcome};
use twinproto_core::model::{Frontend, ModelConfig, ModelState};
use twinproto_core::seed::{self, stream};
use twinproto_core::tensor::Tensor;
use twinproto_core::twinsim::{make_dataset, stack_phases, DatasetArchive, DatasetConfig, HealthState};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

const N_WAY: usize = HealthState::ALL.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Proposed,
    WoTta,
    WoCga,
    WoMpl,
    #[serde(rename = "mscnn_1d")]
    Mscnn1d,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Proposed, Variant::WoTta, Variant::WoCga, Variant::WoMpl, Variant::Mscnn1d, Variant::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::WoTta => "wo_tta",
            Variant::WoCga => "wo_cga",
            Variant::WoMpl => "wo_mpl",
            Variant::Mscnn1d => "mscnn_1d",
            Variant::Baseline => "baseline",
        }
    }

    /// Front end, whether the task runs test-time adaptation, and whether
    /// augmented features are used.
    pub fn recipe(self) -> Recipe {
        let (frontend, adapt, augment) = match self {
            Variant::Proposed => (Frontend::Periodic, true, true),
            Variant::WoTta => (Frontend::Periodic, false, false),
            Variant::WoCga => (Frontend::Periodic, true, false),
            Variant::WoMpl => (Frontend::Plain1d, true, true),
            Variant::Mscnn1d => (Frontend::Mscnn1d, true, true),
            Variant::Baseline => (Frontend::Plain1d, false, false),
        };
        Recipe { frontend, adapt, augment }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Recipe {
    pub frontend: Frontend,
    pub adapt: bool,
    pub augment: bool,
}

/// The network a variant is built on: `base` with the variant's front end.
pub fn variant_network(variant: Variant, base: &ModelConfig) -> ModelConfig {
    ModelConfig { frontend: variant.recipe().frontend, ..base.clone() }
}

/// Adaptation settings of a variant. Without adaptation the epoch count is 0,
/// without augmentation `k_aug` is 0.
pub fn variant_adaptation(variant: Variant, base: &AdaptConfig) -> AdaptConfig {
    let r = variant.recipe();
    AdaptConfig {
        epochs: if r.adapt { base.epochs } else { 0 },
        k_aug: if r.augment { base.k_aug } else { 0 },
        ..base.clone()
    }
}

/// Every (condition, shot) pair in run order.
pub fn scenario_matrix(cfg: &ExperimentConfig) -> Vec<(u32, usize)> {
    cfg.conditions.iter().flat_map(|&c| cfg.shots.iter().map(move |&s| (c, s))).collect()
}

pub fn dataset(cfg: &ExperimentConfig, condition: u32) -> Result<DatasetArchive> {
    Ok(make_dataset(&DatasetConfig {
        surrogate: cfg.surrogate,
        shift: cfg.shift,
        speed_rpm: condition,
        source_per_class: cfg.data.source_per_class,
        target_per_class: cfg.data.target_per_class,
        max_shot: cfg.max_shot(),
        queries_per_class: cfg.queries_per_class,
        seed: cfg.seed,
    })?)
}

fn frontend_code(f: Frontend) -> u64 {
    match f {
        Frontend::Periodic => 0,
        Frontend::Plain1d => 1,
        Frontend::Mscnn1d => 2,
    }
}

/// Seed for initializing and meta-training `model` in `repeat` at `condition`.
pub fn train_seed(base: u64, condition: u32, repeat: usize, model: &ModelConfig) -> u64 {
    seed::derive(base, &[stream::INIT, condition as u64, repeat as u64, frontend_code(model.frontend), model.top_k as u64])
}

pub fn task_seed(base: u64, condition: u32, shot: usize, task: usize, repeat: usize) -> u64 {
    seed::derive(base, &[stream::TASK, condition as u64, shot as u64, task as u64, repeat as u64])
}

pub fn train_network(cfg: &ExperimentConfig, archive: &DatasetArchive, model: &ModelConfig, repeat: usize) -> Result<TrainOutcome> {
    let s = train_seed(cfg.seed, archive.speed_rpm, repeat, model);
    let init = ModelState::init(model, s)?;
    Ok(meta_train(&archive.source, init, &cfg.train, s)?)
}

/// Support, query and source tensors of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInputs {
    pub support_x: Tensor,
    pub support_labels: Vec<usize>,
    pub query_x: Tensor,
    pub query_labels: Vec<usize>,
    pub source_x: Tensor,
    pub source_labels: Vec<usize>,
}

pub fn task_inputs(cfg: &ExperimentConfig, archive: &DatasetArchive, shot: usize, seed: u64) -> Result<TaskInputs> {
    let ep = sample_episode(&archive.target, N_WAY, shot, cfg.queries_per_class, seed)?;
    let src = sample_episode(
        &archive.source,
        N_WAY,
        cfg.data.source_batch_per_class,
        0,
        seed::derive(seed, &[stream::SOURCE_BATCH]),
    )?;
    Ok(TaskInputs {
        support_x: stack_phases(ep.support.iter().map(|&i| &archive.target[i]))?,
        support_labels: ep.support_labels,
        query_x: stack_phases(ep.query.iter().map(|&i| &archive.target[i]))?,
        query_labels: ep.query_labels,
        source_x: stack_phases(src.support.iter().map(|&i| &archive.source[i]))?,
        source_labels: src.support_labels,
    })
}

pub fn run_variant_task(state: &ModelState, variant: Variant, cfg: &ExperimentConfig, t: &TaskInputs, seed: u64) -> Result<AdaptationReport> {
    let batch = TtaBatch {
        support_x: &t.support_x,
        support_labels: &t.support_labels,
        source_x: &t.source_x,
        source_labels: &t.source_labels,
        n_way: N_WAY,
    };
    let query = QuerySet { x: &t.query_x, labels: &t.query_labels };
    Ok(run_task(state, &batch, &query, &variant_adaptation(variant, &cfg.adapt), seed)?)
}

/// Outcome of one task of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub variant: Variant,
    pub condition_rpm: u32,
    pub shot: usize,
    pub repeat: usize,
    pub task: usize,
    pub seed: u64,
    pub outcome: std::result::Result<AdaptationReport, String>,
}

impl TaskRecord {
    /// Query accuracy in percent, `None` if the task failed.
    pub fn accuracy(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|r| 100.0 * r.post_accuracy)
    }
}

/// Scores `variants` (all built on `state`) on every task of one scenario and repeat.
pub fn evaluate(
    cfg: &ExperimentConfig,
    archive: &DatasetArchive,
    state: &ModelState,
    variants: &[Variant],
    shot: usize,
    repeat: usize,
) -> Vec<TaskRecord> {
    let condition = archive.speed_rpm;
    let per_task: Vec<Vec<TaskRecord>> = (0..cfg.tasks_per_scenario)
        .into_par_iter()
        .map(|task| {
            let seed = task_seed(cfg.seed, condition, shot, task, repeat);
            let inputs = task_inputs(cfg, archive, shot, seed);
            variants
                .iter()
                .map(|&variant| {
                    let outcome = match &inputs {
                        Ok(t) => run_variant_task(state, variant, cfg, t, seed).map_err(|e| e.to_string()),
                        Err(e) => Err(e.to_string()),
                    };
                    TaskRecord { variant, condition_rpm: condition, shot, repeat, task, seed, outcome }
                })
                .collect()
        })
        .collect();
    per_task.into_iter().flatten().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: Variant,
    pub condition_rpm: u32,
    pub shot: usize,
    /// Mean over repeats of the per-repeat mean task accuracy, in percent.
    pub mean_accuracy: f64,
    /// Sample standard deviation of the per-repeat accuracies (0 for one repeat).
    pub std_accuracy: f64,
    pub repeat_accuracies: Vec<f64>,
    /// `[repeat][task]` accuracy in percent, `None` for failed tasks.
    pub task_accuracies: Vec<Vec<Option<f64>>>,
    /// `[true][predicted]` query counts summed over all tasks and repeats.
    pub confusion: [[u64; 4]; 4],
    pub failed_tasks: usize,
    pub total_tasks: usize,
}

pub fn aggregate(records: &[&TaskRecord], variant: Variant, condition_rpm: u32, shot: usize, repeats: usize, tasks: usize) -> CellResult {
    let mut task_accuracies = vec![vec![None; tasks]; repeats];
    let mut confusion = [[0u64; 4]; 4];
    let mut failed = 0;
    for r in records {
        task_accuracies[r.repeat][r.task] = r.accuracy();
        match &r.outcome {
            Ok(rep) => {
                for (&y, &p) in rep.query_labels.iter().zip(&rep.post_predictions) {
                    confusion[y][p] += 1;
                }
            }
            Err(_) => failed += 1,
        }
    }
    let repeat_accuracies: Vec<f64> = task_accuracies
        .iter()
        .map(|row| {
            let ok: Vec<f64> = row.iter().flatten().copied().collect();
            if ok.is_empty() {
                0.0
            } else {
                ok.iter().sum::<f64>() / ok.len() as f64
            }
        })
        .collect();
    let (mean, std) = mean_std(&repeat_accuracies);
    CellResult {
        variant,
        condition_rpm,
        shot,
        mean_accuracy: mean,
        std_accuracy: std,
        repeat_accuracies,
        task_accuracies,
        confusion,
        failed_tasks: failed,
        total_tasks: records.len(),
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub cells: Vec<CellResult>,
}

impl ResultTable {
    pub fn cell(&self, variant: Variant, condition_rpm: u32, shot: usize) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.variant == variant && c.condition_rpm == condition_rpm && c.shot == shot)
    }

    /// Variants in first-appearance order.
    pub fn variants(&self) -> Vec<Variant> {
        let mut v = Vec::new();
        for c in &self.cells {
            if !v.contains(&c.variant) {
                v.push(c.variant);
            }
        }
        v
    }

    pub fn conditions(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.cells.iter().map(|c| c.condition_rpm).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn shots(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.cells.iter().map(|c| c.shot).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn failure_rate(&self) -> f64 {
        let total: usize = self.cells.iter().map(|c| c.total_tasks).sum();
        let failed: usize = self.cells.iter().map(|c| c.failed_tasks).sum();
        failed as f64 / total.max(1) as f64
    }
}

/// Per-iteration episode losses of one meta-training run.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub condition_rpm: u32,
    pub network: String,
    pub repeat: usize,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub table: ResultTable,
    pub records: Vec<TaskRecord>,
    pub traces: Vec<LossTrace>,
}

fn network_name(model: &ModelConfig) -> String {
    format!("{}_k{}", model.frontend.name(), model.top_k)
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Meta-trains and scores every variant on every scenario.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    with_pool(cfg.workers, || run_inner(cfg))?
}

fn run_inner(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut records = Vec::new();
    let mut traces = Vec::new();
    // networks in first-appearance order, each with the variants built on it
    let mut networks: Vec<(Frontend, Vec<Variant>)> = Vec::new();
    for &v in &cfg.variants {
        let f = v.recipe().frontend;
        match networks.iter_mut().find(|(nf, _)| *nf == f) {
            Some((_, vs)) => vs.push(v),
            None => networks.push((f, vec![v])),
        }
    }
    for &condition in &cfg.conditions {
        let archive = dataset(cfg, condition)?;
        for repeat in 0..cfg.repeats {
            for (_, variants) in &networks {
                let model = variant_network(variants[0], &cfg.model);
                let name = network_name(&model);
                info!("{condition} rpm, repeat {repeat}: meta-training {name}");
                let out = train_network(cfg, &archive, &model, repeat)?;
                traces.push(LossTrace { condition_rpm: condition, network: name, repeat, losses: out.loss_trace });
                for &shot in &cfg.shots {
                    info!("{condition} rpm, repeat {repeat}, {shot}-shot: {} tasks", cfg.tasks_per_scenario);
                    records.extend(evaluate(cfg, &archive, &out.state, variants, shot, repeat));
                }
            }
        }
    }
    let order = |v: Variant| cfg.variants.iter().position(|&x| x == v).unwrap_or(usize::MAX);
    records.sort_by_key(|r| (order(r.variant), r.condition_rpm, r.shot, r.repeat, r.task));
    let mut grouped: BTreeMap<(usize, u32, usize), Vec<&TaskRecord>> = BTreeMap::new();
    for r in &records {
        grouped.entry((order(r.variant), r.condition_rpm, r.shot)).or_default().push(r);
    }
    let mut cells = Vec::new();
    for &v in &cfg.variants {
        for &(c, s) in &scenario_matrix(cfg) {
            let group = grouped.remove(&(order(v), c, s)).unwrap_or_default();
            cells.push(aggregate(&group, v, c, s, cfg.repeats, cfg.tasks_per_scenario));
        }
    }
    Ok(RunOutput { table: ResultTable { cells }, records, traces })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub variant: Variant,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub repeat_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub records: Vec<TaskRecord>,
    pub traces: Vec<LossTrace>,
}

pub const SWEEP_VARIANTS: [Variant; 2] = [Variant::Proposed, Variant::WoTta];

/// Accuracy of the full network with and without adaptation for each top-k
/// value, at the sweep condition and shot.
pub fn sweep_topk(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    with_pool(cfg.workers, || {
        let archive = dataset(cfg, cfg.sweep.condition)?;
        let mut rows = Vec::new();
        let mut records = Vec::new();
        let mut traces = Vec::new();
        for &k in &cfg.sweep.k_values {
            let model = ModelConfig { top_k: k, ..variant_network(Variant::Proposed, &cfg.model) };
            let mut per_variant: Vec<Vec<TaskRecord>> = vec![Vec::new(); SWEEP_VARIANTS.len()];
            for repeat in 0..cfg.repeats {
                info!("top-k sweep: k = {k}, repeat {repeat}");
                let out = train_network(cfg, &archive, &model, repeat)?;
                traces.push(LossTrace { condition_rpm: archive.speed_rpm, network: network_name(&model), repeat, losses: out.loss_trace });
                for r in evaluate(cfg, &archive, &out.state, &SWEEP_VARIANTS, cfg.sweep.shot, repeat) {
                    let i = SWEEP_VARIANTS.iter().position(|&v| v == r.variant).expect("sweep variant");
                    per_variant[i].push(r);
                }
            }
            for (i, recs) in per_variant.into_iter().enumerate() {
                let refs: Vec<&TaskRecord> = recs.iter().collect();
                let cell = aggregate(&refs, SWEEP_VARIANTS[i], archive.speed_rpm, cfg.sweep.shot, cfg.repeats, cfg.tasks_per_scenario);
                rows.push(SweepRow {
                    k,
                    variant: SWEEP_VARIANTS[i],
                    mean_accuracy: cell.mean_accuracy,
                    std_accuracy: cell.std_accuracy,
                    repeat_accuracies: cell.repeat_accuracies,
                });
                records.extend(recs);
            }
        }
        Ok(SweepOutput { rows, records, traces })
    })?
}
