//! Experiment configuration.
//!
//! A run is configured by one TOML file layered over a built-in profile, with
//! `key.path=value` overrides applied last. The effective configuration is
//! written next to the results as `config.toml`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use twinproto_core::adapt::AdaptConfig;
use twinproto_core::episodic::MetaTrainConfig;
use twinproto_core::model::ModelConfig;
use twinproto_core::twinsim::{DomainShift, SurrogateConfig, SPEEDS_RPM};

use crate::error::{io, Error, Result};
use crate::harness::Variant;

pub const SHOTS: [usize; 4] = [1, 3, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads for the task pool, 0 for one per core.
    pub workers: usize,
    pub conditions: Vec<u32>,
    pub shots: Vec<usize>,
    pub tasks_per_scenario: usize,
    pub repeats: usize,
    pub queries_per_class: usize,
    pub variants: Vec<Variant>,
    pub data: DataConfig,
    pub surrogate: SurrogateConfig,
    pub shift: DomainShift,
    /// Network shape. The front end is chosen per variant.
    pub model: ModelConfig,
    pub train: MetaTrainConfig,
    pub adapt: AdaptConfig,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source_per_class: usize,
    pub target_per_class: usize,
    /// Source windows per class drawn for each adaptation task.
    pub source_batch_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub condition: u32,
    pub shot: usize,
    pub k_values: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Full scenario matrix with the desk-scale network.
    Default,
    /// Full scenario matrix with the large network.
    Full,
    /// A minutes-long smoke run over every variant.
    Ci,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Self::Default),
            "full" => Ok(Self::Full),
            "ci" => Ok(Self::Ci),
            _ => Err(Error::Config(format!("unknown profile {s:?} (expected default, full or ci)"))),
        }
    }
}

impl ExperimentConfig {
    pub fn profile(p: Profile) -> Self {
        let full = Self {
            seed: 2024,
            workers: 0,
            conditions: SPEEDS_RPM.to_vec(),
            shots: SHOTS.to_vec(),
            tasks_per_scenario: 20,
            repeats: 5,
            queries_per_class: 15,
            variants: Variant::ALL.to_vec(),
            data: DataConfig { source_per_class: 200, target_per_class: 40, source_batch_per_class: 10 },
            surrogate: SurrogateConfig::default(),
            shift: DomainShift::default(),
            model: ModelConfig::default(),
            train: MetaTrainConfig::default(),
            adapt: AdaptConfig::default(),
            sweep: SweepConfig { condition: 2700, shot: 5, k_values: (1..=7).collect() },
        };
        match p {
            Profile::Full => full,
            Profile::Default => Self { model: desk_model(), train: desk_training(), adapt: desk_adaptation(), ..full },
            Profile::Ci => Self {
                conditions: vec![2700],
                shots: vec![1, 5],
                tasks_per_scenario: 2,
                repeats: 1,
                data: DataConfig { source_per_class: 12, target_per_class: 20, source_batch_per_class: 3 },
                model: ModelConfig {
                    mscnn_channels: 2,
                    top_k: 2,
                    stage_channels: vec![4, 4],
                    blocks_per_stage: 1,
                    embedding_dim: 4,
                    ..ModelConfig::default()
                },
                train: MetaTrainConfig { iterations: 4, lr: 1e-3, n_way: 4, k_shot: 2, m_query: 2 },
                adapt: AdaptConfig { epochs: 2, ..AdaptConfig::default() },
                sweep: SweepConfig { condition: 2700, shot: 1, k_values: vec![1, 2] },
                ..full
            },
        }
    }

    /// Profile, then the optional file, then each `key.path=value` override.
    pub fn load(profile: Profile, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(io(path))?;
            let layer: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
            merge(&mut value, toml::Value::Table(layer));
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.conditions.is_empty() || self.shots.is_empty() || self.variants.is_empty() {
            return fail("conditions, shots and variants must be nonempty".into());
        }
        if let Some(c) = self.conditions.iter().chain([&self.sweep.condition]).find(|c| !SPEEDS_RPM.contains(c)) {
            return fail(format!("condition {c} rpm is not one of {SPEEDS_RPM:?}"));
        }
        if let Some(s) = self.shots.iter().chain([&self.sweep.shot]).find(|s| !SHOTS.contains(s)) {
            return fail(format!("shot {s} is not one of {SHOTS:?}"));
        }
        if has_duplicates(&self.conditions) || has_duplicates(&self.shots) || has_duplicates(&self.variants) {
            return fail("conditions, shots and variants must not repeat".into());
        }
        if self.tasks_per_scenario == 0 || self.repeats == 0 || self.queries_per_class == 0 {
            return fail("tasks_per_scenario, repeats and queries_per_class must be positive".into());
        }
        if self.sweep.k_values.is_empty() || self.sweep.k_values.contains(&0) {
            return fail("sweep.k_values must be a nonempty list of positive integers".into());
        }
        if self.train.n_way != 4 {
            return fail("train.n_way must be 4 (one way per health state)".into());
        }
        if self.train.iterations == 0 || self.train.k_shot == 0 || self.train.m_query == 0 {
            return fail("train.iterations, train.k_shot and train.m_query must be positive".into());
        }
        let d = &self.data;
        if d.source_per_class < self.train.k_shot + self.train.m_query {
            return fail(format!(
                "data.source_per_class {} cannot serve training episodes of {} + {}",
                d.source_per_class, self.train.k_shot, self.train.m_query
            ));
        }
        if d.source_batch_per_class == 0 || d.source_batch_per_class > d.source_per_class {
            return fail("data.source_batch_per_class must lie in 1..=source_per_class".into());
        }
        let max_shot = self.shots.iter().chain([&self.sweep.shot]).max().copied().unwrap_or(1);
        if d.target_per_class < max_shot + self.queries_per_class {
            return fail(format!(
                "data.target_per_class {} cannot serve {max_shot}-shot tasks with {} queries",
                d.target_per_class, self.queries_per_class
            ));
        }
        if !(self.adapt.lr >= 0.0 && self.adapt.lr.is_finite() && self.adapt.shrinkage >= 0.0) {
            return fail("adapt.lr and adapt.shrinkage must be finite and non-negative".into());
        }
        self.model.validate()?;
        self.surrogate.validate()?;
        self.shift.validate()?;
        Ok(())
    }

    /// Largest support size any configured scenario asks for.
    pub fn max_shot(&self) -> usize {
        self.shots.iter().chain([&self.sweep.shot]).max().copied().unwrap_or(1)
    }
}

fn desk_model() -> ModelConfig {
    ModelConfig {
        mscnn_channels: 4,
        top_k: 3,
        stage_channels: vec![8, 16],
        blocks_per_stage: 1,
        embedding_dim: 16,
        ..ModelConfig::default()
    }
}

fn desk_training() -> MetaTrainConfig {
    MetaTrainConfig { iterations: 200, lr: 3e-3, n_way: 4, k_shot: 5, m_query: 10 }
}

/// Adam's first steps are close to sign steps, so augmented features redrawn
/// every epoch jitter the small network; one draw per task is steadier.
fn desk_adaptation() -> AdaptConfig {
    AdaptConfig { freeze_augmentation: true, ..AdaptConfig::default() }
}

fn has_duplicates<T: PartialEq>(v: &[T]) -> bool {
    v.iter().enumerate().any(|(i, a)| v[..i].contains(a))
}

fn merge(base: &mut toml::Value, layer: toml::Value) {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal, falling back
/// to a bare string, so `variants=["proposed"]`, `adapt.lr=1e-4` and
/// `model.distance=euclidean` all work.
pub fn apply_override(value: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut slot = value;
    for (i, key) in keys.iter().enumerate() {
        let table = slot
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{} is not a table", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            table.insert(key.to_string(), parsed);
            return Ok(());
        }
        slot = table
            .get_mut(*key)
            .ok_or_else(|| Error::Config(format!("unknown configuration key {}", keys[..=i].join("."))))?;
    }
    unreachable!("split yields at least one key")
}
