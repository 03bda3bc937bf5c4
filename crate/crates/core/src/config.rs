//! Run configuration: one JSON document drives a full continual run.
//!
//! Unknown fields are rejected everywhere so a typo'd key fails loudly
//! instead of silently falling back to a default.

use crate::datasets::StreamKind;
use crate::error::{Error, Result};
use crate::losses::CcdWeights;
use crate::metrics::EmbedMode;
use crate::model::ArchConfig;
use crate::schedule::ScheduleKind;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    Er,
    L2,
    Ewc,
    Agem,
    Ccd,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Naive, Method::Er, Method::L2, Method::Ewc, Method::Agem, Method::Ccd];

    /// Methods that draw replay minibatches from the buffer.
    pub fn uses_replay(self) -> bool {
        matches!(self, Method::Er | Method::Agem | Method::Ccd)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Er => "er",
            Method::L2 => "l2",
            Method::Ewc => "ewc",
            Method::Agem => "agem",
            Method::Ccd => "ccd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: StreamKind,
    pub tasks: usize,
    pub classes_per_task: usize,
    /// Stream seed; None reuses the run seed.
    pub seed: Option<u64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { kind: StreamKind::Mixture2d, tasks: 5, classes_per_task: 2, seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { kind: ScheduleKind::Linear, t_max: 200, beta_min: 1e-4, beta_max: 2e-2 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: 64, blocks: 3, time_dim: 16 }
    }
}

impl ModelConfig {
    pub fn arch(&self, input_dim: usize, label_count: usize) -> ArchConfig {
        ArchConfig {
            input_dim,
            hidden: self.hidden,
            blocks: self.blocks,
            label_count,
            time_dim: self.time_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IkcConfig {
    /// Diagonal metric estimate (full matrices allowed only at small dims).
    pub diag_only: bool,
    pub damping: f64,
    /// Evaluate the student on the replay half instead of the current half.
    pub student_on_replay: bool,
}

impl Default for IkcConfig {
    fn default() -> Self {
        IkcConfig { diag_only: true, damping: 1e-3, student_on_replay: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub mode: EmbedMode,
    /// Frozen across the whole run (and, by default, across runs) so
    /// fidelity numbers are comparable.
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig { mode: EmbedMode::RandomTanh, seed: 7777 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Replace the step's total loss with NaN (collapse-path test hook).
    NanLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultInjection {
    pub kind: FaultKind,
    pub task: usize,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps_per_task: usize,
    /// When set, overrides steps_per_task with epochs * ceil(train/batch).
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default = "default_label_dropout")]
    pub label_dropout: f64,
    #[serde(default = "default_l2_c")]
    pub l2_c: f64,
    #[serde(default = "default_ewc_c")]
    pub ewc_c: f64,
    #[serde(default)]
    pub ccd: CcdWeights,
    #[serde(default = "default_ukc_clamp")]
    pub ukc_weight_clamp: f64,
    #[serde(default = "default_lkc_clamp")]
    pub lkc_weight_clamp: f64,
    #[serde(default)]
    pub ikc: IkcConfig,
    /// Re-draw the label-probe head at each task boundary instead of
    /// carrying it over.
    #[serde(default)]
    pub reinit_head_per_task: bool,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub embed: EmbedConfig,
    #[serde(default)]
    pub fault_injection: Option<FaultInjection>,
}

fn default_steps() -> usize {
    2000
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}
fn default_capacity() -> usize {
    512
}
fn default_n_eval() -> usize {
    2048
}
fn default_label_dropout() -> f64 {
    0.1
}
fn default_l2_c() -> f64 {
    1e-2
}
fn default_ewc_c() -> f64 {
    1.0
}
fn default_ukc_clamp() -> f64 {
    100.0
}
fn default_lkc_clamp() -> f64 {
    50.0
}

impl RunConfig {
    /// Minimal config for one method and seed; everything else at defaults.
    pub fn minimal(method: Method, seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "method": method.name(),
            "seed": seed,
        }))
        .expect("minimal config deserializes")
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }

    /// Steps actually run per task given the materialized train-set size.
    pub fn steps_for(&self, train_count: usize) -> usize {
        match self.epochs {
            Some(e) => e * train_count.div_ceil(self.batch_size),
            None => self.steps_per_task,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.steps_per_task == 0 {
            return fail("steps_per_task must be >= 1".into());
        }
        if self.epochs == Some(0) {
            return fail("epochs must be >= 1 when set".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be a positive finite number".into());
        }
        if self.n_eval < 2 {
            return fail("n_eval must be >= 2 (gaussian fit needs two samples)".into());
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return fail(format!("label_dropout {} outside [0, 1]", self.label_dropout));
        }
        if self.method.uses_replay() && self.buffer_capacity == 0 {
            return fail(format!("method {} needs buffer_capacity >= 1", self.method));
        }
        for (name, v) in [("l2_c", self.l2_c), ("ewc_c", self.ewc_c), ("ikc.damping", self.ikc.damping)]
        {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in
            [("ukc_weight_clamp", self.ukc_weight_clamp), ("lkc_weight_clamp", self.lkc_weight_clamp)]
        {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        if self.method == Method::Ccd {
            self.ccd.validate()?;
        }
        if self.dataset.tasks == 0 || self.dataset.classes_per_task == 0 {
            return fail("dataset needs tasks >= 1 and classes_per_task >= 1".into());
        }
        if self.schedule.t_max == 0 {
            return fail("schedule t_max must be >= 1".into());
        }
        for (name, v) in [("beta_min", self.schedule.beta_min), ("beta_max", self.schedule.beta_max)]
        {
            if !(v > 0.0 && v < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.schedule.beta_min > self.schedule.beta_max {
            return fail("beta_min must not exceed beta_max".into());
        }
        if self.model.hidden == 0 || self.model.blocks == 0 || self.model.time_dim == 0 {
            return fail("model hidden/blocks/time_dim must all be >= 1".into());
        }
        if let Some(f) = &self.fault_injection {
            if f.task >= self.dataset.tasks {
                return fail(format!(
                    "fault_injection.task {} outside stream of {} tasks",
                    f.task, self.dataset.tasks
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json_fills_documented_defaults() {
        let cfg =
            RunConfig::from_json_bytes(br#"{"schema_version":1,"method":"er","seed":3}"#).unwrap();
        assert_eq!(cfg.method, Method::Er);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.steps_per_task, 2000);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.buffer_capacity, 512);
        assert_eq!(cfg.n_eval, 2048);
        assert_eq!(cfg.label_dropout, 0.1);
        assert_eq!(cfg.ccd, CcdWeights::default());
        assert_eq!(cfg.ukc_weight_clamp, 100.0);
        assert_eq!(cfg.lkc_weight_clamp, 50.0);
        assert!(!cfg.reinit_head_per_task);
        assert_eq!(cfg.dataset, DatasetConfig::default());
        assert_eq!(cfg.schedule.t_max, 200);
        assert_eq!(cfg.model.hidden, 64);
        assert_eq!(cfg.dataset_seed(), 3);
        assert!(cfg.fault_injection.is_none());
    }

    #[test]
    fn unknown_fields_rejected_at_any_depth() {
        assert!(RunConfig::from_json_bytes(
            br#"{"schema_version":1,"method":"er","seed":0,"typo":1}"#
        )
        .is_err());
        assert!(RunConfig::from_json_bytes(
            br#"{"schema_version":1,"method":"er","seed":0,"dataset":{"knd":"rings"}}"#
        )
        .is_err());
        assert!(RunConfig::from_json_bytes(
            br#"{"schema_version":1,"method":"er","seed":0,"ccd":{"kappa":1,"lambda":1,"eta":1,"x":0}}"#
        )
        .is_err());
    }

    #[test]
    fn schema_version_pinned() {
        assert!(
            RunConfig::from_json_bytes(br#"{"schema_version":2,"method":"er","seed":0}"#).is_err()
        );
    }

    #[test]
    fn method_specific_validation() {
        let mut cfg = RunConfig::minimal(Method::Er, 0);
        cfg.buffer_capacity = 0;
        assert!(cfg.validate().is_err());
        cfg.method = Method::Naive;
        assert!(cfg.validate().is_ok()); // no replay, capacity unused

        let mut cfg = RunConfig::minimal(Method::Ccd, 0);
        cfg.ccd.kappa = -1.0;
        assert!(cfg.validate().is_err());
        cfg.method = Method::Er; // weights not consulted off-ccd
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn range_validation() {
        let bad: &[fn(&mut RunConfig)] = &[
            |c| c.steps_per_task = 0,
            |c| c.epochs = Some(0),
            |c| c.batch_size = 0,
            |c| c.lr = 0.0,
            |c| c.lr = f64::INFINITY,
            |c| c.n_eval = 1,
            |c| c.label_dropout = 1.5,
            |c| c.l2_c = -0.1,
            |c| c.ewc_c = f64::NAN,
            |c| c.ikc.damping = -1.0,
            |c| c.ukc_weight_clamp = 0.0,
            |c| c.lkc_weight_clamp = f64::NAN,
            |c| c.dataset.tasks = 0,
            |c| c.schedule.t_max = 0,
            |c| c.schedule.beta_min = 0.0,
            |c| c.schedule.beta_max = 1.0,
            |c| {
                c.schedule.beta_min = 0.5;
                c.schedule.beta_max = 0.1;
            },
            |c| c.model.blocks = 0,
            |c| {
                c.fault_injection =
                    Some(FaultInjection { kind: FaultKind::NanLoss, task: 99, step: 0 })
            },
        ];
        for mutate in bad {
            let mut cfg = RunConfig::minimal(Method::Er, 0);
            mutate(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn json_round_trip_preserves_config() {
        let mut cfg = RunConfig::minimal(Method::Ccd, 11);
        cfg.ccd = CcdWeights { kappa: 1e-3, lambda: 2e-4, eta: 0.05 };
        cfg.dataset.kind = StreamKind::Glyphs8;
        cfg.dataset.seed = Some(40);
        cfg.epochs = Some(4);
        cfg.fault_injection = Some(FaultInjection { kind: FaultKind::NanLoss, task: 1, step: 7 });
        let back = RunConfig::from_json_bytes(cfg.to_json_pretty().as_bytes()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.dataset_seed(), 40);
    }

    #[test]
    fn step_arithmetic_for_epoch_mode() {
        let mut cfg = RunConfig::minimal(Method::Naive, 0);
        assert_eq!(cfg.steps_for(4096), 2000);
        cfg.epochs = Some(3);
        assert_eq!(cfg.steps_for(100), 3 * 2); // ceil(100/64) = 2
        assert_eq!(cfg.steps_for(64), 3);
    }

    #[test]
    fn malformed_bytes_are_json_errors_not_panics() {
        assert!(RunConfig::from_json_bytes(b"{").is_err());
        assert!(RunConfig::from_json_bytes(&[0xff, 0xfe, 0x00]).is_err());
        assert!(RunConfig::from_json_bytes(b"[]").is_err());
    }

    #[test]
    fn method_parsing() {
        assert_eq!("agem".parse::<Method>().unwrap(), Method::Agem);
        assert!("sgd".parse::<Method>().is_err());
        assert_eq!(Method::Ccd.to_string(), "ccd");
    }
}
