//! Declarative experiment description, parsed from JSON.
//!
//! Every optional key has a default; after [`normalize`](ExperimentConfig::normalize)
//! all of them are explicit, so serialising the config gives a complete echo.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversary::ModelAttack;
use crate::aggregators::AggregatorConfig;
use crate::datagen::{DomainSpec, FlipMode};
use crate::error::{FedError, Result};
use crate::fedcore::{Strategy, TrainingSchedule, WeightMode};
use crate::metrics::{ShapleyConfig, ShapleyMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Dirichlet { beta: f64 },
    Iid,
}

fn default_classes() -> usize {
    10
}
fn default_dim() -> usize {
    10
}
fn default_clients() -> usize {
    10
}
fn default_separation() -> f64 {
    3.0
}
fn default_sigma() -> f64 {
    1.0
}
fn default_train_per_class() -> usize {
    100
}
fn default_test_per_class() -> usize {
    50
}
fn default_partition() -> PartitionSpec {
    PartitionSpec::Dirichlet { beta: 0.5 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian class blobs split across clients.
    Blobs {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_clients")]
        clients: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
        /// Training samples per class across the whole federation.
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_partition")]
        partition: PartitionSpec,
        /// Trailing coordinates whose class centers are all zero (pure noise).
        #[serde(default)]
        nuisance_dims: usize,
        /// Noise scale on the nuisance coordinates; defaults to `sigma`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nuisance_sigma: Option<f64>,
    },
    /// One affine domain per client; optional held-out domain.
    Domains {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_clients")]
        clients: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
        /// Per class and per client.
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        /// Per class and per domain.
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        domains: Vec<DomainSpec>,
        #[serde(default)]
        held_out: Option<String>,
    },
}

impl DataConfig {
    pub fn classes(&self) -> usize {
        match *self {
            DataConfig::Blobs { classes, .. } | DataConfig::Domains { classes, .. } => classes,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            DataConfig::Blobs { dim, .. } | DataConfig::Domains { dim, .. } => dim,
        }
    }

    pub fn clients(&self) -> usize {
        match *self {
            DataConfig::Blobs { clients, .. } | DataConfig::Domains { clients, .. } => clients,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes() < 2 || self.dim() < 1 || self.clients() < 1 {
            return Err(FedError::config(
                "data needs classes >= 2, dim >= 1 and clients >= 1",
            ));
        }
        match self {
            DataConfig::Blobs {
                separation,
                sigma,
                train_per_class,
                test_per_class,
                partition,
                clients,
                classes,
                dim,
                nuisance_dims,
                nuisance_sigma,
            } => {
                if !(*separation >= 0.0) || !(*sigma >= 0.0) {
                    return Err(FedError::config("separation and sigma must be >= 0"));
                }
                if nuisance_dims >= dim {
                    return Err(FedError::config(
                        "nuisance_dims must leave at least one informative coordinate",
                    ));
                }
                if nuisance_sigma.is_some_and(|s| !(s >= 0.0)) {
                    return Err(FedError::config("nuisance_sigma must be >= 0"));
                }
                if *test_per_class == 0 || train_per_class * classes < *clients {
                    return Err(FedError::config(
                        "need a non-empty test set and at least one training sample per client",
                    ));
                }
                if let PartitionSpec::Dirichlet { beta } = partition {
                    if !(*beta > 0.0) || !beta.is_finite() {
                        return Err(FedError::config("dirichlet beta must be > 0"));
                    }
                }
            }
            DataConfig::Domains {
                separation,
                sigma,
                train_per_class,
                test_per_class,
                domains,
                held_out,
                ..
            } => {
                if !(*separation >= 0.0) || !(*sigma >= 0.0) {
                    return Err(FedError::config("separation and sigma must be >= 0"));
                }
                if *train_per_class == 0 || *test_per_class == 0 {
                    return Err(FedError::config("per-class sample counts must be >= 1"));
                }
                if domains.len() < 2 {
                    return Err(FedError::config("domain data needs at least two domains"));
                }
                if let Some(h) = held_out {
                    if !domains.iter().any(|d| &d.name == h) {
                        return Err(FedError::config(format!("held-out domain `{h}` is not listed")));
                    }
                }
                for d in domains {
                    d.transform.validate(self.dim())?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width; 0 means logistic regression.
    #[serde(default)]
    pub hidden: usize,
}

fn default_server_lr() -> f64 {
    1.0
}
fn default_participation() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_server_lr")]
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_participation")]
    pub participation: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            lr: default_server_lr(),
            momentum: 0.0,
            participation: default_participation(),
        }
    }
}

fn default_flip_rate() -> f64 {
    0.5
}
fn default_trigger_value() -> f64 {
    5.0
}
fn default_tradeoff() -> f64 {
    1.0
}
fn default_poison_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackConfig {
    None,
    LabelFlip {
        mode: FlipMode,
        #[serde(default = "default_flip_rate")]
        rate: f64,
    },
    Model {
        attack: ModelAttack,
    },
    Backdoor {
        coords: Vec<usize>,
        #[serde(default = "default_trigger_value")]
        value: f64,
        #[serde(default)]
        target: usize,
        #[serde(default = "default_tradeoff")]
        tradeoff: f64,
        #[serde(default = "default_poison_fraction")]
        poison_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    /// Fraction of malicious clients; the lowest indices are chosen.
    #[serde(default)]
    pub ratio: f64,
    #[serde(default = "default_attack")]
    pub attack: AttackConfig,
}

fn default_attack() -> AttackConfig {
    AttackConfig::None
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self {
            ratio: 0.0,
            attack: AttackConfig::None,
        }
    }
}

impl AdversaryConfig {
    pub fn attackers(&self, clients: usize) -> usize {
        (self.ratio * clients as f64).floor() as usize
    }

    pub fn is_active(&self, clients: usize) -> bool {
        self.attackers(clients) > 0 && self.attack != AttackConfig::None
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Run the benign twin and report the accuracy drop.
    #[serde(default = "default_true")]
    pub attack_impact: bool,
    #[serde(default = "default_true")]
    pub attack_success_rate: bool,
    #[serde(default = "default_true")]
    pub contribution_match: bool,
    #[serde(default)]
    pub shapley: Option<ShapleyConfig>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            attack_impact: true,
            attack_success_rate: true,
            contribution_match: true,
            shapley: None,
        }
    }
}

/// The four independent random streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub training: u64,
    pub attack: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 0,
            init: 1,
            training: 2,
            attack: 3,
        }
    }
}

impl Seeds {
    pub fn set(&mut self, name: &str, value: u64) -> Result<()> {
        match name {
            "data" => self.data = value,
            "init" => self.init = value,
            "training" => self.training = value,
            "attack" => self.attack = value,
            other => {
                return Err(FedError::config(format!(
                    "unknown seed `{other}` (expected data, init, training or attack)"
                )))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: TrainingSchedule,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub weights: WeightMode,
    #[serde(default)]
    pub server: ServerConfig,
    #[serde(default)]
    pub adversary: AdversaryConfig,
    pub aggregator: AggregatorConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    /// `None` only before normalisation.
    #[serde(default)]
    pub seeds: Option<Seeds>,
}

fn default_strategy() -> Strategy {
    Strategy::Fedavg
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| FedError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        Self::from_json_str(&value.to_string())
    }

    /// Makes every default explicit.
    pub fn normalize(&mut self) {
        let m = self.data.clients();
        let attackers = self.adversary.attackers(m);
        self.aggregator.resolve(attackers);
        if self.seeds.is_none() {
            log::info!("no seeds given; using the documented defaults");
            self.seeds = Some(Seeds::default());
        }
    }

    pub fn seeds(&self) -> Seeds {
        self.seeds.unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.schedule.validate()?;
        self.strategy.validate()?;
        let m = self.data.clients();
        let s = &self.server;
        if !(s.lr > 0.0) || !(0.0..1.0).contains(&s.momentum) {
            return Err(FedError::config("server lr must be > 0 and momentum in [0, 1)"));
        }
        if !(s.participation > 0.0 && s.participation <= 1.0) {
            return Err(FedError::config("participation must be in (0, 1]"));
        }
        let ratio = self.adversary.ratio;
        if !(0.0..1.0).contains(&ratio) {
            return Err(FedError::config(format!(
                "malicious ratio must be in [0, 1), got {ratio}"
            )));
        }
        if ratio >= 0.5 && self.aggregator.needs_honest_majority() {
            return Err(FedError::config(format!(
                "{} requires a malicious ratio below 50%, got {ratio}",
                self.aggregator.name()
            )));
        }
        match &self.adversary.attack {
            AttackConfig::None => {}
            AttackConfig::LabelFlip { rate, .. } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(FedError::config("flip rate must be in [0, 1)"));
                }
            }
            AttackConfig::Model { attack } => attack.validate()?,
            AttackConfig::Backdoor {
                coords,
                value,
                target,
                tradeoff,
                poison_fraction,
            } => {
                if coords.is_empty() {
                    return Err(FedError::config("backdoor trigger needs at least one coordinate"));
                }
                crate::datagen::BackdoorConfig::on_coords(
                    self.data.dim(),
                    coords,
                    *value,
                    *target,
                    *tradeoff,
                    *poison_fraction,
                )?
                .validate(self.data.dim(), self.data.classes())?;
            }
        }
        let participants = ((s.participation * m as f64).ceil() as usize).clamp(1, m);
        self.aggregator.validate(participants)?;
        if let Some(sh) = &self.metrics.shapley {
            if !(sh.rho > 0.0) {
                return Err(FedError::config("shapley rho must be > 0"));
            }
            let limit = match sh.mode {
                ShapleyMode::RetrainExact => sh.max_exact,
                ShapleyMode::OneshotAggregate => crate::metrics::MAX_SHAPLEY_PLAYERS,
            };
            if m > limit {
                return Err(FedError::config(format!(
                    "shapley over {m} clients exceeds the exact limit {limit}"
                )));
            }
        }
        Ok(())
    }

    /// Pretty JSON echo of the normalised config.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
    ExperimentConfig::from_json_str(&text)
}
