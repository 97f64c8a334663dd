//! Scenario configuration, sweep specs and the embedded presets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AttackKind, QualityModel};
use crate::poi::RewardParams;
use crate::procache::{CacheConfig, PolicyKind};
use crate::reputation::ReputationParams;
use crate::session::{EscrowConfig, QuorumConfig};
use crate::types::in_unit_range;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown preset `{0}` (expected fig4, fig5, fig6 or fig7)")]
    UnknownPreset(String),
}

/// How queries are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    /// Uniform topic, sequential variants per topic.
    #[default]
    Uniform,
    /// Every (topic, variant) question once, in shuffled order.
    Exhaustive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub rounds: u64,
    pub n_honest_suppliers: usize,
    pub n_malicious_suppliers: usize,
    pub n_honest_validators: usize,
    pub n_malicious_validators: usize,
    pub n_users: usize,
    pub n_malicious_users: usize,
    /// Malicious nodes join both the supplier and the validator pool.
    pub malicious_dual_role: bool,
    pub attack: AttackKind,
    pub topics: u32,
    pub variants_per_topic: u32,
    pub queries_per_round: u32,
    pub workload: WorkloadKind,
    /// Stops issuing queries after this many in total.
    pub question_limit: Option<u64>,
    pub cache_policy: PolicyKind,
    /// Share of queries issued by malicious users re-asking topics last served by a malicious supplier.
    pub cache_attack_rate: f64,
    /// Tokens per query.
    pub payment_per_query: f64,
    /// Starting balance of every user, in tokens.
    pub initial_balance: f64,
    pub initial_reputation: f64,
    pub embedding_dim: usize,
    /// Offset length applied to a topic vector for question variants and on-topic answers.
    pub variant_noise: f64,
    /// Service delay of a cache hit, abstract units.
    pub delay_hit: f64,
    /// Service delay of a cache miss, abstract units.
    pub delay_miss: f64,
    pub reputation: ReputationParams,
    pub reward: RewardParams,
    pub cache: CacheConfig,
    pub quorum: QuorumConfig,
    pub quality: QualityModel,
    pub escrow: EscrowConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            seed: 42,
            rounds: 200,
            n_honest_suppliers: 8,
            n_malicious_suppliers: 0,
            n_honest_validators: 8,
            n_malicious_validators: 0,
            n_users: 4,
            n_malicious_users: 0,
            malicious_dual_role: true,
            attack: AttackKind::None,
            topics: 20,
            variants_per_topic: 5,
            queries_per_round: 10,
            workload: WorkloadKind::Uniform,
            question_limit: None,
            cache_policy: PolicyKind::Procache,
            cache_attack_rate: 0.0,
            payment_per_query: 1.0,
            initial_balance: 1.0e6,
            initial_reputation: 0.5,
            embedding_dim: 64,
            variant_noise: 0.3,
            delay_hit: 1.0,
            delay_miss: 10.0,
            reputation: ReputationParams::default(),
            reward: RewardParams::default(),
            cache: CacheConfig::default(),
            quorum: QuorumConfig::default(),
            quality: QualityModel::default(),
            escrow: EscrowConfig::default(),
        }
    }
}

impl ScenarioConfig {
    /// Malicious node count when every malicious node holds both roles.
    pub fn n_malicious_nodes(&self) -> usize {
        if self.malicious_dual_role {
            self.n_malicious_suppliers.max(self.n_malicious_validators)
        } else {
            self.n_malicious_suppliers + self.n_malicious_validators
        }
    }

    pub fn supplier_pool_size(&self) -> usize {
        if self.malicious_dual_role {
            self.n_honest_suppliers + self.n_malicious_nodes()
        } else {
            self.n_honest_suppliers + self.n_malicious_suppliers
        }
    }

    pub fn validator_pool_size(&self) -> usize {
        if self.malicious_dual_role {
            self.n_honest_validators + self.n_malicious_nodes()
        } else {
            self.n_honest_validators + self.n_malicious_validators
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n_honest_suppliers == 0 {
            return bad("n_honest_suppliers must be at least 1".into());
        }
        if self.n_honest_validators == 0 {
            return bad("n_honest_validators must be at least 1".into());
        }
        if self.n_users == 0 {
            return bad("n_users must be at least 1".into());
        }
        let any_malicious = self.n_malicious_suppliers + self.n_malicious_validators > 0;
        if any_malicious && self.attack == AttackKind::None {
            return bad("attack must be set when malicious suppliers or validators are configured".into());
        }
        if self.topics == 0 || self.variants_per_topic == 0 || self.queries_per_round == 0 {
            return bad("topics, variants_per_topic and queries_per_round must be positive".into());
        }
        if self.embedding_dim < 2 {
            return bad("embedding_dim must be at least 2".into());
        }
        if !in_unit_range(self.cache_attack_rate) {
            return bad(format!("cache_attack_rate must be in [0, 1], got {}", self.cache_attack_rate));
        }
        if self.cache_attack_rate > 0.0 && self.n_malicious_users == 0 {
            return bad("cache_attack_rate needs n_malicious_users > 0".into());
        }
        if !(self.payment_per_query > 0.0) {
            return bad("payment_per_query must be positive".into());
        }
        if !(self.initial_balance >= 0.0) {
            return bad("initial_balance must be non-negative".into());
        }
        if !in_unit_range(self.initial_reputation) {
            return bad(format!("initial_reputation must be in [0, 1], got {}", self.initial_reputation));
        }
        if !(self.variant_noise >= 0.0) {
            return bad("variant_noise must be non-negative".into());
        }
        if !(self.delay_hit >= 0.0 && self.delay_miss >= 0.0) {
            return bad("delay_hit and delay_miss must be non-negative".into());
        }
        if self.quorum.min_suppliers > self.supplier_pool_size() {
            return bad(format!(
                "quorum.min_suppliers ({}) exceeds the supplier pool ({})",
                self.quorum.min_suppliers,
                self.supplier_pool_size()
            ));
        }
        if self.quorum.validator_sample_size > self.validator_pool_size() {
            return bad(format!(
                "quorum.validator_sample_size ({}) exceeds the validator pool ({})",
                self.quorum.validator_sample_size,
                self.validator_pool_size()
            ));
        }
        self.reputation.validate().map_err(ConfigError::Invalid)?;
        self.reward.validate().map_err(ConfigError::Invalid)?;
        self.cache.validate().map_err(ConfigError::Invalid)?;
        self.quorum.validate().map_err(ConfigError::Invalid)?;
        self.quality.validate().map_err(ConfigError::Invalid)?;
        self.escrow.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }
}

/// One labelled set of overrides applied on top of a base scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepEntry {
    pub label: String,
    pub overrides: toml::Table,
}

/// A scenario file: the base scenario plus an optional `[[sweep]]` list.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioFile {
    pub config: ScenarioConfig,
    pub sweep: Vec<SweepEntry>,
}

fn parse_err(origin: &str, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Parse {
        origin: origin.to_owned(),
        message: e.to_string().trim().to_owned(),
    }
}

fn parse_sweep(origin: &str, value: toml::Value) -> Result<Vec<SweepEntry>, ConfigError> {
    let toml::Value::Array(items) = value else {
        return Err(parse_err(origin, "`sweep` must be an array of tables"));
    };
    items
        .into_iter()
        .enumerate()
        .map(|(i, item)| {
            let toml::Value::Table(mut t) = item else {
                return Err(parse_err(origin, format!("sweep[{i}] must be a table")));
            };
            let label = match t.remove("label") {
                Some(toml::Value::String(s)) => s,
                _ => return Err(parse_err(origin, format!("sweep[{i}] needs a string `label`"))),
            };
            Ok(SweepEntry { label, overrides: t })
        })
        .collect()
}

/// Parses TOML text, or JSON when it starts with `{`.
pub fn parse_table(text: &str, origin: &str) -> Result<toml::Table, ConfigError> {
    if text.trim_start().starts_with('{') {
        let json: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_err(origin, e))?;
        return match toml::Value::try_from(json).map_err(|e| parse_err(origin, e))? {
            toml::Value::Table(t) => Ok(t),
            _ => Err(parse_err(origin, "top level must be an object")),
        };
    }
    text.parse::<toml::Table>().map_err(|e| parse_err(origin, e))
}

fn config_from_table(table: toml::Table, origin: &str) -> Result<ScenarioConfig, ConfigError> {
    let cfg: ScenarioConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| parse_err(origin, e))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ScenarioFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut table = parse_table(text, origin)?;
        let sweep = match table.remove("sweep") {
            Some(v) => parse_sweep(origin, v)?,
            None => Vec::new(),
        };
        Ok(Self {
            config: config_from_table(table, origin)?,
            sweep,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }
}

impl ScenarioConfig {
    /// Parses a scenario without a sweep list.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let file = ScenarioFile::parse(text, origin)?;
        if !file.sweep.is_empty() {
            return Err(parse_err(origin, "contains a [[sweep]] list; use the sweep or preset command"));
        }
        Ok(file.config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Loads a standalone sweep spec: a file holding only `[[sweep]]` entries.
pub fn load_sweep_spec(path: &Path) -> Result<Vec<SweepEntry>, ConfigError> {
    let origin = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut table = parse_table(&text, &origin)?;
    let sweep = table.remove("sweep").map(|v| parse_sweep(&origin, v)).transpose()?;
    if let Some(key) = table.keys().next() {
        return Err(parse_err(&origin, format!("unknown key `{key}` in sweep spec")));
    }
    Ok(sweep.unwrap_or_default())
}

fn merge(base: &mut toml::Table, overrides: &toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// `base` with `entry`'s overrides deep-merged in. The seed becomes
/// `base.seed + index` unless the entry sets one.
pub fn apply_overrides(base: &ScenarioConfig, entry: &SweepEntry, index: usize) -> Result<ScenarioConfig, ConfigError> {
    let mut table = toml::Table::try_from(base).map_err(|e| parse_err("base", e))?;
    table.insert("seed".into(), toml::Value::Integer(base.seed.wrapping_add(index as u64) as i64));
    table.insert("name".into(), toml::Value::String(entry.label.clone()));
    merge(&mut table, &entry.overrides);
    config_from_table(table, &format!("sweep entry `{}`", entry.label))
}

/// Checked-in preset text, byte-for-byte.
pub fn preset_text(name: &str) -> Result<&'static str, ConfigError> {
    Ok(match name {
        "fig4" => include_str!("../../presets/fig4.toml"),
        "fig5" => include_str!("../../presets/fig5.toml"),
        "fig6" => include_str!("../../presets/fig6.toml"),
        "fig7" => include_str!("../../presets/fig7.toml"),
        other => return Err(ConfigError::UnknownPreset(other.to_owned())),
    })
}

pub const PRESETS: [&str; 4] = ["fig4", "fig5", "fig6", "fig7"];

pub fn preset(name: &str) -> Result<ScenarioFile, ConfigError> {
    ScenarioFile::parse(preset_text(name)?, &format!("preset {name}"))
}
