//! Experiment configuration files.
//!
//! ```toml
//! label = "commnet-tj"
//! output_dir = "runs"
//!
//! [env]
//! kind = "traffic_junction"   # or "sum_signal"
//! max_agents = 5
//!
//! [protocol]
//! rounds = 1
//! hidden_dim = 64
//! topology = "full"           # full | gated | attention-topk
//! aggregation = "mean"        # mean | sum | attention
//! message = "identity"        # identity | linear
//!
//! [training]
//! epochs = 2000
//! learning_rate = 0.003
//! ```
//!
//! Every section except `[env]` may be omitted; missing keys take their
//! defaults. Loading reports every unknown key and every violated
//! constraint at once.

use mcomm_core::envs::{EnvConfig, SumSignalConfig, TjConfig};
use mcomm_core::protocol::{Protocol, ProtocolSpec};
use mcomm_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

/// Overrides `output_dir` when set.
pub const OUT_DIR_VAR: &str = "MCOMM_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub label: String,
    pub output_dir: PathBuf,
    /// Record wall-clock time per epoch in the trace. Off by default so that
    /// repeated seeded runs produce byte-identical traces.
    #[serde(default)]
    pub record_wall_time: bool,
    pub env: EnvConfig,
    pub protocol: ProtocolSpec,
    pub training: TrainConfig,
}

#[derive(Debug)]
pub enum ConfigError {
    Io { path: PathBuf, source: std::io::Error },
    Syntax(String),
    /// Every problem found, in document order.
    Invalid(Vec<String>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { path, source } => write!(f, "cannot read {}: {source}", path.display()),
            ConfigError::Syntax(e) => write!(f, "malformed config: {e}"),
            ConfigError::Invalid(problems) => {
                write!(f, "invalid config ({} problem{}):", problems.len(), if problems.len() == 1 { "" } else { "s" })?;
                for p in problems {
                    write!(f, "\n  - {p}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

const TOP_KEYS: &[&str] = &["label", "output_dir", "record_wall_time", "env", "protocol", "training"];

/// Field names a struct accepts, read off its own serialization so the list
/// cannot drift from the type.
fn keys_of<T: Serialize>(value: &T) -> BTreeSet<String> {
    match toml::Value::try_from(value) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => BTreeSet::new(),
    }
}

fn training_keys() -> BTreeSet<String> {
    // Optional fields are skipped when `None`, so fill them in first.
    keys_of(&TrainConfig { train_rounds: Some(1), eval_rounds: Some(1), stop_success: Some(1.0), ..TrainConfig::default() })
}

fn env_keys(kind: &str) -> Option<BTreeSet<String>> {
    let mut keys = match kind {
        "traffic_junction" => keys_of(&TjConfig::default()),
        "sum_signal" => keys_of(&SumSignalConfig::default()),
        _ => return None,
    };
    keys.insert("kind".into());
    Some(keys)
}

fn unknown_keys(table: &toml::Table, known: &BTreeSet<String>, section: &str, out: &mut Vec<String>) {
    for key in table.keys().filter(|k| !known.contains(*k)) {
        match section {
            "" => out.push(format!("unknown key `{key}`")),
            s => out.push(format!("unknown key `{key}` in [{s}]")),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let mut problems = Vec::new();
        unknown_keys(&doc, &TOP_KEYS.iter().map(|s| s.to_string()).collect(), "", &mut problems);

        let section = |name: &str, problems: &mut Vec<String>| -> toml::Table {
            match doc.get(name) {
                None => toml::Table::new(),
                Some(toml::Value::Table(t)) => t.clone(),
                Some(_) => {
                    problems.push(format!("`{name}` must be a table"));
                    toml::Table::new()
                }
            }
        };

        let env_table = section("env", &mut problems);
        let env = if !doc.contains_key("env") {
            problems.push("missing [env] section".into());
            None
        } else {
            match env_table.get("kind").and_then(|k| k.as_str()) {
                None => {
                    problems.push("[env] needs `kind` = \"traffic_junction\" or \"sum_signal\"".into());
                    None
                }
                Some(kind) => match env_keys(kind) {
                    None => {
                        problems.push(format!("unknown env kind `{kind}` (expected traffic_junction or sum_signal)"));
                        None
                    }
                    Some(known) => {
                        let before = problems.len();
                        unknown_keys(&env_table, &known, "env", &mut problems);
                        if problems.len() > before {
                            None
                        } else {
                            decode::<EnvConfig>(env_table, "env", &mut problems)
                        }
                    }
                },
            }
        };

        let protocol_table = section("protocol", &mut problems);
        let before = problems.len();
        unknown_keys(&protocol_table, &keys_of(&ProtocolSpec::default()), "protocol", &mut problems);
        let protocol = if problems.len() > before {
            None
        } else {
            decode::<ProtocolSpec>(protocol_table, "protocol", &mut problems).map(ProtocolSpec::normalized)
        };

        let training_table = section("training", &mut problems);
        let before = problems.len();
        unknown_keys(&training_table, &training_keys(), "training", &mut problems);
        let training =
            if problems.len() > before { None } else { decode::<TrainConfig>(training_table, "training", &mut problems) };

        let label = match doc.get("label") {
            None => "run".to_string(),
            Some(toml::Value::String(s)) if valid_label(s) => s.clone(),
            Some(v) => {
                problems.push(format!("`label` must be a non-empty name of letters, digits, '-', '_' or '.', got {v}"));
                String::new()
            }
        };
        let output_dir = match doc.get("output_dir") {
            None => PathBuf::from("runs"),
            Some(toml::Value::String(s)) => PathBuf::from(s),
            Some(v) => {
                problems.push(format!("`output_dir` must be a string, got {v}"));
                PathBuf::new()
            }
        };
        let record_wall_time = match doc.get("record_wall_time") {
            None => false,
            Some(toml::Value::Boolean(b)) => *b,
            Some(v) => {
                problems.push(format!("`record_wall_time` must be a boolean, got {v}"));
                false
            }
        };

        if let Some(env) = &env {
            problems.extend(env.validate().into_iter().map(|e| format!("[env] {e}")));
        }
        if let Some(t) = &training {
            problems.extend(t.validate().into_iter().map(|e| format!("[training] {e}")));
        }
        if let (Some(env), Some(spec)) = (&env, &protocol) {
            problems.extend(spec.validate(env.n_agents()).into_iter().map(|e| format!("[protocol] {e}")));
        }

        match (env, protocol, training) {
            (Some(env), Some(protocol), Some(training)) if problems.is_empty() => {
                Ok(Self { label, output_dir, record_wall_time, env, protocol, training })
            }
            _ => Err(ConfigError::Invalid(problems)),
        }
    }

    /// Snapshot written next to every run; parses back to an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `output_dir`, unless the environment overrides it.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_VAR) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolved_output_dir().join(&self.label)
    }

    /// Builds the protocol this config describes, against a probe environment.
    pub fn protocol(&self) -> Result<Protocol, String> {
        let env = self.env.build().map_err(|e| e.to_string())?;
        Protocol::new(self.protocol.clone(), env.n_agents(), env.obs_dim(), env.n_actions()).map_err(|e| e.to_string())
    }
}

fn valid_label(s: &str) -> bool {
    !s.is_empty() && s != "." && s != ".." && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

fn decode<T: serde::de::DeserializeOwned>(table: toml::Table, section: &str, problems: &mut Vec<String>) -> Option<T> {
    match toml::Value::Table(table).try_into::<T>() {
        Ok(v) => Some(v),
        Err(e) => {
            problems.push(format!("[{section}] {}", e.to_string().trim()));
            None
        }
    }
}
