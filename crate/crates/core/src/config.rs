//! Experiment configuration: one TOML file with a section per module
//! (`[network]`, `[objective]`, `[trainer]`, `[task]`, `[ablation]`), plus
//! dotted-path command-line overrides such as `trainer.lr=3e-4`.
//!
//! Unknown keys are rejected with the nearest valid key named, so sweep
//! scripts fail loudly on typos instead of silently using defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::default_variants;
use crate::network::{Architecture, NetError};
use crate::objective::{ObjectiveConfig, ObjectiveError};
use crate::tasks::{default_gmm, TaskError, TaskSpec};
use crate::trainer::{TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config key `{key}`; nearest valid key is `{suggestion}`")]
    UnknownKey { key: String, suggestion: String },
    #[error("bad override `{0}`; expected dotted.path=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// Settings for the ablation command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Variant rows to run (see the eval module for valid names).
    pub variants: Vec<String>,
    /// Per-seed score is the mean of this many best evaluation points.
    pub top_k: usize,
    /// Rows generated for training / held-out evaluation.
    pub train_n: usize,
    pub eval_n: usize,
    /// Dataset generation seed (held-out set uses this plus one).
    pub data_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            variants: default_variants(),
            top_k: 5,
            train_n: 512,
            eval_n: 512,
            data_seed: 1000,
        }
    }
}

/// The resolved experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub network: Architecture,
    pub objective: ObjectiveConfig,
    pub trainer: TrainConfig,
    pub task: TaskSpec,
    pub ablation: AblationConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            network: Architecture::default(),
            objective: ObjectiveConfig::default(),
            trainer: TrainConfig::default(),
            task: default_gmm(),
            ablation: AblationConfig::default(),
        }
    }
}

impl FileConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.network.validate()?;
        self.objective.validate()?;
        self.trainer.validate()?;
        self.task.validate()?;
        if self.ablation.top_k == 0 || self.ablation.train_n == 0 || self.ablation.eval_n == 0 {
            return Err(ConfigError::Invalid(
                "ablation top_k, train_n and eval_n must be positive".into(),
            ));
        }
        if self.network.action_dim != self.task.action_dim() {
            return Err(ConfigError::Invalid(format!(
                "network.action_dim = {} but task `{}` produces {}-dimensional actions",
                self.network.action_dim,
                self.task.kind_name(),
                self.task.action_dim()
            )));
        }
        if self.network.cond_dim != self.task.cond_dim() {
            return Err(ConfigError::Invalid(format!(
                "network.cond_dim = {} but task `{}` provides {} conditioning columns",
                self.network.cond_dim,
                self.task.kind_name(),
                self.task.cond_dim()
            )));
        }
        Ok(())
    }

    /// Canonical serialised form (used for manifests and hashing).
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialisation cannot fail")
    }
}

// ---------------------------------------------------------------------------
// Schema (for typo suggestions)
// ---------------------------------------------------------------------------

const TOP_KEYS: &[&str] = &["network", "objective", "trainer", "task", "ablation"];
const NETWORK_KEYS: &[&str] = &[
    "action_dim",
    "cond_dim",
    "hidden_dims",
    "time_embed_dim",
    "activation",
    "feature_layer",
];
const OBJECTIVE_KEYS: &[&str] = &[
    "lambda_disp",
    "lambda_cos",
    "tau_disp",
    "derivative_mode",
    "dde_epsilon",
    "p_equal",
    "norm_floor",
];
const TRAINER_KEYS: &[&str] = &[
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "batch_size",
    "epochs",
    "eval_every",
    "eval_samples",
    "eval_nfe",
    "action_scale",
    "seeds",
];
const TASK_KEYS: &[&str] = &[
    "kind",
    "means",
    "weights",
    "sigma",
    "goal",
    "magnitude",
    "noise_frac",
    "success_radius",
    "mode_offset_deg",
    "angle_noise_deg",
    "norm_jitter",
    "angle_tol_deg",
    "norm_rel_tol",
    "dock",
    "large_magnitude",
    "small_fraction",
];
const DOCK_KEYS: &[&str] = &[
    "magnitude",
    "mode_offset_deg",
    "angle_noise_deg",
    "norm_jitter",
    "angle_tol_deg",
    "norm_rel_tol",
];
const ABLATION_KEYS: &[&str] = &["variants", "top_k", "train_n", "eval_n", "data_seed"];

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn nearest(key: &str, candidates: &[&str]) -> String {
    candidates
        .iter()
        .min_by_key(|c| levenshtein(key, c))
        .unwrap_or(&"")
        .to_string()
}

fn check_keys(
    table: &toml::Table,
    allowed: &[&str],
    prefix: &str,
) -> Result<(), ConfigError> {
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            let full = if prefix.is_empty() {
                key.clone()
            } else {
                format!("{prefix}.{key}")
            };
            let near = nearest(key, allowed);
            let suggestion = if prefix.is_empty() {
                near
            } else {
                format!("{prefix}.{near}")
            };
            return Err(ConfigError::UnknownKey { key: full, suggestion });
        }
    }
    Ok(())
}

fn check_schema(table: &toml::Table) -> Result<(), ConfigError> {
    check_keys(table, TOP_KEYS, "")?;
    let sections: [(&str, &[&str]); 5] = [
        ("network", NETWORK_KEYS),
        ("objective", OBJECTIVE_KEYS),
        ("trainer", TRAINER_KEYS),
        ("task", TASK_KEYS),
        ("ablation", ABLATION_KEYS),
    ];
    for (name, keys) in sections {
        if let Some(toml::Value::Table(t)) = table.get(name) {
            check_keys(t, keys, name)?;
            if name == "task" {
                if let Some(toml::Value::Table(dock)) = t.get("dock") {
                    check_keys(dock, DOCK_KEYS, "task.dock")?;
                }
            }
        } else if let Some(other) = table.get(name) {
            return Err(ConfigError::Parse(format!(
                "`{name}` must be a section (table), found {}",
                other.type_str()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Loading and overrides
// ---------------------------------------------------------------------------

/// Parses `path.to.key=value` and writes the value into the raw table,
/// creating intermediate tables. The value text is parsed as TOML (so
/// numbers, booleans and arrays work); anything that does not parse as TOML
/// becomes a string, which keeps `task.kind=reach` ergonomic.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() || path.split('.').any(|s| s.is_empty()) {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let mut segments: Vec<&str> = path.split('.').collect();
    let last = segments.pop().expect("nonempty path");
    let mut cursor = table;
    for seg in segments {
        let entry = cursor
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match entry {
            toml::Value::Table(t) => cursor = t,
            _ => {
                return Err(ConfigError::BadOverride(format!(
                    "{spec} (`{seg}` is not a section)"
                )))
            }
        }
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

/// Loads the configuration: file (optional — defaults apply without one),
/// then overrides in order, then schema check, dimension auto-wiring and
/// validation.
///
/// If the network dimensions are not given explicitly they are set from the
/// task, so switching `task.kind` never needs a matching pair of dimension
/// edits; explicitly set dimensions must agree with the task.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<FileConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    for ov in overrides {
        apply_override(&mut table, ov)?;
    }
    check_schema(&table)?;

    let explicit_action = nested_key_present(&table, "network", "action_dim");
    let explicit_cond = nested_key_present(&table, "network", "cond_dim");

    let mut cfg: FileConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| ConfigError::Parse(e.to_string()))?;
    if !explicit_action {
        cfg.network.action_dim = cfg.task.action_dim();
    }
    if !explicit_cond {
        cfg.network.cond_dim = cfg.task.cond_dim();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn nested_key_present(table: &toml::Table, section: &str, key: &str) -> bool {
    matches!(
        table.get(section),
        Some(toml::Value::Table(t)) if t.contains_key(key)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::DerivativeMode;

    #[test]
    fn empty_config_yields_defaults() {
        let cfg = load_config(None, &[]).unwrap();
        assert_eq!(cfg, FileConfig::default());
        assert_eq!(cfg.network.cond_dim, 0); // generative default task
        assert_eq!(cfg.trainer.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn file_sections_and_auto_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(
            &path,
            r#"
[task]
kind = "reach"
goal = [0.25, 0.25]

[trainer]
lr = 3e-4
epochs = 7
"#,
        )
        .unwrap();
        let cfg = load_config(Some(&path), &[]).unwrap();
        assert_eq!(cfg.network.cond_dim, 2); // wired from the task
        assert_eq!(cfg.trainer.lr, 3e-4);
        assert_eq!(cfg.trainer.epochs, 7);
        match cfg.task {
            TaskSpec::Reach(r) => assert_eq!(r.goal, [0.25, 0.25]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_apply_in_order_and_parse_types() {
        let cfg = load_config(
            None,
            &[
                "task.kind=precision_dock".to_string(),
                "trainer.lr=0.001".to_string(),
                "trainer.seeds=[5, 6]".to_string(),
                "objective.derivative_mode=dde".to_string(),
                "trainer.lr=0.002".to_string(), // later wins
            ],
        )
        .unwrap();
        assert_eq!(cfg.trainer.lr, 0.002);
        assert_eq!(cfg.trainer.seeds, vec![5, 6]);
        assert_eq!(cfg.objective.derivative_mode, DerivativeMode::DdeFull);
        assert_eq!(cfg.network.cond_dim, 2);
        match cfg.task {
            TaskSpec::PrecisionDock(d) => assert_eq!(d.magnitude, 0.02),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_suggest_the_nearest_valid_one() {
        let err = load_config(None, &["objective.lambda_cso=0.5".to_string()]).unwrap_err();
        match err {
            ConfigError::UnknownKey { key, suggestion } => {
                assert_eq!(key, "objective.lambda_cso");
                assert_eq!(suggestion, "objective.lambda_cos");
            }
            other => panic!("{other:?}"),
        }

        let err = load_config(None, &["trianer.lr=0.1".to_string()]).unwrap_err();
        match err {
            ConfigError::UnknownKey { key, suggestion } => {
                assert_eq!(key, "trianer");
                assert_eq!(suggestion, "trainer");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn explicit_dimension_mismatch_is_rejected() {
        let err = load_config(
            None,
            &[
                "task.kind=reach".to_string(),
                "network.cond_dim=0".to_string(),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)), "{err}");
    }

    #[test]
    fn bad_override_shapes_are_rejected() {
        assert!(matches!(
            load_config(None, &["trainer.lr".to_string()]),
            Err(ConfigError::BadOverride(_))
        ));
        assert!(matches!(
            load_config(None, &["=3".to_string()]),
            Err(ConfigError::BadOverride(_))
        ));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = load_config(None, &["task.kind=gen_mixed_magnitude".to_string()]).unwrap();
        let text = cfg.to_toml();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, &text).unwrap();
        let back = load_config(Some(&path), &[]).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(levenshtein("lambda_cso", "lambda_cos"), 2);
        assert_eq!(nearest("epochz", TRAINER_KEYS), "epochs");
    }
}
