//! Layered configuration: built-in defaults, then an optional TOML file,
//! then repeatable `--set key=value` overrides, then dedicated flags like
//! `--seed`. Every command writes the fully resolved result next to its
//! outputs as `resolved_config.toml`, so a run can always be reproduced
//! from its artifacts alone.

use std::fs;
use std::path::Path;

use lde_core::data::{Protocol, SynthConfig};
use lde_core::error::{LdeError, Result};
use lde_core::model::ModelConfig;
use lde_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Split parameters that live in the config file rather than on the
/// command line (the protocol may still be overridden by `--protocol`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSettings {
    pub protocol: Protocol,
    /// Train-side fraction: of identities for close_scene, of scenes for
    /// the other protocols.
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings { protocol: Protocol::CloseScene, train_ratio: 0.5, seed: 0 }
    }
}

/// The whole configurable surface, one section per pipeline stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub gen: SynthConfig,
    pub split: SplitSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn kind(v: &toml::Value) -> &'static str {
    match v {
        toml::Value::String(_) => "string",
        toml::Value::Integer(_) => "integer",
        toml::Value::Float(_) => "float",
        toml::Value::Boolean(_) => "boolean",
        toml::Value::Datetime(_) => "datetime",
        toml::Value::Array(_) => "array",
        toml::Value::Table(_) => "table",
    }
}

/// Merges `overlay` into `base`, key by key. Tables recurse; scalars and
/// arrays replace the existing value and must keep its type (integers may
/// stand in for floats). Keys that do not exist in `base` — which always
/// starts as the complete default configuration — are rejected, so typos
/// fail loudly instead of being ignored.
fn merge(base: &mut toml::Value, overlay: toml::Value, path: &str) -> Result<()> {
    use toml::Value;
    match overlay {
        Value::Table(table) => {
            let Some(slots) = base.as_table_mut() else {
                return Err(LdeError::config(format!(
                    "config key '{path}' expects {}, got table",
                    kind(base)
                )));
            };
            for (key, val) in table {
                let child =
                    if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                match slots.get_mut(&key) {
                    Some(slot) => merge(slot, val, &child)?,
                    None => {
                        return Err(LdeError::config(format!("unknown config key '{child}'")))
                    }
                }
            }
            Ok(())
        }
        Value::Integer(i) if matches!(base, Value::Float(_)) => {
            *base = Value::Float(i as f64);
            Ok(())
        }
        val => {
            if std::mem::discriminant(base) != std::mem::discriminant(&val) {
                return Err(LdeError::config(format!(
                    "config key '{path}' expects {}, got {}",
                    kind(base),
                    kind(&val)
                )));
            }
            *base = val;
            Ok(())
        }
    }
}

/// `--set` values use TOML literal syntax (`0.5`, `true`, `[1, 2]`);
/// anything that does not parse as TOML is taken as a bare string, so
/// `--set split.protocol=day_night` needs no quoting.
fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_set(root: &mut toml::Value, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        return Err(LdeError::config(format!("--set expects key=value, got '{spec}'")));
    };
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(LdeError::config(format!("--set key '{key}' is not a dotted path")));
    }
    let mut overlay = parse_value(raw.trim());
    for part in key.rsplit('.') {
        let mut t = toml::map::Map::new();
        t.insert(part.to_string(), overlay);
        overlay = toml::Value::Table(t);
    }
    merge(root, overlay, "")
}

/// Resolves the effective configuration for one run. `seed`, when given,
/// overrides every section's seed field.
pub fn resolve(config_path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<AppConfig> {
    let mut root = toml::Value::try_from(AppConfig::default())
        .map_err(|e| LdeError::config(format!("default config serialization: {e}")))?;
    if let Some(path) = config_path {
        let text = fs::read_to_string(path)
            .map_err(|e| LdeError::config(format!("cannot read config file {}: {e}", path.display())))?;
        let file: toml::Value = text
            .parse()
            .map_err(|e| LdeError::config(format!("{}: {e}", path.display())))?;
        merge(&mut root, file, "")?;
    }
    for spec in sets {
        apply_set(&mut root, spec)?;
    }
    let mut app: AppConfig =
        root.try_into().map_err(|e| LdeError::config(format!("config: {e}")))?;
    if let Some(s) = seed {
        app.gen.seed = s;
        app.split.seed = s;
        app.model.seed = s;
        app.train.seed = s;
    }
    Ok(app)
}

/// Writes `resolved_config.toml` into `out`: the subcommand, its
/// command-line arguments as given, and the full effective configuration.
pub fn write_snapshot(
    out: &Path,
    command: &str,
    args: &[(&str, String)],
    app: &AppConfig,
) -> Result<()> {
    let mut top = toml::map::Map::new();
    top.insert("command".to_string(), toml::Value::String(command.to_string()));
    let mut arg_table = toml::map::Map::new();
    for (key, val) in args {
        arg_table.insert(key.to_string(), toml::Value::String(val.clone()));
    }
    top.insert("args".to_string(), toml::Value::Table(arg_table));
    let sections = toml::Value::try_from(app)
        .map_err(|e| LdeError::config(format!("config serialization: {e}")))?;
    let toml::Value::Table(sections) = sections else {
        return Err(LdeError::config("config did not serialize to a table"));
    };
    for (key, val) in sections {
        top.insert(key, val);
    }
    let text = toml::to_string_pretty(&toml::Value::Table(top))
        .map_err(|e| LdeError::config(format!("snapshot serialization: {e}")))?;
    let path = out.join("resolved_config.toml");
    fs::write(&path, text).map_err(|e| LdeError::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_without_inputs() {
        let app = resolve(None, &[], None).unwrap();
        assert_eq!(app, AppConfig::default());
        assert_eq!(app.gen.total_images(), 1800);
    }

    #[test]
    fn sets_override_and_promote_integers() {
        let sets = vec![
            "train.loss.lambda=0".to_string(),
            "gen.num_domains=4".to_string(),
            "split.protocol=day_night".to_string(),
            "train.hflip=false".to_string(),
        ];
        let app = resolve(None, &sets, None).unwrap();
        assert_eq!(app.train.loss.lambda, 0.0);
        assert_eq!(app.gen.num_domains, 4);
        assert_eq!(app.split.protocol, Protocol::DayNight);
        assert!(!app.train.hflip);
    }

    #[test]
    fn unknown_keys_and_type_mismatches_are_rejected() {
        let err = resolve(None, &["gen.bogus=1".to_string()], None).unwrap_err();
        assert!(err.to_string().contains("unknown config key 'gen.bogus'"), "{err}");

        let err = resolve(None, &["gen.size=tiny".to_string()], None).unwrap_err();
        assert!(err.to_string().contains("expects integer, got string"), "{err}");

        let err = resolve(None, &["train.loss=5".to_string()], None).unwrap_err();
        assert!(err.to_string().contains("expects table, got integer"), "{err}");

        let err = resolve(None, &["gen".to_string()], None).unwrap_err();
        assert!(err.to_string().contains("key=value"), "{err}");
    }

    #[test]
    fn seed_flag_overrides_every_section() {
        let sets = vec!["train.seed=3".to_string()];
        let app = resolve(None, &sets, Some(99)).unwrap();
        assert_eq!(app.gen.seed, 99);
        assert_eq!(app.split.seed, 99);
        assert_eq!(app.model.seed, 99);
        assert_eq!(app.train.seed, 99);
    }

    #[test]
    fn config_file_merges_partially() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        fs::write(&path, "[train]\np = 4\n\n[split]\ntrain_ratio = 0.25\n").unwrap();
        let app = resolve(Some(&path), &[], None).unwrap();
        assert_eq!(app.train.p, 4);
        assert_eq!(app.train.k_inst, TrainConfig::default().k_inst);
        assert_eq!(app.split.train_ratio, 0.25);
    }

    #[test]
    fn snapshot_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let app = resolve(None, &["train.loss.lambda=0.25".to_string()], Some(7)).unwrap();
        write_snapshot(dir.path(), "train", &[("data", "dataset".to_string())], &app).unwrap();
        let text = fs::read_to_string(dir.path().join("resolved_config.toml")).unwrap();
        assert!(text.contains("command = \"train\""), "{text}");
        assert!(text.contains("lambda = 0.25"), "{text}");

        #[derive(Deserialize)]
        struct Snapshot {
            command: String,
            #[allow(dead_code)]
            args: toml::Table,
            #[serde(flatten)]
            app: AppConfig,
        }
        let snap: Snapshot = toml::from_str(&text).unwrap();
        assert_eq!(snap.command, "train");
        assert_eq!(snap.app, app);
    }
}
