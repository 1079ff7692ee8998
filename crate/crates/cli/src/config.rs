//! Experiment configuration: TOML files with includes, model presets,
//! `SYNTHSAE_` environment overrides and parameter sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use synthsae::evaluator::{EvalConfig, ProbeConfig};
use synthsae::generator::ModelConfig;
use synthsae::sae::SaeConfig;
use synthsae::trainer::TrainConfig;
use toml::{Table, Value};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "SYNTHSAE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub label: Option<String>,
    /// Evaluate each trained SAE right after training.
    #[serde(default = "default_true")]
    pub evaluate: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_true() -> bool {
    true
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            out_dir: None,
            label: None,
            evaluate: true,
        }
    }
}

/// Where the synthetic model comes from: a saved container or an inline
/// (possibly preset-based) configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ModelSource {
    File { path: PathBuf },
    Inline(ModelConfig),
}

impl<'de> Deserialize<'de> for ModelSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut t = Table::deserialize(d)?;
        match t.remove("path") {
            Some(Value::String(p)) if t.is_empty() => Ok(Self::File { path: p.into() }),
            Some(Value::String(_)) => Err(D::Error::custom(format!(
                "model: `path` cannot be combined with other keys ({})",
                t.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
            Some(_) => Err(D::Error::custom("model.path must be a string")),
            None => from_value(Value::Table(t)).map(Self::Inline).map_err(D::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    #[serde(default)]
    pub sae: Option<SaeConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
    #[serde(default)]
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.run.seeds.is_empty() {
            return Err(CliError::Config("run.seeds: at least one seed is required".into()));
        }
        match &self.model {
            ModelSource::File { path } if !path.exists() => {
                return Err(CliError::Io(format!("model.path: {} does not exist", path.display())))
            }
            ModelSource::Inline(cfg) => cfg.validate().map_err(|e| CliError::Config(format!("model: {e}")))?,
            _ => {}
        }
        if let Some(sae) = &self.sae {
            self.train
                .validate(&sae.arch)
                .map_err(|e| CliError::Config(format!("train: {e}")))?;
        }
        Ok(())
    }

    pub fn require_sae(&self) -> Result<&SaeConfig, CliError> {
        self.sae
            .as_ref()
            .ok_or_else(|| CliError::Config("sae: section is required for training".into()))
    }

    /// Canonical TOML of the resolved configuration.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        digest_str(&self.canonical())
    }
}

/// Hex SHA-256 of a string.
pub fn digest_str(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn preset_table(name: &str) -> Result<Table, CliError> {
    let cfg = ModelConfig::preset(name, 0)
        .ok_or_else(|| CliError::Config(format!("model.preset: unknown preset `{name}` (known: synthsaebench-16k, desk)")))?;
    Ok(toml::from_str(&cfg.to_toml()).expect("preset round-trips"))
}

/// Recursive merge; tables merge key by key, everything else is replaced.
pub fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Read a config file, resolving `include = [...]` relative to it. Later
/// includes override earlier ones and the file itself overrides them all.
pub fn load_table(path: &Path) -> Result<Table, CliError> {
    load_table_depth(path, 0)
}

fn load_table_depth(path: &Path, depth: usize) -> Result<Table, CliError> {
    if depth > 16 {
        return Err(CliError::Config(format!("{}: include nesting too deep", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut table: Table =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(CliError::Config(format!(
                    "{}: include entries must be strings, got {other}",
                    path.display()
                ))),
            })
            .collect::<Result<_, _>>()?,
        Some(Value::String(s)) => vec![s],
        Some(other) => {
            return Err(CliError::Config(format!(
                "{}: include must be a string or list, got {other}",
                path.display()
            )))
        }
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut merged = Table::new();
    for inc in includes {
        merge(&mut merged, load_table_depth(&dir.join(inc), depth + 1)?);
    }
    merge(&mut merged, table);
    Ok(merged)
}

/// `SYNTHSAE_TRAIN__BATCH_SIZE=256` sets `train.batch_size = 256`. Values
/// parse as TOML, falling back to a plain string.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Result<Table, CliError> {
    let mut out = Table::new();
    let reserved = ["SYNTHSAE_THREADS", "SYNTHSAE_CONFIG"];
    for (k, v) in vars {
        let Some(rest) = k.strip_prefix(ENV_PREFIX) else { continue };
        if reserved.contains(&k.as_str()) || rest.is_empty() {
            continue;
        }
        let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
        let value = parse_value(&v);
        set_path(&mut out, &path, value).map_err(|e| CliError::Config(format!("{k}: {e}")))?;
    }
    Ok(out)
}

pub fn parse_value(text: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

pub fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| format!("`{p}` is not a table"))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Expand `model.preset`, then deserialize.
pub fn resolve(mut table: Table) -> Result<ExperimentConfig, CliError> {
    table.remove("sweep");
    if let Some(Value::Table(model)) = table.get_mut("model") {
        if let Some(p) = model.remove("preset") {
            let name = p
                .as_str()
                .ok_or_else(|| CliError::Config("model.preset must be a string".into()))?
                .to_string();
            let mut base = preset_table(&name)?;
            merge(&mut base, std::mem::take(model));
            *model = base;
        }
    }
    if !table.contains_key("model") {
        return Err(CliError::Config("missing required section `model`".into()));
    }
    from_value(Value::Table(table)).map_err(CliError::Config)
}

/// Deserialize with the dotted key path of the failing field in the error.
fn from_value<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, String> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let msg = e.inner().message().to_string();
        if e.path().iter().next().is_none() {
            msg
        } else {
            format!("{}: {msg}", e.path())
        }
    })
}

/// One point of a sweep: a label plus the overrides it applies.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub name: String,
    pub table: Table,
}

/// Cartesian product of `[sweep]` entries (`"train.target_l0" = [15, 30]`),
/// in key order.
pub fn sweep_points(table: &Table) -> Result<Vec<SweepPoint>, CliError> {
    let Some(sweep) = table.get("sweep") else {
        return Ok(vec![SweepPoint { name: String::new(), table: table.clone() }]);
    };
    let sweep = sweep
        .as_table()
        .ok_or_else(|| CliError::Config("sweep must be a table of lists".into()))?;
    let mut axes: Vec<(String, Vec<Value>)> = Vec::new();
    let mut flat = BTreeMap::new();
    flatten_sweep("", sweep, &mut flat)?;
    for (k, v) in flat {
        if v.is_empty() {
            return Err(CliError::Config(format!("sweep.{k}: empty list")));
        }
        axes.push((k, v));
    }
    let mut points = vec![SweepPoint { name: String::new(), table: table.clone() }];
    for (key, values) in &axes {
        let path: Vec<String> = key.split('.').map(str::to_string).collect();
        let mut next = Vec::new();
        for p in &points {
            for v in values {
                let mut t = p.table.clone();
                set_path(&mut t, &path, v.clone()).map_err(|e| CliError::Config(format!("sweep.{key}: {e}")))?;
                let part = format!("{}={}", path.last().unwrap(), value_label(v));
                let name = if p.name.is_empty() { part } else { format!("{}_{part}", p.name) };
                next.push(SweepPoint { name, table: t });
            }
        }
        points = next;
    }
    Ok(points)
}

fn flatten_sweep(prefix: &str, t: &Table, out: &mut BTreeMap<String, Vec<Value>>) -> Result<(), CliError> {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Array(items) => {
                out.insert(key, items.clone());
            }
            Value::Table(sub) => flatten_sweep(&key, sub, out)?,
            other => return Err(CliError::Config(format!("sweep.{key}: expected a list, got {other}"))),
        }
    }
    Ok(())
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Table(t) => t
            .iter()
            .map(|(k, v)| format!("{k}-{}", value_label(v)))
            .collect::<Vec<_>>()
            .join("-"),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_is_deep() {
        let mut a: Table = toml::from_str("[x]\na = 1\nb = 2\n[y]\nc = 3").unwrap();
        let b: Table = toml::from_str("[x]\nb = 5\nz = 1").unwrap();
        merge(&mut a, b);
        assert_eq!(a["x"]["a"].as_integer(), Some(1));
        assert_eq!(a["x"]["b"].as_integer(), Some(5));
        assert_eq!(a["x"]["z"].as_integer(), Some(1));
        assert_eq!(a["y"]["c"].as_integer(), Some(3));
    }

    #[test]
    fn env_keys_become_paths() {
        let t = env_overrides(vec![
            ("SYNTHSAE_TRAIN__BATCH_SIZE".into(), "256".into()),
            ("SYNTHSAE_RUN__LABEL".into(), "hello world".into()),
            ("SYNTHSAE_THREADS".into(), "4".into()),
            ("OTHER".into(), "x".into()),
        ])
        .unwrap();
        assert_eq!(t["train"]["batch_size"].as_integer(), Some(256));
        assert_eq!(t["run"]["label"].as_str(), Some("hello world"));
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn preset_expands_and_overrides() {
        let t: Table = toml::from_str("[model]\npreset = \"desk\"\nseed = 7\nhidden_dim = 96\n").unwrap();
        let cfg = resolve(t).unwrap();
        let ModelSource::Inline(m) = cfg.model else { panic!("inline model expected") };
        assert_eq!((m.seed, m.n_features, m.hidden_dim), (7, 2048, 96));
    }

    #[test]
    fn unknown_field_is_named() {
        let t: Table = toml::from_str("[model]\npreset = \"desk\"\n[train]\nbatchsize = 3\n").unwrap();
        let err = resolve(t).unwrap_err().to_string();
        assert!(err.contains("batchsize"), "{err}");
        let t: Table = toml::from_str("[model]\npreset = \"desk\"\nhidden_dim = \"wide\"\n").unwrap();
        let err = resolve(t).unwrap_err().to_string();
        assert!(err.contains("model: hidden_dim: invalid type"), "{err}");
    }

    #[test]
    fn sweeps_take_the_product() {
        let t: Table = toml::from_str(
            "[model]\npreset = \"desk\"\n[sweep]\n\"train.total_samples\" = [1, 2]\nrun.label = [\"a\", \"b\", \"c\"]\n",
        )
        .unwrap();
        let pts = sweep_points(&t).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0].name, "label=a_total_samples=1");
        assert_eq!(pts[5].table["train"]["total_samples"].as_integer(), Some(2));
    }

    #[test]
    fn digest_is_stable() {
        let t: Table = toml::from_str("[model]\npreset = \"desk\"\n").unwrap();
        assert_eq!(resolve(t.clone()).unwrap().digest(), resolve(t).unwrap().digest());
    }
}
