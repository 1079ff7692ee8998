//! Aggregation of a run directory into a per-setting summary and tidy
//! plot data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::Value as Json;

use crate::commands::{CONFIG_FILE, EVAL_JSON, PROBE_JSON, TRAIN_SUMMARY};
use crate::error::{io_err, CliError, CliResult};
use crate::manifest::RunManifest;

pub const SUMMARY_CSV: &str = "summary.csv";
pub const PLOT_CSV: &str = "plot_data.csv";

/// Metrics pulled from each seed, as `(column, file, json key)`.
const METRICS: &[(&str, &str, &str)] = &[
    ("explained_variance", EVAL_JSON, "explained_variance"),
    ("mcc", EVAL_JSON, "mcc"),
    ("uniqueness", EVAL_JSON, "uniqueness"),
    ("precision", EVAL_JSON, "mean_precision"),
    ("recall", EVAL_JSON, "mean_recall"),
    ("f1", EVAL_JSON, "mean_f1"),
    ("l0", EVAL_JSON, "l0_sae"),
    ("dead_latents", EVAL_JSON, "dead_latents"),
    ("train_tail_l0", TRAIN_SUMMARY, "tail_mean_l0"),
    ("probe_f1", PROBE_JSON, "mean_f1"),
    ("probe_auc", PROBE_JSON, "mean_auc"),
];

/// Axis values describing one setting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SettingAxes {
    pub arch: String,
    pub width: String,
    pub hidden_dim: String,
    /// `k` for top-k style SAEs, `target_l0` otherwise.
    pub l0_knob: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRow {
    pub setting: String,
    pub seed: u64,
    pub metrics: BTreeMap<&'static str, f64>,
}

fn setting_axes(dir: &Path) -> CliResult<SettingAxes> {
    let path = dir.join(CONFIG_FILE);
    if !path.exists() {
        return Ok(SettingAxes::default());
    }
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let t: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let get = |path: &[&str]| -> String {
        let mut v = toml::Value::Table(t.clone());
        for p in path {
            match v.get(p) {
                Some(x) => v = x.clone(),
                None => return String::new(),
            }
        }
        match v {
            toml::Value::String(s) => s,
            other => other.to_string(),
        }
    };
    let k = get(&["sae", "arch", "k"]);
    Ok(SettingAxes {
        arch: get(&["sae", "arch", "kind"]),
        width: get(&["sae", "width"]),
        hidden_dim: get(&["model", "hidden_dim"]),
        l0_knob: if k.is_empty() { get(&["train", "target_l0"]) } else { k },
    })
}

fn read_json(path: &Path) -> CliResult<Option<Json>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// All `seed-S` directories under `root`, sorted.
fn seed_dirs(root: &Path) -> CliResult<Vec<(PathBuf, u64)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false))
            .map(|e| e.path())
            .collect();
        entries.sort();
        for p in entries {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            match name.strip_prefix("seed-").and_then(|s| s.parse().ok()) {
                Some(seed) => out.push((p, seed)),
                None if name != "checkpoints" => stack.push(p),
                None => {}
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn collect(root: &Path) -> CliResult<(Vec<SeedRow>, BTreeMap<String, SettingAxes>)> {
    if !root.is_dir() {
        return Err(CliError::Io(format!("{}: not a run directory", root.display())));
    }
    let mut rows = Vec::new();
    let mut axes = BTreeMap::new();
    for (dir, seed) in seed_dirs(root)? {
        let parent = dir.parent().unwrap_or(root);
        let setting = parent
            .strip_prefix(root)
            .ok()
            .map(|p| p.to_string_lossy().into_owned())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| "default".into());
        if !axes.contains_key(&setting) {
            axes.insert(setting.clone(), setting_axes(parent)?);
        }
        let mut metrics = BTreeMap::new();
        let mut cache: BTreeMap<&str, Option<Json>> = BTreeMap::new();
        for &(col, file, key) in METRICS {
            if !cache.contains_key(file) {
                cache.insert(file, read_json(&dir.join(file))?);
            }
            if let Some(v) = cache[file].as_ref().and_then(|j| j.get(key)).and_then(Json::as_f64) {
                metrics.insert(col, v);
            }
        }
        if !metrics.is_empty() {
            rows.push(SeedRow { setting, seed, metrics });
        }
    }
    if rows.is_empty() {
        return Err(CliError::Io(format!("{}: no seed results found", root.display())));
    }
    Ok((rows, axes))
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

pub fn report(run_dir: &Path, out: Option<&Path>) -> CliResult<PathBuf> {
    let out = out.unwrap_or(run_dir).to_path_buf();
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let (rows, axes) = collect(run_dir)?;
    let metrics: Vec<&str> = METRICS
        .iter()
        .map(|m| m.0)
        .filter(|m| rows.iter().any(|r| r.metrics.contains_key(m)))
        .collect();

    let plot = out.join(PLOT_CSV);
    let mut w = csv::Writer::from_path(&plot).map_err(csv_err(&plot))?;
    w.write_record(["setting", "arch", "width", "hidden_dim", "l0_knob", "seed", "metric", "value"])
        .map_err(csv_err(&plot))?;
    for r in &rows {
        let a = &axes[&r.setting];
        for (m, v) in &r.metrics {
            w.write_record([
                r.setting.as_str(),
                &a.arch,
                &a.width,
                &a.hidden_dim,
                &a.l0_knob,
                &r.seed.to_string(),
                m,
                &v.to_string(),
            ])
            .map_err(csv_err(&plot))?;
        }
    }
    w.flush().map_err(io_err(&plot))?;

    let summary = out.join(SUMMARY_CSV);
    let mut w = csv::Writer::from_path(&summary).map_err(csv_err(&summary))?;
    let mut header = vec!["setting", "arch", "width", "hidden_dim", "l0_knob", "n_seeds"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    for m in &metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header).map_err(csv_err(&summary))?;
    for (setting, a) in &axes {
        let group: Vec<&SeedRow> = rows.iter().filter(|r| &r.setting == setting).collect();
        let mut rec = vec![
            setting.clone(),
            a.arch.clone(),
            a.width.clone(),
            a.hidden_dim.clone(),
            a.l0_knob.clone(),
            group.len().to_string(),
        ];
        for m in &metrics {
            let vals: Vec<f64> = group.iter().filter_map(|r| r.metrics.get(m).copied()).collect();
            if vals.is_empty() {
                rec.extend([String::new(), String::new()]);
            } else {
                let (mean, std) = mean_std(&vals);
                rec.extend([mean.to_string(), std.to_string()]);
            }
        }
        w.write_record(&rec).map_err(csv_err(&summary))?;
    }
    w.flush().map_err(io_err(&summary))?;

    let mut manifest = RunManifest::new("report", None);
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort();
    seeds.dedup();
    manifest.seeds = seeds;
    manifest.record("shared", SUMMARY_CSV);
    manifest.record("shared", PLOT_CSV);
    let mpath = if out == run_dir {
        // Keep the training manifest intact; the report gets its own.
        let p = out.join("report_manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("serializes") + "\n";
        std::fs::write(&p, text).map_err(io_err(&p))?;
        p
    } else {
        manifest.write(&out)?
    };
    println!("wrote {} and {} ({} seed rows)", summary.display(), plot.display(), rows.len());
    Ok(mpath)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.2909944487358056).abs() < 1e-12);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }
}
