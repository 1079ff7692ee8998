use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::Serialize;
use synthsae::container::Container;
use synthsae::evaluator::{evaluate, train_probes, EvalConfig};
use synthsae::generator::{BenchReport, ModelConfig, SyntheticModel};
use synthsae::rng::{self, domain};
use synthsae::sae::SaeModel;
use synthsae::trainer::{init_sae, train, ModelStream, TelemetryRecord, TrainObserver, TrainTelemetry};
use toml::Table;

use crate::config::{self, ExperimentConfig, ModelSource, SweepPoint};
use crate::error::{io_err, CliError, CliResult};
use crate::manifest::RunManifest;

pub const MODEL_FILE: &str = "model.bin";
pub const SAE_FILE: &str = "sae.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const PROBE_JSON: &str = "probe.json";
pub const TELEMETRY: &str = "telemetry.jsonl";

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Environment overrides already parsed into a table.
    pub env: Table,
}

impl Common {
    fn table(&self) -> CliResult<Table> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
        let mut t = config::load_table(path)?;
        config::merge(&mut t, self.env.clone());
        Ok(t)
    }

    /// Resolved sweep points with `--seed` applied.
    fn points(&self) -> CliResult<Vec<(String, ExperimentConfig)>> {
        let table = self.table()?;
        config::sweep_points(&table)?
            .into_iter()
            .map(|SweepPoint { name, table }| {
                let mut cfg = config::resolve(table)?;
                if let Some(s) = self.seed {
                    cfg.run.seeds = vec![s];
                }
                cfg.validate()?;
                Ok((name, cfg))
            })
            .collect()
    }

    fn single(&self, command: &str) -> CliResult<ExperimentConfig> {
        let mut points = self.points()?;
        if points.len() != 1 {
            return Err(CliError::Config(format!("{command} does not accept a [sweep] section")));
        }
        Ok(points.remove(0).1)
    }

    fn out_dir(&self, cfg: Option<&ExperimentConfig>) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.and_then(|c| c.run.out_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializes") + "\n"))
}

fn load_model(path: &Path) -> CliResult<SyntheticModel> {
    if !path.exists() {
        return Err(CliError::Io(format!("{}: no such model file", path.display())));
    }
    SyntheticModel::load(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_sae(path: &Path) -> CliResult<SaeModel> {
    if !path.exists() {
        return Err(CliError::Io(format!("{}: no such SAE file", path.display())));
    }
    let c = Container::load(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(SaeModel::from_container(&c)?)
}

fn model_from_source(src: &ModelSource) -> CliResult<SyntheticModel> {
    match src {
        ModelSource::File { path } => load_model(path),
        ModelSource::Inline(cfg) => Ok(SyntheticModel::build(cfg)?),
    }
}

fn join_rel(prefix: &str, name: &str) -> PathBuf {
    if prefix.is_empty() {
        PathBuf::from(name)
    } else {
        Path::new(prefix).join(name)
    }
}

/// Headline numbers printed after building a model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub n_features: usize,
    pub hidden_dim: usize,
    pub rho_mm: f64,
    /// Sum of the target firing probabilities.
    pub expected_l0: f64,
    /// Mean L0 over `summary_samples` draws.
    pub empirical_l0: f64,
    pub summary_samples: usize,
    pub hierarchy_features: usize,
    pub hierarchy_coverage: f64,
    pub config_digest: String,
}

pub const SUMMARY_SAMPLES: usize = 8192;

pub fn summarize(model: &SyntheticModel) -> CliResult<ModelSummary> {
    let rho = model.dictionary.measure_superposition(1024)?.rho_mm;
    let key = rng::stream_key(model.config.seed, &[domain::EVAL_DATA]);
    let batch = model.sample_batch(SUMMARY_SAMPLES, 0, key, true);
    let nnz = batch.coefficients.as_ref().map_or(0, |c| c.nnz());
    let covered = model.forest.as_ref().map_or(0, |f| f.covered());
    Ok(ModelSummary {
        n_features: model.n_features(),
        hidden_dim: model.hidden_dim(),
        rho_mm: rho,
        expected_l0: model.probs_base.expected_l0(),
        empirical_l0: nnz as f64 / SUMMARY_SAMPLES as f64,
        summary_samples: SUMMARY_SAMPLES,
        hierarchy_features: covered,
        hierarchy_coverage: covered as f64 / model.n_features() as f64,
        config_digest: model.config_digest().to_string(),
    })
}

pub fn generate_model(common: &Common) -> CliResult<ModelSummary> {
    let mut cfg = common.single("generate-model")?;
    if let (Some(s), ModelSource::Inline(m)) = (common.seed, &mut cfg.model) {
        m.seed = s;
    }
    let out = common.out_dir(Some(&cfg));
    create_dir(&out)?;
    let mut manifest = RunManifest::new("generate-model", Some(cfg.digest()));
    let model = manifest.time("build", || model_from_source(&cfg.model))?;
    manifest.seeds = vec![model.config.seed];
    let summary = manifest.time("summary", || summarize(&model))?;
    let path = out.join(MODEL_FILE);
    model.save(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    manifest.record("shared", MODEL_FILE);
    write_json(&out.join("model_summary.json"), &summary)?;
    manifest.record("shared", "model_summary.json");
    write_text(&out.join(CONFIG_FILE), &cfg.canonical())?;
    manifest.record("shared", CONFIG_FILE);
    manifest.write(&out)?;
    println!(
        "model: N={} D={} rho_mm={:.4} expected_l0={:.2} empirical_l0={:.2} hierarchy={}/{} ({:.1}%)",
        summary.n_features,
        summary.hidden_dim,
        summary.rho_mm,
        summary.expected_l0,
        summary.empirical_l0,
        summary.hierarchy_features,
        summary.n_features,
        100.0 * summary.hierarchy_coverage
    );
    println!("wrote {}", path.display());
    Ok(summary)
}

pub struct SampleArgs {
    pub model: Option<PathBuf>,
    pub n: usize,
    pub batch_size: usize,
    pub ground_truth: bool,
}

/// Dump the first `n` training-stream samples (at `batch_size` per batch)
/// for the given seed.
pub fn sample(common: &Common, args: &SampleArgs) -> CliResult<PathBuf> {
    if args.n == 0 || args.batch_size == 0 {
        return Err(CliError::Config("sample: -n and --batch-size must be >= 1".into()));
    }
    let (model, digest) = match &args.model {
        Some(p) => (load_model(p)?, None),
        None => {
            let cfg = common.single("sample")?;
            (model_from_source(&cfg.model)?, Some(cfg.digest()))
        }
    };
    let seed = common.seed.unwrap_or(0);
    let out = common.out_dir(None);
    create_dir(&out)?;
    let mut manifest = RunManifest::new("sample", digest);
    manifest.seeds = vec![seed];
    let key = rng::stream_key(seed, &[domain::TRAIN_DATA]);
    let d = model.hidden_dim();
    let mut acts = Vec::with_capacity(args.n * d);
    let mut indptr = vec![0i32];
    let mut indices = Vec::new();
    let mut values = Vec::new();
    manifest.time("sample", || {
        let mut done = 0;
        let mut index = 0u64;
        while done < args.n {
            let batch = model.sample_batch(args.batch_size, index, key, args.ground_truth);
            let take = (args.n - done).min(args.batch_size);
            for r in 0..take {
                acts.extend(batch.activations.row(r).iter());
                if let Some(c) = &batch.coefficients {
                    let (cols, vals) = c.row(r);
                    indices.extend(cols.iter().map(|&j| j as i32));
                    values.extend_from_slice(vals);
                    indptr.push(indices.len() as i32);
                }
            }
            done += take;
            index += 1;
        }
    });
    let mut c = Container::new(format!(
        "n_samples = {}\nbatch_size = {}\nseed = {seed}\nmodel_digest = \"{}\"\n",
        args.n,
        args.batch_size,
        model.config_digest()
    ));
    c.push_f32("activations", &[args.n, d], acts);
    if args.ground_truth {
        let nnz = indices.len();
        c.push_i32("coef_indptr", &[args.n + 1], indptr);
        c.push_i32("coef_indices", &[nnz], indices);
        c.push_f32("coef_values", &[nnz], values);
    }
    let path = out.join(format!("samples-seed-{seed}.bin"));
    c.save(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    manifest.record(&format!("seed-{seed}"), path.file_name().unwrap());
    manifest.write(&out)?;
    println!("wrote {} samples to {}", args.n, path.display());
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub arch: String,
    pub width: usize,
    pub steps: usize,
    pub samples: u64,
    pub tail_mean_l0: f64,
    pub final_multiplier: f64,
    pub min_multiplier: f64,
    pub max_multiplier: f64,
    pub final_dead_count: usize,
    pub inference_threshold: Option<f32>,
}

impl TrainSummary {
    fn new(sae: &SaeModel, tel: &TrainTelemetry, samples: u64) -> Self {
        let fold = |init: f64, f: fn(f64, f64) -> f64| tel.multiplier_history.iter().copied().fold(init, f);
        Self {
            arch: sae.arch.name().to_string(),
            width: sae.width(),
            steps: tel.l0_history.len(),
            samples,
            tail_mean_l0: tel.tail_mean_l0(0.1),
            final_multiplier: tel.multiplier_history.last().copied().unwrap_or(1.0),
            min_multiplier: fold(f64::INFINITY, f64::min),
            max_multiplier: fold(f64::NEG_INFINITY, f64::max),
            final_dead_count: tel.final_dead_count,
            inference_threshold: sae.inference_threshold,
        }
    }
}

/// Writes telemetry lines and checkpoints into one seed directory.
struct SeedObserver {
    dir: PathBuf,
    rel: String,
    telemetry: std::io::BufWriter<std::fs::File>,
    written: Vec<PathBuf>,
}

impl TrainObserver for SeedObserver {
    fn on_record(&mut self, record: &TelemetryRecord) -> synthsae::Result<()> {
        use std::io::Write;
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.telemetry, "{line}")?;
        Ok(())
    }

    fn on_checkpoint(&mut self, step: usize, sae: &SaeModel) -> synthsae::Result<()> {
        let name = format!("checkpoints/step-{step:08}.bin");
        let path = self.dir.join(&name);
        std::fs::create_dir_all(path.parent().unwrap())?;
        sae.to_container().save(&path)?;
        self.written.push(join_rel(&self.rel, &name));
        Ok(())
    }
}

struct SeedOutcome {
    key: String,
    files: Vec<PathBuf>,
    timings: Vec<(String, f64)>,
}

fn train_seed(
    cfg: &ExperimentConfig,
    model: &SyntheticModel,
    point_dir: &Path,
    point: &str,
    seed: u64,
) -> CliResult<SeedOutcome> {
    let sae_cfg = cfg.require_sae()?;
    let rel = join_rel(point, &format!("seed-{seed}")).to_string_lossy().into_owned();
    let dir = point_dir.join(format!("seed-{seed}"));
    create_dir(&dir)?;
    let mut timings = Vec::new();
    let mut files = Vec::new();
    let tel_path = dir.join(TELEMETRY);
    let file = std::fs::File::create(&tel_path).map_err(io_err(&tel_path))?;
    let mut obs = SeedObserver {
        dir: dir.clone(),
        rel: rel.clone(),
        telemetry: std::io::BufWriter::new(file),
        written: Vec::new(),
    };
    let source = ModelStream::training(model, seed);
    let start = std::time::Instant::now();
    let mut sae = init_sae(&source, sae_cfg, &cfg.train, seed)?;
    let tel = train(&source, &mut sae, &cfg.train, &mut obs)?;
    timings.push((format!("{rel}/train"), start.elapsed().as_secs_f64()));
    {
        use std::io::Write;
        obs.telemetry.flush().map_err(io_err(&tel_path))?;
    }
    files.append(&mut obs.written);
    files.push(join_rel(&rel, TELEMETRY));

    let sae_path = dir.join(SAE_FILE);
    sae.to_container().save(&sae_path).map_err(|e| CliError::Io(format!("{}: {e}", sae_path.display())))?;
    files.push(join_rel(&rel, SAE_FILE));
    write_json(&dir.join(TRAIN_SUMMARY), &TrainSummary::new(&sae, &tel, cfg.train.total_samples))?;
    files.push(join_rel(&rel, TRAIN_SUMMARY));

    if cfg.run.evaluate {
        let start = std::time::Instant::now();
        let report = evaluate(&sae, model, &cfg.eval, seed)?;
        timings.push((format!("{rel}/eval"), start.elapsed().as_secs_f64()));
        report.write_json(&dir.join(EVAL_JSON))?;
        report.write_csv(&dir.join(EVAL_CSV))?;
        files.push(join_rel(&rel, EVAL_JSON));
        files.push(join_rel(&rel, EVAL_CSV));
    }
    if let Some(pc) = &cfg.probe {
        let start = std::time::Instant::now();
        let report = train_probes(model, pc, seed)?;
        timings.push((format!("{rel}/probe"), start.elapsed().as_secs_f64()));
        write_json(&dir.join(PROBE_JSON), &report)?;
        files.push(join_rel(&rel, PROBE_JSON));
    }
    Ok(SeedOutcome { key: rel, files, timings })
}

/// Train every seed of every sweep point; returns the output directory.
pub fn train_cmd(common: &Common) -> CliResult<PathBuf> {
    let points = common.points()?;
    let out = common.out_dir(Some(&points[0].1));
    create_dir(&out)?;
    let digest = if points.len() == 1 {
        points[0].1.digest()
    } else {
        let all: String = points.iter().map(|(name, cfg)| format!("{name}:{}\n", cfg.digest())).collect();
        config::digest_str(&all)
    };
    let mut manifest = RunManifest::new("train", Some(digest));
    for (name, cfg) in &points {
        cfg.require_sae()?;
        let point_dir = if name.is_empty() { out.clone() } else { out.join(name) };
        create_dir(&point_dir)?;
        write_text(&point_dir.join(CONFIG_FILE), &cfg.canonical())?;
        manifest.record("shared", join_rel(name, CONFIG_FILE));
        let model = manifest.time(&join_rel(name, "model").to_string_lossy(), || {
            model_from_source(&cfg.model)
        })?;
        if let ModelSource::Inline(_) = cfg.model {
            let p = point_dir.join(MODEL_FILE);
            model.save(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            manifest.record("shared", join_rel(name, MODEL_FILE));
        }
        let outcomes = Mutex::new(Vec::new());
        cfg.run.seeds.par_iter().try_for_each(|&seed| -> CliResult<()> {
            let o = train_seed(cfg, &model, &point_dir, name, seed)?;
            eprintln!("trained {}", o.key);
            outcomes.lock().unwrap().push(o);
            Ok(())
        })?;
        let mut outcomes = outcomes.into_inner().unwrap();
        outcomes.sort_by(|a, b| a.key.cmp(&b.key));
        for o in outcomes {
            for f in o.files {
                manifest.record(&o.key, f);
            }
            manifest.timings.extend(o.timings);
        }
        for &s in &cfg.run.seeds {
            if !manifest.seeds.contains(&s) {
                manifest.seeds.push(s);
            }
        }
    }
    manifest.write(&out)?;
    println!("wrote {}", out.display());
    Ok(out)
}

pub struct EvalArgs {
    pub sae: PathBuf,
    pub model: PathBuf,
}

pub fn eval_cmd(common: &Common, args: &EvalArgs) -> CliResult<PathBuf> {
    let (eval_cfg, digest) = match &common.config {
        Some(_) => {
            let t = common.table()?;
            let eval: EvalConfig = match t.get("eval") {
                Some(v) => v
                    .clone()
                    .try_into()
                    .map_err(|e: toml::de::Error| CliError::Config(format!("eval: {}", e.message())))?,
                None => EvalConfig::default(),
            };
            let digest = config::digest_str(&toml::to_string(&eval).expect("serializes"));
            (eval, Some(digest))
        }
        None => (EvalConfig::default(), None),
    };
    let sae = load_sae(&args.sae)?;
    let model = load_model(&args.model)?;
    let seed = common.seed.unwrap_or(0);
    let out = common.out_dir(None);
    create_dir(&out)?;
    let mut manifest = RunManifest::new("eval", digest);
    manifest.seeds = vec![seed];
    let report = manifest.time("eval", || evaluate(&sae, &model, &eval_cfg, seed))?;
    report.write_json(&out.join(EVAL_JSON))?;
    report.write_csv(&out.join(EVAL_CSV))?;
    let key = format!("seed-{seed}");
    manifest.record(&key, EVAL_JSON);
    manifest.record(&key, EVAL_CSV);
    manifest.write(&out)?;
    println!(
        "explained_variance={:.4} mcc={:.4} f1={:.4} precision={:.4} recall={:.4} l0={:.2} dead={}",
        report.explained_variance,
        report.mcc,
        report.mean_f1,
        report.mean_precision,
        report.mean_recall,
        report.l0_sae,
        report.dead_latents
    );
    Ok(out)
}

pub struct BenchArgs {
    pub model: Option<PathBuf>,
    pub n_features: Vec<usize>,
    pub batch_size: usize,
    pub batches: usize,
    /// Run the configured orthogonalization when rebuilding at other sizes.
    pub keep_ortho: bool,
}

/// One throughput record per feature count (or for the given model).
pub fn bench(common: &Common, args: &BenchArgs) -> CliResult<Vec<BenchReport>> {
    let base: ModelConfig;
    let mut fixed = None;
    let mut digest = None;
    match (&args.model, &common.config) {
        (Some(p), _) => {
            let m = load_model(p)?;
            base = m.config.clone();
            fixed = Some(m);
        }
        (None, Some(_)) => {
            let cfg = common.single("bench")?;
            digest = Some(cfg.digest());
            match &cfg.model {
                ModelSource::File { path } => {
                    let m = load_model(path)?;
                    base = m.config.clone();
                    fixed = Some(m);
                }
                ModelSource::Inline(c) => base = c.clone(),
            }
        }
        (None, None) => base = ModelConfig::desk(0),
    }
    let seed = common.seed.unwrap_or(0);
    let out = common.out_dir(None);
    create_dir(&out)?;
    let mut manifest = RunManifest::new("bench", digest);
    manifest.seeds = vec![seed];
    let key = rng::stream_key(seed, &[domain::TRAIN_DATA]);
    let mut reports = Vec::new();
    let sizes: Vec<Option<usize>> = if args.n_features.is_empty() {
        vec![None]
    } else {
        args.n_features.iter().copied().map(Some).collect()
    };
    for n in sizes {
        let model = match (n, &fixed) {
            (None, Some(m)) => m.clone(),
            (None, None) => SyntheticModel::build(&base)?,
            (Some(n), _) => {
                let mut cfg = base.with_n_features(n);
                if !args.keep_ortho {
                    cfg.orthogonalization.steps = 0;
                }
                SyntheticModel::build(&cfg)?
            }
        };
        let r = model.throughput_bench(args.batch_size, args.batches, key)?;
        println!(
            "N={} D={} samples/s={:.0} s/sample={:.3e}",
            r.n_features, r.hidden_dim, r.samples_per_second, r.seconds_per_sample
        );
        manifest.timings.insert(format!("N={}", r.n_features), r.seconds_per_sample * (r.batch_size * (r.n_batches - 1)) as f64);
        reports.push(r);
    }
    let path = out.join("bench.jsonl");
    let text: String = reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializes") + "\n")
        .collect();
    write_text(&path, &text)?;
    manifest.record("shared", "bench.jsonl");
    manifest.write(&out)?;
    Ok(reports)
}
