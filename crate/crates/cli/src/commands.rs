use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use metasolve::episodes::{
    gaussian_task_generator, glyph_task_generator, load_dataset, make_splits, sample_episode,
    save_dataset, write_atomic, Dataset, EpisodeSpec, GaussianConfig, GlyphConfig, Split,
};
use metasolve::meta::{
    episode_grad_check, evaluate, load_checkpoint, meta_train, parse_metrics, save_checkpoint,
    Checkpoint, HeadKind, MetricsRecord, MetricsWriter, Model, TrainConfig, TrainObserver,
    TrainState, METRICS_HEADER,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::{Generator, SpecArgs};

pub const DEFAULT_SPLITS: [f64; 3] = [0.64, 0.16, 0.20];

const CONFIG_FILE: &str = "config.json";
const MANIFEST_FILE: &str = "manifest.json";
const METRICS_FILE: &str = "metrics.csv";
const CHECKPOINT_FILE: &str = "latest.msck";

pub(crate) fn gen_data(
    generator: Generator,
    classes: Option<usize>,
    seed: u64,
    out: &Path,
    samples: Option<usize>,
    min_ways: usize,
    split_seed: u64,
) -> CliResult<()> {
    let raw = match generator {
        Generator::Gaussian => {
            let d = GaussianConfig::default();
            gaussian_task_generator(&GaussianConfig {
                classes: classes.unwrap_or(d.classes),
                samples_per_class: samples.unwrap_or(d.samples_per_class),
                seed,
                ..d
            })?
        }
        Generator::Glyph => {
            let d = GlyphConfig::default();
            glyph_task_generator(&GlyphConfig {
                classes: classes.unwrap_or(d.classes),
                samples_per_class: samples.unwrap_or(d.samples_per_class),
                seed,
                ..d
            })?
        }
    };
    let dataset = make_splits(&raw, DEFAULT_SPLITS, split_seed, min_ways)?;
    save_dataset(&dataset, out)?;
    let [train, val, test] = dataset.split_counts();
    println!(
        "{} classes, input dim {}: meta-train {train}, meta-val {val}, meta-test {test}",
        dataset.classes().len(),
        dataset.input_dim()
    );
    Ok(())
}

/// Reads a training config, as JSON for `.json` files and TOML otherwise.
pub fn load_config(path: &Path) -> CliResult<TrainConfig> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|message| CliError::Config {
        path: path.to_path_buf(),
        message,
    })
}

pub(crate) fn base_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(TrainConfig::default()),
    }
}

pub(crate) fn require_dataset(path: Option<&Path>, mode: &str) -> CliResult<Dataset> {
    let path = path.ok_or_else(|| CliError::Usage(format!("bench --mode {mode} needs --dataset")))?;
    Ok(load_dataset(path)?)
}

fn apply_spec(spec: &mut EpisodeSpec, args: &SpecArgs) {
    if let Some(w) = args.ways {
        spec.ways = w;
    }
    if let Some(k) = args.shots {
        spec.shots = k;
    }
    if let Some(q) = args.queries {
        spec.queries = q;
    }
}

#[derive(Clone, Debug, Default)]
pub(crate) struct TrainOverrides {
    pub seed: Option<u64>,
    pub head: Option<HeadKind>,
    pub steps: Option<usize>,
    pub spec: SpecArgs,
    pub ova: bool,
    pub max_episodes: Option<u64>,
}

fn resolve_head(head: HeadKind, ova: bool) -> CliResult<HeadKind> {
    match (head, ova) {
        (HeadKind::LrD2, true) => Ok(HeadKind::LrD2Ova),
        (HeadKind::LrD2Ova, _) | (_, false) => Ok(head),
        (other, true) => Err(CliError::Usage(format!("--ova applies to lr-d2 only, head is {other}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub config_hash: String,
    pub git_describe: String,
    pub started: String,
    pub finished: Option<String>,
    pub seed: u64,
    pub init_seed: u64,
    pub resumed_from: Option<u64>,
    pub dataset: PathBuf,
    pub config_path: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

struct RunObserver {
    metrics: MetricsWriter<BufWriter<File>>,
    checkpoint_path: PathBuf,
    seed: u64,
    config_hash: u64,
}

impl RunObserver {
    fn save(&mut self, state: &TrainState) -> metasolve::Result<()> {
        self.metrics.flush()?;
        save_checkpoint(
            &Checkpoint {
                state: state.clone(),
                rng_seed: self.seed,
                config_hash: self.config_hash,
            },
            &self.checkpoint_path,
        )
    }
}

impl TrainObserver for RunObserver {
    fn record(&mut self, record: &MetricsRecord) -> metasolve::Result<()> {
        self.metrics.write(record)
    }

    fn checkpoint(&mut self, state: &TrainState) -> metasolve::Result<()> {
        self.save(state)
    }
}

/// Keeps the header and the rows up to `episode`.
fn truncate_metrics(path: &Path, episode: u64) -> CliResult<()> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let records = parse_metrics(&text)?;
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records.iter().filter(|r| r.episode <= episode) {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    Ok(write_atomic(path, out.as_bytes())?)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn train(
    config_path: Option<&Path>,
    dataset_path: &Path,
    out: &Path,
    overrides: &TrainOverrides,
    resume: bool,
    force: bool,
    stop_after: Option<u64>,
    threads: usize,
) -> CliResult<()> {
    let mut config = base_config(config_path)?;
    if let Some(s) = overrides.seed {
        config.seed = s;
        config.init_seed = s;
    }
    config.head = resolve_head(overrides.head.unwrap_or(config.head), overrides.ova)?;
    if let Some(t) = overrides.steps {
        config.steps = t;
    }
    if let Some(m) = overrides.max_episodes {
        config.max_episodes = m;
    }
    apply_spec(&mut config.eval_spec, &overrides.spec);
    config.validate()?;
    let dataset = load_dataset(dataset_path)?;

    fs::create_dir_all(out).map_err(CliError::io(out))?;
    let manifest_path = out.join(MANIFEST_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    if manifest_path.exists() && !resume && !force {
        return Err(CliError::Usage(format!(
            "{} already holds a run; pass --resume to continue it or --force to overwrite",
            out.display()
        )));
    }
    let hash = config.hash();

    let resumed = if resume {
        let ckpt = load_checkpoint(&checkpoint_path)?;
        if ckpt.config_hash != hash && !force {
            return Err(CliError::Usage(format!(
                "config hash {hash:016x} does not match the checkpoint's {:016x}; pass --force to resume anyway",
                ckpt.config_hash
            )));
        }
        truncate_metrics(&metrics_path, ckpt.state.episode)?;
        Some(ckpt.state)
    } else {
        None
    };

    let config_json = out.join(CONFIG_FILE);
    write_json(&config_json, &config)?;
    let mut manifest = RunManifest {
        config: serde_json::from_str(&config.canonical_json()).expect("canonical json parses"),
        config_hash: format!("{hash:016x}"),
        git_describe: git_describe(),
        started: now(),
        finished: None,
        seed: config.seed,
        init_seed: config.init_seed,
        resumed_from: resumed.as_ref().map(|s| s.episode),
        dataset: dataset_path.to_path_buf(),
        config_path: config_json,
        metrics_path: metrics_path.clone(),
        checkpoint_path: checkpoint_path.clone(),
    };
    write_json(&manifest_path, &manifest)?;

    let metrics = if resumed.is_some() {
        let f = OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(CliError::io(&metrics_path))?;
        MetricsWriter::append(BufWriter::new(f))
    } else {
        let f = File::create(&metrics_path).map_err(CliError::io(&metrics_path))?;
        MetricsWriter::new(BufWriter::new(f))?
    };
    let mut observer = RunObserver {
        metrics,
        checkpoint_path,
        seed: config.seed,
        config_hash: hash,
    };
    let outcome = meta_train(&config, &dataset, resumed, stop_after, threads, &mut observer)?;
    observer.save(&outcome.state)?;
    manifest.finished = Some(now());
    write_json(&manifest_path, &manifest)?;
    let s = &outcome.state;
    println!(
        "trained {} episodes{}; best meta-val at episode {}",
        s.episode,
        if outcome.stopped_early { " (early stop)" } else { "" },
        s.best_episode
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub mean: f64,
    pub ci95: f64,
    pub mean_loss: f64,
    pub episodes: usize,
    pub spec: EpisodeSpec,
    pub split: Split,
    pub seed: u64,
    pub head: HeadKind,
    pub checkpoint_episode: u64,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn eval(
    checkpoint_path: &Path,
    dataset_path: &Path,
    config_path: Option<&Path>,
    head: Option<HeadKind>,
    spec: &SpecArgs,
    episodes: usize,
    seed: u64,
    force: bool,
    threads: usize,
) -> CliResult<EvalOutput> {
    let config_path = config_path.map(Path::to_path_buf).unwrap_or_else(|| {
        checkpoint_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(CONFIG_FILE)
    });
    let mut config = load_config(&config_path)?;
    if let Some(h) = head {
        config.head = h;
    }
    let ckpt = load_checkpoint(checkpoint_path)?;
    let hash = config.hash();
    if ckpt.config_hash != hash && !force {
        return Err(CliError::Usage(format!(
            "config hash {hash:016x} does not match the checkpoint's {:016x}; pass --force to evaluate anyway",
            ckpt.config_hash
        )));
    }
    let mut eval_spec = config.eval_spec.clone();
    apply_spec(&mut eval_spec, spec);
    eval_spec.validate()?;
    config.head.check_ways(eval_spec.ways)?;
    let dataset = load_dataset(dataset_path)?;
    let report = evaluate(
        &ckpt.state.best_model,
        &dataset,
        Split::MetaTest,
        &eval_spec,
        &config.head_settings(),
        episodes,
        seed,
        threads,
    )?;
    Ok(EvalOutput {
        mean: report.mean,
        ci95: report.ci95,
        mean_loss: report.mean_loss,
        episodes: report.episodes,
        spec: report.spec,
        split: Split::MetaTest,
        seed,
        head: config.head,
        checkpoint_episode: ckpt.state.episode,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub group: &'static str,
    pub max_rel_error: f64,
}

impl GradcheckRow {
    pub const TOLERANCE: f64 = 1e-4;

    pub fn passed(&self) -> bool {
        self.max_rel_error < Self::TOLERANCE
    }
}

/// A seeded episode and untrained model small enough for finite
/// differences: 5-way (2-way for lr-d2) episodes, a two-layer `[8, 8]`
/// embedding and non-trivial solver hyper-parameters.
pub fn gradcheck_fixture(
    head: HeadKind,
    steps: usize,
    seed: u64,
) -> metasolve::Result<(Model, metasolve::episodes::Episode, TrainConfig)> {
    let raw = gaussian_task_generator(&GaussianConfig {
        classes: 20,
        input_dim: 6,
        signal_dim: 3,
        samples_per_class: 8,
        seed,
        ..GaussianConfig::default()
    })?;
    let dataset = make_splits(&raw, DEFAULT_SPLITS, seed, 2)?;
    let ways = if head.is_binary() { 2 } else { 5 };
    let mut config = TrainConfig {
        head,
        steps,
        eval_spec: EpisodeSpec::new(ways, 2, 2),
        lambda_init: 0.7,
        alpha_init: 1.3,
        beta_init: 0.2,
        init_seed: seed,
        ..TrainConfig::default()
    };
    config.embedding.widths = vec![8, 8];
    let mut model = Model::init(&config, dataset.input_dim())?;
    for (i, b) in model.embed.biases.iter_mut().enumerate() {
        for (j, v) in b.data_mut().iter_mut().enumerate() {
            *v = 0.05 * ((i * 7 + j) as f64).sin();
        }
    }
    let episode = sample_episode(&dataset, Split::MetaTrain, &config.eval_spec, seed, 0)?;
    Ok((model, episode, config))
}

pub(crate) fn gradcheck(
    head: HeadKind,
    steps: usize,
    seed: u64,
    corrupt: bool,
) -> CliResult<Vec<GradcheckRow>> {
    let (model, episode, config) = gradcheck_fixture(head, steps, seed)?;
    let groups = episode_grad_check(&model, &episode, &config.head_settings(), 1e-6, corrupt)?;
    Ok(groups
        .into_iter()
        .map(|(group, max_rel_error)| GradcheckRow { group, max_rel_error })
        .collect())
}
