//! Command-line front end: `train`, `invert`, `counterfactual`, `evaluate`
//! and `synth`.
//!
//! Every command except `synth` writes a fresh run directory under the output
//! root (`--output-root`, else `$PREIMAGE_OUTPUT_ROOT`, else `runs`). The
//! directory is assembled under a hidden staging name and renamed into place
//! only after every artifact has been written, so a failed command leaves
//! nothing behind and an existing run is never touched.
//!
//! Settings resolve as flag, then `--config` file (`key = value` lines, `#`
//! comments), then default. The merged settings are echoed to `config.txt`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};

use crate::checkpoint::CheckpointBundle;
use crate::data::{self, CorruptionSpec, LabeledDataset, Mask};
use crate::error::{Error, Result};
use crate::estimator::{self, Pairing};
use crate::inversion::{self, InversionConfig, InversionMode};
use crate::model::{self, Architecture};
use crate::raster::Image;
use crate::training::{self, TrainConfig};

pub const OUTPUT_ROOT_ENV: &str = "PREIMAGE_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "deep-preimage", version, about = "Pre-image recovery and counterfactuals with a deep image prior")]
pub struct Cli {
    /// Directory receiving run directories.
    #[arg(long, global = true)]
    pub output_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Jointly train the classifier and its loss estimator.
    Train(TrainArgs),
    /// Recover an image from one of its stage encodings.
    Invert(InvertArgs),
    /// Move an image's prediction to another class.
    Counterfactual(CounterfactualArgs),
    /// Aggregate metrics of finished runs into a report.
    Evaluate(EvaluateArgs),
    /// Export the synthetic lesion dataset as an image folder.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` settings file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory name (default: `<command>-<unix seconds>-s<seed>`).
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// `synthetic` or an image folder.
    #[arg(long)]
    pub data: Option<String>,
    /// Labels CSV for an image folder (default `<data>/labels.csv`).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Number of synthetic samples.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Square side length images are resized to (image folders only).
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub split: Option<f64>,
    /// `halves` or `all_pairs`.
    #[arg(long)]
    pub pairing: Option<String>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// `desk` or `resnet18`.
    #[arg(long)]
    pub arch: Option<String>,
}

#[derive(Debug, Args)]
pub struct InversionArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub block: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub target_loss: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Generator widths per level, comma separated.
    #[arg(long)]
    pub widths: Option<String>,
    /// Std of per-step noise jitter (0 disables).
    #[arg(long)]
    pub noise_jitter: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inv: InversionArgs,
    /// dip_only, dip_regularized, explicit_tv or explicit_alpha.
    #[arg(long)]
    pub mode: Option<String>,
    /// Corruption applied before encoding: `occlusion:<size>[:<fill>]` or
    /// `blur:<sigma>`.
    #[arg(long)]
    pub corrupt: Option<String>,
    #[arg(long)]
    pub lambda_explicit: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CounterfactualArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inv: InversionArgs,
    /// Target class, by name or index.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Binary relevance mask for the localization ratio.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run directories to aggregate.
    #[arg(long, num_args = 1..)]
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 600)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Destination folder; must not exist yet.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::input(format!("line {}: expected `key = value`", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_key_values(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Merges flags, config-file entries and defaults, remembering the result.
struct Settings {
    file: BTreeMap<String, String>,
    echo: Vec<(String, String)>,
}

impl Settings {
    fn new(command: &str, config: Option<&Path>) -> Result<Self> {
        let mut file = match config {
            Some(p) => read_key_values(p)?,
            None => BTreeMap::new(),
        };
        if let Some(c) = file.remove("command") {
            if c != command {
                return Err(Error::input(format!(
                    "config file is for `{c}`, not `{command}`"
                )));
            }
        }
        Ok(Self {
            file,
            echo: vec![("command".into(), command.into())],
        })
    }

    fn from_file<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.file.remove(key) {
            None => Ok(None),
            Some(v) if v.is_empty() => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::input(format!("config value for `{key}` is invalid: `{v}`"))),
        }
    }

    fn opt<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let from_file = self.from_file(key)?;
        let value = flag.or(from_file);
        self.echo.push((
            key.into(),
            value.as_ref().map(ToString::to_string).unwrap_or_default(),
        ));
        Ok(value)
    }

    fn get<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let value = self.opt(key, flag)?.unwrap_or(default);
        self.echo.last_mut().expect("pushed by opt").1 = value.to_string();
        Ok(value)
    }

    fn require<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.opt(key, flag)?
            .ok_or_else(|| Error::input(format!("`--{}` is required", key.replace('_', "-"))))
    }

    /// Rejects config-file keys the command does not know.
    fn finish(&self) -> Result<()> {
        if let Some(k) = self.file.keys().next() {
            return Err(Error::input(format!("unknown config key `{k}`")));
        }
        Ok(())
    }

    fn echo_text(&self, run_id: &str) -> String {
        let mut out = format!("# run_id = {run_id}\n");
        for (k, v) in &self.echo {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn output_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

fn default_run_id(command: &str, seed: u64) -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{command}-{secs}-s{seed}")
}

/// Run directory under construction.
struct RunDir {
    staging: PathBuf,
    target: PathBuf,
}

impl RunDir {
    fn create(root: &Path, run_id: &str) -> Result<Self> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
            return Err(Error::input(format!("invalid run id `{run_id}`")));
        }
        let target = root.join(run_id);
        if target.exists() {
            return Err(Error::input(format!(
                "run directory {} already exists",
                target.display()
            )));
        }
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let staging = root.join(format!(".{run_id}.partial"));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;
        Ok(Self { staging, target })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }

    fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            return Err(Error::input(format!(
                "run directory {} appeared while running",
                self.target.display()
            )));
        }
        fs::rename(&self.staging, &self.target).map_err(|e| Error::io(&self.target, e))?;
        Ok(self.target.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.staging);
    }
}

fn metrics_csv(rows: &[(&str, String)]) -> String {
    let header: Vec<&str> = rows.iter().map(|r| r.0).collect();
    let values: Vec<&str> = rows.iter().map(|r| r.1.as_str()).collect();
    format!("{}\n{}\n", header.join(","), values.join(","))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::input(format!("bad generator widths `{s}`")))
}

fn cmd_train(args: TrainArgs, root: &Path) -> Result<PathBuf> {
    let mut s = Settings::new("train", args.common.config.as_deref())?;
    let defaults = TrainConfig::default();
    let source: String = s.require("data", args.data)?;
    let dataset = if source == "synthetic" {
        let n = s.get("n", args.n, 600)?;
        let data_seed = s.get("data_seed", args.data_seed, 0)?;
        data::make_synthetic_lesions(n, data_seed)?
    } else {
        let dir = PathBuf::from(&source);
        if !dir.is_dir() {
            return Err(Error::input(format!("data directory {} does not exist", dir.display())));
        }
        let labels = s.get("labels", args.labels.map(|p| p.display().to_string()), dir.join("labels.csv").display().to_string())?;
        let size = s.get("size", args.size, data::SYNTHETIC_SIZE)?;
        data::load_image_folder(&dir, Path::new(&labels), (size, size), None)?
    };
    let config = TrainConfig {
        beta_primary: s.get("beta1", args.beta1, defaults.beta_primary)?,
        beta_aux: s.get("beta2", args.beta2, defaults.beta_aux)?,
        margin: s.get("gamma", args.gamma, defaults.margin)?,
        batch_size: s.get("batch_size", args.batch_size, defaults.batch_size)?,
        epochs: s.get("epochs", args.epochs, defaults.epochs)?,
        step_size: s.get("lr", args.lr, defaults.step_size)?,
        seed: s.get("seed", args.seed, defaults.seed)?,
        split_fraction: s.get("split", args.split, defaults.split_fraction)?,
        pairing: Pairing::parse(&s.get("pairing", args.pairing, defaults.pairing.name().to_string())?)?,
        hidden_dim: s.get("hidden_dim", args.hidden_dim, defaults.hidden_dim)?,
        architecture: Architecture::parse(&s.get(
            "arch",
            args.arch,
            defaults.architecture.name().to_string(),
        )?)?,
    };
    s.finish()?;
    config.validate()?;
    let run_id = args.common.run_id.unwrap_or_else(|| default_run_id("train", config.seed));
    let run = RunDir::create(root, &run_id)?;

    let bundle = training::train_joint(&dataset, &config)?;
    bundle.save(&run.path("checkpoint.safetensors"))?;
    training::write_training_log(&bundle.log, &run.path("train_log.csv"))?;
    let last = bundle.log.last().expect("at least one epoch");
    run.write(
        "metrics.csv",
        &metrics_csv(&[
            ("samples", dataset.len().to_string()),
            ("classes", dataset.num_classes().to_string()),
            ("epochs", last.epoch.to_string()),
            ("final_L_pri", last.primary_loss.to_string()),
            ("final_L_aux", last.aux_loss.to_string()),
            ("val_accuracy", last.val_accuracy.to_string()),
            ("val_rank_correlation", last.val_rank_correlation.to_string()),
        ]),
    )?;
    run.write("config.txt", &s.echo_text(&run_id))?;
    let dir = run.commit()?;
    println!(
        "accuracy={:.6} rank_correlation={:.6}",
        last.val_accuracy, last.val_rank_correlation
    );
    Ok(dir)
}

struct Loaded {
    bundle: CheckpointBundle,
    image: Image,
    config: InversionConfig,
}

fn load_inversion_inputs(
    s: &mut Settings,
    a: InversionArgs,
    mode: InversionMode,
) -> Result<Loaded> {
    let defaults = InversionConfig::default();
    let checkpoint: String = s.require("checkpoint", a.checkpoint.map(|p| p.display().to_string()))?;
    let image_path: String = s.require("image", a.image.map(|p| p.display().to_string()))?;
    let config = InversionConfig {
        mode,
        block_index: s.get("block", a.block, defaults.block_index)?,
        iterations: s.get("iters", a.iters, defaults.iterations)?,
        step_size: s.get("lr", a.lr, defaults.step_size)?,
        lambda_estimator: s.get("lambda1", a.lambda1, defaults.lambda_estimator)?,
        target_loss: s.get("target_loss", a.target_loss, defaults.target_loss)?,
        seed: s.get("seed", a.seed, defaults.seed)?,
        generator_widths: parse_widths(&s.get(
            "widths",
            a.widths,
            defaults
                .generator_widths
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        )?)?,
        noise_jitter: s.get("noise_jitter", a.noise_jitter, defaults.noise_jitter)?,
        ..defaults
    };
    let bundle = CheckpointBundle::load(Path::new(&checkpoint), DType::F32)?;
    let (h, w, c) = bundle.predictor.input_shape();
    let raw = Image::load_png(Path::new(&image_path))?;
    if raw.channels() != c {
        return Err(Error::input(format!(
            "image has {} channels, checkpoint expects {c}",
            raw.channels()
        )));
    }
    let image = if (raw.height(), raw.width()) == (h, w) {
        raw
    } else {
        raw.resize_area(h, w)?
    };
    Ok(Loaded { bundle, image, config })
}

fn write_trajectory(run: &RunDir, trajectory: &[f64]) -> Result<()> {
    let mut out = String::from("iteration,objective\n");
    for (i, v) in trajectory.iter().enumerate() {
        let _ = writeln!(out, "{i},{v}");
    }
    run.write("trajectory.csv", &out)
}

fn cmd_invert(args: InvertArgs, root: &Path) -> Result<PathBuf> {
    let mut s = Settings::new("invert", args.common.config.as_deref())?;
    let mode = InversionMode::parse(&s.get("mode", args.mode, "dip_only".to_string())?)?;
    if mode == InversionMode::Counterfactual {
        return Err(Error::input("use the `counterfactual` command for counterfactual mode"));
    }
    let Loaded { bundle, image, mut config } = load_inversion_inputs(&mut s, args.inv, mode)?;
    config.lambda_explicit = s.opt("lambda_explicit", args.lambda_explicit)?;
    config.alpha = s.get("alpha", args.alpha, config.alpha)?;
    let corruption = s
        .opt("corrupt", args.corrupt)?
        .map(|spec| CorruptionSpec::parse(&spec, config.seed))
        .transpose()?;
    s.finish()?;
    config.validate()?;
    let run_id = args.common.run_id.unwrap_or_else(|| default_run_id("invert", config.seed));
    let run = RunDir::create(root, &run_id)?;

    let (model, head) = (&bundle.predictor, &bundle.head);
    let input = match &corruption {
        Some(spec) => data::corrupt(&image, spec)?,
        None => image.clone(),
    };
    let target = model::encode(&input, config.block_index, model)?;
    let (logits, taps) = model::predictor_forward(std::slice::from_ref(&input), model)?;
    let input_estimate = estimator::estimate_loss(&taps[0], head)?;
    let input_class = model::argmax(&logits[0]);
    let result = inversion::recover_preimage(&target, Some(&image), model, head, &config)?;

    input.save_png(&run.path("input.png"))?;
    result.preimage.save_png(&run.path("preimage.png"))?;
    data::difference_map(&result.preimage, &image)?
        .to_display_image()
        .save_png(&run.path("difference.png"))?;
    write_trajectory(&run, &result.objective_trajectory)?;
    let input_psnr = corruption.as_ref().map(|_| data::psnr(&input, &image)).transpose()?;
    run.write(
        "metrics.csv",
        &metrics_csv(&[
            ("mode", config.mode.name().to_string()),
            ("block", config.block_index.to_string()),
            ("iterations", config.iterations.to_string()),
            ("seed", config.seed.to_string()),
            ("corruption", corruption.as_ref().map(CorruptionSpec::describe).unwrap_or_default()),
            ("input_psnr", fmt_opt(input_psnr)),
            ("input_estimated_loss", input_estimate.to_string()),
            ("input_predicted_class", input_class.to_string()),
            ("psnr", fmt_opt(result.psnr_vs_reference)),
            ("final_estimated_loss", result.final_estimated_loss.to_string()),
            ("final_encoding_distance", result.final_encoding_distance.to_string()),
            ("predicted_class", result.predicted_class.to_string()),
            ("best_iteration", result.best_iteration.to_string()),
            ("best_objective", result.best_objective().to_string()),
        ]),
    )?;
    run.write("config.txt", &s.echo_text(&run_id))?;
    let dir = run.commit()?;
    println!(
        "mode={} psnr={} estimated_loss={:.6} encoding_distance={:.6}",
        config.mode.name(),
        result.psnr_vs_reference.map(|p| format!("{p:.3}")).unwrap_or_default(),
        result.final_estimated_loss,
        result.final_encoding_distance
    );
    Ok(dir)
}

fn resolve_class(target: &str, names: &[String]) -> Result<usize> {
    if let Some(i) = names.iter().position(|n| n == target) {
        return Ok(i);
    }
    match target.parse::<usize>() {
        Ok(i) if i < names.len() => Ok(i),
        _ => Err(Error::input(format!(
            "unknown target class `{target}` (classes: {})",
            names.join(", ")
        ))),
    }
}

fn cmd_counterfactual(args: CounterfactualArgs, root: &Path) -> Result<PathBuf> {
    let mut s = Settings::new("counterfactual", args.common.config.as_deref())?;
    let Loaded { bundle, image, mut config } =
        load_inversion_inputs(&mut s, args.inv, InversionMode::Counterfactual)?;
    let target: String = s.require("target", args.target)?;
    config.lambda_target = s.get("lambda2", args.lambda2, config.lambda_target)?;
    let mask_path: Option<String> = s.opt("mask", args.mask.map(|p| p.display().to_string()))?;
    s.finish()?;
    let target_class = resolve_class(&target, &bundle.class_names)?;
    config.target_class = Some(target_class);
    config.validate()?;
    let (h, w, _) = bundle.predictor.input_shape();
    let mask = mask_path
        .map(|p| -> Result<Mask> {
            let m = Mask::load_png(Path::new(&p))?;
            if (m.height(), m.width()) == (h, w) {
                Ok(m)
            } else {
                m.resize(h, w)
            }
        })
        .transpose()?;
    let run_id = args
        .common
        .run_id
        .unwrap_or_else(|| default_run_id("counterfactual", config.seed));
    let run = RunDir::create(root, &run_id)?;

    let cf = inversion::generate_counterfactual(&image, target_class, &bundle.predictor, &bundle.head, &config)?;
    let ratio = mask
        .as_ref()
        .map(|m| data::localization_ratio(&cf.difference, m))
        .transpose()?;
    image.save_png(&run.path("source.png"))?;
    cf.result.preimage.save_png(&run.path("counterfactual.png"))?;
    cf.difference.to_display_image().save_png(&run.path("difference.png"))?;
    write_trajectory(&run, &cf.result.objective_trajectory)?;
    run.write(
        "metrics.csv",
        &metrics_csv(&[
            ("mode", config.mode.name().to_string()),
            ("block", config.block_index.to_string()),
            ("iterations", config.iterations.to_string()),
            ("seed", config.seed.to_string()),
            ("lambda1", config.lambda_estimator.to_string()),
            ("lambda2", config.lambda_target.to_string()),
            ("source_class", cf.source_class.to_string()),
            ("target_class", cf.target_class.to_string()),
            ("predicted_class", cf.result.predicted_class.to_string()),
            ("flipped", cf.flipped().to_string()),
            ("localization_ratio", fmt_opt(ratio)),
            ("difference_mass", cf.difference.total_mass().to_string()),
            ("psnr", fmt_opt(cf.result.psnr_vs_reference)),
            ("final_estimated_loss", cf.result.final_estimated_loss.to_string()),
            ("final_encoding_distance", cf.result.final_encoding_distance.to_string()),
            ("best_iteration", cf.result.best_iteration.to_string()),
            ("best_objective", cf.result.best_objective().to_string()),
        ]),
    )?;
    run.write("config.txt", &s.echo_text(&run_id))?;
    let dir = run.commit()?;
    println!(
        "source={} target={} predicted={} flipped={} localization_ratio={}",
        bundle.class_names[cf.source_class],
        bundle.class_names[cf.target_class],
        bundle.class_names[cf.result.predicted_class],
        cf.flipped(),
        ratio.map(|r| format!("{r:.4}")).unwrap_or_default()
    );
    Ok(dir)
}

/// One finished run as seen by `evaluate`.
#[derive(Debug, Clone)]
struct RunRecord {
    name: String,
    config: BTreeMap<String, String>,
    metrics: BTreeMap<String, String>,
}

impl RunRecord {
    fn load(dir: &Path) -> Result<Self> {
        let metrics_path = dir.join("metrics.csv");
        let mut reader = csv::Reader::from_path(&metrics_path)
            .map_err(|_| Error::input(format!("{} is not a run directory", dir.display())))?;
        let headers = reader.headers()?.clone();
        let row = reader
            .records()
            .next()
            .ok_or_else(|| Error::input(format!("{} has no metrics row", metrics_path.display())))??;
        let metrics = headers.iter().zip(row.iter()).map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Self {
            name,
            config: read_key_values(&dir.join("config.txt"))?,
            metrics,
        })
    }

    fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).and_then(|v| v.parse().ok())
    }

    fn kind(&self) -> String {
        let command = self.config.get("command").cloned().unwrap_or_default();
        match self.metrics.get("mode") {
            Some(m) if command == "invert" => m.clone(),
            _ => command,
        }
    }

    /// Everything that identifies an inversion problem except the mode.
    fn pairing_key(&self) -> Option<String> {
        if self.config.get("command").map(String::as_str) != Some("invert") {
            return None;
        }
        let keys = ["checkpoint", "image", "corrupt", "block", "iters", "seed", "widths"];
        Some(
            keys.iter()
                .map(|k| self.config.get(*k).map(String::as_str).unwrap_or(""))
                .collect::<Vec<_>>()
                .join("|"),
        )
    }
}

/// Paired dip_only / dip_regularized runs on identical inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateGap {
    pub plain_run: String,
    pub regularized_run: String,
    pub plain_estimate: f64,
    pub regularized_estimate: f64,
}

fn estimate_gaps(runs: &[RunRecord]) -> Vec<EstimateGap> {
    let mut gaps = Vec::new();
    for plain in runs.iter().filter(|r| r.kind() == "dip_only") {
        let key = plain.pairing_key();
        let partner = runs
            .iter()
            .find(|r| r.kind() == "dip_regularized" && r.pairing_key() == key);
        if let (Some(reg), Some(a), Some(b)) = (
            partner,
            plain.metric("final_estimated_loss"),
            partner.and_then(|r| r.metric("final_estimated_loss")),
        ) {
            gaps.push(EstimateGap {
                plain_run: plain.name.clone(),
                regularized_run: reg.name.clone(),
                plain_estimate: a,
                regularized_estimate: b,
            });
        }
    }
    gaps
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Horizontal bar chart of one value per run.
fn bar_chart_svg(title: &str, bars: &[(String, f64)]) -> String {
    let (bar_h, gap, left, width) = (18.0, 6.0, 260.0, 360.0);
    let height = 50.0 + bars.len() as f64 * (bar_h + gap);
    let max = bars.iter().map(|b| b.1.abs()).fold(0.0f64, f64::max).max(1e-12);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n",
        left + width + 90.0
    );
    let _ = writeln!(svg, "<text x=\"10\" y=\"22\" font-size=\"15\">{}</text>", escape_xml(title));
    for (i, (label, value)) in bars.iter().enumerate() {
        let y = 40.0 + i as f64 * (bar_h + gap);
        let w = width * value.abs() / max;
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            left - 8.0,
            y + 13.0,
            escape_xml(label)
        );
        let _ = writeln!(
            svg,
            "<rect x=\"{left}\" y=\"{y}\" width=\"{w:.2}\" height=\"{bar_h}\" fill=\"#4a7ab5\"/>"
        );
        let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{}\">{value:.4}</text>", left + w + 6.0, y + 13.0);
    }
    svg.push_str("</svg>\n");
    svg
}

fn cmd_evaluate(args: EvaluateArgs, root: &Path) -> Result<PathBuf> {
    let mut s = Settings::new("evaluate", args.common.config.as_deref())?;
    let from_file: Option<String> = s.from_file("runs")?;
    s.finish()?;
    let dirs: Vec<PathBuf> = if !args.runs.is_empty() {
        args.runs
    } else {
        from_file
            .map(|v| v.split(',').map(|p| PathBuf::from(p.trim())).collect())
            .unwrap_or_default()
    };
    if dirs.is_empty() {
        return Err(Error::input("evaluate needs at least one run directory"));
    }
    s.echo.push((
        "runs".into(),
        dirs.iter().map(|d| d.display().to_string()).collect::<Vec<_>>().join(","),
    ));
    let runs = dirs.iter().map(|d| RunRecord::load(d)).collect::<Result<Vec<_>>>()?;
    let run_id = args.common.run_id.unwrap_or_else(|| default_run_id("evaluate", 0));
    let run = RunDir::create(root, &run_id)?;

    let columns: BTreeSet<&str> = runs.iter().flat_map(|r| r.metrics.keys().map(String::as_str)).collect();
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run", "kind"];
    header.extend(columns.iter().copied());
    writer.write_record(&header)?;
    for r in &runs {
        let mut row = vec![r.name.clone(), r.kind()];
        row.extend(columns.iter().map(|c| r.metrics.get(*c).cloned().unwrap_or_default()));
        writer.write_record(&row)?;
    }
    let report = String::from_utf8(writer.into_inner().map_err(|e| Error::input(e.to_string()))?)
        .expect("csv output is utf-8");
    run.write("report.csv", &report)?;

    let gaps = estimate_gaps(&runs);
    let mut gap_csv = String::from("plain_run,regularized_run,plain_estimated_loss,regularized_estimated_loss,gap\n");
    for g in &gaps {
        let _ = writeln!(
            gap_csv,
            "{},{},{},{},{}",
            g.plain_run,
            g.regularized_run,
            g.plain_estimate,
            g.regularized_estimate,
            g.plain_estimate - g.regularized_estimate
        );
    }
    run.write("estimate_gap.csv", &gap_csv)?;

    let (title, key) = if runs.iter().any(|r| r.metric("localization_ratio").is_some()) {
        ("Localization ratio per run", "localization_ratio")
    } else if runs.iter().any(|r| r.metric("psnr").is_some()) {
        ("PSNR (dB) per run", "psnr")
    } else {
        ("Held-out accuracy per run", "val_accuracy")
    };
    let bars: Vec<(String, f64)> = runs
        .iter()
        .filter_map(|r| r.metric(key).map(|v| (format!("{} [{}]", r.name, r.kind()), v)))
        .collect();
    run.write("summary.svg", &bar_chart_svg(title, &bars))?;
    run.write("config.txt", &s.echo_text(&run_id))?;
    let dir = run.commit()?;
    let lower = gaps.iter().filter(|g| g.regularized_estimate < g.plain_estimate).count();
    println!(
        "runs={} estimate_pairs={} regularized_lower={}",
        runs.len(),
        gaps.len(),
        lower
    );
    Ok(dir)
}

fn cmd_synth(args: SynthArgs) -> Result<PathBuf> {
    if args.out.exists() {
        return Err(Error::input(format!("{} already exists", args.out.display())));
    }
    let ds: LabeledDataset = data::make_synthetic_lesions(args.n, args.seed)?;
    data::export_image_folder(&ds, &args.out)?;
    println!("samples={} classes={}", ds.len(), ds.class_names.join(","));
    Ok(args.out)
}

/// Runs a parsed command, returning the directory it wrote.
pub fn execute(cli: Cli) -> Result<PathBuf> {
    let root = output_root(cli.output_root.as_deref());
    match cli.command {
        Command::Train(a) => cmd_train(a, &root),
        Command::Invert(a) => cmd_invert(a, &root),
        Command::Counterfactual(a) => cmd_counterfactual(a, &root),
        Command::Evaluate(a) => cmd_evaluate(a, &root),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(dir) => {
            eprintln!("wrote {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_parsing() {
        let m = parse_key_values("# c\n a = 1 \n\nb=x = y\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "x = y");
        assert!(parse_key_values("novalue\n").is_err());
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "command = train\nepochs = 3\nlr = 0.5\n").unwrap();
        let mut s = Settings::new("train", Some(&p)).unwrap();
        assert_eq!(s.get("epochs", Some(9usize), 20).unwrap(), 9);
        assert_eq!(s.get("lr", None, 1e-3).unwrap(), 0.5);
        assert_eq!(s.get("seed", None, 7u64).unwrap(), 7);
        s.finish().unwrap();
        let echo = s.echo_text("r");
        assert!(echo.contains("epochs = 9\n") && echo.contains("lr = 0.5\n") && echo.contains("seed = 7\n"));
        assert!(Settings::new("invert", Some(&p)).is_err());
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "epochz = 3\n").unwrap();
        let s = Settings::new("train", Some(&p)).unwrap();
        assert!(s.finish().is_err());
    }

    #[test]
    fn run_dir_commit_and_collision() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path(), "a").unwrap();
        run.write("x.txt", "1").unwrap();
        let done = run.commit().unwrap();
        assert!(done.join("x.txt").exists());
        assert!(RunDir::create(dir.path(), "a").is_err());
        {
            let run = RunDir::create(dir.path(), "b").unwrap();
            run.write("x.txt", "1").unwrap();
        }
        assert!(!dir.path().join("b").exists());
        assert!(!dir.path().join(".b.partial").exists());
        assert!(RunDir::create(dir.path(), "../x").is_err());
    }

    #[test]
    fn class_resolution() {
        let names = vec!["a".to_string(), "b".to_string()];
        assert_eq!(resolve_class("b", &names).unwrap(), 1);
        assert_eq!(resolve_class("0", &names).unwrap(), 0);
        assert!(resolve_class("2", &names).is_err());
        assert!(resolve_class("c", &names).is_err());
    }

    #[test]
    fn chart_has_one_bar_per_entry() {
        let svg = bar_chart_svg("t", &[("x".into(), 1.0), ("y<z".into(), 0.5)]);
        assert_eq!(svg.matches("<rect").count(), 2);
        assert!(svg.contains("y&lt;z"));
    }
}
