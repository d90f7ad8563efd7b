//! `camcls` — train, inspect and evaluate CAM-guided binary classifiers.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad configuration or
//! arguments, 3 missing input file.

mod config;

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use camcls::cam::{compute_cam_with, ClassSign, Upsampling};
use camcls::checkpoint;
use camcls::data::{load_dataset, load_image, Dataset};
use camcls::imaging::write_pgm;
use camcls::snapmix::snapmix;
use camcls::training::{evaluate, sweep_csv, sweep_k, sweep_theta, train, EpochLog};
use camcls::tta::{tta_predict_with_masks, TtaConfig};
use camcls::{Error, Model, Tensor};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::{existing_dir, RunConfig};

const THREADS_ENV: &str = "CAMCLS_THREADS";

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn missing(path: &Path) -> Self {
        Self { code: 3, message: format!("{}: no such file or directory", path.display()) }
    }

    pub fn io(path: &Path, e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::NotFound {
            Self::missing(path)
        } else {
            Self { code: 1, message: format!("{}: {e}", path.display()) }
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Checkpoint(_) => 2,
            Error::Io(io) if io.kind() == io::ErrorKind::NotFound => 3,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "camcls", version, about = "CAM-guided binary image classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for model.ckpt and metrics.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print test metrics as JSON for a dataset directory (pos/, neg/).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Apply CAM-masked test-time voting.
        #[arg(long)]
        tta: bool,
        #[command(flatten)]
        voting: VotingArgs,
    },
    /// Export the class activation map of one image as PGM.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output directory; the file is named `<stem>_cam_<pos|neg>.pgm`.
        #[arg(long)]
        out: PathBuf,
        /// Class whose map is exported; defaults to the predicted class.
        #[arg(long, value_enum)]
        sign: Option<SignArg>,
        #[arg(long, value_enum, default_value_t = UpsamplingArg::Nearest)]
        upsampling: UpsamplingArg,
    },
    /// Mix two images with SnapMix and report the CAM ratios and weights.
    PreviewSnapmix {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        /// Label of image A; defaults to the predicted class.
        #[arg(long)]
        label_a: Option<u8>,
        /// Label of image B; defaults to the predicted class.
        #[arg(long)]
        label_b: Option<u8>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-image masked voting for an image file or a dataset directory.
    #[command(alias = "tta-infer")]
    Tta {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        voting: VotingArgs,
        /// Write the k masked images of every input here as PGM.
        #[arg(long)]
        dump_masks: Option<PathBuf>,
    },
    /// Voting metrics over a range of k or theta, as CSV.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values of the swept parameter.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        voting: VotingArgs,
    },
}

#[derive(clap::Args, Clone, Copy)]
struct VotingArgs {
    /// Number of masked images.
    #[arg(long)]
    k: Option<usize>,
    /// Certainty threshold in (0, 0.5].
    #[arg(long)]
    theta: Option<f64>,
    /// Side of the square mask patches in pixels.
    #[arg(long)]
    mask_patch: Option<usize>,
}

impl VotingArgs {
    fn config(&self, model: &Model) -> CliResult<TtaConfig> {
        let d = TtaConfig::default();
        let cfg = TtaConfig {
            k: self.k.unwrap_or(d.k),
            theta: self.theta.unwrap_or(d.theta),
            mask_patch_px: self.mask_patch.unwrap_or(d.mask_patch_px),
            mask_fill: d.mask_fill,
        };
        cfg.validate(model.config().input_size)?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SignArg {
    Pos,
    Neg,
}

#[derive(Clone, Copy, ValueEnum)]
enum UpsamplingArg {
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    K,
    Theta,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::config(format!("{THREADS_ENV}={raw:?} is not a non-negative integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| CliError { code: 1, message: format!("thread pool: {e}") })
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Eval { checkpoint, data, tta, voting } => cmd_eval(&checkpoint, &data, tta, voting),
        Command::Cam { checkpoint, image, out, sign, upsampling } => cmd_cam(&checkpoint, &image, &out, sign, upsampling),
        Command::PreviewSnapmix { checkpoint, image_a, image_b, label_a, label_b, seed, alpha, out } => {
            cmd_preview_snapmix(&checkpoint, [&image_a, &image_b], [label_a, label_b], seed, alpha, &out)
        }
        Command::Tta { checkpoint, data, voting, dump_masks } => cmd_tta(&checkpoint, &data, voting, dump_masks.as_deref()),
        Command::Sweep { checkpoint, data, param, values, voting } => cmd_sweep(&checkpoint, &data, param, &values, voting),
    }
}

fn load_model(path: &Path) -> CliResult<Model> {
    if !path.is_file() {
        return Err(CliError::missing(path));
    }
    Ok(checkpoint::load(path)?)
}

fn load_input_image(path: &Path, model: &Model) -> CliResult<Tensor> {
    if !path.is_file() {
        return Err(CliError::missing(path));
    }
    Ok(load_image(path, model.config().input_size)?)
}

fn load_data(path: &Path, model: &Model) -> CliResult<Dataset> {
    let ds = load_dataset(&existing_dir(path)?, model.config().input_size)?;
    if ds.is_empty() {
        return Err(CliError::config(format!("{}: no decodable images under pos/ or neg/", path.display())));
    }
    Ok(ds)
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_stdout(text: &str) -> CliResult {
    io::stdout()
        .lock()
        .write_all(text.as_bytes())
        .map_err(|e| CliError { code: 1, message: format!("stdout: {e}") })
}

fn cmd_train(config_path: &Path, out: &Path) -> CliResult {
    let cfg = RunConfig::load(config_path)?;
    let (train_set, test_set) = cfg.datasets()?;
    log::info!(
        "training on {} images ({} pos), testing on {} ({} pos)",
        train_set.len(),
        train_set.count_label(1),
        test_set.len(),
        test_set.count_label(1)
    );
    create_dir(out)?;
    if cfg.data.synthetic.is_some() {
        train_set.export(&out.join("data").join("train"))?;
        test_set.export(&out.join("data").join("test"))?;
    }
    let mut model = Model::build(cfg.model.clone())?;
    let mut log_text = String::new();
    train(&mut model, &train_set, Some(&test_set), &cfg.train, |entry: &EpochLog| {
        let line = entry.to_json_line();
        log::info!("{line}");
        log_text.push_str(&line);
        log_text.push('\n');
    })?;
    let metrics_path = out.join("metrics.jsonl");
    fs::write(&metrics_path, log_text).map_err(|e| CliError::io(&metrics_path, e))?;
    checkpoint::save(&model, &out.join("model.ckpt"))?;
    log::info!("wrote {} and {}", out.join("model.ckpt").display(), metrics_path.display());
    Ok(())
}

fn cmd_eval(checkpoint_path: &Path, data: &Path, tta: bool, voting: VotingArgs) -> CliResult {
    let model = load_model(checkpoint_path)?;
    let ds = load_data(data, &model)?;
    let tta_cfg = if tta { Some(voting.config(&model)?) } else { None };
    let metrics = evaluate(&model, &ds, tta_cfg.as_ref())?;
    let json = serde_json::to_string(&metrics).expect("metrics serialize");
    write_stdout(&format!("{json}\n"))
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn cmd_cam(checkpoint_path: &Path, image: &Path, out: &Path, sign: Option<SignArg>, up: UpsamplingArg) -> CliResult {
    let model = load_model(checkpoint_path)?;
    let img = load_input_image(image, &model)?;
    let sign = match sign {
        Some(SignArg::Pos) => ClassSign::Positive,
        Some(SignArg::Neg) => ClassSign::Negative,
        None => ClassSign::from_prob(model.forward(&img)?.prob),
    };
    let mode = match up {
        UpsamplingArg::Nearest => Upsampling::Nearest,
        UpsamplingArg::Bilinear => Upsampling::Bilinear,
    };
    let heat = compute_cam_with(&model, &img, sign, mode)?;
    create_dir(out)?;
    let path = out.join(format!("{}_cam_{}.pgm", file_stem(image), sign.tag()));
    write_pgm(&path, &heat.full_res)?;
    write_stdout(&format!("{}\n", path.display()))
}

/// `[a | b | mixed]` as one `1×H×3W` plane.
fn side_by_side(images: &[&Tensor]) -> CliResult<Tensor> {
    let (h, w) = (images[0].shape()[1], images[0].shape()[2]);
    let mut data = Vec::with_capacity(h * w * images.len());
    for y in 0..h {
        for img in images {
            data.extend_from_slice(&img.data()[y * w..(y + 1) * w]);
        }
    }
    Ok(Tensor::new(vec![1, h, w * images.len()], data)?)
}

fn cmd_preview_snapmix(
    checkpoint_path: &Path,
    images: [&PathBuf; 2],
    labels: [Option<u8>; 2],
    seed: u64,
    alpha: f64,
    out: &Path,
) -> CliResult {
    let model = load_model(checkpoint_path)?;
    let mut loaded = Vec::new();
    for (path, label) in images.iter().zip(labels) {
        let img = load_input_image(path, &model)?;
        let label = match label {
            Some(l @ (0 | 1)) => l,
            Some(l) => return Err(CliError::config(format!("label {l} is not 0 or 1"))),
            None => u8::from(model.forward(&img)?.prob > 0.5),
        };
        let heat = compute_cam_with(&model, &img, ClassSign::from_label(label), Upsampling::Nearest)?;
        loaded.push((img, label, heat));
    }
    let [(img_a, la, heat_a), (img_b, lb, heat_b)] = <[_; 2]>::try_from(loaded).expect("two images");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vs = snapmix(&img_a, la, &img_b, lb, &heat_a, &heat_b, &mut rng, alpha)?;
    create_dir(out)?;
    write_pgm(&out.join("composite.pgm"), &side_by_side(&[&img_a, &img_b, &vs.image])?)?;
    write_pgm(&out.join("heat_a.pgm"), &heat_a.full_res)?;
    write_pgm(&out.join("heat_b.pgm"), &heat_b.full_res)?;
    write_stdout(&format!(
        "rho_a={} rho_b={} w_a={} w_b={}\n",
        vs.rho_a, vs.rho_b, vs.weight_a, vs.weight_b
    ))
}

fn cmd_tta(checkpoint_path: &Path, data: &Path, voting: VotingArgs, dump: Option<&Path>) -> CliResult {
    let model = load_model(checkpoint_path)?;
    let cfg = voting.config(&model)?;
    let inputs: Vec<(PathBuf, Tensor)> = if data.is_dir() {
        load_data(data, &model)?
            .samples
            .into_iter()
            .map(|s| (s.path.expect("loaded from disk"), s.image))
            .collect()
    } else {
        vec![(data.to_path_buf(), load_input_image(data, &model)?)]
    };
    let mut out = String::new();
    for (path, image) in &inputs {
        let (record, masks) = tta_predict_with_masks(&model, image, &cfg)?;
        out.push_str(&format!(
            "{} orig={} flips={} final={} nonsupport={}/{}\n",
            path.display(),
            record.original_prob,
            u8::from(record.flipped),
            record.final_label,
            record.non_supporting(),
            cfg.k
        ));
        if let Some(dir) = dump {
            create_dir(dir)?;
            let stem = file_stem(path);
            for (m, mask) in masks.iter().enumerate() {
                write_pgm(&dir.join(format!("{stem}_mask{:02}.pgm", m + 1)), mask)?;
            }
        }
    }
    write_stdout(&out)
}

fn cmd_sweep(checkpoint_path: &Path, data: &Path, param: SweepParam, values: &[String], voting: VotingArgs) -> CliResult {
    let model = load_model(checkpoint_path)?;
    let ds = load_data(data, &model)?;
    let bad = |v: &str| CliError::config(format!("sweep value {v:?} is not valid for this parameter"));
    let rows = match param {
        SweepParam::K => {
            let ks = values.iter().map(|v| v.trim().parse::<usize>().map_err(|_| bad(v))).collect::<CliResult<Vec<_>>>()?;
            let base = VotingArgs { k: Some(ks.iter().copied().max().unwrap_or(1)), ..voting }.config(&model)?;
            sweep_k(&model, &ds, &ks, base.theta, &base)?
        }
        SweepParam::Theta => {
            let thetas = values.iter().map(|v| v.trim().parse::<f64>().map_err(|_| bad(v))).collect::<CliResult<Vec<_>>>()?;
            let base = voting.config(&model)?;
            sweep_theta(&model, &ds, base.k, &thetas, &base)?
        }
    };
    write_stdout(&sweep_csv(&rows))
}
