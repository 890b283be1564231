//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::calib::{LossNorm, TemperatureMap};
use crate::error::{Error, Result};
use crate::io::checkpoint::{load_checkpoint, save_checkpoint};
use crate::io::container::TensorFile;
use crate::io::pgm::export_pgm;
use crate::io::synth::{load_split, synth_generate, Profile, Split, SynthConfig};
use crate::metrics::{self, EvalConfig, EvalMode, PatchConfig};
use crate::net::{self, CalibratedOutput, MaskTsModel, TrainConfig};
use crate::record::CalibRecord;
use crate::ts;

#[derive(Debug, Parser)]
#[command(name = "maskts", version, about = "Pixel-wise temperature-scaling calibration for binary segmentation")]
pub struct Cli {
    /// Seed for every random choice (data, init, shuffling, patches).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Profile::Mini)]
    pub profile: Profile,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted temperatures.
    Synth(SynthArgs),
    /// Fit the global temperature on a split and print it as JSON.
    FitTs(FitArgs),
    /// Train the calibration network and write a checkpoint.
    Train(TrainArgs),
    /// Write calibrated maps and PGM exports for a split.
    Calibrate(CalibrateArgs),
    /// Print calibration metrics as JSON.
    Eval(EvalArgs),
    /// Print a reliability table as CSV.
    Reliability(ReliabilityArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    pub t_fg: f32,
    #[arg(long, default_value_t = 1.5)]
    pub t_bg: f32,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Write the training report JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Use a fixed global temperature instead of fitting one on the
    /// training split.
    #[arg(long)]
    pub t0: Option<f32>,
    #[arg(long)]
    pub no_mask_loss: bool,
    #[arg(long)]
    pub no_mask_ts: bool,
    #[arg(long)]
    pub no_prob_branch: bool,
    #[arg(long)]
    pub no_uncert_branch: bool,
    #[arg(long, value_enum, default_value_t = LossNorm::Mask)]
    pub loss_norm: LossNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Raw sigmoid output.
    None,
    /// Global temperature fitted on the training split.
    Ts,
    /// Trained calibration network.
    Net,
}

#[derive(Debug, Args)]
pub struct Source {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = Method::Net)]
    pub method: Method,
    /// Checkpoint for `--method net`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Use the network temperature everywhere, overriding the checkpoint.
    #[arg(long)]
    pub no_mask_ts: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, value_enum, default_value_t = EvalMode::Full)]
    pub mode: EvalMode,
    #[arg(long, default_value_t = metrics::DEFAULT_BINS)]
    pub bins: usize,
    /// Average metrics over patches instead of pooling patch pixels.
    #[arg(long)]
    pub per_patch: bool,
    #[arg(long, default_value_t = 10)]
    pub patches: usize,
    /// Patch side; defaults to 72 for the full profile and 16 for mini.
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Patch-center margin; defaults to 70 for the full profile and 12 for mini.
    #[arg(long)]
    pub patch_margin: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReliabilityArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, default_value_t = metrics::DEFAULT_BINS)]
    pub bins: usize,
    /// Restrict to pixels inside the union of label and prediction.
    #[arg(long)]
    pub lesion: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Calibrated outputs for `records` under `method`.
pub fn calibrate_records(
    records: &[CalibRecord],
    method: Method,
    t0: f32,
    model: Option<&MaskTsModel>,
    use_mask_ts: bool,
) -> Result<Vec<CalibratedOutput>> {
    records
        .iter()
        .map(|r| match method {
            Method::None => CalibratedOutput::from_temperature(r, TemperatureMap::uniform(1.0)?),
            Method::Ts => CalibratedOutput::from_temperature(r, TemperatureMap::uniform(t0)?),
            Method::Net => {
                let m = model.ok_or_else(|| Error::contract("--method net needs a model"))?;
                net::calibrate(m, r, t0, use_mask_ts)
            }
        })
        .collect()
}

fn emit(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn json_line<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn fitted_t0(data: &Path) -> Result<f32> {
    let train = load_split(data, Split::Train)?;
    Ok(ts::fit_global_temperature(&train)?.t0)
}

fn outputs_for(src: &Source) -> Result<(Vec<CalibRecord>, Vec<CalibratedOutput>)> {
    let records = load_split(&src.data, src.split.into())?;
    let outputs = match src.method {
        Method::None => calibrate_records(&records, Method::None, 1.0, None, false)?,
        Method::Ts => calibrate_records(&records, Method::Ts, fitted_t0(&src.data)?, None, false)?,
        Method::Net => {
            let path = src
                .model
                .as_ref()
                .ok_or_else(|| Error::contract("--method net needs --model"))?;
            let (model, cfg) = load_checkpoint(path)?;
            let use_mask_ts = cfg.use_mask_ts && !src.no_mask_ts;
            calibrate_records(&records, Method::Net, model.t0(), Some(&model), use_mask_ts)?
        }
    };
    Ok((records, outputs))
}

fn run_command(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let mut cfg = SynthConfig::profile(cli.profile)
                .with_temperatures(a.t_fg, a.t_bg)
                .with_seed(cli.seed);
            cfg.n_train = a.n_train.unwrap_or(cfg.n_train);
            cfg.n_val = a.n_val.unwrap_or(cfg.n_val);
            cfg.n_test = a.n_test.unwrap_or(cfg.n_test);
            let manifest = synth_generate(&cfg, &a.out)?;
            info!("wrote {} records to {}", manifest.records.len(), a.out.display());
        }
        Command::FitTs(a) => {
            let records = load_split(&a.data, a.split.into())?;
            let fit = ts::fit_global_temperature(&records)?;
            emit(a.out.as_deref(), &json_line(&fit)?, stdout)?;
        }
        Command::Train(a) => {
            let cfg = TrainConfig {
                epochs: a.epochs,
                lr: a.lr,
                seed: cli.seed,
                use_mask_loss: !a.no_mask_loss,
                use_mask_ts: !a.no_mask_ts,
                use_prob_branch: !a.no_prob_branch,
                use_uncert_branch: !a.no_uncert_branch,
                loss_norm: a.loss_norm,
                ..TrainConfig::default()
            };
            cfg.validate()?;
            let records = load_split(&a.data, Split::Train)?;
            let t0 = match a.t0 {
                Some(t) => {
                    TemperatureMap::uniform(t)?;
                    t
                }
                None => ts::fit_global_temperature(&records)?.t0,
            };
            let mut model = MaskTsModel::init(&cfg.branches(), t0, cfg.seed)?;
            let report = net::train(&mut model, &records, &cfg)?;
            info!(
                "t0 = {t0}, loss {:.6} -> {:.6} over {} steps",
                report.initial_loss, report.final_loss, report.steps
            );
            save_checkpoint(&a.out, &model, &cfg)?;
            if let Some(p) = &a.report {
                emit(Some(p), &json_line(&report)?, stdout)?;
            }
        }
        Command::Calibrate(a) => {
            let (records, outputs) = outputs_for(&a.source)?;
            std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            for (r, o) in records.iter().zip(&outputs) {
                let (h, w) = (r.height(), r.width());
                let file = TensorFile::new(
                    [
                        ("probability", o.probability.tensor().clone()),
                        ("confidence", o.confidence.tensor().clone()),
                        ("uncertainty", o.uncertainty.tensor().clone()),
                        ("prediction", o.prediction.tensor().clone()),
                        ("temperature", o.temperature.to_plane(h, w)),
                    ]
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect(),
                );
                file.write(a.out.join(format!("{}.mts", r.id)))?;
                export_pgm(a.out.join(format!("{}_prob.pgm", r.id)), h, w, o.probability.values())?;
                export_pgm(a.out.join(format!("{}_uncert.pgm", r.id)), h, w, o.uncertainty.values())?;
            }
            info!("calibrated {} records into {}", records.len(), a.out.display());
        }
        Command::Eval(a) => {
            let (records, outputs) = outputs_for(&a.source)?;
            let (size, margin) = match cli.profile {
                Profile::Full => (72, 70),
                Profile::Mini => (16, 12),
            };
            let cfg = EvalConfig {
                mode: a.mode,
                bins: a.bins,
                seed: cli.seed,
                patches: PatchConfig {
                    count: a.patches,
                    size: a.patch_size.unwrap_or(size),
                    margin: a.patch_margin.unwrap_or(margin),
                },
                per_patch: a.per_patch,
            };
            let report = metrics::evaluate(&records, &outputs, &cfg)?;
            emit(a.out.as_deref(), &json_line(&report)?, stdout)?;
        }
        Command::Reliability(a) => {
            let (records, outputs) = outputs_for(&a.source)?;
            let cfg = EvalConfig {
                mode: if a.lesion { EvalMode::Lesion } else { EvalMode::Full },
                ..EvalConfig::default()
            };
            let mut pool = metrics::PixelPool::default();
            for (i, (r, o)) in records.iter().zip(&outputs).enumerate() {
                metrics::pool_record(r, o, i, &cfg, &mut pool)?;
            }
            let rows = metrics::reliability_export(&pool.confidence, &pool.correct, a.bins)?;
            emit(a.out.as_deref(), &metrics::reliability_csv(&rows), stdout)?;
        }
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match run_command(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
