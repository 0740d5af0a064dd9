//! Command-line front end.
//!
//! Every command exits 0 on success. Failures print a single line
//! `error: kind=<tag> msg="<text>"` to stderr and exit with status 1
//! (status 2 for malformed command lines).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::{build_dataset, synthetic_scene, CropPolicy, DatasetSpec};
use crate::diffusion::run_diffusion;
use crate::error::{Error, Result};
use crate::io::{load_image, load_model, save_image, save_model};
use crate::metrics::{
    coeff_variation, edge_correlation, evaluate, ideal_ratio_variance, metrics_table, mssim, psnr,
    MetricsReport,
};
use crate::model::{DiffusionModel, ModelSpec, Variant};
use crate::speckle::{sample_speckle, NoisyPair, SpeckleConfig};
use crate::training::{finite_diff_check, train_with_progress, LbfgsOptions, Schedule, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "despeckle", version, about = "Trained reaction-diffusion speckle removal")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Multiply clean images by Nakagami speckle, or write a synthetic clean corpus.
    Simulate(SimulateArgs),
    /// Train a model on speckled crops of a directory of clean images.
    Train(TrainArgs),
    /// Apply a trained model to an image or a directory of images.
    Despeckle(DespeckleArgs),
    /// Write the quality-metrics table for despeckled images.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a small problem.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Greedy,
    Joint,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Prox,
    Projected,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Clean image or directory of clean images.
    #[arg(long, required_unless_present = "synthetic")]
    pub input: Option<PathBuf>,
    /// Output image, or directory when the input is one.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub looks: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write this many synthetic clean scenes to `--output` instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Side length of synthetic scenes.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Clamp level for graymap output.
    #[arg(long, default_value_t = 255.0)]
    pub peak: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of clean training images.
    #[arg(long)]
    pub data: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub looks: u32,
    #[arg(long, default_value_t = 5)]
    pub stages: usize,
    #[arg(long, default_value_t = 5)]
    pub filter_size: usize,
    /// Defaults to filter_size² − 1.
    #[arg(long)]
    pub num_filters: Option<usize>,
    #[arg(long, default_value_t = 63)]
    pub rbf_count: usize,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Both)]
    pub schedule: ScheduleArg,
    #[arg(long, value_enum, default_value_t = VariantArg::Prox)]
    pub variant: VariantArg,
    /// Floor of the projected variant.
    #[arg(long, default_value_t = 1.0)]
    pub floor: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub patch: usize,
    #[arg(long, default_value_t = 1)]
    pub per_image: usize,
    #[arg(long, default_value_t = 200)]
    pub greedy_iters: usize,
    #[arg(long, default_value_t = 200)]
    pub joint_iters: usize,
    /// Dynamic range of the image values.
    #[arg(long, default_value_t = 255.0)]
    pub value_range: f64,
    /// Verify gradients before training.
    #[arg(long)]
    pub gradient_check: bool,
    /// Training log; defaults to the model path with `.log` appended.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DespeckleArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Noisy image or directory of noisy images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Noise level of the input; a mismatch with the model only warns.
    #[arg(long)]
    pub looks: Option<u32>,
    #[arg(long, default_value_t = 255.0)]
    pub peak: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Despeckled image or directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Clean reference image or directory with matching file names.
    #[arg(long)]
    pub reference: PathBuf,
    /// Noisy image or directory; needed for the ratio-image statistics.
    #[arg(long)]
    pub noisy: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub looks: u32,
    #[arg(long, default_value_t = 255.0)]
    pub peak: f64,
    /// Metrics table path; printed to stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check this model instead of a freshly initialized one.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub looks: u32,
    #[arg(long, default_value_t = 2)]
    pub stages: usize,
    #[arg(long, default_value_t = 3)]
    pub filter_size: usize,
    #[arg(long)]
    pub num_filters: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub rbf_count: usize,
    #[arg(long, value_enum, default_value_t = VariantArg::Prox)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Side of the random test image.
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn warn(err: &mut dyn Write, msg: &str) {
    let _ = writeln!(err, "warning: {msg}");
}

fn is_dir(p: &Path) -> bool {
    p.is_dir()
}

/// Image files of a directory, sorted by name.
fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    v.sort();
    Ok(v)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn variant(arg: VariantArg, floor: f64) -> Variant {
    match arg {
        VariantArg::Prox => Variant::Prox,
        VariantArg::Projected => Variant::Projected { floor },
    }
}

pub fn cmd_simulate(a: &SimulateArgs, err: &mut dyn Write) -> Result<()> {
    if let Some(n) = a.synthetic {
        fs::create_dir_all(&a.output)?;
        for i in 0..n {
            let img = synthetic_scene(a.size, a.size, a.peak, a.seed.wrapping_add(i as u64));
            save_image(&img, a.output.join(format!("scene_{i:04}.pgm")), a.peak)?;
        }
        return Ok(());
    }
    let input = a
        .input
        .as_ref()
        .ok_or_else(|| Error::Parameter("--input is required".into()))?;
    let cfg = SpeckleConfig::new(a.looks, a.seed)?;
    if is_dir(input) {
        fs::create_dir_all(&a.output)?;
        for (i, path) in image_files(input)?.iter().enumerate() {
            let img = match load_image(path) {
                Ok(img) => img,
                Err(e) => {
                    warn(err, &format!("skipping {}: {e}", path.display()));
                    continue;
                }
            };
            let per_image = SpeckleConfig::new(a.looks, a.seed.wrapping_add(i as u64))?;
            let pair = sample_speckle(&img, &per_image)?;
            let out = a.output.join(file_name(path)).with_extension("fgrid");
            save_image(&pair.noisy, out, a.peak)?;
        }
        Ok(())
    } else {
        let pair = sample_speckle(&load_image(input)?, &cfg)?;
        save_image(&pair.noisy, &a.output, a.peak)
    }
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<TrainSummary> {
    let cfg = SpeckleConfig::new(a.looks, a.seed)?;
    let spec = DatasetSpec {
        dir: a.data.clone(),
        patch: a.patch,
        per_image: a.per_image,
        crop: CropPolicy::Random,
        seed: a.seed,
    };
    let data = build_dataset(&spec, &cfg)?;
    for w in &data.warnings {
        warn(err, w);
    }
    let schedule = match a.schedule {
        ScheduleArg::Greedy => Schedule::Greedy,
        ScheduleArg::Joint => Schedule::Joint,
        ScheduleArg::Both => Schedule::GreedyThenJoint,
    };
    let train_cfg = TrainConfig {
        model: ModelSpec {
            stages: a.stages,
            filter_size: a.filter_size,
            num_filters: a.num_filters,
            rbf_count: a.rbf_count,
            looks: a.looks,
            value_range: a.value_range,
            variant: variant(a.variant, a.floor),
            seed: a.seed,
            ..ModelSpec::default()
        },
        schedule,
        greedy_iters: a.greedy_iters,
        joint_iters: a.joint_iters,
        gradient_check: a.gradient_check,
        lbfgs: LbfgsOptions::default(),
        ..TrainConfig::default()
    };
    let log_path = a.report.clone().unwrap_or_else(|| {
        let mut p = a.output.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    let mut log = fs::File::create(&log_path)?;
    let mut io_err = None;
    let outcome = train_with_progress(&train_cfg, &data.pairs, &mut |r| {
        let line = r.to_string();
        if let Err(e) = writeln!(log, "{line}").and_then(|_| writeln!(out, "{line}")) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let mut model = outcome.model;
    model.metadata.insert("data".into(), a.data.display().to_string());
    model.metadata.insert("patch".into(), a.patch.to_string());
    save_model(&model, &a.output)?;
    let manifest = {
        let mut p = a.output.clone().into_os_string();
        p.push(".manifest.csv");
        PathBuf::from(p)
    };
    fs::write(manifest, data.manifest_csv())?;
    Ok(TrainSummary {
        samples: data.pairs.len(),
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSummary {
    pub samples: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn check_looks(model: &DiffusionModel, looks: Option<u32>, err: &mut dyn Write) {
    if let Some(l) = looks {
        if l != model.looks {
            warn(err, &format!("model was trained for L={} but input has L={l}; proceeding", model.looks));
        }
    }
}

pub fn cmd_despeckle(a: &DespeckleArgs, err: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.model)?;
    check_looks(&model, a.looks, err);
    let run = |input: &Path, output: &Path| -> Result<()> {
        let f = load_image(input)?;
        let (u, _) = run_diffusion(&f, &model, false)?;
        save_image(&u, output, a.peak)
    };
    if is_dir(&a.input) {
        fs::create_dir_all(&a.output)?;
        for path in image_files(&a.input)? {
            run(&path, &a.output.join(file_name(&path)))?;
        }
        Ok(())
    } else {
        run(&a.input, &a.output)
    }
}

/// Pairs of (name, test, reference, noisy) paths.
fn eval_triples(a: &EvalArgs) -> Result<Vec<(String, PathBuf, PathBuf, Option<PathBuf>)>> {
    if !is_dir(&a.input) {
        return Ok(vec![(file_name(&a.input), a.input.clone(), a.reference.clone(), a.noisy.clone())]);
    }
    let mut out = Vec::new();
    for path in image_files(&a.input)? {
        let name = file_name(&path);
        let find = |dir: &Path| -> Result<PathBuf> {
            let exact = dir.join(&name);
            if exact.is_file() {
                return Ok(exact);
            }
            let stem = path.file_stem().unwrap_or_default();
            image_files(dir)?
                .into_iter()
                .find(|p| p.file_stem() == Some(stem))
                .ok_or_else(|| Error::Parameter(format!("no counterpart for {name} in {}", dir.display())))
        };
        let reference = find(&a.reference)?;
        let noisy = a.noisy.as_deref().map(find).transpose()?;
        out.push((name, path, reference, noisy));
    }
    Ok(out)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let mut rows: Vec<(String, u32, MetricsReport)> = Vec::new();
    for (name, test, reference, noisy) in eval_triples(a)? {
        let u = load_image(&test)?;
        let r = load_image(&reference)?;
        let report = match noisy {
            Some(p) => evaluate(&u, &r, &load_image(&p)?, a.looks, a.peak)?,
            // ratio statistics need the noisy input
            None => MetricsReport {
                psnr: psnr(&u, &r, a.peak)?,
                mssim: mssim(&u, &r, a.peak)?,
                ec: edge_correlation(&u, &r)?,
                ri_m: f64::NAN,
                ri_v: f64::NAN,
                c_hat: coeff_variation(&u)?,
                c_u_ideal: coeff_variation(&r)?,
                ri_v_ideal: ideal_ratio_variance(a.looks),
            },
        };
        rows.push((name, a.looks, report));
    }
    let table = metrics_table(&rows);
    if let Some(p) = &a.report {
        fs::write(p, &table)?;
    }
    Ok(table)
}

pub fn cmd_gradcheck(
    a: &GradcheckArgs,
    err: &mut dyn Write,
) -> Result<crate::training::GradCheckReport> {
    let model = match &a.model {
        Some(p) => {
            let m = load_model(p)?;
            check_looks(&m, Some(a.looks), err);
            m
        }
        None => DiffusionModel::init(&ModelSpec {
            stages: a.stages,
            filter_size: a.filter_size,
            num_filters: a.num_filters,
            rbf_count: a.rbf_count,
            looks: a.looks,
            value_range: 4.0,
            variant: variant(a.variant, 1.0),
            init_slope: 0.05,
            init_lambda: 0.3,
            seed: a.seed,
        })?,
    };
    let scale = model.value_range / 4.0;
    let clean = synthetic_scene(a.size, a.size, 4.0 * scale, a.seed);
    let pair: NoisyPair = sample_speckle(&clean, &SpeckleConfig::new(a.looks, a.seed)?)?;
    finite_diff_check(&model, &pair, a.tolerance)
}

/// Runs one command, writing results to `out` and diagnostics to `err`;
/// returns the process exit status.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result: Result<()> = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, err),
        Command::Train(a) => cmd_train(a, out, err).and_then(|s| {
            writeln!(
                err,
                "trained on {} samples: loss {:e} -> {:e}",
                s.samples, s.initial_loss, s.final_loss
            )
            .map_err(Error::from)
        }),
        Command::Despeckle(a) => cmd_despeckle(a, err),
        Command::Eval(a) => cmd_eval(a).and_then(|t| {
            if a.report.is_none() {
                write!(out, "{t}")?;
            }
            Ok(())
        }),
        Command::Gradcheck(a) => cmd_gradcheck(a, err).and_then(|r| {
            writeln!(out, "{r}")?;
            if r.passed {
                Ok(())
            } else {
                Err(Error::Training(format!("gradient check failed: max error {:e}", r.max_error())))
            }
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}

/// `error: kind=<kind> msg="<escaped text>"` on one line.
pub fn error_line(kind: &str, msg: &str) -> String {
    let escaped = msg.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n");
    format!("error: kind={kind} msg=\"{escaped}\"")
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli, out, err),
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            let _ = writeln!(err, "{}", error_line("usage", first));
            2
        }
    }
}

#[cfg(test)]
mod tests;
