//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric
//! failure, 3 threshold failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::correction::Variant;
use crate::error::{Error, Result};
use crate::models::NoiseEstimator;
use crate::samplers::Record;

use super::checkpoint::{self, Container, Kind};
use super::config::RunConfig;
use super::pipeline;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_THRESHOLD: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "tacq", version, about = "Quantized toy diffusion models with timestep-aware correction")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (`key = value` lines; only `dataset` is required).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long = "bits-w", global = true)]
    pub bits_w: Option<u32>,
    #[arg(long = "bits-a", global = true)]
    pub bits_a: Option<u32>,
    #[arg(long, global = true)]
    pub lambda1: Option<f64>,
    #[arg(long, global = true)]
    pub lambda2: Option<f64>,
    #[arg(long = "k-threshold", global = true)]
    pub k_threshold: Option<f64>,
    /// baseline | ibc | ner-ibc | tac | first-step | est-bias | eq22
    #[arg(long, global = true)]
    pub variant: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a full-precision noise model.
    Train,
    /// Quantize a model and calibrate its activation ranges.
    Quantize {
        #[arg(long)]
        model: PathBuf,
    },
    /// Pre-calculate correction tables for the configured variant.
    Correct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        qmodel: PathBuf,
    },
    /// Draw samples from a model or quantized model checkpoint.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
        /// Number of samples (default: `sampler.n_samples`).
        #[arg(long)]
        n: Option<usize>,
        /// Also dump network inputs and activations at every evaluation point.
        #[arg(long)]
        trajectory: bool,
        /// Output file name inside `--out`.
        #[arg(long, default_value = "samples.tacq")]
        name: String,
    },
    /// Compare samples with a reference set.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Fail with exit code 3 when the energy distance exceeds this.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Baseline and correction variants against the full-precision reference.
    Ablate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        qmodel: Option<PathBuf>,
    },
    /// One corrected run per `sweep.lambda1` value.
    SweepLambda {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        qmodel: Option<PathBuf>,
    },
    /// Per-timestep activation histograms from a trajectory dump.
    Hist {
        #[arg(long)]
        dump: PathBuf,
        /// Site name or index.
        #[arg(long, default_value = "input")]
        site: String,
        /// Comma-separated evaluation points (default: all).
        #[arg(long, value_delimiter = ',')]
        points: Vec<usize>,
        #[arg(long)]
        bins: Option<usize>,
    },
}

/// What a successful command reports back.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Ok,
    ThresholdExceeded { value: f64, threshold: f64 },
}

fn load_config(common: &Common, required: bool) -> Result<Option<RunConfig>> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None if required => {
            return Err(Error::config(None, Some("dataset"), "no --config given (it must at least set `dataset`)"))
        }
        None => return Ok(None),
    };
    let overrides = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("out", common.out.as_ref().map(|p| p.display().to_string())),
        ("quant.weight_bits", common.bits_w.map(|v| v.to_string())),
        ("quant.act_bits", common.bits_a.map(|v| v.to_string())),
        ("correction.lambda1", common.lambda1.map(|v| v.to_string())),
        ("correction.lambda2", common.lambda2.map(|v| v.to_string())),
        ("correction.k_threshold", common.k_threshold.map(|v| v.to_string())),
        ("correction.variant", common.variant.clone()),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    Ok(Some(cfg))
}

fn out_dir(common: &Common, cfg: Option<&RunConfig>) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.map(|c| c.out.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, content)?;
    Ok(path)
}

fn check_schedule(cfg: &RunConfig, c: &Container) -> Result<()> {
    if cfg.schedule()? != c.schedule {
        return Err(Error::config(None, Some("schedule"), "checkpoint schedule differs from the configured one"));
    }
    Ok(())
}

fn load_fp(cfg: &RunConfig, path: &Path) -> Result<crate::models::NoiseModel> {
    let c = Container::read(path)?;
    check_schedule(cfg, &c)?;
    checkpoint::model_from_container(&c)
}

fn load_q(cfg: &RunConfig, path: &Path) -> Result<crate::quant::QuantizedModel> {
    let c = Container::read(path)?;
    check_schedule(cfg, &c)?;
    checkpoint::qmodel_from_container(&c)
}

/// Load checkpoints when given, otherwise train and quantize from the config.
fn models_for(cfg: &RunConfig, model: &Option<PathBuf>, qmodel: &Option<PathBuf>) -> Result<(crate::models::NoiseModel, crate::quant::QuantizedModel)> {
    let schedule = cfg.schedule()?;
    let fp = match model {
        Some(p) => load_fp(cfg, p)?,
        None => pipeline::train_stage(cfg)?.model,
    };
    let q = match qmodel {
        Some(p) => load_q(cfg, p)?,
        None => pipeline::quantize_stage(cfg, &fp, &schedule)?,
    };
    if q.base() != &fp {
        return Err(Error::invalid("quantized checkpoint was not built from this model"));
    }
    Ok((fp, q))
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let needs_config = !matches!(cli.command, Command::Eval { .. } | Command::Hist { .. });
    let cfg = load_config(&cli.common, needs_config)?;
    let dir = out_dir(&cli.common, cfg.as_ref());
    match &cli.command {
        Command::Train => {
            let cfg = cfg.expect("required");
            let t = pipeline::train_stage(&cfg)?;
            checkpoint::model_to_container(&t.model, &t.schedule).write(&dir.join("model.tacq"))?;
            write(&dir, "loss_curve.csv", &pipeline::loss_curve_csv(&t.loss_curve))?;
            write(&dir, "config.txt", &cfg.to_text())?;
            if let Some((_, last)) = t.loss_curve.last() {
                println!("final_loss={last}");
            }
        }
        Command::Quantize { model } => {
            let cfg = cfg.expect("required");
            let schedule = cfg.schedule()?;
            let fp = load_fp(&cfg, model)?;
            let q = pipeline::quantize_stage(&cfg, &fp, &schedule)?;
            checkpoint::qmodel_to_container(&q, &schedule).write(&dir.join("qmodel.tacq"))?;
            println!("weight_bits={}\nact_bits={}\nsites={}", q.weight_bits(), q.act_bits(), q.act_ranges().len());
        }
        Command::Correct { model, qmodel } => {
            let cfg = cfg.expect("required");
            let schedule = cfg.schedule()?;
            let fp = load_fp(&cfg, model)?;
            let q = load_q(&cfg, qmodel)?;
            match pipeline::correct_stage(&cfg, &fp, &q, &schedule)? {
                Some(table) => {
                    checkpoint::table_to_container(&table, &schedule).write(&dir.join("table.tacq"))?;
                    let summary = pipeline::table_summary(&table);
                    write(&dir, "table_summary.csv", &summary)?;
                    print!("{summary}");
                }
                None => println!("variant baseline needs no correction table"),
            }
        }
        Command::Sample {
            model,
            table,
            n,
            trajectory,
            name,
        } => {
            let cfg = cfg.expect("required");
            let schedule = cfg.schedule()?;
            let c = Container::read(model)?;
            check_schedule(&cfg, &c)?;
            let (net, label, sites): (Box<dyn NoiseEstimator>, &str, Vec<String>) = match c.kind {
                Kind::Model => {
                    let m = checkpoint::model_from_container(&c)?;
                    let s = m.site_names();
                    (Box::new(m), "fp", s)
                }
                Kind::QModel => {
                    let q = checkpoint::qmodel_from_container(&c)?;
                    let s = q.base().site_names();
                    (Box::new(q), "quantized", s)
                }
                other => return Err(Error::invalid(format!("cannot sample from a {other:?} checkpoint"))),
            };
            let table = match table {
                Some(p) => {
                    let t = Container::read(p)?;
                    check_schedule(&cfg, &t)?;
                    Some(checkpoint::table_from_container(&t)?)
                }
                None => None,
            };
            let record = if *trajectory { Record::Activations } else { Record::Nothing };
            let n = n.unwrap_or(cfg.sampler.n_samples);
            let run = pipeline::sample_stage(&cfg, net.as_ref(), &schedule, table.as_ref(), n, record)?;
            let label = match &table {
                Some(_) => format!("{label}+{}", cfg.variant),
                None => label.to_owned(),
            };
            checkpoint::samples_to_container(&run.samples, run.seed, &label, &schedule).write(&dir.join(name))?;
            if let Some(t) = &run.trajectory {
                checkpoint::trajectory_to_container(t, &sites, &schedule).write(&dir.join("trajectory.tacq"))?;
            }
            println!("samples={n}\nseed={}\nelapsed_s={:.3}", run.seed, run.elapsed.as_secs_f64());
        }
        Command::Eval {
            samples,
            reference,
            threshold,
        } => {
            let (a, _, _) = checkpoint::samples_from_container(&Container::read(samples)?)?;
            let (b, _, _) = checkpoint::samples_from_container(&Container::read(reference)?)?;
            let report = pipeline::evaluate(&a, &b)?;
            write(&dir, "report.txt", &report.to_kv())?;
            write(&dir, "report.csv", &report.to_csv())?;
            print!("{}", report.to_kv());
            if let Some(t) = threshold.or(cfg.as_ref().and_then(|c| c.max_energy)) {
                if report.energy > t {
                    return Ok(Outcome::ThresholdExceeded {
                        value: report.energy,
                        threshold: t,
                    });
                }
            }
        }
        Command::Ablate { model, qmodel } => {
            let cfg = cfg.expect("required");
            let schedule = cfg.schedule()?;
            let (fp, q) = models_for(&cfg, model, qmodel)?;
            let run = pipeline::ablate(&cfg, &fp, &q, &schedule, &Variant::ABLATION)?;
            let csv = run.to_csv();
            write(&dir, "ablation.csv", &csv)?;
            write(&dir, "ablation.txt", &run.table.to_kv())?;
            print!("{csv}");
        }
        Command::SweepLambda { model, qmodel } => {
            let cfg = cfg.expect("required");
            let schedule = cfg.schedule()?;
            let (fp, q) = models_for(&cfg, model, qmodel)?;
            let rows = pipeline::sweep_lambda(&cfg, &fp, &q, &schedule)?;
            let csv = pipeline::sweep_csv(&rows);
            write(&dir, "sweep_lambda.csv", &csv)?;
            print!("{csv}");
        }
        Command::Hist {
            dump,
            site,
            points,
            bins,
        } => {
            let (traj, sites) = checkpoint::trajectory_from_container(&Container::read(dump)?)?;
            let bins = bins.or(cfg.as_ref().map(|c| c.hist_bins)).unwrap_or(32);
            let csv = pipeline::hist_csv(&traj, &sites, site, points, bins)?;
            let path = write(&dir, "hist.csv", &csv)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(Outcome::Ok)
}

pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::ThresholdExceeded { .. }) => EXIT_THRESHOLD,
        Err(Error::Numeric(_)) => EXIT_NUMERIC,
        Err(_) => EXIT_USAGE,
    }
}

/// Parse `args`, run, report, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = run(&cli);
    match &result {
        Ok(Outcome::ThresholdExceeded { value, threshold }) => {
            eprintln!("energy distance {value} exceeds threshold {threshold}");
        }
        Err(e) => eprintln!("error: {e}"),
        Ok(Outcome::Ok) => {}
    }
    exit_code(&result)
}
