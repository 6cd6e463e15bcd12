//! Command-line front end: `train`, `eval`, `sweep`, `gradcheck`, `report`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::adapters::AdapterState;
use crate::cil::{self, FeatureExtractor, RunReport, SweepAxis, SweepTable};
use crate::config::{DataSource, RunConfig};
use crate::data::{self, Dataset};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::gradsuite::{self, SuiteDims};
use crate::protoclf::PrototypeClassifier;
use crate::seed::{self, tags};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "adaptcl", version, about = "Adapter-based class-incremental learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    pub config: PathBuf,
    /// Master seed, replacing `protocol.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        for o in &self.overrides {
            cfg.set(o)?;
        }
        if let Some(s) = self.seed {
            cfg.protocol.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Json,
    GnuplotData,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the full protocol and write reports and weights.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Print the JSON report instead of CSV.
        #[arg(long)]
        json: bool,
    },
    /// Re-evaluate a trained run directory on every test set.
    Eval {
        run_dir: PathBuf,
    },
    /// One protocol run per grid point along an axis.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// adapter_count, adapter_position, kinds, bottleneck or imbalance.
        #[arg(long)]
        axis: String,
        /// Comma-separated values or a shorthand (all8, standard, pow2, table).
        #[arg(long, default_value = "")]
        grid: String,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference gradient checks in 64-bit and 32-bit precision.
    Gradcheck {
        /// Composite geometry `D,B,H`.
        #[arg(long, default_value = "8,2,2")]
        dims: String,
        /// Relative tolerance in 64-bit mode.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Relative tolerance in 32-bit mode.
        #[arg(long, default_value_t = 1e-3)]
        tol32: f64,
    },
    /// Merge run or sweep directories into one table.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: ReportFormat,
        /// Merge even when config fingerprints differ.
        #[arg(long)]
        force: bool,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train { config, out, json } => cmd_train(&config.resolve()?, &out, json),
        Command::Eval { run_dir } => cmd_eval(&run_dir),
        Command::Sweep {
            config,
            axis,
            grid,
            out,
            json,
        } => {
            let axis: SweepAxis = axis.parse()?;
            cmd_sweep(&config.resolve()?, axis, &grid, &out, json)
        }
        Command::Gradcheck { dims, tol, tol32 } => cmd_gradcheck(&dims, tol, tol32),
        Command::Report {
            dirs,
            format,
            force,
        } => {
            print!("{}", cmd_report(&dirs, format, force)?);
            Ok(EXIT_OK)
        }
    }
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, json: bool) -> Result<i32> {
    let outcome = cil::run_experiment(cfg)?;
    fs::create_dir_all(out)?;
    let report = &outcome.report;
    fs::write(out.join("report.csv"), report.to_csv())?;
    fs::write(out.join("report.json"), report.to_json())?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    outcome.composite.frozen().save_weights(out.join("encoder.siml"))?;
    outcome.composite.adapters().save_weights(out.join("adapters.siml"))?;
    outcome.classifier.save(out.join("classifier.siml"))?;
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_csv());
    }
    Ok(EXIT_OK)
}

/// Final cumulative accuracy of a saved run, recomputed from its weights.
pub fn eval_run(run_dir: &Path) -> Result<f64> {
    let cfg = RunConfig::load(run_dir.join("config.toml"))?;
    cfg.validate()?;
    let encoder = EncoderState::load_weights(&cfg.encoder, run_dir.join("encoder.siml"))?;
    let adapter_cfg = cfg.adapter_config()?;
    let adapters = AdapterState::load_weights(
        &adapter_cfg,
        cfg.encoder.embed_dim,
        cfg.encoder.num_blocks,
        run_dir.join("adapters.siml"),
    )?;
    let classifier = PrototypeClassifier::load(run_dir.join("classifier.siml"))?;
    let composite = cil::build_composite(&encoder, &encoder, &adapters, cfg.protocol.concat)?;
    if composite.dim() != classifier.dim() {
        return Err(Error::format(
            "classifier",
            format!(
                "prototype width {} does not match feature width {}",
                classifier.dim(),
                composite.dim()
            ),
        ));
    }
    let test: Dataset = match cfg.data.source {
        DataSource::Synthetic => {
            let seed = seed::derive(cfg.protocol.seed, &[tags::DATA]);
            data::generate_synthetic(&cfg.synthetic_spec(), seed)?.test
        }
        DataSource::Raw => data::ingest_raw(
            cfg.data.raw_dir.as_deref().expect("validated"),
            cfg.data.test_manifest.as_deref().expect("validated"),
            cfg.encoder.image_shape(),
        )?,
    };
    cil::evaluate(&composite, &classifier, &[&test])
}

fn cmd_eval(run_dir: &Path) -> Result<i32> {
    let acc = eval_run(run_dir)?;
    println!("last {acc:.4}");
    Ok(EXIT_OK)
}

pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis, grid: &str, out: &Path, json: bool) -> Result<i32> {
    let points = cil::expand_grid(axis, grid)?;
    let table = cil::sweep(cfg, axis, &points)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("sweep.csv"), table.to_csv())?;
    fs::write(out.join("sweep_tasks.csv"), table.tasks_csv())?;
    fs::write(out.join("sweep.json"), table.to_json())?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    for n in &table.notes {
        eprintln!("note: {n}");
    }
    if json {
        println!("{}", table.to_json());
    } else {
        print!("{}", table.to_csv());
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(dims: &str, tol: f64, tol32: f64) -> Result<i32> {
    let dims: SuiteDims = dims.parse()?;
    for (key, t) in [("tol", tol), ("tol32", tol32)] {
        if !(t > 0.0) {
            return Err(Error::config(key, "must be positive"));
        }
    }
    let entries = gradsuite::run_suite(dims, tol, tol32)?;
    println!("{:<30} {:>4} {:>7} {:>12}  status", "case", "prec", "coords", "max_rel");
    for e in &entries {
        println!(
            "{:<30} {:>4} {:>7} {:>12.3e}  {}",
            e.name,
            e.precision,
            e.coords,
            e.max_rel_error,
            if e.passed { "ok" } else { "FAIL" }
        );
    }
    for prec in ["f64", "f32"] {
        if let Some(w) = entries
            .iter()
            .filter(|e| e.precision == prec)
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        {
            println!(
                "worst {prec}: {:.3e} ({}, tol {:.1e})",
                w.max_rel_error, w.name, w.tol
            );
        }
    }
    Ok(if entries.iter().all(|e| e.passed) {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    })
}

enum Loaded {
    Run(RunReport),
    Sweep(SweepTable),
}

impl Loaded {
    fn fingerprint(&self) -> &str {
        match self {
            Loaded::Run(r) => &r.fingerprint,
            Loaded::Sweep(s) => &s.fingerprint,
        }
    }
}

fn load_dir(dir: &Path) -> Result<Loaded> {
    let parse_err = |e: serde_json::Error| Error::format(dir.display().to_string(), e.to_string());
    if let Ok(text) = fs::read_to_string(dir.join("report.json")) {
        return Ok(Loaded::Run(serde_json::from_str(&text).map_err(parse_err)?));
    }
    if let Ok(text) = fs::read_to_string(dir.join("sweep.json")) {
        return Ok(Loaded::Sweep(serde_json::from_str(&text).map_err(parse_err)?));
    }
    Err(Error::format(
        dir.display().to_string(),
        "no report.json or sweep.json",
    ))
}

fn run_id(dir: &Path) -> String {
    dir.file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Merged table over several run (or sweep) directories.
pub fn cmd_report(dirs: &[PathBuf], format: ReportFormat, force: bool) -> Result<String> {
    let loaded = dirs
        .iter()
        .map(|d| load_dir(d).map(|l| (run_id(d), l)))
        .collect::<Result<Vec<_>>>()?;
    if let Some((_, first)) = loaded.first() {
        if let Some((id, other)) = loaded
            .iter()
            .find(|(_, l)| l.fingerprint() != first.fingerprint())
        {
            if !force {
                return Err(Error::config(
                    "fingerprint",
                    format!("run `{id}` has a different config fingerprint; pass --force to merge"),
                ));
            }
            log::warn!("merging run `{id}` with fingerprint {}", other.fingerprint());
        }
    }
    let runs: Vec<(&String, &RunReport)> = loaded
        .iter()
        .filter_map(|(id, l)| match l {
            Loaded::Run(r) => Some((id, r)),
            Loaded::Sweep(_) => None,
        })
        .collect();
    let sweeps: Vec<(&String, &SweepTable)> = loaded
        .iter()
        .filter_map(|(id, l)| match l {
            Loaded::Sweep(s) => Some((id, s)),
            Loaded::Run(_) => None,
        })
        .collect();
    if !runs.is_empty() && !sweeps.is_empty() {
        return Err(Error::config("dirs", "cannot merge runs with sweeps"));
    }
    let mut out = String::new();
    match format {
        ReportFormat::Json => {
            let doc: Vec<serde_json::Value> = loaded
                .iter()
                .map(|(id, l)| {
                    let body = match l {
                        Loaded::Run(r) => serde_json::to_value(r),
                        Loaded::Sweep(s) => serde_json::to_value(s),
                    }
                    .expect("report serialises");
                    serde_json::json!({ "run": id, "data": body })
                })
                .collect();
            out = serde_json::to_string_pretty(&doc).expect("json") + "\n";
        }
        ReportFormat::Csv if runs.len() == 1 => out = runs[0].1.to_csv(),
        ReportFormat::Csv if sweeps.len() == 1 => out = sweeps[0].1.to_csv(),
        ReportFormat::Csv => {
            let lines = runs
                .iter()
                .map(|(id, r)| (id, r.to_csv()))
                .chain(sweeps.iter().map(|(id, s)| (id, s.to_csv())));
            for (i, (id, csv)) in lines.enumerate() {
                let mut it = csv.lines();
                let header = it.next().unwrap_or_default();
                if i == 0 {
                    writeln!(out, "run,{header}").expect("write");
                }
                for l in it {
                    writeln!(out, "{id},{l}").expect("write");
                }
            }
        }
        ReportFormat::GnuplotData => {
            for (id, r) in &runs {
                writeln!(out, "# run {id}\n# task last avg").expect("write");
                for row in &r.rows {
                    writeln!(out, "{} {:.4} {:.4}", row.task, row.last, row.avg).expect("write");
                }
                out.push_str("\n\n");
            }
            for (id, s) in &sweeps {
                writeln!(out, "# sweep {id} axis {}\n# index value last avg", s.axis.name())
                    .expect("write");
                for (i, row) in s.rows.iter().enumerate() {
                    if let (Some(l), Some(a)) = (row.report.final_last(), row.report.final_avg()) {
                        writeln!(out, "{i} {} {l:.4} {a:.4}", row.value).expect("write");
                    }
                }
                out.push_str("\n\n");
            }
        }
    }
    Ok(out)
}
