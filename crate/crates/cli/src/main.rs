use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use glassfuse::dataset::{load_dataset, write_dataset};
use glassfuse::metrics::{evaluate_reconstruction, DEFAULT_RADIUS};
use glassfuse::pipeline::{corr2d_csv, run_corr2d_benchmark, run_reconstruction, FlowSource, PipelineConfig};
use glassfuse::ply::{read_ply, write_ply, PlyFormat};
use glassfuse::synth::{generate_dataset, SynthConfig};

#[derive(Parser)]
#[command(name = "glassfuse", version, about = "Transparent-object reconstruction from RGB-D sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FlowArg {
    Estimated,
    Oracle,
    OracleNoise,
}

impl From<FlowArg> for FlowSource {
    fn from(f: FlowArg) -> Self {
        match f {
            FlowArg::Estimated => FlowSource::Estimated,
            FlowArg::Oracle => FlowSource::Oracle,
            FlowArg::OracleNoise => FlowSource::OracleNoise,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene into a dataset directory.
    Synth {
        /// Scene/orbit/noise config (JSON). Built-in tabletop scene if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the depth-noise seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruct transparent surfaces from a dataset.
    Recon {
        dataset: PathBuf,
        /// Pipeline config (JSON). Defaults if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output point cloud (PLY).
        #[arg(long)]
        out: PathBuf,
        /// Report path (JSON). Printed to stdout if omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum)]
        flow: Option<FlowArg>,
        /// Overrides the flow-noise seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the direct-concatenation baseline cloud.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Also write the ground-truth cloud, when the dataset has ground truth.
        #[arg(long)]
        gt_out: Option<PathBuf>,
        /// Write ASCII instead of binary PLY.
        #[arg(long)]
        ascii: bool,
    },
    /// Compare a predicted cloud against a ground-truth cloud.
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        /// Inlier radius, meters.
        #[arg(long, default_value_t = DEFAULT_RADIUS)]
        radius: f64,
        /// Report path (JSON). Printed to stdout if omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Flow-only versus epipolar-refined 2D correspondence error per interval.
    Corr2d {
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 6, 8, 10, 12])]
        intervals: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        flow: Option<FlowArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Table path; `.csv` writes CSV, anything else JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn pipeline_config(path: Option<&Path>, flow: Option<FlowArg>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = read_config(path)?;
    if let Some(f) = flow {
        cfg.flow_source = f.into();
    }
    if let Some(s) = seed {
        cfg.flow_noise.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut cfg: SynthConfig = read_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.noise.seed = s;
            }
            let ds = generate_dataset(&cfg)?;
            write_dataset(&out, &ds)?;
            eprintln!("wrote {} frames to {}", ds.len(), out.display());
        }
        Command::Recon {
            dataset,
            config,
            out,
            report,
            flow,
            seed,
            baseline,
            gt_out,
            ascii,
        } => {
            let cfg = pipeline_config(config.as_deref(), flow, seed)?;
            let (_, ds) = load_dataset(&dataset)?;
            let run = run_reconstruction(&ds, &cfg)?;
            let fmt = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
            write_ply(&out, &run.cloud, fmt)?;
            if let Some(p) = baseline {
                write_ply(&p, &run.baseline, fmt)?;
            }
            if let Some(p) = gt_out {
                match &run.ground_truth {
                    Some(gt) => write_ply(&p, gt, fmt)?,
                    None => bail!("--gt-out given but {} has no ground-truth depth", dataset.display()),
                }
            }
            let json = run.report.to_json();
            match report {
                Some(p) => write_text(&p, &json)?,
                None => print!("{json}"),
            }
            eprintln!("{}", serde_json::json!({ "timings_s": run.report.timings }));
        }
        Command::Eval { pred, gt, radius, report } => {
            let r = evaluate_reconstruction(&read_ply(&pred)?, &read_ply(&gt)?, radius)?;
            let json = serde_json::to_string_pretty(&r)? + "\n";
            match report {
                Some(p) => write_text(&p, &json)?,
                None => print!("{json}"),
            }
        }
        Command::Corr2d {
            dataset,
            intervals,
            config,
            flow,
            seed,
            out,
        } => {
            let cfg = pipeline_config(config.as_deref(), flow, seed)?;
            let (_, ds) = load_dataset(&dataset)?;
            let rows = run_corr2d_benchmark(&ds, &intervals, &cfg)?;
            let json = serde_json::to_string_pretty(&rows)? + "\n";
            if let Some(p) = out {
                if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                    write_text(&p, &corr2d_csv(&rows))?;
                } else {
                    write_text(&p, &json)?;
                }
            }
            print!("{json}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("{}", serde_json::json!({ "error": msg.trim(), "kind": "usage" }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "causes": causes, "kind": "runtime" })
            );
            ExitCode::FAILURE
        }
    }
}
