//! Thin command-line front end over the library: `run` executes an
//! experiment from a configuration file, `rate` fits convergence slopes from
//! aggregate CSVs, `diag` reports diagnostics for a serialized weight file on
//! a dataset, and `dataset` emits a dataset CSV.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numeric failure.

use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use netgrow::diagnostics::{
    c_opt, generalization_estimate, stability_constant, BoxSampler,
};
use netgrow::growth::GrowthConfig;
use netgrow::harness::{run_experiment, target_oracle, write_dataset, ExperimentSpec};
use netgrow::loss::{LossSpec, TrainingSet};
use netgrow::net::{Architecture, WeightSet};
use netgrow::trace::{fit_rate_from_aggregate, read_aggregate_csv};
use netgrow::Error;

#[derive(Parser)]
#[command(name = "netgrow", about = "Hierarchically grown Leaky-ReLU network training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a configuration file.
    Run(RunArgs),
    /// Fit the log-log convergence slope of an aggregate CSV.
    Rate(RateArgs),
    /// Report diagnostics for serialized weights on a dataset.
    Diag(DiagArgs),
    /// Emit the dataset an experiment would train on.
    Dataset(DatasetArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file (flat `key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides applied after the file, e.g. `--set rounds=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides the config's `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optimizer overrides; defaults live in the library.
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    stall_window: Option<usize>,
    #[arg(long)]
    stall_rel_tol: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct RateArgs {
    /// Aggregate CSV produced by `run`.
    #[arg(long)]
    aggregate: PathBuf,
}

#[derive(Args)]
struct DiagArgs {
    /// Weight file written by the library's serializer.
    #[arg(long)]
    weights: PathBuf,
    /// Training CSV (`x_1..x_k,y[,gamma]`).
    #[arg(long)]
    data: PathBuf,
    /// Extension architecture for the optimality indicator.
    #[arg(long, default_value = "2,3,1")]
    star: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    restarts: usize,
    #[arg(long, default_value_t = 200)]
    ascent_steps: usize,
    /// Built-in target id for a generalization estimate (optional).
    #[arg(long)]
    target: Option<String>,
    #[arg(long, default_value_t = 100_000)]
    gen_samples: usize,
}

#[derive(Args)]
struct DatasetArgs {
    /// Target id: sq2d, sq3d, pow23_2d, sq10d, planted.
    #[arg(long)]
    target: String,
    #[arg(long, default_value_t = 1024)]
    n: usize,
    /// grid or random.
    #[arg(long, default_value = "grid")]
    scheme: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse(_) | Error::Io(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn dispatch(cli: Cli) -> netgrow::Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Rate(args) => cmd_rate(args),
        Command::Diag(args) => cmd_diag(args),
        Command::Dataset(args) => cmd_dataset(args),
    }
}

fn cmd_run(args: RunArgs) -> netgrow::Result<()> {
    let text = fs::read_to_string(&args.config)?;
    let mut spec = ExperimentSpec::parse(&text)?;
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set needs KEY=VALUE, got '{kv}'")))?;
        spec.set(k.trim(), v.trim())?;
    }
    if let Some(lr) = args.learning_rate {
        spec.optim.learning_rate = lr;
    }
    if let Some(b1) = args.adam_beta1 {
        spec.optim.adam_beta1 = b1;
    }
    if let Some(b2) = args.adam_beta2 {
        spec.optim.adam_beta2 = b2;
    }
    if let Some(eps) = args.epsilon {
        spec.optim.epsilon = eps;
    }
    if let Some(w) = args.stall_window {
        spec.optim.stall_window = w;
    }
    if let Some(t) = args.stall_rel_tol {
        spec.optim.stall_rel_tol = t;
    }
    if let Some(b) = args.batch_size {
        spec.optim.batch_size = if b == 0 { None } else { Some(b) };
    }
    if let Some(out) = args.out {
        spec.out_dir = out;
    }
    spec.validate()?;
    let report = run_experiment(&spec)?;
    println!(
        "wrote {} runs ({} files) to {}",
        report.runs.len(),
        report.files.len(),
        spec.out_dir.display()
    );
    if let Some(agg) = &report.hierarchical_aggregate {
        if let Some(last) = agg.last() {
            println!(
                "hierarchical: final median error {:.3e} at {} parameters",
                last.error, last.params
            );
        }
        if let Ok(fit) = fit_rate_from_aggregate(agg) {
            println!(
                "hierarchical rate: slope {:.3}, r² {:.3} over {} points",
                fit.slope, fit.r_squared, fit.points
            );
        }
    }
    if let Some(agg) = &report.direct_aggregate {
        for row in agg {
            println!(
                "direct: width row {} -> {} parameters, median error {:.3e}",
                row.round, row.params, row.error
            );
        }
    }
    Ok(())
}

fn cmd_rate(args: RateArgs) -> netgrow::Result<()> {
    let file = fs::File::open(&args.aggregate)?;
    let rows = read_aggregate_csv(BufReader::new(file))?;
    let fit = fit_rate_from_aggregate(&rows)?;
    println!(
        "slope {:.6}  intercept {:.6}  r_squared {:.6}  points {}",
        fit.slope, fit.intercept, fit.r_squared, fit.points
    );
    Ok(())
}

fn cmd_diag(args: DiagArgs) -> netgrow::Result<()> {
    let file = fs::File::open(&args.weights)?;
    let (weights, act) = WeightSet::read_from(BufReader::new(file))?;
    let data = fs::File::open(&args.data)?;
    let ts = TrainingSet::read_csv(BufReader::new(data))?;
    let spec = LossSpec::identity();

    let loss = netgrow::loss::loss(&weights, act, &ts, &spec)?;
    println!("architecture {}", weights.arch());
    println!("parameters   {}", weights.param_count());
    println!("loss         {loss:.6e}");
    println!("error        {:.6e}", loss.sqrt());

    let star_widths: Vec<usize> = args
        .star
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad star width: {e}")))
        })
        .collect::<netgrow::Result<_>>()?;
    let cfg = GrowthConfig {
        search_restarts: args.restarts,
        search_ascent_steps: args.ascent_steps,
        ..GrowthConfig::new(Architecture::new(star_widths)?)
    };
    match c_opt(&weights, act, &ts, &spec, &cfg, args.seed) {
        Ok(report) => {
            println!(
                "C_opt        {:.6} (objective {:.6e}, restart {}, {} ascent steps)",
                report.c_opt, report.objective_value, report.restart_index, report.ascent_steps
            );
            for (l, bound) in &report.implied_size_ratio_bound {
                println!(
                    "  assumed L = {l:>4}: extensions with size ratio <= {bound:.4e} cannot halve the loss"
                );
            }
        }
        Err(Error::ZeroLoss(_)) => println!("C_opt        undefined (zero loss)"),
        Err(e) => return Err(e),
    }

    match weights.split_final_layer(1) {
        Ok(parts) => match stability_constant(&parts, act, &ts, &spec) {
            Ok(r) => println!(
                "stability L  {:.6} over {} final-layer parts (coupling holds: {})",
                r.l_constant,
                r.part_count,
                r.size_coupling_holds
                    .map(|b| b.to_string())
                    .unwrap_or_else(|| "n/a".into())
            ),
            Err(e) => println!("stability L  unavailable ({e})"),
        },
        Err(e) => println!("stability L  unavailable ({e})"),
    }

    if let Some(target_id) = &args.target {
        let mut espec = ExperimentSpec::default();
        espec.set("target", target_id)?;
        if let Some(oracle) = target_oracle(&espec)? {
            let sampler = BoxSampler::unit_cube(weights.arch().input_width());
            let g = generalization_estimate(
                &weights,
                act,
                move |x| oracle(x),
                &sampler,
                args.gen_samples,
                args.seed,
            )?;
            println!("G estimate   {g:.6e}  (G/L ratio {:.3})", g / loss.max(1e-300));
        }
    }
    Ok(())
}

fn cmd_dataset(args: DatasetArgs) -> netgrow::Result<()> {
    let mut spec = ExperimentSpec::default();
    spec.set("target", &args.target)?;
    spec.set("samples", &args.n.to_string())?;
    spec.set("scheme", &args.scheme)?;
    spec.set("dataset_seed", &args.seed.to_string())?;
    write_dataset(&spec, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
