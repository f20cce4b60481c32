use clap::{Args, Parser, Subcommand};
use dgl::config::ExperimentConfig;
use dgl::data::{load_dataset, Dataset};
use dgl::diagnostics::TheoryProbe;
use dgl::error::{Error, Result};
use dgl::gradcheck::{gradient_check, GradCheckCfg};
use dgl::harness::{self, compress_report, OUT_DIR_ENV};
use dgl::presets::desk_config;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "dgl",
    about = "Decoupled greedy training of layered networks: synchronous, pipelined, \
             buffer-mediated asynchronous, and quantized-asynchronous modes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Train(TrainArgs),
    /// Evaluate the bandwidth/buffer compression factors over codebook and
    /// buffer-size sweeps for the configured architecture.
    CompressReport(CompressArgs),
    /// Finite-difference check of every module's backward pass (64-bit).
    CheckGrad(CheckGradArgs),
    /// Monte-Carlo verification of the descent inequality and accumulation
    /// bound on the instrumented quadratic.
    TheoryProbe(TheoryArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the experiment config.
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to $DGL_OUT_DIR/<config stem> or ./runs/<stem>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompressArgs {
    /// Optional config supplying architecture/batch/groups; flags otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// First module's channel width.
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    modules: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Channel groups (k).
    #[arg(long, default_value_t = 32)]
    groups: usize,
    /// Codebook sync fraction alpha in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Comma-separated codebook sizes; default sweeps powers of two 2..65536.
    #[arg(long)]
    atoms: Option<String>,
    /// Comma-separated buffer sizes in samples.
    #[arg(long, default_value = "256")]
    buffer_samples: String,
    /// Also write the table as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    modules: usize,
    #[arg(long, default_value_t = 8)]
    spatial: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Cap of checked entries per parameter tensor (0 = exhaustive).
    #[arg(long, default_value_t = 0)]
    max_per_param: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 30)]
    steps: usize,
    #[arg(long, default_value_t = 10_000)]
    trajectories: usize,
    #[arg(long, default_value_t = 0.2)]
    eta: f64,
    /// Mixture-weight offset controlling the drift (c_0 = 2 * drift0).
    #[arg(long, default_value_t = 0.25)]
    drift0: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn default_out_dir(config_path: &std::path::Path) -> PathBuf {
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) => PathBuf::from(dir).join(stem),
        None => PathBuf::from("runs").join(stem),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out_dir = args.out.unwrap_or_else(|| default_out_dir(&args.config));
    let summary = harness::run(&cfg, &out_dir)?;
    print!("{}", summary.text());
    println!("artifacts: {}", summary.out_dir.display());
    Ok(())
}

fn parse_u64_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad integer '{v}' in list")))
        })
        .collect()
}

fn cmd_compress(args: CompressArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            ExperimentConfig::parse(&text)?
        }
        None => {
            let mut c = desk_config();
            c.width = args.width;
            c.modules = args.modules;
            c.batch_size = args.batch_size;
            c.groups = args.groups;
            c.dataset = dgl::data::DatasetSpec::Cifar10Binary {
                train_paths: vec![],
                test_path: None,
                subset_n: 0,
            };
            c
        }
    };
    let atoms = match &args.atoms {
        Some(list) => parse_u64_list(list)?,
        None => (1..=16).map(|e| 1u64 << e).collect(),
    };
    let buffers = parse_u64_list(&args.buffer_samples)?;
    let report = compress_report(&cfg, &atoms, &buffers, args.alpha)?;
    print!("{}", report.table());
    if let Some(out) = args.out {
        std::fs::write(&out, report.csv()).map_err(|e| Error::io(&out, e))?;
        println!("csv written to {}", out.display());
    }
    Ok(())
}

fn cmd_check_grad(args: CheckGradArgs) -> Result<()> {
    let mut cfg = desk_config();
    cfg.width = args.width;
    cfg.modules = args.modules;
    cfg.seed = args.seed;
    cfg.dataset = dgl::data::DatasetSpec::SyntheticGaussians {
        classes: args.classes,
        channels: args.channels,
        spatial: args.spatial,
        train_n: args.batch.max(2) * 4,
        test_n: 4,
        noise: 1.0,
    };
    let dataset: Dataset<f64> = load_dataset(&cfg.dataset, cfg.seed)?;
    let mut partition = harness::build_partition(&cfg, &dataset)?;
    let (probe_x, probe_y) = dataset.probe_batch(args.batch.max(2));
    let check_cfg = GradCheckCfg {
        eps: args.eps,
        max_per_param: if args.max_per_param == 0 {
            None
        } else {
            Some(args.max_per_param)
        },
        seed: cfg.seed,
    };
    let mut worst: f64 = 0.0;
    let mut x = probe_x;
    for j in 1..=cfg.modules {
        let probe = partition.module_probe(j, x.clone(), probe_y.clone());
        let report = gradient_check(&probe, check_cfg)?;
        println!(
            "module {j}: max relative error {:.3e} over {} of {} parameters",
            report.max_rel_error, report.checked, report.total_params
        );
        worst = worst.max(report.max_rel_error);
        x = partition.forward_module(j, &x, true)?;
    }
    println!("max relative error: {worst:.3e}");
    if worst < 1e-5 {
        println!("gradient check PASS (threshold 1e-5)");
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "gradient check failed: max relative error {worst:.3e} >= 1e-5"
        )))
    }
}

fn cmd_theory(args: TheoryArgs) -> Result<()> {
    let probe = TheoryProbe::new(
        4,
        args.drift0,
        vec![args.eta; args.steps],
        args.trajectories,
        args.seed,
    )?;
    println!(
        "quadratic probe: dim 4, L = {}, G = {}, c_t = {} * 2^-t",
        probe.smoothness(),
        probe.variance_bound(),
        2.0 * args.drift0
    );
    let descent = probe.check_descent();
    for s in &descent.steps {
        println!(
            "t = {:>3}  margin {:>12.6}  (3 s.e. = {:.6})  {}",
            s.t,
            s.mean,
            3.0 * s.std_error,
            if s.holds { "ok" } else { "VIOLATED" }
        );
    }
    let acc = probe.check_accumulation();
    println!(
        "accumulation: lhs {:.4} (s.e. {:.4}) <= rhs {:.4}: {}",
        acc.lhs_mean,
        acc.lhs_std_error,
        acc.rhs,
        if acc.holds { "ok" } else { "VIOLATED" }
    );
    if descent.all_hold && acc.holds {
        println!("theory probe PASS");
        Ok(())
    } else {
        Err(Error::InvalidArgument(
            "theory probe found a violated inequality".into(),
        ))
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::CompressReport(args) => cmd_compress(args),
        Command::CheckGrad(args) => cmd_check_grad(args),
        Command::TheoryProbe(args) => cmd_theory(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
