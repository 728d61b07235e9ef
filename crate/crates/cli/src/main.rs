//! `fedle` — run, compare, sweep and calibrate battery-constrained FL
//! experiments. All artifacts go to the `--out` directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fedle_core::engine::RunMode;
use fedle_core::experiments::{self, CalibrationGrid, CalibrationTargets, StrategyRuns};
use fedle_core::report::{self, ComparisonSet, RoundsTable};
use fedle_core::{parse_config, DatasetKind, ExperimentConfig, ExperimentHistory, Strategy};

const EXIT_VALIDATION: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_CALIBRATION: u8 = 3;

#[derive(Parser)]
#[command(name = "fedle", version, about = "Battery-constrained federated learning simulator")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one strategy for each seed; writes a JSON history and a per-round CSV per seed.
    Run(RunArgs),
    /// Run strategies x seeds; writes histories, an accuracy chart and a rounds table.
    Compare(CompareArgs),
    /// Run FedLE for several cluster counts.
    SweepClusters(SweepArgs),
    /// Grid-search the battery cost scales against lifespan targets.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct Common {
    /// Flat TOML config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,

    /// Worker threads (default: all cores).
    #[arg(long)]
    parallel: Option<usize>,

    /// MNIST training images (IDX); requires --mnist-labels.
    #[arg(long, requires = "mnist_labels", conflicts_with = "synthetic")]
    mnist_images: Option<PathBuf>,

    #[arg(long, requires = "mnist_images")]
    mnist_labels: Option<PathBuf>,

    /// MNIST test images; without them a share of the training set is held out.
    #[arg(long, requires = "mnist_test_labels", requires = "mnist_images")]
    mnist_test_images: Option<PathBuf>,

    #[arg(long, requires = "mnist_test_images")]
    mnist_test_labels: Option<PathBuf>,

    /// Use the synthetic Gaussian-blob dataset.
    #[arg(long)]
    synthetic: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,

    /// Overrides the config's strategy (fedavg_b, fedbo, fedle).
    #[arg(long)]
    strategy: Option<Strategy>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,

    /// Restrict to the given strategies (default: all three).
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<Strategy>,

    /// Low-power client fractions, one table row each (default: the config's).
    #[arg(long, value_delimiter = ',')]
    low_power_fractions: Vec<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,

    /// Cluster counts to try.
    #[arg(long, value_delimiter = ',', default_value = "3,4,6,8")]
    k_values: Vec<usize>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,

    #[arg(long, value_delimiter = ',')]
    r_scales: Vec<f64>,

    #[arg(long, value_delimiter = ',')]
    s_scales: Vec<f64>,

    #[arg(long, value_delimiter = ',')]
    a_scales: Vec<f64>,
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(images) = &common.mnist_images {
        cfg.dataset = DatasetKind::Mnist;
        cfg.mnist_images = Some(images.clone());
        cfg.mnist_labels = common.mnist_labels.clone();
        cfg.mnist_test_images = common.mnist_test_images.clone();
        cfg.mnist_test_labels = common.mnist_test_labels.clone();
    } else if common.synthetic {
        cfg.dataset = DatasetKind::Synthetic;
    }
    cfg.validate()?;
    if common.seeds.is_empty() {
        bail!(fedle_core::Error::InvalidConfig("--seeds: at least one seed required".into()));
    }
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn history_name(h: &ExperimentHistory, seed: u64, tag: &str) -> String {
    format!("history_{}{tag}_seed{seed}.json", h.config.strategy.name())
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.strategy {
        cfg.strategy = s;
    }
    let out = &args.common.out;
    prepare_out(out)?;
    for &seed in &args.common.seeds {
        let run_cfg = cfg.clone().with_seed(seed);
        let h = fedle_core::run_experiment(&run_cfg)?;
        log::info!(
            "{} seed {seed}: {} rounds ({:?}), final accuracy {:.4}",
            cfg.strategy,
            h.rounds_lasted,
            h.stop_reason,
            h.final_accuracy
        );
        let strategy = cfg.strategy.name();
        write(out, &history_name(&h, seed, ""), &h.to_json())?;
        write(out, &format!("rounds_{strategy}_seed{seed}.csv"), &h.rounds_csv())?;
        if let Some(sim) = &h.similarity {
            write(out, &format!("similarity_seed{seed}.csv"), &sim.matrix.to_csv())?;
            write(out, &format!("similarity_seed{seed}.svg"), &report::render_similarity_heatmap(&sim.matrix))?;
            write(out, &format!("clusters_seed{seed}.svg"), &report::render_clusters(&sim.matrix, &sim.clusters)?)?;
            if let Some(fin) = &sim.final_matrix {
                write(out, &format!("similarity_final_seed{seed}.svg"), &report::render_similarity_heatmap(fin))?;
            }
        }
        println!(
            "{strategy} seed {seed}: rounds_lasted={} final_accuracy={:.4}",
            h.rounds_lasted, h.final_accuracy
        );
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.common)?;
    let strategies = if args.strategy.is_empty() {
        Strategy::ALL.to_vec()
    } else {
        args.strategy.clone()
    };
    let fractions = if args.low_power_fractions.is_empty() {
        vec![cfg.low_power_fraction]
    } else {
        args.low_power_fractions.clone()
    };
    let out = &args.common.out;
    prepare_out(out)?;
    let seeds = &args.common.seeds;
    let tagged = fractions.len() > 1;
    let mut all: Vec<ExperimentHistory> = Vec::new();
    let mut chart_runs: Option<Vec<StrategyRuns>> = None;
    for &f in &fractions {
        let mut fcfg = cfg.clone();
        fcfg.low_power_fraction = f;
        fcfg.validate()?;
        let runs = experiments::compare(&fcfg, &strategies, seeds, RunMode::Full)?;
        let tag = if tagged {
            format!("_lp{}", (f * 100.0).round())
        } else {
            String::new()
        };
        for r in &runs {
            for (h, &seed) in r.histories.iter().zip(seeds) {
                write(out, &history_name(h, seed, &tag), &h.to_json())?;
            }
            println!(
                "low-power {f}: {} median rounds {} mean final accuracy {:.4}",
                r.strategy,
                r.median_rounds(),
                r.mean_final_accuracy()
            );
        }
        all.extend(runs.iter().flat_map(|r| r.histories.iter().cloned()));
        if (f - cfg.low_power_fraction).abs() < 1e-12 || chart_runs.is_none() {
            chart_runs = Some(runs);
        }
    }
    let runs = chart_runs.expect("at least one fraction");
    let lp = runs[0].histories[0].config.low_power_fraction;
    let set = ComparisonSet::from_runs(
        format!("Test accuracy, {:.0}% low-power clients", lp * 100.0),
        &runs,
    )?;
    write(out, "accuracy.svg", &report::render_accuracy_chart(&set))?;
    let table = RoundsTable::from_histories(&all)?;
    write(out, "rounds_table.txt", &table.to_text())?;
    write(out, "rounds_table.csv", &table.to_csv())?;
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.common)?;
    let out = &args.common.out;
    prepare_out(out)?;
    let seeds = &args.common.seeds;
    let groups = experiments::sweep_clusters(&cfg, &args.k_values, seeds)?;
    let mut summary = String::from("k,median_rounds,mean_final_accuracy\n");
    for g in &groups {
        for (h, &seed) in g.runs.histories.iter().zip(seeds) {
            write(out, &history_name(h, seed, &format!("_k{}", g.k)), &h.to_json())?;
        }
        summary += &format!(
            "{},{},{:.6}\n",
            g.k,
            g.runs.median_rounds(),
            g.runs.mean_final_accuracy()
        );
    }
    let set = ComparisonSet::from_sweep("FedLE test accuracy by cluster count", &groups)?;
    write(out, "accuracy_k_sweep.svg", &report::render_accuracy_chart(&set))?;
    write(out, "k_summary.csv", &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_calibrate(args: &CalibrateArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.common)?;
    let defaults = CalibrationGrid::default();
    let pick = |given: &Vec<f64>, fallback: Vec<f64>| {
        if given.is_empty() {
            fallback
        } else {
            given.clone()
        }
    };
    let grid = CalibrationGrid {
        r_scale: pick(&args.r_scales, defaults.r_scale),
        s_scale: pick(&args.s_scales, defaults.s_scale),
        a_scale: pick(&args.a_scales, defaults.a_scale),
    };
    let out = &args.common.out;
    prepare_out(out)?;
    let report = experiments::calibrate(&cfg, &grid, &args.common.seeds, CalibrationTargets::default())?;
    write(out, "calibration.toml", &report.to_toml())?;
    write(out, "calibration_report.json", &report.to_json())?;
    print!("{}", report.to_toml());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<fedle_core::Error>() {
            return match e {
                fedle_core::Error::Io { .. } => EXIT_IO,
                fedle_core::Error::Calibration(_) => EXIT_CALIBRATION,
                _ => EXIT_VALIDATION,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_VALIDATION
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    let parallel = match &cli.command {
        Command::Run(a) => a.common.parallel,
        Command::Compare(a) => a.common.parallel,
        Command::SweepClusters(a) => a.common.parallel,
        Command::Calibrate(a) => a.common.parallel,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = parallel {
        pool = pool.num_threads(n.max(1));
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };

    let result = pool.install(|| match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::SweepClusters(a) => cmd_sweep(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
