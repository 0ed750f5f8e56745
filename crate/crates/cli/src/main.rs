use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowguide_core::datastore::{inspect, DatasetHandle};
use flowguide_core::pipeline::{mean_success, retrieval_tag, Pipeline, PipelineConfig, StageReport};
use flowguide_core::policy::TrainMode;
use flowguide_core::retrieval::{Baseline, RetrievalConfig, Strategy};
use flowguide_core::{Error, Result};

#[derive(Parser)]
#[command(name = "flowguide", version, about = "Flow-guided data retrieval for few-shot imitation on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Args, Default)]
struct Overrides {
    /// TOML config file; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root (default `runs`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed; repeat for several.
    #[arg(long, global = true)]
    seed: Vec<u64>,
    /// Retrieval fraction; repeat to sweep.
    #[arg(long, global = true)]
    delta: Vec<f64>,
    /// Training mode; repeat to sweep.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Vec<TrainMode>,
    #[arg(long, global = true)]
    strategy: Option<StrategyArg>,
    #[arg(long, global = true)]
    knn_k: Option<usize>,
    #[arg(long, global = true)]
    baseline: Option<BaselineArg>,
    /// Evaluation rollouts per policy.
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Score only a seeded subsample of this many prior frames.
    #[arg(long, global = true)]
    candidate_cap: Option<usize>,
    /// Rebuild stale stages instead of refusing.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Top,
    Knn,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Flow,
    Proprio,
    Savae,
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate the target and prior datasets.
    GenData {
        /// Also write a few frames as PPM images under data/preview.
        #[arg(long)]
        preview: bool,
    },
    /// Dense optical flow for every frame of both datasets.
    ComputeFlow,
    /// Train the flow VAE and embed both datasets.
    TrainVae,
    /// Score prior frames and select segments.
    Retrieve,
    /// Train policies for the selected modes.
    TrainPolicy,
    /// Roll out trained policies on the benchmark.
    Eval,
    /// Stage histograms and KNN coverage for retrieval results.
    Analyze,
    /// Every stage for every seed, δ and mode, then the summary table.
    RunAll,
    /// Print the effective config as TOML.
    ShowConfig,
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Print a dataset's manifest summary and label histogram.
    Inspect { dir: PathBuf },
}

fn effective_config(o: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = match &o.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    if !o.seed.is_empty() {
        cfg.seeds = o.seed.clone();
    }
    if !o.delta.is_empty() {
        cfg.sweep.deltas = o.delta.clone();
        cfg.retrieval.delta = o.delta[0];
    }
    if !o.mode.is_empty() {
        cfg.sweep.modes = o.mode.clone();
    }
    if let Some(s) = o.strategy {
        cfg.retrieval.strategy = match s {
            StrategyArg::Top => Strategy::TopPercent,
            StrategyArg::Knn => Strategy::Knn,
        };
    }
    if let Some(k) = o.knn_k {
        cfg.retrieval.knn_k = k;
    }
    if let Some(b) = o.baseline {
        cfg.retrieval.baseline = match b {
            BaselineArg::Flow => Baseline::FlowLatent,
            BaselineArg::Proprio => Baseline::Proprio,
            BaselineArg::Savae => Baseline::StateActionVae,
        };
    }
    if let Some(n) = o.episodes {
        cfg.eval.episodes = n;
    }
    if o.candidate_cap.is_some() {
        cfg.retrieval.candidate_cap = o.candidate_cap;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_reports(reports: &[StageReport]) {
    for r in reports {
        if r.cached {
            println!("seed {:<3} {:<13} cache hit    {}", r.seed, r.stage, r.dir.display());
        } else {
            println!("seed {:<3} {:<13} built {:>6.1}s {}", r.seed, r.stage, r.seconds, r.dir.display());
        }
    }
}

fn for_each_retrieval(p: &Pipeline, mut f: impl FnMut(u64, &RetrievalConfig) -> Result<()>) -> Result<()> {
    for &seed in &p.cfg.seeds {
        for r in p.cfg.retrieval_sweep(seed) {
            f(seed, &r)?;
        }
    }
    Ok(())
}

/// Each selected mode once per seed; FLOW_RETRIEVAL once per retrieval config.
fn for_each_policy(p: &Pipeline, mut f: impl FnMut(u64, TrainMode, &RetrievalConfig) -> Result<()>) -> Result<()> {
    for &seed in &p.cfg.seeds {
        let sweep = p.cfg.retrieval_sweep(seed);
        for &mode in &p.cfg.sweep.modes {
            let rs = if mode == TrainMode::FlowRetrieval { &sweep[..] } else { &sweep[..1] };
            for r in rs {
                f(seed, mode, r)?;
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Dataset {
        command: DatasetCommand::Inspect { dir },
    } = &cli.command
    {
        print!("{}", inspect(&DatasetHandle::open(dir)?)?);
        return Ok(());
    }
    let cfg = effective_config(&cli.opts)?;
    if let Some(n) = cli.opts.jobs {
        if n == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut p = Pipeline::new(cfg)?;
    p.force = cli.opts.force;
    let seeds = p.cfg.seeds.clone();
    let result = match cli.command {
        Command::GenData { preview } => seeds.iter().try_for_each(|&s| {
            p.gen_data(s, true)?;
            if preview {
                for path in p.preview(s, 4)? {
                    println!("preview {}", path.display());
                }
            }
            Ok(())
        }),
        Command::ComputeFlow => seeds.iter().try_for_each(|&s| p.compute_flow(s, true).map(drop)),
        Command::TrainVae => seeds.iter().try_for_each(|&s| p.train_vae(s, true).map(drop)),
        Command::Retrieve => for_each_retrieval(&p, |s, r| {
            p.retrieve(s, r, true)?;
            let res = p.retrieval_result(s, r)?;
            println!(
                "seed {s} {}: {} of {} prior frames retrieved{}",
                retrieval_tag(r),
                res.len(),
                res.n,
                res.eta.map(|e| format!(", eta {e:.4}")).unwrap_or_default()
            );
            for w in &res.warnings {
                println!("  warning: {w}");
            }
            Ok(())
        }),
        Command::Analyze => for_each_retrieval(&p, |s, r| {
            p.analyze(s, r, true)?;
            let a = p.analysis(s, r)?;
            println!(
                "seed {s} {}: adversarial share {:.3} retrieved vs {:.3} prior; knn covers {}/{} target frames, {}/10 bins (top-δ at matched volume: {}/10)",
                a.retrieval,
                a.retrieved_share["adversarial"],
                a.prior_share["adversarial"],
                a.coverage.target_frames_covered,
                a.coverage.target_frames,
                a.coverage.knn_nonzero_bins,
                a.coverage.top_nonzero_bins
            );
            println!("  histogram: {}", p.analysis_dir(s, r).join("hist.svg").display());
            Ok(())
        }),
        Command::TrainPolicy => for_each_policy(&p, |s, m, r| p.train_policy(s, m, r, true).map(drop)),
        Command::Eval => for_each_policy(&p, |s, m, r| {
            p.eval(s, m, r, true)?;
            let rec = p.eval_record(s, m, r)?;
            println!(
                "seed {s} {} {}: success {:.2} ({}/{})",
                m.name(),
                rec.retrieval,
                rec.report.success_rate,
                rec.report.successes,
                rec.report.episodes
            );
            Ok(())
        }),
        Command::RunAll => {
            let rows = p.run_all()?;
            print_reports(&p.take_reports());
            println!();
            println!("{:<16} {:<22} {:>6} {:>8}", "mode", "retrieval", "seeds", "success");
            for (mode, tag, mean, n) in mean_success(&rows) {
                println!("{:<16} {:<22} {:>6} {:>8.3}", mode.name(), tag, n, mean);
            }
            println!("summary: {}", p.cfg.out_dir.join("summary.csv").display());
            return Ok(());
        }
        Command::ShowConfig => {
            print!("{}", p.cfg.to_toml_string());
            return Ok(());
        }
        Command::Dataset { .. } => unreachable!("handled above"),
    };
    print_reports(&p.take_reports());
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
