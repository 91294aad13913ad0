use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use lowmem_core::graph::parse_arch;
use lowmem_core::planner::config::{training_config, KeyValues, PROFILE_KEYS};
use lowmem_core::planner::train::{train, TrainConfig};
use lowmem_core::planner::{evaluate_sweep, frontier_csv, SweepSpec};
use lowmem_core::profiler::{csv_row, total_report, CSV_HEADER};
use lowmem_core::verify;
use lowmem_core::ComputationGraph;

/// Training-memory planner: cost model, Pareto sweeps, desk-scale training and the acceptance suite.
#[derive(Debug, Parser)]
#[command(name = "lowmem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Memory and FLOP report for one architecture and configuration.
    Profile {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Directory receiving profile.json and profile.csv; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Evaluates a sweep and flags the (memory, FLOPs) Pareto frontier.
    Pareto {
        #[arg(long)]
        sweep: PathBuf,
        /// Overrides the sweep's `arch` key.
        #[arg(long)]
        arch: Option<PathBuf>,
        /// Output file; falls back to the sweep's `out` key, then stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Trains on the bundled synthetic task and emits a JSON-lines metrics log.
    Train {
        #[arg(long)]
        arch: PathBuf,
        /// Training config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory receiving metrics.jsonl and summary.json; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Runs the acceptance suite; exits nonzero if any check fails.
    Verify {
        /// Criterion ids to run, comma separated; all when absent.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u32>,
    },
}

fn read(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {what} file {}", path.display()))
}

fn load_arch(path: &Path) -> Result<ComputationGraph> {
    let text = read(path, "architecture")?;
    parse_arch(&text).with_context(|| format!("invalid architecture file {}", path.display()))
}

fn arch_label(path: &Path, graph: &ComputationGraph) -> String {
    if graph.name.is_empty() {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    } else {
        graph.name.clone()
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn profile(arch: &Path, config: &Path, out: Option<&Path>, format: Format) -> Result<()> {
    let graph = load_arch(arch)?;
    let kv = KeyValues::parse(&read(config, "config")?).with_context(|| format!("in {}", config.display()))?;
    kv.expect_only(&PROFILE_KEYS)?;
    let cfg = training_config(&kv)?;
    let (memory, flops) = total_report(&graph, &cfg)?;
    let label = arch_label(arch, &graph);
    let report = json!({
        "arch": label,
        "config": cfg,
        "memory": memory,
        "total_mb": memory.total_mb(),
        "flops": flops,
    });
    let json_text = format!("{}\n", serde_json::to_string_pretty(&report)?);
    let csv_text = format!("{CSV_HEADER}\n{}\n", csv_row(&label, &cfg, &memory, &flops));
    info!(
        "{label}: {:.2} MB, flops ratio {:.4}",
        memory.total_mb(),
        flops.ratio_to_baseline
    );
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            write_or_print(Some(&dir.join("profile.json")), &json_text)?;
            write_or_print(Some(&dir.join("profile.csv")), &csv_text)
        }
        None => write_or_print(None, if format == Format::Json { &json_text } else { &csv_text }),
    }
}

fn pareto(sweep: &Path, arch: Option<&Path>, out: Option<&Path>, format: Format) -> Result<()> {
    let spec = SweepSpec::parse(&read(sweep, "sweep")?).with_context(|| format!("in {}", sweep.display()))?;
    let base = sweep.parent().unwrap_or(Path::new("."));
    let arch_path = match arch {
        Some(p) => p.to_path_buf(),
        None if !spec.arch.is_empty() => base.join(&spec.arch),
        None => bail!("no architecture: pass --arch or set `arch` in {}", sweep.display()),
    };
    let graph = load_arch(&arch_path)?;
    let points = evaluate_sweep(&graph, &spec)?;
    info!(
        "{} configurations, {} on the frontier",
        points.len(),
        points.iter().filter(|p| p.on_frontier).count()
    );
    let text = match format {
        Format::Csv => frontier_csv(&arch_label(&arch_path, &graph), &points),
        Format::Json => format!("{}\n", serde_json::to_string_pretty(&points)?),
    };
    let target = out
        .map(Path::to_path_buf)
        .or_else(|| spec.out.as_ref().map(|o| base.join(o)));
    write_or_print(target.as_deref(), &text)
}

fn run_train(arch: &Path, config: Option<&Path>, out: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let graph = load_arch(arch)?;
    let mut cfg = match config {
        Some(p) => TrainConfig::parse(&read(p, "training config")?).with_context(|| format!("in {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let outcome = train(&graph, &cfg)?;
    let summary = format!("{}\n", serde_json::to_string_pretty(&outcome.summary)?);
    info!(
        "final accuracy {:.3}, test loss {:.4} -> {:.4}",
        outcome.summary.final_accuracy, outcome.summary.initial_test_loss, outcome.summary.final_test_loss
    );
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            write_or_print(Some(&dir.join("metrics.jsonl")), &outcome.jsonl())?;
            write_or_print(Some(&dir.join("summary.json")), &summary)
        }
        None => write_or_print(None, &outcome.jsonl()),
    }
}

fn run_verify(only: &[u32]) -> Result<bool> {
    let ids: Vec<u32> = if only.is_empty() {
        verify::CRITERIA.iter().map(|c| c.0).collect()
    } else {
        only.to_vec()
    };
    let mut ok = true;
    for id in ids {
        let Some(r) = verify::run(id) else {
            bail!("no acceptance criterion {id}");
        };
        println!("{}", r.line());
        ok &= r.passed;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Profile {
            arch,
            config,
            out,
            format,
        } => profile(arch, config, out.as_deref(), *format).map(|_| true),
        Command::Pareto {
            sweep,
            arch,
            out,
            format,
        } => pareto(sweep, arch.as_deref(), out.as_deref(), *format).map(|_| true),
        Command::Train {
            arch,
            config,
            out,
            seed,
        } => run_train(arch, config.as_deref(), out.as_deref(), *seed).map(|_| true),
        Command::Verify { only } => run_verify(only),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: acceptance checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
