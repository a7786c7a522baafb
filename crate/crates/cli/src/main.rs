use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use edgraph::bench::{growth_ratios, run_bench, BenchConfig, BenchRow, GrowthRatios};
use edgraph::deform::{load_handles, run_deform, DeformConfig, DeformSummary};
use edgraph::energy::Term;
use edgraph::gradcheck::{check_gradients, GradCheckReport};
use edgraph::mesh::{load_obj, save_obj};
use edgraph::scenario::{generate_scenario, run_sim, FrameMetrics, RunSummary, ScenarioConfig};
use edgraph::solver::Strategy;

#[derive(Parser)]
#[command(
    name = "edgraph",
    version,
    about = "Embedded deformation graph solvers, simulations and benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Deform a mesh so that handle vertices reach their targets.
    Deform {
        #[arg(long)]
        mesh: PathBuf,
        /// Text file of `vertex_id tx ty tz` lines.
        #[arg(long)]
        handles: PathBuf,
        #[arg(long, default_value = "batch")]
        solver: Strategy,
        /// Also solve with this strategy and report the per-vertex difference.
        #[arg(long)]
        compare: Option<Strategy>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Track a synthetic growing-map sequence frame by frame.
    SlamSim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "batch")]
        solver: Strategy,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of runs; metric columns repeat exactly, timings vary.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Time all solvers as the graph grows around a fixed observed patch.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the repetition count in the config file.
        #[arg(long)]
        repeat: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare analytic Jacobians with central finite differences.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Test hook: damage one term's Jacobian.
        #[arg(long, hide = true)]
        corrupt: Option<TermArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TermArg {
    Rot,
    Reg,
    Data,
}

impl From<TermArg> for Term {
    fn from(t: TermArg) -> Self {
        match t {
            TermArg::Rot => Term::Rot,
            TermArg::Reg => Term::Reg,
            TermArg::Data => Term::Data,
        }
    }
}

/// Build and timing context recorded next to every artifact.
#[derive(Debug, Serialize)]
struct Environment {
    version: &'static str,
    profile: &'static str,
    target: String,
    clock: &'static str,
    timing_scope: &'static str,
}

fn environment() -> Environment {
    Environment {
        version: env!("CARGO_PKG_VERSION"),
        profile: if cfg!(debug_assertions) {
            "debug"
        } else {
            "release"
        },
        target: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
        clock: "std::time::Instant (monotonic)",
        timing_scope: "solver calls only; scenario generation and file I/O excluded",
    }
}

#[derive(Serialize)]
struct Record<'a, T: Serialize> {
    run_id: &'a str,
    command: &'a str,
    solver: Option<Strategy>,
    config: &'a str,
    environment: Environment,
    result: T,
}

fn run_id(command: &str, config: &str, solver: Option<Strategy>) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0]);
    h.update(solver.map_or("", |s| s.name()).as_bytes());
    h.update([0]);
    h.update(config.as_bytes());
    hex::encode(&h.finalize()[..8])
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Writes `rows` with the run id (and any extra leading columns) prepended.
fn write_csv<T: Serialize>(path: &Path, lead: &[&str], rows: &[(Vec<String>, T)]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    if let Some((_, first)) = rows.first() {
        let mut header: Vec<String> = lead.iter().map(|s| s.to_string()).collect();
        header.extend(field_names(first)?);
        w.write_record(&header)?;
    }
    for (prefix, row) in rows {
        w.serialize((prefix, row))?;
    }
    w.flush()?;
    Ok(())
}

fn field_names<T: Serialize>(sample: &T) -> Result<Vec<String>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(sample)?;
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(bytes.as_slice());
    let header = r.records().next().context("empty header")??;
    Ok(header.iter().map(str::to_string).collect())
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn cmd_deform(
    mesh: &Path,
    handles: &Path,
    solver: Strategy,
    compare: Option<Strategy>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = match config {
        Some(p) => DeformConfig::load(p)?,
        None => DeformConfig::default(),
    };
    let input = load_obj(mesh)?;
    let handles = load_handles(handles)?;
    let result = run_deform(&input, &handles, solver, compare, &cfg)?;
    prepare_out(out)?;
    let snapshot = cfg.to_toml();
    let id = run_id("deform", &snapshot, Some(solver));
    save_obj(&result.mesh, out.join("deformed.obj"))?;
    write_text(&out.join("config.toml"), &snapshot)?;
    let record: Record<&DeformSummary> = Record {
        run_id: &id,
        command: "deform",
        solver: Some(solver),
        config: &snapshot,
        environment: environment(),
        result: &result.summary,
    };
    write_json(&out.join("summary.json"), &record)?;
    let s = &result.summary;
    println!(
        "run {id}: {} nodes, energy {:.6e} -> {:.6e}, max handle error {:.3e}",
        s.nodes, s.initial_energy.total, s.energy.total, s.max_handle_error
    );
    if let Some(c) = &s.comparison {
        println!(
            "{} vs {}: max vertex difference {:.3e}",
            solver, c.strategy, c.max_vertex_difference
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct SimResult {
    repeats: Vec<RunSummary>,
}

fn cmd_slam_sim(
    config: &Path,
    solver: Strategy,
    seed: Option<u64>,
    repeat: usize,
    out: &Path,
) -> Result<()> {
    if repeat == 0 {
        bail!("--repeat must be at least 1");
    }
    let mut cfg = ScenarioConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let snapshot = cfg.to_toml();
    let id = run_id("slam-sim", &snapshot, Some(solver));
    let scenario = generate_scenario(&cfg)?;
    let mut rows: Vec<(Vec<String>, FrameMetrics)> = Vec::new();
    let mut summaries = Vec::new();
    let mut last = None;
    for r in 0..repeat {
        let run = run_sim(&scenario, solver)?;
        for f in &run.metrics.frames {
            rows.push((
                vec![id.clone(), solver.name().to_string(), r.to_string()],
                f.clone(),
            ));
        }
        summaries.push(run.metrics.summary.clone());
        last = Some(run);
    }
    let run = last.expect("repeat >= 1");
    prepare_out(out)?;
    write_text(&out.join("config.toml"), &snapshot)?;
    write_csv(
        &out.join("metrics.csv"),
        &["run_id", "solver", "repeat"],
        &rows,
    )?;
    save_obj(&run.deformed_mesh(&scenario)?, out.join("final_model.obj"))?;
    let record = Record {
        run_id: &id,
        command: "slam-sim",
        solver: Some(solver),
        config: &snapshot,
        environment: environment(),
        result: SimResult { repeats: summaries },
    };
    write_json(&out.join("summary.json"), &record)?;
    let s = &run.metrics.summary;
    println!(
        "run {id}: {} frames, mean rmse {:.6e} ({:.3e} of bbox diagonal), {} failed frames, {:.1} ms solving",
        s.frames,
        s.mean_rmse,
        s.mean_rmse / s.bbox_diagonal,
        s.failed_frames,
        s.total_solve_ms
    );
    Ok(())
}

#[derive(Serialize)]
struct BenchResult {
    rows: Vec<BenchRow>,
    ratios: Option<GrowthRatios>,
}

fn cmd_bench(config: &Path, seed: Option<u64>, repeat: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg = BenchConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = repeat {
        cfg.repetitions = r;
    }
    cfg.validate()?;
    let snapshot = cfg.to_toml();
    let id = run_id("bench", &snapshot, None);
    let rows = run_bench(&cfg)?;
    let ratios = growth_ratios(&rows);
    prepare_out(out)?;
    write_text(&out.join("config.toml"), &snapshot)?;
    let tagged: Vec<(Vec<String>, &BenchRow)> =
        rows.iter().map(|r| (vec![id.clone()], r)).collect();
    write_csv(&out.join("bench.csv"), &["run_id"], &tagged)?;
    for r in &rows {
        println!(
            "x{:<3} nodes {:>5} pr {:>4} {:<13} total {:>10.3} ms  level1 {:>9.3} ms",
            r.scale,
            r.total_nodes,
            r.pr_nodes,
            r.solver.name(),
            r.total_ms,
            r.level1_ms
        );
    }
    if let Some(g) = &ratios {
        println!(
            "growth over {:.1}x nodes: batch {:.2}x, marginalized {:.2}x, decoupled {:.2}x, decoupled level 1 {:.2}x",
            g.node_ratio, g.batch_total, g.marginalized_total, g.decoupled_total, g.decoupled_level1
        );
    }
    let record = Record {
        run_id: &id,
        command: "bench",
        solver: None,
        config: &snapshot,
        environment: environment(),
        result: BenchResult { rows, ratios },
    };
    write_json(&out.join("summary.json"), &record)?;
    Ok(())
}

fn cmd_check_grad(
    seed: u64,
    instances: usize,
    out: Option<&Path>,
    corrupt: Option<TermArg>,
) -> Result<bool> {
    let report: GradCheckReport = check_gradients(seed, instances, corrupt.map(Term::from));
    for t in &report.terms {
        println!(
            "{:<5} max error {:.3e}  {}",
            t.term.name(),
            t.max_error,
            if t.passed { "ok" } else { "FAILED" }
        );
    }
    if let Some(dir) = out {
        prepare_out(dir)?;
        write_json(&dir.join("check_grad.json"), &report)?;
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Deform {
            mesh,
            handles,
            solver,
            compare,
            config,
            out,
        } => cmd_deform(mesh, handles, *solver, *compare, config.as_deref(), out).map(|_| true),
        Command::SlamSim {
            config,
            solver,
            seed,
            repeat,
            out,
        } => cmd_slam_sim(config, *solver, *seed, *repeat, out).map(|_| true),
        Command::Bench {
            config,
            seed,
            repeat,
            out,
        } => cmd_bench(config, *seed, *repeat, out).map(|_| true),
        Command::CheckGrad {
            seed,
            instances,
            out,
            corrupt,
        } => cmd_check_grad(*seed, *instances, out.as_deref(), *corrupt),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
