use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use offload_bench::fixtures::{self, FixtureSpec, Fixtures};
use offload_bench::harness::{
    find_biv, run_cell, run_matrix, write_csv, write_jsonl, write_plot_data, BenchOptions, BivResult,
    Cell, MatrixSpec,
};
use offload_bench::workloads::{
    Board, Fibonacci, ImageCombine, ImagePair, Mandelbrot, NQueens, SpectralNorm, Workload,
    IMAGE_WIDTH,
};
use offload_core::clock::ClockMode;
use offload_core::controller::Policy;
use offload_core::energy::PowerCoefficients;
use offload_core::netem::load_scenarios;
use offload_core::vmpool::PoolConfig;

#[derive(Parser)]
#[command(name = "bench", about = "Run offloading workloads under emulated networks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// wall or deterministic
    #[arg(long, global = true, default_value = "deterministic")]
    clock: ClockMode,
    /// Phone slowdown relative to a reference clone.
    #[arg(long, global = true, default_value_t = 10.0)]
    slowdown: f64,
    /// Fixture directory; built on demand.
    #[arg(long, global = true, default_value = "bench-fixtures")]
    fixtures: PathBuf,
    /// Pool configuration (TOML).
    #[arg(long, global = true)]
    pool: Option<PathBuf>,
    /// Power coefficients (TOML).
    #[arg(long, global = true)]
    coeffs: Option<PathBuf>,
    /// Extra link scenarios (TOML with [[scenario]] tables).
    #[arg(long, global = true)]
    scenarios: Option<PathBuf>,
    /// Use a running offload-server instead of an in-process one.
    #[arg(long, global = true)]
    connect: Option<String>,
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log: tracing::Level,
}

#[derive(Subcommand)]
enum Command {
    /// Run one workload in one scenario and check it against its oracle.
    Run {
        workload: Workload,
        #[arg(long)]
        input: Option<u64>,
        #[arg(long, default_value = "wifi-local")]
        scenario: String,
        #[arg(long, default_value = "execution-time")]
        policy: Policy,
        #[arg(long, default_value_t = 1)]
        servers: u32,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// Write the report as JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Find the smallest input for which offloading pays off.
    Biv {
        workload: Workload,
        /// Scenarios to search; all presets with a link by default.
        #[arg(long, value_delimiter = ',')]
        scenario: Vec<String>,
        #[arg(long, default_value = "execution-time")]
        policy: Policy,
        #[arg(long, default_value_t = 1)]
        from: u64,
        #[arg(long, default_value_t = 30)]
        to: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the workload × scenario × policy × servers matrix.
    Matrix {
        /// Matrix definition (TOML); the full default matrix otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        /// Simulated pause between runs, ms.
        #[arg(long, default_value_t = 30_000.0)]
        gap_ms: f64,
        /// Output directory for report.csv, report.jsonl and report.dat.
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
    },
    /// Generate the virus-scan corpus and image inputs.
    Fixtures {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = FixtureSpec::default().files)]
        files: usize,
        #[arg(long, default_value_t = FixtureSpec::default().total_bytes)]
        bytes: u64,
        #[arg(long, default_value_t = FixtureSpec::default().signatures)]
        signatures: usize,
        #[arg(long, default_value_t = FixtureSpec::default().planted)]
        planted: usize,
        #[arg(long, default_value_t = FixtureSpec::default().seed)]
        seed: u64,
    },
}

fn options(c: &Common) -> anyhow::Result<BenchOptions> {
    let mut opts = BenchOptions {
        clock: c.clock,
        local_slowdown: c.slowdown,
        connect: c.connect.clone(),
        ..BenchOptions::default()
    };
    if !(c.slowdown > 0.0) {
        bail!("slowdown must be positive");
    }
    if let Some(p) = &c.pool {
        opts.pool = PoolConfig::load(p)?;
    }
    if let Some(p) = &c.coeffs {
        opts.coeffs = PowerCoefficients::load(p)?;
    }
    if let Some(p) = &c.scenarios {
        opts.custom_scenarios = load_scenarios(p).map_err(anyhow::Error::msg)?;
    }
    Ok(opts)
}

fn fixtures_for(c: &Common, workloads: impl IntoIterator<Item = Workload>) -> anyhow::Result<Option<Fixtures>> {
    if workloads.into_iter().any(|w| w == Workload::VirusScan) {
        // Whatever is already there wins; `bench fixtures` builds custom sets.
        let fx = Fixtures::open(&c.fixtures)
            .or_else(|_| Fixtures::ensure(&c.fixtures, FixtureSpec::default()))
            .with_context(|| format!("preparing fixtures in {}", c.fixtures.display()))?;
        Ok(Some(fx))
    } else {
        Ok(Fixtures::open(&c.fixtures).ok())
    }
}

fn emit_json(value: &impl serde::Serialize, out: &Option<PathBuf>) -> anyhow::Result<()> {
    match out {
        Some(path) => serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), value)?,
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn biv(workload: Workload, scenario: &offload_core::netem::LinkScenario, policy: Policy, from: u64, to: u64, opts: &BenchOptions) -> anyhow::Result<BivResult> {
    let range = from..=to;
    let n32 = |n: u64| n as u32;
    match workload {
        Workload::Fibonacci => find_biv(&Fibonacci, n32, scenario, policy, range, opts),
        Workload::NQueens => find_biv(&NQueens, |n| Board::new(n as u32), scenario, policy, range, opts),
        Workload::ImageCombine => find_biv(
            &ImageCombine,
            |n| ImagePair::square(IMAGE_WIDTH, n as u32),
            scenario,
            policy,
            range,
            opts,
        ),
        Workload::Mandelbrot => find_biv(&Mandelbrot, n32, scenario, policy, range, opts),
        Workload::SpectralNorm => find_biv(&SpectralNorm, n32, scenario, policy, range, opts),
        Workload::VirusScan => bail!("virusscan has no scalar input to search"),
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let opts = options(&cli.common)?;
    match cli.command {
        Command::Run {
            workload,
            input,
            scenario,
            policy,
            servers,
            runs,
            out,
        } => {
            let fx = fixtures_for(&cli.common, [workload])?;
            let scenario = opts.scenario(&scenario)?;
            let cell = Cell {
                workload,
                input: input.unwrap_or_else(|| workload.default_input()),
                policy,
                servers,
            };
            let report = run_cell(cell, &scenario, &BenchOptions { runs, ..opts }, fx.as_ref());
            emit_json(&report, &out)?;
            if !report.error.is_empty() {
                eprintln!("error: {}", report.error);
            }
            Ok(report.oracle_ok)
        }
        Command::Biv {
            workload,
            scenario,
            policy,
            from,
            to,
            out,
        } => {
            let names = if scenario.is_empty() {
                vec!["wifi-local".into(), "wifi-internet-good".into(), "wifi-internet-hotspot".into(), "3g".into()]
            } else {
                scenario
            };
            let mut results = Vec::new();
            for name in names {
                let s = opts.scenario(&name)?;
                let r = biv(workload, &s, policy, from, to, &opts)?;
                eprintln!(
                    "{workload} {}: BIV {}",
                    r.scenario,
                    r.biv.map_or("none".to_string(), |b| b.to_string())
                );
                results.push(r);
            }
            emit_json(&results, &out)?;
            Ok(true)
        }
        Command::Matrix {
            config,
            runs,
            gap_ms,
            out,
        } => {
            let spec = match config {
                Some(p) => MatrixSpec::load(p)?,
                None => MatrixSpec::default(),
            };
            let fx = fixtures_for(&cli.common, spec.workloads.iter().map(|(w, _)| *w))?;
            let opts = BenchOptions { runs, gap_ms, ..opts };
            let reports = run_matrix(&spec, &opts, fx.as_ref())?;
            std::fs::create_dir_all(&out)?;
            write_csv(&reports, BufWriter::new(File::create(out.join("report.csv"))?))?;
            write_jsonl(&reports, BufWriter::new(File::create(out.join("report.jsonl"))?))?;
            write_plot_data(&reports, BufWriter::new(File::create(out.join("report.dat"))?))?;
            let bad: Vec<_> = reports.iter().filter(|r| !r.oracle_ok).collect();
            for r in &bad {
                eprintln!(
                    "mismatch: {} {} {} {} servers: {}",
                    r.workload, r.scenario, r.policy, r.servers, r.error
                );
            }
            eprintln!("{} cells, {} failed, reports in {}", reports.len(), bad.len(), out.display());
            Ok(bad.is_empty())
        }
        Command::Fixtures {
            out,
            files,
            bytes,
            signatures,
            planted,
            seed,
        } => {
            let spec = FixtureSpec {
                files,
                total_bytes: bytes,
                signatures,
                planted,
                seed,
            };
            let dir = out.unwrap_or(cli.common.fixtures);
            let fx = fixtures::build(&dir, spec)?;
            eprintln!(
                "{} files, {} planted, in {}",
                spec.files,
                fx.manifest().planted,
                dir.display()
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_max_level(cli.common.log)
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
