use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use powertrap::covariance::{Ar1Case, ExampleSpec};
use powertrap::invariant::TestKind;
use powertrap::io::load_matrix;
use powertrap::montecarlo::{Counterexample, FactorKind, NoiseSpec, SimConfig, EX2_DEFAULT_GAMMA};
use powertrap::report::{run, run_reproduce, AnalysisRequest, Command, ModelSource, Outcome, Threshold};

/// Limiting power and zero-power-trap analysis for invariant tests of
/// covariance hypotheses.
#[derive(Parser)]
#[command(name = "powertrap", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full report: assumptions, limit, alpha*, distinguishability, optional simulation.
    Analyze(Common),
    /// Limiting power classification only.
    Limit(Common),
    /// Zero-power-trap threshold alpha*.
    AlphaStar(Common),
    /// Monte Carlo power curve.
    Simulate(Common),
    /// Indistinguishability of null and alternative.
    Distinguish(Common),
    /// Reproduce a counterexample family.
    Reproduce(Reproduce),
}

#[derive(Clone, Copy, ValueEnum)]
enum TestArg {
    CliffOrd,
    Poi,
    Lbi,
    Custom,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExampleArg {
    Ex1,
    Ex2,
    Stretch,
}

#[derive(Clone, Copy, ValueEnum)]
enum FactorArg {
    SymmetricRoot,
    SemInverse,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).multiple(false)))]
struct Common {
    /// Spatial weights matrix (CSV or Matrix Market .mtx).
    #[arg(long, value_name = "FILE", group = "source")]
    sem: Option<PathBuf>,
    /// AR(1) correlation of size N; append ":II" for the alternating case.
    #[arg(long, value_name = "N[:II]", group = "source")]
    ar1: Option<String>,
    /// Built-in example family.
    #[arg(long, value_enum, group = "source")]
    example: Option<ExampleArg>,
    /// Exponent of the rotating direction for --example ex2.
    #[arg(long, default_value_t = EX2_DEFAULT_GAMMA)]
    gamma: f64,
    /// Design matrix X (n x k).
    #[arg(long, value_name = "FILE")]
    design: Option<PathBuf>,
    /// Number of regressors; only 0 is accepted without --design.
    #[arg(long)]
    k: Option<usize>,
    /// Test statistic; defaults to cliff-ord for --sem and lbi otherwise.
    #[arg(long, value_enum)]
    test: Option<TestArg>,
    /// Matrix B for --test custom, (n-k) x (n-k).
    #[arg(long, value_name = "FILE")]
    b: Option<PathBuf>,
    /// Alternative for the point-optimal test.
    #[arg(long)]
    rho_bar: Option<f64>,
    /// Critical value, or "te" for kappa = T_B(e).
    #[arg(long, conflicts_with = "alpha")]
    kappa: Option<String>,
    /// Gaussian null size used to pick kappa.
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated rho grid for the power curve.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Comma-separated rho grid for the limit checks; must end near a.
    #[arg(long, value_delimiter = ',')]
    limit_grid: Option<Vec<f64>>,
    /// Monte Carlo replications per grid point.
    #[arg(long)]
    reps: Option<u64>,
    #[arg(long, default_value_t = 20_240_601)]
    seed: u64,
    /// gaussian, t:<nu>, or mixture:<s>@<p>,...
    #[arg(long, default_value = "gaussian")]
    noise: String,
    #[arg(long, value_enum, default_value = "symmetric-root")]
    factor: FactorArg,
    /// Output directory for report.json and curve CSVs; stdout when absent.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Reproduce {
    #[arg(value_enum)]
    which: ReproduceArg,
    #[arg(long, default_value_t = EX2_DEFAULT_GAMMA)]
    gamma: f64,
    /// Dimension for ex1.
    #[arg(long, default_value_t = 3)]
    n: usize,
    /// Null size of the ex1 cap region.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 200_000)]
    reps: u64,
    #[arg(long, default_value_t = 20_240_601)]
    seed: u64,
    #[arg(long, default_value = "gaussian")]
    noise: String,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReproduceArg {
    Ex1,
    Ex2,
}

fn load(path: &Path) -> Result<nalgebra::DMatrix<f64>> {
    load_matrix(path, None).with_context(|| format!("reading {}", path.display()))
}

fn parse_ar1(s: &str) -> Result<(usize, Ar1Case)> {
    let (n, case) = match s.split_once(':') {
        Some((n, "I")) => (n, Ar1Case::I),
        Some((n, "II")) => (n, Ar1Case::II),
        Some(_) => bail!("--ar1 expects N, N:I or N:II"),
        None => (s, Ar1Case::I),
    };
    Ok((n.parse().context("--ar1 size")?, case))
}

fn sim_config(c: &Common, reps: u64) -> Result<SimConfig> {
    Ok(SimConfig {
        reps,
        seed: c.seed,
        noise: c.noise.parse::<NoiseSpec>()?,
        factor: match c.factor {
            FactorArg::SymmetricRoot => FactorKind::SymmetricRoot,
            FactorArg::SemInverse => FactorKind::SemInverse,
        },
        grid: c.grid.clone().unwrap_or_default(),
        ..SimConfig::default()
    })
}

fn request(c: &Common, simulate: bool) -> Result<AnalysisRequest> {
    let model = if let Some(p) = &c.sem {
        ModelSource::Sem(load(p)?)
    } else if let Some(s) = &c.ar1 {
        let (n, case) = parse_ar1(s)?;
        ModelSource::Ar1 { n, case }
    } else {
        ModelSource::Example(match c.example.expect("source group is required") {
            ExampleArg::Ex1 => ExampleSpec::Ex1 {
                e: DVector::from_element(3, 1.0),
            },
            ExampleArg::Ex2 => ExampleSpec::Ex2 { gamma: c.gamma },
            ExampleArg::Stretch => ExampleSpec::Stretch,
        })
    };
    let design = match (&c.design, c.k) {
        (Some(p), k) => {
            let x = load(p)?;
            if let Some(k) = k.filter(|k| *k != x.ncols()) {
                bail!("--k {k} does not match the {} columns of {}", x.ncols(), p.display());
            }
            Some(x)
        }
        (None, None) | (None, Some(0)) => None,
        (None, Some(k)) => bail!("--k {k} needs --design"),
    };
    let kind = c.test.unwrap_or(if c.sem.is_some() { TestArg::CliffOrd } else { TestArg::Lbi });
    let test = match kind {
        TestArg::CliffOrd => TestKind::CliffOrd,
        TestArg::Lbi => TestKind::LocallyBest,
        TestArg::Poi => TestKind::PointOptimal {
            rho_bar: c.rho_bar.ok_or_else(|| anyhow!("--test poi needs --rho-bar"))?,
        },
        TestArg::Custom => {
            let p = c.b.as_ref().ok_or_else(|| anyhow!("--test custom needs --b"))?;
            TestKind::Custom(load(p)?)
        }
    };
    let threshold = match (&c.kappa, c.alpha) {
        (Some(k), _) if k == "te" => Threshold::AtE,
        (Some(k), _) => Threshold::Kappa(k.parse().context("--kappa must be a number or 'te'")?),
        (None, Some(a)) => Threshold::Alpha(a),
        (None, None) => Threshold::Alpha(0.05),
    };
    let mut req = AnalysisRequest::new(model, test, threshold);
    req.design = design;
    req.grid = c.limit_grid.clone();
    if simulate || c.reps.is_some() {
        let reps = c.reps.unwrap_or(SimConfig::default().reps);
        req.simulation = Some(sim_config(c, reps)?);
    }
    Ok(req)
}

fn emit(outcome: &Outcome, out: Option<&Path>) -> Result<()> {
    let json = outcome.to_json_string();
    match out {
        None => print!("{json}"),
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join("report.json"), json)?;
            for (name, curve) in &outcome.curves {
                fs::write(dir.join(format!("{name}.csv")), curve.to_csv())?;
                fs::write(dir.join(format!("{name}.json")), curve.to_json())?;
            }
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<Outcome> {
    let (outcome, out) = match cli.command {
        Cmd::Reproduce(r) => {
            let which = match r.which {
                ReproduceArg::Ex1 => Counterexample::Ex1 { n: r.n, alpha: r.alpha },
                ReproduceArg::Ex2 => Counterexample::Ex2 { gamma: r.gamma },
            };
            let config = SimConfig {
                reps: r.reps,
                seed: r.seed,
                noise: r.noise.parse()?,
                ..SimConfig::default()
            };
            (run_reproduce(which, &config)?, r.out)
        }
        Cmd::Analyze(c) => (run(&request(&c, false)?, Command::Analyze)?, c.out),
        Cmd::Limit(c) => (run(&request(&c, false)?, Command::Limit)?, c.out),
        Cmd::AlphaStar(c) => (run(&request(&c, false)?, Command::AlphaStar)?, c.out),
        Cmd::Distinguish(c) => (run(&request(&c, false)?, Command::Distinguish)?, c.out),
        Cmd::Simulate(c) => (run(&request(&c, true)?, Command::Simulate)?, c.out),
    };
    emit(&outcome, out.as_deref())?;
    Ok(outcome)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors exit 1 so that 2 stays reserved for undetermined results
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(o) => ExitCode::from(o.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
