use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use geoflow::config::RunConfig;
use geoflow::curvature::FlowParams;
use geoflow::experiments::{run_flow, run_garding, run_uniqueness, verify_all};
use geoflow::symbol::{check_strong_ellipticity, Verdict};
use geoflow::{Error, Result};

const GARDING_SLACK: f64 = 1e-8;
const VERIFY_TOL: f64 = 1e-9;

#[derive(Parser)]
#[command(
    name = "geoflow",
    version,
    about = "Spectral experiments for higher-order geometric flows on flat tori"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify strong ellipticity of the gauge-fixed operator.
    Symbol(SymbolArgs),
    /// Run the gauge-fixed flow from a config file.
    Flow { config: PathBuf },
    /// Compare pure-flow reconstructions and the energy of a perturbed pair.
    Uniqueness { config: PathBuf },
    /// Sample the flat-background Gårding inequality.
    Garding { config: PathBuf },
    /// Run the jet identity suite and the reduced symbol identity.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        order: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
}

#[derive(clap::Args)]
struct SymbolArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, allow_hyphen_values = true)]
    a: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    b: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    c: Option<f64>,
    /// Four-dimensional Bach coefficients.
    #[arg(long, conflicts_with = "obstruction")]
    bach: bool,
    /// Obstruction-tensor coefficients (even n).
    #[arg(long)]
    obstruction: bool,
    #[arg(long, default_value_t = 0.0)]
    obstruction_shift: f64,
    #[arg(long, allow_hyphen_values = true, requires = "beta")]
    alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true, requires = "alpha")]
    beta: Option<f64>,
}

impl SymbolArgs {
    fn params(&self) -> Result<FlowParams> {
        let base = if self.bach {
            FlowParams::bach_type(self.n)?
        } else if self.obstruction {
            FlowParams::obstruction(self.n)?
        } else {
            let need = |v: Option<f64>, name: &str| {
                v.ok_or_else(|| Error::InvalidParams(format!("--{name} is required without a preset")))
            };
            FlowParams::new(
                self.n,
                self.k,
                need(self.a, "a")?,
                need(self.b, "b")?,
                need(self.c, "c")?,
            )?
        };
        let p = base.with_shift(self.obstruction_shift)?;
        match (self.alpha, self.beta) {
            (Some(alpha), Some(beta)) => p.with_weights(alpha, beta),
            _ => Ok(p),
        }
    }
}

fn symbol(args: &SymbolArgs) -> Result<ExitCode> {
    let report = check_strong_ellipticity(&args.params()?);
    println!("{report}");
    Ok(ExitCode::from(match report.verdict {
        Verdict::StronglyElliptic => 0,
        Verdict::Critical => 2,
        Verdict::NotElliptic => 3,
    }))
}

fn flow(path: &Path) -> Result<ExitCode> {
    let cfg = RunConfig::load(path)?;
    let out = run_flow(&cfg, &cfg.run_dir("flow"))?;
    println!("verdict={} dir={}", out.record.verdict, out.dir.display());
    for (key, value) in &out.record.summary {
        println!("{key}={value:?}");
    }
    if let Some(e) = &out.run.halted {
        println!("halt_reason={e}");
    }
    Ok(ExitCode::SUCCESS)
}

fn uniqueness(path: &Path) -> Result<ExitCode> {
    let cfg = RunConfig::load(path)?;
    let out = run_uniqueness(&cfg, &cfg.run_dir("uniqueness"))?;
    let r = &out.report;
    println!("verdict={} dir={}", r.verdict, out.dir.display());
    println!("sup_difference={:?} error_bound={:?}", r.sup_difference, r.error_bound);
    match r.shrink_factor {
        Some(s) => println!("shrink_factor={s}"),
        None => println!("shrink_factor=none"),
    }
    println!(
        "k_hat={} k_hat_refined={} energy_bounded={}",
        r.k_hat, r.k_hat_refined, r.energy_bounded
    );
    Ok(ExitCode::from(if r.verdict == "consistent-with-uniqueness" {
        0
    } else {
        4
    }))
}

fn garding(path: &Path) -> Result<ExitCode> {
    let cfg = RunConfig::load(path)?;
    let params = cfg.params()?;
    let sym = check_strong_ellipticity(&params);
    if sym.verdict != Verdict::StronglyElliptic {
        eprintln!(
            "error: parameters are {}, Gårding check needs strong ellipticity",
            sym.verdict.as_str()
        );
        return Ok(ExitCode::from(3));
    }
    let r = run_garding(&cfg)?;
    let holds = r.worst_margin >= -GARDING_SLACK;
    println!(
        "verdict={} lambda={} samples={} worst_margin={}",
        if holds { "holds" } else { "violated" },
        r.lambda,
        r.samples,
        r.worst_margin
    );
    Ok(ExitCode::from(if holds { 0 } else { 4 }))
}

fn verify(seed: u64, order: usize, trials: usize) -> Result<ExitCode> {
    let report = verify_all(seed, order, trials)?;
    print!("{report}");
    let ok = report.passes(VERIFY_TOL);
    println!("result={}", if ok { "pass" } else { "fail" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Symbol(args) => symbol(args),
        Command::Flow { config } => flow(config),
        Command::Uniqueness { config } => uniqueness(config),
        Command::Garding { config } => garding(config),
        Command::Verify { seed, order, trials } => verify(*seed, *order, *trials),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::FAILURE
    })
}
