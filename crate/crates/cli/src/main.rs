mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msorte::conjugate::{conjugate_analytic, conjugate_numeric};
use msorte::equilibrium::{
    certify, certify_triple, check_certificate, CertifyOptions, EquilibriumCertificate,
    EquilibriumTriple, Values,
};
use msorte::json::{format_g17, to_canonical_string};
use msorte::oracle::{
    oracle_allocation, oracle_density, oracle_lambda, self_validate, ExponentialInstance,
    ADOPTED_LAMBDA,
};
use msorte::solver::{fixed_q_objective, solve_det, SolverConfig};
use msorte::utility::{Aggregator, Family, UtilityConfig, UtilitySpec};
use msorte::Error;
use serde::Serialize;

/// Outcome classes, each with its own exit code.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Solver(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Solver(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Solver(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. }
            | Error::Invalid(_)
            | Error::Dimension(_)
            | Error::Utility(_)
            | Error::Unsupported(_)
            | Error::Json(_) => Failure::Input(e.to_string()),
            _ => Failure::Solver(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "msorte",
    version,
    about = "Compute and certify systemic optimal risk transfer equilibria"
)]
struct Cli {
    /// Worker threads for per-scenario and per-agent work (1 = sequential).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve primal and dual, assemble the equilibrium and write a certificate.
    Solve {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Solve the deterministic-allocation problem.
    Det {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Re-verify a certificate against its instance without re-solving.
    Check {
        certificate: PathBuf,
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Closed-form equilibrium of the pairwise exponential family.
    Oracle {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Evaluate the convex conjugate V(w) by both routes.
    Conjugate {
        #[arg(long)]
        family: Family,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        w: Vec<f64>,
        /// Defaults to all ones.
        #[arg(long, value_delimiter = ',')]
        alpha: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        beta: Option<Vec<f64>>,
        /// Aggregator as `kind:p`, e.g. `rational:2`.
        #[arg(long)]
        agg: Option<String>,
        #[arg(long, value_delimiter = ',')]
        gamma: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        kink: Option<Vec<f64>>,
        #[arg(long)]
        exponent: Option<f64>,
    },
}

struct Ctx {
    quiet: bool,
    threads: Option<usize>,
}

impl Ctx {
    fn say(&self, text: &str) {
        if !self.quiet {
            print!("{text}");
        }
    }

    fn solver(&self, cfg: &SolverConfig) -> SolverConfig {
        match self.threads {
            Some(k) => SolverConfig {
                parallel: k > 1,
                ..*cfg
            },
            None => *cfg,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(k) = cli.threads {
        if k == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
        {
            eprintln!("error: cannot start the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    let ctx = Ctx {
        quiet: cli.quiet,
        threads: cli.threads,
    };
    let outcome = match cli.command {
        Command::Solve { config } => cmd_solve(&ctx, &config),
        Command::Det { config } => cmd_det(&ctx, &config),
        Command::Check {
            certificate,
            config,
        } => cmd_check(&ctx, &certificate, &config),
        Command::Oracle { config } => cmd_oracle(&ctx, &config),
        Command::Conjugate {
            family,
            w,
            alpha,
            beta,
            agg,
            gamma,
            kink,
            exponent,
        } => parse_agg(agg.as_deref()).and_then(|agg| {
            let n = w.len();
            let spec = UtilityConfig {
                family,
                alpha: alpha.unwrap_or_else(|| vec![1.0; n]),
                beta,
                agg,
                gamma,
                kink,
                exponent,
            };
            cmd_conjugate(spec, &w)
        }),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn parse_agg(text: Option<&str>) -> Result<Option<Aggregator>, Failure> {
    let Some(text) = text else { return Ok(None) };
    let bad = || Failure::Input(format!("aggregator `{text}` is not of the form kind:p"));
    let (kind, p) = text.split_once(':').ok_or_else(bad)?;
    let p: f64 = p.parse().map_err(|_| bad())?;
    Ok(Some(match kind {
        "exponential" => Aggregator::Exponential { p },
        "rational" => Aggregator::Rational { p },
        "arctan" => Aggregator::Arctan { p },
        _ => return Err(bad()),
    }))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents)
        .map_err(|e| Failure::Solver(format!("cannot write {}: {e}", path.display())))
}

fn prepare_output(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::Solver(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_solve(ctx: &Ctx, config: &Path) -> Result<(), Failure> {
    let run = config::load(config)?;
    let cfg = ctx.solver(&run.config.solver);
    let opts = CertifyOptions {
        config_hash: run.hash.clone(),
        ..CertifyOptions::default()
    };
    let u = &run.config.utility;
    let c = certify(
        &run.space,
        &run.x,
        u,
        run.config.budget,
        &run.partition,
        &cfg,
        &opts,
    )?;

    prepare_output(&run.output_dir)?;
    write(
        &run.output_dir.join("certificate.json"),
        &to_canonical_string(&c.certificate)?,
    )?;
    let summary = report::summary(&c.certificate, &c.report, &run.space, u, &run.partition);
    write(&run.output_dir.join("summary.txt"), &summary)?;
    if run.config.emit_plots {
        report::write_tables(
            &run.output_dir,
            &run.space,
            &run.x,
            &c.triple,
            &run.partition,
        )
        .map_err(|e| Failure::Solver(format!("cannot write tables: {e}")))?;
    }
    ctx.say(&summary);
    verdict(&c.report)
}

fn verdict(report: &msorte::equilibrium::CheckReport) -> Result<(), Failure> {
    if report.passed() {
        return Ok(());
    }
    let names: Vec<&str> = report.failures().map(|i| i.name).collect();
    Err(Failure::Verification(format!(
        "checks failed: {}",
        names.join(", ")
    )))
}

#[derive(Serialize)]
struct DetReport {
    a: Vec<f64>,
    value: f64,
    approximate: bool,
    /// Value recorded in an existing certificate in the output directory.
    random_value: Option<f64>,
}

fn cmd_det(ctx: &Ctx, config: &Path) -> Result<(), Failure> {
    let run = config::load(config)?;
    if !run.partition.is_single() {
        return Err(Failure::Input(
            "the deterministic problem takes no cluster structure".into(),
        ));
    }
    let cfg = ctx.solver(&run.config.solver);
    let det = solve_det(
        &run.space,
        &run.x,
        &run.config.utility,
        run.config.budget,
        &cfg,
    )?;
    let prior = run.output_dir.join("certificate.json");
    let random_value = match fs::read_to_string(&prior) {
        Ok(text) => Some(
            serde_json::from_str::<EquilibriumCertificate>(&text)
                .map_err(|e| Failure::Input(format!("{}: {e}", prior.display())))?
                .values
                .primal,
        ),
        Err(_) => None,
    };
    let out = DetReport {
        a: det.a.clone(),
        value: det.value,
        approximate: det.approximate,
        random_value,
    };
    prepare_output(&run.output_dir)?;
    let text = to_canonical_string(&out)?;
    write(&run.output_dir.join("det.json"), &text)?;
    ctx.say(&text);
    if let Some(ran) = random_value {
        let slack = 1e-9 * ran.abs().max(1.0);
        if det.value > ran + slack {
            return Err(Failure::Verification(format!(
                "deterministic value {} exceeds the random-allocation value {}",
                format_g17(det.value),
                format_g17(ran)
            )));
        }
        ctx.say(&format!(
            "Pi_det = {} <= Pi_ran = {}\n",
            format_g17(det.value),
            format_g17(ran)
        ));
    }
    Ok(())
}

fn cmd_check(ctx: &Ctx, certificate: &Path, config: &Path) -> Result<(), Failure> {
    let run = config::load(config)?;
    let text = fs::read_to_string(certificate)
        .map_err(|e| Failure::Input(format!("cannot read {}: {e}", certificate.display())))?;
    let cert: EquilibriumCertificate = serde_json::from_str(&text)
        .map_err(|e| Failure::Input(format!("{}: {e}", certificate.display())))?;
    let cfg = ctx.solver(&run.config.solver);
    let report = check_certificate(
        &cert,
        &run.space,
        &run.x,
        &run.config.utility,
        &run.partition,
        &cfg,
    )?;
    ctx.say(&report::residual_table(&report));
    if cert.meta.config_hash != run.hash {
        eprintln!("warning: certificate was produced from a different config or scenario file");
    }
    verdict(&report)
}

fn cmd_oracle(ctx: &Ctx, config: &Path) -> Result<(), Failure> {
    let run = config::load(config)?;
    let u = &run.config.utility;
    if u.family() != Family::ExpPairwise {
        return Err(Failure::Input(format!(
            "the closed form exists only for EXP_PAIRWISE, not {}",
            u.family()
        )));
    }
    if !run.partition.is_single() {
        return Err(Failure::Input(
            "the closed form covers a single cluster only".into(),
        ));
    }
    let validation = self_validate(1);
    if !validation.passed() {
        return Err(Failure::Solver(
            "closed-form self-validation failed; oracle disabled".into(),
        ));
    }
    if !ctx.quiet {
        for line in &validation.log {
            println!("{line}");
        }
    }

    let cfg = ctx.solver(&run.config.solver);
    let budget = run.config.budget;
    let inst = ExponentialInstance::from_utility(u, run.x.clone(), budget)?;
    let y_hat = oracle_allocation(&inst);
    let q = oracle_density(&run.space, &inst)?;
    let lambda = oracle_lambda(&run.space, &inst, ADOPTED_LAMBDA);
    let a = msorte::scenario::expectation(&run.space, &y_hat, &q)?;
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    let triple = EquilibriumTriple {
        y_tilde: y_hat.shift_rows(&neg),
        q,
        a,
        budget,
    };
    let positions = run.x.add(&y_hat)?;
    let primal = run.space.expect_with(|w| u.evaluate(&positions.column(w)));
    let dual = fixed_q_objective(&run.space, &run.x, u, budget, &triple.q, lambda, &cfg)?;
    let values = Values {
        primal,
        dual,
        gap: dual - primal,
    };
    let opts = CertifyOptions {
        config_hash: run.hash.clone(),
        ..CertifyOptions::default()
    };
    let (cert, report) = certify_triple(
        &run.space,
        &run.x,
        u,
        &run.partition,
        &cfg,
        &opts,
        &triple,
        lambda,
        values,
        false,
    )?;
    prepare_output(&run.output_dir)?;
    write(
        &run.output_dir.join("oracle_certificate.json"),
        &to_canonical_string(&cert)?,
    )?;
    ctx.say(&report::residual_table(&report));
    verdict(&report)
}

#[derive(Serialize)]
struct ConjugateReport {
    family: Family,
    w: Vec<f64>,
    numeric: f64,
    analytic: Option<f64>,
    difference: Option<f64>,
    maximizer: Option<Vec<f64>>,
}

fn cmd_conjugate(spec: UtilityConfig, w: &[f64]) -> Result<(), Failure> {
    let u = UtilitySpec::try_from(spec)?;
    if w.len() != u.n() {
        return Err(Failure::Input(format!(
            "w has {} entries, the utility has {} agents",
            w.len(),
            u.n()
        )));
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Failure::Input("w must be finite and nonnegative".into()));
    }
    let (numeric, maximizer) = if w.iter().all(|v| *v == 0.0) {
        (u.sup_value(), None)
    } else {
        let r = conjugate_numeric(&u, w)?;
        (r.value, r.x.iter().all(|v| !v.is_nan()).then_some(r.x))
    };
    let analytic = conjugate_analytic(&u, w);
    let out = ConjugateReport {
        family: u.family(),
        w: w.to_vec(),
        numeric,
        analytic,
        difference: analytic.map(|a| a - numeric),
        maximizer,
    };
    print!("{}", to_canonical_string(&out)?);
    Ok(())
}
