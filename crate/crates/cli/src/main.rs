use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use parahom::cell::effective_matrix;
use parahom::coeffs::CoeffSpec;
use parahom::expr::Expr;
use parahom::geometry::{DomainSpec, GraphDomain, LipschitzCylinder};
use parahom::harness::{
    emit_report, homogenization_experiment, run_check, solvability_sweep, solve_config, to_csv, to_dat, Check, ExperimentConfig, Format,
    Subject, SweepReport, VERSION,
};
use parahom::maximal::{lp_boundary_norm, nontangential_max, BoundaryField};
use parahom::pde::DataSpec;

#[derive(Parser)]
#[command(name = "parahom", version, about = "Parabolic homogenization experiments and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Effective matrix from the periodic cell problem.
    Cell {
        /// Preset name, JSON file or inline JSON.
        #[arg(long, default_value = "laminate")]
        coeff: String,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the Dirichlet problem and write the field.
    Solve {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one potential-theory diagnostic and print CSV rows.
    Diagnose {
        /// doubling | rh | localsolv | harnack | comparison | green-sym | green-measure
        #[arg(long)]
        check: Check,
        #[arg(long, default_value = "identity")]
        coeff: String,
        /// Scale of the check; harnack and comparison use fixed boxes.
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Non-tangential maximal function of a solution and `‖N(u)‖_p / ‖f‖_p`.
    Maximal {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
        /// CSV of `(x, t, N_value, flag)`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// `u_ε` against `ū` over the configured ε list.
    Homogenize {
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Diagnostic battery over presets, scales and domains.
    Sweep {
        #[command(flatten)]
        report: ReportArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Args)]
struct ProblemArgs {
    /// Experiment config (JSON); the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    coeff: Option<String>,
    /// `box`, `half-space`, a JSON file or inline JSON.
    #[arg(long)]
    domain: Option<String>,
    /// Boundary data expression in `x1.., lambda, t`, or JSON.
    #[arg(long)]
    data: Option<String>,
    /// `N,Nt`: cells per axis and time steps.
    #[arg(long)]
    grid: Option<String>,
    /// Solve with `A(X/ε)`.
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    /// Defaults to the config's output_dir, then the current directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Inline JSON, a JSON file, or `None` for anything else.
fn json_source(s: &str) -> Result<Option<String>> {
    if s.trim_start().starts_with('{') {
        return Ok(Some(s.to_string()));
    }
    let p = Path::new(s);
    if p.is_file() {
        return Ok(Some(std::fs::read_to_string(p).with_context(|| format!("reading {s}"))?));
    }
    Ok(None)
}

fn parse_coeff(s: &str) -> Result<CoeffSpec> {
    match json_source(s)? {
        Some(j) => Ok(serde_json::from_str(&j).context("coefficient spec")?),
        None => Ok(CoeffSpec::preset(s)?),
    }
}

fn parse_domain(s: &str, t_final: f64) -> Result<DomainSpec> {
    match s {
        "box" => Ok(DomainSpec::Cylinder(LipschitzCylinder::unit_box(2, 1.0, t_final))),
        "half-space" => Ok(DomainSpec::HalfSpace(GraphDomain::half_space(1, 3.0, 3.0))),
        _ => match json_source(s)? {
            Some(j) => {
                let d: DomainSpec = serde_json::from_str(&j).context("domain spec")?;
                d.validate()?;
                Ok(d)
            }
            None => bail!("unknown domain {s:?}; use box, half-space or JSON"),
        },
    }
}

fn parse_data(s: &str) -> Result<DataSpec> {
    match json_source(s)? {
        Some(j) => Ok(serde_json::from_str(&j).context("data spec")?),
        None => Ok(DataSpec { expr: Expr::parse(s)?, p: 2.0 }),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let s = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(ExperimentConfig::from_json(&s)?)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

impl ProblemArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(c) = &self.coeff {
            cfg.coeff = parse_coeff(c)?;
        }
        if let Some(d) = &self.domain {
            cfg.domain = parse_domain(d, parahom::harness::DEFAULT_T_FINAL)?;
        }
        if let Some(d) = &self.data {
            cfg.data = parse_data(d)?;
        }
        if let Some(g) = &self.grid {
            let parts: Vec<&str> = g.split(',').collect();
            let [n, nt] = parts[..] else { bail!("--grid expects N,Nt") };
            cfg.cells = n.trim().parse().context("grid cells")?;
            cfg.steps = nt.trim().parse().context("grid steps")?;
        }
        Ok(cfg)
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Cell { coeff, resolution, dim, out } => {
            let a = parse_coeff(&coeff)?.build(dim)?;
            let e = effective_matrix(&a, resolution)?;
            let text = serde_json::to_string_pretty(&e)? + "\n";
            write_or_print(out.as_deref(), &text)?;
            Ok(e.min_eig > 0.0)
        }
        Command::Solve { problem, out } => {
            let cfg = problem.config()?;
            let u = solve_config(&cfg, problem.eps)?;
            let meta = serde_json::json!({
                "version": VERSION,
                "coeff": cfg.coeff,
                "domain": cfg.domain,
                "data": cfg.data,
                "eps": problem.eps,
            });
            u.write_binary(&out, &meta)?;
            eprintln!("wrote {} ({} levels × {} cells)", out.display(), u.levels(), u.cells());
            Ok(true)
        }
        Command::Diagnose { check, coeff, r, out } => {
            let spec = parse_coeff(&coeff)?;
            let a = spec.build(2)?;
            let subject = Subject::new(&coeff, &a, spec.is_identity());
            let rows = run_check(check, &subject, r, Default::default())?;
            let report =
                SweepReport { version: VERSION.to_string(), config: ExperimentConfig::default(), pass: rows.iter().all(|r| r.pass), rows };
            write_or_print(out.as_deref(), &to_csv(&report))?;
            Ok(report.pass)
        }
        Command::Maximal { problem, eta, p, out } => {
            let cfg = problem.config()?;
            let u = solve_config(&cfg, problem.eps)?;
            let eta = eta.unwrap_or_else(|| cfg.domain.graph().default_eta());
            let nt = nontangential_max(&u, eta, &cfg.domain)?;
            let f = BoundaryField::trace(&u, &cfg.domain);
            let (n_norm, f_norm) = (lp_boundary_norm(&nt, p)?, lp_boundary_norm(&f, p)?);
            write_or_print(out.as_deref(), &nt.to_csv())?;
            eprintln!("eta={eta} p={p} |N(u)|_p={n_norm} |f|_p={f_norm} ratio={}", n_norm / f_norm);
            Ok(n_norm.is_finite())
        }
        Command::Homogenize { report } => {
            let cfg = load_config(report.config.as_deref())?;
            let rep = homogenization_experiment(&cfg)?;
            emit(&report, cfg.output_dir.as_deref(), |f, d| emit_report(&rep, f, d, "homogenization"))?;
            eprint!("{}", to_dat(&rep));
            eprintln!("monotone={} nt_band={}", rep.monotone, rep.nt_band);
            Ok(rep.pass)
        }
        Command::Sweep { report } => {
            let cfg = load_config(report.config.as_deref())?;
            let rep = solvability_sweep(&cfg)?;
            emit(&report, cfg.output_dir.as_deref(), |f, d| emit_report(&rep, f, d, "sweep"))?;
            for r in rep.rows.iter().filter(|r| !r.pass) {
                eprintln!("FAIL {} {} {} r={} value={}", r.check, r.preset, r.domain, r.r, r.value);
            }
            Ok(rep.pass)
        }
    }
}

fn emit(args: &ReportArgs, cfg_dir: Option<&Path>, write: impl FnOnce(Format, &Path) -> parahom::Result<Vec<PathBuf>>) -> Result<()> {
    let dir = args.out_dir.as_deref().or(cfg_dir).unwrap_or(Path::new("."));
    let format = match args.format {
        FormatArg::Json => Format::Json,
        FormatArg::Csv => Format::Csv,
    };
    for p in write(format, dir)? {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
