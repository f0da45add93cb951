use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;

use vortexlab::bubble;
use vortexlab::holo::{self, ChartPoint, MapFamily};
use vortexlab::holonomy;
use vortexlab::kw;
use vortexlab::runner::{self, FailureClass, Scenario};
use vortexlab::sphere::{self, GridRef};
use vortexlab::tree::{self, TreeConfig};
use vortexlab::vortex;

#[derive(Parser)]
#[command(name = "vortexlab", version, about = "Abelian vortices on the round 2-sphere")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the Kazdan–Warner residual tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Seed for randomized checks. Scenario results never depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full pipeline for a scenario and write all artifacts.
    Run {
        scenario: PathBuf,
        /// Output directory (default: scenario `output`, then $VORTEXLAB_OUT/<name>, then ./out/<name>).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Kazdan–Warner sweep for the limit map; CSV on stdout.
    Kw(KwArgs),
    /// Adiabatic sweep with vortex checks; CSV on stdout.
    Sweep {
        scenario: PathBuf,
    },
    /// Energy atoms of the scenario family; JSON on stdout.
    Atoms {
        scenario: PathBuf,
    },
    /// Bubble tree; JSON (or DOT) on stdout.
    Tree {
        scenario: PathBuf,
        #[arg(long)]
        dot: bool,
    },
    /// Holonomy diagnostics for a dumped log-weight field; JSON on stdout.
    Holonomy(HolonomyArgs),
    /// Print a shipped JSON schema (or list them).
    Schema {
        name: Option<String>,
    },
}

#[derive(Args)]
struct KwArgs {
    scenario: PathBuf,
    /// Single coupling instead of the scenario schedule.
    #[arg(long, conflicts_with_all = ["s0", "ratio", "count"])]
    s: Option<f64>,
    #[arg(long)]
    s0: Option<f64>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
    /// Directory for φ_s field dumps.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct HolonomyArgs {
    /// Field dump (`.f64` with its `.json` sidecar) holding log H on the grid.
    field: PathBuf,
    /// Chart centre: `re,im` or `inf`.
    #[arg(long, default_value = "0,0")]
    center: String,
    /// Comma-separated loop radii in the centred chart.
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.002,0.005,0.01,0.02,0.05,0.1")]
    radii: Vec<f64>,
    /// Frame exponent m in H* = |ξ|^{2m}·H.
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    frame: i32,
    #[arg(long, default_value_t = 64)]
    n_theta: usize,
    /// Report the decaying gauge for these parameters as well.
    #[arg(long, requires = "beta")]
    alpha: Option<f64>,
    #[arg(long, requires = "alpha")]
    beta: Option<f64>,
}

/// Error carrying its exit code.
#[derive(Debug)]
struct Exit(u8, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Exit {
    fn from(e: E) -> Self {
        Exit(3, e.into())
    }
}

fn validation(e: impl Into<anyhow::Error>) -> Exit {
    Exit(2, e.into())
}

fn failure((class, cause): (FailureClass, String)) -> Exit {
    Exit(class.exit_code() as u8, anyhow!(cause))
}

fn load(path: &Path, tol: Option<f64>) -> Result<Scenario, Exit> {
    let mut sc = Scenario::from_path(path).map_err(validation)?;
    if let Some(t) = tol {
        sc.tolerances.kw = t;
        sc.validate().map_err(validation)?;
    }
    Ok(sc)
}

fn family(sc: &Scenario) -> Result<(GridRef, MapFamily), Exit> {
    let grid = sphere::build_grid(sc.grid.l_max).map_err(runner::solver).map_err(failure)?;
    let fam = MapFamily::from_spec(&sc.family, &sc.schedule.values()).map_err(runner::solver).map_err(failure)?;
    Ok((grid, fam))
}

fn limit_map(sc: &Scenario, fam: &MapFamily) -> Result<holo::UhlenbeckLimit, Exit> {
    let atoms = bubble::detect_atoms(fam, &sc.bubble_config()).map_err(runner::classify_bubble).map_err(failure)?;
    let sites: Vec<_> = atoms.iter().map(|a| a.site()).collect();
    holo::uhlenbeck_limit(fam, &sites).map_err(runner::solver).map_err(failure)
}

fn kw_sweep(sc: &Scenario, schedule: &[f64]) -> Result<(kw::Background, kw::AdiabaticSweep), Exit> {
    let (grid, fam) = family(sc)?;
    let u = limit_map(sc, &fam)?;
    let bg = kw::build_background(&u.limit, &grid).map_err(runner::solver).map_err(failure)?;
    let sw = kw::sweep_field(&bg.h, bg.c1, schedule, sc.kw_options()).map_err(|e| match e {
        kw::KwError::LimitUndefined { .. } => Exit(4, e.into()),
        other => Exit(3, other.into()),
    })?;
    Ok((bg, sw))
}

fn parse_center(s: &str) -> Result<ChartPoint, Exit> {
    let s = s.trim();
    if matches!(s, "inf" | "infinity") {
        return Ok(ChartPoint::Infinity);
    }
    let parts: Vec<&str> = s.split(',').collect();
    let [re, im] = parts.as_slice() else {
        return Err(validation(anyhow!("center must be `re,im` or `inf`, got {s:?}")));
    };
    let re: f64 = re.trim().parse().map_err(validation)?;
    let im: f64 = im.trim().parse().map_err(validation)?;
    Ok(ChartPoint::finite(Complex64::new(re, im)))
}

fn output_dir(sc: &Scenario, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| sc.output.clone())
        .or_else(|| std::env::var_os("VORTEXLAB_OUT").map(|d| PathBuf::from(d).join(&sc.name)))
        .unwrap_or_else(|| PathBuf::from("out").join(&sc.name))
}

fn run(cli: Cli) -> Result<(), Exit> {
    let mut stdout = std::io::stdout().lock();
    match cli.cmd {
        Cmd::Run { scenario, out } => {
            let sc = load(&scenario, cli.tol)?;
            let dir = output_dir(&sc, out);
            let outcome = runner::run_scenario(&sc);
            let files = runner::emit_outputs(&outcome, &dir).context("writing outputs")?;
            for s in &outcome.report.stages {
                writeln!(stdout, "{:<10} {}", s.stage, s.status)?;
            }
            if let Some(t) = &outcome.report.tree {
                let c = &t.conservation;
                writeln!(stdout, "tree: energy {:.9}, degree {}, depth {}", c.total_energy, c.total_degree, t.tree["depth"])?;
            }
            writeln!(stdout, "wrote {} files under {}", files.len(), dir.display())?;
            if let Some(f) = &outcome.report.failure {
                return Err(Exit(f.class.exit_code() as u8, anyhow!("stage {} failed: {}", f.stage, f.cause)));
            }
        }
        Cmd::Kw(a) => {
            let mut sc = load(&a.scenario, cli.tol)?;
            if let Some(s0) = a.s0 {
                sc.schedule.s0 = s0;
            }
            if let Some(r) = a.ratio {
                sc.schedule.ratio = r;
            }
            if let Some(c) = a.count {
                sc.schedule.count = c;
            }
            let schedule = match a.s {
                Some(s) => vec![s],
                None => {
                    sc.validate().map_err(validation)?;
                    sc.schedule.values()
                }
            };
            let (_, sw) = kw_sweep(&sc, &schedule)?;
            writeln!(stdout, "s,residual,distance_to_limit,iterations")?;
            for (sol, d) in sw.solutions.iter().zip(&sw.distance_to_limit) {
                writeln!(stdout, "{},{:e},{:e},{}", sol.s, sol.residual_sup, d, sol.iterations)?;
            }
            if let Some(dir) = a.dump {
                for (i, sol) in sw.solutions.iter().enumerate() {
                    let quantity = format!("Kazdan-Warner solution phi at s = {}", sol.s);
                    sphere::write_field_dump(&sol.phi, &dir, &format!("phi_{i:02}"), &quantity)
                        .map_err(runner::solver)
                        .map_err(failure)?;
                }
            }
        }
        Cmd::Sweep { scenario } => {
            let sc = load(&scenario, cli.tol)?;
            let (bg, sw) = kw_sweep(&sc, &sc.schedule.values())?;
            writeln!(stdout, "s,kw_residual,vortex_residual,degree,ymh_total,bogomolny_gap,distance_to_limit")?;
            for (sol, d) in sw.solutions.iter().zip(&sw.distance_to_limit) {
                let v = vortex::assemble_vortex(&bg, sol).map_err(runner::solver).map_err(failure)?;
                let y = vortex::ymh_energy(&v);
                let gap = y.total - 2.0 * std::f64::consts::PI * bg.degree as f64;
                writeln!(
                    stdout,
                    "{},{:e},{:e},{:.12},{:.12},{:e},{:e}",
                    sol.s,
                    sol.residual_sup,
                    vortex::vortex_residual(&v).sup_norm(),
                    vortex::degree_check(&v),
                    y.total,
                    gap,
                    d
                )?;
            }
        }
        Cmd::Atoms { scenario } => {
            let sc = load(&scenario, cli.tol)?;
            let (_, fam) = family(&sc)?;
            let atoms = bubble::detect_atoms(&fam, &sc.bubble_config()).map_err(runner::classify_bubble).map_err(failure)?;
            writeln!(stdout, "{}", serde_json::to_string_pretty(&atoms)?)?;
        }
        Cmd::Tree { scenario, dot } => {
            let sc = load(&scenario, cli.tol)?;
            let (_, fam) = family(&sc)?;
            let t = tree::build_tree(&fam, &TreeConfig::new(sc.bubble_config())).map_err(runner::classify_tree).map_err(failure)?;
            if dot {
                write!(stdout, "{}", t.to_dot())?;
            } else {
                writeln!(stdout, "{}", serde_json::to_string_pretty(&t.to_json())?)?;
            }
        }
        Cmd::Holonomy(a) => {
            let center = parse_center(&a.center)?;
            if a.radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) || a.radii.len() < 3 {
                return Err(validation(anyhow!("need at least three positive radii")));
            }
            let (_, w) = sphere::read_field_dump(&a.field).map_err(validation)?;
            let mut radii = a.radii.clone();
            radii.sort_by(f64::total_cmp);
            let c = holonomy::connection_from_field(&w, &center.to_sphere(), a.frame, &radii, a.n_theta);
            let p = holonomy::holonomy_profile(&c, &radii).map_err(runner::solver).map_err(failure)?;
            let report = holonomy::classify_condition(&p, &c);
            let mut out = serde_json::to_value(&report)?;
            if let (Some(alpha), Some(beta)) = (a.alpha, a.beta) {
                let g = holonomy::decaying_gauge(&c, alpha, beta).map_err(validation)?;
                let pulled = holonomy::pullback_inversion(&g);
                out["decaying_gauge"] = serde_json::json!({
                    "alpha": alpha,
                    "beta": beta,
                    "pullback_exponent": holonomy::angular_exponent(&pulled),
                });
            }
            writeln!(stdout, "{}", serde_json::to_string_pretty(&out)?)?;
        }
        Cmd::Schema { name } => match name {
            None => {
                for (n, _) in runner::schemas() {
                    writeln!(stdout, "{n}")?;
                }
            }
            Some(n) => {
                let (_, s) = runner::schemas()
                    .into_iter()
                    .find(|(k, _)| *k == n)
                    .ok_or_else(|| validation(anyhow!("unknown schema {n:?}")))?;
                write!(stdout, "{s}")?;
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let _ = cli.seed;
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
