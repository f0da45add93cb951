//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines are always shown.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::Instant;

use num_complex::Complex64 as C;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vortexlab::holo::{self, HoloMap, Poly};
use vortexlab::holonomy::{self, Condition, ConnectionSample};
use vortexlab::kw::{self, Background, KwOptions, KwProblem};
use vortexlab::runner::{self, RunOutcome, Scenario};
use vortexlab::sphere::{self, ScalarField};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn scenario(name: &str) -> Scenario {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"));
    Scenario::from_path(&p).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn run_in_pool(sc: &Scenario, threads: usize) -> RunOutcome {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| runner::run_scenario(sc))
}

struct Runs {
    single: RunOutcome,
    two_scale: RunOutcome,
    smooth: RunOutcome,
}

fn spectral_geometry() -> Check {
    let t0 = Instant::now();
    let g = sphere::build_grid(64).map_err(|e| e.to_string())?;
    let mut worst_ev = 0.0f64;
    for l in 0..=8usize {
        for m in -(l as i64)..=(l as i64) {
            let y = ScalarField::from_fn(&g, |p| sphere::real_harmonic(l, m, p.theta, p.phi));
            let ly = sphere::laplace_beltrami(&y);
            let num: f64 = ly.values().iter().zip(y.values()).zip(g.weights()).map(|((a, b), w)| a * b * w).sum();
            let den: f64 = y.values().iter().zip(g.weights()).map(|(b, w)| b * b * w).sum();
            let exact = 4.0 * PI * (l * (l + 1)) as f64;
            let rel = if l == 0 { (num / den).abs() } else { (num / den / exact - 1.0).abs() };
            let pointwise = ly.zip_with(&y, |a, b| a - exact * b).unwrap().sup_norm() / (1.0 + exact);
            worst_ev = worst_ev.max(rel).max(pointwise);
        }
    }
    // band-limited right-hand side with zero mean
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let coeffs: Vec<(usize, i64, f64)> = (1..=20usize)
        .flat_map(|l| (-(l as i64)..=(l as i64)).map(move |m| (l, m)))
        .map(|(l, m)| (l, m, rng.gen_range(-1.0..1.0)))
        .collect();
    let rhs = ScalarField::from_fn(&g, |p| coeffs.iter().map(|(l, m, c)| c * sphere::real_harmonic(*l, *m, p.theta, p.phi)).sum());
    let u = sphere::solve_poisson(&rhs).map_err(|e| e.to_string())?;
    let residual = sphere::laplace_beltrami(&u).zip_with(&rhs, |a, b| a - b).unwrap().sup_norm();
    let secs = t0.elapsed().as_secs_f64();
    ensure(
        worst_ev <= 1e-8 && residual <= 1e-10 && secs < 5.0,
        format!("eigenvalue rel err {worst_ev:.2e}, Poisson residual {residual:.2e}, {secs:.2} s"),
    )
}

fn kw_oracles() -> Check {
    let g = sphere::build_grid(16).map_err(|e| e.to_string())?;
    let opts = KwOptions::default();
    let bg0 = Background::uniform(&g, 0, -1.0);
    let p0 = KwProblem::new(bg0.h.clone(), bg0.c1, 5.0, opts).map_err(|e| e.to_string())?;
    let e0 = kw::solve_kw(&p0, None).map_err(|e| e.to_string())?.phi.sup_norm();
    // r = 1, s² = 16π: (s²/2)·(−1)·e^φ = c = 4π − 8π gives e^φ = 1/2
    let s = (16.0 * PI).sqrt();
    let bg1 = Background::uniform(&g, 1, -1.0);
    let p1 = KwProblem::new(bg1.h.clone(), bg1.c1, s, opts).map_err(|e| e.to_string())?;
    let phi = kw::solve_kw(&p1, None).map_err(|e| e.to_string())?.phi;
    let e1 = phi.values().iter().map(|v| (v - 0.5f64.ln()).abs()).fold(0.0, f64::max);
    ensure(e0 <= 1e-12 && e1 <= 1e-10, format!("r=0: sup|φ| = {e0:.1e}; r=1: sup|φ − log ½| = {e1:.1e}"))
}

fn adiabatic_limit() -> Check {
    let t0 = Instant::now();
    let g = sphere::build_grid(32).map_err(|e| e.to_string())?;
    let h = ScalarField::constant(&g, -1.0);
    let sched: Vec<f64> = (0..6).map(|k| 16.0 * 2f64.powi(k)).collect();
    let sw = kw::sweep_field(&h, 2.0 * PI, &sched, KwOptions::default()).map_err(|e| e.to_string())?;
    let d: Vec<f64> = sw.solutions.iter().map(|s| s.phi.values().iter().map(|v| v.abs()).fold(0.0, f64::max)).collect();
    let decreasing = d.windows(2).all(|w| w[1] < w[0]);
    let x: Vec<f64> = sched.iter().map(|s| s.ln()).collect();
    let y: Vec<f64> = d.iter().map(|v| v.ln()).collect();
    let (mx, my) = (x.iter().sum::<f64>() / 6.0, y.iter().sum::<f64>() / 6.0);
    let slope = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
        / x.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>();
    let secs = t0.elapsed().as_secs_f64();
    ensure(
        decreasing && (slope + 2.0).abs() <= 0.2 && secs < 60.0,
        format!("sup|φ_s + log(−h)| decreasing: {decreasing}, slope {slope:.4}, {secs:.2} s"),
    )
}

fn residual_identity(runs: &Runs) -> Check {
    let mut worst = 0.0f64;
    let mut worst_deg = 0.0f64;
    let mut count = 0;
    for (out, r) in [(&runs.single, 0usize), (&runs.two_scale, 0), (&runs.smooth, 2)] {
        let rows = out.report.vortex.as_ref().ok_or("vortex stage missing")?;
        let deg = out.report.kw.as_ref().ok_or("kw stage missing")?.map_degree;
        if deg != r {
            return Err(format!("{}: limit degree {deg}, expected {r}", out.report.scenario.name));
        }
        for v in rows {
            worst = worst.max(v.kw_agreement);
            worst_deg = worst_deg.max((v.degree - r as f64).abs());
            count += 1;
        }
    }
    ensure(
        worst <= 1e-12 && worst_deg <= 1e-8,
        format!("{count} vortices: relative residual gap {worst:.1e}, degree error {worst_deg:.1e}"),
    )
}

fn energy_equals_degree() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < 20 {
        let k = rng.gen_range(1..=3usize);
        let r = rng.gen_range(1..=5usize);
        let comps: Vec<Poly> = (0..=k)
            .map(|_| Poly::new((0..=r).map(|_| C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()))
            .collect();
        let Ok(f) = HoloMap::new(comps, r) else { continue };
        let e = holo::numerical_energy(&f, 1e-10).value;
        worst = worst.max((e - r as f64).abs());
        n += 1;
    }
    ensure(worst <= 1e-7, format!("20 random maps: max |∫e(f) − r| = {worst:.2e}"))
}

fn single_bubble(runs: &Runs) -> Check {
    let rep = &runs.single.report;
    let atoms = rep.atoms.as_ref().ok_or("atoms missing")?;
    if atoms.len() != 1 {
        return Err(format!("{} atoms", atoms.len()));
    }
    let a = &atoms[0];
    let at_zero = a.point.value().is_some_and(|z| z.norm() < 1e-12);
    let tree = runs.single.tree.as_ref().ok_or("tree missing")?;
    let child = tree.root.children.first().ok_or("no bubble")?;
    let target = [C::new(-1.0, 0.0), C::new(1.0, 0.0), C::new(1.0, 0.0), C::new(1.0, 0.0)];
    let got = child.limit.coefficient_vector();
    let dist = if got.len() == 4 { holo::projective_distance(&got, &target) } else { f64::INFINITY };
    let degrees: usize = tree.nodes().iter().map(|(_, n)| n.degree).sum();
    ensure(
        at_zero && (a.mass - 1.0).abs() <= 1e-3 && dist <= 1e-6 && degrees == 1 && tree.total_degree == 1,
        format!("atom at 0: {at_zero}, mass {:.9}, limit distance {dist:.1e}, bookkeeping energy {degrees}", a.mass),
    )
}

fn scale_law(runs: &Runs) -> Check {
    let sc = &runs.single.report.scenario;
    let c0 = sc.c0;
    let tree = runs.single.tree.as_ref().ok_or("tree missing")?;
    let child = tree.root.children.first().ok_or("no bubble")?;
    let rs = child.renorm.as_ref().ok_or("no scale data")?;
    let mut t_err = 0.0f64;
    let mut cf_err = 0.0f64;
    for i in 0..rs.t.len() {
        let delta = 1.0 / rs.schedule[i];
        let analytic = (c0 / (1.0 - c0)).sqrt() / delta;
        t_err = t_err.max((rs.t[i] / analytic - 1.0).abs());
        cf_err = cf_err.max((rs.closed_form[i] / rs.t[i] - 1.0).abs());
    }
    let regime = child.regime.as_ref().ok_or("no regime")?;
    let lambda = regime.lambda();
    let expected = ((1.0 - c0) / c0).sqrt();
    let lam_err = lambda.map_or(f64::INFINITY, |l| (l / expected - 1.0).abs());
    ensure(
        t_err <= 0.01 && cf_err <= 0.05 && regime.label() == "moderate" && lam_err <= 0.05,
        format!("t rel err {t_err:.2e}, closed form {cf_err:.2e}, regime {}, λ rel err {lam_err:.1e}", regime.label()),
    )
}

fn two_scale(runs: &Runs) -> Check {
    let tree = runs.two_scale.tree.as_ref().ok_or_else(|| format!("tree missing: {:?}", runs.two_scale.report.failure))?;
    let mut per_level = vec![0.0; tree.depth + 1];
    let mut max_tau = 0.0f64;
    for (path, n) in tree.nodes() {
        per_level[path.len()] += n.energy;
        if let Some(t) = n.tau {
            max_tau = max_tau.max(t.abs());
        }
    }
    let levels_ok = tree.depth == 2 && per_level[1..].iter().all(|e| (e - 1.0).abs() <= 1e-6);
    let total = per_level.iter().sum::<f64>();
    ensure(
        levels_ok && (total - 2.0).abs() <= 1e-6 && tree.total_degree == 2 && max_tau <= 1e-2,
        format!("depth {}, level energies {per_level:?}, total {total:.9}, max τ {max_tau:.1e}", tree.depth),
    )
}

fn holonomy_models() -> Check {
    let radii: Vec<f64> = (0..9).map(|k| 1e-3 * 10f64.powf(0.25 * k as f64)).collect();
    let mut worst_g = 0.0f64;
    let mut worst_beta = 0.0f64;
    for beta in [0.25, 0.5, 0.75] {
        let c = ConnectionSample::from_fn(&radii, 32, |_, _| (C::new(0.0, 0.0), C::new(0.0, beta)));
        let expect = C::from_polar(1.0, -2.0 * PI * beta);
        for r in &radii {
            let g = holonomy::holonomy(&c, *r).map_err(|e| e.to_string())?;
            worst_g = worst_g.max((g - expect).norm());
        }
        let p = holonomy::holonomy_profile(&c, &radii).map_err(|e| e.to_string())?;
        match holonomy::classify_condition(&p, &c).classification {
            Condition::HBeta { beta: b } => worst_beta = worst_beta.max((b - beta).abs()),
            other => return Err(format!("β = {beta} classified {other:?}")),
        }
    }
    // [z : 1] around the regular point z = 0.5 in the unitary frame
    let f = HoloMap::new(vec![Poly::from_real(&[0.0, 1.0]), Poly::from_real(&[1.0])], 1).unwrap();
    let smooth = holonomy::point_condition(&f, holo::ChartPoint::finite(C::new(0.5, 0.0))).map_err(|e| e.to_string())?;
    ensure(
        worst_g <= 1e-8 && worst_beta <= 1e-3 && smooth.classification == Condition::H,
        format!("|g − e^(−2πiβ)| ≤ {worst_g:.1e}, |β̂ − β| ≤ {worst_beta:.1e}, smooth: {:?}", smooth.classification),
    )
}

fn decaying_gauge() -> Check {
    let alpha = 2.5;
    let far: Vec<f64> = (0..9).map(|k| 10f64.powf(1.0 + 0.25 * k as f64)).collect();
    let zero = ConnectionSample::from_fn(&far, 32, |_, _| (C::new(0.0, 0.0), C::new(0.0, 0.0)));
    let g = holonomy::decaying_gauge(&zero, alpha, 0.4).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (i, r) in g.radii.iter().enumerate() {
        for j in 0..g.n_theta {
            // A = a dz with a = i|z|^{−α}; ∂_ρ ↦ dz = e^{iθ}, ∂_θ ↦ dz = iz
            let z = C::from_polar(*r, g.theta(j));
            let a = C::new(0.0, r.powf(-alpha));
            let k = i * g.n_theta + j;
            let scale = r.powf(1.0 - alpha);
            worst = worst.max((g.a_rho[k] - a * z / r).norm() / scale);
            worst = worst.max((g.a_theta[k] - a * C::new(0.0, 1.0) * z).norm() / scale);
        }
    }
    let exponent = holonomy::angular_exponent(&holonomy::pullback_inversion(&g));
    ensure(
        worst <= 1e-10 && (exponent - (alpha - 1.0)).abs() <= 0.05,
        format!("max deviation from i|z|^(−α)dz {worst:.1e}, pullback exponent {exponent:.4}"),
    )
}

fn decay_fit(runs: &Runs) -> Check {
    let fit = runs.single.report.holonomy.as_ref().and_then(|h| h.decay).ok_or("no decay fit")?;
    // independent least squares on the bubble's chart density tail
    let tree = runs.single.tree.as_ref().ok_or("tree missing")?;
    let f = &tree.root.children.first().ok_or("no bubble")?.limit;
    let pts: Vec<(f64, f64)> = (0..=30)
        .map(|k| {
            let rho = 10f64.powf(1.0 + 2.0 * k as f64 / 30.0);
            (rho.ln(), f.chart_density(C::new(0.0, rho)).ln())
        })
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let slope = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / pts.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>();
    ensure(
        (fit.slope + 4.0).abs() <= 0.1 && (slope + 4.0).abs() <= 0.1,
        format!("reported slope {:.4}, recomputed {slope:.4}", fit.slope),
    )
}

fn determinism(runs: &Runs) -> Check {
    let sc = scenario("single_bubble");
    let again = run_in_pool(&sc, 4);
    let one = &runs.single;
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    runner::emit_outputs(one, dirs[0].path()).map_err(|e| e.to_string())?;
    runner::emit_outputs(&again, dirs[1].path()).map_err(|e| e.to_string())?;
    let a = std::fs::read(dirs[0].path().join("report.json")).map_err(|e| e.to_string())?;
    let b = std::fs::read(dirs[1].path().join("report.json")).map_err(|e| e.to_string())?;
    let third = run_in_pool(&sc, 4);
    let c = serde_json::to_vec_pretty(&third.report).map_err(|e| e.to_string())?;
    ensure(a == b && b == c, format!("report.json identical for 1 vs 4 threads: {}, repeat run: {}", a == b, b == c))
}

fn main() {
    let runs = Runs {
        single: run_in_pool(&scenario("single_bubble"), 1),
        two_scale: run_in_pool(&scenario("two_scale"), 4),
        smooth: run_in_pool(&scenario("smooth_map"), 4),
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("spectral geometry", Box::new(spectral_geometry)),
        ("Kazdan-Warner exact solutions", Box::new(kw_oracles)),
        ("adiabatic limit rate", Box::new(adiabatic_limit)),
        ("vortex/KW residual identity", Box::new(|| residual_identity(&runs))),
        ("energy equals degree", Box::new(energy_equals_degree)),
        ("single-bubble scenario", Box::new(|| single_bubble(&runs))),
        ("renormalization scale law", Box::new(|| scale_law(&runs))),
        ("two-scale scenario", Box::new(|| two_scale(&runs))),
        ("holonomy models", Box::new(holonomy_models)),
        ("decaying gauge", Box::new(decaying_gauge)),
        ("bubble tail decay", Box::new(|| decay_fit(&runs))),
        ("determinism", Box::new(|| determinism(&runs))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(msg) => println!("PASS {:>2} {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
