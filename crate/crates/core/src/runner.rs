//! Scenario-driven pipeline: family → KW sweep → vortex checks → atoms →
//! bubble tree → holonomy diagnostics, plus the on-disk artifacts.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bubble::{self, BubbleConfig, BubbleError, EnergyAtom};
use crate::holo::{self, FamilySpec, HoloMap, MapFamily, SectionTuple};
use crate::holonomy::{self, ConditionReport, ConnectionSample, DecayFit};
use crate::kw::{self, KwError, KwOptions};
use crate::sphere::{self, GridRef, ScalarField};
use crate::tree::{self, BubbleTree, ConservationReport, GromovReport, TreeConfig, TreeError};
use crate::vortex;

type C = Complex64;

pub const SCHEMA_VERSION: &str = "1.0.0";

pub const REPORT_SCHEMA: &str = include_str!("../../../schemas/report.schema.json");
pub const TREE_SCHEMA: &str = include_str!("../../../schemas/tree.schema.json");
pub const FIELD_SCHEMA: &str = include_str!("../../../schemas/field.schema.json");
pub const TIMINGS_SCHEMA: &str = include_str!("../../../schemas/timings.schema.json");
pub const SCENARIO_SCHEMA: &str = include_str!("../../../schemas/scenario.schema.json");

/// `(name, schema)` for every shipped schema.
pub fn schemas() -> [(&'static str, &'static str); 5] {
    [
        ("report", REPORT_SCHEMA),
        ("tree", TREE_SCHEMA),
        ("field", FIELD_SCHEMA),
        ("timings", TIMINGS_SCHEMA),
        ("scenario", SCENARIO_SCHEMA),
    ]
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("invalid scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Geometry(#[from] sphere::GeometryError),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub l_max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub s0: f64,
    pub ratio: f64,
    pub count: usize,
}

impl ScheduleSpec {
    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.s0 * self.ratio.powi(i as i32)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub kw: f64,
    pub kw_max_iter: usize,
    pub cubature: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { kw: 1e-10, kw_max_iter: 60, cubature: 1e-11 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BubbleOptions {
    pub c0: f64,
    pub eps0: f64,
    pub threshold: f64,
    pub gromov_eps: f64,
}

impl Default for BubbleOptions {
    fn default() -> Self {
        let d = BubbleConfig::default();
        BubbleOptions { c0: d.c0, eps0: d.eps0, threshold: d.threshold, gromov_eps: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HolonomyOptions {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for HolonomyOptions {
    fn default() -> Self {
        HolonomyOptions { alpha: 2.5, beta: 0.4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub k: usize,
    pub r: usize,
    pub grid: GridSpec,
    pub family: FamilySpec,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub bubble: BubbleOptions,
    #[serde(default)]
    pub holonomy: HolonomyOptions,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl Scenario {
    /// TOML, or JSON for a `.json` extension.
    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(path.to_path_buf(), e))?;
        let sc = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        Ok(sc)
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        self.family.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if self.family.components.len() != self.k + 1 {
            return bad(format!("k = {} needs {} components, family has {}", self.k, self.k + 1, self.family.components.len()));
        }
        if self.family.degree() != self.r {
            return bad(format!("r = {} but the family has degree {}", self.r, self.family.degree()));
        }
        let sc = &self.schedule;
        if !(sc.s0 > 0.0 && sc.ratio > 1.0 && sc.s0.is_finite() && sc.ratio.is_finite()) {
            return bad("schedule needs s0 > 0 and ratio > 1".into());
        }
        if sc.s0 * sc.s0 <= 4.0 * PI * self.r as f64 {
            return bad(format!("stability requires s0² > 4πr = {:.4}, got s0 = {}", 4.0 * PI * self.r as f64, sc.s0));
        }
        if sc.count < 6 {
            return bad(format!("schedule count {} < 6 (regime fits need six points)", sc.count));
        }
        if !(8..=512).contains(&self.grid.l_max) {
            return bad(format!("grid l_max {} outside [8, 512]", self.grid.l_max));
        }
        let t = &self.tolerances;
        if !(t.kw > 0.0 && t.cubature > 0.0 && t.kw_max_iter > 0) {
            return bad("tolerances must be positive".into());
        }
        let b = &self.bubble;
        if !(b.c0 > 0.0 && b.c0 < 0.5 * bubble::B0) {
            return bad(format!("C₀ = {} must lie in (0, 1/2)", b.c0));
        }
        if !(b.eps0 > 0.0 && b.threshold > 0.0 && b.gromov_eps > 0.0) {
            return bad("bubble options must be positive".into());
        }
        let h = &self.holonomy;
        if !(h.beta > 0.0 && h.beta < 1.0 && h.alpha > 3.0 - 2.0 * h.beta) {
            return bad(format!("holonomy options need β ∈ (0,1) and α > 3 − 2β, got α = {}, β = {}", h.alpha, h.beta));
        }
        Ok(())
    }

    pub fn bubble_config(&self) -> BubbleConfig {
        BubbleConfig {
            c0: self.bubble.c0,
            eps0: self.bubble.eps0,
            threshold: self.bubble.threshold,
            tol: self.tolerances.cubature,
            ..BubbleConfig::default()
        }
    }

    pub fn kw_options(&self) -> KwOptions {
        KwOptions { tol: self.tolerances.kw, max_iter: self.tolerances.kw_max_iter, warm_start: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureClass {
    Solver,
    Theory,
}

impl FailureClass {
    pub fn exit_code(&self) -> i32 {
        match self {
            FailureClass::Solver => 3,
            FailureClass::Theory => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub class: FailureClass,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub name: String,
    pub k: usize,
    pub r: usize,
    pub l_max: usize,
    pub schedule: Vec<f64>,
    pub c0: f64,
    pub eps0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub degree: usize,
    pub k: usize,
    pub params: Vec<f64>,
    pub limit_degree: usize,
    pub limit_coeffs: Vec<[f64; 2]>,
    pub bubble_divisor: Vec<DivisorPoint>,
    pub extrapolation_error: f64,
    pub c1_distances: Vec<f64>,
    pub weak_star_max_defect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivisorPoint {
    /// `null` for ∞.
    pub point: Option<[f64; 2]>,
    pub multiplicity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KwRow {
    pub s: f64,
    pub c: f64,
    pub residual_sup: f64,
    pub iterations: usize,
    pub distance_to_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KwReport {
    /// Degree of the map whose vortices are swept (the root limit).
    pub map_degree: usize,
    pub c1: f64,
    /// Spectral truncation of the background curvature on this grid.
    pub curvature_truncation: f64,
    pub rows: Vec<KwRow>,
    pub monotone: bool,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VortexRow {
    pub s: f64,
    pub residual_sup: f64,
    /// `sup|vortex residual + KW residual/2| / (1 + |c(s)|/2)`, relative to
    /// the size of the terms in either equation.
    pub kw_agreement: f64,
    pub degree: f64,
    pub ymh_curvature: f64,
    pub ymh_derivative: f64,
    pub ymh_potential: f64,
    pub ymh_total: f64,
    /// `YMH − 2πr`.
    pub bogomolny_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeReport {
    pub tree: Value,
    pub conservation: ConservationReport,
    /// `None` when the Gromov stage failed.
    pub gromov: Option<GromovReport>,
    pub scales: Vec<ScaleRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub path: String,
    pub s: f64,
    pub eps: f64,
    pub disc_mass: f64,
    pub t: f64,
    pub closed_form: f64,
    pub hemisphere_mass: f64,
    pub rescaled_energy: f64,
    pub parent_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttachmentCondition {
    pub path: String,
    pub condition: ConditionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayingGaugeReport {
    pub alpha: f64,
    pub beta: f64,
    pub pullback_exponent: f64,
    pub hbeta_satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolonomyReport {
    pub attachments: Vec<AttachmentCondition>,
    pub decaying_gauge: DecayingGaugeReport,
    /// Density tail of the first bubble (or the root limit) in its chart.
    pub decay: Option<DecayFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: String,
    pub scenario: ScenarioSummary,
    pub stages: Vec<StageStatus>,
    pub failure: Option<Failure>,
    pub family: Option<FamilyReport>,
    pub kw: Option<KwReport>,
    pub vortex: Option<Vec<VortexRow>>,
    pub atoms: Option<Vec<EnergyAtom>>,
    pub tree: Option<TreeReport>,
    pub holonomy: Option<HolonomyReport>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        self.failure.as_ref().map_or(0, |f| f.class.exit_code())
    }
}

/// Report plus the artifacts that are not part of `report.json`.
pub struct RunOutcome {
    pub report: RunReport,
    pub timings: Vec<(String, f64)>,
    pub grid: Option<GridRef>,
    pub family: Option<MapFamily>,
    pub tree: Option<BubbleTree>,
    pub kw_phi: Option<ScalarField>,
    pub vortex_u: Option<ScalarField>,
}

struct Stage<'a> {
    outcome: &'a mut RunOutcome,
}

impl Stage<'_> {
    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T, (FailureClass, String)>) -> Option<T> {
        if self.outcome.report.failure.is_some() {
            self.outcome.report.stages.push(StageStatus { stage: name.into(), status: "skipped".into() });
            return None;
        }
        let t0 = Instant::now();
        let r = f();
        self.outcome.timings.push((name.into(), t0.elapsed().as_secs_f64()));
        match r {
            Ok(v) => {
                self.outcome.report.stages.push(StageStatus { stage: name.into(), status: "ok".into() });
                Some(v)
            }
            Err((class, cause)) => {
                self.outcome.report.stages.push(StageStatus { stage: name.into(), status: "failed".into() });
                self.outcome.report.failure = Some(Failure { stage: name.into(), class, cause });
                None
            }
        }
    }
}

/// Failure classification helpers shared with the CLI.
pub fn solver<E: std::fmt::Display>(e: E) -> (FailureClass, String) {
    (FailureClass::Solver, e.to_string())
}

pub fn classify_bubble(e: BubbleError) -> (FailureClass, String) {
    match e {
        BubbleError::Theory(_) => (FailureClass::Theory, e.to_string()),
        other => solver(other),
    }
}

pub fn classify_tree(e: TreeError) -> (FailureClass, String) {
    match e {
        TreeError::DepthBound { .. } | TreeError::Bubble(BubbleError::Theory(_)) => (FailureClass::Theory, e.to_string()),
        other => solver(other),
    }
}

fn coeffs(t: &SectionTuple) -> Vec<[f64; 2]> {
    t.coefficient_vector().iter().map(|c| [c.re, c.im]).collect()
}

/// Run a parsed scenario. Validation happens at parse time; stage failures
/// are recorded in the report, with the artifacts computed so far kept.
pub fn run_scenario(sc: &Scenario) -> RunOutcome {
    let schedule = sc.schedule.values();
    let mut outcome = RunOutcome {
        report: RunReport {
            schema_version: SCHEMA_VERSION.into(),
            scenario: ScenarioSummary {
                name: sc.name.clone(),
                k: sc.k,
                r: sc.r,
                l_max: sc.grid.l_max,
                schedule: schedule.clone(),
                c0: sc.bubble.c0,
                eps0: sc.bubble.eps0,
            },
            stages: vec![],
            failure: None,
            family: None,
            kw: None,
            vortex: None,
            atoms: None,
            tree: None,
            holonomy: None,
        },
        timings: vec![],
        grid: None,
        family: None,
        tree: None,
        kw_phi: None,
        vortex_u: None,
    };
    let bcfg = sc.bubble_config();
    let mut st = Stage { outcome: &mut outcome };

    let built = st.run("build", || {
        let grid = sphere::build_grid(sc.grid.l_max).map_err(solver)?;
        let fam = MapFamily::from_spec(&sc.family, &schedule).map_err(solver)?;
        Ok((grid, fam))
    });
    let Some((grid, fam)) = built else { return outcome };

    let atoms = st.run("atoms", || bubble::detect_atoms(&fam, &bcfg).map_err(classify_bubble));
    let limit = atoms.as_ref().and_then(|atoms| {
        st.run("uhlenbeck", || {
            let sites: Vec<holo::AtomSite> = atoms.iter().map(|a| a.site()).collect();
            holo::uhlenbeck_limit(&fam, &sites).map_err(solver)
        })
    });
    if let Some(u) = &limit {
        st.outcome.report.family = Some(FamilyReport {
            degree: fam.degree(),
            k: fam.k(),
            params: fam.params.clone(),
            limit_degree: u.limit.degree,
            limit_coeffs: coeffs(&u.limit),
            bubble_divisor: u
                .bubble_divisor
                .points
                .iter()
                .map(|(p, m)| DivisorPoint { point: p.value().map(|z| [z.re, z.im]), multiplicity: *m })
                .collect(),
            extrapolation_error: u.extrapolation_error,
            c1_distances: u.c1_distances.clone(),
            weak_star_max_defect: u.weak_star.iter().map(|w| w.defect.abs()).fold(0.0, f64::max),
        });
    }

    let sweep = limit.as_ref().and_then(|u| {
        st.run("kw_sweep", || {
            let bg = kw::build_background(&u.limit, &grid).map_err(solver)?;
            let sw = kw::sweep_field(&bg.h, bg.c1, &schedule, sc.kw_options()).map_err(|e| match e {
                KwError::LimitUndefined { .. } => (FailureClass::Theory, e.to_string()),
                other => solver(other),
            })?;
            Ok((bg, sw))
        })
    });
    if let Some((bg, sw)) = &sweep {
        st.outcome.report.kw = Some(KwReport {
            map_degree: bg.degree,
            c1: bg.c1,
            curvature_truncation: bg.curvature_truncation,
            rows: sw
                .solutions
                .iter()
                .zip(&sw.distance_to_limit)
                .map(|(s, d)| KwRow { s: s.s, c: s.c, residual_sup: s.residual_sup, iterations: s.iterations, distance_to_limit: *d })
                .collect(),
            monotone: sw.monotone,
            rate: sw.rate,
        });
        st.outcome.kw_phi = sw.solutions.last().map(|s| s.phi.clone());
    }

    if let Some((bg, sw)) = &sweep {
        let rows = st.run("vortex", || {
            let mut rows = Vec::with_capacity(sw.solutions.len());
            let mut last_u = None;
            for sol in &sw.solutions {
                let v = vortex::assemble_vortex(bg, sol).map_err(solver)?;
                let res = vortex::vortex_residual(&v);
                let p = kw::KwProblem::new(bg.h.clone(), bg.c1, sol.s, sc.kw_options()).map_err(solver)?;
                let kres = p.residual(&sol.phi);
                let scale = 1.0 + 0.5 * p.c().abs();
                let agree = res.zip_with(&kres, |a, b| a + 0.5 * b).map_err(solver)?.sup_norm() / scale;
                let y = vortex::ymh_energy(&v);
                rows.push(VortexRow {
                    s: sol.s,
                    residual_sup: res.sup_norm(),
                    kw_agreement: agree,
                    degree: vortex::degree_check(&v),
                    ymh_curvature: y.curvature,
                    ymh_derivative: y.derivative,
                    ymh_potential: y.potential,
                    ymh_total: y.total,
                    bogomolny_gap: y.total - 2.0 * PI * bg.degree as f64,
                });
                last_u = Some(v.u.clone());
            }
            Ok((rows, last_u))
        });
        if let Some((rows, u)) = rows {
            st.outcome.report.vortex = Some(rows);
            st.outcome.vortex_u = u;
        }
    }

    let tree = atoms.as_ref().and(limit.as_ref()).and_then(|_| {
        st.run("tree", || tree::build_tree(&fam, &TreeConfig::new(bcfg)).map_err(classify_tree))
    });
    if let Some(t) = &tree {
        let gromov = st.run("gromov", || tree::gromov_report(t, sc.bubble.gromov_eps).map_err(classify_tree));
        {
            let conservation = tree::verify_conservation(t, sc.r);
            let mut scales = Vec::new();
            for (path, n) in t.nodes() {
                let Some(rs) = &n.renorm else { continue };
                for i in 0..rs.t.len() {
                    scales.push(ScaleRow {
                        path: tree::path_string(&path),
                        s: rs.schedule[i],
                        eps: rs.eps[i],
                        disc_mass: rs.disc_mass[i],
                        t: rs.t[i],
                        closed_form: rs.closed_form[i],
                        hemisphere_mass: n.hemisphere_mass.get(i).copied().unwrap_or(f64::NAN),
                        rescaled_energy: n.energy_check.get(i).map_or(f64::NAN, |e| e.rescaled),
                        parent_energy: n.energy_check.get(i).map_or(f64::NAN, |e| e.parent),
                    });
                }
            }
            st.outcome.report.tree = Some(TreeReport { tree: t.to_json(), conservation, gromov, scales });
        }
    }

    let hol = st.run("holonomy", || holonomy_stage(tree.as_ref(), limit.as_ref().map(|u| &u.limit), sc));
    st.outcome.report.atoms = atoms;
    st.outcome.report.holonomy = hol;
    outcome.grid = Some(grid);
    outcome.family = Some(fam);
    outcome.tree = tree;
    outcome
}

fn holonomy_stage(
    tree: Option<&BubbleTree>,
    root_limit: Option<&HoloMap>,
    sc: &Scenario,
) -> Result<HolonomyReport, (FailureClass, String)> {
    let mut attachments = Vec::new();
    let mut bubble_map: Option<HoloMap> = None;
    if let Some(t) = tree {
        for (path, n) in t.nodes() {
            if path.is_empty() {
                continue;
            }
            if bubble_map.is_none() && n.degree > 0 {
                bubble_map = Some(n.limit.clone());
            }
            let condition = holonomy::point_condition(&n.limit, holo::ChartPoint::Infinity).map_err(solver)?;
            attachments.push(AttachmentCondition { path: tree::path_string(&path), condition });
        }
    }
    let (alpha, beta) = (sc.holonomy.alpha, sc.holonomy.beta);
    let far: Vec<f64> = (0..9).map(|k| 10f64.powf(1.0 + 0.25 * k as f64)).collect();
    let flat = ConnectionSample::from_fn(&far, 32, |_, _| (C::new(0.0, 0.0), C::new(0.0, 0.0)));
    let pulled = holonomy::pullback_inversion(&holonomy::decaying_gauge(&flat, alpha, beta).map_err(solver)?);
    let decaying_gauge = DecayingGaugeReport {
        alpha,
        beta,
        pullback_exponent: holonomy::angular_exponent(&pulled),
        hbeta_satisfied: holonomy::hbeta_criterion(&pulled, beta, 0.0).satisfied,
    };
    let tail_map = bubble_map.or_else(|| root_limit.filter(|m| m.degree > 0).cloned());
    let decay = match tail_map {
        Some(m) => {
            let samples: Vec<(f64, f64)> = (0..=20)
                .map(|k| {
                    let rho = 10f64.powf(1.0 + 0.1 * k as f64);
                    let mean = (0..16).map(|j| m.chart_density(C::from_polar(rho, 2.0 * PI * j as f64 / 16.0))).sum::<f64>() / 16.0;
                    (rho, mean)
                })
                .collect();
            Some(holonomy::decay_fit(&samples).map_err(solver)?)
        }
        None => None,
    };
    Ok(HolonomyReport { attachments, decaying_gauge, decay })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), OutputError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| OutputError::Io(dir.to_path_buf(), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| OutputError::Io(path.to_path_buf(), e))
}

/// 8-bit binary PGM of `log(1+v)` mapped linearly onto `[0, 255]`, one row
/// per colatitude ring.
pub fn heatmap_pgm(f: &ScalarField) -> Vec<u8> {
    let g = f.grid();
    let logs: Vec<f64> = f.values().iter().map(|v| v.max(0.0).ln_1p()).collect();
    let (lo, hi) = logs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", g.n_phi(), g.n_theta()).into_bytes();
    out.extend(logs.iter().map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

fn csv<T: Serialize>(rows: &[T]) -> Result<String, OutputError> {
    let mut header: Vec<String> = Vec::new();
    let mut body = String::new();
    for r in rows {
        let Value::Object(map) = serde_json::to_value(r)? else { continue };
        if header.is_empty() {
            header = map.keys().cloned().collect();
        }
        let cells: Vec<String> = header
            .iter()
            .map(|k| match &map[k] {
                Value::Number(n) => n.to_string(),
                Value::String(s) => s.clone(),
                Value::Bool(b) => b.to_string(),
                Value::Null => "nan".into(),
                other => other.to_string().replace(',', ";"),
            })
            .collect();
        let _ = writeln!(body, "{}", cells.join(","));
    }
    Ok(format!("{}\n{body}", header.join(",")))
}

/// Write `report.json`, `timings.json`, `tables/`, `fields/`, `tree.json`,
/// `tree.dot` and `heatmaps/` under `dir`.
pub fn emit_outputs(outcome: &RunOutcome, dir: &Path) -> Result<Vec<PathBuf>, OutputError> {
    std::fs::create_dir_all(dir).map_err(|e| OutputError::Io(dir.to_path_buf(), e))?;
    let mut written = Vec::new();
    let mut put = |rel: &str, bytes: &[u8]| -> Result<(), OutputError> {
        let p = dir.join(rel);
        write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    let rep = &outcome.report;
    put("report.json", serde_json::to_string_pretty(rep)?.as_bytes())?;
    let timings: serde_json::Map<String, Value> =
        outcome.timings.iter().map(|(k, v)| (k.clone(), Value::from(*v))).collect();
    put("timings.json", serde_json::to_string_pretty(&serde_json::json!({ "stages": timings }))?.as_bytes())?;
    if let Some(kw) = &rep.kw {
        put("tables/kw_sweep.csv", csv(&kw.rows)?.as_bytes())?;
    }
    if let Some(v) = &rep.vortex {
        put("tables/vortex.csv", csv(v)?.as_bytes())?;
    }
    if let Some(atoms) = &rep.atoms {
        #[derive(Serialize)]
        struct AtomRow {
            re: f64,
            im: f64,
            at_infinity: bool,
            mass: f64,
            capture_radius: f64,
        }
        let rows: Vec<AtomRow> = atoms
            .iter()
            .map(|a| {
                let z = a.point.value();
                AtomRow {
                    re: z.map_or(f64::NAN, |z| z.re),
                    im: z.map_or(f64::NAN, |z| z.im),
                    at_infinity: z.is_none(),
                    mass: a.mass,
                    capture_radius: a.capture_radius,
                }
            })
            .collect();
        put("tables/atoms.csv", csv(&rows)?.as_bytes())?;
    }
    if let Some(t) = &rep.tree {
        put("tables/scales.csv", csv(&t.scales)?.as_bytes())?;
    }
    if let Some(tree) = &outcome.tree {
        #[derive(Serialize)]
        struct NodeRow {
            path: String,
            tag: String,
            energy: f64,
            degree: usize,
            atom_mass: Option<f64>,
            tau: Option<f64>,
            regime: String,
        }
        let rows: Vec<NodeRow> = tree
            .nodes()
            .into_iter()
            .map(|(p, n)| NodeRow {
                path: tree::path_string(&p),
                tag: n.tag.label().into(),
                energy: n.energy,
                degree: n.degree,
                atom_mass: n.atom_mass,
                tau: n.tau,
                regime: n.regime.as_ref().map_or("-".into(), |r| r.label().into()),
            })
            .collect();
        put("tables/tree_nodes.csv", csv(&rows)?.as_bytes())?;
        put("tree.json", serde_json::to_string_pretty(&tree.to_json())?.as_bytes())?;
        put("tree.dot", tree.to_dot().as_bytes())?;
    }
    let fields = dir.join("fields");
    let mut heatmaps = Vec::new();
    let mut dump = |f: &ScalarField, stem: &str, quantity: &str| -> Result<(), OutputError> {
        sphere::write_field_dump(f, &fields, stem, quantity)?;
        written.push(fields.join(format!("{stem}.f64")));
        written.push(fields.join(format!("{stem}.json")));
        Ok(())
    };
    if let (Some(grid), Some(fam)) = (&outcome.grid, &outcome.family) {
        let first = holo::energy_density(&fam.members[0], grid);
        let last = holo::energy_density(fam.last(), grid);
        dump(&first, "energy_first", "energy density e(f) at the first schedule point")?;
        dump(&last, "energy_last", "energy density e(f) at the last schedule point")?;
        for (stem, f) in [("energy_first", &first), ("energy_last", &last)] {
            let p = dir.join(format!("heatmaps/{stem}.pgm"));
            write(&p, &heatmap_pgm(f))?;
            heatmaps.push(p);
        }
    }
    if let Some(phi) = &outcome.kw_phi {
        dump(phi, "kw_phi_last", "Kazdan-Warner solution at the last schedule point")?;
    }
    if let Some(u) = &outcome.vortex_u {
        dump(u, "vortex_u_last", "vortex gauge function u at the last schedule point")?;
    }
    written.extend(heatmaps);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOOTH: &str = r#"
name = "smooth"
k = 1
r = 1
[grid]
l_max = 48
[family]
delta = "1/s"
base_point = [2.0, 0.0]
[[family.components]]
roots = ["0.5+delta"]
[[family.components]]
roots = ["-0.5"]
[schedule]
s0 = 16.0
ratio = 2.0
count = 6
"#;

    #[test]
    fn validation_errors() {
        let ok = Scenario::from_toml(SMOOTH).unwrap();
        assert_eq!(ok.schedule.values().len(), 6);
        let unstable = SMOOTH.replace("s0 = 16.0", "s0 = 3.0");
        assert!(matches!(Scenario::from_toml(&unstable), Err(ScenarioError::Invalid(m)) if m.contains("stability")));
        let short = SMOOTH.replace("count = 6", "count = 5");
        assert!(matches!(Scenario::from_toml(&short), Err(ScenarioError::Invalid(_))));
        let unknown = format!("{SMOOTH}\n[extra]\nx = 1\n");
        assert!(matches!(Scenario::from_toml(&unknown), Err(ScenarioError::Parse(_))));
        let json = serde_json::to_string(&ok).unwrap();
        assert_eq!(Scenario::from_json(&json).unwrap(), ok);
    }

    #[test]
    fn heatmap_peak() {
        // e(f_δ) for [z : δ], δ = 0.05, peaks at z = 0 (the south pole)
        let grid = sphere::build_grid(32).unwrap();
        let f = HoloMap::new(vec![holo::Poly::from_real(&[0.0, 1.0]), holo::Poly::from_real(&[0.05])], 1).unwrap();
        let e = holo::energy_density(&f, &grid);
        let pgm = heatmap_pgm(&e);
        let header = format!("P5\n{} {}\n255\n", grid.n_phi(), grid.n_theta());
        assert!(pgm.starts_with(header.as_bytes()));
        let px = &pgm[header.len()..];
        assert_eq!(px.len(), grid.len());
        let brightest = px.iter().enumerate().max_by_key(|(i, v)| (**v, usize::MAX - i)).unwrap().0;
        let nearest = (0..grid.len())
            .min_by(|&a, &b| {
                let (za, zb) = (grid.chart_coord(a).norm(), grid.chart_coord(b).norm());
                za.total_cmp(&zb)
            })
            .unwrap();
        assert_eq!(brightest / grid.n_phi(), nearest / grid.n_phi());
        assert_eq!(px[nearest], 255);
    }

    #[test]
    fn smooth_scenario_outputs() {
        let sc = Scenario::from_toml(SMOOTH).unwrap();
        let out = run_scenario(&sc);
        assert_eq!(out.report.failure, None, "{:?}", out.report.stages);
        assert_eq!(out.report.exit_code(), 0);
        let tree = out.report.tree.as_ref().unwrap();
        assert!(tree.conservation.passed());
        assert_eq!(tree.tree["depth"], 0);
        for v in out.report.vortex.as_ref().unwrap() {
            assert!(v.kw_agreement < 1e-12, "{v:?}");
            assert!((v.degree - 1.0).abs() < 1e-8);
        }
        let dir = tempfile::tempdir().unwrap();
        let files = emit_outputs(&out, dir.path()).unwrap();
        for rel in ["report.json", "timings.json", "tree.json", "tree.dot", "tables/kw_sweep.csv", "heatmaps/energy_first.pgm"] {
            assert!(files.iter().any(|p| p.ends_with(rel)), "{rel} missing");
        }
        let (_, back) = sphere::read_field_dump(&dir.path().join("fields/energy_first.f64")).unwrap();
        let orig = holo::energy_density(&out.family.as_ref().unwrap().members[0], out.grid.as_ref().unwrap());
        assert!(back.values().iter().zip(orig.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
