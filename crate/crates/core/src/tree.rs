//! Recursive bubble tree: detection and renormalization applied to each
//! rescaled family, with energy bookkeeping, the ghost-bubble rule and a
//! Gromov-type convergence report.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bubble::{self, BubbleConfig, BubbleError, EnergyAtom, Regime};
use crate::holo::{self, fs_distance, ChartPoint, HoloMap, MapFamily};
use crate::holonomy::{self, Condition};
use crate::sphere::{self, CenteredChart};

type C = Complex64;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error(transparent)]
    Bubble(#[from] BubbleError),
    #[error(transparent)]
    Holo(#[from] holo::HoloError),
    #[error("internal error: tree depth {depth} exceeds the bound {bound}")]
    DepthBound { depth: usize, bound: usize },
}

pub type Result<T> = std::result::Result<T, TreeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurfaceTag {
    Root,
    Sphere,
    ConicSphere { beta: f64 },
}

impl SurfaceTag {
    pub fn label(&self) -> &'static str {
        match self {
            SurfaceTag::Root => "root",
            SurfaceTag::Sphere => "sphere",
            SurfaceTag::ConicSphere { .. } => "conic-sphere",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleNode {
    pub tag: SurfaceTag,
    pub limit: HoloMap,
    /// Numerical energy of the limit map.
    pub energy: f64,
    pub degree: usize,
    /// Attachment point in the parent's chart (`None` for the root).
    pub attachment: Option<ChartPoint>,
    /// Mass of the parent atom this node resolves.
    pub atom_mass: Option<f64>,
    pub regime: Option<Regime>,
    /// Normalized scale `t̂` at the largest `s`.
    pub scale: Option<f64>,
    pub tau: Option<f64>,
    /// Scale profile along the schedule (children only).
    pub renorm: Option<bubble::RenormScale>,
    /// Rescaled-disc energy against the parent disc energy, per `s`.
    pub energy_check: Vec<bubble::EnergyPair>,
    /// Mass outside the raw-scale unit disc, per `s`.
    pub hemisphere_mass: Vec<f64>,
    pub children: Vec<BubbleNode>,
    /// Analysis failure below this node (partial tree).
    pub error: Option<String>,
    /// Family in this node's chart (the input family at the root).
    #[serde(skip)]
    pub family: Option<MapFamily>,
}

impl BubbleNode {
    pub fn leaf(tag: SurfaceTag, limit: HoloMap, attachment: Option<ChartPoint>) -> Self {
        let degree = limit.degree;
        BubbleNode {
            tag,
            energy: degree as f64,
            degree,
            limit,
            attachment,
            atom_mass: None,
            regime: None,
            scale: None,
            tau: None,
            renorm: None,
            energy_check: vec![],
            hemisphere_mass: vec![],
            children: vec![],
            error: None,
            family: None,
        }
    }

    pub fn depth(&self) -> usize {
        self.children.iter().map(|c| 1 + c.depth()).max().unwrap_or(0)
    }

    pub fn walk<'a>(&'a self, path: &mut Vec<usize>, out: &mut Vec<(Vec<usize>, &'a BubbleNode)>) {
        out.push((path.clone(), self));
        for (i, c) in self.children.iter().enumerate() {
            path.push(i);
            c.walk(path, out);
            path.pop();
        }
    }

    pub fn to_json(&self) -> Value {
        let attachment = match self.attachment {
            None => Value::Null,
            Some(ChartPoint::Infinity) => json!("infinity"),
            Some(p) => {
                let z = p.value().expect("finite");
                json!([z.re, z.im])
            }
        };
        let coeffs: Vec<Vec<[f64; 2]>> =
            self.limit.components.iter().map(|p| p.coeffs.iter().map(|c| [c.re, c.im]).collect()).collect();
        let mut v = json!({
            "tag": self.tag.label(),
            "energy": self.energy,
            "degree": self.degree,
            "attachment": attachment,
            "map": { "degree": self.limit.degree, "coeffs": coeffs },
            "regime": self.regime.as_ref().map(|r| serde_json::to_value(r).expect("regime")),
            "children": self.children.iter().map(|c| c.to_json()).collect::<Vec<_>>(),
        });
        let obj = v.as_object_mut().expect("object");
        if let SurfaceTag::ConicSphere { beta } = self.tag {
            obj.insert("beta".into(), json!(beta));
        }
        if let Some(m) = self.atom_mass {
            obj.insert("atom_mass".into(), json!(m));
        }
        if let Some(t) = self.tau {
            obj.insert("tau".into(), json!(t));
        }
        if let Some(t) = self.scale {
            obj.insert("scale".into(), json!(t));
        }
        if let Some(e) = &self.error {
            obj.insert("error".into(), json!(e));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleTree {
    pub root: BubbleNode,
    pub total_energy: f64,
    pub total_degree: usize,
    pub depth: usize,
}

impl BubbleTree {
    pub fn from_root(root: BubbleNode) -> Self {
        let mut nodes = Vec::new();
        root.walk(&mut vec![], &mut nodes);
        let total_energy = nodes.iter().map(|(_, n)| n.energy).sum();
        let total_degree = nodes.iter().map(|(_, n)| n.degree).sum();
        let depth = root.depth();
        BubbleTree { root, total_energy, total_degree, depth }
    }

    pub fn nodes(&self) -> Vec<(Vec<usize>, &BubbleNode)> {
        let mut out = Vec::new();
        self.root.walk(&mut vec![], &mut out);
        out
    }

    pub fn to_json(&self) -> Value {
        json!({
            "total_energy": self.total_energy,
            "total_degree": self.total_degree,
            "depth": self.depth,
            "root": self.root.to_json(),
        })
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph bubble_tree {\n  node [shape=ellipse];\n");
        for (path, n) in self.nodes() {
            let id = node_id(&path);
            out.push_str(&format!(
                "  {id} [label=\"{} E={:.4}\\ndeg {}{}\"];\n",
                n.tag.label(),
                n.energy,
                n.degree,
                n.regime.as_ref().map(|r| format!("\\n{}", r.label())).unwrap_or_default()
            ));
            if !path.is_empty() {
                let parent = node_id(&path[..path.len() - 1]);
                let label = match n.attachment {
                    Some(ChartPoint::Infinity) => "∞".to_string(),
                    Some(p) => {
                        let z = p.value().expect("finite");
                        format!("{:.4}{:+.4}i", z.re, z.im)
                    }
                    None => String::new(),
                };
                out.push_str(&format!("  {parent} -> {id} [label=\"{label}\"];\n"));
            }
        }
        out.push_str("}\n");
        out
    }
}

fn node_id(path: &[usize]) -> String {
    let mut s = String::from("n");
    for p in path {
        s.push('_');
        s.push_str(&p.to_string());
    }
    s
}

pub fn path_string(path: &[usize]) -> String {
    if path.is_empty() {
        "root".into()
    } else {
        format!("root/{}", path.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("/"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct TreeConfig {
    pub bubble: BubbleConfig,
    /// Tolerance of the numerical node energies.
    pub energy_tol: f64,
}

impl TreeConfig {
    pub fn new(bubble: BubbleConfig) -> Self {
        TreeConfig { bubble, energy_tol: 1e-9 }
    }
}

fn depth_bound(r: usize, c0: f64) -> usize {
    (r as f64 / c0).ceil() as usize
}

fn node_energy(limit: &HoloMap, tol: f64) -> f64 {
    if limit.degree == 0 {
        0.0
    } else {
        holo::numerical_energy(limit, tol.max(1e-12)).value
    }
}

/// Tag from the holonomy of the bubble's connection at its attachment point.
fn surface_tag(limit: &HoloMap) -> SurfaceTag {
    match holonomy::point_condition(limit, ChartPoint::Infinity) {
        Ok(rep) => match rep.classification {
            Condition::HBeta { beta } if !(beta - beta.round()).abs().le(&1e-3) => SurfaceTag::ConicSphere { beta },
            _ => SurfaceTag::Sphere,
        },
        Err(_) => SurfaceTag::Sphere,
    }
}

fn expand(
    fam: &MapFamily,
    f0: &HoloMap,
    atoms: &[EnergyAtom],
    depth: usize,
    bound: usize,
    cfg: &TreeConfig,
) -> Result<Vec<BubbleNode>> {
    if !atoms.is_empty() && depth > bound {
        return Err(TreeError::DepthBound { depth, bound });
    }
    let results: Vec<Result<BubbleNode>> = atoms.par_iter().map(|a| child(fam, f0, a, depth, bound, cfg)).collect();
    results.into_iter().collect()
}

fn child(fam: &MapFamily, f0: &HoloMap, atom: &EnergyAtom, depth: usize, bound: usize, cfg: &TreeConfig) -> Result<BubbleNode> {
    let bc = &cfg.bubble;
    type Resolved = (bubble::RenormScale, bubble::RescaledFamily, bubble::BubbleLimit, Regime);
    let attempt = || -> std::result::Result<Resolved, BubbleError> {
        let scale = bubble::compute_scale(fam, f0, atom, bc)?;
        let regime = bubble::classify_regime(&scale.t, &scale.schedule)?;
        let rf = bubble::renormalize_family(fam, f0, atom, &scale, &regime, bc)?;
        let bl = bubble::bubble_limit(&rf, bc)?;
        Ok((scale, rf, bl, regime))
    };
    match attempt() {
        Ok((scale, rf, bl, regime)) => {
            let children = expand(&rf.family, &bl.limit, &bl.new_atoms, depth + 1, bound, cfg)?;
            Ok(BubbleNode {
                tag: surface_tag(&bl.limit),
                energy: node_energy(&bl.limit, cfg.energy_tol),
                degree: bl.limit.degree,
                limit: bl.limit,
                attachment: Some(atom.point),
                atom_mass: Some(atom.mass),
                regime: Some(regime),
                scale: rf.t_hat.last().copied(),
                tau: Some(bl.tau),
                renorm: Some(scale),
                energy_check: rf.energy_check,
                hemisphere_mass: rf.hemisphere_mass,
                children,
                error: None,
                family: Some(rf.family),
            })
        }
        Err(BubbleError::Theory(m)) => Err(TreeError::Bubble(BubbleError::Theory(m))),
        Err(e) => {
            // partial tree: the atom stays as an unresolved leaf
            let mut leaf = BubbleNode::leaf(SurfaceTag::Sphere, HoloMap::constant(&vec![C::new(1.0, 0.0); fam.k() + 1])?, Some(atom.point));
            leaf.atom_mass = Some(atom.mass);
            leaf.error = Some(e.to_string());
            Ok(leaf)
        }
    }
}

/// Root = limit of the input family; every atom spawns a child resolved
/// by rescaling, recursively.
pub fn build_tree(fam: &MapFamily, cfg: &TreeConfig) -> Result<BubbleTree> {
    let bc = &cfg.bubble;
    let atoms = bubble::detect_atoms(fam, bc)?;
    let sites: Vec<holo::AtomSite> = atoms.iter().map(|a| a.site()).collect();
    let root_limit = holo::uhlenbeck_limit(fam, &sites)?.limit;
    let bound = depth_bound(fam.degree(), bc.c0);
    let children = expand(fam, &root_limit, &atoms, 1, bound, cfg)?;
    let root = BubbleNode {
        tag: SurfaceTag::Root,
        energy: node_energy(&root_limit, cfg.energy_tol),
        degree: root_limit.degree,
        limit: root_limit,
        attachment: None,
        atom_mass: None,
        regime: None,
        scale: None,
        tau: None,
        renorm: None,
        energy_check: vec![],
        hemisphere_mass: vec![],
        children,
        error: None,
        family: Some(fam.clone()),
    };
    let tree = BubbleTree::from_root(root);
    if tree.depth > bound {
        return Err(TreeError::DepthBound { depth: tree.depth, bound });
    }
    Ok(tree)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub rule: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservationReport {
    pub degree: usize,
    pub total_degree: usize,
    pub total_energy: f64,
    pub max_tau: f64,
    pub violations: Vec<Violation>,
}

impl ConservationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Energy conservation, ghost rule and per-node mass balance.
pub fn verify_conservation(tree: &BubbleTree, r: usize) -> ConservationReport {
    let mut violations = Vec::new();
    let nodes = tree.nodes();
    let total_degree: usize = nodes.iter().map(|(_, n)| n.degree).sum();
    let total_energy: f64 = nodes.iter().map(|(_, n)| n.energy).sum();
    if total_degree != r {
        violations.push(Violation {
            path: "root".into(),
            rule: "conservation".into(),
            detail: format!("node degrees sum to {total_degree}, expected {r}"),
        });
    }
    if (total_energy - r as f64).abs() > 1e-2 * r.max(1) as f64 {
        violations.push(Violation {
            path: "root".into(),
            rule: "conservation".into(),
            detail: format!("node energies sum to {total_energy:.6}, expected {r}"),
        });
    }
    let mut max_tau = 0.0f64;
    for (path, n) in &nodes {
        let p = path_string(path);
        if (n.energy - n.degree as f64).abs() > 1e-6 {
            violations.push(Violation { path: p.clone(), rule: "energy-degree".into(), detail: format!("E = {} vs degree {}", n.energy, n.degree) });
        }
        if !path.is_empty() && n.energy < 0.05 && n.children.len() < 2 {
            violations.push(Violation {
                path: p.clone(),
                rule: "ghost".into(),
                detail: format!("ghost bubble with {} children", n.children.len()),
            });
        }
        if let Some(mass) = n.atom_mass {
            let children: f64 = n.children.iter().filter_map(|c| c.atom_mass).sum();
            let tau = mass - n.energy - children;
            max_tau = max_tau.max(tau.abs());
            if tau.abs() > 1e-2 {
                violations.push(Violation {
                    path: p.clone(),
                    rule: "mass-balance".into(),
                    detail: format!("atom mass {mass:.6} = E {:.6} + children {children:.6} + {tau:.3e}", n.energy),
                });
            }
        }
        if let Some(e) = &n.error {
            violations.push(Violation { path: p.clone(), rule: "unresolved".into(), detail: e.clone() });
        }
        let mut seen: Vec<Option<C>> = Vec::new();
        for c in &n.children {
            let a = c.attachment.and_then(|a| a.value());
            if seen.iter().any(|s| holo::chordal(*s, a) < 1e-9) {
                violations.push(Violation { path: p.clone(), rule: "distinct-attachments".into(), detail: format!("{a:?} repeated") });
            }
            seen.push(a);
        }
    }
    ConservationReport { degree: r, total_degree, total_energy, max_tau, violations }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeGromov {
    pub path: String,
    /// Sup distance at the largest `s`.
    pub sup_distance: f64,
    /// Sup distance at `s/4` when the schedule contains it.
    pub sup_distance_quarter: Option<f64>,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GromovReport {
    pub eps: f64,
    pub nodes: Vec<NodeGromov>,
    pub max_distance: f64,
    pub monotone: bool,
}

fn excluded(z: Option<C>, node: &BubbleNode, is_root: bool, eps: f64) -> bool {
    if !is_root {
        match z {
            None => return true,
            Some(y) if y.norm() > 1.0 / eps => return true,
            _ => {}
        }
    }
    node.children.iter().any(|c| {
        let a = c.attachment.expect("children are attached");
        let chart = CenteredChart::at(&a.to_sphere());
        match z {
            Some(z) => chart.forward(z).is_some_and(|w| w.norm() < eps),
            None => chart.forward_infinity().norm() < eps,
        }
    })
}

impl CenteredChart {
    /// Image of `z = ∞` in the centred chart (`∞` for the chart at ∞'s
    /// antipode is not representable; only finite centres reach here).
    pub fn forward_infinity(&self) -> C {
        match *self {
            CenteredChart::Finite(a) if a.norm() > 0.0 => a.conj().inv(),
            CenteredChart::Finite(_) => C::new(f64::INFINITY, 0.0),
            CenteredChart::Infinity => C::new(0.0, 0.0),
        }
    }
}

fn sup_distance(member: &HoloMap, node: &BubbleNode, is_root: bool, eps: f64, pts: &[Option<C>]) -> f64 {
    pts.par_iter()
        .filter(|z| !excluded(**z, node, is_root, eps))
        .map(|z| fs_distance(&member.unit_value(*z), &node.limit.unit_value(*z)))
        .reduce(|| 0.0, f64::max)
}

/// Sup Fubini–Study distance between each node's family member at the
/// largest `s` and the node's limit, off `ε`-discs around bubble points.
pub fn gromov_report(tree: &BubbleTree, eps: f64) -> Result<GromovReport> {
    let grid = sphere::build_grid(48).map_err(holo::HoloError::from)?;
    let mut pts: Vec<Option<C>> = (0..grid.len()).map(|i| grid.point(i).chart()).collect();
    pts.push(Some(C::new(0.0, 0.0)));
    pts.push(None);
    let mut nodes = Vec::new();
    let mut monotone = true;
    for (path, n) in tree.nodes() {
        let Some(fam) = &n.family else { continue };
        let is_root = path.is_empty();
        let last = fam.len() - 1;
        let sup = sup_distance(&fam.members[last], n, is_root, eps, &pts);
        let s = fam.schedule[last];
        let quarter = fam.schedule.iter().position(|x| (x * 4.0 / s - 1.0).abs() < 1e-9);
        let sq = quarter.map(|q| sup_distance(&fam.members[q], n, is_root, eps, &pts));
        let ratio = sq.map(|q| if q > 0.0 { sup / q } else if sup == 0.0 { 0.0 } else { f64::INFINITY });
        if let Some(r) = ratio {
            // exact families (ratio 0/0) count as monotone
            if sup > 1e-12 && r >= 1.0 {
                monotone = false;
            }
        }
        nodes.push(NodeGromov { path: path_string(&path), sup_distance: sup, sup_distance_quarter: sq, ratio });
    }
    let max_distance = nodes.iter().map(|n| n.sup_distance).fold(0.0, f64::max);
    Ok(GromovReport { eps, nodes, max_distance, monotone })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::holo::{projective_distance, ComponentSpec, FamilySpec, Poly};

    fn schedule(last: f64) -> Vec<f64> {
        (0..8).map(|k| last * 2f64.powi(k - 7)).collect()
    }

    fn family(components: &[(&[&str], &str)], last: f64) -> MapFamily {
        let spec = FamilySpec {
            delta: "1/s".into(),
            base_point: [2.0, 0.0],
            components: components
                .iter()
                .map(|(r, f)| ComponentSpec { roots: r.iter().map(|x| x.to_string()).collect(), fiber: f.to_string() })
                .collect(),
        };
        MapFamily::from_spec(&spec, &schedule(last)).unwrap()
    }

    fn coeffs_close(m: &HoloMap, target: &[C]) -> bool {
        projective_distance(&m.coefficient_vector(), target) < 1e-6
    }

    #[test]
    fn single_bubble_tree() {
        let fam = family(&[(&["delta"], "1-delta"), (&["-delta"], "1+delta")], 1000.0);
        let tree = build_tree(&fam, &TreeConfig::new(BubbleConfig::default())).unwrap();
        assert_eq!(tree.depth, 1);
        assert_eq!(tree.total_degree, 1);
        assert_eq!(tree.root.degree, 0);
        let child = &tree.root.children[0];
        assert_eq!(child.tag, SurfaceTag::Sphere);
        let one = C::new(1.0, 0.0);
        assert!(coeffs_close(&child.limit, &[-one, one, one, one]));
        let rep = verify_conservation(&tree, 1);
        assert!(rep.passed(), "{:?}", rep.violations);
        let g = gromov_report(&tree, 0.1).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert!(g.max_distance <= 1e-2, "{g:?}");
        assert!(g.monotone);
        let dot = tree.to_dot();
        assert!(dot.contains("n_0") && dot.contains("->"));
        assert_eq!(tree.to_json()["root"]["children"][0]["degree"], 1);
    }

    #[test]
    fn two_peak_tree() {
        let fam = family(&[(&["1", "-1"], "3"), (&["inf", "inf"], "delta")], 2048.0);
        let tree = build_tree(&fam, &TreeConfig::new(BubbleConfig::default())).unwrap();
        assert_eq!(tree.root.children.len(), 2);
        assert_eq!(tree.total_degree, 2);
        let pts: Vec<C> = tree.root.children.iter().map(|c| c.attachment.unwrap().value().unwrap()).collect();
        assert!((pts[0] + 1.0).norm() < 1e-12 && (pts[1] - 1.0).norm() < 1e-12);
        for c in &tree.root.children {
            assert_eq!(c.degree, 1);
        }
        assert!(verify_conservation(&tree, 2).passed());
    }

    #[test]
    fn two_scale_tree() {
        let fam = family(&[(&["delta", "delta^2"], "1"), (&["-delta", "-delta^2"], "1")], 2048.0);
        let tree = build_tree(&fam, &TreeConfig::new(BubbleConfig::default())).unwrap();
        assert_eq!(tree.depth, 2, "{:#}", tree.to_json());
        assert_eq!(tree.root.degree, 0);
        let child = &tree.root.children[0];
        assert_eq!(child.degree, 1);
        assert_eq!(child.children.len(), 1);
        assert_eq!(child.children[0].degree, 1);
        let rep = verify_conservation(&tree, 2);
        assert!(rep.passed(), "{:?}", rep.violations);
        assert!(rep.max_tau <= 1e-2);
    }

    #[test]
    fn trivial_tree_and_ghost_rule() {
        let f = HoloMap::new(vec![Poly::from_real(&[0.3, 1.0, 0.2]), Poly::from_real(&[1.0, -0.5])], 2).unwrap();
        let fam = MapFamily::constant(&schedule(1000.0), f).unwrap();
        let tree = build_tree(&fam, &TreeConfig::new(BubbleConfig::default())).unwrap();
        assert_eq!(tree.depth, 0);
        assert!(verify_conservation(&tree, 2).passed());
        assert!(gromov_report(&tree, 0.1).unwrap().max_distance <= 1e-10);

        let one = HoloMap::new(vec![Poly::from_real(&[0.0, 1.0]), Poly::from_real(&[1.0])], 1).unwrap();
        let flat = HoloMap::constant(&[C::new(1.0, 0.0), C::new(1.0, 0.0)]).unwrap();
        let mut ghost = BubbleNode::leaf(SurfaceTag::Sphere, flat.clone(), Some(ChartPoint::finite(C::new(0.0, 0.0))));
        ghost.children.push(BubbleNode::leaf(SurfaceTag::Sphere, one, Some(ChartPoint::finite(C::new(0.0, 0.0)))));
        let mut root = BubbleNode::leaf(SurfaceTag::Root, flat, None);
        root.children.push(ghost);
        let rep = verify_conservation(&BubbleTree::from_root(root), 1);
        assert!(rep.violations.iter().any(|v| v.rule == "ghost" && v.path == "root/0"), "{rep:?}");
    }
}
