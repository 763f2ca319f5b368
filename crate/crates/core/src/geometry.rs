//! Parametric closed curves, Gauss panelization and refinement bookkeeping.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;

pub type Point = [f64; 2];

const TWO_PI: f64 = 2.0 * PI;
/// Sample count used for simplicity and containment checks.
const CHECK_SAMPLES: usize = 1024;

/// One term `c_k e^{ikt}` of a complex Fourier curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierTerm {
    pub k: i32,
    pub re: f64,
    pub im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum CurveKind {
    Circle,
    Ellipse { a: f64, b: f64 },
    /// `r(t) = 1 + amplitude cos(n_prongs t)`.
    Star { n_prongs: u32, amplitude: f64 },
    /// `z(t) = Σ c_k e^{ikt}`.
    Fourier { coefficients: Vec<FourierTerm> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParametricCurve {
    #[serde(flatten)]
    pub kind: CurveKind,
    pub center: Point,
    pub scale: f64,
    /// Parameter direction; `false` traverses the curve clockwise.
    #[serde(default = "default_true")]
    pub counterclockwise: bool,
    /// Rotation angle applied before translation.
    #[serde(default)]
    pub rotation: f64,
}

fn default_true() -> bool {
    true
}

/// Position, first and second derivative at a parameter value.
#[derive(Clone, Copy, Debug)]
pub struct CurvePoint {
    pub x: Point,
    pub dx: Point,
    pub ddx: Point,
}

impl ParametricCurve {
    pub fn new(kind: CurveKind, center: Point, scale: f64) -> Self {
        ParametricCurve {
            kind,
            center,
            scale,
            counterclockwise: true,
            rotation: 0.0,
        }
    }

    pub fn circle(center: Point, radius: f64) -> Self {
        Self::new(CurveKind::Circle, center, radius)
    }

    pub fn ellipse(center: Point, a: f64, b: f64) -> Self {
        Self::new(CurveKind::Ellipse { a, b }, center, 1.0)
    }

    pub fn star(center: Point, scale: f64, n_prongs: u32, amplitude: f64) -> Self {
        Self::new(CurveKind::Star { n_prongs, amplitude }, center, scale)
    }

    pub fn fourier(center: Point, scale: f64, coefficients: Vec<FourierTerm>) -> Self {
        Self::new(CurveKind::Fourier { coefficients }, center, scale)
    }

    pub fn with_rotation(mut self, angle: f64) -> Self {
        self.rotation = angle;
        self
    }

    pub fn reversed(mut self) -> Self {
        self.counterclockwise = !self.counterclockwise;
        self
    }

    fn eval_reference(&self, t: f64) -> CurvePoint {
        match &self.kind {
            CurveKind::Circle => {
                let (s, c) = t.sin_cos();
                CurvePoint {
                    x: [c, s],
                    dx: [-s, c],
                    ddx: [-c, -s],
                }
            }
            CurveKind::Ellipse { a, b } => {
                let (s, c) = t.sin_cos();
                CurvePoint {
                    x: [a * c, b * s],
                    dx: [-a * s, b * c],
                    ddx: [-a * c, -b * s],
                }
            }
            CurveKind::Star { n_prongs, amplitude } => {
                let n = *n_prongs as f64;
                let (sn, cn) = (n * t).sin_cos();
                let r = 1.0 + amplitude * cn;
                let dr = -amplitude * n * sn;
                let ddr = -amplitude * n * n * cn;
                let (s, c) = t.sin_cos();
                CurvePoint {
                    x: [r * c, r * s],
                    dx: [dr * c - r * s, dr * s + r * c],
                    ddx: [
                        ddr * c - 2.0 * dr * s - r * c,
                        ddr * s + 2.0 * dr * c - r * s,
                    ],
                }
            }
            CurveKind::Fourier { coefficients } => {
                let mut p = CurvePoint {
                    x: [0.0; 2],
                    dx: [0.0; 2],
                    ddx: [0.0; 2],
                };
                for term in coefficients {
                    let k = term.k as f64;
                    let (s, c) = (k * t).sin_cos();
                    // c_k e^{ikt}
                    let zr = term.re * c - term.im * s;
                    let zi = term.re * s + term.im * c;
                    p.x[0] += zr;
                    p.x[1] += zi;
                    p.dx[0] += -k * zi;
                    p.dx[1] += k * zr;
                    p.ddx[0] += -k * k * zr;
                    p.ddx[1] += -k * k * zi;
                }
                p
            }
        }
    }

    /// Evaluate the curve and its first two derivatives at `t`.
    pub fn eval(&self, t: f64) -> CurvePoint {
        let (tt, sgn) = if self.counterclockwise { (t, 1.0) } else { (-t, -1.0) };
        let p = self.eval_reference(tt);
        let (s, c) = self.rotation.sin_cos();
        let rot = |v: Point| [c * v[0] - s * v[1], s * v[0] + c * v[1]];
        let sc = self.scale;
        let x = rot(p.x);
        let dx = rot(p.dx);
        let ddx = rot(p.ddx);
        CurvePoint {
            x: [self.center[0] + sc * x[0], self.center[1] + sc * x[1]],
            dx: [sgn * sc * dx[0], sgn * sc * dx[1]],
            ddx: [sc * ddx[0], sc * ddx[1]],
        }
    }

    /// Polygonal sample of the curve with `n` vertices.
    pub fn sample(&self, n: usize) -> Vec<Point> {
        (0..n).map(|i| self.eval(TWO_PI * i as f64 / n as f64).x).collect()
    }

    /// Signed area from a fine polygonal sample (positive when traversed counterclockwise).
    pub fn signed_area(&self) -> f64 {
        polygon_signed_area(&self.sample(CHECK_SAMPLES))
    }

    /// Check the curve invariants: positive speed, finite values, no self-intersection.
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Geometry(format!("curve scale must be positive, got {}", self.scale)));
        }
        let mut max_speed: f64 = 0.0;
        let mut min_speed = f64::INFINITY;
        for i in 0..CHECK_SAMPLES {
            let p = self.eval(TWO_PI * i as f64 / CHECK_SAMPLES as f64);
            if !(p.x[0].is_finite() && p.x[1].is_finite()) {
                return Err(Error::Geometry("curve evaluates to a non-finite point".into()));
            }
            let sp = norm(p.dx);
            max_speed = max_speed.max(sp);
            min_speed = min_speed.min(sp);
        }
        if !(min_speed > 1e-12 * max_speed) {
            return Err(Error::Geometry("curve speed vanishes".into()));
        }
        let poly = self.sample(CHECK_SAMPLES);
        if polygon_self_intersects(&poly) {
            return Err(Error::Geometry("curve is not simple at sampling resolution".into()));
        }
        Ok(())
    }
}

/// Whether the fluid lies inside (`Wall`) or outside (`Obstacle`) a component curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Wall,
    Obstacle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Panel {
    pub a: f64,
    pub b: f64,
    pub q: usize,
    pub level: u32,
}

impl Panel {
    pub fn half_length(&self) -> f64 {
        0.5 * (self.b - self.a)
    }
}

/// Ordered panels partitioning `[0, 2π)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelMesh {
    pub panels: Vec<Panel>,
}

impl PanelMesh {
    pub fn uniform(n_panels: usize, q: usize) -> Self {
        let panels = (0..n_panels)
            .map(|i| Panel {
                a: TWO_PI * i as f64 / n_panels as f64,
                b: if i + 1 == n_panels {
                    TWO_PI
                } else {
                    TWO_PI * (i + 1) as f64 / n_panels as f64
                },
                q,
                level: 0,
            })
            .collect();
        PanelMesh { panels }
    }

    pub fn len(&self) -> usize {
        self.panels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.panels.is_empty()
    }

    /// Total parameter length and whether intervals tile `[0, 2π)` without gaps.
    pub fn is_partition(&self) -> bool {
        if self.panels.is_empty() || self.panels[0].a != 0.0 {
            return false;
        }
        let contiguous = self.panels.windows(2).all(|w| w[0].b == w[1].a && w[0].a < w[0].b);
        contiguous && self.panels.last().map(|p| p.b) == Some(TWO_PI)
    }
}

#[derive(Clone, Debug)]
pub struct Component {
    pub curve: ParametricCurve,
    pub role: Role,
    pub mesh: PanelMesh,
    /// First global node index.
    pub node_start: usize,
    /// First global panel index.
    pub panel_start: usize,
    pub n_nodes: usize,
    /// `+1` if the parametrization is counterclockwise, `-1` otherwise.
    pub orientation: f64,
}

/// Global information about one panel.
#[derive(Clone, Copy, Debug)]
pub struct PanelInfo {
    pub component: usize,
    pub local: usize,
    pub panel: Panel,
    pub first_node: usize,
}

/// Nyström nodes, weights and geometric data for a union of closed curves.
#[derive(Clone, Debug)]
pub struct Discretization {
    pub components: Vec<Component>,
    pub panels: Vec<PanelInfo>,
    pub nodes: Vec<Point>,
    pub weights: Vec<f64>,
    /// Unit normals pointing out of the fluid domain.
    pub normals: Vec<Point>,
    /// Unit normals pointing out of the region enclosed by each curve.
    pub curve_normals: Vec<Point>,
    /// Unit tangents along the parametrization.
    pub tangents: Vec<Point>,
    /// Signed curvature, positive for convex curves.
    pub curvature: Vec<f64>,
    /// `|γ'(t_i)|`.
    pub speed: Vec<f64>,
    /// Parameter values.
    pub params: Vec<f64>,
    /// Position of each node inside its panel.
    pub local_index: Vec<usize>,
    pub node_panel: Vec<usize>,
    pub node_component: Vec<usize>,
}

impl Discretization {
    /// Discretize a list of curves with their roles and meshes.
    pub fn from_components(parts: Vec<(ParametricCurve, Role, PanelMesh)>) -> Result<Self> {
        let mut d = Discretization {
            components: Vec::new(),
            panels: Vec::new(),
            nodes: Vec::new(),
            weights: Vec::new(),
            normals: Vec::new(),
            curve_normals: Vec::new(),
            tangents: Vec::new(),
            curvature: Vec::new(),
            speed: Vec::new(),
            params: Vec::new(),
            local_index: Vec::new(),
            node_panel: Vec::new(),
            node_component: Vec::new(),
        };
        let mut rules: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
        for (ci, (curve, role, mesh)) in parts.into_iter().enumerate() {
            if mesh.len() < 4 {
                return Err(Error::Geometry(format!(
                    "component {ci} needs at least 4 panels, got {}",
                    mesh.len()
                )));
            }
            if !mesh.is_partition() {
                return Err(Error::Geometry(format!(
                    "component {ci} panels do not partition [0, 2π)"
                )));
            }
            if mesh.panels.iter().any(|p| p.q < 4) {
                return Err(Error::Geometry("panels need at least 4 nodes".into()));
            }
            curve.validate()?;
            let orientation = if curve.signed_area() > 0.0 { 1.0 } else { -1.0 };
            let fluid_sign = match role {
                Role::Wall => 1.0,
                Role::Obstacle => -1.0,
            };
            let node_start = d.nodes.len();
            let panel_start = d.panels.len();
            for (pi, panel) in mesh.panels.iter().enumerate() {
                let rule = match rules.iter().find(|r| r.0 == panel.q) {
                    Some(r) => r,
                    None => {
                        let (x, w) = gauss_legendre(panel.q);
                        rules.push((panel.q, x, w));
                        rules.last().unwrap()
                    }
                };
                let gp = d.panels.len();
                d.panels.push(PanelInfo {
                    component: ci,
                    local: pi,
                    panel: *panel,
                    first_node: d.nodes.len(),
                });
                let h = panel.half_length();
                let mid = 0.5 * (panel.a + panel.b);
                for (j, (&u, &w)) in rule.1.iter().zip(&rule.2).enumerate() {
                    let t = mid + h * u;
                    let p = curve.eval(t);
                    let sp = norm(p.dx);
                    let tan = [p.dx[0] / sp, p.dx[1] / sp];
                    let nu = [orientation * tan[1], -orientation * tan[0]];
                    let kappa = -(p.ddx[0] * nu[0] + p.ddx[1] * nu[1]) / (sp * sp);
                    d.nodes.push(p.x);
                    d.weights.push(w * sp * h);
                    d.curve_normals.push(nu);
                    d.normals.push([fluid_sign * nu[0], fluid_sign * nu[1]]);
                    d.tangents.push(tan);
                    d.curvature.push(kappa);
                    d.speed.push(sp);
                    d.params.push(t);
                    d.local_index.push(j);
                    d.node_panel.push(gp);
                    d.node_component.push(ci);
                }
            }
            let n_nodes = d.nodes.len() - node_start;
            d.components.push(Component {
                curve,
                role,
                mesh,
                node_start,
                panel_start,
                n_nodes,
                orientation,
            });
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_dofs(&self) -> usize {
        2 * self.nodes.len()
    }

    pub fn role(&self, node: usize) -> Role {
        self.components[self.node_component[node]].role
    }

    pub fn perimeter(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Arc length of a global panel.
    pub fn panel_length(&self, panel: usize) -> f64 {
        let p = &self.panels[panel];
        self.weights[p.first_node..p.first_node + p.panel.q].iter().sum()
    }

    pub fn max_panel_length(&self) -> f64 {
        (0..self.panels.len()).map(|p| self.panel_length(p)).fold(0.0, f64::max)
    }

    /// Node index range of a global panel.
    pub fn panel_nodes(&self, panel: usize) -> std::ops::Range<usize> {
        let p = &self.panels[panel];
        p.first_node..p.first_node + p.panel.q
    }

    /// Cyclic neighbours of a global panel within its component.
    pub fn panel_neighbors(&self, panel: usize) -> (usize, usize) {
        let info = &self.panels[panel];
        let c = &self.components[info.component];
        let n = c.mesh.len();
        let prev = c.panel_start + (info.local + n - 1) % n;
        let next = c.panel_start + (info.local + 1) % n;
        (prev, next)
    }

    /// Distance from `x` to the nearest node and the length of that node's panel.
    pub fn nearest_node(&self, x: Point) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, y) in self.nodes.iter().enumerate() {
            let d = dist(x, *y);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Whether `x` lies in the fluid region (inside every wall, outside every obstacle).
    pub fn in_fluid(&self, x: Point) -> bool {
        self.components.iter().all(|c| {
            let poly = c.curve.sample(CHECK_SAMPLES);
            let inside = point_in_polygon(x, &poly);
            match c.role {
                Role::Wall => inside,
                Role::Obstacle => !inside,
            }
        })
    }

    /// Deterministic targets in the fluid at distance `margin` or more from every node.
    pub fn auto_targets(&self, count: usize, margin: f64) -> Vec<Point> {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for x in &self.nodes {
            for d in 0..2 {
                lo[d] = lo[d].min(x[d]);
                hi[d] = hi[d].max(x[d]);
            }
        }
        let polys: Vec<(Role, Vec<Point>)> = self
            .components
            .iter()
            .map(|c| (c.role, c.curve.sample(CHECK_SAMPLES)))
            .collect();
        let has_wall = polys.iter().any(|p| p.0 == Role::Wall);
        if !has_wall {
            // exterior problem: widen the box so targets surround the obstacles
            for d in 0..2 {
                let w = hi[d] - lo[d];
                lo[d] -= 0.5 * w;
                hi[d] += 0.5 * w;
            }
        }
        let grid = 64;
        let mut cands = Vec::new();
        for i in 0..grid {
            for j in 0..grid {
                // irrational offsets keep grid points off symmetry lines
                let fx = (i as f64 + 0.5 + 0.1234) / grid as f64;
                let fy = (j as f64 + 0.5 + 0.2718) / grid as f64;
                let x = [lo[0] + fx * (hi[0] - lo[0]), lo[1] + fy * (hi[1] - lo[1])];
                let ok = polys.iter().all(|(role, poly)| {
                    let inside = point_in_polygon(x, poly);
                    match role {
                        Role::Wall => inside,
                        Role::Obstacle => !inside,
                    }
                });
                if ok && self.nearest_node(x).1 >= margin {
                    cands.push(x);
                }
            }
        }
        if cands.len() <= count {
            return cands;
        }
        let stride = cands.len() as f64 / count as f64;
        (0..count).map(|k| cands[(k as f64 * stride) as usize]).collect()
    }
}

/// Discretize a single wall curve with `n_panels` uniform panels of `q` nodes.
pub fn panelize(curve: &ParametricCurve, n_panels: usize, q: usize) -> Result<Discretization> {
    panelize_with_role(curve, Role::Wall, n_panels, q)
}

pub fn panelize_with_role(curve: &ParametricCurve, role: Role, n_panels: usize, q: usize) -> Result<Discretization> {
    if n_panels < 4 || q < 4 {
        return Err(Error::Geometry(format!(
            "need n_panels >= 4 and q >= 4, got {n_panels} and {q}"
        )));
    }
    Discretization::from_components(vec![(curve.clone(), role, PanelMesh::uniform(n_panels, q))])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanKind {
    Refine,
    Coarsen,
    AddHoles,
}

/// Index bookkeeping between an old and a new discretization.
///
/// Indices are node indices; the degrees of freedom of node `i` are `2i` and `2i + 1`.
#[derive(Clone, Debug)]
pub struct RefinementPlan {
    pub kind: PlanKind,
    /// Old global panel ids that were split (or new panels that were merged, for coarsening).
    pub refined_panels: Vec<usize>,
    pub m: usize,
    /// For every changed old panel, the new panels replacing it.
    pub panel_groups: Vec<(usize, Vec<usize>)>,
    /// Kept nodes in the old ordering.
    pub kept_old: Vec<usize>,
    /// Kept nodes in the new ordering, aligned with `kept_old`.
    pub kept_new: Vec<usize>,
    /// Cut nodes in the old ordering.
    pub cut: Vec<usize>,
    /// Added nodes in the new ordering.
    pub added: Vec<usize>,
    pub n_old: usize,
    pub n_new: usize,
}

impl RefinementPlan {
    pub fn identity(n: usize) -> Self {
        RefinementPlan {
            kind: PlanKind::Refine,
            refined_panels: Vec::new(),
            m: 1,
            panel_groups: Vec::new(),
            kept_old: (0..n).collect(),
            kept_new: (0..n).collect(),
            cut: Vec::new(),
            added: Vec::new(),
            n_old: n,
            n_new: n,
        }
    }

    pub fn n_k(&self) -> usize {
        self.kept_old.len()
    }

    pub fn n_c(&self) -> usize {
        self.cut.len()
    }

    pub fn n_p(&self) -> usize {
        self.added.len()
    }

    pub fn n_ext(&self) -> usize {
        self.n_k() + self.n_c() + self.n_p()
    }

    pub fn is_identity(&self) -> bool {
        self.cut.is_empty() && self.added.is_empty()
    }

    /// Check index-set consistency against node counts.
    pub fn validate(&self, n_old: usize, n_new: usize) -> Result<()> {
        crate::error::check_len("plan old node count", self.n_old, n_old)?;
        crate::error::check_len("plan new node count", self.n_new, n_new)?;
        crate::error::check_len("plan kept sets", self.kept_old.len(), self.kept_new.len())?;
        let mut o: Vec<usize> = self.kept_old.iter().chain(&self.cut).copied().collect();
        o.sort_unstable();
        let mut n: Vec<usize> = self.kept_new.iter().chain(&self.added).copied().collect();
        n.sort_unstable();
        if o != (0..n_old).collect::<Vec<_>>() || n != (0..n_new).collect::<Vec<_>>() {
            return Err(Error::InvalidInput("plan index sets do not partition the node sets".into()));
        }
        Ok(())
    }

    /// Maps a new node index to `Ok(old index)` for kept nodes or `Err(position in added)`.
    pub fn new_to_old(&self) -> Vec<std::result::Result<usize, usize>> {
        let mut map = vec![Err(usize::MAX); self.n_new];
        for (o, n) in self.kept_old.iter().zip(&self.kept_new) {
            map[*n] = Ok(*o);
        }
        for (pos, n) in self.added.iter().enumerate() {
            map[*n] = Err(pos);
        }
        map
    }
}

fn rebuild_with_meshes(disc: &Discretization, meshes: Vec<PanelMesh>) -> Result<Discretization> {
    let parts = disc
        .components
        .iter()
        .zip(meshes)
        .map(|(c, m)| (c.curve.clone(), c.role, m))
        .collect();
    Discretization::from_components(parts)
}

/// Split each listed global panel into `m` equal parameter subintervals.
pub fn refine(disc: &Discretization, panel_ids: &[usize], m: usize) -> Result<(Discretization, RefinementPlan)> {
    let mut factors = vec![1usize; disc.panels.len()];
    for &p in panel_ids {
        if p >= disc.panels.len() {
            return Err(Error::InvalidInput(format!("panel id {p} out of range")));
        }
        factors[p] = m;
    }
    if panel_ids.is_empty() {
        return Ok((disc.clone(), RefinementPlan::identity(disc.len())));
    }
    if m < 2 {
        return Err(Error::InvalidInput("split factor must be at least 2".into()));
    }
    let mut ids: Vec<usize> = panel_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    split_panels(disc, &ids, &factors, m)
}

/// Like [`refine`], but also splits neighbours until adjacent panel lengths differ by at most 2×.
pub fn refine_graded(disc: &Discretization, panel_ids: &[usize], m: usize) -> Result<(Discretization, RefinementPlan)> {
    if panel_ids.is_empty() {
        return Ok((disc.clone(), RefinementPlan::identity(disc.len())));
    }
    if m < 2 {
        return Err(Error::InvalidInput("split factor must be at least 2".into()));
    }
    let mut factors = vec![1usize; disc.panels.len()];
    for &p in panel_ids {
        if p >= disc.panels.len() {
            return Err(Error::InvalidInput(format!("panel id {p} out of range")));
        }
        factors[p] = m;
    }
    let lens: Vec<f64> = (0..disc.panels.len()).map(|p| disc.panel_length(p)).collect();
    loop {
        let mut changed = false;
        for p in 0..disc.panels.len() {
            let (prev, next) = disc.panel_neighbors(p);
            for nb in [prev, next] {
                let mine = lens[p] / factors[p] as f64;
                let theirs = lens[nb] / factors[nb] as f64;
                if mine > 2.0 * theirs {
                    factors[p] *= 2;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let ids: Vec<usize> = (0..factors.len()).filter(|&p| factors[p] > 1).collect();
    split_panels(disc, &ids, &factors, m)
}

fn split_panels(
    disc: &Discretization,
    ids: &[usize],
    factors: &[usize],
    m: usize,
) -> Result<(Discretization, RefinementPlan)> {
    let mut meshes = Vec::new();
    let mut new_panel_of_old: Vec<Vec<usize>> = vec![Vec::new(); disc.panels.len()];
    let mut next_global = 0usize;
    for c in &disc.components {
        let mut panels = Vec::new();
        for (li, p) in c.mesh.panels.iter().enumerate() {
            let g = c.panel_start + li;
            let f = factors[g];
            for s in 0..f {
                let a = if s == 0 { p.a } else { p.a + (p.b - p.a) * s as f64 / f as f64 };
                let b = if s + 1 == f { p.b } else { p.a + (p.b - p.a) * (s + 1) as f64 / f as f64 };
                panels.push(Panel {
                    a,
                    b,
                    q: p.q,
                    level: p.level + u32::from(f > 1),
                });
                new_panel_of_old[g].push(next_global);
                next_global += 1;
            }
        }
        meshes.push(PanelMesh { panels });
    }
    let new = rebuild_with_meshes(disc, meshes)?;
    let mut plan = RefinementPlan {
        kind: PlanKind::Refine,
        refined_panels: ids.to_vec(),
        m,
        panel_groups: Vec::new(),
        kept_old: Vec::new(),
        kept_new: Vec::new(),
        cut: Vec::new(),
        added: Vec::new(),
        n_old: disc.len(),
        n_new: new.len(),
    };
    for (g, news) in new_panel_of_old.iter().enumerate() {
        let old_nodes = disc.panel_nodes(g);
        if factors[g] > 1 {
            plan.panel_groups.push((g, news.clone()));
            plan.cut.extend(old_nodes);
            for &np in news {
                plan.added.extend(new.panel_nodes(np));
            }
        } else {
            plan.kept_old.extend(old_nodes);
            plan.kept_new.extend(new.panel_nodes(news[0]));
        }
    }
    Ok((new, plan))
}

/// Undo a refinement: merge each group of new panels back into its parent panel.
pub fn coarsen(disc_new: &Discretization, plan: &RefinementPlan) -> Result<(Discretization, RefinementPlan)> {
    if plan.kind != PlanKind::Refine {
        return Err(Error::InvalidInput("only refinement plans can be coarsened".into()));
    }
    plan.validate(plan.n_old, disc_new.len())?;
    let mut merged_into = vec![None; disc_new.panels.len()];
    for (old, news) in &plan.panel_groups {
        for &np in news {
            merged_into[np] = Some(*old);
        }
    }
    let mut meshes = Vec::new();
    for c in &disc_new.components {
        let mut panels: Vec<Panel> = Vec::new();
        let mut last_group: Option<usize> = None;
        for (li, p) in c.mesh.panels.iter().enumerate() {
            let g = c.panel_start + li;
            match merged_into[g] {
                Some(old) if last_group == Some(old) => {
                    panels.last_mut().unwrap().b = p.b;
                }
                Some(old) => {
                    last_group = Some(old);
                    panels.push(Panel {
                        a: p.a,
                        b: p.b,
                        q: p.q,
                        level: p.level.saturating_sub(1),
                    });
                }
                None => {
                    last_group = None;
                    panels.push(*p);
                }
            }
        }
        meshes.push(PanelMesh { panels });
    }
    let old = rebuild_with_meshes(disc_new, meshes)?;
    let inverse = RefinementPlan {
        kind: PlanKind::Coarsen,
        refined_panels: plan.panel_groups.iter().flat_map(|g| g.1.clone()).collect(),
        m: plan.m,
        panel_groups: Vec::new(),
        kept_old: plan.kept_new.clone(),
        kept_new: plan.kept_old.clone(),
        cut: plan.added.clone(),
        added: plan.cut.clone(),
        n_old: plan.n_new,
        n_new: plan.n_old,
    };
    Ok((old, inverse))
}

/// A hole to be added: curve plus uniform panelization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HoleSpec {
    pub curve: ParametricCurve,
    pub n_panels: usize,
    #[serde(default = "default_q")]
    pub q: usize,
}

fn default_q() -> usize {
    16
}

/// Append obstacle components; no existing node is removed.
pub fn add_holes(disc: &Discretization, holes: &[HoleSpec]) -> Result<(Discretization, RefinementPlan)> {
    if holes.is_empty() {
        return Ok((disc.clone(), RefinementPlan::identity(disc.len())));
    }
    let existing: Vec<(Role, Vec<Point>)> = disc
        .components
        .iter()
        .map(|c| (c.role, c.curve.sample(CHECK_SAMPLES)))
        .collect();
    let mut added_polys: Vec<Vec<Point>> = Vec::new();
    for (hi, h) in holes.iter().enumerate() {
        if h.n_panels < 4 || h.q < 4 {
            return Err(Error::Geometry(format!("hole {hi}: need n_panels >= 4 and q >= 4")));
        }
        h.curve.validate()?;
        let poly = h.curve.sample(CHECK_SAMPLES);
        for (role, other) in existing.iter() {
            let clash = polygons_intersect(&poly, other)
                || match role {
                    Role::Wall => !poly.iter().all(|x| point_in_polygon(*x, other)),
                    Role::Obstacle => point_in_polygon(poly[0], other) || point_in_polygon(other[0], &poly),
                };
            if clash {
                return Err(Error::Geometry(format!(
                    "hole {hi} intersects or lies outside the existing boundary"
                )));
            }
        }
        for (hj, other) in added_polys.iter().enumerate() {
            if polygons_intersect(&poly, other) || point_in_polygon(poly[0], other) || point_in_polygon(other[0], &poly) {
                return Err(Error::Geometry(format!("holes {hj} and {hi} overlap")));
            }
        }
        added_polys.push(poly);
    }
    let mut parts: Vec<(ParametricCurve, Role, PanelMesh)> = disc
        .components
        .iter()
        .map(|c| (c.curve.clone(), c.role, c.mesh.clone()))
        .collect();
    for h in holes {
        parts.push((h.curve.clone(), Role::Obstacle, PanelMesh::uniform(h.n_panels, h.q)));
    }
    let new = Discretization::from_components(parts)?;
    let n_old = disc.len();
    let plan = RefinementPlan {
        kind: PlanKind::AddHoles,
        refined_panels: Vec::new(),
        m: 1,
        panel_groups: Vec::new(),
        kept_old: (0..n_old).collect(),
        kept_new: (0..n_old).collect(),
        cut: Vec::new(),
        added: (n_old..new.len()).collect(),
        n_old,
        n_new: new.len(),
    };
    Ok((new, plan))
}

/// Geometry preset as stored in scenario files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeometryPreset {
    #[serde(flatten)]
    pub kind: CurveKind,
    #[serde(default)]
    pub center: Point,
    #[serde(default = "default_scale")]
    pub scale: f64,
    pub n_panels: usize,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default = "default_role")]
    pub role: Role,
    #[serde(default)]
    pub rotation: f64,
}

fn default_scale() -> f64 {
    1.0
}

fn default_role() -> Role {
    Role::Wall
}

impl GeometryPreset {
    pub fn curve(&self) -> ParametricCurve {
        ParametricCurve::new(self.kind.clone(), self.center, self.scale).with_rotation(self.rotation)
    }

    pub fn mesh(&self) -> PanelMesh {
        PanelMesh::uniform(self.n_panels, self.q)
    }
}

/// Which panels to refine.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelSelection {
    PanelIds(Vec<usize>),
    AutoNear { point: Point, radius: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefinementDirective {
    #[serde(flatten)]
    pub selection: PanelSelection,
    pub m: usize,
}

impl RefinementDirective {
    /// Resolve to global panel ids of `disc`.
    pub fn panel_ids(&self, disc: &Discretization) -> Vec<usize> {
        match &self.selection {
            PanelSelection::PanelIds(ids) => ids.clone(),
            PanelSelection::AutoNear { point, radius } => (0..disc.panels.len())
                .filter(|&p| disc.panel_nodes(p).any(|i| dist(disc.nodes[i], *point) < *radius))
                .collect(),
        }
    }
}

pub fn norm(v: Point) -> f64 {
    v[0].hypot(v[1])
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn polygon_signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        s += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * s
}

pub fn point_in_polygon(x: Point, poly: &[Point]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (pi, pj) = (poly[i], poly[j]);
        if (pi[1] > x[1]) != (pj[1] > x[1]) {
            let xi = pj[0] + (x[1] - pj[1]) * (pi[0] - pj[0]) / (pi[1] - pj[1]);
            if x[0] < xi {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    ((d1 > 0.0) != (d2 > 0.0)) && ((d3 > 0.0) != (d4 > 0.0)) && d1 != 0.0 && d2 != 0.0 && d3 != 0.0 && d4 != 0.0
}

fn bbox(a: Point, b: Point) -> (Point, Point) {
    ([a[0].min(b[0]), a[1].min(b[1])], [a[0].max(b[0]), a[1].max(b[1])])
}

fn boxes_overlap(p: (Point, Point), q: (Point, Point)) -> bool {
    p.0[0] <= q.1[0] && q.0[0] <= p.1[0] && p.0[1] <= q.1[1] && q.0[1] <= p.1[1]
}

pub fn polygon_self_intersects(poly: &[Point]) -> bool {
    let n = poly.len();
    let boxes: Vec<_> = (0..n).map(|i| bbox(poly[i], poly[(i + 1) % n])).collect();
    for i in 0..n {
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if boxes_overlap(boxes[i], boxes[j])
                && segments_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n])
            {
                return true;
            }
        }
    }
    false
}

pub fn polygons_intersect(p: &[Point], q: &[Point]) -> bool {
    let (n, m) = (p.len(), q.len());
    let qb: Vec<_> = (0..m).map(|j| bbox(q[j], q[(j + 1) % m])).collect();
    for i in 0..n {
        let pb = bbox(p[i], p[(i + 1) % n]);
        for j in 0..m {
            if boxes_overlap(pb, qb[j]) && segments_cross(p[i], p[(i + 1) % n], q[j], q[(j + 1) % m]) {
                return true;
            }
        }
    }
    false
}
