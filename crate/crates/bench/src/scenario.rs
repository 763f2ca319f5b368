use std::path::Path;

use serde::{Deserialize, Serialize};
use stokes_els::geometry::{dist, Discretization, GeometryPreset, HoleSpec, Point, RefinementDirective};
use stokes_els::lowrank::UpdateMode;
use stokes_els::nystrom::{ring_sources, Formulation, StokesletSource};

use crate::presets::NamedPreset;
use crate::BenchError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GeometrySpec {
    Named {
        preset: NamedPreset,
        #[serde(default)]
        n_panels: Option<usize>,
    },
    Components(Vec<GeometryPreset>),
}

impl GeometrySpec {
    pub fn components(&self) -> Vec<GeometryPreset> {
        match self {
            GeometrySpec::Named { preset, n_panels } => preset.components(n_panels.unwrap_or(preset.default_panels())),
            GeometrySpec::Components(c) => c.clone(),
        }
    }

    pub fn discretize(&self) -> stokes_els::Result<Discretization> {
        let parts = self.components().iter().map(|g| (g.curve(), g.role, g.mesh())).collect();
        Discretization::from_components(parts)
    }

    /// Copy with the panel count scaled by `factor` (used for sweeps).
    pub fn scaled(&self, factor: f64) -> Self {
        let scale = |n: usize| ((n as f64 * factor).round() as usize).max(4);
        match self {
            GeometrySpec::Named { preset, n_panels } => GeometrySpec::Named {
                preset: *preset,
                n_panels: Some(scale(n_panels.unwrap_or(preset.default_panels()))),
            },
            GeometrySpec::Components(c) => GeometrySpec::Components(
                c.iter()
                    .map(|g| GeometryPreset {
                        n_panels: scale(g.n_panels),
                        ..g.clone()
                    })
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhsSpec {
    /// Five Stokeslets per ring.
    Rings(Vec<Ring>),
    Sources(Vec<StokesletSource>),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Ring {
    pub center: Point,
    pub radius: f64,
    #[serde(default = "five")]
    pub count: usize,
    #[serde(default)]
    pub phase: f64,
}

fn five() -> usize {
    5
}

impl RhsSpec {
    pub fn sources(&self) -> Vec<StokesletSource> {
        match self {
            RhsSpec::Rings(rings) => rings.iter().flat_map(|r| ring_sources(r.center, r.radius, r.count, r.phase)).collect(),
            RhsSpec::Sources(s) => s.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Snapshot {
    pub body: Point,
    /// Explicit refinement; derived from the body position when absent.
    #[serde(default)]
    pub refine: Option<RefinementDirective>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SnapshotPlan {
    /// Split factor for derived refinements.
    pub m: usize,
    /// Panels closer to the body than this many of their own lengths are refined.
    #[serde(default = "two")]
    pub distance_factor: f64,
    pub list: Vec<Snapshot>,
}

fn two() -> f64 {
    2.0
}

impl SnapshotPlan {
    /// Panels refined for one snapshot (empty when the body is far from every boundary).
    pub fn panels(&self, s: &Snapshot, disc: &Discretization) -> Vec<usize> {
        match &s.refine {
            Some(r) => r.panel_ids(disc),
            None => panels_near(disc, s.body, self.distance_factor),
        }
    }

    pub fn split(&self, s: &Snapshot) -> usize {
        s.refine.as_ref().map_or(self.m, |r| r.m)
    }
}

/// Panels whose nearest node lies within `factor` panel lengths of `x`.
pub fn panels_near(disc: &Discretization, x: Point, factor: f64) -> Vec<usize> {
    (0..disc.panels.len())
        .filter(|&p| {
            let h = disc.panel_length(p);
            disc.panel_nodes(p).any(|i| dist(disc.nodes[i], x) < factor * h)
        })
        .collect()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    #[default]
    None,
    Refine(RefinementDirective),
    AddHoles(Vec<HoleSpec>),
    Snapshots(SnapshotPlan),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "Direct-HBS")]
    DirectHbs,
    #[serde(rename = "GMRES-HBS")]
    GmresHbs,
    #[serde(rename = "Direct-Local")]
    DirectLocal,
    #[serde(rename = "GMRES-Local")]
    GmresLocal,
    #[serde(rename = "PGMRES-Local")]
    PgmresLocal,
    #[serde(rename = "GMRES-indy")]
    GmresIndy,
    #[serde(rename = "Direct-indy")]
    DirectIndy,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::DirectHbs => "Direct-HBS",
            Strategy::GmresHbs => "GMRES-HBS",
            Strategy::DirectLocal => "Direct-Local",
            Strategy::GmresLocal => "GMRES-Local",
            Strategy::PgmresLocal => "PGMRES-Local",
            Strategy::GmresIndy => "GMRES-indy",
            Strategy::DirectIndy => "Direct-indy",
        }
    }

    pub fn is_local(self) -> bool {
        matches!(self, Strategy::DirectLocal | Strategy::GmresLocal | Strategy::PgmresLocal)
    }

    /// Whether the static HBS representation needs its inverse.
    pub fn needs_inverse(self) -> bool {
        !matches!(self, Strategy::GmresHbs | Strategy::GmresLocal | Strategy::GmresIndy)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Tolerances {
    #[serde(default = "tol10")]
    pub compress: f64,
    #[serde(default = "tol10")]
    pub lowrank: f64,
    #[serde(default = "tol11")]
    pub gmres: f64,
    #[serde(default = "max_iter")]
    pub max_iter: usize,
    /// Accuracy of the preconditioner; `None` uses `compress`. For GMRES-HBS this turns
    /// on a second, preconditioned solve.
    #[serde(default)]
    pub precond: Option<f64>,
    #[serde(default = "two_step")]
    pub update_mode: UpdateMode,
}

fn tol10() -> f64 {
    1e-10
}
fn tol11() -> f64 {
    1e-11
}
fn max_iter() -> usize {
    600
}
fn two_step() -> UpdateMode {
    UpdateMode::TwoStepId
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            compress: tol10(),
            lowrank: tol10(),
            gmres: tol11(),
            max_iter: max_iter(),
            precond: None,
            update_mode: two_step(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    Auto { count: usize },
    Points(Vec<Point>),
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec::Auto { count: 50 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub geometry: GeometrySpec,
    /// Chosen from the boundary roles when absent.
    #[serde(default)]
    pub formulation: Option<Formulation>,
    #[serde(default = "one")]
    pub mu: f64,
    /// Defaults to the preset's source rings.
    #[serde(default)]
    pub rhs: Option<RhsSpec>,
    #[serde(default)]
    pub action: Action,
    pub strategy: Strategy,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub targets: TargetSpec,
    #[serde(default)]
    pub seed: u64,
    /// Compute Woodbury conditioning diagnostics.
    #[serde(default)]
    pub diagnostics: bool,
}

fn one() -> f64 {
    1.0
}

/// A scenario file holds one scenario or a list.
#[derive(Deserialize)]
#[serde(untagged)]
enum ScenarioFile {
    One(Box<Scenario>),
    Many(Vec<Scenario>),
}

impl Scenario {
    pub fn new(name: &str, geometry: GeometrySpec, strategy: Strategy) -> Self {
        Scenario {
            name: name.to_string(),
            geometry,
            formulation: None,
            mu: 1.0,
            rhs: None,
            action: Action::None,
            strategy,
            tolerances: Tolerances::default(),
            targets: TargetSpec::default(),
            seed: 0,
            diagnostics: false,
        }
    }

    pub fn load(path: &Path) -> Result<Vec<Scenario>, BenchError> {
        let text = std::fs::read_to_string(path)?;
        let list = match serde_json::from_str::<ScenarioFile>(&text)? {
            ScenarioFile::One(s) => vec![*s],
            ScenarioFile::Many(v) => v,
        };
        for s in &list {
            s.validate()?;
        }
        Ok(list)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |msg: String| Err(BenchError::Scenario(format!("{}: {msg}", self.name)));
        if self.strategy.is_local() && matches!(self.action, Action::None) {
            return bad(format!("{} needs a refine, add_holes or snapshots action", self.strategy.name()));
        }
        let t = &self.tolerances;
        for (what, v) in [("compress", t.compress), ("lowrank", t.lowrank), ("gmres", t.gmres)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{what} tolerance must lie in (0,1), got {v}"));
            }
        }
        if let Some(p) = t.precond {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("preconditioner tolerance must lie in (0,1), got {p}"));
            }
        }
        if let Action::Snapshots(s) = &self.action {
            if s.m < 2 {
                return bad("snapshot split factor must be at least 2".into());
            }
        }
        Ok(())
    }

    pub fn sources(&self) -> Vec<StokesletSource> {
        match (&self.rhs, &self.geometry) {
            (Some(r), _) => r.sources(),
            (None, GeometrySpec::Named { preset, .. }) => preset
                .sources()
                .into_iter()
                .flat_map(|(c, r)| ring_sources(c, r, 5, 0.0))
                .collect(),
            (None, GeometrySpec::Components(_)) => ring_sources([0.0, 0.0], 3.0, 5, 0.0),
        }
    }
}
