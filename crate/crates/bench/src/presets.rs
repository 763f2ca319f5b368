//! Analytic stand-ins for the experiment geometries.

use stokes_els::geometry::{CurveKind, FourierTerm, GeometryPreset, Point, RefinementDirective, PanelSelection, Role};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedPreset {
    Circle,
    /// Three-pronged star standing in for the fish.
    Fish,
    /// Long wavy closed curve standing in for a channel.
    Channel,
    /// High-frequency Fourier curve; interior problem with condition number above `1e4`.
    Fallopian,
    /// Grid of star-shaped obstacles with nearly touching prongs (exterior problem).
    StarLattice,
}

impl NamedPreset {
    pub fn default_panels(self) -> usize {
        match self {
            NamedPreset::Circle => 10,
            NamedPreset::Fish => 200,
            NamedPreset::Channel => 120,
            NamedPreset::Fallopian => 160,
            NamedPreset::StarLattice => 10,
        }
    }

    /// Boundary components; for the lattice `n_panels` is the count on a five-pronged star.
    pub fn components(self, n_panels: usize) -> Vec<GeometryPreset> {
        let wall = |kind: CurveKind| GeometryPreset {
            kind,
            center: [0.0, 0.0],
            scale: 1.0,
            n_panels,
            q: 16,
            role: Role::Wall,
            rotation: 0.0,
        };
        match self {
            NamedPreset::Circle => vec![wall(CurveKind::Circle)],
            NamedPreset::Fish => vec![wall(CurveKind::Star {
                n_prongs: 3,
                amplitude: 0.35,
            })],
            NamedPreset::Channel => vec![wall(fourier(&[(1, 2.0), (-1, 1.2), (9, 0.04)]))],
            NamedPreset::Fallopian => vec![wall(fourier(&[(1, 1.0), (-9, 0.2), (11, 0.1)]))],
            NamedPreset::StarLattice => lattice(3, 2.6, n_panels),
        }
    }

    /// Generating Stokeslets: a ring outside a wall, or inside the first obstacle.
    pub fn sources(self) -> Vec<(Point, f64)> {
        match self {
            NamedPreset::StarLattice => vec![([0.0, 0.0], 0.4)],
            NamedPreset::Channel => vec![([0.0, 0.0], 4.5)],
            _ => vec![([0.0, 0.0], 3.0)],
        }
    }

    /// A local refinement of comparable size to the experiments.
    pub fn default_refinement(self, n_panels: usize) -> RefinementDirective {
        let (first, count, m) = match self {
            NamedPreset::Fish => (n_panels / 5, 8, 8),
            NamedPreset::StarLattice => (0, 2, 4),
            // one panel in 160, so 2N_p = 768 at 960 panels
            NamedPreset::Channel => (n_panels / 4, (n_panels / 160).max(1), 4),
            _ => (n_panels / 4, (n_panels / 25).max(1), 4),
        };
        RefinementDirective {
            selection: PanelSelection::PanelIds((first..first + count).collect()),
            m,
        }
    }
}

fn fourier(terms: &[(i32, f64)]) -> CurveKind {
    CurveKind::Fourier {
        coefficients: terms.iter().map(|&(k, re)| FourierTerm { k, re, im: 0.0 }).collect(),
    }
}

/// `n × n` stars alternating five and seven prongs, centers `gap` apart.
pub fn lattice(n: usize, gap: f64, n_panels: usize) -> Vec<GeometryPreset> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let prongs = if (i + j) % 2 == 0 { 5 } else { 7 };
            out.push(GeometryPreset {
                kind: CurveKind::Star {
                    n_prongs: prongs,
                    amplitude: 0.3,
                },
                center: [gap * i as f64, gap * j as f64],
                scale: 1.0,
                n_panels: if prongs > 5 { 2 * n_panels } else { n_panels },
                q: 16,
                role: Role::Obstacle,
                rotation: 0.3 * (i * n + j) as f64,
            });
        }
    }
    out
}
