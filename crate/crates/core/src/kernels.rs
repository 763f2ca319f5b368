//! Pointwise Stokes kernels in 2D.
//!
//! `r = x - y` throughout; `x` is the target, `y` the source.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{Discretization, Point};

pub type Mat2 = [[f64; 2]; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    SingleLayer,
    DoubleLayer,
    CombinedField,
    PressureFromSingle,
    PressureFromDouble,
    NullspaceCorrection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub mu: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, mu: f64) -> Result<Self> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::InvalidInput(format!("viscosity must be positive, got {mu}")));
        }
        Ok(KernelSpec { kind, mu })
    }

    /// Velocity kernel for this spec; pressure and correction kinds have none.
    pub fn velocity(&self, x: Point, y: Point, n_y: Point) -> Result<Mat2> {
        match self.kind {
            KernelKind::SingleLayer => stokeslet(x, y, self.mu),
            KernelKind::DoubleLayer => double_layer(x, y, n_y),
            KernelKind::CombinedField => {
                let s = stokeslet(x, y, self.mu)?;
                let d = double_layer(x, y, n_y)?;
                Ok([[s[0][0] + d[0][0], s[0][1] + d[0][1]], [s[1][0] + d[1][0], s[1][1] + d[1][1]]])
            }
            _ => Err(Error::InvalidInput(format!("{:?} has no velocity kernel", self.kind))),
        }
    }
}

#[inline]
fn diff(x: Point, y: Point) -> Result<(f64, f64, f64)> {
    let r0 = x[0] - y[0];
    let r1 = x[1] - y[1];
    let r2 = r0 * r0 + r1 * r1;
    if r2 == 0.0 {
        return Err(Error::SingularEvaluation);
    }
    Ok((r0, r1, r2))
}

/// Stokeslet `S_ij = (1/4πμ)(δ_ij log(1/r) + r_i r_j / r²)`.
pub fn stokeslet(x: Point, y: Point, mu: f64) -> Result<Mat2> {
    let (r0, r1, r2) = diff(x, y)?;
    Ok(stokeslet_raw(r0, r1, r2, mu))
}

#[inline]
pub(crate) fn stokeslet_raw(r0: f64, r1: f64, r2: f64, mu: f64) -> Mat2 {
    let c = 1.0 / (4.0 * PI * mu);
    let lg = -0.5 * r2.ln();
    let off = c * r0 * r1 / r2;
    [[c * (lg + r0 * r0 / r2), off], [off, c * (lg + r1 * r1 / r2)]]
}

/// Double layer `D_ij = (1/π)(r_i r_j / r²)(r·n_y / r²)`.
pub fn double_layer(x: Point, y: Point, n_y: Point) -> Result<Mat2> {
    let (r0, r1, r2) = diff(x, y)?;
    Ok(double_layer_raw(r0, r1, r2, n_y))
}

#[inline]
pub(crate) fn double_layer_raw(r0: f64, r1: f64, r2: f64, n: Point) -> Mat2 {
    let rn = r0 * n[0] + r1 * n[1];
    let c = rn / (PI * r2 * r2);
    let off = c * r0 * r1;
    [[c * r0 * r0, off], [off, c * r1 * r1]]
}

/// Pressure kernel `Q_j = (1/2π) r_j / r²` matching the Stokeslet.
pub fn pressure_single(x: Point, y: Point) -> Result<[f64; 2]> {
    let (r0, r1, r2) = diff(x, y)?;
    let c = 1.0 / (2.0 * PI * r2);
    Ok([c * r0, c * r1])
}

/// Pressure kernel `P_j = (μ/π)(-n_j / r² + 2 r_j (r·n_y) / r⁴)` matching the double layer.
pub fn pressure_double(x: Point, y: Point, n_y: Point, mu: f64) -> Result<[f64; 2]> {
    let (r0, r1, r2) = diff(x, y)?;
    let rn = r0 * n_y[0] + r1 * n_y[1];
    let c = mu / PI;
    Ok([
        c * (-n_y[0] / r2 + 2.0 * r0 * rn / (r2 * r2)),
        c * (-n_y[1] / r2 + 2.0 * r1 * rn / (r2 * r2)),
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PressureSource {
    Single,
    Double,
}

pub fn pressure_kernel(x: Point, y: Point, n_y: Point, mu: f64, source: PressureSource) -> Result<[f64; 2]> {
    match source {
        PressureSource::Single => pressure_single(x, y),
        PressureSource::Double => pressure_double(x, y, n_y, mu),
    }
}

/// `(Nτ)_i = n_i Σ_j w_j τ_j·n_j` with `n` the out-of-fluid normals.
pub fn nullspace_term(disc: &Discretization, tau: &[f64]) -> Result<Vec<f64>> {
    check_len("density", disc.n_dofs(), tau.len())?;
    let flux: f64 = (0..disc.len())
        .map(|j| disc.weights[j] * (tau[2 * j] * disc.normals[j][0] + tau[2 * j + 1] * disc.normals[j][1]))
        .sum();
    let mut out = vec![0.0; disc.n_dofs()];
    for i in 0..disc.len() {
        out[2 * i] = disc.normals[i][0] * flux;
        out[2 * i + 1] = disc.normals[i][1] * flux;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coincident_points_error() {
        assert!(matches!(stokeslet([1.0, 1.0], [1.0, 1.0], 1.0), Err(Error::SingularEvaluation)));
        assert!(double_layer([0.0, 0.0], [0.0, 0.0], [1.0, 0.0]).is_err());
        assert!(pressure_double([0.0, 0.0], [0.0, 0.0], [1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn combined_is_sum() {
        let spec = KernelSpec::new(KernelKind::CombinedField, 2.0).unwrap();
        let (x, y, n) = ([0.3, 0.9], [-0.2, 0.1], [0.6, 0.8]);
        let k = spec.velocity(x, y, n).unwrap();
        let s = stokeslet(x, y, 2.0).unwrap();
        let d = double_layer(x, y, n).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert!((k[a][b] - s[a][b] - d[a][b]).abs() < 1e-15);
            }
        }
    }
}
