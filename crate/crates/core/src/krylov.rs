//! GMRES with optional left preconditioning.

use std::fmt;

use crate::error::{check_len, Error, Result};
use crate::linalg::{dot, norm2};

/// An approximate inverse used as a left preconditioner.
pub trait SolveOperator {
    fn solve(&self, b: &[f64]) -> Result<Vec<f64>>;
}

impl<F: Fn(&[f64]) -> Result<Vec<f64>>> SolveOperator for F {
    fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self(b)
    }
}

#[derive(Clone, Copy)]
pub struct GmresConfig<'a> {
    pub tol: f64,
    pub max_iter: usize,
    /// Restart length; `None` runs full GMRES.
    pub restart: Option<usize>,
    pub precond: Option<&'a dyn SolveOperator>,
}

impl Default for GmresConfig<'_> {
    fn default() -> Self {
        GmresConfig {
            tol: 1e-11,
            max_iter: 600,
            restart: None,
            precond: None,
        }
    }
}

impl<'a> GmresConfig<'a> {
    pub fn with_precond(mut self, p: &'a dyn SolveOperator) -> Self {
        self.precond = Some(p);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::InvalidInput(format!("GMRES tolerance must lie in (0,1), got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("GMRES needs at least one iteration".into()));
        }
        if self.restart == Some(0) {
            return Err(Error::InvalidInput("restart length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GmresOutput {
    pub x: Vec<f64>,
    pub n_iter: usize,
    /// Relative (preconditioned) residual before the first and after every iteration.
    pub residual_history: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Stagnation,
    MaxIterations,
}

/// Failure to reach the tolerance; carries the best iterate found.
#[derive(Clone, Debug)]
pub struct NonConvergence {
    pub reason: StopReason,
    pub best: Vec<f64>,
    pub n_iter: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
}

impl fmt::Display for NonConvergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let why = match self.reason {
            StopReason::Stagnation => "stagnated",
            StopReason::MaxIterations => "hit the iteration limit",
        };
        write!(f, "{why} after {} iterations at relative residual {:.3e}", self.n_iter, self.residual)
    }
}

/// Window over which a residual must drop to count as progress.
const STAGNATION_WINDOW: usize = 50;
const STAGNATION_FACTOR: f64 = 0.999;

fn precondition(cfg: &GmresConfig<'_>, v: Vec<f64>) -> Result<Vec<f64>> {
    match cfg.precond {
        Some(p) => p.solve(&v),
        None => Ok(v),
    }
}

/// Solve `A x = b` (left preconditioned: `M A x = M b`).
pub fn gmres(
    apply: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    x0: Option<&[f64]>,
    cfg: &GmresConfig<'_>,
) -> Result<GmresOutput> {
    cfg.validate()?;
    let n = b.len();
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("right-hand side is not finite".into()));
    }
    let mut x = match x0 {
        Some(x0) => {
            check_len("GMRES initial guess", n, x0.len())?;
            x0.to_vec()
        }
        None => vec![0.0; n],
    };
    let mb = precondition(cfg, b.to_vec())?;
    let bnorm = norm2(&mb);
    let mut history = Vec::new();
    if bnorm == 0.0 {
        history.push(0.0);
        return Ok(GmresOutput {
            x: vec![0.0; n],
            n_iter: 0,
            residual_history: history,
        });
    }
    let restart = cfg.restart.unwrap_or(cfg.max_iter).min(cfg.max_iter);
    let mut total = 0;
    loop {
        let ax = apply(&x)?;
        check_len("GMRES operator output", n, ax.len())?;
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let r = precondition(cfg, r)?;
        let beta = norm2(&r);
        if history.is_empty() {
            history.push(beta / bnorm);
        }
        if beta / bnorm <= cfg.tol {
            return Ok(GmresOutput {
                x,
                n_iter: total,
                residual_history: history,
            });
        }
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        // Hessenberg columns after rotation, rotations and rotated rhs
        let mut h: Vec<Vec<f64>> = Vec::new();
        let mut cs: Vec<(f64, f64)> = Vec::new();
        let mut g = vec![beta];
        let mut stop: Option<StopReason> = None;
        let mut converged = false;
        let mut j = 0;
        while j < restart {
            let av = apply(&basis[j])?;
            let mut w = precondition(cfg, av)?;
            let mut col = vec![0.0; j + 2];
            for _pass in 0..2 {
                for (i, v) in basis.iter().enumerate() {
                    let hij = dot(&w, v);
                    col[i] += hij;
                    w.iter_mut().zip(v).for_each(|(a, b)| *a -= hij * b);
                }
            }
            let hn = norm2(&w);
            col[j + 1] = hn;
            for (i, &(c, s)) in cs.iter().enumerate() {
                let (a, b) = (col[i], col[i + 1]);
                col[i] = c * a + s * b;
                col[i + 1] = -s * a + c * b;
            }
            let (a, bb) = (col[j], col[j + 1]);
            let rho = a.hypot(bb);
            let (c, s) = if rho == 0.0 { (1.0, 0.0) } else { (a / rho, bb / rho) };
            col[j] = rho;
            col[j + 1] = 0.0;
            cs.push((c, s));
            let gj = g[j];
            g[j] = c * gj;
            g.push(-s * gj);
            h.push(col);
            j += 1;
            total += 1;
            let res = g[j].abs() / bnorm;
            history.push(res);
            if res <= cfg.tol || hn <= f64::EPSILON * bnorm {
                converged = res <= cfg.tol || hn == 0.0;
                break;
            }
            if history.len() > STAGNATION_WINDOW && res >= STAGNATION_FACTOR * history[history.len() - 1 - STAGNATION_WINDOW] {
                stop = Some(StopReason::Stagnation);
                break;
            }
            if total >= cfg.max_iter {
                stop = Some(StopReason::MaxIterations);
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        // back substitution on the rotated Hessenberg matrix
        let k = j;
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = g[i];
            for l in i + 1..k {
                s -= h[l][i] * y[l];
            }
            y[i] = if h[i][i] == 0.0 { 0.0 } else { s / h[i][i] };
        }
        for (yi, v) in y.iter().zip(&basis) {
            x.iter_mut().zip(v).for_each(|(a, b)| *a += yi * b);
        }
        if converged {
            return Ok(GmresOutput {
                x,
                n_iter: total,
                residual_history: history,
            });
        }
        if let Some(reason) = stop {
            let residual = *history.last().unwrap();
            return Err(Error::NonConvergence(Box::new(NonConvergence {
                reason,
                best: x,
                n_iter: total,
                residual,
                residual_history: history,
            })));
        }
        if total >= cfg.max_iter {
            let residual = *history.last().unwrap();
            return Err(Error::NonConvergence(Box::new(NonConvergence {
                reason: StopReason::MaxIterations,
                best: x,
                n_iter: total,
                residual,
                residual_history: history,
            })));
        }
    }
}
