//! Gauss-Legendre rules and product-integration weights for `log|u - u0|`.

/// Gauss-Legendre nodes and weights on [-1, 1], nodes ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "gauss_legendre needs at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // initial guess from the Chebyshev-like asymptotic
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        dp = if d.is_finite() { d } else { dp };
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Values `P_0(x), ..., P_{n-1}(x)`.
pub fn legendre_values(n: usize, x: f64, out: &mut [f64]) {
    if n == 0 {
        return;
    }
    out[0] = 1.0;
    if n > 1 {
        out[1] = x;
    }
    for k in 2..n {
        let kf = k as f64;
        out[k] = ((2.0 * kf - 1.0) * x * out[k - 1] - (kf - 1.0) * out[k - 2]) / kf;
    }
}

/// Rule for `∫_0^1 log(s) f(s) ds`, exact for polynomial `f` of degree `< n`.
///
/// Nodes are Gauss-Legendre points on [0, 1]; weights come from projecting
/// onto shifted Legendre polynomials whose log moments are known in closed form.
#[derive(Clone, Debug)]
pub struct LogRule {
    pub nodes: Vec<f64>,
    pub plain: Vec<f64>,
    pub log: Vec<f64>,
}

impl LogRule {
    pub fn new(n: usize) -> Self {
        let (x, w) = gauss_legendre(n);
        let nodes: Vec<f64> = x.iter().map(|t| 0.5 * (t + 1.0)).collect();
        let plain: Vec<f64> = w.iter().map(|t| 0.5 * t).collect();
        let moments: Vec<f64> = (0..n)
            .map(|m| {
                if m == 0 {
                    -1.0
                } else {
                    let sign = if m % 2 == 1 { 1.0 } else { -1.0 };
                    sign / ((m * (m + 1)) as f64)
                }
            })
            .collect();
        let mut p = vec![0.0; n];
        let log = (0..n)
            .map(|k| {
                legendre_values(n, 2.0 * nodes[k] - 1.0, &mut p);
                let s: f64 = (0..n).map(|m| (2 * m + 1) as f64 * p[m] * moments[m]).sum();
                plain[k] * s
            })
            .collect();
        LogRule { nodes, plain, log }
    }

    /// `∫_0^b log(s) g(s) ds` for each of the functions produced by `g`.
    ///
    /// `g(s, out)` writes the values of all integrands at `s`.
    fn integrate(&self, b: f64, dim: usize, g: &mut dyn FnMut(f64, &mut [f64]), acc: &mut [f64], sign: f64) {
        if b <= 0.0 {
            return;
        }
        let lb = b.ln();
        let mut vals = vec![0.0; dim];
        for k in 0..self.nodes.len() {
            g(b * self.nodes[k], &mut vals);
            let c = sign * b * (lb * self.plain[k] + self.log[k]);
            for (a, v) in acc.iter_mut().zip(&vals) {
                *a += c * v;
            }
        }
    }
}

/// Legendre log moments `m_n = ∫_{-1}^{1} log|u - u0| P_n(u) du` for `n < q`.
pub fn log_moments(q: usize, u0: f64, rule: &LogRule) -> Vec<f64> {
    let mut m = vec![0.0; q];
    let mut left = |s: f64, out: &mut [f64]| legendre_values(q, u0 - s, out);
    if u0 >= 1.0 {
        rule.integrate(u0 + 1.0, q, &mut left, &mut m, 1.0);
        rule.integrate(u0 - 1.0, q, &mut left, &mut m, -1.0);
        return m;
    }
    if u0 <= -1.0 {
        let mut right = |s: f64, out: &mut [f64]| legendre_values(q, u0 + s, out);
        rule.integrate(1.0 - u0, q, &mut right, &mut m, 1.0);
        rule.integrate(-1.0 - u0, q, &mut right, &mut m, -1.0);
        return m;
    }
    rule.integrate(u0 + 1.0, q, &mut left, &mut m, 1.0);
    let mut right = |s: f64, out: &mut [f64]| legendre_values(q, u0 + s, out);
    rule.integrate(1.0 - u0, q, &mut right, &mut m, 1.0);
    m
}

/// Weights `ω_j` with `Σ ω_j f(u_j) = ∫_{-1}^{1} log|u - u0| f(u) du` for `f` of degree `< q`.
pub fn log_product_weights(nodes: &[f64], weights: &[f64], u0: f64, rule: &LogRule) -> Vec<f64> {
    let q = nodes.len();
    let m = log_moments(q, u0, rule);
    let mut p = vec![0.0; q];
    (0..q)
        .map(|j| {
            legendre_values(q, nodes[j], &mut p);
            let s: f64 = (0..q).map(|n| 0.5 * (2 * n + 1) as f64 * m[n] * p[n]).sum();
            weights[j] * s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(16);
        let s: f64 = w.iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        // ∫ x^30 = 2/31
        let v: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(30)).sum();
        assert!((v - 2.0 / 31.0).abs() < 1e-14);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn log_rule_monomials() {
        let r = LogRule::new(8);
        for k in 0..8 {
            let v: f64 = r.nodes.iter().zip(&r.log).map(|(s, w)| w * s.powi(k)).sum();
            let exact = -1.0 / ((k + 1) as f64).powi(2);
            assert!((v - exact).abs() < 1e-14, "k={k}");
        }
    }
}
