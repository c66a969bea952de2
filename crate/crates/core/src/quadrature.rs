//! Gauss-Legendre quadrature on (-1, 1) and Legendre polynomial evaluation.
//!
//! All wall-direction inner products in the basis construction and in the
//! pseudospectral projection go through these routines, so they are kept
//! simple and allocation-light.

/// Nodes and weights of the n-point Gauss-Legendre rule on (-1, 1),
/// exact for polynomials of degree <= 2n - 1.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev-based initial guess, refined by Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_pd(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// P_n(x) and P_n'(x) via the three-term recurrence.
fn legendre_pd(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Values of P_0..P_{m-1} and their first two derivatives at x.
///
/// Uses the recurrences P'_{k+1} = P'_{k-1} + (2k+1) P_k and its derivative,
/// which are stable for the orders used here.
pub fn legendre_table(m: usize, x: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; m];
    let mut dp = vec![0.0; m];
    let mut ddp = vec![0.0; m];
    if m == 0 {
        return (p, dp, ddp);
    }
    p[0] = 1.0;
    if m > 1 {
        p[1] = x;
        dp[1] = 1.0;
    }
    for k in 1..m.saturating_sub(1) {
        let kf = k as f64;
        p[k + 1] = ((2.0 * kf + 1.0) * x * p[k] - kf * p[k - 1]) / (kf + 1.0);
        dp[k + 1] = dp[k - 1] + (2.0 * kf + 1.0) * p[k];
        ddp[k + 1] = ddp[k - 1] + (2.0 * kf + 1.0) * dp[k];
    }
    (p, dp, ddp)
}

/// Evaluate a Legendre series sum c_n P_n and its first two derivatives.
pub fn eval_series(coeffs: &[f64], x: f64) -> (f64, f64, f64) {
    let (p, dp, ddp) = legendre_table(coeffs.len(), x);
    let mut v = 0.0;
    let mut d = 0.0;
    let mut dd = 0.0;
    for (n, &c) in coeffs.iter().enumerate() {
        v += c * p[n];
        d += c * dp[n];
        dd += c * ddp[n];
    }
    (v, d, dd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(8);
        // int_{-1}^{1} x^k dx
        for k in 0..=15usize {
            let q: f64 = x.iter().zip(&w).map(|(&xi, &wi)| wi * xi.powi(k as i32)).sum();
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            assert_relative_eq!(q, exact, epsilon = 1e-13);
        }
    }

    #[test]
    fn gauss_integrates_trig_accurately() {
        let (x, w) = gauss_legendre(24);
        let q: f64 = x
            .iter()
            .zip(&w)
            .map(|(&xi, &wi)| wi * (std::f64::consts::PI * xi / 2.0).cos().powi(2))
            .sum();
        assert_relative_eq!(q, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn legendre_derivative_table_matches_known_values() {
        // P_3 = (5x^3 - 3x)/2, P_3' = (15x^2 - 3)/2, P_3'' = 15x
        let x = 0.37;
        let (p, dp, ddp) = legendre_table(4, x);
        assert_relative_eq!(p[3], (5.0 * x * x * x - 3.0 * x) / 2.0, epsilon = 1e-14);
        assert_relative_eq!(dp[3], (15.0 * x * x - 3.0) / 2.0, epsilon = 1e-14);
        assert_relative_eq!(ddp[3], 15.0 * x, epsilon = 1e-13);
    }

    #[test]
    fn series_eval_consistent_with_table() {
        let c = [0.3, -1.2, 0.05, 2.0, -0.7];
        let (v, d, _) = eval_series(&c, -0.52);
        let h = 1e-6;
        let (vp, _, _) = eval_series(&c, -0.52 + h);
        let (vm, _, _) = eval_series(&c, -0.52 - h);
        assert_relative_eq!(d, (vp - vm) / (2.0 * h), epsilon = 1e-7);
        assert!((v).is_finite());
    }
}
