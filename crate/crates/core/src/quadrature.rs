//! Deterministic one-dimensional integration and bracketed root finding.
//!
//! All solvers in this crate integrate smooth exponential-type integrands over
//! sub-intervals of the planning horizon and solve scalar root equations that
//! are known to be monotone. Composite Gauss-Legendre with a fixed node count
//! keeps every result bit-reproducible across runs and thread counts.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Composite Gauss-Legendre rule: `nodes` points per panel, `panels` panels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuadSpec {
    pub nodes: usize,
    pub panels: usize,
}

impl Default for QuadSpec {
    fn default() -> Self {
        // 256 total nodes; the integrands are smooth exponentials.
        Self {
            nodes: 32,
            panels: 8,
        }
    }
}

impl QuadSpec {
    pub fn total_nodes(&self) -> usize {
        self.nodes * self.panels
    }
}

/// Tolerances for the bracketed scalar root finder.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RootSpec {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for RootSpec {
    fn default() -> Self {
        Self {
            abs_tol: 1e-12,
            rel_tol: 1e-10,
            max_iter: 200,
        }
    }
}

fn rule_cache() -> &'static Mutex<HashMap<usize, Arc<(Vec<f64>, Vec<f64>)>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<(Vec<f64>, Vec<f64>)>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> Arc<(Vec<f64>, Vec<f64>)> {
    assert!(n >= 2, "Gauss-Legendre rule needs at least 2 nodes");
    if let Some(rule) = rule_cache().lock().unwrap().get(&n) {
        return rule.clone();
    }
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-type initial guess, then Newton on P_n.
        let mut xi = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..64 {
            let (p, d) = legendre_and_derivative(n, xi);
            dp = d;
            let dx = p / d;
            xi -= dx;
            if dx.abs() <= 1e-15 {
                let (_, d2) = legendre_and_derivative(n, xi);
                dp = d2;
                break;
            }
        }
        x[i] = -xi;
        x[n - 1 - i] = xi;
        let wi = 2.0 / ((1.0 - xi * xi) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    let rule = Arc::new((x, w));
    rule_cache().lock().unwrap().insert(n, rule.clone());
    rule
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Integrates `f` over [t0, t1] with the composite rule in `spec`.
///
/// Returns 0 when the interval is empty; rejects non-finite integrand values.
pub fn integrate<F: Fn(f64) -> f64>(f: F, t0: f64, t1: f64, spec: &QuadSpec) -> Result<f64> {
    if t1 <= t0 {
        return Ok(0.0);
    }
    let rule = gauss_legendre(spec.nodes);
    let (nodes, weights) = rule.as_ref();
    let panel_width = (t1 - t0) / spec.panels as f64;
    let mut total = 0.0;
    for p in 0..spec.panels {
        let lo = t0 + p as f64 * panel_width;
        let half = 0.5 * panel_width;
        let mid = lo + half;
        let mut panel_sum = 0.0;
        for (xi, wi) in nodes.iter().zip(weights.iter()) {
            let t = mid + half * xi;
            let v = f(t);
            if !v.is_finite() {
                return Err(Error::NonFinite { at: t });
            }
            panel_sum += wi * v;
        }
        total += half * panel_sum;
    }
    Ok(total)
}

/// Safeguarded secant/bisection root finder on a bracketing interval.
///
/// Requires f(lo) and f(hi) of opposite sign (or zero). Converges when the
/// bracket width falls below `abs_tol + rel_tol * |x|`.
pub fn find_root<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, spec: &RootSpec) -> Result<f64> {
    let (mut a, mut b) = (lo, hi);
    let mut fa = f(a);
    let mut fb = f(b);
    if !fa.is_finite() {
        return Err(Error::NonFinite { at: a });
    }
    if !fb.is_finite() {
        return Err(Error::NonFinite { at: b });
    }
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::NoBracket { lo, hi });
    }
    let mut width_prev = (b - a).abs();
    let mut force_bisect = false;
    for _ in 0..spec.max_iter {
        // Secant proposal, safeguarded to the current bracket; bisect when
        // the proposal leaves the interval or the bracket stops shrinking.
        let mid = 0.5 * (a + b);
        let secant = b - fb * (b - a) / (fb - fa);
        let x = if !force_bisect
            && secant.is_finite()
            && secant > a.min(b)
            && secant < a.max(b)
        {
            secant
        } else {
            mid
        };
        let fx = f(x);
        if !fx.is_finite() {
            return Err(Error::NonFinite { at: x });
        }
        if fx == 0.0 {
            return Ok(x);
        }
        if fx.signum() == fa.signum() {
            a = x;
            fa = fx;
        } else {
            b = x;
            fb = fx;
        }
        let width = (b - a).abs();
        if width <= spec.abs_tol + spec.rel_tol * x.abs() {
            return Ok(0.5 * (a + b));
        }
        force_bisect = width > 0.5 * width_prev;
        width_prev = width;
    }
    Err(Error::MaxIterations(spec.max_iter))
}

/// Expands an interval around `center` by doubling until `f` changes sign.
///
/// Intended for monotone functions with opposite-sign limits, e.g. budget
/// residuals searched in log-multiplier space.
pub fn bracket_outward<F: Fn(f64) -> f64>(
    f: F,
    center: f64,
    initial_halfwidth: f64,
    max_doublings: usize,
) -> Result<(f64, f64)> {
    let fc = f(center);
    if !fc.is_finite() {
        return Err(Error::NonFinite { at: center });
    }
    if fc == 0.0 {
        return Ok((center, center));
    }
    let mut h = initial_halfwidth.abs().max(f64::MIN_POSITIVE);
    for _ in 0..max_doublings {
        let (lo, hi) = (center - h, center + h);
        let flo = f(lo);
        let fhi = f(hi);
        if !flo.is_finite() {
            return Err(Error::NonFinite { at: lo });
        }
        if !fhi.is_finite() {
            return Err(Error::NonFinite { at: hi });
        }
        if flo.signum() != fc.signum() {
            return Ok((lo, center));
        }
        if fhi.signum() != fc.signum() {
            return Ok((center, hi));
        }
        h *= 2.0;
    }
    Err(Error::NoBracket {
        lo: center - h,
        hi: center + h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SPEC: QuadSpec = QuadSpec {
        nodes: 32,
        panels: 8,
    };

    #[test]
    fn constant_integrand_is_exact() {
        let v = integrate(|_| 1.0, 0.0, 40.0, &SPEC).unwrap();
        assert!((v - 40.0).abs() < 1e-12 * 40.0);
    }

    #[test]
    fn empty_interval_is_zero() {
        assert_eq!(integrate(|t| t.exp(), 3.0, 3.0, &SPEC).unwrap(), 0.0);
    }

    #[test]
    fn discount_factor_matches_closed_form() {
        let r = 0.005;
        let v = integrate(|t| (-r * t).exp(), 0.0, 40.0, &SPEC).unwrap();
        let exact = (1.0 - (-r * 40.0f64).exp()) / r;
        assert!((v - exact).abs() < 1e-12 * exact);
    }

    #[test]
    fn self_refinement_agrees() {
        // Smooth life-cycle style integrand: node count 256 vs 2560.
        let f = |t: f64| (0.03 * t - 0.2 * (t - 10.0).tanh()).exp() / (1.0 + t);
        let coarse = integrate(f, 0.0, 40.0, &SPEC).unwrap();
        let fine = integrate(
            f,
            0.0,
            40.0,
            &QuadSpec {
                nodes: 32,
                panels: 80,
            },
        )
        .unwrap();
        assert!((coarse - fine).abs() <= 1e-10 * fine.abs());
    }

    #[test]
    fn non_finite_integrand_is_rejected() {
        let err = integrate(
            |t| if t > 2.0 { f64::INFINITY } else { 1.0 },
            1.0,
            3.0,
            &SPEC,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn root_of_linear_function() {
        let spec = RootSpec::default();
        let x = find_root(|x| x - 1.0, 0.0, 2.0, &spec).unwrap();
        assert!((x - 1.0).abs() < 1e-10);
    }

    #[test]
    fn root_of_cube() {
        let spec = RootSpec::default();
        let x = find_root(|x| x * x * x - 2.0, 1.0, 2.0, &spec).unwrap();
        assert!((x - 2.0f64.powf(1.0 / 3.0)).abs() < 1e-10);
    }

    #[test]
    fn missing_bracket_is_reported() {
        let spec = RootSpec::default();
        let err = find_root(|x| x * x + 1.0, -1.0, 1.0, &spec).unwrap_err();
        assert!(matches!(err, Error::NoBracket { .. }));
    }

    #[test]
    fn doubling_finds_bracket_for_monotone_budget_residual() {
        // Strictly decreasing in log space with limits +inf and -target,
        // mirroring the budget equation solved for the consumption multiplier.
        let target = 137.0;
        let f = |x: f64| (-0.4 * x).exp() * 25.0 - target;
        let (lo, hi) = bracket_outward(&f, 0.0, 1.0, 60).unwrap();
        let x = find_root(f, lo, hi, &RootSpec::default()).unwrap();
        assert!((f(x)).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn integration_is_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let f = |t: f64| (0.1 * t).sin();
            let g = |t: f64| (-0.05 * t).exp();
            let lhs = integrate(|t| alpha * f(t) + beta * g(t), 0.0, 7.0, &SPEC).unwrap();
            let rhs = alpha * integrate(f, 0.0, 7.0, &SPEC).unwrap()
                + beta * integrate(g, 0.0, 7.0, &SPEC).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())));
        }

        #[test]
        fn root_residual_is_tiny_for_smooth_monotone(c in 0.1f64..5.0) {
            let f = |x: f64| x.exp() - c;
            let x = find_root(f, -5.0, 5.0, &RootSpec::default()).unwrap();
            prop_assert!((x - c.ln()).abs() < 1e-9);
        }
    }
}
