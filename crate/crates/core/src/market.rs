//! Black-Scholes market primitives: validated parameters, the pricing
//! kernel and its log-normal moments, and exact-distribution kernel paths.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Validated market parameters with derived quantities cached.
///
/// Holds the risk-free rate `r`, per-asset drifts `mu`, the volatility
/// matrix `sigma`, initial prices `p0`, and the derived covariance
/// `sigma * sigma'`, market price of risk `sigma^{-1}(mu - r 1)` and the
/// Merton vector `covariance^{-1}(mu - r 1)`.
#[derive(Debug, Clone)]
pub struct MarketParams {
    r: f64,
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    p0: DVector<f64>,
    covariance: DMatrix<f64>,
    market_price_of_risk: DVector<f64>,
    gamma_sq: f64,
    merton_vector: DVector<f64>,
}

impl MarketParams {
    /// Validates the raw inputs and caches the derived quantities.
    ///
    /// Rejects non-positive rates, drifts at or below the risk-free rate,
    /// inconsistent dimensions and covariance matrices that are not
    /// numerically positive definite.
    pub fn new(r: f64, mu: DVector<f64>, sigma: DMatrix<f64>, p0: DVector<f64>) -> Result<Self> {
        let n = mu.len();
        if n == 0 {
            return Err(Error::BadDimension {
                what: "drift vector",
                expected: 1,
                got: 0,
            });
        }
        if sigma.nrows() != n || sigma.ncols() != n {
            return Err(Error::BadDimension {
                what: "volatility matrix",
                expected: n,
                got: sigma.nrows().max(sigma.ncols()),
            });
        }
        if p0.len() != n {
            return Err(Error::BadDimension {
                what: "initial price vector",
                expected: n,
                got: p0.len(),
            });
        }
        if r <= 0.0 {
            return Err(Error::NonPositiveRate(r));
        }
        for i in 0..n {
            if mu[i] - r <= 0.0 {
                return Err(Error::DriftBelowRiskFree { asset: i });
            }
            if p0[i] <= 0.0 {
                return Err(Error::NonPositivePrice {
                    t: 0.0,
                    price: p0[i],
                });
            }
        }
        let covariance = &sigma * sigma.transpose();
        let eigen = covariance.clone().symmetric_eigen();
        let min_eig = eigen.eigenvalues.min();
        let max_eig = eigen.eigenvalues.max();
        if min_eig <= 1e-12 * max_eig.max(1.0) {
            return Err(Error::NonPositiveDefinite {
                min_eigenvalue: min_eig,
            });
        }
        let excess = &mu - DVector::from_element(n, r);
        let lu = sigma.clone().lu();
        let market_price_of_risk = lu
            .solve(&excess)
            .ok_or(Error::NonPositiveDefinite {
                min_eigenvalue: min_eig,
            })?;
        if !market_price_of_risk.iter().all(|g| g.is_finite()) {
            return Err(Error::NonPositiveDefinite {
                min_eigenvalue: min_eig,
            });
        }
        let merton_vector = covariance
            .clone()
            .lu()
            .solve(&excess)
            .ok_or(Error::NonPositiveDefinite {
                min_eigenvalue: min_eig,
            })?;
        let gamma_sq = market_price_of_risk.norm_squared();
        Ok(Self {
            r,
            mu,
            sigma,
            p0,
            covariance,
            market_price_of_risk,
            gamma_sq,
            merton_vector,
        })
    }

    /// Single risky asset market.
    pub fn single_asset(r: f64, mu: f64, sigma: f64, p0: f64) -> Result<Self> {
        Self::new(
            r,
            DVector::from_element(1, mu),
            DMatrix::from_element(1, 1, sigma),
            DVector::from_element(1, p0),
        )
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn rate(&self) -> f64 {
        self.r
    }

    pub fn drift(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn volatility(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn initial_prices(&self) -> &DVector<f64> {
        &self.p0
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Market price of risk `sigma^{-1}(mu - r 1)`.
    pub fn market_price_of_risk(&self) -> &DVector<f64> {
        &self.market_price_of_risk
    }

    /// Squared norm of the market price of risk.
    pub fn gamma_sq(&self) -> f64 {
        self.gamma_sq
    }

    /// `covariance^{-1}(mu - r 1)`, the unscaled optimal mix vector.
    pub fn merton_vector(&self) -> &DVector<f64> {
        &self.merton_vector
    }

    /// Risk-adjusted growth rate `r - gamma_sq / (2 (b - 1))` that shows up
    /// in every kernel power of exponent `1 / (b - 1)`.
    pub fn risk_adjusted_rate(&self, b: f64) -> f64 {
        self.r - 0.5 * self.gamma_sq / (b - 1.0)
    }

    /// Pricing-kernel value at time `t` for Brownian state `w`.
    pub fn kernel_value(&self, t: f64, w: &DVector<f64>) -> f64 {
        (-(self.r + 0.5 * self.gamma_sq) * t - self.market_price_of_risk.dot(w)).exp()
    }

    /// `E[(Z(s)/Z(t))^eta]` for a lag `tau = s - t >= 0`.
    ///
    /// The kernel ratio is log-normal, giving
    /// `exp(-eta (r - (eta - 1) gamma_sq / 2) tau)`.
    pub fn kernel_power_moment(&self, eta: f64, tau: f64) -> f64 {
        (-eta * (self.r - 0.5 * (eta - 1.0) * self.gamma_sq) * tau).exp()
    }

    /// Componentwise geometric Brownian price at `(t, w)`.
    pub fn stock_price(&self, t: f64, w: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut out = DVector::zeros(n);
        for i in 0..n {
            let row = self.sigma.row(i);
            let var = self.covariance[(i, i)];
            out[i] = self.p0[i] * ((self.mu[i] - 0.5 * var) * t + row.transpose().dot(w)).exp();
        }
        out
    }

    /// Simulates `n_paths` kernel paths over `[0, horizon]` on `steps`
    /// equal intervals using the exact log-normal transition.
    ///
    /// Each path draws from its own counter-seeded stream, so path `i` is
    /// identical regardless of thread count.
    pub fn simulate_kernel_paths(
        &self,
        horizon: f64,
        steps: usize,
        n_paths: usize,
        seed: u64,
    ) -> Vec<KernelPath> {
        assert!(steps >= 1 && n_paths >= 1);
        let dt = horizon / steps as f64;
        (0..n_paths)
            .into_par_iter()
            .map(|path| {
                let mut rng = path_rng(seed, path as u64);
                let n = self.dim();
                let mut times = Vec::with_capacity(steps + 1);
                let mut z = Vec::with_capacity(steps + 1);
                let mut w = Vec::with_capacity((steps + 1) * n);
                let mut w_cur: DVector<f64> = DVector::zeros(n);
                times.push(0.0);
                z.push(1.0);
                w.extend(w_cur.iter().copied());
                let mut log_z = 0.0;
                let drift = -(self.r + 0.5 * self.gamma_sq) * dt;
                let sqrt_dt = dt.sqrt();
                for step in 1..=steps {
                    let mut shock = 0.0;
                    for j in 0..n {
                        let dw = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
                        w_cur[j] += dw;
                        shock += self.market_price_of_risk[j] * dw;
                    }
                    log_z += drift - shock;
                    times.push(step as f64 * dt);
                    z.push(log_z.exp());
                    w.extend(w_cur.iter().copied());
                }
                KernelPath {
                    times,
                    z,
                    w,
                    dim: n,
                }
            })
            .collect()
    }
}

/// One independently seeded generator per path index.
pub(crate) fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Pricing-kernel state at a point in time.
#[derive(Debug, Clone)]
pub struct KernelState {
    pub t: f64,
    pub z: f64,
    pub w: DVector<f64>,
}

/// A simulated kernel path: times, kernel values and the flattened
/// Brownian states (`step * dim + asset` layout).
#[derive(Debug, Clone)]
pub struct KernelPath {
    pub times: Vec<f64>,
    pub z: Vec<f64>,
    pub w: Vec<f64>,
    pub dim: usize,
}

impl KernelPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> KernelState {
        let w = DVector::from_iterator(
            self.dim,
            self.w[i * self.dim..(i + 1) * self.dim].iter().copied(),
        );
        KernelState {
            t: self.times[i],
            z: self.z[i],
            w,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_asset() -> MarketParams {
        MarketParams::single_asset(0.005, 0.05, 0.2, 100.0).unwrap()
    }

    #[test]
    fn market_price_of_risk_for_reference_parameters() {
        let m = single_asset();
        assert!((m.market_price_of_risk()[0] - 0.225).abs() < 1e-14);
        assert!((m.gamma_sq() - 0.050625).abs() < 1e-14);
        assert!((m.merton_vector()[0] - 0.045 / 0.04).abs() < 1e-12);
    }

    #[test]
    fn drift_at_risk_free_rate_is_rejected() {
        let err = MarketParams::single_asset(0.05, 0.05, 0.2, 100.0).unwrap_err();
        assert!(matches!(err, Error::DriftBelowRiskFree { asset: 0 }));
    }

    #[test]
    fn singular_volatility_is_rejected() {
        let sigma = DMatrix::from_row_slice(2, 2, &[0.2, 0.1, 0.2, 0.1]);
        let err = MarketParams::new(
            0.005,
            DVector::from_vec(vec![0.05, 0.04]),
            sigma,
            DVector::from_vec(vec![100.0, 50.0]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonPositiveDefinite { .. }));
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let err = MarketParams::new(
            0.005,
            DVector::from_vec(vec![0.05, 0.04]),
            DMatrix::from_element(1, 1, 0.2),
            DVector::from_vec(vec![100.0, 50.0]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::BadDimension { .. }));
    }

    #[test]
    fn kernel_value_examples() {
        let m = single_asset();
        let w0 = DVector::zeros(1);
        assert_eq!(m.kernel_value(0.0, &w0), 1.0);
        // exp(-(r + gamma^2/2)) = exp(-0.0303125) at t = 1, w = 0.
        assert!((m.kernel_value(1.0, &w0) - 0.9701423166993746).abs() < 1e-15);
        let w = DVector::from_element(1, -3.0);
        assert!(m.kernel_value(10.0, &w) > 0.0);
    }

    #[test]
    fn kernel_power_moment_examples() {
        let m = single_asset();
        assert!((m.kernel_power_moment(1.0, 10.0) - (-0.05f64).exp()).abs() < 1e-15);
        assert_eq!(m.kernel_power_moment(0.0, 17.0), 1.0);
        // eta = -1: exp(r + gamma^2) = exp(0.055625).
        assert!((m.kernel_power_moment(-1.0, 1.0) - 1.0572011589582528).abs() < 1e-12);
    }

    #[test]
    fn discounted_kernel_mean_is_one() {
        let m = single_asset();
        for tau in [0.5, 3.0, 17.5, 40.0] {
            let v = m.kernel_power_moment(1.0, tau) * (m.rate() * tau).exp();
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn kernel_moments_match_monte_carlo() {
        let m = single_asset();
        let t = 5.0;
        // Z(t) is log-normal; sample it in one exact step per path.
        let paths = m.simulate_kernel_paths(t, 1, 200_000, 9001);
        for eta in [-2.0, -0.5, 0.5, 1.0, 2.0] {
            let xs: Vec<f64> = paths.iter().map(|p| p.z[1].powf(eta)).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            let se = (var / xs.len() as f64).sqrt();
            let exact = m.kernel_power_moment(eta, t);
            assert!(
                (mean - exact).abs() <= 3.0 * se,
                "eta={eta}: mean={mean}, exact={exact}, se={se}"
            );
        }
    }

    #[test]
    fn kernel_is_multiplicative_along_a_path() {
        let m = single_asset();
        let paths = m.simulate_kernel_paths(10.0, 64, 4, 7);
        for p in &paths {
            let mut product = 1.0;
            for i in 1..p.len() {
                product *= p.z[i] / p.z[i - 1];
            }
            let direct = m.kernel_value(10.0, &p.state(p.len() - 1).w);
            assert!((product - p.z[p.len() - 1]).abs() <= 1e-12 * product.abs());
            assert!((direct - p.z[p.len() - 1]).abs() <= 1e-10 * direct.abs());
        }
    }

    #[test]
    fn paths_are_seed_deterministic_and_positive() {
        let m = single_asset();
        let a = m.simulate_kernel_paths(2.0, 16, 3, 123);
        let b = m.simulate_kernel_paths(2.0, 16, 3, 123);
        for (pa, pb) in a.iter().zip(b.iter()) {
            assert_eq!(pa.z, pb.z);
            assert_eq!(pa.w, pb.w);
            assert!(pa.z.iter().all(|&z| z > 0.0));
        }
        let c = m.simulate_kernel_paths(2.0, 16, 3, 124);
        assert_ne!(a[0].z, c[0].z);
    }

    #[test]
    fn kernel_mean_matches_discount_factor() {
        let m = single_asset();
        let t = 10.0;
        let paths = m.simulate_kernel_paths(t, 1, 100_000, 31);
        let xs: Vec<f64> = paths.iter().map(|p| p.z[1]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let se = (var / xs.len() as f64).sqrt();
        assert!((mean - (-m.rate() * t).exp()).abs() <= 3.0 * se);
    }

    #[test]
    fn stock_price_examples() {
        let m = single_asset();
        let w0 = DVector::zeros(1);
        assert!((m.stock_price(0.0, &w0)[0] - 100.0).abs() < 1e-12);
        // Drift-only: 100 exp((mu - sigma^2/2) t) at w = 0.
        assert!((m.stock_price(1.0, &w0)[0] - 100.0 * (0.03f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn stock_price_mean_matches_drift_growth() {
        let m = single_asset();
        let t = 8.0;
        let paths = m.simulate_kernel_paths(t, 1, 100_000, 55);
        let xs: Vec<f64> = paths
            .iter()
            .map(|p| m.stock_price(t, &p.state(1).w)[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let se = (var / xs.len() as f64).sqrt();
        let exact = 100.0 * (0.05f64 * t).exp();
        assert!(
            (mean - exact).abs() <= 3.0 * se,
            "mean={mean}, exact={exact}, se={se}"
        );
    }
}
