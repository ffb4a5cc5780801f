//! Expected-path analytics, Monte Carlo path simulation, scenario replay
//! and self-financing verification for a merged policy.
//!
//! Expected curves are assembled in closed form from the kernel power
//! moments, so calibration never sees Monte Carlo noise. Path simulation
//! precomputes per-grid-time quadrature coefficients once and reuses them
//! across paths; each path draws from its own counter-seeded stream so the
//! result is independent of thread scheduling.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::market::path_rng;
use crate::policy::MergedPolicy;
use crate::quadrature::{gauss_legendre, integrate};

/// Closed-form expected consumption rate `E[c*(t)]`.
pub fn expected_consumption(policy: &MergedPolicy, t: f64) -> f64 {
    let ctx = policy.context();
    let b = ctx.prefs.b(t);
    policy.consumption().g_kernel(t, t) * ctx.market.kernel_power_moment(1.0 / (b - 1.0), t)
        + ctx.cashflows.consumption_floor(t)
}

fn terminal_cushion_mean(policy: &MergedPolicy, t: f64) -> f64 {
    let ctx = policy.context();
    let b_hat = ctx.prefs.b_hat();
    (policy.v2_star() - ctx.floor_f2(0.0))
        * (b_hat / (b_hat - 1.0) * ctx.market.risk_adjusted_rate(b_hat) * t).exp()
        * ctx.market.kernel_power_moment(1.0 / (b_hat - 1.0), t)
}

/// Closed-form expected wealth `E[V*(t)]`.
pub fn expected_wealth(policy: &MergedPolicy, t: f64) -> Result<f64> {
    let ctx = policy.context();
    let consumption_part = integrate(
        |s| {
            let b = ctx.prefs.b(s);
            policy.consumption().g_kernel(s, t)
                * ctx.market.kernel_power_moment(1.0 / (b - 1.0), t)
        },
        t,
        ctx.horizon(),
        &ctx.quad,
    )?;
    Ok(consumption_part + terminal_cushion_mean(policy, t) + ctx.floor_f(t)?)
}

/// Closed-form expected risky exposure `E[pi* V*]` per asset.
///
/// The exposure is linear in the two cushions, so the state-dependent
/// mean-value time never enters: the consumption part contributes
/// `1/(1 - b(s))` weighted marginal values, the terminal part a constant
/// multiple of its cushion.
pub fn expected_exposure(policy: &MergedPolicy, t: f64) -> Result<DVector<f64>> {
    let ctx = policy.context();
    let consumption_part = integrate(
        |s| {
            let b = ctx.prefs.b(s);
            policy.consumption().g_kernel(s, t)
                * ctx.market.kernel_power_moment(1.0 / (b - 1.0), t)
                / (1.0 - b)
        },
        t,
        ctx.horizon(),
        &ctx.quad,
    )?;
    let terminal_part = terminal_cushion_mean(policy, t) / (1.0 - ctx.prefs.b_hat());
    Ok(ctx.market.merton_vector() * (consumption_part + terminal_part))
}

/// Deterministic allocation estimate `E[pi* V*] / E[V*]` per asset.
pub fn expected_allocation_estimator(policy: &MergedPolicy, t: f64) -> Result<DVector<f64>> {
    let wealth = expected_wealth(policy, t)?;
    if wealth.abs() <= 1e-10 * policy.endowment().abs().max(1.0) {
        return Err(Error::ZeroExpectedWealth(t));
    }
    Ok(expected_exposure(policy, t)? / wealth)
}

/// Expected curves sampled on a time grid.
#[derive(Debug, Clone)]
pub struct ExpectedCurves {
    pub times: Vec<f64>,
    pub consumption: Vec<f64>,
    pub wealth: Vec<f64>,
    /// Row-major `times.len() x dim`.
    pub exposure: Vec<f64>,
    /// Row-major `times.len() x dim`.
    pub allocation: Vec<f64>,
    pub dim: usize,
}

/// Evaluates all expected curves on `times`, in parallel over grid points.
pub fn expected_curves(policy: &MergedPolicy, times: &[f64]) -> Result<ExpectedCurves> {
    let dim = policy.context().market.dim();
    let rows: Vec<(f64, f64, DVector<f64>, DVector<f64>)> = times
        .par_iter()
        .map(|&t| {
            let c = expected_consumption(policy, t);
            let w = expected_wealth(policy, t)?;
            let e = expected_exposure(policy, t)?;
            let a = expected_allocation_estimator(policy, t)?;
            Ok((c, w, e, a))
        })
        .collect::<Result<_>>()?;
    let mut curves = ExpectedCurves {
        times: times.to_vec(),
        consumption: Vec::with_capacity(times.len()),
        wealth: Vec::with_capacity(times.len()),
        exposure: Vec::with_capacity(times.len() * dim),
        allocation: Vec::with_capacity(times.len() * dim),
        dim,
    };
    for (c, w, e, a) in rows {
        curves.consumption.push(c);
        curves.wealth.push(w);
        curves.exposure.extend(e.iter().copied());
        curves.allocation.extend(a.iter().copied());
    }
    Ok(curves)
}

/// One simulated path of the optimal controls and wealth components.
#[derive(Debug, Clone)]
pub struct PathRecord {
    pub times: Vec<f64>,
    pub z: Vec<f64>,
    /// Row-major `times.len() x dim`.
    pub prices: Vec<f64>,
    pub c_star: Vec<f64>,
    /// Row-major `times.len() x dim`.
    pub pi: Vec<f64>,
    /// Row-major `times.len() x dim`.
    pub exposure: Vec<f64>,
    pub v_star: Vec<f64>,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub floor: Vec<f64>,
    pub dim: usize,
}

impl PathRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Per-grid-time policy coefficients, precomputed once per simulation.
///
/// The consumption-problem wealth and exposure at a grid time reduce to
/// weighted sums of kernel powers; the weights and powers depend only on
/// the grid, so path evaluation is a single pass over the node table.
struct GridEvaluator {
    times: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    cbar: Vec<f64>,
    g_tt: Vec<f64>,
    p_c: Vec<f64>,
    coeff: Vec<f64>,
    pow: Vec<f64>,
    nodes_per_time: usize,
    v2_coeff: Vec<f64>,
    p_hat: f64,
    m_hat: f64,
}

struct StepState {
    v1: f64,
    v2: f64,
    v_star: f64,
    c: f64,
    exposure_scale: f64,
    floor: f64,
}

impl GridEvaluator {
    fn new(policy: &MergedPolicy, times: &[f64]) -> Result<Self> {
        let ctx = policy.context();
        let horizon = ctx.horizon();
        let b_hat = ctx.prefs.b_hat();
        let rule = gauss_legendre(ctx.quad.nodes);
        let (xs, ws) = rule.as_ref();
        let k = ctx.quad.nodes * ctx.quad.panels;
        let mut ev = GridEvaluator {
            times: times.to_vec(),
            f1: Vec::with_capacity(times.len()),
            f2: Vec::with_capacity(times.len()),
            cbar: Vec::with_capacity(times.len()),
            g_tt: Vec::with_capacity(times.len()),
            p_c: Vec::with_capacity(times.len()),
            coeff: Vec::with_capacity(times.len() * k),
            pow: Vec::with_capacity(times.len() * k),
            nodes_per_time: k,
            v2_coeff: Vec::with_capacity(times.len()),
            p_hat: 1.0 / (b_hat - 1.0),
            m_hat: 1.0 / (1.0 - b_hat),
        };
        let v2_cushion0 = policy.v2_star() - ctx.floor_f2(0.0);
        for &t in times {
            ev.f1.push(ctx.floor_f1(t)?);
            ev.f2.push(ctx.floor_f2(t));
            ev.cbar.push(ctx.cashflows.consumption_floor(t));
            let b_t = ctx.prefs.b(t);
            ev.g_tt.push(policy.consumption().g_kernel(t, t));
            ev.p_c.push(1.0 / (b_t - 1.0));
            ev.v2_coeff.push(
                v2_cushion0
                    * (b_hat / (b_hat - 1.0) * ctx.market.risk_adjusted_rate(b_hat) * t).exp(),
            );
            let panel_width = (horizon - t) / ctx.quad.panels as f64;
            for p in 0..ctx.quad.panels {
                let lo = t + p as f64 * panel_width;
                let half = 0.5 * panel_width;
                let mid = lo + half;
                for (x, w) in xs.iter().zip(ws.iter()) {
                    let s = mid + half * x;
                    ev.coeff.push(half * w * policy.consumption().g_kernel(s, t));
                    ev.pow.push(1.0 / (ctx.prefs.b(s) - 1.0));
                }
            }
        }
        Ok(ev)
    }

    fn eval(&self, i: usize, z: f64) -> StepState {
        let log_z = z.ln();
        let row = i * self.nodes_per_time..(i + 1) * self.nodes_per_time;
        let mut cushion1 = 0.0;
        let mut neg_scale = 0.0;
        for (c, p) in self.coeff[row.clone()].iter().zip(self.pow[row].iter()) {
            let term = c * (p * log_z).exp();
            cushion1 += term;
            neg_scale += p * term;
        }
        let v1 = cushion1 + self.f1[i];
        let v2_cushion = self.v2_coeff[i] * (self.p_hat * log_z).exp();
        let v2 = v2_cushion + self.f2[i];
        StepState {
            v1,
            v2,
            v_star: v1 + v2,
            c: self.g_tt[i] * (self.p_c[i] * log_z).exp() + self.cbar[i],
            exposure_scale: -neg_scale + self.m_hat * v2_cushion,
            floor: self.f1[i] + self.f2[i],
        }
    }

    fn consumption_only(&self, i: usize, z: f64) -> f64 {
        self.g_tt[i] * (self.p_c[i] * z.ln()).exp() + self.cbar[i]
    }

    fn terminal_wealth(&self, i: usize, z: f64) -> f64 {
        // At the horizon the consumption part is empty.
        self.v2_coeff[i] * (self.p_hat * z.ln()).exp() + self.f2[i] + self.f1[i]
    }
}

/// Simulates the policy along exact kernel paths on a uniform grid.
pub fn simulate_policy(
    policy: &MergedPolicy,
    steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PathRecord>> {
    assert!(steps >= 1 && n_paths >= 1);
    let ctx = policy.context();
    let horizon = ctx.horizon();
    let dt = horizon / steps as f64;
    let times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
    let evaluator = GridEvaluator::new(policy, &times)?;
    let market = &ctx.market;
    let dim = market.dim();
    let merton = market.merton_vector();
    let drift = -(market.rate() + 0.5 * market.gamma_sq()) * dt;
    let sqrt_dt = dt.sqrt();
    let records: Vec<PathRecord> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = path_rng(seed, path as u64);
            let n = steps + 1;
            let mut rec = PathRecord {
                times: times.clone(),
                z: Vec::with_capacity(n),
                prices: Vec::with_capacity(n * dim),
                c_star: Vec::with_capacity(n),
                pi: Vec::with_capacity(n * dim),
                exposure: Vec::with_capacity(n * dim),
                v_star: Vec::with_capacity(n),
                v1: Vec::with_capacity(n),
                v2: Vec::with_capacity(n),
                floor: Vec::with_capacity(n),
                dim,
            };
            let mut w: DVector<f64> = DVector::zeros(dim);
            let mut log_z = 0.0;
            for i in 0..n {
                if i > 0 {
                    let mut shock = 0.0;
                    for j in 0..dim {
                        let dw = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
                        w[j] += dw;
                        shock += market.market_price_of_risk()[j] * dw;
                    }
                    log_z += drift - shock;
                }
                let z = log_z.exp();
                let state = evaluator.eval(i, z);
                let zero_wealth =
                    state.v_star.abs() <= 1e-10 * policy.wealth_scale();
                rec.z.push(z);
                rec.prices
                    .extend(market.stock_price(times[i], &w).iter().copied());
                rec.c_star.push(state.c);
                for j in 0..dim {
                    let e = merton[j] * state.exposure_scale;
                    rec.exposure.push(e);
                    rec.pi.push(if zero_wealth { 0.0 } else { e / state.v_star });
                }
                rec.v_star.push(state.v_star);
                rec.v1.push(state.v1);
                rec.v2.push(state.v2);
                rec.floor.push(state.floor);
            }
            rec
        })
        .collect();
    Ok(records)
}

/// Replays the policy along a given single-asset price series.
///
/// The Brownian state is recovered from the price, the kernel from the
/// Brownian state; the series must start at the market's initial price.
pub fn replay_scenario(policy: &MergedPolicy, series: &[(f64, f64)]) -> Result<PathRecord> {
    let ctx = policy.context();
    let market = &ctx.market;
    if market.dim() != 1 {
        return Err(Error::MultiAssetUnsupported(market.dim()));
    }
    if series.is_empty() {
        return Err(Error::InfeasibleParams("empty scenario series".into()));
    }
    for window in series.windows(2) {
        if window[1].0 <= window[0].0 {
            return Err(Error::InfeasibleParams(
                "scenario times must strictly increase".into(),
            ));
        }
    }
    for &(t, price) in series {
        if !(price > 0.0) {
            return Err(Error::NonPositivePrice { t, price });
        }
    }
    let p0 = market.initial_prices()[0];
    let (t0, price0) = series[0];
    if t0.abs() > 1e-12 || (price0 / p0 - 1.0).abs() > 1e-9 {
        return Err(Error::InfeasibleParams(format!(
            "scenario must start at (0, {p0}), got ({t0}, {price0})"
        )));
    }
    let mu = market.drift()[0];
    let sigma = market.volatility()[(0, 0)];
    let times: Vec<f64> = series.iter().map(|&(t, _)| t).collect();
    let evaluator = GridEvaluator::new(policy, &times)?;
    let merton0 = market.merton_vector()[0];
    let n = series.len();
    let mut rec = PathRecord {
        times: times.clone(),
        z: Vec::with_capacity(n),
        prices: Vec::with_capacity(n),
        c_star: Vec::with_capacity(n),
        pi: Vec::with_capacity(n),
        exposure: Vec::with_capacity(n),
        v_star: Vec::with_capacity(n),
        v1: Vec::with_capacity(n),
        v2: Vec::with_capacity(n),
        floor: Vec::with_capacity(n),
        dim: 1,
    };
    for (i, &(t, price)) in series.iter().enumerate() {
        let w = ((price / p0).ln() - (mu - 0.5 * sigma * sigma) * t) / sigma;
        let z = market.kernel_value(t, &DVector::from_element(1, w));
        let state = evaluator.eval(i, z);
        let zero_wealth = state.v_star.abs() <= 1e-10 * policy.wealth_scale();
        rec.z.push(z);
        rec.prices.push(price);
        rec.c_star.push(state.c);
        let e = merton0 * state.exposure_scale;
        rec.exposure.push(e);
        rec.pi.push(if zero_wealth { 0.0 } else { e / state.v_star });
        rec.v_star.push(state.v_star);
        rec.v1.push(state.v1);
        rec.v2.push(state.v2);
        rec.floor.push(state.floor);
    }
    Ok(rec)
}

/// Euler-replicates the wealth SDE with the recorded controls and returns
/// the maximum relative tracking error against the recorded closed form.
///
/// Brownian increments are recovered from the recorded prices, so the
/// replication runs on exactly the randomness the record was built with.
/// The replication applies the recorded relative weights to the Euler
/// wealth; on paths where total wealth crosses zero the weights spike and
/// the replication degenerates, which is the reason the policy also
/// reports currency exposures.
pub fn verify_self_financing(policy: &MergedPolicy, path: &PathRecord) -> Result<f64> {
    let ctx = policy.context();
    let market = &ctx.market;
    let dim = market.dim();
    if path.dim != dim {
        return Err(Error::BadDimension {
            what: "path record",
            expected: dim,
            got: path.dim,
        });
    }
    let sigma_lu = market.volatility().clone().lu();
    let mut wealth = path.v_star[0];
    let mut max_err = 0.0f64;
    for i in 0..path.len() - 1 {
        let t = path.times[i];
        let dt = path.times[i + 1] - t;
        // Delta W = sigma^{-1} (dlog p - (mu - diag(Sigma)/2) dt).
        let mut dlog = DVector::zeros(dim);
        for j in 0..dim {
            dlog[j] = (path.prices[(i + 1) * dim + j] / path.prices[i * dim + j]).ln()
                - (market.drift()[j] - 0.5 * market.covariance()[(j, j)]) * dt;
        }
        let dw = sigma_lu
            .solve(&dlog)
            .ok_or(Error::Inconsistent("volatility solve failed".into()))?;
        let mut excess = 0.0;
        let mut diffusion = 0.0;
        for j in 0..dim {
            let exposure_j = path.pi[i * dim + j] * wealth;
            excess += exposure_j * (market.drift()[j] - market.rate());
            let sigma_row = market.volatility().row(j);
            let mut vol_j = 0.0;
            for l in 0..dim {
                vol_j += sigma_row[l] * dw[l];
            }
            diffusion += exposure_j * vol_j;
        }
        wealth += (wealth * market.rate() + excess - path.c_star[i]
            + ctx.cashflows.income(t))
            * dt
            + diffusion;
        let reference = path.v_star[i + 1];
        let err = (wealth - reference).abs() / (reference.abs() + 1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// Monte Carlo estimate with its target and standard error.
#[derive(Debug, Clone, Copy)]
pub struct McCheck {
    pub estimate: f64,
    pub target: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

impl McCheck {
    pub fn within_se(&self, k: f64) -> bool {
        (self.estimate - self.target).abs() <= k * self.std_error
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Budget equality check: the discounted value of optimal consumption plus
/// terminal wealth must equal the endowment plus the discounted income
/// annuity. The time integral uses the trapezoid rule on the step grid.
pub fn budget_equality_mc(
    policy: &MergedPolicy,
    n_paths: usize,
    steps: usize,
    seed: u64,
) -> Result<McCheck> {
    let ctx = policy.context();
    let horizon = ctx.horizon();
    let dt = horizon / steps as f64;
    let times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
    let evaluator = GridEvaluator::new(policy, &times)?;
    let market = &ctx.market;
    let drift = -(market.rate() + 0.5 * market.gamma_sq()) * dt;
    let sqrt_dt = dt.sqrt();
    let dim = market.dim();
    let values: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = path_rng(seed, path as u64);
            let mut log_z = 0.0;
            let mut acc = 0.0;
            let mut prev = evaluator.consumption_only(0, 1.0);
            for i in 1..=steps {
                let mut shock = 0.0;
                for j in 0..dim {
                    let dw = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
                    shock += market.market_price_of_risk()[j] * dw;
                }
                log_z += drift - shock;
                let z = log_z.exp();
                let cur = z * evaluator.consumption_only(i, z);
                acc += 0.5 * (prev + cur) * dt;
                prev = cur;
                if i == steps {
                    acc += z * evaluator.terminal_wealth(i, z);
                }
            }
            acc
        })
        .collect();
    let (estimate, std_error) = mean_and_se(&values);
    let income_value = integrate(
        |t| (-market.rate() * t).exp() * ctx.cashflows.income(t),
        0.0,
        horizon,
        &ctx.quad,
    )?;
    Ok(McCheck {
        estimate,
        target: policy.endowment() + income_value,
        std_error,
        n_paths,
    })
}

/// Smallest margins to the floors across simulated paths: returns
/// `(min V* - F, min c* - cbar)` over every step of every path.
pub fn floor_margins_mc(
    policy: &MergedPolicy,
    n_paths: usize,
    steps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let ctx = policy.context();
    let horizon = ctx.horizon();
    let dt = horizon / steps as f64;
    let times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
    let evaluator = GridEvaluator::new(policy, &times)?;
    let market = &ctx.market;
    let drift = -(market.rate() + 0.5 * market.gamma_sq()) * dt;
    let sqrt_dt = dt.sqrt();
    let dim = market.dim();
    let margins: Vec<(f64, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = path_rng(seed, path as u64);
            let mut log_z = 0.0;
            let mut min_wealth = f64::INFINITY;
            let mut min_consumption = f64::INFINITY;
            for i in 0..=steps {
                if i > 0 {
                    let mut shock = 0.0;
                    for j in 0..dim {
                        let dw = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
                        shock += market.market_price_of_risk()[j] * dw;
                    }
                    log_z += drift - shock;
                }
                let z = log_z.exp();
                let state = evaluator.eval(i, z);
                min_wealth = min_wealth.min(state.v_star - state.floor);
                min_consumption = min_consumption.min(state.c - evaluator.cbar[i]);
            }
            (min_wealth, min_consumption)
        })
        .collect();
    Ok(margins.into_iter().fold(
        (f64::INFINITY, f64::INFINITY),
        |(aw, ac), (w, c)| (aw.min(w), ac.min(c)),
    ))
}

/// Present-value identity at an interior probe time: the Monte Carlo mean
/// of `Z(t) V*(t) + integral_0^t Z (c* - y)` must equal the endowment.
pub fn pv_identity_mc(
    policy: &MergedPolicy,
    probe_time: f64,
    n_paths: usize,
    steps: usize,
    seed: u64,
) -> Result<McCheck> {
    let ctx = policy.context();
    let dt = probe_time / steps as f64;
    let times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
    let evaluator = GridEvaluator::new(policy, &times)?;
    let market = &ctx.market;
    let drift = -(market.rate() + 0.5 * market.gamma_sq()) * dt;
    let sqrt_dt = dt.sqrt();
    let dim = market.dim();
    let values: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = path_rng(seed, path as u64);
            let mut log_z = 0.0;
            let mut acc = 0.0;
            let mut prev = evaluator.consumption_only(0, 1.0) - ctx.cashflows.income(0.0);
            for i in 1..=steps {
                let mut shock = 0.0;
                for j in 0..dim {
                    let dw = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
                    shock += market.market_price_of_risk()[j] * dw;
                }
                log_z += drift - shock;
                let z = log_z.exp();
                let cur = z * (evaluator.consumption_only(i, z) - ctx.cashflows.income(times[i]));
                acc += 0.5 * (prev + cur) * dt;
                prev = cur;
                if i == steps {
                    acc += z * evaluator.eval(i, z).v_star;
                }
            }
            acc
        })
        .collect();
    let (estimate, std_error) = mean_and_se(&values);
    Ok(McCheck {
        estimate,
        target: policy.endowment(),
        std_error,
        n_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration;
    use crate::curves::Curve;
    use crate::market::MarketParams;
    use crate::preferences::CashflowModel;
    use crate::testutil::*;
    use crate::ModelContext;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reference_policy() -> MergedPolicy {
        MergedPolicy::solve(&reference_context(), REFERENCE_V0).unwrap()
    }

    #[test]
    fn expected_consumption_at_start_is_deterministic() {
        let policy = reference_policy();
        let direct = policy.policy_at(0.0, 1.0).unwrap().c_star;
        assert!((expected_consumption(&policy, 0.0) - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn expected_wealth_boundary_values() {
        let policy = reference_policy();
        let at_start = expected_wealth(&policy, 0.0).unwrap();
        assert!((at_start - REFERENCE_V0).abs() <= 1e-8 * REFERENCE_V0);
        let ctx = policy.context();
        let at_end = expected_wealth(&policy, 40.0).unwrap();
        let expected = terminal_cushion_mean(&policy, 40.0) + ctx.cashflows.terminal_floor();
        assert!((at_end - expected).abs() <= 1e-10 * expected);
    }

    #[test]
    fn expected_curves_match_monte_carlo() {
        let policy = reference_policy();
        let ctx = policy.context();
        let market = &ctx.market;
        let mut rng = ChaCha8Rng::seed_from_u64(60_601);
        let n = 40_000;
        for t in [10.0, 20.0, 30.0] {
            let times = [t];
            let evaluator = GridEvaluator::new(&policy, &times).unwrap();
            let sd = (market.gamma_sq() * t).sqrt();
            let mean_log = -(market.rate() + 0.5 * market.gamma_sq()) * t;
            let mut cs = Vec::with_capacity(n);
            let mut vs = Vec::with_capacity(n);
            let mut es = Vec::with_capacity(n);
            for _ in 0..n {
                let z = (mean_log + sd * rng.sample::<f64, _>(StandardNormal)).exp();
                let state = evaluator.eval(0, z);
                cs.push(state.c);
                vs.push(state.v_star);
                es.push(state.exposure_scale * market.merton_vector()[0]);
            }
            let (c_mean, c_se) = mean_and_se(&cs);
            let (v_mean, v_se) = mean_and_se(&vs);
            let (e_mean, e_se) = mean_and_se(&es);
            let c_closed = expected_consumption(&policy, t);
            let v_closed = expected_wealth(&policy, t).unwrap();
            let e_closed = expected_exposure(&policy, t).unwrap()[0];
            assert!(
                (c_mean - c_closed).abs() <= 3.0 * c_se,
                "t={t} consumption: mc={c_mean} closed={c_closed} se={c_se}"
            );
            assert!(
                (v_mean - v_closed).abs() <= 3.0 * v_se,
                "t={t} wealth: mc={v_mean} closed={v_closed} se={v_se}"
            );
            assert!(
                (e_mean - e_closed).abs() <= 3.0 * e_se,
                "t={t} exposure: mc={e_mean} closed={e_closed} se={e_se}"
            );
            // Ratio estimator against the MC ratio of means.
            let est = expected_allocation_estimator(&policy, t).unwrap()[0];
            let ratio = e_mean / v_mean;
            let ratio_se = (e_se / v_mean).abs() + (e_mean * v_se / (v_mean * v_mean)).abs();
            assert!(
                (est - ratio).abs() <= 3.0 * ratio_se,
                "t={t} estimator: {est} vs mc ratio {ratio}"
            );
        }
    }

    #[test]
    fn allocation_estimate_starts_near_the_glide_target() {
        let policy = reference_policy();
        let est = expected_allocation_estimator(&policy, 0.0).unwrap()[0];
        // The fitted model tracks the 75% start only within the overall
        // calibration residual, which is widest at the left edge.
        assert!((0.70..1.00).contains(&est), "estimate at start: {est}");
    }

    #[test]
    fn constant_mix_reduction_for_flat_preferences() {
        let income = Curve::ScaledExp {
            annual: 20_000.0,
            rate: 0.015,
        };
        let flows = CashflowModel::new(income.clone(), income, 0.0, 40.0).unwrap();
        let ctx = ModelContext::new(reference_market(), reference_prefs_constant(), flows).unwrap();
        let policy = MergedPolicy::solve(&ctx, 120_000.0).unwrap();
        let expected = ctx.market.merton_vector()[0] / (1.0 - ctx.prefs.b_hat());
        for t in [0.0, 17.0, 34.0] {
            let est = expected_allocation_estimator(&policy, t).unwrap()[0];
            assert!(
                (est - expected).abs() <= 1e-8 * expected,
                "t={t}: {est} vs {expected}"
            );
        }
    }

    #[test]
    fn exposure_is_positive_with_positive_merton_vector() {
        let policy = reference_policy();
        for t in [0.0, 10.0, 25.0, 39.0] {
            assert!(expected_exposure(&policy, t).unwrap()[0] > 0.0);
        }
    }

    #[test]
    fn simulated_paths_respect_floors_and_are_deterministic() {
        let policy = reference_policy();
        let a = simulate_policy(&policy, 120, 8, 2025).unwrap();
        let b = simulate_policy(&policy, 120, 8, 2025).unwrap();
        for (pa, pb) in a.iter().zip(b.iter()) {
            assert_eq!(pa.z, pb.z);
            assert_eq!(pa.v_star, pb.v_star);
        }
        let c = simulate_policy(&policy, 120, 8, 2026).unwrap();
        assert_ne!(a[0].z, c[0].z);
        let flows = reference_cashflows();
        for rec in &a {
            for i in 0..rec.len() {
                assert!(rec.v_star[i] > rec.floor[i]);
                assert!(rec.c_star[i] > flows.consumption_floor(rec.times[i]));
            }
        }
    }

    #[test]
    fn grid_evaluator_agrees_with_direct_policy_evaluation() {
        let policy = reference_policy();
        let times: Vec<f64> = vec![0.0, 3.7, 11.0, 26.5, 39.9, 40.0];
        let evaluator = GridEvaluator::new(&policy, &times).unwrap();
        for (i, &t) in times.iter().enumerate() {
            for z in [0.4, 1.0, 1.9] {
                let fast = evaluator.eval(i, z);
                let slow = policy.policy_at(t, z).unwrap();
                assert!((fast.v_star - slow.v_star).abs() <= 1e-9 * slow.v_star.abs().max(1.0));
                assert!((fast.c - slow.c_star).abs() <= 1e-9 * slow.c_star);
                let slow_scale = slow.exposure[0] / policy.context().market.merton_vector()[0];
                assert!(
                    (fast.exposure_scale - slow_scale).abs()
                        <= 1e-9 * slow_scale.abs().max(1.0)
                );
            }
        }
    }

    #[test]
    fn replay_reproduces_a_simulated_path() {
        let policy = reference_policy();
        let rec = &simulate_policy(&policy, 260, 1, 31_415).unwrap()[0];
        let series: Vec<(f64, f64)> = rec
            .times
            .iter()
            .zip(rec.prices.iter())
            .map(|(&t, &p)| (t, p))
            .collect();
        let replayed = replay_scenario(&policy, &series).unwrap();
        for i in 0..rec.len() {
            assert!((replayed.z[i] - rec.z[i]).abs() <= 1e-9 * rec.z[i]);
            assert!((replayed.v_star[i] - rec.v_star[i]).abs() <= 1e-7 * rec.v_star[i].abs());
            assert!((replayed.c_star[i] - rec.c_star[i]).abs() <= 1e-7 * rec.c_star[i]);
        }
    }

    #[test]
    fn replay_rejects_bad_input() {
        let policy = reference_policy();
        assert!(matches!(
            replay_scenario(&policy, &[(0.0, 100.0), (1.0, -3.0)]),
            Err(Error::NonPositivePrice { .. })
        ));
        assert!(matches!(
            replay_scenario(&policy, &[(0.0, 50.0), (1.0, 60.0)]),
            Err(Error::InfeasibleParams(_))
        ));
        // Multi-asset market.
        let sigma = nalgebra::DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.05, 0.15]);
        let market = MarketParams::new(
            0.005,
            nalgebra::DVector::from_vec(vec![0.05, 0.04]),
            sigma,
            nalgebra::DVector::from_vec(vec![100.0, 50.0]),
        )
        .unwrap();
        let ctx = ModelContext::new(market, reference_prefs(), reference_cashflows()).unwrap();
        let policy2 = MergedPolicy::solve(&ctx, REFERENCE_V0).unwrap();
        assert!(matches!(
            replay_scenario(&policy2, &[(0.0, 100.0)]),
            Err(Error::MultiAssetUnsupported(2))
        ));
    }

    #[test]
    fn expected_price_scenario_replays_cleanly() {
        let policy = reference_policy();
        let market = &policy.context().market;
        let mu = market.drift()[0];
        let p0 = market.initial_prices()[0];
        let series: Vec<(f64, f64)> = (0..=520)
            .map(|i| {
                let t = i as f64 * 40.0 / 520.0;
                (t, p0 * (mu * t).exp())
            })
            .collect();
        let rec = replay_scenario(&policy, &series).unwrap();
        // Along the mean price path the Brownian state is sigma t / 2.
        let sigma = market.volatility()[(0, 0)];
        for (i, &(t, _)) in series.iter().enumerate() {
            let expected_z =
                market.kernel_value(t, &DVector::from_element(1, 0.5 * sigma * t));
            assert!((rec.z[i] - expected_z).abs() <= 1e-9 * expected_z);
            assert!(rec.v_star[i] > rec.floor[i]);
        }
    }

    #[test]
    fn falling_market_pushes_consumption_below_the_hump_target() {
        let policy = reference_policy();
        let market = &policy.context().market;
        let p0 = market.initial_prices()[0];
        // A market losing roughly 3% a year for four decades.
        let series: Vec<(f64, f64)> = (0..=520)
            .map(|i| {
                let t = i as f64 * 40.0 / 520.0;
                (t, p0 * (-0.03 * t).exp())
            })
            .collect();
        let rec = replay_scenario(&policy, &series).unwrap();
        let target = calibration::CalibrationTarget::default_curves(2_080);
        let min_gap = rec
            .times
            .iter()
            .zip(rec.c_star.iter())
            .map(|(&t, &c)| c - target.consumption_at(t))
            .fold(f64::INFINITY, f64::min);
        assert!(
            min_gap < 0.0,
            "consumption should fall below the hump target eventually: {min_gap}"
        );
    }

    #[test]
    fn self_financing_error_shrinks_with_the_step() {
        let policy = reference_policy();
        let fine = &simulate_policy(&policy, 1040, 1, 4242).unwrap()[0];
        let coarse = coarsen(fine, 4); // 260 steps
        let mid = coarsen(fine, 2); // 520 steps
        let e_coarse = verify_self_financing(&policy, &coarse).unwrap();
        let e_mid = verify_self_financing(&policy, &mid).unwrap();
        let e_fine = verify_self_financing(&policy, fine).unwrap();
        assert!(
            e_mid < e_coarse && e_fine < e_mid,
            "errors should fall: {e_coarse} {e_mid} {e_fine}"
        );
    }

    #[test]
    fn self_financing_error_falls_from_weekly_to_half_daily() {
        // Separate same-seed runs at weekly, daily and half-daily steps;
        // the tracking error falls across the 4x refinements.
        let policy = reference_policy();
        let errs: Vec<f64> = [40 * 52usize, 40 * 252, 40 * 1008]
            .iter()
            .map(|&steps| {
                let rec = &simulate_policy(&policy, steps, 1, 7).unwrap()[0];
                verify_self_financing(&policy, rec).unwrap()
            })
            .collect();
        assert!(
            errs[0] > errs[1] && errs[1] > errs[2],
            "errors should fall monotonically: {errs:?}"
        );
    }

    #[test]
    fn self_financing_in_the_small_noise_limit() {
        // Tiny volatility: the wealth SDE is nearly an ODE, so the Euler
        // error is pure first-order drift truncation and halves with the
        // step all the way down.
        let market = MarketParams::single_asset(0.005, 0.005 + 1e-8, 1e-4, 100.0).unwrap();
        let ctx = ModelContext::new(market, reference_prefs(), reference_cashflows()).unwrap();
        let policy = MergedPolicy::solve(&ctx, REFERENCE_V0).unwrap();
        let errs: Vec<f64> = [520usize, 1040, 2080]
            .iter()
            .map(|&steps| {
                let rec = &simulate_policy(&policy, steps, 1, 99).unwrap()[0];
                verify_self_financing(&policy, rec).unwrap()
            })
            .collect();
        assert!(errs[0] < 1e-2);
        for pair in errs.windows(2) {
            let ratio = pair[1] / pair[0];
            assert!(
                (0.4..=0.6).contains(&ratio),
                "halving the step should halve the error: {errs:?}"
            );
        }
    }

    /// Coarsens a recorded path by keeping every `factor`-th grid point.
    fn coarsen(rec: &PathRecord, factor: usize) -> PathRecord {
        let keep: Vec<usize> = (0..rec.len()).step_by(factor).collect();
        assert_eq!(*keep.last().unwrap(), rec.len() - 1, "factor must divide");
        let pick = |v: &Vec<f64>| keep.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        PathRecord {
            times: pick(&rec.times),
            z: pick(&rec.z),
            prices: pick(&rec.prices),
            c_star: pick(&rec.c_star),
            pi: pick(&rec.pi),
            exposure: pick(&rec.exposure),
            v_star: pick(&rec.v_star),
            v1: pick(&rec.v1),
            v2: pick(&rec.v2),
            floor: pick(&rec.floor),
            dim: rec.dim,
        }
    }

    #[test]
    fn budget_equality_holds_in_monte_carlo() {
        let policy = reference_policy();
        let check = budget_equality_mc(&policy, 20_000, 520, 808).unwrap();
        assert!(
            check.within_se(3.0),
            "estimate {} vs target {} (se {})",
            check.estimate,
            check.target,
            check.std_error
        );
    }

    #[test]
    fn corrupted_multiplier_breaks_the_budget_identity() {
        // The multiplier equation is the budget constraint in integral
        // form; a 1% multiplier corruption must blow its residual far
        // beyond solver tolerance.
        let policy = reference_policy();
        let ctx = policy.context();
        let cushion = policy.v1_star() - ctx.floor_f1(0.0).unwrap();
        let horizon = ctx.horizon();
        let clean = integrate(|t| policy.consumption().g_kernel(t, 0.0), 0.0, horizon, &ctx.quad)
            .unwrap();
        assert!((clean - cushion).abs() <= 1e-7 * cushion.abs());
        let skewed = crate::consumption::ConsumptionSolution::with_lambda(
            ctx,
            policy.v1_star(),
            policy.lambda1_star() * 1.01,
        )
        .unwrap();
        let broken =
            integrate(|t| skewed.g_kernel(t, 0.0), 0.0, horizon, &ctx.quad).unwrap();
        let residual = (broken - cushion).abs();
        assert!(
            residual > 1e4 * (clean - cushion).abs().max(1e-9 * cushion.abs()),
            "corrupted residual {residual} vs clean {}",
            (clean - cushion).abs()
        );
    }

    #[test]
    fn floors_hold_across_simulated_paths() {
        let policy = reference_policy();
        let (wealth_margin, consumption_margin) =
            floor_margins_mc(&policy, 2_000, 520, 777).unwrap();
        assert!(wealth_margin > 0.0, "wealth margin {wealth_margin}");
        assert!(
            consumption_margin > 0.0,
            "consumption margin {consumption_margin}"
        );
    }

    #[test]
    fn discounted_value_process_is_flat_in_time() {
        let policy = reference_policy();
        for probe in [10.0, 25.0] {
            let check = pv_identity_mc(&policy, probe, 20_000, 260, 909).unwrap();
            assert!(
                check.within_se(3.0),
                "probe {probe}: estimate {} vs {} (se {})",
                check.estimate,
                check.target,
                check.std_error
            );
        }
    }
}
