//! Solver for the terminal-wealth-only problem.
//!
//! Everything is in closed form: the multiplier, the replicating wealth and
//! the CPPI policy with constant multiple `1 / (1 - b_hat)` on the floor
//! `F2(t)`.

use std::sync::Arc;

use crate::consumption::{RiskyPosition, ValueFunction};
use crate::error::{Error, Result};
use crate::ModelContext;

/// Solved terminal-wealth problem for a given initial budget `v2`.
#[derive(Debug, Clone)]
pub struct TerminalSolution {
    ctx: Arc<ModelContext>,
    v2: f64,
    lambda2: f64,
    f2_0: f64,
}

impl TerminalSolution {
    /// Requires `v2 > F2(0)`.
    pub fn solve(ctx: &Arc<ModelContext>, v2: f64) -> Result<Self> {
        let lambda2 = solve_lambda2(ctx, v2)?;
        Ok(Self {
            ctx: ctx.clone(),
            v2,
            lambda2,
            f2_0: ctx.floor_f2(0.0),
        })
    }

    pub fn context(&self) -> &Arc<ModelContext> {
        &self.ctx
    }

    pub fn budget(&self) -> f64 {
        self.v2
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn floor2_at_start(&self) -> f64 {
        self.f2_0
    }

    /// Cushion growth factor `exp((b/(b-1)) (r - gamma_sq/(2(b-1))) t)`.
    fn cushion_growth(&self, t: f64) -> f64 {
        let b = self.ctx.prefs.b_hat();
        (b / (b - 1.0) * self.ctx.market.risk_adjusted_rate(b) * t).exp()
    }

    /// Replicating wealth at `(t, z)`; strictly above `F2(t)`.
    pub fn wealth(&self, t: f64, z: f64) -> f64 {
        let b = self.ctx.prefs.b_hat();
        (self.v2 - self.f2_0) * self.cushion_growth(t) * z.powf(1.0 / (b - 1.0))
            + self.ctx.floor_f2(t)
    }

    /// Exposure scale; exposure vector is `scale * merton_vector`.
    pub fn exposure_scale(&self, t: f64, z: f64) -> f64 {
        let b = self.ctx.prefs.b_hat();
        (self.wealth(t, z) - self.ctx.floor_f2(t)) / (1.0 - b)
    }

    /// CPPI position with constant multiple `1 / (1 - b_hat)`.
    pub fn risky_position(&self, t: f64, z: f64) -> RiskyPosition {
        let wealth = self.wealth(t, z);
        RiskyPosition::from_exposure_scale(
            &self.ctx,
            self.exposure_scale(t, z),
            wealth,
            self.v2.abs().max(self.f2_0.abs()),
        )
    }
}

/// Closed-form multiplier of the terminal-wealth problem.
pub fn solve_lambda2(ctx: &Arc<ModelContext>, v2: f64) -> Result<f64> {
    let f2_0 = ctx.floor_f2(0.0);
    if v2 <= f2_0 {
        return Err(Error::InfeasibleBudget {
            budget: v2,
            floor: f2_0,
        });
    }
    let b = ctx.prefs.b_hat();
    let horizon = ctx.horizon();
    let exponent = -(ctx.prefs.beta() - b * ctx.market.risk_adjusted_rate(b)) * horizon;
    Ok(exponent.exp()
        * (1.0 - b).powf(1.0 - b)
        * ctx.prefs.a_hat()
        * (v2 - f2_0).powf(b - 1.0))
}

/// Value function of the terminal-wealth problem with its derivatives.
pub fn value_function(ctx: &Arc<ModelContext>, v2: f64) -> Result<ValueFunction> {
    let lambda2 = solve_lambda2(ctx, v2)?;
    let f2_0 = ctx.floor_f2(0.0);
    let b = ctx.prefs.b_hat();
    let horizon = ctx.horizon();
    let discount = ((-ctx.prefs.beta() + b * ctx.market.risk_adjusted_rate(b)) * horizon).exp();
    let cushion = v2 - f2_0;
    Ok(ValueFunction {
        value: discount * (1.0 - b).powf(1.0 - b) / b * ctx.prefs.a_hat() * cushion.powf(b),
        first_derivative: lambda2,
        second_derivative: -discount
            * (1.0 - b).powf(2.0 - b)
            * ctx.prefs.a_hat()
            * cushion.powf(b - 2.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::Curve;
    use crate::market::MarketParams;
    use crate::preferences::{CashflowModel, PreferenceModel};
    use crate::testutil::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn reference_solution(v2: f64) -> TerminalSolution {
        let ctx = reference_context();
        TerminalSolution::solve(&ctx, v2).unwrap()
    }

    #[test]
    fn multiplier_at_normalized_cushion() {
        // Pick beta so the exponential prefactor is exactly one.
        let market = MarketParams::single_asset(0.05, 0.08, 0.3, 100.0).unwrap();
        let b = 0.5;
        let beta = b * market.risk_adjusted_rate(b);
        assert!(beta >= 0.0);
        let prefs = PreferenceModel::new(
            beta,
            1.0,
            b,
            Curve::constant(1.0),
            Curve::constant(b),
            10.0,
        )
        .unwrap();
        let flows =
            CashflowModel::new(Curve::constant(0.0), Curve::constant(0.0), 0.0, 10.0).unwrap();
        let ctx = ModelContext::new(market, prefs, flows).unwrap();
        let lambda = solve_lambda2(&ctx, 1.0).unwrap();
        let expected = 0.5f64.powf(0.5);
        assert!((lambda - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn infeasible_budget_is_rejected() {
        let ctx = reference_context();
        let f2_0 = ctx.floor_f2(0.0);
        assert!(matches!(
            TerminalSolution::solve(&ctx, f2_0),
            Err(Error::InfeasibleBudget { .. })
        ));
    }

    #[test]
    fn multiplier_decreases_in_budget() {
        let ctx = reference_context();
        let f2_0 = ctx.floor_f2(0.0);
        let lo = solve_lambda2(&ctx, f2_0 + 50_000.0).unwrap();
        let hi = solve_lambda2(&ctx, f2_0 + 250_000.0).unwrap();
        assert!(lo > hi);
    }

    #[test]
    fn wealth_boundary_values() {
        let sol = reference_solution(578_000.0);
        assert!((sol.wealth(0.0, 1.0) - 578_000.0).abs() < 1e-8 * 578_000.0);
        // Terminal line of the closed form.
        let ctx = sol.context();
        let b = ctx.prefs.b_hat();
        for z in [0.5f64, 1.0, 2.0] {
            let expected = (578_000.0 - sol.floor2_at_start())
                * (b / (b - 1.0) * ctx.market.risk_adjusted_rate(b) * 40.0).exp()
                * z.powf(1.0 / (b - 1.0))
                + ctx.cashflows.terminal_floor();
            assert!((sol.wealth(40.0, z) - expected).abs() <= 1e-10 * expected.abs());
        }
    }

    #[test]
    fn wealth_stays_above_floor() {
        let sol = reference_solution(578_000.0);
        let ctx = sol.context();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let t = rng.random_range(0.0..40.0);
            let z = (rng.random_range(-2.0..2.0f64)).exp();
            assert!(sol.wealth(t, z) > ctx.floor_f2(t));
        }
    }

    #[test]
    fn discounted_wealth_is_a_martingale() {
        let sol = reference_solution(578_000.0);
        let market = &sol.context().market;
        let mut rng = ChaCha8Rng::seed_from_u64(321);
        for t in [10.0, 25.0, 40.0] {
            let n = 100_000;
            let sd = (market.gamma_sq() * t).sqrt();
            let mean_log = -(market.rate() + 0.5 * market.gamma_sq()) * t;
            let (mut sum, mut sumsq) = (0.0, 0.0);
            for _ in 0..n {
                let z = (mean_log + sd * rng.sample::<f64, _>(StandardNormal)).exp();
                let x = z * sol.wealth(t, z);
                sum += x;
                sumsq += x * x;
            }
            let mean = sum / n as f64;
            let var = (sumsq - sum * sum / n as f64) / (n as f64 - 1.0);
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - 578_000.0).abs() <= 3.0 * se,
                "t={t}: mean={mean}, se={se}"
            );
        }
    }

    #[test]
    fn zero_terminal_floor_gives_constant_mix() {
        let ctx = ModelContext::new(
            reference_market(),
            reference_prefs(),
            CashflowModel::new(
                reference_cashflows().income_curve().clone(),
                reference_cashflows().consumption_floor_curve().clone(),
                0.0,
                40.0,
            )
            .unwrap(),
        )
        .unwrap();
        let sol = TerminalSolution::solve(&ctx, 300_000.0).unwrap();
        let b = ctx.prefs.b_hat();
        let expected = ctx.market.merton_vector()[0] / (1.0 - b);
        for (t, z) in [(0.0, 1.0), (13.0, 0.4), (39.0, 3.0)] {
            let pos = sol.risky_position(t, z);
            assert!((pos.weights[0] - expected).abs() <= 1e-12 * expected.abs());
        }
    }

    #[test]
    fn weight_vanishes_as_wealth_approaches_floor() {
        let sol = reference_solution(578_000.0);
        let mut prev = f64::INFINITY;
        // b_hat < 0: large z collapses the cushion.
        for z in [1.0, 1e3, 1e6, 1e10, 1e14] {
            let pos = sol.risky_position(20.0, z);
            let mag = pos.weights.norm();
            assert!(mag < prev);
            prev = mag;
        }
        assert!(prev < 1e-4);
    }

    #[test]
    fn weight_is_increasing_and_concave_in_wealth() {
        let sol = reference_solution(578_000.0);
        let ctx = sol.context();
        let t = 15.0;
        let f2 = ctx.floor_f2(t);
        let b = ctx.prefs.b_hat();
        let k = ctx.market.merton_vector()[0];
        let weight = |v: f64| k / (1.0 - b) * (v - f2) / v;
        let v = sol.wealth(t, 1.0);
        let h = 1e-4 * v;
        let slope = (weight(v + h) - weight(v - h)) / (2.0 * h);
        let curvature = (weight(v + h) - 2.0 * weight(v) + weight(v - h)) / (h * h);
        assert!(slope > 0.0);
        assert!(curvature < 0.0);
    }

    #[test]
    fn exposure_sign_follows_merton_vector() {
        let sol = reference_solution(578_000.0);
        let pos = sol.risky_position(7.0, 1.3);
        assert!(pos.exposure[0] > 0.0);
        assert_eq!(
            pos.exposure[0].signum(),
            sol.context().market.merton_vector()[0].signum()
        );
    }

    #[test]
    fn value_function_derivatives() {
        let ctx = reference_context();
        let f2_0 = ctx.floor_f2(0.0);
        for cushion in [20_000.0, 150_000.0, 400_000.0] {
            let v2 = f2_0 + cushion;
            let vf = value_function(&ctx, v2).unwrap();
            let lambda = solve_lambda2(&ctx, v2).unwrap();
            assert_eq!(vf.first_derivative, lambda);
            assert!(vf.second_derivative < 0.0);
            let h = 1.0;
            let up = value_function(&ctx, v2 + h).unwrap().value;
            let down = value_function(&ctx, v2 - h).unwrap().value;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - lambda).abs() <= 1e-6 * lambda.abs(),
                "cushion={cushion}: fd={fd}, lambda={lambda}"
            );
        }
    }

    #[test]
    fn value_scales_like_cushion_power_near_the_floor() {
        let ctx = reference_context();
        let f2_0 = ctx.floor_f2(0.0);
        let b = ctx.prefs.b_hat();
        // Log-log slope of |value| over two decades of cushion size.
        let mut points = Vec::new();
        for k in 0..9 {
            let eps = 1e-3 * 10f64.powf(k as f64 * 0.25);
            let vf = value_function(&ctx, f2_0 + eps).unwrap();
            points.push((eps.ln(), vf.value.abs().ln()));
        }
        let n = points.len() as f64;
        let sx: f64 = points.iter().map(|p| p.0).sum();
        let sy: f64 = points.iter().map(|p| p.1).sum();
        let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!((slope - b).abs() < 1e-3, "slope={slope}, b_hat={b}");
    }

    /// Independent pricing route: the cushion at `t` must equal the
    /// conditional replication cost of the terminal cushion, assembled from
    /// the kernel power moment rather than the solver's growth factor.
    #[test]
    fn cushion_matches_kernel_moment_pricing() {
        let sol = reference_solution(578_000.0);
        let ctx = sol.context();
        let b = ctx.prefs.b_hat();
        // Terminal cushion is coeff * Z(T)^{1/(b-1)}; replicating it costs
        // E[(Z(T)/Z(t))^{b/(b-1)}] * coeff * z^{1/(b-1)} at time t.
        let coeff = (sol.budget() - sol.floor2_at_start())
            * (b / (b - 1.0) * ctx.market.risk_adjusted_rate(b) * 40.0).exp();
        for (t, z) in [(0.0, 1.0), (5.0, 0.7), (20.0, 1.0), (35.0, 2.2)] {
            let cushion = sol.wealth(t, z) - ctx.floor_f2(t);
            let priced = coeff
                * z.powf(1.0 / (b - 1.0))
                * ctx.market.kernel_power_moment(b / (b - 1.0), 40.0 - t);
            assert!(
                (cushion - priced).abs() <= 1e-12 * cushion.abs(),
                "t={t}, z={z}: cushion={cushion}, priced={priced}"
            );
        }
    }
}
