//! Least-squares calibration of the preference parameters against target
//! consumption and allocation curves.
//!
//! The objective is the sum of squared relative distances between the
//! model's closed-form expected curves and the targets on a weekly grid,
//! stacking the consumption and allocation blocks with equal weight. Five
//! variants are fitted: fully time-varying preferences, each curve pinned
//! to a constant, both pinned, and a zero-floor variant.
//!
//! The optimizer is a deterministic multi-start: Latin-hypercube starts
//! around a per-variant default center, each refined by Nelder-Mead and a
//! damped Gauss-Newton pass on the residual vector.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::Curve;
use crate::error::{Error, Result};
use crate::market::MarketParams;
use crate::policy::MergedPolicy;
use crate::preferences::{CashflowModel, PreferenceModel};
use crate::quadrature::{gauss_legendre, QuadSpec, RootSpec};
use crate::ModelContext;

/// Which preference parameters are free during the fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Both curves time-varying.
    Full,
    /// Weight curve pinned to a constant (`lam_a = 0`).
    AConst,
    /// Risk-aversion curve pinned to a constant (`lam_b = 0`).
    BConst,
    /// Both curves constant.
    BothConst,
    /// Time-varying curves with both floors removed.
    CrraFull,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::Full,
        ModelVariant::AConst,
        ModelVariant::BConst,
        ModelVariant::BothConst,
        ModelVariant::CrraFull,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::AConst => "a_const",
            ModelVariant::BConst => "b_const",
            ModelVariant::BothConst => "both_const",
            ModelVariant::CrraFull => "crra_full",
        }
    }

    fn pins_lam_a(&self) -> bool {
        matches!(self, ModelVariant::AConst | ModelVariant::BothConst)
    }

    fn pins_lam_b(&self) -> bool {
        matches!(self, ModelVariant::BConst | ModelVariant::BothConst)
    }

    /// Drops the floors for the zero-floor variant.
    pub fn cashflows_for(&self, base: &CashflowModel) -> CashflowModel {
        match self {
            ModelVariant::CrraFull => base.without_floors(),
            _ => base.clone(),
        }
    }

    /// Applies the variant's pins to a parameter set.
    pub fn pin(&self, params: CalibParams) -> CalibParams {
        CalibParams {
            lam_a: if self.pins_lam_a() { 0.0 } else { params.lam_a },
            lam_b: if self.pins_lam_b() { 0.0 } else { params.lam_b },
            ..params
        }
    }

    /// Default multi-start center: a parameter set near the optimum for
    /// the bundled hump/glide targets and reference cashflows.
    pub fn start_center(&self) -> CalibParams {
        match self {
            ModelVariant::Full => CalibParams {
                b_hat: -0.9849,
                a0: 5.2864e7,
                lam_a: -0.6673,
                b0: -4.9731,
                lam_b: -0.0340,
            },
            ModelVariant::AConst => CalibParams {
                b_hat: -0.8325,
                a0: 0.7997e7,
                lam_a: 0.0,
                b0: -4.0243,
                lam_b: 0.0012,
            },
            ModelVariant::BConst => CalibParams {
                b_hat: -0.8344,
                a0: 1.8187e7,
                lam_a: -0.0363,
                b0: -4.1441,
                lam_b: 0.0,
            },
            ModelVariant::BothConst => CalibParams {
                b_hat: -0.8247,
                a0: 0.3425e7,
                lam_a: 0.0,
                b0: -3.9697,
                lam_b: 0.0,
            },
            ModelVariant::CrraFull => CalibParams {
                b_hat: -4.4867,
                a0: 0.6238e7,
                lam_a: -0.8689,
                b0: -9.7397,
                lam_b: -0.0192,
            },
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(ModelVariant::Full),
            "a_const" => Ok(ModelVariant::AConst),
            "b_const" => Ok(ModelVariant::BConst),
            "both_const" => Ok(ModelVariant::BothConst),
            "crra_full" | "crra" => Ok(ModelVariant::CrraFull),
            other => Err(Error::InfeasibleParams(format!(
                "unknown model variant '{other}' (expected full, a_const, b_const, both_const, crra_full)"
            ))),
        }
    }
}

/// The five fitted preference parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalibParams {
    pub b_hat: f64,
    pub a0: f64,
    pub lam_a: f64,
    pub b0: f64,
    pub lam_b: f64,
}

impl CalibParams {
    pub fn preference_model(&self, beta: f64, a_hat: f64, horizon: f64) -> Result<PreferenceModel> {
        PreferenceModel::new(
            beta,
            a_hat,
            self.b_hat,
            Curve::Exp {
                x0: self.a0,
                lam: self.lam_a,
            },
            Curve::Exp {
                x0: self.b0,
                lam: self.lam_b,
            },
            horizon,
        )
    }
}

/// Target curves sampled on the calibration grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub times: Vec<f64>,
    pub consumption: Vec<f64>,
    pub allocation: Vec<f64>,
}

impl CalibrationTarget {
    /// Bundled default targets on `m` equidistant points `k T / m`,
    /// `k = 0 .. m-1`, over a 40-year horizon: the hump-shaped consumption
    /// curve `-25 (t - 26)^2 + 37732` and the declining equity share
    /// `(75 - t) / 100` (the "100 minus age" rule from age 25).
    pub fn default_curves(m: usize) -> Self {
        let horizon = 40.0;
        let times: Vec<f64> = (0..m).map(|k| k as f64 * horizon / m as f64).collect();
        let consumption = times.iter().map(|&t| hump_consumption(t)).collect();
        let allocation = times.iter().map(|&t| glide_allocation(t)).collect();
        Self {
            times,
            consumption,
            allocation,
        }
    }

    pub fn from_samples(times: Vec<f64>, consumption: Vec<f64>, allocation: Vec<f64>) -> Result<Self> {
        if times.len() != consumption.len() || times.len() != allocation.len() {
            return Err(Error::InfeasibleParams(
                "target sample columns differ in length".into(),
            ));
        }
        if times.len() < 2 {
            return Err(Error::InfeasibleParams("target needs at least 2 rows".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InfeasibleParams(
                "target times must strictly increase".into(),
            ));
        }
        Ok(Self {
            times,
            consumption,
            allocation,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Linear interpolation of the consumption target.
    pub fn consumption_at(&self, t: f64) -> f64 {
        interp(&self.times, &self.consumption, t)
    }

    /// Linear interpolation of the allocation target.
    pub fn allocation_at(&self, t: f64) -> f64 {
        interp(&self.times, &self.allocation, t)
    }
}

fn hump_consumption(t: f64) -> f64 {
    -25.0 * (t - 26.0) * (t - 26.0) + 37_732.0
}

fn glide_allocation(t: f64) -> f64 {
    (75.0 - t) / 100.0
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let idx = xs.partition_point(|&v| v <= x) - 1;
    let w = (x - xs[idx]) / (xs[idx + 1] - xs[idx]);
    ys[idx] * (1.0 - w) + ys[idx + 1] * w
}

/// A fixed calibration setup: market, cashflows, endowment, the fixed
/// preference scalars and the target curves.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub market: MarketParams,
    pub cashflows: CashflowModel,
    pub v0: f64,
    pub beta: f64,
    pub a_hat: f64,
    pub target: CalibrationTarget,
    pub quad: QuadSpec,
    pub root: RootSpec,
}

impl CalibrationProblem {
    pub fn new(
        market: MarketParams,
        cashflows: CashflowModel,
        v0: f64,
        beta: f64,
        a_hat: f64,
        target: CalibrationTarget,
    ) -> Result<Self> {
        if market.dim() != 1 {
            return Err(Error::BadDimension {
                what: "calibration market",
                expected: 1,
                got: market.dim(),
            });
        }
        Ok(Self {
            market,
            cashflows,
            v0,
            beta,
            a_hat,
            target,
            quad: QuadSpec::default(),
            root: RootSpec::default(),
        })
    }

    fn solve_policy(&self, variant: ModelVariant, params: &CalibParams) -> Result<MergedPolicy> {
        let params = variant.pin(*params);
        let cashflows = variant.cashflows_for(&self.cashflows);
        let prefs = params.preference_model(self.beta, self.a_hat, cashflows.horizon())?;
        let ctx = ModelContext::with_numerics(
            self.market.clone(),
            prefs,
            cashflows,
            self.quad,
            self.root,
        )?;
        MergedPolicy::solve(&ctx, self.v0)
    }

    /// Model curves `(expected consumption, allocation estimate)` on the
    /// target grid, fused into a single integration pass per grid point.
    pub fn model_curves(
        &self,
        variant: ModelVariant,
        params: &CalibParams,
    ) -> Result<Vec<(f64, f64)>> {
        let policy = self.solve_policy(variant, params)?;
        let ctx = policy.context();
        let horizon = ctx.horizon();
        let b_hat = ctx.prefs.b_hat();
        let m_hat = 1.0 / (1.0 - b_hat);
        let merton = ctx.market.merton_vector()[0];
        let v2_cushion0 = policy.v2_star() - ctx.floor_f2(0.0);
        let rule = gauss_legendre(ctx.quad.nodes);
        let (xs, ws) = rule.as_ref();
        self.target
            .times
            .par_iter()
            .map(|&t| {
                let b_t = ctx.prefs.b(t);
                let ec = policy.consumption().g_kernel(t, t)
                    * ctx.market.kernel_power_moment(1.0 / (b_t - 1.0), t)
                    + ctx.cashflows.consumption_floor(t);
                let mut wealth_cushion = 0.0;
                let mut exposure_scale = 0.0;
                let panel_width = (horizon - t) / ctx.quad.panels as f64;
                for p in 0..ctx.quad.panels {
                    let lo = t + p as f64 * panel_width;
                    let half = 0.5 * panel_width;
                    let mid = lo + half;
                    for (x, w) in xs.iter().zip(ws.iter()) {
                        let s = mid + half * x;
                        let b = ctx.prefs.b(s);
                        let q = half
                            * w
                            * policy.consumption().g_kernel(s, t)
                            * ctx.market.kernel_power_moment(1.0 / (b - 1.0), t);
                        if !q.is_finite() {
                            return Err(Error::NonFinite { at: s });
                        }
                        wealth_cushion += q;
                        exposure_scale += q / (1.0 - b);
                    }
                }
                let terminal_cushion = v2_cushion0
                    * (b_hat / (b_hat - 1.0) * ctx.market.risk_adjusted_rate(b_hat) * t).exp()
                    * ctx.market.kernel_power_moment(1.0 / (b_hat - 1.0), t);
                let wealth = wealth_cushion + terminal_cushion + ctx.floor_f(t)?;
                if wealth.abs() <= 1e-10 * self.v0.abs().max(1.0) {
                    return Err(Error::ZeroExpectedWealth(t));
                }
                let exposure = merton * (exposure_scale + m_hat * terminal_cushion);
                Ok((ec, exposure / wealth))
            })
            .collect()
    }

    /// Stacked relative residuals over the grid: the consumption block
    /// followed by the allocation block, `2 * len` entries.
    pub fn residuals(&self, variant: ModelVariant, params: &CalibParams) -> Result<Vec<f64>> {
        let curves = self.model_curves(variant, params)?;
        let m = self.target.len();
        let mut out = Vec::with_capacity(2 * m);
        for (k, (ec, _)) in curves.iter().enumerate() {
            out.push((ec - self.target.consumption[k]) / self.target.consumption[k]);
        }
        for (k, (_, est)) in curves.iter().enumerate() {
            out.push((est - self.target.allocation[k]) / self.target.allocation[k]);
        }
        Ok(out)
    }

    /// Objective breakdown `(total, consumption block, allocation block)`.
    pub fn ssrd(&self, variant: ModelVariant, params: &CalibParams) -> Result<(f64, f64, f64)> {
        let residuals = self.residuals(variant, params)?;
        let m = self.target.len();
        let consumption: f64 = residuals[..m].iter().map(|r| r * r).sum();
        let allocation: f64 = residuals[m..].iter().map(|r| r * r).sum();
        Ok((consumption + allocation, consumption, allocation))
    }
}

/// Deterministic optimizer settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub multi_starts: usize,
    pub seed: u64,
    pub simplex_iters: usize,
    pub gauss_newton_iters: usize,
    /// Relative half-width of the Latin-hypercube start box.
    pub spread: f64,
    /// Search the positive branch of the risk-aversion level instead of
    /// the default negative one.
    pub positive_b_branch: bool,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            multi_starts: 8,
            seed: 7,
            simplex_iters: 250,
            gauss_newton_iters: 30,
            spread: 0.5,
            positive_b_branch: false,
        }
    }
}

/// Outcome of a fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub variant: ModelVariant,
    pub b_hat: f64,
    pub a0: f64,
    pub lam_a: f64,
    pub b0: f64,
    pub lam_b: f64,
    pub ssrd: f64,
    pub ssrd_consumption: f64,
    pub ssrd_allocation: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Free-parameter encoding: unconstrained simplex coordinates mapping to
/// feasible preference parameters for the given variant.
struct Encoding {
    variant: ModelVariant,
    positive_b_branch: bool,
}

impl Encoding {
    fn dim(&self) -> usize {
        let mut d = 3; // b_hat, a0, b0
        if !self.variant.pins_lam_a() {
            d += 1;
        }
        if !self.variant.pins_lam_b() {
            d += 1;
        }
        d
    }

    fn encode(&self, p: &CalibParams) -> Vec<f64> {
        let mut theta = vec![
            (1.0 - p.b_hat).ln(),
            p.a0.ln(),
            p.b0.abs().ln(),
        ];
        if !self.variant.pins_lam_a() {
            theta.push(p.lam_a);
        }
        if !self.variant.pins_lam_b() {
            theta.push(p.lam_b);
        }
        theta
    }

    fn decode(&self, theta: &[f64]) -> CalibParams {
        let b0_sign = if self.positive_b_branch { 1.0 } else { -1.0 };
        let mut idx = 3;
        let lam_a = if self.variant.pins_lam_a() {
            0.0
        } else {
            let v = theta[idx];
            idx += 1;
            v
        };
        let lam_b = if self.variant.pins_lam_b() {
            0.0
        } else {
            theta[idx]
        };
        CalibParams {
            b_hat: 1.0 - theta[0].exp(),
            a0: theta[1].exp(),
            lam_a,
            b0: b0_sign * theta[2].exp(),
            lam_b,
        }
    }
}

/// Fits a variant to the problem's targets.
///
/// Always returns the best parameters found; `converged` is false when no
/// start satisfied the step-size stopping rule.
pub fn fit(
    problem: &CalibrationProblem,
    variant: ModelVariant,
    spec: &OptimizerSpec,
) -> Result<CalibrationResult> {
    let encoding = Encoding {
        variant,
        positive_b_branch: spec.positive_b_branch,
    };
    let center = variant.pin(variant.start_center());
    let starts = latin_hypercube_starts(&center, &encoding, spec);
    let mut evals = 0usize;
    let mut best_theta: Option<Vec<f64>> = None;
    let mut best_value = f64::INFINITY;
    let mut converged = false;
    for theta0 in starts {
        let mut objective = |theta: &[f64]| -> f64 {
            evals += 1;
            let params = encoding.decode(theta);
            match problem.ssrd(variant, &params) {
                Ok((total, _, _)) => total,
                Err(_) => f64::INFINITY,
            }
        };
        let (theta_nm, _) = nelder_mead(&mut objective, &theta0, spec.simplex_iters);
        let residual_fn = |theta: &[f64]| -> Option<Vec<f64>> {
            let params = encoding.decode(theta);
            problem.residuals(variant, &params).ok()
        };
        let (theta_gn, value_gn, gn_converged, gn_evals) =
            gauss_newton(&residual_fn, &theta_nm, spec.gauss_newton_iters);
        evals += gn_evals;
        if value_gn < best_value {
            best_value = value_gn;
            best_theta = Some(theta_gn);
        }
        converged |= gn_converged;
    }
    let theta = best_theta.ok_or_else(|| {
        Error::InfeasibleParams("no feasible calibration start".into())
    })?;
    let params = encoding.decode(&theta);
    let (ssrd, ssrd_consumption, ssrd_allocation) = problem.ssrd(variant, &params)?;
    Ok(CalibrationResult {
        variant,
        b_hat: params.b_hat,
        a0: params.a0,
        lam_a: params.lam_a,
        b0: params.b0,
        lam_b: params.lam_b,
        ssrd,
        ssrd_consumption,
        ssrd_allocation,
        iterations: evals,
        converged,
    })
}

fn latin_hypercube_starts(
    center: &CalibParams,
    encoding: &Encoding,
    spec: &OptimizerSpec,
) -> Vec<Vec<f64>> {
    let mut starts = vec![encoding.encode(center)];
    if spec.multi_starts <= 1 {
        return starts;
    }
    let n = spec.multi_starts - 1;
    let dim = encoding.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // One permuted stratum sequence per dimension.
    let mut strata: Vec<Vec<usize>> = Vec::with_capacity(dim);
    for _ in 0..dim {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        strata.push(order);
    }
    let center_values = param_values(center);
    for s in 0..n {
        let mut params = *center;
        let values = param_values_mut(&mut params);
        for d in 0..5 {
            // Free dimensions get scaled; pinned ones stay at the center.
            let u = (strata[d.min(dim - 1)][s] as f64 + rng.random::<f64>()) / n as f64;
            let factor = 1.0 + spec.spread * (2.0 * u - 1.0);
            if center_values[d].abs() > 1e-12 {
                *values[d] = center_values[d] * factor;
            } else {
                *values[d] = spec.spread * (2.0 * u - 1.0) * 0.05;
            }
        }
        starts.push(encoding.encode(&params));
    }
    starts
}

fn param_values(p: &CalibParams) -> [f64; 5] {
    [p.b_hat, p.a0, p.lam_a, p.b0, p.lam_b]
}

fn param_values_mut(p: &mut CalibParams) -> [&mut f64; 5] {
    [
        &mut p.b_hat,
        &mut p.a0,
        &mut p.lam_a,
        &mut p.b0,
        &mut p.lam_b,
    ]
}

/// Standard Nelder-Mead with fixed coefficients; returns the best vertex.
fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x0: &[f64],
    max_iters: usize,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        let step = 0.1 * v[i].abs().max(0.1);
        v[i] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    for _ in 0..max_iters {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];
        if (values[worst] - values[best]).abs()
            <= 1e-12 * (1.0 + values[best].abs())
        {
            break;
        }
        let mut centroid = vec![0.0; n];
        for &i in &order[..n] {
            for d in 0..n {
                centroid[d] += simplex[i][d] / n as f64;
            }
        }
        let blend = |a: f64| -> Vec<f64> {
            (0..n)
                .map(|d| centroid[d] + a * (simplex[worst][d] - centroid[d]))
                .collect()
        };
        let reflected = blend(-1.0);
        let f_reflected = f(&reflected);
        if f_reflected < values[best] {
            let expanded = blend(-2.0);
            let f_expanded = f(&expanded);
            if f_expanded < f_reflected {
                simplex[worst] = expanded;
                values[worst] = f_expanded;
            } else {
                simplex[worst] = reflected;
                values[worst] = f_reflected;
            }
        } else if f_reflected < values[second_worst] {
            simplex[worst] = reflected;
            values[worst] = f_reflected;
        } else {
            let contracted = if f_reflected < values[worst] {
                blend(-0.5)
            } else {
                blend(0.5)
            };
            let f_contracted = f(&contracted);
            if f_contracted < values[worst].min(f_reflected) {
                simplex[worst] = contracted;
                values[worst] = f_contracted;
            } else {
                // Shrink toward the best vertex.
                let best_point = simplex[best].clone();
                for i in 0..=n {
                    if i == best {
                        continue;
                    }
                    for d in 0..n {
                        simplex[i][d] = best_point[d] + 0.5 * (simplex[i][d] - best_point[d]);
                    }
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    (simplex[best].clone(), values[best])
}

/// Damped Gauss-Newton on the residual vector with a forward-difference
/// Jacobian. Returns `(theta, ssrd, converged, evaluations)`.
fn gauss_newton<F: Fn(&[f64]) -> Option<Vec<f64>>>(
    residual_fn: &F,
    x0: &[f64],
    max_iters: usize,
) -> (Vec<f64>, f64, bool, usize) {
    let n = x0.len();
    let mut evals = 0usize;
    let mut theta = x0.to_vec();
    let mut residuals = match residual_fn(&theta) {
        Some(r) => r,
        None => return (theta, f64::INFINITY, false, 1),
    };
    evals += 1;
    let mut value: f64 = residuals.iter().map(|r| r * r).sum();
    let mut damping = 1e-4;
    let mut converged = false;
    for _ in 0..max_iters {
        let m = residuals.len();
        // Forward-difference Jacobian, column per parameter.
        let mut jacobian = vec![vec![0.0; m]; n];
        let mut ok = true;
        for j in 0..n {
            let h = 1e-6 * (1.0 + theta[j].abs());
            let mut probe = theta.clone();
            probe[j] += h;
            match residual_fn(&probe) {
                Some(r) => {
                    evals += 1;
                    for i in 0..m {
                        jacobian[j][i] = (r[i] - residuals[i]) / h;
                    }
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            break;
        }
        // Normal equations J'J + damping * diag(J'J).
        let mut jtj = nalgebra::DMatrix::zeros(n, n);
        let mut jtr = nalgebra::DVector::zeros(n);
        for a in 0..n {
            for b in a..n {
                let dot: f64 = (0..m).map(|i| jacobian[a][i] * jacobian[b][i]).sum();
                jtj[(a, b)] = dot;
                jtj[(b, a)] = dot;
            }
            jtr[a] = (0..m).map(|i| jacobian[a][i] * residuals[i]).sum();
        }
        let mut improved = false;
        for _ in 0..8 {
            let mut system = jtj.clone();
            for d in 0..n {
                system[(d, d)] += damping * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = system.lu().solve(&(-&jtr)) else {
                damping *= 10.0;
                continue;
            };
            let candidate: Vec<f64> = (0..n).map(|d| theta[d] + step[d]).collect();
            if let Some(r) = residual_fn(&candidate) {
                evals += 1;
                let v: f64 = r.iter().map(|x| x * x).sum();
                if v < value {
                    let step_norm = step.norm();
                    theta = candidate;
                    residuals = r;
                    let rel_drop = (value - v) / value.max(1e-300);
                    value = v;
                    damping = (damping / 3.0).max(1e-12);
                    improved = true;
                    if step_norm <= 1e-9 * (1.0 + theta.iter().map(|x| x * x).sum::<f64>().sqrt())
                        || rel_drop < 1e-12
                    {
                        converged = true;
                    }
                    break;
                }
            }
            damping *= 10.0;
        }
        if !improved {
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    (theta, value, converged, evals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::*;

    fn reference_problem(points: usize) -> CalibrationProblem {
        CalibrationProblem::new(
            reference_market(),
            reference_cashflows(),
            REFERENCE_V0,
            0.03,
            1.0,
            CalibrationTarget::default_curves(points),
        )
        .unwrap()
    }

    #[test]
    fn default_target_curve_values() {
        let target = CalibrationTarget::default_curves(2_080);
        assert_eq!(target.len(), 2_080);
        assert!((target.consumption[0] - 20_832.0).abs() < 1e-9);
        // t = 26 sits on the weekly grid: index 26 * 52.
        assert!((target.consumption[26 * 52] - 37_732.0).abs() < 1e-9);
        assert!((target.allocation[0] - 0.75).abs() < 1e-12);
        // The grid stops one step before the horizon; the rule itself ends
        // at 35% equities.
        assert!((glide_allocation(40.0) - 0.35).abs() < 1e-12);
        assert!((target.times[1] - target.times[0] - 1.0 / 52.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_targets_give_zero_residuals() {
        let problem = reference_problem(120);
        let params = ModelVariant::Full.start_center();
        let curves = problem.model_curves(ModelVariant::Full, &params).unwrap();
        let target = CalibrationTarget::from_samples(
            problem.target.times.clone(),
            curves.iter().map(|c| c.0).collect(),
            curves.iter().map(|c| c.1).collect(),
        )
        .unwrap();
        let self_problem = CalibrationProblem {
            target,
            ..problem
        };
        let residuals = self_problem.residuals(ModelVariant::Full, &params).unwrap();
        assert!(residuals.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn pinned_variant_matches_full_at_the_pinned_point() {
        let problem = reference_problem(90);
        let params = CalibParams {
            b_hat: -0.9,
            a0: 1.0e7,
            lam_a: 0.0,
            b0: -4.0,
            lam_b: 0.0015,
        };
        let pinned = problem.residuals(ModelVariant::AConst, &params).unwrap();
        let full = problem.residuals(ModelVariant::Full, &params).unwrap();
        for (a, b) in pinned.iter().zip(full.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn objective_is_invariant_to_joint_weight_scaling() {
        let problem = reference_problem(64);
        let params = ModelVariant::Full.start_center();
        let (base, _, _) = problem.ssrd(ModelVariant::Full, &params).unwrap();
        for kappa in [0.5, 2.0] {
            let scaled_problem = CalibrationProblem {
                a_hat: kappa * problem.a_hat,
                ..problem.clone()
            };
            let scaled_params = CalibParams {
                a0: kappa * params.a0,
                ..params
            };
            let (scaled, _, _) = scaled_problem
                .ssrd(ModelVariant::Full, &scaled_params)
                .unwrap();
            assert!(
                (scaled - base).abs() <= 1e-8 * base,
                "kappa={kappa}: {scaled} vs {base}"
            );
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in ModelVariant::ALL {
            assert_eq!(v, v.name().parse().unwrap());
        }
        assert!("nope".parse::<ModelVariant>().is_err());
    }

    #[test]
    fn fit_recovers_a_synthetic_target() {
        // Generate the target from known parameters on a coarse grid and
        // check the fit drives the objective to (near) zero.
        let base = reference_problem(60);
        let truth = CalibParams {
            b_hat: -0.85,
            a0: 0.4e7,
            lam_a: 0.0,
            b0: -3.8,
            lam_b: 0.0,
        };
        let curves = base.model_curves(ModelVariant::BothConst, &truth).unwrap();
        let target = CalibrationTarget::from_samples(
            base.target.times.clone(),
            curves.iter().map(|c| c.0).collect(),
            curves.iter().map(|c| c.1).collect(),
        )
        .unwrap();
        let problem = CalibrationProblem { target, ..base };
        let spec = OptimizerSpec {
            multi_starts: 3,
            simplex_iters: 120,
            gauss_newton_iters: 25,
            ..OptimizerSpec::default()
        };
        let result = fit(&problem, ModelVariant::BothConst, &spec).unwrap();
        assert!(
            result.ssrd < 1e-6,
            "synthetic recovery left ssrd = {}",
            result.ssrd
        );
        assert!((result.b_hat - truth.b_hat).abs() < 0.01);
    }

    #[test]
    fn infeasible_setup_is_reported() {
        // Endowment below the total floor value.
        let problem = CalibrationProblem::new(
            reference_market(),
            reference_cashflows(),
            -2.0e6,
            0.03,
            1.0,
            CalibrationTarget::default_curves(30),
        )
        .unwrap();
        let params = ModelVariant::Full.start_center();
        assert!(problem.residuals(ModelVariant::Full, &params).is_err());
    }
}
