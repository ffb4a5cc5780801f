//! Run configuration: one JSON file describing market, preferences,
//! cashflows and numeric settings.

use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use lifecycle_core::calibration::OptimizerSpec;
use lifecycle_core::{
    CashflowModel, Curve, MarketParams, ModelContext, PreferenceModel, QuadSpec, RootSpec,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub market: MarketConfig,
    pub preferences: PreferencesConfig,
    pub cashflows: CashflowsConfig,
    pub v0: f64,
    #[serde(default)]
    pub quad: QuadSpec,
    #[serde(default)]
    pub root: RootSpec,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

fn default_seed() -> u64 {
    42
}

fn default_out_dir() -> String {
    "out".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub r: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub p0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencesConfig {
    pub beta: f64,
    pub a_hat: f64,
    pub b_hat: f64,
    pub a: Curve,
    pub b: Curve,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CashflowsConfig {
    pub income: Curve,
    pub consumption_floor: Curve,
    pub terminal_floor: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub paths: usize,
    pub steps: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            paths: 10_000,
            steps: 2_080,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub grid_points: usize,
    pub multi_starts: usize,
    pub simplex_iters: usize,
    pub gauss_newton_iters: usize,
    pub spread: f64,
    pub positive_b_branch: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let spec = OptimizerSpec::default();
        Self {
            grid_points: 2_080,
            multi_starts: spec.multi_starts,
            simplex_iters: spec.simplex_iters,
            gauss_newton_iters: spec.gauss_newton_iters,
            spread: spec.spread,
            positive_b_branch: spec.positive_b_branch,
        }
    }
}

impl CalibrationConfig {
    pub fn optimizer_spec(&self, seed: u64) -> OptimizerSpec {
        OptimizerSpec {
            multi_starts: self.multi_starts,
            seed,
            simplex_iters: self.simplex_iters,
            gauss_newton_iters: self.gauss_newton_iters,
            spread: self.spread,
            positive_b_branch: self.positive_b_branch,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<(Self, Vec<u8>)> {
        let raw = std::fs::read(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let config: RunConfig = serde_json::from_slice(&raw)
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok((config, raw))
    }

    pub fn market(&self) -> anyhow::Result<MarketParams> {
        let n = self.market.mu.len();
        let mut sigma = DMatrix::zeros(n, n);
        if self.market.sigma.len() != n {
            return Err(anyhow!(
                "market.sigma must have {n} rows to match market.mu"
            ));
        }
        for (i, row) in self.market.sigma.iter().enumerate() {
            if row.len() != n {
                return Err(anyhow!("market.sigma row {i} must have {n} entries"));
            }
            for (j, &v) in row.iter().enumerate() {
                sigma[(i, j)] = v;
            }
        }
        MarketParams::new(
            self.market.r,
            DVector::from_vec(self.market.mu.clone()),
            sigma,
            DVector::from_vec(self.market.p0.clone()),
        )
        .map_err(|e| anyhow!("market: {e}"))
    }

    pub fn preference_model(&self) -> anyhow::Result<PreferenceModel> {
        PreferenceModel::new(
            self.preferences.beta,
            self.preferences.a_hat,
            self.preferences.b_hat,
            self.preferences.a.clone(),
            self.preferences.b.clone(),
            self.cashflows.horizon,
        )
        .map_err(|e| anyhow!("preferences: {e}"))
    }

    pub fn cashflow_model(&self) -> anyhow::Result<CashflowModel> {
        CashflowModel::new(
            self.cashflows.income.clone(),
            self.cashflows.consumption_floor.clone(),
            self.cashflows.terminal_floor,
            self.cashflows.horizon,
        )
        .map_err(|e| anyhow!("cashflows: {e}"))
    }

    pub fn context(&self) -> anyhow::Result<Arc<ModelContext>> {
        ModelContext::with_numerics(
            self.market()?,
            self.preference_model()?,
            self.cashflow_model()?,
            self.quad,
            self.root,
        )
        .map_err(|e| anyhow!("model: {e}"))
    }
}
