//! The boundedly-rational forecaster: an AR(p) model re-estimated by OLS on
//! an expanding window, its forecast term structure through the companion
//! matrix, forecast-error / revision bookkeeping, and the steady-state Kalman
//! filter that is the rational benchmark when shocks are Gaussian.

use std::collections::HashMap;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dgp::{GrowthPanel, ModelParams};
use crate::error::{Error, Result};

/// Below this |1 - sum(beta)| the fitted process has no unconditional mean.
pub const UNIT_ROOT_TOL: f64 = 1e-6;

/// Relative pivot size under which a design matrix is treated as singular.
const SINGULAR_TOL: f64 = 1e-10;

/// Default number of observations before the first forecast is issued.
pub const DEFAULT_MIN_WINDOW: usize = 40;

/// OLS estimate of `g[t+1] = c + sum_k beta_k g[t-k] + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArFit {
    /// Raw regression intercept `c`.
    pub intercept: f64,
    /// Unconditional mean `c / (1 - sum(beta))`; equals `intercept` when `nonstationary`.
    pub intercept_mean: f64,
    /// Coefficients on lags 1..=p.
    pub betas: Vec<f64>,
    /// Number of observations of the series used in the fit.
    pub n_obs: usize,
    /// Set when `sum(beta)` is within [`UNIT_ROOT_TOL`] of one.
    pub nonstationary: bool,
}

impl ArFit {
    fn from_coefficients(coef: &[f64], n_obs: usize) -> Self {
        let intercept = coef[0];
        let betas = coef[1..].to_vec();
        let gap = 1.0 - betas.iter().sum::<f64>();
        let nonstationary = gap.abs() < UNIT_ROOT_TOL;
        let intercept_mean = if nonstationary { intercept } else { intercept / gap };
        Self {
            intercept,
            intercept_mean,
            betas,
            n_obs,
            nonstationary,
        }
    }

    /// Fit with a given unconditional mean and lag coefficients.
    pub fn with_mean(intercept_mean: f64, betas: Vec<f64>) -> Self {
        let gap = 1.0 - betas.iter().sum::<f64>();
        Self {
            intercept: intercept_mean * gap,
            intercept_mean,
            n_obs: 0,
            nonstationary: gap.abs() < UNIT_ROOT_TOL,
            betas,
        }
    }

    pub fn order(&self) -> usize {
        self.betas.len()
    }

    /// p x p companion matrix: coefficients in the first row, identity below.
    pub fn companion(&self) -> DMatrix<f64> {
        let p = self.order();
        let mut b = DMatrix::zeros(p, p);
        for (k, beta) in self.betas.iter().enumerate() {
            b[(0, k)] = *beta;
        }
        for k in 1..p {
            b[(k, k - 1)] = 1.0;
        }
        b
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.companion())
    }

    fn check_recent(&self, recent: &[f64]) -> Result<()> {
        if recent.len() != self.order() {
            return Err(Error::InvalidArgument(format!(
                "need {} recent observations, got {}",
                self.order(),
                recent.len()
            )));
        }
        Ok(())
    }
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

fn design(history: &[f64], p: usize) -> (DMatrix<f64>, DVector<f64>) {
    let rows = history.len() - p;
    let x = DMatrix::from_fn(rows, p + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            // row i predicts history[i + p] from lags history[i + p - j]
            history[i + p - j]
        }
    });
    let y = DVector::from_fn(rows, |i, _| history[i + p]);
    (x, y)
}

/// OLS fit of an AR(p) with free intercept, solved through a QR factorization.
pub fn fit_ar(history: &[f64], p: usize) -> Result<ArFit> {
    if p < 1 {
        return Err(Error::InvalidArgument("AR order must be at least 1".into()));
    }
    if history.len() < p + 2 {
        return Err(Error::InsufficientData(format!(
            "AR({p}) needs at least {} observations, got {}",
            p + 2,
            history.len()
        )));
    }
    if history.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("history contains non-finite values".into()));
    }
    let (x, y) = design(history, p);
    if x.nrows() < p + 1 {
        return Err(Error::DegenerateFit(format!(
            "{} regression rows for {} coefficients",
            x.nrows(),
            p + 1
        )));
    }
    let col_norms: Vec<f64> = x.column_iter().map(|c| c.norm()).collect();
    let qr = x.qr();
    let r = qr.r();
    for k in 0..=p {
        if r[(k, k)].abs() <= SINGULAR_TOL * col_norms[k].max(f64::MIN_POSITIVE) {
            return Err(Error::DegenerateFit(format!(
                "design matrix is rank deficient (column {k})"
            )));
        }
    }
    let qty = qr.q().transpose() * y;
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::DegenerateFit("triangular solve failed".into()))?;
    Ok(ArFit::from_coefficients(coef.as_slice(), history.len()))
}

/// `h`-step forecast `mean + e1' B^h (recent - mean)` with `recent` ordered
/// most recent first.
pub fn forecast_horizon(fit: &ArFit, recent: &[f64], h: usize) -> Result<f64> {
    fit.check_recent(recent)?;
    if h < 1 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if fit.nonstationary {
        return Ok(raw_recursion(fit, recent, h));
    }
    let m = fit.intercept_mean;
    let state = DVector::from_iterator(recent.len(), recent.iter().map(|v| v - m));
    let bh = fit.companion().pow(h as u32);
    Ok(m + (bh.row(0) * state)[(0, 0)])
}

/// Iterates `y = c + sum beta_k y_{-k}` forward; used when no mean exists.
fn raw_recursion(fit: &ArFit, recent: &[f64], h: usize) -> f64 {
    let mut lags = recent.to_vec();
    let mut next = f64::NAN;
    for _ in 0..h {
        next = fit.intercept + fit.betas.iter().zip(&lags).map(|(b, v)| b * v).sum::<f64>();
        lags.rotate_right(1);
        lags[0] = next;
    }
    next
}

/// `p` most recent observations up to and including index `t`, most recent first.
fn recent_at(g: &[f64], t: usize, p: usize) -> &[f64] {
    // callers guarantee t + 1 >= p
    &g[t + 1 - p..=t]
}

fn reversed(xs: &[f64]) -> Vec<f64> {
    xs.iter().rev().copied().collect()
}

/// Running X'X and X'y for the expanding-window regressions.
struct ExpandingOls {
    p: usize,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    rows: usize,
}

impl ExpandingOls {
    fn new(p: usize) -> Self {
        Self {
            p,
            xtx: DMatrix::zeros(p + 1, p + 1),
            xty: DVector::zeros(p + 1),
            rows: 0,
        }
    }

    /// Adds the regression row predicting `g[t]`; requires `t >= p`.
    fn push(&mut self, g: &[f64], t: usize) {
        let mut row = Vec::with_capacity(self.p + 1);
        row.push(1.0);
        row.extend((1..=self.p).map(|k| g[t - k]));
        for i in 0..=self.p {
            self.xty[i] += row[i] * g[t];
            for j in 0..=self.p {
                self.xtx[(i, j)] += row[i] * row[j];
            }
        }
        self.rows += 1;
    }

    fn solve(&self, n_obs: usize) -> Result<ArFit> {
        if self.rows < self.p + 1 {
            return Err(Error::DegenerateFit(format!(
                "{} regression rows for {} coefficients",
                self.rows,
                self.p + 1
            )));
        }
        let chol = self
            .xtx
            .clone()
            .cholesky()
            .ok_or_else(|| Error::DegenerateFit("normal equations not positive definite".into()))?;
        let l = chol.l_dirty();
        for k in 0..=self.p {
            // squared pivot relative to the column's own sum of squares
            if l[(k, k)] * l[(k, k)] <= SINGULAR_TOL * SINGULAR_TOL * self.xtx[(k, k)] {
                return Err(Error::DegenerateFit(format!(
                    "design matrix is rank deficient (column {k})"
                )));
            }
        }
        let coef = chol.solve(&self.xty);
        Ok(ArFit::from_coefficients(coef.as_slice(), n_obs))
    }
}

/// How the forecaster's coefficients evolve over time.
#[derive(Debug, Clone, PartialEq)]
pub enum FitMode {
    /// Refit on all data up to each forecast origin.
    Expanding,
    /// One fit on the whole path, used for every origin.
    FrozenFullSample,
    /// One externally supplied fit, used for every origin.
    Fixed(ArFit),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRecord {
    pub firm: String,
    /// Forecast origin (period index for simulations, fiscal year for ingested data).
    pub t: i64,
    /// `F_t g[t+1]`.
    pub f1: f64,
    /// `F_{t-1} g[t+1]`, the two-step forecast issued one period earlier.
    pub f2_prior: f64,
    /// `g[t+1] - f1`.
    pub error: f64,
    /// `f1 - f2_prior`.
    pub revision: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PanelSource {
    Simulated,
    Ingested,
}

/// A period skipped because the fit available at that date was unusable.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedPeriod {
    pub t: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForecastRun {
    pub records: Vec<ForecastRecord>,
    pub skipped: Vec<SkippedPeriod>,
    /// The fit available at each origin, in origin order; `None` for skipped origins.
    pub fits: Vec<(usize, Option<ArFit>)>,
}

/// Runs the forecaster along one growth path. A record at origin `t` needs
/// the fits at `t` and `t - 1` and the realization `g[t+1]`, so records cover
/// `t = min_window ..= T - 2`.
pub fn run_forecaster(
    firm: &str,
    g: &[f64],
    p: usize,
    min_window: usize,
    mode: &FitMode,
) -> Result<ForecastRun> {
    if p < 1 {
        return Err(Error::InvalidArgument("AR order must be at least 1".into()));
    }
    if min_window < p + 2 {
        return Err(Error::InvalidArgument(format!(
            "min_window {min_window} is below p + 2 = {}",
            p + 2
        )));
    }
    let mut run = ForecastRun::default();
    let n = g.len();
    if n < min_window {
        return Ok(run);
    }

    let frozen = match mode {
        FitMode::Expanding => None,
        FitMode::FrozenFullSample => Some(fit_ar(g, p)?),
        FitMode::Fixed(fit) => {
            if fit.order() != p {
                return Err(Error::InvalidArgument(format!(
                    "fixed fit has order {}, expected {p}",
                    fit.order()
                )));
            }
            Some(fit.clone())
        }
    };

    // fits[t] is the fit available at origin t (data g[0..=t]).
    let first_origin = min_window - 1;
    let mut ols = ExpandingOls::new(p);
    let mut next_row = p;
    let mut fits: Vec<Option<ArFit>> = Vec::with_capacity(n - first_origin);
    for t in first_origin..n {
        let fit = match &frozen {
            Some(f) => Ok(f.clone()),
            None => {
                while next_row <= t {
                    ols.push(g, next_row);
                    next_row += 1;
                }
                ols.solve(t + 1)
            }
        };
        match fit {
            Ok(f) => fits.push(Some(f)),
            Err(e) => {
                debug!("firm {firm}: origin {t} skipped: {e}");
                run.skipped.push(SkippedPeriod {
                    t,
                    reason: e.to_string(),
                });
                fits.push(None);
            }
        }
    }

    for t in min_window..n.saturating_sub(1) {
        let (Some(now), Some(prev)) = (&fits[t - first_origin], &fits[t - 1 - first_origin]) else {
            continue;
        };
        let f1 = forecast_horizon(now, &reversed(recent_at(g, t, p)), 1)?;
        let f2_prior = forecast_horizon(prev, &reversed(recent_at(g, t - 1, p)), 2)?;
        run.records.push(ForecastRecord {
            firm: firm.to_string(),
            t: t as i64,
            f1,
            f2_prior,
            error: g[t + 1] - f1,
            revision: f1 - f2_prior,
        });
    }
    if !run.skipped.is_empty() {
        warn!(
            "firm {firm}: {} forecast origins skipped on degenerate fits",
            run.skipped.len()
        );
    }
    run.fits = fits
        .into_iter()
        .enumerate()
        .map(|(i, f)| (first_origin + i, f))
        .collect();
    Ok(run)
}

/// Forecast records for a whole panel, one record per `(firm, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastPanel {
    pub records: Vec<ForecastRecord>,
    pub source: PanelSource,
    /// Origins skipped on degenerate fits (simulated) or rows dropped (ingested).
    pub skipped: usize,
}

impl ForecastPanel {
    /// Sorts by `(firm, t)` and rejects duplicate keys.
    pub fn new(mut records: Vec<ForecastRecord>, source: PanelSource, skipped: usize) -> Result<Self> {
        records.sort_by(|a, b| a.firm.cmp(&b.firm).then(a.t.cmp(&b.t)));
        if let Some(w) = records
            .windows(2)
            .find(|w| w[0].firm == w[1].firm && w[0].t == w[1].t)
        {
            return Err(Error::Data(format!(
                "duplicate forecast record for firm {} at t = {}",
                w[0].firm, w[0].t
            )));
        }
        Ok(Self {
            records,
            source,
            skipped,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(revision_t, error_t)` pairs.
    pub fn revision_error_pairs(&self) -> (Vec<f64>, Vec<f64>) {
        self.records.iter().map(|r| (r.revision, r.error)).unzip()
    }

    /// `(error_{t-1}, error_t)` pairs for consecutive origins of the same firm.
    /// `error_{t-1} = g[t] - F_{t-1} g[t]` is the surprise behind revision t.
    pub fn lagged_error_pairs(&self) -> (Vec<f64>, Vec<f64>) {
        self.records
            .windows(2)
            .filter(|w| w[0].firm == w[1].firm && w[1].t == w[0].t + 1)
            .map(|w| (w[0].error, w[1].error))
            .unzip()
    }

    /// `(revision_t, error_t, error_{t-1})` for records whose predecessor exists.
    pub fn revision_error_lagged(&self) -> Vec<(f64, f64, f64)> {
        self.records
            .windows(2)
            .filter(|w| w[0].firm == w[1].firm && w[1].t == w[0].t + 1)
            .map(|w| (w[1].revision, w[1].error, w[0].error))
            .collect()
    }

    /// Records grouped by firm, in firm order.
    pub fn by_firm(&self) -> Vec<(&str, &[ForecastRecord])> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.records.len() {
            if i == self.records.len() || self.records[i].firm != self.records[start].firm {
                out.push((self.records[start].firm.as_str(), &self.records[start..i]));
                start = i;
            }
        }
        out
    }
}

/// Runs the forecaster on every firm of a simulated panel.
pub fn forecast_panel(
    panel: &GrowthPanel,
    p: usize,
    min_window: usize,
    mode: &FitMode,
) -> Result<ForecastPanel> {
    let runs = panel
        .firms
        .par_iter()
        .map(|f| run_forecaster(&f.id, &f.path.g, p, min_window, mode))
        .collect::<Result<Vec<_>>>()?;
    let skipped = runs.iter().map(|r| r.skipped.len()).sum();
    let records = runs.into_iter().flat_map(|r| r.records).collect();
    ForecastPanel::new(records, PanelSource::Simulated, skipped)
}

/// Steady-state scalar Kalman filter for the latent state observed through
/// transitory noise. Optimal only when both shocks are Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyStateKalman {
    pub phi: f64,
    pub g_bar: f64,
    /// Weight on the newest observation's surprise.
    pub gain: f64,
}

impl SteadyStateKalman {
    pub fn new(params: &ModelParams) -> Result<Self> {
        if !(params.phi.abs() < 1.0) {
            return Err(Error::InvalidParameter("phi must satisfy |phi| < 1".into()));
        }
        if !(params.sigma_u > 0.0) || !(params.sigma_eps >= 0.0) {
            return Err(Error::InvalidParameter(
                "Kalman filter needs sigma_u > 0 and sigma_eps >= 0".into(),
            ));
        }
        let q = params.sigma_u * params.sigma_u;
        let r = params.sigma_eps * params.sigma_eps;
        // prior variance P solves P^2 + P (R (1 - phi^2) - Q) - Q R = 0
        let b = r * (1.0 - params.phi * params.phi) - q;
        let prior = (-b + (b * b + 4.0 * q * r).sqrt()) / 2.0;
        Ok(Self {
            phi: params.phi,
            g_bar: params.g_bar,
            gain: prior / (prior + r),
        })
    }

    /// Filtered latent deviation after each observation, starting from the prior mean.
    /// Equals `G sum_s (phi (1 - G))^s (g[t-s] - g_bar)` over the observed history.
    pub fn filtered(&self, g: &[f64]) -> Vec<f64> {
        let mut state = 0.0;
        g.iter()
            .map(|obs| {
                let predicted = self.phi * state;
                state = predicted + self.gain * (obs - self.g_bar - predicted);
                state
            })
            .collect()
    }

    pub fn forecast(&self, history: &[f64], h: usize) -> f64 {
        let state = self.filtered(history).last().copied().unwrap_or(0.0);
        self.g_bar + self.phi.powi(h as i32) * state
    }

    /// `K_t g[t+1]` at every origin of the path.
    pub fn one_step_forecasts(&self, g: &[f64]) -> Vec<f64> {
        self.filtered(g)
            .into_iter()
            .map(|s| self.g_bar + self.phi * s)
            .collect()
    }
}

/// `h`-step forecast of the steady-state Kalman filter run over `history`.
pub fn kalman_forecast(params: &ModelParams, history: &[f64], h: usize) -> Result<f64> {
    if h < 1 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    Ok(SteadyStateKalman::new(params)?.forecast(history, h))
}

/// OLS of forecast error on revision with an intercept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgRegression {
    pub alpha: f64,
    pub beta: f64,
    pub se_beta: f64,
    pub n: usize,
}

pub fn cg_regression(records: &[ForecastRecord]) -> Result<CgRegression> {
    let (x, y): (Vec<f64>, Vec<f64>) = records.iter().map(|r| (r.revision, r.error)).unzip();
    simple_ols(&x, &y)
}

/// Univariate OLS with intercept and the conventional slope standard error.
pub fn simple_ols(x: &[f64], y: &[f64]) -> Result<CgRegression> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::InvalidArgument("x and y lengths differ".into()));
    }
    if n < 10 {
        return Err(Error::InsufficientData(format!(
            "regression needs at least 10 observations, got {n}"
        )));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if !(sxx > 0.0) || sxx <= 1e-24 * nf * (mx * mx).max(1.0) {
        return Err(Error::DegenerateFit("regressor has zero variance".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let beta = sxy / sxx;
    let alpha = my - beta * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let e = b - alpha - beta * a;
            e * e
        })
        .sum();
    let se_beta = (rss / (nf - 2.0) / sxx).sqrt();
    Ok(CgRegression {
        alpha,
        beta,
        se_beta,
        n,
    })
}

/// Index of records by `(firm, t)`.
pub fn index_records(records: &[ForecastRecord]) -> HashMap<(&str, i64), &ForecastRecord> {
    records.iter().map(|r| ((r.firm.as_str(), r.t), r)).collect()
}
