//! Present-value pricing of a dividend claim under the forecaster's AR(p)
//! beliefs, realized returns, and the Campbell-Shiller link between returns
//! and forecast errors.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dgp::{simulate_panel, ModelParams};
use crate::error::{Error, Result};
use crate::forecast::{run_forecaster, spectral_radius, ArFit, FitMode};

/// Default number of explicitly discounted periods before the Gordon tail.
pub const DEFAULT_HORIZON: usize = 200;

/// AR(p) companion matrix together with a Campbell-Shiller discount factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CompanionMatrix {
    pub b: DMatrix<f64>,
    pub rho: f64,
}

impl CompanionMatrix {
    /// Requires `0 < rho < 1` and spectral radius of `rho B` below one.
    pub fn new(fit: &ArFit, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidParameter(format!("rho must be in (0, 1), got {rho}")));
        }
        let b = fit.companion();
        let radius = rho * spectral_radius(&b);
        if radius >= 1.0 {
            return Err(Error::DivergentSum(radius));
        }
        Ok(Self { b, rho })
    }

    fn p(&self) -> usize {
        self.b.nrows()
    }

    /// `(I - rho B)^-1`.
    pub fn resolvent(&self) -> DMatrix<f64> {
        let p = self.p();
        (DMatrix::identity(p, p) - &self.b * self.rho)
            .try_inverse()
            .expect("spectral radius of rho B below one")
    }
}

fn deviation_state(fit: &ArFit, recent: &[f64]) -> Result<DVector<f64>> {
    if recent.len() != fit.order() {
        return Err(Error::InvalidArgument(format!(
            "need {} recent observations, got {}",
            fit.order(),
            recent.len()
        )));
    }
    if fit.nonstationary {
        return Err(Error::DegenerateFit(
            "fitted process has no unconditional mean".into(),
        ));
    }
    let m = fit.intercept_mean;
    Ok(DVector::from_iterator(recent.len(), recent.iter().map(|v| v - m)))
}

/// `sum_{s>=0} rho^s F_t(g[t+1+s] - mean) = e1' B (I - rho B)^-1 G_t`, with
/// `recent` ordered most recent first.
pub fn discounted_growth_sum(fit: &ArFit, recent: &[f64], rho: f64) -> Result<f64> {
    let state = deviation_state(fit, recent)?;
    let cm = CompanionMatrix::new(fit, rho)?;
    let v = &cm.b * cm.resolvent() * state;
    Ok(v[0])
}

/// Pricing requires a stationary fit whose long-run growth is discounted away.
fn check_pricing(fit: &ArFit, r: f64) -> Result<()> {
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!("discount rate must be positive, got {r}")));
    }
    if fit.nonstationary {
        return Err(Error::NonConvergentPricing("fitted process has a unit root".into()));
    }
    let radius = fit.spectral_radius();
    if radius >= 1.0 {
        return Err(Error::NonConvergentPricing(format!(
            "fitted spectral radius {radius} is not below one"
        )));
    }
    if fit.intercept_mean.exp() >= 1.0 + r {
        return Err(Error::NonConvergentPricing(format!(
            "long-run growth {} is not below the discount rate {r}",
            fit.intercept_mean
        )));
    }
    Ok(())
}

/// Price-dividend ratio: `sum_{s<=S} exp(sum_{k<=s} F_t g[t+k]) / (1+r)^s`
/// plus a Gordon tail growing at the fitted mean after `S`.
pub fn price_dividend_ratio(fit: &ArFit, history: &[f64], r: f64, horizon: usize) -> Result<f64> {
    let p = fit.order();
    if history.len() < p {
        return Err(Error::InsufficientData(format!(
            "pricing needs {p} growth observations, got {}",
            history.len()
        )));
    }
    check_pricing(fit, r)?;
    let m = fit.intercept_mean;
    let mut lags: Vec<f64> = history[history.len() - p..].iter().rev().map(|v| v - m).collect();
    let growth = (1.0 + r).ln();
    let mut cum = 0.0;
    let mut total = 0.0;
    for s in 1..=horizon {
        let next: f64 = fit.betas.iter().zip(&lags).map(|(b, v)| b * v).sum();
        lags.rotate_right(1);
        lags[0] = next;
        cum += m + next;
        total += (cum - growth * s as f64).exp();
    }
    let x = (m - growth).exp();
    let tail = (cum - growth * horizon as f64).exp() * x / (1.0 - x);
    Ok(total + tail)
}

/// `P_t = D_t * price_dividend_ratio`.
pub fn price_claim(fit: &ArFit, history: &[f64], dividend: f64, r: f64, horizon: usize) -> Result<f64> {
    if !(dividend > 0.0) {
        return Err(Error::InvalidArgument(format!("dividend must be positive, got {dividend}")));
    }
    Ok(dividend * price_dividend_ratio(fit, history, r, horizon)?)
}

/// One firm's priced history. `prices[k]`, `dividends[k]` and `fits[k]` refer to
/// period `start + k`; `returns[k]` is the return from `start + k` to `start + k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PricedSeries {
    pub firm: String,
    pub start: usize,
    pub growth: Vec<f64>,
    pub dividends: Vec<f64>,
    pub prices: Vec<f64>,
    pub returns: Vec<f64>,
    pub log_returns: Vec<f64>,
    pub fits: Vec<ArFit>,
}

impl PricedSeries {
    pub fn price_dividend_ratios(&self) -> impl Iterator<Item = f64> + '_ {
        self.prices.iter().zip(&self.dividends).map(|(p, d)| p / d)
    }
}

/// Prices a growth path with the expanding-window forecaster. Dividends
/// start at `D = exp(g[0])` and compound with realized growth; returns pay
/// the dividend of the purchase date: `R = (P[t+1] + D[t] - P[t]) / P[t]`.
pub fn price_path(
    firm: &str,
    g: &[f64],
    p: usize,
    min_window: usize,
    r: f64,
    horizon: usize,
) -> Result<PricedSeries> {
    let run = run_forecaster(firm, g, p, min_window, &FitMode::Expanding)?;
    if let Some(s) = run.skipped.first() {
        return Err(Error::DegenerateFit(format!("origin {} has no usable fit: {}", s.t, s.reason)));
    }
    let Some(&(start, _)) = run.fits.first() else {
        return Err(Error::InsufficientData(format!(
            "path of length {} is shorter than the forecast window {min_window}",
            g.len()
        )));
    };
    let mut log_d = 0.0;
    let mut dividends = Vec::with_capacity(g.len() - start);
    for (t, gt) in g.iter().enumerate() {
        log_d += gt;
        if t >= start {
            dividends.push(log_d.exp());
        }
    }
    let mut fits = Vec::with_capacity(run.fits.len());
    let mut prices = Vec::with_capacity(run.fits.len());
    for ((t, fit), d) in run.fits.into_iter().zip(&dividends) {
        let fit = fit.expect("no skipped origins");
        prices.push(price_claim(&fit, &g[..=t], *d, r, horizon)?);
        fits.push(fit);
    }
    let returns: Vec<f64> = (0..prices.len().saturating_sub(1))
        .map(|k| (prices[k + 1] + dividends[k] - prices[k]) / prices[k])
        .collect();
    let log_returns = returns.iter().map(|v| v.ln_1p()).collect();
    Ok(PricedSeries {
        firm: firm.to_string(),
        start,
        growth: g.to_vec(),
        dividends,
        prices,
        returns,
        log_returns,
        fits,
    })
}

/// Priced firms plus the firms dropped with the pricing failure that removed them.
#[derive(Debug, Clone, PartialEq)]
pub struct PricedPanel {
    pub series: Vec<PricedSeries>,
    pub dropped: Vec<(String, String)>,
}

impl PricedPanel {
    /// `(x[t], x[t+1])` pairs of consecutive returns, log or simple.
    pub fn lagged_return_pairs(&self, log: bool) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for s in &self.series {
            let r = if log { &s.log_returns } else { &s.returns };
            for w in r.windows(2) {
                x.push(w[0]);
                y.push(w[1]);
            }
        }
        (x, y)
    }

    /// Campbell-Shiller discount `rho = PD / (1 + PD)` at the average price-dividend ratio.
    pub fn cs_rho(&self) -> Result<f64> {
        let (sum, n) = self
            .series
            .iter()
            .flat_map(|s| s.price_dividend_ratios())
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            return Err(Error::InsufficientData("no prices in panel".into()));
        }
        let pd = sum / n as f64;
        Ok(pd / (1.0 + pd))
    }
}

/// Simulates dividend growth, prices every firm, and drops the firms whose
/// fits break the pricing conditions at any date.
pub fn simulate_priced_panel(
    params: &ModelParams,
    n_firms: usize,
    t_len: usize,
    master_seed: u64,
    min_window: usize,
    horizon: usize,
) -> Result<PricedPanel> {
    params.validate_pricing()?;
    let panel = simulate_panel(params, n_firms, t_len, master_seed)?;
    let results: Vec<_> = panel
        .firms
        .par_iter()
        .map(|f| {
            price_path(
                &f.id,
                &f.path.g,
                params.ar_order,
                min_window,
                params.discount_rate,
                horizon,
            )
        })
        .collect();
    let mut out = PricedPanel {
        series: Vec::with_capacity(n_firms),
        dropped: Vec::new(),
    };
    for (firm, res) in panel.firms.iter().zip(results) {
        match res {
            Ok(s) => out.series.push(s),
            Err(e @ (Error::NonConvergentPricing(_) | Error::DegenerateFit(_))) => {
                warn!("firm {} dropped from priced panel: {e}", firm.id);
                out.dropped.push((firm.id.clone(), e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Linearized and realized excess log returns and their difference.
#[derive(Debug, Clone, PartialEq)]
pub struct CsDecomposition {
    /// `e1' (I + rho B (I - rho B)^-1) (G[t+1] - B G[t])` with the fit of date t.
    pub predicted: Vec<f64>,
    /// `log((P[t+1] + D[t+1]) / P[t]) - log(1 + r)`.
    pub realized: Vec<f64>,
    pub residual: Vec<f64>,
}

/// First-order Campbell-Shiller decomposition of each period's return into
/// the revision of discounted expected dividend growth. The realized return
/// pays the dividend of the sale date, the timing the present-value equation uses.
pub fn cs_return_decomposition(priced: &PricedSeries, rho: f64, r: f64) -> Result<CsDecomposition> {
    let n = priced.prices.len();
    let mut out = CsDecomposition {
        predicted: Vec::with_capacity(n.saturating_sub(1)),
        realized: Vec::with_capacity(n.saturating_sub(1)),
        residual: Vec::with_capacity(n.saturating_sub(1)),
    };
    let g = &priced.growth;
    for k in 0..n.saturating_sub(1) {
        let t = priced.start + k;
        let fit = &priced.fits[k];
        let p = fit.order();
        let now: Vec<f64> = (0..p).map(|j| g[t - j]).collect();
        let next: Vec<f64> = (0..p).map(|j| g[t + 1 - j]).collect();
        let cm = CompanionMatrix::new(fit, rho)?;
        let state_now = deviation_state(fit, &now)?;
        let state_next = deviation_state(fit, &next)?;
        let surprise = state_next - &cm.b * state_now;
        let pp = DMatrix::identity(p, p) + &cm.b * cm.resolvent() * rho;
        let predicted = (pp * surprise)[0];
        let realized = ((priced.prices[k + 1] + priced.dividends[k + 1]) / priced.prices[k]).ln()
            - (1.0 + r).ln();
        out.predicted.push(predicted);
        out.realized.push(realized);
        out.residual.push(realized - predicted);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn truncated_sum(fit: &ArFit, recent: &[f64], rho: f64) -> f64 {
        let radius = rho * fit.spectral_radius();
        let horizon = if radius > 0.0 {
            ((1e-12f64).ln() / radius.ln()).ceil() as usize + 1
        } else {
            1
        };
        let m = fit.intercept_mean;
        let mut lags: Vec<f64> = recent.iter().map(|v| v - m).collect();
        let mut total = 0.0;
        let mut disc = 1.0;
        for _ in 0..horizon.max(1) {
            let next: f64 = fit.betas.iter().zip(&lags).map(|(b, v)| b * v).sum();
            lags.insert(0, next);
            lags.pop();
            total += disc * next;
            disc *= rho;
        }
        total
    }

    #[test]
    fn geometric_series_for_one_lag() {
        let fit = ArFit::with_mean(0.1, vec![0.8]);
        let v = discounted_growth_sum(&fit, &[0.6], 0.95).unwrap();
        assert!((v - 0.8 * 0.5 / (1.0 - 0.95 * 0.8)).abs() < 1e-12);
        let flat = ArFit::with_mean(0.1, vec![0.0]);
        assert_eq!(discounted_growth_sum(&flat, &[3.0], 0.9).unwrap(), 0.0);
    }

    #[test]
    fn divergent_sum_is_rejected() {
        let fit = ArFit::with_mean(0.0, vec![1.3, -0.1]);
        assert!(matches!(
            discounted_growth_sum(&fit, &[1.0, 0.0], 0.9),
            Err(Error::DivergentSum(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn closed_form_matches_truncated_sum(
            raw in prop::collection::vec(-1.0f64..1.0, 1..5),
            mean in -0.5f64..0.5,
            recent in prop::collection::vec(-2.0f64..2.0, 5),
            rho in 0.5f64..0.99,
        ) {
            let total: f64 = raw.iter().map(|b| b.abs()).sum();
            let betas: Vec<f64> = raw.iter().map(|b| 0.97 * b / total.max(1.0)).collect();
            let fit = ArFit::with_mean(mean, betas);
            let recent = &recent[..fit.order()];
            let a = discounted_growth_sum(&fit, recent, rho).unwrap();
            let b = truncated_sum(&fit, recent, rho);
            prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn zero_growth_is_a_perpetuity() {
        let fit = ArFit::with_mean(0.0, vec![0.0]);
        let p = price_claim(&fit, &[0.0], 1.5, 0.05, DEFAULT_HORIZON).unwrap();
        assert!((p - 1.5 / 0.05).abs() < 1e-9);
    }

    #[test]
    fn constant_growth_matches_gordon() {
        let g = 1.02f64.ln();
        let fit = ArFit::with_mean(g, vec![0.0]);
        let x = 1.02 / 1.05;
        for horizon in [1, 10, DEFAULT_HORIZON] {
            let p = price_claim(&fit, &[0.3], 2.0, 0.05, horizon).unwrap();
            assert!((p - 2.0 * x / (1.0 - x)).abs() < 1e-9, "{horizon}: {p}");
        }
    }

    #[test]
    fn price_is_homogeneous_in_dividend() {
        let fit = ArFit::with_mean(0.01, vec![0.6, 0.2]);
        let h = [0.02, -0.01, 0.03];
        let a = price_claim(&fit, &h, 1.0, 0.06, DEFAULT_HORIZON).unwrap();
        let b = price_claim(&fit, &h, 2.0, 0.06, DEFAULT_HORIZON).unwrap();
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn explicit_sum_matches_direct_forecasts() {
        let fit = ArFit::with_mean(0.01, vec![0.6, 0.2]);
        let h = [0.02, -0.01, 0.03];
        let r: f64 = 0.06;
        let mut direct = 0.0;
        let mut cum = 0.0;
        for s in 1..=DEFAULT_HORIZON {
            cum += crate::forecast::forecast_horizon(&fit, &[0.03, -0.01], s).unwrap();
            direct += cum.exp() / (1.0 + r).powi(s as i32);
        }
        let x = 0.01f64.exp() / 1.06;
        direct += cum.exp() / (1.0 + r).powi(DEFAULT_HORIZON as i32) * x / (1.0 - x);
        let p = price_claim(&fit, &h, 1.0, r, DEFAULT_HORIZON).unwrap();
        assert!((p - direct).abs() < 1e-9 * direct);
    }

    #[test]
    fn pricing_conditions_are_enforced() {
        let fast = ArFit::with_mean(0.1, vec![0.5]);
        assert!(matches!(
            price_claim(&fast, &[0.0], 1.0, 0.05, 10),
            Err(Error::NonConvergentPricing(_))
        ));
        let explosive = ArFit::with_mean(0.0, vec![1.2, -0.1]);
        assert!(matches!(
            price_claim(&explosive, &[0.0, 0.0], 1.0, 0.05, 10),
            Err(Error::NonConvergentPricing(_))
        ));
        let ok = ArFit::with_mean(0.0, vec![0.5]);
        assert!(price_claim(&ok, &[0.0], 0.0, 0.05, 10).is_err());
    }

    fn small(nu: f64, scale: f64) -> ModelParams {
        ModelParams {
            nu,
            sigma_u: scale,
            sigma_eps: scale,
            ar_order: 2,
            discount_rate: 0.05,
            ..ModelParams::default()
        }
    }

    #[test]
    fn returns_follow_their_definition() {
        let panel = simulate_priced_panel(&small(1.6, 0.01), 4, 120, 3, 40, DEFAULT_HORIZON).unwrap();
        assert!(!panel.series.is_empty());
        for s in &panel.series {
            assert_eq!(s.returns.len() + 1, s.prices.len());
            for k in 0..s.returns.len() {
                let r = (s.prices[k + 1] + s.dividends[k] - s.prices[k]) / s.prices[k];
                assert_eq!(s.returns[k], r);
                assert_eq!(s.log_returns[k], r.ln_1p());
            }
            assert!(s.prices.iter().all(|p| *p > 0.0));
        }
    }

    #[test]
    fn priced_panel_is_deterministic() {
        let a = simulate_priced_panel(&small(1.6, 0.01), 3, 90, 5, 40, DEFAULT_HORIZON).unwrap();
        let b = simulate_priced_panel(&small(1.6, 0.01), 3, 90, 5, 40, DEFAULT_HORIZON).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_path_has_zero_cs_residual() {
        // AR(1) decay with no shocks: the AR(1) forecaster is exactly right
        let g: Vec<f64> = (0..120).map(|t| 0.01 + 0.03 * 0.8f64.powi(t)).collect();
        let s = price_path("a", &g, 1, 40, 0.05, DEFAULT_HORIZON).unwrap();
        let panel = PricedPanel {
            series: vec![s],
            dropped: vec![],
        };
        let rho = panel.cs_rho().unwrap();
        let cs = cs_return_decomposition(&panel.series[0], rho, 0.05).unwrap();
        for v in &cs.residual {
            assert!(v.abs() < 1e-8, "{v}");
        }
    }

    /// Median absolute residual and its ratio to the return standard deviation.
    fn median_abs_residual(scale: f64) -> (f64, f64) {
        let params = ModelParams {
            nu: f64::INFINITY,
            ar_order: 1,
            ..small(f64::INFINITY, scale)
        };
        let panel = simulate_priced_panel(&params, 20, 300, 11, 40, DEFAULT_HORIZON).unwrap();
        let rho = panel.cs_rho().unwrap();
        let mut res = Vec::new();
        let mut rets = Vec::new();
        for s in &panel.series {
            let cs = cs_return_decomposition(s, rho, 0.05).unwrap();
            res.extend(cs.residual.iter().map(|v| v.abs()));
            rets.extend(cs.realized);
        }
        res.sort_by(f64::total_cmp);
        let n = rets.len() as f64;
        let mean = rets.iter().sum::<f64>() / n;
        let sd = (rets.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        (res[res.len() / 2], res[res.len() / 2] / sd)
    }

    #[test]
    fn cs_approximation_is_first_order() {
        let (coarse, coarse_ratio) = median_abs_residual(0.01);
        let (fine, fine_ratio) = median_abs_residual(0.005);
        assert!(coarse_ratio < 0.1 && fine_ratio < 0.1, "{coarse_ratio} {fine_ratio}");
        assert!(fine < coarse, "{fine} vs {coarse}");
    }
}
