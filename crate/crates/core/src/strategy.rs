//! Cross-sectional momentum signal, the momentum-with-tail-reversal weight
//! schedule, monthly self-financing backtests and the Sharpe grid search over
//! the two inflection points.

use log::{debug, warn};
use rayon::prelude::*;
use statrs::statistics::{Data, OrderStatistics, RankTieBreaker};

use crate::error::{Error, Result};
use crate::pricing::PricedPanel;

/// Returns used by the signal: months `t-12 ..= t-2` for holding month `t`.
pub const SIGNAL_LAG_FAR: usize = 12;
pub const SIGNAL_LAG_NEAR: usize = 2;
pub const MIN_MONTHS: usize = 24;
pub const MIN_STOCKS: usize = 10;
pub const DEFAULT_GRID_STEP: f64 = 0.01;

/// Simple returns, one row per stock, aligned by month. `NaN` marks a missing month.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    pub ids: Vec<String>,
    pub returns: Vec<Vec<f64>>,
}

impl ReturnPanel {
    pub fn new(ids: Vec<String>, returns: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != returns.len() {
            return Err(Error::InvalidArgument("one return row per stock id required".into()));
        }
        if let Some(first) = returns.first() {
            if returns.iter().any(|r| r.len() != first.len()) {
                return Err(Error::InvalidArgument("return rows differ in length".into()));
            }
        }
        if returns.iter().flatten().any(|r| *r <= -1.0 || r.is_infinite()) {
            return Err(Error::InvalidArgument("returns must exceed -100% and be finite".into()));
        }
        Ok(Self { ids, returns })
    }

    /// Simple returns of every priced firm over their common final stretch.
    pub fn from_priced(panel: &PricedPanel) -> Result<Self> {
        let len = panel.series.iter().map(|s| s.returns.len()).min().unwrap_or(0);
        Self::new(
            panel.series.iter().map(|s| s.firm.clone()).collect(),
            panel
                .series
                .iter()
                .map(|s| s.returns[s.returns.len() - len..].to_vec())
                .collect(),
        )
    }

    pub fn n_months(&self) -> usize {
        self.returns.first().map_or(0, Vec::len)
    }

    pub fn n_stocks(&self) -> usize {
        self.ids.len()
    }
}

/// Signals of the stocks eligible in one holding month.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSlice {
    pub month: usize,
    /// Row indices into the return panel.
    pub stocks: Vec<usize>,
    /// Rank of `past_ret` mapped to `[0, 1]`, ties averaged.
    pub s: Vec<f64>,
    /// Cumulative log return over the signal window.
    pub past_ret: Vec<f64>,
}

/// Ranks trailing cumulative log returns over months `t-12 ..= t-2`. Stocks
/// missing any of those months are left out.
pub fn momentum_signal(panel: &ReturnPanel, month: usize) -> Result<SignalSlice> {
    if month < SIGNAL_LAG_FAR || month >= panel.n_months() {
        return Err(Error::InsufficientData(format!(
            "month {month} lacks {SIGNAL_LAG_FAR} months of history"
        )));
    }
    let mut stocks = Vec::new();
    let mut past_ret = Vec::new();
    for (i, row) in panel.returns.iter().enumerate() {
        let window = &row[month - SIGNAL_LAG_FAR..=month - SIGNAL_LAG_NEAR];
        if window.iter().all(|r| r.is_finite()) {
            stocks.push(i);
            past_ret.push(window.iter().map(|r| r.ln_1p()).sum());
        }
    }
    if stocks.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "month {month} has {} stocks with a full signal window",
            stocks.len()
        )));
    }
    let denom = (stocks.len() - 1) as f64;
    let s = Data::new(past_ret.clone())
        .ranks(RankTieBreaker::Average)
        .into_iter()
        .map(|r| (r - 1.0) / denom)
        .collect();
    Ok(SignalSlice {
        month,
        stocks,
        s,
        past_ret,
    })
}

/// Which middle piece the weight schedule uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightForm {
    /// Middle piece `(s - a)/(b - a) - 0.5`, continuous at both kinks.
    #[default]
    Continuous,
    /// Middle piece `(s - b)/(b - a) - 0.5` as originally printed; jumps at both kinks.
    Verbatim,
}

fn check_inflections(a: f64, b: f64) -> Result<()> {
    if !(0.0 < a && a < b && b < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "inflection points need 0 < a < b < 1, got a = {a}, b = {b}"
        )));
    }
    Ok(())
}

/// Reversal below `a`, momentum between `a` and `b`, reversal above `b`.
pub fn weight_schedule(s: f64, a: f64, b: f64, form: WeightForm) -> Result<f64> {
    check_inflections(a, b)?;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("signal must be in [0, 1], got {s}")));
    }
    Ok(weight_unchecked(s, a, b, form))
}

#[inline]
fn weight_unchecked(s: f64, a: f64, b: f64, form: WeightForm) -> f64 {
    if s <= a {
        0.5 - s / a
    } else if s <= b {
        match form {
            WeightForm::Continuous => (s - a) / (b - a) - 0.5,
            WeightForm::Verbatim => (s - b) / (b - a) - 0.5,
        }
    } else {
        0.5 - (s - b) / (1.0 - b)
    }
}

/// Demeaned weights scaled to unit gross exposure; `None` when all raw weights coincide.
pub fn normalized_weights(s: &[f64], a: f64, b: f64, form: WeightForm) -> Option<Vec<f64>> {
    let raw: Vec<f64> = s.iter().map(|v| weight_unchecked(*v, a, b, form)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let centered: Vec<f64> = raw.iter().map(|w| w - mean).collect();
    let gross: f64 = centered.iter().map(|w| w.abs()).sum();
    if !(gross > 1e-12) {
        return None;
    }
    Some(centered.into_iter().map(|w| w / gross).collect())
}

/// Signals for every holding month, with the stocks that also have a return that month.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalPanel {
    pub slices: Vec<SignalSlice>,
    /// Months without enough eligible stocks.
    pub skipped: Vec<usize>,
}

pub fn signal_panel(panel: &ReturnPanel) -> SignalPanel {
    let mut out = SignalPanel {
        slices: Vec::new(),
        skipped: Vec::new(),
    };
    for month in SIGNAL_LAG_FAR..panel.n_months() {
        let slice = momentum_signal(panel, month).and_then(|sl| {
            // hold only stocks whose return this month is observed
            let keep: Vec<usize> = (0..sl.stocks.len())
                .filter(|&k| panel.returns[sl.stocks[k]][month].is_finite())
                .collect();
            if keep.len() == sl.stocks.len() {
                return Ok(sl);
            }
            let sub = ReturnPanel {
                ids: keep.iter().map(|&k| panel.ids[sl.stocks[k]].clone()).collect(),
                returns: keep.iter().map(|&k| panel.returns[sl.stocks[k]].clone()).collect(),
            };
            let mut resl = momentum_signal(&sub, month)?;
            resl.stocks = keep.iter().map(|&k| sl.stocks[k]).collect();
            Ok(resl)
        });
        match slice {
            Ok(sl) => out.slices.push(sl),
            Err(e) => {
                debug!("month {month} skipped: {e}");
                out.skipped.push(month);
            }
        }
    }
    if !out.skipped.is_empty() {
        warn!("{} months skipped for lack of stocks", out.skipped.len());
    }
    out
}

/// Monthly portfolio returns `sum_i w_i r_i` with their months.
pub fn portfolio_returns(
    signals: &SignalPanel,
    panel: &ReturnPanel,
    a: f64,
    b: f64,
    form: WeightForm,
) -> Result<(Vec<usize>, Vec<f64>)> {
    check_inflections(a, b)?;
    let mut months = Vec::with_capacity(signals.slices.len());
    let mut rets = Vec::with_capacity(signals.slices.len());
    for sl in &signals.slices {
        let Some(w) = normalized_weights(&sl.s, a, b, form) else {
            debug!("month {} skipped: flat weights", sl.month);
            continue;
        };
        let r: f64 = w
            .iter()
            .zip(&sl.stocks)
            .map(|(w, &i)| w * panel.returns[i][sl.month])
            .sum();
        months.push(sl.month);
        rets.push(r);
    }
    Ok((months, rets))
}

/// Annualized `sqrt(12) * mean / sd` of monthly returns; zero when the returns do not vary.
pub fn sharpe_ratio(monthly: &[f64]) -> f64 {
    let n = monthly.len() as f64;
    if monthly.len() < 2 {
        return 0.0;
    }
    let mean = monthly.iter().sum::<f64>() / n;
    let var = monthly.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return 0.0;
    }
    12f64.sqrt() * mean / var.sqrt()
}

/// Sharpe ratio of every `(a, b)` cell; `sharpe[i][j]` belongs to `(a_grid[i], b_grid[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharpeSurface {
    pub a_grid: Vec<f64>,
    pub b_grid: Vec<f64>,
    pub sharpe: Vec<Vec<f64>>,
}

impl SharpeSurface {
    /// Cells in row-major `(a, b, sharpe)` order.
    pub fn cells(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.a_grid.iter().enumerate().flat_map(move |(i, a)| {
            self.b_grid
                .iter()
                .enumerate()
                .map(move |(j, b)| (*a, *b, self.sharpe[i][j]))
        })
    }

    pub fn max(&self) -> f64 {
        self.cells().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sharpe of the cell nearest `(a, b)`.
    pub fn at(&self, a: f64, b: f64) -> f64 {
        let near = |grid: &[f64], v: f64| {
            (0..grid.len())
                .min_by(|&i, &j| (grid[i] - v).abs().total_cmp(&(grid[j] - v).abs()))
                .expect("nonempty grid")
        };
        self.sharpe[near(&self.a_grid, a)][near(&self.b_grid, b)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyReport {
    pub a: f64,
    pub b: f64,
    pub form: WeightForm,
    pub months: Vec<usize>,
    pub monthly_returns: Vec<f64>,
    pub sharpe: f64,
    pub surface: Option<SharpeSurface>,
}

fn check_panel(panel: &ReturnPanel) -> Result<()> {
    if panel.n_stocks() < MIN_STOCKS {
        return Err(Error::InsufficientData(format!(
            "backtest needs at least {MIN_STOCKS} stocks, got {}",
            panel.n_stocks()
        )));
    }
    if panel.n_months() < MIN_MONTHS + SIGNAL_LAG_FAR {
        return Err(Error::InsufficientData(format!(
            "backtest needs {} months of returns ({MIN_MONTHS} holding months), got {}",
            MIN_MONTHS + SIGNAL_LAG_FAR,
            panel.n_months()
        )));
    }
    Ok(())
}

pub fn backtest(panel: &ReturnPanel, a: f64, b: f64, form: WeightForm) -> Result<StrategyReport> {
    check_panel(panel)?;
    let signals = signal_panel(panel);
    backtest_signals(&signals, panel, a, b, form)
}

fn backtest_signals(
    signals: &SignalPanel,
    panel: &ReturnPanel,
    a: f64,
    b: f64,
    form: WeightForm,
) -> Result<StrategyReport> {
    let (months, monthly_returns) = portfolio_returns(signals, panel, a, b, form)?;
    Ok(StrategyReport {
        a,
        b,
        form,
        sharpe: sharpe_ratio(&monthly_returns),
        months,
        monthly_returns,
        surface: None,
    })
}

/// `a` on `step, 2 step, .. < 0.5` and `b` on `0.5 + step, .. < 1`.
pub fn inflection_grid(step: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let halves = 0.5 / step;
    let n = halves.round();
    if !(step > 0.0) || (halves - n).abs() > 1e-9 || n < 2.0 {
        return Err(Error::InvalidParameter(format!(
            "grid step must divide 0.5 into at least two parts, got {step}"
        )));
    }
    let n = n as usize;
    let denom = (2 * n) as f64;
    let a = (1..n).map(|k| k as f64 / denom).collect();
    let b = (1..n).map(|k| (n + k) as f64 / denom).collect();
    Ok((a, b))
}

/// Exhaustive Sharpe search over the inflection grid. Ties go to the widest
/// momentum band: smallest `a`, then largest `b`.
pub fn optimize_inflections(panel: &ReturnPanel, grid_step: f64, form: WeightForm) -> Result<StrategyReport> {
    check_panel(panel)?;
    let (a_grid, b_grid) = inflection_grid(grid_step)?;
    let signals = signal_panel(panel);
    let sharpe: Vec<Vec<f64>> = a_grid
        .par_iter()
        .map(|&a| {
            b_grid
                .iter()
                .map(|&b| {
                    portfolio_returns(&signals, panel, a, b, form).map(|(_, r)| sharpe_ratio(&r))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut best = (0, b_grid.len() - 1);
    for i in 0..a_grid.len() {
        for j in (0..b_grid.len()).rev() {
            if sharpe[i][j] > sharpe[best.0][best.1] {
                best = (i, j);
            }
        }
    }
    let mut report = backtest_signals(&signals, panel, a_grid[best.0], b_grid[best.1], form)?;
    report.surface = Some(SharpeSurface {
        a_grid,
        b_grid,
        sharpe,
    });
    Ok(report)
}
