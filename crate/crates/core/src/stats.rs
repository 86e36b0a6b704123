//! Nonparametric diagnostics: percentile binscatter, Gaussian-kernel local
//! polynomial smoothing with pairs-bootstrap bands, per-firm MAD
//! normalization, tail QQ comparisons and a Student-t maximum-likelihood fit.

use std::fmt;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use ndarray::linalg::general_mat_mul;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::gamma::ln_gamma;
use statrs::statistics::{Data, OrderStatistics};

use crate::dgp::derive_seed;
use crate::error::{Error, Result};
use crate::forecast::{ForecastPanel, ForecastRecord};

pub const DEFAULT_BINS: usize = 100;
pub const DEFAULT_BOOT: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_DEGREE: usize = 3;
pub const DEFAULT_TAIL_LEVEL: f64 = 0.90;
/// Probability levels on the QQ grid.
pub const QQ_GRID: usize = 200;
/// Fewest observations a smoother accepts.
pub const MIN_SMOOTH_OBS: usize = 30;
const MAX_WIDENINGS: usize = 5;
const MIN_EFFECTIVE_N: f64 = 3.0;
/// Observations per GEMM block in the bootstrap.
const BOOT_CHUNK: usize = 4096;

/// Per-bin summaries of `y` against `x`, binned by the rank of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bins {
    /// Mean `x` per bin.
    pub bin_x: Vec<f64>,
    /// Mean `y` per bin.
    pub bin_y: Vec<f64>,
    /// Median `x` per bin, the bin's center.
    pub bin_center: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Bins {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }
}

fn check_pairs(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "x has {} values, y has {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite value in x or y".into()));
    }
    Ok(())
}

fn median_sorted(xs: &[f64]) -> f64 {
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

/// Equal-count bins on the rank of `x`. The remainder goes to the lowest
/// bins and ties keep input order. Fewer points than bins gives one bin per point.
pub fn binscatter(x: &[f64], y: &[f64], n_bins: usize) -> Result<Bins> {
    check_pairs(x, y)?;
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be positive".into()));
    }
    if x.is_empty() {
        return Err(Error::InsufficientData("no observations to bin".into()));
    }
    let n = x.len();
    let n_bins = if n < n_bins {
        warn!("{n} observations for {n_bins} bins; using {n} bins");
        n
    } else {
        n_bins
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let (q, rem) = (n / n_bins, n % n_bins);
    let mut bins = Bins {
        bin_x: Vec::with_capacity(n_bins),
        bin_y: Vec::with_capacity(n_bins),
        bin_center: Vec::with_capacity(n_bins),
        counts: Vec::with_capacity(n_bins),
    };
    let mut start = 0;
    for k in 0..n_bins {
        let size = q + usize::from(k < rem);
        let idx = &order[start..start + size];
        let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        bins.bin_x.push(xs.iter().sum::<f64>() / size as f64);
        bins.bin_y.push(idx.iter().map(|&i| y[i]).sum::<f64>() / size as f64);
        bins.bin_center.push(median_sorted(&xs));
        bins.counts.push(size);
        start += size;
    }
    Ok(bins)
}

/// Average of the center spacings between the two lowest and the two highest
/// percentile bins. Bin medians serve as centers so a single extreme draw in
/// an outer bin cannot set the smoothing scale.
pub fn percentile_bandwidth(x: &[f64], n_bins: usize) -> Result<f64> {
    let bins = binscatter(x, x, n_bins)?;
    let c = &bins.bin_center;
    let k = c.len();
    if k < 4 {
        return Err(Error::InsufficientData(format!(
            "bandwidth rule needs at least 4 bins, got {k}"
        )));
    }
    let b = ((c[1] - c[0]) + (c[k - 1] - c[k - 2])) / 2.0;
    if b > 0.0 {
        return Ok(b);
    }
    let spread = c[k - 1] - c[0];
    if spread > 0.0 {
        warn!("outer bin centers coincide; falling back to bandwidth {}", spread / k as f64);
        return Ok(spread / k as f64);
    }
    Err(Error::DegenerateFit("x has no spread".into()))
}

/// Number of kernel moments per evaluation point: `K d^k` for `k <= 2 deg`,
/// `K d^k y` for `k <= deg`, and `K^2`.
fn n_features(degree: usize) -> usize {
    3 * degree + 3
}

#[inline]
fn push_features(xi: f64, yi: f64, x0: f64, b: f64, degree: usize, out: &mut [f64]) {
    let d = (xi - x0) / b;
    let k = (-0.5 * d * d).exp();
    let mut pw = k;
    for j in 0..=2 * degree {
        out[j] = pw;
        if j <= degree {
            out[2 * degree + 1 + j] = pw * yi;
        }
        pw *= d;
    }
    out[3 * degree + 2] = k * k;
}

enum LocalFailure {
    ThinSupport(f64),
    Singular,
}

/// Intercept of the weighted polynomial fit from its kernel moments.
fn solve_local(m: &[f64], degree: usize) -> std::result::Result<f64, LocalFailure> {
    let s0 = m[0];
    let n_eff = if m[3 * degree + 2] > 0.0 {
        s0 * s0 / m[3 * degree + 2]
    } else {
        0.0
    };
    if !(n_eff >= MIN_EFFECTIVE_N) {
        return Err(LocalFailure::ThinSupport(n_eff));
    }
    let k = degree + 1;
    let a = DMatrix::from_fn(k, k, |i, j| m[i + j]);
    let v = DVector::from_fn(k, |i, _| m[2 * degree + 1 + i]);
    let chol = a.clone().cholesky().ok_or(LocalFailure::Singular)?;
    let l = chol.l_dirty();
    for i in 0..k {
        if l[(i, i)] * l[(i, i)] <= 1e-13 * a[(i, i)] {
            return Err(LocalFailure::Singular);
        }
    }
    Ok(chol.solve(&v)[0])
}

/// Gaussian-kernel local polynomial regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loess {
    pub degree: usize,
    pub bandwidth: f64,
}

/// Smoothed values and the bandwidth each point needed.
#[derive(Debug, Clone, PartialEq)]
pub struct LoessFit {
    pub values: Vec<f64>,
    pub bandwidths: Vec<f64>,
}

impl Loess {
    pub fn new(degree: usize, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Self { degree, bandwidth })
    }

    /// Bandwidth from the percentile rule on `x`.
    pub fn from_data(x: &[f64], n_bins: usize, degree: usize) -> Result<Self> {
        Self::new(degree, percentile_bandwidth(x, n_bins)?)
    }

    /// Fits at each evaluation point, doubling the bandwidth where the local
    /// sample is too thin or the local system is singular.
    pub fn fit(&self, x: &[f64], y: &[f64], eval: &[f64]) -> Result<LoessFit> {
        check_smoother_input(x, y, eval)?;
        let nf = n_features(self.degree);
        let mut values = Vec::with_capacity(eval.len());
        let mut bandwidths = Vec::with_capacity(eval.len());
        let mut feat = vec![0.0; nf];
        for &x0 in eval {
            let mut b = self.bandwidth;
            let mut attempt = 0;
            loop {
                let mut m = vec![0.0; nf];
                for (xi, yi) in x.iter().zip(y) {
                    push_features(*xi, *yi, x0, b, self.degree, &mut feat);
                    for (acc, f) in m.iter_mut().zip(&feat) {
                        *acc += f;
                    }
                }
                match solve_local(&m, self.degree) {
                    Ok(v) => {
                        values.push(v);
                        bandwidths.push(b);
                        break;
                    }
                    Err(failure) => {
                        if attempt == MAX_WIDENINGS {
                            return Err(match failure {
                                LocalFailure::ThinSupport(n_eff) => Error::InsufficientData(format!(
                                    "effective local sample {n_eff:.2} at x = {x0} after {MAX_WIDENINGS} widenings"
                                )),
                                LocalFailure::Singular => Error::DegenerateFit(format!(
                                    "singular local fit at x = {x0} after {MAX_WIDENINGS} widenings"
                                )),
                            });
                        }
                        attempt += 1;
                        b *= 2.0;
                        debug!("widening bandwidth to {b} at x = {x0}");
                    }
                }
            }
        }
        Ok(LoessFit { values, bandwidths })
    }
}

fn check_smoother_input(x: &[f64], y: &[f64], eval: &[f64]) -> Result<()> {
    check_pairs(x, y)?;
    if x.len() < MIN_SMOOTH_OBS {
        return Err(Error::InsufficientData(format!(
            "smoothing needs at least {MIN_SMOOTH_OBS} observations, got {}",
            x.len()
        )));
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if let Some(e) = eval.iter().find(|e| !(**e >= lo && **e <= hi)) {
        return Err(Error::InvalidArgument(format!(
            "evaluation point {e} outside data range [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Smoother with the default degree and the percentile bandwidth rule.
pub fn loess_curve(x: &[f64], y: &[f64], eval: &[f64]) -> Result<Vec<f64>> {
    Ok(Loess::from_data(x, DEFAULT_BINS, DEFAULT_DEGREE)?.fit(x, y, eval)?.values)
}

/// Kernel moments of every resampled data set at every evaluation point:
/// `counts` (rows x n, row-major multiplicities) times the feature matrix,
/// accumulated over blocks of observations.
fn resampled_moments(
    x: &[f64],
    y: &[f64],
    eval: &[f64],
    bandwidths: &[f64],
    degree: usize,
    counts: &[u8],
    rows: usize,
) -> Array2<f64> {
    let n = x.len();
    let nf = n_features(degree);
    let cols = eval.len() * nf;
    let mut acc = Array2::<f64>::zeros((rows, cols));
    let mut feat = vec![0.0; nf];
    for start in (0..n).step_by(BOOT_CHUNK) {
        let end = (start + BOOT_CHUNK).min(n);
        let len = end - start;
        let mut f = Array2::<f64>::zeros((len, cols));
        for (r, i) in (start..end).enumerate() {
            let mut row = f.row_mut(r);
            let row = row.as_slice_mut().expect("standard layout");
            for (j, (&x0, &b)) in eval.iter().zip(bandwidths).enumerate() {
                push_features(x[i], y[i], x0, b, degree, &mut feat);
                row[j * nf..(j + 1) * nf].copy_from_slice(&feat);
            }
        }
        let m = Array2::from_shape_fn((rows, len), |(r, c)| f64::from(counts[r * n + start + c]));
        general_mat_mul(1.0, &m, &f, 1.0, &mut acc);
    }
    acc
}

/// Multiplicities of one pairs-bootstrap resample.
fn resample_counts(n: usize, seed: u64, out: &mut [u8]) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n {
        let i = rng.random_range(0..n);
        out[i] = out[i]
            .checked_add(1)
            .ok_or_else(|| Error::Data("bootstrap multiplicity overflow".into()))?;
    }
    Ok(())
}

/// Smoothed curves of the kept bootstrap replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapDraws {
    pub curves: Vec<Vec<f64>>,
    pub dropped: usize,
}

impl BootstrapDraws {
    /// Pointwise percentile interval.
    pub fn band(&self, level: f64) -> (Vec<f64>, Vec<f64>) {
        percentile_band(&self.curves, level)
    }

    /// Percentile interval of each first difference of the curves.
    pub fn slope_band(&self, level: f64) -> (Vec<f64>, Vec<f64>) {
        let diffs: Vec<Vec<f64>> = self.curves.iter().map(|c| first_differences(c)).collect();
        percentile_band(&diffs, level)
    }
}

fn percentile_band(curves: &[Vec<f64>], level: f64) -> (Vec<f64>, Vec<f64>) {
    let k = curves.first().map_or(0, Vec::len);
    let tail = (1.0 - level) / 2.0;
    (0..k)
        .map(|j| {
            let mut col = Data::new(curves.iter().map(|c| c[j]).collect::<Vec<_>>());
            (col.quantile(tail), col.quantile(1.0 - tail))
        })
        .unzip()
}

pub fn first_differences(v: &[f64]) -> Vec<f64> {
    v.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Pairs bootstrap of the smoother with each point's bandwidth held at its
/// full-sample value. Replicates whose local fit fails anywhere are dropped.
pub fn bootstrap_replicates(
    x: &[f64],
    y: &[f64],
    eval: &[f64],
    bandwidths: &[f64],
    degree: usize,
    n_boot: usize,
    seed: u64,
) -> Result<BootstrapDraws> {
    check_smoother_input(x, y, eval)?;
    if bandwidths.len() != eval.len() {
        return Err(Error::InvalidArgument("one bandwidth per evaluation point required".into()));
    }
    let n = x.len();
    let mut counts = vec![0u8; n_boot * n];
    counts
        .par_chunks_mut(n.max(1))
        .enumerate()
        .try_for_each(|(r, row)| resample_counts(n, derive_seed(seed, r as u64), row))?;
    let moments = resampled_moments(x, y, eval, bandwidths, degree, &counts, n_boot);
    drop(counts);
    let nf = n_features(degree);
    let mut curves = Vec::with_capacity(n_boot);
    for r in 0..n_boot {
        let row = moments.row(r);
        let row = row.as_slice().expect("standard layout");
        let curve: std::result::Result<Vec<f64>, _> = (0..eval.len())
            .map(|j| solve_local(&row[j * nf..(j + 1) * nf], degree))
            .collect();
        if let Ok(c) = curve {
            curves.push(c);
        }
    }
    let dropped = n_boot - curves.len();
    if dropped > 0 {
        warn!("{dropped} of {n_boot} bootstrap replicates dropped on failed local fits");
    }
    if n_boot > 0 && curves.is_empty() {
        return Err(Error::InsufficientData("every bootstrap replicate failed".into()));
    }
    Ok(BootstrapDraws { curves, dropped })
}

/// Pointwise percentile band of the default smoother.
pub fn bootstrap_band(
    x: &[f64],
    y: &[f64],
    eval: &[f64],
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_level(level)?;
    let fit = Loess::from_data(x, DEFAULT_BINS, DEFAULT_DEGREE)?.fit(x, y, eval)?;
    let draws = bootstrap_replicates(x, y, eval, &fit.bandwidths, DEFAULT_DEGREE, n_boot, seed)?;
    Ok(draws.band(level))
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("level must be in (0, 1), got {level}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveOptions {
    pub n_bins: usize,
    pub n_boot: usize,
    pub level: f64,
    pub degree: usize,
    pub seed: u64,
}

impl Default for CurveOptions {
    fn default() -> Self {
        Self {
            n_bins: DEFAULT_BINS,
            n_boot: DEFAULT_BOOT,
            level: DEFAULT_LEVEL,
            degree: DEFAULT_DEGREE,
            seed: 0,
        }
    }
}

/// Binscatter dots, the smoother at the bin centers, and bootstrap bands for
/// both the curve and its bin-to-bin slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedCurve {
    pub bin_x: Vec<f64>,
    pub bin_y: Vec<f64>,
    pub bin_center: Vec<f64>,
    pub loess_y: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
    /// Band for `loess_y[k+1] - loess_y[k]`.
    pub slope_lo: Vec<f64>,
    pub slope_hi: Vec<f64>,
    pub n_bins: usize,
    /// Bandwidth from the percentile rule, before any local widening.
    pub bandwidth: f64,
    pub n_obs: usize,
    pub dropped_replicates: usize,
}

/// Result of the central-increasing, tails-decreasing shape test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SShape {
    pub central_min_slope: f64,
    pub left_tail_slope: f64,
    pub right_tail_slope: f64,
}

impl SShape {
    pub fn holds(&self) -> bool {
        self.central_min_slope > 0.0 && self.left_tail_slope < 0.0 && self.right_tail_slope < 0.0
    }
}

impl BinnedCurve {
    pub fn slopes(&self) -> Vec<f64> {
        first_differences(&self.loess_y)
    }

    /// Smallest slope across the central `central` bins and the slopes between
    /// the two outermost bins on each side.
    pub fn s_shape(&self, central: usize) -> SShape {
        let d = self.slopes();
        let k = d.len();
        let start = (self.n_bins.saturating_sub(central)) / 2;
        let end = (start + central).min(k);
        SShape {
            central_min_slope: d[start..end].iter().copied().fold(f64::INFINITY, f64::min),
            left_tail_slope: d[0],
            right_tail_slope: d[k - 1],
        }
    }

    /// Whether every bin's band contains `value`.
    pub fn band_contains(&self, value: f64) -> bool {
        self.ci_lo.iter().zip(&self.ci_hi).all(|(lo, hi)| *lo <= value && value <= *hi)
    }

    /// Whether every slope band contains zero.
    pub fn slope_band_contains_zero(&self) -> bool {
        self.slope_lo.iter().zip(&self.slope_hi).all(|(lo, hi)| *lo <= 0.0 && 0.0 <= *hi)
    }
}

pub fn binned_curve(x: &[f64], y: &[f64], opts: &CurveOptions) -> Result<BinnedCurve> {
    check_level(opts.level)?;
    let bins = binscatter(x, y, opts.n_bins)?;
    let loess = Loess::from_data(x, opts.n_bins, opts.degree)?;
    let fit = loess.fit(x, y, &bins.bin_center)?;
    let (mut ci_lo, mut ci_hi, mut slope_lo, mut slope_hi, dropped) = if opts.n_boot > 0 {
        let draws = bootstrap_replicates(
            x,
            y,
            &bins.bin_center,
            &fit.bandwidths,
            opts.degree,
            opts.n_boot,
            opts.seed,
        )?;
        let (lo, hi) = draws.band(opts.level);
        let (slo, shi) = draws.slope_band(opts.level);
        (lo, hi, slo, shi, draws.dropped)
    } else {
        let d = first_differences(&fit.values);
        (fit.values.clone(), fit.values.clone(), d.clone(), d, 0)
    };
    // percentile bands need not cover the full-sample estimate; widen so they do
    for (k, v) in fit.values.iter().enumerate() {
        ci_lo[k] = ci_lo[k].min(*v);
        ci_hi[k] = ci_hi[k].max(*v);
    }
    for (k, v) in first_differences(&fit.values).iter().enumerate() {
        slope_lo[k] = slope_lo[k].min(*v);
        slope_hi[k] = slope_hi[k].max(*v);
    }
    Ok(BinnedCurve {
        n_bins: bins.n_bins(),
        bin_x: bins.bin_x,
        bin_y: bins.bin_y,
        bin_center: bins.bin_center,
        loess_y: fit.values,
        ci_lo,
        ci_hi,
        slope_lo,
        slope_hi,
        bandwidth: loess.bandwidth,
        n_obs: x.len(),
        dropped_replicates: dropped,
    })
}

/// Per-firm location and scale used for MAD normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct MadRow {
    pub firm: String,
    pub mean_g: f64,
    pub mad: f64,
    pub t_count: usize,
}

/// Normalized series plus the per-firm table; firms failing the
/// preconditions are listed in `excluded` with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct MadNormalized {
    pub series: Vec<(String, Vec<f64>)>,
    pub table: Vec<MadRow>,
    pub excluded: Vec<(String, String)>,
}

pub const MIN_MAD_OBS: usize = 5;

/// Mean and mean absolute deviation around it.
pub fn mean_abs_deviation(g: &[f64]) -> (f64, f64) {
    let n = g.len() as f64;
    let mean = g.iter().sum::<f64>() / n;
    (mean, g.iter().map(|v| (v - mean).abs()).sum::<f64>() / n)
}

fn mad_row(firm: &str, g: &[f64]) -> std::result::Result<MadRow, String> {
    if g.len() < MIN_MAD_OBS {
        return Err(format!("{} observations, need {MIN_MAD_OBS}", g.len()));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err("non-finite observation".into());
    }
    let (mean_g, mad) = mean_abs_deviation(g);
    if !(mad > 0.0) {
        return Err("zero mean absolute deviation".into());
    }
    Ok(MadRow {
        firm: firm.to_string(),
        mean_g,
        mad,
        t_count: g.len(),
    })
}

/// Maps each firm's series to `(g - mean) / MAD` when `demean` is set, else `g / MAD`.
pub fn mad_normalize(series: &[(String, Vec<f64>)], demean: bool) -> MadNormalized {
    let mut out = MadNormalized {
        series: Vec::with_capacity(series.len()),
        table: Vec::with_capacity(series.len()),
        excluded: Vec::new(),
    };
    for (firm, g) in series {
        match mad_row(firm, g) {
            Ok(row) => {
                let shift = if demean { row.mean_g } else { 0.0 };
                out.series
                    .push((firm.clone(), g.iter().map(|v| (v - shift) / row.mad).collect()));
                out.table.push(row);
            }
            Err(reason) => {
                warn!("firm {firm} excluded from MAD normalization: {reason}");
                out.excluded.push((firm.clone(), reason));
            }
        }
    }
    out
}

/// Divides every forecast quantity by the firm's MAD of realized growth
/// (`g[t+1] = f1 + error`), without demeaning.
pub fn mad_normalize_forecasts(panel: &ForecastPanel) -> Result<(ForecastPanel, MadNormalized)> {
    let mut records = Vec::with_capacity(panel.len());
    let mut report = MadNormalized {
        series: Vec::new(),
        table: Vec::new(),
        excluded: Vec::new(),
    };
    for (firm, recs) in panel.by_firm() {
        let realized: Vec<f64> = recs.iter().map(|r| r.f1 + r.error).collect();
        match mad_row(firm, &realized) {
            Ok(row) => {
                let s = row.mad;
                records.extend(recs.iter().map(|r| ForecastRecord {
                    firm: r.firm.clone(),
                    t: r.t,
                    f1: r.f1 / s,
                    f2_prior: r.f2_prior / s,
                    error: r.error / s,
                    revision: r.revision / s,
                }));
                report.table.push(row);
            }
            Err(reason) => {
                warn!("firm {firm} excluded from MAD normalization: {reason}");
                report.excluded.push((firm.to_string(), reason));
            }
        }
    }
    let panel = ForecastPanel::new(records, panel.source, panel.skipped)?;
    Ok((panel, report))
}

/// Reference family for tail QQ comparisons, each at unit variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference {
    Normal,
    Laplace,
    Student { nu: f64 },
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reference::Normal => write!(f, "normal"),
            Reference::Laplace => write!(f, "laplace"),
            Reference::Student { nu } => write!(f, "student({nu})"),
        }
    }
}

/// Quantiles of standardized `|data|` against the reference, over the tail grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QqPoints {
    pub prob_levels: Vec<f64>,
    pub data_q: Vec<f64>,
    pub ref_q: Vec<f64>,
    pub reference: Reference,
}

impl QqPoints {
    /// `data_q - ref_q` along the grid.
    pub fn gaps(&self) -> Vec<f64> {
        self.data_q.iter().zip(&self.ref_q).map(|(d, r)| d - r).collect()
    }

    pub fn max_abs_gap(&self) -> f64 {
        self.gaps().iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Grid `tail_level + (1 - tail_level) k / 200` for `k = 0..200`.
pub fn qq_grid(tail_level: f64) -> Vec<f64> {
    (0..QQ_GRID)
        .map(|k| tail_level + (1.0 - tail_level) * k as f64 / QQ_GRID as f64)
        .collect()
}

fn sample_sd(data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn qq_tail(data: &[f64], reference: Reference, tail_level: f64) -> Result<QqPoints> {
    if data.len() < 500 {
        return Err(Error::InsufficientData(format!(
            "QQ analysis needs at least 500 observations, got {}",
            data.len()
        )));
    }
    if !(tail_level > 0.0 && tail_level < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "tail level must be in (0, 1), got {tail_level}"
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite observation".into()));
    }
    let tail_n = ((1.0 - tail_level) * data.len() as f64).floor() as usize;
    if tail_n < 50 {
        return Err(Error::InsufficientTailData { have: tail_n, need: 50 });
    }
    let (mean, sd) = sample_sd(data);
    if !(sd > 0.0) {
        return Err(Error::DegenerateFit("data have zero variance".into()));
    }
    let z: Vec<f64> = data.iter().map(|v| (v - mean) / sd).collect();
    let abs_quantile = reference_abs_quantile(reference, &z)?;
    let grid = qq_grid(tail_level);
    let mut abs = Data::new(z.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let data_q = grid.iter().map(|&q| abs.quantile(q)).collect();
    let ref_q = grid.iter().map(|&q| abs_quantile(q)).collect();
    Ok(QqPoints {
        prob_levels: grid,
        data_q,
        ref_q,
        reference,
    })
}

/// Quantile function of `|X|` for the unit-variance reference. For a Student
/// without finite variance the scale is the maximum-likelihood scale on the
/// standardized data, which puts it in the same sample-variance units.
fn reference_abs_quantile(reference: Reference, z: &[f64]) -> Result<Box<dyn Fn(f64) -> f64>> {
    Ok(match reference {
        Reference::Normal => {
            let n = Normal::new(0.0, 1.0).expect("valid normal");
            Box::new(move |q| n.inverse_cdf((1.0 + q) / 2.0))
        }
        Reference::Laplace => {
            let b = std::f64::consts::FRAC_1_SQRT_2;
            Box::new(move |q| -b * (1.0 - q).ln())
        }
        Reference::Student { nu } => {
            if !(nu > 1.0) {
                return Err(Error::InvalidParameter(format!("Student nu must exceed 1, got {nu}")));
            }
            let scale = if nu > 2.0 {
                ((nu - 2.0) / nu).sqrt()
            } else {
                student_scale_mle(z, nu)
            };
            let t = StudentsT::new(0.0, scale, nu)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            Box::new(move |q| t.inverse_cdf((1.0 + q) / 2.0))
        }
    })
}

/// Maximum-likelihood fit of a centered Student-t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentFit {
    pub nu: f64,
    pub scale: f64,
    /// The likelihood peaked at the upper end of the search range.
    pub effectively_gaussian: bool,
}

pub const NU_MIN: f64 = 1.1;
pub const NU_MAX: f64 = 100.0;
const NU_TOL: f64 = 1e-4;

/// Scale maximizing the likelihood for fixed `nu`, by the EM fixed point
/// `s^2 = mean((nu + 1) x^2 / (nu + x^2 / s^2))`.
pub fn student_scale_mle(data: &[f64], nu: f64) -> f64 {
    let mut abs = Data::new(data.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let start = abs.median().max(f64::MIN_POSITIVE);
    scale_fixed_point(data, nu, start * start)
}

fn scale_fixed_point(data: &[f64], nu: f64, start_var: f64) -> f64 {
    let n = data.len() as f64;
    let mut s2 = start_var;
    for _ in 0..1000 {
        let next = data
            .iter()
            .map(|x| {
                let x2 = x * x;
                (nu + 1.0) * x2 / (nu + x2 / s2)
            })
            .sum::<f64>()
            / n;
        let done = ((next - s2) / s2).abs() < 1e-12;
        s2 = next;
        if done {
            break;
        }
    }
    s2.sqrt()
}

fn student_loglik(data: &[f64], nu: f64, scale: f64) -> f64 {
    let n = data.len() as f64;
    let c = ln_gamma((nu + 1.0) / 2.0)
        - ln_gamma(nu / 2.0)
        - 0.5 * (nu * std::f64::consts::PI).ln()
        - scale.ln();
    let k = nu * scale * scale;
    n * c - (nu + 1.0) / 2.0 * data.iter().map(|x| (x * x / k).ln_1p()).sum::<f64>()
}

/// Golden-section search over `nu` on the profile likelihood.
pub fn fit_student_nu(data: &[f64]) -> Result<StudentFit> {
    if data.len() < 500 {
        return Err(Error::InsufficientData(format!(
            "Student fit needs at least 500 observations, got {}",
            data.len()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite observation".into()));
    }
    let mut abs = Data::new(data.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let med = abs.median();
    if !(med > 0.0) {
        return Err(Error::DegenerateFit("median absolute value is zero".into()));
    }
    let start = med * med;
    let profile = |nu: f64| {
        let s = scale_fixed_point(data, nu, start);
        (student_loglik(data, nu, s), s)
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (NU_MIN, NU_MAX);
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = profile(c).0;
    let mut fd = profile(d).0;
    while hi - lo > NU_TOL {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = profile(c).0;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = profile(d).0;
        }
    }
    let nu = (lo + hi) / 2.0;
    let (_, scale) = profile(nu);
    let effectively_gaussian = NU_MAX - nu < 10.0 * NU_TOL;
    if effectively_gaussian {
        debug!("Student fit reached nu = {NU_MAX}; data look Gaussian");
    }
    Ok(StudentFit {
        nu,
        scale,
        effectively_gaussian,
    })
}
