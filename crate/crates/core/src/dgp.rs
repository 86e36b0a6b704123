//! Two-frequency growth process: a persistent Gaussian AR(1) latent state
//! plus a fat-tailed transitory shock.
//!
//! ```text
//! g[t]      = latent[t] + eps[t]
//! latent[t] = g_bar + phi * (latent[t-1] - g_bar) + u[t],   u ~ Normal(0, sigma_u)
//! eps[t]    ~ Student-t(0, sigma_eps, nu)                   (Normal when nu = inf)
//! ```
//!
//! Every path draws from its own ChaCha stream, so a panel depends only on
//! `(params, T, master_seed)` and never on how firms are scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Periods simulated and discarded before the first recorded observation.
pub const BURN_IN: usize = 100;

/// Parameters of the growth process, the forecaster and the pricing kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Persistence of the latent state, |phi| < 1.
    pub phi: f64,
    /// Unconditional mean of log growth per period.
    pub g_bar: f64,
    /// Student-t degrees of freedom of the transitory shock; `f64::INFINITY` means Normal.
    pub nu: f64,
    pub sigma_u: f64,
    pub sigma_eps: f64,
    /// Lag order p of the forecaster's AR(p) model.
    pub ar_order: usize,
    /// Per-period discount rate r.
    pub discount_rate: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            phi: 0.9,
            g_bar: 0.0,
            nu: 1.6,
            sigma_u: 1.0,
            sigma_eps: 1.0,
            ar_order: 2,
            discount_rate: 0.05,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi.abs() < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "phi must satisfy |phi| < 1, got {}",
                self.phi
            )));
        }
        if !self.g_bar.is_finite() {
            return Err(Error::InvalidParameter("g_bar must be finite".into()));
        }
        validate_nu(self.nu)?;
        if !(self.sigma_u > 0.0 && self.sigma_u.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma_u must be positive, got {}",
                self.sigma_u
            )));
        }
        if !(self.sigma_eps > 0.0 && self.sigma_eps.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma_eps must be positive, got {}",
                self.sigma_eps
            )));
        }
        if self.ar_order < 1 {
            return Err(Error::InvalidParameter("ar_order must be at least 1".into()));
        }
        if !(self.discount_rate > 0.0 && self.discount_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "discount_rate must be positive, got {}",
                self.discount_rate
            )));
        }
        Ok(())
    }

    /// Extra condition needed before any present value is computed.
    pub fn validate_pricing(&self) -> Result<()> {
        self.validate()?;
        if self.g_bar.exp() >= 1.0 + self.discount_rate {
            return Err(Error::InvalidParameter(format!(
                "exp(g_bar) = {} must be below 1 + r = {}",
                self.g_bar.exp(),
                1.0 + self.discount_rate
            )));
        }
        Ok(())
    }

    /// Stationary variance of the latent state.
    pub fn latent_variance(&self) -> f64 {
        self.sigma_u * self.sigma_u / (1.0 - self.phi * self.phi)
    }

    pub fn is_gaussian(&self) -> bool {
        self.nu.is_infinite()
    }
}

fn validate_nu(nu: f64) -> Result<()> {
    if nu.is_nan() || nu <= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "nu must exceed 1 (the mean is undefined otherwise), got {nu}"
        )));
    }
    Ok(())
}

/// Student-t(0, scale, nu) sampler built from the Normal / Chi-square ratio.
#[derive(Debug, Clone)]
pub struct StudentT {
    nu: f64,
    scale: f64,
    chi: Option<ChiSquared<f64>>,
}

impl StudentT {
    pub fn new(nu: f64, scale: f64) -> Result<Self> {
        validate_nu(nu)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "scale must be positive, got {scale}"
            )));
        }
        let chi = if nu.is_infinite() {
            None
        } else {
            Some(ChiSquared::new(nu).map_err(|e| Error::InvalidParameter(e.to_string()))?)
        };
        Ok(Self { nu, scale, chi })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl Distribution<f64> for StudentT {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        match &self.chi {
            None => self.scale * z,
            Some(chi) => {
                let v = chi.sample(rng);
                self.scale * z / (v / self.nu).sqrt()
            }
        }
    }
}

/// One draw from Student-t(0, scale, nu); a Normal(0, scale) draw when `nu` is infinite.
pub fn sample_student_t<R: Rng + ?Sized>(nu: f64, scale: f64, rng: &mut R) -> Result<f64> {
    Ok(StudentT::new(nu, scale)?.sample(rng))
}

/// Simulated growth path with its latent and transitory components.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthPath {
    pub g: Vec<f64>,
    pub latent: Vec<f64>,
    pub eps: Vec<f64>,
    pub seed: u64,
}

impl GrowthPath {
    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    /// Path with no latent or transitory decomposition (ingested or hand-built data).
    pub fn from_observed(g: Vec<f64>) -> Self {
        let n = g.len();
        Self {
            latent: g.clone(),
            eps: vec![0.0; n],
            g,
            seed: 0,
        }
    }
}

/// Simulates `t_len` recorded periods after a [`BURN_IN`] warm-up. The latent
/// state starts from its stationary distribution.
pub fn simulate_path(params: &ModelParams, t_len: usize, seed: u64) -> Result<GrowthPath> {
    params.validate()?;
    if t_len < 1 {
        return Err(Error::InvalidArgument("T must be at least 1".into()));
    }
    let shock = StudentT::new(params.nu, params.sigma_eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let total = BURN_IN + t_len;
    let mut g = Vec::with_capacity(t_len);
    let mut latent = Vec::with_capacity(t_len);
    let mut eps = Vec::with_capacity(t_len);

    let z: f64 = rng.sample(StandardNormal);
    let mut state = params.g_bar + params.latent_variance().sqrt() * z;
    for k in 0..total {
        if k > 0 {
            let u: f64 = rng.sample(StandardNormal);
            state = params.g_bar + params.phi * (state - params.g_bar) + params.sigma_u * u;
        }
        let e = shock.sample(&mut rng);
        if k >= BURN_IN {
            latent.push(state);
            eps.push(e);
            g.push(state + e);
        }
    }
    Ok(GrowthPath {
        g,
        latent,
        eps,
        seed,
    })
}

/// SplitMix64 finalizer; spreads consecutive inputs over the whole u64 range.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of firm `index` within a panel seeded by `master_seed`.
pub fn derive_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master_seed) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Identifier of simulated firm `index`.
pub fn firm_id(index: usize) -> String {
    format!("f{index:06}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Firm {
    pub id: String,
    pub path: GrowthPath,
}

/// Cross-section of independent firms sharing one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthPanel {
    pub params: ModelParams,
    pub firms: Vec<Firm>,
}

impl GrowthPanel {
    pub fn n_obs(&self) -> usize {
        self.firms.iter().map(|f| f.path.len()).sum()
    }

    /// Pooled `(g[t], g[t+1])` pairs over all firms.
    pub fn lagged_pairs(&self) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(self.n_obs());
        let mut y = Vec::with_capacity(self.n_obs());
        for firm in &self.firms {
            for w in firm.path.g.windows(2) {
                x.push(w[0]);
                y.push(w[1]);
            }
        }
        (x, y)
    }
}

pub fn simulate_panel(
    params: &ModelParams,
    n_firms: usize,
    t_len: usize,
    master_seed: u64,
) -> Result<GrowthPanel> {
    if n_firms < 1 {
        return Err(Error::InvalidArgument("n_firms must be at least 1".into()));
    }
    params.validate()?;
    let firms = (0..n_firms)
        .into_par_iter()
        .map(|i| {
            simulate_path(params, t_len, derive_seed(master_seed, i as u64)).map(|path| Firm {
                id: firm_id(i),
                path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GrowthPanel {
        params: params.clone(),
        firms,
    })
}
