//! Static model inputs and the closed-form constants derived from them.
//!
//! Everything here is computed once per run and shared immutably across
//! threads. The simulation kernel never touches raw market inputs; it only
//! sees the derived drift/diffusion constants.

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Averaging window of the volatility index, in years (30 calendar days).
pub const TAU_BAR: f64 = 30.0 / 365.0;

/// Relative tolerance for floating-point equality of derived constants.
pub const REL_TOL: f64 = 1e-12;

/// Market coefficients under the pricing (risk-neutral) measure.
///
/// Variance follows a mean-reverting square-root process with inflow `nu`,
/// reversion speed `rho_rev` and vol-of-vol `kappa`; the index carries
/// compound-Poisson lognormal jumps with intensity `lambda`, mean relative
/// size `delta` and log-size standard deviation `chi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketParams {
    /// Variance drift level (variance units per year).
    pub nu: f64,
    /// Variance mean-reversion speed (1/year).
    pub rho_rev: f64,
    /// Volatility of variance.
    pub kappa: f64,
    /// Initial instantaneous variance.
    pub v0: f64,
    /// Correlation between the index and variance Brownian drivers.
    pub rho: f64,
    /// Jump arrival intensity (jumps per year).
    pub lambda: f64,
    /// Mean relative jump size (dimensionless, > -1).
    pub delta: f64,
    /// Standard deviation of the log jump size.
    pub chi: f64,
    /// Continuously compounded risk-free rate (per year).
    pub r: f64,
}

impl MarketParams {
    /// Calibrated benchmark market used throughout the examples and the
    /// validation suite. `nu` sits exactly on a lattice point `n kappa^2 / 4`
    /// (n = 2), so simulated paths carry unit likelihood weights.
    pub fn benchmark() -> Self {
        MarketParams {
            nu: 0.18,
            rho_rev: 2.86,
            kappa: 0.6,
            v0: 0.04,
            rho: -0.96,
            lambda: 0.21,
            delta: -0.1252,
            chi: 0.18,
            r: 0.02,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter(msg.to_string()))
            }
        };
        check(self.nu > 0.0, "nu must be > 0")?;
        check(self.rho_rev > 0.0, "rho_rev must be > 0")?;
        check(self.kappa > 0.0, "kappa must be > 0")?;
        check(self.v0 > 0.0, "v0 must be > 0")?;
        check((-1.0..=1.0).contains(&self.rho), "rho must lie in [-1, 1]")?;
        check(self.lambda >= 0.0, "lambda must be >= 0")?;
        check(self.delta > -1.0, "delta must be > -1")?;
        check(self.chi >= 0.0, "chi must be >= 0")?;
        check(self.r >= 0.0, "r must be >= 0")?;
        check(
            self.nu.is_finite()
                && self.rho_rev.is_finite()
                && self.kappa.is_finite()
                && self.v0.is_finite(),
            "market parameters must be finite",
        )
    }
}

/// Risk premia linking the pricing measure to the real-world measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskPremia {
    /// Equity risk premium.
    pub eta_s: f64,
    /// Volatility risk premium (negative values speed up real-world mean
    /// reversion).
    pub eta_v: f64,
    /// Jump risk premium, expressed as a shift of the jump compensator.
    pub eta_j: f64,
}

impl RiskPremia {
    pub fn zero() -> Self {
        RiskPremia {
            eta_s: 0.0,
            eta_v: 0.0,
            eta_j: 0.0,
        }
    }
}

/// Market coefficients under the real-world measure, derived from
/// [`MarketParams`] and [`RiskPremia`]. Only the quantities that actually
/// change with the measure are stored; `nu`, `kappa`, `rho`, `chi` and `r`
/// carry over unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealWorldParams {
    /// Real-world variance mean-reversion speed.
    pub rho_rev: f64,
    /// Real-world jump intensity.
    pub lambda: f64,
    /// Real-world mean relative jump size (kept equal to the pricing-measure
    /// value; the premium is absorbed by the intensity).
    pub delta: f64,
    /// Real-world account drift level entering the kernel drift constant.
    pub mu_bar: f64,
    /// Real-world affine drift coefficient on variance.
    pub alpha: f64,
}

/// Fee inputs: a flat investment-management fee plus a rider fee whose rate
/// is affine in the squared volatility index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeeStructure {
    /// Investment management fee rate (per year).
    pub q: f64,
    /// Base rider fee rate (per year).
    pub c_bar: f64,
    /// Multiplier applied to the squared volatility index.
    pub m: f64,
}

impl FeeStructure {
    pub fn validate(&self) -> Result<(), Error> {
        if self.q < 0.0 || self.c_bar < 0.0 || self.m < 0.0 {
            return Err(Error::InvalidParameter(
                "fee rates q, c_bar and multiplier m must be >= 0".to_string(),
            ));
        }
        Ok(())
    }
}

/// Every closed-form constant consumed by the kernel and pricing layers.
///
/// `vix_a`/`vix_b` give the squared volatility index as `vix_a + vix_b * V`;
/// `alpha0`/`alpha` give the total fee rate as `alpha0 + alpha * V`; the
/// lowercase `a..f` are the drift/diffusion constants of the explicit
/// one-step kernel recursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    /// Jump compensator entering both the index drift and the volatility
    /// index level.
    pub phi: f64,
    /// Volatility-index averaging window (years).
    pub tau_bar: f64,
    /// Intercept of the squared volatility index.
    pub vix_a: f64,
    /// Slope of the squared volatility index on instantaneous variance.
    pub vix_b: f64,
    /// Intercept of the total fee rate.
    pub alpha0: f64,
    /// Slope of the total fee rate on instantaneous variance.
    pub alpha: f64,
    /// Account drift level under the pricing measure.
    pub mu: f64,
    /// Number of squared Ornstein-Uhlenbeck components in the explicit
    /// variance representation.
    pub n: usize,
    /// Variance drift level of the nearest exactly-representable model.
    pub nu_kappa: f64,
    /// Account drift level of the nearest exactly-representable model.
    pub mu_kappa: f64,
    /// Diffusion weight of the extra Gaussian in the kernel update.
    pub a: f64,
    /// Constant drift term of the log-kernel update.
    pub b: f64,
    /// Coefficient on integrated variance in the log-kernel update.
    pub c: f64,
    /// Coefficient on the variance increment in the log-kernel update.
    pub d: f64,
    /// Likelihood coefficient on the log-variance ratio; exactly 0 when the
    /// drift level sits on the lattice.
    pub e: f64,
    /// Likelihood coefficient on integrated reciprocal variance.
    pub f: f64,
}

/// Exact one-step transition coefficients of an Ornstein-Uhlenbeck component
/// over a step of length `h`: next = psi * current + sigma * Z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConstants {
    pub psi: f64,
    pub sigma: f64,
    pub h: f64,
}

/// Jump compensator `phi = lambda * (delta - ln(1 + delta) + chi^2 / 2)`.
///
/// The bracket is nonnegative for every `delta > -1`, so `phi >= 0`.
pub fn jump_compensator(lambda: f64, delta: f64, chi: f64) -> Result<f64, Error> {
    if delta <= -1.0 {
        return Err(Error::InvalidParameter(format!(
            "mean jump size delta = {delta} must be > -1"
        )));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "jump intensity lambda = {lambda} must be >= 0"
        )));
    }
    Ok(lambda * (delta - (1.0 + delta).ln() + chi * chi / 2.0))
}

/// True when the variance drift level sits on the lattice `n kappa^2 / 4`
/// (within relative tolerance), in which case the explicit recursion needs
/// no likelihood reweighting at all.
pub fn condition_c(market: &MarketParams) -> bool {
    let n = component_count(market.nu, market.kappa);
    let nu_kappa = n as f64 * market.kappa * market.kappa / 4.0;
    (market.nu - nu_kappa).abs() <= REL_TOL * market.nu.abs().max(nu_kappa.abs())
}

/// Number of squared Ornstein-Uhlenbeck components:
/// `n = max(floor(4 nu / kappa^2 + 1/2), 1)`.
pub fn component_count(nu: f64, kappa: f64) -> usize {
    let raw = (4.0 * nu / (kappa * kappa) + 0.5).floor();
    if raw < 1.0 {
        1
    } else {
        raw as usize
    }
}

/// Compute every derived constant from the market and fee inputs.
pub fn derive_constants(
    market: &MarketParams,
    fee: &FeeStructure,
) -> Result<DerivedConstants, Error> {
    market.validate()?;
    fee.validate()?;

    let phi = jump_compensator(market.lambda, market.delta, market.chi)?;
    let rt = market.rho_rev * TAU_BAR;
    let vix_b = (1.0 - (-rt).exp()) / rt;
    let vix_a = market.nu * (rt - 1.0 + (-rt).exp()) / (market.rho_rev * rt) + 2.0 * phi;

    let alpha = fee.m * vix_b;
    let alpha0 = fee.q + fee.c_bar + fee.m * vix_a;
    let mu = market.r - market.delta * market.lambda - alpha0;

    let n = component_count(market.nu, market.kappa);
    let kappa_sq = market.kappa * market.kappa;
    let nu_kappa = n as f64 * kappa_sq / 4.0;

    // On the lattice the reweighting terms vanish identically; snap them to
    // exact zeros so likelihood weights stay bitwise equal to 1.
    let on_lattice =
        (market.nu - nu_kappa).abs() <= REL_TOL * market.nu.abs().max(nu_kappa.abs());
    let (e, f, mu_kappa) = if on_lattice {
        (0.0, 0.0, mu)
    } else {
        let e = (market.nu - nu_kappa) / kappa_sq;
        let f = e * (kappa_sq - market.nu - nu_kappa) / 2.0;
        let mu_kappa = mu + market.rho / market.kappa * (nu_kappa - market.nu);
        (e, f, mu_kappa)
    };

    Ok(DerivedConstants {
        phi,
        tau_bar: TAU_BAR,
        vix_a,
        vix_b,
        alpha0,
        alpha,
        mu,
        n,
        nu_kappa,
        mu_kappa,
        a: (1.0 - market.rho * market.rho).sqrt(),
        b: mu - market.nu * market.rho / market.kappa,
        c: market.rho * market.rho_rev / market.kappa - 0.5 - alpha,
        d: market.rho / market.kappa,
        e,
        f,
    })
}

/// Map pricing-measure coefficients to their real-world counterparts.
///
/// The volatility premium shifts the reversion speed, the jump premium
/// shifts the compensator (and through it the intensity, holding the jump
/// size distribution fixed), and the equity premium shifts the affine drift.
pub fn derive_p_params(
    market: &MarketParams,
    premia: &RiskPremia,
    derived: &DerivedConstants,
) -> Result<RealWorldParams, Error> {
    let rho_rev = market.rho_rev - premia.eta_v;
    if rho_rev <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "real-world mean reversion rho_rev - eta_v = {rho_rev} must be > 0"
        )));
    }
    let phi_star = derived.phi - premia.eta_j;
    if phi_star < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "shifted jump compensator phi - eta_j = {phi_star} must be >= 0"
        )));
    }
    let delta = market.delta;
    let bracket = delta - (1.0 + delta).ln() + market.chi * market.chi / 2.0;
    // A zero bracket means jumps are degenerate (delta = 0, chi = 0); the
    // intensity is then irrelevant as every jump factor is 1.
    let lambda = if bracket > 0.0 {
        phi_star / bracket
    } else {
        market.lambda
    };
    if lambda < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "real-world jump intensity {lambda} must be >= 0"
        )));
    }
    Ok(RealWorldParams {
        rho_rev,
        lambda,
        delta,
        mu_bar: market.r - delta * lambda - derived.alpha0,
        alpha: derived.alpha - premia.eta_s,
    })
}

/// Squared volatility index as a function of instantaneous variance.
pub fn vix_squared(derived: &DerivedConstants, v: f64) -> f64 {
    derived.vix_a + derived.vix_b * v
}

/// Total fee rate `gamma` and rider fee rate `gamma - q` at variance `v`.
pub fn fee_rates(derived: &DerivedConstants, fee: &FeeStructure, v: f64) -> (f64, f64) {
    let gamma = derived.alpha0 + derived.alpha * v;
    (gamma, gamma - fee.q)
}

/// Exact one-step Ornstein-Uhlenbeck transition coefficients for reversion
/// speed `rho_rev`, vol-of-vol `kappa` and step size `h`.
pub fn step_constants(rho_rev: f64, kappa: f64, h: f64) -> StepConstants {
    let psi = (-rho_rev * h / 2.0).exp();
    let sigma = kappa * ((1.0 - (-rho_rev * h).exp()) / (4.0 * rho_rev)).sqrt();
    StepConstants { psi, sigma, h }
}
