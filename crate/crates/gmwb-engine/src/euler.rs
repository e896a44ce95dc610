//! Independent reference simulator based on a full-truncation Euler
//! discretization of the account and variance dynamics.
//!
//! The main engine never discretizes the stochastic differential equations;
//! it steps an exact weak solution. That makes an entirely separate
//! discretization the most convincing cross-check: the two methods share no
//! stepping code and no random streams, so agreement on a common functional
//! localizes errors in either. This module is deliberately plain Euler. It
//! exists to validate, not to compete: at equal work it has strictly worse
//! bias than the explicit scheme (which is the point of the explicit
//! scheme).
//!
//! The variance uses the full-truncation convention: drift and diffusion
//! both read `max(V, 0)`, and the raw (possibly negative) value is carried
//! forward. The fraction of steps where the raw value was negative is
//! reported so that tests can document the defect this module exists to
//! measure.

use crate::contract::ContractSpec;
use crate::error::Error;
use crate::params::{
    derive_constants, derive_p_params, FeeStructure, MarketParams, RiskPremia,
};
use crate::pricing::{Estimate, Measure};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Poisson, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// How negative variance excursions are handled.
///
/// Only full truncation is implemented: among the standard Euler fixes it
/// has the least drift bias for square-root variance processes, which keeps
/// the cross-check tolerances tight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationScheme {
    FullTruncation,
}

/// What the reference simulator integrates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EulerRun {
    /// The full contract: withdrawals deplete the account, absorption is
    /// permanent, and fee cashflows accumulate.
    Contract(ContractSpec),
    /// Fee-dragged account growth without withdrawals, to a fixed horizon.
    /// No absorption can occur, and no cashflows accrue. Useful for moment
    /// checks against closed forms.
    Growth { f0: f64, t: f64 },
}

/// Complete description of one reference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EulerConfig {
    pub market: MarketParams,
    /// Risk premia; required for real-world runs.
    pub premia: Option<RiskPremia>,
    pub fee: FeeStructure,
    pub measure: Measure,
    pub run: EulerRun,
    /// Euler step length in years; typically much smaller than the explicit
    /// engine's grid step, since this scheme carries discretization bias.
    pub h_e: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub truncation: TruncationScheme,
}

impl EulerConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.h_e > 0.0 && self.h_e.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "Euler step h_e = {} must be positive and finite",
                self.h_e
            )));
        }
        if self.n_paths < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 paths, got {}",
                self.n_paths
            )));
        }
        if self.measure == Measure::RealWorld && self.premia.is_none() {
            return Err(Error::InvalidParameter(
                "real-world runs need risk premia".to_string(),
            ));
        }
        match &self.run {
            EulerRun::Contract(contract) => contract.validate(),
            EulerRun::Growth { f0, t } => {
                if !(*f0 > 0.0 && f0.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "growth runs need a positive initial value, got {f0}"
                    )));
                }
                if !(*t > 0.0 && t.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "growth runs need a positive horizon, got {t}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Aggregated result of a reference run.
#[derive(Debug, Clone, PartialEq)]
pub struct EulerOutput {
    /// Per-path discounted loss (payouts minus rider fee income); empty for
    /// growth runs.
    pub losses: Vec<f64>,
    /// Per-path discounted terminal account value.
    pub discounted_terminal: Vec<f64>,
    /// Fraction of steps whose raw variance went negative before
    /// truncation.
    pub neg_variance_fraction: f64,
    /// Steps per path.
    pub steps: usize,
    /// Paths absorbed before the horizon.
    pub absorbed: usize,
}

/// Drift and jump constants resolved for the configured measure.
struct EulerCoeffs {
    /// Constant part of the account drift.
    mu_c: f64,
    /// Coefficient of variance in the account drift (negated in the SDE).
    alpha_eff: f64,
    /// Variance mean-reversion speed.
    rho_rev: f64,
    /// Jump intensity.
    lambda: f64,
    /// Mean of the jump log-size.
    jump_mean_log: f64,
    /// Rider fee intercept net of the base fee.
    rider0: f64,
    /// Rider fee slope on variance.
    alpha_fee: f64,
}

fn resolve_coeffs(config: &EulerConfig) -> Result<EulerCoeffs, Error> {
    let dc = derive_constants(&config.market, &config.fee)?;
    let (mu_c, alpha_eff, rho_rev, lambda, delta) = match config.measure {
        Measure::RiskNeutral => (
            dc.mu,
            dc.alpha,
            config.market.rho_rev,
            config.market.lambda,
            config.market.delta,
        ),
        Measure::RealWorld => {
            let premia = config.premia.as_ref().ok_or_else(|| {
                Error::InvalidParameter("real-world runs need risk premia".to_string())
            })?;
            let rw = derive_p_params(&config.market, premia, &dc)?;
            (rw.mu_bar, rw.alpha, rw.rho_rev, rw.lambda, rw.delta)
        }
    };
    Ok(EulerCoeffs {
        mu_c,
        alpha_eff,
        rho_rev,
        lambda,
        jump_mean_log: (1.0 + delta).ln() - 0.5 * config.market.chi * config.market.chi,
        rider0: dc.alpha0 - config.fee.q,
        alpha_fee: dc.alpha,
    })
}

struct PathResult {
    loss: f64,
    discounted_terminal: f64,
    neg_steps: usize,
    absorbed: bool,
}

/// Runs the reference simulation. Paths are independent, each driven by its
/// own generator seeded from the run seed and the path index, so results do
/// not depend on the thread count.
pub fn euler_simulate(config: &EulerConfig) -> Result<EulerOutput, Error> {
    config.validate()?;
    let coeffs = resolve_coeffs(config)?;

    let (f0, t_final, contract) = match &config.run {
        EulerRun::Contract(contract) => (contract.f0, contract.maturity()?, Some(contract)),
        EulerRun::Growth { f0, t } => (*f0, *t, None),
    };
    let steps = (t_final / config.h_e).ceil() as usize;
    let h = t_final / steps as f64;

    let market = &config.market;
    let poisson = if coeffs.lambda * h > 0.0 {
        Some(Poisson::new(coeffs.lambda * h).map_err(|e| {
            Error::InvalidParameter(format!("jump count distribution: {e}"))
        })?)
    } else {
        None
    };
    let rho = market.rho;
    let rho_perp = (1.0 - rho * rho).sqrt();
    let r = market.r;

    let results: Vec<PathResult> = (0..config.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(splitmix64(
                config.seed ^ splitmix64(path as u64),
            ));
            let mut v = market.v0;
            let mut f = f0;
            let mut absorbed_at: Option<f64> = None;
            let mut neg_steps = 0usize;

            // Trapezoid accumulation of the discounted rider fee income:
            // half-weight the integrand at both step endpoints.
            let mut fee_income = 0.0;
            let mut integrand_prev = rider_integrand(&coeffs, f, v.max(0.0), 1.0);

            for k in 0..steps {
                let t_prev = k as f64 * h;
                let t_new = (k + 1) as f64 * h;

                let vp = v.max(0.0);
                if v < 0.0 {
                    neg_steps += 1;
                }
                let sqrt_vh = (vp * h).sqrt();
                let z_vol: f64 = rng.sample(StandardNormal);
                let z_perp: f64 = rng.sample(StandardNormal);

                if absorbed_at.is_none() {
                    let z_index = rho * z_vol + rho_perp * z_perp;
                    let w_rate = contract.map_or(0.0, |c| c.rate_at(t_prev));
                    let mut f_new = f
                        + f * (coeffs.mu_c - coeffs.alpha_eff * vp) * h
                        + f * sqrt_vh * z_index
                        - w_rate * h;
                    if let Some(p) = &poisson {
                        let count = p.sample(&mut rng) as u64;
                        for _ in 0..count {
                            let y: f64 = coeffs.jump_mean_log
                                + market.chi * rng.sample::<f64, _>(StandardNormal);
                            f_new *= y.exp();
                        }
                    }
                    if contract.is_some() && f_new <= 0.0 {
                        f = 0.0;
                        absorbed_at = Some(t_new);
                    } else {
                        f = f_new;
                    }
                }

                v = v + (market.nu - coeffs.rho_rev * vp) * h + market.kappa * sqrt_vh * z_vol;

                let disc_new = (-r * t_new).exp();
                let integrand_new =
                    rider_integrand(&coeffs, f, v.max(0.0), disc_new);
                fee_income += 0.5 * (integrand_prev + integrand_new) * h;
                integrand_prev = integrand_new;
            }

            let disc_t = (-r * t_final).exp();
            let loss = match contract {
                Some(c) => {
                    let payout = match absorbed_at {
                        Some(tau) => {
                            c.discounted_withdrawals(r, t_final)
                                - c.discounted_withdrawals(r, tau)
                        }
                        None => 0.0,
                    };
                    payout - fee_income
                }
                None => 0.0,
            };
            PathResult {
                loss,
                discounted_terminal: f * disc_t,
                neg_steps,
                absorbed: absorbed_at.is_some(),
            }
        })
        .collect();

    let total_steps = steps * config.n_paths;
    let neg_total: usize = results.iter().map(|p| p.neg_steps).sum();
    Ok(EulerOutput {
        losses: match &config.run {
            EulerRun::Contract(_) => results.iter().map(|p| p.loss).collect(),
            EulerRun::Growth { .. } => Vec::new(),
        },
        discounted_terminal: results.iter().map(|p| p.discounted_terminal).collect(),
        neg_variance_fraction: neg_total as f64 / total_steps as f64,
        steps,
        absorbed: results.iter().filter(|p| p.absorbed).count(),
    })
}

/// Discounted rider fee flow per unit time at the given state.
fn rider_integrand(coeffs: &EulerCoeffs, f: f64, vp: f64, disc: f64) -> f64 {
    (coeffs.rider0 + coeffs.alpha_fee * vp) * f * disc
}

/// Net liability estimate over the run's losses.
pub fn euler_net_liability(output: &EulerOutput, batches: usize) -> Estimate {
    Estimate::from_values(&output.losses, batches)
}

/// Mean discounted terminal value with a batch standard error.
pub fn euler_discounted_terminal(output: &EulerOutput, batches: usize) -> Estimate {
    Estimate::from_values(&output.discounted_terminal, batches)
}

fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
