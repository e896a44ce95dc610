//! Tail risk measures on weighted loss samples, and grid sweeps that map how
//! the net liability or the loss distribution responds to the initial
//! variance and the fee multiplier.
//!
//! A real-world run hands back one `(loss, weight)` pair per particle. The
//! loss is the discounted guarantee payout net of discounted rider fee
//! income; the weight is the particle's likelihood factor. Everything here
//! treats those pairs as a weighted empirical distribution: quantiles and
//! tail means weight each sample by its likelihood, and standard errors come
//! from contiguous run-order batches so resampling correlations are not
//! mistaken for independent information.

use crate::error::Error;
use crate::pricing::{
    fair_base_fee, liability_values, loss_samples, net_liability_estimate, simulate,
    underpriced_base_fee, Estimate, Measure, SimConfig, DEFAULT_FEE_BRACKET,
};
use crate::stats::{batch_se, batch_means, pairwise_sum};
use serde::{Deserialize, Serialize};

/// Relative slack when a cumulative weight is compared against the quantile
/// target. `zeta * total_weight` itself rounds, so an exact `>=` would push
/// lattice data (integer samples, unit weights) one sample too high.
const QUANTILE_BOUNDARY_SLACK: f64 = 1e-12;

/// Weighted empirical distribution of per-particle losses.
///
/// Samples are kept twice: in run order, which the batch standard errors
/// need, and sorted by value, which the quantile queries need. Zero-weight
/// samples carry no information and are dropped on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDistribution {
    /// `(loss, weight)` in the order the run produced them.
    samples: Vec<(f64, f64)>,
    /// The same pairs ordered by loss value.
    sorted: Vec<(f64, f64)>,
    total_weight: f64,
}

impl LossDistribution {
    /// Builds a distribution from `(loss, weight)` pairs, dropping
    /// zero-weight entries. Losses must be finite and weights finite and
    /// nonnegative; an all-zero-weight (or empty) input is an error because
    /// no query on it has an answer.
    pub fn new(pairs: Vec<(f64, f64)>) -> Result<Self, Error> {
        let mut samples = Vec::with_capacity(pairs.len());
        for (i, &(x, l)) in pairs.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "loss sample {i} is not finite: {x}"
                )));
            }
            if !l.is_finite() || l < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "weight {i} must be finite and nonnegative, got {l}"
                )));
            }
            if l > 0.0 {
                samples.push((x, l));
            }
        }
        if samples.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        let mut sorted = samples.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total_weight = pairwise_sum(&sorted.iter().map(|&(_, l)| l).collect::<Vec<_>>());
        Ok(LossDistribution {
            samples,
            sorted,
            total_weight,
        })
    }

    /// Runs the configured real-world simulation and wraps its losses.
    pub fn from_config(config: &SimConfig) -> Result<Self, Error> {
        LossDistribution::new(loss_samples(config)?)
    }

    /// Samples carrying positive weight.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    /// The retained `(loss, weight)` pairs in run order.
    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    /// Value at risk at level `zeta`: the smallest sample value whose
    /// cumulative weight share reaches `zeta` (the left-continuous inverse of
    /// the weighted empirical distribution function).
    pub fn var(&self, zeta: f64) -> Result<f64, Error> {
        check_level(zeta)?;
        Ok(quantile(&self.sorted, self.total_weight, zeta))
    }

    /// Conditional tail expectation at level `zeta`: the weighted mean of
    /// the samples strictly above `var(zeta)`. On a continuous loss law the
    /// strict and non-strict versions agree almost surely; on atoms this one
    /// excludes the quantile itself, and reports an error when nothing lies
    /// above it.
    pub fn cte(&self, zeta: f64) -> Result<f64, Error> {
        check_level(zeta)?;
        tail_mean(&self.sorted, self.total_weight, zeta)
    }

    /// Weighted means of `batches` contiguous run-order blocks.
    pub fn batch_means(&self, batches: usize) -> Result<Vec<f64>, Error> {
        self.check_batches(batches)?;
        Ok((0..batches)
            .map(|b| {
                let chunk = self.batch_slice(batches, b);
                weighted_mean(chunk)
            })
            .collect())
    }

    /// Point estimates of the mean, variance, and 90% conditional tail
    /// expectation over the full sample, each with a standard error from the
    /// dispersion of the same statistic across `batches` contiguous
    /// run-order blocks.
    pub fn summary(&self, batches: usize) -> Result<RiskSummary, Error> {
        self.check_batches(batches)?;
        let mean = weighted_mean(&self.samples);
        let variance = weighted_variance(&self.samples, mean);
        let cte90 = self.cte(0.9)?;

        let mut bmeans = Vec::with_capacity(batches);
        let mut bvars = Vec::with_capacity(batches);
        let mut bctes = Vec::with_capacity(batches);
        for b in 0..batches {
            let chunk = self.batch_slice(batches, b);
            let bm = weighted_mean(chunk);
            let mut chunk_sorted = chunk.to_vec();
            chunk_sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let bw = pairwise_sum(&chunk_sorted.iter().map(|&(_, l)| l).collect::<Vec<_>>());
            bmeans.push(bm);
            bvars.push(weighted_variance(chunk, bm));
            bctes.push(tail_mean(&chunk_sorted, bw, 0.9)?);
        }

        Ok(RiskSummary {
            mean,
            mean_se: batch_se(&bmeans),
            variance,
            variance_se: batch_se(&bvars),
            cte90,
            cte90_se: batch_se(&bctes),
            n_samples: self.samples.len(),
            total_weight: self.total_weight,
        })
    }

    fn check_batches(&self, batches: usize) -> Result<(), Error> {
        if batches < 2 || batches > self.samples.len() {
            return Err(Error::InvalidParameter(format!(
                "batch count {} must lie in [2, {}]",
                batches,
                self.samples.len()
            )));
        }
        Ok(())
    }

    fn batch_slice(&self, batches: usize, b: usize) -> &[(f64, f64)] {
        let n = self.samples.len();
        &self.samples[b * n / batches..(b + 1) * n / batches]
    }
}

fn check_level(zeta: f64) -> Result<(), Error> {
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "risk level must lie strictly between 0 and 1, got {zeta}"
        )));
    }
    Ok(())
}

fn weighted_mean(pairs: &[(f64, f64)]) -> f64 {
    let products: Vec<f64> = pairs.iter().map(|&(x, l)| x * l).collect();
    let weights: Vec<f64> = pairs.iter().map(|&(_, l)| l).collect();
    pairwise_sum(&products) / pairwise_sum(&weights)
}

fn weighted_variance(pairs: &[(f64, f64)], mean: f64) -> f64 {
    let devs: Vec<f64> = pairs
        .iter()
        .map(|&(x, l)| l * (x - mean) * (x - mean))
        .collect();
    let weights: Vec<f64> = pairs.iter().map(|&(_, l)| l).collect();
    pairwise_sum(&devs) / pairwise_sum(&weights)
}

/// Left-continuous weighted quantile on value-sorted pairs.
fn quantile(sorted: &[(f64, f64)], total: f64, zeta: f64) -> f64 {
    let target = zeta * total - QUANTILE_BOUNDARY_SLACK * total;
    let mut acc = 0.0;
    for &(x, l) in sorted {
        acc += l;
        if acc >= target {
            return x;
        }
    }
    sorted[sorted.len() - 1].0
}

/// Weighted mean of the samples strictly above the `zeta`-quantile.
fn tail_mean(sorted: &[(f64, f64)], total: f64, zeta: f64) -> Result<f64, Error> {
    let cut = quantile(sorted, total, zeta);
    let idx = sorted.partition_point(|&(x, _)| x <= cut);
    if idx == sorted.len() {
        return Err(Error::DegenerateTail { zeta });
    }
    Ok(weighted_mean(&sorted[idx..]))
}

/// Summary statistics of a loss distribution with batch standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub mean: f64,
    pub mean_se: f64,
    /// Weighted population variance.
    pub variance: f64,
    pub variance_se: f64,
    /// Weighted mean of the losses strictly above the 90% quantile.
    pub cte90: f64,
    pub cte90_se: f64,
    /// Samples with positive weight.
    pub n_samples: usize,
    pub total_weight: f64,
}

/// How the sweep picks the base rider fee for each multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeeMode {
    /// Solve the fee per multiplier so the net liability vanishes at the
    /// base configuration's initial variance, then hold it fixed across the
    /// variance grid.
    Fair { tol: f64 },
    /// Solve so the net liability equals one currency unit at the base
    /// initial variance: a contract deliberately priced one unit too cheap.
    Underpriced { tol: f64 },
    /// Base fees supplied by the caller, positionally matched to the
    /// multiplier grid. Lets presolved fees be reused instead of paying for
    /// a fresh root search per sweep.
    Given(Vec<f64>),
}

/// Which quantity the sweep tabulates per grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Pricing-measure net liability.
    Liability,
    /// Real-world loss summary statistics.
    LossSummary,
}

/// One grid cell of a sensitivity sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub v0: f64,
    pub m: f64,
    /// Base rider fee used for this cell (solved or given, constant across
    /// the variance grid for a given multiplier).
    pub c_bar: f64,
    /// Net liability estimate; present for liability sweeps.
    pub liability: Option<Estimate>,
    /// Contiguous-batch means of the cell's per-particle values. All cells
    /// share the base seed, so rows can be differenced batch-by-batch for
    /// paired standard errors on contrasts such as slopes across `v0`.
    pub batch_values: Vec<f64>,
    /// Loss summary; present for loss sweeps.
    pub loss: Option<RiskSummary>,
}

/// Tabulates the net liability (pricing measure) or loss summaries
/// (real-world measure) over the grid `m_grid` x `v0_grid`.
///
/// Fees are resolved once per multiplier at the base configuration's own
/// initial variance and then held fixed while the variance varies, so each
/// row isolates the sensitivity of the already-priced contract. Fee solving
/// always happens under the pricing measure (fairness is a pricing-measure
/// notion) over the default bracket, whatever the sweep kind; every cell
/// reuses the base seed so that neighboring cells share their random draws.
///
/// Rows come back multiplier-major: all variance cells for the first
/// multiplier, then the next.
pub fn sensitivity_sweep(
    base: &SimConfig,
    v0_grid: &[f64],
    m_grid: &[f64],
    fee_mode: &FeeMode,
    kind: SweepKind,
) -> Result<Vec<SweepRow>, Error> {
    base.validate()?;
    if v0_grid.is_empty() || m_grid.is_empty() {
        return Err(Error::InvalidParameter(
            "sensitivity sweep needs nonempty variance and multiplier grids".to_string(),
        ));
    }
    for &v0 in v0_grid {
        if !(v0 > 0.0 && v0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "grid initial variance must be positive and finite, got {v0}"
            )));
        }
    }
    match kind {
        SweepKind::Liability => {
            if base.measure != Measure::RiskNeutral {
                return Err(Error::InvalidParameter(
                    "liability sweeps are a pricing-measure quantity; switch the base \
                     configuration to the risk-neutral measure"
                        .to_string(),
                ));
            }
        }
        SweepKind::LossSummary => {
            if base.measure != Measure::RealWorld {
                return Err(Error::InvalidParameter(
                    "loss sweeps need a real-world base configuration with risk premia"
                        .to_string(),
                ));
            }
        }
    }
    if let FeeMode::Given(fees) = fee_mode {
        if fees.len() != m_grid.len() {
            return Err(Error::InvalidParameter(format!(
                "{} given fees for {} multipliers; the lists pair positionally",
                fees.len(),
                m_grid.len()
            )));
        }
    }

    let (lo, hi) = DEFAULT_FEE_BRACKET;
    let mut rows = Vec::with_capacity(m_grid.len() * v0_grid.len());
    for (i, &m) in m_grid.iter().enumerate() {
        let c_bar = match fee_mode {
            FeeMode::Given(fees) => fees[i],
            FeeMode::Fair { tol } | FeeMode::Underpriced { tol } => {
                let mut price_cfg = base.clone();
                price_cfg.measure = Measure::RiskNeutral;
                price_cfg.fee.m = m;
                let sol = match fee_mode {
                    FeeMode::Fair { .. } => fair_base_fee(&price_cfg, lo, hi, *tol)?,
                    _ => underpriced_base_fee(&price_cfg, lo, hi, *tol)?,
                };
                sol.c_bar
            }
        };

        for &v0 in v0_grid {
            let mut cell = base.clone();
            cell.fee.m = m;
            cell.fee.c_bar = c_bar;
            cell.market.v0 = v0;
            let row = match kind {
                SweepKind::Liability => {
                    let output = simulate(&cell)?;
                    let est = net_liability_estimate(&output, cell.batches);
                    let values = liability_values(&output);
                    let batch_values = batch_means(&values, est.batches);
                    SweepRow {
                        v0,
                        m,
                        c_bar,
                        liability: Some(est),
                        batch_values,
                        loss: None,
                    }
                }
                SweepKind::LossSummary => {
                    let dist = LossDistribution::from_config(&cell)?;
                    let batches = cell.batches.min(dist.len());
                    let summary = dist.summary(batches)?;
                    let batch_values = dist.batch_means(batches)?;
                    SweepRow {
                        v0,
                        m,
                        c_bar,
                        liability: None,
                        batch_values,
                        loss: Some(summary),
                    }
                }
            };
            rows.push(row);
        }
    }
    Ok(rows)
}
