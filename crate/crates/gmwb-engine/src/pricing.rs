//! Simulation orchestration and the liability estimators built on it.
//!
//! A run is described by a [`SimConfig`]: market and fee inputs, a contract,
//! the measure to simulate under, and the numerical controls (step length,
//! particle count, seed, branching knobs, memory mode). [`simulate`] builds
//! the time grid once, picks an execution strategy, and returns one record
//! per final particle. Everything downstream (net liability, fair-fee
//! search, loss samples) is a deterministic reduction of that output.
//!
//! Two execution strategies cover all configurations. When particles never
//! interact (branching disabled, or the drift lies on the lattice where
//! every weight stays at one) each path runs start to finish independently
//! and the paths are distributed across threads. When branching is active
//! the population advances one step at a time, with a resampling barrier
//! after every step. Both strategies key every random draw by (seed,
//! particle id, purpose, step), so results are bitwise identical no matter
//! how many threads run, and the branch-free strategy produces exactly what
//! the stepped strategy would if every resampling round left the population
//! untouched.
//!
//! The two memory modes are bitwise equivalent by construction. Single-pass
//! carries the contract state along with the market state. Ancestry replay
//! stores the per-step market values (variance and growth factor) and the
//! resampling maps during the market sweep, then reruns the contract
//! arithmetic over the stored values in a second sweep, applying the same
//! maps to the contract state. The second sweep calls the same transition
//! function on the same numbers in the same order, so no tolerance is
//! needed when comparing the modes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::branching::branch_step;
use crate::contract::ContractSpec;
use crate::error::Error;
use crate::kernel::{
    contract_step, full_step, init_particle, market_step, KernelCoeffs, Particle, StepContext,
    StepSnapshot,
};
use crate::params::{FeeStructure, MarketParams, RiskPremia};
use crate::rng::{NormalPool, NormalSource, StreamKey, StreamPurpose};
use crate::stats;

/// Probability measure a run simulates under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// Pricing measure: drifts at the risk-free rate, used for valuation.
    RiskNeutral,
    /// Real-world measure implied by the configured risk premia, used for
    /// loss distributions.
    RealWorld,
}

/// How the run trades memory against recomputation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    /// Carry contract state with the market state in one sweep.
    SinglePass,
    /// Store per-step market values and resampling maps during the market
    /// sweep, then integrate the contract in a second sweep over the stored
    /// values. Bitwise identical to single-pass; useful when the contract
    /// arithmetic should be rerun (or varied) without resimulating.
    AncestryReplay,
}

/// Complete description of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub market: MarketParams,
    /// Risk premia; required when `measure` is the real-world one.
    pub premia: Option<RiskPremia>,
    pub fee: FeeStructure,
    pub contract: ContractSpec,
    pub measure: Measure,
    /// Grid step length in years.
    pub h: f64,
    pub n_particles: usize,
    pub seed: u64,
    /// Variance level at which a particle's weight is frozen for good.
    pub epsilon: f64,
    /// Resampling band aggressiveness (scale).
    pub q1: f64,
    /// Resampling band aggressiveness (power on the weight spread).
    pub q2: f64,
    pub branching: bool,
    /// Substeps per grid step for the pathwise integrals.
    pub sub_steps: usize,
    pub memory_mode: MemoryMode,
    /// Contiguous batches used for standard errors.
    pub batches: usize,
    /// Pregenerate each particle's Gaussians instead of streaming them.
    /// Bitwise identical to streaming; only available when particles are
    /// independent (no active branching).
    pub pooled_normals: bool,
}

impl SimConfig {
    /// Pricing-measure run with default numerical controls.
    pub fn risk_neutral(
        market: MarketParams,
        fee: FeeStructure,
        contract: ContractSpec,
        h: f64,
        n_particles: usize,
        seed: u64,
    ) -> SimConfig {
        SimConfig {
            market,
            premia: None,
            fee,
            contract,
            measure: Measure::RiskNeutral,
            h,
            n_particles,
            seed,
            epsilon: 1e-4,
            q1: 1.0,
            q2: 1.0,
            branching: true,
            sub_steps: 1,
            memory_mode: MemoryMode::SinglePass,
            batches: 50,
            pooled_normals: false,
        }
    }

    /// Real-world run with default numerical controls.
    pub fn real_world(
        market: MarketParams,
        premia: RiskPremia,
        fee: FeeStructure,
        contract: ContractSpec,
        h: f64,
        n_particles: usize,
        seed: u64,
    ) -> SimConfig {
        let mut cfg = SimConfig::risk_neutral(market, fee, contract, h, n_particles, seed);
        cfg.premia = Some(premia);
        cfg.measure = Measure::RealWorld;
        cfg
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.contract.validate()?;
        if self.n_particles < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 particles, got {}",
                self.n_particles
            )));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "step length h = {} must be positive and finite",
                self.h
            )));
        }
        if self.batches < 2 || self.batches > self.n_particles {
            return Err(Error::InvalidParameter(format!(
                "batch count {} must lie in [2, n_particles]",
                self.batches
            )));
        }
        if !(self.q1 >= 0.0 && self.q1.is_finite() && self.q2 >= 0.0 && self.q2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "resampling knobs q1 = {}, q2 = {} must be finite and nonnegative",
                self.q1, self.q2
            )));
        }
        if self.measure == Measure::RealWorld && self.premia.is_none() {
            return Err(Error::InvalidParameter(
                "real-world runs need risk premia".to_string(),
            ));
        }
        Ok(())
    }

    /// Kernel coefficients for the configured measure.
    pub fn kernel_coeffs(&self) -> Result<KernelCoeffs, Error> {
        let f0 = self.contract.f0;
        match self.measure {
            Measure::RiskNeutral => KernelCoeffs::pricing_measure(
                &self.market,
                &self.fee,
                f0,
                self.epsilon,
                self.sub_steps,
            ),
            Measure::RealWorld => {
                let premia = self.premia.as_ref().ok_or_else(|| {
                    Error::InvalidParameter("real-world runs need risk premia".to_string())
                })?;
                KernelCoeffs::real_world(
                    &self.market,
                    premia,
                    &self.fee,
                    f0,
                    self.epsilon,
                    self.sub_steps,
                )
            }
        }
    }
}

/// Everything the estimators need from one final particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleOutcome {
    pub id: u64,
    /// Likelihood weight at the horizon (frozen early if the variance
    /// touched the floor).
    pub l: f64,
    /// Discounted rider fee income collected while the account was alive.
    pub c: f64,
    /// Discounted guarantee payments made after the account was exhausted.
    pub w: f64,
    /// Discounted base (non-rider) fee income.
    pub q_fee: f64,
    /// Account value at the horizon (zero if absorbed).
    pub f_terminal: f64,
    /// Fund growth factor at the horizon.
    pub g_terminal: f64,
    /// Instantaneous variance at the horizon.
    pub v_terminal: f64,
    pub absorbed_at: Option<f64>,
    /// Time the weight was frozen, if the variance floor was hit.
    pub eta_at: Option<f64>,
}

/// Result of one simulation run: final particles plus population
/// diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// One record per final particle, in a thread-count-independent order.
    pub outcomes: Vec<ParticleOutcome>,
    /// Grid steps taken (including a fractional last step if needed).
    pub steps: usize,
    /// Grid end time; the contract maturity up to a tiny clamp.
    pub t_final: f64,
    pub initial_particles: usize,
    pub final_particles: usize,
    pub min_population: usize,
    pub max_population: usize,
    /// Resampling rounds that actually moved any particle.
    pub branch_rounds_active: usize,
    /// Total offspring created across all resampling rounds.
    pub total_offspring: usize,
}

/// Point estimate with a batch-means standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    /// Effective sample size: the particle count deflated by weight
    /// dispersion.
    pub n_effective: f64,
    /// Batches actually used for the standard error.
    pub batches: usize,
}

impl Estimate {
    /// Mean of `values` with a batch-means standard error. The effective
    /// sample size defaults to the raw count; weighted estimators overwrite
    /// it.
    pub fn from_values(values: &[f64], batches: usize) -> Estimate {
        if values.is_empty() {
            return Estimate {
                value: f64::NAN,
                std_error: f64::NAN,
                n_effective: 0.0,
                batches: 0,
            };
        }
        let b = batches.min(values.len());
        if b < 2 {
            return Estimate {
                value: stats::pairwise_sum(values) / values.len() as f64,
                std_error: f64::NAN,
                n_effective: values.len() as f64,
                batches: b,
            };
        }
        let (value, std_error) = stats::mean_with_batch_se(values, b);
        Estimate {
            value,
            std_error,
            n_effective: values.len() as f64,
            batches: b,
        }
    }
}

/// Build the step contexts for one run: whole steps of length `h` from time
/// zero, plus a fractional last step when the maturity is not a multiple of
/// `h`. Remainders below `1e-9 h` are treated as grid noise and dropped.
fn build_steps(
    coeffs: &KernelCoeffs,
    contract: &ContractSpec,
    h: f64,
) -> Result<(Vec<StepContext>, f64), Error> {
    let t_total = contract.maturity()?;
    let whole = (t_total / h).floor() as usize;
    if whole == 0 {
        return Err(Error::InvalidParameter(format!(
            "step length h = {h} exceeds the contract maturity {t_total}"
        )));
    }
    let h_last = t_total - whole as f64 * h;
    let fractional = h_last > 1e-9 * h;
    let count = whole + usize::from(fractional);
    if count > u32::MAX as usize {
        return Err(Error::InvalidParameter(format!(
            "grid would need {count} steps; step length h = {h} is too small"
        )));
    }
    let mut steps = Vec::with_capacity(count);
    for k in 1..=whole {
        let t_prev = (k - 1) as f64 * h;
        let w_prev = contract.rate_at(t_prev);
        let w_new = contract.rate_at(t_prev + h);
        steps.push(StepContext::new(coeffs, k as u32, t_prev, h, w_prev, w_new));
    }
    if fractional {
        let t_prev = whole as f64 * h;
        let w_prev = contract.rate_at(t_prev);
        let w_new = contract.rate_at(t_prev + h_last);
        steps.push(StepContext::new(
            coeffs,
            (whole + 1) as u32,
            t_prev,
            h_last,
            w_prev,
            w_new,
        ));
    }
    let t_final = steps.last().map(|s| s.t_new).unwrap_or(0.0);
    Ok((steps, t_final))
}

fn outcome_of(p: &Particle) -> ParticleOutcome {
    ParticleOutcome {
        id: p.id,
        l: p.l,
        c: p.c_acc,
        w: p.w_acc,
        q_fee: p.q_acc,
        f_terminal: p.f,
        g_terminal: p.g,
        v_terminal: p.v,
        absorbed_at: p.absorbed_at,
        eta_at: p.eta_time,
    }
}

/// Run the configured simulation. See the module docs for how the execution
/// strategy is chosen; the output is bitwise independent of thread count.
pub fn simulate(config: &SimConfig) -> Result<SimOutput, Error> {
    config.validate()?;
    let coeffs = config.kernel_coeffs()?;
    let (steps, t_final) = build_steps(&coeffs, &config.contract, config.h)?;
    // On the lattice every weight is exactly one, so every resampling round
    // would keep the whole population; skipping the rounds entirely gives
    // the same result and lets the particles run independently.
    let branching_active = config.branching && !coeffs.condition_c;
    if branching_active {
        if config.pooled_normals {
            return Err(Error::InvalidParameter(
                "pooled normals need independent particles; disable branching \
                 or switch to streaming draws"
                    .to_string(),
            ));
        }
        simulate_with_branching(config, &coeffs, &steps, t_final)
    } else {
        simulate_independent(config, &coeffs, &steps, t_final)
    }
}

/// Branch-free strategy: each particle runs its whole path independently.
fn simulate_independent(
    config: &SimConfig,
    coeffs: &KernelCoeffs,
    steps: &[StepContext],
    t_final: f64,
) -> Result<SimOutput, Error> {
    let n = config.n_particles;
    let outcomes = (0..n as u64)
        .into_par_iter()
        .map(|id| run_particle(id, config, coeffs, steps))
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(SimOutput {
        outcomes,
        steps: steps.len(),
        t_final,
        initial_particles: n,
        final_particles: n,
        min_population: n,
        max_population: n,
        branch_rounds_active: 0,
        total_offspring: 0,
    })
}

fn run_particle(
    id: u64,
    config: &SimConfig,
    coeffs: &KernelCoeffs,
    steps: &[StepContext],
) -> Result<ParticleOutcome, Error> {
    let seed = config.seed;
    let per_step_ou = coeffs.n * coeffs.sub_steps;
    let ou_key = StreamKey::new(seed, id, StreamPurpose::OuIncrement);
    let iw_key = StreamKey::new(seed, id, StreamPurpose::StochIntegral);
    let mut ou_pool = config
        .pooled_normals
        .then(|| NormalPool::pregenerate(&ou_key, steps.len() * per_step_ou, per_step_ou));
    let mut iw_pool = config
        .pooled_normals
        .then(|| NormalPool::pregenerate(&iw_key, steps.len(), 1));
    let mut ou_src = match ou_pool.as_mut() {
        Some(pool) => NormalSource::Pooled(pool),
        None => NormalSource::Streaming(ou_key),
    };
    let mut iw_src = match iw_pool.as_mut() {
        Some(pool) => NormalSource::Pooled(pool),
        None => NormalSource::Streaming(iw_key),
    };
    let count_key = StreamKey::new(seed, id, StreamPurpose::JumpCount);
    let size_key = StreamKey::new(seed, id, StreamPurpose::JumpSize);
    // With no jump intensity the jump generators are never consumed, so one
    // placeholder instance serves every step.
    let mut rng_count = count_key.rng_at(0);
    let mut rng_size = size_key.rng_at(0);
    let mut p = init_particle(id, config.market.v0, coeffs.n, coeffs.f0);
    let mut z_ou = vec![0.0; per_step_ou];
    let mut z_iw = [0.0f64];
    for ctx in steps {
        ou_src.step_draws(ctx.k, per_step_ou, &mut z_ou)?;
        iw_src.step_draws(ctx.k, 1, &mut z_iw)?;
        if ctx.poisson.is_some() {
            rng_count = count_key.rng_at(ctx.k);
            rng_size = size_key.rng_at(ctx.k);
        }
        full_step(&mut p, coeffs, ctx, &z_ou, z_iw[0], &mut rng_count, &mut rng_size);
    }
    Ok(outcome_of(&p))
}

/// Rough cap on stored market values for ancestry replay, chosen so the
/// stored sweep stays within a few hundred megabytes.
const REPLAY_CELL_BUDGET: usize = 50_000_000;

/// Stepped strategy: advance the whole population one step, then run a
/// resampling round, repeating to the horizon.
fn simulate_with_branching(
    config: &SimConfig,
    coeffs: &KernelCoeffs,
    steps: &[StepContext],
    t_final: f64,
) -> Result<SimOutput, Error> {
    let n = config.n_particles;
    let seed = config.seed;
    let replay = config.memory_mode == MemoryMode::AncestryReplay;
    if replay {
        let projected = (steps.len() + 1).saturating_mul(n).saturating_mul(2);
        if projected > REPLAY_CELL_BUDGET {
            return Err(Error::InvalidParameter(format!(
                "ancestry replay would store about {projected} market values \
                 (budget {REPLAY_CELL_BUDGET}); lower the particle count, coarsen \
                 the grid, or use single-pass mode"
            )));
        }
    }
    let per_step_ou = coeffs.n * coeffs.sub_steps;
    let mut particles: Vec<Particle> = (0..n as u64)
        .map(|id| init_particle(id, config.market.v0, coeffs.n, coeffs.f0))
        .collect();
    let mut next_id = n as u64;
    let mut market_rows: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut mappings: Vec<Option<Vec<u32>>> = Vec::new();
    let mut min_population = n;
    let mut max_population = n;
    let mut branch_rounds_active = 0usize;
    let mut total_offspring = 0usize;
    for ctx in steps {
        particles
            .par_iter_mut()
            .try_for_each_with(vec![0.0f64; per_step_ou], |z_ou, p| -> Result<(), Error> {
                let ou_key = StreamKey::new(seed, p.id, StreamPurpose::OuIncrement);
                let iw_key = StreamKey::new(seed, p.id, StreamPurpose::StochIntegral);
                NormalSource::Streaming(ou_key).step_draws(ctx.k, per_step_ou, z_ou)?;
                let mut z_iw = [0.0f64];
                NormalSource::Streaming(iw_key).step_draws(ctx.k, 1, &mut z_iw)?;
                let mut rng_count =
                    StreamKey::new(seed, p.id, StreamPurpose::JumpCount).rng_at(ctx.k);
                let mut rng_size =
                    StreamKey::new(seed, p.id, StreamPurpose::JumpSize).rng_at(ctx.k);
                if replay {
                    market_step(p, coeffs, ctx, z_ou, z_iw[0], &mut rng_count, &mut rng_size);
                } else {
                    full_step(p, coeffs, ctx, z_ou, z_iw[0], &mut rng_count, &mut rng_size);
                }
                Ok(())
            })?;
        if replay {
            market_rows.push(particles.iter().map(|p| (p.v, p.g)).collect());
        }
        let round = branch_step(
            &mut particles,
            config.q1,
            config.q2,
            seed,
            ctx.k,
            &mut next_id,
            replay,
        )?;
        if replay {
            mappings.push(round.mapping);
        }
        if round.parents_out > 0 {
            branch_rounds_active += 1;
            total_offspring += round.offspring;
        }
        min_population = min_population.min(particles.len());
        max_population = max_population.max(particles.len());
    }
    let outcomes = if replay {
        replay_contract(config, coeffs, steps, &particles, &market_rows, &mappings)
    } else {
        particles.iter().map(outcome_of).collect()
    };
    Ok(SimOutput {
        final_particles: outcomes.len(),
        outcomes,
        steps: steps.len(),
        t_final,
        initial_particles: n,
        min_population,
        max_population,
        branch_rounds_active,
        total_offspring,
    })
}

/// A particle that only carries contract state for the replay sweep. The
/// variance and growth fields are overwritten from the stored rows before
/// each transition, so the contract arithmetic sees exactly the values the
/// single-pass sweep saw.
fn contract_shell(id: u64, f0: f64) -> Particle {
    Particle {
        id,
        y: Vec::new(),
        v: 0.0,
        h_val: 1.0,
        l: 1.0,
        eta_time: None,
        g: 1.0,
        r_acc: 0.0,
        f: f0,
        absorbed_at: None,
        c_acc: 0.0,
        w_acc: 0.0,
        q_acc: 0.0,
    }
}

/// Second sweep of ancestry replay: integrate the contract over the stored
/// market values, applying each round's resampling map to the contract
/// states just as the market sweep applied it to the particles.
fn replay_contract(
    config: &SimConfig,
    coeffs: &KernelCoeffs,
    steps: &[StepContext],
    finals: &[Particle],
    market_rows: &[Vec<(f64, f64)>],
    mappings: &[Option<Vec<u32>>],
) -> Vec<ParticleOutcome> {
    let n = config.n_particles;
    let v_init = init_particle(0, config.market.v0, coeffs.n, coeffs.f0).v;
    let mut states: Vec<Particle> = (0..n as u64)
        .map(|id| contract_shell(id, coeffs.f0))
        .collect();
    let mut prev: Vec<(f64, f64)> = vec![(v_init, 1.0); n];
    for (i, ctx) in steps.iter().enumerate() {
        let rows = &market_rows[i];
        debug_assert_eq!(rows.len(), states.len());
        for (j, st) in states.iter_mut().enumerate() {
            let (v_prev, g_prev) = prev[j];
            let snap = StepSnapshot {
                v_prev,
                g_prev,
                f_prev: st.f,
                absorbed_at_start: st.absorbed_at.is_some(),
            };
            let (v_new, g_new) = rows[j];
            st.v = v_new;
            st.g = g_new;
            contract_step(st, coeffs, ctx, &snap);
        }
        match &mappings[i] {
            Some(map) => {
                states = map.iter().map(|&src| states[src as usize].clone()).collect();
                prev = map.iter().map(|&src| rows[src as usize]).collect();
            }
            None => prev.clone_from(rows),
        }
    }
    debug_assert_eq!(states.len(), finals.len());
    finals
        .iter()
        .zip(&states)
        .map(|(market, st)| ParticleOutcome {
            id: market.id,
            l: market.l,
            c: st.c_acc,
            w: st.w_acc,
            q_fee: st.q_acc,
            f_terminal: st.f,
            g_terminal: market.g,
            v_terminal: market.v,
            absorbed_at: st.absorbed_at,
            eta_at: market.eta_time,
        })
        .collect()
}

/// Weighted net liability contribution of each final particle, in output
/// order: guarantee payments minus rider fee income, carried at the
/// particle's weight.
pub fn liability_values(output: &SimOutput) -> Vec<f64> {
    output
        .outcomes
        .iter()
        .map(|o| (o.w - o.c) * o.l)
        .collect()
}

/// Effective sample size under the final weights: `(sum l)^2 / sum l^2`.
/// Equal weights give back the particle count.
fn effective_size(outcomes: &[ParticleOutcome]) -> f64 {
    let weights: Vec<f64> = outcomes.iter().map(|o| o.l).collect();
    let squares: Vec<f64> = weights.iter().map(|l| l * l).collect();
    let sum = stats::pairwise_sum(&weights);
    let sum_sq = stats::pairwise_sum(&squares);
    if sum_sq > 0.0 {
        sum * sum / sum_sq
    } else {
        0.0
    }
}

/// Net liability estimate from a finished run.
pub fn net_liability_estimate(output: &SimOutput, batches: usize) -> Estimate {
    let values = liability_values(output);
    let mut est = Estimate::from_values(&values, batches);
    est.n_effective = effective_size(&output.outcomes);
    est
}

fn require_risk_neutral(config: &SimConfig, what: &str) -> Result<(), Error> {
    if config.measure != Measure::RiskNeutral {
        return Err(Error::InvalidParameter(format!(
            "{what} is a pricing-measure quantity; set measure to risk_neutral"
        )));
    }
    Ok(())
}

/// Net liability of the guarantee: expected discounted payments minus
/// expected discounted rider fee income, per unit premium scale of the
/// configured contract.
pub fn net_liability(config: &SimConfig) -> Result<Estimate, Error> {
    require_risk_neutral(config, "net liability")?;
    let output = simulate(config)?;
    Ok(net_liability_estimate(&output, config.batches))
}

/// Expected discounted rider fee income and guarantee payments, separately.
pub fn fee_and_payout(config: &SimConfig) -> Result<(Estimate, Estimate), Error> {
    require_risk_neutral(config, "fee and payout split")?;
    let output = simulate(config)?;
    Ok(fee_and_payout_estimates(&output, config.batches))
}

/// Fee and payout estimates from a finished run.
pub fn fee_and_payout_estimates(output: &SimOutput, batches: usize) -> (Estimate, Estimate) {
    let fees: Vec<f64> = output.outcomes.iter().map(|o| o.c * o.l).collect();
    let payouts: Vec<f64> = output.outcomes.iter().map(|o| o.w * o.l).collect();
    let n_eff = effective_size(&output.outcomes);
    let mut fee_est = Estimate::from_values(&fees, batches);
    let mut payout_est = Estimate::from_values(&payouts, batches);
    fee_est.n_effective = n_eff;
    payout_est.n_effective = n_eff;
    (fee_est, payout_est)
}

/// Pricing-identity residual: premium minus the present value of the
/// guaranteed withdrawals minus each particle's terminal account value and
/// base fee income. At a fairly priced fee the residual has mean equal to
/// the negated net liability, so it sits at zero within Monte Carlo error;
/// an overpriced fee pushes it positive.
pub fn fair_fee_consistency(config: &SimConfig) -> Result<Estimate, Error> {
    require_risk_neutral(config, "the pricing identity residual")?;
    let output = simulate(config)?;
    let annuity = config
        .contract
        .discounted_withdrawals(config.market.r, output.t_final);
    let disc_t = (-config.market.r * output.t_final).exp();
    let f0 = config.contract.f0;
    let values: Vec<f64> = output
        .outcomes
        .iter()
        .map(|o| f0 - annuity - o.l * (disc_t * o.f_terminal + o.q_fee))
        .collect();
    let mut est = Estimate::from_values(&values, config.batches);
    est.n_effective = effective_size(&output.outcomes);
    Ok(est)
}

/// Weighted net liability samples under the real-world measure, one
/// `(loss, weight)` pair per final particle. Input for the loss
/// distribution functions.
pub fn loss_samples(config: &SimConfig) -> Result<Vec<(f64, f64)>, Error> {
    if config.measure != Measure::RealWorld {
        return Err(Error::InvalidParameter(
            "loss samples are a real-world quantity; set measure to real_world \
             and provide risk premia"
                .to_string(),
        ));
    }
    let output = simulate(config)?;
    Ok(output
        .outcomes
        .iter()
        .map(|o| (o.w - o.c, o.l))
        .collect())
}

/// Default search bracket for the rider fee level, as an annual rate.
pub const DEFAULT_FEE_BRACKET: (f64, f64) = (0.0, 0.05);
/// Default termination width for the fee search.
pub const DEFAULT_FEE_TOL: f64 = 1e-5;

/// Result of a fee-level search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeeSolution {
    /// Base rider fee level found.
    pub c_bar: f64,
    /// Standard error of the fee level: the liability standard error at the
    /// root divided by the secant slope over the final bracket.
    pub std_error: f64,
    /// Net liability estimate at the returned fee.
    pub liability: Estimate,
    /// Simulations run during the search.
    pub evaluations: usize,
    /// Final bracket around the root.
    pub bracket: (f64, f64),
}

/// Bisect the base fee level until the net liability hits `target`. Every
/// evaluation reuses the configured seed, so the liability is a smooth
/// deterministic function of the fee and bisection is well posed despite
/// the Monte Carlo noise. Stops when the bracket is narrower than `tol` or
/// the liability at the midpoint is statistically indistinguishable from
/// the target.
pub fn solve_base_fee(
    config: &SimConfig,
    target: f64,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<FeeSolution, Error> {
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "fee bracket [{lo}, {hi}] must be finite and ordered"
        )));
    }
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "fee tolerance {tol} must be positive"
        )));
    }
    let eval = |c_bar: f64| -> Result<Estimate, Error> {
        let mut cfg = config.clone();
        cfg.fee.c_bar = c_bar;
        net_liability(&cfg)
    };
    // Both endpoints are evaluated up front: a failed bracket is reported
    // with the liability seen at each end.
    let est_lo = eval(lo)?;
    let est_hi = eval(hi)?;
    let mut f_lo = est_lo.value - target;
    let mut f_hi = est_hi.value - target;
    if !(f_lo > 0.0 && f_hi < 0.0) {
        return Err(Error::BracketFailure {
            lo,
            hi,
            pi_lo: est_lo.value,
            pi_hi: est_hi.value,
        });
    }
    let mut evaluations = 2usize;
    let (mut b_lo, mut b_hi) = (lo, hi);
    let mut root = 0.5 * (b_lo + b_hi);
    let mut root_est: Option<Estimate> = None;
    while b_hi - b_lo > tol && evaluations < 200 {
        let mid = 0.5 * (b_lo + b_hi);
        let est = eval(mid)?;
        evaluations += 1;
        let f_mid = est.value - target;
        if f_mid > 0.0 {
            b_lo = mid;
            f_lo = f_mid;
        } else {
            b_hi = mid;
            f_hi = f_mid;
        }
        root = mid;
        root_est = Some(est);
        // Once the midpoint is within one standard error of the target,
        // further bisection only chases noise.
        if f_mid.abs() < est.std_error {
            break;
        }
    }
    let liability = match root_est {
        Some(est) => est,
        None => {
            // The initial bracket was already narrower than the tolerance.
            let est = eval(root)?;
            evaluations += 1;
            est
        }
    };
    let slope = (f_lo - f_hi) / (b_hi - b_lo);
    let std_error = if slope.is_finite() && slope > 0.0 {
        liability.std_error / slope
    } else {
        f64::INFINITY
    };
    Ok(FeeSolution {
        c_bar: root,
        std_error,
        liability,
        evaluations,
        bracket: (b_lo, b_hi),
    })
}

/// Base fee level at which the guarantee has zero net liability.
pub fn fair_base_fee(config: &SimConfig, lo: f64, hi: f64, tol: f64) -> Result<FeeSolution, Error> {
    solve_base_fee(config, 0.0, lo, hi, tol)
}

/// Base fee level at which the guarantee carries one currency unit of net
/// liability: a mildly underpriced contract for stress scenarios.
pub fn underpriced_base_fee(
    config: &SimConfig,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<FeeSolution, Error> {
    solve_base_fee(config, 1.0, lo, hi, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_fee() -> FeeStructure {
        FeeStructure {
            q: 0.0075,
            c_bar: 0.01,
            m: 0.0,
        }
    }

    /// One-year contract on the lattice drift: weights stay at one.
    fn toy_lattice(n_particles: usize, seed: u64) -> SimConfig {
        let mut cfg = SimConfig::risk_neutral(
            MarketParams::benchmark(),
            toy_fee(),
            ContractSpec::constant(10.0, 10.0),
            0.02,
            n_particles,
            seed,
        );
        cfg.batches = 10;
        cfg
    }

    /// Same contract with the drift nudged off the lattice so weights move.
    fn toy_weighted(n_particles: usize, seed: u64) -> SimConfig {
        let mut cfg = toy_lattice(n_particles, seed);
        cfg.market.nu = 0.1773;
        cfg
    }

    fn assert_outcomes_bitwise(a: &SimOutput, b: &SimOutput) {
        assert_eq!(a.outcomes.len(), b.outcomes.len());
        for (x, y) in a.outcomes.iter().zip(&b.outcomes) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.l.to_bits(), y.l.to_bits());
            assert_eq!(x.c.to_bits(), y.c.to_bits());
            assert_eq!(x.w.to_bits(), y.w.to_bits());
            assert_eq!(x.q_fee.to_bits(), y.q_fee.to_bits());
            assert_eq!(x.f_terminal.to_bits(), y.f_terminal.to_bits());
            assert_eq!(x.g_terminal.to_bits(), y.g_terminal.to_bits());
            assert_eq!(x.absorbed_at, y.absorbed_at);
            assert_eq!(x.eta_at, y.eta_at);
        }
    }

    #[test]
    fn grid_counts_whole_and_fractional_steps() {
        let mut cfg = toy_lattice(2, 1);
        cfg.batches = 2;
        let out = simulate(&cfg).unwrap();
        assert_eq!(out.steps, 50);
        assert_relative_eq!(out.t_final, 1.0, max_relative = 1e-15);

        let mut long = cfg.clone();
        long.contract = ContractSpec::constant(100.0, 7.0);
        long.h = 1.0 / 250.0;
        let out = simulate(&long).unwrap();
        assert_eq!(out.steps, 3572, "3571 whole steps plus a fractional one");
        assert_relative_eq!(out.t_final, 100.0 / 7.0, max_relative = 1e-12);
    }

    #[test]
    fn lattice_runs_have_unit_weights_and_ignore_mode_knobs() {
        let base = toy_lattice(64, 7);
        let out = simulate(&base).unwrap();
        assert!(out.outcomes.iter().all(|o| o.l.to_bits() == 1.0f64.to_bits()));
        assert_eq!(out.branch_rounds_active, 0);
        assert_eq!(effective_size(&out.outcomes), 64.0);

        // Branching on or off, replay or single pass, pooled or streaming:
        // all the same run on the lattice.
        for (branching, memory_mode, pooled) in [
            (false, MemoryMode::SinglePass, false),
            (true, MemoryMode::AncestryReplay, false),
            (true, MemoryMode::SinglePass, true),
        ] {
            let mut cfg = base.clone();
            cfg.branching = branching;
            cfg.memory_mode = memory_mode;
            cfg.pooled_normals = pooled;
            assert_outcomes_bitwise(&out, &simulate(&cfg).unwrap());
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        for cfg in [toy_lattice(96, 11), toy_weighted(96, 11)] {
            let single = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .unwrap()
                .install(|| simulate(&cfg).unwrap());
            let quad = rayon::ThreadPoolBuilder::new()
                .num_threads(4)
                .build()
                .unwrap()
                .install(|| simulate(&cfg).unwrap());
            assert_outcomes_bitwise(&single, &quad);
        }
    }

    #[test]
    fn replay_is_bitwise_identical_to_single_pass() {
        let mut cfg = toy_weighted(300, 23);
        cfg.memory_mode = MemoryMode::SinglePass;
        let single = simulate(&cfg).unwrap();
        cfg.memory_mode = MemoryMode::AncestryReplay;
        let replayed = simulate(&cfg).unwrap();
        assert_eq!(single.final_particles, replayed.final_particles);
        assert_eq!(single.total_offspring, replayed.total_offspring);
        assert_outcomes_bitwise(&single, &replayed);
        // The off-lattice run must actually be exercising the machinery.
        assert!(single.outcomes.iter().any(|o| o.l != 1.0));
    }

    #[test]
    fn pooled_normals_match_streaming_and_respect_branching() {
        let mut cfg = toy_lattice(64, 3);
        cfg.pooled_normals = true;
        let pooled = simulate(&cfg).unwrap();
        cfg.pooled_normals = false;
        assert_outcomes_bitwise(&pooled, &simulate(&cfg).unwrap());

        let mut weighted = toy_weighted(64, 3);
        weighted.pooled_normals = true;
        weighted.branching = true;
        assert!(matches!(
            simulate(&weighted),
            Err(Error::InvalidParameter(_))
        ));
        // Without branching the weighted run may pool again.
        weighted.branching = false;
        assert!(simulate(&weighted).is_ok());
    }

    #[test]
    fn weighted_runs_deflate_the_effective_size() {
        // Branching equalizes weights, so to see raw weight dispersion the
        // run must leave the particles alone.
        let mut cfg = toy_weighted(200, 5);
        cfg.branching = false;
        let est = {
            let out = simulate(&cfg).unwrap();
            net_liability_estimate(&out, cfg.batches)
        };
        assert!(est.n_effective > 0.0);
        assert!(
            est.n_effective < 200.0,
            "dispersed weights must reduce the effective size, got {}",
            est.n_effective
        );
    }

    #[test]
    fn liability_falls_as_the_fee_rises_and_caps_at_the_annuity() {
        let cfg = toy_lattice(400, 31);
        let at = |c_bar: f64| {
            let mut c = cfg.clone();
            c.fee.c_bar = c_bar;
            net_liability(&c).unwrap().value
        };
        let low = at(0.005);
        let high = at(0.03);
        assert!(
            low > high,
            "same-seed liability must fall with the fee: {low} vs {high}"
        );

        // An enormous fee exhausts the account within weeks, so the
        // guarantee pays out nearly the whole discounted withdrawal stream;
        // a pathwise bound caps the liability at that stream exactly.
        let annuity = cfg.contract.discounted_withdrawals(cfg.market.r, 1.0);
        let extreme = at(50.0);
        assert!(extreme <= annuity + 1e-9);
        let mut costly = cfg.clone();
        costly.fee.c_bar = 50.0;
        let (fee_income, payout) = fee_and_payout(&costly).unwrap();
        assert!(
            payout.value > 0.85 * annuity && payout.value <= annuity + 1e-9,
            "extreme fee should trigger most of the guarantee: {} vs {annuity}",
            payout.value
        );
        // The rider income converges on the whole premium in the same
        // limit, which is what keeps the net liability small.
        assert!(fee_income.value > 0.8 * cfg.contract.f0);
    }

    #[test]
    fn fee_solver_recovers_a_known_root() {
        let cfg = toy_lattice(2000, 41);
        let mut probe = cfg.clone();
        probe.fee.c_bar = 0.02;
        let target = net_liability(&probe).unwrap().value;
        // Solving for the liability observed at 0.02 must return (nearly)
        // 0.02: same seed, same noise, so the root is pinned to within the
        // solver's own error estimate.
        let sol = solve_base_fee(&cfg, target, 0.0, 0.5, 1e-4).unwrap();
        assert!(
            (sol.c_bar - 0.02).abs() <= 4.0 * sol.std_error + 1e-4,
            "root {} should be near 0.02 (fee se {})",
            sol.c_bar,
            sol.std_error
        );
        assert!(sol.evaluations >= 3);
        assert!(sol.std_error.is_finite());
        assert!(sol.bracket.0 <= sol.c_bar && sol.c_bar <= sol.bracket.1);
    }

    #[test]
    fn failed_bracket_reports_both_endpoints() {
        // At fees this size the rider collects most of the premium before
        // the account dies, so the liability is negative at both ends and
        // the root lies below the bracket.
        let cfg = toy_lattice(300, 13);
        match fair_base_fee(&cfg, 20.0, 40.0, 1e-4) {
            Err(Error::BracketFailure { lo, hi, pi_lo, pi_hi }) => {
                assert_eq!((lo, hi), (20.0, 40.0));
                assert!(
                    pi_lo < 0.0 && pi_hi < 0.0,
                    "expected negative liability at both ends: {pi_lo}, {pi_hi}"
                );
            }
            other => panic!("expected a bracket failure, got {other:?}"),
        }
    }

    #[test]
    fn consistency_residual_grows_with_the_fee() {
        let cfg = toy_lattice(400, 17);
        let at = |c_bar: f64| {
            let mut c = cfg.clone();
            c.fee.c_bar = c_bar;
            fair_fee_consistency(&c).unwrap().value
        };
        let low = at(0.005);
        let high = at(0.08);
        assert!(
            high > low,
            "residual must rise with the fee: {low} vs {high}"
        );
    }

    #[test]
    fn measures_are_enforced() {
        let q_cfg = toy_lattice(16, 1);
        assert!(matches!(
            loss_samples(&q_cfg),
            Err(Error::InvalidParameter(_))
        ));
        let mut p_cfg = SimConfig::real_world(
            q_cfg.market,
            RiskPremia::zero(),
            q_cfg.fee,
            q_cfg.contract.clone(),
            q_cfg.h,
            q_cfg.n_particles,
            q_cfg.seed,
        );
        p_cfg.batches = q_cfg.batches;
        assert!(matches!(
            net_liability(&p_cfg),
            Err(Error::InvalidParameter(_))
        ));
        // Zero premia leave the dynamics untouched, so the real-world loss
        // samples reproduce the pricing-measure liability values exactly.
        let losses = loss_samples(&p_cfg).unwrap();
        let q_out = simulate(&q_cfg).unwrap();
        let q_values = liability_values(&q_out);
        assert_eq!(losses.len(), q_values.len());
        for ((loss, weight), q) in losses.iter().zip(&q_values) {
            assert_eq!((loss * weight).to_bits(), q.to_bits());
        }
    }

    #[test]
    fn config_validation_rejects_degenerate_runs() {
        let mut cfg = toy_lattice(2, 1);
        cfg.n_particles = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = toy_lattice(16, 1);
        cfg.batches = 17;
        assert!(cfg.validate().is_err());

        let mut cfg = toy_lattice(16, 1);
        cfg.h = 2.0;
        assert!(
            matches!(simulate(&cfg), Err(Error::InvalidParameter(_))),
            "step longer than the contract has no whole step"
        );

        let mut cfg = toy_lattice(16, 1);
        cfg.premia = None;
        cfg.measure = Measure::RealWorld;
        assert!(cfg.validate().is_err());

        let mut cfg = toy_lattice(16, 1);
        cfg.q1 = -0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seeds_move_the_estimate() {
        let a = net_liability(&toy_lattice(200, 1)).unwrap();
        let b = net_liability(&toy_lattice(200, 2)).unwrap();
        assert_ne!(a.value.to_bits(), b.value.to_bits());
        // And rerunning a seed reproduces it exactly.
        let a2 = net_liability(&toy_lattice(200, 1)).unwrap();
        assert_eq!(a.value.to_bits(), a2.value.to_bits());
        assert_eq!(a.std_error.to_bits(), a2.std_error.to_bits());
    }
}
