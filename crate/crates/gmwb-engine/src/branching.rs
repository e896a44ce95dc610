//! Branching resampling of the particle population.
//!
//! Likelihood weights drift apart as a simulation runs; left alone, a few
//! heavy particles come to dominate the estimator. After each step the
//! population is compared against a band around the mean weight: particles
//! inside the band survive unchanged, while each particle outside it is
//! replaced by a random number of copies at the mean weight, chosen so the
//! expected weight carried by the copies equals the weight replaced. The
//! replacement draws use one stratified uniform per resampled particle,
//! assigned through a random permutation, which keeps every draw marginally
//! uniform while pinning the realized offspring total close to its mean.

use rand::Rng;

use crate::error::Error;
use crate::kernel::Particle;
use crate::rng::{random_permutation, StreamKey, StreamPurpose, ENSEMBLE_STREAM_ID};

/// Resampling band for a weight vector: the mean weight `a` and the band
/// radius `r >= 1`, so the kept range is `[a / r, a * r]`.
///
/// The radius grows with the dispersion of the log weights: `r = exp(q1 *
/// var^(q2 / 2))` where `var` is the population variance of `ln L`. Zero
/// weights count toward the mean but are excluded from the log statistics;
/// they fall below any band and are culled by the resampling rule.
pub fn branch_band(weights: &[f64], q1: f64, q2: f64) -> (f64, f64) {
    let n = weights.len() as f64;
    let a = weights.iter().sum::<f64>() / n;
    let mut positive = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for &w in weights {
        if w > 0.0 {
            let lw = w.ln();
            positive += 1.0;
            s1 += lw;
            s2 += lw * lw;
        }
    }
    let r = if positive > 0.0 {
        let var = (s2 / positive - (s1 / positive).powi(2)).max(0.0);
        (q1 * var.powf(0.5 * q2)).exp()
    } else {
        1.0
    };
    (a, r)
}

/// What one resampling round did to the population.
#[derive(Debug, Clone)]
pub struct BranchOutcome {
    /// Mean weight; every offspring particle carries it.
    pub mean_weight: f64,
    /// Kept range `[lower, upper]` applied to the weights.
    pub band: (f64, f64),
    /// Particles whose weight stayed inside the band.
    pub kept: usize,
    /// Particles outside the band, each replaced by zero or more copies.
    pub parents_out: usize,
    /// Total copies created.
    pub offspring: usize,
    /// For each post-round position, the pre-round position it came from;
    /// `None` when the round changed nothing. Only populated on request.
    pub mapping: Option<Vec<u32>>,
}

impl BranchOutcome {
    fn unchanged(a: f64, r: f64, kept: usize) -> BranchOutcome {
        BranchOutcome {
            mean_weight: a,
            band: (a / r, a * r),
            kept,
            parents_out: 0,
            offspring: 0,
            mapping: None,
        }
    }
}

/// One resampling round. Particles keep their order; copies of resampled
/// particles follow the kept block, grouped by parent, each with a fresh id
/// drawn from `next_id` and weight reset to the population mean. `round`
/// keys the ensemble random streams, so a round is reproducible given the
/// master seed. Pass `record_mapping` to get the position mapping back for
/// ancestry tracking.
///
/// Fails with [`Error::Extinction`] if no particle carries weight, or if
/// every particle is resampled and none leaves a copy (possible only
/// through floating-point corner cases; the expected copy count always
/// matches the weight being replaced).
pub fn branch_step(
    particles: &mut Vec<Particle>,
    q1: f64,
    q2: f64,
    master_seed: u64,
    round: u32,
    next_id: &mut u64,
    record_mapping: bool,
) -> Result<BranchOutcome, Error> {
    let n_before = particles.len();
    if n_before == 0 {
        return Err(Error::Extinction { step: round as usize });
    }
    if particles.iter().any(|p| !p.l.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "non-finite likelihood weight in resampling round {round}"
        )));
    }
    let weights: Vec<f64> = particles.iter().map(|p| p.l).collect();
    let (a, r) = branch_band(&weights, q1, q2);
    if !(a > 0.0) {
        return Err(Error::Extinction { step: round as usize });
    }
    if weights.iter().all(|&w| w == weights[0]) {
        return Ok(BranchOutcome::unchanged(a, r, n_before));
    }
    let lo = a / r;
    let hi = a * r;
    let out_flag: Vec<bool> = weights.iter().map(|&w| w < lo || w > hi).collect();
    let m_out = out_flag.iter().filter(|&&f| f).count();
    if m_out == 0 {
        return Ok(BranchOutcome::unchanged(a, r, n_before));
    }

    // One stratified uniform per resampled particle: the m-th of the sorted
    // draws lands in [(m-1)/M, m/M), and a random permutation decides which
    // particle consumes which stratum.
    let mut rng_u =
        StreamKey::new(master_seed, ENSEMBLE_STREAM_ID, StreamPurpose::BranchUniform).rng_at(round);
    let mut rng_p =
        StreamKey::new(master_seed, ENSEMBLE_STREAM_ID, StreamPurpose::Permutation).rng_at(round);
    let strata: Vec<f64> = (0..m_out)
        .map(|m| (m as f64 + rng_u.random::<f64>()) / m_out as f64)
        .collect();
    let perm = random_permutation(&mut rng_p, m_out);

    let old = std::mem::take(particles);
    let mut survivors: Vec<Particle> = Vec::with_capacity(n_before);
    let mut parents: Vec<(u32, Particle)> = Vec::with_capacity(m_out);
    let mut mapping: Vec<u32> = Vec::new();
    for (i, p) in old.into_iter().enumerate() {
        if out_flag[i] {
            parents.push((i as u32, p));
        } else {
            if record_mapping {
                mapping.push(i as u32);
            }
            survivors.push(p);
        }
    }
    let kept = survivors.len();
    let mut offspring = 0usize;
    for (j, (pos, parent)) in parents.into_iter().enumerate() {
        let ratio = parent.l / a;
        let whole = ratio.floor();
        let extra = strata[perm[j] as usize] < ratio - whole;
        let count = whole as usize + usize::from(extra);
        for _ in 0..count {
            let mut child = parent.clone();
            child.l = a;
            child.id = *next_id;
            *next_id += 1;
            if record_mapping {
                mapping.push(pos);
            }
            survivors.push(child);
        }
        offspring += count;
    }
    if survivors.is_empty() {
        return Err(Error::Extinction { step: round as usize });
    }
    *particles = survivors;
    Ok(BranchOutcome {
        mean_weight: a,
        band: (lo, hi),
        kept,
        parents_out: m_out,
        offspring,
        mapping: if record_mapping { Some(mapping) } else { None },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::init_particle;
    use approx::assert_relative_eq;

    fn population(weights: &[f64]) -> Vec<Particle> {
        weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let mut p = init_particle(i as u64, 0.04, 2, 100.0);
                p.l = w;
                p
            })
            .collect()
    }

    #[test]
    fn band_matches_reference_values() {
        // ln weights of {e, 1/e} have mean 0 and variance 1, so the mean
        // weight is cosh(1) and the radius is e at unit shape parameters.
        let (a, r) = branch_band(&[std::f64::consts::E, 1.0 / std::f64::consts::E], 1.0, 1.0);
        assert_relative_eq!(a, 1.5430806348152437, max_relative = 1e-15);
        assert_relative_eq!(r, std::f64::consts::E, max_relative = 1e-15);
    }

    #[test]
    fn band_shape_parameters_scale_the_radius() {
        // ln weights +/- 2 give variance 4; with q1 = 0.5, q2 = 2 the radius
        // is exp(0.5 * 4) = e^2.
        let w = [(2.0f64).exp(), (-2.0f64).exp()];
        let (_, r) = branch_band(&w, 0.5, 2.0);
        assert_relative_eq!(r, (2.0f64).exp(), max_relative = 1e-13);
    }

    #[test]
    fn equal_weights_are_left_alone() {
        let mut pop = population(&[0.7; 64]);
        let ids: Vec<u64> = pop.iter().map(|p| p.id).collect();
        let mut next_id = 1000;
        let out = branch_step(&mut pop, 1.0, 1.0, 99, 1, &mut next_id, true).unwrap();
        assert_eq!(out.kept, 64);
        assert_eq!(out.parents_out, 0);
        assert_eq!(out.offspring, 0);
        assert!(out.mapping.is_none());
        assert_eq!(next_id, 1000);
        let ids_after: Vec<u64> = pop.iter().map(|p| p.id).collect();
        assert_eq!(ids, ids_after);
        assert!(pop.iter().all(|p| p.l == 0.7));
    }

    #[test]
    fn resampled_copies_carry_the_mean_weight_and_fresh_ids() {
        // A tight band (q1 = 0.01) pushes all of {1, 1, 10} outside it. The
        // light particles have offspring ratio 0.25, the heavy one 2.5, and
        // every copy must carry the mean weight 4 and a new id.
        let mut pop = population(&[1.0, 1.0, 10.0]);
        let mut next_id = 3;
        let out = branch_step(&mut pop, 0.01, 1.0, 7, 5, &mut next_id, true).unwrap();
        assert_eq!(out.kept, 0);
        assert_eq!(out.parents_out, 3);
        assert_eq!(out.offspring, pop.len());
        assert!((2..=5).contains(&pop.len()));
        for p in &pop {
            assert_eq!(p.l, 4.0);
            assert!(p.id >= 3);
        }
        let mapping = out.mapping.unwrap();
        assert_eq!(mapping.len(), pop.len());
        // Copies are grouped by parent in original order, and the heavy
        // parent (position 2) leaves two or three of them.
        let heavy = mapping.iter().filter(|&&m| m == 2).count();
        assert!(heavy == 2 || heavy == 3);
        assert!(mapping.windows(2).all(|w| w[0] <= w[1]));
        let ids: Vec<u64> = pop.iter().map(|p| p.id).collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), ids.len(), "offspring ids must be unique");
    }

    #[test]
    fn offspring_totals_are_unbiased_across_rounds() {
        // Expected copies: 0.25 + 0.25 + 2.5 = 3 per round. Per-round
        // variance is 0.1875 + 0.1875 + 0.25, so 2000 rounds pin the mean
        // within about 0.018; allow four standard errors.
        let rounds = 2000;
        let mut total = 0usize;
        for round in 1..=rounds {
            let mut pop = population(&[1.0, 1.0, 10.0]);
            let mut next_id = 3;
            let out = branch_step(&mut pop, 0.01, 1.0, 7, round, &mut next_id, false).unwrap();
            total += out.offspring;
        }
        let mean = total as f64 / rounds as f64;
        let se = (0.625f64 / rounds as f64).sqrt();
        assert!(
            (mean - 3.0).abs() < 4.0 * se,
            "offspring mean {mean} should lie within 4 standard errors of 3"
        );
    }

    #[test]
    fn rounds_are_reproducible() {
        let run = || {
            let mut pop = population(&[0.2, 1.4, 0.9, 5.0, 0.6]);
            let mut next_id = 5;
            branch_step(&mut pop, 0.5, 1.0, 31, 9, &mut next_id, true).unwrap();
            pop.iter().map(|p| (p.id, p.l.to_bits())).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_weight_particles_are_culled() {
        let mut pop = population(&[1.0, 1.0, 1.0, 0.0]);
        let mut next_id = 4;
        branch_step(&mut pop, 1.0, 1.0, 11, 2, &mut next_id, false).unwrap();
        assert!(!pop.is_empty());
        assert!(pop.iter().all(|p| p.l > 0.0));
    }

    #[test]
    fn weightless_population_is_extinct() {
        let mut pop = population(&[0.0, 0.0, 0.0]);
        let mut next_id = 3;
        let err = branch_step(&mut pop, 1.0, 1.0, 1, 4, &mut next_id, false).unwrap_err();
        assert!(matches!(err, Error::Extinction { step: 4 }));
    }

    #[test]
    fn non_finite_weights_are_rejected() {
        let mut pop = population(&[1.0, f64::NAN]);
        let mut next_id = 2;
        let err = branch_step(&mut pop, 1.0, 1.0, 1, 1, &mut next_id, false).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)));
    }

    #[test]
    fn population_size_stays_stable_over_many_rounds() {
        // Repeated rounds on a dispersed population should neither explode
        // nor collapse: the expected post-round size always equals the
        // pre-round size when the band is tight.
        let mut pop = population(&[0.5, 0.8, 1.0, 1.3, 2.9, 0.1, 1.7, 0.7]);
        let mut next_id = 8;
        for round in 1..=200u32 {
            branch_step(&mut pop, 0.05, 1.0, 13, round, &mut next_id, false).unwrap();
            assert!(
                (2..=64).contains(&pop.len()),
                "population drifted to {} by round {round}",
                pop.len()
            );
        }
    }
}
