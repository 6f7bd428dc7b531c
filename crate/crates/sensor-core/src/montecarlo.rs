//! Empirical verification of the Bayesian cost by direct simulation.
//!
//! Fields are drawn exactly from the Gaussian prior (no quadrature), each
//! sample's outcome distribution follows the Born rule, one outcome is
//! sampled, and the squared estimation error is accumulated. The sample mean
//! estimates the analytic cost; its standard error quantifies the expected
//! agreement. Everything is deterministic for a fixed seed: the budget is
//! split into fixed-size batches, each driven by an independent,
//! deterministically derived stream of one named PRNG (ChaCha8), and batch
//! results are combined in batch order regardless of scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{EstimatorSet, Measurement, SensorSolution};
use crate::encoding::StateEncoder;
use crate::error::{invalid, Result};
use crate::linalg::{herm_eig, CMat, CVec};
use crate::prior::Prior;
use crate::spin::SensorSpace;

/// Sample-based cost estimate: mean, its standard error, and the budget.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: u64,
}

impl McEstimate {
    /// Signed deviation from a reference value in units of the standard
    /// error.
    pub fn z_score(&self, reference: f64) -> f64 {
        (self.mean - reference) / self.std_error
    }
}

/// Fixed batch granularity: results never depend on worker count.
const BATCH: u64 = 4096;

/// Outcome-probability evaluator with per-sample cost linear in the total
/// effect rank rather than in `K n^2`.
enum BornRule {
    /// One factor per effect, `M = F F^H`, so `p = |F^H psi|^2`.
    Factors(Vec<CMat>),
    /// Projective rows: `p_mu = |(U psi)_mu|^2`.
    Unitary(CMat),
}

impl BornRule {
    fn new(meas: &Measurement) -> Self {
        match meas {
            Measurement::Povm(p) => BornRule::Factors(
                p.effects
                    .iter()
                    .map(|m| {
                        let eig = herm_eig(m);
                        let keep: Vec<usize> =
                            (0..eig.vals.len()).filter(|&i| eig.vals[i] > 1e-14).collect();
                        CMat::from_fn(m.nrows(), keep.len().max(1), |r, c| {
                            if keep.is_empty() {
                                crate::linalg::I0
                            } else {
                                eig.vecs[(r, keep[c])] * eig.vals[keep[c]].sqrt()
                            }
                        })
                    })
                    .collect(),
            ),
            Measurement::Projective(d) => BornRule::Unitary(d.u.clone()),
        }
    }

    fn probabilities(&self, psi: &CVec, out: &mut Vec<f64>) {
        out.clear();
        match self {
            BornRule::Factors(fs) => {
                for f in fs {
                    let mut p = 0.0;
                    for c in 0..f.ncols() {
                        let mut amp = crate::linalg::I0;
                        for r in 0..f.nrows() {
                            amp += f[(r, c)].conj() * psi[r];
                        }
                        p += amp.norm_sqr();
                    }
                    out.push(p);
                }
            }
            BornRule::Unitary(u) => {
                for row in 0..u.nrows() {
                    let mut amp = crate::linalg::I0;
                    for c in 0..u.ncols() {
                        amp += u[(row, c)] * psi[c];
                    }
                    out.push(amp.norm_sqr());
                }
            }
        }
    }
}

/// Empirical Bayesian mean squared error of a sensor by direct sampling.
///
/// Draws `samples` fields from the exact Gaussian prior, propagates the
/// probe, samples an outcome per the Born rule, and averages the squared
/// error against the attached estimators. Deterministic for a fixed seed.
pub fn monte_carlo_bmse(
    space: &SensorSpace,
    prior: Prior,
    psi: &CVec,
    meas: &Measurement,
    est: &EstimatorSet,
    samples: u64,
    seed: u64,
) -> Result<McEstimate> {
    if samples < 1_000 {
        return invalid("need at least 1000 samples for a meaningful standard error");
    }
    if psi.len() != space.dim {
        return invalid("probe dimension does not match the space");
    }
    meas.validate(space.dim, 1e-6)?;
    if est.len() != meas.n_outcomes() {
        return invalid("estimator count does not match the outcome count");
    }
    if est.d != prior.d {
        return invalid("estimator dimensionality does not match the prior");
    }
    let encoder = StateEncoder::new(space);
    let born = BornRule::new(meas);
    let normal = Normal::new(0.0, prior.delta)
        .map_err(|e| crate::error::SensorError::Invalid(e.to_string()))?;
    let d = prior.d;

    let n_batches = samples.div_ceil(BATCH);
    let partials: Vec<(f64, f64)> = (0..n_batches)
        .into_par_iter()
        .map(|batch| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(batch + 1);
            let count = BATCH.min(samples - batch * BATCH);
            let mut probs = Vec::with_capacity(est.len());
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..count {
                let mut phi = [0.0f64; 3];
                for p in phi.iter_mut().take(d) {
                    *p = rng.sample(normal);
                }
                let psi_phi = encoder.apply(&phi, psi);
                born.probabilities(&psi_phi, &mut probs);
                // Inverse-CDF outcome draw; the final outcome absorbs any
                // residual normalization error.
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut mu = probs.len() - 1;
                for (i, &p) in probs.iter().enumerate() {
                    acc += p.max(0.0);
                    if u < acc {
                        mu = i;
                        break;
                    }
                }
                let xi = est.xi[mu];
                let mut err = 0.0;
                for nu in 0..d {
                    let diff = phi[nu] - xi[nu];
                    err += diff * diff;
                }
                sum += err;
                sum_sq += err * err;
            }
            (sum, sum_sq)
        })
        .collect();

    let (sum, sum_sq) = partials.iter().fold((0.0, 0.0), |(s, q), &(bs, bq)| (s + bs, q + bq));
    let n = samples as f64;
    let mean = sum / n;
    let variance = ((sum_sq / n - mean * mean) * n / (n - 1.0)).max(0.0);
    Ok(McEstimate { mean, std_error: (variance / n).sqrt(), n_samples: samples })
}

/// Run [`monte_carlo_bmse`] on a serialized solution record.
pub fn monte_carlo_solution(sol: &SensorSolution, samples: u64, seed: u64) -> Result<McEstimate> {
    let space = SensorSpace::build(sol.space.clone())?;
    let prior = Prior::new(sol.d, sol.delta)?;
    let psi = sol.state_vector()?;
    let meas = sol.measurement()?;
    let est = sol.estimator_set();
    monte_carlo_bmse(&space, prior, &psi, &meas, &est, samples, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{
        cost, mmse_estimators, outcome_moments, Povm, ProjectiveDecoder, DEFAULT_ESTIMATOR_CAP,
    };
    use crate::encoding::EncodingCache;
    use crate::linalg::{density, random};
    use crate::povm::random_complete_povm;
    use std::sync::Arc;

    #[test]
    fn identity_measurement_reproduces_prior_variance() {
        let space = SensorSpace::symmetric(3).unwrap();
        let prior = Prior::new(2, 0.8).unwrap();
        let povm = Povm::new(vec![CMat::identity(space.dim, space.dim)]);
        let est = EstimatorSet {
            xi: vec![[0.0; 3]],
            degenerate: vec![false],
            d: 2,
            cap: DEFAULT_ESTIMATOR_CAP,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let psi = random::haar_state(&mut rng, space.dim);
        let mc = monte_carlo_bmse(
            &space,
            prior,
            &psi,
            &Measurement::Povm(povm),
            &est,
            50_000,
            42,
        )
        .unwrap();
        let exact = prior.variance();
        assert!(
            mc.z_score(exact).abs() < 3.0,
            "mean {} +- {} vs exact {exact}",
            mc.mean,
            mc.std_error
        );
    }

    #[test]
    fn agrees_with_quadrature_cost_on_a_random_povm_sensor() {
        let space = Arc::new(SensorSpace::symmetric(4).unwrap());
        let prior = Prior::new(2, 0.6).unwrap();
        let cache = EncodingCache::new(space.clone(), prior).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let psi = random::haar_state(&mut rng, space.dim);
        let povm = random_complete_povm(&mut rng, space.dim, 6, 2);
        let meas = Measurement::Povm(povm);
        let om = outcome_moments(&meas, &cache.moment_maps(&density(&psi)));
        let est = mmse_estimators(&om, DEFAULT_ESTIMATOR_CAP);
        let analytic = cost(&cache, &density(&psi), &meas, &est).unwrap();

        let mc = monte_carlo_bmse(&space, prior, &psi, &meas, &est, 100_000, 7).unwrap();
        assert!(
            mc.z_score(analytic).abs() < 3.0,
            "mc {} +- {} vs analytic {analytic}",
            mc.mean,
            mc.std_error
        );
    }

    #[test]
    fn agrees_for_projective_measurements_in_three_dimensions() {
        let space = Arc::new(SensorSpace::symmetric(2).unwrap());
        let prior = Prior::new(3, 0.5).unwrap();
        let cache = EncodingCache::new(space.clone(), prior).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let psi = random::haar_state(&mut rng, space.dim);
        let h = random::hermitian(&mut rng, space.dim);
        let u = crate::linalg::exp_neg_i_h(&h);
        let meas = Measurement::Projective(ProjectiveDecoder { u });
        let om = outcome_moments(&meas, &cache.moment_maps(&density(&psi)));
        let est = mmse_estimators(&om, DEFAULT_ESTIMATOR_CAP);
        let analytic = cost(&cache, &density(&psi), &meas, &est).unwrap();

        let mc = monte_carlo_bmse(&space, prior, &psi, &meas, &est, 60_000, 21).unwrap();
        assert!(
            mc.z_score(analytic).abs() < 3.0,
            "mc {} +- {} vs analytic {analytic}",
            mc.mean,
            mc.std_error
        );
    }

    #[test]
    fn deterministic_and_batch_order_independent() {
        let space = SensorSpace::symmetric(2).unwrap();
        let prior = Prior::new(2, 0.7).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let psi = random::haar_state(&mut rng, space.dim);
        let povm = random_complete_povm(&mut rng, space.dim, 3, 1);
        let meas = Measurement::Povm(povm);
        let om = outcome_moments(
            &meas,
            &EncodingCache::new(Arc::new(space.clone()), prior).unwrap().moment_maps(&density(&psi)),
        );
        let est = mmse_estimators(&om, DEFAULT_ESTIMATOR_CAP);

        let a = monte_carlo_bmse(&space, prior, &psi, &meas, &est, 10_000, 77).unwrap();
        let b = monte_carlo_bmse(&space, prior, &psi, &meas, &est, 10_000, 77).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
        // A different seed moves the estimate but stays consistent.
        let c = monte_carlo_bmse(&space, prior, &psi, &meas, &est, 10_000, 78).unwrap();
        assert_ne!(a.mean.to_bits(), c.mean.to_bits());
    }

    #[test]
    fn rejects_undersized_budgets_and_mismatched_inputs() {
        let space = SensorSpace::symmetric(2).unwrap();
        let prior = Prior::new(2, 0.7).unwrap();
        let psi = CVec::from_element(space.dim, crate::linalg::I1).scale(1.0 / (space.dim as f64).sqrt());
        let povm = Povm::new(vec![CMat::identity(space.dim, space.dim)]);
        let est = EstimatorSet {
            xi: vec![[0.0; 3]],
            degenerate: vec![false],
            d: 2,
            cap: DEFAULT_ESTIMATOR_CAP,
        };
        let meas = Measurement::Povm(povm);
        assert!(monte_carlo_bmse(&space, prior, &psi, &meas, &est, 999, 1).is_err());
        let bad_est = EstimatorSet { d: 3, ..est.clone() };
        assert!(monte_carlo_bmse(&space, prior, &psi, &meas, &bad_est, 5_000, 1).is_err());
    }
}
