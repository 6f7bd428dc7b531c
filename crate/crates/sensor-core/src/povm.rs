//! Optimal quantum sensor (OQS): alternating optimization of probe state,
//! POVM, and estimators with no structural restriction on the measurement.
//!
//! The three blocks each admit an exact or high-quality update:
//!
//! * estimators: posterior means (closed form, see [`crate::cost`]);
//! * state: for fixed (measurement, estimators) the cost is the quadratic
//!   form `<psi| Y |psi>` with
//!   `Y = V I + L0#[B] - 2 sum_nu L1_nu#[A_nu]`,
//!   `B = sum_mu |xi_mu|^2 M_mu`, `A_nu = sum_mu xi_mu^nu M_mu`,
//!   so the optimal probe is the lowest eigenvector of `Y`;
//! * measurement: for fixed (state, estimators) the cost is linear in the
//!   effects, `C = V - sum_mu Tr{M_mu G_mu}` with
//!   `G_mu = 2 sum_nu xi_mu^nu L1_nu[rho] - |xi_mu|^2 L0[rho]`, a semidefinite
//!   program solved here by a Burer-Monteiro factorization `M_mu = A_mu
//!   A_mu^H` with an augmented-Lagrangian treatment of `sum_mu M_mu = I`,
//!   followed by an exact completeness projection. If the projected
//!   measurement is no better than the incoming one, the incoming one is
//!   kept, so the update never increases the cost.
//!
//! Each see-saw pass is therefore monotone, and multistart over random
//! initializations guards against local minima.

use crate::cost::{
    cost_from_moments, mmse_estimators, outcome_moments, ratio_to_prior, EstimatorSet,
    Measurement, MeasurementData, Povm, SensorSolution, SolveStatus, VectorData,
    DEFAULT_ESTIMATOR_CAP,
};
use crate::encoding::{EncodingCache, MomentOperators};
use crate::error::Result;
use crate::linalg::{
    density, gauge_phase, gemm, herm_eig, hermitize, inv_sqrt_psd, max_abs, mul, random, CMat,
    CVec, Op, C64, I1,
};
use crate::optim::{lbfgs, split_seed, LbfgsOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// A sensor to seed the first restart with (e.g. a solution of a more
/// structured solver being polished, or a previous sweep point).
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub psi: CVec,
    pub povm: Povm,
}

/// Transport a warm start along an isometry into a larger space (for
/// example from the two-partition direct sum into the irreducible space).
///
/// Effects map as `iota M iota^H`; whatever part of the identity the
/// embedded subspace misses is appended as one extra effect so the result
/// stays complete. Probes inside the embedded subspace never trigger that
/// remainder (the dynamics commute with the subspace projector), so the
/// transported sensor has exactly the original cost.
pub fn embed_warm_start(iota: &CMat, warm: &WarmStart) -> WarmStart {
    let big = iota.nrows();
    let psi = iota * &warm.psi;
    let mut effects: Vec<CMat> = warm
        .povm
        .effects
        .iter()
        .map(|m| {
            let t = mul(iota, Op::N, m, Op::N);
            mul(&t, Op::N, iota, Op::H)
        })
        .collect();
    let mut rem = CMat::identity(big, big);
    for e in &effects {
        rem -= e;
    }
    let rem = hermitize(&rem);
    if max_abs(&rem) > 1e-12 {
        effects.push(rem);
    }
    WarmStart { psi, povm: Povm::new(effects) }
}

/// Settings shared by the iterative solvers.
#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Independent random initializations; the best final cost wins.
    pub restarts: usize,
    /// Maximum alternating (see-saw) passes per restart.
    pub max_outer: usize,
    /// Stop a restart when the relative cost decrease stays below this for
    /// two consecutive passes.
    pub cost_tol: f64,
    /// Master seed; every restart derives its own stream.
    pub seed: u64,
    /// Number of POVM outcomes; `None` picks `min(dim^2, 4 dim)`.
    pub n_outcomes: Option<usize>,
    /// Replaces the random initialization of the first restart.
    pub warm: Option<WarmStart>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { restarts: 8, max_outer: 60, cost_tol: 1e-9, seed: 1, n_outcomes: None, warm: None }
    }
}

/// The state-update operator `Y`: the cost of probe `psi` under fixed
/// measurement and estimators is exactly `<psi| Y |psi>`.
pub fn upsilon(cache: &EncodingCache, meas: &Measurement, est: &EstimatorSet) -> CMat {
    let n = cache.dim();
    let d = cache.d();
    let effects = meas.effect_operators();
    assert_eq!(effects.len(), est.xi.len());
    let mut b = CMat::zeros(n, n);
    let mut a: Vec<CMat> = vec![CMat::zeros(n, n); d];
    for (m, xi) in effects.iter().zip(&est.xi) {
        let norm2 = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
        if norm2 != 0.0 {
            b += m.scale(norm2);
        }
        for nu in 0..d {
            if xi[nu] != 0.0 {
                a[nu] += m.scale(xi[nu]);
            }
        }
    }
    let c1: Vec<CMat> = a.iter().map(|m| m.scale(-2.0)).collect();
    let mut ups = cache.adjoint_mix(&b, &c1);
    let var = cache.quad.variance();
    for i in 0..n {
        ups[(i, i)] += C64::new(var, 0.0);
    }
    hermitize(&ups)
}

/// Optimal probe for fixed measurement and estimators: lowest eigenvector of
/// `Y`. Returns (state, its cost).
pub fn state_step(cache: &EncodingCache, meas: &Measurement, est: &EstimatorSet) -> (CVec, f64) {
    let ups = upsilon(cache, meas, est);
    let eig = herm_eig(&ups);
    let mut psi = eig.vecs.column(0).into_owned();
    gauge_phase(&mut psi);
    (psi, eig.vals[0])
}

// ---------------------------------------------------------------------------
// Measurement update: Burer-Monteiro + augmented Lagrangian
// ---------------------------------------------------------------------------

/// Persistent Burer-Monteiro / augmented-Lagrangian state for the
/// measurement block. Factors of all `k` outcomes are stacked column-wise
/// into one `n x (k r)` matrix (outcome `mu` owns columns `mu r .. (mu+1) r`)
/// so every hot operation is a single large product.
pub(crate) struct BmState {
    a: CMat,
    y: CMat,
    sigma: f64,
    n: usize,
    k: usize,
    r: usize,
    cold: bool,
}

impl BmState {
    /// Warm-start factors from a POVM: top eigenpairs per effect, tiny
    /// random columns where the effect rank is lower.
    pub(crate) fn from_povm(povm: &Povm, r: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = povm.effects[0].nrows();
        let k = povm.effects.len();
        let mut a = CMat::zeros(n, k * r);
        for (mu, m) in povm.effects.iter().enumerate() {
            let eig = herm_eig(m);
            for c in 0..r.min(n) {
                let idx = n - 1 - c;
                let lam = eig.vals[idx].max(0.0);
                if lam > 1e-14 {
                    let w = C64::new(lam.sqrt(), 0.0);
                    for row in 0..n {
                        a[(row, mu * r + c)] = eig.vecs[(row, idx)] * w;
                    }
                } else {
                    fill_random_column(&mut a, mu * r + c, 0.01, rng);
                }
            }
            for c in n.min(r)..r {
                fill_random_column(&mut a, mu * r + c, 0.01, rng);
            }
        }
        Self { a, y: CMat::zeros(n, n), sigma: 10.0, n, k, r, cold: true }
    }

    /// Increase the factor rank, keeping current columns and padding each
    /// block with small random ones (revives dead outcomes, escapes
    /// rank-deficient stationary points).
    pub(crate) fn escalate(&mut self, new_r: usize, rng: &mut ChaCha8Rng) {
        if new_r <= self.r {
            return;
        }
        let mut a = CMat::zeros(self.n, self.k * new_r);
        for mu in 0..self.k {
            for c in 0..self.r {
                for row in 0..self.n {
                    a[(row, mu * new_r + c)] = self.a[(row, mu * self.r + c)];
                }
            }
            for c in self.r..new_r {
                fill_random_column(&mut a, mu * new_r + c, 0.01, rng);
            }
        }
        self.a = a;
        self.r = new_r;
        self.cold = true;
    }

    pub(crate) fn rank(&self) -> usize {
        self.r
    }
}

fn fill_random_column(a: &mut CMat, col: usize, scale: f64, rng: &mut ChaCha8Rng) {
    for row in 0..a.nrows() {
        a[(row, col)] = C64::new(
            scale * rand::Rng::sample::<f64, _>(rng, rand_distr::StandardNormal),
            scale * rand::Rng::sample::<f64, _>(rng, rand_distr::StandardNormal),
        );
    }
}

/// Exact completeness projection `M_mu <- S^-1/2 M_mu S^-1/2` applied to the
/// stacked factor blocks.
fn project_stacked(a: &CMat, k: usize, r: usize) -> Povm {
    let n = a.nrows();
    let mut s = CMat::zeros(n, n);
    gemm(&mut s, I1, a, Op::N, a, Op::H, crate::linalg::I0);
    let t = inv_sqrt_psd(&s, 1e-12);
    let ta = crate::linalg::mul(&t, Op::N, a, Op::N);
    Povm::new(
        (0..k)
            .map(|mu| {
                let block = ta.columns(mu * r, r).into_owned();
                let mut m = CMat::zeros(n, n);
                gemm(&mut m, I1, &block, Op::N, &block, Op::H, crate::linalg::I0);
                hermitize(&m)
            })
            .collect(),
    )
}

/// Per-outcome coefficients of the gain `G_mu = c0_mu L0 + sum_nu c1_mu^nu
/// L1_nu` with `c0 = -|xi|^2`, `c1^nu = 2 xi^nu`.
fn gain_coefficients(est: &EstimatorSet) -> Vec<(f64, [f64; 3])> {
    est.xi
        .iter()
        .map(|xi| {
            let norm2 = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
            (-norm2, [2.0 * xi[0], 2.0 * xi[1], 2.0 * xi[2]])
        })
        .collect()
}

/// Dense gain operators (only used for small-scale evaluation and tests).
fn gain_operators(moments: &MomentOperators, est: &EstimatorSet) -> Vec<CMat> {
    gain_coefficients(est)
        .iter()
        .map(|(c0, c1)| {
            let mut g = moments.l0.scale(*c0);
            for (nu, l1) in moments.l1.iter().enumerate() {
                if c1[nu] != 0.0 {
                    g += l1.scale(c1[nu]);
                }
            }
            g
        })
        .collect()
}

pub(crate) struct MeasurementStep {
    pub povm: Povm,
    pub est: EstimatorSet,
    pub cost: f64,
}

/// One measurement update: maximize `sum_mu Tr{M_mu G_mu}` at fixed
/// estimators by minimizing the augmented Lagrangian
///
/// `L = -sum_mu Re Tr{A_mu^H G_mu A_mu} + Re<Y,H> + sigma/2 |H|_F^2`,
/// `H = sum_mu A_mu A_mu^H - I`, `dL/dA_mu^* = (-G_mu + Y + sigma H) A_mu`,
///
/// then projecting to exact completeness. If the projected candidate is
/// worse than the incoming POVM the incoming one is kept, and the estimators
/// are refreshed either way, so the cost never increases.
pub(crate) fn povm_step(
    variance: f64,
    moments: &MomentOperators,
    incoming: &Povm,
    est_in: &EstimatorSet,
    cost_in: f64,
    bm: &mut BmState,
) -> MeasurementStep {
    let n = bm.n;
    let (k, r) = (bm.k, bm.r);
    let kr = k * r;
    // Normalize the objective so penalty/tolerance scales are universal.
    let gscale = {
        let mut s = moments.l0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        for l1 in &moments.l1 {
            s = s.max(l1.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt());
        }
        let cmax = est_in
            .xi
            .iter()
            .map(|xi| xi.iter().map(|v| v.abs()).fold(0.0f64, f64::max))
            .fold(0.0f64, f64::max);
        (s * (1.0 + 2.0 * cmax)).max(1e-300)
    };
    let inv_scale = 1.0 / gscale;
    let bases: Vec<CMat> = std::iter::once(moments.l0.scale(inv_scale))
        .chain(moments.l1.iter().map(|l| l.scale(inv_scale)))
        .collect();
    let coefs = gain_coefficients(est_in);
    let d = moments.l1.len();

    let (al_outers, inner_iters) = if bm.cold { (12, 150) } else { (4, 60) };
    let inner = LbfgsOptions {
        memory: 8,
        max_iters: inner_iters,
        grad_tol: 1e-10,
        ..Default::default()
    };

    // Preallocated hot buffers.
    let mut trial = CMat::zeros(n, kr);
    let mut base_prod: Vec<CMat> = (0..=d).map(|_| CMat::zeros(n, kr)).collect();
    let mut t = CMat::zeros(n, kr);
    let mut grad_m = CMat::zeros(n, kr);
    let mut s_buf = CMat::zeros(n, n);
    let mut p_buf = CMat::zeros(n, n);

    let mut x = vec![0.0; 2 * n * kr];
    let mut h_prev = f64::INFINITY;
    for _ in 0..al_outers {
        pack(&bm.a, &mut x);
        let y_fixed = bm.y.clone();
        let sigma = bm.sigma;
        let res = lbfgs(std::mem::take(&mut x), &inner, |xs, grad| {
            unpack(xs, &mut trial);
            // S = A A^H, H = S - I, P = Y + sigma H.
            gemm(&mut s_buf, I1, &trial, Op::N, &trial, Op::H, crate::linalg::I0);
            for i in 0..n {
                s_buf[(i, i)] -= I1;
            }
            let mut pen = 0.0;
            let mut h2 = 0.0;
            for (yz, hz) in y_fixed.iter().zip(s_buf.iter()) {
                pen += yz.re * hz.re + yz.im * hz.im;
                h2 += hz.norm_sqr();
            }
            p_buf.copy_from(&y_fixed);
            p_buf.zip_apply(&s_buf, |pz, hz| *pz += hz * sigma);
            // Base products and the per-block coefficient mix T.
            for (b, out) in bases.iter().zip(base_prod.iter_mut()) {
                gemm(out, I1, b, Op::N, &trial, Op::N, crate::linalg::I0);
            }
            for mu in 0..k {
                let (c0, c1) = coefs[mu];
                for c in mu * r..(mu + 1) * r {
                    for row in 0..n {
                        let mut z = base_prod[0][(row, c)] * c0;
                        for nu in 0..d {
                            z += base_prod[nu + 1][(row, c)] * c1[nu];
                        }
                        t[(row, c)] = z;
                    }
                }
            }
            let mut dot = 0.0;
            for (az, tz) in trial.iter().zip(t.iter()) {
                dot += az.re * tz.re + az.im * tz.im;
            }
            // grad = 2 (P A - T).
            gemm(&mut grad_m, I1, &p_buf, Op::N, &trial, Op::N, crate::linalg::I0);
            grad_m -= &t;
            let mut i = 0;
            for z in grad_m.iter() {
                grad[i] = 2.0 * z.re;
                grad[i + 1] = 2.0 * z.im;
                i += 2;
            }
            pen + 0.5 * sigma * h2 - dot
        });
        x = res.x;
        unpack(&x, &mut bm.a);
        // Multiplier update on the exact residual.
        gemm(&mut s_buf, I1, &bm.a, Op::N, &bm.a, Op::H, crate::linalg::I0);
        for i in 0..n {
            s_buf[(i, i)] -= I1;
        }
        let h_norm = s_buf.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if h_norm < 1e-9 {
            break;
        }
        bm.y.zip_apply(&s_buf, |yz, hz| *yz += hz * bm.sigma);
        bm.y = hermitize(&bm.y);
        if h_norm > 0.25 * h_prev {
            bm.sigma = (bm.sigma * 10.0).min(1e9);
        }
        h_prev = h_norm;
    }
    bm.cold = false;

    let cand_povm = project_stacked(&bm.a, k, r);
    // Candidate cost at fixed estimators (the objective is linear, so this
    // is exact); the incoming POVM wins ties.
    let g_raw = gain_operators(moments, est_in);
    let gain: f64 = cand_povm
        .effects
        .iter()
        .zip(&g_raw)
        .map(|(m, gm)| crate::linalg::trace_prod_herm(m, gm))
        .sum();
    let cand_cost = variance - gain;
    let povm = if cand_cost <= cost_in + 1e-12 { cand_povm } else { incoming.clone() };
    // Estimator refresh (exact minimization; never increases cost).
    let meas = Measurement::Povm(povm);
    let om = outcome_moments(&meas, moments);
    let est = mmse_estimators(&om, est_in.cap);
    let cost = cost_from_moments(variance, &om, &est);
    let povm = match meas {
        Measurement::Povm(p) => p,
        _ => unreachable!(),
    };
    MeasurementStep { povm, est, cost }
}

pub(crate) fn pack(a: &CMat, x: &mut [f64]) {
    let mut i = 0;
    for z in a.iter() {
        x[i] = z.re;
        x[i + 1] = z.im;
        i += 2;
    }
}

pub(crate) fn unpack(x: &[f64], a: &mut CMat) {
    let mut i = 0;
    for z in a.iter_mut() {
        *z = C64::new(x[i], x[i + 1]);
        i += 2;
    }
}

/// Random complete POVM: `k` Ginibre factors of rank `r`, normalized by the
/// inverse square root of their sum.
pub fn random_complete_povm(rng: &mut ChaCha8Rng, n: usize, k: usize, r: usize) -> Povm {
    let mut a = CMat::zeros(n, k * r);
    for col in 0..k * r {
        fill_random_column(&mut a, col, 1.0, rng);
    }
    project_stacked(&a, k, r)
}

/// Default outcome count for a dimension-`n` sensor space.
pub fn default_n_outcomes(n: usize) -> usize {
    (n * n).min(4 * n)
}

// ---------------------------------------------------------------------------
// Full solver
// ---------------------------------------------------------------------------

/// Optimize state, POVM, and estimators jointly by monotone see-saw with
/// multistart. Returns the best solution across restarts (ties broken by
/// restart index).
pub fn solve_oqs(cache: &EncodingCache, opts: &SolveOptions) -> Result<SensorSolution> {
    let n = cache.dim();
    let k = opts.n_outcomes.unwrap_or_else(|| default_n_outcomes(n));
    if k == 0 {
        return crate::error::invalid("need at least one outcome");
    }
    let variance = cache.quad.variance();

    struct Best {
        cost: f64,
        psi: CVec,
        povm: Povm,
        restart: usize,
        iterations: usize,
        converged: bool,
    }

    let run_restart = |restart: usize| -> Best {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(opts.seed, restart as u64));
        let (mut psi, mut povm) = match (&opts.warm, restart) {
            (Some(w), 0) => (w.psi.clone(), w.povm.clone()),
            _ => {
                let mut psi = random::haar_state(&mut rng, n);
                gauge_phase(&mut psi);
                (psi, random_complete_povm(&mut rng, n, k, 1))
            }
        };
        gauge_phase(&mut psi);
        let mut moments = cache.moment_maps(&density(&psi));
        let om = outcome_moments(&Measurement::Povm(povm.clone()), &moments);
        let mut est = mmse_estimators(&om, DEFAULT_ESTIMATOR_CAP);
        let mut cost = cost_from_moments(variance, &om, &est);
        let mut bm = BmState::from_povm(&povm, 1, &mut rng);
        let rank_cap = 6.min(n);

        let mut slow = 0usize;
        let mut iterations = 0usize;
        let mut converged = false;
        for outer in 0..opts.max_outer {
            iterations = outer + 1;
            let prev = cost;
            // Measurement + estimator updates to a joint fixed point for the
            // current state (each sub-step is monotone by construction).
            for _ in 0..6 {
                let before = cost;
                let step = povm_step(variance, &moments, &povm, &est, cost, &mut bm);
                if step.cost <= cost {
                    povm = step.povm;
                    est = step.est;
                    cost = step.cost;
                }
                if before - cost <= 0.1 * opts.cost_tol * (1.0 + before.abs()) {
                    break;
                }
            }
            // State update (exact), then refresh moments + estimators.
            let meas = Measurement::Povm(povm.clone());
            let (new_psi, _) = state_step(cache, &meas, &est);
            psi = new_psi;
            moments = cache.moment_maps(&density(&psi));
            let om = outcome_moments(&meas, &moments);
            est = mmse_estimators(&om, DEFAULT_ESTIMATOR_CAP);
            cost = cost_from_moments(variance, &om, &est);

            if std::env::var_os("OQS_TRACE").is_some() {
                eprintln!("restart {restart} outer {outer} rank {} cost {cost:.9e}", bm.rank());
            }
            if prev - cost <= opts.cost_tol * (1.0 + prev.abs()) {
                slow += 1;
                if slow >= 2 {
                    // Stalled: raise the factor rank before giving up -- the
                    // rank-limited problem has stationary points the full
                    // semidefinite problem does not.
                    if bm.rank() < rank_cap {
                        let next = match bm.rank() {
                            1 => 2,
                            2 => 4,
                            rr => rr + 2,
                        };
                        bm.escalate(next.min(rank_cap), &mut rng);
                        slow = 0;
                    } else {
                        converged = true;
                        break;
                    }
                }
            } else {
                slow = 0;
            }
        }

        Best { cost, psi, povm, restart, iterations, converged }
    };

    // Restarts are independent; run them concurrently with per-restart
    // deterministic seeds and pick the winner by (cost, restart index) so
    // the result is identical regardless of scheduling.
    let n_restarts = opts.restarts.max(1);
    let runs: Vec<Best> = if n_restarts == 1 {
        vec![run_restart(0)]
    } else {
        (0..n_restarts).into_par_iter().map(run_restart).collect()
    };
    let b = runs
        .into_iter()
        .min_by(|x, y| x.cost.total_cmp(&y.cost).then(x.restart.cmp(&y.restart)))
        .expect("at least one restart ran");
    // Final cleanup: drop effects that never fire, restore exact
    // completeness, refresh estimators and cost.
    let pruned = b.povm.pruned(1e-10);
    let povm = if pruned.len() < b.povm.len() && !pruned.is_empty() {
        pruned.project_to_complete()
    } else {
        b.povm
    };
    let meas = Measurement::Povm(povm);
    let moments = cache.moment_maps(&density(&b.psi));
    let om = outcome_moments(&meas, &moments);
    let est = mmse_estimators(&om, DEFAULT_ESTIMATOR_CAP);
    let cost = cost_from_moments(variance, &om, &est).max(0.0);

    Ok(SensorSolution {
        sensor: "oqs".into(),
        space: cache.space.kind.clone(),
        d: cache.d(),
        delta: cache.prior.delta,
        quad_order: cache.quad.order,
        state: VectorData::from_vector(&b.psi),
        measurement: MeasurementData::from_measurement(&meas),
        estimators: est.xi.clone(),
        cost,
        ratio: ratio_to_prior(cost, &cache.prior),
        status: SolveStatus {
            converged: b.converged,
            iterations: b.iterations,
            restarts: opts.restarts.max(1),
            best_restart: b.restart,
            message: None,
        },
    })
}
