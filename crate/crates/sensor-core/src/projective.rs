//! Sensors restricted to projective measurements, plus the rotation-only
//! classical baseline.
//!
//! A projective sensor reads out in a rotated basis: outcome projectors are
//! `Pi_mu = U^H |mu><mu| U` with `U = exp(-i H)` for a Hermitian `H` that is
//! optimized entry by entry. The solver alternates three exact or descent
//! steps, each monotone in the Bayesian cost:
//!
//! 1. probe update — lowest eigenvector of the state-update operator;
//! 2. decoder update — quasi-Newton descent over the real parameters of
//!    `H`, with the per-outcome estimators eliminated in closed form;
//! 3. estimator refresh — posterior means, radially capped.
//!
//! The decoder gradient is exact: the cost is differentiated through
//! `U = exp(-i H)` with the eigenbasis divided-difference kernel rather than
//! finite differences, so descent is reliable even for hundreds of
//! parameters.
//!
//! The classical baseline restricts both the probe and the readout to
//! collective rotations of each partition: the probe is a product of rotated
//! coherent spin states and the readout is a product of rotated `Jz` bases
//! (axis-angle vector per partition per side, six parameters per partition).
//! All rotation parameters descend jointly with exact gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cost::{
    cost, mmse_estimators, outcome_moments, ratio_to_prior, Measurement,
    MeasurementData, ProjectiveDecoder, SensorSolution, SolveStatus, VectorData,
    DEFAULT_ESTIMATOR_CAP, DEGENERATE_OUTCOME_EPS,
};
use crate::encoding::{EncodingCache, MomentOperators};
use crate::error::{invalid, Result};
use crate::linalg::{
    density, exp_neg_i_h, frechet_exp_kernel, frechet_exp_neg_i, gauge_phase, herm_eig,
    hermitian_log_unitary, kron, mul, random, CMat, CVec, C64, HermEig, Op, I0, I1,
};
use crate::optim::{lbfgs, split_seed, LbfgsOptions};
use crate::povm::state_step;
use crate::prior::{Prior, Quadrature};
use crate::spin::{build_spin_operators, PartitionSpec, SensorSpace, SpaceKind, SpinRep};

// ---------------------------------------------------------------------------
// Shared estimator elimination
// ---------------------------------------------------------------------------

/// Optimal-estimator contribution of one outcome and its derivatives with
/// respect to the outcome moments `t0 = Tr{Pi L0}`, `t1 = Tr{Pi L1}`.
///
/// The eliminated cost is `var + sum_mu contrib_mu`; with the radial cap
/// inactive `contrib = -|t1|^2/t0`, with it active the estimator sits on the
/// cap sphere. `beta = d contrib / d t0`, `alpha = d contrib / d t1`.
pub(crate) struct Gain {
    pub contrib: f64,
    pub beta: f64,
    pub alpha: [f64; 3],
}

pub(crate) fn outcome_gain(t0: f64, t1: &[f64; 3], d: usize, cap: f64) -> Gain {
    if t0 <= DEGENERATE_OUTCOME_EPS {
        return Gain { contrib: 0.0, beta: 0.0, alpha: [0.0; 3] };
    }
    let mut s2 = 0.0;
    for &v in t1.iter().take(d) {
        s2 += v * v;
    }
    let s = s2.sqrt();
    let mut alpha = [0.0; 3];
    if s <= cap * t0 {
        for nu in 0..d {
            alpha[nu] = -2.0 * t1[nu] / t0;
        }
        Gain { contrib: -s2 / t0, beta: s2 / (t0 * t0), alpha }
    } else {
        for nu in 0..d {
            alpha[nu] = -2.0 * cap * t1[nu] / s;
        }
        Gain { contrib: -(2.0 * cap * s - cap * cap * t0), beta: cap * cap, alpha }
    }
}

// ---------------------------------------------------------------------------
// Hermitian parametrization
// ---------------------------------------------------------------------------

/// Real coordinates of a Hermitian matrix: diagonal first, then (Re, Im) of
/// the strict upper triangle, column-major. Length `n^2`.
fn pack_herm(h: &CMat, out: &mut Vec<f64>) {
    let n = h.nrows();
    out.clear();
    for i in 0..n {
        out.push(h[(i, i)].re);
    }
    for b in 1..n {
        for a in 0..b {
            out.push(h[(a, b)].re);
            out.push(h[(a, b)].im);
        }
    }
}

fn unpack_herm(x: &[f64], n: usize) -> CMat {
    let mut h = CMat::zeros(n, n);
    for i in 0..n {
        h[(i, i)] = C64::new(x[i], 0.0);
    }
    let mut idx = n;
    for b in 1..n {
        for a in 0..b {
            let z = C64::new(x[idx], x[idx + 1]);
            idx += 2;
            h[(a, b)] = z;
            h[(b, a)] = z.conj();
        }
    }
    h
}

/// Translate a matrix gradient `G` (meaning `dC = Tr{G dH}`) into the real
/// parametrization of `pack_herm`.
fn herm_grad_to_params(g: &CMat, out: &mut [f64]) {
    let n = g.nrows();
    for i in 0..n {
        out[i] = g[(i, i)].re;
    }
    let mut idx = n;
    for b in 1..n {
        for a in 0..b {
            out[idx] = (g[(b, a)] + g[(a, b)]).re;
            out[idx + 1] = ((g[(b, a)] - g[(a, b)]) * C64::new(0.0, 1.0)).re;
            idx += 2;
        }
    }
}

// ---------------------------------------------------------------------------
// Decoder objective
// ---------------------------------------------------------------------------

/// Eliminated cost of a rotated-basis readout `u` at fixed probe moments,
/// plus everything downstream solvers need: the matrix `kmat` with
/// `dC = 2 Re Tr{kmat^H dU}`, and the outcome moments themselves.
pub(crate) struct ReadoutEval {
    pub value: f64,
    pub kmat: CMat,
    pub moments: crate::cost::OutcomeMoments,
}

pub(crate) fn readout_eval(u: &CMat, ops: &MomentOperators, var: f64, cap: f64) -> ReadoutEval {
    let n = u.nrows();
    let d = ops.l1.len();
    // Row mu of `t0m` against row mu of `u` gives the outcome probability;
    // likewise for the posterior-mean numerators.
    let t0m = mul(u, Op::N, &ops.l0, Op::N);
    let t1m: Vec<CMat> = ops.l1.iter().map(|l| mul(u, Op::N, l, Op::N)).collect();

    let mut value = var;
    let mut kmat = CMat::zeros(n, n);
    let mut t0v = Vec::with_capacity(n);
    let mut t1v = Vec::with_capacity(n);
    for mu in 0..n {
        let mut t0 = 0.0;
        for c in 0..n {
            let p = t0m[(mu, c)];
            let q = u[(mu, c)];
            t0 += p.re * q.re + p.im * q.im;
        }
        let mut t1 = [0.0; 3];
        for (nu, tm) in t1m.iter().enumerate() {
            let mut acc = 0.0;
            for c in 0..n {
                let p = tm[(mu, c)];
                let q = u[(mu, c)];
                acc += p.re * q.re + p.im * q.im;
            }
            t1[nu] = acc;
        }
        let g = outcome_gain(t0, &t1, d, cap);
        value += g.contrib;
        for c in 0..n {
            let mut z = t0m[(mu, c)] * g.beta;
            for (nu, tm) in t1m.iter().enumerate() {
                z += tm[(mu, c)] * g.alpha[nu];
            }
            kmat[(mu, c)] = z;
        }
        t0v.push(t0);
        t1v.push(t1);
    }
    ReadoutEval { value, kmat, moments: crate::cost::OutcomeMoments { t0: t0v, t1: t1v, d } }
}

/// Eliminated Bayesian cost of the rotated-basis readout `U = exp(-i H)` at
/// fixed probe moments, together with its exact gradient in the real
/// Hermitian coordinates. `x` has length `n^2`.
fn decoder_value_grad(
    ops: &MomentOperators,
    var: f64,
    cap: f64,
    n: usize,
    x: &[f64],
    grad: &mut [f64],
) -> f64 {
    let h = unpack_herm(x, n);
    let eig = herm_eig(&h);
    let u = eig.apply_fn(|l| C64::from_polar(1.0, -l));
    let ReadoutEval { value, kmat, .. } = readout_eval(&u, ops, var, cap);

    // Chain through U = exp(-i H): with S = V^H K V and the divided-
    // difference kernel D, dC = Tr{G dH} where G = V Y^T V^H and
    // Y_ab = conj(S_ab) D_ab + S_ba conj(D_ab).
    let s = crate::linalg::sandwich_rev(&eig.vecs, &kmat);
    let ker = frechet_exp_kernel(&eig);
    let mut y = CMat::zeros(n, n);
    for b in 0..n {
        for a in 0..n {
            y[(a, b)] = s[(a, b)].conj() * ker[(a, b)] + s[(b, a)] * ker[(a, b)].conj();
        }
    }
    let gmat = crate::linalg::sandwich(&eig.vecs, &y.transpose());
    herm_grad_to_params(&gmat, grad);
    value
}

/// One decoder block update: quasi-Newton descent from `h0`. Returns the new
/// generator, its unitary, and the achieved eliminated cost.
fn decoder_descent(
    ops: &MomentOperators,
    var: f64,
    cap: f64,
    h0: &CMat,
    max_iters: usize,
) -> (CMat, CMat, f64) {
    let n = h0.nrows();
    let opts = LbfgsOptions {
        memory: 10,
        max_iters,
        grad_tol: 1e-9,
        f_tol: 1e-14,
        max_line_steps: 40,
    };
    let mut x0 = Vec::new();
    pack_herm(h0, &mut x0);
    let res = lbfgs(x0, &opts, |x, grad| decoder_value_grad(ops, var, cap, n, x, grad));
    let h = unpack_herm(&res.x, n);
    let u = exp_neg_i_h(&h);
    (h, u, res.f)
}

// ---------------------------------------------------------------------------
// Projective solver
// ---------------------------------------------------------------------------

/// Warm start for [`solve_projective`]: a probe and a decoder generator,
/// usually carried over from a neighboring prior width.
#[derive(Clone, Debug)]
pub struct ProjectiveWarm {
    pub psi: CVec,
    pub h: CMat,
}

impl ProjectiveWarm {
    /// Rebuild a warm start from a stored solution; the decoder generator is
    /// recovered as the principal logarithm of the stored unitary.
    pub fn from_solution(sol: &SensorSolution) -> Result<Self> {
        let psi = sol.state_vector()?;
        match sol.measurement()? {
            Measurement::Projective(dec) => {
                Ok(Self { psi, h: hermitian_log_unitary(&dec.u)? })
            }
            Measurement::Povm(_) => invalid("solution does not carry a projective measurement"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProjectiveOptions {
    pub restarts: usize,
    /// Alternation sweeps per restart.
    pub max_outer: usize,
    /// Two consecutive sweeps improving less than this stop the restart.
    pub cost_tol: f64,
    /// Quasi-Newton iteration budget of each decoder update.
    pub inner_iters: usize,
    pub seed: u64,
    /// Replaces restart 0 when present.
    pub warm: Option<ProjectiveWarm>,
}

impl Default for ProjectiveOptions {
    fn default() -> Self {
        Self { restarts: 16, max_outer: 40, cost_tol: 1e-10, inner_iters: 80, seed: 1, warm: None }
    }
}

/// Sensor-family tag of a projective solution on the given space.
pub fn projective_sensor_tag(kind: &SpaceKind) -> &'static str {
    match kind {
        SpaceKind::Symmetric { .. } => "projective-1p",
        SpaceKind::Partitioned { partitions } => {
            if partitions.atom_counts.len() == 2 {
                "projective-2p"
            } else {
                "projective-kp"
            }
        }
        SpaceKind::Irreducible { .. } => "np",
        SpaceKind::DirectSumSpins { .. } => "projective",
    }
}

struct Candidate {
    cost: f64,
    psi: CVec,
    u: CMat,
    iterations: usize,
    converged: bool,
}

/// Jointly optimize probe, rotated-basis projective readout, and estimators.
///
/// Multistart alternation; every restart is deterministic given
/// `opts.seed` and restarts run concurrently. The best restart is returned
/// (ties broken by restart index).
pub fn solve_projective(cache: &EncodingCache, opts: &ProjectiveOptions) -> Result<SensorSolution> {
    match cache.space.kind {
        SpaceKind::Symmetric { .. } | SpaceKind::Partitioned { .. } | SpaceKind::Irreducible { .. } => {}
        SpaceKind::DirectSumSpins { .. } => {
            return invalid("projective solver expects a Symmetric, Partitioned, or Irreducible space")
        }
    }
    if opts.restarts == 0 {
        return invalid("need at least one restart");
    }
    let n = cache.dim();
    let var = cache.quad.variance();
    let cap = DEFAULT_ESTIMATOR_CAP;

    let run_restart = |r: usize| -> Candidate {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(opts.seed, r as u64));
        let (mut psi, mut h) = if r == 0 && opts.warm.is_some() {
            let w = opts.warm.clone().unwrap();
            (w.psi, w.h)
        } else {
            let psi = match r % 3 {
                0 => CVec::from_element(n, I1).scale(1.0 / (n as f64).sqrt()),
                1 => {
                    let mut v = CVec::zeros(n);
                    v[n / 2] = I1;
                    v
                }
                _ => random::haar_state(&mut rng, n),
            };
            let h = if r < 2 {
                CMat::zeros(n, n)
            } else {
                random::hermitian(&mut rng, n)
            };
            (psi, h)
        };

        let mut cost_now = f64::INFINITY;
        let mut stall = 0usize;
        let mut iterations = 0usize;
        let mut converged = false;
        let mut u = exp_neg_i_h(&h);
        for it in 0..opts.max_outer {
            iterations = it + 1;
            let ops = cache.moment_maps(&density(&psi));
            let (h_new, u_new, c_dec) = decoder_descent(&ops, var, cap, &h, opts.inner_iters);
            h = h_new;
            u = u_new;
            let meas = Measurement::Projective(ProjectiveDecoder { u: u.clone() });
            let om = outcome_moments(&meas, &ops);
            let est = mmse_estimators(&om, cap);
            let (psi_new, c_state) = state_step(cache, &meas, &est);
            psi = psi_new;
            let c = c_state.min(c_dec);
            if cost_now - c < opts.cost_tol {
                stall += 1;
                if stall >= 2 {
                    converged = true;
                    cost_now = cost_now.min(c);
                    break;
                }
            } else {
                stall = 0;
            }
            cost_now = cost_now.min(c);
        }
        Candidate { cost: cost_now, psi, u, iterations, converged }
    };

    let candidates: Vec<(usize, Candidate)> = if opts.restarts == 1 {
        vec![(0, run_restart(0))]
    } else {
        (0..opts.restarts).into_par_iter().map(|r| (r, run_restart(r))).collect()
    };
    let per_restart: Vec<f64> = candidates.iter().map(|(_, c)| c.cost).collect();
    let (best_restart, best) = candidates
        .into_iter()
        .min_by(|a, b| a.1.cost.total_cmp(&b.1.cost).then(a.0.cmp(&b.0)))
        .expect("at least one restart");

    // Definitive evaluation through the generic cost path.
    let mut psi = best.psi;
    gauge_phase(&mut psi);
    let meas = Measurement::Projective(ProjectiveDecoder { u: best.u });
    let om = outcome_moments(&meas, &cache.moment_maps(&density(&psi)));
    let est = mmse_estimators(&om, cap);
    let c = cost(cache, &density(&psi), &meas, &est)?;

    Ok(SensorSolution {
        sensor: projective_sensor_tag(&cache.space.kind).to_string(),
        space: cache.space.kind.clone(),
        d: cache.d(),
        delta: cache.prior.delta,
        quad_order: cache.quad.order,
        state: VectorData::from_vector(&psi),
        measurement: MeasurementData::from_measurement(&meas),
        estimators: est.xi.clone(),
        cost: c,
        ratio: ratio_to_prior(c, &cache.prior),
        status: SolveStatus {
            converged: best.converged,
            iterations: best.iterations,
            restarts: opts.restarts,
            best_restart,
            message: Some(format!(
                "final costs per restart: [{}]",
                per_restart.iter().map(|c| format!("{c:.6e}")).collect::<Vec<_>>().join(", ")
            )),
        },
    })
}

// ---------------------------------------------------------------------------
// Classical baseline
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ClassicalOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Quadrature order override (default: the prior's default order).
    pub order: Option<usize>,
    /// Parameter vector of a previous solve, replaces restart 0.
    pub warm: Option<Vec<f64>>,
}

impl Default for ClassicalOptions {
    fn default() -> Self {
        Self { restarts: 8, max_iters: 400, seed: 1, order: None, warm: None }
    }
}

struct PartOps {
    jops: [CMat; 3],
}

struct ClassicalCtx<'a> {
    parts: Vec<PartOps>,
    node_us: Vec<CMat>,
    quad: &'a Quadrature,
    var: f64,
    cap: f64,
    d: usize,
    n: usize,
}

fn kron_vec(a: &CVec, b: &CVec) -> CVec {
    let mut out = CVec::zeros(a.len() * b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[i * b.len() + j] = a[i] * b[j];
        }
    }
    out
}

/// Rotation generator `v . J` for one partition.
fn axis_combo(jops: &[CMat; 3], v: &[f64]) -> CMat {
    let mut a = &jops[0] * C64::new(v[0], 0.0);
    a += &jops[1] * C64::new(v[1], 0.0);
    a += &jops[2] * C64::new(v[2], 0.0);
    a
}

/// Eliminated cost of the classical sensor and its exact gradient in the
/// `6k` rotation parameters (entangler vectors first, decoder vectors last).
fn classical_value_grad(ctx: &ClassicalCtx, x: &[f64], grad: &mut [f64]) -> f64 {
    let k = ctx.parts.len();
    let n = ctx.n;
    let kn = ctx.node_us.len();

    let mut en: Vec<(HermEig, CMat)> = Vec::with_capacity(k);
    let mut de: Vec<(HermEig, CMat)> = Vec::with_capacity(k);
    for (i, part) in ctx.parts.iter().enumerate() {
        let eig_en = herm_eig(&axis_combo(&part.jops, &x[3 * i..3 * i + 3]));
        let u_en = eig_en.apply_fn(|l| C64::from_polar(1.0, -l));
        en.push((eig_en, u_en));
        let eig_de = herm_eig(&axis_combo(&part.jops, &x[3 * (k + i)..3 * (k + i) + 3]));
        let u_de = eig_de.apply_fn(|l| C64::from_polar(1.0, -l));
        de.push((eig_de, u_de));
    }

    // Probe: product of rotated lowest-weight (coherent) states; readout:
    // product of rotated Jz bases. Partition 0 is the slowest tensor index.
    let part_states: Vec<CVec> = en.iter().map(|(_, u)| u.column(0).into_owned()).collect();
    let mut psi = CVec::from_element(1, I1);
    for s in &part_states {
        psi = kron_vec(&psi, s);
    }
    let mut ude = CMat::identity(1, 1);
    for (_, u) in &de {
        ude = kron(&ude, u);
    }

    // Node states and outcome amplitudes.
    let mut psi_nodes = CMat::zeros(n, kn);
    for kk in 0..kn {
        psi_nodes.column_mut(kk).gemv(I1, &ctx.node_us[kk], &psi, I0);
    }
    let amps = mul(&ude, Op::N, &psi_nodes, Op::N);

    // Outcome moments under the quadrature.
    let mut t0 = vec![0.0; n];
    let mut t1 = vec![[0.0f64; 3]; n];
    for kk in 0..kn {
        let w = ctx.quad.weights[kk];
        let node = ctx.quad.nodes[kk];
        for mu in 0..n {
            let p = w * amps[(mu, kk)].norm_sqr();
            t0[mu] += p;
            for nu in 0..ctx.d {
                t1[mu][nu] += p * node[nu];
            }
        }
    }
    let mut value = ctx.var;
    let mut beta = vec![0.0; n];
    let mut alpha = vec![[0.0f64; 3]; n];
    for mu in 0..n {
        let g = outcome_gain(t0[mu], &t1[mu], ctx.d, ctx.cap);
        value += g.contrib;
        beta[mu] = g.beta;
        alpha[mu] = g.alpha;
    }

    // Sensitivities: ga = dC/d(conj amps) entrywise (up to the factor 2 Re),
    // kmat drives the decoder gradient, chi the probe gradient.
    let mut ga = CMat::zeros(n, kn);
    for kk in 0..kn {
        let w = ctx.quad.weights[kk];
        let node = ctx.quad.nodes[kk];
        for mu in 0..n {
            let mut coeff = beta[mu];
            for nu in 0..ctx.d {
                coeff += alpha[mu][nu] * node[nu];
            }
            ga[(mu, kk)] = amps[(mu, kk)] * (w * coeff);
        }
    }
    let kmat = mul(&ga, Op::N, &psi_nodes, Op::H);
    let z = mul(&ude, Op::H, &ga, Op::N);
    let mut chi = CVec::zeros(n);
    for kk in 0..kn {
        chi += ctx.node_us[kk].ad_mul(&z.column(kk));
    }

    // Chain into the 6k rotation parameters.
    for i in 0..k {
        for nu in 0..3 {
            let dpart = frechet_exp_neg_i(&en[i].0, &ctx.parts[i].jops[nu]);
            let dcol = dpart.column(0).into_owned();
            let mut dpsi = CVec::from_element(1, I1);
            for (j, s) in part_states.iter().enumerate() {
                dpsi = if j == i { kron_vec(&dpsi, &dcol) } else { kron_vec(&dpsi, s) };
            }
            grad[3 * i + nu] = 2.0 * chi.dotc(&dpsi).re;

            let dblock = frechet_exp_neg_i(&de[i].0, &ctx.parts[i].jops[nu]);
            let mut du = CMat::identity(1, 1);
            for (j, (_, u)) in de.iter().enumerate() {
                du = if j == i { kron(&du, &dblock) } else { kron(&du, u) };
            }
            grad[3 * (k + i) + nu] = 2.0 * kmat.dotc(&du).re;
        }
    }
    value
}

fn classical_ctx<'a>(space: &SensorSpace, cache: &'a EncodingCache) -> Result<ClassicalCtx<'a>> {
    let SpaceKind::Partitioned { partitions } = &space.kind else {
        return invalid("classical solver needs a partitioned space");
    };
    let parts: Vec<PartOps> = partitions
        .atom_counts
        .iter()
        .map(|&na| {
            let rep = SpinRep::new(na);
            PartOps { jops: build_spin_operators(rep) }
        })
        .collect();
    let node_us: Vec<CMat> = (0..cache.quad.len()).map(|kk| cache.node_unitary(kk)).collect();
    Ok(ClassicalCtx {
        parts,
        node_us,
        quad: &cache.quad,
        var: cache.quad.variance(),
        cap: DEFAULT_ESTIMATOR_CAP,
        d: cache.d(),
        n: space.dim,
    })
}

/// Classical baseline: product coherent probe, product rotated-`Jz` readout,
/// optimal estimators. Returns the solution and the winning rotation
/// parameters (reusable as a warm start at a neighboring prior width).
pub fn solve_classical_with_params(
    partition: &PartitionSpec,
    prior: Prior,
    opts: &ClassicalOptions,
) -> Result<(SensorSolution, Vec<f64>)> {
    let space = std::sync::Arc::new(SensorSpace::partitioned(partition.clone())?);
    let cache = match opts.order {
        Some(o) => EncodingCache::with_order(space.clone(), prior, o)?,
        None => EncodingCache::new(space.clone(), prior)?,
    };
    let ctx = classical_ctx(&space, &cache)?;
    let k = ctx.parts.len();
    let np = 6 * k;
    if let Some(w) = &opts.warm {
        if w.len() != np {
            return invalid(format!("warm start has {} parameters, expected {np}", w.len()));
        }
    }

    let lopts = LbfgsOptions {
        memory: 10,
        max_iters: opts.max_iters,
        grad_tol: 1e-10,
        f_tol: 1e-15,
        max_line_steps: 40,
    };
    let run_restart = |r: usize| -> (f64, Vec<f64>, bool, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(opts.seed, r as u64));
        let x0: Vec<f64> = if r == 0 && opts.warm.is_some() {
            opts.warm.clone().unwrap()
        } else {
            (0..np).map(|_| rng.gen_range(-1.5..1.5)).collect()
        };
        let res = lbfgs(x0, &lopts, |x, g| classical_value_grad(&ctx, x, g));
        (res.f, res.x, res.converged, res.iterations)
    };
    let runs: Vec<(usize, (f64, Vec<f64>, bool, usize))> = if opts.restarts == 1 {
        vec![(0, run_restart(0))]
    } else {
        (0..opts.restarts).into_par_iter().map(|r| (r, run_restart(r))).collect()
    };
    let (best_restart, (_, x, converged, iterations)) = runs
        .into_iter()
        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.0.cmp(&b.0)))
        .expect("at least one restart");

    // Rebuild the winner and evaluate through the generic cost path.
    let mut psi = CVec::from_element(1, I1);
    let mut ude = CMat::identity(1, 1);
    for (i, part) in ctx.parts.iter().enumerate() {
        let u_en = exp_neg_i_h(&axis_combo(&part.jops, &x[3 * i..3 * i + 3]));
        psi = kron_vec(&psi, &u_en.column(0).into_owned());
        let u_de = exp_neg_i_h(&axis_combo(&part.jops, &x[3 * (k + i)..3 * (k + i) + 3]));
        ude = kron(&ude, &u_de);
    }
    gauge_phase(&mut psi);
    let meas = Measurement::Projective(ProjectiveDecoder { u: ude });
    let om = outcome_moments(&meas, &cache.moment_maps(&density(&psi)));
    let est = mmse_estimators(&om, ctx.cap);
    let c = cost(&cache, &density(&psi), &meas, &est)?;

    let sol = SensorSolution {
        sensor: "classical".to_string(),
        space: space.kind.clone(),
        d: cache.d(),
        delta: prior.delta,
        quad_order: cache.quad.order,
        state: VectorData::from_vector(&psi),
        measurement: MeasurementData::from_measurement(&meas),
        estimators: est.xi.clone(),
        cost: c,
        ratio: ratio_to_prior(c, &prior),
        status: SolveStatus {
            converged,
            iterations,
            restarts: opts.restarts,
            best_restart,
            message: None,
        },
    };
    Ok((sol, x))
}

/// Classical baseline; see [`solve_classical_with_params`].
pub fn solve_classical(
    partition: &PartitionSpec,
    prior: Prior,
    opts: &ClassicalOptions,
) -> Result<SensorSolution> {
    solve_classical_with_params(partition, prior, opts).map(|(sol, _)| sol)
}
