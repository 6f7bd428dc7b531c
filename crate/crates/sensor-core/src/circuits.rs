//! Variational sensing circuits built from collective rotations and
//! one-axis-twisting gates, with exact parameter gradients.
//!
//! Two circuit families are provided.
//!
//! * Two-partition (`TwoP`, on `Partitioned([nA, nB])`): the entangler is
//!   `L(th_n) ... L(th_1) Ry_A(pi/2) Ry_B(pi/2)` acting on the lowest-weight
//!   product state, with the layer
//!   `L(th) = Ry_A(th4) Ry_B(-th4) Rx_A(th3) Rx_B(th3) Tz_A(th2) Tz_B(th2)
//!   Tz(th1)`, where `Tz_A/B` twist each partition and `Tz` twists the
//!   collective `Jz`. The decoder is
//!   `Rx_A(v01) Rx_B(v01) Ry_A(v02) Ry_B(-v02) L^H(v_1) ... L^H(v_nde)`
//!   followed by a product-basis `Jz` readout. Parameter count
//!   `4 (n_en + n_de) + 2`.
//! * One-partition (`OneP`, on `Symmetric(N)`): `L(th) = Tz(th3) Ry(th2)
//!   Rx(th1)`, entangler `L(th_n) ... L(th_1)` on `|m=-J>`, decoder
//!   `L^H(v_1) ... L^H(v_nde)`; `3 (n_en + n_de)` parameters.
//!
//! Estimators are eliminated in closed form, so the objective is a function
//! of the circuit parameters alone. Gradients are exact: every gate is
//! `exp(-i angle G)` with `G` either diagonal (twists, z rotations) or a
//! collective spin component diagonalized once per engine, and the chain
//! rule runs in reverse over the gate products. Shared parameters (the
//! same angle driving both partitions, possibly with opposite signs)
//! accumulate every gate's contribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cost::{
    cost, mmse_estimators, ratio_to_prior, Measurement, MeasurementData, ProjectiveDecoder,
    SensorSolution, SolveStatus, VectorData, DEFAULT_ESTIMATOR_CAP,
};
use crate::encoding::EncodingCache;
use crate::error::{invalid, Result};
use crate::linalg::{density, gauge_phase, herm_eig, kron, mul, CMat, CVec, C64, HermEig, Op, I0, I1};
use crate::optim::{lbfgs, split_seed, LbfgsOptions};
use crate::povm::upsilon;
use crate::projective::{readout_eval, ReadoutEval};
use crate::spin::{SensorSpace, SpaceKind};

// ---------------------------------------------------------------------------
// Gate vocabulary
// ---------------------------------------------------------------------------

/// Which collective operator a gate acts on.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Target {
    /// One partition (index into the partition list; the only partition for
    /// a symmetric space).
    Part(usize),
    /// The collective sum over all partitions.
    All,
}

/// Gate kind: a rotation `exp(-i angle J_axis)` or a one-axis twist
/// `exp(-i angle (J_z)^2)` of the target.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GateKind {
    /// Axis 0 = x, 1 = y, 2 = z.
    Rotation(usize, Target),
    Twist(Target),
}

/// One gate of a chain, in application order. The angle is
/// `coeff * params[param]`, or the fixed `coeff` itself when `param` is
/// `None` (the entangler's pi/2 pre-rotations).
#[derive(Clone, Copy, Debug)]
pub struct GateSpec {
    pub kind: GateKind,
    pub coeff: f64,
    pub param: Option<usize>,
}

/// Circuit family of the sensor.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CircuitFamily {
    OneP,
    TwoP,
}

/// A fully specified circuit topology: gate chains in application order and
/// the parameter layout (entangler block first, decoder block second).
#[derive(Clone, Debug)]
pub struct CircuitLayout {
    pub family: CircuitFamily,
    pub n_en: usize,
    pub n_de: usize,
    pub n_params: usize,
    en_gates: Vec<GateSpec>,
    de_gates: Vec<GateSpec>,
}

fn push_two_p_layer(gates: &mut Vec<GateSpec>, base: usize, adjoint: bool) {
    // Application order of L(th): collective twist, partition twists,
    // partition x rotations, partition y rotations (B negated).
    let forward = [
        GateSpec { kind: GateKind::Twist(Target::All), coeff: 1.0, param: Some(base) },
        GateSpec { kind: GateKind::Twist(Target::Part(1)), coeff: 1.0, param: Some(base + 1) },
        GateSpec { kind: GateKind::Twist(Target::Part(0)), coeff: 1.0, param: Some(base + 1) },
        GateSpec { kind: GateKind::Rotation(0, Target::Part(1)), coeff: 1.0, param: Some(base + 2) },
        GateSpec { kind: GateKind::Rotation(0, Target::Part(0)), coeff: 1.0, param: Some(base + 2) },
        GateSpec { kind: GateKind::Rotation(1, Target::Part(1)), coeff: -1.0, param: Some(base + 3) },
        GateSpec { kind: GateKind::Rotation(1, Target::Part(0)), coeff: 1.0, param: Some(base + 3) },
    ];
    if adjoint {
        for g in forward.iter().rev() {
            gates.push(GateSpec { coeff: -g.coeff, ..*g });
        }
    } else {
        gates.extend_from_slice(&forward);
    }
}

fn push_one_p_layer(gates: &mut Vec<GateSpec>, base: usize, adjoint: bool) {
    let forward = [
        GateSpec { kind: GateKind::Rotation(0, Target::Part(0)), coeff: 1.0, param: Some(base) },
        GateSpec { kind: GateKind::Rotation(1, Target::Part(0)), coeff: 1.0, param: Some(base + 1) },
        GateSpec { kind: GateKind::Twist(Target::All), coeff: 1.0, param: Some(base + 2) },
    ];
    if adjoint {
        for g in forward.iter().rev() {
            gates.push(GateSpec { coeff: -g.coeff, ..*g });
        }
    } else {
        gates.extend_from_slice(&forward);
    }
}

/// Build the gate chains and parameter layout for a circuit family on a
/// space. Rejects mismatched space kinds.
pub fn circuit_layout(
    family: CircuitFamily,
    space: &SensorSpace,
    n_en: usize,
    n_de: usize,
) -> Result<CircuitLayout> {
    match (family, &space.kind) {
        (CircuitFamily::TwoP, SpaceKind::Partitioned { partitions }) => {
            if partitions.atom_counts.len() != 2 {
                return invalid("two-partition circuits need exactly two partitions");
            }
        }
        (CircuitFamily::OneP, SpaceKind::Symmetric { .. }) => {}
        _ => {
            return invalid(
                "circuit family does not match the space (TwoP needs Partitioned, OneP needs Symmetric)",
            )
        }
    }
    let (per_layer, extra) = match family {
        CircuitFamily::TwoP => (4usize, 2usize),
        CircuitFamily::OneP => (3, 0),
    };
    let n_params = per_layer * (n_en + n_de) + extra;
    let de_off = per_layer * n_en;

    let mut en_gates = Vec::new();
    let mut de_gates = Vec::new();
    match family {
        CircuitFamily::TwoP => {
            use std::f64::consts::FRAC_PI_2;
            en_gates.push(GateSpec {
                kind: GateKind::Rotation(1, Target::Part(1)),
                coeff: FRAC_PI_2,
                param: None,
            });
            en_gates.push(GateSpec {
                kind: GateKind::Rotation(1, Target::Part(0)),
                coeff: FRAC_PI_2,
                param: None,
            });
            for k in 0..n_en {
                push_two_p_layer(&mut en_gates, 4 * k, false);
            }
            // Decoder: deepest adjoint layer applied first, prefix rotations
            // applied last.
            for k in (0..n_de).rev() {
                push_two_p_layer(&mut de_gates, de_off + 2 + 4 * k, true);
            }
            de_gates.push(GateSpec {
                kind: GateKind::Rotation(1, Target::Part(1)),
                coeff: -1.0,
                param: Some(de_off + 1),
            });
            de_gates.push(GateSpec {
                kind: GateKind::Rotation(1, Target::Part(0)),
                coeff: 1.0,
                param: Some(de_off + 1),
            });
            de_gates.push(GateSpec {
                kind: GateKind::Rotation(0, Target::Part(1)),
                coeff: 1.0,
                param: Some(de_off),
            });
            de_gates.push(GateSpec {
                kind: GateKind::Rotation(0, Target::Part(0)),
                coeff: 1.0,
                param: Some(de_off),
            });
        }
        CircuitFamily::OneP => {
            for k in 0..n_en {
                push_one_p_layer(&mut en_gates, 3 * k, false);
            }
            for k in (0..n_de).rev() {
                push_one_p_layer(&mut de_gates, de_off + 3 * k, true);
            }
        }
    }
    Ok(CircuitLayout { family, n_en, n_de, n_params, en_gates, de_gates })
}

// ---------------------------------------------------------------------------
// Gate materialization
// ---------------------------------------------------------------------------

/// A gate as applied: dense unitary or diagonal phases.
enum GateMat {
    Dense(CMat),
    Diag(CVec),
}

impl GateMat {
    fn apply_vec(&self, v: &CVec) -> CVec {
        match self {
            GateMat::Dense(u) => u * v,
            GateMat::Diag(d) => CVec::from_fn(v.len(), |i, _| d[i] * v[i]),
        }
    }

    fn apply_vec_adj(&self, v: &CVec) -> CVec {
        match self {
            GateMat::Dense(u) => u.ad_mul(v),
            GateMat::Diag(d) => CVec::from_fn(v.len(), |i, _| d[i].conj() * v[i]),
        }
    }

    fn left_mul(&self, m: &CMat) -> CMat {
        match self {
            GateMat::Dense(u) => mul(u, Op::N, m, Op::N),
            GateMat::Diag(d) => {
                let mut out = m.clone();
                for c in 0..out.ncols() {
                    for r in 0..out.nrows() {
                        out[(r, c)] *= d[r];
                    }
                }
                out
            }
        }
    }

    fn left_mul_adj(&self, m: &CMat) -> CMat {
        match self {
            GateMat::Dense(u) => mul(u, Op::H, m, Op::N),
            GateMat::Diag(d) => {
                let mut out = m.clone();
                for c in 0..out.ncols() {
                    for r in 0..out.nrows() {
                        out[(r, c)] *= d[r].conj();
                    }
                }
                out
            }
        }
    }
}

/// The gate's Hermitian generator, as applied in gradient accumulation.
enum GenRef<'f> {
    Dense(&'f CMat),
    Diag(&'f [f64]),
}

impl GenRef<'_> {
    /// `2 coeff Im(b^H G f)` — the parameter derivative of `2 Re <b|psi>`
    /// through `exp(-i angle G)` with `angle = coeff * param`.
    fn grad_state(&self, coeff: f64, b: &CVec, f: &CVec) -> f64 {
        let z = match self {
            GenRef::Dense(g) => b.dotc(&(*g * f)),
            GenRef::Diag(q) => {
                let mut acc = I0;
                for i in 0..f.len() {
                    acc += b[i].conj() * f[i] * q[i];
                }
                acc
            }
        };
        2.0 * coeff * z.im
    }

    /// `2 coeff Im Tr{B^H G P}` — the matrix-chain analogue.
    fn grad_matrix(&self, coeff: f64, b: &CMat, p: &CMat) -> f64 {
        let z = match self {
            GenRef::Dense(g) => b.dotc(&mul(g, Op::N, p, Op::N)),
            GenRef::Diag(q) => {
                let mut acc = I0;
                for c in 0..p.ncols() {
                    for r in 0..p.nrows() {
                        acc += b[(r, c)].conj() * p[(r, c)] * q[r];
                    }
                }
                acc
            }
        };
        2.0 * coeff * z.im
    }
}

/// Per-space precomputation: small-part eigendecompositions for rotations,
/// embedded dense generators, and diagonal twist spectra.
struct GateFactory {
    n: usize,
    part_dims: Vec<usize>,
    /// Per part: eigendecompositions of the small Jx, Jy.
    rot_small: Vec<[HermEig; 2]>,
    /// Per part: embedded dense Jx, Jy on the full space.
    gen_dense: Vec<[CMat; 2]>,
    /// Per part: m value of each full-basis index.
    mz_full: Vec<Vec<f64>>,
    /// Per part: (m)^2 spectrum of the partition twist.
    twist_part: Vec<Vec<f64>>,
    /// (sum_i m_i)^2 spectrum of the collective twist.
    twist_all: Vec<f64>,
}

impl GateFactory {
    fn new(space: &SensorSpace) -> Result<Self> {
        let n = space.dim;
        let (part_dims, gen_dense): (Vec<usize>, Vec<[CMat; 2]>) = match &space.kind {
            SpaceKind::Symmetric { .. } => (
                vec![n],
                vec![[space.generators[0].clone(), space.generators[1].clone()]],
            ),
            SpaceKind::Partitioned { partitions } => (
                partitions.atom_counts.iter().map(|&c| c as usize + 1).collect(),
                space
                    .partition_generators
                    .iter()
                    .map(|g| [g[0].clone(), g[1].clone()])
                    .collect(),
            ),
            _ => return invalid("circuits run on Symmetric or Partitioned spaces"),
        };
        let k = part_dims.len();
        // Small single-part spin operators for gate exponentials.
        let rot_small: Vec<[HermEig; 2]> = part_dims
            .iter()
            .map(|&dp| {
                let ops =
                    crate::spin::build_spin_operators(crate::spin::SpinRep::new(dp as u32 - 1));
                [herm_eig(&ops[0]), herm_eig(&ops[1])]
            })
            .collect();
        // m value of every full index, per part (part 0 is the slowest).
        let mut mz_full = vec![vec![0.0; n]; k];
        for idx in 0..n {
            let mut rem = idx;
            for i in (0..k).rev() {
                let dp = part_dims[i];
                let local = rem % dp;
                rem /= dp;
                let j = (dp as f64 - 1.0) / 2.0;
                mz_full[i][idx] = local as f64 - j;
            }
        }
        let twist_part: Vec<Vec<f64>> =
            mz_full.iter().map(|ms| ms.iter().map(|m| m * m).collect()).collect();
        let twist_all: Vec<f64> = (0..n)
            .map(|idx| {
                let s: f64 = (0..k).map(|i| mz_full[i][idx]).sum();
                s * s
            })
            .collect();
        Ok(Self { n, part_dims, rot_small, gen_dense, mz_full, twist_part, twist_all })
    }

    fn twist_diag(&self, t: Target) -> &[f64] {
        match t {
            Target::Part(i) => &self.twist_part[i],
            Target::All => &self.twist_all,
        }
    }

    /// Dense embedding of a small per-part matrix.
    fn embed(&self, part: usize, small: &CMat) -> CMat {
        let pre: usize = self.part_dims[..part].iter().product();
        let post: usize = self.part_dims[part + 1..].iter().product();
        let mut m = small.clone();
        if pre > 1 {
            m = kron(&CMat::identity(pre, pre), &m);
        }
        if post > 1 {
            m = kron(&m, &CMat::identity(post, post));
        }
        m
    }

    fn build(&self, spec: &GateSpec, params: &[f64]) -> GateMat {
        let angle = spec.coeff * spec.param.map_or(1.0, |p| params[p]);
        match spec.kind {
            GateKind::Rotation(axis, Target::Part(i)) if axis < 2 => {
                let small =
                    self.rot_small[i][axis].apply_fn(|l| C64::from_polar(1.0, -angle * l));
                GateMat::Dense(self.embed(i, &small))
            }
            GateKind::Rotation(2, Target::Part(i)) => GateMat::Diag(CVec::from_fn(
                self.n,
                |r, _| C64::from_polar(1.0, -angle * self.mz_full[i][r]),
            )),
            GateKind::Rotation(..) => {
                unreachable!("collective x/y rotations are not part of the gate set")
            }
            GateKind::Twist(t) => {
                let q = self.twist_diag(t);
                GateMat::Diag(CVec::from_fn(self.n, |r, _| C64::from_polar(1.0, -angle * q[r])))
            }
        }
    }

    fn generator(&self, spec: &GateSpec) -> GenRef<'_> {
        match spec.kind {
            GateKind::Rotation(axis, Target::Part(i)) if axis < 2 => {
                GenRef::Dense(&self.gen_dense[i][axis])
            }
            GateKind::Rotation(2, Target::Part(i)) => GenRef::Diag(&self.mz_full[i]),
            GateKind::Rotation(..) => unreachable!(),
            GateKind::Twist(t) => GenRef::Diag(self.twist_diag(t)),
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter periods and layer surgery
// ---------------------------------------------------------------------------

fn gcd_u64(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Period (up to a global phase) of `theta -> exp(-i theta Q)` for the
/// combined diagonal `Q`; infinite when `Q` is constant. All spectra here
/// are quarter-integers, so the step is exact.
fn period_from_diag(q: &[f64]) -> f64 {
    let q4: Vec<i64> = q
        .iter()
        .map(|v| {
            let s = 4.0 * v;
            let r = s.round();
            debug_assert!((s - r).abs() < 1e-9, "twist spectrum is not quarter-integer");
            r as i64
        })
        .collect();
    let mut g = 0u64;
    for &v in &q4[1..] {
        g = gcd_u64(g, v.abs_diff(q4[0]));
    }
    if g == 0 {
        f64::INFINITY
    } else {
        8.0 * std::f64::consts::PI / g as f64
    }
}

/// Per-parameter periods of a layout (2 pi for rotations, spectrum-dependent
/// for twists); used by the closest-to-identity layer heuristic.
pub fn parameter_periods(layout: &CircuitLayout, space: &SensorSpace) -> Result<Vec<f64>> {
    let fac = GateFactory::new(space)?;
    let mut periods = vec![f64::INFINITY; layout.n_params];
    let mut is_rotation = vec![false; layout.n_params];
    let mut combined: Vec<Option<Vec<f64>>> = vec![None; layout.n_params];
    for g in layout.en_gates.iter().chain(&layout.de_gates) {
        let Some(p) = g.param else { continue };
        match g.kind {
            GateKind::Rotation(..) => is_rotation[p] = true,
            GateKind::Twist(t) => {
                let q = fac.twist_diag(t);
                let acc = combined[p].get_or_insert_with(|| vec![0.0; q.len()]);
                for (a, &v) in acc.iter_mut().zip(q) {
                    *a += g.coeff * v;
                }
            }
        }
    }
    for p in 0..layout.n_params {
        periods[p] = if is_rotation[p] {
            std::f64::consts::TAU
        } else if let Some(q) = &combined[p] {
            period_from_diag(q)
        } else {
            f64::INFINITY
        };
    }
    Ok(periods)
}

/// Copy parameters into a deeper layout of the same family; added layers are
/// identity-initialized, so the circuit (and its cost) is unchanged.
pub fn zero_padded_params(
    from: &CircuitLayout,
    to: &CircuitLayout,
    params: &[f64],
) -> Result<Vec<f64>> {
    if from.family != to.family || to.n_en < from.n_en || to.n_de < from.n_de {
        return invalid("target layout must extend the source layout within one family");
    }
    if params.len() != from.n_params {
        return invalid("parameter vector does not match the source layout");
    }
    let per = match from.family {
        CircuitFamily::TwoP => 4,
        CircuitFamily::OneP => 3,
    };
    let extra = to.n_params - per * (to.n_en + to.n_de);
    let mut out = vec![0.0; to.n_params];
    out[..per * from.n_en].copy_from_slice(&params[..per * from.n_en]);
    let src_de = per * from.n_en;
    let dst_de = per * to.n_en;
    out[dst_de..dst_de + extra + per * from.n_de]
        .copy_from_slice(&params[src_de..src_de + extra + per * from.n_de]);
    Ok(out)
}

/// Remove the layer whose parameters are closest to the identity (distances
/// measured modulo each gate's period). Returns the new layer counts and the
/// shortened parameter vector.
pub fn drop_closest_identity_layer(
    layout: &CircuitLayout,
    space: &SensorSpace,
    params: &[f64],
) -> Result<(usize, usize, Vec<f64>)> {
    if layout.n_en + layout.n_de == 0 {
        return invalid("no layer to remove");
    }
    if params.len() != layout.n_params {
        return invalid("parameter vector does not match the layout");
    }
    let periods = parameter_periods(layout, space)?;
    let per = match layout.family {
        CircuitFamily::TwoP => 4,
        CircuitFamily::OneP => 3,
    };
    let extra = layout.n_params - per * (layout.n_en + layout.n_de);
    let dist = |x: f64, period: f64| -> f64 {
        if period.is_finite() {
            let r = x.rem_euclid(period);
            r.min(period - r)
        } else {
            x.abs()
        }
    };
    let layer_span = |is_en: bool, k: usize| -> std::ops::Range<usize> {
        if is_en {
            per * k..per * (k + 1)
        } else {
            let base = per * layout.n_en + extra + per * k;
            base..base + per
        }
    };
    let mut best: Option<(f64, bool, usize)> = None;
    for is_en in [true, false] {
        let count = if is_en { layout.n_en } else { layout.n_de };
        for k in 0..count {
            let span = layer_span(is_en, k);
            let dev = span
                .clone()
                .map(|p| dist(params[p], periods[p]))
                .fold(0.0f64, f64::max);
            if best.map_or(true, |(b, _, _)| dev < b) {
                best = Some((dev, is_en, k));
            }
        }
    }
    let (_, is_en, k) = best.expect("at least one layer");
    let span = layer_span(is_en, k);
    let mut out = params.to_vec();
    out.drain(span);
    let (n_en, n_de) =
        if is_en { (layout.n_en - 1, layout.n_de) } else { (layout.n_en, layout.n_de - 1) };
    Ok((n_en, n_de, out))
}

// ---------------------------------------------------------------------------
// Cost and gradient engine
// ---------------------------------------------------------------------------

/// Evaluation engine binding a layout to a space and quadrature.
pub struct CircuitEngine<'a> {
    cache: &'a EncodingCache,
    layout: &'a CircuitLayout,
    fac: GateFactory,
}

impl<'a> CircuitEngine<'a> {
    pub fn new(cache: &'a EncodingCache, layout: &'a CircuitLayout) -> Result<Self> {
        let fac = GateFactory::new(&cache.space)?;
        Ok(Self { cache, layout, fac })
    }

    fn check_len(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.layout.n_params {
            return invalid(format!(
                "expected {} parameters, got {}",
                self.layout.n_params,
                params.len()
            ));
        }
        Ok(())
    }

    /// Probe state: the entangler chain applied to the lowest-weight state.
    pub fn probe(&self, params: &[f64]) -> Result<CVec> {
        self.check_len(params)?;
        let mut v = CVec::zeros(self.fac.n);
        v[0] = I1;
        for g in &self.layout.en_gates {
            v = self.fac.build(g, params).apply_vec(&v);
        }
        Ok(v)
    }

    /// Decoder unitary: readout happens in the product `Jz` basis after it.
    pub fn decoder_unitary(&self, params: &[f64]) -> Result<CMat> {
        self.check_len(params)?;
        let mut u = CMat::identity(self.fac.n, self.fac.n);
        for g in &self.layout.de_gates {
            u = self.fac.build(g, params).left_mul(&u);
        }
        Ok(u)
    }

    /// Entangler unitary (mostly for structural tests).
    pub fn entangler_unitary(&self, params: &[f64]) -> Result<CMat> {
        self.check_len(params)?;
        let mut u = CMat::identity(self.fac.n, self.fac.n);
        for g in &self.layout.en_gates {
            u = self.fac.build(g, params).left_mul(&u);
        }
        Ok(u)
    }

    /// Estimator-eliminated Bayesian cost.
    pub fn cost(&self, params: &[f64]) -> Result<f64> {
        self.check_len(params)?;
        let psi = self.probe(params)?;
        let u = self.decoder_unitary(params)?;
        let ops = self.cache.moment_maps(&density(&psi));
        let eval = readout_eval(&u, &ops, self.cache.quad.variance(), DEFAULT_ESTIMATOR_CAP);
        Ok(eval.value)
    }

    /// Cost plus the exact gradient with respect to every parameter.
    pub fn cost_and_grad(&self, params: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.check_len(params)?;
        assert_eq!(grad.len(), self.layout.n_params);
        grad.fill(0.0);
        let n = self.fac.n;
        let cap = DEFAULT_ESTIMATOR_CAP;

        // Forward passes, keeping every intermediate.
        let en_mats: Vec<GateMat> =
            self.layout.en_gates.iter().map(|g| self.fac.build(g, params)).collect();
        let mut states = Vec::with_capacity(en_mats.len() + 1);
        let mut v = CVec::zeros(n);
        v[0] = I1;
        states.push(v);
        for m in &en_mats {
            let next = m.apply_vec(states.last().unwrap());
            states.push(next);
        }
        let psi = states.last().unwrap().clone();

        let de_mats: Vec<GateMat> =
            self.layout.de_gates.iter().map(|g| self.fac.build(g, params)).collect();
        let mut prods = Vec::with_capacity(de_mats.len() + 1);
        prods.push(CMat::identity(n, n));
        for m in &de_mats {
            let next = m.left_mul(prods.last().unwrap());
            prods.push(next);
        }
        let u_de = prods.last().unwrap().clone();

        let ops = self.cache.moment_maps(&density(&psi));
        let ReadoutEval { value, kmat, moments } =
            readout_eval(&u_de, &ops, self.cache.quad.variance(), cap);

        // Decoder chain, reverse pass: dC = 2 Re Tr{K^H dU}.
        let mut b = kmat;
        for (g, spec) in self.layout.de_gates.iter().enumerate().rev() {
            if spec.param.is_some() {
                let gen = self.fac.generator(spec);
                grad[spec.param.unwrap()] += gen.grad_matrix(spec.coeff, &b, &prods[g + 1]);
            }
            b = de_mats[g].left_mul_adj(&b);
        }

        // Probe chain, reverse pass through the state-update operator: at
        // the eliminated estimators, dC = 2 Re <chi| d psi> with
        // chi = Upsilon psi.
        let est = mmse_estimators(&moments, cap);
        let meas = Measurement::Projective(ProjectiveDecoder { u: u_de });
        let ups = upsilon(self.cache, &meas, &est);
        let mut bv: CVec = &ups * &psi;
        for (g, spec) in self.layout.en_gates.iter().enumerate().rev() {
            if spec.param.is_some() {
                let gen = self.fac.generator(spec);
                grad[spec.param.unwrap()] += gen.grad_state(spec.coeff, &bv, &states[g + 1]);
            }
            bv = en_mats[g].apply_vec_adj(&bv);
        }
        Ok(value)
    }
}

/// One-shot cost and gradient (builds a fresh engine).
pub fn variational_cost_and_gradient(
    cache: &EncodingCache,
    layout: &CircuitLayout,
    params: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let engine = CircuitEngine::new(cache, layout)?;
    let mut grad = vec![0.0; layout.n_params];
    let value = engine.cost_and_grad(params, &mut grad)?;
    Ok((value, grad))
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct VariationalOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Warm-start parameter vectors; vector `i` replaces restart `i`.
    pub warm: Vec<Vec<f64>>,
}

impl Default for VariationalOptions {
    fn default() -> Self {
        Self { restarts: 32, max_iters: 400, seed: 1, warm: Vec::new() }
    }
}

/// Multistart quasi-Newton minimization of the circuit cost. Returns the
/// best solution record and its raw parameters (reusable as warm starts for
/// neighboring settings or deeper circuits).
pub fn optimize_variational_with_params(
    cache: &EncodingCache,
    layout: &CircuitLayout,
    opts: &VariationalOptions,
) -> Result<(SensorSolution, Vec<f64>)> {
    if opts.restarts == 0 {
        return invalid("need at least one restart");
    }
    for w in &opts.warm {
        if w.len() != layout.n_params {
            return invalid("warm-start parameter vector does not match the layout");
        }
    }
    let engine = CircuitEngine::new(cache, layout)?;
    let lopts = LbfgsOptions {
        memory: 10,
        max_iters: opts.max_iters,
        grad_tol: 1e-9,
        f_tol: 1e-14,
        max_line_steps: 40,
    };
    let run_restart = |r: usize| -> (f64, Vec<f64>, bool, usize) {
        let x0: Vec<f64> = if r < opts.warm.len() {
            opts.warm[r].clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(opts.seed, r as u64));
            (0..layout.n_params).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let res = lbfgs(x0, &lopts, |x, g| {
            engine.cost_and_grad(x, g).expect("parameter length fixed by construction")
        });
        (res.f, res.x, res.converged, res.iterations)
    };
    let runs: Vec<(usize, (f64, Vec<f64>, bool, usize))> = if opts.restarts == 1 {
        vec![(0, run_restart(0))]
    } else {
        (0..opts.restarts).into_par_iter().map(|r| (r, run_restart(r))).collect()
    };
    let per_restart: Vec<f64> = runs.iter().map(|(_, r)| r.0).collect();
    let (best_restart, (_, x, converged, iterations)) = runs
        .into_iter()
        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.0.cmp(&b.0)))
        .expect("at least one restart");

    // Definitive evaluation through the generic cost path.
    let mut psi = engine.probe(&x)?;
    gauge_phase(&mut psi);
    let u = engine.decoder_unitary(&x)?;
    let meas = Measurement::Projective(ProjectiveDecoder { u });
    let om = crate::cost::outcome_moments(&meas, &cache.moment_maps(&density(&psi)));
    let est = mmse_estimators(&om, DEFAULT_ESTIMATOR_CAP);
    let c = cost(cache, &density(&psi), &meas, &est)?;

    let sensor = match layout.family {
        CircuitFamily::OneP => "variational-1p",
        CircuitFamily::TwoP => "variational-2p",
    };
    let sol = SensorSolution {
        sensor: sensor.to_string(),
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
            converged,
            iterations,
            restarts: opts.restarts,
            best_restart,
            message: Some(format!(
                "final costs per restart: [{}]",
                per_restart.iter().map(|c| format!("{c:.6e}")).collect::<Vec<_>>().join(", ")
            )),
        },
    };
    Ok((sol, x))
}

/// See [`optimize_variational_with_params`].
pub fn optimize_variational(
    cache: &EncodingCache,
    layout: &CircuitLayout,
    opts: &VariationalOptions,
) -> Result<SensorSolution> {
    optimize_variational_with_params(cache, layout, opts).map(|(s, _)| s)
}
