//! Phase encoding `U(phi) = exp(-i phi . J)` and prior-averaged moment maps.
//!
//! Every Bayesian quantity in this crate reduces to the two linear maps
//!
//! ```text
//! L0[rho]    = sum_k w_k U(phi_k) rho U(phi_k)^H            (phase average)
//! L1_nu[rho] = sum_k w_k phi_k^nu U(phi_k) rho U(phi_k)^H   (first moments)
//! ```
//!
//! and their adjoints, with `(phi_k, w_k)` a quadrature for the prior.
//! [`EncodingCache`] precomputes per (space, quadrature) whichever
//! representation is cheapest:
//!
//! * `Super`: the full superoperator matrices (dim^2 x dim^2) for small
//!   spaces - map application is a single matrix-vector product, and the
//!   adjoint map is the conjugate transpose for free;
//! * `Nodes`: cached node unitaries, sandwich products per node;
//! * `Euler`: only ZYZ Euler angles per node, rebuilding each unitary from
//!   one cached eigendecomposition of Jy - slowest per node but O(1) memory,
//!   used when the node-unitary cache would not fit.
//!
//! All node loops accumulate over fixed-size chunks that are reduced in
//! chunk order, so results are bit-identical regardless of thread count.

use crate::error::{invalid, Result};
use crate::linalg::{gemm, herm_eig, mul, CMat, CVec, Op, C64, I0, I1};
use crate::prior::{build_quadrature, Prior, Quadrature};
use crate::spin::SensorSpace;
use rayon::prelude::*;
use std::sync::Arc;

/// Phase-encoding unitary by eigendecomposition of the Hermitian `phi . J`.
///
/// `phi` takes 1 to 3 components (x, y[, z]); the result is unitary to
/// better than 1e-12.
pub fn encode(space: &SensorSpace, phi: &[f64]) -> Result<CMat> {
    if phi.iter().any(|p| !p.is_finite()) {
        return invalid("phase vector must be finite");
    }
    let h = space.field_generator(phi)?;
    Ok(herm_eig(&h).apply_fn(|l| C64::from_polar(1.0, -l)))
}

/// ZYZ Euler angles (alpha, beta, gamma) with
/// `exp(-i phi . J) = exp(-i alpha Jz) exp(-i beta Jy) exp(-i gamma Jz)`
/// for every spin representation, extracted from the SU(2) element.
pub fn su2_euler_zyz(phi: &[f64; 3]) -> [f64; 3] {
    let theta = (phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2]).sqrt();
    if theta < 1e-300 {
        return [0.0, 0.0, 0.0];
    }
    let (nx, ny, nz) = (phi[0] / theta, phi[1] / theta, phi[2] / theta);
    let c = (theta / 2.0).cos();
    let s = (theta / 2.0).sin();
    // u = cos(theta/2) 1 - i sin(theta/2) n.sigma in the spin-1/2 irrep.
    let u00 = C64::new(c, -s * nz);
    let u10 = C64::new(s * ny, -s * nx);
    let cb = u00.norm();
    let sb = u10.norm();
    let beta = 2.0 * sb.atan2(cb);
    if sb <= 1e-14 {
        return [-2.0 * u00.arg(), beta, 0.0];
    }
    if cb <= 1e-14 {
        return [2.0 * u10.arg(), beta, 0.0];
    }
    let sum = -u00.arg(); // (alpha + gamma)/2
    let dif = u10.arg(); // (alpha - gamma)/2
    [sum + dif, beta, sum - dif]
}

/// Per-space data to rebuild any `U(phi)` from Euler angles: the exact
/// (doubled) Jz eigenvalues and one eigendecomposition of Jy.
#[derive(Clone, Debug)]
pub struct StateEncoder {
    two_m: Vec<i64>,
    vy: CMat,
    ly: Vec<f64>,
}

impl StateEncoder {
    pub fn new(space: &SensorSpace) -> Self {
        let eig = herm_eig(space.jy());
        Self { two_m: space.two_m_of_basis(), vy: eig.vecs, ly: eig.vals }
    }

    fn z_phases(&self, angle: f64) -> Vec<C64> {
        self.two_m.iter().map(|&tm| C64::from_polar(1.0, -angle * tm as f64 / 2.0)).collect()
    }

    /// Dense `U(phi)` from the three Euler rotations (two products).
    pub fn unitary(&self, phi: &[f64; 3]) -> CMat {
        let [alpha, beta, gamma] = su2_euler_zyz(phi);
        let n = self.two_m.len();
        // W = Vy exp(-i beta Ly) Vy^H
        let mut scaled = self.vy.clone();
        for (j, &l) in self.ly.iter().enumerate() {
            let f = C64::from_polar(1.0, -beta * l);
            for i in 0..n {
                scaled[(i, j)] *= f;
            }
        }
        let mut u = mul(&scaled, Op::N, &self.vy, Op::H);
        let za = self.z_phases(alpha);
        let zg = self.z_phases(gamma);
        for c in 0..n {
            for r in 0..n {
                u[(r, c)] *= za[r] * zg[c];
            }
        }
        u
    }

    /// `U(phi) psi` in O(dim^2) (no dense unitary is formed).
    pub fn apply(&self, phi: &[f64; 3], psi: &CVec) -> CVec {
        let [alpha, beta, gamma] = su2_euler_zyz(phi);
        let n = psi.len();
        let zg = self.z_phases(gamma);
        let mut v = CVec::from_fn(n, |i, _| psi[i] * zg[i]);
        let mut t = CVec::zeros(n);
        // t = Vy^H v
        for j in 0..n {
            let mut acc = I0;
            for i in 0..n {
                acc += self.vy[(i, j)].conj() * v[i];
            }
            t[j] = acc * C64::from_polar(1.0, -beta * self.ly[j]);
        }
        // v = Vy t
        for i in 0..n {
            let mut acc = I0;
            for j in 0..n {
                acc += self.vy[(i, j)] * t[j];
            }
            v[i] = acc;
        }
        let za = self.z_phases(alpha);
        for i in 0..n {
            v[i] *= za[i];
        }
        v
    }
}

/// First two prior moments of the encoded state:
/// `l0 = L0[rho]`, `l1[nu] = L1_nu[rho]` for nu = x, y[, z].
#[derive(Clone, Debug)]
pub struct MomentOperators {
    pub l0: CMat,
    pub l1: Vec<CMat>,
}

const SUPEROP_MAX_DIM: usize = 32;
const NODE_CACHE_MAX_BYTES: usize = 256 << 20;
const CHUNK: usize = 64;

enum Mode {
    Super { s0: CMat, s1: Vec<CMat> },
    Nodes { us: Vec<CMat> },
    Euler,
}

/// Precomputed phase-averaging maps for one (space, prior, quadrature order).
pub struct EncodingCache {
    pub space: Arc<SensorSpace>,
    pub prior: Prior,
    pub quad: Quadrature,
    pub encoder: StateEncoder,
    mode: Mode,
}

impl EncodingCache {
    /// Build with the prior's default order.
    pub fn new(space: Arc<SensorSpace>, prior: Prior) -> Result<Self> {
        let order = prior.default_order();
        Self::with_order(space, prior, order)
    }

    pub fn with_order(space: Arc<SensorSpace>, prior: Prior, order: usize) -> Result<Self> {
        let quad = build_quadrature(&prior, order)?;
        Self::with_quadrature(space, prior, quad)
    }

    /// Build from an explicit quadrature (e.g. a polar grid for wide d = 2
    /// priors, where tensor Gauss-Hermite would need very high orders).
    pub fn with_quadrature(space: Arc<SensorSpace>, prior: Prior, quad: Quadrature) -> Result<Self> {
        if quad.d != prior.d {
            return crate::error::invalid("quadrature dimension does not match the prior");
        }
        let encoder = StateEncoder::new(&space);
        let n = space.dim;
        let n_nodes = quad.len();
        let mode = if n <= SUPEROP_MAX_DIM {
            build_superops(&encoder, &quad, n, prior.d)
        } else if n_nodes * n * n * 16 <= NODE_CACHE_MAX_BYTES {
            let us: Vec<CMat> = quad.nodes.iter().map(|p| encoder.unitary(p)).collect();
            Mode::Nodes { us }
        } else {
            Mode::Euler
        };
        Ok(Self { space, prior, quad, encoder, mode })
    }

    pub fn dim(&self) -> usize {
        self.space.dim
    }

    /// Number of field components being estimated.
    pub fn d(&self) -> usize {
        self.prior.d
    }

    /// Total prior variance (the cost of estimating with zero information).
    pub fn prior_variance(&self) -> f64 {
        self.prior.variance()
    }

    /// Node unitary `U(phi_k)`; rebuilt on demand outside `Nodes` mode.
    pub fn node_unitary(&self, k: usize) -> CMat {
        match &self.mode {
            Mode::Nodes { us } => us[k].clone(),
            _ => self.encoder.unitary(&self.quad.nodes[k]),
        }
    }

    /// Forward moments `L0[rho]`, `L1_nu[rho]` of a density operator.
    pub fn moment_maps(&self, rho: &CMat) -> MomentOperators {
        match &self.mode {
            Mode::Super { s0, s1 } => {
                let v = crate::linalg::vec_mat(rho);
                let l0 = apply_superop(s0, &v, Op::N, self.dim());
                let l1 = s1.iter().map(|s| apply_superop(s, &v, Op::N, self.dim())).collect();
                MomentOperators { l0, l1 }
            }
            _ => {
                let (l0, l1) = self.node_sum(|u| crate::linalg::sandwich(u, rho));
                MomentOperators { l0, l1 }
            }
        }
    }

    /// Adjoint moments `L0#[m]`, `L1_nu#[m]` of a measurement operator.
    pub fn adjoint_moment_maps(&self, m: &CMat) -> MomentOperators {
        match &self.mode {
            Mode::Super { s0, s1 } => {
                let v = crate::linalg::vec_mat(m);
                let l0 = apply_superop(s0, &v, Op::H, self.dim());
                let l1 = s1.iter().map(|s| apply_superop(s, &v, Op::H, self.dim())).collect();
                MomentOperators { l0, l1 }
            }
            _ => {
                let (l0, l1) = self.node_sum(|u| crate::linalg::sandwich_rev(u, m));
                MomentOperators { l0, l1 }
            }
        }
    }

    /// `L0#[c0] + sum_nu L1_nu#[c1[nu]]` in one pass; the workhorse for
    /// assembling state-update operators without per-outcome map calls.
    pub fn adjoint_mix(&self, c0: &CMat, c1: &[CMat]) -> CMat {
        assert_eq!(c1.len(), self.d());
        let n = self.dim();
        match &self.mode {
            Mode::Super { s0, s1 } => {
                let mut acc = apply_superop_vec(s0, &crate::linalg::vec_mat(c0), Op::H);
                let mut t = CVec::zeros(n * n);
                for (s, c) in s1.iter().zip(c1) {
                    gemm_vec(&mut t, s, &crate::linalg::vec_mat(c), Op::H);
                    acc += &t;
                }
                crate::linalg::unvec_mat(&acc, n)
            }
            _ => {
                let quad = &self.quad;
                let partials: Vec<CMat> = chunk_starts(quad.len())
                    .into_par_iter()
                    .map(|start| {
                        let end = (start + CHUNK).min(quad.len());
                        let mut acc = CMat::zeros(n, n);
                        let mut combo = CMat::zeros(n, n);
                        for k in start..end {
                            let w = quad.weights[k];
                            let phi = quad.nodes[k];
                            combo.copy_from(c0);
                            for (nu, c) in c1.iter().enumerate() {
                                if phi[nu] != 0.0 {
                                    combo += c.scale(phi[nu]);
                                }
                            }
                            let t = self
                                .with_node_unitary(k, |u| crate::linalg::sandwich_rev(u, &combo));
                            acc += t.scale(w);
                        }
                        acc
                    })
                    .collect();
                let mut out = CMat::zeros(n, n);
                for p in partials {
                    out += p;
                }
                out
            }
        }
    }

    fn with_node_unitary<R>(&self, k: usize, f: impl FnOnce(&CMat) -> R) -> R {
        match &self.mode {
            Mode::Nodes { us } => f(&us[k]),
            _ => f(&self.encoder.unitary(&self.quad.nodes[k])),
        }
    }

    /// Chunked deterministic accumulation of `w_k f(U_k)` and its
    /// first-moment (`phi`-weighted) companions.
    fn node_sum(&self, f: impl Fn(&CMat) -> CMat + Sync) -> (CMat, Vec<CMat>) {
        let n = self.dim();
        let d = self.d();
        let quad = &self.quad;
        let partials: Vec<(CMat, Vec<CMat>)> = chunk_starts(quad.len())
            .into_par_iter()
            .map(|start| {
                let end = (start + CHUNK).min(quad.len());
                let mut l0 = CMat::zeros(n, n);
                let mut l1 = vec![CMat::zeros(n, n); d];
                for k in start..end {
                    let t = self.with_node_unitary(k, &f);
                    let w = quad.weights[k];
                    let phi = quad.nodes[k];
                    l0 += t.scale(w);
                    for nu in 0..d {
                        if phi[nu] != 0.0 {
                            l1[nu] += t.scale(w * phi[nu]);
                        }
                    }
                }
                (l0, l1)
            })
            .collect();
        let mut l0 = CMat::zeros(n, n);
        let mut l1 = vec![CMat::zeros(n, n); d];
        for (p0, p1) in partials {
            l0 += p0;
            for (acc, p) in l1.iter_mut().zip(p1) {
                *acc += p;
            }
        }
        (l0, l1)
    }
}

fn chunk_starts(total: usize) -> Vec<usize> {
    (0..total).step_by(CHUNK).collect()
}

fn gemm_vec(out: &mut CVec, s: &CMat, v: &CVec, op: Op) {
    // out = op(S) v, with the vector treated as an (n^2 x 1) matrix.
    // zgemm cannot conjugate, so the adjoint is computed through
    // S^H v = conj(S^T conj(v)): both conjugations touch only vectors.
    let n2 = v.len();
    assert_eq!(out.len(), n2);
    assert_eq!(s.nrows(), n2);
    assert_eq!(s.ncols(), n2);
    // Op::N multiplies S with standard strides; Op::H multiplies S^T (via
    // swapped strides) against conj(v), then conjugates the result.
    let conj_v = match op {
        Op::N => None,
        Op::H => Some(v.conjugate()),
    };
    let (pv, rs_s, cs_s) = match &conj_v {
        None => (v.as_slice().as_ptr(), 1isize, n2 as isize),
        Some(vc) => (vc.as_slice().as_ptr(), n2 as isize, 1isize),
    };
    unsafe {
        use matrixmultiply::CGemmOption::Standard;
        matrixmultiply::zgemm(
            Standard,
            Standard,
            n2,
            n2,
            1,
            [1.0, 0.0],
            s.as_slice().as_ptr() as *const [f64; 2],
            rs_s,
            cs_s,
            pv as *const [f64; 2],
            1,
            n2 as isize,
            [0.0, 0.0],
            out.as_mut_slice().as_mut_ptr() as *mut [f64; 2],
            1,
            n2 as isize,
        );
    }
    if matches!(op, Op::H) {
        for z in out.iter_mut() {
            *z = z.conj();
        }
    }
}

fn apply_superop_vec(s: &CMat, v: &CVec, op: Op) -> CVec {
    let mut out = CVec::zeros(v.len());
    gemm_vec(&mut out, s, v, op);
    out
}

fn apply_superop(s: &CMat, v: &CVec, op: Op, n: usize) -> CMat {
    crate::linalg::unvec_mat(&apply_superop_vec(s, v, op), n)
}

/// Assemble the superoperators `S0 = sum_k w_k conj(U_k) (x) U_k` and
/// `S1_nu` (extra `phi_k^nu` weight) through a Gram-matrix product over the
/// stacked vectorized unitaries, then reshuffle indices into map layout.
fn build_superops(encoder: &StateEncoder, quad: &Quadrature, n: usize, d: usize) -> Mode {
    let n2 = n * n;
    let n_nodes = quad.len();
    // Gram accumulators: G[a2, a1] = sum_k conj(X[k,a2]) X[k,a1] (+ moments).
    let mut g0 = CMat::zeros(n2, n2);
    let mut g1 = vec![CMat::zeros(n2, n2); d];
    let block = 512usize;
    let mut x = CMat::zeros(block, n2);
    let mut y = CMat::zeros(block, n2);
    let mut start = 0usize;
    while start < n_nodes {
        let end = (start + block).min(n_nodes);
        let rows = end - start;
        // Stack sqrt(w_k) vec(U_k) as rows.
        let us: Vec<CMat> = (start..end)
            .into_par_iter()
            .map(|k| encoder.unitary(&quad.nodes[k]))
            .collect();
        for (r, u) in us.iter().enumerate() {
            let sw = quad.weights[start + r].sqrt();
            let src = u.as_slice();
            for a in 0..n2 {
                x[(r, a)] = src[a] * C64::new(sw, 0.0);
            }
        }
        let xs = x.rows(0, rows).into_owned();
        gemm(&mut g0, I1, &xs, Op::H, &xs, Op::N, I1);
        for nu in 0..d {
            for r in 0..rows {
                let p = C64::new(quad.nodes[start + r][nu], 0.0);
                for a in 0..n2 {
                    y[(r, a)] = x[(r, a)] * p;
                }
            }
            let ys = y.rows(0, rows).into_owned();
            gemm(&mut g1[nu], I1, &xs, Op::H, &ys, Op::N, I1);
        }
        start = end;
    }
    // Reshuffle: S[c_out*n + r_out, c_in*n + r_in] = G[c_out + n*c_in, r_out + n*r_in].
    let reshuffle = |g: &CMat| -> CMat {
        let mut s = CMat::zeros(n2, n2);
        for c_in in 0..n {
            for r_in in 0..n {
                for c_out in 0..n {
                    for r_out in 0..n {
                        s[(c_out * n + r_out, c_in * n + r_in)] =
                            g[(c_out + n * c_in, r_out + n * r_in)];
                    }
                }
            }
        }
        s
    };
    let s0 = reshuffle(&g0);
    let s1 = g1.iter().map(reshuffle).collect();
    Mode::Super { s0, s1 }
}
