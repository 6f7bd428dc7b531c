//! Dense complex linear algebra shared by every solver.
//!
//! Matrices are `nalgebra::DMatrix<Complex64>` (column-major). Hot products
//! go through `matrixmultiply::zgemm`, which is several times faster than the
//! generic nalgebra path for complex scalars; eigendecompositions use
//! nalgebra's Hermitian solver with eigenvalues sorted ascending so that
//! "lowest eigenvector" is deterministic.

use crate::error::{invalid, Result};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const I1: C64 = C64::new(1.0, 0.0);
pub const I0: C64 = C64::new(0.0, 0.0);

/// How an operand enters a product: as-is or conjugate-transposed.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Op {
    N,
    H,
}

fn dims(a: &CMat, op: Op) -> (usize, usize) {
    match op {
        Op::N => (a.nrows(), a.ncols()),
        Op::H => (a.ncols(), a.nrows()),
    }
}

/// `c = alpha * op_a(a) * op_b(b) + beta * c` via `zgemm`.
///
/// `zgemm` takes arbitrary strides but cannot conjugate, so an adjoint
/// operand is materialized as an elementwise-conjugated copy (O(n^2), cheap
/// next to the O(n^3) product) and addressed with transposed strides.
/// Panics on shape mismatch.
pub fn gemm(c: &mut CMat, alpha: C64, a: &CMat, opa: Op, b: &CMat, opb: Op, beta: C64) {
    let (m, ka) = dims(a, opa);
    let (kb, n) = dims(b, opb);
    assert_eq!(ka, kb, "gemm: inner dimensions differ");
    assert_eq!((c.nrows(), c.ncols()), (m, n), "gemm: output shape mismatch");
    if m == 0 || n == 0 || ka == 0 {
        return;
    }
    use matrixmultiply::CGemmOption::Standard;
    let conj_a = match opa {
        Op::N => None,
        Op::H => Some(a.conjugate()),
    };
    let conj_b = match opb {
        Op::N => None,
        Op::H => Some(b.conjugate()),
    };
    let (pa, rsa, csa) = match &conj_a {
        None => (a.as_slice().as_ptr(), 1isize, a.nrows() as isize),
        Some(ac) => (ac.as_slice().as_ptr(), a.nrows() as isize, 1isize),
    };
    let (pb, rsb, csb) = match &conj_b {
        None => (b.as_slice().as_ptr(), 1isize, b.nrows() as isize),
        Some(bc) => (bc.as_slice().as_ptr(), b.nrows() as isize, 1isize),
    };
    unsafe {
        matrixmultiply::zgemm(
            Standard,
            Standard,
            m,
            ka,
            n,
            [alpha.re, alpha.im],
            pa as *const [f64; 2],
            rsa,
            csa,
            pb as *const [f64; 2],
            rsb,
            csb,
            [beta.re, beta.im],
            c.as_mut_slice().as_mut_ptr() as *mut [f64; 2],
            1,
            m as isize,
        );
    }
}

/// `op_a(a) * op_b(b)` into a fresh matrix.
pub fn mul(a: &CMat, opa: Op, b: &CMat, opb: Op) -> CMat {
    let (m, _) = dims(a, opa);
    let (_, n) = dims(b, opb);
    let mut c = CMat::zeros(m, n);
    gemm(&mut c, I1, a, opa, b, opb, I0);
    c
}

/// `u * x * u^H` (two products, one temporary).
pub fn sandwich(u: &CMat, x: &CMat) -> CMat {
    let t = mul(u, Op::N, x, Op::N);
    mul(&t, Op::N, u, Op::H)
}

/// `u^H * x * u`.
pub fn sandwich_rev(u: &CMat, x: &CMat) -> CMat {
    let t = mul(u, Op::H, x, Op::N);
    mul(&t, Op::N, u, Op::N)
}

/// Tr(a b) in O(n^2).
pub fn trace_prod(a: &CMat, b: &CMat) -> C64 {
    assert_eq!(a.ncols(), b.nrows());
    assert_eq!(b.ncols(), a.nrows());
    let mut s = I0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            s += a[(i, k)] * b[(k, i)];
        }
    }
    s
}

/// Tr(a b) for a Hermitian pair; the exact imaginary part cancels, so only
/// the real part is accumulated.
pub fn trace_prod_herm(a: &CMat, b: &CMat) -> f64 {
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            let x = a[(i, k)];
            let y = b[(k, i)];
            s += x.re * y.re - x.im * y.im;
        }
    }
    s
}

/// `<v| m |v>` for Hermitian `m` (real by construction).
pub fn expectation(m: &CMat, v: &CVec) -> f64 {
    let mv = m * v;
    v.dotc(&mv).re
}

/// Rank-one density operator `|psi><psi|`.
pub fn density(psi: &CVec) -> CMat {
    let n = psi.len();
    CMat::from_fn(n, n, |r, c| psi[r] * psi[c].conj())
}

/// Hermitian part `(a + a^H)/2`.
pub fn hermitize(a: &CMat) -> CMat {
    (a + a.adjoint()).scale(0.5)
}

pub fn max_abs(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Max-norm distance from the identity.
pub fn dist_from_identity(a: &CMat) -> f64 {
    let n = a.nrows();
    let mut d: f64 = 0.0;
    for j in 0..n {
        for i in 0..n {
            let t = if i == j { a[(i, j)] - I1 } else { a[(i, j)] };
            d = d.max(t.norm());
        }
    }
    d
}

pub fn is_hermitian(a: &CMat, tol: f64) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    for j in 0..a.ncols() {
        for i in 0..=j {
            if (a[(i, j)] - a[(j, i)].conj()).norm() > tol {
                return false;
            }
        }
    }
    true
}

/// Kronecker product, row-major index convention: `(ab)[(i1*n2+i2, j1*m2+j2)] = a[(i1,j1)] b[(i2,j2)]`.
pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = CMat::zeros(ar * br, ac * bc);
    for j1 in 0..ac {
        for i1 in 0..ar {
            let f = a[(i1, j1)];
            if f == I0 {
                continue;
            }
            for j2 in 0..bc {
                for i2 in 0..br {
                    out[(i1 * br + i2, j1 * bc + j2)] = f * b[(i2, j2)];
                }
            }
        }
    }
    out
}

/// Eigendecomposition of a Hermitian matrix with eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct HermEig {
    /// Eigenvalues, ascending.
    pub vals: Vec<f64>,
    /// Matching eigenvectors as columns.
    pub vecs: CMat,
}

/// Decompose a Hermitian matrix; columns are orthonormal, eigenvalues real
/// ascending (ties keep the solver's column order, which is deterministic
/// for identical input bytes).
pub fn herm_eig(a: &CMat) -> HermEig {
    assert_eq!(a.nrows(), a.ncols(), "herm_eig: square input required");
    let n = a.nrows();
    if n == 0 {
        return HermEig { vals: vec![], vecs: CMat::zeros(0, 0) };
    }
    let se = a.clone().symmetric_eigen();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| se.eigenvalues[i].partial_cmp(&se.eigenvalues[j]).unwrap().then(i.cmp(&j)));
    let vals: Vec<f64> = idx.iter().map(|&i| se.eigenvalues[i]).collect();
    let mut vecs = CMat::zeros(n, n);
    for (c, &i) in idx.iter().enumerate() {
        vecs.set_column(c, &se.eigenvectors.column(i));
    }
    HermEig { vals, vecs }
}

impl HermEig {
    /// Rebuild `V f(Lambda) V^H`.
    pub fn apply_fn(&self, f: impl Fn(f64) -> C64) -> CMat {
        let n = self.vals.len();
        let mut scaled = CMat::zeros(n, n);
        for (j, &l) in self.vals.iter().enumerate() {
            let fj = f(l);
            for i in 0..n {
                scaled[(i, j)] = self.vecs[(i, j)] * fj;
            }
        }
        mul(&scaled, Op::N, &self.vecs, Op::H)
    }
}

/// `exp(-i h)` for Hermitian `h`.
pub fn exp_neg_i_h(h: &CMat) -> CMat {
    herm_eig(h).apply_fn(|l| C64::from_polar(1.0, -l))
}

/// Inverse square root of a positive definite Hermitian matrix; eigenvalues
/// below `floor` are clamped to keep the result finite.
pub fn inv_sqrt_psd(a: &CMat, floor: f64) -> CMat {
    herm_eig(a).apply_fn(|l| C64::new(1.0 / l.max(floor).sqrt(), 0.0))
}

/// Divided-difference kernel of `h -> exp(-i h)` at the decomposed point:
/// `D_ij = (e^{-i a} - e^{-i b}) / (a - b)` for eigenvalues `a, b`, written
/// in the numerically stable `-i e^{-i(a+b)/2} sinc((a-b)/2)` form. The
/// Fréchet derivative in direction `dh` is `V (D .* (V^H dh V)) V^H`.
pub fn frechet_exp_kernel(eig: &HermEig) -> CMat {
    let n = eig.vals.len();
    CMat::from_fn(n, n, |i, j| {
        let half = 0.5 * (eig.vals[i] - eig.vals[j]);
        let sinc = if half.abs() < 1e-8 { 1.0 - half * half / 6.0 } else { half.sin() / half };
        let mid = 0.5 * (eig.vals[i] + eig.vals[j]);
        C64::new(0.0, -1.0) * C64::from_polar(sinc, -mid)
    })
}

/// Directional (Fréchet) derivative of `h -> exp(-i h)` at the decomposed
/// point, in direction `dh`.
pub fn frechet_exp_neg_i(eig: &HermEig, dh: &CMat) -> CMat {
    let kernel = frechet_exp_kernel(eig);
    let mut inner = sandwich_rev(&eig.vecs, dh);
    inner.component_mul_assign(&kernel);
    sandwich(&eig.vecs, &inner)
}

/// Principal Hermitian logarithm of a unitary: returns `h` with
/// `exp(-i h) = u` and eigenvalues of `h` in `(-pi, pi]`. Works by
/// diagonalizing a random Hermitian combination of `u` and `u^H`, whose
/// eigenbasis diagonalizes the normal matrix `u` itself.
pub fn hermitian_log_unitary(u: &CMat) -> Result<CMat> {
    let n = u.nrows();
    if u.ncols() != n {
        return invalid("logarithm needs a square matrix");
    }
    // Deterministic "generic" mixing coefficients; retried on the (measure
    // zero, up to eigenvalue collisions) failure to separate eigenspaces.
    for &c in &[0.734_061_2, 1.618_033_9, 0.318_309_9, 2.506_628_3] {
        let mut a = CMat::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                let re = 0.5 * (u[(i, j)] + u[(j, i)].conj());
                let im = C64::new(0.0, -0.5) * (u[(i, j)] - u[(j, i)].conj());
                a[(i, j)] = re + im * c;
            }
        }
        let eig = herm_eig(&a);
        let d = sandwich_rev(&eig.vecs, u);
        let mut off = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                if i != j {
                    off = off.max(d[(i, j)].norm());
                }
            }
        }
        if off < 1e-10 {
            let mut h = CMat::zeros(n, n);
            for (k, col) in eig.vecs.column_iter().enumerate() {
                let theta = -d[(k, k)].arg();
                for j in 0..n {
                    for i in 0..n {
                        h[(i, j)] += col[i] * col[j].conj() * theta;
                    }
                }
            }
            return Ok(hermitize(&h));
        }
    }
    invalid("matrix is not unitary (or eigenbasis separation failed)")
}

/// Fix the global phase of a state vector: the largest-magnitude component
/// becomes real positive. Makes serialized states reproducible.
pub fn gauge_phase(v: &mut CVec) {
    let mut best = 0usize;
    let mut mag = -1.0;
    for (i, z) in v.iter().enumerate() {
        let m = z.norm();
        if m > mag + 1e-15 {
            mag = m;
            best = i;
        }
    }
    if mag <= 0.0 {
        return;
    }
    let phase = v[best] / C64::new(mag, 0.0);
    let correction = phase.conj();
    for z in v.iter_mut() {
        *z *= correction;
    }
}

/// Column-major vectorization, matching `vec(A X B) = (B^T (x) A) vec(X)`.
pub fn vec_mat(x: &CMat) -> CVec {
    CVec::from_column_slice(x.as_slice())
}

/// Inverse of [`vec_mat`] for an `n x n` matrix.
pub fn unvec_mat(v: &CVec, n: usize) -> CMat {
    assert_eq!(v.len(), n * n);
    CMat::from_column_slice(n, n, v.as_slice())
}

/// Seedable random structures used by solver multistarts.
pub mod random {
    use super::{CMat, CVec, C64};
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Haar-random pure state: normalized vector of iid complex Gaussians.
    pub fn haar_state<R: Rng>(rng: &mut R, dim: usize) -> CVec {
        let mut v = CVec::from_fn(dim, |_, _| {
            C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        });
        let n = v.norm();
        v /= C64::new(n, 0.0);
        v
    }

    /// Ginibre rectangle: iid complex Gaussian entries.
    pub fn ginibre<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> CMat {
        CMat::from_fn(rows, cols, |_, _| {
            C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        })
    }

    /// Random Hermitian matrix with O(1) spectral radius.
    pub fn hermitian<R: Rng>(rng: &mut R, dim: usize) -> CMat {
        let g = ginibre(rng, dim, dim);
        (&g + g.adjoint()).scale(0.5 / (dim as f64).sqrt())
    }
}
