//! Isotropic Gaussian priors over the field vector and the quadrature grids
//! used to average over them.
//!
//! The prior is `P(phi) = (2 pi delta^2)^{-d/2} exp(-phi.phi / 2 delta^2)`
//! with total variance `d delta^2`. Deterministic averaging uses a tensor
//! Gauss-Hermite grid per Cartesian axis (default order 40 for d = 2 and
//! 24 for d = 3), whose nodes/weights come from the Golub-Welsch
//! tridiagonal eigenproblem and are exactly symmetrized so that odd moments
//! vanish identically.

use crate::error::{invalid, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Isotropic Gaussian prior for a d-component field (d = 2 or 3).
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct Prior {
    pub d: usize,
    pub delta: f64,
}

impl Prior {
    pub fn new(d: usize, delta: f64) -> Result<Self> {
        if !(d == 2 || d == 3) {
            return invalid(format!("prior dimension must be 2 or 3, got {d}"));
        }
        if !(delta.is_finite() && delta > 0.0) {
            return invalid(format!("prior width must be positive, got {delta}"));
        }
        Ok(Self { d, delta })
    }

    /// Total prior variance `sum_nu Var(phi_nu) = d delta^2`.
    pub fn variance(&self) -> f64 {
        self.d as f64 * self.delta * self.delta
    }

    /// Probability density at `phi` (first d components).
    pub fn density(&self, phi: &[f64]) -> f64 {
        let s2 = self.delta * self.delta;
        let q: f64 = phi.iter().take(self.d).map(|x| x * x).sum();
        (2.0 * std::f64::consts::PI * s2).powf(-(self.d as f64) / 2.0) * (-q / (2.0 * s2)).exp()
    }

    /// Radial density of |phi| for d = 2: `p(r) = r/delta^2 exp(-r^2/2delta^2)`.
    pub fn radial_density_2d(&self, r: f64) -> f64 {
        let s2 = self.delta * self.delta;
        r / s2 * (-r * r / (2.0 * s2)).exp()
    }

    /// Default tensor quadrature order for this dimension.
    pub fn default_order(&self) -> usize {
        if self.d == 2 {
            40
        } else {
            24
        }
    }
}

/// Tensor-product quadrature over the prior: `sum_k w_k f(phi_k) ~ E[f]`.
///
/// Nodes are padded to three components; components beyond `d` are zero.
#[derive(Clone, Debug)]
pub struct Quadrature {
    pub d: usize,
    pub order: usize,
    pub nodes: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Weighted total variance of the grid, `sum_k w_k |phi_k|^2`.
    pub fn variance(&self) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(n, w)| w * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]))
            .sum()
    }
}

/// Eigen-decompose a symmetric tridiagonal Jacobi matrix given by its
/// off-diagonal, returning (nodes, first-row weights squared).
fn golub_welsch(off_diag: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = off_diag.len() + 1;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for (k, &b) in off_diag.iter().enumerate() {
        jac[(k, k + 1)] = b;
        jac[(k + 1, k)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    (pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect())
}

/// Force exact +/- symmetry on a sorted node/weight table.
fn symmetrize(nodes: &mut [f64], weights: &mut [f64]) {
    let n = nodes.len();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -x;
        nodes[j] = x;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
}

/// Gauss-Hermite rule for the standard normal weight: `sum w_i f(x_i) ~
/// E[f(X)], X ~ N(0,1)`. Weights sum to one exactly after normalization.
pub fn gauss_hermite(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if order == 0 {
        return invalid("quadrature order must be positive");
    }
    // Physicists' recurrence: off-diagonal sqrt(k/2) for weight exp(-x^2).
    let off: Vec<f64> = (1..order).map(|k| (k as f64 / 2.0).sqrt()).collect();
    let (mut nodes, mut weights) = golub_welsch(&off);
    // Rescale x -> sqrt(2) x to convert exp(-x^2) to the unit normal.
    for x in nodes.iter_mut() {
        *x *= std::f64::consts::SQRT_2;
    }
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    symmetrize(&mut nodes, &mut weights);
    Ok((nodes, weights))
}

/// Gauss-Legendre rule on [a, b] with unit weight function.
pub fn gauss_legendre(order: usize, a: f64, b: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if order == 0 {
        return invalid("quadrature order must be positive");
    }
    if !(b > a) {
        return invalid("gauss_legendre: empty interval");
    }
    let off: Vec<f64> =
        (1..order).map(|k| k as f64 / ((4 * k * k - 1) as f64).sqrt()).collect();
    let (mut nodes, mut weights) = golub_welsch(&off);
    let total: f64 = weights.iter().sum();
    // Reference weights integrate to 2 on [-1, 1].
    for w in weights.iter_mut() {
        *w *= 2.0 / total;
    }
    symmetrize(&mut nodes, &mut weights);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    for x in nodes.iter_mut() {
        *x = mid + half * *x;
    }
    for w in weights.iter_mut() {
        *w *= half;
    }
    Ok((nodes, weights))
}

/// Polar quadrature for d = 2 priors: an exact trapezoid rule in the angle
/// times Gauss-Legendre in the radius, weighted by the exact radial density
/// on `[0, 8 delta]`.
///
/// Matrix elements of `exp(-i phi . J)` are trigonometric polynomials of
/// degree at most `N` in the field angle, so `n_angular >= 2N + 2` makes the
/// angular integral exact for every outcome probability; radial resolution
/// only has to track oscillations up to frequency `N` over `8 delta`, which
/// stays affordable for wide priors where a tensor grid would need very
/// high per-axis orders. `polar_orders` picks safe defaults.
pub fn build_polar_quadrature(
    prior: &Prior,
    n_radial: usize,
    n_angular: usize,
) -> Result<Quadrature> {
    if prior.d != 2 {
        return invalid("polar quadrature applies to two-component priors only");
    }
    if n_radial == 0 || n_angular == 0 {
        return invalid("quadrature orders must be positive");
    }
    let (r, wr) = gauss_legendre(n_radial, 0.0, 8.0 * prior.delta)?;
    let radial: Vec<f64> = r.iter().zip(&wr).map(|(x, w)| w * prior.radial_density_2d(*x)).collect();
    let total: f64 = radial.iter().sum();
    let mut nodes = Vec::with_capacity(n_radial * n_angular);
    let mut weights = Vec::with_capacity(n_radial * n_angular);
    for l in 0..n_angular {
        let theta = std::f64::consts::TAU * l as f64 / n_angular as f64;
        let (s, c) = theta.sin_cos();
        for (ri, rw) in r.iter().zip(&radial) {
            nodes.push([ri * c, ri * s, 0.0]);
            weights.push(rw / (total * n_angular as f64));
        }
    }
    Ok(Quadrature { d: 2, order: n_radial, nodes, weights })
}

/// Radial/angular orders for `build_polar_quadrature` that resolve an
/// N-atom sensor: angular rule exact through twice the maximal frequency,
/// radial rule tracking `N` oscillations per unit over the 8-sigma range.
pub fn polar_orders(prior: &Prior, n_atoms: u32) -> (usize, usize) {
    let n_angular = 4 * n_atoms as usize + 2;
    let span = 8.0 * prior.delta;
    let n_radial = 80 + (0.75 * n_atoms as f64 * span).ceil() as usize;
    (n_radial, n_angular)
}

/// Tensor Gauss-Hermite grid for `prior`, `order^d` nodes scaled to width
/// delta. Weights are normalized (`sum w = 1` to machine precision), odd
/// moments vanish exactly, and per-axis second moments equal `delta^2`
/// to the relative accuracy of the rule.
pub fn build_quadrature(prior: &Prior, order: usize) -> Result<Quadrature> {
    let (axis_nodes, axis_weights) = gauss_hermite(order)?;
    let scaled: Vec<f64> = axis_nodes.iter().map(|x| x * prior.delta).collect();
    let d = prior.d;
    let total = order.pow(d as u32);
    let mut nodes = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    loop {
        let mut node = [0.0f64; 3];
        let mut w = 1.0;
        for (axis, &i) in idx.iter().enumerate() {
            node[axis] = scaled[i];
            w *= axis_weights[i];
        }
        nodes.push(node);
        weights.push(w);
        // Odometer increment over the d-fold index.
        let mut axis = 0;
        loop {
            idx[axis] += 1;
            if idx[axis] < order {
                break;
            }
            idx[axis] = 0;
            axis += 1;
            if axis == d {
                debug_assert_eq!(nodes.len(), total);
                return Ok(Quadrature { d, order, nodes, weights });
            }
        }
    }
}
