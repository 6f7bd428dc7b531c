//! Collective-spin Hilbert spaces for ensembles of N two-level atoms.
//!
//! Four space families cover the sensor hierarchy:
//!
//! * `Symmetric(N)`: the spin-N/2 irrep, dimension N+1. One-partition sensors.
//! * `Partitioned([n_1, ..., n_k])`: tensor product of macrospins j_i = n_i/2.
//! * `Irreducible(N)`: the sector sufficient for optimal sensing, a direct sum
//!   of the symmetric block with one pair block `C^{2j+1} (x) C^{2j+1}` per
//!   j < N/2; the field acts only on the first factor of each pair.
//! * `DirectSumSpins(N)`: one copy of each spin-j irrep, `⊕_j C^{2j+1}`.
//!   Working space of the rotation-covariant two-partition solver.
//!
//! Half-integer spins are stored exactly as doubled integers (`two_j`,
//! `two_m`). Basis ordering is Jz-ascending (m = -j, ..., +j) inside every
//! block; `Irreducible` orders blocks by descending j with the symmetric
//! block first, `DirectSumSpins` ascending j so that amplitude index q
//! addresses j = q + jmin. Pair blocks index as `m1 * (2j+1) + m2-offset`
//! (sensing spin is the slow index).

use crate::error::{invalid, Result, SensorError};
use crate::linalg::{kron, CMat, C64, I1};
use serde::{Deserialize, Serialize};

/// A single spin-j representation, stored as `two_j = 2j`.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct SpinRep {
    pub two_j: u32,
}

impl SpinRep {
    pub fn new(two_j: u32) -> Self {
        Self { two_j }
    }

    pub fn j(self) -> f64 {
        self.two_j as f64 / 2.0
    }

    /// Dimension 2j+1.
    pub fn dim(self) -> usize {
        self.two_j as usize + 1
    }

    /// m value of basis index k (ascending): m = -j + k, returned doubled.
    pub fn two_m(self, k: usize) -> i64 {
        k as i64 * 2 - self.two_j as i64
    }
}

impl std::fmt::Display for SpinRep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.two_j % 2 == 0 {
            write!(f, "{}", self.two_j / 2)
        } else {
            write!(f, "{}/2", self.two_j)
        }
    }
}

/// Atom counts per partition; each partition is a macrospin j_i = n_i/2.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub atom_counts: Vec<u32>,
}

impl PartitionSpec {
    pub fn new(atom_counts: Vec<u32>) -> Result<Self> {
        if atom_counts.is_empty() {
            return invalid("partition list must be non-empty");
        }
        if atom_counts.iter().any(|&n| n == 0) {
            return invalid("every partition needs at least one atom");
        }
        Ok(Self { atom_counts })
    }

    pub fn n_atoms(&self) -> u32 {
        self.atom_counts.iter().sum()
    }

    /// Equal split into `k` partitions; requires k | N.
    pub fn equal(n_atoms: u32, k: u32) -> Result<Self> {
        if k == 0 || n_atoms % k != 0 {
            return invalid(format!("cannot split {n_atoms} atoms into {k} equal partitions"));
        }
        Self::new(vec![n_atoms / k; k as usize])
    }
}

/// Which sensor space family a [`SensorSpace`] instantiates.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum SpaceKind {
    Symmetric { n_atoms: u32 },
    Partitioned { partitions: PartitionSpec },
    Irreducible { n_atoms: u32 },
    DirectSumSpins { n_atoms: u32 },
}

/// Structural role of a direct-sum block.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockRole {
    /// Plain spin-j block (symmetric block of `Irreducible`, every block of
    /// `DirectSumSpins`, the single block of `Symmetric`).
    Spin,
    /// `C^{2j+1} (x) C^{2j+1}` pair block; the field acts on the first factor.
    Pair,
}

/// One direct-sum block: spin content, role, and its slice of the basis.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct SpinBlock {
    pub rep: SpinRep,
    pub role: BlockRole,
    pub offset: usize,
    pub dim: usize,
}

/// Label of one basis vector, for export and debugging.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BasisLabel {
    pub block: usize,
    pub two_j: u32,
    pub two_m: i64,
    /// Second-factor m for pair blocks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub two_m2: Option<i64>,
    /// Per-partition m values for `Partitioned` spaces.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition_two_ms: Option<Vec<i64>>,
}

/// A concrete sensor Hilbert space with its collective generators.
#[derive(Clone, Debug)]
pub struct SensorSpace {
    pub kind: SpaceKind,
    pub dim: usize,
    pub blocks: Vec<SpinBlock>,
    /// Collective generators [Jx, Jy, Jz]; Hermitian, dim x dim.
    pub generators: [CMat; 3],
    /// For `Partitioned`: the embedded generators of each partition.
    pub partition_generators: Vec<[CMat; 3]>,
}

/// Angular momentum matrices [Jx, Jy, Jz] for one spin-j irrep in the
/// ascending-m basis. `two_j = 1` reproduces the Pauli matrices over 2.
pub fn build_spin_operators(rep: SpinRep) -> [CMat; 3] {
    let d = rep.dim();
    let j = rep.j();
    let mut jx = CMat::zeros(d, d);
    let mut jy = CMat::zeros(d, d);
    let mut jz = CMat::zeros(d, d);
    for k in 0..d {
        let m = -j + k as f64;
        jz[(k, k)] = C64::new(m, 0.0);
        if k + 1 < d {
            // <m+1| J+ |m> = sqrt(j(j+1) - m(m+1))
            let amp = (j * (j + 1.0) - m * (m + 1.0)).sqrt();
            jx[(k + 1, k)] += C64::new(amp / 2.0, 0.0);
            jx[(k, k + 1)] += C64::new(amp / 2.0, 0.0);
            jy[(k + 1, k)] += C64::new(0.0, -amp / 2.0);
            jy[(k, k + 1)] += C64::new(0.0, amp / 2.0);
        }
    }
    [jx, jy, jz]
}

/// Number of copies of spin j in the Clebsch-Gordan decomposition of N
/// two-level atoms: `l_j = C(N, N/2-j) (2j+1) / (N/2+j+1)`. Exact.
pub fn multiplicity(n_atoms: u32, rep: SpinRep) -> Result<u128> {
    let n = n_atoms as u128;
    let two_j = rep.two_j as u128;
    if rep.two_j > n_atoms || (n_atoms - rep.two_j) % 2 != 0 {
        return invalid(format!("spin {} does not occur for {} atoms", rep, n_atoms));
    }
    let k = (n - two_j) / 2;
    let binom = binomial_u128(n, k)?;
    let numer = binom * (two_j + 1);
    let denom = (n + two_j) / 2 + 1;
    debug_assert_eq!(numer % denom, 0, "multiplicity must be integral");
    Ok(numer / denom)
}

fn binomial_u128(n: u128, k: u128) -> Result<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc
            .checked_mul(n - i)
            .ok_or_else(|| SensorError::Invalid("binomial overflow".into()))?;
        acc /= i + 1;
    }
    Ok(acc)
}

/// Closed form for the `Irreducible(N)` dimension: 1 + N(N^2+5)/6.
pub fn irreducible_dim(n_atoms: u32) -> usize {
    let n = n_atoms as usize;
    1 + n * (n * n + 5) / 6
}

fn block_diag_embed(offset: usize, small: &CMat, big: &mut CMat) {
    for c in 0..small.ncols() {
        for r in 0..small.nrows() {
            big[(offset + r, offset + c)] = small[(r, c)];
        }
    }
}

impl SensorSpace {
    pub fn build(kind: SpaceKind) -> Result<Self> {
        match kind {
            SpaceKind::Symmetric { n_atoms } => Self::symmetric(n_atoms),
            SpaceKind::Partitioned { partitions } => Self::partitioned(partitions),
            SpaceKind::Irreducible { n_atoms } => Self::irreducible(n_atoms),
            SpaceKind::DirectSumSpins { n_atoms } => Self::direct_sum_spins(n_atoms),
        }
    }

    /// Spin-N/2 irrep of N atoms, dimension N+1.
    pub fn symmetric(n_atoms: u32) -> Result<Self> {
        if n_atoms == 0 {
            return invalid("need at least one atom");
        }
        let rep = SpinRep::new(n_atoms);
        let generators = build_spin_operators(rep);
        Ok(Self {
            kind: SpaceKind::Symmetric { n_atoms },
            dim: rep.dim(),
            blocks: vec![SpinBlock { rep, role: BlockRole::Spin, offset: 0, dim: rep.dim() }],
            generators,
            partition_generators: vec![],
        })
    }

    /// Tensor product of macrospins, total generators J = sum_i J^(i).
    pub fn partitioned(partitions: PartitionSpec) -> Result<Self> {
        let reps: Vec<SpinRep> = partitions.atom_counts.iter().map(|&n| SpinRep::new(n)).collect();
        let dim: usize = reps.iter().map(|r| r.dim()).product();
        if dim > 4096 {
            return invalid(format!("partitioned space dimension {dim} is beyond the dense-matrix design range"));
        }
        let mut partition_generators = Vec::with_capacity(reps.len());
        for (i, rep) in reps.iter().enumerate() {
            let local = build_spin_operators(*rep);
            let embedded: Vec<CMat> = local
                .iter()
                .map(|op| {
                    let mut acc = CMat::identity(1, 1);
                    for (k, r) in reps.iter().enumerate() {
                        let factor = if k == i { op.clone() } else { CMat::identity(r.dim(), r.dim()) };
                        acc = kron(&acc, &factor);
                    }
                    acc
                })
                .collect();
            partition_generators.push([embedded[0].clone(), embedded[1].clone(), embedded[2].clone()]);
        }
        let mut generators = [CMat::zeros(dim, dim), CMat::zeros(dim, dim), CMat::zeros(dim, dim)];
        for pg in &partition_generators {
            for a in 0..3 {
                generators[a] += &pg[a];
            }
        }
        Ok(Self {
            kind: SpaceKind::Partitioned { partitions },
            dim,
            blocks: vec![],
            generators,
            partition_generators,
        })
    }

    /// Minimal space containing an optimal sensor: symmetric block plus one
    /// pair block per j < N/2, the field acting on the first pair factor.
    pub fn irreducible(n_atoms: u32) -> Result<Self> {
        if n_atoms == 0 {
            return invalid("need at least one atom");
        }
        let mut blocks = Vec::new();
        let mut offset = 0usize;
        let sym = SpinRep::new(n_atoms);
        blocks.push(SpinBlock { rep: sym, role: BlockRole::Spin, offset, dim: sym.dim() });
        offset += sym.dim();
        // Pair blocks, descending j.
        let mut two_j = n_atoms as i64 - 2;
        while two_j >= (n_atoms % 2) as i64 {
            let rep = SpinRep::new(two_j as u32);
            let bdim = rep.dim() * rep.dim();
            blocks.push(SpinBlock { rep, role: BlockRole::Pair, offset, dim: bdim });
            offset += bdim;
            two_j -= 2;
        }
        let dim = offset;
        debug_assert_eq!(dim, irreducible_dim(n_atoms));
        let mut generators = [CMat::zeros(dim, dim), CMat::zeros(dim, dim), CMat::zeros(dim, dim)];
        for b in &blocks {
            let local = build_spin_operators(b.rep);
            for a in 0..3 {
                let op = match b.role {
                    BlockRole::Spin => local[a].clone(),
                    BlockRole::Pair => kron(&local[a], &CMat::identity(b.rep.dim(), b.rep.dim())),
                };
                block_diag_embed(b.offset, &op, &mut generators[a]);
            }
        }
        Ok(Self {
            kind: SpaceKind::Irreducible { n_atoms },
            dim,
            blocks,
            generators,
            partition_generators: vec![],
        })
    }

    /// One copy of every spin-j irrep, ascending j from 0 (even N) or 1/2.
    pub fn direct_sum_spins(n_atoms: u32) -> Result<Self> {
        if n_atoms == 0 {
            return invalid("need at least one atom");
        }
        let mut blocks = Vec::new();
        let mut offset = 0usize;
        let mut two_j = n_atoms % 2;
        while two_j <= n_atoms {
            let rep = SpinRep::new(two_j);
            blocks.push(SpinBlock { rep, role: BlockRole::Spin, offset, dim: rep.dim() });
            offset += rep.dim();
            two_j += 2;
        }
        let dim = offset;
        let mut generators = [CMat::zeros(dim, dim), CMat::zeros(dim, dim), CMat::zeros(dim, dim)];
        for b in &blocks {
            let local = build_spin_operators(b.rep);
            for a in 0..3 {
                block_diag_embed(b.offset, &local[a], &mut generators[a]);
            }
        }
        Ok(Self {
            kind: SpaceKind::DirectSumSpins { n_atoms },
            dim,
            blocks,
            generators,
            partition_generators: vec![],
        })
    }

    pub fn n_atoms(&self) -> u32 {
        match &self.kind {
            SpaceKind::Symmetric { n_atoms }
            | SpaceKind::Irreducible { n_atoms }
            | SpaceKind::DirectSumSpins { n_atoms } => *n_atoms,
            SpaceKind::Partitioned { partitions } => partitions.n_atoms(),
        }
    }

    pub fn jx(&self) -> &CMat {
        &self.generators[0]
    }

    pub fn jy(&self) -> &CMat {
        &self.generators[1]
    }

    pub fn jz(&self) -> &CMat {
        &self.generators[2]
    }

    /// phi . J over the first `phi.len()` axes (x, y[, z]).
    pub fn field_generator(&self, phi: &[f64]) -> Result<CMat> {
        if phi.is_empty() || phi.len() > 3 {
            return invalid("phase vector must have 1..=3 components");
        }
        let mut h = CMat::zeros(self.dim, self.dim);
        for (a, &p) in phi.iter().enumerate() {
            if p != 0.0 {
                h += self.generators[a].scale(p);
            }
        }
        Ok(h)
    }

    /// Human-readable label of each basis vector.
    pub fn basis_labels(&self) -> Vec<BasisLabel> {
        let mut out = Vec::with_capacity(self.dim);
        match &self.kind {
            SpaceKind::Partitioned { partitions } => {
                let reps: Vec<SpinRep> =
                    partitions.atom_counts.iter().map(|&n| SpinRep::new(n)).collect();
                for idx in 0..self.dim {
                    // Row-major over partitions: last partition is the fastest index.
                    let mut rem = idx;
                    let mut ks = vec![0usize; reps.len()];
                    for (i, r) in reps.iter().enumerate().rev() {
                        ks[i] = rem % r.dim();
                        rem /= r.dim();
                    }
                    out.push(BasisLabel {
                        block: 0,
                        two_j: reps[0].two_j,
                        two_m: reps[0].two_m(ks[0]),
                        two_m2: None,
                        partition_two_ms: Some(
                            reps.iter().zip(&ks).map(|(r, &k)| r.two_m(k)).collect(),
                        ),
                    });
                }
            }
            _ => {
                for (bi, b) in self.blocks.iter().enumerate() {
                    match b.role {
                        BlockRole::Spin => {
                            for k in 0..b.rep.dim() {
                                out.push(BasisLabel {
                                    block: bi,
                                    two_j: b.rep.two_j,
                                    two_m: b.rep.two_m(k),
                                    two_m2: None,
                                    partition_two_ms: None,
                                });
                            }
                        }
                        BlockRole::Pair => {
                            for k1 in 0..b.rep.dim() {
                                for k2 in 0..b.rep.dim() {
                                    out.push(BasisLabel {
                                        block: bi,
                                        two_j: b.rep.two_j,
                                        two_m: b.rep.two_m(k1),
                                        two_m2: Some(b.rep.two_m(k2)),
                                        partition_two_ms: None,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        debug_assert_eq!(out.len(), self.dim);
        out
    }

    /// Doubled Jz eigenvalue (exact integer) of each basis vector.
    pub fn two_m_of_basis(&self) -> Vec<i64> {
        self.basis_labels()
            .iter()
            .map(|l| match &l.partition_two_ms {
                Some(ms) => ms.iter().sum(),
                None => l.two_m,
            })
            .collect()
    }
}

/// Isometry embedding a restricted sensor space into `Irreducible(N)`, with
/// the collective generators intertwined: `J_irr · iota = iota · J_src`.
///
/// `Symmetric(N)` maps onto the leading symmetric block; `DirectSumSpins(N)`
/// maps each spin-j block onto the matching block, using the first
/// multiplicity column of pair blocks. Because the generators intertwine,
/// states, measurements, estimators, and costs all transport exactly along
/// this map. Returns the isometry together with the target space.
pub fn isometry_into_irreducible(src: &SensorSpace) -> Result<(CMat, SensorSpace)> {
    let target = SensorSpace::irreducible(src.n_atoms())?;
    let mut iota = CMat::zeros(target.dim, src.dim);
    match &src.kind {
        SpaceKind::Symmetric { .. } => {
            // The symmetric block leads the irreducible layout.
            for k in 0..src.dim {
                iota[(k, k)] = I1;
            }
        }
        SpaceKind::DirectSumSpins { .. } => {
            for sb in &src.blocks {
                let tb = target
                    .blocks
                    .iter()
                    .find(|b| b.rep.two_j == sb.rep.two_j)
                    .ok_or_else(|| {
                        SensorError::Invalid(format!(
                            "no spin-{} block in the irreducible target",
                            sb.rep
                        ))
                    })?;
                let d = sb.rep.dim();
                for k in 0..d {
                    let row = match tb.role {
                        BlockRole::Spin => tb.offset + k,
                        BlockRole::Pair => tb.offset + k * d,
                    };
                    iota[(row, sb.offset + k)] = I1;
                }
            }
        }
        _ => return invalid("no canonical embedding into the irreducible space for this kind"),
    }
    Ok((iota, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{mul, CMat, Op, C64};
    use approx::assert_abs_diff_eq;

    fn commutator(a: &CMat, b: &CMat) -> CMat {
        mul(a, Op::N, b, Op::N) - mul(b, Op::N, a, Op::N)
    }

    fn check_su2(gens: &[CMat; 3]) {
        // [Jx, Jy] = i Jz and cyclic permutations.
        for (a, b, c) in [(0, 1, 2), (1, 2, 0), (2, 0, 1)] {
            let lhs = commutator(&gens[a], &gens[b]);
            let rhs = gens[c].map(|z| z * C64::new(0.0, 1.0));
            assert!((lhs - rhs).norm() < 1e-12, "commutator failed for axes {a},{b}");
        }
    }

    #[test]
    fn pauli_matrices_at_two_j_one() {
        let [jx, jy, jz] = build_spin_operators(SpinRep::new(1));
        assert_abs_diff_eq!(jx[(0, 1)].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(jy[(0, 1)].im, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(jy[(1, 0)].im, -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(jz[(0, 0)].re, -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(jz[(1, 1)].re, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn casimir_on_single_irrep() {
        for two_j in 1..=8u32 {
            let rep = SpinRep::new(two_j);
            let [jx, jy, jz] = build_spin_operators(rep);
            let j2 = mul(&jx, Op::N, &jx, Op::N) + mul(&jy, Op::N, &jy, Op::N) + mul(&jz, Op::N, &jz, Op::N);
            let expect = CMat::identity(rep.dim(), rep.dim()).scale(rep.j() * (rep.j() + 1.0));
            assert!((j2 - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn all_space_kinds_satisfy_su2_algebra() {
        let spaces = [
            SensorSpace::symmetric(5).unwrap(),
            SensorSpace::partitioned(PartitionSpec::new(vec![2, 3]).unwrap()).unwrap(),
            SensorSpace::partitioned(PartitionSpec::new(vec![1, 1, 2]).unwrap()).unwrap(),
            SensorSpace::irreducible(4).unwrap(),
            SensorSpace::irreducible(5).unwrap(),
            SensorSpace::direct_sum_spins(6).unwrap(),
            SensorSpace::direct_sum_spins(5).unwrap(),
        ];
        for s in &spaces {
            check_su2(&s.generators);
            for g in &s.generators {
                assert!(crate::linalg::is_hermitian(g, 1e-13));
            }
        }
    }

    #[test]
    fn partition_generators_sum_to_total_and_commute_across_partitions() {
        let s = SensorSpace::partitioned(PartitionSpec::new(vec![4, 4]).unwrap()).unwrap();
        for a in 0..3 {
            let total: CMat = &s.partition_generators[0][a] + &s.partition_generators[1][a];
            assert!((&total - &s.generators[a]).norm() < 1e-12);
        }
        for a in 0..3 {
            for b in 0..3 {
                let c = commutator(&s.partition_generators[0][a], &s.partition_generators[1][b]);
                assert!(c.norm() < 1e-13);
            }
        }
        check_su2(&s.partition_generators[0]);
    }

    #[test]
    fn irreducible_dimension_closed_form_vs_blocks() {
        let expected = [2usize, 4, 8, 15, 26, 42, 64, 93];
        for n in 1..=8u32 {
            let s = SensorSpace::irreducible(n).unwrap();
            let block_sum: usize = s.blocks.iter().map(|b| b.dim).sum();
            assert_eq!(s.dim, block_sum);
            assert_eq!(s.dim, irreducible_dim(n));
            assert_eq!(s.dim, expected[n as usize - 1]);
        }
    }

    #[test]
    fn irreducible_block_layout() {
        let s = SensorSpace::irreducible(8).unwrap();
        assert_eq!(s.blocks[0].role, BlockRole::Spin);
        assert_eq!(s.blocks[0].rep.two_j, 8);
        let pair_two_js: Vec<u32> = s.blocks[1..].iter().map(|b| b.rep.two_j).collect();
        assert_eq!(pair_two_js, vec![6, 4, 2, 0]);
        let mut offset = 0;
        for b in &s.blocks {
            assert_eq!(b.offset, offset);
            offset += b.dim;
        }
        assert_eq!(offset, s.dim);
    }

    #[test]
    fn multiplicities_sum_to_hilbert_space_dimension() {
        for n in 1..=12u32 {
            let mut total: u128 = 0;
            let mut two_j = n % 2;
            while two_j <= n {
                let l = multiplicity(n, SpinRep::new(two_j)).unwrap();
                total += l * (two_j as u128 + 1);
                two_j += 2;
            }
            assert_eq!(total, 1u128 << n, "sum over irreps must be 2^N at N={n}");
        }
    }

    #[test]
    fn multiplicity_examples() {
        assert_eq!(multiplicity(3, SpinRep::new(1)).unwrap(), 2);
        assert_eq!(multiplicity(4, SpinRep::new(0)).unwrap(), 2);
        assert_eq!(multiplicity(4, SpinRep::new(2)).unwrap(), 3);
        assert_eq!(multiplicity(8, SpinRep::new(8)).unwrap(), 1);
        assert!(multiplicity(4, SpinRep::new(1)).is_err());
    }

    #[test]
    fn direct_sum_matches_two_macrospin_partition_spectra() {
        for n in [4u32, 6, 8] {
            let ds = SensorSpace::direct_sum_spins(n).unwrap();
            let pt = SensorSpace::partitioned(PartitionSpec::equal(n, 2).unwrap()).unwrap();
            assert_eq!(ds.dim, pt.dim);
            for a in 0..3 {
                let mut e1 = crate::linalg::herm_eig(&ds.generators[a]).vals;
                let mut e2 = crate::linalg::herm_eig(&pt.generators[a]).vals;
                e1.sort_by(|x, y| x.partial_cmp(y).unwrap());
                e2.sort_by(|x, y| x.partial_cmp(y).unwrap());
                for (x, y) in e1.iter().zip(&e2) {
                    assert_abs_diff_eq!(x, y, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn basis_labels_cover_space() {
        for s in [
            SensorSpace::symmetric(3).unwrap(),
            SensorSpace::partitioned(PartitionSpec::new(vec![2, 1]).unwrap()).unwrap(),
            SensorSpace::irreducible(4).unwrap(),
            SensorSpace::direct_sum_spins(4).unwrap(),
        ] {
            let labels = s.basis_labels();
            assert_eq!(labels.len(), s.dim);
            // Jz diagonal must match the labels' total m.
            let two_m = s.two_m_of_basis();
            for (i, &tm) in two_m.iter().enumerate() {
                assert_abs_diff_eq!(s.jz()[(i, i)].re, tm as f64 / 2.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn field_generator_combines_axes() {
        let s = SensorSpace::symmetric(2).unwrap();
        let h = s.field_generator(&[0.3, -0.4]).unwrap();
        let expect = s.jx().scale(0.3) - s.jy().scale(0.4);
        assert!((h - expect).norm() < 1e-14);
        assert!(s.field_generator(&[]).is_err());
    }

    #[test]
    fn irreducible_embedding_is_an_intertwining_isometry() {
        for src in [
            SensorSpace::symmetric(5).unwrap(),
            SensorSpace::symmetric(8).unwrap(),
            SensorSpace::direct_sum_spins(6).unwrap(),
            SensorSpace::direct_sum_spins(8).unwrap(),
        ] {
            let (iota, target) = isometry_into_irreducible(&src).unwrap();
            assert_eq!(iota.nrows(), target.dim);
            assert_eq!(iota.ncols(), src.dim);
            // iota^H iota = identity on the source.
            let gram = iota.ad_mul(&iota);
            for r in 0..src.dim {
                for c in 0..src.dim {
                    let expect = if r == c { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(gram[(r, c)].re, expect, epsilon = 1e-14);
                    assert_abs_diff_eq!(gram[(r, c)].im, 0.0, epsilon = 1e-14);
                }
            }
            // Generators intertwine exactly, so dynamics transport unchanged.
            for a in 0..3 {
                let lhs = &target.generators[a] * &iota;
                let rhs = &iota * &src.generators[a];
                assert!((lhs - rhs).norm() < 1e-12, "axis {a} fails to intertwine");
            }
        }
        // No canonical embedding from a partitioned product space.
        let part = SensorSpace::partitioned(PartitionSpec::equal(4, 2).unwrap()).unwrap();
        assert!(isometry_into_irreducible(&part).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        /// Every constructible space satisfies the SU(2) algebra, Hermitian
        /// generators, and its dimension formula, for arbitrary atom counts
        /// and partition shapes.
        #[test]
        fn random_spaces_satisfy_algebra_and_dimension_formulas(
            kind in 0usize..4,
            n in 1u32..7,
            split in 1u32..6,
        ) {
            let space = match kind {
                0 => SensorSpace::symmetric(n).unwrap(),
                1 => {
                    let a = split.min(n);
                    if a == n {
                        SensorSpace::symmetric(n).unwrap()
                    } else {
                        SensorSpace::partitioned(
                            PartitionSpec::new(vec![a, n - a]).unwrap(),
                        )
                        .unwrap()
                    }
                }
                2 => SensorSpace::irreducible(n).unwrap(),
                _ => SensorSpace::direct_sum_spins(n).unwrap(),
            };
            check_su2(&space.generators);
            for g in &space.generators {
                proptest::prop_assert!(crate::linalg::is_hermitian(g, 1e-12));
            }
            let expect_dim = match &space.kind {
                SpaceKind::Symmetric { .. } => n as usize + 1,
                SpaceKind::Partitioned { partitions } => partitions
                    .atom_counts
                    .iter()
                    .map(|&c| c as usize + 1)
                    .product(),
                SpaceKind::Irreducible { .. } => irreducible_dim(n),
                SpaceKind::DirectSumSpins { .. } => {
                    // sum of (2j+1) over j = parity(N)/2 ..= N/2
                    let mut total = 0usize;
                    let mut two_j = n % 2;
                    while two_j <= n {
                        total += two_j as usize + 1;
                        two_j += 2;
                    }
                    total
                }
            };
            proptest::prop_assert_eq!(space.dim, expect_dim);
        }
    }
}
