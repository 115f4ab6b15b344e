//! Sum-of-squares feasibility certificates for the safe-control condition.
//!
//! For each of the eight bang-bang sign assignments of `(a, a_l, omega)` the
//! refute set is described by 13 polynomial inequalities `gamma_n >= 0` that
//! are quadratic in the monomial basis
//!
//! ```text
//! x = [1, a1, a2, a3, a4, p_x, p_y, v, v_l]
//! ```
//!
//! The certificate polynomial `-1 - sum_n p_n gamma_n` has a unique symmetric
//! Gram matrix `Q` in that basis; the refute set is empty when `Q` is positive
//! semidefinite, which is checked through its 511 principal minors.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Bounds, VaryingParams};
use crate::safety_index::DEFAULT_ETA;

pub const BASIS_LEN: usize = 9;
pub const NUM_CONSTRAINTS: usize = 13;
pub const NUM_ASSIGNMENTS: usize = 8;
pub const NUM_MINORS: usize = (1 << BASIS_LEN) - 1;

/// Positions of the monomials in the basis.
pub mod basis {
    pub const ONE: usize = 0;
    pub const A1: usize = 1;
    pub const A2: usize = 2;
    pub const A3: usize = 3;
    pub const A4: usize = 4;
    pub const PX: usize = 5;
    pub const PY: usize = 6;
    pub const V: usize = 7;
    pub const VL: usize = 8;
}

pub type Mat9 = SMatrix<f64, BASIS_LEN, BASIS_LEN>;
pub type BasisVector = SVector<f64, BASIS_LEN>;

/// Default acceptance slack on principal minors.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Signs `(I_a, I_al, I_w)` selecting which bound each input sits at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignAssignment {
    pub ia: i8,
    pub ial: i8,
    pub iw: i8,
}

impl SignAssignment {
    /// Index `i` in `0..8`; bit 2 is `a`, bit 1 `a_l`, bit 0 `omega`, a set
    /// bit meaning `-1`.
    pub fn from_index(i: usize) -> Self {
        assert!(i < NUM_ASSIGNMENTS, "sign assignment index {i} out of range");
        let sign = |bit: usize| if i >> bit & 1 == 0 { 1 } else { -1 };
        Self { ia: sign(2), ial: sign(1), iw: sign(0) }
    }

    pub fn index(&self) -> usize {
        let bit = |s: i8| usize::from(s < 0);
        bit(self.ia) << 2 | bit(self.ial) << 1 | bit(self.iw)
    }

    pub fn all() -> [SignAssignment; NUM_ASSIGNMENTS] {
        std::array::from_fn(Self::from_index)
    }

    pub fn signs(&self) -> [f64; 3] {
        [self.ia as f64, self.ial as f64, self.iw as f64]
    }
}

/// Affine form `c . x` over the basis.
type LinearForm = [f64; BASIS_LEN];

fn unit(i: usize) -> LinearForm {
    let mut l = [0.0; BASIS_LEN];
    l[i] = 1.0;
    l
}

fn affine(terms: &[(usize, f64)]) -> LinearForm {
    let mut l = [0.0; BASIS_LEN];
    for &(i, c) in terms {
        l[i] += c;
    }
    l
}

/// Quadratic polynomial stored as its symmetric Gram matrix: `p(x) = x' M x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticPoly {
    pub coeff: Mat9,
}

impl QuadraticPoly {
    pub fn zero() -> Self {
        Self { coeff: Mat9::zeros() }
    }

    pub fn constant(c: f64) -> Self {
        let mut q = Self::zero();
        q.coeff[(0, 0)] = c;
        q
    }

    fn product(a: &LinearForm, b: &LinearForm) -> Self {
        let a = BasisVector::from_column_slice(a);
        let b = BasisVector::from_column_slice(b);
        Self { coeff: (a * b.transpose() + b * a.transpose()) * 0.5 }
    }

    fn square(a: &LinearForm) -> Self {
        Self::product(a, a)
    }

    pub fn eval(&self, x: &BasisVector) -> f64 {
        (x.transpose() * self.coeff * x)[(0, 0)]
    }
}

impl std::ops::Add for QuadraticPoly {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self { coeff: self.coeff + rhs.coeff }
    }
}

impl std::ops::Sub for QuadraticPoly {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self { coeff: self.coeff - rhs.coeff }
    }
}

impl std::ops::Mul<QuadraticPoly> for f64 {
    type Output = QuadraticPoly;
    fn mul(self, rhs: QuadraticPoly) -> QuadraticPoly {
        QuadraticPoly { coeff: rhs.coeff * self }
    }
}

/// Basis vector `[1, a1, a2, a3, a4, p_x, p_y, v, v_l]`.
pub fn basis_point(alpha: [f64; 4], px: f64, py: f64, v: f64, vl: f64) -> BasisVector {
    BasisVector::from_column_slice(&[1.0, alpha[0], alpha[1], alpha[2], alpha[3], px, py, v, vl])
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiplierVector(pub [f64; NUM_CONSTRAINTS]);

impl MultiplierVector {
    pub fn uniform(c: f64) -> Self {
        Self([c; NUM_CONSTRAINTS])
    }

    pub fn is_nonnegative(&self) -> bool {
        self.0.iter().all(|&p| p >= 0.0)
    }
}

/// Safety-index gain together with one multiplier vector per sign assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificatePoint {
    pub k: f64,
    pub multipliers: [MultiplierVector; NUM_ASSIGNMENTS],
}

impl CertificatePoint {
    pub fn uniform(k: f64, p: f64) -> Self {
        Self { k, multipliers: [MultiplierVector::uniform(p); NUM_ASSIGNMENTS] }
    }

    pub fn is_nonnegative(&self) -> bool {
        self.k >= 0.0 && self.multipliers.iter().all(MultiplierVector::is_nonnegative)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GramMatrix(pub Mat9);

impl GramMatrix {
    pub fn identity() -> Self {
        Self(Mat9::identity())
    }

    pub fn from_diagonal(d: &[f64; BASIS_LEN]) -> Self {
        Self(Mat9::from_diagonal(&BasisVector::from_column_slice(d)))
    }

    pub fn is_symmetric(&self) -> bool {
        self.0 == self.0.transpose()
    }
}

/// Nonempty index subset of the basis, stored as a bitmask.
///
/// Ordered lexicographically by the sorted index sequence, so `{0} < {0, 1} <
/// {0, 2} < {1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Subset(pub u16);

impl Subset {
    pub fn from_indices(idx: &[usize]) -> Self {
        Self(idx.iter().fold(0u16, |m, &i| m | 1 << i))
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..BASIS_LEN).filter(move |i| self.0 >> i & 1 == 1)
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    /// All 511 nonempty subsets in bitmask order.
    pub fn all() -> impl Iterator<Item = Subset> {
        (1..=NUM_MINORS as u16).map(Subset)
    }
}

impl Ord for Subset {
    fn cmp(&self, other: &Self) -> Ordering {
        self.indices().cmp(other.indices())
    }
}

impl PartialOrd for Subset {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let idx: Vec<String> = self.indices().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", idx.join(","))
    }
}

/// Determinant of `[Q]_{I,I}` by LU with partial pivoting.
pub fn minor(q: &GramMatrix, subset: Subset) -> f64 {
    let idx: Vec<usize> = subset.indices().collect();
    let n = idx.len();
    let mut a = [[0.0f64; BASIS_LEN]; BASIS_LEN];
    for (r, &i) in idx.iter().enumerate() {
        for (c, &j) in idx.iter().enumerate() {
            a[r][c] = q.0[(i, j)];
        }
    }
    lu_determinant(&mut a, n)
}

fn lu_determinant(a: &mut [[f64; BASIS_LEN]; BASIS_LEN], n: usize) -> f64 {
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap_or(col);
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        let p = a[col][col];
        det *= p;
        for r in col + 1..n {
            let factor = a[r][col] / p;
            if factor != 0.0 {
                for c in col + 1..n {
                    a[r][c] -= factor * a[col][c];
                }
            }
        }
    }
    det
}

/// Every principal minor of `q`, in bitmask order of the subsets.
pub fn principal_minors(q: &GramMatrix) -> Vec<(Subset, f64)> {
    Subset::all().map(|s| (s, minor(q, s))).collect()
}

/// Tolerance for treating two minors as tied when picking the active subset.
const TIE_TOL: f64 = 1e-12;

/// Smallest principal minor and its subset; ties within `1e-12` go to the
/// lexicographically smallest subset.
pub fn min_principal_minor(q: &GramMatrix) -> (f64, Subset) {
    let minors = principal_minors(q);
    let min = minors.iter().map(|&(_, m)| m).fold(f64::INFINITY, f64::min);
    let subset = minors
        .iter()
        .filter(|&&(_, m)| m <= min + TIE_TOL)
        .map(|&(s, _)| s)
        .min()
        .expect("511 minors");
    (min, subset)
}

/// Refute-set constraints and Gram matrices for one set of dynamics
/// parameters and state/control limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificateModel {
    pub rho: VaryingParams,
    pub bounds: Bounds,
    pub eta: f64,
}

impl CertificateModel {
    pub fn new(rho: VaryingParams, bounds: Bounds) -> Self {
        Self { rho, bounds, eta: DEFAULT_ETA }
    }

    /// The 13 constraint polynomials of the refute set for `sign`:
    ///
    /// 1. negated safe-control condition at the bang-bang control,
    /// 2. to 4. indicator conditions fixing each control bracket's sign,
    /// 5. to 8. bounds on the alpha terms,
    /// 9. to 12. state box,
    /// 13. clearance `p_x^2 + p_y^2 >= d_min^2`.
    pub fn gammas(&self, sign: SignAssignment, k: f64) -> [QuadraticPoly; NUM_CONSTRAINTS] {
        use basis::*;
        let rho = &self.rho;
        let b = &self.bounds;
        let signs = sign.signs();
        let (lo, hi) = (b.u_lo.to_array(), b.u_hi.to_array());
        let bang: [f64; 3] = std::array::from_fn(|j| if signs[j] > 0.0 { hi[j] } else { lo[j] });

        let bracket = |col: usize| {
            let across = affine(&[(ONE, -rho.g(4, col)), (V, -rho.g(5, col))]);
            let along = affine(&[(ONE, rho.g(3, col)), (VL, -rho.g(5, col))]);
            QuadraticPoly::product(&unit(A3), &across) + QuadraticPoly::product(&unit(A4), &along)
        };
        let brackets = [bracket(3), bracket(4), bracket(5)];

        let mut main = -2.0 * k * QuadraticPoly::square(&unit(V))
            - 2.0 * k * QuadraticPoly::square(&unit(VL))
            - 2.0 * QuadraticPoly::product(&unit(PX), &unit(A1))
            - 2.0 * QuadraticPoly::product(&unit(PY), &unit(A2))
            + QuadraticPoly::constant(self.eta);
        for j in 0..3 {
            main = main - (2.0 * k * bang[j]) * brackets[j];
        }

        let along = affine(&[(ONE, k * rho.e(3)), (V, 1.0), (VL, -k * rho.e(5))]);
        let across = affine(&[(ONE, k * rho.e(4)), (VL, 1.0), (V, k * rho.e(5))]);
        let speed = QuadraticPoly::square(&along) + QuadraticPoly::square(&across);
        let radius = QuadraticPoly::square(&unit(PX)) + QuadraticPoly::square(&unit(PY));
        let sq = |i: usize| QuadraticPoly::square(&unit(i));
        let c = QuadraticPoly::constant;

        [
            main,
            signs[0] * brackets[0],
            signs[1] * brackets[1],
            signs[2] * brackets[2],
            speed - sq(A1),
            speed - sq(A2),
            radius - sq(A3),
            radius - sq(A4),
            c(b.l * b.l) - sq(PX),
            c(b.l * b.l) - sq(PY),
            c(b.v * b.v) - sq(V),
            c(b.vl * b.vl) - sq(VL),
            radius - c(b.d_min * b.d_min),
        ]
    }

    /// Gram matrix of `-1 - sum_n p_n gamma_n`.
    pub fn gram(&self, sign: SignAssignment, k: f64, p: &MultiplierVector) -> GramMatrix {
        let gammas = self.gammas(sign, k);
        let mut q = -Mat9::from_fn(|r, c| if r == 0 && c == 0 { 1.0 } else { 0.0 });
        for (pn, g) in p.0.iter().zip(gammas.iter()) {
            q -= g.coeff * *pn;
        }
        GramMatrix(q)
    }

    pub fn grams(&self, cp: &CertificatePoint) -> [GramMatrix; NUM_ASSIGNMENTS] {
        std::array::from_fn(|i| self.gram(SignAssignment::from_index(i), cp.k, &cp.multipliers[i]))
    }

    /// Smallest principal minor of each Gram matrix with its subset.
    pub fn min_minors(&self, cp: &CertificatePoint) -> [(f64, Subset); NUM_ASSIGNMENTS] {
        self.grams(cp).map(|q| min_principal_minor(&q))
    }

    /// All principal minors of all eight Gram matrices are at least `-tol`.
    pub fn is_valid(&self, cp: &CertificatePoint, tol: f64) -> bool {
        cp.is_nonnegative()
            && self
                .grams(cp)
                .iter()
                .all(|q| Subset::all().all(|s| minor(q, s) >= -tol))
    }
}

/// On-disk certificate: the point, the parameters it was computed for and
/// bookkeeping about how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateDocument {
    pub k: f64,
    pub multipliers: [[f64; NUM_CONSTRAINTS]; NUM_ASSIGNMENTS],
    pub rho: VaryingParams,
    pub bounds: Bounds,
    pub tol: f64,
    #[serde(default)]
    pub metadata: CertificateMetadata,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CertificateMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<String>,
    #[serde(default)]
    pub valid: bool,
    #[serde(default)]
    pub min_minor: f64,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default)]
    pub wall_ms: f64,
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CertificateIoError {
    #[error("certificate I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("certificate JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl CertificateDocument {
    pub fn new(cp: &CertificatePoint, model: &CertificateModel, tol: f64, metadata: CertificateMetadata) -> Self {
        Self {
            k: cp.k,
            multipliers: cp.multipliers.map(|m| m.0),
            rho: model.rho,
            bounds: model.bounds,
            tol,
            metadata,
        }
    }

    pub fn point(&self) -> CertificatePoint {
        CertificatePoint { k: self.k, multipliers: self.multipliers.map(MultiplierVector) }
    }

    pub fn model(&self) -> CertificateModel {
        CertificateModel::new(self.rho, self.bounds)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CertificateIoError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CertificateIoError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::payloads;
    use approx::assert_abs_diff_eq;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(rng: &mut ChaCha8Rng) -> BasisVector {
        BasisVector::from_fn(|i, _| if i == 0 { 1.0 } else { rng.gen_range(-2.0..2.0) })
    }

    /// Each constraint written out as a scalar expression of the basis values.
    fn gammas_scalar(model: &CertificateModel, sign: SignAssignment, k: f64, x: &BasisVector) -> [f64; 13] {
        let (a1, a2, a3, a4, px, py, v, vl) = (x[1], x[2], x[3], x[4], x[5], x[6], x[7], x[8]);
        let r = &model.rho;
        let b = &model.bounds;
        let g = |i: usize, j: usize| r.gain[i - 3][j - 3];
        let e = |i: usize| r.drift[i - 3];
        let ba = -a3 * (g(4, 3) + g(5, 3) * v) + a4 * (g(3, 3) - g(5, 3) * vl);
        let bal = -a3 * (g(4, 4) + g(5, 4) * v) + a4 * (g(3, 4) - g(5, 4) * vl);
        let bw = -a3 * (g(4, 5) + g(5, 5) * v) + a4 * (g(3, 5) - g(5, 5) * vl);
        let at = if sign.ia > 0 { b.u_hi.a } else { b.u_lo.a };
        let alt = if sign.ial > 0 { b.u_hi.al } else { b.u_lo.al };
        let wt = if sign.iw > 0 { b.u_hi.omega } else { b.u_lo.omega };
        let lhs = -2.0 * k * v * v - 2.0 * k * vl * vl - 2.0 * px * a1 - 2.0 * py * a2
            - 2.0 * k * at * ba
            - 2.0 * k * alt * bal
            - 2.0 * k * wt * bw;
        let t1 = k * e(3) + v - k * e(5) * vl;
        let t2 = k * e(4) + vl + k * e(5) * v;
        [
            lhs + model.eta,
            sign.ia as f64 * ba,
            sign.ial as f64 * bal,
            sign.iw as f64 * bw,
            -a1 * a1 + t1 * t1 + t2 * t2,
            -a2 * a2 + t2 * t2 + t1 * t1,
            -a3 * a3 + px * px + py * py,
            -a4 * a4 + px * px + py * py,
            -px * px + b.l * b.l,
            -py * py + b.l * b.l,
            -v * v + b.v * b.v,
            -vl * vl + b.vl * b.vl,
            px * px + py * py - b.d_min * b.d_min,
        ]
    }

    #[test]
    fn sign_assignments_are_a_bijection() {
        let all = SignAssignment::all();
        for (i, s) in all.iter().enumerate() {
            assert_eq!(s.index(), i);
        }
        let distinct: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(distinct.len(), 8);
        assert_eq!(all[0], SignAssignment { ia: 1, ial: 1, iw: 1 });
    }

    #[test]
    fn speed_limit_constraint_coefficients() {
        let model = CertificateModel::new(payloads::kg_0_0(), Bounds::default());
        let g = model.gammas(SignAssignment::from_index(0), 0.6);
        assert_eq!(g[10].coeff[(basis::V, basis::V)], -1.0);
        assert_abs_diff_eq!(g[10].coeff[(0, 0)], 1.69, epsilon = 1e-15);
        let nonzero = g[10].coeff.iter().filter(|&&c| c != 0.0).count();
        assert_eq!(nonzero, 2);
    }

    #[test]
    fn clearance_constraint_coefficients() {
        let model = CertificateModel::new(payloads::kg_0_0(), Bounds::default());
        let g = model.gammas(SignAssignment::from_index(5), 0.6);
        assert_eq!(g[12].coeff[(basis::PX, basis::PX)], 1.0);
        assert_eq!(g[12].coeff[(basis::PY, basis::PY)], 1.0);
        assert_eq!(g[12].coeff[(0, 0)], -1.0);
    }

    #[test]
    fn gammas_match_scalar_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (rho_i, rho) in [payloads::kg_0_0(), payloads::kg_3_5(), payloads::kg_5_9()].iter().enumerate() {
            let model = CertificateModel::new(*rho, Bounds::default());
            for sign in SignAssignment::all() {
                let k = rng.gen_range(0.0..2.0);
                let polys = model.gammas(sign, k);
                for _ in 0..100 {
                    let x = random_point(&mut rng);
                    let expected = gammas_scalar(&model, sign, k, &x);
                    for n in 0..13 {
                        let got = polys[n].eval(&x);
                        assert!(
                            (got - expected[n]).abs() <= 1e-11 * (1.0 + expected[n].abs()),
                            "rho {rho_i} sign {sign:?} gamma {}: {got} vs {}",
                            n + 1,
                            expected[n]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn gram_with_zero_multipliers() {
        let model = CertificateModel::new(payloads::kg_3_5(), Bounds::default());
        let q = model.gram(SignAssignment::from_index(3), 0.7, &MultiplierVector::default());
        let mut expected = Mat9::zeros();
        expected[(0, 0)] = -1.0;
        assert_eq!(q.0, expected);
    }

    #[test]
    fn gram_is_linear_in_multipliers() {
        let model = CertificateModel::new(payloads::kg_5_9(), Bounds::default());
        let sign = SignAssignment::from_index(6);
        let p = MultiplierVector(std::array::from_fn(|i| 0.3 + i as f64 * 0.7));
        let p2 = MultiplierVector(p.0.map(|x| 2.0 * x));
        let q0 = model.gram(sign, 0.5, &MultiplierVector::default()).0;
        let d1 = model.gram(sign, 0.5, &p).0 - q0;
        let d2 = model.gram(sign, 0.5, &p2).0 - q0;
        assert_abs_diff_eq!(d2, d1 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn gram_is_symmetric() {
        let model = CertificateModel::new(payloads::kg_0_0(), Bounds::default());
        let cp = CertificatePoint::uniform(0.61, 1.3);
        assert!(model.grams(&cp).iter().all(GramMatrix::is_symmetric));
    }

    #[test]
    fn gram_identity_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = CertificateModel::new(payloads::kg_0_0(), Bounds::default());
        for _ in 0..20 {
            let sign = SignAssignment::from_index(rng.gen_range(0..8));
            let k = rng.gen_range(0.0..2.0);
            let p = MultiplierVector(std::array::from_fn(|_| rng.gen_range(0.0..10.0)));
            let q = model.gram(sign, k, &p);
            for _ in 0..50 {
                let x = random_point(&mut rng);
                let g = gammas_scalar(&model, sign, k, &x);
                let rhs = -1.0 - p.0.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                let lhs = (x.transpose() * q.0 * x)[(0, 0)];
                assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
            }
        }
    }

    #[test]
    fn gram_derivative_in_multiplier_is_constant() {
        let model = CertificateModel::new(payloads::kg_3_5(), Bounds::default());
        let sign = SignAssignment::from_index(2);
        let base = MultiplierVector::uniform(0.4);
        let slope = |at: f64| {
            let mut lo = base;
            let mut hi = base;
            lo.0[4] = at;
            hi.0[4] = at + 0.5;
            (model.gram(sign, 0.8, &hi).0 - model.gram(sign, 0.8, &lo).0) / 0.5
        };
        assert_abs_diff_eq!(slope(0.1), slope(7.0), epsilon = 1e-12);
    }

    #[test]
    fn identity_minors_are_one() {
        let minors = principal_minors(&GramMatrix::identity());
        assert_eq!(minors.len(), 511);
        assert!(minors.iter().all(|&(_, m)| (m - 1.0).abs() < 1e-15));
        let (m, s) = min_principal_minor(&GramMatrix::identity());
        assert_eq!(m, 1.0);
        assert_eq!(s, Subset::from_indices(&[0]));
    }

    #[test]
    fn diagonal_minors_are_products() {
        let d = [2.0, -1.0, 3.0, 0.5, 1.5, -2.0, 4.0, 0.25, 1.0];
        let q = GramMatrix::from_diagonal(&d);
        for (s, m) in principal_minors(&q) {
            let prod: f64 = s.indices().map(|i| d[i]).product();
            assert_abs_diff_eq!(m, prod, epsilon = 1e-12 * prod.abs().max(1.0));
        }
    }

    #[test]
    fn single_negative_diagonal_entry() {
        let d = [2.0, -1.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let q = GramMatrix::from_diagonal(&d);
        // brute force: the most negative product contains index 1 and every
        // entry greater than one
        let mut best = (f64::INFINITY, Subset(0));
        for mask in 1u16..512 {
            let s = Subset(mask);
            let prod: f64 = s.indices().map(|i| d[i]).product();
            if prod < best.0 {
                best = (prod, s);
            }
        }
        let (m, s) = min_principal_minor(&q);
        assert_abs_diff_eq!(m, best.0, epsilon = 1e-6);
        assert_eq!(s, best.1);
        assert!(s.contains(1));
        assert_eq!(m, -(2.0 * 3.0 * 4.0 * 5.0 * 6.0 * 7.0 * 8.0 * 9.0));
    }

    #[test]
    fn rank_deficient_psd_minimum_is_zero() {
        let v = BasisVector::from_fn(|i, _| (i as f64 + 1.0) * 0.3);
        let w = BasisVector::from_fn(|i, _| ((i * 7 % 5) as f64) - 2.0);
        let q = GramMatrix(v * v.transpose() + w * w.transpose());
        let (m, _) = min_principal_minor(&q);
        assert!(m.abs() < 1e-9, "{m}");
    }

    #[test]
    fn subset_order_is_lexicographic() {
        let a = Subset::from_indices(&[0]);
        let b = Subset::from_indices(&[0, 1]);
        let c = Subset::from_indices(&[0, 2]);
        let d = Subset::from_indices(&[1]);
        assert!(a < b && b < c && c < d);
        assert_eq!(Subset::all().count(), 511);
        assert_eq!(c.to_string(), "{0,2}");
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, kind: usize) -> Mat9 {
        let a = Mat9::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        match kind {
            // positive definite
            0 => a * a.transpose() + Mat9::identity() * 0.1,
            // positive semidefinite, rank 5
            1 => {
                let b = SMatrix::<f64, 9, 5>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
                b * b.transpose()
            }
            // indefinite
            _ => a + a.transpose(),
        }
    }

    #[test]
    fn sylvester_agrees_with_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..200 {
            let q = random_symmetric(&mut rng, trial % 3);
            let scale = q.norm().max(1.0);
            let eig_psd = SymmetricEigen::new(q).eigenvalues.min() >= -1e-9 * scale;
            let minors_psd = principal_minors(&GramMatrix(q))
                .iter()
                .all(|&(s, m)| m >= -1e-9 * scale.powi(s.len() as i32));
            assert_eq!(eig_psd, minors_psd, "trial {trial}");
        }
    }

    #[test]
    fn zero_multipliers_are_not_valid() {
        let model = CertificateModel::new(payloads::kg_0_0(), Bounds::default());
        assert!(!model.is_valid(&CertificatePoint::uniform(0.6, 0.0), DEFAULT_TOL));
    }

    #[test]
    fn document_roundtrip() {
        let model = CertificateModel::new(payloads::kg_3_5(), Bounds::default());
        let mut cp = CertificatePoint::uniform(0.64, 0.1);
        cp.multipliers[3].0[7] = 2.5;
        let doc = CertificateDocument::new(&cp, &model, DEFAULT_TOL, CertificateMetadata::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cert.json");
        doc.save(&path).unwrap();
        let back = CertificateDocument::load(&path).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.point(), cp);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["rho"].as_array().unwrap().len(), 12);
        assert_eq!(v["multipliers"].as_array().unwrap().len(), 8);
        assert_eq!(v["multipliers"][0].as_array().unwrap().len(), 13);
    }
}
