//! Single-qubit channel algebra in the Pauli transfer matrix (PTM) representation.
//!
//! The PTM of a channel `E` is the real 4×4 matrix
//!
//! ```text
//! M[j][k] = Tr[σ_j E(σ_k)] / 2,   σ = (I, X, Y, Z)
//! ```
//!
//! so a state `ρ = (I + r·σ)/2` is the column `(1, r_x, r_y, r_z)` and
//! channels act by left multiplication. A trace-preserving channel has the
//! block form `[[1, 0], [E_n, E_u]]` with `E_u` the 3×3 unital block and `E_n`
//! the non-unital shift.
//!
//! All scalar metrics are the d = 2 specializations. For general dimension
//! the BEPG bound reads `ε ≥ ε_in ≥ (d-1)/d · (1 - √u)` and the unitarity is
//! `u = d/(d-1) ∫dψ Tr[E(ψ - I/d)]²`; only d = 2 is implemented.

use nalgebra::{Matrix2, Matrix3, Matrix4, Vector3, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Default tolerance on Choi eigenvalues for CPTP checks.
pub const DEFAULT_CPTP_TOL: f64 = 1e-8;

/// Tolerance on the first row when checking trace preservation.
const TP_TOL: f64 = 1e-9;

/// Below this exact IEPG the quadratic coefficient `c` is left undefined.
const C_DEFINED_MIN_EPS: f64 = 1e-9;

/// Pauli matrices `(I, X, Y, Z)`.
pub fn paulis() -> [Matrix2<Complex64>; 4] {
    let o = Complex64::new(0.0, 0.0);
    let l = Complex64::new(1.0, 0.0);
    let i = Complex64::new(0.0, 1.0);
    [
        Matrix2::new(l, o, o, l),
        Matrix2::new(o, l, l, o),
        Matrix2::new(o, -i, i, o),
        Matrix2::new(l, o, o, -l),
    ]
}

/// Real 4×4 Pauli transfer matrix of a qubit channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PauliTransferMatrix {
    m: Matrix4<f64>,
}

impl PauliTransferMatrix {
    pub fn identity() -> Self {
        Self {
            m: Matrix4::identity(),
        }
    }

    /// Wraps a raw matrix without validation.
    pub fn from_matrix(m: Matrix4<f64>) -> Self {
        Self { m }
    }

    /// Row-major 16 element constructor (the JSON layout).
    pub fn from_row_major(entries: &[f64]) -> Result<Self> {
        if entries.len() != 16 {
            return Err(Error::InvalidParameter(format!(
                "PTM needs 16 entries, got {}",
                entries.len()
            )));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("PTM entries must be finite".into()));
        }
        Ok(Self {
            m: Matrix4::from_row_slice(entries),
        })
    }

    /// Builds the block form `[[1, 0], [non_unital, unital]]`.
    pub fn from_blocks(unital: Matrix3<f64>, non_unital: Vector3<f64>) -> Self {
        let mut m = Matrix4::zeros();
        m[(0, 0)] = 1.0;
        m.fixed_view_mut::<3, 3>(1, 1).copy_from(&unital);
        m.fixed_view_mut::<3, 1>(1, 0).copy_from(&non_unital);
        Self { m }
    }

    /// PTM of `ρ ↦ U ρ U†`.
    pub fn from_unitary(u: &Matrix2<Complex64>) -> Self {
        Self::from_kraus(std::slice::from_ref(u))
    }

    /// PTM of `ρ ↦ Σ K ρ K†`.
    pub fn from_kraus(kraus: &[Matrix2<Complex64>]) -> Self {
        let p = paulis();
        let mut m = Matrix4::zeros();
        for j in 0..4 {
            for k in 0..4 {
                let mut acc = Complex64::new(0.0, 0.0);
                for op in kraus {
                    acc += (p[j] * op * p[k] * op.adjoint()).trace();
                }
                m[(j, k)] = 0.5 * acc.re;
            }
        }
        Self { m }
    }

    /// Rotation of the Bloch sphere, embedded as `diag(1, R)`.
    pub fn from_rotation(r: &Matrix3<f64>) -> Self {
        Self::from_blocks(*r, Vector3::zeros())
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    pub fn row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[4 * r + c] = self.m[(r, c)];
            }
        }
        out
    }

    /// `E_u`, the lower-right 3×3 block.
    pub fn unital(&self) -> Matrix3<f64> {
        self.m.fixed_view::<3, 3>(1, 1).into_owned()
    }

    /// `E_n`, the lower-left column.
    pub fn non_unital(&self) -> Vector3<f64> {
        self.m.fixed_view::<3, 1>(1, 0).into_owned()
    }

    /// Largest deviation of the first row from `(1, 0, 0, 0)`.
    pub fn tp_deviation(&self) -> f64 {
        let row = self.m.row(0);
        (row[0] - 1.0)
            .abs()
            .max(row[1].abs())
            .max(row[2].abs())
            .max(row[3].abs())
    }

    pub fn is_trace_preserving(&self, tol: f64) -> bool {
        self.tp_deviation() <= tol
    }

    /// `self ∘ first`: `first` acts before `self`.
    pub fn after(&self, first: &Self) -> Self {
        Self {
            m: self.m * first.m,
        }
    }

    pub fn transpose(&self) -> Self {
        Self {
            m: self.m.transpose(),
        }
    }

    /// Applies the channel to a state column `(1, r)`.
    pub fn apply(&self, state: &Vector4<f64>) -> Vector4<f64> {
        self.m * state
    }

    /// Forces the first row to `(1, 0, 0, 0)`.
    pub fn project_tp(&self) -> Self {
        let mut m = self.m;
        m[(0, 0)] = 1.0;
        m[(0, 1)] = 0.0;
        m[(0, 2)] = 0.0;
        m[(0, 3)] = 0.0;
        Self { m }
    }

    /// Normalized Choi matrix `J = Σ_ab |a⟩⟨b| ⊗ E(|a⟩⟨b|) / 2` (unit trace for TP maps).
    pub fn choi(&self) -> Matrix4<Complex64> {
        let p = paulis();
        let mut j = Matrix4::<Complex64>::zeros();
        for a in 0..2 {
            for b in 0..2 {
                // |a⟩⟨b| = Σ_k c_k σ_k with c_k = Tr[σ_k |a⟩⟨b|]/2 = (σ_k)_{ba}/2
                let mut out = Matrix2::<Complex64>::zeros();
                for k in 0..4 {
                    let c = p[k][(b, a)] * 0.5;
                    if c.norm() == 0.0 {
                        continue;
                    }
                    for jj in 0..4 {
                        out += p[jj] * (c * self.m[(jj, k)]);
                    }
                }
                for r in 0..2 {
                    for s in 0..2 {
                        j[(2 * a + r, 2 * b + s)] = out[(r, s)] * 0.5;
                    }
                }
            }
        }
        j
    }

    /// Eigenvalues of the normalized Choi matrix, ascending.
    pub fn choi_eigenvalues(&self) -> [f64; 4] {
        let j = self.choi();
        let herm = (j + j.adjoint()) * Complex64::new(0.5, 0.0);
        let eig = herm.symmetric_eigenvalues();
        let mut out = [eig[0], eig[1], eig[2], eig[3]];
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out
    }

    /// Recovers the PTM from a normalized Choi matrix.
    pub fn from_choi(j: &Matrix4<Complex64>) -> Self {
        // E(X) = 2 Tr_1[(X^T ⊗ I) J]
        let p = paulis();
        let mut m = Matrix4::zeros();
        for k in 0..4 {
            let xt = p[k].transpose();
            let mut ex = Matrix2::<Complex64>::zeros();
            for a in 0..2 {
                for b in 0..2 {
                    let coeff = xt[(b, a)];
                    if coeff.norm() == 0.0 {
                        continue;
                    }
                    for r in 0..2 {
                        for s in 0..2 {
                            ex[(r, s)] += coeff * j[(2 * a + r, 2 * b + s)];
                        }
                    }
                }
            }
            ex *= Complex64::new(2.0, 0.0);
            for jj in 0..4 {
                m[(jj, k)] = 0.5 * (p[jj] * ex).trace().re;
            }
        }
        Self { m }
    }
}

impl std::ops::Mul for PauliTransferMatrix {
    type Output = PauliTransferMatrix;
    fn mul(self, rhs: Self) -> Self {
        Self { m: self.m * rhs.m }
    }
}

impl std::ops::Mul for &PauliTransferMatrix {
    type Output = PauliTransferMatrix;
    fn mul(self, rhs: Self) -> PauliTransferMatrix {
        PauliTransferMatrix { m: self.m * rhs.m }
    }
}

#[derive(Serialize, Deserialize)]
struct PtmJson {
    ptm: Vec<f64>,
}

impl Serialize for PauliTransferMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PtmJson {
            ptm: self.row_major().to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PauliTransferMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = PtmJson::deserialize(d)?;
        PauliTransferMatrix::from_row_major(&raw.ptm).map_err(serde::de::Error::custom)
    }
}

/// Rotation matrix for angle `theta` about the unit `axis` (right-handed).
///
/// This is the Bloch-sphere action of `exp(-iθ n·σ/2)`.
pub fn rotation_matrix(axis: &Vector3<f64>, theta: f64) -> Matrix3<f64> {
    let n = axis.normalize();
    let k = n.cross_matrix();
    Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

/// Channel families with their parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelSpec {
    /// `ρ ↦ (1-p)ρ + p·I/2`.
    Depolarizing { p: f64 },
    /// Phase flip with probability `p`: x, y scaled by `1 - 2p`.
    Dephasing { p: f64 },
    /// Relaxation toward `+z` with probability `gamma`.
    AmplitudeDamping { gamma: f64 },
    /// Unitary rotation by `angle` about `axis`.
    UnitaryRotation { axis: [f64; 3], angle: f64 },
}

fn check_probability(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) || !v.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "{name} must lie in [0, 1], got {v}"
        )));
    }
    Ok(())
}

/// Builds a CPTP channel of the requested family.
pub fn make_channel(spec: &ChannelSpec) -> Result<PauliTransferMatrix> {
    match *spec {
        ChannelSpec::Depolarizing { p } => {
            check_probability("p", p)?;
            let s = 1.0 - p;
            Ok(PauliTransferMatrix::from_matrix(Matrix4::from_diagonal(
                &Vector4::new(1.0, s, s, s),
            )))
        }
        ChannelSpec::Dephasing { p } => {
            check_probability("p", p)?;
            let s = 1.0 - 2.0 * p;
            Ok(PauliTransferMatrix::from_matrix(Matrix4::from_diagonal(
                &Vector4::new(1.0, s, s, 1.0),
            )))
        }
        ChannelSpec::AmplitudeDamping { gamma } => {
            check_probability("gamma", gamma)?;
            let s = (1.0 - gamma).sqrt();
            Ok(PauliTransferMatrix::from_blocks(
                Matrix3::from_diagonal(&Vector3::new(s, s, 1.0 - gamma)),
                Vector3::new(0.0, 0.0, gamma),
            ))
        }
        ChannelSpec::UnitaryRotation { axis, angle } => {
            let a = Vector3::from(axis);
            let norm = a.norm();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "rotation axis must be a unit vector, |axis| = {norm}"
                )));
            }
            if !angle.is_finite() {
                return Err(Error::InvalidParameter("rotation angle must be finite".into()));
            }
            Ok(PauliTransferMatrix::from_rotation(&rotation_matrix(&a, angle)))
        }
    }
}

/// `a ∘ b`: the channel `b` is applied first.
pub fn compose(a: &PauliTransferMatrix, b: &PauliTransferMatrix) -> PauliTransferMatrix {
    a.after(b)
}

fn require_tp(e: &PauliTransferMatrix) -> Result<()> {
    let dev = e.tp_deviation();
    if dev > TP_TOL {
        return Err(Error::NotTracePreserving(dev));
    }
    Ok(())
}

/// Benchmarking error per gate `ε = Tr(1 - E_u)/6 = 1 - F`.
pub fn bepg(e: &PauliTransferMatrix) -> Result<f64> {
    require_tp(e)?;
    Ok((3.0 - e.unital().trace()) / 6.0)
}

/// Haar-average fidelity `F = 1 - ε`.
pub fn fidelity(e: &PauliTransferMatrix) -> Result<f64> {
    bepg(e).map(|eps| 1.0 - eps)
}

/// Unitarity `u = Tr(E_uᵀ E_u)/3`.
pub fn unitarity(e: &PauliTransferMatrix) -> f64 {
    let eu = e.unital();
    (eu.transpose() * eu).trace() / 3.0
}

/// Closed-form incoherent error `(1 - √u)/2` from a unitarity value.
pub fn iepg_from_unitarity(u: f64) -> Result<f64> {
    if !u.is_finite() || u < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "unitarity must be finite and non-negative, got {u}"
        )));
    }
    Ok(0.5 * (1.0 - u.sqrt()))
}

/// Incoherent error per gate from the closed form.
pub fn iepg(e: &PauliTransferMatrix) -> Result<f64> {
    require_tp(e)?;
    iepg_from_unitarity(unitarity(e))
}

/// Signed-SVD normal form `E = U ∘ E' ∘ V` with `U, V ∈ SO(3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalForm {
    /// Left correction `U` (applied last).
    pub u_corr: Matrix3<f64>,
    /// Signed singular values, descending.
    pub sigma: Vector3<f64>,
    /// z-component of the corrected non-unital vector.
    pub lambda: f64,
    /// Full corrected non-unital vector `Uᵀ E_n`.
    pub corrected_shift: Vector3<f64>,
    /// Right correction `V` (applied first).
    pub v_corr: Matrix3<f64>,
    /// `δ` with `Σ = 1 - ε(E')δ`; `None` when `ε(E')` is numerically zero.
    pub delta: Option<Vector3<f64>>,
    /// Quadratic coefficient in `u = 1 - 4ε' + (4 + c)ε'²`.
    pub c: Option<f64>,
}

impl CanonicalForm {
    /// The corrected channel `E'` with `E'_u = diag(Σ)`.
    pub fn corrected(&self) -> PauliTransferMatrix {
        PauliTransferMatrix::from_blocks(Matrix3::from_diagonal(&self.sigma), self.corrected_shift)
    }

    /// Exact IEPG `ε(E') = (3 - ΣΣ)/6`.
    pub fn exact_iepg(&self) -> f64 {
        (3.0 - self.sigma.sum()) / 6.0
    }

    /// The composite coherent error `W = V ∘ U`.
    pub fn coherent_part(&self) -> PauliTransferMatrix {
        PauliTransferMatrix::from_rotation(&(self.v_corr * self.u_corr))
    }

    /// Rebuilds `E_u = U diag(Σ) V`.
    pub fn reassemble_unital(&self) -> Matrix3<f64> {
        self.u_corr * Matrix3::from_diagonal(&self.sigma) * self.v_corr
    }
}

/// Signed SVD of the unital block with both factors in SO(3).
pub fn canonicalize(e: &PauliTransferMatrix) -> CanonicalForm {
    let eu = e.unital();
    let svd = eu.svd(true, true);
    let mut u = svd.u.expect("requested U");
    let mut vt = svd.v_t.expect("requested V^T");
    let mut s = svd.singular_values;

    // sort descending (nalgebra usually does, but do not rely on it)
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
    let (u0, vt0, s0) = (u, vt, s);
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &u0.column(src));
        vt.set_row(dst, &vt0.row(src));
        s[dst] = s0[src];
    }

    if u.determinant() < 0.0 {
        let col = -u.column(2);
        u.set_column(2, &col);
        s[2] = -s[2];
    }
    if vt.determinant() < 0.0 {
        let row = -vt.row(2);
        vt.set_row(2, &row);
        s[2] = -s[2];
    }

    let shift = u.transpose() * e.non_unital();
    let eps_prime = (3.0 - s.sum()) / 6.0;
    let (delta, c) = if eps_prime > C_DEFINED_MIN_EPS {
        let d = (Vector3::repeat(1.0) - s) / eps_prime;
        let c = d.norm_squared() / 3.0 - 4.0;
        (Some(d), Some(c))
    } else {
        (None, None)
    };

    CanonicalForm {
        u_corr: u,
        sigma: s,
        lambda: shift[2],
        corrected_shift: shift,
        v_corr: vt,
        delta,
        c,
    }
}

/// BEPG of the composite coherent error `W = V ∘ U`.
pub fn coherent_error(e: &PauliTransferMatrix) -> Result<f64> {
    require_tp(e)?;
    bepg(&canonicalize(e).coherent_part())
}

/// Interval on the optimal diamond distance attainable by unitary correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiamondInterval {
    pub lower: f64,
    pub upper: f64,
    pub midpoint: f64,
    pub half_width: f64,
}

impl DiamondInterval {
    fn from_bounds(lower: f64, upper: f64) -> Self {
        Self {
            lower,
            upper,
            midpoint: 0.5 * (lower + upper),
            half_width: 0.5 * (upper - lower),
        }
    }
}

/// Upper-bound slope `3/2 + 3√2`.
pub fn diamond_upper_slope() -> f64 {
    1.5 + 3.0 * std::f64::consts::SQRT_2
}

/// `[3/2 ε_in, (3/2 + 3√2) ε_in]`.
pub fn diamond_bounds(epsilon_in: f64) -> Result<DiamondInterval> {
    diamond_bounds_with_uncertainty(epsilon_in, 0.0)
}

/// Diamond interval widened to first order by `ε_in ± sigma`.
pub fn diamond_bounds_with_uncertainty(epsilon_in: f64, sigma: f64) -> Result<DiamondInterval> {
    if !epsilon_in.is_finite() || epsilon_in < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "epsilon_in must be non-negative, got {epsilon_in}"
        )));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "uncertainty must be non-negative, got {sigma}"
        )));
    }
    let lower = 1.5 * (epsilon_in - sigma).max(0.0);
    let upper = diamond_upper_slope() * (epsilon_in + sigma);
    Ok(DiamondInterval::from_bounds(lower, upper))
}

/// True iff the first row is `(1,0,0,0)` within `tol` and all Choi eigenvalues are `≥ -tol`.
pub fn is_cptp(e: &PauliTransferMatrix, tol: f64) -> bool {
    e.is_trace_preserving(tol) && e.choi_eigenvalues()[0] >= -tol
}

/// Sum of the negative Choi eigenvalues' magnitudes.
pub fn negative_choi_weight(e: &PauliTransferMatrix) -> f64 {
    e.choi_eigenvalues().iter().filter(|&&x| x < 0.0).map(|x| -x).sum()
}

/// All scalar metrics of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub epsilon: f64,
    pub fidelity: f64,
    pub unitarity: f64,
    pub epsilon_in: f64,
    pub epsilon_in_exact: f64,
    pub epsilon_coh: f64,
    pub diamond: DiamondInterval,
}

impl ChannelMetrics {
    pub fn of(e: &PauliTransferMatrix) -> Result<Self> {
        let epsilon = bepg(e)?;
        let u = unitarity(e);
        let epsilon_in = iepg_from_unitarity(u)?;
        let canon = canonicalize(e);
        let epsilon_coh = bepg(&canon.coherent_part())?;
        Ok(Self {
            epsilon,
            fidelity: 1.0 - epsilon,
            unitarity: u,
            epsilon_in,
            epsilon_in_exact: canon.exact_iepg(),
            epsilon_coh,
            diamond: diamond_bounds(epsilon_in.max(0.0))?,
        })
    }
}

/// Random CPTP channel from a Ginibre Choi matrix of the given Kraus rank (1–4).
pub fn random_channel<R: rand::Rng + ?Sized>(rng: &mut R, rank: usize) -> Result<PauliTransferMatrix> {
    if !(1..=4).contains(&rank) {
        return Err(Error::InvalidParameter(format!("Kraus rank must be 1..=4, got {rank}")));
    }
    let normal = rand_distr::StandardNormal;
    let mut g = nalgebra::DMatrix::<Complex64>::zeros(4, rank);
    for v in g.iter_mut() {
        *v = Complex64::new(rng.sample(normal), rng.sample(normal));
    }
    let j = &g * g.adjoint();
    // normalize so that the input marginal is I/2
    let t = Matrix2::from_fn(|a, b| j[(2 * a, 2 * b)] + j[(2 * a + 1, 2 * b + 1)]) * Complex64::new(2.0, 0.0);
    let eig = ((t + t.adjoint()) * Complex64::new(0.5, 0.0)).symmetric_eigen();
    let d = Matrix2::from_diagonal(&eig.eigenvalues.map(|l| Complex64::new(1.0 / l.sqrt(), 0.0)));
    let s = eig.eigenvectors * d * eig.eigenvectors.adjoint();
    let mut s4 = Matrix4::<Complex64>::zeros();
    for a in 0..2 {
        for b in 0..2 {
            for r in 0..2 {
                s4[(2 * a + r, 2 * b + r)] = s[(a, b)];
            }
        }
    }
    let j4 = Matrix4::from_fn(|r, c| j[(r, c)]);
    Ok(PauliTransferMatrix::from_choi(&(s4 * j4 * s4.adjoint())).project_tp())
}

/// Standard single-qubit unitaries used by tests and pulse design.
pub fn rotation_unitary(axis: &Vector3<f64>, theta: f64) -> Matrix2<Complex64> {
    let n = axis.normalize();
    let p = paulis();
    let c = Complex64::new((theta / 2.0).cos(), 0.0);
    let s = Complex64::new(0.0, -(theta / 2.0).sin());
    let r = |x: f64| Complex64::new(x, 0.0);
    p[0] * c + (p[1] * r(n[0]) + p[2] * r(n[1]) + p[3] * r(n[2])) * s
}
