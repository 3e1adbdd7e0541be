//! Driven single-qubit Lindblad dynamics in the rotating frame of the drive.
//!
//! The Hamiltonian is `H = -(Δ/2)σz + s·(I(t)σx + Q(t)σy)/2` with `s` the B1
//! scale. Relaxation drives the Bloch vector toward `+z` at `1/t1`; the
//! transverse components decay at `1/t2`. The master equation is integrated
//! with classical RK4 on the Bloch (affine PTM) representation, which is a
//! linear change of variables of the vectorized density matrix.

use std::io::{Read, Write};

use nalgebra::{Matrix2, Matrix4, Vector3, Vector4};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{negative_choi_weight, paulis, PauliTransferMatrix};
use crate::error::{Error, Result};
use crate::pulses::Waveform;

/// Negative Choi weight above which a simulated gate is rejected.
const MAX_NEGATIVE_CHOI: f64 = 0.05;

/// 2×2 density matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityMatrix(Matrix2<Complex64>);

impl DensityMatrix {
    pub fn from_bloch(r: &Vector3<f64>) -> Self {
        let p = paulis();
        let c = |x: f64| Complex64::new(0.5 * x, 0.0);
        Self(p[0] * c(1.0) + p[1] * c(r[0]) + p[2] * c(r[1]) + p[3] * c(r[2]))
    }

    /// `|0⟩⟨0|`, the `+z` state.
    pub fn ground() -> Self {
        Self::from_bloch(&Vector3::z())
    }

    pub fn from_matrix(m: Matrix2<Complex64>) -> Result<Self> {
        let d = Self(m);
        if !d.is_physical(1e-10) {
            return Err(Error::InvalidParameter("density matrix is not physical".into()));
        }
        Ok(d)
    }

    pub fn matrix(&self) -> &Matrix2<Complex64> {
        &self.0
    }

    pub fn bloch(&self) -> Vector3<f64> {
        let p = paulis();
        Vector3::new(
            (p[1] * self.0).trace().re,
            (p[2] * self.0).trace().re,
            (p[3] * self.0).trace().re,
        )
    }

    /// Hermitian, unit trace and positive within `tol`.
    pub fn is_physical(&self, tol: f64) -> bool {
        let herm = (self.0 - self.0.adjoint()).norm() <= tol;
        let tr = (self.0.trace() - Complex64::new(1.0, 0.0)).norm() <= tol;
        herm && tr && self.bloch().norm() <= 1.0 + tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Delta,
    Lorentzian,
    Gaussian,
    Mixture,
    Tabulated,
}

/// A distribution carried by its quadrature rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityDistribution {
    pub kind: DistributionKind,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl ProbabilityDistribution {
    pub fn delta(x: f64) -> Self {
        Self {
            kind: DistributionKind::Delta,
            points: vec![x],
            weights: vec![1.0],
        }
    }

    /// Lorentzian with half width `hwhm` on `n` uniform points spaced `hwhm/2`.
    ///
    /// The grid covers `±(n-1)/4` half widths; the truncated tail mass is
    /// roughly `2/(π·K)` with `K = (n-1)/4` and is renormalized away.
    pub fn lorentzian(center: f64, hwhm: f64, n: usize) -> Result<Self> {
        if !(hwhm > 0.0) || n < 2 {
            return Err(Error::InvalidParameter(
                "Lorentzian needs a positive width and at least 2 points".into(),
            ));
        }
        let k = (n - 1) as f64 / 4.0;
        Self::on_grid(DistributionKind::Lorentzian, center, k * hwhm, n, |x| {
            1.0 / (1.0 + (x / hwhm).powi(2))
        })
    }

    /// Gaussian with standard deviation `sigma` on `n` uniform points over `±6σ`.
    pub fn gaussian(center: f64, sigma: f64, n: usize) -> Result<Self> {
        if !(sigma > 0.0) || n < 2 {
            return Err(Error::InvalidParameter(
                "Gaussian needs a positive width and at least 2 points".into(),
            ));
        }
        Self::on_grid(DistributionKind::Gaussian, center, 6.0 * sigma, n, |x| {
            (-0.5 * (x / sigma).powi(2)).exp()
        })
    }

    fn on_grid(kind: DistributionKind, center: f64, half_span: f64, n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let h = 2.0 * half_span / (n - 1) as f64;
        let offsets: Vec<f64> = (0..n).map(|i| -half_span + h * i as f64).collect();
        let raw: Vec<f64> = offsets.iter().map(|&x| f(x)).collect();
        let total: f64 = raw.iter().sum();
        Ok(Self {
            kind,
            points: offsets.iter().map(|x| center + x).collect(),
            weights: raw.iter().map(|w| w / total).collect(),
        })
    }

    /// Weighted union of component rules; points are merged and sorted.
    pub fn mixture(components: &[(f64, ProbabilityDistribution)]) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.0).sum();
        if components.is_empty() || !(total > 0.0) || components.iter().any(|c| c.0 < 0.0) {
            return Err(Error::InvalidParameter("mixture weights must be non-negative with positive sum".into()));
        }
        let mut pairs: Vec<(f64, f64)> = components
            .iter()
            .flat_map(|(w, d)| d.quadrature().map(move |(x, v)| (x, v * w / total)))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut points: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut weights: Vec<f64> = Vec::with_capacity(pairs.len());
        for (x, w) in pairs {
            if points.last() == Some(&x) {
                *weights.last_mut().unwrap() += w;
            } else {
                points.push(x);
                weights.push(w);
            }
        }
        Ok(Self {
            kind: DistributionKind::Mixture,
            points,
            weights,
        })
    }

    /// User-supplied rule; weights are normalized.
    pub fn tabulated(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::InvalidParameter("tabulated distribution needs matching nonempty columns".into()));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("tabulated points must be strictly increasing".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidParameter("weights sum to zero".into()));
        }
        Ok(Self {
            kind: DistributionKind::Tabulated,
            points,
            weights: weights.iter().map(|w| w / total).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn quadrature(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn mean(&self) -> f64 {
        self.quadrature().map(|(x, w)| x * w).sum()
    }

    /// Reads a `point, weight` CSV.
    pub fn from_csv<R: Read>(input: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            point: f64,
            weight: f64,
        }
        let mut rd = csv::Reader::from_reader(input);
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for row in rd.deserialize::<Row>() {
            let row = row?;
            points.push(row.point);
            weights.push(row.weight);
        }
        Self::tabulated(points, weights)
    }

    pub fn to_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["point", "weight"])?;
        for (x, v) in self.quadrature() {
            w.write_record(&[format!("{x:.17e}"), format!("{v:.17e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Dissipation and inhomogeneity parameters. Times in seconds, detunings in rad/s.
#[derive(Debug, Clone, PartialEq)]
pub struct LindbladParams {
    pub t1: f64,
    pub t2: f64,
    pub larmor_dist: ProbabilityDistribution,
    pub b1_dist: ProbabilityDistribution,
    pub dt: f64,
}

impl LindbladParams {
    /// `f64::INFINITY` disables a decay channel.
    pub fn new(
        t1: f64,
        t2: f64,
        larmor_dist: ProbabilityDistribution,
        b1_dist: ProbabilityDistribution,
        dt: f64,
    ) -> Result<Self> {
        let p = Self {
            t1,
            t2,
            larmor_dist,
            b1_dist,
            dt,
        };
        p.validate()?;
        Ok(p)
    }

    /// No dissipation, no inhomogeneity.
    pub fn ideal(dt: f64) -> Self {
        Self {
            t1: f64::INFINITY,
            t2: f64::INFINITY,
            larmor_dist: ProbabilityDistribution::delta(0.0),
            b1_dist: ProbabilityDistribution::delta(1.0),
            dt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t1 > 0.0) || !(self.t2 > 0.0) {
            return Err(Error::InvalidParameter("t1 and t2 must be positive".into()));
        }
        if self.t2 > 2.0 * self.t1 * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "t2 = {} exceeds 2·t1 = {}",
                self.t2,
                2.0 * self.t1
            )));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidParameter("dt must be positive".into()));
        }
        for d in [&self.larmor_dist, &self.b1_dist] {
            if d.is_empty() {
                return Err(Error::InvalidParameter("empty quadrature".into()));
            }
            let s: f64 = d.weights().iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter("distribution weights must sum to 1".into()));
            }
        }
        Ok(())
    }

    /// Pure dephasing rate `1/t_φ = 1/t2 - 1/(2·t1)`.
    pub fn dephasing_rate(&self) -> f64 {
        (1.0 / self.t2 - 0.5 / self.t1).max(0.0)
    }

    fn rates(&self) -> (f64, f64) {
        (1.0 / self.t1, 1.0 / self.t2)
    }
}

/// Affine generator on `(1, x, y, z)` for a constant drive.
fn generator(omega: Vector3<f64>, g1: f64, g2: f64) -> Matrix4<f64> {
    let (wx, wy, wz) = (omega[0], omega[1], omega[2]);
    Matrix4::new(
        0.0, 0.0, 0.0, 0.0, //
        0.0, -g2, -wz, wy, //
        0.0, wz, -g2, -wx, //
        g1, -wy, wx, -g1,
    )
}

/// One RK4 step of `dv/dt = L v`, written as a matrix.
fn rk4_map(l: &Matrix4<f64>, h: f64) -> Matrix4<f64> {
    let a = l * h;
    let a2 = a * a;
    let a3 = a2 * a;
    let a4 = a3 * a;
    Matrix4::identity() + a + a2 * 0.5 + a3 / 6.0 + a4 / 24.0
}

fn drive_vector(sample: Complex64, delta: f64, b1: f64) -> Vector3<f64> {
    Vector3::new(b1 * sample.re, b1 * sample.im, -delta)
}

fn substeps(wf: &Waveform, dt: f64) -> Result<usize> {
    if dt > wf.dt * (1.0 + 1e-9) {
        return Err(Error::InvalidParameter(format!(
            "integrator step {dt:e} s exceeds the waveform sample period {:e} s",
            wf.dt
        )));
    }
    Ok(((wf.dt / dt) - 1e-9).ceil().max(1.0) as usize)
}

/// Sampled Bloch trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub bloch: Vec<Vector3<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> Vector3<f64> {
        *self.bloch.last().expect("trajectory has the initial point")
    }

    pub fn component(&self, axis: usize) -> Vec<f64> {
        self.bloch.iter().map(|r| r[axis]).collect()
    }

    pub fn density_matrices(&self) -> Vec<DensityMatrix> {
        self.bloch.iter().map(DensityMatrix::from_bloch).collect()
    }
}

/// Integrates one ensemble member from `rho0`, sampled every integrator step.
pub fn evolve(
    rho0: &DensityMatrix,
    wf: &Waveform,
    params: &LindbladParams,
    delta: f64,
    b1_scale: f64,
) -> Result<Trajectory> {
    params.validate()?;
    let n = substeps(wf, params.dt)?;
    let h = wf.dt / n as f64;
    let (g1, g2) = params.rates();
    let r0 = rho0.bloch();
    let mut v = Vector4::new(1.0, r0[0], r0[1], r0[2]);
    let mut times = Vec::with_capacity(wf.len() * n + 1);
    let mut bloch = Vec::with_capacity(wf.len() * n + 1);
    times.push(0.0);
    bloch.push(r0);
    for (k, s) in wf.effective_samples().enumerate() {
        let step = rk4_map(&generator(drive_vector(s, delta, b1_scale), g1, g2), h);
        for j in 0..n {
            v = step * v;
            times.push(k as f64 * wf.dt + (j + 1) as f64 * h);
            bloch.push(Vector3::new(v[1], v[2], v[3]));
        }
    }
    Ok(Trajectory { times, bloch })
}

/// Weighted average of [`evolve`] over the Larmor × B1 quadrature grid.
pub fn ensemble_average(rho0: &DensityMatrix, wf: &Waveform, params: &LindbladParams) -> Result<Trajectory> {
    params.validate()?;
    let grid = ensemble_grid(params);
    let runs: Vec<(f64, Trajectory)> = grid
        .par_iter()
        .map(|&(d, b, w)| evolve(rho0, wf, params, d, b).map(|t| (w, t)))
        .collect::<Result<_>>()?;
    let mut out = Trajectory {
        times: runs[0].1.times.clone(),
        bloch: vec![Vector3::zeros(); runs[0].1.bloch.len()],
    };
    for (w, t) in &runs {
        for (acc, r) in out.bloch.iter_mut().zip(&t.bloch) {
            *acc += r * *w;
        }
    }
    Ok(out)
}

/// `(Δ, b1, weight)` for every tensor-grid point, in fixed order.
pub fn ensemble_grid(params: &LindbladParams) -> Vec<(f64, f64, f64)> {
    params
        .larmor_dist
        .quadrature()
        .flat_map(|(d, wd)| params.b1_dist.quadrature().map(move |(b, wb)| (d, b, wd * wb)))
        .collect()
}

/// Affine propagator of one ensemble member over the full waveform.
pub fn pulse_propagator(wf: &Waveform, params: &LindbladParams, delta: f64, b1_scale: f64) -> Result<Matrix4<f64>> {
    params.validate()?;
    let n = substeps(wf, params.dt)?;
    let h = wf.dt / n as f64;
    let (g1, g2) = params.rates();
    let mut acc = Matrix4::identity();
    for s in wf.effective_samples() {
        let step = rk4_map(&generator(drive_vector(s, delta, b1_scale), g1, g2), h);
        let mut p = step;
        for _ in 1..n {
            p = step * p;
        }
        acc = p * acc;
    }
    Ok(acc)
}

/// Gate PTM for every ensemble member with its quadrature weight.
pub fn ensemble_gate_ptms(wf: &Waveform, params: &LindbladParams) -> Result<Vec<(f64, PauliTransferMatrix)>> {
    ensemble_grid(params)
        .par_iter()
        .map(|&(d, b, w)| pulse_propagator(wf, params, d, b).map(|m| (w, PauliTransferMatrix::from_matrix(m).project_tp())))
        .collect()
}

/// Ensemble-averaged gate PTM with the first row forced to `(1, 0, 0, 0)`.
pub fn gate_ptm_from_pulse(wf: &Waveform, params: &LindbladParams) -> Result<PauliTransferMatrix> {
    let members = ensemble_gate_ptms(wf, params)?;
    let mut m = Matrix4::zeros();
    for (w, p) in &members {
        m += p.matrix() * *w;
    }
    let ptm = PauliTransferMatrix::from_matrix(m).project_tp();
    let neg = negative_choi_weight(&ptm);
    if neg > MAX_NEGATIVE_CHOI {
        return Err(Error::NonPhysical(format!(
            "simulated gate has negative Choi weight {neg:.3e}"
        )));
    }
    Ok(ptm)
}

/// Constant-drive Rabi model. Angular quantities in rad/s, times in s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RabiModel {
    pub delta: f64,
    pub omega: f64,
    pub psi: f64,
    pub t0: f64,
}

impl RabiModel {
    pub fn omega1(&self) -> f64 {
        self.delta.hypot(self.omega)
    }

    /// `(sin θ, cos θ) = (Ω/ω1, -Δ/ω1)`.
    pub fn theta_sin_cos(&self) -> (f64, f64) {
        let w1 = self.omega1();
        if w1 == 0.0 {
            (0.0, 1.0)
        } else {
            (self.omega / w1, -self.delta / w1)
        }
    }

    /// Bloch vector in the drive frame at `t`, starting from `+z` at `t0`.
    pub fn drive_frame(&self, t: f64) -> Vector3<f64> {
        let a = (t - self.t0).max(0.0);
        let (s, c) = self.theta_sin_cos();
        let phase = self.omega1() * a;
        let one_minus_cos = 1.0 - phase.cos();
        let (sp, cp) = self.psi.sin_cos();
        Vector3::new(
            s * c * cp * one_minus_cos + s * sp * phase.sin(),
            s * c * sp * one_minus_cos - s * cp * phase.sin(),
            c * c + s * s * phase.cos(),
        )
    }

    /// Bloch vector in the frame rotating at the Larmor frequency.
    pub fn larmor_frame(&self, t: f64) -> Vector3<f64> {
        to_larmor_frame(&self.drive_frame(t), self.delta, t - self.t0)
    }
}

/// Rotates a drive-frame vector by `-Δ·α` about `z`.
pub fn to_larmor_frame(r: &Vector3<f64>, delta: f64, alpha: f64) -> Vector3<f64> {
    let (s, c) = (delta * alpha).sin_cos();
    Vector3::new(r[0] * c + r[1] * s, -r[0] * s + r[1] * c, r[2])
}

/// `(⟨σx⟩, ⟨σy⟩, ⟨σz⟩)` in the Larmor frame at each time.
pub fn rabi_trajectory(model: &RabiModel, times: &[f64]) -> Vec<[f64; 3]> {
    times
        .iter()
        .map(|&t| {
            let r = model.larmor_frame(t);
            [r[0], r[1], r[2]]
        })
        .collect()
}
