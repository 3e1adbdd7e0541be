//! Gate set tomography on the five experimental pulses.
//!
//! The dataset holds `m_{k,lmn} = ⟨⟨M_k| Q_l Q_m Q_n |ρ_i⟩⟩` for every triple of
//! gates (`Q_n` acts first). Reconstruction minimizes the squared residual over
//! CPTP gate sets: each gate's Choi matrix is `A A†`, and trace preservation is
//! imposed by normalizing `A ↦ (S ⊗ 1) A` with `S = (2·Tr_out A A†)^{-1/2}`.

use std::io::{Read, Write};

use nalgebra::{DVector, Matrix2, Matrix4, Vector4};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarking::{Axis, NoiseModel};
use crate::channels::{bepg, unitarity, PauliTransferMatrix};
use crate::clifford::{self, Primitive, GROUP_SIZE};
use crate::error::{Error, Result};
use crate::optim::{levenberg_marquardt, LeastSquares, LmOptions};

const PAPER_PTMS: &str = include_str!("../data/paper_gst_ptms.json");

/// PTMs of the five pulses in [`Primitive::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GateSet {
    pub gates: [PauliTransferMatrix; 5],
}

impl GateSet {
    pub fn ideal() -> Self {
        Self {
            gates: Primitive::ALL.map(|p| p.ideal_ptm()),
        }
    }

    pub fn gate(&self, p: Primitive) -> &PauliTransferMatrix {
        &self.gates[p.index()]
    }

    /// Noise following each pulse, `noisy·idealᵀ`.
    pub fn noise(&self) -> [PauliTransferMatrix; 5] {
        std::array::from_fn(|i| self.gates[i].after(&Primitive::ALL[i].ideal_ptm().transpose()))
    }

    pub fn max_entry_difference(&self, other: &GateSet) -> f64 {
        self.gates
            .iter()
            .zip(&other.gates)
            .map(|(a, b)| (a.matrix() - b.matrix()).abs().max())
            .fold(0.0, f64::max)
    }
}

/// One experimental condition from the bundled data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperCondition {
    pub name: String,
    pub description: String,
    pub gates: GateSet,
}

#[derive(Deserialize)]
struct PaperFile {
    gate_order: Vec<String>,
    conditions: Vec<PaperCondition>,
}

/// The reconstructed gate sets published for the three experimental conditions:
/// `tmeas_sel`, `tmeas_nosel` and `flat_nosel`.
pub fn paper_gate_sets() -> Vec<PaperCondition> {
    let file: PaperFile = serde_json::from_str(PAPER_PTMS).expect("bundled GST data parses");
    debug_assert_eq!(file.gate_order, Primitive::ALL.map(|p| p.name().to_string()));
    file.conditions
}

pub fn paper_gate_set(name: &str) -> Result<GateSet> {
    paper_gate_sets()
        .into_iter()
        .find(|c| c.name == name)
        .map(|c| c.gates)
        .ok_or_else(|| Error::InvalidParameter(format!("unknown paper condition '{name}'")))
}

/// One expectation value of the triple design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GstEntry {
    pub k: Axis,
    pub l: Primitive,
    pub m: Primitive,
    pub n: Primitive,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GstDataset {
    pub rho_i: [f64; 3],
    pub meas: Vec<Axis>,
    pub entries: Vec<GstEntry>,
}

impl GstDataset {
    /// Expected size `125 · |meas|`.
    pub fn is_complete(&self) -> bool {
        self.entries.len() == 125 * self.meas.len()
    }

    /// Writes `k, l, m, n, value` with gates numbered 1–5 in gate-set order.
    pub fn to_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "l", "m", "n", "value"])?;
        for e in &self.entries {
            w.write_record(&[
                axis_name(e.k).to_string(),
                (e.l.index() + 1).to_string(),
                (e.m.index() + 1).to_string(),
                (e.n.index() + 1).to_string(),
                format!("{:.17e}", e.value),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_csv<R: Read>(input: R, rho_i: [f64; 3]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            k: Axis,
            l: usize,
            m: usize,
            n: usize,
            value: f64,
        }
        let gate = |i: usize| {
            Primitive::ALL
                .get(i.wrapping_sub(1))
                .copied()
                .ok_or_else(|| Error::InvalidParameter(format!("gate number {i} outside 1..5")))
        };
        let mut rd = csv::Reader::from_reader(input);
        let mut entries = Vec::new();
        let mut meas: Vec<Axis> = Vec::new();
        for row in rd.deserialize::<Row>() {
            let row = row?;
            if !meas.contains(&row.k) {
                meas.push(row.k);
            }
            entries.push(GstEntry {
                k: row.k,
                l: gate(row.l)?,
                m: gate(row.m)?,
                n: gate(row.n)?,
                value: row.value,
            });
        }
        Ok(Self { rho_i, meas, entries })
    }
}

fn axis_name(a: Axis) -> &'static str {
    match a {
        Axis::X => "x",
        Axis::Y => "y",
        Axis::Z => "z",
    }
}

fn axis_row(a: Axis) -> usize {
    match a {
        Axis::X => 1,
        Axis::Y => 2,
        Axis::Z => 3,
    }
}

fn triples() -> impl Iterator<Item = (Primitive, Primitive, Primitive)> {
    Primitive::ALL.into_iter().flat_map(|l| {
        Primitive::ALL
            .into_iter()
            .flat_map(move |m| Primitive::ALL.into_iter().map(move |n| (l, m, n)))
    })
}

fn predict(gates: &[Matrix4<f64>; 5], rho: &Vector4<f64>, meas: &[Axis]) -> Vec<f64> {
    let mut out = Vec::with_capacity(125 * meas.len());
    for &k in meas {
        for (l, m, n) in triples() {
            let v = gates[l.index()] * (gates[m.index()] * (gates[n.index()] * rho));
            out.push(v[axis_row(k)]);
        }
    }
    out
}

fn rho_vector(r: &[f64; 3]) -> Vector4<f64> {
    Vector4::new(1.0, r[0], r[1], r[2])
}

/// Synthetic dataset with optional Gaussian readout noise, clamped to `[-1, 1]`.
pub fn gen_gst_data(gs: &GateSet, rho_i: [f64; 3], meas: &[Axis], noise_sigma: f64, seed: u64) -> Result<GstDataset> {
    if meas.is_empty() {
        return Err(Error::InvalidParameter("no measurement axes".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidParameter("noise sigma must be non-negative".into()));
    }
    let mats = gs.gates.map(|g| *g.matrix());
    let values = predict(&mats, &rho_vector(&rho_i), meas);
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut entries = Vec::with_capacity(values.len());
    let mut i = 0;
    for &k in meas {
        for (l, m, n) in triples() {
            let mut v = values[i];
            if noise_sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                v += normal.sample(&mut rng);
            }
            entries.push(GstEntry {
                k,
                l,
                m,
                n,
                value: v.clamp(-1.0, 1.0),
            });
            i += 1;
        }
    }
    Ok(GstDataset {
        rho_i,
        meas: meas.to_vec(),
        entries,
    })
}

const PARAMS_PER_GATE: usize = 32;
const PURE_START_RATIO: f64 = 1e-5;

fn unpack_factor(x: &[f64]) -> Matrix4<Complex64> {
    Matrix4::from_fn(|r, c| {
        let i = 2 * (4 * r + c);
        Complex64::new(x[i], x[i + 1])
    })
}

fn pack_factor(a: &Matrix4<Complex64>, out: &mut [f64]) {
    for r in 0..4 {
        for c in 0..4 {
            let i = 2 * (4 * r + c);
            out[i] = a[(r, c)].re;
            out[i + 1] = a[(r, c)].im;
        }
    }
}

/// `Tr_out` of a 4×4 operator on input ⊗ output.
fn partial_trace_out(j: &Matrix4<Complex64>) -> Matrix2<Complex64> {
    Matrix2::from_fn(|a, b| j[(2 * a, 2 * b)] + j[(2 * a + 1, 2 * b + 1)])
}

fn inverse_sqrt_hermitian(m: &Matrix2<Complex64>) -> Option<Matrix2<Complex64>> {
    let herm = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = herm.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > 1e-300)) {
        return None;
    }
    let d = Matrix2::from_diagonal(&eig.eigenvalues.map(|l| Complex64::new(1.0 / l.sqrt(), 0.0)));
    Some(eig.eigenvectors * d * eig.eigenvectors.adjoint())
}

/// CPTP PTM from an unconstrained factor.
fn ptm_from_factor(a: &Matrix4<Complex64>) -> PauliTransferMatrix {
    let j = a * a.adjoint();
    let t = partial_trace_out(&j) * Complex64::new(2.0, 0.0);
    let s = match inverse_sqrt_hermitian(&t) {
        Some(s) => s,
        None => return PauliTransferMatrix::from_matrix(Matrix4::from_element(f64::NAN)),
    };
    let mut s4 = Matrix4::<Complex64>::zeros();
    for a_ in 0..2 {
        for b in 0..2 {
            for r in 0..2 {
                s4[(2 * a_ + r, 2 * b + r)] = s[(a_, b)];
            }
        }
    }
    let an = s4 * a;
    PauliTransferMatrix::from_choi(&(an * an.adjoint()))
}

/// Square-root factor of a gate's Choi matrix after mixing in `η` of the
/// completely depolarizing channel, which keeps the factor full rank.
fn factor_from_ptm(p: &PauliTransferMatrix, eta: f64) -> Matrix4<Complex64> {
    let j = p.choi() * Complex64::new(1.0 - eta, 0.0) + Matrix4::identity() * Complex64::new(eta / 4.0, 0.0);
    let herm = (j + j.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = herm.symmetric_eigen();
    let d = Matrix4::from_diagonal(&eig.eigenvalues.map(|l| Complex64::new(l.max(0.0).sqrt(), 0.0)));
    eig.eigenvectors * d
}

struct GstProblem<'a> {
    data: &'a GstDataset,
    rho: Vector4<f64>,
    observed: Vec<f64>,
    order: Vec<usize>,
}

impl GstProblem<'_> {
    fn gates(&self, x: &DVector<f64>) -> [PauliTransferMatrix; 5] {
        std::array::from_fn(|g| ptm_from_factor(&unpack_factor(&x.as_slice()[g * PARAMS_PER_GATE..(g + 1) * PARAMS_PER_GATE])))
    }
}

impl LeastSquares for GstProblem<'_> {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let mats = self.gates(x).map(|g| *g.matrix());
        let pred = predict(&mats, &self.rho, &self.data.meas);
        DVector::from_iterator(
            self.order.len(),
            self.order.iter().zip(&self.observed).map(|(&i, y)| pred[i] - y),
        )
    }

    fn jacobian(&self, x: &DVector<f64>, r0: &DVector<f64>, step: f64) -> nalgebra::DMatrix<f64> {
        let cols: Vec<DVector<f64>> = (0..x.len())
            .into_par_iter()
            .map(|k| {
                let h = step * x[k].abs().max(1.0);
                let mut xp = x.clone();
                xp[k] += h;
                (self.residuals(&xp) - r0) / h
            })
            .collect();
        nalgebra::DMatrix::from_columns(&cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GstFitOptions {
    pub max_iter: usize,
    /// Step tolerance of the optimizer.
    pub tol: f64,
    /// Depolarizing admixture used to start from a full-rank Choi factor. A
    /// second start uses `1e-5` of this and the better fit is kept.
    pub init_mixing: f64,
    /// Mean squared residual per entry above which the fit is flagged.
    pub misfit_threshold: f64,
}

impl Default for GstFitOptions {
    fn default() -> Self {
        Self {
            max_iter: 400,
            tol: 1e-14,
            init_mixing: 1e-3,
            misfit_threshold: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GstFit {
    pub gates: GateSet,
    /// `Σ (m - model)²`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub misfit: bool,
}

/// CPTP-constrained least squares with `ρ_i` and the measurements held fixed.
pub fn fit_gst(data: &GstDataset, init: &GateSet, opts: &GstFitOptions) -> Result<GstFit> {
    if data.meas.is_empty() || !data.is_complete() {
        return Err(Error::InsufficientData(format!(
            "GST dataset has {} entries, expected {}",
            data.entries.len(),
            125 * data.meas.len()
        )));
    }
    // map every entry to its slot in the prediction vector
    let slot = |e: &GstEntry| {
        let k = data.meas.iter().position(|&a| a == e.k).unwrap();
        k * 125 + e.l.index() * 25 + e.m.index() * 5 + e.n.index()
    };
    let problem = GstProblem {
        data,
        rho: rho_vector(&data.rho_i),
        observed: data.entries.iter().map(|e| e.value).collect(),
        order: data.entries.iter().map(slot).collect(),
    };
    let lm = LmOptions {
        max_iter: opts.max_iter,
        xtol: opts.tol,
        gtol: 0.0,
        ftol_abs: 1e-30,
        fd_step: 1e-8,
    };
    // a nearly pure start converges quickly onto rank-deficient (unitary) gates
    let res = [opts.init_mixing, opts.init_mixing * PURE_START_RATIO]
        .into_iter()
        .map(|eta| {
            let mut x0 = DVector::zeros(5 * PARAMS_PER_GATE);
            for (g, p) in init.gates.iter().enumerate() {
                let a = factor_from_ptm(p, eta);
                pack_factor(&a, &mut x0.as_mut_slice()[g * PARAMS_PER_GATE..(g + 1) * PARAMS_PER_GATE]);
            }
            levenberg_marquardt(&problem, x0, &lm)
        })
        .min_by(|a, b| a.cost.total_cmp(&b.cost))
        .expect("two starts");
    let gates = problem.gates(&res.x);
    if gates.iter().any(|g| g.matrix().iter().any(|v| !v.is_finite())) {
        return Err(Error::NotConverged {
            iterations: res.iterations,
            cost: res.cost,
        });
    }
    let residual = 2.0 * res.cost;
    Ok(GstFit {
        gates: GateSet { gates },
        residual,
        iterations: res.iterations,
        converged: res.converged,
        misfit: residual / data.entries.len() as f64 > opts.misfit_threshold,
    })
}

/// Parametric bootstrap: refits data regenerated from `fit` with readout noise.
pub fn bootstrap_gst(
    fit: &GateSet,
    rho_i: [f64; 3],
    meas: &[Axis],
    noise_sigma: f64,
    n_resamples: usize,
    seed: u64,
    opts: &GstFitOptions,
) -> Result<Vec<GateSet>> {
    (0..n_resamples)
        .into_par_iter()
        .map(|b| {
            let data = gen_gst_data(fit, rho_i, meas, noise_sigma, seed.wrapping_add(b as u64 * 0x9E37_79B9))?;
            fit_gst(&data, fit, opts).map(|f| f.gates)
        })
        .collect()
}

fn require_group(gates: &[PauliTransferMatrix]) -> Result<()> {
    if gates.len() != GROUP_SIZE {
        return Err(Error::InvalidParameter(format!(
            "expected {GROUP_SIZE} Clifford noise channels, got {}",
            gates.len()
        )));
    }
    Ok(())
}

/// Average of the unitarities of the per-Clifford noise.
pub fn avg_unitarity(gates: &[PauliTransferMatrix]) -> Result<f64> {
    require_group(gates)?;
    Ok(gates.iter().map(unitarity).sum::<f64>() / GROUP_SIZE as f64)
}

/// Unitarity of the averaged per-Clifford noise.
pub fn unitarity_of_avg(gates: &[PauliTransferMatrix]) -> Result<f64> {
    require_group(gates)?;
    let sum: Matrix4<f64> = gates.iter().map(|g| *g.matrix()).sum();
    Ok(unitarity(&PauliTransferMatrix::from_matrix(sum / GROUP_SIZE as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GstMetrics {
    /// Fidelity of each pulse's noise, in gate-set order.
    pub gate_fidelity: [f64; 5],
    pub avg_unitarity: f64,
    pub unitarity_of_avg: f64,
    /// Mean BEPG over the 24 Cliffords.
    pub clifford_epsilon: f64,
    /// `(1 - √avg_unitarity)/2`.
    pub clifford_epsilon_in: f64,
    /// `(1 - √unitarity_of_avg)/2`.
    pub clifford_epsilon_in_of_avg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliffordReplay {
    /// Implemented Cliffords.
    pub noisy: Vec<PauliTransferMatrix>,
    /// Per-Clifford noise following the ideal gate.
    pub noise: NoiseModel,
    pub metrics: GstMetrics,
}

/// Builds all 24 Cliffords from the pulses with virtual, noiseless Z.
pub fn clifford_from_gateset(gs: &GateSet) -> Result<CliffordReplay> {
    let noisy = crate::benchmarking::lift_pulses(&gs.gates);
    let noise = NoiseModel::from_noisy_pulses(&gs.gates);
    let channels = noise.channels();
    let eps: Vec<f64> = channels.iter().map(bepg).collect::<Result<_>>()?;
    let pulse_noise = gs.noise();
    let mut gate_fidelity = [0.0; 5];
    for (f, e) in gate_fidelity.iter_mut().zip(&pulse_noise) {
        *f = 1.0 - bepg(e)?;
    }
    let au = avg_unitarity(&channels)?;
    let ua = unitarity_of_avg(&channels)?;
    debug_assert_eq!(clifford::clifford_group().len(), noisy.len());
    Ok(CliffordReplay {
        noisy,
        noise,
        metrics: GstMetrics {
            gate_fidelity,
            avg_unitarity: au,
            unitarity_of_avg: ua,
            clifford_epsilon: eps.iter().sum::<f64>() / GROUP_SIZE as f64,
            clifford_epsilon_in: 0.5 * (1.0 - au.max(0.0).sqrt()),
            clifford_epsilon_in_of_avg: 0.5 * (1.0 - ua.max(0.0).sqrt()),
        },
    })
}
