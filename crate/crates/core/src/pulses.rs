//! Control waveforms, transfer-function distortion, Rabi-based transfer
//! function estimation and robust pulse design.
//!
//! Envelopes are complex `I + iQ` in rad/s. A frequency `f` on the FFT grid
//! of an envelope is an offset from the carrier, so `T(f)` is the response
//! at offset frequency `Δ = 2πf`.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DVector, Matrix3, Vector3};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::channels::{rotation_matrix, PauliTransferMatrix};
use crate::error::{Error, Result};
use crate::lindblad::{evolve, to_larmor_frame, DensityMatrix, LindbladParams, ProbabilityDistribution, RabiModel};
use crate::optim::{levenberg_marquardt, LeastSquares, LmOptions};

const PAD_FACTOR: usize = 4;

/// Piecewise-constant complex envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<Complex64>,
    /// Sample period in seconds.
    pub dt: f64,
    /// Frame phase added to every sample (virtual Z).
    pub phase_offset: f64,
}

impl Waveform {
    /// An empty waveform is a zero-duration identity.
    pub fn new(samples: Vec<Complex64>, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("sample period must be positive, got {dt}")));
        }
        if samples.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(Error::InvalidParameter("waveform samples must be finite".into()));
        }
        Ok(Self {
            samples,
            dt,
            phase_offset: 0.0,
        })
    }

    pub fn zeros(n: usize, dt: f64) -> Self {
        Self {
            samples: vec![Complex64::new(0.0, 0.0); n],
            dt,
            phase_offset: 0.0,
        }
    }

    /// Constant envelope `amplitude` for `round(duration/dt)` samples.
    pub fn square(amplitude: Complex64, duration: f64, dt: f64) -> Result<Self> {
        let n = (duration / dt).round();
        if !(n >= 1.0) {
            return Err(Error::InvalidParameter("square pulse shorter than one sample".into()));
        }
        Self::new(vec![amplitude; n as usize], dt)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.samples.len() as f64
    }

    /// Samples with the frame phase applied.
    pub fn effective_samples(&self) -> impl Iterator<Item = Complex64> + '_ {
        let rot = Complex64::from_polar(1.0, self.phase_offset);
        self.samples.iter().map(move |s| s * rot)
    }

    /// `Σ |s|²`.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }

    pub fn with_phase_offset(mut self, phase: f64) -> Self {
        self.phase_offset = phase;
        self
    }

    /// Reads `time_ns, i_amp, q_amp`; the period comes from the first two rows.
    pub fn from_csv<R: Read>(input: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            time_ns: f64,
            i_amp: f64,
            q_amp: f64,
        }
        let mut rd = csv::Reader::from_reader(input);
        let rows: Vec<Row> = rd.deserialize().collect::<std::result::Result<_, _>>()?;
        if rows.len() < 2 {
            return Err(Error::InsufficientData("waveform file needs at least two rows".into()));
        }
        let dt_ns = rows[1].time_ns - rows[0].time_ns;
        for (k, r) in rows.iter().enumerate() {
            let want = rows[0].time_ns + dt_ns * k as f64;
            if (r.time_ns - want).abs() > 1e-6 * dt_ns.abs().max(1e-12) {
                return Err(Error::InvalidParameter(format!("non-uniform sample time at row {k}")));
            }
        }
        Self::new(
            rows.iter().map(|r| Complex64::new(r.i_amp, r.q_amp)).collect(),
            dt_ns * 1e-9,
        )
    }

    pub fn to_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time_ns", "i_amp", "q_amp"])?;
        for (k, s) in self.effective_samples().enumerate() {
            w.write_record(&[
                format!("{:.6}", k as f64 * self.dt * 1e9),
                format!("{:.17e}", s.re),
                format!("{:.17e}", s.im),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tabulated complex frequency response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    freqs: Vec<f64>,
    response: Vec<Complex64>,
    /// Regularization for inversion; `None` uses `0.05·max|T|`.
    pub epsilon_reg: Option<f64>,
}

impl TransferFunction {
    /// `freqs` in Hz, strictly increasing.
    pub fn new(freqs: Vec<f64>, response: Vec<Complex64>) -> Result<Self> {
        if freqs.len() < 2 || freqs.len() != response.len() {
            return Err(Error::InvalidParameter("transfer function needs at least two matching points".into()));
        }
        if freqs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("frequencies must be strictly increasing".into()));
        }
        if response.iter().any(|t| !t.re.is_finite() || !t.im.is_finite()) {
            return Err(Error::InvalidParameter("transfer function values must be finite".into()));
        }
        Ok(Self {
            freqs,
            response,
            epsilon_reg: None,
        })
    }

    fn sampled(f_max: f64, n: usize, f: impl Fn(f64) -> Complex64) -> Result<Self> {
        if !(f_max > 0.0) || n < 2 {
            return Err(Error::InvalidParameter("need a positive span and at least two points".into()));
        }
        let freqs: Vec<f64> = (0..n).map(|i| -f_max + 2.0 * f_max * i as f64 / (n - 1) as f64).collect();
        let response = freqs.iter().map(|&x| f(x)).collect();
        Self::new(freqs, response)
    }

    /// `T ≡ c` on `[-f_max, f_max]`.
    pub fn constant(c: Complex64, f_max: f64) -> Result<Self> {
        Self::sampled(f_max, 2, |_| c)
    }

    pub fn flat(f_max: f64) -> Result<Self> {
        Self::constant(Complex64::new(1.0, 0.0), f_max)
    }

    /// `1/(1 + i f/fc)`, the response of a causal RC filter.
    pub fn one_pole(fc: f64, f_max: f64, n: usize) -> Result<Self> {
        if !(fc > 0.0) {
            return Err(Error::InvalidParameter("corner frequency must be positive".into()));
        }
        Self::sampled(f_max, n, |f| Complex64::new(1.0, f / fc).inv())
    }

    /// Two identical cascaded poles.
    pub fn two_pole(fc: f64, f_max: f64, n: usize) -> Result<Self> {
        let one = Self::one_pole(fc, f_max, n)?;
        let response = one.response.iter().map(|t| t * t).collect();
        Self::new(one.freqs, response)
    }

    pub fn with_regularization(mut self, eps: f64) -> Self {
        self.epsilon_reg = Some(eps);
        self
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn response(&self) -> &[Complex64] {
        &self.response
    }

    pub fn max_abs(&self) -> f64 {
        self.response.iter().map(|t| t.norm()).fold(0.0, f64::max)
    }

    /// Linear interpolation; errors outside the tabulated span.
    pub fn eval(&self, f: f64) -> Result<Complex64> {
        let (lo, hi) = (self.freqs[0], *self.freqs.last().unwrap());
        let slack = 1e-9 * (hi - lo);
        if f < lo - slack || f > hi + slack {
            return Err(Error::GridCoverage(f));
        }
        let f = f.clamp(lo, hi);
        let i = match self.freqs.binary_search_by(|x| x.partial_cmp(&f).unwrap()) {
            Ok(i) => return Ok(self.response[i]),
            Err(i) => i.clamp(1, self.freqs.len() - 1),
        };
        let (f0, f1) = (self.freqs[i - 1], self.freqs[i]);
        let a = (f - f0) / (f1 - f0);
        Ok(self.response[i - 1] * (1.0 - a) + self.response[i] * a)
    }

    /// Multiplies by `exp(i·2πf·delay)`, removing a timing offset `delay`.
    pub fn remove_delay(&self, delay: f64) -> Self {
        let response = self
            .freqs
            .iter()
            .zip(&self.response)
            .map(|(&f, t)| t * Complex64::from_polar(1.0, 2.0 * PI * f * delay))
            .collect();
        Self {
            freqs: self.freqs.clone(),
            response,
            epsilon_reg: self.epsilon_reg,
        }
    }

    /// Reads `freq_mhz, re, im`.
    pub fn from_csv<R: Read>(input: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            freq_mhz: f64,
            re: f64,
            im: f64,
        }
        let mut rd = csv::Reader::from_reader(input);
        let rows: Vec<Row> = rd.deserialize().collect::<std::result::Result<_, _>>()?;
        Self::new(
            rows.iter().map(|r| r.freq_mhz * 1e6).collect(),
            rows.iter().map(|r| Complex64::new(r.re, r.im)).collect(),
        )
    }

    pub fn to_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["freq_mhz", "re", "im"])?;
        for (f, t) in self.freqs.iter().zip(&self.response) {
            w.write_record(&[format!("{:.9}", f * 1e-6), format!("{:.17e}", t.re), format!("{:.17e}", t.im)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Offset frequency in Hz of FFT bin `k` for length `n` and period `dt`.
pub fn fft_frequency(k: usize, n: usize, dt: f64) -> f64 {
    let signed = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
    signed / (n as f64 * dt)
}

fn filter_padded(w: &Waveform, t: &TransferFunction, op: impl Fn(Complex64) -> Complex64) -> Result<Vec<Complex64>> {
    if w.is_empty() {
        return Err(Error::InvalidParameter("cannot filter an empty waveform".into()));
    }
    let n = w.len() * PAD_FACTOR;
    let mut buf = w.samples.clone();
    buf.resize(n, Complex64::new(0.0, 0.0));
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, x) in buf.iter_mut().enumerate() {
        *x *= op(t.eval(fft_frequency(k, n, w.dt))?);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|x| *x *= scale);
    Ok(buf)
}

fn truncated(w: &Waveform, mut buf: Vec<Complex64>) -> Waveform {
    buf.truncate(w.len());
    Waveform {
        samples: buf,
        dt: w.dt,
        phase_offset: w.phase_offset,
    }
}

/// `W' = IFFT(T·FFT(W))` on the ×4 zero-padded grid, cut back to the input length.
pub fn distort(w: &Waveform, t: &TransferFunction) -> Result<Waveform> {
    Ok(truncated(w, filter_padded(w, t, |x| x)?))
}

/// Like [`distort`] but keeps the padded tail.
pub fn distort_full(w: &Waveform, t: &TransferFunction) -> Result<Waveform> {
    let buf = filter_padded(w, t, |x| x)?;
    Ok(Waveform {
        samples: buf,
        dt: w.dt,
        phase_offset: w.phase_offset,
    })
}

/// Applies the regularized inverse `T*/(|T|² + ε²)`.
pub fn predistort(w: &Waveform, t: &TransferFunction) -> Result<Waveform> {
    let eps = t.epsilon_reg.unwrap_or(0.05 * t.max_abs());
    let eps2 = eps * eps;
    Ok(truncated(w, filter_padded(w, t, |x| x.conj() / (x.norm_sqr() + eps2))?))
}

/// Rabi oscillation record under a constant nominal drive at offset `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RabiMeasurement {
    /// Seconds.
    pub times: Vec<f64>,
    /// `⟨σx⟩` in the Larmor frame.
    pub sx: Vec<f64>,
    /// `⟨σy⟩` in the Larmor frame.
    pub sy: Vec<f64>,
    /// Offset frequency `Δ = ω - ω0` in rad/s.
    pub delta: f64,
    /// Assumed pulse start.
    pub t0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferPointFit {
    /// `Ω e^{iψ} / (Ω0 e^{iψ0})`.
    pub value: Complex64,
    pub omega: f64,
    pub psi: f64,
    pub residual_rms: f64,
    /// `|Ω/Δ|` below the sensitivity threshold.
    pub low_confidence: bool,
    pub converged: bool,
}

/// Below this `|Ω/Δ|` the fitted point is flagged as low confidence.
pub const LOW_CONFIDENCE_RATIO: f64 = 0.2;

trait RabiShape: Sync {
    /// Larmor-frame `(x, y)` at the measurement times for drive `Ω e^{iψ}`.
    fn predict(&self, omega: f64, psi: f64) -> Vec<(f64, f64)>;
}

struct SquareShape<'a> {
    meas: &'a RabiMeasurement,
}

impl RabiShape for SquareShape<'_> {
    fn predict(&self, omega: f64, psi: f64) -> Vec<(f64, f64)> {
        let model = RabiModel {
            delta: self.meas.delta,
            omega,
            psi,
            t0: self.meas.t0,
        };
        self.meas
            .times
            .iter()
            .map(|&t| {
                let r = model.larmor_frame(t);
                (r[0], r[1])
            })
            .collect()
    }
}

struct RabiFit<'a, S: RabiShape> {
    meas: &'a RabiMeasurement,
    shape: &'a S,
    scale: f64,
}

impl<S: RabiShape> LeastSquares for RabiFit<'_, S> {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let pred = self.shape.predict(x[0] * self.scale, x[1]);
        let n = self.meas.times.len();
        let mut r = DVector::zeros(2 * n);
        for i in 0..n {
            r[2 * i] = pred[i].0 - self.meas.sx[i];
            r[2 * i + 1] = pred[i].1 - self.meas.sy[i];
        }
        r
    }
}

fn sse(meas: &RabiMeasurement, pred: &[(f64, f64)]) -> f64 {
    pred.iter()
        .enumerate()
        .map(|(i, p)| (p.0 - meas.sx[i]).powi(2) + (p.1 - meas.sy[i]).powi(2))
        .sum()
}

fn fit_shape<S: RabiShape>(meas: &RabiMeasurement, shape: &S, nominal: Complex64, grid: (usize, usize)) -> (f64, f64, f64, bool) {
    let scale = nominal.norm();
    let (n_amp, n_phase) = grid;
    let candidates: Vec<(f64, f64)> = (0..n_amp)
        .flat_map(|i| {
            let a = 0.2 * (15.0f64).powf(i as f64 / (n_amp - 1).max(1) as f64);
            (0..n_phase).map(move |j| (a, -PI + 2.0 * PI * j as f64 / n_phase as f64))
        })
        .collect();
    let best = candidates
        .par_iter()
        .map(|&(a, p)| (sse(meas, &shape.predict(a * scale, p)), a, p))
        .min_by(|x, y| x.0.partial_cmp(&y.0).unwrap())
        .unwrap();
    let problem = RabiFit { meas, shape, scale };
    let res = levenberg_marquardt(
        &problem,
        DVector::from_vec(vec![best.1, best.2]),
        &LmOptions {
            max_iter: 300,
            xtol: 1e-13,
            gtol: 0.0,
            ftol_abs: 0.0,
            fd_step: 1e-7,
        },
    );
    let omega = res.x[0] * scale;
    let mut psi = res.x[1];
    let mut omega_out = omega;
    if omega < 0.0 {
        omega_out = -omega;
        psi += PI;
    }
    psi = (psi + PI).rem_euclid(2.0 * PI) - PI;
    let rms = (2.0 * res.cost / (2 * meas.times.len()) as f64).sqrt();
    (omega_out, psi, rms, res.converged)
}

fn check_measurement(meas: &RabiMeasurement, nominal: Complex64) -> Result<()> {
    let n = meas.times.len();
    if n < 4 || meas.sx.len() != n || meas.sy.len() != n {
        return Err(Error::InsufficientData("Rabi record needs matching time, x and y columns".into()));
    }
    if !(nominal.norm() > 0.0) {
        return Err(Error::InvalidParameter("nominal drive must be nonzero".into()));
    }
    let span = meas.times[n - 1] - meas.t0.max(meas.times[0]);
    let w1 = meas.delta.hypot(nominal.norm());
    if span * w1 < 4.0 * PI {
        return Err(Error::InsufficientData(format!(
            "record covers {:.2} periods of ω1, need at least 2",
            span * w1 / (2.0 * PI)
        )));
    }
    Ok(())
}

/// Fits `(Ω, ψ)` of a square-pulse Rabi record and returns `T(Δ)`.
pub fn fit_transfer_point(meas: &RabiMeasurement, nominal: Complex64) -> Result<TransferPointFit> {
    check_measurement(meas, nominal)?;
    let (omega, psi, rms, converged) = fit_shape(meas, &SquareShape { meas }, nominal, (60, 72));
    Ok(TransferPointFit {
        value: Complex64::from_polar(omega, psi) / nominal,
        omega,
        psi,
        residual_rms: rms,
        low_confidence: meas.delta != 0.0 && (omega / meas.delta).abs() < LOW_CONFIDENCE_RATIO,
        converged,
    })
}

/// Least-squares slope and intercept of the unwrapped phase of `values` against `deltas`.
pub fn phase_slope(deltas: &[f64], values: &[Complex64]) -> Result<(f64, f64)> {
    if deltas.len() < 2 || deltas.len() != values.len() {
        return Err(Error::InsufficientData("need at least two matching points".into()));
    }
    let mut idx: Vec<usize> = (0..deltas.len()).collect();
    idx.sort_by(|&a, &b| deltas[a].partial_cmp(&deltas[b]).unwrap());
    let mut phases = Vec::with_capacity(idx.len());
    let mut prev: Option<f64> = None;
    for &i in &idx {
        let mut p = values[i].arg();
        if let Some(q) = prev {
            p += ((q - p) / (2.0 * PI)).round() * 2.0 * PI;
        }
        phases.push(p);
        prev = Some(p);
    }
    let xs: Vec<f64> = idx.iter().map(|&i| deltas[i]).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = phases.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&phases).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("offset frequencies are all equal".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Drive-frame envelope of a square pulse at offset `delta` after passing
/// through `t`, normalized so that its steady state is 1.
pub fn distorted_square_shape(
    t: &TransferFunction,
    delta: f64,
    n_samples: usize,
    dt: f64,
) -> Result<Waveform> {
    let lab: Vec<Complex64> = (0..n_samples)
        .map(|k| Complex64::from_polar(1.0, delta * (k as f64 + 0.5) * dt))
        .collect();
    let d = distort(&Waveform::new(lab, dt)?, t)?;
    let t_delta = t.eval(delta / (2.0 * PI))?;
    let samples = d
        .samples
        .iter()
        .enumerate()
        .map(|(k, s)| s * Complex64::from_polar(1.0, -delta * (k as f64 + 0.5) * dt) / t_delta)
        .collect();
    Waveform::new(samples, dt)
}

/// Simulated Larmor-frame Rabi record for a drive-frame waveform that starts at `t0`.
pub fn simulate_rabi(
    shape: &Waveform,
    drive: Complex64,
    delta: f64,
    t0: f64,
    times: &[f64],
    params: &LindbladParams,
) -> Result<Vec<(f64, f64)>> {
    let mut wf = shape.clone();
    wf.samples.iter_mut().for_each(|s| *s *= drive);
    let traj = evolve(&DensityMatrix::ground(), &wf, params, delta, 1.0)?;
    Ok(times
        .iter()
        .map(|&t| {
            let a = ((t - t0) / params.dt).clamp(0.0, (traj.times.len() - 1) as f64);
            let i = (a.floor() as usize).min(traj.times.len() - 2);
            let f = a - i as f64;
            let r = traj.bloch[i] * (1.0 - f) + traj.bloch[i + 1] * f;
            let r = to_larmor_frame(&r, delta, t - t0);
            (r[0], r[1])
        })
        .collect())
}

struct DistortedShape<'a> {
    meas: &'a RabiMeasurement,
    shape: Waveform,
    params: LindbladParams,
}

impl RabiShape for DistortedShape<'_> {
    fn predict(&self, omega: f64, psi: f64) -> Vec<(f64, f64)> {
        simulate_rabi(
            &self.shape,
            Complex64::from_polar(omega, psi),
            self.meas.delta,
            self.meas.t0,
            &self.meas.times,
            &self.params,
        )
        .unwrap_or_else(|_| vec![(f64::NAN, f64::NAN); self.meas.times.len()])
    }
}

/// Builds a table from point estimates, held constant beyond the measured span.
pub fn transfer_from_points(deltas: &[f64], values: &[Complex64], f_max: f64) -> Result<TransferFunction> {
    let mut pts: Vec<(f64, Complex64)> = deltas.iter().map(|d| d / (2.0 * PI)).zip(values.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    if pts.is_empty() {
        return Err(Error::InsufficientData("no transfer-function points".into()));
    }
    let mut freqs = Vec::new();
    let mut resp = Vec::new();
    if pts[0].0 > -f_max {
        freqs.push(-f_max);
        resp.push(pts[0].1);
    }
    for (f, v) in &pts {
        freqs.push(*f);
        resp.push(*v);
    }
    let last = pts.last().unwrap();
    if last.0 < f_max {
        freqs.push(f_max);
        resp.push(last.1);
    }
    TransferFunction::new(freqs, resp)
}

/// Transfer-function estimates after each refinement pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRefinement {
    pub deltas: Vec<f64>,
    /// `passes[0]` assumes ideal square pulses.
    pub passes: Vec<Vec<TransferPointFit>>,
}

impl TransferRefinement {
    pub fn final_values(&self) -> Vec<Complex64> {
        self.passes.last().map(|p| p.iter().map(|f| f.value).collect()).unwrap_or_default()
    }
}

/// Fits every record with ideal pulses, then repeatedly re-simulates the
/// records with pulses distorted by the current estimate and refits.
///
/// `n_samples` and `dt` describe the nominal square pulse starting at each
/// record's `t0`.
pub fn refine_transfer_function(
    records: &[RabiMeasurement],
    nominal: Complex64,
    n_samples: usize,
    dt: f64,
    iterations: usize,
) -> Result<TransferRefinement> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no Rabi records".into()));
    }
    let deltas: Vec<f64> = records.iter().map(|r| r.delta).collect();
    let first: Vec<TransferPointFit> = records
        .iter()
        .map(|r| fit_transfer_point(r, nominal))
        .collect::<Result<_>>()?;
    let mut passes = vec![first];
    let f_max = 0.5 / dt;
    let params = LindbladParams::ideal(dt);
    for _ in 0..iterations {
        let prev: Vec<Complex64> = passes.last().unwrap().iter().map(|f| f.value).collect();
        let tf = transfer_from_points(&deltas, &prev, f_max)?;
        let next: Vec<TransferPointFit> = records
            .iter()
            .map(|r| {
                let shape = DistortedShape {
                    meas: r,
                    shape: distorted_square_shape(&tf, r.delta, n_samples, dt)?,
                    params: params.clone(),
                };
                let (omega, psi, rms, converged) = fit_shape(r, &shape, nominal, (12, 24));
                Ok(TransferPointFit {
                    value: Complex64::from_polar(omega, psi) / nominal,
                    omega,
                    psi,
                    residual_rms: rms,
                    low_confidence: r.delta != 0.0 && (omega / r.delta).abs() < LOW_CONFIDENCE_RATIO,
                    converged,
                })
            })
            .collect::<Result<_>>()?;
        passes.push(next);
    }
    Ok(TransferRefinement { deltas, passes })
}

/// Settings for [`design_pulse`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignOptions {
    pub max_iter: usize,
    /// Rms size of the first step in units of `π/duration`.
    pub step: f64,
    /// A result below this weighted fidelity is reported as stagnated.
    pub fidelity_floor: f64,
    /// Stop once `1 - F` falls below this value.
    pub infidelity_target: f64,
    /// Drive amplitude limit `|I + iQ|` in rad/s.
    pub max_amplitude: Option<f64>,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            step: 1.0,
            fidelity_floor: 0.99,
            infidelity_target: 1e-10,
            max_amplitude: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignResult {
    pub waveform: Waveform,
    /// Distribution-weighted average gate fidelity.
    pub fidelity: f64,
    pub iterations: usize,
    pub stagnated: bool,
}

fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let a = phi.norm();
    let k = phi.cross_matrix();
    if a < 1e-6 {
        return Matrix3::identity() - k * 0.5 + k * k / 6.0;
    }
    Matrix3::identity() - k * ((1.0 - a.cos()) / (a * a)) + k * k * ((a - a.sin()) / (a * a * a))
}

fn exp_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let a = phi.norm();
    if a == 0.0 {
        return Matrix3::identity();
    }
    rotation_matrix(&(phi / a), a)
}

/// `Tr([v]× M)` as a linear functional of `v`.
fn cross_trace(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(1, 2)] - m[(2, 1)], m[(2, 0)] - m[(0, 2)], m[(0, 1)] - m[(1, 0)])
}

/// Weighted fidelity and its gradient with respect to `(I_k, Q_k)` in rad/s.
fn fidelity_and_gradient(
    controls: &[(f64, f64)],
    dt: f64,
    target: &Matrix3<f64>,
    ensemble: &[(f64, f64, f64)],
) -> (f64, Vec<(f64, f64)>) {
    let n = controls.len();
    let partial: Vec<(f64, Vec<(f64, f64)>)> = ensemble
        .par_iter()
        .map(|&(delta, b1, w)| {
            let phis: Vec<Vector3<f64>> = controls
                .iter()
                .map(|&(i, q)| Vector3::new(b1 * i, b1 * q, -delta) * dt)
                .collect();
            let steps: Vec<Matrix3<f64>> = phis.iter().map(exp_so3).collect();
            // before[k] = R_{k-1}…R_0, after[k] = R_{n-1}…R_{k+1}
            let mut before = vec![Matrix3::identity(); n + 1];
            for k in 0..n {
                before[k + 1] = steps[k] * before[k];
            }
            let mut after = vec![Matrix3::identity(); n];
            for k in (0..n.saturating_sub(1)).rev() {
                after[k] = after[k + 1] * steps[k + 1];
            }
            let total = before[n];
            let f = (3.0 + (target.transpose() * total).trace()) / 6.0;
            let grad = (0..n)
                .map(|k| {
                    let m = before[k] * target.transpose() * after[k] * steps[k];
                    let c = cross_trace(&m);
                    let jr = right_jacobian(&phis[k]);
                    let gi = c.dot(&(jr * Vector3::new(b1 * dt, 0.0, 0.0))) / 6.0;
                    let gq = c.dot(&(jr * Vector3::new(0.0, b1 * dt, 0.0))) / 6.0;
                    (w * gi, w * gq)
                })
                .collect();
            (w * f, grad)
        })
        .collect();
    let mut f = 0.0;
    let mut g = vec![(0.0, 0.0); n];
    for (pf, pg) in partial {
        f += pf;
        for (acc, v) in g.iter_mut().zip(pg) {
            acc.0 += v.0;
            acc.1 += v.1;
        }
    }
    (f, g)
}

/// `(tanh(r)/r, d/dr[tanh(r)/r] / r)`.
fn squash(r: f64) -> (f64, f64) {
    if r < 1e-4 {
        let r2 = r * r;
        return (1.0 - r2 / 3.0, -2.0 / 3.0 + 8.0 * r2 / 15.0);
    }
    let t = r.tanh();
    let sech2 = 1.0 - t * t;
    (t / r, (sech2 * r - t) / (r * r * r))
}

/// L-BFGS ascent on the distribution-weighted fidelity of piecewise-constant
/// controls with a backtracking step. Dissipation is ignored.
pub fn design_pulse(
    target: &PauliTransferMatrix,
    duration: f64,
    n_samples: usize,
    larmor: &ProbabilityDistribution,
    b1: &ProbabilityDistribution,
    opts: &DesignOptions,
) -> Result<DesignResult> {
    if n_samples == 0 || !(duration > 0.0) {
        return Err(Error::InvalidParameter("design needs a positive duration and samples".into()));
    }
    let r_target = target.unital();
    if (r_target.transpose() * r_target - Matrix3::identity()).abs().max() > 1e-6
        || target.non_unital().norm() > 1e-6
        || (r_target.determinant() - 1.0).abs() > 1e-6
    {
        return Err(Error::InvalidParameter("design target must be a unitary channel".into()));
    }
    let dt = duration / n_samples as f64;
    let ensemble: Vec<(f64, f64, f64)> = larmor
        .quadrature()
        .flat_map(|(d, wd)| b1.quadrature().map(move |(s, ws)| (d, s, wd * ws)))
        .collect();

    // work in units of π/duration, flattened as (I_0, Q_0, I_1, …)
    let unit = PI / duration;
    let limit = match opts.max_amplitude {
        Some(a) if !(a > 0.0) => {
            return Err(Error::InvalidParameter(format!("amplitude limit must be positive, got {a}")));
        }
        Some(a) => Some(a / unit),
        None => None,
    };
    // with a limit, each sample is `A·tanh(|w|)/|w|·w` for an unconstrained `w`
    let to_controls = |x: &[f64]| -> Vec<(f64, f64)> {
        x.chunks(2)
            .map(|w| match limit {
                Some(a) => {
                    let (s, _) = squash(w[0].hypot(w[1]));
                    (a * s * w[0] * unit, a * s * w[1] * unit)
                }
                None => (w[0] * unit, w[1] * unit),
            })
            .collect()
    };
    let eval = |x: &[f64]| {
        let (f, g) = fidelity_and_gradient(&to_controls(x), dt, &r_target, &ensemble);
        let g: Vec<f64> = x
            .chunks(2)
            .zip(&g)
            .flat_map(|(w, &(gi, gq))| {
                let (gi, gq) = (gi * unit, gq * unit);
                match limit {
                    Some(a) => {
                        let (s, ds_over_r) = squash(w[0].hypot(w[1]));
                        let proj = ds_over_r * (gi * w[0] + gq * w[1]);
                        [a * (s * gi + proj * w[0]), a * (s * gq + proj * w[1])]
                    }
                    None => [gi, gq],
                }
            })
            .collect();
        (f, g)
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    // start from the in-plane part of the target's rotation vector
    let aa = nalgebra::Rotation3::from_matrix_unchecked(r_target).scaled_axis();
    let start = Vector3::new(aa[0] / PI, aa[1] / PI, 0.0);
    let start = match limit {
        // invert the squashing map, backing off from the boundary
        Some(a) => {
            let r = start.norm();
            let rr = (r / a).min(0.9).atanh();
            if r > 0.0 { start * (rr / r) / a } else { start }
        }
        None => start,
    };
    let mut x: Vec<f64> = (0..n_samples).flat_map(|_| [start[0], start[1]]).collect();
    let (mut f, mut g) = eval(&x);
    let mut history: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut first_step = opts.step;
    let mut iterations = 0;
    while iterations < opts.max_iter && 1.0 - f > opts.infidelity_target {
        iterations += 1;
        // two-loop recursion on the negated objective; `d` is an ascent direction
        let mut d = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
            alphas.push(a);
        }
        let mut scale = first_step / (dot(&g, &g) / n_samples as f64).sqrt().max(1e-300);
        if let Some((s, y, _)) = history.back() {
            scale = dot(s, y) / dot(y, y);
        }
        d.iter_mut().for_each(|v| *v *= scale);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        let mut slope = dot(&g, &d);
        if !(slope > 0.0) {
            history.clear();
            d = g.iter().map(|v| v * scale.abs()).collect();
            slope = dot(&g, &d);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (tf, tg) = eval(&trial);
            if tf >= f + 1e-4 * step * slope {
                accepted = Some((trial, tf, tg));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            if history.is_empty() {
                break;
            }
            history.clear();
            first_step *= 0.5;
            continue;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-16 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if history.len() == 10 {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let gain = f_new - f;
        x = x_new;
        f = f_new;
        g = g_new;
        if gain <= 1e-15 * f.abs() && history.is_empty() {
            break;
        }
    }
    let waveform = Waveform::new(
        to_controls(&x).iter().map(|&(i, q)| Complex64::new(i, q)).collect(),
        dt,
    )?;
    Ok(DesignResult {
        waveform,
        fidelity: f,
        iterations,
        stagnated: f < opts.fidelity_floor,
    })
}

/// Distribution-weighted fidelity of a waveform against a unitary target.
pub fn weighted_fidelity(
    wf: &Waveform,
    target: &PauliTransferMatrix,
    larmor: &ProbabilityDistribution,
    b1: &ProbabilityDistribution,
) -> f64 {
    let controls: Vec<(f64, f64)> = wf.effective_samples().map(|s| (s.re, s.im)).collect();
    let ensemble: Vec<(f64, f64, f64)> = larmor
        .quadrature()
        .flat_map(|(d, wd)| b1.quadrature().map(move |(s, ws)| (d, s, wd * ws)))
        .collect();
    fidelity_and_gradient(&controls, wf.dt, &target.unital(), &ensemble).0
}
