//! Single-exponential decay fits for RB and PB data.
//!
//! RB: `⟨σz⟩ = A + B(1 - 2ε)^m`. PB: `⟨P⟩ = A' + B' u^(m-1)`.
//! The decay base is fitted through a logistic transform so it stays in (0, 1).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::benchmarking::{mean_sem, BenchmarkRecord};
use crate::error::{Error, Result};
use crate::optim::{levenberg_marquardt, LeastSquares, LmOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayModel {
    Rb,
    Pb,
}

impl DecayModel {
    fn m0(self) -> f64 {
        match self {
            DecayModel::Rb => 0.0,
            DecayModel::Pb => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DecayModel::Rb => "rb: A + B(1-2eps)^m",
            DecayModel::Pb => "pb: A' + B' u^(m-1)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    Fixed(f64),
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Inverse-variance from per-length SEM when every SEM is positive.
    #[default]
    Auto,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub offset: OffsetMode,
    pub weighting: Weighting,
    pub max_iter: usize,
}

impl FitOptions {
    pub fn new(offset: OffsetMode) -> Self {
        Self {
            offset,
            weighting: Weighting::Auto,
            max_iter: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitSigmas {
    pub offset: f64,
    pub amplitude: f64,
    pub rate_param: f64,
    pub epsilon_in: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitIntervals {
    pub offset: (f64, f64),
    pub amplitude: (f64, f64),
    pub rate_param: (f64, f64),
    pub epsilon_in: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitFlags {
    pub converged: bool,
    /// Constant input; the rate is set to its no-decay value.
    pub degenerate: bool,
    pub offset_fixed: bool,
    /// Residuals are serially correlated in m.
    pub non_markovian: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub model: DecayModel,
    pub offset: f64,
    pub amplitude: f64,
    /// ε for RB, u for PB.
    pub rate_param: f64,
    /// `(1 - √u)/2`, PB only.
    pub epsilon_in: Option<f64>,
    pub sigma: FitSigmas,
    pub ci95: FitIntervals,
    pub residual_rms: f64,
    pub residual_lag1: f64,
    pub reduced_chi2: f64,
    pub n_points: usize,
    pub flags: FitFlags,
}

impl DecayFit {
    /// ε for RB, ε_in for PB.
    pub fn error_per_gate(&self) -> f64 {
        self.epsilon_in.unwrap_or(self.rate_param)
    }

    pub fn error_per_gate_sigma(&self) -> f64 {
        self.sigma.epsilon_in.unwrap_or(self.sigma.rate_param)
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn logit(r: f64) -> f64 {
    let r = r.clamp(1e-12, 1.0 - 1e-12);
    (r / (1.0 - r)).ln()
}

struct Points {
    k: Vec<f64>,
    y: Vec<f64>,
    sw: Vec<f64>,
}

struct DecayProblem<'a> {
    pts: &'a Points,
    fixed_offset: Option<f64>,
}

impl DecayProblem<'_> {
    fn unpack(&self, x: &DVector<f64>) -> (f64, f64, f64) {
        let r = sigmoid(x[0]);
        let b = x[1];
        let a = self.fixed_offset.unwrap_or_else(|| x[2]);
        (r, b, a)
    }
}

impl LeastSquares for DecayProblem<'_> {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let (r, b, a) = self.unpack(x);
        DVector::from_iterator(
            self.pts.k.len(),
            (0..self.pts.k.len()).map(|i| self.pts.sw[i] * (a + b * r.powf(self.pts.k[i]) - self.pts.y[i])),
        )
    }

    fn jacobian(&self, x: &DVector<f64>, _r0: &DVector<f64>, _step: f64) -> DMatrix<f64> {
        let (r, b, _) = self.unpack(x);
        let dr_dt = r * (1.0 - r);
        let n = self.pts.k.len();
        let mut j = DMatrix::zeros(n, x.len());
        for i in 0..n {
            let k = self.pts.k[i];
            let w = self.pts.sw[i];
            let rk = r.powf(k);
            let drk = if k == 0.0 { 0.0 } else { k * r.powf(k - 1.0) };
            j[(i, 0)] = w * b * drk * dr_dt;
            j[(i, 1)] = w * rk;
            if x.len() > 2 {
                j[(i, 2)] = w;
            }
        }
        j
    }
}

fn points(records: &[BenchmarkRecord], model: DecayModel, weighting: Weighting) -> Result<Points> {
    let mut ms: Vec<usize> = records.iter().map(|r| r.m).collect();
    ms.sort_unstable();
    ms.dedup();
    if ms.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 distinct sequence lengths, got {}",
            ms.len()
        )));
    }
    let mut recs: Vec<&BenchmarkRecord> = records.iter().collect();
    recs.sort_by_key(|r| r.m);
    if recs.iter().any(|r| !r.mean.is_finite()) {
        return Err(Error::InsufficientData("non-finite record mean".into()));
    }
    let use_sem = weighting == Weighting::Auto && recs.iter().all(|r| r.sem > 0.0 && r.sem.is_finite());
    let raw: Vec<f64> = recs
        .iter()
        .map(|r| if use_sem { 1.0 / (r.sem * r.sem) } else { 1.0 })
        .collect();
    let mean_w = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(Points {
        k: recs.iter().map(|r| r.m as f64 - model.m0()).collect(),
        y: recs.iter().map(|r| r.mean).collect(),
        sw: raw.iter().map(|w| (w / mean_w).sqrt()).collect(),
    })
}

/// Log-linear regression of `ln(y - a)` on `k`, giving `(r, b)`.
fn loglinear_guess(pts: &Points, a: f64) -> Option<(f64, f64)> {
    let data: Vec<(f64, f64)> = pts
        .k
        .iter()
        .zip(&pts.y)
        .filter(|(_, &y)| y - a > 1e-12)
        .map(|(&k, &y)| (k, (y - a).ln()))
        .collect();
    if data.len() < 2 {
        return None;
    }
    let n = data.len() as f64;
    let mk = data.iter().map(|d| d.0).sum::<f64>() / n;
    let ml = data.iter().map(|d| d.1).sum::<f64>() / n;
    let sxx: f64 = data.iter().map(|d| (d.0 - mk).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = data.iter().map(|d| (d.0 - mk) * (d.1 - ml)).sum();
    let slope = sxy / sxx;
    let r = slope.exp().clamp(1e-6, 1.0 - 1e-9);
    let b = (ml - slope * mk).exp();
    Some((r, b))
}

fn t_quantile(dof: usize) -> f64 {
    if dof == 0 {
        return 1.959963984540054;
    }
    StudentsT::new(0.0, 1.0, dof as f64)
        .map(|t| t.inverse_cdf(0.975))
        .unwrap_or(1.959963984540054)
}

fn lag1_autocorrelation(res: &[f64]) -> f64 {
    let denom: f64 = res.iter().map(|e| e * e).sum();
    if denom == 0.0 || res.len() < 2 {
        return 0.0;
    }
    res.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / denom
}

fn interval(v: f64, s: f64, t: f64) -> (f64, f64) {
    (v - t * s, v + t * s)
}

fn finish(
    model: DecayModel,
    pts: &Points,
    r: f64,
    b: f64,
    a: f64,
    fixed: bool,
    converged: bool,
    degenerate: bool,
) -> DecayFit {
    let n = pts.k.len();
    let p = if fixed { 2 } else { 3 };
    let raw_res: Vec<f64> = (0..n).map(|i| pts.y[i] - (a + b * r.powf(pts.k[i]))).collect();
    let wres: Vec<f64> = (0..n).map(|i| pts.sw[i] * raw_res[i]).collect();
    let chi2: f64 = wres.iter().map(|e| e * e).sum();
    let dof = n.saturating_sub(p);
    let reduced = if dof > 0 { chi2 / dof as f64 } else { 0.0 };
    let residual_rms = (raw_res.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();

    // covariance in natural coordinates (r, B, A)
    let mut j = DMatrix::zeros(n, p);
    for i in 0..n {
        let k = pts.k[i];
        j[(i, 0)] = pts.sw[i] * if k == 0.0 { 0.0 } else { b * k * r.powf(k - 1.0) };
        j[(i, 1)] = pts.sw[i] * r.powf(k);
        if !fixed {
            j[(i, 2)] = pts.sw[i];
        }
    }
    let cov = (j.transpose() * &j)
        .try_inverse()
        .map(|c| c * reduced)
        .unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    let sd = |i: usize| if degenerate { 0.0 } else { cov[(i, i)].max(0.0).sqrt() };
    let (s_r, s_b) = (sd(0), sd(1));
    let s_a = if fixed { 0.0 } else { sd(2) };

    let (rate, s_rate, eps_in, s_in) = match model {
        DecayModel::Rb => ((1.0 - r) / 2.0, s_r / 2.0, None, None),
        DecayModel::Pb => {
            let e = (1.0 - r.sqrt()) / 2.0;
            let s = if r > 0.0 { s_r / (4.0 * r.sqrt()) } else { f64::NAN };
            (r, s_r, Some(e), Some(s))
        }
    };
    let t = t_quantile(dof);
    let lag1 = lag1_autocorrelation(&raw_res);
    let non_markovian = !degenerate && n >= 6 && residual_rms > 1e-9 && lag1 > 2.0 / (n as f64).sqrt();

    DecayFit {
        model,
        offset: a,
        amplitude: b,
        rate_param: rate,
        epsilon_in: eps_in,
        sigma: FitSigmas {
            offset: s_a,
            amplitude: s_b,
            rate_param: s_rate,
            epsilon_in: s_in,
        },
        ci95: FitIntervals {
            offset: interval(a, s_a, t),
            amplitude: interval(b, s_b, t),
            rate_param: interval(rate, s_rate, t),
            epsilon_in: eps_in.zip(s_in).map(|(e, s)| interval(e, s, t)),
        },
        residual_rms,
        residual_lag1: lag1,
        reduced_chi2: reduced,
        n_points: n,
        flags: FitFlags {
            converged,
            degenerate,
            offset_fixed: fixed,
            non_markovian,
        },
    }
}

/// Fits one of the decay models to per-length records.
pub fn fit_decay(records: &[BenchmarkRecord], model: DecayModel, opts: &FitOptions) -> Result<DecayFit> {
    let pts = points(records, model, opts.weighting)?;
    let fixed = match opts.offset {
        OffsetMode::Fixed(a) => {
            if !a.is_finite() {
                return Err(Error::InvalidParameter("fixed offset must be finite".into()));
            }
            Some(a)
        }
        OffsetMode::Free => None,
    };

    let (lo, hi) = pts
        .y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &y| (l.min(y), h.max(y)));
    if hi - lo <= 1e-13 * hi.abs().max(1.0) {
        let a = fixed.unwrap_or(0.0);
        return Ok(finish(model, &pts, 1.0, pts.y[0] - a, a, fixed.is_some(), true, true));
    }

    let starts: Vec<f64> = match fixed {
        Some(a) => vec![a],
        None => vec![0.0, lo - 0.05 * (hi - lo), lo - 0.5 * (hi - lo)],
    };
    let lm = LmOptions {
        max_iter: opts.max_iter,
        xtol: 1e-15,
        gtol: 0.0,
        ftol_abs: 0.0,
        fd_step: 1e-7,
    };
    let problem = DecayProblem {
        pts: &pts,
        fixed_offset: fixed,
    };
    let mut best: Option<crate::optim::LmResult> = None;
    for a0 in starts {
        let (r0, b0) = loglinear_guess(&pts, a0).unwrap_or((0.99, hi - a0));
        let x0 = if fixed.is_some() {
            DVector::from_vec(vec![logit(r0), b0])
        } else {
            DVector::from_vec(vec![logit(r0), b0, a0])
        };
        let res = levenberg_marquardt(&problem, x0, &lm);
        if best.as_ref().is_none_or(|b| res.cost < b.cost) {
            best = Some(res);
        }
    }
    let best = best.expect("at least one start");
    if !best.x.iter().all(|v| v.is_finite()) {
        return Err(Error::NotConverged {
            iterations: best.iterations,
            cost: best.cost,
        });
    }
    let (r, b, a) = problem.unpack(&best.x);
    Ok(finish(model, &pts, r, b, a, fixed.is_some(), best.converged, false))
}

/// Fits `⟨σz⟩ = A_z + B(1 - 2ε)^m`.
pub fn fit_rb(records: &[BenchmarkRecord], offset: OffsetMode) -> Result<DecayFit> {
    fit_decay(records, DecayModel::Rb, &FitOptions::new(offset))
}

/// Fits `⟨P⟩ = A' + B' u^(m-1)` and reports `ε_in = (1 - √u)/2`.
pub fn fit_pb(records: &[BenchmarkRecord], offset: OffsetMode) -> Result<DecayFit> {
    fit_decay(records, DecayModel::Pb, &FitOptions::new(offset))
}

/// Percentile intervals from a sequence-level bootstrap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub n_resamples: usize,
    pub offset: (f64, f64),
    pub amplitude: (f64, f64),
    pub rate_param: (f64, f64),
    pub epsilon_in: Option<(f64, f64)>,
}

fn percentile_interval(mut v: Vec<f64>) -> (f64, f64) {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let i = pos.floor() as usize;
        let f = pos - i as f64;
        if i + 1 < v.len() {
            v[i] * (1.0 - f) + v[i + 1] * f
        } else {
            v[i]
        }
    };
    (q(0.025), q(0.975))
}

/// Resamples sequences with replacement within each length and refits.
pub fn bootstrap_ci(
    records: &[BenchmarkRecord],
    model: DecayModel,
    opts: &FitOptions,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapCi> {
    if n_resamples < 100 {
        return Err(Error::InvalidParameter(format!(
            "bootstrap needs at least 100 resamples, got {n_resamples}"
        )));
    }
    if records.iter().any(|r| r.values.is_empty()) {
        return Err(Error::InsufficientData("record without sequence values".into()));
    }
    let fits: Vec<Result<DecayFit>> = (0..n_resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let resampled: Vec<BenchmarkRecord> = records
                .iter()
                .map(|r| {
                    let n = r.values.len();
                    let vals: Vec<f64> = (0..n).map(|_| r.values[rng.random_range(0..n)]).collect();
                    let (mean, sem) = mean_sem(&vals);
                    BenchmarkRecord {
                        m: r.m,
                        observable: r.observable,
                        values: vals,
                        mean,
                        sem,
                    }
                })
                .collect();
            fit_decay(&resampled, model, opts)
        })
        .collect();
    let fits: Vec<DecayFit> = fits.into_iter().collect::<Result<_>>()?;
    let col = |f: &dyn Fn(&DecayFit) -> f64| percentile_interval(fits.iter().map(f).collect());
    Ok(BootstrapCi {
        n_resamples,
        offset: col(&|f| f.offset),
        amplitude: col(&|f| f.amplitude),
        rate_param: col(&|f| f.rate_param),
        epsilon_in: match model {
            DecayModel::Pb => Some(col(&|f| f.epsilon_in.unwrap_or(f64::NAN))),
            DecayModel::Rb => None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarking::Observable;

    fn synth(model: DecayModel, a: f64, b: f64, r: f64, ms: &[usize]) -> Vec<BenchmarkRecord> {
        let obs = match model {
            DecayModel::Rb => Observable::SigmaZ,
            DecayModel::Pb => Observable::Purity,
        };
        ms.iter()
            .map(|&m| BenchmarkRecord::new(m, obs, vec![a + b * r.powf(m as f64 - model.m0())]))
            .collect()
    }

    fn lengths() -> Vec<usize> {
        vec![1, 2, 3, 4, 5, 6, 7, 9, 11, 16, 19, 23, 28, 30, 33, 36, 40, 45, 49, 55]
    }

    #[test]
    fn rb_round_trip_free_offset() {
        let recs = synth(DecayModel::Rb, 0.0, 1.0, 0.99, &lengths());
        let f = fit_rb(&recs, OffsetMode::Free).unwrap();
        assert!((f.rate_param - 0.005).abs() <= 1e-9 * 0.005, "{}", f.rate_param);
        assert!(f.sigma.rate_param < 1e-6);
    }

    #[test]
    fn rb_round_trip_fixed_offset() {
        let recs = synth(DecayModel::Rb, 0.02, 0.95, 0.97, &lengths());
        let f = fit_rb(&recs, OffsetMode::Fixed(0.02)).unwrap();
        assert!((f.rate_param - 0.015).abs() <= 1e-9 * 0.015);
        assert!((f.amplitude - 0.95).abs() <= 1e-9);
        assert!(f.flags.offset_fixed);
    }

    #[test]
    fn pb_round_trip() {
        let recs = synth(DecayModel::Pb, 0.0, 1.0, 0.99, &lengths());
        let f = fit_pb(&recs, OffsetMode::Free).unwrap();
        assert!((f.rate_param - 0.99).abs() <= 1e-9 * 0.99);
        let e = f.epsilon_in.unwrap();
        assert!((e - (1.0 - 0.99f64.sqrt()) / 2.0).abs() < 1e-10);
    }

    #[test]
    fn constant_data_is_degenerate() {
        let recs = synth(DecayModel::Rb, 0.0, 1.0, 1.0, &lengths());
        let f = fit_rb(&recs, OffsetMode::Free).unwrap();
        assert_eq!(f.rate_param, 0.0);
        assert!(f.flags.degenerate);
        let recs = synth(DecayModel::Pb, 0.0, 1.0, 1.0, &lengths());
        let f = fit_pb(&recs, OffsetMode::Free).unwrap();
        assert_eq!(f.rate_param, 1.0);
        assert_eq!(f.epsilon_in, Some(0.0));
    }

    #[test]
    fn too_few_lengths() {
        let recs = synth(DecayModel::Rb, 0.0, 1.0, 0.9, &[1, 2]);
        assert!(matches!(fit_rb(&recs, OffsetMode::Free), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn oscillating_residuals_are_flagged() {
        let ms: Vec<usize> = (1..=40).collect();
        let recs: Vec<BenchmarkRecord> = ms
            .iter()
            .map(|&m| {
                let v = 0.98f64.powi(m as i32) + 0.01 * (m as f64 * 0.3).sin();
                BenchmarkRecord::new(m, Observable::SigmaZ, vec![v])
            })
            .collect();
        let f = fit_rb(&recs, OffsetMode::Free).unwrap();
        assert!(f.flags.non_markovian, "lag1 = {}", f.residual_lag1);
    }

    #[test]
    fn bootstrap_zero_variance_has_zero_width() {
        let recs: Vec<BenchmarkRecord> = lengths()
            .iter()
            .map(|&m| BenchmarkRecord::new(m, Observable::SigmaZ, vec![0.98f64.powi(m as i32); 5]))
            .collect();
        let ci = bootstrap_ci(&recs, DecayModel::Rb, &FitOptions::new(OffsetMode::Free), 100, 1).unwrap();
        assert!((ci.rate_param.1 - ci.rate_param.0).abs() < 1e-12);
        assert!(bootstrap_ci(&recs, DecayModel::Rb, &FitOptions::new(OffsetMode::Free), 50, 1).is_err());
    }
}
