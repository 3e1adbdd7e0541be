use coherence::clifford::Primitive;
use coherence::lindblad::*;
use coherence::pulses::*;
use coherence::channels::PauliTransferMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use std::f64::consts::PI;

const MHZ: f64 = 2.0 * PI * 1e6;

fn random_waveform(n: usize, dt: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    Waveform::new(samples, dt).unwrap()
}

/// Sum of a few random tones below `f_band`, under a Hann window.
fn band_limited(n: usize, dt: f64, f_band: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tones: Vec<(f64, Complex64)> = (0..12)
        .map(|_| {
            (
                rng.random_range(-f_band..f_band),
                Complex64::from_polar(rng.random_range(0.2..1.0), rng.random_range(-PI..PI)),
            )
        })
        .collect();
    let samples = (0..n)
        .map(|k| {
            let t = k as f64 * dt;
            let w = (PI * k as f64 / (n - 1) as f64).sin().powi(2);
            tones.iter().map(|(f, a)| a * Complex64::from_polar(w, 2.0 * PI * f * t)).sum()
        })
        .collect();
    Waveform::new(samples, dt).unwrap()
}

fn l2(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

#[test]
fn distortion_is_linear() {
    let dt = 1e-9;
    let t = TransferFunction::two_pole(80e6, 0.5 / dt, 4001).unwrap();
    let w1 = random_waveform(128, dt, 1);
    let w2 = random_waveform(128, dt, 2);
    let (a, b) = (Complex64::new(0.7, -1.3), Complex64::new(-2.0, 0.4));
    let mix = Waveform::new(
        w1.samples.iter().zip(&w2.samples).map(|(x, y)| a * x + b * y).collect(),
        dt,
    )
    .unwrap();
    let lhs = distort(&mix, &t).unwrap();
    let d1 = distort(&w1, &t).unwrap();
    let d2 = distort(&w2, &t).unwrap();
    for (k, v) in lhs.samples.iter().enumerate() {
        assert!((v - (a * d1.samples[k] + b * d2.samples[k])).norm() < 1e-12);
    }
}

#[test]
fn filtered_energy_obeys_parseval() {
    let dt = 1e-9;
    let t = TransferFunction::one_pole(60e6, 0.5 / dt, 4001).unwrap();
    let w = random_waveform(100, dt, 3);
    let full = distort_full(&w, &t).unwrap();
    let n = full.len();
    let mut buf = w.samples.clone();
    buf.resize(n, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let spectral: f64 = buf
        .iter()
        .enumerate()
        .map(|(k, x)| (t.eval(fft_frequency(k, n, dt)).unwrap() * x).norm_sqr())
        .sum::<f64>()
        / n as f64;
    let temporal: f64 = full.samples.iter().map(|x| x.norm_sqr()).sum();
    assert!((temporal - spectral).abs() <= 1e-10 * spectral);
}

#[test]
fn predistortion_round_trip() {
    let dt = 1e-9;
    let t = TransferFunction::one_pole(60e6, 0.5 / dt, 4001).unwrap().with_regularization(0.002);
    for seed in 0..5 {
        let w = band_limited(256, dt, 120e6, seed);
        let back = distort(&predistort(&w, &t).unwrap(), &t).unwrap();
        let diff: Vec<Complex64> = back.samples.iter().zip(&w.samples).map(|(a, b)| a - b).collect();
        let rel = l2(&diff) / l2(&w.samples);
        assert!(rel <= 1e-3, "seed {seed}: relative L2 {rel:e}");
    }
}

#[test]
fn transfer_point_sweep_round_trips() {
    let deltas: [f64; 11] = [-50.0, -35.0, -20.0, -10.0, -4.0, 0.0, 4.0, 10.0, 20.0, 35.0, 50.0];
    let omegas = [5.0, 10.0, 15.0, 20.0];
    let mut checked = 0;
    for &d in &deltas {
        for &o in &omegas {
            if d != 0.0 && (o / d).abs() < 0.2 {
                continue;
            }
            let psi = 0.3 - 0.02 * d;
            let truth = RabiModel { delta: d * MHZ, omega: o * MHZ, psi, t0: 5e-9 };
            let times: Vec<f64> = (0..600).map(|k| 5e-9 + k as f64 * 0.5e-9).collect();
            let traj = rabi_trajectory(&truth, &times);
            let meas = RabiMeasurement {
                times,
                sx: traj.iter().map(|r| r[0]).collect(),
                sy: traj.iter().map(|r| r[1]).collect(),
                delta: truth.delta,
                t0: truth.t0,
            };
            let nominal = Complex64::from_polar(12.0 * MHZ, -0.1);
            let fit = fit_transfer_point(&meas, nominal).unwrap();
            let amp_err = (fit.omega / truth.omega - 1.0).abs();
            let phase_err = ((fit.psi - psi + PI).rem_euclid(2.0 * PI) - PI).abs();
            assert!(amp_err <= 0.005, "Δ={d} Ω={o}: amplitude error {amp_err:e}");
            assert!(phase_err <= 0.01, "Δ={d} Ω={o}: phase error {phase_err:e}");
            let want = Complex64::from_polar(truth.omega, psi) / nominal;
            assert!((fit.value - want).norm() <= 0.01 * want.norm());
            if (o / d).abs() > 0.21 {
                assert!(!fit.low_confidence);
            }
            checked += 1;
        }
    }
    assert!(checked >= 30);
}

#[test]
fn short_record_is_rejected() {
    let truth = RabiModel { delta: 0.0, omega: 1.0 * MHZ, psi: 0.0, t0: 0.0 };
    let times: Vec<f64> = (0..100).map(|k| k as f64 * 1e-9).collect();
    let traj = rabi_trajectory(&truth, &times);
    let meas = RabiMeasurement {
        times,
        sx: traj.iter().map(|r| r[0]).collect(),
        sy: traj.iter().map(|r| r[1]).collect(),
        delta: 0.0,
        t0: 0.0,
    };
    assert!(fit_transfer_point(&meas, Complex64::new(MHZ, 0.0)).is_err());
}

/// Drive envelope delayed by `lag` while the carrier phase stays referenced to t = 0.
fn delayed_record(delta: f64, omega: f64, lag_samples: usize, dt: f64) -> RabiMeasurement {
    let n = 400;
    let mut samples = vec![Complex64::new(0.0, 0.0); lag_samples];
    samples.extend(std::iter::repeat_n(Complex64::new(omega, 0.0), n));
    let wf = Waveform::new(samples, dt).unwrap();
    let params = LindbladParams::ideal(dt / 4.0);
    let traj = evolve(&DensityMatrix::ground(), &wf, &params, delta, 1.0).unwrap();
    let t0 = lag_samples as f64 * dt;
    let (mut times, mut sx, mut sy) = (Vec::new(), Vec::new(), Vec::new());
    for (t, r) in traj.times.iter().zip(&traj.bloch).step_by(2) {
        if *t < t0 {
            continue;
        }
        let lab = to_larmor_frame(r, delta, *t);
        times.push(*t);
        sx.push(lab[0]);
        sy.push(lab[1]);
    }
    RabiMeasurement { times, sx, sy, delta, t0 }
}

#[test]
fn timing_offset_appears_as_linear_phase_slope() {
    let dt = 1e-9;
    let lag = 3;
    let omega = 12.0 * MHZ;
    let deltas: Vec<f64> = [-30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0].iter().map(|d| d * MHZ).collect();
    let values: Vec<Complex64> = deltas
        .iter()
        .map(|&d| fit_transfer_point(&delayed_record(d, omega, lag, dt), Complex64::new(omega, 0.0)).unwrap().value)
        .collect();
    let (slope, intercept) = phase_slope(&deltas, &values).unwrap();
    let dt_lag = lag as f64 * dt;
    assert!((slope + dt_lag).abs() <= 0.01 * dt_lag, "slope {slope:e} vs {:e}", -dt_lag);
    assert!(intercept.abs() < 1e-3);
    for v in &values {
        assert!((v.norm() - 1.0).abs() < 1e-3);
    }
}

fn distorted_records(t: &TransferFunction, omega: f64, dt: f64, n_pulse: usize) -> Vec<RabiMeasurement> {
    let params = LindbladParams::ideal(dt);
    [-30.0, -15.0, 0.0, 15.0, 30.0]
        .iter()
        .map(|&d| {
            let delta = d * MHZ;
            let shape = distorted_square_shape(t, delta, n_pulse, dt).unwrap();
            let t_delta = t.eval(delta / (2.0 * PI)).unwrap();
            let times: Vec<f64> = (0..n_pulse).map(|k| k as f64 * dt).collect();
            let xy = simulate_rabi(&shape, t_delta * omega, delta, 0.0, &times, &params).unwrap();
            RabiMeasurement {
                times,
                sx: xy.iter().map(|p| p.0).collect(),
                sy: xy.iter().map(|p| p.1).collect(),
                delta,
                t0: 0.0,
            }
        })
        .collect()
}

#[test]
fn refinement_reduces_edge_bias() {
    let dt = 1e-9;
    let n_pulse = 300;
    let omega = 12.0 * MHZ;
    let t = TransferFunction::one_pole(40e6, 0.5 / dt, 4001).unwrap();
    let records = distorted_records(&t, omega, dt, n_pulse);
    let refined = refine_transfer_function(&records, Complex64::new(omega, 0.0), n_pulse, dt, 2).unwrap();
    let error = |pass: &[TransferPointFit]| -> f64 {
        pass.iter()
            .zip(&records)
            .map(|(f, r)| (f.value - t.eval(r.delta / (2.0 * PI)).unwrap()).norm())
            .fold(0.0, f64::max)
    };
    let first = error(&refined.passes[0]);
    let last = error(refined.passes.last().unwrap());
    assert!(last < 0.5 * first, "refinement {first:e} -> {last:e}");
}

#[test]
fn square_pulse_x90_is_found_without_inhomogeneity() {
    let target = Primitive::X90.ideal_ptm();
    let r = design_pulse(
        &target,
        50e-9,
        50,
        &ProbabilityDistribution::delta(0.0),
        &ProbabilityDistribution::delta(1.0),
        &DesignOptions::default(),
    )
    .unwrap();
    assert!(r.fidelity >= 0.9999, "{}", r.fidelity);
    assert!(!r.stagnated);
}

#[test]
fn identity_target_needs_no_drive() {
    let r = design_pulse(
        &PauliTransferMatrix::identity(),
        50e-9,
        25,
        &ProbabilityDistribution::delta(0.0),
        &ProbabilityDistribution::delta(1.0),
        &DesignOptions::default(),
    )
    .unwrap();
    assert!(r.fidelity > 1.0 - 1e-12);
    assert!(r.waveform.energy() < 1e-12);
}

#[test]
fn robust_x90_against_lorentzian_detuning() {
    // FWHM 4 MHz, quadrature out to ten half-widths
    let larmor = ProbabilityDistribution::lorentzian(0.0, 2.0 * MHZ, 41).unwrap();
    let b1 = ProbabilityDistribution::delta(1.0);
    let target = Primitive::X90.ideal_ptm();
    let limit = 30.0 * MHZ;
    let opts = DesignOptions { max_amplitude: Some(limit), ..Default::default() };
    let r = design_pulse(&target, 150e-9, 150, &larmor, &b1, &opts).unwrap();
    assert!(r.fidelity >= 0.997, "weighted fidelity {}", r.fidelity);
    assert!(r.waveform.samples.iter().all(|s| s.norm() <= limit * (1.0 + 1e-12)));
    let square = Waveform::new(vec![Complex64::new(0.5 * PI / 150e-9, 0.0); 150], 1e-9).unwrap();
    assert!(r.fidelity > weighted_fidelity(&square, &target, &larmor, &b1));
    assert!((weighted_fidelity(&r.waveform, &target, &larmor, &b1) - r.fidelity).abs() < 1e-12);
}

#[test]
fn non_unitary_target_is_rejected() {
    let m = nalgebra::Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0, 0.9, 0.9, 0.9));
    let r = design_pulse(
        &PauliTransferMatrix::from_matrix(m),
        50e-9,
        10,
        &ProbabilityDistribution::delta(0.0),
        &ProbabilityDistribution::delta(1.0),
        &DesignOptions::default(),
    );
    assert!(r.is_err());
}

#[test]
fn csv_round_trips() {
    let w = random_waveform(20, 1e-9, 7);
    let mut buf = Vec::new();
    w.to_csv(&mut buf).unwrap();
    let back = Waveform::from_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), w.len());
    assert!((back.dt - w.dt).abs() < 1e-18);
    for (a, b) in back.samples.iter().zip(&w.samples) {
        assert!((a - b).norm() <= 1e-12 * b.norm().max(1.0));
    }
    let t = TransferFunction::one_pole(50e6, 600e6, 101).unwrap();
    let mut buf = Vec::new();
    t.to_csv(&mut buf).unwrap();
    let back = TransferFunction::from_csv(buf.as_slice()).unwrap();
    for f in [-500e6, -3e6, 0.0, 123e6] {
        assert!((back.eval(f).unwrap() - t.eval(f).unwrap()).norm() < 1e-12);
    }
}
