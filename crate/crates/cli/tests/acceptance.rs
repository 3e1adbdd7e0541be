//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::path::Path;
use std::time::{Duration, Instant};

use coherence::benchmarking::{gen_sequences, simulate_pb, simulate_rb, Axis, NoiseModel, SimOptions};
use coherence::channels::*;
use coherence::clifford::{Primitive, GROUP_SIZE};
use coherence::fitting::{fit_pb, fit_rb, OffsetMode};
use coherence::gst::*;
use coherence::lindblad::*;
use coherence::pulses::*;
use coherence_cli::config::{NoiseConfig, ScenarioConfig, SequenceDesign, Table1Config};
use coherence_cli::pipeline_table1;
use nalgebra::Vector3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MHZ: f64 = 2.0 * PI * 1e6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let took = start.elapsed();
    let in_time = took <= limit;
    let pass = o.pass && in_time;
    println!(
        "{} criterion {id:>2} {name}: {} [{:.2} s, limit {} s{}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64(),
        limit.as_secs(),
        if in_time { "" } else { ", too slow" }
    );
    pass
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// 1
fn table1_identity() -> Outcome {
    let measured = |label: &str, e: f64, es: f64, ei: f64, eis: f64| ScenarioConfig::Measured {
        label: label.into(),
        epsilon: e,
        epsilon_sigma: es,
        epsilon_in: ei,
        epsilon_in_sigma: eis,
    };
    let cfg = Table1Config {
        scenarios: vec![
            measured("T=1 no SEL", 0.0234, 0.0011, 0.0105, 0.0010),
            measured("T=Tmeas no SEL", 0.0073, 0.0002, 0.0066, 0.0002),
            measured("T=Tmeas SEL", 0.0063, 0.0002, 0.0054, 0.0002),
        ],
    };
    let rows = pipeline_table1(&cfg, 0).expect("table rows");
    let coh = [0.0129, 0.0007, 0.0009];
    let mid = [0.040, 0.024, 0.020];
    let half = [0.026, 0.015, 0.012];
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let coh_ok = ((r.epsilon_coh * 1e4).round() / 1e4 - coh[i]).abs() < 1e-12;
        let mid_ok = (r.diamond_midpoint - mid[i]).abs() <= 0.002;
        let half_ok = (r.diamond_half_width - half[i]).abs() <= 0.003;
        ok &= coh_ok && mid_ok && half_ok;
        parts.push(format!(
            "coh {:.4} diamond {:.4}({:.4})",
            r.epsilon_coh, r.diamond_midpoint, r.diamond_half_width
        ));
    }
    outcome(ok, format!("{}; tol coh exact at 4 dp, midpoint ±0.002, half-width ±0.003", parts.join(", ")))
}

fn random_ensemble(n: usize) -> Vec<PauliTransferMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(20170101);
    (0..n).map(|i| random_channel(&mut rng, 1 + i % 4).expect("rank in range")).collect()
}

// 2
fn closed_form_iepg(ensemble: &[PauliTransferMatrix]) -> Outcome {
    let mut violations = 0;
    let mut worst_ratio: f64 = 0.0;
    for e in ensemble {
        let exact = canonicalize(e).exact_iepg();
        let closed = iepg(e).expect("trace preserving");
        let bound = exact * exact / 2.0 + 1e-9;
        let gap = (closed - exact).abs();
        if gap > bound {
            violations += 1;
        }
        worst_ratio = worst_ratio.max(gap / bound);
    }
    outcome(
        violations == 0,
        format!(
            "{violations}/{} channels exceed |closed - exact| <= eps_in^2/2 + 1e-9 (worst gap/bound {worst_ratio:.2})",
            ensemble.len()
        ),
    )
}

// 3
fn c_range(ensemble: &[PauliTransferMatrix]) -> Outcome {
    let (mut n, mut lo, mut hi, mut bad) = (0, f64::INFINITY, f64::NEG_INFINITY, 0);
    for e in ensemble {
        let canon = canonicalize(e);
        if canon.exact_iepg() > 1.0 / 3.0 {
            continue;
        }
        let Some(c) = canon.c else { continue };
        n += 1;
        lo = lo.min(c);
        hi = hi.max(c);
        if !(-1e-6..=2.0 + 1e-6).contains(&c) {
            bad += 1;
        }
    }
    outcome(
        bad == 0 && n > 0,
        format!("{n} channels with eps' <= 1/3, c in [{lo:.4}, {hi:.4}], {bad} outside [-1e-6, 2 + 1e-6]"),
    )
}

// 4
fn fit_recovery() -> Outcome {
    let composite = make_channel(&ChannelSpec::UnitaryRotation { axis: [0.0, 0.0, 1.0], angle: 0.05 })
        .unwrap()
        .after(&make_channel(&ChannelSpec::Dephasing { p: 0.01 }).unwrap());
    let cases = [
        ("depolarizing p=0.01", make_channel(&ChannelSpec::Depolarizing { p: 0.01 }).unwrap()),
        ("amplitude damping g=0.02", make_channel(&ChannelSpec::AmplitudeDamping { gamma: 0.02 }).unwrap()),
        ("dephasing+rotation", composite),
    ];
    let lengths: Vec<usize> = (0..20).map(|k| 1 + 6 * k).collect();
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, (name, e)) in cases.iter().enumerate() {
        let noise = NoiseModel::GateIndependent(*e);
        let eps = bepg(e).unwrap();
        let u = unitarity(e);
        let rb_seqs = gen_sequences(&lengths, 150, 400 + 2 * i as u64).unwrap();
        let pb_seqs = gen_sequences(&lengths, 150, 401 + 2 * i as u64).unwrap();
        let rb = fit_rb(&simulate_rb(&noise, &rb_seqs, &SimOptions::default()).unwrap(), OffsetMode::Free).unwrap();
        let pb = fit_pb(&simulate_pb(&noise, &pb_seqs, &SimOptions::default()).unwrap(), OffsetMode::Free).unwrap();
        let within = |est: f64, sigma: f64, truth: f64| (est - truth).abs() <= 2.0 * sigma + 1e-9 * truth.abs();
        let case_ok = within(rb.rate_param, rb.sigma.rate_param, eps) && within(pb.rate_param, pb.sigma.rate_param, u);
        ok &= case_ok;
        parts.push(format!(
            "{name}: eps {:.6}±{:.1e} vs {eps:.6}, u {:.6}±{:.1e} vs {u:.6}",
            rb.rate_param, rb.sigma.rate_param, pb.rate_param, pb.sigma.rate_param
        ));
    }
    outcome(ok, format!("{}; tol 2 sigma + 1e-9 relative", parts.join("; ")))
}

// 5
fn s2_replay() -> Outcome {
    let lengths = vec![1, 3, 5, 8, 11, 15, 19, 23, 27, 31, 35, 39, 43, 47, 51, 55];
    let design = SequenceDesign {
        lengths,
        sequences: 100,
        shots: None,
        offset: coherence_cli::config::OffsetConfig::Free,
        bootstrap: 0,
    };
    let scenario = |name: &str| ScenarioConfig::Simulated {
        label: name.into(),
        noise: NoiseConfig::GateSet {
            gate_set: coherence_cli::config::GateSetConfig::Paper { name: name.into() },
        },
        design: design.clone(),
    };
    let cfg = Table1Config {
        scenarios: vec![scenario("tmeas_nosel"), scenario("flat_nosel")],
    };
    let rows = pipeline_table1(&cfg, 2017).expect("replay");
    let (t, f) = (&rows[0], &rows[1]);
    let ok = (t.epsilon - 0.0124).abs() <= 0.0010 && (t.epsilon_in - 0.0111).abs() <= 0.0010 && (f.epsilon - 0.0331).abs() <= 0.0030;
    outcome(
        ok,
        format!(
            "T_meas no SEL: eps {:.5} (0.0124±0.0010), eps_in {:.5} (0.0111±0.0010); T=1: eps {:.5} (0.0331±0.0030)",
            t.epsilon, t.epsilon_in, f.epsilon
        ),
    )
}

// 6
fn unitarity_aggregates() -> Outcome {
    let theta: f64 = 0.1;
    let signed: Vec<PauliTransferMatrix> = (0..GROUP_SIZE)
        .map(|g| {
            let s = if g < GROUP_SIZE / 2 { theta } else { -theta };
            PauliTransferMatrix::from_rotation(&rotation_matrix(&Vector3::z(), s))
        })
        .collect();
    let au = avg_unitarity(&signed).unwrap();
    let ua = unitarity_of_avg(&signed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let e = random_channel(&mut rng, 3).unwrap();
    let same = vec![e; GROUP_SIZE];
    let gap = (avg_unitarity(&same).unwrap() - unitarity_of_avg(&same).unwrap()).abs();
    let ok = (au - 1.0).abs() < 1e-12 && ua < 1.0 - theta * theta / 2.0 && gap <= 1e-12;
    outcome(
        ok,
        format!(
            "±θ: avg u {au:.15}, u of avg {ua:.6} < {:.6}; gate-independent gap {gap:.1e} (tol 1e-12)",
            1.0 - theta * theta / 2.0
        ),
    )
}

// 7
fn gst_round_trip() -> Outcome {
    let mut truth = GateSet::ideal();
    let dep = make_channel(&ChannelSpec::Depolarizing { p: 0.005 }).unwrap();
    for (i, p) in Primitive::ALL.iter().enumerate() {
        let (axis, th) = p.rotation();
        let axis = if th == 0.0 { Vector3::x() } else { axis };
        let over = PauliTransferMatrix::from_rotation(&rotation_matrix(&axis, 2f64.to_radians() * (1.0 + 0.3 * i as f64)));
        truth.gates[i] = dep.after(&over).after(&p.ideal_ptm());
    }
    let data = gen_gst_data(&truth, [0.0, 0.0, 1.0], &[Axis::X, Axis::Y, Axis::Z], 0.0, 1).unwrap();
    let fit = fit_gst(&data, &GateSet::ideal(), &GstFitOptions::default()).unwrap();
    let err = fit.gates.max_entry_difference(&truth);
    outcome(
        err <= 1e-4 && fit.residual <= 1e-10,
        format!("max entry error {err:.2e} (tol 1e-4), residual {:.2e} (tol 1e-10)", fit.residual),
    )
}

// 8
fn lindblad_oracles() -> Outcome {
    let t2 = 30e-6;
    let params = LindbladParams::new(
        160e-6,
        t2,
        ProbabilityDistribution::delta(0.0),
        ProbabilityDistribution::delta(1.0),
        100e-9,
    )
    .unwrap();
    let tr = evolve(&DensityMatrix::from_bloch(&Vector3::x()), &Waveform::zeros(300, 100e-9), &params, 0.0, 1.0).unwrap();
    let fid = (tr.final_state()[0] / (-1.0f64).exp() - 1.0).abs();

    let t2s = 80e-9;
    let params = LindbladParams::new(
        f64::INFINITY,
        f64::INFINITY,
        ProbabilityDistribution::lorentzian(0.0, 1.0 / t2s, 201).unwrap(),
        ProbabilityDistribution::delta(1.0),
        0.5e-9,
    )
    .unwrap();
    let tr = ensemble_average(&DensityMatrix::from_bloch(&Vector3::x()), &Waveform::zeros(80, 1e-9), &params).unwrap();
    let lor = (tr.final_state()[0] / (-1.0f64).exp() - 1.0).abs();

    let model = RabiModel {
        delta: 0.0,
        omega: 10.0 * MHZ,
        psi: 0.3,
        t0: 0.0,
    };
    let wf = Waveform::square(Complex64::from_polar(model.omega, model.psi), 400e-9, 1e-9).unwrap();
    let tr = evolve(&DensityMatrix::ground(), &wf, &LindbladParams::ideal(0.05e-9), 0.0, 1.0).unwrap();
    let rabi = tr
        .times
        .iter()
        .zip(&tr.bloch)
        .map(|(t, r)| (model.drive_frame(*t) - r).abs().max())
        .fold(0.0, f64::max);
    outcome(
        fid <= 1e-6 && lor <= 0.02 && rabi <= 1e-8,
        format!("FID rel {fid:.1e} (tol 1e-6), Lorentzian rel {lor:.2e} (tol 0.02), resonant Rabi {rabi:.1e} (tol 1e-8)"),
    )
}

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

// 9
fn transfer_round_trips() -> Outcome {
    let dt = 1e-9;
    // |T| >= 0.447 over the 120 MHz band
    let t = TransferFunction::one_pole(60e6, 0.5 / dt, 4001).unwrap().with_regularization(0.002);
    let mut worst_l2: f64 = 0.0;
    for seed in 0..5 {
        let w = band_limited(256, dt, 120e6, seed);
        let back = distort(&predistort(&w, &t).unwrap(), &t).unwrap();
        let diff: Vec<Complex64> = back.samples.iter().zip(&w.samples).map(|(a, b)| a - b).collect();
        worst_l2 = worst_l2.max(l2(&diff) / l2(&w.samples));
    }

    let (mut amp_worst, mut phase_worst, mut points): (f64, f64, usize) = (0.0, 0.0, 0);
    for d in [-50.0, -35.0, -20.0, -10.0, -4.0, 0.0, 4.0, 10.0, 20.0, 35.0, 50.0] {
        for o in [5.0, 10.0, 15.0, 20.0] {
            if d != 0.0 && f64::abs(o / d) < LOW_CONFIDENCE_RATIO {
                continue;
            }
            let psi = 0.3 - 0.02 * d;
            let truth = RabiModel {
                delta: d * MHZ,
                omega: o * MHZ,
                psi,
                t0: 5e-9,
            };
            let times: Vec<f64> = (0..600).map(|k| 5e-9 + k as f64 * 0.5e-9).collect();
            let traj = rabi_trajectory(&truth, &times);
            let meas = RabiMeasurement {
                times,
                sx: traj.iter().map(|r| r[0]).collect(),
                sy: traj.iter().map(|r| r[1]).collect(),
                delta: truth.delta,
                t0: truth.t0,
            };
            let fit = fit_transfer_point(&meas, Complex64::from_polar(12.0 * MHZ, -0.1)).unwrap();
            amp_worst = amp_worst.max((fit.omega / truth.omega - 1.0).abs());
            phase_worst = phase_worst.max(((fit.psi - psi + PI).rem_euclid(2.0 * PI) - PI).abs());
            points += 1;
        }
    }

    let lag = 3;
    let omega = 12.0 * MHZ;
    let flat = TransferFunction::flat(0.5 / dt).unwrap();
    let deltas: Vec<f64> = [-30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0].iter().map(|d| d * MHZ).collect();
    let values: Vec<Complex64> = deltas
        .iter()
        .map(|&d| {
            let rec = coherence_cli::run::synthetic_rabi_record(&flat, omega, d, 400, dt, lag).unwrap();
            fit_transfer_point(&rec, Complex64::new(omega, 0.0)).unwrap().value
        })
        .collect();
    let (slope, _) = phase_slope(&deltas, &values).unwrap();
    let lag_s = lag as f64 * dt;
    let slope_err = (slope + lag_s).abs() / lag_s;

    outcome(
        worst_l2 <= 1e-3 && amp_worst <= 0.005 && phase_worst <= 0.01 && slope_err <= 0.01,
        format!(
            "round trip L2 {worst_l2:.1e} (tol 1e-3); {points} sweep points, amplitude {:.3}% (tol 0.5%), phase {phase_worst:.1e} rad (tol 0.01); delay slope error {:.3}% (tol 1%)",
            amp_worst * 100.0,
            slope_err * 100.0
        ),
    )
}

// 10
fn scope_note() -> Outcome {
    let readme = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).unwrap_or_default();
    let noted = readme.contains("not reproducible");
    outcome(
        noted,
        "hardware ESR data and measured lineshapes are not reproducible at desk scale; criteria 1 and 5 are identity/replay checks, 2-4 and 6-9 are property checks (noted in README)",
    )
}

fn main() {
    // the test harness passes filter arguments; this target always runs everything
    let mut ensemble = Vec::new();
    let results = [
        criterion(1, "Table I identities", secs(1), table1_identity),
        criterion(2, "closed-form IEPG within eps_in^2/2", secs(30), || {
            ensemble = random_ensemble(10_000);
            closed_form_iepg(&ensemble)
        }),
        criterion(3, "c range", secs(30), || c_range(&ensemble)),
        criterion(4, "RB/PB fit recovery", secs(120), fit_recovery),
        criterion(5, "GST gate-set replay", secs(180), s2_replay),
        criterion(6, "avg unitarity vs unitarity of avg", secs(10), unitarity_aggregates),
        criterion(7, "GST round trip", secs(120), gst_round_trip),
        criterion(8, "Lindblad oracles", secs(60), lindblad_oracles),
        criterion(9, "transfer-function round trips", secs(60), transfer_round_trips),
        criterion(10, "non-reproducibility note", secs(1), scope_note),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
