use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::Path;

use coherence::benchmarking::{gen_sequences, simulate_pb_ensemble, simulate_rb_ensemble, write_records_csv, BenchmarkRecord, NoiseModel, SimOptions};
use coherence::channels::{is_cptp, make_channel, unitarity, bepg, ChannelMetrics, ChannelSpec, PauliTransferMatrix, DEFAULT_CPTP_TOL};
use coherence::fitting::{bootstrap_ci, fit_decay, BootstrapCi, DecayFit, DecayModel, FitOptions};
use coherence::gst::{
    avg_unitarity, bootstrap_gst, clifford_from_gateset, fit_gst, gen_gst_data, unitarity_of_avg, GateSet, GstDataset, GstFitOptions, GstMetrics,
};
use coherence::lindblad::{evolve, to_larmor_frame, DensityMatrix, LindbladParams};
use coherence::pulses::{
    design_pulse, distort, distorted_square_shape, fit_transfer_point, phase_slope, predistort, refine_transfer_function, DesignOptions, RabiMeasurement, TransferPointFit,
};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::build::{self, MHZ, NS};
use crate::config::*;
use crate::error::{CliError, Result};
use crate::table1::{pipeline_table1, write_table1_csv};

/// In-memory products of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub results_csv: Vec<u8>,
    pub fit: serde_json::Value,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub library_version: String,
    pub schema_version: u32,
    pub mode: String,
    pub seed: u64,
    pub config_sha256: String,
    /// File name to SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("plain data serializes")
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Schema(e.to_string()))?;
    validate(&cfg)?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text)
}

/// Checks the schema version and that exactly the block for the mode is present.
pub fn validate(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(CliError::Schema(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            cfg.schema_version
        )));
    }
    let blocks = [
        ("channel_metrics", cfg.channel_metrics.is_some(), &[Mode::ChannelMetrics][..]),
        ("benchmark", cfg.benchmark.is_some(), &[Mode::Rb, Mode::Pb][..]),
        ("lindblad_benchmark", cfg.lindblad_benchmark.is_some(), &[Mode::RbLindblad, Mode::PbLindblad][..]),
        ("gst_gen", cfg.gst_gen.is_some(), &[Mode::GstGen][..]),
        ("gst_fit", cfg.gst_fit.is_some(), &[Mode::GstFit][..]),
        ("transfer_fit", cfg.transfer_fit.is_some(), &[Mode::TransferFit][..]),
        ("distort", cfg.distort.is_some(), &[Mode::Distort][..]),
        ("design_pulse", cfg.design_pulse.is_some(), &[Mode::DesignPulse][..]),
        ("table1", cfg.table1.is_some(), &[Mode::Table1][..]),
    ];
    for (name, present, modes) in blocks {
        let wanted = modes.contains(&cfg.mode);
        if wanted && !present {
            return Err(CliError::Schema(format!("mode {} needs a \"{name}\" block", cfg.mode.as_str())));
        }
        if present && !wanted {
            return Err(CliError::Schema(format!("block \"{name}\" is not used by mode {}", cfg.mode.as_str())));
        }
    }
    Ok(())
}

fn block<T>(b: &Option<T>) -> &T {
    b.as_ref().expect("validated config")
}

/// Runs the experiment without touching the file system for outputs.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutput> {
    validate(cfg)?;
    match cfg.mode {
        Mode::ChannelMetrics => channel_metrics(block(&cfg.channel_metrics)),
        Mode::Rb | Mode::Pb => {
            let b = block(&cfg.benchmark);
            let models = vec![(1.0, build::noise(&b.noise)?)];
            benchmark_mode(&models, &b.design, decay_model(cfg.mode), cfg.seed)
        }
        Mode::RbLindblad | Mode::PbLindblad => {
            let b = block(&cfg.lindblad_benchmark);
            let models = build::lindblad_ensemble(b)?;
            benchmark_mode(&models, &b.design, decay_model(cfg.mode), cfg.seed)
        }
        Mode::GstGen => gst_gen(block(&cfg.gst_gen), cfg.seed),
        Mode::GstFit => gst_fit_mode(block(&cfg.gst_fit), cfg.seed),
        Mode::TransferFit => transfer_fit(block(&cfg.transfer_fit), cfg.seed),
        Mode::Distort => distort_mode(block(&cfg.distort)),
        Mode::DesignPulse => design_mode(block(&cfg.design_pulse)),
        Mode::Table1 => {
            let rows = pipeline_table1(block(&cfg.table1), cfg.seed)?;
            let mut csv = Vec::new();
            write_table1_csv(&rows, &mut csv)?;
            let mut summary = String::new();
            for r in &rows {
                let _ = writeln!(summary, "{r}");
            }
            Ok(RunOutput {
                results_csv: csv,
                fit: json!({ "rows": rows }),
                summary,
            })
        }
    }
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], hashes: &mut BTreeMap<String, String>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    hashes.insert(name.to_string(), sha256_hex(bytes));
    Ok(())
}

/// Runs the experiment and writes results.csv, fit.json, summary.txt and manifest.json.
pub fn run(cfg: &ExperimentConfig) -> Result<(RunOutput, Manifest)> {
    let out = execute(cfg)?;
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut hashes = BTreeMap::new();
    write_file(dir, "results.csv", &out.results_csv, &mut hashes)?;
    let fit = serde_json::to_vec_pretty(&out.fit).expect("json value serializes");
    write_file(dir, "fit.json", &fit, &mut hashes)?;
    write_file(dir, "summary.txt", out.summary.as_bytes(), &mut hashes)?;
    // the output location does not change the experiment
    let mut hashed = cfg.clone();
    hashed.output = OutputConfig::default();
    let config_bytes = serde_json::to_vec(&hashed).expect("config serializes");
    let manifest = Manifest {
        tool: "coherence".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        library_version: coherence::VERSION.into(),
        schema_version: cfg.schema_version,
        mode: cfg.mode.as_str().into(),
        seed: cfg.seed,
        config_sha256: sha256_hex(&config_bytes),
        outputs: hashes,
    };
    let path = dir.join("manifest.json");
    let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    Ok((out, manifest))
}

fn channel_metrics(cfg: &ChannelMetricsConfig) -> Result<RunOutput> {
    let e = build::channel(&cfg.channel)?;
    let m = ChannelMetrics::of(&e)?;
    let rows = [
        ("epsilon", m.epsilon),
        ("fidelity", m.fidelity),
        ("unitarity", m.unitarity),
        ("epsilon_in", m.epsilon_in),
        ("epsilon_in_exact", m.epsilon_in_exact),
        ("epsilon_coh", m.epsilon_coh),
        ("diamond_lower", m.diamond.lower),
        ("diamond_upper", m.diamond.upper),
    ];
    let mut csv = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(csv, "{k},{v:.17e}");
    }
    let summary = format!(
        "epsilon {:.6}  unitarity {:.6}  epsilon_in {:.6}  epsilon_coh {:.6}  diamond [{:.6}, {:.6}]\n",
        m.epsilon, m.unitarity, m.epsilon_in, m.epsilon_coh, m.diamond.lower, m.diamond.upper
    );
    Ok(RunOutput {
        results_csv: csv.into_bytes(),
        fit: json!({ "ptm": e, "cptp": is_cptp(&e, DEFAULT_CPTP_TOL), "metrics": m }),
        summary,
    })
}

fn decay_model(mode: Mode) -> DecayModel {
    match mode {
        Mode::Pb | Mode::PbLindblad => DecayModel::Pb,
        _ => DecayModel::Rb,
    }
}

/// Error rates of the configured noise, for comparison with the fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseReference {
    /// Mean BEPG over the 24 Cliffords.
    pub epsilon: f64,
    pub avg_unitarity: f64,
    pub unitarity_of_avg: f64,
    /// `(1 - √avg_unitarity)/2`.
    pub epsilon_in: f64,
}

pub fn noise_reference(models: &[(f64, NoiseModel)]) -> Result<NoiseReference> {
    let channels = build::mean_channels(models);
    let eps: f64 = channels.iter().map(bepg).sum::<coherence::Result<f64>>()? / channels.len() as f64;
    let au = avg_unitarity(&channels)?;
    Ok(NoiseReference {
        epsilon: eps,
        avg_unitarity: au,
        unitarity_of_avg: unitarity_of_avg(&channels)?,
        epsilon_in: 0.5 * (1.0 - au.max(0.0).sqrt()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkOutcome {
    pub records: Vec<BenchmarkRecord>,
    pub fit: DecayFit,
    pub bootstrap: Option<BootstrapCi>,
}

/// Simulates and fits one RB or PB experiment over a weighted ensemble.
pub fn benchmark(models: &[(f64, NoiseModel)], design: &SequenceDesign, model: DecayModel, seed: u64) -> Result<BenchmarkOutcome> {
    let seqs = gen_sequences(&design.lengths, design.sequences, seed)?;
    let opts = SimOptions {
        spam: None,
        shots: design.shots,
    };
    let records = match model {
        DecayModel::Rb => simulate_rb_ensemble(models, &seqs, &opts)?,
        DecayModel::Pb => simulate_pb_ensemble(models, &seqs, &opts)?,
    };
    let offset = build::offset_mode(design.offset, models, model == DecayModel::Pb);
    let fit_opts = FitOptions::new(offset);
    let fit = fit_decay(&records, model, &fit_opts)?;
    let bootstrap = match design.bootstrap {
        0 => None,
        n => Some(bootstrap_ci(&records, model, &fit_opts, n, seed)?),
    };
    Ok(BenchmarkOutcome { records, fit, bootstrap })
}

fn benchmark_mode(models: &[(f64, NoiseModel)], design: &SequenceDesign, model: DecayModel, seed: u64) -> Result<RunOutput> {
    let outcome = benchmark(models, design, model, seed)?;
    let reference = noise_reference(models)?;
    let mut csv = Vec::new();
    write_records_csv(&outcome.records, &mut csv)?;
    let f = &outcome.fit;
    let summary = match model {
        DecayModel::Rb => format!(
            "RB: epsilon = {:.6} ± {:.6} (configured noise: {:.6}); offset {:.5}, amplitude {:.5}\n",
            f.rate_param, f.sigma.rate_param, reference.epsilon, f.offset, f.amplitude
        ),
        DecayModel::Pb => format!(
            "PB: u = {:.6} ± {:.6}, epsilon_in = {:.6} ± {:.6} (configured noise: u {:.6}, epsilon_in {:.6})\n",
            f.rate_param,
            f.sigma.rate_param,
            f.epsilon_in.unwrap_or(f64::NAN),
            f.sigma.epsilon_in.unwrap_or(f64::NAN),
            reference.avg_unitarity,
            reference.epsilon_in
        ),
    };
    Ok(RunOutput {
        results_csv: csv,
        fit: json!({
            "ensemble_members": models.len(),
            "fit": outcome.fit,
            "bootstrap": outcome.bootstrap,
            "reference": reference,
        }),
        summary,
    })
}

fn gst_gen(cfg: &GstGenConfig, seed: u64) -> Result<RunOutput> {
    let gs = build::gate_set(&cfg.gate_set)?;
    let data = gen_gst_data(&gs, cfg.rho_i, &cfg.meas, cfg.noise_sigma, seed)?;
    let mut csv = Vec::new();
    data.to_csv(&mut csv)?;
    let metrics = clifford_from_gateset(&gs)?.metrics;
    Ok(RunOutput {
        results_csv: csv,
        fit: json!({ "gates": gs, "metrics": metrics }),
        summary: format!("{} GST entries from {} readout axes\n", data.entries.len(), cfg.meas.len()),
    })
}

fn metrics_summary(m: &GstMetrics) -> String {
    format!(
        "pulse fidelities {:?}\nClifford epsilon {:.5}, epsilon_in from avg unitarity {:.5}, from unitarity of avg {:.5}\n",
        m.gate_fidelity.map(|f| (f * 1e5).round() / 1e5),
        m.clifford_epsilon,
        m.clifford_epsilon_in,
        m.clifford_epsilon_in_of_avg
    )
}

fn spread(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn gst_fit_mode(cfg: &GstFitConfig, seed: u64) -> Result<RunOutput> {
    let (data, truth) = match &cfg.data {
        GstDataConfig::File { path, rho_i } => {
            let f = File::open(path).map_err(|e| CliError::io(path, e))?;
            (GstDataset::from_csv(f, *rho_i)?, None)
        }
        GstDataConfig::Generate(g) => {
            let gs = build::gate_set(&g.gate_set)?;
            (gen_gst_data(&gs, g.rho_i, &g.meas, g.noise_sigma, seed)?, Some(gs))
        }
    };
    let mut opts = GstFitOptions::default();
    if let Some(n) = cfg.max_iter {
        opts.max_iter = n;
    }
    if let Some(t) = cfg.tol {
        opts.tol = t;
    }
    let fit = fit_gst(&data, &GateSet::ideal(), &opts)?;
    let metrics = clifford_from_gateset(&fit.gates)?.metrics;
    let mut csv = String::from("gate,row,col,value\n");
    for (p, g) in coherence::clifford::Primitive::ALL.iter().zip(&fit.gates.gates) {
        for r in 0..4 {
            for c in 0..4 {
                let _ = writeln!(csv, "{},{r},{c},{:.17e}", p.name(), g.matrix()[(r, c)]);
            }
        }
    }
    let mut summary = format!(
        "GST residual {:.3e} after {} iterations{}\n",
        fit.residual,
        fit.iterations,
        if fit.misfit { " (model misfit)" } else { "" }
    );
    summary += &metrics_summary(&metrics);
    let mut out = json!({
        "gates": fit.gates,
        "residual": fit.residual,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "misfit": fit.misfit,
        "metrics": metrics,
    });
    if let Some(t) = truth {
        let err = fit.gates.max_entry_difference(&t);
        let _ = writeln!(summary, "max entry error against the generating set {err:.3e}");
        out["max_entry_error"] = json!(err);
        out["true_metrics"] = to_json(&clifford_from_gateset(&t)?.metrics);
    }
    if let Some(b) = &cfg.bootstrap {
        let reps = bootstrap_gst(&fit.gates, data.rho_i, &data.meas, b.noise_sigma, b.resamples, seed ^ 0x5EED, &opts)?;
        let ms: Vec<GstMetrics> = reps.iter().map(|g| clifford_from_gateset(g).map(|c| c.metrics)).collect::<coherence::Result<_>>()?;
        let sd = |f: fn(&GstMetrics) -> f64| spread(&ms.iter().map(f).collect::<Vec<_>>()).1;
        out["bootstrap"] = json!({
            "resamples": reps.len(),
            "clifford_epsilon_sd": sd(|m| m.clifford_epsilon),
            "clifford_epsilon_in_sd": sd(|m| m.clifford_epsilon_in),
            "clifford_epsilon_in_of_avg_sd": sd(|m| m.clifford_epsilon_in_of_avg),
        });
    }
    Ok(RunOutput {
        results_csv: csv.into_bytes(),
        fit: out,
        summary,
    })
}

/// Larmor-frame Rabi record of a square pulse distorted by `t` and delayed by `delay` samples.
pub fn synthetic_rabi_record(
    t: &coherence::pulses::TransferFunction,
    omega: f64,
    delta: f64,
    n_pulse: usize,
    dt: f64,
    delay: usize,
) -> Result<RabiMeasurement> {
    let shape = distorted_square_shape(t, delta, n_pulse, dt)?;
    let drive = t.eval(delta / (2.0 * std::f64::consts::PI))? * omega;
    let mut samples = vec![Complex64::new(0.0, 0.0); delay];
    samples.extend(shape.samples.iter().map(|s| s * drive));
    let wf = coherence::pulses::Waveform::new(samples, dt)?;
    let params = LindbladParams::ideal(dt / 4.0);
    let traj = evolve(&DensityMatrix::ground(), &wf, &params, delta, 1.0)?;
    let t0 = delay as f64 * dt;
    let (mut times, mut sx, mut sy) = (Vec::new(), Vec::new(), Vec::new());
    for (&time, r) in traj.times.iter().zip(&traj.bloch).step_by(2) {
        if time < t0 - 1e-3 * dt {
            continue;
        }
        let lab = to_larmor_frame(r, delta, time);
        times.push(time);
        sx.push(lab[0]);
        sy.push(lab[1]);
    }
    Ok(RabiMeasurement { times, sx, sy, delta, t0 })
}

fn transfer_fit(cfg: &TransferFitConfig, seed: u64) -> Result<RunOutput> {
    let dt = cfg.sample_ns * NS;
    let truth = build::transfer(&cfg.truth, 0.5 / dt)?;
    let omega = cfg.omega_mhz * MHZ;
    let nominal = Complex64::new(omega, 0.0);
    let noise = Normal::new(0.0, cfg.readout_sigma.max(0.0)).map_err(|e| CliError::Schema(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for &d in &cfg.offsets_mhz {
        let mut r = synthetic_rabi_record(&truth, omega, d * MHZ, cfg.pulse_samples, dt, cfg.delay_samples)?;
        if cfg.readout_sigma > 0.0 {
            r.sx.iter_mut().chain(r.sy.iter_mut()).for_each(|v| *v += noise.sample(&mut rng));
        }
        records.push(r);
    }
    let passes: Vec<Vec<TransferPointFit>> = if cfg.refine_passes == 0 {
        vec![records.iter().map(|r| fit_transfer_point(r, nominal)).collect::<coherence::Result<_>>()?]
    } else {
        refine_transfer_function(&records, nominal, cfg.pulse_samples, dt, cfg.refine_passes)?.passes
    };
    let mut csv = String::from("offset_mhz,pass,re,im,omega_mhz,psi,true_re,true_im,residual_rms,low_confidence,converged\n");
    let mut max_err = Vec::new();
    for (k, pass) in passes.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (f, d) in pass.iter().zip(&cfg.offsets_mhz) {
            let tv = truth.eval(d * 1e6)?;
            worst = worst.max((f.value - tv).norm());
            let _ = writeln!(
                csv,
                "{d},{k},{:.12e},{:.12e},{:.9},{:.9},{:.12e},{:.12e},{:.6e},{},{}",
                f.value.re,
                f.value.im,
                f.omega / MHZ,
                f.psi,
                tv.re,
                tv.im,
                f.residual_rms,
                f.low_confidence,
                f.converged
            );
        }
        max_err.push(worst);
    }
    let last = passes.last().expect("at least one pass");
    let deltas: Vec<f64> = cfg.offsets_mhz.iter().map(|d| d * MHZ).collect();
    let values: Vec<Complex64> = last.iter().map(|f| f.value).collect();
    let slope = if deltas.len() >= 2 { phase_slope(&deltas, &values).ok() } else { None };
    let mut summary = format!(
        "{} offsets, {} pass(es); max |T_fit - T| per pass {:?}\n",
        deltas.len(),
        passes.len(),
        max_err.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>()
    );
    if let Some((s, _)) = slope {
        let _ = writeln!(summary, "phase slope {:.4} ns (a pure delay shows up as minus the delay)", s / NS);
    }
    Ok(RunOutput {
        results_csv: csv.into_bytes(),
        fit: json!({
            "max_abs_error_per_pass": max_err,
            "phase_slope_ns": slope.map(|s| s.0 / NS),
            "phase_intercept": slope.map(|s| s.1),
            "points": last,
        }),
        summary,
    })
}

fn distort_mode(cfg: &DistortConfig) -> Result<RunOutput> {
    let wf = build::waveform(&cfg.waveform)?;
    let mut t = build::transfer(&cfg.transfer, 0.5 / wf.dt)?;
    t.epsilon_reg = cfg.epsilon_reg;
    let out = match cfg.direction {
        Direction::Distort => distort(&wf, &t)?,
        Direction::Predistort => predistort(&wf, &t)?,
    };
    let mut csv = Vec::new();
    out.to_csv(&mut csv)?;
    Ok(RunOutput {
        results_csv: csv,
        fit: json!({ "samples": out.len(), "energy_in": wf.energy(), "energy_out": out.energy() }),
        summary: format!("{} samples, energy ratio {:.6}\n", out.len(), out.energy() / wf.energy()),
    })
}

fn design_mode(cfg: &DesignPulseConfig) -> Result<RunOutput> {
    let target: PauliTransferMatrix = match &cfg.target {
        TargetConfig::Pulse { name } => name.ideal_ptm(),
        TargetConfig::Rotation { axis, angle } => make_channel(&ChannelSpec::UnitaryRotation { axis: *axis, angle: *angle })?,
    };
    let larmor = build::distribution(&cfg.larmor, MHZ)?;
    let b1 = build::distribution(&cfg.b1, 1.0)?;
    let mut opts = DesignOptions {
        max_amplitude: cfg.max_amplitude_mhz.map(|a| a * MHZ),
        ..Default::default()
    };
    if let Some(n) = cfg.max_iter {
        opts.max_iter = n;
    }
    let r = design_pulse(&target, cfg.duration_ns * NS, cfg.samples, &larmor, &b1, &opts)?;
    let mut csv = Vec::new();
    r.waveform.to_csv(&mut csv)?;
    Ok(RunOutput {
        results_csv: csv,
        fit: json!({
            "fidelity": r.fidelity,
            "iterations": r.iterations,
            "stagnated": r.stagnated,
            "target_unitarity": unitarity(&target),
        }),
        summary: format!(
            "weighted fidelity {:.6} after {} iterations{}\n",
            r.fidelity,
            r.iterations,
            if r.stagnated { " (stagnated)" } else { "" }
        ),
    })
}
