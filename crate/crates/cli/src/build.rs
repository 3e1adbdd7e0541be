//! Config blocks to library objects.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs::File;
use std::path::Path;

use coherence::benchmarking::{spam_offsets, Axis, NoiseModel};
use coherence::channels::{make_channel, rotation_matrix, ChannelSpec, PauliTransferMatrix};
use coherence::clifford::{Primitive, GROUP_SIZE};
use coherence::fitting::OffsetMode;
use coherence::gst::{paper_gate_set, GateSet};
use coherence::lindblad::{pulse_propagator, LindbladParams, ProbabilityDistribution};
use coherence::pulses::{TransferFunction, Waveform};
use nalgebra::{Matrix4, Vector3};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::config::*;
use crate::error::{CliError, Result};

pub const MHZ: f64 = 2.0 * PI * 1e6;
pub const NS: f64 = 1e-9;
const TRANSFER_POINTS: usize = 4001;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| CliError::io(path, e))
}

pub fn channel(cfg: &ChannelConfig) -> Result<PauliTransferMatrix> {
    let spec = match cfg {
        ChannelConfig::Depolarizing { p } => ChannelSpec::Depolarizing { p: *p },
        ChannelConfig::Dephasing { p } => ChannelSpec::Dephasing { p: *p },
        ChannelConfig::AmplitudeDamping { gamma } => ChannelSpec::AmplitudeDamping { gamma: *gamma },
        ChannelConfig::UnitaryRotation { axis, angle } => ChannelSpec::UnitaryRotation {
            axis: *axis,
            angle: *angle,
        },
        ChannelConfig::Ptm { entries } => return Ok(PauliTransferMatrix::from_row_major(entries)?),
        ChannelConfig::Composite { parts } => {
            let mut acc = PauliTransferMatrix::identity();
            for p in parts {
                acc = channel(p)?.after(&acc);
            }
            return Ok(acc);
        }
    };
    Ok(make_channel(&spec)?)
}

fn five_channels(pulses: &[ChannelConfig]) -> Result<[PauliTransferMatrix; 5]> {
    if pulses.len() != 5 {
        return Err(CliError::Schema(format!(
            "expected 5 pulse channels (X90, Y90, X180, Y180, I), got {}",
            pulses.len()
        )));
    }
    let v: Vec<PauliTransferMatrix> = pulses.iter().map(channel).collect::<Result<_>>()?;
    Ok([v[0], v[1], v[2], v[3], v[4]])
}

pub fn gate_set(cfg: &GateSetConfig) -> Result<GateSet> {
    match cfg {
        GateSetConfig::Ideal => Ok(GateSet::ideal()),
        GateSetConfig::Paper { name } => Ok(paper_gate_set(name)?),
        GateSetConfig::File { path } => {
            serde_json::from_reader(open(path)?).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
        }
        GateSetConfig::PulseNoise { pulses } => {
            let noise = five_channels(pulses)?;
            Ok(GateSet {
                gates: std::array::from_fn(|i| noise[i].after(&Primitive::ALL[i].ideal_ptm())),
            })
        }
    }
}

pub fn noise(cfg: &NoiseConfig) -> Result<NoiseModel> {
    match cfg {
        NoiseConfig::GateIndependent { channel: c } => Ok(NoiseModel::GateIndependent(channel(c)?)),
        NoiseConfig::PulseNoise { pulses } => Ok(NoiseModel::from_pulse_noise(&five_channels(pulses)?)),
        NoiseConfig::GateSet { gate_set: g } => Ok(NoiseModel::from_noisy_pulses(&gate_set(g)?.gates)),
        NoiseConfig::SignedZ { theta } => {
            let channels = (0..GROUP_SIZE)
                .map(|g| {
                    let s = if g < GROUP_SIZE / 2 { *theta } else { -theta };
                    PauliTransferMatrix::from_rotation(&rotation_matrix(&Vector3::z(), s))
                })
                .collect();
            Ok(NoiseModel::per_gate(channels)?)
        }
    }
}

/// `scale` converts the configured unit to the library's.
pub fn distribution(cfg: &DistributionConfig, scale: f64) -> Result<ProbabilityDistribution> {
    Ok(match cfg {
        DistributionConfig::Delta { value } => ProbabilityDistribution::delta(value * scale),
        DistributionConfig::Lorentzian { center, hwhm, points } => {
            ProbabilityDistribution::lorentzian(center * scale, hwhm * scale, *points)?
        }
        DistributionConfig::Gaussian { center, sigma, points } => {
            ProbabilityDistribution::gaussian(center * scale, sigma * scale, *points)?
        }
        DistributionConfig::File { path } => {
            let d = ProbabilityDistribution::from_csv(open(path)?)?;
            let points = d.points().iter().map(|x| x * scale).collect();
            ProbabilityDistribution::tabulated(points, d.weights().to_vec())?
        }
    })
}

pub fn transfer(cfg: &TransferConfig, f_max: f64) -> Result<TransferFunction> {
    Ok(match cfg {
        TransferConfig::Flat => TransferFunction::flat(f_max)?,
        TransferConfig::OnePole { fc_mhz } => TransferFunction::one_pole(fc_mhz * 1e6, f_max, TRANSFER_POINTS)?,
        TransferConfig::TwoPole { fc_mhz } => TransferFunction::two_pole(fc_mhz * 1e6, f_max, TRANSFER_POINTS)?,
        TransferConfig::File { path } => TransferFunction::from_csv(open(path)?)?,
    })
}

pub fn waveform(cfg: &WaveformConfig) -> Result<Waveform> {
    match cfg {
        WaveformConfig::Square {
            amplitude_mhz,
            phase,
            duration_ns,
            sample_ns,
        } => Ok(Waveform::square(
            Complex64::from_polar(amplitude_mhz * MHZ, *phase),
            duration_ns * NS,
            sample_ns * NS,
        )?),
        WaveformConfig::File { path } => Ok(Waveform::from_csv(open(path)?)?),
    }
}

pub fn lindblad_params(cfg: &LindbladConfig, larmor: Option<&DistributionConfig>) -> Result<LindbladParams> {
    Ok(LindbladParams::new(
        cfg.t1_ns * NS,
        cfg.t2_ns * NS,
        distribution(larmor.unwrap_or(&cfg.larmor), MHZ)?,
        distribution(&cfg.b1, 1.0)?,
        cfg.dt_ns * NS,
    )?)
}

/// Square pulses of equal length; the idle pulse has zero drive.
pub fn square_pulses(cfg: &SquarePulses) -> Result<[Waveform; 5]> {
    let dt = cfg.sample_ns * NS;
    let n = (cfg.duration_ns / cfg.sample_ns).round();
    if !(n >= 1.0) {
        return Err(CliError::Schema("pulse duration must cover at least one sample".into()));
    }
    let n = n as usize;
    let t = n as f64 * dt;
    let make = |p: Primitive| {
        let amp = match p {
            Primitive::X90 => Complex64::new(FRAC_PI_2 / t, 0.0),
            Primitive::Y90 => Complex64::new(0.0, FRAC_PI_2 / t),
            Primitive::X180 => Complex64::new(PI / t, 0.0),
            Primitive::Y180 => Complex64::new(0.0, PI / t),
            Primitive::I => Complex64::new(0.0, 0.0),
        };
        Waveform::new(vec![amp; n], dt)
    };
    let v: Vec<Waveform> = Primitive::ALL.iter().map(|&p| make(p)).collect::<coherence::Result<_>>()?;
    Ok(v.try_into().expect("five pulses"))
}

/// One weighted noise model per ensemble member.
pub fn lindblad_ensemble(cfg: &LindbladBenchmarkConfig) -> Result<Vec<(f64, NoiseModel)>> {
    let params = lindblad_params(&cfg.lindblad, cfg.sel_larmor.as_ref())?;
    let pulses = square_pulses(&cfg.pulses)?;
    coherence::lindblad::ensemble_grid(&params)
        .par_iter()
        .map(|&(d, b, w)| {
            let mut gates = [PauliTransferMatrix::identity(); 5];
            for (g, wf) in gates.iter_mut().zip(&pulses) {
                *g = PauliTransferMatrix::from_matrix(pulse_propagator(wf, &params, d, b)?).project_tp();
            }
            Ok((w, NoiseModel::from_noisy_pulses(&gates)))
        })
        .collect()
}

/// Per-Clifford noise averaged over the ensemble.
pub fn mean_channels(models: &[(f64, NoiseModel)]) -> Vec<PauliTransferMatrix> {
    (0..GROUP_SIZE)
        .map(|g| {
            let m: Matrix4<f64> = models
                .iter()
                .map(|(w, nm)| nm.channel(g).expect("index in range").matrix() * *w)
                .sum();
            PauliTransferMatrix::from_matrix(m)
        })
        .collect()
}

/// Resolves the offset handling; `Predicted` uses the nominal `+z` state and σz readout.
pub fn offset_mode(cfg: OffsetConfig, models: &[(f64, NoiseModel)], purity: bool) -> OffsetMode {
    match cfg {
        OffsetConfig::Free => OffsetMode::Free,
        OffsetConfig::Fixed(a) => OffsetMode::Fixed(a),
        OffsetConfig::Predicted => {
            let axes = [Axis::X, Axis::Y, Axis::Z];
            let mut a = [0.0; 3];
            for (w, m) in models {
                let o = spam_offsets(m, &[0.0, 0.0, 1.0], &axes);
                a[0] += w * o.a_x;
                a[1] += w * o.a_y;
                a[2] += w * o.a_z;
            }
            if purity {
                OffsetMode::Fixed(a.iter().map(|x| x * x).sum())
            } else {
                OffsetMode::Fixed(a[2])
            }
        }
    }
}
