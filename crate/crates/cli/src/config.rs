//! Experiment configuration.
//!
//! Units: times in nanoseconds, frequencies in MHz (ordinary, not angular),
//! B1 distributions as dimensionless amplitude scales.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use coherence::benchmarking::Axis;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ChannelMetrics,
    Rb,
    Pb,
    RbLindblad,
    PbLindblad,
    GstGen,
    GstFit,
    TransferFit,
    Distort,
    DesignPulse,
    Table1,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::ChannelMetrics => "channel-metrics",
            Mode::Rb => "rb",
            Mode::Pb => "pb",
            Mode::RbLindblad => "rb-lindblad",
            Mode::PbLindblad => "pb-lindblad",
            Mode::GstGen => "gst-gen",
            Mode::GstFit => "gst-fit",
            Mode::TransferFit => "transfer-fit",
            Mode::Distort => "distort",
            Mode::DesignPulse => "design-pulse",
            Mode::Table1 => "table1",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mode: Mode,
    pub seed: u64,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub channel_metrics: Option<ChannelMetricsConfig>,
    #[serde(default)]
    pub benchmark: Option<BenchmarkConfig>,
    #[serde(default)]
    pub lindblad_benchmark: Option<LindbladBenchmarkConfig>,
    #[serde(default)]
    pub gst_gen: Option<GstGenConfig>,
    #[serde(default)]
    pub gst_fit: Option<GstFitConfig>,
    #[serde(default)]
    pub transfer_fit: Option<TransferFitConfig>,
    #[serde(default)]
    pub distort: Option<DistortConfig>,
    #[serde(default)]
    pub design_pulse: Option<DesignPulseConfig>,
    #[serde(default)]
    pub table1: Option<Table1Config>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

/// A channel built from a named family, raw PTM entries, or a composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelConfig {
    Depolarizing { p: f64 },
    Dephasing { p: f64 },
    AmplitudeDamping { gamma: f64 },
    /// Angle in radians.
    UnitaryRotation { axis: [f64; 3], angle: f64 },
    /// 16 row-major PTM entries.
    Ptm { entries: Vec<f64> },
    /// Applied in list order.
    Composite { parts: Vec<ChannelConfig> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelMetricsConfig {
    pub channel: ChannelConfig,
}

/// Noise after each Clifford.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseConfig {
    GateIndependent { channel: ChannelConfig },
    /// One noise channel per pulse in X90, Y90, X180, Y180, I order.
    PulseNoise { pulses: Vec<ChannelConfig> },
    /// Implemented pulses from a gate set.
    GateSet { gate_set: GateSetConfig },
    /// `+theta` z-rotations after the first 12 Cliffords, `-theta` after the rest.
    SignedZ { theta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum GateSetConfig {
    Ideal,
    /// `tmeas_sel`, `tmeas_nosel` or `flat_nosel`.
    Paper { name: String },
    /// JSON array of five `{"ptm": [16 entries]}` objects.
    File { path: PathBuf },
    /// Noise channels following ideal pulses.
    PulseNoise { pulses: Vec<ChannelConfig> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OffsetConfig {
    Free,
    Fixed(f64),
    /// Offset implied by the noise model and the nominal SPAM.
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceDesign {
    pub lengths: Vec<usize>,
    pub sequences: usize,
    #[serde(default)]
    pub shots: Option<u64>,
    #[serde(default = "default_offset")]
    pub offset: OffsetConfig,
    /// Sequence-level bootstrap resamples; 0 disables it.
    #[serde(default)]
    pub bootstrap: usize,
}

fn default_offset() -> OffsetConfig {
    OffsetConfig::Free
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub noise: NoiseConfig,
    pub design: SequenceDesign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionConfig {
    Delta { value: f64 },
    Lorentzian { center: f64, hwhm: f64, points: usize },
    Gaussian { center: f64, sigma: f64, points: usize },
    /// CSV with columns point, weight in the same units as the other kinds.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LindbladConfig {
    pub t1_ns: f64,
    pub t2_ns: f64,
    /// Integrator step.
    pub dt_ns: f64,
    /// Larmor offset in MHz.
    pub larmor: DistributionConfig,
    pub b1: DistributionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SquarePulses {
    /// Length of every pulse, including the idle.
    pub duration_ns: f64,
    pub sample_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LindbladBenchmarkConfig {
    pub lindblad: LindbladConfig,
    pub pulses: SquarePulses,
    /// Spin-packet selection: the Larmor distribution is replaced by this one.
    #[serde(default)]
    pub sel_larmor: Option<DistributionConfig>,
    pub design: SequenceDesign,
}

fn default_meas() -> Vec<Axis> {
    vec![Axis::X, Axis::Y]
}

fn default_rho() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GstGenConfig {
    pub gate_set: GateSetConfig,
    #[serde(default = "default_rho")]
    pub rho_i: [f64; 3],
    #[serde(default = "default_meas")]
    pub meas: Vec<Axis>,
    #[serde(default)]
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GstDataConfig {
    /// CSV with columns k, l, m, n, value.
    File {
        path: PathBuf,
        #[serde(default = "default_rho")]
        rho_i: [f64; 3],
    },
    Generate(GstGenConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GstFitConfig {
    pub data: GstDataConfig,
    #[serde(default)]
    pub max_iter: Option<usize>,
    #[serde(default)]
    pub tol: Option<f64>,
    /// Parametric bootstrap replicas at the given readout noise.
    #[serde(default)]
    pub bootstrap: Option<GstBootstrapConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GstBootstrapConfig {
    pub resamples: usize,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransferConfig {
    Flat,
    OnePole { fc_mhz: f64 },
    TwoPole { fc_mhz: f64 },
    /// CSV with columns freq_mhz, re, im.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferFitConfig {
    /// Hardware response used to synthesize the Rabi records.
    pub truth: TransferConfig,
    /// Nominal drive amplitude.
    pub omega_mhz: f64,
    pub offsets_mhz: Vec<f64>,
    pub pulse_samples: usize,
    pub sample_ns: f64,
    /// Delay of the pulse with respect to the assumed start, in samples.
    #[serde(default)]
    pub delay_samples: usize,
    #[serde(default)]
    pub refine_passes: usize,
    /// Gaussian noise added to each Bloch component.
    #[serde(default)]
    pub readout_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WaveformConfig {
    /// Amplitude in MHz (Rabi frequency), phase in radians.
    Square {
        amplitude_mhz: f64,
        #[serde(default)]
        phase: f64,
        duration_ns: f64,
        sample_ns: f64,
    },
    /// CSV with columns time_ns, i_amp, q_amp; amplitudes in rad/s.
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Distort,
    Predistort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortConfig {
    pub waveform: WaveformConfig,
    pub transfer: TransferConfig,
    pub direction: Direction,
    #[serde(default)]
    pub epsilon_reg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetConfig {
    Pulse { name: coherence::clifford::Primitive },
    /// Angle in radians.
    Rotation { axis: [f64; 3], angle: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignPulseConfig {
    pub target: TargetConfig,
    pub duration_ns: f64,
    pub samples: usize,
    /// Larmor offset in MHz.
    pub larmor: DistributionConfig,
    pub b1: DistributionConfig,
    #[serde(default)]
    pub max_amplitude_mhz: Option<f64>,
    #[serde(default)]
    pub max_iter: Option<usize>,
}

/// One column of a Table-I-style report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioConfig {
    /// Already-fitted error rates with their one-sigma uncertainties.
    Measured {
        label: String,
        epsilon: f64,
        epsilon_sigma: f64,
        epsilon_in: f64,
        epsilon_in_sigma: f64,
    },
    /// RB and PB are simulated and fitted.
    Simulated {
        label: String,
        noise: NoiseConfig,
        design: SequenceDesign,
    },
    /// As `Simulated`, with gates from a Lindblad pulse simulation.
    Lindblad {
        label: String,
        config: LindbladBenchmarkConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table1Config {
    pub scenarios: Vec<ScenarioConfig>,
}
