//! Randomized benchmarking (RB) and purity benchmarking (PB) at the PTM level.
//!
//! Noise follows each gate: the implemented gate is `E(G)·G`. Sequences are
//! drawn from a counter-based ChaCha stream per `(length, sequence)` pair so
//! that records are identical regardless of thread scheduling.

use std::io::Write;

use nalgebra::{Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::PauliTransferMatrix;
use crate::clifford::{self, Primitive, GROUP_SIZE};
use crate::error::{Error, Result};

/// Random Clifford sequences grouped by nominal length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSet {
    pub lengths: Vec<usize>,
    /// `sequences[l][s]` is the `s`-th sequence of length `lengths[l]`.
    pub sequences: Vec<Vec<Vec<usize>>>,
    pub rng_seed: u64,
}

impl SequenceSet {
    pub fn count(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.len())
    }
}

fn stream_rng(seed: u64, a: usize, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((a as u64) << 32) | b as u64);
    rng
}

/// Draws `count` uniformly random sequences for every length.
pub fn gen_sequences(lengths: &[usize], count: usize, seed: u64) -> Result<SequenceSet> {
    if lengths.is_empty() {
        return Err(Error::InvalidParameter("no sequence lengths given".into()));
    }
    if count == 0 {
        return Err(Error::InvalidParameter("sequence count must be at least 1".into()));
    }
    let sequences = lengths
        .iter()
        .enumerate()
        .map(|(li, &m)| {
            (0..count)
                .map(|si| {
                    let mut rng = stream_rng(seed, li, si);
                    (0..m).map(|_| rng.random_range(0..GROUP_SIZE)).collect()
                })
                .collect()
        })
        .collect();
    Ok(SequenceSet {
        lengths: lengths.to_vec(),
        sequences,
        rng_seed: seed,
    })
}

/// Noise channels `E(G)` following each Clifford.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    GateIndependent(PauliTransferMatrix),
    PerGate(Vec<PauliTransferMatrix>),
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        NoiseModel::GateIndependent(PauliTransferMatrix::identity())
    }

    pub fn per_gate(channels: Vec<PauliTransferMatrix>) -> Result<Self> {
        if channels.len() != GROUP_SIZE {
            return Err(Error::InvalidParameter(format!(
                "per-gate noise needs {GROUP_SIZE} channels, got {}",
                channels.len()
            )));
        }
        Ok(NoiseModel::PerGate(channels))
    }

    /// Lifts implemented pulses (in [`Primitive::ALL`] order) to the group.
    ///
    /// Each Clifford is `Z·P̃·S̃` with the physical S and P pulses taken from
    /// `pulses` and the virtual Z exact; the identity element uses the
    /// identity pulse. The noise is then `noisy·idealᵀ`.
    pub fn from_noisy_pulses(pulses: &[PauliTransferMatrix; 5]) -> Self {
        let channels = lift_pulses(pulses)
            .iter()
            .zip(clifford::clifford_group())
            .map(|(noisy, el)| noisy.after(&el.ptm.transpose()))
            .collect();
        NoiseModel::PerGate(channels)
    }

    /// Like [`NoiseModel::from_noisy_pulses`], from per-pulse noise channels
    /// that follow the ideal pulses.
    pub fn from_pulse_noise(noise: &[PauliTransferMatrix; 5]) -> Self {
        let pulses = std::array::from_fn(|i| noise[i].after(&Primitive::ALL[i].ideal_ptm()));
        Self::from_noisy_pulses(&pulses)
    }

    pub fn channel(&self, index: usize) -> Result<&PauliTransferMatrix> {
        match self {
            NoiseModel::GateIndependent(e) => {
                if index >= GROUP_SIZE {
                    Err(Error::InvalidCliffordIndex(index))
                } else {
                    Ok(e)
                }
            }
            NoiseModel::PerGate(v) => v.get(index).ok_or(Error::InvalidCliffordIndex(index)),
        }
    }

    pub fn channels(&self) -> Vec<PauliTransferMatrix> {
        (0..GROUP_SIZE).map(|i| *self.channel(i).unwrap()).collect()
    }

    /// Implemented gates `E(G)·G` for all 24 elements.
    pub fn noisy_gates(&self) -> Vec<Matrix4<f64>> {
        clifford::clifford_group()
            .iter()
            .map(|el| self.channel(el.index).unwrap().matrix() * el.ptm.matrix())
            .collect()
    }
}

/// Noisy Clifford PTMs assembled from implemented pulses.
pub fn lift_pulses(pulses: &[PauliTransferMatrix; 5]) -> Vec<PauliTransferMatrix> {
    clifford::clifford_group()
        .iter()
        .map(|el| {
            let mut acc = PauliTransferMatrix::identity();
            for p in el.pulses() {
                acc = pulses[p.index()].after(&acc);
            }
            let z = PauliTransferMatrix::from_rotation(&crate::channels::rotation_matrix(
                &nalgebra::Vector3::z(),
                el.z.angle(),
            ));
            z.after(&acc)
        })
        .collect()
}

/// State preparation and measurement in PTM form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spam {
    /// Initial state column `(1, r)`.
    pub state: [f64; 4],
    /// Measurement covector; the RB signal is `meas · final_state`.
    pub meas: [f64; 4],
}

impl Default for Spam {
    fn default() -> Self {
        Self {
            state: [1.0, 0.0, 0.0, 1.0],
            meas: [0.0, 0.0, 0.0, 1.0],
        }
    }
}

/// Options shared by the simulators.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SimOptions {
    pub spam: Option<Spam>,
    /// Binomial shot count per measured axis; `None` reads exact expectations.
    pub shots: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    SigmaZ,
    Purity,
}

impl Observable {
    pub fn as_str(self) -> &'static str {
        match self {
            Observable::SigmaZ => "sigma_z",
            Observable::Purity => "purity",
        }
    }
}

/// Per-length outcomes of RB (`⟨σz⟩`) or PB (purity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub m: usize,
    pub observable: Observable,
    pub values: Vec<f64>,
    pub mean: f64,
    pub sem: f64,
}

pub type RbRecord = BenchmarkRecord;
pub type PbRecord = BenchmarkRecord;

impl BenchmarkRecord {
    pub fn new(m: usize, observable: Observable, values: Vec<f64>) -> Self {
        let (mean, sem) = mean_sem(&values);
        Self {
            m,
            observable,
            values,
            mean,
            sem,
        }
    }
}

pub(crate) fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn validate(seqs: &SequenceSet) -> Result<()> {
    for seq in seqs.sequences.iter().flatten() {
        if let Some(&bad) = seq.iter().find(|&&g| g >= GROUP_SIZE) {
            return Err(Error::InvalidCliffordIndex(bad));
        }
    }
    Ok(())
}

fn final_state(gates: &[Matrix4<f64>], seq: &[usize], recover: bool, state: Vector4<f64>) -> Vector4<f64> {
    let mut s = state;
    for &g in seq {
        s = gates[g] * s;
    }
    if recover {
        let (r, _) = clifford::recovery_gate(seq).expect("indices validated");
        s = gates[r] * s;
    }
    s
}

fn sample_expectation(rng: &mut ChaCha8Rng, exact: f64, shots: u64) -> f64 {
    let p = (0.5 * (1.0 + exact)).clamp(0.0, 1.0);
    let k = Binomial::new(shots, p).expect("valid binomial").sample(rng);
    2.0 * k as f64 / shots as f64 - 1.0
}

const SHOT_STREAM_SALT: u64 = 0x5eed_5407_u64;

/// Weighted mixture of noise models: each sequence is run under every model
/// and the final states are averaged before readout.
fn simulate(
    models: &[(f64, &NoiseModel)],
    seqs: &SequenceSet,
    opts: &SimOptions,
    observable: Observable,
) -> Result<Vec<BenchmarkRecord>> {
    validate(seqs)?;
    if models.is_empty() {
        return Err(Error::InvalidParameter("empty noise ensemble".into()));
    }
    let total: f64 = models.iter().map(|(w, _)| w).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidParameter("ensemble weights must sum to a positive value".into()));
    }
    let gate_sets: Vec<(f64, Vec<Matrix4<f64>>)> = models
        .iter()
        .map(|(w, m)| (w / total, m.noisy_gates()))
        .collect();
    let spam = opts.spam.unwrap_or_default();
    let state = Vector4::from(spam.state);
    let meas = Vector4::from(spam.meas);
    let recover = observable == Observable::SigmaZ;

    let records = seqs
        .lengths
        .iter()
        .enumerate()
        .map(|(li, &m)| {
            let values: Vec<f64> = seqs.sequences[li]
                .par_iter()
                .enumerate()
                .map(|(si, seq)| {
                    let mut avg = Vector4::zeros();
                    for (w, gates) in &gate_sets {
                        avg += final_state(gates, seq, recover, state) * *w;
                    }
                    let mut rng = opts
                        .shots
                        .map(|_| stream_rng(seqs.rng_seed ^ SHOT_STREAM_SALT, li, si));
                    match observable {
                        Observable::SigmaZ => {
                            let v = meas.dot(&avg);
                            match (opts.shots, rng.as_mut()) {
                                (Some(n), Some(r)) => sample_expectation(r, v, n),
                                _ => v,
                            }
                        }
                        Observable::Purity => {
                            let r3 = [avg[1], avg[2], avg[3]];
                            r3.iter()
                                .map(|&c| match (opts.shots, rng.as_mut()) {
                                    (Some(n), Some(r)) => sample_expectation(r, c, n).powi(2),
                                    _ => c * c,
                                })
                                .sum()
                        }
                    }
                })
                .collect();
            BenchmarkRecord::new(m, observable, values)
        })
        .collect();
    Ok(records)
}

/// RB: applies the noisy sequence and its noisy recovery gate, reads `⟨σz⟩`.
pub fn simulate_rb(noise: &NoiseModel, seqs: &SequenceSet, opts: &SimOptions) -> Result<Vec<RbRecord>> {
    simulate(&[(1.0, noise)], seqs, opts, Observable::SigmaZ)
}

/// PB: applies the noisy sequence without recovery, reads the purity.
pub fn simulate_pb(noise: &NoiseModel, seqs: &SequenceSet, opts: &SimOptions) -> Result<Vec<PbRecord>> {
    simulate(&[(1.0, noise)], seqs, opts, Observable::Purity)
}

/// RB over a weighted ensemble of noise models (inhomogeneous broadening).
pub fn simulate_rb_ensemble(
    models: &[(f64, NoiseModel)],
    seqs: &SequenceSet,
    opts: &SimOptions,
) -> Result<Vec<RbRecord>> {
    let refs: Vec<(f64, &NoiseModel)> = models.iter().map(|(w, m)| (*w, m)).collect();
    simulate(&refs, seqs, opts, Observable::SigmaZ)
}

/// PB over a weighted ensemble; the purity is that of the averaged Bloch vector.
pub fn simulate_pb_ensemble(
    models: &[(f64, NoiseModel)],
    seqs: &SequenceSet,
    opts: &SimOptions,
) -> Result<Vec<PbRecord>> {
    let refs: Vec<(f64, &NoiseModel)> = models.iter().map(|(w, m)| (*w, m)).collect();
    simulate(&refs, seqs, opts, Observable::Purity)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn row(self) -> usize {
        match self {
            Axis::X => 1,
            Axis::Y => 2,
            Axis::Z => 3,
        }
    }
}

/// Constant offsets of the RB/PB decays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpamOffsets {
    pub a_x: f64,
    pub a_y: f64,
    pub a_z: f64,
    pub a_prime: f64,
}

/// `A_M = (1/24) Σ_G Tr[M·E_G(G ρ G†)]` for the measured axes; others are 0.
pub fn spam_offsets(noise: &NoiseModel, state: &[f64; 3], meas: &[Axis]) -> SpamOffsets {
    let rho = Vector4::new(1.0, state[0], state[1], state[2]);
    let avg: Vector4<f64> = noise.noisy_gates().iter().map(|g| g * rho).sum::<Vector4<f64>>() / GROUP_SIZE as f64;
    let pick = |a: Axis| if meas.contains(&a) { avg[a.row()] } else { 0.0 };
    let (a_x, a_y, a_z) = (pick(Axis::X), pick(Axis::Y), pick(Axis::Z));
    SpamOffsets {
        a_x,
        a_y,
        a_z,
        a_prime: a_x * a_x + a_y * a_y + a_z * a_z,
    }
}

/// Writes records as CSV rows `m, seq_index, value, observable`.
pub fn write_records_csv<W: Write>(records: &[BenchmarkRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["m", "seq_index", "value", "observable"])?;
    for r in records {
        for (i, v) in r.values.iter().enumerate() {
            w.write_record(&[
                r.m.to_string(),
                i.to_string(),
                format!("{v:.17e}"),
                r.observable.as_str().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads records written by [`write_records_csv`].
pub fn read_records_csv<R: std::io::Read>(input: R) -> Result<Vec<BenchmarkRecord>> {
    #[derive(Deserialize)]
    struct Row {
        m: usize,
        #[allow(dead_code)]
        seq_index: usize,
        value: f64,
        observable: Observable,
    }
    let mut rd = csv::Reader::from_reader(input);
    let mut groups: Vec<(usize, Observable, Vec<f64>)> = Vec::new();
    for row in rd.deserialize::<Row>() {
        let row = row?;
        match groups.iter_mut().find(|(m, o, _)| *m == row.m && *o == row.observable) {
            Some(g) => g.2.push(row.value),
            None => groups.push((row.m, row.observable, vec![row.value])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(m, o, v)| BenchmarkRecord::new(m, o, v))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{make_channel, ChannelSpec};
    use approx::assert_abs_diff_eq;

    #[test]
    fn sequences_are_reproducible() {
        let a = gen_sequences(&[1], 1, 7).unwrap();
        let b = gen_sequences(&[1], 1, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sequences[0][0].len(), 1);
        let c = gen_sequences(&[3, 5], 4, 8).unwrap();
        assert!(c.sequences[1].iter().all(|s| s.len() == 5));
        assert!(gen_sequences(&[], 1, 0).is_err());
        assert!(gen_sequences(&[1], 0, 0).is_err());
    }

    #[test]
    fn identity_noise_gives_unit_signals() {
        let seqs = gen_sequences(&[1, 2, 5, 17], 10, 3).unwrap();
        let rb = simulate_rb(&NoiseModel::noiseless(), &seqs, &SimOptions::default()).unwrap();
        for r in &rb {
            for v in &r.values {
                assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
            }
        }
        let pb = simulate_pb(&NoiseModel::noiseless(), &seqs, &SimOptions::default()).unwrap();
        for r in &pb {
            assert_abs_diff_eq!(r.mean, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn invalid_index_rejected() {
        let seqs = SequenceSet {
            lengths: vec![1],
            sequences: vec![vec![vec![30]]],
            rng_seed: 0,
        };
        assert!(matches!(
            simulate_rb(&NoiseModel::noiseless(), &seqs, &SimOptions::default()),
            Err(Error::InvalidCliffordIndex(30))
        ));
    }

    #[test]
    fn depolarizing_rb_mean_is_exact_power() {
        let p = 0.02;
        let e = make_channel(&ChannelSpec::Depolarizing { p }).unwrap();
        let seqs = gen_sequences(&[1, 4, 9], 5, 11).unwrap();
        let rb = simulate_rb(&NoiseModel::GateIndependent(e), &seqs, &SimOptions::default()).unwrap();
        for r in rb {
            // m gates plus the recovery gate, each followed by the same channel
            let want = (1.0 - p).powi(r.m as i32 + 1);
            for v in r.values {
                assert_abs_diff_eq!(v, want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn spam_offsets_examples() {
        let d = make_channel(&ChannelSpec::Dephasing { p: 0.1 }).unwrap();
        let axes = [Axis::X, Axis::Y, Axis::Z];
        let s = spam_offsets(&NoiseModel::GateIndependent(d), &[0.0, 0.0, 1.0], &axes);
        assert_abs_diff_eq!(s.a_z, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.a_prime, 0.0, epsilon = 1e-15);
        let g = 0.03;
        let a = make_channel(&ChannelSpec::AmplitudeDamping { gamma: g }).unwrap();
        let s = spam_offsets(&NoiseModel::GateIndependent(a), &[0.0, 0.0, 1.0], &axes);
        assert_abs_diff_eq!(s.a_z, g, epsilon = 1e-15);
        assert_abs_diff_eq!(s.a_prime, g * g, epsilon = 1e-15);
    }

    #[test]
    fn pulse_lifting_of_ideal_pulses_is_noiseless() {
        let pulses = Primitive::ALL.map(|p| p.ideal_ptm());
        let model = NoiseModel::from_noisy_pulses(&pulses);
        for e in model.channels() {
            assert_abs_diff_eq!(*e.matrix(), Matrix4::identity(), epsilon = 1e-14);
        }
    }

    #[test]
    fn shot_noise_is_deterministic_and_bounded() {
        let seqs = gen_sequences(&[2, 3], 8, 5).unwrap();
        let opts = SimOptions {
            spam: None,
            shots: Some(100),
        };
        let e = make_channel(&ChannelSpec::Depolarizing { p: 0.1 }).unwrap();
        let a = simulate_pb(&NoiseModel::GateIndependent(e), &seqs, &opts).unwrap();
        let b = simulate_pb(&NoiseModel::GateIndependent(e), &seqs, &opts).unwrap();
        assert_eq!(a, b);
        for r in &a {
            assert!(r.values.iter().all(|v| (0.0..=3.0).contains(v)));
        }
    }

    #[test]
    fn csv_round_trip() {
        let rec = vec![
            BenchmarkRecord::new(1, Observable::SigmaZ, vec![0.9, 0.8]),
            BenchmarkRecord::new(4, Observable::SigmaZ, vec![0.5]),
        ];
        let mut buf = Vec::new();
        write_records_csv(&rec, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("m,seq_index,value,observable\n"));
        let back = read_records_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rec);
    }
}
