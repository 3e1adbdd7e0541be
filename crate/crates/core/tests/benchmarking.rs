use coherence::benchmarking::*;
use coherence::channels::*;
use coherence::clifford::*;
use coherence::fitting::*;
use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn twirl_depolarizes_random_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for rank in 1..=4 {
        let e = random_channel(&mut rng, rank).unwrap();
        let mut acc = Matrix4::zeros();
        for g in clifford_group() {
            acc += g.ptm.matrix().transpose() * e.matrix() * g.ptm.matrix();
        }
        acc /= GROUP_SIZE as f64;
        let tw = PauliTransferMatrix::from_matrix(acc).unital();
        let mean = tw.trace() / 3.0;
        assert!((tw - Matrix3::identity() * mean).abs().max() < 1e-10);
        // the twirl keeps the average fidelity
        assert!((mean - e.unital().trace() / 3.0).abs() < 1e-12);
    }
}

#[test]
fn group_is_associative_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let (a, b, c) = (
            rng.random_range(0..GROUP_SIZE),
            rng.random_range(0..GROUP_SIZE),
            rng.random_range(0..GROUP_SIZE),
        );
        let left = cayley(cayley(a, b).unwrap(), c).unwrap();
        let right = cayley(a, cayley(b, c).unwrap()).unwrap();
        assert_eq!(left, right);
    }
}

#[test]
fn recovery_undoes_random_sequences() {
    let seqs = gen_sequences(&[1, 7, 40], 30, 5).unwrap();
    for seq in seqs.sequences.iter().flatten() {
        let (r, sign) = recovery_gate(seq).unwrap();
        assert_eq!(sign, 1);
        let mut all = seq.clone();
        all.push(r);
        assert_eq!(compose_sequence(&all).unwrap(), 0);
    }
}

#[test]
fn sampled_indices_are_uniform() {
    let seqs = gen_sequences(&[100], 240, 2024).unwrap();
    let mut counts = [0usize; GROUP_SIZE];
    for &g in seqs.sequences[0].iter().flatten() {
        counts[g] += 1;
    }
    let n: usize = counts.iter().sum();
    let expected = n as f64 / GROUP_SIZE as f64;
    let chi2: f64 = counts.iter().map(|&k| (k as f64 - expected).powi(2) / expected).sum();
    // 0.999 quantile of chi-square with 23 degrees of freedom
    assert!(chi2 < 49.73, "chi2 = {chi2}");
}

#[test]
fn sequence_generation_is_seeded() {
    let a = gen_sequences(&[5, 10], 4, 9).unwrap();
    let b = gen_sequences(&[5, 10], 4, 9).unwrap();
    assert_eq!(a, b);
    let c = gen_sequences(&[5, 10], 4, 10).unwrap();
    assert_ne!(a, c);
}

fn run_in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn simulation_is_independent_of_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = NoiseModel::GateIndependent(random_channel(&mut rng, 2).unwrap());
    let seqs = gen_sequences(&[1, 4, 16], 20, 77).unwrap();
    let opts = SimOptions { spam: None, shots: Some(500) };
    let one = run_in_pool(1, || simulate_rb(&noise, &seqs, &opts).unwrap());
    let four = run_in_pool(4, || simulate_rb(&noise, &seqs, &opts).unwrap());
    assert_eq!(one, four);
    let one = run_in_pool(1, || simulate_pb(&noise, &seqs, &opts).unwrap());
    let four = run_in_pool(4, || simulate_pb(&noise, &seqs, &opts).unwrap());
    assert_eq!(one, four);
}

#[test]
fn depolarizing_rb_and_pb_are_exact_exponentials() {
    let p = 0.02;
    let noise = NoiseModel::GateIndependent(make_channel(&ChannelSpec::Depolarizing { p }).unwrap());
    let lengths: Vec<usize> = (0..20).map(|i| 1 + 5 * i).collect();
    let seqs = gen_sequences(&lengths, 10, 1).unwrap();
    let rb = simulate_rb(&noise, &seqs, &SimOptions::default()).unwrap();
    for r in &rb {
        // every sequence sees the same decay; the recovery gate adds one more channel
        let want = (1.0 - p).powi(r.m as i32 + 1);
        assert!((r.mean - want).abs() < 1e-12 && r.sem < 1e-12);
    }
    let fit = fit_rb(&rb, OffsetMode::Fixed(0.0)).unwrap();
    assert!((fit.rate_param - p / 2.0).abs() < 1e-8, "{}", fit.rate_param);
    let pb = simulate_pb(&noise, &seqs, &SimOptions::default()).unwrap();
    let fit = fit_pb(&pb, OffsetMode::Fixed(0.0)).unwrap();
    assert!((fit.rate_param - (1.0 - p).powi(2)).abs() < 1e-8);
    assert!((fit.epsilon_in.unwrap() - p / 2.0).abs() < 1e-8);
}

#[test]
fn gate_dependent_coherent_noise_leaves_purity_intact() {
    let theta = 0.1;
    let channels: Vec<_> = (0..GROUP_SIZE)
        .map(|g| {
            let s = if g % 2 == 0 { theta } else { -theta };
            PauliTransferMatrix::from_rotation(&rotation_matrix(&Vector3::z(), s))
        })
        .collect();
    let noise = NoiseModel::per_gate(channels).unwrap();
    let lengths: Vec<usize> = (0..15).map(|i| 1 + 4 * i).collect();
    let seqs = gen_sequences(&lengths, 60, 12).unwrap();
    let pb = simulate_pb(&noise, &seqs, &SimOptions::default()).unwrap();
    for r in &pb {
        assert!(r.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
    let fit = fit_pb(&pb, OffsetMode::Free).unwrap();
    assert!(fit.flags.degenerate);
    assert!(fit.epsilon_in.unwrap().abs() < 1e-12);
    let rb = simulate_rb(&noise, &seqs, &SimOptions::default()).unwrap();
    let fit = fit_rb(&rb, OffsetMode::Fixed(0.0)).unwrap();
    let eps = (1.0 - theta.cos()) / 3.0;
    assert!(fit.rate_param > 0.5 * eps, "{} vs {eps}", fit.rate_param);
}

#[test]
fn purity_decays_monotonically() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let e = random_channel(&mut rng, 4).unwrap();
    let m = Matrix4::identity() * 0.97 + e.matrix() * 0.03;
    let noise = NoiseModel::GateIndependent(PauliTransferMatrix::from_matrix(m));
    let lengths: Vec<usize> = (1..=30).collect();
    let seqs = gen_sequences(&lengths, 200, 4).unwrap();
    let pb = simulate_pb(&noise, &seqs, &SimOptions::default()).unwrap();
    for w in pb.windows(2) {
        assert!(
            w[1].mean <= w[0].mean + 3.0 * (w[0].sem + w[1].sem),
            "m={} {} -> {}",
            w[0].m,
            w[0].mean,
            w[1].mean
        );
    }
    assert!(pb.last().unwrap().mean < pb[0].mean);
}

#[test]
fn records_survive_csv_round_trip() {
    let noise = NoiseModel::GateIndependent(make_channel(&ChannelSpec::AmplitudeDamping { gamma: 0.05 }).unwrap());
    let seqs = gen_sequences(&[1, 3, 9], 5, 3).unwrap();
    let rb = simulate_rb(&noise, &seqs, &SimOptions::default()).unwrap();
    let mut buf = Vec::new();
    write_records_csv(&rb, &mut buf).unwrap();
    let back = read_records_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), rb.len());
    for (a, b) in back.iter().zip(&rb) {
        assert_eq!(a.m, b.m);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
        }
    }
}

#[test]
fn spam_offsets_of_unital_noise_vanish() {
    let noise = NoiseModel::GateIndependent(make_channel(&ChannelSpec::Dephasing { p: 0.1 }).unwrap());
    let off = spam_offsets(&noise, &[0.0, 0.0, 1.0], &[Axis::Z]);
    assert!(off.a_z.abs() < 1e-15 && off.a_prime.abs() < 1e-15);
    let noise = NoiseModel::GateIndependent(make_channel(&ChannelSpec::AmplitudeDamping { gamma: 0.1 }).unwrap());
    let off = spam_offsets(&noise, &[0.0, 0.0, 1.0], &[Axis::Z]);
    // the twirled state is maximally mixed, so only the non-unital shift survives
    assert!((off.a_z - 0.1).abs() < 1e-12);
}

fn synthetic_rb(eps: f64, count: usize, noise_sd: f64, rng: &mut ChaCha8Rng) -> Vec<BenchmarkRecord> {
    let normal = Normal::new(0.0, noise_sd).unwrap();
    (0..10)
        .map(|i| {
            let m = 1 + 6 * i;
            let truth = 0.02 + 0.95 * (1.0 - 2.0 * eps).powi(m as i32);
            let values = (0..count).map(|_| truth + normal.sample(rng)).collect();
            BenchmarkRecord::new(m, Observable::SigmaZ, values)
        })
        .collect()
}

#[test]
fn bootstrap_width_scales_with_sample_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let opts = FitOptions::new(OffsetMode::Free);
    let width = |count: usize, rng: &mut ChaCha8Rng| {
        let recs = synthetic_rb(0.01, count, 0.03, rng);
        let ci = bootstrap_ci(&recs, DecayModel::Rb, &opts, 200, 5).unwrap();
        ci.rate_param.1 - ci.rate_param.0
    };
    let w_small: f64 = (0..4).map(|_| width(25, &mut rng)).sum();
    let w_large: f64 = (0..4).map(|_| width(100, &mut rng)).sum();
    let ratio = w_small / w_large;
    assert!((1.6..2.5).contains(&ratio), "width ratio {ratio}");
}

#[test]
fn bootstrap_interval_has_nominal_coverage() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let opts = FitOptions::new(OffsetMode::Free);
    let eps = 0.01;
    let trials = 100;
    let mut hits = 0;
    for t in 0..trials {
        let recs = synthetic_rb(eps, 30, 0.03, &mut rng);
        let ci = bootstrap_ci(&recs, DecayModel::Rb, &opts, 100, t).unwrap();
        if ci.rate_param.0 <= eps && eps <= ci.rate_param.1 {
            hits += 1;
        }
    }
    // binomial(100, 0.95) lies above 85 with overwhelming probability
    assert!(hits >= 85, "coverage {hits}/{trials}");
}

#[test]
fn analytic_interval_covers_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(4321);
    let eps = 0.01;
    let mut hits = 0;
    for _ in 0..200 {
        let recs = synthetic_rb(eps, 30, 0.03, &mut rng);
        let fit = fit_rb(&recs, OffsetMode::Free).unwrap();
        if fit.ci95.rate_param.0 <= eps && eps <= fit.ci95.rate_param.1 {
            hits += 1;
        }
    }
    assert!(hits >= 176, "coverage {hits}/200");
}
