//! End-to-end acceptance checks for the simulator. Each test prints a single
//! `criterion N: PASS/FAIL` line; run with `--nocapture` to see them.

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;

use specfed_core::attack::{self, AttackKind, AttackSpec};
use specfed_core::data::{self, PartitionMode, PartitionSpec};
use specfed_core::fed;
use specfed_core::model::{self, Mode, ModelArch};
use specfed_core::rng::stream;
use specfed_core::signal::{self, SignalConfig};
use specfed_core::theory::{self, QuadraticFederation, TheoryParams};
use specfed_core::Tensor;

use specfed_cli::config::{ExperimentConfig, KeyValues, Profile};
use specfed_cli::{experiment, plot};

/// Print the verdict line and fail the test on `false`.
fn check(criterion: usize, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("criterion {criterion}: {verdict} - {detail}");
    assert!(ok, "criterion {criterion} failed: {detail}");
}

fn micro_arch(rng: &mut impl Rng) -> ModelArch {
    ModelArch {
        conv_channels: [
            rng.gen_range(1..=2),
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
        ],
        dense_units: rng.gen_range(3..=6),
        dropout_p: 0.0,
        num_classes: rng.gen_range(2..=4),
        input_bins: 8,
        input_frames: 8,
    }
}

fn random_input(arch: &ModelArch, batch: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::new(
        vec![batch, arch.input_bins, arch.input_frames, 2],
        (0..batch * arch.input_bins * arch.input_frames * 2)
            .map(|_| rng.gen_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

fn random_labels(arch: &ModelArch, batch: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(
        (0..batch)
            .map(|_| rng.gen_range(0..arch.num_classes) as f64)
            .collect(),
    )
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for net in 0..50 {
        let mut rng = stream(1000, &[0x01, net]);
        let arch = micro_arch(&mut rng);
        let mut params = model::init_params(&arch, net).unwrap();
        // jitter every parameter so no ReLU pre-activation sits exactly on
        // the kink, where the central-difference oracle itself is invalid
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(0.01..0.1) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            }
        }
        let batch = 2;
        let g = model::build_graph(&arch, batch, Mode::Eval).unwrap();
        let mut bindings: HashMap<String, Tensor> = params.bindings();
        bindings.insert("x".into(), random_input(&arch, batch, 1.0, &mut rng));
        bindings.insert("labels".into(), random_labels(&arch, batch, &mut rng));
        let err = g.finite_difference_check("loss", &bindings, 1e-5).unwrap();
        worst = worst.max(err);
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(
        1,
        worst < 1e-4 && elapsed < 60.0,
        &format!("50 micro-CNNs, worst rel err {worst:.2e} (< 1e-4), {elapsed:.1} s (< 60 s)"),
    );
}

/// Naive O(F^2) DFT of one windowed, zero-padded frame.
fn naive_frame_dft(wave: &[f64], window: &[f64], start: usize, fft_size: usize) -> Vec<(f64, f64)> {
    let n_f = fft_size / 2 + 1;
    let mut padded = vec![0.0; fft_size];
    for (i, w) in window.iter().enumerate() {
        padded[i] = wave[start + i] * w;
    }
    (0..n_f)
        .map(|k| {
            let mut re = 0.0;
            let mut im = 0.0;
            for (n, &v) in padded.iter().enumerate() {
                let angle = -std::f64::consts::TAU * (k * n) as f64 / fft_size as f64;
                re += v * angle.cos();
                im += v * angle.sin();
            }
            (re, im)
        })
        .collect()
}

#[test]
fn criterion_02_stft_matches_naive_dft() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for case in 0..100 {
        // alternate between two window/FFT geometries
        let (lw, hop, fft_size) = if case % 2 == 0 { (64, 32, 64) } else { (48, 24, 128) };
        let config = SignalConfig::new(8000.0, lw, hop, fft_size, 3.0).unwrap();
        let mut rng = stream(2000, &[0x02, case]);
        let len = lw + hop * rng.gen_range(2..6);
        let wave: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = signal::stft(&Tensor::from_vec(wave.clone()), &config).unwrap();
        let window = signal::hann_window(lw).unwrap();
        for t in 0..spec.frames() {
            let oracle = naive_frame_dft(&wave, window.data(), t * hop, fft_size);
            for (bin, &(re, im)) in oracle.iter().enumerate() {
                worst = worst.max((spec.at(bin, t, 0) - re).abs());
                worst = worst.max((spec.at(bin, t, 1) - im).abs());
            }
        }
    }
    let bins_256 = SignalConfig::new(16000.0, 256, 128, 256, 3.0).unwrap().num_bins();
    let bins_1024 = SignalConfig::new(48000.0, 1024, 512, 1024, 3.0).unwrap().num_bins();
    let elapsed = start.elapsed().as_secs_f64();
    check(
        2,
        worst < 1e-9 && bins_256 == 129 && bins_1024 == 513 && elapsed < 30.0,
        &format!(
            "100 waveforms, worst |diff| {worst:.2e} (< 1e-9), n_f(256)={bins_256}, \
             n_f(1024)={bins_1024}, {elapsed:.1} s (< 30 s)"
        ),
    );
}

#[test]
fn criterion_03_attack_budget_invariants() {
    let start = Instant::now();
    let arch = ModelArch {
        conv_channels: [2, 2, 2],
        dense_units: 4,
        dropout_p: 0.0,
        num_classes: 3,
        input_bins: 8,
        input_frames: 8,
    };
    let params = model::init_params(&arch, 5).unwrap();
    let bound = 3.0;
    let batch = 16;
    let mut cases = 0usize;
    let mut violations = 0usize;
    let mut rng = stream(3000, &[0x03]);
    while cases < 10_000 {
        let epsilon = rng.gen_range(0.05..2.0);
        let spec = AttackSpec {
            kind: AttackKind::Fgsm,
            epsilon,
            iterations: 3,
            sigma: 0.03,
            admissible_bound: bound,
        };
        let x = random_input(&arch, batch, bound, &mut rng);
        let y = random_labels(&arch, batch, &mut rng);
        let adv_f = attack::fgsm(&arch, &params, &x, &y, &spec).unwrap();
        let spec_p = AttackSpec { kind: AttackKind::Pgd, ..spec };
        let adv_p = attack::pgd(&arch, &params, &x, &y, &spec_p, &mut rng).unwrap();
        for adv in [&adv_f, &adv_p] {
            for (&a, &o) in adv.data().iter().zip(x.data()) {
                if (a - o).abs() > epsilon + 1e-12 || a.abs() > bound {
                    violations += 1;
                }
            }
            cases += batch;
        }
    }
    // PGD with I = 1 and a zero start must equal FGSM bitwise
    let spec1 = AttackSpec {
        kind: AttackKind::Pgd,
        epsilon: 0.5,
        iterations: 1,
        sigma: 0.03,
        admissible_bound: bound,
    };
    let x = random_input(&arch, batch, bound, &mut rng);
    let y = random_labels(&arch, batch, &mut rng);
    let zero = Tensor::zeros(x.shape().to_vec());
    let one_step = attack::pgd_from(&arch, &params, &x, &y, &spec1, &zero).unwrap();
    let fgsm_ref = attack::fgsm(&arch, &params, &x, &y, &AttackSpec { kind: AttackKind::Fgsm, ..spec1 }).unwrap();
    let bitwise = one_step
        .data()
        .iter()
        .zip(fgsm_ref.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let elapsed = start.elapsed().as_secs_f64();
    check(
        3,
        violations == 0 && bitwise && elapsed < 60.0,
        &format!(
            "{cases} cases, {violations} budget violations, PGD(I=1,zero-start)==FGSM bitwise: \
             {bitwise}, {elapsed:.1} s (< 60 s)"
        ),
    );
}

#[test]
fn criterion_04_beta_moments_match_simulation() {
    let start = Instant::now();
    let (e1, e2) = theory::beta_moments(0.5, 10, 6).unwrap();
    let adversaries: Vec<usize> = (0..5).collect(); // any fixed 5-subset is symmetric
    let mut rng = stream(4000, &[0x04]);
    let draws = 1_000_000;
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    for _ in 0..draws {
        let sampled = fed::sample_clients(10, 6, &mut rng);
        let beta = sampled
            .iter()
            .filter(|c| adversaries.contains(c))
            .count() as f64
            / 6.0;
        s1 += beta;
        s2 += beta * beta;
    }
    let (m1, m2) = (s1 / draws as f64, s2 / draws as f64);
    let (d1, d2) = ((m1 - e1).abs(), (m2 - e2).abs());
    let elapsed = start.elapsed().as_secs_f64();
    check(
        4,
        d1 < 1e-3 && d2 < 1e-3 && elapsed < 30.0,
        &format!(
            "E[beta] closed-form {e1:.6} vs simulated {m1:.6} (diff {d1:.1e}), \
             E[beta^2] {e2:.6} vs {m2:.6} (diff {d2:.1e}), {elapsed:.1} s (< 30 s)"
        ),
    );
}

fn bound_params(r: usize) -> TheoryParams {
    TheoryParams {
        l: 4.0,
        mu: 1.0,
        sigma_g2: 0.01, // sigma_g = 0.1
        zeta2: 0.01,    // zeta = 0.1
        // trusted clean reserve: low-noise server gradients, small mismatch
        sigma_r2: 0.001,
        eps_r: 0.01,
        gamma_bias: 0.05,
        rho: 0.5,
        n: 10,
        m: 6,
        tau: 5,
        eta: 0.05,
        gamma_r: 0.25,
        r,
        a: 0.5,
        c_s: 1.0,
    }
}

#[test]
fn criterion_05_contraction_bound_holds() {
    let start = Instant::now();
    let mut all_ok = true;
    let mut details = String::new();
    for r in [0usize, 1, 3] {
        let p = bound_params(r);
        let fed = QuadraticFederation::new(8, &p, 42).unwrap();
        let report = theory::verify_contraction(&fed, &p, 50, 1000, 42).unwrap();
        all_ok &= report.all_pass;
        details.push_str(&format!("r={r}: all_pass={} q={:.4}; ", report.all_pass, report.q));
    }
    // noiseless exact-gradient descent contracts with zero statistical slack
    let p = bound_params(0);
    let fed = QuadraticFederation::new(8, &p, 42).unwrap();
    let gamma = 0.2;
    let ratios = theory::exact_contraction_ratios(&fed, gamma, 30);
    let exact_ok = ratios.iter().all(|&q| q <= 1.0 - p.mu * gamma + 1e-12);
    let elapsed = start.elapsed().as_secs_f64();
    check(
        5,
        all_ok && exact_ok && elapsed < 300.0,
        &format!(
            "{details}exact case ratios <= 1-mu*gamma: {exact_ok}, {elapsed:.1} s (< 300 s)"
        ),
    );
}

#[test]
fn criterion_06_reserve_retraining_lowers_steady_state() {
    let start = Instant::now();
    let mut wins = 0usize;
    for seed in 0..100u64 {
        let mut gaps = [0.0f64; 2];
        for (slot, r) in [(0usize, 0usize), (1, 3)] {
            // near-exact server gradients: the reserve is small but trusted
            let p = TheoryParams {
                sigma_r2: 0.0002,
                eps_r: 0.005,
                ..bound_params(r)
            };
            let fed = QuadraticFederation::new(8, &p, seed).unwrap();
            let report = theory::verify_contraction(&fed, &p, 50, 400, seed).unwrap();
            gaps[slot] = report.steady_state_gap();
        }
        if gaps[1] < gaps[0] {
            wins += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(
        6,
        wins >= 95,
        &format!("r=3 beats r=0 in {wins}/100 seeds (need >= 95), {elapsed:.1} s"),
    );
}

/// Mean final-round test accuracy per variant from a grid output directory.
fn final_accuracies(dir: &std::path::Path) -> HashMap<String, f64> {
    let mut rows = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path().join("metrics.csv");
        if path.exists() {
            rows.extend(plot::parse_metrics(&std::fs::read_to_string(path).unwrap()).unwrap());
        }
    }
    let last = rows.iter().map(|r| r.round).max().unwrap();
    let mut acc: HashMap<String, (f64, usize)> = HashMap::new();
    for row in rows.iter().filter(|r| r.round == last) {
        let e = acc.entry(row.variant.clone()).or_insert((0.0, 0));
        e.0 += row.test_accuracy;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn run_desk_grid(variants: &str, out: &std::path::Path) {
    let kv = KeyValues::parse(&format!(
        "grid.variants={variants}\ngrid.attacks=pgd\ngrid.partitions=dirichlet\n\
         grid.seeds=0,1,2,3,4\n"
    ))
    .unwrap();
    let outcome = experiment::run_grid(&kv, Profile::Desk, out).unwrap();
    assert!(
        outcome.failed.is_empty(),
        "grid cells failed: {:?}",
        outcome.failed
    );
}

#[test]
fn criterion_07_defense_ordering_at_desk_scale() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    run_desk_grid("FedAvg,Retrain-NoPoison,Retrain-All", dir.path());
    let acc = final_accuracies(dir.path());
    let (fedavg, nopoison, all) = (
        acc["FedAvg"],
        acc["Retrain-NoPoison"],
        acc["Retrain-All"],
    );
    let elapsed = start.elapsed().as_secs_f64();
    check(
        7,
        all >= nopoison && nopoison >= fedavg && all - fedavg >= 0.05 && elapsed < 1200.0,
        &format!(
            "mean final acc: Retrain-All {all:.3} >= Retrain-NoPoison {nopoison:.3} >= \
             FedAvg {fedavg:.3}, gap {:.3} (>= 0.05), {elapsed:.0} s (< 1200 s)",
            all - fedavg
        ),
    );
}

#[test]
fn criterion_08_attack_matched_retraining() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    run_desk_grid("Retrain-PGD,Retrain-AWGN", dir.path());
    let acc = final_accuracies(dir.path());
    let (pgd, awgn) = (acc["Retrain-PGD"], acc["Retrain-AWGN"]);
    let elapsed = start.elapsed().as_secs_f64();
    check(
        8,
        pgd >= awgn - 0.02,
        &format!(
            "under PGD poisoning: Retrain-PGD {pgd:.3} >= Retrain-AWGN {awgn:.3} - 0.02, \
             {elapsed:.0} s"
        ),
    );
}

#[test]
fn criterion_09_metrics_are_byte_deterministic() {
    let configs = [
        // small IID FedAvg run
        "data.per_class=20\nfed.rounds=2\nfed.clients=4\nfed.sample_fraction=0.5\n\
         fed.batch=4\nfed.local_steps=2\nattack.iterations=2\npartition.mode=iid\n\
         defense.reserve_fraction=0.2\n",
        // Dirichlet + full defense
        "data.per_class=20\nfed.rounds=2\nfed.clients=4\nfed.sample_fraction=0.5\n\
         fed.batch=4\nfed.local_steps=2\nattack.iterations=2\ndefense.mode=all\n\
         defense.pretrain_epochs=1\ndefense.reserve_fraction=0.2\ndefense.steps=2\n",
        // AWGN attack, SGD optimizer
        "data.per_class=20\nfed.rounds=2\nfed.clients=4\nfed.sample_fraction=0.5\n\
         fed.batch=4\nfed.local_steps=2\nattack.kind=awgn\noptimizer.kind=sgd\n\
         defense.reserve_fraction=0.2\n",
    ];
    let mut ok = true;
    for (i, text) in configs.iter().enumerate() {
        let kv = KeyValues::parse(text).unwrap();
        let cfg = ExperimentConfig::resolve(&kv, Profile::Desk, Some(11 + i as u64)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let run = |out: &std::path::Path| -> Vec<u8> {
            experiment::run_experiment(&cfg, out).unwrap();
            std::fs::read(out.join("metrics.csv")).unwrap()
        };
        let first = run(&dir.path().join("a"));
        // the last config repeats inside an explicit multi-threaded pool
        let second = if i == 2 {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
            pool.install(|| run(&dir.path().join("b")))
        } else {
            run(&dir.path().join("b"))
        };
        ok &= first == second;
    }
    check(
        9,
        ok,
        "3 configs (IID, Dirichlet+defense, AWGN/SGD multi-threaded) byte-identical on repeat",
    );
}

#[test]
fn criterion_10_partition_invariants() {
    let start = Instant::now();
    let config = SignalConfig::new(8000.0, 64, 32, 64, 3.0).unwrap();
    let dataset = data::generate_synthetic(4, 100, 544, &config, 77).unwrap();
    let global_counts = [100usize; 4];
    let mut ok = true;
    let mut hetero = Vec::new();
    for &alpha in &[0.1, 0.5, 10.0] {
        let mut skew_sum = 0.0;
        for seed in 0..20u64 {
            let spec = PartitionSpec {
                mode: PartitionMode::Dirichlet { alpha },
                num_clients: 10,
                seed,
            };
            let shards = data::partition(&dataset, &spec).unwrap();
            // every example exactly once
            let mut ids: Vec<u64> = shards
                .iter()
                .flat_map(|s| s.examples.iter().map(|e| e.id))
                .collect();
            ids.sort_unstable();
            ok &= ids.len() == dataset.len() && ids.windows(2).all(|w| w[0] < w[1]);
            // reserve disjoint with exact per-class size
            let (reserve, rest) = data::extract_reserve(shards, 0.05, seed).unwrap();
            for k in 0..4 {
                let want = (0.05f64 * global_counts[k] as f64).ceil() as usize;
                let got = reserve.examples.iter().filter(|e| e.label == k).count();
                ok &= got == want;
            }
            let rest_ids: std::collections::HashSet<u64> = rest
                .iter()
                .flat_map(|s| s.examples.iter().map(|e| e.id))
                .collect();
            ok &= reserve.examples.iter().all(|e| !rest_ids.contains(&e.id));
            // label skew: size-weighted L1 distance to the global label mix
            let total: usize = rest.iter().map(|s| s.len()).sum();
            let global: Vec<f64> = (0..4)
                .map(|k| {
                    rest.iter()
                        .flat_map(|s| &s.examples)
                        .filter(|e| e.label == k)
                        .count() as f64
                        / total as f64
                })
                .collect();
            for shard in &rest {
                let mut l1 = 0.0;
                for k in 0..4 {
                    let p = shard.examples.iter().filter(|e| e.label == k).count() as f64
                        / shard.len() as f64;
                    l1 += (p - global[k]).abs();
                }
                skew_sum += l1 * shard.len() as f64 / total as f64;
            }
        }
        hetero.push(skew_sum / 20.0);
    }
    let monotone = hetero[0] > hetero[1] && hetero[1] > hetero[2];
    let elapsed = start.elapsed().as_secs_f64();
    check(
        10,
        ok && monotone && elapsed < 60.0,
        &format!(
            "assignment/reserve invariants hold; skew alpha=0.1: {:.3} > 0.5: {:.3} > 10: {:.3}, \
             {elapsed:.1} s (< 60 s)",
            hetero[0], hetero[1], hetero[2]
        ),
    );
}
