//! Property tests for the cross-module invariants.

use optbias::bench::{average_ranks, benchmark_for, run_method, Method, Oracle, PipelineConfig};
use optbias::dataio::{read_dataset, select_bottom_fraction, standardize, write_dataset, OfflineDataset};
use optbias::gp::{posterior, KernelFamily, KernelParams};
use optbias::matchloss::{match_loss, match_loss_at, IntegralMode, PairBatch};
use optbias::metatrain::{inner_adapt, meta_train, MetaConfig};
use optbias::numerics::{cholesky_factor, cholesky_solve, Matrix, RngState};
use optbias::search::{gradient_search, CandidateSet};
use optbias::sim4opt::{generate_tasks, Sim4OptConfig};
use optbias::surrogate::{init_net, Architecture, Mode, NormKind, SurrogateNet};
use proptest::prelude::*;

fn random_matrix(rng: &mut RngState, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn random_dataset(seed: u64, n: usize, d: usize) -> OfflineDataset {
    let mut rng = RngState::new(seed);
    let x = random_matrix(&mut rng, n, d, 1.0);
    let z = x.iter_rows().map(|r| r.iter().map(|v| (1.3 * v).sin()).sum::<f64>()).collect();
    OfflineDataset::new(x, z).unwrap()
}

fn eval_net(seed: u64, d: usize, hidden: Vec<usize>, norm: NormKind) -> SurrogateNet {
    let arch = Architecture {
        input_dim: d,
        hidden,
        leaky_slope: 0.01,
        norm,
    };
    let mut rng = RngState::new(seed);
    let mut net = init_net(&arch, &mut rng).unwrap();
    if norm == NormKind::BatchStat {
        // Non-trivial running statistics.
        net.set_mode(Mode::Train);
        net.forward(&random_matrix(&mut rng, 16, d, 1.5), None).unwrap();
    }
    net.set_mode(Mode::Eval);
    net
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // ---- numerics ----

    #[test]
    fn cholesky_reconstructs(seed in any::<u64>(), n in 1usize..=50) {
        let mut rng = RngState::new(seed);
        let b = random_matrix(&mut rng, n, n, 1.0);
        let mut a = b.transpose().matmul(&b).unwrap();
        for i in 0..n { a[(i, i)] += 1.0; }
        let l = cholesky_factor(&a, 0.0).unwrap();
        let r = l.matmul(&l.transpose()).unwrap();
        let diff: f64 = r.data().iter().zip(a.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        prop_assert!(diff / a.frobenius_norm() <= 1e-8);
        let x = random_matrix(&mut rng, n, 1, 1.0);
        let got = cholesky_solve(&l, &a.matmul(&x).unwrap()).unwrap();
        let err: f64 = got.data().iter().zip(x.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-6 * x.frobenius_norm().max(1e-12));
    }

    #[test]
    fn equal_seeds_equal_streams(seed in any::<u64>()) {
        let mut a = RngState::new(seed);
        let mut b = RngState::new(seed);
        for _ in 0..64 { prop_assert_eq!(a.next_u64(), b.next_u64()); }
    }

    // ---- dataio ----

    #[test]
    fn bottom_fraction_partitions(seed in any::<u64>(), n in 2usize..200, frac in 0.01f64..=1.0) {
        let ds = random_dataset(seed, n, 2);
        let sub = select_bottom_fraction(&ds, frac).unwrap();
        let mut z = ds.z.clone();
        z.sort_by(f64::total_cmp);
        let k = sub.len();
        prop_assert!(k >= 1 && k <= n);
        if k < n && z[k - 1] < z[k] {
            prop_assert!(sub.max_z() <= z[k]);
            prop_assert_eq!(sub.max_z(), z[k - 1]);
        }
    }

    #[test]
    fn standardize_inverts(seed in any::<u64>(), n in 2usize..60, d in 1usize..6) {
        let ds = random_dataset(seed, n, d);
        let (s, scaler) = standardize(&ds).unwrap();
        let back = scaler.inverse(&s);
        for (a, b) in back.x.data().iter().zip(ds.x.data()) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
        for (a, b) in back.z.iter().zip(&ds.z) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn dataset_csv_round_trip(seed in any::<u64>(), n in 1usize..40, d in 1usize..5) {
        let ds = random_dataset(seed, n, d);
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let once = read_dataset(buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        write_dataset(&once, &mut buf2).unwrap();
        prop_assert_eq!(&once, &read_dataset(buf2.as_slice()).unwrap());
        prop_assert_eq!(once, ds);
    }

    // ---- gp ----

    #[test]
    fn gp_interpolates_and_bounds_variance(seed in any::<u64>(), n in 1usize..20, d in 1usize..5, matern in any::<bool>()) {
        let ds = random_dataset(seed, n, d);
        let p = KernelParams {
            family: if matern { KernelFamily::Matern52 } else { KernelFamily::Rbf },
            lengthscale: 0.7,
            signal_variance: 1.3,
            noise_variance: 0.0,
            mean: 0.1,
        };
        let g = posterior(&ds, &p).unwrap();
        // Interpolation is exact only while the inputs are distinct to
        // working precision, i.e. no jitter was needed.
        if g.jitter == 0.0 {
            for (x, z) in ds.x.iter_rows().zip(&ds.z) {
                prop_assert!((g.mean(x).unwrap() - z).abs() <= 1e-6);
            }
        }
        let mut rng = RngState::new(seed ^ 1);
        for _ in 0..10 {
            let q: Vec<f64> = (0..d).map(|_| 2.0 * rng.normal()).collect();
            let v = g.raw_variance(&q);
            prop_assert!(v >= -1e-8 && v <= p.signal_variance + 1e-8);
        }
    }

    #[test]
    fn extra_point_never_raises_variance(seed in any::<u64>(), n in 1usize..15, d in 1usize..4) {
        let ds = random_dataset(seed, n + 1, d);
        let p = KernelParams { noise_variance: 1e-3, ..Default::default() };
        let small = posterior(&ds.subset(&(0..n).collect::<Vec<_>>()), &p).unwrap();
        let big = posterior(&ds, &p).unwrap();
        let mut rng = RngState::new(seed ^ 2);
        for _ in 0..10 {
            let q: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            prop_assert!(big.variance(&q).unwrap() <= small.variance(&q).unwrap() + 1e-8);
        }
    }

    // ---- sim4opt ----

    #[test]
    fn tasks_are_well_formed(seed in any::<u64>(), m in 1usize..6, n in 2usize..8) {
        let ds = random_dataset(seed, n, 2);
        let (ds, _) = standardize(&ds).unwrap();
        let cfg = Sim4OptConfig { n_functions: 3, evolve_steps: m, ..Default::default() };
        let tasks = generate_tasks(&ds, &cfg, &RngState::new(seed)).unwrap();
        for t in &tasks {
            let g = posterior(&ds, &t.params).unwrap();
            for tr in &t.trajectories {
                prop_assert_eq!(tr.len(), 2 * m + 1);
                prop_assert!(tr.labels.windows(2).all(|w| w[0] <= w[1]));
                for (x, l) in tr.states.iter_rows().zip(&tr.labels) {
                    prop_assert!((t.field.value(&g, x) - l).abs() <= 1e-10);
                }
            }
            prop_assert!(t.flat.z.windows(2).all(|w| w[0] <= w[1]));
        }
        let again = generate_tasks(&ds, &cfg, &RngState::new(seed)).unwrap();
        prop_assert_eq!(&tasks, &again);
        let zero = Sim4OptConfig { delta_frac: 0.0, ..cfg };
        let shared = generate_tasks(&ds, &zero, &RngState::new(seed)).unwrap();
        prop_assert!(shared.iter().all(|t| t.params == shared[0].params));
    }

    // ---- surrogate ----

    #[test]
    fn param_count_formula(d in 1usize..10, h in proptest::collection::vec(1usize..40, 1..4), norm in any::<bool>()) {
        let norm = if norm { NormKind::BatchStat } else { NormKind::None };
        let arch = Architecture { input_dim: d, hidden: h.clone(), leaky_slope: 0.01, norm };
        let mut fan = d;
        let mut expected = 0;
        for &w in &h {
            expected += fan * w + w + if norm == NormKind::BatchStat { 2 * w } else { 0 };
            fan = w;
        }
        expected += fan + 1;
        prop_assert_eq!(arch.param_count(), expected);
    }

    #[test]
    fn override_is_pure_and_eval_deterministic(seed in any::<u64>()) {
        let mut net = eval_net(seed, 3, vec![8, 4], NormKind::BatchStat);
        let before = (net.params().to_vec(), net.stats().to_vec());
        let mut rng = RngState::new(seed ^ 3);
        let x = random_matrix(&mut rng, 5, 3, 1.0);
        let other: Vec<f64> = (0..net.param_count()).map(|_| rng.normal()).collect();
        let (a, _) = net.forward(&x, Some(&other)).unwrap();
        let (b, _) = net.forward(&x, Some(&other)).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(net.params(), &before.0[..]);
        prop_assert_eq!(net.stats(), &before.1[..]);
        prop_assert_eq!(net.predict(&x, None).unwrap(), net.predict(&x, None).unwrap());
    }

    // ---- matchloss ----

    #[test]
    fn match_loss_shift_invariance_and_modes(seed in any::<u64>(), c in -50.0f64..50.0) {
        let mut net = eval_net(seed, 2, vec![12, 6], NormKind::BatchStat);
        let mut rng = RngState::new(seed ^ 4);
        let starts = random_matrix(&mut rng, 6, 2, 1.0);
        let ends = random_matrix(&mut rng, 6, 2, 1.0);
        // Labels from a function f; shifting f by c leaves every dz unchanged.
        let f = |x: &[f64]| x[0] * x[0] - x[1];
        let dz: Vec<f64> = starts.iter_rows().zip(ends.iter_rows()).map(|(a, b)| (f(b) + c) - (f(a) + c)).collect();
        let dz0: Vec<f64> = starts.iter_rows().zip(ends.iter_rows()).map(|(a, b)| f(b) - f(a)).collect();
        let pairs = PairBatch::new(starts.clone(), ends.clone(), dz).unwrap();
        let pairs0 = PairBatch::new(starts, ends, dz0).unwrap();
        let (l, _) = match_loss(&net, &pairs, IntegralMode::exact()).unwrap();
        let (l0, _) = match_loss(&net, &pairs0, IntegralMode::exact()).unwrap();
        prop_assert!((l - l0).abs() <= 1e-10 * (1.0 + l0));
        prop_assert!(l >= 0.0);
        // Output-bias shift.
        let last = net.param_count() - 1;
        net.params_mut()[last] += c;
        let (ls, _) = match_loss(&net, &pairs0, IntegralMode::exact()).unwrap();
        prop_assert!((ls - l0).abs() <= 1e-10 * (1.0 + l0));
        // Midpoint error on a piecewise-linear path shrinks like 1/S but not
        // monotonically, so only the fine grid is held to a tolerance.
        let fine = rel_err(match_loss(&net, &pairs0, IntegralMode::quadrature(512)).unwrap().0, l0);
        prop_assert!(fine <= 1e-3, "fine quadrature off by {}", fine);
    }

    #[test]
    fn match_loss_zero_iff_residuals_vanish(seed in any::<u64>()) {
        let net = eval_net(seed, 2, vec![6], NormKind::None);
        let mut rng = RngState::new(seed ^ 5);
        let starts = random_matrix(&mut rng, 4, 2, 1.0);
        let ends = random_matrix(&mut rng, 4, 2, 1.0);
        let ga = net.predict(&starts, None).unwrap();
        let gb = net.predict(&ends, None).unwrap();
        let exact: Vec<f64> = ga.iter().zip(&gb).map(|(a, b)| b - a).collect();
        let pairs = PairBatch::new(starts.clone(), ends.clone(), exact.clone()).unwrap();
        let (l, _) = match_loss_at(&net, &pairs, IntegralMode::exact(), None).unwrap();
        prop_assert!(l <= 1e-24);
        let mut off = exact;
        off[0] += 0.5;
        let pairs = PairBatch::new(starts, ends, off).unwrap();
        prop_assert!(match_loss(&net, &pairs, IntegralMode::exact()).unwrap().0 > 0.0);
    }

    // ---- search ----

    #[test]
    fn search_is_per_candidate_and_bounded(seed in any::<u64>(), n in 1usize..8) {
        let net = eval_net(seed, 3, vec![10, 5], NormKind::BatchStat);
        let mut rng = RngState::new(seed ^ 6);
        let x = random_matrix(&mut rng, n, 3, 1.0);
        let c = CandidateSet::from_designs(x.clone(), (0..n).collect());
        let bounds = [(-0.5, 0.5), (-1.0, 0.2), (-2.0, 2.0)];
        let out = gradient_search(&net, &c, 0.05, 20, Some(&bounds)).unwrap();
        for r in out.designs.iter_rows() {
            for (v, (lo, hi)) in r.iter().zip(&bounds) {
                prop_assert!(v >= lo && v <= hi);
            }
        }
        let perm: Vec<usize> = (0..n).rev().collect();
        let px = Matrix::from_rows(&perm.iter().map(|&i| x.row(i)).collect::<Vec<_>>()).unwrap();
        let pout = gradient_search(&net, &CandidateSet::from_designs(px, perm.clone()), 0.05, 20, Some(&bounds)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(pout.designs.row(k), out.designs.row(i));
        }
        let again = gradient_search(&net, &c, 0.05, 20, Some(&bounds)).unwrap();
        prop_assert_eq!(again, out);
    }

    // ---- bench ----

    #[test]
    fn mean_ranks_average_to_midpoint(values in proptest::collection::vec(0i32..5, 1..9)) {
        let v: Vec<f64> = values.iter().map(|&x| x as f64 / 4.0).collect();
        let r = average_ranks(&v);
        let m = v.len() as f64;
        prop_assert!((r.iter().sum::<f64>() / m - (m + 1.0) / 2.0).abs() < 1e-12);
    }
}

/// Trains a small net on a concave bowl and checks that small ascent steps
/// never lower the surrogate's prediction.
fn concave_ascent_is_monotone() -> bool {
    let arch = Architecture {
        input_dim: 2,
        hidden: vec![32, 16],
        leaky_slope: 0.01,
        norm: NormKind::None,
    };
    let mut net = init_net(&arch, &mut RngState::new(0)).unwrap();
    let mut rng = RngState::new(1);
    let x = random_matrix(&mut rng, 200, 2, 1.0);
    let z: Vec<f64> = x.iter_rows().map(|r| -(r[0] * r[0] + r[1] * r[1])).collect();
    let ds = OfflineDataset::new(x, z).unwrap();
    let cfg = optbias::metatrain::BaselineConfig {
        steps: 600,
        lr: 3e-3,
        ..Default::default()
    };
    optbias::metatrain::train_mse(&mut net, &ds, &cfg, &mut RngState::new(2)).unwrap();
    let start = Matrix::from_rows(&[[1.5, -1.0], [-1.2, 0.8]]).unwrap();
    let mut c = CandidateSet::from_designs(start, vec![0, 1]);
    let mut prev = net.predict(&c.designs, None).unwrap();
    for _ in 0..100 {
        c = gradient_search(&net, &c, 1e-3, 1, None).unwrap();
        let now = net.predict(&c.designs, None).unwrap();
        if now.iter().zip(&prev).any(|(a, b)| a < b) {
            return false;
        }
        prev = now;
    }
    true
}

#[test]
fn ascent_is_monotone_on_a_concave_surrogate() {
    assert!(concave_ascent_is_monotone());
}

#[test]
fn gradient_matching_learns_a_linear_function() {
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let mut rng = RngState::new(seed);
        let x = random_matrix(&mut rng, 32, 1, 1.0);
        let z: Vec<f64> = x.iter_rows().map(|r| 2.0 * r[0] - 0.5).collect();
        let ds = OfflineDataset::new(x, z).unwrap();
        let mut net = eval_net(seed, 1, vec![16, 8], NormKind::None);
        let pairs = optbias::matchloss::offline_pairs(&ds, 64, &mut rng).unwrap();
        let mode = IntegralMode::default();
        let l0 = match_loss(&net, &pairs, mode).unwrap().0;
        let mut opt = optbias::surrogate::OptimizerState::adam(net.param_count());
        let mut l = l0;
        for _ in 0..200 {
            let (li, g) = match_loss(&net, &pairs, mode).unwrap();
            l = li;
            optbias::surrogate::apply_update(&mut net, &g, 1e-2, &mut opt).unwrap();
        }
        l = l.min(match_loss(&net, &pairs, mode).unwrap().0);
        ratios.push(l0 / l.max(1e-300));
    }
    let med = optbias::numerics::median(&ratios);
    assert!(med >= 100.0, "median reduction {med}");
}

#[test]
fn inner_adaptation_is_pure() {
    let ds = random_dataset(3, 10, 2);
    let (ds, _) = standardize(&ds).unwrap();
    let tasks = generate_tasks(
        &ds,
        &Sim4OptConfig {
            n_functions: 2,
            evolve_steps: 3,
            ..Default::default()
        },
        &RngState::new(0),
    )
    .unwrap();
    let net = eval_net(1, 2, vec![8, 4], NormKind::BatchStat);
    let copy = net.clone();
    let cfg = MetaConfig::default();
    let a = inner_adapt(&net, &tasks[0], &cfg, &mut RngState::new(9)).unwrap();
    let b = inner_adapt(&net, &tasks[0], &cfg, &mut RngState::new(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(net.params(), copy.params());
    assert_eq!(net.stats(), copy.stats());
}

#[test]
fn meta_training_is_reproducible() {
    let ds = random_dataset(4, 12, 2);
    let (ds, _) = standardize(&ds).unwrap();
    let tasks = generate_tasks(
        &ds,
        &Sim4OptConfig {
            n_functions: 4,
            evolve_steps: 4,
            ..Default::default()
        },
        &RngState::new(0),
    )
    .unwrap();
    let cfg = MetaConfig {
        epochs: 3,
        ..Default::default()
    };
    let run = || {
        let mut net = eval_net(2, 2, vec![8, 4], NormKind::BatchStat);
        let stats = meta_train(&mut net, &tasks, &cfg, &mut RngState::new(5)).unwrap();
        let losses: Vec<(f64, f64)> = stats.epochs.iter().map(|e| (e.mean_pre_loss, e.mean_post_loss)).collect();
        (net.params().to_vec(), net.stats().to_vec(), losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn oracle_maxima_match_dense_probes() {
    let mut rng = RngState::new(11);
    for name in ["sphere4", "ackley4", "rastrigin2", "shekel4"] {
        let o = Oracle::by_name(name).unwrap();
        let (_, known) = o.known_max().unwrap();
        let mut best = f64::NEG_INFINITY;
        let mut best_x = Vec::new();
        for _ in 0..1_000_000 {
            let x = o.sample_uniform(&mut rng);
            let v = o.value(&x).unwrap();
            if v > best {
                best = v;
                best_x = x;
            }
        }
        assert!(best <= known + 1e-3, "{name}: probe {best} above known {known}");
        let (_, polished) = o.polish(&best_x, 20_000);
        assert!((polished - known).abs() <= 1e-3, "{name}: polished probe {polished} vs known {known}");
    }
}

#[test]
fn scoring_is_the_only_oracle_use() {
    let o = Oracle::by_name("sphere2").unwrap();
    let b = benchmark_for(&o, 400, 0.05, 0).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.surrogate.hidden = vec![16, 8];
    cfg.sim4opt.n_functions = 3;
    cfg.sim4opt.evolve_steps = 4;
    cfg.meta.epochs = 1;
    cfg.search.steps = 10;
    for m in Method::ALL {
        let before = b.oracle.calls();
        let r = run_method(m, &b, &cfg, 0).unwrap();
        let pool = b.offline_subset.len().min(cfg.search.n_candidates) as u64;
        assert_eq!(r.oracle_calls, pool, "{}", m.name());
        assert_eq!(b.oracle.calls() - before, pool);
        assert_eq!(r.candidate_scores.len() as u64, pool);
    }
}

#[test]
fn small_inner_steps_descend_on_a_fixed_batch() {
    let ds = random_dataset(6, 12, 2);
    let (ds, _) = standardize(&ds).unwrap();
    let sim = Sim4OptConfig {
        n_functions: 20,
        evolve_steps: 6,
        ..Default::default()
    };
    let tasks = generate_tasks(&ds, &sim, &RngState::new(1)).unwrap();
    let cfg = MetaConfig {
        inner_lr: 1e-3,
        ..Default::default()
    };
    let mut rng = RngState::new(2);
    let mut passed = 0;
    for (i, t) in tasks.iter().enumerate() {
        let net = eval_net(100 + i as u64, 2, vec![16, 8], NormKind::BatchStat);
        let batch = optbias::sim4opt::build_pairs(t, &mut rng, 16).unwrap();
        let draw = optbias::metatrain::TaskDraw {
            task: i,
            context: batch.clone(),
            target: batch,
        };
        let a = optbias::metatrain::adapt_on(&net, &draw, &cfg).unwrap();
        if a.post_loss <= a.pre_loss {
            passed += 1;
        }
    }
    assert!(passed >= 18, "{passed}/20 instances descended");
}

#[test]
fn meta_training_speeds_up_adaptation() {
    let o = Oracle::by_name("sphere2").unwrap();
    let b = benchmark_for(&o, 2000, 0.02, 0).unwrap();
    let (ds, _) = standardize(&b.offline_subset).unwrap();
    let sim = Sim4OptConfig {
        n_functions: 84,
        evolve_steps: 20,
        ..Default::default()
    };
    let tasks = generate_tasks(&ds, &sim, &RngState::new(3)).unwrap();
    let (train, held_out) = tasks.split_at(64);
    let arch = Architecture::new(2, vec![64, 32, 16]);
    let fresh = init_net(&arch, &mut RngState::new(4)).unwrap();
    let mut meta = fresh.clone();
    let cfg = MetaConfig {
        epochs: 40,
        ..Default::default()
    };
    meta_train(&mut meta, train, &cfg, &mut RngState::new(5)).unwrap();

    let gain = |net: &SurrogateNet| -> Vec<f64> {
        let mut rng = RngState::new(6);
        held_out
            .iter()
            .map(|t| {
                let (_, pre, post) = inner_adapt(net, t, &cfg, &mut rng).unwrap();
                pre - post
            })
            .collect()
    };
    let mut fresh = fresh;
    fresh.set_mode(Mode::Eval);
    let (m, r) = (gain(&meta), gain(&fresh));
    let (mm, rm) = (optbias::numerics::median(&m), optbias::numerics::median(&r));
    assert!(mm > rm, "meta gain {mm} vs random-init gain {rm}");
}

#[test]
fn finetune_adapts_to_a_shifted_function() {
    let bowl = |x: &[f64], s: f64| -((x[0] - s).powi(2) + (x[1] + s).powi(2));
    for seed in 0..5u64 {
        let mut rng = RngState::new(seed);
        let x = random_matrix(&mut rng, 128, 2, 1.0);
        let source = OfflineDataset::new(x.clone(), x.iter_rows().map(|r| bowl(r, 0.0)).collect()).unwrap();
        let shifted = OfflineDataset::new(x.clone(), x.iter_rows().map(|r| bowl(r, 0.5)).collect()).unwrap();
        let mut net = init_net(&Architecture::new(2, vec![32, 16]), &mut RngState::new(seed + 10)).unwrap();
        let base = optbias::metatrain::BaselineConfig {
            steps: 300,
            lr: 3e-3,
            ..Default::default()
        };
        optbias::metatrain::train_match(&mut net, &source, &base, &mut RngState::new(seed + 20)).unwrap();
        let probe = optbias::matchloss::offline_pairs(&shifted, 256, &mut RngState::new(seed + 30)).unwrap();
        let before = match_loss(&net, &probe, IntegralMode::default()).unwrap().0;
        let cfg = optbias::metatrain::FinetuneConfig {
            epochs: 300,
            ..Default::default()
        };
        optbias::metatrain::finetune(&mut net, &shifted, &cfg, &mut RngState::new(seed + 40)).unwrap();
        let after = match_loss(&net, &probe, IntegralMode::default()).unwrap().0;
        assert!(after <= 0.1 * before, "seed {seed}: {before} -> {after}");
    }
}
