//! Invariant suites over randomly generated inputs.

mod common;

use std::collections::BTreeSet;

use common::{input_of, noisy_mar_window};
use flsim::aggregators::{fed_avg, fed_median, multi_krum, trimmed_mean, AggregationInput, Aggregator};
use flsim::attacks::{
    attack_agr_mm, attack_gauss, attack_lie, attack_opt, AttackContext, ModelSet, Perturbation,
};
use flsim::filter::{amend_matrix, anomaly_scores, filter_round, select_top_k, ClientId, FilterParams, ScoreBasis, UpdateMatrix};
use flsim::linalg::{frobenius_norm_sq, norm2, solve_spd, top_right_singular_vector};
use flsim::mar::{estimate_mar, estimate_mar_traced, forecast, mar_loss, HistoryWindow};
use flsim::metrics::{
    detection_pr, prob_at_least_one_malicious, tdmi, welch_one_tailed_t, DetectionLedger,
};
use flsim::sim::data::synthetic;
use flsim::sim::{partition_dirichlet, run_experiment, ExperimentConfig, SyntheticSpec};
use flsim::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn vectors(m: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

fn ids(m: usize) -> Vec<ClientId> {
    (0..m as u32).map(ClientId).collect()
}

fn small_config(extra: &[(&str, &str)]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("K", "8"),
        ("m", "8"),
        ("T", "4"),
        ("train_size", "400"),
        ("test_size", "100"),
        ("features", "6"),
        ("num_classes", "3"),
        ("d_tilde", "12"),
    ] {
        cfg.set(k, v).unwrap();
    }
    for (k, v) in extra {
        cfg.set(k, v).unwrap();
    }
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // ---- linear algebra ----

    #[test]
    fn spd_solve_reproduces_rhs(seed in any::<u64>(), n in 1usize..8, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = matrix(n, n, &mut rng);
        let mut g = r.t_matmul(&r);
        g.add_diagonal(1.0);
        let rhs = matrix(n, k, &mut rng);
        let x = solve_spd(&g, &rhs, 0.0).unwrap();
        let resid = frobenius_norm_sq(&g.matmul(&x).sub(&rhs)).sqrt();
        prop_assert!(resid <= 1e-8 * (1.0 + frobenius_norm_sq(&rhs).sqrt()));
    }

    #[test]
    fn frobenius_is_transpose_invariant(seed in any::<u64>(), r in 1usize..7, c in 1usize..7) {
        let m = matrix(r, c, &mut ChaCha8Rng::seed_from_u64(seed));
        // Same squares, different summation order.
        let (a, b) = (frobenius_norm_sq(&m), frobenius_norm_sq(&m.transpose()));
        prop_assert!((a - b).abs() <= 1e-14 * a.max(1e-300), "{} vs {}", a, b);
    }

    #[test]
    fn top_singular_vector_is_unit_and_maximal(seed in any::<u64>(), r in 2usize..7, c in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // A dominant direction keeps power iteration well separated.
        let mut m = matrix(r, c, &mut rng);
        let boost: Vec<f64> = (0..r).map(|_| rng.random_range(-3.0..3.0)).collect();
        for i in 0..r {
            for j in 0..c {
                m[(i, j)] += boost[i] * if j == 0 { 2.0 } else { 1.0 };
            }
        }
        let v = top_right_singular_vector(&m, 500, seed);
        prop_assert!((norm2(&v) - 1.0).abs() < 1e-9);
        let mv = norm2(&m.mat_vec(&v));
        for _ in 0..100 {
            let u: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let nu = norm2(&u);
            let u: Vec<f64> = u.iter().map(|x| x / nu).collect();
            prop_assert!(mv >= norm2(&m.mat_vec(&u)) - 1e-6);
        }
    }

    // ---- MAR ----

    #[test]
    fn als_loss_never_increases(seed in any::<u64>(), noise in 0.0f64..0.5) {
        let w = noisy_mar_window(4, 3, 5, noise, seed);
        let mut losses = Vec::new();
        estimate_mar_traced(&w, 60, 0.0, 0.0, |_, model| losses.push(mar_loss(model, &w).unwrap())).unwrap();
        for pair in losses.windows(2) {
            prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-9) + 1e-12, "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn rescaled_coefficients_forecast_identically(seed in any::<u64>(), c in prop_oneof![-4.0f64..-0.25, 0.25f64..4.0]) {
        let w = noisy_mar_window(4, 3, 4, 0.1, seed);
        let model = estimate_mar(&w, 20, 0.0, 0.0).unwrap();
        let mut scaled = model.clone();
        scaled.a_coef = model.a_coef.scale(c);
        scaled.b_coef = model.b_coef.scale(1.0 / c);
        let last = w.newest().unwrap();
        let f1 = forecast(&model, last).unwrap().values;
        let f2 = forecast(&scaled, last).unwrap().values;
        prop_assert!(frobenius_norm_sq(&f1.sub(&f2)) <= 1e-20 * (1.0 + frobenius_norm_sq(&f1)));
    }

    #[test]
    fn estimation_is_deterministic(seed in any::<u64>()) {
        let w = noisy_mar_window(5, 4, 4, 0.2, seed);
        prop_assert_eq!(estimate_mar(&w, 30, 0.0, 0.0).unwrap(), estimate_mar(&w, 30, 0.0, 0.0).unwrap());
    }

    // ---- filter ----

    #[test]
    fn scores_are_nonnegative_and_zero_on_exact_match(seed in any::<u64>(), m in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let w = HistoryWindow::from_matrices(vec![
            UpdateMatrix::new(matrix(d, m, &mut rng), ids(m), 1).unwrap(),
            UpdateMatrix::new(matrix(d, m, &mut rng), ids(m), 2).unwrap(),
        ]).unwrap();
        let predicted = forecast(&estimate_mar(&w, 10, 0.0, 0.0).unwrap(), w.newest().unwrap()).unwrap();
        let mut observed = UpdateMatrix::new(matrix(d, m, &mut rng), ids(m), 3).unwrap();
        observed.values.set_column(0, &predicted.values.column(0));
        let scores = anomaly_scores(&observed, &predicted, &vec![0.0; d], &w).unwrap();
        for e in &scores.entries {
            prop_assert!(e.score >= 0.0);
        }
        prop_assert_eq!(scores.get(ClientId(0)), Some(0.0));
        for e in &scores.entries[1..] {
            prop_assert!(e.score > 0.0);
        }
    }

    #[test]
    fn cold_start_clients_use_the_global_model(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let w = HistoryWindow::from_matrices(vec![
            UpdateMatrix::new(matrix(d, 3, &mut rng), ids(3), 1).unwrap(),
            UpdateMatrix::new(matrix(d, 3, &mut rng), ids(3), 2).unwrap(),
        ]).unwrap();
        let observed_ids = vec![ClientId(1), ClientId(7), ClientId(9)];
        let observed = UpdateMatrix::new(matrix(d, 3, &mut rng), observed_ids, 3).unwrap();
        let global = vec![0.5; d];
        let out = filter_round(&w, &observed, &global, &FilterParams::new(2)).unwrap();
        prop_assert_eq!(out.scores.basis(ClientId(1)), Some(ScoreBasis::Forecast));
        for id in [ClientId(7), ClientId(9)] {
            prop_assert_eq!(out.scores.basis(id), Some(ScoreBasis::GlobalModel));
            let col = observed.column_of(id).unwrap();
            let want: f64 = col.iter().zip(&global).map(|(a, b)| (a - b) * (a - b)).sum();
            prop_assert!((out.scores.get(id).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_is_a_k_subset_and_order_free(seed in any::<u64>(), m in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=m);
        let d = 3;
        let w = HistoryWindow::from_matrices(vec![
            UpdateMatrix::new(matrix(d, m, &mut rng), ids(m), 1).unwrap(),
            UpdateMatrix::new(matrix(d, m, &mut rng), ids(m), 2).unwrap(),
        ]).unwrap();
        let obs = matrix(d, m, &mut rng);
        let observed = UpdateMatrix::new(obs.clone(), ids(m), 3).unwrap();
        let out = filter_round(&w, &observed, &vec![0.0; d], &FilterParams::new(k)).unwrap();
        prop_assert_eq!(out.kept.len(), k);
        prop_assert!(out.kept.iter().all(|id| id.0 < m as u32));
        let flagged = out.flagged(&observed);
        prop_assert_eq!(flagged.len(), m - k);

        // Reversing the score list does not change the selection.
        let mut reversed = out.scores.clone();
        reversed.entries.reverse();
        prop_assert_eq!(select_top_k(&reversed, k).unwrap(), out.kept.clone());
    }

    #[test]
    fn amendment_is_idempotent(seed in any::<u64>(), m in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let prev = UpdateMatrix::new(matrix(d, m - 1, &mut rng), ids(m - 1), 1).unwrap();
        let observed = UpdateMatrix::new(matrix(d, m, &mut rng), ids(m), 2).unwrap();
        let flagged: BTreeSet<ClientId> = ids(m).into_iter().filter(|_| rng.random_bool(0.5)).collect();
        let global = vec![9.0; d];
        let once = amend_matrix(&observed, &flagged, Some(&prev), &global);
        let twice = amend_matrix(&once, &flagged, Some(&prev), &global);
        prop_assert_eq!(&once, &twice);
        for id in &flagged {
            let want = prev.column_of(*id).unwrap_or_else(|| global.clone());
            prop_assert_eq!(once.column_of(*id).unwrap(), want);
        }
    }

    // ---- aggregators ----

    #[test]
    fn aggregators_ignore_input_order(seed in any::<u64>(), m in 7usize..10, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vs = vectors(m, d, &mut rng);
        let cols: Vec<(ClientId, Vec<f64>)> = vs.iter().enumerate().map(|(i, v)| (ClientId(i as u32), v.clone())).collect();
        let mut shuffled = cols.clone();
        shuffled.reverse();
        shuffled.rotate_left(seed as usize % m);
        let a = AggregationInput::new(cols).unwrap();
        let b = AggregationInput::new(shuffled).unwrap();
        for spec in ["fedavg", "fedmedian", "trimmed_mean:beta=0.2", "multi_krum", "bulyan", "dnc"] {
            let rule = spec.parse::<Aggregator>().unwrap().with_num_malicious(1);
            prop_assert_eq!(rule.aggregate(&a, 3).unwrap(), rule.aggregate(&b, 3).unwrap(), "{}", spec);
        }
    }

    #[test]
    fn median_and_trimmed_mean_stay_in_range(seed in any::<u64>(), m in 1usize..9, d in 1usize..4, beta in 0.0f64..0.49) {
        let vs = vectors(m, d, &mut ChaCha8Rng::seed_from_u64(seed));
        let input = input_of(&vs);
        let med = fed_median(&input);
        let tm = trimmed_mean(&input, beta).unwrap();
        for c in 0..d {
            let lo = vs.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
            let hi = vs.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= med[c] && med[c] <= hi);
            prop_assert!(lo - 1e-12 <= tm[c] && tm[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn degenerate_rules_reduce_to_the_mean(seed in any::<u64>(), m in 3usize..9, d in 1usize..4) {
        let vs = vectors(m, d, &mut ChaCha8Rng::seed_from_u64(seed));
        let input = input_of(&vs);
        let avg = fed_avg(&input);
        for (x, y) in trimmed_mean(&input, 0.0).unwrap().iter().zip(&avg) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        for (x, y) in multi_krum(&input, 0, m).unwrap().iter().zip(&avg) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    // ---- attacks ----

    #[test]
    fn attacks_are_noops_without_malicious_clients(seed in any::<u64>(), n in 3usize..7) {
        let vs = vectors(n, 3, &mut ChaCha8Rng::seed_from_u64(seed));
        let benign: ModelSet = vs.into_iter().enumerate().map(|(i, v)| (ClientId(i as u32), v)).collect();
        let ctx = AttackContext::new(benign, BTreeSet::new(), vec![0.0; 3], seed).unwrap();
        prop_assert!(attack_gauss(&ctx, &Vec::new(), 10.0, false).unwrap().is_empty());
        prop_assert!(attack_lie(&ctx).unwrap().is_empty());
        prop_assert!(attack_opt(&ctx, 1e-5, 10.0, &Aggregator::FedMedian).unwrap().models.is_empty());
        prop_assert!(attack_agr_mm(&ctx, 1e-5, 5.0, Perturbation::UnitVector).unwrap().models.is_empty());
    }

    #[test]
    fn degenerate_attack_limits(seed in any::<u64>(), n in 3usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let same: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let benign: ModelSet = (0..n as u32).map(|i| (ClientId(i), same.clone())).collect();
        let mal: BTreeSet<ClientId> = [ClientId(50), ClientId(51)].into();
        let honest: ModelSet = mal.iter().map(|&id| (id, vectors(1, 3, &mut rng).remove(0))).collect();
        let ctx = AttackContext::new(benign, mal, vec![0.0; 3], seed).unwrap();
        // σ = 0 leaves the honest models untouched.
        prop_assert_eq!(attack_gauss(&ctx, &honest, 0.0, false).unwrap(), honest.clone());
        // Zero spread: LIE sends the benign mean.
        for (_, v) in attack_lie(&ctx).unwrap() {
            prop_assert_eq!(&v, &same);
        }
    }

    #[test]
    fn attacks_replay_bit_exactly(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let benign: ModelSet = (0..6u32).map(|i| (ClientId(i), vectors(1, 4, &mut rng).remove(0))).collect();
        let mal: BTreeSet<ClientId> = [ClientId(6), ClientId(7)].into();
        let honest: ModelSet = mal.iter().map(|&id| (id, vectors(1, 4, &mut rng).remove(0))).collect();
        let ctx = AttackContext::new(benign, mal, vec![0.0; 4], seed).unwrap();
        prop_assert_eq!(attack_gauss(&ctx, &honest, 10.0, false).unwrap(), attack_gauss(&ctx, &honest, 10.0, false).unwrap());
        prop_assert_eq!(attack_gauss(&ctx, &honest, 10.0, true).unwrap(), attack_gauss(&ctx, &honest, 10.0, true).unwrap());
        prop_assert_eq!(attack_lie(&ctx).unwrap(), attack_lie(&ctx).unwrap());
        let rule = Aggregator::TrimmedMean { beta: 0.2 };
        prop_assert_eq!(attack_opt(&ctx, 1e-5, 10.0, &rule).unwrap().models, attack_opt(&ctx, 1e-5, 10.0, &rule).unwrap().models);
    }

    // ---- metrics ----

    #[test]
    fn pr_lies_in_unit_interval(rounds in proptest::collection::vec((any::<u16>(), any::<u16>()), 1..10)) {
        let mut ledger = DetectionLedger::new();
        let mut perfect = DetectionLedger::new();
        for (f, t) in rounds {
            let set = |bits: u16| (0..16u32).filter(|i| bits & (1 << i) != 0).map(ClientId).collect::<BTreeSet<_>>();
            ledger.record(set(f), set(t));
            perfect.record(set(t), set(t));
        }
        let pr = detection_pr(&ledger);
        prop_assert!((0.0..=1.0).contains(&pr.precision) && (0.0..=1.0).contains(&pr.recall));
        let pp = detection_pr(&perfect);
        prop_assert_eq!((pp.precision, pp.recall), (1.0, 1.0));
    }

    #[test]
    fn tdmi_is_symmetric(seed in any::<u64>(), n in 4usize..40, bins in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        prop_assert_eq!(tdmi(&a, &b, bins).unwrap(), tdmi(&b, &a, bins).unwrap());
    }
}

#[test]
fn selection_probability_is_monotone() {
    for k in [10, 37, 100] {
        for m in 1..=k {
            let mut last = 0.0;
            for b in 0..=k {
                let p = prob_at_least_one_malicious(k, b, m).unwrap();
                assert!(p >= last, "K={k} m={m} b={b}");
                last = p;
            }
        }
        for b in 0..=k {
            let mut last = 0.0;
            for m in 1..=k {
                let p = prob_at_least_one_malicious(k, b, m).unwrap();
                assert!(p >= last, "K={k} b={b} m={m}");
                last = p;
            }
        }
    }
}

#[test]
fn welch_p_falls_as_means_separate() {
    let base: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut last = 1.0;
    for step in 0..30 {
        let shift = step as f64 * 0.1;
        let a: Vec<f64> = base.iter().map(|x| x + shift).collect();
        let p = welch_one_tailed_t(&a, &base).unwrap().p_value;
        assert!(p <= last, "shift {shift}: {p} > {last}");
        last = p;
    }
    assert!(last < 1e-6);
}

// ---- simulation ----

#[test]
fn partition_is_disjoint_and_exhaustive() {
    let spec = SyntheticSpec::default();
    let (train, _) = synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    for alpha in [0.05, 0.5, 5.0, 500.0] {
        for seed in 0..5 {
            let clients = partition_dirichlet(&train, 9, alpha, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut seen = vec![0u32; train.len()];
            for c in &clients {
                assert!(!c.data.is_empty());
                for &i in &c.indices {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&s| s == 1), "alpha={alpha} seed={seed}");
        }
    }
}

#[test]
fn round_bookkeeping_invariants() {
    for (r, k) in [("0.25", None), ("0.5", Some("5")), ("0.1", None)] {
        let mut extra = vec![("attack", "gauss"), ("r", r), ("T", "5"), ("fallback", "fedmedian")];
        if let Some(k) = k {
            extra.push(("k", k));
        }
        let cfg = small_config(&extra);
        let result = run_experiment(&cfg).unwrap();
        for rec in &result.records {
            assert_eq!(rec.malicious.len(), cfg.num_malicious(), "r={r}");
            assert!(rec.flagged.iter().all(|id| rec.selected.contains(id)));
            if rec.filtered {
                assert_eq!(rec.flagged.len(), cfg.m - cfg.kept());
            }
        }
    }
}

#[test]
fn experiment_is_a_pure_function_of_config() {
    let cfg = small_config(&[("attack", "lie"), ("r", "0.25"), ("seed", "11")]);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.summary_json().unwrap(), b.summary_json().unwrap());
    let (mut ra, mut rb) = (Vec::new(), Vec::new());
    a.write_rounds_csv(&mut ra).unwrap();
    b.write_rounds_csv(&mut rb).unwrap();
    assert_eq!(ra, rb);
    let other = run_experiment(&small_config(&[("attack", "lie"), ("r", "0.25"), ("seed", "12")])).unwrap();
    assert_ne!(a.summary_json().unwrap(), other.summary_json().unwrap());
}

#[test]
fn honest_client_replaced_by_itself_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (d, m) = (5, 6);
    let w = HistoryWindow::from_matrices(vec![
        UpdateMatrix::new(matrix(d, m, &mut rng), ids(m), 1).unwrap(),
        UpdateMatrix::new(matrix(d, m, &mut rng), ids(m), 2).unwrap(),
    ])
    .unwrap();
    let observed = UpdateMatrix::new(matrix(d, m, &mut rng), ids(m), 3).unwrap();
    let global = vec![0.0; d];
    let base = filter_round(&w, &observed, &global, &FilterParams::new(4)).unwrap();
    for j in 0..m {
        let mut again = observed.clone();
        let col = observed.values.column(j);
        again.values.set_column(j, &col);
        let out = filter_round(&w, &again, &global, &FilterParams::new(4)).unwrap();
        assert_eq!(out.kept, base.kept);
        assert_eq!(out.scores, base.scores);
    }
}
