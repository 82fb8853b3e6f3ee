use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lcnmf::calendar::HolidayCalendar;
use lcnmf::constraints::{build_b, build_y, ConstraintSet, SectorMap};
use lcnmf::ensemble::{cluster_solutions, ClusterMode};
use lcnmf::io::{read_matrix, write_matrix};
use lcnmf::nnls::nnls_gram;
use lcnmf::nowcast::{project, ProjectionConfig};
use lcnmf::solver::{fit, init_factors, loss, update_c, update_s, Method, SolverConfig};
use lcnmf::stats::mean_and_band;

fn positive(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.01..1.0))
}

/// Random problem over `n` days starting on 2021-03-20, so it spans a month boundary.
fn problem(seed: u64, n: usize, p: usize, k: usize) -> (Array2<f64>, ConstraintSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cal = HolidayCalendar::default();
    let start = NaiveDate::from_ymd_opt(2021, 3, 20).unwrap();
    let labels: Vec<_> = (0..n).map(|i| cal.label(start + chrono::Duration::days(i as i64))).collect();
    let energy = Array1::from_shape_fn(n, |_| rng.random_range(0.5..2.0));
    let (b, _) = build_b(energy.view(), &labels).unwrap();
    let a = SectorMap::new(vec!["a".into(), "b".into()], vec![vec![0], (1..k).collect()])
        .build_a(k)
        .unwrap();
    let x = positive(&mut rng, n, p);
    let y = positive(&mut rng, b.nrows(), 2) * (n as f64 / 4.0);
    (x, ConstraintSet::with_row_sum(b, a, y, p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nnls_satisfies_kkt(seed in any::<u64>(), k in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(k + 3, k, |_, _| rng.random_range(-1.0..1.0));
        let g = m.transpose() * &m;
        let b = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let x = nnls_gram(&g, &b, &vec![0.0; k]);
        let grad = &g * DVector::from_column_slice(&x) - &b;
        for j in 0..k {
            prop_assert!(x[j] >= 0.0);
            if x[j] > 0.0 {
                prop_assert!(grad[j].abs() < 1e-8, "free coordinate {j}: {}", grad[j]);
            } else {
                prop_assert!(grad[j] > -1e-8, "bound coordinate {j}: {}", grad[j]);
            }
        }
    }

    #[test]
    fn multiplicative_steps_never_increase_loss(seed in any::<u64>(), n in 15usize..40, k in 2usize..5) {
        let p = 12;
        let (x, cons) = problem(seed, n, p, k);
        let f = init_factors(n, k, p, seed);
        let (alpha, beta) = (0.5, 2.0);
        let before = loss(x.view(), f.c.view(), f.s.view(), &cons, alpha, beta).unwrap().total;
        let s = update_s(x.view(), f.c.view(), f.s.view(), &cons, beta, 1e-12).unwrap();
        let mid = loss(x.view(), f.c.view(), s.view(), &cons, alpha, beta).unwrap().total;
        let c = update_c(x.view(), f.c.view(), s.view(), &cons, alpha, 1e-12).unwrap();
        let after = loss(x.view(), c.view(), s.view(), &cons, alpha, beta).unwrap().total;
        prop_assert!(s.iter().chain(c.iter()).all(|v| *v >= 0.0));
        prop_assert!(mid <= before * (1.0 + 1e-12));
        prop_assert!(after <= mid * (1.0 + 1e-12));
    }

    #[test]
    fn exact_method_trace_is_monotone(seed in any::<u64>(), n in 15usize..40, k in 2usize..5) {
        let p = 12;
        let (x, cons) = problem(seed, n, p, k);
        let cfg = SolverConfig { method: Method::Anls, alpha: 0.5, beta: 2.0, max_iters: 30, ..SolverConfig::default() };
        let res = fit(x.view(), &cons, &cfg, init_factors(n, k, p, seed)).unwrap();
        for w in res.loss_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-10), "{} -> {}", w[0], w[1]);
        }
        prop_assert!(res.factors.c.iter().chain(res.factors.s.iter()).all(|v| *v >= 0.0));
    }

    #[test]
    fn threshold_keeps_exactly_the_losses_below(losses in prop::collection::vec(0.0f64..1.0, 1..200), t in 0.0f64..1.0) {
        let want: Vec<usize> = (0..losses.len()).filter(|&i| losses[i] <= t).collect();
        match cluster_solutions(&losses, ClusterMode::Threshold(t)) {
            Ok(kept) => prop_assert_eq!(kept, want),
            Err(_) => prop_assert!(want.is_empty()),
        }
    }

    #[test]
    fn auto_gap_keeps_the_minimum(losses in prop::collection::vec(0.0f64..1.0, 1..100)) {
        let kept = cluster_solutions(&losses, ClusterMode::AutoGap).unwrap();
        let best = (0..losses.len()).min_by(|&a, &b| losses[a].total_cmp(&losses[b])).unwrap();
        prop_assert!(kept.contains(&best));
        let max_kept = kept.iter().map(|&i| losses[i]).fold(f64::MIN, f64::max);
        prop_assert!(losses.iter().enumerate().all(|(i, &l)| kept.contains(&i) || l > max_kept));
    }

    #[test]
    fn b_rows_hold_monthly_energy(seed in any::<u64>(), n in 1usize..120, offset in 0i64..365) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cal = HolidayCalendar::default();
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Duration::days(offset);
        let labels: Vec<_> = (0..n).map(|i| cal.label(start + chrono::Duration::days(i as i64))).collect();
        let energy = Array1::from_shape_fn(n, |_| rng.random_range(0.1..10.0));
        let (b, months) = build_b(energy.view(), &labels).unwrap();
        prop_assert_eq!(b.nrows(), months.len());
        for (i, l) in labels.iter().enumerate() {
            let col = b.column(i);
            prop_assert_eq!(col.iter().filter(|v| **v != 0.0).count(), 1);
            let r = months.iter().position(|m| *m == l.month()).unwrap();
            prop_assert_eq!(col[r], energy[i]);
        }
        prop_assert!((b.sum() - energy.sum()).abs() < 1e-9 * energy.sum());
    }

    #[test]
    fn y_matches_both_margins(seed in any::<u64>(), m in 1usize..14, g in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ind = positive(&mut rng, m, g);
        let w: Vec<f64> = (0..g).map(|_| rng.random_range(1.0..10.0)).collect();
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(1.0..10.0)).collect();
        let scale = w.iter().sum::<f64>() / raw.iter().sum::<f64>();
        let totals: Vec<f64> = raw.iter().map(|v| v * scale).collect();
        let y = build_y(&ind, &w, &totals).unwrap();
        for (j, col) in y.columns().into_iter().enumerate() {
            prop_assert!((col.sum() - w[j]).abs() < 1e-6 * w[j]);
        }
        for (r, row) in y.rows().into_iter().enumerate() {
            prop_assert!((row.sum() - totals[r]).abs() < 1e-6 * totals[r]);
        }
    }

    #[test]
    fn projection_is_optimal(seed in any::<u64>(), n0 in 1usize..20, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 16;
        let s = positive(&mut rng, k, p);
        let x0 = positive(&mut rng, n0, p);
        let cfg = ProjectionConfig { seed, ..ProjectionConfig::default() };
        let proj = project(x0.view(), s.view(), &cfg).unwrap();
        let grad = (proj.c0.dot(&s) - &x0).dot(&s.t()) * 2.0;
        for (c, g) in proj.c0.iter().zip(grad.iter()) {
            prop_assert!(*c >= 0.0);
            if *c > 0.0 {
                prop_assert!(g.abs() < 1e-7, "free entry has gradient {g}");
            } else {
                prop_assert!(*g > -1e-7, "bound entry has gradient {g}");
            }
        }
    }

    #[test]
    fn initial_rows_lie_on_the_simplex(n in 1usize..50, k in 1usize..8, p in 2usize..30, seed in any::<u64>()) {
        let f = init_factors(n, k, p, seed);
        for row in f.c.rows().into_iter().chain(f.s.rows()) {
            prop_assert!(row.iter().all(|v| *v > 0.0));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn band_brackets_the_sample(values in prop::collection::vec(-1e6f64..1e6, 1..300)) {
        let mut v = values.clone();
        let (mean, lo, hi) = mean_and_band(&mut v);
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= lo && lo <= hi && hi <= max);
        prop_assert!(min - 1e-6 <= mean && mean <= max + 1e-6);
    }

    #[test]
    fn matrix_files_round_trip(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..60), cols in 1usize..6) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let m = Array2::from_shape_vec((rows, cols), values[..rows * cols].to_vec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_matrix(&path, m.view(), None, None).unwrap();
        prop_assert_eq!(read_matrix(&path).unwrap().data, m);
    }
}
