use monoflow_core::metrics::{
    aggregate, primal_dual_gap, CompensatedMean, EnsembleSummary, ErgodicRule, IndexKind, Metric,
    RunRecord, RunRecorder,
};
use monoflow_core::operators::{Operator, Vector};
use monoflow_core::BilinearProblem;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Pairwise summation as the batch reference.
fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

#[test]
fn streaming_mean_matches_batch_on_long_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<f64> = (0..100_000)
        .map(|_| rng.random_range(-1.0..1.0) * 10f64.powf(rng.random_range(-6.0..6.0)))
        .collect();
    let mut m = CompensatedMean::new();
    for (i, &x) in xs.iter().enumerate() {
        m.push(x);
        if (i + 1) % 9973 == 0 || i + 1 == xs.len() {
            let batch = pairwise_sum(&xs[..=i]) / (i + 1) as f64;
            let scale = xs[..=i].iter().map(|x| x.abs()).sum::<f64>() / (i + 1) as f64;
            assert!(
                (m.mean().unwrap() - batch).abs() <= 1e-12 * scale,
                "i = {i}"
            );
        }
    }
}

#[test]
fn recorder_windows_match_batch_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000u64;
    let raw: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)))
        .collect();
    let mut rec = RunRecorder::new(
        IndexKind::Iteration,
        ErgodicRule::Inclusive {
            sqnorm_start: 1,
            gap_start: 2,
        },
        1,
    );
    for (k, &(a, b)) in raw.iter().enumerate() {
        rec.push(k as u64, k as f64, a, b, 0.0, false);
    }
    let r = rec.finish();
    for k in [2usize, 10, 1000, 54_321, 99_999] {
        let sq = pairwise_sum(&raw[1..=k].iter().map(|p| p.0).collect::<Vec<_>>()) / k as f64;
        let gap =
            pairwise_sum(&raw[2..=k].iter().map(|p| p.1).collect::<Vec<_>>()) / (k - 1) as f64;
        assert!((r.ergodic_norm_m_sq[k] - sq).abs() <= 1e-12 * sq);
        assert!((r.ergodic_gap[k] - gap).abs() <= 1e-12 * gap);
    }
}

#[test]
fn left_endpoint_rule_averages_previous_values() {
    let mut rec = RunRecorder::new(IndexKind::Time, ErgodicRule::LeftEndpoint, 1);
    let vals = [4.0, 2.0, 6.0, 0.0];
    for (i, &v) in vals.iter().enumerate() {
        rec.push(i as u64, 0.5 * i as f64, v, v, v, false);
    }
    let r = rec.finish();
    assert_eq!(r.ergodic_norm_m_sq, vec![4.0, 4.0, 3.0, 4.0]);
}

fn record(values: &[f64]) -> RunRecord {
    let mut r = RunRecord::new(IndexKind::Iteration);
    for (i, &v) in values.iter().enumerate() {
        r.index.push(i as f64);
        r.norm_m_sq.push(v);
        r.gap.push(v);
        r.dist_sq.push(v);
        r.ergodic_norm_m_sq.push(v);
        r.ergodic_gap.push(v);
        r.min_norm_m_sq.push(v);
    }
    r
}

#[test]
fn aggregate_of_two_constant_traces() {
    let s = aggregate(&[record(&[1.0; 5]), record(&[3.0; 5])]).unwrap();
    for m in Metric::ALL {
        let series = s.series(m);
        assert!(series.mean.iter().all(|&v| v == 2.0));
        assert!(series.min.iter().all(|&v| v == 1.0));
        assert!(series.max.iter().all(|&v| v == 3.0));
    }
}

#[test]
fn aggregate_single_trace_has_zero_stderr() {
    let s = aggregate(&[record(&[0.5, 0.25, 0.125])]).unwrap();
    let ser = s.series(Metric::Gap);
    assert_eq!(ser.mean, vec![0.5, 0.25, 0.125]);
    assert_eq!(ser.min, ser.mean);
    assert_eq!(ser.max, ser.mean);
    assert!(ser.stderr.iter().all(|&v| v == 0.0));
}

#[test]
fn aggregate_stderr_matches_sampling_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sigma = 2.0;
    let traces: Vec<RunRecord> = (0..100)
        .map(|_| {
            let vals: Vec<f64> = (0..200)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    sigma * g
                })
                .collect();
            record(&vals)
        })
        .collect();
    let s = aggregate(&traces).unwrap();
    let target = sigma / 10.0;
    let stderr = &s.series(Metric::NormMSq).stderr;
    let mean_stderr = stderr.iter().sum::<f64>() / stderr.len() as f64;
    assert!(
        (mean_stderr - target).abs() <= 0.2 * target,
        "{mean_stderr}"
    );
    for &se in stderr {
        assert!((se - target).abs() <= 0.2 * target * 1.5, "{se}");
    }
}

#[test]
fn aggregate_rejects_mismatched_grids() {
    assert!(aggregate(&[record(&[1.0; 3]), record(&[1.0; 4])]).is_err());
    assert!(aggregate(&[]).is_err());
}

#[test]
fn ensemble_csv_round_trips_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let traces: Vec<RunRecord> = (0..7)
        .map(|_| {
            record(
                &(0..50)
                    .map(|_| rng.random::<f64>() * 1e-7)
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let s = aggregate(&traces).unwrap();
    let mut buf = Vec::new();
    s.write_csv(&mut buf).unwrap();
    assert!(!buf.contains(&b'\r'));
    let back = EnsembleSummary::read_csv(&buf[..]).unwrap();
    assert_eq!(back.index, s.index);
    for m in Metric::ALL {
        assert_eq!(back.series(m), s.series(m));
    }
}

proptest! {
    #[test]
    fn primal_dual_gap_is_nonnegative(xs in proptest::collection::vec(-5.0f64..5.0, 20)) {
        let p = BilinearProblem::new(10).unwrap();
        let (x_star, y_star) = p.split(&p.zero.x_star);
        let z = Vector::from_vec(xs);
        let (x, y) = p.split(&z);
        let gap = primal_dual_gap(&p, &x, &y, &x_star, &y_star).unwrap();
        prop_assert!(gap >= -1e-9);
        let upper = p.operator.apply(&z).dot(&(&z - &p.zero.x_star));
        prop_assert!(gap <= upper + 1e-9);
        let mid = p.phi(&x_star, &y_star).unwrap();
        prop_assert!(p.phi(&x, &y_star).unwrap() >= mid - 1e-9);
        prop_assert!(mid >= p.phi(&x_star, &y).unwrap() - 1e-9);
    }
}

#[test]
fn primal_dual_gap_vanishes_at_saddle() {
    let p = BilinearProblem::new(10).unwrap();
    let (x, y) = p.split(&p.zero.x_star);
    assert!(primal_dual_gap(&p, &x, &y, &x, &y).unwrap().abs() <= 1e-12);
    assert!(primal_dual_gap(&p, &x, &Vector::zeros(3), &x, &y).is_err());
}
