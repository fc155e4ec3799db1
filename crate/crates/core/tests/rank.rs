use fsnas::rank::{kendall_tau, pearson, ranks, select_checkpoint, EpochTrace, RankPair, RankReport, TraceEntry};
use fsnas::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct O(n²) τ-b from pair counts.
fn brute_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[i] - x[j]).partial_cmp(&0.0).unwrap() as i64;
            let b = (y[i] - y[j]).partial_cmp(&0.0).unwrap() as i64;
            match (a, b) {
                (0, 0) => {}
                (0, _) => tx += 1,
                (_, 0) => ty += 1,
                _ if a == b => c += 1,
                _ => d += 1,
            }
        }
    }
    let n1 = (c + d + ty) as f64;
    let n2 = (c + d + tx) as f64;
    if n1 == 0.0 || n2 == 0.0 {
        return None;
    }
    Some((c - d) as f64 / (n1 * n2).sqrt())
}

fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize, levels: Option<u32>) -> Vec<f64> {
    (0..n)
        .map(|_| match levels {
            Some(k) => rng.random_range(0..k) as f64 / k as f64,
            None => rng.random::<f64>(),
        })
        .collect()
}

#[test]
fn kendall_equals_brute_force_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut checked = 0;
    for case in 0..1000 {
        let n = rng.random_range(2..=200);
        // Alternate between heavily tied, lightly tied and tie-free inputs.
        let levels = match case % 3 {
            0 => Some(rng.random_range(2..6)),
            1 => Some(rng.random_range(20..60)),
            _ => None,
        };
        let x = random_vector(&mut rng, n, levels);
        let y = random_vector(&mut rng, n, levels);
        match (kendall_tau(&x, &y), brute_tau_b(&x, &y)) {
            (Ok(t), Some(b)) => {
                assert_eq!(t, b, "case {case}, n={n}");
                checked += 1;
            }
            (Err(Error::Degenerate(_)), None) => {}
            (got, want) => panic!("case {case}: {got:?} vs {want:?}"),
        }
    }
    assert!(checked > 950);
}

#[test]
fn pearson_matches_the_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let n = rng.random_range(2..=200);
        let x = random_vector(&mut rng, n, None);
        let y: Vec<f64> = x.iter().map(|v| v * 0.3 + rng.random::<f64>()).collect();
        let p = pearson(&x, &y).unwrap();
        assert!((p - brute_pearson(&x, &y)).abs() <= 1e-12);
    }
}

#[test]
fn landmark_values() {
    let x = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(kendall_tau(&x, &x).unwrap(), 1.0);
    assert_eq!(kendall_tau(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
    assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
    assert!(matches!(pearson(&x, &[1.0; 4]), Err(Error::Degenerate(_))));
    assert!(kendall_tau(&[1.0], &[2.0]).is_err());
}

#[test]
fn report_from_identical_vectors_is_perfect_and_self_consistent() {
    let pairs: Vec<RankPair> = [0.5, 0.7, 0.6, 0.9]
        .iter()
        .enumerate()
        .map(|(i, &a)| RankPair {
            arch: format!("a{i}"),
            oracle: a,
            inherited: a,
        })
        .collect();
    let r = RankReport::from_pairs(pairs, "ckpt".into(), 2).unwrap();
    assert_eq!(r.kendall_tau, 1.0);
    assert!((r.pearson - 1.0).abs() < 1e-12);
    assert_eq!(r.recompute().unwrap(), r);
    let back = RankReport::pairs_from_csv(&r.to_csv()).unwrap();
    assert_eq!(back, r.pairs);
}

#[test]
fn checkpoint_selection_tie_breaks_late() {
    let mut trace = EpochTrace::default();
    for (e, t) in [0.2, 0.5, 0.5, 0.4].into_iter().enumerate() {
        trace
            .push(TraceEntry {
                epoch: e,
                kendall_tau: t,
                mean_inherited_acc: 0.0,
            })
            .unwrap();
    }
    assert_eq!(select_checkpoint(&trace).unwrap(), 2);
    assert!(select_checkpoint(&EpochTrace::default()).is_err());
    assert_eq!(trace.to_csv().lines().count(), 5);
}

proptest! {
    #[test]
    fn pearson_is_affine_invariant(
        xs in prop::collection::vec(-100.0f64..100.0, 3..50),
        a in 0.1f64..10.0,
        b in -50.0f64..50.0,
    ) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, v)| v.sin() + i as f64 * 0.1).collect();
        if let Ok(p) = pearson(&xs, &ys) {
            let moved: Vec<f64> = xs.iter().map(|v| a * v + b).collect();
            prop_assert!((pearson(&moved, &ys).unwrap() - p).abs() <= 1e-12);
        }
    }

    #[test]
    fn rank_statistics_ignore_monotone_transforms(
        xs in prop::collection::vec(-5.0f64..5.0, 3..60),
        ys in prop::collection::vec(-5.0f64..5.0, 60),
    ) {
        let ys = &ys[..xs.len()];
        let warped: Vec<f64> = xs.iter().map(|v| v.exp() * 3.0 + v.powi(3)).collect();
        prop_assert_eq!(ranks(&xs), ranks(&warped));
        match (kendall_tau(&xs, ys), kendall_tau(&warped, ys)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
        }
    }
}
