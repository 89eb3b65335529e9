use qcml::mds::{distance_histogram, mds_embed, DistanceMatrix, MdsConfig};
use qcml::proximity::{ProximityMatrix, ProximityMetric, Role};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy_distances(n: usize, seed: u64) -> DistanceMatrix {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<[f64; 3]> = (0..n).map(|_| [r.random(), r.random(), r.random()]).collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            v[i * n + j] = d;
            v[j * n + i] = d;
        }
    }
    DistanceMatrix::new(n, v).unwrap()
}

#[test]
fn permuting_input_permutes_output() {
    let n = 30;
    let d = noisy_distances(n, 1);
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    let cfg = MdsConfig {
        seed: 4,
        ..MdsConfig::default()
    };
    let a = mds_embed(&d, &cfg).unwrap();
    let b = mds_embed(&d.permuted(&perm), &cfg).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..2 {
            assert!((b.coords[i][c] - a.coords[p][c]).abs() < 1e-9);
        }
    }
    assert!((a.stress - b.stress).abs() < 1e-12);
}

#[test]
fn stress_never_increases() {
    for seed in 0..10 {
        let e = mds_embed(
            &noisy_distances(40, seed),
            &MdsConfig {
                seed,
                tol: 0.0,
                max_iter: 100,
                ..MdsConfig::default()
            },
        )
        .unwrap();
        assert!(e.stress_history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(e.stress_history.len(), e.iterations + 1);
    }
}

#[test]
fn histogram_counts_every_point() {
    let n = 25;
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let values: Vec<f64> = (0..n * n).map(|_| r.random()).collect();
    let p = ProximityMatrix::new(n, n, values, ProximityMetric::Qcml, Role::Train, Role::Train).unwrap();
    let h = distance_histogram(&p, 7).unwrap();
    assert_eq!(h.counts.iter().sum::<usize>(), n);
    assert_eq!(h.edges.len(), 8);
}
