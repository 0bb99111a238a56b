//! Brute-force and counting oracles for clustering, ingest and emitted tables.

use ndarray::Array2;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use energyscape::binarize::{decode_state, encode_states};
use energyscape::cluster::{kmeans_restarts, select_k_elbow};
use energyscape::ingest::{load_atlas, load_matrix, write_atlas, write_matrix, Layout, Network, TimeSeriesMatrix};

fn matrix(data: Array2<f64>) -> TimeSeriesMatrix {
    let names = (0..data.ncols()).map(|j| format!("ch{j}")).collect();
    TimeSeriesMatrix::new(names, data).unwrap()
}

fn zscored(data: &Array2<f64>) -> Vec<Vec<f64>> {
    data.columns()
        .into_iter()
        .map(|c| {
            let n = c.len() as f64;
            let m = c.sum() / n;
            let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            c.iter().map(|v| (v - m) / sd).collect()
        })
        .collect()
}

fn group_wcss(points: &[Vec<f64>], members: &[usize]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let t = points[0].len();
    let centroid: Vec<f64> = (0..t).map(|d| members.iter().map(|&i| points[i][d]).sum::<f64>() / members.len() as f64).collect();
    members.iter().map(|&i| points[i].iter().zip(&centroid).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum()
}

#[test]
fn kmeans_two_clusters_match_exhaustive_partition() {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    let mut misses = 0;
    for trial in 0..200 {
        let data = Array2::from_shape_fn((4, 6), |_| r.sample::<f64, _>(StandardNormal));
        let points = zscored(&data);
        // channel 0 is always in part A, so every 2-partition appears once
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1..1u32 << 5 {
            let b: Vec<usize> = (1..6).filter(|i| mask >> (i - 1) & 1 == 1).collect();
            let a: Vec<usize> = (0..6).filter(|i| !b.contains(i)).collect();
            let w = group_wcss(&points, &a) + group_wcss(&points, &b);
            if w < best.0 {
                best = (w, mask);
            }
        }
        let model = kmeans_restarts(&matrix(data), 2, trial, 10).unwrap();
        let same: Vec<bool> = (1..6).map(|i| model.assignment[i] == model.assignment[0]).collect();
        let oracle: Vec<bool> = (1..6).map(|i| best.1 >> (i - 1) & 1 == 0).collect();
        if (model.wcss - best.0).abs() > 1e-9 || same != oracle {
            eprintln!("trial {trial}: {} vs {}", model.wcss, best.0);
            misses += 1;
        }
    }
    assert_eq!(misses, 0);
}

#[test]
fn elbow_finds_three_planted_groups() {
    let mut r = ChaCha8Rng::seed_from_u64(31);
    for seed in 0..5 {
        let t = 60;
        let prototypes: Vec<Vec<f64>> = (0..3).map(|_| (0..t).map(|_| r.sample(StandardNormal)).collect()).collect();
        let data = Array2::from_shape_fn((t, 12), |(i, j)| prototypes[j % 3][i] + 0.05 * r.sample::<f64, _>(StandardNormal));
        let m = matrix(data);
        let sel = select_k_elbow(&m, 2..=8, seed, 5).unwrap();
        assert_eq!(sel.chosen_k, 3, "curve {:?}", sel.wcss_curve);
        // at k = 3 the curve must equal the WCSS of the planted partition
        let planted: Vec<Vec<usize>> = (0..3).map(|g| (0..12).filter(|j| j % 3 == g).collect()).collect();
        let points = zscored(m.data());
        let planted_wcss: f64 = planted.iter().map(|g| group_wcss(&points, g)).sum();
        assert!((sel.wcss_curve[1] - planted_wcss).abs() < 1e-9);
        assert!(sel.wcss_curve.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }
}

#[test]
fn ingest_row_sums_match_text_scan() {
    let mut r = ChaCha8Rng::seed_from_u64(41);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("series.csv");
    let mut text = (0..48).map(|j| format!("roi{j}")).collect::<Vec<_>>().join(",");
    text.push('\n');
    for _ in 0..180 {
        let row: Vec<String> = (0..48).map(|_| format!("{:.6}", r.random_range(-5.0..5.0))).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(&path, &text).unwrap();
    let m = load_matrix(&path, Layout::TimeRows).unwrap();
    assert_eq!((m.n_timepoints(), m.n_channels()), (180, 48));
    for (t, line) in text.lines().skip(1).enumerate() {
        let expected: f64 = line.split(',').map(|c| c.parse::<f64>().unwrap()).sum();
        let got: f64 = m.data().row(t).sum();
        assert!((got - expected).abs() < 1e-9);
    }
    let copy = dir.path().join("copy.csv");
    write_matrix(&copy, &m).unwrap();
    assert_eq!(load_matrix(&copy, Layout::TimeRows).unwrap(), m);
}

#[test]
fn atlas_member_counts() {
    let dir = tempfile::tempdir().unwrap();
    let m = matrix(Array2::from_shape_fn((5, 20), |(i, j)| (i * j) as f64));
    let entries: Vec<(String, Network)> =
        (0..20).map(|j| (format!("ch{j}"), Network::CANONICAL[j % 4])).collect();
    let path = dir.path().join("atlas.csv");
    write_atlas(&path, &entries).unwrap();
    let atlas = load_atlas(&path, &m).unwrap();
    for net in Network::CANONICAL {
        assert_eq!(atlas.member_counts()[&net], 5);
        assert_eq!(atlas.members(net).len(), 5);
    }
}

#[test]
fn state_codes_round_trip() {
    let mut r = ChaCha8Rng::seed_from_u64(51);
    let states = Array2::from_shape_fn((500, 8), |_| u8::from(r.random::<bool>()));
    let codes = encode_states(&states).unwrap();
    for (t, &c) in codes.iter().enumerate() {
        assert_eq!(decode_state(c, 8), states.row(t).to_vec());
    }
}
