//! Library results against dense, loop-by-loop recomputation.

use aglp_core::losses::pairwise_pseudo_labels;
use aglp_core::model::InstanceGraph;
use aglp_core::prototypes::{compute_prototypes, TemperatureMode};
use aglp_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `D^-1/2 (S S^T + I) D^-1/2` with explicit loops.
fn brute_propagation(s: &Matrix) -> Matrix {
    let n = s.rows();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut dot = 0.0;
            for c in 0..s.cols() {
                dot += s.get(i, c) * s.get(j, c);
            }
            a[i][j] = dot + if i == j { 1.0 } else { 0.0 };
        }
    }
    let d: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            p.set(i, j, a[i][j] / (d[i].sqrt() * d[j].sqrt()));
        }
    }
    p
}

/// Top-k by a stable descending sort, so the lower index wins a tie.
fn brute_top_sets(x: &Matrix, k: usize) -> Vec<Vec<usize>> {
    x.iter_rows()
        .map(|row| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
            let mut top = idx[..k].to_vec();
            top.sort();
            top
        })
        .collect()
}

pub fn propagation_matches_brute_force() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(5..=10);
        let c = rng.random_range(1..=6);
        let s = uniform(&mut rng, n, c, 0.0, 1.0);
        let g = InstanceGraph::from_scores(&s).unwrap();
        worst = worst.max(g.propagation.max_abs_diff(&brute_propagation(&s)));
    }
    assert!(worst <= 1e-12, "max deviation {worst:e}");
    worst
}

pub fn pairwise_labels_match_brute_force() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut checked = 0;
    for b in 0..100 {
        let n = rng.random_range(2..=16);
        let c = rng.random_range(2..=8);
        let k = rng.random_range(1..=c);
        let mut x = uniform(&mut rng, n, c, 0.0, 1.0);
        if b % 2 == 0 {
            // Coarse values force ties and repeated sets.
            x = x.map(|v| (v * 3.0).floor() / 3.0);
        }
        let sets = brute_top_sets(&x, k);
        let s = pairwise_pseudo_labels(&x, k).unwrap();
        for i in 0..n {
            for j in 0..n {
                let expect = if sets[i] == sets[j] { 1.0 } else { 0.0 };
                assert_eq!(s.get(i, j), expect, "batch {b}, pair ({i},{j})");
                checked += 1;
            }
        }
    }
    checked
}

pub fn prototypes_match_brute_force() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let classes = rng.random_range(2..=5);
        let dim = rng.random_range(1..=6);
        let n = rng.random_range(classes..=30);
        let mut labels: Vec<usize> = (0..classes).collect();
        labels.extend((classes..n).map(|_| rng.random_range(0..classes)));
        let x = uniform(&mut rng, n, dim, -2.0, 2.0);
        let set = compute_prototypes(&x, &labels, classes, 0.6, TemperatureMode::Multiply).unwrap();
        for k in 0..classes {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == k).collect();
            for c in 0..dim {
                let mean = members.iter().map(|&i| x.get(i, c)).sum::<f64>() / members.len() as f64;
                worst = worst.max((set.centers.get(k, c) - mean).abs());
            }
        }
        // Probabilities: softmax over -T * squared distance.
        let q = uniform(&mut rng, 4, dim, -2.0, 2.0);
        let p = set.predict(&q).unwrap();
        for i in 0..4 {
            let logits: Vec<f64> = (0..classes)
                .map(|k| -0.6 * (0..dim).map(|c| (q.get(i, c) - set.centers.get(k, c)).powi(2)).sum::<f64>())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for k in 0..classes {
                worst = worst.max((p.get(i, k) - logits[k].exp() / z).abs());
            }
        }
    }
    assert!(worst <= 1e-12, "max deviation {worst:e}");
    worst
}

#[test]
fn propagation_oracle() {
    propagation_matches_brute_force();
}

#[test]
fn pairwise_oracle() {
    pairwise_labels_match_brute_force();
}

#[test]
fn prototype_oracle() {
    prototypes_match_brute_force();
}
