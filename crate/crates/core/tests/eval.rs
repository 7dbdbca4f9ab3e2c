mod common;

use common::*;
use pean::data::{Difficulty, Image};
use pean::eval::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| r.random::<f32>()).collect()).unwrap()
}

#[test]
fn psnr_sentinels_and_oracle() {
    let a = random_image(8, 12, 1);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    let zero = Image::filled(4, 4, [0.0; 3]);
    let one = Image::filled(4, 4, [1.0; 3]);
    assert_eq!(psnr(&zero, &one, 1.0).unwrap(), 0.0);
    for seed in 0..10 {
        let (x, y) = (random_image(9, 13, seed), random_image(9, 13, seed + 50));
        assert!((psnr(&x, &y, 1.0).unwrap() - naive_psnr(&x.data, &y.data)).abs() <= 1e-9);
    }
    assert!(psnr(&a, &random_image(8, 13, 2), 1.0).is_err());
}

#[test]
fn ssim_properties_and_oracle() {
    let a = random_image(16, 20, 3);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let neg = Image::new(a.h, a.w, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
    assert!(ssim(&a, &neg).unwrap() < 1.0);
    for seed in 0..4 {
        let (x, y) = (random_image(14, 18, seed), random_image(14, 18, seed + 9));
        let got = ssim(&x, &y).unwrap();
        assert!((got - naive_ssim(&x.data, &y.data, 14, 18)).abs() <= 1e-6);
    }
    assert!(ssim(&random_image(8, 30, 1), &random_image(8, 30, 2)).is_err());
}

#[test]
fn weighted_accuracy_reproduces_published_average() {
    let avg = weighted_average(&[(84.5, 1619), (71.4, 1411), (52.9, 1343)]);
    assert!((avg - 70.6).abs() <= 0.05, "{avg}");
}

#[test]
fn accuracy_report_fields() {
    let labels: Vec<String> = ["ab", "cd", "ef", "gh"].iter().map(|s| s.to_string()).collect();
    let diffs = [Difficulty::Easy, Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];
    let all = accuracy(&labels, &labels, &diffs).unwrap();
    assert!(all.subsets.iter().all(|s| s.accuracy == 100.0));
    assert_eq!(all.average, 100.0);
    let preds: Vec<String> = ["AB", "x", "ef", ""].iter().map(|s| s.to_string()).collect();
    let r = accuracy(&preds, &labels, &diffs).unwrap();
    assert_eq!(r.subset(Difficulty::Easy).unwrap().correct, 1);
    assert_eq!(r.average, 50.0);
    assert_eq!(r.count, 4);
    let one = accuracy(&preds[..2], &labels[..2], &diffs[..2]).unwrap();
    assert_eq!(one.subsets.len(), 1);
    assert_eq!(one.average, one.subsets[0].accuracy);
    assert!(accuracy(&preds, &labels[..3], &diffs).is_err());
}

fn random_acts(n: usize, p: usize, seed: u64) -> Activations {
    let mut r = rng(seed);
    Activations::new(n, p, (0..n * p).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `x Q` for a random orthogonal `Q` built by Gram-Schmidt.
fn rotate(x: &Activations, seed: u64) -> Activations {
    let p = x.p;
    let mut r = rng(seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < p {
        let mut v: Vec<f64> = (0..p).map(|_| r.random_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut out = vec![0.0; x.n * p];
    for i in 0..x.n {
        for j in 0..p {
            out[i * p + j] = (0..p).map(|k| x.data[i * p + k] * q[k][j]).sum();
        }
    }
    Activations::new(x.n, p, out).unwrap()
}

#[test]
fn cka_invariances() {
    let x = random_acts(20, 6, 4);
    assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-6);
    assert!((linear_cka(&x, &rotate(&x, 5)).unwrap() - 1.0).abs() < 1e-6);
    let scaled = Activations::new(x.n, x.p, x.data.iter().map(|v| -3.5 * v).collect()).unwrap();
    assert!((linear_cka(&x, &scaled).unwrap() - 1.0).abs() < 1e-6);
    let flat = Activations::new(4, 2, vec![1.0; 8]).unwrap();
    assert!(linear_cka(&flat, &random_acts(4, 2, 1)).is_err());
    assert!(linear_cka(&x, &random_acts(19, 6, 1)).is_err());
}

proptest! {
    #[test]
    fn cka_matches_both_oracles(seed in any::<u64>(), n in 3usize..12, px in 1usize..7, py in 1usize..7) {
        let x = random_acts(n, px, seed);
        let y = random_acts(n, py, seed ^ 1);
        let got = linear_cka(&x, &y).unwrap();
        prop_assert!((got - naive_cka_features(&x.data, &y.data, n, px, py)).abs() <= 1e-8);
        prop_assert!((got - naive_cka_hsic(&x.data, &y.data, n, px, py)).abs() <= 1e-8);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&got));
    }
}

#[test]
fn cka_matrix_self_comparison() {
    let taps: Vec<Activations> = (0..5).map(|i| random_acts(10, 3 + i, i as u64)).collect();
    let m = cka_matrix(&taps, &taps, 2).unwrap();
    assert!(m.diag().iter().all(|v| (v - 1.0).abs() < 1e-9));
    assert!((m.diag_mean - 1.0).abs() < 1e-9);
    assert_eq!(m.values.len(), 5);
    assert!(cka_matrix(&taps, &taps[..4], 2).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.png");
    m.save_heatmap(&path, 3).unwrap();
    assert!(path.metadata().unwrap().len() > 0);
}
