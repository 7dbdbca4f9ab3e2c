use pean::losses::*;
use pean::nn::*;
use pean::recognizer::{ctc_nll, Crnn, CrnnConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn terms(sr: &Tensor<f64>, hr: &Tensor<f64>) -> (f64, f64) {
    let g = Graph::<f64>::detached(false);
    let (m, e) = image_terms(g.constant(sr.clone()), g.constant(hr.clone())).unwrap();
    (m.item(), e.item())
}

/// Per-pixel loops: MSE, Sobel magnitude of luma, unit-sum maps, mean L1.
fn naive_terms(sr: &Tensor<f64>, hr: &Tensor<f64>) -> (f64, f64) {
    let s = sr.shape();
    let (b, h, w) = (s[0], s[1], s[2]);
    let mse = sr.data().iter().zip(hr.data()).map(|(a, c)| (a - c).powi(2)).sum::<f64>() / sr.numel() as f64;
    let map = |t: &Tensor<f64>, n: usize| -> Vec<f64> {
        let d = t.data();
        let y = |r: usize, c: usize| {
            let i = ((n * h + r) * w + c) * 3;
            0.299 * d[i] + 0.587 * d[i + 1] + 0.114 * d[i + 2]
        };
        let mut m = Vec::new();
        for r in 1..h - 1 {
            for c in 1..w - 1 {
                let gx = y(r - 1, c + 1) + 2.0 * y(r, c + 1) + y(r + 1, c + 1) - y(r - 1, c - 1) - 2.0 * y(r, c - 1) - y(r + 1, c - 1);
                let gy = y(r + 1, c - 1) + 2.0 * y(r + 1, c) + y(r + 1, c + 1) - y(r - 1, c - 1) - 2.0 * y(r - 1, c) - y(r - 1, c + 1);
                m.push((gx * gx + gy * gy + 1e-6).sqrt());
            }
        }
        let z: f64 = m.iter().sum();
        m.into_iter().map(|v| v / z).collect()
    };
    let mut l1 = 0.0;
    let mut count = 0;
    for n in 0..b {
        for (p, q) in map(hr, n).iter().zip(map(sr, n)) {
            l1 += (p - q).abs();
            count += 1;
        }
    }
    (mse, l1 / count as f64)
}

#[test]
fn identical_images_give_zero_terms() {
    let x = Tensor::<f64>::uniform(&[2, 8, 10, 3], 0.0, 1.0, &mut rng(1));
    assert_eq!(terms(&x, &x), (0.0, 0.0));
}

#[test]
fn constant_images_half_apart() {
    let a = Tensor::<f64>::full(&[1, 6, 9, 3], 0.2);
    let b = Tensor::<f64>::full(&[1, 6, 9, 3], 0.7);
    let g = Graph::<f64>::detached(false);
    let (m, e) = image_loss(g.constant(a), g.constant(b), 0.8, 75.0).unwrap();
    assert!((m.item() - 0.8 * 0.25).abs() < 1e-12);
    assert!(e.item().abs() < 1e-12);
}

#[test]
fn image_terms_match_naive_loops() {
    for seed in 0..5 {
        let sr = Tensor::<f64>::uniform(&[2, 7, 11, 3], 0.0, 1.0, &mut rng(seed));
        let hr = Tensor::<f64>::uniform(&[2, 7, 11, 3], 0.0, 1.0, &mut rng(seed + 100));
        let (m, e) = terms(&sr, &hr);
        let (nm, ne) = naive_terms(&sr, &hr);
        assert!((m - nm).abs() <= 1e-6 && (e - ne).abs() <= 1e-6, "{m} {nm} {e} {ne}");
    }
}

#[test]
fn shape_mismatch_is_rejected() {
    let g = Graph::<f64>::detached(false);
    let a = g.constant(Tensor::zeros(&[1, 4, 4, 3]));
    let b = g.constant(Tensor::zeros(&[1, 4, 5, 3]));
    assert!(image_terms(a, b).is_err());
}

#[test]
fn grad_edge_and_mse_terms() {
    let mut ps = ParamStore::<f64>::new();
    let sr = ps.add("sr", Tensor::uniform(&[2, 6, 8, 3], 0.1, 0.9, &mut rng(2)));
    let hr = Tensor::<f64>::uniform(&[2, 6, 8, 3], 0.0, 1.0, &mut rng(3));
    let rep = grad_check(&mut ps, &GradCheckConfig::default(), |g| {
        let (m, e) = image_loss(g.param(sr)?, g.constant(hr.clone()), 0.8, 75.0)?;
        m.add(e)
    })
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

fn arm(ps: &mut ParamStore<f64>) -> Crnn {
    Crnn::new(ps, "arm", CrnnConfig::feature(4, 4, 5), &mut rng(4))
}

#[test]
fn text_loss_delegates_to_ctc() {
    let mut ps = ParamStore::<f64>::new();
    let net = arm(&mut ps);
    let x = Tensor::<f64>::randn(&[2, 16, 64, 4], &mut rng(5));
    let labels = vec![vec![1, 2, 3], vec![4, 4]];
    let g = Graph::eval(&ps);
    let logits = net.logits(g.constant(x)).unwrap();
    assert_eq!(text_loss(logits, &labels, 0.0).unwrap().item(), 0.0);
    let got = text_loss(logits, &labels, 2.5).unwrap().item();
    let lp = logits.log_softmax().value();
    let per = lp.numel() / 2;
    let [_, frames, classes] = lp.shape() else { unreachable!() };
    let want: f64 = (0..2)
        .map(|i| ctc_nll(&lp.data()[i * per..(i + 1) * per], *frames, *classes, &labels[i]).unwrap().0)
        .sum::<f64>()
        / 2.0;
    assert!((got - 2.5 * want).abs() < 1e-9);
}

#[test]
fn grad_arm_with_text_loss() {
    let mut ps = ParamStore::<f64>::new();
    let net = arm(&mut ps);
    let x = ps.add("x", Tensor::randn(&[2, 16, 64, 4], &mut rng(6)));
    let labels = vec![vec![7, 8], vec![9]];
    let cfg = GradCheckConfig {
        max_entries_per_param: 6,
        ..Default::default()
    };
    let rep = grad_check(&mut ps, &cfg, |g| text_loss(net.logits(g.param(x)?)?, &labels, 1.0)).unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn zero_weights_give_zero_total() {
    let w = LossWeights {
        l1: 0.0,
        l2: 0.0,
        l3: 0.0,
        l4: 0.0,
        l5: 0.0,
    };
    let r = total_loss(RawTerms { diff: Some((3.0, 4.0)), img: (5.0, 6.0), txt: 7.0 }, &w).unwrap();
    assert_eq!(r.total, 0.0);
    let unit = RawTerms { diff: Some((1.0, 1.0)), img: (1.0, 1.0), txt: 1.0 };
    assert!((total_loss(unit, &LossWeights::default()).unwrap().total - 78.8).abs() < 1e-12);
    let bad = LossWeights { l4: -1.0, ..Default::default() };
    assert!(total_loss(unit, &bad).is_err());
}

fn weights() -> impl Strategy<Value = LossWeights> {
    (0.0..10.0f64, 0.0..10.0f64, 0.0..10.0f64, 0.0..100.0f64, 0.0..10.0f64).prop_map(|(l1, l2, l3, l4, l5)| LossWeights { l1, l2, l3, l4, l5 })
}

proptest! {
    #[test]
    fn report_total_is_the_weighted_sum(w in weights(), raw in prop::array::uniform5(0.0..50.0f64), with_diff in any::<bool>()) {
        let terms = RawTerms { diff: with_diff.then_some((raw[0], raw[1])), img: (raw[2], raw[3]), txt: raw[4] };
        let r = total_loss(terms, &w).unwrap();
        let mut manual = w.l3 * raw[2] + w.l4 * raw[3] + w.l5 * raw[4];
        if with_diff {
            manual += w.l1 * raw[0] + w.l2 * raw[1];
        }
        prop_assert!((r.total - manual).abs() <= 1e-9 * manual.max(1.0));
        prop_assert_eq!(r.terms.len(), if with_diff { 5 } else { 3 });
        prop_assert_eq!(r.get("diff_mae").is_some(), with_diff);
        let sum: f64 = r.terms.iter().map(|t| t.weighted).sum();
        prop_assert_eq!(sum, r.total);
    }

    #[test]
    fn total_is_linear_in_each_term(w in weights(), raw in prop::array::uniform5(0.0..50.0f64), k in 0usize..5, a in 0.0..20.0f64, b in 0.0..20.0f64) {
        let at = |v: f64| {
            let mut r = raw;
            r[k] = v;
            total_loss(RawTerms { diff: Some((r[0], r[1])), img: (r[2], r[3]), txt: r[4] }, &w).unwrap().total
        };
        let coef = [w.l1, w.l2, w.l3, w.l4, w.l5][k];
        if a != b {
            let slope = (at(a) - at(b)) / (a - b);
            prop_assert!((slope - coef).abs() <= 1e-6 * coef.max(1.0));
        }
    }
}
