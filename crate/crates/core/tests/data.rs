use std::collections::HashMap;

use pean::charset::Charset;
use pean::data::*;
use pean::eval::psnr;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn rendering_is_deterministic() {
    let style = RenderStyle::for_difficulty(Difficulty::Medium);
    let a = render_pair("abc12", &style, 7).unwrap();
    let b = render_pair("abc12", &style, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.hr.h, a.hr.w, a.lr.h, a.lr.w), (HR_H, HR_W, LR_H, LR_W));
    assert!(render_pair("ab_c", &style, 7).is_err());
}

#[test]
fn clean_degradation_is_box_downsampling() {
    let pair = render_pair("hello", &RenderStyle::for_difficulty(Difficulty::Easy), 3).unwrap();
    let lr = degrade(&pair.hr, 0.0, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(lr, pair.hr.box_downsample(2));
}

#[test]
fn harder_tiers_lose_more_detail() {
    let text = "q7x2";
    let score = |d: Difficulty| {
        let p = render_pair(text, &RenderStyle::for_difficulty(d), 11).unwrap();
        psnr(&p.lr.resize_bicubic(HR_H, HR_W), &p.hr, 1.0).unwrap()
    };
    assert!(score(Difficulty::Hard) < score(Difficulty::Easy));
}

#[test]
fn dataset_manifest_contract() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        n_train: 100,
        n_test_per_difficulty: 4,
        ..Default::default()
    };
    let m = build_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(m.count(Split::Train, None), 100);
    assert_eq!(m.count(Split::Test, Some(Difficulty::Hard)), 4);
    let loaded = Manifest::load(dir.path()).unwrap();
    let train = loaded.load_split(Split::Train).unwrap();
    assert_eq!(train.len(), 100);
    for s in &train {
        assert_eq!(Charset::default().encode(&s.pair.text).unwrap(), s.label);
    }
    let manifest = std::fs::read(dir.path().join(dataset::MANIFEST)).unwrap();
    let other = tempfile::tempdir().unwrap();
    build_dataset(&cfg, other.path()).unwrap();
    assert_eq!(manifest, std::fs::read(other.path().join(dataset::MANIFEST)).unwrap());
    let moved = tempfile::tempdir().unwrap();
    build_dataset(&DatasetConfig { seed: 1, ..cfg }, moved.path()).unwrap();
    assert_ne!(manifest, std::fs::read(moved.path().join(dataset::MANIFEST)).unwrap());
}

#[test]
fn unwritable_output_leaves_no_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = blocker.join("ds");
    assert!(build_dataset(&DatasetConfig::default(), &out).is_err());
    assert!(!out.join(dataset::MANIFEST).exists());
}

#[test]
fn text_sampler_covers_the_charset() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut hist: HashMap<char, usize> = HashMap::new();
    for _ in 0..5000 {
        let t = sample_text(&mut r, 2, 7);
        assert!((2..=7).contains(&t.len()));
        for c in t.chars() {
            *hist.entry(c).or_default() += 1;
        }
    }
    let cs = Charset::default();
    assert_eq!(hist.len(), cs.len() - 1);
    let total: usize = hist.values().sum();
    let expect = total as f64 / hist.len() as f64;
    // uniform sampler: every count within 5 sigma of the mean
    for (c, n) in &hist {
        assert!((*n as f64 - expect).abs() < 5.0 * expect.sqrt(), "{c}: {n} vs {expect}");
    }
}
