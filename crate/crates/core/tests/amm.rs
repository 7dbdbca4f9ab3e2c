mod common;

use common::*;
use pean::amm::*;
use pean::nn::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: usize = 4;
const W: usize = 6;
const C: usize = 8;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn branch_params(seed: u64) -> (ParamStore<f64>, Qkvo, Qkvo, Qkvo, Qkvo) {
    let mut r = rng(seed);
    let mut ps = ParamStore::new();
    let lr = Qkvo::new(&mut ps, "lr", C, C, C, &mut r);
    let lc = Qkvo::new(&mut ps, "lc", C, C, C, &mut r);
    let gr = Qkvo::new(&mut ps, "gr", W * C, 5, C, &mut r);
    let gc = Qkvo::new(&mut ps, "gc", H * C, 5, C, &mut r);
    (ps, lr, lc, gr, gc)
}

fn run(ps: &ParamStore<f64>, x: &Tensor<f64>, f: impl for<'g> Fn(Var<'g, f64>) -> pean::Result<Var<'g, f64>>) -> Vec<f64> {
    let g = Graph::eval(ps);
    f(g.constant(x.clone())).unwrap().value().data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn branches_match_full_attention_oracles(seed in 0u64..1_000_000) {
        let (ps, lr, lc, gr, gc) = branch_params(seed);
        let x = Tensor::<f64>::randn(&[1, H, W, C], &mut rng(seed ^ 0xabc));
        let xs = x.data();
        let got = run(&ps, &x, |v| row_attention(v, &lr));
        prop_assert!(max_abs_diff(&got, &strip_oracle(&ps, &lr, xs, H, W, C, true)) <= 1e-5);
        let got = run(&ps, &x, |v| col_attention(v, &lc));
        prop_assert!(max_abs_diff(&got, &strip_oracle(&ps, &lc, xs, H, W, C, false)) <= 1e-5);
        let got = run(&ps, &x, |v| merged_row_attention(v, &gr));
        prop_assert!(max_abs_diff(&got, &merged_oracle(&ps, &gr, xs, H, W, C, true)) <= 1e-5);
        let got = run(&ps, &x, |v| merged_col_attention(v, &gc));
        prop_assert!(max_abs_diff(&got, &merged_oracle(&ps, &gc, xs, H, W, C, false)) <= 1e-5);
    }
}

#[test]
fn single_row_horizontal_branch_is_full_attention() {
    let mut r = rng(1);
    let mut ps = ParamStore::<f64>::new();
    let p = Qkvo::new(&mut ps, "p", C, C, C, &mut r);
    let x = Tensor::<f64>::randn(&[1, 1, W, C], &mut r);
    let got = run(&ps, &x, |v| row_attention(v, &p));
    let want = strip_oracle(&ps, &p, x.data(), 1, W, C, true);
    assert!(max_abs_diff(&got, &want) < 1e-12);
}

#[test]
fn zeroing_a_row_only_changes_that_row() {
    let (ps, lr, ..) = branch_params(2);
    let x = Tensor::<f64>::randn(&[1, H, W, C], &mut rng(3));
    let mut z = x.clone();
    let r = 2;
    z.data_mut()[r * W * C..(r + 1) * W * C].iter_mut().for_each(|v| *v = 0.0);
    let a = run(&ps, &x, |v| row_attention(v, &lr));
    let b = run(&ps, &z, |v| row_attention(v, &lr));
    for y in 0..H {
        let d = max_abs_diff(&a[y * W * C..(y + 1) * W * C], &b[y * W * C..(y + 1) * W * C]);
        if y == r {
            assert!(d > 1e-6);
        } else {
            assert_eq!(d, 0.0, "row {y} changed");
        }
    }
}

#[test]
fn single_row_merged_attention_is_value_projection() {
    let mut r = rng(4);
    let mut ps = ParamStore::<f64>::new();
    let p = Qkvo::new(&mut ps, "p", W * C, 5, C, &mut r);
    let x = Tensor::<f64>::randn(&[2, 1, W, C], &mut r);
    let got = run(&ps, &x, |v| merged_row_attention(v, &p));
    let (wv, wo) = (weights(&ps, &p.v), weights(&ps, &p.o));
    let want: Vec<f64> = x.data().chunks(C).flat_map(|t| affine(&affine(t, &wv), &wo)).collect();
    assert!(max_abs_diff(&got, &want) < 1e-12);
}

fn blocks(ps: &mut ParamStore<f64>, n: usize, seed: u64) -> Vec<AmmBlock> {
    let mut r = rng(seed);
    (0..n).map(|i| AmmBlock::new(ps, &format!("b{i}"), H, W, C, 6, 2, &mut r)).collect()
}

/// Fills every parameter with noise so zero-initialised residual branches
/// take part in the checks.
fn randomise(ps: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<ParamId> = ps.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let shape = ps.get(id).value.shape().to_vec();
        ps.get_mut(id).value = Tensor::randn(&shape, &mut r).scale(0.3);
    }
}

#[test]
fn amm_stack_bookkeeping() {
    let mut ps = ParamStore::<f64>::new();
    let bs = blocks(&mut ps, 3, 5);
    let x = Tensor::<f64>::randn(&[2, H, W, C], &mut rng(6));
    let g = Graph::eval(&ps);
    let (out, taps) = amm_forward(g.constant(x.clone()), &bs, 3).unwrap();
    assert_eq!(taps.len(), 6);
    assert_eq!(out.shape(), vec![2, H, W, C]);
    assert!(amm_forward(g.constant(x.clone()), &bs, 4).is_err());
    assert!(amm_forward(g.constant(x), &bs[..0], 0).is_err());
}

#[test]
fn one_block_stack_equals_manual_application() {
    let mut ps = ParamStore::<f64>::new();
    let bs = blocks(&mut ps, 1, 7);
    randomise(&mut ps, 8);
    let x = Tensor::<f64>::randn(&[2, H, W, C], &mut rng(9));
    let g = Graph::eval(&ps);
    let f = g.constant(x);
    let (out, _) = amm_forward(f, &bs, 1).unwrap();
    let (_, manual) = bs[0].forward(f, f).unwrap();
    assert_eq!(out.value().data(), manual.value().data());
}

#[test]
fn batch_permutation_commutes() {
    let mut ps = ParamStore::<f64>::new();
    let bs = blocks(&mut ps, 2, 10);
    randomise(&mut ps, 11);
    let x = Tensor::<f64>::randn(&[3, H, W, C], &mut rng(12));
    let per = H * W * C;
    let perm = [2usize, 0, 1];
    let mut px = x.clone();
    for (dst, &src) in perm.iter().enumerate() {
        px.data_mut()[dst * per..(dst + 1) * per].copy_from_slice(&x.data()[src * per..(src + 1) * per]);
    }
    let a = run(&ps, &x, |v| Ok(amm_forward(v, &bs, 2)?.0));
    let b = run(&ps, &px, |v| Ok(amm_forward(v, &bs, 2)?.0));
    for (dst, &src) in perm.iter().enumerate() {
        assert!(max_abs_diff(&b[dst * per..(dst + 1) * per], &a[src * per..(src + 1) * per]) < 1e-12);
    }
}

#[test]
fn fam_is_identity_with_zero_output_projection() {
    let mut r = rng(13);
    let mut ps = ParamStore::<f64>::new();
    let fam = Fam::new(&mut ps, "fam", H, W, C, 5, 7, 6, &mut r);
    let f_s = Tensor::<f64>::randn(&[2, H, W, C], &mut r);
    let prior = Tensor::<f64>::uniform(&[2, 5, 7], 0.0, 1.0, &mut r);
    let g = Graph::eval(&ps);
    let out = fam.forward(g.constant(f_s.clone()), g.constant(prior)).unwrap();
    assert_eq!(out.shape(), f_s.shape().to_vec());
    assert_eq!(out.value().data(), f_s.data());
}

#[test]
fn grad_through_two_blocks() {
    let mut ps = ParamStore::<f64>::new();
    let bs = blocks(&mut ps, 2, 14);
    randomise(&mut ps, 15);
    let x = Tensor::<f64>::randn(&[2, H, W, C], &mut rng(16));
    let wts = Tensor::<f64>::randn(&[2, H, W, C], &mut rng(17));
    let rep = grad_check(&mut ps, &GradCheckConfig { max_entries_per_param: 4, ..Default::default() }, |g| {
        let (o, _) = amm_forward(g.constant(x.clone()), &bs, 2)?;
        Ok(o.mul(g.constant(wts.clone()))?.sum())
    })
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn fam_with_zero_queries_mixes_frames_by_alignment() {
    let (l, a) = (5, 7);
    let mut r = rng(18);
    let mut ps = ParamStore::<f64>::new();
    let fam = Fam::new(&mut ps, "fam", H, W, C, l, a, 6, &mut r);
    randomise(&mut ps, 19);
    // with q = 0 every content logit vanishes and only the alignment bias is left
    fam.q.zero_init(&mut ps);
    let f_s = Tensor::<f64>::randn(&[1, H, W, C], &mut r);
    let prior = Tensor::<f64>::uniform(&[1, l, a], 0.0, 1.0, &mut r);
    let g = Graph::eval(&ps);
    let got = fam.forward(g.constant(f_s.clone()), g.constant(prior.clone())).unwrap().value().data().to_vec();

    let (wv, wo) = (weights(&ps, &fam.v), weights(&ps, &fam.o));
    let vals: Vec<Vec<f64>> = (0..l).map(|i| affine(&prior.data()[i * a..(i + 1) * a], &wv)).collect();
    let bias = alignment_bias::<f64>(H, W, l);
    let mut want = Vec::new();
    for p in 0..H * W {
        let logits = &bias.data()[p * l..(p + 1) * l];
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mix: Vec<f64> = (0..6).map(|d| (0..l).map(|i| e[i] / z * vals[i][d]).sum()).collect();
        let delta = affine(&mix, &wo);
        want.extend(f_s.data()[p * C..(p + 1) * C].iter().zip(&delta).map(|(x, y)| x + y));
    }
    assert!(max_abs_diff(&got, &want) < 1e-10);
}

#[test]
fn alignment_bias_peaks_under_each_column() {
    let (w, l) = (64, 26);
    let b = alignment_bias::<f64>(2, w, l);
    assert_eq!(b.shape(), &[1, 2 * w, l]);
    for x in 0..w {
        let row = &b.data()[x * l..(x + 1) * l];
        let best = (0..l).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
        assert_eq!(best, ((x as f64 + 0.5) * l as f64 / w as f64) as usize, "column {x}");
        assert!(row.iter().all(|v| *v <= 0.0));
    }
    // rows repeat down the image
    assert_eq!(&b.data()[..w * l], &b.data()[w * l..]);
}
