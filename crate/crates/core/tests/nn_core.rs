use pean::nn::ops::{mish, swish};
use pean::nn::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check<F>(ps: &mut ParamStore<f64>, f: F)
where
    F: for<'g> Fn(&'g Graph<'g, f64>) -> pean::Result<Var<'g, f64>>,
{
    let rep = grad_check(ps, &GradCheckConfig::default(), f).unwrap();
    assert!(rep.passed, "{rep:?}");
    assert!(rep.checked > 0);
}

/// Fixed random projection so losses depend on every output coordinate.
fn probe<'g>(y: Var<'g, f64>, seed: u64) -> pean::Result<Var<'g, f64>> {
    let w = Tensor::randn(&y.shape(), &mut rng(seed));
    Ok(y.mul(y.graph().constant(w))?.sum())
}

fn mp(x: f64) -> f64 {
    // high-precision reference through the log1p form
    x * (x.max(0.0) + (-x.abs()).exp().ln_1p()).tanh()
}

#[test]
fn mish_swish_reference_values() {
    assert_eq!(mish(0.0f64), 0.0);
    assert_eq!(swish(0.0f64), 0.0);
    assert!((mish(20.0f64) - 20.0).abs() < 1e-6);
    assert!(mish(-20.0f64).abs() < 1e-6);
    assert!((mish(1.0f64) - 0.865_098_388_267_310_3).abs() < 1e-12);
    assert!((swish(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-12);
}

proptest! {
    #[test]
    fn mish_matches_reference(x in -60.0f64..60.0) {
        prop_assert!((mish(x) - mp(x)).abs() <= 1e-12 * (1.0 + x.abs()));
        prop_assert!(mish(x).is_finite() && swish(x).is_finite());
    }

    #[test]
    fn shuffle_unshuffle_identity(h in 1usize..5, w in 1usize..5, c in 1usize..4, r in 1usize..4, seed in 0u64..1000) {
        let x = Tensor::<f64>::randn(&[2, h, w, c * r * r], &mut rng(seed));
        let y = pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(y.shape(), &[2, h * r, w * r, c]);
        prop_assert_eq!(pixel_unshuffle(&y, r).unwrap(), x.clone());
        let z = pixel_unshuffle(&Tensor::<f64>::randn(&[1, h * r, w * r, c], &mut rng(seed + 1)), r).unwrap();
        prop_assert_eq!(pixel_unshuffle(&pixel_shuffle(&z, r).unwrap(), r).unwrap(), z);
    }

    #[test]
    fn attention_rows_in_convex_hull(n in 1usize..6, m in 1usize..6, d in 1usize..5, dv in 1usize..5, seed in 0u64..1000) {
        let mut r = rng(seed);
        let q = Tensor::<f64>::randn(&[n, d], &mut r).scale(3.0);
        let k = Tensor::<f64>::randn(&[m, d], &mut r).scale(3.0);
        let v = Tensor::<f64>::randn(&[m, dv], &mut r);
        let o = attention(&q, &k, &v).unwrap();
        for j in 0..dv {
            let col: Vec<f64> = (0..m).map(|i| v.data()[i * dv + j]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                let x = o.data()[i * dv + j];
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn pixel_shuffle_layout_and_errors() {
    let x = Tensor::new(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = pixel_shuffle(&x, 2).unwrap();
    assert_eq!(y.shape(), &[1, 2, 2, 1]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
    let bad = Tensor::<f64>::zeros(&[1, 2, 2, 6]);
    assert!(pixel_shuffle(&bad, 2).is_err());
}

#[test]
fn pixel_shuffle_inverse_map_oracle() {
    let (h, w, c, r) = (3, 5, 2, 2);
    let x = Tensor::<f64>::randn(&[1, h, w, c * r * r], &mut rng(3));
    let y = pixel_shuffle(&x, r).unwrap();
    // invert out[y*r+dy, x*r+dx, c] = in[y, x, c*r*r + dy*r + dx] by explicit loops
    let mut back = vec![0.0; x.numel()];
    for yy in 0..h * r {
        for xx in 0..w * r {
            for ch in 0..c {
                let (sy, dy, sx, dx) = (yy / r, yy % r, xx / r, xx % r);
                let cin = ch * r * r + dy * r + dx;
                back[(sy * w + sx) * c * r * r + cin] = y.data()[(yy * w * r + xx) * c + ch];
            }
        }
    }
    assert_eq!(back, x.data());
}

#[test]
fn attention_examples() {
    let mut r = rng(1);
    let q = Tensor::<f64>::randn(&[1, 3], &mut r);
    let v = Tensor::<f64>::randn(&[1, 2], &mut r);
    let o = attention(&q, &Tensor::randn(&[1, 3], &mut r), &v).unwrap();
    assert_eq!(o.data(), v.data());

    let q = Tensor::<f64>::randn(&[4, 3], &mut r);
    let krow = Tensor::<f64>::randn(&[1, 3], &mut r);
    let k = Tensor::concat(&[&krow, &krow, &krow], 0).unwrap();
    let v = Tensor::<f64>::randn(&[3, 2], &mut r);
    let o = attention(&q, &k, &v).unwrap();
    for i in 0..4 {
        for j in 0..2 {
            let mean = (0..3).map(|t| v.data()[t * 2 + j]).sum::<f64>() / 3.0;
            assert!((o.data()[i * 2 + j] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_naive_loops() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let (n, d, dv) = (4, 3, 3);
        let q = Tensor::<f64>::randn(&[n, d], &mut r);
        let k = Tensor::<f64>::randn(&[n, d], &mut r);
        let v = Tensor::<f64>::randn(&[n, dv], &mut r);
        let o = attention(&q, &k, &v).unwrap();
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|t| q.data()[i * d + t] * k.data()[j * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dv {
                let want: f64 = (0..n).map(|j| e[j] / z * v.data()[j * dv + c]).sum();
                assert!((o.data()[i * dv + c] - want).abs() < 1e-6);
            }
        }
    }
    let q = Tensor::<f64>::zeros(&[2, 3]);
    assert!(attention(&q, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2, 1])).is_err());
    assert!(attention(&q, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3, 1])).is_err());
}

#[test]
fn grad_mish_of_linear() {
    let mut ps = ParamStore::<f64>::new();
    let w = ps.add("w", Tensor::randn(&[4, 4], &mut rng(0)));
    let x = Tensor::randn(&[3, 4], &mut rng(1));
    check(&mut ps, |g| Ok(g.constant(x.clone()).matmul(g.param(w)?)?.mish().mean()));
}

#[test]
fn grad_elementwise_and_broadcast() {
    let mut ps = ParamStore::<f64>::new();
    let a = ps.add("a", Tensor::uniform(&[2, 3, 4], 0.5, 2.0, &mut rng(2)));
    let b = ps.add("b", Tensor::uniform(&[4], 0.5, 2.0, &mut rng(3)));
    let c = ps.add("c", Tensor::uniform(&[2, 1, 4], -1.0, 1.0, &mut rng(4)));
    check(&mut ps, |g| {
        let (a, b, c) = (g.param(a)?, g.param(b)?, g.param(c)?);
        let y = a.div(b)?.add(c.tanh())?.mul(a.sqrt())?.sub(b.ln())?;
        let y = Var::concat(&[y.swish(), y.sigmoid().exp(), y.softplus().square()], 2)?;
        let y = y.permute(&[1, 0, 2])?.narrow(2, 1, 9)?.sum_axis(0, false)?;
        probe(y.softmax().add(y.log_softmax())?.abs(), 9)
    });
}

#[test]
fn grad_matmul_transposes() {
    let mut ps = ParamStore::<f64>::new();
    let a = ps.add("a", Tensor::randn(&[2, 3, 4], &mut rng(5)));
    let b = ps.add("b", Tensor::randn(&[2, 3, 5], &mut rng(6)));
    let w = ps.add("w", Tensor::randn(&[5, 3], &mut rng(7)));
    check(&mut ps, |g| {
        let (a, b, w) = (g.param(a)?, g.param(b)?, g.param(w)?);
        let ab = a.matmul_t(b, true, false)?; // [2,4,5]
        let y = ab.matmul(w)?; // [2,4,3]
        let z = y.matmul(a)?; // [2,4,4]
        let u = b.matmul(w)?; // [2,3,3]
        let v = z.matmul_t(a, true, true)?; // [2,4,3]
        probe(v.matmul_t(u, false, true)?, 1)
    });
}

#[test]
fn grad_attention() {
    let mut ps = ParamStore::<f64>::new();
    let q = ps.add("q", Tensor::randn(&[2, 4, 3], &mut rng(8)));
    let k = ps.add("k", Tensor::randn(&[2, 5, 3], &mut rng(9)));
    let v = ps.add("v", Tensor::randn(&[2, 5, 2], &mut rng(10)));
    check(&mut ps, |g| probe(Var::attention(g.param(q)?, g.param(k)?, g.param(v)?)?, 3));
}

#[test]
fn grad_conv_pool_shuffle() {
    let mut r = rng(11);
    let mut ps = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut ps, "c", 2, 4, 3, true, &mut r);
    let conv1 = Conv2d::new(&mut ps, "c1", 1, 2, 1, true, &mut r);
    let x = Tensor::randn(&[2, 4, 6, 2], &mut r);
    check(&mut ps, |g| {
        let y = conv.forward(g.constant(x.clone()))?; // [2,4,6,4]
        let y = y.pixel_shuffle(2)?; // [2,8,12,1]
        let y = conv1.forward(y)?.max_pool2d(2, 3)?; // [2,4,4,2]
        let y = y.pixel_unshuffle(2)?.adaptive_avg_pool(2, 3)?;
        probe(y, 4)
    });
}

#[test]
fn grad_conv1d_linear() {
    let mut r = rng(12);
    let mut ps = ParamStore::<f64>::new();
    let c = Conv1d::new(&mut ps, "c", 3, 2, 3, true, &mut r);
    let l = Linear::new(&mut ps, "l", 2, 2, true, &mut r);
    let x = Tensor::randn(&[2, 5, 3], &mut r);
    check(&mut ps, |g| probe(l.forward(c.forward(g.constant(x.clone()))?)?.mish(), 5));
}

#[test]
fn grad_batch_norm_train_and_eval() {
    let mut r = rng(13);
    let mut ps = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut ps, "bn", 3);
    ps.get_mut(bn.gamma).value = Tensor::uniform(&[3], 0.5, 1.5, &mut r);
    ps.get_mut(bn.beta).value = Tensor::randn(&[3], &mut r);
    ps.get_mut(bn.running_mean).value = Tensor::randn(&[3], &mut r);
    ps.get_mut(bn.running_var).value = Tensor::uniform(&[3], 0.5, 2.0, &mut r);
    let x = Tensor::randn(&[4, 2, 3], &mut r);
    check(&mut ps, |g| probe(bn.forward(g.constant(x.clone()))?, 6));
    let rep = grad_check(
        &mut ps,
        &GradCheckConfig {
            mode: Mode::Eval,
            ..Default::default()
        },
        |g| probe(bn.forward(g.constant(x.clone()))?, 6),
    )
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn grad_batch_norm_input() {
    let mut r = rng(14);
    let mut ps = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut ps, "bn", 2);
    let x = ps.add("x", Tensor::randn(&[5, 2], &mut r));
    check(&mut ps, |g| probe(bn.forward(g.param(x)?)?, 7));
}

#[test]
fn grad_layer_norm() {
    let mut r = rng(15);
    let mut ps = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut ps, "ln", 4);
    ps.get_mut(ln.gamma).value = Tensor::uniform(&[4], 0.5, 1.5, &mut r);
    let x = ps.add("x", Tensor::randn(&[3, 4], &mut r));
    check(&mut ps, |g| probe(ln.forward(g.param(x)?)?, 8));
}

#[test]
fn grad_bilstm() {
    let mut r = rng(16);
    let mut ps = ParamStore::<f64>::new();
    let lstm = BiLstm::new(&mut ps, "lstm", 2, 2, 2, &mut r);
    let x = Tensor::randn(&[2, 3, 2], &mut r);
    check(&mut ps, |g| probe(lstm.forward(g.constant(x.clone()))?, 9));
}

#[test]
fn batch_norm_eval_is_deterministic_affine() {
    let mut r = rng(17);
    let mut ps = ParamStore::<f32>::new();
    let bn = BatchNorm::new(&mut ps, "bn", 3);
    ps.get_mut(bn.running_mean).value = Tensor::randn(&[3], &mut r);
    let x = Tensor::<f32>::randn(&[4, 3], &mut r);
    let run = || {
        let g = Graph::eval(&ps);
        (*bn.forward(g.constant(x.clone())).unwrap().value()).clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.data(), b.data());
    // affine: f(x) - f(0) is linear in x per channel
    let g = Graph::eval(&ps);
    let y2 = bn.forward(g.constant(x.scale(2.0))).unwrap().value();
    let y0 = bn.forward(g.constant(Tensor::zeros(&[4, 3]))).unwrap().value();
    for i in 0..12 {
        let lin = 2.0 * (a.data()[i] - y0.data()[i]);
        assert!((y2.data()[i] - y0.data()[i] - lin).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_train_updates_running_stats() {
    let mut ps = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut ps, "bn", 1);
    let x = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let updates = {
        let g = Graph::train(&ps);
        bn.forward(g.constant(x)).unwrap();
        g.take_buffer_updates()
    };
    ps.apply_buffer_updates(updates);
    assert!((ps.get(bn.running_mean).value.item() - 0.25).abs() < 1e-12);
    // unbiased variance of 1..4 is 5/3
    assert!((ps.get(bn.running_var).value.item() - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
}
