use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pean::eval::{linear_cka, Activations};
use pean::nn::{Graph, ParamStore, Tensor};
use pean::srnet::{ModelConfig, PeanModel};
use pean::SEQ_LEN;
use pean_bench::{lr_batch, prior, rng};

fn sr_forward(c: &mut Criterion) {
    let model = PeanModel::new(ModelConfig::default(), 0);
    let mut g = c.benchmark_group("sr_forward");
    g.sample_size(10);
    for b in [1usize, 16] {
        let (lr, p) = (lr_batch(b, 1), prior(b, 2));
        g.bench_with_input(BenchmarkId::from_parameter(b), &b, |bench, _| {
            bench.iter(|| {
                let graph = Graph::eval(&model.store);
                let f = model.forward(graph.constant(lr.clone()), graph.constant(p.clone())).unwrap();
                f.sr.value()
            })
        });
    }
    g.finish();
}

fn train_backward(c: &mut Criterion) {
    let model = PeanModel::new(ModelConfig::default(), 0);
    let (lr, p) = (lr_batch(16, 1), prior(16, 2));
    let labels: Vec<Vec<usize>> = (0..16).map(|i| vec![1 + i % 30, 2, 3 + i % 7]).collect();
    let mut g = c.benchmark_group("train_backward");
    g.sample_size(10);
    g.bench_function("batch_16", |bench| {
        bench.iter(|| {
            let graph = Graph::train(&model.store);
            let f = model.forward(graph.constant(lr.clone()), graph.constant(p.clone())).unwrap();
            let txt = model.arm_logits(f.amm_out).unwrap().log_softmax().ctc_loss(&labels).unwrap();
            graph.backward(f.sr.mean().add(txt).unwrap()).unwrap().params().len()
        })
    });
    g.finish();
}

fn ctc(c: &mut Criterion) {
    let classes = pean::charset::NUM_CLASSES;
    let x = Tensor::<f32>::randn(&[16, SEQ_LEN, classes], &mut rng(3));
    let labels: Vec<Vec<usize>> = (0..16).map(|i| (0..(3 + i % 8)).map(|k| 1 + (i * 7 + k) % (classes - 1)).collect()).collect();
    let empty = ParamStore::<f32>::new();
    c.bench_function("ctc_loss_and_grad_b16", |bench| {
        bench.iter(|| {
            let graph = Graph::train(&empty);
            let v = graph.constant(x.clone());
            let loss = v.log_softmax().ctc_loss(&labels).unwrap();
            graph.backward(loss).unwrap();
        })
    });
}

fn cka(c: &mut Criterion) {
    let mut g = c.benchmark_group("linear_cka");
    for (n, p) in [(150usize, 16usize), (256, 1024)] {
        let x = Activations::new(n, p, Tensor::<f64>::randn(&[n * p], &mut rng(4)).into_data()).unwrap();
        let y = Activations::new(n, p, Tensor::<f64>::randn(&[n * p], &mut rng(5)).into_data()).unwrap();
        g.bench_with_input(BenchmarkId::new("n_p", format!("{n}x{p}")), &n, |bench, _| bench.iter(|| linear_cka(&x, &y).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, sr_forward, train_backward, ctc, cka);
criterion_main!(benches);
