use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vitkd::nn::{Cnn, CnnConfig, Mode, Model, Vit, VitConfig};
use vitkd::par::{set_execution, Execution};
use vitkd::tensor::no_grad;
use vitkd::Tensor;

fn random(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    Tensor::from_f64(&v, shape).unwrap()
}

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn compare(c: &mut Criterion, group: &str, mut f: impl FnMut()) {
    let mut g = c.benchmark_group(group);
    for (name, mode) in MODES {
        set_execution(mode);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(&mut f));
    }
    g.finish();
    set_execution(Execution::Parallel);
}

fn matmul(c: &mut Criterion) {
    let (a, b) = (random(1, &[256, 256]), random(2, &[256, 256]));
    compare(c, "matmul_256", || {
        black_box(a.matmul(&b).unwrap());
    });
}

fn bmm(c: &mut Criterion) {
    let (a, b) = (random(3, &[64, 65, 16]), random(4, &[64, 16, 65]));
    compare(c, "bmm_64x65x16", || {
        black_box(a.bmm(&b).unwrap());
    });
}

fn conv(c: &mut Criterion) {
    let x = random(5, &[32, 16, 32, 32]);
    let w = random(6, &[32, 16, 3, 3]);
    compare(c, "conv2d_32x16x32x32", || {
        black_box(x.conv2d(&w, None, 1, 1).unwrap());
    });
}

fn conv_backward(c: &mut Criterion) {
    let x = random(7, &[16, 8, 32, 32]).requires_grad_(true);
    let w = random(8, &[16, 8, 3, 3]).requires_grad_(true);
    compare(c, "conv2d_backward", || {
        x.conv2d(&w, None, 1, 1).unwrap().sum().backward().unwrap();
        x.zero_grad();
        w.zero_grad();
    });
}

fn vit_forward(c: &mut Criterion) {
    let cfg = VitConfig {
        image_size: 32,
        cell_size: 8,
        embed_dim: 32,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2.0,
        num_classes: 2,
        dropout_p: 0.0,
        channels: 3,
    };
    let mut vit = Vit::<f32>::new(cfg, 0).unwrap();
    vit.set_mode(Mode::Eval);
    let x = random(9, &[64, 32, 32, 3]);
    compare(c, "vit_forward_b64", || {
        black_box(no_grad(|| vit.forward(&x).unwrap()));
    });
}

fn cnn_forward(c: &mut Criterion) {
    let mut cnn = Cnn::<f32>::new(CnnConfig::small(2), 0).unwrap();
    cnn.set_mode(Mode::Eval);
    let size = cnn.config().image_size;
    let x = random(10, &[16, size, size, 3]);
    compare(c, "cnn_forward_b16", || {
        black_box(no_grad(|| cnn.forward(&x).unwrap()));
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = matmul, bmm, conv, conv_backward, vit_forward, cnn_forward
}
criterion_main!(benches);
