use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::check_gradients;

fn toy_vit() -> VitConfig {
    VitConfig {
        image_size: 32,
        cell_size: 8,
        embed_dim: 64,
        num_layers: 4,
        num_heads: 4,
        mlp_ratio: 4.0,
        num_classes: 2,
        dropout_p: 0.2,
        channels: 3,
    }
}

fn micro_vit() -> VitConfig {
    VitConfig {
        image_size: 8,
        cell_size: 4,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2.0,
        num_classes: 2,
        dropout_p: 0.0,
        channels: 3,
    }
}

fn micro_cnn() -> CnnConfig {
    CnnConfig {
        image_size: 8,
        channels: 3,
        stages: vec![ConvStage::new(4, 3, Pool::Max), ConvStage::new(6, 3, Pool::Avg)],
        hidden: vec![8, 6],
        num_classes: 2,
        dropout_p: 0.0,
    }
}

fn random_batch<F: Scalar>(seed: u64, shape: &[usize]) -> Tensor<F> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_f64(&(0..n).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<_>>(), shape).unwrap()
}

fn cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Tensor<F> {
    let c = logits.shape()[1];
    let mut onehot = vec![0.0; labels.len() * c];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * c + y] = 1.0;
    }
    let y = Tensor::from_f64(&onehot, logits.shape()).unwrap();
    logits
        .log_softmax(1, F::one())
        .unwrap()
        .mul(&y)
        .unwrap()
        .sum()
        .scale(F::from_f64(-1.0 / labels.len() as f64))
}

#[test]
fn token_counts() {
    assert_eq!(VitConfig::tiny(2).token_count(), 197);
    assert_eq!(toy_vit().token_count(), 17);
    for cell in [1, 2, 4, 8, 16] {
        for grid in 1..6 {
            let cfg = VitConfig {
                image_size: cell * grid,
                cell_size: cell,
                ..toy_vit()
            };
            assert_eq!(cfg.token_count(), grid * grid + 1);
        }
    }
}

#[test]
fn patch_embed_shapes() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let pe = PatchEmbed::<f32>::new(&VitConfig::tiny(2), &mut r).unwrap();
    let img = Tensor::<f32>::zeros(&[224, 224, 3]);
    assert_eq!(pe.embed_image(&img).unwrap().shape(), &[197, 192]);

    let pe = PatchEmbed::<f32>::new(&toy_vit(), &mut r).unwrap();
    let img = Tensor::<f32>::zeros(&[32, 32, 3]);
    assert_eq!(pe.embed_image(&img).unwrap().shape(), &[17, 64]);
}

#[test]
fn indivisible_cell_size_is_a_config_error() {
    let cfg = VitConfig {
        image_size: 30,
        ..toy_vit()
    };
    assert!(matches!(Vit::<f32>::new(cfg, 0), Err(NnError::Config(_))));
    let cfg = VitConfig {
        num_heads: 3,
        ..toy_vit()
    };
    assert!(matches!(Vit::<f32>::new(cfg, 0), Err(NnError::Config(_))));
}

#[test]
fn swapping_two_cells_swaps_their_tokens() {
    let cfg = toy_vit();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let pe = PatchEmbed::<f64>::new(&cfg, &mut r).unwrap();
    pe.position.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let img = random_batch::<f64>(1, &[32, 32, 3]);

    // swap cell (0,1) with cell (2,3) pixel by pixel
    let mut swapped = img.to_vec();
    let (c, w) = (8, 32);
    let at = |gy: usize, gx: usize, y: usize, x: usize, ch: usize| ((gy * c + y) * w + gx * c + x) * 3 + ch;
    for y in 0..c {
        for x in 0..c {
            for ch in 0..3 {
                let (a, b) = (at(0, 1, y, x, ch), at(2, 3, y, x, ch));
                swapped.swap(a, b);
            }
        }
    }
    let swapped = Tensor::from_vec(swapped, &[32, 32, 3]).unwrap();
    let t0 = pe.embed_image(&img).unwrap().to_vec();
    let t1 = pe.embed_image(&swapped).unwrap().to_vec();
    let d = 64;
    let row = |t: &[f64], i: usize| t[i * d..(i + 1) * d].to_vec();
    // token index = 1 + grid_y * 4 + grid_x
    let (ia, ib) = (1 + 1, 1 + 2 * 4 + 3);
    assert_eq!(row(&t0, ia), row(&t1, ib));
    assert_eq!(row(&t0, ib), row(&t1, ia));
    for i in (0..17).filter(|&i| i != ia && i != ib) {
        assert_eq!(row(&t0, i), row(&t1, i));
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mha = MultiHeadAttention::<f64>::new(16, 4, &mut r).unwrap();
    let x = random_batch::<f64>(3, &[2, 5, 16]);
    let (out, w) = mha.forward_with_weights(&x).unwrap();
    assert_eq!(out.shape(), &[2, 5, 16]);
    assert_eq!(w.shape(), &[8, 5, 5]);
    for row in w.data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert!(matches!(
        MultiHeadAttention::<f64>::new(10, 4, &mut r),
        Err(NnError::Config(_))
    ));
}

fn set_identity(lin: &Linear<f64>, stacked: usize) {
    let (i, o) = (lin.weight.shape()[0], lin.weight.shape()[1]);
    let mut w = lin.weight.data_mut();
    w.iter_mut().for_each(|v| *v = 0.0);
    for r in 0..i {
        for k in 0..stacked {
            w[r * o + k * i + r] = 1.0;
        }
    }
    lin.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
}

#[test]
fn identity_attention_on_single_token_is_identity() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mha = MultiHeadAttention::<f64>::new(8, 2, &mut r).unwrap();
    set_identity(&mha.qkv, 3);
    set_identity(&mha.proj, 1);
    let x = random_batch::<f64>(7, &[3, 1, 8]);
    let y = mha.forward(&x).unwrap();
    for (a, b) in x.data().iter().zip(y.data().iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_gradient_wrt_tokens() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mha = MultiHeadAttention::<f64>::new(8, 2, &mut r).unwrap();
    // larger weights so the softmax is far from uniform
    for p in [mha.qkv.weight.clone(), mha.proj.weight.clone()].iter() {
        p.data_mut().iter_mut().for_each(|v| *v *= 25.0);
    }
    let x = random_batch::<f64>(9, &[2, 4, 8]).requires_grad_(true);
    let w = random_batch::<f64>(10, &[2, 4, 8]);
    let rep = check_gradients(
        std::slice::from_ref(&x),
        || mha.forward(&x).unwrap().mul(&w).unwrap().sum(),
        1e-6,
        1e-3,
        1e-9,
    );
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn vit_forward_shape_determinism_and_zero_head() {
    let mut vit = Vit::<f32>::new(toy_vit(), 11).unwrap();
    let x = random_batch::<f32>(12, &[4, 32, 32, 3]);
    vit.set_mode(Mode::Eval);
    let a = vit.forward(&x).unwrap();
    assert_eq!(a.shape(), &[4, 2]);
    let b = vit.forward(&x).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());

    vit.head.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
    vit.head.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let z = vit.forward(&x).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
    let p = z.softmax(1, 1.0).unwrap();
    assert!(p.data().iter().all(|&v| v == 0.5));

    let bad = Tensor::<f32>::zeros(&[1, 16, 16, 3]);
    assert!(matches!(vit.forward(&bad), Err(NnError::Shape(_))));
}

#[test]
fn train_mode_dropout_changes_logits() {
    let mut vit = Vit::<f32>::new(toy_vit(), 11).unwrap();
    let x = random_batch::<f32>(12, &[2, 32, 32, 3]);
    vit.set_mode(Mode::Train);
    let a = vit.forward(&x).unwrap().to_vec();
    let b = vit.forward(&x).unwrap().to_vec();
    assert_ne!(a, b);
    vit.reseed_dropout(99);
    let c = vit.forward(&x).unwrap().to_vec();
    vit.reseed_dropout(99);
    let d = vit.forward(&x).unwrap().to_vec();
    assert_eq!(c, d);
}

#[test]
fn cnn_forward_shape_and_zero_input() {
    let mut cnn = Cnn::<f32>::new(CnnConfig::small(2), 3).unwrap();
    cnn.set_mode(Mode::Eval);
    let x = random_batch::<f32>(1, &[4, 32, 32, 3]);
    assert_eq!(cnn.forward(&x).unwrap().shape(), &[4, 2]);
    let z = cnn.forward(&Tensor::zeros(&[4, 32, 32, 3])).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn cnn_first_layer_gradient() {
    let mut cnn = Cnn::<f64>::new(micro_cnn(), 21).unwrap();
    cnn.set_mode(Mode::Eval);
    let x = random_batch::<f64>(22, &[3, 8, 8, 3]);
    let first = cnn.parameters()[0].1.clone();
    let rep = check_gradients(
        &[first],
        || cross_entropy(&cnn.forward(&x).unwrap(), &[0, 1, 1]),
        1e-6,
        1e-3,
        1e-9,
    );
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn full_model_gradient_checks() {
    let mut vit = Vit::<f64>::new(micro_vit(), 31).unwrap();
    vit.set_mode(Mode::Eval);
    assert!(param_count(&vit) <= 10_000);
    let x = random_batch::<f64>(32, &[2, 8, 8, 3]);
    let params: Vec<_> = vit.parameters().into_iter().map(|(_, t)| t).collect();
    let rep = check_gradients(&params, || cross_entropy(&vit.forward(&x).unwrap(), &[1, 0]), 1e-6, 1e-2, 1e-8);
    assert!(rep.passed(), "vit {rep:?}");

    let mut cnn = Cnn::<f64>::new(micro_cnn(), 33).unwrap();
    cnn.set_mode(Mode::Eval);
    assert!(param_count(&cnn) <= 10_000);
    let params: Vec<_> = cnn.parameters().into_iter().map(|(_, t)| t).collect();
    let x = random_batch::<f64>(34, &[2, 8, 8, 3]);
    let rep = check_gradients(&params, || cross_entropy(&cnn.forward(&x).unwrap(), &[0, 1]), 1e-6, 1e-2, 1e-8);
    assert!(rep.passed(), "cnn {rep:?}");
}

#[test]
fn linear_layer_count() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let lin = Linear::<f32>::new(2, 3, &mut r);
    assert_eq!(lin.weight.numel() + lin.bias.numel(), 9);
}

/// Per-tensor enumeration of a ViT's parameter count.
fn enumerate_vit_params(c: &VitConfig) -> usize {
    let d = c.embed_dim;
    let h = (d as f64 * c.mlp_ratio) as usize;
    let cell = c.cell_size * c.cell_size * c.channels;
    let tokens = (c.image_size / c.cell_size).pow(2) + 1;
    let mut tensors = vec![cell * d, d, d, tokens * d];
    for _ in 0..c.num_layers {
        tensors.extend([d, d, d * 3 * d, 3 * d, d * d, d, d, d, d * h, h, h * d, d]);
    }
    tensors.extend([d, d, d * c.num_classes, c.num_classes]);
    tensors.iter().sum()
}

#[test]
fn parameter_counts() {
    let toy = toy_vit();
    let vit = Vit::<f32>::new(toy.clone(), 0).unwrap();
    assert_eq!(param_count(&vit), enumerate_vit_params(&toy));

    let tiny = Vit::<f32>::new(VitConfig::tiny(2), 0).unwrap();
    let n = param_count(&tiny) as f64;
    assert!((n - 5.52e6).abs() / 5.52e6 < 0.03, "{n}");
}

#[test]
fn parameter_names_unique() {
    let vit = Vit::<f32>::new(toy_vit(), 0).unwrap();
    let names: Vec<_> = vit.parameters().into_iter().map(|(n, _)| n).collect();
    let set: std::collections::HashSet<_> = names.iter().collect();
    assert_eq!(set.len(), names.len());
    let cnn = Cnn::<f32>::new(CnnConfig::small(2), 0).unwrap();
    let names: Vec<_> = cnn.parameters().into_iter().map(|(n, _)| n).collect();
    let set: std::collections::HashSet<_> = names.iter().collect();
    assert_eq!(set.len(), names.len());
}

#[test]
fn weights_round_trip_bitwise() {
    let mut vit = Vit::<f32>::new(toy_vit(), 41).unwrap();
    vit.set_mode(Mode::Eval);
    let x = random_batch::<f32>(42, &[3, 32, 32, 3]);
    let before = vit.forward(&x).unwrap().to_vec();
    let mut buf = Vec::new();
    save_weights(&vit, &mut buf).unwrap();

    let mut fresh = Vit::<f32>::new(toy_vit(), 999).unwrap();
    fresh.set_mode(Mode::Eval);
    load_weights(&fresh, &mut buf.as_slice()).unwrap();
    for ((_, a), (_, b)) in vit.parameters().iter().zip(fresh.parameters().iter()) {
        let (a, b) = (a.to_vec(), b.to_vec());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let after = fresh.forward(&x).unwrap().to_vec();
    assert!(before.iter().zip(&after).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn loading_student_into_teacher_fails_on_first_tensor() {
    let vit = Vit::<f32>::new(toy_vit(), 1).unwrap();
    let mut buf = Vec::new();
    save_weights(&vit, &mut buf).unwrap();
    let cnn = Cnn::<f32>::new(CnnConfig::small(2), 1).unwrap();
    let before = cnn.parameters()[0].1.to_vec();
    match load_weights(&cnn, &mut buf.as_slice()) {
        Err(LoadError::Shape { name, found_name, .. }) => {
            assert_eq!(name, "features.0.weight");
            assert_eq!(found_name, "patch_embed.proj.weight");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert_eq!(cnn.parameters()[0].1.to_vec(), before);
}

#[test]
fn corrupt_files_are_rejected_without_partial_load() {
    let vit = Vit::<f32>::new(toy_vit(), 1).unwrap();
    let mut buf = Vec::new();
    save_weights(&vit, &mut buf).unwrap();
    let target = Vit::<f32>::new(toy_vit(), 2).unwrap();
    let snapshot: Vec<Vec<f32>> = target.parameters().iter().map(|(_, t)| t.to_vec()).collect();
    let unchanged = |t: &Vit<f32>| {
        t.parameters()
            .iter()
            .zip(&snapshot)
            .all(|((_, p), s)| &p.to_vec() == s)
    };

    for byte in 0..4 {
        let mut bad = buf.clone();
        bad[byte] ^= 0x5a;
        assert!(matches!(load_weights(&target, &mut bad.as_slice()), Err(LoadError::BadMagic(_))));
    }
    for byte in 4..8 {
        let mut bad = buf.clone();
        bad[byte] ^= 0x01;
        assert!(matches!(
            load_weights(&target, &mut bad.as_slice()),
            Err(LoadError::UnsupportedVersion(_))
        ));
    }
    let truncated = &buf[..buf.len() - 100];
    assert!(matches!(load_weights(&target, &mut &truncated[..]), Err(LoadError::Truncated(_))));

    let mut flipped = buf.clone();
    let mid = buf.len() / 2;
    flipped[mid] ^= 0x10;
    assert!(load_weights(&target, &mut flipped.as_slice()).is_err());
    assert!(unchanged(&target));
}

#[test]
fn model_spec_builds_and_serializes() {
    let spec = ModelSpec::Cnn(CnnConfig::small(2));
    let m = spec.build::<f32>(0).unwrap();
    assert_eq!(m.spec(), spec);
    assert_eq!(m.num_classes(), 2);
}
