use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn gray_image(id: &str, w: usize, h: usize, values: &[u8], mask: Option<Vec<u8>>) -> SourceImage {
    let rgb = values.iter().flat_map(|&v| [v, v, v]).collect();
    SourceImage::new(id, w, h, rgb, mask).unwrap()
}

/// Between-class variance in the textbook form, straight from the histogram.
fn sigma_b(hist: &[u64; 256], t: usize) -> f64 {
    let n: f64 = hist.iter().map(|&c| c as f64).sum();
    let (mut w0, mut m0, mut w1, mut m1) = (0.0, 0.0, 0.0, 0.0);
    for (i, &c) in hist.iter().enumerate() {
        let p = c as f64 / n;
        if i <= t {
            w0 += p;
            m0 += i as f64 * p;
        } else {
            w1 += p;
            m1 += i as f64 * p;
        }
    }
    if w0 == 0.0 || w1 == 0.0 {
        return 0.0;
    }
    let (mu0, mu1) = (m0 / w0, m1 / w1);
    w0 * w1 * (mu0 - mu1) * (mu0 - mu1)
}

fn otsu_oracle(hist: &[u64; 256]) -> usize {
    let mut best = 0;
    for t in 0..256 {
        if sigma_b(hist, t) > sigma_b(hist, best) {
            best = t;
        }
    }
    best
}

/// The threshold either equals the oracle's or partitions equally well.
fn assert_otsu_matches(hist: &[u64; 256]) {
    let t = otsu_threshold(hist).unwrap() as usize;
    let o = otsu_oracle(hist);
    let (a, b) = (sigma_b(hist, t), sigma_b(hist, o));
    assert!(t == o || (a - b).abs() <= 1e-12 * b.max(1e-300), "t={t} oracle={o} {a} vs {b}");
}

#[test]
fn hsv_examples() {
    let white = rgb_to_hsv([255, 255, 255]);
    assert_eq!((white.v, white.s), (1.0, 0.0));
    let black = rgb_to_hsv([0, 0, 0]);
    assert_eq!((black.v, black.s), (0.0, 0.0));
    let red = rgb_to_hsv([255, 0, 0]);
    assert_eq!((red.h, red.s, red.v), (0.0, 1.0, 1.0));
    let g = rgb_to_hsv([0, 255, 0]);
    assert_abs_diff_eq!(g.h, 120.0, epsilon = 1e-12);
    let b = rgb_to_hsv([0, 0, 255]);
    assert_abs_diff_eq!(b.h, 240.0, epsilon = 1e-12);
    let m = rgb_to_hsv([255, 0, 128]);
    assert!(m.h >= 300.0 && m.h < 360.0);
}

#[test]
fn otsu_examples() {
    let mut h = [0u64; 256];
    h[50] = 500;
    h[200] = 500;
    let t = otsu_threshold(&h).unwrap();
    assert!((50..200).contains(&t));
    assert_otsu_matches(&h);

    let mut h = [0u64; 256];
    h[100] = 10;
    h[101] = 10;
    assert_eq!(otsu_threshold(&h).unwrap(), 100);
    assert_eq!(otsu_oracle(&h), 100);

    let mut h = [0u64; 256];
    h[77] = 1000;
    assert!(matches!(otsu_threshold(&h), Err(PreprocessError::Degenerate(_))));
    assert!(otsu_threshold(&[0u64; 256]).is_err());
}

fn disk_image(size: usize, cx: f64, cy: f64, r: f64) -> (SourceImage, Vec<bool>) {
    let mut truth = vec![false; size * size];
    let mut v = vec![245u8; size * size];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for y in 0..size {
        for x in 0..size {
            let inside = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= r * r;
            truth[y * size + x] = inside;
            let base: i32 = if inside { 90 } else { 240 };
            v[y * size + x] = (base + rng.gen_range(-12..=12)) as u8;
        }
    }
    (gray_image("disk", size, size, &v, None), truth)
}

#[test]
fn foreground_recovers_disk() {
    let (img, truth) = disk_image(96, 40.0, 52.0, 25.0);
    let (mask, _) = foreground_mask(&img).unwrap();
    let disagree = mask.iter().zip(&truth).filter(|(a, b)| a != b).count();
    assert!((disagree as f64) < 0.01 * truth.len() as f64);

    let white = gray_image("w", 4, 4, &[255; 16], None);
    assert!(matches!(foreground_mask(&white), Err(PreprocessError::Degenerate(_))));
}

#[test]
fn inverting_flips_the_mask() {
    let (img, _) = disk_image(64, 30.0, 30.0, 18.0);
    let inv = SourceImage {
        rgb: img.rgb.iter().map(|&v| 255 - v).collect(),
        ..img.clone()
    };
    let (a, _) = foreground_mask(&img).unwrap();
    let (b, _) = foreground_mask(&inv).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x != y));
}

fn tissue_values(w: usize, h: usize) -> Vec<u8> {
    // dark tissue with a sparse grid of bright pixels so Otsu has two levels
    (0..w * h).map(|i| if i % 97 == 0 { 250 } else { 100 }).collect()
}

#[test]
fn fully_annotated_image_gives_four_bubble_patches() {
    let (w, h) = (448, 448);
    let img = gray_image("a", w, h, &tissue_values(w, h), Some(vec![MASK_AIR_BUBBLES; w * h]));
    let cfg = PatchConfig::default();
    let patches = extract_patches(&img, &cfg).unwrap();
    assert_eq!(patches.len(), 4);
    assert!(patches.iter().all(|p| p.label == LABEL_AIR_BUBBLES && p.pixels.len() == 224 * 224 * 3));
}

#[test]
fn overlap_threshold_boundary() {
    let (p, w) = (10, 20);
    let mut mask = vec![MASK_BACKGROUND; w * p];
    // cell 0: 69 annotated pixels, cell 1: 70
    for (cell, count) in [(0, 69), (1, 70)] {
        for k in 0..count {
            let (y, x) = (k / p, k % p);
            mask[y * w + cell * p + x] = MASK_ARTIFACT_FREE;
        }
    }
    let img = gray_image("b", w, p, &tissue_values(w, p), Some(mask));
    let cfg = PatchConfig {
        patch_size: p,
        ..PatchConfig::default()
    };
    let patches = extract_patches(&img, &cfg).unwrap();
    assert_eq!(patches.len(), 1);
    assert_eq!((patches[0].grid_x, patches[0].label), (1, LABEL_ARTIFACT_FREE));
    assert_eq!(patches[0].overlap_fraction, 0.7);
}

#[test]
fn extraction_edge_cases() {
    let img = gray_image("c", 20, 20, &tissue_values(20, 20), None);
    assert!(matches!(
        extract_patches(&img, &PatchConfig { patch_size: 5, ..Default::default() }),
        Err(PreprocessError::Contract(_))
    ));
    let img = gray_image("c", 20, 20, &tissue_values(20, 20), Some(vec![1; 400]));
    assert!(extract_patches(&img, &PatchConfig { patch_size: 21, ..Default::default() }).is_err());
    // 25 px wide: the partial column is dropped
    let img = gray_image("d", 25, 10, &tissue_values(25, 10), Some(vec![1; 250]));
    let cfg = PatchConfig { patch_size: 10, ..Default::default() };
    let got: Vec<_> = extract_patches(&img, &cfg).unwrap().iter().map(|p| p.grid_x).collect();
    assert_eq!(got, vec![0, 1]);
    // straddling both classes at a low threshold: discarded
    let mask: Vec<u8> = (0..100).map(|i| if i % 10 < 5 { 1 } else { 2 }).collect();
    let img = gray_image("e", 10, 10, &tissue_values(10, 10), Some(mask));
    let cfg = PatchConfig { patch_size: 10, overlap_threshold: 0.4, foreground_threshold: 0.0 };
    assert!(extract_patches(&img, &cfg).unwrap().is_empty());
    // too little tissue
    let v: Vec<u8> = (0..100).map(|i| if i < 50 { 100 } else { 250 }).collect();
    let img = gray_image("f", 10, 10, &v, Some(vec![1; 100]));
    let cfg = PatchConfig { patch_size: 10, ..Default::default() };
    assert!(extract_patches(&img, &cfg).unwrap().is_empty());
}

/// Brute-force reference: counts pixels per cell directly from coordinates.
fn brute_force(img: &SourceImage, cfg: &PatchConfig) -> Vec<(usize, usize, usize)> {
    let (fg, _) = foreground_mask(img).unwrap();
    let mask = img.mask.as_ref().unwrap();
    let p = cfg.patch_size;
    let mut out = Vec::new();
    for gy in 0..img.height / p {
        for gx in 0..img.width / p {
            let cell = |code: u8| {
                (0..p * p)
                    .filter(|k| mask[(gy * p + k / p) * img.width + gx * p + k % p] == code)
                    .count()
            };
            let tissue = (0..p * p).filter(|k| fg[(gy * p + k / p) * img.width + gx * p + k % p]).count();
            let a = cell(1) as f64 / (p * p) as f64 >= cfg.overlap_threshold;
            let b = cell(2) as f64 / (p * p) as f64 >= cfg.overlap_threshold;
            if a != b && tissue as f64 / (p * p) as f64 >= cfg.foreground_threshold {
                out.push((gy, gx, if b { 1 } else { 0 }));
            }
        }
    }
    out
}

#[test]
fn random_rectangles_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 672;
    for trial in 0..3 {
        let mut mask = vec![0u8; n * n];
        let mut v = vec![235u8; n * n];
        for _ in 0..12 {
            let (x0, y0) = (rng.gen_range(0..n - 50), rng.gen_range(0..n - 50));
            let (w, h) = (rng.gen_range(40..300), rng.gen_range(40..300));
            let code = rng.gen_range(1..=2);
            for y in y0..(y0 + h).min(n) {
                for x in x0..(x0 + w).min(n) {
                    mask[y * n + x] = code;
                    v[y * n + x] = rng.gen_range(80..140);
                }
            }
        }
        let img = gray_image(&format!("r{trial}"), n, n, &v, Some(mask.clone()));
        for p in [56, 96, 224] {
            let cfg = PatchConfig { patch_size: p, overlap_threshold: 0.7, foreground_threshold: 0.5 };
            let got: Vec<_> = extract_patches(&img, &cfg)
                .unwrap()
                .iter()
                .map(|r| (r.grid_y, r.grid_x, r.label))
                .collect();
            assert_eq!(got, brute_force(&img, &cfg));
        }
        // the grid never emits overlapping rectangles
        let cfg = PatchConfig { patch_size: 56, overlap_threshold: 0.7, foreground_threshold: 0.5 };
        let recs = extract_patches(&img, &cfg).unwrap();
        for (i, a) in recs.iter().enumerate() {
            for b in &recs[i + 1..] {
                assert!(a.x + a.size <= b.x || b.x + b.size <= a.x || a.y + a.size <= b.y || b.y + b.size <= a.y);
            }
        }
    }
}

#[test]
fn normalization_examples() {
    let px: Vec<u8> = (0..=255).flat_map(|v| [v, 255 - v, v / 2]).collect();
    let unit: Vec<f64> = Normalization::identity().apply(&px).unwrap();
    assert!(unit.iter().all(|v| (0.0..=1.0).contains(v)));

    let norm = Normalization { mean: [0.2, 0.4, 0.6], std: [0.5, 0.5, 0.5] };
    let flat: Vec<u8> = [51u8, 102, 153].repeat(16);
    let z: Vec<f64> = norm.apply(&flat).unwrap();
    assert!(z.iter().all(|v| v.abs() < 1e-12));

    let d = Normalization::default();
    let back = d.invert(&d.apply::<f64>(&px).unwrap());
    for (b, &p) in back.iter().zip(&px) {
        assert!((b - p as f64 / 255.0).abs() < 1e-6);
    }
    let bad = Normalization { mean: [0.0; 3], std: [1.0, 0.0, 1.0] };
    assert!(matches!(bad.apply::<f32>(&px), Err(PreprocessError::Parameter(_))));

    let t = batch_tensor::<f32>(&[&flat[..12], &flat[12..24]], 2, &norm).unwrap();
    assert_eq!(t.shape(), &[2, 2, 2, 3]);
}

#[test]
fn augmentation_properties() {
    let size = 5;
    let img: Vec<u8> = (0..size * size * 3).map(|i| i as u8).collect();
    assert_eq!(hflip(&hflip(&img, size, 3), size, 3), img);
    assert_eq!(vflip(&vflip(&img, size, 3), size, 3), img);
    let mut r = img.clone();
    for _ in 0..4 {
        r = rotate90(&r, size, 3);
    }
    assert_eq!(r, img);
    // corner pixel (4, 0) moves to (0, 0) under a counter-clockwise turn
    assert_eq!(&rotate90(&img, size, 3)[..3], &img[12..15]);

    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20).map(|_| augment(&img, size, &mut rng)).collect::<Vec<_>>()
    };
    assert_eq!(run(9), run(9));
    let mut seen = std::collections::HashSet::new();
    for out in run(10).into_iter().chain(run(11)) {
        let mut a: Vec<[u8; 3]> = out.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let mut b: Vec<[u8; 3]> = img.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        seen.insert(out);
    }
    assert!(seen.len() > 3);
}

#[test]
fn augmentation_draws_are_balanced() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 20_000;
    let (mut h, mut v, mut k) = (0, 0, [0usize; 4]);
    for _ in 0..n {
        let a = Augmentation::sample(&mut rng);
        h += a.hflip as usize;
        v += a.vflip as usize;
        k[a.quarter_turns as usize] += 1;
    }
    assert!((h as f64 / n as f64 - 0.5).abs() < 0.02);
    assert!((v as f64 / n as f64 - 0.5).abs() < 0.02);
    assert!(k.iter().all(|&c| (c as f64 / n as f64 - 0.25).abs() < 0.02));
}

#[test]
fn dataset_round_trip_and_leakage() {
    let dir = tempfile::tempdir().unwrap();
    let (w, h) = (40, 20);
    let mut mask = vec![MASK_ARTIFACT_FREE; w * h];
    for y in 0..h {
        for x in 20..w {
            mask[y * w + x] = MASK_AIR_BUBBLES;
        }
    }
    let cfg = PatchConfig { patch_size: 20, ..Default::default() };
    let a = extract_patches(&gray_image("a", w, h, &tissue_values(w, h), Some(mask.clone())), &cfg).unwrap();
    let b = extract_patches(&gray_image("b", w, h, &tissue_values(w, h), Some(mask)), &cfg).unwrap();
    let mut records: Vec<(Split, PatchRecord)> = b.iter().map(|r| (Split::Val, r.clone())).collect();
    records.extend(a.iter().map(|r| (Split::Train, r.clone())));
    let rows = write_dataset(dir.path(), &records).unwrap();
    assert_eq!(rows, read_manifest(dir.path()).unwrap());
    assert_eq!(rows[0].split, Split::Train);
    assert!(dir.path().join("train/air_bubbles/patch_a_0_1.png").exists());
    assert!(dir.path().join("val/artifact_free/patch_b_0_0.png").exists());

    let train = read_split(dir.path(), Split::Train).unwrap();
    assert_eq!(train.len(), 2);
    assert_eq!(train.labels, vec![0, 1]);
    assert_eq!(train.pixels[0], a[0].pixels);
    assert_eq!(label_counts(train.labels.iter().copied()), [1, 1]);
    assert_eq!(
        label_counts(rows.iter().map(|r| r.label)),
        label_counts(records.iter().map(|(_, r)| r.label))
    );

    records.push((Split::Test, a[0].clone()));
    assert!(matches!(
        write_dataset(dir.path(), &records),
        Err(PreprocessError::Leakage { .. })
    ));
}

#[test]
fn split_assignment_depends_on_id_only() {
    let ids: Vec<String> = (0..2000).map(|i| format!("src{i}")).collect();
    let a: Vec<Split> = ids.iter().map(|id| assign_split(id, 5, 0.6, 0.2)).collect();
    let b: Vec<Split> = ids.iter().rev().map(|id| assign_split(id, 5, 0.6, 0.2)).collect();
    assert_eq!(a, b.into_iter().rev().collect::<Vec<_>>());
    let train = a.iter().filter(|&&s| s == Split::Train).count() as f64 / 2000.0;
    assert!((train - 0.6).abs() < 0.05);
}

proptest! {
    #[test]
    fn otsu_matches_exhaustive_search(
        bins in proptest::collection::vec((0usize..256, 1u64..5000), 2..40)
    ) {
        let mut h = [0u64; 256];
        for (b, c) in bins {
            h[b] += c;
        }
        prop_assume!(h.iter().filter(|&&c| c > 0).count() >= 2);
        assert_otsu_matches(&h);
    }

    #[test]
    fn extraction_independent_of_mask_order(seed in 0u64..1000) {
        // relabeling the annotation codes swaps labels and nothing else
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 48;
        let mask: Vec<u8> = (0..n * n).map(|_| rng.gen_range(0..3)).collect();
        let mut mask = mask;
        for y in 0..n / 2 {
            for x in 0..n / 2 {
                mask[y * n + x] = 1;
            }
        }
        let img = gray_image("p", n, n, &tissue_values(n, n), Some(mask.clone()));
        let swapped: Vec<u8> = mask.iter().map(|&c| match c { 1 => 2, 2 => 1, o => o }).collect();
        let img2 = SourceImage { mask: Some(swapped), ..img.clone() };
        let cfg = PatchConfig { patch_size: 8, overlap_threshold: 0.6, foreground_threshold: 0.5 };
        let a = extract_patches(&img, &cfg).unwrap();
        let b = extract_patches(&img2, &cfg).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!((x.grid_y, x.grid_x, 1 - x.label), (y.grid_y, y.grid_x, y.label));
        }
        prop_assert_eq!(a, extract_patches(&img, &cfg).unwrap());
    }
}
