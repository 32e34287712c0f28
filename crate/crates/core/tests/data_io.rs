use resattn::data::{
    decode_cifar, encode_cifar, load_cifar_file, pixel_mean, subtract_mean, synthetic_dataset, CifarVariant, Dataset,
    Split, SyntheticConfig,
};

#[test]
fn synthetic_labels_are_uniform() {
    let d = synthetic_dataset(&SyntheticConfig::cifar_like(10_000, 4), Split::Train).unwrap();
    let mut counts = [0usize; 10];
    d.labels.iter().for_each(|&l| counts[l] += 1);
    for c in counts {
        assert!((c as f64 / 10_000.0 - 0.1).abs() <= 0.02, "{counts:?}");
    }
}

/// Nearest class mean: a linear classifier (`argmax_k m_k . x - |m_k|^2 / 2`).
fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let n = train.image(0).len();
    let mut centroids = vec![vec![0f64; n]; train.classes];
    let mut counts = vec![0usize; train.classes];
    for i in 0..train.len() {
        let l = train.labels[i];
        counts[l] += 1;
        centroids[l].iter_mut().zip(train.image(i)).for_each(|(c, &v)| *c += v as f64);
    }
    for (c, &k) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= k.max(1) as f64);
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = test.image(i);
            let score = |c: &Vec<f64>| {
                c.iter().zip(x).map(|(m, &v)| m * v as f64).sum::<f64>() - c.iter().map(|m| m * m).sum::<f64>() / 2.0
            };
            let best = (0..test.classes).max_by(|&a, &b| score(&centroids[a]).total_cmp(&score(&centroids[b]))).unwrap();
            best == test.labels[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn linear_baseline_separates_synthetic_classes() {
    let cfg = SyntheticConfig::cifar_like(2_000, 11);
    let train = synthetic_dataset(&cfg, Split::Train).unwrap();
    let test = synthetic_dataset(&SyntheticConfig { samples: 1_000, ..cfg }, Split::Test).unwrap();
    let acc = nearest_centroid_accuracy(&train, &test);
    println!("nearest-centroid accuracy {acc:.4}");
    assert!(acc > 0.9, "{acc}");
}

#[test]
fn mean_subtracted_set_has_zero_mean() {
    let d = synthetic_dataset(&SyntheticConfig::cifar_like(300, 2), Split::Train).unwrap();
    let mean = pixel_mean(&d).unwrap();
    let mut centred = d.clone();
    for i in 0..d.len() {
        let n = d.image(i).len();
        subtract_mean(d.image(i), &mean, &mut centred.pixels[i * n..(i + 1) * n]);
    }
    let m2 = pixel_mean(&centred).unwrap();
    assert!(m2.data().iter().all(|v| v.abs() < 1e-6), "{}", m2.data().iter().fold(0f32, |a, v| a.max(v.abs())));
}

#[test]
fn cifar_file_round_trip() {
    let d = synthetic_dataset(&SyntheticConfig::cifar_like(4, 8), Split::Test).unwrap();
    let bytes = encode_cifar(&d, CifarVariant::Cifar10).unwrap();
    assert_eq!(bytes.len(), 4 * 3073);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test_batch.bin");
    std::fs::write(&path, &bytes).unwrap();
    let back = load_cifar_file(&path, CifarVariant::Cifar10, Split::Test).unwrap();
    assert_eq!(back.labels, d.labels);
    assert_eq!(encode_cifar(&back, CifarVariant::Cifar10).unwrap(), bytes);
    assert_eq!(decode_cifar(&bytes, CifarVariant::Cifar10, Split::Test).unwrap(), back);
}
