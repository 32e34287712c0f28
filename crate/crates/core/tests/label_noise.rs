use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resattn::train::{corrupt_labels, ConfusionMatrix};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const K: usize = 10;
const N: usize = 100_000;

fn corrupted(r: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let clean: Vec<usize> = (0..N).map(|i| i % K).collect();
    let q = ConfusionMatrix::uniform(K, r).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = corrupt_labels(&clean, &q, &mut rng).unwrap();
    (clean, noisy)
}

/// Pearson statistic of the full transition table against `Q`, with
/// `K (K - 1)` degrees of freedom, and its p-value.
fn chi_square(r: f64, clean: &[usize], noisy: &[usize]) -> (f64, f64) {
    let q = ConfusionMatrix::uniform(K, r).unwrap();
    let mut counts = vec![[0usize; K]; K];
    let mut rows = [0usize; K];
    for (&c, &n) in clean.iter().zip(noisy) {
        counts[c][n] += 1;
        rows[c] += 1;
    }
    let mut stat = 0.0;
    for y in 0..K {
        for j in 0..K {
            let e = rows[y] as f64 * q.row(y)[j];
            stat += (counts[y][j] as f64 - e).powi(2) / e;
        }
    }
    let dist = ChiSquared::new((K * (K - 1)) as f64).unwrap();
    (stat, 1.0 - dist.cdf(stat))
}

#[test]
fn empirical_confusion_matches_rows() {
    for (i, r) in [0.9, 0.7, 0.5, 0.3].into_iter().enumerate() {
        let (clean, noisy) = corrupted(r, 100 + i as u64);
        let (stat, p) = chi_square(r, &clean, &noisy);
        println!("r = {r}: chi2 = {stat:.2}, p = {p:.4}");
        assert!(p > 0.01, "r = {r}: chi2 {stat}, p {p}");
    }
}

#[test]
fn clean_fraction_and_spread_at_seventy_percent() {
    let (clean, noisy) = corrupted(0.7, 1);
    let kept = clean.iter().zip(&noisy).filter(|(a, b)| a == b).count() as f64 / N as f64;
    assert!((kept - 0.7).abs() <= 0.01, "{kept}");
    let mut wrong = vec![[0usize; K]; K];
    let mut rows = [0usize; K];
    for (&c, &n) in clean.iter().zip(&noisy) {
        wrong[c][n] += 1;
        rows[c] += 1;
    }
    for y in 0..K {
        for j in (0..K).filter(|&j| j != y) {
            let (f, q) = (wrong[y][j] as f64 / rows[y] as f64, 0.3 / 9.0);
            let sigma = (q * (1.0 - q) / rows[y] as f64).sqrt();
            assert!((f - q).abs() <= 5.0 * sigma, "Q[{y}][{j}] ~ {f}");
        }
    }
}

#[test]
fn chi_square_rejects_a_wrong_matrix() {
    // labels corrupted at r = 0.7 tested against the r = 0.75 rows
    let (clean, noisy) = corrupted(0.7, 3);
    let (_, p) = chi_square(0.75, &clean, &noisy);
    assert!(p < 0.01, "p {p}");
}

#[test]
fn corruption_is_fixed_by_seed() {
    assert_eq!(corrupted(0.5, 9).1, corrupted(0.5, 9).1);
}
