//! Distribution and overlap metrics against independent reference
//! computations.

mod common;

use maskdiff::metrics::{
    compute_stats, conditioning_fidelity, confusion_counts, frechet_distance, inception_score, kid,
    noise_baseline_iou, overlap_metrics, FeatureExtractor, FeatureSet, GaussianStats,
    ReferenceClassifier, ReferenceEmbedder,
};
use maskdiff::raster::{Image, Mask};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use common::{random_image, random_mask, rng};

fn gaussian_rows(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    z + shift
                })
                .collect::<Vec<f64>>()
        })
        .collect()
}

fn feature_set(rows: &[Vec<f64>]) -> FeatureSet {
    FeatureSet::from_rows(rows).unwrap()
}

fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let a = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.1
}

/// Principal square root by the Denman-Beavers iteration; works on the
/// non-symmetric product directly.
fn denman_beavers_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    let mut y = m.clone();
    let mut z = DMatrix::identity(d, d);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().unwrap();
        let zi = z.clone().try_inverse().unwrap();
        let ny = (&y + zi) * 0.5;
        let nz = (&z + yi) * 0.5;
        let done = (&ny - &y).norm() < 1e-15 * ny.norm();
        y = ny;
        z = nz;
        if done {
            break;
        }
    }
    y
}

fn fid_oracle(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let cross = denman_beavers_sqrt(&(s1 * s2)).trace();
    (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross
}

// ---------------------------------------------------------------------------
// FID
// ---------------------------------------------------------------------------

#[test]
fn fid_is_zero_on_identical_stats() {
    let stats = compute_stats(&feature_set(&gaussian_rows(50, 6, 0.0, 1))).unwrap();
    assert!(frechet_distance(&stats, &stats).unwrap().abs() < 1e-8);
}

#[test]
fn fid_of_identity_covariance_mean_shift_is_squared_norm() {
    let d = 5;
    let eye = DMatrix::identity(d, d);
    let a = GaussianStats {
        mu: DVector::zeros(d),
        cov: eye.clone(),
    };
    let shift = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0, 3.0]);
    let b = GaussianStats {
        mu: shift.clone(),
        cov: eye,
    };
    assert!((frechet_distance(&a, &b).unwrap() - shift.norm_squared()).abs() < 1e-8);
}

#[test]
fn fid_matches_denman_beavers_oracle_on_random_spd_pairs() {
    for seed in 0..20 {
        let (s1, s2) = (random_spd(4, seed), random_spd(4, seed + 100));
        let mut r = rng(seed + 200);
        let mu1 = DVector::from_fn(4, |_, _| r.random_range(-1.0..1.0));
        let mu2 = DVector::from_fn(4, |_, _| r.random_range(-1.0..1.0));
        let got = frechet_distance(
            &GaussianStats {
                mu: mu1.clone(),
                cov: s1.clone(),
            },
            &GaussianStats {
                mu: mu2.clone(),
                cov: s2.clone(),
            },
        )
        .unwrap();
        let want = fid_oracle(&mu1, &s1, &mu2, &s2);
        assert!(
            (got - want).abs() < 1e-8 * want.max(1.0),
            "seed {seed}: {got} vs {want}"
        );
    }
}

#[test]
fn fid_is_symmetric() {
    let a = compute_stats(&feature_set(&gaussian_rows(40, 4, 0.0, 2))).unwrap();
    let b = compute_stats(&feature_set(&gaussian_rows(40, 4, 0.7, 3))).unwrap();
    let (ab, ba) = (
        frechet_distance(&a, &b).unwrap(),
        frechet_distance(&b, &a).unwrap(),
    );
    assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
}

#[test]
fn stats_match_scalar_loops() {
    let rows = gaussian_rows(100, 5, 0.3, 4);
    let stats = compute_stats(&feature_set(&rows)).unwrap();
    for a in 0..5 {
        let mean_a = rows.iter().map(|r| r[a]).sum::<f64>() / 100.0;
        assert!((stats.mu[a] - mean_a).abs() < 1e-12);
        for b in 0..5 {
            let mean_b = rows.iter().map(|r| r[b]).sum::<f64>() / 100.0;
            let c = rows
                .iter()
                .map(|r| (r[a] - mean_a) * (r[b] - mean_b))
                .sum::<f64>()
                / 99.0;
            assert!((stats.cov[(a, b)] - c).abs() < 1e-12);
        }
    }
}

#[test]
fn fid_on_two_identical_images_is_zero() {
    let mut r = rng(5);
    let imgs = vec![
        random_image(3, 16, 16, &mut r),
        random_image(3, 16, 16, &mut r),
    ];
    let emb = ReferenceEmbedder::new(3);
    let f = emb.embed(&imgs).unwrap();
    let s = compute_stats(&f).unwrap();
    assert!(frechet_distance(&s, &s).unwrap() < 1e-8);
}

// ---------------------------------------------------------------------------
// KID
// ---------------------------------------------------------------------------

fn k3(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

#[test]
fn kid_equals_exhaustive_hand_sum_on_three_points() {
    let xs = gaussian_rows(3, 4, 0.0, 6);
    let ys = gaussian_rows(3, 4, 0.5, 7);
    let mut xx = 0.0;
    let mut yy = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                xx += k3(&xs[i], &xs[j]);
                yy += k3(&ys[i], &ys[j]);
            }
        }
    }
    let mut xy = 0.0;
    for x in &xs {
        for y in &ys {
            xy += k3(x, y);
        }
    }
    let want = xx / 6.0 + yy / 6.0 - 2.0 * xy / 9.0;
    let got = kid(&feature_set(&xs), &feature_set(&ys)).unwrap();
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

#[test]
fn kid_null_case_is_near_zero_and_shift_is_detected() {
    let n = 200;
    let mut draws = Vec::new();
    for seed in 0..20 {
        let a = feature_set(&gaussian_rows(n, 8, 0.0, 1000 + seed));
        let b = feature_set(&gaussian_rows(n, 8, 0.0, 2000 + seed));
        let v = kid(&a, &b).unwrap();
        assert!(v.abs() < 3.0 / (n as f64).sqrt(), "seed {seed}: {v}");
        draws.push(v);
    }
    let mean = draws.iter().sum::<f64>() / 20.0;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 19.0).sqrt();
    assert!(mean.abs() < 3.0 * sd / 20f64.sqrt(), "mean {mean} sd {sd}");

    let a = feature_set(&gaussian_rows(n, 8, 0.0, 1));
    let shifted = feature_set(&gaussian_rows(n, 8, 1.0, 2));
    assert!(kid(&a, &shifted).unwrap() > 10.0 * sd);
}

#[test]
fn kid_needs_two_samples_per_set() {
    let one = feature_set(&gaussian_rows(1, 3, 0.0, 1));
    let two = feature_set(&gaussian_rows(2, 3, 0.0, 2));
    assert!(kid(&one, &two).is_err());
    assert!(compute_stats(&one).is_err());
}

// ---------------------------------------------------------------------------
// IS
// ---------------------------------------------------------------------------

#[test]
fn inception_score_closed_forms_are_exact() {
    for k in 2..=100usize {
        let uniform = DMatrix::from_element(7, k, 1.0 / k as f64);
        assert_eq!(inception_score(&uniform).unwrap(), 1.0, "uniform K={k}");
        let one_hot = DMatrix::from_fn(3 * k, k, |i, j| if i % k == j { 1.0 } else { 0.0 });
        assert_eq!(
            inception_score(&one_hot).unwrap(),
            k as f64,
            "one-hot K={k}"
        );
    }
}

#[test]
fn inception_score_matches_scalar_kl_loop() {
    let mut r = rng(9);
    let (n, k) = (50, 10);
    let mut p = DMatrix::from_fn(n, k, |_, _| r.random_range(0.01..1.0f64).powi(3));
    for mut row in p.row_iter_mut() {
        let s: f64 = row.iter().sum();
        row /= s;
    }
    let marginal: Vec<f64> = (0..k)
        .map(|j| (0..n).map(|i| p[(i, j)]).sum::<f64>() / n as f64)
        .collect();
    let mean_kl = (0..n)
        .map(|i| {
            (0..k)
                .map(|j| p[(i, j)] * (p[(i, j)] / marginal[j]).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    let got = inception_score(&p).unwrap();
    assert!(
        (got - mean_kl.exp()).abs() < 1e-12 * got,
        "{got} vs {}",
        mean_kl.exp()
    );
}

#[test]
fn inception_score_rejects_non_distributions() {
    assert!(inception_score(&DMatrix::from_element(2, 2, 0.6)).is_err());
    assert!(inception_score(&DMatrix::from_row_slice(1, 2, &[1.5, -0.5])).is_err());
}

#[test]
fn reference_classifier_outputs_distributions() {
    let mut r = rng(10);
    let imgs: Vec<Image> = (0..5).map(|_| random_image(3, 16, 16, &mut r)).collect();
    let f = ReferenceEmbedder::new(3).embed(&imgs).unwrap();
    let p = ReferenceClassifier::new().probabilities(&f).unwrap();
    assert_eq!(p.shape(), (5, 10));
    for row in p.row_iter() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
    let is = inception_score(&p).unwrap();
    assert!((1.0..=10.0).contains(&is));
}

// ---------------------------------------------------------------------------
// overlap metrics
// ---------------------------------------------------------------------------

fn brute_force(pred: &Mask, truth: &Mask) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            match (pred.get(y, x), truth.get(y, x)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
    }
    (tp, fp, fn_, tn)
}

#[test]
fn overlap_metrics_equal_pixel_count_oracle_on_random_pairs() {
    let mut r = rng(11);
    for _ in 0..1000 {
        let (h, w) = (r.random_range(1..20), r.random_range(1..20));
        let p_density = r.random_range(0.0..1.0);
        let t_density = r.random_range(0.0..1.0);
        let pred = random_mask(h, w, p_density, &mut r);
        let truth = random_mask(h, w, t_density, &mut r);
        let (tp, fp, fn_, tn) = brute_force(&pred, &truth);
        let m = overlap_metrics(&pred, &truth).unwrap();
        let c = m.counts;
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn));
        let (tp, fp, fn_, tn) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
        if tp + fp + fn_ > 0.0 {
            assert_eq!(m.iou, tp / (tp + fp + fn_));
            assert_eq!(m.f1, 2.0 * tp / (2.0 * tp + fp + fn_));
        }
        assert_eq!(m.accuracy, (tp + tn) / (tp + fp + fn_ + tn));
        if tp + fp > 0.0 {
            assert_eq!(m.precision, tp / (tp + fp));
        }
    }
}

#[test]
fn empty_mask_conventions() {
    let empty = Mask::from_fn(4, 4, |_, _| false);
    let some = Mask::from_fn(4, 4, |y, _| y == 0);
    let both = overlap_metrics(&empty, &empty).unwrap();
    assert_eq!(
        (both.iou, both.f1, both.precision, both.accuracy),
        (1.0, 1.0, 1.0, 1.0)
    );
    let missed = overlap_metrics(&empty, &some).unwrap();
    assert_eq!((missed.iou, missed.f1, missed.precision), (0.0, 0.0, 0.0));
    assert!(confusion_counts(&empty, &Mask::from_fn(4, 5, |_, _| false)).is_err());
}

#[test]
fn fidelity_of_a_perfect_rendering_is_one() {
    let mask = Mask::from_fn(16, 16, |y, x| {
        (y as i32 - 8).pow(2) + (x as i32 - 8).pow(2) < 20
    });
    let mut img = Image::filled(3, 16, 16, -0.8);
    for c in 0..3 {
        for y in 0..16 {
            for x in 0..16 {
                if mask.get(y, x) {
                    img.set(c, y, x, 0.7);
                }
            }
        }
    }
    assert_eq!(conditioning_fidelity(&img, &mask, 0.0).unwrap(), 1.0);
}

#[test]
fn noise_baseline_matches_monte_carlo() {
    let mask = Mask::from_fn(32, 32, |y, x| {
        (y as i32 - 16).pow(2) + (x as i32 - 12).pow(2) < 60
    });
    let mut r = rng(12);
    let trials = 4000;
    let mut total = 0.0;
    for _ in 0..trials {
        let noise = common::random_image(3, 32, 32, &mut r);
        total += conditioning_fidelity(&noise, &mask, 0.0).unwrap();
    }
    let mc = total / trials as f64;
    let want = noise_baseline_iou(&mask);
    assert!((mc - want).abs() < 0.01, "{mc} vs {want}");
}

proptest! {
    #[test]
    fn metrics_ignore_sample_order(seed in any::<u64>()) {
        let rows = gaussian_rows(12, 3, 0.0, seed);
        let other = gaussian_rows(12, 3, 0.4, seed ^ 1);
        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.swap(0, 5);
        let (a, b) = (feature_set(&rows), feature_set(&shuffled));
        let o = feature_set(&other);
        let fa = frechet_distance(&compute_stats(&a).unwrap(), &compute_stats(&o).unwrap()).unwrap();
        let fb = frechet_distance(&compute_stats(&b).unwrap(), &compute_stats(&o).unwrap()).unwrap();
        prop_assert!((fa - fb).abs() < 1e-9 * fa.max(1.0));
        let (ka, kb) = (kid(&a, &o).unwrap(), kid(&b, &o).unwrap());
        prop_assert!((ka - kb).abs() < 1e-12 * ka.abs().max(1.0));
    }

    #[test]
    fn overlap_scores_are_bounded_and_symmetric(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let mut r = rng(seed);
        let a = random_mask(h, w, 0.5, &mut r);
        let b = random_mask(h, w, 0.5, &mut r);
        let ab = overlap_metrics(&a, &b).unwrap();
        let ba = overlap_metrics(&b, &a).unwrap();
        prop_assert_eq!(ab.iou, ba.iou);
        prop_assert_eq!(ab.f1, ba.f1);
        for v in [ab.iou, ab.f1, ab.accuracy, ab.precision] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(ab.iou <= ab.f1);
    }
}
