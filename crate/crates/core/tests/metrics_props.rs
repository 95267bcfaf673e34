use nelf::image::Image;
use nelf::metrics::{psnr, ssim, MetricsReport, Pca, ViewMetrics};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn textured(w: usize, h: usize) -> Image {
    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f32 * 0.3, y as f32 * 0.2);
            img.set(x, y, [0.5 + 0.4 * fx.sin(), 0.5 + 0.4 * (fx + fy).cos(), 0.5 + 0.3 * (fy * 1.7).sin()]);
        }
    }
    img
}

fn noisy(img: &Image, sigma: f32, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for v in &mut out.data {
        *v = (*v + sigma * rng.random_range(-1.0..1.0f32)).clamp(0.0, 1.0);
    }
    out
}

#[test]
fn psnr_and_ssim_fall_as_noise_grows() {
    let img = textured(40, 32);
    let (mut last_p, mut last_s) = (f64::INFINITY, 1.0 + 1e-12);
    for (k, sigma) in [0.01, 0.03, 0.1, 0.3].into_iter().enumerate() {
        let n = noisy(&img, sigma, k as u64);
        let (p, s) = (psnr(&img, &n).unwrap(), ssim(&img, &n).unwrap());
        assert!(p < last_p && s < last_s, "sigma {sigma}: psnr {p}, ssim {s}");
        (last_p, last_s) = (p, s);
    }
}

#[test]
fn psnr_matches_hand_computed_mse() {
    let a = Image::new(8, 8);
    let mut b = Image::new(8, 8);
    b.data.iter_mut().for_each(|v| *v = 0.1);
    // mse = 0.01 -> 20 dB
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
}

#[test]
fn ssim_is_symmetric_and_one_on_identity() {
    let a = textured(24, 20);
    let b = noisy(&a, 0.1, 7);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    assert!(ssim(&textured(10, 30), &textured(10, 30)).is_err());
}

#[test]
fn report_json_round_trips() {
    let r = MetricsReport::new(
        "holdout",
        vec![ViewMetrics { view: 3, psnr: 30.5, ssim: 0.9 }, ViewMetrics { view: 7, psnr: 28.5, ssim: 0.8 }],
    );
    assert!((r.mean_psnr - 29.5).abs() < 1e-12);
    let back = MetricsReport::from_json(&r.to_json()).unwrap();
    assert_eq!(back.views.len(), 2);
    assert_eq!(back.mean_psnr, r.mean_psnr);
    assert!(r.to_text().contains("lpips unavailable"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pca_full_rank_reconstructs_rows(rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 4), 2..30)) {
        let pca = Pca::fit(&rows).unwrap();
        let mut prev = f64::INFINITY;
        for &v in &pca.variances {
            prop_assert!(v <= prev + 1e-12);
            prev = v;
        }
        let gram = pca.components.transpose() * &pca.components;
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                prop_assert!((gram[(i, j)] - expect).abs() < 1e-9);
            }
        }
        for r in &rows {
            let back = pca.reconstruct(&pca.project(r));
            for k in 0..4 {
                prop_assert!((back[k] - r[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn psnr_is_symmetric_and_capped(seed in 0u64..500, sigma in 0.0..0.5f32) {
        let a = textured(12, 12);
        let b = noisy(&a, sigma, seed);
        let (p, q) = (psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(p, q);
        prop_assert!(p <= 99.0);
    }
}
