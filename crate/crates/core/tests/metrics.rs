use proptest::prelude::*;
use undersea::metrics::{self, MetricReport};
use undersea::{Rng, Tensor};

fn rand_img(rng: &mut Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn([c, h, w], |_| rng.uniform())
}

/// SSIM straight from its definition: an explicit 2-D Gaussian window at
/// every valid position, with weighted moments formed per window.
fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let [c, h, w] = [a.shape()[0], a.shape()[1], a.shape()[2]];
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(x * x + y * y) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    for ch in 0..c {
        let mut sum = 0.0;
        let mut n = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let g = win[i][j] / total;
                        ma += g * a.get(&[ch, y0 + i, x0 + j]);
                        mb += g * b.get(&[ch, y0 + i, x0 + j]);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let g = win[i][j] / total;
                        let (da, db) = (a.get(&[ch, y0 + i, x0 + j]) - ma, b.get(&[ch, y0 + i, x0 + j]) - mb);
                        va += g * da * da;
                        vb += g * db * db;
                        cov += g * da * db;
                    }
                }
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
        acc += sum / n as f64;
    }
    acc / c as f64
}

#[test]
fn psnr_of_uniform_offset() {
    let a = Tensor::<f64>::full([3, 8, 8], 0.3);
    let b = a.map(|v| v + 0.1);
    assert!((metrics::psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(metrics::psnr(&a, &a).unwrap(), f64::INFINITY);
}

#[test]
fn psnr_matches_direct_formula() {
    let mut rng = Rng::new(1);
    for _ in 0..100 {
        let (a, b) = (rand_img(&mut rng, 3, 9, 7), rand_img(&mut rng, 3, 9, 7));
        let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
        let want = 10.0 * (1.0 / mse).log10();
        assert!((metrics::psnr(&a, &b).unwrap() - want).abs() <= 1e-4);
        let (af, bf): (Tensor, Tensor) = (a.cast(), b.cast());
        assert!((metrics::psnr(&af, &bf).unwrap() - want).abs() <= 1e-4);
    }
}

#[test]
fn ssim_identity_is_one() {
    let mut rng = Rng::new(2);
    for _ in 0..10 {
        let a = rand_img(&mut rng, 3, 16, 16);
        assert!((metrics::ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn ssim_matches_literal_transcription() {
    let mut rng = Rng::new(3);
    for _ in 0..5 {
        let a = rand_img(&mut rng, 3, 16, 14);
        let b = a.map(|v| (v + 0.3 * (rng_like(v) - 0.5)).clamp(0.0, 1.0));
        let got = metrics::ssim(&a, &b).unwrap();
        assert!((got - ssim_oracle(&a, &b)).abs() <= 1e-5, "{got}");
        let c = rand_img(&mut rng, 3, 16, 14);
        assert!((metrics::ssim(&a, &c).unwrap() - ssim_oracle(&a, &c)).abs() <= 1e-5);
    }
}

fn rng_like(v: f64) -> f64 {
    (v * 7919.0).fract()
}

#[test]
fn ssim_of_inverted_structure_is_negative() {
    let mut rng = Rng::new(4);
    let a = rand_img(&mut rng, 3, 16, 16);
    let inv = a.map(|v| 1.0 - v);
    assert!(metrics::ssim(&a, &inv).unwrap() < 0.0);
}

#[test]
fn ssim_decreases_along_noise_ladder() {
    let mut rng = Rng::new(5);
    let a = rand_img(&mut rng, 3, 32, 32);
    let noise = Tensor::from_fn([3, 32, 32], |_| rng.uniform_in(-1.0, 1.0));
    let mut last = (f64::INFINITY, 1.0 + 1e-12);
    for sigma in [0.01, 0.05, 0.1, 0.2, 0.4] {
        let b = Tensor::from_fn([3, 32, 32], |i| a.data()[i] + sigma * noise.data()[i]);
        let r = MetricReport::compute(&a, &b).unwrap();
        assert!(r.psnr < last.0 && r.ssim < last.1, "sigma {sigma}: {r:?}");
        last = (r.psnr, r.ssim);
    }
}

#[test]
fn input_validation() {
    let a = Tensor::<f64>::zeros([3, 10, 16]);
    assert!(metrics::ssim(&a, &a).is_err());
    assert!(metrics::psnr(&a, &Tensor::zeros([3, 10, 15])).is_err());
    let gray = Tensor::<f64>::full([12, 12], 0.5);
    assert!((metrics::ssim(&gray, &gray).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn report_mean() {
    let rs = [MetricReport { psnr: 20.0, ssim: 0.5 }, MetricReport { psnr: 30.0, ssim: 0.7 }];
    let m = MetricReport::mean(&rs);
    assert!((m.psnr - 25.0).abs() < 1e-12 && (m.ssim - 0.6).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (a, b) = (rand_img(&mut rng, 3, 12, 13), rand_img(&mut rng, 3, 12, 13));
        prop_assert_eq!(metrics::psnr(&a, &b).unwrap(), metrics::psnr(&b, &a).unwrap());
        prop_assert!((metrics::ssim(&a, &b).unwrap() - metrics::ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_bounded(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (a, b) = (rand_img(&mut rng, 3, 12, 12), rand_img(&mut rng, 3, 12, 12));
        let s = metrics::ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
    }
}
