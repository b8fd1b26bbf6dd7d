use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use g4g::alignment::adain;
use g4g::deformation::{affine_warp, build_mask_pyramid, forward_map, inverse_map, AffineCoeffSet, Padding};
use g4g::image::Image;
use g4g::losses::{contrastive_loss, lsgan_losses};
use g4g::metrics::{psnr, ssim};
use g4g::Tensor;

fn tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| r.gen_range(lo..hi)).collect(), shape).unwrap()
}

fn image(seed: u64, h: usize, w: usize) -> Image {
    let t = tensor(seed, &[3, h, w], 0.0, 1.0);
    Image::from_tensor(&t).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adain_hits_target_stats(seed in any::<u64>(), c in 1usize..5, h in 3usize..10, w in 3usize..10) {
        let x = tensor(seed, &[c, h, w], -3.0, 3.0);
        let sigma = tensor(seed ^ 1, &[c], 0.2, 2.0);
        let mu = tensor(seed ^ 2, &[c], -1.0, 1.0);
        let y = adain(&x, &sigma, &mu).unwrap();
        let n = (h * w) as f64;
        for ch in 0..c {
            let v = &y.data()[ch * h * w..(ch + 1) * h * w];
            let m = v.iter().sum::<f64>() / n;
            prop_assert!((m - mu.data()[ch]).abs() < 1e-9);
        }
    }

    #[test]
    fn warp_identity_is_exact(seed in any::<u64>(), c in 1usize..4, h in 2usize..9, w in 2usize..9) {
        let f = tensor(seed, &[c, h, w], -1.0, 1.0);
        for pad in [Padding::Border, Padding::Zeros] {
            let out = affine_warp(&f, &AffineCoeffSet::identity(c), pad).unwrap();
            for (a, b) in out.data().iter().zip(f.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inverse_map_undoes_forward_map(theta in -3.0f64..3.0, tx in -1.0f64..1.0, ty in -1.0f64..1.0,
                                       s in 0.1f64..3.0, x in -1.0f64..1.0, y in -1.0f64..1.0) {
        let (u, v) = inverse_map(theta, tx, ty, s, forward_map(theta, tx, ty, s, (x, y)));
        prop_assert!((u - x).abs() < 1e-9 && (v - y).abs() < 1e-9);
    }

    #[test]
    fn ssim_symmetric_and_bounded(seed in any::<u64>(), h in 11usize..20, w in 11usize..20) {
        let (a, b) = (image(seed, h, w), image(seed ^ 9, h, w));
        let ab = ssim(&a, &b, 1.0).unwrap();
        let ba = ssim(&b, &a, 1.0).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12 && ab >= -1.0);
        prop_assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_symmetric(seed in any::<u64>()) {
        let (a, b) = (image(seed, 8, 8), image(seed ^ 3, 8, 8));
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn contrastive_is_non_negative(seed in any::<u64>(), b in 2usize..7) {
        let p = tensor(seed, &[b, b], 0.01, 1.0);
        let q = tensor(seed ^ 5, &[b, b], 0.01, 1.0);
        let rows = |t: &Tensor| {
            let sums = t.sum_axis(1).unwrap().reshape(&[b, 1]).unwrap().broadcast_to(&[b, b]).unwrap();
            t.div(&sums).unwrap()
        };
        let l = contrastive_loss(&rows(&p), &rows(&q)).unwrap().item();
        prop_assert!(l >= 0.0 && l.is_finite());
    }

    #[test]
    fn lsgan_zero_at_targets(n in 1usize..8) {
        let (d, g) = lsgan_losses(&Tensor::full(&[n], 1.0), &Tensor::zeros(&[n]));
        prop_assert!(d.item().abs() < 1e-15);
        prop_assert!((g.item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mask_pyramid_half_coverage(k in 2usize..12) {
        let h = 4 * k;
        let p = build_mask_pyramid(h, h).unwrap();
        for m in &p.masks {
            let mean = m.data().iter().sum::<f64>() / m.numel() as f64;
            prop_assert!((mean - 0.5).abs() <= 2.0 / h as f64);
        }
    }
}
