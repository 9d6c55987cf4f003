use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::lightfield::{extract_epi, synthetic_texture, AngularPosition, EpiOrientation, Image, LightField};

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_, _| rng.gen::<f32>())
}

#[test]
fn luma_endpoints_and_gray_line() {
    let white = Image::filled(1, 1, 3, 1.0);
    let black = Image::filled(1, 1, 3, 0.0);
    assert!((rgb_to_y(&white).unwrap().data()[0] - 235.0 / 255.0).abs() < 1e-6);
    assert!((rgb_to_y(&black).unwrap().data()[0] - 16.0 / 255.0).abs() < 1e-6);
    for g in [0.1f32, 0.37, 0.8] {
        let y = rgb_to_y(&Image::filled(1, 1, 3, g)).unwrap().data()[0];
        assert!((y - (219.0 * g + 16.0) / 255.0).abs() < 1e-5);
    }
    assert!(rgb_to_y(&Image::filled(2, 2, 1, 0.5)).is_err());
}

#[test]
fn ycbcr_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f32> = (0..3 * 16).map(|_| rng.gen()).collect();
    let img = Image::new(4, 4, 3, data).unwrap();
    let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img).unwrap()).unwrap();
    for (a, b) in img.data().iter().zip(back.data()) {
        assert!((a - b).abs() < 1e-5);
    }
    assert_eq!(rgb_to_ycbcr(&img).unwrap().plane(0), rgb_to_y(&img).unwrap().data());
}

#[test]
fn constant_images_stay_constant() {
    let img = Image::filled(8, 12, 2, 0.3);
    for spec in [ResampleSpec::down(2), ResampleSpec::down(4), ResampleSpec::up(2), ResampleSpec::up(4)] {
        let out = bicubic_resize(&img, &spec).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }
}

#[test]
fn upscale_reproduces_interior_ramps() {
    let img = Image::from_fn(10, 10, |y, x| 0.02 * x as f32 + 0.03 * y as f32 + 0.1);
    let up = bicubic_resize(&img, &ResampleSpec::up(2)).unwrap();
    // away from the clamped border every tap is inside the image
    for y in 4..16 {
        for x in 4..16 {
            let sx = (x as f32 + 0.5) / 2.0 - 0.5;
            let sy = (y as f32 + 0.5) / 2.0 - 0.5;
            let expect = 0.02 * sx + 0.03 * sy + 0.1;
            assert!((up.get(0, y, x) - expect).abs() < 1e-6, "({y},{x})");
        }
    }
}

#[test]
fn downscale_rejects_indivisible_extents() {
    assert!(bicubic_resize(&Image::filled(9, 8, 1, 0.5), &ResampleSpec::down(2)).is_err());
    assert!(bicubic_resize(&Image::filled(8, 8, 1, 0.5), &ResampleSpec { scale: 1, ..ResampleSpec::up(2) }).is_err());
}

/// Direct 2D evaluation of the (possibly widened) bicubic kernel with clamped
/// coordinates and normalized weights.
fn resize_oracle(img: &Image, oh: usize, ow: usize, antialias: bool) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let axis = |n_in: usize, n_out: usize, i: usize| -> Vec<(usize, f64)> {
        let s = n_out as f64 / n_in as f64;
        let k = if antialias && s < 1.0 { s } else { 1.0 };
        let c = (i as f64 + 0.5) / s - 0.5;
        let mut acc = vec![0.0; n_in];
        let r = (2.0 / k).ceil() as isize + 1;
        for j in (c.floor() as isize - r)..=(c.floor() as isize + r) {
            acc[j.clamp(0, n_in as isize - 1) as usize] += k * cubic_kernel((c - j as f64) * k, -0.5);
        }
        let total: f64 = acc.iter().sum();
        acc.into_iter().enumerate().map(|(j, v)| (j, v / total)).collect()
    };
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let wy = axis(h, oh, oy);
        for ox in 0..ow {
            let wx = axis(w, ow, ox);
            let mut v = 0.0;
            for &(y, a) in &wy {
                for &(x, b) in &wx {
                    v += a * b * img.get(0, y, x) as f64;
                }
            }
            out.push(v);
        }
    }
    out
}

#[test]
fn resize_matches_direct_oracle() {
    let img = random_image(12, 16, 2);
    for (spec, aa) in [(ResampleSpec::down(2), true), (ResampleSpec::down(4), true), (ResampleSpec::up(2), false)] {
        let out = bicubic_resize(&img, &spec).unwrap();
        let oracle = resize_oracle(&img, out.height(), out.width(), aa);
        for (a, b) in out.data().iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn up_then_down_preserves_smooth_blob() {
    let blob = Image::from_fn(64, 64, |y, x| {
        let dy = y as f32 - 31.5;
        let dx = x as f32 - 31.5;
        0.1 + 0.8 * (-(dx * dx + dy * dy) / (2.0 * 12.0 * 12.0)).exp()
    });
    let up = bicubic_resize(&blob, &ResampleSpec::up(2)).unwrap();
    let back = bicubic_resize(&up, &ResampleSpec::down(2)).unwrap();
    let p = psnr(blob.data(), back.data(), 1.0).unwrap();
    assert!(p > 40.0, "round trip PSNR {p}");
}

#[test]
fn psnr_closed_forms() {
    assert_eq!(psnr_from_mse(0.0, 1.0), f64::INFINITY);
    assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-9);
    assert!((psnr_from_mse(1e-4, 1.0) - 40.0).abs() < 1e-9);
    let a = vec![0.5f32; 16];
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    let b = vec![0.6f32; 16];
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-4);
    assert!(psnr(&a, &b[..8], 1.0).is_err());
}

#[test]
fn finite_mean() {
    assert_eq!(mean_finite([1.0, f64::INFINITY, 3.0]), 2.0);
    assert_eq!(mean_finite([f64::INFINITY]), f64::INFINITY);
}

/// Sliding-window SSIM computed window by window in two dimensions.
fn ssim_oracle(a: &Image, b: &Image, win: usize) -> f64 {
    let (h, w) = (a.height(), a.width());
    let r = (win / 2) as f64;
    let mut g = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            g[i * win + j] = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for y0 in 0..=h - win {
        for x0 in 0..=w - win {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let wt = g[i * win + j];
                    let p = a.get(0, y0 + i, x0 + j) as f64;
                    let q = b.get(0, y0 + i, x0 + j) as f64;
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

#[test]
fn ssim_matches_sliding_window_oracle() {
    let a = random_image(20, 24, 3);
    let b = Image::from_fn(20, 24, |y, x| (a.get(0, y, x) * 0.7 + 0.1 * ((x + y) % 3) as f32).min(1.0));
    let s = ssim(&a, &b).unwrap();
    assert!((s - ssim_oracle(&a, &b, 11)).abs() < 1e-6);
    let s5 = ssim_with_window(&a, &b, 5, 1.5).unwrap();
    assert!((s5 - ssim_oracle(&a, &b, 5)).abs() < 1e-6);
}

#[test]
fn ssim_identity_and_anticorrelation() {
    let a = random_image(16, 16, 4);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let board = Image::from_fn(16, 16, |y, x| ((x + y) % 2) as f32);
    let inv = Image::from_fn(16, 16, |y, x| 1.0 - board.get(0, y, x));
    assert!(ssim(&board, &inv).unwrap() < 0.0);
    assert!(ssim(&Image::filled(10, 16, 1, 0.5), &Image::filled(10, 16, 1, 0.5)).is_err());
    assert_eq!(ssim_window(3, 64), 3);
    assert_eq!(ssim_window(8, 64), 7);
    assert_eq!(ssim_window(64, 64), 11);
}

fn small_lf(seed: u64) -> LightField {
    let base = synthetic_texture(20, 20, 0.2, seed);
    crate::lightfield::render_constant_disparity(&base, 1.0, 3, 3).unwrap()
}

#[test]
fn epi_metrics_match_per_epi_oracle() {
    let a = small_lf(5);
    let b = a.map(|v| v * 0.9 + 0.03);
    let (m, n) = a.angular();
    let (h, w) = a.spatial();
    let mut psnrs = Vec::new();
    let mut ssims = Vec::new();
    for (orient, fa, fb) in [(EpiOrientation::Horizontal, h, n), (EpiOrientation::Vertical, w, m)] {
        for i in 0..fa {
            for j in 0..fb {
                let ea = extract_epi(&a, orient, i, j).unwrap().image;
                let eb = extract_epi(&b, orient, i, j).unwrap().image;
                psnrs.push(psnr(ea.data(), eb.data(), 1.0).unwrap());
                let win = ssim_window(ea.height(), ea.width());
                ssims.push(ssim_oracle(&ea, &eb, win));
            }
        }
    }
    let (p, s) = epi_metrics(&a, &b).unwrap();
    assert!((p - psnrs.iter().sum::<f64>() / psnrs.len() as f64).abs() < 1e-9);
    assert!((s - ssims.iter().sum::<f64>() / ssims.len() as f64).abs() < 1e-6);

    let (p, s) = epi_metrics(&a, &a).unwrap();
    assert_eq!(p, f64::INFINITY);
    assert!((s - 1.0).abs() < 1e-12);
}

#[test]
fn constant_fields_give_closed_form_epi_psnr() {
    let a = LightField::constant(3, 3, 12, 12, 1, 0.4).unwrap();
    let b = LightField::constant(3, 3, 12, 12, 1, 0.5).unwrap();
    let (p, _) = epi_metrics(&a, &b).unwrap();
    assert!((p - 20.0).abs() < 1e-4, "{p}");
}

#[test]
fn per_view_psnr_is_local() {
    let a = small_lf(6);
    let grid = per_sai_psnr(&a, &a).unwrap();
    assert!(grid.iter().flatten().all(|v| v.is_infinite()));

    let mut b = a.clone();
    let pos = AngularPosition::new(2, 0);
    let dimmed = b.get_sai(pos).unwrap().clamped();
    let dimmed = Image::from_fn(dimmed.height(), dimmed.width(), |y, x| dimmed.get(0, y, x) * 0.5);
    b.set_sai(pos, &dimmed).unwrap();
    let grid = per_sai_psnr(&a, &b).unwrap();
    for p in a.positions() {
        let v = grid[p.u as usize][p.v as usize];
        assert_eq!(v.is_finite(), p == pos, "{p}");
    }

    let report = evaluate(&a, &b).unwrap();
    assert_eq!(report.mean_psnr, mean_finite(report.per_sai_psnr.iter().flatten().copied()));
    let json = serde_json::to_string(&report).unwrap();
    assert!(json.contains("null"));
    let back: MetricReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.per_sai_psnr[0][0], f64::INFINITY);
}

#[test]
fn rgb_fields_are_scored_on_luma() {
    let y = small_lf(7);
    let views: Vec<Image> = y
        .positions()
        .into_iter()
        .map(|p| {
            let g = y.get_sai(p).unwrap();
            Image::stack_channels(&[g.clone(), g.clone(), g]).unwrap()
        })
        .collect();
    let rgb = LightField::from_views(3, 3, &views).unwrap();
    let shifted = rgb.map(|v| (v + 0.05).min(1.0));
    let grid = per_sai_psnr(&rgb, &shifted).unwrap();
    let luma_grid = per_sai_psnr(&rgb.to_luma().unwrap(), &shifted.to_luma().unwrap()).unwrap();
    assert_eq!(grid, luma_grid);
}

proptest! {
    #[test]
    fn taps_form_a_partition_of_unity(n in 4usize..40, factor in prop::sample::select(vec![2usize, 4]), up in any::<bool>()) {
        let (i, o, aa) = if up { (n, n * factor, false) } else { (n * factor, n, true) };
        for taps in bicubic_weights(i, o, -0.5, aa) {
            let s: f64 = taps.iter().map(|t| t.1).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(taps.iter().all(|t| t.0 < i));
        }
    }
}
