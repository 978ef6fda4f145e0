//! SSIM with an 11x11 Gaussian window (sigma 1.5, half-sample symmetric
//! padding, dynamic range 1) and Pearson cross-correlation.

use crate::error::{Error, Result};
use crate::volume::{Image, Volume};

const RADIUS: usize = 5;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn window() -> [f64; 2 * RADIUS + 1] {
    let mut w = [0.0; 2 * RADIUS + 1];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - RADIUS as f64;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Index into `0..n` after half-sample symmetric reflection (`d c b a | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn blur(data: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let r = RADIUS as isize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-r..=r)
                .map(|d| win[(d + r) as usize] * data[y * w + reflect(x as isize + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| win[(d + r) as usize] * rows[reflect(y as isize + d, h) * w + x])
                .sum();
        }
    }
    out
}

/// Mean of the local SSIM map. `ssim(a, a)` is exactly 1 and the measure
/// is exactly symmetric.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (h, w) = (a.height(), a.width());
    if (h, w) != (b.height(), b.width()) {
        return Err(Error::shape("ssim", format!("{h}x{w} vs {}x{}", b.height(), b.width())));
    }
    let win = window();
    let fa: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let fb: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = blur(&fa, h, w, &win);
    let mu_b = blur(&fb, h, w, &win);
    let e_aa = blur(&sq(&fa, &fa), h, w, &win);
    let e_bb = blur(&sq(&fb, &fb), h, w, &win);
    let e_ab = blur(&sq(&fa, &fb), h, w, &win);
    let mut total = 0.0;
    for i in 0..h * w {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cab = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cab + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    Ok(total / (h * w) as f64)
}

/// Mean of per-axial-slice SSIM.
pub fn ssim_volume(a: &Volume, b: &Volume) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "ssim_volume",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let n = a.shape()[0];
    let mut total = 0.0;
    for z in 0..n {
        total += ssim(&a.axial(z), &b.axial(z))?;
    }
    Ok(total / n as f64)
}

/// Pearson correlation of the flattened intensities.
pub fn cross_correlation(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(
            "cross_correlation",
            format!("{} vs {} values", a.len(), b.len()),
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn window_is_normalized() {
        assert!((window().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reflection_is_half_sample_symmetric() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        // Windows wider than the image keep folding.
        assert_eq!(reflect(-5, 2), 0);
        assert_eq!(reflect(9, 2), 1);
    }

    #[test]
    fn identical_images_score_one() {
        let a = random_image(1, 16, 12);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn constant_zero_against_one() {
        let s = ssim(&Image::filled(16, 16, 0.0), &Image::filled(16, 16, 1.0)).unwrap();
        // Only the stabilising constants remain: C1 / (1 + C1).
        assert!((s - C1 / (1.0 + C1)).abs() < 1e-12);
        assert!(s < 0.01);
    }

    #[test]
    fn shape_mismatch() {
        assert!(ssim(&Image::filled(4, 4, 0.0), &Image::filled(4, 5, 0.0)).is_err());
    }

    #[test]
    fn correlation_cases() {
        let a = random_image(2, 8, 8);
        let affine: Vec<f32> = a.data().iter().map(|v| 2.0 * v + 0.1).collect();
        let neg: Vec<f32> = a.data().iter().map(|v| -v).collect();
        assert!((cross_correlation(a.data(), &affine).unwrap() - 1.0).abs() < 1e-6);
        assert!((cross_correlation(a.data(), &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            cross_correlation(a.data(), &[0.5; 64]),
            Err(Error::UndefinedCorrelation)
        ));
    }

    #[test]
    fn volume_ssim_averages_slices() {
        let a = Volume::from_slices(&[random_image(3, 8, 8), random_image(4, 8, 8)], [1.0; 3], "a").unwrap();
        let b = Volume::from_slices(&[random_image(3, 8, 8), random_image(5, 8, 8)], [1.0; 3], "b").unwrap();
        let expect = (1.0 + ssim(&a.axial(1), &b.axial(1)).unwrap()) / 2.0;
        assert!((ssim_volume(&a, &b).unwrap() - expect).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(s1 in 0u64..500, s2 in 0u64..500) {
            let a = random_image(s1, 12, 9);
            let b = random_image(s2 + 1000, 12, 9);
            let ab = ssim(&a, &b).unwrap();
            prop_assert_eq!(ab, ssim(&b, &a).unwrap());
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn correlation_affine_invariant(s in 0u64..500, scale in 0.1f32..5.0, shift in -1.0f32..1.0) {
            let a = random_image(s, 6, 6);
            let b = random_image(s + 1, 6, 6);
            let c = cross_correlation(a.data(), b.data()).unwrap();
            let mapped: Vec<f32> = b.data().iter().map(|v| scale * v + shift).collect();
            prop_assert!((c - cross_correlation(a.data(), &mapped).unwrap()).abs() < 1e-5);
            let neg: Vec<f32> = b.data().iter().map(|v| -v).collect();
            prop_assert!((c + cross_correlation(a.data(), &neg).unwrap()).abs() < 1e-12);
        }
    }
}
