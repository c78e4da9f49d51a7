//! Image quality metrics on the [0, 1] float scale.
//!
//! Both metrics intentionally run on unclamped float samples, so distortion
//! that would survive 8-bit export and distortion that would clip both count.
//! PSNR uses peak 1.0. SSIM uses 8x8 uniform windows at stride 1 with the
//! conventional stabilizers C1 = 0.01^2 and C2 = 0.03^2; multi-channel images
//! score each channel independently and average.

use crate::error::{Error, Result};
use crate::image::Image;

/// Peak signal-to-noise ratio in dB: `10 log10(1 / mse)`.
/// Identical images have zero MSE and return +inf.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(a.shape_mismatch(b));
    }
    let n = a.num_samples() as f64;
    let mse: f64 =
        a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean structural similarity over all 8x8 windows (uniform weights,
/// stride 1), averaged over channels. Requires images at least 8x8.
///
/// Identical images score exactly 1.0: every per-window numerator and
/// denominator are computed with the same operation sequence, so the ratio is
/// exactly 1 in floating point.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(a.shape_mismatch(b));
    }
    let (w, h, c) = (a.width(), a.height(), a.channels());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least 8x8, got {w}x{h}")));
    }

    let inv_n = 1.0 / (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0u64;
    for ch in 0..c {
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let va = a.at(x, y, ch);
                        let vb = b.at(x, y, ch);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let ma = sa * inv_n;
                let mb = sb * inv_n;
                let var_a = saa * inv_n - ma * ma;
                let var_b = sbb * inv_n - mb * mb;
                let cov = sab * inv_n - ma * mb;
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
                total += num / den;
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn noise_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = RngStream::new(seed, "metrics-test");
        let data = (0..w * h * c).map(|_| 0.5 + 0.1 * rng.next_standard_normal()).collect();
        Image::from_vec(w, h, c, data).unwrap()
    }

    #[test]
    fn psnr_uniform_offset_is_twenty_db() {
        let a = noise_image(16, 16, 1, 1);
        let b = a.map(|v| v + 0.1);
        // MSE = 0.01 exactly in real arithmetic -> 10 log10(100) = 20.
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_identity_is_infinite_and_symmetric() {
        let a = noise_image(9, 11, 3, 2);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = noise_image(9, 11, 3, 3);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_shape_mismatch_errors() {
        let a = noise_image(8, 8, 1, 4);
        let b = noise_image(8, 9, 1, 4);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_self_is_exactly_one() {
        let a = noise_image(12, 10, 1, 5);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let rgb = noise_image(8, 8, 3, 6);
        assert_eq!(ssim(&rgb, &rgb).unwrap(), 1.0);
    }

    #[test]
    fn ssim_checkerboard_vs_inverse_matches_closed_form() {
        // Every 8x8 window of a checkerboard holds 32 zeros and 32 ones:
        // mu = 1/2, var = 1/4, cov(a, 1-a) = -1/4. Evaluating the SSIM
        // formula with those moments gives the expected value below.
        let n = 16;
        let data: Vec<f64> =
            (0..n * n).map(|i| (((i % n) + (i / n)) % 2) as f64).collect();
        let a = Image::from_vec(n, n, 1, data).unwrap();
        let b = a.map(|v| 1.0 - v);

        let expected = {
            let (mu, var, cov) = (0.5_f64, 0.25_f64, -0.25_f64);
            (2.0 * mu * mu + SSIM_C1) * (2.0 * cov + SSIM_C2)
                / ((mu * mu + mu * mu + SSIM_C1) * (var + var + SSIM_C2))
        };
        let got = ssim(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-12, "got {got}, expected {expected}");
        assert!(got < 0.0);
    }

    #[test]
    fn ssim_constant_pair_is_stable() {
        let a = Image::constant(8, 8, 1, 0.25).unwrap();
        let b = Image::constant(8, 8, 1, 0.75).unwrap();
        let got = ssim(&a, &b).unwrap();
        // Zero variance everywhere: contrast term -> C2/C2 = 1, luminance
        // term -> (2*0.25*0.75 + C1) / (0.25^2 + 0.75^2 + C1).
        let expected = (2.0 * 0.25 * 0.75 + SSIM_C1) / (0.25 * 0.25 + 0.75 * 0.75 + SSIM_C1);
        assert!(got.is_finite());
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::constant(7, 8, 1, 0.5).unwrap();
        assert!(ssim(&a, &a).is_err());
    }
}
