//! Block-DCT JPEG compression simulator.
//!
//! Models the lossy core of baseline JPEG: level shift to [-128, 127],
//! orthonormal 8x8 DCT-II per block, quantization with the standard luminance
//! table scaled by the usual quality curve, dequantization, inverse DCT.
//! Entropy coding is lossless and therefore skipped. Edge blocks narrower
//! than 8 samples use a size-matched DCT with the truncated table instead of
//! padding, which keeps the operator exactly idempotent.

use crate::error::{Error, Result};
use crate::image::Image;

/// Annex K luminance quantization table, row = vertical frequency.
const LUMA_QUANT: [[u32; 8]; 8] = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
];

/// Quality-scaled table using the libjpeg convention: scale = 5000/q below
/// 50 else 200 - 2q, entry = clamp((base * scale + 50) / 100, 1, 255).
pub(crate) fn quant_table(quality: u32) -> Result<[[f64; 8]; 8]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidParam(format!("jpeg quality must be in 1..=100, got {quality}")));
    }
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let mut out = [[0.0; 8]; 8];
    for v in 0..8 {
        for u in 0..8 {
            let q = (LUMA_QUANT[v][u] * scale + 50) / 100;
            out[v][u] = q.clamp(1, 255) as f64;
        }
    }
    Ok(out)
}

/// Orthonormal DCT-II matrix of size n, row-major: M[k][j] applied as y = Mx.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for j in 0..n {
            let angle = std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2 * n) as f64;
            m[k * n + j] = s * angle.cos();
        }
    }
    m
}

/// Forward DCT, quantize, inverse DCT of one bh x bw block in place.
fn transform_block(
    block: &mut [f64; 64],
    bh: usize,
    bw: usize,
    mh: &[f64],
    mw: &[f64],
    table: &[[f64; 8]; 8],
) {
    let mut tmp = [0.0f64; 64];
    let mut coef = [0.0f64; 64];
    for r in 0..bh {
        for u in 0..bw {
            let mut acc = 0.0;
            for j in 0..bw {
                acc += mw[u * bw + j] * block[r * bw + j];
            }
            tmp[r * bw + u] = acc;
        }
    }
    for v in 0..bh {
        for u in 0..bw {
            let mut acc = 0.0;
            for r in 0..bh {
                acc += mh[v * bh + r] * tmp[r * bw + u];
            }
            let q = table[v][u];
            coef[v * bw + u] = (acc / q).round() * q;
        }
    }
    for r in 0..bh {
        for u in 0..bw {
            let mut acc = 0.0;
            for v in 0..bh {
                acc += mh[v * bh + r] * coef[v * bw + u];
            }
            tmp[r * bw + u] = acc;
        }
    }
    for r in 0..bh {
        for j in 0..bw {
            let mut acc = 0.0;
            for u in 0..bw {
                acc += mw[u * bw + j] * tmp[r * bw + u];
            }
            block[r * bw + j] = acc;
        }
    }
}

/// Simulated JPEG round trip at the given quality. Each channel is treated
/// as luminance; output samples are not clamped, so values can leave [0, 1]
/// by the quantization error. Applying the same quality twice is a fixed
/// point: the second pass recovers the already-quantized coefficients.
pub fn jpeg_sim(img: &Image, quality: u32) -> Result<Image> {
    let table = quant_table(quality)?;
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    // Only sizes 8, w % 8, and h % 8 can occur as block dimensions.
    let mut mats: Vec<Vec<f64>> = vec![Vec::new(); 9];
    for n in [8, w % 8, h % 8] {
        if n > 0 && mats[n].is_empty() {
            mats[n] = dct_matrix(n);
        }
    }
    let mut out = img.clone();
    let mut block = [0.0f64; 64];
    for c in 0..ch {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let bh = (h - by).min(8);
                let bw = (w - bx).min(8);
                for r in 0..bh {
                    for j in 0..bw {
                        block[r * bw + j] = img.at(bx + j, by + r, c) * 255.0 - 128.0;
                    }
                }
                transform_block(&mut block, bh, bw, &mats[bh], &mats[bw], &table);
                for r in 0..bh {
                    for j in 0..bw {
                        let idx = ((by + r) * w + bx + j) * ch + c;
                        out.data_mut()[idx] = (block[r * bw + j] + 128.0) / 255.0;
                    }
                }
            }
        }
    }
    Ok(out)
}
