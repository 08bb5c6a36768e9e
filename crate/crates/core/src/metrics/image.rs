use crate::error::{domain_err, shape_err, Result};
use crate::tensor::{Element, Tensor};

/// PSNR returned for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;

/// `10·log10(range² / MSE)` in decibels, capped at 100 dB.
pub fn psnr<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, data_range: f64) -> Result<f64> {
    if pred.dims() != target.dims() {
        return shape_err(format!(
            "psnr shapes differ: {:?} vs {:?}",
            pred.dims(),
            target.dims()
        ));
    }
    if !(data_range > 0.0) {
        return domain_err(format!("data range {data_range} must be positive"));
    }
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / pred.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

/// Summed-area table with a zero border: `t[(r)(w+1) + c]` is the sum of
/// `v` over rows `< r` and columns `< c`.
fn integral(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut t = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += v[r * w + c];
            t[(r + 1) * (w + 1) + c + 1] = t[r * (w + 1) + c + 1] + row;
        }
    }
    t
}

fn window_sum(t: &[f64], w: usize, r: usize, c: usize, k: usize) -> f64 {
    let s = w + 1;
    t[(r + k) * s + c + k] - t[r * s + c + k] - t[(r + k) * s + c] + t[r * s + c]
}

/// Mean SSIM of two single-channel H×W images over all valid 7×7 windows
/// with uniform weights and population statistics.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, data_range: f64) -> Result<f64> {
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return domain_err(format!("{h}×{w} image is smaller than the {k}×{k} window"));
    }
    if a.len() != h * w || b.len() != h * w {
        return shape_err(format!("ssim buffers must hold {h}×{w} pixels"));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let ta = integral(a, h, w);
    let tb = integral(b, h, w);
    let taa = integral(&sq(a, a), h, w);
    let tbb = integral(&sq(b, b), h, w);
    let tab = integral(&sq(a, b), h, w);
    let n = (k * k) as f64;
    let mut total = 0.0;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let ma = window_sum(&ta, w, r, c, k) / n;
            let mb = window_sum(&tb, w, r, c, k) / n;
            let va = window_sum(&taa, w, r, c, k) / n - ma * ma;
            let vb = window_sum(&tbb, w, r, c, k) / n - mb * mb;
            let cov = window_sum(&tab, w, r, c, k) / n - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

/// SSIM averaged over every H×W plane of two N×C×H×W tensors.
pub fn ssim<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, data_range: f64) -> Result<f64> {
    if pred.dims() != target.dims() {
        return shape_err(format!(
            "ssim shapes differ: {:?} vs {:?}",
            pred.dims(),
            target.dims()
        ));
    }
    let (n, c, h, w) = pred.nchw()?;
    let plane = h * w;
    let to64 = |t: &Tensor<T>, i: usize| -> Vec<f64> {
        t.data()[i * plane..(i + 1) * plane]
            .iter()
            .map(|v| v.as_f64())
            .collect()
    };
    let mut total = 0.0;
    for i in 0..n * c {
        total += ssim_plane(&to64(pred, i), &to64(target, i), h, w, data_range)?;
    }
    Ok(total / (n * c) as f64)
}
