//! Reconstruction quality on the `[0, 1]` scale (signal values are mapped
//! with `(v + 1) / 2` first).

use crate::error::{Error, Result};
use crate::signalio::Signal;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &Signal, b: &Signal) -> Result<()> {
    if a.resolution() != b.resolution() || a.channels() != b.channels() {
        return Err(Error::Shape(format!(
            "signals differ in shape: {:?}x{} vs {:?}x{}",
            a.resolution(),
            a.channels(),
            b.resolution(),
            b.channels()
        )));
    }
    Ok(())
}

fn unit(v: f32) -> f64 {
    (v as f64 + 1.0) / 2.0
}

pub fn mse(a: &Signal, b: &Signal) -> Result<f64> {
    check_shapes(a, b)?;
    let sum: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| {
            let d = unit(x) - unit(y);
            d * d
        })
        .sum();
    Ok(sum / a.values().len() as f64)
}

/// `10·log10(1 / mse)`; `+∞` for identical signals.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(a: &Signal, b: &Signal) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        let row = &img[r * w..(r + 1) * w];
        for c in 0..ow {
            tmp[r * ow + c] = k.iter().zip(&row[c..c + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[(r + i) * ow + c])
                .sum();
        }
    }
    out
}

/// Single-scale SSIM: 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, data range 1, mean over valid window positions, averaged
/// over channels.
pub fn ssim(a: &Signal, b: &Signal) -> Result<f64> {
    check_shapes(a, b)?;
    if a.dim() != 2 {
        return Err(Error::Shape("SSIM needs a 2-D signal".into()));
    }
    let (h, w) = (a.resolution()[0], a.resolution()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} samples, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel();
    let ch = a.channels();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for c in 0..ch {
        let x: Vec<f64> = a.values().iter().skip(c).step_by(ch).map(|&v| unit(v)).collect();
        let y: Vec<f64> = b.values().iter().skip(c).step_by(ch).map(|&v| unit(v)).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / ch as f64)
}
