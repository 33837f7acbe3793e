//! Reference implementations written independently of the library.

use std::f64::consts::PI;

pub fn i0(x: f64) -> f64 {
    // Abramowitz-Stegun style series, summed to a fixed number of terms.
    (0..60)
        .scan(1.0, |term, k| {
            let out = *term;
            let k = (k + 1) as f64;
            *term *= (x / 2.0).powi(2) / (k * k);
            Some(out)
        })
        .sum()
}

/// Zero-stuff, convolve with the full windowed-sinc filter, then decimate.
pub fn reference_resample(x: &[f64], up: usize, down: usize) -> Vec<f64> {
    let m = up.max(down);
    let half = 10 * m;
    let n = 2 * half + 1;
    let mut h: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 - half as f64;
            let arg = t / m as f64;
            let sinc = if t == 0.0 {
                1.0
            } else {
                (PI * arg).sin() / (PI * arg)
            };
            let r = 2.0 * i as f64 / (n - 1) as f64 - 1.0;
            let w = i0(8.0 * (1.0 - r * r).max(0.0).sqrt()) / i0(8.0);
            sinc * w / m as f64
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v *= up as f64 / s);
    let mut stuffed = vec![0.0; x.len() * up];
    for (k, v) in x.iter().enumerate() {
        stuffed[k * up] = *v;
    }
    let full: Vec<f64> = (0..stuffed.len() + n - 1)
        .map(|i| {
            (0..n)
                .filter(|&j| i >= j && i - j < stuffed.len())
                .map(|j| h[j] * stuffed[i - j])
                .sum()
        })
        .collect();
    let out_len = (x.len() * up).div_ceil(down);
    (0..out_len).map(|j| full[j * down + half]).collect()
}

/// Accuracy, macro F1, kappa and per-class F1 straight from the definitions.
pub fn brute_force(truth: &[usize], pred: &[usize]) -> (f64, f64, f64, [f64; 5]) {
    let n = truth.len() as f64;
    let acc = truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / n;
    let mut f1 = [0.0; 5];
    let mut pe = 0.0;
    for (k, f) in f1.iter_mut().enumerate() {
        let tp = truth
            .iter()
            .zip(pred)
            .filter(|(a, b)| **a == k && **b == k)
            .count() as f64;
        let t = truth.iter().filter(|a| **a == k).count() as f64;
        let p = pred.iter().filter(|b| **b == k).count() as f64;
        let precision = if p > 0.0 { tp / p } else { 0.0 };
        let recall = if t > 0.0 { tp / t } else { 0.0 };
        *f = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        pe += (t / n) * (p / n);
    }
    let kappa = if pe == 1.0 {
        1.0
    } else {
        (acc - pe) / (1.0 - pe)
    };
    (acc, f1.iter().sum::<f64>() / 5.0, kappa, f1)
}
