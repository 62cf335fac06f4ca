//! Resonance peak picking on a [`FrequencyResponse`].
//!
//! Detection runs on the pointwise maximum over all measurement points. A bin
//! is a peak when it is a strict local maximum, exceeds `min_snr` times the
//! median of the spectrum, and is the largest sample within
//! `±min_separation`. Optional Lorentzian refinement fits
//! `A / (1 + ((f - f0) / gamma)^2) + B` around each peak with a damped
//! Gauss-Newton (Levenberg-Marquardt) iteration.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::response_synth::FrequencyResponse;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub frequency: f64,
    pub amplitude: f64,
    /// half width at half maximum; 0 unless refined
    pub width: f64,
    pub refined: bool,
    /// bin index of the local maximum
    pub bin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeakConfig {
    pub min_snr: f64,
    pub min_separation_hz: f64,
    pub refine: bool,
    pub refine_window_bins: usize,
}

impl Default for PeakConfig {
    fn default() -> Self {
        PeakConfig {
            min_snr: 5.0,
            min_separation_hz: 1e3,
            refine: false,
            refine_window_bins: 9,
        }
    }
}

/// Median of the samples; 0 for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bin_width(resp: &FrequencyResponse) -> f64 {
    match resp.freqs.len() {
        0 | 1 => 0.0,
        n => (resp.freqs[n - 1] - resp.freqs[0]) / (n - 1) as f64,
    }
}

/// Local-maximum peak search. Invalid arguments (`min_snr <= 1`,
/// separation below one bin) are clamped to the nearest valid value.
pub fn find_peaks(resp: &FrequencyResponse, min_snr: f64, min_separation: f64) -> Vec<Peak> {
    let c = resp.combined();
    let n = c.len();
    if n < 3 {
        return Vec::new();
    }
    let threshold = min_snr.max(1.0) * median(&c);
    let bw = bin_width(resp);
    let half = ((min_separation / bw + 1e-9).floor() as usize).max(1);

    let mut peaks = Vec::new();
    for i in 1..n - 1 {
        let a = c[i];
        if !(a > c[i - 1] && a > c[i + 1] && a > threshold && a > 0.0) {
            continue;
        }
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        // ties resolve to the lower bin so kept peaks stay separated
        let dominant = (lo..i).all(|j| c[j] < a) && (i + 1..=hi).all(|j| c[j] <= a);
        if dominant {
            peaks.push(Peak {
                frequency: resp.freqs[i],
                amplitude: a,
                width: 0.0,
                refined: false,
                bin: i,
            });
        }
    }
    peaks
}

/// Peak search followed by optional refinement, per `cfg`.
pub fn detect(resp: &FrequencyResponse, cfg: &PeakConfig) -> Vec<Peak> {
    let peaks = find_peaks(resp, cfg.min_snr, cfg.min_separation_hz);
    if !cfg.refine {
        return peaks;
    }
    peaks
        .iter()
        .map(|p| refine_lorentzian(resp, p, cfg.refine_window_bins))
        .collect()
}

fn lorentz(theta: &Vector4<f64>, x: f64) -> (f64, Vector4<f64>) {
    let (a, x0, g, b) = (theta[0], theta[1], theta[2], theta[3]);
    let u = (x - x0) / g;
    let q = 1.0 / (1.0 + u * u);
    let y = a * q + b;
    let dq = 2.0 * a * u * q * q;
    (y, Vector4::new(q, dq / g, dq * u / g, 1.0))
}

fn cost(theta: &Vector4<f64>, xs: &[f64], ys: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let r = y - lorentz(theta, x).0;
            r * r
        })
        .sum()
}

/// Fits a Lorentzian plus constant baseline over `window_bins` bins centred
/// on the peak. Falls back to the input peak when the fit diverges, leaves
/// the window or explains the data poorly.
pub fn refine_lorentzian(resp: &FrequencyResponse, peak: &Peak, window_bins: usize) -> Peak {
    let fallback = Peak {
        refined: false,
        width: 0.0,
        ..*peak
    };
    let c = resp.combined();
    let n = c.len();
    let bw = bin_width(resp);
    let half = window_bins.max(5) / 2;
    if n < 5 || peak.bin >= n || bw <= 0.0 {
        return fallback;
    }
    let lo = peak.bin.saturating_sub(half);
    let hi = (peak.bin + half).min(n - 1);
    if hi - lo + 1 < 5 {
        return fallback;
    }
    // coordinates in bins relative to the peak bin
    let xs: Vec<f64> = (lo..=hi).map(|i| i as f64 - peak.bin as f64).collect();
    let ys: Vec<f64> = c[lo..=hi].to_vec();
    let ymax = c[peak.bin];
    let base = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let halfmax = base + 0.5 * (ymax - base);
    let above = ys.iter().filter(|&&y| y >= halfmax).count() as f64;
    let mut theta = Vector4::new(ymax - base, 0.0, (0.5 * above).max(0.5), base);
    if !(theta[0] > 0.0) {
        return fallback;
    }

    let mut current = cost(&theta, &xs, &ys);
    let mut lambda = 1e-3;
    for _ in 0..200 {
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for (&x, &y) in xs.iter().zip(&ys) {
            let (f, j) = lorentz(&theta, x);
            jtj += j * j.transpose();
            jtr += j * (y - f);
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut m = jtj;
            for k in 0..4 {
                m[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = m.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = theta + step;
            let tc = if trial[2] > 0.0 {
                cost(&trial, &xs, &ys)
            } else {
                f64::INFINITY
            };
            if tc.is_finite() && tc <= current {
                let rel = (current - tc) / current.max(1e-300);
                theta = trial;
                current = tc;
                lambda = (lambda / 3.0).max(1e-12);
                improved = rel > 1e-14;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }

    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let total: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let r2 = if total > 0.0 { 1.0 - current / total } else { 0.0 };
    let (a, x0, g) = (theta[0], theta[1], theta[2]);
    let inside = x0 >= xs[0] && x0 <= xs[xs.len() - 1];
    if !(a.is_finite() && x0.is_finite() && g.is_finite()) || a <= 0.0 || g <= 0.0 || !inside || r2 < 0.9 {
        return fallback;
    }
    Peak {
        frequency: resp.freqs[peak.bin] + x0 * bw,
        amplitude: peak.amplitude,
        width: g * bw,
        refined: true,
        bin: peak.bin,
    }
}
