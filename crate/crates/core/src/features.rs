//! Per-lead time, frequency and time-frequency features.
//!
//! Every lead contributes a block of 19 values, concatenated in canonical
//! lead order into a 228-long [`FeatureVector`]:
//!
//! | idx   | feature                                      |
//! |-------|----------------------------------------------|
//! | 0-1   | max, min (mV)                                |
//! | 2     | heart rate (bpm)                             |
//! | 3     | SDNN (ms)                                    |
//! | 4     | QRS duration (ms)                            |
//! | 5     | T-wave amplitude (mV)                        |
//! | 6     | ST deviation (mV)                            |
//! | 7-8   | mean absolute / RMS successive difference    |
//! | 9-12  | total power, peak power, dominant frequency, spectral centroid |
//! | 13-18 | db6 band energies A5, D5, D4, D3, D2, D1     |
//!
//! Rhythm and morphology features need at least two R peaks and are set to
//! zero otherwise, so the vector is always finite.

use rayon::prelude::*;
use rustfft::{num_complex::Complex64, FftPlanner};
use thiserror::Error;

use crate::dsp::{self, DspError, Segment, WaveletSpec};

pub const FEATURE_LAYOUT_VERSION: u32 = 1;
pub const TIME_FEATURES: usize = 9;
pub const FREQ_FEATURES: usize = 4;
pub const TIMEFREQ_FEATURES: usize = 6;
pub const FEATURES_PER_LEAD: usize = TIME_FEATURES + FREQ_FEATURES + TIMEFREQ_FEATURES;
pub const FEATURE_DIM: usize = 12 * FEATURES_PER_LEAD;

/// Depth of the time-frequency decomposition.
pub const TIMEFREQ_LEVELS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("signal too short: need at least {needed} samples, got {got}")]
    SignalTooShort { needed: usize, got: usize },
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout_version: u32,
}

impl FeatureVector {
    pub fn lead_block(&self, lead: usize) -> &[f64] {
        &self.values[lead * FEATURES_PER_LEAD..(lead + 1) * FEATURES_PER_LEAD]
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|v| *v as f32).collect()
    }
}

/// Detected R peaks as sample indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RPeaks {
    pub indices: Vec<usize>,
    pub fs: f64,
}

impl RPeaks {
    /// RR intervals in seconds.
    pub fn rr_intervals(&self) -> Vec<f64> {
        self.indices.windows(2).map(|w| (w[1] - w[0]) as f64 / self.fs).collect()
    }
}

fn samples(ms: f64, fs: f64) -> usize {
    (ms * 1e-3 * fs).round() as usize
}

/// Centered moving average.
fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let n = x.len();
    let width = width.max(1);
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    let back = width / 2;
    let fwd = width - back;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(back);
            let hi = (i + fwd).min(n);
            (prefix[hi] - prefix[lo]) / width as f64
        })
        .collect()
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Pan-Tompkins style R-peak detection.
///
/// Band-pass 5-15 Hz (zero-phase), five-point derivative, squaring, 150 ms
/// moving-window integration, then an adaptive signal/noise threshold with a
/// 200 ms refractory period. Each detection is moved to the maximum of the
/// band-passed signal nearby.
pub fn detect_r_peaks(x: &[f64], fs: f64) -> Result<RPeaks> {
    let min_len = (2.0 * fs).ceil() as usize;
    if x.len() < min_len {
        return Err(FeatureError::SignalTooShort { needed: min_len, got: x.len() });
    }
    let none = RPeaks { indices: Vec::new(), fs };
    let bp = dsp::filtfilt(&dsp::design_butter_bandpass(5.0, 15.0, 2, fs)?, x)?;

    let n = x.len();
    let mut deriv = vec![0.0; n];
    for i in 2..n.saturating_sub(2) {
        deriv[i] = (-bp[i - 2] - 2.0 * bp[i - 1] + 2.0 * bp[i + 1] + bp[i + 2]) * fs / 8.0;
    }
    let squared: Vec<f64> = deriv.iter().map(|d| d * d).collect();
    let mwi = moving_average(&squared, samples(150.0, fs));

    let peak_abs = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-10 * (peak_abs * fs).powi(2) + 1e-12;
    let learning = &mwi[..min_len];
    if mwi.iter().fold(0.0f64, |m, v| m.max(*v)) <= floor {
        return Ok(none);
    }
    let mut spki = 0.25 * learning.iter().fold(0.0f64, |m, v| m.max(*v));
    let mut npki = 0.5 * learning.iter().sum::<f64>() / learning.len() as f64;
    let refractory = samples(200.0, fs).max(1);

    let mut detections: Vec<(usize, f64)> = Vec::new();
    for i in 1..n - 1 {
        let v = mwi[i];
        if !(v > mwi[i - 1] && v >= mwi[i + 1]) || v <= floor {
            continue;
        }
        let threshold = npki + 0.25 * (spki - npki);
        if v > threshold {
            match detections.last_mut() {
                Some(last) if i - last.0 < refractory => {
                    if v > last.1 {
                        *last = (i, v);
                    }
                }
                _ => detections.push((i, v)),
            }
            spki = 0.125 * v + 0.875 * spki;
        } else {
            npki = 0.125 * v + 0.875 * npki;
        }
    }

    let search = samples(75.0, fs);
    let mut peaks: Vec<usize> = Vec::with_capacity(detections.len());
    for (i, _) in detections {
        let lo = i.saturating_sub(search);
        let hi = (i + search + 1).min(n);
        let r = lo + argmax(&bp[lo..hi]);
        match peaks.last_mut() {
            Some(last) if r <= *last || r - *last < refractory => {
                if bp[r] > bp[*last] {
                    *last = r;
                }
            }
            _ => peaks.push(r),
        }
    }
    Ok(RPeaks { indices: peaks, fs })
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// QRS onset-to-offset span around one R peak, in samples.
fn qrs_span(slope: &[f64], r: usize, half_window: usize) -> usize {
    let n = slope.len();
    let lo = r.saturating_sub(half_window);
    let hi = (r + half_window).min(n - 1);
    let local_max = slope[lo..=hi].iter().fold(0.0f64, |m, v| m.max(*v));
    if local_max == 0.0 {
        return 0;
    }
    let cut = 0.1 * local_max;
    let up = lo + argmax(&slope[lo..=r]);
    let down = r + argmax(&slope[r..=hi]);
    let mut onset = up;
    while onset > lo && slope[onset] >= cut {
        onset -= 1;
    }
    let mut offset = down;
    while offset < hi && slope[offset] >= cut {
        offset += 1;
    }
    offset - onset
}

/// The nine time-domain features of one lead.
pub fn time_features(x: &[f64], fs: f64) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    if x.is_empty() {
        return out;
    }
    out[0] = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out[1] = x.iter().copied().fold(f64::INFINITY, f64::min);
    if x.len() > 1 {
        let diffs: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        out[7] = mean(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
        out[8] = mean(&diffs.iter().map(|d| d * d).collect::<Vec<_>>()).sqrt();
    }

    let peaks = detect_r_peaks(x, fs).map(|p| p.indices).unwrap_or_default();
    if peaks.len() < 2 {
        return out;
    }
    let rr = RPeaks { indices: peaks.clone(), fs }.rr_intervals();
    let mean_rr = mean(&rr);
    out[2] = 60.0 / mean_rr;
    out[3] = (rr.iter().map(|v| (v - mean_rr).powi(2)).sum::<f64>() / rr.len() as f64).sqrt() * 1000.0;

    let n = x.len();
    let mut slope = vec![0.0; n];
    for i in 1..n - 1 {
        slope[i] = ((x[i + 1] - x[i - 1]) * fs / 2.0).abs();
    }
    let half = samples(100.0, fs);
    let spans: Vec<f64> = peaks.iter().map(|&r| qrs_span(&slope, r, half) as f64 / fs * 1000.0).collect();
    out[4] = mean(&spans);

    let (t_lo, t_hi) = (samples(150.0, fs), samples(350.0, fs));
    let t_amps: Vec<f64> = peaks
        .iter()
        .filter(|&&r| r + t_lo < n)
        .map(|&r| x[r + t_lo..(r + t_hi + 1).min(n)].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    out[5] = mean(&t_amps);

    let (st_at, base_lo, base_hi) = (samples(80.0, fs), samples(80.0, fs), samples(40.0, fs));
    let st: Vec<f64> = peaks
        .iter()
        .filter(|&&r| r >= base_lo && r + st_at < n)
        .map(|&r| x[r + st_at] - mean(&x[r - base_lo..=r - base_hi]))
        .collect();
    out[6] = mean(&st);
    out
}

/// Total power, peak power, dominant frequency (Hz) and spectral centroid
/// (Hz) of the one-sided Hann-windowed periodogram of the mean-removed lead.
pub fn freq_features(x: &[f64], fs: f64) -> Result<[f64; FREQ_FEATURES]> {
    const MIN_LEN: usize = 64;
    if x.len() < MIN_LEN {
        return Err(FeatureError::SignalTooShort { needed: MIN_LEN, got: x.len() });
    }
    let n = x.len();
    let mu = mean(x);
    let window: Vec<f64> =
        (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect();
    let mut buf: Vec<Complex64> = x.iter().zip(&window).map(|(v, w)| Complex64::new((v - mu) * w, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let scale = 1.0 / (fs * window.iter().map(|w| w * w).sum::<f64>());
    let bins = n / 2 + 1;
    let power: Vec<f64> = (0..bins)
        .map(|k| {
            let p = buf[k].norm_sqr() * scale;
            let doubled = k > 0 && !(n.is_multiple_of(2) && k == n / 2);
            if doubled {
                2.0 * p
            } else {
                p
            }
        })
        .collect();
    let df = fs / n as f64;
    let total: f64 = power.iter().sum();
    let peak_bin = argmax(&power);
    let centroid = if total > 0.0 {
        power.iter().enumerate().map(|(k, p)| k as f64 * df * p).sum::<f64>() / total
    } else {
        0.0
    };
    Ok([total, power[peak_bin], peak_bin as f64 * df, centroid])
}

/// Energies of the level-5 db6 bands `[A5, D5, D4, D3, D2, D1]`.
pub fn timefreq_features(x: &[f64]) -> Result<[f64; TIMEFREQ_FEATURES]> {
    let coeffs = dsp::dwt(x, &WaveletSpec::db6(TIMEFREQ_LEVELS))?;
    let energy = |c: &[f64]| c.iter().map(|v| v * v).sum::<f64>();
    let mut out = [0.0; TIMEFREQ_FEATURES];
    out[0] = energy(&coeffs.approx);
    for (slot, band) in out[1..].iter_mut().zip(coeffs.details.iter().rev()) {
        *slot = energy(band);
    }
    Ok(out)
}

fn lead_block(x: &[f64], fs: f64) -> Result<Vec<f64>> {
    let mut block = Vec::with_capacity(FEATURES_PER_LEAD);
    block.extend(time_features(x, fs));
    block.extend(freq_features(x, fs)?);
    block.extend(timefreq_features(x)?);
    Ok(block)
}

pub fn extract_features(seg: &Segment) -> Result<FeatureVector> {
    let fs = seg.fs();
    let blocks = seg.data.par_iter().map(|lead| lead_block(lead, fs)).collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = blocks.into_iter().flatten().collect();
    debug_assert_eq!(values.len(), FEATURE_DIM);
    Ok(FeatureVector { values, layout_version: FEATURE_LAYOUT_VERSION })
}
