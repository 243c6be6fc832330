//! Rational-rate polyphase resampling with a Kaiser-windowed sinc kernel.

use std::f64::consts::PI;

use super::{DspError, Result};

/// Taps applied to the input for every output sample.
pub const TAPS_PER_PHASE: usize = 64;
pub const KAISER_BETA: f64 = 8.0;

/// Phase tables larger than this are computed on the fly instead.
const MAX_TABLE_PHASES: u64 = 4096;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half_sq = (x / 2.0).powi(2);
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= half_sq / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Reduced `(up, down)` with `fs_out / fs_in = up / down`. Rates are taken
/// to a resolution of 1 mHz.
fn rational_ratio(fs_in: f64, fs_out: f64) -> (u64, u64) {
    let to_int = |f: f64| -> u64 {
        if f.fract() == 0.0 && f < 1e12 {
            f as u64
        } else {
            (f * 1000.0).round() as u64
        }
    };
    let (a, b) = if fs_in.fract() == 0.0 && fs_out.fract() == 0.0 {
        (to_int(fs_out), to_int(fs_in))
    } else {
        ((fs_out * 1000.0).round() as u64, (fs_in * 1000.0).round() as u64)
    };
    let g = gcd(a, b).max(1);
    (a / g, b / g)
}

/// Kernel taps for an output falling `frac` input samples after input
/// index `n`; tap `j` multiplies `x[n - HALF + 1 + j]`. Taps sum to one.
fn phase_taps(frac: f64, cutoff: f64) -> [f64; TAPS_PER_PHASE] {
    let half = (TAPS_PER_PHASE / 2) as f64;
    let norm = bessel_i0(KAISER_BETA);
    let mut taps = [0.0; TAPS_PER_PHASE];
    for (j, tap) in taps.iter_mut().enumerate() {
        let offset = j as f64 - (half - 1.0);
        let tau = frac - offset;
        let r = tau / half;
        let window = if r.abs() <= 1.0 { bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm } else { 0.0 };
        *tap = cutoff * sinc(cutoff * tau) * window;
    }
    let sum: f64 = taps.iter().sum();
    if sum != 0.0 {
        for t in &mut taps {
            *t /= sum;
        }
    }
    taps
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Resamples `x` from `fs_in` to `fs_out`.
///
/// Output length is `round(len * fs_out / fs_in)`; output sample `m` sits at
/// input time `m * fs_in / fs_out`. The anti-aliasing cutoff is
/// `min(fs_in, fs_out) / 2`. Samples beyond the ends are reflected.
pub fn resample(x: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>> {
    if !(fs_in.is_finite() && fs_in > 0.0 && fs_out.is_finite() && fs_out > 0.0) {
        return Err(DspError::InvalidParameter(format!("sampling rates {fs_in} -> {fs_out} must be positive")));
    }
    if fs_in == fs_out || x.is_empty() {
        return Ok(x.to_vec());
    }
    let (up, down) = rational_ratio(fs_in, fs_out);
    let out_len = (x.len() as f64 * fs_out / fs_in).round() as usize;
    let cutoff = (up as f64 / down as f64).min(1.0);
    let table: Option<Vec<[f64; TAPS_PER_PHASE]>> = (up <= MAX_TABLE_PHASES)
        .then(|| (0..up).map(|p| phase_taps(p as f64 / up as f64, cutoff)).collect());

    let n = x.len();
    let half = TAPS_PER_PHASE as i64 / 2;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len as u64 {
        let pos = m * down;
        let base = (pos / up) as i64;
        let phase = pos % up;
        let computed;
        let taps = match &table {
            Some(t) => &t[phase as usize],
            None => {
                computed = phase_taps(phase as f64 / up as f64, cutoff);
                &computed
            }
        };
        let start = base - half + 1;
        let acc: f64 = if start >= 0 && (start as usize + TAPS_PER_PHASE) <= n {
            let s = start as usize;
            taps.iter().zip(&x[s..s + TAPS_PER_PHASE]).map(|(t, v)| t * v).sum()
        } else {
            taps.iter().enumerate().map(|(j, t)| t * x[reflect(start + j as i64, n)]).sum()
        };
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex64, FftPlanner};

    fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    fn dominant_bin(x: &[f64]) -> usize {
        let mut buf: Vec<Complex64> = x.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        (1..buf.len() / 2).max_by(|a, b| buf[*a].norm().total_cmp(&buf[*b].norm())).unwrap()
    }

    #[test]
    fn identity_when_rates_match() {
        let x = sine(3.0, 500.0, 777);
        assert_eq!(resample(&x, 500.0, 500.0).unwrap(), x);
    }

    #[test]
    fn length_arithmetic() {
        assert_eq!(resample(&vec![0.0; 5000], 500.0, 250.0).unwrap().len(), 2500);
        assert_eq!(resample(&vec![0.0; 3600], 360.0, 250.0).unwrap().len(), 2500);
        assert_eq!(resample(&vec![0.0; 1001], 500.0, 250.0).unwrap().len(), 501);
    }

    #[test]
    fn five_hz_survives_decimation() {
        let y = resample(&sine(5.0, 500.0, 5000), 500.0, 250.0).unwrap();
        // 2500 samples at 250 Hz: 0.1 Hz bins, 5 Hz = bin 50
        assert_eq!(dominant_bin(&y), 50);
    }

    #[test]
    fn tone_amplitude_and_alignment() {
        let x = sine(7.0, 360.0, 3600);
        let y = resample(&x, 360.0, 250.0).unwrap();
        let expect = sine(7.0, 250.0, 2500);
        let err = y[100..2400].iter().zip(&expect[100..2400]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn constant_preserved() {
        let y = resample(&vec![2.5; 1000], 500.0, 250.0).unwrap();
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn aliasing_tone_is_suppressed() {
        // 200 Hz at 500 Hz is above the new 125 Hz Nyquist
        let y = resample(&sine(200.0, 500.0, 5000), 500.0, 250.0).unwrap();
        let peak = y[100..2400].iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(peak < 1e-2, "{peak}");
    }

    #[test]
    fn upsampling() {
        let y = resample(&sine(5.0, 100.0, 1000), 100.0, 250.0).unwrap();
        assert_eq!(y.len(), 2500);
        let expect = sine(5.0, 250.0, 2500);
        let err = y[100..2400].iter().zip(&expect[100..2400]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn bad_rates() {
        assert!(resample(&[1.0], 0.0, 250.0).is_err());
        assert!(resample(&[1.0], 250.0, -1.0).is_err());
    }

    #[test]
    fn reduced_ratio() {
        assert_eq!(rational_ratio(500.0, 250.0), (1, 2));
        assert_eq!(rational_ratio(360.0, 250.0), (25, 36));
        assert_eq!(rational_ratio(257.5, 250.0), (100, 103));
    }

    #[test]
    fn bessel_reference() {
        // I0(8) = 427.564115721804...
        assert!((bessel_i0(8.0) - 427.564_115_721_804_7).abs() < 1e-9);
    }
}
