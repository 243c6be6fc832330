//! Orthogonal Daubechies-6 DWT and MAD-based soft-threshold denoising.
//!
//! The transform is periodized, so analysis is an orthogonal matrix and
//! synthesis its transpose. Inputs whose length is not a multiple of
//! `2^levels` are first extended by half-sample symmetric reflection and the
//! reconstruction is cropped back to the input length.

use super::{DspError, Result};

/// Daubechies-6 scaling (low-pass reconstruction) filter, 12 taps.
pub const DB6_LOWPASS: [f64; 12] = [
    0.11154074335010947,
    0.49462389039845306,
    0.7511339080210954,
    0.31525035170919763,
    -0.22626469396543983,
    -0.12976686756726194,
    0.09750160558732304,
    0.027522865530305727,
    -0.03158203931748603,
    0.0005538422011614961,
    0.004777257510945511,
    -0.0010773010853084796,
];

/// MAD-to-sigma factor for Gaussian noise.
const MAD_SCALE: f64 = 0.6745;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaveletFamily {
    Daubechies,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WaveletSpec {
    pub family: WaveletFamily,
    pub order: usize,
    pub levels: usize,
}

impl WaveletSpec {
    pub const fn db6(levels: usize) -> Self {
        Self { family: WaveletFamily::Daubechies, order: 6, levels }
    }

    pub fn filter_len(&self) -> usize {
        2 * self.order
    }

    /// Shortest input accepted at this depth: `(filter_len - 1) * 2^levels`.
    pub fn min_len(&self) -> usize {
        (self.filter_len() - 1) << self.levels
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.order != 6 || self.levels == 0 {
            return Err(DspError::InvalidParameter(format!(
                "unsupported wavelet db{} at level {}",
                self.order, self.levels
            )));
        }
        if n < self.min_len() {
            return Err(DspError::SignalTooShort { needed: self.min_len(), got: n });
        }
        Ok(())
    }
}

/// Multi-level decomposition: `approx` is the deepest approximation band,
/// `details[0]` the finest (level 1) detail band.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletCoeffs {
    pub approx: Vec<f64>,
    pub details: Vec<Vec<f64>>,
    /// Input length before symmetric extension.
    pub original_len: usize,
}

impl WaveletCoeffs {
    pub fn levels(&self) -> usize {
        self.details.len()
    }
}

fn highpass_taps() -> [f64; 12] {
    let mut hi = [0.0; 12];
    for (k, h) in hi.iter_mut().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        *h = sign * DB6_LOWPASS[11 - k];
    }
    hi
}

fn analysis_step(x: &[f64], lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let half = n / 2;
    let mut a = vec![0.0; half];
    let mut d = vec![0.0; half];
    for i in 0..half {
        let (mut sa, mut sd) = (0.0, 0.0);
        for k in 0..lo.len() {
            let v = x[(2 * i + k) % n];
            sa += lo[k] * v;
            sd += hi[k] * v;
        }
        a[i] = sa;
        d[i] = sd;
    }
    (a, d)
}

fn synthesis_step(a: &[f64], d: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let n = 2 * a.len();
    let mut x = vec![0.0; n];
    for i in 0..a.len() {
        for k in 0..lo.len() {
            x[(2 * i + k) % n] += lo[k] * a[i] + hi[k] * d[i];
        }
    }
    x
}

/// Extends `x` to a multiple of `block` by mirroring its tail.
fn symmetric_extend(x: &[f64], block: usize) -> Vec<f64> {
    let n = x.len();
    let target = n.div_ceil(block) * block;
    let mut out = Vec::with_capacity(target);
    out.extend_from_slice(x);
    for i in 0..target - n {
        out.push(x[n - 1 - (i % n)]);
    }
    out
}

pub fn dwt(x: &[f64], spec: &WaveletSpec) -> Result<WaveletCoeffs> {
    spec.validate(x.len())?;
    let lo = DB6_LOWPASS;
    let hi = highpass_taps();
    let mut approx = symmetric_extend(x, 1 << spec.levels);
    let mut details = Vec::with_capacity(spec.levels);
    for _ in 0..spec.levels {
        let (a, d) = analysis_step(&approx, &lo, &hi);
        details.push(d);
        approx = a;
    }
    Ok(WaveletCoeffs { approx, details, original_len: x.len() })
}

pub fn idwt(coeffs: &WaveletCoeffs) -> Vec<f64> {
    let lo = DB6_LOWPASS;
    let hi = highpass_taps();
    let mut x = coeffs.approx.clone();
    for d in coeffs.details.iter().rev() {
        x = synthesis_step(&x, d, &lo, &hi);
    }
    x.truncate(coeffs.original_len);
    x
}

pub fn soft_threshold(c: f64, tau: f64) -> f64 {
    c.signum() * (c.abs() - tau).max(0.0)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Noise scale from the finest detail band: `median(|D1|) / 0.6745`.
pub fn mad_sigma(coeffs: &WaveletCoeffs) -> f64 {
    let mut finest: Vec<f64> = coeffs.details[0].iter().map(|c| c.abs()).collect();
    median(&mut finest) / MAD_SCALE
}

/// Universal threshold `sigma * sqrt(2 ln n)`.
pub fn universal_threshold(sigma: f64, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    sigma * (2.0 * (n as f64).ln()).sqrt()
}

/// Soft-threshold denoising with the universal threshold applied to every
/// detail band. The approximation band is left untouched.
pub fn wavelet_denoise(x: &[f64], spec: &WaveletSpec) -> Result<Vec<f64>> {
    denoise_with_threshold(x, spec, None)
}

/// As [`wavelet_denoise`], with an optional fixed threshold in place of the
/// MAD estimate.
pub fn denoise_with_threshold(x: &[f64], spec: &WaveletSpec, threshold: Option<f64>) -> Result<Vec<f64>> {
    let mut coeffs = dwt(x, spec)?;
    let tau = threshold.unwrap_or_else(|| universal_threshold(mad_sigma(&coeffs), x.len()));
    if tau > 0.0 {
        for band in &mut coeffs.details {
            for c in band.iter_mut() {
                *c = soft_threshold(*c, tau);
            }
        }
    }
    Ok(idwt(&coeffs))
}
