//! Second-order-section IIR design and zero-phase filtering.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use super::{DspError, Result};

/// One biquad section, `a0` normalized to 1:
///
/// `H(z) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiquadCoeffs {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl BiquadCoeffs {
    pub fn is_finite(&self) -> bool {
        [self.b0, self.b1, self.b2, self.a1, self.a2].iter().all(|c| c.is_finite())
    }

    /// Largest pole magnitude of the section.
    pub fn pole_radius(&self) -> f64 {
        // roots of z^2 + a1 z + a2
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        let r1 = (-self.a1 + disc) / 2.0;
        let r2 = (-self.a1 - disc) / 2.0;
        r1.norm().max(r2.norm())
    }

    pub fn is_stable(&self) -> bool {
        self.is_finite() && self.pole_radius() < 1.0
    }

    /// Complex response at `freq` Hz for sampling rate `fs`.
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let zinv = Complex64::from_polar(1.0, -2.0 * PI * freq / fs);
        let zinv2 = zinv * zinv;
        (self.b0 + zinv * self.b1 + zinv2 * self.b2) / (1.0 + zinv * self.a1 + zinv2 * self.a2)
    }

    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }
}

impl AsRef<[BiquadCoeffs]> for BiquadCoeffs {
    fn as_ref(&self) -> &[BiquadCoeffs] {
        std::slice::from_ref(self)
    }
}

/// A cascade of biquad sections applied in order.
#[derive(Debug, Clone, PartialEq)]
pub struct IirCascade {
    pub sections: Vec<BiquadCoeffs>,
    pub description: String,
}

impl IirCascade {
    pub fn is_stable(&self) -> bool {
        !self.sections.is_empty() && self.sections.iter().all(BiquadCoeffs::is_stable)
    }

    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        self.sections.iter().map(|s| s.response(freq, fs)).product()
    }

    pub fn magnitude(&self, freq: f64, fs: f64) -> f64 {
        self.response(freq, fs).norm()
    }
}

impl AsRef<[BiquadCoeffs]> for IirCascade {
    fn as_ref(&self) -> &[BiquadCoeffs] {
        &self.sections
    }
}

impl From<BiquadCoeffs> for IirCascade {
    fn from(section: BiquadCoeffs) -> Self {
        Self { sections: vec![section], description: "biquad".into() }
    }
}

fn check_band(freq: f64, fs: f64) -> Result<()> {
    if !(fs.is_finite() && fs > 0.0 && freq.is_finite() && freq > 0.0 && freq < fs / 2.0) {
        return Err(DspError::FrequencyOutOfRange { freq, fs });
    }
    Ok(())
}

fn check_order(order: usize) -> Result<()> {
    if order < 2 || !order.is_multiple_of(2) {
        return Err(DspError::UnsupportedOrder(order));
    }
    Ok(())
}

/// Notch (band-reject) biquad from the audio-EQ cookbook, `alpha = sin(w0)/(2q)`.
pub fn design_notch(f0: f64, q: f64, fs: f64) -> Result<BiquadCoeffs> {
    check_band(f0, fs)?;
    if !(q.is_finite() && q > 0.0) {
        return Err(DspError::InvalidParameter(format!("notch quality factor {q} must be positive")));
    }
    let w0 = 2.0 * PI * f0 / fs;
    let (sin_w, cos_w) = w0.sin_cos();
    let alpha = sin_w / (2.0 * q);
    let a0 = 1.0 + alpha;
    Ok(BiquadCoeffs {
        b0: 1.0 / a0,
        b1: -2.0 * cos_w / a0,
        b2: 1.0 / a0,
        a1: -2.0 * cos_w / a0,
        a2: (1.0 - alpha) / a0,
    })
}

/// Left-half-plane poles of the order-`order` analog Butterworth prototype
/// with `Im >= 0` (one representative per conjugate pair).
fn prototype_upper_poles(order: usize) -> Vec<Complex64> {
    (0..order / 2)
        .map(|k| {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect()
}

/// Bilinear map of an analog pole, with `k = 2 fs`.
fn bilinear(p: Complex64, k: f64) -> Complex64 {
    (k + p) / (k - p)
}

fn section_from_pole(pole: Complex64, b: [f64; 3]) -> BiquadCoeffs {
    BiquadCoeffs { b0: b[0], b1: b[1], b2: b[2], a1: -2.0 * pole.re, a2: pole.norm_sqr() }
}

/// Spreads the gain correction evenly across sections.
fn normalize_gain(sections: &mut [BiquadCoeffs], magnitude: f64) {
    let per_section = magnitude.powf(-1.0 / sections.len() as f64);
    for s in sections {
        s.b0 *= per_section;
        s.b1 *= per_section;
        s.b2 *= per_section;
    }
}

/// Butterworth high-pass as `order / 2` sections, bilinear transform with
/// prewarped cutoff. Unity gain at Nyquist, zero gain at DC.
pub fn design_butter_highpass(cutoff: f64, order: usize, fs: f64) -> Result<IirCascade> {
    check_band(cutoff, fs)?;
    check_order(order)?;
    let k = 2.0 * fs;
    let wc = k * (PI * cutoff / fs).tan();
    let mut sections: Vec<_> = prototype_upper_poles(order)
        .into_iter()
        .map(|p| section_from_pole(bilinear(wc / p, k), [1.0, -2.0, 1.0]))
        .collect();
    let nyquist = IirCascade { sections: sections.clone(), description: String::new() }.magnitude(fs / 2.0, fs);
    normalize_gain(&mut sections, nyquist);
    Ok(IirCascade { sections, description: format!("butterworth highpass order {order} at {cutoff} Hz, fs {fs} Hz") })
}

/// Butterworth low-pass as `order / 2` sections. Unity gain at DC.
pub fn design_butter_lowpass(cutoff: f64, order: usize, fs: f64) -> Result<IirCascade> {
    check_band(cutoff, fs)?;
    check_order(order)?;
    let k = 2.0 * fs;
    let wc = k * (PI * cutoff / fs).tan();
    let mut sections: Vec<_> = prototype_upper_poles(order)
        .into_iter()
        .map(|p| section_from_pole(bilinear(wc * p, k), [1.0, 2.0, 1.0]))
        .collect();
    let dc = IirCascade { sections: sections.clone(), description: String::new() }.magnitude(0.0, fs);
    normalize_gain(&mut sections, dc);
    Ok(IirCascade { sections, description: format!("butterworth lowpass order {order} at {cutoff} Hz, fs {fs} Hz") })
}

/// Butterworth band-pass from an order-`order` low-pass prototype.
///
/// Each prototype pole maps to two band-pass poles, so the cascade has
/// `order` sections (`2 * order` poles). Gain is unity at the digital
/// frequency corresponding to the geometric mean of the prewarped edges.
pub fn design_butter_bandpass(low: f64, high: f64, order: usize, fs: f64) -> Result<IirCascade> {
    check_band(low, fs)?;
    check_band(high, fs)?;
    if low >= high {
        return Err(DspError::FrequencyOutOfRange { freq: low, fs });
    }
    check_order(order)?;
    let k = 2.0 * fs;
    let wl = k * (PI * low / fs).tan();
    let wh = k * (PI * high / fs).tan();
    let bw = wh - wl;
    let w0_sq = wl * wh;
    let mut sections = Vec::with_capacity(order);
    for p in prototype_upper_poles(order) {
        // s^2 - p bw s + w0^2 = 0
        let pb = p * bw;
        let disc = (pb * pb - 4.0 * w0_sq).sqrt();
        for s in [(pb + disc) / 2.0, (pb - disc) / 2.0] {
            sections.push(section_from_pole(bilinear(s, k), [1.0, 0.0, -1.0]));
        }
    }
    let center = fs / PI * (w0_sq.sqrt() / k).atan();
    let gain = IirCascade { sections: sections.clone(), description: String::new() }.magnitude(center, fs);
    normalize_gain(&mut sections, gain);
    Ok(IirCascade {
        sections,
        description: format!("butterworth bandpass order {order} {low}-{high} Hz, fs {fs} Hz"),
    })
}

/// Steady-state transposed-direct-form-II states for a unit step, scaled
/// through the cascade.
fn step_initial_states(sections: &[BiquadCoeffs]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sections
        .iter()
        .map(|s| {
            let g = s.dc_gain();
            let z2 = s.b2 - s.a2 * g;
            let z1 = s.b1 - s.a1 * g + z2;
            let zi = [z1 * scale, z2 * scale];
            scale *= g;
            zi
        })
        .collect()
}

/// Runs the cascade in place with transposed-direct-form-II sections.
fn sosfilt_in_place(sections: &[BiquadCoeffs], x: &mut [f64], mut states: Vec<[f64; 2]>) {
    for (s, z) in sections.iter().zip(states.iter_mut()) {
        let (mut z1, mut z2) = (z[0], z[1]);
        for v in x.iter_mut() {
            let input = *v;
            let y = s.b0 * input + z1;
            z1 = s.b1 * input - s.a1 * y + z2;
            z2 = s.b2 * input - s.a2 * y;
            *v = y;
        }
        *z = [z1, z2];
    }
}

/// Causal filtering from rest.
pub fn lfilter<F: AsRef<[BiquadCoeffs]>>(filter: &F, x: &[f64]) -> Vec<f64> {
    let sections = filter.as_ref();
    let mut y = x.to_vec();
    sosfilt_in_place(sections, &mut y, vec![[0.0; 2]; sections.len()]);
    y
}

/// Edge padding used by [`filtfilt`] for a cascade of `n_sections`.
pub fn filtfilt_padlen(n_sections: usize) -> usize {
    3 * (2 * n_sections + 1)
}

/// Zero-phase forward-backward filtering.
///
/// The input is extended at both ends by odd reflection, each pass starts
/// from the step-response steady state scaled to the first sample it sees,
/// and the padding is trimmed afterwards.
pub fn filtfilt<F: AsRef<[BiquadCoeffs]>>(filter: &F, x: &[f64]) -> Result<Vec<f64>> {
    let sections = filter.as_ref();
    if sections.is_empty() {
        return Ok(x.to_vec());
    }
    let pad = filtfilt_padlen(sections.len());
    if x.len() <= pad {
        return Err(DspError::SignalTooShort { needed: pad + 1, got: x.len() });
    }
    let n = x.len();
    let (first, last) = (x[0], x[n - 1]);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

    let zi = step_initial_states(sections);
    let scaled = |v: f64| zi.iter().map(|z| [z[0] * v, z[1] * v]).collect::<Vec<_>>();

    let x0 = ext[0];
    sosfilt_in_place(sections, &mut ext, scaled(x0));
    ext.reverse();
    let y0 = ext[0];
    sosfilt_in_place(sections, &mut ext, scaled(y0));
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}
