//! ECG preprocessing: powerline notches, Butterworth band-pass and baseline
//! high-pass (all zero-phase), wavelet denoising, resampling to 250 Hz and
//! segmentation into 5 s windows.

mod iir;
mod resample;
mod wavelet;

use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::{EcgRecord, CANONICAL_LEADS};

pub use iir::{
    design_butter_bandpass, design_butter_highpass, design_butter_lowpass, design_notch, filtfilt, filtfilt_padlen,
    lfilter, BiquadCoeffs, IirCascade,
};
pub use resample::{resample, KAISER_BETA, TAPS_PER_PHASE};
pub use wavelet::{
    denoise_with_threshold, dwt, idwt, mad_sigma, soft_threshold, universal_threshold, wavelet_denoise,
    WaveletCoeffs, WaveletFamily, WaveletSpec, DB6_LOWPASS,
};

/// Sampling rate of every segment.
pub const SEGMENT_FS: f64 = 250.0;
/// Samples per lead in a 5 s segment at [`SEGMENT_FS`].
pub const SEGMENT_LEN: usize = 1250;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("frequency {freq} Hz outside (0, {}) for fs {fs} Hz", fs / 2.0)]
    FrequencyOutOfRange { freq: f64, fs: f64 },
    #[error("unsupported filter order {0}, must be even and >= 2")]
    UnsupportedOrder(usize),
    #[error("signal too short: need at least {needed} samples, got {got}")]
    SignalTooShort { needed: usize, got: usize },
    #[error("expected sampling rate {expected} Hz, got {got} Hz")]
    WrongSamplingRate { expected: f64, got: f64 },
    #[error("record leads are not in canonical 12-lead order")]
    NotStandardized,
    #[error("{0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// A 12-lead, 5 s window at 250 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub record_id: String,
    pub segment_index: usize,
    /// 12 rows of [`SEGMENT_LEN`] samples in canonical lead order.
    pub data: Vec<Vec<f64>>,
}

impl Segment {
    pub fn new(record_id: impl Into<String>, segment_index: usize, data: Vec<Vec<f64>>) -> Result<Self> {
        if data.len() != 12 || data.iter().any(|r| r.len() != SEGMENT_LEN) {
            return Err(DspError::InvalidParameter(format!(
                "segment must be 12x{SEGMENT_LEN}, got {}x{}",
                data.len(),
                data.first().map_or(0, Vec::len)
            )));
        }
        Ok(Self { record_id: record_id.into(), segment_index, data })
    }

    pub fn fs(&self) -> f64 {
        SEGMENT_FS
    }

    /// Lead-major flattening into 15000 `f32`s.
    pub fn flatten(&self) -> Vec<f32> {
        self.data.iter().flatten().map(|v| *v as f32).collect()
    }

    /// Identifier used when a segment is stored on its own.
    pub fn storage_id(&self) -> String {
        format!("{}__s{:03}", self.record_id, self.segment_index)
    }

    pub fn to_record(&self) -> EcgRecord {
        EcgRecord {
            record_id: self.storage_id(),
            leads: CANONICAL_LEADS.iter().map(|s| s.to_string()).collect(),
            data: self.data.clone(),
            fs: SEGMENT_FS,
        }
    }
}

/// Splits a 250 Hz record into consecutive non-overlapping 5 s windows.
/// A trailing partial window is dropped.
pub fn segment(record: &EcgRecord) -> Result<Vec<Segment>> {
    if (record.fs - SEGMENT_FS).abs() > 1e-9 {
        return Err(DspError::WrongSamplingRate { expected: SEGMENT_FS, got: record.fs });
    }
    if record.leads.iter().map(String::as_str).ne(CANONICAL_LEADS) {
        return Err(DspError::NotStandardized);
    }
    let count = record.n_samples() / SEGMENT_LEN;
    Ok((0..count)
        .map(|s| {
            let range = s * SEGMENT_LEN..(s + 1) * SEGMENT_LEN;
            Segment {
                record_id: record.record_id.clone(),
                segment_index: s,
                data: record.data.iter().map(|row| row[range.clone()].to_vec()).collect(),
            }
        })
        .collect())
}

/// Parameters of the preprocessing chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub notch_50: bool,
    pub notch_60: bool,
    pub notch_q: f64,
    pub bandpass_low: f64,
    pub bandpass_high: f64,
    pub bandpass_order: usize,
    pub highpass_cutoff: f64,
    pub highpass_order: usize,
    pub wavelet: WaveletSpec,
    pub target_fs: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            notch_50: true,
            notch_60: true,
            notch_q: 30.0,
            bandpass_low: 0.5,
            bandpass_high: 100.0,
            bandpass_order: 4,
            highpass_cutoff: 0.05,
            highpass_order: 2,
            wavelet: WaveletSpec::db6(4),
            target_fs: SEGMENT_FS,
        }
    }
}

/// Filters designed once per sampling rate.
struct FilterBank {
    filters: Vec<IirCascade>,
}

impl FilterBank {
    fn design(cfg: &PreprocessConfig, fs: f64) -> Result<Self> {
        let mut filters = Vec::new();
        if cfg.notch_50 {
            filters.push(design_notch(50.0, cfg.notch_q, fs)?.into());
        }
        if cfg.notch_60 {
            filters.push(design_notch(60.0, cfg.notch_q, fs)?.into());
        }
        filters.push(design_butter_bandpass(cfg.bandpass_low, cfg.bandpass_high, cfg.bandpass_order, fs)?);
        filters.push(design_butter_highpass(cfg.highpass_cutoff, cfg.highpass_order, fs)?);
        Ok(Self { filters })
    }

    fn apply(&self, lead: &[f64], cfg: &PreprocessConfig, fs: f64) -> Result<Vec<f64>> {
        let mut x = lead.to_vec();
        for f in &self.filters {
            x = filtfilt(f, &x)?;
        }
        x = wavelet_denoise(&x, &cfg.wavelet)?;
        resample(&x, fs, cfg.target_fs)
    }
}

/// Runs the filtering chain on every lead and resamples to `cfg.target_fs`,
/// without segmenting. Leads are processed in parallel.
pub fn preprocess_record(record: &EcgRecord, cfg: &PreprocessConfig) -> Result<EcgRecord> {
    if record.leads.iter().map(String::as_str).ne(CANONICAL_LEADS) {
        return Err(DspError::NotStandardized);
    }
    let bank = FilterBank::design(cfg, record.fs)?;
    let data = record
        .data
        .par_iter()
        .map(|lead| bank.apply(lead, cfg, record.fs))
        .collect::<Result<Vec<_>>>()?;
    Ok(EcgRecord { record_id: record.record_id.clone(), leads: record.leads.clone(), data, fs: cfg.target_fs })
}

/// Full chain: notch 50 and 60 Hz, band-pass 0.5-100 Hz, high-pass 0.05 Hz,
/// db6 level-4 denoising, resampling to 250 Hz, 5 s segmentation.
pub fn preprocess(record: &EcgRecord) -> Result<Vec<Segment>> {
    preprocess_with(record, &PreprocessConfig::default())
}

pub fn preprocess_with(record: &EcgRecord, cfg: &PreprocessConfig) -> Result<Vec<Segment>> {
    segment(&preprocess_record(record, cfg)?)
}
