//! Deterministic synthetic 12-lead ECG records with matching diagnostic
//! reports and conversation samples, for fixtures and offline runs.
//!
//! Each record is a train of Gaussian P/Q/R/S/T waves plus an ST-segment
//! offset, baseline wander, mains hum and white noise. The report is derived
//! from the sampled parameters by fixed rules, so signal and text agree.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ingest::{self, EcgRecord, IngestError, CANONICAL_LEADS};
use crate::promptkit::{DatasetSample, Turn};

pub const SYNTH_FS: f64 = 500.0;
pub const SYNTH_DURATION_S: f64 = 10.0;
pub const REPORT_QUESTION: &str = "Please provide the diagnostic report for this ECG.";
pub const RHYTHM_QUESTION: &str = "What is the heart rhythm?";

/// Relative QRS gain per canonical lead.
const LEAD_GAINS: [f64; 12] = [0.8, 1.0, 0.5, -0.9, 0.4, 0.7, -0.6, 0.3, 0.9, 1.2, 1.1, 0.9];

/// Parameters behind one synthetic record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub heart_rate: f64,
    pub r_amp: f64,
    pub t_amp: f64,
    pub st_offset: f64,
    /// Gaussian width of the R wave in seconds.
    pub qrs_sigma: f64,
}

impl SynthParams {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            heart_rate: rng.random_range(45.0..130.0),
            r_amp: rng.random_range(0.4..1.6),
            t_amp: rng.random_range(-0.2..0.45),
            st_offset: rng.random_range(-0.15..0.25),
            qrs_sigma: rng.random_range(0.008..0.016),
        }
    }

    pub fn rhythm(&self) -> &'static str {
        if self.heart_rate < 60.0 {
            "Sinus bradycardia"
        } else if self.heart_rate > 100.0 {
            "Sinus tachycardia"
        } else {
            "Sinus rhythm"
        }
    }

    pub fn findings(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.r_amp < 0.5 {
            out.push("Low QRS voltages");
        }
        if self.qrs_sigma > 0.014 {
            out.push("Intraventricular conduction delay");
        }
        if self.st_offset > 0.1 {
            out.push("ST elevation");
        } else if self.st_offset < -0.1 {
            out.push("ST depression");
        }
        if self.t_amp < 0.0 {
            out.push("T wave abnormality");
        }
        out
    }

    pub fn report(&self) -> String {
        let findings = self.findings();
        let findings = if findings.is_empty() { vec!["Normal ECG"] } else { findings };
        let mut parts = vec![self.rhythm()];
        parts.extend(findings);
        parts.iter().map(|p| format!("{p}.")).collect::<Vec<_>>().join(" ")
    }
}

fn gaussian(t: f64, center: f64, sigma: f64) -> f64 {
    let z = (t - center) / sigma;
    (-0.5 * z * z).exp()
}

/// One synthetic record with its report.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub record: EcgRecord,
    pub params: SynthParams,
    pub report: String,
}

pub fn record_id(index: usize) -> String {
    format!("syn{index:04}")
}

/// Generates record `index` of the fixture family identified by `seed`.
pub fn synth_record(index: usize, seed: u64) -> SynthRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let params = SynthParams::sample(&mut rng);
    let n = (SYNTH_FS * SYNTH_DURATION_S) as usize;
    let rr = 60.0 / params.heart_rate;

    let mut beats = Vec::new();
    let mut t = rng.random_range(0.1..0.1 + rr);
    while t < SYNTH_DURATION_S + 0.5 {
        beats.push(t);
        t += rr * rng.random_range(0.97..1.03);
    }

    let wander_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let wander_freq = rng.random_range(0.15..0.4);
    let hum_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, 0.01).expect("valid sigma");
    let p = &params;

    let data = LEAD_GAINS
        .iter()
        .enumerate()
        .map(|(l, gain)| {
            (0..n)
                .map(|i| {
                    let t = i as f64 / SYNTH_FS;
                    let beat: f64 = beats
                        .iter()
                        .filter(|&&b| (t - b).abs() < 0.6)
                        .map(|&b| {
                            let qrs = p.r_amp * gaussian(t, b, p.qrs_sigma)
                                - 0.1 * p.r_amp * gaussian(t, b - 2.5 * p.qrs_sigma, 0.008)
                                - 0.25 * p.r_amp * gaussian(t, b + 2.5 * p.qrs_sigma, 0.01);
                            let st = p.st_offset * (-((t - b - 0.14) / 0.06).powi(4)).exp();
                            let pw = 0.12 * gaussian(t, b - 0.16, 0.025);
                            let tw = p.t_amp * gaussian(t, b + 0.3, 0.05);
                            gain * qrs + gain.signum() * (st + tw) + pw
                        })
                        .sum();
                    let wander = 0.08 * (std::f64::consts::TAU * wander_freq * t + wander_phase + l as f64 * 0.2).sin();
                    let hum = 0.02 * (std::f64::consts::TAU * 50.0 * t + hum_phase).sin();
                    beat + wander + hum + noise.sample(&mut rng)
                })
                .collect()
        })
        .collect();

    let leads = CANONICAL_LEADS.iter().map(|s| s.to_string()).collect();
    let record = EcgRecord { record_id: record_id(index), leads, data, fs: SYNTH_FS };
    SynthRecord { report: params.report(), record, params }
}

/// Conversation sample for a synthetic record; even indices get a second
/// question about the rhythm.
pub fn synth_sample(index: usize, rec: &SynthRecord) -> DatasetSample {
    let mut turns = vec![Turn::new(REPORT_QUESTION, Some(&rec.report))];
    if index.is_multiple_of(2) {
        turns.push(Turn::new(RHYTHM_QUESTION, Some(&format!("{}.", rec.params.rhythm()))));
    }
    DatasetSample { id: format!("{}-q", rec.record.record_id), record_id: rec.record.record_id.clone(), turns }
}

/// A `reports.jsonl` line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportLine {
    pub record_id: String,
    pub report: String,
}

/// Writes `count` records as rawbin files under `dir/records`, plus
/// `dir/reports.jsonl` and `dir/dataset.jsonl`.
pub fn write_fixture(dir: &Path, count: usize, seed: u64) -> Result<Vec<SynthRecord>, IngestError> {
    let records_dir = dir.join("records");
    fs::create_dir_all(&records_dir)?;
    let records: Vec<SynthRecord> = {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(|i| synth_record(i, seed)).collect()
    };
    let mut reports = fs::File::create(dir.join("reports.jsonl"))?;
    let mut dataset = fs::File::create(dir.join("dataset.jsonl"))?;
    for (i, rec) in records.iter().enumerate() {
        ingest::save_rawbin(&rec.record, &records_dir, None)?;
        let line = ReportLine { record_id: rec.record.record_id.clone(), report: rec.report.clone() };
        writeln!(reports, "{}", serde_json::to_string(&line).expect("serializable"))?;
        writeln!(dataset, "{}", serde_json::to_string(&synth_sample(i, rec)).expect("serializable"))?;
    }
    Ok(records)
}
