pub mod annindex;
pub mod dsp;
pub mod ecg_bpe;
pub mod evalkit;
pub mod features;
pub mod genclient;
pub mod ingest;
pub mod promptkit;
pub mod ragdb;
pub mod synth;
