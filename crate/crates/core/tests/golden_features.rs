//! Regression check of the full preprocessing and feature chain against a
//! stored vector. Regenerate with `ECGRAG_BLESS=1 cargo test --test golden_features`.

use std::path::PathBuf;

use ecgrag::dsp::preprocess;
use ecgrag::features::{extract_features, FEATURE_DIM, FEATURE_LAYOUT_VERSION};
use ecgrag::synth::synth_record;
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct Golden {
    layout_version: u32,
    record_index: usize,
    seed: u64,
    segment_index: usize,
    values: Vec<f64>,
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_features.json")
}

#[test]
fn features_match_golden_vector() {
    let rec = synth_record(0, 0).record;
    let segments = preprocess(&rec).unwrap();
    assert_eq!(segments.len(), 2);
    let fv = extract_features(&segments[0]).unwrap();
    assert_eq!(fv.values.len(), FEATURE_DIM);

    let path = golden_path();
    if std::env::var("ECGRAG_BLESS").is_ok_and(|v| v == "1") {
        let golden = Golden {
            layout_version: FEATURE_LAYOUT_VERSION,
            record_index: 0,
            seed: 0,
            segment_index: 0,
            values: fv.values.clone(),
        };
        std::fs::write(&path, serde_json::to_string_pretty(&golden).unwrap()).unwrap();
        return;
    }
    let golden: Golden = serde_json::from_str(&std::fs::read_to_string(&path).expect("golden file present")).unwrap();
    assert_eq!(golden.layout_version, FEATURE_LAYOUT_VERSION);
    for (i, (got, want)) in fv.values.iter().zip(&golden.values).enumerate() {
        let tol = 1e-9 * want.abs().max(1.0);
        assert!((got - want).abs() <= tol, "feature {i}: {got} vs {want}");
    }
}
