//! The committed fixture files must equal what the generators produce.
//! Run with `CMG_BLESS=1` to rewrite them.

use std::path::PathBuf;

use cmg::fixtures::{bias_model, bias_model_file, bias_suite_json, default_bias_suite, BiasModelSpec, BiasSuite};
use cmg::model::ModelWeights;
use cmg::trace_io::read_trace_file;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn check(name: &str, expected: &[u8]) {
    let path = fixture_dir().join(name);
    if std::env::var_os("CMG_BLESS").is_some() {
        std::fs::write(&path, expected).unwrap();
    }
    let actual = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(actual == expected, "{name} is stale; rerun with CMG_BLESS=1");
}

#[test]
fn bias_model_file_is_current() {
    check("bias-model.cmgt", &bias_model_file(&BiasModelSpec::default()).unwrap());
}

#[test]
fn bias_suite_file_is_current() {
    check("bias-suite.json", bias_suite_json(&default_bias_suite()).as_bytes());
}

#[test]
fn committed_weights_load_through_the_handcrafted_path() {
    let container = read_trace_file(fixture_dir().join("bias-model.cmgt")).unwrap();
    let loaded = ModelWeights::from_container(&container).unwrap();
    assert_eq!(loaded, bias_model(&BiasModelSpec::default()));
    let text = std::fs::read_to_string(fixture_dir().join("bias-suite.json")).unwrap();
    let suite: BiasSuite = serde_json::from_str(&text).unwrap();
    assert_eq!(suite, default_bias_suite());
}
