use seegdiff_wasm::{bcpc_mask, synth_preview, threshold_explorer};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn exports_are_deterministic_in_the_seed() {
    assert_eq!(synth_preview(9, 720.0, "spike-train"), synth_preview(9, 720.0, "spike-train"));
    assert_eq!(threshold_explorer(9, 3, 0.2, 0.1), threshold_explorer(9, 3, 0.2, 0.1));
    assert_ne!(synth_preview(9, 720.0, "spike-train"), synth_preview(10, 720.0, "spike-train"));
}

#[test]
fn bad_inputs_come_back_as_error_objects() {
    assert!(parse(bcpc_mask(3)).get("error").is_some());
    assert!(parse(synth_preview(1, -5.0, "spike-train")).get("error").is_some());
}

#[test]
fn graphs_are_square_over_channels() {
    let v = parse(threshold_explorer(2, 4, 0.1, 0.05));
    let n = v["channels"].as_array().unwrap().len();
    for key in ["cross", "inner"] {
        let m = v[key].as_array().unwrap();
        assert_eq!(m.len(), n);
        assert!(m.iter().all(|r| r.as_array().unwrap().len() == n));
    }
    let inner = v["inner"].as_array().unwrap();
    assert!((0..n).all(|i| inner[i][i].as_f64().unwrap() == 0.0));
}
