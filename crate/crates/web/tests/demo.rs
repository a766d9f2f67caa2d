use fedxfer_web::{compare_statistics_json, partition_histogram_json, round_bound_trace_json};
use serde_json::Value;

#[test]
fn histogram_covers_every_sample() {
    let v: Value = serde_json::from_str(&partition_histogram_json(5, 4, 2, 0.0, 1).unwrap()).unwrap();
    let total: u64 = v["counts"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|c| c.as_array().unwrap().iter().map(|x| x.as_u64().unwrap()))
        .sum();
    assert_eq!(total, 5 * 60);
    let d: Value = serde_json::from_str(&partition_histogram_json(5, 4, 0, 0.5, 1).unwrap()).unwrap();
    assert_eq!(d["counts"].as_array().unwrap().len(), 4);
}

#[test]
fn statistics_curves_have_one_point_per_round() {
    let v: Value = serde_json::from_str(&compare_statistics_json(10, 5, 0.5, 0.5, 2).unwrap()).unwrap();
    let curves = v.as_array().unwrap();
    assert_eq!(curves.len(), 2);
    for c in curves {
        assert_eq!(c["jacobian_variance"].as_array().unwrap().len(), 5);
    }
}

#[test]
fn bound_trace_holds_in_certified_regime() {
    let v: Value = serde_json::from_str(&round_bound_trace_json(10, 30, 0.9, 3).unwrap()).unwrap();
    assert_eq!(v["violations"], 0);
    assert_eq!(v["certified"], true);
}

#[test]
fn bad_input_is_an_error() {
    assert!(partition_histogram_json(0, 4, 2, 0.0, 1).is_err());
}
