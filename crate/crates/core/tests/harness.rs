use fsrl::harness::{read_csv, write_csv, RunConfig};
use fsrl::pref::StepMetrics;
use fsrl::Error;
use serde_json::json;

fn invalid(text: &str) -> bool {
    matches!(RunConfig::from_json(text), Err(Error::InvalidConfig(_)))
}

#[test]
fn default_config_is_valid_and_roundtrips() {
    let cfg = RunConfig::default();
    cfg.validate().unwrap();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
}

#[test]
fn missing_keys_take_defaults() {
    let cfg = RunConfig::from_json(r#"{"seed": 9, "simpo": {"alpha_steer": 1.0}, "lm": {"hook_layer": 1}}"#).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.simpo.alpha_steer, 1.0);
    assert_eq!(cfg.simpo.beta, 10.0);
    assert_eq!(cfg.lm.hook_layer, 1);
    assert_eq!(cfg.lm.d_model, 32);
}

#[test]
fn unknown_keys_are_rejected_at_every_level() {
    assert!(invalid(r#"{"seeed": 1}"#));
    assert!(invalid(r#"{"sae": {"width": 3}}"#));
    assert!(invalid(r#"{"analysis": {"mask_ratio": 2.0, "extra": true}}"#));
}

#[test]
fn values_are_checked_before_any_work() {
    assert!(invalid(r#"{"sae": {"d_sae": 16}}"#));
    assert!(invalid(r#"{"lm": {"hook_layer": 4}}"#));
    assert!(invalid(r#"{"simpo": {"beta": 0}}"#));
    assert!(invalid(r#"{"simpo": {"variant": "leaky"}}"#));
    assert!(invalid(r#"{"analysis": {"topk_pcts": [0.0]}}"#));
    assert!(invalid(r#"{"data": {"style_rate": 0, "content_rate": 0}}"#));
    assert!(invalid("not json"));
}

#[test]
fn csv_embeds_the_config_and_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/m.csv");
    let rows = vec![
        StepMetrics {
            step: 0,
            loss: 0.1,
            simpo: 0.05,
            l0: 3.0,
            l1: 1.0 / 3.0,
        },
        StepMetrics {
            step: 1,
            loss: 1e-12,
            simpo: 0.0,
            l0: 0.0,
            l1: 0.0,
        },
    ];
    let config = json!({"seed": 3});
    write_csv(&path, &config, &rows).unwrap();
    let t = read_csv(&path).unwrap();
    assert_eq!(t.config, config);
    assert_eq!(t.headers, ["step", "loss", "simpo", "l0", "l1"]);
    assert_eq!(t.column_f64("l1").unwrap()[0], 1.0 / 3.0);
    assert_eq!(t.column_f64("loss").unwrap()[1], 1e-12);

    let again = dir.path().join("again.csv");
    write_csv(&again, &config, &rows).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}
