use dsa_lil_web::ops::{analyze_gossip, martingale_lil, simulate_rates};
use serde_json::Value;

#[test]
fn gossip_analysis_reports_pi_and_contraction() {
    let v = analyze_gossip("2\n0.9 0.1\n0.2 0.8\n").unwrap();
    assert_eq!(v["valid"], Value::Bool(true));
    let pi: Vec<f64> = serde_json::from_value(v["pi"].clone()).unwrap();
    assert!((pi[0] - 2.0 / 3.0).abs() < 1e-12 && (pi[1] - 1.0 / 3.0).abs() < 1e-12);
    assert!((v["contraction"].as_f64().unwrap() - 0.7).abs() < 1e-12);
    assert_eq!(v["doubly_stochastic"], Value::Bool(false));
}

#[test]
fn gossip_analysis_explains_rejections() {
    let v = analyze_gossip("2\n0 1\n1 0\n").unwrap();
    assert_eq!(v["valid"], Value::Bool(false));
    assert!(v["reason"].as_str().unwrap().to_lowercase().contains("periodic"));
    assert!(analyze_gossip("2\n0.5 x\n").is_err());
}

#[test]
fn rate_simulation_returns_curves_and_theory() {
    let v = simulate_rates(r#"{"topology":{"kind":"ring","self_weight":0.5},"horizon":20000,"seeds":3}"#).unwrap();
    assert_eq!(v["theory"]["agreement"].as_f64().unwrap(), -0.35);
    assert_eq!(v["theory"]["disagreement"].as_f64().unwrap(), -0.7);
    let agree = v["agreement"].as_array().unwrap();
    assert!(agree.len() > 100);
    for row in agree {
        let r: Vec<f64> = serde_json::from_value(row.clone()).unwrap();
        assert!(r[1] <= r[2] && r[2] <= r[3]);
    }
    assert!(v["slopes"]["agreement"]["slope"].is_number());
}

#[test]
fn rate_simulation_enforces_browser_limits() {
    assert!(simulate_rates(r#"{"horizon":100000000}"#).is_err());
    assert!(simulate_rates(r#"{"seeds":0}"#).is_err());
    assert!(simulate_rates("not json").is_err());
}

#[test]
fn martingale_trace_is_normalized() {
    let spec = r#"{"noise":{"kind":"rademacher"},"weights":{"kind":"unit"},"horizon":100000,"burn_in":1000,"seed":2}"#;
    let v = martingale_lil(spec).unwrap();
    let sup = v["sup_normalized"].as_f64().unwrap();
    assert!(sup > 0.0 && sup < 3.0);
    assert!(!v["trace"].as_array().unwrap().is_empty());
}
