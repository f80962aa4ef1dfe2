use serde_json::Value;
use tollsense_wasm::Session;

#[test]
fn demo_operations_round_trip() {
    let mut s = Session::new(7, 12, 150).unwrap();
    let net = s.network();
    let stations = net["stations"].as_array().unwrap();
    assert_eq!(stations.len(), 12);
    assert!(stations.iter().all(|p| (0.0..=1.0).contains(&p["x"].as_f64().unwrap())));
    assert_eq!(net["edges"].as_array().unwrap().len(), s.graph().edge_count());

    let speeds = s.speeds_at(8);
    let edges = speeds["edges"].as_array().unwrap();
    assert_eq!(edges.len(), s.graph().edge_count());
    for e in edges {
        let fallback = e["fallback"].as_bool().unwrap();
        assert!(!fallback || (e["ratio"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }

    assert!(matches!(s.predict(0), Err(tollsense::Error::Untrained)));
    let report = s.train().unwrap();
    for k in ["destination", "route", "speed"] {
        let v = report["trained"][k].as_f64().unwrap();
        assert!(v.is_finite() && v <= 1.0, "{k} = {v}");
    }
    let trips = s.test_trips();
    assert!(!trips.as_array().unwrap().is_empty());
    let p = s.predict(0).unwrap();
    let frames = p["frames"].as_array().unwrap();
    assert!(!frames.is_empty());
    let first = &frames[0];
    assert!(matches!(first["predicted"], Value::Array(_)));
    assert!(s.predict(usize::MAX).is_err());
}
