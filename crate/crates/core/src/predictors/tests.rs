use chrono::NaiveDate;

use super::*;
use crate::crowd::SampleDiagnostics;
use crate::ingest::{ContextRecord, Weather};

fn line() -> HighwayGraph {
    let mut b = HighwayGraph::builder();
    for s in ["A", "B", "C", "D"] {
        b.add_station(s, s, 300.0);
    }
    for (x, y) in [("A", "B"), ("B", "C"), ("C", "D")] {
        b.add_edge(&format!("{x}{y}"), x, y, 10_000.0, 100.0);
        b.add_edge(&format!("{y}{x}"), y, x, 10_000.0, 100.0);
    }
    b.build().unwrap()
}

fn empty_map() -> SpeedMap {
    SpeedMap {
        slot_width_min: 30,
        cells: BTreeMap::new(),
        diagnostics: SampleDiagnostics::default(),
    }
}

fn day(d: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 3, 4).unwrap() + chrono::Days::new(d as u64)
}

fn at(d: i64, h: f64) -> Timestamp {
    Timestamp::from_date_seconds(day(d), (h * 3600.0) as i64)
}

/// A trip at 90 km/h on the highway, ramps included.
fn tx(g: &HighwayGraph, v: &str, from: &str, to: &str, entry: Timestamp) -> Transaction {
    let o = g.station_ix(from).unwrap();
    let d = g.station_ix(to).unwrap();
    let route = &g.enumerate_routes(o, d, 8).unwrap()[0];
    let len = g.route_length(route).unwrap() + 600.0;
    Transaction {
        vehicle_id: v.into(),
        vehicle_type: VehicleType::Car,
        entry_station: o,
        exit_station: d,
        entry_time: entry,
        exit_time: entry.plus((len / 25.0).round() as i64),
        axle_count: 2,
        weight_kg: 1500.0,
    }
}

fn training(g: &HighwayGraph, txs: &[Transaction]) -> Vec<TrainingTrip> {
    let reference = SpeedReference::uniform(g, 0.9, 10.0);
    let cfg = RecoveryConfig::default();
    let mut cat = RouteCatalog::new(cfg.max_route_edges);
    txs.iter()
        .enumerate()
        .map(|(i, t)| {
            let trip = Trip::new(i, t.clone(), 30).unwrap();
            let recovered = recover_single(&trip, g, &mut cat, &cfg, &reference).ok();
            TrainingTrip { trip, recovered }
        })
        .collect()
}

fn small_cfg() -> PredictorConfig {
    PredictorConfig {
        trees: 10,
        seed: 3,
        ..PredictorConfig::default()
    }
}

fn commuter_window(g: &HighwayGraph, days: i64) -> Vec<Transaction> {
    let mut out = Vec::new();
    for d in 0..days {
        out.push(tx(g, "V1", "A", "C", at(d, 8.0)));
        out.push(tx(g, "V1", "C", "A", at(d, 17.5)));
        out.push(tx(g, "V2", "D", "B", at(d, 9.0)));
    }
    out
}

fn query(g: &HighwayGraph, v: &str, from: &str, t0: Timestamp) -> TripQuery {
    TripQuery {
        vehicle_id: v.into(),
        vehicle_type: VehicleType::Car,
        entrance: g.station_ix(from).unwrap(),
        t0,
    }
}

fn calendar(days: i64) -> Calendar {
    Calendar::from_records((0..days).map(|d| ContextRecord::new(day(d), false, Weather::Clear))).unwrap()
}

#[test]
fn destination_feature_blocks() {
    let g = line();
    let trips = training(&g, &commuter_window(&g, 3));
    let bundle = train_bundle(&trips, &g, &calendar(3), empty_map(), &small_cfg()).unwrap();
    let ctx = ContextRecord::new(day(3), false, Weather::Clear);
    let a = g.station_ix("A").unwrap();
    let c = g.station_ix("C").unwrap();

    let t0 = at(3, 13.0);
    let hist: Vec<PastTrip> = bundle
        .history()
        .before("V1", t0)
        .iter()
        .filter(|p| p.origin == a)
        .cloned()
        .collect();
    let f = destination_features(&hist, a, t0, VehicleType::Car, &ctx, bundle.tables()).unwrap();
    assert_eq!(f.slot, 26);
    assert_eq!(f.history_all[c.index()], 1.0);
    assert_eq!(f.history_origin[c.index()], 1.0);

    let fresh = destination_features(&[], a, t0, VehicleType::Car, &ctx, bundle.tables()).unwrap();
    assert!(fresh.history_all.iter().chain(&fresh.history_origin).all(|&x| x == 0.0));
    assert_eq!(fresh.history_count, 0);
    assert!((fresh.crowd.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let err = destination_features(&[], StationIx(9), t0, VehicleType::Car, &ctx, bundle.tables());
    assert!(matches!(err, Err(Error::UnknownStation(_))));
    assert_eq!(f.to_vector(), destination_features(&hist, a, t0, VehicleType::Car, &ctx, bundle.tables()).unwrap().to_vector());
}

#[test]
fn crowd_tables_are_distributions() {
    let g = line();
    let trips = training(&g, &commuter_window(&g, 4));
    let bundle = train_bundle(&trips, &g, &calendar(4), empty_map(), &small_cfg()).unwrap();
    let t = bundle.tables();
    for v in t.destinations.values().chain(t.destinations_any.values()).chain(t.routes.values()) {
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn commuter_destination_is_learned() {
    let g = line();
    let trips = training(&g, &commuter_window(&g, 28));
    let bundle = train_bundle(&trips, &g, &calendar(29), empty_map(), &small_cfg()).unwrap();
    let q = query(&g, "V1", "A", at(28, 8.0));
    let p = bundle.destination_distribution(&q).unwrap();
    let c = g.station_ix("C").unwrap();
    assert!(p[c.index()] > 0.9, "{p:?}");
    assert_eq!(bundle.predict_destination(&q).unwrap(), c);
}

#[test]
fn single_route_pairs_are_always_right() {
    let g = line();
    let txs = commuter_window(&g, 5);
    let trips = training(&g, &txs);
    let bundle = train_bundle(&trips, &g, &calendar(6), empty_map(), &small_cfg()).unwrap();
    for t in &txs {
        let q = query(&g, &t.vehicle_id, g.station(t.entry_station).id.as_str(), t.entry_time.plus(86_400));
        let (idx, route) = bundle.predict_route(&g, &q, t.exit_station).unwrap();
        assert_eq!(idx, 0);
        assert_eq!(route.destination(&g), t.exit_station);
    }
}

#[test]
fn emp_examples() {
    let g = line();
    let (a, b, c, d) = (StationIx(0), StationIx(1), StationIx(2), StationIx(3));
    let past = |dest: StationIx, speed: Option<f64>| PastTrip {
        origin: a,
        destination: dest,
        entry_time: at(0, 8.0),
        exit_time: at(0, 9.0),
        quiet: false,
        route: Some(0),
        duration_s: 900.0,
        speed_kmh: speed,
        residual_kmh: None,
    };
    let tables = CrowdTables::build(
        4,
        &[WindowTrip {
            origin: a,
            destination: d,
            slot: 16,
            duration_s: 900.0,
            route: None,
            candidates: 1,
        }],
        empty_map(),
    );
    let cat = RouteCatalog::new(8);
    let hist = vec![past(b, None), past(c, None), past(b, None), past(b, None)];
    assert_eq!(emp_baseline(&hist, a, at(1, 8.0), &tables, None, &cat).destination, b);
    let empty = emp_baseline(&[], a, at(1, 8.0), &tables, None, &cat);
    assert_eq!(empty.destination, d);
    let e0 = EdgeIx(0);
    assert_eq!(empty.speed_kmh(&g, &tables.speed_map, e0, at(1, 8.0)), 100.0);
    let speeds = vec![past(b, Some(100.0)), past(b, Some(110.0))];
    let p = emp_baseline(&speeds, a, at(1, 8.0), &tables, None, &cat);
    assert!((p.speed_kmh(&g, &tables.speed_map, e0, at(1, 8.0)) - 105.0).abs() < 1e-12);
    // ties go to the lower station
    let tie = vec![past(c, None), past(b, None)];
    assert_eq!(emp_baseline(&tie, a, at(1, 8.0), &tables, None, &cat).destination, b);
}

#[test]
fn feedback_grows_labels_and_rejects_duplicates() {
    let g = line();
    let trips = training(&g, &commuter_window(&g, 3));
    let mut bundle = train_bundle(&trips, &g, &calendar(4), empty_map(), &small_cfg()).unwrap();
    let before = bundle.destination_forest().n_classes();
    let labels = bundle.destination_labels().len();

    let t = tx(&g, "V1", "B", "D", at(3, 12.0));
    let out = bundle.feedback_update(&g, &t).unwrap();
    assert!(out.new_destination_label);
    assert!(out.recovered);
    assert_eq!(bundle.destination_forest().n_classes(), before + 1);
    assert_eq!(bundle.destination_labels().len(), labels + 1);
    assert_eq!((bundle.meta.d_updates, bundle.meta.r_updates, bundle.meta.s_updates), (1, 1, 1));

    assert!(matches!(bundle.feedback_update(&g, &t), Err(Error::Duplicate(_))));
    assert_eq!(bundle.meta.d_updates, 1);
    // training transactions count as already seen
    assert!(matches!(bundle.feedback_update(&g, &trips[0].trip.transaction), Err(Error::Duplicate(_))));

    let again = bundle.feedback_update(&g, &tx(&g, "V1", "B", "D", at(3, 15.0))).unwrap();
    assert!(!again.new_destination_label);
    assert_eq!(bundle.meta.d_updates, 2);
}

#[test]
fn training_is_deterministic() {
    let g = line();
    let trips = training(&g, &commuter_window(&g, 4));
    let a = train_bundle(&trips, &g, &calendar(4), empty_map(), &small_cfg()).unwrap();
    let mut shuffled = trips.clone();
    shuffled.reverse();
    let b = train_bundle(&shuffled, &g, &calendar(4), empty_map(), &small_cfg()).unwrap();
    assert_eq!(a.destination_forest().to_json().unwrap(), b.destination_forest().to_json().unwrap());
    assert_eq!(a.speed_forest().to_json().unwrap(), b.speed_forest().to_json().unwrap());
    assert_eq!(a.meta, b.meta);
    assert!(train_bundle(&[], &g, &calendar(1), empty_map(), &small_cfg()).is_err());
}

#[test]
fn later_trips_do_not_leak_into_queries() {
    let g = line();
    let window = commuter_window(&g, 6);
    let full = train_bundle(&training(&g, &window), &g, &calendar(6), empty_map(), &small_cfg()).unwrap();
    let ctx = ContextRecord::new(day(2), false, Weather::Clear);
    let a = g.station_ix("A").unwrap();
    let t0 = at(2, 8.0);
    // the same history, truncated at the query instant by hand
    let early: Vec<PastTrip> = full
        .history()
        .vehicles()
        .find(|(v, _)| *v == "V1")
        .unwrap()
        .1
        .iter()
        .filter(|p| p.exit_time <= t0)
        .cloned()
        .collect();
    let h = full.history().before("V1", t0);
    assert_eq!(h, early.as_slice());
    let x = destination_features(h, a, t0, VehicleType::Car, &ctx, full.tables()).unwrap();
    // shifting every later trip further into the future changes nothing
    let mut shifted = HistoryStore::default();
    for p in full.history().vehicles().find(|(v, _)| *v == "V1").unwrap().1 {
        let mut p = p.clone();
        if p.exit_time > t0 {
            p.entry_time = p.entry_time.plus(30 * 86_400);
            p.exit_time = p.exit_time.plus(30 * 86_400);
        }
        shifted.push("V1", p);
    }
    let y = destination_features(shifted.before("V1", t0), a, t0, VehicleType::Car, &ctx, full.tables()).unwrap();
    assert_eq!(x, y);
}

#[test]
fn bundle_round_trips_through_a_directory() {
    let g = line();
    let trips = training(&g, &commuter_window(&g, 5));
    let mut bundle = train_bundle(&trips, &g, &calendar(6), empty_map(), &small_cfg()).unwrap();
    bundle.feedback_update(&g, &tx(&g, "V3", "B", "A", at(5, 7.0))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&bundle, &g, dir.path()).unwrap();
    let loaded = load_bundle(dir.path(), &g).unwrap();
    assert_eq!(loaded.meta, bundle.meta);
    assert_eq!(loaded.history(), bundle.history());
    assert_eq!(loaded.tables(), bundle.tables());
    for (v, from, h) in [("V1", "A", 8.0), ("V2", "D", 9.0), ("V9", "B", 12.0)] {
        let q = query(&g, v, from, at(6, h));
        assert_eq!(loaded.destination_distribution(&q).unwrap(), bundle.destination_distribution(&q).unwrap());
        let s1 = bundle.predict_speed(&g, &q, EdgeIx(0), q.t0).unwrap();
        let s2 = loaded.predict_speed(&g, &q, EdgeIx(0), q.t0).unwrap();
        assert_eq!(s1, s2);
    }
    let mut loaded = loaded;
    let t = tx(&g, "V3", "B", "A", at(5, 7.0));
    assert!(matches!(loaded.feedback_update(&g, &t), Err(Error::Duplicate(_))));
    std::fs::remove_file(dir.path().join("history.csv")).unwrap();
    assert!(matches!(load_bundle(dir.path(), &g), Err(Error::Missing(_))));
}

#[test]
fn speed_prediction_tracks_vehicle_offset() {
    let g = line();
    let mut txs = Vec::new();
    for d in 0..10 {
        // V1 drives 90 km/h, V2 noticeably slower
        txs.push(tx(&g, "V1", "A", "D", at(d, 8.0)));
        let mut slow = tx(&g, "V2", "A", "D", at(d, 8.5));
        slow.exit_time = slow.entry_time.plus(((30_600.0) / (70.0 / 3.6)) as i64);
        txs.push(slow);
    }
    let bundle = train_bundle(&training(&g, &txs), &g, &calendar(11), empty_map(), &small_cfg()).unwrap();
    let e = g.edge_ix("AB").unwrap();
    let fast = bundle.predict_speed(&g, &query(&g, "V1", "A", at(10, 8.0)), e, at(10, 8.0)).unwrap();
    let slow = bundle.predict_speed(&g, &query(&g, "V2", "A", at(10, 8.5)), e, at(10, 8.5)).unwrap();
    assert!((fast - 90.0).abs() < 3.0, "{fast}");
    assert!((slow - 70.0).abs() < 3.0, "{slow}");
}
