use super::*;
use crate::ingest::{Transaction, VehicleType};
use proptest::prelude::*;

fn graph() -> HighwayGraph {
    HighwayGraph::builder()
        .station("A", "A", 250.0)
        .station("B", "B", 0.0)
        .station("C", "C", 250.0)
        .edge("AB", "A", "B", 10_000.0, 120.0)
        .edge("BC", "B", "C", 5_000.0, 100.0)
        .build()
        .unwrap()
}

fn trip(g: &HighwayGraph, id: usize, from: &str, to: &str, start: i64, dur: i64) -> Trip {
    let tx = Transaction {
        vehicle_id: format!("v{id}"),
        vehicle_type: VehicleType::Car,
        entry_station: g.station_ix(from).unwrap(),
        exit_station: g.station_ix(to).unwrap(),
        entry_time: Timestamp(start),
        exit_time: Timestamp(start + dur),
        axle_count: 2,
        weight_kg: 1500.0,
    };
    Trip::new(id, tx, 30).unwrap()
}

fn routed(g: &HighwayGraph, t: Trip, ids: &[&str]) -> RoutedTrip {
    RoutedTrip {
        trip: t,
        route: Route::from_ids(g, ids).unwrap(),
    }
}

#[test]
fn ramp_share_is_proportional_to_length() {
    // 10 km of highway plus 500 m of ramps: 630 s of travel leaves 600 s.
    let g = HighwayGraph::builder()
        .station("A", "A", 250.0)
        .station("B", "B", 250.0)
        .edge("AB", "A", "B", 10_000.0, 120.0)
        .build()
        .unwrap();
    let t = trip(&g, 0, "A", "B", 0, 630);
    let r = Route::from_ids(&g, &["AB"]).unwrap();
    assert!((ramp_corrected_duration(&t, &r, &g).unwrap() - 600.0).abs() < 1e-9);
    let wrong = Route::from_ids(&graph(), &["BC"]).unwrap();
    assert!(ramp_corrected_duration(&t, &wrong, &graph()).is_err());
}

#[test]
fn ten_kmh_gap_halves_the_weight() {
    // 1 km at 100 km/h takes 36 s, at 90 km/h 40 s.
    let w = confidence(1000.0, 36.0, 40.0, default_lambda()).unwrap();
    assert!((w - 0.5).abs() < 1e-12);
    assert!((dissimilarity(1000.0, 36.0, 40.0, default_lambda()).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(confidence(1000.0, 40.0, 40.0, default_lambda()).unwrap(), 1.0);
    assert!(confidence(1000.0, 0.0, 40.0, 1.0).is_err());
    assert!(confidence(1000.0, 10.0, 40.0, 0.0).is_err());
}

#[test]
fn differencing_yields_extension_speed() {
    let g = graph();
    // A ramp 250 m over 10 km + 250: AB trip corrected = d * 10000 / 10250.
    let short = trip(&g, 0, "A", "B", 3600, 410);
    let long = trip(&g, 1, "A", "C", 3650, 600);
    let trips = vec![routed(&g, short, &["AB"]), routed(&g, long, &["AB", "BC"])];
    let set = derive_edge_samples(&trips, &g, &CrowdConfig::default()).unwrap();
    assert_eq!(set.diagnostics.direct, 1);
    assert_eq!(set.diagnostics.differenced, 1);
    let d_short = 410.0 * 10_000.0 / 10_250.0;
    let d_long = 600.0 * 15_000.0 / 15_500.0;
    let bc = set.samples.iter().find(|s| s.edge == g.edge_ix("BC").unwrap()).unwrap();
    assert!((bc.duration_s - (d_long - d_short)).abs() < 1e-9);
    assert!((bc.speed_kmh - 5_000.0 / (d_long - d_short) * 3.6).abs() < 1e-9);
    // weight compares the two drivers' average speeds
    let s = 10_000.0 / d_short - 15_000.0 / d_long;
    assert!((bc.confidence - (-s * s / default_lambda()).exp()).abs() < 1e-12);
    assert_eq!(bc.source, SampleSource::Differenced { shorter: 0, longer: 1 });
    let ab = set.samples.iter().find(|s| s.edge == g.edge_ix("AB").unwrap()).unwrap();
    assert_eq!(ab.confidence, 1.0);
}

#[test]
fn differencing_discards_and_counts() {
    let g = graph();
    let trips = vec![
        routed(&g, trip(&g, 0, "A", "B", 0, 500), &["AB"]),
        // faster than the shorter trip: negative difference
        routed(&g, trip(&g, 1, "A", "C", 60, 450), &["AB", "BC"]),
        // different 30-minute slot: not paired
        routed(&g, trip(&g, 2, "A", "C", 4000, 700), &["AB", "BC"]),
        // a 2 s trip implies an absurd speed
        routed(&g, trip(&g, 3, "A", "B", 100, 2), &["AB"]),
    ];
    let set = derive_edge_samples(&trips, &g, &CrowdConfig::default()).unwrap();
    assert_eq!(set.diagnostics.negative_difference, 1);
    assert_eq!(set.diagnostics.implausible, 1);
    assert_eq!(set.diagnostics.direct, 1);
    assert_eq!(set.diagnostics.differenced, 0);
    let cfg = CrowdConfig { max_route_edges: 1, ..Default::default() };
    let set = derive_edge_samples(&trips, &g, &cfg).unwrap();
    assert_eq!(set.diagnostics.skipped_long, 2);
}

#[test]
fn sparse_cells_fall_back_to_limit() {
    let g = graph();
    let trips: Vec<RoutedTrip> = (0..7)
        .map(|i| routed(&g, trip(&g, i, "A", "B", 8 * 3600 + i as i64 * 60, 360 + 10 * i as i64), &["AB"]))
        .collect();
    let map = estimate_slot_distributions(&trips[..4], &g, &CrowdConfig::default()).unwrap();
    assert_eq!(map.cells.len(), 2 * 48);
    let cell = map.cell(g.edge_ix("AB").unwrap(), 16).unwrap();
    assert!(cell.fallback);
    assert_eq!(cell.letter_values, LetterValues::constant(120.0));
    assert_eq!(cell.samples.len(), 4);

    let map = estimate_slot_distributions(&trips, &g, &CrowdConfig::default()).unwrap();
    let cell = map.cell(g.edge_ix("AB").unwrap(), 16).unwrap();
    assert!(!cell.fallback);
    let speeds: Vec<f64> = cell.samples.iter().map(|s| s.speed_kmh).collect();
    let mut sorted = speeds.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(cell.letter_values.median, sorted[3]);
    assert_eq!(cell.gmm.as_ref().unwrap().components.len(), 2);
    assert!(map.cell(g.edge_ix("BC").unwrap(), 16).unwrap().fallback);
}

#[test]
fn speed_map_round_trip() {
    let g = graph();
    let trips: Vec<RoutedTrip> = (0..9)
        .map(|i| routed(&g, trip(&g, i, "A", "B", 8 * 3600 + i as i64 * 60, 360 + 7 * i as i64), &["AB"]))
        .collect();
    let map = estimate_slot_distributions(&trips, &g, &CrowdConfig::default()).unwrap();
    let mut buf = Vec::new();
    map.write_to(&mut buf, &g).unwrap();
    let back = SpeedMap::read_from(&buf[..], &g, 30).unwrap();
    assert_eq!(back.cells.len(), map.cells.len());
    for (k, c) in &map.cells {
        let b = &back.cells[k];
        assert_eq!(b.fallback, c.fallback);
        for (x, y) in b.letter_values.as_array().iter().zip(c.letter_values.as_array()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(b.gmm.is_some(), c.gmm.is_some());
    }
    assert!(SpeedMap::read_from(&b"nope\n"[..], &g, 30).is_err());
}

proptest! {
    #[test]
    fn confidence_is_a_bounded_symmetric_kernel(
        len in 100.0f64..20_000.0,
        di in 1.0f64..5000.0,
        dj in 1.0f64..5000.0,
        lambda in 0.1f64..100.0,
    ) {
        let w = confidence(len, di, dj, lambda).unwrap();
        prop_assert!((0.0..=1.0).contains(&w));
        prop_assert_eq!(w, confidence(len, dj, di, lambda).unwrap());
        // moving d_j further from d_i never raises the weight
        let further = if dj >= di { dj * 1.5 } else { dj / 1.5 };
        prop_assert!(confidence(len, di, further, lambda).unwrap() <= w + 1e-15);
    }

    #[test]
    fn ramp_correction_shrinks_duration(dur in 2i64..20_000) {
        let g = graph();
        let t = trip(&g, 0, "A", "C", 0, dur);
        let r = Route::from_ids(&g, &["AB", "BC"]).unwrap();
        let c = ramp_corrected_duration(&t, &r, &g).unwrap();
        prop_assert!(c < dur as f64 && c > 0.0);
        prop_assert!((c - dur as f64 * 15_000.0 / 15_500.0).abs() < 1e-9);
    }
}

#[test]
fn samples_are_filed_where_the_edge_is_driven() {
    let g = graph();
    // Both trips enter at 00:25; BC is driven after 00:30.
    let short = trip(&g, 0, "A", "B", 1500, 400);
    let long = trip(&g, 1, "A", "C", 1510, 600);
    let trips = vec![routed(&g, short, &["AB"]), routed(&g, long, &["AB", "BC"])];
    let set = derive_edge_samples(&trips, &g, &CrowdConfig::default()).unwrap();
    let ab = set.samples.iter().find(|s| s.edge == g.edge_ix("AB").unwrap()).unwrap();
    let bc = set.samples.iter().find(|s| s.edge == g.edge_ix("BC").unwrap()).unwrap();
    assert_eq!(ab.slot.index, 0);
    assert_eq!(bc.slot.index, 1);
}
