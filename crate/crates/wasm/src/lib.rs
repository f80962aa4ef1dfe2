//! Browser bindings. [`Session`] holds the work and is plain Rust; [`Demo`]
//! wraps it for JavaScript. Every method returns a JSON string.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use tollsense::config::RunConfig;
use tollsense::crowd::SpeedMap;
use tollsense::graph::HighwayGraph;
use tollsense::ingest::{build_trips, Trip};
use tollsense::locator::{evaluate, predict_locations, EmpPredictor};
use tollsense::pipeline::{initial_speed_map, recover_window, train};
use tollsense::predictors::{PredictorBundle, TripQuery};
use tollsense::recovery::StateSequence;
use tollsense::sim::{generate_world, simulate_days, GroundTruthTrace, World};
use tollsense::Timestamp;

mod layout;

pub use layout::station_layout;

const DAYS: u32 = 7;

pub struct Session {
    cfg: RunConfig,
    world: World,
    train_trips: Vec<Trip>,
    test: Vec<GroundTruthTrace>,
    speed_map: SpeedMap,
    positions: Vec<(f64, f64)>,
    bundle: Option<PredictorBundle>,
}

impl Session {
    /// Simulates a week on a fresh network; the last day is held out.
    pub fn new(seed: u64, stations: usize, vehicles: usize) -> tollsense::Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("seed", seed.to_string()),
            ("sim.stations", stations.to_string()),
            ("sim.vehicles", vehicles.to_string()),
            ("sim.days", DAYS.to_string()),
            ("train_days", (DAYS - 1).to_string()),
            ("recovery.node_budget", "20000".into()),
        ] {
            cfg.set(k, &v)?;
        }
        let cfg = cfg.finish()?;
        let world = generate_world(&cfg.sim, seed)?;
        let sim = simulate_days(&world, DAYS, seed.wrapping_add(1))?;
        let cut = world.day_start(cfg.train_days);
        let train_tx: Vec<_> = sim.transactions.iter().filter(|t| t.exit_time < cut).cloned().collect();
        let train_trips = build_trips(&train_tx, cfg.crowd.slot_width_min)?;
        let test = sim.traces.into_iter().filter(|t| t.entry_time >= cut).collect();
        let speed_map = initial_speed_map(&train_trips, &world.graph, &cfg.crowd, &cfg.recovery)?;
        let positions = station_layout(&world.graph);
        Ok(Session {
            cfg,
            world,
            train_trips,
            test,
            speed_map,
            positions,
            bundle: None,
        })
    }

    pub fn graph(&self) -> &HighwayGraph {
        &self.world.graph
    }

    /// Stations with layout coordinates in [0, 1], edges, and trip counts.
    pub fn network(&self) -> Value {
        let g = &self.world.graph;
        let stations: Vec<Value> = g
            .stations()
            .iter()
            .zip(&self.positions)
            .map(|(s, &(x, y))| json!({ "id": s.id, "x": x, "y": y }))
            .collect();
        let edges: Vec<Value> = g
            .edges()
            .iter()
            .map(|e| {
                json!({
                    "id": e.id,
                    "from": e.from.index(),
                    "to": e.to.index(),
                    "length_m": e.length_m,
                    "limit_kmh": e.speed_limit_kmh,
                })
            })
            .collect();
        json!({
            "stations": stations,
            "edges": edges,
            "train_trips": self.train_trips.len(),
            "test_trips": self.test.len(),
        })
    }

    /// Crowd median speed of every edge in the slot containing `hour`:00,
    /// relative to its limit, and whether it is a free-flow fallback. Uses
    /// the map rebuilt from recovered routes once trained.
    pub fn speeds_at(&self, hour: u32) -> Value {
        let g = &self.world.graph;
        let map = self.bundle.as_ref().map_or(&self.speed_map, |b| &b.tables().speed_map);
        let t = Timestamp(self.world.day_start(0).0 + i64::from(hour.min(23)) * 3600);
        let cells: Vec<Value> = (0..g.edge_count())
            .map(|e| {
                let edge = tollsense::EdgeIx(e as u32);
                let (lv, fallback) = map.letter_values_at(g, edge, t);
                let limit = g.edge(edge).speed_limit_kmh;
                json!({
                    "median_kmh": lv.median,
                    "ratio": lv.median / limit,
                    "fallback": fallback,
                })
            })
            .collect();
        json!({ "hour": hour, "recovered": self.bundle.is_some(), "edges": cells })
    }

    /// Recovers routes, trains the predictors and scores them against Emp on
    /// the held-out day.
    pub fn train(&mut self) -> tollsense::Result<Value> {
        let g = &self.world.graph;
        let res = recover_window(&self.train_trips, g, &self.cfg)?;
        let seqs: Vec<StateSequence> = res.sequences.values().cloned().collect();
        let bundle = train(&self.train_trips, &seqs, g, &self.world.calendar, &self.cfg)?;
        let (th, iv) = (self.cfg.threshold_m, self.cfg.interval_s);
        let trained = evaluate(&bundle, g, &self.test, th, iv)?;
        let emp = evaluate(&EmpPredictor(&bundle), g, &self.test, th, iv)?;
        self.bundle = Some(bundle);
        let row = |r: &tollsense::locator::EvaluationReport| {
            json!({
                "destination": r.destination_accuracy,
                "route": r.route_accuracy,
                "speed": r.speed_accuracy,
                "location_all": r.location_accuracy_all,
                "location_routed": r.location_accuracy_routed,
            })
        };
        Ok(json!({
            "recovered": seqs.len(),
            "trips": trained.trips,
            "trained": row(&trained),
            "emp": row(&emp),
        }))
    }

    /// Held-out trips as `{vehicle, entrance, exit, entry}`.
    pub fn test_trips(&self) -> Value {
        let g = &self.world.graph;
        Value::Array(
            self.test
                .iter()
                .map(|t| {
                    json!({
                        "vehicle": t.vehicle_id,
                        "entrance": g.station(t.transaction.entry_station).id,
                        "exit": g.station(t.transaction.exit_station).id,
                        "entry": t.entry_time.to_string(),
                    })
                })
                .collect(),
        )
    }

    /// Predicted and true positions of held-out trip `index` at every
    /// prediction interval, as layout coordinates.
    pub fn predict(&self, index: usize) -> tollsense::Result<Value> {
        let bundle = self.bundle.as_ref().ok_or(tollsense::Error::Untrained)?;
        let truth = self
            .test
            .get(index)
            .ok_or_else(|| tollsense::Error::Domain(format!("no test trip {index}")))?;
        let g = &self.world.graph;
        let q = TripQuery {
            vehicle_id: truth.vehicle_id.clone(),
            vehicle_type: truth.transaction.vehicle_type,
            entrance: truth.transaction.entry_station,
            t0: truth.entry_time,
        };
        let trip = predict_locations(bundle, g, &q, self.cfg.interval_s)?;
        let mut frames = Vec::new();
        let last = trip.estimates.last().map_or(q.t0.0 as f64, |e| e.t_s).max(truth.end_s);
        let mut t = q.t0.0 as f64;
        while t <= last + 1e-9 {
            let predicted = self.point(&trip.route, trip.distance_at(t))?;
            let actual = self.point(&truth.route, truth.position_at(t))?;
            let gap = ((predicted.0 - actual.0).powi(2) + (predicted.1 - actual.1).powi(2)).sqrt();
            frames.push(json!({
                "t": Timestamp(t.round() as i64).to_string(),
                "predicted": [predicted.0, predicted.1],
                "actual": [actual.0, actual.1],
                "gap": gap,
            }));
            t += self.cfg.interval_s;
        }
        Ok(json!({
            "destination": g.station(trip.destination).id,
            "true_destination": g.station(truth.route.destination(g)).id,
            "route": trip.route.display_ids(g, " "),
            "true_route": truth.route.display_ids(g, " "),
            "frames": frames,
        }))
    }

    /// Layout coordinates of a point `distance_m` along `route`; ramps sit
    /// at their station.
    fn point(&self, route: &tollsense::Route, distance_m: f64) -> tollsense::Result<(f64, f64)> {
        let g = &self.world.graph;
        let pos = g.locate_on_route(route, distance_m.max(0.0))?;
        let e = g.edge(pos.edge);
        let f = (pos.offset_m / e.length_m).clamp(0.0, 1.0);
        let (a, b) = (self.positions[e.from.index()], self.positions[e.to.index()]);
        Ok((a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1)))
    }
}

fn js(r: tollsense::Result<Value>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, stations: u32, vehicles: u32) -> Result<Demo, JsError> {
        Session::new(u64::from(seed), stations as usize, vehicles as usize)
            .map(Demo)
            .map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn network(&self) -> String {
        self.0.network().to_string()
    }

    #[wasm_bindgen(js_name = speedsAt)]
    pub fn speeds_at(&self, hour: u32) -> String {
        self.0.speeds_at(hour).to_string()
    }

    pub fn train(&mut self) -> Result<String, JsError> {
        js(self.0.train())
    }

    #[wasm_bindgen(js_name = testTrips)]
    pub fn test_trips(&self) -> String {
        self.0.test_trips().to_string()
    }

    pub fn predict(&self, index: u32) -> Result<String, JsError> {
        js(self.0.predict(index as usize))
    }
}
