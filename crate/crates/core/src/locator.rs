//! Real-time location prediction and the evaluation metrics.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeIx, HighwayGraph, Route, StationIx};
use crate::ingest::Timestamp;
use crate::predictors::{PredictorBundle, TripQuery};
use crate::sim::GroundTruthTrace;

pub const DEFAULT_INTERVAL_S: f64 = 15.0;
pub const DEFAULT_THRESHOLD_M: f64 = 100.0;
/// Predicted speeds below this are raised to it so every trip ends.
pub const SPEED_FLOOR_KMH: f64 = 5.0;
pub const LOCATION_TRACE_HEADER: &str = "vehicle_id,timestamp,edge,offset_m,arrived";

/// The three predictions the locator combines.
pub trait MobilityPredictor {
    fn destination(&self, graph: &HighwayGraph, q: &TripQuery) -> Result<StationIx>;
    fn route(&self, graph: &HighwayGraph, q: &TripQuery, destination: StationIx) -> Result<Route>;
    /// Speed on `edge` of `route` at instant `t_s`.
    fn speed_kmh(&self, graph: &HighwayGraph, q: &TripQuery, route: &Route, edge: EdgeIx, t_s: f64) -> Result<f64>;
}

impl MobilityPredictor for PredictorBundle {
    fn destination(&self, _graph: &HighwayGraph, q: &TripQuery) -> Result<StationIx> {
        self.predict_destination(q)
    }

    fn route(&self, graph: &HighwayGraph, q: &TripQuery, destination: StationIx) -> Result<Route> {
        Ok(self.predict_route(graph, q, destination)?.1)
    }

    fn speed_kmh(&self, graph: &HighwayGraph, q: &TripQuery, _route: &Route, edge: EdgeIx, t_s: f64) -> Result<f64> {
        self.predict_speed(graph, q, edge, Timestamp(t_s.floor() as i64))
    }
}

/// The Emp baseline drawn from a trained bundle's history and crowd tables.
#[derive(Clone, Copy, Debug)]
pub struct EmpPredictor<'a>(pub &'a PredictorBundle);

impl MobilityPredictor for EmpPredictor<'_> {
    fn destination(&self, _graph: &HighwayGraph, q: &TripQuery) -> Result<StationIx> {
        Ok(self.0.emp_baseline(q, None)?.destination)
    }

    fn route(&self, graph: &HighwayGraph, q: &TripQuery, destination: StationIx) -> Result<Route> {
        let routes = self.0.candidate_routes(graph, q.entrance, destination)?;
        let idx = self.0.emp_baseline(q, Some(destination))?.route;
        routes
            .get(idx)
            .or(routes.first())
            .cloned()
            .ok_or_else(|| Error::domain("no candidate route"))
    }

    fn speed_kmh(&self, graph: &HighwayGraph, q: &TripQuery, _route: &Route, edge: EdgeIx, t_s: f64) -> Result<f64> {
        let emp = self.0.emp_baseline(q, None)?;
        Ok(emp.speed_kmh(graph, &self.0.tables().speed_map, edge, Timestamp(t_s.floor() as i64)))
    }
}

/// Knows the true trip; its speed is the true mean over the coming interval.
#[derive(Clone, Copy, Debug)]
pub struct OraclePredictor<'a> {
    pub trace: &'a GroundTruthTrace,
    pub interval_s: f64,
}

impl MobilityPredictor for OraclePredictor<'_> {
    fn destination(&self, graph: &HighwayGraph, _q: &TripQuery) -> Result<StationIx> {
        Ok(self.trace.route.destination(graph))
    }

    fn route(&self, _graph: &HighwayGraph, _q: &TripQuery, _destination: StationIx) -> Result<Route> {
        Ok(self.trace.route.clone())
    }

    fn speed_kmh(&self, _graph: &HighwayGraph, _q: &TripQuery, _route: &Route, _edge: EdgeIx, t_s: f64) -> Result<f64> {
        let tr = self.trace;
        let moved = tr.position_at(t_s + self.interval_s) - tr.position_at(t_s);
        Ok(moved / self.interval_s * 3.6)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationEstimate {
    pub t_s: f64,
    pub edge: EdgeIx,
    /// Offset inside `edge`; zero while still on the entry ramp.
    pub offset_m: f64,
    /// Distance along the route from its first edge; negative on the ramp.
    pub distance_m: f64,
    pub arrived: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictedTrip {
    pub query: TripQuery,
    pub destination: StationIx,
    pub route: Route,
    pub interval_s: f64,
    /// One estimate per interval from the entry instant on.
    pub estimates: Vec<LocationEstimate>,
}

impl PredictedTrip {
    /// Predicted along-route distance at `t`, held at the last estimate.
    pub fn distance_at(&self, t: f64) -> f64 {
        let k = ((t - self.query.t0.0 as f64) / self.interval_s).round().max(0.0) as usize;
        self.estimates[k.min(self.estimates.len() - 1)].distance_m
    }
}

/// Replays destination, route and speed predictions from the entry instant:
/// the vehicle advances by speed times interval until it reaches the end of
/// the route. It starts on the entry ramp, which is driven at the first
/// edge's predicted speed.
pub fn predict_locations(
    pred: &dyn MobilityPredictor,
    graph: &HighwayGraph,
    q: &TripQuery,
    interval_s: f64,
) -> Result<PredictedTrip> {
    if !(interval_s > 0.0 && interval_s.is_finite()) {
        return Err(Error::domain("interval must be positive"));
    }
    if q.entrance.index() >= graph.station_count() {
        return Err(Error::UnknownStation(format!("#{}", q.entrance.0)));
    }
    let destination = pred.destination(graph, q)?;
    let route = pred.route(graph, q, destination)?;
    if route.origin(graph) != q.entrance {
        return Err(Error::domain("predicted route does not start at the entrance"));
    }
    let length = graph.route_length(&route)?;
    let mut distance = -graph.station(q.entrance).ramp_length_m;
    let mut t = q.t0.0 as f64;
    let mut estimates = Vec::new();
    loop {
        let pos = graph.locate_on_route(&route, distance.max(0.0))?;
        let arrived = distance >= length;
        estimates.push(LocationEstimate {
            t_s: t,
            edge: pos.edge,
            offset_m: if distance < 0.0 { 0.0 } else { pos.offset_m },
            distance_m: distance,
            arrived,
        });
        if arrived {
            break;
        }
        let v = pred.speed_kmh(graph, q, &route, pos.edge, t)?;
        let v = if v.is_finite() { v.max(SPEED_FLOOR_KMH) } else { SPEED_FLOOR_KMH };
        distance = (distance + v / 3.6 * interval_s).min(length);
        t += interval_s;
    }
    Ok(PredictedTrip {
        query: q.clone(),
        destination,
        route,
        interval_s,
        estimates,
    })
}

/// Fraction of exactly matching pairs.
pub fn destination_route_accuracy<T: PartialEq>(predicted: &[T], truth: &[T]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::domain(format!(
            "{} predictions for {} truths",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InsufficientSamples { have: 0, need: 1 });
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// One minus the relative error; negative beyond 100% error.
pub fn speed_accuracy(predicted_kmh: f64, actual_kmh: f64) -> Result<f64> {
    if !(actual_kmh > 0.0) {
        return Err(Error::domain(format!("actual speed {actual_kmh} is not positive")));
    }
    Ok(1.0 - (predicted_kmh - actual_kmh).abs() / actual_kmh)
}

/// Hits and samples at every interval instant while the vehicle is truly on
/// the highway. A wrong route misses at every instant.
pub fn location_hits(trip: &PredictedTrip, truth: &GroundTruthTrace, threshold_m: f64) -> (usize, usize) {
    let (from, to) = (truth.highway_entry_s(), truth.highway_exit_s());
    let same = trip.route == truth.route;
    let t0 = trip.query.t0.0 as f64;
    let mut hits = 0;
    let mut n = 0;
    let mut k = ((from - t0) / trip.interval_s).ceil().max(0.0) as usize;
    loop {
        let t = t0 + k as f64 * trip.interval_s;
        if t > to {
            break;
        }
        n += 1;
        if same && (trip.distance_at(t) - truth.position_at(t)).abs() <= threshold_m {
            hits += 1;
        }
        k += 1;
    }
    (hits, n)
}

pub fn location_accuracy(trip: &PredictedTrip, truth: &GroundTruthTrace, threshold_m: f64) -> Result<f64> {
    match location_hits(trip, truth, threshold_m) {
        (_, 0) => Err(Error::domain("no sample instant falls on the highway")),
        (h, n) => Ok(h as f64 / n as f64),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotStats {
    pub trips: usize,
    pub destination_hits: usize,
    pub location_hits: usize,
    pub location_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub trips: usize,
    pub threshold_m: f64,
    pub interval_s: f64,
    pub destination_accuracy: f64,
    /// Route predicted for the true destination.
    pub route_accuracy: f64,
    /// Mean per-edge speed accuracy, unclamped.
    pub speed_accuracy: f64,
    /// Over every trip; wrong routes count as misses.
    pub location_accuracy_all: f64,
    /// Over trips whose predicted route was right.
    pub location_accuracy_routed: Option<f64>,
    /// Keyed by entry hour.
    pub per_hour: BTreeMap<u32, SlotStats>,
}

/// Runs the locator on every trace and scores it.
pub fn evaluate(
    pred: &dyn MobilityPredictor,
    graph: &HighwayGraph,
    traces: &[GroundTruthTrace],
    threshold_m: f64,
    interval_s: f64,
) -> Result<EvaluationReport> {
    if traces.is_empty() {
        return Err(Error::InsufficientSamples { have: 0, need: 1 });
    }
    let mut pd = Vec::new();
    let mut td = Vec::new();
    let mut pr = Vec::new();
    let mut tr = Vec::new();
    let mut speed = Vec::new();
    let (mut all_h, mut all_n, mut ok_h, mut ok_n) = (0, 0, 0, 0);
    let mut per_hour: BTreeMap<u32, SlotStats> = BTreeMap::new();
    for trace in traces {
        let q = TripQuery {
            vehicle_id: trace.vehicle_id.clone(),
            vehicle_type: trace.transaction.vehicle_type,
            entrance: trace.transaction.entry_station,
            t0: trace.entry_time,
        };
        let truth_d = trace.route.destination(graph);
        let trip = predict_locations(pred, graph, &q, interval_s)?;
        pd.push(trip.destination);
        td.push(truth_d);
        pr.push(pred.route(graph, &q, truth_d)?);
        tr.push(trace.route.clone());
        for (e, t_enter, v) in trace.edge_speeds(graph) {
            let p = pred.speed_kmh(graph, &q, &trace.route, e, t_enter)?;
            speed.push(speed_accuracy(p, v)?);
        }
        let (h, n) = location_hits(&trip, trace, threshold_m);
        all_h += h;
        all_n += n;
        if trip.route == trace.route {
            ok_h += h;
            ok_n += n;
        }
        let hour = (trace.entry_time.seconds_of_day() / 3600) as u32;
        let s = per_hour.entry(hour).or_default();
        s.trips += 1;
        s.destination_hits += usize::from(trip.destination == truth_d);
        s.location_hits += h;
        s.location_samples += n;
    }
    if all_n == 0 {
        return Err(Error::domain("no sample instant falls on the highway"));
    }
    Ok(EvaluationReport {
        trips: traces.len(),
        threshold_m,
        interval_s,
        destination_accuracy: destination_route_accuracy(&pd, &td)?,
        route_accuracy: destination_route_accuracy(&pr, &tr)?,
        speed_accuracy: crate::stats::mean(&speed),
        location_accuracy_all: all_h as f64 / all_n as f64,
        location_accuracy_routed: (ok_n > 0).then(|| ok_h as f64 / ok_n as f64),
        per_hour,
    })
}

impl EvaluationReport {
    /// Summary lines followed by the per-hour table. Accuracies are clamped
    /// at zero for display only.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let shown = |v: f64| format!("{:.4}", v.max(0.0));
        writeln!(w, "metric,value")?;
        writeln!(w, "trips,{}", self.trips)?;
        writeln!(w, "threshold_m,{}", self.threshold_m)?;
        writeln!(w, "interval_s,{}", self.interval_s)?;
        writeln!(w, "destination_accuracy,{}", shown(self.destination_accuracy))?;
        writeln!(w, "route_accuracy,{}", shown(self.route_accuracy))?;
        writeln!(w, "speed_accuracy,{}", shown(self.speed_accuracy))?;
        writeln!(w, "location_accuracy_vemo_a,{}", shown(self.location_accuracy_all))?;
        match self.location_accuracy_routed {
            Some(v) => writeln!(w, "location_accuracy_vemo_r,{}", shown(v))?,
            None => writeln!(w, "location_accuracy_vemo_r,")?,
        }
        writeln!(w)?;
        writeln!(w, "hour,trips,destination_accuracy,location_accuracy")?;
        for (h, s) in &self.per_hour {
            let loc = if s.location_samples == 0 {
                String::new()
            } else {
                shown(s.location_hits as f64 / s.location_samples as f64)
            };
            writeln!(w, "{h},{},{},{loc}", s.trips, shown(s.destination_hits as f64 / s.trips as f64))?;
        }
        Ok(())
    }
}

pub fn write_location_trace<W: Write>(mut w: W, graph: &HighwayGraph, trips: &[PredictedTrip]) -> Result<()> {
    writeln!(w, "{LOCATION_TRACE_HEADER}")?;
    for trip in trips {
        for e in &trip.estimates {
            writeln!(
                w,
                "{},{},{},{:.1},{}",
                trip.query.vehicle_id,
                Timestamp(e.t_s.round() as i64),
                graph.edge(e.edge).id,
                e.offset_m,
                u8::from(e.arrived)
            )?;
        }
    }
    Ok(())
}
