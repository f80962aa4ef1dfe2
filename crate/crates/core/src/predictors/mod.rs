//! Destination, route and speed predictors over Mondrian forests, the Emp
//! baseline, and online feedback.

mod features;
mod persist;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use features::{
    destination_features, destination_schema, feature_slot, route_features, route_schema, speed_features,
    speed_schema, CrowdTables, DestinationFeatures, HistoryStore, PastTrip, RouteFeatures, SpeedFeatures,
    FEATURE_SLOT_MIN,
};
pub use persist::{load_bundle, save_bundle};

use crate::crowd::SpeedMap;
use crate::error::{Error, Result};
use crate::forest::{ForestConfig, MondrianForest, Target, Task};
use crate::graph::{EdgeIx, HighwayGraph, Route, RouteCatalog, StationIx, DEFAULT_MAX_EDGES};
use crate::ingest::{Calendar, Timestamp, Transaction, Trip, TripId, VehicleType};
use crate::recovery::{recover_single, RecoveryConfig, SpeedReference, StateSequence};
use features::{argmax, WindowTrip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub trees: usize,
    pub seed: u64,
    pub discount: f64,
    pub min_split_points: usize,
    pub lifetime: Option<f64>,
    /// Candidate routes described in the route features.
    pub route_features: usize,
    pub max_route_edges: usize,
    /// Used to label completed trips fed back online.
    pub recovery: RecoveryConfig,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            trees: 25,
            seed: 0,
            discount: 0.9,
            min_split_points: 5,
            lifetime: None,
            route_features: 4,
            max_route_edges: DEFAULT_MAX_EDGES,
            recovery: RecoveryConfig::default(),
        }
    }
}

impl PredictorConfig {
    fn forest(&self, salt: u64) -> ForestConfig {
        ForestConfig {
            trees: self.trees,
            lifetime: self.lifetime,
            discount: self.discount,
            min_split_points: self.min_split_points,
            seed: self.seed ^ salt.wrapping_mul(0xA24B_AED4_963E_E407),
        }
    }

    /// Hex prefix of the SHA-256 of the serialized config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// A training trip with its recovered route and speeds, when available.
#[derive(Clone, Debug)]
pub struct TrainingTrip {
    pub trip: Trip,
    pub recovered: Option<StateSequence>,
}

/// The information available when a vehicle enters the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripQuery {
    pub vehicle_id: String,
    pub vehicle_type: VehicleType,
    pub entrance: StationIx,
    pub t0: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub window_start: Timestamp,
    pub window_end: Timestamp,
    pub trips: usize,
    pub config_hash: String,
    /// Feedback calls absorbed by each forest.
    pub d_updates: u64,
    pub r_updates: u64,
    pub s_updates: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedbackOutcome {
    pub new_destination_label: bool,
    /// Whether route and speed labels could be recovered for the trip.
    pub recovered: bool,
}

/// Emp: most frequent historical destination and route, historical mean speed.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpPrediction {
    pub destination: StationIx,
    /// Index into the candidate routes of the predicted pair.
    pub route: usize,
    pub historical_speed: Option<f64>,
}

impl EmpPrediction {
    /// Historical mean speed, or the crowd median on `edge` without history.
    pub fn speed_kmh(&self, graph: &HighwayGraph, map: &SpeedMap, edge: EdgeIx, t: Timestamp) -> f64 {
        self.historical_speed.unwrap_or_else(|| map.median_at(graph, edge, t))
    }
}

fn key(tx: &Transaction) -> (String, i64) {
    (tx.vehicle_id.clone(), tx.entry_time.0)
}

pub struct PredictorBundle {
    pub config: PredictorConfig,
    pub meta: TrainingMeta,
    d: MondrianForest,
    r: MondrianForest,
    s: MondrianForest,
    /// Destination label to station, in order of first appearance.
    dest_labels: Vec<StationIx>,
    tables: CrowdTables,
    history: HistoryStore,
    calendar: Calendar,
    seen: BTreeSet<(String, i64)>,
    next_trip: TripId,
    reference: SpeedReference,
    catalog: Mutex<RouteCatalog>,
}

impl std::fmt::Debug for PredictorBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PredictorBundle")
            .field("meta", &self.meta)
            .field("destination_labels", &self.dest_labels.len())
            .finish_non_exhaustive()
    }
}

fn past_trip(
    trip: &Trip,
    recovered: Option<&StateSequence>,
    route: Option<usize>,
    graph: &HighwayGraph,
    calendar: &Calendar,
    map: &SpeedMap,
) -> PastTrip {
    let ctx = calendar.context(trip.entry_time().date());
    let (speed, residual) = match recovered {
        Some(seq) => {
            let es = seq.edge_speeds();
            let res = es
                .iter()
                .map(|&(e, v, t)| v - map.median_at(graph, e, Timestamp(t as i64)))
                .sum::<f64>()
                / es.len().max(1) as f64;
            (Some(seq.mean_speed_kmh()), Some(res))
        }
        None => (None, None),
    };
    PastTrip {
        origin: trip.origin(),
        destination: trip.destination(),
        entry_time: trip.entry_time(),
        exit_time: trip.transaction.exit_time,
        quiet: ctx.is_weekend || ctx.is_holiday,
        route,
        duration_s: trip.duration_s as f64,
        speed_kmh: speed,
        residual_kmh: residual,
    }
}

fn route_index(catalog: &mut RouteCatalog, graph: &HighwayGraph, route: &Route) -> Result<Option<usize>> {
    let routes = catalog.routes(graph, route.origin(graph), route.destination(graph))?;
    Ok(routes.iter().position(|r| r == route))
}

/// Trains the three predictors in one chronological pass over the window.
/// Crowd tables are frozen from the same window.
pub fn train_bundle(
    trips: &[TrainingTrip],
    graph: &HighwayGraph,
    calendar: &Calendar,
    speed_map: SpeedMap,
    cfg: &PredictorConfig,
) -> Result<PredictorBundle> {
    if trips.is_empty() {
        return Err(Error::InsufficientSamples { have: 0, need: 1 });
    }
    if cfg.route_features == 0 {
        return Err(Error::domain("route_features must be positive"));
    }
    let mut order: Vec<&TrainingTrip> = trips.iter().collect();
    order.sort_by_key(|t| (t.trip.entry_time(), t.trip.id));

    let mut catalog = RouteCatalog::new(cfg.max_route_edges);
    let mut labels = Vec::with_capacity(order.len());
    let mut window = Vec::with_capacity(order.len());
    let mut history = HistoryStore::default();
    for t in &order {
        let label = match &t.recovered {
            Some(seq) => route_index(&mut catalog, graph, &seq.route)?,
            None => None,
        };
        let candidates = catalog.routes(graph, t.trip.origin(), t.trip.destination())?.len();
        labels.push(label);
        window.push(WindowTrip {
            origin: t.trip.origin(),
            destination: t.trip.destination(),
            slot: feature_slot(t.trip.entry_time()),
            duration_s: t.trip.duration_s as f64,
            route: label,
            candidates,
        });
        history.push(
            t.trip.vehicle_id(),
            past_trip(&t.trip, t.recovered.as_ref(), label, graph, calendar, &speed_map),
        );
    }
    let tables = CrowdTables::build(graph.station_count(), &window, speed_map);
    let reference = SpeedReference::from_speed_map(&tables.speed_map, graph);

    let n = graph.station_count();
    let mut bundle = PredictorBundle {
        config: cfg.clone(),
        meta: TrainingMeta {
            window_start: order[0].trip.entry_time(),
            window_end: order.iter().map(|t| t.trip.transaction.exit_time).max().expect("non-empty"),
            trips: order.len(),
            config_hash: cfg.hash(),
            d_updates: 0,
            r_updates: 0,
            s_updates: 0,
        },
        d: MondrianForest::new(destination_schema(n), Task::Classification, cfg.forest(1))?,
        r: MondrianForest::new(route_schema(cfg.route_features), Task::Classification, cfg.forest(2))?,
        s: MondrianForest::new(speed_schema(), Task::Regression, cfg.forest(3))?,
        dest_labels: Vec::new(),
        tables,
        history,
        calendar: calendar.clone(),
        seen: BTreeSet::new(),
        next_trip: trips.iter().map(|t| t.trip.id + 1).max().unwrap_or(0),
        reference,
        catalog: Mutex::new(catalog),
    };
    for (t, label) in order.iter().zip(labels) {
        if !bundle.seen.insert(key(&t.trip.transaction)) {
            return Err(Error::Duplicate(format!(
                "transaction of {} at {}",
                t.trip.vehicle_id(),
                t.trip.entry_time()
            )));
        }
        bundle.learn(graph, &t.trip, t.recovered.as_ref(), label)?;
    }
    Ok(bundle)
}

impl PredictorBundle {
    pub fn tables(&self) -> &CrowdTables {
        &self.tables
    }

    pub fn history(&self) -> &HistoryStore {
        &self.history
    }

    pub fn calendar(&self) -> &Calendar {
        &self.calendar
    }

    pub fn destination_forest(&self) -> &MondrianForest {
        &self.d
    }

    pub fn route_forest(&self) -> &MondrianForest {
        &self.r
    }

    pub fn speed_forest(&self) -> &MondrianForest {
        &self.s
    }

    /// Stations the destination predictor has labels for.
    pub fn destination_labels(&self) -> &[StationIx] {
        &self.dest_labels
    }

    /// Candidate routes of a pair, in label order.
    pub fn candidate_routes(&self, graph: &HighwayGraph, o: StationIx, d: StationIx) -> Result<Vec<Route>> {
        let mut cat = self.catalog.lock().expect("catalog lock");
        Ok(cat.routes(graph, o, d)?.to_vec())
    }

    fn dest_label(&mut self, s: StationIx) -> (u32, bool) {
        match self.dest_labels.iter().position(|&x| x == s) {
            Some(i) => (i as u32, false),
            None => {
                self.dest_labels.push(s);
                (self.dest_labels.len() as u32 - 1, true)
            }
        }
    }

    /// Feeds one trip to the forests, using only history that ended before it
    /// started. Returns whether the destination label is new.
    fn learn(
        &mut self,
        graph: &HighwayGraph,
        trip: &Trip,
        recovered: Option<&StateSequence>,
        route: Option<usize>,
    ) -> Result<bool> {
        let t0 = trip.entry_time();
        let ctx = self.calendar.context(t0.date());
        let vtype = trip.transaction.vehicle_type;
        let hist = self.history.before(trip.vehicle_id(), t0).to_vec();
        let df = destination_features(&hist, trip.origin(), t0, vtype, &ctx, &self.tables)?;
        let (label, new) = self.dest_label(trip.destination());
        self.d.update(&df.to_vector(), Target::Class(label))?;
        let Some(seq) = recovered else {
            return Ok(new);
        };
        if let Some(r) = route {
            let mut cat = self.catalog.lock().expect("catalog lock");
            let rf = route_features(
                &hist,
                trip.origin(),
                trip.destination(),
                t0,
                &ctx,
                graph,
                &mut cat,
                &self.tables,
                self.config.route_features,
            )?;
            drop(cat);
            self.r.update(&rf.to_vector(), Target::Class(r as u32))?;
        }
        for (e, v, t) in seq.edge_speeds() {
            let at = Timestamp(t as i64);
            let sf = speed_features(&hist, e, at, vtype, &ctx, graph, &self.tables)?;
            self.s.update(&sf.to_vector(), Target::Value(v - sf.crowd.median))?;
        }
        Ok(new)
    }

    /// Destination probabilities per station; the entrance itself is excluded.
    pub fn destination_distribution(&self, q: &TripQuery) -> Result<Vec<f64>> {
        let ctx = self.calendar.context(q.t0.date());
        let hist = self.history.before(&q.vehicle_id, q.t0);
        let f = destination_features(hist, q.entrance, q.t0, q.vehicle_type, &ctx, &self.tables)?;
        let p = self.d.predict_proba(&f.to_vector())?;
        let mut out = vec![0.0; self.tables.n_stations];
        for (label, &station) in self.dest_labels.iter().enumerate() {
            if station != q.entrance {
                out[station.index()] = p[label];
            }
        }
        Ok(out)
    }

    pub fn predict_destination(&self, q: &TripQuery) -> Result<StationIx> {
        let p = self.destination_distribution(q)?;
        match argmax(&p, Some(q.entrance.index())) {
            Some(i) => Ok(StationIx(i as u32)),
            None => Ok(self.emp_baseline(q, None)?.destination),
        }
    }

    /// Most probable candidate route index for the pair.
    pub fn predict_route(&self, graph: &HighwayGraph, q: &TripQuery, destination: StationIx) -> Result<(usize, Route)> {
        let ctx = self.calendar.context(q.t0.date());
        let hist = self.history.before(&q.vehicle_id, q.t0);
        let mut cat = self.catalog.lock().expect("catalog lock");
        let f = route_features(
            hist,
            q.entrance,
            destination,
            q.t0,
            &ctx,
            graph,
            &mut cat,
            &self.tables,
            self.config.route_features,
        )?;
        let routes = cat.routes(graph, q.entrance, destination)?;
        let idx = if self.r.n_points() == 0 {
            0
        } else {
            let p = self.r.predict_proba(&f.to_vector())?;
            let k = p.len().min(routes.len());
            argmax(&p[..k], None).unwrap_or(0)
        };
        Ok((idx, routes[idx].clone()))
    }

    /// Speed on `edge` at `t` for a trip that started at `q.t0`.
    pub fn predict_speed(&self, graph: &HighwayGraph, q: &TripQuery, edge: EdgeIx, t: Timestamp) -> Result<f64> {
        let ctx = self.calendar.context(t.date());
        let hist = self.history.before(&q.vehicle_id, q.t0);
        let f = speed_features(hist, edge, t, q.vehicle_type, &ctx, graph, &self.tables)?;
        if self.s.n_points() == 0 {
            return Ok(f.crowd.median);
        }
        Ok(f.crowd.median + self.s.predict_regression(&f.to_vector())?.mean)
    }

    /// The Emp baseline for `q`; `destination` overrides the predicted one
    /// when choosing the route.
    pub fn emp_baseline(&self, q: &TripQuery, destination: Option<StationIx>) -> Result<EmpPrediction> {
        let hist = self.history.before(&q.vehicle_id, q.t0);
        let cat = self.catalog.lock().expect("catalog lock");
        Ok(emp_baseline(hist, q.entrance, q.t0, &self.tables, destination, &cat))
    }

    /// Absorbs a completed trip: the destination forest learns its exit, the
    /// route and speed forests learn from recovering it against the crowd map.
    pub fn feedback_update(&mut self, graph: &HighwayGraph, tx: &Transaction) -> Result<FeedbackOutcome> {
        let k = key(tx);
        if self.seen.contains(&k) {
            return Err(Error::Duplicate(format!(
                "feedback already received for {} entering at {}",
                tx.vehicle_id, tx.entry_time
            )));
        }
        for s in [tx.entry_station, tx.exit_station] {
            if s.index() >= graph.station_count() {
                return Err(Error::UnknownStation(format!("#{}", s.0)));
            }
        }
        let trip = Trip::new(self.next_trip, tx.clone(), FEATURE_SLOT_MIN)?;
        let recovered = {
            let mut cat = RouteCatalog::new(self.config.recovery.max_route_edges);
            recover_single(&trip, graph, &mut cat, &self.config.recovery, &self.reference).ok()
        };
        let route = match &recovered {
            Some(seq) => {
                let mut cat = self.catalog.lock().expect("catalog lock");
                route_index(&mut cat, graph, &seq.route)?
            }
            None => None,
        };
        let new = self.learn(graph, &trip, recovered.as_ref(), route)?;
        self.seen.insert(k);
        self.next_trip += 1;
        self.meta.d_updates += 1;
        if route.is_some() {
            self.meta.r_updates += 1;
        }
        if recovered.is_some() {
            self.meta.s_updates += 1;
        }
        let past = past_trip(&trip, recovered.as_ref(), route, graph, &self.calendar, &self.tables.speed_map);
        self.history.push(&tx.vehicle_id, past);
        Ok(FeedbackOutcome {
            new_destination_label: new,
            recovered: recovered.is_some(),
        })
    }
}

fn mode<K: Ord + Copy>(items: impl Iterator<Item = K>) -> Option<K> {
    let mut counts: BTreeMap<K, usize> = BTreeMap::new();
    for k in items {
        *counts.entry(k).or_default() += 1;
    }
    let mut best: Option<(K, usize)> = None;
    for (k, c) in counts {
        if best.is_none_or(|b| c > b.1) {
            best = Some((k, c));
        }
    }
    best.map(|b| b.0)
}

/// Emp baseline from a vehicle's history. Destinations prefer trips from the
/// same entrance, then any trip, then the crowd mode; ties go to the lower
/// station or route index.
pub fn emp_baseline(
    history: &[PastTrip],
    origin: StationIx,
    t0: Timestamp,
    tables: &CrowdTables,
    destination: Option<StationIx>,
    catalog: &RouteCatalog,
) -> EmpPrediction {
    let slot = feature_slot(t0);
    let dest = destination.unwrap_or_else(|| {
        mode(history.iter().filter(|p| p.origin == origin).map(|p| p.destination))
            .or_else(|| mode(history.iter().map(|p| p.destination).filter(|&d| d != origin)))
            .or_else(|| tables.destination_mode(origin, slot))
            .unwrap_or(StationIx(if origin.0 == 0 { 1 } else { 0 }))
    });
    let route = mode(
        history
            .iter()
            .filter(|p| p.origin == origin && p.destination == dest)
            .filter_map(|p| p.route),
    )
    .or_else(|| tables.route_shares(origin, dest, slot).and_then(|s| argmax(s, None)))
    .unwrap_or(0);
    let route = match catalog.cached(origin, dest) {
        Some(rs) if route >= rs.len() => 0,
        _ => route,
    };
    let speeds: Vec<f64> = history.iter().filter_map(|p| p.speed_kmh).collect();
    EmpPrediction {
        destination: dest,
        route,
        historical_speed: (!speeds.is_empty()).then(|| speeds.iter().sum::<f64>() / speeds.len() as f64),
    }
}

#[cfg(test)]
mod tests;
