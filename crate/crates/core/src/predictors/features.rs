//! Per-vehicle history, crowd tables and the three feature layouts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crowd::{LetterValues, SpeedMap};
use crate::error::{Error, Result};
use crate::forest::{FeatureSchema, FeatureVector};
use crate::graph::{EdgeIx, HighwayGraph, Route, RouteCatalog, StationIx};
use crate::ingest::{slot_of, ContextRecord, Timestamp, VehicleType};

/// Half-hour entry slots.
pub const FEATURE_SLOT_MIN: u32 = 30;
const SLOTS: f64 = 48.0;

/// A completed trip as remembered for feature extraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PastTrip {
    pub origin: StationIx,
    pub destination: StationIx,
    pub entry_time: Timestamp,
    pub exit_time: Timestamp,
    /// Weekend or holiday.
    pub quiet: bool,
    /// Index of the travelled route among the pair's candidates, when known.
    pub route: Option<usize>,
    pub duration_s: f64,
    /// Mean highway speed of the recovered trip.
    pub speed_kmh: Option<f64>,
    /// Mean of per-edge speed minus crowd median.
    pub residual_kmh: Option<f64>,
}

/// Completed trips per vehicle, ordered by exit time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HistoryStore {
    by_vehicle: BTreeMap<String, Vec<PastTrip>>,
}

impl HistoryStore {
    pub fn push(&mut self, vehicle: &str, trip: PastTrip) {
        let list = self.by_vehicle.entry(vehicle.to_string()).or_default();
        let at = list.partition_point(|p| p.exit_time <= trip.exit_time);
        list.insert(at, trip);
    }

    /// Trips of `vehicle` that had finished by `t`.
    pub fn before(&self, vehicle: &str, t: Timestamp) -> &[PastTrip] {
        match self.by_vehicle.get(vehicle) {
            Some(list) => &list[..list.partition_point(|p| p.exit_time <= t)],
            None => &[],
        }
    }

    pub fn vehicles(&self) -> impl Iterator<Item = (&str, &[PastTrip])> {
        self.by_vehicle.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.by_vehicle.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_vehicle.is_empty()
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    }
    v
}

/// Crowd destination and route shares, population trip durations and the
/// crowd speed map, all frozen from a training window.
#[derive(Clone, Debug, PartialEq)]
pub struct CrowdTables {
    pub n_stations: usize,
    pub destinations: BTreeMap<(StationIx, u32), Vec<f64>>,
    pub destinations_any: BTreeMap<StationIx, Vec<f64>>,
    pub routes: BTreeMap<(StationIx, StationIx, u32), Vec<f64>>,
    pub routes_any: BTreeMap<(StationIx, StationIx), Vec<f64>>,
    /// Sum and count of trip durations per pair and slot.
    pub durations: BTreeMap<(StationIx, StationIx, u32), (f64, f64)>,
    pub speed_map: SpeedMap,
}

/// One trip of a training window: origin, destination, slot, duration and
/// the route label if known.
pub(crate) struct WindowTrip {
    pub origin: StationIx,
    pub destination: StationIx,
    pub slot: u32,
    pub duration_s: f64,
    pub route: Option<usize>,
    pub candidates: usize,
}

impl CrowdTables {
    pub(crate) fn build(n_stations: usize, trips: &[WindowTrip], speed_map: SpeedMap) -> Self {
        let mut dest: BTreeMap<(StationIx, u32), Vec<f64>> = BTreeMap::new();
        let mut dest_any: BTreeMap<StationIx, Vec<f64>> = BTreeMap::new();
        let mut routes: BTreeMap<(StationIx, StationIx, u32), Vec<f64>> = BTreeMap::new();
        let mut routes_any: BTreeMap<(StationIx, StationIx), Vec<f64>> = BTreeMap::new();
        let mut durations: BTreeMap<(StationIx, StationIx, u32), (f64, f64)> = BTreeMap::new();
        for t in trips {
            let d = t.destination.index();
            dest.entry((t.origin, t.slot)).or_insert_with(|| vec![0.0; n_stations])[d] += 1.0;
            dest_any.entry(t.origin).or_insert_with(|| vec![0.0; n_stations])[d] += 1.0;
            let e = durations.entry((t.origin, t.destination, t.slot)).or_default();
            e.0 += t.duration_s;
            e.1 += 1.0;
            if let Some(r) = t.route {
                let n = t.candidates;
                routes.entry((t.origin, t.destination, t.slot)).or_insert_with(|| vec![0.0; n])[r] += 1.0;
                routes_any.entry((t.origin, t.destination)).or_insert_with(|| vec![0.0; n])[r] += 1.0;
            }
        }
        CrowdTables {
            n_stations,
            destinations: dest.into_iter().map(|(k, v)| (k, normalized(v))).collect(),
            destinations_any: dest_any.into_iter().map(|(k, v)| (k, normalized(v))).collect(),
            routes: routes.into_iter().map(|(k, v)| (k, normalized(v))).collect(),
            routes_any: routes_any.into_iter().map(|(k, v)| (k, normalized(v))).collect(),
            durations,
            speed_map,
        }
    }

    /// Destination shares from `origin` in `slot`, falling back to all slots.
    pub fn destination_shares(&self, origin: StationIx, slot: u32) -> Vec<f64> {
        self.destinations
            .get(&(origin, slot))
            .or_else(|| self.destinations_any.get(&origin))
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.n_stations])
    }

    pub fn route_shares(&self, origin: StationIx, destination: StationIx, slot: u32) -> Option<&[f64]> {
        self.routes
            .get(&(origin, destination, slot))
            .or_else(|| self.routes_any.get(&(origin, destination)))
            .map(Vec::as_slice)
    }

    pub fn mean_duration(&self, origin: StationIx, destination: StationIx, slot: u32) -> Option<f64> {
        self.durations
            .get(&(origin, destination, slot))
            .filter(|d| d.1 > 0.0)
            .map(|d| d.0 / d.1)
    }

    /// Most popular destination from `origin`, ties to the lower station.
    pub fn destination_mode(&self, origin: StationIx, slot: u32) -> Option<StationIx> {
        argmax(&self.destination_shares(origin, slot), Some(origin.index())).map(|i| StationIx(i as u32))
    }
}

/// Index of the largest positive entry, ties to the lowest index.
pub(crate) fn argmax(v: &[f64], skip: Option<usize>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, x) in v.iter().enumerate() {
        if Some(i) == skip || !(*x > 0.0) {
            continue;
        }
        if best.is_none_or(|b| *x > v[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn feature_slot(t: Timestamp) -> u32 {
    slot_of(t, FEATURE_SLOT_MIN).map(|s| s.index).unwrap_or(0)
}

fn quiet(ctx: &ContextRecord) -> bool {
    ctx.is_weekend || ctx.is_holiday
}

fn flag(b: bool) -> u32 {
    u32::from(b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DestinationFeatures {
    pub origin: StationIx,
    pub slot: u32,
    pub vehicle_type: VehicleType,
    pub day_of_week: u8,
    pub is_weekend: bool,
    pub is_holiday: bool,
    pub history_count: usize,
    /// Destination shares over the whole history.
    pub history_all: Vec<f64>,
    /// Shares among past trips from the same origin.
    pub history_origin: Vec<f64>,
    /// Shares among past trips from the same origin on the same day type.
    pub history_day_type: Vec<f64>,
    pub crowd: Vec<f64>,
}

pub fn destination_schema(n_stations: usize) -> FeatureSchema {
    let mut s = FeatureSchema::new();
    for block in ["hist_all", "hist_origin", "hist_daytype", "crowd"] {
        for i in 0..n_stations {
            s = s.numeric(format!("{block}_{i}"));
        }
    }
    s.numeric("history_count")
        .numeric("slot")
        .categorical("vehicle_type", 3)
        .categorical("day_of_week", 7)
        .categorical("weekend", 2)
        .categorical("holiday", 2)
}

pub fn destination_features(
    history: &[PastTrip],
    origin: StationIx,
    t0: Timestamp,
    vehicle_type: VehicleType,
    ctx: &ContextRecord,
    tables: &CrowdTables,
) -> Result<DestinationFeatures> {
    let n = tables.n_stations;
    if origin.index() >= n {
        return Err(Error::UnknownStation(format!("#{}", origin.0)));
    }
    let slot = feature_slot(t0);
    let mut all = vec![0.0; n];
    let mut from = vec![0.0; n];
    let mut day = vec![0.0; n];
    for p in history {
        let d = p.destination.index();
        all[d] += 1.0;
        if p.origin == origin {
            from[d] += 1.0;
            if p.quiet == quiet(ctx) {
                day[d] += 1.0;
            }
        }
    }
    Ok(DestinationFeatures {
        origin,
        slot,
        vehicle_type,
        day_of_week: ctx.day_of_week,
        is_weekend: ctx.is_weekend,
        is_holiday: ctx.is_holiday,
        history_count: history.len(),
        history_all: normalized(all),
        history_origin: normalized(from),
        history_day_type: normalized(day),
        crowd: tables.destination_shares(origin, slot),
    })
}

impl DestinationFeatures {
    pub fn to_vector(&self) -> FeatureVector {
        let mut num = Vec::with_capacity(4 * self.crowd.len() + 2);
        num.extend(&self.history_all);
        num.extend(&self.history_origin);
        num.extend(&self.history_day_type);
        num.extend(&self.crowd);
        num.push((self.history_count as f64 / 20.0).min(1.0));
        num.push(self.slot as f64 / SLOTS);
        FeatureVector::new(
            num,
            vec![
                self.vehicle_type.code(),
                self.day_of_week as u32 - 1,
                flag(self.is_weekend),
                flag(self.is_holiday),
            ],
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouteFeatures {
    pub origin: StationIx,
    pub destination: StationIx,
    pub candidates: usize,
    pub slot: u32,
    pub day_of_week: u8,
    pub is_weekend: bool,
    /// Per candidate, padded to the configured width.
    pub usage: Vec<f64>,
    pub crowd: Vec<f64>,
    /// Length over the shortest candidate, minus one.
    pub stretch: Vec<f64>,
    /// Previous-slot crowd median over the route, relative to its limits.
    pub recent_speed: Vec<f64>,
    /// Highway trips per day over the vehicle's history.
    pub trip_frequency: f64,
    /// Mean time saved against the population on the same pair and slot.
    pub saved_time_s: f64,
    pub saved_time_missing: bool,
}

pub fn route_schema(width: usize) -> FeatureSchema {
    let mut s = FeatureSchema::new();
    for block in ["usage", "crowd", "stretch", "recent_speed"] {
        for i in 0..width {
            s = s.numeric(format!("{block}_{i}"));
        }
    }
    s.numeric("trip_frequency")
        .numeric("saved_time")
        .numeric("slot")
        .categorical("saved_time_missing", 2)
        .categorical("day_of_week", 7)
        .categorical("weekend", 2)
}

fn route_speed_ratio(graph: &HighwayGraph, map: &SpeedMap, route: &Route, t: Timestamp) -> f64 {
    let mut time = 0.0;
    let mut free = 0.0;
    for &e in route.edges() {
        let edge = graph.edge(e);
        let v = map.median_at(graph, e, t).max(1.0);
        time += edge.length_m / v;
        free += edge.length_m / edge.speed_limit_kmh;
    }
    free / time
}

#[allow(clippy::too_many_arguments)]
pub fn route_features(
    history: &[PastTrip],
    origin: StationIx,
    destination: StationIx,
    t0: Timestamp,
    ctx: &ContextRecord,
    graph: &HighwayGraph,
    catalog: &mut RouteCatalog,
    tables: &CrowdTables,
    width: usize,
) -> Result<RouteFeatures> {
    let routes = catalog.routes(graph, origin, destination)?;
    if routes.is_empty() {
        return Err(Error::domain(format!(
            "no route from {} to {}",
            graph.station(origin).id,
            graph.station(destination).id
        )));
    }
    let slot = feature_slot(t0);
    let mut usage = vec![0.0; width];
    for p in history {
        if let (true, Some(r)) = (p.origin == origin && p.destination == destination, p.route) {
            if r < width {
                usage[r] += 1.0;
            }
        }
    }
    let mut crowd = vec![0.0; width];
    if let Some(shares) = tables.route_shares(origin, destination, slot) {
        for (c, s) in crowd.iter_mut().zip(shares) {
            *c = *s;
        }
    }
    let shortest = graph.route_length(&routes[0])?;
    let previous = t0.plus(-(FEATURE_SLOT_MIN as i64) * 60);
    let mut stretch = vec![1.0; width];
    let mut recent = vec![0.0; width];
    for (i, r) in routes.iter().take(width).enumerate() {
        stretch[i] = graph.route_length(r)? / shortest - 1.0;
        recent[i] = route_speed_ratio(graph, &tables.speed_map, r, previous);
    }
    let trip_frequency = match (history.first(), history.last()) {
        (Some(a), Some(_)) => {
            let days = ((t0.0 - a.entry_time.0) as f64 / 86_400.0).max(1.0);
            history.len() as f64 / days
        }
        _ => 0.0,
    };
    let mut saved = Vec::new();
    for p in history {
        if let Some(m) = tables.mean_duration(p.origin, p.destination, feature_slot(p.entry_time)) {
            saved.push(m - p.duration_s);
        }
    }
    let saved_time_missing = saved.is_empty();
    let saved_time_s = if saved_time_missing {
        0.0
    } else {
        saved.iter().sum::<f64>() / saved.len() as f64
    };
    Ok(RouteFeatures {
        origin,
        destination,
        candidates: routes.len(),
        slot,
        day_of_week: ctx.day_of_week,
        is_weekend: ctx.is_weekend,
        usage: normalized(usage),
        crowd,
        stretch,
        recent_speed: recent,
        trip_frequency,
        saved_time_s,
        saved_time_missing,
    })
}

impl RouteFeatures {
    pub fn to_vector(&self) -> FeatureVector {
        let mut num = Vec::new();
        num.extend(&self.usage);
        num.extend(&self.crowd);
        num.extend(&self.stretch);
        num.extend(&self.recent_speed);
        num.push(self.trip_frequency.min(4.0) / 4.0);
        num.push((self.saved_time_s / 600.0).clamp(-1.0, 1.0));
        num.push(self.slot as f64 / SLOTS);
        FeatureVector::new(
            num,
            vec![
                flag(self.saved_time_missing),
                self.day_of_week as u32 - 1,
                flag(self.is_weekend),
            ],
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedFeatures {
    pub edge: EdgeIx,
    pub slot: u32,
    pub vehicle_type: VehicleType,
    pub history_count: usize,
    /// Mean recovered highway speed of the vehicle's past trips.
    pub historical_speed: Option<f64>,
    /// Mean deviation of the vehicle from the crowd median.
    pub historical_residual: f64,
    pub crowd: LetterValues,
    pub fallback: bool,
    pub speed_limit: f64,
    pub is_weekend: bool,
    pub weather: u32,
}

pub fn speed_schema() -> FeatureSchema {
    FeatureSchema::new()
        .numeric("historical_residual")
        .numeric("historical_speed")
        .numeric("history_count")
        .numeric("crowd_min")
        .numeric("crowd_lf")
        .numeric("crowd_median")
        .numeric("crowd_uf")
        .numeric("crowd_max")
        .numeric("speed_limit")
        .numeric("slot")
        .categorical("fallback", 2)
        .categorical("vehicle_type", 3)
        .categorical("weekend", 2)
        .categorical("weather", 3)
}

/// Speed history summary of one vehicle: count, mean speed, mean residual.
pub(crate) fn speed_history(history: &[PastTrip]) -> (usize, Option<f64>, f64) {
    let speeds: Vec<f64> = history.iter().filter_map(|p| p.speed_kmh).collect();
    let res: Vec<f64> = history.iter().filter_map(|p| p.residual_kmh).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (
        speeds.len(),
        (!speeds.is_empty()).then(|| mean(&speeds)),
        if res.is_empty() { 0.0 } else { mean(&res) },
    )
}

pub fn speed_features(
    history: &[PastTrip],
    edge: EdgeIx,
    t: Timestamp,
    vehicle_type: VehicleType,
    ctx: &ContextRecord,
    graph: &HighwayGraph,
    tables: &CrowdTables,
) -> Result<SpeedFeatures> {
    let e = graph.try_edge(edge)?;
    let (lv, fallback) = tables.speed_map.letter_values_at(graph, edge, t);
    let (history_count, historical_speed, historical_residual) = speed_history(history);
    Ok(SpeedFeatures {
        edge,
        slot: feature_slot(t),
        vehicle_type,
        history_count,
        historical_speed,
        historical_residual,
        crowd: lv,
        fallback,
        speed_limit: e.speed_limit_kmh,
        is_weekend: ctx.is_weekend,
        weather: ctx.weather.code(),
    })
}

impl SpeedFeatures {
    pub fn to_vector(&self) -> FeatureVector {
        let lim = self.speed_limit;
        FeatureVector::new(
            vec![
                (self.historical_residual / 20.0).clamp(-2.0, 2.0),
                self.historical_speed.map_or(0.0, |v| v / lim),
                (self.history_count as f64 / 20.0).min(1.0),
                self.crowd.min / lim,
                self.crowd.lower_fourth / lim,
                self.crowd.median / lim,
                self.crowd.upper_fourth / lim,
                self.crowd.max / lim,
                lim / 150.0,
                self.slot as f64 / SLOTS,
            ],
            vec![
                flag(self.fallback),
                self.vehicle_type.code(),
                flag(self.is_weekend),
                self.weather,
            ],
        )
    }
}
