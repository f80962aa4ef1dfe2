//! Joint recovery of historical routes and speed profiles.
//!
//! A trip is discretized into states ⟨time slot, road segment, speed⟩ with the
//! speed held constant within each time slot. For every candidate route the
//! speed profiles that reproduce the observed duration are enumerated on a
//! coarse grid, and a bounded depth-first search then picks one sequence per
//! trip so that as many per-segment and per-vehicle normality tests as
//! possible are passed.

mod ks;
mod search;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub use ks::{ks_normality_test, ks_normality_test_min, lilliefors, NormalityReport, MIN_KS_SAMPLES};
pub use search::{
    recover_routes_and_speeds, recover_single, search_candidates, GroupKey, RecoveryConfig, RecoveryResult, Score,
    SpeedReference, TripCandidates,
};

use crate::crowd::ramp_corrected_duration;
use crate::error::{Error, Result};
use crate::graph::{EdgeIx, HighwayGraph, Route};
use crate::ingest::{Trip, TripId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationConfig {
    pub slot_width_min: u32,
    pub segment_length_m: f64,
    /// Granularity of the final speeds.
    pub speed_unit_kmh: f64,
    /// Coarser grid used while searching.
    pub search_grid_kmh: f64,
    pub min_speed_kmh: f64,
    /// Trips slower than this multiple of free-flow time are not recovered.
    pub slack_factor: f64,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        DiscretizationConfig {
            slot_width_min: 10,
            segment_length_m: 1000.0,
            speed_unit_kmh: 1.0,
            search_grid_kmh: 5.0,
            min_speed_kmh: 20.0,
            slack_factor: 3.0,
        }
    }
}

impl DiscretizationConfig {
    pub fn validate(&self) -> Result<()> {
        crate::ingest::check_slot_width(self.slot_width_min)?;
        let positive = [
            self.segment_length_m,
            self.speed_unit_kmh,
            self.search_grid_kmh,
            self.min_speed_kmh,
            self.slack_factor,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::domain("discretization parameters must be positive"));
        }
        if self.search_grid_kmh < self.speed_unit_kmh {
            return Err(Error::domain("search grid finer than the speed unit"));
        }
        Ok(())
    }

    pub fn slot_seconds(&self) -> f64 {
        self.slot_width_min as f64 * 60.0
    }

    /// Half a slot: allowed gap between modelled and observed travel time.
    pub fn tolerance_s(&self) -> f64 {
        self.slot_seconds() / 2.0
    }
}

/// The `index`-th fixed-length piece of an edge, counted from its start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentId {
    pub edge: EdgeIx,
    pub index: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    /// Absolute slot number (slots since the epoch).
    pub slot: i64,
    pub segment: SegmentId,
    pub speed_kmh: f64,
    /// Metres of the segment covered during the slot.
    pub length_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSequence {
    pub trip: TripId,
    pub route: Route,
    /// Highway entry instant in seconds since the epoch (after the entry ramp).
    pub start_s: f64,
    /// Highway travel time the sequence was fitted to.
    pub target_s: f64,
    /// Speed for each slot from the start slot on.
    pub profile: Vec<f64>,
    pub states: Vec<State>,
    pub travel_time_s: f64,
}

impl StateSequence {
    /// Distance-weighted (harmonic) speed on each edge, in route order, with
    /// the instant the edge was entered.
    pub fn edge_speeds(&self) -> Vec<(EdgeIx, f64, f64)> {
        let mut out: Vec<(EdgeIx, f64, f64, f64)> = Vec::new();
        let mut t = self.start_s;
        for st in &self.states {
            let dt = st.length_m / (st.speed_kmh / 3.6);
            match out.last_mut() {
                Some(last) if last.0 == st.segment.edge => {
                    last.1 += st.length_m;
                    last.2 += dt;
                }
                _ => out.push((st.segment.edge, st.length_m, dt, t)),
            }
            t += dt;
        }
        out.into_iter().map(|(e, len, dt, t0)| (e, len / dt * 3.6, t0)).collect()
    }

    /// Mean speed over the whole route.
    pub fn mean_speed_kmh(&self) -> f64 {
        let len: f64 = self.states.iter().map(|s| s.length_m).sum();
        len / self.travel_time_s * 3.6
    }

    pub fn duration_error_s(&self) -> f64 {
        (self.travel_time_s - self.target_s).abs()
    }
}

/// Segments of a route with their start and end offsets.
#[derive(Clone, Debug)]
pub(crate) struct RouteGeometry {
    pub segments: Vec<(SegmentId, f64, f64)>,
    pub length_m: f64,
    pub max_limit_kmh: f64,
}

pub(crate) fn geometry(graph: &HighwayGraph, route: &Route, segment_length_m: f64) -> RouteGeometry {
    let mut segments = Vec::new();
    let mut offset = 0.0;
    let mut max_limit: f64 = 0.0;
    for &e in route.edges() {
        let edge = graph.edge(e);
        max_limit = max_limit.max(edge.speed_limit_kmh);
        let n = (edge.length_m / segment_length_m).ceil().max(1.0) as u32;
        for k in 0..n {
            let a = k as f64 * segment_length_m;
            let b = ((k + 1) as f64 * segment_length_m).min(edge.length_m);
            segments.push((SegmentId { edge: e, index: k }, offset + a, offset + b));
        }
        offset += edge.length_m;
    }
    RouteGeometry {
        segments,
        length_m: offset,
        max_limit_kmh: max_limit,
    }
}

fn slot_index(t: f64, slot_s: f64) -> i64 {
    (t / slot_s).floor() as i64
}

/// Finish time of a profile and the number of slots it actually used, or
/// `None` if the profile runs out before the route ends.
pub(crate) fn run_profile(start: f64, length: f64, slot_s: f64, speeds: &[f64]) -> Option<(f64, usize)> {
    let mut t = start;
    let mut p = 0.0;
    for (j, &v) in speeds.iter().enumerate() {
        let vms = v / 3.6;
        let end = (slot_index(t, slot_s) + 1) as f64 * slot_s;
        let reach = p + vms * (end - t);
        if reach >= length - 1e-9 {
            return Some((t + (length - p) / vms, j + 1));
        }
        p = reach;
        t = end;
    }
    None
}

pub(crate) fn build_states(geom: &RouteGeometry, start: f64, slot_s: f64, speeds: &[f64]) -> Vec<State> {
    let mut states = Vec::new();
    let mut t = start;
    let mut p = 0.0;
    let mut first_seg = 0;
    for &v in speeds {
        let vms = v / 3.6;
        let slot = slot_index(t, slot_s);
        let end = (slot + 1) as f64 * slot_s;
        let q = (p + vms * (end - t)).min(geom.length_m);
        for (k, &(seg, a, b)) in geom.segments.iter().enumerate().skip(first_seg) {
            if a >= q {
                break;
            }
            let overlap = b.min(q) - a.max(p);
            if overlap > 1e-9 {
                states.push(State {
                    slot,
                    segment: seg,
                    speed_kmh: v,
                    length_m: overlap,
                });
            }
            if b <= q {
                first_seg = k + 1;
            }
        }
        p = q;
        t = end;
        if p >= geom.length_m - 1e-9 {
            break;
        }
    }
    states
}

/// Highway start instant and highway travel time of `trip` along `route`,
/// with ramp time apportioned by length.
pub(crate) fn trip_timing(trip: &Trip, route: &Route, graph: &HighwayGraph) -> Result<(f64, f64)> {
    let highway = ramp_corrected_duration(trip, route, graph)?;
    let ramp_total = trip.duration_s as f64 - highway;
    let ramp_in = graph.station(trip.origin()).ramp_length_m;
    let ramps = ramp_in + graph.station(trip.destination()).ramp_length_m;
    let ramp_in_time = if ramps > 0.0 { ramp_total * ramp_in / ramps } else { 0.0 };
    Ok((trip.entry_time().0 as f64 + ramp_in_time, highway))
}

fn speed_grid(cfg: &DiscretizationConfig, max_limit: f64) -> Vec<f64> {
    let g = cfg.search_grid_kmh;
    let lo = (cfg.min_speed_kmh / g).ceil() as i64;
    let hi = (max_limit / g + 1e-9).floor() as i64;
    (lo..=hi).map(|k| k as f64 * g).collect()
}

struct Enumerator<'a> {
    start: f64,
    length: f64,
    target: f64,
    tol: f64,
    slot_s: f64,
    grid: &'a [f64],
    max_range: f64,
}

impl Enumerator<'_> {
    fn run(&self, f: &mut impl FnMut(&[f64], f64)) {
        let mut speeds = Vec::new();
        self.step(self.start, 0.0, f64::INFINITY, f64::NEG_INFINITY, &mut speeds, f);
    }

    fn step(&self, t: f64, p: f64, lo: f64, hi: f64, speeds: &mut Vec<f64>, f: &mut impl FnMut(&[f64], f64)) {
        let end = (slot_index(t, self.slot_s) + 1) as f64 * self.slot_s;
        for &v in self.grid {
            let (lo2, hi2) = (lo.min(v), hi.max(v));
            if hi2 - lo2 > self.max_range + 1e-9 {
                continue;
            }
            let vms = v / 3.6;
            let reach = p + vms * (end - t);
            speeds.push(v);
            if reach >= self.length - 1e-9 {
                let finish = t + (self.length - p) / vms;
                if (finish - self.start - self.target).abs() <= self.tol {
                    f(speeds, finish - self.start);
                }
            } else if end - self.start <= self.target + self.tol {
                self.step(end, reach, lo2, hi2, speeds, f);
            }
            speeds.pop();
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn make_sequence(
    trip: TripId,
    route: &Route,
    geom: &RouteGeometry,
    start: f64,
    target: f64,
    profile: Vec<f64>,
    travel: f64,
    slot_s: f64,
) -> StateSequence {
    let states = build_states(geom, start, slot_s, &profile);
    StateSequence {
        trip,
        route: route.clone(),
        start_s: start,
        target_s: target,
        profile,
        states,
        travel_time_s: travel,
    }
}

fn route_feasible(geom: &RouteGeometry, target: f64, cfg: &DiscretizationConfig) -> bool {
    let free_flow = geom.length_m / (geom.max_limit_kmh / 3.6);
    free_flow <= target + cfg.tolerance_s() && target <= cfg.slack_factor * free_flow
}

/// Every grid speed profile, on every feasible candidate route, whose travel
/// time is within half a slot of the trip's highway duration.
pub fn candidate_state_sequences(
    trip: &Trip,
    graph: &HighwayGraph,
    routes: &[Route],
    cfg: &DiscretizationConfig,
) -> Result<Vec<StateSequence>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for route in routes {
        out.extend(route_sequences(trip, graph, route, cfg, f64::INFINITY)?);
    }
    if out.is_empty() {
        return Err(Error::domain(format!("trip {} has no feasible state sequence", trip.id)));
    }
    Ok(out)
}

fn route_sequences(
    trip: &Trip,
    graph: &HighwayGraph,
    route: &Route,
    cfg: &DiscretizationConfig,
    max_range: f64,
) -> Result<Vec<StateSequence>> {
    let (start, target) = trip_timing(trip, route, graph)?;
    let geom = geometry(graph, route, cfg.segment_length_m);
    if !route_feasible(&geom, target, cfg) {
        return Ok(Vec::new());
    }
    let grid = speed_grid(cfg, geom.max_limit_kmh);
    let en = Enumerator {
        start,
        length: geom.length_m,
        target,
        tol: cfg.tolerance_s(),
        slot_s: cfg.slot_seconds(),
        grid: &grid,
        max_range,
    };
    let mut out = Vec::new();
    en.run(&mut |speeds, travel| {
        out.push(make_sequence(
            trip.id,
            route,
            &geom,
            start,
            target,
            speeds.to_vec(),
            travel,
            cfg.slot_seconds(),
        ))
    });
    Ok(out)
}

fn spread(profile: &[f64]) -> f64 {
    let lo = profile.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = profile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

/// The `k` flattest profiles on `route`, closest in duration first.
pub fn shortlist(
    trip: &Trip,
    graph: &HighwayGraph,
    route: &Route,
    cfg: &DiscretizationConfig,
    k: usize,
) -> Result<Vec<StateSequence>> {
    let geom = geometry(graph, route, cfg.segment_length_m);
    let grid_span = geom.max_limit_kmh - cfg.min_speed_kmh;
    let mut cap = 0.0;
    loop {
        let mut seqs = route_sequences(trip, graph, route, cfg, cap)?;
        if seqs.len() >= k || cap > grid_span {
            seqs.sort_by(|a, b| {
                spread(&a.profile)
                    .total_cmp(&spread(&b.profile))
                    .then(a.duration_error_s().total_cmp(&b.duration_error_s()))
                    .then_with(|| {
                        a.profile
                            .iter()
                            .zip(&b.profile)
                            .map(|(x, y)| x.total_cmp(y))
                            .find(|o| o.is_ne())
                            .unwrap_or(a.profile.len().cmp(&b.profile.len()))
                    })
            });
            seqs.truncate(k);
            return Ok(seqs);
        }
        cap += cfg.search_grid_kmh;
    }
}

/// Shifts the whole profile by whole speed units (less than one grid step)
/// to bring the travel time closest to the observed duration.
pub fn refine(seq: &StateSequence, graph: &HighwayGraph, cfg: &DiscretizationConfig) -> StateSequence {
    let geom = geometry(graph, &seq.route, cfg.segment_length_m);
    let unit = cfg.speed_unit_kmh;
    let steps = ((cfg.search_grid_kmh - unit) / unit).round() as i64;
    let slot_s = cfg.slot_seconds();
    let mut best: Option<(f64, i64, Vec<f64>, f64)> = None;
    for d in -steps..=steps {
        let delta = d as f64 * unit;
        let shifted: Vec<f64> = seq.profile.iter().map(|v| v + delta).collect();
        if shifted.iter().any(|&v| v < unit - 1e-9 || v > geom.max_limit_kmh + 1e-9) {
            continue;
        }
        let Some((finish, used)) = run_profile(seq.start_s, geom.length_m, slot_s, &shifted) else {
            continue;
        };
        let travel = finish - seq.start_s;
        let err = (travel - seq.target_s).abs();
        let better = match &best {
            None => true,
            Some((e, bd, _, _)) => err < *e - 1e-9 || ((err - e).abs() <= 1e-9 && d.abs() < bd.abs()),
        };
        if better {
            best = Some((err, d, shifted[..used].to_vec(), travel));
        }
    }
    match best {
        Some((_, _, profile, travel)) => make_sequence(
            seq.trip,
            &seq.route,
            &geom,
            seq.start_s,
            seq.target_s,
            profile,
            travel,
            slot_s,
        ),
        None => seq.clone(),
    }
}

pub const RECOVERED_HEADER: &str = "trip_id,route_edge_list,states";

fn format_speed(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v}")
    }
}

pub fn sequence_line(seq: &StateSequence, graph: &HighwayGraph) -> String {
    let states: Vec<String> = seq
        .states
        .iter()
        .map(|s| {
            format!(
                "{}:{}/{}:{}",
                s.slot,
                graph.edge(s.segment.edge).id,
                s.segment.index,
                format_speed(s.speed_kmh)
            )
        })
        .collect();
    format!("{},{},{}", seq.trip, seq.route.display_ids(graph, " "), states.join(";"))
}

pub fn write_recovered<'a, W: Write>(
    mut w: W,
    graph: &HighwayGraph,
    sequences: impl IntoIterator<Item = &'a StateSequence>,
) -> Result<()> {
    writeln!(w, "{RECOVERED_HEADER}")?;
    for s in sequences {
        writeln!(w, "{}", sequence_line(s, graph))?;
    }
    Ok(())
}

/// Reads recovered sequences back, rebuilding them from the trips they refer
/// to. The listed states must agree with the rebuilt ones.
pub fn read_recovered<R: BufRead>(
    reader: R,
    graph: &HighwayGraph,
    trips: &[Trip],
    cfg: &DiscretizationConfig,
) -> Result<Vec<StateSequence>> {
    let by_id: BTreeMap<TripId, &Trip> = trips.iter().map(|t| (t.id, t)).collect();
    let slot_s = cfg.slot_seconds();
    let mut out = Vec::new();
    let mut header = false;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !header {
            if line.trim() != RECOVERED_HEADER {
                return Err(Error::parse(lineno, "missing recovered-trip header"));
            }
            header = true;
            continue;
        }
        let f: Vec<&str> = line.splitn(3, ',').collect();
        if f.len() != 3 {
            return Err(Error::parse(lineno, "wrong field count"));
        }
        let id: TripId = f[0].parse().map_err(|_| Error::parse(lineno, "bad trip id"))?;
        let trip = by_id
            .get(&id)
            .ok_or_else(|| Error::parse(lineno, format!("unknown trip {id}")))?;
        let ids: Vec<&str> = f[1].split_whitespace().collect();
        let route = Route::from_ids(graph, &ids)?;
        let mut listed = Vec::new();
        for tok in f[2].split(';').filter(|t| !t.is_empty()) {
            let parts: Vec<&str> = tok.split(':').collect();
            if parts.len() != 3 {
                return Err(Error::parse(lineno, format!("bad state `{tok}`")));
            }
            let slot: i64 = parts[0].parse().map_err(|_| Error::parse(lineno, "bad slot"))?;
            let (edge, idx) = parts[1]
                .rsplit_once('/')
                .ok_or_else(|| Error::parse(lineno, "bad segment"))?;
            let segment = SegmentId {
                edge: graph.edge_ix(edge)?,
                index: idx.parse().map_err(|_| Error::parse(lineno, "bad segment index"))?,
            };
            let speed: f64 = parts[2].parse().map_err(|_| Error::parse(lineno, "bad speed"))?;
            listed.push((slot, segment, speed));
        }
        let mut profile: Vec<f64> = Vec::new();
        let mut last_slot = None;
        for &(slot, _, v) in &listed {
            if last_slot != Some(slot) {
                profile.push(v);
                last_slot = Some(slot);
            }
        }
        let (start, target) = trip_timing(trip, &route, graph)?;
        let geom = geometry(graph, &route, cfg.segment_length_m);
        let (finish, used) = run_profile(start, geom.length_m, slot_s, &profile)
            .ok_or_else(|| Error::parse(lineno, "states do not cover the route"))?;
        profile.truncate(used);
        let seq = make_sequence(id, &route, &geom, start, target, profile, finish - start, slot_s);
        let rebuilt: Vec<(i64, SegmentId, f64)> =
            seq.states.iter().map(|s| (s.slot, s.segment, s.speed_kmh)).collect();
        if rebuilt != listed {
            return Err(Error::parse(lineno, "states inconsistent with the trip timing"));
        }
        out.push(seq);
    }
    if !header {
        return Err(Error::Missing("recovered trips".into()));
    }
    Ok(out)
}
