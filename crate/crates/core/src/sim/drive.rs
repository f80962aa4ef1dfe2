use serde::{Deserialize, Serialize};

use super::SIM_SLOT_S;
use crate::error::{Error, Result};
use crate::graph::{kmh_to_ms, EdgeIx, HighwayGraph, Route};
use crate::ingest::{Timestamp, Transaction};

pub const TRACE_HEADER: &str = "vehicle_id,t,route_offset_m";

/// Speed in km/h on an edge at an instant; callers keep it constant within
/// each simulation slot.
pub trait SpeedField {
    fn speed_kmh(&mut self, edge: EdgeIx, t: f64) -> f64;
}

impl<F: FnMut(EdgeIx, f64) -> f64> SpeedField for F {
    fn speed_kmh(&mut self, edge: EdgeIx, t: f64) -> f64 {
        self(edge, t)
    }
}

/// Constant-speed stretch of a trajectory. Offsets are measured along the
/// route from the start of its first edge; the entry ramp is negative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriveLeg {
    pub start_s: f64,
    pub start_offset_m: f64,
    pub speed_ms: f64,
    /// `None` on ramps.
    pub edge: Option<EdgeIx>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTrace {
    pub vehicle_id: String,
    pub transaction: Transaction,
    pub route: Route,
    pub entry_time: Timestamp,
    pub exit_time: Timestamp,
    pub ramp_in_m: f64,
    pub ramp_out_m: f64,
    pub route_length_m: f64,
    pub legs: Vec<DriveLeg>,
    /// Exact arrival instant at the exit booth.
    pub end_s: f64,
    pub dwell_s: f64,
}

impl GroundTruthTrace {
    /// Along-route offset at `t`, clamped to the trip's time span.
    pub fn position_at(&self, t: f64) -> f64 {
        let t = t.clamp(self.entry_time.0 as f64, self.end_s);
        let i = self.legs.partition_point(|l| l.start_s <= t).max(1) - 1;
        let leg = &self.legs[i];
        let end = self.route_length_m + self.ramp_out_m;
        (leg.start_offset_m + leg.speed_ms * (t - leg.start_s)).min(end)
    }

    fn crossing(&self, offset: f64) -> f64 {
        for (i, leg) in self.legs.iter().enumerate() {
            let next = self.legs.get(i + 1).map_or(self.end_s, |l| l.start_s);
            let reach = leg.start_offset_m + leg.speed_ms * (next - leg.start_s);
            if reach >= offset - 1e-9 && leg.speed_ms > 0.0 {
                return (leg.start_s + (offset - leg.start_offset_m).max(0.0) / leg.speed_ms).min(next);
            }
        }
        self.end_s
    }

    /// Instant the vehicle leaves the entry ramp.
    pub fn highway_entry_s(&self) -> f64 {
        self.crossing(0.0)
    }

    /// Instant the vehicle reaches the end of its last edge.
    pub fn highway_exit_s(&self) -> f64 {
        self.crossing(self.route_length_m)
    }

    /// Mean speed over the highway part of the trip, stops included.
    pub fn highway_speed_kmh(&self) -> f64 {
        self.route_length_m / (self.highway_exit_s() - self.highway_entry_s()) * 3.6
    }

    /// Per edge, in route order: (edge, entry instant, mean speed in km/h).
    pub fn edge_speeds(&self, graph: &HighwayGraph) -> Vec<(EdgeIx, f64, f64)> {
        let mut start = 0.0;
        let mut out = Vec::with_capacity(self.route.len());
        for &e in self.route.edges() {
            let len = graph.edge(e).length_m;
            let (t0, t1) = (self.crossing(start), self.crossing(start + len));
            out.push((e, t0, len / (t1 - t0) * 3.6));
            start += len;
        }
        out
    }

    /// Speed in force at `t`, in km/h.
    pub fn speed_at(&self, t: f64) -> f64 {
        let i = self.legs.partition_point(|l| l.start_s <= t).max(1) - 1;
        self.legs[i].speed_ms * 3.6
    }
}

/// Integrates a piecewise-constant speed field along `route`, entry ramp
/// and exit ramp included. Ramps are driven at the adjacent edge's speed.
/// `dwell` stops the vehicle after the given number of edges.
pub fn drive(
    graph: &HighwayGraph,
    route: &Route,
    entry_s: f64,
    field: &mut impl SpeedField,
    dwell: Option<(usize, f64)>,
) -> Result<(Vec<DriveLeg>, f64)> {
    let first = *route.edges().first().ok_or_else(|| Error::domain("empty route"))?;
    let last = *route.edges().last().expect("non-empty");
    let ramp_in = graph.station(route.origin(graph)).ramp_length_m;
    let ramp_out = graph.station(route.destination(graph)).ramp_length_m;

    let mut pieces: Vec<(f64, f64, EdgeIx, Option<EdgeIx>)> = Vec::new();
    pieces.push((-ramp_in, 0.0, first, None));
    let mut start = 0.0;
    for &e in route.edges() {
        let len = graph.edge(e).length_m;
        pieces.push((start, start + len, e, Some(e)));
        start += len;
    }
    pieces.push((start, start + ramp_out, last, None));

    let mut legs = Vec::new();
    let mut t = entry_s;
    let mut edges_done = 0;
    for (from, to, speed_edge, edge) in pieces {
        let mut off = from;
        while off < to {
            let v = kmh_to_ms(field.speed_kmh(speed_edge, t));
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("non-positive speed at t={t}")));
            }
            legs.push(DriveLeg {
                start_s: t,
                start_offset_m: off,
                speed_ms: v,
                edge,
            });
            let slot_end = ((t / SIM_SLOT_S as f64).floor() + 1.0) * SIM_SLOT_S as f64;
            let need = (to - off) / v;
            if t + need <= slot_end {
                t += need;
                off = to;
            } else {
                off += v * (slot_end - t);
                t = slot_end;
            }
        }
        if edge.is_some() {
            edges_done += 1;
            if let Some((after, secs)) = dwell {
                if after == edges_done && secs > 0.0 {
                    legs.push(DriveLeg {
                        start_s: t,
                        start_offset_m: to,
                        speed_ms: 0.0,
                        edge,
                    });
                    t += secs;
                }
            }
        }
    }
    Ok((legs, t))
}
