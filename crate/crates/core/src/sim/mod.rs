//! Synthetic highway world: network, vehicle population, calendar, and the
//! trajectories and toll transactions they produce.

mod drive;
mod population;

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeIx, HighwayGraph, Route, StationIx};
use crate::ingest::{Calendar, ContextRecord, Timestamp, Transaction, Weather};

pub use drive::{drive, DriveLeg, GroundTruthTrace, SpeedField, TRACE_HEADER};
pub use population::{BehaviorProfile, EntropyRegime};

/// Rain slows traffic by this factor.
pub const RAIN_FACTOR: f64 = 0.9;
/// Speeds are held constant within slots of this width.
pub const SIM_SLOT_S: i64 = 600;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub stations: usize,
    /// Undirected links per station; each link becomes two directed edges.
    pub edge_density: f64,
    /// Typical distance between neighbouring stations.
    pub spacing_km: f64,
    pub ramp_m: (f64, f64),
    pub speed_limits_kmh: Vec<f64>,
    pub vehicles: usize,
    /// Shares of single-destination, commuter and explorer vehicles.
    pub entropy_mix: [f64; 3],
    /// Shares of cars, buses and trucks.
    pub vehicle_mix: [f64; 3],
    pub days: u32,
    pub start_date: NaiveDate,
    pub rain_probability: f64,
    pub holiday_probability: f64,
    /// Uncongested crowd speed as a fraction of the limit.
    pub free_flow_ratio: f64,
    /// Fractional slowdown at the 10:00 and 18:00 peaks on weekdays.
    pub congestion_depth: f64,
    pub offset_sd_kmh: f64,
    pub noise_sd_kmh: f64,
    pub truck_offset_kmh: f64,
    pub bus_offset_kmh: f64,
    pub stickiness: f64,
    /// Log-scale spread of station popularity; larger values concentrate demand on hubs.
    pub popularity_sd: f64,
    /// Destination attraction decays as `exp(-distance / trip_length_km)`.
    pub trip_length_km: f64,
    pub route_stretch: f64,
    pub max_route_edges: usize,
    /// Probability that a trip includes a rest-area stop.
    pub dwell_probability: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            stations: 12,
            edge_density: 1.5,
            spacing_km: 12.0,
            ramp_m: (200.0, 600.0),
            speed_limits_kmh: vec![100.0, 120.0],
            vehicles: 200,
            entropy_mix: [0.3, 0.4, 0.3],
            vehicle_mix: [0.75, 0.12, 0.13],
            days: 7,
            start_date: NaiveDate::from_ymd_opt(2024, 3, 4).expect("valid date"),
            rain_probability: 0.2,
            holiday_probability: 0.03,
            free_flow_ratio: 0.88,
            congestion_depth: 0.25,
            offset_sd_kmh: 5.0,
            noise_sd_kmh: 3.0,
            truck_offset_kmh: -10.0,
            bus_offset_kmh: -5.0,
            stickiness: 0.85,
            popularity_sd: 1.0,
            trip_length_km: 25.0,
            route_stretch: 1.3,
            max_route_edges: 6,
            dwell_probability: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::domain(m.to_string()));
        if self.stations < 2 {
            return bad("need at least two stations");
        }
        let n = self.stations as f64;
        let links = self.link_count();
        if links + 1 < self.stations || links > self.stations * (self.stations - 1) / 2 {
            return bad("edge density cannot give a connected simple network");
        }
        if !(self.edge_density.is_finite() && self.spacing_km > 0.0 && n.is_finite()) {
            return bad("spacing must be positive");
        }
        if !(0.0 <= self.ramp_m.0 && self.ramp_m.0 <= self.ramp_m.1) {
            return bad("ramp range must be non-negative and ordered");
        }
        if self.speed_limits_kmh.is_empty() || self.speed_limits_kmh.iter().any(|v| !(*v > 0.0)) {
            return bad("speed limits must be positive");
        }
        for mix in [&self.entropy_mix, &self.vehicle_mix] {
            if mix.iter().any(|p| *p < 0.0) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("mixture shares must be non-negative and sum to 1");
            }
        }
        for p in [self.rain_probability, self.holiday_probability, self.stickiness, self.dwell_probability] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if !(self.free_flow_ratio > 0.0 && self.free_flow_ratio <= 1.3) {
            return bad("free-flow ratio must lie in (0, 1.3]");
        }
        if !(0.0..0.9).contains(&self.congestion_depth) {
            return bad("congestion depth must lie in [0, 0.9)");
        }
        if self.offset_sd_kmh < 0.0 || self.noise_sd_kmh < 0.0 {
            return bad("spreads must be non-negative");
        }
        if !(self.popularity_sd >= 0.0 && self.popularity_sd.is_finite()) {
            return bad("popularity spread must be finite and non-negative");
        }
        if !(self.trip_length_km > 0.0) {
            return bad("trip length scale must be positive");
        }
        if self.route_stretch < 1.0 || self.max_route_edges == 0 {
            return bad("route stretch must be at least 1 and routes need an edge");
        }
        if self.days == 0 {
            return bad("need at least one day");
        }
        Ok(())
    }

    fn link_count(&self) -> usize {
        (self.edge_density * self.stations as f64).round().max(0.0) as usize
    }
}

/// A generated network with its population and calendar.
#[derive(Clone, Debug)]
pub struct World {
    pub config: SimConfig,
    pub seed: u64,
    pub graph: HighwayGraph,
    pub population: Vec<BehaviorProfile>,
    pub calendar: Calendar,
    /// Per-edge multiplier on the crowd speed.
    pub edge_factor: Vec<f64>,
    /// Candidate routes (within the stretch bound) for every demanded pair, shortest first.
    pub routes: BTreeMap<(StationIx, StationIx), Vec<(Route, f64)>>,
}

fn peak(hour: f64, centre: f64) -> f64 {
    (-(hour - centre).powi(2) / 2.0).exp()
}

impl World {
    pub fn context(&self, t: Timestamp) -> ContextRecord {
        self.calendar.context(t.date())
    }

    /// Crowd mean speed on `edge` at instant `t` (seconds since the epoch).
    pub fn latent_speed_kmh(&self, edge: EdgeIx, t: f64, ctx: &ContextRecord) -> f64 {
        let e = self.graph.edge(edge);
        let hour = t.rem_euclid(86_400.0) / 3600.0;
        let quiet = ctx.is_weekend || ctx.is_holiday;
        let depth = self.config.congestion_depth * if quiet { 0.5 } else { 1.0 };
        let shape = (peak(hour, 10.0) + peak(hour, 18.0)).min(1.0);
        let rain = if ctx.weather.is_rain() { RAIN_FACTOR } else { 1.0 };
        e.speed_limit_kmh * self.config.free_flow_ratio * self.edge_factor[edge.index()] * (1.0 - depth * shape) * rain
    }

    /// Latent speed held at its value in the middle of the simulation slot.
    pub fn slot_speed_kmh(&self, edge: EdgeIx, slot: i64) -> f64 {
        let mid = (slot * SIM_SLOT_S) as f64 + SIM_SLOT_S as f64 / 2.0;
        let ctx = self.context(Timestamp(mid as i64));
        self.latent_speed_kmh(edge, mid, &ctx)
    }

    /// Latent crowd speed averaged over a coarser slot of `width_min` minutes.
    pub fn cell_truth_kmh(&self, edge: EdgeIx, day_start: Timestamp, slot: u32, width_min: u32) -> f64 {
        let start = day_start.0 / SIM_SLOT_S + (slot as i64 * width_min as i64 * 60) / SIM_SLOT_S;
        let n = (width_min as i64 * 60 / SIM_SLOT_S).max(1);
        (0..n).map(|k| self.slot_speed_kmh(edge, start + k)).sum::<f64>() / n as f64
    }

    pub fn day_start(&self, day: u32) -> Timestamp {
        let date = self.config.start_date + Days::new(day as u64);
        Timestamp::from_date_seconds(date, 0)
    }
}

/// Builds the network, population and calendar. Deterministic in `seed`.
pub fn generate_world(config: &SimConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = build_graph(config, &mut rng)?;
    let edge_factor = (0..graph.edge_count()).map(|_| rng.random_range(0.95..1.05)).collect();
    let calendar = build_calendar(config, &mut rng)?;
    let mut world = World {
        config: config.clone(),
        seed,
        graph,
        population: Vec::new(),
        calendar,
        edge_factor,
        routes: BTreeMap::new(),
    };
    let pop_seed: u64 = rng.random();
    population::populate(&mut world, pop_seed)?;
    Ok(world)
}

fn build_calendar(config: &SimConfig, rng: &mut ChaCha8Rng) -> Result<Calendar> {
    let records = (0..config.days).map(|d| {
        let date = config.start_date + Days::new(d as u64);
        let weather = if rng.random_bool(config.rain_probability) {
            if rng.random_bool(0.3) {
                Weather::HeavyRain
            } else {
                Weather::Rain
            }
        } else {
            Weather::Clear
        };
        let holiday = rng.random_bool(config.holiday_probability);
        ContextRecord::new(date, holiday, weather)
    });
    Calendar::from_records(records.collect::<Vec<_>>())
}

/// Stations scattered in a square, joined by a Euclidean minimum spanning
/// tree plus extra short links up to the requested density.
fn build_graph(config: &SimConfig, rng: &mut ChaCha8Rng) -> Result<HighwayGraph> {
    let n = config.stations;
    let side = config.spacing_km * (n as f64).sqrt();
    let min_gap = config.spacing_km * 0.35;
    let mut pos: Vec<(f64, f64)> = Vec::with_capacity(n);
    while pos.len() < n {
        let mut p = (rng.random_range(0.0..side), rng.random_range(0.0..side));
        for _ in 0..200 {
            if pos.iter().all(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() >= min_gap) {
                break;
            }
            p = (rng.random_range(0.0..side), rng.random_range(0.0..side));
        }
        pos.push(p);
    }
    let dist = |a: usize, b: usize| ((pos[a].0 - pos[b].0).powi(2) + (pos[a].1 - pos[b].1).powi(2)).sqrt();

    let mut links: Vec<(usize, usize)> = Vec::new();
    let mut in_tree = vec![false; n];
    let mut best: Vec<(f64, usize)> = (0..n).map(|j| (dist(0, j), 0)).collect();
    in_tree[0] = true;
    for _ in 1..n {
        let (next, _) = (0..n)
            .filter(|j| !in_tree[*j])
            .map(|j| (j, best[j].0))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("stations remain");
        in_tree[next] = true;
        links.push((best[next].1.min(next), best[next].1.max(next)));
        for j in 0..n {
            if !in_tree[j] && dist(next, j) < best[j].0 {
                best[j] = (dist(next, j), next);
            }
        }
    }
    let mut spare: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .filter(|l| !links.contains(l))
        .collect();
    while links.len() < config.link_count() && !spare.is_empty() {
        let w: Vec<f64> = spare.iter().map(|&(a, b)| dist(a, b).powi(-3)).collect();
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = spare.len() - 1;
        for (i, wi) in w.iter().enumerate() {
            if u < *wi {
                pick = i;
                break;
            }
            u -= wi;
        }
        links.push(spare.swap_remove(pick));
    }
    links.sort_unstable();

    let mut b = HighwayGraph::builder();
    for i in 0..n {
        let ramp = (rng.random_range(config.ramp_m.0..=config.ramp_m.1) / 10.0).round() * 10.0;
        b.add_station(&format!("S{i:02}"), &format!("Station {i}"), ramp);
    }
    for (a, c) in links {
        let length = (dist(a, c) * rng.random_range(1.05..1.25) * 1000.0).round().max(500.0);
        let limit = config.speed_limits_kmh[rng.random_range(0..config.speed_limits_kmh.len())];
        for (x, y) in [(a, c), (c, a)] {
            b.add_edge(&format!("S{x:02}-S{y:02}"), &format!("S{x:02}"), &format!("S{y:02}"), length, limit);
        }
    }
    b.build()
}

/// Output of [`simulate_days`].
#[derive(Clone, Debug, Default)]
pub struct Simulation {
    pub transactions: Vec<Transaction>,
    pub traces: Vec<GroundTruthTrace>,
}

/// Drives every vehicle through days `0..days` of the world calendar.
/// Vehicles draw from independent streams, so the result does not depend on
/// processing order.
pub fn simulate_days(world: &World, days: u32, seed: u64) -> Result<Simulation> {
    if days > world.config.days {
        return Err(Error::domain(format!(
            "world calendar covers {} days, {days} requested",
            world.config.days
        )));
    }
    let mut traces = Vec::new();
    for (i, profile) in world.population.iter().enumerate() {
        let vseed = seed ^ (i as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
        traces.extend(population::simulate_vehicle(world, profile, days, vseed)?);
    }
    traces.sort_by(|a, b| (a.entry_time, &a.vehicle_id).cmp(&(b.entry_time, &b.vehicle_id)));
    let transactions = traces.iter().map(|t| t.transaction.clone()).collect();
    Ok(Simulation { transactions, traces })
}

/// Writes per-second positions as `vehicle_id,t,route_offset_m`.
pub fn write_traces<W: Write>(mut w: W, traces: &[GroundTruthTrace], step_s: i64) -> Result<()> {
    if step_s <= 0 {
        return Err(Error::domain("trace step must be positive"));
    }
    writeln!(w, "{TRACE_HEADER}")?;
    for tr in traces {
        let mut t = tr.entry_time.0;
        while t <= tr.exit_time.0 {
            writeln!(w, "{},{},{:.1}", tr.vehicle_id, t, tr.position_at(t as f64))?;
            t += step_s;
        }
    }
    Ok(())
}
