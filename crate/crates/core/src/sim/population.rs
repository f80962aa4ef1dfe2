use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::{drive, GroundTruthTrace, World, SIM_SLOT_S};
use crate::error::{Error, Result};
use crate::graph::{EdgeIx, StationIx};
use crate::ingest::{Timestamp, Transaction, VehicleType};

/// Destination-entropy regime of a vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntropyRegime {
    /// Always the same destination (entropy 0).
    Single,
    /// Home to work and back on weekdays (entropy 1).
    Commuter,
    /// Round trips to several places that depend on the day type (entropy above 1).
    Explorer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorProfile {
    pub vehicle_id: String,
    pub vehicle_type: VehicleType,
    pub regime: EntropyRegime,
    pub home: StationIx,
    /// Fixed destination, or workplace for commuters.
    pub anchor: StationIx,
    pub weekday_prefs: Vec<(StationIx, f64)>,
    pub weekend_prefs: Vec<(StationIx, f64)>,
    /// Personal deviation from the crowd speed, vehicle type included.
    pub speed_offset_kmh: f64,
    pub stickiness: f64,
    /// Probability of travelling on each weekday, Monday first.
    pub activity: [f64; 7],
    pub depart_hour: f64,
    pub axle_count: u8,
    pub weight_kg: f64,
}

fn sample_weighted<T: Copy>(items: &[(T, f64)], rng: &mut ChaCha8Rng) -> T {
    let total: f64 = items.iter().map(|i| i.1).sum();
    let mut u = rng.random::<f64>() * total;
    for (item, w) in items {
        if u < *w {
            return *item;
        }
        u -= w;
    }
    items.last().expect("non-empty choice").0
}

/// Candidate routes within the stretch bound; empty when unreachable.
fn ensure_routes(world: &mut World, o: StationIx, d: StationIx) -> Result<bool> {
    if let Some(r) = world.routes.get(&(o, d)) {
        return Ok(!r.is_empty());
    }
    let all = world.graph.enumerate_routes(o, d, world.config.max_route_edges)?;
    let mut with_len = Vec::with_capacity(all.len());
    for r in all {
        let len = world.graph.route_length(&r)?;
        with_len.push((r, len));
    }
    let shortest = with_len.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    with_len.retain(|r| r.1 <= world.config.route_stretch * shortest + 1e-6);
    let ok = !with_len.is_empty();
    world.routes.insert((o, d), with_len);
    Ok(ok)
}

pub(super) fn populate(world: &mut World, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = world.config.clone();
    let n = world.graph.station_count();
    let spread = LogNormal::new(0.0, cfg.popularity_sd).expect("finite spread");
    let popularity: Vec<(StationIx, f64)> = (0..n)
        .map(|i| (StationIx(i as u32), spread.sample(&mut rng)))
        .collect();
    let offset = Normal::new(0.0, cfg.offset_sd_kmh.max(1e-12)).expect("finite spread");
    let types = [
        (VehicleType::Car, cfg.vehicle_mix[0]),
        (VehicleType::Bus, cfg.vehicle_mix[1]),
        (VehicleType::Truck, cfg.vehicle_mix[2]),
    ];
    let regimes = [
        (EntropyRegime::Single, cfg.entropy_mix[0]),
        (EntropyRegime::Commuter, cfg.entropy_mix[1]),
        (EntropyRegime::Explorer, cfg.entropy_mix[2]),
    ];
    for v in 0..cfg.vehicles {
        let vehicle_type = sample_weighted(&types, &mut rng);
        let regime = sample_weighted(&regimes, &mut rng);
        let home = sample_weighted(&popularity, &mut rng);
        let round_trip = regime != EntropyRegime::Single;
        let mut reachable = Vec::new();
        for &(s, w) in &popularity {
            if s == home {
                continue;
            }
            if ensure_routes(world, home, s)? && (!round_trip || ensure_routes(world, s, home)?) {
                let km = world.routes[&(home, s)][0].1 / 1000.0;
                reachable.push((s, w * (-km / cfg.trip_length_km).exp()));
            }
        }
        if reachable.is_empty() {
            return Err(Error::domain(format!(
                "station {} has no destination within {} edges",
                world.graph.station(home).id,
                cfg.max_route_edges
            )));
        }
        let anchor = sample_weighted(&reachable, &mut rng);
        let prefs = |rng: &mut ChaCha8Rng| {
            let mut pool = reachable.clone();
            let mut out = Vec::new();
            while out.len() < 3 && !pool.is_empty() {
                let s = sample_weighted(&pool, rng);
                pool.retain(|p| p.0 != s);
                out.push((s, rng.random_range(0.2..1.0)));
            }
            let total: f64 = out.iter().map(|p| p.1).sum();
            out.iter_mut().for_each(|p| p.1 /= total);
            out
        };
        let weekday_prefs = prefs(&mut rng);
        let weekend_prefs = prefs(&mut rng);
        let (activity, depart_hour) = match regime {
            EntropyRegime::Single => ([0.8, 0.8, 0.8, 0.8, 0.8, 0.4, 0.4], rng.random_range(6.0..20.0)),
            EntropyRegime::Commuter => ([0.95, 0.95, 0.95, 0.95, 0.95, 0.0, 0.0], rng.random_range(7.0..9.0)),
            EntropyRegime::Explorer => ([0.6, 0.6, 0.6, 0.6, 0.6, 0.7, 0.7], rng.random_range(8.5..11.5)),
        };
        let type_offset = match vehicle_type {
            VehicleType::Car => 0.0,
            VehicleType::Bus => cfg.bus_offset_kmh,
            VehicleType::Truck => cfg.truck_offset_kmh,
        };
        let personal = if cfg.offset_sd_kmh > 0.0 {
            offset.sample(&mut rng)
        } else {
            0.0
        };
        let (axle_count, weight_kg) = match vehicle_type {
            VehicleType::Car => (2, (rng.random_range(1100.0..2200.0f64) / 10.0).round() * 10.0),
            VehicleType::Bus => (rng.random_range(2..=3), (rng.random_range(9000.0..16000.0f64) / 10.0).round() * 10.0),
            VehicleType::Truck => (rng.random_range(3..=6), (rng.random_range(8000.0..40000.0f64) / 10.0).round() * 10.0),
        };
        world.population.push(BehaviorProfile {
            vehicle_id: format!("V{v:05}"),
            vehicle_type,
            regime,
            home,
            anchor,
            weekday_prefs,
            weekend_prefs,
            speed_offset_kmh: (personal + type_offset).clamp(-30.0, 30.0),
            stickiness: cfg.stickiness,
            activity,
            depart_hour,
            axle_count,
            weight_kg,
        });
    }
    Ok(())
}

struct VehicleState<'a> {
    world: &'a World,
    profile: &'a BehaviorProfile,
    rng: ChaCha8Rng,
    habits: BTreeMap<(StationIx, StationIx), usize>,
    last_exit: f64,
    out: Vec<GroundTruthTrace>,
}

impl VehicleState<'_> {
    fn choose_route(&mut self, o: StationIx, d: StationIx) -> usize {
        let cands = &self.world.routes[&(o, d)];
        let shortest = cands[0].1;
        let weights: Vec<(usize, f64)> = cands
            .iter()
            .enumerate()
            .map(|(i, c)| (i, (-8.0 * (c.1 / shortest - 1.0)).exp()))
            .collect();
        let habit = match self.habits.get(&(o, d)) {
            Some(h) => *h,
            None => {
                let h = sample_weighted(&weights, &mut self.rng);
                self.habits.insert((o, d), h);
                h
            }
        };
        if self.rng.random_bool(self.profile.stickiness) {
            habit
        } else {
            sample_weighted(&weights, &mut self.rng)
        }
    }

    /// Drives one trip departing no earlier than `depart`; returns the exit instant.
    fn trip(&mut self, o: StationIx, d: StationIx, depart: f64) -> Result<f64> {
        let world = self.world;
        let cfg = &world.config;
        let entry = depart.max(self.last_exit + 300.0).round();
        let ix = self.choose_route(o, d);
        let route = world.routes[&(o, d)][ix].0.clone();
        let dwell = if cfg.dwell_probability > 0.0 && self.rng.random_bool(cfg.dwell_probability) {
            Some((self.rng.random_range(1..=route.len()), self.rng.random_range(600.0..1800.0)))
        } else {
            None
        };
        let noise = Normal::new(0.0, cfg.noise_sd_kmh.max(1e-12)).expect("finite spread");
        let mut memo: BTreeMap<(EdgeIx, i64), f64> = BTreeMap::new();
        let offset = self.profile.speed_offset_kmh;
        let rng = &mut self.rng;
        let mut field = |e: EdgeIx, t: f64| {
            let slot = (t / SIM_SLOT_S as f64).floor() as i64;
            *memo.entry((e, slot)).or_insert_with(|| {
                let eps = if cfg.noise_sd_kmh > 0.0 { noise.sample(rng) } else { 0.0 };
                let limit = world.graph.edge(e).speed_limit_kmh;
                (world.slot_speed_kmh(e, slot) + offset + eps).clamp(10.0, 1.3 * limit)
            })
        };
        let (legs, end_s) = drive::drive(&world.graph, &route, entry, &mut field, dwell)?;
        let entry_time = Timestamp(entry as i64);
        let exit_time = Timestamp(end_s.round() as i64);
        let transaction = Transaction {
            vehicle_id: self.profile.vehicle_id.clone(),
            vehicle_type: self.profile.vehicle_type,
            entry_station: o,
            exit_station: d,
            entry_time,
            exit_time,
            axle_count: self.profile.axle_count,
            weight_kg: self.profile.weight_kg,
        };
        let graph = &world.graph;
        self.out.push(GroundTruthTrace {
            vehicle_id: self.profile.vehicle_id.clone(),
            transaction,
            route_length_m: graph.route_length(&route)?,
            ramp_in_m: graph.station(o).ramp_length_m,
            ramp_out_m: graph.station(d).ramp_length_m,
            route,
            entry_time,
            exit_time,
            legs,
            end_s,
            dwell_s: dwell.map_or(0.0, |d| d.1),
        });
        self.last_exit = exit_time.0 as f64;
        Ok(end_s)
    }
}

pub(super) fn simulate_vehicle(
    world: &World,
    profile: &BehaviorProfile,
    days: u32,
    seed: u64,
) -> Result<Vec<GroundTruthTrace>> {
    let mut st = VehicleState {
        world,
        profile,
        rng: ChaCha8Rng::seed_from_u64(seed),
        habits: BTreeMap::new(),
        last_exit: f64::NEG_INFINITY,
        out: Vec::new(),
    };
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    for day in 0..days {
        let day0 = world.day_start(day).0 as f64;
        let ctx = world.context(Timestamp(day0 as i64));
        let quiet = ctx.is_weekend || ctx.is_holiday;
        let p = if ctx.is_holiday {
            profile.activity[6]
        } else {
            profile.activity[ctx.day_of_week as usize - 1]
        };
        if !st.rng.random_bool(p) {
            continue;
        }
        let hour = |h: f64, sd_h: f64, rng: &mut ChaCha8Rng| day0 + ((h + sd_h * jitter.sample(rng)).clamp(0.5, 23.0) * 3600.0);
        match profile.regime {
            EntropyRegime::Single => {
                let t = hour(profile.depart_hour, 0.5, &mut st.rng);
                st.trip(profile.home, profile.anchor, t)?;
            }
            EntropyRegime::Commuter => {
                let t = hour(profile.depart_hour, 0.25, &mut st.rng);
                st.trip(profile.home, profile.anchor, t)?;
                let t = hour(profile.depart_hour + 9.5, 0.4, &mut st.rng);
                st.trip(profile.anchor, profile.home, t)?;
            }
            EntropyRegime::Explorer => {
                let prefs = if quiet { &profile.weekend_prefs } else { &profile.weekday_prefs };
                let dest = sample_weighted(prefs, &mut st.rng);
                let base = if quiet { profile.depart_hour + 3.0 } else { profile.depart_hour };
                let t = hour(base, 0.5, &mut st.rng);
                let arrive = st.trip(profile.home, dest, t)?;
                let stay = st.rng.random_range(3600.0..4.0 * 3600.0);
                st.trip(dest, profile.home, arrive + stay)?;
            }
        }
    }
    Ok(st.out)
}
