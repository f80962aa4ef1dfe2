use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::ks::{ks_normality_test_min, NormalityReport, MIN_KS_SAMPLES};
use super::{refine, shortlist, DiscretizationConfig, SegmentId, StateSequence};
use crate::crowd::SpeedMap;
use crate::error::{Error, Result};
use crate::graph::{EdgeIx, HighwayGraph, RouteCatalog, DEFAULT_MAX_EDGES};
use crate::ingest::{Trip, TripId};
use crate::stats::{mean, rms_about};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub discretization: DiscretizationConfig,
    pub alpha: f64,
    /// Groups smaller than this are not tested and do not score.
    pub min_test_samples: usize,
    pub node_budget: u64,
    /// Flattest speed profiles kept per candidate route.
    pub profiles_per_route: usize,
    pub max_route_edges: usize,
    /// Candidate routes longer than this multiple of the shortest are dropped.
    pub max_stretch: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            discretization: DiscretizationConfig::default(),
            alpha: 0.05,
            min_test_samples: MIN_KS_SAMPLES,
            node_budget: 1_000_000,
            profiles_per_route: 2,
            max_route_edges: DEFAULT_MAX_EDGES,
            max_stretch: 1.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupKey {
    Segment { segment: SegmentId, slot: i64 },
    /// Population of per-vehicle speed deviations about their own mean.
    VehicleSpread,
}

/// Search objective: more accepted tests first, then smaller deviation from
/// the reference speeds, then shorter total route length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub accepted: u32,
    pub deviation: f64,
    pub length_m: f64,
}

const DEV_EPS: f64 = 1e-9;
const LEN_EPS: f64 = 1e-6;

impl Score {
    pub fn better_than(&self, other: &Score) -> bool {
        could_beat(self.accepted, self.deviation, self.length_m, other)
    }

    pub fn ties(&self, other: &Score) -> bool {
        self.accepted == other.accepted
            && (self.deviation - other.deviation).abs() <= DEV_EPS * other.deviation.abs().max(1.0)
            && (self.length_m - other.length_m).abs() <= LEN_EPS
    }
}

fn could_beat(accepted: u32, deviation: f64, length: f64, b: &Score) -> bool {
    let eps = DEV_EPS * b.deviation.abs().max(1.0);
    accepted > b.accepted
        || (accepted == b.accepted
            && (deviation < b.deviation - eps
                || ((deviation - b.deviation).abs() <= eps && length < b.length_m - LEN_EPS)))
}

/// Expected speed and spread per edge and time, backing off from a crowd cell
/// to the edge's covered cells to a network-wide ratio of the speed limit.
#[derive(Clone, Debug)]
pub struct SpeedReference {
    slot_width_min: u32,
    cells: HashMap<(EdgeIx, u32), (f64, f64)>,
    edge_level: Vec<Option<(f64, f64)>>,
    limits: Vec<f64>,
    ratio: f64,
    ratio_spread: f64,
}

/// Standardized speed gap treated as ordinary driver variation.
pub const DEVIATION_DEAD_ZONE: f64 = 3.0;

/// Pooled samples an edge needs before they stand in for missing cells.
const SPARSE_EDGE_SAMPLES: usize = 3;

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

impl SpeedReference {
    /// Cells below the sample threshold do not count as cells, but their
    /// samples still inform the edge and network levels.
    pub fn from_speed_map(map: &SpeedMap, graph: &HighwayGraph) -> Self {
        let mut cells = HashMap::new();
        let mut per_edge: Vec<Vec<f64>> = vec![Vec::new(); graph.edge_count()];
        let mut sparse_edge: Vec<Vec<f64>> = vec![Vec::new(); graph.edge_count()];
        let mut ratios = Vec::new();
        let mut sparse_ratios = Vec::new();
        for (&(e, slot), c) in &map.cells {
            let limit = graph.edge(e).speed_limit_kmh;
            if c.fallback {
                for smp in &c.samples {
                    sparse_edge[e.index()].push(smp.speed_kmh);
                    sparse_ratios.push(smp.speed_kmh / limit);
                }
                continue;
            }
            let lv = c.letter_values;
            let s = ((lv.upper_fourth - lv.lower_fourth) / 1.349).max(3.0);
            cells.insert((e, slot), (lv.median, s));
            per_edge[e.index()].push(lv.median);
            ratios.push(lv.median / limit);
        }
        let edge_level = per_edge
            .into_iter()
            .zip(sparse_edge)
            .map(|(m, sparse)| match median(m) {
                Some(v) => Some((v, 8.0)),
                None if sparse.len() >= SPARSE_EDGE_SAMPLES => median(sparse).map(|v| (v, 10.0)),
                None => None,
            })
            .collect();
        let (ratio, ratio_spread) = match median(ratios).or_else(|| median(sparse_ratios)) {
            Some(r) => (r, 10.0),
            None => (1.0, 15.0),
        };
        SpeedReference {
            slot_width_min: map.slot_width_min,
            cells,
            edge_level,
            limits: graph.edges().iter().map(|e| e.speed_limit_kmh).collect(),
            ratio,
            ratio_spread,
        }
    }

    /// Every edge expected at `ratio` of its limit with spread `spread`.
    pub fn uniform(graph: &HighwayGraph, ratio: f64, spread: f64) -> Self {
        SpeedReference {
            slot_width_min: 30,
            cells: HashMap::new(),
            edge_level: vec![None; graph.edge_count()],
            limits: graph.edges().iter().map(|e| e.speed_limit_kmh).collect(),
            ratio,
            ratio_spread: spread,
        }
    }

    pub fn expected(&self, edge: EdgeIx, time_s: f64) -> (f64, f64) {
        let day_s = time_s.rem_euclid(86_400.0);
        let slot = (day_s / (self.slot_width_min as f64 * 60.0)) as u32;
        if let Some(&c) = self.cells.get(&(edge, slot)) {
            return c;
        }
        if let Some(c) = self.edge_level[edge.index()] {
            return c;
        }
        (self.ratio * self.limits[edge.index()], self.ratio_spread)
    }

    /// Length-weighted squared excess of each state's standardized speed
    /// beyond [`DEVIATION_DEAD_ZONE`]; speeds inside the zone cost nothing.
    pub fn deviation(&self, seq: &StateSequence, slot_s: f64) -> f64 {
        seq.states
            .iter()
            .map(|st| {
                let mid = (st.slot as f64 + 0.5) * slot_s;
                let (m, s) = self.expected(st.segment.edge, mid);
                let excess = (((st.speed_kmh - m) / s).abs() - DEVIATION_DEAD_ZONE).max(0.0);
                st.length_m / 1000.0 * excess * excess
            })
            .sum()
    }
}

/// Candidate sequences of one trip, with their precomputed scores.
#[derive(Clone, Debug)]
pub struct TripCandidates {
    pub trip: TripId,
    pub vehicle: String,
    pub sequences: Vec<StateSequence>,
    pub deviation: Vec<f64>,
    pub length_m: Vec<f64>,
}

impl TripCandidates {
    pub fn new(trip: &Trip, sequences: Vec<StateSequence>, reference: Option<&SpeedReference>, slot_s: f64) -> Self {
        let deviation = sequences
            .iter()
            .map(|s| reference.map_or(0.0, |r| r.deviation(s, slot_s)))
            .collect();
        let length_m = sequences
            .iter()
            .map(|s| s.states.iter().map(|st| st.length_m).sum())
            .collect();
        TripCandidates {
            trip: trip.id,
            vehicle: trip.vehicle_id().to_string(),
            sequences,
            deviation,
            length_m,
        }
    }
}

/// Incrementally maintained test outcomes for a partial assignment.
struct Evaluator {
    alpha: f64,
    min_n: usize,
    groups: HashMap<(SegmentId, i64), Vec<f64>>,
    group_ok: HashMap<(SegmentId, i64), bool>,
    accepted_groups: u32,
    vehicle_speeds: Vec<Vec<f64>>,
    spread_ok: Cell<Option<bool>>,
}

impl Evaluator {
    fn new(alpha: f64, min_n: usize, vehicles: usize) -> Self {
        Evaluator {
            alpha,
            min_n,
            groups: HashMap::new(),
            group_ok: HashMap::new(),
            accepted_groups: 0,
            vehicle_speeds: vec![Vec::new(); vehicles],
            spread_ok: Cell::new(None),
        }
    }

    fn testable_accepted(&self, xs: &[f64]) -> bool {
        xs.len() >= self.min_n
            && ks_normality_test_min(xs, self.alpha, self.min_n)
                .map(|r| r.accepted)
                .unwrap_or(false)
    }

    fn refresh(&mut self, key: (SegmentId, i64)) {
        let ok = self.groups.get(&key).is_some_and(|xs| self.testable_accepted(xs));
        let was = self.group_ok.insert(key, ok).unwrap_or(false);
        match (was, ok) {
            (false, true) => self.accepted_groups += 1,
            (true, false) => self.accepted_groups -= 1,
            _ => {}
        }
    }

    fn add(&mut self, seq: &StateSequence, vehicle: usize) {
        for st in &seq.states {
            let key = (st.segment, st.slot);
            self.groups.entry(key).or_default().push(st.speed_kmh);
            self.refresh(key);
        }
        self.vehicle_speeds[vehicle].push(seq.mean_speed_kmh());
        if self.vehicle_speeds[vehicle].len() >= 2 {
            self.spread_ok.set(None);
        }
    }

    fn remove(&mut self, seq: &StateSequence, vehicle: usize) {
        for st in seq.states.iter().rev() {
            let key = (st.segment, st.slot);
            let xs = self.groups.get_mut(&key).expect("state was added");
            let pos = xs.iter().rposition(|v| *v == st.speed_kmh).expect("speed was added");
            xs.remove(pos);
            if xs.is_empty() {
                self.groups.remove(&key);
            }
            self.refresh(key);
        }
        let vs = &mut self.vehicle_speeds[vehicle];
        let m = seq.mean_speed_kmh();
        let pos = vs.iter().rposition(|v| *v == m).expect("trip was added");
        vs.remove(pos);
        if !vs.is_empty() {
            self.spread_ok.set(None);
        }
    }

    fn spread_population(&self) -> Vec<f64> {
        self.vehicle_speeds
            .iter()
            .filter(|v| v.len() >= 2)
            .map(|v| rms_about(v, mean(v)))
            .collect()
    }

    fn accepted(&self) -> u32 {
        let spread = match self.spread_ok.get() {
            Some(ok) => ok,
            None => {
                let ok = self.testable_accepted(&self.spread_population());
                self.spread_ok.set(Some(ok));
                ok
            }
        };
        self.accepted_groups + spread as u32
    }
}

struct Dfs<'a> {
    cands: &'a [TripCandidates],
    order: Vec<usize>,
    vehicle_of: Vec<usize>,
    potential: Vec<u32>,
    dev_lb: Vec<f64>,
    len_lb: Vec<f64>,
    budget: u64,
    nodes: u64,
    bounded: bool,
    choice: Vec<usize>,
    partial_dev: f64,
    partial_len: f64,
    best: Option<(Score, Vec<usize>)>,
}

impl Dfs<'_> {
    fn leaf_score(&self, ev: &Evaluator) -> Score {
        let mut deviation = 0.0;
        let mut length_m = 0.0;
        for (i, c) in self.cands.iter().enumerate() {
            deviation += c.deviation[self.choice[i]];
            length_m += c.length_m[self.choice[i]];
        }
        Score {
            accepted: ev.accepted(),
            deviation,
            length_m,
        }
    }

    fn visit(&mut self, depth: usize, ev: &mut Evaluator) {
        if depth == self.order.len() {
            let s = self.leaf_score(ev);
            if self.best.as_ref().is_none_or(|(b, _)| s.better_than(b)) {
                self.best = Some((s, self.choice.clone()));
            }
            return;
        }
        if let Some((b, _)) = &self.best {
            let ub = ev.accepted() + self.potential[depth];
            if !could_beat(
                ub,
                self.partial_dev + self.dev_lb[depth],
                self.partial_len + self.len_lb[depth],
                b,
            ) {
                return;
            }
        }
        let t = self.order[depth];
        let veh = self.vehicle_of[t];
        let cand = &self.cands[t];
        let mut ranked = Vec::with_capacity(cand.sequences.len());
        for (c, seq) in cand.sequences.iter().enumerate() {
            if self.nodes >= self.budget {
                self.bounded = true;
                return;
            }
            self.nodes += 1;
            ev.add(seq, veh);
            ranked.push((
                Score {
                    accepted: ev.accepted(),
                    deviation: cand.deviation[c],
                    length_m: cand.length_m[c],
                },
                c,
            ));
            ev.remove(seq, veh);
        }
        ranked.sort_by(|a, b| {
            if a.0.better_than(&b.0) {
                std::cmp::Ordering::Less
            } else if b.0.better_than(&a.0) {
                std::cmp::Ordering::Greater
            } else {
                a.1.cmp(&b.1)
            }
        });
        for (_, c) in ranked {
            let seq = &cand.sequences[c];
            ev.add(seq, veh);
            self.choice[t] = c;
            self.partial_dev += cand.deviation[c];
            self.partial_len += cand.length_m[c];
            self.visit(depth + 1, ev);
            self.partial_dev -= cand.deviation[c];
            self.partial_len -= cand.length_m[c];
            ev.remove(seq, veh);
            if self.bounded {
                return;
            }
        }
    }
}

/// Chooses one candidate per trip. Trips with the fewest candidates are
/// decided first; each level tries its candidates best-first and branches
/// that cannot beat the incumbent are cut. Returns the chosen indices, their
/// score, the number of nodes expanded and whether the budget ran out.
pub fn search_candidates(
    cands: &[TripCandidates],
    alpha: f64,
    min_test_samples: usize,
    budget: u64,
) -> Result<(Vec<usize>, Score, u64, bool)> {
    if cands.iter().any(|c| c.sequences.is_empty()) {
        return Err(Error::domain("every trip needs at least one candidate"));
    }
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by_key(|&i| (cands[i].sequences.len(), cands[i].trip));
    let mut vehicles: BTreeMap<&str, usize> = BTreeMap::new();
    for c in cands {
        let n = vehicles.len();
        vehicles.entry(c.vehicle.as_str()).or_insert(n);
    }
    let vehicle_of: Vec<usize> = cands.iter().map(|c| vehicles[c.vehicle.as_str()]).collect();

    // Groups that could ever be tested, and the last depth at which they can change.
    let mut touch: HashMap<(SegmentId, i64), (usize, usize)> = HashMap::new();
    for (depth, &t) in order.iter().enumerate() {
        let mut keys: Vec<(SegmentId, i64)> = cands[t]
            .sequences
            .iter()
            .flat_map(|s| s.states.iter().map(|st| (st.segment, st.slot)))
            .collect();
        keys.sort();
        keys.dedup();
        for k in keys {
            let e = touch.entry(k).or_insert((0, depth));
            e.0 += 1;
            e.1 = depth;
        }
    }
    let n = order.len();
    let mut potential = vec![0u32; n + 1];
    for &(count, last) in touch.values() {
        if count >= min_test_samples {
            for p in potential.iter_mut().take(last + 1) {
                *p += 1;
            }
        }
    }
    for p in potential.iter_mut().take(n) {
        *p += 1;
    }
    let mut dev_lb = vec![0.0; n + 1];
    let mut len_lb = vec![0.0; n + 1];
    for depth in (0..n).rev() {
        let c = &cands[order[depth]];
        dev_lb[depth] = dev_lb[depth + 1] + c.deviation.iter().copied().fold(f64::INFINITY, f64::min);
        len_lb[depth] = len_lb[depth + 1] + c.length_m.iter().copied().fold(f64::INFINITY, f64::min);
    }
    let mut dfs = Dfs {
        cands,
        order,
        vehicle_of,
        potential,
        dev_lb,
        len_lb,
        budget,
        nodes: 0,
        bounded: false,
        choice: vec![0; n],
        partial_dev: 0.0,
        partial_len: 0.0,
        best: None,
    };
    let mut ev = Evaluator::new(alpha, min_test_samples, vehicles.len());
    dfs.visit(0, &mut ev);
    let (score, choice) = match dfs.best {
        Some(b) => b,
        None => {
            // Budget ran out before any leaf: complete greedily with first candidates.
            let choice = vec![0; n];
            let mut ev = Evaluator::new(alpha, min_test_samples, vehicles.len());
            for (i, c) in cands.iter().enumerate() {
                ev.add(&c.sequences[0], dfs.vehicle_of[i]);
            }
            let dfs2 = Dfs { choice, ..dfs };
            (dfs2.leaf_score(&ev), dfs2.choice)
        }
    };
    Ok((choice, score, dfs.nodes, dfs.bounded))
}

#[derive(Clone, Debug)]
pub struct RecoveryResult {
    pub sequences: BTreeMap<TripId, StateSequence>,
    pub unrecoverable: Vec<(TripId, String)>,
    /// Tests over the final (refined) sequences, including untested small groups.
    pub reports: Vec<(GroupKey, NormalityReport)>,
    /// Objective of the chosen grid sequences.
    pub score: Score,
    pub bounded: bool,
    pub nodes: u64,
}

impl RecoveryResult {
    pub fn accepted_tests(&self) -> usize {
        self.reports.iter().filter(|(_, r)| r.accepted && !r.insufficient).count()
    }
}

fn candidates_for(
    trip: &Trip,
    graph: &HighwayGraph,
    catalog: &mut RouteCatalog,
    cfg: &RecoveryConfig,
) -> Result<Vec<StateSequence>> {
    let routes = catalog.routes(graph, trip.origin(), trip.destination())?.to_vec();
    let Some(shortest) = routes.first().map(|r| graph.route_length(r)).transpose()? else {
        return Err(Error::domain("no route between the trip's stations"));
    };
    let mut out = Vec::new();
    for r in &routes {
        if graph.route_length(r)? > cfg.max_stretch * shortest + 1e-9 {
            continue;
        }
        out.extend(shortlist(trip, graph, r, &cfg.discretization, cfg.profiles_per_route)?);
    }
    if out.is_empty() {
        return Err(Error::domain("no feasible state sequence"));
    }
    Ok(out)
}

/// Recovers a route and speed profile for every trip of a window.
pub fn recover_routes_and_speeds(
    trips: &[Trip],
    graph: &HighwayGraph,
    cfg: &RecoveryConfig,
    reference: Option<&SpeedReference>,
) -> Result<RecoveryResult> {
    cfg.discretization.validate()?;
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::domain("alpha must lie in (0, 1)"));
    }
    let slot_s = cfg.discretization.slot_seconds();
    let mut catalog = RouteCatalog::new(cfg.max_route_edges);
    let mut cands = Vec::new();
    let mut unrecoverable = Vec::new();
    for trip in trips {
        match candidates_for(trip, graph, &mut catalog, cfg) {
            Ok(seqs) => cands.push(TripCandidates::new(trip, seqs, reference, slot_s)),
            Err(e) => unrecoverable.push((trip.id, e.to_string())),
        }
    }
    if cands.is_empty() {
        return Err(Error::domain("no trip has a feasible state sequence"));
    }
    let (choice, score, nodes, bounded) =
        search_candidates(&cands, cfg.alpha, cfg.min_test_samples, cfg.node_budget)?;
    let mut sequences = BTreeMap::new();
    for (c, &k) in cands.iter().zip(&choice) {
        sequences.insert(c.trip, refine(&c.sequences[k], graph, &cfg.discretization));
    }
    let reports = group_reports(
        sequences.values().map(|s| (s, &cands.iter().find(|c| c.trip == s.trip).unwrap().vehicle)),
        cfg,
    )?;
    Ok(RecoveryResult {
        sequences,
        unrecoverable,
        reports,
        score,
        bounded,
        nodes,
    })
}

fn group_reports<'a>(
    seqs: impl Iterator<Item = (&'a StateSequence, &'a String)>,
    cfg: &RecoveryConfig,
) -> Result<Vec<(GroupKey, NormalityReport)>> {
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    let mut per_vehicle: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (s, v) in seqs {
        for st in &s.states {
            groups
                .entry(GroupKey::Segment {
                    segment: st.segment,
                    slot: st.slot,
                })
                .or_default()
                .push(st.speed_kmh);
        }
        per_vehicle.entry(v.as_str()).or_default().push(s.mean_speed_kmh());
    }
    let spreads: Vec<f64> = per_vehicle
        .values()
        .filter(|v| v.len() >= 2)
        .map(|v| rms_about(v, mean(v)))
        .collect();
    groups.insert(GroupKey::VehicleSpread, spreads);
    groups
        .into_iter()
        .map(|(k, xs)| Ok((k, ks_normality_test_min(&xs, cfg.alpha, cfg.min_test_samples)?)))
        .collect()
}

/// Recovers one completed trip on its own: the candidate closest to the
/// reference speeds, refined.
pub fn recover_single(
    trip: &Trip,
    graph: &HighwayGraph,
    catalog: &mut RouteCatalog,
    cfg: &RecoveryConfig,
    reference: &SpeedReference,
) -> Result<StateSequence> {
    let seqs = candidates_for(trip, graph, catalog, cfg)?;
    let c = TripCandidates::new(trip, seqs, Some(reference), cfg.discretization.slot_seconds());
    let best = (0..c.sequences.len())
        .min_by(|&a, &b| {
            c.deviation[a]
                .total_cmp(&c.deviation[b])
                .then(c.length_m[a].total_cmp(&c.length_m[b]))
        })
        .expect("non-empty candidates");
    Ok(refine(&c.sequences[best], graph, &cfg.discretization))
}
