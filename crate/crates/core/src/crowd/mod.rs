//! Crowd traffic speed estimation from trip-duration differences.
//!
//! Single-edge trips observe an edge directly. A trip whose route extends a
//! shorter trip's route by one edge observes that extension edge through the
//! difference of the two durations. Differenced samples mix two drivers, so
//! each carries a confidence weight; per edge and time slot the weighted sample
//! is summarised by letter values and a Gaussian mixture. Cells without enough
//! samples fall back to free flow at the speed limit.

mod gmm;
mod letter;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub use gmm::{fit_from, fit_weighted_gmm, normal_pdf, GmmComponent, GmmFit, GmmOptions, GmmParams};
pub use letter::{letter_values, LetterValues};

use crate::error::{Error, Result};
use crate::graph::{EdgeIx, HighwayGraph, Route};
use crate::ingest::{slot_of, RoutedTrip, TimeSlot, Timestamp, Trip, TripId};

/// Sample weight scale: a driver-speed gap of 10 km/h on the edge gives weight 0.5.
pub fn default_lambda() -> f64 {
    (10.0f64 / 3.6).powi(2) / std::f64::consts::LN_2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleSource {
    DirectSingleEdge(TripId),
    Differenced { shorter: TripId, longer: TripId },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedDurationSample {
    pub edge: EdgeIx,
    pub slot: TimeSlot,
    pub duration_s: f64,
    pub speed_kmh: f64,
    /// Sample weight in (0, 1]; exactly 1 for direct samples.
    pub confidence: f64,
    pub source: SampleSource,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleDiagnostics {
    pub direct: usize,
    pub differenced: usize,
    /// Longer trip was not slower than the shorter one.
    pub negative_difference: usize,
    /// Ramp correction left no highway time.
    pub ramp_discarded: usize,
    /// Speed outside (0, max_speed_factor x limit].
    pub implausible: usize,
    /// Routes longer than the differencing horizon.
    pub skipped_long: usize,
    /// Route endpoints disagree with the trip's stations.
    pub mismatched: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrowdConfig {
    pub slot_width_min: u32,
    pub lambda: f64,
    pub components: usize,
    pub min_samples: usize,
    /// Longest route (in edges) used for differencing.
    pub max_route_edges: usize,
    /// Samples faster than this multiple of the limit are discarded.
    pub max_speed_factor: f64,
    /// Ramp-corrected durations below this are discarded.
    pub min_duration_s: f64,
    pub seed: u64,
}

impl Default for CrowdConfig {
    fn default() -> Self {
        CrowdConfig {
            slot_width_min: 30,
            lambda: default_lambda(),
            components: 2,
            min_samples: 5,
            max_route_edges: 3,
            max_speed_factor: 1.5,
            min_duration_s: 1.0,
            seed: 7,
        }
    }
}

fn check_endpoints(trip: &Trip, route: &Route, graph: &HighwayGraph) -> Result<()> {
    if route.origin(graph) != trip.origin() || route.destination(graph) != trip.destination() {
        return Err(Error::domain(format!(
            "route {} does not connect trip {} stations",
            route.display_ids(graph, " "),
            trip.id
        )));
    }
    Ok(())
}

/// Highway-only travel time: the trip duration minus the share attributed to
/// the entry and exit ramps in proportion to their length.
pub fn ramp_corrected_duration(trip: &Trip, route: &Route, graph: &HighwayGraph) -> Result<f64> {
    check_endpoints(trip, route, graph)?;
    ramp_corrected(trip.duration_s as f64, route, graph, 1.0)
}

fn ramp_corrected(duration_s: f64, route: &Route, graph: &HighwayGraph, min_duration_s: f64) -> Result<f64> {
    let ramps = graph.station(route.origin(graph)).ramp_length_m
        + graph.station(route.destination(graph)).ramp_length_m;
    let len = graph.route_length(route)?;
    let ramp_time = duration_s * ramps / (ramps + len);
    let corrected = duration_s - ramp_time;
    if !(corrected >= min_duration_s) {
        return Err(Error::domain(format!(
            "ramp correction leaves {corrected:.3} s of highway time"
        )));
    }
    Ok(corrected)
}

/// Dissimilarity `1 - exp(-s^2 / lambda)` with `s = l/d_i - l/d_j` in m/s.
pub fn dissimilarity(edge_length_m: f64, d_i: f64, d_j: f64, lambda: f64) -> Result<f64> {
    Ok(1.0 - confidence(edge_length_m, d_i, d_j, lambda)?)
}

/// Sample weight of a differenced duration, `exp(-s^2 / lambda)`; 1 when the two
/// source durations agree and decreasing in `|s|`.
pub fn confidence(edge_length_m: f64, d_i: f64, d_j: f64, lambda: f64) -> Result<f64> {
    if !(d_i > 0.0 && d_j > 0.0) {
        return Err(Error::domain("durations must be positive"));
    }
    if !(lambda > 0.0) {
        return Err(Error::domain("lambda must be positive"));
    }
    let s = edge_length_m / d_i - edge_length_m / d_j;
    Ok((-s * s / lambda).exp())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<DerivedDurationSample>,
    pub diagnostics: SampleDiagnostics,
}

/// Direct and differenced per-edge samples from trips with short routes.
pub fn derive_edge_samples(trips: &[RoutedTrip], graph: &HighwayGraph, cfg: &CrowdConfig) -> Result<SampleSet> {
    let mut diag = SampleDiagnostics::default();
    let mut samples = Vec::new();
    // (route, slot) -> [(trip id, corrected duration)]
    let mut by_route: BTreeMap<(&Route, u32), Vec<(TripId, f64)>> = BTreeMap::new();
    let mut usable = Vec::new();
    for rt in trips {
        if rt.route.len() > cfg.max_route_edges {
            diag.skipped_long += 1;
            continue;
        }
        if check_endpoints(&rt.trip, &rt.route, graph).is_err() {
            diag.mismatched += 1;
            continue;
        }
        let d = match ramp_corrected(rt.trip.duration_s as f64, &rt.route, graph, cfg.min_duration_s) {
            Ok(d) => d,
            Err(_) => {
                diag.ramp_discarded += 1;
                continue;
            }
        };
        let fastest = rt
            .route
            .edges()
            .iter()
            .map(|&e| graph.edge(e).speed_limit_kmh)
            .fold(0.0, f64::max);
        if graph.route_length(&rt.route)? / d * 3.6 > cfg.max_speed_factor * fastest {
            diag.implausible += 1;
            continue;
        }
        let slot = slot_of(rt.trip.entry_time(), cfg.slot_width_min)?;
        by_route
            .entry((&rt.route, slot.index))
            .or_default()
            .push((rt.trip.id, d));
        usable.push((rt, slot, d));
    }
    let plausible = |edge: EdgeIx, speed: f64| {
        speed > 0.0 && speed <= cfg.max_speed_factor * graph.edge(edge).speed_limit_kmh
    };
    for &(rt, slot, d) in &usable {
        let edges = rt.route.edges();
        if edges.len() == 1 {
            let e = edges[0];
            let speed = graph.edge(e).length_m / d * 3.6;
            if !plausible(e, speed) {
                diag.implausible += 1;
                continue;
            }
            diag.direct += 1;
            samples.push(DerivedDurationSample {
                edge: e,
                slot: traversal_slot(rt, rt.trip.duration_s as f64 / 2.0, cfg)?,
                duration_s: d,
                speed_kmh: speed,
                confidence: 1.0,
                source: SampleSource::DirectSingleEdge(rt.trip.id),
            });
            continue;
        }
        let prefix = Route::new(graph, edges[..edges.len() - 1].to_vec())?;
        let ext = *edges.last().unwrap();
        let ext_len = graph.edge(ext).length_m;
        let route_len = graph.route_length(&rt.route)?;
        let prefix_len = route_len - ext_len;
        let Some(shorter) = by_route.get(&(&prefix, slot.index)) else {
            continue;
        };
        for &(short_id, d_short) in shorter {
            let diff = d - d_short;
            if diff <= 0.0 {
                diag.negative_difference += 1;
                continue;
            }
            let speed = ext_len / diff * 3.6;
            if !plausible(ext, speed) {
                diag.implausible += 1;
                continue;
            }
            // Each driver's time over the extension edge at their own average speed,
            // so `s` compares the two average speeds.
            let w = confidence(ext_len, d_short * ext_len / prefix_len, d * ext_len / route_len, cfg.lambda)?
                .max(f64::MIN_POSITIVE);
            diag.differenced += 1;
            samples.push(DerivedDurationSample {
                edge: ext,
                slot: traversal_slot(rt, d_short + diff / 2.0, cfg)?,
                duration_s: diff,
                speed_kmh: speed,
                confidence: w,
                source: SampleSource::Differenced {
                    shorter: short_id,
                    longer: rt.trip.id,
                },
            });
        }
    }
    Ok(SampleSet {
        samples,
        diagnostics: diag,
    })
}

/// Slot of the instant `after_s` seconds past the trip's entry; samples are
/// filed where their edge is driven, pairs are matched on the entry slot.
fn traversal_slot(rt: &RoutedTrip, after_s: f64, cfg: &CrowdConfig) -> Result<TimeSlot> {
    slot_of(Timestamp(rt.trip.entry_time().0 + after_s.round() as i64), cfg.slot_width_min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpeedDistribution {
    pub edge: EdgeIx,
    pub slot: TimeSlot,
    pub samples: Vec<DerivedDurationSample>,
    pub gmm: Option<GmmParams>,
    pub letter_values: LetterValues,
    /// Too few samples; letter values are the free-flow speed.
    pub fallback: bool,
    pub variance_floored: bool,
}

/// Crowd speed distributions for every edge and slot of the day.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedMap {
    pub slot_width_min: u32,
    pub cells: BTreeMap<(EdgeIx, u32), EdgeSpeedDistribution>,
    pub diagnostics: SampleDiagnostics,
}

pub const SPEEDMAP_HEADER: &str = "edge,slot,fallback,min,lf,median,uf,max,gmm_w1,gmm_mu1,gmm_var1,...";

impl SpeedMap {
    pub fn cell(&self, edge: EdgeIx, slot: u32) -> Option<&EdgeSpeedDistribution> {
        self.cells.get(&(edge, slot))
    }

    pub fn slot_index(&self, time: Timestamp) -> u32 {
        slot_of(time, self.slot_width_min).map(|s| s.index).unwrap_or(0)
    }

    /// Letter values of the cell containing `time`, or the free-flow constant
    /// when the cell is absent.
    pub fn letter_values_at(&self, graph: &HighwayGraph, edge: EdgeIx, time: Timestamp) -> (LetterValues, bool) {
        match self.cell(edge, self.slot_index(time)) {
            Some(c) => (c.letter_values, c.fallback),
            None => (LetterValues::constant(graph.edge(edge).speed_limit_kmh), true),
        }
    }

    pub fn median_at(&self, graph: &HighwayGraph, edge: EdgeIx, time: Timestamp) -> f64 {
        self.letter_values_at(graph, edge, time).0.median
    }

    pub fn write_to<W: Write>(&self, mut w: W, graph: &HighwayGraph) -> Result<()> {
        writeln!(w, "{SPEEDMAP_HEADER}")?;
        for c in self.cells.values() {
            let lv = c.letter_values;
            write!(
                w,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                graph.edge(c.edge).id,
                c.slot.index,
                u8::from(c.fallback),
                lv.min,
                lv.lower_fourth,
                lv.median,
                lv.upper_fourth,
                lv.max
            )?;
            if let Some(g) = &c.gmm {
                for comp in &g.components {
                    write!(w, ",{:.6},{:.6},{:.6}", comp.weight, comp.mean, comp.variance)?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Reads an exported map. Samples are not part of the export.
    pub fn read_from<R: BufRead>(reader: R, graph: &HighwayGraph, slot_width_min: u32) -> Result<Self> {
        crate::ingest::check_slot_width(slot_width_min)?;
        let mut cells = BTreeMap::new();
        let mut header = false;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = n + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            if !header {
                if line.trim() != SPEEDMAP_HEADER {
                    return Err(Error::parse(lineno, "missing speed map header"));
                }
                header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 8 || !(f.len() - 8).is_multiple_of(3) {
                return Err(Error::parse(lineno, "wrong field count"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(lineno, format!("bad number `{s}`")));
            let edge = graph.edge_ix(f[0])?;
            let slot: u32 = f[1].parse().map_err(|_| Error::parse(lineno, "bad slot"))?;
            let lv = LetterValues {
                min: num(f[3])?,
                lower_fourth: num(f[4])?,
                median: num(f[5])?,
                upper_fourth: num(f[6])?,
                max: num(f[7])?,
            };
            let comps = f[8..]
                .chunks(3)
                .map(|c| {
                    Ok(GmmComponent {
                        weight: num(c[0])?,
                        mean: num(c[1])?,
                        variance: num(c[2])?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            cells.insert(
                (edge, slot),
                EdgeSpeedDistribution {
                    edge,
                    slot: TimeSlot {
                        index: slot,
                        width_min: slot_width_min,
                    },
                    samples: Vec::new(),
                    gmm: (!comps.is_empty()).then_some(GmmParams { components: comps }),
                    letter_values: lv,
                    fallback: f[2] == "1",
                    variance_floored: false,
                },
            );
        }
        Ok(SpeedMap {
            slot_width_min,
            cells,
            diagnostics: SampleDiagnostics::default(),
        })
    }
}

fn cell_seed(seed: u64, edge: EdgeIx, slot: u32) -> u64 {
    seed ^ (u64::from(edge.0) << 20 | u64::from(slot)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Summarises one (edge, slot) cell.
pub fn estimate_cell(
    edge: EdgeIx,
    slot: TimeSlot,
    samples: Vec<DerivedDurationSample>,
    graph: &HighwayGraph,
    cfg: &CrowdConfig,
) -> EdgeSpeedDistribution {
    let free_flow = graph.edge(edge).speed_limit_kmh;
    if samples.len() < cfg.min_samples.max(1) {
        return EdgeSpeedDistribution {
            edge,
            slot,
            samples,
            gmm: None,
            letter_values: LetterValues::constant(free_flow),
            fallback: true,
            variance_floored: false,
        };
    }
    let values: Vec<f64> = samples.iter().map(|s| s.speed_kmh).collect();
    let weights: Vec<f64> = samples.iter().map(|s| s.confidence).collect();
    let letter_values = letter_values(&values, &weights).expect("non-empty positive-weight sample");
    let mut distinct = values.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let k = cfg.components.min(distinct.len()).max(1);
    let opts = GmmOptions {
        components: k,
        seed: cell_seed(cfg.seed, edge, slot.index),
        ..GmmOptions::default()
    };
    let fit = fit_weighted_gmm(&values, &weights, &opts).ok();
    EdgeSpeedDistribution {
        edge,
        slot,
        samples,
        variance_floored: fit.as_ref().is_some_and(|f| f.variance_floored),
        gmm: fit.map(|f| f.params),
        letter_values,
        fallback: false,
    }
}

/// Builds the full speed map for a window of routed trips.
pub fn estimate_slot_distributions(trips: &[RoutedTrip], graph: &HighwayGraph, cfg: &CrowdConfig) -> Result<SpeedMap> {
    crate::ingest::check_slot_width(cfg.slot_width_min)?;
    let set = derive_edge_samples(trips, graph, cfg)?;
    let mut grouped: BTreeMap<(EdgeIx, u32), Vec<DerivedDurationSample>> = BTreeMap::new();
    for s in set.samples {
        grouped.entry((s.edge, s.slot.index)).or_default().push(s);
    }
    let slots = TimeSlot::slots_per_day(cfg.slot_width_min);
    let mut cells = BTreeMap::new();
    for e in 0..graph.edge_count() {
        let edge = EdgeIx(e as u32);
        for s in 0..slots {
            let samples = grouped.remove(&(edge, s)).unwrap_or_default();
            let slot = TimeSlot {
                index: s,
                width_min: cfg.slot_width_min,
            };
            cells.insert((edge, s), estimate_cell(edge, slot, samples, graph, cfg));
        }
    }
    Ok(SpeedMap {
        slot_width_min: cfg.slot_width_min,
        cells,
        diagnostics: set.diagnostics,
    })
}

#[cfg(test)]
mod tests;
