//! Descriptive mobility statistics: destination entropy, rank similarity,
//! speed spread, correlation and edge coverage.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use crate::error::{Error, Result};
use crate::graph::{HighwayGraph, StationIx};
use crate::ingest::{RoutedTrip, TimeSlot, Trip};

/// Shannon entropy in bits of the empirical distribution given by `counts`.
pub fn entropy_bits<I: IntoIterator<Item = f64>>(counts: I) -> f64 {
    let counts: Vec<f64> = counts.into_iter().filter(|&c| c > 0.0).collect();
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let p = c / total;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// Entropy of the destinations visited in a vehicle's history.
pub fn destination_entropy(history: &[Trip]) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::domain("destination entropy of an empty history"));
    }
    let mut counts: BTreeMap<StationIx, f64> = BTreeMap::new();
    for t in history {
        *counts.entry(t.destination()).or_default() += 1.0;
    }
    Ok(entropy_bits(counts.into_values()))
}

fn dcg<K: Eq + Hash>(ranking: &[K], gains: &HashMap<&K, f64>) -> f64 {
    ranking
        .iter()
        .enumerate()
        .map(|(i, k)| gains.get(k).copied().unwrap_or(0.0) / (i as f64 + 2.0).log2())
        .sum()
}

/// NDCG of `other` against the gains carried by `reference`.
///
/// Gains come from the reference list (typically popularity counts). The
/// normaliser is the DCG of the reference items in descending gain order, so a
/// popularity-sorted reference compared with itself scores exactly 1.
pub fn ndcg_rank_similarity<K: Eq + Hash>(reference: &[(K, f64)], other: &[K]) -> Result<f64> {
    if reference.is_empty() || other.is_empty() {
        return Err(Error::domain("empty ranking"));
    }
    if reference.iter().any(|(_, g)| !(g.is_finite() && *g >= 0.0)) {
        return Err(Error::domain("gains must be non-negative"));
    }
    let gains: HashMap<&K, f64> = reference.iter().map(|(k, g)| (k, *g)).collect();
    let mut ideal: Vec<f64> = reference.iter().map(|(_, g)| *g).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal
        .iter()
        .enumerate()
        .map(|(i, g)| g / (i as f64 + 2.0).log2())
        .sum();
    if idcg == 0.0 {
        return Err(Error::domain("reference ranking carries no gain"));
    }
    Ok(dcg(other, &gains) / idcg)
}

/// Spread of a vehicle's trip speeds about three different centres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedStd {
    /// Centred on the speed limit.
    pub limit: f64,
    /// Centred on the vehicle's historical mean.
    pub historical: f64,
    /// Centred on the current (most recent) trip's speed.
    pub trip: f64,
}

/// Root-mean-square deviation of `samples` from `centre`.
pub fn rms_about(samples: &[f64], centre: f64) -> f64 {
    let ss: f64 = samples.iter().map(|v| (v - centre).powi(2)).sum();
    (ss / samples.len() as f64).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Speed standard deviation variants for one vehicle. The last element of
/// `trip_speeds` is taken as the current trip.
pub fn speed_std_variants(trip_speeds: &[f64], speed_limit: f64) -> Result<SpeedStd> {
    if trip_speeds.len() < 2 {
        return Err(Error::domain("need at least two trip speeds"));
    }
    if !(speed_limit > 0.0) {
        return Err(Error::domain("speed limit must be positive"));
    }
    let current = *trip_speeds.last().unwrap();
    Ok(SpeedStd {
        limit: rms_about(trip_speeds, speed_limit),
        historical: rms_about(trip_speeds, mean(trip_speeds)),
        trip: rms_about(trip_speeds, current),
    })
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::domain("samples differ in length"));
    }
    if x.len() < 2 {
        return Err(Error::domain("need at least two pairs"));
    }
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Fraction of graph edges touched, per origin slot, by routes of at most
/// `max_k` edges (`None` for no bound). Slots with no trips report 0.
pub fn edge_coverage(
    trips: &[RoutedTrip],
    graph: &HighwayGraph,
    max_k: Option<usize>,
    slot_width_min: u32,
) -> Result<Vec<f64>> {
    crate::ingest::check_slot_width(slot_width_min)?;
    let slots = TimeSlot::slots_per_day(slot_width_min) as usize;
    let mut covered = vec![vec![false; graph.edge_count()]; slots];
    for rt in trips {
        if max_k.is_some_and(|k| rt.route.len() > k) {
            continue;
        }
        let slot = crate::ingest::slot_of(rt.trip.entry_time(), slot_width_min)?.index as usize;
        for &e in rt.route.edges() {
            covered[slot][e.index()] = true;
        }
    }
    let total = graph.edge_count().max(1) as f64;
    Ok(covered
        .into_iter()
        .map(|c| c.into_iter().filter(|&b| b).count() as f64 / total)
        .collect())
}

/// Destination choice probabilities from one origin, optionally per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionOverDestinations {
    pub origin: StationIx,
    pub slot: Option<TimeSlot>,
    pub probabilities: BTreeMap<StationIx, f64>,
}

impl DistributionOverDestinations {
    fn from_counts(origin: StationIx, slot: Option<TimeSlot>, counts: BTreeMap<StationIx, f64>) -> Self {
        let total: f64 = counts.values().sum();
        let probabilities = counts.into_iter().map(|(k, c)| (k, c / total)).collect();
        DistributionOverDestinations {
            origin,
            slot,
            probabilities,
        }
    }

    /// Destinations by descending probability, ties by station order.
    pub fn ranked(&self) -> Vec<(StationIx, f64)> {
        let mut v: Vec<_> = self.probabilities.iter().map(|(&k, &p)| (k, p)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn mode(&self) -> Option<StationIx> {
        self.ranked().first().map(|&(s, _)| s)
    }
}

/// Crowd destination distributions keyed by (origin, slot index).
pub fn crowd_destination_distributions(
    trips: &[Trip],
    slot_width_min: u32,
) -> Result<BTreeMap<(StationIx, u32), DistributionOverDestinations>> {
    let mut counts: BTreeMap<(StationIx, u32), BTreeMap<StationIx, f64>> = BTreeMap::new();
    for t in trips {
        let slot = crate::ingest::slot_of(t.entry_time(), slot_width_min)?;
        *counts
            .entry((t.origin(), slot.index))
            .or_default()
            .entry(t.destination())
            .or_default() += 1.0;
    }
    Ok(counts
        .into_iter()
        .map(|((o, s), c)| {
            let slot = TimeSlot {
                index: s,
                width_min: slot_width_min,
            };
            ((o, s), DistributionOverDestinations::from_counts(o, Some(slot), c))
        })
        .collect())
}

/// Top-`k` destinations from `origin` with their counts as gains.
pub fn destination_popularity(
    trips: impl IntoIterator<Item = impl std::borrow::Borrow<Trip>>,
    origin: StationIx,
    k: usize,
) -> Vec<(StationIx, f64)> {
    let mut counts: BTreeMap<StationIx, f64> = BTreeMap::new();
    for t in trips {
        let t = t.borrow();
        if t.origin() == origin {
            *counts.entry(t.destination()).or_default() += 1.0;
        }
    }
    let mut v: Vec<_> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(k);
    v
}
