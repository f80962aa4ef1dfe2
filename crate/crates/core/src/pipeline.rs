//! End-to-end wiring: crowd speeds, recovery, training, evaluation.

use crate::config::RunConfig;
use crate::crowd::{estimate_slot_distributions, CrowdConfig, SpeedMap};
use crate::error::{Error, Result};
use crate::graph::{HighwayGraph, RouteCatalog};
use crate::ingest::{build_trips, Calendar, RoutedTrip, Transaction, Trip};
use crate::locator::{evaluate, EmpPredictor, EvaluationReport};
use crate::predictors::{train_bundle, PredictorBundle, TrainingTrip};
use crate::recovery::{recover_routes_and_speeds, RecoveryConfig, RecoveryResult, SpeedReference, StateSequence};
use crate::sim::{generate_world, simulate_days, GroundTruthTrace, Simulation, World};

/// Trips whose station pair admits a single candidate route.
pub fn unambiguous_trips(trips: &[Trip], graph: &HighwayGraph, cfg: &RecoveryConfig) -> Result<Vec<RoutedTrip>> {
    let mut catalog = RouteCatalog::new(cfg.max_route_edges);
    let mut out = Vec::new();
    for t in trips {
        let routes = catalog.routes(graph, t.origin(), t.destination())?;
        let Some(first) = routes.first() else { continue };
        let shortest = graph.route_length(first)?;
        let mut within = routes
            .iter()
            .filter(|r| graph.route_length(r).is_ok_and(|l| l <= cfg.max_stretch * shortest + 1e-9));
        if let (Some(r), None) = (within.next(), within.next()) {
            out.push(RoutedTrip {
                trip: t.clone(),
                route: r.clone(),
            });
        }
    }
    Ok(out)
}

/// Crowd speed map from the unambiguous trips alone.
pub fn initial_speed_map(trips: &[Trip], graph: &HighwayGraph, crowd: &CrowdConfig, rec: &RecoveryConfig) -> Result<SpeedMap> {
    estimate_slot_distributions(&unambiguous_trips(trips, graph, rec)?, graph, crowd)
}

/// Recovers every trip against a reference built from the initial crowd map.
pub fn recover_window(trips: &[Trip], graph: &HighwayGraph, cfg: &RunConfig) -> Result<RecoveryResult> {
    let map = initial_speed_map(trips, graph, &cfg.crowd, &cfg.recovery)?;
    let reference = SpeedReference::from_speed_map(&map, graph);
    recover_routes_and_speeds(trips, graph, &cfg.recovery, Some(&reference))
}

/// Crowd map rebuilt from every recovered route.
pub fn recovered_speed_map(
    trips: &[Trip],
    recovered: &[StateSequence],
    graph: &HighwayGraph,
    crowd: &CrowdConfig,
) -> Result<SpeedMap> {
    let by_id: std::collections::BTreeMap<_, _> = trips.iter().map(|t| (t.id, t)).collect();
    let routed: Vec<RoutedTrip> = recovered
        .iter()
        .filter_map(|s| {
            by_id.get(&s.trip).map(|t| RoutedTrip {
                trip: (*t).clone(),
                route: s.route.clone(),
            })
        })
        .collect();
    estimate_slot_distributions(&routed, graph, crowd)
}

/// Trains a bundle from trips and their recovered sequences.
pub fn train(
    trips: &[Trip],
    recovered: &[StateSequence],
    graph: &HighwayGraph,
    calendar: &Calendar,
    cfg: &RunConfig,
) -> Result<PredictorBundle> {
    if recovered.is_empty() {
        return Err(Error::Missing("recovered trips".into()));
    }
    let map = recovered_speed_map(trips, recovered, graph, &cfg.crowd)?;
    let by_trip: std::collections::BTreeMap<_, _> = recovered.iter().map(|s| (s.trip, s)).collect();
    let window: Vec<TrainingTrip> = trips
        .iter()
        .map(|t| TrainingTrip {
            trip: t.clone(),
            recovered: by_trip.get(&t.id).map(|s| (*s).clone()),
        })
        .collect();
    train_bundle(&window, graph, calendar, map, &cfg.predictor)
}

/// Splits transactions at the first instant of day `train_days` of the world.
pub fn split_window<'a>(
    world: &World,
    txs: &'a [Transaction],
    train_days: u32,
) -> (Vec<&'a Transaction>, Vec<&'a Transaction>) {
    let cut = world.day_start(train_days);
    txs.iter().partition(|t| t.exit_time < cut)
}

/// A simulated run: world, transactions and traces, trained bundle, and
/// scores of the bundle and of Emp on the held-out days.
pub struct Experiment {
    pub world: World,
    pub simulation: Simulation,
    pub train_trips: Vec<Trip>,
    pub recovery: RecoveryResult,
    pub bundle: PredictorBundle,
    pub test_traces: Vec<GroundTruthTrace>,
    pub trained: EvaluationReport,
    pub emp: EvaluationReport,
}

pub fn run_experiment(cfg: &RunConfig) -> Result<Experiment> {
    cfg.validate()?;
    let world = generate_world(&cfg.sim, cfg.seed)?;
    let simulation = simulate_days(&world, cfg.sim.days, cfg.seed.wrapping_add(1))?;
    let cut = world.day_start(cfg.train_days);
    let train_tx: Vec<Transaction> = simulation
        .transactions
        .iter()
        .filter(|t| t.exit_time < cut)
        .cloned()
        .collect();
    let train_trips = build_trips(&train_tx, cfg.crowd.slot_width_min)?;
    let recovery = recover_window(&train_trips, &world.graph, cfg)?;
    let seqs: Vec<StateSequence> = recovery.sequences.values().cloned().collect();
    let bundle = train(&train_trips, &seqs, &world.graph, &world.calendar, cfg)?;
    let test_traces: Vec<GroundTruthTrace> = simulation
        .traces
        .iter()
        .filter(|t| t.entry_time >= cut)
        .cloned()
        .collect();
    let trained = evaluate(&bundle, &world.graph, &test_traces, cfg.threshold_m, cfg.interval_s)?;
    let emp = evaluate(&EmpPredictor(&bundle), &world.graph, &test_traces, cfg.threshold_m, cfg.interval_s)?;
    Ok(Experiment {
        world,
        simulation,
        train_trips,
        recovery,
        bundle,
        test_traces,
        trained,
        emp,
    })
}
