//! Runs a simulated train/test experiment and prints both reports.
//!
//! `cargo run --release --example experiment -- [key=value ...]`

use std::time::Instant;

use tollsense::config::RunConfig;
use tollsense::ingest::build_trips;
use tollsense::locator::{evaluate, EmpPredictor};
use tollsense::pipeline::{recover_window, train};
use tollsense::recovery::StateSequence;
use tollsense::sim::{generate_world, simulate_days};

fn main() -> tollsense::Result<()> {
    let mut cfg = RunConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        cfg.set(k, v)?;
    }
    let cfg = cfg.finish()?;
    let clock = Instant::now();
    let lap = |what: &str| eprintln!("{what}: {:.1}s", clock.elapsed().as_secs_f64());
    let world = generate_world(&cfg.sim, cfg.seed)?;
    let sim = simulate_days(&world, cfg.sim.days, cfg.seed.wrapping_add(1))?;
    lap("simulate");
    let cut = world.day_start(cfg.train_days);
    let train_tx: Vec<_> = sim.transactions.iter().filter(|t| t.exit_time < cut).cloned().collect();
    let trips = build_trips(&train_tx, cfg.crowd.slot_width_min)?;
    let rec = recover_window(&trips, &world.graph, &cfg)?;
    lap("recover");
    let truth: std::collections::BTreeMap<_, _> = sim
        .traces
        .iter()
        .map(|t| ((t.vehicle_id.clone(), t.entry_time), t))
        .collect();
    let right = trips
        .iter()
        .filter(|t| {
            rec.sequences.get(&t.id).is_some_and(|s| {
                truth[&(t.vehicle_id().to_string(), t.entry_time())].route == s.route
            })
        })
        .count();
    eprintln!("route recovery {right}/{}", trips.len());
    let seqs: Vec<StateSequence> = rec.sequences.values().cloned().collect();
    let bundle = train(&trips, &seqs, &world.graph, &world.calendar, &cfg)?;
    lap("train");
    let test: Vec<_> = sim.traces.iter().filter(|t| t.entry_time >= cut).cloned().collect();
    let trained = evaluate(&bundle, &world.graph, &test, cfg.threshold_m, cfg.interval_s)?;
    let emp = evaluate(&EmpPredictor(&bundle), &world.graph, &test, cfg.threshold_m, cfg.interval_s)?;
    lap("evaluate");
    println!("{} train trips, {} test trips", trips.len(), test.len());
    println!("trained:");
    trained.write_to(std::io::stdout())?;
    println!("emp:");
    emp.write_to(std::io::stdout())?;
    Ok(())
}
