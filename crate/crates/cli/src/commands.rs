use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use tollsense::config::{EvalMode, RunConfig};
use tollsense::graph::HighwayGraph;
use tollsense::ingest::{build_trips, parse_transactions, write_transactions, Calendar, RoutedTrip, Timestamp, Transaction, Trip};
use tollsense::locator::{evaluate, predict_locations, write_location_trace, EmpPredictor, EvaluationReport};
use tollsense::pipeline::{initial_speed_map, recover_window, train, unambiguous_trips};
use tollsense::predictors::{load_bundle, save_bundle, PredictorBundle, TripQuery};
use tollsense::recovery::{read_recovered, write_recovered, StateSequence};
use tollsense::sim::{generate_world, simulate_days, write_traces, GroundTruthTrace};
use tollsense::{stats, Error, VehicleType};

use crate::PredictArgs;

/// A machine-readable failure: a short kind and a human message.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::UnknownStation(_) | Error::UnknownEdge(_) | Error::UnknownVehicle(_) => "unknown-id",
            Error::Domain(_) | Error::UndefinedCorrelation(_) => "domain",
            Error::InvalidGraph(_) => "invalid-graph",
            Error::Parse { .. } | Error::Serde(_) => "parse",
            Error::Schema(_) => "schema",
            Error::InsufficientSamples { .. } => "insufficient-samples",
            Error::Untrained => "untrained",
            Error::Duplicate(_) => "duplicate",
            Error::Missing(_) => "missing",
            Error::Invariant(_) => "invariant",
            Error::Io(_) => "io",
        };
        Failure {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn missing(what: &str, path: &Path, producer: &str) -> Failure {
    Failure {
        kind: "missing",
        message: format!("missing {what}: {} (run `{producer}` first)", path.display()),
    }
}

const GRAPH: &str = "graph.csv";
const TRANSACTIONS: &str = "transactions.csv";
const CONTEXT: &str = "context.csv";
const TRACES: &str = "traces.csv";
const TRUTH: &str = "truth.jsonl";
const TRAIN: &str = "train.csv";
const TEST: &str = "test.csv";
const REJECTS: &str = "rejects.csv";
const SPEEDMAP: &str = "speedmap.csv";
const RECOVERED: &str = "recovered.csv";
const BUNDLE: &str = "bundle";
const PREDICTIONS: &str = "predictions.csv";

pub struct Context {
    cfg: RunConfig,
    out: PathBuf,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Self {
        let out = cfg.paths.output.clone().unwrap_or_else(|| PathBuf::from("out"));
        Context { cfg, out }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn open(&self, path: &Path, what: &str, producer: &str) -> Result<BufReader<File>> {
        File::open(path)
            .map(BufReader::new)
            .map_err(|_| missing(what, path, producer))
    }

    /// Writes `name` under the output directory, stamped with the config hash and seed.
    fn write(&self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> tollsense::Result<()>) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        let path = self.path(name);
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "{}", self.cfg.stamp())?;
        body(&mut w)?;
        w.flush()?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn graph(&self) -> Result<HighwayGraph> {
        let path = self.cfg.paths.graph.clone().unwrap_or_else(|| self.path(GRAPH));
        Ok(HighwayGraph::read_from(self.open(&path, "graph", "simulate")?)?)
    }

    fn calendar(&self) -> Result<Calendar> {
        let path = self.cfg.paths.context.clone().unwrap_or_else(|| self.path(CONTEXT));
        Ok(Calendar::read_from(self.open(&path, "context", "simulate")?)?)
    }

    fn read_transactions(&self, name: &str, graph: &HighwayGraph) -> Result<Vec<Transaction>> {
        let parsed = parse_transactions(self.open(&self.path(name), "ingested transactions", "ingest")?, graph)?;
        if let Some(r) = parsed.rejected.first() {
            return Err(Error::Parse {
                line: r.line,
                reason: format!("{}: {}", r.reason, r.detail),
            }
            .into());
        }
        Ok(parsed.accepted)
    }

    fn train_trips(&self, graph: &HighwayGraph) -> Result<Vec<Trip>> {
        let txs = self.read_transactions(TRAIN, graph)?;
        Ok(build_trips(&txs, self.cfg.crowd.slot_width_min)?)
    }

    fn recovered(&self, graph: &HighwayGraph, trips: &[Trip]) -> Result<Vec<StateSequence>> {
        let r = self.open(&self.path(RECOVERED), "recovered trips", "recover")?;
        Ok(read_recovered(r, graph, trips, &self.cfg.recovery.discretization)?)
    }

    fn bundle(&self, graph: &HighwayGraph) -> Result<PredictorBundle> {
        let dir = self.path(BUNDLE);
        if !dir.join("manifest.txt").exists() {
            return Err(missing("trained bundle", &dir, "train"));
        }
        Ok(load_bundle(&dir, graph)?)
    }

    pub fn simulate(&self, trace_step: i64) -> Result<()> {
        let world = generate_world(&self.cfg.sim, self.cfg.seed)?;
        let sim = simulate_days(&world, self.cfg.sim.days, self.cfg.seed.wrapping_add(1))?;
        self.write(GRAPH, |w| world.graph.write_to(w))?;
        self.write(TRANSACTIONS, |w| write_transactions(w, &sim.transactions, &world.graph))?;
        self.write(CONTEXT, |w| world.calendar.write_to(w))?;
        self.write(TRACES, |w| write_traces(w, &sim.traces, trace_step))?;
        self.write(TRUTH, |w| {
            for t in &sim.traces {
                serde_json::to_writer(&mut *w, t)?;
                writeln!(w)?;
            }
            Ok(())
        })?;
        println!(
            "{} stations, {} edges, {} trips over {} days",
            world.graph.station_count(),
            world.graph.edge_count(),
            sim.transactions.len(),
            self.cfg.sim.days
        );
        Ok(())
    }

    pub fn ingest(&self) -> Result<()> {
        let graph = self.graph()?;
        let calendar = self.calendar()?;
        let path = self.cfg.paths.transactions.clone().unwrap_or_else(|| self.path(TRANSACTIONS));
        let parsed = parse_transactions(self.open(&path, "transactions", "simulate")?, &graph)?;
        let first = calendar
            .records()
            .next()
            .ok_or_else(|| Error::Missing("context records".into()))?
            .date;
        let cut = Timestamp::from_date_seconds(first, i64::from(self.cfg.train_days) * 86_400);
        let train: Vec<Transaction> = parsed.accepted.iter().filter(|t| t.exit_time < cut).cloned().collect();
        let test: Vec<Transaction> = parsed.accepted.iter().filter(|t| t.entry_time >= cut).cloned().collect();
        self.write(TRAIN, |w| write_transactions(w, &train, &graph))?;
        self.write(TEST, |w| write_transactions(w, &test, &graph))?;
        self.write(REJECTS, |w| {
            writeln!(w, "line,reason,detail")?;
            for r in &parsed.rejected {
                writeln!(w, "{},{},{}", r.line, r.reason, r.detail.replace(',', ";"))?;
            }
            Ok(())
        })?;
        println!(
            "{} accepted ({} train, {} test, cut {cut}), {} rejected",
            parsed.accepted.len(),
            train.len(),
            test.len(),
            parsed.rejected.len()
        );
        Ok(())
    }

    pub fn speedmap(&self) -> Result<()> {
        let graph = self.graph()?;
        let trips = self.train_trips(&graph)?;
        let map = initial_speed_map(&trips, &graph, &self.cfg.crowd, &self.cfg.recovery)?;
        self.write(SPEEDMAP, |w| map.write_to(w, &graph))?;
        let covered = map.cells.values().filter(|c| !c.fallback).count();
        println!("{} cells, {covered} estimated from samples", map.cells.len());
        Ok(())
    }

    pub fn recover(&self) -> Result<()> {
        let graph = self.graph()?;
        let trips = self.train_trips(&graph)?;
        let res = recover_window(&trips, &graph, &self.cfg)?;
        self.write(RECOVERED, |w| write_recovered(w, &graph, res.sequences.values()))?;
        println!(
            "{} of {} trips recovered, {} normality tests accepted, {} nodes{}",
            res.sequences.len(),
            trips.len(),
            res.accepted_tests(),
            res.nodes,
            if res.bounded { " (budget reached)" } else { "" }
        );
        Ok(())
    }

    pub fn train(&self) -> Result<()> {
        let graph = self.graph()?;
        let calendar = self.calendar()?;
        let trips = self.train_trips(&graph)?;
        let recovered = self.recovered(&graph, &trips)?;
        let bundle = train(&trips, &recovered, &graph, &calendar, &self.cfg)?;
        let dir = self.path(BUNDLE);
        save_bundle(&bundle, &graph, &dir)?;
        self.write(&format!("{BUNDLE}/run.txt"), |w| Ok(write!(w, "{}", self.cfg.canonical())?))?;
        println!("trained on {} trips, bundle in {}", bundle.meta.trips, dir.display());
        Ok(())
    }

    pub fn predict(&self, args: &PredictArgs) -> Result<()> {
        let graph = self.graph()?;
        let bundle = self.bundle(&graph)?;
        let queries = match (&args.vehicle, &args.entrance, &args.time) {
            (Some(v), Some(e), Some(t)) => vec![TripQuery {
                vehicle_id: v.clone(),
                vehicle_type: args
                    .vehicle_type
                    .parse::<VehicleType>()
                    .map_err(|_| Error::Domain(format!("unknown vehicle type `{}`", args.vehicle_type)))?,
                entrance: graph.station_ix(e)?,
                t0: t
                    .parse()
                    .map_err(|_| Error::Domain(format!("bad time `{t}`, expected YYYY-MM-DD HH:MM:SS")))?,
            }],
            _ => self
                .read_transactions(TEST, &graph)?
                .into_iter()
                .map(|tx| TripQuery {
                    vehicle_id: tx.vehicle_id,
                    vehicle_type: tx.vehicle_type,
                    entrance: tx.entry_station,
                    t0: tx.entry_time,
                })
                .collect(),
        };
        let trips = queries
            .iter()
            .map(|q| predict_locations(&bundle, &graph, q, self.cfg.interval_s))
            .collect::<tollsense::Result<Vec<_>>>()?;
        self.write(PREDICTIONS, |w| write_location_trace(w, &graph, &trips))?;
        if let [one] = trips.as_slice() {
            println!(
                "destination {}, route {}, arrival {}",
                graph.station(one.destination).id,
                one.route.display_ids(&graph, " "),
                Timestamp(one.estimates.last().map_or(one.query.t0.0, |e| e.t_s.round() as i64))
            );
        } else {
            println!("{} trips predicted", trips.len());
        }
        Ok(())
    }

    pub fn evaluate(&self) -> Result<()> {
        let graph = self.graph()?;
        let bundle = self.bundle(&graph)?;
        let path = self.path(TRUTH);
        let mut traces = Vec::new();
        for (n, line) in self.open(&path, "ground-truth traces", "simulate")?.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let t: GroundTruthTrace = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: n + 1,
                reason: e.to_string(),
            })?;
            if t.entry_time > bundle.meta.window_end {
                traces.push(t);
            }
        }
        if traces.is_empty() {
            return Err(Error::Missing("ground-truth traces after the training window".into()).into());
        }
        let (th, iv) = (self.cfg.threshold_m, self.cfg.interval_s);
        let trained = evaluate(&bundle, &graph, &traces, th, iv)?;
        let emp = evaluate(&EmpPredictor(&bundle), &graph, &traces, th, iv)?;
        self.write("report.csv", |w| trained.write_to(w))?;
        self.write("report_emp.csv", |w| emp.write_to(w))?;
        let headline = |r: &EvaluationReport| match self.cfg.eval_mode {
            EvalMode::VemoA => Some(r.location_accuracy_all),
            EvalMode::VemoR => r.location_accuracy_routed,
        };
        let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "{} test trips; {} location accuracy {} (Emp {}), destination {:.4} (Emp {:.4}), speed {:.4} (Emp {:.4})",
            trained.trips,
            self.cfg.eval_mode,
            show(headline(&trained)),
            show(headline(&emp)),
            trained.destination_accuracy,
            emp.destination_accuracy,
            trained.speed_accuracy,
            emp.speed_accuracy
        );
        Ok(())
    }

    pub fn stats(&self) -> Result<()> {
        let graph = self.graph()?;
        let trips = self.train_trips(&graph)?;
        let slot_width = self.cfg.crowd.slot_width_min;

        let mut by_vehicle: BTreeMap<&str, Vec<&Trip>> = BTreeMap::new();
        for t in &trips {
            by_vehicle.entry(t.vehicle_id()).or_default().push(t);
        }
        self.write("stats_entropy.csv", |w| {
            writeln!(w, "vehicle_id,trips,entropy_bits")?;
            for (v, ts) in &by_vehicle {
                let history: Vec<Trip> = ts.iter().map(|t| (*t).clone()).collect();
                writeln!(w, "{v},{},{:.6}", ts.len(), stats::destination_entropy(&history)?)?;
            }
            Ok(())
        })?;

        let recovered = match self.recovered(&graph, &trips) {
            Ok(r) => Some(r),
            Err(f) if f.kind == "missing" => None,
            Err(f) => return Err(f),
        };
        let routed: Vec<RoutedTrip> = match &recovered {
            Some(seqs) => {
                let by_id: BTreeMap<_, _> = trips.iter().map(|t| (t.id, t)).collect();
                seqs.iter()
                    .filter_map(|s| {
                        by_id.get(&s.trip).map(|t| RoutedTrip {
                            trip: (*t).clone(),
                            route: s.route.clone(),
                        })
                    })
                    .collect()
            }
            None => unambiguous_trips(&trips, &graph, &self.cfg.recovery)?,
        };
        let columns = [Some(1), Some(2), None]
            .map(|k| stats::edge_coverage(&routed, &graph, k, slot_width))
            .into_iter()
            .collect::<tollsense::Result<Vec<_>>>()?;
        self.write("stats_coverage.csv", |w| {
            writeln!(w, "slot,single_edge,up_to_two_edges,all")?;
            for (s, ((a, b), c)) in columns[0].iter().zip(&columns[1]).zip(&columns[2]).enumerate() {
                writeln!(w, "{s},{a:.4},{b:.4},{c:.4}")?;
            }
            Ok(())
        })?;

        if let Some(seqs) = &recovered {
            let by_id: BTreeMap<_, _> = trips.iter().map(|t| (t.id, t)).collect();
            let mut speeds: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            for s in seqs {
                let Some(t) = by_id.get(&s.trip) else { continue };
                let (len, weighted) = s.route.edges().iter().fold((0.0, 0.0), |(l, w), &e| {
                    let edge = graph.edge(e);
                    (l + edge.length_m, w + edge.length_m * edge.speed_limit_kmh)
                });
                let entry = speeds.entry(t.vehicle_id()).or_default();
                entry.0.push(s.mean_speed_kmh());
                entry.1.push(weighted / len);
            }
            self.write("stats_speed.csv", |w| {
                writeln!(w, "vehicle_id,trips,mean_kmh,s_limit,s_historical,s_trip")?;
                for (v, (sp, lim)) in &speeds {
                    if sp.len() < 2 {
                        continue;
                    }
                    let s = stats::speed_std_variants(sp, stats::mean(lim))?;
                    writeln!(
                        w,
                        "{v},{},{:.3},{:.3},{:.3},{:.3}",
                        sp.len(),
                        stats::mean(sp),
                        s.limit,
                        s.historical,
                        s.trip
                    )?;
                }
                Ok(())
            })?;
        }
        Ok(())
    }
}
