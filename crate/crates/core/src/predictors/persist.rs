//! Bundle directory: manifest, forests as JSON, tables as delimited text.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use super::{CrowdTables, HistoryStore, PastTrip, PredictorBundle, PredictorConfig, TrainingMeta};
use crate::crowd::SpeedMap;
use crate::error::{Error, Result};
use crate::forest::MondrianForest;
use crate::graph::{HighwayGraph, RouteCatalog, StationIx};
use crate::ingest::{Calendar, Timestamp};
use crate::recovery::SpeedReference;

const BUNDLE_FORMAT: &str = "1";
const TABLES_HEADER: &str = "kind,origin,destination,slot,values";
const HISTORY_HEADER: &str =
    "vehicle_id,origin,destination,entry_time,exit_time,quiet,route,duration_s,speed_kmh,residual_kmh";
const FEEDBACK_HEADER: &str = "vehicle_id,entry_time";

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn open(dir: &Path, name: &str) -> Result<BufReader<File>> {
    File::open(dir.join(name))
        .map(BufReader::new)
        .map_err(|e| Error::Missing(format!("{}: {e}", dir.join(name).display())))
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn save_bundle(bundle: &PredictorBundle, graph: &HighwayGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let st = |s: StationIx| graph.station(s).id.as_str();

    let mut m = create(dir, "manifest.txt")?;
    let meta = &bundle.meta;
    let labels: Vec<&str> = bundle.dest_labels.iter().map(|&s| st(s)).collect();
    writeln!(m, "format={BUNDLE_FORMAT}")?;
    writeln!(m, "config_hash={}", meta.config_hash)?;
    writeln!(m, "seed={}", bundle.config.seed)?;
    writeln!(m, "window_start={}", meta.window_start)?;
    writeln!(m, "window_end={}", meta.window_end)?;
    writeln!(m, "trips={}", meta.trips)?;
    writeln!(m, "d_updates={}", meta.d_updates)?;
    writeln!(m, "r_updates={}", meta.r_updates)?;
    writeln!(m, "s_updates={}", meta.s_updates)?;
    writeln!(m, "next_trip={}", bundle.next_trip)?;
    writeln!(m, "stations={}", graph.station_count())?;
    writeln!(m, "speedmap_slot_min={}", bundle.tables.speed_map.slot_width_min)?;
    writeln!(m, "destination_labels={}", labels.join(" "))?;
    writeln!(m, "config={}", serde_json::to_string(&bundle.config)?)?;
    m.flush()?;

    for (name, f) in [("d_forest.json", &bundle.d), ("r_forest.json", &bundle.r), ("s_forest.json", &bundle.s)] {
        fs::write(dir.join(name), f.to_json()?)?;
    }

    let t = &bundle.tables;
    bundle.tables.speed_map.write_to(create(dir, "speedmap.csv")?, graph)?;
    let mut w = create(dir, "crowd_tables.csv")?;
    writeln!(w, "{TABLES_HEADER}")?;
    for ((o, slot), v) in &t.destinations {
        writeln!(w, "dest,{},,{slot},{}", st(*o), join(v))?;
    }
    for (o, v) in &t.destinations_any {
        writeln!(w, "dest_any,{},,,{}", st(*o), join(v))?;
    }
    for ((o, d, slot), v) in &t.routes {
        writeln!(w, "route,{},{},{slot},{}", st(*o), st(*d), join(v))?;
    }
    for ((o, d), v) in &t.routes_any {
        writeln!(w, "route_any,{},{},,{}", st(*o), st(*d), join(v))?;
    }
    for ((o, d, slot), (sum, n)) in &t.durations {
        writeln!(w, "duration,{},{},{slot},{}", st(*o), st(*d), join(&[*sum, *n]))?;
    }
    w.flush()?;

    let mut w = create(dir, "history.csv")?;
    writeln!(w, "{HISTORY_HEADER}")?;
    for (v, trips) in bundle.history.vehicles() {
        for p in trips {
            writeln!(
                w,
                "{v},{},{},{},{},{},{},{},{},{}",
                st(p.origin),
                st(p.destination),
                p.entry_time.0,
                p.exit_time.0,
                u8::from(p.quiet),
                p.route.map(|r| r.to_string()).unwrap_or_default(),
                p.duration_s,
                opt(p.speed_kmh),
                opt(p.residual_kmh)
            )?;
        }
    }
    w.flush()?;

    bundle.calendar.write_to(create(dir, "context.csv")?)?;

    let mut w = create(dir, "feedback.csv")?;
    writeln!(w, "{FEEDBACK_HEADER}")?;
    for (v, t) in &bundle.seen {
        writeln!(w, "{v},{t}")?;
    }
    w.flush()?;
    Ok(())
}

fn data_lines<R: BufRead>(r: R, header: &str, what: &str) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    let mut seen = false;
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen {
            if line.trim() != header {
                return Err(Error::parse(n + 1, format!("missing {what} header")));
            }
            seen = true;
            continue;
        }
        out.push((n + 1, line));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::parse(line, format!("bad {what} `{s}`")))
}

fn opt_num(s: &str, line: usize, what: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        num(s, line, what).map(Some)
    }
}

fn values(s: &str, line: usize) -> Result<Vec<f64>> {
    s.split(';').map(|x| num(x, line, "value")).collect()
}

pub fn load_bundle(dir: &Path, graph: &HighwayGraph) -> Result<PredictorBundle> {
    let mut kv = BTreeMap::new();
    for (n, line) in open(dir, "manifest.txt")?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(n + 1, "expected key=value"))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| kv.get(k).map(String::as_str).ok_or_else(|| Error::Missing(format!("manifest key `{k}`")));
    if get("format")? != BUNDLE_FORMAT {
        return Err(Error::Schema(format!("unsupported bundle format {}", get("format")?)));
    }
    let stations: usize = num(get("stations")?, 0, "stations")?;
    if stations != graph.station_count() {
        return Err(Error::Schema(format!(
            "bundle was trained on {stations} stations, graph has {}",
            graph.station_count()
        )));
    }
    let config: PredictorConfig = serde_json::from_str(get("config")?)?;
    let ts = |k: &str| -> Result<Timestamp> { get(k)?.parse().map_err(|_| Error::Schema(format!("bad {k}"))) };
    let meta = TrainingMeta {
        window_start: ts("window_start")?,
        window_end: ts("window_end")?,
        trips: num(get("trips")?, 0, "trips")?,
        config_hash: get("config_hash")?.to_string(),
        d_updates: num(get("d_updates")?, 0, "d_updates")?,
        r_updates: num(get("r_updates")?, 0, "r_updates")?,
        s_updates: num(get("s_updates")?, 0, "s_updates")?,
    };
    if meta.config_hash != config.hash() {
        return Err(Error::Schema("config hash does not match the stored config".into()));
    }
    let dest_labels = get("destination_labels")?
        .split_whitespace()
        .map(|s| graph.station_ix(s))
        .collect::<Result<Vec<_>>>()?;
    let forest = |name: &str| -> Result<MondrianForest> {
        MondrianForest::from_json(&fs::read_to_string(dir.join(name)).map_err(|e| Error::Missing(format!("{name}: {e}")))?)
    };

    let speed_map = SpeedMap::read_from(
        open(dir, "speedmap.csv")?,
        graph,
        num(get("speedmap_slot_min")?, 0, "speedmap_slot_min")?,
    )?;
    let mut tables = CrowdTables {
        n_stations: stations,
        destinations: BTreeMap::new(),
        destinations_any: BTreeMap::new(),
        routes: BTreeMap::new(),
        routes_any: BTreeMap::new(),
        durations: BTreeMap::new(),
        speed_map,
    };
    for (n, line) in data_lines(open(dir, "crowd_tables.csv")?, TABLES_HEADER, "crowd table")? {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::parse(n, "wrong field count"));
        }
        let o = graph.station_ix(f[1])?;
        let v = values(f[4], n)?;
        match f[0] {
            "dest" => {
                tables.destinations.insert((o, num(f[3], n, "slot")?), v);
            }
            "dest_any" => {
                tables.destinations_any.insert(o, v);
            }
            "route" => {
                tables.routes.insert((o, graph.station_ix(f[2])?, num(f[3], n, "slot")?), v);
            }
            "route_any" => {
                tables.routes_any.insert((o, graph.station_ix(f[2])?), v);
            }
            "duration" if v.len() == 2 => {
                tables.durations.insert((o, graph.station_ix(f[2])?, num(f[3], n, "slot")?), (v[0], v[1]));
            }
            other => return Err(Error::parse(n, format!("bad table row `{other}`"))),
        }
    }

    let mut history = HistoryStore::default();
    for (n, line) in data_lines(open(dir, "history.csv")?, HISTORY_HEADER, "history")? {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(Error::parse(n, "wrong field count"));
        }
        history.push(
            f[0],
            PastTrip {
                origin: graph.station_ix(f[1])?,
                destination: graph.station_ix(f[2])?,
                entry_time: Timestamp(num(f[3], n, "entry_time")?),
                exit_time: Timestamp(num(f[4], n, "exit_time")?),
                quiet: f[5] == "1",
                route: if f[6].is_empty() { None } else { Some(num(f[6], n, "route")?) },
                duration_s: num(f[7], n, "duration")?,
                speed_kmh: opt_num(f[8], n, "speed")?,
                residual_kmh: opt_num(f[9], n, "residual")?,
            },
        );
    }

    let calendar = Calendar::read_from(open(dir, "context.csv")?)?;
    let mut seen = BTreeSet::new();
    for (n, line) in data_lines(open(dir, "feedback.csv")?, FEEDBACK_HEADER, "feedback")? {
        let (v, t) = line.rsplit_once(',').ok_or_else(|| Error::parse(n, "wrong field count"))?;
        seen.insert((v.to_string(), num(t, n, "entry_time")?));
    }
    let reference = SpeedReference::from_speed_map(&tables.speed_map, graph);
    Ok(PredictorBundle {
        catalog: Mutex::new(RouteCatalog::new(config.max_route_edges)),
        next_trip: num(get("next_trip")?, 0, "next_trip")?,
        d: forest("d_forest.json")?,
        r: forest("r_forest.json")?,
        s: forest("s_forest.json")?,
        config,
        meta,
        dest_labels,
        tables,
        history,
        calendar,
        seen,
        reference,
    })
}
