//! Toll transaction parsing, validation and indexing into trips.
//!
//! Timestamps are naive local time with one-second resolution.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{HighwayGraph, StationIx};

pub const TRANSACTION_HEADER: &str =
    "vehicle_id,vehicle_type,entry_station,entry_time,exit_station,exit_time,axle_count,weight_kg";
pub const CONTEXT_HEADER: &str = "date,day_of_week,is_holiday,weather";

const TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";
const SECONDS_PER_DAY: i64 = 86_400;

/// Seconds since 1970-01-01 00:00:00 local time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn from_datetime(dt: NaiveDateTime) -> Self {
        Timestamp(dt.and_utc().timestamp())
    }

    pub fn from_date_seconds(date: NaiveDate, seconds_of_day: i64) -> Self {
        let midnight = date.and_hms_opt(0, 0, 0).expect("midnight exists");
        Timestamp(Self::from_datetime(midnight).0 + seconds_of_day)
    }

    pub fn datetime(self) -> NaiveDateTime {
        chrono::DateTime::from_timestamp(self.0, 0)
            .expect("timestamp in chrono range")
            .naive_utc()
    }

    pub fn date(self) -> NaiveDate {
        self.datetime().date()
    }

    pub fn seconds_of_day(self) -> i64 {
        self.0.rem_euclid(SECONDS_PER_DAY)
    }

    pub fn day_number(self) -> i64 {
        self.0.div_euclid(SECONDS_PER_DAY)
    }

    pub fn plus(self, seconds: i64) -> Self {
        Timestamp(self.0 + seconds)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.datetime().format(TIME_FORMAT))
    }
}

impl FromStr for Timestamp {
    type Err = chrono::ParseError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        NaiveDateTime::parse_from_str(s, TIME_FORMAT).map(Timestamp::from_datetime)
    }
}

/// A fixed-width window of the day.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeSlot {
    pub index: u32,
    pub width_min: u32,
}

impl TimeSlot {
    pub fn slots_per_day(width_min: u32) -> u32 {
        1440 / width_min
    }

    pub fn start_seconds(self) -> i64 {
        self.index as i64 * self.width_min as i64 * 60
    }
}

pub fn check_slot_width(width_min: u32) -> Result<()> {
    if width_min == 0 || 1440 % width_min != 0 {
        return Err(Error::domain(format!(
            "slot width {width_min} min does not divide a day"
        )));
    }
    Ok(())
}

/// Slot of the day containing `time`.
pub fn slot_of(time: Timestamp, width_min: u32) -> Result<TimeSlot> {
    check_slot_width(width_min)?;
    Ok(TimeSlot {
        index: (time.seconds_of_day() / (60 * width_min as i64)) as u32,
        width_min,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VehicleType {
    Car,
    Bus,
    Truck,
}

impl VehicleType {
    pub const ALL: [VehicleType; 3] = [VehicleType::Car, VehicleType::Bus, VehicleType::Truck];

    pub fn code(self) -> u32 {
        self as u32
    }
}

impl fmt::Display for VehicleType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VehicleType::Car => "Car",
            VehicleType::Bus => "Bus",
            VehicleType::Truck => "Truck",
        })
    }
}

impl FromStr for VehicleType {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "Car" => Ok(VehicleType::Car),
            "Bus" => Ok(VehicleType::Bus),
            "Truck" => Ok(VehicleType::Truck),
            _ => Err(()),
        }
    }
}

/// One billing record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub vehicle_id: String,
    pub vehicle_type: VehicleType,
    pub entry_station: StationIx,
    pub exit_station: StationIx,
    pub entry_time: Timestamp,
    pub exit_time: Timestamp,
    pub axle_count: u8,
    pub weight_kg: f64,
}

impl Transaction {
    pub fn duration_s(&self) -> i64 {
        self.exit_time.0 - self.entry_time.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RejectReason {
    Malformed,
    UnknownStation,
    UnknownVehicleType,
    NonPositiveDuration,
    SameStation,
    InvalidAxleCount,
    InvalidWeight,
    Duplicate,
    Overlapping,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::Malformed => "malformed record",
            RejectReason::UnknownStation => "unknown station",
            RejectReason::UnknownVehicleType => "unknown vehicle type",
            RejectReason::NonPositiveDuration => "non-positive duration",
            RejectReason::SameStation => "entry and exit station are equal",
            RejectReason::InvalidAxleCount => "invalid axle count",
            RejectReason::InvalidWeight => "invalid weight",
            RejectReason::Duplicate => "duplicate record",
            RejectReason::Overlapping => "overlaps an earlier trip of the same vehicle",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RejectReport {
    pub line: usize,
    pub reason: RejectReason,
    pub detail: String,
}

/// Accepted transactions in input order, plus a report for every rejected line.
#[derive(Clone, Debug, Default)]
pub struct ParsedTransactions {
    pub accepted: Vec<Transaction>,
    pub rejected: Vec<RejectReport>,
}

/// Parses the transaction file format. Record-level problems become
/// [`RejectReport`]s; only I/O failures and a wrong header abort.
pub fn parse_transactions<R: BufRead>(reader: R, graph: &HighwayGraph) -> Result<ParsedTransactions> {
    let mut out = ParsedTransactions::default();
    let mut header_seen = false;
    let mut seen_keys: HashSet<(String, Timestamp)> = HashSet::new();
    let mut intervals: HashMap<String, Vec<(Timestamp, Timestamp)>> = HashMap::new();

    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            if line.trim() != TRANSACTION_HEADER {
                return Err(Error::parse(lineno, "missing transaction header"));
            }
            header_seen = true;
            continue;
        }
        match parse_record(line, graph) {
            Err((reason, detail)) => out.rejected.push(RejectReport {
                line: lineno,
                reason,
                detail,
            }),
            Ok(tx) => {
                let key = (tx.vehicle_id.clone(), tx.entry_time);
                if seen_keys.contains(&key) {
                    out.rejected.push(RejectReport {
                        line: lineno,
                        reason: RejectReason::Duplicate,
                        detail: format!("{} at {}", tx.vehicle_id, tx.entry_time),
                    });
                    continue;
                }
                let spans = intervals.entry(tx.vehicle_id.clone()).or_default();
                if spans
                    .iter()
                    .any(|&(a, b)| tx.entry_time < b && a < tx.exit_time)
                {
                    out.rejected.push(RejectReport {
                        line: lineno,
                        reason: RejectReason::Overlapping,
                        detail: format!("{} at {}", tx.vehicle_id, tx.entry_time),
                    });
                    continue;
                }
                spans.push((tx.entry_time, tx.exit_time));
                seen_keys.insert(key);
                out.accepted.push(tx);
            }
        }
    }
    if !header_seen {
        return Err(Error::parse(0, "empty transaction stream"));
    }
    Ok(out)
}

fn parse_record(
    line: &str,
    graph: &HighwayGraph,
) -> std::result::Result<Transaction, (RejectReason, String)> {
    let f: Vec<&str> = line.split(',').map(str::trim).collect();
    if f.len() != 8 {
        return Err((
            RejectReason::Malformed,
            format!("expected 8 fields, found {}", f.len()),
        ));
    }
    if f[0].is_empty() {
        return Err((RejectReason::Malformed, "empty vehicle id".into()));
    }
    let vehicle_type = f[1]
        .parse::<VehicleType>()
        .map_err(|_| (RejectReason::UnknownVehicleType, f[1].to_string()))?;
    let station = |s: &str| {
        graph
            .station_ix(s)
            .map_err(|_| (RejectReason::UnknownStation, s.to_string()))
    };
    let time = |s: &str| {
        s.parse::<Timestamp>()
            .map_err(|e| (RejectReason::Malformed, format!("bad timestamp `{s}`: {e}")))
    };
    let entry_station = station(f[2])?;
    let entry_time = time(f[3])?;
    let exit_station = station(f[4])?;
    let exit_time = time(f[5])?;
    let axle_count = f[6]
        .parse::<u8>()
        .ok()
        .filter(|&a| a > 0)
        .ok_or_else(|| (RejectReason::InvalidAxleCount, f[6].to_string()))?;
    let weight_kg = f[7]
        .parse::<f64>()
        .ok()
        .filter(|w| w.is_finite() && *w >= 0.0)
        .ok_or_else(|| (RejectReason::InvalidWeight, f[7].to_string()))?;
    if exit_time <= entry_time {
        return Err((
            RejectReason::NonPositiveDuration,
            format!("{entry_time} -> {exit_time}"),
        ));
    }
    if entry_station == exit_station {
        return Err((RejectReason::SameStation, f[2].to_string()));
    }
    Ok(Transaction {
        vehicle_id: f[0].to_string(),
        vehicle_type,
        entry_station,
        exit_station,
        entry_time,
        exit_time,
        axle_count,
        weight_kg,
    })
}

pub fn transaction_line(tx: &Transaction, graph: &HighwayGraph) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        tx.vehicle_id,
        tx.vehicle_type,
        graph.station(tx.entry_station).id,
        tx.entry_time,
        graph.station(tx.exit_station).id,
        tx.exit_time,
        tx.axle_count,
        tx.weight_kg
    )
}

pub fn write_transactions<W: Write>(
    mut w: W,
    txs: &[Transaction],
    graph: &HighwayGraph,
) -> Result<()> {
    writeln!(w, "{TRANSACTION_HEADER}")?;
    for tx in txs {
        writeln!(w, "{}", transaction_line(tx, graph))?;
    }
    Ok(())
}

pub type TripId = usize;

/// A transaction with derived duration and entry slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub id: TripId,
    pub transaction: Transaction,
    pub duration_s: i64,
    pub origin_slot: TimeSlot,
}

impl Trip {
    pub fn new(id: TripId, transaction: Transaction, slot_width_min: u32) -> Result<Self> {
        let duration_s = transaction.duration_s();
        if duration_s <= 0 {
            return Err(Error::domain("non-positive duration"));
        }
        let origin_slot = slot_of(transaction.entry_time, slot_width_min)?;
        Ok(Trip {
            id,
            transaction,
            duration_s,
            origin_slot,
        })
    }

    pub fn origin(&self) -> StationIx {
        self.transaction.entry_station
    }

    pub fn destination(&self) -> StationIx {
        self.transaction.exit_station
    }

    pub fn entry_time(&self) -> Timestamp {
        self.transaction.entry_time
    }

    pub fn vehicle_id(&self) -> &str {
        &self.transaction.vehicle_id
    }
}

/// A trip paired with the route it is known or believed to have taken.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedTrip {
    pub trip: Trip,
    pub route: crate::graph::Route,
}

/// Wraps transactions as trips, numbering them in input order.
pub fn build_trips(txs: &[Transaction], slot_width_min: u32) -> Result<Vec<Trip>> {
    txs.iter()
        .enumerate()
        .map(|(i, tx)| Trip::new(i, tx.clone(), slot_width_min))
        .collect()
}

/// Trips grouped by vehicle, each list sorted by entry time.
pub fn build_vehicle_history(trips: &[Trip]) -> BTreeMap<String, Vec<Trip>> {
    let mut map: BTreeMap<String, Vec<Trip>> = BTreeMap::new();
    for t in trips {
        map.entry(t.transaction.vehicle_id.clone())
            .or_default()
            .push(t.clone());
    }
    for list in map.values_mut() {
        list.sort_by_key(|t| (t.transaction.entry_time, t.transaction.exit_time));
    }
    map
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Weather {
    Clear,
    Rain,
    HeavyRain,
}

impl Weather {
    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn is_rain(self) -> bool {
        !matches!(self, Weather::Clear)
    }
}

impl fmt::Display for Weather {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weather::Clear => "Clear",
            Weather::Rain => "Rain",
            Weather::HeavyRain => "HeavyRain",
        })
    }
}

impl FromStr for Weather {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "Clear" => Ok(Weather::Clear),
            "Rain" => Ok(Weather::Rain),
            "HeavyRain" => Ok(Weather::HeavyRain),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub date: NaiveDate,
    /// 1 = Monday .. 7 = Sunday.
    pub day_of_week: u8,
    pub is_weekend: bool,
    pub is_holiday: bool,
    pub weather: Weather,
}

impl ContextRecord {
    pub fn new(date: NaiveDate, is_holiday: bool, weather: Weather) -> Self {
        let day_of_week = date.weekday().number_from_monday() as u8;
        ContextRecord {
            date,
            day_of_week,
            is_weekend: day_of_week >= 6,
            is_holiday,
            weather,
        }
    }
}

/// Per-date context, one record per date.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Calendar {
    records: BTreeMap<NaiveDate, ContextRecord>,
}

impl Calendar {
    pub fn from_records(records: impl IntoIterator<Item = ContextRecord>) -> Result<Self> {
        let mut cal = Calendar::default();
        for r in records {
            if cal.records.insert(r.date, r).is_some() {
                return Err(Error::Duplicate(format!("context date {}", r.date)));
            }
        }
        Ok(cal)
    }

    pub fn get(&self, date: NaiveDate) -> Option<&ContextRecord> {
        self.records.get(&date)
    }

    /// Record for `date`, or a clear non-holiday default when absent.
    pub fn context(&self, date: NaiveDate) -> ContextRecord {
        self.records
            .get(&date)
            .copied()
            .unwrap_or_else(|| ContextRecord::new(date, false, Weather::Clear))
    }

    pub fn records(&self) -> impl Iterator<Item = &ContextRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut records = Vec::new();
        let mut header_seen = false;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = n + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            if !header_seen {
                if line.trim() != CONTEXT_HEADER {
                    return Err(Error::parse(lineno, "missing context header"));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(Error::parse(lineno, "expected 4 fields"));
            }
            let date = NaiveDate::parse_from_str(f[0], "%Y-%m-%d")
                .map_err(|e| Error::parse(lineno, format!("bad date: {e}")))?;
            let dow: u8 = f[1]
                .parse()
                .map_err(|_| Error::parse(lineno, "bad day_of_week"))?;
            let is_holiday = match f[2] {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(Error::parse(lineno, format!("bad is_holiday `{other}`"))),
            };
            let weather = f[3]
                .parse::<Weather>()
                .map_err(|_| Error::parse(lineno, format!("bad weather `{}`", f[3])))?;
            let rec = ContextRecord::new(date, is_holiday, weather);
            if rec.day_of_week != dow {
                return Err(Error::parse(
                    lineno,
                    format!("day_of_week {dow} inconsistent with {date}"),
                ));
            }
            records.push(rec);
        }
        Calendar::from_records(records)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CONTEXT_HEADER}")?;
        for r in self.records.values() {
            writeln!(
                w,
                "{},{},{},{}",
                r.date.format("%Y-%m-%d"),
                r.day_of_week,
                u8::from(r.is_holiday),
                r.weather
            )?;
        }
        Ok(())
    }
}
