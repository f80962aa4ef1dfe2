//! Run configuration in a `key=value` text format.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use chrono::NaiveDate;
use sha2::{Digest, Sha256};

use crate::crowd::CrowdConfig;
use crate::error::{Error, Result};
use crate::locator::{DEFAULT_INTERVAL_S, DEFAULT_THRESHOLD_M};
use crate::predictors::PredictorConfig;
use crate::recovery::RecoveryConfig;
use crate::sim::SimConfig;

/// Which location accuracy a run reports as its headline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Every vehicle; wrong routes count as misses.
    VemoA,
    /// Only vehicles whose route was predicted correctly.
    VemoR,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vemo-a" | "a" => Ok(EvalMode::VemoA),
            "vemo-r" | "r" => Ok(EvalMode::VemoR),
            _ => Err(Error::domain(format!("unknown evaluation mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::VemoA => "vemo-a",
            EvalMode::VemoR => "vemo-r",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub graph: Option<PathBuf>,
    pub transactions: Option<PathBuf>,
    pub context: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Leading simulated days used for training; the rest are held out.
    pub train_days: u32,
    pub threshold_m: f64,
    pub interval_s: f64,
    pub eval_mode: EvalMode,
    pub sim: SimConfig,
    pub crowd: CrowdConfig,
    pub recovery: RecoveryConfig,
    pub predictor: PredictorConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            train_days: 5,
            threshold_m: DEFAULT_THRESHOLD_M,
            interval_s: DEFAULT_INTERVAL_S,
            eval_mode: EvalMode::VemoA,
            sim: SimConfig::default(),
            crowd: CrowdConfig::default(),
            recovery: RecoveryConfig::default(),
            predictor: PredictorConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::domain(format!("bad value `{v}` for `{key}`")))
}

fn floats(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split_whitespace().map(|x| parse(key, x)).collect()
}

fn three(key: &str, v: &str) -> Result<[f64; 3]> {
    floats(key, v)?
        .try_into()
        .map_err(|_| Error::domain(format!("`{key}` needs three values")))
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.sim;
        let c = &mut self.crowd;
        let r = &mut self.recovery;
        let d = &mut r.discretization;
        let p = &mut self.predictor;
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "train_days" => self.train_days = parse(key, v)?,
            "threshold_m" => self.threshold_m = parse(key, v)?,
            "interval_s" => self.interval_s = parse(key, v)?,
            "eval_mode" => self.eval_mode = v.parse()?,
            "sim.stations" => s.stations = parse(key, v)?,
            "sim.edge_density" => s.edge_density = parse(key, v)?,
            "sim.spacing_km" => s.spacing_km = parse(key, v)?,
            "sim.ramp_min_m" => s.ramp_m.0 = parse(key, v)?,
            "sim.ramp_max_m" => s.ramp_m.1 = parse(key, v)?,
            "sim.speed_limits_kmh" => s.speed_limits_kmh = floats(key, v)?,
            "sim.vehicles" => s.vehicles = parse(key, v)?,
            "sim.entropy_mix" => s.entropy_mix = three(key, v)?,
            "sim.vehicle_mix" => s.vehicle_mix = three(key, v)?,
            "sim.days" => s.days = parse(key, v)?,
            "sim.start_date" => {
                s.start_date = NaiveDate::parse_from_str(v, "%Y-%m-%d")
                    .map_err(|_| Error::domain(format!("bad value `{v}` for `{key}`")))?
            }
            "sim.rain_probability" => s.rain_probability = parse(key, v)?,
            "sim.holiday_probability" => s.holiday_probability = parse(key, v)?,
            "sim.free_flow_ratio" => s.free_flow_ratio = parse(key, v)?,
            "sim.congestion_depth" => s.congestion_depth = parse(key, v)?,
            "sim.offset_sd_kmh" => s.offset_sd_kmh = parse(key, v)?,
            "sim.noise_sd_kmh" => s.noise_sd_kmh = parse(key, v)?,
            "sim.truck_offset_kmh" => s.truck_offset_kmh = parse(key, v)?,
            "sim.bus_offset_kmh" => s.bus_offset_kmh = parse(key, v)?,
            "sim.stickiness" => s.stickiness = parse(key, v)?,
            "sim.popularity_sd" => s.popularity_sd = parse(key, v)?,
            "sim.trip_length_km" => s.trip_length_km = parse(key, v)?,
            "sim.route_stretch" => s.route_stretch = parse(key, v)?,
            "sim.max_route_edges" => s.max_route_edges = parse(key, v)?,
            "sim.dwell_probability" => s.dwell_probability = parse(key, v)?,
            "crowd.slot_width_min" => c.slot_width_min = parse(key, v)?,
            "crowd.lambda" => c.lambda = parse(key, v)?,
            "crowd.components" => c.components = parse(key, v)?,
            "crowd.min_samples" => c.min_samples = parse(key, v)?,
            "crowd.max_route_edges" => c.max_route_edges = parse(key, v)?,
            "crowd.max_speed_factor" => c.max_speed_factor = parse(key, v)?,
            "recovery.slot_width_min" => d.slot_width_min = parse(key, v)?,
            "recovery.segment_length_m" => d.segment_length_m = parse(key, v)?,
            "recovery.speed_unit_kmh" => d.speed_unit_kmh = parse(key, v)?,
            "recovery.search_grid_kmh" => d.search_grid_kmh = parse(key, v)?,
            "recovery.min_speed_kmh" => d.min_speed_kmh = parse(key, v)?,
            "recovery.slack_factor" => d.slack_factor = parse(key, v)?,
            "recovery.alpha" => r.alpha = parse(key, v)?,
            "recovery.min_test_samples" => r.min_test_samples = parse(key, v)?,
            "recovery.node_budget" => r.node_budget = parse(key, v)?,
            "recovery.profiles_per_route" => r.profiles_per_route = parse(key, v)?,
            "recovery.max_route_edges" => r.max_route_edges = parse(key, v)?,
            "recovery.max_stretch" => r.max_stretch = parse(key, v)?,
            "forest.trees" => p.trees = parse(key, v)?,
            "forest.discount" => p.discount = parse(key, v)?,
            "forest.min_split_points" => p.min_split_points = parse(key, v)?,
            "forest.lifetime" => {
                p.lifetime = match v {
                    "none" | "" => None,
                    x => Some(parse(key, x)?),
                }
            }
            "predictor.route_features" => p.route_features = parse(key, v)?,
            "predictor.max_route_edges" => p.max_route_edges = parse(key, v)?,
            "paths.graph" => self.paths.graph = Some(v.into()),
            "paths.transactions" => self.paths.transactions = Some(v.into()),
            "paths.context" => self.paths.context = Some(v.into()),
            "paths.output" => self.paths.output = Some(v.into()),
            other => return Err(Error::domain(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(n + 1, "expected key=value"))?;
            cfg.set(k, v).map_err(|e| Error::parse(n + 1, e.to_string()))?;
        }
        cfg.finish()
    }

    /// Propagates the shared seed and checks every range.
    pub fn finish(mut self) -> Result<Self> {
        self.crowd.seed = self.seed;
        self.predictor.seed = self.seed;
        self.predictor.recovery = self.recovery;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.recovery.discretization.validate()?;
        crate::ingest::check_slot_width(self.crowd.slot_width_min)?;
        if self.train_days == 0 || self.train_days >= self.sim.days {
            return Err(Error::domain("train_days must leave at least one held-out day"));
        }
        if !(self.threshold_m > 0.0 && self.interval_s > 0.0) {
            return Err(Error::domain("threshold and interval must be positive"));
        }
        if !(self.crowd.lambda > 0.0) || self.crowd.components == 0 {
            return Err(Error::domain("lambda and GMM components must be positive"));
        }
        if !(self.recovery.alpha > 0.0 && self.recovery.alpha < 1.0) {
            return Err(Error::domain("alpha must lie in (0, 1)"));
        }
        if self.predictor.trees == 0 || self.predictor.route_features == 0 {
            return Err(Error::domain("forest size and route features must be positive"));
        }
        if !(0.0..1.0).contains(&self.predictor.discount) || self.predictor.min_split_points < 2 {
            return Err(Error::domain("discount must lie in [0, 1) and min_split_points be at least 2"));
        }
        Ok(())
    }

    /// Every setting except paths, one per line in a fixed order.
    pub fn canonical(&self) -> String {
        let s = &self.sim;
        let c = &self.crowd;
        let r = &self.recovery;
        let d = &r.discretization;
        let p = &self.predictor;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("train_days", self.train_days.to_string());
        kv("threshold_m", self.threshold_m.to_string());
        kv("interval_s", self.interval_s.to_string());
        kv("eval_mode", self.eval_mode.to_string());
        kv("sim.stations", s.stations.to_string());
        kv("sim.edge_density", s.edge_density.to_string());
        kv("sim.spacing_km", s.spacing_km.to_string());
        kv("sim.ramp_min_m", s.ramp_m.0.to_string());
        kv("sim.ramp_max_m", s.ramp_m.1.to_string());
        kv("sim.speed_limits_kmh", join(&s.speed_limits_kmh));
        kv("sim.vehicles", s.vehicles.to_string());
        kv("sim.entropy_mix", join(&s.entropy_mix));
        kv("sim.vehicle_mix", join(&s.vehicle_mix));
        kv("sim.days", s.days.to_string());
        kv("sim.start_date", s.start_date.format("%Y-%m-%d").to_string());
        kv("sim.rain_probability", s.rain_probability.to_string());
        kv("sim.holiday_probability", s.holiday_probability.to_string());
        kv("sim.free_flow_ratio", s.free_flow_ratio.to_string());
        kv("sim.congestion_depth", s.congestion_depth.to_string());
        kv("sim.offset_sd_kmh", s.offset_sd_kmh.to_string());
        kv("sim.noise_sd_kmh", s.noise_sd_kmh.to_string());
        kv("sim.truck_offset_kmh", s.truck_offset_kmh.to_string());
        kv("sim.bus_offset_kmh", s.bus_offset_kmh.to_string());
        kv("sim.stickiness", s.stickiness.to_string());
        kv("sim.popularity_sd", s.popularity_sd.to_string());
        kv("sim.trip_length_km", s.trip_length_km.to_string());
        kv("sim.route_stretch", s.route_stretch.to_string());
        kv("sim.max_route_edges", s.max_route_edges.to_string());
        kv("sim.dwell_probability", s.dwell_probability.to_string());
        kv("crowd.slot_width_min", c.slot_width_min.to_string());
        kv("crowd.lambda", c.lambda.to_string());
        kv("crowd.components", c.components.to_string());
        kv("crowd.min_samples", c.min_samples.to_string());
        kv("crowd.max_route_edges", c.max_route_edges.to_string());
        kv("crowd.max_speed_factor", c.max_speed_factor.to_string());
        kv("recovery.slot_width_min", d.slot_width_min.to_string());
        kv("recovery.segment_length_m", d.segment_length_m.to_string());
        kv("recovery.speed_unit_kmh", d.speed_unit_kmh.to_string());
        kv("recovery.search_grid_kmh", d.search_grid_kmh.to_string());
        kv("recovery.min_speed_kmh", d.min_speed_kmh.to_string());
        kv("recovery.slack_factor", d.slack_factor.to_string());
        kv("recovery.alpha", r.alpha.to_string());
        kv("recovery.min_test_samples", r.min_test_samples.to_string());
        kv("recovery.node_budget", r.node_budget.to_string());
        kv("recovery.profiles_per_route", r.profiles_per_route.to_string());
        kv("recovery.max_route_edges", r.max_route_edges.to_string());
        kv("recovery.max_stretch", r.max_stretch.to_string());
        kv("forest.trees", p.trees.to_string());
        kv("forest.discount", p.discount.to_string());
        kv("forest.min_split_points", p.min_split_points.to_string());
        kv("forest.lifetime", p.lifetime.map_or("none".into(), |l| l.to_string()));
        kv("predictor.route_features", p.route_features.to_string());
        kv("predictor.max_route_edges", p.max_route_edges.to_string());
        out
    }

    /// Settings plus any configured paths, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = self.canonical();
        for (k, v) in [
            ("paths.graph", &self.paths.graph),
            ("paths.transactions", &self.paths.transactions),
            ("paths.context", &self.paths.context),
            ("paths.output", &self.paths.output),
        ] {
            if let Some(p) = v {
                let _ = writeln!(out, "{k}={}", p.display());
            }
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of the canonical settings.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Comment line stamped at the top of every output file.
    pub fn stamp(&self) -> String {
        format!("# config_hash={} seed={}", self.hash(), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("sim.stations", "20").unwrap();
        cfg.set("forest.lifetime", "3.5").unwrap();
        cfg.set("eval_mode", "vemo-r").unwrap();
        cfg.set("paths.output", "out").unwrap();
        let cfg = cfg.finish().unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn hash_ignores_paths_but_not_settings() {
        let a = RunConfig::default().finish().unwrap();
        let mut b = a.clone();
        b.paths.output = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "99").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert!(a.stamp().starts_with("# config_hash="));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("nonsense").is_err());
        assert!(RunConfig::parse("unknown.key=1").is_err());
        assert!(RunConfig::parse("sim.stations=abc").is_err());
        assert!(RunConfig::parse("recovery.alpha=1.5").is_err());
        assert!(RunConfig::parse("train_days=7\nsim.days=7").is_err());
        assert!(RunConfig::parse("sim.entropy_mix=0.5 0.5").is_err());
        assert!(RunConfig::parse("# comment only\n").is_ok());
    }
}
