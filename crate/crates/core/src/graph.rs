//! Toll-station network: stations, directed edges between adjacent stations and
//! simple routes over them.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bound on the number of edges in an enumerated route.
pub const DEFAULT_MAX_EDGES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StationIx(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeIx(pub u32);

impl StationIx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl EdgeIx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TollStation {
    pub id: String,
    pub name: String,
    /// Length of the entry/exit ramp attached to the station.
    pub ramp_length_m: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub id: String,
    pub from: StationIx,
    pub to: StationIx,
    pub length_m: f64,
    pub speed_limit_kmh: f64,
}

impl Edge {
    /// Traversal time at the speed limit.
    pub fn free_flow_time_s(&self) -> f64 {
        self.length_m / kmh_to_ms(self.speed_limit_kmh)
    }
}

pub fn kmh_to_ms(v: f64) -> f64 {
    v / 3.6
}

pub fn ms_to_kmh(v: f64) -> f64 {
    v * 3.6
}

/// An ordered list of adjacent edges with no repeated station.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Route {
    edges: Vec<EdgeIx>,
}

impl Route {
    /// Validates adjacency, non-emptiness and simplicity against `graph`.
    pub fn new(graph: &HighwayGraph, edges: Vec<EdgeIx>) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::domain("route must contain at least one edge"));
        }
        let mut seen = Vec::with_capacity(edges.len() + 1);
        for (k, &e) in edges.iter().enumerate() {
            let edge = graph.try_edge(e)?;
            if k == 0 {
                seen.push(edge.from);
            } else {
                let prev = graph.edge(edges[k - 1]);
                if prev.to != edge.from {
                    return Err(Error::domain(format!(
                        "edges `{}` and `{}` are not adjacent",
                        prev.id, edge.id
                    )));
                }
            }
            if seen.contains(&edge.to) {
                return Err(Error::domain(format!(
                    "route revisits station `{}`",
                    graph.station(edge.to).id
                )));
            }
            seen.push(edge.to);
        }
        Ok(Route { edges })
    }

    /// Builds a route from edge identifiers.
    pub fn from_ids<S: AsRef<str>>(graph: &HighwayGraph, ids: &[S]) -> Result<Self> {
        let edges = ids
            .iter()
            .map(|id| graph.edge_ix(id.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Route::new(graph, edges)
    }

    pub fn edges(&self) -> &[EdgeIx] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn origin(&self, graph: &HighwayGraph) -> StationIx {
        graph.edge(self.edges[0]).from
    }

    pub fn destination(&self, graph: &HighwayGraph) -> StationIx {
        graph.edge(*self.edges.last().expect("non-empty route")).to
    }

    /// True when `self` is a strict prefix of `other`.
    pub fn is_strict_prefix_of(&self, other: &Route) -> bool {
        self.edges.len() < other.edges.len() && other.edges.starts_with(&self.edges)
    }

    /// Edge ids joined by `sep`.
    pub fn display_ids(&self, graph: &HighwayGraph, sep: &str) -> String {
        self.edges
            .iter()
            .map(|&e| graph.edge(e).id.as_str())
            .collect::<Vec<_>>()
            .join(sep)
    }
}

/// Where a travelled distance falls on a route.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutePosition {
    /// Index of the edge within the route.
    pub edge_pos: usize,
    pub edge: EdgeIx,
    /// Distance travelled inside `edge`.
    pub offset_m: f64,
    /// Cumulative distance from the route origin, clamped to the route length.
    pub distance_m: f64,
    pub arrived: bool,
}

#[derive(Clone, Debug, Default)]
pub struct HighwayGraph {
    stations: Vec<TollStation>,
    edges: Vec<Edge>,
    outgoing: Vec<Vec<EdgeIx>>,
    station_index: HashMap<String, StationIx>,
    edge_index: HashMap<String, EdgeIx>,
}

#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    stations: Vec<TollStation>,
    edges: Vec<(String, String, String, f64, f64)>,
}

impl GraphBuilder {
    pub fn station(mut self, id: &str, name: &str, ramp_length_m: f64) -> Self {
        self.add_station(id, name, ramp_length_m);
        self
    }

    pub fn edge(mut self, id: &str, from: &str, to: &str, length_m: f64, limit_kmh: f64) -> Self {
        self.add_edge(id, from, to, length_m, limit_kmh);
        self
    }

    pub fn add_station(&mut self, id: &str, name: &str, ramp_length_m: f64) {
        self.stations.push(TollStation {
            id: id.to_string(),
            name: name.to_string(),
            ramp_length_m,
        });
    }

    pub fn add_edge(&mut self, id: &str, from: &str, to: &str, length_m: f64, limit_kmh: f64) {
        self.edges
            .push((id.into(), from.into(), to.into(), length_m, limit_kmh));
    }

    pub fn build(self) -> Result<HighwayGraph> {
        let mut g = HighwayGraph::default();
        for id in self.stations.iter().map(|s| &s.id).chain(self.edges.iter().map(|e| &e.0)) {
            check_id(id)?;
        }
        for st in self.stations {
            if !(st.ramp_length_m >= 0.0 && st.ramp_length_m.is_finite()) {
                return Err(Error::InvalidGraph(format!(
                    "station `{}` has invalid ramp length {}",
                    st.id, st.ramp_length_m
                )));
            }
            let ix = StationIx(g.stations.len() as u32);
            if g.station_index.insert(st.id.clone(), ix).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate station `{}`", st.id)));
            }
            g.stations.push(st);
            g.outgoing.push(Vec::new());
        }
        for (id, from, to, length_m, limit) in self.edges {
            let from = g.station_ix(&from)?;
            let to = g.station_ix(&to)?;
            if from == to {
                return Err(Error::InvalidGraph(format!("edge `{id}` is a self-loop")));
            }
            if !(length_m > 0.0 && length_m.is_finite()) {
                return Err(Error::InvalidGraph(format!("edge `{id}` has non-positive length")));
            }
            if !(limit > 0.0 && limit.is_finite()) {
                return Err(Error::InvalidGraph(format!(
                    "edge `{id}` has non-positive speed limit"
                )));
            }
            let ix = EdgeIx(g.edges.len() as u32);
            if g.edge_index.insert(id.clone(), ix).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate edge `{id}`")));
            }
            g.outgoing[from.index()].push(ix);
            g.edges.push(Edge {
                id,
                from,
                to,
                length_m,
                speed_limit_kmh: limit,
            });
        }
        g.check_weakly_connected()?;
        Ok(g)
    }
}

/// Identifiers appear inside delimited records, so separators are banned.
fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.chars().any(|c| c.is_whitespace() || ",;:/#".contains(c)) {
        return Err(Error::InvalidGraph(format!("invalid identifier `{id}`")));
    }
    Ok(())
}

impl HighwayGraph {
    pub fn builder() -> GraphBuilder {
        GraphBuilder::default()
    }

    pub fn stations(&self) -> &[TollStation] {
        &self.stations
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn station_count(&self) -> usize {
        self.stations.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn station(&self, ix: StationIx) -> &TollStation {
        &self.stations[ix.index()]
    }

    pub fn edge(&self, ix: EdgeIx) -> &Edge {
        &self.edges[ix.index()]
    }

    pub fn try_edge(&self, ix: EdgeIx) -> Result<&Edge> {
        self.edges
            .get(ix.index())
            .ok_or_else(|| Error::UnknownEdge(format!("#{}", ix.0)))
    }

    pub fn station_ix(&self, id: &str) -> Result<StationIx> {
        self.station_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownStation(id.to_string()))
    }

    pub fn edge_ix(&self, id: &str) -> Result<EdgeIx> {
        self.edge_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownEdge(id.to_string()))
    }

    pub fn outgoing(&self, station: StationIx) -> &[EdgeIx] {
        &self.outgoing[station.index()]
    }

    fn check_weakly_connected(&self) -> Result<()> {
        let n = self.stations.len();
        if n <= 1 {
            return Ok(());
        }
        let mut undirected = vec![Vec::new(); n];
        for e in &self.edges {
            undirected[e.from.index()].push(e.to.index());
            undirected[e.to.index()].push(e.from.index());
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &undirected[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(orphan) => Err(Error::InvalidGraph(format!(
                "station `{}` is not connected to the network",
                self.stations[orphan].id
            ))),
            None => Ok(()),
        }
    }

    /// Every simple route from `origin` to `destination` with at most
    /// `max_edges` edges, shortest first, ties broken by edge-id sequence.
    pub fn enumerate_routes(
        &self,
        origin: StationIx,
        destination: StationIx,
        max_edges: usize,
    ) -> Result<Vec<Route>> {
        self.enumerate_routes_within(origin, destination, max_edges, f64::INFINITY)
    }

    /// Like [`enumerate_routes`](Self::enumerate_routes) but prunes partial
    /// routes longer than `max_length_m`.
    pub fn enumerate_routes_within(
        &self,
        origin: StationIx,
        destination: StationIx,
        max_edges: usize,
        max_length_m: f64,
    ) -> Result<Vec<Route>> {
        if origin.index() >= self.stations.len() {
            return Err(Error::UnknownStation(format!("#{}", origin.0)));
        }
        if destination.index() >= self.stations.len() {
            return Err(Error::UnknownStation(format!("#{}", destination.0)));
        }
        if origin == destination {
            return Err(Error::domain("origin and destination must differ"));
        }
        if max_edges == 0 {
            return Err(Error::domain("max_edges must be at least 1"));
        }
        let mut found: Vec<(f64, Vec<EdgeIx>)> = Vec::new();
        let mut on_path = vec![false; self.stations.len()];
        let mut path = Vec::with_capacity(max_edges);
        on_path[origin.index()] = true;
        self.dfs_routes(
            origin,
            destination,
            max_edges,
            max_length_m,
            0.0,
            &mut on_path,
            &mut path,
            &mut found,
        );
        found.sort_by(|a, b| {
            a.0.total_cmp(&b.0).then_with(|| {
                let ia = a.1.iter().map(|&e| self.edge(e).id.as_str());
                let ib = b.1.iter().map(|&e| self.edge(e).id.as_str());
                ia.cmp(ib)
            })
        });
        Ok(found.into_iter().map(|(_, edges)| Route { edges }).collect())
    }

    #[allow(clippy::too_many_arguments)]
    fn dfs_routes(
        &self,
        at: StationIx,
        destination: StationIx,
        max_edges: usize,
        max_length_m: f64,
        length: f64,
        on_path: &mut [bool],
        path: &mut Vec<EdgeIx>,
        found: &mut Vec<(f64, Vec<EdgeIx>)>,
    ) {
        if path.len() == max_edges {
            return;
        }
        for &e in self.outgoing(at) {
            let edge = self.edge(e);
            if on_path[edge.to.index()] {
                continue;
            }
            let next_len = length + edge.length_m;
            if next_len > max_length_m {
                continue;
            }
            path.push(e);
            if edge.to == destination {
                found.push((next_len, path.clone()));
            } else {
                on_path[edge.to.index()] = true;
                self.dfs_routes(
                    edge.to,
                    destination,
                    max_edges,
                    max_length_m,
                    next_len,
                    on_path,
                    path,
                    found,
                );
                on_path[edge.to.index()] = false;
            }
            path.pop();
        }
    }

    /// Total length of a route.
    pub fn route_length(&self, route: &Route) -> Result<f64> {
        if route.is_empty() {
            return Err(Error::domain("empty route"));
        }
        route
            .edges
            .iter()
            .map(|&e| self.try_edge(e).map(|edge| edge.length_m))
            .sum()
    }

    /// Travel time over the route at the speed limits.
    pub fn free_flow_time_s(&self, route: &Route) -> f64 {
        route
            .edges
            .iter()
            .map(|&e| self.edge(e).free_flow_time_s())
            .sum()
    }

    /// Maps a travelled distance onto the route.
    pub fn locate_on_route(&self, route: &Route, offset_m: f64) -> Result<RoutePosition> {
        if offset_m.is_nan() || offset_m < 0.0 {
            return Err(Error::domain(format!("negative offset {offset_m}")));
        }
        if route.is_empty() {
            return Err(Error::domain("empty route"));
        }
        let mut start = 0.0;
        for (pos, &e) in route.edges.iter().enumerate() {
            let len = self.try_edge(e)?.length_m;
            if offset_m < start + len {
                return Ok(RoutePosition {
                    edge_pos: pos,
                    edge: e,
                    offset_m: offset_m - start,
                    distance_m: offset_m,
                    arrived: false,
                });
            }
            start += len;
        }
        let last = route.edges.len() - 1;
        let e = route.edges[last];
        Ok(RoutePosition {
            edge_pos: last,
            edge: e,
            offset_m: self.edge(e).length_m,
            distance_m: start,
            arrived: true,
        })
    }

    /// Reads the line-oriented graph format.
    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut b = GraphBuilder::default();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = n + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let num = |s: &str, what: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(lineno, format!("invalid {what} `{s}`")))
            };
            match fields[0] {
                "station" if fields.len() == 4 => {
                    b.add_station(fields[1], fields[2], num(fields[3], "ramp length")?)
                }
                "edge" if fields.len() == 6 => b.add_edge(
                    fields[1],
                    fields[2],
                    fields[3],
                    num(fields[4], "length")?,
                    num(fields[5], "speed limit")?,
                ),
                other => {
                    return Err(Error::parse(
                        lineno,
                        format!("unrecognized record `{other}` with {} fields", fields.len()),
                    ))
                }
            }
        }
        b.build()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.stations {
            writeln!(w, "station,{},{},{}", s.id, s.name, s.ramp_length_m)?;
        }
        for e in &self.edges {
            writeln!(
                w,
                "edge,{},{},{},{},{}",
                e.id,
                self.station(e.from).id,
                self.station(e.to).id,
                e.length_m,
                e.speed_limit_kmh
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for StationIx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S#{}", self.0)
    }
}

/// Memoized route enumeration per origin-destination pair.
#[derive(Clone, Debug)]
pub struct RouteCatalog {
    max_edges: usize,
    routes: BTreeMap<(StationIx, StationIx), Vec<Route>>,
}

impl RouteCatalog {
    pub fn new(max_edges: usize) -> Self {
        RouteCatalog {
            max_edges,
            routes: BTreeMap::new(),
        }
    }

    pub fn max_edges(&self) -> usize {
        self.max_edges
    }

    pub fn routes(
        &mut self,
        graph: &HighwayGraph,
        origin: StationIx,
        destination: StationIx,
    ) -> Result<&[Route]> {
        if !self.routes.contains_key(&(origin, destination)) {
            let found = graph.enumerate_routes(origin, destination, self.max_edges)?;
            self.routes.insert((origin, destination), found);
        }
        Ok(&self.routes[&(origin, destination)])
    }

    /// Cached routes without computing missing pairs.
    pub fn cached(&self, origin: StationIx, destination: StationIx) -> Option<&[Route]> {
        self.routes.get(&(origin, destination)).map(Vec::as_slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> HighwayGraph {
        HighwayGraph::builder()
            .station("A", "Alpha", 0.0)
            .station("B", "Beta", 0.0)
            .station("C", "Gamma", 0.0)
            .edge("AB", "A", "B", 1000.0, 120.0)
            .edge("BC", "B", "C", 2000.0, 120.0)
            .build()
            .unwrap()
    }

    fn diamond() -> HighwayGraph {
        HighwayGraph::builder()
            .station("A", "", 0.0)
            .station("B", "", 0.0)
            .station("C", "", 0.0)
            .station("D", "", 0.0)
            .edge("AB", "A", "B", 1000.0, 120.0)
            .edge("BD", "B", "D", 1000.0, 120.0)
            .edge("AC", "A", "C", 1500.0, 120.0)
            .edge("CD", "C", "D", 1000.0, 120.0)
            .build()
            .unwrap()
    }

    #[test]
    fn chain_has_single_route() {
        let g = chain();
        let a = g.station_ix("A").unwrap();
        let c = g.station_ix("C").unwrap();
        let routes = g.enumerate_routes(a, c, 3).unwrap();
        assert_eq!(routes.len(), 1);
        assert_eq!(routes[0].display_ids(&g, " "), "AB BC");
    }

    #[test]
    fn diamond_routes_shorter_first() {
        let g = diamond();
        let a = g.station_ix("A").unwrap();
        let d = g.station_ix("D").unwrap();
        let routes = g.enumerate_routes(a, d, 2).unwrap();
        assert_eq!(routes.len(), 2);
        assert_eq!(routes[0].display_ids(&g, " "), "AB BD");
        assert_eq!(routes[1].display_ids(&g, " "), "AC CD");
        assert!(g.enumerate_routes(a, d, 1).unwrap().is_empty());
    }

    #[test]
    fn enumerate_rejects_bad_input() {
        let g = chain();
        let a = g.station_ix("A").unwrap();
        assert!(matches!(g.enumerate_routes(a, a, 3), Err(Error::Domain(_))));
        assert!(matches!(
            g.enumerate_routes(a, StationIx(1), 0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            g.enumerate_routes(a, StationIx(99), 3),
            Err(Error::UnknownStation(_))
        ));
        // no route back against the edge direction
        assert!(g.enumerate_routes(StationIx(2), a, 3).unwrap().is_empty());
    }

    #[test]
    fn route_length_adds_edges() {
        let g = chain();
        let r = Route::from_ids(&g, &["AB", "BC"]).unwrap();
        assert_eq!(g.route_length(&r).unwrap(), 3000.0);
        assert!(matches!(Route::new(&g, vec![]), Err(Error::Domain(_))));
        assert!(matches!(
            Route::from_ids(&g, &["BC", "AB"]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            Route::from_ids(&g, &["XX"]),
            Err(Error::UnknownEdge(_))
        ));
    }

    #[test]
    fn locate_examples() {
        let g = chain();
        let r = Route::from_ids(&g, &["AB", "BC"]).unwrap();
        let p = g.locate_on_route(&r, 1500.0).unwrap();
        assert_eq!((p.edge_pos, p.offset_m, p.arrived), (1, 500.0, false));
        let p = g.locate_on_route(&r, 0.0).unwrap();
        assert_eq!((p.edge_pos, p.offset_m, p.arrived), (0, 0.0, false));
        let p = g.locate_on_route(&r, 3200.0).unwrap();
        assert_eq!((p.edge_pos, p.offset_m, p.distance_m, p.arrived), (1, 2000.0, 3000.0, true));
        let p = g.locate_on_route(&r, 3000.0).unwrap();
        assert!(p.arrived);
        assert_eq!(p.offset_m, 2000.0);
        assert!(matches!(g.locate_on_route(&r, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn orphan_station_rejected() {
        let err = HighwayGraph::builder()
            .station("A", "", 0.0)
            .station("B", "", 0.0)
            .station("Z", "", 0.0)
            .edge("AB", "A", "B", 10.0, 100.0)
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::InvalidGraph(_)));
    }

    #[test]
    fn invalid_edges_rejected() {
        let base = || HighwayGraph::builder().station("A", "", 0.0).station("B", "", 0.0);
        assert!(base().edge("x", "A", "A", 1.0, 1.0).build().is_err());
        assert!(base().edge("x", "A", "B", 0.0, 1.0).build().is_err());
        assert!(base().edge("x", "A", "B", 1.0, -3.0).build().is_err());
        assert!(base().edge("x", "A", "Q", 1.0, 1.0).build().is_err());
        assert!(base().edge("a/b", "A", "B", 1.0, 1.0).build().is_err());
        assert!(base().edge("a b", "A", "B", 1.0, 1.0).build().is_err());
        assert!(HighwayGraph::builder()
            .station("A", "", -1.0)
            .build()
            .is_err());
    }

    #[test]
    fn file_format_round_trip() {
        let g = diamond();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let text = format!("# comment\n\n{}", String::from_utf8(buf).unwrap());
        let back = HighwayGraph::read_from(text.as_bytes()).unwrap();
        assert_eq!(back.stations(), g.stations());
        assert_eq!(back.edges(), g.edges());
        let err = HighwayGraph::read_from("station,A,x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
