use tollsense::graph::HighwayGraph;

const ITERATIONS: usize = 300;

/// Road distances between every pair of stations; unreachable pairs get the
/// largest finite distance.
fn road_distances(graph: &HighwayGraph) -> Vec<Vec<f64>> {
    let n = graph.station_count();
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for e in graph.edges() {
        let (a, b) = (e.from.index(), e.to.index());
        d[a][b] = d[a][b].min(e.length_m);
        d[b][a] = d[b][a].min(e.length_m);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    let far = d.iter().flatten().copied().filter(|x| x.is_finite()).fold(1.0, f64::max);
    for x in d.iter_mut().flatten() {
        if !x.is_finite() {
            *x = far;
        }
    }
    d
}

/// Station coordinates in [0.05, 0.95]² whose Euclidean distances follow
/// road distances, by SMACOF stress majorization from a circle.
pub fn station_layout(graph: &HighwayGraph) -> Vec<(f64, f64)> {
    let n = graph.station_count();
    if n == 0 {
        return Vec::new();
    }
    let d = road_distances(graph);
    let scale = d.iter().flatten().copied().fold(1.0, f64::max);
    let mut p: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            (0.5 * scale * a.cos(), 0.5 * scale * a.sin())
        })
        .collect();
    for _ in 0..ITERATIONS {
        let next: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let (mut x, mut y) = (0.0, 0.0);
                for j in (0..n).filter(|&j| j != i) {
                    let (dx, dy) = (p[i].0 - p[j].0, p[i].1 - p[j].1);
                    let norm = (dx * dx + dy * dy).sqrt();
                    let b = if norm > 1e-12 { d[i][j] / norm } else { 0.0 };
                    x += b * dx;
                    y += b * dy;
                }
                (x / n as f64, y / n as f64)
            })
            .collect();
        p = next;
    }
    let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
    for &(x, y) in &p {
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
    }
    let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-9);
    p.into_iter()
        .map(|(x, y)| (0.05 + 0.9 * (x - lo.0) / span, 0.05 + 0.9 * (y - lo.1) / span))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_is_laid_out_in_order() {
        let g = HighwayGraph::builder()
            .station("A", "A", 0.0)
            .station("B", "B", 0.0)
            .station("C", "C", 0.0)
            .edge("AB", "A", "B", 1000.0, 100.0)
            .edge("BC", "B", "C", 1000.0, 100.0)
            .build()
            .unwrap();
        let p = station_layout(&g);
        let dist = |a: usize, b: usize| ((p[a].0 - p[b].0).powi(2) + (p[a].1 - p[b].1).powi(2)).sqrt();
        assert!((dist(0, 1) - dist(1, 2)).abs() < 1e-3);
        assert!((dist(0, 2) - 2.0 * dist(0, 1)).abs() < 1e-2, "{p:?}");
        assert!(p.iter().all(|&(x, y)| (0.05 - 1e-9..=0.95 + 1e-9).contains(&x) && (0.05 - 1e-9..=0.95 + 1e-9).contains(&y)));
    }
}
