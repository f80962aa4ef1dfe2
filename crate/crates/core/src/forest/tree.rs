use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::{PointStore, Task};

pub(crate) struct Ctx {
    pub task: Task,
    pub lifetime: Option<f64>,
    pub min_split: usize,
    pub n_classes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Node {
    parent: Option<u32>,
    children: Option<[u32; 2]>,
    dim: u32,
    loc: f64,
    /// Split time; `None` on leaves.
    tau: Option<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    /// Class counts, or `[n, sum, sum of squares]`.
    raw: Vec<f64>,
    /// Counts used by the hierarchical smoothing (classification only).
    smooth: Vec<f64>,
    points: Vec<u32>,
}

impl Node {
    fn leaf(parent: Option<u32>, x: &[f64]) -> Self {
        Self {
            parent,
            children: None,
            dim: 0,
            loc: 0.0,
            tau: None,
            lower: x.to_vec(),
            upper: x.to_vec(),
            raw: Vec::new(),
            smooth: Vec::new(),
            points: Vec::new(),
        }
    }

    fn stretch(&mut self, x: &[f64]) {
        for ((l, u), v) in self.lower.iter_mut().zip(&mut self.upper).zip(x) {
            *l = l.min(*v);
            *u = u.max(*v);
        }
    }

    fn child_for(&self, x: &[f64]) -> u32 {
        let [l, r] = self.children.expect("internal node");
        if x[self.dim as usize] <= self.loc {
            l
        } else {
            r
        }
    }

    /// Total distance by which `x` falls outside the box.
    fn extension(&self, x: &[f64]) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .zip(x)
            .map(|((l, u), v)| (l - v).max(0.0) + (v - u).max(0.0))
            .sum()
    }
}

/// Snapshot of one node for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeView {
    pub parent: Option<usize>,
    pub children: Option<[usize; 2]>,
    pub split_dim: Option<usize>,
    pub split_loc: Option<f64>,
    pub tau: Option<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct Tree {
    nodes: Vec<Node>,
    root: Option<u32>,
    rng: ChaCha8Rng,
}

fn pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            if u < *w {
                return i;
            }
            u -= w;
            last = i;
        }
    }
    last
}

fn uniform_between(a: f64, b: f64, rng: &mut ChaCha8Rng) -> f64 {
    let v = a + (b - a) * rng.random::<f64>();
    v.clamp(a.min(b), a.max(b))
}

fn exp_sample(rate: f64, rng: &mut ChaCha8Rng) -> f64 {
    if rate > 0.0 && rate.is_finite() {
        Exp::new(rate).expect("positive rate").sample(rng)
    } else {
        f64::INFINITY
    }
}

fn posterior(counts: &[f64], discount: f64, base: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return base.to_vec();
    }
    let tables: f64 = counts.iter().map(|c| c.min(1.0)).sum();
    base.iter()
        .enumerate()
        .map(|(k, b)| {
            let c = counts.get(k).copied().unwrap_or(0.0);
            (c - discount * c.min(1.0) + discount * tables * b) / total
        })
        .collect()
}

fn gini_weighted(counts: &[f64]) -> f64 {
    let n: f64 = counts.iter().sum();
    if n <= 0.0 {
        return 0.0;
    }
    n - counts.iter().map(|c| c * c).sum::<f64>() / n
}

fn sse(raw: &[f64]) -> f64 {
    if raw[0] <= 0.0 {
        return 0.0;
    }
    (raw[2] - raw[1] * raw[1] / raw[0]).max(0.0)
}

impl Tree {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::new(),
            root: None,
            rng,
        }
    }

    fn tau_of(&self, j: u32, ctx_lifetime: Option<f64>) -> f64 {
        self.nodes[j as usize]
            .tau
            .unwrap_or(ctx_lifetime.unwrap_or(f64::INFINITY))
    }

    fn parent_tau(&self, j: u32) -> f64 {
        self.nodes[j as usize]
            .parent
            .and_then(|p| self.nodes[p as usize].tau)
            .unwrap_or(0.0)
    }

    fn paused(&self, points: &[u32], extra: Option<f64>, store: &PointStore, ctx: &Ctx) -> bool {
        match ctx.task {
            Task::Classification => {
                let mut labels = points.iter().map(|p| store.y[*p as usize]).chain(extra);
                match labels.next() {
                    Some(first) => labels.all(|y| y == first),
                    None => true,
                }
            }
            Task::Regression => points.len() + usize::from(extra.is_some()) < ctx.min_split,
        }
    }

    fn push(&mut self, node: Node) -> u32 {
        self.nodes.push(node);
        (self.nodes.len() - 1) as u32
    }

    pub fn extend(&mut self, store: &PointStore, ix: u32, ctx: &Ctx) {
        let x = &store.x[ix as usize];
        let y = store.y[ix as usize];
        let Some(mut j) = self.root else {
            let mut leaf = Node::leaf(None, x);
            leaf.points.push(ix);
            let r = self.push(leaf);
            self.root = Some(r);
            self.refresh_upward(r, store, ctx);
            return;
        };
        loop {
            let node = &self.nodes[j as usize];
            let is_leaf = node.children.is_none();
            if is_leaf && self.paused(&node.points, Some(y), store, ctx) {
                let node = &mut self.nodes[j as usize];
                node.stretch(x);
                node.points.push(ix);
                self.refresh_upward(j, store, ctx);
                return;
            }
            let rate = node.extension(x);
            let tau_par = self.parent_tau(j);
            let e = exp_sample(rate, &mut self.rng);
            if tau_par + e < self.tau_of(j, ctx.lifetime) {
                let leaf = self.insert_parent(j, ix, x, tau_par + e);
                self.refresh_upward(leaf, store, ctx);
                return;
            }
            self.nodes[j as usize].stretch(x);
            if is_leaf {
                self.nodes[j as usize].points.push(ix);
                self.sample_block(j, store, ctx);
                self.refresh_upward(j, store, ctx);
                return;
            }
            j = self.nodes[j as usize].child_for(x);
        }
    }

    /// Places a new split above `j` separating `x`; returns the new leaf.
    fn insert_parent(&mut self, j: u32, ix: u32, x: &[f64], tau: f64) -> u32 {
        let node = &self.nodes[j as usize];
        let ext: Vec<f64> = node
            .lower
            .iter()
            .zip(&node.upper)
            .zip(x)
            .map(|((l, u), v)| (l - v).max(0.0) + (v - u).max(0.0))
            .collect();
        let d = pick(&ext, &mut self.rng);
        let (l, u) = (node.lower[d], node.upper[d]);
        let loc = if x[d] > u {
            uniform_between(u, x[d], &mut self.rng)
        } else {
            uniform_between(x[d], l, &mut self.rng)
        };
        let grand = node.parent;
        let mut p = node.clone();
        p.stretch(x);
        p.parent = grand;
        p.tau = Some(tau);
        p.dim = d as u32;
        p.loc = loc;
        p.points = Vec::new();
        let p_ix = self.push(p);
        let mut leaf = Node::leaf(Some(p_ix), x);
        leaf.points.push(ix);
        let k = self.push(leaf);
        let children = if x[d] > loc { [j, k] } else { [k, j] };
        self.nodes[p_ix as usize].children = Some(children);
        match grand {
            Some(g) => {
                let c = self.nodes[g as usize].children.as_mut().expect("internal parent");
                for slot in c.iter_mut() {
                    if *slot == j {
                        *slot = p_ix;
                    }
                }
            }
            None => self.root = Some(p_ix),
        }
        self.nodes[j as usize].parent = Some(p_ix);
        k
    }

    /// Grows a fresh Mondrian subtree on the points stored in leaf `j`.
    fn sample_block(&mut self, j: u32, store: &PointStore, ctx: &Ctx) {
        let mut stack = vec![j];
        let mut created = Vec::new();
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            if self.paused(&node.points, None, store, ctx) {
                continue;
            }
            let widths: Vec<f64> = node.lower.iter().zip(&node.upper).map(|(l, u)| u - l).collect();
            let rate: f64 = widths.iter().sum();
            let tau = self.parent_tau(n) + exp_sample(rate, &mut self.rng);
            if !tau.is_finite() || ctx.lifetime.is_some_and(|l| tau >= l) {
                continue;
            }
            let d = pick(&widths, &mut self.rng);
            let loc = uniform_between(node.lower[d], node.upper[d], &mut self.rng);
            let (left, right): (Vec<u32>, Vec<u32>) =
                node.points.iter().partition(|p| store.x[**p as usize][d] <= loc);
            if left.is_empty() || right.is_empty() {
                continue;
            }
            let mut kids = [0u32; 2];
            for (slot, pts) in kids.iter_mut().zip([left, right]) {
                let mut leaf = Node::leaf(Some(n), &store.x[pts[0] as usize]);
                for p in &pts[1..] {
                    leaf.stretch(&store.x[*p as usize]);
                }
                leaf.points = pts;
                *slot = self.push(leaf);
                stack.push(*slot);
                created.push(*slot);
            }
            let node = &mut self.nodes[n as usize];
            node.children = Some(kids);
            node.tau = Some(tau);
            node.dim = d as u32;
            node.loc = loc;
            node.points = Vec::new();
        }
        // children were pushed after their parents, so reverse order is bottom-up
        for n in created.into_iter().rev() {
            self.refresh(n, store, ctx);
        }
    }

    fn refresh(&mut self, j: u32, store: &PointStore, ctx: &Ctx) {
        let node = &self.nodes[j as usize];
        let (raw, smooth) = match (node.children, ctx.task) {
            (None, Task::Classification) => {
                let mut c = vec![0.0; ctx.n_classes];
                for p in &node.points {
                    c[store.y[*p as usize] as usize] += 1.0;
                }
                (c.clone(), c)
            }
            (None, Task::Regression) => {
                let mut r = vec![0.0; 3];
                for p in &node.points {
                    let y = store.y[*p as usize];
                    r[0] += 1.0;
                    r[1] += y;
                    r[2] += y * y;
                }
                (r, Vec::new())
            }
            (Some([a, b]), task) => {
                let (na, nb) = (&self.nodes[a as usize], &self.nodes[b as usize]);
                let width = match task {
                    Task::Classification => ctx.n_classes,
                    Task::Regression => 3,
                };
                let get = |v: &Vec<f64>, k: usize| v.get(k).copied().unwrap_or(0.0);
                let raw = (0..width).map(|k| get(&na.raw, k) + get(&nb.raw, k)).collect();
                let smooth = match task {
                    Task::Classification => (0..width)
                        .map(|k| get(&na.smooth, k).min(1.0) + get(&nb.smooth, k).min(1.0))
                        .collect(),
                    Task::Regression => Vec::new(),
                };
                (raw, smooth)
            }
        };
        let node = &mut self.nodes[j as usize];
        node.raw = raw;
        node.smooth = smooth;
    }

    fn refresh_upward(&mut self, from: u32, store: &PointStore, ctx: &Ctx) {
        let mut cur = Some(from);
        while let Some(j) = cur {
            self.refresh(j, store, ctx);
            cur = self.nodes[j as usize].parent;
        }
    }

    pub fn class_posterior(&self, x: &[f64], k: usize, discount: f64, lifetime: Option<f64>) -> Vec<f64> {
        let mut out = vec![0.0; k];
        let Some(mut j) = self.root else {
            return vec![1.0 / k as f64; k];
        };
        let mut g_par = vec![1.0 / k as f64; k];
        let mut p_keep = 1.0;
        loop {
            let node = &self.nodes[j as usize];
            let eta = node.extension(x);
            let delta = self.tau_of(j, lifetime) - self.parent_tau(j);
            let p_sep = if eta > 0.0 {
                if delta.is_finite() {
                    1.0 - (-delta * eta).exp()
                } else {
                    1.0
                }
            } else {
                0.0
            };
            if p_sep > 0.0 {
                let tables: Vec<f64> = node.smooth.iter().map(|c| c.min(1.0)).collect();
                let g_new = posterior(&tables, discount, &g_par);
                for (o, g) in out.iter_mut().zip(g_new) {
                    *o += p_keep * p_sep * g;
                }
            }
            let g_j = posterior(&node.smooth, discount, &g_par);
            match node.children {
                None => {
                    for (o, g) in out.iter_mut().zip(g_j) {
                        *o += p_keep * (1.0 - p_sep) * g;
                    }
                    break;
                }
                Some(_) => {
                    p_keep *= 1.0 - p_sep;
                    g_par = g_j;
                    j = node.child_for(x);
                }
            }
        }
        out
    }

    /// Mean and variance of the responses in the leaf that `x` routes to.
    pub fn leaf_moments(&self, x: &[f64]) -> (f64, f64) {
        let mut j = self.root.expect("trained tree");
        while self.nodes[j as usize].children.is_some() {
            j = self.nodes[j as usize].child_for(x);
        }
        let r = &self.nodes[j as usize].raw;
        let mean = r[1] / r[0];
        (mean, (r[2] / r[0] - mean * mean).max(0.0))
    }

    pub fn split_gains(&self, task: Task) -> Vec<(usize, f64)> {
        self.nodes
            .iter()
            .filter_map(|n| {
                let [a, b] = n.children?;
                let (na, nb) = (&self.nodes[a as usize], &self.nodes[b as usize]);
                let gain = match task {
                    Task::Classification => gini_weighted(&n.raw) - gini_weighted(&na.raw) - gini_weighted(&nb.raw),
                    Task::Regression => sse(&n.raw) - sse(&na.raw) - sse(&nb.raw),
                };
                Some((n.dim as usize, gain))
            })
            .collect()
    }

    pub fn views(&self) -> Vec<NodeView> {
        self.nodes
            .iter()
            .map(|n| NodeView {
                parent: n.parent.map(|p| p as usize),
                children: n.children.map(|[a, b]| [a as usize, b as usize]),
                split_dim: n.children.map(|_| n.dim as usize),
                split_loc: n.children.map(|_| n.loc),
                tau: n.tau,
                lower: n.lower.clone(),
                upper: n.upper.clone(),
                points: if n.children.is_some() {
                    0
                } else {
                    n.points.len()
                },
            })
            .collect()
    }

    pub fn check(&self, store: &PointStore, task: Task, k: usize) -> Result<(), String> {
        let Some(root) = self.root else {
            return if store.y.is_empty() {
                Ok(())
            } else {
                Err("no root".into())
            };
        };
        if self.nodes[root as usize].parent.is_some() {
            return Err("root has a parent".into());
        }
        let mut seen = vec![false; store.y.len()];
        let mut stack = vec![root];
        while let Some(j) = stack.pop() {
            let n = &self.nodes[j as usize];
            let tau_par = self.parent_tau(j);
            match n.children {
                Some([a, b]) => {
                    let tau = n.tau.ok_or("internal node without split time")?;
                    if !(tau > tau_par) {
                        return Err(format!("node {j}: split time {tau} not above parent {tau_par}"));
                    }
                    let d = n.dim as usize;
                    if n.loc < n.lower[d] || n.loc > n.upper[d] {
                        return Err(format!("node {j}: split outside bounds"));
                    }
                    for c in [a, b] {
                        if self.nodes[c as usize].parent != Some(j) {
                            return Err(format!("node {c}: wrong parent link"));
                        }
                    }
                    stack.extend([a, b]);
                }
                None => {
                    if n.tau.is_some() {
                        return Err(format!("leaf {j} has a split time"));
                    }
                    let mut expected = vec![0.0; if task == Task::Regression { 3 } else { k }];
                    for p in &n.points {
                        let pi = *p as usize;
                        if std::mem::replace(&mut seen[pi], true) {
                            return Err(format!("point {pi} stored twice"));
                        }
                        let x = &store.x[pi];
                        // replay the route from the root
                        let mut r = root;
                        loop {
                            let rn = &self.nodes[r as usize];
                            let inside = rn
                                .lower
                                .iter()
                                .zip(&rn.upper)
                                .zip(x)
                                .all(|((l, u), v)| l <= v && v <= u);
                            if !inside {
                                return Err(format!("point {pi} outside box of node {r}"));
                            }
                            if rn.children.is_none() {
                                break;
                            }
                            r = rn.child_for(x);
                        }
                        if r != j {
                            return Err(format!("point {pi} routes to {r}, stored in {j}"));
                        }
                        let y = store.y[pi];
                        match task {
                            Task::Classification => expected[y as usize] += 1.0,
                            Task::Regression => {
                                expected[0] += 1.0;
                                expected[1] += y;
                                expected[2] += y * y;
                            }
                        }
                    }
                    let ok = expected
                        .iter()
                        .enumerate()
                        .all(|(i, e)| (n.raw.get(i).copied().unwrap_or(0.0) - e).abs() <= 1e-9 * e.abs().max(1.0));
                    if !ok {
                        return Err(format!("leaf {j}: statistics disagree with stored points"));
                    }
                }
            }
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            return Err(format!("point {p} not stored in any leaf"));
        }
        Ok(())
    }
}
