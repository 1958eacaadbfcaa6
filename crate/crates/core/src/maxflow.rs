//! Exact binary MRF minimization (unary + non-negative Potts) by min-cut.
//!
//! Label 1 (foreground) is the source side of the cut. Terminal capacities
//! are normalized per node by subtracting the smaller of the two unary
//! costs, which shifts the energy by a constant and keeps capacities
//! non-negative. A [`GraphCut`] keeps its residual graph so a re-solve with
//! new unaries continues from the previous flow.

use std::collections::VecDeque;

use crate::edges::EdgeWeightMap;
use crate::error::{Error, Result};
use crate::grid::{Grid, MaskMap};

const EPS: f64 = 1e-12;

/// Binary labeling problem on the 8-connected pixel grid.
#[derive(Clone, Debug)]
pub struct BinaryMrf {
    /// Cost of labeling each pixel background (0).
    pub cost_bg: Grid<f64>,
    /// Cost of labeling each pixel foreground (1).
    pub cost_fg: Grid<f64>,
    /// Potts weight per edge, paid when the endpoints disagree.
    pub pairwise: EdgeWeightMap,
    /// Hard labels; `Some(label)` pixels are not optimized.
    pub fixed: Option<Grid<Option<bool>>>,
}

impl BinaryMrf {
    pub fn new(cost_bg: Grid<f64>, cost_fg: Grid<f64>, pairwise: EdgeWeightMap) -> Self {
        Self {
            cost_bg,
            cost_fg,
            pairwise,
            fixed: None,
        }
    }

    /// Unary-only energy `sum_p data_p * (1 - s_p)`: the data term is the
    /// cost of calling a pixel background.
    pub fn from_background_costs(data: &Grid<f64>, pairwise: EdgeWeightMap) -> Self {
        let zero = Grid::new(data.width(), data.height(), 0.0);
        Self::new(data.clone(), zero, pairwise)
    }

    pub fn with_fixed(mut self, fixed: Grid<Option<bool>>) -> Self {
        self.fixed = Some(fixed);
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        self.cost_bg.dims()
    }

    #[inline]
    fn fixed_at(&self, i: usize) -> Option<bool> {
        self.fixed.as_ref().and_then(|f| f.data()[i])
    }

    /// Energy of a full labeling (fixed pixels should carry their fixed label).
    pub fn energy(&self, labeling: &MaskMap) -> f64 {
        let mut e = 0.0;
        for (i, &s) in labeling.data().iter().enumerate() {
            e += if s { self.cost_fg.data()[i] } else { self.cost_bg.data()[i] };
        }
        for (p, q, w) in self.pairwise.edges() {
            if labeling[p] != labeling[q] {
                e += w;
            }
        }
        e
    }

    fn validate(&self) -> Result<()> {
        let dims = self.dims();
        if self.cost_fg.dims() != dims || self.pairwise.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                actual: self.cost_fg.dims(),
            });
        }
        if let Some(f) = &self.fixed {
            if f.dims() != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    actual: f.dims(),
                });
            }
        }
        for (_, _, w) in self.pairwise.edges() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::NegativeWeight(w));
            }
        }
        if self
            .cost_bg
            .iter()
            .chain(self.cost_fg.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument("non-finite unary cost".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Arc {
    to: usize,
    rev: usize,
    cap: f64,
}

/// Residual flow network with explicit source and sink nodes.
#[derive(Clone, Debug)]
struct FlowGraph {
    adj: Vec<Vec<usize>>,
    arcs: Vec<Arc>,
    source: usize,
    sink: usize,
    level: Vec<i32>,
    cursor: Vec<usize>,
}

impl FlowGraph {
    fn new(nodes: usize) -> Self {
        let n = nodes + 2;
        Self {
            adj: vec![Vec::new(); n],
            arcs: Vec::new(),
            source: nodes,
            sink: nodes + 1,
            level: vec![0; n],
            cursor: vec![0; n],
        }
    }

    /// Adds `a -> b` with `cap_ab` and `b -> a` with `cap_ba`; returns the
    /// index of the forward arc.
    fn add_edge(&mut self, a: usize, b: usize, cap_ab: f64, cap_ba: f64) -> usize {
        let i = self.arcs.len();
        self.arcs.push(Arc {
            to: b,
            rev: i + 1,
            cap: cap_ab,
        });
        self.arcs.push(Arc {
            to: a,
            rev: i,
            cap: cap_ba,
        });
        self.adj[a].push(i);
        self.adj[b].push(i + 1);
        i
    }

    fn bfs(&mut self) -> bool {
        self.level.iter_mut().for_each(|l| *l = -1);
        let mut queue = VecDeque::new();
        self.level[self.source] = 0;
        queue.push_back(self.source);
        while let Some(u) = queue.pop_front() {
            for &a in &self.adj[u] {
                let arc = self.arcs[a];
                if arc.cap > EPS && self.level[arc.to] < 0 {
                    self.level[arc.to] = self.level[u] + 1;
                    queue.push_back(arc.to);
                }
            }
        }
        self.level[self.sink] >= 0
    }

    /// Blocking flow on the level graph with an explicit path stack.
    fn blocking_flow(&mut self) {
        self.cursor.iter_mut().for_each(|c| *c = 0);
        let mut path: Vec<usize> = Vec::new();
        let mut u = self.source;
        loop {
            if u == self.sink {
                let bottleneck = path.iter().map(|&a| self.arcs[a].cap).fold(f64::INFINITY, f64::min);
                let mut retreat = None;
                for (k, &a) in path.iter().enumerate() {
                    self.arcs[a].cap -= bottleneck;
                    let r = self.arcs[a].rev;
                    self.arcs[r].cap += bottleneck;
                    if self.arcs[a].cap <= EPS && retreat.is_none() {
                        retreat = Some(k);
                    }
                }
                let k = retreat.unwrap_or(0);
                path.truncate(k);
                u = if k == 0 { self.source } else { self.arcs[path[k - 1]].to };
                continue;
            }
            let mut advanced = false;
            while self.cursor[u] < self.adj[u].len() {
                let a = self.adj[u][self.cursor[u]];
                let arc = self.arcs[a];
                if arc.cap > EPS && self.level[arc.to] == self.level[u] + 1 {
                    path.push(a);
                    u = arc.to;
                    advanced = true;
                    break;
                }
                self.cursor[u] += 1;
            }
            if advanced {
                continue;
            }
            // Dead end: prune u from the level graph and retreat.
            self.level[u] = -1;
            match path.pop() {
                None => break,
                Some(a) => {
                    u = self.arcs[self.arcs[a].rev].to;
                    self.cursor[u] += 1;
                }
            }
        }
    }

    fn max_flow(&mut self) {
        while self.bfs() {
            self.blocking_flow();
        }
    }

    /// Nodes reachable from the source in the residual graph.
    fn source_side(&self) -> Vec<bool> {
        let mut seen = vec![false; self.adj.len()];
        let mut queue = VecDeque::new();
        seen[self.source] = true;
        queue.push_back(self.source);
        while let Some(u) = queue.pop_front() {
            for &a in &self.adj[u] {
                let arc = self.arcs[a];
                if arc.cap > EPS && !seen[arc.to] {
                    seen[arc.to] = true;
                    queue.push_back(arc.to);
                }
            }
        }
        seen
    }
}

/// Reusable min-cut solver for a fixed grid topology.
#[derive(Clone, Debug)]
pub struct GraphCut {
    dims: (usize, usize),
    node_of: Vec<Option<usize>>,
    pixel_of: Vec<usize>,
    fixed: Vec<Option<bool>>,
    pairwise: EdgeWeightMap,
    graph: FlowGraph,
    /// Per node: arc index of `s -> i` and `i -> t`, and their installed capacities.
    terminals: Vec<(usize, usize, f64, f64)>,
}

impl GraphCut {
    pub fn new(mrf: &BinaryMrf) -> Result<Self> {
        mrf.validate()?;
        let (w, h) = mrf.dims();
        let fixed: Vec<Option<bool>> = (0..w * h).map(|i| mrf.fixed_at(i)).collect();
        let mut node_of = vec![None; w * h];
        let mut pixel_of = Vec::new();
        for (i, f) in fixed.iter().enumerate() {
            if f.is_none() {
                node_of[i] = Some(pixel_of.len());
                pixel_of.push(i);
            }
        }
        let mut graph = FlowGraph::new(pixel_of.len());
        for ((px, py), (qx, qy), wgt) in mrf.pairwise.edges() {
            let (a, b) = (node_of[py * w + px], node_of[qy * w + qx]);
            if let (Some(a), Some(b)) = (a, b) {
                if wgt > 0.0 {
                    graph.add_edge(a, b, wgt, wgt);
                }
            }
        }
        let (s, t) = (graph.source, graph.sink);
        let terminals = (0..pixel_of.len())
            .map(|i| {
                let sa = graph.add_edge(s, i, 0.0, 0.0);
                let ta = graph.add_edge(i, t, 0.0, 0.0);
                (sa, ta, 0.0, 0.0)
            })
            .collect();
        let mut cut = Self {
            dims: (w, h),
            node_of,
            pixel_of,
            fixed,
            pairwise: mrf.pairwise.clone(),
            graph,
            terminals,
        };
        cut.install_unaries(mrf);
        Ok(cut)
    }

    /// Folds edges to fixed neighbors into the free nodes' unaries and
    /// updates terminal capacities in place, keeping the current flow feasible.
    fn install_unaries(&mut self, mrf: &BinaryMrf) {
        let (w, _) = self.dims;
        let mut c0: Vec<f64> = self.pixel_of.iter().map(|&p| mrf.cost_bg.data()[p]).collect();
        let mut c1: Vec<f64> = self.pixel_of.iter().map(|&p| mrf.cost_fg.data()[p]).collect();
        for ((px, py), (qx, qy), wgt) in self.pairwise.edges() {
            let (p, q) = (py * w + px, qy * w + qx);
            for (free, other) in [(p, q), (q, p)] {
                if let (Some(i), Some(label)) = (self.node_of[free], self.fixed[other]) {
                    if label {
                        c0[i] += wgt;
                    } else {
                        c1[i] += wgt;
                    }
                }
            }
        }
        for i in 0..self.pixel_of.len() {
            let m = c0[i].min(c1[i]);
            // Source side is foreground: cutting s->i means background.
            let (mut want_s, mut want_t) = (c0[i] - m, c1[i] - m);
            let (sa, ta, cs, ct) = self.terminals[i];
            let mut rs = self.graph.arcs[sa].cap + (want_s - cs);
            let mut rt = self.graph.arcs[ta].cap + (want_t - ct);
            let lift = (-rs).max(-rt).max(0.0);
            rs += lift;
            rt += lift;
            want_s += lift;
            want_t += lift;
            self.graph.arcs[sa].cap = rs;
            self.graph.arcs[ta].cap = rt;
            self.terminals[i] = (sa, ta, want_s, want_t);
        }
    }

    fn labeling(&self) -> MaskMap {
        let side = self.graph.source_side();
        let (w, h) = self.dims;
        Grid::from_vec(
            w,
            h,
            (0..w * h)
                .map(|p| match (self.fixed[p], self.node_of[p]) {
                    (Some(l), _) => l,
                    (None, Some(i)) => side[i],
                    (None, None) => unreachable!(),
                })
                .collect(),
        )
    }

    /// Solve with the currently installed unaries.
    pub fn solve(&mut self, mrf: &BinaryMrf) -> (MaskMap, f64) {
        self.graph.max_flow();
        let labels = self.labeling();
        let e = mrf.energy(&labels);
        (labels, e)
    }

    /// Re-solve after a change of unaries only, reusing the residual graph.
    pub fn resolve(&mut self, mrf: &BinaryMrf) -> Result<(MaskMap, f64)> {
        if mrf.dims() != self.dims || mrf.pairwise != self.pairwise {
            return Err(Error::TopologyChanged);
        }
        let (w, h) = self.dims;
        if (0..w * h).any(|i| mrf.fixed_at(i) != self.fixed[i]) {
            return Err(Error::TopologyChanged);
        }
        mrf.validate()?;
        self.install_unaries(mrf);
        Ok(self.solve(mrf))
    }
}

/// One-shot global minimizer.
pub fn min_cut(mrf: &BinaryMrf) -> Result<(MaskMap, f64)> {
    let mut gc = GraphCut::new(mrf)?;
    Ok(gc.solve(mrf))
}
