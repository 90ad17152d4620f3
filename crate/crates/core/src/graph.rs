//! State-transition DAG of the separation DP and its longest-path dual.
//!
//! Vertices are the DP states `(k, d)` plus a source `(0, 0)` and a sink
//! `(m + 1, 0)`. A category arc `(k-1, d') -> (k, d)` carries weight
//! `-y beta_zk . z_k`; a sink arc `(m, d) -> sink` carries
//! `-ln(exp(r + lambda d) - 1)`. Weights are stored symbolically so the same
//! graph serves evaluation and constraint emission for any coefficients.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc as Shared;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::model::{CategoryLayout, Coefficients};
use crate::separation::StateSpace;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vertex {
    pub layer: usize,
    /// Distance in grid units; the sink uses key 0 on layer `m + 1`.
    pub key: i64,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArcKind {
    Category { feature: usize, category: usize },
    Sink { distance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    pub source: usize,
    pub target: usize,
    pub kind: ArcKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationGraph {
    vertices: Vec<Vertex>,
    arcs: Vec<Arc>,
    m: usize,
    /// First vertex index of each layer `0..=m+1`.
    layer_start: Vec<usize>,
}

/// `-ln(exp(t) - 1)`, or `+inf` outside the domain `t > 0`.
pub fn neg_log_expm1(t: f64) -> f64 {
    if t <= 0.0 {
        f64::INFINITY
    } else if t > 30.0 {
        -t - (-(-t).exp()).ln_1p()
    } else {
        -t.exp_m1().ln()
    }
}

impl SeparationGraph {
    /// Builds the DAG for a datapoint with categorical values `z_i`.
    pub fn build(space: &StateSpace, cardinalities: &[usize], z_i: &[usize]) -> Self {
        let m = space.m();
        assert_eq!(cardinalities.len(), m);
        assert_eq!(z_i.len(), m);
        let mut vertices = Vec::with_capacity(space.num_states());
        let mut layer_start = Vec::with_capacity(m + 2);
        layer_start.push(0);
        vertices.push(Vertex { layer: 0, key: 0, distance: 0.0 });
        for k in 1..=m {
            layer_start.push(vertices.len());
            for (&key, &distance) in space.layer(k).iter().zip(space.layer_distances(k)) {
                vertices.push(Vertex { layer: k, key, distance });
            }
        }
        layer_start.push(vertices.len());
        vertices.push(Vertex { layer: m + 1, key: 0, distance: 0.0 });
        let sink = vertices.len() - 1;

        let mut arcs = Vec::new();
        for k in 1..=m {
            let l = k - 1;
            let unit = space.unit_weight(l);
            for (p, &key) in space.layer(l).iter().enumerate() {
                let source = layer_start[l] + p;
                for c in 0..cardinalities[l] {
                    let target_key = if c == z_i[l] { key } else { key + unit };
                    let t = space.index_of(k, target_key).expect("successor state exists");
                    arcs.push(Arc {
                        source,
                        target: layer_start[k] + t,
                        kind: ArcKind::Category { feature: l, category: c },
                    });
                }
            }
        }
        for (s, &distance) in space.layer_distances(m).iter().enumerate() {
            arcs.push(Arc { source: layer_start[m] + s, target: sink, kind: ArcKind::Sink { distance } });
        }
        Self { vertices, arcs, m, layer_start }
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn source(&self) -> usize {
        0
    }

    pub fn sink(&self) -> usize {
        self.vertices.len() - 1
    }

    /// Vertex indices of layer `k`.
    pub fn layer_range(&self, k: usize) -> std::ops::Range<usize> {
        self.layer_start[k]..self.layer_start[k + 1]
    }

    /// Kahn's algorithm; `None` if the arcs contain a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let v = self.vertices.len();
        let mut indegree = vec![0usize; v];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); v];
        for a in &self.arcs {
            indegree[a.target] += 1;
            out[a.source].push(a.target);
        }
        let mut queue: Vec<usize> = (0..v).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(v);
        while let Some(u) = queue.pop() {
            order.push(u);
            for &w in &out[u] {
                indegree[w] -= 1;
                if indegree[w] == 0 {
                    queue.push(w);
                }
            }
        }
        (order.len() == v).then_some(order)
    }

    /// Number of source-to-sink paths (as `f64`, exact below 2^53).
    pub fn path_count(&self) -> f64 {
        let mut count = vec![0.0f64; self.vertices.len()];
        count[self.source()] = 1.0;
        // arcs are emitted in nondecreasing source order, which is topological
        for a in &self.arcs {
            count[a.target] += count[a.source];
        }
        count[self.sink()]
    }

    /// Every source-to-sink path as a list of arc indices.
    pub fn enumerate_paths(&self) -> Vec<Vec<usize>> {
        let mut out_arcs: Vec<Vec<usize>> = vec![Vec::new(); self.vertices.len()];
        for (idx, a) in self.arcs.iter().enumerate() {
            out_arcs[a.source].push(idx);
        }
        let mut paths = Vec::new();
        let mut stack = vec![(self.source(), Vec::new())];
        while let Some((v, path)) = stack.pop() {
            if v == self.sink() {
                paths.push(path);
                continue;
            }
            for &a in out_arcs[v].iter().rev() {
                let mut next = path.clone();
                next.push(a);
                stack.push((self.arcs[a].target, next));
            }
        }
        paths
    }

    /// Categorical assignment spelled out by a path.
    pub fn decode_path(&self, path: &[usize]) -> Vec<usize> {
        let mut z = vec![0usize; self.m];
        for &a in path {
            if let ArcKind::Category { feature, category } = self.arcs[a].kind {
                z[feature] = category;
            }
        }
        z
    }

    /// Digest of the vertex and arc structure.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.vertices {
            h.update((v.layer as u64).to_le_bytes());
            h.update(v.key.to_le_bytes());
        }
        for a in &self.arcs {
            h.update((a.source as u64).to_le_bytes());
            h.update((a.target as u64).to_le_bytes());
            match a.kind {
                ArcKind::Category { feature, category } => {
                    h.update([0]);
                    h.update((feature as u64).to_le_bytes());
                    h.update((category as u64).to_le_bytes());
                }
                ArcKind::Sink { distance } => {
                    h.update([1]);
                    h.update(distance.to_le_bytes());
                }
            }
        }
        h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    /// Numeric arc weight for the given coefficients and dual values.
    pub fn arc_weight(
        &self,
        arc: &Arc,
        layout: &CategoryLayout,
        beta: &Coefficients,
        y: f64,
        lambda: f64,
        r_i: f64,
    ) -> f64 {
        match arc.kind {
            ArcKind::Category { feature, category } => -y * beta.category_weight(layout, feature, category),
            ArcKind::Sink { distance } => neg_log_expm1(r_i + lambda * distance),
        }
    }

    /// Longest source-to-sink path in one pass over the arcs.
    pub fn longest_path(
        &self,
        layout: &CategoryLayout,
        beta: &Coefficients,
        y: f64,
        lambda: f64,
        r_i: f64,
    ) -> LongestPath {
        let v = self.vertices.len();
        let mut best = vec![f64::NEG_INFINITY; v];
        let mut pred = vec![usize::MAX; v];
        best[self.source()] = 0.0;
        let mut domain_violation = None;
        for (idx, a) in self.arcs.iter().enumerate() {
            let w = self.arc_weight(a, layout, beta, y, lambda, r_i);
            if w == f64::INFINITY {
                if let ArcKind::Sink { distance } = a.kind {
                    domain_violation.get_or_insert(distance);
                }
            }
            let cand = best[a.source] + w;
            if cand > best[a.target] {
                best[a.target] = cand;
                pred[a.target] = idx;
            }
        }
        let mut path = Vec::new();
        let mut cur = self.sink();
        while cur != self.source() && pred[cur] != usize::MAX {
            path.push(pred[cur]);
            cur = self.arcs[pred[cur]].source;
        }
        path.reverse();
        let diagnostic = domain_violation
            .map(|d| format!("r + lambda * d = {} <= 0 on the sink arc at distance {d}", r_i + lambda * d));
        LongestPath { value: best[self.sink()], path, diagnostic }
    }

    /// Dual longest-path constraints plus the coupling row for datapoint `i`.
    pub fn emit_dual_constraints(&self, datapoint: usize, y: f64, layout: &CategoryLayout) -> DualConstraintSet {
        let mut constraints: Vec<DualConstraint> = self
            .arcs
            .iter()
            .map(|a| {
                let weight = match a.kind {
                    ArcKind::Category { feature, category } => match layout.column(feature, category) {
                        Some(column) => WeightExpr::BetaZ { column, coefficient: -y },
                        None => WeightExpr::Zero,
                    },
                    ArcKind::Sink { distance } => WeightExpr::SinkBarrier { distance },
                };
                DualConstraint::Arc { head: a.target, tail: a.source, weight }
            })
            .collect();
        constraints.push(DualConstraint::Coupling { source: self.source(), sink: self.sink() });
        DualConstraintSet { datapoint, num_vertices: self.vertices.len(), constraints }
    }

    /// Graphviz rendering with `(k,d)` vertex labels and symbolic arc weights.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph separation {\n  rankdir=LR;\n");
        for (i, v) in self.vertices.iter().enumerate() {
            let label = if i == self.sink() {
                format!("sink ({},0)", v.layer)
            } else {
                format!("({},{})", v.layer, v.distance)
            };
            let _ = writeln!(s, "  v{i} [label=\"{label}\"];");
        }
        for a in &self.arcs {
            let label = match a.kind {
                ArcKind::Category { feature, category } => format!("-y*beta_z[{feature}][{category}]"),
                ArcKind::Sink { distance } => format!("-log(exp(r+lambda*{distance})-1)"),
            };
            let _ = writeln!(s, "  v{} -> v{} [label=\"{label}\"];", a.source, a.target);
        }
        s.push_str("}\n");
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongestPath {
    /// Path weight; `+inf` when a sink arc is outside its domain.
    pub value: f64,
    /// Arc indices from source to sink.
    pub path: Vec<usize>,
    pub diagnostic: Option<String>,
}

/// Symbolic right-hand side `w(e)` of an arc constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightExpr {
    Zero,
    /// `coefficient * beta_z[column]`
    BetaZ {
        column: usize,
        coefficient: f64,
    },
    /// `-ln(exp(r_i + lambda * distance) - 1)`
    SinkBarrier {
        distance: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DualConstraint {
    /// `mu[head] - mu[tail] >= weight`
    Arc { head: usize, tail: usize, weight: WeightExpr },
    /// `y (beta_x . x + beta_0) >= mu[sink] - mu[source]`
    Coupling { source: usize, sink: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualConstraintSet {
    pub datapoint: usize,
    pub num_vertices: usize,
    pub constraints: Vec<DualConstraint>,
}

/// Graphs for a dataset, shared between datapoints with the same categories.
#[derive(Debug, Clone)]
pub struct GraphSet {
    pub graphs: Vec<Shared<SeparationGraph>>,
    /// Graph index for each datapoint.
    pub assignment: Vec<usize>,
    /// Distinct category patterns in first-seen order.
    pub patterns: Vec<Vec<usize>>,
}

impl GraphSet {
    pub fn build(space: &StateSpace, cardinalities: &[usize], rows: &[&[usize]]) -> Self {
        let mut lookup: HashMap<&[usize], usize> = HashMap::new();
        let mut patterns: Vec<Vec<usize>> = Vec::new();
        let mut assignment = Vec::with_capacity(rows.len());
        for &row in rows {
            let next = patterns.len();
            let idx = *lookup.entry(row).or_insert_with(|| {
                patterns.push(row.to_vec());
                next
            });
            assignment.push(idx);
        }
        let graphs =
            patterns.par_iter().map(|z| Shared::new(SeparationGraph::build(space, cardinalities, z))).collect();
        Self { graphs, assignment, patterns }
    }

    pub fn graph(&self, i: usize) -> &SeparationGraph {
        &self.graphs[self.assignment[i]]
    }

    /// Total `(|V|, |A|)` summed over datapoints, as if graphs were not shared.
    pub fn total_size(&self) -> (usize, usize) {
        self.assignment
            .iter()
            .fold((0, 0), |(v, a), &g| (v + self.graphs[g].vertices.len(), a + self.graphs[g].arcs.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::Precision;
    use crate::separation::for_each_assignment;

    fn figure_one() -> SeparationGraph {
        let space = StateSpace::new(&[1.0, 1.0], Precision::Integer);
        SeparationGraph::build(&space, &[3, 2], &[2, 1])
    }

    #[test]
    fn figure_one_counts() {
        let g = figure_one();
        assert_eq!(g.vertices().len(), 7);
        assert_eq!(g.arcs().len(), 10);
        let from_source = g.arcs().iter().filter(|a| a.source == g.source()).collect::<Vec<_>>();
        assert_eq!(from_source.len(), 3);
        // the matching category goes to (1,0), the two others to (1,1)
        let to_zero = from_source.iter().filter(|a| g.vertices()[a.target].distance == 0.0).count();
        assert_eq!(to_zero, 1);
        let sink_arcs = g.arcs().iter().filter(|a| matches!(a.kind, ArcKind::Sink { .. })).count();
        assert_eq!(sink_arcs, 3);
        assert_eq!(g.arcs().len() - 3 - sink_arcs, 4);
    }

    #[test]
    fn smallest_graph() {
        let space = StateSpace::new(&[0.7], Precision::OneDecimal);
        let g = SeparationGraph::build(&space, &[2], &[0]);
        assert_eq!(g.vertices().len(), 4);
        assert_eq!(g.arcs().len(), 4);
    }

    #[test]
    fn state_merging_on_binary_features() {
        let space = StateSpace::new(&[1.0, 1.0, 1.0], Precision::Integer);
        let g = SeparationGraph::build(&space, &[2, 2, 2], &[0, 1, 0]);
        assert_eq!(g.layer_range(3).len(), 4);
        assert_eq!(g.path_count(), 8.0);
    }

    #[test]
    fn degenerate_graph_without_categoricals() {
        let space = StateSpace::new(&[], Precision::Integer);
        let g = SeparationGraph::build(&space, &[], &[]);
        assert_eq!(g.vertices().len(), 2);
        assert_eq!(g.arcs().len(), 1);
        let layout = CategoryLayout::from_cardinalities(&[]);
        let beta = Coefficients::zeros(0, 0);
        let lp = g.longest_path(&layout, &beta, 1.0, 0.5, 0.8);
        assert!((lp.value + (0.8f64.exp() - 1.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_categorical_coefficients_pick_smallest_distance() {
        let g = figure_one();
        let layout = CategoryLayout::from_cardinalities(&[3, 2]);
        let beta = Coefficients::zeros(0, 3);
        let lp = g.longest_path(&layout, &beta, 1.0, 0.4, 0.3);
        assert_eq!(g.decode_path(&lp.path), vec![2, 1]);
        assert!((lp.value - neg_log_expm1(0.3)).abs() < 1e-15);
    }

    #[test]
    fn domain_violation_reports_infinity() {
        let g = figure_one();
        let layout = CategoryLayout::from_cardinalities(&[3, 2]);
        let beta = Coefficients::zeros(0, 3);
        let lp = g.longest_path(&layout, &beta, 1.0, 0.0, 0.0);
        assert_eq!(lp.value, f64::INFINITY);
        assert!(lp.diagnostic.is_some());
    }

    #[test]
    fn neg_log_expm1_branches_agree() {
        for t in [29.0f64, 30.0, 30.5, 31.0] {
            let direct = -t.exp_m1().ln();
            assert!((neg_log_expm1(t) - direct).abs() < 1e-12);
        }
        assert!(neg_log_expm1(800.0).is_finite());
    }

    #[test]
    fn paths_biject_with_assignments() {
        let cards = [3, 2, 2];
        let space = StateSpace::new(&[1.0, 2.0, 4.0], Precision::Integer);
        let g = SeparationGraph::build(&space, &cards, &[1, 0, 1]);
        let paths = g.enumerate_paths();
        assert_eq!(paths.len(), 12);
        assert_eq!(g.path_count(), 12.0);
        let mut decoded: Vec<Vec<usize>> = paths.iter().map(|p| g.decode_path(p)).collect();
        decoded.sort();
        let mut all = Vec::new();
        for_each_assignment(&cards, |z| all.push(z.to_vec()));
        assert_eq!(decoded, all);
    }

    #[test]
    fn dual_constraint_counts() {
        let g = figure_one();
        let layout = CategoryLayout::from_cardinalities(&[3, 2]);
        let set = g.emit_dual_constraints(0, 1.0, &layout);
        assert_eq!(set.num_vertices, 7);
        assert_eq!(set.constraints.len(), 11);
        let couplings = set.constraints.iter().filter(|c| matches!(c, DualConstraint::Coupling { .. })).count();
        assert_eq!(couplings, 1);
        // reference category of feature 0 is index 2 -> constant zero weight
        let zero = set
            .constraints
            .iter()
            .filter(|c| matches!(c, DualConstraint::Arc { weight: WeightExpr::Zero, .. }))
            .count();
        // reference arcs: one from the source for feature 0, two into layer 2 for feature 1
        assert_eq!(zero, 3);
    }

    #[test]
    fn topological_order_exists() {
        let g = figure_one();
        let order = g.topological_order().unwrap();
        assert_eq!(order.len(), 7);
        let pos: HashMap<usize, usize> = order.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        assert!(g.arcs().iter().all(|a| pos[&a.source] < pos[&a.target]));
    }

    #[test]
    fn structure_is_coefficient_free() {
        let space = StateSpace::new(&[1.0, 2.0], Precision::Integer);
        let a = SeparationGraph::build(&space, &[3, 3], &[0, 1]);
        let b = SeparationGraph::build(&space, &[3, 3], &[0, 1]);
        let c = SeparationGraph::build(&space, &[3, 3], &[1, 1]);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn graph_set_shares_patterns() {
        let space = StateSpace::new(&[1.0], Precision::Integer);
        let rows: Vec<&[usize]> = vec![&[0], &[1], &[0], &[1], &[0]];
        let set = GraphSet::build(&space, &[2], &rows);
        assert_eq!(set.graphs.len(), 2);
        assert_eq!(set.assignment, vec![0, 1, 0, 1, 0]);
        assert_eq!(set.total_size(), (5 * 4, 5 * 4));
    }

    #[test]
    fn dot_output_labels() {
        let dot = figure_one().to_dot();
        assert!(dot.contains("(1,1)"));
        assert!(dot.contains("sink (3,0)"));
        assert_eq!(dot.matches("->").count(), 10);
    }
}
