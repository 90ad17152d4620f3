//! Most-violated-constraint search over categorical assignments.
//!
//! For a datapoint `i` and a candidate `(lambda, r, beta)` the separation
//! problem is
//!
//! ```text
//! max_z  softplus(-y (beta_0 + beta_x . x + beta_z . z)) - lambda * D(z, z_i) - r_i
//! ```
//!
//! where `D` is the weighted categorical mismatch. The DP walks the features
//! one at a time over states `(k, d)`: "first `k` features decided with
//! accumulated distance `d`". Distances are keyed by integer multiples of the
//! rounding step so equal distances reached along different paths merge.

use std::collections::HashMap;

use thiserror::Error;

use crate::calibration::Precision;
use crate::model::{categorical_distance, softplus, CategoryLayout, Coefficients, Point};

/// Default cap on the number of assignments brute force may enumerate.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum SeparationError {
    #[error("categorical space has {count} assignments, above the enumeration cap {cap}")]
    CapExceeded { count: u64, cap: u64 },
}

/// Layered DP states shared by every datapoint: each feature adds either
/// nothing or its weight, regardless of which category is chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    step: f64,
    weights: Vec<f64>,
    units: Vec<i64>,
    /// `layers[k]` holds sorted distance keys for layer `k`, `k = 0..=m`.
    layers: Vec<Vec<i64>>,
    /// Actual summed weight for each key, aligned with `layers`.
    distances: Vec<Vec<f64>>,
    index: Vec<HashMap<i64, usize>>,
}

impl StateSpace {
    pub fn new(delta: &[f64], precision: Precision) -> Self {
        let step = precision.step();
        let units: Vec<i64> = delta.iter().map(|&d| (d / step).round() as i64).collect();
        let mut layers = vec![vec![0i64]];
        let mut distances = vec![vec![0.0f64]];
        for (k, &u) in units.iter().enumerate() {
            let prev_keys = &layers[k];
            let prev_dist = &distances[k];
            let mut next: Vec<(i64, f64)> = Vec::with_capacity(prev_keys.len() * 2);
            for (&key, &d) in prev_keys.iter().zip(prev_dist) {
                next.push((key, d));
                next.push((key + u, d + delta[k]));
            }
            // stable sort keeps the first-built distance for a merged key
            next.sort_by_key(|&(key, _)| key);
            next.dedup_by_key(|&mut (key, _)| key);
            layers.push(next.iter().map(|&(key, _)| key).collect());
            distances.push(next.iter().map(|&(_, d)| d).collect());
        }
        let index = layers.iter().map(|layer| layer.iter().enumerate().map(|(i, &k)| (k, i)).collect()).collect();
        Self { step, weights: delta.to_vec(), units, layers, distances, index }
    }

    pub fn m(&self) -> usize {
        self.units.len()
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight of feature `l` in grid units.
    pub fn unit_weight(&self, l: usize) -> i64 {
        self.units[l]
    }

    /// Distance keys of layer `k` (`0..=m`), ascending.
    pub fn layer(&self, k: usize) -> &[i64] {
        &self.layers[k]
    }

    pub fn layer_distances(&self, k: usize) -> &[f64] {
        &self.distances[k]
    }

    pub fn index_of(&self, k: usize, key: i64) -> Option<usize> {
        self.index[k].get(&key).copied()
    }

    /// Number of vertices including source `(0,0)` and sink `(m+1,0)`.
    pub fn num_states(&self) -> usize {
        self.layers.iter().skip(1).map(Vec::len).sum::<usize>() + 2
    }

    /// All states as `(layer, distance)`, source first and sink last.
    pub fn states(&self) -> Vec<(usize, f64)> {
        let mut out = vec![(0, 0.0)];
        for k in 1..=self.m() {
            out.extend(self.distances[k].iter().map(|&d| (k, d)));
        }
        out.push((self.m() + 1, 0.0));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationResult {
    /// Objective of the separation problem; positive means violated.
    pub violation: f64,
    /// Maximizing categorical assignment (category indices).
    pub witness: Vec<usize>,
    pub witness_distance: f64,
}

/// Best `-y beta_z . z` per state for layers `1..=m`, with back-pointers.
#[derive(Debug, Clone)]
pub struct DpTable {
    /// `values[k][s]` for layer `k`; `values[0] = [0]`.
    pub values: Vec<Vec<f64>>,
    /// `(category, predecessor index)` for layers `1..=m`; entry 0 unused.
    choice: Vec<Vec<(u32, u32)>>,
    /// Number of transitions evaluated.
    pub operations: usize,
}

impl DpTable {
    pub fn compute(space: &StateSpace, layout: &CategoryLayout, beta: &Coefficients, y: f64, z_i: &[usize]) -> Self {
        let m = space.m();
        let mut values = Vec::with_capacity(m + 1);
        let mut choice = Vec::with_capacity(m + 1);
        values.push(vec![0.0]);
        choice.push(Vec::new());
        let mut operations = 0;
        for k in 1..=m {
            let l = k - 1;
            let card = layout.cardinalities[l];
            let stay = z_i[l];
            let stay_w = -y * beta.category_weight(layout, l, stay);
            // best alternative category, first maximizer in dictionary order
            let mut alt = usize::MAX;
            let mut alt_w = f64::NEG_INFINITY;
            for c in (0..card).filter(|&c| c != stay) {
                let w = -y * beta.category_weight(layout, l, c);
                if w > alt_w {
                    alt_w = w;
                    alt = c;
                }
            }

            let unit = space.unit_weight(l);
            let mut cur = vec![f64::NEG_INFINITY; space.layer(k).len()];
            let mut ch = vec![(0u32, 0u32); space.layer(k).len()];
            for (p, &key) in space.layer(l).iter().enumerate() {
                let g = values[l][p];
                let candidates = [(stay, stay_w, key), (alt, alt_w, key + unit)];
                // sorted so the lower category index is tried first on ties
                let ordered = if alt < stay { [candidates[1], candidates[0]] } else { candidates };
                for (c, w, target) in ordered {
                    if c == usize::MAX {
                        continue;
                    }
                    operations += 1;
                    let t = space.index_of(k, target).expect("successor state exists");
                    let v = g + w;
                    if v > cur[t] {
                        cur[t] = v;
                        ch[t] = (c as u32, p as u32);
                    }
                }
            }
            values.push(cur);
            choice.push(ch);
        }
        Self { values, choice, operations }
    }

    /// Assignment reaching state `s` of layer `m`.
    pub fn backtrack(&self, mut s: usize) -> Vec<usize> {
        let m = self.values.len() - 1;
        let mut z = vec![0usize; m];
        for k in (1..=m).rev() {
            let (c, p) = self.choice[k][s];
            z[k - 1] = c as usize;
            s = p as usize;
        }
        z
    }
}

/// Dynamic-programming separation for one datapoint.
pub fn dp_separation(
    space: &StateSpace,
    layout: &CategoryLayout,
    beta: &Coefficients,
    lambda: f64,
    r_i: f64,
    point: Point<'_>,
) -> SeparationResult {
    let table = DpTable::compute(space, layout, beta, point.y, point.categories);
    finish(space, &table, beta, lambda, r_i, point)
}

pub(crate) fn finish(
    space: &StateSpace,
    table: &DpTable,
    beta: &Coefficients,
    lambda: f64,
    r_i: f64,
    point: Point<'_>,
) -> SeparationResult {
    let m = space.m();
    let margin = -point.y * beta.numeric_score(point.x);
    let mut best = f64::NEG_INFINITY;
    let mut best_s = 0;
    for (s, &d) in space.layer_distances(m).iter().enumerate() {
        let v = softplus(margin + table.values[m][s]) - lambda * d - r_i;
        if v > best {
            best = v;
            best_s = s;
        }
    }
    SeparationResult {
        violation: best,
        witness: table.backtrack(best_s),
        witness_distance: space.layer_distances(m)[best_s],
    }
}

/// Objective of the separation problem for an explicit assignment.
pub fn separation_objective(
    layout: &CategoryLayout,
    delta: &[f64],
    beta: &Coefficients,
    lambda: f64,
    r_i: f64,
    point: Point<'_>,
    z: &[usize],
) -> f64 {
    let score = beta.score_categories(layout, point.x, z);
    softplus(-point.y * score) - lambda * categorical_distance(delta, z, point.categories) - r_i
}

/// Calls `f` on every joint assignment in lexicographic order.
pub fn for_each_assignment(cardinalities: &[usize], mut f: impl FnMut(&[usize])) {
    let mut z = vec![0usize; cardinalities.len()];
    loop {
        f(&z);
        let mut l = z.len();
        loop {
            if l == 0 {
                return;
            }
            l -= 1;
            z[l] += 1;
            if z[l] < cardinalities[l] {
                break;
            }
            z[l] = 0;
        }
    }
}

pub fn check_cap(cardinalities: &[usize], cap: u64) -> Result<u64, SeparationError> {
    let count = cardinalities.iter().fold(1u64, |a, &k| a.saturating_mul(k as u64));
    if count > cap {
        return Err(SeparationError::CapExceeded { count, cap });
    }
    Ok(count)
}

/// Exhaustive separation over all assignments.
pub fn brute_force_separation(
    layout: &CategoryLayout,
    delta: &[f64],
    beta: &Coefficients,
    lambda: f64,
    r_i: f64,
    point: Point<'_>,
    cap: u64,
) -> Result<SeparationResult, SeparationError> {
    check_cap(&layout.cardinalities, cap)?;
    let mut best = SeparationResult { violation: f64::NEG_INFINITY, witness: Vec::new(), witness_distance: 0.0 };
    for_each_assignment(&layout.cardinalities, |z| {
        let v = separation_objective(layout, delta, beta, lambda, r_i, point, z);
        if v > best.violation {
            best.violation = v;
            best.witness = z.to_vec();
            best.witness_distance = categorical_distance(delta, z, point.categories);
        }
    });
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn states_of(space: &StateSpace) -> Vec<(usize, f64)> {
        let s = space.states();
        s[1..s.len() - 1].to_vec()
    }

    #[test]
    fn figure_one_states() {
        let space = StateSpace::new(&[1.0, 1.0], Precision::Integer);
        assert_eq!(states_of(&space), vec![(1, 0.0), (1, 1.0), (2, 0.0), (2, 1.0), (2, 2.0)]);
        assert_eq!(space.num_states(), 7);
    }

    #[test]
    fn subset_sums() {
        let space = StateSpace::new(&[1.0, 2.0], Precision::Integer);
        assert_eq!(space.layer_distances(2), &[0.0, 1.0, 2.0, 3.0]);
        let space = StateSpace::new(&[0.7], Precision::OneDecimal);
        assert_eq!(states_of(&space), vec![(1, 0.0), (1, 0.7)]);
        let space = StateSpace::new(&[0.1, 0.2, 0.3], Precision::OneDecimal);
        // 0.1 + 0.2 and 0.3 merge on the grid
        assert_eq!(space.layer(3), &[0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn layer_bound() {
        let delta = [1.0, 3.0, 2.0, 1.0];
        let space = StateSpace::new(&delta, Precision::Integer);
        for k in 1..=4 {
            let cap: f64 = delta[..k].iter().sum();
            assert!(space.layer_distances(k).iter().all(|&d| d <= cap + 1e-12));
        }
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
    ) -> (Vec<usize>, Vec<f64>, Coefficients, Vec<f64>, Vec<usize>, f64, f64, f64) {
        let m = rng.random_range(0..=4);
        let cards: Vec<usize> = (0..m).map(|_| rng.random_range(2..=4)).collect();
        let delta: Vec<f64> = (0..m).map(|_| rng.random_range(1..=3) as f64).collect();
        let layout = CategoryLayout::from_cardinalities(&cards);
        let n = 2;
        let beta = Coefficients {
            intercept: rng.random_range(-2.0..2.0),
            beta_x: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
            beta_z: (0..layout.width()).map(|_| rng.random_range(-2.0..2.0)).collect(),
        };
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: Vec<usize> = cards.iter().map(|&k| rng.random_range(0..k)).collect();
        let y = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        (cards, delta, beta, x, z, y, rng.random_range(0.0..2.0), rng.random_range(0.0..2.0))
    }

    #[test]
    fn dp_matches_brute_force_and_witness_attains_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let (cards, delta, beta, x, z, y, lambda, r) = random_instance(&mut rng);
            let layout = CategoryLayout::from_cardinalities(&cards);
            let space = StateSpace::new(&delta, Precision::Integer);
            let point = Point { x: &x, categories: &z, y };
            let dp = dp_separation(&space, &layout, &beta, lambda, r, point);
            let bf = brute_force_separation(&layout, &delta, &beta, lambda, r, point, 1000).unwrap();
            assert!((dp.violation - bf.violation).abs() <= 1e-9);
            let replay = separation_objective(&layout, &delta, &beta, lambda, r, point, &dp.witness);
            assert!((replay - dp.violation).abs() <= 1e-12);
            let d = categorical_distance(&delta, &dp.witness, &z);
            assert!((d - dp.witness_distance).abs() <= 1e-12);
        }
    }

    #[test]
    fn lambda_zero_is_featurewise_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (cards, delta, beta, x, z, y, _, r) = random_instance(&mut rng);
            let layout = CategoryLayout::from_cardinalities(&cards);
            let space = StateSpace::new(&delta, Precision::Integer);
            let dp = dp_separation(&space, &layout, &beta, 0.0, r, Point { x: &x, categories: &z, y });
            let greedy: Vec<usize> = (0..cards.len())
                .map(|l| {
                    let mut best = 0;
                    for c in 1..cards[l] {
                        if -y * beta.category_weight(&layout, l, c) > -y * beta.category_weight(&layout, l, best) {
                            best = c;
                        }
                    }
                    best
                })
                .collect();
            let s = beta.score_categories(&layout, &x, &greedy);
            assert!((dp.violation - (softplus(-y * s) - r)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_categorical_coefficients_keep_the_data() {
        let cards = [3, 2, 4];
        let layout = CategoryLayout::from_cardinalities(&cards);
        let space = StateSpace::new(&[1.0, 2.0, 1.0], Precision::Integer);
        let beta = Coefficients { intercept: 0.3, beta_x: vec![1.0], beta_z: vec![0.0; layout.width()] };
        let z = [2, 0, 1];
        let point = Point { x: &[0.5], categories: &z, y: -1.0 };
        let res = dp_separation(&space, &layout, &beta, 0.7, 0.2, point);
        assert_eq!(res.witness, z.to_vec());
        assert_eq!(res.witness_distance, 0.0);
        assert!((res.violation - (softplus(0.8) - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn no_categoricals() {
        let layout = CategoryLayout::from_cardinalities(&[]);
        let space = StateSpace::new(&[], Precision::Integer);
        let beta = Coefficients { intercept: 0.1, beta_x: vec![2.0], beta_z: vec![] };
        let point = Point { x: &[1.0], categories: &[], y: 1.0 };
        let dp = dp_separation(&space, &layout, &beta, 1.0, 0.5, point);
        let bf = brute_force_separation(&layout, &[], &beta, 1.0, 0.5, point, 10).unwrap();
        assert!(dp.witness.is_empty());
        assert!((dp.violation - (softplus(-2.1) - 0.5)).abs() < 1e-15);
        assert!((bf.violation - dp.violation).abs() < 1e-15);
    }

    #[test]
    fn shifting_r_shifts_violation() {
        let layout = CategoryLayout::from_cardinalities(&[3, 3]);
        let beta = Coefficients { intercept: 0.0, beta_x: vec![], beta_z: vec![0.5, -1.0, 2.0, 0.1] };
        let point = Point { x: &[], categories: &[0, 2], y: 1.0 };
        let a = brute_force_separation(&layout, &[1.0, 1.0], &beta, 0.3, 0.1, point, 100).unwrap();
        let b = brute_force_separation(&layout, &[1.0, 1.0], &beta, 0.3, 0.6, point, 100).unwrap();
        assert!((a.violation - b.violation - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cap_is_enforced() {
        let layout = CategoryLayout::from_cardinalities(&[10, 10, 10]);
        let beta = Coefficients::zeros(0, layout.width());
        let point = Point { x: &[], categories: &[0, 0, 0], y: 1.0 };
        let err = brute_force_separation(&layout, &[1.0; 3], &beta, 0.0, 0.0, point, 999).unwrap_err();
        assert_eq!(err, SeparationError::CapExceeded { count: 1000, cap: 999 });
    }

    #[test]
    fn inner_values_do_not_depend_on_lambda_r_or_x() {
        let cards = [3, 4, 2];
        let layout = CategoryLayout::from_cardinalities(&cards);
        let space = StateSpace::new(&[1.0, 2.0, 1.0], Precision::Integer);
        let beta = Coefficients { intercept: 0.2, beta_x: vec![0.4], beta_z: vec![0.3, -0.2, 1.1, -0.7, 0.2, 0.9] };
        let z = [1, 3, 0];
        let base = DpTable::compute(&space, &layout, &beta, 1.0, &z);
        let r1 = dp_separation(&space, &layout, &beta, 0.1, 0.0, Point { x: &[1.0], categories: &z, y: 1.0 });
        let r2 = dp_separation(&space, &layout, &beta, 1.9, 3.0, Point { x: &[-4.0], categories: &z, y: 1.0 });
        // recomputing the table is independent of the final-layer inputs
        let again = DpTable::compute(&space, &layout, &beta, 1.0, &z);
        assert_eq!(base.values, again.values);
        assert!(r1.violation != r2.violation);
    }

    #[test]
    fn operation_count_bound() {
        let cards = [4, 3, 4, 2, 3];
        let delta = [1.0, 2.0, 1.0, 3.0, 1.0];
        let layout = CategoryLayout::from_cardinalities(&cards);
        let space = StateSpace::new(&delta, Precision::Integer);
        let beta = Coefficients::zeros(0, layout.width());
        let table = DpTable::compute(&space, &layout, &beta, 1.0, &[0, 0, 0, 0, 0]);
        let bound: usize = (1..=5).map(|k| cards[k - 1] * space.layer(k - 1).len()).sum();
        assert!(table.operations <= bound);
    }

    #[test]
    fn assignment_enumeration_order() {
        let mut seen = Vec::new();
        for_each_assignment(&[2, 3], |z| seen.push(z.to_vec()));
        assert_eq!(seen.len(), 6);
        assert_eq!(seen[0], vec![0, 0]);
        assert_eq!(seen[5], vec![1, 2]);
        let mut count = 0;
        for_each_assignment(&[], |_| count += 1);
        assert_eq!(count, 1);
    }
}
