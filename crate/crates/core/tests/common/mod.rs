#![allow(dead_code)]

use mixdro::calibration::{AmbiguityParams, Precision};
use mixdro::dataset::EncodedDataset;
use mixdro::model::{softplus, CategoryLayout, Coefficients, Point};
use mixdro::separation::{brute_force_separation, DEFAULT_ENUMERATION_CAP};
use mixdro::synthetic::{generate, SyntheticSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub name: String,
    pub ds: EncodedDataset,
    pub params: AmbiguityParams,
}

/// Small mixed-feature instances whose full categorical product stays tiny.
pub fn fixtures(count: usize, seed: u64) -> Vec<Fixture> {
    let shapes: [(usize, usize, &[usize]); 6] = [
        (40, 2, &[2]),
        (60, 1, &[3, 2]),
        (80, 3, &[2, 3, 2]),
        (120, 2, &[2, 2, 2, 2]),
        (150, 2, &[3, 2, 2, 2, 2]),
        (200, 1, &[2, 2, 2, 2, 2, 2]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let (points, numerical, cards) = shapes[k % shapes.len()];
            let spec = SyntheticSpec {
                points,
                numerical,
                cardinalities: cards.to_vec(),
                coef_scale: 0.8,
                seed: seed * 1000 + k as u64,
            };
            let (ds, _) = generate(&spec);
            let gamma = (0..numerical).map(|_| rng.random_range(0.5..2.0)).collect();
            let delta = (0..cards.len()).map(|_| rng.random_range(1..=2) as f64).collect();
            let epsilon = [0.01, 0.05, 0.2][k % 3];
            let params = AmbiguityParams::new(gamma, delta, epsilon, Precision::Integer).unwrap();
            Fixture { name: format!("fixture-{k} (N={points}, n={numerical}, cards={cards:?})"), ds, params }
        })
        .collect()
}

pub fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Largest exhaustive separation value at `(beta, lambda, r)`.
pub fn certificate(ds: &EncodedDataset, params: &AmbiguityParams, beta: &Coefficients, lambda: f64, r: &[f64]) -> f64 {
    let layout = CategoryLayout::new(&ds.schema);
    (0..ds.len())
        .map(|i| {
            let p = Point { x: ds.x_row(i), categories: ds.categories_row(i), y: ds.label(i) };
            brute_force_separation(&layout, &params.delta, beta, lambda, r[i], p, DEFAULT_ENUMERATION_CAP)
                .unwrap()
                .violation
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Dense design row `(1, x, one-hot z)`.
fn design(ds: &EncodedDataset) -> DMatrix<f64> {
    let width = 1 + ds.schema.n() + ds.schema.encoded_width();
    let mut a = DMatrix::zeros(ds.len(), width);
    for i in 0..ds.len() {
        a[(i, 0)] = 1.0;
        for (j, &v) in ds.x_row(i).iter().enumerate() {
            a[(i, 1 + j)] = v;
        }
        for (j, &v) in ds.z_row(i).iter().enumerate() {
            a[(i, 1 + ds.schema.n() + j)] = v;
        }
    }
    a
}

/// Unregularized logistic regression by damped Newton iterations.
pub fn erm_fit(ds: &EncodedDataset) -> (Coefficients, f64) {
    let a = design(ds);
    let y = DVector::from_column_slice(ds.labels());
    let num = ds.len() as f64;
    let loss = |w: &DVector<f64>| -> f64 {
        let s = &a * w;
        s.iter().zip(y.iter()).map(|(s, y)| softplus(-y * s)).sum::<f64>() / num
    };
    let mut w = DVector::zeros(a.ncols());
    for _ in 0..200 {
        let s = &a * &w;
        let mut g = DVector::zeros(a.ncols());
        let mut h = DMatrix::zeros(a.ncols(), a.ncols());
        for i in 0..ds.len() {
            let p = 1.0 / (1.0 + (y[i] * s[i]).exp());
            let row = a.row(i).transpose();
            g -= &row * (y[i] * p / num);
            h += &row * row.transpose() * (p * (1.0 - p) / num);
        }
        let step = h.lu().solve(&(-&g)).expect("Hessian is nonsingular");
        let mut t = 1.0;
        let f0 = loss(&w);
        while loss(&(&w + &step * t)) > f0 + 1e-4 * t * g.dot(&step) && t > 1e-12 {
            t *= 0.5;
        }
        w += &step * t;
        if g.norm() < 1e-13 {
            break;
        }
    }
    let f = loss(&w);
    (Coefficients::from_slice(w.as_slice(), ds.schema.n()), f)
}

/// One random separation instance: a point, coefficients, and dual values.
pub struct OracleCase {
    pub cards: Vec<usize>,
    pub delta: Vec<f64>,
    pub precision: Precision,
    pub x: Vec<f64>,
    pub categories: Vec<usize>,
    pub y: f64,
    pub beta: Coefficients,
    pub lambda: f64,
    pub r: f64,
}

impl OracleCase {
    pub fn layout(&self) -> CategoryLayout {
        CategoryLayout::from_cardinalities(&self.cards)
    }

    pub fn point(&self) -> Point<'_> {
        Point { x: &self.x, categories: &self.categories, y: self.y }
    }
}

/// `m <= 6`, `|C| <= 4`, `beta` in `[-2, 2]`, `lambda, r` in `[0, 2]`.
/// Every third case uses one-decimal weights.
pub fn oracle_case(rng: &mut ChaCha8Rng, k: usize) -> OracleCase {
    let m = rng.random_range(0..=6);
    let n = rng.random_range(0..=3);
    let cards: Vec<usize> = (0..m).map(|_| rng.random_range(2..=4)).collect();
    let (delta, precision) = if k % 3 == 2 {
        ((0..m).map(|_| rng.random_range(1..=30) as f64 / 10.0).collect(), Precision::OneDecimal)
    } else {
        ((0..m).map(|_| rng.random_range(1..=3) as f64).collect(), Precision::Integer)
    };
    let width: usize = cards.iter().map(|k| k - 1).sum();
    let beta = Coefficients {
        intercept: rng.random_range(-2.0..=2.0),
        beta_x: (0..n).map(|_| rng.random_range(-2.0..=2.0)).collect(),
        beta_z: (0..width).map(|_| rng.random_range(-2.0..=2.0)).collect(),
    };
    OracleCase {
        x: (0..n).map(|_| rng.random_range(-2.0..=2.0)).collect(),
        categories: cards.iter().map(|&k| rng.random_range(0..k)).collect(),
        y: if rng.random::<bool>() { 1.0 } else { -1.0 },
        beta,
        lambda: rng.random_range(0.0..=2.0),
        r: rng.random_range(0.0..=2.0),
        cards,
        delta,
        precision,
    }
}
