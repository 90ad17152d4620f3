//! Seeded synthetic mixed-feature data drawn from a logistic model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSchema, EncodedDataset};
use crate::model::{sigmoid, CategoryLayout, Coefficients};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub points: usize,
    pub numerical: usize,
    pub cardinalities: Vec<usize>,
    /// Standard deviation of the true coefficients.
    #[serde(default = "default_scale")]
    pub coef_scale: f64,
    pub seed: u64,
}

fn default_scale() -> f64 {
    1.0
}

/// Returns the data and the coefficients that generated the labels.
pub fn generate(spec: &SyntheticSpec) -> (EncodedDataset, Coefficients) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let schema = DatasetSchema::synthetic(spec.numerical, &spec.cardinalities);
    let layout = CategoryLayout::new(&schema);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let truth = Coefficients {
        intercept: 0.2 * spec.coef_scale * normal(),
        beta_x: (0..spec.numerical).map(|_| spec.coef_scale * normal()).collect(),
        beta_z: (0..layout.width()).map(|_| spec.coef_scale * normal()).collect(),
    };
    let x: Vec<f64> = (0..spec.points * spec.numerical).map(|_| normal()).collect();
    let cats: Vec<usize> = (0..spec.points)
        .flat_map(|_| spec.cardinalities.iter().map(|&k| rng.random_range(0..k)).collect::<Vec<_>>())
        .collect();
    let mut y: Vec<f64> = (0..spec.points)
        .map(|i| {
            let row_x = &x[i * spec.numerical..(i + 1) * spec.numerical];
            let row_z = &cats[i * spec.cardinalities.len()..(i + 1) * spec.cardinalities.len()];
            let p = sigmoid(truth.score_categories(&layout, row_x, row_z));
            if rng.random::<f64>() < p {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    // both classes are needed downstream
    if spec.points >= 2 {
        if y.iter().all(|&v| v > 0.0) {
            y[0] = -1.0;
        } else if y.iter().all(|&v| v < 0.0) {
            y[0] = 1.0;
        }
    }
    let ds = EncodedDataset::new(schema, x, cats, y).expect("generated data is consistent");
    (ds, truth)
}
