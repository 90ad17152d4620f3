//! Backend-neutral conic program: linear objective, linear rows and
//! exponential-cone memberships over affine expressions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("program is infeasible")]
    Infeasible,
    #[error("program is unbounded")]
    Unbounded,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("malformed program: {0}")]
    Malformed(String),
}

/// `sum_k coef_k * x[var_k] + constant`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(v: usize) -> Self {
        Self { terms: vec![(v, 1.0)], constant: 0.0 }
    }

    pub fn term(mut self, v: usize, coef: f64) -> Self {
        if coef != 0.0 {
            self.terms.push((v, coef));
        }
        self
    }

    pub fn plus(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn scaled(mut self, s: f64) -> Self {
        for t in &mut self.terms {
            t.1 *= s;
        }
        self.constant *= s;
        self
    }

    pub fn minus(mut self, other: &AffineExpr) -> Self {
        self.terms.extend(other.terms.iter().map(|&(v, c)| (v, -c)));
        self.constant -= other.constant;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(v, c)| c * x[v]).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    /// `expr <= 0`
    Le,
    /// `expr >= 0`
    Ge,
    /// `expr == 0`
    Eq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraint {
    pub expr: AffineExpr,
    pub sense: Sense,
}

/// `a >= b * exp(c / b)` with `b > 0` (closure included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpConeTriple {
    pub a: AffineExpr,
    pub b: AffineExpr,
    pub c: AffineExpr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// Minimize `objective` subject to bounds, linear rows and cone memberships.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConicProgram {
    pub variables: Vec<Variable>,
    pub objective: AffineExpr,
    pub linear: Vec<LinearConstraint>,
    pub exp_cones: Vec<ExpConeTriple>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: Option<f64>, upper: Option<f64>) -> usize {
        self.variables.push(Variable { name: name.into(), lower, upper });
        self.variables.len() - 1
    }

    pub fn num_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn add_linear(&mut self, expr: AffineExpr, sense: Sense) {
        self.linear.push(LinearConstraint { expr, sense });
    }

    pub fn add_exp_cone(&mut self, a: AffineExpr, b: AffineExpr, c: AffineExpr) {
        self.exp_cones.push(ExpConeTriple { a, b, c });
    }

    /// `|x[v]| <= scale * x[t]` as two linear rows.
    pub fn add_abs_bound(&mut self, v: usize, t: usize, scale: f64) {
        self.add_linear(AffineExpr::var(v).term(t, -scale), Sense::Le);
        self.add_linear(AffineExpr::constant(0.0).term(v, -1.0).term(t, -scale), Sense::Le);
    }

    /// Encodes `log(1 + exp(c)) <= a` with two auxiliaries `u, v`:
    /// `u + v <= 1`, `(u, 1, -a)` and `(v, 1, c - a)` in the exponential cone.
    pub fn add_softplus_le(&mut self, c: AffineExpr, a: AffineExpr) -> (usize, usize) {
        let u = self.add_var("u", None, None);
        let v = self.add_var("v", None, None);
        self.add_linear(AffineExpr::var(u).term(v, 1.0).plus(-1.0), Sense::Le);
        let one = AffineExpr::constant(1.0);
        self.add_exp_cone(AffineExpr::var(u), one.clone(), a.clone().scaled(-1.0));
        self.add_exp_cone(AffineExpr::var(v), one, c.minus(&a));
        (u, v)
    }

    /// Checks index ranges and coefficient finiteness.
    pub fn validate(&self) -> Result<(), SolveError> {
        let n = self.variables.len();
        let check = |e: &AffineExpr, what: &str| -> Result<(), SolveError> {
            if !e.constant.is_finite() {
                return Err(SolveError::Malformed(format!("{what}: non-finite constant")));
            }
            for &(v, c) in &e.terms {
                if v >= n {
                    return Err(SolveError::Malformed(format!("{what}: variable {v} not declared")));
                }
                if !c.is_finite() {
                    return Err(SolveError::Malformed(format!("{what}: non-finite coefficient")));
                }
            }
            Ok(())
        };
        check(&self.objective, "objective")?;
        for (k, row) in self.linear.iter().enumerate() {
            check(&row.expr, &format!("linear row {k}"))?;
        }
        for (k, cone) in self.exp_cones.iter().enumerate() {
            let what = format!("exp cone {k}");
            check(&cone.a, &what)?;
            check(&cone.b, &what)?;
            check(&cone.c, &what)?;
        }
        for var in &self.variables {
            if let (Some(l), Some(u)) = (var.lower, var.upper) {
                if l > u {
                    return Err(SolveError::Malformed(format!("variable {} has lower > upper", var.name)));
                }
            }
        }
        Ok(())
    }

    /// Largest constraint violation at `x` (zero when feasible).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (var, &v) in self.variables.iter().zip(x) {
            if let Some(l) = var.lower {
                worst = worst.max(l - v);
            }
            if let Some(u) = var.upper {
                worst = worst.max(v - u);
            }
        }
        for row in &self.linear {
            let e = row.expr.eval(x);
            worst = worst.max(match row.sense {
                Sense::Le => e,
                Sense::Ge => -e,
                Sense::Eq => e.abs(),
            });
        }
        for cone in &self.exp_cones {
            let (a, b, c) = (cone.a.eval(x), cone.b.eval(x), cone.c.eval(x));
            let gap = if b > 0.0 {
                b * (c / b).exp() - a
            } else {
                // b = 0 boundary: a >= 0 and c <= 0
                (-a).max(c).max(-b)
            };
            worst = worst.max(gap);
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
    /// Stalled short of the requested gap but primal feasible; the
    /// objective may be slightly above the optimum.
    pub reduced_accuracy: bool,
}

pub trait ConicBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(&self, program: &ConicProgram) -> Result<ConicSolution, SolveError>;
}
