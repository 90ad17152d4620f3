//! Small dense log-barrier method for exponential-cone programs.
//!
//! Meant for cross-checking the main backend on small programs: every
//! Newton step factors a dense KKT matrix. Uses the barrier
//! `-ln(b ln(a/b) - c) - ln a - ln b` (parameter 3) for each cone and
//! `-ln g` for each linear inequality.

use nalgebra::{DMatrix, DVector};

use super::conic::{AffineExpr, ConicBackend, ConicProgram, ConicSolution, Sense, SolveError};

#[derive(Debug, Clone)]
pub struct BarrierBackend {
    /// Target duality gap `nu / t`.
    pub tol: f64,
    pub max_newton: usize,
}

impl Default for BarrierBackend {
    fn default() -> Self {
        Self { tol: 1e-9, max_newton: 5000 }
    }
}

/// Every variable is kept inside `|x_k| < BOX` so barrier sublevel sets are
/// bounded; a solution near the box means the program is unbounded.
const BOX: f64 = 1e8;
const STAGE_STEPS: usize = 80;

/// Program in the form `min c.x` s.t. `g_k(x) > 0`, cones, `E x = f`.
struct Dense {
    n: usize,
    cost: Vec<(usize, f64)>,
    ineq: Vec<AffineExpr>,
    cones: Vec<[AffineExpr; 3]>,
    eq: Vec<AffineExpr>,
}

impl Dense {
    fn from_program(p: &ConicProgram) -> Self {
        let mut ineq = Vec::new();
        let mut eq = Vec::new();
        for row in &p.linear {
            match row.sense {
                Sense::Ge => ineq.push(row.expr.clone()),
                Sense::Le => ineq.push(row.expr.clone().scaled(-1.0)),
                Sense::Eq => eq.push(row.expr.clone()),
            }
        }
        for (k, v) in p.variables.iter().enumerate() {
            if let Some(l) = v.lower {
                ineq.push(AffineExpr::var(k).plus(-l));
            }
            if let Some(u) = v.upper {
                ineq.push(AffineExpr::constant(u).term(k, -1.0));
            }
        }
        for k in 0..p.num_vars() {
            ineq.push(AffineExpr::constant(BOX).term(k, -1.0));
            ineq.push(AffineExpr::constant(BOX).term(k, 1.0));
        }
        let cones = p.exp_cones.iter().map(|c| [c.a.clone(), c.b.clone(), c.c.clone()]).collect();
        Self { n: p.num_vars(), cost: p.objective.terms.clone(), ineq, cones, eq }
    }

    fn nu(&self) -> f64 {
        (self.ineq.len() + 3 * self.cones.len()) as f64
    }

    fn cost(&self, x: &[f64]) -> f64 {
        self.cost.iter().map(|&(v, c)| c * x[v]).sum()
    }

    fn interior(&self, x: &[f64]) -> bool {
        self.ineq.iter().all(|g| g.eval(x) > 0.0)
            && self.cones.iter().all(|[a, b, c]| {
                let (a, b, c) = (a.eval(x), b.eval(x), c.eval(x));
                a > 0.0 && b > 0.0 && b * (a / b).ln() - c > 0.0
            })
    }

    fn barrier(&self, x: &[f64]) -> f64 {
        let mut f = 0.0;
        for g in &self.ineq {
            f -= g.eval(x).ln();
        }
        for [a, b, c] in &self.cones {
            let (a, b, c) = (a.eval(x), b.eval(x), c.eval(x));
            f -= (b * (a / b).ln() - c).ln() + a.ln() + b.ln();
        }
        f
    }

    /// Gradient and Hessian of `t * cost + barrier`.
    fn derivatives(&self, x: &[f64], t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.n;
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        for &(v, c) in &self.cost {
            grad[v] += t * c;
        }
        for g in &self.ineq {
            let val = g.eval(x);
            for &(v, c) in &g.terms {
                grad[v] -= c / val;
                for &(w, d) in &g.terms {
                    hess[(v, w)] += c * d / (val * val);
                }
            }
        }
        for rows in &self.cones {
            let a = rows[0].eval(x);
            let b = rows[1].eval(x);
            let c = rows[2].eval(x);
            let la = (a / b).ln();
            let psi = b * la - c;
            let dpsi = [b / a, la - 1.0, -1.0];
            let d2psi = [[-b / (a * a), 1.0 / a, 0.0], [1.0 / a, -1.0 / b, 0.0], [0.0, 0.0, 0.0]];
            let lg = [-dpsi[0] / psi - 1.0 / a, -dpsi[1] / psi - 1.0 / b, -dpsi[2] / psi];
            let mut lh = [[0.0; 3]; 3];
            for p in 0..3 {
                for q in 0..3 {
                    lh[p][q] = dpsi[p] * dpsi[q] / (psi * psi) - d2psi[p][q] / psi;
                }
            }
            lh[0][0] += 1.0 / (a * a);
            lh[1][1] += 1.0 / (b * b);
            for p in 0..3 {
                for &(v, cv) in &rows[p].terms {
                    grad[v] += cv * lg[p];
                    for q in 0..3 {
                        for &(w, cw) in &rows[q].terms {
                            hess[(v, w)] += cv * cw * lh[p][q];
                        }
                    }
                }
            }
        }
        (grad, hess)
    }

    fn eq_matrix(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut e = DMatrix::zeros(self.eq.len(), self.n);
        let mut f = DVector::zeros(self.eq.len());
        for (k, row) in self.eq.iter().enumerate() {
            for &(v, c) in &row.terms {
                e[(k, v)] += c;
            }
            f[k] = -row.constant;
        }
        (e, f)
    }

    /// Barrier path from a strictly feasible `x`; `stop` ends early.
    fn minimize(
        &self,
        mut x: Vec<f64>,
        tol: f64,
        max_newton: usize,
        stop: impl Fn(&[f64]) -> bool,
    ) -> Result<(Vec<f64>, u32), SolveError> {
        let n = self.n;
        let (e, _) = self.eq_matrix();
        let p = self.eq.len();
        let nu = self.nu().max(1.0);
        let mut t = 1.0;
        let mut newton = 0usize;
        loop {
            // centering, inexact when the barrier is very flat
            for _ in 0..STAGE_STEPS {
                if stop(&x) {
                    return Ok((x, newton as u32));
                }
                if newton >= max_newton {
                    return Err(SolveError::Numerical("barrier method hit its Newton step limit".into()));
                }
                newton += 1;
                let (grad, hess) = self.derivatives(&x, t);
                let mut kkt = DMatrix::zeros(n + p, n + p);
                kkt.view_mut((0, 0), (n, n)).copy_from(&hess);
                kkt.view_mut((n, 0), (p, n)).copy_from(&e);
                kkt.view_mut((0, n), (n, p)).copy_from(&e.transpose());
                // a little regularization keeps variables that only appear
                // linearly from making the block singular
                let reg = 1e-12 * (1.0 + hess.diagonal().amax());
                for k in 0..n {
                    kkt[(k, k)] += reg;
                }
                let mut rhs = DVector::zeros(n + p);
                rhs.rows_mut(0, n).copy_from(&(-&grad));
                let sol = kkt.lu().solve(&rhs).ok_or_else(|| SolveError::Numerical("singular Newton system".into()))?;
                let dx = sol.rows(0, n).into_owned();
                let decrement = -grad.dot(&dx);
                if !decrement.is_finite() {
                    return Err(SolveError::Numerical("non-finite Newton decrement".into()));
                }
                if decrement / 2.0 <= 1e-10 {
                    break;
                }
                let f0 = t * self.cost(&x) + self.barrier(&x);
                let mut step = 1.0;
                let trial = |s: f64| -> Vec<f64> { x.iter().zip(dx.iter()).map(|(a, d)| a + s * d).collect() };
                let mut next = trial(step);
                while !self.interior(&next) && step > 1e-16 {
                    step *= 0.5;
                    next = trial(step);
                }
                while step > 1e-16 && t * self.cost(&next) + self.barrier(&next) > f0 - 0.25 * step * decrement {
                    step *= 0.5;
                    next = trial(step);
                }
                if step <= 1e-16 {
                    // cannot make progress at this t; treat as centered
                    break;
                }
                if next == x {
                    // round-off floor reached
                    break;
                }
                x = next;
            }
            if nu / t < tol {
                return Ok((x, newton as u32));
            }
            t *= 8.0;
        }
    }
}

/// Shifts every constraint by a new variable `s`: `g + s`, `(a+s, b+s, c-s)`.
fn phase_one(d: &Dense) -> Dense {
    let s = d.n;
    let mut ineq: Vec<AffineExpr> = d.ineq.iter().map(|g| g.clone().term(s, 1.0)).collect();
    ineq.push(AffineExpr::var(s).plus(1.0));
    ineq.push(AffineExpr::constant(BOX).term(s, -1.0));
    let cones = d
        .cones
        .iter()
        .map(|[a, b, c]| [a.clone().term(s, 1.0), b.clone().term(s, 1.0), c.clone().term(s, -1.0)])
        .collect();
    Dense { n: d.n + 1, cost: vec![(s, 1.0)], ineq, cones, eq: d.eq.clone() }
}

impl ConicBackend for BarrierBackend {
    fn name(&self) -> &'static str {
        "barrier"
    }

    fn solve(&self, program: &ConicProgram) -> Result<ConicSolution, SolveError> {
        program.validate()?;
        let d = Dense::from_program(program);
        let (e, f) = d.eq_matrix();
        let mut x: Vec<f64> = if d.eq.is_empty() {
            vec![0.0; d.n]
        } else {
            let svd = e.clone().svd(true, true);
            let x0 = svd.solve(&f, 1e-12).map_err(|m| SolveError::Numerical(m.to_string()))?;
            if (&e * &x0 - &f).amax() > 1e-9 * (1.0 + f.amax()) {
                return Err(SolveError::Infeasible);
            }
            x0.iter().copied().collect()
        };

        let mut iterations = 0;
        if !d.interior(&x) {
            let p1 = phase_one(&d);
            let mut s = 1.0;
            let mut y = x.clone();
            y.push(s);
            while !p1.interior(&y) {
                s *= 2.0;
                if s > 1e15 {
                    return Err(SolveError::Numerical("could not start phase I".into()));
                }
                *y.last_mut().unwrap() = s;
            }
            let found = |y: &[f64]| y[d.n] < 0.0 && d.interior(&y[..d.n]);
            let (y, it) = p1.minimize(y, self.tol, self.max_newton, found)?;
            iterations += it;
            if !found(&y) {
                return Err(if y[d.n] > 1e-7 {
                    SolveError::Infeasible
                } else {
                    SolveError::Numerical("no strictly feasible point".into())
                });
            }
            x = y[..d.n].to_vec();
        }

        let (x, it) = d.minimize(x, self.tol, self.max_newton, |_| false)?;
        iterations += it;
        if x.iter().any(|v| v.abs() > 0.5 * BOX) {
            return Err(SolveError::Unbounded);
        }
        Ok(ConicSolution { objective: program.objective.eval(&x), x, iterations, reduced_accuracy: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_toy_reaches_log_two() {
        let mut p = ConicProgram::new();
        let a = p.add_var("a", None, None);
        p.objective = AffineExpr::var(a);
        p.add_softplus_le(AffineExpr::constant(0.0), AffineExpr::var(a));
        let s = BarrierBackend::default().solve(&p).unwrap();
        assert!((s.objective - 2f64.ln()).abs() < 1e-8, "{}", s.objective);
    }

    #[test]
    fn small_lp() {
        let mut p = ConicProgram::new();
        let x = p.add_var("x", Some(0.0), None);
        let y = p.add_var("y", Some(0.0), None);
        p.objective = AffineExpr::var(x).term(y, 1.0).scaled(-1.0);
        p.add_linear(AffineExpr::var(x).term(y, 2.0).plus(-4.0), Sense::Le);
        p.add_linear(AffineExpr::var(x).scaled(3.0).term(y, 1.0).plus(-6.0), Sense::Le);
        let s = BarrierBackend::default().solve(&p).unwrap();
        assert!((s.x[x] - 1.6).abs() < 1e-6 && (s.x[y] - 1.2).abs() < 1e-6);
    }

    #[test]
    fn equality_and_phase_one() {
        // min x  s.t. x + y = 1, y <= 0.25, x >= 0.5 (origin is infeasible)
        let mut p = ConicProgram::new();
        let x = p.add_var("x", Some(0.5), None);
        let y = p.add_var("y", None, Some(0.25));
        p.objective = AffineExpr::var(x);
        p.add_linear(AffineExpr::var(x).term(y, 1.0).plus(-1.0), Sense::Eq);
        let s = BarrierBackend::default().solve(&p).unwrap();
        assert!((s.x[x] - 0.75).abs() < 1e-8);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let mut p = ConicProgram::new();
        let x = p.add_var("x", None, None);
        p.objective = AffineExpr::var(x);
        p.add_linear(AffineExpr::var(x).plus(-1.0), Sense::Ge);
        p.add_linear(AffineExpr::var(x), Sense::Le);
        assert_eq!(BarrierBackend::default().solve(&p), Err(SolveError::Infeasible));

        let mut p = ConicProgram::new();
        let x = p.add_var("x", None, Some(3.0));
        p.objective = AffineExpr::var(x);
        assert_eq!(BarrierBackend::default().solve(&p), Err(SolveError::Unbounded));
    }

    #[test]
    fn exp_cone_gradient_matches_finite_differences() {
        let mut p = ConicProgram::new();
        let a = p.add_var("a", None, None);
        let b = p.add_var("b", None, None);
        let c = p.add_var("c", None, None);
        p.add_exp_cone(AffineExpr::var(a), AffineExpr::var(b), AffineExpr::var(c));
        let d = Dense::from_program(&p);
        let x = [2.0, 0.7, -0.3];
        let (g, h) = d.derivatives(&x, 0.0);
        let eps = 1e-6;
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += eps;
            xm[k] -= eps;
            let fd = (d.barrier(&xp) - d.barrier(&xm)) / (2.0 * eps);
            assert!((fd - g[k]).abs() < 1e-6, "grad {k}: {fd} vs {}", g[k]);
            let (gp, _) = d.derivatives(&xp, 0.0);
            let (gm, _) = d.derivatives(&xm, 0.0);
            for j in 0..3 {
                let fdh = (gp[j] - gm[j]) / (2.0 * eps);
                assert!((fdh - h[(j, k)]).abs() < 1e-5, "hess {j},{k}");
            }
        }
    }
}
