//! Interior-point backend built on the Clarabel solver.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};

use super::conic::{AffineExpr, ConicBackend, ConicProgram, ConicSolution, Sense, SolveError};

#[derive(Debug, Clone)]
pub struct ClarabelBackend {
    pub tol: f64,
    pub max_iter: u32,
}

impl Default for ClarabelBackend {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 400 }
    }
}

/// A stalled iterate within `STALL_GAP` counts as solved; one within
/// `LOOSE_STALL_GAP` is returned flagged as reduced accuracy.
const STALL_GAP: f64 = 1e-5;
const LOOSE_STALL_GAP: f64 = 1e-3;
const STALL_RESIDUAL: f64 = 1e-6;

/// Rows of `A x + s = b` grouped by cone.
#[derive(Default)]
struct Rows {
    i: Vec<usize>,
    j: Vec<usize>,
    v: Vec<f64>,
    b: Vec<f64>,
}

impl Rows {
    /// Adds a row with slack `s = sign * expr(x)`.
    fn push(&mut self, expr: &AffineExpr, sign: f64) {
        let row = self.b.len();
        for &(var, c) in &expr.terms {
            self.i.push(row);
            self.j.push(var);
            self.v.push(-sign * c);
        }
        self.b.push(sign * expr.constant);
    }

    fn push_bound(&mut self, var: usize, sign: f64, bound: f64) {
        // s = sign * (x - bound)
        let row = self.b.len();
        self.i.push(row);
        self.j.push(var);
        self.v.push(-sign);
        self.b.push(-sign * bound);
    }

    fn len(&self) -> usize {
        self.b.len()
    }
}

impl ConicBackend for ClarabelBackend {
    fn name(&self) -> &'static str {
        "clarabel"
    }

    fn solve(&self, program: &ConicProgram) -> Result<ConicSolution, SolveError> {
        program.validate()?;
        let n = program.num_vars();
        let mut zero = Rows::default();
        let mut nonneg = Rows::default();
        let mut expc = Rows::default();
        for row in &program.linear {
            match row.sense {
                Sense::Eq => zero.push(&row.expr, 1.0),
                Sense::Ge => nonneg.push(&row.expr, 1.0),
                Sense::Le => nonneg.push(&row.expr, -1.0),
            }
        }
        for (k, var) in program.variables.iter().enumerate() {
            if let Some(l) = var.lower {
                nonneg.push_bound(k, 1.0, l);
            }
            if let Some(u) = var.upper {
                nonneg.push_bound(k, -1.0, u);
            }
        }
        // Clarabel orders the cone as (x, y, z) with y exp(x / y) <= z
        for cone in &program.exp_cones {
            expc.push(&cone.c, 1.0);
            expc.push(&cone.b, 1.0);
            expc.push(&cone.a, 1.0);
        }

        let (nz, nn, ne) = (zero.len(), nonneg.len(), expc.len());
        let m = nz + nn + ne;
        let mut ii = Vec::with_capacity(zero.i.len() + nonneg.i.len() + expc.i.len());
        let mut jj = Vec::with_capacity(ii.capacity());
        let mut vv = Vec::with_capacity(ii.capacity());
        let mut b = Vec::with_capacity(m);
        for (rows, offset) in [(&zero, 0), (&nonneg, nz), (&expc, nz + nn)] {
            ii.extend(rows.i.iter().map(|r| r + offset));
            jj.extend_from_slice(&rows.j);
            vv.extend_from_slice(&rows.v);
            b.extend_from_slice(&rows.b);
        }
        let a = CscMatrix::new_from_triplets(m, n, ii, jj, vv);
        let p = CscMatrix::zeros((n, n));
        let mut q = vec![0.0; n];
        for &(var, c) in &program.objective.terms {
            q[var] += c;
        }
        // unit-scale costs; the 1/N weights on r otherwise stall large programs
        let cost_scale = q.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if cost_scale > 0.0 {
            q.iter_mut().for_each(|v| *v /= cost_scale);
        }

        let mut cones = Vec::new();
        if nz > 0 {
            cones.push(SupportedConeT::ZeroConeT(nz));
        }
        if nn > 0 {
            cones.push(SupportedConeT::NonnegativeConeT(nn));
        }
        for _ in 0..program.exp_cones.len() {
            cones.push(SupportedConeT::ExponentialConeT());
        }

        let mut fallback: Option<(f64, ConicSolution)> = None;
        let mut last = SolverStatus::Unsolved;
        for attempt in 0..4 {
            let mut builder = DefaultSettingsBuilder::default();
            builder
                .verbose(false)
                .max_iter(self.max_iter)
                .tol_gap_abs(self.tol)
                .tol_gap_rel(self.tol)
                .tol_feas(self.tol)
                .min_terminate_step_length(1e-8)
                .iterative_refinement_max_iter(50)
                .iterative_refinement_reltol(1e-15)
                .iterative_refinement_abstol(1e-15);
            // fallbacks for stalled solves
            match attempt {
                1 => {
                    builder.min_switch_step_length(1e-3);
                }
                2 => {
                    builder.static_regularization_constant(1e-7).max_step_fraction(0.9);
                }
                3 => {
                    builder.equilibrate_enable(false).min_switch_step_length(1e-3);
                }
                _ => {}
            }
            let settings = builder.build().map_err(|e| SolveError::Numerical(format!("settings: {e:?}")))?;
            let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
                .map_err(|e| SolveError::Malformed(format!("{e:?}")))?;
            solver.solve();
            let sol = &solver.solution;
            let found = |reduced| ConicSolution {
                objective: program.objective.eval(&sol.x),
                x: sol.x.clone(),
                iterations: sol.iterations,
                reduced_accuracy: reduced,
            };
            match sol.status {
                SolverStatus::Solved => return Ok(found(false)),
                SolverStatus::AlmostSolved => return Ok(found(false)),
                SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                    return Err(SolveError::Infeasible)
                }
                SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => return Err(SolveError::Unbounded),
                status => {
                    last = status;
                    let gap = (sol.obj_val - sol.obj_val_dual).abs() / (1.0 + sol.obj_val.abs());
                    let usable = gap.is_finite() && gap <= LOOSE_STALL_GAP && sol.r_prim <= STALL_RESIDUAL;
                    if usable && fallback.as_ref().is_none_or(|(g, _)| gap < *g) {
                        fallback = Some((gap, found(gap > STALL_GAP)));
                    }
                }
            }
        }
        match fallback {
            Some((_, sol)) => Ok(sol),
            None => Err(SolveError::Numerical(format!("clarabel stopped with {last:?}"))),
        }
    }
}
