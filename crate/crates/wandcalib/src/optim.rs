//! Nonlinear least-squares machinery.
//!
//! Two solvers share one Levenberg-Marquardt loop: a dense solver for small
//! problems (the wand-distance objective) and a structure-exploiting solver
//! for bundle adjustment, which eliminates the independent per-frame wand
//! blocks through a Schur complement so each iteration stays linear in the
//! number of frames.
//!
//! Damping is plain `lambda * I` with the classic multiply/divide-by-10
//! schedule. A failed or non-finite residual evaluation at a trial point is
//! treated as a rejected step (the damping escalates); failures at the start
//! point or in an accepted-state Jacobian abort with the last usable state.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Levenberg-Marquardt policy knobs.
#[derive(Debug, Clone, Copy)]
pub struct LmConfig {
    /// Initial damping added as `lambda * I` to the normal equations.
    pub damping_init: f64,
    /// Multiplier applied to the damping after a rejected step.
    pub damping_up: f64,
    /// Divisor applied to the damping after an accepted step.
    pub damping_down: f64,
    pub max_iterations: usize,
    /// Stop when an accepted step reduces the cost by less than this
    /// fraction of the previous cost.
    pub cost_tol_rel: f64,
    /// Stop outright when the cost falls below this; zero-residual optima
    /// otherwise churn at the double-precision noise floor.
    pub cost_tol_abs: f64,
    /// Stop when the gradient infinity norm drops below this.
    pub grad_tol: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            damping_init: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            max_iterations: 100,
            cost_tol_rel: 1e-10,
            cost_tol_abs: 1e-20,
            grad_tol: 1e-12,
        }
    }
}

const DAMPING_MAX: f64 = 1e16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    CostTolerance,
    GradientTolerance,
    /// No further step could be accepted even at maximum damping.
    DampingSaturated,
    MaxIterations,
}

/// Outcome summary of one minimization run.
#[derive(Debug, Clone)]
pub struct LmReport {
    /// Number of accepted steps.
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: Termination,
}

/// A dense least-squares problem: residual vector and Jacobian at a point.
/// Evaluation may fail (e.g. a transient state projects outside the model's
/// domain); the solver treats trial-point failures as rejected steps.
pub trait LeastSquaresProblem {
    fn residual_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;
}

/// A problem split into one shared parameter block plus independent
/// per-item blocks (camera parameters vs. per-frame wand poses). Residual
/// chunks touch the shared block and exactly one item block.
pub trait BipartiteProblem {
    fn global_dim(&self) -> usize;
    fn item_count(&self) -> usize;
    /// Parameters per item block.
    fn item_dim(&self) -> usize;
    /// Residual scalars produced by one item's chunk.
    fn item_residual_dim(&self, item: usize) -> usize;
    /// Evaluates one chunk. `jac_global` is `m x global_dim`, `jac_item` is
    /// `m x item_dim`; both are pre-zeroed when requested.
    fn eval_item(
        &self,
        item: usize,
        global: &[f64],
        item_params: &[f64],
        residuals: &mut [f64],
        jac_global: Option<&mut DMatrix<f64>>,
        jac_item: Option<&mut DMatrix<f64>>,
    ) -> Result<()>;
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Minimizes `sum(r_i^2)` with dense normal equations.
pub fn lm_minimize(
    problem: &dyn LeastSquaresProblem,
    x0: &DVector<f64>,
    cfg: &LmConfig,
) -> Result<(DVector<f64>, LmReport)> {
    let n = problem.param_dim();
    if x0.len() != n {
        return Err(Error::InvalidInput(format!(
            "state has {} parameters, problem expects {n}",
            x0.len()
        )));
    }

    let mut x = x0.clone();
    let mut r = problem.residuals(&x)?;
    if !finite(&r) {
        return Err(Error::NumericFailure {
            reason: "non-finite residual at the start point".into(),
            last_good: x.as_slice().to_vec(),
        });
    }
    let initial_cost = r.norm_squared();
    let mut cost = initial_cost;
    let mut lambda = cfg.damping_init;
    let mut iterations = 0usize;
    let mut termination = Termination::MaxIterations;

    'outer: for _ in 0..cfg.max_iterations {
        if cost <= cfg.cost_tol_abs {
            termination = Termination::CostTolerance;
            break;
        }
        let jac = match problem.jacobian(&x) {
            Ok(j) if j.iter().all(|v| v.is_finite()) => j,
            _ => {
                return Err(Error::NumericFailure {
                    reason: "non-finite Jacobian at an accepted state".into(),
                    last_good: x.as_slice().to_vec(),
                })
            }
        };
        let grad = jac.transpose() * &r;
        if grad.amax() < cfg.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        let jtj = jac.transpose() * &jac;

        loop {
            let mut h = jtj.clone();
            for i in 0..n {
                h[(i, i)] += lambda;
            }
            let step = Cholesky::new(h).map(|ch| ch.solve(&(-&grad)));
            let accepted = step.and_then(|delta| {
                let x_new = &x + &delta;
                match problem.residuals(&x_new) {
                    Ok(r_new) if finite(&r_new) => {
                        let c_new = r_new.norm_squared();
                        (c_new < cost).then_some((x_new, r_new, c_new))
                    }
                    _ => None,
                }
            });
            match accepted {
                Some((x_new, r_new, c_new)) => {
                    let drop = cost - c_new;
                    x = x_new;
                    r = r_new;
                    cost = c_new;
                    iterations += 1;
                    lambda = (lambda / cfg.damping_down).max(1e-18);
                    if cost <= cfg.cost_tol_abs
                        || drop <= cfg.cost_tol_rel * cost.max(f64::MIN_POSITIVE)
                    {
                        termination = Termination::CostTolerance;
                        break 'outer;
                    }
                    break;
                }
                None => {
                    lambda *= cfg.damping_up;
                    if lambda > DAMPING_MAX {
                        termination = Termination::DampingSaturated;
                        break 'outer;
                    }
                }
            }
        }
    }

    Ok((
        x,
        LmReport {
            iterations,
            initial_cost,
            final_cost: cost,
            termination,
        },
    ))
}

/// Per-item workspace for the Schur elimination.
struct ItemBlocks {
    /// Item Gram block `Ji' Ji`.
    c: DMatrix<f64>,
    /// Coupling block `Jg' Ji`.
    e: DMatrix<f64>,
    /// Item gradient `Ji' r`.
    g: DVector<f64>,
}

fn sparse_cost(problem: &dyn BipartiteProblem, x: &DVector<f64>) -> Option<f64> {
    let g_dim = problem.global_dim();
    let k = problem.item_dim();
    let global = &x.as_slice()[..g_dim];
    let mut cost = 0.0;
    for item in 0..problem.item_count() {
        let m = problem.item_residual_dim(item);
        let mut r = vec![0.0; m];
        let offset = g_dim + item * k;
        problem
            .eval_item(item, global, &x.as_slice()[offset..offset + k], &mut r, None, None)
            .ok()?;
        if !r.iter().all(|v| v.is_finite()) {
            return None;
        }
        cost += r.iter().map(|v| v * v).sum::<f64>();
    }
    Some(cost)
}

/// Names the global parameter least constrained by a singular reduced system.
fn diagnose_deficiency(s: &DMatrix<f64>) -> String {
    let eig = s.clone().symmetric_eigen();
    let mut min_idx = 0;
    for i in 0..eig.eigenvalues.len() {
        if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let null = eig.eigenvectors.column(min_idx);
    let mut worst = 0;
    for i in 0..null.len() {
        if null[i].abs() > null[worst].abs() {
            worst = i;
        }
    }
    format!("global parameter {worst}")
}

/// Minimizes a bipartite problem, eliminating item blocks by Schur
/// complement. Matches [`lm_minimize`] step for step on the same problem and
/// damping schedule; only the linear solve differs.
pub fn sparse_lm_minimize(
    problem: &dyn BipartiteProblem,
    x0: &DVector<f64>,
    cfg: &LmConfig,
) -> Result<(DVector<f64>, LmReport)> {
    let g_dim = problem.global_dim();
    let k = problem.item_dim();
    let items = problem.item_count();
    let total = g_dim + k * items;
    if x0.len() != total {
        return Err(Error::InvalidInput(format!(
            "state has {} parameters, problem expects {total}",
            x0.len()
        )));
    }
    for item in 0..items {
        if problem.item_residual_dim(item) == 0 {
            return Err(Error::RankDeficient {
                block: format!("item block {item} has no residuals"),
            });
        }
    }

    let mut x = x0.clone();
    let mut cost = sparse_cost(problem, &x).ok_or_else(|| Error::NumericFailure {
        reason: "non-finite residual at the start point".into(),
        last_good: x.as_slice().to_vec(),
    })?;
    let initial_cost = cost;
    let mut lambda = cfg.damping_init;
    let mut iterations = 0usize;
    let mut termination = Termination::MaxIterations;

    'outer: for _ in 0..cfg.max_iterations {
        if cost <= cfg.cost_tol_abs {
            termination = Termination::CostTolerance;
            break;
        }
        // Assemble normal-equation blocks at the current state.
        let mut b = DMatrix::<f64>::zeros(g_dim, g_dim);
        let mut g_grad = DVector::<f64>::zeros(g_dim);
        let mut blocks: Vec<ItemBlocks> = Vec::with_capacity(items);
        {
            let global = &x.as_slice()[..g_dim];
            for item in 0..items {
                let m = problem.item_residual_dim(item);
                let mut r = vec![0.0; m];
                let mut jg = DMatrix::<f64>::zeros(m, g_dim);
                let mut ji = DMatrix::<f64>::zeros(m, k);
                let offset = g_dim + item * k;
                let ok = problem
                    .eval_item(
                        item,
                        global,
                        &x.as_slice()[offset..offset + k],
                        &mut r,
                        Some(&mut jg),
                        Some(&mut ji),
                    )
                    .is_ok();
                if !ok
                    || !r.iter().all(|v| v.is_finite())
                    || !jg.iter().all(|v| v.is_finite())
                    || !ji.iter().all(|v| v.is_finite())
                {
                    return Err(Error::NumericFailure {
                        reason: format!("non-finite Jacobian in item {item} at an accepted state"),
                        last_good: x.as_slice().to_vec(),
                    });
                }
                let rv = DVector::from_column_slice(&r);
                b += jg.transpose() * &jg;
                g_grad += jg.transpose() * &rv;
                blocks.push(ItemBlocks {
                    c: ji.transpose() * &ji,
                    e: jg.transpose() * &ji,
                    g: ji.transpose() * &rv,
                });
            }
        }

        let grad_inf = blocks
            .iter()
            .map(|bl| bl.g.amax())
            .fold(g_grad.amax(), f64::max);
        if grad_inf < cfg.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }

        loop {
            // Damped item blocks and their inverses.
            let mut s = b.clone();
            for i in 0..g_dim {
                s[(i, i)] += lambda;
            }
            let mut rhs = -&g_grad;
            let mut c_inv: Vec<DMatrix<f64>> = Vec::with_capacity(items);
            let mut singular_item = None;
            for (item, bl) in blocks.iter().enumerate() {
                let mut c = bl.c.clone();
                for i in 0..k {
                    c[(i, i)] += lambda;
                }
                match Cholesky::new(c) {
                    Some(ch) => {
                        let inv = ch.inverse();
                        s -= &bl.e * &inv * bl.e.transpose();
                        rhs += &bl.e * &inv * &bl.g;
                        c_inv.push(inv);
                    }
                    None => {
                        singular_item = Some(item);
                        break;
                    }
                }
            }

            let solved = if singular_item.is_some() {
                None
            } else {
                match Cholesky::new(s.clone()) {
                    Some(ch) => Some(ch.solve(&rhs)),
                    None => {
                        // The damped system should be positive definite; a
                        // failure here at saturated damping is a structural
                        // deficiency worth naming.
                        if lambda * cfg.damping_up > DAMPING_MAX {
                            return Err(Error::RankDeficient {
                                block: diagnose_deficiency(&b),
                            });
                        }
                        None
                    }
                }
            };

            let accepted = solved.and_then(|dg| {
                let mut x_new = x.clone();
                for i in 0..g_dim {
                    x_new[i] += dg[i];
                }
                for (item, (bl, inv)) in blocks.iter().zip(&c_inv).enumerate() {
                    let di = inv * (-&bl.g - bl.e.transpose() * &dg);
                    let offset = g_dim + item * k;
                    for i in 0..k {
                        x_new[offset + i] += di[i];
                    }
                }
                sparse_cost(problem, &x_new)
                    .filter(|&c_new| c_new < cost)
                    .map(|c_new| (x_new, c_new))
            });

            match accepted {
                Some((x_new, c_new)) => {
                    let drop = cost - c_new;
                    x = x_new;
                    cost = c_new;
                    iterations += 1;
                    lambda = (lambda / cfg.damping_down).max(1e-18);
                    if cost <= cfg.cost_tol_abs
                        || drop <= cfg.cost_tol_rel * cost.max(f64::MIN_POSITIVE)
                    {
                        termination = Termination::CostTolerance;
                        break 'outer;
                    }
                    break;
                }
                None => {
                    lambda *= cfg.damping_up;
                    if lambda > DAMPING_MAX {
                        termination = Termination::DampingSaturated;
                        break 'outer;
                    }
                }
            }
        }
    }

    Ok((
        x,
        LmReport {
            iterations,
            initial_cost,
            final_cost: cost,
            termination,
        },
    ))
}

/// Dense view of a bipartite problem, for oracle comparisons against the
/// Schur path.
pub struct DenseBipartite<'a>(pub &'a dyn BipartiteProblem);

impl LeastSquaresProblem for DenseBipartite<'_> {
    fn residual_dim(&self) -> usize {
        (0..self.0.item_count()).map(|i| self.0.item_residual_dim(i)).sum()
    }

    fn param_dim(&self) -> usize {
        self.0.global_dim() + self.0.item_dim() * self.0.item_count()
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let g_dim = self.0.global_dim();
        let k = self.0.item_dim();
        let mut out = DVector::zeros(self.residual_dim());
        let mut row = 0;
        for item in 0..self.0.item_count() {
            let m = self.0.item_residual_dim(item);
            let offset = g_dim + item * k;
            let mut r = vec![0.0; m];
            self.0.eval_item(
                item,
                &x.as_slice()[..g_dim],
                &x.as_slice()[offset..offset + k],
                &mut r,
                None,
                None,
            )?;
            out.rows_mut(row, m).copy_from_slice(&r);
            row += m;
        }
        Ok(out)
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let g_dim = self.0.global_dim();
        let k = self.0.item_dim();
        let mut out = DMatrix::zeros(self.residual_dim(), self.param_dim());
        let mut row = 0;
        for item in 0..self.0.item_count() {
            let m = self.0.item_residual_dim(item);
            let offset = g_dim + item * k;
            let mut r = vec![0.0; m];
            let mut jg = DMatrix::zeros(m, g_dim);
            let mut ji = DMatrix::zeros(m, k);
            self.0.eval_item(
                item,
                &x.as_slice()[..g_dim],
                &x.as_slice()[offset..offset + k],
                &mut r,
                Some(&mut jg),
                Some(&mut ji),
            )?;
            out.view_mut((row, 0), (m, g_dim)).copy_from(&jg);
            out.view_mut((row, offset), (m, k)).copy_from(&ji);
            row += m;
        }
        Ok(out)
    }
}

/// Central-difference Jacobian with per-parameter step
/// `rel * max(|x_i|, 1)`. The development-time oracle for analytic Jacobians.
pub fn numeric_jacobian(
    problem: &dyn LeastSquaresProblem,
    x: &DVector<f64>,
    rel: f64,
) -> Result<DMatrix<f64>> {
    let n = problem.param_dim();
    let mut out = DMatrix::zeros(problem.residual_dim(), n);
    for i in 0..n {
        let h = rel * x[i].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let rp = problem.residuals(&xp)?;
        let rm = problem.residuals(&xm)?;
        out.set_column(i, &((rp - rm) / (2.0 * h)));
    }
    Ok(out)
}
