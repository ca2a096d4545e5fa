//! Dense convex QP solver and MPC condensing.
//!
//! Problems have the form
//!
//! ```text
//!     minimize    ½ xᵀ H x + gᵀ x
//!     subject to  lower ≤ x ≤ upper
//!                 l ≤ A x ≤ u
//! ```
//!
//! and are solved with a primal active-set method. Equality-constrained
//! subproblems use the range-space formulation on a Cholesky factor of `H`.
//! When the start point is infeasible a phase-1 problem with elastic slacks
//! (which is feasible by construction) is solved with the same routine.
//!
//! Sizes here are tiny (a ten-step horizon with scalar input), so everything is
//! dense and recomputed per iteration.

use std::fmt::Write as _;

use thiserror::Error;

use crate::linalg::{dot, norm_inf, Cholesky, Matrix};
use crate::scalar::{lit, Scalar};

/// Cap on working-set changes before giving up.
pub const MAX_WORKING_SET_CHANGES: usize = 200;

/// Diagonal shift applied when `H` is only semidefinite.
pub const HESSIAN_REGULARIZATION: f64 = 1e-9;

/// Linear penalty on phase-1 slacks. Must exceed the multipliers of the
/// least-distance problem, which are bounded by the distance to feasibility.
const PHASE1_PENALTY: f64 = 1e4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("hessian is not symmetric (max asymmetry {0})")]
    NotSymmetric(f64),
    #[error("hessian is not positive semidefinite")]
    NotConvex,
    #[error("non-finite problem data in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem<T> {
    pub hessian: Matrix<T>,
    pub gradient: Vec<T>,
    /// Per-variable bounds; infinite entries are ignored.
    pub lower: Vec<T>,
    pub upper: Vec<T>,
    /// General inequality rows `l ≤ A x ≤ u` (may have zero rows).
    pub constraints: Matrix<T>,
    pub constraint_lower: Vec<T>,
    pub constraint_upper: Vec<T>,
}

impl<T: Scalar> QpProblem<T> {
    /// Unconstrained problem.
    pub fn unconstrained(hessian: Matrix<T>, gradient: Vec<T>) -> Self {
        let n = gradient.len();
        Self {
            hessian,
            gradient,
            lower: vec![T::neg_infinity(); n],
            upper: vec![T::infinity(); n],
            constraints: Matrix::zeros(0, n),
            constraint_lower: Vec::new(),
            constraint_upper: Vec::new(),
        }
    }

    pub fn with_bounds(mut self, lower: Vec<T>, upper: Vec<T>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_constraints(mut self, a: Matrix<T>, lower: Vec<T>, upper: Vec<T>) -> Self {
        self.constraints = a;
        self.constraint_lower = lower;
        self.constraint_upper = upper;
        self
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn objective(&self, x: &[T]) -> T {
        let hx = self.hessian.mul_vec(x);
        lit::<T>(0.5) * dot(x, &hx) + dot(&self.gradient, x)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        let dims = [
            ("hessian rows", self.hessian.rows()),
            ("hessian cols", self.hessian.cols()),
            ("lower", self.lower.len()),
            ("upper", self.upper.len()),
            ("constraint cols", self.constraints.cols()),
        ];
        for (what, len) in dims {
            if len != n {
                return Err(QpError::DimensionMismatch(format!(
                    "{what} is {len}, expected {n}"
                )));
            }
        }
        let m = self.constraints.rows();
        if self.constraint_lower.len() != m || self.constraint_upper.len() != m {
            return Err(QpError::DimensionMismatch(format!(
                "constraint bounds have lengths {}/{}, expected {m}",
                self.constraint_lower.len(),
                self.constraint_upper.len()
            )));
        }
        if self.hessian.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("hessian"));
        }
        if self.gradient.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("gradient"));
        }
        if self.constraints.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("constraint matrix"));
        }
        let bounds = self
            .lower
            .iter()
            .chain(&self.upper)
            .chain(&self.constraint_lower)
            .chain(&self.constraint_upper);
        if bounds.into_iter().any(|v| v.is_nan()) {
            return Err(QpError::NonFinite("bounds"));
        }
        let scale = T::one().max(self.hessian.max_abs());
        let asym = self.hessian.max_asymmetry();
        if asym > lit::<T>(1e-10) * scale {
            return Err(QpError::NotSymmetric(asym.to_f64_lossy()));
        }
        Ok(())
    }

    /// Plain-text dump for debugging.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let n = self.dim();
        let _ = writeln!(s, "qp n={n} m={}", self.constraints.rows());
        for i in 0..n {
            let row: Vec<String> = self
                .hessian
                .row(i)
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            let _ = writeln!(s, "H[{i}] {}", row.join(" "));
        }
        let fmt = |v: &[T]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(s, "g {}", fmt(&self.gradient));
        let _ = writeln!(s, "lb {}", fmt(&self.lower));
        let _ = writeln!(s, "ub {}", fmt(&self.upper));
        for j in 0..self.constraints.rows() {
            let _ = writeln!(
                s,
                "A[{j}] {} in [{:?}, {:?}]",
                fmt(self.constraints.row(j)),
                self.constraint_lower[j],
                self.constraint_upper[j]
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

/// KKT residuals at the returned point (infinity norms).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktDiagnostics<T> {
    pub stationarity: T,
    pub primal_infeasibility: T,
    pub complementarity: T,
    pub dual_infeasibility: T,
}

impl<T: Scalar> KktDiagnostics<T> {
    pub fn max(&self) -> T {
        self.stationarity
            .max(self.primal_infeasibility)
            .max(self.complementarity)
            .max(self.dual_infeasibility)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T> {
    pub x: Vec<T>,
    pub objective: T,
    pub status: QpStatus,
    pub kkt: KktDiagnostics<T>,
    pub kkt_residual: T,
    /// Working-set changes, including phase 1.
    pub iterations: usize,
    /// `true` when `H` needed the semidefinite shift.
    pub regularized: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings<T> {
    /// Termination tolerance on primal/dual feasibility and complementarity.
    pub tolerance: T,
    pub max_working_set_changes: usize,
}

impl<T: Scalar> Default for QpSettings<T> {
    fn default() -> Self {
        Self {
            tolerance: T::default_tolerance(),
            max_working_set_changes: MAX_WORKING_SET_CHANGES,
        }
    }
}

/// One-sided constraint `normalᵀ x ≤ rhs`.
#[derive(Debug, Clone)]
struct Halfspace<T> {
    normal: Vec<T>,
    rhs: T,
    bound: bool,
}

impl<T: Scalar> Halfspace<T> {
    fn slack(&self, x: &[T]) -> T {
        self.rhs - dot(&self.normal, x)
    }
}

fn halfspaces<T: Scalar>(p: &QpProblem<T>) -> Vec<Halfspace<T>> {
    let n = p.dim();
    let mut out = Vec::new();
    let unit = |i: usize, s: T| {
        let mut e = vec![T::zero(); n];
        e[i] = s;
        e
    };
    for i in 0..n {
        if p.upper[i].is_finite() {
            out.push(Halfspace {
                normal: unit(i, T::one()),
                rhs: p.upper[i],
                bound: true,
            });
        }
        if p.lower[i].is_finite() {
            out.push(Halfspace {
                normal: unit(i, -T::one()),
                rhs: -p.lower[i],
                bound: true,
            });
        }
    }
    for j in 0..p.constraints.rows() {
        let row = p.constraints.row(j);
        if p.constraint_upper[j].is_finite() {
            out.push(Halfspace {
                normal: row.to_vec(),
                rhs: p.constraint_upper[j],
                bound: false,
            });
        }
        if p.constraint_lower[j].is_finite() {
            out.push(Halfspace {
                normal: row.iter().map(|&v| -v).collect(),
                rhs: -p.constraint_lower[j],
                bound: false,
            });
        }
    }
    out
}

fn bounds_empty<T: Scalar>(p: &QpProblem<T>, tol: T) -> bool {
    p.lower.iter().zip(&p.upper).any(|(&l, &u)| l > u + tol)
        || p.constraint_lower
            .iter()
            .zip(&p.constraint_upper)
            .any(|(&l, &u)| l > u + tol)
}

/// Solves the QP. `warm_start` seeds the start point and initial working set;
/// it affects only the path, not the optimum.
pub fn solve<T: Scalar>(
    problem: &QpProblem<T>,
    warm_start: Option<&[T]>,
) -> Result<QpSolution<T>, QpError> {
    solve_with(problem, warm_start, &QpSettings::default())
}

pub fn solve_with<T: Scalar>(
    problem: &QpProblem<T>,
    warm_start: Option<&[T]>,
    settings: &QpSettings<T>,
) -> Result<QpSolution<T>, QpError> {
    problem.validate()?;
    let n = problem.dim();
    if let Some(w) = warm_start {
        if w.len() != n {
            return Err(QpError::DimensionMismatch(format!(
                "warm start has length {}, expected {n}",
                w.len()
            )));
        }
    }
    let tol = settings.tolerance;

    let (chol, hessian, regularized) = factor_hessian(&problem.hessian)?;
    let constraints = halfspaces(problem);

    let start: Vec<T> = match warm_start {
        Some(w) if w.iter().all(|v| v.is_finite()) => w.to_vec(),
        _ => vec![T::zero(); n],
    };
    let start: Vec<T> = start
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = if problem.lower[i].is_finite() {
                v.max(problem.lower[i])
            } else {
                v
            };
            if problem.upper[i].is_finite() {
                v.min(problem.upper[i])
            } else {
                v
            }
        })
        .collect();

    if bounds_empty(problem, tol) {
        return Ok(infeasible(problem, start, 0, regularized));
    }

    let mut iterations = 0;
    let feasible = constraints.iter().all(|c| c.slack(&start) >= -tol);
    let x0 = if feasible {
        start
    } else {
        match phase_one(problem, &constraints, &start, settings) {
            PhaseOne::Feasible { x, iterations: it } => {
                iterations += it;
                x
            }
            PhaseOne::Infeasible { x, iterations: it } => {
                return Ok(infeasible(problem, x, iterations + it, regularized));
            }
        }
    };

    let outcome = active_set(
        &chol,
        &hessian,
        &problem.gradient,
        &constraints,
        x0,
        settings,
        settings.max_working_set_changes.saturating_sub(iterations),
    );
    iterations += outcome.changes;
    let kkt = kkt_diagnostics(&hessian, &problem.gradient, &constraints, &outcome);
    let status = if outcome.converged && kkt.max() <= tol.max(lit(1e-8)) {
        QpStatus::Optimal
    } else {
        // Either the change budget ran out or the working set converged with
        // residuals above tolerance; neither is reported as optimal.
        QpStatus::MaxIter
    };
    Ok(QpSolution {
        objective: problem.objective(&outcome.x),
        x: outcome.x,
        status,
        kkt_residual: kkt.max(),
        kkt,
        iterations,
        regularized,
    })
}

fn infeasible<T: Scalar>(
    problem: &QpProblem<T>,
    x: Vec<T>,
    iterations: usize,
    regularized: bool,
) -> QpSolution<T> {
    QpSolution {
        objective: problem.objective(&x),
        x,
        status: QpStatus::Infeasible,
        kkt: KktDiagnostics::default(),
        kkt_residual: T::infinity(),
        iterations,
        regularized,
    }
}

fn factor_hessian<T: Scalar>(h: &Matrix<T>) -> Result<(Cholesky<T>, Matrix<T>, bool), QpError> {
    if let Some(c) = Cholesky::new(h) {
        return Ok((c, h.clone(), false));
    }
    let scale = T::one().max(h.max_abs());
    let shifted =
        h.add(&Matrix::identity(h.rows()).scale(lit::<T>(HESSIAN_REGULARIZATION) * scale));
    match Cholesky::new(&shifted) {
        Some(c) => Ok((c, shifted, true)),
        None => Err(QpError::NotConvex),
    }
}

struct ActiveSetOutcome<T> {
    x: Vec<T>,
    working: Vec<usize>,
    multipliers: Vec<T>,
    changes: usize,
    converged: bool,
}

/// Solves `S μ = rhs` with `S = A_W H⁻¹ A_Wᵀ`; `None` if `S` is singular.
fn working_set_multipliers<T: Scalar>(
    chol: &Cholesky<T>,
    constraints: &[Halfspace<T>],
    working: &[usize],
    grad: &[T],
) -> Option<(Vec<T>, Vec<T>)> {
    let n = grad.len();
    let h_inv_q = chol.solve(grad);
    if working.is_empty() {
        return Some((Vec::new(), h_inv_q.iter().map(|&v| -v).collect()));
    }
    let h_inv_a: Vec<Vec<T>> = working
        .iter()
        .map(|&i| chol.solve(&constraints[i].normal))
        .collect();
    let k = working.len();
    let s = Matrix::from_fn(k, k, |r, c| {
        dot(&constraints[working[r]].normal, &h_inv_a[c])
    });
    let s_chol = Cholesky::new(&s)?;
    let rhs: Vec<T> = working
        .iter()
        .map(|&i| -dot(&constraints[i].normal, &h_inv_q))
        .collect();
    let mu = s_chol.solve(&rhs);
    // p = -H⁻¹(q + A_Wᵀ μ)
    let mut p: Vec<T> = h_inv_q.iter().map(|&v| -v).collect();
    for (m, col) in mu.iter().zip(&h_inv_a) {
        for j in 0..n {
            p[j] -= *m * col[j];
        }
    }
    Some((mu, p))
}

fn independent_of<T: Scalar>(
    chol: &Cholesky<T>,
    constraints: &[Halfspace<T>],
    working: &[usize],
    candidate: usize,
) -> bool {
    let mut trial = working.to_vec();
    trial.push(candidate);
    let k = trial.len();
    let h_inv_a: Vec<Vec<T>> = trial
        .iter()
        .map(|&i| chol.solve(&constraints[i].normal))
        .collect();
    let s = Matrix::from_fn(k, k, |r, c| dot(&constraints[trial[r]].normal, &h_inv_a[c]));
    // Relative pivot test guards against near-dependence.
    let scale = (0..k).fold(T::zero(), |m, i| m.max(s[(i, i)]));
    let shifted = s.add(&Matrix::identity(k).scale(-scale * lit::<T>(1e-10)));
    Cholesky::new(&shifted).is_some()
}

fn active_set<T: Scalar>(
    chol: &Cholesky<T>,
    hessian: &Matrix<T>,
    g: &[T],
    constraints: &[Halfspace<T>],
    mut x: Vec<T>,
    settings: &QpSettings<T>,
    max_changes: usize,
) -> ActiveSetOutcome<T> {
    let tol = settings.tolerance;
    let step_tol = T::epsilon().sqrt() * lit(1e-2);
    let mut working: Vec<usize> = Vec::new();
    for (i, c) in constraints.iter().enumerate() {
        if c.slack(&x).abs() <= tol && independent_of(chol, constraints, &working, i) {
            working.push(i);
        }
    }
    let mut changes = 0;
    loop {
        let mut grad = hessian.mul_vec(&x);
        for (gi, &c) in grad.iter_mut().zip(g) {
            *gi += c;
        }
        let Some((mu, p)) = working_set_multipliers(chol, constraints, &working, &grad) else {
            // Should not happen: additions are screened for independence.
            let last = working.pop();
            debug_assert!(last.is_some());
            changes += 1;
            if changes > max_changes {
                return ActiveSetOutcome {
                    x,
                    working,
                    multipliers: Vec::new(),
                    changes,
                    converged: false,
                };
            }
            continue;
        };
        let p_norm = norm_inf(&p);
        if p_norm <= step_tol * (T::one() + norm_inf(&x)) {
            let (min_idx, min_mu) =
                mu.iter()
                    .enumerate()
                    .fold((usize::MAX, T::zero()), |(bi, bm), (i, &m)| {
                        if m < bm {
                            (i, m)
                        } else {
                            (bi, bm)
                        }
                    });
            if min_idx == usize::MAX || min_mu >= -tol {
                return ActiveSetOutcome {
                    x,
                    working,
                    multipliers: mu,
                    changes,
                    converged: true,
                };
            }
            working.remove(min_idx);
        } else {
            let mut alpha = T::one();
            let mut blocking = None;
            for (i, c) in constraints.iter().enumerate() {
                if working.contains(&i) {
                    continue;
                }
                let ap = dot(&c.normal, &p);
                if ap > T::epsilon() * (T::one() + p_norm) {
                    let ratio = c.slack(&x).max(T::zero()) / ap;
                    if ratio < alpha {
                        alpha = ratio;
                        blocking = Some(i);
                    }
                }
            }
            for (xi, &pi) in x.iter_mut().zip(&p) {
                *xi += alpha * pi;
            }
            match blocking {
                Some(i) => working.push(i),
                None => continue,
            }
        }
        changes += 1;
        if changes > max_changes {
            return ActiveSetOutcome {
                x,
                working,
                multipliers: Vec::new(),
                changes,
                converged: false,
            };
        }
    }
}

fn kkt_diagnostics<T: Scalar>(
    hessian: &Matrix<T>,
    g: &[T],
    constraints: &[Halfspace<T>],
    outcome: &ActiveSetOutcome<T>,
) -> KktDiagnostics<T> {
    let x = &outcome.x;
    let mut residual = hessian.mul_vec(x);
    for (r, &c) in residual.iter_mut().zip(g) {
        *r += c;
    }
    let mut complementarity = T::zero();
    let mut dual_infeasibility = T::zero();
    for (&i, &m) in outcome.working.iter().zip(&outcome.multipliers) {
        for (r, &a) in residual.iter_mut().zip(&constraints[i].normal) {
            *r += m * a;
        }
        complementarity = complementarity.max((m * constraints[i].slack(x)).abs());
        dual_infeasibility = dual_infeasibility.max(-m);
    }
    let primal_infeasibility = constraints
        .iter()
        .fold(T::zero(), |w, c| w.max(-c.slack(x)));
    KktDiagnostics {
        stationarity: norm_inf(&residual),
        primal_infeasibility,
        complementarity,
        dual_infeasibility,
    }
}

enum PhaseOne<T> {
    Feasible { x: Vec<T>, iterations: usize },
    Infeasible { x: Vec<T>, iterations: usize },
}

/// Finds a feasible point by minimizing `½‖x − x̂‖² + ½‖s‖² + M·Σs` subject to
/// the bounds, `aᵢᵀx − sᵢ ≤ bᵢ` for every general row, and `s ≥ 0`. The start
/// `(x̂, max(0, violation))` is feasible, and `s = 0` at the optimum whenever
/// the original set is non-empty.
fn phase_one<T: Scalar>(
    problem: &QpProblem<T>,
    constraints: &[Halfspace<T>],
    start: &[T],
    settings: &QpSettings<T>,
) -> PhaseOne<T> {
    let n = problem.dim();
    // Bounds are already satisfied by `start`; only general rows get slacks.
    let rows: Vec<&Halfspace<T>> = constraints.iter().filter(|c| !c.bound).collect();
    let bounds: Vec<&Halfspace<T>> = constraints.iter().filter(|c| c.bound).collect();
    let m = rows.len();
    let dim = n + m;
    let hessian = Matrix::identity(dim);
    let mut gradient: Vec<T> = start.iter().map(|&v| -v).collect();
    gradient.extend(std::iter::repeat(lit::<T>(PHASE1_PENALTY)).take(m));
    let mut aug: Vec<Halfspace<T>> = Vec::with_capacity(bounds.len() + 2 * m);
    for b in &bounds {
        let mut normal = b.normal.clone();
        normal.extend(std::iter::repeat(T::zero()).take(m));
        aug.push(Halfspace {
            normal,
            rhs: b.rhs,
            bound: true,
        });
    }
    for (j, r) in rows.iter().enumerate() {
        let mut normal = r.normal.clone();
        normal.extend((0..m).map(|k| if k == j { -T::one() } else { T::zero() }));
        aug.push(Halfspace {
            normal,
            rhs: r.rhs,
            bound: false,
        });
        let mut nonneg = vec![T::zero(); dim];
        nonneg[n + j] = -T::one();
        aug.push(Halfspace {
            normal: nonneg,
            rhs: T::zero(),
            bound: true,
        });
    }
    let mut z = start.to_vec();
    z.extend(rows.iter().map(|r| (-r.slack(start)).max(T::zero())));
    let chol = Cholesky::new(&hessian).expect("identity is positive definite");
    let outcome = active_set(
        &chol,
        &hessian,
        &gradient,
        &aug,
        z,
        settings,
        settings.max_working_set_changes,
    );
    let x: Vec<T> = outcome.x[..n].to_vec();
    let worst = constraints
        .iter()
        .fold(T::zero(), |w, c| w.max(-c.slack(&x)));
    if outcome.converged && worst <= settings.tolerance {
        PhaseOne::Feasible {
            x,
            iterations: outcome.changes,
        }
    } else {
        PhaseOne::Infeasible {
            x,
            iterations: outcome.changes,
        }
    }
}

/// Linear time-invariant prediction model with a scalar input:
/// `x⁺ = A x + b u`, `y = C x`.
#[derive(Debug, Clone, Copy)]
pub struct PredictionModel<'a, T> {
    pub a: &'a Matrix<T>,
    pub b: &'a [T],
    pub c: &'a Matrix<T>,
}

/// Horizon data for [`condense`].
///
/// The horizon has `horizon` stages; each stage holds its input for `block`
/// model steps of length `dt` (move blocking). Rate limits are per second: the
/// first move is limited relative to `u_prev` over one model step, later moves
/// relative to the previous stage over one stage.
#[derive(Debug, Clone)]
pub struct HorizonSpec<T> {
    pub horizon: usize,
    pub block: usize,
    pub dt: T,
    /// Output weight (ny × ny, PSD).
    pub output_weight: Matrix<T>,
    /// Weight on `(u_i − u_ref_i)²`.
    pub input_weight: T,
    pub input_min: T,
    pub input_max: T,
    pub rate_min: T,
    pub rate_max: T,
}

#[derive(Debug, Clone)]
pub struct Condensed<T> {
    pub problem: QpProblem<T>,
    /// Cost independent of the inputs, so `objective + constant` is the MPC cost.
    pub constant: T,
    /// Stacked free response of the outputs at stage ends (N·ny).
    pub free_response: Vec<T>,
    /// Output sensitivity to the input sequence (N·ny × N).
    pub input_response: Matrix<T>,
}

impl<T: Scalar> Condensed<T> {
    /// Predicted outputs at stage ends for an input sequence.
    pub fn predict(&self, u: &[T]) -> Vec<T> {
        let mut y = self.input_response.mul_vec(u);
        for (yi, &f) in y.iter_mut().zip(&self.free_response) {
            *yi += f;
        }
        y
    }
}

/// Condenses a tracking MPC into a QP over the input sequence.
///
/// `reference[i]` is the output target at the end of stage `i`;
/// `input_reference[i]` is the input the effort term is measured against.
pub fn condense<T: Scalar>(
    model: PredictionModel<'_, T>,
    spec: &HorizonSpec<T>,
    x0: &[T],
    reference: &[Vec<T>],
    input_reference: &[T],
    u_prev: T,
) -> Result<Condensed<T>, QpError> {
    let nx = model.a.rows();
    let ny = model.c.rows();
    let n = spec.horizon;
    let mismatch = |what: &str| Err(QpError::DimensionMismatch(what.to_string()));
    if n == 0 || spec.block == 0 {
        return mismatch("horizon and block must be at least 1");
    }
    if model.a.cols() != nx || model.b.len() != nx || model.c.cols() != nx || x0.len() != nx {
        return mismatch("prediction model and state dimensions disagree");
    }
    if spec.output_weight.rows() != ny || spec.output_weight.cols() != ny {
        return mismatch("output weight must be ny × ny");
    }
    if reference.len() != n || reference.iter().any(|r| r.len() != ny) {
        return mismatch("reference must have one ny-vector per stage");
    }
    if input_reference.len() != n {
        return mismatch("input reference must have one entry per stage");
    }

    // Stage transition under a held input.
    let a_stage = model.a.pow(spec.block);
    let mut b_stage = vec![T::zero(); nx];
    let mut a_pow = Matrix::identity(nx);
    for _ in 0..spec.block {
        for (s, v) in b_stage.iter_mut().zip(a_pow.mul_vec(model.b)) {
            *s += v;
        }
        a_pow = a_pow.mul(model.a);
    }

    // Free response and per-stage impulse columns.
    let mut free = Vec::with_capacity(n * ny);
    let mut x = x0.to_vec();
    for _ in 0..n {
        x = a_stage.mul_vec(&x);
        free.extend(model.c.mul_vec(&x));
    }
    let mut markov = Vec::with_capacity(n);
    let mut col = b_stage.clone();
    for _ in 0..n {
        markov.push(model.c.mul_vec(&col));
        col = a_stage.mul_vec(&col);
    }
    let gamma = Matrix::from_fn(n * ny, n, |r, j| {
        let i = r / ny;
        if j > i {
            T::zero()
        } else {
            markov[i - j][r % ny]
        }
    });

    let w = &spec.output_weight;
    let w_bar = Matrix::from_fn(n * ny, n * ny, |r, c| {
        if r / ny == c / ny {
            w[(r % ny, c % ny)]
        } else {
            T::zero()
        }
    });
    let err: Vec<T> = free
        .iter()
        .zip(reference.iter().flatten())
        .map(|(&f, &r)| f - r)
        .collect();
    let two = lit::<T>(2.0);
    let gw = gamma.transpose().mul(&w_bar);
    let mut hessian = gw
        .mul(&gamma)
        .add(&Matrix::identity(n).scale(spec.input_weight))
        .scale(two);
    // Symmetrize away rounding.
    for i in 0..n {
        for j in (i + 1)..n {
            let m = (hessian[(i, j)] + hessian[(j, i)]) * lit(0.5);
            hessian[(i, j)] = m;
            hessian[(j, i)] = m;
        }
    }
    let gradient: Vec<T> = gw
        .mul_vec(&err)
        .iter()
        .zip(input_reference)
        .map(|(&v, &ur)| two * (v - spec.input_weight * ur))
        .collect();
    let constant =
        dot(&err, &w_bar.mul_vec(&err)) + spec.input_weight * dot(input_reference, input_reference);

    let mut a_rate = Matrix::zeros(n, n);
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    let stage_dt = spec.dt * lit::<T>(spec.block as f64);
    for i in 0..n {
        a_rate[(i, i)] = T::one();
        if i == 0 {
            lo.push(u_prev + spec.rate_min * spec.dt);
            hi.push(u_prev + spec.rate_max * spec.dt);
        } else {
            a_rate[(i, i - 1)] = -T::one();
            lo.push(spec.rate_min * stage_dt);
            hi.push(spec.rate_max * stage_dt);
        }
    }

    let problem = QpProblem::unconstrained(hessian, gradient)
        .with_bounds(vec![spec.input_min; n], vec![spec.input_max; n])
        .with_constraints(a_rate, lo, hi);
    Ok(Condensed {
        problem,
        constant,
        free_response: free,
        input_response: gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_spec(n: usize, w: f64, q: f64) -> HorizonSpec<f64> {
        HorizonSpec {
            horizon: n,
            block: 1,
            dt: 0.02,
            output_weight: Matrix::from_diagonal(&[w]),
            input_weight: q,
            input_min: -10.0,
            input_max: 10.0,
            rate_min: -1e6,
            rate_max: 1e6,
        }
    }

    #[test]
    fn clamped_scalar() {
        let p = QpProblem::<f64>::unconstrained(Matrix::from_diagonal(&[2.0]), vec![-6.0])
            .with_bounds(vec![-1.0], vec![1.0]);
        let s = solve(&p, None).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_identity() {
        let p = QpProblem::<f64>::unconstrained(Matrix::identity(2), vec![-1.0, -2.0]);
        let s = solve(&p, None).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-12 && (s.x[1] - 2.0).abs() < 1e-12);
        assert_eq!(s.iterations, 0);
    }

    #[test]
    fn empty_box_is_infeasible() {
        let p = QpProblem::unconstrained(Matrix::identity(1), vec![0.0])
            .with_bounds(vec![1.0], vec![0.0]);
        assert_eq!(solve(&p, None).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn inconsistent_rows_are_infeasible() {
        // x₀ + x₁ ≥ 3 with both in [0, 1].
        let p = QpProblem::unconstrained(Matrix::identity(2), vec![0.0, 0.0])
            .with_bounds(vec![0.0, 0.0], vec![1.0, 1.0])
            .with_constraints(
                Matrix::from_rows(&[&[1.0, 1.0]]),
                vec![3.0],
                vec![f64::INFINITY],
            );
        assert_eq!(solve(&p, None).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn infeasible_start_goes_through_phase_one() {
        // Row forces x₀ − x₁ ≥ 1; optimum of ½‖x‖² on that halfspace is (½, −½).
        let p = QpProblem::unconstrained(Matrix::identity(2), vec![0.0, 0.0]).with_constraints(
            Matrix::from_rows(&[&[1.0, -1.0]]),
            vec![1.0],
            vec![f64::INFINITY],
        );
        let s = solve(&p, None).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 0.5).abs() < 1e-10 && (s.x[1] + 0.5).abs() < 1e-10);
    }

    #[test]
    fn semidefinite_hessian_is_regularized() {
        let h = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let p = QpProblem::<f64>::unconstrained(h, vec![-1.0, 0.0])
            .with_bounds(vec![-1.0; 2], vec![1.0; 2]);
        let s = solve(&p, None).unwrap();
        assert!(s.regularized);
        assert!((s.x[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn indefinite_hessian_is_rejected() {
        let h = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, -1.0]]);
        let p = QpProblem::unconstrained(h, vec![0.0, 0.0]);
        assert_eq!(solve(&p, None), Err(QpError::NotConvex));
    }

    #[test]
    fn asymmetric_hessian_is_rejected() {
        let h = Matrix::from_rows(&[&[1.0, 0.5], &[0.0, 1.0]]);
        let p = QpProblem::unconstrained(h, vec![0.0, 0.0]);
        assert!(matches!(solve(&p, None), Err(QpError::NotSymmetric(_))));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = QpProblem::unconstrained(Matrix::identity(2), vec![0.0; 3]);
        assert!(matches!(
            solve(&p, None),
            Err(QpError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn single_stage_closed_form() {
        let (b, w, q, x0, r) = (0.3, 5.0, 0.7, 0.2, 1.1);
        let a = Matrix::identity(1);
        let c = Matrix::identity(1);
        let model = PredictionModel {
            a: &a,
            b: &[b],
            c: &c,
        };
        let cond = condense(model, &scalar_spec(1, w, q), &[x0], &[vec![r]], &[0.0], 0.0).unwrap();
        let s = solve(&cond.problem, None).unwrap();
        let expected = w * b * (r - x0) / (w * b * b + q);
        assert!((s.x[0] - expected).abs() < 1e-12);
        // Objective plus constant is the MPC cost.
        let cost = w * (x0 + b * s.x[0] - r).powi(2) + q * s.x[0].powi(2);
        assert!((s.objective + cond.constant - cost).abs() < 1e-12);
    }

    #[test]
    fn zero_tracking_weight_gives_zero_input() {
        let a = Matrix::identity(1);
        let c = Matrix::identity(1);
        let model = PredictionModel {
            a: &a,
            b: &[1.0],
            c: &c,
        };
        let cond = condense(
            model,
            &scalar_spec(4, 0.0, 1.0),
            &[3.0],
            &vec![vec![-2.0]; 4],
            &[0.0; 4],
            0.0,
        )
        .unwrap();
        let s = solve(&cond.problem, None).unwrap();
        assert!(norm_inf(&s.x) < 1e-12);
    }

    #[test]
    fn frozen_rate_pins_sequence() {
        let a = Matrix::identity(1);
        let c = Matrix::identity(1);
        let model = PredictionModel {
            a: &a,
            b: &[1.0],
            c: &c,
        };
        let mut spec = scalar_spec(5, 10.0, 0.1);
        spec.rate_min = 0.0;
        spec.rate_max = 0.0;
        let cond = condense(model, &spec, &[0.0], &vec![vec![4.0]; 5], &[0.0; 5], 0.5).unwrap();
        let s = solve(&cond.problem, None).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        for u in &s.x {
            assert!((u - 0.5).abs() < 1e-10, "{u}");
        }
    }

    #[test]
    fn blocked_prediction_matches_simulation() {
        let a = Matrix::from_rows(&[&[1.0, 0.1], &[0.0, 0.9]]);
        let b = [0.0, 0.1];
        let c = Matrix::from_rows(&[&[1.0, 0.0]]);
        let model = PredictionModel {
            a: &a,
            b: &b,
            c: &c,
        };
        let mut spec = scalar_spec(3, 1.0, 0.0);
        spec.block = 4;
        let x0 = [0.3, -0.2];
        let cond = condense(model, &spec, &x0, &vec![vec![0.0]; 3], &[0.0; 3], 0.0).unwrap();
        let u = [1.0, -0.5, 2.0];
        let predicted = cond.predict(&u);
        let mut x = x0.to_vec();
        for (i, &ui) in u.iter().enumerate() {
            for _ in 0..4 {
                let mut next = a.mul_vec(&x);
                next[1] += b[1] * ui;
                x = next;
            }
            assert!((predicted[i] - x[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_reference_length_is_an_error() {
        let a = Matrix::identity(1);
        let c = Matrix::identity(1);
        let model = PredictionModel {
            a: &a,
            b: &[1.0],
            c: &c,
        };
        assert!(condense(
            model,
            &scalar_spec(3, 1.0, 1.0),
            &[0.0],
            &[vec![0.0]],
            &[0.0; 3],
            0.0
        )
        .is_err());
    }
}
