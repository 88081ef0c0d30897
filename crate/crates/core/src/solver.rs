//! Equality- and bound-constrained NLP solver.
//!
//! Bound-constrained augmented Lagrangian: the outer loop updates multipliers
//! and the penalty on the equality constraints, the inner loop minimizes
//!
//! ```text
//! L_A(z) = f(z) + lambda^T c(z) + mu/2 |c(z)|^2,   lo <= z <= hi
//! ```
//!
//! with projected Newton steps on the model `H_f + sum_i y_i hess c_i + mu J^T J`
//! (`y = lambda + mu c`), diagonal damping that is raised until the reduced
//! model factors, and an Armijo search along the projection arc.
//! Problems supply a variable ordering that keeps the model banded, so each
//! step costs one banded Cholesky factorization.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ocp::{self, Nlp, OcpError, Trajectory};

/// Sparse matrix stored row by row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRows {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(nrows: usize) -> Self {
        SparseRows { rows: vec![Vec::new(); nrows] }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        self.rows[row].push((col, value));
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    /// `out = A^T y`
    pub fn transpose_mul(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (row, yr) in self.rows.iter().zip(y) {
            for &(c, v) in row {
                out[c] += v * yr;
            }
        }
    }

    pub fn to_dense(&self, ncols: usize) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; ncols]; self.rows.len()];
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                out[r][c] += v;
            }
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.rows.iter().flatten().all(|(_, v)| v.is_finite())
    }
}

/// A smooth NLP `min f(z) s.t. c(z) = 0, lo <= z <= hi`.
pub trait NlpProblem {
    fn num_variables(&self) -> usize;
    fn num_constraints(&self) -> usize;
    fn bounds(&self) -> (&[f64], &[f64]);
    fn objective(&self, z: &[f64]) -> f64;
    fn objective_gradient(&self, z: &[f64], grad: &mut [f64]);
    /// Objective Hessian (or an approximation of it) as
    /// lower-triangle triplets `(i, j, v)` with `i >= j`; duplicates add up.
    fn objective_hessian(&self, z: &[f64]) -> Vec<(usize, usize, f64)>;
    /// Second-order term `sum_i y_i hess c_i(z)` as lower-triangle triplets.
    /// The default returns nothing, which reduces the model to Gauss-Newton.
    fn constraint_hessian(&self, _z: &[f64], _y: &[f64]) -> Vec<(usize, usize, f64)> {
        Vec::new()
    }
    /// Writes `c(z)`; failed evaluations are reported as NaN entries.
    fn constraints(&self, z: &[f64], c: &mut [f64]);
    fn constraint_jacobian(&self, z: &[f64]) -> SparseRows;
    /// Final audit of a point that meets the solver tolerances; returning
    /// `false` makes the solver tighten the constraints further.
    fn acceptable(&self, _z: &[f64], _tol_constraint: f64) -> bool {
        true
    }
    /// Ordering of the variables used for factorizations (position -> variable).
    fn variable_order(&self) -> Vec<usize> {
        (0..self.num_variables()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    /// Threshold on the infinity norm of the equality constraints.
    pub tol_constraint: f64,
    /// Threshold on the infinity norm of the projected Lagrangian gradient.
    pub tol_stationarity: f64,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_outer_iters: 30,
            max_inner_iters: 200,
            tol_constraint: 1e-6,
            tol_stationarity: 1e-5,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            penalty_max: 1e8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tol_constraint > 0.0 && self.tol_stationarity > 0.0) {
            return Err("tolerances must be positive".into());
        }
        if !(self.penalty_growth > 1.0) {
            return Err("penalty growth must exceed 1".into());
        }
        if !(self.penalty_init > 0.0 && self.penalty_max >= self.penalty_init) {
            return Err("penalty_init must be positive and not above penalty_max".into());
        }
        if self.max_outer_iters == 0 || self.max_inner_iters == 0 {
            return Err("iteration budgets must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIters,
    Infeasible,
    NumericalFailure,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIters => "max_iters",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::NumericalFailure => "numerical_failure",
        })
    }
}

/// Result of a generic NLP solve.
#[derive(Debug, Clone, PartialEq)]
pub struct NlpSolution {
    pub z: Vec<f64>,
    pub objective: f64,
    pub constraint_violation: f64,
    pub stationarity: f64,
    pub multipliers: Vec<f64>,
    pub status: SolveStatus,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Merit value after every accepted inner step, one list per outer iteration.
    pub merit_history: Vec<Vec<f64>>,
}

/// Pluggable NLP backend.
pub trait NlpSolver {
    fn solve(&self, problem: &dyn NlpProblem, z0: &[f64]) -> NlpSolution;
}

/// Symmetric band matrix, lower band stored row-wise.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        BandMatrix { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (i - j)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` to entry `(i, j)` of the symmetric matrix.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// `s^T A s` for a vector given in variable order, `pos` mapping variables to rows.
    pub fn quad_form(&self, pos: &[usize], s: &[f64]) -> f64 {
        let mut sp = vec![0.0; self.n];
        for (v, &k) in pos.iter().enumerate() {
            sp[k] = s[v];
        }
        let mut acc = 0.0;
        for i in 0..self.n {
            if sp[i] == 0.0 {
                continue;
            }
            acc += self.data[self.idx(i, i)] * sp[i] * sp[i];
            for j in i.saturating_sub(self.bw)..i {
                acc += 2.0 * self.data[self.idx(i, j)] * sp[i] * sp[j];
            }
        }
        acc
    }

    /// In-place Cholesky `A = L L^T`; returns `false` if `A` is not positive definite.
    pub fn cholesky(&mut self) -> bool {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(bw));
                let mut s = self.data[self.idx(i, j)];
                for k in k0..j {
                    s -= self.data[self.idx(i, k)] * self.data[self.idx(j, k)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return false;
                    }
                    let ii = self.idx(i, i);
                    self.data[ii] = s.sqrt();
                } else {
                    let ij = self.idx(i, j);
                    self.data[ij] = s / self.data[self.idx(j, j)];
                }
            }
        }
        true
    }

    /// Solves `L L^T x = b` after [`BandMatrix::cholesky`].
    pub fn solve_factored(&self, b: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let mut s = b[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.data[self.idx(i, k)] * b[k];
            }
            b[i] = s / self.data[self.idx(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n.min(i + bw + 1) {
                s -= self.data[self.idx(k, i)] * b[k];
            }
            b[i] = s / self.data[self.idx(i, i)];
        }
    }
}

/// Augmented-Lagrangian solver with projected Gauss-Newton inner iterations.
#[derive(Debug, Clone, Default)]
pub struct AugmentedLagrangian {
    pub config: SolverConfig,
}

struct Point {
    z: Vec<f64>,
    f: f64,
    c: Vec<f64>,
}

impl Point {
    fn eval(p: &dyn NlpProblem, z: Vec<f64>) -> Point {
        let f = p.objective(&z);
        let mut c = vec![0.0; p.num_constraints()];
        p.constraints(&z, &mut c);
        Point { z, f, c }
    }

    fn finite(&self) -> bool {
        self.f.is_finite() && self.c.iter().all(|v| v.is_finite())
    }

    fn merit(&self, lam: &[f64], mu: f64) -> f64 {
        let mut m = self.f;
        for (ci, li) in self.c.iter().zip(lam) {
            m += li * ci + 0.5 * mu * ci * ci;
        }
        m
    }

    fn violation(&self) -> f64 {
        inf_norm(&self.c)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn project(z: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..z.len() {
        z[i] = z[i].max(lo[i]).min(hi[i]);
    }
}

fn projected_gradient_norm(z: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut out: f64 = 0.0;
    for i in 0..z.len() {
        let p = (z[i] - g[i]).max(lo[i]).min(hi[i]);
        out = out.max((p - z[i]).abs());
    }
    out
}

const MAX_DAMPING: f64 = 1e12;
const MAX_RESTORATIONS: usize = 5;
const MIN_CONSTRAINT_TARGET: f64 = 1e-13;
const MIN_DAMPING: f64 = 1e-12;
/// Trust region radius, as a fraction of each variable's range.
const INITIAL_RADIUS: f64 = 0.1;
const MAX_RADIUS: f64 = 1.0;
const MIN_RADIUS: f64 = 1e-14;

enum InnerEnd {
    Stationary,
    Budget,
    Stalled,
    Numerical,
}

struct Inner {
    end: InnerEnd,
    stationarity: f64,
    iterations: usize,
    merits: Vec<f64>,
}

struct Ordering {
    pos: Vec<usize>,
}

impl Ordering {
    fn bandwidth(&self, hess: &[(usize, usize, f64)], jac: &SparseRows) -> usize {
        let mut bw = 0;
        for &(i, j, _) in hess {
            bw = bw.max(self.pos[i].abs_diff(self.pos[j]));
        }
        for r in 0..jac.nrows() {
            let row = jac.row(r);
            if let (Some(lo), Some(hi)) = (
                row.iter().map(|(c, _)| self.pos[*c]).min(),
                row.iter().map(|(c, _)| self.pos[*c]).max(),
            ) {
                bw = bw.max(hi - lo);
            }
        }
        bw
    }
}

/// Projected gradient norm of `f + lam^T c` at `point`.
fn lagrangian_stationarity(p: &dyn NlpProblem, point: &Point, lam: &[f64]) -> f64 {
    let (lo, hi) = p.bounds();
    let n = p.num_variables();
    let jac = p.constraint_jacobian(&point.z);
    let mut g = vec![0.0; n];
    jac.transpose_mul(lam, &mut g);
    let mut gf = vec![0.0; n];
    p.objective_gradient(&point.z, &mut gf);
    for (a, b) in g.iter_mut().zip(&gf) {
        *a += b;
    }
    projected_gradient_norm(&point.z, &g, lo, hi)
}

/// Gauss-Newton projection onto `c(z) = 0` with minimum-norm corrections of
/// the variables that are off their bounds. Returns `None` if the violation
/// cannot be brought below `target`.
fn restore_feasibility(p: &dyn NlpProblem, start: &Point, target: f64) -> Option<Point> {
    let (lo, hi) = p.bounds();
    let n = p.num_variables();
    let m = p.num_constraints();
    let mut point = Point { z: start.z.clone(), f: start.f, c: start.c.clone() };
    for _ in 0..6 {
        if point.violation() <= target {
            return Some(point);
        }
        let jac = p.constraint_jacobian(&point.z);
        if !jac.is_finite() {
            return None;
        }
        let free: Vec<bool> = (0..n).map(|i| point.z[i] > lo[i] && point.z[i] < hi[i]).collect();
        let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for r in 0..m {
            for &(c, v) in jac.row(r) {
                if free[c] {
                    by_col[c].push((r, v));
                }
            }
        }
        for col in by_col.iter_mut() {
            col.sort_by_key(|e| e.0);
            col.dedup_by(|b, a| {
                let same = a.0 == b.0;
                if same {
                    a.1 += b.1;
                }
                same
            });
        }
        let bw = by_col
            .iter()
            .filter_map(|col| Some(col.iter().map(|e| e.0).max()? - col.iter().map(|e| e.0).min()?))
            .max()
            .unwrap_or(0);
        let mut normal = BandMatrix::zeros(m, bw);
        for col in &by_col {
            for (a, &(ra, va)) in col.iter().enumerate() {
                for &(rb, vb) in &col[..=a] {
                    normal.add(ra, rb, va * vb);
                }
            }
        }
        for r in 0..m {
            normal.add(r, r, 1e-14 * (1.0 + normal.get(r, r)));
        }
        if !normal.cholesky() {
            return None;
        }
        let mut w = point.c.clone();
        normal.solve_factored(&mut w);
        let mut delta = vec![0.0; n];
        jac.transpose_mul(&w, &mut delta);
        let mut z: Vec<f64> = (0..n).map(|i| if free[i] { point.z[i] - delta[i] } else { point.z[i] }).collect();
        project(&mut z, lo, hi);
        let next = Point::eval(p, z);
        if !next.finite() || next.violation() >= point.violation() {
            return None;
        }
        point = next;
    }
    (point.violation() <= target).then_some(point)
}

/// `A s` for `s` in variable order, result in variable order.
fn band_mul(a: &BandMatrix, pos: &[usize], s: &[f64]) -> Vec<f64> {
    let n = s.len();
    let mut sp = vec![0.0; n];
    for (v, &k) in pos.iter().enumerate() {
        sp[k] = s[v];
    }
    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] += a.data[a.idx(i, i)] * sp[i];
        for j in i.saturating_sub(a.bw)..i {
            let v = a.data[a.idx(i, j)];
            out[i] += v * sp[j];
            out[j] += v * sp[i];
        }
    }
    pos.iter().map(|&k| out[k]).collect()
}

/// Quadratic model `g^T s + s^T B s / 2`.
fn model_value(b: &BandMatrix, pos: &[usize], g: &[f64], s: &[f64]) -> f64 {
    let lin: f64 = g.iter().zip(s).map(|(a, b)| a * b).sum();
    lin + 0.5 * b.quad_form(pos, s)
}

fn clip_step(x: &[f64], sl: &[f64], su: &[f64]) -> Vec<f64> {
    x.iter().zip(sl.iter().zip(su)).map(|(v, (l, u))| v.max(*l).min(*u)).collect()
}

/// Approximate minimizer of the quadratic model over the box `sl <= s <= su`:
/// generalized Cauchy point along the projected gradient path, then Newton
/// steps on the free variables with a projected search on the model.
fn box_qp_step(
    b: &BandMatrix,
    pos: &[usize],
    g: &[f64],
    sl: &[f64],
    su: &[f64],
    alpha: &mut f64,
    damping: &mut f64,
) -> Vec<f64> {
    let n = g.len();
    let zero = vec![0.0; n];
    let path = |a: f64| clip_step(&g.iter().map(|v| -a * v).collect::<Vec<_>>(), sl, su);
    let sufficient = |s: &[f64]| {
        let lin: f64 = g.iter().zip(s).map(|(a, b)| a * b).sum();
        model_value(b, pos, g, s) <= 0.01 * lin && lin < 0.0
    };

    // Generalized Cauchy point.
    let mut a = *alpha;
    let mut sc = path(a);
    if sufficient(&sc) {
        for _ in 0..20 {
            let next = path(a * 10.0);
            if next == sc || !sufficient(&next) {
                break;
            }
            a *= 10.0;
            sc = next;
        }
    } else {
        let mut found = false;
        for _ in 0..40 {
            a *= 0.1;
            sc = path(a);
            if sufficient(&sc) {
                found = true;
                break;
            }
        }
        if !found {
            return zero;
        }
    }
    *alpha = a;

    // Subspace Newton refinements.
    let mut s = sc;
    let mut q = model_value(b, pos, g, &s);
    for _ in 0..5 {
        let free: Vec<bool> = (0..n).map(|i| s[i] > sl[i] && s[i] < su[i]).collect();
        if !free.iter().any(|f| *f) {
            break;
        }
        let bs = band_mul(b, pos, &s);
        let r: Vec<f64> = (0..n).map(|i| g[i] + bs[i]).collect();
        let Some(d) = reduced_newton(b, pos, &free, &r, damping) else {
            break;
        };
        let mut improved = false;
        let mut beta = 1.0;
        for _ in 0..30 {
            let trial = clip_step(&s.iter().zip(&d).map(|(a, b)| a + beta * b).collect::<Vec<_>>(), sl, su);
            let diff: f64 = r.iter().zip(trial.iter().zip(&s)).map(|(ri, (t, si))| ri * (t - si)).sum();
            let qt = model_value(b, pos, g, &trial);
            if diff < 0.0 && qt <= q + 0.01 * diff {
                let hit = (0..n).any(|i| free[i] && (trial[i] <= sl[i] || trial[i] >= su[i]));
                s = trial;
                q = qt;
                improved = true;
                if beta == 1.0 && !hit {
                    return s;
                }
                break;
            }
            beta *= 0.5;
        }
        if !improved {
            break;
        }
    }
    s
}

/// Newton direction of the model restricted to the free variables, with a
/// diagonal shift raised until the reduced matrix factors.
fn reduced_newton(b: &BandMatrix, pos: &[usize], free: &[bool], r: &[f64], damping: &mut f64) -> Option<Vec<f64>> {
    let n = r.len();
    let bw = b.bw;
    let mut shift = (*damping * 0.1).max(MIN_DAMPING);
    loop {
        let mut sys = b.clone();
        let mut rhs = vec![0.0; n];
        for var in 0..n {
            let k = pos[var];
            if !free[var] {
                for j in k.saturating_sub(bw)..k {
                    let idx = sys.idx(k, j);
                    sys.data[idx] = 0.0;
                }
                for i in k + 1..n.min(k + bw + 1) {
                    let idx = sys.idx(i, k);
                    sys.data[idx] = 0.0;
                }
                let idx = sys.idx(k, k);
                sys.data[idx] = 1.0;
            } else {
                let idx = sys.idx(k, k);
                let d = sys.data[idx];
                sys.data[idx] = d + shift * d.abs().max(1.0);
                rhs[k] = -r[var];
            }
        }
        if sys.cholesky() {
            *damping = shift;
            sys.solve_factored(&mut rhs);
            return Some((0..n).map(|var| if free[var] { rhs[pos[var]] } else { 0.0 }).collect());
        }
        if shift >= MAX_DAMPING {
            return None;
        }
        shift = (shift * 10.0).max(1e-8);
    }
}

impl AugmentedLagrangian {
    pub fn new(config: SolverConfig) -> Self {
        AugmentedLagrangian { config }
    }

    #[allow(clippy::too_many_arguments)]
    fn minimize(
        &self,
        p: &dyn NlpProblem,
        ord: &Ordering,
        point: &mut Point,
        lam: &[f64],
        mu: f64,
        omega: f64,
        damping: &mut f64,
    ) -> Inner {
        let (lo, hi) = p.bounds();
        let n = p.num_variables();
        let mut merits = Vec::new();
        let mut grad_f = vec![0.0; n];
        let mut g = vec![0.0; n];
        let mut y = vec![0.0; point.c.len()];
        let mut stationarity = f64::INFINITY;
        let mut radius = INITIAL_RADIUS;
        let mut cauchy_alpha = 1.0;
        for it in 0..self.config.max_inner_iters {
            let jac = p.constraint_jacobian(&point.z);
            if !jac.is_finite() {
                return Inner { end: InnerEnd::Numerical, stationarity, iterations: it, merits };
            }
            p.objective_gradient(&point.z, &mut grad_f);
            for (yi, (li, ci)) in y.iter_mut().zip(lam.iter().zip(&point.c)) {
                *yi = li + mu * ci;
            }
            jac.transpose_mul(&y, &mut g);
            for (gi, fi) in g.iter_mut().zip(&grad_f) {
                *gi += fi;
            }
            stationarity = projected_gradient_norm(&point.z, &g, lo, hi);
            if !stationarity.is_finite() {
                return Inner { end: InnerEnd::Numerical, stationarity, iterations: it, merits };
            }
            if stationarity <= omega {
                return Inner { end: InnerEnd::Stationary, stationarity, iterations: it, merits };
            }

            // Model of the augmented-Lagrangian Hessian in banded order.
            let mut hess = p.objective_hessian(&point.z);
            hess.extend(p.constraint_hessian(&point.z, &y));
            let bw = ord.bandwidth(&hess, &jac);
            let mut model = BandMatrix::zeros(n, bw);
            for &(i, j, v) in &hess {
                model.add(ord.pos[i], ord.pos[j], v);
            }
            for r in 0..jac.nrows() {
                let row = jac.row(r);
                for (a, &(ca, va)) in row.iter().enumerate() {
                    for (b, &(cb, vb)) in row[..=a].iter().enumerate() {
                        // Pairs (a, b) with b < a stand for both orderings; when they
                        // share a column both land on the diagonal.
                        let twice = b < a && ca == cb;
                        let v = if twice { 2.0 } else { 1.0 } * mu * va * vb;
                        model.add(ord.pos[ca], ord.pos[cb], v);
                    }
                }
            }

            let merit0 = point.merit(lam, mu);
            let mut accepted = false;
            while radius > MIN_RADIUS {
                let (sl, su): (Vec<f64>, Vec<f64>) = (0..n)
                    .map(|i| {
                        let r = radius * (hi[i] - lo[i]).max(1e-3);
                        ((lo[i] - point.z[i]).max(-r), (hi[i] - point.z[i]).min(r))
                    })
                    .unzip();
                let step = box_qp_step(&model, &ord.pos, &g, &sl, &su, &mut cauchy_alpha, damping);
                let predicted = -model_value(&model, &ord.pos, &g, &step);
                let norm = (0..n)
                    .filter(|&i| hi[i] > lo[i])
                    .map(|i| step[i].abs() / (hi[i] - lo[i]).max(1e-3))
                    .fold(0.0, f64::max);
                if !(predicted > 0.0) || norm == 0.0 {
                    break;
                }
                let mut trial: Vec<f64> = point.z.iter().zip(&step).map(|(z, d)| z + d).collect();
                project(&mut trial, lo, hi);
                let cand = Point::eval(p, trial);
                let m = cand.merit(lam, mu);
                let actual = merit0 - m;
                if cand.finite() && actual > 1e-4 * predicted {
                    let ratio = actual / predicted;
                    if ratio < 0.25 {
                        radius = 0.25 * norm;
                    } else if ratio > 0.75 && norm > 0.99 * radius {
                        radius = (2.0 * radius).min(MAX_RADIUS);
                    }
                    merits.push(m);
                    *point = cand;
                    accepted = true;
                    break;
                }
                radius = 0.25 * norm.min(radius);
            }
            if !accepted {
                return Inner { end: InnerEnd::Stalled, stationarity, iterations: it + 1, merits };
            }
        }
        Inner { end: InnerEnd::Budget, stationarity, iterations: self.config.max_inner_iters, merits }
    }
}

impl NlpSolver for AugmentedLagrangian {
    fn solve(&self, p: &dyn NlpProblem, z0: &[f64]) -> NlpSolution {
        let cfg = &self.config;
        let (lo, hi) = p.bounds();
        let order = p.variable_order();
        let mut pos = vec![0; order.len()];
        for (k, &v) in order.iter().enumerate() {
            pos[v] = k;
        }
        let ord = Ordering { pos };

        let mut z = z0.to_vec();
        project(&mut z, lo, hi);
        let mut point = Point::eval(p, z);
        let mut lam = vec![0.0; p.num_constraints()];
        let mut mu = cfg.penalty_init;
        let mut omega = (1.0 / mu).max(cfg.tol_stationarity);
        let mut eta = (1.0 / mu.powf(0.1)).max(cfg.tol_constraint);
        let mut damping = 1e-8;
        let mut history = Vec::new();
        let mut inner_total = 0;
        let mut stationarity = f64::INFINITY;
        let mut target = cfg.tol_constraint;
        let mut restorations = 0;

        let finish = |point: Point, lam: Vec<f64>, stationarity, status, outer, inner, history| NlpSolution {
            objective: point.f,
            constraint_violation: point.violation(),
            z: point.z,
            stationarity,
            multipliers: lam,
            status,
            outer_iterations: outer,
            inner_iterations: inner,
            merit_history: history,
        };

        if !point.finite() {
            return finish(point, lam, stationarity, SolveStatus::NumericalFailure, 0, 0, history);
        }

        for outer in 0..cfg.max_outer_iters {
            let inner = self.minimize(p, &ord, &mut point, &lam, mu, omega, &mut damping);
            inner_total += inner.iterations;
            stationarity = inner.stationarity;
            history.push(inner.merits);
            if let InnerEnd::Numerical = inner.end {
                return finish(point, lam, stationarity, SolveStatus::NumericalFailure, outer + 1, inner_total, history);
            }
            let viol = point.violation();
            let stationary = matches!(inner.end, InnerEnd::Stationary) && stationarity <= cfg.tol_stationarity;
            if viol <= target && stationary {
                if p.acceptable(&point.z, cfg.tol_constraint) {
                    return finish(point, lam, stationarity, SolveStatus::Converged, outer + 1, inner_total, history);
                }
                // Move onto the constraint manifold with the updated multipliers
                // and check again.
                let mut lam_new = lam.clone();
                for (l, c) in lam_new.iter_mut().zip(&point.c) {
                    *l += mu * c;
                }
                if let Some(polished) = restore_feasibility(p, &point, cfg.tol_constraint * 1e-6) {
                    let st = lagrangian_stationarity(p, &polished, &lam_new);
                    let ok = p.acceptable(&polished.z, cfg.tol_constraint);
                    if st <= cfg.tol_stationarity && ok {
                        return finish(polished, lam_new, st, SolveStatus::Converged, outer + 1, inner_total, history);
                    }
                    if !ok {
                        // Exactly feasible yet rejected by the audit: tightening
                        // the constraints cannot help.
                        return finish(polished, lam_new, st, SolveStatus::MaxIters, outer + 1, inner_total, history);
                    }
                    if restorations < MAX_RESTORATIONS {
                        // Re-minimize from the feasible point.
                        restorations += 1;
                        point = polished;
                        lam = lam_new;
                        continue;
                    }
                }
                // Tolerances met but the problem's own audit is not: keep
                // tightening the constraints.
                target = viol * 0.01;
                if target < MIN_CONSTRAINT_TARGET {
                    return finish(point, lam, stationarity, SolveStatus::MaxIters, outer + 1, inner_total, history);
                }
                eta = eta.min(target);
            }
            if viol <= eta {
                for (l, c) in lam.iter_mut().zip(&point.c) {
                    *l += mu * c;
                }
                eta = (eta / mu.powf(0.9)).max(target);
                omega = (omega / mu).max(cfg.tol_stationarity);
            } else {
                if mu >= cfg.penalty_max && viol > cfg.tol_constraint {
                    let stalled = matches!(inner.end, InnerEnd::Stationary | InnerEnd::Stalled);
                    if stalled {
                        return finish(point, lam, stationarity, SolveStatus::Infeasible, outer + 1, inner_total, history);
                    }
                }
                mu = (mu * cfg.penalty_growth).min(cfg.penalty_max);
                eta = (1.0 / mu.powf(0.1)).max(target);
                omega = (1.0 / mu).max(cfg.tol_stationarity);
            }
        }
        let status = if point.violation() > cfg.tol_constraint && mu >= cfg.penalty_max {
            SolveStatus::Infeasible
        } else {
            SolveStatus::MaxIters
        };
        finish(point, lam, stationarity, status, cfg.max_outer_iters, inner_total, history)
    }
}

/// Solved motion problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub trajectory: Trajectory,
    pub objective: f64,
    pub status: SolveStatus,
    pub constraint_violation: f64,
    pub stationarity: f64,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub wall_time: f64,
}

impl SolveResult {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

/// Solves a transcribed motion problem with the augmented-Lagrangian backend.
pub fn solve(nlp: &Nlp, guess: &Trajectory, config: &SolverConfig) -> Result<SolveResult, OcpError> {
    solve_with(&AugmentedLagrangian::new(config.clone()), config, nlp, guess)
}

/// Solves with any backend; `converged` is kept only if an independent
/// rollout of the controls reproduces the states within `10 * tol_constraint`.
pub fn solve_with(
    backend: &dyn NlpSolver,
    config: &SolverConfig,
    nlp: &Nlp,
    guess: &Trajectory,
) -> Result<SolveResult, OcpError> {
    let start = Instant::now();
    let z0 = nlp.pack(guess)?;
    let sol = backend.solve(nlp, &z0);
    let trajectory = nlp.unpack(&sol.z);
    let mut status = sol.status;
    if status == SolveStatus::Converged {
        let audit = rollout(nlp, &trajectory);
        if !(audit.max_state_deviation < 10.0 * config.tol_constraint) {
            status = SolveStatus::MaxIters;
        }
    }
    Ok(SolveResult {
        trajectory,
        objective: sol.objective,
        status,
        constraint_violation: sol.constraint_violation,
        stationarity: sol.stationarity,
        iterations: sol.inner_iterations,
        outer_iterations: sol.outer_iterations,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Independent feasibility audit of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    /// Largest deviation between re-simulated and stored states.
    pub max_state_deviation: f64,
    /// Largest violation of any state or control box.
    pub max_bound_violation: f64,
    /// Infinity-norm distance of the re-simulated final state from the target.
    pub terminal_error: f64,
    /// Set when the re-simulation produced a non-finite state.
    pub diverged: bool,
    pub states: Vec<Vec<f64>>,
}

/// Re-simulates the controls of `traj` from its initial state and compares
/// against the stored states and the problem boxes.
pub fn rollout(nlp: &Nlp, traj: &Trajectory) -> RolloutReport {
    let spec = nlp.spec();
    let b = nlp.boxes();
    let n = nlp.control_dim();
    let mut bound: f64 = 0.0;
    let over = |v: f64, lo: f64, hi: f64| (lo - v).max(v - hi).max(0.0);
    for x in &traj.states {
        for i in 0..n {
            bound = bound.max(over(x[i], b.q_min[i], b.q_max[i]));
            bound = bound.max(over(x[n + i], b.qd_min[i], b.qd_max[i]));
        }
    }
    for u in &traj.controls {
        for i in 0..n {
            bound = bound.max(over(u[i], b.u_min[i], b.u_max[i]));
        }
    }
    let mut states = vec![traj.states[0].clone()];
    let mut deviation: f64 = 0.0;
    let mut diverged = false;
    for (k, u) in traj.controls.iter().enumerate() {
        match nlp.step(&states[k], u) {
            Ok(next) => {
                for (a, s) in next.iter().zip(&traj.states[k + 1]) {
                    deviation = deviation.max((a - s).abs());
                }
                states.push(next);
            }
            Err(_) => {
                diverged = true;
                deviation = f64::INFINITY;
                break;
            }
        }
    }
    let terminal_error = if diverged {
        f64::INFINITY
    } else {
        inf_norm(&states.last().unwrap().iter().zip(&spec.x_final).map(|(a, b)| a - b).collect::<Vec<_>>())
    };
    RolloutReport { max_state_deviation: deviation, max_bound_violation: bound, terminal_error, diverged, states }
}

/// Re-simulates the solved controls from the solved initial state.
pub fn verify_by_rollout(nlp: &Nlp, result: &SolveResult) -> RolloutReport {
    rollout(nlp, &result.trajectory)
}

/// Convenience: build, guess and solve one motion problem.
pub fn solve_motion(
    model: &crate::model::RobotModel,
    tr: &crate::model::Transmission,
    spec: &ocp::OcProblemSpec,
    config: &SolverConfig,
) -> Result<(Nlp, SolveResult), OcpError> {
    let nlp = ocp::build_nlp(model, tr, spec)?;
    let guess = ocp::initial_guess(&nlp);
    let result = solve(&nlp, &guess, config)?;
    Ok((nlp, result))
}
