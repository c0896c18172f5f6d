//! Canonical paths: the connecting orbit problem `M u' = -G(u)`, `(v, w)(0) = (v0, w0)`,
//! `Ψ (u(T) - û) = 0`, discretized by the implicit midpoint rule and solved by space-time Newton.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm_inf;
use crate::model::{self, components, COMPONENTS};
use crate::newton::{newton, NewtonOptions, NonlinearSystem};
use crate::objective::{average_profit, value_report, ValueReport};
use crate::spectral::stable_projector;
use crate::steady::{admit_canonical, CssPoint};
use crate::{Operators, ParameterSet, SparseMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeMesh {
    pub times: Vec<f64>,
    /// Ratio of the last to the first step.
    pub grading: f64,
}

impl TimeMesh {
    /// Geometrically graded mesh on `[0, T]` with `nodes` nodes, finest at `t = 0`.
    pub fn graded(horizon: f64, nodes: usize, grading: f64) -> Result<Self> {
        if !(horizon > 0.0) || nodes < 2 || !(grading > 0.0) {
            return Err(Error::InvalidArgument(format!("bad time mesh: T = {horizon}, nodes = {nodes}, grading = {grading}")));
        }
        let m = nodes - 1;
        let r = if m > 1 { grading.powf(1.0 / (m - 1) as f64) } else { 1.0 };
        let steps: Vec<f64> = (0..m).map(|k| r.powi(k as i32)).collect();
        let total: f64 = steps.iter().sum();
        let mut times = Vec::with_capacity(nodes);
        let mut t = 0.0;
        times.push(0.0);
        for s in &steps {
            t += horizon * s / total;
            times.push(t);
        }
        times[m] = horizon;
        Ok(Self { times, grading })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        let mesh = Self { grading: f64::NAN, times };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() < 2 || self.times[0] != 0.0 {
            return Err(Error::InvalidArgument("time mesh must start at 0 and have two nodes".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("time nodes must increase strictly".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Halves every step.
    pub fn refined(&self) -> Self {
        let mut times = Vec::with_capacity(2 * self.times.len() - 1);
        for w in self.times.windows(2) {
            times.push(w[0]);
            times.push(0.5 * (w[0] + w[1]));
        }
        times.push(self.horizon());
        Self { times, grading: self.grading }
    }
}

#[derive(Debug, Clone)]
pub struct PathOptions {
    pub horizon: f64,
    pub nodes: usize,
    pub grading: f64,
    pub newton: NewtonOptions,
    /// Relative terminal mismatch `‖u(T) - û‖∞ / ‖û‖∞` accepted.
    pub mismatch_tol: f64,
    /// Reject paths whose mismatch exceeds `mismatch_tol` instead of warning.
    pub strict: bool,
    pub sigma_step: f64,
    /// Steps below this count toward a fold declaration.
    pub sigma_fold: f64,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self {
            horizon: 100.0,
            nodes: 80,
            grading: 20.0,
            newton: NewtonOptions { max_iter: 20, ..Default::default() },
            mismatch_tol: 1e-3,
            strict: false,
            sigma_step: 0.1,
            sigma_fold: 1e-4,
        }
    }
}

impl PathOptions {
    /// Default options with the horizon scaled as `3/ρ`.
    pub fn for_rho(rho: f64) -> Self {
        Self { horizon: 3.0 / rho, ..Default::default() }
    }

    pub fn time_mesh(&self) -> Result<TimeMesh> {
        TimeMesh::graded(self.horizon, self.nodes, self.grading)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalPath {
    pub mesh: TimeMesh,
    /// State `(v, w, λ, μ)` at every time node.
    pub states: Vec<Vec<f64>>,
    /// Closed-loop effort at every time node.
    pub effort: Vec<Vec<f64>>,
    pub target: CssPoint,
    /// `‖u(T) - û‖∞ / ‖û‖∞`
    pub mismatch: f64,
    pub value: ValueReport,
    /// Accepted values of the initial state homotopy parameter.
    pub sigma_history: Vec<f64>,
    /// `‖·‖∞` of the discrete equations at the solution.
    pub residual: f64,
    pub warning: Option<String>,
}

impl CanonicalPath {
    pub fn params(&self) -> &ParameterSet {
        &self.target.params
    }

    pub fn initial_states(&self) -> Vec<f64> {
        let n = self.target.n_nodes();
        self.states[0][..2 * n].to_vec()
    }

    pub fn value(&self) -> f64 {
        self.value.total
    }

    /// CSV with one row per (time, node): `t,node,v,w,lambda,mu,E`.
    pub fn to_csv(&self) -> String {
        let n = self.target.n_nodes();
        let mut s = String::from("t,node,v,w,lambda,mu,E\n");
        for (k, (u, e)) in self.states.iter().zip(&self.effort).enumerate() {
            for i in 0..n {
                s.push_str(&format!(
                    "{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                    self.mesh.times[k],
                    i,
                    u[i],
                    u[n + i],
                    u[2 * n + i],
                    u[3 * n + i],
                    e[i]
                ));
            }
        }
        s
    }
}

/// The discretized connecting orbit problem.
pub struct PathProblem<'a> {
    pub ops: &'a Operators,
    pub par: ParameterSet,
    pub times: &'a [f64],
    pub v0w0: Vec<f64>,
    pub target: &'a [f64],
    pub psi: &'a Mat<f64>,
}

impl PathProblem<'_> {
    fn n(&self) -> usize {
        self.ops.n_nodes()
    }

    fn block(&self) -> usize {
        COMPONENTS * self.n()
    }

    fn midpoint(&self, x: &[f64], j: usize) -> Vec<f64> {
        let b = self.block();
        x[(j - 1) * b..j * b].iter().zip(&x[j * b..(j + 1) * b]).map(|(a, c)| 0.5 * (a + c)).collect()
    }

    /// Residuals of the interval equations alone, per time step.
    pub fn interior_residuals(&self, x: &[f64]) -> Result<Vec<f64>> {
        let b = self.block();
        let r = self.residual(x)?;
        Ok((1..self.times.len()).map(|j| norm_inf(&r[2 * self.n() + (j - 1) * b..2 * self.n() + j * b])).collect())
    }
}

impl NonlinearSystem for PathProblem<'_> {
    fn dim(&self) -> usize {
        self.block() * self.times.len()
    }

    fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        let b = self.block();
        let m = self.times.len() - 1;
        let mut r = Vec::with_capacity(self.dim());
        r.extend(x[..2 * n].iter().zip(&self.v0w0).map(|(a, c)| a - c));
        let mut du = vec![0.0; n];
        for j in 1..=m {
            let h = self.times[j] - self.times[j - 1];
            let g = model::residual(&self.midpoint(x, j), &self.par, self.ops)?;
            for c in 0..COMPONENTS {
                let off = c * n;
                let diff: Vec<f64> = (0..n).map(|i| x[j * b + off + i] - x[(j - 1) * b + off + i]).collect();
                self.ops.mass.mul_vec_into(&diff, &mut du);
                r.extend((0..n).map(|i| du[i] / h + g[off + i]));
            }
        }
        let last = &x[m * b..];
        let d: Vec<f64> = last.iter().zip(self.target).map(|(a, c)| a - c).collect();
        for row in 0..self.psi.nrows() {
            r.push((0..b).map(|k| self.psi[(row, k)] * d[k]).sum());
        }
        Ok(r)
    }

    fn jacobian(&self, x: &[f64]) -> Result<SparseMatrix> {
        let n = self.n();
        let b = self.block();
        let m = self.times.len() - 1;
        let mut trip: Vec<(usize, usize, f64)> = (0..2 * n).map(|i| (i, i, 1.0)).collect();
        for j in 1..=m {
            let h = self.times[j] - self.times[j - 1];
            let row0 = 2 * n + (j - 1) * b;
            let gu = model::jacobian(&self.midpoint(x, j), &self.par, self.ops)?;
            for (r, c, v) in gu.triplets() {
                trip.push((row0 + r, (j - 1) * b + c, 0.5 * v));
                trip.push((row0 + r, j * b + c, 0.5 * v));
            }
            for comp in 0..COMPONENTS {
                let off = comp * n;
                for (r, c, v) in self.ops.mass.triplets() {
                    trip.push((row0 + off + r, (j - 1) * b + off + c, -v / h));
                    trip.push((row0 + off + r, j * b + off + c, v / h));
                }
            }
        }
        let row0 = 2 * n + m * b;
        for row in 0..self.psi.nrows() {
            for k in 0..b {
                let v = self.psi[(row, k)];
                if v != 0.0 {
                    trip.push((row0 + row, m * b + k, v));
                }
            }
        }
        Ok(SparseMatrix::from_triplets(self.dim(), self.dim(), &trip))
    }

    fn admit(&self, x: &mut [f64]) -> bool {
        let b = self.block();
        x.chunks_mut(b).all(|u| admit_canonical(u, self.par.p))
    }
}

fn flatten(states: &[Vec<f64>]) -> Vec<f64> {
    states.iter().flatten().copied().collect()
}

fn unflatten(x: &[f64], block: usize) -> Vec<Vec<f64>> {
    x.chunks(block).map(|c| c.to_vec()).collect()
}

fn relative_mismatch(last: &[f64], target: &[f64]) -> f64 {
    let d: Vec<f64> = last.iter().zip(target).map(|(a, b)| a - b).collect();
    norm_inf(&d) / norm_inf(target).max(1.0)
}

/// Builds the stored path from a solution of the discrete problem.
fn assemble_path(
    x: &[f64],
    mesh: &TimeMesh,
    target: &CssPoint,
    ops: &Operators,
    residual: f64,
    sigma_history: Vec<f64>,
    opts: &PathOptions,
) -> Result<CanonicalPath> {
    let par = &target.params;
    let states = unflatten(x, COMPONENTS * ops.n_nodes());
    let mut effort = Vec::with_capacity(states.len());
    let mut profit = Vec::with_capacity(states.len());
    for u in &states {
        let [v, _, l, _] = components(u);
        let e = model::control_law(v, l, par)?;
        profit.push(average_profit(v, &e, par, ops)?);
        effort.push(e);
    }
    let value = value_report(&mesh.times, profit, par.rho, target.diagnostics.profit)?;
    let mismatch = relative_mismatch(states.last().unwrap(), &target.u);
    let mut warning = None;
    if mismatch > opts.mismatch_tol {
        let msg = format!("terminal mismatch {mismatch:.3e} exceeds {:.1e}", opts.mismatch_tol);
        if opts.strict {
            return Err(Error::NonConvergence { iterations: 0, residual: mismatch });
        }
        warning = Some(msg);
    }
    Ok(CanonicalPath { mesh: mesh.clone(), states, effort, target: target.clone(), mismatch, value, sigma_history, residual, warning })
}

fn check_initial(v0w0: &[f64], n: usize) -> Result<()> {
    if v0w0.len() != 2 * n {
        return Err(Error::InvalidArgument(format!("initial states have length {}, expected {}", v0w0.len(), 2 * n)));
    }
    if let Some(i) = v0w0.iter().position(|&x| !(x >= 0.0)) {
        return Err(Error::Domain { node: i % n, what: "negative initial state".into() });
    }
    Ok(())
}

/// The constant path sitting at the target.
pub fn constant_path(target: &CssPoint, ops: &Operators, opts: &PathOptions) -> Result<CanonicalPath> {
    let mesh = opts.time_mesh()?;
    let x: Vec<f64> = (0..mesh.len()).flat_map(|_| target.u.iter().copied()).collect();
    assemble_path(&x, &mesh, target, ops, 0.0, vec![1.0], opts)
}

fn solve_on(
    ops: &Operators,
    target: &CssPoint,
    psi: &Mat<f64>,
    mesh: &TimeMesh,
    v0w0: &[f64],
    guess: &[f64],
    nopts: &NewtonOptions,
) -> Result<(Vec<f64>, f64)> {
    let prob = PathProblem { ops, par: target.params, times: &mesh.times, v0w0: v0w0.to_vec(), target: &target.u, psi };
    let rep = newton(&prob, guess, nopts)?;
    Ok((rep.solution, rep.residual))
}

/// Solves the connecting orbit problem from `(v0, w0)` to `target`.
///
/// Newton starts from a linear-in-time blend of the states towards the target with the target
/// co-states. If that fails, the initial states are continued from the target's own states.
pub fn connect(v0w0: &[f64], target: &CssPoint, ops: &Operators, opts: &PathOptions) -> Result<CanonicalPath> {
    let n = ops.n_nodes();
    check_initial(v0w0, n)?;
    let psi = stable_projector(&target.u, &target.params, ops)?;
    let mesh = opts.time_mesh()?;
    let horizon = mesh.horizon();
    let guess: Vec<f64> = mesh
        .times
        .iter()
        .flat_map(|&t| {
            let a = t / horizon;
            let mut u = target.u.clone();
            for i in 0..2 * n {
                u[i] = (1.0 - a) * v0w0[i] + a * target.u[i];
            }
            u
        })
        .collect();
    match solve_on(ops, target, &psi, &mesh, v0w0, &guess, &opts.newton) {
        Ok((x, res)) => assemble_path(&x, &mesh, target, ops, res, vec![1.0], opts),
        Err(_) => {
            let start = constant_path(target, ops, opts)?;
            continue_initial_state(&start, v0w0, ops, opts)
        }
    }
}

/// Solves the path problem on a different time mesh, warm-started by interpolating `path`.
pub fn resolve_on_mesh(path: &CanonicalPath, mesh: &TimeMesh, ops: &Operators, opts: &PathOptions) -> Result<CanonicalPath> {
    mesh.validate()?;
    let psi = stable_projector(&path.target.u, &path.target.params, ops)?;
    let guess: Vec<f64> = mesh.times.iter().flat_map(|&t| interpolate_state(path, t)).collect();
    let v0w0 = path.initial_states();
    let (x, res) = solve_on(ops, &path.target, &psi, mesh, &v0w0, &guess, &opts.newton)?;
    assemble_path(&x, mesh, &path.target, ops, res, path.sigma_history.clone(), opts)
}

/// Piecewise linear interpolation in time; constant beyond `T`.
pub fn interpolate_state(path: &CanonicalPath, t: f64) -> Vec<f64> {
    let times = &path.mesh.times;
    if t >= path.mesh.horizon() {
        return path.states.last().unwrap().clone();
    }
    let k = times.partition_point(|&s| s <= t).max(1) - 1;
    let a = (t - times[k]) / (times[k + 1] - times[k]);
    path.states[k].iter().zip(&path.states[k + 1]).map(|(x, y)| x + a * (y - x)).collect()
}

/// Moves the initial states of a converged path to `target_init` by the homotopy
/// `σ target_init + (1 - σ) current`, `σ: 0 → 1`.
///
/// Fails with [`Error::PathNonexistence`] once three consecutive step halvings below
/// `opts.sigma_fold` make no progress.
pub fn continue_initial_state(path: &CanonicalPath, target_init: &[f64], ops: &Operators, opts: &PathOptions) -> Result<CanonicalPath> {
    continue_initial_state_to(path, target_init, 1.0, ops, opts)
}

/// As [`continue_initial_state`], stopping at `sigma_end ∈ [0, 1]`.
pub fn continue_initial_state_to(
    path: &CanonicalPath,
    target_init: &[f64],
    sigma_end: f64,
    ops: &Operators,
    opts: &PathOptions,
) -> Result<CanonicalPath> {
    let n = ops.n_nodes();
    check_initial(target_init, n)?;
    if sigma_end <= 0.0 {
        return Ok(path.clone());
    }
    let psi = stable_projector(&path.target.u, &path.target.params, ops)?;
    let start = path.initial_states();
    let init_at = |s: f64| -> Vec<f64> { start.iter().zip(target_init).map(|(a, b)| (1.0 - s) * a + s * b).collect() };
    let mut sigma = 0.0;
    let mut x = flatten(&path.states);
    let mut prev: Option<(f64, Vec<f64>)> = None;
    let mut ds = opts.sigma_step.min(sigma_end);
    let mut small_failures = 0;
    let mut history = vec![0.0];
    let mut residual = path.residual;
    let nopts = NewtonOptions { max_iter: 12, ..opts.newton };
    while sigma < sigma_end {
        let s_try = (sigma + ds).min(sigma_end);
        let guess = match &prev {
            Some((sp, xp)) if sigma > *sp => {
                let a = (s_try - sigma) / (sigma - sp);
                x.iter().zip(xp).map(|(c, p)| c + a * (c - p)).collect()
            }
            _ => x.clone(),
        };
        let attempt = solve_on(ops, &path.target, &psi, &path.mesh, &init_at(s_try), &guess, &nopts)
            .or_else(|_| solve_on(ops, &path.target, &psi, &path.mesh, &init_at(s_try), &x, &nopts));
        match attempt {
            Ok((xn, res)) => {
                prev = Some((sigma, std::mem::replace(&mut x, xn)));
                sigma = s_try;
                residual = res;
                history.push(sigma);
                small_failures = 0;
                ds = (1.5 * ds).min(0.25);
            }
            Err(_) => {
                ds *= 0.5;
                if ds < opts.sigma_fold {
                    small_failures += 1;
                    if small_failures >= 3 {
                        return Err(Error::PathNonexistence { sigma });
                    }
                }
            }
        }
    }
    assemble_path(&x, &path.mesh, &path.target, ops, residual, history, opts)
}

/// Diagnostics of the truncation at `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub mismatch_inf: f64,
    pub mismatch_rel: f64,
    /// `e^{-ρT} ∫ v λ dx` at `T`.
    pub boundary_v: f64,
    /// `e^{-ρT} ∫ w μ dx` at `T`.
    pub boundary_w: f64,
    /// `|J(2T) - J(T)| / |J(T)|`, when the doubled horizon was solved.
    pub doubling_change: Option<f64>,
}

pub fn truncation_check(path: &CanonicalPath, ops: &Operators, opts: &PathOptions, resolve_doubled: bool) -> Result<TruncationReport> {
    let last = path.states.last().unwrap();
    let d: Vec<f64> = last.iter().zip(&path.target.u).map(|(a, b)| a - b).collect();
    let [v, w, l, m] = components(last);
    let disc = (-path.params().rho * path.mesh.horizon()).exp();
    let integral = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(&ops.weights).map(|((x, y), wt)| x * y * wt).sum() };
    let doubling_change = if resolve_doubled {
        let mesh = TimeMesh::graded(2.0 * path.mesh.horizon(), path.mesh.len() + path.mesh.len() / 4, path.mesh.grading)?;
        let doubled = resolve_on_mesh(path, &mesh, ops, opts)?;
        Some((doubled.value() - path.value()).abs() / path.value().abs())
    } else {
        None
    };
    Ok(TruncationReport {
        mismatch_inf: norm_inf(&d),
        mismatch_rel: path.mismatch,
        boundary_v: disc * integral(v, l),
        boundary_w: disc * integral(w, m),
        doubling_change,
    })
}

/// Interior residuals `‖M (u_j - u_{j-1})/h + G(u_{j-1/2})‖∞` per time step.
pub fn interior_residuals(path: &CanonicalPath, ops: &Operators) -> Result<Vec<f64>> {
    let psi = Mat::<f64>::zeros(0, COMPONENTS * ops.n_nodes());
    let prob = PathProblem {
        ops,
        par: path.target.params,
        times: &path.mesh.times,
        v0w0: path.initial_states(),
        target: &path.target.u,
        psi: &psi,
    };
    prob.interior_residuals(&flatten(&path.states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::steady::solve_flat_css;
    use crate::Mesh;

    fn setup(r: f64) -> (Operators, CssPoint) {
        let ops = Operators::assemble(&Mesh::interval(5.0, 20).unwrap()).unwrap();
        let par = ParameterSet::default().with_rain(r);
        let css = solve_flat_css(&par, [400.0, 10.0, 0.5, 1.0], &ops, &NewtonOptions::default()).unwrap();
        (ops, css)
    }

    #[test]
    fn graded_mesh_properties() {
        let m = TimeMesh::graded(100.0, 80, 20.0).unwrap();
        assert_eq!(m.len(), 80);
        assert_eq!(m.times[0], 0.0);
        assert_eq!(m.horizon(), 100.0);
        let h0 = m.times[1] - m.times[0];
        let hl = m.times[79] - m.times[78];
        assert!((hl / h0 - 20.0).abs() < 1e-8);
        assert!(m.refined().validate().is_ok());
        assert!(TimeMesh::from_times(vec![0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn own_states_give_the_constant_path() {
        let (ops, css) = setup(28.0);
        let n = ops.n_nodes();
        let opts = PathOptions { nodes: 30, ..Default::default() };
        let p = connect(&css.u[..2 * n], &css, &ops, &opts).unwrap();
        assert!(p.mismatch < 1e-10);
        assert!((p.value() - css.diagnostics.profit / 0.03).abs() < 1e-8);
        let tr = truncation_check(&p, &ops, &opts, false).unwrap();
        assert!(tr.mismatch_inf < 1e-8 && tr.boundary_v.is_finite());
    }

    #[test]
    fn perturbed_start_converges_to_target() {
        let (ops, css) = setup(28.0);
        let n = ops.n_nodes();
        let xs = Mesh::interval(5.0, 20).unwrap().xs();
        let v0w0: Vec<f64> = (0..2 * n).map(|i| css.u[i] * if i < n { 1.0 + 0.1 * (0.6 * xs[i]).cos() } else { 1.0 }).collect();
        let opts = PathOptions { nodes: 40, ..Default::default() };
        let p = connect(&v0w0, &css, &ops, &opts).unwrap();
        assert!(p.mismatch < 1e-3, "{}", p.mismatch);
        let r = interior_residuals(&p, &ops).unwrap();
        assert!(r.iter().all(|&x| x <= 1e-8));
        assert!(p.states[0][..2 * n].iter().zip(&v0w0).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn zero_homotopy_returns_input() {
        let (ops, css) = setup(28.0);
        let opts = PathOptions { nodes: 20, ..Default::default() };
        let p = constant_path(&css, &ops, &opts).unwrap();
        let n = ops.n_nodes();
        let q = continue_initial_state_to(&p, &vec![1.0; 2 * n], 0.0, &ops, &opts).unwrap();
        assert_eq!(p, q);
    }
}
