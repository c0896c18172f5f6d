//! Pseudo-arclength continuation of steady states with fold and branch point detection.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{determinant_sign, norm_inf, SparseLu};
use crate::model::{self, COMPONENTS};
use crate::objective::state_profit;
use crate::spectral::{self, flat_values, LaplaceModes, Method};
use crate::steady::{admit_canonical, CssDiagnostics, CssPoint};
use crate::{Operators, ParameterSet, SparseMatrix};

/// Largest bordered system for which the dense determinant test is evaluated.
pub const DENSE_DET_LIMIT: usize = 1500;

/// The steady problem being continued.
pub trait SteadyModel {
    fn kind(&self) -> ModelKind;
    fn components(&self) -> usize;
    fn residual(&self, u: &[f64], par: &ParameterSet, ops: &Operators) -> Result<Vec<f64>>;
    fn jacobian(&self, u: &[f64], par: &ParameterSet, ops: &Operators) -> Result<SparseMatrix>;
    fn admit(&self, u: &mut [f64], par: &ParameterSet) -> bool;
    /// Averaged profit: `J_{c,a}` for the canonical model, `⟨π⟩` for the private one.
    fn profit(&self, u: &[f64], par: &ParameterSet, ops: &Operators) -> Result<f64>;
    /// Defect of a canonical state, number of unstable eigenvalues of a private one.
    fn index(&self, u: &[f64], par: &ParameterSet, ops: &Operators) -> Result<usize>;
    /// Pointwise Jacobian of the kinetics at a flat state.
    fn local_jacobian(&self, s: &[f64], par: &ParameterSet) -> Result<Vec<Vec<f64>>>;
    fn diffusion(&self, par: &ParameterSet) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Canonical,
    Private,
}

pub struct Canonical;
pub struct Private;

impl SteadyModel for Canonical {
    fn kind(&self) -> ModelKind {
        ModelKind::Canonical
    }
    fn components(&self) -> usize {
        COMPONENTS
    }
    fn residual(&self, u: &[f64], par: &ParameterSet, ops: &Operators) -> Result<Vec<f64>> {
        model::residual(u, par, ops)
    }
    fn jacobian(&self, u: &[f64], par: &ParameterSet, ops: &Operators) -> Result<SparseMatrix> {
        model::jacobian(u, par, ops)
    }
    fn admit(&self, u: &mut [f64], par: &ParameterSet) -> bool {
        admit_canonical(u, par.p)
    }
    fn profit(&self, u: &[f64], par: &ParameterSet, ops: &Operators) -> Result<f64> {
        state_profit(u, par, ops)
    }
    fn index(&self, u: &[f64], par: &ParameterSet, ops: &Operators) -> Result<usize> {
        spectral::defect(u, par, ops)
    }
    fn local_jacobian(&self, s: &[f64], par: &ParameterSet) -> Result<Vec<Vec<f64>>> {
        let k = model::flat_kinetics([s[0], s[1], s[2], s[3]], par)?;
        Ok(k.jac.iter().map(|r| r.to_vec()).collect())
    }
    fn diffusion(&self, par: &ParameterSet) -> Vec<f64> {
        model::diffusion_diagonal(par).to_vec()
    }
}

impl SteadyModel for Private {
    fn kind(&self) -> ModelKind {
        ModelKind::Private
    }
    fn components(&self) -> usize {
        2
    }
    fn residual(&self, u: &[f64], par: &ParameterSet, ops: &Operators) -> Result<Vec<f64>> {
        model::private_residual(u, par, ops)
    }
    fn jacobian(&self, u: &[f64], par: &ParameterSet, ops: &Operators) -> Result<SparseMatrix> {
        model::private_jacobian(u, par, ops)
    }
    fn admit(&self, u: &mut [f64], _par: &ParameterSet) -> bool {
        u.iter_mut().for_each(|x| *x = x.max(0.0));
        true
    }
    fn profit(&self, u: &[f64], par: &ParameterSet, ops: &Operators) -> Result<f64> {
        ops.average(&model::private_profit(&u[..ops.n_nodes()], par))
    }
    fn index(&self, u: &[f64], par: &ParameterSet, ops: &Operators) -> Result<usize> {
        let s = spectral::private_spectrum(u, par, ops, Method::Auto)?;
        Ok(s.n_unstable + s.n_marginal)
    }
    fn local_jacobian(&self, s: &[f64], par: &ParameterSet) -> Result<Vec<Vec<f64>>> {
        let (_, j) = model::private_node_kinetics(s[0], s[1], par, par.private_harvest_coefficient(), 0)?;
        Ok(j.iter().map(|r| r.to_vec()).collect())
    }
    fn diffusion(&self, par: &ParameterSet) -> Vec<f64> {
        vec![par.d1, par.d2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointKind {
    Regular,
    Fold,
    BranchPoint,
}

/// One converged point of a branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchEntry {
    pub kind: PointKind,
    pub param: f64,
    pub arclength: f64,
    pub u: Vec<f64>,
    pub params: ParameterSet,
    /// Component averages; `λ` and `μ` are NaN for the private model.
    pub averages: [f64; 4],
    pub profit: f64,
    pub index: Option<usize>,
    pub residual: f64,
    /// Parameter component of the unit tangent.
    pub tangent_param: f64,
}

impl BranchEntry {
    /// The entry as a canonical steady state.
    pub fn css(&self) -> CssPoint {
        CssPoint {
            u: self.u.clone(),
            params: self.params,
            diagnostics: CssDiagnostics {
                avg_v: self.averages[0],
                avg_w: self.averages[1],
                avg_lambda: self.averages[2],
                avg_mu: self.averages[3],
                profit: self.profit,
                defect: self.index,
                residual: self.residual,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub entry: usize,
    pub param: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bifurcation {
    pub entry: usize,
    pub param: f64,
    /// Laplacian mode that loses invertibility, when the trunk is flat.
    pub mode: Option<usize>,
    /// Unit tangent of the trunk at the point, `(u, parameter)`.
    pub tangent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub branch: String,
    pub bifurcation: usize,
    pub param: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub name: String,
    pub param: String,
    pub model: ModelKind,
    pub points: Vec<BranchEntry>,
    pub folds: Vec<Fold>,
    pub bifurcations: Vec<Bifurcation>,
    pub provenance: Option<Provenance>,
    pub stop: String,
}

#[derive(Debug, Clone)]
pub struct ContinuationOptions {
    pub ds: f64,
    pub ds_min: f64,
    pub ds_max: f64,
    pub max_steps: usize,
    /// Continuation stops once the parameter leaves this interval.
    pub bounds: (f64, f64),
    pub tol: f64,
    pub max_corrector_iter: usize,
    pub detect_bifurcations: bool,
    /// Localization accuracy in the parameter.
    pub param_tol: f64,
    pub compute_index: bool,
    /// Stop after this many bifurcations have been found.
    pub stop_after_bifurcations: Option<usize>,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            ds: 0.5,
            ds_min: 1e-6,
            ds_max: 2.0,
            max_steps: 200,
            bounds: (f64::NEG_INFINITY, f64::INFINITY),
            tol: 1e-8,
            max_corrector_iter: 12,
            detect_bifurcations: true,
            param_tol: 1e-3,
            compute_index: true,
            stop_after_bifurcations: None,
        }
    }
}

/// Shared state of a continuation run: model, mesh operators, parameters and the weighted norm.
pub struct Continuer<'a, M: SteadyModel> {
    pub model: &'a M,
    pub ops: &'a Operators,
    pub base: ParameterSet,
    pub param: String,
    pub opts: ContinuationOptions,
    modes: Option<LaplaceModes>,
}

fn axpy(a: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| a * xi + yi).collect()
}

impl<'a, M: SteadyModel> Continuer<'a, M> {
    pub fn new(model: &'a M, ops: &'a Operators, base: ParameterSet, param: &str, opts: ContinuationOptions) -> Result<Self> {
        if base.get(param).is_none() {
            return Err(Error::InvalidArgument(format!("unknown continuation parameter `{param}`")));
        }
        Ok(Self { model, ops, base, param: param.to_string(), opts, modes: None })
    }

    fn n_state(&self) -> usize {
        self.model.components() * self.ops.n_nodes()
    }

    /// Weight of the state part in the arclength inner product.
    fn xi(&self) -> f64 {
        1.0 / self.n_state() as f64
    }

    pub fn wdot(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = self.n_state();
        self.xi() * a[..n].iter().zip(&b[..n]).map(|(x, y)| x * y).sum::<f64>() + a[n] * b[n]
    }

    pub fn wnorm(&self, a: &[f64]) -> f64 {
        self.wdot(a, a).sqrt()
    }

    pub fn params_at(&self, s: f64) -> ParameterSet {
        let mut p = self.base;
        p.set(&self.param, s).expect("parameter name checked on construction");
        p
    }

    fn modes(&mut self) -> Result<&LaplaceModes> {
        if self.modes.is_none() {
            self.modes = Some(LaplaceModes::compute(self.ops)?);
        }
        Ok(self.modes.as_ref().unwrap())
    }

    fn g_param(&self, u: &[f64], s: f64) -> Result<Vec<f64>> {
        let h = 1e-6 * s.abs().max(1.0);
        let gp = self.model.residual(u, &self.params_at(s + h), self.ops)?;
        let gm = self.model.residual(u, &self.params_at(s - h), self.ops)?;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    }

    /// `[G_u G_s; w^T]` with `w` the weighted bordering row.
    fn bordered(&self, x: &[f64], row: &[f64]) -> Result<Vec<(usize, usize, f64)>> {
        let n = self.n_state();
        let (u, s) = (&x[..n], x[n]);
        let par = self.params_at(s);
        let jac = self.model.jacobian(u, &par, self.ops)?;
        let gs = self.g_param(u, s)?;
        let xi = self.xi();
        let mut trip: Vec<(usize, usize, f64)> = jac.triplets().collect();
        trip.extend(gs.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, &v)| (i, n, v)));
        trip.extend(row[..n].iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, &v)| (n, j, xi * v)));
        trip.push((n, n, row[n]));
        Ok(trip)
    }

    /// Newton on `G(u, s) = 0`, `⟨dir, x - anchor⟩_w = 0`.
    pub fn correct(&self, guess: &[f64], dir: &[f64], anchor: &[f64]) -> Result<(Vec<f64>, usize)> {
        let n = self.n_state();
        let mut x = guess.to_vec();
        for it in 0..=self.opts.max_corrector_iter {
            let par = self.params_at(x[n]);
            let g = self.model.residual(&x[..n], &par, self.ops)?;
            let d: Vec<f64> = x.iter().zip(anchor).map(|(a, b)| a - b).collect();
            let c = self.wdot(dir, &d);
            let res = norm_inf(&g);
            if !res.is_finite() {
                break;
            }
            if res <= self.opts.tol && c.abs() <= self.opts.tol {
                return Ok((x, it));
            }
            if it == self.opts.max_corrector_iter {
                break;
            }
            let lu = SparseLu::from_triplets(n + 1, self.bordered(&x, dir)?.into_iter())?;
            let mut rhs = g;
            rhs.push(c);
            let delta = lu.solve(&rhs)?;
            x.iter_mut().zip(&delta).for_each(|(a, b)| *a -= b);
            let mut u = x[..n].to_vec();
            if !self.model.admit(&mut u, &self.params_at(x[n])) {
                break;
            }
            x[..n].copy_from_slice(&u);
        }
        let res = self.model.residual(&x[..n], &self.params_at(x[n]), self.ops).map(|g| norm_inf(&g)).unwrap_or(f64::NAN);
        Err(Error::NonConvergence { iterations: self.opts.max_corrector_iter, residual: res })
    }

    /// Unit tangent at `x`, oriented along `prev`.
    pub fn tangent(&self, x: &[f64], prev: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_state();
        let lu = SparseLu::from_triplets(n + 1, self.bordered(x, prev)?.into_iter())?;
        let mut rhs = vec![0.0; n + 1];
        rhs[n] = 1.0;
        let mut t = lu.solve(&rhs)?;
        let nt = self.wnorm(&t);
        let sign = if self.wdot(&t, prev) < 0.0 { -1.0 } else { 1.0 };
        t.iter_mut().for_each(|v| *v *= sign / nt);
        Ok(t)
    }

    /// Branch point test functions: per-mode determinant signs for flat states, otherwise the sign
    /// of the bordered determinant.
    fn test_values(&mut self, x: &[f64], tangent: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_state();
        let k = self.model.components();
        let par = self.params_at(x[n]);
        if let Some(s) = flat_values(&x[..n], k) {
            let jac = self.model.local_jacobian(&s, &par)?;
            let diff = self.model.diffusion(&par);
            let modes = self.modes()?;
            let mut out = Vec::with_capacity(modes.len());
            for (j, &kappa) in modes.kappa.iter().enumerate() {
                let m = Mat::from_fn(k, k, |a, b| if a == b { kappa * diff[a] } else { 0.0 } - jac[a][b]);
                let sd = determinant_sign(m.as_ref());
                // The homogeneous mode is bordered by the tangent so that folds do not register.
                out.push(if j == 0 { sd * tangent[n].signum() } else { sd });
            }
            return Ok(out);
        }
        if n + 1 > DENSE_DET_LIMIT {
            return Ok(Vec::new());
        }
        let trip = self.bordered(x, tangent)?;
        let mut m = Mat::<f64>::zeros(n + 1, n + 1);
        for (r, c, v) in trip {
            m[(r, c)] += v;
        }
        Ok(vec![determinant_sign(m.as_ref())])
    }

    fn entry(&self, x: &[f64], tangent_param: f64, arclength: f64, kind: PointKind) -> Result<BranchEntry> {
        let n = self.n_state();
        let u = x[..n].to_vec();
        let par = self.params_at(x[n]);
        let nodes = self.ops.n_nodes();
        let mut averages = [f64::NAN; 4];
        for (c, a) in averages.iter_mut().enumerate().take(self.model.components()) {
            *a = self.ops.average(&u[c * nodes..(c + 1) * nodes])?;
        }
        let index = if self.opts.compute_index { Some(self.model.index(&u, &par, self.ops)?) } else { None };
        Ok(BranchEntry {
            kind,
            param: x[n],
            arclength,
            residual: norm_inf(&self.model.residual(&u, &par, self.ops)?),
            profit: self.model.profit(&u, &par, self.ops)?,
            averages,
            index,
            params: par,
            u,
            tangent_param,
        })
    }

    /// Solves with the constraint `⟨t, x - x0⟩_w = h` from the predictor `x0 + h t`.
    fn step_from(&self, x0: &[f64], t: &[f64], h: f64) -> Result<(Vec<f64>, usize)> {
        let pred = axpy(h, t, x0);
        self.correct(&pred, t, &pred)
    }

    /// Bisects `h ∈ (0, h1)` until the test changes within the parameter tolerance.
    fn localize(
        &mut self,
        x0: &[f64],
        t0: &[f64],
        h1: f64,
        test: &mut dyn FnMut(&mut Self, &[f64], &[f64]) -> Result<f64>,
        fold: bool,
    ) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let n = self.n_state();
        let s_lo = test(self, x0, t0)?;
        let (mut lo, mut hi) = (0.0, h1);
        let mut p_lo = x0[n];
        let mut p_hi = f64::NAN;
        let mut best = (x0.to_vec(), t0.to_vec(), 0.0);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            let (x, _) = self.step_from(x0, t0, mid)?;
            let t = self.tangent(&x, t0)?;
            let v = test(self, &x, &t)?;
            if v * s_lo > 0.0 {
                lo = mid;
                p_lo = x[n];
            } else {
                hi = mid;
                p_hi = x[n];
            }
            best = (x, t, mid);
            let narrow = if fold { hi - lo <= 1e-4 * h1 } else { (p_hi - p_lo).abs() <= self.opts.param_tol };
            if narrow {
                break;
            }
        }
        Ok(best)
    }

    /// Continues from a converged state `u0` at parameter value `s0`.
    ///
    /// `direction` fixes the sign of the initial parameter change; `initial` overrides it with a
    /// full `(u, s)` direction.
    pub fn run(&mut self, name: &str, u0: &[f64], s0: f64, direction: f64, initial: Option<&[f64]>) -> Result<Branch> {
        let n = self.n_state();
        if u0.len() != n {
            return Err(Error::InvalidArgument(format!("state has length {}, expected {n}", u0.len())));
        }
        let mut x: Vec<f64> = u0.iter().copied().chain([s0]).collect();
        let g0 = norm_inf(&self.model.residual(u0, &self.params_at(s0), self.ops)?);
        if g0 > self.opts.tol {
            let mut seed = vec![0.0; n + 1];
            seed[n] = 1.0;
            x = self.correct(&x, &seed, &x)?.0;
        }
        let seed = match initial {
            Some(d) => d.to_vec(),
            None => {
                let mut d = vec![0.0; n + 1];
                d[n] = direction.signum();
                d
            }
        };
        let mut t = self.tangent(&x, &seed)?;
        let mut branch = Branch {
            name: name.to_string(),
            param: self.param.clone(),
            model: self.model.kind(),
            points: vec![self.entry(&x, t[n], 0.0, PointKind::Regular)?],
            folds: Vec::new(),
            bifurcations: Vec::new(),
            provenance: None,
            stop: "step budget".into(),
        };
        let mut tests = if self.opts.detect_bifurcations { self.test_values(&x, &t)? } else { Vec::new() };
        let mut ds = self.opts.ds;
        let mut easy = 0;
        let mut arclength = 0.0;
        let mut x_prev: Option<Vec<f64>> = None;
        for _ in 0..self.opts.max_steps {
            let (x_new, iters, h) = loop {
                let pred_dir = match &x_prev {
                    Some(xp) => {
                        let sec: Vec<f64> = x.iter().zip(xp).map(|(a, b)| a - b).collect();
                        let ns = self.wnorm(&sec);
                        if ns > 0.0 && self.wdot(&sec, &t) > 0.0 {
                            sec.iter().map(|v| v / ns).collect()
                        } else {
                            t.clone()
                        }
                    }
                    None => t.clone(),
                };
                let pred = axpy(ds, &pred_dir, &x);
                let anchor = axpy(ds, &t, &x);
                match self.correct(&pred, &t, &anchor) {
                    Ok((xn, it)) => {
                        let tn = self.tangent(&xn, &t);
                        if let Ok(tn) = tn {
                            if self.wdot(&tn, &t) > 0.7 {
                                break (xn, it, ds);
                            }
                        }
                    }
                    Err(_) => {}
                }
                ds *= 0.5;
                easy = 0;
                if ds < self.opts.ds_min {
                    break (Vec::new(), 0, 0.0);
                }
            };
            if x_new.is_empty() {
                branch.stop = format!("step size underflow at {} = {}", self.param, x[n]);
                if branch.points.len() == 1 {
                    return Err(Error::StepUnderflow { param: x[n] });
                }
                return Ok(branch);
            }
            let t_new = self.tangent(&x_new, &t)?;
            let mut specials: Vec<(f64, BranchEntry, Option<Bifurcation>)> = Vec::new();
            if t_new[n].signum() != t[n].signum() && t[n] != 0.0 {
                let (xf, tf, hf) = self.localize(&x, &t, h, &mut |_, _, tt| Ok(tt[n]), true)?;
                specials.push((hf, self.entry(&xf, tf[n], arclength + hf, PointKind::Fold)?, None));
            }
            let mut new_tests = Vec::new();
            if self.opts.detect_bifurcations {
                new_tests = self.test_values(&x_new, &t_new)?;
                if new_tests.len() == tests.len() {
                    for j in 0..tests.len() {
                        if tests[j] * new_tests[j] >= 0.0 {
                            continue;
                        }
                        let flat = tests.len() > 1;
                        let (xb, tb, hb) = self.localize(
                            &x,
                            &t,
                            h,
                            &mut |me: &mut Self, xx: &[f64], tt: &[f64]| Ok(me.test_values(xx, tt)?.get(j).copied().unwrap_or(0.0)),
                            false,
                        )?;
                        let entry = self.entry(&xb, tb[n], arclength + hb, PointKind::BranchPoint)?;
                        let bif = Bifurcation { entry: 0, param: xb[n], mode: flat.then_some(j), tangent: tb };
                        specials.push((hb, entry, Some(bif)));
                    }
                }
            }
            specials.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (_, e, bif) in specials {
                let idx = branch.points.len();
                match bif {
                    Some(mut b) => {
                        b.entry = idx;
                        branch.bifurcations.push(b);
                    }
                    None => branch.folds.push(Fold { entry: idx, param: e.param }),
                }
                branch.points.push(e);
            }
            arclength += h;
            branch.points.push(self.entry(&x_new, t_new[n], arclength, PointKind::Regular)?);
            x_prev = Some(std::mem::replace(&mut x, x_new));
            t = t_new;
            if self.opts.detect_bifurcations {
                tests = new_tests;
            }
            if iters <= 3 {
                easy += 1;
                if easy >= 3 {
                    ds = (2.0 * ds).min(self.opts.ds_max);
                    easy = 0;
                }
            } else {
                easy = 0;
            }
            if x[n] < self.opts.bounds.0 || x[n] > self.opts.bounds.1 {
                branch.stop = format!("{} left [{}, {}]", self.param, self.opts.bounds.0, self.opts.bounds.1);
                return Ok(branch);
            }
            if let Some(k) = self.opts.stop_after_bifurcations {
                if branch.bifurcations.len() >= k {
                    branch.stop = format!("{k} bifurcations found");
                    return Ok(branch);
                }
            }
        }
        Ok(branch)
    }

    /// Kernel direction of the bordered Jacobian at a branch point, orthogonal to the trunk tangent.
    ///
    /// For a flat trunk the kernel is `e ⊗ φ` with `φ` the critical Laplacian mode (or the
    /// projection of `hint` onto the modes sharing its eigenvalue) and `e` the null vector of the
    /// local `κ D - J`. Otherwise it comes from inverse iteration on the bordered matrix.
    pub fn kernel(&mut self, x: &[f64], tangent: &[f64], mode: Option<usize>, hint: Option<&[f64]>) -> Result<Vec<f64>> {
        let n = self.n_state();
        let k = self.model.components();
        let nodes = self.ops.n_nodes();
        let par = self.params_at(x[n]);
        let mut z = match (mode, flat_values(&x[..n], k)) {
            (Some(j), Some(s)) => {
                let jac = self.model.local_jacobian(&s, &par)?;
                let diff = self.model.diffusion(&par);
                let modes = self.modes()?;
                let kappa = modes.kappa[j];
                let b = Mat::from_fn(k, k, |a, c| jac[a][c] - if a == c { kappa * diff[a] } else { 0.0 });
                let evd = b.eigen().map_err(|e| Error::Eigen(format!("{e:?}")))?;
                let sv = evd.S().column_vector();
                let c = (0..k).min_by(|&a, &b| sv[a].norm().total_cmp(&sv[b].norm())).unwrap();
                let e: Vec<f64> = (0..k).map(|a| evd.U()[(a, c)].re).collect();
                let phi: Vec<f64> = match hint {
                    Some(h) => {
                        let mut p = vec![0.0; nodes];
                        for (jj, &kk) in modes.kappa.iter().enumerate() {
                            if (kk - kappa).abs() > 0.05 * kappa.max(1e-12) {
                                continue;
                            }
                            let coef: f64 = (0..nodes).map(|i| modes.mass_phi[(i, jj)] * h[i]).sum();
                            for (i, pi) in p.iter_mut().enumerate() {
                                *pi += coef * modes.phi[(i, jj)];
                            }
                        }
                        p
                    }
                    None => (0..nodes).map(|i| modes.phi[(i, j)]).collect(),
                };
                let mut z = vec![0.0; n + 1];
                for a in 0..k {
                    for i in 0..nodes {
                        z[a * nodes + i] = e[a] * phi[i];
                    }
                }
                z
            }
            _ => {
                let lu = SparseLu::from_triplets(n + 1, self.bordered(x, tangent)?.into_iter())?;
                let mut z: Vec<f64> = (0..=n).map(|i| ((i as f64) * 1.618).sin()).collect();
                for _ in 0..30 {
                    z = lu.solve(&z)?;
                    let nz = self.wnorm(&z);
                    z.iter_mut().for_each(|v| *v /= nz);
                }
                z
            }
        };
        let c = self.wdot(&z, tangent);
        z.iter_mut().zip(tangent).for_each(|(a, b)| *a -= c * b);
        let nz = self.wnorm(&z);
        if !(nz > 0.0) {
            return Err(Error::SwitchFailed("kernel vector vanished".into()));
        }
        z.iter_mut().for_each(|v| *v /= nz);
        Ok(z)
    }

    /// Seeds the bifurcating branch: `x* + ε k`, corrected on the hyperplane through it orthogonal to `k`.
    pub fn switch(&mut self, x: &[f64], kernel: &[f64], eps: f64) -> Result<Vec<f64>> {
        let n = self.n_state();
        let pred = axpy(eps, kernel, x);
        let (xs, _) = self.correct(&pred, kernel, &pred).map_err(|e| Error::SwitchFailed(format!("corrector failed: {e}")))?;
        let dist = self.wnorm(&xs.iter().zip(x).map(|(a, b)| a - b).collect::<Vec<_>>());
        if dist > 3.0 * eps.abs() {
            return Err(Error::SwitchFailed(format!("seed moved {dist:e} from the branch point")));
        }
        let k = self.model.components();
        if flat_values(&x[..n], k).is_some() && flat_values(&xs[..n], k).is_some() {
            return Err(Error::SwitchFailed("seed fell back onto the flat trunk".into()));
        }
        Ok(xs)
    }
}

/// Continues a branch from a converged state.
pub fn continue_branch<M: SteadyModel>(
    model: &M,
    ops: &Operators,
    start_u: &[f64],
    start_params: &ParameterSet,
    param: &str,
    direction: f64,
    name: &str,
    opts: &ContinuationOptions,
) -> Result<Branch> {
    let s0 = start_params.get(param).ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{param}`")))?;
    let mut c = Continuer::new(model, ops, *start_params, param, opts.clone())?;
    c.run(name, start_u, s0, direction, None)
}

/// Switches at a detected bifurcation of `trunk` and continues the new branch in one direction.
///
/// `eps` is the perturbation amplitude in the weighted arclength norm; its sign selects the side.
pub fn branch_switch<M: SteadyModel>(
    model: &M,
    ops: &Operators,
    trunk: &Branch,
    bifurcation: usize,
    eps: f64,
    hint: Option<&[f64]>,
    name: &str,
    opts: &ContinuationOptions,
) -> Result<Branch> {
    let bif = trunk
        .bifurcations
        .get(bifurcation)
        .ok_or_else(|| Error::InvalidArgument(format!("branch `{}` has no bifurcation {bifurcation}", trunk.name)))?;
    let e = &trunk.points[bif.entry];
    let mut c = Continuer::new(model, ops, e.params, &trunk.param, opts.clone())?;
    let x: Vec<f64> = e.u.iter().copied().chain([e.param]).collect();
    let kernel = c.kernel(&x, &bif.tangent, bif.mode, hint)?;
    let xs = c.switch(&x, &kernel, eps)?;
    let n = x.len() - 1;
    let dir: Vec<f64> = xs.iter().zip(&x).map(|(a, b)| a - b).collect();
    let mut branch = c.run(name, &xs[..n], xs[n], 1.0, Some(&dir))?;
    branch.provenance = Some(Provenance { branch: trunk.name.clone(), bifurcation, param: bif.param });
    Ok(branch)
}

impl Branch {
    pub fn regular(&self) -> impl Iterator<Item = &BranchEntry> {
        self.points.iter().filter(|p| p.kind == PointKind::Regular)
    }

    /// Linear interpolations of the states at every crossing of `value`.
    pub fn guesses_at(&self, value: f64) -> Vec<(usize, Vec<f64>)> {
        let mut out = Vec::new();
        for (k, w) in self.points.windows(2).enumerate() {
            let (a, b) = (w[0].param, w[1].param);
            if (a - value) * (b - value) <= 0.0 && a != b {
                let t = (value - a) / (b - a);
                let u = w[0].u.iter().zip(&w[1].u).map(|(x, y)| x + t * (y - x)).collect();
                out.push((k, u));
            }
        }
        out.dedup_by(|x, y| x.0 == y.0 + 1);
        out
    }

    /// CSV with one row per point.
    pub fn to_csv(&self) -> String {
        let profit = if self.model == ModelKind::Canonical { "J_ca" } else { "pi" };
        let mut s = format!("param,arclength,avg_v,avg_w,avg_lambda,avg_mu,{profit},defect,fold,bp\n");
        for p in &self.points {
            s.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{}\n",
                p.param,
                p.arclength,
                p.averages[0],
                p.averages[1],
                p.averages[2],
                p.averages[3],
                p.profit,
                p.index.map(|d| d.to_string()).unwrap_or_default(),
                u8::from(p.kind == PointKind::Fold),
                u8::from(p.kind == PointKind::BranchPoint),
            ));
        }
        s
    }
}

/// Solves for the steady states of a branch at a given parameter value, one per crossing.
pub fn states_at<M: SteadyModel>(
    model: &M,
    ops: &Operators,
    branch: &Branch,
    value: f64,
    tol: f64,
) -> Result<Vec<BranchEntry>> {
    let first = branch.points.first().ok_or_else(|| Error::InvalidArgument("empty branch".into()))?;
    let opts = ContinuationOptions { tol, compute_index: true, ..Default::default() };
    let c = Continuer::new(model, ops, first.params, &branch.param, opts)?;
    let n = c.n_state();
    let mut fix = vec![0.0; n + 1];
    fix[n] = 1.0;
    branch
        .guesses_at(value)
        .into_iter()
        .map(|(_, u)| {
            let x: Vec<f64> = u.into_iter().chain([value]).collect();
            let (xs, _) = c.correct(&x, &fix, &x)?;
            let mut t = fix.clone();
            if let Ok(tt) = c.tangent(&xs, &fix) {
                t = tt;
            }
            c.entry(&xs, t[n], f64::NAN, PointKind::Regular)
        })
        .collect()
}

/// Diagnostics row of [`branch_diagnostics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub branch: String,
    pub param: f64,
    pub averages: [f64; 4],
    pub profit: f64,
    pub defect: Option<usize>,
    /// No other loaded branch has a larger profit at this parameter value.
    pub maximal: bool,
}

fn interpolated_profits(b: &Branch, value: f64) -> Vec<f64> {
    b.points
        .windows(2)
        .filter(|w| (w[0].param - value) * (w[1].param - value) <= 0.0 && w[0].param != w[1].param)
        .map(|w| {
            let t = (value - w[0].param) / (w[1].param - w[0].param);
            w[0].profit + t * (w[1].profit - w[0].profit)
        })
        .collect()
}

pub fn branch_diagnostics(branches: &[&Branch]) -> Vec<DiagnosticsRow> {
    let mut rows = Vec::new();
    for (bi, b) in branches.iter().enumerate() {
        for p in &b.points {
            let maximal = branches
                .iter()
                .enumerate()
                .filter(|(oi, _)| *oi != bi)
                .flat_map(|(_, o)| interpolated_profits(o, p.param))
                .all(|q| q <= p.profit);
            rows.push(DiagnosticsRow {
                branch: b.name.clone(),
                param: p.param,
                averages: p.averages,
                profit: p.profit,
                defect: p.index,
                maximal,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::newton::NewtonOptions;
    use crate::steady::solve_flat_css;
    use crate::Mesh;

    fn ops() -> Operators {
        Operators::assemble(&Mesh::interval(5.0, 50).unwrap()).unwrap()
    }

    #[test]
    fn tangent_is_unit_and_flat_branch_stays_flat() {
        let o = ops();
        let par = ParameterSet::default().with_rain(28.0);
        let css = solve_flat_css(&par, [400.0, 10.0, 0.5, 1.0], &o, &NewtonOptions::default()).unwrap();
        let opts = ContinuationOptions { max_steps: 4, detect_bifurcations: false, compute_index: false, ..Default::default() };
        let b = continue_branch(&Canonical, &o, &css.u, &par, "R", -1.0, "fcss", &opts).unwrap();
        assert_eq!(b.points.len(), 5);
        assert!(b.points.windows(2).all(|w| w[1].param < w[0].param));
        for p in &b.points {
            assert!(flat_values(&p.u, 4).is_some());
            assert!(p.residual <= 1e-8);
        }
    }

    #[test]
    fn first_branch_point_on_the_flat_branch() {
        let o = ops();
        let par = ParameterSet::default().with_rain(24.0);
        let css = solve_flat_css(&par, [300.0, 9.4, 0.6, 1.0], &o, &NewtonOptions::default()).unwrap();
        let opts = ContinuationOptions { max_steps: 30, compute_index: false, stop_after_bifurcations: Some(1), ..Default::default() };
        let b = continue_branch(&Canonical, &o, &css.u, &par, "R", -1.0, "fcss", &opts).unwrap();
        let bp = &b.bifurcations[0];
        assert!(bp.param > 21.0 && bp.param < 22.0, "{}", bp.param);
        assert_eq!(bp.mode, Some(3));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let o = ops();
        let par = ParameterSet::default().with_rain(28.0);
        let css = solve_flat_css(&par, [400.0, 10.0, 0.5, 1.0], &o, &NewtonOptions::default()).unwrap();
        let opts = ContinuationOptions { max_steps: 2, detect_bifurcations: false, ..Default::default() };
        let b = continue_branch(&Canonical, &o, &css.u, &par, "R", 1.0, "fcss", &opts).unwrap();
        let csv = b.to_csv();
        assert!(csv.starts_with("param,arclength,avg_v,avg_w,avg_lambda,avg_mu,J_ca,defect,fold,bp"));
        assert_eq!(csv.lines().count(), 4);
    }
}
