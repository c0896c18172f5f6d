//! Canonical steady states (CSS) and steady states of the private model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm_inf;
use crate::model::{self, components, COMPONENTS};
use crate::newton::{newton, NewtonOptions, NewtonReport, NonlinearSystem};
use crate::objective::state_profit;
use crate::spectral::{self, flat_values, Method};
use crate::{Operators, ParameterSet, SparseMatrix};

/// The steady canonical system `G(u) = 0` on a mesh.
pub struct CanonicalSystem<'a> {
    pub par: &'a ParameterSet,
    pub ops: &'a Operators,
}

/// Clips slightly negative vegetation and rejects shadow prices at or above the price.
pub(crate) fn admit_canonical(u: &mut [f64], p: f64) -> bool {
    let n = u.len() / COMPONENTS;
    u[..n].iter_mut().for_each(|v| *v = v.max(0.0));
    u[2 * n..3 * n].iter().all(|&l| l < p)
}

impl NonlinearSystem for CanonicalSystem<'_> {
    fn dim(&self) -> usize {
        COMPONENTS * self.ops.n_nodes()
    }
    fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        model::residual(x, self.par, self.ops)
    }
    fn jacobian(&self, x: &[f64]) -> Result<SparseMatrix> {
        model::jacobian(x, self.par, self.ops)
    }
    fn admit(&self, x: &mut [f64]) -> bool {
        admit_canonical(x, self.par.p)
    }
}

/// Flat canonical system: four algebraic equations `f(s) = 0`.
struct FlatCanonical<'a>(&'a ParameterSet);

impl NonlinearSystem for FlatCanonical<'_> {
    fn dim(&self) -> usize {
        4
    }
    fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(model::flat_kinetics([x[0], x[1], x[2], x[3]], self.0)?.f.to_vec())
    }
    fn jacobian(&self, x: &[f64]) -> Result<SparseMatrix> {
        let j = model::flat_kinetics([x[0], x[1], x[2], x[3]], self.0)?.jac;
        let trip: Vec<_> = (0..4).flat_map(|a| (0..4).map(move |b| (a, b, j[a][b]))).collect();
        Ok(SparseMatrix::from_triplets(4, 4, &trip))
    }
    fn admit(&self, x: &mut [f64]) -> bool {
        admit_canonical(x, self.0.p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CssDiagnostics {
    pub avg_v: f64,
    pub avg_w: f64,
    pub avg_lambda: f64,
    pub avg_mu: f64,
    /// Spatially averaged current value profit `J_{c,a}`.
    pub profit: f64,
    /// `None` when the spectrum was not computed.
    pub defect: Option<usize>,
    /// `‖G(u)‖∞`
    pub residual: f64,
}

/// A converged canonical steady state with its parameters and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CssPoint {
    pub u: Vec<f64>,
    pub params: ParameterSet,
    pub diagnostics: CssDiagnostics,
}

impl CssPoint {
    /// Evaluates diagnostics of `u`; the defect is computed when `with_defect` is set.
    pub fn new(u: Vec<f64>, params: ParameterSet, ops: &Operators, with_defect: bool) -> Result<Self> {
        let residual = norm_inf(&model::residual(&u, &params, ops)?);
        let [v, w, l, m] = components(&u);
        let defect = if with_defect { Some(spectral::defect(&u, &params, ops)?) } else { None };
        let diagnostics = CssDiagnostics {
            avg_v: ops.average(v)?,
            avg_w: ops.average(w)?,
            avg_lambda: ops.average(l)?,
            avg_mu: ops.average(m)?,
            profit: state_profit(&u, &params, ops)?,
            defect,
            residual,
        };
        Ok(Self { u, params, diagnostics })
    }

    pub fn n_nodes(&self) -> usize {
        self.u.len() / COMPONENTS
    }

    pub fn components(&self) -> [&[f64]; 4] {
        components(&self.u)
    }

    /// Values of a spatially constant state.
    pub fn flat(&self) -> Option<[f64; 4]> {
        flat_values(&self.u, COMPONENTS).map(|s| [s[0], s[1], s[2], s[3]])
    }

    /// Closed-loop effort `E(v, λ)` at every node.
    pub fn effort(&self) -> Result<Vec<f64>> {
        let [v, _, l, _] = self.components();
        model::control_law(v, l, &self.params)
    }

    pub fn ensure_defect(&mut self, ops: &Operators) -> Result<usize> {
        if let Some(d) = self.diagnostics.defect {
            return Ok(d);
        }
        let d = spectral::defect(&self.u, &self.params, ops)?;
        self.diagnostics.defect = Some(d);
        Ok(d)
    }

    /// Checks the stored residual and the defect range.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if !(self.diagnostics.residual <= tol) {
            return Err(Error::NonConvergence { iterations: 0, residual: self.diagnostics.residual });
        }
        if let Some(d) = self.diagnostics.defect {
            if d > 2 * self.n_nodes() {
                return Err(Error::InvalidArgument(format!("defect {d} exceeds 2n")));
            }
        }
        Ok(())
    }
}

/// `J_{c,a}` of a flat state from the closed form `(p κ^(1-α) - c κ) v`.
pub fn flat_profit(s: [f64; 4], par: &ParameterSet) -> Result<f64> {
    if s[0] == 0.0 {
        return Ok(0.0);
    }
    let kappa = model::effort_per_biomass(s[2], par)
        .ok_or(Error::ControlUndefined { node: 0, lambda: s[2], price: par.p })?;
    Ok((par.p * kappa.powf(1.0 - par.alpha) - par.c * kappa) * s[0])
}

pub fn embed_flat(s: &[f64], n: usize) -> Vec<f64> {
    s.iter().flat_map(|&x| std::iter::repeat(x).take(n)).collect()
}

/// Solves the 4-equation flat system, then embeds and polishes the state on the mesh.
pub fn solve_flat_css(par: &ParameterSet, guess: [f64; 4], ops: &Operators, opts: &NewtonOptions) -> Result<CssPoint> {
    par.validate()?;
    let flat = newton(&FlatCanonical(par), &guess, &NewtonOptions { tol: opts.tol * 1e-3, ..*opts })?;
    let u = embed_flat(&flat.solution, ops.n_nodes());
    let polished = newton(&CanonicalSystem { par, ops }, &u, opts)?;
    CssPoint::new(polished.solution, *par, ops, true)
}

/// Flat state of the default parameters at `R = 28` used to start [`flat_homotopy`].
pub const FLAT_CSS_SEED: [f64; 4] = [376.0, 9.25, 0.58, 1.09];
/// Flat private state at `R = 60` used to start [`flat_homotopy`].
pub const FLAT_PRIVATE_SEED: [f64; 2] = [80.0, 30.0];

/// Blends every coefficient linearly from `a` (at `t = 0`) to `b`.
pub fn blend_params(a: &ParameterSet, b: &ParameterSet, t: f64) -> ParameterSet {
    let mut out = *a;
    for key in model::PARAM_KEYS {
        let (x, y) = (a.get(key).unwrap(), b.get(key).unwrap());
        out.set(key, x + t * (y - x)).unwrap();
    }
    out
}

/// Natural parameter homotopy of a flat system from `seed` at `from` to the parameters `to`.
///
/// Returns the flat values at `to`. Steps halve on failure down to `1e-6`.
pub fn flat_homotopy(private: bool, from: &ParameterSet, seed: &[f64], to: &ParameterSet, opts: &NewtonOptions) -> Result<Vec<f64>> {
    to.validate()?;
    let solve = |par: &ParameterSet, guess: &[f64]| -> Result<Vec<f64>> {
        let o = NewtonOptions { tol: opts.tol * 1e-3, ..*opts };
        if private {
            Ok(newton(&FlatPrivate(par), guess, &o)?.solution)
        } else {
            Ok(newton(&FlatCanonical(par), guess, &o)?.solution)
        }
    };
    let mut x = solve(from, seed)?;
    let (mut t, mut dt) = (0.0f64, 0.1f64);
    while t < 1.0 {
        let t_try = (t + dt).min(1.0);
        match solve(&blend_params(from, to, t_try), &x) {
            Ok(y) => {
                x = y;
                t = t_try;
                dt = (dt * 1.5).min(0.25);
            }
            Err(_) => {
                dt *= 0.5;
                if dt < 1e-6 {
                    return Err(Error::NonConvergence { iterations: 0, residual: f64::NAN });
                }
            }
        }
    }
    Ok(x)
}

/// Flat CSS at `par` reached by homotopy from [`FLAT_CSS_SEED`].
pub fn flat_css_from_seed(par: &ParameterSet, ops: &Operators, opts: &NewtonOptions) -> Result<CssPoint> {
    let s = flat_homotopy(false, &ParameterSet::default().with_rain(28.0), &FLAT_CSS_SEED, par, opts)?;
    solve_flat_css(par, [s[0], s[1], s[2], s[3]], ops, opts)
}

/// Flat private steady state at `par` reached by homotopy from [`FLAT_PRIVATE_SEED`].
pub fn flat_private_from_seed(par: &ParameterSet, ops: &Operators, opts: &NewtonOptions) -> Result<PrivateSteadyState> {
    let s = flat_homotopy(true, &ParameterSet::default().with_rain(60.0), &FLAT_PRIVATE_SEED, par, opts)?;
    solve_flat_private(par, [s[0], s[1]], ops, opts)
}

/// Newton solve of `G(u) = 0` from an arbitrary admissible guess.
pub fn solve_css(par: &ParameterSet, u0: &[f64], ops: &Operators, opts: &NewtonOptions) -> Result<CssPoint> {
    Ok(solve_css_report(par, u0, ops, opts)?.0)
}

/// As [`solve_css`], also returning the Newton history.
pub fn solve_css_report(
    par: &ParameterSet,
    u0: &[f64],
    ops: &Operators,
    opts: &NewtonOptions,
) -> Result<(CssPoint, NewtonReport)> {
    par.validate()?;
    let mut start = u0.to_vec();
    if start.len() != COMPONENTS * ops.n_nodes() {
        return Err(Error::InvalidArgument(format!("guess has length {}, expected {}", start.len(), 4 * ops.n_nodes())));
    }
    if !admit_canonical(&mut start, par.p) {
        return Err(Error::InvalidArgument("initial guess has λ ≥ p".into()));
    }
    let rep = newton(&CanonicalSystem { par, ops }, &start, opts)?;
    let point = CssPoint::new(rep.solution.clone(), *par, ops, true)?;
    Ok((point, rep))
}

/// The steady private system on a mesh.
pub struct PrivateSystem<'a> {
    pub par: &'a ParameterSet,
    pub ops: &'a Operators,
}

impl NonlinearSystem for PrivateSystem<'_> {
    fn dim(&self) -> usize {
        2 * self.ops.n_nodes()
    }
    fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        model::private_residual(x, self.par, self.ops)
    }
    fn jacobian(&self, x: &[f64]) -> Result<SparseMatrix> {
        model::private_jacobian(x, self.par, self.ops)
    }
    fn admit(&self, x: &mut [f64]) -> bool {
        x.iter_mut().for_each(|v| *v = v.max(0.0));
        true
    }
}

struct FlatPrivate<'a>(&'a ParameterSet);

impl NonlinearSystem for FlatPrivate<'_> {
    fn dim(&self) -> usize {
        2
    }
    fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (f, _) = model::private_node_kinetics(x[0], x[1], self.0, self.0.private_harvest_coefficient(), 0)?;
        Ok(f.to_vec())
    }
    fn jacobian(&self, x: &[f64]) -> Result<SparseMatrix> {
        let (_, j) = model::private_node_kinetics(x[0], x[1], self.0, self.0.private_harvest_coefficient(), 0)?;
        Ok(SparseMatrix::from_triplets(2, 2, &[(0, 0, j[0][0]), (0, 1, j[0][1]), (1, 0, j[1][0]), (1, 1, j[1][1])]))
    }
    fn admit(&self, x: &mut [f64]) -> bool {
        x.iter_mut().for_each(|v| *v = v.max(0.0));
        true
    }
}

/// Steady state of the private model with its linear stability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivateSteadyState {
    pub vw: Vec<f64>,
    pub params: ParameterSet,
    pub avg_v: f64,
    pub avg_w: f64,
    /// Average private profit `⟨π⟩`.
    pub profit: f64,
    /// Largest real part of the spectrum of the linearization.
    pub max_real: f64,
    pub stable: bool,
    pub residual: f64,
}

impl PrivateSteadyState {
    pub fn new(vw: Vec<f64>, params: ParameterSet, ops: &Operators) -> Result<Self> {
        let n = ops.n_nodes();
        let residual = norm_inf(&model::private_residual(&vw, &params, ops)?);
        let spec = spectral::private_spectrum(&vw, &params, ops, Method::Auto)?;
        let max_real = spec.max_real();
        Ok(Self {
            avg_v: ops.average(&vw[..n])?,
            avg_w: ops.average(&vw[n..])?,
            profit: ops.average(&model::private_profit(&vw[..n], &params))?,
            stable: max_real < -spectral::EPS_SPEC,
            max_real,
            residual,
            vw,
            params,
        })
    }
}

pub fn solve_flat_private(
    par: &ParameterSet,
    guess: [f64; 2],
    ops: &Operators,
    opts: &NewtonOptions,
) -> Result<PrivateSteadyState> {
    par.validate()?;
    let flat = newton(&FlatPrivate(par), &guess, &NewtonOptions { tol: opts.tol * 1e-3, ..*opts })?;
    let vw = embed_flat(&flat.solution, ops.n_nodes());
    let polished = newton(&PrivateSystem { par, ops }, &vw, opts)?;
    PrivateSteadyState::new(polished.solution, *par, ops)
}

pub fn solve_private(par: &ParameterSet, vw0: &[f64], ops: &Operators, opts: &NewtonOptions) -> Result<PrivateSteadyState> {
    par.validate()?;
    let rep = newton(&PrivateSystem { par, ops }, vw0, opts)?;
    PrivateSteadyState::new(rep.solution, *par, ops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Mesh;

    fn ops() -> Operators {
        Operators::assemble(&Mesh::interval(5.0, 50).unwrap()).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn flat_css_at_r28() {
        let par = ParameterSet::default().with_rain(28.0);
        let c = solve_flat_css(&par, [400.0, 10.0, 0.5, 1.0], &ops(), &NewtonOptions::default()).unwrap();
        let d = &c.diagnostics;
        assert!(rel(d.avg_v, 376.32) < 1e-4 && rel(d.avg_w, 9.25) < 1e-3 && rel(d.profit, 25.85) < 1e-3, "{d:?}");
        assert!(rel(d.avg_mu, 1.09) < 1e-2);
        assert_eq!(d.defect, Some(0));
        assert!(d.residual <= 1e-8);
    }

    #[test]
    fn flat_css_at_r10_and_r60() {
        let o = ops();
        let c = solve_flat_css(&ParameterSet::default().with_rain(10.0), [75.0, 11.0, 0.7, 0.5], &o, &NewtonOptions::default()).unwrap();
        assert!(rel(c.diagnostics.avg_v, 75.08) < 1e-3 && rel(c.diagnostics.avg_w, 11.46) < 1e-3);
        assert!(rel(c.diagnostics.profit, 3.51) < 2e-3);
        let c = solve_flat_css(&ParameterSet::default().with_rain(60.0), [1300.0, 10.0, 0.49, 1.75], &o, &NewtonOptions::default()).unwrap();
        assert!(rel(c.diagnostics.avg_v, 1304.5) < 1e-3 && rel(c.diagnostics.profit, 120.8) < 2e-3);
        assert_eq!(c.diagnostics.defect, Some(0));
    }

    #[test]
    fn paper_initial_guess_at_r34_converges() {
        let par = ParameterSet::default();
        let c = solve_flat_css(&par, [400.0, 10.0, 0.5, 1.0], &ops(), &NewtonOptions::default()).unwrap();
        assert!(c.diagnostics.avg_v > 376.0 && c.diagnostics.residual <= 1e-8);
    }

    #[test]
    fn converged_state_is_a_fixed_point() {
        let o = ops();
        let par = ParameterSet::default().with_rain(26.0);
        let c = solve_flat_css(&par, [335.0, 9.3, 0.59, 1.04], &o, &NewtonOptions::default()).unwrap();
        let (again, rep) = solve_css_report(&par, &c.u, &o, &NewtonOptions::default()).unwrap();
        assert!(rep.iterations <= 1);
        assert!(norm_inf(&again.u.iter().zip(&c.u).map(|(a, b)| a - b).collect::<Vec<_>>()) < 1e-8);
    }

    #[test]
    fn quadratic_tail() {
        let par = ParameterSet::default().with_rain(20.0);
        let rep = newton(&FlatCanonical(&par), &[260.0, 9.0, 0.6, 0.8], &NewtonOptions { tol: 1e-12, ..Default::default() }).unwrap();
        let d = &rep.increments;
        assert!(d.len() >= 3);
        let k = d.len() - 2;
        if d[k] > 1e-12 {
            let c = d[k] / (d[k - 1] * d[k - 1]);
            assert!(c < 10.0, "{d:?}");
        }
        assert!(d[k] < d[k - 1] && d[k - 1] < d[k - 2].max(1e-3));
    }

    #[test]
    fn flat_solution_is_mesh_independent_and_profit_agrees() {
        let par = ParameterSet::default().with_rain(28.0);
        let c = solve_flat_css(&par, [400.0, 10.0, 0.5, 1.0], &ops(), &NewtonOptions::default()).unwrap();
        let s = c.flat().unwrap();
        for mesh in [Mesh::interval(5.0, 17).unwrap(), Mesh::rectangle(5.0, 6, 4).unwrap()] {
            let o = Operators::assemble(&mesh).unwrap();
            let u = embed_flat(&s, o.n_nodes());
            assert!(norm_inf(&model::residual(&u, &par, &o).unwrap()) <= 1e-8);
            let q = state_profit(&u, &par, &o).unwrap();
            assert!((q - flat_profit(s, &par).unwrap()).abs() <= 1e-10 * q.abs().max(1.0));
        }
    }

    #[test]
    fn seeded_homotopy_matches_direct_solve() {
        let o = ops();
        let par = ParameterSet::default().with_rain(60.0);
        let a = flat_css_from_seed(&par, &o, &NewtonOptions::default()).unwrap();
        let b = solve_flat_css(&par, [1300.0, 10.0, 0.49, 1.75], &o, &NewtonOptions::default()).unwrap();
        assert!(rel(a.diagnostics.avg_v, b.diagnostics.avg_v) < 1e-10);
        let par = ParameterSet::default().with_rain(130.0);
        let s = flat_private_from_seed(&par, &o, &NewtonOptions::default()).unwrap();
        assert!(s.stable);
    }

    #[test]
    fn trivial_private_state() {
        let par = ParameterSet::default().with_rain(60.0);
        let o = ops();
        let vw = embed_flat(&[0.0, 60.0 * par.beta / par.r_w], o.n_nodes());
        assert!(norm_inf(&model::private_residual(&vw, &par, &o).unwrap()) < 1e-10);
    }

    #[test]
    fn private_flat_states() {
        let o = ops();
        let par = ParameterSet::default().with_rain(60.0);
        let s = solve_flat_private(&par, [80.0, 30.0], &o, &NewtonOptions::default()).unwrap();
        assert!(rel(s.avg_v, 79.73) < 2e-2, "{}", s.avg_v);
        assert!(!s.stable);
        let par = ParameterSet::default().with_rain(130.0);
        let s = solve_flat_private(&par, [170.0, 40.0], &o, &NewtonOptions::default()).unwrap();
        assert!(s.stable, "{}", s.max_real);
    }
}
