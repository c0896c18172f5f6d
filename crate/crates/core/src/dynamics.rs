//! Forward time integration of the privately optimized system.
//!
//! IMEX Euler: diffusion implicit, kinetics explicit,
//! `(M - dt d_c K) u' = M (u + dt f(u))` per component, with `K` the weak Laplacian.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::continuation::{continue_branch, Branch, ContinuationOptions, Private};
use crate::error::{Error, Result};
use crate::linalg::SparseLu;
use crate::model::{private_node_kinetics, private_profit};
use crate::{Operators, ParameterSet};

#[derive(Debug, Clone)]
pub struct StepOptions {
    pub dt_max: f64,
    pub dt_min: f64,
    /// `dt ≤ cfl / max |∂f_i/∂u_i|`
    pub cfl: f64,
    /// `‖vw‖∞` above this is reported as blow-up.
    pub bound: f64,
    /// Keep every `record_every`-th state.
    pub record_every: usize,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self { dt_max: 1.0, dt_min: 1e-6, cfl: 0.5, bound: 1e8, record_every: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Nodal `(v, w)` per recorded time.
    pub states: Vec<Vec<f64>>,
    /// `⟨π⟩(t)`
    pub avg_profit: Vec<f64>,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    /// CSV `t,avg_v,avg_w,avg_profit`.
    pub fn to_csv(&self, ops: &Operators) -> Result<String> {
        let n = ops.n_nodes();
        let mut s = String::from("t,avg_v,avg_w,avg_profit\n");
        for ((t, vw), p) in self.times.iter().zip(&self.states).zip(&self.avg_profit) {
            s.push_str(&format!(
                "{t:.17e},{:.17e},{:.17e},{p:.17e}\n",
                ops.average(&vw[..n])?,
                ops.average(&vw[n..])?
            ));
        }
        Ok(s)
    }
}

fn kinetics(vw: &[f64], par: &ParameterSet, n: usize) -> Result<(Vec<f64>, f64)> {
    let a = par.private_harvest_coefficient();
    let mut f = vec![0.0; 2 * n];
    let mut stiff: f64 = 0.0;
    for i in 0..n {
        let (fi, j) = private_node_kinetics(vw[i], vw[n + i], par, a, i)?;
        f[i] = fi[0];
        f[n + i] = fi[1];
        stiff = stiff.max(j[0][0].abs()).max(j[1][1].abs());
    }
    Ok((f, stiff))
}

fn implicit_operator(ops: &Operators, dt: f64, diff: f64) -> Result<SparseLu> {
    let trip = ops.mass.triplets().chain(ops.stiffness.triplets().map(|(r, c, v)| (r, c, -dt * diff * v)));
    SparseLu::from_triplets(ops.n_nodes(), trip)
}

fn check_state(vw: &[f64], ops: &Operators, bound: f64, t: f64) -> Result<usize> {
    let n = ops.n_nodes();
    if vw.len() != 2 * n {
        return Err(Error::InvalidArgument(format!("state has length {}, expected {}", vw.len(), 2 * n)));
    }
    if vw.iter().any(|x| !x.is_finite() || x.abs() > bound) {
        return Err(Error::BlowUp { t });
    }
    Ok(n)
}

/// The consistent mass matrix does not preserve positivity exactly; negative values are cut to 0.
fn clip(vw: &mut [f64]) {
    vw.iter_mut().for_each(|x| *x = x.max(0.0));
}

fn advance(vw: &[f64], f: &[f64], dt: f64, solvers: [&SparseLu; 2], ops: &Operators) -> Result<Vec<f64>> {
    let n = ops.n_nodes();
    let mut out = Vec::with_capacity(2 * n);
    for c in 0..2 {
        let r = c * n..(c + 1) * n;
        let rhs_pre: Vec<f64> = vw[r.clone()].iter().zip(&f[r]).map(|(u, fu)| u + dt * fu).collect();
        out.extend(solvers[c].solve(&ops.mass.mul_vec(&rhs_pre))?);
    }
    Ok(out)
}

/// One IMEX Euler step of size `dt` with the default blow-up bound.
pub fn step_private(vw: &[f64], dt: f64, par: &ParameterSet, ops: &Operators) -> Result<Vec<f64>> {
    step_private_with(vw, dt, par, ops, StepOptions::default().bound)
}

pub fn step_private_with(vw: &[f64], dt: f64, par: &ParameterSet, ops: &Operators, bound: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step {dt} must be positive")));
    }
    let n = check_state(vw, ops, bound, 0.0)?;
    let (f, _) = kinetics(vw, par, n)?;
    let s = [implicit_operator(ops, dt, par.d1)?, implicit_operator(ops, dt, par.d2)?];
    let mut out = advance(vw, &f, dt, [&s[0], &s[1]], ops)?;
    clip(&mut out);
    check_state(&out, ops, bound, dt)?;
    Ok(out)
}

/// Integrates to `t_end`. The step is `dt_max / 2^k`, the largest such value below the
/// kinetic stiffness limit, so factorizations are reused across steps.
pub fn integrate_private(vw0: &[f64], t_end: f64, par: &ParameterSet, ops: &Operators, opts: &StepOptions) -> Result<Trajectory> {
    par.validate()?;
    if !(t_end >= 0.0) || !(opts.dt_max > 0.0) || !(opts.dt_min > 0.0) || opts.record_every == 0 {
        return Err(Error::InvalidArgument("t_end, dt_max, dt_min must be positive and record_every nonzero".into()));
    }
    let n = check_state(vw0, ops, opts.bound, 0.0)?;
    let mut cache: HashMap<u32, [SparseLu; 2]> = HashMap::new();
    let avg_pi = |vw: &[f64]| ops.average(&private_profit(&vw[..n], par));
    let mut vw = vw0.to_vec();
    let mut t = 0.0;
    let mut traj = Trajectory { times: vec![0.0], states: vec![vw.clone()], avg_profit: vec![avg_pi(&vw)?] };
    let mut count = 0usize;
    while t < t_end {
        let (f, stiff) = kinetics(&vw, par, n)?;
        let limit = if stiff > 0.0 { opts.cfl / stiff } else { f64::INFINITY };
        let mut k = 0u32;
        while opts.dt_max / 2f64.powi(k as i32) > limit {
            k += 1;
        }
        let mut dt = opts.dt_max / 2f64.powi(k as i32);
        if dt < opts.dt_min {
            return Err(Error::BlowUp { t });
        }
        let last = t + dt >= t_end;
        if last {
            dt = t_end - t;
        }
        let next = if last {
            let s = [implicit_operator(ops, dt, par.d1)?, implicit_operator(ops, dt, par.d2)?];
            advance(&vw, &f, dt, [&s[0], &s[1]], ops)?
        } else {
            if !cache.contains_key(&k) {
                cache.insert(k, [implicit_operator(ops, dt, par.d1)?, implicit_operator(ops, dt, par.d2)?]);
            }
            let s = &cache[&k];
            advance(&vw, &f, dt, [&s[0], &s[1]], ops)?
        };
        t = if last { t_end } else { t + dt };
        vw = next;
        clip(&mut vw);
        check_state(&vw, ops, opts.bound, t)?;
        count += 1;
        if count % opts.record_every == 0 || last {
            traj.times.push(t);
            traj.avg_profit.push(avg_pi(&vw)?);
            traj.states.push(vw.clone());
        }
    }
    Ok(traj)
}

/// Continuation of private steady states; see [`continue_branch`].
pub fn continue_private_branch(
    ops: &Operators,
    vw: &[f64],
    params: &ParameterSet,
    param: &str,
    direction: f64,
    name: &str,
    opts: &ContinuationOptions,
) -> Result<Branch> {
    continue_branch(&Private, ops, vw, params, param, direction, name, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm_inf;
    use crate::newton::NewtonOptions;
    use crate::steady::{embed_flat, solve_flat_private};
    use crate::Mesh;

    fn ops(el: usize) -> Operators {
        Operators::assemble(&Mesh::interval(5.0, el).unwrap()).unwrap()
    }

    fn perturbed(vw: &[f64], ops: &Operators, amp: f64) -> Vec<f64> {
        let n = ops.n_nodes();
        let xs = Mesh::interval(5.0, n - 1).unwrap().xs();
        vw.iter().enumerate().map(|(i, x)| if i < n { x * (1.0 + amp * (0.2 * std::f64::consts::PI * xs[i]).cos()) } else { *x }).collect()
    }

    fn spread(vw: &[f64], n: usize) -> f64 {
        let v = &vw[..n];
        v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
    }

    #[test]
    fn bare_soil_is_stationary() {
        let o = ops(20);
        let par = ParameterSet::default().with_rain(60.0);
        let vw = embed_flat(&[0.0, 60.0 * par.beta / par.r_w], o.n_nodes());
        let next = step_private(&vw, 0.5, &par, &o).unwrap();
        let d: Vec<f64> = next.iter().zip(&vw).map(|(a, b)| (a - b) / b.max(1.0)).collect();
        assert!(norm_inf(&d) < 1e-12);
    }

    #[test]
    fn stable_flat_state_attracts() {
        let o = ops(20);
        let par = ParameterSet::default().with_rain(130.0);
        let fss = solve_flat_private(&par, [170.0, 40.0], &o, &NewtonOptions::default()).unwrap();
        let n = o.n_nodes();
        let start = perturbed(&fss.vw, &o, 0.01);
        let traj = integrate_private(&start, 200.0, &par, &o, &StepOptions::default()).unwrap();
        assert!(spread(traj.last(), n) < 0.1 * spread(&start, n));
        assert!(traj.last().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn long_run_reaches_the_newton_state() {
        let o = ops(20);
        let par = ParameterSet::default().with_rain(130.0);
        let fss = solve_flat_private(&par, [170.0, 40.0], &o, &NewtonOptions::default()).unwrap();
        let start = perturbed(&fss.vw, &o, 0.05);
        let opts = StepOptions { record_every: 1000, ..Default::default() };
        let traj = integrate_private(&start, 4000.0, &par, &o, &opts).unwrap();
        let d: Vec<f64> = traj.last().iter().zip(&fss.vw).map(|(a, b)| (a - b) / b).collect();
        assert!(norm_inf(&d) < 1e-6, "{}", norm_inf(&d));
    }

    #[test]
    fn unstable_flat_state_departs() {
        let o = ops(20);
        let par = ParameterSet::default().with_rain(60.0);
        let fss = solve_flat_private(&par, [80.0, 30.0], &o, &NewtonOptions::default()).unwrap();
        let n = o.n_nodes();
        let start = perturbed(&fss.vw, &o, 0.01);
        let traj = integrate_private(&start, 200.0, &par, &o, &StepOptions::default()).unwrap();
        assert!(spread(traj.last(), n) > 10.0 * spread(&start, n));
    }

    #[test]
    fn bad_step_is_rejected() {
        let o = ops(4);
        let par = ParameterSet::default();
        let vw = vec![1.0; 2 * o.n_nodes()];
        assert!(matches!(step_private(&vw, 0.0, &par, &o), Err(Error::InvalidArgument(_))));
        assert!(matches!(step_private_with(&vw, 0.1, &par, &o, 0.5), Err(Error::BlowUp { .. })));
    }
}
