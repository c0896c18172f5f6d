//! Current value profit, its spatial average and the discounted objective of a path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::Operators;
use crate::model::{components, ParameterSet};
use crate::scalar::Scalar;

/// Local current value profit `J_c = p v^α E^(1-α) - c E`, nodewise.
pub fn profit_density<T: Scalar>(v: &[T], effort: &[T], par: &ParameterSet<T>) -> Result<Vec<T>> {
    if v.len() != effort.len() {
        return Err(Error::InvalidArgument("v and E lengths differ".into()));
    }
    v.iter()
        .zip(effort)
        .enumerate()
        .map(|(node, (&vi, &ei))| {
            if vi < T::zero() || ei < T::zero() {
                return Err(Error::Domain { node, what: format!("negative v or E ({vi}, {ei})") });
            }
            if ei == T::zero() {
                return Ok(T::zero());
            }
            Ok(par.p * vi.powf(par.alpha) * ei.powf(T::one() - par.alpha) - par.c * ei)
        })
        .collect()
}

/// Spatially averaged current value profit `J_{c,a}`.
pub fn average_profit<T: Scalar>(v: &[T], effort: &[T], par: &ParameterSet<T>, ops: &Operators<T>) -> Result<T> {
    ops.average(&profit_density(v, effort, par)?)
}

/// `J_{c,a}` of a canonical state, with the effort taken from the closed-loop control law.
pub fn state_profit<T: Scalar>(u: &[T], par: &ParameterSet<T>, ops: &Operators<T>) -> Result<T> {
    let [v, _, l, _] = components(u);
    let e = crate::model::control_law(v, l, par)?;
    average_profit(v, &e, par, ops)
}

/// Decomposition of a discounted path value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueReport {
    /// `transient + tail`
    pub total: f64,
    /// `∫_0^T e^{-ρt} J_{c,a}(t) dt`
    pub transient: f64,
    /// `e^{-ρT} J_{c,a}(û) / ρ`
    pub tail: f64,
    /// `J_{c,a}` at every time node
    pub profit: Vec<f64>,
}

/// `∫_0^h e^{-ρs} ds` and `∫_0^h s e^{-ρs} ds`.
fn exp_moments<T: Scalar>(rho: T, h: T) -> (T, T) {
    let x = rho * h;
    let i0 = -(-x).exp_m1() / rho;
    let i1 = if x.abs() < T::lit(1e-3) {
        // 1 - e^{-x}(1+x) = x²/2 - x³/3 + x⁴/8 - x⁵/30
        let x2 = x * x;
        x2 * (T::lit(0.5) - x / T::lit(3.0) + x2 / T::lit(8.0) - x2 * x / T::lit(30.0))
    } else {
        T::one() - (-x).exp() * (T::one() + x)
    } / (rho * rho);
    (i0, i1)
}

/// Discounted value of a piecewise linear profit history plus the steady tail.
///
/// The exponential weight is integrated exactly against the linear interpolant, so a constant
/// history reproduces `J_{c,a}/ρ` to rounding.
pub fn discounted_value<T: Scalar>(times: &[T], profit: &[T], rho: T, terminal_profit: T) -> Result<(T, T)> {
    if times.len() != profit.len() || times.is_empty() {
        return Err(Error::InvalidArgument("time and profit series must be nonempty and of equal length".into()));
    }
    let mut transient = T::zero();
    for k in 0..times.len() - 1 {
        let h = times[k + 1] - times[k];
        if !(h > T::zero()) {
            return Err(Error::InvalidArgument("time nodes must increase strictly".into()));
        }
        let (i0, i1) = exp_moments(rho, h);
        let (a, b) = (profit[k], profit[k + 1]);
        transient = transient + (-rho * (times[k] - times[0])).exp() * (a * i0 + (b - a) * i1 / h);
    }
    let horizon = *times.last().unwrap() - times[0];
    let tail = (-rho * horizon).exp() * terminal_profit / rho;
    Ok((transient, tail))
}

pub fn value_report(times: &[f64], profit: Vec<f64>, rho: f64, terminal_profit: f64) -> Result<ValueReport> {
    let (transient, tail) = discounted_value(times, &profit, rho, terminal_profit)?;
    Ok(ValueReport { total: transient + tail, transient, tail, profit })
}
