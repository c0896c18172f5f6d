use crate::error::{Error, Result};
use crate::fem::{CsrMatrix, Operators};
use crate::model::canonical::{assemble_block_jacobian, effort_per_biomass};
use crate::model::ParameterSet;
use crate::scalar::Scalar;

/// Reaction terms of the privately optimized system, where harvest is `A v`.
pub fn private_node_kinetics<T: Scalar>(
    v: T,
    w: T,
    par: &ParameterSet<T>,
    harvest: T,
    node: usize,
) -> Result<([T; 2], [[T; 2]; 2])> {
    if v < T::zero() || w < T::zero() {
        return Err(Error::Domain { node, what: format!("negative state ({v}, {w})") });
    }
    let one = T::one();
    let two = T::lit(2.0);
    let v_eta = if v == T::zero() { T::zero() } else { v.powf(par.eta) };
    let f1 = (par.g * w * v_eta - par.d * (one + par.delta * v) - harvest) * v;
    let f2 = par.rain * (par.beta + par.xi * v) - (par.r_u * v + par.r_w) * w;
    let j = [
        [par.g * (par.eta + one) * w * v_eta - par.d - two * par.d * par.delta * v - harvest, par.g * v_eta * v],
        [par.rain * par.xi - par.r_u * w, -(par.r_u * v + par.r_w)],
    ];
    Ok(([f1, f2], j))
}

fn check<T: Scalar>(vw: &[T], ops: &Operators<T>) -> Result<usize> {
    let n = ops.n_nodes();
    if vw.len() != 2 * n {
        return Err(Error::InvalidArgument(format!("state has length {}, expected {}", vw.len(), 2 * n)));
    }
    Ok(n)
}

/// Weak residual `-(D K u + M f(u))` of the private system with `A` from the economics.
pub fn private_residual<T: Scalar>(vw: &[T], par: &ParameterSet<T>, ops: &Operators<T>) -> Result<Vec<T>> {
    private_residual_with(vw, par, ops, par.private_harvest_coefficient())
}

/// As [`private_residual`] with an explicit harvest coefficient `A`.
pub fn private_residual_with<T: Scalar>(
    vw: &[T],
    par: &ParameterSet<T>,
    ops: &Operators<T>,
    harvest: T,
) -> Result<Vec<T>> {
    let n = check(vw, ops)?;
    let mut f = vec![T::zero(); 2 * n];
    for i in 0..n {
        let (fi, _) = private_node_kinetics(vw[i], vw[n + i], par, harvest, i)?;
        f[i] = fi[0];
        f[n + i] = fi[1];
    }
    let dd = [par.d1, par.d2];
    let mut g = vec![T::zero(); 2 * n];
    let mut ku = vec![T::zero(); n];
    let mut mf = vec![T::zero(); n];
    for c in 0..2 {
        let r = c * n..(c + 1) * n;
        ops.stiffness.mul_vec_into(&vw[r.clone()], &mut ku);
        ops.mass.mul_vec_into(&f[r.clone()], &mut mf);
        for (gi, (k, m)) in g[r].iter_mut().zip(ku.iter().zip(&mf)) {
            *gi = -(dd[c] * *k + *m);
        }
    }
    Ok(g)
}

pub fn private_jacobian<T: Scalar>(vw: &[T], par: &ParameterSet<T>, ops: &Operators<T>) -> Result<CsrMatrix<T>> {
    let n = check(vw, ops)?;
    let a = par.private_harvest_coefficient();
    let jacs = (0..n)
        .map(|i| private_node_kinetics(vw[i], vw[n + i], par, a, i).map(|(_, j)| j))
        .collect::<Result<Vec<_>>>()?;
    let dd = [par.d1, par.d2];
    Ok(assemble_block_jacobian(ops, 2, |a, b, j| jacs[j][a][b], |a| dd[a]))
}

/// Private profit density `π = p v^α E^(1-α) - c E` with `E = γ v`.
pub fn private_profit<T: Scalar>(v: &[T], par: &ParameterSet<T>) -> Vec<T> {
    let gamma = par.private_gamma();
    let per_biomass = par.p * gamma.powf(T::one() - par.alpha) - par.c * gamma;
    v.iter().map(|&vi| per_biomass * vi).collect()
}

/// Privately optimal effort under a per-unit harvest tax `tau`.
pub fn taxed_private_effort<T: Scalar>(v: &[T], tau: &[T], par: &ParameterSet<T>) -> Result<Vec<T>> {
    v.iter()
        .zip(tau)
        .enumerate()
        .map(|(node, (&vi, &ti))| {
            let kappa = effort_per_biomass(ti, par).ok_or(Error::ControlUndefined {
                node,
                lambda: ti.to_f64_lossy(),
                price: par.p.to_f64_lossy(),
            })?;
            Ok(kappa * vi)
        })
        .collect()
}

/// The vegetation shadow price read as the harvest tax that aligns private and social optima.
pub fn tax_field<T: Scalar>(u: &[T]) -> Vec<T> {
    let n = u.len() / 4;
    u[2 * n..3 * n].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::Mesh;
    use crate::model::control_law;

    fn ops() -> Operators<f64> {
        Operators::assemble(&Mesh::interval(5.0, 10).unwrap()).unwrap()
    }

    #[test]
    fn trivial_branch_is_exact() {
        let par = ParameterSet::<f64>::default().with_rain(60.0);
        let n = 11;
        let mut vw = vec![0.0; 2 * n];
        vw[n..].fill(par.rain * par.beta / par.r_w);
        assert!(private_residual(&vw, &par, &ops()).unwrap().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn harvest_free_limit_is_the_ecological_model() {
        let par = ParameterSet::<f64>::default().with_rain(60.0);
        let mut vw: Vec<f64> = (0..22).map(|i| 10.0 + i as f64).collect();
        vw[11..].iter_mut().for_each(|w| *w *= 0.5);
        let g0 = private_residual_with(&vw, &par, &ops(), 0.0).unwrap();
        let ga = private_residual_with(&vw, &par, &ops(), 0.3).unwrap();
        // A only enters the v rows, through -M (A v)
        let mv = ops().mass.mul_vec(&vw[..11]);
        for i in 0..11 {
            assert!((ga[i] - g0[i] - 0.3 * mv[i]).abs() < 1e-10);
            assert!((ga[11 + i] - g0[11 + i]).abs() < 1e-12);
        }
    }

    #[test]
    fn private_jacobian_matches_finite_differences() {
        let par = ParameterSet::<f64>::default().with_rain(60.0);
        let vw: Vec<f64> = (0..22).map(|i| if i < 11 { 60.0 + 3.0 * i as f64 } else { 50.0 + i as f64 }).collect();
        let j = private_jacobian(&vw, &par, &ops()).unwrap().to_dense();
        for col in 0..22 {
            let h = 1e-5 * vw[col];
            let (mut a, mut b) = (vw.clone(), vw.clone());
            a[col] += h;
            b[col] -= h;
            let ga = private_residual(&a, &par, &ops()).unwrap();
            let gb = private_residual(&b, &par, &ops()).unwrap();
            for r in 0..22 {
                let fd = (ga[r] - gb[r]) / (2.0 * h);
                assert!((fd - j[r][col]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn tax_reproduces_the_closed_loop_effort() {
        let par = ParameterSet::<f64>::default();
        let v = [0.0, 1.0, 75.0, 300.0];
        let lam = [0.2, -0.1, 0.68, 0.59];
        let social = control_law(&v, &lam, &par).unwrap();
        let private = taxed_private_effort(&v, &lam, &par).unwrap();
        for (a, b) in social.iter().zip(&private) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        let untaxed = taxed_private_effort(&[1.0], &[0.0], &par).unwrap();
        assert!((untaxed[0] - par.private_gamma()).abs() < 1e-15);
        assert!((untaxed[0] - control_law(&[1.0], &[0.0], &par).unwrap()[0]).abs() < 1e-15);
    }

    #[test]
    fn private_profit_per_biomass() {
        let par = ParameterSet::<f64>::default();
        let pi = private_profit(&[79.73], &par)[0];
        assert!((pi - 14.3).abs() < 0.01, "{pi}");
    }
}
