use crate::error::{Error, Result};
use crate::fem::{CsrMatrix, Operators};
use crate::model::ParameterSet;
use crate::scalar::Scalar;

/// Number of stacked fields `(v, w, λ, μ)` in a canonical state.
pub const COMPONENTS: usize = 4;

/// Diffusion coefficients `(d1, d2, -d1, -d2)`: forward on the states, backward on the co-states.
pub fn diffusion_diagonal<T: Scalar>(par: &ParameterSet<T>) -> [T; 4] {
    [par.d1, par.d2, -par.d1, -par.d2]
}

/// Splits a stacked `4n` vector into `[v, w, λ, μ]`.
pub fn components<T>(u: &[T]) -> [&[T]; 4] {
    let n = u.len() / COMPONENTS;
    [&u[..n], &u[n..2 * n], &u[2 * n..3 * n], &u[3 * n..]]
}

/// `kappa = ((p - λ)(1 - α)/c)^(1/α)`, so that the optimal effort is `E = kappa v`.
pub fn effort_per_biomass<T: Scalar>(lambda: T, par: &ParameterSet<T>) -> Option<T> {
    let margin = par.p - lambda;
    if !(margin > T::zero()) {
        return None;
    }
    Some((margin * (T::one() - par.alpha) / par.c).powf(T::one() / par.alpha))
}

/// Closed-loop harvesting effort maximizing the Hamiltonian, nodewise.
pub fn control_law<T: Scalar>(v: &[T], lambda: &[T], par: &ParameterSet<T>) -> Result<Vec<T>> {
    if v.len() != lambda.len() {
        return Err(Error::InvalidArgument("v and lambda lengths differ".into()));
    }
    v.iter()
        .zip(lambda)
        .enumerate()
        .map(|(node, (&vi, &li))| {
            let kappa = effort_per_biomass(li, par).ok_or(Error::ControlUndefined {
                node,
                lambda: li.to_f64_lossy(),
                price: par.p.to_f64_lossy(),
            })?;
            if vi < T::zero() {
                return Err(Error::Domain { node, what: format!("negative vegetation {vi}") });
            }
            Ok(if vi == T::zero() { T::zero() } else { kappa * vi })
        })
        .collect()
}

/// Pointwise canonical kinetics at one node.
#[derive(Debug, Clone, Copy)]
pub struct NodeKinetics<T> {
    pub f: [T; 4],
    /// `jac[a][b] = ∂f_a / ∂u_b`
    pub jac: [[T; 4]; 4],
}

/// Reaction part `f(v, w, λ, μ)` of the canonical system and its derivative.
///
/// With `E = kappa v` substituted, the harvest is `h v` with `h = kappa^(1-α)` independent of `v`.
/// At `v = 0` the effort is clamped to zero and the harvest terms of the λ equation vanish.
pub fn node_kinetics<T: Scalar>(s: [T; 4], par: &ParameterSet<T>, node: usize) -> Result<NodeKinetics<T>> {
    let [v, w, l, m] = s;
    let one = T::one();
    let two = T::lit(2.0);
    if v < T::zero() {
        return Err(Error::Domain { node, what: format!("negative vegetation {v}") });
    }
    let kappa = effort_per_biomass(l, par).ok_or(Error::ControlUndefined {
        node,
        lambda: l.to_f64_lossy(),
        price: par.p.to_f64_lossy(),
    })?;
    let degenerate = v == T::zero();
    let (h, dh) = if degenerate {
        (T::zero(), T::zero())
    } else {
        let h = kappa.powf(one - par.alpha);
        (h, -(one - par.alpha) * h / (par.alpha * (par.p - l)))
    };
    let (v_eta, v_eta_m1) = if degenerate {
        (T::zero(), T::zero())
    } else {
        let ve = v.powf(par.eta);
        (ve, ve / v)
    };
    let v_eta1 = v_eta * v;
    let (g, eta, d, dl) = (par.g, par.eta, par.d, par.delta);
    let growth_v = g * (eta + one) * w * v_eta - two * d * dl * v - d;

    let f1 = g * w * v_eta1 - d * v - d * dl * v * v - h * v;
    let f2 = par.rain * (par.beta + par.xi * v) - (par.r_u * v + par.r_w) * w;
    let f3 = par.rho * l - par.alpha * (par.p - l) * h - l * growth_v - m * (par.rain * par.xi - par.r_u * w);
    let f4 = par.rho * m - l * g * v_eta1 + m * (par.r_u * v + par.r_w);

    let mut jac = [[T::zero(); 4]; 4];
    jac[0][0] = g * (eta + one) * w * v_eta - d - two * d * dl * v - h;
    jac[0][1] = g * v_eta1;
    jac[0][2] = -dh * v;
    jac[1][0] = par.rain * par.xi - par.r_u * w;
    jac[1][1] = -(par.r_u * v + par.r_w);
    jac[2][0] = -l * (g * (eta + one) * eta * w * v_eta_m1 - two * d * dl);
    jac[2][1] = -l * g * (eta + one) * v_eta + m * par.r_u;
    // ∂/∂λ of -α(p-λ)h is αh + (1-α)h = h
    jac[2][2] = par.rho + h - growth_v;
    jac[2][3] = -(par.rain * par.xi - par.r_u * w);
    jac[3][0] = -l * g * (eta + one) * v_eta + m * par.r_u;
    jac[3][2] = -g * v_eta1;
    jac[3][3] = par.rho + par.r_u * v + par.r_w;
    Ok(NodeKinetics { f: [f1, f2, f3, f4], jac })
}

fn node_state<T: Scalar>(u: &[T], n: usize, i: usize) -> [T; 4] {
    [u[i], u[n + i], u[2 * n + i], u[3 * n + i]]
}

fn check_len<T: Scalar>(u: &[T], ops: &Operators<T>, comps: usize) -> Result<usize> {
    let n = ops.n_nodes();
    if u.len() != comps * n {
        return Err(Error::InvalidArgument(format!("state has length {}, expected {}", u.len(), comps * n)));
    }
    Ok(n)
}

/// Nodal reaction terms `f(u)`, stacked like `u`.
pub fn kinetics<T: Scalar>(u: &[T], par: &ParameterSet<T>, n: usize) -> Result<Vec<T>> {
    let mut f = vec![T::zero(); 4 * n];
    for i in 0..n {
        let k = node_kinetics(node_state(u, n, i), par, i)?;
        for c in 0..4 {
            f[c * n + i] = k.f[c];
        }
    }
    Ok(f)
}

/// Weak residual `G(u) = -(D K u + M f(u))`; canonical steady states solve `G(u) = 0` and
/// canonical paths solve `M u' = -G(u)`.
pub fn residual<T: Scalar>(u: &[T], par: &ParameterSet<T>, ops: &Operators<T>) -> Result<Vec<T>> {
    let n = check_len(u, ops, 4)?;
    let f = kinetics(u, par, n)?;
    let dd = diffusion_diagonal(par);
    let mut g = vec![T::zero(); 4 * n];
    let mut ku = vec![T::zero(); n];
    let mut mf = vec![T::zero(); n];
    for c in 0..4 {
        let range = c * n..(c + 1) * n;
        ops.stiffness.mul_vec_into(&u[range.clone()], &mut ku);
        ops.mass.mul_vec_into(&f[range.clone()], &mut mf);
        for (gi, (k, m)) in g[range].iter_mut().zip(ku.iter().zip(&mf)) {
            *gi = -(dd[c] * *k + *m);
        }
    }
    Ok(g)
}

/// Analytic derivative `∂G/∂u` as a sparse `4n x 4n` matrix.
pub fn jacobian<T: Scalar>(u: &[T], par: &ParameterSet<T>, ops: &Operators<T>) -> Result<CsrMatrix<T>> {
    let n = check_len(u, ops, 4)?;
    let jacs = (0..n)
        .map(|i| node_kinetics(node_state(u, n, i), par, i).map(|k| k.jac))
        .collect::<Result<Vec<_>>>()?;
    let dd = diffusion_diagonal(par);
    Ok(assemble_block_jacobian(ops, 4, |a, b, j| jacs[j][a][b], |a| dd[a]))
}

/// Builds `-(D ⊗ K + [M diag(J_ab)]_ab)` for a `comps`-component system.
///
/// The mass blocks use `M_ij J_ab(node j)`, the derivative of `M f(u)`.
pub(crate) fn assemble_block_jacobian<T: Scalar>(
    ops: &Operators<T>,
    comps: usize,
    local: impl Fn(usize, usize, usize) -> T,
    diffusion: impl Fn(usize) -> T,
) -> CsrMatrix<T> {
    let n = ops.n_nodes();
    let mut trip = Vec::with_capacity(comps * comps * ops.mass.nnz() + comps * ops.stiffness.nnz());
    for (i, j, mij) in ops.mass.triplets() {
        for a in 0..comps {
            for b in 0..comps {
                trip.push((a * n + i, b * n + j, -mij * local(a, b, j)));
            }
        }
    }
    for (i, j, kij) in ops.stiffness.triplets() {
        for a in 0..comps {
            trip.push((a * n + i, a * n + j, -diffusion(a) * kij));
        }
    }
    CsrMatrix::from_triplets(comps * n, comps * n, &trip)
}

/// Flat kinetics `f` and `∂f/∂u` for a spatially constant state (the Laplacian drops out).
pub fn flat_kinetics<T: Scalar>(s: [T; 4], par: &ParameterSet<T>) -> Result<NodeKinetics<T>> {
    node_kinetics(s, par, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::Mesh;
    use proptest::prelude::*;

    fn par() -> ParameterSet<f64> {
        ParameterSet::default()
    }

    fn ops1d(nel: usize) -> Operators<f64> {
        Operators::assemble(&Mesh::interval(5.0, nel).unwrap()).unwrap()
    }

    /// Deterministic pseudo-random admissible state.
    fn sample_state(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut u = vec![0.0; 4 * n];
        for i in 0..n {
            u[i] = 50.0 + 400.0 * next();
            u[n + i] = 5.0 + 15.0 * next();
            u[2 * n + i] = -0.5 + 1.4 * next();
            u[3 * n + i] = 2.0 * next();
        }
        u
    }

    #[test]
    fn control_law_values() {
        let p = par();
        let e = control_law(&[1.0], &[0.0], &p).unwrap();
        // oracle: 0.77^(10/3) = exp(10/3 ln 0.77)
        let oracle = (10.0 / 3.0 * 0.77f64.ln()).exp();
        assert!((e[0] - oracle).abs() < 1e-14, "{}", e[0]);
        assert!((e[0] - 0.41843).abs() < 2e-5);
        let near = control_law(&[1.0], &[1.1 - 1e-9], &p).unwrap();
        assert!(near[0] < 1e-20);
        assert_eq!(control_law(&[0.0], &[0.3], &p).unwrap()[0], 0.0);
        assert!(matches!(
            control_law(&[1.0, 1.0], &[0.0, 1.2], &p),
            Err(Error::ControlUndefined { node: 1, .. })
        ));
        let kappa = effort_per_biomass(0.0, &p).unwrap();
        assert!((kappa.powf(0.7) - p.private_harvest_coefficient()).abs() < 1e-12);
    }

    #[test]
    fn trivial_state_balances_the_state_equations() {
        let p = par().with_rain(28.0);
        let ops = ops1d(20);
        let n = 21;
        let mut u = vec![0.0; 84];
        for i in 0..n {
            u[n + i] = p.rain * p.beta / p.r_w;
        }
        let g = residual(&u, &p, &ops).unwrap();
        assert!(g[..2 * n].iter().all(|x| x.abs() < 1e-12));
        assert!(g[2 * n..].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn flat_residual_rows_are_uniform() {
        let p = par();
        let ops = ops1d(30);
        let n = 31;
        let mut u = vec![0.0; 4 * n];
        for (c, val) in [300.0, 9.0, 0.5, 1.0].into_iter().enumerate() {
            u[c * n..(c + 1) * n].fill(val);
        }
        let g = residual(&u, &p, &ops).unwrap();
        let f = flat_kinetics([300.0, 9.0, 0.5, 1.0], &p).unwrap().f;
        for c in 0..4 {
            // interior rows carry M_ii + 2 M_i,i±1 = h, boundary rows h/2
            for i in 1..n - 1 {
                assert!((g[c * n + i] - g[c * n + 1]).abs() < 1e-12);
                assert!((g[c * n + i] + f[c] * 10.0 / 30.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_1d_and_2d() {
        let p = par().with_rain(20.0);
        for (ops, seed) in [(ops1d(12), 1), (Operators::assemble(&Mesh::rectangle(5.0, 4, 3).unwrap()).unwrap(), 2)] {
            let n = ops.n_nodes();
            let u = sample_state(n, seed);
            let jac = jacobian(&u, &p, &ops).unwrap().to_dense();
            for col in 0..4 * n {
                let h = 1e-6 * u[col].abs().max(1e-2);
                let (mut up, mut um) = (u.clone(), u.clone());
                up[col] += h;
                um[col] -= h;
                let gp = residual(&up, &p, &ops).unwrap();
                let gm = residual(&um, &p, &ops).unwrap();
                let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                let scale = fd.iter().chain((0..4 * n).map(|r| &jac[r][col])).fold(0.0f64, |a, x| a.max(x.abs()));
                for r in 0..4 * n {
                    assert!((fd[r] - jac[r][col]).abs() <= 1e-6 * scale.max(1e-8), "({r},{col}) {} vs {}", fd[r], jac[r][col]);
                }
            }
        }
    }

    #[test]
    fn jacobian_sparsity_follows_the_mesh() {
        let ops = ops1d(10);
        let n = 11;
        let j = jacobian(&sample_state(n, 3), &par(), &ops).unwrap();
        for (r, c, _) in j.triplets() {
            let (i, k) = (r % n, c % n);
            assert!(ops.mass.get(i, k) != 0.0 || ops.stiffness.get(i, k) != 0.0);
        }
    }

    #[test]
    fn flat_jacobian_commutes_with_translation_in_the_interior() {
        // shifting a flat state's linearization by one node maps interior rows onto interior rows
        let ops = ops1d(16);
        let n = 17;
        let mut u = vec![0.0; 4 * n];
        for (c, val) in [223.6, 9.62, 0.615, 0.869].into_iter().enumerate() {
            u[c * n..(c + 1) * n].fill(val);
        }
        let j = jacobian(&u, &par().with_rain(20.0), &ops).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                for i in 2..n - 2 {
                    for di in [-1i64, 0, 1] {
                        let k = (i as i64 + di) as usize;
                        let here = j.get(a * n + i, b * n + k);
                        let shifted = j.get(a * n + i + 1, b * n + k + 1);
                        assert!((here - shifted).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_inadmissible_states() {
        let ops = ops1d(4);
        let mut u = sample_state(5, 4);
        u[1] = -1.0;
        assert!(matches!(residual(&u, &par(), &ops), Err(Error::Domain { node: 1, .. })));
        let mut u = sample_state(5, 4);
        u[10 + 3] = 2.0;
        assert!(matches!(residual(&u, &par(), &ops), Err(Error::ControlUndefined { node: 3, .. })));
        assert!(matches!(residual(&u[..8], &par(), &ops), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn residual_in_single_precision() {
        let ops = Operators::assemble(&Mesh::<f32>::interval(5.0, 10).unwrap()).unwrap();
        let u64s = sample_state(11, 5);
        let u32s: Vec<f32> = u64s.iter().map(|&x| x as f32).collect();
        let g32 = residual(&u32s, &par().cast::<f32>(), &ops).unwrap();
        let g64 = residual(&u64s, &par(), &ops1d(10)).unwrap();
        for (a, b) in g32.iter().zip(&g64) {
            assert!((*a as f64 - b).abs() <= 1e-3 * (1.0 + b.abs()));
        }
    }

    proptest! {
        #[test]
        fn profit_identity(v in 0.0..500.0f64, l in -2.0..1.09f64) {
            let p = par();
            let e = control_law(&[v], &[l], &p).unwrap()[0];
            let kappa = effort_per_biomass(l, &p).unwrap();
            let direct = p.p * v.powf(p.alpha) * e.powf(1.0 - p.alpha) - p.c * e;
            let closed = v * (p.p * kappa.powf(1.0 - p.alpha) - p.c * kappa);
            prop_assert!((direct - closed).abs() <= 1e-10 * (1.0 + closed.abs()));
        }
    }
}
