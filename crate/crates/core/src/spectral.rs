//! Generalized spectrum of the linearized canonical system, defect and the terminal projector.
//!
//! Eigenvalues solve `A x = λ B x` with `A = -∂G/∂u` and `B = I ⊗ M`.

use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::{c64, Mat, MatRef, Par, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, to_dense, SparseLu};
use crate::model::{self, COMPONENTS};
use crate::{Operators, ParameterSet, SparseMatrix};

/// Half-width of the band around the imaginary axis where an eigenvalue counts as marginal.
pub const EPS_SPEC: f64 = 1e-8;

/// Largest node count for which [`Method::Auto`] uses a dense solve on patterned states.
pub const DENSE_NODE_LIMIT: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

impl From<c64> for Eigenvalue {
    fn from(z: c64) -> Self {
        Self { re: z.re, im: z.im }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Class {
    Stable,
    Unstable,
    Marginal,
}

impl Class {
    pub fn of(re: f64) -> Self {
        if re < -EPS_SPEC {
            Class::Stable
        } else if re > EPS_SPEC {
            Class::Unstable
        } else {
            Class::Marginal
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Stable => "stable",
            Class::Unstable => "unstable",
            Class::Marginal => "marginal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Modal decomposition for flat states, dense below [`DENSE_NODE_LIMIT`], shift-invert otherwise.
    Auto,
    Dense,
    /// Laplacian eigenmodes; only valid for spatially constant states.
    Modal,
    /// Eigenvalues closest to `ρ/2`, counts completed by the `λ ↔ ρ - conj(λ)` symmetry.
    ShiftInvert { count: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralData {
    pub eigenvalues: Vec<Eigenvalue>,
    /// Total dimension `4n` of the canonical system.
    pub dim: usize,
    pub n_stable: usize,
    pub n_unstable: usize,
    pub n_marginal: usize,
    pub defect: usize,
    /// `false` when only the eigenvalues near `ρ/2` were computed.
    pub complete: bool,
}

impl SpectralData {
    /// Classifies a full spectrum of a `dim`-dimensional canonical system.
    pub fn from_full(eigenvalues: Vec<Eigenvalue>, dim: usize) -> Self {
        let mut counts = [0usize; 3];
        for e in &eigenvalues {
            counts[Class::of(e.re) as usize] += 1;
        }
        Self {
            defect: (dim / 2).saturating_sub(counts[0]),
            eigenvalues,
            dim,
            n_stable: counts[0],
            n_unstable: counts[1],
            n_marginal: counts[2],
            complete: true,
        }
    }

    /// Counts from the eigenvalues in the strip `0 ≤ Re ≤ ρ` only.
    pub fn from_strip(eigenvalues: Vec<Eigenvalue>, dim: usize, rho: f64) -> Self {
        let strip: Vec<&Eigenvalue> =
            eigenvalues.iter().filter(|e| e.re >= -EPS_SPEC && e.re <= rho + EPS_SPEC).collect();
        let marginal = strip.iter().filter(|e| Class::of(e.re) == Class::Marginal).count();
        let n_stable = (dim - strip.len()) / 2;
        Self {
            defect: (dim / 2).saturating_sub(n_stable),
            n_stable,
            n_unstable: dim - n_stable - marginal,
            n_marginal: marginal,
            eigenvalues,
            dim,
            complete: false,
        }
    }

    pub fn is_marginal(&self) -> bool {
        self.n_marginal > 0
    }

    pub fn max_real(&self) -> f64 {
        self.eigenvalues.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max)
    }

    /// CSV with columns `re,im,class`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("re,im,class\n");
        for e in &self.eigenvalues {
            s.push_str(&format!("{:.16e},{:.16e},{}\n", e.re, e.im, Class::of(e.re).name()));
        }
        s
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
fn cholesky(m: &Mat<f64>) -> Result<Mat<f64>> {
    let llt = m.llt(Side::Lower).map_err(|e| Error::Eigen(format!("mass matrix not positive definite: {e:?}")))?;
    Ok(llt.L().to_owned())
}

/// `L⁻¹ A L⁻ᵀ` with `L` lower triangular.
fn congruence(l: MatRef<'_, f64>, a: &Mat<f64>) -> Mat<f64> {
    let mut x = a.clone();
    solve_lower_triangular_in_place(l, x.as_mut(), Par::Seq);
    let mut y = x.transpose().to_owned();
    solve_lower_triangular_in_place(l, y.as_mut(), Par::Seq);
    y.transpose().to_owned()
}

fn block_diagonal(b: &Mat<f64>, blocks: usize) -> Mat<f64> {
    let n = b.nrows();
    let mut out = Mat::zeros(blocks * n, blocks * n);
    for k in 0..blocks {
        for j in 0..n {
            for i in 0..n {
                out[(k * n + i, k * n + j)] = b[(i, j)];
            }
        }
    }
    out
}

fn eigenvalues_of(c: &Mat<f64>) -> Result<Vec<c64>> {
    c.eigenvalues().map_err(|e| Error::Eigen(format!("{e:?}")))
}

/// Generalized eigenvalues of `A x = λ (I_blocks ⊗ M) x`.
pub fn dense_pencil_eigenvalues(a: &Mat<f64>, mass: &Mat<f64>, blocks: usize) -> Result<Vec<Eigenvalue>> {
    let l = block_diagonal(&cholesky(mass)?, blocks);
    let c = congruence(l.as_ref(), a);
    Ok(eigenvalues_of(&c)?.into_iter().map(Eigenvalue::from).collect())
}

/// Rows spanning the left eigenspace of `A x = λ (I ⊗ M) x` for eigenvalues with `Re λ > split`.
///
/// Each row `ψ` satisfies `ψ x = 0` for every right eigenvector `x` whose eigenvalue lies left of
/// `split`. Complex pairs contribute their real and imaginary parts. Rows have unit norm.
pub fn dense_left_rows(a: &Mat<f64>, mass: &Mat<f64>, blocks: usize, split: f64) -> Result<Mat<f64>> {
    let l = block_diagonal(&cholesky(mass)?, blocks);
    let c = congruence(l.as_ref(), a);
    let ct = c.transpose().to_owned();
    let evd = ct.eigen().map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    let dim = a.nrows();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for j in 0..dim {
        let z = s[j];
        if z.re <= split || z.im < 0.0 {
            continue;
        }
        let parts: &[fn(c64) -> f64] =
            if z.im.abs() <= 1e-12 * (1.0 + z.re.abs()) { &[|w| w.re] } else { &[|w| w.re, |w| w.im] };
        for part in parts {
            let r: Vec<f64> = (0..dim).map(|i| part(u[(i, j)])).collect();
            let mut row = vec![0.0; dim];
            for i in 0..dim {
                let mut acc = 0.0;
                for k in 0..=i {
                    acc += l[(i, k)] * r[k];
                }
                row[i] = acc;
            }
            rows.push(row);
        }
    }
    Ok(rows_to_mat(rows, dim))
}

fn rows_to_mat(mut rows: Vec<Vec<f64>>, dim: usize) -> Mat<f64> {
    for r in rows.iter_mut() {
        let nr = norm2(r);
        if nr > 0.0 {
            r.iter_mut().for_each(|x| *x /= nr);
        }
    }
    Mat::from_fn(rows.len(), dim, |i, j| rows[i][j])
}

/// Eigenpairs of the discrete Neumann Laplacian, `K φ = -κ M φ`, with `M`-orthonormal `φ`.
#[derive(Debug, Clone)]
pub struct LaplaceModes {
    /// `κ_j ≥ 0`, nondecreasing.
    pub kappa: Vec<f64>,
    /// Columns `φ_j`.
    pub phi: Mat<f64>,
    /// Columns `M φ_j`.
    pub mass_phi: Mat<f64>,
}

impl LaplaceModes {
    pub fn compute(ops: &Operators) -> Result<Self> {
        let l = cholesky(&to_dense(&ops.mass))?;
        let minus_k = to_dense(&ops.stiffness.map(|x| -x));
        let mut s = congruence(l.as_ref(), &minus_k);
        let st = s.transpose().to_owned();
        s += &st;
        s *= faer::Scale(0.5);
        let evd = s.self_adjoint_eigen(Side::Lower).map_err(|e| Error::Eigen(format!("{e:?}")))?;
        let q = evd.U().to_owned();
        let kappa: Vec<f64> = evd.S().column_vector().iter().map(|&k| k.max(0.0)).collect();
        let mass_phi = &l * &q;
        let mut phi = q;
        solve_upper_triangular_in_place(l.transpose(), phi.as_mut(), Par::Seq);
        Ok(Self { kappa, phi, mass_phi })
    }

    pub fn len(&self) -> usize {
        self.kappa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappa.is_empty()
    }
}

/// Spatially constant values of each component, if the state is flat.
pub fn flat_values(u: &[f64], components: usize) -> Option<Vec<f64>> {
    let n = u.len() / components;
    (0..components)
        .map(|a| {
            let block = &u[a * n..(a + 1) * n];
            let mean = block.iter().sum::<f64>() / n as f64;
            let spread = block.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
            (spread <= 1e-10 * (1.0 + mean.abs())).then_some(mean)
        })
        .collect()
}

fn small_matrix(jac: &[Vec<f64>], diff: &[f64], kappa: f64) -> Mat<f64> {
    let k = diff.len();
    Mat::from_fn(k, k, |a, b| jac[a][b] - if a == b { kappa * diff[a] } else { 0.0 })
}

/// Spectrum of a flat state from the local Jacobian `J` and diffusion `D`: eigenvalues of `J - κ_j D`.
pub fn modal_eigenvalues(jac: &[Vec<f64>], diff: &[f64], modes: &LaplaceModes) -> Result<Vec<Eigenvalue>> {
    let mut out = Vec::with_capacity(diff.len() * modes.len());
    for &kappa in &modes.kappa {
        out.extend(eigenvalues_of(&small_matrix(jac, diff, kappa))?.into_iter().map(Eigenvalue::from));
    }
    Ok(out)
}

/// Modal version of [`dense_left_rows`] for a flat state.
pub fn modal_left_rows(jac: &[Vec<f64>], diff: &[f64], modes: &LaplaceModes, split: f64) -> Result<Mat<f64>> {
    let k = diff.len();
    let n = modes.len();
    let mut rows = Vec::new();
    for (j, &kappa) in modes.kappa.iter().enumerate() {
        let bt = small_matrix(jac, diff, kappa).transpose().to_owned();
        let evd = bt.eigen().map_err(|e| Error::Eigen(format!("{e:?}")))?;
        let s = evd.S().column_vector();
        for c in 0..k {
            let z = s[c];
            if z.re <= split || z.im < 0.0 {
                continue;
            }
            let parts: &[fn(c64) -> f64] =
                if z.im.abs() <= 1e-12 * (1.0 + z.re.abs()) { &[|w| w.re] } else { &[|w| w.re, |w| w.im] };
            for part in parts {
                let mut row = vec![0.0; k * n];
                for a in 0..k {
                    let la = part(evd.U()[(a, c)]);
                    for i in 0..n {
                        row[a * n + i] = la * modes.mass_phi[(i, j)];
                    }
                }
                rows.push(row);
            }
        }
    }
    Ok(rows_to_mat(rows, k * n))
}

/// Eigenvalues of `A x = λ B x` closest to the real shift `sigma`, by Arnoldi on `(A - σB)⁻¹ B`.
///
/// Only Ritz values whose residual estimate is below `1e-9 |θ|` are returned.
pub fn shift_invert_eigenvalues(
    a: &SparseMatrix,
    b: &SparseMatrix,
    sigma: f64,
    count: usize,
) -> Result<Vec<Eigenvalue>> {
    let dim = a.nrows();
    let krylov = (2 * count + 40).min(dim);
    let shifted: Vec<(usize, usize, f64)> =
        a.triplets().chain(b.triplets().map(|(r, c, v)| (r, c, -sigma * v))).collect();
    let lu = SparseLu::from_triplets(dim, shifted.into_iter())?;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(krylov + 1);
    let mut h = Mat::<f64>::zeros(krylov + 1, krylov);
    let mut q: Vec<f64> = (0..dim).map(|i| 1.0 + 0.5 * ((i as f64) * 0.7).sin()).collect();
    let nq = norm2(&q);
    q.iter_mut().for_each(|x| *x /= nq);
    basis.push(q);
    let mut steps = krylov;
    for j in 0..krylov {
        let mut w = lu.solve(&b.mul_vec(&basis[j]))?;
        for _ in 0..2 {
            for (i, v) in basis.iter().enumerate() {
                let c: f64 = v.iter().zip(&w).map(|(x, y)| x * y).sum();
                h[(i, j)] += c;
                w.iter_mut().zip(v).for_each(|(x, y)| *x -= c * y);
            }
        }
        let nw = norm2(&w);
        h[(j + 1, j)] = nw;
        if nw < 1e-14 {
            steps = j + 1;
            break;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        basis.push(w);
    }
    let hm = h.as_ref().submatrix(0, 0, steps, steps).to_owned();
    let beta = h[(steps, steps - 1)];
    let evd = hm.eigen().map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let mut found: Vec<(f64, Eigenvalue)> = Vec::new();
    for c in 0..steps {
        let theta = evd.S().column_vector()[c];
        let mag = theta.norm();
        if mag == 0.0 {
            continue;
        }
        let ynorm: f64 = (0..steps).map(|i| evd.U()[(i, c)].norm_sqr()).sum::<f64>().sqrt();
        let resid = beta * evd.U()[(steps - 1, c)].norm() / ynorm;
        if resid <= 1e-9 * mag {
            let lam = c64::new(sigma, 0.0) + c64::new(1.0, 0.0) / theta;
            found.push((mag, lam.into()));
        }
    }
    found.sort_by(|x, y| y.0.total_cmp(&x.0));
    Ok(found.into_iter().take(count).map(|(_, e)| e).collect())
}

fn negated(j: &SparseMatrix) -> SparseMatrix {
    j.map(|x| -x)
}

fn stacked_mass(ops: &Operators, blocks: usize) -> SparseMatrix {
    let n = ops.n_nodes();
    let trip: Vec<(usize, usize, f64)> = (0..blocks)
        .flat_map(|k| ops.mass.triplets().map(move |(r, c, v)| (k * n + r, k * n + c, v)))
        .collect();
    SparseMatrix::from_triplets(blocks * n, blocks * n, &trip)
}

fn flat_canonical_jacobian(s: &[f64], par: &ParameterSet) -> Result<Vec<Vec<f64>>> {
    let nk = model::flat_kinetics([s[0], s[1], s[2], s[3]], par)?;
    Ok(nk.jac.iter().map(|r| r.to_vec()).collect())
}

fn flat_private_jacobian(s: &[f64], par: &ParameterSet) -> Result<Vec<Vec<f64>>> {
    let (_, j) = model::private_node_kinetics(s[0], s[1], par, par.private_harvest_coefficient(), 0)?;
    Ok(j.iter().map(|r| r.to_vec()).collect())
}

fn resolve(method: Method, flat: bool, n: usize) -> Method {
    match method {
        Method::Auto if flat => Method::Modal,
        Method::Auto if n <= DENSE_NODE_LIMIT => Method::Dense,
        Method::Auto => Method::ShiftInvert { count: 60 },
        m => m,
    }
}

/// Spectrum of `-∂G/∂u` at a canonical steady state.
pub fn canonical_spectrum(u: &[f64], par: &ParameterSet, ops: &Operators, method: Method) -> Result<SpectralData> {
    let n = ops.n_nodes();
    let dim = COMPONENTS * n;
    let flat = flat_values(u, COMPONENTS);
    match resolve(method, flat.is_some(), n) {
        Method::Modal => {
            let s = flat.ok_or_else(|| Error::InvalidArgument("modal spectrum requires a flat state".into()))?;
            let modes = LaplaceModes::compute(ops)?;
            let eig = modal_eigenvalues(&flat_canonical_jacobian(&s, par)?, &model::diffusion_diagonal(par), &modes)?;
            Ok(SpectralData::from_full(eig, dim))
        }
        Method::Dense => {
            let a = to_dense(&negated(&model::jacobian(u, par, ops)?));
            let eig = dense_pencil_eigenvalues(&a, &to_dense(&ops.mass), COMPONENTS)?;
            Ok(SpectralData::from_full(eig, dim))
        }
        Method::ShiftInvert { count } => {
            let a = negated(&model::jacobian(u, par, ops)?);
            let b = stacked_mass(ops, COMPONENTS);
            let sigma = 0.5 * par.rho * (1.0 + 1e-3);
            let eig = shift_invert_eigenvalues(&a, &b, sigma, count)?;
            Ok(SpectralData::from_strip(eig, dim, par.rho))
        }
        Method::Auto => unreachable!(),
    }
}

/// Defect `2n - dim E_s` of a canonical steady state.
pub fn defect(u: &[f64], par: &ParameterSet, ops: &Operators) -> Result<usize> {
    Ok(canonical_spectrum(u, par, ops, Method::Auto)?.defect)
}

/// Spectrum of the linearized private system (two components, forward diffusion).
pub fn private_spectrum(vw: &[f64], par: &ParameterSet, ops: &Operators, method: Method) -> Result<SpectralData> {
    let n = ops.n_nodes();
    let flat = flat_values(vw, 2);
    let eig = match resolve(method, flat.is_some(), n) {
        Method::Modal => {
            let s = flat.ok_or_else(|| Error::InvalidArgument("modal spectrum requires a flat state".into()))?;
            let modes = LaplaceModes::compute(ops)?;
            modal_eigenvalues(&flat_private_jacobian(&s, par)?, &[par.d1, par.d2], &modes)?
        }
        Method::Dense | Method::ShiftInvert { .. } => {
            let a = to_dense(&negated(&model::private_jacobian(vw, par, ops)?));
            dense_pencil_eigenvalues(&a, &to_dense(&ops.mass), 2)?
        }
        Method::Auto => unreachable!(),
    };
    Ok(SpectralData::from_full(eig, 2 * n))
}

/// Rows `Ψ` (`2n × 4n`) of the terminal condition `Ψ (u(T) - û) = 0`.
///
/// Fails with [`Error::DefectiveTarget`] unless the state has the saddle point property.
pub fn stable_projector(u: &[f64], par: &ParameterSet, ops: &Operators) -> Result<Mat<f64>> {
    let n = ops.n_nodes();
    let split = 0.5 * par.rho;
    let (spec, psi) = match flat_values(u, COMPONENTS) {
        Some(s) => {
            let modes = LaplaceModes::compute(ops)?;
            let jac = flat_canonical_jacobian(&s, par)?;
            let diff = model::diffusion_diagonal(par);
            let spec = SpectralData::from_full(modal_eigenvalues(&jac, &diff, &modes)?, 4 * n);
            (spec, modal_left_rows(&jac, &diff, &modes, split)?)
        }
        None => {
            let a = to_dense(&negated(&model::jacobian(u, par, ops)?));
            let mass = to_dense(&ops.mass);
            let spec = SpectralData::from_full(dense_pencil_eigenvalues(&a, &mass, COMPONENTS)?, 4 * n);
            if spec.defect > 0 || spec.is_marginal() {
                return Err(Error::DefectiveTarget { defect: spec.defect.max(1) });
            }
            (spec, dense_left_rows(&a, &mass, COMPONENTS, split)?)
        }
    };
    if spec.defect > 0 || spec.is_marginal() {
        return Err(Error::DefectiveTarget { defect: spec.defect.max(1) });
    }
    if psi.nrows() != 2 * n {
        return Err(Error::Eigen(format!("unstable left subspace has dimension {}, expected {}", psi.nrows(), 2 * n)));
    }
    Ok(psi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Mesh;

    fn ops1(n_el: usize) -> Operators {
        Operators::assemble(&Mesh::interval(5.0, n_el).unwrap()).unwrap()
    }

    #[test]
    fn laplace_modes_match_closed_form() {
        let n_el = 20;
        let h = 0.5;
        let modes = LaplaceModes::compute(&ops1(n_el)).unwrap();
        for (j, &k) in modes.kappa.iter().enumerate() {
            let th = std::f64::consts::PI * j as f64 / n_el as f64;
            let exact = 6.0 / (h * h) * (1.0 - th.cos()) / (2.0 + th.cos());
            assert!((k - exact).abs() < 1e-9 * (1.0 + exact), "mode {j}: {k} vs {exact}");
        }
    }

    #[test]
    fn diagonal_pencil() {
        let a = Mat::from_fn(3, 3, |i, j| if i == j { [-1.0, 2.0, 5.0][i] } else { 0.0 });
        let m = Mat::from_fn(3, 3, |i, j| if i == j { [1.0, 2.0, 0.5][i] } else { 0.0 });
        let mut e: Vec<f64> = dense_pencil_eigenvalues(&a, &m, 1).unwrap().iter().map(|z| z.re).collect();
        e.sort_by(f64::total_cmp);
        assert!((e[0] + 1.0).abs() < 1e-12 && (e[1] - 1.0).abs() < 1e-12 && (e[2] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn left_rows_of_triangular_system_annihilate_stable_vectors() {
        // Upper triangular A: eigenvalues on the diagonal, right eigenvectors known in closed form.
        let a = Mat::from_fn(3, 3, |i, j| match (i, j) {
            (0, 0) => -1.0,
            (1, 1) => 3.0,
            (2, 2) => -2.0,
            (0, 1) => 1.0,
            (1, 2) => 4.0,
            (0, 2) => 0.5,
            _ => 0.0,
        });
        let m = Mat::<f64>::identity(3, 3);
        let psi = dense_left_rows(&a, &m, 1, 0.5).unwrap();
        assert_eq!(psi.nrows(), 1);
        // Stable right eigenvectors: e0 for -1 and the solution of (A + 2) x = 0.
        let x0 = [1.0, 0.0, 0.0];
        let x2 = {
            let x2z = 1.0;
            let x1 = -4.0 * x2z / 5.0;
            let x0 = -(x1 + 0.5 * x2z) / 1.0;
            [x0, x1, x2z]
        };
        for x in [x0, x2] {
            let p: f64 = (0..3).map(|j| psi[(0, j)] * x[j]).sum();
            assert!(p.abs() < 1e-12, "{p}");
        }
        // Analytic left eigenvector for eigenvalue 3 is proportional to (0, 1, 4/5).
        let r = psi[(0, 2)] / psi[(0, 1)];
        assert!((r - 0.8).abs() < 1e-12 && psi[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn left_rows_handle_complex_pairs() {
        let a = Mat::from_fn(4, 4, |i, j| match (i, j) {
            (0, 0) | (1, 1) => 2.0,
            (0, 1) => 1.0,
            (1, 0) => -1.0,
            (2, 2) => -1.0,
            (3, 3) => -3.0,
            (0, 2) => 0.7,
            (1, 3) => -0.4,
            _ => 0.0,
        });
        let m = Mat::from_fn(4, 4, |i, j| if i == j { 2.0 } else if i.abs_diff(j) == 1 { 0.5 } else { 0.0 });
        let psi = dense_left_rows(&a, &m, 1, 0.5).unwrap();
        assert_eq!(psi.nrows(), 2);
        // Stable right vectors of the pencil: solve (A - λ M) x = 0 for λ in the stable set.
        let l = cholesky(&m).unwrap();
        let c = congruence(l.as_ref(), &a);
        let evd = c.eigen().unwrap();
        for k in 0..4 {
            let z = evd.S().column_vector()[k];
            if z.re > 0.5 {
                continue;
            }
            let mut q = Mat::<f64>::from_fn(4, 1, |i, _| evd.U()[(i, k)].re);
            solve_upper_triangular_in_place(l.transpose(), q.as_mut(), Par::Seq);
            for r in 0..2 {
                let p: f64 = (0..4).map(|j| psi[(r, j)] * q[(j, 0)]).sum();
                assert!(p.abs() < 1e-10, "{p}");
            }
        }
    }

    #[test]
    fn strip_counts_follow_symmetry() {
        let e = vec![Eigenvalue { re: 0.01, im: 0.0 }, Eigenvalue { re: 0.02, im: 0.0 }, Eigenvalue { re: -0.5, im: 0.0 }];
        let s = SpectralData::from_strip(e, 20, 0.03);
        assert_eq!((s.n_stable, s.defect, s.n_unstable), (9, 1, 11));
    }

    #[test]
    fn modal_and_dense_agree_on_a_flat_state() {
        let ops = ops1(12);
        let par = ParameterSet::default().with_rain(20.0);
        let s = [223.586, 9.620, 0.6152, 0.8694];
        let n = ops.n_nodes();
        let u: Vec<f64> = (0..4 * n).map(|i| s[i / n]).collect();
        let mut m: Vec<f64> = canonical_spectrum(&u, &par, &ops, Method::Modal).unwrap().eigenvalues.iter().map(|e| e.re).collect();
        let mut d: Vec<f64> = canonical_spectrum(&u, &par, &ops, Method::Dense).unwrap().eigenvalues.iter().map(|e| e.re).collect();
        m.sort_by(f64::total_cmp);
        d.sort_by(f64::total_cmp);
        for (x, y) in m.iter().zip(&d) {
            assert!((x - y).abs() < 1e-7 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn shift_invert_finds_eigenvalues_near_the_shift() {
        let ops = ops1(30);
        let par = ParameterSet::default().with_rain(20.0);
        let s = [223.586, 9.620, 0.6152, 0.8694];
        let n = ops.n_nodes();
        let u: Vec<f64> = (0..4 * n).map(|i| s[i / n] * (1.0 + 0.01 * (i as f64).cos())).collect();
        let dense = canonical_spectrum(&u, &par, &ops, Method::Dense).unwrap();
        let si = canonical_spectrum(&u, &par, &ops, Method::ShiftInvert { count: 30 }).unwrap();
        assert_eq!(si.defect, dense.defect);
        for e in &si.eigenvalues {
            let best = dense.eigenvalues.iter().map(|f| ((f.re - e.re).powi(2) + (f.im - e.im).powi(2)).sqrt()).fold(f64::MAX, f64::min);
            assert!(best < 1e-6 * (1.0 + e.re.abs() + e.im.abs()), "{e:?}");
        }
    }

    #[test]
    fn flat_detection() {
        assert_eq!(flat_values(&[1.0, 1.0, 2.0, 2.0], 2), Some(vec![1.0, 2.0]));
        assert_eq!(flat_values(&[1.0, 1.1, 2.0, 2.0], 2), None);
    }
}
