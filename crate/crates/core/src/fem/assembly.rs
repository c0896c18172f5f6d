use crate::error::{Error, Result};
use crate::fem::{CsrMatrix, Mesh};
use crate::scalar::Scalar;

/// Consistent mass matrix `M`, weak Laplacian `K` and the domain measure.
///
/// `K_ij = -∫ ∇φ_i·∇φ_j`, so `K u ≈ M Δu` for fields with zero normal flux.
#[derive(Debug, Clone)]
pub struct Operators<T> {
    pub mass: CsrMatrix<T>,
    pub stiffness: CsrMatrix<T>,
    pub measure: T,
    /// `1ᵀ M`, the nodal quadrature weights.
    pub weights: Vec<T>,
}

impl<T: Scalar> Operators<T> {
    pub fn assemble(mesh: &Mesh<T>) -> Result<Self> {
        let n = mesh.n_nodes();
        let k = mesh.dim() + 1;
        let mut mt = Vec::with_capacity(mesh.n_cells() * k * k);
        let mut kt = Vec::with_capacity(mesh.n_cells() * k * k);
        let mut measure = T::zero();
        for e in 0..mesh.n_cells() {
            let vol = mesh.cell_measure(e);
            if !(vol > T::zero()) {
                return Err(Error::DegenerateElement { element: e, measure: vol.to_f64_lossy() });
            }
            measure = measure + vol;
            let c = mesh.cell(e);
            match mesh.dim() {
                1 => {
                    let (m_diag, m_off) = (vol / T::lit(3.0), vol / T::lit(6.0));
                    let s = T::one() / vol;
                    for a in 0..2 {
                        for b in 0..2 {
                            let same = a == b;
                            mt.push((c[a], c[b], if same { m_diag } else { m_off }));
                            kt.push((c[a], c[b], if same { -s } else { s }));
                        }
                    }
                }
                _ => {
                    let p: Vec<&[T]> = c.iter().map(|&i| mesh.node(i)).collect();
                    // gradients of barycentric coordinates times 2*area
                    let g = [
                        [p[1][1] - p[2][1], p[2][0] - p[1][0]],
                        [p[2][1] - p[0][1], p[0][0] - p[2][0]],
                        [p[0][1] - p[1][1], p[1][0] - p[0][0]],
                    ];
                    let four_area = T::lit(4.0) * vol;
                    for a in 0..3 {
                        for b in 0..3 {
                            let m = if a == b { vol / T::lit(6.0) } else { vol / T::lit(12.0) };
                            mt.push((c[a], c[b], m));
                            let dot = g[a][0] * g[b][0] + g[a][1] * g[b][1];
                            kt.push((c[a], c[b], -dot / four_area));
                        }
                    }
                }
            }
        }
        let mass = CsrMatrix::from_triplets(n, n, &mt);
        let stiffness = CsrMatrix::from_triplets(n, n, &kt);
        let weights = mass.row_sums();
        Ok(Self { mass, stiffness, measure, weights })
    }

    pub fn n_nodes(&self) -> usize {
        self.weights.len()
    }

    /// Spatial average `(1ᵀ M f) / |Ω|`.
    pub fn average(&self, field: &[T]) -> Result<T> {
        if field.len() != self.n_nodes() {
            return Err(Error::InvalidArgument(format!(
                "field has length {}, mesh has {} nodes",
                field.len(),
                self.n_nodes()
            )));
        }
        let s = self.weights.iter().zip(field).fold(T::zero(), |a, (&w, &f)| a + w * f);
        Ok(s / self.measure)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense_cholesky_ok(m: &CsrMatrix<f64>) -> bool {
        let mut a = m.to_dense();
        let n = a.len();
        for j in 0..n {
            let mut d = a[j][j];
            for k in 0..j {
                d -= a[j][k] * a[j][k];
            }
            if d <= 0.0 {
                return false;
            }
            let d = d.sqrt();
            a[j][j] = d;
            for i in j + 1..n {
                let mut s = a[i][j];
                for k in 0..j {
                    s -= a[i][k] * a[j][k];
                }
                a[i][j] = s / d;
            }
        }
        true
    }

    #[test]
    fn interval_measure_and_neumann_compatibility() {
        let mesh = Mesh::<f64>::interval(5.0, 50).unwrap();
        let ops = Operators::assemble(&mesh).unwrap();
        let total: f64 = ops.weights.iter().sum();
        assert!((total - 10.0).abs() < 1e-12);
        assert!((ops.measure - 10.0).abs() < 1e-12);
        let k1 = ops.stiffness.mul_vec(&vec![1.0; 51]);
        assert!(k1.iter().all(|x| x.abs() < 1e-12));
        assert!(ops.mass.is_symmetric(0.0) && ops.stiffness.is_symmetric(1e-15));
    }

    #[test]
    fn linear_fields_are_harmonic_in_the_interior() {
        let mesh = Mesh::<f64>::interval(5.0, 50).unwrap();
        let ops = Operators::assemble(&mesh).unwrap();
        let r = ops.stiffness.mul_vec(&mesh.xs());
        for x in &r[1..50] {
            assert!(x.abs() < 1e-12);
        }
        // boundary rows carry the flux of u = x
        assert!((r[0] - 1.0).abs() < 1e-12 && (r[50] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rectangle_measure() {
        let mesh = Mesh::<f64>::rectangle(5.0, 40, 34).unwrap();
        let ops = Operators::assemble(&mesh).unwrap();
        let expect = 10.0 * 3f64.sqrt() * 5.0;
        assert!((ops.weights.iter().sum::<f64>() - expect).abs() < 1e-10);
        assert!((expect - 86.602_540_378).abs() < 1e-8);
        let k1 = ops.stiffness.mul_vec(&vec![1.0; mesh.n_nodes()]);
        assert!(k1.iter().all(|x| x.abs() < 1e-12));
        let ones_k: Vec<f64> = (0..mesh.n_nodes())
            .map(|j| (0..mesh.n_nodes()).map(|i| ops.stiffness.get(i, j)).sum())
            .collect();
        assert!(ones_k.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn mass_is_spd_and_stiffness_nsd_on_small_meshes() {
        for mesh in [Mesh::<f64>::interval(5.0, 7).unwrap(), Mesh::<f64>::rectangle(5.0, 4, 3).unwrap()] {
            let ops = Operators::assemble(&mesh).unwrap();
            assert!(dense_cholesky_ok(&ops.mass));
            // -K + eps M is SPD iff K is negative semidefinite (K has a one-dimensional kernel)
            let shifted = CsrMatrix::from_triplets(
                mesh.n_nodes(),
                mesh.n_nodes(),
                &ops.stiffness
                    .triplets()
                    .map(|(i, j, v)| (i, j, -v))
                    .chain(ops.mass.triplets().map(|(i, j, v)| (i, j, 1e-9 * v)))
                    .collect::<Vec<_>>(),
            );
            assert!(dense_cholesky_ok(&shifted));
        }
    }

    #[test]
    fn averages() {
        let mesh = Mesh::<f64>::interval(5.0, 200).unwrap();
        let ops = Operators::assemble(&mesh).unwrap();
        assert!((ops.average(&vec![3.5; 201]).unwrap() - 3.5).abs() < 1e-14);
        assert!(ops.average(&mesh.xs()).unwrap().abs() < 1e-14);
        // oracle: (1/10) ∫_{-5}^{5} x² dx = 25/3; nodal quadrature of the interpolant adds h²/6
        let sq: Vec<f64> = mesh.xs().iter().map(|x| x * x).collect();
        let h = 10.0 / 200.0;
        assert!((ops.average(&sq).unwrap() - (25.0 / 3.0 + h * h / 6.0)).abs() < 1e-12);
        assert!((ops.average(&sq).unwrap() - 25.0 / 3.0).abs() < 5e-4);
        assert!(matches!(ops.average(&[1.0, 2.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn single_precision_assembly() {
        let mesh = Mesh::<f32>::rectangle(5.0, 8, 6).unwrap();
        let ops = Operators::assemble(&mesh).unwrap();
        let expect = 10.0 * 3f32.sqrt() * 5.0;
        assert!((ops.measure - expect).abs() < 1e-3);
        assert!((ops.average(&vec![2.0f32; mesh.n_nodes()]).unwrap() - 2.0).abs() < 1e-5);
    }

    #[test]
    fn interpolation_error_is_second_order() {
        // ‖I_h u - u‖ at midpoints for u = sin(πx/L)
        let err = |nel: usize| {
            let mesh = Mesh::<f64>::interval(5.0, nel).unwrap();
            let xs = mesh.xs();
            let u = |x: f64| (std::f64::consts::PI * x / 5.0).sin();
            xs.windows(2)
                .map(|w| ((u(w[0]) + u(w[1])) / 2.0 - u((w[0] + w[1]) / 2.0)).abs())
                .fold(0.0, f64::max)
        };
        let rate = (err(20) / err(40)).log2();
        assert!((rate - 2.0).abs() < 0.1, "rate {rate}");
    }

    proptest! {
        #[test]
        fn average_is_linear_and_exact_for_affine(a in -10.0..10.0f64, b in -10.0..10.0f64, c in -3.0..3.0f64) {
            let mesh = Mesh::<f64>::rectangle(5.0, 6, 4).unwrap();
            let ops = Operators::assemble(&mesh).unwrap();
            let f = mesh.interpolate(|p| a + b * p[0] + c * p[1]);
            prop_assert!((ops.average(&f).unwrap() - a).abs() < 1e-10);
            let g = mesh.interpolate(|p| p[0] * p[0]);
            let fg: Vec<f64> = f.iter().zip(&g).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
            let lhs = ops.average(&fg).unwrap();
            let rhs = 2.0 * ops.average(&f).unwrap() - 0.5 * ops.average(&g).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
