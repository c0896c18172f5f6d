use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Geometry the mesh was generated for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    /// `(-half_length, half_length)`.
    Interval { half_length: f64, elements: usize },
    /// `(-half_length, half_length) x (-sqrt(3)/2 half_length, sqrt(3)/2 half_length)`.
    Rectangle { half_length: f64, nx: usize, ny: usize },
    /// Imported from a node/element listing.
    Unstructured,
}

/// Linear-element mesh in one or two space dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh<T> {
    dim: usize,
    /// `dim` coordinates per node.
    coords: Vec<T>,
    /// `dim + 1` node indices per element.
    cells: Vec<usize>,
    domain: Domain,
}

impl<T: Scalar> Mesh<T> {
    /// Equispaced interval mesh on `[-half_length, half_length]`.
    pub fn interval(half_length: T, elements: usize) -> Result<Self> {
        if !(half_length > T::zero()) || elements == 0 {
            return Err(Error::InvalidArgument(format!(
                "interval mesh needs L > 0 and at least one element (L = {half_length}, n_el = {elements})"
            )));
        }
        let n = elements + 1;
        let h = (half_length + half_length) / T::from_usize(elements).unwrap();
        let coords = (0..n)
            .map(|i| {
                if i == elements {
                    half_length
                } else {
                    -half_length + h * T::from_usize(i).unwrap()
                }
            })
            .collect();
        let cells = (0..elements).flat_map(|e| [e, e + 1]).collect();
        Ok(Self {
            dim: 1,
            coords,
            cells,
            domain: Domain::Interval { half_length: half_length.to_f64_lossy(), elements },
        })
    }

    /// Structured triangulation of `(-L, L) x (-sqrt(3) L/2, sqrt(3) L/2)`.
    ///
    /// Cell diagonals alternate in a checkerboard pattern, so for even `nx`, `ny` the mesh is
    /// mirror symmetric about both axes.
    pub fn rectangle(half_length: T, nx: usize, ny: usize) -> Result<Self> {
        if !(half_length > T::zero()) || nx == 0 || ny == 0 {
            return Err(Error::InvalidArgument(format!(
                "rectangle mesh needs L > 0 and nx, ny >= 1 (L = {half_length}, nx = {nx}, ny = {ny})"
            )));
        }
        let two = T::lit(2.0);
        let ly = T::lit(3.0).sqrt() * half_length / two;
        let hx = two * half_length / T::from_usize(nx).unwrap();
        let hy = two * ly / T::from_usize(ny).unwrap();
        let mut coords = Vec::with_capacity(2 * (nx + 1) * (ny + 1));
        for j in 0..=ny {
            let y = if j == ny { ly } else { -ly + hy * T::from_usize(j).unwrap() };
            for i in 0..=nx {
                let x = if i == nx { half_length } else { -half_length + hx * T::from_usize(i).unwrap() };
                coords.push(x);
                coords.push(y);
            }
        }
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let mut cells = Vec::with_capacity(6 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
                if (i + j) % 2 == 0 {
                    cells.extend_from_slice(&[a, b, c, a, c, d]);
                } else {
                    cells.extend_from_slice(&[a, b, d, b, c, d]);
                }
            }
        }
        Ok(Self {
            dim: 2,
            coords,
            cells,
            domain: Domain::Rectangle { half_length: half_length.to_f64_lossy(), nx, ny },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len() / (self.dim + 1)
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn node(&self, i: usize) -> &[T] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cell(&self, e: usize) -> &[usize] {
        let k = self.dim + 1;
        &self.cells[e * k..(e + 1) * k]
    }

    /// First coordinate of every node.
    pub fn xs(&self) -> Vec<T> {
        (0..self.n_nodes()).map(|i| self.node(i)[0]).collect()
    }

    /// Signed measure of element `e` (length in 1D, area in 2D).
    pub fn cell_measure(&self, e: usize) -> T {
        let c = self.cell(e);
        match self.dim {
            1 => self.node(c[1])[0] - self.node(c[0])[0],
            _ => {
                let (p0, p1, p2) = (self.node(c[0]), self.node(c[1]), self.node(c[2]));
                ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])) / T::lit(2.0)
            }
        }
    }

    /// Evaluates `f` at every node.
    pub fn interpolate(&self, f: impl Fn(&[T]) -> T) -> Vec<T> {
        (0..self.n_nodes()).map(|i| f(self.node(i))).collect()
    }

    /// Node permutation realizing the mirror image `x -> -x`, if the mesh is structured.
    pub fn mirror_x(&self) -> Option<Vec<usize>> {
        match self.domain {
            Domain::Interval { elements, .. } => Some((0..=elements).rev().collect()),
            Domain::Rectangle { nx, ny, .. } => Some(
                (0..=ny).flat_map(|j| (0..=nx).rev().map(move |i| j * (nx + 1) + i)).collect(),
            ),
            Domain::Unstructured => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 1 {
            for w in self.coords.windows(2) {
                if !(w[1] > w[0]) {
                    return Err(Error::InvalidArgument("1D nodes must be strictly increasing".into()));
                }
            }
        }
        for e in 0..self.n_cells() {
            let m = self.cell_measure(e);
            if !(m > T::zero()) {
                return Err(Error::DegenerateElement { element: e, measure: m.to_f64_lossy() });
            }
        }
        Ok(())
    }

    /// Plain text listing: a `dim n_nodes n_cells` header, one node per line, one element per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {} {}", self.dim, self.n_nodes(), self.n_cells());
        for i in 0..self.n_nodes() {
            let line: Vec<String> =
                self.node(i).iter().map(|x| format!("{:.17e}", x.to_f64_lossy())).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        for e in 0..self.n_cells() {
            let line: Vec<String> = self.cell(e).iter().map(|i| i.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader
            .lines()
            .enumerate()
            .map(|(i, l)| l.map(|l| (i + 1, l)))
            .filter(|r| r.as_ref().map_or(true, |(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#')));
        let perr = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };

        let (ln, header) = lines.next().ok_or_else(|| perr(0, "empty mesh file"))??;
        let head: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| perr(ln, "bad header")))
            .collect::<Result<_>>()?;
        let [dim, n, ncell] = head[..] else { return Err(perr(ln, "header must be `dim nodes cells`")) };
        if dim != 1 && dim != 2 {
            return Err(perr(ln, "dimension must be 1 or 2"));
        }
        let mut coords = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let (ln, l) = lines.next().ok_or_else(|| perr(0, "truncated node list"))??;
            let xs: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| perr(ln, "bad coordinate")))
                .collect::<Result<_>>()?;
            if xs.len() != dim {
                return Err(perr(ln, "wrong coordinate count"));
            }
            coords.extend(xs.into_iter().map(T::lit));
        }
        let mut cells = Vec::with_capacity(ncell * (dim + 1));
        for _ in 0..ncell {
            let (ln, l) = lines.next().ok_or_else(|| perr(0, "truncated element list"))??;
            let ids: Vec<usize> = l
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| perr(ln, "bad node index")))
                .collect::<Result<_>>()?;
            if ids.len() != dim + 1 || ids.iter().any(|&i| i >= n) {
                return Err(perr(ln, "bad element record"));
            }
            cells.extend(ids);
        }
        let mesh = Self { dim, coords, cells, domain: Domain::Unstructured };
        mesh.validate()?;
        Ok(mesh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_nodes() {
        let m = Mesh::<f64>::interval(5.0, 2).unwrap();
        assert_eq!(m.xs(), vec![-5.0, 0.0, 5.0]);
        let m = Mesh::<f64>::interval(5.0, 50).unwrap();
        assert_eq!(m.n_nodes(), 51);
        for w in m.xs().windows(2) {
            assert!((w[1] - w[0] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_arguments() {
        assert!(matches!(Mesh::<f64>::interval(0.0, 4), Err(Error::InvalidArgument(_))));
        assert!(matches!(Mesh::<f64>::interval(5.0, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(Mesh::<f64>::rectangle(-1.0, 3, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(Mesh::<f64>::rectangle(5.0, 0, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn minimal_rectangle() {
        let m = Mesh::<f64>::rectangle(5.0, 1, 1).unwrap();
        assert_eq!(m.n_nodes(), 4);
        assert_eq!(m.n_cells(), 2);
        m.validate().unwrap();
        let m = Mesh::<f64>::rectangle(5.0, 6, 4).unwrap();
        assert_eq!(m.n_nodes(), 7 * 5);
        m.validate().unwrap();
    }

    #[test]
    fn mirror_maps_nodes_onto_nodes() {
        let m = Mesh::<f64>::rectangle(5.0, 4, 6).unwrap();
        let perm = m.mirror_x().unwrap();
        for (i, &j) in perm.iter().enumerate() {
            assert!((m.node(i)[0] + m.node(j)[0]).abs() < 1e-12);
            assert!((m.node(i)[1] - m.node(j)[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn text_round_trip() {
        let m = Mesh::<f64>::rectangle(5.0, 3, 2).unwrap();
        let back = Mesh::<f64>::from_text(m.to_text().as_bytes()).unwrap();
        assert_eq!(back.coords, m.coords);
        assert_eq!(back.cells, m.cells);
        assert!(Mesh::<f64>::from_text("1 2 1\n0.0\n1.0\n0 5\n".as_bytes()).is_err());
        assert!(matches!(
            Mesh::<f64>::from_text("1 2 1\n1.0\n0.0\n0 1\n".as_bytes()),
            Err(Error::InvalidArgument(_)) | Err(Error::DegenerateElement { .. })
        ));
    }
}
