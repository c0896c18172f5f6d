//! Indifference (Skiba) points on a line of initial states between two saddle point CSS.
//!
//! The initial states are `(v, w)_α = α (v, w)_B + (1 - α) (v, w)_A`. Paths to `A` are swept
//! upward in `α` and paths to `B` downward, each warm-started from its previous solution, and the
//! sign change of `g(α) = J_{→A}(α) - J_{→B}(α)` is bisected.

use serde::{Deserialize, Serialize};

use crate::bvp::{connect, continue_initial_state, CanonicalPath, PathOptions};
use crate::error::{Error, Result};
use crate::steady::CssPoint;
use crate::Operators;

#[derive(Debug, Clone)]
pub struct SkibaOptions {
    pub range: (f64, f64),
    /// Number of grid intervals in `range` for the initial sweep.
    pub grid: usize,
    /// Accepted `|J_{→A} - J_{→B}|` at the returned `α*`.
    pub tol: f64,
    /// Bisection stops once the bracket is shorter than this, even if `|g| > tol`.
    pub alpha_tol: f64,
    pub path: PathOptions,
}

impl Default for SkibaOptions {
    fn default() -> Self {
        Self { range: (0.0, 1.0), grid: 20, tol: 0.1, alpha_tol: 1e-4, path: PathOptions::default() }
    }
}

/// One sample of both path families; `None` where no path was found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkibaSample {
    pub alpha: f64,
    pub j_a: Option<f64>,
    pub j_b: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SkibaResult {
    pub alpha: f64,
    pub j_a: f64,
    pub j_b: f64,
    /// `|j_a - j_b|`
    pub gap: f64,
    /// Final bracket of the sign change.
    pub bracket: (f64, f64),
    pub path_a: CanonicalPath,
    pub path_b: CanonicalPath,
    /// Grid sweep and bisection samples, sorted in `α`.
    pub samples: Vec<SkibaSample>,
    /// `α` ranges where paths to `A` and to `B` were found during the sweep.
    pub range_a: (f64, f64),
    pub range_b: (f64, f64),
}

#[derive(Serialize)]
struct Manifest<'a> {
    alpha: f64,
    j_a: f64,
    j_b: f64,
    gap: f64,
    bracket: (f64, f64),
    range_a: (f64, f64),
    range_b: (f64, f64),
    mismatch_a: f64,
    mismatch_b: f64,
    samples: &'a [SkibaSample],
}

impl SkibaResult {
    /// CSV `alpha,J_A,J_B` with empty fields where a path is missing.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,J_A,J_B\n");
        let f = |x: Option<f64>| x.map(|v| format!("{v:.17e}")).unwrap_or_default();
        for smp in &self.samples {
            s.push_str(&format!("{:.17e},{},{}\n", smp.alpha, f(smp.j_a), f(smp.j_b)));
        }
        s
    }

    pub fn manifest_json(&self) -> Result<String> {
        let m = Manifest {
            alpha: self.alpha,
            j_a: self.j_a,
            j_b: self.j_b,
            gap: self.gap,
            bracket: self.bracket,
            range_a: self.range_a,
            range_b: self.range_b,
            mismatch_a: self.path_a.mismatch,
            mismatch_b: self.path_b.mismatch,
            samples: &self.samples,
        };
        Ok(serde_json::to_string_pretty(&m)?)
    }
}

/// `α (v, w)_B + (1 - α) (v, w)_A`.
pub fn blend_initial(a: &CssPoint, b: &CssPoint, alpha: f64) -> Vec<f64> {
    let n2 = 2 * a.n_nodes();
    (0..n2).map(|i| alpha * b.u[i] + (1.0 - alpha) * a.u[i]).collect()
}

fn require_saddle(css: &CssPoint, ops: &Operators) -> Result<()> {
    let mut c = css.clone();
    match c.ensure_defect(ops)? {
        0 => Ok(()),
        d => Err(Error::DefectiveTarget { defect: d }),
    }
}

/// Sweeps one family over `alphas` in the given order, stopping at the first failure.
fn sweep(
    target: &CssPoint,
    a: &CssPoint,
    b: &CssPoint,
    alphas: &[f64],
    ops: &Operators,
    opts: &PathOptions,
) -> Vec<(f64, CanonicalPath)> {
    let mut out: Vec<(f64, CanonicalPath)> = Vec::new();
    for &al in alphas {
        let init = blend_initial(a, b, al);
        let next = match out.last() {
            Some((_, prev)) => continue_initial_state(prev, &init, ops, opts),
            None => connect(&init, target, ops, opts),
        };
        match next {
            Ok(p) => out.push((al, p)),
            Err(_) => break,
        }
    }
    out
}

fn nearest(family: &[(f64, CanonicalPath)], alpha: f64) -> &CanonicalPath {
    let k = (0..family.len())
        .min_by(|&i, &j| (family[i].0 - alpha).abs().total_cmp(&(family[j].0 - alpha).abs()))
        .unwrap();
    &family[k].1
}

/// Locates `α*` with `|J_{→A}(α*) - J_{→B}(α*)| ≤ tol`.
///
/// Both targets must have defect 0. Where a family has no path, the sweep range of that family
/// shrinks and the samples record `None`; [`Error::NoSkiba`] is returned when `g` has no sign
/// change on the common range.
pub fn find_skiba(a: &CssPoint, b: &CssPoint, ops: &Operators, opts: &SkibaOptions) -> Result<SkibaResult> {
    let (lo, hi) = opts.range;
    if !(lo < hi) || opts.grid == 0 || !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("skiba needs lo < hi, grid > 0 and tol > 0".into()));
    }
    if a.u.len() != b.u.len() {
        return Err(Error::InvalidArgument("targets live on different meshes".into()));
    }
    require_saddle(a, ops)?;
    require_saddle(b, ops)?;
    let grid: Vec<f64> = (0..=opts.grid).map(|k| lo + (hi - lo) * k as f64 / opts.grid as f64).collect();
    let mut fam_a = sweep(a, a, b, &grid, ops, &opts.path);
    let rev: Vec<f64> = grid.iter().rev().copied().collect();
    let mut fam_b = sweep(b, a, b, &rev, ops, &opts.path);
    let span = |f: &[(f64, CanonicalPath)]| -> (f64, f64) {
        f.iter().fold((f64::NAN, f64::NAN), |(l, h), (al, _)| (l.min(*al), h.max(*al)))
    };
    let range_a = span(&fam_a);
    let range_b = span(&fam_b);

    let mut samples: Vec<SkibaSample> = grid
        .iter()
        .map(|&al| SkibaSample {
            alpha: al,
            j_a: fam_a.iter().find(|(x, _)| *x == al).map(|(_, p)| p.value()),
            j_b: fam_b.iter().find(|(x, _)| *x == al).map(|(_, p)| p.value()),
        })
        .collect();
    let both: Vec<(f64, f64)> =
        samples.iter().filter_map(|s| Some((s.alpha, s.j_a? - s.j_b?))).collect();
    let bracket = both.windows(2).find(|w| w[0].1 == 0.0 || w[0].1.signum() != w[1].1.signum());
    let Some(w) = bracket else {
        let (l, h) = both.first().zip(both.last()).map(|(x, y)| (x.0, y.0)).unwrap_or((lo, hi));
        return Err(Error::NoSkiba { lo: l, hi: h });
    };
    let (mut x0, mut g0) = w[0];
    let (mut x1, _) = w[1];

    let eval = |al: f64, fa: &[(f64, CanonicalPath)], fb: &[(f64, CanonicalPath)]| -> Result<(CanonicalPath, CanonicalPath)> {
        let pa = continue_initial_state(nearest(fa, al), &blend_initial(a, b, al), ops, &opts.path)?;
        let pb = continue_initial_state(nearest(fb, al), &blend_initial(a, b, al), ops, &opts.path)?;
        Ok((pa, pb))
    };
    let pick = |x: f64, fa: &[(f64, CanonicalPath)], fb: &[(f64, CanonicalPath)]| {
        (nearest(fa, x).clone(), nearest(fb, x).clone())
    };
    let (mut best_a, mut best_b) = pick(x0, &fam_a, &fam_b);
    let mut alpha = x0;
    if g0 != 0.0 {
        loop {
            let mid = 0.5 * (x0 + x1);
            let (pa, pb) = eval(mid, &fam_a, &fam_b)?;
            let g = pa.value() - pb.value();
            samples.push(SkibaSample { alpha: mid, j_a: Some(pa.value()), j_b: Some(pb.value()) });
            fam_a.push((mid, pa.clone()));
            fam_b.push((mid, pb.clone()));
            alpha = mid;
            best_a = pa;
            best_b = pb;
            if g.signum() == g0.signum() {
                x0 = mid;
                g0 = g;
            } else {
                x1 = mid;
            }
            if g.abs() <= opts.tol || x1 - x0 <= opts.alpha_tol {
                break;
            }
        }
    }
    samples.sort_by(|p, q| p.alpha.total_cmp(&q.alpha));
    let (j_a, j_b) = (best_a.value(), best_b.value());
    Ok(SkibaResult {
        alpha,
        j_a,
        j_b,
        gap: (j_a - j_b).abs(),
        bracket: (x0, x1),
        path_a: best_a,
        path_b: best_b,
        samples,
        range_a,
        range_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::newton::NewtonOptions;
    use crate::steady::solve_flat_css;
    use crate::{Mesh, ParameterSet};

    fn flat(r: f64, guess: [f64; 4], ops: &Operators) -> CssPoint {
        solve_flat_css(&ParameterSet::default().with_rain(r), guess, ops, &NewtonOptions::default()).unwrap()
    }

    #[test]
    fn blend_endpoints() {
        let ops = Operators::assemble(&Mesh::interval(5.0, 10).unwrap()).unwrap();
        let a = flat(28.0, [376.0, 9.25, 0.58, 1.09], &ops);
        let mut b = a.clone();
        b.u.iter_mut().for_each(|x| *x *= 2.0);
        let n = ops.n_nodes();
        assert_eq!(blend_initial(&a, &b, 0.0), a.u[..2 * n].to_vec());
        assert_eq!(blend_initial(&a, &b, 1.0), b.u[..2 * n].to_vec());
        let mid = blend_initial(&a, &b, 0.5);
        assert!((mid[0] - 1.5 * a.u[0]).abs() < 1e-12);
    }

    #[test]
    fn identical_targets_are_indifferent() {
        let ops = Operators::assemble(&Mesh::interval(5.0, 8).unwrap()).unwrap();
        let a = flat(28.0, [376.0, 9.25, 0.58, 1.09], &ops);
        let opts = SkibaOptions { grid: 2, path: PathOptions { nodes: 20, ..Default::default() }, ..Default::default() };
        let r = find_skiba(&a, &a, &ops, &opts).unwrap();
        assert_eq!(r.gap, 0.0);
        assert_eq!(r.samples.len(), 3);
        assert!(r.to_csv().lines().count() == 4);
    }

    #[test]
    fn bad_range_is_rejected() {
        let ops = Operators::assemble(&Mesh::interval(5.0, 8).unwrap()).unwrap();
        let a = flat(28.0, [376.0, 9.25, 0.58, 1.09], &ops);
        let opts = SkibaOptions { range: (0.5, 0.5), ..Default::default() };
        assert!(matches!(find_skiba(&a, &a, &ops, &opts), Err(Error::InvalidArgument(_))));
    }
}
