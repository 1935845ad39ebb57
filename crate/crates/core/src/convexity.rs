//! Curvature of the relaxed waiting time `w(p, c)`.
//!
//! With `E(q) = 0` (the clamped branch, `c > 2p`):
//!
//! ```text
//! w_pp = (1 - c) / (c (1 - p)^3)
//! w_cc = 1 / (c^3 (1 - p))
//! w_pc = -1 / (2 c^2 (1 - p)^2)
//! ```
//!
//! The last expression is sometimes printed with `(1-p)2` in place of
//! `(1-p)^2`; the squared form is the one the finite-difference oracle agrees
//! with. With `E(q) > 0` (`c < 2p`):
//!
//! ```text
//! w_pp = (1 - c) [1/(c-p)^3 - 1/p^3 + 1/(c (1-p)^3)]
//! w_cc = (1 - p)/(c-p)^3 + 1/(c^3 (1 - p))
//! w_pc = -1/2 [(2 - p - c)/(c-p)^3 + 1/p^2 + 1/(c^2 (1-p)^2)]
//! ```
//!
//! Both diagonal terms are positive, but the Hessian can be indefinite, e.g.
//! at `(p, c) = (0.5, 0.9)`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{mean_waiting_time_relaxed, QueueBranch};

/// Smallest eigenvalue below `-PSD_TOLERANCE` means indefinite.
pub const PSD_TOLERANCE: f64 = 1e-10;

const KINK_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvatureReport {
    pub w_pp: f64,
    pub w_cc: f64,
    pub w_pc: f64,
    pub branch: QueueBranch,
    pub hessian_psd: bool,
    /// Ascending.
    pub eigenvalues: [f64; 2],
}

impl CurvatureReport {
    fn new(w_pp: f64, w_cc: f64, w_pc: f64, branch: QueueBranch) -> Self {
        let eigenvalues = symmetric_eigenvalues(w_pp, w_cc, w_pc);
        Self {
            w_pp,
            w_cc,
            w_pc,
            branch,
            hessian_psd: eigenvalues[0] >= -PSD_TOLERANCE,
            eigenvalues,
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }
}

fn symmetric_eigenvalues(a: f64, b: f64, off: f64) -> [f64; 2] {
    let mid = 0.5 * (a + b);
    let radius = (0.25 * (a - b).powi(2) + off * off).sqrt();
    [mid - radius, mid + radius]
}

fn check_open_domain(p: f64, c: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain("p", p, "0 < p < 1"));
    }
    if !(c > p && c <= 1.0) {
        return Err(Error::domain("c", c, "p < c <= 1"));
    }
    Ok(())
}

fn branch_at(p: f64, c: f64) -> QueueBranch {
    if c > 2.0 * p {
        QueueBranch::Clamped
    } else {
        QueueBranch::Unclamped
    }
}

/// First partial derivatives of the relaxed waiting time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayGradient {
    pub w_p: f64,
    pub w_c: f64,
    pub branch: QueueBranch,
}

impl DelayGradient {
    /// Derivatives in the `(p, d)` coordinates with `c = p + d`.
    pub fn in_rate_coordinates(&self) -> (f64, f64) {
        (self.w_p + self.w_c, self.w_c)
    }
}

/// Gradient of `w(p, c)`. On the kink `c = 2p` the unclamped branch's
/// one-sided gradient is returned.
pub fn first_derivatives(p: f64, c: f64) -> Result<DelayGradient> {
    check_open_domain(p, c)?;
    let q = 1.0 - p;
    let branch = branch_at(p, c);
    let (w_p, w_c) = match branch {
        QueueBranch::Clamped => ((1.0 - c) / (2.0 * c * q * q), -1.0 / (2.0 * c * c * q)),
        QueueBranch::Unclamped => {
            let gap = c - p;
            let bracket = 1.0 / gap - 1.0 / p + 1.0 / (c * q);
            let w_p = 0.5 * (1.0 - c) * (1.0 / (gap * gap) + 1.0 / (p * p) + 1.0 / (c * q * q));
            let w_c = -0.5 * bracket - 0.5 * (1.0 - c) * (1.0 / (gap * gap) + 1.0 / (c * c * q));
            (w_p, w_c)
        }
    };
    Ok(DelayGradient { w_p, w_c, branch })
}

/// Closed-form Hessian of `w(p, c)` off the kink.
pub fn second_derivatives(p: f64, c: f64) -> Result<CurvatureReport> {
    check_open_domain(p, c)?;
    if (c - 2.0 * p).abs() <= KINK_EPS {
        return Err(Error::Kink { p, c });
    }
    let q = 1.0 - p;
    let branch = branch_at(p, c);
    let report = match branch {
        QueueBranch::Clamped => CurvatureReport::new(
            (1.0 - c) / (c * q.powi(3)),
            1.0 / (c.powi(3) * q),
            -1.0 / (2.0 * c * c * q * q),
            branch,
        ),
        QueueBranch::Unclamped => {
            let gap3 = (c - p).powi(3);
            CurvatureReport::new(
                (1.0 - c) * (1.0 / gap3 - 1.0 / p.powi(3) + 1.0 / (c * q.powi(3))),
                q / gap3 + 1.0 / (c.powi(3) * q),
                -0.5 * ((2.0 - p - c) / gap3 + 1.0 / (p * p) + 1.0 / (c * c * q * q)),
                branch,
            )
        }
    };
    Ok(report)
}

/// Central-difference Hessian of `mean_waiting_time_relaxed`.
///
/// The nine-point stencil spans `c - 2p` by `+-3 step`, so it must stay that
/// far from the kink, and every stencil point must be inside the domain.
pub fn finite_difference_hessian(p: f64, c: f64, step: f64) -> Result<CurvatureReport> {
    if !(step > 0.0) {
        return Err(Error::domain("step", step, "> 0"));
    }
    check_open_domain(p, c)?;
    if (c - 2.0 * p).abs() <= 3.0 * step {
        return Err(Error::Straddle { p, c, step });
    }
    let h = step;
    let w = |dp: f64, dc: f64| mean_waiting_time_relaxed(p + dp, c + dc);
    let centre = w(0.0, 0.0)?;
    let w_pp = (w(h, 0.0)? - 2.0 * centre + w(-h, 0.0)?) / (h * h);
    let w_cc = (w(0.0, h)? - 2.0 * centre + w(0.0, -h)?) / (h * h);
    let w_pc = (w(h, h)? - w(h, -h)? - w(-h, h)? + w(-h, -h)?) / (4.0 * h * h);
    Ok(CurvatureReport::new(w_pp, w_cc, w_pc, branch_at(p, c)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScanPoint {
    pub p: f64,
    pub c: f64,
    pub w_pp: f64,
    pub w_cc: f64,
    pub w_pc: f64,
    pub min_eig: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityScan {
    pub min_w_pp: f64,
    pub min_w_cc: f64,
    /// Share of points whose Hessian has a negative eigenvalue.
    pub indefinite_fraction: f64,
    pub points: Vec<ScanPoint>,
}

/// Evaluates the closed-form Hessian on every grid point (in parallel).
pub fn scan_convexity(grid: &[(f64, f64)]) -> Result<ConvexityScan> {
    let points = grid
        .par_iter()
        .map(|&(p, c)| {
            second_derivatives(p, c).map(|r| ScanPoint {
                p,
                c,
                w_pp: r.w_pp,
                w_cc: r.w_cc,
                w_pc: r.w_pc,
                min_eig: r.min_eigenvalue(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let min_w_pp = points.iter().map(|s| s.w_pp).fold(f64::INFINITY, f64::min);
    let min_w_cc = points.iter().map(|s| s.w_cc).fold(f64::INFINITY, f64::min);
    let indefinite = points.iter().filter(|s| s.min_eig < -PSD_TOLERANCE).count();
    let indefinite_fraction = if points.is_empty() {
        0.0
    } else {
        indefinite as f64 / points.len() as f64
    };
    Ok(ConvexityScan {
        min_w_pp,
        min_w_cc,
        indefinite_fraction,
        points,
    })
}

/// `n x n` grid with `p` uniform on `[p_lo, p_hi]` and, per row, `c` uniform
/// on `[p + gap, 1]`. Points within `kink_guard` of `c = 2p` are dropped.
pub fn uniform_grid(n: usize, p_lo: f64, p_hi: f64, gap: f64, kink_guard: f64) -> Vec<(f64, f64)> {
    let lerp = |lo: f64, hi: f64, i: usize| {
        if n == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    let mut grid = Vec::with_capacity(n * n);
    for i in 0..n {
        let p = lerp(p_lo, p_hi, i);
        let c_lo = p + gap;
        if c_lo > 1.0 {
            continue;
        }
        for j in 0..n {
            let c = lerp(c_lo, 1.0, j).min(1.0);
            if (c - 2.0 * p).abs() > kink_guard {
                grid.push((p, c));
            }
        }
    }
    grid
}

/// Discrete second differences of `p -> w(p, p + d)` on an evenly spaced
/// `p` grid (spacing taken from the first two points).
pub fn line_second_differences(d: f64, ps: &[f64]) -> Result<Vec<f64>> {
    let values = ps
        .iter()
        .map(|&p| mean_waiting_time_relaxed(p, p + d))
        .collect::<Result<Vec<_>>>()?;
    Ok(values.windows(3).map(|v| v[0] - 2.0 * v[1] + v[2]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn counterexample_point_is_indefinite() {
        let r = second_derivatives(0.5, 0.9).unwrap();
        assert_eq!(r.branch, QueueBranch::Unclamped);
        assert!(!r.hessian_psd);
        assert!(r.w_pp > 0.0 && r.w_cc > 0.0);
        let fd = finite_difference_hessian(0.5, 0.9, 1e-4).unwrap();
        assert!(fd.min_eigenvalue() < 0.0);
    }

    #[test]
    fn clamped_branch_value() {
        let r = second_derivatives(0.1, 0.5).unwrap();
        assert_eq!(r.branch, QueueBranch::Clamped);
        assert_relative_eq!(r.w_pp, 0.5 / (0.5 * 0.729), max_relative = 1e-12);
        assert!((r.w_pp - 1.3717).abs() < 1e-4);
        assert!(r.w_pc < 0.0);
    }

    #[test]
    fn closed_forms_agree_with_finite_differences() {
        for &(p, c) in &[(0.1, 0.5), (0.3, 0.4), (0.5, 0.9), (0.05, 0.95), (0.7, 0.8)] {
            let exact = second_derivatives(p, c).unwrap();
            let fd = finite_difference_hessian(p, c, 1e-4).unwrap();
            assert_relative_eq!(exact.w_pp, fd.w_pp, max_relative = 1e-3);
            assert_relative_eq!(exact.w_cc, fd.w_cc, max_relative = 1e-3);
            assert_relative_eq!(exact.w_pc, fd.w_pc, max_relative = 1e-3);
        }
    }

    #[test]
    fn printed_clamped_cross_term_would_fail_the_oracle() {
        // Reading "(1-p)2" as 2(1-p) instead of (1-p)^2.
        let (p, c) = (0.2, 0.6);
        let misread = -1.0 / (2.0 * c * c * (1.0 - p) * 2.0);
        let fd = finite_difference_hessian(p, c, 1e-4).unwrap();
        assert!(((misread - fd.w_pc) / fd.w_pc).abs() > 0.1);
        assert_relative_eq!(second_derivatives(p, c).unwrap().w_pc, fd.w_pc, max_relative = 1e-3);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = 1e-6;
        for &(p, c) in &[(0.1, 0.5), (0.3, 0.4), (0.474, 0.5), (0.2, 0.99)] {
            let g = first_derivatives(p, c).unwrap();
            let w = |p: f64, c: f64| mean_waiting_time_relaxed(p, c).unwrap();
            let fd_p = (w(p + h, c) - w(p - h, c)) / (2.0 * h);
            let fd_c = (w(p, c + h) - w(p, c - h)) / (2.0 * h);
            assert_relative_eq!(g.w_p, fd_p, max_relative = 1e-5);
            assert_relative_eq!(g.w_c, fd_c, max_relative = 1e-5);
        }
    }

    #[test]
    fn kink_uses_unclamped_gradient() {
        let g = first_derivatives(0.25, 0.5).unwrap();
        assert_eq!(g.branch, QueueBranch::Unclamped);
        assert!(matches!(second_derivatives(0.25, 0.5), Err(Error::Kink { .. })));
    }

    #[test]
    fn straddle_and_domain_errors() {
        assert!(matches!(finite_difference_hessian(0.45, 0.9, 0.1), Err(Error::Straddle { .. })));
        assert!(matches!(second_derivatives(0.5, 0.4), Err(Error::Domain { .. })));
        assert!(matches!(finite_difference_hessian(0.1, 1.0, 1e-4), Err(Error::Domain { .. })));
    }

    #[test]
    fn grid_scan() {
        let grid = uniform_grid(50, 0.05, 0.9, 0.02, 1e-6);
        let scan = scan_convexity(&grid).unwrap();
        // w_pp vanishes on c = 1.
        assert!(scan.min_w_pp >= 0.0);
        assert!(scan.min_w_cc > 0.0);

        let mut with_counterexample = grid.clone();
        with_counterexample.push((0.5, 0.9));
        assert!(scan_convexity(&with_counterexample).unwrap().indefinite_fraction > 0.0);

        let clamped: Vec<_> = grid.iter().copied().filter(|&(p, c)| c > 2.0 * p && c < 1.0).collect();
        let scan = scan_convexity(&clamped).unwrap();
        assert!(scan.points.iter().all(|s| s.w_pp > 0.0 && s.w_cc > 0.0 && s.w_pc < 0.0));
    }

    #[test]
    fn along_fixed_dummy_rate_convexity_depends_on_branch() {
        // With the backlog term inactive the slice is convex for small d...
        let d = 0.3;
        let ps: Vec<f64> = (0..400).map(|i| 0.001 + i as f64 * 0.296 / 399.0).collect();
        let diffs = line_second_differences(d, &ps).unwrap();
        assert!(diffs.iter().all(|&v| v > 0.0));
        // ...but not in general: c^2(1-c) - c(1-p) + (1-p)^2 < 0 here.
        let (p, d) = (0.4, 0.5);
        let c = p + d;
        assert!(c * c * (1.0 - c) - c * (1.0 - p) + (1.0 - p) * (1.0 - p) < 0.0);
        let h = 1e-3;
        let diffs = line_second_differences(d, &[p - h, p, p + h]).unwrap();
        assert!(diffs[0] < 0.0);
        // Once the backlog term is active the 1/(c-p)^3 terms cancel along
        // the slice and the remainder is negative: concave, not convex.
        let d = 0.1;
        let ps: Vec<f64> = (0..50).map(|i| 0.3 + i as f64 * 1e-3).collect();
        let diffs = line_second_differences(d, &ps).unwrap();
        assert!(diffs.iter().all(|&v| v < 0.0));
    }
}
