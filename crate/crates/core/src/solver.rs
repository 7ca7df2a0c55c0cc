//! Local nearest-point solvers.
//!
//! Given a query `x` and a start on (or near) a manifold, these routines
//! find a stationary point of `p -> |x - p|^2 / 2` restricted to the
//! manifold. Global optimality is the caller's concern (multi-start).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::field::SmoothMap;
use crate::linalg::{complement, lstsq, solve};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iter: usize,
    pub residual_tol: f64,
    pub step_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iter: 100, residual_tol: 1e-10, step_tol: 1e-12 }
    }
}

/// Where a point sits in a parametric patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub patch: usize,
    pub params: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct LocalSolution {
    pub point: DVector<f64>,
    pub chart: Option<Chart>,
    /// Tangential component of `x - p` plus scaled constraint violation.
    pub residual: f64,
    /// Smallest eigenvalue of the reduced Hessian of the distance at the
    /// solution: positive at strict local minima, zero on the medial axis.
    pub curvature: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Scaled constraint violation `max_i |F_i| / max(1, |grad F_i|)`.
pub fn scaled_violation(value: &DVector<f64>, jacobian: &DMatrix<f64>) -> f64 {
    value.iter().enumerate().map(|(i, v)| v.abs() / jacobian.row(i).norm().max(1.0)).fold(0.0, f64::max)
}

/// Pull `start` onto `{F = 0}` with minimum-norm Gauss-Newton steps.
pub fn foot_point(f: &dyn SmoothMap, start: &DVector<f64>, cfg: &SolverConfig) -> Option<DVector<f64>> {
    let mut p = start.clone();
    let mut value = f.eval(p.as_slice());
    for _ in 0..cfg.max_iter {
        let jac = f.jacobian(p.as_slice());
        if scaled_violation(&value, &jac) < 1e-14 {
            return Some(p);
        }
        let step = lstsq(&jac, &(-&value))?;
        let mut alpha = 1.0;
        let base = value.norm();
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &p + &step * alpha;
            let tv = f.eval(trial.as_slice());
            if tv.norm() < base || tv.norm() < 1e-15 {
                let moved = (&trial - &p).norm();
                p = trial;
                value = tv;
                accepted = true;
                if moved < 1e-16 * (1.0 + p.norm()) {
                    let jac = f.jacobian(p.as_slice());
                    return (scaled_violation(&value, &jac) < 1e-12).then_some(p);
                }
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            let jac = f.jacobian(p.as_slice());
            return (scaled_violation(&value, &jac) < 1e-12).then_some(p);
        }
    }
    let jac = f.jacobian(p.as_slice());
    (scaled_violation(&value, &jac) < 1e-12).then_some(p)
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

struct KktState {
    value: DVector<f64>,
    jac: DMatrix<f64>,
    hessians: Vec<DMatrix<f64>>,
}

impl KktState {
    fn at(f: &dyn SmoothMap, p: &DVector<f64>) -> Self {
        let so = f.second_order(p.as_slice());
        Self { value: so.value, jac: so.jacobian, hessians: so.hessians }
    }

    /// Least-squares multipliers for `J^T lambda = x - p`.
    fn multipliers(&self, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        lstsq(&self.jac.transpose(), &(x - p)).unwrap_or_else(|| DVector::zeros(self.jac.nrows()))
    }

    fn residual(&self, x: &DVector<f64>, p: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        let n = p.len();
        let k = self.value.len();
        let stat = p - x + self.jac.transpose() * lambda;
        let mut g = DVector::zeros(n + k);
        g.rows_mut(0, n).copy_from(&stat);
        g.rows_mut(n, k).copy_from(&self.value);
        g
    }

    fn lagrangian_hessian(&self, lambda: &DVector<f64>) -> DMatrix<f64> {
        let n = self.jac.ncols();
        let mut w = DMatrix::identity(n, n);
        for (l, h) in lambda.iter().zip(&self.hessians) {
            w += h * *l;
        }
        w
    }

    fn tangent_basis(&self) -> DMatrix<f64> {
        let (rows, _) = crate::linalg::column_space(&self.jac.transpose());
        complement(&rows)
    }

    /// Orthogonality residual at optimal multipliers plus feasibility.
    fn measure(&self, x: &DVector<f64>, p: &DVector<f64>) -> f64 {
        let lambda = self.multipliers(x, p);
        let stat = p - x + self.jac.transpose() * lambda;
        stat.norm() + scaled_violation(&self.value, &self.jac)
    }
}

/// Newton's method on the stationarity system `p - x + J(p)^T lambda = 0,
/// F(p) = 0`, falling back to Gauss-Newton steps (Lagrangian Hessian
/// replaced by the identity) when the reduced Hessian is not positive.
pub fn project_implicit(
    f: &dyn SmoothMap,
    x: &DVector<f64>,
    start: &DVector<f64>,
    cfg: &SolverConfig,
) -> LocalSolution {
    let n = x.len();
    let fail = |p: DVector<f64>, it: usize| LocalSolution {
        point: p,
        chart: None,
        residual: f64::INFINITY,
        curvature: f64::NAN,
        iterations: it,
        converged: false,
    };
    let mut p = match foot_point(f, start, cfg) {
        Some(p) => p,
        None => return fail(start.clone(), 0),
    };
    let mut state = KktState::at(f, &p);
    let mut lambda = state.multipliers(x, &p);
    let mut polished = 0;
    for it in 0..cfg.max_iter {
        let g = state.residual(x, &p, &lambda);
        let measure = state.measure(x, &p);
        if measure < cfg.residual_tol {
            // Two extra Newton steps push the iterate to machine precision.
            polished += 1;
            if polished > 2 {
                return finish(&state, x, p, it);
            }
        }
        let k = state.value.len();
        let newton_w = state.lagrangian_hessian(&lambda);
        let z = state.tangent_basis();
        let reduced = min_eigenvalue(&(z.transpose() * &newton_w * &z));
        let mut candidates = Vec::with_capacity(2);
        if reduced > 1e-8 {
            candidates.push(newton_w);
        }
        candidates.push(DMatrix::identity(n, n));
        let base = g.norm();
        let mut moved = None;
        for w in candidates {
            let mut kkt = DMatrix::zeros(n + k, n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&w);
            kkt.view_mut((0, n), (n, k)).copy_from(&state.jac.transpose());
            kkt.view_mut((n, 0), (k, n)).copy_from(&state.jac);
            let Some(step) = solve(&kkt, &(-&g)) else { continue };
            let dp = step.rows(0, n).into_owned();
            let dl = step.rows(n, k).into_owned();
            let mut alpha = 1.0;
            for _ in 0..30 {
                let tp = &p + &dp * alpha;
                let tl = &lambda + &dl * alpha;
                let ts = KktState::at(f, &tp);
                let tg = ts.residual(x, &tp, &tl);
                if tg.norm() < (1.0 - 1e-4 * alpha) * base || tg.norm() < 1e-15 {
                    moved = Some((tp, tl, ts, (&dp * alpha).norm()));
                    break;
                }
                alpha *= 0.5;
            }
            if moved.is_some() {
                break;
            }
        }
        match moved {
            Some((tp, tl, ts, len)) => {
                p = tp;
                lambda = tl;
                state = ts;
                if len < cfg.step_tol * (1.0 + p.norm()) {
                    let m = state.measure(x, &p);
                    if m < cfg.residual_tol {
                        return finish(&state, x, p, it + 1);
                    }
                    return LocalSolution { residual: m, ..fail(p, it + 1) };
                }
            }
            None => {
                let m = state.measure(x, &p);
                if m < cfg.residual_tol {
                    return finish(&state, x, p, it + 1);
                }
                return LocalSolution { residual: m, ..fail(p, it + 1) };
            }
        }
    }
    let m = state.measure(x, &p);
    if m < cfg.residual_tol {
        return finish(&state, x, p, cfg.max_iter);
    }
    LocalSolution { residual: m, ..fail(p, cfg.max_iter) }
}

fn finish(state: &KktState, x: &DVector<f64>, p: DVector<f64>, iterations: usize) -> LocalSolution {
    let lambda = state.multipliers(x, &p);
    let w = state.lagrangian_hessian(&lambda);
    let z = state.tangent_basis();
    let curvature = min_eigenvalue(&(z.transpose() * &w * &z));
    LocalSolution { residual: state.measure(x, &p), point: p, chart: None, curvature, iterations, converged: true }
}

/// A parametric patch: a smooth map on the box `[lower, upper]` of R^m.
#[derive(Debug, Clone)]
pub struct PatchView<'a> {
    pub map: &'a dyn SmoothMap,
    pub lower: &'a [f64],
    pub upper: &'a [f64],
}

impl PatchView<'_> {
    pub fn clamp(&self, u: &DVector<f64>) -> (DVector<f64>, bool) {
        let mut clamped = false;
        let v = DVector::from_iterator(
            u.len(),
            u.iter().enumerate().map(|(i, c)| {
                let lo = self.lower[i];
                let hi = self.upper[i];
                if *c < lo {
                    clamped = true;
                    lo
                } else if *c > hi {
                    clamped = true;
                    hi
                } else {
                    *c
                }
            }),
        );
        (v, clamped)
    }

    fn on_boundary(&self, u: &DVector<f64>) -> bool {
        u.iter().enumerate().any(|(i, c)| *c <= self.lower[i] || *c >= self.upper[i])
    }
}

/// Symmetric inverse square root of a positive definite matrix.
fn inv_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|v| *v <= 0.0) {
        return None;
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Some(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Newton's method in the parameters of a patch for
/// `min_u |x - psi(u)|^2 / 2`, with a Gauss-Newton fallback.
pub fn project_patch(
    patch: &PatchView<'_>,
    patch_index: usize,
    x: &DVector<f64>,
    start: &DVector<f64>,
    cfg: &SolverConfig,
) -> LocalSolution {
    let (mut u, _) = patch.clamp(start);
    let objective = |u: &DVector<f64>| (x - patch.map.eval(u.as_slice())).norm_squared() * 0.5;
    let mut last_ortho = f64::INFINITY;
    let mut polished = 0;
    for it in 0..cfg.max_iter {
        let so = patch.map.second_order(u.as_slice());
        let r = x - &so.value;
        let jac = &so.jacobian;
        let gram = jac.transpose() * jac;
        let grad = -(jac.transpose() * &r);
        let tangential = match solve(&gram, &grad) {
            Some(c) => (jac * c).norm(),
            None => f64::INFINITY,
        };
        last_ortho = tangential;
        let mut hess = gram.clone();
        for (ri, h) in r.iter().zip(&so.hessians) {
            hess -= h * *ri;
        }
        if tangential < cfg.residual_tol {
            polished += 1;
            if polished > 2 || patch.on_boundary(&u) {
                let curvature = inv_sqrt(&gram).map(|s| min_eigenvalue(&(&s * &hess * &s))).unwrap_or(f64::NAN);
                return LocalSolution {
                    point: so.value,
                    chart: Some(Chart { patch: patch_index, params: u }),
                    residual: tangential,
                    curvature,
                    iterations: it,
                    converged: true,
                };
            }
        }
        let newton_ok = min_eigenvalue(&hess) > 1e-10 * gram.norm().max(1e-300);
        let mut steps = Vec::with_capacity(2);
        if newton_ok {
            steps.push(hess);
        }
        steps.push(gram);
        let f0 = objective(&u);
        let mut moved = None;
        for h in steps {
            let Some(du) = solve(&h, &(-&grad)) else { continue };
            if polished > 0 {
                // Inside the convergence basin: take the full Newton step,
                // the objective no longer resolves the decrease.
                moved = Some(patch.clamp(&(&u + &du)).0);
                break;
            }
            let slope = grad.dot(&du);
            if slope >= 0.0 {
                continue;
            }
            let mut alpha = 1.0;
            for _ in 0..40 {
                let (trial, _) = patch.clamp(&(&u + &du * alpha));
                let ft = objective(&trial);
                if ft <= f0 + 1e-4 * alpha * slope || (ft - f0).abs() <= 1e-16 * f0.max(1e-300) {
                    moved = Some(trial);
                    break;
                }
                alpha *= 0.5;
            }
            if moved.is_some() {
                break;
            }
        }
        match moved {
            Some(nu) => {
                let len = (&nu - &u).norm();
                u = nu;
                if len < cfg.step_tol * (1.0 + u.norm()) && polished == 0 {
                    break;
                }
            }
            None => break,
        }
    }
    let so = patch.map.second_order(u.as_slice());
    let r = x - &so.value;
    let gram = so.jacobian.transpose() * &so.jacobian;
    let grad = -(so.jacobian.transpose() * &r);
    let tangential = solve(&gram, &grad).map(|c| (&so.jacobian * c).norm()).unwrap_or(last_ortho);
    let converged = tangential < cfg.residual_tol;
    let mut hess = gram.clone();
    for (ri, h) in r.iter().zip(&so.hessians) {
        hess -= h * *ri;
    }
    let curvature = inv_sqrt(&gram).map(|s| min_eigenvalue(&(&s * &hess * &s))).unwrap_or(f64::NAN);
    LocalSolution {
        point: so.value,
        chart: Some(Chart { patch: patch_index, params: u }),
        residual: tangential,
        curvature,
        iterations: cfg.max_iter,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{parse_ambient, parse_parametric};

    fn v(c: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(c)
    }

    #[test]
    fn circle_projection_is_radial() {
        let f = parse_ambient(&["x^2 + y^2 - 1"], 2, &[]).unwrap();
        let cfg = SolverConfig::default();
        let x = v(&[2.0, 0.5]);
        let sol = project_implicit(&f, &x, &v(&[0.8, 0.6]), &cfg);
        assert!(sol.converged);
        let expect = &x / x.norm();
        assert!((sol.point - expect).norm() < 1e-13);
        assert!(sol.curvature > 0.0);
    }

    #[test]
    fn farthest_point_has_negative_curvature() {
        let f = parse_ambient(&["x^2 + y^2 - 1"], 2, &[]).unwrap();
        let sol = project_implicit(&f, &v(&[2.0, 0.0]), &v(&[-1.0, 0.0]), &SolverConfig::default());
        assert!(sol.converged);
        assert!(sol.curvature < 0.0);
    }

    #[test]
    fn foot_point_reaches_sphere() {
        let f = parse_ambient(&["x^2 + y^2 + z^2 - 1"], 3, &[]).unwrap();
        let p = foot_point(&f, &v(&[0.1, 2.0, -0.3]), &SolverConfig::default()).unwrap();
        assert!((p.norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn codimension_two_projection() {
        // unit circle in the plane z = 0, embedded in R^3
        let f = parse_ambient(&["x^2 + y^2 - 1", "z"], 3, &[]).unwrap();
        let x = v(&[1.5, 1.5, 0.7]);
        let sol = project_implicit(&f, &x, &v(&[1.0, 0.0, 0.0]), &SolverConfig::default());
        assert!(sol.converged);
        let s = 1.0 / 2f64.sqrt();
        assert!((sol.point - v(&[s, s, 0.0])).norm() < 1e-12);
    }

    #[test]
    fn patch_projection() {
        let map = parse_parametric(&["cos(u)", "sin(u)"], 1, &[]).unwrap();
        let lower = [-4.0];
        let upper = [4.0];
        let patch = PatchView { map: &map, lower: &lower, upper: &upper };
        let x = v(&[0.0, 3.0]);
        let sol = project_patch(&patch, 0, &x, &v(&[1.0]), &SolverConfig::default());
        assert!(sol.converged);
        assert!((sol.point - v(&[0.0, 1.0])).norm() < 1e-12);
        assert!(sol.curvature > 0.0);
    }
}
