//! The nearest-point retraction of a tubular neighbourhood and its jet.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::linalg::{op_norm, to_vec, Point};
use crate::manifold::{Manifold, Representation, TangentFrame};
use crate::solver::{project_implicit, project_patch, Chart, LocalSolution, SolverConfig};

/// Number of nearest sample frames used as projection starts.
pub const MULTISTART: usize = 8;
/// Radial step of the reach probe grid.
pub const PROBE_STEP: f64 = 0.05;
/// Default number of probe radii (the grid then reaches 2.0).
pub const DEFAULT_PROBE_BUDGET: usize = 40;
/// A probe passes when it projects back within this distance of its source.
pub const PROBE_TOL: f64 = 1e-6;
/// Relative padding of the bounding box accepted by `project`.
pub const BOX_MARGIN: f64 = 0.5;
/// At most this many (evenly strided) seeds are probed by [`TubularNeighborhood::auto`].
pub const REACH_SEEDS: usize = 64;

#[derive(Debug, Clone)]
pub struct Projection {
    pub point: Point,
    pub distance: f64,
    pub chart: Option<Chart>,
}

#[derive(Debug, Clone)]
pub struct RetractionJet {
    pub input_point: Point,
    pub value: Point,
    pub derivative: DMatrix<f64>,
    pub operator_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TubularNeighborhood {
    pub manifold: Manifold,
    pub delta: ScalarField,
    pub reach_lower_bound: f64,
    pub solver: SolverConfig,
    seeds: Arc<Vec<TangentFrame>>,
}

impl TubularNeighborhood {
    /// A tube whose projection starts from `seeds`; `delta` defaults to
    /// zero until a reach estimate or explicit radius is supplied.
    pub fn new(manifold: Manifold, seeds: Vec<TangentFrame>, solver: SolverConfig) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::Invalid("a tube needs at least one seed frame".into()));
        }
        Ok(Self {
            manifold,
            delta: ScalarField::constant("delta", 0.0),
            reach_lower_bound: 0.0,
            solver,
            seeds: Arc::new(seeds),
        })
    }

    /// Sample seeds, estimate the reach from up to [`REACH_SEEDS`] of them
    /// and set `delta = reach / 2`.
    pub fn auto(manifold: Manifold, budget: usize, seed: u64, solver: SolverConfig) -> Result<Self> {
        let frames = manifold.sample(budget, seed)?;
        let mut tube = Self::new(manifold, frames, solver)?;
        let stride = tube.seeds.len().div_ceil(REACH_SEEDS);
        let probes: Vec<TangentFrame> = tube.seeds.iter().step_by(stride).cloned().collect();
        let reach = tube.estimate_reach(&probes, DEFAULT_PROBE_BUDGET);
        tube.reach_lower_bound = reach;
        tube.delta = ScalarField::constant("delta", reach / 2.0);
        Ok(tube)
    }

    pub fn with_delta(mut self, delta: ScalarField) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_reach(mut self, reach: f64) -> Self {
        self.reach_lower_bound = reach;
        self
    }

    pub fn seeds(&self) -> &[TangentFrame] {
        &self.seeds
    }

    fn nearest_seeds(&self, x: &DVector<f64>, k: usize) -> Vec<&TangentFrame> {
        let mut d: Vec<(f64, usize)> =
            self.seeds.iter().enumerate().map(|(i, f)| ((&f.base_point - x).norm_squared(), i)).collect();
        let k = k.min(d.len());
        d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(k);
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().map(|(_, i)| &self.seeds[i]).collect()
    }

    fn local(&self, x: &DVector<f64>, start: &DVector<f64>, chart: Option<&Chart>) -> Option<LocalSolution> {
        match self.manifold.representation() {
            Representation::Implicit(f) => Some(project_implicit(f.as_ref(), x, start, &self.solver)),
            Representation::Parametric(patches) => {
                let chart = chart?;
                let patch = patches.get(chart.patch)?;
                Some(project_patch(&patch.view(), chart.patch, x, &chart.params, &self.solver))
            }
            Representation::Sampled(_) => None,
        }
    }

    /// Nearest point of the manifold, with the distance and chart.
    pub fn project_full(&self, x: &DVector<f64>) -> Result<Projection> {
        let n = self.manifold.ambient_dim();
        if x.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: x.len() });
        }
        if !self.manifold.bounding_box.contains(x, BOX_MARGIN) {
            return Err(Error::OutsideBoundingBox { point: to_vec(x) });
        }
        let seeds = self.nearest_seeds(x, MULTISTART);
        let mut candidates: Vec<Projection> = Vec::new();
        if let Representation::Sampled(_) = self.manifold.representation() {
            candidates.extend(seeds.iter().map(|f| Projection {
                distance: (&f.base_point - x).norm(),
                point: f.base_point.clone(),
                chart: None,
            }));
        } else {
            let implicit = matches!(self.manifold.representation(), Representation::Implicit(_));
            let own = implicit.then(|| self.local(x, x, None)).flatten();
            let runs = seeds.iter().filter_map(|f| self.local(x, &f.base_point, f.chart.as_ref()));
            for sol in own.into_iter().chain(runs) {
                // Strict local maxima of the distance are discarded; degenerate
                // stationary points (centres of curvature) are kept so that
                // medial-axis queries surface as ambiguities.
                if sol.converged && !(sol.curvature < -1e-6) {
                    candidates.push(Projection {
                        distance: (&sol.point - x).norm(),
                        point: sol.point,
                        chart: sol.chart,
                    });
                }
            }
        }
        let best = candidates
            .iter()
            .min_by(|a, b| a.distance.total_cmp(&b.distance))
            .ok_or_else(|| Error::NoConvergence { point: to_vec(x) })?;
        let tol = 1e-6 * (1.0 + best.distance);
        let sep = 10.0 * tol;
        let mut distinct: Vec<&Projection> = vec![best];
        for c in &candidates {
            if (c.distance - best.distance).abs() < tol && distinct.iter().all(|d| (&d.point - &c.point).norm() > sep) {
                distinct.push(c);
            }
        }
        if distinct.len() > 1 {
            return Err(Error::AmbiguousProjection {
                point: to_vec(x),
                candidates: distinct.len(),
                distance: best.distance,
            });
        }
        Ok(best.clone())
    }

    pub fn project(&self, x: &DVector<f64>) -> Result<Point> {
        self.project_full(x).map(|p| p.point)
    }

    /// Projections of many points, in input order.
    pub fn project_batch(&self, points: &[DVector<f64>]) -> Vec<Result<Projection>> {
        points.par_iter().map(|x| self.project_full(x)).collect()
    }

    pub fn distance(&self, x: &DVector<f64>) -> Result<f64> {
        self.project_full(x).map(|p| p.distance)
    }

    /// `dist(x, M) < delta(r(x))`.
    pub fn in_tube(&self, x: &DVector<f64>) -> Result<bool> {
        let p = self.project_full(x)?;
        Ok(p.distance < self.delta.eval_positive(&p.point)?)
    }

    fn fd_step(&self, x: &DVector<f64>) -> f64 {
        let h = 1e-3 * x.norm().max(1.0);
        if self.reach_lower_bound > 0.0 {
            h.min(self.reach_lower_bound / 8.0)
        } else {
            h
        }
    }

    /// `r(x)` and `d_x r` by central differences of the seeded local
    /// projection, refined by Richardson extrapolation.
    pub fn jet(&self, x: &DVector<f64>) -> Result<RetractionJet> {
        if let Representation::Sampled(_) = self.manifold.representation() {
            return Err(Error::Unsupported("derivatives of a sampled manifold's retraction".into()));
        }
        let base = self.project_full(x)?;
        let n = x.len();
        let h = self.fd_step(x);
        let column = |j: usize, step: f64| -> Result<DVector<f64>> {
            let mut xp = x.clone();
            xp[j] += step;
            let mut xm = x.clone();
            xm[j] -= step;
            let image = |y: &DVector<f64>| -> Result<DVector<f64>> {
                match self.local(y, &base.point, base.chart.as_ref()) {
                    Some(sol) if sol.converged => Ok(sol.point),
                    _ => Err(Error::NoConvergence { point: to_vec(y) }),
                }
            };
            Ok((image(&xp)? - image(&xm)?) / (2.0 * step))
        };
        let mut coarse = DMatrix::zeros(n, n);
        let mut fine = DMatrix::zeros(n, n);
        for j in 0..n {
            coarse.set_column(j, &column(j, h)?);
            fine.set_column(j, &column(j, h / 2.0)?);
        }
        let derivative = (&fine * 4.0 - &coarse) / 3.0;
        let discrepancy = (&derivative - &fine).abs().max();
        if discrepancy > 1e-4 {
            return Err(Error::DerivativeUnstable { point: to_vec(x), discrepancy });
        }
        Ok(RetractionJet { input_point: x.clone(), operator_norm: op_norm(&derivative), value: base.point, derivative })
    }

    /// Lower bound on the tubular radius from normal probes.
    ///
    /// Every sample shoots rays `x +/- t nu` along each normal basis vector
    /// for `t = 0.05, 0.10, ...`; a ray's radius is the largest contiguous
    /// `t` whose probe projects back onto its source. The result is half the
    /// smallest radius over all rays (zero when some first probe fails).
    pub fn estimate_reach(&self, samples: &[TangentFrame], probe_budget: usize) -> f64 {
        let rays: Vec<(usize, usize, f64)> = (0..samples.len())
            .flat_map(|s| (0..samples[s].normal.ncols()).flat_map(move |c| [(s, c, 1.0), (s, c, -1.0)]))
            .collect();
        // Rays stop once they reach the smallest radius seen so far; the
        // minimum is unaffected, so the result does not depend on scheduling.
        let bound = AtomicUsize::new(probe_budget);
        rays.par_iter().for_each(|&(s, c, sign)| {
            let frame = &samples[s];
            let nu = frame.normal.column(c) * sign;
            let mut passed = 0;
            for k in 1..=bound.load(Ordering::Relaxed) {
                let probe = &frame.base_point + &nu * (PROBE_STEP * k as f64);
                match self.project(&probe) {
                    Ok(p) if (&p - &frame.base_point).norm() <= PROBE_TOL => passed = k,
                    _ => break,
                }
            }
            bound.fetch_min(passed, Ordering::Relaxed);
        });
        PROBE_STEP * bound.into_inner() as f64 / 2.0
    }
}

/// Normalised orthogonality residual `max_v |<x - p, v>| / |x - p|` over the
/// tangent basis of `frame` (zero when `x = p`).
pub fn orthogonality_residual(x: &DVector<f64>, frame: &TangentFrame) -> f64 {
    let d = x - &frame.base_point;
    let norm = d.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (frame.tangent.transpose() * d).abs().max() / norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes;

    fn v(c: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(c)
    }

    fn tube(m: Manifold) -> TubularNeighborhood {
        let frames = m.sample(64, 1).unwrap();
        TubularNeighborhood::new(m, frames, SolverConfig::default()).unwrap()
    }

    #[test]
    fn circle_projections() {
        let t = tube(shapes::circle(1.0).unwrap());
        let p = t.project(&v(&[2.0, 0.0])).unwrap();
        assert!((p - v(&[1.0, 0.0])).norm() < 1e-12);
        assert!(matches!(t.project(&v(&[0.0, 0.0])), Err(Error::AmbiguousProjection { .. })));
        assert!(matches!(t.project(&v(&[10.0, 0.0])), Err(Error::OutsideBoundingBox { .. })));
    }

    #[test]
    fn sphere_projection_is_radial() {
        let t = tube(shapes::sphere(3, 1.0).unwrap());
        let p = t.project(&v(&[0.3, 0.4, 0.0])).unwrap();
        assert!((p - v(&[0.6, 0.8, 0.0])).norm() < 1e-12);
    }

    #[test]
    fn circle_jet_matches_analytic() {
        let t = tube(shapes::circle(1.0).unwrap());
        let j = t.jet(&v(&[2.0, 0.0])).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.5]);
        assert!((&j.derivative - expect).abs().max() < 1e-8);
        assert!((j.operator_norm - 0.5).abs() < 1e-8);
    }

    #[test]
    fn jet_is_identity_on_tangent_vectors() {
        let t = tube(shapes::torus(2.0, 1.0).unwrap());
        for f in t.seeds().iter().take(5) {
            let j = t.jet(&f.base_point).unwrap();
            for u in f.tangent_vectors() {
                assert!((&j.derivative * &u - &u).norm() < 1e-5);
            }
        }
        let s = tube(shapes::sphere(3, 1.0).unwrap());
        let j = s.jet(&v(&[0.0, 0.0, 2.0])).unwrap();
        assert!((j.derivative * v(&[0.0, 0.0, 1.0])).norm() < 1e-5);
    }

    #[test]
    fn tube_membership() {
        let t = tube(shapes::circle(1.0).unwrap()).with_delta(ScalarField::constant("delta", 0.5));
        assert!(t.in_tube(&v(&[1.4, 0.0])).unwrap());
        assert!(!t.in_tube(&v(&[1.6, 0.0])).unwrap());
        assert!(t.in_tube(&v(&[0.0, 1.0])).unwrap());
    }

    #[test]
    fn reach_estimates() {
        let t = tube(shapes::circle(1.0).unwrap());
        let r = t.estimate_reach(&t.seeds()[..16], DEFAULT_PROBE_BUDGET);
        assert!((0.45..=0.5).contains(&r), "circle reach {r}");
        let l = tube(shapes::line(5.0).unwrap());
        let r = l.estimate_reach(&l.seeds()[..8], DEFAULT_PROBE_BUDGET);
        assert!((r - 1.0).abs() < 1e-12, "line reach {r}");
        // parallel lines y = +/-0.5: probes beyond the midline flip sides
        let p = tube(shapes::parallel_lines(0.5, 5.0).unwrap());
        let r = p.estimate_reach(&p.seeds()[..8], DEFAULT_PROBE_BUDGET);
        assert!(r <= 0.5 && r > 0.0, "parallel lines reach {r}");
    }

    #[test]
    fn parametric_tube_matches_implicit() {
        let a = tube(shapes::circle(1.0).unwrap());
        let b = tube(shapes::parametric_circle(1.0).unwrap());
        for x in [v(&[1.3, 0.4]), v(&[-0.2, -0.7]), v(&[-1.1, 0.01])] {
            let pa = a.project(&x).unwrap();
            let pb = b.project(&x).unwrap();
            assert!((&pa - &pb).norm() < 1e-10, "{pa} {pb}");
        }
    }
}
