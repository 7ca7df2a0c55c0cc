//! Submanifolds of R^n and their pointwise differential data.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::SmoothMap;
use crate::linalg::{column_space, complement, gram_schmidt, to_vec, Point};
use crate::rng::CounterRng;
use crate::solver::{foot_point, project_patch, scaled_violation, Chart, PatchView, SolverConfig};

/// Scaled constraint residual below which a point counts as on the manifold.
pub const ON_MANIFOLD_TOL: f64 = 1e-8;
/// Relative singular-value threshold for full rank.
pub const RANK_TOL: f64 = 1e-7;
/// Orthonormality tolerance for stored frames.
pub const FRAME_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothness {
    Finite(u32),
    Infinite,
}

/// Axis-aligned box used for rejection sampling and input validation.
///
/// `unbounded` declares that the manifold continues past the box, which
/// switches properness checks from vacuous to annulus-based.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundingBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub unbounded: bool,
}

impl BoundingBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self { lower, upper, unbounded: false }
    }

    pub fn cube(n: usize, half_width: f64) -> Self {
        Self::new(vec![-half_width; n], vec![half_width; n])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn diameter(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt()
    }

    /// Membership with a margin relative to each side length.
    pub fn contains(&self, x: &DVector<f64>, rel_margin: f64) -> bool {
        x.iter().enumerate().all(|(i, v)| {
            let pad = rel_margin * (self.upper[i] - self.lower[i]);
            *v >= self.lower[i] - pad && *v <= self.upper[i] + pad
        })
    }
}

#[derive(Debug, Clone)]
pub struct Patch {
    pub map: Arc<dyn SmoothMap>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Patch {
    pub fn view(&self) -> PatchView<'_> {
        PatchView { map: self.map.as_ref(), lower: &self.lower, upper: &self.upper }
    }
}

#[derive(Debug, Clone)]
pub enum Representation {
    Implicit(Arc<dyn SmoothMap>),
    Parametric(Vec<Patch>),
    Sampled(Arc<Vec<TangentFrame>>),
}

/// Orthonormal tangent and normal bases at a point, stored as columns.
#[derive(Debug, Clone)]
pub struct TangentFrame {
    pub base_point: Point,
    pub tangent: DMatrix<f64>,
    pub normal: DMatrix<f64>,
    /// Parameters of the point when it came from a parametric patch.
    pub chart: Option<Chart>,
}

impl TangentFrame {
    pub fn new(base_point: Point, tangent: DMatrix<f64>) -> Self {
        let normal = complement(&tangent);
        Self { base_point, tangent, normal, chart: None }
    }

    pub fn dim(&self) -> usize {
        self.tangent.ncols()
    }

    /// Largest deviation from orthonormality of `[tangent | normal]`.
    pub fn orthonormality_defect(&self) -> f64 {
        let n = self.base_point.len();
        let mut all = DMatrix::zeros(n, self.tangent.ncols() + self.normal.ncols());
        all.view_mut((0, 0), self.tangent.shape()).copy_from(&self.tangent);
        all.view_mut((0, self.tangent.ncols()), self.normal.shape()).copy_from(&self.normal);
        let k = all.ncols();
        (all.transpose() * &all - DMatrix::identity(k, k)).abs().max()
    }

    pub fn tangent_vectors(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        self.tangent.column_iter().map(|c| c.into_owned())
    }
}

#[derive(Debug, Clone)]
pub struct Manifold {
    pub name: String,
    ambient_dim: usize,
    intrinsic_dim: usize,
    representation: Representation,
    pub bounding_box: BoundingBox,
    pub smoothness: Smoothness,
}

impl Manifold {
    pub fn implicit(
        name: &str,
        constraint: Arc<dyn SmoothMap>,
        intrinsic_dim: usize,
        bbox: BoundingBox,
    ) -> Result<Self> {
        let n = constraint.input_dim();
        if constraint.output_dim() + intrinsic_dim != n {
            return Err(Error::DimensionMismatch {
                expected: n - intrinsic_dim.min(n),
                found: constraint.output_dim(),
            });
        }
        Self::build(name, n, intrinsic_dim, Representation::Implicit(constraint), bbox)
    }

    pub fn parametric(name: &str, patches: Vec<Patch>, bbox: BoundingBox) -> Result<Self> {
        let first = patches.first().ok_or_else(|| Error::Invalid("parametric manifold without patches".into()))?;
        let n = first.map.output_dim();
        let m = first.map.input_dim();
        for p in &patches {
            if p.map.output_dim() != n {
                return Err(Error::DimensionMismatch { expected: n, found: p.map.output_dim() });
            }
            if p.map.input_dim() != m || p.lower.len() != m || p.upper.len() != m {
                return Err(Error::DimensionMismatch { expected: m, found: p.map.input_dim() });
            }
            if p.lower.iter().zip(&p.upper).any(|(a, b)| !(a < b)) {
                return Err(Error::Invalid("empty parameter box".into()));
            }
        }
        Self::build(name, n, m, Representation::Parametric(patches), bbox)
    }

    pub fn sampled(name: &str, frames: Vec<TangentFrame>, bbox: BoundingBox) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Invalid("sampled manifold without points".into()))?;
        let n = first.base_point.len();
        let m = first.dim();
        for f in &frames {
            if f.base_point.len() != n || f.tangent.nrows() != n {
                return Err(Error::DimensionMismatch { expected: n, found: f.base_point.len() });
            }
            if f.dim() != m || f.normal.ncols() != n - m {
                return Err(Error::DimensionMismatch { expected: m, found: f.dim() });
            }
            let defect = f.orthonormality_defect();
            if defect > FRAME_TOL {
                return Err(Error::Invalid(format!("tangent frame not orthonormal (defect {defect:.3e})")));
            }
        }
        Self::build(name, n, m, Representation::Sampled(Arc::new(frames)), bbox)
    }

    fn build(name: &str, n: usize, m: usize, representation: Representation, bbox: BoundingBox) -> Result<Self> {
        if n == 0 || m >= n {
            return Err(Error::Invalid(format!("need 0 <= m < n, got m = {m}, n = {n}")));
        }
        if bbox.dim() != n {
            return Err(Error::DimensionMismatch { expected: n, found: bbox.dim() });
        }
        Ok(Self {
            name: name.into(),
            ambient_dim: n,
            intrinsic_dim: m,
            representation,
            bounding_box: bbox,
            smoothness: Smoothness::Infinite,
        })
    }

    pub fn with_smoothness(mut self, s: Smoothness) -> Self {
        self.smoothness = s;
        self
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.intrinsic_dim
    }

    pub fn codim(&self) -> usize {
        self.ambient_dim - self.intrinsic_dim
    }

    pub fn representation(&self) -> &Representation {
        &self.representation
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.ambient_dim {
            return Err(Error::DimensionMismatch { expected: self.ambient_dim, found: x.len() });
        }
        Ok(())
    }

    /// Nearest parameter point over all patches, searched from a coarse grid.
    pub fn locate(&self, x: &DVector<f64>, cfg: &SolverConfig) -> Option<(Chart, f64)> {
        let Representation::Parametric(patches) = &self.representation else { return None };
        let m = self.intrinsic_dim;
        let per_axis = ((64f64).powf(1.0 / m as f64).floor() as usize).max(3);
        let mut best: Option<(Chart, f64)> = None;
        for (pi, patch) in patches.iter().enumerate() {
            let mut seeds: Vec<(f64, DVector<f64>)> = Vec::new();
            let total = per_axis.pow(m as u32);
            for idx in 0..total {
                let mut rem = idx;
                let u = DVector::from_iterator(
                    m,
                    (0..m).map(|a| {
                        let k = rem % per_axis;
                        rem /= per_axis;
                        let s = (k as f64 + 0.5) / per_axis as f64;
                        patch.lower[a] + s * (patch.upper[a] - patch.lower[a])
                    }),
                );
                let d = (patch.map.eval(u.as_slice()) - x).norm();
                seeds.push((d, u));
            }
            seeds.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (_, u) in seeds.iter().take(3) {
                let sol = project_patch(&patch.view(), pi, x, u, cfg);
                let d = (&sol.point - x).norm();
                if best.as_ref().is_none_or(|(_, bd)| d < *bd) {
                    if let Some(chart) = sol.chart {
                        best = Some((chart, d));
                    }
                }
            }
        }
        best
    }

    /// Membership residual: scaled `|F|` for implicit sets, distance to the
    /// patches or the stored samples otherwise.
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        match &self.representation {
            Representation::Implicit(f) => {
                let v = f.eval(x.as_slice());
                scaled_violation(&v, &f.jacobian(x.as_slice()))
            }
            Representation::Parametric(_) => self.locate(x, &SolverConfig::default()).map_or(f64::INFINITY, |(_, d)| d),
            Representation::Sampled(frames) => {
                frames.iter().map(|f| (&f.base_point - x).norm()).fold(f64::INFINITY, f64::min)
            }
        }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.residual(x) < ON_MANIFOLD_TOL
    }

    /// Tangent and normal spaces at an on-manifold point, by SVD.
    pub fn tangent_space(&self, x: &DVector<f64>) -> Result<TangentFrame> {
        self.check_dim(x)?;
        match &self.representation {
            Representation::Implicit(f) => {
                let value = f.eval(x.as_slice());
                let jac = f.jacobian(x.as_slice());
                let residual = scaled_violation(&value, &jac);
                if !(residual < ON_MANIFOLD_TOL) {
                    return Err(Error::NotOnManifold { point: to_vec(x), residual });
                }
                let (normal, ratio) = column_space(&jac.transpose());
                if !(ratio > RANK_TOL) {
                    return Err(Error::RankDeficient { point: to_vec(x), sigma_min: ratio });
                }
                let tangent = complement(&normal);
                Ok(TangentFrame { base_point: x.clone(), tangent, normal, chart: None })
            }
            Representation::Parametric(_) => {
                let (chart, d) = self
                    .locate(x, &SolverConfig::default())
                    .ok_or_else(|| Error::NotOnManifold { point: to_vec(x), residual: f64::INFINITY })?;
                if !(d < ON_MANIFOLD_TOL) {
                    return Err(Error::NotOnManifold { point: to_vec(x), residual: d });
                }
                let mut frame = self.frame_at_chart(&chart)?;
                frame.base_point = x.clone();
                Ok(frame)
            }
            Representation::Sampled(frames) => self.nearest_stored(frames, x),
        }
    }

    fn nearest_stored(&self, frames: &[TangentFrame], x: &DVector<f64>) -> Result<TangentFrame> {
        let (best, d) = frames
            .iter()
            .map(|f| (f, (&f.base_point - x).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("sampled manifolds are nonempty");
        if d < ON_MANIFOLD_TOL {
            Ok(best.clone())
        } else {
            Err(Error::NotOnManifold { point: to_vec(x), residual: d })
        }
    }

    /// Frame at a parameter point of a patch.
    pub fn frame_at_chart(&self, chart: &Chart) -> Result<TangentFrame> {
        let Representation::Parametric(patches) = &self.representation else {
            return Err(Error::Unsupported("charts exist only on parametric manifolds".into()));
        };
        let patch = patches.get(chart.patch).ok_or_else(|| Error::Invalid(format!("no patch {}", chart.patch)))?;
        let u = chart.params.as_slice();
        let point = patch.map.eval(u);
        let (tangent, ratio) = column_space(&patch.map.jacobian(u));
        if !(ratio > RANK_TOL) {
            return Err(Error::RankDeficient { point: to_vec(&point), sigma_min: ratio });
        }
        let normal = complement(&tangent);
        Ok(TangentFrame { base_point: point, tangent, normal, chart: Some(chart.clone()) })
    }

    /// Second construction of the tangent space by Gram-Schmidt, used to
    /// cross-check the SVD route.
    pub fn tangent_space_gram_schmidt(&self, frame: &TangentFrame) -> Result<TangentFrame> {
        let n = self.ambient_dim;
        let x = &frame.base_point;
        let axes: Vec<DVector<f64>> =
            (0..n).map(|i| DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 })).collect();
        let (tangent, normal) = match &self.representation {
            Representation::Implicit(f) => {
                let jac = f.jacobian(x.as_slice());
                let rows: Vec<DVector<f64>> = jac.row_iter().map(|r| r.transpose()).collect();
                let normal = gram_schmidt(&rows, &[], RANK_TOL);
                if normal.len() != self.codim() {
                    return Err(Error::RankDeficient { point: to_vec(x), sigma_min: 0.0 });
                }
                let tangent = gram_schmidt(&axes, &normal, 1e-6);
                (tangent, normal)
            }
            Representation::Parametric(patches) => {
                let chart = match &frame.chart {
                    Some(c) => c.clone(),
                    None => self
                        .locate(x, &SolverConfig::default())
                        .map(|(c, _)| c)
                        .ok_or_else(|| Error::NotOnManifold { point: to_vec(x), residual: f64::INFINITY })?,
                };
                let jac = patches[chart.patch].map.jacobian(chart.params.as_slice());
                let cols: Vec<DVector<f64>> = jac.column_iter().map(|c| c.into_owned()).collect();
                let tangent = gram_schmidt(&cols, &[], RANK_TOL);
                if tangent.len() != self.intrinsic_dim {
                    return Err(Error::RankDeficient { point: to_vec(x), sigma_min: 0.0 });
                }
                let normal = gram_schmidt(&axes, &tangent, 1e-6);
                (tangent, normal)
            }
            Representation::Sampled(frames) => return self.nearest_stored(frames, x),
        };
        let tangent = columns(n, &tangent);
        let normal = columns(n, &normal);
        Ok(TangentFrame { base_point: x.clone(), tangent, normal, chart: frame.chart.clone() })
    }

    /// Deterministic sample of frames.
    ///
    /// Implicit manifolds: uniform draws in the bounding box pulled onto the
    /// manifold by Gauss-Newton. Parametric: uniform parameters, budget split
    /// across patches. Sampled: a seeded subset of the stored points.
    pub fn sample(&self, budget: usize, seed: u64) -> Result<Vec<TangentFrame>> {
        if budget == 0 {
            return Err(Error::Invalid("sampling budget must be at least 1".into()));
        }
        let rng = CounterRng::new(seed);
        match &self.representation {
            Representation::Implicit(f) => self.sample_implicit(f.as_ref(), budget, &rng),
            Representation::Parametric(patches) => {
                let k = patches.len();
                let mut out = Vec::with_capacity(budget.max(k));
                for (pi, patch) in patches.iter().enumerate() {
                    let share = (budget / k + usize::from(pi < budget % k)).max(1);
                    let stream = rng.split(pi as u64);
                    let frames: Vec<Result<TangentFrame>> = (0..share)
                        .into_par_iter()
                        .map(|i| {
                            let mut r = stream.split(i as u64);
                            let u = DVector::from_iterator(
                                patch.lower.len(),
                                patch.lower.iter().zip(&patch.upper).map(|(a, b)| r.uniform(*a, *b)),
                            );
                            self.frame_at_chart(&Chart { patch: pi, params: u })
                        })
                        .collect();
                    for f in frames {
                        out.push(f?);
                    }
                }
                Ok(out)
            }
            Representation::Sampled(frames) => {
                if budget >= frames.len() {
                    return Ok(frames.as_ref().clone());
                }
                let mut r = rng.split(0);
                let mut idx: Vec<usize> = (0..frames.len()).collect();
                for i in 0..budget {
                    let j = i + r.below(frames.len() - i);
                    idx.swap(i, j);
                }
                let mut chosen = idx[..budget].to_vec();
                chosen.sort_unstable();
                Ok(chosen.into_iter().map(|i| frames[i].clone()).collect())
            }
        }
    }

    fn sample_implicit(&self, f: &dyn SmoothMap, budget: usize, rng: &CounterRng) -> Result<Vec<TangentFrame>> {
        let cfg = SolverConfig::default();
        let max_attempts = 10 * budget;
        let bbox = &self.bounding_box;
        let mut out = Vec::with_capacity(budget);
        let mut attempts = 0;
        while out.len() < budget && attempts < max_attempts {
            let chunk = (budget - out.len()).max(16).min(max_attempts - attempts);
            let results: Vec<Option<TangentFrame>> = (attempts..attempts + chunk)
                .into_par_iter()
                .map(|i| {
                    let mut r = rng.split(i as u64);
                    let x = DVector::from_iterator(
                        bbox.dim(),
                        bbox.lower.iter().zip(&bbox.upper).map(|(a, b)| r.uniform(*a, *b)),
                    );
                    let p = foot_point(f, &x, &cfg)?;
                    if !bbox.contains(&p, 0.05) {
                        return None;
                    }
                    self.tangent_space(&p).ok()
                })
                .collect();
            attempts += chunk;
            for frame in results.into_iter().flatten() {
                if out.len() < budget {
                    out.push(frame);
                }
            }
        }
        if out.len() < budget {
            return Err(Error::SamplingFailed { accepted: out.len(), attempts });
        }
        Ok(out)
    }
}

fn columns(n: usize, vs: &[DVector<f64>]) -> DMatrix<f64> {
    if vs.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(vs)
    }
}

/// Partition of a sample set into linked components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    /// Component label per sample, numbered by first appearance.
    pub labels: Vec<usize>,
    /// Lowest sample index in each component.
    pub representatives: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.representatives.len()
    }

    pub fn members(&self, label: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, l)| **l == label).map(|(i, _)| i).collect()
    }
}

/// Components of the graph joining samples closer than `linking_radius`.
pub fn connected_components(points: &[DVector<f64>], linking_radius: f64) -> Components {
    let n = points.len();
    let mut labels = vec![usize::MAX; n];
    let mut representatives = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if labels[start] != usize::MAX {
            continue;
        }
        let label = representatives.len();
        representatives.push(start);
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if labels[j] == usize::MAX && (&points[i] - &points[j]).norm() < linking_radius {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
    }
    Components { labels, representatives }
}

pub fn frame_points(frames: &[TangentFrame]) -> Vec<DVector<f64>> {
    frames.iter().map(|f| f.base_point.clone()).collect()
}

/// Linking radius at which a uniform sample of `points.len()` points on an
/// `m`-dimensional manifold is connected with high probability.
///
/// The density is read off the median nearest-neighbour distance `d`
/// (for a Poisson sample, `rho V_m d^m = ln 2`); the radius then solves
/// `rho V_m r^m = ln N + 8`, doubled to cover gaps between consecutive
/// points on curves.
pub fn default_linking_radius(points: &[DVector<f64>], m: usize) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let mut nn: Vec<f64> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    let mid = nn.len() / 2;
    let median = if nn.len().is_multiple_of(2) { 0.5 * (nn[mid - 1] + nn[mid]) } else { nn[mid] };
    let growth = ((points.len() as f64).ln() + 8.0) / std::f64::consts::LN_2;
    2.0 * median * growth.powf(1.0 / m.max(1) as f64)
}

/// Largest pairwise distance.
pub fn diameter(points: &[DVector<f64>]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, p) in points.iter().enumerate() {
        for q in &points[i + 1..] {
            d = d.max((p - q).norm());
        }
    }
    d
}
