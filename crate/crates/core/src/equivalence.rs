//! Certifying that the retraction restricted to a nearby manifold is a
//! C^1 diffeomorphism onto the base manifold.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{ScalarField, SmoothMap};
use crate::linalg::{lstsq, op_norm, to_vec, Point};
use crate::manifold::{
    connected_components, default_linking_radius, diameter, frame_points, BoundingBox, Manifold, Representation,
    TangentFrame, ON_MANIFOLD_TOL,
};
use crate::retraction::{TubularNeighborhood, BOX_MARGIN};
use crate::rng::CounterRng;
use crate::solver::scaled_violation;

/// Threshold on `|d_x r(u) - u|` that makes `d_x(r|N)` invertible.
pub const LOCAL_DIFFEO_THRESHOLD: f64 = 0.25;
/// Bound on the modulus of continuity of `d r` used for `mu`.
pub const MODULUS_BOUND: f64 = 0.125;
pub const SAFETY: f64 = 0.9;
/// Fields below this value are reported as degenerate.
pub const DEGENERATE: f64 = 1e-12;
/// Charts tried per start when shooting onto a parametric manifold.
const PATCH_FALLBACKS: usize = 16;

/// `sup_{u in T, |u| = 1} |(A - I) u|` for orthonormal columns `T`.
pub fn tangent_defect(a: &DMatrix<f64>, tangent: &DMatrix<f64>) -> f64 {
    op_norm(&(a * tangent - tangent))
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosenessSample {
    pub point: Vec<f64>,
    pub image: Vec<f64>,
    pub c0_defect: f64,
    pub c1_defect: f64,
    pub combined: f64,
    /// `dist(x, M)`, bounded above by `c0_defect`.
    pub distance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosenessReport {
    /// `"supplied"` for an explicit map, `"retraction"` when `h = r`.
    pub map: String,
    pub samples: Vec<ClosenessSample>,
    pub max_c0: f64,
    pub max_c1: f64,
    pub max_combined: f64,
    pub distance_bounded: bool,
}

/// Value and derivative defects of `h` (or of `r` when `h` is absent)
/// against the identity on the sampled points of `N`.
pub fn closeness(
    tube: &TubularNeighborhood,
    h: Option<&dyn SmoothMap>,
    samples: &[TangentFrame],
) -> Result<ClosenessReport> {
    let m = &tube.manifold;
    let rows: Vec<Result<ClosenessSample>> = samples
        .par_iter()
        .map(|frame| {
            let x = &frame.base_point;
            let distance = tube.distance(x).unwrap_or(f64::NAN);
            let (image, jac) = match h {
                Some(h) => {
                    let hx = h.eval(x.as_slice());
                    let residual = m.residual(&hx);
                    if !(residual < ON_MANIFOLD_TOL) {
                        return Err(Error::MapLeavesManifold { point: to_vec(x), residual });
                    }
                    (hx, h.jacobian(x.as_slice()))
                }
                None => match tube.jet(x) {
                    Ok(j) => (j.value, j.derivative),
                    Err(e) => {
                        return Ok(ClosenessSample {
                            point: to_vec(x),
                            image: Vec::new(),
                            c0_defect: f64::INFINITY,
                            c1_defect: f64::INFINITY,
                            combined: f64::INFINITY,
                            distance,
                            error: Some(e.to_string()),
                        })
                    }
                },
            };
            let c0 = (&image - x).norm();
            let c1 = tangent_defect(&jac, &frame.tangent);
            Ok(ClosenessSample {
                point: to_vec(x),
                image: to_vec(&image),
                c0_defect: c0,
                c1_defect: c1,
                combined: c0 + c1,
                distance,
                error: None,
            })
        })
        .collect();
    let samples = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let max = |f: fn(&ClosenessSample) -> f64| samples.iter().map(f).fold(0.0, f64::max);
    Ok(ClosenessReport {
        map: if h.is_some() { "supplied" } else { "retraction" }.into(),
        max_c0: max(|s| s.c0_defect),
        max_c1: max(|s| s.c1_defect),
        max_combined: max(|s| s.combined),
        distance_bounded: samples.iter().all(|s| !(s.distance > s.c0_defect + 1e-12)),
        samples,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BudgetOptions {
    /// Doubles the number of continuity probes.
    pub strict: bool,
}

impl BudgetOptions {
    fn directions(&self) -> usize {
        if self.strict {
            16
        } else {
            8
        }
    }

    fn radii(&self) -> usize {
        if self.strict {
            12
        } else {
            6
        }
    }
}

/// A component of the base manifold with its injectivity radius.
#[derive(Debug, Clone, Serialize)]
pub struct RegionBudget {
    pub component: usize,
    pub representative: Vec<f64>,
    pub samples: usize,
    pub q_radius: f64,
    /// `sup epsilon` over the evaluation points in `B(z, 2q)`.
    pub epsilon0: f64,
    /// Whether epsilon had to be lowered on the region to keep
    /// `epsilon0 < q / 16`.
    pub capped: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetSample {
    pub point: Vec<f64>,
    pub eta: f64,
    pub mu: f64,
    pub derivative_norm: f64,
    pub derivative_cap: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpsilonBudget {
    pub samples: Vec<BudgetSample>,
    pub regions: Vec<RegionBudget>,
    pub linking_radius: f64,
    pub probe_directions: usize,
    pub probe_radii: Vec<f64>,
    #[serde(skip)]
    pub epsilon: ScalarField,
    #[serde(skip)]
    pub eta: ScalarField,
    #[serde(skip)]
    pub mu: ScalarField,
    #[serde(skip)]
    pub derivative_cap: ScalarField,
    /// Component label of each base-manifold seed of the tube.
    #[serde(skip)]
    pub seed_labels: Vec<usize>,
}

impl EpsilonBudget {
    pub fn min_epsilon(&self) -> f64 {
        self.samples.iter().map(|s| s.epsilon).fold(f64::INFINITY, f64::min)
    }
}

fn probe_directions(n: usize, count: usize, stream: u64) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(count);
    if n == 2 {
        for k in 0..count {
            let a = std::f64::consts::TAU * k as f64 / count as f64;
            out.push(DVector::from_vec(vec![a.cos(), a.sin()]));
        }
        return out;
    }
    'axes: for i in 0..n {
        for s in [1.0, -1.0] {
            if out.len() == count {
                break 'axes;
            }
            let mut e = DVector::zeros(n);
            e[i] = s;
            out.push(e);
        }
    }
    let mut rng = CounterRng::new(0x6d75).split(stream);
    while out.len() < count {
        out.push(DVector::from_vec(rng.unit_vector(n)));
    }
    out
}

/// Largest radius whose ball of probes keeps `|d_y r - d_x r| < 1/8`, halved.
fn modulus_radius(
    tube: &TubularNeighborhood,
    x: &Point,
    dx: &DMatrix<f64>,
    dirs: &[DVector<f64>],
    radii: &[f64],
) -> f64 {
    // radii are descending; the ball B(x, s) is clean when every radius <= s is.
    let clean: Vec<bool> = radii
        .iter()
        .map(|s| {
            dirs.iter().all(|w| match tube.jet(&(x + w * *s)) {
                Ok(j) => op_norm(&(&j.derivative - dx)) < MODULUS_BOUND,
                Err(_) => false,
            })
        })
        .collect();
    let mut best = 0.0;
    for i in (0..radii.len()).rev() {
        if !clean[i] {
            break;
        }
        best = radii[i];
    }
    best / 2.0
}

/// The epsilon budget at the evaluation points `samples` (points of N, or
/// of M itself).
pub fn budget(
    tube: &TubularNeighborhood,
    region: &BoundingBox,
    samples: &[TangentFrame],
    opts: &BudgetOptions,
) -> Result<EpsilonBudget> {
    for f in samples {
        if !region.contains(&f.base_point, BOX_MARGIN) {
            return Err(Error::OutsideBoundingBox { point: to_vec(&f.base_point) });
        }
    }
    let n = tube.manifold.ambient_dim();
    let seeds = frame_points(tube.seeds());
    let delta_at_seeds: Vec<f64> = seeds.iter().map(|z| tube.delta.eval_positive(z)).collect::<Result<Vec<_>>>()?;
    let s_max = if tube.reach_lower_bound > 0.0 { tube.reach_lower_bound.min(1.0) } else { 1.0 };
    let radii: Vec<f64> = (0..opts.radii()).map(|k| s_max * 0.5f64.powi(k as i32)).collect();
    let rows: Vec<Result<BudgetSample>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, frame)| {
            let x = &frame.base_point;
            let norm = x.norm();
            let eta = SAFETY
                * seeds
                    .iter()
                    .zip(&delta_at_seeds)
                    .filter(|(z, _)| z.norm() < norm + 1.0)
                    .map(|(_, d)| d / 2.0)
                    .fold(f64::INFINITY, f64::min);
            let jet = tube.jet(x)?;
            let cap = 1.0 / (8.0 * (jet.operator_norm + 1.0));
            let dirs = probe_directions(n, opts.directions(), i as u64);
            let mu = modulus_radius(tube, x, &jet.derivative, &dirs, &radii);
            Ok(BudgetSample {
                point: to_vec(x),
                eta,
                mu,
                derivative_norm: jet.operator_norm,
                derivative_cap: cap,
                epsilon: SAFETY * eta.min(mu).min(cap),
            })
        })
        .collect();
    let mut rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    for r in &rows {
        for (name, v) in [("eta", r.eta), ("mu", r.mu), ("derivative_cap", r.derivative_cap), ("epsilon", r.epsilon)] {
            if !(v >= DEGENERATE) {
                return Err(Error::BudgetDegenerate { field: name.into(), value: v });
            }
        }
    }

    let linking = default_linking_radius(&seeds, tube.manifold.intrinsic_dim());
    let comps = connected_components(&seeds, linking);
    let mut regions = Vec::with_capacity(comps.count());
    for (label, &rep) in comps.representatives.iter().enumerate() {
        let members: Vec<Point> = comps.members(label).into_iter().map(|i| seeds[i].clone()).collect();
        let z = &seeds[rep];
        let diam = diameter(&members);
        let mut q = if diam > 0.0 { diam / 4.0 } else { linking };
        for _ in 0..60 {
            let ball: Vec<Point> = members.iter().filter(|p| (*p - z).norm() < q).cloned().collect();
            if connected_components(&ball, linking).count() <= 1 {
                break;
            }
            q /= 2.0;
        }
        let in_k: Vec<usize> = (0..rows.len()).filter(|&i| (&samples[i].base_point - z).norm() < 2.0 * q).collect();
        let mut eps0 = in_k.iter().map(|&i| rows[i].epsilon).fold(0.0, f64::max);
        let cap = SAFETY * q / 16.0;
        let capped = !(eps0 < q / 16.0);
        if capped {
            for &i in &in_k {
                rows[i].epsilon = rows[i].epsilon.min(cap);
            }
            eps0 = in_k.iter().map(|&i| rows[i].epsilon).fold(0.0, f64::max);
        }
        regions.push(RegionBudget {
            component: label,
            representative: to_vec(z),
            samples: members.len(),
            q_radius: q,
            epsilon0: eps0,
            capped,
        });
    }

    let pts: Vec<Point> = samples.iter().map(|f| f.base_point.clone()).collect();
    let field =
        |name: &str, f: fn(&BudgetSample) -> f64| ScalarField::nearest(name, pts.clone(), rows.iter().map(f).collect());
    Ok(EpsilonBudget {
        epsilon: field("epsilon", |r| r.epsilon),
        eta: field("eta", |r| r.eta),
        mu: field("mu", |r| r.mu),
        derivative_cap: field("derivative_cap", |r| r.derivative_cap),
        samples: rows,
        regions,
        linking_radius: linking,
        probe_directions: opts.directions(),
        probe_radii: radii,
        seed_labels: comps.labels,
    })
}

/// Parameters of the normal-fiber search.
#[derive(Debug, Clone, Copy)]
pub struct FiberOptions {
    pub starts: usize,
    /// Fiber points closer than this are merged.
    pub separation: f64,
    /// Half-width of the offset window; `None` uses `delta(y)`.
    pub half_width: Option<f64>,
}

impl FiberOptions {
    /// 16 starts and separation `1e-4 * diameter`.
    pub fn for_diameter(diam: f64) -> Self {
        Self { starts: 16, separation: 1e-4 * diam.max(1e-300), half_width: None }
    }
}

fn newton_fiber_implicit(f: &dyn SmoothMap, y: &Point, normal: &DMatrix<f64>, c0: DVector<f64>) -> Option<Point> {
    let mut c = c0;
    let point = |c: &DVector<f64>| y + normal * c;
    let mut p = point(&c);
    let mut g = f.eval(p.as_slice());
    for _ in 0..60 {
        let jac = f.jacobian(p.as_slice());
        if scaled_violation(&g, &jac) < 1e-13 {
            return Some(p);
        }
        let step = lstsq(&(&jac * normal), &(-&g))?;
        let base = g.norm();
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let tc = &c + &step * alpha;
            let tp = point(&tc);
            let tg = f.eval(tp.as_slice());
            if tg.norm() < base {
                c = tc;
                p = tp;
                g = tg;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let jac = f.jacobian(p.as_slice());
    (scaled_violation(&g, &jac) < 1e-11).then_some(p)
}

fn newton_fiber_patch(n: &Manifold, y: &Point, tangent: &DMatrix<f64>, seed: &TangentFrame) -> Option<Point> {
    let Representation::Parametric(patches) = n.representation() else { return None };
    let chart = seed.chart.as_ref()?;
    let patch = patches.get(chart.patch)?;
    let view = patch.view();
    let mut u = chart.params.clone();
    let residual = |u: &DVector<f64>| tangent.transpose() * (patch.map.eval(u.as_slice()) - y);
    let mut g = residual(&u);
    for _ in 0..60 {
        if g.norm() < 1e-14 {
            break;
        }
        let jac = tangent.transpose() * patch.map.jacobian(u.as_slice());
        let step = lstsq(&jac, &(-&g))?;
        let base = g.norm();
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let (tu, _) = view.clamp(&(&u + &step * alpha));
            let tg = residual(&tu);
            if tg.norm() < base {
                u = tu;
                g = tg;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    (g.norm() < 1e-11).then(|| patch.map.eval(u.as_slice()))
}

/// Points of `N` on the normal fiber of `M` at `y` whose retraction is `y`.
///
/// Starts at `y + s nu` for `opts.starts` offsets `s` spanning the window
/// `[-w, w]`, cycling through the normal basis vectors `nu`, then solves
/// `x in N, x - y in N_yM` by Newton's method.
pub fn fiber(
    tube: &TubularNeighborhood,
    n: &Manifold,
    n_seeds: &[TangentFrame],
    y: &Point,
    opts: &FiberOptions,
) -> Result<Vec<Point>> {
    let frame = tube.manifold.tangent_space(y).or_else(|_| {
        // parametric and sampled bases may need the retraction to land exactly
        let p = tube.project(y)?;
        tube.manifold.tangent_space(&p)
    })?;
    let w = match opts.half_width {
        Some(w) => w,
        None => tube.delta.eval(y),
    };
    let w = if w > 0.0 { w } else { tube.reach_lower_bound.max(0.25) };
    let k = frame.normal.ncols();
    let starts = opts.starts.max(2);
    let candidates: Vec<Option<Point>> = (0..starts)
        .into_par_iter()
        .map(|j| {
            let s = -w + 2.0 * w * j as f64 / (starts - 1) as f64;
            let mut c = DVector::zeros(k);
            c[j % k] = s;
            match n.representation() {
                Representation::Implicit(f) => newton_fiber_implicit(f.as_ref(), y, &frame.normal, c),
                Representation::Parametric(_) => {
                    // A seed near a patch edge may head out of its parameter
                    // box, so fall back to the next nearest charts.
                    let start = y + &frame.normal * &c;
                    let mut near: Vec<(f64, &TangentFrame)> = n_seeds
                        .iter()
                        .filter(|f| f.chart.is_some())
                        .map(|f| ((&f.base_point - &start).norm(), f))
                        .collect();
                    near.sort_by(|a, b| a.0.total_cmp(&b.0));
                    near.iter()
                        .take(PATCH_FALLBACKS)
                        .find_map(|(_, seed)| newton_fiber_patch(n, y, &frame.tangent, seed))
                }
                Representation::Sampled(_) => None,
            }
        })
        .collect();
    if let Representation::Sampled(_) = n.representation() {
        return Err(Error::Unsupported("normal shooting onto a sampled manifold".into()));
    }
    let mut distinct: Vec<Point> = Vec::new();
    for c in candidates.into_iter().flatten() {
        if distinct.iter().all(|d| (d - &c).norm() > opts.separation) {
            distinct.push(c);
        }
    }
    let hits: Vec<Option<Point>> = distinct
        .into_par_iter()
        .map(|x| match tube.project(&x) {
            Ok(p) if (&p - y).norm() < 1e-8 => Some(x),
            _ => None,
        })
        .collect();
    Ok(hits.into_iter().flatten().collect())
}

/// The unique point of `N` retracting onto `y`.
pub fn invert(
    tube: &TubularNeighborhood,
    n: &Manifold,
    n_seeds: &[TangentFrame],
    y: &Point,
    opts: &FiberOptions,
) -> Result<Point> {
    let mut pts = fiber(tube, n, n_seeds, y, opts)?;
    match pts.len() {
        0 => Err(Error::FiberEmpty { target: to_vec(y) }),
        1 => Ok(pts.remove(0)),
        count => Err(Error::FiberAmbiguous { target: to_vec(y), count }),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Witness {
    pub clause: String,
    pub point: Vec<f64>,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContainmentClause {
    pub passed: bool,
    pub samples: usize,
    pub outside: usize,
    /// Largest `dist(x, M) / delta(r(x))`.
    pub max_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalDiffeoClause {
    pub passed: bool,
    pub threshold: f64,
    pub max_defect: f64,
    pub evaluated: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FiberEvidence {
    pub component: usize,
    pub representative: Vec<f64>,
    pub fiber_size: usize,
    pub fiber: Vec<Vec<f64>>,
    pub q_radius: f64,
    pub epsilon0: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InjectivityClause {
    pub passed: bool,
    pub fiber_sep: f64,
    pub components: Vec<FiberEvidence>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HitEvidence {
    pub component: usize,
    pub representative: Vec<f64>,
    pub hit: bool,
    /// Samples of N whose retraction lands in this component.
    pub projected_samples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SurjectivityClause {
    pub passed: bool,
    pub components: Vec<HitEvidence>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Annulus {
    pub inner: f64,
    pub outer: f64,
    pub samples: usize,
    pub max_offset: f64,
    /// Largest `|r(x) - x| / epsilon(x)`.
    pub max_ratio: f64,
    pub min_image_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropernessClause {
    pub passed: bool,
    pub vacuous: bool,
    pub annuli: Vec<Annulus>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Clauses {
    pub containment: ContainmentClause,
    pub local_diffeo: LocalDiffeoClause,
    pub injectivity: InjectivityClause,
    pub surjectivity: SurjectivityClause,
    pub properness: PropernessClause,
}

#[derive(Debug, Clone, Serialize)]
pub struct MaxDefects {
    pub c0: f64,
    pub c1: f64,
    pub combined: f64,
    pub local_diffeo: f64,
}

/// Whether the sampled `|h - id|_1 < epsilon` hypothesis holds; reported,
/// not part of the verdict.
#[derive(Debug, Clone, Serialize)]
pub struct Hypothesis {
    pub holds: bool,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Roundtrip {
    pub checked: usize,
    /// `max |invert(r(x)) - x|` over samples of N.
    pub inverse_after_retraction: f64,
    /// `max |r(invert(y)) - y|` over samples of M.
    pub retraction_after_inverse: f64,
    pub refuted: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiffeoCertificate {
    pub verdict: String,
    pub clauses: Clauses,
    pub witnesses: Vec<Witness>,
    pub max_defects: MaxDefects,
    pub hypothesis: Hypothesis,
    pub roundtrip: Roundtrip,
    pub notes: Vec<String>,
}

impl DiffeoCertificate {
    pub fn passed(&self) -> bool {
        self.verdict == "pass"
    }

    /// Names of the clauses that failed.
    pub fn failed_clauses(&self) -> Vec<&'static str> {
        let c = &self.clauses;
        let mut out = Vec::new();
        for (name, ok) in [
            ("containment", c.containment.passed),
            ("local_diffeo", c.local_diffeo.passed),
            ("injectivity", c.injectivity.passed),
            ("surjectivity", c.surjectivity.passed),
            ("properness", c.properness.passed),
        ] {
            if !ok {
                out.push(name);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CertifyOptions {
    /// Samples of M checked by `r(invert(y)) = y`.
    pub roundtrip_limit: usize,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self { roundtrip_limit: 64 }
    }
}

fn witness(clause: &str, point: &Point, value: f64, threshold: f64, detail: impl Into<String>) -> Witness {
    Witness { clause: clause.into(), point: to_vec(point), value, threshold, detail: detail.into() }
}

const NOTES: [&str; 3] = [
    "closedness of the manifolds is assumed, not verified",
    "simple connectivity of B(z, q) on M is not verified; only sample-graph connectivity is checked",
    "surjectivity is checked by a direct hit of every component representative",
];

/// Assemble the certificate for `r|N : N -> M` from sampled evidence.
pub fn certify(
    tube: &TubularNeighborhood,
    n: &Manifold,
    report: &ClosenessReport,
    budget: &EpsilonBudget,
    samples: &[TangentFrame],
    opts: &CertifyOptions,
) -> Result<DiffeoCertificate> {
    if report.samples.len() != samples.len() || budget.samples.len() != samples.len() {
        return Err(Error::Invalid("closeness report, budget and samples do not match".into()));
    }
    if n.ambient_dim() != tube.manifold.ambient_dim() {
        return Err(Error::DimensionMismatch { expected: tube.manifold.ambient_dim(), found: n.ambient_dim() });
    }
    if n.intrinsic_dim() != tube.manifold.intrinsic_dim() {
        return Err(Error::DimensionMismatch { expected: tube.manifold.intrinsic_dim(), found: n.intrinsic_dim() });
    }
    let mut witnesses = Vec::new();

    // Containment and the local diffeomorphism defect, per sample.
    struct Row {
        projection: std::result::Result<(Point, f64, f64), String>,
        defect: Option<std::result::Result<f64, Error>>,
    }
    let rows: Vec<Row> = samples
        .par_iter()
        .map(|frame| {
            let x = &frame.base_point;
            let projection = tube.project_full(x).map_err(|e| e.to_string()).and_then(|p| {
                match tube.delta.eval_positive(&p.point) {
                    Ok(d) => Ok((p.point, p.distance, d)),
                    Err(e) => Err(e.to_string()),
                }
            });
            let defect = match &projection {
                Ok((_, dist, delta)) if dist < delta => {
                    Some(tube.jet(x).map(|j| tangent_defect(&j.derivative, &frame.tangent)))
                }
                _ => None,
            };
            Row { projection, defect }
        })
        .collect();

    let mut outside = 0;
    let mut max_ratio: f64 = 0.0;
    for (frame, row) in samples.iter().zip(&rows) {
        match &row.projection {
            Ok((_, dist, delta)) => {
                let ratio = dist / delta;
                max_ratio = max_ratio.max(ratio);
                if !(dist < delta) {
                    outside += 1;
                    witnesses.push(witness(
                        "containment",
                        &frame.base_point,
                        *dist,
                        *delta,
                        "dist(x, M) >= delta(r(x))",
                    ));
                }
            }
            Err(e) => {
                outside += 1;
                max_ratio = f64::INFINITY;
                witnesses.push(witness("containment", &frame.base_point, f64::INFINITY, 0.0, e.clone()));
            }
        }
    }
    let containment = ContainmentClause { passed: outside == 0, samples: samples.len(), outside, max_ratio };

    let mut max_defect: f64 = 0.0;
    let mut evaluated = 0;
    let mut diffeo_ok = true;
    let mut worst: Option<(usize, f64)> = None;
    for (i, row) in rows.iter().enumerate() {
        match &row.defect {
            Some(Ok(d)) => {
                evaluated += 1;
                max_defect = max_defect.max(*d);
                if !(*d < LOCAL_DIFFEO_THRESHOLD) {
                    diffeo_ok = false;
                    if worst.is_none_or(|(_, w)| *d > w) {
                        worst = Some((i, *d));
                    }
                }
            }
            Some(Err(e)) => return Err(e.clone()),
            None => {
                diffeo_ok = false;
            }
        }
    }
    if let Some((i, d)) = worst {
        witnesses.push(witness(
            "local_diffeo",
            &samples[i].base_point,
            d,
            LOCAL_DIFFEO_THRESHOLD,
            "sup over unit tangent u of |d_x r(u) - u|",
        ));
    } else if !diffeo_ok {
        let i = rows.iter().position(|r| r.defect.is_none()).unwrap_or(0);
        witnesses.push(witness(
            "local_diffeo",
            &samples[i].base_point,
            f64::INFINITY,
            LOCAL_DIFFEO_THRESHOLD,
            "retraction undefined at sample",
        ));
    }
    let local_diffeo =
        LocalDiffeoClause { passed: diffeo_ok, threshold: LOCAL_DIFFEO_THRESHOLD, max_defect, evaluated };

    // Fibers above the component representatives.
    let n_points = frame_points(samples);
    let fopts = FiberOptions::for_diameter(diameter(&n_points));
    let mut inj = Vec::new();
    let mut hits = Vec::new();
    let seed_points = frame_points(tube.seeds());
    let mut landed = vec![0usize; budget.regions.len()];
    for row in &rows {
        if let Ok((p, _, _)) = &row.projection {
            if let Some((j, _)) =
                seed_points.iter().enumerate().min_by(|a, b| (a.1 - p).norm().total_cmp(&(b.1 - p).norm()))
            {
                if let Some(l) = budget.seed_labels.get(j) {
                    landed[*l] += 1;
                }
            }
        }
    }
    for region in &budget.regions {
        let z = DVector::from_vec(region.representative.clone());
        let found = fiber(tube, n, samples, &z, &fopts)?;
        if found.len() != 1 {
            witnesses.push(witness(
                "injectivity",
                &z,
                found.len() as f64,
                1.0,
                format!("fiber above component {} has {} points", region.component, found.len()),
            ));
        }
        if found.is_empty() {
            witnesses.push(witness(
                "surjectivity",
                &z,
                0.0,
                1.0,
                format!("component {} is not hit by normal shooting", region.component),
            ));
        }
        hits.push(HitEvidence {
            component: region.component,
            representative: region.representative.clone(),
            hit: !found.is_empty(),
            projected_samples: landed[region.component],
        });
        inj.push(FiberEvidence {
            component: region.component,
            representative: region.representative.clone(),
            fiber_size: found.len(),
            fiber: found.iter().map(to_vec).collect(),
            q_radius: region.q_radius,
            epsilon0: region.epsilon0,
        });
    }
    let injectivity = InjectivityClause {
        passed: inj.iter().all(|f| f.fiber_size == 1),
        fiber_sep: fopts.separation,
        components: inj,
    };
    let surjectivity = SurjectivityClause { passed: hits.iter().all(|h| h.hit), components: hits };

    // Properness on nested annuli when either manifold is declared unbounded.
    let unbounded = n.bounding_box.unbounded || tube.manifold.bounding_box.unbounded;
    let mut annuli = Vec::new();
    let mut proper_ok = true;
    if unbounded {
        let outer = n_points.iter().map(|p| p.norm()).fold(0.0, f64::max);
        let mut prev_min = 0.0;
        for k in 0..4 {
            let (lo, hi) = (outer * k as f64 / 4.0, outer * (k + 1) as f64 / 4.0);
            let mut a = Annulus {
                inner: lo,
                outer: hi,
                samples: 0,
                max_offset: 0.0,
                max_ratio: 0.0,
                min_image_norm: f64::INFINITY,
            };
            for (i, p) in n_points.iter().enumerate() {
                let r = p.norm();
                if r < lo || r > hi || (k < 3 && r == hi) {
                    continue;
                }
                a.samples += 1;
                match &rows[i].projection {
                    Ok((img, _, _)) => {
                        let off = (img - p).norm();
                        let eps = budget.samples[i].epsilon;
                        a.max_offset = a.max_offset.max(off);
                        a.max_ratio = a.max_ratio.max(off / eps);
                        a.min_image_norm = a.min_image_norm.min(img.norm());
                        if !(off < eps) {
                            proper_ok = false;
                            witnesses.push(witness("properness", p, off, eps, "|r(x) - x| >= epsilon(x) on annulus"));
                        }
                    }
                    Err(e) => {
                        proper_ok = false;
                        witnesses.push(witness("properness", p, f64::INFINITY, 0.0, e.clone()));
                    }
                }
            }
            if a.samples > 0 {
                if a.min_image_norm + 1e-12 < prev_min {
                    proper_ok = false;
                    witnesses.push(witness(
                        "properness",
                        &DVector::zeros(n.ambient_dim()),
                        a.min_image_norm,
                        prev_min,
                        format!("images do not escape on annulus {k}"),
                    ));
                }
                prev_min = a.min_image_norm;
            }
            annuli.push(a);
        }
    }
    let properness = PropernessClause { passed: proper_ok, vacuous: !unbounded, annuli };

    // Hypothesis of the theorem, for the record.
    let mut hyp_ratio: f64 = 0.0;
    for (s, b) in report.samples.iter().zip(&budget.samples) {
        hyp_ratio = hyp_ratio.max(s.combined / b.epsilon);
    }
    let hypothesis = Hypothesis { holds: hyp_ratio < 1.0, max_ratio: hyp_ratio };

    let clauses = Clauses { containment, local_diffeo, injectivity, surjectivity, properness };
    let all_pass = clauses.containment.passed
        && clauses.local_diffeo.passed
        && clauses.injectivity.passed
        && clauses.surjectivity.passed
        && clauses.properness.passed;

    // Roundtrips only make sense once the clauses hold.
    let mut roundtrip =
        Roundtrip { checked: 0, inverse_after_retraction: 0.0, retraction_after_inverse: 0.0, refuted: false };
    if all_pass {
        let forward: Vec<std::result::Result<f64, (Point, Error)>> = rows
            .par_iter()
            .zip(samples.par_iter())
            .map(|(row, frame)| {
                let (y, _, _) = row.projection.as_ref().expect("containment passed");
                invert(tube, n, samples, y, &fopts).map(|x| (x - &frame.base_point).norm()).map_err(|e| (y.clone(), e))
            })
            .collect();
        let seeds = tube.seeds();
        let stride = (seeds.len() / opts.roundtrip_limit.max(1)).max(1);
        let picks: Vec<&TangentFrame> = seeds.iter().step_by(stride).take(opts.roundtrip_limit).collect();
        let backward: Vec<std::result::Result<f64, (Point, Error)>> = picks
            .par_iter()
            .map(|f| {
                let y = &f.base_point;
                invert(tube, n, samples, y, &fopts)
                    .and_then(|x| tube.project(&x))
                    .map(|p| (p - y).norm())
                    .map_err(|e| (y.clone(), e))
            })
            .collect();
        roundtrip.checked = forward.len() + backward.len();
        for (side, list) in [(0, forward), (1, backward)] {
            for r in list {
                match r {
                    Ok(e) if side == 0 => {
                        roundtrip.inverse_after_retraction = roundtrip.inverse_after_retraction.max(e)
                    }
                    Ok(e) => roundtrip.retraction_after_inverse = roundtrip.retraction_after_inverse.max(e),
                    Err((y, e)) => {
                        roundtrip.refuted = true;
                        witnesses.push(witness("roundtrip", &y, f64::INFINITY, 0.0, e.to_string()));
                    }
                }
            }
        }
    }

    Ok(DiffeoCertificate {
        verdict: if all_pass && !roundtrip.refuted { "pass" } else { "fail" }.into(),
        max_defects: MaxDefects {
            c0: report.max_c0,
            c1: report.max_c1,
            combined: report.max_combined,
            local_diffeo: clauses.local_diffeo.max_defect,
        },
        clauses,
        witnesses,
        hypothesis,
        roundtrip,
        notes: NOTES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Sample `N`, compute closeness, budget and certificate in one go.
pub fn certify_pipeline(
    tube: &TubularNeighborhood,
    n: &Manifold,
    h: Option<&dyn SmoothMap>,
    samples: &[TangentFrame],
    budget_opts: &BudgetOptions,
) -> Result<(ClosenessReport, EpsilonBudget, DiffeoCertificate)> {
    let report = closeness(tube, h, samples)?;
    let budget = budget(tube, &tube.manifold.bounding_box, samples, budget_opts)?;
    let cert = certify(tube, n, &report, &budget, samples, &CertifyOptions::default())?;
    Ok((report, budget, cert))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::parse_ambient;
    use crate::shapes;
    use crate::solver::SolverConfig;

    fn v(c: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(c)
    }

    fn circle_tube(delta: f64) -> TubularNeighborhood {
        let m = shapes::circle(1.0).unwrap();
        let seeds = m.sample(64, 11).unwrap();
        TubularNeighborhood::new(m, seeds, SolverConfig::default())
            .unwrap()
            .with_reach(0.475)
            .with_delta(ScalarField::constant("delta", delta))
    }

    #[test]
    fn identity_closeness_is_zero() {
        let t = circle_tube(0.25);
        let id = parse_ambient(&["x", "y"], 2, &[]).unwrap();
        let s = t.seeds()[..10].to_vec();
        let r = closeness(&t, Some(&id), &s).unwrap();
        assert!(r.max_combined < 1e-14);
    }

    #[test]
    fn radial_normalisation_defects() {
        let t = circle_tube(0.25);
        let n = shapes::circle(1.01).unwrap();
        let s = n.sample(16, 2).unwrap();
        let h = parse_ambient(&["x / sqrt(x^2 + y^2)", "y / sqrt(x^2 + y^2)"], 2, &[]).unwrap();
        let r = closeness(&t, Some(&h), &s).unwrap();
        for row in &r.samples {
            assert!((row.c0_defect - 0.01).abs() < 1e-12);
            // d(x/|x|) on the tangent of the outer circle scales by 1/1.01
            assert!((row.c1_defect - (1.0 - 1.0 / 1.01)).abs() < 1e-12);
            assert!(row.distance <= row.c0_defect + 1e-12);
        }
        let off = parse_ambient(&["2 * x", "2 * y"], 2, &[]).unwrap();
        assert!(matches!(closeness(&t, Some(&off), &s), Err(Error::MapLeavesManifold { .. })));
    }

    #[test]
    fn eta_and_derivative_cap() {
        let t = circle_tube(0.25);
        let out = DVector::from_vec(vec![1.2, 0.0]);
        let frame = TangentFrame::new(out, DMatrix::from_column_slice(2, 1, &[0.0, 1.0]));
        let b = budget(&t, &t.manifold.bounding_box, &[frame], &BudgetOptions::default()).unwrap();
        let s = &b.samples[0];
        assert!((s.eta - 0.9 * 0.125).abs() < 1e-15);
        assert!((s.derivative_cap - 1.0 / (8.0 * (1.0 / 1.2 + 1.0))).abs() < 1e-7);
        assert!(s.epsilon < s.eta.min(s.mu).min(s.derivative_cap));
        assert!(b.regions.iter().all(|r| r.epsilon0 < r.q_radius / 16.0));
    }

    #[test]
    fn flat_line_mu_is_half_largest_probe() {
        let m = shapes::line(5.0).unwrap();
        let seeds = m.sample(32, 0).unwrap();
        let t = TubularNeighborhood::new(m, seeds.clone(), SolverConfig::default())
            .unwrap()
            .with_reach(1.0)
            .with_delta(ScalarField::constant("delta", 0.5));
        let frames: Vec<TangentFrame> = seeds.into_iter().filter(|f| f.base_point[0].abs() < 3.0).take(4).collect();
        let b = budget(&t, &t.manifold.bounding_box, &frames, &BudgetOptions::default()).unwrap();
        for s in &b.samples {
            assert!((s.mu - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn scaled_circle_certifies() {
        let t = circle_tube(0.25);
        let n = shapes::circle(1.05).unwrap();
        let s = n.sample(48, 3).unwrap();
        let (_, _, cert) = certify_pipeline(&t, &n, None, &s, &BudgetOptions::default()).unwrap();
        assert!(cert.passed(), "{:?}", cert.witnesses);
        assert!((cert.clauses.local_diffeo.max_defect - (1.0 - 1.0 / 1.05)).abs() < 1e-6);
        assert!(cert.roundtrip.inverse_after_retraction < 1e-6);
        assert!(cert.roundtrip.retraction_after_inverse < 1e-8);
        assert!(cert.clauses.properness.vacuous);
    }

    #[test]
    fn disjoint_circle_fails_containment() {
        let m = shapes::circle(1.0).unwrap();
        let mut bbox = m.bounding_box.clone();
        bbox.upper[1] = 4.5;
        let seeds = m.sample(64, 11).unwrap();
        let m = Manifold::implicit(
            "circle",
            match m.representation() {
                Representation::Implicit(f) => f.clone(),
                _ => unreachable!(),
            },
            1,
            bbox,
        )
        .unwrap();
        let t = TubularNeighborhood::new(m, seeds, SolverConfig::default())
            .unwrap()
            .with_reach(0.475)
            .with_delta(ScalarField::constant("delta", 0.25));
        let n = shapes::circle_at([0.0, 3.0], 1.0).unwrap();
        let s = n.sample(24, 3).unwrap();
        let (_, _, cert) = certify_pipeline(&t, &n, None, &s, &BudgetOptions::default()).unwrap();
        assert!(!cert.passed());
        assert!(!cert.clauses.containment.passed);
        assert!(cert.witnesses.iter().any(|w| w.clause == "containment"));
    }

    #[test]
    fn invert_examples() {
        let t = circle_tube(0.25);
        let n = shapes::circle(1.05).unwrap();
        let s = n.sample(32, 1).unwrap();
        let opts = FiberOptions::for_diameter(2.1);
        let x = invert(&t, &n, &s, &v(&[1.0, 0.0]), &opts).unwrap();
        assert!((x - v(&[1.05, 0.0])).norm() < 1e-12);
        let same = shapes::circle(1.0).unwrap();
        let y = v(&[0.6, 0.8]);
        let x = invert(&t, &same, &s, &y, &opts).unwrap();
        assert!((x - &y).norm() < 1e-12);
        let e = shapes::ellipse(1.02, 1.0).unwrap();
        let x = invert(&t, &e, &s, &v(&[0.0, 1.0]), &opts).unwrap();
        assert!((x - v(&[0.0, 1.0])).norm() < 1e-12);
        // the normal line y = 0 misses a circle centred at (0, 3)
        let far = shapes::circle_at([0.0, 3.0], 1.0).unwrap();
        assert!(matches!(invert(&t, &far, &s, &v(&[1.0, 0.0]), &opts), Err(Error::FiberEmpty { .. })));
    }
}
