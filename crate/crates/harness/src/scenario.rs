//! The scenario file format: one JSON document per run.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use tubular_core::field::{parse_ambient, parse_parametric, ExprMap, ScalarField, SmoothMap};
use tubular_core::solver::SolverConfig;
use tubular_core::{BoundingBox, Manifold, Patch, Smoothness, TangentFrame};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub manifolds: BTreeMap<String, ManifoldSpec>,
    pub tube: TubeSpec,
    pub task: Task,
    pub sampling: Sampling,
    #[serde(default)]
    pub outputs: Outputs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSpec {
    pub ambient_dim: usize,
    pub intrinsic_dim: usize,
    pub representation: RepresentationSpec,
    pub bounding_box: BoxSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<SmoothnessSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RepresentationSpec {
    /// Zero set of `ambient_dim - intrinsic_dim` equations in `x1..xn`.
    Implicit { equations: Vec<String> },
    /// Union of patches `u -> (x1(u), ..., xn(u))` over parameter boxes.
    Parametric { patches: Vec<PatchSpec> },
    /// Points with tangent vectors (one list of `intrinsic_dim` vectors per point).
    Sampled { points: Vec<Vec<f64>>, tangents: Vec<Vec<Vec<f64>>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub coordinates: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unbounded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unlimited {
    Infinite,
}

/// `"infinite"` or a finite order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SmoothnessSpec {
    Order(u32),
    Named(Unlimited),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeSpec {
    pub manifold: String,
    /// `"auto"` (half the estimated reach) or an expression in `x1..xn`.
    #[serde(default = "auto")]
    pub delta: String,
}

fn auto() -> String {
    "auto".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    pub budget: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    /// Project the listed points (and/or the rows of a CSV file) onto the tube manifold.
    ProjectBatch {
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        points: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input_csv: Option<String>,
    },
    /// Certify that the retraction restricts to a diffeomorphism `target -> M`.
    Certify {
        target: String,
        /// Optional ambient expressions for the candidate `h`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        map: Option<Vec<String>>,
    },
    Trivialize {
        deformation: DeformationSpec,
    },
    /// Only the epsilon budget, at samples of `target` (or of M).
    BudgetOnly {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<String>,
    },
}

impl Task {
    pub fn kind(&self) -> &'static str {
        match self {
            Task::ProjectBatch { .. } => "project_batch",
            Task::Certify { .. } => "certify",
            Task::Trivialize { .. } => "trivialize",
            Task::BudgetOnly { .. } => "budget_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformationSpec {
    /// `Z_t`; its expressions may use `t`.
    pub slice: ManifoldSpec,
    /// `phi_t(x)` as ambient expressions in `x1..xn` and `t`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_map: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_grid: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub smoothness_p: u32,
    pub eps: String,
    /// `"compute"` (largest accepted grid value for `eps`), `"tube"`, or an expression.
    #[serde(default = "compute")]
    pub delta: String,
}

fn one() -> u32 {
    1
}

fn compute() -> String {
    "compute".into()
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| HarnessError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let known = |name: &str| -> Result<()> {
            if self.manifolds.contains_key(name) {
                Ok(())
            } else {
                Err(HarnessError::Scenario(format!("unknown manifold `{name}`")))
            }
        };
        known(&self.tube.manifold)?;
        match &self.task {
            Task::Certify { target, .. } => known(target)?,
            Task::BudgetOnly { target: Some(t) } => known(t)?,
            Task::ProjectBatch { points, input_csv } if points.is_empty() && input_csv.is_none() => {
                return Err(HarnessError::Scenario("project_batch needs points or input_csv".into()));
            }
            _ => {}
        }
        if self.sampling.budget == 0 {
            return Err(HarnessError::Scenario("sampling budget must be positive".into()));
        }
        Ok(())
    }

    pub fn manifold(&self, name: &str) -> Result<Manifold> {
        let spec =
            self.manifolds.get(name).ok_or_else(|| HarnessError::Scenario(format!("unknown manifold `{name}`")))?;
        spec.build(name, None)
    }
}

impl ManifoldSpec {
    /// Build the manifold; `t` binds the deformation parameter when given.
    pub fn build(&self, name: &str, t: Option<f64>) -> Result<Manifold> {
        let ctx = format!("manifold `{name}`");
        let extra: &[&str] = if t.is_some() { &["t"] } else { &[] };
        let bind = |map: ExprMap| -> Result<ExprMap> {
            match t {
                Some(t) => map.bind("t", t).map_err(HarnessError::core(ctx.clone())),
                None => Ok(map),
            }
        };
        let (n, m) = (self.ambient_dim, self.intrinsic_dim);
        let b = &self.bounding_box;
        if b.lower.len() != n || b.upper.len() != n {
            return Err(HarnessError::Scenario(format!("{ctx}: bounding box must have {n} coordinates")));
        }
        let bbox = BoundingBox { lower: b.lower.clone(), upper: b.upper.clone(), unbounded: b.unbounded };
        let built = match &self.representation {
            RepresentationSpec::Implicit { equations } => {
                let map = bind(parse_ambient(equations, n, extra).map_err(HarnessError::core(ctx.clone()))?)?;
                Manifold::implicit(name, Arc::new(map), m, bbox)
            }
            RepresentationSpec::Parametric { patches } => {
                let mut built = Vec::with_capacity(patches.len());
                for p in patches {
                    if p.coordinates.len() != n {
                        return Err(HarnessError::Scenario(format!("{ctx}: patch needs {n} coordinate expressions")));
                    }
                    let map =
                        bind(parse_parametric(&p.coordinates, m, extra).map_err(HarnessError::core(ctx.clone()))?)?;
                    built.push(Patch { map: Arc::new(map), lower: p.lower.clone(), upper: p.upper.clone() });
                }
                Manifold::parametric(name, built, bbox)
            }
            RepresentationSpec::Sampled { points, tangents } => {
                if points.len() != tangents.len() {
                    return Err(HarnessError::Scenario(format!("{ctx}: one tangent list per point")));
                }
                let frames = points
                    .iter()
                    .zip(tangents)
                    .map(|(p, ts)| {
                        let cols: Vec<DVector<f64>> = ts.iter().map(|v| DVector::from_vec(v.clone())).collect();
                        if cols.iter().any(|c| c.len() != p.len()) || cols.len() != m {
                            return Err(HarnessError::Scenario(format!("{ctx}: malformed tangent vectors")));
                        }
                        Ok(TangentFrame::new(DVector::from_vec(p.clone()), DMatrix::from_columns(&cols)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Manifold::sampled(name, frames, bbox)
            }
        }
        .map_err(HarnessError::core(ctx.clone()))?;
        if built.intrinsic_dim() != m || built.ambient_dim() != n {
            return Err(HarnessError::Scenario(format!("{ctx}: declared dimensions do not match the representation")));
        }
        Ok(match self.smoothness {
            Some(SmoothnessSpec::Order(k)) => built.with_smoothness(Smoothness::Finite(k)),
            _ => built,
        })
    }
}

/// Parse `eps`/`delta` style fields over the ambient coordinates.
pub fn field(name: &str, source: &str, n: usize) -> Result<ScalarField> {
    ScalarField::expression(name, source, n).map_err(HarnessError::core(format!("field `{name}`")))
}

/// `(x1..xn, t) -> R^n` from ambient expressions.
pub fn reference_map(sources: &[String], n: usize) -> Result<Arc<dyn SmoothMap>> {
    if sources.len() != n {
        return Err(HarnessError::Scenario(format!("reference map needs {n} expressions")));
    }
    let map = parse_ambient(sources, n, &["t"]).map_err(HarnessError::core("reference map"))?;
    Ok(Arc::new(map))
}
