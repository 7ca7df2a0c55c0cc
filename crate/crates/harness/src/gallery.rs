//! Built-in scenarios.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use tubular_core::shapes::chebyshev;

use crate::run::Verdict;
use crate::scenario::{
    BoxSpec, DeformationSpec, ManifoldSpec, Outputs, PatchSpec, RepresentationSpec, Sampling, Scenario, Task, TubeSpec,
};

#[derive(Debug, Clone)]
pub struct GalleryEntry {
    pub scenario: Scenario,
    pub expected: Verdict,
    pub description: &'static str,
}

pub const DEFAULT_BUDGET: usize = 200;
pub const DEFAULT_SEED: u64 = 20240601;

fn bbox(lower: &[f64], upper: &[f64]) -> BoxSpec {
    BoxSpec { lower: lower.to_vec(), upper: upper.to_vec(), unbounded: false }
}

fn implicit(n: usize, m: usize, equations: &[String], bounding_box: BoxSpec) -> ManifoldSpec {
    ManifoldSpec {
        ambient_dim: n,
        intrinsic_dim: m,
        representation: RepresentationSpec::Implicit { equations: equations.to_vec() },
        bounding_box,
        smoothness: None,
    }
}

fn unit_circle() -> ManifoldSpec {
    implicit(2, 1, &["x^2 + y^2 - 1".into()], bbox(&[-1.5, -1.5], &[1.5, 1.5]))
}

fn unit_sphere() -> ManifoldSpec {
    implicit(3, 2, &["x^2 + y^2 + z^2 - 1".into()], bbox(&[-1.5; 3], &[1.5; 3]))
}

fn scenario(name: &str, manifolds: Vec<(&str, ManifoldSpec)>, task: Task) -> Scenario {
    Scenario {
        name: name.into(),
        manifolds: manifolds.into_iter().map(|(k, v)| (k.to_string(), v)).collect::<BTreeMap<_, _>>(),
        tube: TubeSpec { manifold: "M".into(), delta: "auto".into() },
        task,
        sampling: Sampling { budget: DEFAULT_BUDGET, seed: DEFAULT_SEED },
        outputs: Outputs::default(),
        solver: None,
    }
}

fn certify(target: &str) -> Task {
    Task::Certify { target: target.into(), map: None }
}

/// `N_a = {x (1 + a cos(k theta))}` over the unit sphere `S^m`, with
/// `theta` the angle from the last axis (the polar angle when m = 1).
pub fn perturbed_sphere_spec(m: usize, amplitude: f64, k: u32) -> ManifoldSpec {
    let n = m + 1;
    let names = ["x", "y", "z", "x4", "x5", "x6"];
    let r = format!("sqrt({})", (0..n).map(|i| format!("{}^2", names[i])).collect::<Vec<_>>().join(" + "));
    let axis = if m == 1 { "x" } else { names[n - 1] };
    let c = format!("({axis} / {r})");
    let w = 1.5 * (1.0 + amplitude.abs());
    implicit(n, m, &[format!("{r} - 1 - ({amplitude:?}) * ({})", chebyshev(k, &c))], bbox(&vec![-w; n], &vec![w; n]))
}

/// Certify `N_a` against the unit sphere `S^m`.
pub fn perturbed_sphere(name: &str, m: usize, amplitude: f64, k: u32) -> Scenario {
    let base = if m == 1 {
        unit_circle()
    } else {
        let n = m + 1;
        let sum = ["x", "y", "z", "x4", "x5", "x6"][..n].iter().map(|v| format!("{v}^2")).collect::<Vec<_>>();
        implicit(n, m, &[format!("{} - 1", sum.join(" + "))], bbox(&vec![-1.5; n], &vec![1.5; n]))
    };
    scenario(name, vec![("M", base), ("N", perturbed_sphere_spec(m, amplitude, k))], certify("N"))
}

/// Scaled circles `(1 + rate t) S^1` with the radial reference maps.
pub fn scaled_circle(name: &str, rate: f64, eps: f64) -> Scenario {
    let s = format!("(1 + ({rate:?}) * t)");
    let deformation = DeformationSpec {
        slice: implicit(2, 1, &[format!("x^2 + y^2 - {s}^2")], bbox(&[-2.5, -2.5], &[2.5, 2.5])),
        reference_map: Some(vec![format!("{s} * x"), format!("{s} * y")]),
        t_grid: None,
        smoothness_p: 1,
        eps: format!("{eps:?}"),
        delta: "compute".into(),
    };
    scenario(name, vec![("M", unit_circle())], Task::Trivialize { deformation })
}

/// `Z_t` = image of the unit circle under `x -> x (1 + a t cos(k theta))`,
/// as a parametric slice; the reference map uses `Re((x + iy)^k)`, which
/// equals `cos(k theta)` on the circle.
pub fn wobble(name: &str, amplitude: f64, k: u32, eps: f64) -> Scenario {
    let a = format!("({amplitude:?})");
    let radius = format!("(1 + {a} * t * cos({k} * u))");
    let re = real_power(k);
    let w = 1.5 * (1.0 + amplitude.abs());
    let deformation = DeformationSpec {
        slice: ManifoldSpec {
            ambient_dim: 2,
            intrinsic_dim: 1,
            representation: RepresentationSpec::Parametric {
                patches: vec![PatchSpec {
                    coordinates: vec![format!("{radius} * cos(u)"), format!("{radius} * sin(u)")],
                    lower: vec![-PI - 0.5],
                    upper: vec![PI + 0.5],
                }],
            },
            bounding_box: bbox(&[-w, -w], &[w, w]),
            smoothness: None,
        },
        reference_map: Some(vec![format!("x * (1 + {a} * t * ({re}))"), format!("y * (1 + {a} * t * ({re}))")]),
        t_grid: None,
        smoothness_p: 1,
        eps: format!("{eps:?}"),
        delta: "compute".into(),
    };
    scenario(name, vec![("M", unit_circle())], Task::Trivialize { deformation })
}

/// `Re((x + iy)^k)` expanded by the binomial theorem.
fn real_power(k: u32) -> String {
    let mut terms = Vec::new();
    let mut binom: u64 = 1;
    for j in 0..=k {
        if j % 2 == 0 {
            let sign = if (j / 2) % 2 == 0 { "" } else { "-" };
            terms.push(format!("{sign}{binom} * x^{} * y^{j}", k - j));
        }
        binom = binom * (k - j) as u64 / (j + 1) as u64;
    }
    terms.join(" + ")
}

pub fn gallery() -> Vec<GalleryEntry> {
    let mut out = Vec::new();
    let mut push = |scenario: Scenario, expected: Verdict, description: &'static str| {
        out.push(GalleryEntry { scenario, expected, description });
    };
    push(
        scenario("circle_identity", vec![("M", unit_circle()), ("N", unit_circle())], certify("N")),
        Verdict::Pass,
        "the unit circle certified against itself",
    );
    push(
        perturbed_sphere("sphere_perturbed_small", 2, 0.01, 3),
        Verdict::Pass,
        "S^2 perturbed radially by 0.01 cos(3 theta)",
    );
    push(
        perturbed_sphere("sphere_perturbed_large", 2, 0.15, 3),
        Verdict::Fail,
        "S^2 perturbed by 0.15 cos(3 theta): tangent defect beyond 1/4",
    );
    let mut m = unit_circle();
    m.bounding_box = bbox(&[-1.5, -1.5], &[1.5, 4.5]);
    push(
        scenario(
            "circles_disjoint",
            vec![("M", m), ("N", implicit(2, 1, &["x^2 + (y - 3)^2 - 1".into()], bbox(&[-1.5, 1.5], &[1.5, 4.5])))],
            certify("N"),
        ),
        Verdict::Fail,
        "a translate of the circle far outside the tube",
    );
    let torus = |r: f64| {
        implicit(
            3,
            2,
            &[format!("(sqrt(x^2 + y^2) - 2)^2 + z^2 - ({:?})", r * r)],
            bbox(&[-3.6, -3.6, -1.6], &[3.6, 3.6, 1.6]),
        )
    };
    push(
        scenario("torus_certify", vec![("M", torus(1.0)), ("N", torus(1.01))], certify("N")),
        Verdict::Pass,
        "torus of revolution against one with minor radius 1.01",
    );
    push(
        scaled_circle("scaled_circle_deformation", 0.05, 0.2),
        Verdict::Pass,
        "circles (1 + 0.05 t) S^1 trivialized by the retraction",
    );
    push(wobble("wobble_deformation", 0.01, 3, 0.2), Verdict::Pass, "x (1 + 0.01 t cos 3 theta) over the circle");
    push(
        wobble("wobble_deformation_large", 0.2, 3, 0.2),
        Verdict::Fail,
        "x (1 + 0.2 t cos 3 theta): no longer delta-trivial",
    );
    let mut budget_only = scenario(
        "ellipse_budget",
        vec![("M", implicit(2, 1, &["(x / 2)^2 + y^2 - 1".into()], bbox(&[-3.0, -1.5], &[3.0, 1.5])))],
        Task::BudgetOnly { target: None },
    );
    budget_only.tube.delta = "0.2".into();
    push(budget_only, Verdict::Pass, "epsilon budget of an ellipse with delta = 0.2");
    push(
        scenario(
            "sphere_projection",
            vec![("M", unit_sphere())],
            Task::ProjectBatch {
                points: vec![vec![0.5, 0.5, 0.5], vec![1.2, -0.3, 0.1], vec![0.0, 0.0, 0.9], vec![-0.7, 0.2, -0.6]],
                input_csv: None,
            },
        ),
        Verdict::Pass,
        "nearest points on the unit sphere",
    );
    out
}

pub fn find(name: &str) -> Option<GalleryEntry> {
    gallery().into_iter().find(|e| e.scenario.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_scenarios_valid() {
        let g = gallery();
        let mut names: Vec<&str> = g.iter().map(|e| e.scenario.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), g.len());
        for required in [
            "circle_identity",
            "sphere_perturbed_small",
            "sphere_perturbed_large",
            "circles_disjoint",
            "torus_certify",
            "scaled_circle_deformation",
            "wobble_deformation",
        ] {
            assert!(names.contains(&required), "{required}");
        }
        for e in &g {
            e.scenario.validate().unwrap();
            assert_eq!(Scenario::from_json(&e.scenario.to_json()).unwrap(), e.scenario);
        }
    }

    #[test]
    fn real_power_matches_cosine() {
        assert_eq!(real_power(3), "1 * x^3 * y^0 + -3 * x^1 * y^2");
        let map = tubular_core::field::parse_ambient(&[real_power(5)], 2, &[]).unwrap();
        let th: f64 = 0.7;
        assert!((map.eval_scalar(&[th.cos(), th.sin()]) - (5.0 * th).cos()).abs() < 1e-14);
    }
}
