//! Ready-made manifolds built from expressions.

use std::sync::Arc;

use crate::error::Result;
use crate::field::{parse_ambient, parse_parametric};
use crate::manifold::{BoundingBox, Manifold, Patch};

fn num(v: f64) -> String {
    format!("({v:?})")
}

fn implicit(name: &str, n: usize, m: usize, sources: &[String], half_width: f64) -> Result<Manifold> {
    let map = parse_ambient(sources, n, &[])?;
    Manifold::implicit(name, Arc::new(map), m, BoundingBox::cube(n, half_width))
}

/// Circle `|x - c| = radius` in the plane.
pub fn circle_at(center: [f64; 2], radius: f64) -> Result<Manifold> {
    let src = format!("(x - {})^2 + (y - {})^2 - {}", num(center[0]), num(center[1]), num(radius * radius));
    let map = parse_ambient(&[src], 2, &[])?;
    let pad = 1.5 * radius;
    let bbox = BoundingBox::new(vec![center[0] - pad, center[1] - pad], vec![center[0] + pad, center[1] + pad]);
    Manifold::implicit("circle", Arc::new(map), 1, bbox)
}

pub fn circle(radius: f64) -> Result<Manifold> {
    circle_at([0.0, 0.0], radius)
}

/// Sphere of the given radius in R^n (dimension n - 1).
pub fn sphere(n: usize, radius: f64) -> Result<Manifold> {
    let sum: Vec<String> = (1..=n).map(|i| format!("x{i}^2")).collect();
    let src = format!("{} - {}", sum.join(" + "), num(radius * radius));
    implicit("sphere", n, n - 1, &[src], 1.5 * radius)
}

/// Torus of revolution about the z-axis.
pub fn torus(major: f64, minor: f64) -> Result<Manifold> {
    let src = format!("(sqrt(x^2 + y^2) - {})^2 + z^2 - {}", num(major), num(minor * minor));
    let map = parse_ambient(&[src], 3, &[])?;
    let w = major + 1.5 * minor;
    let h = 1.5 * minor;
    Manifold::implicit("torus", Arc::new(map), 2, BoundingBox::new(vec![-w, -w, -h], vec![w, w, h]))
}

/// Ellipse `(x/a)^2 + (y/b)^2 = 1`.
pub fn ellipse(a: f64, b: f64) -> Result<Manifold> {
    let src = format!("(x / {})^2 + (y / {})^2 - 1", num(a), num(b));
    implicit("ellipse", 2, 1, &[src], 1.5 * a.max(b))
}

/// Parametric circle; the angle box overlaps itself so every point is interior.
pub fn parametric_circle(radius: f64) -> Result<Manifold> {
    let map = parse_parametric(&[format!("{} * cos(u)", num(radius)), format!("{} * sin(u)", num(radius))], 1, &[])?;
    let pi = std::f64::consts::PI;
    let patch = Patch { map: Arc::new(map), lower: vec![-pi - 0.5], upper: vec![pi + 0.5] };
    Manifold::parametric("circle", vec![patch], BoundingBox::cube(2, 1.5 * radius))
}

/// The x-axis in R^2 as a parametric line over `[-half_length, half_length]`,
/// declared unbounded.
pub fn line(half_length: f64) -> Result<Manifold> {
    let map = parse_parametric(&["u", "0"], 1, &[])?;
    let patch = Patch { map: Arc::new(map), lower: vec![-half_length], upper: vec![half_length] };
    let mut bbox = BoundingBox::new(vec![-half_length, -1.0], vec![half_length, 1.0]);
    bbox.unbounded = true;
    Manifold::parametric("line", vec![patch], bbox)
}

/// The lines `y = d` and `y = -d`, one patch each.
pub fn parallel_lines(d: f64, half_length: f64) -> Result<Manifold> {
    let patch = |y: f64| -> Result<Patch> {
        let map = parse_parametric(&["u".to_string(), num(y)], 1, &[])?;
        Ok(Patch { map: Arc::new(map), lower: vec![-half_length], upper: vec![half_length] })
    };
    let mut bbox = BoundingBox::new(vec![-half_length, -2.0 * d], vec![half_length, 2.0 * d]);
    bbox.unbounded = true;
    Manifold::parametric("parallel_lines", vec![patch(d)?, patch(-d)?], bbox)
}

/// Chebyshev polynomial `T_k(c)` as an expression in the text `c`.
pub fn chebyshev(k: u32, c: &str) -> String {
    // Coefficient recurrence T_{j+1} = 2c T_j - T_{j-1}.
    let mut prev = vec![1.0];
    let mut cur = vec![0.0, 1.0];
    if k == 0 {
        return "1".into();
    }
    for _ in 1..k {
        let mut next = vec![0.0; cur.len() + 1];
        for (i, v) in cur.iter().enumerate() {
            next[i + 1] += 2.0 * v;
        }
        for (i, v) in prev.iter().enumerate() {
            next[i] -= v;
        }
        prev = cur;
        cur = next;
    }
    let terms: Vec<String> = cur
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, v)| if i == 0 { num(*v) } else { format!("{} * {c}^{i}", num(*v)) })
        .collect();
    terms.join(" + ")
}

/// Radially perturbed unit sphere `{x (1 + a cos(k theta)) : |x| = 1}` in
/// R^(m+1), with `theta` the angle from the last coordinate axis for m >= 2
/// and the polar angle in the plane for m = 1.
pub fn perturbed_sphere(m: usize, amplitude: f64, k: u32) -> Result<Manifold> {
    let n = m + 1;
    let sum: Vec<String> = (1..=n).map(|i| format!("x{i}^2")).collect();
    let r = format!("sqrt({})", sum.join(" + "));
    let axis = if m == 1 { "x1".to_string() } else { format!("x{n}") };
    let c = format!("({axis} / {r})");
    let src = format!("{r} - 1 - {} * ({})", num(amplitude), chebyshev(k, &c));
    let name = if m == 1 { "perturbed_circle" } else { "perturbed_sphere" };
    implicit(name, n, m, &[src], 1.5 * (1.0 + amplitude.abs()))
}

/// Two circles of equal radius centred on the x-axis, as one zero set.
pub fn two_circles(c1: f64, c2: f64, radius: f64) -> Result<Manifold> {
    let r2 = num(radius * radius);
    let src = format!("((x - {})^2 + y^2 - {r2}) * ((x - {})^2 + y^2 - {r2})", num(c1), num(c2));
    let map = parse_ambient(&[src], 2, &[])?;
    let pad = 1.5 * radius;
    let bbox = BoundingBox::new(vec![c1.min(c2) - pad, -pad], vec![c1.max(c2) + pad, pad]);
    Manifold::implicit("two_circles", Arc::new(map), 1, bbox)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{central_jacobian, SmoothMap};
    use crate::linalg::column_space;
    use crate::manifold::{connected_components, default_linking_radius, frame_points, TangentFrame};
    use nalgebra::{DMatrix, DVector};

    fn v(c: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(c)
    }

    fn same_span(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a * a.transpose() - b * b.transpose()).abs().max()
    }

    #[test]
    fn chebyshev_matches_cosine() {
        for k in 0..6 {
            let src = chebyshev(k, "x");
            let m = parse_ambient(&[src], 1, &[]).unwrap();
            for t in [0.1f64, 0.7, 2.0] {
                let got = m.eval(&[t.cos()])[0];
                assert!((got - (k as f64 * t).cos()).abs() < 1e-12, "k = {k}");
            }
        }
    }

    #[test]
    fn circle_frame_axis_aligned() {
        let c = circle(1.0).unwrap();
        let f = c.tangent_space(&v(&[1.0, 0.0])).unwrap();
        assert!(same_span(&f.tangent, &DMatrix::from_column_slice(2, 1, &[0.0, 1.0])) < 1e-14);
        assert!(same_span(&f.normal, &DMatrix::from_column_slice(2, 1, &[1.0, 0.0])) < 1e-14);
    }

    #[test]
    fn sphere_pole_frame() {
        let s = sphere(3, 1.0).unwrap();
        let f = s.tangent_space(&v(&[0.0, 0.0, 1.0])).unwrap();
        assert_eq!(f.tangent.ncols(), 2);
        assert!(same_span(&f.normal, &DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0])) < 1e-14);
        assert!(f.orthonormality_defect() < 1e-12);
    }

    #[test]
    fn torus_normal_matches_fd_gradient() {
        let t = torus(2.0, 1.0).unwrap();
        let x = v(&[3.0, 0.0, 0.0]);
        let f = t.tangent_space(&x).unwrap();
        let src = "(sqrt(x^2 + y^2) - 2)^2 + z^2 - 1";
        let g = parse_ambient(&[src], 3, &[]).unwrap();
        let jac = central_jacobian(|p| g.eval(p), x.as_slice());
        let (oracle, _) = column_space(&jac.transpose());
        assert!(same_span(&f.normal, &oracle) < 1e-8);
        assert!(same_span(&f.normal, &DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0])) < 1e-8);
    }

    #[test]
    fn off_manifold_and_singular_points() {
        let c = circle(1.0).unwrap();
        assert!(matches!(c.tangent_space(&v(&[1.1, 0.0])), Err(crate::Error::NotOnManifold { .. })));
        // The cone x^2 + y^2 - z^2 = 0 is singular at its apex.
        let cone = implicit("cone", 3, 2, &["x^2 + y^2 - z^2".to_string()], 1.0).unwrap();
        assert!(matches!(cone.tangent_space(&v(&[0.0, 0.0, 0.0])), Err(crate::Error::RankDeficient { .. })));
    }

    #[test]
    fn sphere_samples_deterministic_and_on_manifold() {
        let s = sphere(3, 1.0).unwrap();
        let a = s.sample(100, 7).unwrap();
        assert_eq!(a.len(), 100);
        for f in &a {
            assert!((f.base_point.norm() - 1.0).abs() < 1e-9);
        }
        let b = s.sample(100, 7).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.base_point == q.base_point));
        let c = s.sample(100, 8).unwrap();
        assert!(a[0].base_point != c[0].base_point);
    }

    #[test]
    fn two_circle_samples_cover_both() {
        let m = two_circles(-5.0, 5.0, 1.0).unwrap();
        let frames = m.sample(50, 3).unwrap();
        assert!(frames.iter().any(|f| f.base_point[0] < 0.0));
        assert!(frames.iter().any(|f| f.base_point[0] > 0.0));
        let dense = m.sample(200, 3).unwrap();
        let comps = connected_components(&frame_points(&dense), 0.5);
        assert_eq!(comps.count(), 2);
        let pts = frame_points(&dense);
        assert_eq!(connected_components(&pts, default_linking_radius(&pts, 1)).count(), 2);
    }

    #[test]
    fn parametric_samples_cover_patches() {
        let m = parallel_lines(1.0, 3.0).unwrap();
        let frames = m.sample(2, 0).unwrap();
        assert!(frames[0].base_point[1] > 0.0 && frames[1].base_point[1] < 0.0);
    }

    #[test]
    fn parametric_and_implicit_circle_agree() {
        let imp = circle(1.0).unwrap();
        let par = parametric_circle(1.0).unwrap();
        for f in par.sample(20, 1).unwrap() {
            let g = imp.tangent_space(&f.base_point).unwrap();
            assert!(same_span(&f.tangent, &g.tangent) < 1e-8);
        }
    }

    #[test]
    fn sampled_representation_roundtrip() {
        let frames: Vec<TangentFrame> = (0..8)
            .map(|i| {
                let t = i as f64 * std::f64::consts::TAU / 8.0;
                TangentFrame::new(v(&[t.cos(), t.sin()]), DMatrix::from_column_slice(2, 1, &[-t.sin(), t.cos()]))
            })
            .collect();
        let m = crate::Manifold::sampled("ring", frames, crate::BoundingBox::cube(2, 1.5)).unwrap();
        assert_eq!(m.sample(100, 0).unwrap().len(), 8);
        let sub = m.sample(3, 5).unwrap();
        assert_eq!(sub.len(), 3);
        assert!(m.tangent_space(&sub[0].base_point).is_ok());
        let r = default_linking_radius(&frame_points(&m.sample(8, 0).unwrap()), 1);
        let growth = (8f64.ln() + 8.0) / std::f64::consts::LN_2;
        assert!((r - 2.0 * 2.0 * (std::f64::consts::PI / 8.0).sin() * growth).abs() < 1e-12);
    }

    #[test]
    fn empty_partition() {
        let c = connected_components(&[], 1.0);
        assert_eq!(c.count(), 0);
        assert!(c.labels.is_empty());
    }
}
