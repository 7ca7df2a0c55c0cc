//! Smooth maps between Euclidean spaces and positive scalar fields.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::Expr;

/// Value, Jacobian and one Hessian per output component.
#[derive(Debug, Clone)]
pub struct SecondOrder {
    pub value: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub hessians: Vec<DMatrix<f64>>,
}

/// Central finite-difference step `cbrt(eps) * max(1, |x|)`.
pub fn fd_step(x: &[f64]) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    f64::EPSILON.cbrt() * norm.max(1.0)
}

/// Central-difference Jacobian of `f` at `x` (`rows = f(x).len()`).
pub fn central_jacobian<F>(f: F, x: &[f64]) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> DVector<f64>,
{
    let h = fd_step(x);
    let mut p = x.to_vec();
    let mut cols = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        p[j] = x[j] + h;
        let fp = f(&p);
        p[j] = x[j] - h;
        let fm = f(&p);
        p[j] = x[j];
        cols.push((fp - fm) / (2.0 * h));
    }
    if cols.is_empty() {
        return DMatrix::zeros(f(x).len(), 0);
    }
    DMatrix::from_columns(&cols)
}

/// Smooth map R^input -> R^output with first and second derivatives.
///
/// The default derivative implementations use central differences; maps
/// with exact derivatives override them.
pub trait SmoothMap: Send + Sync + fmt::Debug {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> DVector<f64>;

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        central_jacobian(|p| self.eval(p), x)
    }

    fn second_order(&self, x: &[f64]) -> SecondOrder {
        let n = self.input_dim();
        let k = self.output_dim();
        let value = self.eval(x);
        let jacobian = self.jacobian(x);
        // Differentiate the Jacobian once more; symmetrise the result.
        let h = f64::EPSILON.powf(0.25) * fd_step(x) / f64::EPSILON.cbrt();
        let mut hessians = vec![DMatrix::zeros(n, n); k];
        let mut p = x.to_vec();
        for j in 0..n {
            p[j] = x[j] + h;
            let jp = self.jacobian(&p);
            p[j] = x[j] - h;
            let jm = self.jacobian(&p);
            p[j] = x[j];
            for (i, hess) in hessians.iter_mut().enumerate() {
                for l in 0..n {
                    hess[(j, l)] = (jp[(i, l)] - jm[(i, l)]) / (2.0 * h);
                }
            }
        }
        for hess in &mut hessians {
            let sym = (&*hess + hess.transpose()) * 0.5;
            *hess = sym;
        }
        SecondOrder { value, jacobian, hessians }
    }

    /// True when derivatives are exact rather than finite differences.
    fn exact_derivatives(&self) -> bool {
        false
    }
}

/// A vector of expressions sharing one variable list.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprMap {
    exprs: Vec<Expr>,
    sources: Vec<String>,
    vars: Vec<String>,
}

impl ExprMap {
    pub fn parse<S: AsRef<str>>(sources: &[S], vars: &[&str]) -> Result<Self> {
        let mut exprs = Vec::with_capacity(sources.len());
        for src in sources {
            exprs.push(Expr::parse(src.as_ref(), vars)?);
        }
        Ok(Self {
            exprs,
            sources: sources.iter().map(|s| s.as_ref().to_string()).collect(),
            vars: vars.iter().map(|s| s.to_string()).collect(),
        })
    }

    /// Fix variable `name` to `value`, removing it from the variable list.
    pub fn bind(&self, name: &str, value: f64) -> Result<Self> {
        let index = self
            .vars
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::Invalid(format!("no variable `{name}` to bind")))?;
        let mut vars = self.vars.clone();
        vars.remove(index);
        Ok(Self {
            exprs: self.exprs.iter().map(|e| e.bind(index, value)).collect(),
            sources: self.sources.clone(),
            vars,
        })
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn vars(&self) -> &[String] {
        &self.vars
    }

    pub fn eval_scalar(&self, x: &[f64]) -> f64 {
        self.exprs[0].eval(x)
    }
}

impl SmoothMap for ExprMap {
    fn input_dim(&self) -> usize {
        self.vars.len()
    }

    fn output_dim(&self) -> usize {
        self.exprs.len()
    }

    fn eval(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.exprs.len(), self.exprs.iter().map(|e| e.eval(x)))
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let mut j = DMatrix::zeros(self.exprs.len(), n);
        for (i, e) in self.exprs.iter().enumerate() {
            let jet = e.eval_jet(x);
            for c in 0..n {
                j[(i, c)] = jet.grad[c];
            }
        }
        j
    }

    fn second_order(&self, x: &[f64]) -> SecondOrder {
        let n = x.len();
        let k = self.exprs.len();
        let mut value = DVector::zeros(k);
        let mut jacobian = DMatrix::zeros(k, n);
        let mut hessians = Vec::with_capacity(k);
        for (i, e) in self.exprs.iter().enumerate() {
            let jet = e.eval_jet(x);
            value[i] = jet.value;
            for c in 0..n {
                jacobian[(i, c)] = jet.grad[c];
            }
            hessians.push(DMatrix::from_row_slice(n, n, &jet.hess));
        }
        SecondOrder { value, jacobian, hessians }
    }

    fn exact_derivatives(&self) -> bool {
        true
    }
}

type VecFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A Rust closure as a smooth map; derivatives by finite differences.
#[derive(Clone)]
pub struct FnMap {
    f: Arc<VecFn>,
    input_dim: usize,
    output_dim: usize,
}

impl FnMap {
    pub fn new<F>(input_dim: usize, output_dim: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self { f: Arc::new(f), input_dim, output_dim }
    }
}

impl fmt::Debug for FnMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FnMap({} -> {})", self.input_dim, self.output_dim)
    }
}

impl SmoothMap for FnMap {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn eval(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_vec((self.f)(x))
    }
}

type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
enum FieldKind {
    Constant(f64),
    Expression(Arc<ExprMap>),
    Function(Arc<ScalarFn>),
    /// Piecewise constant: value of the nearest stored point.
    Nearest {
        points: Arc<Vec<DVector<f64>>>,
        values: Arc<Vec<f64>>,
    },
}

/// A real-valued field on R^n (or on a manifold, evaluated at its points).
#[derive(Clone)]
pub struct ScalarField {
    kind: FieldKind,
    name: String,
    pub positivity_declared: bool,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            FieldKind::Constant(c) => write!(f, "ScalarField({} = {c})", self.name),
            FieldKind::Expression(e) => write!(f, "ScalarField({} = {:?})", self.name, e.sources()),
            FieldKind::Function(_) => write!(f, "ScalarField({} = <fn>)", self.name),
            FieldKind::Nearest { points, .. } => {
                write!(f, "ScalarField({} = <{} samples>)", self.name, points.len())
            }
        }
    }
}

impl ScalarField {
    pub fn constant(name: &str, value: f64) -> Self {
        Self { kind: FieldKind::Constant(value), name: name.into(), positivity_declared: value > 0.0 }
    }

    /// Parse `source` over the ambient coordinates `x1..xn` (and `x, y, z`).
    pub fn expression(name: &str, source: &str, ambient_dim: usize) -> Result<Self> {
        let map = parse_ambient(&[source], ambient_dim, &[])?;
        if let Some(c) = map.exprs[0].constant() {
            return Ok(Self::constant(name, c));
        }
        Ok(Self { kind: FieldKind::Expression(Arc::new(map)), name: name.into(), positivity_declared: true })
    }

    pub fn function<F>(name: &str, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self { kind: FieldKind::Function(Arc::new(f)), name: name.into(), positivity_declared: true }
    }

    pub fn nearest(name: &str, points: Vec<DVector<f64>>, values: Vec<f64>) -> Self {
        assert_eq!(points.len(), values.len());
        let positive = values.iter().all(|v| *v > 0.0);
        Self {
            kind: FieldKind::Nearest { points: Arc::new(points), values: Arc::new(values) },
            name: name.into(),
            positivity_declared: positive,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self.kind {
            FieldKind::Constant(c) => Some(c),
            _ => None,
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match &self.kind {
            FieldKind::Constant(c) => *c,
            FieldKind::Expression(e) => e.eval_scalar(x.as_slice()),
            FieldKind::Function(f) => f(x.as_slice()),
            FieldKind::Nearest { points, values } => {
                let mut best = (f64::INFINITY, 0.0);
                for (p, v) in points.iter().zip(values.iter()) {
                    let d = (p - x).norm_squared();
                    if d < best.0 {
                        best = (d, *v);
                    }
                }
                best.1
            }
        }
    }

    /// Evaluate, failing if a field declared positive returns a non-positive value.
    pub fn eval_positive(&self, x: &DVector<f64>) -> Result<f64> {
        let v = self.eval(x);
        if self.positivity_declared && !(v > 0.0) {
            return Err(Error::NonPositiveField { field: self.name.clone(), value: v });
        }
        Ok(v)
    }

    /// Pointwise `min(self, cap)` as a new field.
    pub fn min_with(&self, cap: f64) -> Self {
        if let Some(c) = self.as_constant() {
            return Self::constant(&self.name, c.min(cap));
        }
        let inner = self.clone();
        Self::function(&self.name, move |x| inner.eval(&DVector::from_column_slice(x)).min(cap))
    }
}

pub fn coordinate_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("x{i}")).collect()
}

/// Parse expressions over ambient coordinates `x1..xn`, accepting `x, y, z`
/// as aliases of `x1, x2, x3`. `extra` names (such as `t`) follow the
/// coordinates in the variable list.
pub fn parse_ambient<S: AsRef<str>>(sources: &[S], n: usize, extra: &[&str]) -> Result<ExprMap> {
    parse_with_aliases(sources, coordinate_names(n), extra, &["x", "y", "z"])
}

/// Parse expressions over parameters `u1..um` (aliases `u, v, w`).
pub fn parse_parametric<S: AsRef<str>>(sources: &[S], m: usize, extra: &[&str]) -> Result<ExprMap> {
    parse_with_aliases(sources, (1..=m).map(|i| format!("u{i}")).collect(), extra, &["u", "v", "w"])
}

fn parse_with_aliases<S: AsRef<str>>(
    sources: &[S],
    base: Vec<String>,
    extra: &[&str],
    aliases: &[&str],
) -> Result<ExprMap> {
    let dim = base.len();
    let mut vars = base;
    vars.extend(extra.iter().map(|s| s.to_string()));
    let width = vars.len();
    let usable: Vec<&str> = aliases.iter().take(dim).copied().collect();
    let mut names: Vec<&str> = vars.iter().map(String::as_str).collect();
    names.extend(usable.iter().copied());
    let mut exprs = Vec::with_capacity(sources.len());
    for src in sources {
        let e = Expr::parse(src.as_ref(), &names)?;
        exprs.push(e.map_vars(&|i| if i >= width { i - width } else { i }));
    }
    Ok(ExprMap { exprs, sources: sources.iter().map(|s| s.as_ref().to_string()).collect(), vars })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aliases_map_to_indexed_names() {
        let m = parse_ambient(&["x^2 + y^2 + z - x3"], 3, &[]).unwrap();
        let v = m.eval(&[1.0, 2.0, 3.0]);
        assert_eq!(v[0], 5.0);
        let p = parse_parametric(&["cos(u)", "sin(u)"], 1, &["t"]).unwrap();
        assert_eq!(p.vars(), &["u1".to_string(), "t".to_string()]);
    }

    #[test]
    fn exact_and_fd_jacobians_agree() {
        let m = parse_ambient(&["x^2*y + sin(z)", "sqrt(x^2 + y^2 + z^2)"], 3, &[]).unwrap();
        let x = [0.4, -1.1, 0.9];
        let exact = m.jacobian(&x);
        let fd = central_jacobian(|p| m.eval(p), &x);
        assert!((exact - fd).abs().max() < 1e-9);
        let so = m.second_order(&x);
        let fm = FnMap::new(3, 2, move |p| m.eval(p).iter().copied().collect());
        let so_fd = fm.second_order(&x);
        for (a, b) in so.hessians.iter().zip(&so_fd.hessians) {
            assert!((a - b).abs().max() < 1e-5);
        }
    }

    #[test]
    fn field_positivity_is_checked() {
        let f = ScalarField::expression("delta", "0.1 - x", 1).unwrap();
        let x = DVector::from_vec(vec![0.5]);
        assert!(matches!(f.eval_positive(&x), Err(Error::NonPositiveField { .. })));
        let c = ScalarField::expression("delta", "0.25", 2).unwrap();
        assert_eq!(c.as_constant(), Some(0.25));
    }

    #[test]
    fn nearest_field_is_piecewise_constant() {
        let pts = vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![1.0])];
        let f = ScalarField::nearest("eps", pts, vec![0.1, 0.2]);
        assert_eq!(f.eval(&DVector::from_vec(vec![0.2])), 0.1);
        assert_eq!(f.eval(&DVector::from_vec(vec![0.7])), 0.2);
    }
}
