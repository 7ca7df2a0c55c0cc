//! Scenario execution: sample, build the tube, run the task, write artifacts.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Map, Value};
use tubular_core::deformation::{
    chebyshev_grid, compute_delta_for, trivialize, DeformationFamily, TrivialityCertificate,
};
use tubular_core::equivalence::{certify_pipeline, BudgetOptions};
use tubular_core::field::{parse_ambient, SmoothMap};
use tubular_core::manifold::TangentFrame;
use tubular_core::retraction::TubularNeighborhood;
use tubular_core::rng::CounterRng;
use tubular_core::solver::SolverConfig;
use tubular_core::Manifold;

use crate::error::{HarnessError, Result};
use crate::scenario::{field, reference_map, DeformationSpec, Scenario, Task};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 2;
pub const EXIT_ERROR: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => EXIT_PASS,
            Verdict::Fail => EXIT_FAIL,
        }
    }

    fn of(passed: bool) -> Self {
        if passed {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

/// Command-line overrides of a scenario.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub strict: bool,
    pub deterministic: bool,
    pub out_dir: Option<PathBuf>,
    pub max_iter: Option<usize>,
    pub residual_tol: Option<f64>,
    pub step_tol: Option<f64>,
}

impl RunOptions {
    fn solver(&self, base: Option<SolverConfig>) -> SolverConfig {
        let mut cfg = base.unwrap_or_default();
        if let Some(v) = self.max_iter {
            cfg.max_iter = v;
        }
        if let Some(v) = self.residual_tol {
            cfg.residual_tol = v;
        }
        if let Some(v) = self.step_tol {
            cfg.step_tol = v;
        }
        cfg
    }
}

/// Append-only run log; timestamps are dropped in deterministic mode.
#[derive(Debug)]
pub struct Log {
    lines: Vec<String>,
    start: Instant,
    deterministic: bool,
}

impl Log {
    pub fn new(deterministic: bool) -> Self {
        Self { lines: Vec::new(), start: Instant::now(), deterministic }
    }

    fn line(&mut self, msg: impl AsRef<str>) {
        let line = if self.deterministic {
            format!("[tubular] {}", msg.as_ref())
        } else {
            format!("[tubular {:8.3}s] {}", self.start.elapsed().as_secs_f64(), msg.as_ref())
        };
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub verdict: Verdict,
    pub report: Value,
    /// Per-sample (or per-t) table, CSV text with a header row.
    pub csv: Option<String>,
    pub log: Log,
}

/// Independent seed for a numbered stream of the scenario seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    CounterRng::new(seed).split(stream).draw(0)
}

fn num(v: f64) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "nan".into()
    }
}

fn csv_text(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| HarnessError::Scenario(e.to_string()))?).expect("ascii csv"))
}

fn coords(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

fn to_object(v: impl Serialize) -> Map<String, Value> {
    match serde_json::to_value(v).expect("report serializes") {
        Value::Object(m) => m,
        _ => unreachable!("reports are structs"),
    }
}

struct Context<'a> {
    scenario: &'a Scenario,
    budget: usize,
    seed: u64,
    strict: bool,
    solver: SolverConfig,
}

fn build_tube(ctx: &Context<'_>, log: &mut Log) -> Result<TubularNeighborhood> {
    let s = ctx.scenario;
    let m = s.manifold(&s.tube.manifold)?;
    let n = m.ambient_dim();
    let tube = TubularNeighborhood::auto(m, ctx.budget, stream_seed(ctx.seed, 0), ctx.solver)
        .map_err(HarnessError::core("tube"))?;
    log.line(format!(
        "tube on `{}`: {} seeds, reach lower bound {}",
        s.tube.manifold,
        tube.seeds().len(),
        tube.reach_lower_bound
    ));
    if s.tube.delta == "auto" {
        return Ok(tube);
    }
    Ok(tube.with_delta(field("delta", &s.tube.delta, n)?))
}

fn tube_summary(tube: &TubularNeighborhood, name: &str) -> Value {
    json!({
        "manifold": name,
        "delta": tube.delta.as_constant().map(num).unwrap_or_else(|| Value::String(tube.delta.name().into())),
        "reach_lower_bound": num(tube.reach_lower_bound),
        "seeds": tube.seeds().len(),
    })
}

/// Execute the scenario's task without touching the file system (except
/// for reading a `project_batch` input CSV).
pub fn run(scenario: &Scenario, opts: &RunOptions) -> Result<RunOutcome> {
    scenario.validate()?;
    let ctx = Context {
        scenario,
        budget: opts.samples.unwrap_or(scenario.sampling.budget),
        seed: opts.seed.unwrap_or(scenario.sampling.seed),
        strict: opts.strict,
        solver: opts.solver(scenario.solver),
    };
    if ctx.budget == 0 {
        return Err(HarnessError::Scenario("sample budget must be positive".into()));
    }
    let mut log = Log::new(opts.deterministic);
    log.line(format!(
        "scenario `{}`: task {}, budget {}, seed {}",
        scenario.name,
        scenario.task.kind(),
        ctx.budget,
        ctx.seed
    ));
    let tube = build_tube(&ctx, &mut log)?;
    let (verdict, body, csv) = match &scenario.task {
        Task::ProjectBatch { points, input_csv } => project_batch(&tube, points, input_csv.as_deref(), &mut log)?,
        Task::Certify { target, map } => certify(&ctx, &tube, target, map.as_deref(), &mut log)?,
        Task::Trivialize { deformation } => {
            let (cert, body, csv) = trivialize_task(tube.clone(), deformation, &mut log)?;
            (Verdict::of(cert.passed()), body, csv)
        }
        Task::BudgetOnly { target } => budget_only(&ctx, &tube, target.as_deref(), &mut log)?,
    };
    log.line(format!("verdict: {}", if verdict == Verdict::Pass { "pass" } else { "fail" }));
    let mut report = Map::new();
    report.insert("scenario".into(), Value::String(scenario.name.clone()));
    report.insert("task".into(), Value::String(scenario.task.kind().into()));
    report.insert("seed".into(), json!(ctx.seed));
    report.insert("samples".into(), json!(ctx.budget));
    report.insert("strict".into(), json!(ctx.strict));
    report.insert("exit_code".into(), json!(verdict.exit_code()));
    report.insert("tube".into(), tube_summary(&tube, &scenario.tube.manifold));
    for (k, v) in body {
        report.insert(k, v);
    }
    report.insert("verdict".into(), serde_json::to_value(verdict).unwrap());
    if !opts.deterministic {
        report.insert("elapsed_seconds".into(), num(log.start.elapsed().as_secs_f64()));
    }
    Ok(RunOutcome { verdict, report: Value::Object(report), csv, log })
}

type TaskOutput = (Verdict, Map<String, Value>, Option<String>);

fn read_points(path: &str, n: usize) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let vals: std::result::Result<Vec<f64>, _> = rec.iter().take(n).map(|c| c.trim().parse::<f64>()).collect();
        match vals {
            Ok(v) if v.len() == n => out.push(v),
            _ => return Err(HarnessError::Scenario(format!("{path}: row {} does not hold {n} numbers", row + 2))),
        }
    }
    Ok(out)
}

pub fn project_batch(
    tube: &TubularNeighborhood,
    listed: &[Vec<f64>],
    input: Option<&str>,
    log: &mut Log,
) -> Result<TaskOutput> {
    let n = tube.manifold.ambient_dim();
    let mut points = listed.to_vec();
    if let Some(path) = input {
        points.extend(read_points(path, n)?);
    }
    if let Some(p) = points.iter().find(|p| p.len() != n) {
        return Err(HarnessError::Core {
            context: "project_batch".into(),
            source: tubular_core::Error::DimensionMismatch { expected: n, found: p.len() },
        });
    }
    let xs: Vec<DVector<f64>> = points.iter().map(|p| DVector::from_vec(p.clone())).collect();
    let results = tube.project_batch(&xs);
    let mut header = coords("x", n);
    header.extend(coords("r", n));
    header.extend(["dist".to_string(), "converged".to_string()]);
    let mut rows = Vec::with_capacity(xs.len());
    let mut failures = Vec::new();
    for (i, (x, r)) in xs.iter().zip(&results).enumerate() {
        let mut row: Vec<String> = x.iter().map(|v| fmt(*v)).collect();
        match r {
            Ok(p) => {
                row.extend(p.point.iter().map(|v| fmt(*v)));
                row.push(fmt(p.distance));
                row.push("1".into());
            }
            Err(e) => {
                row.extend((0..n).map(|_| "nan".to_string()));
                row.push("nan".into());
                row.push("0".into());
                failures.push(json!({"index": i, "point": x.as_slice(), "module": e.module(), "error": e.to_string()}));
            }
        }
        rows.push(row);
    }
    log.line(format!("projected {} points, {} failures", xs.len(), failures.len()));
    let mut body = Map::new();
    body.insert("points".into(), json!(xs.len()));
    body.insert("converged".into(), json!(xs.len() - failures.len()));
    let verdict = Verdict::of(failures.is_empty());
    body.insert("failures".into(), Value::Array(failures));
    Ok((verdict, body, Some(csv_text(&header, &rows)?)))
}

fn certify(
    ctx: &Context<'_>,
    tube: &TubularNeighborhood,
    target: &str,
    map: Option<&[String]>,
    log: &mut Log,
) -> Result<TaskOutput> {
    let n = ctx.scenario.manifold(target)?;
    let samples =
        n.sample(ctx.budget, stream_seed(ctx.seed, 1)).map_err(HarnessError::core(format!("sampling `{target}`")))?;
    log.line(format!("sampled {} points on `{target}`", samples.len()));
    let h: Option<Arc<dyn SmoothMap>> = match map {
        Some(src) => Some(Arc::new(parse_ambient(src, n.ambient_dim(), &[]).map_err(HarnessError::core("map"))?)),
        None => None,
    };
    let opts = BudgetOptions { strict: ctx.strict };
    let (report, budget, cert) =
        certify_pipeline(tube, &n, h.as_deref(), &samples, &opts).map_err(HarnessError::core("certify"))?;
    log.line(format!(
        "closeness: max c0 {}, max c1 {}; min epsilon {}",
        report.max_c0,
        report.max_c1,
        budget.min_epsilon()
    ));
    for w in &cert.witnesses {
        log.line(format!("witness [{}] at {:?}: {}", w.clause, w.point, w.detail));
    }
    let mut body = to_object(&cert);
    body.remove("verdict");
    let mut b = to_object(&budget);
    b.remove("samples");
    b.insert("min_epsilon".into(), num(budget.min_epsilon()));
    body.insert("budget".into(), Value::Object(b));
    let mut c = to_object(&report);
    c.remove("samples");
    body.insert("closeness".into(), Value::Object(c));

    let dim = n.ambient_dim();
    let mut header = coords("x", dim);
    header.extend(
        ["c0", "c1", "combined", "distance", "eta", "mu", "derivative_norm", "epsilon"].iter().map(|s| s.to_string()),
    );
    let rows: Vec<Vec<String>> = report
        .samples
        .iter()
        .zip(&budget.samples)
        .map(|(c, b)| {
            let mut r: Vec<String> = c.point.iter().map(|v| fmt(*v)).collect();
            r.extend(
                [c.c0_defect, c.c1_defect, c.combined, c.distance, b.eta, b.mu, b.derivative_norm, b.epsilon].map(fmt),
            );
            r
        })
        .collect();
    Ok((Verdict::of(cert.passed()), body, Some(csv_text(&header, &rows)?)))
}

/// Build the deformation family of a scenario block over the base manifold `m`.
pub fn family(spec: &DeformationSpec, m: Manifold) -> Result<DeformationFamily> {
    let n = m.ambient_dim();
    spec.slice.build("Z_t", Some(0.0))?;
    let slice = spec.slice.clone();
    let reference = match &spec.reference_map {
        Some(src) => Some(reference_map(src, n)?),
        None => None,
    };
    let grid = spec.t_grid.clone().unwrap_or_else(|| chebyshev_grid(17));
    let mut f = DeformationFamily::new(
        m,
        move |t| {
            slice.build("Z_t", Some(t)).map_err(|e| match e {
                HarnessError::Core { source, .. } => source,
                other => tubular_core::Error::Invalid(other.to_string()),
            })
        },
        reference,
        grid,
    )
    .map_err(HarnessError::core("deformation"))?;
    f.smoothness_p = spec.smoothness_p;
    Ok(f)
}

fn trivialize_task(
    tube: TubularNeighborhood,
    spec: &DeformationSpec,
    log: &mut Log,
) -> Result<(TrivialityCertificate, Map<String, Value>, Option<String>)> {
    let n = tube.manifold.ambient_dim();
    let fam = family(spec, tube.manifold.clone())?;
    let eps = field("eps", &spec.eps, n)?;
    let samples: Vec<TangentFrame> = tube.seeds().to_vec();
    let delta = match spec.delta.as_str() {
        "compute" => compute_delta_for(&eps, &tube, &samples).map_err(HarnessError::core("delta"))?,
        "tube" => tube.delta.clone(),
        src => field("delta", src, n)?,
    };
    log.line(format!(
        "trivializing over {} grid points, delta {}",
        fam.t_grid.len(),
        delta.as_constant().map(|d| d.to_string()).unwrap_or_else(|| delta.name().to_string())
    ));
    let tube = tube.with_delta(delta);
    let cert = trivialize(&fam, &tube, &eps, &samples).map_err(HarnessError::core("trivialize"))?;
    for c in cert.failed_clauses() {
        log.line(format!("clause failed: {c}"));
    }
    let mut body = to_object(&cert);
    body.remove("verdict");
    let header: Vec<String> = TrivialityCertificate::CSV_HEADER.iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = cert.csv_rows().iter().map(|r| r.iter().map(|v| fmt(*v)).collect()).collect();
    let csv = csv_text(&header, &rows)?;
    Ok((cert, body, Some(csv)))
}

fn budget_only(
    ctx: &Context<'_>,
    tube: &TubularNeighborhood,
    target: Option<&str>,
    log: &mut Log,
) -> Result<TaskOutput> {
    let samples = match target {
        Some(t) => ctx
            .scenario
            .manifold(t)?
            .sample(ctx.budget, stream_seed(ctx.seed, 1))
            .map_err(HarnessError::core(format!("sampling `{t}`")))?,
        None => tube.seeds().to_vec(),
    };
    let b = tubular_core::equivalence::budget(
        tube,
        &tube.manifold.bounding_box,
        &samples,
        &BudgetOptions { strict: ctx.strict },
    )
    .map_err(HarnessError::core("budget"))?;
    log.line(format!("budget over {} points, min epsilon {}", samples.len(), b.min_epsilon()));
    let mut body = Map::new();
    let mut summary = to_object(&b);
    summary.remove("samples");
    summary.insert("min_epsilon".into(), num(b.min_epsilon()));
    body.insert("budget".into(), Value::Object(summary));
    let mut header = coords("x", tube.manifold.ambient_dim());
    header.extend(["eta", "mu", "derivative_norm", "derivative_cap", "epsilon"].iter().map(|s| s.to_string()));
    let rows: Vec<Vec<String>> = b
        .samples
        .iter()
        .map(|s| {
            let mut r: Vec<String> = s.point.iter().map(|v| fmt(*v)).collect();
            r.extend([s.eta, s.mu, s.derivative_norm, s.derivative_cap, s.epsilon].map(fmt));
            r
        })
        .collect();
    Ok((Verdict::Pass, body, Some(csv_text(&header, &rows)?)))
}

/// Where a run's artifacts go.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub report: PathBuf,
    pub csv: PathBuf,
    pub log: PathBuf,
}

impl Artifacts {
    pub fn for_scenario(s: &Scenario, out_dir: Option<&Path>) -> Self {
        let place = |configured: Option<&String>, default: String| -> PathBuf {
            let p = configured.map(PathBuf::from).unwrap_or_else(|| PathBuf::from(default));
            match out_dir {
                Some(dir) => dir.join(p.file_name().expect("artifact file name")),
                None => p,
            }
        };
        Self {
            report: place(s.outputs.report_path.as_ref(), format!("{}.report.json", s.name)),
            csv: place(s.outputs.csv_path.as_ref(), format!("{}.csv", s.name)),
            log: place(None, format!("{}.log", s.name)),
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(HarnessError::io(dir.display().to_string()))?;
    }
    fs::write(path, text).map_err(HarnessError::io(path.display().to_string()))
}

fn append_log(path: &Path, lines: &[String]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(HarnessError::io(dir.display().to_string()))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(HarnessError::io(path.display().to_string()))?;
    for l in lines {
        writeln!(f, "{l}").map_err(HarnessError::io(path.display().to_string()))?;
    }
    Ok(())
}

pub fn error_report(scenario: Option<&Scenario>, err: &HarnessError) -> Value {
    let witness = match err {
        HarnessError::Core { source, .. } => source.witness().map(|w| json!(w)),
        _ => None,
    };
    json!({
        "scenario": scenario.map(|s| s.name.clone()),
        "task": scenario.map(|s| s.task.kind()),
        "verdict": "error",
        "exit_code": EXIT_ERROR,
        "error": {"module": err.module(), "message": err.to_string(), "witness": witness},
    })
}

/// Run and write the report, CSV and log; returns the exit code.
pub fn execute(scenario: &Scenario, opts: &RunOptions, report_override: Option<&Path>) -> i32 {
    let mut paths = Artifacts::for_scenario(scenario, opts.out_dir.as_deref());
    if let Some(p) = report_override {
        paths.report = p.to_path_buf();
    }
    let written = match run(scenario, opts) {
        Ok(outcome) => {
            for l in outcome.log.lines() {
                eprintln!("{l}");
            }
            let pretty = serde_json::to_string_pretty(&outcome.report).expect("report serializes") + "\n";
            write_file(&paths.report, &pretty)
                .and_then(|_| match &outcome.csv {
                    Some(text) => write_file(&paths.csv, text),
                    None => Ok(()),
                })
                .and_then(|_| append_log(&paths.log, outcome.log.lines()))
                .map(|_| outcome.verdict.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            let pretty = serde_json::to_string_pretty(&error_report(Some(scenario), &e)).unwrap() + "\n";
            write_file(&paths.report, &pretty)
                .and_then(|_| append_log(&paths.log, &[format!("[tubular] error: {e}")]))
                .map(|_| EXIT_ERROR)
        }
    };
    written.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        EXIT_ERROR
    })
}
