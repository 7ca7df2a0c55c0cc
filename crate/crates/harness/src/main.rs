use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tubular_harness::gallery::{gallery, GalleryEntry};
use tubular_harness::run::{execute, project_batch, stream_seed, Log, RunOptions, EXIT_ERROR, EXIT_FAIL, EXIT_PASS};
use tubular_harness::{HarnessError, Scenario};

#[derive(Parser)]
#[command(
    name = "tubular",
    version,
    about = "Tubular-neighborhood retractions, diffeomorphism certificates and deformation checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct SolverArgs {
    /// Newton iteration cap of the projection solver.
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    residual_tol: Option<f64>,
    #[arg(long)]
    step_tol: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run {
        scenario: PathBuf,
        /// Override the sample budget.
        #[arg(long)]
        samples: Option<usize>,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Use the denser probe set for the epsilon budget.
        #[arg(long)]
        strict: bool,
        /// Omit timestamps and timings so reruns are byte-identical.
        #[arg(long)]
        deterministic: bool,
        /// Directory for the report, CSV and log.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Run the certify task of a scenario and write its report.
    Certify {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        deterministic: bool,
        /// Report file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Project CSV points (columns x_1..x_n) onto a scenario's tube manifold.
    Project {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output CSV; standard output when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// List, export or run the built-in scenarios.
    Gallery {
        #[arg(long, conflicts_with_all = ["run_all", "export"])]
        list: bool,
        #[arg(long)]
        run_all: bool,
        /// Write every scenario as JSON into this directory.
        #[arg(long)]
        export: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value = "gallery-out")]
        out: PathBuf,
    },
}

fn load(path: &Path) -> Result<Scenario, HarnessError> {
    let text = fs::read_to_string(path).map_err(HarnessError::io(path.display().to_string()))?;
    Scenario::from_json(&text)
}

fn options(solver: &SolverArgs) -> RunOptions {
    RunOptions {
        max_iter: solver.max_iter,
        residual_tol: solver.residual_tol,
        step_tol: solver.step_tol,
        ..RunOptions::default()
    }
}

fn fail(e: HarnessError) -> i32 {
    eprintln!("error: {e}");
    EXIT_ERROR
}

fn project(scenario: &Path, input: &Path, output: Option<&Path>, solver: &SolverArgs) -> i32 {
    let s = match load(scenario) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let opts = options(solver);
    let cfg = {
        let mut c = s.solver.unwrap_or_default();
        c.max_iter = opts.max_iter.unwrap_or(c.max_iter);
        c.residual_tol = opts.residual_tol.unwrap_or(c.residual_tol);
        c.step_tol = opts.step_tol.unwrap_or(c.step_tol);
        c
    };
    let result = s.manifold(&s.tube.manifold).and_then(|m| {
        let tube = tubular_core::retraction::TubularNeighborhood::auto(
            m,
            s.sampling.budget,
            stream_seed(s.sampling.seed, 0),
            cfg,
        )
        .map_err(HarnessError::core("tube"))?;
        let mut log = Log::new(true);
        project_batch(&tube, &[], Some(&input.display().to_string()), &mut log)
    });
    match result {
        Ok((verdict, _, Some(csv))) => {
            let written = match output {
                Some(p) => fs::write(p, csv).map_err(HarnessError::io(p.display().to_string())),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            };
            match written {
                Ok(()) => verdict.exit_code(),
                Err(e) => fail(e),
            }
        }
        Ok(_) => EXIT_ERROR,
        Err(e) => fail(e),
    }
}

fn run_gallery(entries: &[GalleryEntry], samples: Option<usize>, deterministic: bool, out: &Path) -> i32 {
    let mut worst = EXIT_PASS;
    for e in entries {
        let opts = RunOptions { samples, deterministic, out_dir: Some(out.to_path_buf()), ..RunOptions::default() };
        let code = execute(&e.scenario, &opts, None);
        let expected = e.expected.exit_code();
        let status = if code == expected { "ok" } else { "UNEXPECTED" };
        println!("{:<28} exit {code} (expected {expected}) {status}", e.scenario.name);
        if code == EXIT_ERROR {
            worst = EXIT_ERROR;
        } else if code != expected && worst != EXIT_ERROR {
            worst = EXIT_FAIL;
        }
    }
    worst
}

fn dispatch(cli: Cli) -> i32 {
    match cli.command {
        Command::Run { scenario, samples, seed, strict, deterministic, out, solver } => match load(&scenario) {
            Ok(s) => {
                let opts = RunOptions { samples, seed, strict, deterministic, out_dir: out, ..options(&solver) };
                execute(&s, &opts, None)
            }
            Err(e) => fail(e),
        },
        Command::Certify { scenario, samples, seed, strict, deterministic, out } => match load(&scenario) {
            Ok(s) if s.task.kind() == "certify" => {
                let out_dir = out.parent().filter(|d| !d.as_os_str().is_empty()).map(Path::to_path_buf);
                let opts = RunOptions { samples, seed, strict, deterministic, out_dir, ..RunOptions::default() };
                execute(&s, &opts, Some(&out))
            }
            Ok(s) => {
                fail(HarnessError::Scenario(format!("scenario `{}` has task {}, not certify", s.name, s.task.kind())))
            }
            Err(e) => fail(e),
        },
        Command::Project { scenario, input, output, solver } => project(&scenario, &input, output.as_deref(), &solver),
        Command::Gallery { list, run_all, export, samples, deterministic, out } => {
            let entries = gallery();
            if let Some(dir) = export {
                if let Err(e) = fs::create_dir_all(&dir).map_err(HarnessError::io(dir.display().to_string())) {
                    return fail(e);
                }
                for e in &entries {
                    let path = dir.join(format!("{}.json", e.scenario.name));
                    if let Err(err) = fs::write(&path, e.scenario.to_json() + "\n")
                        .map_err(HarnessError::io(path.display().to_string()))
                    {
                        return fail(err);
                    }
                }
            }
            if run_all {
                return run_gallery(&entries, samples, deterministic, &out);
            }
            if list || !run_all {
                for e in &entries {
                    println!("{:<28} {}", e.scenario.name, e.description);
                }
            }
            EXIT_PASS
        }
    }
}

/// Parse `args` (program name first) and run; usage errors exit with
/// [`EXIT_ERROR`], `--help` and `--version` with [`EXIT_PASS`].
fn run_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => dispatch(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_PASS };
            let _ = e.print();
            code
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run_args(std::env::args_os()) as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;
    use tubular_harness::gallery::find;

    fn scenario_file(dir: &Path, name: &str) -> PathBuf {
        let path = dir.join(format!("{name}.json"));
        fs::write(&path, find(name).expect("gallery entry").scenario.to_json()).unwrap();
        path
    }

    fn read_json(path: &Path) -> Value {
        serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
    }

    fn s(p: &Path) -> &str {
        p.to_str().unwrap()
    }

    #[test]
    fn usage_errors_exit_with_error_code() {
        assert_eq!(run_args(["tubular", "frobnicate"]), EXIT_ERROR);
        assert_eq!(run_args(["tubular", "run"]), EXIT_ERROR);
        assert_eq!(run_args(["tubular", "run", "x.json", "--samples", "many"]), EXIT_ERROR);
        assert_eq!(run_args(["tubular", "gallery", "--list", "--run-all"]), EXIT_ERROR);
        assert_eq!(run_args(["tubular", "--help"]), EXIT_PASS);
        assert_eq!(run_args(["tubular", "--version"]), EXIT_PASS);
    }

    #[test]
    fn malformed_scenario_reports_line_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{\n  \"name\": \"bad\",\n  \"tube\": oops\n}\n").unwrap();
        match load(&path) {
            Err(HarnessError::Parse { line, column, .. }) => assert_eq!((line, column), (3, 11)),
            other => panic!("expected a parse error, got {other:?}"),
        }
        assert_eq!(run_args(["tubular", "run", s(&path)]), EXIT_ERROR);
        assert_eq!(run_args(["tubular", "run", s(&dir.path().join("missing.json"))]), EXIT_ERROR);
    }

    #[test]
    fn run_exit_codes_and_deterministic_log() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let pass = scenario_file(dir.path(), "circle_identity");
        let fail = scenario_file(dir.path(), "circles_disjoint");
        let common = ["--samples", "60", "--deterministic", "--out", s(&out)];
        let code = run_args(["tubular", "run", s(&pass)].into_iter().chain(common));
        assert_eq!(code, EXIT_PASS);
        assert_eq!(run_args(["tubular", "run", s(&fail)].into_iter().chain(common)), EXIT_FAIL);

        let report = read_json(&out.join("circle_identity.report.json"));
        assert_eq!(report["verdict"], "pass");
        assert_eq!(report["exit_code"], 0);
        assert_eq!(report["samples"], 60);
        assert!(report.get("elapsed_seconds").is_none());
        let failed = read_json(&out.join("circles_disjoint.report.json"));
        assert_eq!(failed["verdict"], "fail");
        assert_eq!(failed["clauses"]["containment"]["passed"], false);

        let log = fs::read_to_string(out.join("circle_identity.log")).unwrap();
        assert!(!log.is_empty());
        assert!(log.lines().all(|l| l.starts_with("[tubular] ")), "{log}");
        // the log is append-only
        run_args(["tubular", "run", s(&pass)].into_iter().chain(common));
        let again = fs::read_to_string(out.join("circle_identity.log")).unwrap();
        assert_eq!(again, format!("{log}{log}"));
    }

    #[test]
    fn certify_writes_report_with_clauses() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = scenario_file(dir.path(), "circle_identity");
        let report = dir.path().join("cert").join("report.json");
        let code = run_args(["tubular", "certify", "--scenario", s(&scenario), "--samples", "60", "--out", s(&report)]);
        assert_eq!(code, EXIT_PASS);
        let r = read_json(&report);
        for clause in ["containment", "local_diffeo", "injectivity", "surjectivity", "properness"] {
            assert_eq!(r["clauses"][clause]["passed"], true, "{clause}");
        }
        assert!(r["max_defects"]["local_diffeo"].as_f64().unwrap() < 1e-6);
        assert!(r.get("elapsed_seconds").is_some());
        assert!(dir.path().join("cert").join("circle_identity.csv").exists());

        let other = scenario_file(dir.path(), "sphere_projection");
        let code = run_args(["tubular", "certify", "--scenario", s(&other), "--out", s(&report)]);
        assert_eq!(code, EXIT_ERROR);
    }

    #[test]
    fn project_writes_csv() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = scenario_file(dir.path(), "sphere_projection");
        let input = dir.path().join("points.csv");
        fs::write(&input, "x_1,x_2,x_3\n2,0,0\n0,-0.5,0\n0.3,0.4,1.2\n").unwrap();
        let output = dir.path().join("projected.csv");
        let code =
            run_args(["tubular", "project", "--scenario", s(&scenario), "--input", s(&input), "--output", s(&output)]);
        assert_eq!(code, EXIT_PASS);
        let mut rdr = csv::Reader::from_path(&output).unwrap();
        let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(header, ["x_1", "x_2", "x_3", "r_1", "r_2", "r_3", "dist", "converged"]);
        let rows: Vec<Vec<f64>> =
            rdr.records().map(|r| r.unwrap().iter().map(|c| c.parse().unwrap()).collect()).collect();
        assert_eq!(rows.len(), 3);
        for row in &rows {
            let (x, r) = (&row[0..3], &row[3..6]);
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            for i in 0..3 {
                assert!((r[i] - x[i] / norm).abs() < 1e-10);
            }
            assert!((row[6] - (norm - 1.0).abs()).abs() < 1e-10);
            assert_eq!(row[7], 1.0);
        }

        fs::write(&input, "x_1,x_2,x_3\n1,oops,0\n").unwrap();
        let code =
            run_args(["tubular", "project", "--scenario", s(&scenario), "--input", s(&input), "--output", s(&output)]);
        assert_eq!(code, EXIT_ERROR);
    }

    #[test]
    fn gallery_export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run_args(["tubular", "gallery", "--list"]), EXIT_PASS);
        assert_eq!(run_args(["tubular", "gallery", "--export", s(dir.path())]), EXIT_PASS);
        for e in gallery() {
            let text = fs::read_to_string(dir.path().join(format!("{}.json", e.scenario.name))).unwrap();
            assert_eq!(Scenario::from_json(&text).unwrap(), e.scenario);
        }
        assert!(dir.path().join("scaled_circle_deformation.json").exists());
    }
}
