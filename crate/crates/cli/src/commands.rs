use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vecot_core::disintegration::{
    cd_check_1d, default_cd_tolerance, mixture_moments, radial_disintegration, reassemble, slice_disintegration,
    CdReport, Disintegration, GridDensity, RadialOptions,
};
use vecot_core::leaves::{derivative_modulus_check, strengthened_lipschitz_residual};
use vecot_core::mass_balance::smoothed_instance;
use vecot_core::{
    certify, decompose, mass_balance_report, maximal_transport_sets, random, run_counterexample, selftest, solve,
    CounterexampleSpec, Exec, Instance, LeafDecomposition, PotentialField, Preset, SolveReport, SolveStatus,
    SolverParams, VectorCoupling,
};

use crate::args::{
    CertifyArgs, Cli, Command, CounterexampleArgs, DisintegrateArgs, Family, InstanceArgs, LeavesArgs, MassBalanceArgs,
    Potential, SolveArgs,
};
use crate::output::{columns, num, read_json, read_text, to_value, write_document, CliError, Sidecars};

/// Runs the subcommand and writes its document. Returns the exit code.
pub fn run(cli: &Cli) -> Result<u8, CliError> {
    let exec = cli.exec();
    let sidecars = cli.csv_dir.as_deref().map(Sidecars::new).transpose()?;
    let (name, result, code) = match &cli.command {
        Command::Solve(args) => ("solve", solve_cmd(args, exec, sidecars.as_ref())?),
        Command::Certify(args) => ("certify", certify_cmd(args, exec)?),
        Command::Leaves(args) => ("leaves", leaves_cmd(args, exec)?),
        Command::Counterexample(args) => ("counterexample", counterexample_cmd(args, exec)?),
        Command::Massbalance(args) => ("massbalance", massbalance_cmd(args, exec)?),
        Command::Disintegrate(args) => ("disintegrate", disintegrate_cmd(args, exec, sidecars.as_ref())?),
        Command::Selftest => ("selftest", selftest_cmd(exec)?),
    }
    .into_parts();
    write_document(cli.output.as_deref(), name, to_value(cli)?, result)?;
    Ok(code)
}

/// A command's result document and exit code.
struct Outcome {
    result: Value,
    code: u8,
}

trait IntoParts {
    fn into_parts(self) -> (&'static str, Value, u8);
}

impl IntoParts for (&'static str, Outcome) {
    fn into_parts(self) -> (&'static str, Value, u8) {
        (self.0, self.1.result, self.1.code)
    }
}

fn status_code(status: SolveStatus) -> u8 {
    match status {
        SolveStatus::Converged => 0,
        SolveStatus::IterLimit => 3,
    }
}

fn load_instance(args: &InstanceArgs) -> Result<Instance, CliError> {
    match (&args.input, args.random) {
        (Some(path), _) => Ok(Instance::from_json(&read_text(path)?)?),
        (None, Some(len)) => {
            let mut rng = random::rng(args.seed);
            Ok(random::random_instance(&mut rng, args.dim, args.target_dim, len)?)
        }
        (None, None) => Err(CliError::Usage("either --input or --random is required".into())),
    }
}

/// One coupling entry in the JSON documents.
#[derive(Serialize, Deserialize)]
struct FlowEntry {
    i: usize,
    j: usize,
    flow: Vec<f64>,
}

fn flow_entries(pi: &VectorCoupling) -> Vec<FlowEntry> {
    pi.entries().map(|(i, j, f)| FlowEntry { i, j, flow: f.to_vec() }).collect()
}

/// The part of a `solve` document read back by other subcommands.
#[derive(Deserialize)]
struct SolutionDoc {
    result: SolutionResult,
}

#[derive(Deserialize)]
struct SolutionResult {
    coupling: Option<Vec<FlowEntry>>,
    potential: Option<Vec<Vec<f64>>>,
}

struct Solution {
    coupling: VectorCoupling,
    potential: PotentialField,
    report: Option<SolveReport>,
}

fn load_or_solve(
    instance: &Instance,
    solution: Option<&std::path::Path>,
    params: &SolverParams,
) -> Result<Solution, CliError> {
    let Some(path) = solution else {
        let (coupling, potential, report) = solve(instance, params)?;
        return Ok(Solution { coupling, potential, report: Some(report) });
    };
    let doc: SolutionDoc = read_json(path)?;
    let (Some(entries), Some(rows)) = (doc.result.coupling, doc.result.potential) else {
        return Err(CliError::Usage(format!(
            "{} has no inline coupling and potential (was it written with --csv-dir?)",
            path.display()
        )));
    };
    let m = instance.target_dim();
    let entries: Vec<(usize, usize, Vec<f64>)> = entries.into_iter().map(|e| (e.i, e.j, e.flow)).collect();
    if rows.len() != instance.len() {
        return Err(CliError::Usage(format!(
            "solution has {} potential values for {} points",
            rows.len(),
            instance.len()
        )));
    }
    if let Some(&(i, j, _)) = entries.iter().find(|e| e.0 >= instance.len() || e.1 >= instance.len()) {
        return Err(CliError::Usage(format!("coupling entry ({i}, {j}) is out of range")));
    }
    Ok(Solution {
        coupling: VectorCoupling::from_entries(m, &entries)?,
        potential: PotentialField::from_rows(&rows)?,
        report: None,
    })
}

fn solve_cmd(args: &SolveArgs, exec: Exec, sidecars: Option<&Sidecars>) -> Result<Outcome, CliError> {
    let instance = load_instance(&args.instance)?;
    let params = args.solver.params(SolverParams::default(), exec);
    let (coupling, potential, report) = solve(&instance, &params)?;
    let code = status_code(report.status);
    let mut result = json!({ "report": to_value(&report)? });
    let m = instance.target_dim();
    match sidecars {
        Some(s) => {
            let header: Vec<String> =
                ["i".to_string(), "j".to_string()].into_iter().chain(columns("flow", m)).collect();
            let flows = s.write(
                "coupling.csv",
                &header,
                coupling.entries().map(|(i, j, f)| {
                    [i.to_string(), j.to_string()].into_iter().chain(f.iter().map(|&x| num(x))).collect()
                }),
            )?;
            let header: Vec<String> = std::iter::once("point".to_string()).chain(columns("u", m)).collect();
            let values = s.write(
                "potential.csv",
                &header,
                (0..potential.len()).map(|i| {
                    std::iter::once(i.to_string()).chain(potential.value(i).iter().map(|&x| num(x))).collect()
                }),
            )?;
            result["sidecars"] = json!({ "coupling": flows, "potential": values });
        }
        None => {
            result["coupling"] = to_value(&flow_entries(&coupling))?;
            result["potential"] = to_value(&potential.rows())?;
        }
    }
    Ok(Outcome { result, code })
}

fn certify_cmd(args: &CertifyArgs, exec: Exec) -> Result<Outcome, CliError> {
    let instance = load_instance(&args.instance)?;
    let params = args.solver.params(SolverParams::default(), exec);
    let solution = load_or_solve(&instance, args.solution.as_deref(), &params)?;
    let certificate = certify(&solution.coupling, &solution.potential, &instance, args.tol)?;
    let code = solution.report.as_ref().map_or(0, |r| status_code(r.status));
    Ok(Outcome {
        result: json!({ "certificate": to_value(&certificate)?, "solver_report": to_value(&solution.report)? }),
        code,
    })
}

#[derive(Serialize)]
struct PairDiagnostics {
    leaves: (usize, usize),
    point_pairs: usize,
    min_residual: f64,
    /// `None` when a leaf has dimension below m.
    modulus_checks_failed: Option<usize>,
}

fn pair_diagnostics(
    d: &LeafDecomposition,
    instance: &Instance,
    u: &PotentialField,
) -> Result<Vec<PairDiagnostics>, CliError> {
    let m = u.target_dim();
    let cloud = instance.cloud();
    let nontrivial: Vec<usize> = d.leaves.iter().filter(|l| !l.is_trivial()).map(|l| l.id).collect();
    let mut out = Vec::new();
    for (k, &a) in nontrivial.iter().enumerate() {
        for &b in &nontrivial[k + 1..] {
            let full = d.leaves[a].dimension >= m && d.leaves[b].dimension >= m;
            let mut min_residual = f64::INFINITY;
            let mut failed = 0;
            let mut pairs = 0;
            for &x in &d.leaves[a].members {
                for &y in &d.leaves[b].members {
                    if x == y {
                        continue;
                    }
                    min_residual = min_residual.min(strengthened_lipschitz_residual(d, cloud, u, (a, b), (x, y))?);
                    if full && !derivative_modulus_check(d, cloud, u, (a, b), (x, y))?.pass {
                        failed += 1;
                    }
                    pairs += 1;
                }
            }
            out.push(PairDiagnostics {
                leaves: (a, b),
                point_pairs: pairs,
                min_residual,
                modulus_checks_failed: full.then_some(failed),
            });
        }
    }
    Ok(out)
}

fn leaves_cmd(args: &LeavesArgs, exec: Exec) -> Result<Outcome, CliError> {
    let instance = load_instance(&args.instance)?;
    let params = args.solver.params(SolverParams::default(), exec);
    let solution = load_or_solve(&instance, args.solution.as_deref(), &params)?;
    let decomposition = decompose(instance.cloud(), &solution.potential, args.epsilon, exec)?;
    let sets = maximal_transport_sets(&decomposition);
    let mut result = json!({
        "decomposition": to_value(&decomposition)?,
        "transport_sets": sets,
        "solver_report": to_value(&solution.report)?,
    });
    if args.diagnostics {
        result["diagnostics"] = to_value(&pair_diagnostics(&decomposition, &instance, &solution.potential)?)?;
    }
    let code = solution.report.as_ref().map_or(0, |r| status_code(r.status));
    Ok(Outcome { result, code })
}

#[derive(Serialize)]
struct SmoothedRun {
    epsilon: f64,
    points: usize,
    value: f64,
    /// `1 + √5`-style atomic value minus the smoothed value.
    deficit: f64,
    status: SolveStatus,
    iterations: usize,
    surrogate: bool,
}

fn counterexample_cmd(args: &CounterexampleArgs, exec: Exec) -> Result<Outcome, CliError> {
    let preset: Preset = args.preset.parse()?;
    let spec = CounterexampleSpec::preset(preset, args.n, args.m)?;
    let params = args.solver.params(SolverParams::default(), exec);
    let report = run_counterexample(&spec, &params, args.tol)?;
    let mut code = status_code(report.solver_report.status);
    let mut smoothed = Vec::new();
    for &eps in &args.smoothing {
        let instance = smoothed_instance(&spec, eps, args.points_per_ball)?;
        let (pi, _, solved) = solve(&instance, &params)?;
        code = code.max(status_code(solved.status));
        smoothed.push(SmoothedRun {
            epsilon: eps,
            points: instance.len(),
            value: solved.primal_value,
            deficit: report.analytic.value - solved.primal_value,
            status: solved.status,
            iterations: solved.iterations,
            surrogate: vecot_core::mass_balance::marginal_abs_continuity_surrogate(&pi, instance.measure(), args.tol)?,
        });
    }
    Ok(Outcome { result: json!({ "report": to_value(&report)?, "smoothed": to_value(&smoothed)? }), code })
}

fn massbalance_cmd(args: &MassBalanceArgs, exec: Exec) -> Result<Outcome, CliError> {
    let instance = load_instance(&args.instance)?;
    // saturation must be resolved well below ε
    let base = SolverParams { tol_gap: 1e-9, ..SolverParams::default() };
    let params = args.solver.params(base, exec);
    let solution = load_or_solve(&instance, args.solution.as_deref(), &params)?;
    let decomposition = decompose(instance.cloud(), &solution.potential, args.epsilon, exec)?;
    let report = mass_balance_report(&instance, &decomposition, args.tol)?;
    let code = solution.report.as_ref().map_or(0, |r| status_code(r.status));
    Ok(Outcome {
        result: json!({
            "mass_balance": to_value(&report)?,
            "leaves": decomposition.leaves.iter().map(|l| &l.members).collect::<Vec<_>>(),
            "boundary_flags": decomposition.boundary_flags,
            "solver_report": to_value(&solution.report)?,
        }),
        code,
    })
}

fn parse_n(text: &str) -> Result<f64, CliError> {
    match text.trim().to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
        other => other
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| CliError::Usage(format!("--cd-n must be a number or inf, got {text:?}"))),
    }
}

fn load_density(args: &DisintegrateArgs) -> Result<GridDensity, CliError> {
    if let Some(path) = &args.grid {
        return read_json(path);
    }
    let (n, w, r) = (args.dim, args.half_width, args.resolution);
    Ok(match args.family {
        Some(Family::Gaussian) | None => GridDensity::gaussian(n, w, r)?,
        Some(Family::Uniform) => GridDensity::uniform(n, w, r)?,
        Some(Family::Ball) => GridDensity::ball(n, args.radius, w, r)?,
    })
}

#[derive(Serialize)]
struct NeedleCd {
    needle: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<CdReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn cd_reports(dis: &Disintegration, kappa: f64, n: f64, tol: Option<f64>) -> Vec<NeedleCd> {
    dis.needles
        .iter()
        .enumerate()
        .filter(|(k, needle)| needle.dimension() == 1 && dis.weights[*k] > 0.0)
        .map(|(k, needle)| {
            let checked =
                tol.map_or_else(|| default_cd_tolerance(needle), Ok).and_then(|t| cd_check_1d(needle, kappa, n, t));
            match checked {
                Ok(report) => NeedleCd { needle: k, report: Some(report), error: None },
                Err(e) => NeedleCd { needle: k, report: None, error: Some(e.to_string()) },
            }
        })
        .collect()
}

fn disintegrate_cmd(args: &DisintegrateArgs, exec: Exec, sidecars: Option<&Sidecars>) -> Result<Outcome, CliError> {
    let density = load_density(args)?;
    let n_cd = parse_n(&args.cd_n)?;
    let geometry = density.geometry();
    let dis = match args.potential {
        Potential::Slice => slice_disintegration(&density, args.m, exec)?,
        Potential::Radial => {
            let center = args
                .center
                .clone()
                .unwrap_or_else(|| geometry.lower.iter().zip(&geometry.upper).map(|(l, u)| 0.5 * (l + u)).collect());
            let options = RadialOptions {
                directions: args.directions,
                radial_samples: args.radial_samples.unwrap_or(args.directions),
            };
            radial_disintegration(&density, &center, options, exec)?
        }
    };
    let back = reassemble(&dis.needles, &dis.weights, geometry, exec)?;
    let reassembly_l1 = back.l1_distance(&density)?;
    let moments = mixture_moments(&density, &dis);
    let cd = cd_reports(&dis, args.kappa, n_cd, args.cd_tol);
    let passed = cd.iter().filter(|c| c.report.as_ref().is_some_and(|r| r.pass)).count();
    let failed = cd.iter().filter(|c| c.report.as_ref().is_some_and(|r| !r.pass)).count();
    let mut result = json!({
        "geometry": to_value(geometry)?,
        "total_mass": density.total_mass(),
        "weights": dis.weights,
        "reassembly_l1": reassembly_l1,
        "moments": to_value(&moments)?,
        "cd": {
            "kappa": args.kappa,
            "n": args.cd_n,
            "passed": passed,
            "failed": failed,
            "skipped": cd.len() - passed - failed,
            "needles": to_value(&cd)?,
        },
    });
    match sidecars {
        Some(s) => {
            let m = dis.needles.first().map_or(0, |n| n.dimension());
            let header: Vec<String> = ["needle".to_string(), "k".to_string()]
                .into_iter()
                .chain(columns("t", m))
                .chain(std::iter::once("density".to_string()))
                .chain(columns("x", density.dim()))
                .collect();
            let rows = dis.needles.iter().enumerate().flat_map(|(j, needle)| {
                (0..needle.len()).map(move |k| {
                    [j.to_string(), k.to_string()]
                        .into_iter()
                        .chain(needle.parameters(k).into_iter().map(num))
                        .chain(std::iter::once(num(needle.density[k])))
                        .chain(needle.point(k).into_iter().map(num))
                        .collect()
                })
            });
            result["sidecars"] = json!({ "needles": s.write("needles.csv", &header, rows)? });
        }
        None => result["needles"] = to_value(&dis.needles)?,
    }
    Ok(Outcome { result, code: 0 })
}

fn selftest_cmd(exec: Exec) -> Result<Outcome, CliError> {
    let report = selftest::run_all(exec);
    for outcome in &report.criteria {
        eprintln!("{}", outcome.summary());
    }
    Ok(Outcome { result: to_value(&report)?, code: if report.pass { 0 } else { 4 } })
}
