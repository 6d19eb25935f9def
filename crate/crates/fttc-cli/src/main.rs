//! Command-line front end: load problems, run the mechanisms and
//! checkers, and emit exact assignments, traces, and axiom reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use fttc::axioms::{
    check_be, check_eene, check_ef, check_ete, check_ir, check_sd_efficiency, check_stepwise,
    AxiomReport, StepwiseProperty, Witness,
};
use fttc::engine::{
    parse_custom_policy, run_fttc_with_budget, EngineError, Policy, Trace, DEFAULT_STEP_BUDGET,
};
use fttc::house::{
    egalitarian_solution, run_eating, run_rp, welfare_vector, DichotomousProblem, EatingSchedule,
    HouseError,
};
use fttc::model::{parse_problem, Assignment, Problem, Rational};
use fttc::solver::ObjectKind;

#[derive(Parser)]
#[command(
    name = "fttc",
    about = "Fractional endowment exchange: trading, eating, and fairness checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the step-by-step trading procedure on a problem file.
    Solve(SolveArgs),
    /// Bottleneck decomposition and egalitarian assignment of a
    /// dichotomous problem.
    Egalitarian(ProblemArgs),
    /// Exact Random Priority expectation on a dichotomous problem.
    Rp(ProblemArgs),
    /// Continuous-time eating simulation on a house-allocation problem.
    Eat(EatArgs),
    /// Verify an externally produced assignment against the axioms.
    Check(CheckArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Problem description (JSON).
    problem: PathBuf,
    /// equal | proportional | leveling | custom:<file>
    #[arg(long, default_value = "equal")]
    policy: String,
    /// Include the full step-by-step trace in the report.
    #[arg(long)]
    trace: bool,
    /// Comma-separated axioms to verify (e.g. ir,sd-efficiency,stepwise-ete).
    #[arg(long, value_delimiter = ',')]
    check: Vec<String>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct ProblemArgs {
    problem: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct EatArgs {
    problem: PathBuf,
    /// equal | proportional | leveling
    #[arg(long, default_value = "equal")]
    policy: String,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct CheckArgs {
    problem: PathBuf,
    /// Assignment to verify: {"agent": {"object": "share", ...}, ...}
    #[arg(long)]
    assignment: PathBuf,
    /// Comma-separated axioms; defaults to every trace-free one.
    #[arg(long, value_delimiter = ',')]
    check: Vec<String>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(ValueEnum, Clone, Copy, Default, PartialEq, Eq)]
enum Format {
    #[default]
    Json,
    Table,
}

/// Exit codes: 1 internal, 2 invalid input, 3 axiom failure, 4 budget
/// exceeded.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn internal(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn axioms(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }

    fn budget(message: impl Into<String>) -> Self {
        Failure {
            code: 4,
            message: message.into(),
        }
    }
}

fn engine_failure(err: EngineError) -> Failure {
    match &err {
        EngineError::Invalid(violations) => {
            let mut message = String::from("invalid problem:");
            for violation in violations {
                let _ = write!(message, " {violation:?};");
            }
            Failure::invalid(message)
        }
        EngineError::BudgetExceeded { .. } | EngineError::Stalled { .. } => {
            Failure::budget(err.to_string())
        }
        EngineError::BadPolicy { .. } => Failure::invalid(err.to_string()),
        _ => Failure::internal(err.to_string()),
    }
}

fn house_failure(err: HouseError) -> Failure {
    match err {
        HouseError::Engine(inner) => engine_failure(inner),
        HouseError::RateSystemSingular | HouseError::Internal(_) => {
            Failure::internal(err.to_string())
        }
        _ => Failure::invalid(err.to_string()),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Egalitarian(args) => cmd_egalitarian(args),
        Command::Rp(args) => cmd_rp(args),
        Command::Eat(args) => cmd_eat(args),
        Command::Check(args) => cmd_check(args),
    }
}

fn load_problem(path: &Path) -> Result<Problem, Failure> {
    let bytes = fs::read(path)
        .map_err(|e| Failure::invalid(format!("cannot read {}: {e}", path.display())))?;
    parse_problem(&bytes).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn parse_policy(text: &str, problem: &Problem) -> Result<Policy, Failure> {
    match text {
        "equal" => Ok(Policy::Equal),
        "proportional" => Ok(Policy::Proportional),
        "leveling" => Ok(Policy::Leveling),
        other => {
            let Some(path) = other.strip_prefix("custom:") else {
                return Err(Failure::invalid(format!(
                    "unknown policy {other:?}; expected equal, proportional, leveling, or custom:<file>"
                )));
            };
            let bytes = fs::read(path)
                .map_err(|e| Failure::invalid(format!("cannot read {path}: {e}")))?;
            let custom = parse_custom_policy(&bytes, problem)
                .map_err(|e| Failure::invalid(format!("{path}: {e}")))?;
            Ok(Policy::Custom(custom))
        }
    }
}

fn step_budget() -> Result<u64, Failure> {
    match std::env::var("FTTC_STEP_BUDGET") {
        Ok(raw) => raw
            .parse()
            .map_err(|_| Failure::invalid(format!("FTTC_STEP_BUDGET must be an integer, got {raw:?}"))),
        Err(_) => Ok(DEFAULT_STEP_BUDGET),
    }
}

fn run_checks(
    problem: &Problem,
    assignment: &Assignment,
    trace: Option<&Trace>,
    names: &[String],
) -> Result<Vec<AxiomReport>, Failure> {
    names
        .iter()
        .map(|name| {
            let stepwise = |property| {
                trace.map(|t| check_stepwise(t, property)).ok_or_else(|| {
                    Failure::invalid(format!("axiom {name:?} needs a solver trace"))
                })
            };
            match name.as_str() {
                "ir" => Ok(check_ir(problem, assignment)),
                "sd-efficiency" => Ok(check_sd_efficiency(problem, assignment)),
                "ete" => Ok(check_ete(problem, assignment)),
                "eene" => Ok(check_eene(problem, assignment)),
                "ef" => Ok(check_ef(problem, assignment)),
                "be" => Ok(check_be(problem, assignment)),
                "stepwise-ete" => stepwise(StepwiseProperty::Ete),
                "stepwise-eeet" => stepwise(StepwiseProperty::Eeet),
                "bounded-advantage" => stepwise(StepwiseProperty::BoundedAdvantage),
                other => Err(Failure::invalid(format!("unknown axiom {other:?}"))),
            }
        })
        .collect()
}

fn cmd_solve(args: SolveArgs) -> Result<(), Failure> {
    let problem = load_problem(&args.problem)?;
    let policy = parse_policy(&args.policy, &problem)?;
    let (assignment, trace) =
        run_fttc_with_budget(&problem, &policy, step_budget()?).map_err(engine_failure)?;
    let reports = run_checks(&problem, &assignment, Some(&trace), &args.check)?;

    match args.format {
        Format::Json => {
            let mut report = json!({
                "policy": args.policy,
                "steps": trace.steps.len(),
                "assignment": assignment_value(&problem, &assignment),
            });
            if !reports.is_empty() {
                report["axioms"] = axioms_value(&problem, &reports);
            }
            if args.trace {
                report["trace"] = trace_value(&problem, &trace);
            }
            emit(&report);
        }
        Format::Table => {
            let mut out = String::new();
            let _ = writeln!(out, "policy: {}", args.policy);
            let _ = writeln!(out, "steps: {}", trace.steps.len());
            let _ = write!(out, "{}", assignment_table(&problem, &assignment));
            if !reports.is_empty() {
                let _ = write!(out, "{}", axioms_table(&problem, &reports));
            }
            if args.trace {
                let _ = write!(out, "{}", trace_table(&problem, &trace));
            }
            print!("{out}");
        }
    }
    fail_on_broken_axioms(&reports)
}

fn cmd_egalitarian(args: ProblemArgs) -> Result<(), Failure> {
    let problem = load_problem(&args.problem)?;
    let dichotomous = DichotomousProblem::from_problem(&problem).map_err(house_failure)?;
    let (sequence, welfare) = egalitarian_solution(&dichotomous).map_err(house_failure)?;
    let economy = dichotomous.to_problem();
    let (padded, _) =
        run_fttc_with_budget(&economy, &Policy::Equal, step_budget()?).map_err(engine_failure)?;
    // the real-object columns carry exactly the acceptable welfare; the
    // null padding keeps the leftovers
    let assignment = Assignment::from_rows(
        (0..problem.num_agents())
            .map(|i| padded.row(i)[..problem.num_objects()].to_vec())
            .collect(),
    );
    debug_assert_eq!(welfare_vector(&dichotomous, &assignment), welfare);

    match args.format {
        Format::Json => {
            let bottlenecks: Vec<Value> = sequence
                .stages
                .iter()
                .map(|stage| {
                    json!({
                        "agents": stage.agents.iter().map(|&i| &problem.agents[i]).collect::<Vec<_>>(),
                        "objects": stage.objects.iter().map(|&o| &problem.objects[o]).collect::<Vec<_>>(),
                        "welfare": stage.welfare,
                    })
                })
                .collect();
            let welfare: BTreeMap<&String, &Rational> =
                problem.agents.iter().zip(&welfare).collect();
            emit(&json!({
                "bottlenecks": bottlenecks,
                "welfare": welfare,
                "assignment": assignment_value(&problem, &assignment),
            }));
        }
        Format::Table => {
            let mut out = String::new();
            let _ = writeln!(out, "bottlenecks:");
            for stage in &sequence.stages {
                let agents = stage
                    .agents
                    .iter()
                    .map(|&i| problem.agents[i].as_str())
                    .collect::<Vec<_>>()
                    .join(", ");
                let objects = stage
                    .objects
                    .iter()
                    .map(|&o| problem.objects[o].as_str())
                    .collect::<Vec<_>>()
                    .join(", ");
                let _ = writeln!(
                    out,
                    "  {{{agents}}} receive {{{objects}}} at welfare {}",
                    stage.welfare
                );
            }
            let _ = write!(out, "{}", assignment_table(&problem, &assignment));
            print!("{out}");
        }
    }
    Ok(())
}

fn cmd_rp(args: ProblemArgs) -> Result<(), Failure> {
    let problem = load_problem(&args.problem)?;
    let dichotomous = DichotomousProblem::from_problem(&problem).map_err(house_failure)?;
    let assignment = run_rp(&dichotomous).map_err(house_failure)?;
    match args.format {
        Format::Json => emit(&json!({
            "assignment": assignment_value(&problem, &assignment),
        })),
        Format::Table => print!("{}", assignment_table(&problem, &assignment)),
    }
    Ok(())
}

fn cmd_eat(args: EatArgs) -> Result<(), Failure> {
    let problem = load_problem(&args.problem)?;
    let policy = parse_policy(&args.policy, &problem)?;
    let (assignment, schedule) = run_eating(&problem, &policy).map_err(house_failure)?;
    match args.format {
        Format::Json => emit(&json!({
            "assignment": assignment_value(&problem, &assignment),
            "schedule": schedule_value(&problem, &schedule),
        })),
        Format::Table => {
            let mut out = assignment_table(&problem, &assignment);
            let _ = writeln!(out, "intervals:");
            for (k, window) in schedule.breakpoints.windows(2).enumerate() {
                let rates = problem
                    .agents
                    .iter()
                    .zip(&schedule.rates[k])
                    .map(|(agent, rate)| format!("{agent}={rate}"))
                    .collect::<Vec<_>>()
                    .join(" ");
                let _ = writeln!(out, "  [{}, {}] rates {rates}", window[0], window[1]);
            }
            print!("{out}");
        }
    }
    Ok(())
}

fn cmd_check(args: CheckArgs) -> Result<(), Failure> {
    let problem = load_problem(&args.problem)?;
    let assignment = load_assignment(&args.assignment, &problem)?;
    let names = if args.check.is_empty() {
        ["ir", "sd-efficiency", "ete", "eene", "ef", "be"]
            .map(String::from)
            .to_vec()
    } else {
        args.check
    };
    let reports = run_checks(&problem, &assignment, None, &names)?;
    match args.format {
        Format::Json => emit(&json!({ "axioms": axioms_value(&problem, &reports) })),
        Format::Table => print!("{}", axioms_table(&problem, &reports)),
    }
    fail_on_broken_axioms(&reports)
}

fn load_assignment(path: &Path, problem: &Problem) -> Result<Assignment, Failure> {
    let bytes = fs::read(path)
        .map_err(|e| Failure::invalid(format!("cannot read {}: {e}", path.display())))?;
    let rows: BTreeMap<String, BTreeMap<String, Rational>> = serde_json::from_slice(&bytes)
        .map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
    let mut assignment = Assignment::zeros(problem.num_agents(), problem.num_objects());
    for (agent, shares) in &rows {
        let i = problem
            .agent_index(agent)
            .ok_or_else(|| Failure::invalid(format!("unknown agent {agent:?} in assignment")))?;
        for (object, share) in shares {
            let o = problem.object_index(object).ok_or_else(|| {
                Failure::invalid(format!("unknown object {object:?} in assignment"))
            })?;
            assignment.set(i, o, share.clone());
        }
    }
    assignment
        .validate_for(problem)
        .map_err(|e| Failure::invalid(format!("infeasible assignment: {e}")))?;
    Ok(assignment)
}

fn fail_on_broken_axioms(reports: &[AxiomReport]) -> Result<(), Failure> {
    let broken: Vec<&str> = reports
        .iter()
        .filter(|r| !r.holds)
        .map(|r| r.axiom.name())
        .collect();
    if broken.is_empty() {
        Ok(())
    } else {
        Err(Failure::axioms(format!("failed: {}", broken.join(", "))))
    }
}

fn emit(value: &Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("reports serialize")
    );
}

fn lottery_value(problem: &Problem, row: &[Rational]) -> Value {
    let shares: BTreeMap<&String, &Rational> = problem
        .objects
        .iter()
        .zip(row)
        .filter(|(_, q)| !q.is_zero())
        .collect();
    json!(shares)
}

fn assignment_value(problem: &Problem, assignment: &Assignment) -> Value {
    let rows: BTreeMap<&String, Value> = problem
        .agents
        .iter()
        .enumerate()
        .map(|(i, agent)| (agent, lottery_value(problem, assignment.row(i))))
        .collect();
    json!(rows)
}

fn lottery_text(problem: &Problem, row: &[Rational]) -> String {
    let parts: Vec<String> = problem
        .objects
        .iter()
        .zip(row)
        .filter(|(_, q)| !q.is_zero())
        .map(|(name, q)| format!("{q} {name}"))
        .collect();
    if parts.is_empty() {
        "-".into()
    } else {
        parts.join(" + ")
    }
}

fn assignment_table(problem: &Problem, assignment: &Assignment) -> String {
    let mut out = String::from("assignment:\n");
    for (i, agent) in problem.agents.iter().enumerate() {
        let _ = writeln!(out, "  {agent}: {}", lottery_text(problem, assignment.row(i)));
    }
    out
}

fn witness_value(problem: &Problem, witness: &Witness) -> Value {
    match witness {
        Witness::Agent(i) => json!({ "agent": problem.agents[*i] }),
        Witness::Pair { i, j } => json!({
            "i": problem.agents[*i],
            "j": problem.agents[*j],
        }),
        Witness::StepPair { step, i, j, object } => json!({
            "step": step,
            "i": problem.agents[*i],
            "j": problem.agents[*j],
            "object": object.map(|o| problem.objects[o].clone()),
        }),
        Witness::Dominating(better) => json!({
            "dominating": assignment_value(problem, better),
        }),
    }
}

fn witness_text(problem: &Problem, witness: &Witness) -> String {
    match witness {
        Witness::Agent(i) => format!("agent {}", problem.agents[*i]),
        Witness::Pair { i, j } => {
            format!("agents {} and {}", problem.agents[*i], problem.agents[*j])
        }
        Witness::StepPair { step, i, j, object } => {
            let suffix = object
                .map(|o| format!(" on {}", problem.objects[o]))
                .unwrap_or_default();
            format!(
                "step {step}, agents {} and {}{suffix}",
                problem.agents[*i], problem.agents[*j]
            )
        }
        Witness::Dominating(better) => {
            let rows: Vec<String> = problem
                .agents
                .iter()
                .enumerate()
                .map(|(i, agent)| format!("{agent}: {}", lottery_text(problem, better.row(i))))
                .collect();
            format!("dominated by {{{}}}", rows.join("; "))
        }
    }
}

fn axioms_value(problem: &Problem, reports: &[AxiomReport]) -> Value {
    let entries: Vec<Value> = reports
        .iter()
        .map(|report| {
            let mut entry = json!({
                "axiom": report.axiom.name(),
                "holds": report.holds,
            });
            if let Some(witness) = &report.witness {
                entry["witness"] = witness_value(problem, witness);
            }
            entry
        })
        .collect();
    json!(entries)
}

fn axioms_table(problem: &Problem, reports: &[AxiomReport]) -> String {
    let mut out = String::from("axioms:\n");
    for report in reports {
        let verdict = match (&report.holds, &report.witness) {
            (true, _) => "holds".to_string(),
            (false, Some(witness)) => format!("FAILS ({})", witness_text(problem, witness)),
            (false, None) => "FAILS".to_string(),
        };
        let _ = writeln!(out, "  {}: {verdict}", report.axiom.name());
    }
    out
}

fn trace_value(problem: &Problem, trace: &Trace) -> Value {
    let steps: Vec<Value> = trace
        .steps
        .iter()
        .map(|record| {
            let names = |set: &std::collections::BTreeSet<usize>| -> Vec<&String> {
                set.iter().map(|&o| &problem.objects[o]).collect()
            };
            let labels: BTreeMap<&String, Vec<&String>> = problem
                .agents
                .iter()
                .zip(&record.state.labels)
                .filter(|(_, objs)| !objs.is_empty())
                .map(|(agent, objs)| (agent, names(objs)))
                .collect();
            let pointed: BTreeMap<&String, Vec<&String>> = problem
                .agents
                .iter()
                .zip(&record.state.pointed)
                .filter(|(_, objs)| !objs.is_empty())
                .map(|(agent, objs)| (agent, names(objs)))
                .collect();
            let agent_volumes: BTreeMap<&String, &Rational> = record
                .graph
                .agents()
                .iter()
                .zip(&record.solution.x_agents)
                .map(|(&i, x)| (&problem.agents[i], x))
                .collect();
            let mut real = BTreeMap::new();
            let mut labeled = BTreeMap::new();
            for (object, x) in record.graph.objects().iter().zip(&record.solution.x_objects) {
                match object.kind {
                    ObjectKind::Real => real.insert(&problem.objects[object.id], x),
                    ObjectKind::Labeled => labeled.insert(&problem.objects[object.id], x),
                };
            }
            json!({
                "step": record.state.step,
                "remaining": names(&record.state.remaining),
                "labels": labels,
                "pointed": pointed,
                "volumes": {
                    "agents": agent_volumes,
                    "objects": real,
                    "labeled": labeled,
                },
                "exhausted": names(&record.exhausted),
            })
        })
        .collect();
    json!(steps)
}

fn trace_table(problem: &Problem, trace: &Trace) -> String {
    let mut out = String::from("trace:\n");
    for record in &trace.steps {
        let volumes = record
            .graph
            .agents()
            .iter()
            .zip(&record.solution.x_agents)
            .map(|(&i, x)| format!("{}={x}", problem.agents[i]))
            .collect::<Vec<_>>()
            .join(" ");
        let exhausted = if record.exhausted.is_empty() {
            "-".to_string()
        } else {
            record
                .exhausted
                .iter()
                .map(|&o| problem.objects[o].as_str())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let _ = writeln!(
            out,
            "  step {}: volumes {volumes} | exhausted {exhausted}",
            record.state.step
        );
    }
    out
}

fn schedule_value(problem: &Problem, schedule: &EatingSchedule) -> Value {
    let rate_maps: Vec<BTreeMap<&String, &Rational>> = schedule
        .rates
        .iter()
        .map(|interval| problem.agents.iter().zip(interval).collect())
        .collect();
    let target_maps: Vec<BTreeMap<&String, &Rational>> = schedule
        .targets
        .iter()
        .map(|interval| problem.agents.iter().zip(interval).collect())
        .collect();
    json!({
        "breakpoints": schedule.breakpoints,
        "rates": rate_maps,
        "targets": target_maps,
    })
}
