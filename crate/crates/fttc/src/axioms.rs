//! Exact verifiers for the efficiency and fairness axioms, plus a
//! brute-force manipulation finder.
//!
//! Every check is decidable with rational arithmetic and returns either
//! "holds" or a machine-checkable witness of failure: the offending agent
//! or pair, the step of a trace, or an explicit dominating assignment.

use thiserror::Error;

use crate::engine::{run_fttc, EngineError, Policy, Trace};
use crate::lp::{ConstraintOp, LinearProgram, LpOutcome};
use crate::model::{
    class_prefix_sums, sd_compare, Assignment, DominanceVerdict, Lottery, Problem, Rational,
    WeakPreference,
};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Axiom {
    IndividualRationality,
    SdEfficiency,
    EqualTreatmentOfEquals,
    EqualEndowmentNoEnvy,
    EnvyFreeness,
    BoundedEnvy,
    StepwiseEte,
    StepwiseEeet,
    BoundedAdvantage,
}

impl Axiom {
    pub fn name(self) -> &'static str {
        match self {
            Axiom::IndividualRationality => "ir",
            Axiom::SdEfficiency => "sd-efficiency",
            Axiom::EqualTreatmentOfEquals => "ete",
            Axiom::EqualEndowmentNoEnvy => "eene",
            Axiom::EnvyFreeness => "ef",
            Axiom::BoundedEnvy => "be",
            Axiom::StepwiseEte => "stepwise-ete",
            Axiom::StepwiseEeet => "stepwise-eeet",
            Axiom::BoundedAdvantage => "bounded-advantage",
        }
    }
}

/// Evidence attached to a failing report.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Witness {
    Agent(usize),
    /// An ordered pair; for envy-style axioms `i` is the envious agent.
    Pair { i: usize, j: usize },
    /// A per-step parameter violation found in a trace.
    StepPair {
        step: u64,
        i: usize,
        j: usize,
        object: Option<usize>,
    },
    /// A feasible assignment strictly stochastically dominating the one
    /// under test.
    Dominating(Assignment),
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AxiomReport {
    pub axiom: Axiom,
    pub holds: bool,
    pub witness: Option<Witness>,
}

impl AxiomReport {
    fn passed(axiom: Axiom) -> Self {
        AxiomReport {
            axiom,
            holds: true,
            witness: None,
        }
    }

    fn failed(axiom: Axiom, witness: Witness) -> Self {
        AxiomReport {
            axiom,
            holds: false,
            witness: Some(witness),
        }
    }
}

/// Individual rationality: every agent's lottery weakly sd-dominates his
/// endowment, and (as the definition presumes) keeps the same total mass.
pub fn check_ir(problem: &Problem, p: &Assignment) -> AxiomReport {
    for i in 0..problem.num_agents() {
        let endowed = problem.endowment_lottery(i);
        let got = p.lottery(i);
        if got.total() != endowed.total()
            || sd_compare(&got, &endowed, &problem.preferences[i]) == DominanceVerdict::Incomparable
        {
            return AxiomReport::failed(Axiom::IndividualRationality, Witness::Agent(i));
        }
    }
    AxiomReport::passed(Axiom::IndividualRationality)
}

/// sd-efficiency via an exact feasibility program.
///
/// Searches for a feasible assignment `p′` that weakly sd-dominates `p`
/// for every agent (cumulative shares at every indifference-class boundary
/// at least as large, per-agent totals preserved, object quotas respected)
/// while maximizing the total cumulative surplus. The optimum is zero
/// exactly when no such `p′` improves on `p`; a positive optimum yields a
/// strictly dominating witness.
pub fn check_sd_efficiency(problem: &Problem, p: &Assignment) -> AxiomReport {
    let n = problem.num_agents();
    let m = problem.num_objects();
    let var = |i: usize, o: usize| i * m + o;
    let mut lp = LinearProgram::new(n * m);

    let mut objective = vec![Rational::zero(); n * m];
    let mut baseline = Rational::zero();
    for i in 0..n {
        let pref = &problem.preferences[i];
        let prefixes = class_prefix_sums(&p.lottery(i), pref);
        baseline += prefixes.iter().sum::<Rational>();
        for o in 0..m {
            objective[var(i, o)] = Rational::int((pref.num_classes() - pref.rank(o)) as i64);
        }
        // weak dominance at every boundary except the last, which the total
        // equality below pins down
        for (k, target) in prefixes.iter().enumerate().take(pref.num_classes() - 1) {
            let mut row = vec![Rational::zero(); n * m];
            for class in &pref.classes()[..=k] {
                for &o in class {
                    row[var(i, o)] = Rational::one();
                }
            }
            lp.add_constraint(row, ConstraintOp::Ge, target.clone());
        }
        let mut row = vec![Rational::zero(); n * m];
        for o in 0..m {
            row[var(i, o)] = Rational::one();
        }
        lp.add_constraint(row, ConstraintOp::Eq, p.row_total(i));
    }
    for o in 0..m {
        let mut row = vec![Rational::zero(); n * m];
        for i in 0..n {
            row[var(i, o)] = Rational::one();
        }
        lp.add_constraint(row, ConstraintOp::Le, problem.quota(o));
    }
    lp.set_objective(objective);

    let LpOutcome::Optimal { value, solution } = lp.maximize() else {
        unreachable!("the program is feasible (p itself) and bounded by the quotas");
    };
    if value == baseline {
        return AxiomReport::passed(Axiom::SdEfficiency);
    }
    debug_assert!(value > baseline);
    let rows = (0..n)
        .map(|i| solution[i * m..(i + 1) * m].to_vec())
        .collect();
    let dominating = Assignment::from_rows(rows);
    debug_assert!(dominating.validate_for(problem).is_ok());
    debug_assert!((0..n).all(|i| sd_compare(
        &dominating.lottery(i),
        &p.lottery(i),
        &problem.preferences[i]
    )
    .weakly_dominates()));
    AxiomReport::failed(Axiom::SdEfficiency, Witness::Dominating(dominating))
}

/// Equal treatment of equals: agents with identical endowments and
/// identical preferences receive identical lotteries.
pub fn check_ete(problem: &Problem, p: &Assignment) -> AxiomReport {
    for i in 0..problem.num_agents() {
        for j in i + 1..problem.num_agents() {
            if problem.endowments[i] == problem.endowments[j]
                && problem.preferences[i] == problem.preferences[j]
                && p.row(i) != p.row(j)
            {
                return AxiomReport::failed(Axiom::EqualTreatmentOfEquals, Witness::Pair { i, j });
            }
        }
    }
    AxiomReport::passed(Axiom::EqualTreatmentOfEquals)
}

/// Equal-endowment no envy: among agents with identical endowments, each
/// weakly sd-prefers his own lottery to the other's.
pub fn check_eene(problem: &Problem, p: &Assignment) -> AxiomReport {
    for i in 0..problem.num_agents() {
        for j in 0..problem.num_agents() {
            if i == j || problem.endowments[i] != problem.endowments[j] {
                continue;
            }
            if !sd_compare(&p.lottery(i), &p.lottery(j), &problem.preferences[i])
                .weakly_dominates()
            {
                return AxiomReport::failed(Axiom::EqualEndowmentNoEnvy, Witness::Pair { i, j });
            }
        }
    }
    AxiomReport::passed(Axiom::EqualEndowmentNoEnvy)
}

/// Envy-freeness: every agent weakly sd-prefers his own lottery to every
/// other agent's.
pub fn check_ef(problem: &Problem, p: &Assignment) -> AxiomReport {
    for i in 0..problem.num_agents() {
        for j in 0..problem.num_agents() {
            if i != j
                && !sd_compare(&p.lottery(i), &p.lottery(j), &problem.preferences[i])
                    .weakly_dominates()
            {
                return AxiomReport::failed(Axiom::EnvyFreeness, Witness::Pair { i, j });
            }
        }
    }
    AxiomReport::passed(Axiom::EnvyFreeness)
}

/// Bounded envy: `i`'s envy towards `j` — the largest cumulative shortfall
/// over `i`'s boundaries — never exceeds `j`'s endowment advantage
/// `Σ_{ω_j > ω_i} (ω_{j,o} − ω_{i,o})`.
pub fn check_be(problem: &Problem, p: &Assignment) -> AxiomReport {
    for i in 0..problem.num_agents() {
        let pref = &problem.preferences[i];
        let own = class_prefix_sums(&p.lottery(i), pref);
        for j in 0..problem.num_agents() {
            if i == j {
                continue;
            }
            let theirs = class_prefix_sums(&p.lottery(j), pref);
            let envy = theirs
                .iter()
                .zip(&own)
                .map(|(t, o)| t - o)
                .max()
                .expect("preferences have at least one class");
            let advantage: Rational = (0..problem.num_objects())
                .map(|o| &problem.endowments[j][o] - &problem.endowments[i][o])
                .filter(Rational::is_positive)
                .sum();
            if envy > advantage {
                return AxiomReport::failed(Axiom::BoundedEnvy, Witness::Pair { i, j });
            }
        }
    }
    AxiomReport::passed(Axiom::BoundedEnvy)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum StepwiseProperty {
    Ete,
    Eeet,
    BoundedAdvantage,
}

/// Verifies one of the per-step parameter conditions on a recorded trace:
///
/// * stepwise ETE — equal endowments, labels and pointing imply equal `λ`
///   rows over everything available;
/// * stepwise EEET — equal endowments imply equal `λ` on remaining real
///   objects;
/// * bounded advantage — `ω_{i,o}(d−1) ≥ ω_{j,o}(d−1)` implies both
///   `λ_{i,o}(d) ≥ λ_{j,o}(d)` and `ω_{i,o}(d) ≥ ω_{j,o}(d)`.
pub fn check_stepwise(trace: &Trace, property: StepwiseProperty) -> AxiomReport {
    let axiom = match property {
        StepwiseProperty::Ete => Axiom::StepwiseEte,
        StepwiseProperty::Eeet => Axiom::StepwiseEeet,
        StepwiseProperty::BoundedAdvantage => Axiom::BoundedAdvantage,
    };
    for (k, record) in trace.steps.iter().enumerate() {
        let state = &record.state;
        let params = &record.params;
        let n = state.endowments.len();
        let after = trace.steps.get(k + 1).map(|r| &r.state.endowments);
        // After the final step everything is consumed, so ω(d) is zero.
        let omega_after = |i: usize, o: usize| -> Rational {
            after.map_or_else(Rational::zero, |e| e[i][o].clone())
        };
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                match property {
                    StepwiseProperty::Ete => {
                        if i < j
                            && state.endowments[i] == state.endowments[j]
                            && state.labels[i] == state.labels[j]
                            && state.pointed[i] == state.pointed[j]
                        {
                            let mismatch = state
                                .remaining
                                .iter()
                                .find(|&&o| params.lambda_real[i][o] != params.lambda_real[j][o])
                                .or_else(|| {
                                    state.labeled_union.iter().find(|&&o| {
                                        params.lambda_labeled[i][o] != params.lambda_labeled[j][o]
                                    })
                                });
                            if let Some(&o) = mismatch {
                                return AxiomReport::failed(
                                    axiom,
                                    Witness::StepPair {
                                        step: state.step,
                                        i,
                                        j,
                                        object: Some(o),
                                    },
                                );
                            }
                        }
                    }
                    StepwiseProperty::Eeet => {
                        if i < j && state.endowments[i] == state.endowments[j] {
                            if let Some(&o) = state
                                .remaining
                                .iter()
                                .find(|&&o| params.lambda_real[i][o] != params.lambda_real[j][o])
                            {
                                return AxiomReport::failed(
                                    axiom,
                                    Witness::StepPair {
                                        step: state.step,
                                        i,
                                        j,
                                        object: Some(o),
                                    },
                                );
                            }
                        }
                    }
                    StepwiseProperty::BoundedAdvantage => {
                        for &o in &state.remaining {
                            if state.endowments[i][o] >= state.endowments[j][o]
                                && (params.lambda_real[i][o] < params.lambda_real[j][o]
                                    || omega_after(i, o) < omega_after(j, o))
                            {
                                return AxiomReport::failed(
                                    axiom,
                                    Witness::StepPair {
                                        step: state.step,
                                        i,
                                        j,
                                        object: Some(o),
                                    },
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    AxiomReport::passed(axiom)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ManipulationMode {
    /// Truth no longer weakly sd-dominates: the misreport outcome is
    /// incomparable to (or better than) the truthful one.
    Weak,
    /// The misreport outcome strictly sd-dominates the truthful one.
    Strong,
}

/// A successful misreport found by exhaustive search.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Manipulation {
    pub misreport: WeakPreference,
    pub truthful_outcome: Lottery,
    pub misreport_outcome: Lottery,
}

pub const MANIPULATION_OBJECT_LIMIT: usize = 4;

#[derive(Debug, Error)]
pub enum AxiomError {
    #[error("manipulation search enumerates weak orders over at most {limit} objects, got {objects}")]
    EnumerationBudget { objects: usize, limit: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// All weak orders over `0..m`, as ordered set partitions (best class
/// first). Their number is the ordered Bell number: 1, 3, 13, 75, …
fn weak_orders(m: usize) -> Vec<Vec<Vec<usize>>> {
    fn extend(mask: u32, m: usize, prefix: &mut Vec<Vec<usize>>, out: &mut Vec<Vec<Vec<usize>>>) {
        if mask == 0 {
            out.push(prefix.clone());
            return;
        }
        // enumerate the nonempty sub-masks of `mask` as the next class
        let mut sub = mask;
        while sub != 0 {
            let class: Vec<usize> = (0..m).filter(|&o| sub & (1 << o) != 0).collect();
            prefix.push(class);
            extend(mask & !sub, m, prefix, out);
            prefix.pop();
            sub = (sub - 1) & mask;
        }
    }
    let mut out = Vec::new();
    extend((1u32 << m) - 1, m, &mut Vec::new(), &mut out);
    out
}

/// Searches every weak preference order the agent could report for a
/// profitable deviation under the given policy. Deterministic order, first
/// witness returned. Guarded by [`MANIPULATION_OBJECT_LIMIT`]: the number
/// of weak orders grows like the ordered Bell numbers.
pub fn find_manipulation(
    problem: &Problem,
    policy: &Policy,
    mode: ManipulationMode,
    agent: usize,
) -> Result<Option<Manipulation>, AxiomError> {
    let m = problem.num_objects();
    if m > MANIPULATION_OBJECT_LIMIT {
        return Err(AxiomError::EnumerationBudget {
            objects: m,
            limit: MANIPULATION_OBJECT_LIMIT,
        });
    }
    let truth = &problem.preferences[agent];
    let (truthful, _) = run_fttc(problem, policy)?;
    let truthful_outcome = truthful.lottery(agent);
    for classes in weak_orders(m) {
        let misreport = WeakPreference::new(classes, m).expect("generated partitions are valid");
        if misreport == *truth {
            continue;
        }
        let mut altered = problem.clone();
        altered.preferences[agent] = misreport.clone();
        let (outcome, _) = run_fttc(&altered, policy)?;
        let misreport_outcome = outcome.lottery(agent);
        let found = match mode {
            ManipulationMode::Weak => {
                sd_compare(&truthful_outcome, &misreport_outcome, truth)
                    == DominanceVerdict::Incomparable
            }
            ManipulationMode::Strong => {
                sd_compare(&misreport_outcome, &truthful_outcome, truth)
                    == DominanceVerdict::Strict
            }
        };
        if found {
            return Ok(Some(Manipulation {
                misreport,
                truthful_outcome,
                misreport_outcome,
            }));
        }
    }
    Ok(None)
}
