//! The fractional top trading cycle mechanism on the full weak-preference
//! domain.
//!
//! Each step works on the remaining real objects `O(d−1)` plus the labeled
//! consumptions `Õ(d−1)` that indifferent agents re-offer for trade:
//!
//! 1. **Labeling.** In rounds, an agent who is indifferent between an
//!    unavailable object he has partly consumed and something currently
//!    available labels that consumption, making it available too.
//! 2. **Pointing.** Active agents (positive endowment or a label) point at
//!    all favorite available objects, preferring real objects over labeled
//!    ones round by round.
//! 3. **Trading.** A policy picks supply weights `λ`, trade quotas `β` and
//!    demand weights `γ`; the solver finds the maximum balanced trade, and
//!    the state is updated. Exhausted objects leave the market.
//!
//! The loop stops when no real object remains. Everything is exact
//! rational arithmetic, so replays are bit-for-bit deterministic.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;
use thiserror::Error;

use crate::model::{validate_problem, Assignment, Problem, Rational, Violation};
use crate::solver::{
    build_trading_graph, max_balanced_solution, CapSet, GraphError, SolverError, TradeSolution,
    TradingGraph,
};

pub const DEFAULT_STEP_BUDGET: u64 = 10_000;

/// One labeling round: the agents who labeled in it and the union of the
/// objects they labeled.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LabelRound {
    pub agents: BTreeSet<usize>,
    pub objects: BTreeSet<usize>,
}

/// One pointing round (agents only; their targets are in `pointed`).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PointRound {
    pub agents: BTreeSet<usize>,
}

/// The full mechanism state at the start of step `d`, plus the per-step
/// scratch (labels, activity, pointing) once the stages have run.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct StepState {
    /// The step about to be executed, 1-based.
    pub step: u64,
    /// Real objects still in circulation, `O(d−1)`.
    pub remaining: BTreeSet<usize>,
    /// Remaining endowments `ω(d−1)`, indexed `[agent][object]`.
    pub endowments: Vec<Vec<Rational>>,
    /// Accumulated consumption `p(d−1)`.
    pub assignment: Assignment,
    /// This step's labeled sets `Õ_i(d−1)` per agent.
    pub labels: Vec<BTreeSet<usize>>,
    /// Union of all labels, `Õ(d−1)`.
    pub labeled_union: BTreeSet<usize>,
    pub label_rounds: Vec<LabelRound>,
    /// Active agents `I(d−1)`: labelers plus positive-endowment holders.
    pub active: Vec<bool>,
    /// Pointed sets `A_i(d)` per agent.
    pub pointed: Vec<BTreeSet<usize>>,
    pub point_rounds: Vec<PointRound>,
}

impl StepState {
    /// The opening state: every object in circulation, nothing consumed.
    pub fn initial(problem: &Problem) -> StepState {
        let n = problem.num_agents();
        let m = problem.num_objects();
        StepState {
            step: 1,
            remaining: (0..m).collect(),
            endowments: problem.endowments.clone(),
            assignment: Assignment::zeros(n, m),
            labels: vec![BTreeSet::new(); n],
            labeled_union: BTreeSet::new(),
            label_rounds: Vec::new(),
            active: vec![false; n],
            pointed: vec![BTreeSet::new(); n],
            point_rounds: Vec::new(),
        }
    }

    /// `O̅(d−1)`: everything tradable this step, real or labeled.
    pub fn availability(&self) -> BTreeSet<usize> {
        self.remaining.union(&self.labeled_union).copied().collect()
    }
}

/// Per-step trade parameters chosen by the policy. All matrices are dense
/// `[agent][object]` over the whole problem; only entries for currently
/// available objects are meaningful.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ParameterSet {
    /// Supply weights on real objects; each remaining object's column sums to 1.
    pub lambda_real: Vec<Vec<Rational>>,
    /// Supply weights on labeled objects; each labeled object's column sums to 1.
    pub lambda_labeled: Vec<Vec<Rational>>,
    /// Demand weights on real objects; together with `gamma_labeled` each
    /// active agent's row sums to 1.
    pub gamma_real: Vec<Vec<Rational>>,
    pub gamma_labeled: Vec<Vec<Rational>>,
    /// Trade quotas on real objects, `0 ≤ β_{i,o} ≤ ω_{i,o}(d−1)`.
    pub beta: Vec<Vec<Rational>>,
}

impl ParameterSet {
    fn empty(n: usize, m: usize) -> ParameterSet {
        let zeros = || vec![vec![Rational::zero(); m]; n];
        ParameterSet {
            lambda_real: zeros(),
            lambda_labeled: zeros(),
            gamma_real: zeros(),
            gamma_labeled: zeros(),
            beta: zeros(),
        }
    }

    /// Checks every parameter invariant against the current state.
    pub fn validate(&self, state: &StepState) -> Result<(), String> {
        let n = state.endowments.len();
        for &o in &state.remaining {
            let mut total = Rational::zero();
            for i in 0..n {
                let l = &self.lambda_real[i][o];
                if l.is_negative() {
                    return Err(format!("negative λ for agent #{i} on object #{o}"));
                }
                if l.is_positive() && !state.endowments[i][o].is_positive() {
                    return Err(format!(
                        "positive λ for agent #{i} on object #{o} without a holding"
                    ));
                }
                total += l;
                let b = &self.beta[i][o];
                if b.is_negative() || *b > state.endowments[i][o] {
                    return Err(format!(
                        "β for agent #{i} on object #{o} outside [0, ω]"
                    ));
                }
            }
            if total != Rational::one() {
                return Err(format!("λ column for object #{o} sums to {total}, not 1"));
            }
        }
        for &o in &state.labeled_union {
            let mut total = Rational::zero();
            for i in 0..n {
                let l = &self.lambda_labeled[i][o];
                if l.is_negative() {
                    return Err(format!("negative labeled λ for agent #{i} on object #{o}"));
                }
                if l.is_positive() && !state.labels[i].contains(&o) {
                    return Err(format!(
                        "positive labeled λ for agent #{i} on object #{o} he did not label"
                    ));
                }
                total += l;
            }
            if total != Rational::one() {
                return Err(format!(
                    "labeled λ column for object #{o} sums to {total}, not 1"
                ));
            }
        }
        for i in (0..n).filter(|&i| state.active[i]) {
            let mut total = Rational::zero();
            for o in 0..self.gamma_real[i].len() {
                for (g, part) in [
                    (&self.gamma_real[i][o], state.remaining.contains(&o)),
                    (&self.gamma_labeled[i][o], state.labeled_union.contains(&o)),
                ] {
                    if g.is_negative() {
                        return Err(format!("negative γ for agent #{i} on object #{o}"));
                    }
                    if g.is_positive() && !(part && state.pointed[i].contains(&o)) {
                        return Err(format!(
                            "positive γ for agent #{i} on object #{o} outside A_i"
                        ));
                    }
                    total += g;
                }
            }
            if total != Rational::one() {
                return Err(format!("γ row for agent #{i} sums to {total}, not 1"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BasePolicy {
    Equal,
    Proportional,
    Leveling,
}

/// Hand-written per-step parameter overrides layered on a builtin policy.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct StepOverride {
    /// `(agent, object) → λ` replacements, routed to the real or labeled
    /// matrix by the object's current role.
    pub lambda: BTreeMap<(usize, usize), Rational>,
    pub beta: BTreeMap<(usize, usize), Rational>,
    pub gamma: BTreeMap<(usize, usize), Rational>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CustomPolicy {
    pub base: BasePolicy,
    /// Overrides keyed by 1-based step number.
    pub steps: BTreeMap<u64, StepOverride>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Policy {
    Equal,
    Proportional,
    Leveling,
    Custom(CustomPolicy),
}

impl Policy {
    pub fn base(&self) -> BasePolicy {
        match self {
            Policy::Equal => BasePolicy::Equal,
            Policy::Proportional => BasePolicy::Proportional,
            Policy::Leveling => BasePolicy::Leveling,
            Policy::Custom(c) => c.base,
        }
    }
}

/// One executed step as recorded in the trace: the state snapshot after the
/// labeling and pointing stages but before trading, the parameters, the
/// assembled graph, the trade volumes, and the objects exhausted `E(d)`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct StepRecord {
    pub state: StepState,
    pub params: ParameterSet,
    pub graph: TradingGraph,
    pub solution: TradeSolution,
    pub exhausted: BTreeSet<usize>,
}

#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Trace {
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("problem fails validation ({} violation(s))", .0.len())]
    Invalid(Vec<Violation>),
    #[error("step budget of {budget} exceeded at step {step}")]
    BudgetExceeded {
        budget: u64,
        step: u64,
        trace: Box<Trace>,
    },
    #[error("no trade possible at step {step} although objects remain")]
    Stalled { step: u64, trace: Box<Trace> },
    #[error("invalid trade parameters at step {step}: {reason}")]
    BadPolicy { step: u64, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

/// Computes this step's labeling rounds.
///
/// Round 1 lets an agent label consumptions of objects outside `O(d−1)`
/// that he finds indifferent to some remaining object; round `k` extends
/// the chain with objects indifferent to something labeled in round
/// `k−1`. Each agent labels in at most one round; several agents may label
/// the same object in the same round.
pub fn labeling_stage(problem: &Problem, state: &mut StepState) {
    let n = problem.num_agents();
    state.labels = vec![BTreeSet::new(); n];
    state.labeled_union.clear();
    state.label_rounds.clear();
    let mut unlabeled: Vec<usize> = (0..n).collect();
    let mut covered = state.remaining.clone();
    let mut trigger = state.remaining.clone();
    while !trigger.is_empty() {
        let mut round_agents = BTreeSet::new();
        let mut round_objects = BTreeSet::new();
        for &i in &unlabeled {
            let pref = &problem.preferences[i];
            let candidates: BTreeSet<usize> = (0..problem.num_objects())
                .filter(|o| !covered.contains(o))
                .filter(|&o| state.assignment.get(i, o).is_positive())
                .filter(|&o| trigger.iter().any(|&t| pref.indifferent(o, t)))
                .collect();
            if !candidates.is_empty() {
                round_objects.extend(candidates.iter().copied());
                state.labels[i] = candidates;
                round_agents.insert(i);
            }
        }
        if round_agents.is_empty() {
            break;
        }
        unlabeled.retain(|i| !round_agents.contains(i));
        covered.extend(round_objects.iter().copied());
        state.labeled_union.extend(round_objects.iter().copied());
        trigger = round_objects.clone();
        state.label_rounds.push(LabelRound {
            agents: round_agents,
            objects: round_objects,
        });
    }
}

/// Computes the active set and the pointing rounds: agents whose favorite
/// available objects include remaining real objects point at those in round
/// 1; the rest point at favorites within successive labeled rounds.
pub fn pointing_stage(problem: &Problem, state: &mut StepState) -> Result<(), EngineError> {
    let n = problem.num_agents();
    state.active = (0..n)
        .map(|i| {
            !state.labels[i].is_empty() || state.endowments[i].iter().any(Rational::is_positive)
        })
        .collect();
    state.pointed = vec![BTreeSet::new(); n];
    state.point_rounds.clear();

    let availability = state.availability();
    let mut favorites: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for i in (0..n).filter(|&i| state.active[i]) {
        let favs: BTreeSet<usize> = problem.preferences[i]
            .favorites_within(&availability)
            .into_iter()
            .collect();
        if favs.is_empty() {
            return Err(EngineError::Internal(format!(
                "active agent #{i} has no favorite available object"
            )));
        }
        favorites.insert(i, favs);
    }

    let targets: Vec<BTreeSet<usize>> = std::iter::once(state.remaining.clone())
        .chain(state.label_rounds.iter().map(|r| r.objects.clone()))
        .collect();
    let mut unassigned: BTreeSet<usize> = favorites.keys().copied().collect();
    for target in &targets {
        let mut round_agents = BTreeSet::new();
        for &i in &unassigned {
            let hit: BTreeSet<usize> = favorites[&i].intersection(target).copied().collect();
            if !hit.is_empty() {
                state.pointed[i] = hit;
                round_agents.insert(i);
            }
        }
        if !round_agents.is_empty() {
            unassigned.retain(|i| !round_agents.contains(i));
            state.point_rounds.push(PointRound {
                agents: round_agents,
            });
        }
    }
    if let Some(&i) = unassigned.first() {
        return Err(EngineError::Internal(format!(
            "active agent #{i} pointed nowhere despite available favorites"
        )));
    }
    Ok(())
}

fn base_parameters(problem: &Problem, state: &StepState, base: BasePolicy) -> ParameterSet {
    let n = problem.num_agents();
    let m = problem.num_objects();
    let mut params = ParameterSet::empty(n, m);

    for &o in &state.remaining {
        let holders: Vec<usize> = (0..n)
            .filter(|&i| state.endowments[i][o].is_positive())
            .collect();
        debug_assert!(!holders.is_empty(), "remaining objects have positive supply");
        match base {
            BasePolicy::Equal => {
                let share = Rational::new(1, holders.len() as i64);
                for &i in &holders {
                    params.lambda_real[i][o] = share.clone();
                }
                for i in 0..n {
                    params.beta[i][o] = state.endowments[i][o].clone();
                }
            }
            BasePolicy::Proportional => {
                let supply: Rational = holders.iter().map(|&i| &state.endowments[i][o]).sum();
                for &i in &holders {
                    params.lambda_real[i][o] = &state.endowments[i][o] / &supply;
                }
                for i in 0..n {
                    params.beta[i][o] = state.endowments[i][o].clone();
                }
            }
            BasePolicy::Leveling => {
                let top_holding = holders
                    .iter()
                    .map(|&i| state.endowments[i][o].clone())
                    .max()
                    .expect("non-empty holders");
                let top: Vec<usize> = holders
                    .iter()
                    .copied()
                    .filter(|&i| state.endowments[i][o] == top_holding)
                    .collect();
                // The runner-up holding among everyone else; zero when the
                // top holders are the whole market.
                let second = (0..n)
                    .filter(|i| !top.contains(i))
                    .map(|i| state.endowments[i][o].clone())
                    .max()
                    .unwrap_or_else(Rational::zero);
                let share = Rational::new(1, top.len() as i64);
                let quota = &top_holding - &second;
                for &i in &top {
                    params.lambda_real[i][o] = share.clone();
                    params.beta[i][o] = quota.clone();
                }
            }
        }
    }

    for &o in &state.labeled_union {
        let labelers: Vec<usize> = (0..n).filter(|&i| state.labels[i].contains(&o)).collect();
        let share = Rational::new(1, labelers.len() as i64);
        for &i in &labelers {
            params.lambda_labeled[i][o] = share.clone();
        }
    }

    for i in (0..n).filter(|&i| state.active[i]) {
        let share = Rational::new(1, state.pointed[i].len() as i64);
        for &o in &state.pointed[i] {
            if state.remaining.contains(&o) {
                params.gamma_real[i][o] = share.clone();
            } else {
                params.gamma_labeled[i][o] = share.clone();
            }
        }
    }
    params
}

fn apply_override(
    params: &mut ParameterSet,
    state: &StepState,
    patch: &StepOverride,
) -> Result<(), String> {
    for (&(i, o), v) in &patch.lambda {
        if state.remaining.contains(&o) {
            params.lambda_real[i][o] = v.clone();
        } else if state.labeled_union.contains(&o) {
            params.lambda_labeled[i][o] = v.clone();
        } else {
            return Err(format!("λ override targets unavailable object #{o}"));
        }
    }
    for (&(i, o), v) in &patch.beta {
        if !state.remaining.contains(&o) {
            return Err(format!("β override targets non-remaining object #{o}"));
        }
        params.beta[i][o] = v.clone();
    }
    for (&(i, o), v) in &patch.gamma {
        if state.remaining.contains(&o) {
            params.gamma_real[i][o] = v.clone();
        } else if state.labeled_union.contains(&o) {
            params.gamma_labeled[i][o] = v.clone();
        } else {
            return Err(format!("γ override targets unavailable object #{o}"));
        }
    }
    Ok(())
}

/// Produces the step's validated trade parameters under the given policy.
pub fn make_parameters(
    problem: &Problem,
    state: &StepState,
    policy: &Policy,
) -> Result<ParameterSet, EngineError> {
    let mut params = base_parameters(problem, state, policy.base());
    if let Policy::Custom(custom) = policy {
        if let Some(patch) = custom.steps.get(&state.step) {
            apply_override(&mut params, state, patch).map_err(|reason| {
                EngineError::BadPolicy {
                    step: state.step,
                    reason,
                }
            })?;
        }
    }
    params
        .validate(state)
        .map_err(|reason| EngineError::BadPolicy {
            step: state.step,
            reason,
        })?;
    Ok(params)
}

/// Applies the trade volumes to the state: endowments shrink along real
/// `λ`, labeled consumptions shrink along labeled `λ`, pointed objects are
/// consumed along `γ`, and exhausted objects leave `O`. Returns `E(d)`.
pub fn trading_stage(
    state: &mut StepState,
    graph: &TradingGraph,
    solution: &TradeSolution,
) -> Result<BTreeSet<usize>, EngineError> {
    use crate::solver::ObjectKind;

    for (obj_pos, obj) in graph.objects().iter().enumerate() {
        let x_o = &solution.x_objects[obj_pos];
        for (agent_pos, &agent) in graph.agents().iter().enumerate() {
            let amount = graph.lambda(obj_pos, agent_pos) * x_o;
            if amount.is_zero() {
                continue;
            }
            match obj.kind {
                ObjectKind::Real => {
                    state.endowments[agent][obj.id] -= &amount;
                    if state.endowments[agent][obj.id].is_negative() {
                        return Err(EngineError::Internal(format!(
                            "endowment of agent #{agent} on object #{} went negative",
                            obj.id
                        )));
                    }
                }
                ObjectKind::Labeled => {
                    state.assignment.sub_from(agent, obj.id, &amount);
                    if state.assignment.get(agent, obj.id).is_negative() {
                        return Err(EngineError::Internal(format!(
                            "labeled consumption of agent #{agent} on object #{} went negative",
                            obj.id
                        )));
                    }
                }
            }
        }
    }

    for (agent_pos, &agent) in graph.agents().iter().enumerate() {
        debug_assert!(
            state.pointed[agent].is_disjoint(&state.labels[agent]),
            "an agent never points at his own labels"
        );
        let x_i = &solution.x_agents[agent_pos];
        if x_i.is_zero() {
            continue;
        }
        for (obj_pos, obj) in graph.objects().iter().enumerate() {
            let amount = graph.gamma(agent_pos, obj_pos) * x_i;
            if !amount.is_zero() {
                state.assignment.add_to(agent, obj.id, &amount);
            }
        }
    }

    let exhausted: BTreeSet<usize> = state
        .remaining
        .iter()
        .copied()
        .filter(|&o| !state.endowments.iter().any(|row| row[o].is_positive()))
        .collect();
    state.remaining.retain(|o| !exhausted.contains(o));
    state.step += 1;
    Ok(exhausted)
}

/// Runs the mechanism to completion with the default step budget.
pub fn run_fttc(problem: &Problem, policy: &Policy) -> Result<(Assignment, Trace), EngineError> {
    run_fttc_with_budget(problem, policy, DEFAULT_STEP_BUDGET)
}

/// Runs the mechanism to completion, returning the final assignment and the
/// full step-by-step trace. The budget bounds the number of steps; the
/// mechanism also aborts early if a step trades nothing at all, since the
/// state — and therefore every later step — would repeat forever.
pub fn run_fttc_with_budget(
    problem: &Problem,
    policy: &Policy,
    budget: u64,
) -> Result<(Assignment, Trace), EngineError> {
    let violations = validate_problem(problem);
    if !violations.is_empty() {
        return Err(EngineError::Invalid(violations));
    }
    let mut state = StepState::initial(problem);
    let mut steps: Vec<StepRecord> = Vec::new();
    while !state.remaining.is_empty() {
        if state.step > budget {
            return Err(EngineError::BudgetExceeded {
                budget,
                step: state.step,
                trace: Box::new(Trace { steps }),
            });
        }
        let d = state.step;
        labeling_stage(problem, &mut state);
        pointing_stage(problem, &mut state)?;
        let params = make_parameters(problem, &state, policy)?;
        let graph = build_trading_graph(&state, &params)?;
        let caps = CapSet::for_step(&graph, &state, &params);
        let solution = max_balanced_solution(&graph, &caps)?;
        let snapshot = state.clone();
        let exhausted = trading_stage(&mut state, &graph, &solution)?;
        let stalled = solution.is_zero();
        steps.push(StepRecord {
            state: snapshot,
            params,
            graph,
            solution,
            exhausted,
        });
        if stalled {
            return Err(EngineError::Stalled {
                step: d,
                trace: Box::new(Trace { steps }),
            });
        }
    }

    for o in 0..problem.num_objects() {
        if state.assignment.column_total(o) != problem.quota(o) {
            return Err(EngineError::Internal(format!(
                "object #{o} not fully distributed"
            )));
        }
    }
    for i in 0..problem.num_agents() {
        let endowed: Rational = problem.endowments[i].iter().sum();
        if state.assignment.row_total(i) != endowed {
            return Err(EngineError::Internal(format!(
                "agent #{i} ended with a different total than he endowed"
            )));
        }
    }
    Ok((state.assignment, Trace { steps }))
}

#[derive(Debug, Error)]
pub enum PolicyParseError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown base policy {0:?} (expected equal, proportional or leveling)")]
    UnknownBase(String),
    #[error("bad step key {0:?} (expected a step number ≥ 1)")]
    BadStepKey(String),
    #[error("unknown agent {0:?}")]
    UnknownAgent(String),
    #[error("unknown object {0:?}")]
    UnknownObject(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CustomPolicyFile {
    base: String,
    #[serde(default)]
    steps: BTreeMap<String, StepOverrideFile>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct StepOverrideFile {
    lambda: BTreeMap<String, BTreeMap<String, Rational>>,
    beta: BTreeMap<String, BTreeMap<String, Rational>>,
    gamma: BTreeMap<String, BTreeMap<String, Rational>>,
}

/// Parses a custom policy description:
///
/// ```json
/// {
///   "base": "equal",
///   "steps": {
///     "1": {"lambda": {"i": {"a": "2/3"}, "j": {"a": "1/3"}}}
///   }
/// }
/// ```
///
/// Overrides replace individual `λ`, `β` or `γ` entries of the base policy
/// at the named step and are re-validated against the parameter invariants
/// when that step runs.
pub fn parse_custom_policy(
    text: &[u8],
    problem: &Problem,
) -> Result<CustomPolicy, PolicyParseError> {
    let file: CustomPolicyFile = serde_json::from_slice(text)?;
    let base = match file.base.as_str() {
        "equal" => BasePolicy::Equal,
        "proportional" => BasePolicy::Proportional,
        "leveling" => BasePolicy::Leveling,
        other => return Err(PolicyParseError::UnknownBase(other.to_owned())),
    };
    let resolve =
        |by_name: &BTreeMap<String, BTreeMap<String, Rational>>| -> Result<_, PolicyParseError> {
            let mut out: BTreeMap<(usize, usize), Rational> = BTreeMap::new();
            for (agent_name, row) in by_name {
                let i = problem
                    .agent_index(agent_name)
                    .ok_or_else(|| PolicyParseError::UnknownAgent(agent_name.clone()))?;
                for (object_name, value) in row {
                    let o = problem
                        .object_index(object_name)
                        .ok_or_else(|| PolicyParseError::UnknownObject(object_name.clone()))?;
                    out.insert((i, o), value.clone());
                }
            }
            Ok(out)
        };
    let mut steps = BTreeMap::new();
    for (key, patch) in &file.steps {
        let step: u64 = key
            .parse()
            .ok()
            .filter(|&s| s >= 1)
            .ok_or_else(|| PolicyParseError::BadStepKey(key.clone()))?;
        steps.insert(
            step,
            StepOverride {
                lambda: resolve(&patch.lambda)?,
                beta: resolve(&patch.beta)?,
                gamma: resolve(&patch.gamma)?,
            },
        );
    }
    Ok(CustomPolicy { base, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WeakPreference;

    fn rat(n: i64, d: i64) -> Rational {
        Rational::new(n, d)
    }

    /// Three agents sharing a, b, c in equal thirds; 1: a∼b ≻ c,
    /// 2: a ≻ b ≻ c, 3: a ≻ c ≻ b.
    fn three_agent_problem() -> Problem {
        Problem::new(
            vec!["1".into(), "2".into(), "3".into()],
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![rat(1, 3); 3]; 3],
            vec![
                WeakPreference::new(vec![vec![0, 1], vec![2]], 3).unwrap(),
                WeakPreference::strict(&[0, 1, 2]).unwrap(),
                WeakPreference::strict(&[0, 2, 1]).unwrap(),
            ],
        )
        .unwrap()
    }

    /// Two agents sharing a and b half-half; i: a∼b, j: a ≻ b.
    fn two_agent_problem() -> Problem {
        Problem::new(
            vec!["i".into(), "j".into()],
            vec!["a".into(), "b".into()],
            vec![vec![rat(1, 2); 2]; 2],
            vec![
                WeakPreference::new(vec![vec![0, 1]], 2).unwrap(),
                WeakPreference::strict(&[0, 1]).unwrap(),
            ],
        )
        .unwrap()
    }

    fn shares(pairs: &[(usize, i64, i64)], m: usize) -> Vec<Rational> {
        let mut row = vec![Rational::zero(); m];
        for &(o, n, d) in pairs {
            row[o] = rat(n, d);
        }
        row
    }

    #[test]
    fn three_agent_run_reproduces_the_known_table() {
        let problem = three_agent_problem();
        let (assignment, trace) = run_fttc(&problem, &Policy::Equal).unwrap();
        assert_eq!(assignment.row(0), &shares(&[(1, 3, 4), (2, 1, 4)], 3)[..]);
        assert_eq!(
            assignment.row(1),
            &shares(&[(0, 1, 2), (1, 1, 4), (2, 1, 4)], 3)[..]
        );
        assert_eq!(assignment.row(2), &shares(&[(0, 1, 2), (2, 1, 2)], 3)[..]);
        assert_eq!(trace.steps.len(), 4);
        let exhausted: Vec<Vec<usize>> = trace
            .steps
            .iter()
            .map(|s| s.exhausted.iter().copied().collect())
            .collect();
        assert_eq!(exhausted, vec![vec![0], vec![], vec![1], vec![2]]);
    }

    #[test]
    fn three_agent_step_one_points_and_trades_as_expected() {
        let problem = three_agent_problem();
        let (_, trace) = run_fttc(&problem, &Policy::Equal).unwrap();
        let step1 = &trace.steps[0];
        assert_eq!(step1.state.pointed[0], [0, 1].into_iter().collect());
        assert_eq!(step1.state.pointed[1], [0].into_iter().collect());
        assert_eq!(step1.state.pointed[2], [0].into_iter().collect());
        // Equal policy: λ = 1/3 on every object column, γ_1 splits evenly
        for i in 0..3 {
            assert_eq!(step1.params.lambda_real[i][0], rat(1, 3));
        }
        assert_eq!(step1.params.gamma_real[0][0], rat(1, 2));
        assert_eq!(step1.params.gamma_real[0][1], rat(1, 2));
        // volumes and the resulting consumption after step 1
        assert_eq!(step1.solution.x_agents, vec![rat(2, 5); 3]);
        let step2 = &trace.steps[1].state;
        assert_eq!(step2.assignment.row(0), &shares(&[(0, 1, 5), (1, 1, 5)], 3)[..]);
        assert_eq!(step2.assignment.row(1), &shares(&[(0, 2, 5)], 3)[..]);
        assert_eq!(step2.assignment.row(2), &shares(&[(0, 2, 5)], 3)[..]);
        assert_eq!(step2.endowments[0], shares(&[(1, 4, 15), (2, 1, 3)], 3));
    }

    #[test]
    fn three_agent_step_two_labels_the_consumed_favorite() {
        let problem = three_agent_problem();
        let (_, trace) = run_fttc(&problem, &Policy::Equal).unwrap();
        let step2 = &trace.steps[1].state;
        assert_eq!(step2.label_rounds.len(), 1);
        assert_eq!(step2.label_rounds[0].agents, [0].into_iter().collect());
        assert_eq!(step2.label_rounds[0].objects, [0].into_iter().collect());
        assert_eq!(step2.pointed[0], [1].into_iter().collect());
        assert_eq!(step2.pointed[1], [0].into_iter().collect());
        assert_eq!(step2.pointed[2], [0].into_iter().collect());
        // volumes match the walkthrough: x_1 = 3/10, x_2 = x_3 = 1/10
        assert_eq!(
            trace.steps[1].solution.x_agents,
            vec![rat(3, 10), rat(1, 10), rat(1, 10)]
        );
    }

    #[test]
    fn two_agent_run_swaps_fully() {
        let problem = two_agent_problem();
        let (assignment, trace) = run_fttc(&problem, &Policy::Equal).unwrap();
        assert_eq!(assignment.row(0), &shares(&[(1, 1, 1)], 2)[..]);
        assert_eq!(assignment.row(1), &shares(&[(0, 1, 1)], 2)[..]);
        assert_eq!(trace.steps.len(), 2);
        // step 2 re-trades i's labeled consumption of a
        assert_eq!(
            trace.steps[1].state.labels[0],
            [0].into_iter().collect::<BTreeSet<_>>()
        );
    }

    #[test]
    fn single_agent_keeps_his_endowment() {
        let problem = Problem::new(
            vec!["solo".into()],
            vec!["a".into()],
            vec![vec![Rational::one()]],
            vec![WeakPreference::strict(&[0]).unwrap()],
        )
        .unwrap();
        let (assignment, trace) = run_fttc(&problem, &Policy::Equal).unwrap();
        assert_eq!(assignment.row(0), &[Rational::one()][..]);
        assert_eq!(trace.steps.len(), 1);
    }

    #[test]
    fn strict_preferences_never_label() {
        let problem = Problem::new(
            vec!["i".into(), "j".into()],
            vec!["a".into(), "b".into()],
            vec![
                vec![Rational::one(), Rational::zero()],
                vec![Rational::zero(), Rational::one()],
            ],
            vec![
                WeakPreference::strict(&[1, 0]).unwrap(),
                WeakPreference::strict(&[0, 1]).unwrap(),
            ],
        )
        .unwrap();
        let (assignment, trace) = run_fttc(&problem, &Policy::Equal).unwrap();
        assert_eq!(assignment.row(0), &shares(&[(1, 1, 1)], 2)[..]);
        assert_eq!(assignment.row(1), &shares(&[(0, 1, 1)], 2)[..]);
        assert!(trace.steps.iter().all(|s| s.state.label_rounds.is_empty()));
    }

    #[test]
    fn labeling_chains_across_rounds() {
        // Remaining object r; i1 consumed o1 (indifferent o1 ∼ r), i2
        // consumed o0 (indifferent o0 ∼ o1): i1 labels in round 1, which
        // triggers i2 in round 2.
        let problem = Problem::new(
            vec!["i1".into(), "i2".into()],
            vec!["o0".into(), "o1".into(), "r".into()],
            vec![
                vec![Rational::zero(), Rational::zero(), rat(1, 2)],
                vec![Rational::zero(), Rational::zero(), rat(1, 2)],
            ],
            vec![
                WeakPreference::new(vec![vec![1, 2], vec![0]], 3).unwrap(),
                WeakPreference::new(vec![vec![0, 1], vec![2]], 3).unwrap(),
            ],
        )
        .unwrap();
        let mut state = StepState::initial(&problem);
        state.remaining = [2].into_iter().collect();
        state.assignment.set(0, 1, rat(1, 2));
        state.assignment.set(1, 0, rat(1, 2));
        labeling_stage(&problem, &mut state);
        assert_eq!(state.label_rounds.len(), 2);
        assert_eq!(state.label_rounds[0].agents, [0].into_iter().collect());
        assert_eq!(state.label_rounds[0].objects, [1].into_iter().collect());
        assert_eq!(state.label_rounds[1].agents, [1].into_iter().collect());
        assert_eq!(state.label_rounds[1].objects, [0].into_iter().collect());
    }

    #[test]
    fn leveling_trades_down_to_the_runner_up() {
        let problem = Problem::new(
            vec!["i".into(), "j".into()],
            vec!["o".into()],
            vec![vec![rat(2, 3)], vec![rat(1, 3)]],
            vec![
                WeakPreference::strict(&[0]).unwrap(),
                WeakPreference::strict(&[0]).unwrap(),
            ],
        )
        .unwrap();
        let (assignment, trace) = run_fttc(&problem, &Policy::Leveling).unwrap();
        assert_eq!(trace.steps.len(), 2);
        // step 1: only the top holder trades, capped at 2/3 − 1/3
        let step1 = &trace.steps[0];
        assert_eq!(step1.params.lambda_real[0][0], Rational::one());
        assert_eq!(step1.params.beta[0][0], rat(1, 3));
        assert_eq!(step1.solution.x_agents, vec![rat(1, 3), Rational::zero()]);
        // step 2: tie at 1/3 each, full quotas
        let step2 = &trace.steps[1];
        assert_eq!(step2.params.lambda_real[0][0], rat(1, 2));
        assert_eq!(step2.params.beta[0][0], rat(1, 3));
        assert_eq!(assignment.row(0), &[rat(2, 3)][..]);
        assert_eq!(assignment.row(1), &[rat(1, 3)][..]);
    }

    #[test]
    fn proportional_runs_clean_on_the_three_agent_instance() {
        let problem = three_agent_problem();
        let (assignment, _) = run_fttc(&problem, &Policy::Proportional).unwrap();
        assignment.validate_for(&problem).unwrap();
        for o in 0..3 {
            assert_eq!(assignment.column_total(o), Rational::one());
        }
    }

    #[test]
    fn custom_policy_with_no_overrides_matches_its_base() {
        let problem = three_agent_problem();
        let custom = Policy::Custom(CustomPolicy {
            base: BasePolicy::Proportional,
            steps: BTreeMap::new(),
        });
        let (a1, t1) = run_fttc(&problem, &custom).unwrap();
        let (a2, t2) = run_fttc(&problem, &Policy::Proportional).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn custom_override_breaking_stochasticity_is_rejected() {
        let problem = three_agent_problem();
        let mut steps = BTreeMap::new();
        steps.insert(
            1,
            StepOverride {
                lambda: [((0, 0), rat(2, 3))].into_iter().collect(),
                ..StepOverride::default()
            },
        );
        let err = run_fttc(
            &problem,
            &Policy::Custom(CustomPolicy {
                base: BasePolicy::Equal,
                steps,
            }),
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::BadPolicy { step: 1, .. }));
    }

    #[test]
    fn zero_quota_custom_policy_stalls() {
        let problem = three_agent_problem();
        let mut beta = BTreeMap::new();
        for i in 0..3 {
            for o in 0..3 {
                beta.insert((i, o), Rational::zero());
            }
        }
        let mut steps = BTreeMap::new();
        steps.insert(
            1,
            StepOverride {
                beta,
                ..StepOverride::default()
            },
        );
        let err = run_fttc(
            &problem,
            &Policy::Custom(CustomPolicy {
                base: BasePolicy::Equal,
                steps,
            }),
        )
        .unwrap_err();
        let EngineError::Stalled { step, trace } = err else {
            panic!("expected a stall, got {err:?}");
        };
        assert_eq!(step, 1);
        assert_eq!(trace.steps.len(), 1);
    }

    #[test]
    fn tight_budget_reports_with_trace() {
        let problem = three_agent_problem();
        let err = run_fttc_with_budget(&problem, &Policy::Equal, 1).unwrap_err();
        let EngineError::BudgetExceeded { budget, step, trace } = err else {
            panic!("expected budget exhaustion");
        };
        assert_eq!((budget, step), (1, 2));
        assert_eq!(trace.steps.len(), 1);
    }

    #[test]
    fn invalid_problems_are_refused() {
        let mut problem = three_agent_problem();
        problem.endowments[0][0] = rat(2, 3); // quota of a becomes 4/3
        assert!(matches!(
            run_fttc(&problem, &Policy::Equal),
            Err(EngineError::Invalid(_))
        ));
    }

    #[test]
    fn custom_policy_files_parse_and_resolve_names() {
        let problem = two_agent_problem();
        let text = br#"{
            "base": "equal",
            "steps": {
                "2": {
                    "lambda": {"i": {"b": "2/3"}, "j": {"b": "1/3"}},
                    "beta": {"i": {"b": "1/4"}}
                }
            }
        }"#;
        let custom = parse_custom_policy(text, &problem).unwrap();
        assert_eq!(custom.base, BasePolicy::Equal);
        let patch = &custom.steps[&2];
        assert_eq!(patch.lambda[&(0, 1)], rat(2, 3));
        assert_eq!(patch.beta[&(0, 1)], rat(1, 4));
        assert!(patch.gamma.is_empty());

        let bad_base = parse_custom_policy(br#"{"base": "greedy"}"#, &problem);
        assert!(matches!(bad_base, Err(PolicyParseError::UnknownBase(_))));
        let bad_step = parse_custom_policy(br#"{"base": "equal", "steps": {"0": {}}}"#, &problem);
        assert!(matches!(bad_step, Err(PolicyParseError::BadStepKey(_))));
        let bad_name = parse_custom_policy(
            br#"{"base": "equal", "steps": {"1": {"beta": {"q": {"a": "0"}}}}}"#,
            &problem,
        );
        assert!(matches!(bad_name, Err(PolicyParseError::UnknownAgent(_))));
    }
}
