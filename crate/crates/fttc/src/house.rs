//! House-allocation specializations: the continuous-time eating view of
//! the trading procedure, the egalitarian solution on dichotomous
//! preferences with its bottleneck decomposition, and an exact Random
//! Priority simulator for comparison.

use std::collections::BTreeSet;

use itertools::Itertools;
use thiserror::Error;

use crate::engine::{
    labeling_stage, make_parameters, pointing_stage, EngineError, Policy, StepState, Trace,
    DEFAULT_STEP_BUDGET,
};
use crate::linalg::solve_linear_system;
use crate::model::{Assignment, Problem, Rational, WeakPreference};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Exhaustive subset enumeration in [`egalitarian_solution`] scans
/// `2^|I|` agent sets.
pub const EGALITARIAN_AGENT_LIMIT: usize = 20;
/// [`run_rp`] enumerates all `|I|!` agent orderings.
pub const RP_AGENT_LIMIT: usize = 8;

#[derive(Debug, Error)]
pub enum HouseError {
    #[error("not a dichotomous instance: {0}")]
    NotDichotomous(String),
    #[error("shortage assumption violated on object set {objects:?}")]
    ShortageViolated { objects: Vec<usize> },
    #[error("{context} enumerates over at most {limit} agents, got {agents}")]
    EnumerationBudget {
        context: &'static str,
        agents: usize,
        limit: usize,
    },
    #[error("not house-shaped: {0}")]
    NotHouseShaped(String),
    #[error("the eating view only supports the built-in policies")]
    UnsupportedPolicy,
    #[error(
        "the eating-rate system is singular; the step parameters are mis-specified"
    )]
    RateSystemSingular,
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// An economy where each agent partitions the objects into acceptable and
/// unacceptable ones.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DichotomousProblem {
    pub agents: Vec<String>,
    pub objects: Vec<String>,
    pub acceptable: Vec<BTreeSet<usize>>,
}

impl DichotomousProblem {
    /// Structural validation only: the shortage assumption is checked by
    /// [`DichotomousProblem::validate_shortage`] where the theory needs
    /// it, so that small instances (a lone agent and his house) remain
    /// expressible.
    pub fn new(
        agents: Vec<String>,
        objects: Vec<String>,
        acceptable: Vec<BTreeSet<usize>>,
    ) -> Result<Self, HouseError> {
        let n = agents.len();
        let m = objects.len();
        if acceptable.len() != n {
            return Err(HouseError::NotDichotomous(format!(
                "{} acceptable sets for {n} agents",
                acceptable.len()
            )));
        }
        if agents.iter().duplicates().next().is_some()
            || objects.iter().duplicates().next().is_some()
        {
            return Err(HouseError::NotDichotomous("duplicate names".into()));
        }
        for (i, set) in acceptable.iter().enumerate() {
            if set.is_empty() {
                return Err(HouseError::NotDichotomous(format!(
                    "agent {:?} accepts nothing",
                    agents[i]
                )));
            }
            if let Some(&o) = set.iter().find(|&&o| o >= m) {
                return Err(HouseError::NotDichotomous(format!(
                    "agent {:?} accepts unknown object #{o}",
                    agents[i]
                )));
            }
        }
        if let Some(o) = (0..m).find(|o| !acceptable.iter().any(|set| set.contains(o))) {
            return Err(HouseError::NotDichotomous(format!(
                "object {:?} is acceptable to nobody",
                objects[o]
            )));
        }
        Ok(DichotomousProblem {
            agents,
            objects,
            acceptable,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    /// The standing shortage assumption: every nonempty object set is
    /// acceptable to strictly more agents than it has members. Implies
    /// more agents than objects overall.
    pub fn validate_shortage(&self) -> Result<(), HouseError> {
        let m = self.num_objects();
        for mask in 1u32..1 << m {
            let objects: Vec<usize> = (0..m).filter(|o| mask & (1 << o) != 0).collect();
            let interested = self
                .acceptable
                .iter()
                .filter(|set| objects.iter().any(|o| set.contains(o)))
                .count();
            if interested <= objects.len() {
                return Err(HouseError::ShortageViolated { objects });
            }
        }
        Ok(())
    }

    /// Reads a dichotomous instance out of a general problem: preferences
    /// must have a single class (everything acceptable) or two, and every
    /// object must be a single house.
    pub fn from_problem(problem: &Problem) -> Result<Self, HouseError> {
        for o in 0..problem.num_objects() {
            if problem.quota(o) != Rational::one() {
                return Err(HouseError::NotDichotomous(format!(
                    "object {:?} has quota {}, expected a single house",
                    problem.objects[o],
                    problem.quota(o)
                )));
            }
        }
        let acceptable = problem
            .preferences
            .iter()
            .zip(&problem.agents)
            .map(|(pref, agent)| {
                if pref.num_classes() > 2 {
                    return Err(HouseError::NotDichotomous(format!(
                        "agent {agent:?} ranks objects in {} classes",
                        pref.num_classes()
                    )));
                }
                Ok(pref.classes()[0].iter().copied().collect())
            })
            .collect::<Result<Vec<_>, _>>()?;
        DichotomousProblem::new(problem.agents.clone(), problem.objects.clone(), acceptable)
    }

    /// The equal-division exchange economy the trading procedure runs on.
    ///
    /// The market is padded to house shape with `|I| − |O|` null objects
    /// (indices `|O|` and up) that join every agent's unacceptable class;
    /// everyone owns `1/|I|` of everything. The padding is what lets an
    /// agent whose acceptable objects ran out become indifferent between
    /// leftover real objects and nulls, label the former back into the
    /// market, and so hand them on to the agents who actually want them —
    /// without it, later bottleneck groups fall short of their egalitarian
    /// welfare.
    pub fn to_problem(&self) -> Problem {
        let n = self.num_agents();
        let m = self.num_objects();
        debug_assert!(n > m, "shortage instances have more agents than objects");
        let mut objects = self.objects.clone();
        let mut next = 0usize;
        while objects.len() < n {
            let name = format!("null-{next}");
            next += 1;
            if !objects.contains(&name) {
                objects.push(name);
            }
        }
        let share = Rational::one() / Rational::int(n as i64);
        let preferences = self
            .acceptable
            .iter()
            .map(|set| {
                let best: Vec<usize> = set.iter().copied().collect();
                let rest: Vec<usize> = (0..n).filter(|o| !set.contains(o)).collect();
                WeakPreference::new(vec![best, rest], n)
                    .expect("acceptable sets and padding partition the objects")
            })
            .collect();
        Problem::new(
            self.agents.clone(),
            objects,
            vec![vec![share; n]; n],
            preferences,
        )
        .expect("equal division is a valid endowment")
    }
}

/// `Γ(Y, O′)`: the objects from `O′` acceptable to at least one agent
/// in `Y`.
pub fn gamma_set(
    problem: &DichotomousProblem,
    agents: &BTreeSet<usize>,
    objects: &BTreeSet<usize>,
) -> BTreeSet<usize> {
    agents
        .iter()
        .flat_map(|&i| problem.acceptable[i].iter().copied())
        .filter(|o| objects.contains(o))
        .collect()
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BottleneckStage {
    pub agents: BTreeSet<usize>,
    pub objects: BTreeSet<usize>,
    pub welfare: Rational,
}

/// The bottleneck decomposition: disjoint agent sets of strictly
/// increasing welfare, each receiving the acceptable objects left to them.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BottleneckSequence {
    pub stages: Vec<BottleneckStage>,
}

/// One scan of all nonempty subsets of the remaining agents: the minimum
/// of `|Γ(Y)|/|Y|` and the union of all minimizers (the union of two
/// minimizers is again one, so the union is the largest minimizer).
fn bottleneck_scan(accept_masks: &[u32], parallel: bool) -> (u64, u64, u32) {
    let combine = |a: (u64, u64, u32), b: (u64, u64, u32)| -> (u64, u64, u32) {
        let (ga, ya, ma) = a;
        let (gb, yb, mb) = b;
        match (ga * yb).cmp(&(gb * ya)) {
            std::cmp::Ordering::Less => a,
            std::cmp::Ordering::Greater => b,
            std::cmp::Ordering::Equal => (ga, ya, ma | mb),
        }
    };
    let evaluate = |mask: u32| -> (u64, u64, u32) {
        let gamma = accept_masks
            .iter()
            .enumerate()
            .filter(|&(i, _)| mask & (1 << i) != 0)
            .fold(0u32, |acc, (_, &objs)| acc | objs);
        (
            u64::from(gamma.count_ones()),
            u64::from(mask.count_ones()),
            mask,
        )
    };
    let z = accept_masks.len();
    let masks = 1u32..1 << z;
    #[cfg(feature = "parallel")]
    if parallel {
        return masks
            .into_par_iter()
            .map(evaluate)
            .reduce_with(combine)
            .expect("at least one nonempty subset");
    }
    let _ = parallel;
    masks.map(evaluate).reduce(combine).expect("at least one nonempty subset")
}

fn egalitarian_inner(
    problem: &DichotomousProblem,
    parallel: bool,
) -> Result<(BottleneckSequence, Vec<Rational>), HouseError> {
    let n = problem.num_agents();
    if n > EGALITARIAN_AGENT_LIMIT {
        return Err(HouseError::EnumerationBudget {
            context: "the egalitarian solution",
            agents: n,
            limit: EGALITARIAN_AGENT_LIMIT,
        });
    }
    problem.validate_shortage()?;

    let mut remaining_agents: Vec<usize> = (0..n).collect();
    let mut pool: BTreeSet<usize> = (0..problem.num_objects()).collect();
    let mut stages = Vec::new();
    let mut welfare = vec![Rational::zero(); n];
    while !remaining_agents.is_empty() {
        let accept_masks: Vec<u32> = remaining_agents
            .iter()
            .map(|&i| {
                problem.acceptable[i]
                    .iter()
                    .filter(|o| pool.contains(o))
                    .fold(0u32, |acc, &o| acc | 1 << o)
            })
            .collect();
        let (gamma_count, agent_count, union_mask) = bottleneck_scan(&accept_masks, parallel);
        let agents: BTreeSet<usize> = remaining_agents
            .iter()
            .enumerate()
            .filter(|&(pos, _)| union_mask & (1 << pos) != 0)
            .map(|(_, &i)| i)
            .collect();
        let objects = gamma_set(problem, &agents, &pool);
        let t = Rational::int(objects.len() as i64) / Rational::int(agents.len() as i64);
        debug_assert_eq!(
            (objects.len() as u64) * agent_count,
            gamma_count * agents.len() as u64,
            "the union of minimizers must itself attain the minimum"
        );
        debug_assert!(stages
            .last()
            .is_none_or(|prev: &BottleneckStage| prev.welfare < t));
        for &i in &agents {
            welfare[i] = t.clone();
        }
        remaining_agents.retain(|i| !agents.contains(i));
        pool.retain(|o| !objects.contains(o));
        stages.push(BottleneckStage {
            agents,
            objects,
            welfare: t,
        });
    }
    Ok((BottleneckSequence { stages }, welfare))
}

/// The egalitarian welfare distribution: repeatedly extracts the agent
/// set minimizing the acceptable-objects-per-agent ratio and shares those
/// objects equally within it.
pub fn egalitarian_solution(
    problem: &DichotomousProblem,
) -> Result<(BottleneckSequence, Vec<Rational>), HouseError> {
    egalitarian_inner(problem, true)
}

/// Single-threaded twin of [`egalitarian_solution`].
pub fn egalitarian_solution_seq(
    problem: &DichotomousProblem,
) -> Result<(BottleneckSequence, Vec<Rational>), HouseError> {
    egalitarian_inner(problem, false)
}

/// Each agent's acceptable mass under an assignment on the equal-division
/// economy of [`DichotomousProblem::to_problem`].
pub fn welfare_vector(problem: &DichotomousProblem, p: &Assignment) -> Vec<Rational> {
    debug_assert_eq!(p.num_agents(), problem.num_agents());
    debug_assert!(p.num_objects() >= problem.num_objects());
    problem
        .acceptable
        .iter()
        .enumerate()
        .map(|(i, set)| set.iter().map(|&o| p.get(i, o).clone()).sum())
        .collect()
}

/// The ordered nonempty decrements of the availability sets along a
/// trace, ending against the empty set: the groups of real objects that
/// leave the market together. Null padding (indices at or beyond
/// `real_objects`) is ignored, and events where only nulls disappear are
/// dropped.
pub fn shrink_events(trace: &Trace, real_objects: usize) -> Vec<BTreeSet<usize>> {
    let Some(first) = trace.steps.first() else {
        return Vec::new();
    };
    let every_object: BTreeSet<usize> = (0..first.state.assignment.num_objects()).collect();
    let availabilities = std::iter::once(every_object)
        .chain(trace.steps.iter().map(|r| r.state.availability()))
        .chain(std::iter::once(BTreeSet::new()));
    availabilities
        .tuple_windows()
        .map(|(before, after)| {
            before
                .difference(&after)
                .copied()
                .filter(|&o| o < real_objects)
                .collect::<BTreeSet<_>>()
        })
        .filter(|gone| !gone.is_empty())
        .collect()
}

/// Piecewise-constant record of a continuous eating run: `breakpoints`
/// frame the intervals, `rates` and `targets` give each agent's speed and
/// consumed amount per interval.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct EatingSchedule {
    pub breakpoints: Vec<Rational>,
    pub rates: Vec<Vec<Rational>>,
    pub targets: Vec<Vec<Rational>>,
}

/// Simulates the trading procedure as simultaneous eating in continuous
/// time on a house-allocation economy (`|I| = |O|`, everyone owns `1/|I|`
/// of everything).
///
/// Agents eat their pointed objects at base rate 1; an agent whose
/// labeled consumption is being eaten has his rate raised by exactly the
/// speed at which it disappears, so the rates solve
/// `s_i = 1 + Σ_{o∈Õ_i} λ_{i,o} Σ_{j: o∈A_j} γ_{j,o} s_j`
/// on every interval between exhaustion breakpoints. Cumulative
/// consumption at time 1 reproduces the step-by-step trading outcome, but
/// is computed here from the rate system and breakpoint scan alone.
pub fn run_eating(
    problem: &Problem,
    policy: &Policy,
) -> Result<(Assignment, EatingSchedule), HouseError> {
    let n = problem.num_agents();
    let m = problem.num_objects();
    if n != m {
        return Err(HouseError::NotHouseShaped(format!(
            "{n} agents against {m} objects"
        )));
    }
    let share = Rational::one() / Rational::int(n as i64);
    if problem
        .endowments
        .iter()
        .flatten()
        .any(|w| *w != share)
    {
        return Err(HouseError::NotHouseShaped(format!(
            "every agent must own exactly {share} of every object"
        )));
    }
    if matches!(policy, Policy::Custom(_)) {
        // step-indexed overrides have no continuous-time reading
        return Err(HouseError::UnsupportedPolicy);
    }

    let mut state = StepState::initial(problem);
    let mut elapsed = Rational::zero();
    let mut schedule = EatingSchedule {
        breakpoints: vec![Rational::zero()],
        rates: Vec::new(),
        targets: Vec::new(),
    };
    while !state.remaining.is_empty() {
        if state.step > DEFAULT_STEP_BUDGET {
            return Err(HouseError::Internal(
                "eating exceeded the interval safety budget".into(),
            ));
        }
        labeling_stage(problem, &mut state);
        pointing_stage(problem, &mut state)?;
        let params = make_parameters(problem, &state, policy)?;

        // rates: s = 1 + B s, where B routes the consumption speed of
        // labeled stock back to its labelers
        let mut system = vec![vec![Rational::zero(); n]; n];
        for (i, row) in system.iter_mut().enumerate() {
            row[i] = Rational::one();
            for &o in &state.labels[i] {
                for j in 0..n {
                    row[j] -= &params.lambda_labeled[i][o] * &params.gamma_labeled[j][o];
                }
            }
        }
        let rates = solve_linear_system(system, vec![Rational::one(); n])
            .ok_or(HouseError::RateSystemSingular)?;
        debug_assert!(rates.iter().all(|s| *s >= Rational::one()));

        // depletion speed of every real pot and labeled stock
        let real_rate = |o: usize| -> Rational {
            (0..n).map(|j| &params.gamma_real[j][o] * &rates[j]).sum()
        };
        let labeled_rate = |o: usize| -> Rational {
            (0..n).map(|j| &params.gamma_labeled[j][o] * &rates[j]).sum()
        };

        // first moment a cap runs dry: real caps β against λ shares of
        // the pot speed, labeled caps p against λ shares of the stock
        // speed — the same caps that stop a discrete trading step
        let mut dt: Option<Rational> = None;
        let mut note = |candidate: Rational| {
            if dt.as_ref().is_none_or(|best| candidate < *best) {
                dt = Some(candidate);
            }
        };
        for &o in &state.remaining {
            let speed = real_rate(o);
            if !speed.is_positive() {
                continue;
            }
            for j in 0..n {
                if params.lambda_real[j][o].is_positive() {
                    note(&params.beta[j][o] / (&params.lambda_real[j][o] * &speed));
                }
            }
        }
        for &o in &state.labeled_union {
            let speed = labeled_rate(o);
            if !speed.is_positive() {
                continue;
            }
            for j in 0..n {
                if params.lambda_labeled[j][o].is_positive() {
                    note(state.assignment.get(j, o) / (&params.lambda_labeled[j][o] * &speed));
                }
            }
        }
        let dt = dt.ok_or_else(|| {
            HouseError::Internal("no stock is being eaten despite remaining supply".into())
        })?;
        debug_assert!(dt.is_positive());

        for &o in &state.remaining.clone() {
            let eaten = real_rate(o) * &dt;
            if eaten.is_zero() {
                continue;
            }
            for j in 0..n {
                let loss = &params.lambda_real[j][o] * &eaten;
                state.endowments[j][o] -= loss;
                debug_assert!(!state.endowments[j][o].is_negative());
            }
        }
        for &o in &state.labeled_union.clone() {
            let eaten = labeled_rate(o) * &dt;
            if eaten.is_zero() {
                continue;
            }
            for j in 0..n {
                let loss = &params.lambda_labeled[j][o] * &eaten;
                state.assignment.sub_from(j, o, &loss);
            }
        }
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let amount = &rates[i] * &dt;
            for &o in state.pointed[i].iter() {
                let gamma = if state.remaining.contains(&o) {
                    &params.gamma_real[i][o]
                } else {
                    &params.gamma_labeled[i][o]
                };
                state.assignment.add_to(i, o, &(gamma * &amount));
            }
            targets.push(amount);
        }
        state
            .remaining
            .retain(|&o| (0..n).any(|j| state.endowments[j][o].is_positive()));
        state.step += 1;
        elapsed += &dt;
        schedule.breakpoints.push(elapsed.clone());
        schedule.rates.push(rates);
        schedule.targets.push(targets);
    }
    if elapsed != Rational::one() {
        return Err(HouseError::Internal(format!(
            "eating finished at time {elapsed}, expected 1"
        )));
    }
    if (0..n).any(|i| state.assignment.row_total(i) != Rational::one()) {
        return Err(HouseError::Internal(
            "an agent did not end up with exactly one unit".into(),
        ));
    }
    Ok((state.assignment, schedule))
}

/// All maximum-cardinality matchings, as agent-indexed object choices.
fn maximum_matchings(problem: &DichotomousProblem) -> Vec<Vec<Option<usize>>> {
    let n = problem.num_agents();
    let m = problem.num_objects();
    let takers: Vec<Vec<usize>> = (0..m)
        .map(|o| (0..n).filter(|&i| problem.acceptable[i].contains(&o)).collect())
        .collect();

    fn explore(
        object: usize,
        matched: usize,
        takers: &[Vec<usize>],
        assignment: &mut Vec<Option<usize>>,
        out: &mut Vec<(usize, Vec<Option<usize>>)>,
    ) {
        if object == takers.len() {
            out.push((matched, assignment.clone()));
            return;
        }
        explore(object + 1, matched, takers, assignment, out);
        for &agent in &takers[object] {
            if assignment[agent].is_none() {
                assignment[agent] = Some(object);
                explore(object + 1, matched + 1, takers, assignment, out);
                assignment[agent] = None;
            }
        }
    }

    let mut all = Vec::new();
    explore(0, 0, &takers, &mut vec![None; n], &mut all);
    let best = all.iter().map(|(size, _)| *size).max().unwrap_or(0);
    all.into_iter()
        .filter(|(size, _)| *size == best)
        .map(|(_, matching)| matching)
        .collect()
}

fn rp_inner(problem: &DichotomousProblem, parallel: bool) -> Result<Assignment, HouseError> {
    let n = problem.num_agents();
    let m = problem.num_objects();
    if n > RP_AGENT_LIMIT {
        return Err(HouseError::EnumerationBudget {
            context: "random priority",
            agents: n,
            limit: RP_AGENT_LIMIT,
        });
    }
    let matchings = maximum_matchings(problem);
    let orderings: Vec<Vec<usize>> = (0..n).permutations(n).collect();

    // one ordering's lottery: agents successively discard the matchings
    // that leave them unmatched when any survivor serves them, then the
    // survivors are averaged uniformly
    let tally = |ordering: &Vec<usize>| -> Vec<Vec<Rational>> {
        let mut survivors: Vec<&Vec<Option<usize>>> = matchings.iter().collect();
        for &agent in ordering {
            if survivors.iter().any(|mu| mu[agent].is_some()) {
                survivors.retain(|mu| mu[agent].is_some());
            }
        }
        let weight = Rational::one() / Rational::int(survivors.len() as i64);
        let mut rows = vec![vec![Rational::zero(); m]; n];
        for mu in survivors {
            for (i, choice) in mu.iter().enumerate() {
                if let Some(o) = choice {
                    rows[i][*o] += &weight;
                }
            }
        }
        rows
    };
    let add = |mut acc: Vec<Vec<Rational>>, rows: Vec<Vec<Rational>>| {
        for (acc_row, row) in acc.iter_mut().zip(rows) {
            for (cell, value) in acc_row.iter_mut().zip(row) {
                *cell += value;
            }
        }
        acc
    };

    let zero = || vec![vec![Rational::zero(); m]; n];
    let total = {
        #[cfg(feature = "parallel")]
        {
            if parallel {
                orderings.par_iter().map(tally).reduce(zero, &add)
            } else {
                orderings.iter().map(tally).fold(zero(), add)
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = parallel;
            orderings.iter().map(tally).fold(zero(), add)
        }
    };
    let scale = Rational::one() / Rational::int(orderings.len() as i64);
    let rows = total
        .into_iter()
        .map(|row| row.into_iter().map(|cell| cell * &scale).collect())
        .collect();
    Ok(Assignment::from_rows(rows))
}

/// The Random Priority lottery, computed exactly: agents in every
/// ordering successively narrow the maximum-cardinality matchings to
/// those serving them, and the expectation is taken uniformly over
/// orderings and surviving matchings.
pub fn run_rp(problem: &DichotomousProblem) -> Result<Assignment, HouseError> {
    rp_inner(problem, true)
}

/// Single-threaded twin of [`run_rp`].
pub fn run_rp_seq(problem: &DichotomousProblem) -> Result<Assignment, HouseError> {
    rp_inner(problem, false)
}
