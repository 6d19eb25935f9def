#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use fttc::engine::{run_fttc, EngineError, Policy, Trace};
use fttc::house::DichotomousProblem;
use fttc::model::{Assignment, Problem, Rational, WeakPreference};
use fttc::solver::{CapSet, GraphObject, ObjectKind, TradingGraph};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rat(n: i64, d: i64) -> Rational {
    Rational::new(n, d)
}

pub fn builtin_policies() -> [Policy; 3] {
    [Policy::Equal, Policy::Proportional, Policy::Leveling]
}

/// Runs the mechanism and turns a blown step budget into a loud test
/// failure carrying the trace.
pub fn run_guarded(problem: &Problem, policy: &Policy) -> (Assignment, Trace) {
    match run_fttc(problem, policy) {
        Ok(result) => result,
        Err(EngineError::BudgetExceeded {
            budget,
            step,
            trace,
        }) => panic!("step budget {budget} exhausted at step {step}; trace: {trace:#?}"),
        Err(other) => panic!("engine failed on {problem:?}: {other}"),
    }
}

/// Availability `O(d−1) ∪ Õ(d−1)` must weakly shrink along every trace.
pub fn assert_availability_shrinks(trace: &Trace) {
    for pair in trace.steps.windows(2) {
        let before = pair[0].state.availability();
        let after = pair[1].state.availability();
        assert!(
            after.is_subset(&before),
            "availability grew from {before:?} to {after:?} at step {}",
            pair[1].state.step
        );
    }
}

/// An exact random stochastic vector; zeros allowed, at least one positive
/// entry.
pub fn stochastic_row(rng: &mut ChaCha8Rng, len: usize) -> Vec<Rational> {
    loop {
        let weights: Vec<i64> = (0..len).map(|_| rng.gen_range(0..=3)).collect();
        let total: i64 = weights.iter().sum();
        if total > 0 {
            return weights.into_iter().map(|w| rat(w, total)).collect();
        }
    }
}

pub fn random_weak_preference(rng: &mut ChaCha8Rng, m: usize) -> WeakPreference {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let mut classes = vec![vec![order[0]]];
    for &o in &order[1..] {
        if rng.gen_bool(0.5) {
            classes.push(vec![o]);
        } else {
            classes.last_mut().expect("nonempty").push(o);
        }
    }
    WeakPreference::new(classes, m).expect("generated classes partition the objects")
}

pub fn random_strict_preference(rng: &mut ChaCha8Rng, m: usize) -> WeakPreference {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    WeakPreference::strict(&order).expect("shuffled order is a permutation")
}

/// A random exchange instance with integer quotas: endowments are a convex
/// combination of 0/1 placements handing each object fully to quota-many
/// distinct agents, so column sums are integers and row sums stay ≤ 1.
pub fn random_problem(rng: &mut ChaCha8Rng, max_agents: usize, max_objects: usize) -> Problem {
    let n = rng.gen_range(1..=max_agents);
    let m = rng.gen_range(1..=n.min(max_objects));
    let mut quotas = vec![1usize; m];
    let mut slack = n - m;
    for quota in quotas.iter_mut() {
        let extra = rng.gen_range(0..=slack);
        *quota += extra;
        slack -= extra;
    }

    let draws = rng.gen_range(1..=3);
    let weights: Vec<i64> = (0..draws).map(|_| rng.gen_range(1..=5)).collect();
    let total: i64 = weights.iter().sum();
    let mut endowments = vec![vec![Rational::zero(); m]; n];
    for weight in weights {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut cursor = 0;
        for (o, &quota) in quotas.iter().enumerate() {
            for _ in 0..quota {
                endowments[order[cursor]][o] += rat(weight, total);
                cursor += 1;
            }
        }
    }

    let preferences = (0..n).map(|_| random_weak_preference(rng, m)).collect();
    Problem::new(
        (1..=n).map(|i| format!("i{i}")).collect(),
        (1..=m).map(|o| format!("o{o}")).collect(),
        endowments,
        preferences,
    )
    .expect("generated instance is well-formed")
}

/// A house-allocation economy: `n` agents, `n` objects, `1/n` of everything
/// each.
pub fn random_house(rng: &mut ChaCha8Rng, max_agents: usize, strict: bool) -> Problem {
    let n = rng.gen_range(2..=max_agents);
    let preferences = (0..n)
        .map(|_| {
            if strict {
                random_strict_preference(rng, n)
            } else {
                random_weak_preference(rng, n)
            }
        })
        .collect();
    Problem::new(
        (1..=n).map(|i| format!("i{i}")).collect(),
        (1..=n).map(|o| format!("o{o}")).collect(),
        vec![vec![rat(1, n as i64); n]; n],
        preferences,
    )
    .expect("house economy is well-formed")
}

fn undersupplied_subset(acceptable: &[BTreeSet<usize>], m: usize) -> Option<u32> {
    (1u32..1 << m).find(|&mask| {
        let size = mask.count_ones() as usize;
        let interested = acceptable
            .iter()
            .filter(|set| set.iter().any(|&o| mask >> o & 1 == 1))
            .count();
        interested <= size
    })
}

/// A random dichotomous instance satisfying the shortage condition: every
/// nonempty object set interests strictly more agents than it has objects.
/// Sampled acceptable sets are healed by handing an object from each
/// undersupplied subset to an uninterested agent (interest counts only
/// grow, so healing terminates).
pub fn random_dichotomous(rng: &mut ChaCha8Rng, max_agents: usize) -> DichotomousProblem {
    let n = rng.gen_range(2..=max_agents);
    let m = rng.gen_range(1..=(n - 1).min(4));
    let mut acceptable: Vec<BTreeSet<usize>> = (0..n)
        .map(|_| {
            let mut set: BTreeSet<usize> = (0..m).filter(|_| rng.gen_bool(0.6)).collect();
            if set.is_empty() {
                set.insert(rng.gen_range(0..m));
            }
            set
        })
        .collect();
    while let Some(mask) = undersupplied_subset(&acceptable, m) {
        let objects: Vec<usize> = (0..m).filter(|o| mask >> o & 1 == 1).collect();
        let outsiders: Vec<usize> = (0..n)
            .filter(|&i| !acceptable[i].iter().any(|&o| mask >> o & 1 == 1))
            .collect();
        let &agent = outsiders.choose(rng).expect("shortage gap implies an outsider");
        acceptable[agent].insert(*objects.choose(rng).expect("subset nonempty"));
    }
    let problem = DichotomousProblem::new(
        (1..=n).map(|i| format!("i{i}")).collect(),
        (1..=m).map(|o| format!("o{o}")).collect(),
        acceptable,
    )
    .expect("healed instance is well-formed");
    problem.validate_shortage().expect("healing enforces shortage");
    problem
}

/// A random capped trading network with exact stochastic weights.
pub fn random_graph(rng: &mut ChaCha8Rng) -> (TradingGraph, CapSet) {
    let a = rng.gen_range(1..=4);
    let b = rng.gen_range(1..=4);
    let objects: Vec<GraphObject> = (0..b)
        .map(|o| GraphObject {
            id: o,
            kind: if rng.gen_bool(0.25) {
                ObjectKind::Labeled
            } else {
                ObjectKind::Real
            },
        })
        .collect();
    let lambda: Vec<Vec<Rational>> = (0..b).map(|_| stochastic_row(rng, a)).collect();
    let gamma: Vec<Vec<Rational>> = (0..a).map(|_| stochastic_row(rng, b)).collect();
    let caps: Vec<Vec<Rational>> = (0..b)
        .map(|_| {
            (0..a)
                .map(|_| rat(rng.gen_range(0..=6), rng.gen_range(1..=4)))
                .collect()
        })
        .collect();
    let graph =
        TradingGraph::new((0..a).collect(), objects, lambda, gamma).expect("weights are stochastic");
    let caps = CapSet::new(caps).expect("caps are nonnegative");
    (graph, caps)
}

/// Classic simultaneous eating at unit speed for strict preferences: the
/// reference point for the eating view on strict-preference house
/// economies.
pub fn ps_classic(problem: &Problem) -> Assignment {
    let n = problem.num_agents();
    let m = problem.num_objects();
    let mut supply: Vec<Rational> = (0..m).map(|o| problem.quota(o)).collect();
    let mut assignment = Assignment::zeros(n, m);
    let mut remaining: BTreeSet<usize> = (0..m).collect();
    while !remaining.is_empty() {
        let mut eaters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            let favourite = *remaining
                .iter()
                .min_by_key(|&&o| problem.preferences[i].rank(o))
                .expect("objects remain");
            eaters.entry(favourite).or_default().push(i);
        }
        let dt = eaters
            .iter()
            .map(|(&o, crowd)| &supply[o] / &rat(crowd.len() as i64, 1))
            .min()
            .expect("someone is eating");
        for (&o, crowd) in &eaters {
            for &i in crowd {
                assignment.add_to(i, o, &dt);
            }
            supply[o] = &supply[o] - &(&dt * &rat(crowd.len() as i64, 1));
            if supply[o].is_zero() {
                remaining.remove(&o);
            }
        }
    }
    assignment
}
