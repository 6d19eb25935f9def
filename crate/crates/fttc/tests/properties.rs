//! Randomized invariant checks. Instances are grown from a seeded ChaCha
//! stream, so every failure replays from the proptest seed alone.

mod common;

use proptest::prelude::*;
use rand::Rng;

use fttc::engine::Policy;
use fttc::house::{egalitarian_solution, run_eating, run_rp};
use fttc::model::{
    parse_problem, sd_compare, serialize_problem, DominanceVerdict, Lottery, Rational,
};

use common::*;

fn random_lottery(rng: &mut rand_chacha::ChaCha8Rng, m: usize) -> Lottery {
    let mut shares = stochastic_row(rng, m);
    if rng.gen_bool(0.3) {
        let shrink = rat(rng.gen_range(1..=3), 4);
        for share in shares.iter_mut() {
            *share = &*share * &shrink;
        }
    }
    Lottery::new(shares)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trading_conserves_quotas_and_row_totals(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let problem = random_problem(&mut rng, 5, 5);
        for policy in builtin_policies() {
            let (assignment, _) = run_guarded(&problem, &policy);
            for o in 0..problem.num_objects() {
                prop_assert_eq!(assignment.column_total(o), problem.quota(o));
            }
            for i in 0..problem.num_agents() {
                let endowed: Rational = problem.endowments[i].iter().sum();
                prop_assert_eq!(assignment.row_total(i), endowed);
            }
        }
    }

    #[test]
    fn every_output_dominates_the_endowment(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let problem = random_problem(&mut rng, 5, 5);
        for policy in builtin_policies() {
            let (assignment, _) = run_guarded(&problem, &policy);
            for i in 0..problem.num_agents() {
                let verdict = sd_compare(
                    &assignment.lottery(i),
                    &problem.endowment_lottery(i),
                    &problem.preferences[i],
                );
                prop_assert!(verdict.weakly_dominates(), "agent {i} lost ground: {verdict:?}");
            }
        }
    }

    #[test]
    fn dominance_is_reflexive_and_oriented(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let m = rng.gen_range(1..=5);
        let pref = random_weak_preference(&mut rng, m);
        let p = random_lottery(&mut rng, m);
        let q = random_lottery(&mut rng, m);
        prop_assert_eq!(sd_compare(&p, &p, &pref), DominanceVerdict::Equal);
        match sd_compare(&p, &q, &pref) {
            DominanceVerdict::Equal => {
                prop_assert_eq!(sd_compare(&q, &p, &pref), DominanceVerdict::Equal);
            }
            DominanceVerdict::Strict => {
                prop_assert_eq!(sd_compare(&q, &p, &pref), DominanceVerdict::Incomparable);
            }
            DominanceVerdict::Incomparable | DominanceVerdict::WeakNotStrict => {}
        }
    }

    #[test]
    fn serialization_round_trips(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let problem = random_problem(&mut rng, 5, 5);
        let text = serialize_problem(&problem);
        let back = parse_problem(text.as_bytes()).unwrap();
        prop_assert_eq!(&back, &problem);
        prop_assert_eq!(serialize_problem(&back), text);
    }

    #[test]
    fn labels_are_backed_by_positive_consumption(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let problem = random_problem(&mut rng, 5, 5);
        let (_, trace) = run_guarded(&problem, &Policy::Equal);
        for record in &trace.steps {
            for (i, labelled) in record.state.labels.iter().enumerate() {
                for &o in labelled {
                    prop_assert!(record.state.assignment.get(i, o).is_positive());
                    prop_assert!(!record.state.remaining.contains(&o));
                }
            }
        }
        assert_availability_shrinks(&trace);
    }

    #[test]
    fn eating_schedules_cover_unit_time(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let strict = rng.gen_bool(0.5);
        let problem = random_house(&mut rng, 4, strict);
        let (assignment, schedule) = run_eating(&problem, &Policy::Equal).unwrap();
        prop_assert_eq!(schedule.breakpoints.first().unwrap(), &Rational::zero());
        prop_assert_eq!(schedule.breakpoints.last().unwrap(), &Rational::one());
        for pair in schedule.breakpoints.windows(2) {
            prop_assert!(pair[0] < pair[1]);
        }
        prop_assert_eq!(schedule.rates.len() + 1, schedule.breakpoints.len());
        for interval in &schedule.rates {
            for rate in interval {
                prop_assert!(*rate >= Rational::one());
            }
        }
        for i in 0..problem.num_agents() {
            prop_assert_eq!(assignment.row_total(i), Rational::one());
        }
    }

    #[test]
    fn bottleneck_stages_partition_the_market(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let dichotomous = random_dichotomous(&mut rng, 6);
        let (sequence, welfare) = egalitarian_solution(&dichotomous).unwrap();
        let mut seen_agents = std::collections::BTreeSet::new();
        let mut seen_objects = std::collections::BTreeSet::new();
        let mut last = Rational::zero();
        for stage in &sequence.stages {
            prop_assert!(stage.welfare > last);
            last = stage.welfare.clone();
            prop_assert!(stage.welfare <= Rational::one());
            for &i in &stage.agents {
                prop_assert!(seen_agents.insert(i));
                prop_assert_eq!(&welfare[i], &stage.welfare);
            }
            for &o in &stage.objects {
                prop_assert!(seen_objects.insert(o));
            }
        }
        prop_assert_eq!(seen_agents.len(), dichotomous.num_agents());
        prop_assert!(seen_objects.len() <= dichotomous.num_objects());
    }

    #[test]
    fn rp_outputs_feasible_acceptable_lotteries(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let dichotomous = random_dichotomous(&mut rng, 5);
        let assignment = run_rp(&dichotomous).unwrap();
        for i in 0..dichotomous.num_agents() {
            prop_assert!(assignment.row_total(i) <= Rational::one());
            for o in 0..dichotomous.num_objects() {
                let share = assignment.get(i, o);
                prop_assert!(!share.is_negative());
                if share.is_positive() {
                    prop_assert!(dichotomous.acceptable[i].contains(&o));
                }
            }
        }
        for o in 0..dichotomous.num_objects() {
            prop_assert!(assignment.column_total(o) <= Rational::one());
        }
    }

    #[test]
    fn rational_arithmetic_behaves_like_a_field(
        a_num in -60i64..=60,
        a_den in 1i64..=12,
        b_num in -60i64..=60,
        b_den in 1i64..=12,
    ) {
        let a = Rational::new(a_num, a_den);
        let b = Rational::new(b_num, b_den);
        prop_assert_eq!(&(&a + &b) - &b, a.clone());
        if !b.is_zero() {
            prop_assert_eq!(&(&a * &b) / &b, a.clone());
        }
        prop_assert_eq!(a < b, (&a - &b).is_negative());
        prop_assert_eq!(a == b, (&a - &b).is_zero());
    }
}
