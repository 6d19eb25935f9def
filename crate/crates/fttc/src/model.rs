//! Core domain types: exact rationals, weak preferences, problems, lotteries,
//! assignments, stochastic-dominance comparison, and the JSON problem format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};
use std::str::FromStr;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Exact rational number in canonical reduced form (denominator > 0,
/// gcd(|numerator|, denominator) = 1). All arithmetic in the crate goes
/// through this type; there is no floating point anywhere.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rational(BigRational);

impl Rational {
    pub fn zero() -> Self {
        Rational(BigRational::zero())
    }

    pub fn one() -> Self {
        Rational(BigRational::one())
    }

    pub fn int(n: i64) -> Self {
        Rational(BigRational::from_integer(BigInt::from(n)))
    }

    /// Builds `n/d`, reducing to canonical form. Panics if `d == 0`.
    pub fn new(n: i64, d: i64) -> Self {
        Rational(BigRational::new(BigInt::from(n), BigInt::from(d)))
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_positive(&self) -> bool {
        self.0.is_positive()
    }

    pub fn is_negative(&self) -> bool {
        self.0.is_negative()
    }

    pub fn is_integer(&self) -> bool {
        self.0.is_integer()
    }

    pub fn abs(&self) -> Self {
        Rational(self.0.abs())
    }

    pub fn recip(&self) -> Self {
        Rational(self.0.recip())
    }

    /// Parses the canonical text form: an optional minus sign, then either a
    /// bare integer or `num/den` with `den > 1` and the fraction fully
    /// reduced. Anything else — `"2/4"`, `"3/1"`, `"-0"`, leading zeros — is
    /// rejected so that parsing and printing are exact inverses.
    pub fn parse(text: &str) -> Result<Self, RationalParseError> {
        let malformed = || RationalParseError::Malformed(text.to_owned());
        let non_canonical = || RationalParseError::NonCanonical(text.to_owned());
        let (neg, body) = match text.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, text),
        };
        let digits_ok = |s: &str| {
            !s.is_empty()
                && s.bytes().all(|b| b.is_ascii_digit())
                && (s.len() == 1 || !s.starts_with('0'))
        };
        let make = |num_digits: &str, den_digits: &str| -> Result<Self, RationalParseError> {
            let mut num = BigInt::from_str(num_digits).expect("checked digits");
            let den = BigInt::from_str(den_digits).expect("checked digits");
            if neg {
                if num.is_zero() {
                    return Err(non_canonical());
                }
                num = -num;
            }
            Ok(Rational(BigRational::new_raw(num, den)))
        };
        match body.split_once('/') {
            None => {
                if !digits_ok(body) {
                    return Err(malformed());
                }
                make(body, "1")
            }
            Some((n, d)) => {
                if !digits_ok(n) || !digits_ok(d) {
                    return Err(malformed());
                }
                if d == "0" {
                    return Err(malformed());
                }
                if d == "1" {
                    return Err(non_canonical());
                }
                let gcd = BigInt::from_str(n).unwrap().gcd(&BigInt::from_str(d).unwrap());
                if !gcd.is_one() {
                    return Err(non_canonical());
                }
                make(n, d)
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RationalParseError {
    #[error("malformed rational {0:?}")]
    Malformed(String),
    #[error("non-canonical rational {0:?}")]
    NonCanonical(String),
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_integer() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl fmt::Debug for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

macro_rules! rational_binop {
    ($trait:ident, $method:ident) => {
        impl $trait for Rational {
            type Output = Rational;
            fn $method(self, rhs: Rational) -> Rational {
                Rational((self.0).$method(rhs.0))
            }
        }
        impl $trait<&Rational> for Rational {
            type Output = Rational;
            fn $method(self, rhs: &Rational) -> Rational {
                Rational((self.0).$method(&rhs.0))
            }
        }
        impl $trait<Rational> for &Rational {
            type Output = Rational;
            fn $method(self, rhs: Rational) -> Rational {
                Rational((&self.0).$method(rhs.0))
            }
        }
        impl $trait<&Rational> for &Rational {
            type Output = Rational;
            fn $method(self, rhs: &Rational) -> Rational {
                Rational((&self.0).$method(&rhs.0))
            }
        }
    };
}

rational_binop!(Add, add);
rational_binop!(Sub, sub);
rational_binop!(Mul, mul);
rational_binop!(Div, div);

impl Neg for Rational {
    type Output = Rational;
    fn neg(self) -> Rational {
        Rational(-self.0)
    }
}

impl Neg for &Rational {
    type Output = Rational;
    fn neg(self) -> Rational {
        Rational(-&self.0)
    }
}

impl AddAssign<&Rational> for Rational {
    fn add_assign(&mut self, rhs: &Rational) {
        self.0 = &self.0 + &rhs.0;
    }
}

impl AddAssign for Rational {
    fn add_assign(&mut self, rhs: Rational) {
        *self += &rhs;
    }
}

impl SubAssign<&Rational> for Rational {
    fn sub_assign(&mut self, rhs: &Rational) {
        self.0 = &self.0 - &rhs.0;
    }
}

impl SubAssign for Rational {
    fn sub_assign(&mut self, rhs: Rational) {
        *self -= &rhs;
    }
}

impl Sum for Rational {
    fn sum<I: Iterator<Item = Rational>>(iter: I) -> Rational {
        iter.fold(Rational::zero(), |acc, r| acc + r)
    }
}

impl<'a> Sum<&'a Rational> for Rational {
    fn sum<I: Iterator<Item = &'a Rational>>(iter: I) -> Rational {
        iter.fold(Rational::zero(), |acc, r| acc + r)
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct RationalVisitor;
        impl Visitor<'_> for RationalVisitor {
            type Value = Rational;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a canonical rational string like \"3/4\" or an integer")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Rational, E> {
                Rational::parse(v).map_err(E::custom)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Rational, E> {
                Ok(Rational::int(v))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Rational, E> {
                Ok(Rational(BigRational::from_integer(BigInt::from(v))))
            }
        }
        deserializer.deserialize_any(RationalVisitor)
    }
}

/// A complete, transitive preference over objects, stored as ordered
/// indifference classes (best class first). The classes partition the whole
/// object set; objects inside one class are mutually indifferent.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct WeakPreference {
    classes: Vec<Vec<usize>>,
    rank: Vec<usize>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PreferenceError {
    #[error("empty indifference class")]
    EmptyClass,
    #[error("object #{0} appears in more than one class")]
    DuplicateObject(usize),
    #[error("object #{0} missing from the partition")]
    MissingObject(usize),
    #[error("object #{0} out of range")]
    OutOfRange(usize),
}

impl WeakPreference {
    /// Builds a preference from indifference classes over objects
    /// `0..num_objects`; the classes must partition that range.
    pub fn new(classes: Vec<Vec<usize>>, num_objects: usize) -> Result<Self, PreferenceError> {
        let mut rank = vec![usize::MAX; num_objects];
        for (k, class) in classes.iter().enumerate() {
            if class.is_empty() {
                return Err(PreferenceError::EmptyClass);
            }
            for &o in class {
                if o >= num_objects {
                    return Err(PreferenceError::OutOfRange(o));
                }
                if rank[o] != usize::MAX {
                    return Err(PreferenceError::DuplicateObject(o));
                }
                rank[o] = k;
            }
        }
        if let Some(o) = rank.iter().position(|&r| r == usize::MAX) {
            return Err(PreferenceError::MissingObject(o));
        }
        let mut classes = classes;
        for class in &mut classes {
            class.sort_unstable();
        }
        Ok(WeakPreference { classes, rank })
    }

    /// Strict ranking: one singleton class per object, best first.
    pub fn strict(order: &[usize]) -> Result<Self, PreferenceError> {
        Self::new(order.iter().map(|&o| vec![o]).collect(), order.len())
    }

    pub fn classes(&self) -> &[Vec<usize>] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_objects(&self) -> usize {
        self.rank.len()
    }

    /// Index of the indifference class containing `o` (0 = best).
    pub fn rank(&self, o: usize) -> usize {
        self.rank[o]
    }

    pub fn weakly_prefers(&self, a: usize, b: usize) -> bool {
        self.rank[a] <= self.rank[b]
    }

    pub fn strictly_prefers(&self, a: usize, b: usize) -> bool {
        self.rank[a] < self.rank[b]
    }

    pub fn indifferent(&self, a: usize, b: usize) -> bool {
        self.rank[a] == self.rank[b]
    }

    pub fn is_strict(&self) -> bool {
        self.classes.iter().all(|c| c.len() == 1)
    }

    /// Index of the best class that intersects `available`, if any.
    pub fn favorite_class_within(&self, available: &BTreeSet<usize>) -> Option<usize> {
        self.classes
            .iter()
            .position(|class| class.iter().any(|o| available.contains(o)))
    }

    /// The favorite objects among `available`: the intersection of the best
    /// class that meets `available` with `available` itself.
    pub fn favorites_within(&self, available: &BTreeSet<usize>) -> Vec<usize> {
        match self.favorite_class_within(available) {
            Some(k) => self.classes[k]
                .iter()
                .copied()
                .filter(|o| available.contains(o))
                .collect(),
            None => Vec::new(),
        }
    }
}

/// A (sub)probability vector over objects: nonnegative shares summing to at
/// most one.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Lottery {
    shares: Vec<Rational>,
}

impl Lottery {
    pub fn new(shares: Vec<Rational>) -> Self {
        Lottery { shares }
    }

    pub fn zeros(num_objects: usize) -> Self {
        Lottery {
            shares: vec![Rational::zero(); num_objects],
        }
    }

    pub fn shares(&self) -> &[Rational] {
        &self.shares
    }

    pub fn get(&self, o: usize) -> &Rational {
        &self.shares[o]
    }

    pub fn num_objects(&self) -> usize {
        self.shares.len()
    }

    pub fn total(&self) -> Rational {
        self.shares.iter().sum()
    }

    pub fn is_valid(&self) -> bool {
        self.shares.iter().all(|s| !s.is_negative()) && self.total() <= Rational::one()
    }
}

/// A fractional assignment: one lottery row per agent, with per-object
/// columns bounded by the market quota.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Assignment {
    shares: Vec<Vec<Rational>>,
}

impl Assignment {
    pub fn zeros(num_agents: usize, num_objects: usize) -> Self {
        Assignment {
            shares: vec![vec![Rational::zero(); num_objects]; num_agents],
        }
    }

    pub fn from_rows(rows: Vec<Vec<Rational>>) -> Self {
        if let Some(first) = rows.first() {
            assert!(
                rows.iter().all(|r| r.len() == first.len()),
                "assignment rows must have equal lengths"
            );
        }
        Assignment { shares: rows }
    }

    pub fn num_agents(&self) -> usize {
        self.shares.len()
    }

    pub fn num_objects(&self) -> usize {
        self.shares.first().map_or(0, Vec::len)
    }

    pub fn get(&self, agent: usize, object: usize) -> &Rational {
        &self.shares[agent][object]
    }

    pub fn set(&mut self, agent: usize, object: usize, value: Rational) {
        self.shares[agent][object] = value;
    }

    pub fn add_to(&mut self, agent: usize, object: usize, delta: &Rational) {
        self.shares[agent][object] += delta;
    }

    pub fn sub_from(&mut self, agent: usize, object: usize, delta: &Rational) {
        self.shares[agent][object] -= delta;
    }

    pub fn row(&self, agent: usize) -> &[Rational] {
        &self.shares[agent]
    }

    pub fn lottery(&self, agent: usize) -> Lottery {
        Lottery::new(self.shares[agent].clone())
    }

    pub fn row_total(&self, agent: usize) -> Rational {
        self.shares[agent].iter().sum()
    }

    pub fn column_total(&self, object: usize) -> Rational {
        self.shares.iter().map(|row| &row[object]).sum()
    }

    /// Checks the assignment invariants against a problem: nonnegative
    /// entries, column totals within quotas, row totals within one.
    pub fn validate_for(&self, problem: &Problem) -> Result<(), ModelError> {
        if self.num_agents() != problem.num_agents() || self.num_objects() != problem.num_objects()
        {
            return Err(ModelError::ShapeMismatch(
                "assignment dimensions do not match the problem".into(),
            ));
        }
        for (i, row) in self.shares.iter().enumerate() {
            if row.iter().any(Rational::is_negative) {
                return Err(ModelError::NegativeShare { agent: i });
            }
            if self.row_total(i) > Rational::one() {
                return Err(ModelError::RowOverflow { agent: i });
            }
        }
        for o in 0..problem.num_objects() {
            if self.column_total(o) > problem.quota(o) {
                return Err(ModelError::ColumnOverflow { object: o });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("object index {0} out of range")]
    UnknownObject(usize),
    #[error("{0}")]
    ShapeMismatch(String),
    #[error("agent #{agent} has a negative share")]
    NegativeShare { agent: usize },
    #[error("agent #{agent} is assigned more than one unit")]
    RowOverflow { agent: usize },
    #[error("object #{object} is assigned beyond its quota")]
    ColumnOverflow { object: usize },
}

/// A fractional endowment exchange problem: agents, objects, the endowment
/// matrix, and one weak preference per agent.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Problem {
    pub agents: Vec<String>,
    pub objects: Vec<String>,
    /// `endowments[agent][object]`, same index order as the name lists.
    pub endowments: Vec<Vec<Rational>>,
    pub preferences: Vec<WeakPreference>,
}

impl Problem {
    /// Assembles a problem, checking shapes and name uniqueness. Economic
    /// invariants (row sums, integer quotas) are left to [`validate_problem`],
    /// which reports them as data rather than failing.
    pub fn new(
        agents: Vec<String>,
        objects: Vec<String>,
        endowments: Vec<Vec<Rational>>,
        preferences: Vec<WeakPreference>,
    ) -> Result<Self, ModelError> {
        let n = agents.len();
        let m = objects.len();
        for (names, kind) in [(&agents, "agent"), (&objects, "object")] {
            let unique: BTreeSet<&String> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(ModelError::ShapeMismatch(format!("duplicate {kind} name")));
            }
        }
        if endowments.len() != n || endowments.iter().any(|row| row.len() != m) {
            return Err(ModelError::ShapeMismatch(format!(
                "endowment matrix must be {n}×{m}"
            )));
        }
        if preferences.len() != n || preferences.iter().any(|p| p.num_objects() != m) {
            return Err(ModelError::ShapeMismatch(format!(
                "need one preference over {m} objects per agent"
            )));
        }
        Ok(Problem {
            agents,
            objects,
            endowments,
            preferences,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn endowment(&self, agent: usize, object: usize) -> &Rational {
        &self.endowments[agent][object]
    }

    pub fn endowment_lottery(&self, agent: usize) -> Lottery {
        Lottery::new(self.endowments[agent].clone())
    }

    /// Total market supply of an object, `q_o`.
    pub fn quota(&self, object: usize) -> Rational {
        self.endowments.iter().map(|row| &row[object]).sum()
    }

    pub fn agent_index(&self, name: &str) -> Option<usize> {
        self.agents.iter().position(|a| a == name)
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o == name)
    }
}

/// One violated problem invariant, with the offending agent or object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// An endowment entry outside `[0, 1]`.
    EndowmentOutOfRange { agent: usize, object: usize },
    /// An agent's endowments sum to more than one.
    RowSumExceedsOne { agent: usize },
    /// An object's total supply is not an integer.
    QuotaNotInteger { object: usize },
    /// An object nobody owns; it could never be assigned.
    ZeroQuota { object: usize },
}

impl Violation {
    pub fn describe(&self, problem: &Problem) -> String {
        match self {
            Violation::EndowmentOutOfRange { agent, object } => format!(
                "endowment of agent {:?} for object {:?} is outside [0, 1]",
                problem.agents[*agent], problem.objects[*object]
            ),
            Violation::RowSumExceedsOne { agent } => format!(
                "endowments of agent {:?} sum to more than one",
                problem.agents[*agent]
            ),
            Violation::QuotaNotInteger { object } => format!(
                "total supply of object {:?} is not an integer",
                problem.objects[*object]
            ),
            Violation::ZeroQuota { object } => {
                format!("object {:?} has zero supply", problem.objects[*object])
            }
        }
    }
}

/// Checks every problem invariant and returns the violations found (empty
/// means the problem is well-formed).
pub fn validate_problem(problem: &Problem) -> Vec<Violation> {
    let mut violations = Vec::new();
    for (i, row) in problem.endowments.iter().enumerate() {
        for (o, share) in row.iter().enumerate() {
            if share.is_negative() || *share > Rational::one() {
                violations.push(Violation::EndowmentOutOfRange { agent: i, object: o });
            }
        }
        if problem.endowments[i].iter().sum::<Rational>() > Rational::one() {
            violations.push(Violation::RowSumExceedsOne { agent: i });
        }
    }
    for o in 0..problem.num_objects() {
        let quota = problem.quota(o);
        if !quota.is_integer() {
            violations.push(Violation::QuotaNotInteger { object: o });
        } else if quota.is_zero() {
            violations.push(Violation::ZeroQuota { object: o });
        }
    }
    violations
}

/// Outcome of comparing two lotteries by first-order stochastic dominance
/// under one agent's preference.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DominanceVerdict {
    /// All cumulative shares coincide at every class boundary.
    Equal,
    /// The first lottery weakly dominates without any strict gap.
    WeakNotStrict,
    /// Weak dominance plus at least one strictly larger cumulative share.
    Strict,
    /// Neither weak dominance nor equality holds for the first lottery.
    Incomparable,
}

impl DominanceVerdict {
    /// True when the first lottery weakly dominates the second.
    pub fn weakly_dominates(self) -> bool {
        !matches!(self, DominanceVerdict::Incomparable)
    }
}

/// Cumulative shares of a lottery at each indifference-class boundary:
/// entry `k` is the total share on classes `0..=k`.
pub fn class_prefix_sums(lottery: &Lottery, pref: &WeakPreference) -> Vec<Rational> {
    let mut sums = Vec::with_capacity(pref.num_classes());
    let mut acc = Rational::zero();
    for class in pref.classes() {
        for &o in class {
            acc += lottery.get(o);
        }
        sums.push(acc.clone());
    }
    sums
}

/// Total share of the lottery on objects weakly preferred to `o`: the prefix
/// of indifference classes up to and including `o`'s class.
pub fn cumulative_share(
    lottery: &Lottery,
    pref: &WeakPreference,
    o: usize,
) -> Result<Rational, ModelError> {
    if o >= pref.num_objects() || o >= lottery.num_objects() {
        return Err(ModelError::UnknownObject(o));
    }
    let boundary = pref.rank(o);
    Ok(pref.classes()[..=boundary]
        .iter()
        .flatten()
        .map(|&o2| lottery.get(o2))
        .sum())
}

/// Compares `l1` against `l2` by stochastic dominance under `pref`.
///
/// Cumulative shares only change at class boundaries, so the comparison runs
/// over the class-prefix sums of both lotteries.
pub fn sd_compare(l1: &Lottery, l2: &Lottery, pref: &WeakPreference) -> DominanceVerdict {
    let c1 = class_prefix_sums(l1, pref);
    let c2 = class_prefix_sums(l2, pref);
    let all_ge = c1.iter().zip(&c2).all(|(a, b)| a >= b);
    let any_gt = c1.iter().zip(&c2).any(|(a, b)| a > b);
    let all_le = c1.iter().zip(&c2).all(|(a, b)| a <= b);
    if all_ge && all_le {
        DominanceVerdict::Equal
    } else if all_ge && any_gt {
        DominanceVerdict::Strict
    } else if all_ge {
        // ≥ everywhere with no strict gap forces equality, so this arm cannot
        // fire; kept so the ladder mirrors the full verdict set.
        DominanceVerdict::WeakNotStrict
    } else {
        DominanceVerdict::Incomparable
    }
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("duplicate agent name {0:?}")]
    DuplicateAgent(String),
    #[error("duplicate object name {0:?}")]
    DuplicateObject(String),
    #[error("unknown agent {0:?}")]
    UnknownAgent(String),
    #[error("unknown object {name:?} in {context}")]
    UnknownObject { name: String, context: String },
    #[error("agent {0:?} has no preference entry")]
    MissingPreference(String),
    #[error("preference of agent {agent:?}: {detail}")]
    BadPreference { agent: String, detail: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    agents: Vec<String>,
    objects: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    endowments: BTreeMap<String, BTreeMap<String, Rational>>,
    preferences: BTreeMap<String, Vec<Vec<String>>>,
}

/// Parses the JSON problem format:
///
/// ```json
/// {
///   "agents": ["1", "2"],
///   "objects": ["a", "b"],
///   "endowments": {"1": {"a": "1/2"}, "2": {"a": "1/2", "b": "1"}},
///   "preferences": {"1": [["a", "b"]], "2": [["a"], ["b"]]}
/// }
/// ```
///
/// Omitted endowment entries are zero. Preference classes are listed best
/// first and must partition the object list.
pub fn parse_problem(text: &[u8]) -> Result<Problem, ParseError> {
    let file: ProblemFile = serde_json::from_slice(text)?;
    let mut agent_index = BTreeMap::new();
    for (i, name) in file.agents.iter().enumerate() {
        if agent_index.insert(name.clone(), i).is_some() {
            return Err(ParseError::DuplicateAgent(name.clone()));
        }
    }
    let mut object_index = BTreeMap::new();
    for (o, name) in file.objects.iter().enumerate() {
        if object_index.insert(name.clone(), o).is_some() {
            return Err(ParseError::DuplicateObject(name.clone()));
        }
    }

    let n = file.agents.len();
    let m = file.objects.len();
    let mut endowments = vec![vec![Rational::zero(); m]; n];
    for (agent_name, row) in &file.endowments {
        let &i = agent_index
            .get(agent_name)
            .ok_or_else(|| ParseError::UnknownAgent(agent_name.clone()))?;
        for (object_name, share) in row {
            let &o = object_index.get(object_name).ok_or_else(|| ParseError::UnknownObject {
                name: object_name.clone(),
                context: format!("endowments of agent {agent_name:?}"),
            })?;
            endowments[i][o] = share.clone();
        }
    }

    let mut preferences = Vec::with_capacity(n);
    for name in &file.agents {
        let classes_by_name = file
            .preferences
            .get(name)
            .ok_or_else(|| ParseError::MissingPreference(name.clone()))?;
        let mut classes = Vec::with_capacity(classes_by_name.len());
        for class in classes_by_name {
            let mut indices = Vec::with_capacity(class.len());
            for object_name in class {
                let &o = object_index.get(object_name).ok_or_else(|| {
                    ParseError::UnknownObject {
                        name: object_name.clone(),
                        context: format!("preference of agent {name:?}"),
                    }
                })?;
                indices.push(o);
            }
            classes.push(indices);
        }
        let pref = WeakPreference::new(classes, m).map_err(|e| ParseError::BadPreference {
            agent: name.clone(),
            detail: match e {
                PreferenceError::DuplicateObject(o) => {
                    format!("object {:?} appears in more than one class", file.objects[o])
                }
                PreferenceError::MissingObject(o) => {
                    format!("object {:?} missing from the partition", file.objects[o])
                }
                other => other.to_string(),
            },
        })?;
        preferences.push(pref);
    }
    for name in file.preferences.keys() {
        if !agent_index.contains_key(name) {
            return Err(ParseError::UnknownAgent(name.clone()));
        }
    }

    Problem::new(file.agents, file.objects, endowments, preferences)
        .map_err(|e| ParseError::BadPreference {
            agent: String::new(),
            detail: e.to_string(),
        })
}

/// Serializes a problem back to the JSON format. Zero endowments are
/// omitted; keys are emitted in sorted order, so output is byte-stable and
/// `serialize ∘ parse` is the identity on canonically-written files.
pub fn serialize_problem(problem: &Problem) -> String {
    let mut endowments = BTreeMap::new();
    for (i, name) in problem.agents.iter().enumerate() {
        let row: BTreeMap<String, Rational> = problem.endowments[i]
            .iter()
            .enumerate()
            .filter(|(_, share)| !share.is_zero())
            .map(|(o, share)| (problem.objects[o].clone(), share.clone()))
            .collect();
        if !row.is_empty() {
            endowments.insert(name.clone(), row);
        }
    }
    let preferences = problem
        .agents
        .iter()
        .zip(&problem.preferences)
        .map(|(name, pref)| {
            let classes = pref
                .classes()
                .iter()
                .map(|class| class.iter().map(|&o| problem.objects[o].clone()).collect())
                .collect();
            (name.clone(), classes)
        })
        .collect();
    let file = ProblemFile {
        agents: problem.agents.clone(),
        objects: problem.objects.clone(),
        endowments,
        preferences,
    };
    let mut out = serde_json::to_string_pretty(&file).expect("problem serialization cannot fail");
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rat(n: i64, d: i64) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn rational_parse_accepts_canonical_forms() {
        assert_eq!(Rational::parse("1/3").unwrap(), rat(1, 3));
        assert_eq!(Rational::parse("-1/2").unwrap(), rat(-1, 2));
        assert_eq!(Rational::parse("0").unwrap(), Rational::zero());
        assert_eq!(Rational::parse("7").unwrap(), Rational::int(7));
        assert_eq!(Rational::parse("-12").unwrap(), Rational::int(-12));
        assert_eq!(Rational::parse("9/20").unwrap(), rat(9, 20));
    }

    #[test]
    fn rational_parse_rejects_non_canonical_forms() {
        for text in ["2/4", "3/1", "-0", "-0/3", "0/5", "10/5"] {
            assert!(
                matches!(Rational::parse(text), Err(RationalParseError::NonCanonical(_))),
                "{text:?} should be non-canonical"
            );
        }
        for text in ["", "1/0", "01", "1/02", "+1", "a", "1/2/3", "1.5", " 1", "-"] {
            assert!(
                matches!(Rational::parse(text), Err(RationalParseError::Malformed(_))),
                "{text:?} should be malformed"
            );
        }
    }

    #[test]
    fn rational_display_round_trips() {
        for r in [rat(3, 4), rat(-5, 7), Rational::int(3), Rational::zero(), rat(-1, 2)] {
            assert_eq!(Rational::parse(&r.to_string()).unwrap(), r);
        }
    }

    #[test]
    fn rational_arithmetic_is_exact() {
        assert_eq!(rat(1, 3) + rat(1, 6), rat(1, 2));
        assert_eq!(rat(3, 10) - rat(1, 5), rat(1, 10));
        assert_eq!(rat(2, 5) * rat(5, 2), Rational::one());
        assert_eq!(rat(1, 3) / rat(2, 3), rat(1, 2));
        assert_eq!(-rat(1, 3), rat(-1, 3));
        let sum: Rational = [rat(1, 5), rat(1, 5), rat(3, 5)].iter().sum();
        assert_eq!(sum, Rational::one());
    }

    #[test]
    fn rational_serde_accepts_strings_and_integers() {
        let parsed: Vec<Rational> = serde_json::from_str(r#"["3/4", 2, "0"]"#).unwrap();
        assert_eq!(parsed, vec![rat(3, 4), Rational::int(2), Rational::zero()]);
        assert_eq!(serde_json::to_string(&rat(3, 4)).unwrap(), r#""3/4""#);
        assert_eq!(serde_json::to_string(&Rational::int(2)).unwrap(), r#""2""#);
        assert!(serde_json::from_str::<Rational>(r#""2/4""#).is_err());
    }

    fn pref_ab_c() -> WeakPreference {
        // {a,b} ≻ {c} over objects a=0, b=1, c=2
        WeakPreference::new(vec![vec![0, 1], vec![2]], 3).unwrap()
    }

    #[test]
    fn preference_rejects_broken_partitions() {
        assert_eq!(
            WeakPreference::new(vec![vec![0], vec![]], 1),
            Err(PreferenceError::EmptyClass)
        );
        assert_eq!(
            WeakPreference::new(vec![vec![0, 1], vec![1]], 2),
            Err(PreferenceError::DuplicateObject(1))
        );
        assert_eq!(
            WeakPreference::new(vec![vec![0]], 2),
            Err(PreferenceError::MissingObject(1))
        );
        assert_eq!(
            WeakPreference::new(vec![vec![0, 5]], 2),
            Err(PreferenceError::OutOfRange(5))
        );
    }

    #[test]
    fn preference_favorites_track_availability() {
        let pref = pref_ab_c();
        assert!(pref.indifferent(0, 1));
        assert!(pref.strictly_prefers(0, 2));
        let avail: BTreeSet<usize> = [1, 2].into_iter().collect();
        assert_eq!(pref.favorites_within(&avail), vec![1]);
        let only_c: BTreeSet<usize> = [2].into_iter().collect();
        assert_eq!(pref.favorites_within(&only_c), vec![2]);
        assert_eq!(pref.favorites_within(&BTreeSet::new()), Vec::<usize>::new());
    }

    #[test]
    fn cumulative_share_sums_class_prefixes() {
        let pref = pref_ab_c();
        let lottery = Lottery::new(vec![Rational::zero(), rat(3, 4), rat(1, 4)]);
        // query b: the {a,b} class prefix
        assert_eq!(cumulative_share(&lottery, &pref, 1).unwrap(), rat(3, 4));
        // query an object in the last class: total lottery mass
        assert_eq!(cumulative_share(&lottery, &pref, 2).unwrap(), lottery.total());
        let l2 = Lottery::new(vec![rat(1, 2), rat(1, 4), rat(1, 4)]);
        assert_eq!(cumulative_share(&l2, &pref, 0).unwrap(), rat(3, 4));
        assert!(matches!(
            cumulative_share(&l2, &pref, 9),
            Err(ModelError::UnknownObject(9))
        ));
    }

    #[test]
    fn sd_compare_detects_equality_between_different_lotteries() {
        let pref = pref_ab_c();
        // 3/4 b + 1/4 c  vs  1/2 a + 1/4 b + 1/4 c: identical prefix sums
        let l1 = Lottery::new(vec![Rational::zero(), rat(3, 4), rat(1, 4)]);
        let l2 = Lottery::new(vec![rat(1, 2), rat(1, 4), rat(1, 4)]);
        assert_eq!(sd_compare(&l1, &l2, &pref), DominanceVerdict::Equal);
        assert_eq!(sd_compare(&l1, &l1, &pref), DominanceVerdict::Equal);
    }

    #[test]
    fn sd_compare_orders_point_masses() {
        let pref = WeakPreference::strict(&[0, 1, 2]).unwrap();
        let best = Lottery::new(vec![Rational::one(), Rational::zero(), Rational::zero()]);
        let worst = Lottery::new(vec![Rational::zero(), Rational::zero(), Rational::one()]);
        assert_eq!(sd_compare(&best, &worst, &pref), DominanceVerdict::Strict);
        assert_eq!(sd_compare(&worst, &best, &pref), DominanceVerdict::Incomparable);
    }

    #[test]
    fn sd_compare_flags_crossing_lotteries_incomparable() {
        let pref = WeakPreference::strict(&[0, 1, 2]).unwrap();
        let l1 = Lottery::new(vec![rat(1, 2), Rational::zero(), rat(1, 2)]);
        let l2 = Lottery::new(vec![Rational::zero(), Rational::one(), Rational::zero()]);
        assert_eq!(sd_compare(&l1, &l2, &pref), DominanceVerdict::Incomparable);
        assert_eq!(sd_compare(&l2, &l1, &pref), DominanceVerdict::Incomparable);
    }

    fn example1_problem() -> Problem {
        let agents = vec!["1".into(), "2".into(), "3".into()];
        let objects = vec!["a".into(), "b".into(), "c".into()];
        let endowments = vec![vec![rat(1, 3); 3]; 3];
        let preferences = vec![
            WeakPreference::new(vec![vec![0, 1], vec![2]], 3).unwrap(),
            WeakPreference::strict(&[0, 1, 2]).unwrap(),
            WeakPreference::strict(&[0, 2, 1]).unwrap(),
        ];
        Problem::new(agents, objects, endowments, preferences).unwrap()
    }

    #[test]
    fn validate_accepts_house_allocation_and_the_three_agent_instance() {
        let problem = example1_problem();
        assert!(validate_problem(&problem).is_empty());
    }

    #[test]
    fn validate_reports_row_sum_overflow() {
        let mut problem = example1_problem();
        problem.endowments[0][2] = rat(8, 15); // row sums to 6/5
        let violations = validate_problem(&problem);
        assert!(violations.contains(&Violation::RowSumExceedsOne { agent: 0 }));
        // and the column total of c is no longer an integer
        assert!(violations.contains(&Violation::QuotaNotInteger { object: 2 }));
    }

    #[test]
    fn validate_reports_zero_quota_and_range() {
        let mut problem = example1_problem();
        for row in &mut problem.endowments {
            row[1] = Rational::zero();
        }
        problem.endowments[0][0] = rat(-1, 3);
        let violations = validate_problem(&problem);
        assert!(violations.contains(&Violation::ZeroQuota { object: 1 }));
        assert!(violations.contains(&Violation::EndowmentOutOfRange { agent: 0, object: 0 }));
    }

    const EXAMPLE_JSON: &str = r#"{
  "agents": ["1", "2"],
  "objects": ["a", "b"],
  "endowments": {"1": {"a": "1/2", "b": "1/2"}, "2": {"a": "1/2", "b": "1/2"}},
  "preferences": {"1": [["a", "b"]], "2": [["a"], ["b"]]}
}"#;

    #[test]
    fn parse_reads_the_documented_format() {
        let problem = parse_problem(EXAMPLE_JSON.as_bytes()).unwrap();
        assert_eq!(problem.agents, vec!["1", "2"]);
        assert_eq!(*problem.endowment(0, 1), rat(1, 2));
        assert_eq!(problem.preferences[0].num_classes(), 1);
        assert_eq!(problem.preferences[1].num_classes(), 2);
        assert_eq!(problem.quota(0), Rational::one());
    }

    #[test]
    fn parse_serialize_round_trips() {
        let problem = parse_problem(EXAMPLE_JSON.as_bytes()).unwrap();
        let text = serialize_problem(&problem);
        let reparsed = parse_problem(text.as_bytes()).unwrap();
        assert_eq!(problem, reparsed);
        // canonical output is a fixed point of serialize ∘ parse
        assert_eq!(serialize_problem(&reparsed), text);
    }

    #[test]
    fn parse_defaults_omitted_endowments_to_zero() {
        let text = r#"{
            "agents": ["i"],
            "objects": ["a", "b"],
            "endowments": {"i": {"a": "1"}},
            "preferences": {"i": [["a"], ["b"]]}
        }"#;
        let problem = parse_problem(text.as_bytes()).unwrap();
        assert!(problem.endowment(0, 1).is_zero());
    }

    #[test]
    fn parse_rejects_bad_inputs() {
        let non_canonical = EXAMPLE_JSON.replace("1/2", "2/4");
        assert!(matches!(
            parse_problem(non_canonical.as_bytes()),
            Err(ParseError::Json(_))
        ));
        let unknown_object = EXAMPLE_JSON.replace(r#"[["a", "b"]]"#, r#"[["a", "z"]]"#);
        assert!(matches!(
            parse_problem(unknown_object.as_bytes()),
            Err(ParseError::UnknownObject { .. })
        ));
        let missing_pref = EXAMPLE_JSON.replace(r#""1": [["a", "b"]], "#, "");
        assert!(matches!(
            parse_problem(missing_pref.as_bytes()),
            Err(ParseError::MissingPreference(_))
        ));
        let not_partition = EXAMPLE_JSON.replace(r#"[["a", "b"]]"#, r#"[["a"]]"#);
        assert!(matches!(
            parse_problem(not_partition.as_bytes()),
            Err(ParseError::BadPreference { .. })
        ));
        let dup_agent = EXAMPLE_JSON.replace(r#""agents": ["1", "2"]"#, r#""agents": ["1", "1"]"#);
        assert!(matches!(
            parse_problem(dup_agent.as_bytes()),
            Err(ParseError::DuplicateAgent(_))
        ));
    }

    #[test]
    fn assignment_validates_against_problem() {
        let problem = example1_problem();
        let mut p = Assignment::zeros(3, 3);
        p.set(0, 1, rat(3, 4));
        p.set(0, 2, rat(1, 4));
        p.set(1, 0, rat(1, 2));
        p.set(1, 1, rat(1, 4));
        p.set(1, 2, rat(1, 4));
        p.set(2, 0, rat(1, 2));
        p.set(2, 2, rat(1, 2));
        assert!(p.validate_for(&problem).is_ok());
        p.set(0, 0, Rational::one());
        assert!(matches!(
            p.validate_for(&problem),
            Err(ModelError::RowOverflow { agent: 0 })
        ));
    }
}
