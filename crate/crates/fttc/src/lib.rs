//! Fractional top trading cycle (FTTC) on the full preference domain.
//!
//! Agents own probability shares of indivisible objects and hold weak
//! preferences (indifference allowed) over them. At every step of the
//! mechanism agents point at their favorite available objects and trade
//! endowment shares through a balanced linear system; exhausted consumptions
//! can be re-offered ("labeled") when an indifferent object is still on the
//! market, which is what keeps the mechanism efficient under ties.
//!
//! The crate is organized around exact rational arithmetic end to end — every
//! assignment, trade volume, and axiom verdict is computed without rounding:
//!
//! * [`model`] — problems, weak preferences, lotteries, assignments, and
//!   stochastic-dominance comparison.
//! * [`solver`] — the per-step trading system: maximum balanced solution via
//!   strongly connected components, cross-checked by a simplex oracle.
//! * [`engine`] — the step loop: labeling, pointing, parameter policies
//!   (equal / proportional / leveling / custom), trading, and traces.
//! * [`axioms`] — verifiers for individual rationality, sd-efficiency, the
//!   fairness axioms, the stepwise parameter properties, and a brute-force
//!   manipulation finder.
//! * [`house`] — house-allocation specializations: the continuous-time eating
//!   view, the egalitarian solution under dichotomous preferences, and an
//!   exact random-priority evaluator.
//!
//! Heavy enumerations (subset scans, ordering expectations) run on rayon when
//! the `parallel` feature (default) is enabled; every function also ships a
//! sequential twin so the two can be compared and benchmarked.

pub mod axioms;
pub mod engine;
pub mod house;
mod linalg;
pub mod lp;
pub mod model;
pub mod solver;

pub use model::Rational;
