//! Exact linear programming over rationals.
//!
//! A small dense two-phase simplex with Bland's anti-cycling rule. All
//! pivoting is done in `Rational`, so results are exact optima, not
//! approximations — callers compare objective values with `==`. Problem
//! sizes in this crate are tiny (tens of variables), so a dense tableau is
//! the right tool.

use crate::model::Rational;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ConstraintOp {
    Le,
    Eq,
    Ge,
}

struct Constraint {
    coeffs: Vec<Rational>,
    op: ConstraintOp,
    rhs: Rational,
}

/// `maximize c·x subject to the added constraints and x ≥ 0`.
pub struct LinearProgram {
    num_vars: usize,
    objective: Vec<Rational>,
    constraints: Vec<Constraint>,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum LpOutcome {
    Optimal {
        value: Rational,
        solution: Vec<Rational>,
    },
    Infeasible,
    Unbounded,
}

impl LinearProgram {
    pub fn new(num_vars: usize) -> Self {
        LinearProgram {
            num_vars,
            objective: vec![Rational::zero(); num_vars],
            constraints: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn set_objective(&mut self, coeffs: Vec<Rational>) {
        assert_eq!(coeffs.len(), self.num_vars);
        self.objective = coeffs;
    }

    pub fn add_constraint(&mut self, coeffs: Vec<Rational>, op: ConstraintOp, rhs: Rational) {
        assert_eq!(coeffs.len(), self.num_vars);
        self.constraints.push(Constraint { coeffs, op, rhs });
    }

    pub fn maximize(&self) -> LpOutcome {
        Tableau::build(self).solve(&self.objective)
    }
}

struct Tableau {
    /// Constraint rows over all columns (original + slack + artificial).
    rows: Vec<Vec<Rational>>,
    rhs: Vec<Rational>,
    basis: Vec<usize>,
    num_original: usize,
    /// Columns `first_artificial..` are phase-1 artificials.
    first_artificial: usize,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Tableau {
        let n = lp.num_vars;
        let num_slacks = lp
            .constraints
            .iter()
            .filter(|c| c.op != ConstraintOp::Eq)
            .count();
        let mut rows = Vec::with_capacity(lp.constraints.len());
        let mut rhs = Vec::with_capacity(lp.constraints.len());
        let mut basis = vec![usize::MAX; lp.constraints.len()];
        let mut slack = n;
        for (r, c) in lp.constraints.iter().enumerate() {
            let mut row = vec![Rational::zero(); n + num_slacks];
            row[..n].clone_from_slice(&c.coeffs);
            let mut slack_sign = 0i8;
            match c.op {
                ConstraintOp::Le => {
                    row[slack] = Rational::one();
                    slack_sign = 1;
                }
                ConstraintOp::Ge => {
                    row[slack] = -Rational::one();
                    slack_sign = -1;
                }
                ConstraintOp::Eq => {}
            }
            let mut b = c.rhs.clone();
            if b.is_negative() {
                for x in &mut row {
                    *x = -&*x;
                }
                b = -b;
                slack_sign = -slack_sign;
            }
            if slack_sign == 1 {
                basis[r] = slack;
            }
            if c.op != ConstraintOp::Eq {
                slack += 1;
            }
            rows.push(row);
            rhs.push(b);
        }
        // Rows without a ready-made basic column get an artificial variable.
        let first_artificial = n + num_slacks;
        let needs_artificial: Vec<usize> = (0..rows.len())
            .filter(|&r| basis[r] == usize::MAX)
            .collect();
        let total = first_artificial + needs_artificial.len();
        for row in &mut rows {
            row.resize(total, Rational::zero());
        }
        for (k, &r) in needs_artificial.iter().enumerate() {
            rows[r][first_artificial + k] = Rational::one();
            basis[r] = first_artificial + k;
        }
        Tableau {
            rows,
            rhs,
            basis,
            num_original: n,
            first_artificial,
        }
    }

    fn num_cols(&self) -> usize {
        self.rows.first().map_or(self.first_artificial, Vec::len)
    }

    fn pivot(&mut self, row: usize, col: usize, reduced: &mut [Rational]) {
        let pivot = self.rows[row][col].clone();
        for x in &mut self.rows[row] {
            *x = &*x / &pivot;
        }
        self.rhs[row] = &self.rhs[row] / &pivot;
        for r in 0..self.rows.len() {
            if r == row || self.rows[r][col].is_zero() {
                continue;
            }
            let factor = self.rows[r][col].clone();
            for c in 0..self.num_cols() {
                let delta = &factor * &self.rows[row][c];
                self.rows[r][c] -= delta;
            }
            let delta = &factor * &self.rhs[row];
            self.rhs[r] -= delta;
        }
        if !reduced[col].is_zero() {
            let factor = reduced[col].clone();
            for c in 0..self.num_cols() {
                let delta = &factor * &self.rows[row][c];
                reduced[c] -= delta;
            }
        }
        self.basis[row] = col;
    }

    /// Runs Bland-rule simplex for `maximize cost·x` from the current basis.
    /// Returns false when the objective is unbounded above.
    fn simplex(&mut self, cost: &[Rational]) -> bool {
        let cols = self.num_cols();
        let mut reduced = cost.to_vec();
        reduced.resize(cols, Rational::zero());
        for r in 0..self.rows.len() {
            let c_b = reduced[self.basis[r]].clone();
            if c_b.is_zero() {
                continue;
            }
            for c in 0..cols {
                let delta = &c_b * &self.rows[r][c];
                reduced[c] -= delta;
            }
        }
        loop {
            let Some(entering) = (0..cols).find(|&j| reduced[j].is_positive()) else {
                return true;
            };
            let mut leaving: Option<usize> = None;
            let mut best_ratio: Option<Rational> = None;
            for r in 0..self.rows.len() {
                if !self.rows[r][entering].is_positive() {
                    continue;
                }
                let ratio = &self.rhs[r] / &self.rows[r][entering];
                let better = match &best_ratio {
                    None => true,
                    Some(best) => {
                        ratio < *best
                            || (ratio == *best && self.basis[r] < self.basis[leaving.unwrap()])
                    }
                };
                if better {
                    best_ratio = Some(ratio);
                    leaving = Some(r);
                }
            }
            let Some(row) = leaving else {
                return false;
            };
            self.pivot(row, entering, &mut reduced);
        }
    }

    fn solution(&self) -> Vec<Rational> {
        let mut x = vec![Rational::zero(); self.num_cols()];
        for (r, &b) in self.basis.iter().enumerate() {
            x[b] = self.rhs[r].clone();
        }
        x
    }

    fn solve(mut self, objective: &[Rational]) -> LpOutcome {
        if self.num_cols() > self.first_artificial {
            // Phase 1: drive the artificials to zero.
            let mut phase1 = vec![Rational::zero(); self.num_cols()];
            for c in self.first_artificial..self.num_cols() {
                phase1[c] = -Rational::one();
            }
            let bounded = self.simplex(&phase1);
            debug_assert!(bounded, "phase 1 objective is bounded by zero");
            let x = self.solution();
            if x[self.first_artificial..].iter().any(Rational::is_positive) {
                return LpOutcome::Infeasible;
            }
            self.evict_artificials();
        }
        if !self.simplex(objective) {
            return LpOutcome::Unbounded;
        }
        let x = self.solution();
        let solution = x[..self.num_original].to_vec();
        let value = objective.iter().zip(&solution).map(|(c, v)| c * v).sum();
        LpOutcome::Optimal { value, solution }
    }

    /// After phase 1, swaps basic artificials (all at value zero) for real
    /// columns, dropping rows that turn out to be redundant, then truncates
    /// the artificial columns away.
    fn evict_artificials(&mut self) {
        let mut r = 0;
        while r < self.rows.len() {
            if self.basis[r] < self.first_artificial {
                r += 1;
                continue;
            }
            debug_assert!(self.rhs[r].is_zero());
            match (0..self.first_artificial).find(|&c| !self.rows[r][c].is_zero()) {
                Some(col) => {
                    // Pivoting on a zero-rhs row keeps every basic value as is,
                    // so the sign of the pivot element does not matter.
                    let mut scratch = vec![Rational::zero(); self.num_cols()];
                    self.pivot(r, col, &mut scratch);
                    r += 1;
                }
                None => {
                    self.rows.swap_remove(r);
                    self.rhs.swap_remove(r);
                    self.basis.swap_remove(r);
                }
            }
        }
        for row in &mut self.rows {
            row.truncate(self.first_artificial);
        }
    }
}
