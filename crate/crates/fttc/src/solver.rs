//! The per-step trade solver.
//!
//! A trading step is a balanced linear system on a bipartite graph: each
//! object hands its trade volume to agents along `λ`, each agent spreads his
//! volume over pointed objects along `γ`. Both weight families are
//! stochastic, so the coefficient matrix of the combined system
//! `x = M x` is column-stochastic and its nonnegative fixed points live on
//! the closed strongly connected classes of the graph. The maximum solution
//! scales the stationary vector of every closed class up to the first
//! binding cap; everything transient stays at zero.
//!
//! [`oracle_solution`] solves the same problem as an explicit linear
//! program. It shares no code with [`max_balanced_solution`] past the graph
//! types, which is the point: the two routes cross-check each other.

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use thiserror::Error;

use crate::engine::{ParameterSet, StepState};
use crate::linalg::solve_linear_system;
use crate::lp::{ConstraintOp, LinearProgram, LpOutcome};
use crate::model::Rational;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ObjectKind {
    /// Still in circulation as an endowment: `o ∈ O(d−1)`.
    Real,
    /// A labeled past consumption re-offered for trade: `o ∈ Õ(d−1)`.
    Labeled,
}

/// An object node of the trading graph: the object's index in the problem
/// plus whether it trades as a real endowment or a labeled consumption.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct GraphObject {
    pub id: usize,
    pub kind: ObjectKind,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph shape mismatch: {0}")]
    Shape(String),
    #[error("negative edge weight")]
    NegativeWeight,
    #[error("λ column for object #{object} does not sum to 1")]
    LambdaColumn { object: usize },
    #[error("γ row for agent #{agent} does not sum to 1")]
    GammaRow { agent: usize },
    #[error("positive λ for agent #{agent} on object #{object} without a holding")]
    LambdaWithoutHolding { agent: usize, object: usize },
    #[error("negative cap")]
    NegativeCap,
}

/// The bipartite trade network of one step: active agents, available
/// objects (real and labeled), supply weights `λ` (object → agent) and
/// demand weights `γ` (agent → object).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TradingGraph {
    agents: Vec<usize>,
    objects: Vec<GraphObject>,
    /// `lambda[object_pos][agent_pos]`; each column of weights sums to 1.
    lambda: Vec<Vec<Rational>>,
    /// `gamma[agent_pos][object_pos]`; each row sums to 1.
    gamma: Vec<Vec<Rational>>,
}

impl TradingGraph {
    pub fn new(
        agents: Vec<usize>,
        objects: Vec<GraphObject>,
        lambda: Vec<Vec<Rational>>,
        gamma: Vec<Vec<Rational>>,
    ) -> Result<Self, GraphError> {
        let a = agents.len();
        let b = objects.len();
        if lambda.len() != b || lambda.iter().any(|col| col.len() != a) {
            return Err(GraphError::Shape(format!("λ must be {b}×{a}")));
        }
        if gamma.len() != a || gamma.iter().any(|row| row.len() != b) {
            return Err(GraphError::Shape(format!("γ must be {a}×{b}")));
        }
        if lambda.iter().flatten().chain(gamma.iter().flatten()).any(Rational::is_negative) {
            return Err(GraphError::NegativeWeight);
        }
        for (pos, col) in lambda.iter().enumerate() {
            if col.iter().sum::<Rational>() != Rational::one() {
                return Err(GraphError::LambdaColumn {
                    object: objects[pos].id,
                });
            }
        }
        for (pos, row) in gamma.iter().enumerate() {
            if row.iter().sum::<Rational>() != Rational::one() {
                return Err(GraphError::GammaRow { agent: agents[pos] });
            }
        }
        Ok(TradingGraph {
            agents,
            objects,
            lambda,
            gamma,
        })
    }

    pub fn agents(&self) -> &[usize] {
        &self.agents
    }

    pub fn objects(&self) -> &[GraphObject] {
        &self.objects
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn lambda(&self, object_pos: usize, agent_pos: usize) -> &Rational {
        &self.lambda[object_pos][agent_pos]
    }

    pub fn gamma(&self, agent_pos: usize, object_pos: usize) -> &Rational {
        &self.gamma[agent_pos][object_pos]
    }

    pub fn agent_pos(&self, agent_id: usize) -> Option<usize> {
        self.agents.iter().position(|&a| a == agent_id)
    }

    pub fn object_pos(&self, id: usize, kind: ObjectKind) -> Option<usize> {
        self.objects
            .iter()
            .position(|g| g.id == id && g.kind == kind)
    }
}

/// Per-edge upper bounds on traded amounts: `λ_{i,o} x_o ≤ cap_{i,o}`.
/// Real objects are capped by the quota `β`, labeled objects by the
/// labeler's current consumption holding. Entries where `λ_{i,o} = 0`
/// impose no constraint.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CapSet {
    /// `caps[object_pos][agent_pos]`, aligned with the graph's `λ`.
    caps: Vec<Vec<Rational>>,
}

impl CapSet {
    pub fn new(caps: Vec<Vec<Rational>>) -> Result<Self, GraphError> {
        if caps.iter().flatten().any(Rational::is_negative) {
            return Err(GraphError::NegativeCap);
        }
        Ok(CapSet { caps })
    }

    pub fn get(&self, object_pos: usize, agent_pos: usize) -> &Rational {
        &self.caps[object_pos][agent_pos]
    }

    /// Assembles the caps for one step: `β_{i,o}(d)` on real objects,
    /// `p_{i,o}(d−1)` on labeled ones.
    pub fn for_step(graph: &TradingGraph, state: &StepState, params: &ParameterSet) -> CapSet {
        let caps = graph
            .objects()
            .iter()
            .map(|obj| {
                graph
                    .agents()
                    .iter()
                    .map(|&agent| match obj.kind {
                        ObjectKind::Real => params.beta[agent][obj.id].clone(),
                        ObjectKind::Labeled => state.assignment.get(agent, obj.id).clone(),
                    })
                    .collect()
            })
            .collect();
        CapSet { caps }
    }
}

/// Trade volumes for one step: per-node amounts plus each agent's split
/// into re-traded labeled consumption (`consumed`) and endowment turnover
/// (`net`); `x_agents = consumed + net` holds exactly.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TradeSolution {
    pub x_agents: Vec<Rational>,
    pub x_objects: Vec<Rational>,
    pub consumed: Vec<Rational>,
    pub net: Vec<Rational>,
}

impl TradeSolution {
    fn from_volumes(graph: &TradingGraph, x: &[Rational]) -> TradeSolution {
        let a = graph.num_agents();
        let x_agents = x[..a].to_vec();
        let x_objects = x[a..].to_vec();
        let mut consumed = vec![Rational::zero(); a];
        let mut net = vec![Rational::zero(); a];
        for (pos, obj) in graph.objects().iter().enumerate() {
            for agent_pos in 0..a {
                let part = graph.lambda(pos, agent_pos) * &x_objects[pos];
                match obj.kind {
                    ObjectKind::Real => net[agent_pos] += part,
                    ObjectKind::Labeled => consumed[agent_pos] += part,
                }
            }
        }
        debug_assert!(
            x_agents
                .iter()
                .zip(consumed.iter().zip(&net))
                .all(|(xa, (c, n))| *xa == c + n),
            "agent volume must split into consumed + net"
        );
        TradeSolution {
            x_agents,
            x_objects,
            consumed,
            net,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.x_agents.iter().all(Rational::is_zero) && self.x_objects.iter().all(Rational::is_zero)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SolverError {
    #[error("stationary system of a closed trading class is singular")]
    SingularClass,
    #[error("trade oracle failed to reach an optimum")]
    OracleFailed,
}

/// A node of the trading graph, by graph-local position.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Node {
    Agent(usize),
    Object(usize),
}

fn adjacency(graph: &TradingGraph) -> DiGraph<(), ()> {
    let a = graph.num_agents();
    let mut g = DiGraph::new();
    for _ in 0..a + graph.num_objects() {
        g.add_node(());
    }
    for agent_pos in 0..a {
        for obj_pos in 0..graph.num_objects() {
            if graph.gamma(agent_pos, obj_pos).is_positive() {
                g.add_edge((agent_pos as u32).into(), ((a + obj_pos) as u32).into(), ());
            }
            if graph.lambda(obj_pos, agent_pos).is_positive() {
                g.add_edge(((a + obj_pos) as u32).into(), (agent_pos as u32).into(), ());
            }
        }
    }
    g
}

/// The closed (recurrent) strongly connected classes of the trade network:
/// the classes with no edge leaving them. Trade volume can only be positive
/// on these.
pub fn closed_classes(graph: &TradingGraph) -> Vec<Vec<Node>> {
    let g = adjacency(graph);
    let sccs = tarjan_scc(&g);
    let mut component = vec![usize::MAX; g.node_count()];
    for (c, members) in sccs.iter().enumerate() {
        for &node in members {
            component[node.index()] = c;
        }
    }
    let mut closed = vec![true; sccs.len()];
    for edge in g.raw_edges() {
        if component[edge.source().index()] != component[edge.target().index()] {
            closed[component[edge.source().index()]] = false;
        }
    }
    let a = graph.num_agents();
    sccs.iter()
        .enumerate()
        .filter(|(c, _)| closed[*c])
        .map(|(_, members)| {
            let mut nodes: Vec<usize> = members.iter().map(|n| n.index()).collect();
            nodes.sort_unstable();
            nodes
                .into_iter()
                .map(|n| {
                    if n < a {
                        Node::Agent(n)
                    } else {
                        Node::Object(n - a)
                    }
                })
                .collect()
        })
        .collect()
}

/// Entries `(object_pos, agent_pos)` whose cap is met with equality by the
/// solution, counting only edges that actually carry weight.
pub fn binding_caps(
    graph: &TradingGraph,
    caps: &CapSet,
    solution: &TradeSolution,
) -> Vec<(usize, usize)> {
    let mut bound = Vec::new();
    for obj_pos in 0..graph.num_objects() {
        for agent_pos in 0..graph.num_agents() {
            let lambda = graph.lambda(obj_pos, agent_pos);
            if lambda.is_positive()
                && lambda * &solution.x_objects[obj_pos] == *caps.get(obj_pos, agent_pos)
            {
                bound.push((obj_pos, agent_pos));
            }
        }
    }
    bound
}

/// Computes the componentwise-maximum nonnegative solution of the balanced
/// trade system under the caps.
///
/// Within each closed class the solution space is the ray spanned by the
/// class's stationary vector (the class matrix is irreducible and
/// column-stochastic), so the maximum is found by scaling that vector until
/// the tightest cap binds. Transient nodes carry no volume in any
/// nonnegative fixed point.
pub fn max_balanced_solution(
    graph: &TradingGraph,
    caps: &CapSet,
) -> Result<TradeSolution, SolverError> {
    let a = graph.num_agents();
    let n = a + graph.num_objects();
    let mut x = vec![Rational::zero(); n];
    for class in closed_classes(graph) {
        let k = class.len();
        // Stationary weights: (M_C − I) π = 0 with Σ π = 1. The class matrix
        // is column-stochastic, so its (M − I) rows sum to zero and any one
        // of them may be traded for the normalization row.
        let mut matrix = vec![vec![Rational::zero(); k]; k];
        for (row, &to) in class.iter().enumerate() {
            for (col, &from) in class.iter().enumerate() {
                let coeff = match (to, from) {
                    (Node::Object(o), Node::Agent(ag)) => graph.gamma(ag, o).clone(),
                    (Node::Agent(ag), Node::Object(o)) => graph.lambda(o, ag).clone(),
                    _ => Rational::zero(),
                };
                matrix[row][col] = coeff;
            }
            matrix[row][row] -= Rational::one();
        }
        let mut rhs = vec![Rational::zero(); k];
        matrix[k - 1] = vec![Rational::one(); k];
        rhs[k - 1] = Rational::one();
        let pi = solve_linear_system(matrix, rhs).ok_or(SolverError::SingularClass)?;
        debug_assert!(pi.iter().all(Rational::is_positive));

        let mut scale: Option<Rational> = None;
        for (local, &node) in class.iter().enumerate() {
            let Node::Object(obj_pos) = node else { continue };
            for agent_pos in 0..a {
                let lambda = graph.lambda(obj_pos, agent_pos);
                if !lambda.is_positive() {
                    continue;
                }
                let ratio = caps.get(obj_pos, agent_pos) / &(lambda * &pi[local]);
                if scale.as_ref().is_none_or(|s| ratio < *s) {
                    scale = Some(ratio);
                }
            }
        }
        let scale = scale.expect("a closed class always contains a supplying object");
        for (local, &node) in class.iter().enumerate() {
            let pos = match node {
                Node::Agent(p) => p,
                Node::Object(p) => a + p,
            };
            x[pos] = &scale * &pi[local];
        }
    }
    Ok(TradeSolution::from_volumes(graph, &x))
}

/// Solves the same capped balanced-trade problem as an exact linear
/// program: maximize total agent volume subject to `x = Mx`, the caps, and
/// nonnegativity. Used purely as an independent cross-check of
/// [`max_balanced_solution`].
pub fn oracle_solution(graph: &TradingGraph, caps: &CapSet) -> Result<TradeSolution, SolverError> {
    let a = graph.num_agents();
    let b = graph.num_objects();
    let n = a + b;
    let mut lp = LinearProgram::new(n);
    let mut objective = vec![Rational::zero(); n];
    for coeff in objective.iter_mut().take(a) {
        *coeff = Rational::one();
    }
    lp.set_objective(objective);
    for agent_pos in 0..a {
        let mut row = vec![Rational::zero(); n];
        row[agent_pos] = Rational::one();
        for obj_pos in 0..b {
            row[a + obj_pos] = -graph.lambda(obj_pos, agent_pos);
        }
        lp.add_constraint(row, ConstraintOp::Eq, Rational::zero());
    }
    for obj_pos in 0..b {
        let mut row = vec![Rational::zero(); n];
        row[a + obj_pos] = Rational::one();
        for agent_pos in 0..a {
            row[agent_pos] = -graph.gamma(agent_pos, obj_pos);
        }
        lp.add_constraint(row, ConstraintOp::Eq, Rational::zero());
    }
    for obj_pos in 0..b {
        for agent_pos in 0..a {
            let lambda = graph.lambda(obj_pos, agent_pos);
            if lambda.is_positive() {
                let mut row = vec![Rational::zero(); n];
                row[a + obj_pos] = lambda.clone();
                lp.add_constraint(row, ConstraintOp::Le, caps.get(obj_pos, agent_pos).clone());
            }
        }
    }
    match lp.maximize() {
        LpOutcome::Optimal { solution, .. } => Ok(TradeSolution::from_volumes(graph, &solution)),
        _ => Err(SolverError::OracleFailed),
    }
}

/// Assembles the trading graph of one step from the mechanism state and the
/// chosen trade parameters, checking the stochasticity and support
/// invariants along the way.
pub fn build_trading_graph(
    state: &StepState,
    params: &ParameterSet,
) -> Result<TradingGraph, GraphError> {
    let agents: Vec<usize> = (0..state.active.len()).filter(|&i| state.active[i]).collect();
    let mut objects: Vec<GraphObject> = state
        .remaining
        .iter()
        .map(|&id| GraphObject {
            id,
            kind: ObjectKind::Real,
        })
        .collect();
    objects.extend(state.labeled_union.iter().map(|&id| GraphObject {
        id,
        kind: ObjectKind::Labeled,
    }));

    let mut lambda = Vec::with_capacity(objects.len());
    for obj in &objects {
        let col: Vec<Rational> = agents
            .iter()
            .map(|&agent| match obj.kind {
                ObjectKind::Real => params.lambda_real[agent][obj.id].clone(),
                ObjectKind::Labeled => params.lambda_labeled[agent][obj.id].clone(),
            })
            .collect();
        for (pos, weight) in col.iter().enumerate() {
            if !weight.is_positive() {
                continue;
            }
            let agent = agents[pos];
            let holds = match obj.kind {
                ObjectKind::Real => state.endowments[agent][obj.id].is_positive(),
                ObjectKind::Labeled => state.labels[agent].contains(&obj.id),
            };
            if !holds {
                return Err(GraphError::LambdaWithoutHolding {
                    agent,
                    object: obj.id,
                });
            }
        }
        lambda.push(col);
    }

    let gamma = agents
        .iter()
        .map(|&agent| {
            objects
                .iter()
                .map(|obj| match obj.kind {
                    ObjectKind::Real => params.gamma_real[agent][obj.id].clone(),
                    ObjectKind::Labeled => params.gamma_labeled[agent][obj.id].clone(),
                })
                .collect()
        })
        .collect();

    TradingGraph::new(agents, objects, lambda, gamma)
}
