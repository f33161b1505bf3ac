//! Value composition over Reward Machines: state-independent value
//! iteration over RM states, approximate task values built from primitive
//! value functions, and the shaping potentials derived from them.

pub mod oracle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geogrid::{GridError, Observation};
use crate::ground::{literal_index, PrimitiveValues};
use crate::logic::{Clause, Formula, Literal, LogicError, NormalForm};
use crate::rm::{RewardMachine, RmStateId};

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("{state} is not terminal but has no outgoing edge{}", line_suffix(*.line))]
    NoOutgoingEdge { state: RmStateId, line: Option<usize> },
    #[error("guard of edge {from} -> {to} can never be satisfied{}", line_suffix(*.line))]
    UnsatisfiableGuard {
        from: RmStateId,
        to: RmStateId,
        line: Option<usize>,
    },
    #[error("discount {0} must lie strictly between 0 and 1")]
    InvalidDiscount(f64),
    #[error("value functions use γ = {pvf} but composition was asked for γ = {requested}")]
    DiscountMismatch { pvf: f64, requested: f64 },
    #[error("value functions know atoms [{pvf}] but the reward machine uses [{rm}]")]
    VocabMismatch { pvf: String, rm: String },
    #[error("product space has {size} states, above the cap of {cap}")]
    StateSpaceTooLarge { size: u128, cap: u128 },
    #[error("value iteration did not reach tolerance {tol} (residual {residual})")]
    NotConverged { tol: f64, residual: f64 },
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn line_suffix(line: Option<usize>) -> String {
    line.map(|l| format!(" (line {l})")).unwrap_or_default()
}

fn check_discount(g: f64) -> Result<(), ComposeError> {
    if g > 0.0 && g < 1.0 {
        Ok(())
    } else {
        Err(ComposeError::InvalidDiscount(g))
    }
}

/// How to value a non-terminal state that can only loop on itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeadEndPolicy {
    /// Reject machines where such a state is reachable.
    #[default]
    Error,
    /// Accumulate the self-loop reward forever: `r_uu / (1 − γ)`.
    SelfLoopValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmStateValues {
    v: Vec<f64>,
    dead_end: Vec<bool>,
    pub gamma_rm: f64,
    pub gamma: f64,
    pub residual: f64,
    pub sweeps: usize,
}

impl RmStateValues {
    pub fn get(&self, u: RmStateId) -> f64 {
        self.v[u.0]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }

    pub fn is_dead_end(&self, u: RmStateId) -> bool {
        self.dead_end[u.0]
    }
}

pub const RM_VI_MAX_SWEEPS: usize = 1_000_000;

/// Value iteration over RM states with the self-loop-aware update, rejecting
/// reachable dead ends.
pub fn rm_value_iteration(rm: &RewardMachine, gamma_rm: f64, gamma: f64, tol: f64) -> Result<RmStateValues, ComposeError> {
    rm_value_iteration_with(rm, gamma_rm, gamma, tol, DeadEndPolicy::Error)
}

pub fn rm_value_iteration_with(
    rm: &RewardMachine,
    gamma_rm: f64,
    gamma: f64,
    tol: f64,
    dead_ends: DeadEndPolicy,
) -> Result<RmStateValues, ComposeError> {
    check_discount(gamma_rm)?;
    check_discount(gamma)?;
    let n = rm.num_states();
    let reachable = rm.reachable_states();
    // edges that can actually fire and leave the state
    let exits: Vec<Vec<(usize, f64)>> = rm
        .states()
        .map(|u| {
            rm.outgoing(u)
                .filter(|(i, t)| !t.is_self_loop() && rm.normal_guards()[*i] != NormalForm::False)
                .map(|(_, t)| (t.to.0, t.reward))
                .collect()
        })
        .collect();
    let self_loop: Vec<f64> = rm.states().map(|u| rm.self_loop_reward(u)).collect();

    let mut v = vec![0.0; n];
    let mut dead_end = vec![false; n];
    for u in rm.states() {
        if rm.is_terminal(u) || !exits[u.0].is_empty() {
            continue;
        }
        if dead_ends == DeadEndPolicy::Error && reachable.contains(&u) {
            return Err(ComposeError::NoOutgoingEdge { state: u, line: rm.states_line() });
        }
        dead_end[u.0] = true;
        v[u.0] = self_loop[u.0] / (1.0 - gamma);
    }

    let mut sweeps = 0;
    let residual = loop {
        sweeps += 1;
        let mut residual = 0.0f64;
        for u in 0..n {
            if rm.is_terminal(RmStateId(u)) || dead_end[u] {
                continue;
            }
            let base = self_loop[u] * (1.0 - gamma_rm) / gamma;
            let new = exits[u]
                .iter()
                .map(|&(to, r)| base + gamma_rm * (r + v[to]))
                .fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max((new - v[u]).abs());
            v[u] = new;
        }
        if residual <= tol {
            break residual;
        }
        if sweeps >= RM_VI_MAX_SWEEPS {
            return Err(ComposeError::NotConverged { tol, residual });
        }
    };
    Ok(RmStateValues { v, dead_end, gamma_rm, gamma, residual, sweeps })
}

/// Value assigned to an always-true guard.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrueGuardValue {
    #[default]
    One,
    Gamma,
}

impl TrueGuardValue {
    fn value(self, gamma: f64) -> f64 {
        match self {
            TrueGuardValue::One => 1.0,
            TrueGuardValue::Gamma => gamma,
        }
    }
}

fn literal_position(pvfs: &dyn PrimitiveValues, lit: &Literal) -> usize {
    literal_index(pvfs.vocab(), lit).unwrap_or_else(|| panic!("literal {} is not in the value-function vocabulary", lit.atom))
}

/// `V◇ℓ(obs)` clamped to [0, 1].
///
/// Panics if the literal's atom is unknown to `pvfs`.
pub fn literal_value(pvfs: &dyn PrimitiveValues, lit: &Literal, obs: &Observation) -> f64 {
    pvfs.literal_values(obs)[literal_position(pvfs, lit)].clamp(0.0, 1.0)
}

/// Conjunction: the minimum over the clause's literals.
pub fn clause_value(pvfs: &dyn PrimitiveValues, clause: &Clause, obs: &Observation) -> f64 {
    let vals = pvfs.literal_values(obs);
    clause
        .literals()
        .iter()
        .map(|l| vals[literal_position(pvfs, l)].clamp(0.0, 1.0))
        .fold(1.0, f64::min)
}

/// Disjunction over the DNF clauses of `f`: the maximum clause value.
pub fn formula_value(
    pvfs: &dyn PrimitiveValues,
    f: &Formula,
    obs: &Observation,
    true_value: TrueGuardValue,
) -> Result<f64, ComposeError> {
    match crate::logic::to_dnf(f)? {
        NormalForm::True => Ok(true_value.value(pvfs.gamma())),
        NormalForm::False => Err(ComposeError::UnsatisfiableGuard {
            from: RmStateId(0),
            to: RmStateId(0),
            line: None,
        }),
        NormalForm::Dnf(d) => Ok(d
            .clauses()
            .iter()
            .map(|c| clause_value(pvfs, c, obs))
            .fold(0.0, f64::max)),
    }
}

#[derive(Clone, Debug)]
enum CompiledGuard {
    True,
    Clauses(Vec<Vec<usize>>),
}

#[derive(Clone, Debug)]
struct Edge {
    index: usize,
    to: RmStateId,
    reward: f64,
    guard: CompiledGuard,
}

/// Approximate optimal value over `(obs, u)` for one Reward Machine task.
pub struct ComposedValueFn<'a> {
    pvfs: &'a dyn PrimitiveValues,
    values: RmStateValues,
    gamma: f64,
    true_value: f64,
    terminal: Vec<bool>,
    self_loop: Vec<f64>,
    edges: Vec<Vec<Edge>>,
}

impl<'a> ComposedValueFn<'a> {
    pub fn new(
        rm: &RewardMachine,
        pvfs: &'a dyn PrimitiveValues,
        values: RmStateValues,
        true_guard: TrueGuardValue,
    ) -> Result<Self, ComposeError> {
        if !pvfs.vocab().same_atoms(rm.vocab()) {
            let names = |v: &crate::logic::Vocab| v.atoms().iter().map(|a| a.to_string()).collect::<Vec<_>>().join(", ");
            return Err(ComposeError::VocabMismatch {
                pvf: names(pvfs.vocab()),
                rm: names(rm.vocab()),
            });
        }
        let gamma = pvfs.gamma();
        if (values.gamma - gamma).abs() > 1e-12 {
            return Err(ComposeError::DiscountMismatch { pvf: gamma, requested: values.gamma });
        }
        let mut edges = vec![Vec::new(); rm.num_states()];
        for (i, t) in rm.transitions().iter().enumerate() {
            if t.is_self_loop() {
                continue;
            }
            let guard = match &rm.normal_guards()[i] {
                NormalForm::True => CompiledGuard::True,
                NormalForm::False => {
                    return Err(ComposeError::UnsatisfiableGuard { from: t.from, to: t.to, line: t.line });
                }
                NormalForm::Dnf(d) => CompiledGuard::Clauses(
                    d.clauses()
                        .iter()
                        .map(|c| c.literals().iter().map(|l| literal_position(pvfs, l)).collect())
                        .collect(),
                ),
            };
            edges[t.from.0].push(Edge { index: i, to: t.to, reward: t.reward, guard });
        }
        for u in rm.states() {
            if !rm.is_terminal(u) && edges[u.0].is_empty() && !values.is_dead_end(u) {
                return Err(ComposeError::NoOutgoingEdge { state: u, line: rm.states_line() });
            }
        }
        Ok(ComposedValueFn {
            pvfs,
            gamma,
            true_value: true_guard.value(gamma),
            terminal: rm.states().map(|u| rm.is_terminal(u)).collect(),
            self_loop: rm.states().map(|u| rm.self_loop_reward(u)).collect(),
            edges,
            values,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rm_values(&self) -> &RmStateValues {
        &self.values
    }

    pub fn pvfs(&self) -> &dyn PrimitiveValues {
        self.pvfs
    }

    fn guard_value(&self, g: &CompiledGuard, lits: &[f64]) -> f64 {
        match g {
            CompiledGuard::True => self.true_value,
            CompiledGuard::Clauses(cs) => cs
                .iter()
                .map(|c| c.iter().map(|&i| lits[i].clamp(0.0, 1.0)).fold(1.0, f64::min))
                .fold(0.0, f64::max),
        }
    }

    /// Best edge and its value given precomputed literal values; ties keep
    /// the lowest edge index. `None` for terminals and dead ends.
    pub fn best_edge_from(&self, lits: &[f64], u: RmStateId) -> Option<(usize, f64)> {
        if self.terminal[u.0] {
            return None;
        }
        let r_uu = self.self_loop[u.0];
        let mut best: Option<(usize, f64)> = None;
        for e in &self.edges[u.0] {
            let p = self.guard_value(&e.guard, lits);
            let val = r_uu * (1.0 - p) / (1.0 - self.gamma) + p * (e.reward + self.gamma * self.values.get(e.to));
            if best.is_none_or(|(_, b)| val > b) {
                best = Some((e.index, val));
            }
        }
        best
    }

    pub fn value_from(&self, lits: &[f64], u: RmStateId) -> f64 {
        if self.terminal[u.0] {
            return 0.0;
        }
        match self.best_edge_from(lits, u) {
            Some((_, v)) => v,
            None => self.values.get(u),
        }
    }

    pub fn composed_value(&self, obs: &Observation, u: RmStateId) -> f64 {
        if self.terminal[u.0] {
            return 0.0;
        }
        self.value_from(&self.pvfs.literal_values(obs), u)
    }

    pub fn best_edge(&self, obs: &Observation, u: RmStateId) -> Option<usize> {
        self.best_edge_from(&self.pvfs.literal_values(obs), u).map(|(i, _)| i)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapingMode {
    Discounted,
    #[default]
    Undiscounted,
}

/// `λ(γv′ − v)` or `λ(v′ − v)`, with `v′ = 0` when the next RM state is terminal.
pub fn shaping_term(v: f64, v_next: f64, next_terminal: bool, lambda: f64, mode: ShapingMode, gamma: f64) -> f64 {
    let v_next = if next_terminal { 0.0 } else { v_next };
    match mode {
        ShapingMode::Discounted => lambda * (gamma * v_next - v),
        ShapingMode::Undiscounted => lambda * (v_next - v),
    }
}

pub fn shaping_reward(
    cvf: &ComposedValueFn<'_>,
    prev: (&Observation, RmStateId),
    next: (&Observation, RmStateId),
    lambda: f64,
    mode: ShapingMode,
) -> f64 {
    let v = cvf.composed_value(prev.0, prev.1);
    let next_terminal = cvf.terminal[next.1 .0];
    let v_next = if next_terminal { 0.0 } else { cvf.composed_value(next.0, next.1) };
    shaping_term(v, v_next, next_terminal, lambda, mode, cvf.gamma)
}

/// Potential of the RM-state-only baseline: `v*(u)`.
pub fn high_level_potential(values: &RmStateValues, u: RmStateId) -> f64 {
    values.get(u)
}
