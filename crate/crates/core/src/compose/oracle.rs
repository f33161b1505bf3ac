//! Brute-force references on enumerable (fixed-layout) grids: exact
//! reachability values, exact product-MDP values, and the over/under
//! estimation checks for conjunction and disjunction composition.
//!
//! Both oracles use the same discounting as the learned value functions:
//! a reward received on the `k`-th step (`k ≥ 1`) is worth `γ^k`.

use std::collections::HashMap;

use super::ComposeError;
use crate::geogrid::{Action, GeoGrid, GridState, ObsKey, Observation};
use crate::ground::{literal_index, literals, PrimitiveValues, NUM_ACTIONS};
use crate::logic::{Atom, Clause, Formula, Literal, NormalForm, TruthAssignment, Vocab};
use crate::rm::{RewardMachine, RmStateId};

pub const DEFAULT_PRODUCT_CAP: u128 = 2_000_000;
const MAX_SWEEPS: usize = 100_000;

/// Deterministic transition graph of a fixed-layout grid.
pub struct GridModel {
    states: Vec<GridState>,
    observations: Vec<Observation>,
    labels: Vec<TruthAssignment>,
    next: Vec<[usize; NUM_ACTIONS]>,
    index: HashMap<ObsKey, usize>,
}

impl GridModel {
    pub fn build(env: &GeoGrid) -> Result<Self, ComposeError> {
        let states = env.enumerate_states()?;
        let observations: Vec<Observation> = states.iter().map(|s| env.observe(s)).collect();
        let index: HashMap<ObsKey, usize> = observations.iter().enumerate().map(|(i, o)| (o.key(), i)).collect();
        let next = states
            .iter()
            .map(|s| {
                Action::ALL.map(|a| {
                    let n = env.step(s, a);
                    index[&env.observe(&n).key()]
                })
            })
            .collect();
        let labels = states.iter().map(|s| env.true_label(s)).collect();
        Ok(GridModel { states, observations, labels, next, index })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &GridState {
        &self.states[i]
    }

    pub fn observation(&self, i: usize) -> &Observation {
        &self.observations[i]
    }

    pub fn label(&self, i: usize) -> &TruthAssignment {
        &self.labels[i]
    }

    pub fn successor(&self, i: usize, a: Action) -> usize {
        self.next[i][a.index()]
    }

    pub fn index_of(&self, obs: &Observation) -> Option<usize> {
        self.index.get(&obs.key()).copied()
    }
}

/// Optimal `E[γ^k]` of first reaching, at step `k ≥ 1`, a state whose label satisfies `goal`.
pub fn exact_reachability(model: &GridModel, goal: impl Fn(&TruthAssignment) -> bool, gamma: f64) -> Vec<f64> {
    let sat: Vec<bool> = model.labels.iter().map(&goal).collect();
    let mut v = vec![0.0; model.len()];
    // deterministic shortest paths: exact after at most |S| + 1 sweeps
    for _ in 0..=model.len() {
        let new: Vec<f64> = (0..model.len())
            .map(|s| {
                model.next[s]
                    .iter()
                    .map(|&n| if sat[n] { gamma } else { gamma * v[n] })
                    .fold(0.0, f64::max)
            })
            .collect();
        if new == v {
            break;
        }
        v = new;
    }
    v
}

/// Exact primitive values for every literal of `vocab` over a grid model.
pub struct ExactPvfs {
    vocab: Vocab,
    gamma: f64,
    index: HashMap<ObsKey, usize>,
    values: Vec<Vec<f64>>,
}

impl ExactPvfs {
    pub fn new(model: &GridModel, vocab: &Vocab, gamma: f64) -> Self {
        let per_literal: Vec<Vec<f64>> = literals(vocab)
            .iter()
            .map(|l| exact_reachability(model, |w| l.eval(w), gamma))
            .collect();
        let values = (0..model.len()).map(|s| per_literal.iter().map(|v| v[s]).collect()).collect();
        ExactPvfs {
            vocab: vocab.clone(),
            gamma,
            index: model.index.clone(),
            values,
        }
    }

    pub fn value(&self, lit: &Literal, state: usize) -> f64 {
        self.values[state][literal_index(&self.vocab, lit).expect("literal in vocabulary")]
    }
}

impl PrimitiveValues for ExactPvfs {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn literal_values(&self, obs: &Observation) -> Vec<f64> {
        match self.index.get(&obs.key()) {
            Some(&i) => self.values[i].clone(),
            None => vec![0.0; 2 * self.vocab.len()],
        }
    }
}

/// Optimal values of the product of a grid model and a Reward Machine under ground-truth labels.
pub struct ProductValues {
    num_rm: usize,
    values: Vec<f64>,
    index: HashMap<ObsKey, usize>,
    pub residual: f64,
    pub sweeps: usize,
}

impl ProductValues {
    pub fn get(&self, state: usize, u: RmStateId) -> f64 {
        self.values[state * self.num_rm + u.0]
    }

    pub fn value(&self, obs: &Observation, u: RmStateId) -> Option<f64> {
        self.index.get(&obs.key()).map(|&s| self.get(s, u))
    }
}

/// Enumerate a fixed-layout grid's product with `rm` and solve it, refusing
/// product spaces larger than `cap`.
pub fn exact_product_values(env: &GeoGrid, rm: &RewardMachine, gamma: f64, cap: u128) -> Result<(GridModel, ProductValues), ComposeError> {
    let size = env.state_space_size().saturating_mul(rm.num_states() as u128);
    if size > cap {
        return Err(ComposeError::StateSpaceTooLarge { size, cap });
    }
    let model = GridModel::build(env)?;
    let values = solve_product(&model, rm, gamma, 1e-10)?;
    Ok((model, values))
}

pub fn solve_product(model: &GridModel, rm: &RewardMachine, gamma: f64, tol: f64) -> Result<ProductValues, ComposeError> {
    super::check_discount(gamma)?;
    let nu = rm.num_states();
    let n = model.len();
    // RM transition on entering each grid state, per RM state
    let mut steps = vec![(0usize, 0.0f64, true); n * nu];
    for u in rm.states().filter(|&u| !rm.is_terminal(u)) {
        for s in 0..n {
            let st = rm.step(u, &model.labels[s]).expect("non-terminal");
            steps[u.0 * n + s] = (st.next_state.0, st.reward, st.terminated);
        }
    }
    let mut v = vec![0.0; n * nu];
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    while residual > tol {
        if sweeps >= MAX_SWEEPS {
            return Err(ComposeError::NotConverged { tol, residual });
        }
        sweeps += 1;
        residual = 0.0;
        for u in rm.states().filter(|&u| !rm.is_terminal(u)) {
            for s in 0..n {
                let best = model.next[s]
                    .iter()
                    .map(|&sn| {
                        let (un, r, term) = steps[u.0 * n + sn];
                        gamma * (r + if term { 0.0 } else { v[sn * nu + un] })
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                let slot = &mut v[s * nu + u.0];
                residual = residual.max((best - *slot).abs());
                *slot = best;
            }
        }
    }
    Ok(ProductValues {
        num_rm: nu,
        values: v,
        index: model.index.clone(),
        residual,
        sweeps,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundReport {
    pub conjunctions: usize,
    pub conjunction_violations: usize,
    pub disjunctions: usize,
    pub disjunction_violations: usize,
    /// Largest amount by which a bound was broken (0 when none were).
    pub worst_violation: f64,
    pub first_violation: Option<String>,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.conjunction_violations == 0 && self.disjunction_violations == 0
    }
}

/// Every consistent non-empty clause over `atoms` (each atom absent, positive or negated).
pub fn all_clauses(atoms: &[Atom]) -> Vec<Clause> {
    let mut out = Vec::new();
    for code in 1..3usize.pow(atoms.len() as u32) {
        let mut c = code;
        let mut lits = Vec::new();
        for a in atoms {
            match c % 3 {
                1 => lits.push(Formula::var(a.clone())),
                2 => lits.push(Formula::not(Formula::var(a.clone()))),
                _ => {}
            }
            c /= 3;
        }
        if let Ok(NormalForm::Dnf(d)) = crate::logic::to_dnf(&Formula::and(lits)) {
            out.push(d.clauses()[0].clone());
        }
    }
    out
}

/// Check, at every state, that the min over literal values bounds each
/// single-clause guard from above and that the max over exact clause values
/// bounds each two-clause guard from below. `slack` absorbs rounding.
pub fn check_composition_bounds(model: &GridModel, pvfs: &ExactPvfs, atoms: &[Atom], slack: f64) -> BoundReport {
    let gamma = pvfs.gamma;
    let clauses = all_clauses(atoms);
    let exact: Vec<Vec<f64>> = clauses
        .iter()
        .map(|c| exact_reachability(model, |w| c.eval(w), gamma))
        .collect();
    let mut report = BoundReport::default();
    let note = |report: &mut BoundReport, gap: f64, what: String| {
        report.worst_violation = report.worst_violation.max(gap);
        report.first_violation.get_or_insert(what);
    };

    for (c, ex) in clauses.iter().zip(&exact) {
        report.conjunctions += 1;
        for s in 0..model.len() {
            let composed = c.literals().iter().map(|l| pvfs.value(l, s)).fold(1.0, f64::min);
            if composed < ex[s] - slack {
                report.conjunction_violations += 1;
                note(&mut report, ex[s] - composed, format!("conjunction {} at state {s}", clause_text(c)));
            }
        }
    }
    for i in 0..clauses.len() {
        for j in i + 1..clauses.len() {
            report.disjunctions += 1;
            let (a, b) = (&clauses[i], &clauses[j]);
            let ex = exact_reachability(model, |w| a.eval(w) || b.eval(w), gamma);
            for s in 0..model.len() {
                let composed = exact[i][s].max(exact[j][s]);
                if composed > ex[s] + slack {
                    report.disjunction_violations += 1;
                    note(
                        &mut report,
                        composed - ex[s],
                        format!("disjunction ({}) | ({}) at state {s}", clause_text(a), clause_text(b)),
                    );
                }
            }
        }
    }
    report
}

fn clause_text(c: &Clause) -> String {
    c.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compose::{rm_value_iteration, ComposedValueFn, TrueGuardValue};
    use crate::geogrid::{geo_vocab, GridConfig};
    use crate::rm::parse_rm;

    const G: f64 = 0.97;

    #[test]
    fn reachability_is_gamma_to_the_distance() {
        let env = GeoGrid::new(GridConfig::desk()).unwrap();
        let model = GridModel::build(&env).unwrap();
        let v = exact_reachability(&model, |w| w.contains_name("blue") && w.contains_name("triangle"), G);
        // blue triangle at (0,5); from (0,0) it is five moves away
        let start = model.states.iter().position(|s| s.agent.row == 0 && s.agent.col == 0).unwrap();
        assert!((v[start] - G.powi(5)).abs() < 1e-15);
        assert!(v.iter().all(|&x| x > 0.0 && x <= G));
        assert!(exact_reachability(&model, |_| false, G).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_literal_product_equals_reachability() {
        let env = GeoGrid::new(GridConfig::desk()).unwrap();
        let rm = parse_rm("vocab: red green blue triangle circle\nstates: 2\n(1, 0, green, 1)\n").unwrap();
        let (model, prod) = exact_product_values(&env, &rm, G, DEFAULT_PRODUCT_CAP).unwrap();
        let reach = exact_reachability(&model, |w| w.contains_name("green"), G);
        for s in 0..model.len() {
            assert!((prod.get(s, RmStateId(1)) - reach[s]).abs() < 1e-9);
            assert_eq!(prod.get(s, RmStateId(0)), 0.0);
        }
        let pvfs = ExactPvfs::new(&model, &geo_vocab(), G);
        let vals = rm_value_iteration(&rm, G.powi(10), G, 1e-12).unwrap();
        let cvf = ComposedValueFn::new(&rm, &pvfs, vals, TrueGuardValue::One).unwrap();
        for s in 0..model.len() {
            let c = cvf.composed_value(model.observation(s), RmStateId(1));
            assert!((c - prod.get(s, RmStateId(1))).abs() < 1e-9);
        }
    }

    #[test]
    fn randomized_layouts_are_too_large() {
        let env = GeoGrid::new(GridConfig::large()).unwrap();
        let rm = parse_rm("vocab: red\nstates: 2\n(1, 0, red, 1)\n").unwrap();
        assert!(matches!(
            exact_product_values(&env, &rm, G, DEFAULT_PRODUCT_CAP),
            Err(ComposeError::StateSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn clause_enumeration() {
        let vocab = geo_vocab();
        assert_eq!(all_clauses(&vocab.atoms()[..3]).len(), 26);
        assert_eq!(all_clauses(&vocab.atoms()[..1]).len(), 2);
    }

    #[test]
    fn bounds_hold_on_desk_grid() {
        let env = GeoGrid::new(GridConfig::desk()).unwrap();
        let model = GridModel::build(&env).unwrap();
        let vocab = geo_vocab();
        let pvfs = ExactPvfs::new(&model, &vocab, G);
        let r = check_composition_bounds(&model, &pvfs, &vocab.atoms()[..2], 1e-12);
        assert_eq!(r.conjunctions, 8);
        assert_eq!(r.disjunctions, 28);
        assert!(r.passed(), "{r:?}");
    }
}
