//! Primitive value functions: optimal values of the reachability tasks
//! `◇x` and `◇¬x` for every atom `x`, learned offline from the dataset.
//!
//! Values follow the discounting `V(s) = E[γ^k]`, where `k ≥ 1` is the
//! first step whose *next-state* labels satisfy the literal. The FQI target
//! is therefore `γ·(done + (1 − done)·max_a' Q(s', a'))` with
//! `done = 𝟙[ℓ holds in ω']`.
//!
//! Two state encodings are supported. `Tabular` keys on the exact
//! observation. `Linear` uses a one-hot feature per signature bin (agent
//! on a satisfying cell, offset to the nearest other satisfying cell, grid
//! boundary contact); with one-hot features the least-squares fit reduces
//! to the per-bin mean, which is what the regression step computes.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::GroundError;
use crate::geogrid::{Cell, GroundingDataset, ObsKey, Observation, ATOM_NAMES};
use crate::logic::{Literal, TruthAssignment, Vocab};

pub const NUM_ACTIONS: usize = 4;

/// Position of `lit` in the `2|AP|` literal layout: `2i` for `x_i`, `2i + 1` for `¬x_i`.
pub fn literal_index(vocab: &Vocab, lit: &Literal) -> Option<usize> {
    vocab
        .index_of(lit.atom.as_str())
        .map(|i| 2 * i + usize::from(!lit.positive))
}

/// All `2|AP|` literals in index order.
pub fn literals(vocab: &Vocab) -> Vec<Literal> {
    vocab
        .atoms()
        .iter()
        .flat_map(|a| [Literal::pos(a.clone()), Literal::neg(a.clone())])
        .collect()
}

/// Anything that can report the value of every literal at an observation.
pub trait PrimitiveValues {
    fn vocab(&self) -> &Vocab;
    fn gamma(&self) -> f64;
    /// Values indexed by [`literal_index`].
    fn literal_values(&self, obs: &Observation) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PvfMethod {
    Fqi,
    #[serde(alias = "monte_carlo")]
    Mc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PvfFeatures {
    Tabular,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PvfHyper {
    pub gamma: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub features: PvfFeatures,
}

impl Default for PvfHyper {
    fn default() -> Self {
        PvfHyper {
            gamma: 0.97,
            max_iters: 2000,
            tol: 1e-10,
            features: PvfFeatures::Tabular,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub on: bool,
    pub offset: Option<(i32, i32)>,
    pub boundary: u8,
}

/// Linear-mode feature bin of `obs` for the literal over channel `ch`.
pub fn signature(obs: &Observation, ch: usize, positive: bool) -> Signature {
    let Some(agent) = obs.agent() else {
        return Signature { on: false, offset: None, boundary: 0 };
    };
    let sat = |c: Cell| obs.get(c, ch) == positive;
    let mut best: Option<(usize, (i32, i32))> = None;
    for c in obs.cells().filter(|&c| c != agent && sat(c)) {
        let d = c.row.abs_diff(agent.row) + c.col.abs_diff(agent.col);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, (c.row as i32 - agent.row as i32, c.col as i32 - agent.col as i32)));
        }
    }
    let on = sat(agent);
    // walls only matter when a blocked move can keep the literal satisfied
    let boundary = if !on {
        0
    } else {
        u8::from(agent.row == 0)
        | u8::from(agent.row + 1 == obs.height()) << 1
        | u8::from(agent.col == 0) << 2
            | u8::from(agent.col + 1 == obs.width()) << 3
    };
    Signature {
        on,
        offset: best.map(|(_, o)| o),
        boundary,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateKey {
    Obs(ObsKey),
    Sig(Signature),
}

mod as_pairs {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(m: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

/// Action values; missing entries read as 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    #[serde(with = "as_pairs")]
    entries: BTreeMap<StateKey, [f64; NUM_ACTIONS]>,
}

impl QTable {
    pub fn get(&self, key: &StateKey) -> [f64; NUM_ACTIONS] {
        self.entries.get(key).copied().unwrap_or([0.0; NUM_ACTIONS])
    }

    pub fn max(&self, key: &StateKey) -> f64 {
        self.get(key).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiteralFit {
    pub literal: Literal,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct LiteralTable {
    q: QTable,
    /// Regressed state values: MC targets, or next-value targets for FQI.
    #[serde(with = "as_pairs")]
    v: BTreeMap<StateKey, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PvfSet {
    vocab: Vocab,
    gamma: f64,
    method: PvfMethod,
    features: PvfFeatures,
    fits: Vec<LiteralFit>,
    tables: Vec<LiteralTable>,
}

fn channel_of(name: &str) -> Option<usize> {
    ATOM_NAMES.iter().position(|n| *n == name)
}

impl PvfSet {
    pub fn method(&self) -> PvfMethod {
        self.method
    }

    pub fn features(&self) -> PvfFeatures {
        self.features
    }

    pub fn fits(&self) -> &[LiteralFit] {
        &self.fits
    }

    /// Literals whose FQI residual stayed above tolerance.
    pub fn non_converged(&self) -> impl Iterator<Item = &LiteralFit> {
        self.fits.iter().filter(|f| !f.converged)
    }

    fn key(&self, idx: usize, obs: &Observation) -> StateKey {
        match self.features {
            PvfFeatures::Tabular => StateKey::Obs(obs.key()),
            PvfFeatures::Linear => {
                let lit = &self.fits[idx].literal;
                let ch = channel_of(lit.atom.as_str()).expect("checked at training time");
                StateKey::Sig(signature(obs, ch, lit.positive))
            }
        }
    }

    fn lookup(&self, idx: usize, key: &StateKey) -> f64 {
        let table = &self.tables[idx];
        let v = match self.method {
            PvfMethod::Fqi => table.q.max(key),
            PvfMethod::Mc => table.v.get(key).copied().unwrap_or(0.0),
        };
        v.clamp(0.0, 1.0)
    }

    /// Whether the state bin of `obs` occurred in the training data for `lit`.
    pub fn covers(&self, lit: &Literal, obs: &Observation) -> bool {
        literal_index(&self.vocab, lit).is_some_and(|idx| {
            let key = self.key(idx, obs);
            let t = &self.tables[idx];
            t.q.entries.contains_key(&key) || t.v.contains_key(&key)
        })
    }

    /// `V◇ℓ(obs)`: `max_a Q` for FQI, the regressed value for MC.
    pub fn value(&self, lit: &Literal, obs: &Observation) -> Option<f64> {
        let idx = literal_index(&self.vocab, lit)?;
        Some(self.lookup(idx, &self.key(idx, obs)))
    }

    /// The separately regressed value head (next-state targets for FQI).
    pub fn value_psi(&self, lit: &Literal, obs: &Observation) -> Option<f64> {
        let idx = literal_index(&self.vocab, lit)?;
        let key = self.key(idx, obs);
        Some(self.tables[idx].v.get(&key).copied().unwrap_or(0.0).clamp(0.0, 1.0))
    }

    pub fn q_values(&self, lit: &Literal, obs: &Observation) -> Option<[f64; NUM_ACTIONS]> {
        let idx = literal_index(&self.vocab, lit)?;
        Some(self.tables[idx].q.get(&self.key(idx, obs)))
    }
}

impl PrimitiveValues for PvfSet {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn literal_values(&self, obs: &Observation) -> Vec<f64> {
        match self.features {
            PvfFeatures::Tabular => {
                let key = StateKey::Obs(obs.key());
                (0..self.tables.len()).map(|i| self.lookup(i, &key)).collect()
            }
            PvfFeatures::Linear => (0..self.tables.len()).map(|i| self.lookup(i, &self.key(i, obs))).collect(),
        }
    }
}

fn check_inputs(ds: &GroundingDataset, hyper: &PvfHyper) -> Result<(), GroundError> {
    if !(hyper.gamma > 0.0 && hyper.gamma < 1.0) {
        return Err(GroundError::InvalidGamma(hyper.gamma));
    }
    if ds.trajectories.is_empty() {
        return Err(GroundError::EmptyDataset);
    }
    if hyper.features == PvfFeatures::Linear {
        if let Some(a) = ds.vocab().atoms().iter().find(|a| channel_of(a.as_str()).is_none()) {
            return Err(GroundError::UnsupportedAtom(a.to_string()));
        }
    }
    Ok(())
}

fn key_fn(features: PvfFeatures, lit: &Literal) -> impl Fn(&Observation) -> StateKey + '_ {
    move |obs| match features {
        PvfFeatures::Tabular => StateKey::Obs(obs.key()),
        PvfFeatures::Linear => StateKey::Sig(signature(
            obs,
            channel_of(lit.atom.as_str()).expect("checked"),
            lit.positive,
        )),
    }
}

struct Interner {
    index: HashMap<StateKey, usize>,
    keys: Vec<StateKey>,
}

impl Interner {
    fn new() -> Self {
        Interner { index: HashMap::new(), keys: Vec::new() }
    }

    fn id(&mut self, k: StateKey) -> usize {
        if let Some(&i) = self.index.get(&k) {
            return i;
        }
        self.keys.push(k.clone());
        self.index.insert(k, self.keys.len() - 1);
        self.keys.len() - 1
    }
}

struct Group {
    state: usize,
    action: usize,
    // (next state, done, count)
    outcomes: Vec<(usize, bool, f64)>,
}

fn fqi_literal(ds: &GroundingDataset, lit: &Literal, hyper: &PvfHyper) -> (LiteralTable, LiteralFit) {
    let key = key_fn(hyper.features, lit);
    let mut interner = Interner::new();
    let mut grouped: BTreeMap<(usize, usize), BTreeMap<(usize, bool), f64>> = BTreeMap::new();
    for t in &ds.trajectories {
        let ids: Vec<usize> = t.observations.iter().map(|o| interner.id(key(o))).collect();
        for (i, a) in t.actions.iter().enumerate() {
            let done = lit.eval(&t.labels[i + 1]);
            *grouped
                .entry((ids[i], a.index()))
                .or_default()
                .entry((ids[i + 1], done))
                .or_insert(0.0) += 1.0;
        }
    }
    let groups: Vec<Group> = grouped
        .into_iter()
        .map(|((state, action), outs)| Group {
            state,
            action,
            outcomes: outs.into_iter().map(|((n, d), c)| (n, d, c)).collect(),
        })
        .collect();

    let n = interner.keys.len();
    let gamma = hyper.gamma;
    let mut q = vec![[0.0f64; NUM_ACTIONS]; n];
    let mut present = vec![[false; NUM_ACTIONS]; n];
    for g in &groups {
        present[g.state][g.action] = true;
    }
    let mut iterations = 0;
    let mut residual = 0.0;
    while iterations < hyper.max_iters {
        iterations += 1;
        let v: Vec<f64> = q.iter().map(|row| row.iter().copied().fold(0.0, f64::max)).collect();
        residual = 0.0f64;
        for g in &groups {
            let (mut num, mut den) = (0.0, 0.0);
            for &(next, done, count) in &g.outcomes {
                let target = if done { gamma } else { gamma * v[next] };
                num += count * target;
                den += count;
            }
            let new = num / den;
            residual = residual.max((new - q[g.state][g.action]).abs());
            q[g.state][g.action] = new;
        }
        if residual < hyper.tol {
            break;
        }
    }

    let mut table = LiteralTable::default();
    for (i, k) in interner.keys.iter().enumerate() {
        if present[i].iter().any(|&p| p) {
            table.q.entries.insert(k.clone(), q[i]);
        }
    }
    // value head regressed onto next_value = max_a' Q(s', a') at every s'
    for g in &groups {
        for &(next, _, _) in &g.outcomes {
            let v = q[next].iter().copied().fold(0.0, f64::max);
            table.v.insert(interner.keys[next].clone(), v);
        }
    }
    let fit = LiteralFit {
        literal: lit.clone(),
        iterations,
        residual,
        converged: residual < hyper.tol,
    };
    (table, fit)
}

/// Fitted Q-iteration for all `2|AP|` literals on the dataset's own labels.
pub fn train_pvfs_fqi(ds: &GroundingDataset, hyper: &PvfHyper) -> Result<PvfSet, GroundError> {
    check_inputs(ds, hyper)?;
    let (tables, fits) = literals(ds.vocab())
        .iter()
        .map(|lit| fqi_literal(ds, lit, hyper))
        .unzip();
    Ok(PvfSet {
        vocab: ds.vocab().clone(),
        gamma: hyper.gamma,
        method: PvfMethod::Fqi,
        features: hyper.features,
        fits,
        tables,
    })
}

/// Discounted Monte-Carlo targets for one trajectory: `γ^(k − t)` with `k`
/// the first index after `t` whose labels satisfy `lit`, else 0.
pub fn mc_targets(labels: &[TruthAssignment], lit: &Literal, gamma: f64) -> Vec<f64> {
    let n = labels.len();
    let mut out = vec![0.0; n];
    for t in (0..n.saturating_sub(1)).rev() {
        out[t] = if lit.eval(&labels[t + 1]) { gamma } else { gamma * out[t + 1] };
    }
    out
}

/// Mean-squared-error regression of every state onto its MC target.
pub fn train_pvfs_mc(ds: &GroundingDataset, hyper: &PvfHyper) -> Result<PvfSet, GroundError> {
    check_inputs(ds, hyper)?;
    let mut tables = Vec::new();
    let mut fits = Vec::new();
    for lit in literals(ds.vocab()) {
        let key = key_fn(hyper.features, &lit);
        let mut sums: BTreeMap<StateKey, (f64, f64)> = BTreeMap::new();
        for t in &ds.trajectories {
            let targets = mc_targets(&t.labels, &lit, hyper.gamma);
            // the final state has no future and is left out
            for (obs, target) in t.observations.iter().zip(targets).take(t.actions.len()) {
                let e = sums.entry(key(obs)).or_insert((0.0, 0.0));
                e.0 += target;
                e.1 += 1.0;
            }
        }
        tables.push(LiteralTable {
            q: QTable::default(),
            v: sums.into_iter().map(|(k, (s, n))| (k, s / n)).collect(),
        });
        fits.push(LiteralFit {
            literal: lit.clone(),
            iterations: 1,
            residual: 0.0,
            converged: true,
        });
    }
    Ok(PvfSet {
        vocab: ds.vocab().clone(),
        gamma: hyper.gamma,
        method: PvfMethod::Mc,
        features: hyper.features,
        fits,
        tables,
    })
}
