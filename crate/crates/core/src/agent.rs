//! Reinforcement learning over the product of the grid and a Reward
//! Machine, with rewards generated by the agent's own labelling function.
//!
//! The agent tracks its RM state through predicted labels only; ground
//! truth is consulted solely to score the *actual* return alongside.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compose::oracle::{GridModel, ProductValues};
use crate::compose::{shaping_term, ComposedValueFn, ShapingMode};
use crate::geogrid::{true_label, Action, GeoGrid, GridState, ObsKey, Observation};
use crate::ground::{LabelModel, NUM_ACTIONS};
use crate::logic::{TruthAssignment, Vocab};
use crate::rm::{RewardMachine, RmError, RmStateId};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error(transparent)]
    Rm(#[from] RmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Anything that produces the truth assignment the agent sees.
pub trait Labeller {
    fn vocab(&self) -> &Vocab;
    fn label(&self, state: &GridState, obs: &Observation) -> TruthAssignment;
}

impl Labeller for LabelModel {
    fn vocab(&self) -> &Vocab {
        LabelModel::vocab(self)
    }

    fn label(&self, _: &GridState, obs: &Observation) -> TruthAssignment {
        self.predict(obs)
    }
}

/// The environment's own labelling function.
pub struct GroundTruth {
    vocab: Vocab,
}

impl GroundTruth {
    pub fn new(vocab: Vocab) -> Self {
        GroundTruth { vocab }
    }
}

impl Labeller for GroundTruth {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn label(&self, state: &GridState, _: &Observation) -> TruthAssignment {
        true_label(state)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ProductState {
    pub obs: Observation,
    pub u: RmStateId,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapingKind {
    #[default]
    None,
    Composed,
    HighLevel,
}

impl ShapingKind {
    pub const ALL: [ShapingKind; 3] = [ShapingKind::Composed, ShapingKind::None, ShapingKind::HighLevel];

    pub fn name(self) -> &'static str {
        match self {
            ShapingKind::None => "none",
            ShapingKind::Composed => "composed",
            ShapingKind::HighLevel => "high-level",
        }
    }
}

impl std::str::FromStr for ShapingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(ShapingKind::None),
            "composed" => Ok(ShapingKind::Composed),
            "high-level" | "high_level" => Ok(ShapingKind::HighLevel),
            _ => Err(format!("unknown shaping `{s}` (expected none, composed or high-level)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub alpha: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the step budget over which ε decays linearly.
    pub epsilon_decay_fraction: f64,
    pub gamma: f64,
    pub shaping: ShapingKind,
    pub lambda: f64,
    pub shaping_mode: ShapingMode,
    pub episode_cap: usize,
    pub total_steps: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            alpha: 0.5,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            gamma: 0.97,
            shaping: ShapingKind::None,
            lambda: 1.0,
            shaping_mode: ShapingMode::Undiscounted,
            episode_cap: 100,
            total_steps: 100_000,
            eval_episodes: 100,
            seed: 0,
        }
    }
}

impl AgentConfig {
    fn epsilon(&self, step: usize) -> f64 {
        let horizon = self.epsilon_decay_fraction * self.total_steps as f64;
        let frac = if horizon > 0.0 { (step as f64 / horizon).min(1.0) } else { 1.0 };
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }

    fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidArg(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie strictly between 0 and 1");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if self.lambda < 0.0 {
            return bad("lambda must be non-negative");
        }
        if self.episode_cap == 0 {
            return bad("episode cap must be positive");
        }
        for e in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&e) {
                return bad("epsilon must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

/// Tabular action values over product states; unseen entries read as 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QPolicy {
    // rows indexed by RM state
    q: HashMap<ObsKey, Vec<[f64; NUM_ACTIONS]>>,
}

impl QPolicy {
    pub fn get(&self, obs: &ObsKey, u: RmStateId) -> [f64; NUM_ACTIONS] {
        self.q
            .get(obs)
            .and_then(|rows| rows.get(u.0))
            .copied()
            .unwrap_or([0.0; NUM_ACTIONS])
    }

    pub fn insert(&mut self, obs: ObsKey, u: RmStateId, q: [f64; NUM_ACTIONS]) {
        let rows = self.q.entry(obs).or_default();
        if rows.len() <= u.0 {
            rows.resize(u.0 + 1, [0.0; NUM_ACTIONS]);
        }
        rows[u.0] = q;
    }

    /// Number of observations with at least one stored row.
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    fn greedy(&self, obs: &ObsKey, u: RmStateId, rng: &mut impl Rng) -> Action {
        greedy_of(&self.get(obs, u), rng)
    }

    /// JSON with entries sorted by observation, so output is reproducible.
    pub fn write(&self, out: impl Write) -> Result<(), AgentError> {
        let mut entries: Vec<(&ObsKey, &Vec<[f64; NUM_ACTIONS]>)> = self.q.iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        serde_json::to_writer(out, &serde_json::json!({ "entries": entries }))
            .map_err(|e| AgentError::InvalidArg(format!("cannot serialize policy: {e}")))
    }

    pub fn read(input: impl std::io::Read) -> Result<Self, AgentError> {
        #[derive(Deserialize)]
        struct File {
            entries: Vec<(ObsKey, Vec<[f64; NUM_ACTIONS]>)>,
        }
        let f: File = serde_json::from_reader(input).map_err(|e| AgentError::InvalidArg(format!("malformed policy file: {e}")))?;
        Ok(QPolicy { q: f.entries.into_iter().collect() })
    }

    /// Greedy policy of the exact product-MDP solution.
    pub fn from_oracle(model: &GridModel, rm: &RewardMachine, values: &ProductValues, gamma: f64) -> Self {
        let mut p = QPolicy::default();
        for s in 0..model.len() {
            for u in rm.states().filter(|&u| !rm.is_terminal(u)) {
                let q = Action::ALL.map(|a| {
                    let n = model.successor(s, a);
                    let st = rm.step(u, model.label(n)).expect("non-terminal");
                    gamma * (st.reward + if st.terminated { 0.0 } else { values.get(n, st.next_state) })
                });
                p.insert(model.observation(s).key(), u, q);
            }
        }
        p
    }
}

fn greedy_of(q: &[f64; NUM_ACTIONS], rng: &mut impl Rng) -> Action {
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..NUM_ACTIONS).filter(|&a| q[a] == best).collect();
    Action::ALL[*ties.choose(rng).expect("at least one action")]
}

pub enum Policy<'a> {
    Greedy(&'a QPolicy),
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub perceived_return: f64,
    pub actual_return: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub episodes: usize,
    pub mean: f64,
    pub stderr: f64,
    pub mean_perceived: f64,
    /// Mean over episodes of |perceived − actual|.
    pub mean_abs_gap: f64,
    pub mean_steps: f64,
    pub actual: Vec<f64>,
    pub perceived: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub shaping: ShapingKind,
    pub shaping_mode: ShapingMode,
    pub seed: u64,
    pub total_steps: usize,
    pub eval_policy: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub episodes: Vec<EpisodeRecord>,
    pub final_eval: EvalStats,
    pub meta: TrainMeta,
}

impl TrainReport {
    pub fn write_csv(&self, out: impl Write) -> Result<(), AgentError> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.episodes {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

enum Potential<'a, 'b> {
    None,
    Composed(&'a ComposedValueFn<'b>),
    HighLevel(&'a ComposedValueFn<'b>),
}

impl Potential<'_, '_> {
    fn at(&self, obs: &Observation, u: RmStateId) -> f64 {
        match self {
            Potential::None => 0.0,
            Potential::Composed(c) => c.composed_value(obs, u),
            Potential::HighLevel(c) => c.rm_values().get(u),
        }
    }
}

/// Two RM copies stepped in lockstep: one on the agent's labels, one on ground truth.
struct Tracker<'a> {
    rm: &'a RewardMachine,
    u: RmStateId,
    u_true: RmStateId,
    true_done: bool,
    perceived: f64,
    actual: f64,
}

struct Step {
    u: RmStateId,
    reward: f64,
    terminated: bool,
}

impl<'a> Tracker<'a> {
    fn new(rm: &'a RewardMachine) -> Self {
        Tracker {
            rm,
            u: rm.initial(),
            u_true: rm.initial(),
            true_done: false,
            perceived: 0.0,
            actual: 0.0,
        }
    }

    fn advance(&mut self, predicted: &TruthAssignment, truth: &TruthAssignment) -> Result<Step, AgentError> {
        let s = self.rm.step(self.u, predicted)?;
        self.u = s.next_state;
        self.perceived += s.reward;
        if !self.true_done {
            let t = self.rm.step(self.u_true, truth)?;
            self.u_true = t.next_state;
            self.actual += t.reward;
            self.true_done = t.terminated;
        }
        Ok(Step {
            u: s.next_state,
            reward: s.reward,
            terminated: s.terminated,
        })
    }
}

fn check_vocab(rm: &RewardMachine, labeller: &dyn Labeller) -> Result<(), AgentError> {
    if labeller.vocab().same_atoms(rm.vocab()) {
        Ok(())
    } else {
        Err(AgentError::ConfigMismatch(
            "reward machine and labelling function use different atoms".into(),
        ))
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const RESET_STREAM: u64 = 1;
const EXPLORE_STREAM: u64 = 2;
const EVAL_RESET_STREAM: u64 = 3;
const EVAL_TIE_STREAM: u64 = 4;

/// Tabular Q-learning on self-generated (and optionally shaped) rewards.
pub fn train(
    env: &GeoGrid,
    rm: &RewardMachine,
    labeller: &dyn Labeller,
    cvf: Option<&ComposedValueFn<'_>>,
    cfg: &AgentConfig,
) -> Result<(QPolicy, TrainReport), AgentError> {
    cfg.validate()?;
    check_vocab(rm, labeller)?;
    let potential = match (cfg.shaping, cvf) {
        (ShapingKind::None, _) => Potential::None,
        (_, None) => {
            return Err(AgentError::ConfigMismatch(format!(
                "shaping `{}` needs composed values",
                cfg.shaping.name()
            )))
        }
        (kind, Some(c)) => {
            if (c.gamma() - cfg.gamma).abs() > 1e-12 {
                return Err(AgentError::ConfigMismatch(format!(
                    "agent γ = {} but value functions were trained with γ = {}",
                    cfg.gamma,
                    c.gamma()
                )));
            }
            if kind == ShapingKind::Composed {
                Potential::Composed(c)
            } else {
                Potential::HighLevel(c)
            }
        }
    };

    let mut policy = QPolicy::default();
    let mut reset_rng = stream_rng(cfg.seed, RESET_STREAM);
    let mut rng = stream_rng(cfg.seed, EXPLORE_STREAM);
    let mut episodes = Vec::new();
    let mut total = 0;
    while total < cfg.total_steps {
        let mut state = env.reset_with(&mut reset_rng);
        let obs = env.observe(&state);
        let mut key = obs.key();
        let mut tracker = Tracker::new(rm);
        let mut phi = potential.at(&obs, tracker.u);
        let mut steps = 0;
        while steps < cfg.episode_cap && total < cfg.total_steps {
            let u = tracker.u;
            let q = policy.get(&key, u);
            let a = if rng.gen::<f64>() < cfg.epsilon(total) {
                Action::ALL[rng.gen_range(0..NUM_ACTIONS)]
            } else {
                greedy_of(&q, &mut rng)
            };
            let next = env.step(&state, a);
            let next_obs = env.observe(&next);
            let next_key = next_obs.key();
            let predicted = labeller.label(&next, &next_obs);
            let step = tracker.advance(&predicted, &true_label(&next))?;
            let phi_next = if step.terminated { 0.0 } else { potential.at(&next_obs, step.u) };
            let shaping = match potential {
                Potential::None => 0.0,
                _ => shaping_term(phi, phi_next, step.terminated, cfg.lambda, cfg.shaping_mode, cfg.gamma),
            };
            let bootstrap = if step.terminated {
                0.0
            } else {
                policy.get(&next_key, step.u).into_iter().fold(f64::NEG_INFINITY, f64::max)
            };
            let target = step.reward + shaping + cfg.gamma * bootstrap;
            let mut row = q;
            row[a.index()] += cfg.alpha * (target - row[a.index()]);
            policy.insert(key.clone(), u, row);

            steps += 1;
            total += 1;
            state = next;
            key = next_key;
            phi = phi_next;
            if step.terminated {
                break;
            }
        }
        episodes.push(EpisodeRecord {
            episode: episodes.len() + 1,
            perceived_return: tracker.perceived,
            actual_return: tracker.actual,
            steps,
        });
    }

    let final_eval = evaluate(&Policy::Greedy(&policy), labeller, env, rm, cfg.episode_cap, cfg.eval_episodes, cfg.seed)?;
    let report = TrainReport {
        episodes,
        final_eval,
        meta: TrainMeta {
            shaping: cfg.shaping,
            shaping_mode: cfg.shaping_mode,
            seed: cfg.seed,
            total_steps: cfg.total_steps,
            eval_policy: "greedy".into(),
        },
    };
    Ok((policy, report))
}

/// Run `n_episodes` with `policy`, tracking the RM through `labeller` and
/// scoring with ground-truth labels and the true RM. An episode ends when
/// either copy of the machine terminates or after `cap` steps.
pub fn evaluate(
    policy: &Policy<'_>,
    labeller: &dyn Labeller,
    env: &GeoGrid,
    rm: &RewardMachine,
    cap: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalStats, AgentError> {
    if n_episodes == 0 {
        return Err(AgentError::InvalidArg("evaluation needs at least one episode".into()));
    }
    check_vocab(rm, labeller)?;
    let mut reset_rng = stream_rng(seed, EVAL_RESET_STREAM);
    let mut rng = stream_rng(seed, EVAL_TIE_STREAM);
    let (mut actual, mut perceived, mut lengths) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n_episodes {
        let mut state = env.reset_with(&mut reset_rng);
        let mut tracker = Tracker::new(rm);
        let mut steps = 0;
        while steps < cap {
            let a = match policy {
                Policy::Greedy(q) => q.greedy(&env.observe(&state).key(), tracker.u, &mut rng),
                Policy::Random => Action::ALL[rng.gen_range(0..NUM_ACTIONS)],
            };
            state = env.step(&state, a);
            let obs = env.observe(&state);
            let step = tracker.advance(&labeller.label(&state, &obs), &true_label(&state))?;
            steps += 1;
            if step.terminated || tracker.true_done {
                break;
            }
        }
        actual.push(tracker.actual);
        perceived.push(tracker.perceived);
        lengths.push(steps as f64);
    }
    let (mean, stderr) = mean_stderr(&actual);
    let gaps: Vec<f64> = actual.iter().zip(&perceived).map(|(a, p)| (a - p).abs()).collect();
    Ok(EvalStats {
        episodes: n_episodes,
        mean,
        stderr,
        mean_perceived: mean_stderr(&perceived).0,
        mean_abs_gap: mean_stderr(&gaps).0,
        mean_steps: mean_stderr(&lengths).0,
        actual,
        perceived,
    })
}

/// First 1-based episode at which the trailing-window mean of actual
/// return reaches `threshold`. Early windows average what is available.
pub fn episodes_to_threshold(report: &TrainReport, threshold: f64, window: usize) -> Option<usize> {
    let xs: Vec<f64> = report.episodes.iter().map(|e| e.actual_return).collect();
    let window = window.max(1);
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= window {
            sum -= xs[i - window];
        }
        let n = (i + 1).min(window) as f64;
        if sum / n >= threshold - 1e-12 {
            return Some(i + 1);
        }
    }
    None
}
