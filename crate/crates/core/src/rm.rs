//! Reward Machines: parsing, validation and step semantics.
//!
//! Text format:
//!
//! ```text
//! # comments run to end of line
//! vocab: red green blue triangle circle
//! states: 4
//! terminals: 0        # optional, defaults to {0}
//! initial: 1          # optional, defaults to 1
//! (1, 2, red & triangle, 0)
//! (2, 3, green, 0)
//! (3, 0, blue & !triangle, 1)
//! ```
//!
//! Any assignment that fires no explicit edge leaves the machine where it
//! is with reward 0.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::{parse_formula, to_dnf, Formula, LogicError, NormalForm, TruthAssignment, Vocab};

/// Vocabularies up to this size are checked for determinism by enumeration.
pub const EXHAUSTIVE_VOCAB_LIMIT: usize = 12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RmError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: {source}")]
    Formula {
        line: usize,
        #[source]
        source: LogicError,
    },
    #[error("state {state}: edges {first} and {second} both fire on {assignment}")]
    NondeterministicGuard {
        state: RmStateId,
        assignment: String,
        first: usize,
        second: usize,
    },
    #[error("line {line}: state {state} is outside 0..{num_states}")]
    DanglingState {
        line: usize,
        state: usize,
        num_states: usize,
    },
    #[error("line {line}: transition leaves terminal state {state}")]
    TransitionFromTerminal { line: usize, state: RmStateId },
    #[error("initial state {0} is terminal")]
    InitialIsTerminal(RmStateId),
    #[error("missing `{0}` header")]
    MissingHeader(&'static str),
    #[error("cannot step from terminal state {0}")]
    StepFromTerminal(RmStateId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RmStateId(pub usize);

impl RmStateId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for RmStateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmTransition {
    pub from: RmStateId,
    pub to: RmStateId,
    pub guard: Formula,
    pub reward: f64,
    /// Source line, when parsed from text.
    pub line: Option<usize>,
}

impl RmTransition {
    pub fn is_self_loop(&self) -> bool {
        self.from == self.to
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmStep {
    pub next_state: RmStateId,
    pub reward: f64,
    pub terminated: bool,
}

/// Result of simulating a machine over an assignment sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RmRun {
    pub rewards: Vec<f64>,
    pub states: Vec<RmStateId>,
    pub terminated_at: Option<usize>,
}

impl RmRun {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct RewardMachine {
    vocab: Vocab,
    num_states: usize,
    initial: RmStateId,
    terminals: BTreeSet<RmStateId>,
    transitions: Vec<RmTransition>,
    normal_guards: Vec<NormalForm>,
    // dispatch[u][mask] = firing edge, present when the vocabulary is small
    dispatch: Option<Vec<Vec<Option<u32>>>>,
    states_line: Option<usize>,
}

impl RewardMachine {
    pub fn new(
        vocab: Vocab,
        num_states: usize,
        initial: RmStateId,
        terminals: BTreeSet<RmStateId>,
        transitions: Vec<RmTransition>,
    ) -> Result<Self, RmError> {
        let dangling = |line: Option<usize>, state: usize| RmError::DanglingState {
            line: line.unwrap_or(0),
            state,
            num_states,
        };
        if initial.0 >= num_states {
            return Err(dangling(None, initial.0));
        }
        if let Some(t) = terminals.iter().find(|t| t.0 >= num_states) {
            return Err(dangling(None, t.0));
        }
        if terminals.contains(&initial) {
            return Err(RmError::InitialIsTerminal(initial));
        }
        let mut normal_guards = Vec::with_capacity(transitions.len());
        for t in &transitions {
            for s in [t.from.0, t.to.0] {
                if s >= num_states {
                    return Err(dangling(t.line, s));
                }
            }
            if terminals.contains(&t.from) {
                return Err(RmError::TransitionFromTerminal {
                    line: t.line.unwrap_or(0),
                    state: t.from,
                });
            }
            if !t.reward.is_finite() {
                return Err(RmError::Syntax {
                    line: t.line.unwrap_or(0),
                    message: "reward must be finite".into(),
                });
            }
            for atom in t.guard.atoms() {
                if vocab.get(atom.as_str()).is_none() {
                    return Err(RmError::Formula {
                        line: t.line.unwrap_or(0),
                        source: LogicError::UnknownAtom(atom.to_string()),
                    });
                }
            }
            let nf = to_dnf(&t.guard).map_err(|source| RmError::Formula {
                line: t.line.unwrap_or(0),
                source,
            })?;
            normal_guards.push(nf);
        }
        let mut rm = RewardMachine {
            vocab,
            num_states,
            initial,
            terminals,
            transitions,
            normal_guards,
            dispatch: None,
            states_line: None,
        };
        if rm.vocab.len() <= EXHAUSTIVE_VOCAB_LIMIT {
            rm.dispatch = Some(rm.build_dispatch()?);
        } else {
            rm.check_overlaps()?;
        }
        Ok(rm)
    }

    fn build_dispatch(&self) -> Result<Vec<Vec<Option<u32>>>, RmError> {
        let n_masks = 1usize << self.vocab.len();
        let mut table = vec![vec![None; n_masks]; self.num_states];
        for mask in 0..n_masks {
            let w = self.vocab.assignment_from_mask(mask as u64);
            for (i, t) in self.transitions.iter().enumerate() {
                if !t.guard.eval(&w) {
                    continue;
                }
                let slot = &mut table[t.from.0][mask];
                if let Some(first) = *slot {
                    return Err(RmError::NondeterministicGuard {
                        state: t.from,
                        assignment: w.to_string(),
                        first: first as usize,
                        second: i,
                    });
                }
                *slot = Some(i as u32);
            }
        }
        Ok(table)
    }

    // Symbolic check for vocabularies too large to enumerate.
    fn check_overlaps(&self) -> Result<(), RmError> {
        for (i, a) in self.transitions.iter().enumerate() {
            for (j, b) in self.transitions.iter().enumerate().skip(i + 1) {
                if a.from == b.from && self.normal_guards[i].overlaps(&self.normal_guards[j]) {
                    return Err(RmError::NondeterministicGuard {
                        state: a.from,
                        assignment: "some assignment".into(),
                        first: i,
                        second: j,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn initial(&self) -> RmStateId {
        self.initial
    }

    pub fn terminals(&self) -> &BTreeSet<RmStateId> {
        &self.terminals
    }

    pub fn is_terminal(&self, u: RmStateId) -> bool {
        self.terminals.contains(&u)
    }

    pub fn transitions(&self) -> &[RmTransition] {
        &self.transitions
    }

    /// DNF of each transition's guard, aligned with [`Self::transitions`].
    pub fn normal_guards(&self) -> &[NormalForm] {
        &self.normal_guards
    }

    /// Line of the `states:` header, when parsed from text.
    pub fn states_line(&self) -> Option<usize> {
        self.states_line
    }

    pub fn states(&self) -> impl Iterator<Item = RmStateId> {
        (0..self.num_states).map(RmStateId)
    }

    /// Explicit edges leaving `u`, with their indices.
    pub fn outgoing(&self, u: RmStateId) -> impl Iterator<Item = (usize, &RmTransition)> {
        self.transitions.iter().enumerate().filter(move |(_, t)| t.from == u)
    }

    /// Largest reward among explicit self-loops at `u`, or 0 when there are none.
    pub fn self_loop_reward(&self, u: RmStateId) -> f64 {
        self.outgoing(u)
            .filter(|(_, t)| t.is_self_loop())
            .map(|(_, t)| t.reward)
            .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))))
            .unwrap_or(0.0)
    }

    /// States reachable from the initial state along explicit edges.
    pub fn reachable_states(&self) -> BTreeSet<RmStateId> {
        let mut seen = BTreeSet::from([self.initial]);
        let mut stack = vec![self.initial];
        while let Some(u) = stack.pop() {
            for (_, t) in self.outgoing(u) {
                if seen.insert(t.to) {
                    stack.push(t.to);
                }
            }
        }
        seen
    }

    /// Index of the explicit edge from `u` that fires on `w`, if any.
    pub fn firing_edge(&self, u: RmStateId, w: &TruthAssignment) -> Option<usize> {
        match &self.dispatch {
            Some(table) => table[u.0][self.vocab.mask_of(w) as usize].map(|i| i as usize),
            None => self.outgoing(u).find(|(_, t)| t.guard.eval(w)).map(|(i, _)| i),
        }
    }

    pub fn step(&self, u: RmStateId, w: &TruthAssignment) -> Result<RmStep, RmError> {
        if self.is_terminal(u) {
            return Err(RmError::StepFromTerminal(u));
        }
        let (next_state, reward) = match self.firing_edge(u, w) {
            Some(i) => (self.transitions[i].to, self.transitions[i].reward),
            None => (u, 0.0),
        };
        Ok(RmStep {
            next_state,
            reward,
            terminated: self.is_terminal(next_state),
        })
    }

    /// Simulate from the initial state until termination or the end of `ws`.
    pub fn run<'a>(&self, ws: impl IntoIterator<Item = &'a TruthAssignment>) -> RmRun {
        let mut run = RmRun::default();
        let mut u = self.initial;
        for (t, w) in ws.into_iter().enumerate() {
            let step = self.step(u, w).expect("run never steps from a terminal state");
            run.rewards.push(step.reward);
            run.states.push(step.next_state);
            u = step.next_state;
            if step.terminated {
                run.terminated_at = Some(t);
                break;
            }
        }
        run
    }
}

/// Apply one transition of `rm` from `u` on assignment `w`.
pub fn rm_step(rm: &RewardMachine, u: RmStateId, w: &TruthAssignment) -> Result<RmStep, RmError> {
    rm.step(u, w)
}

pub fn run_rm(rm: &RewardMachine, ws: &[TruthAssignment]) -> RmRun {
    rm.run(ws)
}

fn parse_index_list(line: usize, value: &str) -> Result<Vec<usize>, RmError> {
    value
        .split_whitespace()
        .map(|s| {
            s.parse::<usize>().map_err(|_| RmError::Syntax {
                line,
                message: format!("expected a state index, found `{s}`"),
            })
        })
        .collect()
}

/// Parse and validate a Reward Machine in the text format above.
pub fn parse_rm(text: &str) -> Result<RewardMachine, RmError> {
    let mut vocab: Option<Vocab> = None;
    let mut num_states: Option<(usize, usize)> = None;
    let mut terminals: Option<BTreeSet<RmStateId>> = None;
    let mut initial = RmStateId(1);
    let mut transitions = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let syntax = |message: String| RmError::Syntax { line, message };
        if let Some(body) = content.strip_prefix('(') {
            let body = body
                .strip_suffix(')')
                .ok_or_else(|| syntax("transition must end with `)`".into()))?;
            let parts: Vec<&str> = body.split(',').map(str::trim).collect();
            if parts.len() != 4 {
                return Err(syntax(format!(
                    "transition needs 4 fields (from, to, formula, reward), found {}",
                    parts.len()
                )));
            }
            let vocab = vocab.as_ref().ok_or(RmError::MissingHeader("vocab"))?;
            if num_states.is_none() {
                return Err(RmError::MissingHeader("states"));
            }
            let state = |s: &str| {
                s.parse::<usize>()
                    .map(RmStateId)
                    .map_err(|_| syntax(format!("expected a state index, found `{s}`")))
            };
            let from = state(parts[0])?;
            let to = state(parts[1])?;
            let guard = parse_formula(parts[2], vocab).map_err(|source| RmError::Formula { line, source })?;
            let reward: f64 = parts[3]
                .parse()
                .map_err(|_| syntax(format!("expected a reward, found `{}`", parts[3])))?;
            transitions.push(RmTransition {
                from,
                to,
                guard,
                reward,
                line: Some(line),
            });
            continue;
        }
        let (key, value) = content
            .split_once(':')
            .ok_or_else(|| syntax(format!("unrecognised line `{content}`")))?;
        let value = value.trim();
        match key.trim() {
            "vocab" => {
                let names: Vec<&str> = value.split_whitespace().collect();
                vocab = Some(
                    Vocab::from_names(&names).map_err(|source| RmError::Formula { line, source })?,
                );
            }
            "states" => {
                let n = value
                    .parse::<usize>()
                    .map_err(|_| syntax(format!("expected a state count, found `{value}`")))?;
                num_states = Some((n, line));
            }
            "terminals" => {
                terminals = Some(parse_index_list(line, value)?.into_iter().map(RmStateId).collect());
            }
            "initial" => {
                let v = parse_index_list(line, value)?;
                if v.len() != 1 {
                    return Err(syntax("`initial` takes exactly one state".into()));
                }
                initial = RmStateId(v[0]);
            }
            other => return Err(syntax(format!("unknown header `{other}`"))),
        }
    }

    let vocab = vocab.ok_or(RmError::MissingHeader("vocab"))?;
    let (num_states, states_line) = num_states.ok_or(RmError::MissingHeader("states"))?;
    let terminals = terminals.unwrap_or_else(|| BTreeSet::from([RmStateId(0)]));
    let mut rm = RewardMachine::new(vocab, num_states, initial, terminals, transitions)?;
    rm.states_line = Some(states_line);
    Ok(rm)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GEO: &str = "vocab: red green blue triangle circle\n";

    fn sequence() -> RewardMachine {
        parse_rm(&format!(
            "{GEO}states: 4\n(1, 2, red & triangle, 0)\n(2, 3, green, 0)\n(3, 0, blue & !triangle, 1)\n"
        ))
        .unwrap()
    }

    fn w(rm: &RewardMachine, names: &[&str]) -> TruthAssignment {
        TruthAssignment::from_names(rm.vocab(), names).unwrap()
    }

    #[test]
    fn sequence_steps() {
        let rm = sequence();
        assert_eq!(rm.num_states(), 4);
        assert_eq!(rm.initial(), RmStateId(1));
        let s = rm.step(RmStateId(1), &w(&rm, &["red", "triangle"])).unwrap();
        assert_eq!(s, RmStep { next_state: RmStateId(2), reward: 0.0, terminated: false });
        let s = rm.step(RmStateId(1), &w(&rm, &["green"])).unwrap();
        assert_eq!(s.next_state, RmStateId(1));
        assert_eq!(s.reward, 0.0);
    }

    #[test]
    fn unconditional_edge() {
        let rm = parse_rm("vocab: a\nstates: 2\n(1, 0, true, 1)").unwrap();
        let run = rm.run(&[TruthAssignment::new()]);
        assert_eq!(run.rewards, vec![1.0]);
        assert_eq!(run.terminated_at, Some(0));
    }

    #[test]
    fn overlapping_guards_rejected() {
        let err = parse_rm(&format!("{GEO}states: 2\n(1,0,red,1)\n(1,0,red&triangle,1)\n")).unwrap_err();
        assert!(matches!(err, RmError::NondeterministicGuard { state: RmStateId(1), first: 0, second: 1, .. }));
    }

    #[test]
    fn symbolic_overlap_check_for_large_vocab() {
        let names: Vec<String> = (0..14).map(|i| format!("p{i}")).collect();
        let header = format!("vocab: {}\nstates: 2\n", names.join(" "));
        assert!(parse_rm(&format!("{header}(1,0,p0 & p1,1)\n(1,0,p0 & !p1,1)\n")).is_ok());
        let err = parse_rm(&format!("{header}(1,0,p0 | p2,1)\n(1,0,p2 & p13,1)\n")).unwrap_err();
        assert!(matches!(err, RmError::NondeterministicGuard { .. }));
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(
            parse_rm(&format!("{GEO}states: 2\n(1, 5, red, 1)\n")),
            Err(RmError::DanglingState { line: 3, state: 5, .. })
        ));
        assert!(matches!(
            parse_rm(&format!("{GEO}states: 3\n(0, 1, red, 1)\n")),
            Err(RmError::TransitionFromTerminal { line: 3, .. })
        ));
        assert!(matches!(
            parse_rm(&format!("{GEO}states: 3\n(1, 2, purple, 1)\n")),
            Err(RmError::Formula { line: 3, source: LogicError::UnknownAtom(_) })
        ));
        assert!(matches!(
            parse_rm(&format!("{GEO}states: 3\n(1, 2, red, 1\n")),
            Err(RmError::Syntax { line: 3, .. })
        ));
        assert!(matches!(
            parse_rm(&format!("{GEO}states: 3\n(1, 2, red, x)\n")),
            Err(RmError::Syntax { line: 3, .. })
        ));
        assert!(matches!(parse_rm("states: 2\n(1,0,a,1)"), Err(RmError::MissingHeader("vocab"))));
        assert!(matches!(
            parse_rm(&format!("{GEO}states: 2\nterminals: 1\n")),
            Err(RmError::InitialIsTerminal(RmStateId(1)))
        ));
    }

    #[test]
    fn headers_and_comments() {
        let rm = parse_rm(&format!(
            "# loop\n{GEO}states: 3\nterminals:\ninitial: 2 # start\n(2, 1, red, 1) # go\n"
        ))
        .unwrap();
        assert!(rm.terminals().is_empty());
        assert_eq!(rm.initial(), RmStateId(2));
        assert_eq!(rm.states_line(), Some(3));
    }

    #[test]
    fn step_from_terminal_is_error() {
        let rm = sequence();
        assert_eq!(
            rm.step(RmStateId(0), &TruthAssignment::new()),
            Err(RmError::StepFromTerminal(RmStateId(0)))
        );
    }

    #[test]
    fn empty_run() {
        let run = sequence().run(&[]);
        assert_eq!(run, RmRun::default());
    }

    #[test]
    fn self_loop_reward_defaults_to_zero() {
        let rm = parse_rm("vocab: lava\nstates: 2\n(1, 1, lava, -1)\n(1, 0, !lava, 0)\n").unwrap();
        assert_eq!(rm.self_loop_reward(RmStateId(1)), -1.0);
        assert_eq!(sequence().self_loop_reward(RmStateId(1)), 0.0);
    }
}
