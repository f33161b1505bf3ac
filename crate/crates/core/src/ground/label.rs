//! Learned labelling function.
//!
//! Each atom gets an independent logistic classifier over a sparse binary
//! feature map: for every property channel, whether the agent's cell has
//! that property, followed by the raw observation channels. The first
//! block makes every GeoGrid proposition exactly linearly separable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::GroundError;
use crate::geogrid::{GroundingDataset, ObsKey, Observation, AGENT_CHANNEL, CHANNELS};
use crate::logic::{Atom, TruthAssignment, Vocab};

pub const LABEL_FEATURE_VERSION: u32 = 1;

/// Indices of the active (value 1) features of `obs`.
pub fn label_features(obs: &Observation) -> Vec<usize> {
    let mut active = Vec::with_capacity(16);
    if let Some(agent) = obs.agent() {
        for ch in 0..AGENT_CHANNEL {
            if obs.get(agent, ch) {
                active.push(ch);
            }
        }
    }
    let offset = AGENT_CHANNEL;
    active.extend(
        obs.data()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| offset + i),
    );
    active
}

pub fn label_feature_dim(height: usize, width: usize) -> usize {
    AGENT_CHANNEL + height * width * CHANNELS
}

/// Produces one probability per vocabulary atom.
pub trait AtomScorer {
    fn scores(&self, obs: &Observation) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearScorer {
    pub feature_version: u32,
    pub height: usize,
    pub width: usize,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl AtomScorer for LinearScorer {
    fn scores(&self, obs: &Observation) -> Vec<f64> {
        let active = label_features(obs);
        let dim = label_feature_dim(self.height, self.width);
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| sigmoid(b + active.iter().filter(|&&f| f < dim).map(|&f| w[f]).sum::<f64>()))
            .collect()
    }
}

/// Memorized labels; unseen observations score 0 for every atom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularScorer {
    pub n_atoms: usize,
    pub table: BTreeMap<ObsKey, Vec<bool>>,
}

impl AtomScorer for TabularScorer {
    fn scores(&self, obs: &Observation) -> Vec<f64> {
        match self.table.get(&obs.key()) {
            Some(bits) => bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            None => vec![0.0; self.n_atoms],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scorer {
    Linear(LinearScorer),
    Tabular(TabularScorer),
}

impl AtomScorer for Scorer {
    fn scores(&self, obs: &Observation) -> Vec<f64> {
        match self {
            Scorer::Linear(s) => s.scores(obs),
            Scorer::Tabular(s) => s.scores(obs),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelModel {
    vocab: Vocab,
    threshold: f64,
    scorer: Scorer,
}

impl LabelModel {
    pub fn new(vocab: Vocab, threshold: f64, scorer: Scorer) -> Result<Self, GroundError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(GroundError::InvalidThreshold(threshold));
        }
        Ok(LabelModel { vocab, threshold, scorer })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn scorer(&self) -> &Scorer {
        &self.scorer
    }

    /// Atoms whose score reaches the threshold.
    pub fn predict(&self, obs: &Observation) -> TruthAssignment {
        self.scorer
            .scores(obs)
            .into_iter()
            .zip(self.vocab.atoms())
            .filter(|(p, _)| *p >= self.threshold)
            .map(|(_, a)| a.clone())
            .collect()
    }
}

pub fn predict_labels(m: &LabelModel, obs: &Observation) -> TruthAssignment {
    m.predict(obs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Linear,
    Tabular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelHyper {
    pub mode: LabelMode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub threshold: f64,
    /// Every `holdout_every`-th trajectory is held out; 0 disables the split.
    pub holdout_every: usize,
}

impl Default for LabelHyper {
    fn default() -> Self {
        LabelHyper {
            mode: LabelMode::Linear,
            learning_rate: 2.0,
            epochs: 300,
            l2: 1e-5,
            threshold: 0.5,
            holdout_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomAccuracy {
    pub atom: Atom,
    pub train: f64,
    pub heldout: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub per_atom: Vec<AtomAccuracy>,
    pub n_train: usize,
    pub n_heldout: usize,
}

impl LabelReport {
    /// Smallest held-out accuracy over atoms (training accuracy when nothing is held out).
    pub fn min_heldout_accuracy(&self) -> f64 {
        self.per_atom
            .iter()
            .map(|a| a.heldout.unwrap_or(a.train))
            .fold(f64::INFINITY, f64::min)
    }
}

struct Sample<'a> {
    obs: &'a Observation,
    labels: &'a TruthAssignment,
}

fn split(ds: &GroundingDataset, every: usize) -> (Vec<Sample<'_>>, Vec<Sample<'_>>) {
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, t) in ds.trajectories.iter().enumerate() {
        let dest = if every > 0 && ds.trajectories.len() > 1 && i % every == every - 1 {
            &mut held
        } else {
            &mut train
        };
        dest.extend(t.observations.iter().zip(&t.labels).map(|(obs, labels)| Sample { obs, labels }));
    }
    (train, held)
}

fn accuracy(model: &LabelModel, samples: &[Sample<'_>], atom: &Atom) -> f64 {
    let correct = samples
        .iter()
        .filter(|s| model.predict(s.obs).contains(atom) == s.labels.contains(atom))
        .count();
    correct as f64 / samples.len().max(1) as f64
}

/// Fit one classifier per atom by full-batch gradient descent on the mean
/// binary cross-entropy (linear mode) or by memorization (tabular mode).
pub fn train_label_model(ds: &GroundingDataset, hyper: &LabelHyper) -> Result<(LabelModel, LabelReport), GroundError> {
    let vocab = ds.vocab().clone();
    if ds.trajectories.is_empty() {
        return Err(GroundError::EmptyDataset);
    }
    for atom in vocab.atoms() {
        let labels = ds.trajectories.iter().flat_map(|t| &t.labels);
        let positives = labels.clone().filter(|w| w.contains(atom)).count();
        if positives == 0 || positives == labels.count() {
            return Err(GroundError::DegenerateAtom(atom.to_string()));
        }
    }
    let (train, held) = split(ds, hyper.holdout_every);
    let n_atoms = vocab.len();

    // identical observations share features, so aggregate them
    let mut groups: BTreeMap<ObsKey, (Vec<usize>, f64, Vec<f64>)> = BTreeMap::new();
    for s in &train {
        let entry = groups
            .entry(s.obs.key())
            .or_insert_with(|| (label_features(s.obs), 0.0, vec![0.0; n_atoms]));
        entry.1 += 1.0;
        for (i, a) in vocab.atoms().iter().enumerate() {
            if s.labels.contains(a) {
                entry.2[i] += 1.0;
            }
        }
    }

    let scorer = match hyper.mode {
        LabelMode::Tabular => Scorer::Tabular(TabularScorer {
            n_atoms,
            table: groups
                .iter()
                .map(|(k, (_, n, pos))| (k.clone(), pos.iter().map(|p| 2.0 * p >= *n).collect()))
                .collect(),
        }),
        LabelMode::Linear => {
            let cfg = &ds.meta.config;
            let dim = label_feature_dim(cfg.height, cfg.width);
            let total: f64 = groups.values().map(|g| g.1).sum();
            let mut weights = vec![vec![0.0; dim]; n_atoms];
            let mut bias = vec![0.0; n_atoms];
            let mut grad = vec![0.0; dim];
            for atom in 0..n_atoms {
                let w = &mut weights[atom];
                for _ in 0..hyper.epochs {
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let mut grad_b = 0.0;
                    for (features, count, pos) in groups.values() {
                        let z = bias[atom] + features.iter().map(|&f| w[f]).sum::<f64>();
                        let g = (count * sigmoid(z) - pos[atom]) / total;
                        grad_b += g;
                        for &f in features {
                            grad[f] += g;
                        }
                    }
                    bias[atom] -= hyper.learning_rate * grad_b;
                    for (wi, gi) in w.iter_mut().zip(&grad) {
                        *wi -= hyper.learning_rate * (gi + hyper.l2 * *wi);
                    }
                }
            }
            Scorer::Linear(LinearScorer {
                feature_version: LABEL_FEATURE_VERSION,
                height: cfg.height,
                width: cfg.width,
                weights,
                bias,
            })
        }
    };
    let model = LabelModel::new(vocab.clone(), hyper.threshold, scorer)?;
    let per_atom = vocab
        .atoms()
        .iter()
        .map(|a| AtomAccuracy {
            atom: a.clone(),
            train: accuracy(&model, &train, a),
            heldout: (!held.is_empty()).then(|| accuracy(&model, &held, a)),
        })
        .collect();
    let report = LabelReport {
        per_atom,
        n_train: train.len(),
        n_heldout: held.len(),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::{generate_dataset, true_label, DatasetPolicy, GeoGrid, GridConfig};

    fn desk(n: usize, len: usize, seed: u64) -> GroundingDataset {
        let cfg = GridConfig { episode_len: len, ..GridConfig::desk() };
        generate_dataset(&cfg, n, DatasetPolicy::UniformRandom, seed).unwrap()
    }

    #[test]
    fn linear_model_matches_ground_truth() {
        let ds = desk(200, 40, 5);
        let (model, report) = train_label_model(&ds, &LabelHyper::default()).unwrap();
        assert!(report.min_heldout_accuracy() >= 0.99, "{report:?}");
        let env = GeoGrid::new(GridConfig::desk()).unwrap();
        for s in env.enumerate_states().unwrap() {
            assert_eq!(model.predict(&env.observe(&s)), true_label(&s));
        }
    }

    #[test]
    fn linear_model_generalizes_across_layouts() {
        let cfg = GridConfig { episode_len: 40, ..GridConfig::desk_randomized() };
        let ds = generate_dataset(&cfg, 300, DatasetPolicy::UniformRandom, 9).unwrap();
        let (_, report) = train_label_model(&ds, &LabelHyper::default()).unwrap();
        assert!(report.min_heldout_accuracy() >= 0.99, "{report:?}");
    }

    #[test]
    fn tabular_memorizes() {
        let ds = desk(50, 30, 1);
        let hyper = LabelHyper { mode: LabelMode::Tabular, ..LabelHyper::default() };
        let (model, report) = train_label_model(&ds, &hyper).unwrap();
        assert!(report.per_atom.iter().all(|a| a.train == 1.0));
        // unseen observation: every atom scores 0
        assert!(model.predict(&Observation::zeros(6, 6)).is_empty());
    }

    #[test]
    fn degenerate_atom() {
        // red objects removed from the grid: `red` never holds
        let mut cfg = GridConfig { episode_len: 20, ..GridConfig::desk() };
        cfg.objects.retain(|o| o.color != crate::geogrid::Color::Red);
        let ds = generate_dataset(&cfg, 20, DatasetPolicy::UniformRandom, 0).unwrap();
        assert!(matches!(
            train_label_model(&ds, &LabelHyper::default()),
            Err(GroundError::DegenerateAtom(a)) if a == "red"
        ));
    }

    #[test]
    fn threshold_bounds() {
        let ds = desk(30, 20, 2);
        let (model, _) = train_label_model(&ds, &LabelHyper::default()).unwrap();
        assert!(matches!(
            LabelModel::new(model.vocab().clone(), 1.0 + 1e-9, model.scorer().clone()),
            Err(GroundError::InvalidThreshold(_))
        ));
        assert!(LabelModel::new(model.vocab().clone(), 0.0, model.scorer().clone()).is_err());
        // all-zero observation is accepted
        let _ = model.predict(&Observation::zeros(6, 6));
    }
}
