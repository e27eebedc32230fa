//! Hierarchy-guided Bernoulli selection of negatives.
//!
//! A queue candidate `z_j` is kept at level `l` with probability
//! `1 − softmax_i s(z_j, c^l_i)` evaluated at the query's nearest level-`l` prototype.
//! A negative prototype `c_j` at level `l < L` is kept with probability
//! `1 − softmax_i s(c_j, c^{l+1}_i)` evaluated at the parent of the query's prototype.
//! Top-level prototypes are all kept.
//!
//! Every Bernoulli draw accepts iff `u < p` for `u` uniform in `[0, 1)`, drawn in
//! candidate order from the substream keyed by `(kind, step, query, level)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoder::QueueKey;
use crate::error::{HcscError, Result};
use crate::hierarchy::PrototypeTree;
use crate::rng::{substream, tag};
use crate::vector::softmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionKind {
    Instance,
    Prototype,
}

impl SelectionKind {
    pub fn name(self) -> &'static str {
        match self {
            SelectionKind::Instance => "instance",
            SelectionKind::Prototype => "prototype",
        }
    }
}

/// Outcome of one level's Bernoulli trials for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub kind: SelectionKind,
    pub level: usize,
    pub query_id: u64,
    /// Sample ids of queue keys (instance kind, in snapshot order) or prototype indices.
    pub candidates: Vec<u64>,
    pub probabilities: Vec<f64>,
    pub accepted: Vec<bool>,
}

impl SelectionReport {
    pub fn accepted_count(&self) -> usize {
        self.accepted.iter().filter(|&&a| a).count()
    }

    /// Positions (into `candidates`) of accepted entries.
    pub fn accepted_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.accepted
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
    }

    pub fn mean_probability(&self) -> Option<f64> {
        (!self.probabilities.is_empty())
            .then(|| self.probabilities.iter().sum::<f64>() / self.probabilities.len() as f64)
    }

    /// Rows `step,level,query_id,candidate_id,p,accepted` for the diagnostics CSV.
    pub fn csv_rows(&self, step: u64) -> impl Iterator<Item = String> + '_ {
        self.candidates
            .iter()
            .zip(&self.probabilities)
            .zip(&self.accepted)
            .map(move |((c, p), a)| {
                format!("{step},{},{},{c},{p},{}", self.level, self.query_id, u8::from(*a))
            })
    }
}

pub const DIAGNOSTICS_HEADER: &str = "step,level,query_id,candidate_id,p,accepted";

/// Keys for the per-(step, query, level) random substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionStream {
    pub seed: u64,
    pub step: u64,
    pub query: u64,
}

impl SelectionStream {
    pub fn rng(&self, kind: SelectionKind, level: usize) -> ChaCha8Rng {
        let t = match kind {
            SelectionKind::Instance => tag::INSTANCE_SELECT,
            SelectionKind::Prototype => tag::PROTO_SELECT,
        };
        substream(self.seed, &[t, self.step, self.query, level as u64])
    }
}

fn bernoulli<R: Rng>(probabilities: &[f64], rng: &mut R) -> Vec<bool> {
    probabilities
        .iter()
        .map(|&p| rng.random::<f64>() < p)
        .collect()
}

/// `s(v, c^l_j) = v·c^l_j / τ_{c^l_j}`
pub fn cluster_similarity(v: &[f64], tree: &PrototypeTree, level: usize, j: usize) -> f64 {
    tree.level(level).similarity(v, j)
}

/// Selection probability of queue candidate `z_j` for query `z` at `level`.
pub fn instance_selection_prob(z_j: &[f64], z: &[f64], tree: &PrototypeTree, level: usize) -> f64 {
    let pos = tree.nearest_prototype(z, level);
    let soft = softmax(&tree.level(level).similarities(z_j));
    (1.0 - soft[pos]).clamp(0.0, 1.0)
}

/// Per-candidate softmax over each level's prototypes, shared by all queries of a step.
#[derive(Debug, Clone)]
pub struct InstanceAffinity {
    /// `[level - 1][candidate][prototype]`
    soft: Vec<Vec<Vec<f64>>>,
}

impl InstanceAffinity {
    pub fn new(snapshot: &[QueueKey], tree: &PrototypeTree) -> Self {
        let soft = tree
            .levels
            .iter()
            .map(|lvl| {
                snapshot
                    .par_iter()
                    .map(|k| softmax(&lvl.similarities(k.embedding.as_slice())))
                    .collect()
            })
            .collect();
        Self { soft }
    }

    pub fn probability(&self, level: usize, candidate: usize, positive: usize) -> f64 {
        (1.0 - self.soft[level - 1][candidate][positive]).clamp(0.0, 1.0)
    }

    pub fn num_candidates(&self) -> usize {
        self.soft.first().map_or(0, Vec::len)
    }
}

/// Instance-negative selection for every level, with precomputed affinities.
pub fn select_instance_negatives_with(
    z: &[f64],
    snapshot: &[QueueKey],
    tree: &PrototypeTree,
    affinity: &InstanceAffinity,
    stream: &SelectionStream,
) -> Vec<SelectionReport> {
    (1..=tree.num_levels())
        .map(|level| {
            let pos = tree.nearest_prototype(z, level);
            let probabilities: Vec<f64> = (0..snapshot.len())
                .map(|j| affinity.probability(level, j, pos))
                .collect();
            let accepted = bernoulli(&probabilities, &mut stream.rng(SelectionKind::Instance, level));
            SelectionReport {
                kind: SelectionKind::Instance,
                level,
                query_id: stream.query,
                candidates: snapshot.iter().map(|k| k.sample_id).collect(),
                probabilities,
                accepted,
            }
        })
        .collect()
}

pub fn select_instance_negatives(
    z: &[f64],
    snapshot: &[QueueKey],
    tree: &PrototypeTree,
    stream: &SelectionStream,
) -> Vec<SelectionReport> {
    let affinity = InstanceAffinity::new(snapshot, tree);
    select_instance_negatives_with(z, snapshot, tree, &affinity, stream)
}

/// Accept-everything reports, used when instance selection is switched off.
pub fn accept_all_instance(snapshot: &[QueueKey], levels: usize, query_id: u64) -> Vec<SelectionReport> {
    (1..=levels)
        .map(|level| SelectionReport {
            kind: SelectionKind::Instance,
            level,
            query_id,
            candidates: snapshot.iter().map(|k| k.sample_id).collect(),
            probabilities: vec![1.0; snapshot.len()],
            accepted: vec![true; snapshot.len()],
        })
        .collect()
}

/// Selection probability of prototype `j` as a negative for a query whose level-`level`
/// prototype is `positive`.
pub fn proto_selection_prob(j: usize, positive: usize, tree: &PrototypeTree, level: usize) -> Result<f64> {
    if level >= tree.num_levels() {
        return Err(HcscError::contract(format!(
            "prototype selection at level {level} of {}: the top level is exempt",
            tree.num_levels()
        )));
    }
    if j == positive {
        return Err(HcscError::contract("the positive prototype is not a negative candidate"));
    }
    let parent = tree.level(level).parent.as_ref().expect("non-top level")[positive];
    let soft = softmax(&tree.level(level + 1).similarities(&tree.level(level).prototypes[j]));
    Ok((1.0 - soft[parent]).clamp(0.0, 1.0))
}

/// Softmax of every non-top prototype over the next level, fixed for an epoch.
#[derive(Debug, Clone)]
pub struct ProtoAffinity {
    /// `[level - 1][prototype][parent candidate]`, empty for the top level.
    soft: Vec<Vec<Vec<f64>>>,
}

impl ProtoAffinity {
    pub fn new(tree: &PrototypeTree) -> Self {
        let top = tree.num_levels();
        let soft = (1..=top)
            .map(|l| {
                if l == top {
                    return Vec::new();
                }
                let upper = tree.level(l + 1);
                tree.level(l)
                    .prototypes
                    .iter()
                    .map(|c| softmax(&upper.similarities(c)))
                    .collect()
            })
            .collect();
        Self { soft }
    }
}

pub fn select_proto_negatives_with(
    z: &[f64],
    tree: &PrototypeTree,
    level: usize,
    affinity: &ProtoAffinity,
    stream: &SelectionStream,
) -> SelectionReport {
    let pos = tree.nearest_prototype(z, level);
    let lvl = tree.level(level);
    let candidates: Vec<u64> = (0..lvl.len()).filter(|&j| j != pos).map(|j| j as u64).collect();
    let (probabilities, accepted) = if level == tree.num_levels() {
        (vec![1.0; candidates.len()], vec![true; candidates.len()])
    } else {
        let parent = lvl.parent.as_ref().expect("non-top level")[pos];
        let probabilities: Vec<f64> = candidates
            .iter()
            .map(|&j| (1.0 - affinity.soft[level - 1][j as usize][parent]).clamp(0.0, 1.0))
            .collect();
        let accepted = bernoulli(&probabilities, &mut stream.rng(SelectionKind::Prototype, level));
        (probabilities, accepted)
    };
    SelectionReport {
        kind: SelectionKind::Prototype,
        level,
        query_id: stream.query,
        candidates,
        probabilities,
        accepted,
    }
}

pub fn select_proto_negatives(
    z: &[f64],
    tree: &PrototypeTree,
    level: usize,
    stream: &SelectionStream,
) -> SelectionReport {
    select_proto_negatives_with(z, tree, level, &ProtoAffinity::new(tree), stream)
}

/// All non-positive prototypes at every level, used when prototype selection is off.
pub fn accept_all_proto(z: &[f64], tree: &PrototypeTree, query_id: u64) -> Vec<SelectionReport> {
    (1..=tree.num_levels())
        .map(|level| {
            let pos = tree.nearest_prototype(z, level);
            let candidates: Vec<u64> = (0..tree.level(level).len())
                .filter(|&j| j != pos)
                .map(|j| j as u64)
                .collect();
            SelectionReport {
                kind: SelectionKind::Prototype,
                level,
                query_id,
                probabilities: vec![1.0; candidates.len()],
                accepted: vec![true; candidates.len()],
                candidates,
            }
        })
        .collect()
}
