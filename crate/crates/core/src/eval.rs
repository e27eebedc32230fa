//! Evaluation of frozen representations.

use std::collections::BTreeMap;
use std::ops::AddAssign;

use rayon::prelude::*;

use crate::error::{HcscError, Result};
use crate::hierarchy::PrototypeTree;
use crate::selection::{SelectionKind, SelectionReport};
use crate::vector::{dot, log_sum_exp, softmax};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub knn_temperature: f64,
    pub knn_k_grid: Vec<usize>,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    /// Fraction of selection reports written to the diagnostics CSV.
    pub diagnostic_rate: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            knn_temperature: 0.07,
            knn_k_grid: vec![10, 20, 100, 200],
            probe_epochs: 300,
            probe_lr: 1.0,
            diagnostic_rate: 0.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.knn_temperature > 0.0) {
            return Err(HcscError::config("knn temperature must be positive"));
        }
        if self.knn_k_grid.is_empty() || self.knn_k_grid.contains(&0) {
            return Err(HcscError::config("knn k grid must be non-empty with k >= 1"));
        }
        if !(0.0..=1.0).contains(&self.diagnostic_rate) {
            return Err(HcscError::config("diagnostic rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnResult {
    /// `(requested k, accuracy)` in grid order.
    pub per_k: Vec<(usize, f64)>,
    pub best_k: usize,
    pub best_accuracy: f64,
    pub warnings: Vec<String>,
}

/// Train indices sorted by descending cosine score, ties by ascending index.
fn ranked_neighbours(query: &[f64], train: &[Vec<f64>]) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = train.iter().map(|t| dot(query, t)).enumerate().collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

fn argmax_lowest(xs: &[f64]) -> usize {
    crate::vector::argmax(xs)
}

/// Weighted-vote likelihoods `p_c(x) = Σ_{i ∈ top-k} 1(y_i = c)·exp(cos/τ)`.
pub fn knn_class_likelihoods(
    query: &[f64],
    train_emb: &[Vec<f64>],
    train_labels: &[usize],
    k: usize,
    temperature: f64,
) -> Vec<f64> {
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let mut p = vec![0.0; classes];
    for (i, s) in ranked_neighbours(query, train_emb).into_iter().take(k) {
        p[train_labels[i]] += (s / temperature).exp();
    }
    p
}

pub fn knn_evaluate(
    train_emb: &[Vec<f64>],
    train_labels: &[usize],
    test_emb: &[Vec<f64>],
    test_labels: &[usize],
    config: &EvalConfig,
) -> Result<KnnResult> {
    config.validate()?;
    if train_emb.len() != train_labels.len() || test_emb.len() != test_labels.len() {
        return Err(HcscError::contract("embedding and label counts differ"));
    }
    if train_emb.is_empty() || test_emb.is_empty() {
        return Err(HcscError::contract("knn needs non-empty train and test sets"));
    }
    let mut warnings = Vec::new();
    let ks: Vec<usize> = config
        .knn_k_grid
        .iter()
        .map(|&k| {
            if k > train_emb.len() {
                warnings.push(format!("k = {k} clamped to {}", train_emb.len()));
                train_emb.len()
            } else {
                k
            }
        })
        .collect();
    let max_k = *ks.iter().max().unwrap();
    let classes = train_labels.iter().max().unwrap() + 1;
    let tau = config.knn_temperature;

    // one ranking per test point serves every k
    let correct_per_k: Vec<Vec<bool>> = test_emb
        .par_iter()
        .zip(test_labels.par_iter())
        .map(|(q, &y)| {
            let ranked = ranked_neighbours(q, train_emb);
            let mut order: Vec<usize> = (0..ks.len()).collect();
            order.sort_by_key(|&i| ks[i]);
            let mut p = vec![0.0; classes];
            let mut taken = 0;
            let mut out = vec![false; ks.len()];
            for i in order {
                while taken < ks[i] {
                    let (idx, s) = ranked[taken];
                    p[train_labels[idx]] += (s / tau).exp();
                    taken += 1;
                }
                out[i] = argmax_lowest(&p) == y;
            }
            debug_assert!(taken <= max_k);
            out
        })
        .collect();

    let per_k: Vec<(usize, f64)> = config
        .knn_k_grid
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let hits = correct_per_k.iter().filter(|c| c[i]).count();
            (k, hits as f64 / test_emb.len() as f64)
        })
        .collect();
    let (best_k, best_accuracy) = per_k
        .iter()
        .copied()
        .fold((0, f64::NEG_INFINITY), |b, (k, a)| if a > b.1 { (k, a) } else { b });
    Ok(KnnResult {
        per_k,
        best_k,
        best_accuracy,
        warnings,
    })
}

fn compact_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for &l in labels {
        let next = map.len();
        map.entry(l).or_insert(next);
    }
    (labels.iter().map(|l| map[l]).collect(), map.len())
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `ln(k!)` for `k ∈ [0, n]`.
fn log_factorials(n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n + 1];
    for k in 1..=n {
        t[k] = t[k - 1] + (k as f64).ln();
    }
    t
}

/// Expected mutual information under the hypergeometric permutation model.
fn expected_mutual_information(a: &[usize], b: &[usize], n: usize) -> f64 {
    let lf = log_factorials(n);
    let nf = n as f64;
    let mut emi = 0.0;
    for &ai in a {
        for &bj in b {
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            let base = lf[ai] + lf[bj] + lf[n - ai] + lf[n - bj] - lf[n];
            for nij in lo..=hi {
                let x = nij as f64;
                let term = (x / nf) * (nf * x / (ai as f64 * bj as f64)).ln();
                let log_p = base - lf[nij] - lf[ai - nij] - lf[bj - nij] - lf[n + nij - ai - bj];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// `(NMI, AMI)` with natural logs and arithmetic-mean normalization; `0/0` is taken as 0.
pub fn clustering_agreement(a: &[usize], b: &[usize]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(HcscError::contract(format!("label lengths {} and {} differ", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(HcscError::contract("clustering agreement of empty labelings"));
    }
    let n = a.len();
    let nf = n as f64;
    let (a, ka) = compact_labels(a);
    let (b, kb) = compact_labels(b);
    let mut table = vec![0usize; ka * kb];
    let mut row = vec![0usize; ka];
    let mut col = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(&b) {
        table[x * kb + y] += 1;
        row[x] += 1;
        col[y] += 1;
    }
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let c = table[i * kb + j];
            if c > 0 {
                let c = c as f64;
                mi += (c / nf) * (nf * c / (row[i] as f64 * col[j] as f64)).ln();
            }
        }
    }
    let mean_h = 0.5 * (entropy(&row, nf) + entropy(&col, nf));
    let nmi = if mean_h > 0.0 { (mi / mean_h).clamp(0.0, 1.0) } else { 0.0 };
    let emi = expected_mutual_information(&row, &col, n);
    let denom = mean_h - emi;
    let ami = if denom.abs() > 1e-15 { (mi - emi) / denom } else { 0.0 };
    Ok((nmi, ami))
}

/// Deterministic held-out split: every `every`-th sample (by position) goes to the test side.
pub fn holdout_split(n: usize, every: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| every == 0 || i % every != 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Training loss before every update and after the last one.
    pub loss_trace: Vec<f64>,
}

/// Multinomial logistic regression trained by full-batch gradient descent.
pub fn linear_probe(
    train_emb: &[Vec<f64>],
    train_labels: &[usize],
    test_emb: &[Vec<f64>],
    test_labels: &[usize],
    config: &EvalConfig,
) -> Result<ProbeResult> {
    if train_emb.len() != train_labels.len() || test_emb.len() != test_labels.len() || train_emb.is_empty() {
        return Err(HcscError::contract("probe inputs have inconsistent lengths"));
    }
    let mut distinct = train_labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(HcscError::config("linear probe needs at least two classes"));
    }
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .unwrap()
        + 1;
    let d = train_emb[0].len();
    let n = train_emb.len() as f64;
    let mut w = vec![0.0; classes * (d + 1)];

    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        w.chunks_exact(d + 1)
            .map(|row| dot(&row[..d], x) + row[d])
            .collect()
    };
    let loss_and_grad = |w: &[f64]| -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; w.len()];
        let mut loss = 0.0;
        for (x, &y) in train_emb.iter().zip(train_labels) {
            let z = logits(w, x);
            loss += log_sum_exp(&z) - z[y];
            let p = softmax(&z);
            for (c, pc) in p.iter().enumerate() {
                let g = pc - f64::from(u8::from(c == y));
                let row = &mut grad[c * (d + 1)..(c + 1) * (d + 1)];
                crate::vector::axpy(g / n, x, &mut row[..d]);
                row[d] += g / n;
            }
        }
        (loss / n, grad)
    };

    let mut trace = Vec::with_capacity(config.probe_epochs + 1);
    for _ in 0..config.probe_epochs {
        let (loss, grad) = loss_and_grad(&w);
        trace.push(loss);
        crate::vector::axpy(-config.probe_lr, &grad, &mut w);
    }
    trace.push(loss_and_grad(&w).0);

    let hits = test_emb
        .iter()
        .zip(test_labels)
        .filter(|(x, &y)| argmax_lowest(&logits(&w, x)) == y)
        .count();
    let accuracy = if test_emb.is_empty() { 0.0 } else { hits as f64 / test_emb.len() as f64 };
    Ok(ProbeResult {
        accuracy,
        loss_trace: trace,
    })
}

/// Exact counts behind the false/true-negative selection rates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SelectionDiagnostics {
    /// Candidates sharing the query's fine label.
    pub false_negatives: u64,
    pub false_negatives_rejected: u64,
    pub true_negatives: u64,
    pub true_negatives_accepted: u64,
    pub accepted: u64,
}

impl SelectionDiagnostics {
    /// Fraction of false negatives that were rejected.
    pub fn false_negative_removal(&self) -> Option<f64> {
        (self.false_negatives > 0).then(|| self.false_negatives_rejected as f64 / self.false_negatives as f64)
    }

    /// Fraction of accepted negatives that are true negatives.
    pub fn true_negative_precision(&self) -> Option<f64> {
        (self.accepted > 0).then(|| self.true_negatives_accepted as f64 / self.accepted as f64)
    }

    /// Fraction of true negatives that were kept.
    pub fn true_negative_preservation(&self) -> Option<f64> {
        (self.true_negatives > 0).then(|| self.true_negatives_accepted as f64 / self.true_negatives as f64)
    }
}

impl AddAssign for SelectionDiagnostics {
    fn add_assign(&mut self, o: Self) {
        self.false_negatives += o.false_negatives;
        self.false_negatives_rejected += o.false_negatives_rejected;
        self.true_negatives += o.true_negatives;
        self.true_negatives_accepted += o.true_negatives_accepted;
        self.accepted += o.accepted;
    }
}

/// Classifies instance-selection outcomes against the finest ground-truth labels
/// (indexed by sample id). Prototype reports are ignored.
pub fn negative_selection_diagnostics(reports: &[SelectionReport], fine_labels: &[usize]) -> SelectionDiagnostics {
    let mut d = SelectionDiagnostics::default();
    for r in reports.iter().filter(|r| r.kind == SelectionKind::Instance) {
        let query_label = fine_labels[r.query_id as usize];
        for (&c, &accepted) in r.candidates.iter().zip(&r.accepted) {
            let same = fine_labels[c as usize] == query_label;
            d.accepted += u64::from(accepted);
            if same {
                d.false_negatives += 1;
                d.false_negatives_rejected += u64::from(!accepted);
            } else {
                d.true_negatives += 1;
                d.true_negatives_accepted += u64::from(accepted);
            }
        }
    }
    d
}

/// AMI of every tree level's sample assignment against every label level:
/// `result[prototype_level - 1][label_level - 1]`.
pub fn prototype_label_ami(tree: &PrototypeTree, label_levels: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    (1..=tree.num_levels())
        .map(|l| {
            let a = tree.assignment_at(l);
            label_levels
                .iter()
                .map(|labels| clustering_agreement(&a, labels).map(|(_, ami)| ami))
                .collect()
        })
        .collect()
}
