//! Hierarchical prototypes built bottom-up with k-means.
//!
//! Level 1 clusters the sample embeddings; level `l ≥ 2` clusters the level-`(l−1)`
//! prototypes, and each lower prototype's k-means assignment becomes its parent edge.
//! Clusters with too few transitive members are dropped and their members reassigned
//! to the nearest surviving prototype of the same level. Every prototype carries a
//! concentration temperature computed from its transitive sample members.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{HcscError, Result};
use crate::rng::{substream, tag};
use crate::vector::{dot, normalize_in_place, sq_dist};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub max_iters: usize,
    /// Stop once an iteration improves inertia by less than this.
    pub tol: f64,
    /// Independent k-means++ seedings; the lowest final inertia wins.
    pub restarts: usize,
    /// Shard the assignment step across threads.
    pub parallel: bool,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-9,
            restarts: 10,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, first entry right after seeding.
    pub inertia_trace: Vec<f64>,
}

fn nearest_centroid(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>], parallel: bool) -> Vec<(usize, f64)> {
    if parallel {
        points
            .par_iter()
            .map(|p| nearest_centroid(p, centroids))
            .collect()
    } else {
        points.iter().map(|p| nearest_centroid(p, centroids)).collect()
    }
}

fn kmeans_plus_plus<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave the target past the final prefix sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // every remaining point duplicates a centroid
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
        centroids.push(points[pick].clone());
    }
    centroids
}

fn lloyd_once<R: Rng>(
    points: &[Vec<f64>],
    k: usize,
    opts: &KMeansOptions,
    rng: &mut R,
) -> KMeansResult {
    let dim = points[0].len();
    let mut centroids = kmeans_plus_plus(points, k, rng);
    let mut assigned = assign(points, &centroids, opts.parallel);
    let mut inertia: f64 = assigned.iter().map(|a| a.1).sum();
    let mut trace = vec![inertia];
    for _ in 0..opts.max_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &(j, _)) in points.iter().zip(&assigned) {
            crate::vector::axpy(1.0, p, &mut sums[j]);
            counts[j] += 1;
        }
        let mut reseeded = vec![false; points.len()];
        for j in 0..k {
            if counts[j] > 0 {
                sums[j].iter_mut().for_each(|s| *s /= counts[j] as f64);
                centroids[j] = std::mem::take(&mut sums[j]);
            } else {
                // empty cluster: reseed at the point farthest from its centroid
                let far = (0..points.len())
                    .filter(|&i| !reseeded[i])
                    .max_by(|&a, &b| assigned[a].1.total_cmp(&assigned[b].1).then(b.cmp(&a)));
                if let Some(i) = far {
                    reseeded[i] = true;
                    centroids[j] = points[i].clone();
                }
            }
        }
        assigned = assign(points, &centroids, opts.parallel);
        let next: f64 = assigned.iter().map(|a| a.1).sum();
        trace.push(next);
        let improvement = inertia - next;
        inertia = next;
        if improvement < opts.tol {
            break;
        }
    }
    KMeansResult {
        centroids,
        assignments: assigned.into_iter().map(|a| a.0).collect(),
        inertia,
        inertia_trace: trace,
    }
}

/// Lloyd's algorithm with k-means++ seeding under squared Euclidean distance.
pub fn lloyd_kmeans<R: Rng>(
    points: &[Vec<f64>],
    k: usize,
    opts: &KMeansOptions,
    rng: &mut R,
) -> Result<KMeansResult> {
    if k == 0 || k > points.len() {
        return Err(HcscError::config(format!(
            "k = {k} must lie in [1, {}]",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite())) {
        return Err(HcscError::contract("k-means points must be finite with equal dimension"));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..opts.restarts.max(1) {
        let run = lloyd_once(points, k, opts, rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

/// Concentration temperature `Σ‖z_i − c‖ / (|Z_c| · ln(|Z_c| + ε))`, before any floor or rescale.
pub fn concentration<Z: AsRef<[f64]>>(members: &[Z], centroid: &[f64], epsilon: f64) -> Result<f64> {
    if members.is_empty() {
        return Err(HcscError::contract("concentration of an empty cluster"));
    }
    if !(epsilon > 0.0) {
        return Err(HcscError::contract("epsilon must be positive"));
    }
    let n = members.len() as f64;
    let spread: f64 = members
        .iter()
        .map(|z| sq_dist(z.as_ref(), centroid).sqrt())
        .sum();
    Ok(spread / (n * (n + epsilon).ln()))
}

const ZERO_SPREAD: f64 = 1e-12;

/// Floors and rescales raw temperatures so that every value is at least `floor` and the
/// mean equals `base`. Realized as `τ_i = max(floor, a·raw_i)` with `a` solved exactly.
pub fn normalize_temperatures(raw: &[f64], base: f64, floor: f64) -> Vec<f64> {
    let n = raw.len();
    if n == 0 {
        return Vec::new();
    }
    // round-off residue of singleton clusters counts as zero spread
    let mut order: Vec<usize> = (0..n).filter(|&i| raw[i] > ZERO_SPREAD).collect();
    if order.is_empty() {
        return vec![base; n];
    }
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]));
    let nf = n as f64;
    let mut top_sum = 0.0;
    let mut scale = None;
    for (k, &i) in order.iter().enumerate() {
        top_sum += raw[i];
        let active = (k + 1) as f64;
        let a = (nf * base - (nf - active) * floor) / top_sum;
        let next_inactive = order.get(k + 1).is_none_or(|&j| a * raw[j] <= floor);
        if a * raw[i] >= floor && next_inactive {
            scale = Some(a);
            break;
        }
    }
    let a = scale.unwrap_or((nf * base - (nf - order.len() as f64) * floor) / top_sum);
    raw.iter().map(|&r| (a * r).max(floor)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyOptions {
    /// Clusters with fewer transitive members are discarded.
    pub min_cluster_size: usize,
    /// Smoothing constant of the concentration estimate.
    pub epsilon: f64,
    /// Target per-level mean temperature.
    pub base_tau: f64,
    pub tau_floor: f64,
    pub kmeans: KMeansOptions,
}

impl Default for HierarchyOptions {
    fn default() -> Self {
        Self {
            min_cluster_size: 10,
            epsilon: 10.0,
            base_tau: 0.2,
            tau_floor: 1e-3,
            kmeans: KMeansOptions::default(),
        }
    }
}

impl HierarchyOptions {
    pub fn validate(&self) -> Result<()> {
        if self.min_cluster_size == 0 {
            return Err(HcscError::config("min_cluster_size must be at least 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(HcscError::config("epsilon must be positive"));
        }
        if !(self.tau_floor > 0.0 && self.base_tau > self.tau_floor) {
            return Err(HcscError::config("need 0 < tau_floor < base_tau"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyLevel {
    /// Unit-norm prototypes.
    pub prototypes: Vec<Vec<f64>>,
    /// Post-processed temperatures.
    pub tau: Vec<f64>,
    /// Concentrations before floor/rescale.
    pub raw_tau: Vec<f64>,
    /// Transitive sample members per prototype.
    pub member_count: Vec<usize>,
    /// Parent index at the next level; `None` at the top level.
    pub parent: Option<Vec<usize>>,
}

impl HierarchyLevel {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    /// `s(v, c_j) = v·c_j / τ_j`
    pub fn similarity(&self, v: &[f64], j: usize) -> f64 {
        dot(v, &self.prototypes[j]) / self.tau[j]
    }

    pub fn similarities(&self, v: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|j| self.similarity(v, j)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTree {
    /// Finest level first.
    pub levels: Vec<HierarchyLevel>,
    /// Level-1 prototype of every sample.
    pub level1_assignment: Vec<usize>,
    pub epoch_stamp: u64,
    /// Raw k-means assignment of every point clustered at each level (samples for level 1,
    /// lower prototypes above), mapped to final indices; `None` where the cluster was pruned.
    pub construction_assignment: Vec<Vec<Option<usize>>>,
}

impl PrototypeTree {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Level `l` (1-based).
    pub fn level(&self, l: usize) -> &HierarchyLevel {
        &self.levels[l - 1]
    }

    pub fn num_samples(&self) -> usize {
        self.level1_assignment.len()
    }

    /// Prototype index at level `l` for every sample, via the parent chain.
    pub fn assignment_at(&self, l: usize) -> Vec<usize> {
        let mut a = self.level1_assignment.clone();
        for lvl in &self.levels[..l - 1] {
            let parent = lvl.parent.as_ref().expect("non-top level has parents");
            a.iter_mut().for_each(|x| *x = parent[*x]);
        }
        a
    }

    /// Argmax of `z·c/τ_c` over level `l`; ties resolve to the lowest index.
    pub fn nearest_prototype(&self, z: &[f64], l: usize) -> usize {
        crate::vector::argmax(&self.level(l).similarities(z))
    }

    /// One line per prototype: level, index, parent, member count, temperature.
    pub fn dump(&self) -> String {
        let mut out = String::from("# level\tindex\tparent\tmembers\ttau\n");
        for (li, lvl) in self.levels.iter().enumerate() {
            for j in 0..lvl.len() {
                let parent = lvl
                    .parent
                    .as_ref()
                    .map_or_else(|| "-".to_string(), |p| p[j].to_string());
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{:.9}",
                    li + 1,
                    j,
                    parent,
                    lvl.member_count[j],
                    lvl.tau[j]
                );
            }
        }
        out
    }

    /// Builds a tree from a given partition: level-1 assignment plus parent maps.
    /// Prototypes are the normalized means of their transitive members.
    pub fn from_partition(
        embeddings: &[Vec<f64>],
        level1_assignment: Vec<usize>,
        parents: Vec<Vec<usize>>,
        opts: &HierarchyOptions,
    ) -> Result<Self> {
        opts.validate()?;
        if embeddings.len() != level1_assignment.len() || embeddings.is_empty() {
            return Err(HcscError::contract("assignment length must match a non-empty sample set"));
        }
        let dim = embeddings[0].len();
        let mut sizes = vec![level1_assignment.iter().max().unwrap() + 1];
        for (i, p) in parents.iter().enumerate() {
            if p.len() != sizes[i] {
                return Err(HcscError::contract(format!(
                    "parent map {} covers {} prototypes, expected {}",
                    i + 1,
                    p.len(),
                    sizes[i]
                )));
            }
            sizes.push(p.iter().max().map_or(0, |m| m + 1));
        }
        let mut assignment = level1_assignment.clone();
        let mut levels = Vec::with_capacity(sizes.len());
        for (li, &m) in sizes.iter().enumerate() {
            let mut sums = vec![vec![0.0; dim]; m];
            let mut counts = vec![0usize; m];
            for (z, &a) in embeddings.iter().zip(&assignment) {
                crate::vector::axpy(1.0, z, &mut sums[a]);
                counts[a] += 1;
            }
            if counts.contains(&0) {
                return Err(HcscError::contract(format!("level {} has an empty prototype", li + 1)));
            }
            for s in &mut sums {
                normalize_in_place(s);
            }
            levels.push(HierarchyLevel {
                prototypes: sums,
                tau: Vec::new(),
                raw_tau: Vec::new(),
                member_count: counts,
                parent: parents.get(li).cloned(),
            });
            if let Some(p) = parents.get(li) {
                assignment.iter_mut().for_each(|a| *a = p[*a]);
            }
        }
        let mut tree = Self {
            levels,
            level1_assignment,
            epoch_stamp: 0,
            construction_assignment: Vec::new(),
        };
        tree.compute_temperatures(embeddings, opts)?;
        Ok(tree)
    }

    fn compute_temperatures(&mut self, embeddings: &[Vec<f64>], opts: &HierarchyOptions) -> Result<()> {
        for l in 1..=self.num_levels() {
            let assignment = self.assignment_at(l);
            let lvl = &mut self.levels[l - 1];
            let mut members: Vec<Vec<&[f64]>> = vec![Vec::new(); lvl.len()];
            for (z, &a) in embeddings.iter().zip(&assignment) {
                members[a].push(z);
            }
            lvl.raw_tau = members
                .iter()
                .zip(&lvl.prototypes)
                .map(|(m, c)| concentration(m, c, opts.epsilon))
                .collect::<Result<_>>()?;
            lvl.tau = normalize_temperatures(&lvl.raw_tau, opts.base_tau, opts.tau_floor);
        }
        Ok(())
    }
}

fn normalized_centroids(centroids: &[Vec<f64>], points: &[Vec<f64>], assignments: &[usize]) -> Vec<Vec<f64>> {
    centroids
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let mut c = c.clone();
            if !normalize_in_place(&mut c) {
                // a zero mean on the sphere: fall back to a member direction
                let i = assignments.iter().position(|&a| a == j).unwrap_or(0);
                c = points[i].clone();
                normalize_in_place(&mut c);
            }
            c
        })
        .collect()
}

/// Keeps clusters with at least `min_size` members; the largest always survives.
/// Returns the compacted index of every surviving cluster.
fn prune(counts: &[usize], min_size: usize) -> Vec<Option<usize>> {
    let mut keep: Vec<bool> = counts.iter().map(|&c| c >= min_size).collect();
    if !keep.contains(&true) {
        let largest = crate::vector::argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
        keep[largest] = true;
    }
    let mut next = 0;
    keep.iter()
        .map(|&k| {
            k.then(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

/// Bottom-up hierarchical k-means over unit-norm embeddings.
pub fn build_hierarchy<R: Rng>(
    embeddings: &[Vec<f64>],
    level_sizes: &[usize],
    opts: &HierarchyOptions,
    rng: &mut R,
) -> Result<PrototypeTree> {
    opts.validate()?;
    validate_level_sizes(level_sizes, embeddings.len())?;

    // level 1
    let km = lloyd_kmeans(embeddings, level_sizes[0], &opts.kmeans, rng)?;
    let protos = normalized_centroids(&km.centroids, embeddings, &km.assignments);
    let mut counts = vec![0usize; protos.len()];
    for &a in &km.assignments {
        counts[a] += 1;
    }
    let survivor = prune(&counts, opts.min_cluster_size);
    let mut level1_assignment = Vec::with_capacity(embeddings.len());
    for (z, &a) in embeddings.iter().zip(&km.assignments) {
        level1_assignment.push(match survivor[a] {
            Some(s) => s,
            // pruned cluster: move the member to the nearest survivor
            None => nearest_survivor(z, &protos, &survivor),
        });
    }
    let mut construction = vec![km.assignments.iter().map(|&a| survivor[a]).collect::<Vec<_>>()];
    let mut current: Vec<Vec<f64>> = compact(protos, &survivor);
    let mut current_counts = vec![0usize; current.len()];
    for &a in &level1_assignment {
        current_counts[a] += 1;
    }
    let mut levels = Vec::with_capacity(level_sizes.len());

    for &size in &level_sizes[1..] {
        let k = size.min(current.len());
        let km = lloyd_kmeans(&current, k, &opts.kmeans, rng)?;
        let parents_protos = normalized_centroids(&km.centroids, &current, &km.assignments);
        let mut parent_counts = vec![0usize; parents_protos.len()];
        for (&a, &c) in km.assignments.iter().zip(&current_counts) {
            parent_counts[a] += c;
        }
        let survivor = prune(&parent_counts, opts.min_cluster_size);
        let parent: Vec<usize> = km
            .assignments
            .iter()
            .enumerate()
            .map(|(i, &a)| match survivor[a] {
                Some(s) => s,
                None => nearest_survivor(&current[i], &parents_protos, &survivor),
            })
            .collect();
        construction.push(km.assignments.iter().map(|&a| survivor[a]).collect());
        let next = compact(parents_protos, &survivor);
        let mut next_counts = vec![0usize; next.len()];
        for (&p, &c) in parent.iter().zip(&current_counts) {
            next_counts[p] += c;
        }
        levels.push(HierarchyLevel {
            prototypes: std::mem::replace(&mut current, next),
            tau: Vec::new(),
            raw_tau: Vec::new(),
            member_count: std::mem::replace(&mut current_counts, next_counts),
            parent: Some(parent),
        });
    }
    levels.push(HierarchyLevel {
        prototypes: current,
        tau: Vec::new(),
        raw_tau: Vec::new(),
        member_count: current_counts,
        parent: None,
    });

    let mut tree = PrototypeTree {
        levels,
        level1_assignment,
        epoch_stamp: 0,
        construction_assignment: construction,
    };
    tree.compute_temperatures(embeddings, opts)?;
    Ok(tree)
}

fn nearest_survivor(v: &[f64], protos: &[Vec<f64>], survivor: &[Option<usize>]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, p) in protos.iter().enumerate() {
        if let Some(s) = survivor[j] {
            let score = dot(v, p);
            if score > best.1 {
                best = (s, score);
            }
        }
    }
    best.0
}

fn compact(protos: Vec<Vec<f64>>, survivor: &[Option<usize>]) -> Vec<Vec<f64>> {
    protos
        .into_iter()
        .zip(survivor)
        .filter_map(|(p, s)| s.map(|_| p))
        .collect()
}

pub fn validate_level_sizes(level_sizes: &[usize], n: usize) -> Result<()> {
    if level_sizes.is_empty() {
        return Err(HcscError::config("at least one hierarchy level is required"));
    }
    if level_sizes[0] == 0 || level_sizes[0] > n {
        return Err(HcscError::config(format!(
            "level 1 size {} must lie in [1, {n}]",
            level_sizes[0]
        )));
    }
    if level_sizes.windows(2).any(|w| w[1] >= w[0] || w[1] == 0) {
        return Err(HcscError::config(format!(
            "level sizes {level_sizes:?} must be strictly decreasing and positive"
        )));
    }
    Ok(())
}

/// Rebuilds prototypes between epochs with a seed-derived stream per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeBuilder {
    pub level_sizes: Vec<usize>,
    pub opts: HierarchyOptions,
    pub seed: u64,
}

impl TreeBuilder {
    pub fn refresh(&self, embeddings: &[Vec<f64>], epoch: u64) -> Result<Arc<PrototypeTree>> {
        let mut rng = substream(self.seed, &[tag::CLUSTER, epoch]);
        let mut tree = build_hierarchy(embeddings, &self.level_sizes, &self.opts, &mut rng)?;
        tree.epoch_stamp = epoch;
        Ok(Arc::new(tree))
    }
}
