//! Acceptance suite: prints one PASS/FAIL line per criterion and exits non-zero if any fails.

use std::fs;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hcsc_core::data::{decode_dataset, encode_dataset, generate_hierarchical_mixture, GeneratorSpec};
use hcsc_core::encoder::{encoder_backward, encoder_forward, embed, Activation, EncoderConfig, EncoderParams, QueueKey};
use hcsc_core::eval::{clustering_agreement, knn_evaluate, prototype_label_ami, EvalConfig};
use hcsc_core::hierarchy::{build_hierarchy, HierarchyOptions, PrototypeTree};
use hcsc_core::losses::{hcsc_loss, icsc_loss, info_nce, pcsc_loss, proto_nce, LossOutput, LossToggles, LossWeights};
use hcsc_core::rng::{substream, tag};
use hcsc_core::selection::{
    instance_selection_prob, proto_selection_prob, select_instance_negatives, select_proto_negatives, SelectionReport,
    SelectionStream,
};
use hcsc_core::trainer::{
    decode_checkpoint, encode_checkpoint, eval_tree, load_checkpoint, online_embeddings, run_training, RunOptions,
    TrainingConfig, TrainingOutcome, WarmupMode,
};
use hcsc_core::vector::Embedding;

type Outcome = (bool, String);

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn rand_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

// ---------------------------------------------------------------------------
// 1. oracle equivalence

struct TinyInstance {
    samples: Vec<Vec<f64>>,
    level1: Vec<usize>,
    parents: Vec<Vec<usize>>,
    queue: Vec<(u64, Vec<f64>)>,
    z: Vec<f64>,
    z_prime: Vec<f64>,
    opts: HierarchyOptions,
    tau: f64,
    stream: SelectionStream,
}

fn random_partition(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<usize> {
    let mut a: Vec<usize> = (0..n).map(|i| if i < m { i } else { rng.random_range(0..m) }).collect();
    // shuffle so that the guaranteed members are not always the first items
    for i in (1..n).rev() {
        a.swap(i, rng.random_range(0..=i));
    }
    a
}

fn tiny_instance(rng: &mut ChaCha8Rng) -> TinyInstance {
    let n = rng.random_range(2..=8);
    let d = rng.random_range(2..=4);
    let levels = rng.random_range(1..=3);
    let samples: Vec<Vec<f64>> = (0..n).map(|_| rand_unit(rng, d)).collect();
    let mut sizes = vec![rng.random_range(1..=n)];
    for _ in 1..levels {
        let prev = *sizes.last().unwrap();
        sizes.push(rng.random_range(1..=prev));
    }
    let level1 = random_partition(rng, n, sizes[0]);
    let parents = sizes.windows(2).map(|w| random_partition(rng, w[0], w[1])).collect();
    let q = rng.random_range(1..=8);
    let queue = (0..q).map(|_| (rng.random_range(0..n as u64), rand_unit(rng, d))).collect();
    let floor = [1e-3, 0.05, 0.15][rng.random_range(0..3)];
    TinyInstance {
        samples,
        level1,
        parents,
        queue,
        z: rand_unit(rng, d),
        z_prime: rand_unit(rng, d),
        opts: HierarchyOptions {
            min_cluster_size: 1,
            epsilon: rng.random_range(0.5..20.0),
            base_tau: 0.2,
            tau_floor: floor,
            ..HierarchyOptions::default()
        },
        tau: rng.random_range(0.05..0.5),
        stream: SelectionStream {
            seed: rng.random(),
            step: rng.random_range(0..1000),
            query: rng.random_range(0..n as u64),
        },
    }
}

struct OracleResult {
    loss: f64,
    grad: Vec<f64>,
    instance_p: Vec<Vec<f64>>,
    proto_p: Vec<Vec<f64>>,
}

/// Straight-line re-derivation of the whole objective for one query.
fn brute_force(inst: &TinyInstance) -> OracleResult {
    let d = inst.z.len();
    let levels = inst.parents.len() + 1;
    // transitive assignments
    let mut assign = vec![inst.level1.clone()];
    for p in &inst.parents {
        let prev = assign.last().unwrap();
        assign.push(prev.iter().map(|&a| p[a]).collect());
    }
    let mut protos: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut taus: Vec<Vec<f64>> = Vec::new();
    for a in &assign {
        let m = a.iter().max().unwrap() + 1;
        let mut level_protos = Vec::new();
        let mut raw = Vec::new();
        for j in 0..m {
            let members: Vec<&Vec<f64>> = inst.samples.iter().zip(a).filter(|(_, &x)| x == j).map(|(s, _)| s).collect();
            let mut c = vec![0.0; d];
            for s in &members {
                for k in 0..d {
                    c[k] += s[k];
                }
            }
            let c = unit(c);
            let spread: f64 = members
                .iter()
                .map(|s| s.iter().zip(&c).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .sum();
            let cnt = members.len() as f64;
            raw.push(spread / (cnt * (cnt + inst.opts.epsilon).ln()));
            level_protos.push(c);
        }
        taus.push(bisect_temperatures(&raw, inst.opts.base_tau, inst.opts.tau_floor));
        protos.push(level_protos);
    }
    let sim = |v: &[f64], l: usize, j: usize| dot(v, &protos[l][j]) / taus[l][j];
    let soft_at = |v: &[f64], l: usize, target: usize| -> f64 {
        let s: Vec<f64> = (0..protos[l].len()).map(|j| sim(v, l, j)).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = s.iter().map(|x| (x - m).exp()).sum();
        (s[target] - m).exp() / denom
    };
    let nearest = |l: usize| -> usize {
        let mut best = 0;
        for j in 1..protos[l].len() {
            if sim(&inst.z, l, j) > sim(&inst.z, l, best) {
                best = j;
            }
        }
        best
    };

    let lf = levels as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; d];
    // cross entropy with the positive first: value and gradient
    let mut add_ce = |keys: &[(Vec<f64>, f64)]| {
        let logits: Vec<f64> = keys.iter().map(|(k, t)| dot(&inst.z, k) / t).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
        let denom: f64 = e.iter().sum();
        loss += -(e[0] / denom).ln() / lf;
        for (idx, ((k, t), ei)) in keys.iter().zip(&e).enumerate() {
            let coef = ei / denom - if idx == 0 { 1.0 } else { 0.0 };
            for i in 0..d {
                grad[i] += coef * k[i] / t / lf;
            }
        }
    };

    let mut instance_p = Vec::new();
    for l in 0..levels {
        let pos = nearest(l);
        let mut rng = substream(inst.stream.seed, &[tag::INSTANCE_SELECT, inst.stream.step, inst.stream.query, l as u64 + 1]);
        let mut keys = vec![(inst.z_prime.clone(), inst.tau)];
        let mut ps = Vec::new();
        for (_, k) in &inst.queue {
            let p = 1.0 - soft_at(k, l, pos);
            let u: f64 = rng.random();
            if u < p {
                keys.push((k.clone(), inst.tau));
            }
            ps.push(p);
        }
        instance_p.push(ps);
        add_ce(&keys);
    }
    let mut proto_p = Vec::new();
    for l in 0..levels {
        let pos = nearest(l);
        let mut keys = vec![(protos[l][pos].clone(), taus[l][pos])];
        let mut ps = Vec::new();
        if l + 1 == levels {
            for j in (0..protos[l].len()).filter(|&j| j != pos) {
                keys.push((protos[l][j].clone(), taus[l][j]));
                ps.push(1.0);
            }
        } else {
            let parent = inst.parents[l][pos];
            let mut rng = substream(inst.stream.seed, &[tag::PROTO_SELECT, inst.stream.step, inst.stream.query, l as u64 + 1]);
            for j in (0..protos[l].len()).filter(|&j| j != pos) {
                let p = 1.0 - soft_at(&protos[l][j], l + 1, parent);
                let u: f64 = rng.random();
                if u < p {
                    keys.push((protos[l][j].clone(), taus[l][j]));
                }
                ps.push(p);
            }
        }
        proto_p.push(ps);
        add_ce(&keys);
    }
    OracleResult { loss, grad, instance_p, proto_p }
}

/// `τ_i = max(floor, a·raw_i)` with the mean pinned to `base`, solved by bisection on `a`.
fn bisect_temperatures(raw: &[f64], base: f64, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = raw.iter().map(|&r| if r > 1e-12 { r } else { 0.0 }).collect();
    if raw.iter().all(|&r| r == 0.0) {
        return vec![base; raw.len()];
    }
    let mean = |a: f64| raw.iter().map(|&r| (a * r).max(floor)).sum::<f64>() / raw.len() as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    while mean(hi) < base {
        hi *= 2.0;
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mean(mid) < base {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    raw.iter().map(|&r| (hi * r).max(floor)).collect()
}

fn pipeline(inst: &TinyInstance) -> (LossOutput, Vec<SelectionReport>, Vec<SelectionReport>) {
    let tree = PrototypeTree::from_partition(&inst.samples, inst.level1.clone(), inst.parents.clone(), &inst.opts).unwrap();
    let snapshot: Vec<QueueKey> = inst
        .queue
        .iter()
        .map(|(id, e)| QueueKey { sample_id: *id, embedding: Embedding::from_unit(e.clone()).unwrap() })
        .collect();
    let levels = tree.num_levels();
    let instance = select_instance_negatives(&inst.z, &snapshot, &tree, &inst.stream);
    let icsc = icsc_loss(&inst.z, &inst.z_prime, &instance, &snapshot, inst.tau, levels).unwrap();
    let proto: Vec<SelectionReport> = (1..=levels).map(|l| select_proto_negatives(&inst.z, &tree, l, &inst.stream)).collect();
    let pcsc = pcsc_loss(&inst.z, &tree, &proto).unwrap();
    let weights = LossWeights { tau: inst.tau, toggles: LossToggles::FULL };
    (hcsc_loss(&icsc, &pcsc, &weights).unwrap(), instance, proto)
}

fn criterion_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let trials = 300;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let inst = tiny_instance(&mut rng);
        let oracle = brute_force(&inst);
        let (out, instance, proto) = pipeline(&inst);
        let close = |a: f64, b: f64| (a - b).abs() / a.abs().max(1.0);
        worst = worst.max(close(out.value, oracle.loss));
        for (a, b) in out.grad_z.iter().zip(&oracle.grad) {
            worst = worst.max(close(*a, *b));
        }
        for (r, ps) in instance.iter().zip(&oracle.instance_p).chain(proto.iter().zip(&oracle.proto_p)) {
            for (a, b) in r.probabilities.iter().zip(ps) {
                worst = worst.max(close(*a, b.clamp(0.0, 1.0)));
            }
        }
    }
    (worst <= 1e-10, format!("{trials} instances, max deviation {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 2. gradient suite

struct GradTally {
    checked: usize,
    good: usize,
}

impl GradTally {
    fn new() -> Self {
        Self { checked: 0, good: 0 }
    }

    fn compare(&mut self, analytic: &[f64], numeric: &[f64]) {
        for (a, n) in analytic.iter().zip(numeric) {
            if a.abs() > 1e-8 {
                self.checked += 1;
                if (a - n).abs() / a.abs().max(n.abs()) <= 1e-4 {
                    self.good += 1;
                }
            }
        }
    }

    fn rate(&self) -> f64 {
        self.good as f64 / self.checked.max(1) as f64
    }
}

const H: f64 = 1e-5;

fn fd_z(z: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..z.len())
        .map(|i| {
            let mut p = z.to_vec();
            let mut m = z.to_vec();
            p[i] += H;
            m[i] -= H;
            (f(&p) - f(&m)) / (2.0 * H)
        })
        .collect()
}

fn random_tree(rng: &mut ChaCha8Rng, d: usize) -> (Vec<Vec<f64>>, PrototypeTree) {
    let n = 12;
    let samples: Vec<Vec<f64>> = (0..n).map(|_| rand_unit(rng, d)).collect();
    let level1 = random_partition(rng, n, 6);
    let parents = vec![random_partition(rng, 6, 3), random_partition(rng, 3, 2)];
    let opts = HierarchyOptions { min_cluster_size: 1, ..HierarchyOptions::default() };
    let tree = PrototypeTree::from_partition(&samples, level1, parents, &opts).unwrap();
    (samples, tree)
}

fn random_queue(rng: &mut ChaCha8Rng, d: usize, q: usize) -> Vec<QueueKey> {
    (0..q)
        .map(|i| QueueKey { sample_id: i as u64, embedding: Embedding::from_unit(rand_unit(rng, d)).unwrap() })
        .collect()
}

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let instances = 50;
    let mut tallies: Vec<(&str, GradTally)> =
        ["info_nce", "proto_nce", "icsc", "pcsc", "encoder chain"].iter().map(|n| (*n, GradTally::new())).collect();
    for _ in 0..instances {
        let d = 6;
        let z = rand_unit(&mut rng, d);
        let pos = rand_unit(&mut rng, d);
        let negs: Vec<Vec<f64>> = (0..5).map(|_| rand_unit(&mut rng, d)).collect();
        let neg_refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        let tau = rng.random_range(0.1..0.5);
        let f = |v: &[f64]| info_nce(v, &pos, &neg_refs, tau).value;
        tallies[0].1.compare(&info_nce(&z, &pos, &neg_refs, tau).grad_z, &fd_z(&z, &f));

        let taus: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..0.5)).collect();
        let pn: Vec<(&[f64], f64)> = neg_refs.iter().copied().zip(taus[1..].iter().copied()).collect();
        let f = |v: &[f64]| proto_nce(v, (&pos, taus[0]), &pn).value;
        tallies[1].1.compare(&proto_nce(&z, (&pos, taus[0]), &pn).grad_z, &fd_z(&z, &f));

        let (_, tree) = random_tree(&mut rng, d);
        let queue = random_queue(&mut rng, d, 10);
        let stream = SelectionStream { seed: rng.random(), step: 0, query: 0 };
        let levels = tree.num_levels();
        let reports = select_instance_negatives(&z, &queue, &tree, &stream);
        let f = |v: &[f64]| icsc_loss(v, &pos, &reports, &queue, tau, levels).unwrap().value;
        tallies[2].1.compare(&icsc_loss(&z, &pos, &reports, &queue, tau, levels).unwrap().grad_z, &fd_z(&z, &f));

        let proto: Vec<SelectionReport> = (1..=levels).map(|l| select_proto_negatives(&z, &tree, l, &stream)).collect();
        let f = |v: &[f64]| pcsc_loss(v, &tree, &proto).unwrap().value;
        tallies[3].1.compare(&pcsc_loss(&z, &tree, &proto).unwrap().grad_z, &fd_z(&z, &f));

        // encoder chain: raw inputs -> MLP -> sphere -> full objective
        let config = EncoderConfig { input_dim: 5, hidden: vec![7], output_dim: d, activation: Activation::Tanh };
        let params = EncoderParams::init(&config, &mut rng).unwrap();
        let inputs: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let positives: Vec<Vec<f64>> = (0..3).map(|_| rand_unit(&mut rng, d)).collect();
        let (z0, cache) = encoder_forward(&params, &inputs).unwrap();
        let weights = LossWeights { tau, toggles: LossToggles::FULL };
        let selections: Vec<(Vec<SelectionReport>, Vec<SelectionReport>)> = z0
            .iter()
            .enumerate()
            .map(|(b, e)| {
                let s = SelectionStream { query: b as u64, ..stream };
                let zi = e.as_slice();
                (
                    select_instance_negatives(zi, &queue, &tree, &s),
                    (1..=levels).map(|l| select_proto_negatives(zi, &tree, l, &s)).collect(),
                )
            })
            .collect();
        let objective = |zb: &[f64], b: usize| -> LossOutput {
            let (inst, proto) = &selections[b];
            let icsc = icsc_loss(zb, &positives[b], inst, &queue, tau, levels).unwrap();
            let pcsc = pcsc_loss(zb, &tree, proto).unwrap();
            hcsc_loss(&icsc, &pcsc, &weights).unwrap()
        };
        let upstream: Vec<Vec<f64>> = z0.iter().enumerate().map(|(b, e)| objective(e.as_slice(), b).grad_z).collect();
        let analytic = encoder_backward(&params, &cache, &upstream).unwrap().flat();
        let total = |p: &EncoderParams| -> f64 {
            embed(p, &inputs).unwrap().iter().enumerate().map(|(b, e)| objective(e.as_slice(), b).value).sum()
        };
        let flat = params.flat();
        let numeric: Vec<f64> = (0..flat.len())
            .map(|i| {
                let mut p = params.clone();
                let mut v = flat.clone();
                v[i] += H;
                p.set_flat(&v);
                let up = total(&p);
                v[i] -= 2.0 * H;
                p.set_flat(&v);
                (up - total(&p)) / (2.0 * H)
            })
            .collect();
        tallies[4].1.compare(&analytic, &numeric);
    }
    let ok = tallies.iter().all(|(_, t)| t.checked > 0 && t.rate() >= 0.95);
    let detail = tallies
        .iter()
        .map(|(n, t)| format!("{n} {:.1}% of {}", 100.0 * t.rate(), t.checked))
        .collect::<Vec<_>>()
        .join(", ");
    (ok, format!("{instances} instances each: {detail}"))
}

// ---------------------------------------------------------------------------
// 3. selection identities

fn axis(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn criterion_selection() -> Outcome {
    let mut failures = Vec::new();
    // M prototypes on axes 1..=M, each a cluster of two identical points so every τ equals base
    let m = 4;
    let d = m + 1;
    let samples: Vec<Vec<f64>> = (0..2 * m).map(|i| axis(d, 1 + i / 2)).collect();
    let level1: Vec<usize> = (0..2 * m).map(|i| i / 2).collect();
    let opts = HierarchyOptions { min_cluster_size: 1, ..HierarchyOptions::default() };
    let tree = PrototypeTree::from_partition(&samples, level1, vec![vec![0, 0, 1, 1], vec![0, 0]], &opts).unwrap();

    // uniform similarities: a candidate orthogonal to every prototype
    let p = instance_selection_prob(&axis(d, 0), &samples[0], &tree, 1);
    if (p - (1.0 - 1.0 / m as f64)).abs() > 1e-12 {
        failures.push(format!("uniform p {p}"));
    }
    // a single-prototype level rejects everything
    let p_top = instance_selection_prob(&axis(d, 0), &samples[0], &tree, 3);
    let p_proto = proto_selection_prob(0, 1, &tree, 2).unwrap();
    if p_top != 0.0 || p_proto != 0.0 {
        failures.push(format!("single-prototype level p {p_top} / {p_proto}"));
    }
    // the top level keeps every prototype
    let stream = SelectionStream { seed: 3, step: 0, query: 0 };
    let top = select_proto_negatives(&samples[0], &tree, 3, &stream);
    let top2 = {
        let flat2 = PrototypeTree::from_partition(&samples, (0..2 * m).map(|i| i / 2).collect(), vec![], &opts).unwrap();
        select_proto_negatives(&samples[0], &flat2, 1, &stream)
    };
    if top.accepted.iter().any(|a| !a) || top2.accepted_count() != m - 1 || top2.probabilities.iter().any(|&p| p != 1.0) {
        failures.push("top level is not accept-all".into());
    }

    // Monte Carlo acceptance against the analytic probability
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (_, rtree) = random_tree(&mut rng, 4);
    let queue = random_queue(&mut rng, 4, 6);
    let z = rand_unit(&mut rng, 4);
    let draws = 10_000;
    let levels = rtree.num_levels();
    let mut hits = vec![vec![0usize; queue.len()]; levels];
    let mut probs = Vec::new();
    for step in 0..draws {
        let reports = select_instance_negatives(&z, &queue, &rtree, &SelectionStream { seed: 9, step, query: 1 });
        for (l, r) in reports.iter().enumerate() {
            r.accepted_positions().for_each(|j| hits[l][j] += 1);
        }
        if step == 0 {
            probs = reports.iter().map(|r| r.probabilities.clone()).collect();
        }
    }
    let mut worst_sigma: f64 = 0.0;
    for l in 0..levels {
        for (j, &p) in probs[l].iter().enumerate() {
            let freq = hits[l][j] as f64 / draws as f64;
            let sd = (p * (1.0 - p) / draws as f64).sqrt();
            if sd == 0.0 {
                if freq != p {
                    failures.push(format!("degenerate p {p} observed {freq}"));
                }
            } else {
                worst_sigma = worst_sigma.max((freq - p).abs() / sd);
            }
        }
    }
    if worst_sigma > 3.0 {
        failures.push(format!("Monte Carlo deviation {worst_sigma:.2} sigma"));
    }
    let detail = format!("identities checked, {draws} draws, worst deviation {worst_sigma:.2} sigma");
    (failures.is_empty(), if failures.is_empty() { detail } else { failures.join("; ") })
}

// ---------------------------------------------------------------------------
// 4. hierarchy recovery

fn criterion_hierarchy() -> Outcome {
    let mut worst: f64 = 1.0;
    let mut failures = Vec::new();
    for seed in 0..3 {
        let spec = GeneratorSpec::default();
        let ratio = spec.offset_scales.iter().cloned().fold(f64::INFINITY, f64::min) / spec.leaf_noise;
        if ratio < 5.0 {
            failures.push(format!("separation/noise ratio {ratio}"));
        }
        let ds = generate_hierarchical_mixture(&spec, seed).unwrap();
        let emb: Vec<Vec<f64>> = ds.features_f64().into_iter().map(unit).collect();
        let sizes = [24, 6, 2];
        let tree =
            build_hierarchy(&emb, &sizes, &HierarchyOptions::default(), &mut substream(seed, &[tag::CLUSTER])).unwrap();
        for l in 1..=3 {
            let (_, ami) = clustering_agreement(&tree.assignment_at(l), &ds.labels_at(l)).unwrap();
            worst = worst.min(ami);
            let lvl = tree.level(l);
            if lvl.member_count.iter().sum::<usize>() != ds.len() {
                failures.push(format!("seed {seed} level {l} loses members"));
            }
            let assignment = tree.assignment_at(l);
            let counts = (0..lvl.len()).map(|j| assignment.iter().filter(|&&a| a == j).count());
            if !counts.eq(lvl.member_count.iter().copied()) {
                failures.push(format!("seed {seed} level {l} counts disagree with assignments"));
            }
            match (&lvl.parent, l == 3) {
                (None, true) => {}
                (Some(parent), false) => {
                    let upper = tree.level(l + 1);
                    let mut sums = vec![0; upper.len()];
                    for (j, &p) in parent.iter().enumerate() {
                        if p >= upper.len() {
                            failures.push(format!("seed {seed} level {l} parent out of range"));
                            continue;
                        }
                        sums[p] += lvl.member_count[j];
                    }
                    if sums != upper.member_count {
                        failures.push(format!("seed {seed} level {l} parent counts differ"));
                    }
                }
                _ => failures.push(format!("seed {seed} level {l} has the wrong parent shape")),
            }
        }
    }
    if worst < 0.95 {
        failures.push(format!("min AMI {worst:.4}"));
    }
    let ok = failures.is_empty();
    (ok, if ok { format!("3 seeds, min per-level AMI {worst:.4}, invariants exact") } else { failures.join("; ") })
}

// ---------------------------------------------------------------------------
// 5-7. training experiments

const SEEDS: u64 = 5;

struct Run {
    outcome: TrainingOutcome,
    coarse_ami: f64,
}

fn experiment_config(seed: u64, toggles: LossToggles) -> TrainingConfig {
    TrainingConfig { seed, toggles, ..TrainingConfig::default() }
}

fn train(seed: u64, toggles: LossToggles) -> Run {
    let ds = generate_hierarchical_mixture(&GeneratorSpec::default(), seed).unwrap();
    let config = experiment_config(seed, toggles);
    let outcome = run_training(&config, &ds, RunOptions::default()).unwrap();
    let emb = online_embeddings(&outcome.state.online, &ds.features_f64()).unwrap();
    let flat_sizes = TrainingConfig { level_sizes: config.effective_level_sizes(), ..config.clone() };
    let tree = eval_tree(&flat_sizes, &emb, config.epochs).unwrap();
    let labels: Vec<Vec<usize>> = (1..=ds.depth()).map(|l| ds.labels_at(l)).collect();
    let ami = prototype_label_ami(&tree, &labels).unwrap();
    let coarse_ami = *ami.last().unwrap().last().unwrap();
    Run { outcome, coarse_ami }
}

fn criterion_ablation(full: &[Run], infonce: &[Run]) -> Outcome {
    let knn = |runs: &[Run]| median(runs.iter().map(|r| r.outcome.epochs.last().unwrap().knn).collect());
    let ami = |runs: &[Run]| median(runs.iter().map(|r| r.outcome.epochs.last().unwrap().ami[0]).collect());
    let (fk, ik, fa, ia) = (knn(full), knn(infonce), ami(full), ami(infonce));
    (
        fk >= ik && fa >= ia,
        format!("median knn full {fk:.4} vs infonce {ik:.4}; median finest AMI full {fa:.4} vs infonce {ia:.4}"),
    )
}

fn criterion_hier_vs_flat(full: &[Run], flat: &[Run]) -> Outcome {
    let h = median(full.iter().map(|r| r.coarse_ami).collect());
    let f = median(flat.iter().map(|r| r.coarse_ami).collect());
    (h >= f, format!("median coarsest-level AMI hierarchical {h:.4} vs flat {f:.4}"))
}

fn criterion_fn_trend(full: &[Run]) -> Outcome {
    let warmup = TrainingConfig::default().warmup_epochs;
    let rate = |r: &Run, epoch: u64| {
        r.outcome.epochs.iter().find(|e| e.epoch == epoch).and_then(|e| e.diagnostics.false_negative_removal())
    };
    let last = TrainingConfig::default().epochs - 1;
    let first: Vec<f64> = full.iter().filter_map(|r| rate(r, warmup)).collect();
    let fin: Vec<f64> = full.iter().filter_map(|r| rate(r, last)).collect();
    let mut min_acc: f64 = 1.0;
    let mut min_prec: f64 = 1.0;
    for r in full {
        for e in &r.outcome.epochs {
            if let Some(a) = e.diagnostics.true_negative_preservation() {
                min_acc = min_acc.min(a);
            }
            if let Some(p) = e.diagnostics.true_negative_precision() {
                min_prec = min_prec.min(p);
            }
        }
    }
    if first.len() != full.len() || fin.len() != full.len() {
        return (false, "missing diagnostics".into());
    }
    let (a, b) = (median(first), median(fin));
    (
        b > a && min_acc >= 0.5 && min_prec >= 0.5,
        format!(
            "median FN removal epoch {warmup} {a:.4} -> epoch {last} {b:.4}; min TN acceptance {min_acc:.4}, min TN precision {min_prec:.4}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. determinism and persistence

fn criterion_persistence() -> Outcome {
    let spec = GeneratorSpec { branching: vec![2, 3], depth: 2, offset_scales: vec![3.0], samples_per_leaf: 20, dim: 8, ..GeneratorSpec::default() };
    let ds = generate_hierarchical_mixture(&spec, 4).unwrap();
    let config = TrainingConfig {
        epochs: 4,
        warmup_epochs: 1,
        batch_size: 16,
        queue_capacity: 48,
        level_sizes: vec![6, 2],
        hidden: vec![16],
        embed_dim: 8,
        checkpoint_every: 1,
        hierarchy: HierarchyOptions { min_cluster_size: 3, ..HierarchyOptions::default() },
        eval: EvalConfig { knn_k_grid: vec![5, 10], diagnostic_rate: 0.5, ..EvalConfig::default() },
        warmup_mode: WarmupMode::Icsc,
        ..TrainingConfig::default()
    };
    let mut failures = Vec::new();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        run_training(&config, &ds, RunOptions { out_dir: Some(dir.path().into()), resume: None }).unwrap();
    }
    let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join(f)).unwrap();
    for f in ["metrics.csv", "diagnostics.csv", "final.ckpt"] {
        if read(&a, f) != read(&b, f) {
            failures.push(format!("{f} differs between identical runs"));
        }
    }
    let full_metrics = read(&a, "metrics.csv");
    let (_, mid) = load_checkpoint(&b.path().join("epoch_0002.ckpt")).unwrap();
    run_training(&config, &ds, RunOptions { out_dir: Some(b.path().into()), resume: Some(mid) }).unwrap();
    if read(&b, "metrics.csv") != full_metrics || read(&b, "final.ckpt") != read(&a, "final.ckpt") {
        failures.push("resume diverges from the uninterrupted run".into());
    }
    let bytes = encode_dataset(&ds).unwrap();
    let back = decode_dataset(&bytes).unwrap();
    if back != ds || encode_dataset(&back).unwrap() != bytes {
        failures.push("dataset round-trip".into());
    }
    let ckpt = read(&a, "final.ckpt");
    let (cfg, state) = decode_checkpoint(&ckpt).unwrap();
    if encode_checkpoint(&cfg, &state).unwrap() != ckpt || cfg != config {
        failures.push("checkpoint round-trip".into());
    }
    let ok = failures.is_empty();
    (ok, if ok { "identical reruns, bit-exact resume, dataset and checkpoint round-trips".into() } else { failures.join("; ") })
}

// ---------------------------------------------------------------------------
// 9. metric sanity

fn knn_oracle(train: &[Vec<f64>], train_y: &[usize], test: &[Vec<f64>], test_y: &[usize], k: usize, t: f64) -> f64 {
    let classes = train_y.iter().max().unwrap() + 1;
    let mut correct = 0;
    for (q, &y) in test.iter().zip(test_y) {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.sort_by(|&a, &b| dot(q, &train[b]).total_cmp(&dot(q, &train[a])).then(a.cmp(&b)));
        let mut votes = vec![0.0; classes];
        for &i in idx.iter().take(k.min(train.len())) {
            votes[train_y[i]] += (dot(q, &train[i]) / t).exp();
        }
        let mut best = 0;
        for c in 1..classes {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        correct += usize::from(best == y);
    }
    correct as f64 / test.len() as f64
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut failures = Vec::new();
    let a: Vec<usize> = (0..200).map(|_| rng.random_range(0..7)).collect();
    let (nmi, ami) = clustering_agreement(&a, &a).unwrap();
    if (nmi - 1.0).abs() > 1e-12 || (ami - 1.0).abs() > 1e-12 {
        failures.push(format!("identical partitions give {nmi}, {ami}"));
    }
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x: Vec<usize> = (0..1000).map(|_| rng.random_range(0..10)).collect();
        let y: Vec<usize> = (0..1000).map(|_| rng.random_range(0..5)).collect();
        worst = worst.max(clustering_agreement(&x, &y).unwrap().1.abs());
    }
    if worst > 0.05 {
        failures.push(format!("random partitions |AMI| {worst}"));
    }
    let mut knn_mismatch = 0;
    for _ in 0..50 {
        let pts: Vec<Vec<f64>> = (0..20).map(|_| rand_unit(&mut rng, 3)).collect();
        let ys: Vec<usize> = (0..20).map(|_| rng.random_range(0..3)).collect();
        let (train, test) = pts.split_at(14);
        let (train_y, test_y) = ys.split_at(14);
        let cfg = EvalConfig { knn_k_grid: vec![1, 3, 5, 20], ..EvalConfig::default() };
        let res = knn_evaluate(train, train_y, test, test_y, &cfg).unwrap();
        for &(k, acc) in &res.per_k {
            if acc != knn_oracle(train, train_y, test, test_y, k, cfg.knn_temperature) {
                knn_mismatch += 1;
            }
        }
    }
    if knn_mismatch > 0 {
        failures.push(format!("{knn_mismatch} knn mismatches"));
    }
    let ok = failures.is_empty();
    (
        ok,
        if ok { format!("identity NMI/AMI 1, max random |AMI| {worst:.4}, knn matches on 50 instances") } else { failures.join("; ") },
    )
}

fn main() {
    let mut all_ok = true;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let (ok, detail) = f();
        all_ok &= ok;
        println!(
            "criterion {n} {name}: {} ({detail}; {:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    };
    report(1, "oracle equivalence", &mut criterion_oracle);
    report(2, "gradient suite", &mut criterion_gradients);
    report(3, "selection identities", &mut criterion_selection);
    report(4, "hierarchy recovery", &mut criterion_hierarchy);

    let t0 = Instant::now();
    let flat_toggles = LossToggles { hierarchical: false, ..LossToggles::FULL };
    let full: Vec<Run> = (0..SEEDS).map(|s| train(s, LossToggles::FULL)).collect();
    let infonce: Vec<Run> = (0..SEEDS).map(|s| train(s, LossToggles::INFONCE_ONLY)).collect();
    let flat: Vec<Run> = (0..SEEDS).map(|s| train(s, flat_toggles)).collect();
    println!("training runs: {} in {:.1}s", 3 * SEEDS, t0.elapsed().as_secs_f64());
    report(5, "ablation analog", &mut || criterion_ablation(&full, &infonce));
    report(6, "hierarchical vs flat prototypes", &mut || criterion_hier_vs_flat(&full, &flat));
    report(7, "false-negative removal trend", &mut || criterion_fn_trend(&full));
    report(8, "determinism and persistence", &mut criterion_persistence);
    report(9, "metric sanity", &mut criterion_metrics);
    if !all_ok {
        std::process::exit(1);
    }
}
