//! Contrastive losses with analytic gradients with respect to the query embedding.
//!
//! Keys, positives and prototypes are constants; only `z` receives gradient. Gradients
//! live in the ambient space and still need the encoder's tangent projection.

use crate::encoder::QueueKey;
use crate::error::{HcscError, Result};
use crate::hierarchy::PrototypeTree;
use crate::selection::{SelectionKind, SelectionReport};
use crate::vector::{axpy, dot, log_sum_exp, softmax};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_z: Vec<f64>,
}

impl LossOutput {
    pub fn zero(dim: usize) -> Self {
        Self {
            value: 0.0,
            grad_z: vec![0.0; dim],
        }
    }

    fn accumulate(&mut self, other: &LossOutput, weight: f64) {
        self.value += weight * other.value;
        axpy(weight, &other.grad_z, &mut self.grad_z);
    }
}

/// Which objective terms and selection schemes are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    /// Instance-wise loss (IL).
    pub instance_loss: bool,
    /// Prototypical loss (PL).
    pub proto_loss: bool,
    /// Instance-negative selection (IS).
    pub instance_selection: bool,
    /// Prototype-negative selection (PS).
    pub proto_selection: bool,
    /// Multi-level prototypes (HP); off collapses the hierarchy into one level.
    pub hierarchical: bool,
}

impl LossToggles {
    pub const FULL: Self = Self {
        instance_loss: true,
        proto_loss: true,
        instance_selection: true,
        proto_selection: true,
        hierarchical: true,
    };

    /// Plain InfoNCE over the whole queue.
    pub const INFONCE_ONLY: Self = Self {
        instance_loss: true,
        proto_loss: false,
        instance_selection: false,
        proto_selection: false,
        hierarchical: false,
    };

    pub fn validate(&self) -> Result<()> {
        if self.proto_selection && !self.proto_loss {
            return Err(HcscError::config("prototype selection requires the prototypical loss"));
        }
        if self.instance_selection && !self.instance_loss {
            return Err(HcscError::config("instance selection requires the instance-wise loss"));
        }
        if !self.instance_loss && !self.proto_loss {
            return Err(HcscError::config("at least one loss term must be enabled"));
        }
        Ok(())
    }
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Instance-wise temperature.
    pub tau: f64,
    pub toggles: LossToggles,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tau: 0.2,
            toggles: LossToggles::FULL,
        }
    }
}

/// `−log softmax(a)_0` for logits `a_k = z·k_k / τ_k`, the positive listed first.
fn softmax_cross_entropy(z: &[f64], keys: &[(&[f64], f64)]) -> LossOutput {
    let logits: Vec<f64> = keys.iter().map(|(k, t)| dot(z, k) / t).collect();
    let value = (log_sum_exp(&logits) - logits[0]).max(0.0);
    let weights = softmax(&logits);
    let mut grad_z = vec![0.0; z.len()];
    for ((k, t), w) in keys.iter().zip(&weights) {
        axpy(w / t, k, &mut grad_z);
    }
    let (pos, t0) = keys[0];
    axpy(-1.0 / t0, pos, &mut grad_z);
    LossOutput { value, grad_z }
}

/// InfoNCE of query `z` against positive `z_pos` and `negatives` at temperature `tau`.
pub fn info_nce(z: &[f64], z_pos: &[f64], negatives: &[&[f64]], tau: f64) -> LossOutput {
    let keys: Vec<(&[f64], f64)> = std::iter::once(z_pos)
        .chain(negatives.iter().copied())
        .map(|k| (k, tau))
        .collect();
    softmax_cross_entropy(z, &keys)
}

/// ProtoNCE with per-prototype temperatures.
pub fn proto_nce(z: &[f64], positive: (&[f64], f64), negatives: &[(&[f64], f64)]) -> LossOutput {
    let keys: Vec<(&[f64], f64)> = std::iter::once(positive)
        .chain(negatives.iter().copied())
        .collect();
    softmax_cross_entropy(z, &keys)
}

/// Level-averaged InfoNCE, each level with its own accepted queue subset.
pub fn icsc_loss(
    z: &[f64],
    z_prime: &[f64],
    reports: &[SelectionReport],
    snapshot: &[QueueKey],
    tau: f64,
    levels: usize,
) -> Result<LossOutput> {
    if reports.len() != levels || levels == 0 {
        return Err(HcscError::contract(format!(
            "{} instance reports for {levels} levels",
            reports.len()
        )));
    }
    let mut total = LossOutput::zero(z.len());
    for (l, r) in reports.iter().enumerate() {
        if r.kind != SelectionKind::Instance || r.level != l + 1 || r.accepted.len() != snapshot.len() {
            return Err(HcscError::contract(format!("instance report {} does not match level {}", r.level, l + 1)));
        }
        let negatives: Vec<&[f64]> = r
            .accepted_positions()
            .map(|i| snapshot[i].embedding.as_slice())
            .collect();
        total.accumulate(&info_nce(z, z_prime, &negatives, tau), 1.0 / levels as f64);
    }
    Ok(total)
}

/// Level-averaged ProtoNCE against each level's nearest prototype.
pub fn pcsc_loss(z: &[f64], tree: &PrototypeTree, reports: &[SelectionReport]) -> Result<LossOutput> {
    let levels = tree.num_levels();
    if reports.len() != levels {
        return Err(HcscError::contract(format!(
            "{} prototype reports for {levels} levels",
            reports.len()
        )));
    }
    let mut total = LossOutput::zero(z.len());
    for (l, r) in reports.iter().enumerate() {
        let level = l + 1;
        let lvl = tree.level(level);
        let pos = tree.nearest_prototype(z, level);
        if r.kind != SelectionKind::Prototype || r.level != level {
            return Err(HcscError::contract(format!("prototype report {} does not match level {level}", r.level)));
        }
        if r.candidates.iter().any(|&c| c as usize == pos || c as usize >= lvl.len()) {
            return Err(HcscError::contract(format!("report for level {level} lists an invalid candidate")));
        }
        if level == levels && (r.accepted_count() != lvl.len() - 1 || r.candidates.len() != lvl.len() - 1) {
            return Err(HcscError::contract("top-level report must contain every non-positive prototype"));
        }
        let negatives: Vec<(&[f64], f64)> = r
            .accepted_positions()
            .map(|i| {
                let j = r.candidates[i] as usize;
                (lvl.prototypes[j].as_slice(), lvl.tau[j])
            })
            .collect();
        let out = proto_nce(z, (&lvl.prototypes[pos], lvl.tau[pos]), &negatives);
        total.accumulate(&out, 1.0 / levels as f64);
    }
    Ok(total)
}

/// Unweighted sum of the enabled terms.
pub fn hcsc_loss(icsc: &LossOutput, pcsc: &LossOutput, weights: &LossWeights) -> Result<LossOutput> {
    weights.toggles.validate()?;
    let dim = icsc.grad_z.len().max(pcsc.grad_z.len());
    let mut total = LossOutput::zero(dim);
    if weights.toggles.instance_loss {
        total.accumulate(icsc, 1.0);
    }
    if weights.toggles.proto_loss {
        total.accumulate(pcsc, 1.0);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::HierarchyLevel;
    use crate::rng::substream;
    use crate::selection::{accept_all_instance, accept_all_proto};
    use crate::vector::{normalize_in_place, Embedding};
    use proptest::prelude::*;
    use rand::Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let mut v = v;
        normalize_in_place(&mut v);
        v
    }

    fn rand_unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
        unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central differences on the ambient coordinates of z.
    fn fd_grad(f: impl Fn(&[f64]) -> f64, z: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..z.len())
            .map(|i| {
                let mut a = z.to_vec();
                let mut b = z.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_grad_close(analytic: &[f64], fd: &[f64], tol: f64) {
        for (a, f) in analytic.iter().zip(fd) {
            let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-8);
            assert!(rel <= tol || (a - f).abs() < 1e-10, "{a} vs {f}");
        }
    }

    #[test]
    fn empty_negatives_give_zero() {
        let z = unit(vec![1.0, 2.0]);
        let out = info_nce(&z, &unit(vec![2.0, 1.0]), &[], 0.2);
        assert_eq!(out.value, 0.0);
        assert!(out.grad_z.iter().all(|&g| g.abs() < 1e-15));
        let p = proto_nce(&z, (&[1.0, 0.0], 0.3), &[]);
        assert_eq!(p.value, 0.0);
    }

    #[test]
    fn symmetric_negative_gives_ln2() {
        let z = vec![1.0, 0.0];
        let pos = unit(vec![1.0, 1.0]);
        let neg = unit(vec![1.0, -1.0]);
        let out = info_nce(&z, &pos, &[&neg], 0.2);
        assert!((out.value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        let mut rng = substream(1, &[]);
        for _ in 0..20 {
            let z = rand_unit(&mut rng, 6);
            let pos = rand_unit(&mut rng, 6);
            let negs: Vec<Vec<f64>> = (0..5).map(|_| rand_unit(&mut rng, 6)).collect();
            let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
            let out = info_nce(&z, &pos, &refs, 0.2);
            let fd = fd_grad(|v| info_nce(v, &pos, &refs, 0.2).value, &z);
            assert_grad_close(&out.grad_z, &fd, 1e-5);
        }
    }

    #[test]
    fn proto_nce_gradient_matches_finite_differences() {
        let mut rng = substream(2, &[]);
        for _ in 0..20 {
            let z = rand_unit(&mut rng, 5);
            let protos: Vec<Vec<f64>> = (0..4).map(|_| rand_unit(&mut rng, 5)).collect();
            let taus: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..0.6)).collect();
            let negs: Vec<(&[f64], f64)> = (1..4).map(|i| (protos[i].as_slice(), taus[i])).collect();
            let out = proto_nce(&z, (&protos[0], taus[0]), &negs);
            let fd = fd_grad(|v| proto_nce(v, (&protos[0], taus[0]), &negs).value, &z);
            assert_grad_close(&out.grad_z, &fd, 1e-5);
        }
    }

    #[test]
    fn equal_temperatures_reduce_proto_nce_to_info_nce() {
        let mut rng = substream(3, &[]);
        let z = rand_unit(&mut rng, 4);
        let c: Vec<Vec<f64>> = (0..3).map(|_| rand_unit(&mut rng, 4)).collect();
        let a = proto_nce(&z, (&c[0], 0.3), &[(&c[1], 0.3), (&c[2], 0.3)]);
        let b = info_nce(&z, &c[0], &[&c[1], &c[2]], 0.3);
        assert!((a.value - b.value).abs() < 1e-12);
        for (x, y) in a.grad_z.iter().zip(&b.grad_z) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn snapshot(vs: &[Vec<f64>]) -> Vec<QueueKey> {
        vs.iter()
            .enumerate()
            .map(|(i, v)| QueueKey {
                sample_id: i as u64,
                embedding: Embedding::from_unit(v.clone()).unwrap(),
            })
            .collect()
    }

    #[test]
    fn icsc_reductions() {
        let mut rng = substream(4, &[]);
        let z = rand_unit(&mut rng, 4);
        let zp = rand_unit(&mut rng, 4);
        let keys: Vec<Vec<f64>> = (0..6).map(|_| rand_unit(&mut rng, 4)).collect();
        let snap = snapshot(&keys);
        let reports = accept_all_instance(&snap, 1, 0);
        let icsc = icsc_loss(&z, &zp, &reports, &snap, 0.2, 1).unwrap();
        let refs: Vec<&[f64]> = keys.iter().map(Vec::as_slice).collect();
        let plain = info_nce(&z, &zp, &refs, 0.2);
        assert!((icsc.value - plain.value).abs() < 1e-12);

        let mut none = accept_all_instance(&snap, 3, 0);
        for r in &mut none {
            r.accepted.iter_mut().for_each(|a| *a = false);
        }
        assert_eq!(icsc_loss(&z, &zp, &none, &snap, 0.2, 3).unwrap().value, 0.0);
        assert!(icsc_loss(&z, &zp, &none, &snap, 0.2, 2).is_err());
    }

    #[test]
    fn icsc_matches_hand_enumeration() {
        // 2 levels, 3 candidates, accepts {0, 2} and {1}
        let mut rng = substream(5, &[]);
        let z = rand_unit(&mut rng, 3);
        let zp = rand_unit(&mut rng, 3);
        let keys: Vec<Vec<f64>> = (0..3).map(|_| rand_unit(&mut rng, 3)).collect();
        let snap = snapshot(&keys);
        let mut reports = accept_all_instance(&snap, 2, 0);
        reports[0].accepted = vec![true, false, true];
        reports[1].accepted = vec![false, true, false];
        let out = icsc_loss(&z, &zp, &reports, &snap, 0.2, 2).unwrap();
        let e = |v: &[f64]| (dot(&z, v) / 0.2).exp();
        let l1 = -(e(&zp) / (e(&zp) + e(&keys[0]) + e(&keys[2]))).ln();
        let l2 = -(e(&zp) / (e(&zp) + e(&keys[1]))).ln();
        assert!((out.value - 0.5 * (l1 + l2)).abs() < 1e-10);
    }

    fn single_level_tree(protos: Vec<Vec<f64>>, tau: Vec<f64>) -> PrototypeTree {
        let m = protos.len();
        PrototypeTree {
            levels: vec![HierarchyLevel {
                prototypes: protos,
                raw_tau: tau.clone(),
                tau,
                member_count: vec![1; m],
                parent: None,
            }],
            level1_assignment: (0..m).collect(),
            epoch_stamp: 0,
            construction_assignment: vec![],
        }
    }

    #[test]
    fn pcsc_reductions() {
        let z = unit(vec![1.0, 0.2]);
        let t = single_level_tree(vec![vec![1.0, 0.0]], vec![0.2]);
        let r = accept_all_proto(&z, &t, 0);
        assert_eq!(pcsc_loss(&z, &t, &r).unwrap().value, 0.0);

        let c1 = unit(vec![0.0, 1.0]);
        let t = single_level_tree(vec![vec![1.0, 0.0], c1.clone()], vec![0.2, 0.2]);
        let r = accept_all_proto(&z, &t, 0);
        let p = pcsc_loss(&z, &t, &r).unwrap();
        let i = info_nce(&z, &[1.0, 0.0], &[&c1], 0.2);
        assert!((p.value - i.value).abs() < 1e-12);
    }

    #[test]
    fn pcsc_rejects_incomplete_top_level() {
        let z = unit(vec![1.0, 0.2]);
        let t = single_level_tree(vec![vec![1.0, 0.0], vec![0.0, 1.0], unit(vec![-1.0, 1.0])], vec![0.2; 3]);
        let mut r = accept_all_proto(&z, &t, 0);
        r[0].accepted[1] = false;
        assert!(matches!(pcsc_loss(&z, &t, &r), Err(HcscError::Contract(_))));
    }

    #[test]
    fn hcsc_toggle_behaviour() {
        let a = LossOutput { value: 1.5, grad_z: vec![1.0, 0.0] };
        let b = LossOutput { value: 0.5, grad_z: vec![0.0, 2.0] };
        let mut w = LossWeights::default();
        assert_eq!(hcsc_loss(&a, &b, &w).unwrap().value, 2.0);
        w.toggles.proto_loss = false;
        w.toggles.proto_selection = false;
        assert_eq!(hcsc_loss(&a, &b, &w).unwrap(), a);
        let mut w = LossWeights::default();
        w.toggles.instance_loss = false;
        w.toggles.instance_selection = false;
        assert_eq!(hcsc_loss(&a, &b, &w).unwrap(), b);
        let zero = LossOutput::zero(2);
        assert_eq!(hcsc_loss(&zero, &zero, &LossWeights::default()).unwrap().value, 0.0);
        let mut bad = LossWeights::default();
        bad.toggles.proto_loss = false;
        assert!(matches!(hcsc_loss(&a, &b, &bad), Err(HcscError::Config(_))));
        assert!(LossToggles::INFONCE_ONLY.validate().is_ok());
        assert_eq!(LossWeights::default().tau, 0.2);
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(seed in any::<u64>(), n in 0usize..6, tau in 0.05f64..1.0) {
            let mut rng = substream(seed, &[]);
            let z = rand_unit(&mut rng, 3);
            let pos = rand_unit(&mut rng, 3);
            let negs: Vec<Vec<f64>> = (0..n).map(|_| rand_unit(&mut rng, 3)).collect();
            let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
            let out = info_nce(&z, &pos, &refs, tau);
            prop_assert!(out.value >= 0.0);
            prop_assert!(out.grad_z.iter().all(|g| g.is_finite()));
        }

        #[test]
        fn projected_gradient_is_tangent(seed in any::<u64>()) {
            let mut rng = substream(seed, &[]);
            let z = rand_unit(&mut rng, 5);
            let pos = rand_unit(&mut rng, 5);
            let negs: Vec<Vec<f64>> = (0..4).map(|_| rand_unit(&mut rng, 5)).collect();
            let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
            let g = info_nce(&z, &pos, &refs, 0.2).grad_z;
            let t = crate::encoder::project_to_tangent(&z, &g);
            prop_assert!(dot(&z, &t).abs() < 1e-9);
        }
    }
}
