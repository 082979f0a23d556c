//! Differentiable data-augmentation policy.
//!
//! A policy holds `L` sub-policies of `K` stages. Each stage owns, per
//! candidate operation, a selection logit `z`, an application probability
//! `p` and a magnitude `mu` (both box-constrained to `[0,1]` at read time).
//! During search a stage transforms a batch into a Gumbel-softmax-weighted
//! mixture over all operations, each gated by a relaxed Bernoulli, so
//! gradients reach every `z`, `p` and `mu`. At inference the stage samples
//! one operation from the noise-free categorical and applies it with a hard
//! coin flip.

pub mod image_ops;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{softmax_with_temp, Tape};
use crate::tensor::Tensor;

pub use image_ops::{apply_image_op, AugOp};

/// Learnable parameters of one augmentation stage. Raw values are
/// unconstrained reals; `p` and `mu` are clamped into `[0,1]` when read.
#[derive(Debug, Clone, PartialEq)]
pub struct OperationStage<F> {
    pub z: Vec<F>,
    pub p: Vec<F>,
    pub mu: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubPolicy<F> {
    pub stages: Vec<OperationStage<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy<F> {
    pub eta: F,
    pub op_set: Vec<AugOp>,
    pub sub_policies: Vec<SubPolicy<F>>,
}

impl<F: Scalar> Policy<F> {
    /// Fresh policy: uniform selection (`z = 0`), half-open gates
    /// (`p = 0.5`) and identity-leaning magnitudes (`mu = 0.5`).
    pub fn new(l: usize, k: usize, op_set: Vec<AugOp>, eta: F) -> Result<Self> {
        if l == 0 || k == 0 || op_set.is_empty() {
            return Err(Error::InvalidArg(format!(
                "policy needs L, K, #O >= 1 (got L={l}, K={k}, #O={})",
                op_set.len()
            )));
        }
        let n = op_set.len();
        let stage = || OperationStage {
            z: vec![F::zero(); n],
            p: vec![F::fromf(0.5); n],
            mu: vec![F::fromf(0.5); n],
        };
        let sub_policies = (0..l)
            .map(|_| SubPolicy { stages: (0..k).map(|_| stage()).collect() })
            .collect();
        Ok(Policy { eta, op_set, sub_policies })
    }

    pub fn n_sub_policies(&self) -> usize {
        self.sub_policies.len()
    }

    pub fn n_stages(&self) -> usize {
        self.sub_policies.first().map_or(0, |sp| sp.stages.len())
    }

    pub fn n_ops(&self) -> usize {
        self.op_set.len()
    }

    /// Total learnable values: K * L * (#O * 3).
    pub fn param_count(&self) -> usize {
        self.sub_policies
            .iter()
            .flat_map(|sp| sp.stages.iter())
            .map(|s| s.z.len() + s.p.len() + s.mu.len())
            .sum()
    }

    /// Noise-free selection distribution, one row per (sub-policy, stage):
    /// `softmax(z / eta)`. Consumes no randomness.
    pub fn distribution_snapshot(&self) -> Vec<Vec<F>> {
        self.sub_policies
            .iter()
            .flat_map(|sp| sp.stages.iter())
            .map(|s| softmax_with_temp(&s.z, self.eta))
            .collect()
    }

    /// Raw selection logits, one row per (sub-policy, stage).
    pub fn z_snapshot(&self) -> Vec<Vec<F>> {
        self.sub_policies
            .iter()
            .flat_map(|sp| sp.stages.iter())
            .map(|s| s.z.clone())
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let n = self.op_set.len();
        let k = self.n_stages();
        if self.eta <= F::zero() {
            return Err(Error::InvalidArg("policy temperature must be positive".into()));
        }
        for (li, sp) in self.sub_policies.iter().enumerate() {
            if sp.stages.len() != k {
                return Err(Error::InvalidArg(format!(
                    "sub-policy {li} has {} stages, expected {k}",
                    sp.stages.len()
                )));
            }
            for (ki, s) in sp.stages.iter().enumerate() {
                if s.z.len() != n || s.p.len() != n || s.mu.len() != n {
                    return Err(Error::InvalidArg(format!(
                        "stage ({li},{ki}) parameter lengths {}/{}/{} != #O = {n}",
                        s.z.len(),
                        s.p.len(),
                        s.mu.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// JSON serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct StageDoc<F> {
    z: Vec<F>,
    p: Vec<F>,
    mu: Vec<F>,
}

#[derive(Serialize, Deserialize)]
struct PolicyDoc<F> {
    eta: F,
    op_set: Vec<String>,
    sub_policies: Vec<Vec<StageDoc<F>>>,
}

impl<F: Scalar> Policy<F> {
    pub fn to_json(&self) -> Result<String> {
        let doc = PolicyDoc {
            eta: self.eta,
            op_set: self.op_set.iter().map(|o| o.name().to_string()).collect(),
            sub_policies: self
                .sub_policies
                .iter()
                .map(|sp| {
                    sp.stages
                        .iter()
                        .map(|s| StageDoc { z: s.z.clone(), p: s.p.clone(), mu: s.mu.clone() })
                        .collect()
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PolicyDoc<F> = serde_json::from_str(text)?;
        let op_set = doc
            .op_set
            .iter()
            .map(|n| AugOp::parse(n))
            .collect::<Result<Vec<_>>>()?;
        let policy = Policy {
            eta: doc.eta,
            op_set,
            sub_policies: doc
                .sub_policies
                .into_iter()
                .map(|sp| SubPolicy {
                    stages: sp
                        .into_iter()
                        .map(|s| OperationStage { z: s.z, p: s.p, mu: s.mu })
                        .collect(),
                })
                .collect(),
        };
        policy.validate()?;
        Ok(policy)
    }
}

// ---------------------------------------------------------------------------
// tape registration and training-mode application
// ---------------------------------------------------------------------------

/// Tape leaves for one stage's parameters.
pub struct StageLeaves<F> {
    pub z: Tensor<F>,
    pub p: Tensor<F>,
    pub mu: Tensor<F>,
}

/// Tape leaves for the whole policy, indexed `[sub_policy][stage]`.
pub struct PolicyLeaves<F> {
    pub stages: Vec<Vec<StageLeaves<F>>>,
}

/// Registers every policy parameter as a gradient-requiring leaf, in a
/// fixed order (sub-policy major, stage minor; z then p then mu).
pub fn register_policy<F: Scalar>(tape: &mut Tape<F>, policy: &Policy<F>) -> Result<PolicyLeaves<F>> {
    let n = policy.n_ops();
    let mut stages = Vec::with_capacity(policy.n_sub_policies());
    for sp in &policy.sub_policies {
        let mut row = Vec::with_capacity(sp.stages.len());
        for s in &sp.stages {
            row.push(StageLeaves {
                z: tape.leaf(vec![n], s.z.clone())?,
                p: tape.leaf(vec![n], s.p.clone())?,
                mu: tape.leaf(vec![n], s.mu.clone())?,
            });
        }
        stages.push(row);
    }
    Ok(PolicyLeaves { stages })
}

/// Relaxed training-mode application of one stage:
/// `X' = sum_n w_n * (b_n * O_n(X; mu_n) + (1 - b_n) * X)` with
/// `w = gumbel_softmax(z, eta)` and `b_n = relaxed_bernoulli(p_n, eta)`.
pub fn apply_stage_train<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    stage: &StageLeaves<F>,
    op_set: &[AugOp],
    eta: F,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    let weights = tape.gumbel_softmax_sample(&stage.z, eta, rng)?;
    let mut acc: Option<Tensor<F>> = None;
    for (n, &op) in op_set.iter().enumerate() {
        let p_raw = tape.index(&stage.p, n)?;
        let p = tape.clamp(&p_raw, F::zero(), F::one())?;
        let gate = tape.relaxed_bernoulli(&p, eta, rng)?;
        let mu_raw = tape.index(&stage.mu, n)?;
        let mu = tape.clamp(&mu_raw, F::zero(), F::one())?;
        let transformed = apply_image_op(tape, op, x, &mu, rng)?;
        let gated = tape.blend(x, &transformed, &gate)?;
        let wn = tape.index(&weights, n)?;
        let term = tape.scale_by(&gated, &wn)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(&prev, &term)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidArg("stage with empty operation set".into()))
}

/// Sequential composition of the K stages of one sub-policy.
pub fn apply_subpolicy_train<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    stages: &[StageLeaves<F>],
    op_set: &[AugOp],
    eta: F,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    let mut cur = x.clone();
    for stage in stages {
        cur = apply_stage_train(tape, &cur, stage, op_set, eta, rng)?;
    }
    Ok(cur)
}

/// Training-mode policy application: one sub-policy chosen uniformly at
/// random for the whole minibatch. Returns the transformed batch and the
/// chosen index (for logging).
pub fn apply_policy_train<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    policy: &Policy<F>,
    leaves: &PolicyLeaves<F>,
    rng: &mut Rng,
) -> Result<(Tensor<F>, usize)> {
    if policy.sub_policies.is_empty() {
        return Err(Error::InvalidArg("policy has no sub-policies".into()));
    }
    let idx = rng.below(policy.n_sub_policies());
    let out = apply_subpolicy_train(tape, x, &leaves.stages[idx], &policy.op_set, policy.eta, rng)?;
    Ok((out, idx))
}

/// Inference-mode policy application: uniform sub-policy choice, then per
/// stage one operation sampled from `Cat(softmax(z / eta))` and applied
/// (hard) with probability `p`. Runs off-tape; no gradients.
pub fn apply_policy_infer<F: Scalar>(
    x: &Tensor<F>,
    policy: &Policy<F>,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    if policy.sub_policies.is_empty() {
        return Err(Error::InvalidArg("policy has no sub-policies".into()));
    }
    let mut scratch = Tape::new();
    let idx = rng.below(policy.n_sub_policies());
    let mut cur = x.detach();
    for stage in &policy.sub_policies[idx].stages {
        let probs: Vec<f64> = softmax_with_temp(&stage.z, policy.eta)
            .iter()
            .map(|v| v.f64())
            .collect();
        let n = rng.categorical(&probs);
        let p = stage.p[n].f64().clamp(0.0, 1.0);
        let coin = rng.uniform();
        if coin < p {
            let mu = Tensor::scalar(F::fromf(stage.mu[n].f64().clamp(0.0, 1.0)));
            cur = apply_image_op(&mut scratch, policy.op_set[n], &cur, &mu, rng)?;
        }
    }
    debug_assert_eq!(scratch.num_nodes(), 0, "inference must not record tape nodes");
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(b: usize, seed: u64) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        let mut vals = vec![0.0f32; b * 3 * 6 * 6];
        rng.fill_uniform(0.1, 0.9, &mut vals);
        Tensor::from_vec(vec![b, 3, 6, 6], vals).unwrap()
    }

    #[test]
    fn param_count_is_k_l_ops_times_three() {
        let policy = Policy::<f32>::new(10, 2, AugOp::DEFAULT_SET.to_vec(), 1.0).unwrap();
        assert_eq!(policy.param_count(), 2 * 10 * 16 * 3);
        assert_eq!(policy.param_count(), 960);
    }

    #[test]
    fn fresh_snapshot_is_uniform_and_pure() {
        let policy = Policy::<f32>::new(3, 2, AugOp::DEFAULT_SET.to_vec(), 1.0).unwrap();
        let snap = policy.distribution_snapshot();
        assert_eq!(snap.len(), 6);
        for row in &snap {
            for v in row {
                assert!((v - 1.0 / 16.0).abs() < 1e-6);
            }
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
        // purity: identical on repeated calls
        let again = policy.distribution_snapshot();
        assert_eq!(snap, again);
    }

    #[test]
    fn stage_with_zero_probabilities_is_nearly_identity() {
        let mut policy = Policy::<f32>::new(1, 1, AugOp::DEFAULT_SET.to_vec(), 1.0).unwrap();
        for s in &mut policy.sub_policies[0].stages {
            s.p = vec![0.0; 16];
        }
        let x = test_image(2, 5);
        let mut tape = Tape::new();
        let leaves = register_policy(&mut tape, &policy).unwrap();
        let mut rng = Rng::new(40);
        let y = apply_stage_train(
            &mut tape,
            &x,
            &leaves.stages[0][0],
            &policy.op_set,
            1.0,
            &mut rng,
        )
        .unwrap();
        assert!(x.max_abs_diff(&y) < 1e-3, "deviation {}", x.max_abs_diff(&y));
    }

    #[test]
    fn single_op_full_probability_applies_that_op() {
        let mut policy = Policy::<f32>::new(1, 1, vec![AugOp::Invert], 1.0).unwrap();
        policy.sub_policies[0].stages[0].p = vec![1.0];
        let x = test_image(1, 6);
        let mut tape = Tape::new();
        let leaves = register_policy(&mut tape, &policy).unwrap();
        let mut rng = Rng::new(41);
        let y = apply_stage_train(
            &mut tape,
            &x,
            &leaves.stages[0][0],
            &policy.op_set,
            1.0,
            &mut rng,
        )
        .unwrap();
        let mut worst = 0.0f32;
        for (xv, yv) in x.data().iter().zip(y.data()) {
            worst = worst.max((yv - (1.0 - xv)).abs());
        }
        assert!(worst < 1e-3, "deviation from 1-x: {worst}");
    }

    #[test]
    fn subpolicy_with_one_stage_equals_stage() {
        let policy = Policy::<f32>::new(1, 1, AugOp::DEFAULT_SET.to_vec(), 1.0).unwrap();
        let x = test_image(2, 7);
        let run_stage = |as_subpolicy: bool| {
            let mut tape = Tape::new();
            let leaves = register_policy(&mut tape, &policy).unwrap();
            let mut rng = Rng::new(55);
            let y = if as_subpolicy {
                apply_subpolicy_train(&mut tape, &x, &leaves.stages[0], &policy.op_set, 1.0, &mut rng)
                    .unwrap()
            } else {
                apply_stage_train(&mut tape, &x, &leaves.stages[0][0], &policy.op_set, 1.0, &mut rng)
                    .unwrap()
            };
            y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run_stage(true), run_stage(false));
    }

    #[test]
    fn two_closed_stages_keep_input_within_2e3() {
        let mut policy = Policy::<f32>::new(1, 2, AugOp::DEFAULT_SET.to_vec(), 1.0).unwrap();
        for s in &mut policy.sub_policies[0].stages {
            s.p = vec![0.0; 16];
        }
        let x = test_image(2, 8);
        let mut tape = Tape::new();
        let leaves = register_policy(&mut tape, &policy).unwrap();
        let mut rng = Rng::new(42);
        let y = apply_subpolicy_train(&mut tape, &x, &leaves.stages[0], &policy.op_set, 1.0, &mut rng)
            .unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(x.max_abs_diff(&y) < 2e-3);
    }

    #[test]
    fn policy_train_single_subpolicy_always_index_zero() {
        let policy = Policy::<f32>::new(1, 1, vec![AugOp::Invert], 1.0).unwrap();
        let x = test_image(1, 9);
        for seed in 0..5 {
            let mut tape = Tape::new();
            let leaves = register_policy(&mut tape, &policy).unwrap();
            let mut rng = Rng::new(seed);
            let (_, idx) = apply_policy_train(&mut tape, &x, &policy, &leaves, &mut rng).unwrap();
            assert_eq!(idx, 0);
        }
    }

    #[test]
    fn policy_train_choice_is_uniform_over_subpolicies() {
        let policy = Policy::<f32>::new(10, 1, vec![AugOp::Invert], 1.0).unwrap();
        let mut counts = [0usize; 10];
        let mut rng = Rng::new(1234);
        for _ in 0..10_000 {
            counts[rng.below(policy.n_sub_policies())] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.08..=0.12).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn policy_train_index_sequence_deterministic() {
        let policy = Policy::<f32>::new(5, 1, vec![AugOp::Invert], 1.0).unwrap();
        let x = test_image(1, 10);
        let run = || {
            let mut out = Vec::new();
            let mut rng = Rng::new(77);
            for _ in 0..20 {
                let mut tape = Tape::new();
                let leaves = register_policy(&mut tape, &policy).unwrap();
                let (_, idx) = apply_policy_train(&mut tape, &x, &policy, &leaves, &mut rng).unwrap();
                out.push(idx);
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn infer_peaked_logits_select_that_op() {
        // z peaked on invert with p = 1: output equals 1 - x almost always
        let mut policy = Policy::<f32>::new(1, 1, AugOp::DEFAULT_SET.to_vec(), 1.0).unwrap();
        let invert_pos = policy.op_set.iter().position(|o| *o == AugOp::Invert).unwrap();
        policy.sub_policies[0].stages[0].z[invert_pos] = 20.0;
        policy.sub_policies[0].stages[0].p = vec![1.0; 16];
        let x = test_image(1, 11);
        let mut rng = Rng::new(3);
        let mut inverted = 0usize;
        for _ in 0..1000 {
            let y = apply_policy_infer(&x, &policy, &mut rng).unwrap();
            let mut is_invert = true;
            for (xv, yv) in x.data().iter().zip(y.data()) {
                if (yv - (1.0 - xv)).abs() > 1e-6 {
                    is_invert = false;
                    break;
                }
            }
            if is_invert {
                inverted += 1;
            }
        }
        assert!(inverted >= 999, "invert chosen {inverted}/1000 times");
    }

    #[test]
    fn infer_zero_probability_leaves_input_unchanged() {
        let mut policy = Policy::<f32>::new(2, 2, AugOp::DEFAULT_SET.to_vec(), 1.0).unwrap();
        for sp in &mut policy.sub_policies {
            for s in &mut sp.stages {
                s.p = vec![0.0; 16];
            }
        }
        let x = test_image(2, 12);
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let y = apply_policy_infer(&x, &policy, &mut rng).unwrap();
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn infer_output_stays_in_unit_range() {
        let mut policy = Policy::<f32>::new(4, 2, AugOp::DEFAULT_SET.to_vec(), 1.0).unwrap();
        let mut prng = Rng::new(5);
        for sp in &mut policy.sub_policies {
            for s in &mut sp.stages {
                prng.fill_uniform(-2.0, 2.0, &mut s.z);
                prng.fill_uniform(0.0, 1.0, &mut s.p);
                prng.fill_uniform(0.0, 1.0, &mut s.mu);
            }
        }
        let x = test_image(2, 13);
        let mut rng = Rng::new(6);
        for _ in 0..50 {
            let y = apply_policy_infer(&x, &policy, &mut rng).unwrap();
            assert_eq!(y.shape(), x.shape());
            for &v in y.data() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut policy = Policy::<f32>::new(3, 2, AugOp::DEFAULT_SET.to_vec(), 0.7).unwrap();
        let mut rng = Rng::new(20);
        for sp in &mut policy.sub_policies {
            for s in &mut sp.stages {
                rng.fill_uniform(-5.0, 5.0, &mut s.z);
                rng.fill_uniform(-0.5, 1.5, &mut s.p);
                rng.fill_uniform(-0.5, 1.5, &mut s.mu);
            }
        }
        let text = policy.to_json().unwrap();
        let back = Policy::<f32>::from_json(&text).unwrap();
        assert_eq!(policy, back);
        for (a, b) in policy.sub_policies.iter().zip(&back.sub_policies) {
            for (sa, sb) in a.stages.iter().zip(&b.stages) {
                for (va, vb) in sa.z.iter().zip(&sb.z) {
                    assert_eq!(va.to_bits(), vb.to_bits());
                }
            }
        }
    }

    #[test]
    fn json_unknown_op_rejected() {
        let text = r#"{"eta":1.0,"op_set":["invert","frobnicate"],"sub_policies":[]}"#;
        let err = Policy::<f32>::from_json(text).unwrap_err().to_string();
        assert!(err.contains("frobnicate"), "{err}");
    }

    #[test]
    fn gradients_reach_policy_parameters() {
        let policy = Policy::<f32>::new(1, 2, AugOp::DEFAULT_SET.to_vec(), 1.0).unwrap();
        let x = test_image(2, 14);
        let mut tape = Tape::new();
        let leaves = register_policy(&mut tape, &policy).unwrap();
        let mut rng = Rng::new(60);
        let (y, _) = apply_policy_train(&mut tape, &x, &policy, &leaves, &mut rng).unwrap();
        let loss = tape.mean_all(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        // chosen path: some z, p, mu gradient must be non-zero
        let mut nonzero = (false, false, false);
        for row in &leaves.stages {
            for s in row {
                if grads.wrt(&s.z).is_some_and(|g| g.iter().any(|v| *v != 0.0)) {
                    nonzero.0 = true;
                }
                if grads.wrt(&s.p).is_some_and(|g| g.iter().any(|v| *v != 0.0)) {
                    nonzero.1 = true;
                }
                if grads.wrt(&s.mu).is_some_and(|g| g.iter().any(|v| *v != 0.0)) {
                    nonzero.2 = true;
                }
            }
        }
        assert!(nonzero.0, "no gradient reached any z");
        assert!(nonzero.1, "no gradient reached any p");
        assert!(nonzero.2, "no gradient reached any mu");
    }
}
