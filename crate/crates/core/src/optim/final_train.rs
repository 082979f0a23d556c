//! Final training of the derived architecture: the discrete network is
//! trained from scratch with baseline preprocessing, the learned policy in
//! inference mode, then cutout.

use crate::arch::{CellOp, DiscreteCell, DiscreteNet, NetworkConfig};
use crate::augment::Policy;
use crate::data::{eval_batch, final_train_batch, DatasetSplit, PreprocessConfig};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::scalar::Scalar;
use crate::tape::Tape;

use super::joint::count_correct;
use super::sgd::{clip_grad_norm, cosine_lr, MomentumSgd};

#[derive(Debug, Clone, PartialEq)]
pub struct FinalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for FinalTrainConfig {
    fn default() -> Self {
        FinalTrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 0.025,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FinalMetrics {
    pub test_accuracy: f64,
    pub train_loss_curve: Vec<f64>,
    pub epochs: usize,
    pub seed: u64,
}

// sub-tags under the FINAL_TRAIN stream
const ORDER: u64 = 1;
const PRE: u64 = 2;
const POLICY: u64 = 3;
const CUT: u64 = 4;

/// Trains a discrete genotype with the learned policy and reports test
/// accuracy. `allowed_ops` is the configured candidate set; a genotype
/// using an operation outside it is rejected.
#[allow(clippy::too_many_arguments)]
pub fn final_train<F: Scalar>(
    genotype: &[DiscreteCell],
    policy: &Policy<F>,
    net_cfg: &NetworkConfig,
    pre_cfg: &PreprocessConfig,
    cfg: &FinalTrainConfig,
    allowed_ops: &[CellOp],
    d_train: &DatasetSplit,
    d_test: &DatasetSplit,
) -> Result<(DiscreteNet<F>, FinalMetrics)> {
    for cell in genotype {
        for pair in &cell.nodes {
            for edge in pair {
                if !allowed_ops.contains(&edge.op) {
                    return Err(Error::InvalidArg(format!(
                        "genotype uses `{}`, which is not in the configured candidate set {:?}",
                        edge.op,
                        allowed_ops.iter().map(|o| o.name()).collect::<Vec<_>>()
                    )));
                }
            }
        }
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("final training needs epochs, batch_size >= 1".into()));
    }
    let mut net = DiscreteNet::<F>::build(net_cfg, genotype, cfg.seed)?;
    let mut opt = MomentumSgd::new(net.weights(), F::fromf(cfg.momentum), F::fromf(cfg.weight_decay));
    let n_batches = d_train.n / cfg.batch_size;
    if n_batches == 0 {
        return Err(Error::Config(format!(
            "batch size {} exceeds the training set ({} samples)",
            cfg.batch_size, d_train.n
        )));
    }
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let mut order: Vec<usize> = (0..d_train.n).collect();
        Rng::derive(cfg.seed, &[stream::FINAL_TRAIN, ORDER, e]).shuffle(&mut order);
        let lr = F::fromf(cosine_lr(cfg.lr, epoch, cfg.epochs));
        let mut loss_sum = 0.0f64;
        for it in 0..n_batches {
            let idx = &order[it * cfg.batch_size..(it + 1) * cfg.batch_size];
            let i = it as u64;
            let mut rng_pre = Rng::derive(cfg.seed, &[stream::FINAL_TRAIN, PRE, e, i]);
            let mut rng_pol = Rng::derive(cfg.seed, &[stream::FINAL_TRAIN, POLICY, e, i]);
            let mut rng_cut = Rng::derive(cfg.seed, &[stream::FINAL_TRAIN, CUT, e, i]);
            let x = final_train_batch::<F>(
                d_train, idx, pre_cfg, policy, &mut rng_pre, &mut rng_pol, &mut rng_cut, None,
            )?;
            let labels: Vec<usize> = idx.iter().map(|&j| d_train.label(j)).collect();
            let mut tape = Tape::new();
            let leaves = net.weights().register(&mut tape)?;
            let logits = net.forward(&mut tape, &x, &leaves)?;
            let loss = tape.cross_entropy(&logits, &labels)?;
            let lv = loss.item().f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "final-training loss is not finite at epoch {epoch} iter {it} (seed {})",
                    cfg.seed
                )));
            }
            loss_sum += lv;
            let grads = tape.backward(&loss)?;
            let mut wg: Vec<Vec<F>> = leaves.iter().map(|l| grads.wrt_or_zeros(l)).collect();
            clip_grad_norm(&mut wg, F::fromf(cfg.grad_clip));
            opt.step(net.weights_mut(), &wg, lr);
        }
        curve.push(loss_sum / n_batches as f64);
    }
    let test_accuracy = evaluate_discrete(&net, d_test, pre_cfg, cfg.batch_size)?.1;
    let metrics = FinalMetrics {
        test_accuracy,
        train_loss_curve: curve,
        epochs: cfg.epochs,
        seed: cfg.seed,
    };
    Ok((net, metrics))
}

/// Mean loss and accuracy of a discrete network on a dataset
/// (normalize-only inputs, original order).
pub fn evaluate_discrete<F: Scalar>(
    net: &DiscreteNet<F>,
    ds: &DatasetSplit,
    pre_cfg: &PreprocessConfig,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let mut batches = 0usize;
    let mut start = 0;
    let weights: Vec<_> = net
        .weights()
        .iter()
        .map(|b| crate::tensor::Tensor::from_vec(b.shape.clone(), b.data.clone()).unwrap())
        .collect();
    while start < ds.n {
        let end = (start + batch_size).min(ds.n);
        let indices: Vec<usize> = (start..end).collect();
        let labels: Vec<usize> = indices.iter().map(|&i| ds.label(i)).collect();
        let x = eval_batch::<F>(ds, &indices, pre_cfg)?;
        let mut tape = Tape::new();
        let logits = net.forward(&mut tape, &x, &weights)?;
        let loss = tape.cross_entropy(&logits, &labels)?;
        loss_sum += loss.item().f64();
        batches += 1;
        correct += count_correct(&logits, &labels);
        start = end;
    }
    Ok((loss_sum / batches.max(1) as f64, correct as f64 / ds.n as f64))
}
