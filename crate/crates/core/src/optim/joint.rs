//! Alternating first-order bilevel optimization.
//!
//! Each iteration takes one validation step — a single backward pass whose
//! gradients update the search parameters (architecture logits and policy
//! z/p/mu) while the network weights stay untouched — followed by one
//! training step that updates only the weights, with the stochastic
//! augmentation still active in the forward pass. The inner optimum is
//! approximated by the current weights (first order; no second-order term
//! is ever computed).

use std::time::Instant;

use crate::arch::{
    discretize, register_alphas, CellOp, CellSpec, DiscreteCell, NetworkConfig, SuperNet,
};
use crate::augment::{
    apply_policy_train, register_policy, AugOp, Policy, PolicyLeaves,
};
use crate::data::{crop_flip_to_unit, eval_batch, normalize_on_tape, DatasetSplit, PreprocessConfig};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::{stream, Rng};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::adam::Adam;
use super::sgd::{clip_grad_norm, cosine_lr, MomentumSgd};

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub w_lr: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub grad_clip: f64,
    pub search_lr: f64,
    pub search_betas: (f64, f64),
    pub search_weight_decay: f64,
    pub eta: f64,
    /// Number of sub-policies.
    pub l: usize,
    /// Stages per sub-policy.
    pub k: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 5,
            batch_size: 32,
            w_lr: 0.025,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            grad_clip: 5.0,
            search_lr: 3e-4,
            search_betas: (0.5, 0.999),
            search_weight_decay: 1e-3,
            eta: 1.0,
            l: 10,
            k: 2,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for (name, v) in [
            ("w_lr", self.w_lr),
            ("search_lr", self.search_lr),
            ("eta", self.eta),
            ("grad_clip", self.grad_clip),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.l == 0 || self.k == 0 {
            return Err(Error::Config("L and K must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-edge softmax weights of one cell spec, tagged for the log.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaRow<F> {
    pub cell: usize,
    pub from: usize,
    pub to: usize,
    pub weights: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord<F> {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Raw selection logits, one row per (sub-policy, stage); the
    /// noise-free distribution is `softmax(z / eta)` of each row.
    pub policy_z: Vec<Vec<F>>,
    pub alpha_rows: Vec<AlphaRow<F>>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SearchLog<F> {
    /// Validation accuracy before any optimization step.
    pub initial_val_accuracy: f64,
    pub records: Vec<EpochRecord<F>>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub chosen_subpolicy: usize,
}

/// Everything the alternating optimization mutates.
pub struct JointState<F: Scalar> {
    pub config: SearchConfig,
    pub net: SuperNet<F>,
    pub cells: Vec<CellSpec<F>>,
    pub policy: Policy<F>,
    pub w_opt: MomentumSgd<F>,
    pub search_opt: Adam<F>,
    /// Next epoch to run (completed epochs are `0..epoch`).
    pub epoch: usize,
    pub seed: u64,
    backward_count: u64,
    val_steps: u64,
    train_steps: u64,
}

fn search_param_sizes<F: Scalar>(cells: &[CellSpec<F>], policy: &Policy<F>) -> Vec<usize> {
    let mut sizes = Vec::new();
    for spec in cells {
        for row in &spec.alpha {
            sizes.push(row.len());
        }
    }
    for sp in &policy.sub_policies {
        for s in &sp.stages {
            sizes.push(s.z.len());
            sizes.push(s.p.len());
            sizes.push(s.mu.len());
        }
    }
    sizes
}

/// Mutable views over every search parameter, in the canonical order
/// (alpha rows spec-major, then policy stages z/p/mu).
fn search_param_views<'a, F: Scalar>(
    cells: &'a mut [CellSpec<F>],
    policy: &'a mut Policy<F>,
) -> Vec<&'a mut Vec<F>> {
    let mut views: Vec<&mut Vec<F>> = Vec::new();
    for spec in cells {
        for row in &mut spec.alpha {
            views.push(row);
        }
    }
    for sp in &mut policy.sub_policies {
        for s in &mut sp.stages {
            views.push(&mut s.z);
            views.push(&mut s.p);
            views.push(&mut s.mu);
        }
    }
    views
}

fn collect_search_grads<F: Scalar>(
    grads: &crate::tape::Gradients<F>,
    alpha_leaves: &[Vec<Tensor<F>>],
    policy_leaves: &PolicyLeaves<F>,
) -> Vec<Vec<F>> {
    let mut out = Vec::new();
    for rows in alpha_leaves {
        for leaf in rows {
            out.push(grads.wrt_or_zeros(leaf));
        }
    }
    for row in &policy_leaves.stages {
        for s in row {
            out.push(grads.wrt_or_zeros(&s.z));
            out.push(grads.wrt_or_zeros(&s.p));
            out.push(grads.wrt_or_zeros(&s.mu));
        }
    }
    out
}

fn constant_leaves<F: Scalar>(params: &ParamSet<F>) -> Vec<Tensor<F>> {
    params
        .iter()
        .map(|b| Tensor::from_vec(b.shape.clone(), b.data.clone()).expect("valid param buffer"))
        .collect()
}

fn constant_alphas<F: Scalar>(specs: &[CellSpec<F>]) -> Vec<Vec<Tensor<F>>> {
    specs
        .iter()
        .map(|s| {
            s.alpha
                .iter()
                .map(|row| Tensor::from_vec(vec![row.len()], row.clone()).expect("valid alpha row"))
                .collect()
        })
        .collect()
}

/// Shared search input pipeline: baseline preprocessing (crop/flip to
/// `[0,1]`), training-mode policy on tape, then normalization. The hook
/// records stage order for tests.
#[allow(clippy::too_many_arguments)]
pub fn search_input<F: Scalar>(
    tape: &mut Tape<F>,
    ds: &DatasetSplit,
    indices: &[usize],
    pre_cfg: &PreprocessConfig,
    policy: &Policy<F>,
    policy_leaves: &PolicyLeaves<F>,
    rng_pre: &mut Rng,
    rng_aug: &mut Rng,
    mut hook: Option<&mut Vec<&'static str>>,
) -> Result<(Tensor<F>, usize)> {
    let mut record = |s| {
        if let Some(h) = hook.as_deref_mut() {
            h.push(s);
        }
    };
    let unit = crop_flip_to_unit::<F>(ds, indices, pre_cfg, rng_pre, true)?;
    record("baseline_preprocess");
    let (transformed, sp_idx) = apply_policy_train(tape, &unit, policy, policy_leaves, rng_aug)?;
    record("policy_train");
    let normalized = normalize_on_tape(tape, &transformed, pre_cfg)?;
    record("normalize");
    Ok((normalized, sp_idx))
}

impl<F: Scalar> JointState<F> {
    pub fn new(
        config: SearchConfig,
        net_config: &NetworkConfig,
        cell_ops: &[CellOp],
        aug_ops: Vec<AugOp>,
    ) -> Result<Self> {
        config.validate()?;
        let cells = crate::arch::default_cell_specs::<F>(net_config, cell_ops)?;
        let net = SuperNet::build(net_config, &cells, config.seed)?;
        let policy = Policy::new(config.l, config.k, aug_ops, F::fromf(config.eta))?;
        let w_opt = MomentumSgd::new(
            net.weights(),
            F::fromf(config.w_momentum),
            F::fromf(config.w_weight_decay),
        );
        let sizes = search_param_sizes(&cells, &policy);
        let search_opt = Adam::new(
            &sizes,
            F::fromf(config.search_lr),
            (F::fromf(config.search_betas.0), F::fromf(config.search_betas.1)),
            F::fromf(config.search_weight_decay),
        );
        let seed = config.seed;
        Ok(JointState {
            config,
            net,
            cells,
            policy,
            w_opt,
            search_opt,
            epoch: 0,
            seed,
            backward_count: 0,
            val_steps: 0,
            train_steps: 0,
        })
    }

    pub fn backward_count(&self) -> u64 {
        self.backward_count
    }

    pub fn val_steps(&self) -> u64 {
        self.val_steps
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn set_counters(&mut self, backward: u64, val: u64, train: u64) {
        self.backward_count = backward;
        self.val_steps = val;
        self.train_steps = train;
    }

    /// Bit-level digest of the network weights.
    pub fn weights_checksum(&self) -> u64 {
        self.net.weights().checksum()
    }

    /// Bit-level digest of all search parameters (alphas + policy).
    pub fn search_checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut bytes = Vec::new();
        let mut eat = |vals: &[F]| {
            bytes.clear();
            for v in vals {
                v.write_le(&mut bytes);
            }
            for &b in &bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for spec in &self.cells {
            for row in &spec.alpha {
                eat(row);
            }
        }
        for sp in &self.policy.sub_policies {
            for s in &sp.stages {
                eat(&s.z);
                eat(&s.p);
                eat(&s.mu);
            }
        }
        hash
    }

    fn forward_loss(
        &self,
        ds: &DatasetSplit,
        indices: &[usize],
        pre_cfg: &PreprocessConfig,
        phase: u64,
        iter: u64,
    ) -> Result<(Tape<F>, LeafSet<F>, Tensor<F>, usize)> {
        let epoch = self.epoch as u64;
        let mut tape = Tape::new();
        let w_leaves = self.net.weights().register(&mut tape)?;
        let alpha_leaves = register_alphas(&mut tape, &self.cells)?;
        let policy_leaves = register_policy(&mut tape, &self.policy)?;
        let mut rng_pre = Rng::derive(self.seed, &[stream::PREPROCESS, phase, epoch, iter]);
        let aug_stream = if phase == 0 { stream::VAL_AUG } else { stream::TRAIN_AUG };
        let mut rng_aug = Rng::derive(self.seed, &[aug_stream, epoch, iter]);
        let (x, sp_idx) = search_input(
            &mut tape,
            ds,
            indices,
            pre_cfg,
            &self.policy,
            &policy_leaves,
            &mut rng_pre,
            &mut rng_aug,
            None,
        )?;
        let labels: Vec<usize> = indices.iter().map(|&i| ds.label(i)).collect();
        let logits = self.net.forward(&mut tape, &x, &self.cells, &alpha_leaves, &w_leaves)?;
        let loss = tape.cross_entropy(&logits, &labels)?;
        let leaves = LeafSet { w: w_leaves, alphas: alpha_leaves, policy: policy_leaves };
        Ok((tape, leaves, loss, sp_idx))
    }

    /// Validation step: one backward pass, search parameters updated,
    /// network weights untouched (their gradients are discarded).
    pub fn val_step(
        &mut self,
        d_val: &DatasetSplit,
        indices: &[usize],
        pre_cfg: &PreprocessConfig,
        iter: u64,
    ) -> Result<StepStats> {
        let (mut tape, leaves, loss, sp_idx) = self.forward_loss(d_val, indices, pre_cfg, 0, iter)?;
        let lv = loss.item().f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation loss is not finite at epoch {} iter {iter} (seed {})",
                self.epoch, self.seed
            )));
        }
        let grads = tape.backward(&loss)?;
        self.backward_count += 1;
        self.val_steps += 1;
        let sg = collect_search_grads(&grads, &leaves.alphas, &leaves.policy);
        let mut views = search_param_views(&mut self.cells, &mut self.policy);
        self.search_opt.step(&mut views, &sg);
        Ok(StepStats { loss: lv, chosen_subpolicy: sp_idx })
    }

    /// Training step: one backward pass, only the network weights move
    /// (momentum SGD with cosine learning rate and global-norm clipping).
    pub fn train_step(
        &mut self,
        d_train: &DatasetSplit,
        indices: &[usize],
        pre_cfg: &PreprocessConfig,
        iter: u64,
    ) -> Result<StepStats> {
        let (mut tape, leaves, loss, sp_idx) =
            self.forward_loss(d_train, indices, pre_cfg, 1, iter)?;
        let lv = loss.item().f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss is not finite at epoch {} iter {iter} (seed {})",
                self.epoch, self.seed
            )));
        }
        let grads = tape.backward(&loss)?;
        self.backward_count += 1;
        self.train_steps += 1;
        let mut wg: Vec<Vec<F>> = leaves.w.iter().map(|l| grads.wrt_or_zeros(l)).collect();
        clip_grad_norm(&mut wg, F::fromf(self.config.grad_clip));
        let lr = cosine_lr(self.config.w_lr, self.epoch, self.config.epochs);
        self.w_opt.step(self.net.weights_mut(), &wg, F::fromf(lr));
        Ok(StepStats { loss: lv, chosen_subpolicy: sp_idx })
    }

    /// Deterministic evaluation (normalize-only inputs, no policy, no
    /// noise): mean loss and accuracy over `ds` in original order.
    pub fn evaluate(&self, ds: &DatasetSplit, pre_cfg: &PreprocessConfig) -> Result<(f64, f64)> {
        let w = constant_leaves(self.net.weights());
        let alphas = constant_alphas(&self.cells);
        let bs = self.config.batch_size;
        let mut correct = 0usize;
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        let mut start = 0;
        while start < ds.n {
            let end = (start + bs).min(ds.n);
            let indices: Vec<usize> = (start..end).collect();
            let labels: Vec<usize> = indices.iter().map(|&i| ds.label(i)).collect();
            let x = eval_batch::<F>(ds, &indices, pre_cfg)?;
            let mut tape = Tape::new();
            let logits = self.net.forward(&mut tape, &x, &self.cells, &alphas, &w)?;
            let loss = tape.cross_entropy(&logits, &labels)?;
            loss_sum += loss.item().f64();
            batches += 1;
            correct += count_correct(&logits, &labels);
            start = end;
        }
        Ok((loss_sum / batches.max(1) as f64, correct as f64 / ds.n as f64))
    }
}

struct LeafSet<F: Scalar> {
    w: Vec<Tensor<F>>,
    alphas: Vec<Vec<Tensor<F>>>,
    policy: PolicyLeaves<F>,
}

pub fn count_correct<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> usize {
    let (b, c) = logits.dims2().expect("logits are rank-2");
    let mut correct = 0;
    for (row, &label) in labels.iter().enumerate() {
        let l = &logits.data()[row * c..(row + 1) * c];
        let mut best = 0usize;
        for (j, v) in l.iter().enumerate() {
            if *v > l[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    debug_assert_eq!(b, labels.len());
    correct
}

/// Cycles validation batches, reshuffling with a derived stream whenever
/// the split is exhausted.
struct ValCycler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    refill: u64,
}

impl ValCycler {
    fn new(n: usize, batch: usize, seed: u64, epoch: u64) -> Self {
        let mut c = ValCycler { order: (0..n).collect(), cursor: 0, batch, seed, epoch, refill: 0 };
        c.shuffle();
        c
    }

    fn shuffle(&mut self) {
        let mut rng = Rng::derive(self.seed, &[stream::VAL_ORDER, self.epoch, self.refill]);
        rng.shuffle(&mut self.order);
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.refill += 1;
            self.shuffle();
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

/// Outcome of a finished search.
pub struct SearchOutcome<F> {
    pub policy: Policy<F>,
    pub genotype: Vec<DiscreteCell>,
}

/// Runs the alternating optimization from `state.epoch` to
/// `config.epochs`, appending one record per epoch to `log` and invoking
/// `on_epoch` after each (checkpointing hook). Returns the trained policy
/// and the discretized architecture.
pub fn run_search<F: Scalar>(
    state: &mut JointState<F>,
    log: &mut SearchLog<F>,
    pre_cfg: &PreprocessConfig,
    d_train: &DatasetSplit,
    d_val: &DatasetSplit,
    mut on_epoch: impl FnMut(&JointState<F>, &SearchLog<F>) -> Result<()>,
) -> Result<SearchOutcome<F>> {
    let bs = state.config.batch_size;
    let n_batches = d_train.n / bs;
    if n_batches == 0 {
        return Err(Error::Config(format!(
            "batch size {bs} exceeds the training split ({} samples)",
            d_train.n
        )));
    }
    if d_val.n < bs {
        return Err(Error::Config(format!(
            "batch size {bs} exceeds the validation split ({} samples)",
            d_val.n
        )));
    }
    if state.epoch == 0 && log.records.is_empty() {
        log.initial_val_accuracy = state.evaluate(d_val, pre_cfg)?.1;
    }
    for epoch in state.epoch..state.config.epochs {
        state.epoch = epoch;
        let started = Instant::now();
        let mut train_order: Vec<usize> = (0..d_train.n).collect();
        Rng::derive(state.seed, &[stream::TRAIN_ORDER, epoch as u64]).shuffle(&mut train_order);
        let mut val_batches = ValCycler::new(d_val.n, bs, state.seed, epoch as u64);
        let mut train_loss_sum = 0.0;
        for it in 0..n_batches {
            let vb = val_batches.next_batch();
            state.val_step(d_val, &vb, pre_cfg, it as u64)?;
            let tb = &train_order[it * bs..(it + 1) * bs];
            let stats = state.train_step(d_train, tb, pre_cfg, it as u64)?;
            train_loss_sum += stats.loss;
        }
        let (val_loss, val_accuracy) = state.evaluate(d_val, pre_cfg)?;
        let alpha_rows = alpha_snapshot(&state.cells);
        log.records.push(EpochRecord {
            epoch,
            train_loss: train_loss_sum / n_batches as f64,
            val_loss,
            val_accuracy,
            policy_z: state.policy.z_snapshot(),
            alpha_rows,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        state.epoch = epoch + 1;
        on_epoch(state, log)?;
    }
    Ok(SearchOutcome { policy: state.policy.clone(), genotype: discretize(&state.cells)? })
}

pub fn alpha_snapshot<F: Scalar>(cells: &[CellSpec<F>]) -> Vec<AlphaRow<F>> {
    let mut rows = Vec::new();
    for (ci, spec) in cells.iter().enumerate() {
        let weights = spec.weight_rows();
        for ((from, to), w) in spec.edges().into_iter().zip(weights) {
            rows.push(AlphaRow { cell: ci, from, to, weights: w });
        }
    }
    rows
}
