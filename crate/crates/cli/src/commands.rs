//! Subcommand implementations.

use std::path::{Path, PathBuf};

use augarch::arch::{genotype_parse, search_space_size, DiscreteNet};
use augarch::artifacts::{
    export_dist_from_z_log, load_checkpoint, load_final_weights, render_alpha_dist,
    render_policy_dist, render_policy_z_log, render_search_log, save_checkpoint,
    save_final_weights, write_text,
};
use augarch::augment::Policy;
use augarch::data::{eval_batch, load_dataset, split, DatasetSplit};
use augarch::optim::{
    count_correct, evaluate_discrete, final_train, run_search, JointState, SearchLog,
};
use augarch::tape::Tape;
use augarch::{Error, Result};

use crate::config::RunConfig;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Default output directory: one timestamped directory per run.
pub fn timestamped_dir(kind: &str) -> PathBuf {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from("runs").join(format!("{now}-{kind}"))
}

fn load_splits(
    cfg: &RunConfig,
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit, DatasetSplit)> {
    let full = load_dataset(&cfg.data_source(seed)?)?;
    split(&full, cfg.fractions(), seed)
}

pub fn cmd_search(
    cfg: &RunConfig,
    seed: u64,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    ensure_dir(out_dir)?;
    write_text(&out_dir.join("config.resolved.txt"), &cfg.render())?;
    let (train, val, _) = load_splits(cfg, seed)?;
    let pre = cfg.preprocess(&train)?;
    let search_cfg = cfg.search_config(seed)?;
    let net_cfg = cfg.net_config(train.c, train.n_classes)?;
    let cell_ops = cfg.cell_ops()?;
    let aug_ops = cfg.aug_ops()?;
    let eta = search_cfg.eta as f32;
    let (l, k) = (search_cfg.l, search_cfg.k);

    let (mut state, mut log) = match resume {
        Some(ckpt) => load_checkpoint::<f32>(ckpt, search_cfg, &net_cfg, &cell_ops, aug_ops)?,
        None => (
            JointState::<f32>::new(search_cfg, &net_cfg, &cell_ops, aug_ops)?,
            SearchLog::default(),
        ),
    };

    let ckpt_path = out_dir.join("checkpoint.bin");
    let outcome = match run_search(&mut state, &mut log, &pre, &train, &val, |st, lg| {
        save_checkpoint(&ckpt_path, st, lg)
    }) {
        Ok(o) => o,
        Err(e @ Error::NonFinite(_)) => {
            // dump state for post-mortem before surfacing the abort
            let _ = save_checkpoint(&out_dir.join("abort_state.bin"), &state, &log);
            return Err(e);
        }
        Err(e) => return Err(e),
    };

    let aug_names: Vec<&str> = outcome.policy.op_set.iter().map(|o| o.name()).collect();
    let cell_names: Vec<&str> = state.cells[0].op_set.iter().map(|o| o.name()).collect();
    write_text(&out_dir.join("policy.json"), &outcome.policy.to_json()?)?;
    write_text(
        &out_dir.join("genotype.json"),
        &augarch::arch::genotype_serialize(&outcome.genotype)?,
    )?;
    write_text(&out_dir.join("search_log.csv"), &render_search_log(&log))?;
    write_text(
        &out_dir.join("policy_dist.csv"),
        &render_policy_dist(&log, &aug_names, eta, l, k)?,
    )?;
    write_text(&out_dir.join("alpha_dist.csv"), &render_alpha_dist(&log, &cell_names))?;
    write_text(&out_dir.join("policy_z_log.csv"), &render_policy_z_log(&log, eta, k))?;

    let last = log.records.last();
    println!(
        "search finished: {} epochs, val accuracy {:.4} (initial {:.4})",
        log.records.len(),
        last.map_or(0.0, |r| r.val_accuracy),
        log.initial_val_accuracy
    );
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

pub fn cmd_train(
    cfg: &RunConfig,
    seed: u64,
    genotype_path: &Path,
    policy_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    ensure_dir(out_dir)?;
    write_text(&out_dir.join("config.resolved.txt"), &cfg.render())?;
    let genotype_text = std::fs::read_to_string(genotype_path)
        .map_err(|e| Error::Config(format!("{}: {e}", genotype_path.display())))?;
    let genotype = genotype_parse(&genotype_text)?;
    let policy_text = std::fs::read_to_string(policy_path)
        .map_err(|e| Error::Config(format!("{}: {e}", policy_path.display())))?;
    let policy = Policy::<f32>::from_json(&policy_text)?;
    let aug_ops = cfg.aug_ops()?;
    if policy.op_set != aug_ops {
        return Err(Error::Config(format!(
            "policy op set {:?} does not match configured policy.ops {:?}",
            policy.op_set.iter().map(|o| o.name()).collect::<Vec<_>>(),
            aug_ops.iter().map(|o| o.name()).collect::<Vec<_>>()
        )));
    }

    let (train, val, test) = load_splits(cfg, seed)?;
    let eval_set = if test.n > 0 { &test } else { &val };
    if eval_set.n == 0 {
        return Err(Error::Config(
            "no held-out samples: adjust split fractions so test (or val) is non-empty".into(),
        ));
    }
    let pre = cfg.preprocess(&train)?;
    let net_cfg = cfg.net_config(train.c, train.n_classes)?;
    let ft_cfg = cfg.final_config(seed)?;
    let cell_ops = cfg.cell_ops()?;

    let (net, metrics) = final_train::<f32>(
        &genotype, &policy, &net_cfg, &pre, &ft_cfg, &cell_ops, &train, eval_set,
    )?;
    write_text(&out_dir.join("metrics.json"), &serde_json::to_string_pretty(&metrics)?)?;
    save_final_weights(&out_dir.join("weights.bin"), &genotype_text, &net_cfg, net.weights())?;
    println!(
        "final training finished: test accuracy {:.4} over {} epochs",
        metrics.test_accuracy, metrics.epochs
    );
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, seed: u64, weights_path: &Path) -> Result<()> {
    let archive = load_final_weights::<f32>(weights_path)?;
    let genotype = genotype_parse(&archive.genotype_json)?;
    let mut net = DiscreteNet::<f32>::build(&archive.net_config, &genotype, 0)?;
    if net.weights().len() != archive.buffers.len() {
        return Err(Error::Parse(format!(
            "weights archive has {} buffers, network expects {}",
            archive.buffers.len(),
            net.weights().len()
        )));
    }
    for (i, (name, data)) in archive.buffers.iter().enumerate() {
        let buf = net.weights_mut().get_mut(augarch::params::ParamId(i));
        if &buf.name != name || buf.data.len() != data.len() {
            return Err(Error::Parse(format!(
                "weights archive buffer {i} (`{name}`) does not match the network (`{}`)",
                buf.name
            )));
        }
        buf.data = data.clone();
    }
    let (_, val, test) = load_splits(cfg, seed)?;
    let eval_set = if test.n > 0 { test } else { val };
    let pre = cfg.preprocess(&eval_set)?;
    let (loss, acc) = evaluate_discrete(&net, &eval_set, &pre, cfg.u64("train.batch_size") as usize)?;
    println!(
        "{{\"test_accuracy\": {acc}, \"test_loss\": {loss}, \"n_samples\": {}}}",
        eval_set.n
    );
    Ok(())
}

pub fn cmd_export_dist(log_dir: &Path, out: Option<&Path>) -> Result<()> {
    let zlog_path = if log_dir.is_dir() {
        log_dir.join("policy_z_log.csv")
    } else {
        log_dir.to_path_buf()
    };
    let policy_path = zlog_path
        .parent()
        .map(|d| d.join("policy.json"))
        .filter(|p| p.exists())
        .ok_or_else(|| {
            Error::Config(format!(
                "no policy.json next to {} (needed for op names)",
                zlog_path.display()
            ))
        })?;
    let policy = Policy::<f32>::from_json(&std::fs::read_to_string(&policy_path)?)?;
    let names: Vec<&str> = policy.op_set.iter().map(|o| o.name()).collect();
    let text = std::fs::read_to_string(&zlog_path)
        .map_err(|e| Error::Config(format!("{}: {e}", zlog_path.display())))?;
    let csv = export_dist_from_z_log(&text, &names)?;
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| zlog_path.with_file_name("policy_dist.csv"));
    write_text(&out_path, &csv)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

pub fn cmd_space(
    nodes: usize,
    ops: usize,
    sub_policies: usize,
    stages: usize,
    aug_ops: usize,
    cite: bool,
) -> Result<()> {
    let count = search_space_size(nodes, ops)?;
    println!("cell search space (N={nodes}, |F|={ops}): {count}");
    println!(
        "policy parameter count (K={stages}, L={sub_policies}, #O={aug_ops}): {}",
        stages * sub_policies * aug_ops * 3
    );
    if cite {
        println!("cited reference magnitudes:");
        println!("  ENAS architecture space: over 1.3 x 10^11 possible networks");
        println!("  AutoAugment policy space: roughly 2.9 x 10^32 possibilities");
        println!("  joint space: about 3.8 x 10^43 possibilities");
    }
    Ok(())
}

/// Quick sanity evaluation used by tests: forward a few eval batches of a
/// dataset through an untrained supernet to confirm the wiring.
#[allow(dead_code)]
pub fn smoke_eval(cfg: &RunConfig, seed: u64) -> Result<f64> {
    let (train, _, _) = load_splits(cfg, seed)?;
    let pre = cfg.preprocess(&train)?;
    let net_cfg = cfg.net_config(train.c, train.n_classes)?;
    let state = JointState::<f32>::new(cfg.search_config(seed)?, &net_cfg, &cfg.cell_ops()?, cfg.aug_ops()?)?;
    let indices: Vec<usize> = (0..train.n.min(8)).collect();
    let x = eval_batch::<f32>(&train, &indices, &pre)?;
    let labels: Vec<usize> = indices.iter().map(|&i| train.label(i)).collect();
    let weights: Vec<_> = state
        .net
        .weights()
        .iter()
        .map(|b| augarch::tensor::Tensor::from_vec(b.shape.clone(), b.data.clone()).unwrap())
        .collect();
    let alphas: Vec<Vec<_>> = state
        .cells
        .iter()
        .map(|s| {
            s.alpha
                .iter()
                .map(|r| augarch::tensor::Tensor::from_vec(vec![r.len()], r.clone()).unwrap())
                .collect()
        })
        .collect();
    let mut tape = Tape::<f32>::new();
    let logits = state.net.forward(&mut tape, &x, &state.cells, &alphas, &weights)?;
    Ok(count_correct(&logits, &labels) as f64 / labels.len() as f64)
}
