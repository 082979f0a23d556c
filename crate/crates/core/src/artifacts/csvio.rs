//! CSV artifacts of a search run.
//!
//! Floats are written with Rust's shortest round-trip formatting, so files
//! from identically seeded runs are byte-identical (the wall-clock column
//! lives only in `search_log.csv`, which is exempt from that guarantee).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::SearchLog;
use crate::scalar::Scalar;
use crate::tape::softmax_with_temp;

pub fn render_search_log<F: Scalar>(log: &SearchLog<F>) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_accuracy,wall_clock_s\n");
    for r in &log.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.wall_secs
        );
    }
    out
}

/// `policy_dist.csv`: per epoch and (sub-policy, stage), the noise-free
/// selection distribution `softmax(z / eta)`; one column per operation.
pub fn render_policy_dist<F: Scalar>(
    log: &SearchLog<F>,
    op_names: &[&str],
    eta: F,
    l: usize,
    k: usize,
) -> Result<String> {
    let mut out = String::from("epoch,sub_policy,stage");
    for name in op_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in &log.records {
        render_dist_rows(&mut out, r.epoch, &r.policy_z, op_names.len(), eta, l, k)?;
    }
    Ok(out)
}

fn render_dist_rows<F: Scalar>(
    out: &mut String,
    epoch: usize,
    z_rows: &[Vec<F>],
    n_ops: usize,
    eta: F,
    l: usize,
    k: usize,
) -> Result<()> {
    if z_rows.len() != l * k {
        return Err(Error::Parse(format!(
            "epoch {epoch}: {} logit rows, expected L*K = {}",
            z_rows.len(),
            l * k
        )));
    }
    for (i, z) in z_rows.iter().enumerate() {
        if z.len() != n_ops {
            return Err(Error::Parse(format!(
                "epoch {epoch} row {i}: {} logits, expected {n_ops}",
                z.len()
            )));
        }
        let dist = softmax_with_temp(z, eta);
        let _ = write!(out, "{},{},{}", epoch, i / k, i % k);
        for v in dist {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(())
}

/// `alpha_dist.csv`: per epoch and edge, the softmax mixture weights.
pub fn render_alpha_dist<F: Scalar>(log: &SearchLog<F>, op_names: &[&str]) -> String {
    let mut out = String::from("epoch,cell,from,to");
    for name in op_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in &log.records {
        for row in &r.alpha_rows {
            let _ = write!(out, "{},{},{},{}", r.epoch, row.cell, row.from, row.to);
            for v in &row.weights {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

/// `policy_z_log.csv`: raw logits per epoch, the source material for
/// regenerating `policy_dist.csv` (`export-dist`).
pub fn render_policy_z_log<F: Scalar>(log: &SearchLog<F>, eta: F, k: usize) -> String {
    let mut out = String::from("epoch,sub_policy,stage,eta");
    let n = log
        .records
        .first()
        .and_then(|r| r.policy_z.first())
        .map_or(0, |z| z.len());
    for i in 0..n {
        let _ = write!(out, ",z_{i}");
    }
    out.push('\n');
    for r in &log.records {
        for (i, z) in r.policy_z.iter().enumerate() {
            let _ = write!(out, "{},{},{},{}", r.epoch, i / k, i % k, eta);
            for v in z {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

/// Parses a raw z-log and re-renders the distribution CSV. Errors carry
/// 1-based line numbers.
pub fn export_dist_from_z_log(text: &str, op_names: &[&str]) -> Result<String> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse("line 1: empty z-log".into()))?;
    let head_cols: Vec<&str> = header.split(',').collect();
    if head_cols.len() < 5 || head_cols[..4] != ["epoch", "sub_policy", "stage", "eta"] {
        return Err(Error::Parse(format!(
            "line 1: unexpected z-log header `{header}`"
        )));
    }
    let n_ops = head_cols.len() - 4;
    if n_ops != op_names.len() {
        return Err(Error::Parse(format!(
            "line 1: z-log has {n_ops} logit columns, policy has {} operations",
            op_names.len()
        )));
    }
    let mut out = String::from("epoch,sub_policy,stage");
    for name in op_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != head_cols.len() {
            return Err(Error::Parse(format!(
                "line {lineno}: {} fields, expected {}",
                cols.len(),
                head_cols.len()
            )));
        }
        let parse_num = |i: usize| -> Result<f64> {
            cols[i].parse::<f64>().map_err(|_| {
                Error::Parse(format!("line {lineno}: field {} (`{}`) is not a number", i + 1, cols[i]))
            })
        };
        let eta = parse_num(3)?;
        if eta <= 0.0 {
            return Err(Error::Parse(format!("line {lineno}: eta {eta} must be positive")));
        }
        let mut z = Vec::with_capacity(n_ops);
        for i in 4..cols.len() {
            z.push(parse_num(i)?);
        }
        let dist = softmax_with_temp(&z, eta);
        let _ = write!(out, "{},{},{}", cols[0], cols[1], cols[2]);
        for v in dist {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}
