//! Binary checkpoints.
//!
//! A search checkpoint is a single versioned archive holding every mutable
//! piece of the joint state (parameters, optimizer moments, counters, the
//! log so far). Random streams are derived statelessly from the stored
//! master seed plus loop counters, so seed + epoch fully capture generator
//! state and a resumed run continues bit-for-bit.
//!
//! All integers are little-endian; scalars are stored as their exact bit
//! patterns.

use std::path::Path;

use crate::arch::{CellOp, NetworkConfig};
use crate::augment::AugOp;
use crate::error::{Error, Result};
use crate::optim::{AlphaRow, EpochRecord, JointState, SearchConfig, SearchLog};
use crate::params::ParamSet;
use crate::scalar::Scalar;

const CKPT_MAGIC: &[u8; 8] = b"AACKPT01";
const WGT_MAGIC: &[u8; 8] = b"AAWGT001";

// ---------------------------------------------------------------------------
// little-endian helpers
// ---------------------------------------------------------------------------

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn scalars<F: Scalar>(&mut self, vals: &[F]) {
        self.u32(vals.len() as u32);
        for v in vals {
            v.write_le(&mut self.buf);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec())
            .map_err(|_| Error::Parse("checkpoint holds non-UTF8 text".into()))
    }
    fn scalars<F: Scalar>(&mut self) -> Result<Vec<F>> {
        let n = self.u32()? as usize;
        let mut raw = self.take(n * F::LE_BYTES)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(F::read_le(&mut raw).expect("length checked"));
        }
        Ok(out)
    }
}

fn write_scalar_vecs<F: Scalar>(w: &mut Writer, vecs: &[Vec<F>]) {
    w.u32(vecs.len() as u32);
    for v in vecs {
        w.scalars(v);
    }
}

fn read_scalar_vecs<F: Scalar>(r: &mut Reader) -> Result<Vec<Vec<F>>> {
    let n = r.u32()? as usize;
    (0..n).map(|_| r.scalars()).collect()
}

// ---------------------------------------------------------------------------
// search checkpoint
// ---------------------------------------------------------------------------

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    state: &JointState<F>,
    log: &SearchLog<F>,
) -> Result<()> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(CKPT_MAGIC);
    w.u32(1); // version
    w.u8(F::LE_BYTES as u8);
    w.u64(state.seed);
    w.usize(state.epoch);
    w.u64(state.backward_count());
    w.u64(state.val_steps());
    w.u64(state.train_steps());

    // search parameters
    w.u32(state.cells.len() as u32);
    for spec in &state.cells {
        w.u8(u8::from(spec.is_reduction));
        write_scalar_vecs(&mut w, &spec.alpha);
    }
    w.scalars(&[state.policy.eta]);
    w.u32(state.policy.n_sub_policies() as u32);
    w.u32(state.policy.n_stages() as u32);
    for sp in &state.policy.sub_policies {
        for s in &sp.stages {
            w.scalars(&s.z);
            w.scalars(&s.p);
            w.scalars(&s.mu);
        }
    }

    // network weights + optimizer state
    w.u32(state.net.weights().len() as u32);
    for buf in state.net.weights().iter() {
        w.str(&buf.name);
        w.scalars(&buf.data);
    }
    write_scalar_vecs(&mut w, state.w_opt.velocity());
    let (m, v, t) = state.search_opt.state();
    write_scalar_vecs(&mut w, m);
    write_scalar_vecs(&mut w, v);
    w.u64(t);

    // log
    w.f64(log.initial_val_accuracy);
    w.u32(log.records.len() as u32);
    for r in &log.records {
        w.usize(r.epoch);
        w.f64(r.train_loss);
        w.f64(r.val_loss);
        w.f64(r.val_accuracy);
        w.f64(r.wall_secs);
        write_scalar_vecs(&mut w, &r.policy_z);
        w.u32(r.alpha_rows.len() as u32);
        for row in &r.alpha_rows {
            w.u32(row.cell as u32);
            w.u32(row.from as u32);
            w.u32(row.to as u32);
            w.scalars(&row.weights);
        }
    }

    std::fs::write(path, &w.buf)?;
    Ok(())
}

/// Rebuilds the joint state from a checkpoint. The configs must match the
/// ones the checkpoint was created with; mismatches are rejected.
pub fn load_checkpoint<F: Scalar>(
    path: &Path,
    config: SearchConfig,
    net_config: &NetworkConfig,
    cell_ops: &[CellOp],
    aug_ops: Vec<AugOp>,
) -> Result<(JointState<F>, SearchLog<F>)> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Parse(format!("{}: not a search checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != 1 {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let width = r.u8()? as usize;
    if width != F::LE_BYTES {
        return Err(Error::Parse(format!(
            "checkpoint stores {width}-byte scalars, this build uses {}",
            F::LE_BYTES
        )));
    }
    let seed = r.u64()?;
    if seed != config.seed {
        return Err(Error::Config(format!(
            "checkpoint was created with seed {seed}, config says {}",
            config.seed
        )));
    }

    let mut state = JointState::<F>::new(config, net_config, cell_ops, aug_ops)?;
    state.epoch = r.usize()?;
    let backward = r.u64()?;
    let val_steps = r.u64()?;
    let train_steps = r.u64()?;
    state.set_counters(backward, val_steps, train_steps);

    let n_specs = r.u32()? as usize;
    if n_specs != state.cells.len() {
        return Err(Error::Parse(format!(
            "checkpoint has {n_specs} cell specs, config implies {}",
            state.cells.len()
        )));
    }
    for spec in &mut state.cells {
        let is_reduction = r.u8()? != 0;
        if is_reduction != spec.is_reduction {
            return Err(Error::Parse("cell spec kind mismatch".into()));
        }
        let rows = read_scalar_vecs::<F>(&mut r)?;
        if rows.len() != spec.alpha.len() || rows.iter().zip(&spec.alpha).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Parse("alpha layout mismatch".into()));
        }
        spec.alpha = rows;
    }
    let eta = r.scalars::<F>()?;
    state.policy.eta = eta
        .first()
        .copied()
        .ok_or_else(|| Error::Parse("missing policy temperature".into()))?;
    let l = r.u32()? as usize;
    let k = r.u32()? as usize;
    if l != state.policy.n_sub_policies() || k != state.policy.n_stages() {
        return Err(Error::Parse(format!(
            "checkpoint policy is {l}x{k}, config says {}x{}",
            state.policy.n_sub_policies(),
            state.policy.n_stages()
        )));
    }
    for sp in &mut state.policy.sub_policies {
        for s in &mut sp.stages {
            s.z = r.scalars()?;
            s.p = r.scalars()?;
            s.mu = r.scalars()?;
            if s.z.len() != state.policy.op_set.len() {
                return Err(Error::Parse("policy op count mismatch".into()));
            }
        }
    }

    let n_bufs = r.u32()? as usize;
    if n_bufs != state.net.weights().len() {
        return Err(Error::Parse(format!(
            "checkpoint has {n_bufs} weight buffers, network has {}",
            state.net.weights().len()
        )));
    }
    for i in 0..n_bufs {
        let name = r.str()?;
        let data = r.scalars::<F>()?;
        let buf = state.net.weights_mut().get_mut(crate::params::ParamId(i));
        if buf.name != name || buf.data.len() != data.len() {
            return Err(Error::Parse(format!(
                "weight buffer {i} mismatch: `{}` vs `{name}`",
                buf.name
            )));
        }
        buf.data = data;
    }
    let velocity = read_scalar_vecs::<F>(&mut r)?;
    if velocity.len() != state.w_opt.velocity().len() {
        return Err(Error::Parse("velocity layout mismatch".into()));
    }
    *state.w_opt.velocity_mut() = velocity;
    let m = read_scalar_vecs::<F>(&mut r)?;
    let v = read_scalar_vecs::<F>(&mut r)?;
    let t = r.u64()?;
    {
        let (sm, sv, st) = state.search_opt.state_mut();
        if m.len() != sm.len() || v.len() != sv.len() {
            return Err(Error::Parse("search optimizer layout mismatch".into()));
        }
        *sm = m;
        *sv = v;
        *st = t;
    }

    let mut log = SearchLog::default();
    log.initial_val_accuracy = r.f64()?;
    let n_records = r.u32()? as usize;
    for _ in 0..n_records {
        let epoch = r.usize()?;
        let train_loss = r.f64()?;
        let val_loss = r.f64()?;
        let val_accuracy = r.f64()?;
        let wall_secs = r.f64()?;
        let policy_z = read_scalar_vecs(&mut r)?;
        let n_rows = r.u32()? as usize;
        let mut alpha_rows = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            let cell = r.u32()? as usize;
            let from = r.u32()? as usize;
            let to = r.u32()? as usize;
            alpha_rows.push(AlphaRow { cell, from, to, weights: r.scalars()? });
        }
        log.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            policy_z,
            alpha_rows,
            wall_secs,
        });
    }
    Ok((state, log))
}

// ---------------------------------------------------------------------------
// final weights archive
// ---------------------------------------------------------------------------

fn write_net_config(w: &mut Writer, cfg: &NetworkConfig) {
    for v in [cfg.n_cells, cfg.n_nodes, cfg.init_channels, cfg.in_channels, cfg.n_classes] {
        w.u32(v as u32);
    }
    w.u32(cfg.reduction_positions.len() as u32);
    for &p in &cfg.reduction_positions {
        w.u32(p as u32);
    }
}

fn read_net_config(r: &mut Reader) -> Result<NetworkConfig> {
    let n_cells = r.u32()? as usize;
    let n_nodes = r.u32()? as usize;
    let init_channels = r.u32()? as usize;
    let in_channels = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    let n_red = r.u32()? as usize;
    let mut reduction_positions = Vec::with_capacity(n_red);
    for _ in 0..n_red {
        reduction_positions.push(r.u32()? as usize);
    }
    Ok(NetworkConfig { n_cells, n_nodes, init_channels, in_channels, n_classes, reduction_positions })
}

/// Saves trained discrete-network weights with the genotype and network
/// shape needed to rebuild it for evaluation.
pub fn save_final_weights<F: Scalar>(
    path: &Path,
    genotype_json: &str,
    net_config: &NetworkConfig,
    weights: &ParamSet<F>,
) -> Result<()> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(WGT_MAGIC);
    w.u32(1);
    w.u8(F::LE_BYTES as u8);
    w.str(genotype_json);
    write_net_config(&mut w, net_config);
    w.u32(weights.len() as u32);
    for buf in weights.iter() {
        w.str(&buf.name);
        w.scalars(&buf.data);
    }
    std::fs::write(path, &w.buf)?;
    Ok(())
}

pub struct FinalWeights<F> {
    pub genotype_json: String,
    pub net_config: NetworkConfig,
    pub buffers: Vec<(String, Vec<F>)>,
}

pub fn load_final_weights<F: Scalar>(path: &Path) -> Result<FinalWeights<F>> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(8)? != WGT_MAGIC {
        return Err(Error::Parse(format!("{}: not a weights archive", path.display())));
    }
    let version = r.u32()?;
    if version != 1 {
        return Err(Error::Parse(format!("unsupported weights version {version}")));
    }
    let width = r.u8()? as usize;
    if width != F::LE_BYTES {
        return Err(Error::Parse(format!(
            "weights archive stores {width}-byte scalars, this build uses {}",
            F::LE_BYTES
        )));
    }
    let genotype_json = r.str()?;
    let net_config = read_net_config(&mut r)?;
    let n = r.u32()? as usize;
    let mut buffers = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let data = r.scalars()?;
        buffers.push((name, data));
    }
    Ok(FinalWeights { genotype_json, net_config, buffers })
}
