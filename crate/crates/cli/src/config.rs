//! Flat key=value run configuration with a validated schema.
//!
//! Precedence: schema defaults, then the `--config` file, then `--set`
//! overrides. Unknown keys are rejected with a nearest-key suggestion. The
//! fully resolved table is echoed into the output directory so every run
//! records exactly what it ran with.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use augarch::arch::{CellOp, NetworkConfig};
use augarch::augment::AugOp;
use augarch::data::{DataSource, DatasetSplit, PreprocessConfig};
use augarch::optim::{FinalTrainConfig, SearchConfig};
use augarch::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    U64,
    F64,
    Str,
}

/// (key, kind, default, help)
const SCHEMA: &[(&str, Kind, &str, &str)] = &[
    ("data.source", Kind::Str, "synthetic", "dataset source: synthetic | raw | png"),
    ("data.path", Kind::Str, "", "path to the raw-binary file or PNG directory"),
    ("data.n", Kind::U64, "1536", "synthetic sample count"),
    ("data.hw", Kind::U64, "16", "synthetic image height/width"),
    ("split.train_frac", Kind::F64, "0.3333333333333333", "training fraction of the full set"),
    ("split.val_frac", Kind::F64, "0.3333333333333333", "validation fraction; remainder is test"),
    ("preprocess.pad", Kind::U64, "4", "zero padding before the random crop"),
    ("preprocess.hflip_prob", Kind::F64, "0.5", "horizontal flip probability"),
    ("preprocess.mean", Kind::Str, "0.5,0.5,0.5", "per-channel normalization mean"),
    ("preprocess.std", Kind::Str, "0.5,0.5,0.5", "per-channel normalization std"),
    ("preprocess.cutout", Kind::U64, "16", "cutout square size (final training only)"),
    ("search.epochs", Kind::U64, "5", "search epochs"),
    ("search.batch_size", Kind::U64, "32", "search minibatch size"),
    ("search.w_lr", Kind::F64, "0.025", "weight learning rate (cosine annealed)"),
    ("search.w_momentum", Kind::F64, "0.9", "weight momentum"),
    ("search.w_weight_decay", Kind::F64, "0.0003", "weight decay for network weights"),
    ("search.grad_clip", Kind::F64, "5.0", "global gradient-norm clip"),
    ("search.lr", Kind::F64, "0.0003", "search-parameter learning rate"),
    ("search.beta1", Kind::F64, "0.5", "search optimizer beta1"),
    ("search.beta2", Kind::F64, "0.999", "search optimizer beta2"),
    ("search.weight_decay", Kind::F64, "0.001", "weight decay for search parameters"),
    ("search.eta", Kind::F64, "1.0", "softmax / relaxation temperature"),
    ("policy.l", Kind::U64, "10", "number of sub-policies"),
    ("policy.k", Kind::U64, "2", "stages per sub-policy"),
    ("policy.ops", Kind::Str, "default16", "augmentation op set: default16 or a comma list"),
    ("arch.cells", Kind::U64, "4", "number of stacked cells"),
    ("arch.nodes", Kind::U64, "6", "nodes per cell (2 inputs + intermediates + output)"),
    ("arch.channels", Kind::U64, "16", "initial channel count"),
    ("arch.ops", Kind::Str, "reduced5", "cell op set: reduced5, darts8, or a comma list"),
    ("arch.reductions", Kind::Str, "mid", "reduction cell positions: mid, none, or a comma list"),
    ("train.epochs", Kind::U64, "20", "final-training epochs"),
    ("train.batch_size", Kind::U64, "32", "final-training minibatch size"),
    ("train.lr", Kind::F64, "0.025", "final-training learning rate"),
    ("train.momentum", Kind::F64, "0.9", "final-training momentum"),
    ("train.weight_decay", Kind::F64, "0.0003", "final-training weight decay"),
    ("train.grad_clip", Kind::F64, "5.0", "final-training gradient clip"),
];

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            cur[j + 1] = (prev[j + 1] + 1).min(cur[j] + 1).min(prev[j] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn suggest(key: &str) -> Option<&'static str> {
    let mut best: Option<(usize, &'static str)> = None;
    for (k, _, _, _) in SCHEMA {
        // match against the full key and its last segment
        let tail = k.rsplit('.').next().unwrap_or(k);
        let d = levenshtein(key, k).min(levenshtein(key, tail));
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, k));
        }
    }
    best.filter(|(d, _)| *d <= 3).map(|(_, k)| k)
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            values: SCHEMA.iter().map(|(k, _, d, _)| (*k, d.to_string())).collect(),
        }
    }

    /// Loads a config file (optional) and applies `--set key=value`
    /// overrides, validating every key and value against the schema.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::defaults();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "{}:{}: expected `key = value`, got `{line}`",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                cfg.set(k.trim(), v.trim())?;
            }
        }
        for item in overrides {
            let (k, v) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects key=value, got `{item}`"))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some((k, kind, _, _)) = SCHEMA.iter().find(|(k, _, _, _)| *k == key) else {
            let hint = suggest(key)
                .map(|s| format!("; did you mean `{s}`?"))
                .unwrap_or_default();
            return Err(Error::Config(format!("unknown key `{key}`{hint}")));
        };
        match kind {
            Kind::U64 => {
                value.parse::<u64>().map_err(|_| {
                    Error::Config(format!("key `{key}` expects an integer, got `{value}`"))
                })?;
            }
            Kind::F64 => {
                value.parse::<f64>().map_err(|_| {
                    Error::Config(format!("key `{key}` expects a number, got `{value}`"))
                })?;
            }
            Kind::Str => {}
        }
        self.values.insert(k, value.to_string());
        Ok(())
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.values[key].parse().expect("validated at set time")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.values[key].parse().expect("validated at set time")
    }

    pub fn str(&self, key: &str) -> &str {
        &self.values[key]
    }

    /// Canonical echo of the resolved configuration.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    // -- typed materializers -------------------------------------------------

    pub fn data_source(&self, seed: u64) -> Result<DataSource> {
        match self.str("data.source") {
            "synthetic" => Ok(DataSource::Synthetic {
                n: self.u64("data.n") as usize,
                hw: self.u64("data.hw") as usize,
                seed,
            }),
            "raw" => Ok(DataSource::RawBinary(PathBuf::from(self.str("data.path")))),
            "png" => Ok(DataSource::PngDirectory(PathBuf::from(self.str("data.path")))),
            other => Err(Error::Config(format!(
                "data.source must be synthetic | raw | png, got `{other}`"
            ))),
        }
    }

    pub fn fractions(&self) -> (f64, f64) {
        (self.f64("split.train_frac"), self.f64("split.val_frac"))
    }

    fn channel_list(&self, key: &str, c: usize) -> Result<Vec<f64>> {
        let vals: Vec<f64> = self
            .str(key)
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("{key}: `{v}` is not a number")))
            })
            .collect::<Result<_>>()?;
        if vals.len() == 1 {
            return Ok(vec![vals[0]; c]);
        }
        if vals.len() != c {
            return Err(Error::Config(format!(
                "{key} lists {} values for {c} channels",
                vals.len()
            )));
        }
        Ok(vals)
    }

    pub fn preprocess(&self, ds: &DatasetSplit) -> Result<PreprocessConfig> {
        let cfg = PreprocessConfig {
            pad: self.u64("preprocess.pad") as usize,
            crop_h: ds.h,
            crop_w: ds.w,
            hflip_prob: self.f64("preprocess.hflip_prob"),
            mean: self.channel_list("preprocess.mean", ds.c)?,
            std: self.channel_list("preprocess.std", ds.c)?,
            cutout_size: (self.u64("preprocess.cutout") as usize).min(ds.h).min(ds.w),
        };
        cfg.validate(ds)?;
        Ok(cfg)
    }

    pub fn search_config(&self, seed: u64) -> Result<SearchConfig> {
        let cfg = SearchConfig {
            epochs: self.u64("search.epochs") as usize,
            batch_size: self.u64("search.batch_size") as usize,
            w_lr: self.f64("search.w_lr"),
            w_momentum: self.f64("search.w_momentum"),
            w_weight_decay: self.f64("search.w_weight_decay"),
            grad_clip: self.f64("search.grad_clip"),
            search_lr: self.f64("search.lr"),
            search_betas: (self.f64("search.beta1"), self.f64("search.beta2")),
            search_weight_decay: self.f64("search.weight_decay"),
            eta: self.f64("search.eta"),
            l: self.u64("policy.l") as usize,
            k: self.u64("policy.k") as usize,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn final_config(&self, seed: u64) -> Result<FinalTrainConfig> {
        Ok(FinalTrainConfig {
            epochs: self.u64("train.epochs") as usize,
            batch_size: self.u64("train.batch_size") as usize,
            lr: self.f64("train.lr"),
            momentum: self.f64("train.momentum"),
            weight_decay: self.f64("train.weight_decay"),
            grad_clip: self.f64("train.grad_clip"),
            seed,
        })
    }

    pub fn net_config(&self, in_channels: usize, n_classes: usize) -> Result<NetworkConfig> {
        let n_cells = self.u64("arch.cells") as usize;
        let reduction_positions = match self.str("arch.reductions") {
            "mid" => {
                if n_cells >= 2 {
                    vec![n_cells / 2]
                } else {
                    vec![]
                }
            }
            "none" => vec![],
            list => list
                .split(',')
                .map(|v| {
                    v.trim().parse::<usize>().map_err(|_| {
                        Error::Config(format!("arch.reductions: `{v}` is not a position"))
                    })
                })
                .collect::<Result<_>>()?,
        };
        let cfg = NetworkConfig {
            n_cells,
            n_nodes: self.u64("arch.nodes") as usize,
            init_channels: self.u64("arch.channels") as usize,
            in_channels,
            n_classes,
            reduction_positions,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cell_ops(&self) -> Result<Vec<CellOp>> {
        match self.str("arch.ops") {
            "reduced5" => Ok(CellOp::REDUCED_SET.to_vec()),
            "darts8" => Ok(CellOp::FULL_SET.to_vec()),
            list => list.split(',').map(|n| CellOp::parse(n.trim())).collect(),
        }
    }

    pub fn aug_ops(&self) -> Result<Vec<AugOp>> {
        match self.str("policy.ops") {
            "default16" => Ok(AugOp::DEFAULT_SET.to_vec()),
            list => {
                let ops: Vec<AugOp> =
                    list.split(',').map(|n| AugOp::parse(n.trim())).collect::<Result<_>>()?;
                if ops.is_empty() {
                    return Err(Error::Config("policy.ops is empty".into()));
                }
                Ok(ops)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_suggests_nearest() {
        let mut cfg = RunConfig::defaults();
        let err = cfg.set("epcohs", "3").unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
    }

    #[test]
    fn type_errors_are_rejected() {
        let mut cfg = RunConfig::defaults();
        assert!(cfg.set("search.epochs", "three").is_err());
        assert!(cfg.set("search.w_lr", "fast").is_err());
    }

    #[test]
    fn render_is_sorted_and_stable() {
        let cfg = RunConfig::defaults();
        let a = cfg.render();
        let b = cfg.render();
        assert_eq!(a, b);
        let keys: Vec<&str> = a.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn op_set_shortcuts_materialize() {
        let cfg = RunConfig::defaults();
        assert_eq!(cfg.cell_ops().unwrap().len(), 5);
        assert_eq!(cfg.aug_ops().unwrap().len(), 16);
        let mut cfg = RunConfig::defaults();
        cfg.set("arch.ops", "zero,skip_connect,sep_conv_3x3").unwrap();
        assert_eq!(cfg.cell_ops().unwrap().len(), 3);
        cfg.set("policy.ops", "invert,rotate").unwrap();
        assert_eq!(cfg.aug_ops().unwrap().len(), 2);
    }

    #[test]
    fn cutout_is_never_a_policy_op() {
        let mut cfg = RunConfig::defaults();
        cfg.set("policy.ops", "invert,cutout").unwrap();
        let err = cfg.aug_ops().unwrap_err().to_string();
        assert!(err.contains("cutout"), "{err}");
    }
}
