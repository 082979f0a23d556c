//! Fixed (non-searched) preprocessing: zero-padded random crop, random
//! horizontal flip, scaling to `[0,1]`, per-channel normalization, and
//! cutout.
//!
//! Policy transforms operate on `[0,1]`-scaled, pre-normalization pixels;
//! normalization follows the policy, and cutout (final training only)
//! zeroes pixels after normalization.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::dataset::DatasetSplit;

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    /// Zero padding applied before the random crop.
    pub pad: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub hflip_prob: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Square side of the cutout region; 0 disables cutout.
    pub cutout_size: usize,
}

impl PreprocessConfig {
    /// Defaults for a dataset: crop back to the original size after pad-4,
    /// flip with probability 1/2, mean/std 0.5, cutout 16 capped at half
    /// the image for small images.
    pub fn for_dataset(ds: &DatasetSplit) -> Self {
        PreprocessConfig {
            pad: 4,
            crop_h: ds.h,
            crop_w: ds.w,
            hflip_prob: 0.5,
            mean: vec![0.5; ds.c],
            std: vec![0.5; ds.c],
            cutout_size: 16.min(ds.h / 2).min(ds.w / 2),
        }
    }

    pub fn validate(&self, ds: &DatasetSplit) -> Result<()> {
        if self.crop_h > ds.h + 2 * self.pad || self.crop_w > ds.w + 2 * self.pad {
            return Err(Error::InvalidArg(format!(
                "crop {}x{} larger than padded image {}x{}",
                self.crop_h,
                self.crop_w,
                ds.h + 2 * self.pad,
                ds.w + 2 * self.pad
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::InvalidArg(format!(
                "hflip probability {} outside [0,1]",
                self.hflip_prob
            )));
        }
        if self.mean.len() != ds.c || self.std.len() != ds.c {
            return Err(Error::InvalidArg(format!(
                "normalization constants for {} channels, dataset has {}",
                self.mean.len(),
                ds.c
            )));
        }
        if self.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidArg("std must be positive".into()));
        }
        Ok(())
    }
}

pub fn draw_crop_offsets(rng: &mut Rng, range_y: usize, range_x: usize) -> (usize, usize) {
    (rng.below(range_y + 1), rng.below(range_x + 1))
}

/// Gathers `indices` into a `[B,C,crop_h,crop_w]` tensor in `[0,1]`.
/// With `training` set, applies zero-pad random crop and random horizontal
/// flip (per-image draw order: crop y, crop x, flip coin).
pub fn crop_flip_to_unit<F: Scalar>(
    ds: &DatasetSplit,
    indices: &[usize],
    cfg: &PreprocessConfig,
    rng: &mut Rng,
    training: bool,
) -> Result<Tensor<F>> {
    cfg.validate(ds)?;
    let (ch, cw) = (cfg.crop_h, cfg.crop_w);
    let range_y = ds.h + 2 * cfg.pad - ch;
    let range_x = ds.w + 2 * cfg.pad - cw;
    let inv255 = F::fromf(1.0 / 255.0);
    let mut out = vec![F::zero(); indices.len() * ds.c * ch * cw];
    for (bi, &idx) in indices.iter().enumerate() {
        let (oy, ox, flip) = if training {
            let (oy, ox) = draw_crop_offsets(rng, range_y, range_x);
            (oy, ox, rng.uniform() < cfg.hflip_prob)
        } else {
            (range_y / 2, range_x / 2, false)
        };
        let img = ds.image(idx);
        for c in 0..ds.c {
            for y in 0..ch {
                let src_y = (y + oy) as isize - cfg.pad as isize;
                for x in 0..cw {
                    let xx = if flip { cw - 1 - x } else { x };
                    let src_x = (xx + ox) as isize - cfg.pad as isize;
                    let v = if src_y >= 0
                        && src_y < ds.h as isize
                        && src_x >= 0
                        && src_x < ds.w as isize
                    {
                        img[(c * ds.h + src_y as usize) * ds.w + src_x as usize]
                    } else {
                        0
                    };
                    out[((bi * ds.c + c) * ch + y) * cw + x] = F::fromf(v as f64) * inv255;
                }
            }
        }
    }
    Tensor::from_vec(vec![indices.len(), ds.c, ch, cw], out)
}

/// Per-channel normalization `(x - mean) / std` recorded on the tape (a
/// constant affine; gradients pass through to `x`).
pub fn normalize_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    cfg: &PreprocessConfig,
) -> Result<Tensor<F>> {
    let scale: Vec<F> = cfg.std.iter().map(|s| F::fromf(1.0 / s)).collect();
    let shift: Vec<F> = cfg
        .mean
        .iter()
        .zip(&cfg.std)
        .map(|(m, s)| F::fromf(-m / s))
        .collect();
    tape.channel_affine(x, &scale, &shift)
}

/// Off-tape normalization for inference paths.
pub fn normalize_unit<F: Scalar>(x: &Tensor<F>, cfg: &PreprocessConfig) -> Result<Tensor<F>> {
    let mut scratch = Tape::new();
    normalize_on_tape(&mut scratch, &x.detach(), cfg)
}

/// Full baseline preprocessing per its contract: training mode is
/// pad -> random crop -> random hflip -> scale -> normalize; otherwise
/// scale -> normalize only.
pub fn baseline_preprocess<F: Scalar>(
    ds: &DatasetSplit,
    indices: &[usize],
    cfg: &PreprocessConfig,
    rng: &mut Rng,
    training: bool,
) -> Result<Tensor<F>> {
    let unit = if training {
        crop_flip_to_unit::<F>(ds, indices, cfg, rng, true)?
    } else {
        unit_batch::<F>(ds, indices)?
    };
    normalize_unit(&unit, cfg)
}

/// Plain `[0,1]` scaling without any geometric transform.
pub fn unit_batch<F: Scalar>(ds: &DatasetSplit, indices: &[usize]) -> Result<Tensor<F>> {
    let inv255 = F::fromf(1.0 / 255.0);
    let size = ds.image_size();
    let mut out = Vec::with_capacity(indices.len() * size);
    for &idx in indices {
        out.extend(ds.image(idx).iter().map(|&v| F::fromf(v as f64) * inv255));
    }
    Tensor::from_vec(vec![indices.len(), ds.c, ds.h, ds.w], out)
}

/// Zeroes one square region per image (post-normalization values). The
/// center is uniform over the image; the region is clipped at borders.
/// Consumes two draws per image (center y, center x).
pub fn cutout<F: Scalar>(x: &Tensor<F>, size: usize, rng: &mut Rng) -> Result<Tensor<F>> {
    let (b, c, h, w) = x.dims4()?;
    if size > h.min(w) {
        return Err(Error::InvalidArg(format!(
            "cutout size {size} exceeds image {h}x{w}"
        )));
    }
    if size == 0 {
        return Ok(x.detach());
    }
    let mut data = x.data().to_vec();
    for bi in 0..b {
        let cy = rng.below(h) as isize;
        let cx = rng.below(w) as isize;
        let y0 = (cy - (size / 2) as isize).max(0) as usize;
        let y1 = ((cy - (size / 2) as isize + size as isize).min(h as isize)).max(0) as usize;
        let x0 = (cx - (size / 2) as isize).max(0) as usize;
        let x1 = ((cx - (size / 2) as isize + size as isize).min(w as isize)).max(0) as usize;
        for ci in 0..c {
            for y in y0..y1 {
                for xx in x0..x1 {
                    data[((bi * c + ci) * h + y) * w + xx] = F::zero();
                }
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), data)
}

/// Closed-form expected number of zeroed pixels per image for a clipped
/// cutout square with uniformly random center.
pub fn expected_cutout_area(h: usize, w: usize, size: usize) -> f64 {
    let half = (size / 2) as isize;
    let len = |n: usize, cv: isize| -> f64 {
        let lo = (cv - half).max(0);
        let hi = (cv - half + size as isize).min(n as isize);
        (hi - lo).max(0) as f64
    };
    let ey: f64 = (0..h as isize).map(|cy| len(h, cy)).sum::<f64>() / h as f64;
    let ex: f64 = (0..w as isize).map(|cx| len(w, cx)).sum::<f64>() / w as f64;
    ey * ex
}
