//! The searchable image operations.
//!
//! Every operator maps a batch in `[0,1]` to a batch in `[0,1]` of the same
//! shape and is differentiable w.r.t. the pixels. Operators with a magnitude
//! take it as a scalar tensor `mu` in `[0,1]`; geometric operators reach the
//! magnitude through the analytic jacobian of their sampling grid, blend
//! operators through the blend weight. Operators whose forward is inherently
//! discrete (posterize, solarize thresholding, equalize, auto-contrast) are
//! computed exactly and use straight-through gradients.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Identifier of a searchable image operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugOp {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    AutoContrast,
    HorizontalFlip,
    Invert,
    Equalize,
    Solarize,
    Posterize,
    Contrast,
    Color,
    Brightness,
    Sharpness,
    SamplePairing,
}

/// Magnitude conventions. Ranges are symmetric where an identity point
/// exists, so `mu = 0.5` is the identity transform.
const SHEAR_MAX: f64 = 0.3;
const TRANSLATE_MAX: f64 = 0.45; // fraction of the image extent
const ROTATE_MAX_RAD: f64 = std::f64::consts::PI / 6.0; // 30 degrees
const ENHANCE_LO: f64 = 0.1; // enhancement factor at mu = 0
const ENHANCE_HI: f64 = 1.9;
const PAIRING_MAX: f64 = 0.4;

impl AugOp {
    /// The full operator set, in the conventional order.
    pub const DEFAULT_SET: [AugOp; 16] = [
        AugOp::ShearX,
        AugOp::ShearY,
        AugOp::TranslateX,
        AugOp::TranslateY,
        AugOp::Rotate,
        AugOp::AutoContrast,
        AugOp::HorizontalFlip,
        AugOp::Invert,
        AugOp::Equalize,
        AugOp::Solarize,
        AugOp::Posterize,
        AugOp::Contrast,
        AugOp::Color,
        AugOp::Brightness,
        AugOp::Sharpness,
        AugOp::SamplePairing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugOp::ShearX => "shear_x",
            AugOp::ShearY => "shear_y",
            AugOp::TranslateX => "translate_x",
            AugOp::TranslateY => "translate_y",
            AugOp::Rotate => "rotate",
            AugOp::AutoContrast => "auto_contrast",
            AugOp::HorizontalFlip => "horizontal_flip",
            AugOp::Invert => "invert",
            AugOp::Equalize => "equalize",
            AugOp::Solarize => "solarize",
            AugOp::Posterize => "posterize",
            AugOp::Contrast => "contrast",
            AugOp::Color => "color",
            AugOp::Brightness => "brightness",
            AugOp::Sharpness => "sharpness",
            AugOp::SamplePairing => "sample_pairing",
        }
    }

    pub fn parse(name: &str) -> Result<AugOp> {
        AugOp::DEFAULT_SET
            .iter()
            .copied()
            .find(|op| op.name() == name)
            .ok_or_else(|| Error::UnknownOp(name.to_string()))
    }

    /// Whether the magnitude parameter affects this operator at all.
    pub fn uses_magnitude(self) -> bool {
        !matches!(
            self,
            AugOp::AutoContrast | AugOp::HorizontalFlip | AugOp::Invert | AugOp::Equalize
        )
    }

    /// Whether the gradient w.r.t. the magnitude is the true derivative
    /// (`false` means straight-through or no dependence).
    pub fn differentiable_in_mu(self) -> bool {
        self.uses_magnitude() && !matches!(self, AugOp::Solarize | AugOp::Posterize)
    }

    /// Whether `mu = 0.5` maps to the identity transform.
    pub fn has_identity_magnitude(self) -> bool {
        matches!(
            self,
            AugOp::ShearX
                | AugOp::ShearY
                | AugOp::TranslateX
                | AugOp::TranslateY
                | AugOp::Rotate
                | AugOp::Contrast
                | AugOp::Color
                | AugOp::Brightness
                | AugOp::Sharpness
        )
    }

    /// Native parameter value for a magnitude in `[0,1]` (shear factor,
    /// pixel offset, radians, threshold, bits, enhancement factor or blend
    /// weight, depending on the operator).
    pub fn native_magnitude(self, mu: f64, (h, w): (usize, usize)) -> f64 {
        match self {
            AugOp::ShearX | AugOp::ShearY => (mu - 0.5) * 2.0 * SHEAR_MAX,
            AugOp::TranslateX => (mu - 0.5) * 2.0 * TRANSLATE_MAX * w as f64,
            AugOp::TranslateY => (mu - 0.5) * 2.0 * TRANSLATE_MAX * h as f64,
            AugOp::Rotate => (mu - 0.5) * 2.0 * ROTATE_MAX_RAD,
            AugOp::Solarize => mu,
            AugOp::Posterize => (1.0 + 7.0 * mu).round().clamp(1.0, 8.0),
            AugOp::Contrast | AugOp::Color | AugOp::Brightness | AugOp::Sharpness => {
                ENHANCE_LO + (ENHANCE_HI - ENHANCE_LO) * mu
            }
            AugOp::SamplePairing => PAIRING_MAX * mu,
            AugOp::AutoContrast | AugOp::HorizontalFlip | AugOp::Invert | AugOp::Equalize => 0.0,
        }
    }
}

impl std::fmt::Display for AugOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn luma_weights<F: Scalar>(c: usize) -> Vec<F> {
    if c == 3 {
        vec![F::fromf(0.299), F::fromf(0.587), F::fromf(0.114)]
    } else {
        vec![F::fromf(1.0 / c as f64); c]
    }
}

fn check_input<F: Scalar>(x: &Tensor<F>) -> Result<(usize, usize, usize, usize)> {
    let dims = x.dims4()?;
    let (_, _, h, w) = dims;
    if h < 2 || w < 2 {
        return Err(Error::InvalidArg(format!(
            "image operations need H, W >= 2, got {}x{}",
            h, w
        )));
    }
    let slack = F::fromf(1e-4);
    for (i, &v) in x.data().iter().enumerate() {
        if v < -slack || v > F::one() + slack || !v.is_finite() {
            return Err(Error::InvalidArg(format!(
                "pixel {} out of range [0,1]: {}",
                i, v
            )));
        }
    }
    Ok(dims)
}

/// Inclusive-boundary pixel clamp: values already at 0 or 1 keep their
/// gradient (unlike the open-interval parameter clamp).
fn clamp_pixels<F: Scalar>(tape: &mut Tape<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    tape.clamp_inclusive(x, F::zero(), F::one())
}

/// Scalar node for the enhancement factor `0.1 + 1.8 * mu`.
fn enhancement_factor<F: Scalar>(tape: &mut Tape<F>, mu: &Tensor<F>) -> Result<Tensor<F>> {
    let scaled = tape.scalar_mul(mu, F::fromf(ENHANCE_HI - ENHANCE_LO))?;
    tape.add_scalar(&scaled, F::fromf(ENHANCE_LO))
}

/// Applies one image operation to a batch.
///
/// `mu` is a scalar tensor in `[0,1]`; pass a constant for inference. The
/// rng is consumed only by `sample_pairing` (partner permutation), so call
/// sequences stay deterministic per operator.
pub fn apply_image_op<F: Scalar>(
    tape: &mut Tape<F>,
    op: AugOp,
    x: &Tensor<F>,
    mu: &Tensor<F>,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    let (b, c, h, w) = check_input(x)?;
    if !mu.is_scalar() {
        return Err(Error::shape(
            "apply_image_op",
            format!("magnitude must be scalar, got {:?}", mu.shape()),
        ));
    }
    let muv = mu.item().f64().clamp(0.0, 1.0);
    let out = match op {
        AugOp::ShearX | AugOp::ShearY | AugOp::TranslateX | AugOp::TranslateY | AugOp::Rotate => {
            let (theta, jac) = affine_params::<F>(op, muv, (h, w));
            let linked = if mu.grad_required() { Some((mu, jac)) } else { None };
            tape.affine_sample(x, theta, linked)?
        }
        AugOp::HorizontalFlip => tape.flip_w(x)?,
        AugOp::Invert => {
            let ones = Tensor::full(x.shape().to_vec(), F::one());
            tape.sub(&ones, x)?
        }
        AugOp::Brightness => {
            let f = enhancement_factor(tape, mu)?;
            let zeros = Tensor::zeros(x.shape().to_vec());
            tape.blend(&zeros, x, &f)?
        }
        AugOp::Color => {
            let f = enhancement_factor(tape, mu)?;
            let gray = tape.gray_mix(x, &luma_weights::<F>(c))?;
            tape.blend(&gray, x, &f)?
        }
        AugOp::Contrast => {
            let f = enhancement_factor(tape, mu)?;
            let gray = tape.gray_mix(x, &luma_weights::<F>(c))?;
            let mean = tape.mean_axes(&gray, &[1, 2, 3])?;
            let flat = tape.broadcast_to(&mean, x.shape())?;
            tape.blend(&flat, x, &f)?
        }
        AugOp::Sharpness => {
            let f = enhancement_factor(tape, mu)?;
            let smoothed = smooth_interior(tape, x, (b, c, h, w))?;
            tape.blend(&smoothed, x, &f)?
        }
        AugOp::Solarize => {
            let linked = if mu.grad_required() { Some(mu) } else { None };
            tape.solarize(x, F::fromf(muv), linked)?
        }
        AugOp::Posterize => {
            let bits = op.native_magnitude(muv, (h, w)) as u32;
            let levels = F::fromf(((1u32 << bits) - 1) as f64);
            let vals = x
                .data()
                .iter()
                .map(|&v| (v * levels).round() / levels)
                .collect();
            let linked = if mu.grad_required() { Some(mu) } else { None };
            tape.straight_through(x, vals, linked)?
        }
        AugOp::Equalize => {
            let vals = equalize_values(x.data(), (b, c, h, w));
            tape.straight_through(x, vals, None)?
        }
        AugOp::AutoContrast => {
            let vals = auto_contrast_values(x.data(), (b, c, h, w));
            tape.straight_through(x, vals, None)?
        }
        AugOp::SamplePairing => {
            let mut perm: Vec<usize> = (0..b).collect();
            rng.shuffle(&mut perm);
            let partner = tape.gather_batch(x, &perm)?;
            let wgt = tape.scalar_mul(mu, F::fromf(PAIRING_MAX))?;
            tape.blend(x, &partner, &wgt)?
        }
    };
    clamp_pixels(tape, &out)
}

/// Sampling-grid parameters and their derivative w.r.t. `mu` for the
/// geometric operators. Coordinates are pixel indices relative to the image
/// center (see the sampling kernel); positive translate moves content toward
/// +x/+y, rotation angle is measured in the index frame.
fn affine_params<F: Scalar>(op: AugOp, mu: f64, (h, w): (usize, usize)) -> ([F; 6], [F; 6]) {
    let ident = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let mut theta = ident;
    let mut jac = [0.0f64; 6];
    match op {
        AugOp::ShearX => {
            theta[1] = op.native_magnitude(mu, (h, w));
            jac[1] = 2.0 * SHEAR_MAX;
        }
        AugOp::ShearY => {
            theta[3] = op.native_magnitude(mu, (h, w));
            jac[3] = 2.0 * SHEAR_MAX;
        }
        AugOp::TranslateX => {
            theta[2] = -op.native_magnitude(mu, (h, w));
            jac[2] = -2.0 * TRANSLATE_MAX * w as f64;
        }
        AugOp::TranslateY => {
            theta[5] = -op.native_magnitude(mu, (h, w));
            jac[5] = -2.0 * TRANSLATE_MAX * h as f64;
        }
        AugOp::Rotate => {
            let a = op.native_magnitude(mu, (h, w));
            let da = 2.0 * ROTATE_MAX_RAD;
            theta = [a.cos(), a.sin(), 0.0, -a.sin(), a.cos(), 0.0];
            jac = [-a.sin() * da, a.cos() * da, 0.0, -a.cos() * da, -a.sin() * da, 0.0];
        }
        _ => unreachable!("not a geometric operator: {op:?}"),
    }
    (theta.map(F::fromf), jac.map(F::fromf))
}

/// 3x3 smoothing (kernel weights 1/13, center 5/13) applied to interior
/// pixels only; border pixels keep their original values.
fn smooth_interior<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    (b, c, h, w): (usize, usize, usize, usize),
) -> Result<Tensor<F>> {
    let inv13 = 1.0 / 13.0;
    let mut kernel = vec![F::fromf(inv13); c * 9];
    for ci in 0..c {
        kernel[ci * 9 + 4] = F::fromf(5.0 * inv13);
    }
    let kernel = Tensor::from_vec(vec![c, 3, 3], kernel)?;
    let blurred = tape.depthwise_conv2d(x, &kernel, 1, 1, 1)?;
    // interior mask: 1 strictly inside, 0 on the border
    let mut mask = vec![F::zero(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            for y in 1..h.saturating_sub(1) {
                for xx in 1..w.saturating_sub(1) {
                    mask[((bi * c + ci) * h + y) * w + xx] = F::one();
                }
            }
        }
    }
    let mask = Tensor::from_vec(x.shape().to_vec(), mask)?;
    let inv_mask_data = mask.data().iter().map(|&m| F::one() - m).collect();
    let inv_mask = Tensor::from_vec(x.shape().to_vec(), inv_mask_data)?;
    let inner = tape.mul(&blurred, &mask)?;
    let outer = tape.mul(x, &inv_mask)?;
    tape.add(&inner, &outer)
}

/// Histogram equalization per image and channel, 256 bins on `[0,1]`.
/// Constant channels are left unchanged.
pub fn equalize_values<F: Scalar>(x: &[F], (b, c, h, w): (usize, usize, usize, usize)) -> Vec<F> {
    let hw = h * w;
    let mut out = vec![F::zero(); x.len()];
    for plane in 0..b * c {
        let src = &x[plane * hw..(plane + 1) * hw];
        let dst = &mut out[plane * hw..(plane + 1) * hw];
        let mut hist = [0u32; 256];
        for &v in src.iter() {
            hist[bin256(v)] += 1;
        }
        let mut cdf = [0u32; 256];
        let mut acc = 0u32;
        for (i, &hv) in hist.iter().enumerate() {
            acc += hv;
            cdf[i] = acc;
        }
        let cdf_min = hist
            .iter()
            .zip(cdf.iter())
            .find(|(hv, _)| **hv > 0)
            .map(|(_, cv)| *cv)
            .unwrap_or(0);
        let total = hw as u32;
        if total == cdf_min {
            dst.copy_from_slice(src);
            continue;
        }
        let denom = (total - cdf_min) as f64;
        for (d, &v) in dst.iter_mut().zip(src.iter()) {
            let cv = cdf[bin256(v)];
            *d = F::fromf((cv.saturating_sub(cdf_min)) as f64 / denom);
        }
    }
    out
}

/// Per-image, per-channel min/max rescale to the full `[0,1]` range.
/// Constant channels are left unchanged.
pub fn auto_contrast_values<F: Scalar>(
    x: &[F],
    (b, c, h, w): (usize, usize, usize, usize),
) -> Vec<F> {
    let hw = h * w;
    let mut out = vec![F::zero(); x.len()];
    for plane in 0..b * c {
        let src = &x[plane * hw..(plane + 1) * hw];
        let dst = &mut out[plane * hw..(plane + 1) * hw];
        let lo = src.iter().fold(F::infinity(), |a, &v| a.min(v));
        let hi = src.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
        if hi > lo {
            let inv = F::one() / (hi - lo);
            for (d, &v) in dst.iter_mut().zip(src.iter()) {
                *d = (v - lo) * inv;
            }
        } else {
            dst.copy_from_slice(src);
        }
    }
    out
}

fn bin256<F: Scalar>(v: F) -> usize {
    let b = (v.f64() * 256.0).floor() as isize;
    b.clamp(0, 255) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded_image(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        let mut vals = vec![0.0f32; b * c * h * w];
        rng.fill_uniform(0.05, 0.95, &mut vals);
        Tensor::from_vec(vec![b, c, h, w], vals).unwrap()
    }

    #[test]
    fn op_names_round_trip() {
        for op in AugOp::DEFAULT_SET {
            assert_eq!(AugOp::parse(op.name()).unwrap(), op);
        }
        assert!(matches!(AugOp::parse("cutout"), Err(Error::UnknownOp(_))));
    }

    #[test]
    fn rotate_identity_magnitude_reproduces_input() {
        let x = seeded_image(2, 3, 8, 8, 1);
        let mut tape = Tape::<f32>::new();
        let mut rng = Rng::new(0);
        let mu = Tensor::scalar(0.5f32);
        let y = apply_image_op(&mut tape, AugOp::Rotate, &x, &mu, &mut rng).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-5);
    }

    #[test]
    fn all_identity_magnitude_ops_reproduce_input() {
        let x = seeded_image(1, 3, 8, 8, 2);
        for op in AugOp::DEFAULT_SET {
            if !op.has_identity_magnitude() {
                continue;
            }
            let mut tape = Tape::<f32>::new();
            let mut rng = Rng::new(0);
            let mu = Tensor::scalar(0.5f32);
            let y = apply_image_op(&mut tape, op, &x, &mu, &mut rng).unwrap();
            assert!(
                x.max_abs_diff(&y) < 1e-5,
                "{op} at identity magnitude deviates by {}",
                x.max_abs_diff(&y)
            );
        }
    }

    #[test]
    fn invert_is_exactly_one_minus_x() {
        let x = seeded_image(2, 3, 4, 4, 3);
        for muv in [0.0f32, 0.37, 1.0] {
            let mut tape = Tape::<f32>::new();
            let mut rng = Rng::new(0);
            let mu = Tensor::scalar(muv);
            let y = apply_image_op(&mut tape, AugOp::Invert, &x, &mu, &mut rng).unwrap();
            for (xv, yv) in x.data().iter().zip(y.data()) {
                assert_eq!(*yv, 1.0 - *xv);
            }
        }
    }

    #[test]
    fn translate_x_matches_integer_shift_oracle() {
        let x = seeded_image(1, 1, 8, 8, 4);
        // choose mu so the offset is exactly +3 px at W = 8
        let mu_v = 0.5 + 3.0 / (2.0 * TRANSLATE_MAX * 8.0);
        let mut tape = Tape::<f32>::new();
        let mut rng = Rng::new(0);
        let mu = Tensor::scalar(mu_v as f32);
        let y = apply_image_op(&mut tape, AugOp::TranslateX, &x, &mu, &mut rng).unwrap();
        for row in 0..8 {
            for col in 3..8 {
                let expect = x.data()[row * 8 + (col - 3)];
                let got = y.data()[row * 8 + col];
                assert!(
                    (expect - got).abs() < 1e-5,
                    "pixel ({row},{col}): {got} vs shifted {expect}"
                );
            }
        }
    }

    #[test]
    fn solarize_below_threshold_keeps_pixels() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![0.1f32, 0.4, 0.6, 0.9]).unwrap();
        let mut tape = Tape::<f32>::new();
        let mut rng = Rng::new(0);
        let mu = Tensor::scalar(0.5f32);
        let y = apply_image_op(&mut tape, AugOp::Solarize, &x, &mu, &mut rng).unwrap();
        assert_eq!(y.data(), &[0.1, 0.4, 1.0 - 0.6, 1.0 - 0.9f32]);
    }

    #[test]
    fn posterize_one_bit_is_binary() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![0.1f32, 0.4, 0.6, 0.9]).unwrap();
        let mut tape = Tape::<f32>::new();
        let mut rng = Rng::new(0);
        let mu = Tensor::scalar(0.0f32); // maps to 1 bit
        let y = apply_image_op(&mut tape, AugOp::Posterize, &x, &mu, &mut rng).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn equalize_constant_channel_is_identity() {
        let vals = vec![0.25f32; 16];
        let out = equalize_values(&vals, (1, 1, 4, 4));
        assert_eq!(out, vals);
    }

    #[test]
    fn auto_contrast_stretches_to_full_range() {
        let vals = vec![0.4f32, 0.5, 0.6, 0.5];
        let out = auto_contrast_values(&vals, (1, 1, 2, 2));
        assert_eq!(out[0], 0.0);
        assert_eq!(out[2], 1.0);
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![0.0f32, 1.2, 0.5, 0.5]).unwrap();
        let mut tape = Tape::<f32>::new();
        let mut rng = Rng::new(0);
        let mu = Tensor::scalar(0.5f32);
        let err = apply_image_op(&mut tape, AugOp::Invert, &x, &mu, &mut rng).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn tiny_images_rejected() {
        let x = Tensor::from_vec(vec![1, 1, 1, 1], vec![0.5f32]).unwrap();
        let mut tape = Tape::<f32>::new();
        let mut rng = Rng::new(0);
        let mu = Tensor::scalar(0.5f32);
        assert!(apply_image_op(&mut tape, AugOp::Rotate, &x, &mu, &mut rng).is_err());
    }

    #[test]
    fn outputs_stay_in_range_for_every_op() {
        let x = seeded_image(2, 3, 6, 6, 9);
        for op in AugOp::DEFAULT_SET {
            for muv in [0.0f32, 0.25, 0.75, 1.0] {
                let mut tape = Tape::<f32>::new();
                let mut rng = Rng::new(17);
                let mu = Tensor::scalar(muv);
                let y = apply_image_op(&mut tape, op, &x, &mu, &mut rng).unwrap();
                assert_eq!(y.shape(), x.shape(), "{op} changed shape");
                for &v in y.data() {
                    assert!((0.0..=1.0).contains(&v), "{op} produced {v} at mu={muv}");
                }
            }
        }
    }
}
