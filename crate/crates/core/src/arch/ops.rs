//! Candidate cell operations.
//!
//! Each operation is shape-preserving at stride 1 and halves the spatial
//! extent at stride 2, so every candidate on an edge produces the same
//! output shape and can participate in the softmax mixture.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Identifier of a candidate operation on a cell edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellOp {
    Zero,
    SkipConnect,
    SepConv3,
    SepConv5,
    DilConv3,
    DilConv5,
    MaxPool3,
    AvgPool3,
}

impl CellOp {
    /// Desk-scale candidate set.
    pub const REDUCED_SET: [CellOp; 5] = [
        CellOp::Zero,
        CellOp::SkipConnect,
        CellOp::SepConv3,
        CellOp::MaxPool3,
        CellOp::AvgPool3,
    ];

    /// The full eight-operation search space.
    pub const FULL_SET: [CellOp; 8] = [
        CellOp::Zero,
        CellOp::SkipConnect,
        CellOp::SepConv3,
        CellOp::SepConv5,
        CellOp::DilConv3,
        CellOp::DilConv5,
        CellOp::MaxPool3,
        CellOp::AvgPool3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CellOp::Zero => "zero",
            CellOp::SkipConnect => "skip_connect",
            CellOp::SepConv3 => "sep_conv_3x3",
            CellOp::SepConv5 => "sep_conv_5x5",
            CellOp::DilConv3 => "dil_conv_3x3",
            CellOp::DilConv5 => "dil_conv_5x5",
            CellOp::MaxPool3 => "max_pool_3x3",
            CellOp::AvgPool3 => "avg_pool_3x3",
        }
    }

    pub fn parse(name: &str) -> Result<CellOp> {
        CellOp::FULL_SET
            .iter()
            .copied()
            .find(|op| op.name() == name)
            .ok_or_else(|| Error::UnknownOp(name.to_string()))
    }

    pub fn is_zero(self) -> bool {
        matches!(self, CellOp::Zero)
    }
}

impl std::fmt::Display for CellOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Fan-in-scaled uniform init, bound `1/sqrt(fan_in)`.
pub fn init_uniform<F: Scalar>(rng: &mut Rng, fan_in: usize, n: usize) -> Vec<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut v = vec![F::zero(); n];
    rng.fill_uniform(-bound, bound, &mut v);
    v
}

/// Parameter slots behind one batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub fn add_bn<F: Scalar>(params: &mut ParamSet<F>, name: &str, c: usize) -> BnIds {
    BnIds {
        gamma: params.add(format!("{name}.gamma"), vec![c], vec![F::one(); c]),
        beta: params.add(format!("{name}.beta"), vec![c], vec![F::zero(); c]),
    }
}

pub fn bn_forward<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    bn: BnIds,
    leaves: &[Tensor<F>],
) -> Result<Tensor<F>> {
    tape.batch_norm(x, &leaves[bn.gamma.0], &leaves[bn.beta.0], F::fromf(BN_EPS))
}

/// An operation instantiated on a specific edge (its weights live in the
/// network parameter set).
#[derive(Debug, Clone)]
pub struct OpInstance {
    pub kind: CellOp,
    pub stride: usize,
    params: OpParams,
}

#[derive(Debug, Clone)]
enum OpParams {
    None,
    /// 1x1 stride-2 projection used by skip connections in reduction cells.
    Proj { w: ParamId, bn: BnIds },
    /// ReLU -> depthwise -> pointwise -> BN separable block.
    Sep { dw: ParamId, pw: ParamId, bn: BnIds, k: usize, dil: usize },
}

impl OpInstance {
    /// Creates the instance, allocating its weights.
    pub fn new<F: Scalar>(
        kind: CellOp,
        c: usize,
        stride: usize,
        params: &mut ParamSet<F>,
        name: &str,
        rng: &mut Rng,
    ) -> Self {
        let p = match kind {
            CellOp::Zero | CellOp::MaxPool3 | CellOp::AvgPool3 => OpParams::None,
            CellOp::SkipConnect => {
                if stride == 1 {
                    OpParams::None
                } else {
                    let w = params.add(
                        format!("{name}.proj.w"),
                        vec![c, c, 1, 1],
                        init_uniform(rng, c, c * c),
                    );
                    let bn = add_bn(params, &format!("{name}.proj.bn"), c);
                    OpParams::Proj { w, bn }
                }
            }
            CellOp::SepConv3 | CellOp::SepConv5 | CellOp::DilConv3 | CellOp::DilConv5 => {
                let (k, dil) = match kind {
                    CellOp::SepConv3 => (3, 1),
                    CellOp::SepConv5 => (5, 1),
                    CellOp::DilConv3 => (3, 2),
                    CellOp::DilConv5 => (5, 2),
                    _ => unreachable!(),
                };
                let dw = params.add(
                    format!("{name}.dw"),
                    vec![c, k, k],
                    init_uniform(rng, k * k, c * k * k),
                );
                let pw = params.add(
                    format!("{name}.pw"),
                    vec![c, c, 1, 1],
                    init_uniform(rng, c, c * c),
                );
                let bn = add_bn(params, &format!("{name}.bn"), c);
                OpParams::Sep { dw, pw, bn, k, dil }
            }
        };
        OpInstance { kind, stride, params: p }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        x: &Tensor<F>,
        leaves: &[Tensor<F>],
    ) -> Result<Tensor<F>> {
        let (b, c, h, w) = x.dims4()?;
        match (&self.kind, &self.params) {
            (CellOp::Zero, _) => {
                let (oh, ow) = (h / self.stride.max(1), w / self.stride.max(1));
                Ok(Tensor::zeros(vec![b, c, oh.max(1), ow.max(1)]))
            }
            (CellOp::SkipConnect, OpParams::None) => Ok(x.clone()),
            (CellOp::SkipConnect, OpParams::Proj { w, bn }) => {
                let r = tape.relu(x)?;
                let y = tape.conv2d(&r, &leaves[w.0], self.stride, 0, 1)?;
                bn_forward(tape, &y, *bn, leaves)
            }
            (CellOp::MaxPool3, _) => tape.max_pool(x, 3, self.stride, 1),
            (CellOp::AvgPool3, _) => tape.avg_pool(x, 3, self.stride, 1),
            (_, OpParams::Sep { dw, pw, bn, k, dil }) => {
                let pad = dil * (k - 1) / 2;
                let r = tape.relu(x)?;
                let d = tape.depthwise_conv2d(&r, &leaves[dw.0], self.stride, pad, *dil)?;
                let p = tape.conv2d(&d, &leaves[pw.0], 1, 0, 1)?;
                bn_forward(tape, &p, *bn, leaves)
            }
            _ => Err(Error::InvalidArg(format!(
                "inconsistent op instance: {:?}",
                self.kind
            ))),
        }
    }
}
