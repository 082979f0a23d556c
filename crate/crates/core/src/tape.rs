//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The tape is define-by-run: every operation computes its output eagerly
//! and, when any operand is tracked, appends a node capturing the operand
//! snapshots its backward rule needs. Append order is topological order, so
//! [`Tape::backward`] is a single reverse sweep that visits each node
//! exactly once. A tape lives for one optimization step and is frozen by
//! its backward pass.
//!
//! Operands that are plain constants (no node id) flow through the same
//! methods without being recorded, so the inference paths reuse the forward
//! code at zero tape cost.

use crate::error::{Error, Result};
use crate::kernels::{self, BnSaved, ConvGeom};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{NodeId, Tensor};

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    frozen: bool,
}

struct Node<F: Scalar> {
    op: Op<F>,
}

enum Op<F: Scalar> {
    Leaf,
    Add { a: Tensor<F>, b: Tensor<F> },
    Sub { a: Tensor<F>, b: Tensor<F> },
    Mul { a: Tensor<F>, b: Tensor<F> },
    ScalarMul { a: Tensor<F>, c: F },
    AddScalar { a: Tensor<F> },
    ScaleBy { x: Tensor<F>, s: Tensor<F> },
    Index { x: Tensor<F>, i: usize },
    Matmul { a: Tensor<F>, b: Tensor<F> },
    BiasAdd { x: Tensor<F>, bias: Tensor<F> },
    Conv2d { x: Tensor<F>, w: Tensor<F>, geom: ConvGeom },
    DepthwiseConv2d { x: Tensor<F>, w: Tensor<F>, geom: ConvGeom },
    AvgPool { x: Tensor<F>, k: usize, geom: ConvGeom },
    MaxPool { x: Tensor<F>, argmax: Vec<u32> },
    Relu { x: Tensor<F> },
    Sigmoid { x: Tensor<F>, out: Tensor<F> },
    Clamp { x: Tensor<F>, lo: F, hi: F, open: bool },
    Concat { parts: Vec<Tensor<F>>, axis: usize },
    GlobalAvgPool { x: Tensor<F> },
    AffineSample { x: Tensor<F>, theta: [F; 6], mu: Option<(Tensor<F>, [F; 6])> },
    Blend { a: Tensor<F>, b: Tensor<F>, w: Tensor<F> },
    Log { x: Tensor<F> },
    Exp { x: Tensor<F>, out: Tensor<F> },
    SumAll { x: Tensor<F> },
    MeanAll { x: Tensor<F> },
    MeanAxes { x: Tensor<F>, axes: Vec<usize> },
    BroadcastTo { x: Tensor<F>, shape: Vec<usize> },
    SoftmaxT { z: Tensor<F>, out: Tensor<F>, eta: F },
    CrossEntropy { logits: Tensor<F>, labels: Vec<usize>, probs: Vec<F> },
    BatchNorm { x: Tensor<F>, gamma: Tensor<F>, beta: Tensor<F>, saved: BnSaved<F> },
    ChannelAffine { x: Tensor<F>, scale: Vec<F> },
    FlipW { x: Tensor<F> },
    GrayMix { x: Tensor<F>, weights: Vec<F> },
    Solarize { x: Tensor<F>, thresh: F, mu: Option<Tensor<F>> },
    StraightThrough { x: Tensor<F>, mu: Option<Tensor<F>> },
    GatherBatch { x: Tensor<F>, perm: Vec<usize> },
}

/// Gradient map produced by one backward sweep: node id -> gradient buffer.
/// Only gradient-requiring leaves are retained.
#[derive(Debug)]
pub struct Gradients<F> {
    by_node: Vec<Option<Vec<F>>>,
    visited: usize,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient w.r.t. a tensor, if it is a leaf that received one.
    pub fn wrt(&self, t: &Tensor<F>) -> Option<&[F]> {
        t.node()
            .and_then(|id| self.by_node.get(id.index()))
            .and_then(|g| g.as_deref())
    }

    /// Gradient as a vector, zeros if no path reached the leaf.
    pub fn wrt_or_zeros(&self, t: &Tensor<F>) -> Vec<F> {
        self.wrt(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![F::zero(); t.len()])
    }

    /// Number of tape nodes touched by the backward sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn same_shape<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("lhs shape {:?} vs rhs shape {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn stable_sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), frozen: false }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Registers a gradient-requiring leaf holding a copy of `values`.
    pub fn leaf(&mut self, shape: impl Into<Vec<usize>>, values: Vec<F>) -> Result<Tensor<F>> {
        if self.frozen {
            return Err(Error::Tape("cannot add a leaf to a frozen tape".into()));
        }
        let shape = shape.into();
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {:?} vs buffer length {}", shape, values.len()),
            ));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf });
        Ok(Tensor::tracked(shape, values, id))
    }

    fn emit(
        &mut self,
        shape: Vec<usize>,
        data: Vec<F>,
        tracked: bool,
        op: impl FnOnce(&Tensor<F>) -> Op<F>,
    ) -> Result<Tensor<F>> {
        if !tracked {
            return Tensor::from_vec(shape, data);
        }
        if self.frozen {
            return Err(Error::Tape("cannot record on a frozen tape".into()));
        }
        let id = NodeId(self.nodes.len());
        let out = Tensor::tracked(shape, data, id);
        let op = op(&out);
        self.nodes.push(Node { op });
        Ok(out)
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
        let tracked = a.grad_required() || b.grad_required();
        self.emit(a.shape().to_vec(), data, tracked, |_| Op::Add { a: a.clone(), b: b.clone() })
    }

    pub fn sub(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("sub", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| *x - *y).collect();
        let tracked = a.grad_required() || b.grad_required();
        self.emit(a.shape().to_vec(), data, tracked, |_| Op::Sub { a: a.clone(), b: b.clone() })
    }

    pub fn mul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
        let tracked = a.grad_required() || b.grad_required();
        self.emit(a.shape().to_vec(), data, tracked, |_| Op::Mul { a: a.clone(), b: b.clone() })
    }

    pub fn scalar_mul(&mut self, a: &Tensor<F>, c: F) -> Result<Tensor<F>> {
        let data = a.data().iter().map(|x| *x * c).collect();
        self.emit(a.shape().to_vec(), data, a.grad_required(), |_| Op::ScalarMul { a: a.clone(), c })
    }

    pub fn add_scalar(&mut self, a: &Tensor<F>, c: F) -> Result<Tensor<F>> {
        let data = a.data().iter().map(|x| *x + c).collect();
        self.emit(a.shape().to_vec(), data, a.grad_required(), |_| Op::AddScalar { a: a.clone() })
    }

    /// Multiplies a tensor by a scalar-valued tensor (tracked scale factor).
    pub fn scale_by(&mut self, x: &Tensor<F>, s: &Tensor<F>) -> Result<Tensor<F>> {
        if !s.is_scalar() {
            return Err(Error::shape("scale_by", format!("scale has shape {:?}", s.shape())));
        }
        let sv = s.item();
        let data = x.data().iter().map(|v| *v * sv).collect();
        let tracked = x.grad_required() || s.grad_required();
        self.emit(x.shape().to_vec(), data, tracked, |_| Op::ScaleBy { x: x.clone(), s: s.clone() })
    }

    /// Extracts element `i` of a rank-1 tensor as a scalar tensor.
    pub fn index(&mut self, x: &Tensor<F>, i: usize) -> Result<Tensor<F>> {
        if i >= x.len() {
            return Err(Error::InvalidArg(format!(
                "index {} out of range for tensor of {} elements",
                i,
                x.len()
            )));
        }
        let data = vec![x.data()[i]];
        self.emit(vec![], data, x.grad_required(), |_| Op::Index { x: x.clone(), i })
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::matmul_nn(a.data(), b.data(), m, k, n, &mut out);
        let tracked = a.grad_required() || b.grad_required();
        self.emit(vec![m, n], out, tracked, |_| Op::Matmul { a: a.clone(), b: b.clone() })
    }

    /// Adds a per-channel bias: rank-2 `[B,C] + [C]` or rank-4 `[B,C,H,W] + [C]`.
    pub fn bias_add(&mut self, x: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let c = match x.shape() {
            [_, c] | [_, c, _, _] => *c,
            s => {
                return Err(Error::shape("bias_add", format!("unsupported input shape {:?}", s)))
            }
        };
        if bias.shape() != [c] {
            return Err(Error::shape(
                "bias_add",
                format!("bias shape {:?} vs {} channels", bias.shape(), c),
            ));
        }
        let inner: usize = x.shape()[2..].iter().product();
        let mut data = x.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v += bias.data()[ch];
        }
        let tracked = x.grad_required() || bias.grad_required();
        self.emit(x.shape().to_vec(), data, tracked, |_| Op::BiasAdd {
            x: x.clone(),
            bias: bias.clone(),
        })
    }

    // -- convolutions ------------------------------------------------------

    /// Dense 2-D convolution; weights are `[co, ci, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: &Tensor<F>,
        w: &Tensor<F>,
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Result<Tensor<F>> {
        let (b, ci, h, wd) = x.dims4()?;
        let (co, ciw, kh, kw) = w.dims4()?;
        if ci != ciw {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} vs kernel channels {}", ci, ciw),
            ));
        }
        let geom = ConvGeom { stride, pad, dil };
        let oh = kernels::conv_out_dim(h, kh, pad, stride, dil);
        let ow = kernels::conv_out_dim(wd, kw, pad, stride, dil);
        let mut out = vec![F::zero(); b * co * oh * ow];
        kernels::conv2d_fwd(x.data(), (b, ci, h, wd), w.data(), (co, kh, kw), geom, &mut out);
        let tracked = x.grad_required() || w.grad_required();
        self.emit(vec![b, co, oh, ow], out, tracked, |_| Op::Conv2d {
            x: x.clone(),
            w: w.clone(),
            geom,
        })
    }

    /// Depthwise 2-D convolution; weights are `[c, kh, kw]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: &Tensor<F>,
        w: &Tensor<F>,
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Result<Tensor<F>> {
        let (b, c, h, wd) = x.dims4()?;
        let ws = w.shape();
        if ws.len() != 3 || ws[0] != c {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("kernel shape {:?} vs {} input channels", ws, c),
            ));
        }
        let (kh, kw) = (ws[1], ws[2]);
        let geom = ConvGeom { stride, pad, dil };
        let oh = kernels::conv_out_dim(h, kh, pad, stride, dil);
        let ow = kernels::conv_out_dim(wd, kw, pad, stride, dil);
        let mut out = vec![F::zero(); b * c * oh * ow];
        kernels::depthwise_fwd(x.data(), (b, c, h, wd), w.data(), (kh, kw), geom, &mut out);
        let tracked = x.grad_required() || w.grad_required();
        self.emit(vec![b, c, oh, ow], out, tracked, |_| Op::DepthwiseConv2d {
            x: x.clone(),
            w: w.clone(),
            geom,
        })
    }

    // -- pooling -----------------------------------------------------------

    pub fn avg_pool(&mut self, x: &Tensor<F>, k: usize, stride: usize, pad: usize) -> Result<Tensor<F>> {
        let (b, c, h, w) = x.dims4()?;
        let geom = ConvGeom { stride, pad, dil: 1 };
        let oh = kernels::conv_out_dim(h, k, pad, stride, 1);
        let ow = kernels::conv_out_dim(w, k, pad, stride, 1);
        let mut out = vec![F::zero(); b * c * oh * ow];
        kernels::avgpool_fwd(x.data(), (b, c, h, w), k, geom, &mut out);
        self.emit(vec![b, c, oh, ow], out, x.grad_required(), |_| Op::AvgPool {
            x: x.clone(),
            k,
            geom,
        })
    }

    pub fn max_pool(&mut self, x: &Tensor<F>, k: usize, stride: usize, pad: usize) -> Result<Tensor<F>> {
        let (b, c, h, w) = x.dims4()?;
        let geom = ConvGeom { stride, pad, dil: 1 };
        let oh = kernels::conv_out_dim(h, k, pad, stride, 1);
        let ow = kernels::conv_out_dim(w, k, pad, stride, 1);
        let mut out = vec![F::zero(); b * c * oh * ow];
        let mut argmax = Vec::new();
        kernels::maxpool_fwd(x.data(), (b, c, h, w), k, geom, &mut out, &mut argmax);
        self.emit(vec![b, c, oh, ow], out, x.grad_required(), |_| Op::MaxPool {
            x: x.clone(),
            argmax,
        })
    }

    pub fn global_avg_pool(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (b, c, h, w) = x.dims4()?;
        let inv = F::one() / F::fromf((h * w) as f64);
        let mut out = vec![F::zero(); b * c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let mut acc = F::zero();
                for v in &x.data()[base..base + h * w] {
                    acc += *v;
                }
                out[bi * c + ci] = acc * inv;
            }
        }
        self.emit(vec![b, c], out, x.grad_required(), |_| Op::GlobalAvgPool { x: x.clone() })
    }

    // -- activations and clamps ---------------------------------------------

    pub fn relu(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let data = x.data().iter().map(|v| v.max(F::zero())).collect();
        self.emit(x.shape().to_vec(), data, x.grad_required(), |_| Op::Relu { x: x.clone() })
    }

    pub fn sigmoid(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let data: Vec<F> = x.data().iter().map(|v| stable_sigmoid(*v)).collect();
        self.emit(x.shape().to_vec(), data, x.grad_required(), |out| Op::Sigmoid {
            x: x.clone(),
            out: out.detach(),
        })
    }

    /// Clamp with projection semantics: gradient passes only strictly inside
    /// `(lo, hi)`. Used when reading box-constrained parameters.
    pub fn clamp(&mut self, x: &Tensor<F>, lo: F, hi: F) -> Result<Tensor<F>> {
        self.clamp_impl(x, lo, hi, true)
    }

    /// Clamp whose gradient also passes at values exactly on the bounds.
    /// Used for pixel ranges, where inputs legitimately sit at 0 and 1.
    pub fn clamp_inclusive(&mut self, x: &Tensor<F>, lo: F, hi: F) -> Result<Tensor<F>> {
        self.clamp_impl(x, lo, hi, false)
    }

    fn clamp_impl(&mut self, x: &Tensor<F>, lo: F, hi: F, open: bool) -> Result<Tensor<F>> {
        if !(lo <= hi) {
            return Err(Error::InvalidArg(format!("clamp bounds inverted: [{}, {}]", lo, hi)));
        }
        let data = x.data().iter().map(|v| (*v).max(lo).min(hi)).collect();
        self.emit(x.shape().to_vec(), data, x.grad_required(), |_| Op::Clamp {
            x: x.clone(),
            lo,
            hi,
            open,
        })
    }

    // -- shape ops -----------------------------------------------------------

    pub fn concat(&mut self, parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat of zero tensors".into()));
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(Error::shape(
                "concat",
                format!("axis {} out of range for rank {}", axis, rank),
            ));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.shape().len() != rank {
                return Err(Error::shape("concat", "rank mismatch between parts".to_string()));
            }
            for (d, (a, b)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::shape(
                        "concat",
                        format!("dim {} differs: {:?} vs {:?}", d, parts[0].shape(), p.shape()),
                    ));
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![F::zero(); shape.iter().product()];
        let row_out = axis_total * inner;
        let mut offset = 0;
        for p in parts {
            let e = p.shape()[axis];
            for o in 0..outer {
                let src = &p.data()[o * e * inner..(o + 1) * e * inner];
                let dst = &mut data[o * row_out + offset * inner..o * row_out + (offset + e) * inner];
                dst.copy_from_slice(src);
            }
            offset += e;
        }
        let tracked = parts.iter().any(|p| p.grad_required());
        let parts: Vec<Tensor<F>> = parts.iter().map(|p| (*p).clone()).collect();
        self.emit(shape, data, tracked, |_| Op::Concat { parts, axis })
    }

    pub fn broadcast_to(&mut self, x: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
        let xs = x.shape();
        if xs.len() > shape.len() {
            return Err(Error::shape(
                "broadcast_to",
                format!("cannot broadcast {:?} to {:?}", xs, shape),
            ));
        }
        // right-align x's shape against the target
        let offset = shape.len() - xs.len();
        for (i, &d) in xs.iter().enumerate() {
            if d != 1 && d != shape[offset + i] {
                return Err(Error::shape(
                    "broadcast_to",
                    format!("cannot broadcast {:?} to {:?} at dim {}", xs, shape, i),
                ));
            }
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![F::zero(); numel];
        for (i, v) in data.iter_mut().enumerate() {
            *v = x.data()[broadcast_src_index(i, shape, xs)];
        }
        self.emit(shape.to_vec(), data, x.grad_required(), |_| Op::BroadcastTo {
            x: x.clone(),
            shape: shape.to_vec(),
        })
    }

    /// Rearranges images along the batch axis: `out[i] = x[perm[i]]`.
    pub fn gather_batch(&mut self, x: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
        let b = *x
            .shape()
            .first()
            .ok_or_else(|| Error::shape("gather_batch", "rank-0 input".to_string()))?;
        if perm.len() != b || perm.iter().any(|&p| p >= b) {
            return Err(Error::InvalidArg(format!(
                "permutation {:?} invalid for batch of {}",
                perm, b
            )));
        }
        let item: usize = x.shape()[1..].iter().product();
        let mut data = vec![F::zero(); x.len()];
        for (i, &p) in perm.iter().enumerate() {
            data[i * item..(i + 1) * item].copy_from_slice(&x.data()[p * item..(p + 1) * item]);
        }
        self.emit(x.shape().to_vec(), data, x.grad_required(), |_| Op::GatherBatch {
            x: x.clone(),
            perm: perm.to_vec(),
        })
    }

    // -- transcendental -----------------------------------------------------

    pub fn log(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let data = x.data().iter().map(|v| v.ln()).collect();
        self.emit(x.shape().to_vec(), data, x.grad_required(), |_| Op::Log { x: x.clone() })
    }

    pub fn exp(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let data: Vec<F> = x.data().iter().map(|v| v.exp()).collect();
        self.emit(x.shape().to_vec(), data, x.grad_required(), |out| Op::Exp {
            x: x.clone(),
            out: out.detach(),
        })
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum_all(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut acc = F::zero();
        for v in x.data() {
            acc += *v;
        }
        self.emit(vec![], vec![acc], x.grad_required(), |_| Op::SumAll { x: x.clone() })
    }

    pub fn mean_all(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.is_empty() {
            return Err(Error::InvalidArg("mean of empty tensor".into()));
        }
        let mut acc = F::zero();
        for v in x.data() {
            acc += *v;
        }
        let m = acc / F::fromf(x.len() as f64);
        self.emit(vec![], vec![m], x.grad_required(), |_| Op::MeanAll { x: x.clone() })
    }

    /// Mean over `axes`, keeping reduced dimensions with extent 1.
    pub fn mean_axes(&mut self, x: &Tensor<F>, axes: &[usize]) -> Result<Tensor<F>> {
        let rank = x.shape().len();
        if axes.iter().any(|&a| a >= rank) {
            return Err(Error::shape(
                "mean_axes",
                format!("axes {:?} out of range for rank {}", axes, rank),
            ));
        }
        let mut out_shape = x.shape().to_vec();
        let mut count = 1usize;
        for &a in axes {
            count *= out_shape[a];
            out_shape[a] = 1;
        }
        let inv = F::one() / F::fromf(count as f64);
        let mut data = vec![F::zero(); out_shape.iter().product()];
        for i in 0..x.len() {
            let oi = reduced_index(i, x.shape(), &out_shape);
            data[oi] += x.data()[i];
        }
        for v in &mut data {
            *v *= inv;
        }
        self.emit(out_shape, data, x.grad_required(), |_| Op::MeanAxes {
            x: x.clone(),
            axes: axes.to_vec(),
        })
    }

    // -- softmax family -------------------------------------------------------

    /// Temperature softmax over a rank-1 tensor: `softmax(z / eta)`.
    pub fn softmax_t(&mut self, z: &Tensor<F>, eta: F) -> Result<Tensor<F>> {
        if eta <= F::zero() {
            return Err(Error::InvalidArg(format!("temperature must be positive, got {}", eta)));
        }
        if z.shape().len() != 1 || z.is_empty() {
            return Err(Error::shape(
                "softmax_t",
                format!("expected non-empty rank-1 tensor, got {:?}", z.shape()),
            ));
        }
        let data = softmax_with_temp(z.data(), eta);
        self.emit(z.shape().to_vec(), data, z.grad_required(), |out| Op::SoftmaxT {
            z: z.clone(),
            out: out.detach(),
            eta,
        })
    }

    /// Gumbel-softmax: `softmax((z + g) / eta)` with fresh standard Gumbel
    /// noise. Gradients flow to `z`; the noise is a constant.
    pub fn gumbel_softmax_sample(&mut self, z: &Tensor<F>, eta: F, rng: &mut Rng) -> Result<Tensor<F>> {
        let mut noise = vec![F::zero(); z.len()];
        rng.fill_gumbel(&mut noise);
        let noise = Tensor::from_vec(z.shape().to_vec(), noise)?;
        let shifted = self.add(z, &noise)?;
        self.softmax_t(&shifted, eta)
    }

    /// Differentiable relaxation of a Bernoulli(p) gate:
    /// `sigmoid((logit(clamp(p)) + g1 - g2) / eta)` with Gumbel noise g1, g2.
    pub fn relaxed_bernoulli(&mut self, p: &Tensor<F>, eta: F, rng: &mut Rng) -> Result<Tensor<F>> {
        if eta <= F::zero() {
            return Err(Error::InvalidArg(format!("temperature must be positive, got {}", eta)));
        }
        if !p.is_scalar() {
            return Err(Error::shape(
                "relaxed_bernoulli",
                format!("probability must be scalar, got {:?}", p.shape()),
            ));
        }
        let eps = F::fromf(1e-6);
        let noise = F::fromf(rng.gumbel() - rng.gumbel());
        let pc = self.clamp(p, eps, F::one() - eps)?;
        let logp = self.log(&pc)?;
        let neg = self.scalar_mul(&pc, -F::one())?;
        let one_minus = self.add_scalar(&neg, F::one())?;
        let log1m = self.log(&one_minus)?;
        let logit = self.sub(&logp, &log1m)?;
        let shifted = self.add_scalar(&logit, noise)?;
        let scaled = self.scalar_mul(&shifted, F::one() / eta)?;
        self.sigmoid(&scaled)
    }

    /// Mean cross-entropy between logits `[B, C]` and class indices.
    pub fn cross_entropy(&mut self, logits: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
        let (b, c) = logits.dims2()?;
        if labels.len() != b {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} logit rows vs {} labels", b, labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArg(format!(
                "label {} out of range for {} classes",
                bad, c
            )));
        }
        let mut probs = vec![F::zero(); b * c];
        let mut loss = F::zero();
        for (row, &label) in labels.iter().enumerate() {
            let l = &logits.data()[row * c..(row + 1) * c];
            let m = l.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
            let mut denom = F::zero();
            for &v in l {
                denom += (v - m).exp();
            }
            let lse = m + denom.ln();
            loss += lse - l[label];
            for (j, &v) in l.iter().enumerate() {
                probs[row * c + j] = (v - lse).exp();
            }
        }
        loss = loss / F::fromf(b as f64);
        self.emit(vec![], vec![loss], logits.grad_required(), |_| Op::CrossEntropy {
            logits: logits.clone(),
            labels: labels.to_vec(),
            probs,
        })
    }

    // -- normalization ---------------------------------------------------------

    /// Batch normalization with per-minibatch statistics and learnable
    /// per-channel affine (`gamma`, `beta`).
    pub fn batch_norm(
        &mut self,
        x: &Tensor<F>,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        eps: F,
    ) -> Result<Tensor<F>> {
        let (b, c, h, w) = x.dims4()?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "gamma {:?} / beta {:?} vs {} channels",
                    gamma.shape(),
                    beta.shape(),
                    c
                ),
            ));
        }
        let mut out = vec![F::zero(); x.len()];
        let saved =
            kernels::batchnorm_fwd(x.data(), (b, c, h, w), gamma.data(), beta.data(), eps, &mut out);
        let tracked = x.grad_required() || gamma.grad_required() || beta.grad_required();
        self.emit(x.shape().to_vec(), out, tracked, |_| Op::BatchNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            saved,
        })
    }

    /// Fixed per-channel affine `x * scale[c] + shift[c]` (used for dataset
    /// normalization; constants, no gradient to scale/shift).
    pub fn channel_affine(&mut self, x: &Tensor<F>, scale: &[F], shift: &[F]) -> Result<Tensor<F>> {
        let (_, c, _, _) = x.dims4()?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape(
                "channel_affine",
                format!("{} channels vs scale {} / shift {}", c, scale.len(), shift.len()),
            ));
        }
        let inner: usize = x.shape()[2..].iter().product();
        let mut data = x.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = *v * scale[ch] + shift[ch];
        }
        self.emit(x.shape().to_vec(), data, x.grad_required(), |_| Op::ChannelAffine {
            x: x.clone(),
            scale: scale.to_vec(),
        })
    }

    // -- image-space primitives --------------------------------------------------

    /// Bilinear sampling of a batch on an affine grid (see
    /// [`kernels::affine_sample_fwd`] for the coordinate convention).
    /// `mu` optionally links the grid parameters to a scalar magnitude with
    /// jacobian `dtheta_dmu`, so gradients reach the magnitude.
    pub fn affine_sample(
        &mut self,
        x: &Tensor<F>,
        theta: [F; 6],
        mu: Option<(&Tensor<F>, [F; 6])>,
    ) -> Result<Tensor<F>> {
        let (b, c, h, w) = x.dims4()?;
        if let Some((m, _)) = mu {
            if !m.is_scalar() {
                return Err(Error::shape(
                    "affine_sample",
                    format!("magnitude must be scalar, got {:?}", m.shape()),
                ));
            }
        }
        let mut out = vec![F::zero(); x.len()];
        kernels::affine_sample_fwd(x.data(), (b, c, h, w), &theta, &mut out);
        let tracked = x.grad_required() || mu.map_or(false, |(m, _)| m.grad_required());
        self.emit(x.shape().to_vec(), out, tracked, |_| Op::AffineSample {
            x: x.clone(),
            theta,
            mu: mu.map(|(m, j)| (m.clone(), j)),
        })
    }

    /// Linear interpolation `a + w * (b - a)` with a scalar (possibly
    /// tracked) weight.
    pub fn blend(&mut self, a: &Tensor<F>, b: &Tensor<F>, w: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("blend", a, b)?;
        if !w.is_scalar() {
            return Err(Error::shape("blend", format!("weight has shape {:?}", w.shape())));
        }
        let wv = w.item();
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(av, bv)| *av + wv * (*bv - *av))
            .collect();
        let tracked = a.grad_required() || b.grad_required() || w.grad_required();
        self.emit(a.shape().to_vec(), data, tracked, |_| Op::Blend {
            a: a.clone(),
            b: b.clone(),
            w: w.clone(),
        })
    }

    /// Reverses the width axis of a rank-4 batch.
    pub fn flip_w(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (b, c, h, w) = x.dims4()?;
        let mut data = vec![F::zero(); x.len()];
        flip_w_into(x.data(), (b, c, h, w), &mut data);
        self.emit(x.shape().to_vec(), data, x.grad_required(), |_| Op::FlipW { x: x.clone() })
    }

    /// Per-pixel weighted channel mix replicated across channels
    /// (luma-style grayscale when `weights` are luma coefficients).
    pub fn gray_mix(&mut self, x: &Tensor<F>, weights: &[F]) -> Result<Tensor<F>> {
        let (b, c, h, w) = x.dims4()?;
        if weights.len() != c {
            return Err(Error::shape(
                "gray_mix",
                format!("{} weights vs {} channels", weights.len(), c),
            ));
        }
        let hw = h * w;
        let mut data = vec![F::zero(); x.len()];
        for bi in 0..b {
            for i in 0..hw {
                let mut acc = F::zero();
                for (ci, wt) in weights.iter().enumerate() {
                    acc += *wt * x.data()[(bi * c + ci) * hw + i];
                }
                for ci in 0..c {
                    data[(bi * c + ci) * hw + i] = acc;
                }
            }
        }
        self.emit(x.shape().to_vec(), data, x.grad_required(), |_| Op::GrayMix {
            x: x.clone(),
            weights: weights.to_vec(),
        })
    }

    /// Solarize: `x < thresh ? x : 1 - x`. Differentiable in `x` almost
    /// everywhere; the magnitude gradient is straight-through (sum of output
    /// gradients), keeping the mixture gradient defined.
    pub fn solarize(&mut self, x: &Tensor<F>, thresh: F, mu: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        let data = x
            .data()
            .iter()
            .map(|&v| if v < thresh { v } else { F::one() - v })
            .collect();
        let tracked = x.grad_required() || mu.map_or(false, |m| m.grad_required());
        self.emit(x.shape().to_vec(), data, tracked, |_| Op::Solarize {
            x: x.clone(),
            thresh,
            mu: mu.cloned(),
        })
    }

    /// Wraps an exactly-computed but non-differentiable transform: forward
    /// uses `values`, backward passes the gradient through unchanged to `x`
    /// and, when present, the summed gradient to the magnitude.
    pub fn straight_through(
        &mut self,
        x: &Tensor<F>,
        values: Vec<F>,
        mu: Option<&Tensor<F>>,
    ) -> Result<Tensor<F>> {
        if values.len() != x.len() {
            return Err(Error::shape(
                "straight_through",
                format!("{} values vs input of {}", values.len(), x.len()),
            ));
        }
        let tracked = x.grad_required() || mu.map_or(false, |m| m.grad_required());
        self.emit(x.shape().to_vec(), values, tracked, |_| Op::StraightThrough {
            x: x.clone(),
            mu: mu.cloned(),
        })
    }

    // -- backward ------------------------------------------------------------

    /// Single reverse sweep from a scalar loss. Freezes the tape; gradients
    /// are returned for every gradient-requiring leaf reached by the sweep.
    pub fn backward(&mut self, loss: &Tensor<F>) -> Result<Gradients<F>> {
        if self.frozen {
            return Err(Error::Tape("backward on a frozen tape".into()));
        }
        if !loss.is_scalar() {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let Some(root) = loss.node() else {
            return Err(Error::Tape("loss is a constant; nothing to differentiate".into()));
        };
        self.frozen = true;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[root.index()] = Some(vec![F::one()]);
        let mut visited = 0usize;
        for id in (0..self.nodes.len()).rev() {
            visited += 1;
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    // keep leaf gradients in the result map
                    grads[id] = Some(g);
                }
                op => backprop_op::<F>(op, &g, &mut grads),
            }
        }
        Ok(Gradients { by_node: grads, visited })
    }
}

/// Accumulates `f`'s contribution into the gradient slot of `t`'s node, if
/// tracked.
fn add_to<F: Scalar>(grads: &mut [Option<Vec<F>>], t: &Tensor<F>, f: impl FnOnce(&mut [F])) {
    if let Some(id) = t.node() {
        let slot = grads[id.index()].get_or_insert_with(|| vec![F::zero(); t.len()]);
        f(slot);
    }
}

fn backprop_op<F: Scalar>(op: &Op<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
    match op {
        Op::Leaf => unreachable!("handled by caller"),
        Op::Add { a, b } => {
            add_to(grads, a, |d| axpy(F::one(), g, d));
            add_to(grads, b, |d| axpy(F::one(), g, d));
        }
        Op::Sub { a, b } => {
            add_to(grads, a, |d| axpy(F::one(), g, d));
            add_to(grads, b, |d| axpy(-F::one(), g, d));
        }
        Op::Mul { a, b } => {
            add_to(grads, a, |d| {
                for ((dv, gv), bv) in d.iter_mut().zip(g).zip(b.data()) {
                    *dv += *gv * *bv;
                }
            });
            add_to(grads, b, |d| {
                for ((dv, gv), av) in d.iter_mut().zip(g).zip(a.data()) {
                    *dv += *gv * *av;
                }
            });
        }
        Op::ScalarMul { a, c } => {
            add_to(grads, a, |d| axpy(*c, g, d));
        }
        Op::AddScalar { a } => {
            add_to(grads, a, |d| axpy(F::one(), g, d));
        }
        Op::ScaleBy { x, s } => {
            let sv = s.item();
            add_to(grads, x, |d| axpy(sv, g, d));
            add_to(grads, s, |d| {
                let mut acc = F::zero();
                for (gv, xv) in g.iter().zip(x.data()) {
                    acc += *gv * *xv;
                }
                d[0] += acc;
            });
        }
        Op::Index { x, i } => {
            add_to(grads, x, |d| d[*i] += g[0]);
        }
        Op::Matmul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            add_to(grads, a, |d| kernels::matmul_nt(g, b.data(), m, n, k, d));
            add_to(grads, b, |d| kernels::matmul_tn(a.data(), g, m, k, n, d));
        }
        Op::BiasAdd { x, bias } => {
            add_to(grads, x, |d| axpy(F::one(), g, d));
            let c = bias.len();
            let inner: usize = x.shape()[2..].iter().product();
            add_to(grads, bias, |d| {
                for (i, gv) in g.iter().enumerate() {
                    d[(i / inner) % c] += *gv;
                }
            });
        }
        Op::Conv2d { x, w, geom } => {
            let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
            let want_dx = x.grad_required();
            let want_dw = w.grad_required();
            if want_dx {
                add_to(grads, x, |d| {
                    kernels::conv2d_bwd(
                        g,
                        x.data(),
                        (b, ci, h, wd),
                        w.data(),
                        (co, kh, kw),
                        *geom,
                        Some(d),
                        None,
                    );
                });
            }
            if want_dw {
                add_to(grads, w, |d| {
                    kernels::conv2d_bwd(
                        g,
                        x.data(),
                        (b, ci, h, wd),
                        w.data(),
                        (co, kh, kw),
                        *geom,
                        None,
                        Some(d),
                    );
                });
            }
        }
        Op::DepthwiseConv2d { x, w, geom } => {
            let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (kh, kw) = (w.shape()[1], w.shape()[2]);
            if x.grad_required() {
                add_to(grads, x, |d| {
                    kernels::depthwise_bwd(
                        g,
                        x.data(),
                        (b, c, h, wd),
                        w.data(),
                        (kh, kw),
                        *geom,
                        Some(d),
                        None,
                    );
                });
            }
            if w.grad_required() {
                add_to(grads, w, |d| {
                    kernels::depthwise_bwd(
                        g,
                        x.data(),
                        (b, c, h, wd),
                        w.data(),
                        (kh, kw),
                        *geom,
                        None,
                        Some(d),
                    );
                });
            }
        }
        Op::AvgPool { x, k, geom } => {
            let dims = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            add_to(grads, x, |d| kernels::avgpool_bwd(g, dims, *k, *geom, d));
        }
        Op::MaxPool { x, argmax } => {
            add_to(grads, x, |d| kernels::maxpool_bwd(g, argmax, d));
        }
        Op::Relu { x } => {
            add_to(grads, x, |d| {
                for ((dv, gv), xv) in d.iter_mut().zip(g).zip(x.data()) {
                    if *xv > F::zero() {
                        *dv += *gv;
                    }
                }
            });
        }
        Op::Sigmoid { x, out } => {
            add_to(grads, x, |d| {
                for ((dv, gv), yv) in d.iter_mut().zip(g).zip(out.data()) {
                    *dv += *gv * *yv * (F::one() - *yv);
                }
            });
        }
        Op::Clamp { x, lo, hi, open } => {
            add_to(grads, x, |d| {
                for ((dv, gv), xv) in d.iter_mut().zip(g).zip(x.data()) {
                    let pass = if *open {
                        *xv > *lo && *xv < *hi
                    } else {
                        *xv >= *lo && *xv <= *hi
                    };
                    if pass {
                        *dv += *gv;
                    }
                }
            });
        }
        Op::Concat { parts, axis } => {
            let rank = parts[0].shape().len();
            let outer: usize = parts[0].shape()[..*axis].iter().product();
            let inner: usize = parts[0].shape()[*axis + 1..].iter().product();
            let total: usize = parts.iter().map(|p| p.shape()[*axis]).sum();
            debug_assert!(rank > *axis);
            let row_out = total * inner;
            let mut offset = 0;
            for p in parts {
                let e = p.shape()[*axis];
                add_to(grads, p, |d| {
                    for o in 0..outer {
                        let src = &g[o * row_out + offset * inner..o * row_out + (offset + e) * inner];
                        let dst = &mut d[o * e * inner..(o + 1) * e * inner];
                        for (dv, gv) in dst.iter_mut().zip(src) {
                            *dv += *gv;
                        }
                    }
                });
                offset += e;
            }
        }
        Op::GlobalAvgPool { x } => {
            let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let inv = F::one() / F::fromf((h * w) as f64);
            add_to(grads, x, |d| {
                for bi in 0..b {
                    for ci in 0..c {
                        let gv = g[bi * c + ci] * inv;
                        let base = (bi * c + ci) * h * w;
                        for dv in &mut d[base..base + h * w] {
                            *dv += gv;
                        }
                    }
                }
            });
        }
        Op::AffineSample { x, theta, mu } => {
            let dims = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let mut dtheta = [F::zero(); 6];
            let need_dtheta = mu.as_ref().map_or(false, |(m, _)| m.grad_required());
            if x.grad_required() || need_dtheta {
                // dx and dtheta come out of one pass; dx is dropped when
                // only the magnitude is tracked.
                let mut dx = vec![F::zero(); x.len()];
                kernels::affine_sample_bwd(x.data(), g, dims, theta, &mut dx, &mut dtheta);
                add_to(grads, x, |d| axpy(F::one(), &dx, d));
            }
            if let Some((m, jac)) = mu {
                add_to(grads, m, |d| {
                    let mut acc = F::zero();
                    for (dt, j) in dtheta.iter().zip(jac) {
                        acc += *dt * *j;
                    }
                    d[0] += acc;
                });
            }
        }
        Op::Blend { a, b, w } => {
            let wv = w.item();
            add_to(grads, a, |d| axpy(F::one() - wv, g, d));
            add_to(grads, b, |d| axpy(wv, g, d));
            add_to(grads, w, |d| {
                let mut acc = F::zero();
                for ((gv, bv), av) in g.iter().zip(b.data()).zip(a.data()) {
                    acc += *gv * (*bv - *av);
                }
                d[0] += acc;
            });
        }
        Op::Log { x } => {
            add_to(grads, x, |d| {
                for ((dv, gv), xv) in d.iter_mut().zip(g).zip(x.data()) {
                    *dv += *gv / *xv;
                }
            });
        }
        Op::Exp { x, out } => {
            add_to(grads, x, |d| {
                for ((dv, gv), yv) in d.iter_mut().zip(g).zip(out.data()) {
                    *dv += *gv * *yv;
                }
            });
        }
        Op::SumAll { x } => {
            add_to(grads, x, |d| {
                for dv in d.iter_mut() {
                    *dv += g[0];
                }
            });
        }
        Op::MeanAll { x } => {
            let inv = F::one() / F::fromf(x.len() as f64);
            add_to(grads, x, |d| {
                for dv in d.iter_mut() {
                    *dv += g[0] * inv;
                }
            });
        }
        Op::MeanAxes { x, axes } => {
            let mut out_shape = x.shape().to_vec();
            let mut count = 1usize;
            for &a in axes {
                count *= out_shape[a];
                out_shape[a] = 1;
            }
            let inv = F::one() / F::fromf(count as f64);
            add_to(grads, x, |d| {
                for (i, dv) in d.iter_mut().enumerate() {
                    *dv += g[reduced_index(i, x.shape(), &out_shape)] * inv;
                }
            });
        }
        Op::BroadcastTo { x, shape } => {
            add_to(grads, x, |d| {
                for (i, gv) in g.iter().enumerate() {
                    d[broadcast_src_index(i, shape, x.shape())] += *gv;
                }
            });
        }
        Op::SoftmaxT { z, out, eta } => {
            let y = out.data();
            let mut dot = F::zero();
            for (gv, yv) in g.iter().zip(y) {
                dot += *gv * *yv;
            }
            let inv_eta = F::one() / *eta;
            add_to(grads, z, |d| {
                for ((dv, gv), yv) in d.iter_mut().zip(g).zip(y) {
                    *dv += inv_eta * *yv * (*gv - dot);
                }
            });
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let b = labels.len();
            let c = logits.shape()[1];
            let scale = g[0] / F::fromf(b as f64);
            add_to(grads, logits, |d| {
                for (row, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let indicator = if j == label { F::one() } else { F::zero() };
                        d[row * c + j] += scale * (probs[row * c + j] - indicator);
                    }
                }
            });
        }
        Op::BatchNorm { x, gamma, beta, saved } => {
            let dims = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let c = gamma.len();
            let mut dgamma = vec![F::zero(); c];
            let mut dbeta = vec![F::zero(); c];
            let mut dx = vec![F::zero(); x.len()];
            kernels::batchnorm_bwd(g, x.data(), dims, gamma.data(), saved, &mut dx, &mut dgamma, &mut dbeta);
            add_to(grads, x, |d| axpy(F::one(), &dx, d));
            add_to(grads, gamma, |d| axpy(F::one(), &dgamma, d));
            add_to(grads, beta, |d| axpy(F::one(), &dbeta, d));
        }
        Op::ChannelAffine { x, scale } => {
            let c = scale.len();
            let inner: usize = x.shape()[2..].iter().product();
            add_to(grads, x, |d| {
                for (i, (dv, gv)) in d.iter_mut().zip(g).enumerate() {
                    *dv += *gv * scale[(i / inner) % c];
                }
            });
        }
        Op::FlipW { x } => {
            let dims = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            add_to(grads, x, |d| {
                let mut flipped = vec![F::zero(); g.len()];
                flip_w_into(g, dims, &mut flipped);
                axpy(F::one(), &flipped, d);
            });
        }
        Op::GrayMix { x, weights } => {
            let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let hw = h * w;
            add_to(grads, x, |d| {
                for bi in 0..b {
                    for i in 0..hw {
                        let mut gsum = F::zero();
                        for ci in 0..c {
                            gsum += g[(bi * c + ci) * hw + i];
                        }
                        for (ci, wt) in weights.iter().enumerate() {
                            d[(bi * c + ci) * hw + i] += *wt * gsum;
                        }
                    }
                }
            });
        }
        Op::Solarize { x, thresh, mu } => {
            add_to(grads, x, |d| {
                for ((dv, gv), xv) in d.iter_mut().zip(g).zip(x.data()) {
                    if *xv < *thresh {
                        *dv += *gv;
                    } else {
                        *dv -= *gv;
                    }
                }
            });
            if let Some(m) = mu {
                add_to(grads, m, |d| {
                    let mut acc = F::zero();
                    for gv in g {
                        acc += *gv;
                    }
                    d[0] += acc;
                });
            }
        }
        Op::StraightThrough { x, mu } => {
            add_to(grads, x, |d| axpy(F::one(), g, d));
            if let Some(m) = mu {
                add_to(grads, m, |d| {
                    let mut acc = F::zero();
                    for gv in g {
                        acc += *gv;
                    }
                    d[0] += acc;
                });
            }
        }
        Op::GatherBatch { x, perm } => {
            let item: usize = x.shape()[1..].iter().product();
            add_to(grads, x, |d| {
                for (i, &p) in perm.iter().enumerate() {
                    let src = &g[i * item..(i + 1) * item];
                    let dst = &mut d[p * item..(p + 1) * item];
                    for (dv, gv) in dst.iter_mut().zip(src) {
                        *dv += *gv;
                    }
                }
            });
        }
    }
}

fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * *xv;
    }
}

fn flip_w_into<F: Scalar>(src: &[F], (b, c, h, w): (usize, usize, usize, usize), dst: &mut [F]) {
    for row in 0..b * c * h {
        let base = row * w;
        for i in 0..w {
            dst[base + i] = src[base + w - 1 - i];
        }
    }
}

/// Linear index of `out_idx`'s source element under right-aligned
/// singleton-expansion broadcasting from `src_shape` to `dst_shape`.
fn broadcast_src_index(mut out_idx: usize, dst_shape: &[usize], src_shape: &[usize]) -> usize {
    let offset = dst_shape.len() - src_shape.len();
    let mut src_idx = 0usize;
    let mut src_stride = 1usize;
    // walk dims right to left
    let mut strides_done = vec![0usize; src_shape.len()];
    for (i, &d) in src_shape.iter().enumerate().rev() {
        strides_done[i] = src_stride;
        src_stride *= d;
    }
    for (i, &dd) in dst_shape.iter().enumerate().rev() {
        let coord = out_idx % dd;
        out_idx /= dd;
        if i >= offset {
            let si = i - offset;
            if src_shape[si] != 1 {
                src_idx += coord * strides_done[si];
            }
        }
    }
    src_idx
}

/// Linear index in the keepdims-reduced output for input element `i`.
fn reduced_index(mut i: usize, shape: &[usize], out_shape: &[usize]) -> usize {
    let mut oi = 0usize;
    let mut ostride = 1usize;
    let mut ostrides = vec![0usize; out_shape.len()];
    for (d, &e) in out_shape.iter().enumerate().rev() {
        ostrides[d] = ostride;
        ostride *= e;
    }
    for (d, &e) in shape.iter().enumerate().rev() {
        let coord = i % e;
        i /= e;
        if out_shape[d] != 1 {
            oi += coord * ostrides[d];
        }
    }
    oi
}

/// Numerically stable `softmax(z / eta)`.
pub fn softmax_with_temp<F: Scalar>(z: &[F], eta: F) -> Vec<F> {
    let m = z.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
    let mut out: Vec<F> = z.iter().map(|&v| ((v - m) / eta).exp()).collect();
    let mut denom = F::zero();
    for v in &out {
        denom += *v;
    }
    for v in &mut out {
        *v = *v / denom;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_n(tape: &mut Tape<f32>, vals: &[f32]) -> Tensor<f32> {
        tape.leaf(vec![vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::<f32>::new();
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap();
        let c = tape.add(&a, &b).unwrap();
        assert_eq!(c.data(), &[4.0, 6.0]);
        // constants in, constant out: nothing recorded
        assert_eq!(tape.num_nodes(), 0);
    }

    #[test]
    fn add_shape_mismatch_names_dims() {
        let mut tape = Tape::<f32>::new();
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![3, 2]);
        let err = tape.add(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut tape = Tape::<f32>::new();
        let mut rng = crate::rng::Rng::new(5);
        let mut a = vec![0.0f32; 6];
        let mut b = vec![0.0f32; 6];
        rng.fill_uniform(-1.0, 1.0, &mut a);
        rng.fill_uniform(-1.0, 1.0, &mut b);
        let ta = Tensor::from_vec(vec![2, 3], a.clone()).unwrap();
        let tb = Tensor::from_vec(vec![3, 2], b.clone()).unwrap();
        let out = tape.matmul(&ta, &tb).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0f32;
                for p in 0..3 {
                    acc += a[i * 3 + p] * b[p * 2 + j];
                }
                assert!((out.data()[i * 2 + j] - acc).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn softmax_uniform_on_zero_logits() {
        let mut tape = Tape::<f32>::new();
        let z = Tensor::from_vec(vec![4], vec![0.0; 4]).unwrap();
        let y = tape.softmax_t(&z, 1.0).unwrap();
        for v in y.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_closed_form_two_logits() {
        let mut tape = Tape::<f32>::new();
        let z = Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap();
        let y = tape.softmax_t(&z, 1.0).unwrap();
        let e = std::f32::consts::E;
        assert!((y.data()[0] - e / (e + 1.0)).abs() < 1e-6);
        assert!((y.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-6);
        assert!((y.data()[0] - 0.7311).abs() < 1e-4);
        assert!((y.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_sums_to_one_across_temps() {
        let mut rng = crate::rng::Rng::new(9);
        for &eta in &[0.01f32, 0.5, 1.0, 7.0, 100.0] {
            let mut z = vec![0.0f32; 6];
            rng.fill_uniform(-20.0, 20.0, &mut z);
            let mut tape = Tape::<f32>::new();
            let zt = Tensor::from_vec(vec![6], z).unwrap();
            let y = tape.softmax_t(&zt, eta).unwrap();
            let s: f32 = y.data().iter().sum();
            assert!((s - 1.0).abs() <= 1e-6, "eta={eta}, sum={s}");
        }
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let mut tape = Tape::<f32>::new();
        let z = Tensor::from_vec(vec![2], vec![0.0, 1.0]).unwrap();
        assert!(tape.softmax_t(&z, 0.0).is_err());
        assert!(tape.softmax_t(&z, -1.0).is_err());
    }

    #[test]
    fn gumbel_softmax_reproducible_bit_for_bit() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let mut rng = crate::rng::Rng::new(123);
            let z = Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap();
            tape.gumbel_softmax_sample(&z, 1.0, &mut rng)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
        let s: f32 = {
            let mut tape = Tape::<f32>::new();
            let mut rng = crate::rng::Rng::new(123);
            let z = Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap();
            tape.gumbel_softmax_sample(&z, 1.0, &mut rng).unwrap().data().iter().sum()
        };
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gumbel_softmax_low_temp_is_nearly_one_hot() {
        let mut rng = crate::rng::Rng::new(42);
        let mut hard = 0usize;
        for _ in 0..1000 {
            let mut tape = Tape::<f32>::new();
            let z = Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap();
            let y = tape.gumbel_softmax_sample(&z, 0.01, &mut rng).unwrap();
            let max = y.data().iter().fold(0.0f32, |a, &v| a.max(v));
            if max > 0.99 {
                hard += 1;
            }
        }
        assert!(hard >= 950, "only {hard}/1000 samples were near one-hot");
    }

    #[test]
    fn gumbel_softmax_high_temp_is_nearly_uniform() {
        let mut rng = crate::rng::Rng::new(43);
        let mut mean = [0.0f64; 3];
        for _ in 0..1000 {
            let mut tape = Tape::<f32>::new();
            let z = Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap();
            let y = tape.gumbel_softmax_sample(&z, 100.0, &mut rng).unwrap();
            for (m, v) in mean.iter_mut().zip(y.data()) {
                *m += *v as f64;
            }
        }
        for m in mean {
            assert!((m / 1000.0 - 1.0 / 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn relaxed_bernoulli_mean_tracks_p() {
        let mut rng = crate::rng::Rng::new(7);
        let mut acc = 0.0f64;
        for _ in 0..10_000 {
            let mut tape = Tape::<f32>::new();
            let p = Tensor::scalar(0.5f32);
            let s = tape.relaxed_bernoulli(&p, 0.5, &mut rng).unwrap();
            acc += s.item() as f64;
        }
        let mean = acc / 10_000.0;
        assert!((0.48..=0.52).contains(&mean), "mean {mean}");
    }

    #[test]
    fn relaxed_bernoulli_saturates_at_clamped_one() {
        let mut rng = crate::rng::Rng::new(8);
        let mut high = 0usize;
        for _ in 0..10_000 {
            let mut tape = Tape::<f32>::new();
            let p = Tensor::scalar(1.0f32); // clamped internally to 1 - 1e-6
            let s = tape.relaxed_bernoulli(&p, 0.5, &mut rng).unwrap();
            if s.item() > 0.99 {
                high += 1;
            }
        }
        assert!(high >= 9900, "only {high}/10000 samples above 0.99");
    }

    #[test]
    fn relaxed_bernoulli_deterministic_under_seed() {
        let draw = || {
            let mut tape = Tape::<f32>::new();
            let mut rng = crate::rng::Rng::new(77);
            let p = Tensor::scalar(0.3f32);
            tape.relaxed_bernoulli(&p, 1.0, &mut rng).unwrap().item().to_bits()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_classes() {
        let mut tape = Tape::<f32>::new();
        let logits = Tensor::<f32>::zeros(vec![3, 10]);
        let loss = tape.cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss.item() - 10.0f32.ln()).abs() < 1e-6);
        assert!((loss.item() - 2.302585).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_saturated_correct_prediction() {
        let mut tape = Tape::<f32>::new();
        let mut vals = vec![0.0f32; 2 * 4];
        vals[0] = 1000.0;
        vals[4 + 2] = 1000.0;
        let logits = Tensor::from_vec(vec![2, 4], vals).unwrap();
        let loss = tape.cross_entropy(&logits, &[0, 2]).unwrap();
        assert!(loss.item() < 1e-4);
    }

    #[test]
    fn cross_entropy_matches_logsumexp_oracle() {
        let mut rng = crate::rng::Rng::new(21);
        let mut vals = vec![0.0f32; 12];
        rng.fill_uniform(-3.0, 3.0, &mut vals);
        let labels = [2usize, 0, 1, 2];
        let mut tape = Tape::<f32>::new();
        let logits = Tensor::from_vec(vec![4, 3], vals.clone()).unwrap();
        let loss = tape.cross_entropy(&logits, &labels).unwrap();
        // independent oracle: direct log-sum-exp in f64
        let mut expect = 0.0f64;
        for (row, &label) in labels.iter().enumerate() {
            let l: Vec<f64> = vals[row * 3..(row + 1) * 3].iter().map(|&v| v as f64).collect();
            let lse = l.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect += lse - l[label];
        }
        expect /= 4.0;
        assert!((loss.item() as f64 - expect).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_rejects_label_out_of_range() {
        let mut tape = Tape::<f32>::new();
        let logits = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(tape.cross_entropy(&logits, &[0, 3]).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = leaf_n(&mut tape, &[1.0, -2.0, 7.0, 0.5]);
        let loss = tape.sum_all(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn disconnected_leaf_gets_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = leaf_n(&mut tape, &[1.0, 2.0]);
        let unused = leaf_n(&mut tape, &[5.0]);
        let loss = tape.sum_all(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.wrt(&unused).is_none());
        assert_eq!(grads.wrt_or_zeros(&unused), vec![0.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f32>::new();
        let x = leaf_n(&mut tape, &[1.0, 2.0]);
        let y = tape.relu(&x).unwrap();
        let err = tape.backward(&y).unwrap_err().to_string();
        assert!(err.contains("scalar"), "{err}");
    }

    #[test]
    fn double_backward_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = leaf_n(&mut tape, &[1.0, 2.0]);
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert!(tape.is_frozen());
        let err = tape.backward(&loss).unwrap_err().to_string();
        assert!(err.contains("frozen"), "{err}");
    }

    #[test]
    fn forward_after_freeze_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = leaf_n(&mut tape, &[1.0, 2.0]);
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert!(tape.relu(&x).is_err());
        assert!(tape.leaf(vec![1], vec![0.0]).is_err());
    }

    #[test]
    fn backward_visits_every_node_once() {
        let mut tape = Tape::<f32>::new();
        let x = leaf_n(&mut tape, &[0.3, -0.7, 1.1]);
        let r = tape.relu(&x).unwrap();
        let s = tape.sigmoid(&r).unwrap();
        let loss = tape.mean_all(&s).unwrap();
        let n = tape.num_nodes();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.visited(), n);
    }

    #[test]
    fn forward_and_gradients_bit_identical_across_runs() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let mut rng = crate::rng::Rng::new(31);
            let mut vals = vec![0.0f32; 8];
            rng.fill_uniform(-1.0, 1.0, &mut vals);
            let x = tape.leaf(vec![8], vals).unwrap();
            let z = tape.gumbel_softmax_sample(&x, 0.7, &mut rng).unwrap();
            let s = tape.sigmoid(&z).unwrap();
            let loss = tape.sum_all(&s).unwrap();
            let grads = tape.backward(&loss).unwrap();
            (
                loss.item().to_bits(),
                grads.wrt(&x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn max_pool_tie_gradient_goes_to_lowest_index() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let y = tape.max_pool(&x, 2, 1, 0).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn clamp_gradient_zero_outside_open_interval() {
        let mut tape = Tape::<f32>::new();
        let x = leaf_n(&mut tape, &[-0.5, 0.5, 1.5]);
        let y = tape.clamp(&x, 0.0, 1.0).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let b = tape.leaf(vec![1, 3, 1, 1], vec![3.0, 4.0, 5.0]).unwrap();
        let cat = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(cat.shape(), &[1, 5, 1, 1]);
        assert_eq!(cat.data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let loss = tape.sum_all(&cat).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&a).unwrap(), &[1.0, 1.0]);
        assert_eq!(grads.wrt(&b).unwrap(), &[1.0, 1.0, 1.0]);
    }
}
