//! Reverse-mode tape.
//!
//! Every primitive pushes one node holding the op kind, the freshly
//! computed output buffer and whatever forward-pass state its backward
//! rule needs (pooling argmaxes, batch statistics, ...). Nodes are
//! appended in topological order, so `backward` is a single reverse
//! sweep that visits each node exactly once. Gradients accumulate into
//! per-node buffers and can be copied back into [`Tensor`]s or a
//! [`ParamStore`] afterwards.

use super::conv::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub type VarId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Per-channel batch statistics captured by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        geom: ConvGeom,
    },
    Pool2d {
        x: VarId,
        mode: PoolMode,
        window: usize,
        stride: usize,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: VarId,
    },
    GlobalMaxPool {
        x: VarId,
        argmax: Vec<u32>,
    },
    Relu {
        x: VarId,
    },
    Sigmoid {
        x: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Scale {
        x: VarId,
        factor: f64,
    },
    DivScalar {
        x: VarId,
        divisor: f64,
    },
    Sum {
        x: VarId,
    },
    ChannelSum {
        x: VarId,
    },
    ConcatChannels {
        xs: Vec<VarId>,
    },
    SliceChannels {
        x: VarId,
        from: usize,
        to: usize,
    },
    BroadcastSpatial {
        x: VarId,
        h: usize,
        w: usize,
    },
    Reshape {
        x: VarId,
    },
    Linear {
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
        // In train mode the statistics are functions of x, which adds the
        // mean/variance correction terms to dx; in eval mode they are
        // constants and the op is a per-channel affine map.
        train: bool,
    },
    GaborKernel {
        omega: VarId,
        theta: VarId,
        psi: VarId,
        sigma: VarId,
        k: usize,
    },
    WeightedCrossEntropy {
        logits: VarId,
        targets: Vec<usize>,
        weights: [f64; 2],
        weight_sum: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Pool2d { .. } => "pool2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::DivScalar { .. } => "div_scalar",
            Op::Sum { .. } => "sum",
            Op::ChannelSum { .. } => "channel_sum",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::BroadcastSpatial { .. } => "broadcast_spatial",
            Op::Reshape { .. } => "reshape",
            Op::Linear { .. } => "linear",
            Op::BatchNorm { .. } => "batch_norm",
            Op::GaborKernel { .. } => "gabor_kernel",
            Op::WeightedCrossEntropy { .. } => "weighted_cross_entropy",
        }
    }

    fn inputs(&self, buf: &mut Vec<VarId>) {
        buf.clear();
        match self {
            Op::Leaf => {}
            Op::Conv2d { x, w, bias, .. } => {
                buf.extend([*x, *w]);
                if let Some(b) = bias {
                    buf.push(*b);
                }
            }
            Op::Pool2d { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::GlobalMaxPool { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Scale { x, .. }
            | Op::DivScalar { x, .. }
            | Op::Sum { x }
            | Op::ChannelSum { x }
            | Op::SliceChannels { x, .. }
            | Op::BroadcastSpatial { x, .. }
            | Op::Reshape { x } => buf.push(*x),
            Op::Add { a, b } | Op::Mul { a, b } => buf.extend([*a, *b]),
            Op::ConcatChannels { xs } => buf.extend(xs.iter().copied()),
            Op::Linear { x, w, bias } => {
                buf.extend([*x, *w]);
                if let Some(b) = bias {
                    buf.push(*b);
                }
            }
            Op::BatchNorm { x, gamma, beta, .. } => buf.extend([*x, *gamma, *beta]),
            Op::GaborKernel {
                omega,
                theta,
                psi,
                sigma,
                ..
            } => buf.extend([*omega, *theta, *psi, *sigma]),
            Op::WeightedCrossEntropy { logits, .. } => buf.push(*logits),
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs: bool,
}

/// Recorded forward graph plus gradient buffers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(ParamId, VarId)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs: bool) -> VarId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            data,
            needs,
        });
        self.grads.push(None);
        id
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id].needs
    }

    fn any_needs(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<VarId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid("constant data length does not match shape"));
        }
        Ok(self.push(Op::Leaf, shape, data, false))
    }

    /// Copies a tensor onto the tape; differentiable iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// Binds a stored parameter. Repeated binds of the same parameter
    /// return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> VarId {
        if let Some(&(_, vid)) = self.bindings.iter().find(|(pid, _)| *pid == id) {
            return vid;
        }
        let entry = store.entry(id);
        let vid = self.push(
            Op::Leaf,
            entry.tensor.shape().to_vec(),
            entry.tensor.data().to_vec(),
            entry.trainable,
        );
        self.bindings.push((id, vid));
        vid
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn data(&self, id: VarId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    /// First node (in execution order) whose output holds a NaN/Inf.
    /// Because the tape is topological this is the op that produced it.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.data.iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (i, n.op.name()))
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<VarId> {
        let geom = ConvGeom::resolve(self.shape(x), self.shape(w), stride, padding, dilation)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape_mismatch(
                    "conv2d bias vs output channels",
                    self.shape(b),
                    &[geom.cout],
                ));
            }
        }
        let out = conv::conv2d_forward(self.data(x), self.data(w), bias.map(|b| self.data(b)), &geom);
        let mut ids = vec![x, w];
        ids.extend(bias);
        let needs = self.any_needs(&ids);
        Ok(self.push(Op::Conv2d { x, w, bias, geom }, geom.output_shape(), out, needs))
    }

    pub fn pool2d(&mut self, x: VarId, mode: PoolMode, window: usize, stride: usize) -> Result<VarId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::invalid(format!("pool2d expects [B,C,H,W], got {s:?}")));
        }
        if window < 1 || stride < 1 {
            return Err(Error::invalid("pool2d requires window, stride >= 1"));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if window > h || window > w {
            return Err(Error::invalid(format!(
                "pool2d window {window} larger than spatial dims {h}x{w}"
            )));
        }
        let oh = conv::pool_output_dim(h, window, stride);
        let ow = conv::pool_output_dim(w, window, stride);
        let needs = self.needs(x);
        let (out, argmax) = match mode {
            PoolMode::Max => conv::max_pool_forward(self.data(x), b, c, h, w, window, stride),
            PoolMode::Avg => (conv::avg_pool_forward(self.data(x), b, c, h, w, window, stride), Vec::new()),
        };
        Ok(self.push(
            Op::Pool2d {
                x,
                mode,
                window,
                stride,
                argmax,
            },
            vec![b, c, oh, ow],
            out,
            needs,
        ))
    }

    /// Adaptive average pooling with a 1x1 target, i.e. global average pooling.
    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::invalid(format!("global_avg_pool expects [B,C,H,W], got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let data = self.data(x);
        let mut out = vec![0.0; b * c];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = data[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
        let needs = self.needs(x);
        Ok(self.push(Op::GlobalAvgPool { x }, vec![b, c, 1, 1], out, needs))
    }

    /// Adaptive max pooling with a 1x1 target.
    pub fn global_max_pool(&mut self, x: VarId) -> Result<VarId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::invalid(format!("global_max_pool expects [B,C,H,W], got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let data = self.data(x);
        let mut out = vec![0.0; b * c];
        let mut arg = vec![0u32; b * c];
        for i in 0..b * c {
            let base = i * plane;
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = base;
            for (j, &v) in data[base..base + plane].iter().enumerate() {
                if v > best {
                    best = v;
                    best_idx = base + j;
                }
            }
            out[i] = best;
            arg[i] = best_idx as u32;
        }
        let needs = self.needs(x);
        Ok(self.push(Op::GlobalMaxPool { x, argmax: arg }, vec![b, c, 1, 1], out, needs))
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Relu { x }, shape, out, needs))
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Sigmoid { x }, shape, out, needs))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape_mismatch("add operands", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(Op::Add { a, b }, shape, out, needs))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape_mismatch("mul operands", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, shape, out, needs))
    }

    pub fn scale(&mut self, x: VarId, factor: f64) -> Result<VarId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Scale { x, factor }, shape, out, needs))
    }

    /// Division instead of multiplication by a reciprocal, so exact
    /// quotients (e.g. averaging equal branches) stay exact.
    pub fn div_scalar(&mut self, x: VarId, divisor: f64) -> Result<VarId> {
        if divisor == 0.0 {
            return Err(Error::invalid("div_scalar by zero"));
        }
        let out: Vec<f64> = self.data(x).iter().map(|&v| v / divisor).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::DivScalar { x, divisor }, shape, out, needs))
    }

    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x);
        Ok(self.push(Op::Sum { x }, vec![1], vec![s], needs))
    }

    /// Sums over the channel axis: [B,C,H,W] -> [B,1,H,W].
    pub fn channel_sum(&mut self, x: VarId) -> Result<VarId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::invalid(format!("channel_sum expects [B,C,H,W], got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let data = self.data(x);
        let mut out = vec![0.0; b * plane];
        for bi in 0..b {
            for ci in 0..c {
                let src = &data[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                let dst = &mut out[bi * plane..(bi + 1) * plane];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::ChannelSum { x }, vec![b, 1, h, w], out, needs))
    }

    pub fn concat_channels(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_channels needs at least one input"));
        }
        let first = self.shape(xs[0]).to_vec();
        if first.len() != 4 {
            return Err(Error::invalid(format!("concat_channels expects [B,C,H,W], got {first:?}")));
        }
        let mut total_c = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(Error::shape_mismatch("concat_channels non-channel dims", &first, s));
            }
            total_c += s[1];
        }
        let (b, h, w) = (first[0], first[2], first[3]);
        let plane = h * w;
        let mut out = vec![0.0; b * total_c * plane];
        for bi in 0..b {
            let mut c_off = 0;
            for &x in xs {
                let c = self.shape(x)[1];
                let src = &self.data(x)[bi * c * plane..(bi + 1) * c * plane];
                let dst_base = (bi * total_c + c_off) * plane;
                out[dst_base..dst_base + c * plane].copy_from_slice(src);
                c_off += c;
            }
        }
        let needs = self.any_needs(xs);
        Ok(self.push(
            Op::ConcatChannels { xs: xs.to_vec() },
            vec![b, total_c, h, w],
            out,
            needs,
        ))
    }

    /// Channel range `[from, to)` of a [B,C,H,W] tensor.
    pub fn slice_channels(&mut self, x: VarId, from: usize, to: usize) -> Result<VarId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::invalid(format!("slice_channels expects [B,C,H,W], got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if from >= to || to > c {
            return Err(Error::invalid(format!(
                "slice_channels range {from}..{to} invalid for {c} channels"
            )));
        }
        let plane = h * w;
        let cs = to - from;
        let data = self.data(x);
        let mut out = vec![0.0; b * cs * plane];
        for bi in 0..b {
            let src = &data[(bi * c + from) * plane..(bi * c + to) * plane];
            out[bi * cs * plane..(bi + 1) * cs * plane].copy_from_slice(src);
        }
        let needs = self.needs(x);
        Ok(self.push(Op::SliceChannels { x, from, to }, vec![b, cs, h, w], out, needs))
    }

    /// Broadcasts [B,C,1,1] over a spatial extent: -> [B,C,H,W].
    pub fn broadcast_spatial(&mut self, x: VarId, h: usize, w: usize) -> Result<VarId> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] != 1 || s[3] != 1 {
            return Err(Error::invalid(format!("broadcast_spatial expects [B,C,1,1], got {s:?}")));
        }
        let (b, c) = (s[0], s[1]);
        let plane = h * w;
        let data = self.data(x);
        let mut out = vec![0.0; b * c * plane];
        for (i, &v) in data.iter().enumerate() {
            out[i * plane..(i + 1) * plane].fill(v);
        }
        let needs = self.needs(x);
        Ok(self.push(Op::BroadcastSpatial { x, h, w }, vec![b, c, h, w], out, needs))
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::shape_mismatch("reshape", self.shape(x), &shape));
        }
        let out = self.data(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape { x }, shape, out, needs))
    }

    /// Affine map over feature vectors: [B,F] x [O,F] (+[O]) -> [B,O].
    /// Equivalent to a 1x1 convolution on a 1x1 spatial map.
    pub fn linear(&mut self, x: VarId, w: VarId, bias: Option<VarId>) -> Result<VarId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape_mismatch("linear input vs weight", xs, ws));
        }
        let (b, f, o) = (xs[0], xs[1], ws[0]);
        if let Some(bid) = bias {
            if self.shape(bid) != [o] {
                return Err(Error::shape_mismatch("linear bias", self.shape(bid), &[o]));
            }
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = vec![0.0; b * o];
        for bi in 0..b {
            let xrow = &xd[bi * f..(bi + 1) * f];
            for oi in 0..o {
                let wrow = &wd[oi * f..(oi + 1) * f];
                let mut s = 0.0;
                for j in 0..f {
                    s += xrow[j] * wrow[j];
                }
                out[bi * o + oi] = s;
            }
        }
        if let Some(bid) = bias {
            let bd = self.data(bid).to_vec();
            for bi in 0..b {
                for oi in 0..o {
                    out[bi * o + oi] += bd[oi];
                }
            }
        }
        let mut ids = vec![x, w];
        ids.extend(bias);
        let needs = self.any_needs(&ids);
        Ok(self.push(Op::Linear { x, w, bias }, vec![b, o], out, needs))
    }

    /// Train-mode batch norm: normalises with the batch statistics and
    /// returns them so the caller can update running buffers.
    pub fn batch_norm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> Result<(VarId, BnStats)> {
        let (b, c, h, w) = self.bn_check(x, gamma, beta)?;
        let plane = h * w;
        let n = (b * plane) as f64;
        let data = self.data(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                s += data[base..base + plane].iter().sum::<f64>();
            }
            mean[ci] = s / n;
            let mut v = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for &xv in &data[base..base + plane] {
                    let d = xv - mean[ci];
                    v += d * d;
                }
            }
            var[ci] = v / n;
        }
        let out = self.bn_apply(x, gamma, beta, eps, &mean, &var);
        let stats = BnStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let needs = self.any_needs(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        let id = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
                train: true,
            },
            shape,
            out,
            needs,
        );
        Ok((id, stats))
    }

    /// Eval-mode batch norm: normalises with the provided running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<VarId> {
        let (_, c, _, _) = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::invalid("batch_norm running statistics length mismatch"));
        }
        let out = self.bn_apply(x, gamma, beta, eps, running_mean, running_var);
        let needs = self.any_needs(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
                train: false,
            },
            shape,
            out,
            needs,
        ))
    }

    fn bn_check(&self, x: VarId, gamma: VarId, beta: VarId) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::invalid(format!("batch_norm expects [B,C,H,W], got {s:?}")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape_mismatch(
                "batch_norm affine parameters vs channels",
                self.shape(gamma),
                &[c],
            ));
        }
        Ok((s[0], c, s[2], s[3]))
    }

    fn bn_apply(&self, x: VarId, gamma: VarId, beta: VarId, eps: f64, mean: &[f64], var: &[f64]) -> Vec<f64> {
        let s = self.shape(x);
        let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
        let data = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![0.0; data.len()];
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            let (g, be, m) = (gd[ci], bd[ci], mean[ci]);
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for j in 0..plane {
                    out[base + j] = g * (data[base + j] - m) * inv + be;
                }
            }
        }
        out
    }

    /// Synthesises one 2-D kernel per filter from (omega, theta, psi, sigma)
    /// parameter vectors of shape [N]:
    ///
    /// `g(x,y) = exp(-(x'^2+y'^2)/(2 sigma^2)) * cos(omega*x' + psi)` with
    /// `x' = x cos(theta) + y sin(theta)`, `y' = -x sin(theta) + y cos(theta)`,
    /// sampled on the centred integer grid of odd size `k`.
    ///
    /// Output shape is [N,1,k,k], ready to be used as conv weights shared
    /// across input channels. Gradients flow into all four parameter vectors.
    pub fn gabor_kernel(&mut self, omega: VarId, theta: VarId, psi: VarId, sigma: VarId, k: usize) -> Result<VarId> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::invalid(format!("gabor_kernel requires odd kernel size, got {k}")));
        }
        let n = self.data(omega).len();
        for (name, id) in [("omega", omega), ("theta", theta), ("psi", psi), ("sigma", sigma)] {
            if self.data(id).len() != n {
                return Err(Error::invalid(format!(
                    "gabor_kernel parameter `{name}` length {} != filter count {n}",
                    self.data(id).len()
                )));
            }
        }
        // 1/sigma^2 blows up as sigma -> 0; refuse before producing NaNs.
        if let Some(&bad) = self.data(sigma).iter().find(|&&s| s <= 1e-3) {
            return Err(Error::invalid(format!(
                "gabor_kernel sigma {bad} <= 1e-3: envelope is singular"
            )));
        }
        let c = (k as isize - 1) / 2;
        let mut out = vec![0.0; n * k * k];
        for fi in 0..n {
            let (om, th, ps, sg) = (
                self.data(omega)[fi],
                self.data(theta)[fi],
                self.data(psi)[fi],
                self.data(sigma)[fi],
            );
            let (cs, sn) = (th.cos(), th.sin());
            let inv2s2 = 1.0 / (2.0 * sg * sg);
            for (r, y) in (-c..=c).enumerate() {
                for (q, xx) in (-c..=c).enumerate() {
                    let (xf, yf) = (xx as f64, y as f64);
                    let xp = xf * cs + yf * sn;
                    let r2 = xf * xf + yf * yf;
                    let env = (-r2 * inv2s2).exp();
                    out[(fi * k + r) * k + q] = env * (om * xp + ps).cos();
                }
            }
        }
        let needs = self.any_needs(&[omega, theta, psi, sigma]);
        Ok(self.push(
            Op::GaborKernel {
                omega,
                theta,
                psi,
                sigma,
                k,
            },
            vec![n, 1, k, k],
            out,
            needs,
        ))
    }

    /// Class-weighted cross entropy over 2-class logits, normalised by the
    /// sum of the per-sample weights (a weighted mean).
    pub fn weighted_cross_entropy(&mut self, logits: VarId, targets: &[usize], weights: [f64; 2]) -> Result<VarId> {
        let s = self.shape(logits);
        if s.len() != 2 || s[1] != 2 {
            return Err(Error::invalid(format!(
                "weighted_cross_entropy expects logits [B,2], got {s:?}"
            )));
        }
        if s[0] != targets.len() {
            return Err(Error::invalid(format!(
                "weighted_cross_entropy got {} targets for batch {}",
                targets.len(),
                s[0]
            )));
        }
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::invalid("class weights must be strictly positive"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t > 1) {
            return Err(Error::invalid(format!("target class {bad} outside {{0,1}}")));
        }
        let data = self.data(logits);
        let mut loss = 0.0;
        let mut weight_sum = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let (l0, l1) = (data[2 * i], data[2 * i + 1]);
            let m = l0.max(l1);
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            let nll = lse - if t == 0 { l0 } else { l1 };
            loss += weights[t] * nll;
            weight_sum += weights[t];
        }
        loss /= weight_sum;
        let needs = self.needs(logits);
        Ok(self.push(
            Op::WeightedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                weight_sum,
            },
            vec![1],
            vec![loss],
            needs,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradient buffers for
    /// every differentiable node reachable from the loss; unreachable
    /// nodes are left untouched.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut reached = vec![false; loss + 1];
        reached[loss] = true;
        let mut inputs = Vec::new();
        for i in (0..=loss).rev() {
            if !reached[i] || !self.nodes[i].needs {
                continue;
            }
            self.nodes[i].op.inputs(&mut inputs);
            for &j in &inputs {
                if self.nodes[j].needs {
                    reached[j] = true;
                }
            }
        }
        for i in 0..=loss {
            self.grads[i] = if reached[i] && self.nodes[i].needs {
                Some(vec![0.0; self.nodes[i].data.len()])
            } else {
                None
            };
        }
        for g in self.grads.iter_mut().skip(loss + 1) {
            *g = None;
        }
        if self.grads[loss].is_none() {
            return Ok(()); // loss does not depend on any differentiable input
        }
        self.grads[loss] = Some(vec![1.0]);

        for i in (0..=loss).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let (before, after) = self.grads.split_at_mut(i);
            let gout = after[0].as_deref().expect("grad allocated");
            let node = &self.nodes[i];
            backward_step(&self.nodes, node, gout, before);
        }
        Ok(())
    }

    /// Copies accumulated gradients into the bound store parameters.
    /// Parameters that were not reached by `backward` keep their old grad.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        for &(pid, vid) in &self.bindings {
            if let Some(g) = self.grads[vid].as_ref() {
                store.entry_mut(pid).tensor.grad = Some(g.clone());
            }
        }
    }

    /// Copies a node's gradient into a tensor's grad buffer.
    pub fn export_grad(&self, id: VarId, t: &mut Tensor) -> Result<()> {
        match self.grads[id].as_ref() {
            Some(g) => t.set_grad(g.clone()),
            None => Ok(()),
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, src: &[f64]) {
    if let Some(dst) = slot.as_deref_mut() {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

/// Applies one node's backward rule, accumulating into the input grads
/// (which all live strictly before the node on the tape).
fn backward_step(nodes: &[Node], node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}

        Op::Conv2d { x, w, bias, geom } => {
            let want_dx = grads[*x].is_some();
            let want_dw = grads[*w].is_some();
            let want_db = bias.map(|b| grads[b].is_some()).unwrap_or(false);
            let (dx, dw, db) =
                conv::conv2d_backward(&nodes[*x].data, &nodes[*w].data, gout, geom, want_dx, want_dw, want_db);
            if let Some(dx) = dx {
                add_into(&mut grads[*x], &dx);
            }
            if let Some(dw) = dw {
                add_into(&mut grads[*w], &dw);
            }
            if let (Some(b), Some(db)) = (bias, db) {
                add_into(&mut grads[*b], &db);
            }
        }

        Op::Pool2d {
            x,
            mode,
            window,
            stride,
            argmax,
        } => {
            let Some(gx) = grads[*x].as_deref_mut() else { return };
            match mode {
                PoolMode::Max => {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src as usize] += gout[o];
                    }
                }
                PoolMode::Avg => {
                    let s = &nodes[*x].shape;
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let oh = conv::pool_output_dim(h, *window, *stride);
                    let ow = conv::pool_output_dim(w, *window, *stride);
                    let inv = 1.0 / (*window * *window) as f64;
                    let plane = h * w;
                    let mut o = 0;
                    for bc in 0..b * c {
                        for ohi in 0..oh {
                            for owi in 0..ow {
                                let g = gout[o] * inv;
                                o += 1;
                                for dy in 0..*window {
                                    let row = bc * plane + (ohi * stride + dy) * w + owi * stride;
                                    for dxi in 0..*window {
                                        gx[row + dxi] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        Op::GlobalAvgPool { x } => {
            let Some(gx) = grads[*x].as_deref_mut() else { return };
            let s = &nodes[*x].shape;
            let plane = s[2] * s[3];
            let inv = 1.0 / plane as f64;
            for (i, &g) in gout.iter().enumerate() {
                let base = i * plane;
                for v in &mut gx[base..base + plane] {
                    *v += g * inv;
                }
            }
        }

        Op::GlobalMaxPool { x, argmax } => {
            let Some(gx) = grads[*x].as_deref_mut() else { return };
            for (o, &src) in argmax.iter().enumerate() {
                gx[src as usize] += gout[o];
            }
        }

        Op::Relu { x } => {
            let Some(gx) = grads[*x].as_deref_mut() else { return };
            for (i, g) in gout.iter().enumerate() {
                if nodes[*x].data[i] > 0.0 {
                    gx[i] += g;
                }
            }
        }

        Op::Sigmoid { x } => {
            let Some(gx) = grads[*x].as_deref_mut() else { return };
            for (i, g) in gout.iter().enumerate() {
                let s = node.data[i];
                gx[i] += g * s * (1.0 - s);
            }
        }

        Op::Add { a, b } => {
            add_into(&mut grads[*a], gout);
            add_into(&mut grads[*b], gout);
        }

        Op::Mul { a, b } => {
            if grads[*a].is_some() {
                let contrib: Vec<f64> = gout.iter().zip(&nodes[*b].data).map(|(g, v)| g * v).collect();
                add_into(&mut grads[*a], &contrib);
            }
            if grads[*b].is_some() {
                let contrib: Vec<f64> = gout.iter().zip(&nodes[*a].data).map(|(g, v)| g * v).collect();
                add_into(&mut grads[*b], &contrib);
            }
        }

        Op::Scale { x, factor } => {
            let Some(gx) = grads[*x].as_deref_mut() else { return };
            for (gxi, g) in gx.iter_mut().zip(gout) {
                *gxi += g * factor;
            }
        }

        Op::DivScalar { x, divisor } => {
            let Some(gx) = grads[*x].as_deref_mut() else { return };
            for (gxi, g) in gx.iter_mut().zip(gout) {
                *gxi += g / divisor;
            }
        }

        Op::Sum { x } => {
            let Some(gx) = grads[*x].as_deref_mut() else { return };
            let g = gout[0];
            for v in gx.iter_mut() {
                *v += g;
            }
        }

        Op::ChannelSum { x } => {
            let Some(gx) = grads[*x].as_deref_mut() else { return };
            let s = &nodes[*x].shape;
            let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
            for bi in 0..b {
                let src = &gout[bi * plane..(bi + 1) * plane];
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    for (j, g) in src.iter().enumerate() {
                        gx[base + j] += g;
                    }
                }
            }
        }

        Op::ConcatChannels { xs } => {
            let out_c = node.shape[1];
            let (b, plane) = (node.shape[0], node.shape[2] * node.shape[3]);
            let mut c_off = 0;
            for &x in xs {
                let c = nodes[x].shape[1];
                if let Some(gx) = grads[x].as_deref_mut() {
                    for bi in 0..b {
                        let src = &gout[(bi * out_c + c_off) * plane..(bi * out_c + c_off + c) * plane];
                        let dst = &mut gx[bi * c * plane..(bi + 1) * c * plane];
                        for (d, g) in dst.iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                }
                c_off += c;
            }
        }

        Op::SliceChannels { x, from, to } => {
            let Some(gx) = grads[*x].as_deref_mut() else { return };
            let s = &nodes[*x].shape;
            let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
            let cs = to - from;
            for bi in 0..b {
                let src = &gout[bi * cs * plane..(bi + 1) * cs * plane];
                let dst = &mut gx[(bi * c + from) * plane..(bi * c + to) * plane];
                for (d, g) in dst.iter_mut().zip(src) {
                    *d += g;
                }
            }
        }

        Op::BroadcastSpatial { x, h, w } => {
            let Some(gx) = grads[*x].as_deref_mut() else { return };
            let plane = h * w;
            for (i, v) in gx.iter_mut().enumerate() {
                *v += gout[i * plane..(i + 1) * plane].iter().sum::<f64>();
            }
        }

        Op::Reshape { x } => {
            add_into(&mut grads[*x], gout);
        }

        Op::Linear { x, w, bias } => {
            let xs = &nodes[*x].shape;
            let (b, f) = (xs[0], xs[1]);
            let o = nodes[*w].shape[0];
            if grads[*x].is_some() {
                let wd = &nodes[*w].data;
                let mut dx = vec![0.0; b * f];
                for bi in 0..b {
                    for oi in 0..o {
                        let g = gout[bi * o + oi];
                        if g == 0.0 {
                            continue;
                        }
                        let wrow = &wd[oi * f..(oi + 1) * f];
                        let drow = &mut dx[bi * f..(bi + 1) * f];
                        for j in 0..f {
                            drow[j] += g * wrow[j];
                        }
                    }
                }
                add_into(&mut grads[*x], &dx);
            }
            if grads[*w].is_some() {
                let xd = &nodes[*x].data;
                let mut dw = vec![0.0; o * f];
                for bi in 0..b {
                    let xrow = &xd[bi * f..(bi + 1) * f];
                    for oi in 0..o {
                        let g = gout[bi * o + oi];
                        if g == 0.0 {
                            continue;
                        }
                        let wrow = &mut dw[oi * f..(oi + 1) * f];
                        for j in 0..f {
                            wrow[j] += g * xrow[j];
                        }
                    }
                }
                add_into(&mut grads[*w], &dw);
            }
            if let Some(bid) = bias {
                if grads[*bid].is_some() {
                    let mut db = vec![0.0; o];
                    for bi in 0..b {
                        for oi in 0..o {
                            db[oi] += gout[bi * o + oi];
                        }
                    }
                    add_into(&mut grads[*bid], &db);
                }
            }
        }

        Op::BatchNorm {
            x,
            gamma,
            beta,
            eps,
            mean,
            var,
            train,
        } => {
            let s = &nodes[*x].shape;
            let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
            let n = (b * plane) as f64;
            let xd = &nodes[*x].data;
            let gd = &nodes[*gamma].data;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let want_dx = grads[*x].is_some();
            let mut dx = if want_dx { vec![0.0; xd.len()] } else { Vec::new() };
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + eps).sqrt();
                let m = mean[ci];
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for j in 0..plane {
                        let g = gout[base + j];
                        let xhat = (xd[base + j] - m) * inv;
                        sum_g += g;
                        sum_gx += g * xhat;
                    }
                }
                dbeta[ci] = sum_g;
                dgamma[ci] = sum_gx;
                if want_dx {
                    let gch = gd[ci];
                    if *train {
                        let mg = sum_g / n;
                        let mgx = sum_gx / n;
                        for bi in 0..b {
                            let base = (bi * c + ci) * plane;
                            for j in 0..plane {
                                let g = gout[base + j];
                                let xhat = (xd[base + j] - m) * inv;
                                dx[base + j] = gch * inv * (g - mg - xhat * mgx);
                            }
                        }
                    } else {
                        for bi in 0..b {
                            let base = (bi * c + ci) * plane;
                            for j in 0..plane {
                                dx[base + j] = gch * inv * gout[base + j];
                            }
                        }
                    }
                }
            }
            if want_dx {
                add_into(&mut grads[*x], &dx);
            }
            add_into(&mut grads[*gamma], &dgamma);
            add_into(&mut grads[*beta], &dbeta);
        }

        Op::GaborKernel {
            omega,
            theta,
            psi,
            sigma,
            k,
        } => {
            let n = nodes[*omega].data.len();
            let c = (*k as isize - 1) / 2;
            let mut d_om = vec![0.0; n];
            let mut d_th = vec![0.0; n];
            let mut d_ps = vec![0.0; n];
            let mut d_sg = vec![0.0; n];
            for fi in 0..n {
                let om = nodes[*omega].data[fi];
                let th = nodes[*theta].data[fi];
                let ps = nodes[*psi].data[fi];
                let sg = nodes[*sigma].data[fi];
                let (cs, sn) = (th.cos(), th.sin());
                let inv2s2 = 1.0 / (2.0 * sg * sg);
                let inv_s3 = 1.0 / (sg * sg * sg);
                for (r, y) in (-c..=c).enumerate() {
                    for (q, xx) in (-c..=c).enumerate() {
                        let g = gout[(fi * *k + r) * *k + q];
                        if g == 0.0 {
                            continue;
                        }
                        let (xf, yf) = (xx as f64, y as f64);
                        let xp = xf * cs + yf * sn;
                        let yp = -xf * sn + yf * cs;
                        let r2 = xf * xf + yf * yf;
                        let env = (-r2 * inv2s2).exp();
                        let phase = om * xp + ps;
                        let (sp, cp) = phase.sin_cos();
                        let neg_env_sin = -env * sp;
                        d_om[fi] += g * neg_env_sin * xp;
                        d_th[fi] += g * neg_env_sin * om * yp;
                        d_ps[fi] += g * neg_env_sin;
                        d_sg[fi] += g * env * cp * r2 * inv_s3;
                    }
                }
            }
            add_into(&mut grads[*omega], &d_om);
            add_into(&mut grads[*theta], &d_th);
            add_into(&mut grads[*psi], &d_ps);
            add_into(&mut grads[*sigma], &d_sg);
        }

        Op::WeightedCrossEntropy {
            logits,
            targets,
            weights,
            weight_sum,
        } => {
            let Some(gl) = grads[*logits].as_deref_mut() else { return };
            let g = gout[0];
            let data = &nodes[*logits].data;
            for (i, &t) in targets.iter().enumerate() {
                let (l0, l1) = (data[2 * i], data[2 * i + 1]);
                let m = l0.max(l1);
                let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
                let z = e0 + e1;
                let (p0, p1) = (e0 / z, e1 / z);
                let wf = weights[t] / weight_sum;
                gl[2 * i] += g * wf * (p0 - if t == 0 { 1.0 } else { 0.0 });
                gl[2 * i + 1] += g * wf * (p1 - if t == 1 { 1.0 } else { 0.0 });
            }
        }
    }
}
