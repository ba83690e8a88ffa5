//! Operation recording and the reverse sweep.
//!
//! A [`Tape`] owns every intermediate value produced during a forward pass.
//! Nodes are appended in execution order, so the node list is already a
//! topological order and [`Tape::backward`] is a single reverse scan.

use std::borrow::Cow;

use crate::error::{AutogradError, Phase, Result};
use crate::gemm::gemm;
use crate::kernels::{self, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Upsample2x {
        input: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Silu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    ScaleShift {
        input: Var,
        scale: Option<Var>,
        shift: Var,
    },
    AvgPool {
        input: Var,
    },
    AvgPool2x {
        input: Var,
    },
    Flatten {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x { .. } => "upsample2x",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Linear { .. } => "linear",
            Op::GroupNorm { .. } => "group_norm",
            Op::Silu { .. } => "silu",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::ChannelBias { .. } => "channel_bias",
            Op::ScaleShift { .. } => "scale_shift",
            Op::AvgPool { .. } => "avg_pool",
            Op::AvgPool2x { .. } => "avg_pool2x",
            Op::Flatten { .. } => "flatten",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Mse { .. } => "mse",
        }
    }
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Recorder for one forward pass.
#[derive(Debug)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    recording: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutogradError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn rank4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(AutogradError::Config {
            op,
            msg: format!("expected a rank-4 [N,C,H,W] tensor, got {:?}", t.shape()),
        }),
    }
}

impl<'a> Tape<'a> {
    /// A tape that keeps everything needed for [`Tape::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape for pure evaluation: parameters are treated as constants and no
    /// backward caches are retained.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutogradError::NonFinite {
                op: op.name(),
                phase: Phase::Forward,
            });
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad: needs_grad && self.recording,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free variable whose gradient is wanted (e.g. an input under test).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let recording = self.recording;
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: recording,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrow a trainable parameter from `store` without copying it.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let recording = self.recording;
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Leaf,
            needs_grad: recording,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D cross-correlation without bias: `[N,C,H,W] ⋆ [O,C,k,k] → [N,O,H',W']`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(kernel);
        let (n, c, h, wd) = rank4("conv2d", x)?;
        let (o, kc, kh, kw) = rank4("conv2d", w)?;
        if kc != c || kh != kw {
            return Err(AutogradError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        if stride == 0 || kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(AutogradError::Config {
                op: "conv2d",
                msg: format!(
                    "kernel {:?} with stride {stride} and padding {padding} does not fit input {:?}",
                    w.shape(),
                    x.shape()
                ),
            });
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            k: kh,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (wd + 2 * padding - kw) / stride + 1,
        };
        let needs = self.needs(input) || self.needs(kernel);
        let y = kernels::conv_forward(&geom, x.data(), w.data());
        let out = Tensor::new([n, o, geom.ho, geom.wo], y)?;
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            needs,
        )
    }

    /// Nearest-neighbour ×2 spatial upsampling.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = rank4("upsample2x", x)?;
        let mut y = vec![0.0; n * c * h * w * 4];
        let xd = x.data();
        for plane in 0..n * c {
            for i in 0..h {
                for j in 0..w {
                    let v = xd[(plane * h + i) * w + j];
                    let base = plane * 4 * h * w;
                    for a in 0..2 {
                        for b in 0..2 {
                            y[base + (2 * i + a) * 2 * w + 2 * j + b] = v;
                        }
                    }
                }
            }
        }
        let needs = self.needs(input);
        self.push(
            Tensor::new([n, c, 2 * h, 2 * w], y)?,
            Op::Upsample2x { input },
            needs,
        )
    }

    /// Concatenate two `[N,·,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, ca, h, w) = rank4("concat_channels", ta)?;
        let (nb, cb, hb, wb) = rank4("concat_channels", tb)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(AutogradError::ShapeMismatch {
                op: "concat_channels",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut y = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            y.extend_from_slice(&ta.data()[s * ca * hw..(s + 1) * ca * hw]);
            y.extend_from_slice(&tb.data()[s * cb * hw..(s + 1) * cb * hw]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new([n, ca + cb, h, w], y)?,
            Op::ConcatChannels { a, b },
            needs,
        )
    }

    /// Affine map `[N,F]·[F,G] + [G]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, wt, b) = (self.value(input), self.value(weight), self.value(bias));
        let (n, f) = match *x.shape() {
            [n, f] => (n, f),
            _ => {
                return Err(AutogradError::ShapeMismatch {
                    op: "linear",
                    lhs: x.shape().to_vec(),
                    rhs: wt.shape().to_vec(),
                })
            }
        };
        let g = match *wt.shape() {
            [wf, g] if wf == f => g,
            _ => {
                return Err(AutogradError::ShapeMismatch {
                    op: "linear",
                    lhs: x.shape().to_vec(),
                    rhs: wt.shape().to_vec(),
                })
            }
        };
        if b.shape() != [g] {
            return Err(AutogradError::ShapeMismatch {
                op: "linear",
                lhs: wt.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut y = Vec::with_capacity(n * g);
        for _ in 0..n {
            y.extend_from_slice(b.data());
        }
        gemm(n, f, g, x.data(), false, wt.data(), false, &mut y, true);
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(
            Tensor::new([n, g], y)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
            needs,
        )
    }

    /// Group normalisation with per-channel affine `gamma`, `beta`.
    pub fn group_norm(
        &mut self,
        input: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = rank4("group_norm", x)?;
        if groups == 0 || c % groups != 0 {
            return Err(AutogradError::Config {
                op: "group_norm",
                msg: format!("{c} channels are not divisible into {groups} groups"),
            });
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(AutogradError::ShapeMismatch {
                op: "group_norm",
                lhs: tg.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (y, xhat, inv_std) =
            kernels::group_norm_forward(x.data(), n, c, h * w, groups, tg.data(), tb.data(), eps);
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let (xhat, inv_std) = if needs {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        self.push(
            Tensor::new([n, c, h, w], y)?,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    /// Elementwise `x · sigmoid(x)`.
    pub fn silu(&mut self, input: Var) -> Result<Var> {
        let y = self.value(input).map(|v| v * sigmoid(v));
        let needs = self.needs(input);
        self.push(y, Op::Silu { input }, needs)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(op.name(), ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Result<Var> {
        let y = self.value(input).map(|v| v * factor);
        let needs = self.needs(input);
        self.push(y, Op::Scale { input, factor }, needs)
    }

    /// Add a per-channel bias `[C]` to an `[N,C,H,W]` tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(input), self.value(bias));
        let (_, c, h, w) = rank4("channel_bias", x)?;
        if b.shape() != [c] {
            return Err(AutogradError::ShapeMismatch {
                op: "channel_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut y = x.data().to_vec();
        for (i, chunk) in y.chunks_mut(hw).enumerate() {
            let bv = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let out = Tensor::new(x.shape().to_vec(), y)?;
        let needs = self.needs(input) || self.needs(bias);
        self.push(out, Op::ChannelBias { input, bias }, needs)
    }

    /// Feature-wise modulation `x · (1 + scale) + shift` with `[N,C]`
    /// coefficients broadcast over the spatial extent.
    pub fn scale_shift(&mut self, input: Var, scale: Option<Var>, shift: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = rank4("scale_shift", x)?;
        let sh = self.value(shift);
        if sh.shape() != [n, c] {
            return Err(AutogradError::ShapeMismatch {
                op: "scale_shift",
                lhs: x.shape().to_vec(),
                rhs: sh.shape().to_vec(),
            });
        }
        let sc = match scale {
            Some(s) => {
                let t = self.value(s);
                if t.shape() != [n, c] {
                    return Err(AutogradError::ShapeMismatch {
                        op: "scale_shift",
                        lhs: x.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                Some(t.data())
            }
            None => None,
        };
        let hw = h * w;
        let mut y = x.data().to_vec();
        for (i, chunk) in y.chunks_mut(hw).enumerate() {
            let m = 1.0 + sc.map_or(0.0, |s| s[i]);
            let b = sh.data()[i];
            chunk.iter_mut().for_each(|v| *v = *v * m + b);
        }
        let out = Tensor::new(x.shape().to_vec(), y)?;
        let needs = self.needs(input) || self.needs(shift) || scale.is_some_and(|s| self.needs(s));
        self.push(
            out,
            Op::ScaleShift {
                input,
                scale,
                shift,
            },
            needs,
        )
    }

    /// Global spatial mean `[N,C,H,W] → [N,C]`.
    pub fn avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = rank4("avg_pool", x)?;
        let hw = (h * w) as f32;
        let y = x
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().sum::<f32>() / hw)
            .collect();
        let needs = self.needs(input);
        self.push(Tensor::new([n, c], y)?, Op::AvgPool { input }, needs)
    }

    /// 2×2 average pooling with stride 2; spatial sizes must be even.
    pub fn avg_pool2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = rank4("avg_pool2x", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AutogradError::Config {
                op: "avg_pool2x",
                msg: format!("spatial size {h}x{w} is not even"),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = x.data();
        let mut y = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    let at = |a: usize, b: usize| xd[(plane * h + 2 * i + a) * w + 2 * j + b];
                    y[(plane * ho + i) * wo + j] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        let needs = self.needs(input);
        self.push(Tensor::new([n, c, ho, wo], y)?, Op::AvgPool2x { input }, needs)
    }

    /// Collapse every axis after the first: `[N, ...] -> [N, F]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let n = *x.shape().first().ok_or_else(|| AutogradError::Config {
            op: "flatten",
            msg: "cannot flatten a scalar".into(),
        })?;
        let f = x.numel() / n.max(1);
        let y = Tensor::new([n, f], x.data().to_vec())?;
        let needs = self.needs(input);
        self.push(y, Op::Flatten { input }, needs)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self
            .value(input)
            .data()
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>();
        let needs = self.needs(input);
        self.push(Tensor::scalar(s as f32), Op::Sum { input }, needs)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s = x.data().iter().map(|&v| v as f64).sum::<f64>() / x.numel() as f64;
        let needs = self.needs(input);
        self.push(Tensor::scalar(s as f32), Op::Mean { input }, needs)
    }

    /// Mean squared difference of two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("mse", ta, tb)?;
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum::<f64>()
            / ta.numel() as f64;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(s as f32), Op::Mse { a, b }, needs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutogradError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let contributions = self.node_backward(node, &dy)?;
            for (target, g) in contributions {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(AutogradError::NonFinite {
                        op: node.op.name(),
                        phase: Phase::Backward,
                    });
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            out.push(match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.needs_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g)?)
                }
                _ => None,
            });
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients {
            leaves: out,
            params,
        })
    }

    fn node_backward(&self, node: &Node<'a>, dy: &[f32]) -> Result<Vec<(Var, Vec<f32>)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let x = self.value(*input);
                let w = self.value(*kernel);
                let (dx, dw) = kernels::conv_backward(
                    geom,
                    x.data(),
                    w.data(),
                    dy,
                    self.needs(*input),
                    self.needs(*kernel),
                );
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if let Some(dw) = dw {
                    out.push((*kernel, dw));
                }
            }
            Op::Upsample2x { input } => {
                if self.needs(*input) {
                    let x = self.value(*input);
                    let (n, c, h, w) = rank4("upsample2x", x)?;
                    let mut dx = vec![0.0; n * c * h * w];
                    for plane in 0..n * c {
                        let base = plane * 4 * h * w;
                        for i in 0..h {
                            for j in 0..w {
                                let mut s = 0.0;
                                for a in 0..2 {
                                    for b in 0..2 {
                                        s += dy[base + (2 * i + a) * 2 * w + 2 * j + b];
                                    }
                                }
                                dx[(plane * h + i) * w + j] = s;
                            }
                        }
                    }
                    out.push((*input, dx));
                }
            }
            Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = rank4("concat_channels", self.value(*a))?;
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let stride = (ca + cb) * hw;
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(n * ca * hw);
                    for s in 0..n {
                        da.extend_from_slice(&dy[s * stride..s * stride + ca * hw]);
                    }
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(n * cb * hw);
                    for s in 0..n {
                        db.extend_from_slice(&dy[s * stride + ca * hw..(s + 1) * stride]);
                    }
                    out.push((*b, db));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let g = w.shape()[1];
                if self.needs(*input) {
                    let mut dx = vec![0.0; n * f];
                    gemm(n, g, f, dy, false, w.data(), true, &mut dx, false);
                    out.push((*input, dx));
                }
                if self.needs(*weight) {
                    let mut dw = vec![0.0; f * g];
                    gemm(f, n, g, x.data(), true, dy, false, &mut dw, false);
                    out.push((*weight, dw));
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; g];
                    for row in dy.chunks(g) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    out.push((*bias, db));
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = rank4("group_norm", self.value(*input))?;
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                    dy,
                    xhat,
                    inv_std,
                    n,
                    c,
                    h * w,
                    *groups,
                    self.value(*gamma).data(),
                );
                if self.needs(*input) {
                    out.push((*input, dx));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if self.needs(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::Silu { input } => {
                let dx = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                out.push((*input, dx));
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, dy.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, dy.to_vec()));
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    out.push((*a, dy.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, dy.iter().map(|g| -g).collect()));
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    out.push((*a, dy.iter().zip(tb.data()).map(|(g, y)| g * y).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, dy.iter().zip(ta.data()).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale { input, factor } => {
                out.push((*input, dy.iter().map(|g| g * factor).collect()));
            }
            Op::ChannelBias { input, bias } => {
                let (_, c, h, w) = rank4("channel_bias", self.value(*input))?;
                if self.needs(*input) {
                    out.push((*input, dy.to_vec()));
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0f64; c];
                    for (i, chunk) in dy.chunks(h * w).enumerate() {
                        db[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                    }
                    out.push((*bias, db.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::ScaleShift {
                input,
                scale,
                shift,
            } => {
                let x = self.value(*input);
                let (_, _, h, w) = rank4("scale_shift", x)?;
                let hw = h * w;
                let sc = scale.map(|s| self.value(s).data());
                if self.needs(*input) {
                    let mut dx = dy.to_vec();
                    if let Some(sc) = sc {
                        for (i, chunk) in dx.chunks_mut(hw).enumerate() {
                            let m = 1.0 + sc[i];
                            chunk.iter_mut().for_each(|v| *v *= m);
                        }
                    }
                    out.push((*input, dx));
                }
                if let Some(s) = scale {
                    if self.needs(*s) {
                        let ds = dy
                            .chunks(hw)
                            .zip(x.data().chunks(hw))
                            .map(|(g, xv)| g.iter().zip(xv).map(|(a, b)| a * b).sum())
                            .collect();
                        out.push((*s, ds));
                    }
                }
                if self.needs(*shift) {
                    out.push((*shift, dy.chunks(hw).map(|g| g.iter().sum()).collect()));
                }
            }
            Op::AvgPool { input } => {
                let (_, _, h, w) = rank4("avg_pool", self.value(*input))?;
                let hw = h * w;
                let mut dx = Vec::with_capacity(dy.len() * hw);
                for &g in dy {
                    dx.extend(std::iter::repeat_n(g / hw as f32, hw));
                }
                out.push((*input, dx));
            }
            Op::AvgPool2x { input } => {
                let (n, c, h, w) = rank4("avg_pool2x", self.value(*input))?;
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    for i in 0..h {
                        for j in 0..w {
                            dx[(plane * h + i) * w + j] = 0.25 * dy[(plane * ho + i / 2) * wo + j / 2];
                        }
                    }
                }
                out.push((*input, dx));
            }
            Op::Flatten { input } => {
                out.push((*input, dy.to_vec()));
            }
            Op::Sum { input } => {
                out.push((*input, vec![dy[0]; self.value(*input).numel()]));
            }
            Op::Mean { input } => {
                let n = self.value(*input).numel();
                out.push((*input, vec![dy[0] / n as f32; n]));
            }
            Op::Mse { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = 2.0 * dy[0] / ta.numel() as f32;
                let da: Vec<f32> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| k * (x - y))
                    .collect();
                if self.needs(*b) {
                    out.push((*b, da.iter().map(|v| -v).collect()));
                }
                if self.needs(*a) {
                    out.push((*a, da));
                }
            }
        }
        Ok(out)
    }
}

/// Result of [`Tape::backward`]: gradients for every leaf that needed one.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of a leaf recorded with [`Tape::leaf`] or [`Tape::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// One gradient per parameter of `store`, zero for parameters that did
    /// not take part in the computation. Parameters used several times have
    /// their contributions summed.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        for &(node, pid) in &self.params {
            if let Some(g) = &self.leaves[node] {
                out[pid.index()]
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
        out
    }
}
