use std::sync::Arc;

use crate::error::{FscnError, Result};

use super::kernels::{self, ConvSpec};
use super::{Scalar, Shape, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Concat { parts: Vec<NodeId> },
    BilinearUp { x: NodeId },
    AvgPoolDown { x: NodeId, fy: usize, fx: usize },
    GlobalAvgPool { x: NodeId },
    ScaleChannels { x: NodeId, gates: NodeId },
    ScalarMul { x: NodeId, a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Ln { x: NodeId },
    SqrtClamped { x: NodeId },
    Affine { x: NodeId, mul: f64 },
    MaskFill { x: NodeId, mask: Arc<Vec<bool>> },
    MaskedSum { x: NodeId, mask: Arc<Vec<bool>> },
    SumAll { x: NodeId },
}

struct Node<S: Scalar> {
    shape: Shape,
    value: Vec<S>,
    op: Op,
    /// True for `requires_grad` leaves and anything computed from one.
    needs_grad: bool,
}

/// Tape of executed operations. Ops evaluate eagerly when recorded, so every
/// node's inputs precede it and `backward` can walk the tape once in reverse.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf. Its `requires_grad` flag decides whether
    /// `backward` will keep a gradient for it.
    pub fn leaf(&mut self, t: Tensor<S>) -> NodeId {
        let needs_grad = t.requires_grad();
        self.push(t.shape(), t.into_data(), Op::Leaf, needs_grad)
    }

    /// Insert a non-differentiable constant leaf.
    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t.shape(), t.into_data(), Op::Leaf, false)
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].value
    }

    /// Copy a node's value out as a tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor<S> {
        Tensor::from_vec(self.shape(id), self.value(id).to_vec()).expect("node layout")
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> S {
        debug_assert!(self.shape(id).is_scalar());
        self.nodes[id.0].value[0]
    }

    /// Gradient of a `requires_grad` leaf, available after `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Shape, value: Vec<S>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.numel(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- ops -------------------------------------------------------------

    /// 2-D cross-correlation with zero padding. `weight` is (cout, cin, k, k)
    /// with k odd, `bias` is (1, cout, 1, 1).
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        if ws.h != ws.w || ws.h % 2 == 0 {
            return Err(FscnError::InvalidArgument(format!(
                "conv2d kernel must be square with odd size, got {ws}"
            )));
        }
        if ws.c != xs.c {
            return Err(FscnError::shape(
                "conv2d input channels",
                format!("cin={}", ws.c),
                format!("cin={}", xs.c),
            ));
        }
        if bs != Shape::new(1, ws.n, 1, 1) {
            return Err(FscnError::shape(
                "conv2d bias",
                format!("(1, {}, 1, 1)", ws.n),
                bs.to_string(),
            ));
        }
        if stride == 0 {
            return Err(FscnError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let k = ws.h;
        if xs.h + 2 * pad < k || xs.w + 2 * pad < k {
            return Err(FscnError::InvalidArgument(format!(
                "conv2d: padded input {}x{} smaller than kernel {k}",
                xs.h + 2 * pad,
                xs.w + 2 * pad
            )));
        }
        let sp = ConvSpec {
            n: xs.n,
            cin: xs.c,
            h: xs.h,
            w: xs.w,
            cout: ws.n,
            k,
            stride,
            pad,
            oh: (xs.h + 2 * pad - k) / stride + 1,
            ow: (xs.w + 2 * pad - k) / stride + 1,
        };
        let os = sp.out_shape();
        let mut out = vec![S::zero(); os.numel()];
        kernels::conv2d_forward(
            self.value(x),
            self.value(weight),
            self.value(bias),
            &sp,
            &mut out,
        );
        let needs = self.needs(x) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            os,
            out,
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// max(0, x). The subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x);
        let out: Vec<S> = self.value(x).iter().map(|&v| v.max(S::zero())).collect();
        let needs = self.needs(x);
        self.push(shape, out, Op::Relu { x }, needs)
    }

    /// 1 / (1 + e^-x), evaluated in the overflow-free branch form.
    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x);
        let out: Vec<S> = self.value(x).iter().map(|&v| sigmoid_stable(v)).collect();
        let needs = self.needs(x);
        self.push(shape, out, Op::Sigmoid { x }, needs)
    }

    /// Concatenate along the channel axis, in argument order.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| {
            FscnError::InvalidArgument("concat_channels: empty part list".into())
        })?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let fs = self.shape(first);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (fs.n, fs.h, fs.w) {
                return Err(FscnError::shape(
                    "concat_channels",
                    format!("batch/spatial ({}, {}, {})", fs.n, fs.h, fs.w),
                    s.to_string(),
                ));
            }
            c_total += s.c;
        }
        let os = Shape::new(fs.n, c_total, fs.h, fs.w);
        let plane = fs.h * fs.w;
        let mut out = vec![S::zero(); os.numel()];
        for b in 0..fs.n {
            let mut c_off = 0;
            for &p in parts {
                let s = self.shape(p);
                let src = &self.nodes[p.0].value[b * s.c * plane..(b + 1) * s.c * plane];
                let dst_start = (b * c_total + c_off) * plane;
                out[dst_start..dst_start + s.c * plane].copy_from_slice(src);
                c_off += s.c;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            os,
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Resize to (target_h, target_w): bilinear (half-pixel centers, edge
    /// clamp) when growing, integer-factor average pooling when shrinking.
    /// Equal size is the identity and returns the input node.
    pub fn resample(&mut self, x: NodeId, target_h: usize, target_w: usize) -> Result<NodeId> {
        if target_h == 0 || target_w == 0 {
            return Err(FscnError::InvalidArgument(
                "resample target must be >= 1".into(),
            ));
        }
        let xs = self.shape(x);
        if target_h == xs.h && target_w == xs.w {
            return Ok(x);
        }
        let needs = self.needs(x);
        if target_h >= xs.h && target_w >= xs.w {
            let os = Shape::new(xs.n, xs.c, target_h, target_w);
            let mut out = vec![S::zero(); os.numel()];
            kernels::bilinear_forward(self.value(x), xs, target_h, target_w, &mut out);
            Ok(self.push(os, out, Op::BilinearUp { x }, needs))
        } else if target_h <= xs.h && target_w <= xs.w {
            if xs.h % target_h != 0 || xs.w % target_w != 0 {
                return Err(FscnError::InvalidArgument(format!(
                    "resample: non-integer downscale factor from {}x{} to {target_h}x{target_w}",
                    xs.h, xs.w
                )));
            }
            let (fy, fx) = (xs.h / target_h, xs.w / target_w);
            let os = Shape::new(xs.n, xs.c, target_h, target_w);
            let mut out = vec![S::zero(); os.numel()];
            kernels::avg_pool_forward(self.value(x), xs, fy, fx, &mut out);
            Ok(self.push(os, out, Op::AvgPoolDown { x, fy, fx }, needs))
        } else {
            Err(FscnError::InvalidArgument(format!(
                "resample: mixed up/down scaling from {}x{} to {target_h}x{target_w} is unsupported",
                xs.h, xs.w
            )))
        }
    }

    /// Per-channel spatial mean, (n, c, h, w) -> (n, c, 1, 1).
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let plane = xs.h * xs.w;
        let inv = S::from_f64(1.0 / plane as f64);
        let out: Vec<S> = self
            .value(x)
            .chunks(plane)
            .map(|ch| ch.iter().copied().sum::<S>() * inv)
            .collect();
        let needs = self.needs(x);
        self.push(
            Shape::new(xs.n, xs.c, 1, 1),
            out,
            Op::GlobalAvgPool { x },
            needs,
        )
    }

    /// Multiply each channel plane by its (n, c, 1, 1) gate.
    pub fn scale_channels(&mut self, x: NodeId, gates: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let gs = self.shape(gates);
        if gs != Shape::new(xs.n, xs.c, 1, 1) {
            return Err(FscnError::shape(
                "scale_channels gates",
                format!("({}, {}, 1, 1)", xs.n, xs.c),
                gs.to_string(),
            ));
        }
        let plane = xs.h * xs.w;
        let mut out = vec![S::zero(); xs.numel()];
        for (p, chunk) in out.chunks_mut(plane).enumerate() {
            let g = self.nodes[gates.0].value[p];
            let src = &self.nodes[x.0].value[p * plane..(p + 1) * plane];
            for (o, &v) in chunk.iter_mut().zip(src) {
                *o = v * g;
            }
        }
        let needs = self.needs(x) || self.needs(gates);
        Ok(self.push(xs, out, Op::ScaleChannels { x, gates }, needs))
    }

    /// Multiply every element by a differentiable scalar node (shape 1,1,1,1).
    pub fn scalar_mul(&mut self, x: NodeId, a: NodeId) -> Result<NodeId> {
        let as_ = self.shape(a);
        if !as_.is_scalar() {
            return Err(FscnError::shape(
                "scalar_mul coefficient",
                "(1, 1, 1, 1)".to_string(),
                as_.to_string(),
            ));
        }
        let xs = self.shape(x);
        let av = self.nodes[a.0].value[0];
        let out: Vec<S> = self.value(x).iter().map(|&v| v * av).collect();
        let needs = self.needs(x) || self.needs(a);
        Ok(self.push(xs, out, Op::ScalarMul { x, a }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(S, S) -> S) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(FscnError::shape(
                "elementwise binary op",
                sa.to_string(),
                sb.to_string(),
            ));
        }
        let out: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(sa, out, op, needs))
    }

    /// Natural logarithm; rejects non-positive inputs.
    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        if let Some((i, &v)) = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .find(|(_, v)| **v <= S::zero())
        {
            return Err(FscnError::Domain {
                op: "ln",
                value: v.as_f64(),
                index: i,
            });
        }
        let out: Vec<S> = self.value(x).iter().map(|&v| v.ln()).collect();
        let needs = self.needs(x);
        Ok(self.push(xs, out, Op::Ln { x }, needs))
    }

    /// sqrt(max(x, 0)), with gradient defined as 0 wherever x <= 0.
    pub fn sqrt_clamped(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let out: Vec<S> = self
            .value(x)
            .iter()
            .map(|&v| v.max(S::zero()).sqrt())
            .collect();
        let needs = self.needs(x);
        self.push(xs, out, Op::SqrtClamped { x }, needs)
    }

    /// mul * x + add with constant coefficients.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let xs = self.shape(x);
        let (m, a) = (S::from_f64(mul), S::from_f64(add));
        let out: Vec<S> = self.value(x).iter().map(|&v| v * m + a).collect();
        let needs = self.needs(x);
        self.push(xs, out, Op::Affine { x, mul }, needs)
    }

    /// Keep x where the mask is true, substitute `fill` elsewhere. The fill
    /// positions receive zero gradient.
    pub fn mask_fill(&mut self, x: NodeId, mask: Arc<Vec<bool>>, fill: f64) -> Result<NodeId> {
        let xs = self.shape(x);
        self.check_mask(xs, &mask, "mask_fill")?;
        let f = S::from_f64(fill);
        let out: Vec<S> = self
            .value(x)
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| if m { v } else { f })
            .collect();
        let needs = self.needs(x);
        Ok(self.push(xs, out, Op::MaskFill { x, mask }, needs))
    }

    /// Sum of the masked entries, as a scalar node. Unmasked entries do not
    /// contribute to the value or to the gradient.
    pub fn masked_sum(&mut self, x: NodeId, mask: Arc<Vec<bool>>) -> Result<NodeId> {
        let xs = self.shape(x);
        self.check_mask(xs, &mask, "masked_sum")?;
        let sum: S = self
            .value(x)
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .sum();
        let needs = self.needs(x);
        Ok(self.push(Shape::scalar(), vec![sum], Op::MaskedSum { x, mask }, needs))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let sum: S = self.value(x).iter().copied().sum();
        let needs = self.needs(x);
        self.push(Shape::scalar(), vec![sum], Op::SumAll { x }, needs)
    }

    fn check_mask(&self, xs: Shape, mask: &[bool], op: &str) -> Result<()> {
        if mask.len() != xs.numel() {
            return Err(FscnError::shape(
                op,
                format!("mask of {} entries", xs.numel()),
                format!("{} entries", mask.len()),
            ));
        }
        Ok(())
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
    /// across fan-out; on return every `requires_grad` leaf has a gradient
    /// and intermediate gradients have been dropped.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(FscnError::NonScalarLoss(ls.to_string()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                self.grads[i] = None;
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout);
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(gout);
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, gout: &[S]) {
        // Split borrows: node metadata/values are read-only here, gradient
        // buffers live in a parallel vector.
        let nodes = &self.nodes;
        let grads = &mut self.grads;

        let ensure = |grads: &mut Vec<Option<Vec<S>>>, id: NodeId| -> bool {
            if !nodes[id.0].needs_grad {
                return false;
            }
            if grads[id.0].is_none() {
                grads[id.0] = Some(vec![S::zero(); nodes[id.0].shape.numel()]);
            }
            true
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = nodes[x.0].shape;
                let ws = nodes[w.0].shape;
                let os = nodes[i].shape;
                let sp = ConvSpec {
                    n: xs.n,
                    cin: xs.c,
                    h: xs.h,
                    w: xs.w,
                    cout: ws.n,
                    k: ws.h,
                    stride: *stride,
                    pad: *pad,
                    oh: os.h,
                    ow: os.w,
                };
                let need_dx = ensure(grads, *x);
                ensure(grads, *w);
                ensure(grads, *b);
                // The kernel always wants dw/db buffers; take them out of the
                // gradient table (or use scratch) to sidestep aliasing.
                let mut dw = grads[w.0]
                    .take()
                    .unwrap_or_else(|| vec![S::zero(); ws.numel()]);
                let mut db = grads[b.0]
                    .take()
                    .unwrap_or_else(|| vec![S::zero(); nodes[b.0].shape.numel()]);
                let mut dx = if need_dx { grads[x.0].take() } else { None };
                kernels::conv2d_backward(
                    &nodes[x.0].value,
                    &nodes[w.0].value,
                    gout,
                    &sp,
                    dx.as_deref_mut(),
                    &mut dw,
                    &mut db,
                );
                if need_dx {
                    grads[x.0] = dx;
                }
                if nodes[w.0].needs_grad {
                    grads[w.0] = Some(dw);
                }
                if nodes[b.0].needs_grad {
                    grads[b.0] = Some(db);
                }
            }
            Op::Relu { x } => {
                if ensure(grads, *x) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for ((g, &v), &go) in gx.iter_mut().zip(&nodes[x.0].value).zip(gout) {
                        if v > S::zero() {
                            *g += go;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if ensure(grads, *x) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for ((g, &y), &go) in gx.iter_mut().zip(&nodes[i].value).zip(gout) {
                        *g += go * y * (S::one() - y);
                    }
                }
            }
            Op::Concat { parts } => {
                let os = nodes[i].shape;
                let plane = os.h * os.w;
                let mut c_off = 0;
                for &p in parts {
                    let s = nodes[p.0].shape;
                    if ensure(grads, p) {
                        let gp = grads[p.0].as_mut().unwrap();
                        for b in 0..os.n {
                            let src_start = (b * os.c + c_off) * plane;
                            let dst_start = b * s.c * plane;
                            for j in 0..s.c * plane {
                                gp[dst_start + j] += gout[src_start + j];
                            }
                        }
                    }
                    c_off += s.c;
                }
            }
            Op::BilinearUp { x } => {
                if ensure(grads, *x) {
                    let xs = nodes[x.0].shape;
                    let os = nodes[i].shape;
                    let gx = grads[x.0].as_mut().unwrap();
                    kernels::bilinear_backward(gout, xs, os.h, os.w, gx);
                }
            }
            Op::AvgPoolDown { x, fy, fx } => {
                if ensure(grads, *x) {
                    let xs = nodes[x.0].shape;
                    let gx = grads[x.0].as_mut().unwrap();
                    kernels::avg_pool_backward(gout, xs, *fy, *fx, gx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if ensure(grads, *x) {
                    let xs = nodes[x.0].shape;
                    let plane = xs.h * xs.w;
                    let inv = S::from_f64(1.0 / plane as f64);
                    let gx = grads[x.0].as_mut().unwrap();
                    for (p, chunk) in gx.chunks_mut(plane).enumerate() {
                        let gv = gout[p] * inv;
                        for g in chunk {
                            *g += gv;
                        }
                    }
                }
            }
            Op::ScaleChannels { x, gates } => {
                let xs = nodes[x.0].shape;
                let plane = xs.h * xs.w;
                if ensure(grads, *x) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for (p, chunk) in gx.chunks_mut(plane).enumerate() {
                        let gv = nodes[gates.0].value[p];
                        for (g, &go) in chunk.iter_mut().zip(&gout[p * plane..(p + 1) * plane]) {
                            *g += go * gv;
                        }
                    }
                }
                if ensure(grads, *gates) {
                    let gg = grads[gates.0].as_mut().unwrap();
                    for (p, g) in gg.iter_mut().enumerate() {
                        let xv = &nodes[x.0].value[p * plane..(p + 1) * plane];
                        let go = &gout[p * plane..(p + 1) * plane];
                        *g += xv.iter().zip(go).map(|(&a, &b)| a * b).sum::<S>();
                    }
                }
            }
            Op::ScalarMul { x, a } => {
                let av = nodes[a.0].value[0];
                if ensure(grads, *x) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for (g, &go) in gx.iter_mut().zip(gout) {
                        *g += go * av;
                    }
                }
                if ensure(grads, *a) {
                    let dot: S = nodes[x.0]
                        .value
                        .iter()
                        .zip(gout)
                        .map(|(&v, &go)| v * go)
                        .sum();
                    grads[a.0].as_mut().unwrap()[0] += dot;
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if ensure(grads, id) {
                        let g = grads[id.0].as_mut().unwrap();
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if ensure(grads, *a) {
                    let g = grads[a.0].as_mut().unwrap();
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
                if ensure(grads, *b) {
                    let g = grads[b.0].as_mut().unwrap();
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi -= go;
                    }
                }
            }
            Op::Mul { a, b } => {
                if ensure(grads, *a) {
                    let g = grads[a.0].as_mut().unwrap();
                    for ((gi, &go), &bv) in g.iter_mut().zip(gout).zip(&nodes[b.0].value) {
                        *gi += go * bv;
                    }
                }
                if ensure(grads, *b) {
                    let g = grads[b.0].as_mut().unwrap();
                    for ((gi, &go), &av) in g.iter_mut().zip(gout).zip(&nodes[a.0].value) {
                        *gi += go * av;
                    }
                }
            }
            Op::Ln { x } => {
                if ensure(grads, *x) {
                    let g = grads[x.0].as_mut().unwrap();
                    for ((gi, &go), &v) in g.iter_mut().zip(gout).zip(&nodes[x.0].value) {
                        *gi += go / v;
                    }
                }
            }
            Op::SqrtClamped { x } => {
                if ensure(grads, *x) {
                    let half = S::from_f64(0.5);
                    let g = grads[x.0].as_mut().unwrap();
                    for (((gi, &go), &v), &y) in g
                        .iter_mut()
                        .zip(gout)
                        .zip(&nodes[x.0].value)
                        .zip(&nodes[i].value)
                    {
                        if v > S::zero() {
                            *gi += go * half / y;
                        }
                    }
                }
            }
            Op::Affine { x, mul } => {
                if ensure(grads, *x) {
                    let m = S::from_f64(*mul);
                    let g = grads[x.0].as_mut().unwrap();
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go * m;
                    }
                }
            }
            Op::MaskFill { x, mask } => {
                if ensure(grads, *x) {
                    let g = grads[x.0].as_mut().unwrap();
                    for ((gi, &go), &m) in g.iter_mut().zip(gout).zip(mask.iter()) {
                        if m {
                            *gi += go;
                        }
                    }
                }
            }
            Op::MaskedSum { x, mask } => {
                if ensure(grads, *x) {
                    let go = gout[0];
                    let g = grads[x.0].as_mut().unwrap();
                    for (gi, &m) in g.iter_mut().zip(mask.iter()) {
                        if m {
                            *gi += go;
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if ensure(grads, *x) {
                    let go = gout[0];
                    let g = grads[x.0].as_mut().unwrap();
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid_stable<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(shape.0, shape.1, shape.2, shape.3), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 3, 3), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.leaf(t((1, 1, 3, 3), &k));
        let b = g.leaf(t((1, 1, 1, 1), &[0.0]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_zero_weight_yields_constant_bias() {
        let mut g = Graph::new();
        let x = g.leaf(t((2, 3, 4, 4), &vec![0.37; 2 * 3 * 16]));
        let w = g.leaf(Tensor::zeros(Shape::new(2, 3, 3, 3)));
        let b = g.leaf(t((1, 2, 1, 1), &[5.0, -1.5]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let ys = g.shape(y);
        for n in 0..ys.n {
            for c in 0..ys.c {
                for yy in 0..ys.h {
                    for xx in 0..ys.w {
                        let expect = if c == 0 { 5.0 } else { -1.5 };
                        assert_eq!(g.value(y)[ys.idx(n, c, yy, xx)], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_one_by_one_kernel_frozen_values() {
        // [[1,2],[3,4]] * 2 + 1 = [[3,5],[7,9]], from a scalar cross-correlation by hand.
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
        let w = g.leaf(t((1, 1, 1, 1), &[2.0]));
        let b = g.leaf(t((1, 1, 1, 1), &[1.0]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        let w = g.leaf(Tensor::zeros(Shape::new(2, 4, 3, 3)));
        let b = g.leaf(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let err = g.conv2d(x, w, b, 1, 1).unwrap_err();
        assert!(matches!(err, FscnError::ShapeMismatch { .. }));
    }

    #[test]
    fn relu_and_sigmoid_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 1, 3), &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);

        let z = g.leaf(t((1, 1, 1, 1), &[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s), &[0.5]);

        let l3 = g.leaf(t((1, 1, 1, 1), &[3.0f64.ln()]));
        let s3 = g.sigmoid(l3);
        assert!((g.value(s3)[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn concat_preserves_block_order_and_counts_channels() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::filled(Shape::new(1, 2, 2, 2), 1.0));
        let b = g.leaf(Tensor::filled(Shape::new(1, 1, 2, 2), 2.0));
        let c = g.leaf(Tensor::filled(Shape::new(1, 3, 2, 2), 3.0));
        let y = g.concat_channels(&[a, b, c]).unwrap();
        assert_eq!(g.shape(y).c, 6);
        let v = g.value(y);
        assert!(v[..8].iter().all(|&x| x == 1.0));
        assert!(v[8..12].iter().all(|&x| x == 2.0));
        assert!(v[12..].iter().all(|&x| x == 3.0));
    }

    #[test]
    fn concat_single_part_is_identity() {
        let mut g = Graph::new();
        let a = g.leaf(t((1, 1, 1, 2), &[1.0, 2.0]));
        let y = g.concat_channels(&[a]).unwrap();
        assert_eq!(y, a);
    }

    #[test]
    fn concat_two_scalars_layout() {
        let mut g = Graph::new();
        let a = g.leaf(t((1, 1, 1, 1), &[5.0]));
        let b = g.leaf(t((1, 1, 1, 1), &[7.0]));
        let y = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 2, 1, 1));
        assert_eq!(g.value(y), &[5.0, 7.0]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let b = g.leaf(Tensor::zeros(Shape::new(1, 1, 3, 2)));
        assert!(g.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn resample_constant_stays_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(Shape::new(1, 2, 4, 4), 3.0));
        for (th, tw) in [(8, 8), (2, 2), (4, 4), (16, 16), (1, 1)] {
            let y = g.resample(x, th, tw).unwrap();
            assert!(g.value(y).iter().all(|&v| (v - 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn resample_downscale_is_window_mean() {
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
        let y = g.resample(x, 1, 1).unwrap();
        assert_eq!(g.value(y), &[2.5]);
    }

    #[test]
    fn resample_rejects_non_integer_downscale() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 1, 6, 6)));
        assert!(g.resample(x, 4, 4).is_err());
        assert!(g.resample(x, 4, 8).is_err()); // mixed directions
    }

    #[test]
    fn bilinear_upsample_matches_scalar_oracle() {
        // Independent oracle: evaluate the half-pixel-center formula per pixel.
        let src = [1.0, 2.0, 3.0, 4.0];
        let oracle = |oy: usize, ox: usize| -> f64 {
            let map = |o: usize| -> (usize, usize, f64) {
                let s = ((o as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
                let lo = s.floor() as usize;
                (lo, (lo + 1).min(1), s - lo as f64)
            };
            let (y0, y1, wy) = map(oy);
            let (x0, x1, wx) = map(ox);
            let at = |y: usize, x: usize| src[y * 2 + x];
            (at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx) * (1.0 - wy)
                + (at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx) * wy
        };
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 2, 2), &src));
        let y = g.resample(x, 4, 4).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let got = g.value(y)[oy * 4 + ox];
                assert!((got - oracle(oy, ox)).abs() < 1e-12, "({oy},{ox})");
            }
        }
        // Corners clamp to the source corners.
        assert_eq!(g.value(y)[0], 1.0);
        assert_eq!(g.value(y)[15], 4.0);
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut g = Graph::<f64>::new();
        let c = g.leaf(Tensor::filled(Shape::new(2, 3, 5, 7), 0.25));
        let y = g.global_avg_pool(c);
        assert!(g.value(y).iter().all(|&v| (v - 0.25).abs() < 1e-12));

        let x = g.leaf(t((1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
        let y = g.global_avg_pool(x);
        assert_eq!(g.value(y), &[2.5]);

        let x = g.leaf(t((1, 2, 1, 2), &[1.0, 3.0, 10.0, 20.0]));
        let y = g.global_avg_pool(x);
        assert_eq!(g.value(y), &[2.0, 15.0]);
    }

    #[test]
    fn scale_channels_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t((1, 2, 1, 1), &[2.0, 4.0]));
        let ones = g.leaf(Tensor::filled(Shape::new(1, 2, 1, 1), 1.0));
        let y = g.scale_channels(x, ones).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let zeros = g.leaf(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let y = g.scale_channels(x, zeros).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0]);

        let gates = g.leaf(t((1, 2, 1, 1), &[0.5, 2.0]));
        let y = g.scale_channels(x, gates).unwrap();
        assert_eq!(g.value(y), &[1.0, 8.0]);

        let bad = g.leaf(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        assert!(g.scale_channels(x, bad).is_err());
    }

    #[test]
    fn scalar_mul_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 1, 2), &[2.0, 6.0]));
        let one = g.leaf(Tensor::scalar(1.0));
        let y = g.scalar_mul(x, one).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let half = g.leaf(Tensor::scalar(0.5));
        let y = g.scalar_mul(x, half).unwrap();
        assert_eq!(g.value(y), &[1.0, 3.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t((1, 2, 2, 1), &[1.0, -2.0, 3.0, 0.5]).with_requires_grad(true));
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_scalar_mul_coefficient_grad() {
        // loss = sum(a * x), x = [2, 3] => dloss/da = 5.
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 1, 2), &[2.0, 3.0]));
        let a = g.leaf(Tensor::scalar(0.0).with_requires_grad(true));
        let y = g.scalar_mul(x, a).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[5.0]);
    }

    #[test]
    fn backward_relu_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 1, 2), &[-1.0, 2.0]).with_requires_grad(true));
        let y = g.relu(x);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 1, 2), &[1.0, 2.0]).with_requires_grad(true));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(FscnError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_accumulates_over_fanout() {
        // loss = sum(x * x) + sum(x) => grad = 2x + 1.
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 1, 2), &[3.0, -4.0]).with_requires_grad(true));
        let sq = g.mul(x, x).unwrap();
        let s1 = g.sum_all(sq);
        let s2 = g.sum_all(x);
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[7.0, -7.0]);
    }

    #[test]
    fn ln_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 1, 2), &[1.0, 0.0]));
        assert!(matches!(g.ln(x), Err(FscnError::Domain { .. })));
    }

    #[test]
    fn sqrt_clamped_is_zero_below_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 1, 3), &[-4.0, 0.0, 9.0]).with_requires_grad(true));
        let y = g.sqrt_clamped(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 3.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert_eq!(grad[0], 0.0);
        assert_eq!(grad[1], 0.0);
        assert!((grad[2] - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn masked_sum_ignores_unmasked_lanes() {
        let mut g = Graph::new();
        let x = g.leaf(t((1, 1, 1, 4), &[1.0, f64::NAN, 3.0, 4.0]).with_requires_grad(true));
        let mask = Arc::new(vec![true, false, true, false]);
        let s = g.masked_sum(x, mask).unwrap();
        assert_eq!(g.scalar_value(s), 4.0);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let build = || {
            let mut g = Graph::new();
            let x = g.leaf(t((2, 3, 4, 6), &(0..144).map(|i| (i as f64) * 0.37 - 20.0).collect::<Vec<_>>()));
            let w = g.leaf(t((2, 3, 3, 3), &(0..54).map(|i| ((i * 7 % 13) as f64) * 0.11 - 0.6).collect::<Vec<_>>()));
            let b = g.leaf(t((1, 2, 1, 1), &[0.1, -0.2]));
            let c = g.conv2d(x, w, b, 2, 1).unwrap();
            let r = g.relu(c);
            let u = g.resample(r, 8, 12).unwrap();
            let s = g.sigmoid(u);
            g.value(s).to_vec()
        };
        let a = build();
        let b = build();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
