//! Tape-based reverse-mode differentiation over a closed set of operations.
//!
//! Every operation evaluates eagerly and appends one node to the tape.
//! [`Tape::backward`] walks the nodes once, newest first, and accumulates
//! gradients into the parents of each node. Nodes whose inputs never reach a
//! `requires_grad` leaf are skipped.

use std::cell::RefCell;

use super::kernels::{self, Bilinear, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Upper bound applied to `exp` inputs.
pub const EXP_INPUT_CLAMP: f64 = 40.0;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Resize {
        x: usize,
    },
    SoftmaxChannel {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Tanh {
        x: usize,
    },
    Exp {
        x: usize,
    },
    Softplus {
        x: usize,
    },
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    Square {
        x: usize,
    },
    Abs {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Div {
        a: usize,
        b: usize,
    },
    Lerp {
        t: usize,
        a: usize,
        b: usize,
    },
    Affine {
        x: usize,
        scale: f64,
    },
    Concat {
        parts: Vec<usize>,
    },
    Narrow {
        x: usize,
        start: usize,
    },
    BroadcastChannels {
        x: usize,
    },
    SumChannels {
        x: usize,
    },
    SumPool {
        x: usize,
        size: usize,
    },
    Sample {
        x: usize,
        coords: usize,
    },
    PadReplicate {
        x: usize,
        pad: usize,
    },
    Sum {
        x: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward pass. Confined to a single thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: &Var<'_>) -> Option<Tensor> {
        self.grads[v.id]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.id].clone(), g.clone()))
    }

    /// Gradient or zeros when the variable did not influence the output.
    pub fn get_or_zeros(&self, v: &Var<'_>) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    pub fn has(&self, v: &Var<'_>) -> bool {
        self.grads[v.id].is_some()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Places a tensor on the tape. Gradients are tracked iff
    /// `t.requires_grad()`.
    pub fn var(&self, t: Tensor) -> Var<'_> {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Places a tensor on the tape as a tracked leaf.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.var(t.with_grad())
    }

    /// Places a tensor on the tape as an untracked constant.
    pub fn constant(&self, mut t: Tensor) -> Var<'_> {
        t.set_requires_grad(false);
        self.var(t)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn record(&self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        check_finite(op_name, &data)?;
        let needs = self.needs(parents);
        Ok(self.push(Tensor::from_parts(shape, data), op, needs))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: &Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[out.id].value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("output must have one element, got {:?}", nodes[out.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[out.id] = Some(vec![1.0]);
        for id in (0..=out.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        for (g, node) in grads.iter_mut().zip(nodes.iter()) {
            if !node.needs_grad || !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contribution: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        slot => *slot = Some(contribution),
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut [f64]> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = node.value.data();
    let unary = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.len()).map(|i| g[i] * f(i)).collect::<Vec<_>>() };
    match node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, stride, pad } => {
            let xv = &nodes[x].value;
            let wv = &nodes[w].value;
            let (n, c, h, wd) = xv.dims4().unwrap();
            let s = wv.shape();
            let geom = ConvGeom::new(c, h, wd, s[2], s[3], stride, pad).unwrap();
            let mut bufx = nodes[x].needs_grad.then(|| vec![0.0; xv.len()]);
            let mut bufw = nodes[w].needs_grad.then(|| vec![0.0; wv.len()]);
            let mut bufb = nodes[b].needs_grad.then(|| vec![0.0; s[0]]);
            kernels::conv2d_backward(
                xv.data(),
                n,
                &geom,
                wv.data(),
                s[0],
                g,
                bufx.as_deref_mut(),
                bufw.as_deref_mut(),
                bufb.as_deref_mut(),
            );
            for (id, buf) in [(x, bufx), (w, bufw), (b, bufb)] {
                if let Some(buf) = buf {
                    accumulate(grads, nodes, id, buf);
                }
            }
        }
        Op::ConvTranspose2d { x, w, b, stride, pad } => {
            let xv = &nodes[x].value;
            let wv = &nodes[w].value;
            let (n, cin, _, _) = xv.dims4().unwrap();
            let (_, cout, oh, ow) = node.value.dims4().unwrap();
            let s = wv.shape();
            let geom = ConvGeom::new(cout, oh, ow, s[2], s[3], stride, pad).unwrap();
            let mut bufx = nodes[x].needs_grad.then(|| vec![0.0; xv.len()]);
            let mut bufw = nodes[w].needs_grad.then(|| vec![0.0; wv.len()]);
            let mut bufb = nodes[b].needs_grad.then(|| vec![0.0; cout]);
            kernels::conv_transpose_backward(
                xv.data(),
                n,
                &geom,
                wv.data(),
                cin,
                g,
                bufx.as_deref_mut(),
                bufw.as_deref_mut(),
                bufb.as_deref_mut(),
            );
            for (id, buf) in [(x, bufx), (w, bufw), (b, bufb)] {
                if let Some(buf) = buf {
                    accumulate(grads, nodes, id, buf);
                }
            }
        }
        Op::Resize { x } => {
            let (n, c, h, w) = nodes[x].value.dims4().unwrap();
            let (_, _, oh, ow) = node.value.dims4().unwrap();
            accumulate(grads, nodes, x, kernels::resize_backward(g, n * c, h, w, oh, ow));
        }
        Op::SoftmaxChannel { x } => {
            let (n, c, h, w) = node.value.dims4().unwrap();
            let plane = h * w;
            let mut gx = vec![0.0; g.len()];
            for b in 0..n {
                let base = b * c * plane;
                for p in 0..plane {
                    let dot: f64 = (0..c).map(|k| g[base + k * plane + p] * out[base + k * plane + p]).sum();
                    for k in 0..c {
                        let i = base + k * plane + p;
                        gx[i] = out[i] * (g[i] - dot);
                    }
                }
            }
            accumulate(grads, nodes, x, gx);
        }
        Op::Sigmoid { x } => accumulate(grads, nodes, x, unary(&|i| out[i] * (1.0 - out[i]))),
        Op::Tanh { x } => accumulate(grads, nodes, x, unary(&|i| 1.0 - out[i] * out[i])),
        Op::Exp { x } => {
            let xv = nodes[x].value.data();
            accumulate(grads, nodes, x, unary(&|i| if xv[i] < EXP_INPUT_CLAMP { out[i] } else { 0.0 }))
        }
        Op::Softplus { x } => {
            let xv = nodes[x].value.data();
            accumulate(grads, nodes, x, unary(&|i| sigmoid(xv[i])))
        }
        Op::LeakyRelu { x, slope } => {
            let xv = nodes[x].value.data();
            accumulate(grads, nodes, x, unary(&|i| if xv[i] > 0.0 { 1.0 } else { slope }))
        }
        Op::Square { x } => {
            let xv = nodes[x].value.data();
            accumulate(grads, nodes, x, unary(&|i| 2.0 * xv[i]))
        }
        Op::Abs { x } => {
            let xv = nodes[x].value.data();
            accumulate(
                grads,
                nodes,
                x,
                unary(&|i| {
                    if xv[i] > 0.0 {
                        1.0
                    } else if xv[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }),
            )
        }
        Op::Add { a, b } => {
            accumulate(grads, nodes, a, g.to_vec());
            accumulate(grads, nodes, b, g.to_vec());
        }
        Op::Sub { a, b } => {
            accumulate(grads, nodes, a, g.to_vec());
            accumulate(grads, nodes, b, g.iter().map(|v| -v).collect());
        }
        Op::Mul { a, b } => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            if nodes[a].needs_grad {
                accumulate(grads, nodes, a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            }
            if nodes[b].needs_grad {
                accumulate(grads, nodes, b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
        }
        Op::Div { a, b } => {
            let bv = nodes[b].value.data();
            if nodes[a].needs_grad {
                accumulate(grads, nodes, a, g.iter().zip(bv).map(|(g, b)| g / b).collect());
            }
            if nodes[b].needs_grad {
                accumulate(grads, nodes, b, (0..g.len()).map(|i| -g[i] * out[i] / bv[i]).collect());
            }
        }
        Op::Lerp { t, a, b } => {
            let (tv, av, bv) = (nodes[t].value.data(), nodes[a].value.data(), nodes[b].value.data());
            if nodes[t].needs_grad {
                accumulate(grads, nodes, t, (0..g.len()).map(|i| g[i] * (av[i] - bv[i])).collect());
            }
            if nodes[a].needs_grad {
                accumulate(grads, nodes, a, g.iter().zip(tv).map(|(g, t)| g * t).collect());
            }
            if nodes[b].needs_grad {
                accumulate(grads, nodes, b, g.iter().zip(tv).map(|(g, t)| g * (1.0 - t)).collect());
            }
        }
        Op::Affine { x, scale } => accumulate(grads, nodes, x, g.iter().map(|v| v * scale).collect()),
        Op::Concat { ref parts } => {
            let (n, ctot, h, w) = node.value.dims4().unwrap();
            let plane = h * w;
            let mut offset = 0;
            for &p in parts {
                let c = nodes[p].value.shape()[1];
                if let Some(dst) = slot(grads, nodes, p) {
                    for b in 0..n {
                        let src = &g[(b * ctot + offset) * plane..][..c * plane];
                        for (d, s) in dst[b * c * plane..][..c * plane].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += c;
            }
        }
        Op::Narrow { x, start } => {
            let (n, cin, h, w) = nodes[x].value.dims4().unwrap();
            let c = node.value.shape()[1];
            let plane = h * w;
            if let Some(dst) = slot(grads, nodes, x) {
                for b in 0..n {
                    let src = &g[b * c * plane..][..c * plane];
                    for (d, s) in dst[(b * cin + start) * plane..][..c * plane].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        Op::BroadcastChannels { x } => {
            let (n, c, h, w) = node.value.dims4().unwrap();
            let plane = h * w;
            let mut gx = vec![0.0; n * plane];
            for b in 0..n {
                for k in 0..c {
                    let src = &g[(b * c + k) * plane..][..plane];
                    for (d, s) in gx[b * plane..][..plane].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            accumulate(grads, nodes, x, gx);
        }
        Op::SumChannels { x } => {
            let (n, c, h, w) = nodes[x].value.dims4().unwrap();
            let plane = h * w;
            let mut gx = vec![0.0; n * c * plane];
            for b in 0..n {
                for k in 0..c {
                    gx[(b * c + k) * plane..][..plane].copy_from_slice(&g[b * plane..][..plane]);
                }
            }
            accumulate(grads, nodes, x, gx);
        }
        Op::SumPool { x, size } => {
            let (n, c, h, w) = nodes[x].value.dims4().unwrap();
            accumulate(grads, nodes, x, kernels::sum_pool_backward(g, n * c, h, w, size));
        }
        Op::Sample { x, coords } => {
            let img = nodes[x].value.data();
            let cv = nodes[coords].value.data();
            let (n, c, h, w) = nodes[x].value.dims4().unwrap();
            let (_, _, oh, ow) = node.value.dims4().unwrap();
            let plane = oh * ow;
            let mut gx = nodes[x].needs_grad.then(|| vec![0.0; img.len()]);
            let mut gc = nodes[coords].needs_grad.then(|| vec![0.0; cv.len()]);
            for b in 0..n {
                for p in 0..plane {
                    let y = cv[(b * 2) * plane + p];
                    let xx = cv[(b * 2 + 1) * plane + p];
                    let bl = Bilinear::at(y, xx, h, w);
                    for k in 0..c {
                        let gv = g[(b * c + k) * plane + p];
                        let src = &img[(b * c + k) * h * w..][..h * w];
                        if let Some(gx) = gx.as_mut() {
                            bl.scatter(gv, &mut gx[(b * c + k) * h * w..][..h * w], w);
                        }
                        if let Some(gc) = gc.as_mut() {
                            let (dy, dx) = bl.coord_grad(src, w);
                            gc[(b * 2) * plane + p] += gv * dy;
                            gc[(b * 2 + 1) * plane + p] += gv * dx;
                        }
                    }
                }
            }
            if let Some(gx) = gx {
                accumulate(grads, nodes, x, gx);
            }
            if let Some(gc) = gc {
                accumulate(grads, nodes, coords, gc);
            }
        }
        Op::PadReplicate { x, pad } => {
            let (n, c, h, w) = nodes[x].value.dims4().unwrap();
            let (ph, pw) = (h + 2 * pad, w + 2 * pad);
            let mut gx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                for y in 0..ph {
                    let sy = y.saturating_sub(pad).min(h - 1);
                    for xx in 0..pw {
                        let sx = xx.saturating_sub(pad).min(w - 1);
                        gx[(plane * h + sy) * w + sx] += g[(plane * ph + y) * pw + xx];
                    }
                }
            }
            accumulate(grads, nodes, x, gx);
        }
        Op::Sum { x } => {
            let len = nodes[x].value.len();
            accumulate(grads, nodes, x, vec![g[0]; len]);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        self.tape.nodes.borrow()[self.id].value.dims4()
    }

    fn same_tape(&self, other: &Var<'_>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }

    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let v = self.value();
        let data = v.data().iter().map(|&x| f(x)).collect();
        self.tape.record(name, v.shape().to_vec(), data, op, &[self.id])
    }

    fn binary(&self, other: &Var<'_>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        assert!(self.same_tape(other), "variables from different tapes");
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(Error::dim(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.record(name, a.shape().to_vec(), data, op, &[self.id, other.id])
    }

    /// 2-D convolution; `weight` is OutC×InC×kh×kw and `bias` has OutC entries.
    pub fn conv2d(&self, weight: &Var<'_>, bias: &Var<'_>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let (n, c, h, wd) = x.dims4()?;
        let (oc, ic, kh, kw) = w.dims4()?;
        if ic != c {
            return Err(Error::dim("conv2d", format!("input has {c} channels, weight expects {ic}")));
        }
        if b.len() != oc {
            return Err(Error::dim("conv2d", format!("bias has {} entries, expected {oc}", b.len())));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be ≥ 1".into()));
        }
        let geom = ConvGeom::new(c, h, wd, kh, kw, stride, padding)
            .ok_or_else(|| Error::dim("conv2d", format!("kernel {kh}×{kw} larger than padded input {h}×{wd}")))?;
        let data = kernels::conv2d_forward(x.data(), n, &geom, w.data(), b.data(), oc);
        self.tape.record(
            "conv2d",
            vec![n, oc, geom.oh, geom.ow],
            data,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                stride,
                pad: padding,
            },
            &[self.id, weight.id, bias.id],
        )
    }

    /// Transposed convolution (adjoint of [`Var::conv2d`] with the same
    /// weight); `weight` is InC×OutC×kh×kw.
    pub fn conv2d_transpose(&self, weight: &Var<'_>, bias: &Var<'_>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let (n, c, h, wd) = x.dims4()?;
        let (ic, oc, kh, kw) = w.dims4()?;
        if ic != c {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("input has {c} channels, weight expects {ic}"),
            ));
        }
        if b.len() != oc {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("bias has {} entries, expected {oc}", b.len()),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d_transpose stride must be ≥ 1".into()));
        }
        let oh = ((h - 1) * stride + kh)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::dim("conv2d_transpose", "padding too large"))?;
        let ow = ((wd - 1) * stride + kw)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::dim("conv2d_transpose", "padding too large"))?;
        let geom = ConvGeom::new(oc, oh, ow, kh, kw, stride, padding)
            .filter(|g| g.oh == h && g.ow == wd)
            .ok_or_else(|| Error::dim("conv2d_transpose", "inconsistent geometry"))?;
        let data = kernels::conv_transpose_forward(x.data(), n, &geom, w.data(), b.data(), c);
        self.tape.record(
            "conv2d_transpose",
            vec![n, oc, oh, ow],
            data,
            Op::ConvTranspose2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                stride,
                pad: padding,
            },
            &[self.id, weight.id, bias.id],
        )
    }

    /// Bilinear resize, align-corners-false.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim("resize", "output size must be positive"));
        }
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let data = kernels::resize_forward(x.data(), n * c, h, w, out_h, out_w);
        self.tape
            .record("resize", vec![n, c, out_h, out_w], data, Op::Resize { x: self.id }, &[self.id])
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channel(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let plane = h * w;
        let xs = x.data();
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let m = (0..c).map(|k| xs[base + k * plane + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..c {
                    let e = (xs[base + k * plane + p] - m).exp();
                    out[base + k * plane + p] = e;
                    z += e;
                }
                for k in 0..c {
                    out[base + k * plane + p] /= z;
                }
            }
        }
        self.tape.record(
            "softmax_channel",
            x.shape().to_vec(),
            out,
            Op::SoftmaxChannel { x: self.id },
            &[self.id],
        )
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid { x: self.id })
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, Op::Tanh { x: self.id })
    }

    /// `exp(min(x, 40))`.
    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", |v| v.min(EXP_INPUT_CLAMP).exp(), Op::Exp { x: self.id })
    }

    /// `ln(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary("softplus", softplus, Op::Softplus { x: self.id })
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var<'t>> {
        self.unary(
            "leaky_relu",
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu { x: self.id, slope },
        )
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary("square", |v| v * v, Op::Square { x: self.id })
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        self.unary("abs", f64::abs, Op::Abs { x: self.id })
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        self.unary("scale", |v| v * factor, Op::Affine { x: self.id, scale: factor })
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Result<Var<'t>> {
        let neg = self.scale(-1.0)?;
        let one = self.tape.constant(Tensor::ones(&self.shape()));
        one.add(&neg)
    }

    pub fn add(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub { a: self.id, b: other.id })
    }

    pub fn mul(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul { a: self.id, b: other.id })
    }

    pub fn div(&self, other: &Var<'_>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div { a: self.id, b: other.id })
    }

    /// `self·a + (1 − self)·b`, clamped to the range spanned by `a` and `b`
    /// so that rounding never leaves the convex hull. Endpoints are exact.
    pub fn lerp(&self, a: &Var<'_>, b: &Var<'_>) -> Result<Var<'t>> {
        assert!(self.same_tape(a) && self.same_tape(b), "variables from different tapes");
        let (tv, av, bv) = (self.value(), a.value(), b.value());
        if tv.shape() != av.shape() || tv.shape() != bv.shape() {
            return Err(Error::dim(
                "lerp",
                format!("{:?} / {:?} / {:?}", tv.shape(), av.shape(), bv.shape()),
            ));
        }
        let data = (0..tv.len())
            .map(|i| {
                let (t, a, b) = (tv.data()[i], av.data()[i], bv.data()[i]);
                (t * a + (1.0 - t) * b).clamp(a.min(b), a.max(b))
            })
            .collect();
        self.tape.record(
            "lerp",
            tv.shape().to_vec(),
            data,
            Op::Lerp {
                t: self.id,
                a: a.id,
                b: b.id,
            },
            &[self.id, a.id, b.id],
        )
    }

    /// Adds a constant tensor of the same shape (no gradient to `c`).
    pub fn add_const(&self, c: &Tensor) -> Result<Var<'t>> {
        let cv = self.tape.constant(c.clone());
        self.add(&cv)
    }

    pub fn mul_const(&self, c: &Tensor) -> Result<Var<'t>> {
        let cv = self.tape.constant(c.clone());
        self.mul(&cv)
    }

    /// Sub-range `[start, start+len)` of the channel axis.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if len == 0 || start + len > c {
            return Err(Error::dim("narrow_channels", format!("range {start}+{len} outside {c} channels")));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            out.extend_from_slice(&x.data()[(b * c + start) * plane..][..len * plane]);
        }
        self.tape.record(
            "narrow_channels",
            vec![n, len, h, w],
            out,
            Op::Narrow { x: self.id, start },
            &[self.id],
        )
    }

    pub fn split_channels(&self, counts: &[usize]) -> Result<Vec<Var<'t>>> {
        let c = self.dims4()?.1;
        if counts.iter().sum::<usize>() != c {
            return Err(Error::dim("split_channels", format!("counts {counts:?} do not sum to {c}")));
        }
        let mut start = 0;
        counts
            .iter()
            .map(|&k| {
                let v = self.narrow_channels(start, k);
                start += k;
                v
            })
            .collect()
    }

    /// N×1×H×W → N×C×H×W by repetition.
    pub fn broadcast_channels(&self, channels: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if c != 1 || channels == 0 {
            return Err(Error::dim("broadcast_channels", format!("expected one channel, got {c}")));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * channels * plane);
        for b in 0..n {
            for _ in 0..channels {
                out.extend_from_slice(&x.data()[b * plane..][..plane]);
            }
        }
        self.tape.record(
            "broadcast_channels",
            vec![n, channels, h, w],
            out,
            Op::BroadcastChannels { x: self.id },
            &[self.id],
        )
    }

    /// N×C×H×W → N×1×H×W.
    pub fn sum_channels(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let plane = h * w;
        let mut out = vec![0.0; n * plane];
        for b in 0..n {
            for k in 0..c {
                for (o, v) in out[b * plane..][..plane].iter_mut().zip(&x.data()[(b * c + k) * plane..][..plane]) {
                    *o += v;
                }
            }
        }
        self.tape
            .record("sum_channels", vec![n, 1, h, w], out, Op::SumChannels { x: self.id }, &[self.id])
    }

    /// Sum over non-overlapping `size×size` patches.
    pub fn sum_pool(&self, size: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if size == 0 || h % size != 0 || w % size != 0 {
            return Err(Error::dim("sum_pool", format!("{h}×{w} not divisible by {size}")));
        }
        let data = kernels::sum_pool_forward(x.data(), n * c, h, w, size);
        self.tape.record(
            "sum_pool",
            vec![n, c, h / size, w / size],
            data,
            Op::SumPool { x: self.id, size },
            &[self.id],
        )
    }

    /// Mean over non-overlapping `size×size` patches.
    pub fn avg_pool(&self, size: usize) -> Result<Var<'t>> {
        self.sum_pool(size)?.scale(1.0 / (size * size) as f64)
    }

    /// Bilinear read of `self` at absolute pixel coordinates `coords`
    /// (N×2×H'×W', channel 0 = row, channel 1 = column), clamping to the edge.
    pub fn sample_bilinear_at(&self, coords: &Var<'_>) -> Result<Var<'t>> {
        let x = self.value();
        let cv = coords.value();
        let (n, c, h, w) = x.dims4()?;
        let (cn, cc, oh, ow) = cv.dims4()?;
        if cn != n || cc != 2 {
            return Err(Error::dim(
                "sample_bilinear_at",
                format!("coords {:?} for input {:?}", cv.shape(), x.shape()),
            ));
        }
        let plane = oh * ow;
        let mut out = vec![0.0; n * c * plane];
        let cd = cv.data();
        for b in 0..n {
            for p in 0..plane {
                let bl = Bilinear::at(cd[(b * 2) * plane + p], cd[(b * 2 + 1) * plane + p], h, w);
                for k in 0..c {
                    out[(b * c + k) * plane + p] = bl.read(&x.data()[(b * c + k) * h * w..][..h * w], w);
                }
            }
        }
        self.tape.record(
            "sample_bilinear_at",
            vec![n, c, oh, ow],
            out,
            Op::Sample {
                x: self.id,
                coords: coords.id,
            },
            &[self.id, coords.id],
        )
    }

    /// Pads height and width by repeating edge pixels.
    pub fn pad_replicate(&self, pad: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![0.0; n * c * ph * pw];
        for plane in 0..n * c {
            for y in 0..ph {
                let sy = y.saturating_sub(pad).min(h - 1);
                for xx in 0..pw {
                    let sx = xx.saturating_sub(pad).min(w - 1);
                    out[(plane * ph + y) * pw + xx] = x.data()[(plane * h + sy) * w + sx];
                }
            }
        }
        self.tape.record(
            "pad_replicate",
            vec![n, c, ph, pw],
            out,
            Op::PadReplicate { x: self.id, pad },
            &[self.id],
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().sum();
        self.tape.record("sum", vec![1], vec![s], Op::Sum { x: self.id }, &[self.id])
    }

    pub fn scalar(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }
}

/// Concatenation along the channel axis.
pub fn concat_channels<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::dim("concat_channels", "no inputs"))?;
    let tape = first.tape;
    let (n, _, h, w) = first.dims4()?;
    let mut ctot = 0;
    let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
    for v in &values {
        let (pn, pc, ph, pw) = v.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::dim("concat_channels", format!("{:?} vs {:?}", v.shape(), values[0].shape())));
        }
        ctot += pc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * ctot * plane);
    for b in 0..n {
        for v in &values {
            let c = v.shape()[1];
            out.extend_from_slice(&v.data()[b * c * plane..][..c * plane]);
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.record("concat_channels", vec![n, ctot, h, w], out, Op::Concat { parts: ids.clone() }, &ids)
}
