//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation of one forward pass in creation order,
//! which is already a topological order. [`Graph::backward`] walks the records
//! once in reverse and accumulates gradients into every node that needs one.

use std::collections::HashMap;

use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, ConvGeom, PadMode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{axis_split, strides, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Plain function pointer used by [`Graph::map_unary`].
pub type UnaryFn = fn(f64) -> f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Relu,
    Gelu,
    Sigmoid,
    Elu,
    Sqrt,
    Square,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Custom(Var, UnaryFn),
    Clamp(Var, f64, f64),
    Powf(Var, f64),
    SumAll(Var),
    SumAxis(Var, usize),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: f64,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
        mode: PadMode,
    },
    Resize(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    IndexSelect(Var, usize, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Options of a 2D convolution.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub pad_mode: PadMode,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
            pad_mode: PadMode::Zero,
        }
    }
}

impl Conv2dOptions {
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: kernel / 2,
            ..Self::default()
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }
}

/// One forward pass worth of recorded operations.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
    checked: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that rejects non-finite values at every op boundary.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            checked: true,
            backward_done: false,
        }
    }

    /// A graph without the per-op finiteness scan.
    pub fn unchecked() -> Self {
        Self {
            checked: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient during backward.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Binds a stored parameter as a leaf; repeated calls return the same node.
    ///
    /// Frozen parameters become constants and never receive a gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let v = if entry.trainable {
            self.variable(entry.value.clone())
        } else {
            self.constant(entry.value.clone())
        };
        self.params.insert(id, v);
        v
    }

    /// Gradient of a bound parameter after backward.
    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }

    /// Every bound parameter with its gradient, sorted by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn bound_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.params.keys().copied().collect();
        ids.sort();
        ids
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Clears all gradients so that backward may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<f64> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&out_shape, &sa);
            let mb = broadcast_map(&out_shape, &sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(av[i], bv[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&out_shape, data)?, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg, "add_scalar")
    }

    fn unary(&mut self, a: Var, kind: Unary, name: &'static str) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |x| -x,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Tanh => f64::tanh,
            Unary::Relu => |x| x.max(0.0),
            Unary::Gelu => gelu,
            Unary::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            Unary::Elu => |x| if x > 0.0 { x } else { x.exp_m1() },
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
        };
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, Op::Unary(a, kind), rg, name)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Neg, "neg")
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp, "exp")
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log, "log")
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh, "tanh")
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu, "relu")
    }
    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Gelu, "gelu")
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid, "sigmoid")
    }
    /// ELU with unit slope parameter.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Elu, "elu")
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt, "sqrt")
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square, "square")
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map_unary(&mut self, a: Var, f: UnaryFn, df: UnaryFn) -> Result<Var> {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, Op::Custom(a, df), rg, "map_unary")
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg, "clamp")
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x.powf(p));
        let rg = self.rg(a);
        self.push(value, Op::Powf(a, p), rg, "powf")
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return dim_err("sum_axis", format!("axis {axis} for shape {:?}", x.shape()));
        }
        let (outer, len, inner) = x.axis_split(axis);
        let d = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, out)?, Op::SumAxis(a, axis), rg, "sum_axis")
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n)
    }

    // ---------------------------------------------------------------- linear algebra

    /// Batched matrix product `[.., M, K] x [.., K, N]` with broadcast batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let info = MatMulInfo::new(&sa, &sb)?;
        let mut out = vec![0.0; info.out_numel()];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (m, k, n) = (info.m, info.k, info.n);
        for (bi, (&ia, &ib)) in info.map_a.iter().zip(&info.map_b).enumerate() {
            kernels::gemm_nn(
                &av[ia * m * k..(ia + 1) * m * k],
                &bv[ib * k * n..(ib + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&info.out_shape, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn permute(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut seen = vec![false; x.rank()];
        if dims.len() != x.rank() || dims.iter().any(|&d| d >= seen.len() || std::mem::replace(&mut seen[d], true)) {
            return dim_err("permute", format!("invalid permutation {dims:?} for rank {}", x.rank()));
        }
        let value = permute_tensor(x, dims);
        let rg = self.rg(a);
        self.push(value, Op::Permute(a, dims.to_vec()), rg, "permute")
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let mut dims: Vec<usize> = (0..self.value(a).rank()).collect();
        if d0 >= dims.len() || d1 >= dims.len() {
            return dim_err("transpose", format!("axes {d0},{d1} for rank {}", dims.len()));
        }
        dims.swap(d0, d1);
        self.permute(a, &dims)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg, "reshape")
    }

    // ---------------------------------------------------------------- normalisation

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return dim_err("softmax", format!("axis {axis} for shape {:?}", x.shape()));
        }
        let value = softmax_along(x, axis, false);
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a, axis), rg, "softmax")
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return dim_err("log_softmax", format!("axis {axis} for shape {:?}", x.shape()));
        }
        let value = softmax_along(x, axis, true);
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a, axis), rg, "log_softmax")
    }

    /// Layer normalisation over `axis` with per-position affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, axis: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return dim_err("layer_norm", format!("axis {axis} for shape {:?}", x.shape()));
        }
        if eps <= 0.0 {
            return dim_err("layer_norm", "eps must be positive");
        }
        let (outer, len, inner) = x.axis_split(axis);
        if self.value(gamma).numel() != len || self.value(beta).numel() != len {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (xhat, _) = layer_norm_stats(x, axis, eps);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = xhat.into_data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for v in &mut out[base..base + inner] {
                    *v = *v * gv[l] + bv[l];
                }
            }
        }
        let shape = x.shape().to_vec();
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                input: a,
                gamma,
                beta,
                axis,
                eps,
            },
            rg,
            "layer_norm",
        )
    }

    // ---------------------------------------------------------------- image ops

    /// Cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, opts: Conv2dOptions) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return dim_err("conv2d", format!("expected rank-4 input and weight, got {xs:?} and {ws:?}"));
        }
        let g = opts.groups.max(1);
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin % g != 0 || cout % g != 0 || cin / g != cin_g {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if let Some(bv) = bias {
            if self.value(bv).numel() != cout {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: self.shape(bv).to_vec(),
                });
            }
        }
        if h + 2 * opts.padding < kh || w + 2 * opts.padding < kw || opts.stride == 0 {
            return dim_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {})", opts.padding));
        }
        if opts.pad_mode == PadMode::Circular && (opts.padding > h || opts.padding > w) {
            return dim_err("conv2d", "circular padding wider than the input");
        }
        let geom = ConvGeom {
            h,
            w,
            kh,
            kw,
            stride: opts.stride,
            pad: opts.padding,
            out_h: (h + 2 * opts.padding - kh) / opts.stride + 1,
            out_w: (w + 2 * opts.padding - kw) / opts.stride + 1,
            mode: opts.pad_mode,
        };
        let table = geom.index_table();
        let cout_g = cout / g;
        let kdim = cin_g * kh * kw;
        let npix = geom.out_h * geom.out_w;
        let plane = h * w;
        let mut out = vec![0.0; b * cout * npix];
        let mut cols = vec![0.0; kdim * npix];
        let xv = self.value(input).data();
        let wv = self.value(weight).data();
        for bi in 0..b {
            for gi in 0..g {
                let src = &xv[(bi * cin + gi * cin_g) * plane..(bi * cin + (gi + 1) * cin_g) * plane];
                kernels::im2col(src, cin_g, &geom, &table, &mut cols);
                let dst = &mut out[(bi * cout + gi * cout_g) * npix..(bi * cout + (gi + 1) * cout_g) * npix];
                kernels::gemm_nn(&wv[gi * cout_g * kdim..(gi + 1) * cout_g * kdim], &cols, dst, cout_g, kdim, npix);
            }
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for bi in 0..b {
                for c in 0..cout {
                    for v in &mut out[(bi * cout + c) * npix..(bi * cout + c + 1) * npix] {
                        *v += bd[c];
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|bv| self.rg(bv));
        self.push(
            Tensor::new(&[b, cout, geom.out_h, geom.out_w], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride: opts.stride,
                pad: opts.padding,
                groups: g,
                mode: opts.pad_mode,
            },
            rg,
            "conv2d",
        )
    }

    /// Bilinear resampling of `[B, C, H, W]` with half-pixel centres (no corner alignment).
    pub fn resize_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(a).to_vec();
        if xs.len() != 4 || out_h == 0 || out_w == 0 {
            return dim_err("resize_bilinear", format!("input {xs:?} to {out_h}x{out_w}"));
        }
        let value = if xs[2] == out_h && xs[3] == out_w {
            self.value(a).clone()
        } else {
            resize_forward(self.value(a), out_h, out_w)
        };
        let rg = self.rg(a);
        self.push(value, Op::Resize(a), rg, "resize_bilinear")
    }

    // ---------------------------------------------------------------- structural

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return dim_err("concat", format!("axis {axis} for shape {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&shape, out)?, Op::Concat(parts.to_vec(), axis), rg, "concat")
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
            return dim_err("narrow", format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape()));
        }
        let (outer, full, inner) = x.axis_split(axis);
        let d = x.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, out)?, Op::Narrow(a, axis, start), rg, "narrow")
    }

    /// Gathers entries `indices` along `axis` (repeats allowed).
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() || indices.is_empty() {
            return dim_err("index_select", format!("axis {axis} of {:?}", x.shape()));
        }
        let (outer, full, inner) = x.axis_split(axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= full) {
            return dim_err("index_select", format!("index {bad} out of range {full}"));
        }
        let d = x.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&d[(o * full + i) * inner..(o * full + i + 1) * inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = indices.len();
        let rg = self.rg(a);
        self.push(
            Tensor::new(&shape, out)?,
            Op::IndexSelect(a, axis, indices.to_vec()),
            rg,
            "index_select",
        )
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    ///
    /// Runs at most once per graph until [`Graph::reset_grads`]. Afterwards
    /// every differentiable leaf holds a gradient, zero if unreachable.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let ls = self.value(loss).shape().to_vec();
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            self.fill_leaf_grads();
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(&ls, 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[idx].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            let contributions = self.node_backward(idx, &gout)?;
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => {
                        for (x, y) in acc.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.fill_leaf_grads();
        Ok(())
    }

    fn fill_leaf_grads(&mut self) {
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grad.is_none() {
                *grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
    }

    fn node_backward(&self, idx: usize, gout: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, reduce_to(gout, val(*a).shape())));
                out.push((*b, reduce_to(gout, val(*b).shape())));
            }
            Op::Sub(a, b) => {
                out.push((*a, reduce_to(gout, val(*a).shape())));
                out.push((*b, reduce_to(&gout.map(|g| -g), val(*b).shape())));
            }
            Op::Mul(a, b) => {
                let (ea, eb) = expand_pair(val(*a), val(*b), y.shape());
                if self.rg(*a) {
                    let ga = Tensor::from_fn(y.shape(), |i| gout.data()[i] * eb[i]);
                    out.push((*a, reduce_to(&ga, val(*a).shape())));
                }
                if self.rg(*b) {
                    let gb = Tensor::from_fn(y.shape(), |i| gout.data()[i] * ea[i]);
                    out.push((*b, reduce_to(&gb, val(*b).shape())));
                }
            }
            Op::Div(a, b) => {
                let (ea, eb) = expand_pair(val(*a), val(*b), y.shape());
                if self.rg(*a) {
                    let ga = Tensor::from_fn(y.shape(), |i| gout.data()[i] / eb[i]);
                    out.push((*a, reduce_to(&ga, val(*a).shape())));
                }
                if self.rg(*b) {
                    let gb = Tensor::from_fn(y.shape(), |i| -gout.data()[i] * ea[i] / (eb[i] * eb[i]));
                    out.push((*b, reduce_to(&gb, val(*b).shape())));
                }
            }
            Op::Scale(a, s) => out.push((*a, gout.map(|g| g * s))),
            Op::AddScalar(a) => out.push((*a, gout.clone())),
            Op::Unary(a, kind) => {
                let x = val(*a).data();
                let yd = y.data();
                let gd = gout.data();
                let g = Tensor::from_fn(y.shape(), |i| {
                    let d = match kind {
                        Unary::Neg => -1.0,
                        Unary::Exp => yd[i],
                        Unary::Log => 1.0 / x[i],
                        Unary::Tanh => 1.0 - yd[i] * yd[i],
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Gelu => gelu_grad(x[i]),
                        Unary::Sigmoid => yd[i] * (1.0 - yd[i]),
                        Unary::Elu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                yd[i] + 1.0
                            }
                        }
                        Unary::Sqrt => 0.5 / yd[i],
                        Unary::Square => 2.0 * x[i],
                    };
                    gd[i] * d
                });
                out.push((*a, g));
            }
            Op::Custom(a, df) => {
                let x = val(*a).data();
                out.push((*a, Tensor::from_fn(y.shape(), |i| gout.data()[i] * df(x[i]))));
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a).data();
                out.push((
                    *a,
                    Tensor::from_fn(y.shape(), |i| {
                        if x[i] >= *lo && x[i] <= *hi {
                            gout.data()[i]
                        } else {
                            0.0
                        }
                    }),
                ));
            }
            Op::Powf(a, p) => {
                let x = val(*a).data();
                out.push((*a, Tensor::from_fn(y.shape(), |i| gout.data()[i] * p * x[i].powf(p - 1.0))));
            }
            Op::SumAll(a) => out.push((*a, Tensor::full(val(*a).shape(), gout.item()))),
            Op::SumAxis(a, axis) => {
                let xs = val(*a).shape();
                let (outer, len, inner) = axis_split(xs, *axis);
                let gd = gout.data();
                let g = Tensor::from_fn(xs, |i| {
                    let o = i / (len * inner);
                    let r = i % inner;
                    gd[o * inner + r]
                });
                debug_assert_eq!(g.numel(), outer * len * inner);
                out.push((*a, g));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let info = MatMulInfo::new(sa, sb)?;
                let (m, k, n) = (info.m, info.k, info.n);
                let gd = gout.data();
                if self.rg(*a) {
                    let bv = val(*b).data();
                    let mut ga = vec![0.0; val(*a).numel()];
                    for (bi, (&ia, &ib)) in info.map_a.iter().zip(&info.map_b).enumerate() {
                        kernels::gemm_nt(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &bv[ib * k * n..(ib + 1) * k * n],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    out.push((*a, Tensor::new(sa, ga)?));
                }
                if self.rg(*b) {
                    let av = val(*a).data();
                    let mut gb = vec![0.0; val(*b).numel()];
                    for (bi, (&ia, &ib)) in info.map_a.iter().zip(&info.map_b).enumerate() {
                        kernels::gemm_tn(
                            &av[ia * m * k..(ia + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    out.push((*b, Tensor::new(sb, gb)?));
                }
            }
            Op::Permute(a, dims) => {
                let mut inv = vec![0; dims.len()];
                for (i, &d) in dims.iter().enumerate() {
                    inv[d] = i;
                }
                out.push((*a, permute_tensor(gout, &inv)));
            }
            Op::Reshape(a) => out.push((*a, gout.reshape(val(*a).shape())?)),
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                let gd = gout.data();
                let mut g = vec![0.0; yd.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + r;
                        let dotp: f64 = (0..len).map(|l| gd[at(l)] * yd[at(l)]).sum();
                        for l in 0..len {
                            g[at(l)] = yd[at(l)] * (gd[at(l)] - dotp);
                        }
                    }
                }
                out.push((*a, Tensor::new(y.shape(), g)?));
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                let gd = gout.data();
                let mut g = vec![0.0; yd.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + r;
                        let gsum: f64 = (0..len).map(|l| gd[at(l)]).sum();
                        for l in 0..len {
                            g[at(l)] = gd[at(l)] - yd[at(l)].exp() * gsum;
                        }
                    }
                }
                out.push((*a, Tensor::new(y.shape(), g)?));
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                axis,
                eps,
            } => {
                let x = val(*input);
                let (outer, len, inner) = x.axis_split(*axis);
                let (xhat, rstd) = layer_norm_stats(x, *axis, *eps);
                let xh = xhat.data();
                let gv = val(*gamma).data();
                let gd = gout.data();
                let mut gx = vec![0.0; x.numel()];
                let mut ggamma = vec![0.0; len];
                let mut gbeta = vec![0.0; len];
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + r;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for l in 0..len {
                            let i = at(l);
                            let d = gd[i] * gv[l];
                            mean_d += d;
                            mean_dx += d * xh[i];
                            ggamma[l] += gd[i] * xh[i];
                            gbeta[l] += gd[i];
                        }
                        mean_d /= len as f64;
                        mean_dx /= len as f64;
                        let rs = rstd[o * inner + r];
                        for l in 0..len {
                            let i = at(l);
                            gx[i] = rs * (gd[i] * gv[l] - mean_d - xh[i] * mean_dx);
                        }
                    }
                }
                out.push((*input, Tensor::new(x.shape(), gx)?));
                out.push((*gamma, Tensor::new(val(*gamma).shape(), ggamma)?));
                out.push((*beta, Tensor::new(val(*beta).shape(), gbeta)?));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                groups,
                mode,
            } => {
                let x = val(*input);
                let wt = val(*weight);
                let (b, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (cout, cin_g, kh, kw) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
                let geom = ConvGeom {
                    h,
                    w,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *pad,
                    out_h: y.shape()[2],
                    out_w: y.shape()[3],
                    mode: *mode,
                };
                let table = geom.index_table();
                let g = *groups;
                let cout_g = cout / g;
                let kdim = cin_g * kh * kw;
                let npix = geom.out_h * geom.out_w;
                let plane = h * w;
                let gd = gout.data();
                let need_x = self.rg(*input);
                let need_w = self.rg(*weight);
                let mut gx = vec![0.0; if need_x { x.numel() } else { 0 }];
                let mut gw = vec![0.0; if need_w { wt.numel() } else { 0 }];
                let mut cols = vec![0.0; kdim * npix];
                let mut dcols = vec![0.0; kdim * npix];
                for bi in 0..b {
                    for gi in 0..g {
                        let go = &gd[(bi * cout + gi * cout_g) * npix..(bi * cout + (gi + 1) * cout_g) * npix];
                        if need_w {
                            let src = &x.data()[(bi * cin + gi * cin_g) * plane..(bi * cin + (gi + 1) * cin_g) * plane];
                            kernels::im2col(src, cin_g, &geom, &table, &mut cols);
                            kernels::gemm_nt(go, &cols, &mut gw[gi * cout_g * kdim..(gi + 1) * cout_g * kdim], cout_g, npix, kdim);
                        }
                        if need_x {
                            dcols.iter_mut().for_each(|v| *v = 0.0);
                            kernels::gemm_tn(&wt.data()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim], go, &mut dcols, kdim, cout_g, npix);
                            let dst = &mut gx[(bi * cin + gi * cin_g) * plane..(bi * cin + (gi + 1) * cin_g) * plane];
                            kernels::col2im(&dcols, cin_g, &geom, &table, dst);
                        }
                    }
                }
                if need_x {
                    out.push((*input, Tensor::new(x.shape(), gx)?));
                }
                if need_w {
                    out.push((*weight, Tensor::new(wt.shape(), gw)?));
                }
                if let Some(bv) = bias {
                    let mut gb = vec![0.0; cout];
                    for bi in 0..b {
                        for (c, acc) in gb.iter_mut().enumerate() {
                            *acc += gd[(bi * cout + c) * npix..(bi * cout + c + 1) * npix].iter().sum::<f64>();
                        }
                    }
                    out.push((*bv, Tensor::new(val(*bv).shape(), gb)?));
                }
            }
            Op::Resize(a) => {
                let xs = val(*a).shape();
                if xs == y.shape() {
                    out.push((*a, gout.clone()));
                } else {
                    out.push((*a, resize_backward(gout, xs)));
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let gd = gout.data();
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape();
                    let len = ps[*axis];
                    if self.rg(p) {
                        let mut g = Vec::with_capacity(val(p).numel());
                        for o in 0..outer {
                            g.extend_from_slice(&gd[(o * total + offset) * inner..(o * total + offset + len) * inner]);
                        }
                        out.push((p, Tensor::new(ps, g)?));
                    }
                    offset += len;
                }
            }
            Op::Narrow(a, axis, start) => {
                let xs = val(*a).shape();
                let (outer, full, inner) = axis_split(xs, *axis);
                let len = y.shape()[*axis];
                let mut g = vec![0.0; val(*a).numel()];
                let gd = gout.data();
                for o in 0..outer {
                    g[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*a, Tensor::new(xs, g)?));
            }
            Op::IndexSelect(a, axis, indices) => {
                let xs = val(*a).shape();
                let (outer, full, inner) = axis_split(xs, *axis);
                let mut g = vec![0.0; val(*a).numel()];
                let gd = gout.data();
                let n = indices.len();
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = &gd[(o * n + j) * inner..(o * n + j + 1) * inner];
                        let dst = &mut g[(o * full + i) * inner..(o * full + i + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                out.push((*a, Tensor::new(xs, g)?));
            }
        }
        Ok(out)
    }
}

// -------------------------------------------------------------------- helpers

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast source `inp`.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let n = out.len();
    let off = n - inp.len();
    let in_strides = strides(inp);
    let eff: Vec<usize> = (0..n)
        .map(|i| {
            if i < off || inp[i - off] == 1 {
                0
            } else {
                in_strides[i - off]
            }
        })
        .collect();
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; n];
    let mut cur = 0usize;
    for _ in 0..numel {
        map.push(cur);
        for d in (0..n).rev() {
            idx[d] += 1;
            cur += eff[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn expand_pair(a: &Tensor, b: &Tensor, out: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let expand = |t: &Tensor| -> Vec<f64> {
        if t.shape() == out {
            t.data().to_vec()
        } else {
            broadcast_map(out, t.shape()).into_iter().map(|i| t.data()[i]).collect()
        }
    };
    (expand(a), expand(b))
}

/// Sums a broadcast gradient back onto `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let map = broadcast_map(g.shape(), shape);
    let mut out = vec![0.0; shape.iter().product()];
    for (&i, &v) in map.iter().zip(g.data()) {
        out[i] += v;
    }
    Tensor::new(shape, out).expect("reduced shape is consistent")
}

fn permute_tensor(x: &Tensor, dims: &[usize]) -> Tensor {
    let xs = x.shape();
    let out_shape: Vec<usize> = dims.iter().map(|&d| xs[d]).collect();
    let in_strides = strides(xs);
    let src_strides: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
    let n = dims.len();
    let numel = x.numel();
    let xd = x.data();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; n];
    let mut cur = 0usize;
    for _ in 0..numel {
        out.push(xd[cur]);
        for d in (0..n).rev() {
            idx[d] += 1;
            cur += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permuted shape is consistent")
}

fn softmax_along(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = x.axis_split(axis);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for r in 0..inner {
            let at = |l: usize| (o * len + l) * inner + r;
            let max = (0..len).map(|l| xd[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in 0..len {
                z += (xd[at(l)] - max).exp();
            }
            let lz = z.ln();
            for l in 0..len {
                let i = at(l);
                out[i] = if log { xd[i] - max - lz } else { (xd[i] - max).exp() / z };
            }
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

/// Standardised values and per-slice reciprocal standard deviations.
fn layer_norm_stats(x: &Tensor, axis: usize, eps: f64) -> (Tensor, Vec<f64>) {
    let (outer, len, inner) = x.axis_split(axis);
    let xd = x.data();
    let mut xhat = vec![0.0; xd.len()];
    let mut rstd = vec![0.0; outer * inner];
    for o in 0..outer {
        for r in 0..inner {
            let at = |l: usize| (o * len + l) * inner + r;
            let mean = (0..len).map(|l| xd[at(l)]).sum::<f64>() / len as f64;
            let var = (0..len).map(|l| (xd[at(l)] - mean).powi(2)).sum::<f64>() / len as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[o * inner + r] = rs;
            for l in 0..len {
                xhat[at(l)] = (xd[at(l)] - mean) * rs;
            }
        }
    }
    (Tensor::new(x.shape(), xhat).expect("same shape"), rstd)
}

fn resize_forward(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let ty = kernels::resize_taps(h, out_h);
    let tx = kernels::resize_taps(w, out_w);
    let xd = x.data();
    let mut out = vec![0.0; planes * out_h * out_w];
    for p in 0..planes {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[s[0], s[1], out_h, out_w], out).expect("resize shape")
}

fn resize_backward(g: &Tensor, in_shape: &[usize]) -> Tensor {
    let (planes, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (out_h, out_w) = (g.shape()[2], g.shape()[3]);
    let ty = kernels::resize_taps(h, out_h);
    let tx = kernels::resize_taps(w, out_w);
    let gd = g.data();
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &gd[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = src[oy * out_w + ox];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Tensor::new(in_shape, out).expect("resize shape")
}

struct MatMulInfo {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    map_a: Vec<usize>,
    map_b: Vec<usize>,
}

impl MatMulInfo {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or(TensorError::ShapeMismatch {
            op: "matmul batch",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (map_a, map_b) = if batch.is_empty() {
            (vec![0], vec![0])
        } else {
            (broadcast_map(&batch, ba), broadcast_map(&batch, bb))
        };
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            out_shape,
            map_a,
            map_b,
        })
    }

    fn out_numel(&self) -> usize {
        self.out_shape.iter().product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
        assert_eq!(broadcast_map(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_map(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn matmul_identity_and_permutation() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let out = g.matmul(i2, i2).unwrap();
        assert_eq!(g.value(out), &Tensor::eye(2));
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.constant(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let out = g.matmul(a, p).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_is_stable() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(t(&[2], &[1000.0, 1000.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_two_point_and_constant() {
        let mut g = Graph::new();
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = g.layer_norm(x, 1, gamma, beta, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5);
        let c = g.constant(t(&[1, 2], &[7.0, 7.0]));
        let y = g.layer_norm(c, 1, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_and_box_sum() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 4, 5], |i| i as f64 * 0.1));
        let w = g.constant(Tensor::from_fn(&[2, 2, 1, 1], |i| if i == 0 || i == 3 { 1.0 } else { 0.0 }));
        let y = g.conv2d(x, w, None, Conv2dOptions::default()).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let c = 2.5;
        let x = g.constant(Tensor::full(&[1, 1, 6, 6], c));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, Conv2dOptions::same(3)).unwrap();
        let v = g.value(y);
        for yy in 1..5 {
            for xx in 1..5 {
                assert_eq!(v.at(&[0, 0, yy, xx]), 9.0 * c);
            }
        }
    }

    #[test]
    fn conv_kernel_larger_than_input_fails() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(
            g.conv2d(x, w, None, Conv2dOptions::default()),
            Err(TensorError::Dimension { .. })
        ));
    }

    #[test]
    fn resize_conventions() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
        let y = g.resize_bilinear(x, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.5]);
        let y = g.resize_bilinear(x, 2, 2).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let c = g.constant(Tensor::full(&[1, 2, 3, 5], 0.7));
        let y = g.resize_bilinear(c, 7, 4).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn backward_simple_rules() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones(&[2]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::BackwardTwice)));
        g.reset_grads();
        g.backward(s).unwrap();
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaves_get_zero_grad() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones(&[2]));
        let unused = g.variable(Tensor::ones(&[3]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn checked_mode_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[-1.0]));
        assert!(matches!(g.log(x), Err(TensorError::NonFinite("log"))));
        let mut g = Graph::unchecked();
        let x = g.constant(t(&[1], &[-1.0]));
        assert!(g.log(x).is_ok());
    }

    #[test]
    fn structural_ops() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 1], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 1.0, 2.0, 10.0, 3.0, 4.0, 5.0, 11.0]);
        let n = g.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(n).data(), &[1.0, 2.0, 4.0, 5.0]);
        let s = g.index_select(a, 0, &[1, 1, 0]).unwrap();
        assert_eq!(g.value(s).shape(), &[3, 3]);
        assert_eq!(g.value(s).data()[..3], [3.0, 4.0, 5.0]);
        let p = g.transpose(a, 0, 1).unwrap();
        assert_eq!(g.value(p).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }
}
