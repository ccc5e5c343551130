//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and appends a node to the tape. Calling
//! [`Graph::backward`] walks the tape in reverse, accumulating gradients into
//! the [`ParamSet`] for parameter leaves and returning gradients for input
//! leaves created with [`Graph::input`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::conv::{conv_backward, conv_forward, ConvGeom};
use crate::numerics::linalg::{gemm, MatRef};
use crate::numerics::param::{ParamId, ParamSet};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation with a hand-written backward rule, defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient contributions for each input given the upstream gradient of
    /// the output. Entries for inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        upstream: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScalePerSample(Var, Rc<[f64]>),
    Reshape(Var),
    StraightThrough(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
        mask: Option<Rc<[f64]>>,
    },
    Upsample(Var, usize),
    AddChannel(Var, Var),
    Concat(Vec<Var>),
    Silu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MeanPool(Var),
    Sum(Var),
    Mean(Var),
    MeanPerSample(Var),
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of input leaves after a backward pass.
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that never records gradients; parameters enter as constants.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            no_grad: true,
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let p = params.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// Multiplies sample `n` (leading dimension) by `coeffs[n]`.
    pub fn scale_per_sample(&mut self, x: Var, coeffs: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.dim(0);
        if coeffs.len() != n {
            return Err(Error::shape(format!(
                "scale_per_sample: {} coefficients for batch {n}",
                coeffs.len()
            )));
        }
        let per = xv.len() / n.max(1);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * coeffs[i / per])
            .collect();
        let t = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::ScalePerSample(x, coeffs.into()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Takes the value `forward` but passes gradients to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, forward: Tensor) -> Result<Var> {
        if forward.shape() != self.shape(x) {
            return Err(Error::shape("straight_through value shape"));
        }
        let rg = self.rg(x);
        Ok(self.push(forward, Op::StraightThrough(x), rg))
    }

    /// Affine map `x · wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!("dense: input {xs:?} weights {ws:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(format!("dense: bias {:?}", self.shape(b))));
            }
        }
        let mut out = vec![0.0; n * dout];
        gemm(
            MatRef::row_major(self.value(x).data(), n, din),
            MatRef::row_major(self.value(w).data(), dout, din).t(),
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, dout], out)?, Op::Dense { x, w, b }, rg))
    }

    /// Zero-padded cross-correlation, `x: [n, c_in, h, w]`,
    /// `k: [c_out, c_in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.conv_impl(x, k, b, stride, pad, None)
    }

    /// Convolution whose kernel is multiplied by a spatial `mask: [kh, kw]`.
    /// The mask must be strictly causal in raster order: the centre tap and
    /// every tap after it are zero.
    pub fn masked_conv2d(&mut self, x: Var, k: Var, b: Option<Var>, mask: &Tensor) -> Result<Var> {
        let ks = self.shape(k).to_vec();
        if ks.len() != 4 || mask.shape() != [ks[2], ks[3]] {
            return Err(Error::shape(format!(
                "masked_conv2d: mask {:?} for kernel {ks:?}",
                mask.shape()
            )));
        }
        check_causal_mask(mask)?;
        self.conv_impl(x, k, b, 1, ks[2] / 2, Some(mask.data().into()))
    }

    fn conv_impl(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        mask: Option<Rc<[f64]>>,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape(format!("conv2d: input {xs:?} kernel {ks:?}")));
        }
        if xs[1] != ks[1] {
            return Err(Error::shape(format!(
                "conv2d: input has {} channels, kernel expects {}",
                xs[1], ks[1]
            )));
        }
        if stride == 0 {
            return Err(Error::pre("conv2d: stride must be positive"));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(Error::pre(format!(
                "conv2d: kernel {}x{} not odd",
                ks[2], ks[3]
            )));
        }
        if xs[2] + 2 * pad < ks[2] || xs[3] + 2 * pad < ks[3] {
            return Err(Error::shape("conv2d: kernel larger than padded input"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ks[0]] {
                return Err(Error::shape(format!("conv2d: bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            c_in: xs[1],
            c_out: ks[0],
            h: xs[2],
            w: xs[3],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
        };
        let n = xs[0];
        let kernel = effective_kernel(self.value(k).data(), mask.as_deref(), ks[2] * ks[3]);
        let mut out = vec![0.0; n * geom.c_out * geom.out_pixels()];
        conv_forward(
            self.value(x).data(),
            n,
            &geom,
            &kernel,
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let t = Tensor::new(&[n, geom.c_out, geom.out_h(), geom.out_w()], out)?;
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            t,
            Op::Conv {
                x,
                k,
                b,
                geom,
                mask,
            },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling of `[n, c, h, w]` by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape(format!("upsample: {s:?} by {factor}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1] * oh * ow];
        for (p, plane) in out.chunks_mut(oh * ow).enumerate() {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    plane[y * ow + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Upsample(x, factor), rg))
    }

    /// Adds `v: [n, c]` to every spatial position of `x: [n, c, h, w]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xs, vs) = (self.shape(x).to_vec(), self.shape(v).to_vec());
        if xs.len() != 4 || vs != [xs[0], xs[1]] {
            return Err(Error::shape(format!("add_channel: {xs:?} + {vs:?}")));
        }
        let hw = xs[2] * xs[3];
        let vv = self.value(v).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + vv[i / hw])
            .collect();
        let t = Tensor::new(&xs, data)?;
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(t, Op::AddChannel(x, v), rg))
    }

    /// Concatenation along axis 1 of tensors shaped `[n, c_i, ...]`.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() < 2 {
            return Err(Error::shape("concat needs rank >= 2"));
        }
        let n = first[0];
        let rest: usize = first[2..].iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(Error::shape(format!("concat: {s:?} vs {first:?}")));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(n * channels * rest);
        for s in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).sample(s));
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    /// Clamp to `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let last = *xv.shape().last().expect("rank >= 1");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(last) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Group normalization of `[n, c, h, w]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("group_norm: {s:?}")));
        }
        let c = s[1];
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(Error::pre(format!(
                "group_norm: {groups} groups do not divide {c} channels"
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm: affine shape"));
        }
        const EPS: f64 = 1e-5;
        let hw = s[2] * s[3];
        let m = (c / groups) * hw;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; s[0] * groups];
        for (gi, chunk) in xv.chunks(m).enumerate() {
            let mean = chunk.iter().sum::<f64>() / m as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd[gi] = r;
            for (j, v) in chunk.iter().enumerate() {
                let idx = gi * m + j;
                let ch = (idx / hw) % c;
                xhat[idx] = (v - mean) * r;
                out[idx] = xhat[idx] * gv[ch] + bv[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&s, out)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Per-channel spatial mean: `[n, c, h, w] -> [n, c]`.
    pub fn mean_pool_spatial(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("mean_pool_spatial: {s:?}")));
        }
        let hw = s[2] * s[3];
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[s[0], s[1]], data)?, Op::MeanPool(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    /// Mean over all non-leading dimensions: `[n, ...] -> [n]`.
    pub fn mean_per_sample(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.dim(0);
        let per = xv.len() / n.max(1);
        let data: Vec<f64> = xv
            .data()
            .chunks(per)
            .map(|c| c.iter().sum::<f64>() / per as f64)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(data), Op::MeanPerSample(x), rg)
    }

    /// Batched matrix product `op(a) · op(b)` for `[batch, rows, cols]` inputs.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(Error::shape(format!("bmm: {as_:?} x {bs:?}")));
        }
        let (am, ak) = if ta {
            (as_[2], as_[1])
        } else {
            (as_[1], as_[2])
        };
        let (bk, bn) = if tb { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if ak != bk {
            return Err(Error::shape(format!("bmm inner: {ak} vs {bk}")));
        }
        let batch = as_[0];
        let mut out = vec![0.0; batch * am * bn];
        for i in 0..batch {
            let av = mat(self.value(a).sample(i), as_[1], as_[2], ta);
            let bv = mat(self.value(b).sample(i), bs[1], bs[2], tb);
            gemm(av, bv, &mut out[i * am * bn..(i + 1) * am * bn], 0.0);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[batch, am, bn], out)?,
            Op::Bmm { a, b, ta, tb },
            rg,
        ))
    }

    /// Records an externally computed node with a custom backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        output.check_finite(op.name())?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        ))
    }

    /// Reverse sweep from `root`. The seed gradient is one for every entry of
    /// the root. Parameter gradients are accumulated into `params`.
    pub fn backward(&self, root: Var, params: &mut ParamSet) -> Result<Grads> {
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        if !self.rg(root) {
            return Ok(Grads { slots: grads });
        }
        self.value(root).check_finite("backward root")?;
        grads[root.0] = Some(vec![1.0; self.value(root).len()]);
        let mut leaf_grads: Vec<Option<Vec<f64>>> = Vec::new();
        leaf_grads.resize_with(root.0 + 1, || None);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at node {i}")));
            }
            self.backward_node(node, &g, &mut grads, params)?;
            if matches!(node.op, Op::Leaf) {
                leaf_grads[i] = Some(g);
            }
        }
        Ok(Grads { slots: leaf_grads })
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut ParamSet,
    ) -> Result<()> {
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let p = params.get_mut(*id);
                for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |d| {
                    for ((x, gg), bb) in d.iter_mut().zip(g).zip(bv) {
                        *x += gg * bb;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((x, gg), aa) in d.iter_mut().zip(g).zip(av) {
                        *x += gg * aa;
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |d| {
                d.iter_mut().zip(g).for_each(|(a, b)| *a += c * b)
            }),
            Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => {
                self.acc(grads, *x, |d| add_into(d, g))
            }
            Op::ScalePerSample(x, coeffs) => {
                let per = g.len() / coeffs.len().max(1);
                self.acc(grads, *x, |d| {
                    for (i, (a, b)) in d.iter_mut().zip(g).enumerate() {
                        *a += b * coeffs[i / per];
                    }
                })
            }
            Op::Dense { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, din, dout) = (xs[0], xs[1], ws[0]);
                let gm = MatRef::row_major(g, n, dout);
                if self.rg(*x) {
                    let wv = val(*w);
                    self.acc(grads, *x, |d| {
                        gemm(gm, MatRef::row_major(wv, dout, din), d, 1.0)
                    });
                }
                if self.rg(*w) {
                    let xv = val(*x);
                    self.acc(grads, *w, |d| {
                        gemm(gm.t(), MatRef::row_major(xv, n, din), d, 1.0)
                    });
                }
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for row in g.chunks(dout) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Conv {
                x,
                k,
                b,
                geom,
                mask,
            } => {
                let n = self.shape(*x)[0];
                let taps = geom.kh * geom.kw;
                let kernel = effective_kernel(val(*k), mask.as_deref(), taps);
                let mut dk = self.rg(*k).then(|| vec![0.0; kernel.len()]);
                let mut db = b.filter(|b| self.rg(*b)).map(|_| vec![0.0; geom.c_out]);
                let mut dx = self.rg(*x).then(|| vec![0.0; self.value(*x).len()]);
                conv_backward(
                    val(*x),
                    n,
                    geom,
                    &kernel,
                    g,
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                    dx.as_deref_mut(),
                );
                if let Some(mut dk) = dk {
                    if let Some(m) = mask {
                        for (i, v) in dk.iter_mut().enumerate() {
                            *v *= m[i % taps];
                        }
                    }
                    self.acc(grads, *k, |d| add_into(d, &dk));
                }
                if let (Some(db), Some(b)) = (db, b) {
                    self.acc(grads, *b, |d| add_into(d, &db));
                }
                if let Some(dx) = dx {
                    self.acc(grads, *x, |d| add_into(d, &dx));
                }
            }
            Op::Upsample(x, f) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h * f, w * f);
                self.acc(grads, *x, |d| {
                    for (p, plane) in g.chunks(oh * ow).enumerate() {
                        let dst = &mut d[p * h * w..(p + 1) * h * w];
                        for y in 0..oh {
                            for xx in 0..ow {
                                dst[(y / f) * w + xx / f] += plane[y * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::AddChannel(x, v) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                self.acc(grads, *x, |d| add_into(d, g));
                self.acc(grads, *v, |d| {
                    for (j, chunk) in g.chunks(hw).enumerate() {
                        d[j] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Concat(parts) => {
                let n = self.shape(parts[0])[0];
                let mut offset = 0;
                let total = g.len() / n.max(1);
                let sizes: Vec<usize> = parts.iter().map(|&p| self.value(p).len() / n).collect();
                for (&p, &sz) in parts.iter().zip(&sizes) {
                    let off = offset;
                    self.acc(grads, p, |d| {
                        for s in 0..n {
                            let src = &g[s * total + off..s * total + off + sz];
                            add_into(&mut d[s * sz..(s + 1) * sz], src);
                        }
                    });
                    offset += sz;
                }
            }
            Op::Silu(x) => {
                let xv = val(*x);
                self.acc(grads, *x, |d| {
                    for ((a, gg), &v) in d.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(v);
                        *a += gg * s * (1.0 + v * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((a, gg), &y) in d.iter_mut().zip(g).zip(yv) {
                        *a += gg * y * (1.0 - y);
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                self.acc(grads, *x, |d| {
                    for ((a, gg), &v) in d.iter_mut().zip(g).zip(xv) {
                        *a += gg * sigmoid(v);
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((a, gg), &y) in d.iter_mut().zip(g).zip(yv) {
                        *a += gg * (1.0 - y * y);
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                self.acc(grads, *x, |d| {
                    for ((a, gg), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v >= *lo && v <= *hi {
                            *a += gg;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let yv = node.value.data();
                let last = *node.value.shape().last().expect("rank");
                self.acc(grads, *x, |d| {
                    for ((dr, gr), yr) in
                        d.chunks_mut(last).zip(g.chunks(last)).zip(yv.chunks(last))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((a, gg), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *a += y * (gg - dot);
                        }
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let s = self.shape(*x);
                let c = s[1];
                let hw = s[2] * s[3];
                let m = (c / groups) * hw;
                let gv = val(*gamma);
                self.acc(grads, *gamma, |d| {
                    for (i, (gg, xh)) in g.iter().zip(xhat).enumerate() {
                        d[(i / hw) % c] += gg * xh;
                    }
                });
                self.acc(grads, *beta, |d| {
                    for (i, gg) in g.iter().enumerate() {
                        d[(i / hw) % c] += gg;
                    }
                });
                if self.rg(*x) {
                    self.acc(grads, *x, |d| {
                        for gi in 0..rstd.len() {
                            let base = gi * m;
                            let mut sum_g = 0.0;
                            let mut sum_gx = 0.0;
                            for j in 0..m {
                                let idx = base + j;
                                let gh = g[idx] * gv[(idx / hw) % c];
                                sum_g += gh;
                                sum_gx += gh * xhat[idx];
                            }
                            let r = rstd[gi] / m as f64;
                            for j in 0..m {
                                let idx = base + j;
                                let gh = g[idx] * gv[(idx / hw) % c];
                                d[idx] += r * (m as f64 * gh - sum_g - xhat[idx] * sum_gx);
                            }
                        }
                    });
                }
            }
            Op::MeanPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                self.acc(grads, *x, |d| {
                    for (i, a) in d.iter_mut().enumerate() {
                        *a += g[i / hw] / hw as f64;
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.acc(grads, *x, |d| d.iter_mut().for_each(|a| *a += g[0] / n))
            }
            Op::MeanPerSample(x) => {
                let per = self.value(*x).len() / g.len().max(1);
                self.acc(grads, *x, |d| {
                    for (i, a) in d.iter_mut().enumerate() {
                        *a += g[i / per] / per as f64;
                    }
                })
            }
            Op::Bmm { a, b, ta, tb } => {
                let (as_, bs) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let am = if *ta { as_[2] } else { as_[1] };
                let bn = if *tb { bs[1] } else { bs[2] };
                let batch = as_[0];
                let (asz, bsz) = (as_[1] * as_[2], bs[1] * bs[2]);
                if self.rg(*a) {
                    let bv = val(*b);
                    self.acc(grads, *a, |d| {
                        for i in 0..batch {
                            let gm = MatRef::row_major(&g[i * am * bn..(i + 1) * am * bn], am, bn);
                            let bm = mat(&bv[i * bsz..(i + 1) * bsz], bs[1], bs[2], *tb);
                            let dst = &mut d[i * asz..(i + 1) * asz];
                            if *ta {
                                // dA = op(B) · gᵀ
                                gemm(bm, gm.t(), dst, 1.0);
                            } else {
                                gemm(gm, bm.t(), dst, 1.0);
                            }
                        }
                    });
                }
                if self.rg(*b) {
                    let av = val(*a);
                    self.acc(grads, *b, |d| {
                        for i in 0..batch {
                            let gm = MatRef::row_major(&g[i * am * bn..(i + 1) * am * bn], am, bn);
                            let amat = mat(&av[i * asz..(i + 1) * asz], as_[1], as_[2], *ta);
                            let dst = &mut d[i * bsz..(i + 1) * bsz];
                            if *tb {
                                // dB = gᵀ · op(A)
                                gemm(gm.t(), amat, dst, 1.0);
                            } else {
                                gemm(amat.t(), gm, dst, 1.0);
                            }
                        }
                    });
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.rg(v)).collect();
                let out = op.backward(&ins, &node.value, g, &needs);
                for ((&v, contrib), need) in inputs.iter().zip(out).zip(needs) {
                    if let (Some(c), true) = (contrib, need) {
                        if c.len() != self.value(v).len() {
                            return Err(Error::shape(format!(
                                "{}: gradient length {} for input of {}",
                                op.name(),
                                c.len(),
                                self.value(v).len()
                            )));
                        }
                        self.acc(grads, v, |d| add_into(d, &c));
                    }
                }
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn mat(data: &[f64], rows: usize, cols: usize, transposed: bool) -> MatRef<'_> {
    let m = MatRef::row_major(data, rows, cols);
    if transposed {
        m.t()
    } else {
        m
    }
}

fn effective_kernel(kernel: &[f64], mask: Option<&[f64]>, taps: usize) -> Vec<f64> {
    match mask {
        None => kernel.to_vec(),
        Some(m) => kernel
            .iter()
            .enumerate()
            .map(|(i, v)| v * m[i % taps])
            .collect(),
    }
}

/// Strict raster-order causality: the centre tap and all later taps are zero.
pub fn check_causal_mask(mask: &Tensor) -> Result<()> {
    let s = mask.shape();
    if s.len() != 2 || s[0].is_multiple_of(2) || s[1].is_multiple_of(2) {
        return Err(Error::pre(format!(
            "causal mask must be odd 2-D, got {s:?}"
        )));
    }
    let centre = (s[0] / 2) * s[1] + s[1] / 2;
    if let Some(i) = mask.data()[centre..].iter().position(|&v| v != 0.0) {
        return Err(Error::pre(format!(
            "mask not strictly causal: tap {} at or after centre is nonzero",
            centre + i
        )));
    }
    Ok(())
}

/// Strictly causal `k × k` mask: ones before the centre in raster order.
pub fn causal_mask(k: usize) -> Tensor {
    let centre = (k / 2) * k + k / 2;
    let data = (0..k * k)
        .map(|i| if i < centre { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(&[k, k], data).expect("square mask")
}
