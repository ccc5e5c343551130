//! Parameter-owning building blocks on top of [`Graph`].

use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::param::{Init, ParamId, ParamSet};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(ps: &mut ParamSet, name: &str, din: usize, dout: usize) -> Result<Self> {
        Self::with_init(
            ps,
            name,
            din,
            dout,
            Init::FanIn {
                fan_in: din,
                gain: 1.0,
            },
        )
    }

    pub fn with_init(
        ps: &mut ParamSet,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
    ) -> Result<Self> {
        Ok(Self {
            w: ps.add(&format!("{name}.w"), &[dout, din], init)?,
            b: ps.add(&format!("{name}.b"), &[dout], Init::Zeros)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var> {
        let (w, b) = (g.param(ps, self.w), g.param(ps, self.b));
        g.dense(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub k: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square odd kernel with "same" padding.
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        ksize: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = c_in * ksize * ksize;
        Self::with_init(
            ps,
            name,
            c_in,
            c_out,
            ksize,
            stride,
            Init::FanIn { fan_in, gain: 1.0 },
        )
    }

    pub fn with_init(
        ps: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        ksize: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        Ok(Self {
            k: ps.add(&format!("{name}.k"), &[c_out, c_in, ksize, ksize], init)?,
            b: ps.add(&format!("{name}.b"), &[c_out], Init::Zeros)?,
            stride,
            pad: ksize / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var> {
        let (k, b) = (g.param(ps, self.k), g.param(ps, self.b));
        g.conv2d(x, k, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct MaskedConv2d {
    pub k: ParamId,
    pub b: ParamId,
    pub mask: Tensor,
}

impl MaskedConv2d {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        mask: Tensor,
        init: Init,
    ) -> Result<Self> {
        crate::numerics::graph::check_causal_mask(&mask)?;
        let (kh, kw) = (mask.dim(0), mask.dim(1));
        Ok(Self {
            k: ps.add(&format!("{name}.k"), &[c_out, c_in, kh, kw], init)?,
            b: ps.add(&format!("{name}.b"), &[c_out], Init::Zeros)?,
            mask,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var> {
        let (k, b) = (g.param(ps, self.k), g.param(ps, self.b));
        g.masked_conv2d(x, k, Some(b), &self.mask)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.add(&format!("{name}.gamma"), &[channels], Init::Const(1.0))?,
            beta: ps.add(&format!("{name}.beta"), &[channels], Init::Zeros)?,
            groups,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(ps, self.gamma), g.param(ps, self.beta));
        g.group_norm(x, ga, be, self.groups)
    }
}
