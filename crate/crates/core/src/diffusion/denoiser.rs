//! Budget-conditioned UNet noise predictor.

use crate::diffusion::embed::{timestep_batch, EntropyEmbedding};
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::layers::{Conv2d, Dense, GroupNorm};
use crate::numerics::param::{Init, ParamId, ParamSet};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// Channel width per resolution level; each level after the first halves
    /// the spatial size.
    pub levels: Vec<usize>,
    pub blocks_per_level: usize,
    pub time_embed_dim: usize,
    pub entropy_embed_dim: usize,
    pub groups: usize,
    pub attention: Vec<bool>,
    /// When false the network has no budget pathway at all.
    pub conditioning: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            levels: vec![32, 64],
            blocks_per_level: 2,
            time_embed_dim: 64,
            entropy_embed_dim: 128,
            groups: 8,
            attention: vec![false, false],
            conditioning: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.contains(&0) {
            return Err(Error::pre("denoiser widths must be positive and nonempty"));
        }
        if self.attention.len() != self.levels.len() {
            return Err(Error::pre("one attention flag per level"));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::pre("blocks_per_level must be positive"));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::pre("time_embed_dim must be even and positive"));
        }
        if self.conditioning && self.entropy_embed_dim == 0 {
            return Err(Error::pre("entropy_embed_dim must be positive"));
        }
        for &c in &self.levels {
            if self.groups == 0 || c % self.groups != 0 {
                return Err(Error::pre(format!(
                    "{} groups do not divide width {c}",
                    self.groups
                )));
            }
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels.len() - 1)
    }
}

/// Adds `g_l = g_t + W·h` channel-wise to `act: [n, c, h, w]`, where
/// `g_t: [n, c]`, `h: [n, d]` and `w: [c, d]`.
pub fn film_modulate(
    g: &mut Graph,
    act: Var,
    g_t: Var,
    h: Option<Var>,
    w: Option<Var>,
) -> Result<Var> {
    let c = g.shape(act)[1];
    let cond = match (h, w) {
        (Some(h), Some(w)) => {
            let ws = g.shape(w);
            if ws[0] != c || ws[1] != g.shape(h)[1] {
                return Err(Error::shape(format!(
                    "film projection {:?} for {c} channels and embedding {:?}",
                    ws,
                    g.shape(h)
                )));
            }
            let proj = g.dense(h, w, None)?;
            g.add(g_t, proj)?
        }
        _ => g_t,
    };
    g.add_channel(act, cond)
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    time_proj: Dense,
    film: Option<ParamId>,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(
        ps: &mut ParamSet,
        name: &str,
        cfg: &DenoiserConfig,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let film = if cfg.conditioning {
            Some(ps.add(
                &format!("{name}.film"),
                &[c_in, cfg.entropy_embed_dim],
                Init::FanIn {
                    fan_in: cfg.entropy_embed_dim,
                    gain: 1.0,
                },
            )?)
        } else {
            None
        };
        Ok(Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), c_in, cfg.groups)?,
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_out, 3, 1)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), c_out, cfg.groups)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, 1)?,
            time_proj: Dense::new(ps, &format!("{name}.time"), cfg.time_embed_dim, c_in)?,
            film,
            skip: if c_in != c_out {
                Some(Conv2d::new(ps, &format!("{name}.skip"), c_in, c_out, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x: Var,
        temb: Var,
        h: Option<Var>,
    ) -> Result<Var> {
        let a = self.norm1.forward(g, ps, x)?;
        let a = g.silu(a);
        let g_t = self.time_proj.forward(g, ps, temb)?;
        let w = self.film.map(|id| g.param(ps, id));
        let a = film_modulate(g, a, g_t, h, w)?;
        let a = self.conv1.forward(g, ps, a)?;
        let a = self.norm2.forward(g, ps, a)?;
        let a = g.silu(a);
        let a = self.conv2.forward(g, ps, a)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, ps, x)?,
            None => x,
        };
        g.add(a, s)
    }
}

#[derive(Clone, Debug)]
struct Attention {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    out: Conv2d,
}

impl Attention {
    fn new(ps: &mut ParamSet, name: &str, c: usize, groups: usize) -> Result<Self> {
        let k = Conv2d::new(ps, &format!("{name}.k"), c, c, 1, 1)?;
        // A key bias shifts every score of a query row equally, so softmax
        // cancels it and its gradient is identically zero. Keep it frozen.
        ps.set_trainable(k.b, false);
        Ok(Self {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), c, groups)?,
            q: Conv2d::new(ps, &format!("{name}.q"), c, c, 1, 1)?,
            k,
            v: Conv2d::new(ps, &format!("{name}.v"), c, c, 1, 1)?,
            out: Conv2d::new(ps, &format!("{name}.out"), c, c, 1, 1)?,
        })
    }

    fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let a = self.norm.forward(g, ps, x)?;
        let flat = |g: &mut Graph, v: Var| g.reshape(v, &[n, c, hw]);
        let q = self.q.forward(g, ps, a)?;
        let q = flat(g, q)?;
        let k = self.k.forward(g, ps, a)?;
        let k = flat(g, k)?;
        let v = self.v.forward(g, ps, a)?;
        let v = flat(g, v)?;
        let scores = g.bmm(q, k, true, false)?;
        let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = g.softmax(scores);
        let o = g.bmm(v, attn, false, true)?;
        let o = g.reshape(o, &s)?;
        let o = self.out.forward(g, ps, o)?;
        g.add(x, o)
    }
}

pub struct DenoiserOutput {
    /// Predicted noise, same shape as the input.
    pub eps: Var,
    /// Spatially pooled bottleneck activation `[n, c_last]`.
    pub feature: Var,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    time1: Dense,
    time2: Dense,
    embedding: Option<EntropyEmbedding>,
    input: Conv2d,
    down: Vec<Vec<ResBlock>>,
    down_attn: Vec<Option<Attention>>,
    downsample: Vec<Conv2d>,
    mid: Vec<ResBlock>,
    mid_attn: Option<Attention>,
    up: Vec<Vec<ResBlock>>,
    upsample: Vec<Conv2d>,
    out_norm: GroupNorm,
    output: Conv2d,
}

impl Denoiser {
    /// Registers all parameters under `prefix` in `ps`.
    pub fn new(config: DenoiserConfig, ps: &mut ParamSet, prefix: &str) -> Result<Self> {
        config.validate()?;
        let p = |s: &str| format!("{prefix}.{s}");
        let td = config.time_embed_dim;
        let levels = config.levels.clone();
        let c0 = levels[0];
        let last = *levels.last().expect("nonempty");
        let bpl = config.blocks_per_level;

        let embedding = if config.conditioning {
            Some(EntropyEmbedding::new(
                ps,
                &p("psi"),
                config.entropy_embed_dim,
            )?)
        } else {
            None
        };
        let time1 = Dense::new(ps, &p("time1"), td, td)?;
        let time2 = Dense::new(ps, &p("time2"), td, td)?;
        let input = Conv2d::new(ps, &p("in"), 1, c0, 3, 1)?;

        let mut down = Vec::new();
        let mut down_attn = Vec::new();
        let mut downsample = Vec::new();
        let mut c_prev = c0;
        for (l, &c) in levels.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..bpl {
                let cin = if b == 0 { c_prev } else { c };
                blocks.push(ResBlock::new(
                    ps,
                    &p(&format!("down{l}.{b}")),
                    &config,
                    cin,
                    c,
                )?);
            }
            down.push(blocks);
            let is_last = l + 1 == levels.len();
            down_attn.push(if config.attention[l] && !is_last {
                Some(Attention::new(
                    ps,
                    &p(&format!("down{l}.attn")),
                    c,
                    config.groups,
                )?)
            } else {
                None
            });
            if !is_last {
                downsample.push(Conv2d::new(ps, &p(&format!("down{l}.pool")), c, c, 3, 2)?);
            }
            c_prev = c;
        }

        let mid = vec![
            ResBlock::new(ps, &p("mid.0"), &config, last, last)?,
            ResBlock::new(ps, &p("mid.1"), &config, last, last)?,
        ];
        let mid_attn = if *config.attention.last().expect("nonempty") {
            Some(Attention::new(ps, &p("mid.attn"), last, config.groups)?)
        } else {
            None
        };

        let mut up = Vec::new();
        let mut upsample = Vec::new();
        let mut c_cur = last;
        for l in (0..levels.len()).rev() {
            let c = levels[l];
            let mut blocks = Vec::new();
            for b in 0..bpl {
                let cin = if b == 0 { c_cur + c } else { c };
                blocks.push(ResBlock::new(
                    ps,
                    &p(&format!("up{l}.{b}")),
                    &config,
                    cin,
                    c,
                )?);
            }
            up.push(blocks);
            if l > 0 {
                upsample.push(Conv2d::new(
                    ps,
                    &p(&format!("up{l}.grow")),
                    c,
                    levels[l - 1],
                    3,
                    1,
                )?);
                c_cur = levels[l - 1];
            } else {
                c_cur = c;
            }
        }

        Ok(Self {
            out_norm: GroupNorm::new(ps, &p("out.norm"), c0, config.groups)?,
            output: Conv2d::new(ps, &p("out.conv"), c0, 1, 3, 1)?,
            config,
            time1,
            time2,
            embedding,
            input,
            down,
            down_attn,
            downsample,
            mid,
            mid_attn,
            up,
            upsample,
        })
    }

    /// Every per-block projection `W^(l)` (empty without conditioning).
    pub fn film_params(&self) -> Vec<ParamId> {
        self.down
            .iter()
            .flatten()
            .chain(&self.mid)
            .chain(self.up.iter().flatten())
            .filter_map(|b| b.film)
            .collect()
    }

    pub fn embedding(&self) -> Option<&EntropyEmbedding> {
        self.embedding.as_ref()
    }

    pub fn feature_dim(&self) -> usize {
        *self.config.levels.last().expect("nonempty")
    }

    /// Budget embedding `h = ψ(H_norm)` for a batch of normalized budgets.
    pub fn embed_budget(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        h_norm: &[f64],
    ) -> Result<Option<Var>> {
        match &self.embedding {
            Some(e) => {
                let x = g.constant(Tensor::new(&[h_norm.len(), 1], h_norm.to_vec())?);
                Ok(Some(e.forward(g, ps, x)?))
            }
            None => Ok(None),
        }
    }

    /// ε̂(x_t, t, H) for `x_t: [n, 1, h, w]`, one timestep and normalized
    /// budget per sample. `h` may be precomputed with [`Self::embed_budget`].
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x_t: Var,
        ts: &[usize],
        h: Option<Var>,
    ) -> Result<DenoiserOutput> {
        let s = g.shape(x_t).to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape(format!(
                "denoiser expects [n, 1, h, w], got {s:?}"
            )));
        }
        let m = self.config.size_multiple();
        if !s[2].is_multiple_of(m) || !s[3].is_multiple_of(m) {
            return Err(Error::shape(format!(
                "spatial size {}x{} not divisible by {m}",
                s[2], s[3]
            )));
        }
        if ts.len() != s[0] {
            return Err(Error::shape(format!(
                "{} timesteps for batch {}",
                ts.len(),
                s[0]
            )));
        }
        if self.config.conditioning && h.is_none() {
            return Err(Error::pre("conditional denoiser needs a budget embedding"));
        }
        let h = if self.config.conditioning { h } else { None };

        let temb = g.constant(timestep_batch(ts, self.config.time_embed_dim)?);
        let temb = self.time1.forward(g, ps, temb)?;
        let temb = g.silu(temb);
        let temb = self.time2.forward(g, ps, temb)?;
        let temb = g.silu(temb);

        let mut a = self.input.forward(g, ps, x_t)?;
        let mut skips = Vec::new();
        for l in 0..self.down.len() {
            for b in &self.down[l] {
                a = b.forward(g, ps, a, temb, h)?;
            }
            if let Some(att) = &self.down_attn[l] {
                a = att.forward(g, ps, a)?;
            }
            skips.push(a);
            if l < self.downsample.len() {
                a = self.downsample[l].forward(g, ps, a)?;
            }
        }
        a = self.mid[0].forward(g, ps, a, temb, h)?;
        if let Some(att) = &self.mid_attn {
            a = att.forward(g, ps, a)?;
        }
        a = self.mid[1].forward(g, ps, a, temb, h)?;
        let feature = g.mean_pool_spatial(a)?;

        for (i, blocks) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            a = g.concat(&[a, skip])?;
            for b in blocks {
                a = b.forward(g, ps, a, temb, h)?;
            }
            if i < self.upsample.len() {
                a = g.upsample(a, 2)?;
                a = self.upsample[i].forward(g, ps, a)?;
            }
        }
        let a = self.out_norm.forward(g, ps, a)?;
        let a = g.silu(a);
        let eps = self.output.forward(g, ps, a)?;
        Ok(DenoiserOutput { eps, feature })
    }

    /// Forward pass without gradient recording; returns `(ε̂, pooled feature)`.
    pub fn predict(
        &self,
        ps: &ParamSet,
        x_t: &Tensor,
        ts: &[usize],
        h_norm: &[f64],
    ) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference();
        let x = g.constant(x_t.clone());
        let h = self.embed_budget(&mut g, ps, h_norm)?;
        let out = self.forward(&mut g, ps, x, ts, h)?;
        let eps = g.value(out.eps).clone();
        eps.check_finite("denoiser output")?;
        Ok((eps, g.value(out.feature).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use crate::numerics::rng::RngStream;

    fn tiny(conditioning: bool, attention: bool) -> DenoiserConfig {
        DenoiserConfig {
            levels: vec![4, 8],
            blocks_per_level: 1,
            time_embed_dim: 8,
            entropy_embed_dim: 6,
            groups: 2,
            attention: vec![false, attention],
            conditioning,
        }
    }

    fn input(seed: u64, n: usize, s: usize) -> Tensor {
        Tensor::new(&[n, 1, s, s], RngStream::new(seed).normal_vec(n * s * s)).unwrap()
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut ps = ParamSet::new(3);
        let d = Denoiser::new(DenoiserConfig::default(), &mut ps, "den").unwrap();
        let x = input(1, 2, 16);
        let (e1, f1) = d.predict(&ps, &x, &[5, 100], &[0.1, 0.9]).unwrap();
        let (e2, _) = d.predict(&ps, &x, &[5, 100], &[0.1, 0.9]).unwrap();
        assert_eq!(e1.shape(), x.shape());
        assert_eq!(f1.shape(), &[2, 64]);
        assert_eq!(e1, e2);
        assert_eq!(d.film_params().len(), 2 * 2 + 2 + 2 * 2);
    }

    #[test]
    fn film_shapes_and_shape_errors() {
        let mut ps = ParamSet::new(0);
        let d = Denoiser::new(tiny(true, false), &mut ps, "den").unwrap();
        for id in d.film_params() {
            let p = ps.get(id);
            assert_eq!(p.value.dim(1), 6);
        }
        assert!(d.predict(&ps, &input(0, 1, 7), &[1], &[0.5]).is_err());
        assert!(d.predict(&ps, &input(0, 1, 8), &[1, 2], &[0.5]).is_err());

        let mut g = Graph::new();
        let act = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let gt = g.constant(Tensor::zeros(&[1, 4]));
        let h = g.constant(Tensor::zeros(&[1, 6]));
        let w = g.constant(Tensor::zeros(&[3, 6]));
        assert!(film_modulate(&mut g, act, gt, Some(h), Some(w)).is_err());
    }

    #[test]
    fn zero_film_removes_budget_dependence() {
        let mut ps = ParamSet::new(5);
        let d = Denoiser::new(tiny(true, false), &mut ps, "den").unwrap();
        let x = input(2, 1, 8);
        let (a, _) = d.predict(&ps, &x, &[10], &[0.0]).unwrap();
        let (b, _) = d.predict(&ps, &x, &[10], &[1.0]).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
        for id in d.film_params() {
            ps.get_mut(id).value.data_mut().fill(0.0);
        }
        let (a, _) = d.predict(&ps, &x, &[10], &[0.0]).unwrap();
        let (b, _) = d.predict(&ps, &x, &[10], &[1.0]).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);
    }

    #[test]
    fn zero_film_matches_unconditional_network() {
        let mut ps = ParamSet::new(8);
        let d = Denoiser::new(tiny(true, false), &mut ps, "den").unwrap();
        for id in d.film_params() {
            ps.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut ps_ref = ParamSet::new(8);
        let r = Denoiser::new(tiny(false, false), &mut ps_ref, "den").unwrap();
        let x = input(4, 2, 8);
        let (a, _) = d.predict(&ps, &x, &[3, 90], &[0.3, 0.6]).unwrap();
        let (b, _) = r.predict(&ps_ref, &x, &[3, 90], &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn film_weights_receive_gradient() {
        let mut ps = ParamSet::new(2);
        let d = Denoiser::new(tiny(true, false), &mut ps, "den").unwrap();
        let mut g = Graph::new();
        let x = g.constant(input(3, 1, 8));
        let h = d.embed_budget(&mut g, &ps, &[0.4]).unwrap();
        let out = d.forward(&mut g, &ps, x, &[20], h).unwrap();
        let sq = g.mul(out.eps, out.eps).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut ps).unwrap();
        for id in d.film_params() {
            assert!(
                ps.get(id).grad.data().iter().any(|&v| v != 0.0),
                "{}",
                ps.get(id).name
            );
        }
    }

    #[test]
    fn denoiser_gradients_at_8x8() {
        for (seed, attention) in [(0, false), (1, true)] {
            let mut ps = ParamSet::new(seed);
            let d = Denoiser::new(tiny(true, attention), &mut ps, "den").unwrap();
            let x = input(seed + 10, 2, 8);
            let r = check_gradients(&mut ps, &[x], 3, seed, |g, ps, v| {
                let h = d.embed_budget(g, ps, &[0.2, 0.7])?;
                let out = d.forward(g, ps, v[0], &[4, 150], h)?;
                let sq = g.mul(out.eps, out.eps)?;
                let f = g.sum(out.feature);
                let s = g.mean(sq);
                g.add(s, f)
            })
            .unwrap();
            assert!(r.max_rel_err() < 1e-4, "seed {seed}: {:?}", r.worst());
        }
    }
}
