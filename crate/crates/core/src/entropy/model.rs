//! Hyperprior plus causal-context predictor of per-pixel logistic parameters.

use crate::entropy::bins::{snap_to_centers, K};
use crate::entropy::code_length::{code_length, EntropyMode};
use crate::entropy::logistic::SIGMA_FLOOR;
use crate::error::{Error, Result};
use crate::numerics::graph::{causal_mask, Graph, Var};
use crate::numerics::layers::{Conv2d, MaskedConv2d};
use crate::numerics::param::{Init, ParamSet};
use crate::numerics::tensor::Tensor;

/// Spatial reduction of the hyperprior latent.
pub const HYPER_FACTOR: usize = 4;
/// Width of the causal context window.
pub const CONTEXT_KERNEL: usize = 5;
/// Initial σ in bin units for an untrained model.
const INITIAL_SIGMA: f64 = 8.0;
const MU_SCALE: f64 = (K / 2) as f64;

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyConfig {
    pub hyper_channels: usize,
    pub latent_channels: usize,
    pub context_channels: usize,
    pub fusion_channels: usize,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            hyper_channels: 16,
            latent_channels: 2,
            context_channels: 16,
            fusion_channels: 32,
        }
    }
}

impl EntropyConfig {
    pub fn validate(&self) -> Result<()> {
        if [
            self.hyper_channels,
            self.latent_channels,
            self.context_channels,
            self.fusion_channels,
        ]
        .contains(&0)
        {
            return Err(Error::pre("entropy model widths must be positive"));
        }
        Ok(())
    }
}

/// Per-pixel logistic parameters in bin units, `[n, 1, h, w]` each.
pub struct LogisticParams {
    pub mu: Var,
    pub sigma: Var,
}

pub struct EntropyOutput {
    pub params: LogisticParams,
    /// Hyper latent as seen by the synthesis branch (quantized in hard mode).
    pub z: Var,
    /// Bits per pixel of each image, `[n]`.
    pub bpp: Var,
}

/// 8-bit quantization of a latent in [−1, 1].
pub fn quantize_latent(z: f64) -> u8 {
    ((z.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn dequantize_latent(q: u8) -> f64 {
    q as f64 / 127.5 - 1.0
}

#[derive(Clone, Debug)]
pub struct EntropyModel {
    pub config: EntropyConfig,
    pub prefix: String,
    analysis1: Conv2d,
    analysis2: Conv2d,
    synthesis: Conv2d,
    context: MaskedConv2d,
    direct: MaskedConv2d,
    fuse: Conv2d,
    mu_head: Conv2d,
    sigma_head: Conv2d,
}

fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl EntropyModel {
    pub fn new(config: EntropyConfig, ps: &mut ParamSet, prefix: &str) -> Result<Self> {
        config.validate()?;
        let p = |s: &str| format!("{prefix}.{s}");
        let (ch, cz, cc, cf) = (
            config.hyper_channels,
            config.latent_channels,
            config.context_channels,
            config.fusion_channels,
        );
        let taps = CONTEXT_KERNEL * CONTEXT_KERNEL / 2;
        let sigma_head = Conv2d::new(ps, &p("sigma"), cf, 1, 1, 1)?;
        ps.get_mut(sigma_head.b).value.data_mut()[0] = softplus_inv(INITIAL_SIGMA);
        Ok(Self {
            analysis1: Conv2d::new(ps, &p("ha1"), 1, ch, 3, 2)?,
            analysis2: Conv2d::new(ps, &p("ha2"), ch, cz, 3, 2)?,
            synthesis: Conv2d::new(ps, &p("hs"), cz, ch, 3, 1)?,
            context: MaskedConv2d::new(
                ps,
                &p("ctx"),
                1,
                cc,
                causal_mask(CONTEXT_KERNEL),
                Init::FanIn {
                    fan_in: taps,
                    gain: 1.0,
                },
            )?,
            direct: MaskedConv2d::new(
                ps,
                &p("direct"),
                1,
                1,
                causal_mask(CONTEXT_KERNEL),
                Init::Zeros,
            )?,
            fuse: Conv2d::new(ps, &p("fuse"), ch + cc, cf, 1, 1)?,
            mu_head: Conv2d::with_init(
                ps,
                &p("mu"),
                cf,
                1,
                1,
                1,
                Init::FanIn {
                    fan_in: cf,
                    gain: 0.1,
                },
            )?,
            sigma_head,
            config,
            prefix: prefix.to_string(),
        })
    }

    /// Parameters forming the output head (zeroing them gives μ = 0 and
    /// σ = softplus(0) + floor everywhere).
    pub fn head_params(&self) -> Vec<crate::numerics::param::ParamId> {
        vec![
            self.mu_head.k,
            self.mu_head.b,
            self.sigma_head.k,
            self.sigma_head.b,
            self.direct.k,
            self.direct.b,
        ]
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 1 || !s[2].is_multiple_of(HYPER_FACTOR) || !s[3].is_multiple_of(HYPER_FACTOR) {
            return Err(Error::shape(format!(
                "entropy model expects [n, 1, h, w] with h, w divisible by {HYPER_FACTOR}, got {s:?}"
            )));
        }
        Ok(())
    }

    /// Network input: bin centres (straight-through) in hard mode.
    pub fn model_input(&self, g: &mut Graph, x: Var, mode: EntropyMode) -> Result<Var> {
        match mode {
            EntropyMode::Hard => {
                let snapped = snap_to_centers(g.value(x).data());
                let t = Tensor::new(g.shape(x), snapped)?;
                g.straight_through(x, t)
            }
            EntropyMode::Smooth => Ok(x),
        }
    }

    /// Hyper latent `z: [n, c_z, h/4, w/4]` in (−1, 1).
    pub fn analysis(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x_in: Var,
        mode: EntropyMode,
    ) -> Result<Var> {
        let a = self.analysis1.forward(g, ps, x_in)?;
        let a = g.silu(a);
        let a = self.analysis2.forward(g, ps, a)?;
        let z = g.tanh(a);
        match mode {
            EntropyMode::Hard => {
                let q = g.value(z).map(|v| dequantize_latent(quantize_latent(v)));
                g.straight_through(z, q)
            }
            EntropyMode::Smooth => Ok(z),
        }
    }

    /// Full-resolution hyper features from a latent.
    pub fn synthesis(&self, g: &mut Graph, ps: &ParamSet, z: Var) -> Result<Var> {
        let a = g.upsample(z, HYPER_FACTOR)?;
        let a = self.synthesis.forward(g, ps, a)?;
        Ok(g.silu(a))
    }

    /// Logistic parameters from the (possibly snapped) image and hyper features.
    pub fn head(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x_in: Var,
        hyper: Var,
    ) -> Result<LogisticParams> {
        let c = self.context.forward(g, ps, x_in)?;
        let c = g.silu(c);
        let f = g.concat(&[hyper, c])?;
        let f = self.fuse.forward(g, ps, f)?;
        let f = g.silu(f);
        let m = self.mu_head.forward(g, ps, f)?;
        let d = self.direct.forward(g, ps, x_in)?;
        let m = g.add(m, d)?;
        let mu = g.scale(m, MU_SCALE);
        let s = self.sigma_head.forward(g, ps, f)?;
        let s = g.softplus(s);
        let sigma = g.add_scalar(s, SIGMA_FLOOR);
        Ok(LogisticParams { mu, sigma })
    }

    pub fn predict_params(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x: Var,
        mode: EntropyMode,
    ) -> Result<(LogisticParams, Var)> {
        self.check_input(g, x)?;
        let x_in = self.model_input(g, x, mode)?;
        let z = self.analysis(g, ps, x_in, mode)?;
        let hyper = self.synthesis(g, ps, z)?;
        Ok((self.head(g, ps, x_in, hyper)?, z))
    }

    /// H_φ: bits per pixel of each image in `x: [n, 1, h, w]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x: Var,
        mode: EntropyMode,
    ) -> Result<EntropyOutput> {
        let (params, z) = self.predict_params(g, ps, x, mode)?;
        let bpp = code_length(g, x, params.mu, params.sigma, mode)?;
        Ok(EntropyOutput { params, z, bpp })
    }

    /// Hard-mode bits per pixel without recording gradients.
    pub fn bpp(&self, ps: &ParamSet, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.map(|v| v.clamp(-1.0, 1.0)));
        let out = self.forward(&mut g, ps, xv, EntropyMode::Hard)?;
        Ok(g.value(out.bpp).data().to_vec())
    }

    /// Quantized hyper latent symbols for one image `[1, 1, h, w]`.
    pub fn latent_symbols(&self, ps: &ParamSet, x: &Tensor) -> Result<Vec<u8>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        self.check_input(&g, xv)?;
        let x_in = self.model_input(&mut g, xv, EntropyMode::Hard)?;
        let z = self.analysis(&mut g, ps, x_in, EntropyMode::Smooth)?;
        Ok(g.value(z)
            .data()
            .iter()
            .map(|&v| quantize_latent(v))
            .collect())
    }

    /// Hyper features `[c_h, h, w]` (flattened) for a decoded latent.
    pub fn hyper_from_symbols(
        &self,
        ps: &ParamSet,
        symbols: &[u8],
        height: usize,
        width: usize,
    ) -> Result<Vec<f64>> {
        let (zh, zw) = (height / HYPER_FACTOR, width / HYPER_FACTOR);
        let cz = self.config.latent_channels;
        if symbols.len() != cz * zh * zw {
            return Err(Error::shape(format!(
                "{} latent symbols for {cz}x{zh}x{zw}",
                symbols.len()
            )));
        }
        let mut g = Graph::inference();
        let z = g.constant(Tensor::new(
            &[1, cz, zh, zw],
            symbols.iter().map(|&q| dequantize_latent(q)).collect(),
        )?);
        let h = self.synthesis(&mut g, ps, z)?;
        Ok(g.value(h).data().to_vec())
    }

    pub fn latent_len(&self, height: usize, width: usize) -> usize {
        self.config.latent_channels * (height / HYPER_FACTOR) * (width / HYPER_FACTOR)
    }

    /// `(μ, σ)` of pixel `(y, x)` from hyper features and the bin-centre
    /// image, reading only pixels strictly before `(y, x)` in raster order.
    /// Encoder and decoder both use this path so their tables agree exactly.
    #[allow(clippy::too_many_arguments)]
    pub fn pixel_params(
        &self,
        ps: &ParamSet,
        hyper: &[f64],
        image: &[f64],
        width: usize,
        height: usize,
        y: usize,
        x: usize,
        scratch: &mut Vec<f64>,
    ) -> (f64, f64) {
        let ch = self.config.hyper_channels;
        let cc = self.config.context_channels;
        let cf = self.config.fusion_channels;
        let hw = width * height;
        let r = CONTEXT_KERNEL / 2;
        let centre = r * CONTEXT_KERNEL + r;

        let tap_sum = |kernel: &[f64], mask: &[f64]| -> f64 {
            let mut s = 0.0;
            for t in 0..centre {
                if mask[t] == 0.0 {
                    continue;
                }
                let (dy, dx) = (t / CONTEXT_KERNEL, t % CONTEXT_KERNEL);
                let yy = y as isize + dy as isize - r as isize;
                let xx = x as isize + dx as isize - r as isize;
                if yy < 0 || xx < 0 || yy >= height as isize || xx >= width as isize {
                    continue;
                }
                s += kernel[t] * image[yy as usize * width + xx as usize];
            }
            s
        };

        scratch.clear();
        scratch.extend((0..ch).map(|c| hyper[c * hw + y * width + x]));
        let ck = ps.get(self.context.k).value.data();
        let cb = ps.get(self.context.b).value.data();
        let kk = CONTEXT_KERNEL * CONTEXT_KERNEL;
        let mask = self.context.mask.data();
        for c in 0..cc {
            scratch.push(silu(cb[c] + tap_sum(&ck[c * kk..(c + 1) * kk], mask)));
        }

        let fw = ps.get(self.fuse.k).value.data();
        let fb = ps.get(self.fuse.b).value.data();
        let fin = ch + cc;
        let mut f = Vec::with_capacity(cf);
        for j in 0..cf {
            let row = &fw[j * fin..(j + 1) * fin];
            let s: f64 = row.iter().zip(scratch.iter()).map(|(a, b)| a * b).sum();
            f.push(silu(fb[j] + s));
        }
        let dot = |k: &[f64], b: f64| b + k.iter().zip(&f).map(|(a, v)| a * v).sum::<f64>();
        let m = dot(
            ps.get(self.mu_head.k).value.data(),
            ps.get(self.mu_head.b).value.data()[0],
        );
        let d = ps.get(self.direct.b).value.data()[0]
            + tap_sum(ps.get(self.direct.k).value.data(), self.direct.mask.data());
        let s = dot(
            ps.get(self.sigma_head.k).value.data(),
            ps.get(self.sigma_head.b).value.data()[0],
        );
        (MU_SCALE * (m + d), softplus(s) + SIGMA_FLOOR)
    }
}
