//! `.badf` container: header, hyperprior segment, pixel body, trailer.
//!
//! Byte layout (integers little-endian):
//!
//! | offset | size | field                               |
//! |--------|------|-------------------------------------|
//! | 0      | 4    | magic `BADF`                        |
//! | 4      | 1    | version                             |
//! | 5      | 2    | width                               |
//! | 7      | 2    | height                              |
//! | 9      | 2    | target budget, milli-bpp            |
//! | 11     | 4    | hyperprior segment length `L`       |
//! | 15     | L    | range-coded hyper latents           |
//! | 15 + L | ...  | range-coded pixel symbols           |
//! | end-8  | 4    | entropy-model hash                  |
//! | end-4  | 4    | FNV-1a checksum of the symbol grid  |

use std::sync::OnceLock;

use sha2::{Digest, Sha256};

use crate::codec::cdf::{pmf_to_cdf, FrozenCdf};
use crate::codec::range::{RangeDecoder, RangeEncoder};
use crate::diffusion::EntropyBudget;
use crate::entropy::bins::{bin_center, SymbolGrid, K};
use crate::entropy::logistic::pmf_all;
use crate::entropy::model::{EntropyModel, HYPER_FACTOR};
use crate::error::{Error, Result};
use crate::numerics::param::ParamSet;
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BADF";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 15;
pub const TRAILER_BYTES: usize = 8;
/// Standard deviation of the fixed latent prior, in 8-bit symbol steps.
const LATENT_PRIOR_STD: f64 = 32.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub width: u16,
    pub height: u16,
    pub milli_bpp: u16,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub hyper: Vec<u8>,
    pub body: Vec<u8>,
    pub model_hash: u32,
    pub checksum: u32,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_bytes());
        out.extend_from_slice(MAGIC);
        out.push(self.header.version);
        out.extend_from_slice(&self.header.width.to_le_bytes());
        out.extend_from_slice(&self.header.height.to_le_bytes());
        out.extend_from_slice(&self.header.milli_bpp.to_le_bytes());
        out.extend_from_slice(&(self.hyper.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.hyper);
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&self.model_hash.to_le_bytes());
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES + TRAILER_BYTES {
            return Err(Error::decode(format!(
                "stream of {} bytes is too short",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format("bad magic, not a BADF stream"));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let header = Header {
            version: bytes[4],
            width: u16_at(5),
            height: u16_at(7),
            milli_bpp: u16_at(9),
        };
        if header.version != VERSION {
            return Err(Error::Version(format!(
                "stream version {}, decoder supports {VERSION}",
                header.version
            )));
        }
        let hyper_len = u32_at(11) as usize;
        let body_end = bytes.len() - TRAILER_BYTES;
        if HEADER_BYTES + hyper_len > body_end {
            return Err(Error::decode("hyperprior segment runs past the end"));
        }
        Ok(Self {
            header,
            hyper: bytes[HEADER_BYTES..HEADER_BYTES + hyper_len].to_vec(),
            body: bytes[HEADER_BYTES + hyper_len..body_end].to_vec(),
            model_hash: u32_at(body_end),
            checksum: u32_at(body_end + 4),
        })
    }

    pub fn total_bytes(&self) -> usize {
        HEADER_BYTES + self.hyper.len() + self.body.len() + TRAILER_BYTES
    }

    pub fn total_bits(&self) -> usize {
        8 * self.total_bytes()
    }

    /// Everything except the pixel body, in bits.
    pub fn overhead_bits(&self) -> usize {
        8 * (HEADER_BYTES + self.hyper.len() + TRAILER_BYTES)
    }

    pub fn body_bits(&self) -> usize {
        8 * self.body.len()
    }

    pub fn realized_bpp(&self) -> f64 {
        let px = self.header.width as usize * self.header.height as usize;
        self.total_bits() as f64 / px.max(1) as f64
    }
}

/// First four bytes of SHA-256 over the entropy model's parameters.
pub fn model_hash(model: &EntropyModel, ps: &ParamSet) -> u32 {
    let mut h = Sha256::new();
    let prefix = format!("{}.", model.prefix);
    for (_, p) in ps.iter().filter(|(_, p)| p.name.starts_with(&prefix)) {
        h.update(p.name.as_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    let d = h.finalize();
    u32::from_le_bytes([d[0], d[1], d[2], d[3]])
}

pub fn grid_checksum(grid: &SymbolGrid) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    let dims = [
        (grid.width as u32).to_le_bytes(),
        (grid.height as u32).to_le_bytes(),
    ];
    for b in dims.iter().flatten().chain(grid.symbols.iter()) {
        h ^= *b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

fn latent_prior() -> &'static FrozenCdf {
    static PRIOR: OnceLock<FrozenCdf> = OnceLock::new();
    PRIOR.get_or_init(|| {
        let raw: Vec<f64> = (0..256)
            .map(|k| {
                (-(k as f64 - 127.5).powi(2) / (2.0 * LATENT_PRIOR_STD * LATENT_PRIOR_STD)).exp()
            })
            .collect();
        let z: f64 = raw.iter().sum();
        pmf_to_cdf(&raw.iter().map(|r| r / z).collect::<Vec<_>>()).expect("latent prior")
    })
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width > u16::MAX as usize || height > u16::MAX as usize {
        return Err(Error::Unsupported(format!(
            "{width}x{height} exceeds 16-bit dimensions"
        )));
    }
    if !width.is_multiple_of(HYPER_FACTOR) || !height.is_multiple_of(HYPER_FACTOR) {
        return Err(Error::Unsupported(format!(
            "{width}x{height}: dimensions must be multiples of {HYPER_FACTOR}"
        )));
    }
    Ok(())
}

/// Visits every pixel in raster order with its quantized table. `next`
/// returns the pixel's symbol, either read from the grid (encoder) or decoded
/// with the given table (decoder); the bin-centre image is filled in as it
/// goes so later pixels condition only on earlier ones.
fn walk_pixels(
    model: &EntropyModel,
    ps: &ParamSet,
    hyper: &[f64],
    width: usize,
    height: usize,
    mut next: impl FnMut(usize, &FrozenCdf) -> Result<usize>,
) -> Result<Vec<u8>> {
    let mut image = vec![0.0; width * height];
    let mut symbols = Vec::with_capacity(width * height);
    let mut scratch = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let (mu, sigma) =
                model.pixel_params(ps, hyper, &image, width, height, y, x, &mut scratch);
            if !mu.is_finite() || !sigma.is_finite() {
                return Err(Error::NonFinite("entropy model parameters".into()));
            }
            let cdf = pmf_to_cdf(&pmf_all(mu, sigma))?;
            let i = y * width + x;
            let s = next(i, &cdf)?;
            image[i] = bin_center(s);
            symbols.push(s as u8);
        }
    }
    Ok(symbols)
}

fn grid_image(grid: &SymbolGrid) -> Result<Tensor> {
    Tensor::new(&[1, 1, grid.height, grid.width], grid.dequantize())
}

/// Σ −log2 of the quantized probabilities the encoder will use, in bits.
pub fn quantized_code_length(
    grid: &SymbolGrid,
    model: &EntropyModel,
    ps: &ParamSet,
) -> Result<f64> {
    check_dims(grid.width, grid.height)?;
    if grid.symbols.is_empty() {
        return Ok(0.0);
    }
    let z = model.latent_symbols(ps, &grid_image(grid)?)?;
    let hyper = model.hyper_from_symbols(ps, &z, grid.height, grid.width)?;
    let mut bits = 0.0;
    walk_pixels(model, ps, &hyper, grid.width, grid.height, |i, cdf| {
        let s = grid.symbols[i] as usize;
        bits += cdf.bits(s);
        Ok(s)
    })?;
    Ok(bits)
}

pub fn encode(
    grid: &SymbolGrid,
    model: &EntropyModel,
    ps: &ParamSet,
    budget: &EntropyBudget,
) -> Result<Bitstream> {
    check_dims(grid.width, grid.height)?;
    let header = Header {
        version: VERSION,
        width: grid.width as u16,
        height: grid.height as u16,
        milli_bpp: budget.milli_bpp(),
    };
    let (mut hyper_bytes, mut body) = (Vec::new(), Vec::new());
    if !grid.symbols.is_empty() {
        let z = model.latent_symbols(ps, &grid_image(grid)?)?;
        let mut enc = RangeEncoder::new();
        for &q in &z {
            enc.encode(latent_prior(), q as usize);
        }
        hyper_bytes = enc.finish();

        let hyper = model.hyper_from_symbols(ps, &z, grid.height, grid.width)?;
        let mut enc = RangeEncoder::new();
        walk_pixels(model, ps, &hyper, grid.width, grid.height, |i, cdf| {
            let s = grid.symbols[i] as usize;
            enc.encode(cdf, s);
            Ok(s)
        })?;
        body = enc.finish();
    }
    Ok(Bitstream {
        header,
        hyper: hyper_bytes,
        body,
        model_hash: model_hash(model, ps),
        checksum: grid_checksum(grid),
    })
}

pub fn decode(bs: &Bitstream, model: &EntropyModel, ps: &ParamSet) -> Result<SymbolGrid> {
    if bs.header.version != VERSION {
        return Err(Error::Version(format!(
            "stream version {}",
            bs.header.version
        )));
    }
    let expected = model_hash(model, ps);
    if bs.model_hash != expected {
        return Err(Error::Version(format!(
            "stream was coded with model {:08x}, checkpoint is {expected:08x}",
            bs.model_hash
        )));
    }
    let (w, h) = (bs.header.width as usize, bs.header.height as usize);
    check_dims(w, h)?;
    let symbols = if w * h == 0 {
        if !bs.hyper.is_empty() || !bs.body.is_empty() {
            return Err(Error::decode("payload present for an empty grid"));
        }
        Vec::new()
    } else {
        let mut dec = RangeDecoder::new(&bs.hyper);
        let z = (0..model.latent_len(h, w))
            .map(|_| dec.decode(latent_prior()).map(|s| s as u8))
            .collect::<Result<Vec<u8>>>()?;
        let hyper = model.hyper_from_symbols(ps, &z, h, w)?;
        let mut dec = RangeDecoder::new(&bs.body);
        let symbols = walk_pixels(model, ps, &hyper, w, h, |_, cdf| dec.decode(cdf))?;
        if dec.position() < bs.body.len() {
            return Err(Error::decode("trailing bytes after pixel data"));
        }
        symbols
    };
    debug_assert!(symbols.iter().all(|&s| (s as usize) < K));
    let grid = SymbolGrid::new(w, h, symbols)?;
    if grid_checksum(&grid) != bs.checksum {
        return Err(Error::Integrity("grid checksum mismatch".into()));
    }
    Ok(grid)
}
