//! Procedural grayscale images with a complexity knob, and PGM (P5) I/O.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::entropy::{quantize_to_bins, SymbolGrid};
use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub size: usize,
    pub complexity: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::pre(format!("image size {} < 8", self.size)));
        }
        if self.count == 0 {
            return Err(Error::pre("dataset count must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.complexity) {
            return Err(Error::pre(format!(
                "complexity {} outside [0, 1]",
                self.complexity
            )));
        }
        Ok(())
    }
}

/// Deterministic images mixing a smooth gradient, Gaussian blobs and a binary
/// stripe texture, posterized to a level count that grows with complexity.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<ImageU8>> {
    spec.validate()?;
    Ok((0..spec.count)
        .map(|i| generate_one(spec.size, spec.complexity, spec.seed, i as u64))
        .collect())
}

fn generate_one(s: usize, c: f64, seed: u64, index: u64) -> ImageU8 {
    let mut rng = RngStream::derive(seed, index);
    let sf = s as f64;
    let mut canvas = vec![0.0; s * s];

    let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
    let amp = rng.uniform_range(0.3, 0.8);
    let offset = rng.uniform_range(0.35, 0.65);
    for y in 0..s {
        for x in 0..s {
            let u = x as f64 / (sf - 1.0) - 0.5;
            let v = y as f64 / (sf - 1.0) - 0.5;
            canvas[y * s + x] = offset + amp * (theta.cos() * u + theta.sin() * v);
        }
    }

    let blobs = 1 + rng.below(3);
    for _ in 0..blobs {
        let cx = rng.uniform_range(0.0, sf);
        let cy = rng.uniform_range(0.0, sf);
        let r = sf * rng.uniform_range(0.1, 0.3);
        let a = rng.uniform_range(0.2, 0.5) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        for y in 0..s {
            for x in 0..s {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                canvas[y * s + x] += a * (-d2 / (2.0 * r * r)).exp();
            }
        }
    }

    // Stripe frequency runs from one cycle per image up to the Nyquist limit.
    let cycles = 1.0 + c * (sf / 2.0 - 1.0);
    let phi = rng.uniform_range(0.0, std::f64::consts::TAU);
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let tex_amp = 0.35 * c;
    for y in 0..s {
        for x in 0..s {
            let proj = (x as f64 * phi.cos() + y as f64 * phi.sin()) / sf;
            let sign = (std::f64::consts::TAU * cycles * proj + phase)
                .sin()
                .signum();
            canvas[y * s + x] += tex_amp * sign;
        }
    }

    let noise = 0.12 * c;
    for v in canvas.iter_mut() {
        *v += noise * rng.normal();
    }

    // Squeeze back into [0, 1] instead of clipping so strong texture does not
    // saturate into flat regions.
    let lo = canvas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = canvas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo < 0.0 || hi > 1.0 {
        let (lo, hi) = (lo.min(0.0), hi.max(1.0));
        for v in canvas.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    }

    let levels = 2.0 + (c * 254.0).round();
    let pixels = canvas
        .iter()
        .map(|&v| {
            let q = (v.clamp(0.0, 1.0) * (levels - 1.0)).round() / (levels - 1.0);
            (q * 255.0).round() as u8
        })
        .collect();
    ImageU8 {
        width: s,
        height: s,
        pixels,
    }
}

/// Shannon entropy in bits of the pixel-value histogram.
pub fn histogram_entropy(img: &ImageU8) -> f64 {
    let mut counts = [0usize; 256];
    for &p in &img.pixels {
        counts[p as usize] += 1;
    }
    let n = img.pixels.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Maps 8-bit levels affinely onto [−1, 1]; result shape `[1, height, width]`.
pub fn to_model_range(img: &ImageU8) -> Tensor {
    let data = img
        .pixels
        .iter()
        .map(|&p| 2.0 * p as f64 / 255.0 - 1.0)
        .collect();
    Tensor::new(&[1, img.height, img.width], data).expect("pixel count matches")
}

/// Inverse of [`to_model_range`] for a single-channel tensor whose last two
/// dimensions are height and width. Values are clamped to [−1, 1].
pub fn from_model_range(t: &Tensor) -> Result<ImageU8> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
        return Err(Error::shape(format!(
            "expected one grayscale image, got {s:?}"
        )));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let pixels = t
        .data()
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect();
    ImageU8::new(w, h, pixels)
}

/// 64-level symbol grid of one image tensor (values clamped to [−1, 1]).
pub fn grid_of(t: &Tensor) -> Result<SymbolGrid> {
    let img = from_model_range(t)?;
    let v: Vec<f64> = t.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    quantize_to_bins(&v, img.width, img.height)
}

/// 64-level symbol grid of an 8-bit image.
pub fn grid_of_image(img: &ImageU8) -> Result<SymbolGrid> {
    grid_of(&to_model_range(img))
}

/// 8-bit image of the bin centres; [`grid_of_image`] maps it back to `grid`.
pub fn image_of_grid(grid: &SymbolGrid) -> Result<ImageU8> {
    let t = Tensor::new(&[grid.height, grid.width], grid.dequantize())?;
    from_model_range(&t)
}

pub fn write_pgm(img: &ImageU8, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.pixels);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<ImageU8> {
    parse_pgm(&fs::read(path)?)
}

/// Parses a binary PGM with maxval 255. Comments (`#` to end of line) are
/// allowed between header tokens.
pub fn parse_pgm(bytes: &[u8]) -> Result<ImageU8> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PGM header"));
        }
        tokens.push(&bytes[start..pos]);
    }
    if tokens[0] != b"P5" {
        return Err(Error::format(format!(
            "unsupported PGM magic {:?}",
            String::from_utf8_lossy(tokens[0])
        )));
    }
    let num = |t: &[u8], what: &str| -> Result<usize> {
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(format!("bad PGM {what}")))
    };
    let (w, h, maxval) = (
        num(tokens[1], "width")?,
        num(tokens[2], "height")?,
        num(tokens[3], "maxval")?,
    );
    if maxval != 255 {
        return Err(Error::Unsupported(format!("PGM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("truncated PGM header"));
    }
    pos += 1;
    let payload = &bytes[pos..];
    if payload.len() < w * h {
        return Err(Error::format(format!(
            "PGM payload has {} bytes, expected {}",
            payload.len(),
            w * h
        )));
    }
    ImageU8::new(w, h, payload[..w * h].to_vec())
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Writes `img_NNNNN.pgm` files plus a manifest listing them, one per line.
pub fn write_dataset(dir: &Path, images: &[ImageU8]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join(MANIFEST_NAME);
    let mut list = fs::File::create(&manifest)?;
    for (i, img) in images.iter().enumerate() {
        let name = format!("img_{i:05}.pgm");
        write_pgm(img, &dir.join(&name))?;
        writeln!(list, "{name}")?;
    }
    Ok(manifest)
}

/// Reads every image named in a manifest. Relative entries resolve against
/// the manifest's directory.
pub fn read_manifest(manifest: &Path) -> Result<Vec<ImageU8>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(manifest)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = Path::new(l);
            read_pgm(&if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            })
        })
        .collect()
}
