use crate::error::{Error, Result};

/// Number of symbol bins over [−1, 1].
pub const K: usize = 64;

/// Pixel value → bin units, where bin `k` is centred on `k − K/2`.
pub fn to_bin_units(x: f64) -> f64 {
    (x + 1.0) * (K as f64 / 2.0) - 0.5 - (K / 2) as f64
}

/// Centre of bin `k` in pixel units.
pub fn bin_center(k: usize) -> f64 {
    -1.0 + (2 * k + 1) as f64 / K as f64
}

/// Bin index of a value in [−1, 1]; the last bin is closed on the right.
pub fn bin_of(x: f64) -> usize {
    (((x + 1.0) * K as f64 / 2.0).floor() as isize).clamp(0, K as isize - 1) as usize
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolGrid {
    pub width: usize,
    pub height: usize,
    pub symbols: Vec<u8>,
}

impl SymbolGrid {
    pub fn new(width: usize, height: usize, symbols: Vec<u8>) -> Result<Self> {
        if symbols.len() != width * height {
            return Err(Error::shape(format!(
                "{} symbols for a {width}x{height} grid",
                symbols.len()
            )));
        }
        if let Some(s) = symbols.iter().find(|&&s| s as usize >= K) {
            return Err(Error::pre(format!("symbol {s} outside 0..{K}")));
        }
        Ok(Self {
            width,
            height,
            symbols,
        })
    }

    /// Bin centres in pixel units, raster order.
    pub fn dequantize(&self) -> Vec<f64> {
        self.symbols
            .iter()
            .map(|&s| bin_center(s as usize))
            .collect()
    }
}

/// Uniform binning of `x` (raster order, values in [−1, 1]).
pub fn quantize_to_bins(x: &[f64], width: usize, height: usize) -> Result<SymbolGrid> {
    if let Some(v) = x.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::pre(format!("value {v} outside [-1, 1]")));
    }
    SymbolGrid::new(width, height, x.iter().map(|&v| bin_of(v) as u8).collect())
}

/// Replaces every value by the centre of its bin (inputs are clamped first).
pub fn snap_to_centers(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| bin_center(bin_of(v.clamp(-1.0, 1.0))))
        .collect()
}
