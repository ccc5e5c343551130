//! Quantization of probability vectors into integer frequency tables.

use crate::error::{Error, Result};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;

/// Cumulative frequencies: `cum[s]..cum[s + 1]` is the slot of symbol `s`,
/// `cum[0] = 0` and `cum[n] = TOTAL`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrozenCdf {
    cum: Vec<u32>,
}

impl FrozenCdf {
    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    pub fn start(&self, s: usize) -> u32 {
        self.cum[s]
    }

    /// Symbol whose slot contains `target < TOTAL`.
    pub fn find(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }

    /// Code length of `s` in bits under the quantized table.
    pub fn bits(&self, s: usize) -> f64 {
        PRECISION_BITS as f64 - (self.freq(s) as f64).log2()
    }
}

/// Largest-remainder quantization with every symbol given at least 1.
/// Ties go to the lower symbol index, so identical inputs give identical
/// tables.
pub fn pmf_to_cdf(pmf: &[f64]) -> Result<FrozenCdf> {
    let n = pmf.len();
    if n == 0 || n as u32 > TOTAL {
        return Err(Error::pre(format!("cannot build a table over {n} symbols")));
    }
    if pmf.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::pre("pmf has negative or non-finite entries"));
    }
    let sum: f64 = pmf.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::pre(format!("pmf sums to {sum}")));
    }
    let spare = (TOTAL - n as u32) as f64;
    let mut freq: Vec<u32> = Vec::with_capacity(n);
    let mut rem: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut used = 0u32;
    for (s, &p) in pmf.iter().enumerate() {
        let share = p * spare;
        let whole = share.floor().min(spare) as u32;
        used += whole;
        freq.push(1 + whole);
        rem.push((share - whole as f64, s));
    }
    let mut left = (TOTAL - n as u32).saturating_sub(used) as usize;
    if used > TOTAL - n as u32 {
        return Err(Error::pre("pmf quantization overflow"));
    }
    rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    // Rounding of the sum can leave more leftovers than symbols; cycle.
    while left > 0 {
        for &(_, s) in rem.iter().take(left) {
            freq[s] += 1;
        }
        left = left.saturating_sub(n);
    }
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0);
    let mut acc = 0;
    for f in freq {
        acc += f;
        cum.push(acc);
    }
    debug_assert_eq!(acc, TOTAL);
    Ok(FrozenCdf { cum })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    #[test]
    fn uniform_divides_exactly() {
        let c = pmf_to_cdf(&[1.0 / 64.0; 64]).unwrap();
        assert!((0..64).all(|s| c.freq(s) == 1024));
    }

    #[test]
    fn concentrated_floors_at_one() {
        let mut p = [0.0; 64];
        p[17] = 1.0;
        let c = pmf_to_cdf(&p).unwrap();
        assert_eq!(c.freq(17), TOTAL - 63);
        assert!((0..64).filter(|&s| s != 17).all(|s| c.freq(s) == 1));
        assert_eq!(c.find(0), 0);
        assert_eq!(c.find(17), 17);
        assert_eq!(c.find(TOTAL - 1), 63);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(pmf_to_cdf(&[0.5, 0.4]).is_err());
        assert!(pmf_to_cdf(&[1.5, -0.5]).is_err());
        assert!(pmf_to_cdf(&[f64::NAN, 1.0]).is_err());
        assert!(pmf_to_cdf(&[]).is_err());
    }

    #[test]
    fn quantized_cross_entropy_is_close() {
        let mut rng = RngStream::new(11);
        for i in 0..1000 {
            // Mix of flat and sharply peaked random pmfs.
            let temp = if i % 2 == 0 { 1.0 } else { 8.0 };
            let raw: Vec<f64> = (0..64).map(|_| (temp * rng.normal()).exp()).collect();
            let z: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|r| r / z).collect();
            let c = pmf_to_cdf(&p).unwrap();
            let real: f64 = p.iter().filter(|&&q| q > 0.0).map(|q| -q * q.log2()).sum();
            let quant: f64 = p.iter().enumerate().map(|(s, q)| q * c.bits(s)).sum();
            assert!((quant - real).abs() < 0.01, "{real} vs {quant}");
            for s in 0..64 {
                assert!(c.freq(s) >= 1);
                assert_eq!(c.find(c.start(s)), s);
            }
        }
    }
}
