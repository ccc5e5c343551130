//! Carry-less 32-bit range coder (Subbotin) over 16-bit frequency tables.

use crate::codec::cdf::{FrozenCdf, PRECISION_BITS};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, cdf: &FrozenCdf, s: usize) {
        self.range >>= PRECISION_BITS;
        self.low = self.low.wrapping_add(cdf.start(s) * self.range);
        self.range *= cdf.freq(s);
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Emits the shortest tail that pins a value inside the final interval.
    /// Zero bytes at the end of that tail are dropped; the decoder reads
    /// zeros past the end. Bytes emitted before the flush are always kept.
    pub fn finish(mut self) -> Vec<u8> {
        let emitted = self.out.len();
        let low = self.low as u64;
        let high = low + self.range as u64;
        for nbytes in 0..=4u32 {
            let unit = 1u64 << (32 - 8 * nbytes);
            let v = low.div_ceil(unit) * unit;
            if v < high {
                for i in 0..nbytes {
                    self.out.push((v >> (24 - 8 * i)) as u8);
                }
                break;
            }
        }
        while self.out.len() > emitted && self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = Self {
            low: 0,
            range: u32::MAX,
            code: 0,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.byte() as u32;
        }
        d
    }

    fn byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, cdf: &FrozenCdf) -> Result<usize> {
        self.range >>= PRECISION_BITS;
        let target = self.code.wrapping_sub(self.low) / self.range;
        if target >= 1 << PRECISION_BITS {
            return Err(Error::decode("range-coded value out of range"));
        }
        let s = cdf.find(target);
        self.low = self.low.wrapping_add(cdf.start(s) * self.range);
        self.range *= cdf.freq(s);
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.byte() as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(s)
    }

    /// Bytes consumed so far, counting implicit zeros past the end.
    pub fn position(&self) -> usize {
        self.pos
    }
}
