//! Byte-oriented range coder with carry propagation (LZMA style): 64-bit
//! `low`, 32-bit `range`, renormalized whenever `range < 2^24`.
//!
//! Symbols are coded as `(start, size)` slices of a total of at most 2^16.
//! The last slice of a table absorbs the truncation remainder of the range.

use crate::error::{Error, Result};

pub const TOP: u32 = 1 << 24;
/// Largest table total the coder accepts.
pub const MAX_TOTAL: u32 = 1 << 16;

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    /// Bytes emitted so far, not counting the pending carry window.
    pub fn len(&self) -> usize {
        self.out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out.is_empty()
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn encode(&mut self, start: u32, size: u32, total: u32) {
        debug_assert!(size > 0 && start + size <= total && total <= MAX_TOTAL);
        let r = self.range / total;
        self.low += r as u64 * start as u64;
        self.range = if start + size == total {
            self.range - r * start
        } else {
            r * size
        };
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Equiprobable bits, most significant first.
    pub fn encode_bits(&mut self, value: u64, bits: u32) {
        let mut left = bits;
        while left > 0 {
            let n = left.min(16);
            left -= n;
            let chunk = ((value >> left) & ((1 << n) - 1)) as u32;
            self.encode(chunk, 1, 1 << n);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
    /// Scale of the table currently being decoded.
    r: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
            r: 0,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.data.get(self.pos).ok_or(Error::UnexpectedEof)?;
        self.pos += 1;
        Ok(b)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// The cumulative count the next symbol falls at; follow with
    /// [`RangeDecoder::consume`].
    pub fn peek(&mut self, total: u32) -> u32 {
        self.r = self.range / total;
        (self.code / self.r).min(total - 1)
    }

    pub fn consume(&mut self, start: u32, size: u32, total: u32) -> Result<()> {
        let r = self.r;
        self.code = self.code.wrapping_sub(r * start);
        self.range = if start + size == total {
            self.range - r * start
        } else {
            r * size
        };
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u64> {
        let mut value = 0u64;
        let mut left = bits;
        while left > 0 {
            let n = left.min(16);
            left -= n;
            let total = 1 << n;
            let v = self.peek(total);
            self.consume(v, 1, total)?;
            value = (value << n) | v as u64;
        }
        Ok(value)
    }
}
