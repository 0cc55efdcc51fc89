//! Frequency tables built from float pmfs, and the symbol-level coding
//! entry points used by every section of the bitstream.

use super::range::{RangeDecoder, RangeEncoder, MAX_TOTAL};
use crate::entropy::{gaussian_likelihood, PMF_FLOOR};
use crate::error::{Error, Result};

/// Largest half-width of a Gaussian coding window.
pub const MAX_HALF_WIDTH: i64 = 1 << 14;
/// Bits used to send the length of an escaped value.
const ESCAPE_LEN_BITS: u32 = 6;

/// Scales a pmf to integer frequencies summing to 2^16, each at least 1.
/// Deterministic in its input.
pub fn quantize_freqs(probs: &[f64]) -> Result<Vec<u32>> {
    let n = probs.len();
    if n == 0 || n > MAX_TOTAL as usize {
        return Err(Error::InvalidArgument(format!("pmf with {n} entries")));
    }
    let sum: f64 = probs.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::InvalidArgument("pmf does not sum to a positive value".into()));
    }
    let t = MAX_TOTAL as f64;
    let mut freqs: Vec<u32> = probs
        .iter()
        .map(|&p| ((p / sum * t).round() as u32).max(1))
        .collect();
    let mut total: i64 = freqs.iter().map(|&f| f as i64).sum();
    while total != MAX_TOTAL as i64 {
        let (i, &fmax) = freqs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty");
        let diff = MAX_TOTAL as i64 - total;
        let step = if diff > 0 { diff } else { diff.max(1 - fmax as i64) };
        freqs[i] = (fmax as i64 + step) as u32;
        total += step;
    }
    Ok(freqs)
}

/// Cumulative frequency table over `offset..offset + len`.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqTable {
    pub offset: i64,
    cum: Vec<u32>,
}

impl FreqTable {
    pub fn from_freqs(offset: i64, freqs: &[u32]) -> Self {
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0;
        cum.push(0);
        for &f in freqs {
            acc += f;
            cum.push(acc);
        }
        FreqTable { offset, cum }
    }

    pub fn from_pmf(offset: i64, probs: &[f64]) -> Result<Self> {
        Ok(Self::from_freqs(offset, &quantize_freqs(probs)?))
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total(&self) -> u32 {
        *self.cum.last().expect("non-empty")
    }

    fn slot(&self, i: usize) -> (u32, u32) {
        (self.cum[i], self.cum[i + 1] - self.cum[i])
    }

    pub fn encode_index(&self, enc: &mut RangeEncoder, i: usize) {
        let (start, size) = self.slot(i);
        enc.encode(start, size, self.total());
    }

    pub fn decode_index(&self, dec: &mut RangeDecoder<'_>) -> Result<usize> {
        let v = dec.peek(self.total());
        let i = self.cum.partition_point(|&c| c <= v) - 1;
        let (start, size) = self.slot(i);
        dec.consume(start, size, self.total())?;
        Ok(i)
    }

    pub fn encode(&self, enc: &mut RangeEncoder, symbol: i64) -> Result<()> {
        let i = symbol - self.offset;
        if i < 0 || i >= self.len() as i64 {
            return Err(Error::ZeroProbability(symbol));
        }
        self.encode_index(enc, i as usize);
        Ok(())
    }

    pub fn decode(&self, dec: &mut RangeDecoder<'_>) -> Result<i64> {
        Ok(self.decode_index(dec)? as i64 + self.offset)
    }
}

/// A pmf over the integer support `offset..offset + probs.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    pub offset: i64,
    pub probs: Vec<f64>,
}

impl Pmf {
    pub fn prob(&self, symbol: i64) -> f64 {
        let i = symbol - self.offset;
        if i < 0 || i >= self.probs.len() as i64 {
            0.0
        } else {
            self.probs[i as usize]
        }
    }
}

/// Codes each symbol under its own pmf.
pub fn rc_encode(symbols: &[i64], pmfs: &[Pmf]) -> Result<Vec<u8>> {
    if symbols.len() != pmfs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} symbols, {} pmfs",
            symbols.len(),
            pmfs.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    let mut cache: Option<(&Pmf, FreqTable)> = None;
    for (&s, pmf) in symbols.iter().zip(pmfs) {
        if !(pmf.prob(s) > 0.0) {
            return Err(Error::ZeroProbability(s));
        }
        if cache.as_ref().is_none_or(|(p, _)| *p != pmf) {
            cache = Some((pmf, FreqTable::from_pmf(pmf.offset, &pmf.probs)?));
        }
        cache.as_ref().expect("set").1.encode(&mut enc, s)?;
    }
    Ok(enc.finish())
}

/// Decodes `count` symbols; `pmf_of(i, decoded)` supplies the pmf of
/// symbol `i` given the symbols decoded before it.
pub fn rc_decode(
    bytes: &[u8],
    mut pmf_of: impl FnMut(usize, &[i64]) -> Pmf,
    count: usize,
) -> Result<Vec<i64>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    let mut cache: Option<(Pmf, FreqTable)> = None;
    for i in 0..count {
        let pmf = pmf_of(i, &out);
        if cache.as_ref().is_none_or(|(p, _)| *p != pmf) {
            let t = FreqTable::from_pmf(pmf.offset, &pmf.probs)?;
            cache = Some((pmf, t));
        }
        out.push(cache.as_ref().expect("set").1.decode(&mut dec)?);
    }
    Ok(out)
}

/// Coding table of one discretized Gaussian: a window around the rounded
/// mean plus a final escape slot for anything outside it.
#[derive(Debug, Clone)]
pub struct GaussianTable {
    center: i64,
    half_width: i64,
    table: FreqTable,
}

fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

fn unzigzag(z: u64) -> i64 {
    ((z >> 1) as i64) ^ -((z & 1) as i64)
}

fn bit_length(z: u64) -> u32 {
    64 - z.leading_zeros()
}

impl GaussianTable {
    pub fn new(mean: f64, scale: f64) -> Result<Self> {
        if !mean.is_finite() || !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "gaussian table with mean {mean}, scale {scale}"
            )));
        }
        let center = mean.round().clamp(-(1i64 << 40) as f64, (1i64 << 40) as f64) as i64;
        let half_width = ((6.0 * scale).ceil().min(MAX_HALF_WIDTH as f64) as i64 + 2).min(MAX_HALF_WIDTH);
        let mut probs: Vec<f64> = (center - half_width..=center + half_width)
            .map(|v| gaussian_likelihood(v as f64, mean, scale))
            .collect();
        let inside: f64 = probs.iter().sum();
        probs.push((1.0 - inside).max(PMF_FLOOR));
        Ok(GaussianTable {
            center,
            half_width,
            table: FreqTable::from_pmf(0, &probs)?,
        })
    }

    fn escape_index(&self) -> usize {
        (2 * self.half_width + 1) as usize
    }

    pub fn encode(&self, enc: &mut RangeEncoder, symbol: i64) {
        let d = symbol - self.center;
        if d.abs() <= self.half_width {
            self.table.encode_index(enc, (d + self.half_width) as usize);
        } else {
            self.table.encode_index(enc, self.escape_index());
            let z = zigzag(d);
            let len = bit_length(z);
            enc.encode_bits(len as u64, ESCAPE_LEN_BITS);
            enc.encode_bits(z & !(1 << (len - 1)), len - 1);
        }
    }

    pub fn decode(&self, dec: &mut RangeDecoder<'_>) -> Result<i64> {
        let i = self.table.decode_index(dec)?;
        if i < self.escape_index() {
            return Ok(self.center + i as i64 - self.half_width);
        }
        let len = dec.decode_bits(ESCAPE_LEN_BITS)? as u32;
        if len == 0 || len > 63 {
            return Err(Error::SectionLength(format!("escape length {len}")));
        }
        let z = (1u64 << (len - 1)) | dec.decode_bits(len - 1)?;
        Ok(self.center + unzigzag(z))
    }
}

/// Adaptive frequency model over `0..n`: counts start at 1, grow by a fixed
/// increment, and are halved when the total would exceed the coder limit.
#[derive(Debug, Clone)]
pub struct AdaptiveModel {
    freqs: Vec<u32>,
    total: u32,
}

const ADAPT_INCREMENT: u32 = 24;
const ADAPT_LIMIT: u32 = 1 << 13;

impl AdaptiveModel {
    pub fn new(n: usize) -> Self {
        AdaptiveModel {
            freqs: vec![1; n],
            total: n as u32,
        }
    }

    fn update(&mut self, i: usize) {
        self.freqs[i] += ADAPT_INCREMENT;
        self.total += ADAPT_INCREMENT;
        if self.total > ADAPT_LIMIT {
            self.total = 0;
            for f in self.freqs.iter_mut() {
                *f = (*f + 1) / 2;
                self.total += *f;
            }
        }
    }

    fn start(&self, i: usize) -> u32 {
        self.freqs[..i].iter().sum()
    }

    pub fn encode(&mut self, enc: &mut RangeEncoder, i: usize) {
        enc.encode(self.start(i), self.freqs[i], self.total);
        self.update(i);
    }

    pub fn decode(&mut self, dec: &mut RangeDecoder<'_>) -> Result<usize> {
        let v = dec.peek(self.total);
        let mut start = 0;
        let mut i = 0;
        while start + self.freqs[i] <= v {
            start += self.freqs[i];
            i += 1;
        }
        dec.consume(start, self.freqs[i], self.total)?;
        self.update(i);
        Ok(i)
    }
}

/// Signed values coded as an adaptive bit-length bucket followed by the
/// mantissa below the leading one as bypass bits.
#[derive(Debug, Clone)]
pub struct AdaptiveInt {
    buckets: AdaptiveModel,
}

impl AdaptiveInt {
    pub fn new(max_bits: u32) -> Self {
        AdaptiveInt {
            buckets: AdaptiveModel::new(max_bits as usize + 1),
        }
    }

    pub fn encode(&mut self, enc: &mut RangeEncoder, v: i64) {
        let z = zigzag(v);
        let len = bit_length(z);
        self.buckets.encode(enc, len as usize);
        if len > 1 {
            enc.encode_bits(z & !(1 << (len - 1)), len - 1);
        }
    }

    pub fn decode(&mut self, dec: &mut RangeDecoder<'_>) -> Result<i64> {
        let len = self.buckets.decode(dec)? as u32;
        let z = match len {
            0 => 0,
            1 => 1,
            _ => (1u64 << (len - 1)) | dec.decode_bits(len - 1)?,
        };
        Ok(unzigzag(z))
    }
}
