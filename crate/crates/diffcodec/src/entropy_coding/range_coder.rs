//! Carry-less byte-oriented range coder with 16-bit probability precision.
//!
//! Probabilities are integer CDF tables summing to exactly 2^16. The coder
//! state is a pair of 32-bit registers renormalized byte-wise; identical
//! tables on both sides give a lossless roundtrip, and the wire bytes are
//! platform-independent.

use crate::error::CodingError;

/// Probability resolution in bits.
pub const PROB_BITS: u32 = 16;
/// Every CDF table's final entry.
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

/// Integer CDF over a contiguous integer symbol support.
///
/// `cdf` has `n + 1` entries for `n` symbols, starts at 0, is strictly
/// increasing and ends at exactly [`PROB_TOTAL`], so every symbol in the
/// support is codable. Symbol `offset + i` owns the slot `[cdf[i], cdf[i+1])`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
    offset: i32,
}

impl CdfTable {
    /// Quantizes a probability vector to an integer CDF. The input needs not
    /// be normalized; negative or non-finite entries are rejected. Each
    /// symbol receives at least one count and the rounding remainder goes to
    /// the most probable symbol, keeping the total at exactly 2^16.
    pub fn from_pmf(pmf: &[f64], offset: i32) -> Result<Self, CodingError> {
        let n = pmf.len();
        if n == 0 {
            return Err(CodingError::InvalidTable("empty pmf".to_string()));
        }
        if n as u32 > PROB_TOTAL {
            return Err(CodingError::InvalidTable(format!(
                "{n} symbols exceed the {PROB_TOTAL} count budget"
            )));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CodingError::InvalidTable(
                "pmf entries must be finite and non-negative".to_string(),
            ));
        }
        let sum: f64 = pmf.iter().sum();
        if sum <= 0.0 {
            return Err(CodingError::InvalidTable("pmf sums to zero".to_string()));
        }
        let budget = (PROB_TOTAL - n as u32) as f64;
        let mut counts: Vec<u32> = pmf
            .iter()
            .map(|p| 1 + ((p / sum) * budget).floor() as u32)
            .collect();
        let assigned: u32 = counts.iter().sum();
        let argmax = pmf
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        counts[argmax] += PROB_TOTAL - assigned;

        let mut cdf = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for c in counts {
            acc += c;
            cdf.push(acc);
        }
        debug_assert_eq!(*cdf.last().unwrap(), PROB_TOTAL);
        Ok(Self { cdf, offset })
    }

    /// Table for integer symbols under a Gaussian with the given mean and
    /// scale: P(v) = Phi((v - mu + 0.5)/sigma) - Phi((v - mu - 0.5)/sigma).
    /// Mass more than 16 sigma away from the mean is treated as zero before
    /// the minimum-count rule tops it up.
    pub fn gaussian(mu: f64, sigma: f64, lo: i32, hi: i32) -> Result<Self, CodingError> {
        if lo > hi {
            return Err(CodingError::InvalidTable(format!(
                "empty support [{lo}, {hi}]"
            )));
        }
        let sigma = sigma.max(crate::entropy_coding::SIGMA_MIN);
        let n = (hi - lo + 1) as usize;
        let mut pmf = vec![0.0f64; n];
        let win_lo = ((mu - 16.0 * sigma).floor() as i64).max(lo as i64) as i32;
        let win_hi = ((mu + 16.0 * sigma).ceil() as i64).min(hi as i64) as i32;
        for v in win_lo..=win_hi {
            let upper = normal_cdf((v as f64 - mu + 0.5) / sigma);
            let lower = normal_cdf((v as f64 - mu - 0.5) / sigma);
            pmf[(v - lo) as usize] = (upper - lower).max(0.0);
        }
        Self::from_pmf(&pmf, lo)
    }

    pub fn n_symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    /// Inclusive symbol support bounds.
    pub fn support(&self) -> (i32, i32) {
        (self.offset, self.offset + self.n_symbols() as i32 - 1)
    }

    fn lookup(&self, symbol: i32) -> Result<(u32, u32), CodingError> {
        let idx = symbol as i64 - self.offset as i64;
        if idx < 0 || idx as usize >= self.n_symbols() {
            return Err(CodingError::SymbolOutOfSupport {
                symbol: symbol as i64,
                support: self.n_symbols(),
            });
        }
        let idx = idx as usize;
        Ok((self.cdf[idx], self.cdf[idx + 1] - self.cdf[idx]))
    }

    fn find(&self, value: u32) -> Result<usize, CodingError> {
        if value >= PROB_TOTAL {
            return Err(CodingError::NoMatchingSymbol(value));
        }
        // First index whose cdf entry exceeds value, minus one.
        Ok(self.cdf.partition_point(|&c| c <= value) - 1)
    }

    /// Ideal code length of a symbol under this table, in bits.
    pub fn exact_bits(&self, symbol: i32) -> Result<f64, CodingError> {
        let (_, freq) = self.lookup(symbol)?;
        Ok(-(freq as f64 / PROB_TOTAL as f64).log2())
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Streaming encoder; call [`RangeEncoder::finish`] to flush.
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
        Self { low: 0, range: u32::MAX, out: Vec::new() }
    }

    pub fn encode_symbol(&mut self, symbol: i32, table: &CdfTable) -> Result<(), CodingError> {
        let (cum, freq) = table.lookup(symbol)?;
        self.range /= PROB_TOTAL;
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        self.normalize();
        Ok(())
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                // Underflow: low and high straddle a carry boundary with a
                // tiny range; pin the range below the boundary.
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

/// Streaming decoder over a byte slice produced by [`RangeEncoder`].
pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self, CodingError> {
        let mut d = Self { low: 0, range: u32::MAX, code: 0, bytes, pos: 0 };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8, CodingError> {
        let b = self
            .bytes
            .get(self.pos)
            .copied()
            .ok_or(CodingError::TruncatedStream)?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<i32, CodingError> {
        self.range /= PROB_TOTAL;
        let value = self.code.wrapping_sub(self.low) / self.range;
        let idx = table.find(value)?;
        let cum = table.cdf[idx];
        let freq = table.cdf[idx + 1] - cum;
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(table.offset + idx as i32)
    }
}
