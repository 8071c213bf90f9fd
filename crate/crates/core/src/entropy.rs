//! Range coding over integer frequency tables.
//!
//! The coder keeps a 64-bit range normalized to `[2^56, 2^64)` and a 65-bit
//! `low` (carry in bit 64) that is emitted byte by byte with deferred carry
//! propagation. With `P = 16` bit tables the per-symbol truncation loss is
//! below `2^-40` bits, so coded lengths track the table cross-entropy up to a
//! couple of bytes per stream.

use crate::error::{Error, Result};
use crate::gauss::normal_interval_mass;

/// Default table precision in bits.
pub const PRECISION: u32 = 16;

/// Largest half-width of a latent symbol alphabet.
pub const MAX_LATENT_HALF_WIDTH: i64 = 4096;

const TOP: u64 = 1 << 56;

/// Integer symbol frequencies summing to exactly `2^precision`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    precision: u32,
    freqs: Vec<u32>,
    cumulative: Vec<u32>,
}

impl FrequencyTable {
    pub fn from_frequencies(freqs: Vec<u32>, precision: u32) -> Result<Self> {
        if !(1..=32).contains(&precision) {
            return Err(Error::Table(format!("precision {precision} out of range")));
        }
        let total: u64 = freqs.iter().map(|&f| f as u64).sum();
        if total != 1u64 << precision {
            return Err(Error::Table(format!(
                "frequencies sum to {total}, expected 2^{precision}"
            )));
        }
        if freqs.iter().any(|&f| f == 0) {
            return Err(Error::Table("zero frequency".into()));
        }
        let mut cumulative = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cumulative.push(0);
        for &f in &freqs {
            acc = acc.wrapping_add(f);
            cumulative.push(acc);
        }
        Ok(Self {
            precision,
            freqs,
            cumulative,
        })
    }

    /// Largest-remainder rounding of a pmf to integers summing to `2^precision`;
    /// symbols that round to zero are lifted to one, each unit taken from the
    /// currently largest bin.
    pub fn from_pmf(masses: &[f64], precision: u32) -> Result<Self> {
        let sum: f64 = masses.iter().sum();
        if masses.is_empty() || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Table(format!("masses sum to {sum}, expected 1")));
        }
        if masses.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::Table("negative or NaN mass".into()));
        }
        let total = 1u64 << precision;
        if masses.len() as u64 > total {
            return Err(Error::Table(format!(
                "{} symbols do not fit in 2^{precision}",
                masses.len()
            )));
        }
        let scaled: Vec<f64> = masses.iter().map(|m| m / sum * total as f64).collect();
        let mut freqs: Vec<u64> = scaled.iter().map(|s| s.floor() as u64).collect();
        let assigned: u64 = freqs.iter().sum();
        let mut order: Vec<usize> = (0..masses.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (scaled[a] - scaled[a].floor(), scaled[b] - scaled[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let deficit = total.saturating_sub(assigned) as usize;
        for &i in order.iter().cycle().take(deficit) {
            freqs[i] += 1;
        }
        for i in 0..freqs.len() {
            if freqs[i] == 0 {
                let donor = argmax(&freqs);
                freqs[donor] -= 1;
                freqs[i] = 1;
            }
        }
        Self::from_frequencies(freqs.into_iter().map(|f| f as u32).collect(), precision)
    }

    /// Normalizes `masses` to sum to one before rounding.
    pub fn from_unnormalized(masses: &[f64], precision: u32) -> Result<Self> {
        let sum: f64 = masses.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Table("masses must have positive total".into()));
        }
        let normalized: Vec<f64> = masses.iter().map(|m| m / sum).collect();
        Self::from_pmf(&normalized, precision)
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn frequencies(&self) -> &[u32] {
        &self.freqs
    }

    pub fn probability(&self, symbol: usize) -> f64 {
        self.freqs[symbol] as f64 / (1u64 << self.precision) as f64
    }

    /// Ideal code length of `symbol` under this table.
    pub fn bits(&self, symbol: usize) -> f64 {
        self.precision as f64 - (self.freqs[symbol] as f64).log2()
    }

    fn lookup(&self, target: u64) -> usize {
        // last index with cumulative[i] <= target
        let t = target as u32;
        match self.cumulative[..self.freqs.len()].binary_search(&t) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }
}

fn argmax(v: &[u64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub struct RangeEncoder {
    low: u128,
    range: u64,
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
        Self {
            low: 0,
            range: u64::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, symbol: usize, table: &FrequencyTable) -> Result<()> {
        if symbol >= table.len() {
            return Err(Error::Table(format!(
                "symbol {symbol} outside alphabet of {}",
                table.len()
            )));
        }
        let r = self.range >> table.precision;
        self.low += (r * table.cumulative[symbol] as u64) as u128;
        self.range = r * table.freqs[symbol] as u64;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> 64) as u8;
        if (self.low as u64) < 0xFF00_0000_0000_0000 || carry != 0 {
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 56) as u8;
        }
        self.cache_size += 1;
        self.low = ((self.low as u64) << 8) as u128;
    }

    /// Flushes the shortest tail that pins the final interval and returns the
    /// payload. Trailing zero bytes are dropped; the decoder reads past the end
    /// as zeros.
    pub fn finish(mut self) -> Vec<u8> {
        let mask = (TOP - 1) as u128;
        self.low = (self.low + mask) & !mask;
        self.shift_low();
        self.shift_low();
        debug_assert_eq!(self.out[0], 0, "leading byte carries no information");
        let mut out = self.out.split_off(1);
        while out.last() == Some(&0) {
            out.pop();
        }
        out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut dec = Self {
            data,
            pos: 0,
            code: 0,
            range: u64::MAX,
        };
        for _ in 0..8 {
            dec.code = (dec.code << 8) | dec.next_byte() as u64;
        }
        dec
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, table: &FrequencyTable) -> Result<usize> {
        let r = self.range >> table.precision;
        let target = self.code / r;
        if target >= 1u64 << table.precision {
            return Err(Error::Decode("code point outside the table".into()));
        }
        let s = table.lookup(target);
        self.code -= r * table.cumulative[s] as u64;
        self.range = r * table.freqs[s] as u64;
        if self.code >= self.range {
            return Err(Error::Decode("code point outside the symbol interval".into()));
        }
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u64;
            self.range <<= 8;
        }
        Ok(s)
    }

    /// Bytes of the payload that the decoder has consumed so far.
    pub fn consumed(&self) -> usize {
        self.pos.min(self.data.len())
    }
}

/// Encodes `symbols[i]` under `tables[i]`.
pub fn encode_symbols(symbols: &[usize], tables: &[&FrequencyTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::Table(format!(
            "{} symbols but {} tables",
            symbols.len(),
            tables.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode(s, t)?;
    }
    Ok(enc.finish())
}

pub fn decode_symbols(data: &[u8], tables: &[&FrequencyTable]) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(data);
    tables.iter().map(|t| dec.decode(t)).collect()
}

/// Table for one latent element under a discretized `N(mean, scale^2)` with
/// unit bins. Symbols cover the integers `offset ..= offset + len - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    pub offset: i64,
    pub table: FrequencyTable,
}

impl LatentTable {
    pub fn new(mean: f64, scale: f64) -> Result<Self> {
        let (offset, masses) = Self::masses(mean, scale);
        Ok(Self {
            offset,
            table: FrequencyTable::from_unnormalized(&masses, PRECISION)?,
        })
    }

    /// Support start and unit-bin masses before integer rounding: integers
    /// within `round(mean) ± max(16, 8 * scale)`.
    pub fn masses(mean: f64, scale: f64) -> (i64, Vec<f64>) {
        let (offset, hi) = Self::support(mean, scale);
        let masses = (offset..=hi)
            .map(|v| normal_interval_mass(v as f64 - 0.5, v as f64 + 0.5, mean, scale))
            .collect();
        (offset, masses)
    }

    /// Inclusive integer support `round(mean) ± max(16, 8 * scale)`.
    pub fn support(mean: f64, scale: f64) -> (i64, i64) {
        let center = mean.round() as i64;
        let half = (8.0 * scale).max(16.0).ceil().min(MAX_LATENT_HALF_WIDTH as f64) as i64;
        (center - half, center + half)
    }

    pub fn max_value(&self) -> i64 {
        self.offset + self.table.len() as i64 - 1
    }

    /// Clamps `value` into the support and returns `(symbol, clamped value)`.
    pub fn symbol(&self, value: i64) -> (usize, i64) {
        let v = value.clamp(self.offset, self.max_value());
        ((v - self.offset) as usize, v)
    }

    pub fn value(&self, symbol: usize) -> i64 {
        self.offset + symbol as i64
    }
}
