//! Discretized-Gaussian symbol model and channel-group payload framing.

use super::range::{RangeDecoder, RangeEncoder, FREQ_TOTAL};
use crate::autodiff::{round_half_away, P_MIN};
use crate::error::{Error, Result};
use crate::gauss::interval_mass;

/// Largest symbol magnitude coded through the Gaussian window.
pub const MAX_WINDOW_SYMBOL: i64 = 255;
/// Channels per independently coded group.
pub const GROUP_CHANNELS: usize = 8;

/// Frequency table for one element: window symbols `lo..=hi` followed by the
/// escape symbol.
struct SymbolTable {
    lo: i64,
    cum: Vec<u32>,
}

impl SymbolTable {
    fn new(mu: f64, sigma: f64, width: f64) -> Self {
        let m = mu / width;
        let s = sigma / width;
        let half = (6.0 * s).ceil().min(MAX_WINDOW_SYMBOL as f64) as i64 + 1;
        let centre = round_half_away(m.clamp(-1e6, 1e6)) as i64;
        let lo = (centre - half).max(-MAX_WINDOW_SYMBOL);
        let hi = (centre + half).min(MAX_WINDOW_SYMBOL);
        let n = if hi >= lo { (hi - lo + 1) as usize } else { 0 };
        let probs: Vec<f64> = (0..n)
            .map(|i| interval_mass((lo + i as i64) as f64 * width - mu, sigma, width))
            .collect();
        let escape = (1.0 - probs.iter().sum::<f64>()).max(0.0);
        let spread = (FREQ_TOTAL as usize - (n + 1)) as f64;
        let mut freq: Vec<u32> = probs
            .iter()
            .chain(std::iter::once(&escape))
            .map(|&p| 1 + (p * spread).floor() as u32)
            .collect();
        let used: u32 = freq.iter().sum();
        let best = (0..freq.len())
            .max_by(|&a, &b| freq[a].cmp(&freq[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        freq[best] += FREQ_TOTAL - used;
        let mut cum = Vec::with_capacity(freq.len() + 1);
        let mut acc = 0;
        cum.push(0);
        for f in freq {
            acc += f;
            cum.push(acc);
        }
        Self { lo, cum }
    }

    fn escape_index(&self) -> usize {
        self.cum.len() - 2
    }

    fn encode(&self, enc: &mut RangeEncoder, k: i64) {
        let idx = k - self.lo;
        if idx >= 0 && (idx as usize) < self.escape_index() {
            let i = idx as usize;
            enc.encode(self.cum[i], self.cum[i + 1] - self.cum[i]);
        } else {
            let e = self.escape_index();
            enc.encode(self.cum[e], self.cum[e + 1] - self.cum[e]);
            let raw = k as i32 as u32;
            enc.encode_bits16((raw >> 16) as u16);
            enc.encode_bits16(raw as u16);
        }
    }

    fn decode(&self, dec: &mut RangeDecoder) -> i64 {
        let t = dec.target();
        // last index with cum <= t
        let i = self.cum.partition_point(|&c| c <= t) - 1;
        dec.consume(self.cum[i], self.cum[i + 1] - self.cum[i]);
        if i == self.escape_index() {
            let hi = dec.decode_bits16() as u32;
            let lo = dec.decode_bits16() as u32;
            ((hi << 16) | lo) as i32 as i64
        } else {
            self.lo + i as i64
        }
    }
}

/// Model parameters for one element.
#[derive(Clone, Copy, Debug)]
pub struct ElementModel {
    pub mu: f64,
    pub sigma: f64,
    pub width: f64,
}

/// Ideal codelength of symbol `k` in bits, with the probability floor.
pub fn symbol_bits(k: i64, m: ElementModel) -> f64 {
    -libm::log2(interval_mass(k as f64 * m.width - m.mu, m.sigma, m.width).max(P_MIN))
}

/// Range-codes one channel group.
pub fn encode_group(symbols: &[i64], models: &[ElementModel]) -> Vec<u8> {
    let mut enc = RangeEncoder::new();
    for (&k, m) in symbols.iter().zip(models) {
        SymbolTable::new(m.mu, m.sigma, m.width).encode(&mut enc, k);
    }
    enc.finish()
}

pub fn decode_group(bytes: &[u8], models: &[ElementModel]) -> Result<Vec<i64>> {
    let mut dec = RangeDecoder::new(bytes);
    let out = models
        .iter()
        .map(|m| SymbolTable::new(m.mu, m.sigma, m.width).decode(&mut dec))
        .collect();
    dec.finish()?;
    Ok(out)
}

/// Splits a CxHxW element list into groups of [`GROUP_CHANNELS`] channels.
pub fn group_ranges(channels: usize, plane: usize) -> Vec<std::ops::Range<usize>> {
    (0..channels.div_ceil(GROUP_CHANNELS))
        .map(|g| {
            let c0 = g * GROUP_CHANNELS;
            let c1 = (c0 + GROUP_CHANNELS).min(channels);
            c0 * plane..c1 * plane
        })
        .collect()
}

/// Encodes every group and frames them: u8 group count, then per group a
/// little-endian u32 byte length and the bytes.
pub fn encode_payload(symbols: &[i64], models: &[ElementModel], channels: usize, plane: usize) -> Result<Vec<u8>> {
    let ranges = group_ranges(channels, plane);
    if ranges.len() > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!("{channels} channels exceed the group limit")));
    }
    let groups = map_groups(&ranges, |r| encode_group(&symbols[r.clone()], &models[r.clone()]));
    let mut out = vec![ranges.len() as u8];
    for g in groups {
        out.extend_from_slice(&(g.len() as u32).to_le_bytes());
        out.extend_from_slice(&g);
    }
    Ok(out)
}

/// Sizes of the coded groups inside a framed payload.
pub fn payload_group_sizes(payload: &[u8]) -> Result<Vec<usize>> {
    let (count, mut rest) = payload
        .split_first()
        .ok_or_else(|| Error::Corrupt("empty codelayer payload".into()))?;
    let mut sizes = Vec::with_capacity(*count as usize);
    for _ in 0..*count {
        if rest.len() < 4 {
            return Err(Error::Corrupt("truncated group length".into()));
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        if rest.len() < 4 + len {
            return Err(Error::Corrupt(format!("group claims {len} bytes, {} left", rest.len() - 4)));
        }
        sizes.push(len);
        rest = &rest[4 + len..];
    }
    if !rest.is_empty() {
        return Err(Error::Corrupt(format!("{} trailing bytes after codelayer groups", rest.len())));
    }
    Ok(sizes)
}

pub fn decode_payload(payload: &[u8], models: &[ElementModel], channels: usize, plane: usize) -> Result<Vec<i64>> {
    let ranges = group_ranges(channels, plane);
    let sizes = payload_group_sizes(payload)?;
    if sizes.len() != ranges.len() {
        return Err(Error::Corrupt(format!(
            "payload has {} groups, expected {}",
            sizes.len(),
            ranges.len()
        )));
    }
    let mut slices = Vec::with_capacity(sizes.len());
    let mut pos = 1;
    for s in sizes {
        slices.push(&payload[pos + 4..pos + 4 + s]);
        pos += 4 + s;
    }
    let jobs: Vec<_> = ranges.iter().cloned().zip(slices).collect();
    let decoded = map_groups(&jobs, |(r, bytes)| decode_group(bytes, &models[r.clone()]));
    let mut out = Vec::with_capacity(channels * plane);
    for d in decoded {
        out.extend(d?);
    }
    Ok(out)
}

#[cfg(feature = "parallel")]
fn map_groups<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_groups<T, U>(items: &[T], f: impl Fn(&T) -> U) -> Vec<U> {
    items.iter().map(f).collect()
}
