//! Byte-oriented range coder with a 40-bit low window and 16-bit frequency totals.
//!
//! Carries are resolved with a cached byte plus a run of pending `0xFF` bytes,
//! so output bytes never need to be revisited.

use crate::error::{Error, Result};

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;

const WINDOW_BITS: u32 = 40;
const WINDOW_MASK: u64 = (1 << WINDOW_BITS) - 1;
const TOP: u64 = 1 << 32;
const TOP_BYTE_SHIFT: u32 = WINDOW_BITS - 8;

pub struct RangeEncoder {
    low: u64,
    range: u64,
    cache: u8,
    pending: u64,
    started: bool,
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
            range: WINDOW_MASK,
            cache: 0,
            pending: 0,
            started: false,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[cum, cum + freq)` out of [`FREQ_TOTAL`].
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= FREQ_TOTAL);
        let r = self.range >> FREQ_BITS;
        self.low += r * cum as u64;
        self.range = if cum + freq == FREQ_TOTAL {
            self.range - r * cum as u64
        } else {
            r * freq as u64
        };
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes a raw 16-bit value.
    pub fn encode_bits16(&mut self, v: u16) {
        self.encode(v as u32, 1);
    }

    fn shift_low(&mut self) {
        if self.low < (0xFF << TOP_BYTE_SHIFT) || self.low > WINDOW_MASK {
            let carry = (self.low >> WINDOW_BITS) as u8;
            self.emit(self.cache.wrapping_add(carry));
            for _ in 0..self.pending {
                self.emit(0xFFu8.wrapping_add(carry));
            }
            self.pending = 0;
            self.cache = ((self.low >> TOP_BYTE_SHIFT) & 0xFF) as u8;
        } else {
            self.pending += 1;
        }
        self.low = (self.low << 8) & WINDOW_MASK;
    }

    fn emit(&mut self, b: u8) {
        // the very first byte is the always-zero integer part of the code value
        if self.started {
            self.out.push(b);
        } else {
            debug_assert_eq!(b, 0);
            self.started = true;
        }
    }

    /// Picks the shortest value in the final interval and flushes it.
    pub fn finish(mut self) -> Vec<u8> {
        let step = TOP - 1;
        self.low = (self.low + step) & !step;
        self.shift_low();
        self.shift_low();
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u64,
    range: u64,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = Self {
            code: 0,
            range: WINDOW_MASK,
            bytes,
            pos: 0,
        };
        for _ in 0..WINDOW_BITS / 8 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Returns the cumulative-frequency target for the next symbol. The caller
    /// maps it to a symbol and then calls [`RangeDecoder::consume`].
    pub fn target(&self) -> u32 {
        let r = self.range >> FREQ_BITS;
        ((self.code / r).min(FREQ_TOTAL as u64 - 1)) as u32
    }

    pub fn consume(&mut self, cum: u32, freq: u32) {
        let r = self.range >> FREQ_BITS;
        self.code -= r * cum as u64;
        self.range = if cum + freq == FREQ_TOTAL {
            self.range - r * cum as u64
        } else {
            r * freq as u64
        };
        while self.range < TOP {
            self.range <<= 8;
            self.code = ((self.code << 8) | self.next_byte() as u64) & WINDOW_MASK;
        }
    }

    pub fn decode_bits16(&mut self) -> u16 {
        let v = self.target();
        self.consume(v, 1);
        v as u16
    }

    /// Fails if decoding ran past the bytes the encoder could have produced,
    /// or if the code value left the coding interval.
    pub fn finish(&self) -> Result<()> {
        if self.pos > self.bytes.len() + (WINDOW_BITS / 8 - 1) as usize {
            return Err(Error::Corrupt(format!(
                "range decoder read {} bytes from a {}-byte payload",
                self.pos,
                self.bytes.len()
            )));
        }
        if self.code >= self.range {
            return Err(Error::Corrupt("range decoder state outside its interval".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_stream() {
        let bytes = RangeEncoder::new().finish();
        assert!(bytes.len() <= 1);
        RangeDecoder::new(&bytes).finish().unwrap();
    }

    #[test]
    fn raw_values_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<u16> = (0..5000).map(|_| rng.random()).collect();
        let mut e = RangeEncoder::new();
        for &v in &vals {
            e.encode_bits16(v);
        }
        let bytes = e.finish();
        assert!(bytes.len() <= 10000 + 2, "{}", bytes.len());
        let mut d = RangeDecoder::new(&bytes);
        for &v in &vals {
            assert_eq!(d.decode_bits16(), v);
        }
        d.finish().unwrap();
    }

    #[test]
    fn skewed_binary_roundtrip_and_size() {
        // p(0) = 65000/65536
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let syms: Vec<bool> = (0..20000).map(|_| rng.random::<f64>() < 0.01).collect();
        let mut e = RangeEncoder::new();
        let mut ideal = 0.0;
        for &s in &syms {
            if s {
                e.encode(65000, 536);
                ideal -= (536.0f64 / 65536.0).log2();
            } else {
                e.encode(0, 65000);
                ideal -= (65000.0f64 / 65536.0).log2();
            }
        }
        let bytes = e.finish();
        let bits = bytes.len() as f64 * 8.0;
        assert!(bits >= ideal - 1.0 && bits <= ideal + 16.0, "{bits} vs {ideal}");
        let mut d = RangeDecoder::new(&bytes);
        for &s in &syms {
            let t = d.target();
            let got = t >= 65000;
            if got {
                d.consume(65000, 536);
            } else {
                d.consume(0, 65000);
            }
            assert_eq!(got, s);
        }
        d.finish().unwrap();
    }

    #[test]
    fn carry_chains_are_resolved() {
        // symbols hugging the top of the interval force long 0xFF runs and carries
        let mut e = RangeEncoder::new();
        let n = 3000;
        for i in 0..n {
            if i % 97 == 0 {
                e.encode(0, 1);
            } else {
                e.encode(FREQ_TOTAL - 2, 2);
            }
        }
        let bytes = e.finish();
        let mut d = RangeDecoder::new(&bytes);
        for i in 0..n {
            let t = d.target();
            if i % 97 == 0 {
                assert_eq!(t, 0);
                d.consume(0, 1);
            } else {
                assert!(t >= FREQ_TOTAL - 2);
                d.consume(FREQ_TOTAL - 2, 2);
            }
        }
        d.finish().unwrap();
    }
}
