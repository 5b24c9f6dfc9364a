//! Carry-less 32-bit range coder with 16-bit frequencies.

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;
pub const PROB_BITS: u32 = 16;
pub const PROB_ONE: u32 = 1 << PROB_BITS;

#[derive(Debug, Default)]
pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
    symbols: usize,
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, out: Vec::new(), symbols: 0 }
    }

    fn normalize(&mut self) {
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

    /// Codes the interval `[cum, cum + freq)` out of `2^bits`.
    pub fn encode_freq(&mut self, cum: u32, freq: u32, bits: u32) {
        debug_assert!(freq > 0 && cum + freq <= 1 << bits && bits <= PROB_BITS);
        self.range >>= bits;
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        self.symbols += 1;
        self.normalize();
    }

    /// Codes the interval `[cdf[s], cdf[s+1])` of a 16-bit CDF.
    pub fn encode(&mut self, cdf: &[u32], s: usize) {
        self.encode_freq(cdf[s], cdf[s + 1] - cdf[s], PROB_BITS);
    }

    /// Equiprobable bits, most significant first.
    pub fn encode_bits(&mut self, value: u32, nbits: u32) {
        let mut left = nbits;
        while left > 0 {
            let n = left.min(PROB_BITS);
            left -= n;
            let chunk = (value >> left) & ((1u32 << n) - 1);
            self.encode_freq(chunk, 1, n);
            self.symbols -= 1;
        }
    }

    /// Number of `encode`/`encode_freq` calls so far (bypass bits excluded).
    pub fn symbols(&self) -> usize {
        self.symbols
    }

    /// Shortest tail identifying a value inside the final interval; trailing
    /// zero bytes are dropped since the decoder reads zeros past the end.
    pub fn finish(mut self) -> Vec<u8> {
        if self.symbols > 0 || !self.out.is_empty() {
            let low = self.low as u64;
            let high = low + self.range as u64;
            for n in 1..=4u32 {
                let unit = 1u64 << (32 - 8 * n);
                let v = low.div_ceil(unit) * unit;
                if v < high && v <= u32::MAX as u64 {
                    for i in 0..n {
                        self.out.push((v >> (24 - 8 * i)) as u8);
                    }
                    break;
                }
            }
        }
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = RangeDecoder { low: 0, range: u32::MAX, code: 0, data, pos: 0 };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// True once the decoder has consumed more bytes than the payload holds
    /// beyond the implicit zero padding of a 4-byte window.
    pub fn overrun(&self) -> bool {
        self.pos > self.data.len() + 4
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Target value in `[0, 2^bits)`; must be followed by [`Self::consume`].
    pub fn peek(&mut self, bits: u32) -> u32 {
        self.range >>= bits;
        let v = self.code.wrapping_sub(self.low) / self.range;
        v.min((1 << bits) - 1)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) {
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        self.normalize();
    }

    /// Decodes a symbol index of a 16-bit CDF by binary search.
    pub fn decode(&mut self, cdf: &[u32]) -> usize {
        let target = self.peek(PROB_BITS);
        let (mut lo, mut hi) = (0usize, cdf.len() - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if cdf[mid] <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.consume(cdf[lo], cdf[lo + 1] - cdf[lo]);
        lo
    }

    pub fn decode_bits(&mut self, nbits: u32) -> u32 {
        let mut v = 0u32;
        let mut left = nbits;
        while left > 0 {
            let n = left.min(PROB_BITS);
            left -= n;
            let chunk = self.peek(n);
            self.consume(chunk, 1);
            v = (v << n) | chunk;
        }
        v
    }
}
