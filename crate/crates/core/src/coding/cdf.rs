//! Quantised CDF tables: discretised Gaussians over `[-T, T]` plus an escape
//! symbol, and the per-channel hyper-latent tables.

use std::sync::OnceLock;

use lic_autodiff::std_normal_cdf;

use super::rangecoder::{RangeDecoder, RangeEncoder, PROB_ONE};
use crate::config::SIGMA_MIN;

pub const MIN_TAIL: i32 = 2;
pub const MAX_TAIL: i32 = 255;
/// Fixed tail of the hyper-latent alphabet.
pub const Z_TAIL: i32 = 63;
pub const NUM_BUCKETS: usize = 64;
pub const BUCKET_MAX: f64 = 64.0;
const ESCAPE_LEN_BITS: u32 = 5;

/// Integer CDF over symbols `0..=2T` (values `-T..=T`) and the escape symbol
/// `2T+1`; `cdf.len() == 2T + 3`, `cdf[0] == 0`, last entry `2^16`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    pub tail: i32,
    pub cdf: Vec<u32>,
}

/// Tail `T = clamp(ceil(8 sigma), 2, 255)`.
pub fn tail_for_sigma(sigma: f64) -> i32 {
    ((8.0 * sigma).ceil() as i32).clamp(MIN_TAIL, MAX_TAIL)
}

impl QuantizedCdf {
    /// From cumulative probabilities at the `2T + 2` bin edges
    /// `-T-0.5, ..., T+0.5`. Every symbol, including escape, gets at least one
    /// count.
    pub fn from_edges(tail: i32, edges: &[f64]) -> Self {
        let n = (2 * tail + 2) as usize;
        assert_eq!(edges.len(), n, "edge count");
        let budget = (PROB_ONE as usize - n) as f64;
        let mut cdf = Vec::with_capacity(n + 1);
        cdf.push(0u32);
        for (k, &e) in edges.iter().enumerate().skip(1) {
            let f = (e - edges[0]).clamp(0.0, 1.0);
            let c = (k as u32 + (f * budget).floor() as u32).max(cdf[k - 1] + 1);
            cdf.push(c.min(PROB_ONE - (n - k) as u32));
        }
        cdf.push(PROB_ONE);
        QuantizedCdf { tail, cdf }
    }

    /// Zero-mean discretised Gaussian of scale `sigma`.
    pub fn gaussian(sigma: f64) -> Self {
        let sigma = sigma.max(SIGMA_MIN);
        let tail = tail_for_sigma(sigma);
        let edges: Vec<f64> = (0..2 * tail + 2).map(|k| std_normal_cdf((k as f64 - tail as f64 - 0.5) / sigma)).collect();
        Self::from_edges(tail, &edges)
    }

    pub fn escape(&self) -> usize {
        (2 * self.tail + 1) as usize
    }

    /// Probability of integer value `v` under the quantised table.
    pub fn prob(&self, v: i32) -> f64 {
        let s = if v.abs() <= self.tail { (v + self.tail) as usize } else { self.escape() };
        (self.cdf[s + 1] - self.cdf[s]) as f64 / PROB_ONE as f64
    }

    pub fn encode(&self, enc: &mut RangeEncoder, v: i32) {
        if v.abs() <= self.tail {
            enc.encode(&self.cdf, (v + self.tail) as usize);
            return;
        }
        enc.encode(&self.cdf, self.escape());
        let e = (v.unsigned_abs() - self.tail as u32 - 1) as u64 + 1;
        let len = 64 - e.leading_zeros();
        enc.encode_bits(len - 1, ESCAPE_LEN_BITS);
        enc.encode_bits((e & ((1u64 << (len - 1)) - 1)) as u32, len - 1);
        enc.encode_bits((v < 0) as u32, 1);
    }

    pub fn decode(&self, dec: &mut RangeDecoder<'_>) -> i32 {
        let s = dec.decode(&self.cdf);
        if s != self.escape() {
            return s as i32 - self.tail;
        }
        let len = dec.decode_bits(ESCAPE_LEN_BITS) + 1;
        let e = (1u64 << (len - 1)) | dec.decode_bits(len - 1) as u64;
        let mag = (e - 1) as i64 + self.tail as i64 + 1;
        let mag = mag.min(i32::MAX as i64) as i32;
        if dec.decode_bits(1) == 1 {
            -mag
        } else {
            mag
        }
    }
}

/// Scale of logarithmic bucket `b` spanning `[SIGMA_MIN, BUCKET_MAX]`.
pub fn bucket_sigma(b: usize) -> f64 {
    let (lo, hi) = (SIGMA_MIN.ln(), BUCKET_MAX.ln());
    (lo + (hi - lo) * b as f64 / (NUM_BUCKETS - 1) as f64).exp()
}

/// Nearest bucket in the log domain.
pub fn bucket_index(sigma: f64) -> usize {
    let (lo, hi) = (SIGMA_MIN.ln(), BUCKET_MAX.ln());
    let t = (sigma.max(SIGMA_MIN).ln() - lo) / (hi - lo) * (NUM_BUCKETS - 1) as f64;
    (t.round().max(0.0) as usize).min(NUM_BUCKETS - 1)
}

pub fn bucket_tables() -> &'static [QuantizedCdf] {
    static TABLES: OnceLock<Vec<QuantizedCdf>> = OnceLock::new();
    TABLES.get_or_init(|| (0..NUM_BUCKETS).map(|b| QuantizedCdf::gaussian(bucket_sigma(b))).collect())
}

/// Table used for a residual of scale `sigma` in exact or bucketed mode.
pub fn residual_table(sigma: f64, bucketed: bool) -> std::borrow::Cow<'static, QuantizedCdf> {
    if bucketed {
        std::borrow::Cow::Borrowed(&bucket_tables()[bucket_index(sigma)])
    } else {
        std::borrow::Cow::Owned(QuantizedCdf::gaussian(sigma))
    }
}

/// Edge points of the fixed hyper-latent alphabet.
pub fn z_edges() -> Vec<f64> {
    (0..2 * Z_TAIL + 2).map(|k| k as f64 - Z_TAIL as f64 - 0.5).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_are_strictly_increasing() {
        for &s in &[0.11, 0.3, 1.0, 7.5, 40.0, 500.0] {
            let t = QuantizedCdf::gaussian(s);
            assert_eq!(t.cdf.len(), (2 * t.tail + 3) as usize);
            assert_eq!(*t.cdf.last().unwrap(), PROB_ONE);
            assert!(t.cdf.windows(2).all(|w| w[1] > w[0]), "sigma {s}");
        }
        assert_eq!(tail_for_sigma(0.11), 2);
        assert_eq!(tail_for_sigma(100.0), 255);
    }

    #[test]
    fn escapes_round_trip() {
        let t = QuantizedCdf::gaussian(0.5);
        let vals = [0, 1, -4, 5, -5, 6, 100, -100_000, 2_000_000, i32::MAX / 2];
        let mut e = RangeEncoder::new();
        for &v in &vals {
            t.encode(&mut e, v);
        }
        let bytes = e.finish();
        let mut d = RangeDecoder::new(&bytes);
        for &v in &vals {
            assert_eq!(t.decode(&mut d), v);
        }
    }

    #[test]
    fn buckets_span_range() {
        assert!((bucket_sigma(0) - SIGMA_MIN).abs() < 1e-12);
        assert!((bucket_sigma(NUM_BUCKETS - 1) - BUCKET_MAX).abs() < 1e-9);
        assert_eq!(bucket_index(0.01), 0);
        assert_eq!(bucket_index(1e6), NUM_BUCKETS - 1);
        assert_eq!(bucket_index(bucket_sigma(17)), 17);
    }
}
