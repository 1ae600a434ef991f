//! Subtractively dithered uniform quantization and memoryless entropy coding.
//!
//! Dither is keyed by `(seed, t, j)`: description `j` reads its own ChaCha
//! stream at word position `2t`, so a decoder can regenerate the dither of any
//! received description without replaying lost ones.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantizerError {
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("non-finite quantizer input {0}")]
    NonFinite(f64),
    #[error("empty symbol statistics")]
    Empty,
    #[error("empty probability mass function")]
    EmptyPmf,
    #[error("symbol {0} is outside the code and the code has no escape")]
    NoEscape(i64),
}

/// Bits of the fixed-width payload that follows an escape codeword.
pub const ESCAPE_PAYLOAD_BITS: u32 = 64;

/// Largest index listed by [`PrefixCode::gaussian`].
pub const GAUSSIAN_MAX_CELLS: i64 = 1 << 20;

fn unit_interval(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DitheredQuantizer {
    pub delta: f64,
    pub seed: u64,
}

impl DitheredQuantizer {
    pub fn new(delta: f64, seed: u64) -> Result<Self, QuantizerError> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(QuantizerError::BadStep(delta));
        }
        Ok(DitheredQuantizer { delta, seed })
    }

    /// Dither value in `(−Δ/2, Δ/2]` for time `t` and description `j`.
    pub fn dither(&self, t: u64, j: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(j);
        rng.set_word_pos(2 * t as u128);
        0.5 * self.delta - unit_interval(rng.next_u64()) * self.delta
    }

    /// Sequential dither of description `j` starting at `t = 0`.
    pub fn stream(&self, j: u64) -> DitherStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(j);
        DitherStream { rng, delta: self.delta }
    }

    /// Grid index `⌈(v + z)/Δ⌋`, ties away from zero.
    pub fn index_with(&self, v: f64, z: f64) -> Result<i64, QuantizerError> {
        if !v.is_finite() {
            return Err(QuantizerError::NonFinite(v));
        }
        Ok(((v + z) / self.delta).round() as i64)
    }

    pub fn quantize(&self, v: f64, t: u64, j: u64) -> Result<i64, QuantizerError> {
        self.index_with(v, self.dither(t, j))
    }

    /// `w = v_c − z`.
    pub fn reconstruct(&self, index: i64, t: u64, j: u64) -> f64 {
        index as f64 * self.delta - self.dither(t, j)
    }

    /// `k` encodings of the same value with independent dithers.
    pub fn independent_encode(&self, v: f64, k: usize, t: u64) -> Result<Vec<i64>, QuantizerError> {
        (0..k as u64).map(|j| self.quantize(v, t, j)).collect()
    }
}

/// Dither values of one description in time order.
pub struct DitherStream {
    rng: ChaCha8Rng,
    delta: f64,
}

impl Iterator for DitherStream {
    type Item = f64;
    fn next(&mut self) -> Option<f64> {
        Some(0.5 * self.delta - unit_interval(self.rng.next_u64()) * self.delta)
    }
}

/// Occurrence counts of grid symbols.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SymbolStats {
    pub counts: BTreeMap<i64, u64>,
    pub total: u64,
}

impl SymbolStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, s: i64) {
        *self.counts.entry(s).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn from_symbols(it: impl IntoIterator<Item = i64>) -> Self {
        let mut s = Self::new();
        for x in it {
            s.push(x);
        }
        s
    }

    pub fn pmf(&self) -> Vec<(i64, f64)> {
        let n = self.total as f64;
        self.counts.iter().map(|(s, c)| (*s, *c as f64 / n)).collect()
    }

    pub fn empirical_entropy(&self) -> Result<f64, QuantizerError> {
        if self.total == 0 {
            return Err(QuantizerError::Empty);
        }
        Ok(entropy(self.pmf().iter().map(|p| p.1)))
    }
}

pub fn entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    p.into_iter()
        .filter(|x| *x > 0.0)
        .map(|x| -x * x.log2())
        .sum()
}

/// Huffman codeword lengths; a single symbol gets length 1.
pub fn huffman_lengths(weights: &[f64]) -> Vec<u32> {
    let n = weights.len();
    if n == 1 {
        return vec![1];
    }
    // Nodes 0..n are leaves; internal nodes are appended.
    let mut parent: Vec<usize> = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    for (i, w) in weights.iter().enumerate() {
        heap.push(Reverse((OrdF64(*w), i)));
    }
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().unwrap();
        let Reverse((wb, b)) = heap.pop().unwrap();
        let id = parent.len();
        parent.push(usize::MAX);
        parent[a] = id;
        parent[b] = id;
        heap.push(Reverse((OrdF64(wa.0 + wb.0), id)));
    }
    (0..n)
        .map(|mut i| {
            let mut d = 0;
            while parent[i] != usize::MAX {
                i = parent[i];
                d += 1;
            }
            d
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct OrdF64(f64);
impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&o.0)
    }
}

/// Codeword lengths per symbol plus an optional escape codeword.
///
/// Escaped symbols cost the escape length plus [`ESCAPE_PAYLOAD_BITS`].
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixCode {
    pub lengths: BTreeMap<i64, u32>,
    pub escape: Option<u32>,
}

impl PrefixCode {
    /// Huffman code for `pmf`; `escape_mass` is the probability of every
    /// symbol not listed. Without escape mass, a free codeword (Kraft sum
    /// below one) becomes the escape when one exists.
    pub fn build(pmf: &[(i64, f64)], escape_mass: f64) -> Result<Self, QuantizerError> {
        if pmf.is_empty() {
            return Err(QuantizerError::EmptyPmf);
        }
        let mut w: Vec<f64> = pmf.iter().map(|p| p.1).collect();
        if escape_mass > 0.0 {
            w.push(escape_mass);
        }
        let len = huffman_lengths(&w);
        let lengths: BTreeMap<i64, u32> =
            pmf.iter().zip(&len).map(|(p, l)| (p.0, *l)).collect();
        let escape = if escape_mass > 0.0 {
            Some(len[pmf.len()])
        } else {
            let max = *len.iter().max().unwrap();
            let kraft: f64 = len.iter().map(|l| 0.5f64.powi(*l as i32)).sum();
            (kraft < 1.0).then_some(max)
        };
        Ok(PrefixCode { lengths, escape })
    }

    /// Code matched to the stream's own relative frequencies.
    pub fn stream_optimal(stats: &SymbolStats) -> Result<Self, QuantizerError> {
        Self::build(&stats.pmf(), 0.0)
    }

    /// Code for a Gaussian of standard deviation `sigma` quantized with step
    /// `delta` on the grid `delta·Z`; cells below `tail` mass, and cells beyond
    /// [`GAUSSIAN_MAX_CELLS`] on either side, go to the escape.
    pub fn gaussian(sigma: f64, delta: f64, tail: f64) -> Result<Self, QuantizerError> {
        let normal = Normal::new(0.0, sigma).map_err(|_| QuantizerError::BadStep(sigma))?;
        let cell = |n: i64| {
            normal.cdf((n as f64 + 0.5) * delta) - normal.cdf((n as f64 - 0.5) * delta)
        };
        let mut pmf = vec![(0, cell(0))];
        let mut n = 1;
        loop {
            let p = cell(n);
            if (p < tail && n > 1) || n > GAUSSIAN_MAX_CELLS {
                break;
            }
            pmf.push((n, p));
            pmf.push((-n, p));
            n += 1;
        }
        let listed: f64 = pmf.iter().map(|p| p.1).sum();
        Self::build(&pmf, (1.0 - listed).max(tail))
    }

    pub fn cost(&self, s: i64) -> Result<u32, QuantizerError> {
        match (self.lengths.get(&s), self.escape) {
            (Some(l), _) => Ok(*l),
            (None, Some(e)) => Ok(e + ESCAPE_PAYLOAD_BITS),
            (None, None) => Err(QuantizerError::NoEscape(s)),
        }
    }

    pub fn expected_length(&self, pmf: &[(i64, f64)]) -> Result<f64, QuantizerError> {
        pmf.iter().map(|(s, p)| Ok(p * self.cost(*s)? as f64)).sum()
    }

    /// Average codeword length over a stream given by its counts.
    pub fn measure_rate(&self, stats: &SymbolStats) -> Result<f64, QuantizerError> {
        if stats.total == 0 {
            return Err(QuantizerError::Empty);
        }
        let mut bits = 0u64;
        for (s, c) in &stats.counts {
            bits += self.cost(*s)? as u64 * c;
        }
        Ok(bits as f64 / stats.total as f64)
    }
}

/// Lower bound `½ log₂(1 + γ)` on the rate of a stabilizing quantizer.
pub fn rate_lower_bound(gamma: f64) -> f64 {
    0.5 * (1.0 + gamma).log2()
}

/// Upper bound of an entropy-coded dithered quantizer at SNR `γ`.
pub fn rate_upper_bound(gamma: f64) -> f64 {
    rate_lower_bound(gamma) + 0.5 * (std::f64::consts::PI * std::f64::consts::E / 6.0).log2() + 1.0
}
