//! Seeded closed-loop Monte Carlo of a quantized loop whose controller signal
//! travels as `k` descriptions over an i.i.d. erasure channel.
//!
//! Disturbance, channel and dither use separate generator streams, so two
//! codes with the same `k` and seed see identical loss patterns.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::lti::{ClosedLoopSystem, DecoderMode, LoopMetrics, LtiError, IN_D, OUT_E, OUT_V};
use crate::mdc::{sigma2_profile, IndexAssignment, LatticeParams, MdcError};
use crate::quantizer::{DitheredQuantizer, PrefixCode, QuantizerError, SymbolStats};
use crate::stability::{EmptyPolicy, StabilityError, StabilizingCodeSpec, TotalLossVariance};

/// Largest state magnitude before a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e150;
/// Largest quantizer index magnitude; beyond it indices are not exact.
const INDEX_LIMIT: f64 = 4.5e15;
const STREAM_DISTURBANCE: u64 = 1;
const STREAM_CHANNEL: u64 = 2;
const STREAM_DITHER: u64 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("loss probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("quantizer input depends instantaneously on the decoder output")]
    AlgebraicLoop,
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error(transparent)]
    Mdc(#[from] MdcError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
}

/// How the quantizer input is split into descriptions.
#[derive(Clone, Debug, PartialEq)]
pub enum SimCode {
    /// `k` dithered quantizations with independent dithers; `ℓ` received
    /// reconstructions are averaged.
    Independent { k: usize, delta: f64 },
    /// One dithered quantization sent `k` times.
    Repetition { k: usize, delta: f64 },
    /// Deterministic central quantizer followed by an index assignment.
    Md { assignment: IndexAssignment, delta: f64 },
}

impl SimCode {
    pub fn k(&self) -> usize {
        match self {
            SimCode::Independent { k, .. } | SimCode::Repetition { k, .. } => *k,
            SimCode::Md { assignment, .. } => assignment.k,
        }
    }

    /// Grid step of each description's symbols.
    pub fn symbol_step(&self) -> f64 {
        match self {
            SimCode::Independent { delta, .. } | SimCode::Repetition { delta, .. } => *delta,
            SimCode::Md { assignment, delta } => assignment.r as f64 * delta,
        }
    }

    /// Noise variance when every description arrives.
    pub fn design_noise(&self) -> f64 {
        match self {
            SimCode::Independent { k, delta } => delta * delta / (12.0 * *k as f64),
            SimCode::Repetition { delta, .. } | SimCode::Md { delta, .. } => delta * delta / 12.0,
        }
    }

    /// Noise model of the code for the stability tests.
    pub fn spec(&self, k_prime: usize, sigma_v2: f64) -> Result<StabilizingCodeSpec, SimError> {
        match self {
            SimCode::Independent { k, delta } => {
                Ok(StabilizingCodeSpec::independent(*k, k_prime, delta * delta / 12.0, sigma_v2)?)
            }
            SimCode::Repetition { k, delta } => {
                Ok(StabilizingCodeSpec::repetition(*k, delta * delta / 12.0, sigma_v2)?)
            }
            SimCode::Md { assignment, delta } => {
                let params = LatticeParams::new(*delta, assignment.r, assignment.k)?;
                Ok(StabilizingCodeSpec::md(k_prime, sigma2_profile(&params, sigma_v2, None)?)?)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coder {
    /// Empirical entropy of each description's symbols.
    #[default]
    EntropyMeasure,
    /// Huffman code matched to the realized symbol frequencies.
    HuffmanStream,
    /// Huffman code for a Gaussian of the realized variance.
    GaussianDesigned,
}

#[derive(Clone, Debug)]
pub struct SimulationConfig {
    /// Loop with its quantizer scaling `β` already chosen.
    pub system: ClosedLoopSystem,
    pub code: SimCode,
    pub p_loss: f64,
    pub horizon: usize,
    pub seed: u64,
    pub decoder_on_empty: EmptyPolicy,
    /// Reconstruction for [`EmptyPolicy::Mean`], in quantizer units.
    pub empty_value: f64,
    pub coder: Coder,
    /// Leading samples excluded from all averages.
    pub warmup: usize,
}

impl SimulationConfig {
    pub fn new(system: ClosedLoopSystem, code: SimCode, p_loss: f64, horizon: usize, seed: u64) -> Self {
        SimulationConfig {
            system,
            code,
            p_loss,
            horizon,
            seed,
            decoder_on_empty: EmptyPolicy::Zero,
            empty_value: 0.0,
            coder: Coder::EntropyMeasure,
            warmup: 1000,
        }
    }
}

/// Rates in bits/sample per description under each coder.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RateSet {
    pub entropy: Vec<f64>,
    pub huffman: Vec<f64>,
    pub gaussian: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub p_loss: f64,
    pub sigma_e2: f64,
    pub sigma_e2_db: f64,
    /// Measured variance of the quantizer input `β v`.
    pub sigma_v2: f64,
    /// Sum of `per_description_rate`.
    pub sumrate: f64,
    /// Rates under the configured coder.
    pub per_description_rate: Vec<f64>,
    pub empirical_entropy: Vec<f64>,
    pub rates: RateSet,
    /// `histogram[ℓ]` counts steps on which `ℓ` descriptions arrived.
    pub histogram: Vec<u64>,
    pub steps: usize,
    pub diverged: bool,
}

/// Dense row-major matrix-vector product for the small loop matrices.
struct Small {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Small {
    fn from(m: &nalgebra::DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Small { rows: m.nrows(), cols: m.ncols(), data }
    }

    fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        self.data[i * self.cols..(i + 1) * self.cols]
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Per-step encoder and decoder state of one code.
struct Codec<'a> {
    code: &'a SimCode,
    quantizer: Option<DitheredQuantizer>,
    dithers: Vec<crate::quantizer::DitherStream>,
    symbols: Vec<i64>,
    recon: Vec<f64>,
}

impl<'a> Codec<'a> {
    fn new(code: &'a SimCode, seed: u64) -> Result<Self, SimError> {
        let k = code.k();
        let (quantizer, streams) = match code {
            SimCode::Independent { delta, .. } => (Some(DitheredQuantizer::new(*delta, seed)?), k),
            SimCode::Repetition { delta, .. } => (Some(DitheredQuantizer::new(*delta, seed)?), 1),
            SimCode::Md { delta, .. } => {
                if !(*delta > 0.0 && delta.is_finite()) {
                    return Err(SimError::Mdc(MdcError::BadStep(*delta)));
                }
                (None, 0)
            }
        };
        let dithers = match &quantizer {
            Some(q) => (0..streams as u64).map(|j| q.stream(j)).collect(),
            None => Vec::new(),
        };
        Ok(Codec { code, quantizer, dithers, symbols: vec![0; k], recon: vec![0.0; k] })
    }

    /// Encodes `v` into `self.symbols`, filling `self.recon` with what a
    /// decoder holding each single description would reconstruct.
    fn encode(&mut self, v: f64) -> Result<(), SimError> {
        match self.code {
            SimCode::Independent { delta, .. } => {
                let q = self.quantizer.as_ref().expect("dithered");
                for j in 0..self.symbols.len() {
                    let z = self.dithers[j].next().expect("endless stream");
                    let s = q.index_with(v, z)?;
                    self.symbols[j] = s;
                    self.recon[j] = s as f64 * delta - z;
                }
            }
            SimCode::Repetition { delta, .. } => {
                let q = self.quantizer.as_ref().expect("dithered");
                let z = self.dithers[0].next().expect("endless stream");
                let s = q.index_with(v, z)?;
                self.symbols.fill(s);
                self.recon.fill(s as f64 * delta - z);
            }
            SimCode::Md { assignment, delta } => {
                let (_, tuple) = assignment.encode(v, *delta);
                let r = assignment.r as i64;
                for (j, a) in tuple.iter().enumerate() {
                    self.symbols[j] = a / r;
                }
            }
        }
        Ok(())
    }

    /// Reconstruction from the received subset, `None` when it is empty.
    fn decode(&self, received: &[bool]) -> Result<Option<f64>, SimError> {
        let count = received.iter().filter(|r| **r).count();
        if count == 0 {
            return Ok(None);
        }
        match self.code {
            SimCode::Independent { .. } | SimCode::Repetition { .. } => {
                let sum: f64 = self.recon.iter().zip(received).filter(|p| *p.1).map(|p| p.0).sum();
                Ok(Some(sum / count as f64))
            }
            SimCode::Md { assignment, delta } => {
                let r = assignment.r as i64;
                let got: Vec<(usize, i64)> = self
                    .symbols
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| received[*j])
                    .map(|(j, s)| (j, s * r))
                    .collect();
                Ok(Some(assignment.decode(&got, *delta, 0.0)?))
            }
        }
    }
}

fn rates(stats: &[SymbolStats], step: f64) -> Result<RateSet, SimError> {
    let mut out = RateSet::default();
    for s in stats {
        if s.total == 0 {
            out.entropy.push(0.0);
            out.huffman.push(0.0);
            out.gaussian.push(0.0);
            continue;
        }
        out.entropy.push(s.empirical_entropy()?);
        out.huffman.push(PrefixCode::stream_optimal(s)?.measure_rate(s)?);
        let n = s.total as f64;
        let var = s
            .counts
            .iter()
            .map(|(x, c)| (*x as f64 * step).powi(2) * *c as f64)
            .sum::<f64>()
            / n;
        let sigma = var.sqrt().max(step * 1e-3);
        out.gaussian.push(PrefixCode::gaussian(sigma, step, 1e-12)?.measure_rate(s)?);
    }
    Ok(out)
}

/// Simulates the loop for `config.horizon` steps.
///
/// Rates are computed from the realized symbol counts, which is what a second
/// pass over the same seed with a code trained on the first pass would see.
pub fn run(config: &SimulationConfig) -> Result<RunResult, SimError> {
    if config.horizon == 0 {
        return Err(SimError::EmptyHorizon);
    }
    if !(0.0..=1.0).contains(&config.p_loss) {
        return Err(SimError::BadProbability(config.p_loss));
    }
    let sys = &config.system;
    let beta = sys.beta;
    // With the zero decoder mode the `q` input is the reconstruction itself.
    let open = sys.realization().mode(DecoderMode::ZERO)?;
    if open.d[(OUT_V, 1)] != 0.0 {
        return Err(SimError::AlgebraicLoop);
    }
    let (a, b, c, dmat) = (Small::from(&open.a), Small::from(&open.b), Small::from(&open.c), open.d.clone());
    let n = a.rows;
    let k = config.code.k();

    let mut dist_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dist_rng.set_stream(STREAM_DISTURBANCE);
    let mut chan_rng = ChaCha8Rng::seed_from_u64(config.seed);
    chan_rng.set_stream(STREAM_CHANNEL);
    let dither_seed = {
        let mut r = ChaCha8Rng::seed_from_u64(config.seed);
        r.set_stream(STREAM_DITHER);
        r.random::<u64>()
    };
    let mut codec = Codec::new(&config.code, dither_seed)?;
    let sd = sys.sigma_d2.sqrt();

    let mut x = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut received = vec![false; k];
    let mut histogram = vec![0u64; k + 1];
    let mut stats = vec![SymbolStats::new(); k];
    let (mut e2, mut v2, mut counted) = (0.0, 0.0, 0usize);
    let mut diverged = false;
    let mut steps = 0;
    for t in 0..config.horizon {
        let z: f64 = StandardNormal.sample(&mut dist_rng);
        let d = sd * z;
        let v = c.row_dot(OUT_V, &x) + dmat[(OUT_V, IN_D)] * d;
        let vb = beta * v;
        if !(vb.abs() / codec.code.symbol_step() < INDEX_LIMIT) {
            diverged = true;
            break;
        }
        codec.encode(vb)?;
        for r in received.iter_mut() {
            *r = chan_rng.random::<f64>() >= config.p_loss;
        }
        let got = received.iter().filter(|r| **r).count();
        histogram[got] += 1;
        let wb = match codec.decode(&received)? {
            Some(w) => w,
            None => match config.decoder_on_empty {
                EmptyPolicy::Zero => 0.0,
                EmptyPolicy::Mean => config.empty_value,
                EmptyPolicy::Hold => beta * x[n - 1],
            },
        };
        let w = wb / beta;
        let e = c.row_dot(OUT_E, &x) + dmat[(OUT_E, 0)] * d + dmat[(OUT_E, 1)] * w;
        for i in 0..n {
            next[i] = a.row_dot(i, &x) + b.data[i * 2] * d + b.data[i * 2 + 1] * w;
        }
        std::mem::swap(&mut x, &mut next);
        steps = t + 1;
        if t >= config.warmup || config.horizon <= config.warmup {
            e2 += e * e;
            v2 += vb * vb;
            counted += 1;
            for (s, sym) in stats.iter_mut().zip(&codec.symbols) {
                s.push(*sym);
            }
        }
        if x.iter().any(|s| !(s.abs() <= DIVERGENCE_LIMIT)) {
            diverged = true;
            break;
        }
    }
    // Codes for a divergent stream are meaningless and their alphabets unbounded.
    let rates = if diverged {
        let nan = vec![f64::NAN; k];
        RateSet { entropy: nan.clone(), huffman: nan.clone(), gaussian: nan }
    } else {
        rates(&stats, config.code.symbol_step())?
    };
    let per_description_rate = match config.coder {
        Coder::EntropyMeasure => rates.entropy.clone(),
        Coder::HuffmanStream => rates.huffman.clone(),
        Coder::GaussianDesigned => rates.gaussian.clone(),
    };
    let denom = counted.max(1) as f64;
    let sigma_e2 = if counted == 0 { f64::INFINITY } else { e2 / denom };
    Ok(RunResult {
        p_loss: config.p_loss,
        sigma_e2,
        sigma_e2_db: 10.0 * sigma_e2.log10(),
        sigma_v2: v2 / denom,
        sumrate: per_description_rate.iter().sum(),
        empirical_entropy: rates.entropy.clone(),
        per_description_rate,
        rates,
        histogram,
        steps,
        diverged,
    })
}

/// Rates of `code` on i.i.d. Gaussian input of variance `sigma_v2`, for codes
/// whose loop cannot be closed at the target variance.
pub fn open_loop_rates(code: &SimCode, sigma_v2: f64, samples: usize, seed: u64) -> Result<RateSet, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_DISTURBANCE);
    let dither_seed = {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(STREAM_DITHER);
        r.random::<u64>()
    };
    let mut codec = Codec::new(code, dither_seed)?;
    let mut stats = vec![SymbolStats::new(); code.k()];
    let sd = sigma_v2.sqrt();
    for _ in 0..samples {
        let z: f64 = StandardNormal.sample(&mut rng);
        codec.encode(sd * z)?;
        for (s, sym) in stats.iter_mut().zip(&codec.symbols) {
            s.push(*sym);
        }
    }
    rates(&stats, code.symbol_step())
}

/// Runs `base` at every loss probability of `grid`, in parallel. Point `i`
/// uses seed `base.seed ^ i`; results keep grid order.
pub fn sweep(base: &SimulationConfig, grid: &[f64]) -> Result<Vec<RunResult>, SimError> {
    grid.par_iter()
        .enumerate()
        .map(|(i, p)| {
            let cfg = SimulationConfig { p_loss: *p, seed: base.seed ^ i as u64, ..base.clone() };
            run(&cfg)
        })
        .collect()
}

/// Output variance predicted by the loop equations with the loss-averaged
/// quantization noise `Σ p_s(ℓ) σ²(ℓ)`.
pub fn theory_sigma_e2(
    m: &LoopMetrics,
    spec: &StabilizingCodeSpec,
    p_loss: f64,
    convention: TotalLossVariance,
) -> f64 {
    let probs = crate::stability::ErasureDistribution { p_loss, k: spec.k }.probs();
    let avg: f64 = probs.iter().zip(spec.noise_profile(convention)).map(|(p, s)| p * s).sum();
    m.floor + m.q2e * avg
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistortionRow {
    pub delta: f64,
    /// Measured `D_ℓ` in dB for `ℓ = 1..=k`.
    pub measured_db: Vec<f64>,
    /// Model `σ²(ℓ)` in dB for `ℓ = 1..=k`.
    pub theory_db: Vec<f64>,
}

fn subsets(k: usize, size: usize) -> Vec<Vec<usize>> {
    (0u32..1 << k)
        .filter(|m| m.count_ones() as usize == size)
        .map(|m| (0..k).filter(|j| m >> j & 1 == 1).collect())
        .collect()
}

/// Side distortions of `assignment` for inputs uniform over one shift period
/// `[−r²Δ/2, r²Δ/2)`, averaged over every received subset of each size.
pub fn measure_distortion_table(
    assignment: &IndexAssignment,
    deltas: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<DistortionRow>, SimError> {
    let k = assignment.k;
    let subsets: Vec<Vec<Vec<usize>>> = (1..=k).map(|l| subsets(k, l)).collect();
    deltas
        .iter()
        .enumerate()
        .map(|(i, &delta)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            let half = assignment.period() as f64 * delta / 2.0;
            let mut acc = vec![0.0; k];
            for _ in 0..samples {
                let v = rng.random_range(-half..half);
                let (_, tuple) = assignment.encode(v, delta);
                for (l, sets) in subsets.iter().enumerate() {
                    let mut err = 0.0;
                    for set in sets {
                        let got: Vec<(usize, i64)> = set.iter().map(|j| (*j, tuple[*j])).collect();
                        let w = assignment.decode(&got, delta, 0.0)?;
                        err += (v - w).powi(2);
                    }
                    acc[l] += err / sets.len() as f64;
                }
            }
            let params = LatticeParams::new(delta, assignment.r, k)?;
            let theory = sigma2_profile(&params, 1.0, None)?;
            Ok(DistortionRow {
                delta,
                measured_db: acc.iter().map(|s| 10.0 * (s / samples as f64).log10()).collect(),
                theory_db: theory.sigma2[1..].iter().map(|s| 10.0 * s.log10()).collect(),
            })
        })
        .collect()
}

/// Differential entropy of a Gaussian with variance `var`, in bits.
pub fn gaussian_entropy(var: f64) -> f64 {
    0.5 * (2.0 * PI * std::f64::consts::E * var).log2()
}
