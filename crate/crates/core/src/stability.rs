//! Stability and efficiency of `(k, k′)` stabilizing codes.
//!
//! Two tests are provided for i.i.d. description losses. The average-variance
//! test compares the loss-averaged quantization noise with the largest noise
//! the loop tolerates. The mean-square test models the loop as a jump linear
//! system whose mode is the number of received descriptions and checks the
//! spectral radius of the second-moment operator.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lti::{
    h2_norm_sq, spectral_radius, ClosedLoopSystem, DecoderMode, LoopMetrics, LoopRealization,
    LtiError, TransferFunction, IN_D, IN_Q,
};
use crate::mdc::SideDistortionProfile;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("system not stabilizable at this SNR (γ = {gamma}, ‖S−1‖² = {snorm})")]
    NotStabilizable { gamma: f64, snorm: f64 },
    #[error("noise correlation {rho} outside (−1/(k−1), 0]")]
    RhoOutOfRange { rho: f64 },
    #[error("{ell} descriptions is below the stabilizing threshold {k_prime}")]
    BelowThreshold { ell: usize, k_prime: usize },
    #[error("SNR values must be positive")]
    NonPositive,
    #[error("loss probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("invalid code: {0}")]
    BadCode(String),
    #[error("structural mismatch in {0}")]
    Dimension(String),
    #[error(transparent)]
    Lti(#[from] LtiError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    Independent,
    Md,
    /// One description sent `k` times; no combining gain.
    Repetition,
}

/// Noise variance charged to a step on which nothing was received.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TotalLossVariance {
    /// `σ²(0) = σ_v²`: the reconstruction error equals the quantizer input.
    #[default]
    InputVariance,
    /// `σ²(0) = 0`: the lost input is carried by the jump in the dynamics
    /// rather than counted as noise, as in the jump-system model.
    Zero,
}

/// Reconstruction used when no description arrives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPolicy {
    #[default]
    Zero,
    /// The configured mean of `v`; equal to `Zero` for the dynamics.
    Mean,
    /// Repeat the previous reconstruction.
    Hold,
}

impl EmptyPolicy {
    pub fn mode(self) -> DecoderMode {
        match self {
            EmptyPolicy::Zero | EmptyPolicy::Mean => DecoderMode::ZERO,
            EmptyPolicy::Hold => DecoderMode::HOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilizingCodeSpec {
    pub k: usize,
    pub k_prime: usize,
    pub construction: Construction,
    pub sigma2: SideDistortionProfile,
    pub rho: f64,
}

impl StabilizingCodeSpec {
    pub fn new(
        k_prime: usize,
        construction: Construction,
        sigma2: SideDistortionProfile,
        rho: f64,
    ) -> Result<Self, StabilityError> {
        let k = sigma2.k();
        if k_prime == 0 || k_prime > k {
            return Err(StabilityError::BadCode(format!("need 1 ≤ k′ ≤ k, got k′={k_prime}, k={k}")));
        }
        if construction != Construction::Md && rho != 0.0 {
            return Err(StabilityError::BadCode("only MD codes have correlated noise".into()));
        }
        check_rho(rho, k)?;
        Ok(StabilizingCodeSpec { k, k_prime, construction, sigma2, rho })
    }

    /// `k` independently dithered descriptions with step variance `sigma2`:
    /// combining `ℓ` of them gives `sigma2 / ℓ`.
    pub fn independent(k: usize, k_prime: usize, sigma2: f64, sigma_v2: f64) -> Result<Self, StabilityError> {
        let mut s = vec![sigma_v2];
        s.extend((1..=k).map(|l| sigma2 / l as f64));
        Self::new(k_prime, Construction::Independent, SideDistortionProfile { sigma2: s, psi: 1.0 }, 0.0)
    }

    pub fn repetition(k: usize, sigma2: f64, sigma_v2: f64) -> Result<Self, StabilityError> {
        let mut s = vec![sigma_v2];
        s.extend(std::iter::repeat_n(sigma2, k));
        Self::new(1, Construction::Repetition, SideDistortionProfile { sigma2: s, psi: 1.0 }, 0.0)
    }

    pub fn md(k_prime: usize, profile: SideDistortionProfile) -> Result<Self, StabilityError> {
        Self::new(k_prime, Construction::Md, profile, 0.0)
    }

    /// Noise variance for `ℓ` received descriptions under `convention`.
    pub fn noise_profile(&self, convention: TotalLossVariance) -> Vec<f64> {
        let mut s = self.sigma2.sigma2.clone();
        if convention == TotalLossVariance::Zero {
            s[0] = 0.0;
        }
        s
    }
}

fn check_rho(rho: f64, k: usize) -> Result<(), StabilityError> {
    let lower = if k > 1 { -1.0 / (k as f64 - 1.0) } else { f64::NEG_INFINITY };
    if !(rho > lower && rho <= 0.0) {
        return Err(StabilityError::RhoOutOfRange { rho });
    }
    Ok(())
}

/// Number of received descriptions out of `k`, each lost independently.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErasureDistribution {
    pub p_loss: f64,
    pub k: usize,
}

impl ErasureDistribution {
    pub fn new(p_loss: f64, k: usize) -> Result<Self, StabilityError> {
        if !(0.0..=1.0).contains(&p_loss) {
            return Err(StabilityError::BadProbability(p_loss));
        }
        Ok(ErasureDistribution { p_loss, k })
    }

    /// `p_s(ℓ)` for `ℓ = 0..=k`.
    pub fn probs(&self) -> Vec<f64> {
        let q = 1.0 - self.p_loss;
        let mut c = 1.0;
        (0..=self.k)
            .map(|l| {
                if l > 0 {
                    c = c * (self.k - l + 1) as f64 / l as f64;
                }
                c * q.powi(l as i32) * self.p_loss.powi((self.k - l) as i32)
            })
            .collect()
    }
}

fn require_stabilizable(m: &LoopMetrics) -> Result<(), StabilityError> {
    if m.gamma <= m.snorm {
        return Err(StabilityError::NotStabilizable { gamma: m.gamma, snorm: m.snorm });
    }
    Ok(())
}

/// Largest common description noise variance such that any `k′` averaged
/// descriptions keep the loop stable.
pub fn lemma1_variance_bound(m: &LoopMetrics, k_prime: usize) -> Result<f64, StabilityError> {
    require_stabilizable(m)?;
    if m.snorm == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(m.gamma * k_prime as f64 * m.d2v / (m.snorm * (m.gamma - m.snorm)))
}

/// [`lemma1_variance_bound`] for descriptions whose noises have pairwise
/// correlation `rho`.
pub fn lemma5_variance_bound(
    m: &LoopMetrics,
    k: usize,
    k_prime: usize,
    rho: f64,
) -> Result<f64, StabilityError> {
    check_rho(rho, k)?;
    let denom = 1.0 + (k_prime as f64 - 1.0) * rho;
    if denom <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(lemma1_variance_bound(m, k_prime)? / denom)
}

/// Sum-rate lower bound `(k/2) log₂(1 + snorm/k′)`, with `snorm = ‖S−1‖²`.
pub fn lemma2_sumrate_lb(k: usize, k_prime: usize, snorm: f64) -> f64 {
    0.5 * k as f64 * (1.0 + snorm / k_prime as f64).log2()
}

/// `‖S + 1‖²`, the norm appearing in the alternative form of the sum-rate
/// bound; reported next to [`lemma2_sumrate_lb`].
pub fn s_plus_one_norm(sys: &ClosedLoopSystem) -> Result<f64, StabilityError> {
    let s = sys.sensitivity()?;
    Ok(h2_norm_sq(&s.add(&TransferFunction::gain(1.0)))?)
}

/// Efficiency of independent encodings at the stability limit.
pub fn lemma3_efficiency(k: usize, k_prime: usize, snorm: f64) -> f64 {
    if k == 1 || snorm <= 0.0 {
        return 1.0;
    }
    let (kf, kp) = (k as f64, k_prime as f64);
    // ln_1p keeps the ratio accurate as snorm → 0.
    (kf * snorm / kp).ln_1p() / (kf * (snorm / kp).ln_1p())
}

/// Output variance when `ell ≥ k′` of `k` independent descriptions arrive,
/// each at the [`lemma1_variance_bound`] noise level.
pub fn lemma4_performance(m: &LoopMetrics, k_prime: usize, ell: usize) -> Result<f64, StabilityError> {
    if ell < k_prime {
        return Err(StabilityError::BelowThreshold { ell, k_prime });
    }
    let bound = lemma1_variance_bound(m, k_prime)?;
    Ok(m.floor + m.q2e * bound / ell as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Efficiency {
    /// Reported value, at most 1.
    pub eta: f64,
    pub raw: f64,
    /// True when the inputs implied an efficiency above 1.
    pub clipped: bool,
}

/// `log₂(1 + γ_all) / (k log₂(1 + γ_single))`.
pub fn efficiency_eta(gamma_single: f64, gamma_all: f64, k: usize) -> Result<Efficiency, StabilityError> {
    if !(gamma_single > 0.0 && gamma_all > 0.0) {
        return Err(StabilityError::NonPositive);
    }
    let raw = gamma_all.ln_1p() / (k as f64 * gamma_single.ln_1p());
    Ok(Efficiency { eta: raw.min(1.0), raw, clipped: raw > 1.0 })
}

/// Rate of a single-description scalar quantizer with step `delta`, over the
/// measured sum-rate of the code.
pub fn practical_efficiency(sigma_v2: f64, delta: f64, measured_sumrate: f64) -> f64 {
    let single = 0.5 * (1.0 + 12.0 * sigma_v2 / (delta * delta)).log2()
        + 0.5 * (2.0 * std::f64::consts::PI / 6.0).log2();
    single / measured_sumrate
}

/// Smallest loss probability where `f(p) ≥ 0`: the first sign change on a
/// grid of step `1/1000`, refined by bisection to `tol`. `None` when `f < 0`
/// at every grid point.
pub fn critical_loss(f: impl Fn(f64) -> f64, tol: f64) -> Option<f64> {
    const GRID: usize = 1000;
    if f(0.0) >= 0.0 {
        return Some(0.0);
    }
    let hit = (1..=GRID).find(|i| f(*i as f64 / GRID as f64) >= 0.0)?;
    let (mut lo, mut hi) = ((hit - 1) as f64 / GRID as f64, hit as f64 / GRID as f64);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AvgVarianceReport {
    /// `Σ p_s(ℓ) σ²(ℓ)`.
    pub lhs: f64,
    /// `σ_v² / ‖S−1‖²`.
    pub rhs: f64,
    pub stable: bool,
    pub margin: f64,
    pub critical_p: Option<f64>,
}

/// Compares the loss-averaged noise variance with the largest tolerable one.
pub fn avg_variance_test(
    spec: &StabilizingCodeSpec,
    dist: &ErasureDistribution,
    m: &LoopMetrics,
    convention: TotalLossVariance,
) -> AvgVarianceReport {
    let s = spec.noise_profile(convention);
    let rhs = if m.snorm > 0.0 { m.sigma_v2 / m.snorm } else { f64::INFINITY };
    let avg = |p: f64| -> f64 {
        let d = ErasureDistribution { p_loss: p, k: spec.k };
        d.probs().iter().zip(&s).map(|(a, b)| a * b).sum()
    };
    let lhs = avg(dist.p_loss);
    AvgVarianceReport {
        lhs,
        rhs,
        stable: lhs < rhs,
        margin: rhs - lhs,
        critical_p: critical_loss(|p| avg(p) - rhs, 1e-7),
    }
}

/// Jump linear system `x⁺ = A(ξ) x + B(ξ) [d; q̄]` with i.i.d. modes.
///
/// `q̄ = [0, q₁, …, q_k]`: mode `ξ` is driven by entry `ξ` only, so the
/// total-loss mode carries no quantization noise.
#[derive(Clone, Debug)]
pub struct MjlsModel {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub probs: Vec<f64>,
    /// Variances of `[d, q̄]`.
    pub noise_var: Vec<f64>,
    pub state_dim: usize,
}

impl MjlsModel {
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        probs: Vec<f64>,
        noise_var: Vec<f64>,
    ) -> Result<Self, StabilityError> {
        let n = a.first().map_or(0, |m| m.nrows());
        if a.len() != probs.len() || b.len() != probs.len() {
            return Err(StabilityError::Dimension("mode count".into()));
        }
        for (j, (aj, bj)) in a.iter().zip(&b).enumerate() {
            if aj.nrows() != n || aj.ncols() != n {
                return Err(StabilityError::Dimension(format!("A({j})")));
            }
            if bj.nrows() != n || bj.ncols() != noise_var.len() {
                return Err(StabilityError::Dimension(format!("B({j})")));
            }
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(StabilityError::Dimension("mode probabilities".into()));
        }
        Ok(MjlsModel { a, b, probs, noise_var, state_dim: n })
    }

    /// Scalar modes `x⁺ = a_ξ x + d`.
    pub fn scalar(a: &[f64], probs: &[f64]) -> Result<Self, StabilityError> {
        Self::new(
            a.iter().map(|x| DMatrix::from_element(1, 1, *x)).collect(),
            a.iter().map(|_| DMatrix::from_element(1, 1, 1.0)).collect(),
            probs.to_vec(),
            vec![1.0],
        )
    }

    pub fn modes(&self) -> usize {
        self.probs.len()
    }

    /// `Σ p_ξ A(ξ) ⊗ A(ξ)`.
    pub fn second_moment_operator(&self) -> DMatrix<f64> {
        let n2 = self.state_dim * self.state_dim;
        let mut out = DMatrix::zeros(n2, n2);
        for (a, p) in self.a.iter().zip(&self.probs) {
            out += a.kronecker(a) * *p;
        }
        out
    }

    /// Block matrix with `(j, j′)` block `p_{j|j′} A(j′) ⊗ A(j′)`, where
    /// `transition[(j′, j)] = p_{j|j′}`. `None` means i.i.d. modes.
    pub fn big_a(&self, transition: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        let n2 = self.state_dim * self.state_dim;
        let m = self.modes();
        let mut out = DMatrix::zeros(m * n2, m * n2);
        for jp in 0..m {
            let kron = self.a[jp].kronecker(&self.a[jp]);
            for j in 0..m {
                let p = transition.map_or(self.probs[j], |t| t[(jp, j)]);
                out.view_mut((j * n2, jp * n2), (n2, n2)).copy_from(&(&kron * p));
            }
        }
        out
    }
}

/// Builds the jump system of the loop for a symmetric code: mode `ξ ≥ 1`
/// decodes normally, mode 0 applies `policy`.
pub fn build_mjls(
    real: &LoopRealization,
    spec: &StabilizingCodeSpec,
    dist: &ErasureDistribution,
    beta: f64,
    sigma_d2: f64,
    policy: EmptyPolicy,
) -> Result<MjlsModel, StabilityError> {
    if dist.k != spec.k {
        return Err(StabilityError::Dimension(format!(
            "erasure model has k = {}, code has k = {}",
            dist.k, spec.k
        )));
    }
    let k = spec.k;
    let received = real.mode(DecoderMode::RECEIVED)?;
    let empty = real.mode(policy.mode())?;
    let mut a = Vec::with_capacity(k + 1);
    let mut b = Vec::with_capacity(k + 1);
    for xi in 0..=k {
        let sys = if xi == 0 { &empty } else { &received };
        let mut bx = DMatrix::zeros(sys.states(), k + 2);
        bx.column_mut(0).copy_from(&sys.b.column(IN_D));
        bx.column_mut(1 + xi).copy_from(&(sys.b.column(IN_Q) / beta));
        a.push(sys.a.clone());
        b.push(bx);
    }
    let mut noise_var = vec![sigma_d2, 0.0];
    noise_var.extend_from_slice(&spec.sigma2.sigma2[1..]);
    MjlsModel::new(a, b, dist.probs(), noise_var)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MssReport {
    /// Spectral radius of the full block operator.
    pub rho: f64,
    /// Spectral radius of the collapsed `n² × n²` operator.
    pub rho_reduced: f64,
    /// Power-iteration estimate on covariance matrices.
    pub rho_power: f64,
    pub stable: bool,
}

/// Spectral radius of the mean-square operator under i.i.d. modes.
pub fn mss_spectral_test(model: &MjlsModel) -> MssReport {
    let rho = spectral_radius(&model.big_a(None));
    let rho_reduced = spectral_radius(&model.second_moment_operator());
    MssReport { rho, rho_reduced, rho_power: power_radius(model, 4000), stable: rho < 1.0 }
}

/// Spectral radius for a Markov mode chain, `transition[(j′, j)] = p_{j|j′}`.
pub fn mss_spectral_test_markov(model: &MjlsModel, transition: &DMatrix<f64>) -> f64 {
    spectral_radius(&model.big_a(Some(transition)))
}

/// Iterates `X ← Σ p A X Aᵀ` from the identity. The operator preserves the
/// positive semidefinite cone, so its spectral radius is the growth rate.
pub fn power_radius(model: &MjlsModel, iters: usize) -> f64 {
    let n = model.state_dim;
    let mut x = DMatrix::<f64>::identity(n, n);
    let mut growth = 0.0;
    for _ in 0..iters {
        let mut next = DMatrix::zeros(n, n);
        for (a, p) in model.a.iter().zip(&model.probs) {
            next += a * &x * a.transpose() * *p;
        }
        let t = next.trace();
        if t <= 0.0 {
            return 0.0;
        }
        growth = t / x.trace();
        x = next / t;
    }
    growth
}

/// Random stable-looking mode set with `ρ(𝔸)` equal to `target`.
///
/// Modes share a random base matrix and differ by perturbations of a third
/// of its norm, so single paths follow the mean-square behaviour closely.
pub fn random_mjls(seed: u64, n: usize, modes: usize, target: f64) -> MjlsModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let base = gauss(&mut rng);
    let scale = base.norm() / (3.0 * (n as f64));
    let a: Vec<DMatrix<f64>> = (0..modes).map(|_| &base + gauss(&mut rng) * scale).collect();
    let raw: Vec<f64> = (0..modes).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
    let unscaled = MjlsModel::new(
        a.clone(),
        vec![DMatrix::identity(n, n); modes],
        probs.clone(),
        vec![1.0; n],
    )
    .expect("consistent shapes");
    let rho0 = spectral_radius(&unscaled.second_moment_operator());
    let c = (target / rho0).sqrt();
    MjlsModel::new(
        a.into_iter().map(|m| m * c).collect(),
        vec![DMatrix::identity(n, n); modes],
        probs,
        vec![1.0; n],
    )
    .expect("consistent shapes")
}

/// Ensemble second moment `E‖x‖²` averaged over consecutive windows of a
/// simulation of `paths` independent trajectories from random initial states.
/// Stops early, padding with infinity, once any state exceeds `1e150`.
pub fn second_moment_windows(model: &MjlsModel, steps: usize, paths: usize, window: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.state_dim;
    let w = model.noise_var.len();
    let cum: Vec<f64> = model
        .probs
        .iter()
        .scan(0.0, |s, p| {
            *s += p;
            Some(*s)
        })
        .collect();
    let mut xs: Vec<nalgebra::DVector<f64>> = (0..paths)
        .map(|_| nalgebra::DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng)))
        .collect();
    let mut out = Vec::with_capacity(steps / window);
    let mut acc = 0.0;
    for t in 0..steps {
        for x in xs.iter_mut() {
            let u: f64 = rng.random();
            let mode = cum.iter().position(|c| u < *c).unwrap_or(cum.len() - 1);
            let noise = nalgebra::DVector::from_fn(w, |i, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * model.noise_var[i].sqrt()
            });
            *x = &model.a[mode] * &*x + &model.b[mode] * noise;
            acc += x.norm_squared();
        }
        if xs.iter().any(|x| x.amax() > 1e150 || !x.amax().is_finite()) {
            out.resize(steps / window, f64::INFINITY);
            return out;
        }
        if (t + 1) % window == 0 {
            out.push(acc / (window * paths) as f64);
            acc = 0.0;
        }
    }
    out
}

/// Loss probability where `ρ(𝔸)` reaches 1, by bisection.
pub fn critical_loss_mss(
    real: &LoopRealization,
    spec: &StabilizingCodeSpec,
    beta: f64,
    policy: EmptyPolicy,
) -> Result<Option<f64>, StabilityError> {
    let rho = |p: f64| -> f64 {
        let dist = ErasureDistribution { p_loss: p, k: spec.k };
        build_mjls(real, spec, &dist, beta, 1.0, policy)
            .map(|m| spectral_radius(&m.second_moment_operator()))
            .unwrap_or(f64::INFINITY)
    };
    // Surface structural errors once instead of inside the bisection.
    build_mjls(real, spec, &ErasureDistribution::new(0.0, spec.k)?, beta, 1.0, policy)?;
    Ok(critical_loss(|p| rho(p) - 1.0, 1e-7))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{example_plant, Plant};

    #[test]
    fn binomial_probs() {
        let d = ErasureDistribution::new(0.25, 3).unwrap();
        let p = d.probs();
        assert!((p[0] - 0.25f64.powi(3)).abs() < 1e-15);
        assert!((p[3] - 0.75f64.powi(3)).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(ErasureDistribution::new(1.5, 2).is_err());
    }

    #[test]
    fn lemma2_values() {
        assert_eq!(lemma2_sumrate_lb(3, 2, 0.0), 0.0);
        assert!((lemma2_sumrate_lb(1, 1, 15.0) - 2.0).abs() < 1e-12);
        assert!((lemma2_sumrate_lb(3, 2, 15.0) - 1.5 * 8.5f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn lemma3_limits() {
        assert!(lemma3_efficiency(3, 2, 1e-4) > 0.9999);
        assert!((lemma3_efficiency(3, 2, 1e12) - 1.0 / 3.0).abs() < 0.05);
        assert_eq!(lemma3_efficiency(1, 1, 15.0), 1.0);
    }

    #[test]
    fn eta_cases() {
        assert_eq!(efficiency_eta(5.0, 5.0, 1).unwrap().eta, 1.0);
        assert!((efficiency_eta(5.0, 5.0, 3).unwrap().eta - 1.0 / 3.0).abs() < 1e-12);
        let e = efficiency_eta(1.0, 10.0, 1).unwrap();
        assert!(e.clipped && e.eta == 1.0);
        assert_eq!(efficiency_eta(0.0, 1.0, 2), Err(StabilityError::NonPositive));
    }

    #[test]
    fn lemma5_range_and_scaling() {
        let m = example_plant().calibrated(133.0, 1.0).unwrap().metrics().unwrap();
        let b1 = lemma1_variance_bound(&m, 2).unwrap();
        assert_eq!(lemma5_variance_bound(&m, 3, 2, 0.0).unwrap(), b1);
        let b = lemma5_variance_bound(&m, 3, 2, -0.25).unwrap();
        assert!((b / b1 - 4.0 / 3.0).abs() < 1e-12);
        assert!(lemma5_variance_bound(&m, 3, 2, -0.5).is_err());
        assert!(lemma5_variance_bound(&m, 3, 2, 0.1).is_err());
    }

    #[test]
    fn lemma1_needs_margin() {
        let mut m = example_plant().metrics().unwrap();
        m.gamma = m.snorm;
        assert!(matches!(lemma1_variance_bound(&m, 1), Err(StabilityError::NotStabilizable { .. })));
    }

    #[test]
    fn scalar_mss() {
        let m = MjlsModel::scalar(&[0.7], &[1.0]).unwrap();
        assert!((mss_spectral_test(&m).rho - 0.49).abs() < 1e-12);
        let m = MjlsModel::scalar(&[0.0, 1.2], &[0.5, 0.5]).unwrap();
        let r = mss_spectral_test(&m);
        assert!((r.rho - 0.72).abs() < 1e-12);
        assert!((r.rho_power - 0.72).abs() < 1e-12);
    }

    #[test]
    fn scalar_loop_modes() {
        // P = a z⁻¹, F = f, Ly = g, Lw = 0: x⁺ = d + f w, w = M g a x + q.
        let (a, f, g) = (1.5, 0.8, -0.6);
        let sys = ClosedLoopSystem {
            plant: Plant::output_disturbance(TransferFunction::new(vec![0.0, a], vec![1.0]).unwrap()),
            f: TransferFunction::gain(f),
            lw: TransferFunction::zero(),
            ly: TransferFunction::gain(g),
            sigma_q2: 1.0,
            beta: 1.0,
            sigma_d2: 1.0,
        };
        let real = sys.realization();
        let profile = SideDistortionProfile { sigma2: vec![1.0, 0.5, 0.25], psi: 1.0 };
        let spec = StabilizingCodeSpec::md(1, profile).unwrap();
        let dist = ErasureDistribution::new(0.3, 2).unwrap();
        let model = build_mjls(&real, &spec, &dist, 1.0, 1.0, EmptyPolicy::Zero).unwrap();
        assert_eq!(model.modes(), 3);
        assert_eq!(model.state_dim, 2);
        for (xi, am) in model.a.iter().enumerate() {
            let m = if xi == 0 { 0.0 } else { 1.0 };
            let x = am[(1, 0)];
            // The plant state may be scaled by the realization; compare invariants.
            assert!((am.trace() - f * m * g * a).abs() < 1e-12, "mode {xi}: {am}");
            assert!(am[(0, 1)].abs() < 1e-12 && am[(1, 1)].abs() < 1e-12);
            assert!((x.abs() > 0.0) == (m > 0.0));
        }
        // Only column 1 + ξ of the noise input is used by mode ξ.
        assert_eq!(model.b[2].column(2).norm(), 0.0);
        assert!(model.b[2].column(3).norm() > 0.0);
    }

    #[test]
    fn critical_loss_bisects() {
        let c = critical_loss(|p| p - 0.3, 1e-9).unwrap();
        assert!((c - 0.3).abs() < 1e-8);
        assert_eq!(critical_loss(|p| p - 2.0, 1e-9), None);
        // First crossing of a bump, not the last.
        let c = critical_loss(|p| 0.1 - (p - 0.5).abs(), 1e-9).unwrap();
        assert!((c - 0.4).abs() < 1e-8);
        assert_eq!(critical_loss(|p| p + 1.0, 1e-9), Some(0.0));
    }
}
