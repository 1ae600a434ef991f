//! Discrete-time SISO transfer functions, state-space realizations and the
//! second-order statistics of the quantized feedback loop.
//!
//! Polynomials are coefficient lists in powers of `z⁻¹`, lowest power first.
//! The loop is
//!
//! ```text
//! y = P21 d + P22 u      e = P11 d + P12 u
//! v = Lw z⁻¹ w + Ly y    w = v + q/β       u = F w
//! ```
//!
//! and every closed-loop map is evaluated on one joint realization, so
//! unstable plant modes are shared rather than cancelled numerically.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LtiError {
    #[error("improper transfer function: leading denominator coefficient is zero")]
    Improper,
    #[error("unstable system: pole radius {0:.6} is not inside the unit circle")]
    Unstable(f64),
    #[error("loop not internally stabilized by supplied filters (spectral radius {0:.6})")]
    LoopUnstable(f64),
    #[error("ill-posed algebraic loop: 1 - Dly*D22*Df vanishes")]
    IllPosed,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("target quantizer-input variance {target} is not reachable (floor {floor})")]
    Unreachable { target: f64, floor: f64 },
}

fn trim(mut p: Vec<f64>) -> Vec<f64> {
    let scale = p.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    while p.len() > 1 && p.last().is_some_and(|c| c.abs() <= 1e-14 * scale) {
        p.pop();
    }
    if p.is_empty() {
        p.push(0.0);
    }
    p
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, y) in b.iter().enumerate() {
        out[i] += y;
    }
    out
}

/// Roots of `c[0] zⁿ + c[1] zⁿ⁻¹ + … + c[n]`, via companion eigenvalues.
pub fn poly_roots(c: &[f64]) -> Vec<Complex<f64>> {
    let c = trim(c.to_vec());
    let n = c.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        m[(0, j)] = -c[j + 1] / c[0];
    }
    for i in 1..n {
        m[(i, i - 1)] = 1.0;
    }
    m.complex_eigenvalues().iter().cloned().collect()
}

/// Largest eigenvalue modulus of a square matrix; zero for an empty one.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .fold(0.0f64, |r, z| r.max(z.norm()))
}

/// Rational function `num(z⁻¹) / den(z⁻¹)`, stored with `den[0] = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTf", into = "RawTf")]
pub struct TransferFunction {
    num: Vec<f64>,
    den: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTf {
    num: Vec<f64>,
    #[serde(default = "one")]
    den: Vec<f64>,
}

fn one() -> Vec<f64> {
    vec![1.0]
}

impl TryFrom<RawTf> for TransferFunction {
    type Error = LtiError;
    fn try_from(r: RawTf) -> Result<Self, LtiError> {
        TransferFunction::new(r.num, r.den)
    }
}

impl From<TransferFunction> for RawTf {
    fn from(t: TransferFunction) -> Self {
        RawTf { num: t.num, den: t.den }
    }
}

impl TransferFunction {
    /// Common leading `z⁻¹` factors are removed before the properness check.
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self, LtiError> {
        let mut num = num;
        let mut den = den;
        if num.iter().all(|c| *c == 0.0) {
            if den.iter().all(|c| *c == 0.0) {
                return Err(LtiError::Improper);
            }
            return Ok(Self::zero());
        }
        while den.len() > 1 && num.len() > 1 && den[0] == 0.0 && num[0] == 0.0 {
            den.remove(0);
            num.remove(0);
        }
        if den.is_empty() || den[0] == 0.0 || !den[0].is_finite() {
            return Err(LtiError::Improper);
        }
        let d0 = den[0];
        let num = trim(num.iter().map(|c| c / d0).collect());
        let den = trim(den.iter().map(|c| c / d0).collect());
        Ok(TransferFunction { num, den })
    }

    pub fn gain(c: f64) -> Self {
        TransferFunction { num: vec![c], den: vec![1.0] }
    }

    pub fn zero() -> Self {
        Self::gain(0.0)
    }

    /// `z⁻ⁿ`.
    pub fn delay(n: usize) -> Self {
        let mut num = vec![0.0; n + 1];
        num[n] = 1.0;
        TransferFunction { num, den: vec![1.0] }
    }

    pub fn fir(coefs: &[f64]) -> Self {
        TransferFunction { num: trim(coefs.to_vec()), den: vec![1.0] }
    }

    pub fn num(&self) -> &[f64] {
        &self.num
    }

    pub fn den(&self) -> &[f64] {
        &self.den
    }

    pub fn is_zero(&self) -> bool {
        self.num.iter().all(|c| *c == 0.0)
    }

    pub fn add(&self, o: &Self) -> Self {
        let num = poly_add(&poly_mul(&self.num, &o.den), &poly_mul(&o.num, &self.den));
        TransferFunction::new(num, poly_mul(&self.den, &o.den)).expect("product of monic dens")
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.neg())
    }

    pub fn scale(&self, a: f64) -> Self {
        TransferFunction {
            num: trim(self.num.iter().map(|c| c * a).collect()),
            den: self.den.clone(),
        }
    }

    pub fn mul(&self, o: &Self) -> Self {
        TransferFunction::new(poly_mul(&self.num, &o.num), poly_mul(&self.den, &o.den))
            .expect("product of monic dens")
    }

    /// `1/G`; proper only when `G` has a nonzero direct feedthrough.
    pub fn inv(&self) -> Result<Self, LtiError> {
        TransferFunction::new(self.den.clone(), self.num.clone())
    }

    /// Negative feedback `G (1 + G H)⁻¹`.
    pub fn feedback(&self, h: &Self) -> Result<Self, LtiError> {
        let loop_tf = Self::gain(1.0).add(&self.mul(h));
        Ok(self.mul(&loop_tf.inv()?))
    }

    pub fn eval(&self, z: Complex<f64>) -> Complex<f64> {
        let zi = z.inv();
        let horner = |p: &[f64]| {
            p.iter()
                .rev()
                .fold(Complex::new(0.0, 0.0), |acc, c| acc * zi + Complex::new(*c, 0.0))
        };
        horner(&self.num) / horner(&self.den)
    }

    pub fn impulse(&self, n: usize) -> Vec<f64> {
        let mut h = vec![0.0; n];
        for t in 0..n {
            let mut acc = self.num.get(t).copied().unwrap_or(0.0);
            for i in 1..self.den.len().min(t + 1) {
                acc -= self.den[i] * h[t - i];
            }
            h[t] = acc;
        }
        h
    }

    pub fn poles(&self) -> Vec<Complex<f64>> {
        poly_roots(&self.den)
    }

    pub fn pole_radius(&self) -> f64 {
        self.poles().iter().fold(0.0f64, |r, p| r.max(p.norm()))
    }
}

/// `x⁺ = A x + B u`, `y = C x + D u`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl StateSpace {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
    ) -> Result<Self, LtiError> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n {
            return Err(LtiError::Dimension(format!(
                "A {}x{}, B {}x{}, C {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(LtiError::Dimension(format!(
                "D {}x{} against {} outputs, {} inputs",
                d.nrows(),
                d.ncols(),
                c.nrows(),
                b.ncols()
            )));
        }
        Ok(StateSpace { a, b, c, d })
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    /// Markov parameters `D, CB, CAB, …` of channel `(out, inp)`.
    pub fn impulse(&self, out: usize, inp: usize, n: usize) -> Vec<f64> {
        let mut h = Vec::with_capacity(n);
        if n == 0 {
            return h;
        }
        h.push(self.d[(out, inp)]);
        let mut x: DVector<f64> = self.b.column(inp).into_owned();
        for _ in 1..n {
            h.push((self.c.row(out) * &x)[0]);
            x = &self.a * x;
        }
        h
    }

    /// Single-input single-output restriction.
    pub fn channel(&self, out: usize, inp: usize) -> StateSpace {
        StateSpace {
            a: self.a.clone(),
            b: self.b.columns(inp, 1).into_owned(),
            c: self.c.rows(out, 1).into_owned(),
            d: DMatrix::from_element(1, 1, self.d[(out, inp)]),
        }
    }

    /// Trace of the output covariance under unit white inputs.
    pub fn h2_norm_sq(&self) -> Result<f64, LtiError> {
        let rho = spectral_radius(&self.a);
        if rho >= 1.0 {
            return Err(LtiError::Unstable(rho));
        }
        let direct = (&self.d * self.d.transpose()).trace();
        if self.states() == 0 {
            return Ok(direct);
        }
        let p = dlyap(&self.a, &(&self.b * self.b.transpose()));
        Ok((&self.c * p * self.c.transpose()).trace() + direct)
    }

    /// Removes unreachable then unobservable directions (orthogonal projection).
    pub fn minimal(&self) -> StateSpace {
        let tol = 1e-9 * (1.0 + self.a.norm());
        let t = krylov_basis(&self.a, &self.b, tol);
        let a = t.transpose() * &self.a * &t;
        let b = t.transpose() * &self.b;
        let c = &self.c * &t;
        let o = krylov_basis(&a.transpose(), &c.transpose(), tol);
        StateSpace {
            a: o.transpose() * &a * &o,
            b: o.transpose() * b,
            c: c * &o,
            d: self.d.clone(),
        }
    }
}

/// Orthonormal basis of the Krylov space spanned by `B, AB, A²B, …`.
fn krylov_basis(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut frontier: Vec<DVector<f64>> = b.column_iter().map(|c| c.into_owned()).collect();
    while !frontier.is_empty() && basis.len() < n {
        let mut fresh = Vec::new();
        for mut v in frontier {
            let scale = v.norm().max(1.0);
            for _ in 0..2 {
                for q in &basis {
                    let proj = q.dot(&v);
                    v -= q * proj;
                }
            }
            let nv = v.norm();
            if nv > tol * scale && basis.len() < n {
                let q = v / nv;
                basis.push(q.clone());
                fresh.push(q);
            }
        }
        frontier = fresh.iter().map(|q| a * q).collect();
    }
    let mut t = DMatrix::zeros(n, basis.len());
    for (j, q) in basis.iter().enumerate() {
        t.set_column(j, q);
    }
    t
}

/// Solves `X = A X Aᵀ + Q` through the vectorized Kronecker system.
pub fn dlyap(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = DMatrix::identity(n * n, n * n) - a.kronecker(a);
    let rhs = DVector::from_column_slice(q.as_slice());
    let x = m
        .lu()
        .solve(&rhs)
        .expect("stable A gives a nonsingular Lyapunov operator");
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    (&x + x.transpose()) * 0.5
}

/// Controllable-canonical realization with trailing zero orders removed.
pub fn tf_to_ss(tf: &TransferFunction) -> StateSpace {
    let n = (tf.num.len().max(tf.den.len())) - 1;
    let coef = |p: &[f64], i: usize| p.get(i).copied().unwrap_or(0.0);
    let b0 = coef(&tf.num, 0);
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, 1);
    let mut c = DMatrix::zeros(1, n);
    for j in 0..n {
        a[(0, j)] = -coef(&tf.den, j + 1);
        c[(0, j)] = coef(&tf.num, j + 1) - b0 * coef(&tf.den, j + 1);
    }
    for i in 1..n {
        a[(i, i - 1)] = 1.0;
    }
    if n > 0 {
        b[(0, 0)] = 1.0;
    }
    StateSpace { a, b, c, d: DMatrix::from_element(1, 1, b0) }
}

/// Squared H2 norm `Σ h(n)²`.
pub fn h2_norm_sq(tf: &TransferFunction) -> Result<f64, LtiError> {
    if tf.is_zero() {
        return Ok(0.0);
    }
    let r = tf.pole_radius();
    if r >= 1.0 {
        return Err(LtiError::Unstable(r));
    }
    tf_to_ss(tf).h2_norm_sq()
}

/// Generalized plant `[e; y] = [[P11, P12], [P21, P22]] [d; u]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plant {
    pub p11: TransferFunction,
    pub p12: TransferFunction,
    pub p21: TransferFunction,
    pub p22: TransferFunction,
}

impl Plant {
    /// `e = y = G (u + d)`.
    pub fn output_disturbance(g: TransferFunction) -> Self {
        Plant { p11: g.clone(), p12: g.clone(), p21: g.clone(), p22: g }
    }

    /// Minimal joint realization with inputs `[d, u]` and outputs `[e, y]`.
    pub fn realize(&self) -> StateSpace {
        let parts = [
            (tf_to_ss(&self.p11), 0, 0),
            (tf_to_ss(&self.p12), 0, 1),
            (tf_to_ss(&self.p21), 1, 0),
            (tf_to_ss(&self.p22), 1, 1),
        ];
        let n: usize = parts.iter().map(|(s, _, _)| s.states()).sum();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, 2);
        let mut c = DMatrix::zeros(2, n);
        let mut d = DMatrix::zeros(2, 2);
        let mut off = 0;
        for (s, out, inp) in &parts {
            let k = s.states();
            a.view_mut((off, off), (k, k)).copy_from(&s.a);
            b.view_mut((off, *inp), (k, 1)).copy_from(&s.b);
            c.view_mut((*out, off), (1, k)).copy_from(&s.c);
            d[(*out, *inp)] = s.d[(0, 0)];
            off += k;
        }
        StateSpace { a, b, c, d }.minimal()
    }
}

/// Plant, filters and quantizer scaling of the feedback loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedLoopSystem {
    pub plant: Plant,
    pub f: TransferFunction,
    pub lw: TransferFunction,
    pub ly: TransferFunction,
    /// Noise variance at the quantizer.
    pub sigma_q2: f64,
    /// Gain applied before the quantizer and undone after it.
    #[serde(default = "unit")]
    pub beta: f64,
    /// Variance of the white disturbance `d`.
    #[serde(default = "unit")]
    pub sigma_d2: f64,
}

fn unit() -> f64 {
    1.0
}

/// Second-order description of a stabilizing loop.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LoopMetrics {
    pub gamma: f64,
    pub sigma_e2: f64,
    /// Variance at the quantizer input, `β v`.
    pub sigma_v2: f64,
    /// `‖S − 1‖²`.
    pub snorm: f64,
    pub min_rate: f64,
    /// Quantizer-input variance caused by `d`: `β² σ_d² ‖Ly P21 S‖²`.
    pub d2v: f64,
    /// Output variance per unit quantizer-noise variance: `‖P12 F S‖² / β²`.
    pub q2e: f64,
    /// Output variance without quantization noise.
    pub floor: f64,
    pub stabilizing: bool,
}

impl LoopMetrics {
    /// Metrics of the same loop at another quantizer-noise variance.
    pub fn at_noise(&self, sigma_q2: f64) -> LoopMetrics {
        let sigma_v2 = self.snorm * sigma_q2 + self.d2v;
        let gamma = sigma_v2 / sigma_q2;
        LoopMetrics {
            gamma,
            sigma_e2: self.floor + self.q2e * sigma_q2,
            sigma_v2,
            stabilizing: gamma > self.snorm,
            ..self.clone()
        }
    }
}

pub const IN_D: usize = 0;
pub const IN_Q: usize = 1;
pub const OUT_E: usize = 0;
pub const OUT_Y: usize = 1;
pub const OUT_U: usize = 2;
pub const OUT_V: usize = 3;
pub const OUT_W: usize = 4;

/// Decoder output rule for one time step: `w = m v + h w(i−1) + q`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderMode {
    pub m: f64,
    pub h: f64,
}

impl DecoderMode {
    pub const RECEIVED: DecoderMode = DecoderMode { m: 1.0, h: 0.0 };
    pub const ZERO: DecoderMode = DecoderMode { m: 0.0, h: 0.0 };
    pub const HOLD: DecoderMode = DecoderMode { m: 0.0, h: 1.0 };
}

/// Component realizations of the loop.
///
/// State layout: `[x_plant; x_f; x_lw; x_ly; w(i−1)]`. Inputs `[d, q]`, with
/// `q` already scaled to the loop (`q/β`). Outputs `[e, y, u, v, w]`.
#[derive(Clone, Debug)]
pub struct LoopRealization {
    plant: StateSpace,
    f: StateSpace,
    lw: StateSpace,
    ly: StateSpace,
}

impl LoopRealization {
    pub fn states(&self) -> usize {
        self.plant.states() + self.f.states() + self.lw.states() + self.ly.states() + 1
    }

    pub fn plant_states(&self) -> usize {
        self.plant.states()
    }

    pub fn mode(&self, mode: DecoderMode) -> Result<StateSpace, LtiError> {
        let (np, nf, nw, ny) = (
            self.plant.states(),
            self.f.states(),
            self.lw.states(),
            self.ly.states(),
        );
        let n = np + nf + nw + ny + 1;
        let (of, ow, oy, op) = (np, np + nf, np + nf + nw, n - 1);
        let p = &self.plant;
        let (d11, d12, d21, d22) = (p.d[(0, 0)], p.d[(0, 1)], p.d[(1, 0)], p.d[(1, 1)]);
        let (df, dlw, dly) = (self.f.d[(0, 0)], self.lw.d[(0, 0)], self.ly.d[(0, 0)]);

        // Signals s = [y, u, v, w] solve E s = G x + hd d + hq q.
        let e = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, -d22, 0.0, 0.0, //
                0.0, 1.0, 0.0, -df, //
                -dly, 0.0, 1.0, 0.0, //
                0.0, 0.0, -mode.m, 1.0,
            ],
        );
        let mut g = DMatrix::zeros(4, n + 2);
        g.view_mut((0, 0), (1, np)).copy_from(&p.c.rows(1, 1));
        g[(0, n)] = d21;
        g.view_mut((1, of), (1, nf)).copy_from(&self.f.c);
        g.view_mut((2, ow), (1, nw)).copy_from(&self.lw.c);
        g.view_mut((2, oy), (1, ny)).copy_from(&self.ly.c);
        g[(2, op)] = dlw;
        g[(3, op)] = mode.h;
        g[(3, n + 1)] = 1.0;
        let lu = e.lu();
        if lu.determinant().abs() < 1e-12 {
            return Err(LtiError::IllPosed);
        }
        let s = lu.solve(&g).ok_or(LtiError::IllPosed)?;
        let (sy, su, sv, sw) = (s.row(0), s.row(1), s.row(2), s.row(3));

        // Rows of [x⁺ | d, q] over [x | d, q].
        let mut next = DMatrix::zeros(n, n + 2);
        next.view_mut((0, 0), (np, np)).copy_from(&p.a);
        for i in 0..np {
            next[(i, n)] += p.b[(i, 0)];
        }
        for i in 0..np {
            let row = su * p.b[(i, 1)];
            next.row_mut(i).zip_apply(&row, |x, r| *x += r);
        }
        next.view_mut((of, of), (nf, nf)).copy_from(&self.f.a);
        for i in 0..nf {
            let row = sw * self.f.b[(i, 0)];
            next.row_mut(of + i).zip_apply(&row, |x, r| *x += r);
        }
        next.view_mut((ow, ow), (nw, nw)).copy_from(&self.lw.a);
        for i in 0..nw {
            next[(ow + i, op)] += self.lw.b[(i, 0)];
        }
        next.view_mut((oy, oy), (ny, ny)).copy_from(&self.ly.a);
        for i in 0..ny {
            let row = sy * self.ly.b[(i, 0)];
            next.row_mut(oy + i).zip_apply(&row, |x, r| *x += r);
        }
        next.row_mut(op).copy_from(&sw);

        let mut out = DMatrix::zeros(5, n + 2);
        out.view_mut((OUT_E, 0), (1, np)).copy_from(&p.c.rows(0, 1));
        out[(OUT_E, n)] = d11;
        let eu = su * d12;
        out.row_mut(OUT_E).zip_apply(&eu, |x, r| *x += r);
        out.row_mut(OUT_Y).copy_from(&sy);
        out.row_mut(OUT_U).copy_from(&su);
        out.row_mut(OUT_V).copy_from(&sv);
        out.row_mut(OUT_W).copy_from(&sw);

        StateSpace::new(
            next.columns(0, n).into_owned(),
            next.columns(n, 2).into_owned(),
            out.columns(0, n).into_owned(),
            out.columns(n, 2).into_owned(),
        )
    }
}

impl ClosedLoopSystem {
    /// `S = (1 − Lw z⁻¹ − P22 F Ly)⁻¹`.
    pub fn sensitivity(&self) -> Result<TransferFunction, LtiError> {
        let open = self
            .lw
            .mul(&TransferFunction::delay(1))
            .add(&self.plant.p22.mul(&self.f).mul(&self.ly));
        let s = TransferFunction::gain(1.0).sub(&open).inv()?;
        let r = s.pole_radius();
        if r >= 1.0 {
            return Err(LtiError::LoopUnstable(r));
        }
        Ok(s)
    }

    /// `K = F Ly (1 − Lw z⁻¹)⁻¹`.
    pub fn controller(&self) -> TransferFunction {
        let inner = TransferFunction::gain(1.0)
            .sub(&self.lw.mul(&TransferFunction::delay(1)))
            .inv()
            .expect("1 - Lw z^-1 has unit feedthrough");
        self.f.mul(&self.ly).mul(&inner)
    }

    pub fn realization(&self) -> LoopRealization {
        LoopRealization {
            plant: self.plant.realize(),
            f: tf_to_ss(&self.f).minimal(),
            lw: tf_to_ss(&self.lw).minimal(),
            ly: tf_to_ss(&self.ly).minimal(),
        }
    }

    pub fn metrics(&self) -> Result<LoopMetrics, LtiError> {
        let cl = self.realization().mode(DecoderMode::RECEIVED)?;
        let rho = spectral_radius(&cl.a);
        if rho >= 1.0 {
            return Err(LtiError::LoopUnstable(rho));
        }
        let norm = |out, inp| cl.channel(out, inp).h2_norm_sq();
        let snorm = norm(OUT_V, IN_Q)?;
        let lyp21s = norm(OUT_V, IN_D)?;
        let p12fs = norm(OUT_E, IN_Q)?;
        let floor = norm(OUT_E, IN_D)?;
        let b2 = self.beta * self.beta;
        let base = LoopMetrics {
            gamma: 0.0,
            sigma_e2: 0.0,
            sigma_v2: 0.0,
            snorm,
            min_rate: 0.5 * (1.0 + snorm).log2(),
            d2v: b2 * self.sigma_d2 * lyp21s,
            q2e: p12fs / b2,
            floor: self.sigma_d2 * floor,
            stabilizing: false,
        };
        Ok(base.at_noise(self.sigma_q2))
    }

    /// Copy with `β` chosen so that the quantizer input has variance `target`
    /// when the quantizer noise variance is `sigma_q2`.
    pub fn calibrated(&self, target: f64, sigma_q2: f64) -> Result<ClosedLoopSystem, LtiError> {
        let unit = ClosedLoopSystem { beta: 1.0, sigma_q2, ..self.clone() };
        let m = unit.metrics()?;
        let floor = m.snorm * sigma_q2;
        if target <= floor {
            return Err(LtiError::Unreachable { target, floor });
        }
        let beta = ((target - floor) / m.d2v).sqrt();
        Ok(ClosedLoopSystem { beta, ..unit })
    }
}

/// Closed-loop pole pair used by [`example_plant`]'s reference filters.
pub const REFERENCE_POLES: [f64; 2] = [0.3, 0.6];

/// Open-loop plant `0.165 / ((z − 4)(z − 0.5789))` with `e = y`.
pub fn example_plant_tf() -> TransferFunction {
    TransferFunction::new(vec![0.0, 0.0, 0.165], vec![1.0, -4.5789, 2.3156])
        .expect("monic denominator")
}

/// The reference loop: `F = 1`, static `Lw`, first-order FIR `Ly`.
///
/// The filters place the closed-loop poles at [`REFERENCE_POLES`] and give
/// `‖S − 1‖² ≈ 15.098`, just above the bound of 15 set by the pole at 4.
pub fn example_plant() -> ClosedLoopSystem {
    let d = [1.0, -4.5789, 2.3156];
    let phi = [
        1.0,
        -(REFERENCE_POLES[0] + REFERENCE_POLES[1]),
        REFERENCE_POLES[0] * REFERENCE_POLES[1],
    ];
    // D (1 + m1 z⁻¹) − 0.165 z⁻² (x0 + x1 z⁻¹) = Φ.
    let m1 = phi[1] - d[1];
    let x0 = (d[2] + m1 * d[1] - phi[2]) / 0.165;
    let x1 = m1 * d[2] / 0.165;
    ClosedLoopSystem {
        plant: Plant::output_disturbance(example_plant_tf()),
        f: TransferFunction::gain(1.0),
        lw: TransferFunction::gain(-m1),
        ly: TransferFunction::fir(&[x0, x1]),
        sigma_q2: 1.0,
        beta: 1.0,
        sigma_d2: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn direct_sum(h: &[f64]) -> f64 {
        h.iter().map(|x| x * x).sum()
    }

    #[test]
    fn delay_realization() {
        let s = tf_to_ss(&TransferFunction::delay(1));
        assert_eq!(s.a, DMatrix::from_element(1, 1, 0.0));
        assert_eq!(s.b, DMatrix::from_element(1, 1, 1.0));
        assert_eq!(s.c, DMatrix::from_element(1, 1, 1.0));
        assert_eq!(s.d, DMatrix::from_element(1, 1, 0.0));
    }

    #[test]
    fn identity_realization_is_static() {
        let s = tf_to_ss(&TransferFunction::gain(1.0));
        assert_eq!(s.states(), 0);
        assert_eq!(s.d[(0, 0)], 1.0);
    }

    #[test]
    fn geometric_impulse() {
        let tf = TransferFunction::new(vec![1.0], vec![1.0, -0.5]).unwrap();
        let h = tf_to_ss(&tf).impulse(0, 0, 10);
        for (n, x) in h.iter().enumerate() {
            assert_abs_diff_eq!(*x, 0.5f64.powi(n as i32), epsilon = 1e-15);
        }
    }

    #[test]
    fn improper_rejected() {
        assert_eq!(
            TransferFunction::new(vec![1.0], vec![0.0, 1.0]),
            Err(LtiError::Improper)
        );
        // A shared delay is not improper.
        let t = TransferFunction::new(vec![0.0, 2.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(t.num(), &[2.0]);
    }

    #[test]
    fn h2_small_cases() {
        assert_abs_diff_eq!(h2_norm_sq(&TransferFunction::delay(1)).unwrap(), 1.0, epsilon = 1e-12);
        let g = TransferFunction::new(vec![1.0], vec![1.0, -0.5]).unwrap();
        assert_abs_diff_eq!(h2_norm_sq(&g).unwrap(), 4.0 / 3.0, epsilon = 1e-12);
        assert_eq!(h2_norm_sq(&TransferFunction::zero()).unwrap(), 0.0);
        let bad = TransferFunction::new(vec![1.0], vec![1.0, -2.0]).unwrap();
        match h2_norm_sq(&bad) {
            Err(LtiError::Unstable(r)) => assert_abs_diff_eq!(r, 2.0, epsilon = 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sensitivity_trivial_cases() {
        let mut l = example_plant();
        l.lw = TransferFunction::zero();
        l.f = TransferFunction::zero();
        assert_eq!(l.sensitivity().unwrap(), TransferFunction::gain(1.0));
        l.lw = TransferFunction::gain(0.5);
        let s = l.sensitivity().unwrap();
        assert_eq!(s, TransferFunction::new(vec![1.0], vec![1.0, -0.5]).unwrap());
    }

    #[test]
    fn minimal_plant_has_two_states() {
        assert_eq!(example_plant().plant.realize().states(), 2);
    }

    #[test]
    fn example_plant_bounds() {
        let p = example_plant_tf();
        let mut radii: Vec<f64> = p.poles().iter().map(|z| z.norm()).collect();
        radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_abs_diff_eq!(radii[0], 0.5789, epsilon = 1e-12);
        assert_abs_diff_eq!(radii[1], 4.0, epsilon = 1e-12);
        assert_eq!(radii.iter().filter(|r| **r >= 1.0).count(), 1);
        let min_rate = radii[1].log2();
        assert_abs_diff_eq!(min_rate, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(2f64.powf(2.0 * min_rate) - 1.0, 15.0, epsilon = 1e-9);
    }

    #[test]
    fn reference_loop_snorm_above_bound() {
        let m = example_plant().metrics().unwrap();
        assert!(m.snorm > 15.0, "{}", m.snorm);
        assert!(m.min_rate >= 2.0);
    }

    #[test]
    fn sensitivity_norm_agrees_with_state_space() {
        let l = example_plant();
        let s = l.sensitivity().unwrap();
        let s_minus_1 = s.sub(&TransferFunction::gain(1.0));
        let m = l.metrics().unwrap();
        assert_abs_diff_eq!(h2_norm_sq(&s_minus_1).unwrap(), m.snorm, epsilon = 1e-9);
        assert_abs_diff_eq!(direct_sum(&s_minus_1.impulse(4000)), m.snorm, epsilon = 1e-9);
    }

    #[test]
    fn open_loop_metrics() {
        let mut l = example_plant();
        l.plant = Plant::output_disturbance(
            TransferFunction::new(vec![0.0, 1.0], vec![1.0, -0.5]).unwrap(),
        );
        l.f = TransferFunction::zero();
        l.lw = TransferFunction::zero();
        let m = l.metrics().unwrap();
        assert_abs_diff_eq!(m.snorm, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.gamma, m.snorm + m.d2v / l.sigma_q2, epsilon = 1e-12);
        assert_abs_diff_eq!(m.sigma_e2, 4.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.q2e, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gamma_tends_to_snorm_for_large_noise() {
        let l = example_plant();
        let m = l.metrics().unwrap();
        let big = m.at_noise(1e8 * m.d2v);
        assert!((big.gamma - m.snorm).abs() < 1e-3 * m.snorm);
    }

    #[test]
    fn calibration_hits_target() {
        let l = example_plant().calibrated(133.0, 6.3).unwrap();
        let m = l.metrics().unwrap();
        assert_abs_diff_eq!(m.sigma_v2, 133.0, epsilon = 1e-9);
        assert_abs_diff_eq!(m.gamma, 133.0 / 6.3, epsilon = 1e-9);
        assert!(m.gamma >= 15.0);
        // Variance-bound identity σ_v² = γ (γ − ‖S−1‖²)⁻¹ ‖Ly P21 S‖².
        assert_abs_diff_eq!(m.sigma_v2, m.gamma / (m.gamma - m.snorm) * m.d2v, epsilon = 1e-9);
    }

    #[test]
    fn feedback_closes() {
        let g = TransferFunction::new(vec![0.0, 1.0], vec![1.0, -0.5]).unwrap();
        let cl = g.feedback(&TransferFunction::gain(0.5)).unwrap();
        let h = cl.impulse(8);
        for (n, x) in h.iter().enumerate() {
            assert_abs_diff_eq!(*x, if n == 1 { 1.0 } else { 0.0 }, epsilon = 1e-12);
        }
    }
}
