//! Maxwell fields on the torus driven by prescribed charge and current.
//!
//! Per mode the field equations are linear with an anti-Hermitian generator,
//! so each mode is evolved in its eigenbasis: a longitudinal component that
//! only integrates the source, and two transverse waves `exp(±i c|ξ| t)`.
//! The source is interpolated by local cubics across the samples and
//! integrated exactly against the exponential kernel, so the step size is
//! limited by the smoothness of the source only.

use std::collections::HashMap;
use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::spectral::{
    curl_scal, curl_vec, divergence, to_real, to_real_vector, to_spectral, to_spectral_vector, xi,
    xi_norm, GridSpec, ScalarField, SpectralScalar, SpectralVector, VectorField,
};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Relative tolerance on the local charge balance accepted by the solver.
pub const CHARGE_TOL: f64 = 1e-4;
/// Relative tolerance on Gauss's law for initial data.
pub const COMPAT_TOL: f64 = 1e-8;
/// Relative tolerance on the mean current.
pub const ZERO_MEAN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct EMState {
    pub t: f64,
    pub e: VectorField,
    pub b: ScalarField,
    pub c: f64,
}

impl EMState {
    pub fn new(t: f64, e: VectorField, b: ScalarField, c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidInput(format!("speed of light must be positive, got {c}")));
        }
        if e.grid() != b.grid() {
            return Err(Error::GridMismatch);
        }
        Ok(Self { t, e, b, c })
    }

    pub fn zero(grid: GridSpec, c: f64) -> Result<Self> {
        Self::new(0.0, VectorField::zeros(grid), ScalarField::zeros(grid), c)
    }

    pub fn grid(&self) -> GridSpec {
        self.b.grid()
    }

    pub fn to_spectral(&self) -> Result<SpectralState> {
        Ok(SpectralState { t: self.t, e: to_spectral_vector(&self.e)?, b: to_spectral(&self.b)? })
    }
}

/// Field state as coefficient tables.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub t: f64,
    pub e: SpectralVector,
    pub b: SpectralScalar,
}

impl SpectralState {
    pub fn zero(grid: GridSpec) -> Self {
        Self { t: 0.0, e: SpectralVector::zeros(grid), b: SpectralScalar::zeros(grid) }
    }

    pub fn grid(&self) -> GridSpec {
        self.b.grid()
    }

    /// `Σ_k |Ê^k|² + |B̂^k|²`.
    pub fn energy(&self) -> f64 {
        self.e.energy() + self.b.energy()
    }

    pub fn to_real(&self, c: f64) -> EMState {
        EMState { t: self.t, e: to_real_vector(&self.e), b: to_real(&self.b), c }
    }
}

/// Uniformly sampled charge and current.
#[derive(Debug, Clone)]
pub struct SourceMoments {
    pub t0: f64,
    pub dt: f64,
    pub rho: Vec<ScalarField>,
    pub j: Vec<VectorField>,
}

impl SourceMoments {
    pub fn new(t0: f64, dt: f64, rho: Vec<ScalarField>, j: Vec<VectorField>) -> Result<Self> {
        if rho.len() != j.len() {
            return Err(Error::InvalidInput("charge and current sample counts differ".into()));
        }
        if rho.len() < 2 {
            return Err(Error::InvalidInput("at least two time samples are required".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidInput("sample spacing must be positive".into()));
        }
        let grid = rho[0].grid();
        if rho.iter().any(|r| r.grid() != grid) || j.iter().any(|v| v.grid() != grid) {
            return Err(Error::GridMismatch);
        }
        Ok(Self { t0, dt, rho, j })
    }

    pub fn zero(grid: GridSpec, t0: f64, dt: f64, count: usize) -> Result<Self> {
        Self::new(t0, dt, vec![ScalarField::zeros(grid); count], vec![VectorField::zeros(grid); count])
    }

    pub fn from_fn(
        grid: GridSpec,
        t0: f64,
        dt: f64,
        count: usize,
        rho: impl Fn(f64, [f64; 2]) -> f64,
        j: impl Fn(f64, [f64; 2]) -> [f64; 2],
    ) -> Result<Self> {
        let times: Vec<f64> = (0..count).map(|s| t0 + s as f64 * dt).collect();
        Self::new(
            t0,
            dt,
            times.iter().map(|&t| ScalarField::from_fn(grid, |x| rho(t, x))).collect(),
            times.iter().map(|&t| VectorField::from_fn(grid, |x| j(t, x))).collect(),
        )
    }

    pub fn grid(&self) -> GridSpec {
        self.rho[0].grid()
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn end_time(&self) -> f64 {
        self.t0 + (self.len() - 1) as f64 * self.dt
    }

    pub fn spectral(&self) -> Result<SpectralSources> {
        Ok(SpectralSources {
            t0: self.t0,
            dt: self.dt,
            rho: self.rho.iter().map(to_spectral).collect::<Result<_>>()?,
            j: self.j.iter().map(to_spectral_vector).collect::<Result<_>>()?,
        })
    }
}

/// Sampled sources as coefficient tables.
#[derive(Debug, Clone)]
pub struct SpectralSources {
    pub t0: f64,
    pub dt: f64,
    pub rho: Vec<SpectralScalar>,
    pub j: Vec<SpectralVector>,
}

/// Time derivative of a uniformly sampled sequence, second-order everywhere.
fn fd_first<T, F>(samples: &[T], dt: f64, s: usize, comb: F) -> T
where
    F: Fn(&[(f64, &T)]) -> T,
{
    let n = samples.len();
    if n == 2 {
        return comb(&[(-1.0 / dt, &samples[0]), (1.0 / dt, &samples[1])]);
    }
    if s == 0 {
        comb(&[(-1.5 / dt, &samples[0]), (2.0 / dt, &samples[1]), (-0.5 / dt, &samples[2])])
    } else if s == n - 1 {
        comb(&[(0.5 / dt, &samples[n - 3]), (-2.0 / dt, &samples[n - 2]), (1.5 / dt, &samples[n - 1])])
    } else {
        comb(&[(-0.5 / dt, &samples[s - 1]), (0.5 / dt, &samples[s + 1])])
    }
}

/// Second time derivative of a sampled sequence (zero with fewer than three samples).
fn fd_second<T, F>(samples: &[T], dt: f64, s: usize, comb: F) -> Option<T>
where
    F: Fn(&[(f64, &T)]) -> T,
{
    let n = samples.len();
    let h2 = dt * dt;
    if n < 3 {
        return None;
    }
    if n >= 4 && s == 0 {
        return Some(comb(&[
            (2.0 / h2, &samples[0]),
            (-5.0 / h2, &samples[1]),
            (4.0 / h2, &samples[2]),
            (-1.0 / h2, &samples[3]),
        ]));
    }
    if n >= 4 && s == n - 1 {
        return Some(comb(&[
            (-1.0 / h2, &samples[n - 4]),
            (4.0 / h2, &samples[n - 3]),
            (-5.0 / h2, &samples[n - 2]),
            (2.0 / h2, &samples[n - 1]),
        ]));
    }
    let c = s.clamp(1, n - 2);
    Some(comb(&[(1.0 / h2, &samples[c - 1]), (-2.0 / h2, &samples[c]), (1.0 / h2, &samples[c + 1])]))
}

fn comb_c(terms: &[(f64, &Complex64)]) -> Complex64 {
    terms.iter().fold(ZERO, |acc, (w, z)| acc + **z * *w)
}

fn comb_c2(terms: &[(f64, &[Complex64; 2])]) -> [Complex64; 2] {
    terms.iter().fold([ZERO, ZERO], |acc, (w, z)| [acc[0] + z[0] * *w, acc[1] + z[1] * *w])
}

fn comb_scalar(terms: &[(f64, &SpectralScalar)]) -> SpectralScalar {
    let mut out = SpectralScalar::zeros(terms[0].1.grid());
    for (w, z) in terms {
        for (o, v) in out.coeffs_mut().iter_mut().zip(z.coeffs()) {
            *o += v * *w;
        }
    }
    out
}

impl SpectralSources {
    pub fn new(t0: f64, dt: f64, rho: Vec<SpectralScalar>, j: Vec<SpectralVector>) -> Result<Self> {
        if rho.len() != j.len() || rho.len() < 2 {
            return Err(Error::InvalidInput("need at least two matching samples".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidInput("sample spacing must be positive".into()));
        }
        let grid = rho[0].grid();
        if rho.iter().any(|r| r.grid() != grid) || j.iter().any(|v| v.grid() != grid) {
            return Err(Error::GridMismatch);
        }
        Ok(Self { t0, dt, rho, j })
    }

    pub fn zero(grid: GridSpec, t0: f64, dt: f64, count: usize) -> Result<Self> {
        Self::new(t0, dt, vec![SpectralScalar::zeros(grid); count], vec![SpectralVector::zeros(grid); count])
    }

    pub fn grid(&self) -> GridSpec {
        self.rho[0].grid()
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn end_time(&self) -> f64 {
        self.t0 + (self.len() - 1) as f64 * self.dt
    }

    /// `∂ₜρ + div j` at sample `s`.
    pub fn charge_residual_at(&self, s: usize) -> SpectralScalar {
        let drho = fd_first(&self.rho, self.dt, s, comb_scalar);
        drho.axpy(1.0, &divergence(&self.j[s])).expect("same grid")
    }

    /// Sup over samples and nodes of `|∂ₜρ + div j|`.
    pub fn charge_residual(&self) -> f64 {
        (0..self.len()).map(|s| to_real(&self.charge_residual_at(s)).sup_norm()).fold(0.0, f64::max)
    }

    /// Sup over samples of `|∫ j dx|`.
    pub fn zero_mean_residual(&self) -> f64 {
        self.j.iter().map(|j| {
            let m = j.mean();
            m[0].hypot(m[1])
        })
        .fold(0.0, f64::max)
    }

    /// Scale against which relative tolerances are measured.
    fn magnitude(&self) -> f64 {
        let d = self.j.iter().map(|j| to_real(&divergence(j)).sup_norm()).fold(0.0, f64::max);
        let r = self.rho.iter().map(|r| to_real(r).sup_norm()).fold(0.0, f64::max);
        1.0 + d.max(r)
    }

    fn rho_mode(&self, i: usize) -> Vec<Complex64> {
        self.rho.iter().map(|r| r.coeffs()[i]).collect()
    }

    fn j_mode(&self, i: usize) -> Vec<[Complex64; 2]> {
        self.j.iter().map(|j| [j.coeffs(0)[i], j.coeffs(1)[i]]).collect()
    }
}

pub fn check_charge_conservation(src: &SourceMoments) -> Result<f64> {
    Ok(src.spectral()?.charge_residual())
}

pub fn check_zero_mean_current(src: &SourceMoments) -> f64 {
    src.j.iter().map(|j| {
        let m = j.mean();
        m[0].hypot(m[1])
    })
    .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompatibilityReport {
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Gauss-law residual `div E − (ρ − ∫ρ)`.
pub fn check_compatibility(state: &EMState, rho0: &ScalarField) -> Result<CompatibilityReport> {
    if state.grid() != rho0.grid() {
        return Err(Error::GridMismatch);
    }
    let e = to_spectral_vector(&state.e)?;
    let rho = to_spectral(rho0)?;
    Ok(gauss_report(&e, &rho))
}

fn gauss_report(e: &SpectralVector, rho: &SpectralScalar) -> CompatibilityReport {
    let mut res = divergence(e).axpy(-1.0, rho).expect("same grid");
    if let Some(i) = res.grid().mode_index([0, 0]) {
        res.coeffs_mut()[i] = ZERO;
    }
    let max_residual = to_real(&res).sup_norm();
    let tolerance = COMPAT_TOL * (1.0 + to_real(rho).sup_norm());
    CompatibilityReport { max_residual, tolerance, pass: max_residual < tolerance }
}

/// `∫₀ʰ exp(λ(h−τ)) τᵖ dτ` for `p = 0..=3`.
fn kernel_moments(lambda: Complex64, h: f64) -> [Complex64; 4] {
    let z = lambda * h;
    let mut out = [ZERO; 4];
    if z.norm() <= 4.0 {
        let mut fact = 1.0;
        for (p, slot) in out.iter_mut().enumerate() {
            if p > 0 {
                fact *= p as f64;
            }
            // p! Σ_m λ^m h^{m+p+1} / (m+p+1)!
            let mut term = Complex64::new(h.powi(p as i32 + 1) / (1..=p + 1).map(|q| q as f64).product::<f64>(), 0.0);
            let mut sum = term;
            for m in 0..200 {
                term = term * z / (m + p + 2) as f64;
                sum += term;
                if term.norm() <= 1e-18 * sum.norm() {
                    break;
                }
            }
            *slot = sum * fact;
        }
    } else {
        let e = z.exp();
        out[0] = (e - 1.0) / lambda;
        for p in 1..4 {
            out[p] = (out[p - 1] * p as f64 - h.powi(p as i32)) / lambda;
        }
    }
    out
}

/// Monomial coefficients (in τ) of the Lagrange basis on nodes `τ_q`.
fn lagrange_monomials(nodes: &[f64]) -> Vec<[f64; 4]> {
    let m = nodes.len();
    (0..m)
        .map(|q| {
            let mut poly = [0.0; 4];
            poly[0] = 1.0;
            let mut deg = 0;
            for (r, &tr) in nodes.iter().enumerate() {
                if r == q {
                    continue;
                }
                let denom = nodes[q] - tr;
                let mut next = [0.0; 4];
                for d in 0..=deg {
                    next[d + 1] += poly[d] / denom;
                    next[d] -= poly[d] * tr / denom;
                }
                poly = next;
                deg += 1;
            }
            poly
        })
        .collect()
}

/// Quadrature weights for one step: `z(h) = e^{λh} z(0) + Σ_q w_q σ(t_q)`.
#[derive(Debug, Clone)]
struct StepWeights {
    propagator: Complex64,
    weights: Vec<Complex64>,
}

/// Stencil of up to four consecutive samples covering `[s, s+1]`.
fn stencil(len: usize, s: usize) -> usize {
    let width = len.min(4);
    s.saturating_sub(1).min(len - width)
}

fn step_weights(lambda: Complex64, dt: f64, len: usize, s: usize, h: f64) -> StepWeights {
    let first = stencil(len, s);
    let width = len.min(4);
    let nodes: Vec<f64> = (first..first + width).map(|q| (q as f64 - s as f64) * dt).collect();
    let mono = lagrange_monomials(&nodes);
    let moments = kernel_moments(lambda, h);
    let weights = mono
        .iter()
        .map(|poly| poly.iter().zip(&moments).fold(ZERO, |acc, (a, m)| acc + m * *a))
        .collect();
    StepWeights { propagator: (lambda * h).exp(), weights }
}

/// Step plan shared by all modes with the same eigenvalue.
struct StepPlan {
    /// (sample index at the step start, step length)
    steps: Vec<(usize, f64)>,
}

fn step_plan(src_len: usize, dt: f64, t_offset: f64, duration: f64) -> Result<StepPlan> {
    let available = (src_len - 1) as f64 * dt;
    if t_offset < -1e-12 * dt || t_offset + duration > available + 1e-9 * dt {
        return Err(Error::InvalidInput(format!(
            "requested interval [{t_offset}, {}] exceeds sampled source range [0, {available}]",
            t_offset + duration
        )));
    }
    let start = (t_offset / dt).round();
    if (t_offset - start * dt).abs() > 1e-9 * dt {
        return Err(Error::InvalidInput("initial time must coincide with a source sample".into()));
    }
    let start = start as usize;
    let full = ((duration / dt) * (1.0 + 1e-12)).floor() as usize;
    let mut steps: Vec<(usize, f64)> = (0..full).map(|q| (start + q, dt)).collect();
    let rest = duration - full as f64 * dt;
    if rest > 1e-12 * dt {
        let s = (start + full).min(src_len - 2);
        steps.push((s, rest));
    }
    Ok(StepPlan { steps })
}

struct WeightCache {
    dt: f64,
    len: usize,
    cache: HashMap<(u64, usize, u64), StepWeights>,
}

impl WeightCache {
    fn new(dt: f64, len: usize) -> Self {
        Self { dt, len, cache: HashMap::new() }
    }

    fn get(&mut self, freq: f64, s: usize, h: f64) -> &StepWeights {
        let first = stencil(self.len, s);
        // weights depend only on where `s` sits inside its stencil
        let key = (freq.to_bits(), s - first, h.to_bits());
        let (dt, len) = (self.dt, self.len);
        self.cache.entry(key).or_insert_with(|| step_weights(Complex64::new(0.0, freq), dt, len, s, h))
    }
}

/// Evolves the spectral state exactly per mode, calling `observe` after each step.
///
/// `state0.t` must coincide with a source sample. No consistency checks are
/// performed; see [`evolve_maxwell`] for the checked entry point.
pub fn evolve_spectral(
    state0: &SpectralState,
    c: f64,
    src: &SpectralSources,
    t_end: f64,
    mut observe: impl FnMut(&SpectralState),
) -> Result<SpectralState> {
    let grid = state0.grid();
    if src.grid() != grid {
        return Err(Error::GridMismatch);
    }
    let plan = step_plan(src.len(), src.dt, state0.t - src.t0, t_end - state0.t)?;
    let mut cache = WeightCache::new(src.dt, src.len());
    let modes: Vec<(usize, [i64; 2])> = grid.modes().collect();
    // Eigen-coordinates per mode: (longitudinal, +wave, −wave); mode 0 uses (E1, E2, b).
    let mut z: Vec<[Complex64; 3]> = modes
        .iter()
        .map(|&(i, k)| {
            let e = [state0.e.coeffs(0)[i], state0.e.coeffs(1)[i]];
            let b = state0.b.coeffs()[i];
            to_eigen(k, e, b)
        })
        .collect();
    let mut sources: Vec<Vec<[Complex64; 3]>> = Vec::with_capacity(modes.len());
    for &(i, k) in &modes {
        sources.push(src.j_mode(i).iter().map(|j| source_eigen(k, *j)).collect());
    }
    let mut current = state0.clone();
    let mut t = state0.t;
    for &(s, h) in &plan.steps {
        for (m, &(_, k)) in modes.iter().enumerate() {
            let omega = c * xi_norm(k);
            let first = stencil(src.len(), s);
            let freqs = [0.0, omega, -omega];
            for comp in 0..3 {
                if k == [0, 0] && comp == 2 {
                    continue;
                }
                let w = cache.get(freqs[comp], s, h);
                let mut acc = w.propagator * z[m][comp];
                for (q, wq) in w.weights.iter().enumerate() {
                    acc += wq * sources[m][first + q][comp];
                }
                z[m][comp] = acc;
            }
        }
        t += h;
        current = from_eigen_state(grid, &modes, &z, t);
        observe(&current);
    }
    Ok(current)
}

/// Mode coordinates in which the generator is diagonal.
fn to_eigen(k: [i64; 2], e: [Complex64; 2], b: Complex64) -> [Complex64; 3] {
    if k == [0, 0] {
        return [e[0], e[1], b];
    }
    let (u, n) = frame(k);
    let long = e[0] * u[0] + e[1] * u[1];
    let a = e[0] * n[0] + e[1] * n[1];
    [long, (a + b) * FRAC_1_SQRT_2, (a - b) * FRAC_1_SQRT_2]
}

/// Source `(−ĵ, 0)` in the same coordinates.
fn source_eigen(k: [i64; 2], j: [Complex64; 2]) -> [Complex64; 3] {
    if k == [0, 0] {
        return [-j[0], -j[1], ZERO];
    }
    let (u, n) = frame(k);
    let long = -(j[0] * u[0] + j[1] * u[1]);
    let a = -(j[0] * n[0] + j[1] * n[1]);
    [long, a * FRAC_1_SQRT_2, a * FRAC_1_SQRT_2]
}

fn from_eigen(k: [i64; 2], z: [Complex64; 3]) -> ([Complex64; 2], Complex64) {
    if k == [0, 0] {
        return ([z[0], z[1]], z[2]);
    }
    let (u, n) = frame(k);
    let a = (z[1] + z[2]) * FRAC_1_SQRT_2;
    let b = (z[1] - z[2]) * FRAC_1_SQRT_2;
    ([z[0] * u[0] + a * n[0], z[0] * u[1] + a * n[1]], b)
}

/// Unit wave vector and its clockwise normal `(ξ₂, −ξ₁)/|ξ|`.
fn frame(k: [i64; 2]) -> ([f64; 2], [f64; 2]) {
    let x = xi(k);
    let r = x[0].hypot(x[1]);
    ([x[0] / r, x[1] / r], [x[1] / r, -x[0] / r])
}

fn from_eigen_state(grid: GridSpec, modes: &[(usize, [i64; 2])], z: &[[Complex64; 3]], t: f64) -> SpectralState {
    let mut e = SpectralVector::zeros(grid);
    let mut b = SpectralScalar::zeros(grid);
    for (m, &(i, k)) in modes.iter().enumerate() {
        let (ek, bk) = from_eigen(k, z[m]);
        e.coeffs_mut(0)[i] = ek[0];
        e.coeffs_mut(1)[i] = ek[1];
        b.coeffs_mut()[i] = bk;
    }
    SpectralState { t, e, b }
}

/// Checked evolution; returns the state after every step, ending at `t_end`.
pub fn evolve_maxwell(state0: &EMState, src: &SourceMoments, t_end: f64) -> Result<Vec<EMState>> {
    if state0.grid() != src.grid() {
        return Err(Error::GridMismatch);
    }
    let ssrc = src.spectral()?;
    let offset = ((state0.t - src.t0) / src.dt).round() as usize;
    let rho0 = ssrc
        .rho
        .get(offset)
        .ok_or_else(|| Error::InvalidInput("initial time outside source range".into()))?;
    let s0 = state0.to_spectral()?;
    let compat = gauss_report(&s0.e, rho0);
    if !compat.pass {
        return Err(Error::Precondition(format!(
            "initial field violates Gauss's law: residual {:.3e} ≥ {:.3e}",
            compat.max_residual, compat.tolerance
        )));
    }
    let residual = ssrc.charge_residual();
    let tol = CHARGE_TOL * ssrc.magnitude();
    if residual > tol {
        return Err(Error::Precondition(format!(
            "sources violate local charge conservation: residual {residual:.3e} > {tol:.3e}"
        )));
    }
    let mut out = Vec::new();
    let c = state0.c;
    evolve_spectral(&s0, c, &ssrc, t_end, |s| out.push(s.to_real(c)))?;
    Ok(out)
}

/// Electrostatic field `E_∞` with `div E_∞ = ρ − ∫ρ`, curl-free and zero-mean.
pub fn solve_poisson(rho: &ScalarField) -> Result<VectorField> {
    Ok(to_real_vector(&poisson_spectral(&to_spectral(rho)?)))
}

pub fn poisson_spectral(rho: &SpectralScalar) -> SpectralVector {
    let grid = rho.grid();
    let mut e = SpectralVector::zeros(grid);
    for (i, k) in grid.modes() {
        if k == [0, 0] {
            continue;
        }
        let x = xi(k);
        let r2 = x[0] * x[0] + x[1] * x[1];
        let z = rho.coeffs()[i];
        e.coeffs_mut(0)[i] = -I * x[0] * z / r2;
        e.coeffs_mut(1)[i] = -I * x[1] * z / r2;
    }
    e
}

/// Oscillating remainders of the large-`c` expansion, built from initial data.
#[derive(Debug, Clone)]
pub struct TildeFields {
    c: f64,
    /// `Ê(0) − Ê_∞(0)` with mode 0 removed.
    e_offset: SpectralVector,
    b0: SpectralScalar,
}

pub fn compute_tilde_fields(e0: &VectorField, b0: &ScalarField, rho0: &ScalarField, c: f64) -> Result<TildeFields> {
    if e0.grid() != b0.grid() || e0.grid() != rho0.grid() {
        return Err(Error::GridMismatch);
    }
    tilde_from_spectral(&to_spectral_vector(e0)?, &to_spectral(b0)?, &to_spectral(rho0)?, c)
}

pub fn tilde_from_spectral(
    e0: &SpectralVector,
    b0: &SpectralScalar,
    rho0: &SpectralScalar,
    c: f64,
) -> Result<TildeFields> {
    if !(c > 0.0) {
        return Err(Error::InvalidInput("speed of light must be positive".into()));
    }
    let mut e_offset = e0.axpy(-1.0, &poisson_spectral(rho0))?;
    let mut b0 = b0.clone();
    if let Some(i) = b0.grid().mode_index([0, 0]) {
        e_offset.coeffs_mut(0)[i] = ZERO;
        e_offset.coeffs_mut(1)[i] = ZERO;
        b0.coeffs_mut()[i] = ZERO;
    }
    Ok(TildeFields { c, e_offset, b0 })
}

impl TildeFields {
    pub fn spectral_at(&self, t: f64) -> (SpectralVector, SpectralScalar) {
        let grid = self.b0.grid();
        let mut e = SpectralVector::zeros(grid);
        let mut b = SpectralScalar::zeros(grid);
        for (i, k) in grid.modes() {
            if k == [0, 0] {
                continue;
            }
            let r = xi_norm(k);
            let x = xi(k);
            let (sin, cos) = (t * self.c * r).sin_cos();
            let bk = self.b0.coeffs()[i];
            let ek = [self.e_offset.coeffs(0)[i], self.e_offset.coeffs(1)[i]];
            e.coeffs_mut(0)[i] = ek[0] * cos + I * (x[1] / r) * bk * sin;
            e.coeffs_mut(1)[i] = ek[1] * cos - I * (x[0] / r) * bk * sin;
            let wedge = (ek[1] * x[0] - ek[0] * x[1]) / r;
            b.coeffs_mut()[i] = bk * cos - I * wedge * sin;
        }
        (e, b)
    }

    pub fn at(&self, t: f64) -> (VectorField, ScalarField) {
        let (e, b) = self.spectral_at(t);
        (to_real_vector(&e), to_real(&b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApproxBound {
    /// Constant of the magnetic estimate.
    pub c_rho_j: f64,
    /// Constant of the electric estimate.
    pub c_prime_rho_j: f64,
}

impl ApproxBound {
    pub fn electric(&self, t: f64, c: f64) -> f64 {
        self.c_prime_rho_j * (t + 1.0) / c
    }

    pub fn magnetic(&self, t: f64, c: f64) -> f64 {
        self.c_rho_j * (t + 1.0) / c
    }
}

pub fn approx_constants(src: &SourceMoments) -> Result<ApproxBound> {
    Ok(approx_constants_spectral(&src.spectral()?))
}

pub fn approx_constants_spectral(src: &SpectralSources) -> ApproxBound {
    let grid = src.grid();
    let dt = src.dt;
    let mut c_b = 0.0;
    let mut c_e = 0.0;
    for (i, k) in grid.modes() {
        if k == [0, 0] {
            continue;
        }
        let r = xi_norm(k);
        let rho = src.rho_mode(i);
        let j = src.j_mode(i);
        let n = rho.len();
        let norm2 = |z: [Complex64; 2]| (z[0].norm_sqr() + z[1].norm_sqr()).sqrt();
        let sup_j = j.iter().map(|z| norm2(*z)).fold(0.0, f64::max);
        let sup_dj = (0..n).map(|s| norm2(fd_first(&j, dt, s, comb_c2))).fold(0.0, f64::max);
        let sup_drho = (0..n).map(|s| fd_first(&rho, dt, s, comb_c).norm()).fold(0.0, f64::max);
        let sup_ddrho = (0..n)
            .filter_map(|s| fd_second(&rho, dt, s, comb_c))
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        c_b += (2.0 * sup_j + sup_dj) / r;
        c_e += (sup_ddrho + sup_drho) / (r * r) + (sup_j + sup_dj) / r;
    }
    ApproxBound { c_rho_j: c_b, c_prime_rho_j: c_e }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApproxRow {
    pub c: f64,
    pub t: f64,
    pub err_e: f64,
    pub err_b: f64,
    pub bound_e: f64,
    pub bound_b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApproxSummary {
    pub c: f64,
    pub sup_err_e: f64,
    pub sup_err_b: f64,
    /// `sup_err_e · c / (T + 1)`.
    pub scaled_err_e: f64,
    pub scaled_err_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApproxTable {
    pub bound: ApproxBound,
    pub rows: Vec<ApproxRow>,
    pub summary: Vec<ApproxSummary>,
    pub slope_e: f64,
    pub slope_b: f64,
    pub within_bound: bool,
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Measures the large-`c` expansion error for each speed of light in `c_list`.
pub fn verify_approx_lemma(state0: &EMState, src: &SourceMoments, c_list: &[f64], t_end: f64) -> Result<ApproxTable> {
    let ssrc = src.spectral()?;
    let zm = ssrc.zero_mean_residual();
    if zm > ZERO_MEAN_TOL * ssrc.magnitude() {
        return Err(Error::Precondition(format!("current has nonzero mean ({zm:.3e}); mode 0 identity fails")));
    }
    if c_list.is_empty() {
        return Err(Error::InvalidInput("empty list of light speeds".into()));
    }
    let s0 = state0.to_spectral()?;
    let offset = ((state0.t - src.t0) / src.dt).round() as usize;
    let rho0 = ssrc.rho.get(offset).ok_or_else(|| Error::InvalidInput("initial time outside source range".into()))?;
    let bound = approx_constants_spectral(&ssrc);
    let mean_e = s0.e.get([0, 0]);
    let mean_b = s0.b.get([0, 0]);
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &c in c_list {
        let state = EMState { c, ..state0.clone() };
        let trajectory = evolve_maxwell(&state, src, t_end)?;
        let tilde = tilde_from_spectral(&s0.e, &s0.b, rho0, c)?;
        let (mut sup_e, mut sup_b) = (0.0f64, 0.0f64);
        let mut push = |t: f64, err_e: f64, err_b: f64| {
            let elapsed = t - state0.t;
            sup_e = sup_e.max(err_e);
            sup_b = sup_b.max(err_b);
            rows.push(ApproxRow {
                c,
                t,
                err_e,
                err_b,
                bound_e: bound.electric(elapsed, c),
                bound_b: bound.magnetic(elapsed, c),
            });
        };
        let (e_t, b_t) = tilde.spectral_at(0.0);
        let (err_e, err_b) = expansion_error(&s0, &poisson_spectral(rho0), &e_t, &b_t, mean_e, mean_b);
        push(state0.t, err_e, err_b);
        for st in &trajectory {
            let s = ((st.t - src.t0) / src.dt).round() as usize;
            let rho = &ssrc.rho[s.min(ssrc.len() - 1)];
            let spec = st.to_spectral()?;
            let (e_t, b_t) = tilde.spectral_at(st.t - state0.t);
            let (err_e, err_b) = expansion_error(&spec, &poisson_spectral(rho), &e_t, &b_t, mean_e, mean_b);
            push(st.t, err_e, err_b);
        }
        let horizon = t_end - state0.t;
        summary.push(ApproxSummary {
            c,
            sup_err_e: sup_e,
            sup_err_b: sup_b,
            scaled_err_e: sup_e * c / (horizon + 1.0),
            scaled_err_b: sup_b * c / (horizon + 1.0),
        });
    }
    let cs: Vec<f64> = summary.iter().map(|s| s.c).collect();
    let (slope_e, slope_b) = if cs.len() >= 2 {
        (
            log_log_slope(&cs, &summary.iter().map(|s| s.sup_err_e).collect::<Vec<_>>()),
            log_log_slope(&cs, &summary.iter().map(|s| s.sup_err_b).collect::<Vec<_>>()),
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    let within_bound = rows.iter().all(|r| r.err_e <= r.bound_e && r.err_b <= r.bound_b);
    Ok(ApproxTable { bound, rows, summary, slope_e, slope_b, within_bound })
}

fn expansion_error(
    state: &SpectralState,
    e_inf: &SpectralVector,
    e_tilde: &SpectralVector,
    b_tilde: &SpectralScalar,
    mean_e: [Complex64; 2],
    mean_b: Complex64,
) -> (f64, f64) {
    let mut de = state.e.axpy(-1.0, e_inf).and_then(|d| d.axpy(-1.0, e_tilde)).expect("same grid");
    let mut db = state.b.axpy(-1.0, b_tilde).expect("same grid");
    if let Some(i) = db.grid().mode_index([0, 0]) {
        de.coeffs_mut(0)[i] -= mean_e[0];
        de.coeffs_mut(1)[i] -= mean_e[1];
        db.coeffs_mut()[i] -= mean_b;
    }
    (to_real_vector(&de).sup_norm(), to_real(&db).sup_norm())
}

/// Classical fourth-order Runge–Kutta stepping of the spectral field
/// equations with a current given in closed form; used as an oracle.
pub fn rk4_reference(
    state0: &SpectralState,
    c: f64,
    current: impl Fn(f64) -> SpectralVector,
    t_end: f64,
    dt: f64,
) -> SpectralState {
    let grid = state0.grid();
    let rhs = |t: f64, e: &SpectralVector, b: &SpectralScalar| -> (SpectralVector, SpectralScalar) {
        let j = current(t);
        let de = curl_scal(b).scaled(c).axpy(-1.0, &j).expect("same grid");
        let db = curl_vec(e).scaled(-c);
        (de, db)
    };
    let steps = ((t_end - state0.t) / dt).round().max(1.0) as usize;
    let h = (t_end - state0.t) / steps as f64;
    let mut e = state0.e.clone();
    let mut b = state0.b.clone();
    let mut t = state0.t;
    for _ in 0..steps {
        let (k1e, k1b) = rhs(t, &e, &b);
        let (k2e, k2b) = rhs(t + h / 2.0, &e.axpy(h / 2.0, &k1e).unwrap(), &b.axpy(h / 2.0, &k1b).unwrap());
        let (k3e, k3b) = rhs(t + h / 2.0, &e.axpy(h / 2.0, &k2e).unwrap(), &b.axpy(h / 2.0, &k2b).unwrap());
        let (k4e, k4b) = rhs(t + h, &e.axpy(h, &k3e).unwrap(), &b.axpy(h, &k3b).unwrap());
        let comb_e = k1e.axpy(2.0, &k2e).and_then(|v| v.axpy(2.0, &k3e)).and_then(|v| v.axpy(1.0, &k4e)).unwrap();
        let comb_b = k1b.axpy(2.0, &k2b).and_then(|v| v.axpy(2.0, &k3b)).and_then(|v| v.axpy(1.0, &k4b)).unwrap();
        e = e.axpy(h / 6.0, &comb_e).unwrap();
        b = b.axpy(h / 6.0, &comb_b).unwrap();
        t += h;
    }
    let _ = grid;
    SpectralState { t, e, b }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid() -> GridSpec {
        GridSpec::new(16, 4).unwrap()
    }

    fn single_mode_state(g: GridSpec) -> SpectralState {
        let mut s = SpectralState::zero(g);
        // transverse E along (0,1) for k = (1,0) plus some B
        let mut e2 = SpectralScalar::zeros(g);
        e2.set_real_mode([1, 0], Complex64::new(0.3, 0.1)).unwrap();
        s.e = SpectralVector::from_components(SpectralScalar::zeros(g), e2).unwrap();
        s.b.set_real_mode([1, 0], Complex64::new(-0.2, 0.4)).unwrap();
        s
    }

    #[test]
    fn kernel_moments_match_quadrature() {
        for &(lam, h) in &[(Complex64::new(0.0, 0.3), 0.7), (Complex64::new(0.0, -40.0), 0.2), (Complex64::new(0.0, 0.0), 1.3)] {
            let m = kernel_moments(lam, h);
            for p in 0..4 {
                let n = 20000;
                let mut sum = ZERO;
                for q in 0..n {
                    let tau = (q as f64 + 0.5) * h / n as f64;
                    sum += (lam * (h - tau)).exp() * tau.powi(p as i32) * (h / n as f64);
                }
                assert!((sum - m[p]).norm() < 1e-7 * (1.0 + m[p].norm()), "{lam} {h} {p}");
            }
        }
        // continuity across the series/recursion switch
        let a = kernel_moments(Complex64::new(0.0, 3.9999999), 1.0);
        let b = kernel_moments(Complex64::new(0.0, 4.0000001), 1.0);
        for p in 0..4 {
            assert!((a[p] - b[p]).norm() < 1e-6);
        }
    }

    #[test]
    fn zero_stays_zero() {
        let g = grid();
        let src = SourceMoments::zero(g, 0.0, 0.1, 11).unwrap();
        let out = evolve_maxwell(&EMState::zero(g, 1.0).unwrap(), &src, 1.0).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|s| s.e.sup_norm() == 0.0 && s.b.sup_norm() == 0.0));
    }

    #[test]
    fn homogeneous_energy_and_plane_wave() {
        let g = grid();
        let s0 = single_mode_state(g);
        let src = SpectralSources::zero(g, 0.0, 0.05, 201).unwrap();
        let e0 = s0.energy();
        let mut worst: f64 = 0.0;
        let end = evolve_spectral(&s0, 1.3, &src, 10.0, |s| worst = worst.max((s.energy() - e0).abs())).unwrap();
        assert!(worst < 1e-12 * e0);
        // analytic: a(t) = a0 cos ωt + i b0 sin ωt with a = n·E, n = (0,-1) for k=(1,0)
        let omega = 1.3 * 2.0 * PI;
        let a0 = -Complex64::new(0.3, 0.1);
        let b0 = Complex64::new(-0.2, 0.4);
        let (sn, cs) = (omega * 10.0).sin_cos();
        let a = a0 * cs + I * b0 * sn;
        let b = b0 * cs + I * a0 * sn;
        assert!((end.e.get([1, 0])[1] + a).norm() < 1e-12);
        assert!((end.b.get([1, 0]) - b).norm() < 1e-12);
    }

    #[test]
    fn mode_zero_integrates_mean_current() {
        let g = grid();
        let t_end = 2.0;
        let src = SourceMoments::from_fn(g, 0.0, 0.1, 21, |_, _| 1.0, |_, _| [-1.0 / t_end, 0.0]).unwrap();
        let out = evolve_maxwell(&EMState::zero(g, 3.0).unwrap(), &src, t_end).unwrap();
        let last = out.last().unwrap();
        assert!((last.t - t_end).abs() < 1e-12);
        let m = last.e.mean();
        assert!((m[0] - 1.0).abs() < 1e-12 && m[1].abs() < 1e-12);
        assert!(last.e.max_abs_diff(&VectorField::constant(g, [1.0, 0.0])).unwrap() < 1e-12);
    }

    /// Smooth charge-conserving source with a single longitudinal and a single transverse mode.
    fn wave_source(g: GridSpec, dt: f64, count: usize) -> SourceMoments {
        let rho = |t: f64, x: [f64; 2]| 1.0 + 0.3 * (2.0 * t).sin() * (2.0 * PI * x[0]).cos();
        // ∂ₜρ = 0.6 cos 2t cos(2πx₁) = −div j with j₁ = −0.6 cos 2t sin(2πx₁)/(2π)
        let j = |t: f64, x: [f64; 2]| {
            [
                -0.6 * (2.0 * t).cos() * (2.0 * PI * x[0]).sin() / (2.0 * PI) + 0.2 * t.cos() * (2.0 * PI * x[1]).cos(),
                0.0,
            ]
        };
        SourceMoments::from_fn(g, 0.0, dt, count, rho, j).unwrap()
    }

    #[test]
    fn charge_checks() {
        let g = grid();
        let src = SourceMoments::from_fn(g, 0.0, 0.1, 5, |_, _| 1.0, |_, _| [0.0, 0.0]).unwrap();
        assert_eq!(check_charge_conservation(&src).unwrap(), 0.0);
        assert_eq!(check_zero_mean_current(&src), 0.0);
        let src = wave_source(g, 0.01, 101);
        assert!(check_charge_conservation(&src).unwrap() < 1e-4);
        let src = SourceMoments::from_fn(g, 0.0, 0.1, 3, |_, _| 1.0, |_, _| [1.0, 0.0]).unwrap();
        assert!((check_zero_mean_current(&src) - 1.0).abs() < 1e-15);
        let bad = SourceMoments::from_fn(g, 0.0, 0.1, 11, |t, x| 1.0 + t * (2.0 * PI * x[0]).cos(), |_, _| [0.0, 0.0]).unwrap();
        let e0 = EMState::zero(g, 1.0).unwrap();
        let e0 = EMState { e: solve_poisson(&bad.rho[0]).unwrap(), ..e0 };
        assert!(matches!(evolve_maxwell(&e0, &bad, 1.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn compatibility_checks() {
        let g = grid();
        let rho = ScalarField::constant(g, 2.0);
        assert_eq!(check_compatibility(&EMState::zero(g, 1.0).unwrap(), &rho).unwrap().max_residual, 0.0);
        let rho = ScalarField::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * (x[0] + 2.0 * x[1])).sin());
        let st = EMState::new(0.0, solve_poisson(&rho).unwrap(), ScalarField::zeros(g), 1.0).unwrap();
        assert!(check_compatibility(&st, &rho).unwrap().max_residual < 1e-10);
        let st = EMState::new(0.0, VectorField::constant(g, [1.0, 0.0]), ScalarField::zeros(g), 1.0).unwrap();
        let report = check_compatibility(&st, &ScalarField::constant(g, 1.0)).unwrap();
        assert!(report.pass && report.max_residual == 0.0);
    }

    #[test]
    fn poisson_single_mode() {
        let g = grid();
        assert_eq!(solve_poisson(&ScalarField::constant(g, 1.0)).unwrap().sup_norm(), 0.0);
        let rho = ScalarField::from_fn(g, |x| 1.0 + (2.0 * PI * x[0]).cos());
        let e = solve_poisson(&rho).unwrap();
        let want = VectorField::from_fn(g, |x| [(2.0 * PI * x[0]).sin() / (2.0 * PI), 0.0]);
        assert!(e.max_abs_diff(&want).unwrap() < 1e-14);
        let se = to_spectral_vector(&e).unwrap();
        assert!(to_real(&curl_vec(&se)).sup_norm() < 1e-12);
        let m = e.mean();
        assert!(m[0].abs() < 1e-15 && m[1].abs() < 1e-15);
    }

    #[test]
    fn gauss_law_is_preserved() {
        let g = grid();
        let src = wave_source(g, 0.01, 301);
        let e0 = solve_poisson(&src.rho[0]).unwrap();
        let b0 = ScalarField::from_fn(g, |x| 0.1 * (2.0 * PI * x[1]).sin());
        let st = EMState::new(0.0, e0, b0, 2.0).unwrap();
        let out = evolve_maxwell(&st, &src, 3.0).unwrap();
        for (s, state) in out.iter().enumerate() {
            let r = check_compatibility(state, &src.rho[s + 1]).unwrap();
            assert!(r.max_residual < 1e-8, "step {s}: {}", r.max_residual);
        }
    }

    #[test]
    fn matches_rk4_with_source() {
        let g = grid();
        let dt = 0.005;
        let src = wave_source(g, dt, 401);
        let b0 = ScalarField::from_fn(g, |x| 0.1 * (2.0 * PI * (x[0] - x[1])).sin());
        let st = EMState::new(0.0, solve_poisson(&src.rho[0]).unwrap(), b0, 1.0).unwrap();
        let exact = evolve_maxwell(&st, &src, 2.0).unwrap().pop().unwrap().to_spectral().unwrap();
        let current = |t: f64| {
            to_spectral_vector(&VectorField::from_fn(g, |x| {
                [
                    -0.6 * (2.0 * t).cos() * (2.0 * PI * x[0]).sin() / (2.0 * PI) + 0.2 * t.cos() * (2.0 * PI * x[1]).cos(),
                    0.0,
                ]
            }))
            .unwrap()
        };
        let reference = rk4_reference(&st.to_spectral().unwrap(), 1.0, current, 2.0, 2e-4);
        let diff = reference.e.axpy(-1.0, &exact.e).unwrap().energy() + reference.b.axpy(-1.0, &exact.b).unwrap().energy();
        assert!(diff.sqrt() < 1e-8 * exact.energy().sqrt(), "{}", diff.sqrt());
    }

    #[test]
    fn reversibility() {
        let g = grid();
        let dt = 0.01;
        let n = 201;
        let src = wave_source(g, dt, n);
        let b0 = ScalarField::from_fn(g, |x| 0.2 * (2.0 * PI * x[0]).cos());
        let st = EMState::new(0.0, solve_poisson(&src.rho[0]).unwrap(), b0, 1.7).unwrap();
        let fwd = evolve_maxwell(&st, &src, 2.0).unwrap().pop().unwrap();
        // reversed sources: ρ̃(t) = ρ(T−t), j̃(t) = −j(T−t)
        let rho: Vec<ScalarField> = src.rho.iter().rev().cloned().collect();
        let j: Vec<VectorField> = src.j.iter().rev().map(|v| v.scaled(-1.0)).collect();
        let rev_src = SourceMoments::new(0.0, dt, rho, j).unwrap();
        let back_start = EMState::new(0.0, fwd.e.clone(), fwd.b.scaled(-1.0), 1.7).unwrap();
        let back = evolve_maxwell(&back_start, &rev_src, 2.0).unwrap().pop().unwrap();
        assert!(back.e.max_abs_diff(&st.e).unwrap() < 1e-9);
        assert!(back.b.scaled(-1.0).max_abs_diff(&st.b).unwrap() < 1e-9);
    }

    #[test]
    fn tilde_fields_identities() {
        let g = grid();
        let rho = ScalarField::from_fn(g, |x| 1.0 + 0.4 * (2.0 * PI * x[1]).sin());
        // well-prepared: curl-free E with Gauss's law, constant B
        let e0 = solve_poisson(&rho).unwrap().axpy(1.0, &VectorField::constant(g, [0.5, 0.0])).unwrap();
        let tf = compute_tilde_fields(&e0, &ScalarField::constant(g, 2.0), &rho, 5.0).unwrap();
        for t in [0.0, 0.37, 1.9] {
            let (e, b) = tf.at(t);
            assert!(e.sup_norm() < 1e-12 && b.sup_norm() < 1e-12);
        }
        // t = 0 identity for ill-prepared data
        let e0 = VectorField::from_fn(g, |x| [1.0 + (2.0 * PI * x[1]).sin(), 0.3 * (2.0 * PI * x[0]).cos()]);
        let b0 = ScalarField::from_fn(g, |x| 0.7 + (2.0 * PI * (x[0] + x[1])).cos());
        let tf = compute_tilde_fields(&e0, &b0, &rho, 5.0).unwrap();
        let (e, b) = tf.at(0.0);
        let want_b = b0.axpy(-1.0, &ScalarField::constant(g, b0.mean())).unwrap();
        assert!(b.max_abs_diff(&want_b).unwrap() < 1e-12);
        let m = e0.mean();
        let want_e = e0.axpy(-1.0, &solve_poisson(&rho).unwrap()).unwrap().axpy(-1.0, &VectorField::constant(g, m)).unwrap();
        assert!(e.max_abs_diff(&want_e).unwrap() < 1e-12);
    }

    #[test]
    fn tilde_fields_single_mode_hand_value() {
        let g = grid();
        let mut b0 = SpectralScalar::zeros(g);
        b0.set_real_mode([0, 1], Complex64::new(0.5, 0.0)).unwrap();
        let tf = tilde_from_spectral(&SpectralVector::zeros(g), &b0, &SpectralScalar::zeros(g), 2.0).unwrap();
        let t = 0.1;
        let (e, b) = tf.spectral_at(t);
        let w = 2.0 * 2.0 * PI;
        // ξ = (0, 2π): normal (1, 0); Ẽ₁ = i·0.5·sin(ωt)
        assert!((e.get([0, 1])[0] - I * 0.5 * (w * t).sin()).norm() < 1e-12);
        assert!(e.get([0, 1])[1].norm() < 1e-15);
        assert!((b.get([0, 1]) - Complex64::new(0.5 * (w * t).cos(), 0.0)).norm() < 1e-12);
        // real field: E₁(x) = −sin(ωt) sin(2πx₂)
        let (er, _) = tf.at(t);
        assert!((er.at(3, 5)[0] + (w * t).sin() * (2.0 * PI * g.node(3, 5)[1]).sin()).abs() < 1e-12);
    }

    #[test]
    fn approx_constants_single_mode() {
        let g = grid();
        assert_eq!(approx_constants(&SourceMoments::zero(g, 0.0, 0.1, 5).unwrap()).unwrap().c_prime_rho_j, 0.0);
        // j = (a sin(2πx₂), 0) constant in time; only ‖ĵ‖ terms survive
        let a = 0.8;
        let src = SourceMoments::from_fn(g, 0.0, 0.1, 5, |_, _| 0.0, |_, x| [a * (2.0 * PI * x[1]).sin(), 0.0]).unwrap();
        let bound = approx_constants(&src).unwrap();
        let r = 2.0 * PI;
        // two modes ±(0,1), each |ĵ| = a/2
        assert!((bound.c_prime_rho_j - 2.0 * (a / 2.0) / r).abs() < 1e-12);
        assert!((bound.c_rho_j - 2.0 * 2.0 * (a / 2.0) / r).abs() < 1e-12);
    }

    #[test]
    fn approx_lemma_refuses_mean_current() {
        let g = grid();
        let src = SourceMoments::from_fn(g, 0.0, 0.1, 11, |_, _| 1.0, |_, _| [0.1, 0.0]).unwrap();
        let st = EMState::zero(g, 1.0).unwrap();
        assert!(matches!(verify_approx_lemma(&st, &src, &[10.0], 1.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn approx_lemma_trivial_case() {
        let g = grid();
        let src = SourceMoments::from_fn(g, 0.0, 0.1, 11, |_, _| 1.0, |_, _| [0.0, 0.0]).unwrap();
        let st = EMState::new(0.0, VectorField::constant(g, [0.2, 0.1]), ScalarField::constant(g, 1.5), 1.0).unwrap();
        let table = verify_approx_lemma(&st, &src, &[10.0, 20.0], 1.0).unwrap();
        assert!(table.rows.iter().all(|r| r.err_e < 1e-13 && r.err_b < 1e-13));
    }

    #[test]
    fn approx_lemma_first_order_rate() {
        let g = grid();
        let src = wave_source(g, 0.01, 201);
        let b0 = ScalarField::from_fn(g, |x| 0.3 * (2.0 * PI * x[0]).sin());
        let st = EMState::new(0.0, solve_poisson(&src.rho[0]).unwrap(), b0, 1.0).unwrap();
        let table = verify_approx_lemma(&st, &src, &[10.0, 20.0], 2.0).unwrap();
        let ratio = table.summary[0].sup_err_e / table.summary[1].sup_err_e;
        assert!((ratio - 2.0).abs() < 0.6, "ratio {ratio}");
        assert!(table.within_bound);
    }

    #[test]
    fn log_log_slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 / v).collect();
        assert!((log_log_slope(&x, &y) + 1.0).abs() < 1e-12);
    }
}
