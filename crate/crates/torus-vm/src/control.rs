//! Finite-mode steering of the linear Maxwell system by divergence-free
//! currents supported in a control set.
//!
//! Currents are combinations `Σ a_{m,l} J_m(x) θ_l(t)` of stream-function
//! bumps `J_m = ∇⊥ψ_m` (and band currents carrying the mean) with sine
//! half-wave profiles `θ_l(t) = sin(lπt/T)`. The coefficients solve a ridge
//! regularized least-squares problem on the controlled modes.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{Ball, ControlSet};
use crate::maxwell::{evolve_spectral, SpectralSources, SpectralState};
use crate::spectral::{divergence, to_real, to_real_vector, to_spectral, xi, GridSpec, ScalarField, SpectralScalar, SpectralVector, VectorField};

/// `exp(1 − 1/(1 − s²))` on `[0, 1)`, with its derivative.
pub fn bump(s: f64) -> (f64, f64) {
    if s >= 1.0 {
        return (0.0, 0.0);
    }
    let u = 1.0 - s * s;
    let v = (1.0 - 1.0 / u).exp();
    (v, v * (-2.0 * s / (u * u)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SpatialElement {
    /// `∇⊥ψ` for a radial bump `ψ` of the given radius.
    Stream { center: [f64; 2], radius: f64 },
    /// `(χ(x₂), 0)`, a band current along the first axis.
    BandX { center: f64, half_width: f64 },
    /// `(0, χ(x₁))`, a band current along the second axis.
    BandY { center: f64, half_width: f64 },
}

fn delta(a: f64, b: f64) -> f64 {
    let d = a - b;
    d - d.round()
}

impl SpatialElement {
    pub fn current(&self, x: [f64; 2]) -> [f64; 2] {
        match *self {
            Self::Stream { center, radius } => {
                let d = [delta(x[0], center[0]), delta(x[1], center[1])];
                let r = d[0].hypot(d[1]);
                if r >= radius || r == 0.0 {
                    return [0.0, 0.0];
                }
                let (_, dphi) = bump(r / radius);
                let g = dphi / (radius * r);
                // ∇⊥ψ = (∂₂ψ, −∂₁ψ)
                [g * d[1], -g * d[0]]
            }
            Self::BandX { center, half_width } => [bump(delta(x[1], center).abs() / half_width).0, 0.0],
            Self::BandY { center, half_width } => [0.0, bump(delta(x[0], center).abs() / half_width).0],
        }
    }

    fn stream(&self, x: [f64; 2]) -> f64 {
        match *self {
            Self::Stream { center, radius } => {
                let d = [delta(x[0], center[0]), delta(x[1], center[1])];
                bump(d[0].hypot(d[1]) / radius).0
            }
            _ => 0.0,
        }
    }

    /// Spectral current with exactly vanishing divergence symbol.
    pub fn spectral(&self, grid: GridSpec) -> Result<SpectralVector> {
        let mut out = SpectralVector::zeros(grid);
        match self {
            Self::Stream { .. } => {
                let psi = to_spectral(&ScalarField::from_fn(grid, |x| self.stream(x)))?;
                for (i, k) in grid.modes() {
                    let x = xi(k);
                    let z = psi.coeffs()[i];
                    out.coeffs_mut(0)[i] = Complex64::new(0.0, x[1]) * z;
                    out.coeffs_mut(1)[i] = Complex64::new(0.0, -x[0]) * z;
                }
            }
            Self::BandX { .. } | Self::BandY { .. } => {
                let (comp, axis) = if matches!(self, Self::BandX { .. }) { (0, 0) } else { (1, 1) };
                let f = to_spectral(&ScalarField::from_fn(grid, |x| self.current(x)[comp]))?;
                for (i, k) in grid.modes() {
                    // a function of the other coordinate only
                    if k[axis] == 0 {
                        out.coeffs_mut(comp)[i] = f.coeffs()[i];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Whether the closed support lies inside `omega` (checked with a margin).
    pub fn inside(&self, omega: &ControlSet) -> bool {
        match *self {
            Self::Stream { center, radius } => omega.margin(center) >= radius,
            Self::BandX { center, half_width } => band_inside(omega, |s, h| [s, center + h * half_width]),
            Self::BandY { center, half_width } => band_inside(omega, |s, h| [center + h * half_width, s]),
        }
    }
}

fn band_inside(omega: &ControlSet, point: impl Fn(f64, f64) -> [f64; 2]) -> bool {
    (0..2048).all(|i| (-16..=16).all(|q| omega.contains(point(i as f64 / 2048.0, q as f64 / 16.0))))
}

pub fn profile(l: usize, t: f64, t_end: f64) -> f64 {
    (l as f64 * std::f64::consts::PI * t / t_end).sin()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlBasis {
    pub spatial: Vec<SpatialElement>,
    /// Profiles `θ_1 … θ_L`.
    pub n_profiles: usize,
}

impl ControlBasis {
    pub fn new(spatial: Vec<SpatialElement>, n_profiles: usize) -> Self {
        Self { spatial, n_profiles }
    }

    pub fn len(&self) -> usize {
        self.spatial.len() * self.n_profiles
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bumps centred in each ball, `levels` rings of refinement, plus optional bands.
    pub fn for_balls(balls: &[Ball], levels: usize, bands: &[SpatialElement], n_profiles: usize) -> Self {
        let mut spatial = bands.to_vec();
        for level in 0..levels {
            for b in balls {
                if level == 0 {
                    spatial.push(SpatialElement::Stream { center: b.center, radius: 0.9 * b.radius });
                } else {
                    let off = 0.45 * b.radius;
                    let angle0 = std::f64::consts::PI * (level - 1) as f64 / 4.0;
                    for q in 0..4 {
                        let a = angle0 + q as f64 * std::f64::consts::FRAC_PI_2;
                        spatial.push(SpatialElement::Stream {
                            center: [b.center[0] + off * a.cos(), b.center[1] + off * a.sin()],
                            radius: 0.45 * b.radius,
                        });
                    }
                }
            }
        }
        Self { spatial, n_profiles }
    }
}

/// Two perpendicular chains of overlapping balls through `(0.5, 0.5)`,
/// with the band currents they contain.
pub fn cross_chain(per_chain: usize, radius: f64) -> Result<(ControlSet, Vec<Ball>, Vec<SpatialElement>)> {
    let mut balls = Vec::new();
    for i in 0..per_chain {
        let s = i as f64 / per_chain as f64;
        balls.push(Ball::new([s, 0.5], radius));
        if (s - 0.5).abs() > 1e-12 {
            balls.push(Ball::new([0.5, s], radius));
        }
    }
    let spacing = 1.0 / per_chain as f64;
    let waist = (radius * radius - spacing * spacing / 4.0).sqrt();
    if !(waist > 0.0) {
        return Err(Error::InvalidInput("balls in a chain do not overlap".into()));
    }
    let half_width = 0.9 * waist;
    let bands = vec![
        SpatialElement::BandX { center: 0.5, half_width },
        SpatialElement::BandY { center: 0.5, half_width },
    ];
    Ok((ControlSet::balls(balls.clone())?, balls, bands))
}

#[derive(Debug, Clone)]
pub struct SteeringProblem {
    pub grid: GridSpec,
    pub c: f64,
    pub e0: VectorField,
    pub b0: ScalarField,
    pub e1: VectorField,
    pub b1: ScalarField,
    pub t_end: f64,
    pub k_ctrl: usize,
    pub reg: f64,
    /// Source samples over `[0, T]`.
    pub n_t: usize,
}

impl SteeringProblem {
    pub fn new(e0: VectorField, b0: ScalarField, e1: VectorField, b1: ScalarField, c: f64, t_end: f64, k_ctrl: usize) -> Result<Self> {
        let grid = e0.grid();
        if [b0.grid(), e1.grid(), b1.grid()].iter().any(|g| *g != grid) {
            return Err(Error::GridMismatch);
        }
        if !(t_end > 0.0) || !(c > 0.0) {
            return Err(Error::InvalidInput("horizon and light speed must be positive".into()));
        }
        if k_ctrl > grid.k_max() {
            return Err(Error::InvalidInput(format!("k_ctrl {k_ctrl} exceeds truncation {}", grid.k_max())));
        }
        Ok(Self { grid, c, e0, b0, e1, b1, t_end, k_ctrl, reg: 1e-8, n_t: 400 })
    }

    fn initial(&self) -> Result<SpectralState> {
        Ok(SpectralState { t: 0.0, e: crate::spectral::to_spectral_vector(&self.e0)?, b: to_spectral(&self.b0)? })
    }

    fn target(&self) -> Result<SpectralState> {
        Ok(SpectralState { t: self.t_end, e: crate::spectral::to_spectral_vector(&self.e1)?, b: to_spectral(&self.b1)? })
    }

    /// Modes `k` with `|k|_∞ ≤ k_ctrl` in the half plane `k > 0`, and `k = 0`.
    pub fn controlled_modes(&self) -> Vec<[i64; 2]> {
        let kc = self.k_ctrl as i64;
        let mut out = vec![[0, 0]];
        for k1 in 0..=kc {
            for k2 in -kc..=kc {
                if k1 > 0 || k2 > 0 {
                    out.push([k1, k2]);
                }
            }
        }
        out
    }
}

/// Rows of the reachability map: `(mode, component, real part?)`, component 0,1 for `E`, 2 for `B`.
pub type RowLabel = ([i64; 2], usize, bool);

#[derive(Debug, Clone)]
pub struct Reachability {
    pub rows: Vec<RowLabel>,
    pub matrix: DMatrix<f64>,
}

/// Per-mode response of the final state to a unit current `e_i θ_l`.
struct ProfileResponse {
    /// `[i][out]` complex response at each mode index.
    resp: [[Vec<Complex64>; 3]; 2],
}

fn profile_sources(grid: GridSpec, unit: [Complex64; 2], l: usize, t_end: f64, n_t: usize) -> Result<SpectralSources> {
    let dt = t_end / n_t as f64;
    let mut j = Vec::with_capacity(n_t + 1);
    for s in 0..=n_t {
        let th = profile(l, s as f64 * dt, t_end);
        let mut v = SpectralVector::zeros(grid);
        for c in 0..2 {
            v.coeffs_mut(c).iter_mut().for_each(|z| *z = unit[c] * th);
        }
        j.push(v);
    }
    SpectralSources::new(0.0, dt, vec![SpectralScalar::zeros(grid); n_t + 1], j)
}

fn profile_response(p: &SteeringProblem, l: usize) -> Result<ProfileResponse> {
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    let mut resp: [[Vec<Complex64>; 3]; 2] = Default::default();
    for (i, unit) in [[one, zero], [zero, one]].into_iter().enumerate() {
        let src = profile_sources(p.grid, unit, l, p.t_end, p.n_t)?;
        let fin = evolve_spectral(&SpectralState::zero(p.grid), p.c, &src, p.t_end, |_| {})?;
        resp[i] = [fin.e.coeffs(0).to_vec(), fin.e.coeffs(1).to_vec(), fin.b.coeffs().to_vec()];
    }
    Ok(ProfileResponse { resp })
}

fn rows_for(p: &SteeringProblem) -> Vec<RowLabel> {
    let mut rows = Vec::new();
    for k in p.controlled_modes() {
        for comp in 0..3 {
            if k == [0, 0] {
                if comp < 2 {
                    rows.push((k, comp, true));
                }
                continue;
            }
            rows.push((k, comp, true));
            rows.push((k, comp, false));
        }
    }
    rows
}

fn state_vector(p: &SteeringProblem, rows: &[RowLabel], s: &SpectralState) -> DVector<f64> {
    DVector::from_iterator(
        rows.len(),
        rows.iter().map(|&(k, comp, re)| {
            let z = if comp < 2 { s.e.get(k)[comp] } else { s.b.get(k) };
            let _ = p;
            if re { z.re } else { z.im }
        }),
    )
}

pub fn assemble_reachability(p: &SteeringProblem, basis: &ControlBasis, omega: &ControlSet) -> Result<Reachability> {
    for el in &basis.spatial {
        if !el.inside(omega) {
            return Err(Error::Precondition(format!("basis element {el:?} leaks outside the control set")));
        }
    }
    let rows = rows_for(p);
    let mut matrix = DMatrix::zeros(rows.len(), basis.len());
    if basis.is_empty() {
        return Ok(Reachability { rows, matrix });
    }
    let spatial: Vec<SpectralVector> = basis.spatial.iter().map(|e| e.spectral(p.grid)).collect::<Result<_>>()?;
    for l in 0..basis.n_profiles {
        let r = profile_response(p, l + 1)?;
        for (m, jm) in spatial.iter().enumerate() {
            let col = column_index(basis, m, l);
            for (row, &(k, comp, re)) in rows.iter().enumerate() {
                let i = p.grid.mode_index(k).expect("controlled mode");
                let z = r.resp[0][comp][i] * jm.coeffs(0)[i] + r.resp[1][comp][i] * jm.coeffs(1)[i];
                matrix[(row, col)] = if re { z.re } else { z.im };
            }
        }
    }
    Ok(Reachability { rows, matrix })
}

fn column_index(basis: &ControlBasis, m: usize, l: usize) -> usize {
    m * basis.n_profiles + l
}

/// Assembled control current.
#[derive(Debug, Clone, Serialize)]
pub struct ControlCurrent {
    pub basis: ControlBasis,
    pub coeffs: Vec<f64>,
    pub t_end: f64,
}

impl ControlCurrent {
    pub fn zero(basis: ControlBasis, t_end: f64) -> Self {
        let n = basis.len();
        Self { basis, coeffs: vec![0.0; n], t_end }
    }

    pub fn at(&self, t: f64, x: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (m, el) in self.basis.spatial.iter().enumerate() {
            let mut w = 0.0;
            for l in 0..self.basis.n_profiles {
                w += self.coeffs[column_index(&self.basis, m, l)] * profile(l + 1, t, self.t_end);
            }
            if w != 0.0 {
                let j = el.current(x);
                out[0] += w * j[0];
                out[1] += w * j[1];
            }
        }
        out
    }

    pub fn field_at(&self, grid: GridSpec, t: f64) -> VectorField {
        VectorField::from_fn(grid, |x| self.at(t, x))
    }

    /// Spectral current at each sample time `s·T/n_t`.
    pub fn spectral_sources(&self, grid: GridSpec, n_t: usize) -> Result<SpectralSources> {
        let spatial: Vec<SpectralVector> = self.basis.spatial.iter().map(|e| e.spectral(grid)).collect::<Result<_>>()?;
        let dt = self.t_end / n_t as f64;
        let mut j = Vec::with_capacity(n_t + 1);
        for s in 0..=n_t {
            let t = s as f64 * dt;
            let mut v = SpectralVector::zeros(grid);
            for (m, jm) in spatial.iter().enumerate() {
                let w: f64 = (0..self.basis.n_profiles)
                    .map(|l| self.coeffs[column_index(&self.basis, m, l)] * profile(l + 1, t, self.t_end))
                    .sum();
                if w != 0.0 {
                    v = v.axpy(w, jm)?;
                }
            }
            j.push(v);
        }
        SpectralSources::new(0.0, dt, vec![SpectralScalar::zeros(grid); n_t + 1], j)
    }

    /// The current `−j(T − t)`, which drives the time-reversed fields.
    pub fn reversed(&self) -> Self {
        // sin(lπ(T−t)/T) = (−1)^{l+1} sin(lπt/T)
        let mut coeffs = self.coeffs.clone();
        for m in 0..self.basis.spatial.len() {
            for l in 0..self.basis.n_profiles {
                let sign = if (l + 1) % 2 == 0 { 1.0 } else { -1.0 };
                coeffs[column_index(&self.basis, m, l)] *= sign;
            }
        }
        Self { coeffs, ..self.clone() }
    }

    /// Largest `|j|` on grid nodes outside `omega` over `n_t + 1` times.
    pub fn max_outside(&self, grid: GridSpec, omega: &ControlSet, n_t: usize) -> f64 {
        let nodes: Vec<[f64; 2]> = grid.nodes().map(|(_, x)| x).filter(|x| !omega.contains(*x)).collect();
        (0..=n_t)
            .flat_map(|s| {
                let t = s as f64 * self.t_end / n_t as f64;
                nodes.iter().map(move |&x| (t, x))
            })
            .map(|(t, x)| {
                let j = self.at(t, x);
                j[0].hypot(j[1])
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeResidual {
    pub k: [i64; 2],
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SteeringSolution {
    pub current: ControlCurrent,
    /// Relative residual predicted by the linear model.
    pub predicted_residual: f64,
    /// Relative residual of the forward simulation on controlled modes.
    pub relative_residual: f64,
    pub mode_residuals: Vec<ModeResidual>,
    /// Largest spectral divergence of the applied current (real space, sup norm).
    pub divergence: f64,
    /// Largest closed-form `|j|` outside ω on the grid.
    pub max_outside: f64,
    #[serde(skip)]
    pub achieved: SpectralState,
}

/// Free evolution of the initial data over `[0, T]`.
fn free_final(p: &SteeringProblem) -> Result<SpectralState> {
    let src = SpectralSources::zero(p.grid, 0.0, p.t_end, 2)?;
    evolve_spectral(&p.initial()?, p.c, &src, p.t_end, |_| {})
}

pub fn solve_steering(p: &SteeringProblem, basis: &ControlBasis, omega: &ControlSet) -> Result<SteeringSolution> {
    let tol = 1e-10 * (1.0 + p.b0.sup_norm().max(p.b1.sup_norm()));
    if (p.b0.mean() - p.b1.mean()).abs() > tol {
        return Err(Error::Precondition(format!(
            "mean of B cannot change under any current: mean(B0) = {}, mean(B1) = {}",
            p.b0.mean(),
            p.b1.mean()
        )));
    }
    let div_tol = 1e-8 * (1.0 + p.e0.sup_norm().max(p.e1.sup_norm()));
    for (name, e) in [("E0", &p.e0), ("E1", &p.e1)] {
        let d = to_real(&divergence(&crate::spectral::to_spectral_vector(e)?)).sup_norm();
        if d > div_tol {
            return Err(Error::Precondition(format!("{name} is not divergence-free (residual {d:.3e})")));
        }
    }
    let reach = assemble_reachability(p, basis, omega)?;
    let free = free_final(p)?;
    let target = p.target()?;
    let y = state_vector(p, &reach.rows, &target) - state_vector(p, &reach.rows, &free);
    let coeffs = ridge_solve(&reach.matrix, &y, p.reg);
    // absolute residuals when the target equals free evolution
    let norm_y = if y.norm() > 0.0 { y.norm() } else { 1.0 };
    let predicted_residual = (&reach.matrix * &coeffs - &y).norm() / norm_y;
    let current = ControlCurrent { basis: basis.clone(), coeffs: coeffs.iter().copied().collect(), t_end: p.t_end };
    let src = current.spectral_sources(p.grid, p.n_t)?;
    let achieved = evolve_spectral(&p.initial()?, p.c, &src, p.t_end, |_| {})?;
    let diff = state_vector(p, &reach.rows, &achieved) - state_vector(p, &reach.rows, &target);
    let relative_residual = diff.norm() / norm_y;
    let mode_residuals = p
        .controlled_modes()
        .into_iter()
        .map(|k| {
            let r: f64 = reach.rows.iter().zip(diff.iter()).filter(|((kk, _, _), _)| *kk == k).map(|(_, d)| d * d).sum();
            ModeResidual { k, residual: r.sqrt() }
        })
        .collect();
    let divergence = src.j.iter().map(|j| to_real(&divergence(j)).sup_norm()).fold(0.0, f64::max);
    let max_outside = current.max_outside(p.grid, omega, 40);
    Ok(SteeringSolution { current, predicted_residual, relative_residual, mode_residuals, divergence, max_outside, achieved })
}

/// `argmin ‖Ax − y‖² + reg·σ_max²‖x‖²` through the SVD.
pub fn ridge_solve(a: &DMatrix<f64>, y: &DVector<f64>, reg: f64) -> DVector<f64> {
    if a.ncols() == 0 {
        return DVector::zeros(0);
    }
    let svd = a.clone().svd(true, true);
    let (u, vt) = (svd.u.as_ref().expect("u"), svd.v_t.as_ref().expect("v_t"));
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let lam = reg * smax * smax;
    let uty = u.transpose() * y;
    let scaled = DVector::from_iterator(
        uty.len(),
        uty.iter().zip(svd.singular_values.iter()).map(|(c, &s)| if s > 0.0 { c * s / (s * s + lam) } else { 0.0 }),
    );
    vt.transpose() * scaled
}

/// Real-space field of a spectral state, for dumps.
pub fn real_fields(s: &SpectralState) -> (VectorField, ScalarField) {
    (to_real_vector(&s.e), to_real(&s.b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (GridSpec, ControlSet, Vec<Ball>, Vec<SpatialElement>) {
        let g = GridSpec::new(32, 8).unwrap();
        let (omega, balls, bands) = cross_chain(6, 0.1).unwrap();
        (g, omega, balls, bands)
    }

    #[test]
    fn elements_are_divergence_free_and_supported() {
        let (g, omega, balls, bands) = setup();
        let basis = ControlBasis::for_balls(&balls, 2, &bands, 1);
        for el in &basis.spatial {
            assert!(el.inside(&omega), "{el:?}");
            let j = el.spectral(g).unwrap();
            assert!(to_real(&divergence(&j)).sup_norm() < 1e-10);
            for (_, x) in g.nodes() {
                if !omega.contains(x) {
                    assert_eq!(el.current(x), [0.0, 0.0]);
                }
            }
        }
        let leaky = SpatialElement::Stream { center: [0.2, 0.2], radius: 0.05 };
        assert!(!leaky.inside(&omega));
        let p = SteeringProblem::new(VectorField::zeros(g), ScalarField::zeros(g), VectorField::zeros(g), ScalarField::zeros(g), 1.0, 1.0, 2).unwrap();
        assert!(matches!(assemble_reachability(&p, &ControlBasis::new(vec![leaky], 1), &omega), Err(Error::Precondition(_))));
    }

    #[test]
    fn stream_current_matches_gradient_of_bump() {
        let el = SpatialElement::Stream { center: [0.5, 0.5], radius: 0.2 };
        let x = [0.55, 0.47];
        let h = 1e-6;
        let d1 = (el.stream([x[0] + h, x[1]]) - el.stream([x[0] - h, x[1]])) / (2.0 * h);
        let d2 = (el.stream([x[0], x[1] + h]) - el.stream([x[0], x[1] - h])) / (2.0 * h);
        let j = el.current(x);
        assert!((j[0] - d2).abs() < 1e-6 && (j[1] + d1).abs() < 1e-6);
    }

    #[test]
    fn empty_basis_is_zero_map() {
        let (g, omega, _, _) = setup();
        let p = SteeringProblem::new(VectorField::zeros(g), ScalarField::zeros(g), VectorField::zeros(g), ScalarField::zeros(g), 1.0, 1.0, 2).unwrap();
        let r = assemble_reachability(&p, &ControlBasis::new(vec![], 3), &omega).unwrap();
        assert_eq!(r.matrix.ncols(), 0);
        assert!(!r.rows.is_empty());
    }

    #[test]
    fn column_matches_direct_simulation_and_mean_b_unreachable() {
        let (g, omega, balls, bands) = setup();
        let basis = ControlBasis::for_balls(&balls[..2], 1, &bands[..1], 2);
        let p = SteeringProblem::new(VectorField::zeros(g), ScalarField::zeros(g), VectorField::zeros(g), ScalarField::zeros(g), 1.5, 2.0, 2).unwrap();
        let r = assemble_reachability(&p, &basis, &omega).unwrap();
        for col in 0..basis.len() {
            let mut cur = ControlCurrent::zero(basis.clone(), p.t_end);
            cur.coeffs[col] = 1.0;
            let src = cur.spectral_sources(g, p.n_t).unwrap();
            let fin = evolve_spectral(&SpectralState::zero(g), p.c, &src, p.t_end, |_| {}).unwrap();
            let v = state_vector(&p, &r.rows, &fin);
            let diff = (&v - r.matrix.column(col)).amax();
            assert!(diff < 1e-12 * (1.0 + v.amax()), "col {col}: {diff}");
            assert_eq!(fin.b.get([0, 0]).norm(), 0.0);
        }
    }

    #[test]
    fn zero_target_needs_zero_control() {
        let (g, omega, balls, bands) = setup();
        let e0 = VectorField::from_fn(g, |x| [(2.0 * std::f64::consts::PI * x[1]).sin(), 0.0]);
        let b0 = ScalarField::constant(g, 0.3);
        let p0 = SteeringProblem::new(e0.clone(), b0.clone(), e0.clone(), b0.clone(), 1.0, 1.0, 2).unwrap();
        let free = free_final(&p0).unwrap();
        let (e1, b1) = real_fields(&free);
        let p = SteeringProblem::new(e0, b0, e1, b1, 1.0, 1.0, 2).unwrap();
        let basis = ControlBasis::for_balls(&balls, 1, &bands, 2);
        let sol = solve_steering(&p, &basis, &omega).unwrap();
        assert!(sol.current.coeffs.iter().all(|c| c.abs() < 1e-9));
        assert!(sol.mode_residuals.iter().all(|m| m.residual < 1e-9));
    }

    #[test]
    fn mean_b_change_rejected() {
        let (g, omega, balls, bands) = setup();
        let p = SteeringProblem::new(VectorField::zeros(g), ScalarField::zeros(g), VectorField::zeros(g), ScalarField::constant(g, 1.0), 1.0, 1.0, 2).unwrap();
        let basis = ControlBasis::for_balls(&balls, 1, &bands, 2);
        assert!(matches!(solve_steering(&p, &basis, &omega), Err(Error::Precondition(_))));
    }

    #[test]
    fn steer_to_constant_field_and_back() {
        let (g, omega, balls, bands) = setup();
        let p = SteeringProblem::new(
            VectorField::zeros(g),
            ScalarField::zeros(g),
            VectorField::constant(g, [1.0, 0.0]),
            ScalarField::zeros(g),
            1.0,
            4.0,
            2,
        )
        .unwrap();
        let basis = ControlBasis::for_balls(&balls, 2, &bands, 8);
        let sol = solve_steering(&p, &basis, &omega).unwrap();
        assert!(sol.relative_residual < 1e-3, "{}", sol.relative_residual);
        assert!(sol.divergence < 1e-12);
        assert_eq!(sol.max_outside, 0.0);
        assert!((sol.predicted_residual - sol.relative_residual).abs() < 1e-9);
        // profiles vanish at both ends
        for (_, x) in g.nodes().step_by(37) {
            assert!(sol.current.at(0.0, x).iter().all(|v| v.abs() < 1e-12));
            assert!(sol.current.at(p.t_end, x).iter().all(|v| v.abs() < 1e-12));
        }
        // reversed control returns to the start from (E(T), −B(T))
        let back = sol.current.reversed();
        let src = back.spectral_sources(g, p.n_t).unwrap();
        let start = SpectralState { t: 0.0, e: sol.achieved.e.clone(), b: sol.achieved.b.scaled(-1.0) };
        let fin = evolve_spectral(&start, p.c, &src, p.t_end, |_| {}).unwrap();
        assert!(fin.energy().sqrt() < 1e-8, "{}", fin.energy().sqrt());
    }

    #[test]
    fn residual_decreases_with_nested_bases() {
        let (g, omega, balls, bands) = setup();
        let p = SteeringProblem::new(
            VectorField::zeros(g),
            ScalarField::zeros(g),
            VectorField::constant(g, [1.0, 0.0]),
            ScalarField::zeros(g),
            1.0,
            4.0,
            2,
        )
        .unwrap();
        let mut last = f64::INFINITY;
        for n_prof in [1, 2, 4, 8] {
            let basis = ControlBasis::for_balls(&balls, 1, &bands, n_prof);
            let sol = solve_steering(&p, &basis, &omega).unwrap();
            assert!(sol.predicted_residual <= last * (1.0 + 1e-9), "{n_prof}: {} > {last}", sol.predicted_residual);
            last = sol.predicted_residual;
        }
    }

    #[test]
    fn ridge_solve_recovers_exact_solution() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 1.0, 1.0]);
        let x = DVector::from_vec(vec![0.5, -1.0]);
        let y = &a * &x;
        let got = ridge_solve(&a, &y, 1e-14);
        assert!((got - x).amax() < 1e-10);
    }
}
