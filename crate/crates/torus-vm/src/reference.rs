//! Building blocks of reference solutions: velocity bump profiles, current
//! lifting, harmonic accelerating potentials on a strip, and the charge
//! correction that restores local conservation and zero-mean current.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::characteristics::{relativistic_velocity, LightSpeed};
use crate::error::{Error, Result};
use crate::geometry::ControlSet;
use crate::spectral::{
    curl_scal, divergence, to_real, to_real_vector, to_spectral, wrap_delta, xi, xi_norm, GridSpec, ScalarField,
    SpectralScalar, SpectralVector, VectorField,
};

/// Tolerance on bump moments, checked on a refined quadrature.
pub const MOMENT_TOL: f64 = 1e-8;

fn radial_bump(v: [f64; 2]) -> (f64, [f64; 2]) {
    let r2 = v[0] * v[0] + v[1] * v[1];
    if r2 >= 1.0 {
        return (0.0, [0.0, 0.0]);
    }
    let u = 1.0 - r2;
    let p = (-1.0 / u).exp();
    let g = -2.0 * p / (u * u);
    (p, [g * v[0], g * v[1]])
}

/// Midpoint nodes and weight on `[−1, 1]²`.
fn quadrature(n: usize) -> (Vec<[f64; 2]>, f64) {
    let h = 2.0 / n as f64;
    let mut nodes = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            nodes.push([-1.0 + (a as f64 + 0.5) * h, -1.0 + (b as f64 + 0.5) * h]);
        }
    }
    (nodes, h * h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BumpMoments {
    pub z_mass: f64,
    pub z_current: [f64; 2],
    /// `∫Z_i dv`.
    pub zi_mass: [f64; 2],
    /// `[i][k] = ∫Z_i v̂_k dv`.
    pub zi_current: [[f64; 2]; 2],
}

impl BumpMoments {
    pub fn residual(&self) -> f64 {
        let mut r = (self.z_mass - 1.0).abs().max(self.z_current[0].abs()).max(self.z_current[1].abs());
        for i in 0..2 {
            r = r.max(self.zi_mass[i].abs());
            for k in 0..2 {
                let target = if i == k { 1.0 } else { 0.0 };
                r = r.max((self.zi_current[i][k] - target).abs());
            }
        }
        r
    }
}

/// `Z` with unit mass and zero current, and `Z_i` with zero mass and unit
/// current along `e_i`, all supported in the unit ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BumpProfile {
    pub quad_n: usize,
    #[serde(skip)]
    pub c: LightSpeed,
    z_scale: f64,
    zi_scale: f64,
    /// Moments on the refined quadrature.
    pub moments: BumpMoments,
}

impl BumpProfile {
    pub fn z(&self, v: [f64; 2]) -> f64 {
        self.z_scale * radial_bump(v).0
    }

    pub fn zi(&self, i: usize, v: [f64; 2]) -> f64 {
        self.zi_scale * radial_bump(v).1[i]
    }

    fn moments_at(&self, n: usize) -> BumpMoments {
        let (nodes, w) = quadrature(n);
        let mut m = BumpMoments { z_mass: 0.0, z_current: [0.0; 2], zi_mass: [0.0; 2], zi_current: [[0.0; 2]; 2] };
        for v in nodes {
            let vh = relativistic_velocity(v, self.c);
            let z = self.z(v) * w;
            m.z_mass += z;
            m.z_current[0] += z * vh[0];
            m.z_current[1] += z * vh[1];
            for i in 0..2 {
                let zi = self.zi(i, v) * w;
                m.zi_mass[i] += zi;
                m.zi_current[i][0] += zi * vh[0];
                m.zi_current[i][1] += zi * vh[1];
            }
        }
        m
    }

    /// Velocity nodes and weights of the working quadrature.
    pub fn nodes(&self) -> (Vec<[f64; 2]>, f64) {
        quadrature(self.quad_n)
    }
}

/// Normalises the bumps on a `quad_n²` midpoint rule and re-checks every
/// moment on a rule twice as fine.
pub fn make_bumps(quad_n: usize, c: LightSpeed) -> Result<BumpProfile> {
    if quad_n < 64 {
        return Err(Error::InvalidInput(format!("bump quadrature needs at least 64² nodes, got {quad_n}²")));
    }
    let (nodes, w) = quadrature(quad_n);
    let mut mass = 0.0;
    let mut cur = 0.0;
    for &v in &nodes {
        let (p, g) = radial_bump(v);
        mass += p * w;
        cur += g[0] * relativistic_velocity(v, c)[0] * w;
    }
    let mut out = BumpProfile {
        quad_n,
        c,
        z_scale: 1.0 / mass,
        zi_scale: 1.0 / cur,
        moments: BumpMoments { z_mass: 0.0, z_current: [0.0; 2], zi_mass: [0.0; 2], zi_current: [[0.0; 2]; 2] },
    };
    out.moments = out.moments_at(2 * quad_n);
    let r = out.moments.residual();
    if !(r <= MOMENT_TOL) {
        return Err(Error::Numerical(format!("bump moment residual {r:.3e} exceeds {MOMENT_TOL:e}")));
    }
    Ok(out)
}

/// `f̄(x, v) = Z₁(v) j₁(x) + Z₂(v) j₂(x)`.
#[derive(Debug, Clone)]
pub struct LiftedCurrent {
    pub j: VectorField,
    pub bumps: BumpProfile,
}

pub fn lift_current(j: &VectorField, bumps: &BumpProfile) -> LiftedCurrent {
    LiftedCurrent { j: j.clone(), bumps: *bumps }
}

impl LiftedCurrent {
    pub fn value(&self, node: usize, v: [f64; 2]) -> f64 {
        let j = [self.j.component_values(0)[node], self.j.component_values(1)[node]];
        self.bumps.zi(0, v) * j[0] + self.bumps.zi(1, v) * j[1]
    }

    /// `∫f̄ dv` and `∫f̄ v̂ dv` at every node, by the working quadrature.
    pub fn moments(&self) -> (ScalarField, VectorField) {
        let (nodes, w) = self.bumps.nodes();
        let mut zi = [0.0; 2];
        let mut zv = [[0.0; 2]; 2];
        for v in nodes {
            let vh = relativistic_velocity(v, self.bumps.c);
            for i in 0..2 {
                let z = self.bumps.zi(i, v) * w;
                zi[i] += z;
                zv[i][0] += z * vh[0];
                zv[i][1] += z * vh[1];
            }
        }
        let g = self.j.grid();
        let j1 = self.j.component_values(0);
        let j2 = self.j.component_values(1);
        let rho = ScalarField::from_values(g, (0..g.node_count()).map(|i| zi[0] * j1[i] + zi[1] * j2[i]).collect())
            .expect("grid sizes agree");
        let mut cur = VectorField::zeros(g);
        for k in 0..2 {
            let out = cur.component_values_mut(k);
            for i in 0..g.node_count() {
                out[i] = zv[0][k] * j1[i] + zv[1][k] * j2[i];
            }
        }
        (rho, cur)
    }
}

/// `S(u)`, a smooth step from 0 on `u ≤ 0` to 1 on `u ≥ 1`, with two derivatives.
pub fn smooth_step(u: f64) -> (f64, f64, f64) {
    if u <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if u >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    // S = 1 / (1 + e^λ), λ = 1/u − 1/(1−u)
    let w = 1.0 - u;
    let lam = 1.0 / u - 1.0 / w;
    let dl = -1.0 / (u * u) - 1.0 / (w * w);
    let ddl = 2.0 / (u * u * u) - 2.0 / (w * w * w);
    let s = if lam > 0.0 { (-lam).exp() / (1.0 + (-lam).exp()) } else { 1.0 / (1.0 + lam.exp()) };
    let q = s * (1.0 - s);
    let ds = -q * dl;
    let dds = -(1.0 - 2.0 * s) * ds * dl - q * ddl;
    (s, ds, dds)
}

/// Strip `ℋ + [−d, d]n` around a closed line, inside ω.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StripGeometry {
    /// Primitive direction `(p, q)` of the line.
    pub direction: [i64; 2],
    /// A point on the line.
    pub offset: [f64; 2],
    /// Half-width of ω around the line.
    pub omega_half_width: f64,
    /// Half-width of the band carrying the charge.
    pub d: f64,
}

impl StripGeometry {
    pub fn new(omega: &ControlSet, d: f64) -> Result<Self> {
        let ControlSet::Strip { direction, offset, half_width } = *omega else {
            return Err(Error::Precondition("the accelerating field needs a strip control set".into()));
        };
        let g = Self { direction, offset, omega_half_width: half_width, d };
        if !(d > 0.0) || 2.0 * d > half_width {
            return Err(Error::InvalidInput(format!("band half-width d = {d} must satisfy 0 < 2d ≤ {half_width}")));
        }
        if 4.0 * d >= g.spacing() || half_width >= g.spacing() / 2.0 {
            return Err(Error::InvalidInput("strip too wide for the line spacing".into()));
        }
        Ok(g)
    }

    pub fn wavenumber(&self) -> f64 {
        (self.direction[0] as f64).hypot(self.direction[1] as f64)
    }

    /// Distance between successive lifted lines.
    pub fn spacing(&self) -> f64 {
        1.0 / self.wavenumber()
    }

    pub fn tangent(&self) -> [f64; 2] {
        let k = self.wavenumber();
        [self.direction[0] as f64 / k, self.direction[1] as f64 / k]
    }

    pub fn normal(&self) -> [f64; 2] {
        let k = self.wavenumber();
        [-self.direction[1] as f64 / k, self.direction[0] as f64 / k]
    }

    /// Signed normal coordinate in `[−h/2, h/2)`.
    pub fn normal_coordinate(&self, x: [f64; 2]) -> f64 {
        let (p, q) = (self.direction[0] as f64, self.direction[1] as f64);
        wrap_delta((x[0] - self.offset[0]) * (-q) + (x[1] - self.offset[1]) * p) * self.spacing()
    }

    /// Phase `2π k·(x − offset)` along the line.
    pub fn phase(&self, x: [f64; 2]) -> f64 {
        let (p, q) = (self.direction[0] as f64, self.direction[1] as f64);
        2.0 * std::f64::consts::PI * ((x[0] - self.offset[0]) * p + (x[1] - self.offset[1]) * q)
    }

    pub fn in_band(&self, x: [f64; 2]) -> bool {
        self.normal_coordinate(x).abs() <= self.d
    }

    /// A point of the line `𝒟` halfway between lifted copies of `ℋ`.
    pub fn far_line_point(&self) -> [f64; 2] {
        let n = self.normal();
        let h = self.spacing() / 2.0;
        [self.offset[0] + h * n[0], self.offset[1] + h * n[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Wave {
    Cos,
    Sin,
}

/// `e^{ℓ(s)} cos|sin(2πk·x)` with `ℓ' = ∓2π|k|` off the band: harmonic there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonicMode {
    pub wave: Wave,
    /// Growth to the positive normal side instead of decay.
    pub growing: bool,
}

/// Potential, gradient and Laplacian of one mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeValue {
    pub phi: f64,
    pub grad: [f64; 2],
    pub lap: f64,
}

impl HarmonicMode {
    pub fn eval(&self, geo: &StripGeometry, x: [f64; 2]) -> ModeValue {
        let k = geo.wavenumber();
        let h = geo.spacing();
        let tau = 2.0 * std::f64::consts::PI * k;
        // s in [d, h + d): the off-band part first, then the band
        let mut s = geo.normal_coordinate(x);
        if s < geo.d {
            s += h;
        }
        let (st, dst, ddst) = smooth_step((s - (h - geo.d)) / (2.0 * geo.d));
        let sign = if self.growing { 1.0 } else { -1.0 };
        // shifted so the off-band maximum of e^ℓ is 1 for both families
        let peak = if self.growing { h - geo.d } else { geo.d };
        let ell = sign * tau * (s - h * st - peak);
        let d1 = sign * tau * (1.0 - h * dst / (2.0 * geo.d));
        let d2 = -sign * tau * h * ddst / (4.0 * geo.d * geo.d);
        let amp = ell.exp();
        let ph = geo.phase(x);
        let (trig, dtrig) = match self.wave {
            Wave::Cos => (ph.cos(), -ph.sin()),
            Wave::Sin => (ph.sin(), ph.cos()),
        };
        let n = geo.normal();
        let t = geo.tangent();
        ModeValue {
            phi: amp * trig,
            grad: [
                amp * (d1 * trig * n[0] + tau * dtrig * t[0]),
                amp * (d1 * trig * n[1] + tau * dtrig * t[1]),
            ],
            lap: amp * trig * (d2 + d1 * d1 - tau * tau),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccelField {
    pub geometry: StripGeometry,
    pub mode: HarmonicMode,
    pub report: AccelReport,
}

impl AccelField {
    pub fn w(&self, x: [f64; 2]) -> [f64; 2] {
        self.mode.eval(&self.geometry, x).grad
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccelReport {
    /// Curl and divergence off the band, relative to `sup |w|`.
    pub curl_residual: f64,
    pub div_residual: f64,
    pub min_norm_off_band: f64,
    pub flux: f64,
    pub circulation: f64,
    pub valid: bool,
}

/// Residuals of the four conditions on a candidate accelerating field.
pub fn check_accel_field(w: &dyn Fn([f64; 2]) -> [f64; 2], geo: &StripGeometry, grid: GridSpec) -> Result<AccelReport> {
    // fourth-order differences keep the check local to the off-band region
    const FD: f64 = 1e-3;
    let diff = |x: [f64; 2], axis: usize| -> [f64; 2] {
        let at = |m: f64| {
            let mut y = x;
            y[axis] += m * FD;
            w(y)
        };
        let (a, b, c, d) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
        [0, 1].map(|i| (-a[i] + 8.0 * b[i] - 8.0 * c[i] + d[i]) / (12.0 * FD))
    };
    let field = VectorField::from_fn(grid, w);
    let scale = field.sup_norm().max(f64::MIN_POSITIVE);
    let mut curl_r: f64 = 0.0;
    let mut div_r: f64 = 0.0;
    let mut min_norm = f64::INFINITY;
    for (_, x) in grid.nodes() {
        if geo.normal_coordinate(x).abs() <= geo.d + 3.0 * FD {
            continue;
        }
        let (dx, dy) = (diff(x, 0), diff(x, 1));
        curl_r = curl_r.max((dx[1] - dy[0]).abs() / scale);
        div_r = div_r.max((dx[0] + dy[1]).abs() / scale);
        let v = w(x);
        min_norm = min_norm.min(v[0].hypot(v[1]));
    }
    // closed line of length |k| through the far point
    let p0 = geo.far_line_point();
    let t = geo.tangent();
    let n = geo.normal();
    let len = geo.wavenumber();
    let m = 4096;
    let (mut flux, mut circ) = (0.0, 0.0);
    for i in 0..m {
        let s = len * i as f64 / m as f64;
        let v = w([p0[0] + s * t[0], p0[1] + s * t[1]]);
        flux += (v[0] * n[0] + v[1] * n[1]) * len / m as f64;
        circ += (v[0] * t[0] + v[1] * t[1]) * len / m as f64;
    }
    let valid = curl_r < 1e-6 && div_r < 1e-6 && min_norm > 0.0 && flux.abs() < 1e-12 && circ.abs() < 1e-12;
    Ok(AccelReport { curl_residual: curl_r, div_residual: div_r, min_norm_off_band: min_norm, flux, circulation: circ, valid })
}

/// Closed-form decaying cosine mode, verified on `grid`.
pub fn build_accel_field(omega: &ControlSet, d: f64, grid: GridSpec) -> Result<AccelField> {
    let geometry = StripGeometry::new(omega, d)?;
    let mode = HarmonicMode { wave: Wave::Cos, growing: false };
    let report = check_accel_field(&|x| mode.eval(&geometry, x).grad, &geometry, grid)?;
    if !(report.min_norm_off_band > 0.0) {
        return Err(Error::Numerical("accelerating field vanishes off the band".into()));
    }
    Ok(AccelField { geometry, mode, report })
}

/// `η`: 0 within `inner` of the line, 1 outside ω.
pub fn cutoff(geo: &StripGeometry, inner: f64, x: [f64; 2]) -> f64 {
    let s = geo.normal_coordinate(x).abs();
    smooth_step((s - inner) / (geo.omega_half_width - inner)).0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrectionReport {
    /// Sup of `div u − h` in real space.
    pub div_residual: f64,
    /// Largest `|u|` outside ω on the grid.
    pub max_outside: f64,
    /// Largest `|∫u dx|`.
    pub mean: f64,
    /// Largest `|u|` at the first and last samples.
    pub endpoint: f64,
    /// Largest `|α|`.
    pub alpha: f64,
}

/// Flux of `∇θ` through the far line, from the modes constant along it.
fn far_flux(theta: &SpectralScalar, geo: &StripGeometry) -> f64 {
    let d = geo.direction;
    let x = geo.far_line_point();
    let n = geo.normal();
    let len = geo.wavenumber();
    let mut flux = 0.0;
    for (i, k) in theta.grid().modes() {
        if k[0] * d[0] + k[1] * d[1] != 0 {
            continue;
        }
        let z = xi(k);
        let g = Complex64::new(0.0, z[0] * n[0] + z[1] * n[1]) * theta.coeffs()[i];
        let ph = 2.0 * std::f64::consts::PI * (k[0] as f64 * x[0] + k[1] as f64 * x[1]);
        flux += (g * Complex64::from_polar(1.0, ph)).re * len;
    }
    flux
}

/// Vector field `u` with `div u = h`, `supp u ⊂ ω` and zero mean, for one snapshot.
///
/// `u = ∇θ − ∇⊥(ηΨ)` with `Δθ = h` and `∇⊥Ψ = ∇θ` wherever `h` vanishes on whole lines.
pub fn correction_snapshot(h: &SpectralScalar, geo: &StripGeometry, inner: f64) -> Result<(SpectralVector, f64)> {
    let grid = h.grid();
    let tol = 1e-10 * (1.0 + h.coeffs().iter().map(|z| z.norm()).fold(0.0, f64::max));
    if h.get([0, 0]).norm() > tol {
        return Err(Error::Precondition(format!("source has nonzero mean {:.3e}", h.get([0, 0]).re)));
    }
    if !(inner > geo.d && inner < geo.omega_half_width) {
        return Err(Error::InvalidInput(format!("inner half-width {inner} must lie in ({}, {})", geo.d, geo.omega_half_width)));
    }
    let theta = h.map_modes(|k, z| if k == [0, 0] { Complex64::new(0.0, 0.0) } else { -z / (xi_norm(k) * xi_norm(k)) });
    let alpha = far_flux(&theta, geo);
    let scale = 1.0 + theta.coeffs().iter().map(|z| z.norm()).fold(0.0, f64::max);
    if alpha.abs() > 1e-9 * scale {
        return Err(Error::Precondition(format!("flux of ∇θ through the far line is {alpha:.3e}; no correction exists")));
    }
    let e = geo.tangent();
    let psi = theta.map_modes(|k, z| {
        let x = xi(k);
        let along = x[0] * e[0] + x[1] * e[1];
        if (k[0] * geo.direction[0] + k[1] * geo.direction[1]) == 0 {
            Complex64::new(0.0, 0.0)
        } else {
            // ∂_e Ψ = e·J∇θ with J the quarter turn
            z * ((-e[0] * x[1] + e[1] * x[0]) / along)
        }
    });
    let psi_r = to_real(&psi);
    let mut vals = psi_r.values().to_vec();
    for (i, x) in grid.nodes() {
        vals[i] *= cutoff(geo, inner, x);
    }
    let eta_psi = to_spectral(&ScalarField::from_values(grid, vals)?)?;
    let grad = crate::spectral::gradient(&theta);
    let u = grad.axpy(-1.0, &curl_scal(&eta_psi))?;
    Ok((u, alpha))
}

/// Charge correction at every sample of `h`.
pub fn charge_correction(h: &[SpectralScalar], omega: &ControlSet, d: f64, inner: f64) -> Result<(Vec<SpectralVector>, CorrectionReport)> {
    let geo = StripGeometry::new(omega, d)?;
    let mut out = Vec::with_capacity(h.len());
    let mut rep = CorrectionReport { div_residual: 0.0, max_outside: 0.0, mean: 0.0, endpoint: 0.0, alpha: 0.0 };
    for hs in h {
        let (u, alpha) = correction_snapshot(hs, &geo, inner)?;
        rep.alpha = rep.alpha.max(alpha.abs());
        let res = to_real(&divergence(&u).axpy(-1.0, hs)?).sup_norm();
        rep.div_residual = rep.div_residual.max(res);
        let m = u.get([0, 0]);
        rep.mean = rep.mean.max(m[0].norm().max(m[1].norm()));
        let ur = to_real_vector(&u);
        for (i, x) in ur.grid().nodes() {
            if !omega.contains(x) {
                let a = ur.component_values(0)[i].hypot(ur.component_values(1)[i]);
                rep.max_outside = rep.max_outside.max(a);
            }
        }
        out.push(u);
    }
    if let (Some(a), Some(b)) = (out.first(), out.last()) {
        rep.endpoint = to_real_vector(a).sup_norm().max(to_real_vector(b).sup_norm());
    }
    Ok((out, rep))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strip() -> ControlSet {
        ControlSet::strip([1, 0], [0.0, 0.5], 0.4).unwrap()
    }

    #[test]
    fn bump_moments() {
        for c in [LightSpeed::Infinite, LightSpeed::new(2.0).unwrap()] {
            let b = make_bumps(128, c).unwrap();
            assert!(b.moments.residual() < 1e-8, "{:?}", b.moments);
            assert!(b.z(v2(0.2, 0.1)) > 0.0 && b.z(v2(1.0, 0.0)) == 0.0);
        }
        assert!(make_bumps(32, LightSpeed::Infinite).is_err());
    }

    fn v2(a: f64, b: f64) -> [f64; 2] {
        [a, b]
    }

    #[test]
    fn lifted_current_moments() {
        let g = GridSpec::new(16, 5).unwrap();
        let bumps = make_bumps(128, LightSpeed::new(3.0).unwrap()).unwrap();
        let j = VectorField::from_fn(g, |x| [(6.0 * x[0]).sin(), x[1] * x[0]]);
        let (rho, cur) = lift_current(&j, &bumps).moments();
        assert!(rho.sup_norm() < 1e-8);
        assert!(cur.max_abs_diff(&j).unwrap() < 1e-8);
        let (rho, cur) = lift_current(&VectorField::zeros(g), &bumps).moments();
        assert_eq!(rho.sup_norm(), 0.0);
        assert_eq!(cur.sup_norm(), 0.0);
    }

    #[test]
    fn smooth_step_derivatives() {
        for u in [0.1, 0.3, 0.5, 0.77, 0.95] {
            let h = 1e-6;
            let (_, d, dd) = smooth_step(u);
            let fd = (smooth_step(u + h).0 - smooth_step(u - h).0) / (2.0 * h);
            let fdd = (smooth_step(u + h).1 - smooth_step(u - h).1) / (2.0 * h);
            assert!((d - fd).abs() < 1e-6 * (1.0 + d.abs()));
            assert!((dd - fdd).abs() < 1e-5 * (1.0 + dd.abs()));
        }
        assert_eq!(smooth_step(-1.0).0, 0.0);
        assert_eq!(smooth_step(2.0).0, 1.0);
    }

    #[test]
    fn harmonic_mode_closed_forms() {
        let geo = StripGeometry::new(&strip(), 0.15).unwrap();
        for mode in [
            HarmonicMode { wave: Wave::Cos, growing: false },
            HarmonicMode { wave: Wave::Sin, growing: true },
        ] {
            for x in [[0.1, 0.2], [0.3, 0.45], [0.77, 0.6], [0.5, 0.95], [0.2, 0.36]] {
                let v = mode.eval(&geo, x);
                let h = 1e-5;
                let f = |y: [f64; 2]| mode.eval(&geo, y).phi;
                let gx = (f([x[0] + h, x[1]]) - f([x[0] - h, x[1]])) / (2.0 * h);
                let gy = (f([x[0], x[1] + h]) - f([x[0], x[1] - h])) / (2.0 * h);
                let g = |y: [f64; 2]| mode.eval(&geo, y).grad;
                let lap = (g([x[0] + h, x[1]])[0] - g([x[0] - h, x[1]])[0] + g([x[0], x[1] + h])[1] - g([x[0], x[1] - h])[1]) / (2.0 * h);
                assert!((gx - v.grad[0]).abs() < 1e-5 * (1.0 + gx.abs()), "{x:?}");
                assert!((gy - v.grad[1]).abs() < 1e-5 * (1.0 + gy.abs()), "{x:?}");
                assert!((lap - v.lap).abs() < 1e-4 * (1.0 + lap.abs()), "{x:?} {lap} {}", v.lap);
                if !geo.in_band(x) {
                    assert!(v.lap.abs() < 1e-10 * (1.0 + v.phi.abs()));
                }
            }
        }
    }

    #[test]
    fn accel_field_conditions() {
        let g = GridSpec::new(128, 63).unwrap();
        let w = build_accel_field(&strip(), 0.2, g).unwrap();
        let r = w.report;
        assert!(r.valid, "{r:?}");
        assert!(r.flux.abs() < 1e-12 && r.circulation.abs() < 1e-12);
        // the unit normal is harmonic and nonvanishing but carries flux
        let n = check_accel_field(&|_| [0.0, 1.0], &w.geometry, g).unwrap();
        assert!(n.curl_residual < 1e-12 && n.min_norm_off_band > 0.0);
        assert!((n.flux.abs() - 1.0).abs() < 1e-12 && !n.valid);
    }

    #[test]
    fn correction_zero_and_single_mode() {
        let g = GridSpec::new(256, 127).unwrap();
        let omega = strip();
        let (u, rep) = charge_correction(&[SpectralScalar::zeros(g)], &omega, 0.2, 0.22).unwrap();
        assert_eq!(u[0].energy(), 0.0);
        assert_eq!(rep.max_outside, 0.0);
        let geo = StripGeometry::new(&omega, 0.2).unwrap();
        let mode = HarmonicMode { wave: Wave::Cos, growing: false };
        let h = to_spectral(&ScalarField::from_fn(g, |x| mode.eval(&geo, x).lap)).unwrap();
        let (u, rep) = charge_correction(&[h.clone()], &omega, 0.2, 0.22).unwrap();
        assert!(rep.div_residual < 1e-8, "{rep:?}");
        assert!(rep.mean < 1e-14);
        let scale = to_real_vector(&u[0]).sup_norm();
        assert!(rep.max_outside < 1e-6 * scale, "{} vs {scale}", rep.max_outside);
    }

    #[test]
    fn correction_rejects_flux_and_mean() {
        let g = GridSpec::new(32, 15).unwrap();
        let omega = strip();
        // h = ∂₂ of a function of x₂ alone leaves flux through the far line
        let h = to_spectral(&ScalarField::from_fn(g, |x| {
            let s = ((x[1] - 0.5) / 0.15).clamp(-1.0, 1.0);
            crate::control::bump(s.abs()).1 * s.signum()
        }))
        .unwrap();
        let h = h.map_modes(|k, z| if k == [0, 0] { Complex64::new(0.0, 0.0) } else { z });
        assert!(matches!(correction_snapshot(&h, &StripGeometry::new(&omega, 0.2).unwrap(), 0.22), Err(Error::Precondition(_))));
        let one = to_spectral(&ScalarField::constant(g, 1.0)).unwrap();
        assert!(matches!(correction_snapshot(&one, &StripGeometry::new(&omega, 0.2).unwrap(), 0.22), Err(Error::Precondition(_))));
    }
}
