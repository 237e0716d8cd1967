//! Weighted-particle transport with an absorbing sphere, the neutral fill that
//! keeps the total charge fixed, and the Picard iteration around a strip plan.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::{relativistic_velocity, rk4_step, FieldProvider, ForceSpec, LightSpeed, PhaseState};
use crate::control::bump;
use crate::error::{Error, Result};
use crate::maxwell::{evolve_spectral, poisson_spectral, SpectralSources, SpectralState};
use crate::plan::{build_strip_plan, magnetic_arc, SegmentMode, StripPlan, StripPlanConfig};
use crate::reference::smooth_step;
use crate::spectral::{
    to_real, to_real_vector, to_spectral, to_spectral_vector, torus_distance, wrap_delta, wrap_unit, GridSpec, ScalarField,
    VectorField,
};

/// Speed and incidence thresholds of the incoming sets on the sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaSets {
    /// `γ⁻`: `|v| > outer_speed`, `v·ν < outer_cos·|v|`.
    pub outer_speed: f64,
    pub outer_cos: f64,
    /// `γ²⁻`: `|v| ≥ mid_speed`, `v·ν ≤ mid_cos·|v|`.
    pub mid_speed: f64,
    pub mid_cos: f64,
    /// `γ³⁻`: `|v| ≥ core_speed`, `v·ν ≤ core_cos·|v|`.
    pub core_speed: f64,
    pub core_cos: f64,
}

impl Default for GammaSets {
    fn default() -> Self {
        Self { outer_speed: 0.5, outer_cos: -0.1, mid_speed: 1.0, mid_cos: -1.0 / 8.0, core_speed: 2.0, core_cos: -0.2 }
    }
}

impl GammaSets {
    pub fn validate(&self) -> Result<()> {
        let nested = self.outer_speed < self.mid_speed
            && self.mid_speed < self.core_speed
            && self.outer_cos > self.mid_cos
            && self.mid_cos > self.core_cos
            && self.core_cos > -1.0
            && self.outer_cos < 0.0
            && self.outer_speed >= 0.0;
        if nested {
            Ok(())
        } else {
            Err(Error::InvalidInput("incoming sets must be strictly nested".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Incidence {
    /// In `γ³⁻`.
    Core,
    /// In `γ²⁻` but not `γ³⁻`.
    Mid,
    /// In `γ⁻` but not `γ²⁻`.
    Outer,
    /// Outgoing or tangent: `v·ν ≥ 0`.
    Outgoing,
    None,
}

impl Incidence {
    pub fn incoming(self) -> bool {
        matches!(self, Self::Core | Self::Mid | Self::Outer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbsorptionConfig {
    pub center: [f64; 2],
    /// The absorbing sphere has radius `2 r0`.
    pub r0: f64,
    pub horizon: f64,
    #[serde(default)]
    pub sets: GammaSets,
    /// Distance tolerance for points said to lie on the sphere.
    pub on_sphere_tol: f64,
}

impl AbsorptionConfig {
    pub fn new(center: [f64; 2], r0: f64, horizon: f64) -> Result<Self> {
        let cfg = Self { center, r0, horizon, sets: GammaSets::default(), on_sphere_tol: 1e-8 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r0 > 0.0 && self.r0 < 0.25) || !(self.horizon > 0.0) {
            return Err(Error::InvalidInput("need 0 < r0 < 1/4 and a positive horizon".into()));
        }
        self.sets.validate()
    }

    pub fn radius(&self) -> f64 {
        2.0 * self.r0
    }

    /// Outward normal `ν(x)` at the nearest image of the center.
    pub fn normal(&self, x: [f64; 2]) -> [f64; 2] {
        let d = [wrap_delta(x[0] - self.center[0]), wrap_delta(x[1] - self.center[1])];
        let r = d[0].hypot(d[1]);
        [d[0] / r, d[1] / r]
    }

    pub fn classify(&self, x: [f64; 2], v: [f64; 2]) -> Result<Incidence> {
        let r = torus_distance(x, self.center);
        if (r - self.radius()).abs() > self.on_sphere_tol {
            return Err(Error::InvalidInput(format!("point at distance {r} is off the sphere of radius {}", self.radius())));
        }
        let nu = self.normal(x);
        let s = v[0].hypot(v[1]);
        let vn = v[0] * nu[0] + v[1] * nu[1];
        let g = &self.sets;
        Ok(if vn >= 0.0 {
            Incidence::Outgoing
        } else if s >= g.core_speed && vn <= g.core_cos * s {
            Incidence::Core
        } else if s >= g.mid_speed && vn <= g.mid_cos * s {
            Incidence::Mid
        } else if s > g.outer_speed && vn < g.outer_cos * s {
            Incidence::Outer
        } else {
            Incidence::None
        })
    }

    /// `U(x, v)`: one off `γ²⁻`, zero on `γ³⁻`, smooth in speed and incidence.
    pub fn opacity_u(&self, x: [f64; 2], v: [f64; 2]) -> f64 {
        let s = v[0].hypot(v[1]);
        if s == 0.0 {
            return 1.0;
        }
        let nu = self.normal(x);
        let q = (v[0] * nu[0] + v[1] * nu[1]) / s;
        let g = &self.sets;
        let speed = smooth_step((s - g.mid_speed) / (g.core_speed - g.mid_speed)).0;
        let angle = smooth_step((g.mid_cos - q) / (g.mid_cos - g.core_cos)).0;
        1.0 - speed * angle
    }

    /// `Υ`: zero near both ends of `[0, T]`, one on `[T/24, 23T/24]`.
    pub fn upsilon(&self, t: f64) -> f64 {
        let tt = self.horizon;
        let ramp = tt / 24.0 - tt / 48.0;
        let up = smooth_step((t - tt / 48.0) / ramp).0;
        let down = smooth_step((47.0 * tt / 48.0 - t) / ramp).0;
        up.min(down)
    }

    /// `Υ̃`: zero on `[0, T/100]`, one from `T/48` on.
    pub fn upsilon_tilde(&self, t: f64) -> f64 {
        let tt = self.horizon;
        smooth_step((t - tt / 100.0) / (tt / 48.0 - tt / 100.0)).0
    }

    pub fn opacity(&self, t: f64, x: [f64; 2], v: [f64; 2]) -> f64 {
        let y = self.upsilon(t);
        (1.0 - y) + y * self.opacity_u(x, v)
    }

    fn distance(&self, x: [f64; 2]) -> f64 {
        torus_distance(x, self.center)
    }

    pub fn inside(&self, x: [f64; 2]) -> bool {
        self.distance(x) < self.radius()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub x: [f64; 2],
    pub v: [f64; 2],
    pub w: f64,
}

impl Particle {
    pub fn state(&self) -> PhaseState {
        PhaseState::new(self.x, self.v)
    }
}

/// Compensated sum.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut comp) = (0.0f64, 0.0f64);
    for x in values {
        let t = s + x;
        comp += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + comp
}

/// Particles plus the charge taken out of them by absorption and dropping.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticleEnsemble {
    pub particles: Vec<Particle>,
    /// Absorbed charge per original particle, so the tally sums in a fixed order.
    pub absorbed: Vec<f64>,
    /// First `γ³⁻` crossing at or after `T/12`, per original particle.
    pub core_crossing: Vec<Option<f64>>,
    /// Original index of each live particle.
    pub index: Vec<usize>,
}

impl ParticleEnsemble {
    pub fn new(particles: Vec<Particle>) -> Self {
        let n = particles.len();
        Self { particles, absorbed: vec![0.0; n], core_crossing: vec![None; n], index: (0..n).collect() }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    pub fn charge(&self) -> f64 {
        neumaier_sum(self.particles.iter().map(|p| p.w))
    }

    pub fn absorbed_charge(&self) -> f64 {
        neumaier_sum(self.absorbed.iter().copied())
    }

    pub fn max_speed(&self) -> f64 {
        self.particles.iter().map(|p| p.v[0].hypot(p.v[1])).fold(0.0, f64::max)
    }

    /// Removes particles below `floor`, tallying their weight.
    pub fn drop_below(&mut self, floor: f64) {
        let mut keep = Vec::with_capacity(self.particles.len());
        let mut index = Vec::with_capacity(self.index.len());
        for (p, &i) in self.particles.iter().zip(&self.index) {
            if p.w < floor {
                self.absorbed[i] += p.w;
            } else {
                keep.push(*p);
                index.push(i);
            }
        }
        self.particles = keep;
        self.index = index;
    }
}

/// Cloud-in-cell stencil: four nodes and weights.
fn cic(grid: GridSpec, x: [f64; 2]) -> [(usize, f64); 4] {
    let n = grid.n();
    let fx = wrap_unit(x[0]) * n as f64;
    let fy = wrap_unit(x[1]) * n as f64;
    let (i, j) = (fx.floor() as usize % n, fy.floor() as usize % n);
    let (ax, ay) = (fx - fx.floor(), fy - fy.floor());
    let (i1, j1) = ((i + 1) % n, (j + 1) % n);
    [
        (i * n + j, (1.0 - ax) * (1.0 - ay)),
        (i1 * n + j, ax * (1.0 - ay)),
        (i * n + j1, (1.0 - ax) * ay),
        (i1 * n + j1, ax * ay),
    ]
}

/// Bilinear gather matching the deposit.
pub fn gather(field: &[f64], grid: GridSpec, x: [f64; 2]) -> f64 {
    cic(grid, x).iter().map(|&(k, a)| a * field[k]).sum()
}

/// Charge and current moments at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub rho: ScalarField,
    pub j: VectorField,
}

const CHUNK: usize = 4096;

/// CIC deposit of `w` and `w v̂ scale` for `(x, v, w)` triples, merged in chunk order.
fn deposit_weighted(items: &[(PhaseState, f64)], grid: GridSpec, c: LightSpeed) -> Moments {
    let nodes = grid.node_count();
    let density = nodes as f64;
    let parts: Vec<Vec<f64>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut buf = vec![0.0; 3 * nodes];
            for (s, w) in chunk {
                let vh = relativistic_velocity(s.v, c);
                for (k, a) in cic(grid, s.x) {
                    let q = a * w * density;
                    buf[k] += q;
                    buf[nodes + k] += q * vh[0];
                    buf[2 * nodes + k] += q * vh[1];
                }
            }
            buf
        })
        .collect();
    let mut total = vec![0.0; 3 * nodes];
    for p in &parts {
        for (t, x) in total.iter_mut().zip(p) {
            *t += x;
        }
    }
    let rho = ScalarField::from_values(grid, total[..nodes].to_vec()).expect("grid size");
    let j1 = ScalarField::from_values(grid, total[nodes..2 * nodes].to_vec()).expect("grid size");
    let j2 = ScalarField::from_values(grid, total[2 * nodes..].to_vec()).expect("grid size");
    Moments { rho, j: VectorField::from_components(j1, j2).expect("grid size") }
}

pub fn deposit_moments(ens: &ParticleEnsemble, grid: GridSpec, c: LightSpeed) -> Moments {
    deposit_particles(&ens.particles, grid, c)
}

pub fn deposit_particles(particles: &[Particle], grid: GridSpec, c: LightSpeed) -> Moments {
    let items: Vec<(PhaseState, f64)> = particles.iter().map(|p| (p.state(), p.w)).collect();
    deposit_weighted(&items, grid, c)
}

/// Unit-charge fill `μ` inside the sphere: a radial bump in space times a
/// symmetric four-point velocity rule, so its current vanishes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeutralFill {
    pub points: Vec<Particle>,
}

impl NeutralFill {
    pub fn new(cfg: &AbsorptionConfig, rings: usize, speed: f64) -> Self {
        let r = cfg.radius();
        let mut raw = Vec::new();
        for a in 0..rings {
            let rho = r * (a as f64 + 0.5) / rings as f64;
            let count = 4 * (2 * a + 1);
            let w = bump(rho / r).0 * rho;
            for q in 0..count {
                let th = 2.0 * std::f64::consts::PI * (q as f64 + 0.5) / count as f64;
                let x = [cfg.center[0] + rho * th.cos(), cfg.center[1] + rho * th.sin()];
                for v in [[speed, 0.0], [-speed, 0.0], [0.0, speed], [0.0, -speed]] {
                    raw.push(Particle { x, v, w: w / count as f64 });
                }
            }
        }
        let total = neumaier_sum(raw.iter().map(|p| p.w));
        for p in &mut raw {
            p.w /= total;
        }
        Self { points: raw }
    }

    /// Fill particles carrying total charge `lambda`.
    pub fn scaled(&self, lambda: f64) -> impl Iterator<Item = (PhaseState, f64)> + '_ {
        self.points.iter().map(move |p| (p.state(), lambda * p.w))
    }
}

/// Result of the neutral extension at one time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Extension {
    /// Charge `λ` put into the fill.
    pub lambda: f64,
    /// Weight of the live particles inside the sphere.
    pub inside: f64,
    /// Weight factor `1 − Υ̃(t)` kept on particles inside the sphere.
    pub inside_factor: f64,
    /// Total deposited charge.
    pub total: f64,
}

/// The extension `Π`: inside the sphere the particles fade out with `Υ̃`
/// and the fill `λμ` takes up the rest, with `λ` fixing the total charge
/// at `f0_charge`.
pub fn extend_neutral(ens: &ParticleEnsemble, cfg: &AbsorptionConfig, t: f64, f0_charge: f64) -> Extension {
    let keep = 1.0 - cfg.upsilon_tilde(t);
    let inside = neumaier_sum(ens.particles.iter().filter(|p| cfg.inside(p.x)).map(|p| p.w));
    let outside = neumaier_sum(ens.particles.iter().filter(|p| !cfg.inside(p.x)).map(|p| p.w));
    let lambda = f0_charge - outside - keep * inside;
    Extension { lambda, inside, inside_factor: keep, total: outside + keep * inside + lambda }
}

/// Moments of `Π f` at time `t`.
pub fn extended_moments(ens: &ParticleEnsemble, fill: &NeutralFill, cfg: &AbsorptionConfig, t: f64, f0_charge: f64, grid: GridSpec, c: LightSpeed) -> (Moments, Extension) {
    let ext = extend_neutral(ens, cfg, t, f0_charge);
    let mut items: Vec<(PhaseState, f64)> = ens
        .particles
        .iter()
        .map(|p| (p.state(), if cfg.inside(p.x) { ext.inside_factor * p.w } else { p.w }))
        .collect();
    if ext.lambda != 0.0 {
        items.extend(fill.scaled(ext.lambda));
    }
    (deposit_weighted(&items, grid, c), ext)
}

/// Entry times `τ ∈ (0, h]` of `path` into the sphere.
fn inward_crossings(cfg: &AbsorptionConfig, path: &dyn Fn(f64) -> PhaseState, h: f64, travel: f64, out: &mut Vec<f64>) {
    let r = cfg.radius();
    let d0 = cfg.distance(path(0.0).x);
    if d0 - travel > r || d0 + travel < r {
        return;
    }
    let pieces = ((travel / (r / 16.0)).ceil() as usize).max(1);
    let mut prev = (0.0, d0 - r);
    for q in 1..=pieces {
        let tau = h * q as f64 / pieces as f64;
        let cur = (tau, cfg.distance(path(tau).x) - r);
        scan(cfg, path, prev, cur, 0, out);
        prev = cur;
    }
}

/// One sub-interval: bisection on a sign change, splitting when the chord
/// dips inside although both ends are outside.
fn scan(cfg: &AbsorptionConfig, path: &dyn Fn(f64) -> PhaseState, a: (f64, f64), b: (f64, f64), depth: usize, out: &mut Vec<f64>) {
    if a.1 > 0.0 && b.1 <= 0.0 {
        let (mut lo, mut hi) = (a.0, b.0);
        while hi - lo > 1e-10 * (1.0 + hi.abs()) {
            let mid = 0.5 * (lo + hi);
            if cfg.distance(path(mid).x) - cfg.radius() > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        out.push(hi);
    } else if a.1 > 0.0 && b.1 > 0.0 && depth < 8 {
        let (pa, pb) = (path(a.0).x, path(b.0).x);
        let d = [pb[0] - pa[0], pb[1] - pa[1]];
        let w = [wrap_delta(cfg.center[0] - pa[0]), wrap_delta(cfg.center[1] - pa[1])];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let s = if len2 > 0.0 { ((w[0] * d[0] + w[1] * d[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let gap = (w[0] - s * d[0]).hypot(w[1] - s * d[1]);
        if gap < cfg.radius() && s > 0.0 && s < 1.0 {
            let mid = 0.5 * (a.0 + b.0);
            let m = (mid, cfg.distance(path(mid).x) - cfg.radius());
            scan(cfg, path, a, m, depth + 1, out);
            if !(a.1 > 0.0 && m.1 <= 0.0) {
                scan(cfg, path, m, b, depth + 1, out);
            }
        }
    }
}

/// What one step of one particle met on the sphere.
#[derive(Debug, Clone, Copy, Default)]
struct StepEvents {
    absorbed: f64,
    core: Option<f64>,
}

/// Inward crossing times of the sphere along the exact gyration arc from `s`
/// over `[0, h]`, found per periodic image of the sphere in closed form.
fn arc_crossings(cfg: &AbsorptionConfig, s: PhaseState, b: f64, c: LightSpeed, h: f64, images: &mut Vec<[i64; 2]>, out: &mut Vec<f64>) {
    let speed = s.speed();
    if speed == 0.0 || h <= 0.0 {
        return;
    }
    let r = cfg.radius();
    let g = c.lorentz(s.v);
    let u = [s.v[0] / g, s.v[1] / g];
    let travel = speed / g * h;
    if cfg.distance(s.x) - travel > r {
        return;
    }
    let w = b / g;
    let straight = (w * h).abs() < 1e-12 || speed / b.abs() > 1e12;
    let (centre, rho, theta0) = if straight {
        ([0.0; 2], f64::INFINITY, 0.0)
    } else {
        let centre = [s.x[0] + s.v[1] / b, s.x[1] - s.v[0] / b];
        (centre, speed / b.abs(), (s.x[1] - centre[1]).atan2(s.x[0] - centre[0]))
    };
    let point = |tau: f64| {
        if straight {
            [s.x[0] + u[0] * tau, s.x[1] + u[1] * tau]
        } else {
            let a = theta0 - w * tau;
            [centre[0] + rho * a.cos(), centre[1] + rho * a.sin()]
        }
    };
    // Every point of the arc lies within half a piece of a sample.
    let pieces = ((travel / 0.5).ceil() as usize).max(1);
    let margin = r + 0.5 * travel / pieces as f64 + 1e-9;
    images.clear();
    for q in 0..=pieces {
        let x = point(h * q as f64 / pieces as f64);
        let lo = [(x[0] - margin - cfg.center[0]).ceil() as i64, (x[1] - margin - cfg.center[1]).ceil() as i64];
        let hi = [(x[0] + margin - cfg.center[0]).floor() as i64, (x[1] + margin - cfg.center[1]).floor() as i64];
        for k0 in lo[0]..=hi[0] {
            for k1 in lo[1]..=hi[1] {
                images.push([k0, k1]);
            }
        }
    }
    images.sort_unstable();
    images.dedup();
    for k in images.iter() {
        let p = [cfg.center[0] + k[0] as f64, cfg.center[1] + k[1] as f64];
        if straight {
            let d = [s.x[0] - p[0], s.x[1] - p[1]];
            let uu = u[0] * u[0] + u[1] * u[1];
            let du = d[0] * u[0] + d[1] * u[1];
            let disc = du * du - uu * (d[0] * d[0] + d[1] * d[1] - r * r);
            if du < 0.0 && disc > 0.0 {
                let q = -du + disc.sqrt();
                let tau = (d[0] * d[0] + d[1] * d[1] - r * r) / q;
                if (0.0..=h).contains(&tau) {
                    out.push(tau);
                }
            }
            continue;
        }
        let dv = [p[0] - centre[0], p[1] - centre[1]];
        let d = dv[0].hypot(dv[1]);
        if d == 0.0 || d > rho + r || d < (rho - r).abs() {
            continue;
        }
        let a = (rho * rho - r * r + d * d) / (2.0 * d);
        let below = (r - d + rho) * (r + d - rho) / (2.0 * d);
        let half_chord = (below * (rho + a)).max(0.0).sqrt();
        let base = dv[1].atan2(dv[0]);
        let open = half_chord.atan2(a);
        let period = std::f64::consts::TAU / w.abs();
        for phi in [base + open, base - open] {
            let (sin, cos) = phi.sin_cos();
            let x = [centre[0] + rho * cos, centre[1] + rho * sin];
            let vel = [w * rho * sin, -w * rho * cos];
            if vel[0] * (x[0] - p[0]) + vel[1] * (x[1] - p[1]) >= 0.0 {
                continue;
            }
            let mut tau = ((theta0 - phi) * w.signum()).rem_euclid(std::f64::consts::TAU) / w.abs();
            while tau <= h {
                out.push(tau);
                tau += period;
            }
        }
    }
    out.sort_unstable_by(f64::total_cmp);
}

fn apply_crossings(p: &mut Particle, cfg: &AbsorptionConfig, absorb: bool, t: f64, path: &dyn Fn(f64) -> PhaseState, times: &[f64]) -> StepEvents {
    let mut ev = StepEvents::default();
    for &tau in times {
        let s = path(tau);
        let x = s.x;
        let class = match cfg.classify(x, s.v) {
            Ok(c) => c,
            Err(_) => continue,
        };
        if class == Incidence::Core && ev.core.is_none() && t + tau >= cfg.horizon / 12.0 {
            ev.core = Some(t + tau);
        }
        if absorb && class.incoming() {
            let op = cfg.opacity(t + tau, x, s.v);
            let w = p.w * op;
            ev.absorbed += p.w - w;
            p.w = w;
        }
    }
    ev
}

/// Controls for a push.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PushOptions {
    /// Multiply weights by the opacity at inward crossings.
    pub absorb: bool,
    /// Detect crossings; without it or `absorb` the sphere is ignored.
    pub record: bool,
    pub weight_floor: f64,
}

impl Default for PushOptions {
    fn default() -> Self {
        Self { absorb: true, record: true, weight_floor: 1e-14 }
    }
}

fn finish(ens: &mut ParticleEnsemble, events: Vec<StepEvents>, floor: f64) {
    for (k, ev) in events.into_iter().enumerate() {
        let i = ens.index[k];
        ens.absorbed[i] += ev.absorbed;
        if ens.core_crossing[i].is_none() {
            ens.core_crossing[i] = ev.core;
        }
    }
    ens.drop_below(floor);
}

/// RK4 push over `[t0, t1]` in `steps` steps with absorption on inward crossings.
pub fn push_with_absorption(
    ens: &mut ParticleEnsemble,
    fields: &(dyn FieldProvider + Sync),
    c: LightSpeed,
    cfg: &AbsorptionConfig,
    t0: f64,
    t1: f64,
    steps: usize,
    opts: PushOptions,
) -> Result<()> {
    let h = (t1 - t0) / steps.max(1) as f64;
    let events: Vec<StepEvents> = ens
        .particles
        .par_iter_mut()
        .map(|p| {
            let force = ForceSpec::new(fields, c);
            let mut times = Vec::new();
            let mut total = StepEvents::default();
            for q in 0..steps.max(1) {
                if p.w == 0.0 {
                    break;
                }
                let t = t0 + q as f64 * h;
                let s0 = p.state();
                let next = rk4_step(s0, t, h, &force);
                let travel = 1.5 * (next.x[0] - s0.x[0]).hypot(next.x[1] - s0.x[1]) + 1e-12;
                let path = |tau: f64| if tau == 0.0 { s0 } else { rk4_step(s0, t, tau, &force) };
                times.clear();
                if opts.absorb || opts.record {
                    inward_crossings(cfg, &path, h, travel, &mut times);
                }
                let ev = apply_crossings(p, cfg, opts.absorb, t, &path, &times);
                total.absorbed += ev.absorbed;
                total.core = total.core.or(ev.core);
                p.x = next.x;
                p.v = next.v;
            }
            total
        })
        .collect();
    if ens.particles.iter().any(|p| !(p.x[0].is_finite() && p.x[1].is_finite() && p.v[0].is_finite() && p.v[1].is_finite())) {
        return Err(Error::NonFinite("particle trajectory".into()));
    }
    finish(ens, events, opts.weight_floor);
    Ok(())
}

/// Sampled perturbation fields on the grid, gathered bilinearly.
#[derive(Debug, Clone)]
pub struct GridFields {
    pub t0: f64,
    pub dt: f64,
    pub e: Vec<VectorField>,
    /// Magnetic input `b/c`.
    pub b: Vec<ScalarField>,
}

impl GridFields {
    fn at(&self, t: f64, x: [f64; 2]) -> ([f64; 2], f64) {
        let grid = self.b[0].grid();
        let last = self.e.len() - 1;
        let u = ((t - self.t0) / self.dt).clamp(0.0, last as f64);
        let s = (u.floor() as usize).min(last.saturating_sub(1));
        let w = if last == 0 { 0.0 } else { u - s as f64 };
        let s1 = (s + 1).min(last);
        let g = |f: &[f64], f1: &[f64]| (1.0 - w) * gather(f, grid, x) + w * gather(f1, grid, x);
        (
            [
                g(self.e[s].component_values(0), self.e[s1].component_values(0)),
                g(self.e[s].component_values(1), self.e[s1].component_values(1)),
            ],
            g(self.b[s].values(), self.b[s1].values()),
        )
    }
}

/// Reference force of the strip plan plus the perturbation fields.
struct PlanField<'a> {
    plan: &'a StripPlan,
    pert: Option<&'a GridFields>,
}

impl FieldProvider for PlanField<'_> {
    fn fields(&self, t: f64, x: [f64; 2]) -> ([f64; 2], f64) {
        let e = self.plan.poisson_field(t, x);
        let (pe, pb) = self.pert.map_or(([0.0; 2], 0.0), |f| f.at(t, x));
        ([e[0] + pe[0], e[1] + pe[1]], self.plan.config.magnetic + pb)
    }
}

/// Split step on a wait: half kicks by the perturbation force around an
/// exact arc in the constant magnetic field.
fn wait_push(
    ens: &mut ParticleEnsemble,
    plan: &StripPlan,
    pert: Option<&GridFields>,
    cfg: &AbsorptionConfig,
    t0: f64,
    steps: usize,
    h: f64,
    opts: PushOptions,
) {
    let c = plan.light_speed();
    let b = plan.config.magnetic;
    let kick = |s: &mut PhaseState, t: f64, dt: f64| {
        if let Some(f) = pert {
            let (e, pb) = f.at(t, s.x);
            let vh = relativistic_velocity(s.v, c);
            s.v[0] += dt * (e[0] + vh[1] * pb);
            s.v[1] += dt * (e[1] - vh[0] * pb);
        }
    };
    let events: Vec<StepEvents> = ens
        .particles
        .par_iter_mut()
        .map(|p| {
            let (mut images, mut times) = (Vec::new(), Vec::new());
            let mut total = StepEvents::default();
            for q in 0..steps {
                if p.w == 0.0 {
                    break;
                }
                let t = t0 + q as f64 * h;
                let mut s = p.state();
                kick(&mut s, t, 0.5 * h);
                let start = s;
                let path = |tau: f64| magnetic_arc(start, b, c, tau);
                times.clear();
                if opts.absorb || opts.record {
                    arc_crossings(cfg, start, b, c, h, &mut images, &mut times);
                }
                let ev = apply_crossings(p, cfg, opts.absorb, t, &path, &times);
                total.absorbed += ev.absorbed;
                total.core = total.core.or(ev.core);
                let mut s = magnetic_arc(start, b, c, h);
                kick(&mut s, t + h, 0.5 * h);
                s = s.wrapped();
                p.x = s.x;
                p.v = s.v;
            }
            total
        })
        .collect();
    finish(ens, events, opts.weight_floor);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PicardConfig {
    /// Total charge of the initial datum.
    pub kappa: f64,
    /// Speed bound of the initial datum.
    pub data_speed: f64,
    /// Velocity support bound `R` checked on every iterate.
    pub velocity_bound: f64,
    pub particles: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Fixed-point tolerance on the relative moment difference.
    pub tol: f64,
    /// Moment sampling interval on waits.
    pub sample_dt: f64,
    /// Split steps per sampling interval on waits.
    pub substeps: usize,
    /// Moment samples per kick.
    pub kick_samples: usize,
    /// RK4 steps per kick sample.
    pub kick_substeps: usize,
    pub fill_rings: usize,
    pub weight_floor: f64,
    /// Particles followed without absorption for the `γ³⁻` census.
    pub census_particles: usize,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            kappa: 1e-3,
            data_speed: 4.0,
            velocity_bound: 8192.0,
            particles: 100_000,
            seed: 7,
            max_iter: 6,
            tol: 1e-10,
            sample_dt: 0.02,
            substeps: 4,
            kick_samples: 8,
            kick_substeps: 16,
            fill_rings: 8,
            weight_floor: 1e-14,
            census_particles: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbsorbRunConfig {
    #[serde(default)]
    pub strip: StripPlanConfig,
    #[serde(default)]
    pub picard: PicardConfig,
}

impl Default for AbsorbRunConfig {
    fn default() -> Self {
        Self { strip: StripPlanConfig::default(), picard: PicardConfig::default() }
    }
}

/// Sample times of one plan segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleSpan {
    pub start: f64,
    pub dt: f64,
    pub intervals: usize,
    pub kick: bool,
}

/// Everything fixed across Picard iterations.
pub struct AbsorbProblem {
    pub plan: StripPlan,
    pub absorption: AbsorptionConfig,
    pub picard: PicardConfig,
    pub f0: ParticleEnsemble,
    pub f0_charge: f64,
    pub fill: NeutralFill,
    pub spans: Vec<SampleSpan>,
    pub e0: VectorField,
}

/// Smooth datum `κ (1 + cos(2πx₁)/2)(1 − |v|²/s²)²` on `T² × B(0, s)`, sampled.
pub fn sample_datum(n: usize, kappa: f64, speed: f64, seed: u64) -> ParticleEnsemble {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = Vec::with_capacity(n);
    while ps.len() < n {
        let x = [rng.gen::<f64>(), rng.gen::<f64>()];
        let v = [speed * (2.0 * rng.gen::<f64>() - 1.0), speed * (2.0 * rng.gen::<f64>() - 1.0)];
        let r2 = (v[0] * v[0] + v[1] * v[1]) / (speed * speed);
        if r2 >= 1.0 {
            continue;
        }
        let w = (1.0 + 0.5 * (2.0 * std::f64::consts::PI * x[0]).cos()) * (1.0 - r2).powi(2);
        ps.push(Particle { x, v, w });
    }
    let total = neumaier_sum(ps.iter().map(|p| p.w));
    for p in &mut ps {
        p.w *= kappa / total;
    }
    ParticleEnsemble::new(ps)
}

impl AbsorbProblem {
    pub fn new(cfg: &AbsorbRunConfig) -> Result<Self> {
        let pc = &cfg.picard;
        if pc.particles == 0 || pc.substeps == 0 || pc.kick_samples == 0 || pc.kick_substeps == 0 {
            return Err(Error::InvalidInput("particle and step counts must be positive".into()));
        }
        if !(pc.kappa >= 0.0) || !(pc.data_speed > 0.0) || !(pc.sample_dt > 0.0) || !(pc.tol > 0.0) {
            return Err(Error::InvalidInput("data scale, speed, sampling and tolerance must be positive".into()));
        }
        if pc.velocity_bound < 2.0 * pc.data_speed {
            return Err(Error::InvalidInput("velocity bound must cover twice the data speed".into()));
        }
        let plan = build_strip_plan(&cfg.strip)?;
        let absorption = AbsorptionConfig::new(plan.config.target_center, plan.config.target_radius, plan.t_end)?;
        let f0 = sample_datum(pc.particles, pc.kappa, pc.data_speed, pc.seed);
        let f0_charge = f0.charge();
        let spans = plan
            .segments
            .iter()
            .map(|seg| match seg.mode {
                SegmentMode::PoissonAccelerate => {
                    SampleSpan { start: seg.start, dt: seg.duration / pc.kick_samples as f64, intervals: pc.kick_samples, kick: true }
                }
                _ => {
                    let n = (seg.duration / pc.sample_dt).ceil() as usize;
                    SampleSpan { start: seg.start, dt: seg.duration / n as f64, intervals: n, kick: false }
                }
            })
            .collect();
        let grid = plan.grid;
        let rho0 = deposit_moments(&f0, grid, plan.light_speed()).rho;
        let e0 = to_real_vector(&poisson_spectral(&to_spectral(&rho0)?));
        let fill = NeutralFill::new(&absorption, pc.fill_rings, 1.0);
        Ok(Self { plan, absorption, picard: pc.clone(), f0, f0_charge, fill, spans, e0 })
    }

    pub fn grid(&self) -> GridSpec {
        self.plan.grid
    }
}

/// Moments of an iterate at every sample time, per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentHistory {
    pub spans: Vec<Vec<Moments>>,
}

impl MomentHistory {
    /// Sup over samples of `|Δρ|_∞ + |Δj|_∞`.
    pub fn distance(&self, other: &MomentHistory) -> f64 {
        self.spans
            .iter()
            .flatten()
            .zip(other.spans.iter().flatten())
            .map(|(a, b)| a.rho.max_abs_diff(&b.rho).unwrap_or(f64::INFINITY) + a.j.max_abs_diff(&b.j).unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    pub fn scale(&self) -> f64 {
        self.spans.iter().flatten().map(|m| m.rho.sup_norm() + m.j.sup_norm()).fold(0.0, f64::max)
    }
}

/// Charge bookkeeping of one iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChargeLedger {
    pub initial: f64,
    pub surviving: f64,
    pub absorbed: f64,
    /// `|initial − surviving − absorbed| / initial`.
    pub relative_defect: f64,
    /// Largest `|∫Πf − ∫f₀| / ∫f₀` over samples.
    pub extension_defect: f64,
}

/// One transported iterate.
#[derive(Debug, Clone)]
pub struct Iterate {
    pub moments: MomentHistory,
    pub ensemble: ParticleEnsemble,
    pub ledger: ChargeLedger,
    pub max_speed: f64,
    /// Largest fill charge over the run.
    pub max_fill: f64,
}

/// Maxwell fields of the perturbation moments, from `(E₀, 0)`.
pub fn perturbation_fields(problem: &AbsorbProblem, g: &MomentHistory) -> Result<Vec<GridFields>> {
    let grid = problem.grid();
    let c = problem.plan.config.c;
    let mut state = SpectralState { t: 0.0, e: to_spectral_vector(&problem.e0)?, b: crate::spectral::SpectralScalar::zeros(grid) };
    let mut out = Vec::with_capacity(problem.spans.len());
    for (span, moments) in problem.spans.iter().zip(&g.spans) {
        let rho = moments.iter().map(|m| to_spectral(&m.rho)).collect::<Result<Vec<_>>>()?;
        let j = moments.iter().map(|m| to_spectral_vector(&m.j)).collect::<Result<Vec<_>>>()?;
        let src = SpectralSources::new(span.start, span.dt, rho, j)?;
        state.t = span.start;
        let real = |s: &SpectralState| (to_real_vector(&s.e), to_real(&s.b).scaled(1.0 / c));
        let (e0, b0) = real(&state);
        let (mut es, mut bs) = (vec![e0], vec![b0]);
        state = evolve_spectral(&state, c, &src, span.start + span.dt * span.intervals as f64, |s| {
            let (e, b) = real(s);
            es.push(e);
            bs.push(b);
        })?;
        out.push(GridFields { t0: span.start, dt: span.dt, e: es, b: bs });
    }
    Ok(out)
}

/// Pushes `ens` through every plan segment, calling `sample` at each sample
/// time with the span index.
fn run_plan(
    problem: &AbsorbProblem,
    ens: &mut ParticleEnsemble,
    pert: Option<&[GridFields]>,
    opts: PushOptions,
    mut sample: impl FnMut(&ParticleEnsemble, f64, usize),
) -> Result<f64> {
    let c = problem.plan.light_speed();
    let cfg = &problem.absorption;
    let mut max_speed = ens.max_speed();
    for (k, span) in problem.spans.iter().enumerate() {
        let fields = pert.map(|p| &p[k]);
        sample(ens, span.start, k);
        for q in 0..span.intervals {
            let t = span.start + q as f64 * span.dt;
            if span.kick {
                let field = PlanField { plan: &problem.plan, pert: fields };
                push_with_absorption(ens, &field, c, cfg, t, t + span.dt, problem.picard.kick_substeps, opts)?;
            } else {
                let n = problem.picard.substeps;
                wait_push(ens, &problem.plan, fields, cfg, t, n, span.dt / n as f64, opts);
            }
            max_speed = max_speed.max(ens.max_speed());
            sample(ens, t + span.dt, k);
        }
    }
    Ok(max_speed)
}

/// Transports `f₀` through the plan under `pert` (none for free transport),
/// recording the extended moments at every sample.
pub fn transport(problem: &AbsorbProblem, pert: Option<&[GridFields]>, absorb: bool) -> Result<Iterate> {
    let grid = problem.grid();
    let c = problem.plan.light_speed();
    let cfg = &problem.absorption;
    let opts = PushOptions { absorb, record: absorb, weight_floor: problem.picard.weight_floor };
    let mut ens = problem.f0.clone();
    let mut spans: Vec<Vec<Moments>> = problem.spans.iter().map(|s| Vec::with_capacity(s.intervals + 1)).collect();
    let mut max_fill: f64 = 0.0;
    let mut ext_defect: f64 = 0.0;
    let max_speed = run_plan(problem, &mut ens, pert, opts, |ens, t, k| {
        let (m, ext) = extended_moments(ens, &problem.fill, cfg, t, problem.f0_charge, grid, c);
        max_fill = max_fill.max(ext.lambda);
        ext_defect = ext_defect.max((ext.total - problem.f0_charge).abs() / problem.f0_charge.max(f64::MIN_POSITIVE));
        spans[k].push(m);
    })?;
    let surviving = ens.charge();
    let absorbed = ens.absorbed_charge();
    let initial = problem.f0_charge;
    let ledger = ChargeLedger {
        initial,
        surviving,
        absorbed,
        relative_defect: (initial - surviving - absorbed).abs() / initial.max(f64::MIN_POSITIVE),
        extension_defect: ext_defect,
    };
    Ok(Iterate { moments: MomentHistory { spans }, ensemble: ens, ledger, max_speed, max_fill })
}

/// Characteristics of the first `count` particles of `f₀` under `pert`
/// without absorption; counts those meeting `γ³⁻` during `[T/12, 11T/12]`.
pub fn crossing_census(problem: &AbsorbProblem, pert: Option<&[GridFields]>, count: usize) -> Result<CrossingCensus> {
    let n = count.min(problem.f0.particles.len());
    let mut particles = problem.f0.particles[..n].to_vec();
    for p in &mut particles {
        p.w = 1.0;
    }
    let mut ens = ParticleEnsemble::new(particles);
    let opts = PushOptions { absorb: false, record: true, weight_floor: 0.0 };
    run_plan(problem, &mut ens, pert, opts, |_, _, _| {})?;
    let t_end = problem.plan.t_end;
    let window = (t_end / 12.0, 11.0 * t_end / 12.0);
    let crossed = ens.core_crossing.iter().filter(|c| c.is_some_and(|t| t <= window.1)).count();
    Ok(CrossingCensus { window, total: n, crossed, fraction: crossed as f64 / n.max(1) as f64 })
}

/// The operator `𝒱`: fields from the moments of `g`, then transport of `f₀`
/// with absorption and the neutral extension.
pub fn picard_step(problem: &AbsorbProblem, g: &MomentHistory) -> Result<Iterate> {
    let fields = perturbation_fields(problem, g)?;
    transport(problem, Some(&fields), true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Sup-norm moment difference to the previous iterate.
    pub residual: f64,
    pub relative_residual: f64,
    pub ledger: ChargeLedger,
    pub max_speed: f64,
}

/// `γ³⁻` census over characteristics of the sampled initial particles.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossingCensus {
    pub window: (f64, f64),
    pub total: usize,
    pub crossed: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedPointReport {
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    /// Residuals strictly decrease over every recorded iteration.
    pub monotone: bool,
    pub census: CrossingCensus,
    /// Weight of live particles outside `ω` at `T`, relative to `∫f₀`.
    pub outside_fraction: f64,
    pub velocity_bound_holds: bool,
    #[serde(skip)]
    pub last: Option<Iterate>,
}

/// Picard iteration from the free-transport iterate.
pub fn fixed_point_solve(problem: &AbsorbProblem, mut log: impl FnMut(&IterationRecord)) -> Result<FixedPointReport> {
    let mut prev = transport(problem, None, false)?;
    let mut fields = None;
    let scale = prev.moments.scale().max(f64::MIN_POSITIVE);
    let mut records = Vec::new();
    let mut converged = false;
    let mut bound_ok = prev.max_speed <= problem.picard.velocity_bound;
    for it in 1..=problem.picard.max_iter {
        let pert = perturbation_fields(problem, &prev.moments)?;
        let next = transport(problem, Some(&pert), true)?;
        fields = Some(pert);
        let residual = next.moments.distance(&prev.moments);
        let rec = IterationRecord { iteration: it, residual, relative_residual: residual / scale, ledger: next.ledger, max_speed: next.max_speed };
        log(&rec);
        records.push(rec);
        bound_ok &= next.max_speed <= problem.picard.velocity_bound;
        prev = next;
        if rec.relative_residual < problem.picard.tol {
            converged = true;
            break;
        }
    }
    let monotone = records.windows(2).all(|w| w[1].residual < w[0].residual);
    let census = crossing_census(problem, fields.as_deref(), problem.picard.census_particles)?;
    let outside = neumaier_sum(prev.ensemble.particles.iter().filter(|p| !problem.plan.omega.contains(p.x)).map(|p| p.w));
    Ok(FixedPointReport {
        iterations: records,
        converged,
        monotone,
        census,
        outside_fraction: outside / problem.f0_charge.max(f64::MIN_POSITIVE),
        velocity_bound_holds: bound_ok,
        last: Some(prev),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characteristics::ConstantField;

    fn ball() -> AbsorptionConfig {
        AbsorptionConfig::new([0.5, 0.5], 0.1, 1.0).unwrap()
    }

    fn zero() -> ConstantField {
        ConstantField { e: [0.0, 0.0], b: 0.0 }
    }

    #[test]
    fn classifies_points_on_the_sphere() {
        let cfg = ball();
        let x = [0.5, 0.3];
        assert_eq!(cfg.classify(x, [0.0, 3.0]).unwrap(), Incidence::Core);
        assert_eq!(cfg.classify(x, [0.0, 1.5]).unwrap(), Incidence::Mid);
        assert_eq!(cfg.classify(x, [0.0, 0.8]).unwrap(), Incidence::Outer);
        assert_eq!(cfg.classify(x, [0.0, -1.0]).unwrap(), Incidence::Outgoing);
        assert_eq!(cfg.classify(x, [0.0, 0.2]).unwrap(), Incidence::None);
        assert!(cfg.classify([0.5, 0.5], [1.0, 0.0]).is_err());
        // The sphere wraps around the torus.
        let far = AbsorptionConfig::new([0.05, 0.5], 0.1, 1.0).unwrap();
        assert_eq!(far.classify([0.85, 0.5], [3.0, 0.0]).unwrap(), Incidence::Core);
    }

    #[test]
    fn opacity_vanishes_on_the_core_set_inside_the_window() {
        let cfg = ball();
        let x = [0.5, 0.3];
        assert_eq!(cfg.opacity(0.5, x, [0.0, 3.0]), 0.0);
        assert_eq!(cfg.opacity(0.5, x, [0.0, 0.5]), 1.0);
        assert_eq!(cfg.opacity(0.0, x, [0.0, 3.0]), 1.0);
        assert_eq!(cfg.opacity(1.0, x, [0.0, 3.0]), 1.0);
        let mid = cfg.opacity(0.5, x, [0.0, 1.5]);
        assert!(mid > 0.0 && mid < 1.0);
        assert_eq!(cfg.upsilon_tilde(0.005), 0.0);
        assert_eq!(cfg.upsilon_tilde(0.5), 1.0);
    }

    #[test]
    fn rejects_bad_sets() {
        let mut cfg = ball();
        cfg.sets.mid_speed = 3.0;
        assert!(cfg.validate().is_err());
        assert!(AbsorptionConfig::new([0.5, 0.5], 0.3, 1.0).is_err());
    }

    #[test]
    fn head_on_particle_is_absorbed() {
        let cfg = ball();
        let c = LightSpeed::new(1e6).unwrap();
        let mut ens = ParticleEnsemble::new(vec![Particle { x: [0.5, 0.2], v: [0.0, 3.0], w: 1.0 }]);
        push_with_absorption(&mut ens, &zero(), c, &cfg, 0.3, 0.4, 50, PushOptions::default()).unwrap();
        assert!(ens.particles.is_empty());
        assert!((ens.absorbed_charge() - 1.0).abs() < 1e-15);
        let hit = ens.core_crossing[0].unwrap();
        assert!((hit - (0.3 + 0.1 / 3.0)).abs() < 1e-9, "{hit}");
    }

    #[test]
    fn grazing_particle_keeps_its_weight() {
        let cfg = ball();
        let c = LightSpeed::new(1e6).unwrap();
        let r = cfg.radius();
        let offset = r * (1.0f64 - 0.05 * 0.05).sqrt();
        let mut ens = ParticleEnsemble::new(vec![Particle { x: [0.5 + offset, 0.2], v: [0.0, 3.0], w: 1.0 }]);
        push_with_absorption(&mut ens, &zero(), c, &cfg, 0.3, 0.45, 60, PushOptions::default()).unwrap();
        assert_eq!(ens.particles.len(), 1);
        assert_eq!(ens.particles[0].w, 1.0);
        assert_eq!(ens.absorbed_charge(), 0.0);
    }

    #[test]
    fn arc_crossings_match_sampled_bisection() {
        let cfg = ball();
        let c = LightSpeed::new(4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut images, mut exact, mut sampled) = (Vec::new(), Vec::new(), Vec::new());
        let mut seen = 0;
        for _ in 0..2000 {
            let s = PhaseState::new([rng.gen(), rng.gen()], [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)]);
            let b = rng.gen_range(-5.0..5.0);
            let h = rng.gen_range(0.01..0.5);
            exact.clear();
            sampled.clear();
            arc_crossings(&cfg, s, b, c, h, &mut images, &mut exact);
            let path = |tau: f64| magnetic_arc(s, b, c, tau);
            let travel = s.speed() / c.lorentz(s.v) * h * 1.01;
            inward_crossings(&cfg, &path, h, travel, &mut sampled);
            assert_eq!(exact.len(), sampled.len(), "{s:?} b {b} h {h}");
            for (a, q) in exact.iter().zip(&sampled) {
                assert!((a - q).abs() < 1e-8, "{a} vs {q}");
                assert!((cfg.distance(path(*a).x) - cfg.radius()).abs() < 1e-9);
            }
            seen += exact.len();
        }
        assert!(seen > 100);
    }

    #[test]
    fn charge_bookkeeping_is_exact() {
        let cfg = ball();
        let c = LightSpeed::new(2.0).unwrap();
        let ens0 = sample_datum(3000, 1e-3, 4.0, 11);
        let mut ens = ens0.clone();
        let field = ConstantField { e: [0.4, -0.2], b: 1.5 };
        push_with_absorption(&mut ens, &field, c, &cfg, 0.1, 0.6, 100, PushOptions::default()).unwrap();
        let initial = ens0.charge();
        assert!(ens.absorbed_charge() > 0.0);
        let defect = (ens.charge() + ens.absorbed_charge() - initial).abs() / initial;
        assert!(defect < 1e-12, "{defect}");
    }

    #[test]
    fn deposits_of_empty_and_single_particles() {
        let grid = GridSpec::new(16, 7).unwrap();
        let c = LightSpeed::new(1.0).unwrap();
        let m = deposit_moments(&ParticleEnsemble::empty(), grid, c);
        assert!(m.rho.values().iter().all(|&x| x == 0.0));
        let one = ParticleEnsemble::new(vec![Particle { x: [3.0 / 16.0, 5.0 / 16.0], v: [0.0, 0.0], w: 1.0 }]);
        let m = deposit_moments(&one, grid, c);
        let mass: f64 = m.rho.values().iter().sum::<f64>() / grid.node_count() as f64;
        assert!((mass - 1.0).abs() < 1e-14);
        assert_eq!(m.rho.values()[3 * 16 + 5], 256.0);
        assert!(m.j.component_values(0).iter().chain(m.j.component_values(1)).all(|&x| x == 0.0));
    }

    #[test]
    fn fill_has_unit_charge_and_no_current() {
        let cfg = ball();
        let fill = NeutralFill::new(&cfg, 6, 0.7);
        let total = neumaier_sum(fill.points.iter().map(|p| p.w));
        assert!((total - 1.0).abs() < 1e-14);
        assert!(fill.points.iter().all(|p| cfg.inside(p.x)));
        let c = LightSpeed::new(1.0).unwrap();
        let items: Vec<_> = fill.scaled(1.0).collect();
        let m = deposit_weighted(&items, GridSpec::new(16, 7).unwrap(), c);
        let jmax = m.j.component_values(0).iter().chain(m.j.component_values(1)).fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(jmax < 1e-12, "{jmax}");
    }

    #[test]
    fn extension_restores_the_initial_charge() {
        let cfg = ball();
        let outside = ParticleEnsemble::new(vec![Particle { x: [0.05, 0.05], v: [1.0, 0.0], w: 0.3 }]);
        let ext = extend_neutral(&outside, &cfg, 0.5, 0.3);
        assert_eq!(ext.lambda, 0.0);
        assert_eq!(ext.total, 0.3);
        let inside = ParticleEnsemble::new(vec![Particle { x: [0.5, 0.5], v: [1.0, 0.0], w: 0.3 }]);
        let ext = extend_neutral(&inside, &cfg, 0.5, 0.5);
        assert_eq!(ext.inside_factor, 0.0);
        assert!((ext.lambda - 0.5).abs() < 1e-15);
        assert!((ext.total - 0.5).abs() < 1e-15);
        let none = extend_neutral(&ParticleEnsemble::empty(), &cfg, 0.5, 0.0);
        assert_eq!((none.lambda, none.total), (0.0, 0.0));
    }
}
